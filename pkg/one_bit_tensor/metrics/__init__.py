"""
Evaluation metrics (RSE, MAE, sign accuracy, Pi-weighted MSE, Hellinger and
KL divergences) and evaluators for the closed-form error and complexity bounds.

The absolute constants of the bounds are not known; with their default value
of 1 the evaluators give "shape-only" curves, not certified bounds.
"""
from typing import Dict, Tuple, Sequence
import math

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, PositiveFloat
from scipy.special import rel_entr

from one_bit_tensor.tensor_core import DenseTensor, check_indices, frobenius_norm
from one_bit_tensor.observation_model import LinkConstants, SamplingDistribution

KL_CLAMP: float = 1e-12

BOUND_KINDS = ("max", "M")


class BoundConstants(BaseModel):
    """
    Constants of the error bounds; c1 and c2 enter through K_G = c1 * c2^2.
    """
    model_config = ConfigDict(frozen=True)

    c1: PositiveFloat = 0.9
    c2: PositiveFloat = 1.4142
    C_max: PositiveFloat = Field(1.0, description="unspecified absolute constant")
    C_M: PositiveFloat = Field(1.0, description="unspecified absolute constant")
    C0: PositiveFloat = Field(1.0, description="unspecified absolute constant")
    C1: PositiveFloat = Field(1.0, description="unspecified absolute constant")
    C2: PositiveFloat = Field(1.0, description="unspecified absolute constant")

    @property
    def K_G(self) -> float:
        return self.c1 * self.c2 ** 2


def _check_same_shape(estimate: DenseTensor, truth: DenseTensor, caller: str):
    if estimate.shape != truth.shape:
        raise ValueError(f"{caller}(): shape mismatch {estimate.shape} vs {truth.shape}")


def rse(estimate: DenseTensor, truth: DenseTensor) -> float:
    """
    Relative squared error ||T_hat - T||_F^2 / ||T||_F^2.
    """
    _check_same_shape(estimate, truth, "rse")
    scale = frobenius_norm(truth) ** 2
    if scale == 0.0:
        raise ValueError("rse(): the ground truth tensor is zero")
    return frobenius_norm(estimate - truth) ** 2 / scale


def _test_values(estimate: DenseTensor, indices: np.ndarray, truths: Sequence[float], caller: str):
    idx = check_indices(indices, estimate.shape)
    truths = np.asarray(truths, dtype=np.float64).ravel()
    if idx.shape[0] == 0:
        raise ValueError(f"{caller}(): the test set is empty")
    if truths.shape[0] != idx.shape[0]:
        raise ValueError(f"{caller}(): {idx.shape[0]} test indices but {truths.shape[0]} values")
    return estimate.entries[tuple(idx.T)], truths


def _sign(values: np.ndarray, threshold: float, strict: bool = False) -> np.ndarray:
    # ties go to + unless 'strict', where only values above the threshold are +
    above = values - threshold > 0.0 if strict else values - threshold >= 0.0
    return np.where(above, 1, -1)


def sign_hits(predicted: np.ndarray, truths: np.ndarray, threshold: float = 0.0, strict_truth: bool = False) -> np.ndarray:
    """
    Per-entry agreement of sign(prediction - eta) and sign(truth - eta).

    :param predicted: np.ndarray, predicted values (ties predicted +)
    :param truths: np.ndarray, true values
    :param threshold: float, eta
    :param strict_truth: bool, a truth equal to eta counts as - (the rule of thresholded training labels)
    :return: np.ndarray of bool
    """
    predicted = np.asarray(predicted, dtype=np.float64)
    truths = np.asarray(truths, dtype=np.float64)
    return _sign(predicted, threshold) == _sign(truths, threshold, strict=strict_truth)


def mean_by_level(values: np.ndarray, levels: np.ndarray) -> Dict[float, float]:
    """Mean of 'values' over each distinct entry of 'levels'."""
    values = np.asarray(values, dtype=np.float64)
    levels = np.asarray(levels, dtype=np.float64)
    return {float(level): float(np.mean(values[levels == level])) for level in np.unique(levels)}


def sign_accuracy(
        estimate: DenseTensor,
        indices: np.ndarray,
        truths: Sequence[float],
        threshold: float = 0.0,
        strict_truth: bool = False
) -> float:
    """
    Fraction of test entries where sign(T_hat(w) - eta) agrees with sign(T(w) - eta).

    :param estimate: DenseTensor, T_hat
    :param indices: np.ndarray, m x d test indices (0-based)
    :param truths: Sequence[float], true values at the test indices
    :param threshold: float, eta
    :param strict_truth: bool, count truths equal to eta as - instead of +
    :return: float in [0, 1]
    """
    predicted, truths = _test_values(estimate, indices, truths, "sign_accuracy")
    return float(np.mean(sign_hits(predicted, truths, threshold, strict_truth)))


def sign_accuracy_by_level(
        estimate: DenseTensor,
        indices: np.ndarray,
        truths: Sequence[float],
        threshold: float = 0.0,
        strict_truth: bool = False
) -> Dict[float, float]:
    """Sign accuracy restricted to each distinct true value (e.g. rating level)."""
    predicted, truths = _test_values(estimate, indices, truths, "sign_accuracy_by_level")
    return mean_by_level(sign_hits(predicted, truths, threshold, strict_truth), truths)


def mae(estimate: DenseTensor, indices: np.ndarray, truths: Sequence[float]) -> float:
    """Mean absolute error on the test entries."""
    predicted, truths = _test_values(estimate, indices, truths, "mae")
    return float(np.mean(np.abs(truths - predicted)))


def mae_by_level(estimate: DenseTensor, indices: np.ndarray, truths: Sequence[float]) -> Dict[float, float]:
    predicted, truths = _test_values(estimate, indices, truths, "mae_by_level")
    return mean_by_level(np.abs(truths - predicted), truths)


def accuracy_standard_error(accuracy: float, n: int) -> float:
    """Binomial standard error of an accuracy measured on n test entries."""
    if n < 1:
        raise ValueError("accuracy_standard_error(): need at least one test entry")
    return math.sqrt(max(accuracy * (1.0 - accuracy), 0.0) / n)


def pi_weighted_mse(estimate: DenseTensor, truth: DenseTensor, distribution: SamplingDistribution) -> float:
    """
    sum_w pi_w (T_hat(w) - T(w))^2.
    """
    _check_same_shape(estimate, truth, "pi_weighted_mse")
    if distribution is None or distribution.shape != truth.shape:
        raise ValueError("pi_weighted_mse(): sampling distribution does not match the tensor shape")
    return float(np.sum(distribution.probabilities() * (estimate.entries - truth.entries) ** 2))


def _probabilities(tensor, caller: str) -> np.ndarray:
    values = tensor.entries if isinstance(tensor, DenseTensor) else np.asarray(tensor, dtype=np.float64)
    if np.any(values < 0.0) or np.any(values > 1.0) or not np.all(np.isfinite(values)):
        raise ValueError(f"{caller}(): entries must lie in [0, 1]")
    return values


def hellinger_sq(p, q) -> float:
    """
    Squared Hellinger distance between two tensors (or scalars) of
    probabilities, averaged over the entries.
    """
    p = _probabilities(p, "hellinger_sq")
    q = _probabilities(q, "hellinger_sq")
    if p.shape != q.shape:
        raise ValueError(f"hellinger_sq(): shape mismatch {p.shape} vs {q.shape}")
    terms = (np.sqrt(p) - np.sqrt(q)) ** 2 + (np.sqrt(1.0 - p) - np.sqrt(1.0 - q)) ** 2
    return float(np.mean(terms))


def kl_div(p, q) -> float:
    """
    Kullback-Leibler divergence K(P||Q) between two tensors (or scalars) of
    Bernoulli parameters, averaged over the entries; Q is clamped away from {0, 1}
    wherever it differs from P.
    """
    p = _probabilities(p, "kl_div")
    q = _probabilities(q, "kl_div")
    if p.shape != q.shape:
        raise ValueError(f"kl_div(): shape mismatch {p.shape} vs {q.shape}")
    q = np.where(p == q, q, np.clip(q, KL_CLAMP, 1.0 - KL_CLAMP))
    return float(np.mean(rel_entr(p, q) + rel_entr(1.0 - p, 1.0 - q)))


def rank_norm_bounds(r: float, d: int, alpha: float) -> Tuple[float, float]:
    """
    Rank-based upper bounds on the max-qnorm and M-norm of a rank-r, order-d
    tensor with ||T||_inf <= alpha.

    :return: Tuple, (r^((d^2 - d)/2) alpha, (r^(3/2))^(d - 1) alpha)
    """
    if not r >= 1 or d < 2 or not alpha > 0:
        raise ValueError(f"rank_norm_bounds(): invalid arguments r={r}, d={d}, alpha={alpha}")
    return r ** ((d * d - d) / 2.0) * alpha, (r ** 1.5) ** (d - 1) * alpha


def _bound_constant(kind: str, consts: BoundConstants, d: int) -> float:
    if kind not in BOUND_KINDS:
        raise ValueError(f"unknown bound kind '{kind}', expected one of {BOUND_KINDS}")
    return consts.C_max * consts.c2 ** d if kind == "max" else consts.C_M


def theorem1_rhs(
        kind: str,
        consts: BoundConstants,
        link_consts: LinkConstants,
        R: float,
        d: int,
        N: int,
        m: int,
        delta: float
) -> float:
    """
    Right hand side of the Pi-weighted error bound of the max-qnorm ('max') or
    M-norm ('M') constrained estimate:

        C beta {L R sqrt(dN/m) + U sqrt(log(4/delta)/m)},  C = C_max c2^d or C_M.
    """
    if not 0 < delta < 1:
        raise ValueError(f"theorem1_rhs(): delta must lie in (0, 1), got {delta}")
    if not (R > 0 and d > 0 and N > 0 and m > 0):
        raise ValueError("theorem1_rhs(): R, d, N and m must be positive")
    scale = _bound_constant(kind, consts, d) * link_consts.beta
    return scale * (
        link_consts.L * R * math.sqrt(d * N / m) + link_consts.U * math.sqrt(math.log(4.0 / delta) / m)
    )


def corollary_rhs(
        kind: str,
        consts: BoundConstants,
        link_consts: LinkConstants,
        r: float,
        alpha: float,
        d: int,
        N: int,
        m: int,
        delta: float
) -> float:
    """theorem1_rhs() at the rank-based radius of a rank-r tensor bounded by alpha."""
    max_radius, m_radius = rank_norm_bounds(r, d, alpha)
    return theorem1_rhs(kind, consts, link_consts, max_radius if kind == "max" else m_radius, d, N, m, delta)


def uniform_sampling_rhs(consts: BoundConstants, link_consts: LinkConstants, R: float, d: int, N: int, m: int) -> float:
    """
    Bound on (1/N^d) ||T - T_hat_max||_F^2 when every entry has a comparable
    chance of being sampled (log(dN) replaces log(4/delta); C_max stands for C_eta).
    """
    if not (R > 0 and d > 0 and N > 0 and m > 0):
        raise ValueError("uniform_sampling_rhs(): R, d, N and m must be positive")
    return consts.C_max * link_consts.beta * (
        link_consts.L * R * math.sqrt(d * N / m) + link_consts.U * math.sqrt(math.log(d * N) / m)
    )


def rademacher_bounds(d: int, N: int, m: int, consts: BoundConstants) -> Tuple[float, float]:
    """
    Rademacher complexity bounds of the unit M-norm ball and of the unit
    max-qnorm ball: (6 sqrt(dN/m), 6 c1 c2^d sqrt(dN/m)).
    """
    if not (d > 0 and N > 0 and m > 0):
        raise ValueError("rademacher_bounds(): d, N and m must be positive")
    m_ball = 6.0 * math.sqrt(d * N / m)
    return m_ball, m_ball * consts.c1 * consts.c2 ** d
