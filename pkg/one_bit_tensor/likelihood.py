"""
Negative log-likelihood of 1-bit observations and its gradients.

With a symmetric link, the loss of one sample is g(x; y) = -log f(y x), which
covers both log(1/f(x)) for y = +1 and log(1/(1 - f(x))) for y = -1.
Unquantized observations are fitted with a squared loss through the same
per-entry loss interface (losses, slopes).
"""
from typing import Optional, Union
from dataclasses import dataclass

import numpy as np

from one_bit_tensor.tensor_core import CpFactorSet, cp_eval_entries, partner_products
from one_bit_tensor.observation_model import LinkFunction, ObservationSet, RealObservationSet


@dataclass(frozen=True, eq=False)
class ObjectiveValue:
    """Total loss over the observations, optionally with the per-sample losses."""
    value: float
    per_sample: Optional[np.ndarray] = None

    @property
    def average(self) -> float:
        if self.per_sample is None:
            raise ValueError("ObjectiveValue.average: per-sample losses were not retained")
        return float(self.value / self.per_sample.shape[0])


def sample_losses(x: np.ndarray, y: np.ndarray, link: LinkFunction) -> np.ndarray:
    """
    g(x; y) for each sample.

    :param x: np.ndarray, entry values X(w)
    :param y: np.ndarray, labels in {-1, +1}
    :param link: LinkFunction
    :return: np.ndarray of nonnegative losses
    """
    return -link.log_cdf(np.asarray(y) * np.asarray(x, dtype=np.float64))


def nll_grad_entry(x, y, link: LinkFunction):
    """
    dg/dx: -f'(x)/f(x) for y = +1 and f'(x)/(1 - f(x)) for y = -1.
    """
    y = np.asarray(y)
    grad = -y * link.dlog_cdf(y * np.asarray(x, dtype=np.float64))
    return float(grad) if np.ndim(grad) == 0 else grad


def _check_compatible(factors: CpFactorSet, obs, caller: str = "nll"):
    if factors.shape != obs.shape:
        raise ValueError(f"{caller}(): factor shape {factors.shape} does not match observation shape {obs.shape}")


def nll(factors: CpFactorSet, obs: ObservationSet, link: LinkFunction, keep_per_sample: bool = False) -> ObjectiveValue:
    """
    Negative log-likelihood of the observations at X = cp_expand(factors),
    counting duplicated samples with their multiplicity.

    :param factors: CpFactorSet
    :param obs: ObservationSet
    :param link: LinkFunction used for the fit
    :param keep_per_sample: bool, retain the per-sample losses
    :return: ObjectiveValue
    """
    _check_compatible(factors, obs)
    losses = sample_losses(cp_eval_entries(factors, obs.indices), obs.labels, link)
    return ObjectiveValue(
        value=float(losses.sum()),
        per_sample=losses if keep_per_sample else None
    )


def nll_grad_factor(factors: CpFactorSet, obs: ObservationSet, link: LinkFunction, mode: int) -> np.ndarray:
    """
    Gradient of the negative log-likelihood with respect to the factor of one mode.

    :param factors: CpFactorSet
    :param obs: ObservationSet
    :param link: LinkFunction
    :param mode: int, 0-based mode j
    :return: np.ndarray of shape N_j x k
    """
    _check_compatible(factors, obs)
    if not 0 <= mode < factors.order:
        raise ValueError(f"nll_grad_factor(): invalid mode {mode} for an order {factors.order} tensor")
    partners = partner_products(factors, obs.indices, skip=mode)
    x = np.sum(factors.factors[mode][obs.indices[:, mode]] * partners, axis=1)
    return accumulate_rows(
        nll_grad_entry(x, obs.labels, link)[:, np.newaxis] * partners,
        obs.indices[:, mode],
        factors.shape[mode]
    )


@dataclass(frozen=True)
class LinkLoss:
    """The 1-bit loss g(x; y) of a link, as used by the solver."""
    link: LinkFunction

    def losses(self, x: np.ndarray, targets: np.ndarray) -> np.ndarray:
        return sample_losses(x, targets, self.link)

    def slopes(self, x: np.ndarray, targets: np.ndarray) -> np.ndarray:
        return nll_grad_entry(x, targets, self.link)

    def describe(self) -> str:
        return self.link.describe()


@dataclass(frozen=True)
class SquaredLoss:
    """(x - v)^2 / 2 for unquantized observations v."""

    def losses(self, x: np.ndarray, targets: np.ndarray) -> np.ndarray:
        return 0.5 * (np.asarray(x, dtype=np.float64) - targets) ** 2

    def slopes(self, x: np.ndarray, targets: np.ndarray) -> np.ndarray:
        return np.asarray(x, dtype=np.float64) - targets

    def describe(self) -> str:
        return "squared loss"


EntryLoss = Union[LinkLoss, SquaredLoss]


def entry_loss(obs: Union[ObservationSet, RealObservationSet], link: Optional[LinkFunction]) -> EntryLoss:
    """
    The per-entry loss that fits 'obs': the link likelihood for 1-bit
    observations, the squared loss for real-valued ones (the link is unused).
    """
    if isinstance(obs, RealObservationSet):
        return SquaredLoss()
    if link is None:
        raise ValueError("entry_loss(): 1-bit observations need a link function")
    return LinkLoss(link)


def total_loss(factors: CpFactorSet, obs: Union[ObservationSet, RealObservationSet], loss: EntryLoss) -> float:
    """Sum of the entry losses of the observations at X = cp_expand(factors)."""
    _check_compatible(factors, obs, "total_loss")
    return float(loss.losses(cp_eval_entries(factors, obs.indices), obs.targets).sum())


def accumulate_rows(contributions: np.ndarray, rows: np.ndarray, n_rows: int) -> np.ndarray:
    """Sum per-sample gradient rows into their factor rows, in sample order."""
    grad = np.zeros((n_rows, contributions.shape[1]))
    np.add.at(grad, rows, contributions)
    return grad


def finite_difference_factor_gradient(
        factors: CpFactorSet,
        obs: ObservationSet,
        link: LinkFunction,
        mode: int,
        h: float = 1e-5
) -> np.ndarray:
    """
    Central-difference approximation of nll_grad_factor(), entry by entry.
    """
    base = np.array(factors.factors[mode])
    approx = np.zeros_like(base)
    for position in np.ndindex(*base.shape):
        step = np.zeros_like(base)
        step[position] = h / 2.0
        upper = nll(factors.replace(mode, base + step), obs, link).value
        lower = nll(factors.replace(mode, base - step), obs, link).value
        approx[position] = (upper - lower) / h
    return approx
