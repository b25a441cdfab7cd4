"""
Max-qnorm constrained maximum-likelihood estimation by alternating projected
gradient over the CP factors, cross-validation of the max-qnorm radius and the
matricized (matrix max-norm) baseline.

The same solver fits unquantized observations (RealObservationSet) with a
squared loss in place of the 1-bit likelihood.
"""
from typing import Optional, List, Tuple, Sequence, Union, Literal
from dataclasses import dataclass, field
import math

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator
from sklearn.model_selection import train_test_split

from one_bit_tensor.tensor_core import (
    Shape,
    DenseTensor,
    CpFactorSet,
    cp_expand,
    infinity_norm,
    factor_max_qnorm,
    row_norms,
    partner_products,
    matricize_indices,
    unmatricize
)
from one_bit_tensor.observation_model import LinkFunction, ObservationSet, RealObservationSet, SamplingDistribution
from one_bit_tensor.likelihood import EntryLoss, entry_loss, total_loss, accumulate_rows

import logging
logger = logging.getLogger(__name__)

# rows within this relative slack of the bound count as feasible,
# which keeps project_row_norm() exactly idempotent
ROW_NORM_SLACK: float = 1e-12


class SolverConfig(BaseModel):
    """
    Settings of fit_max_qnorm(); 'r_max' may be infinite for an unconstrained factorization.
    """
    model_config = ConfigDict(frozen=True, extra="forbid")

    r_max: float = Field(1.0, gt=0, description="max-qnorm radius R_max")
    alpha: float = Field(1.0, gt=0, description="infinity-norm bound, used when enforce_infinity is set")
    k_cap: Optional[int] = Field(None, gt=0, description="factor column count (default: 2 * max N_j)")
    max_outer: int = Field(200, gt=0, description="maximum number of alternating sweeps")
    max_inner: int = Field(20, gt=0, description="projected gradient steps per factor per sweep")
    tol: float = Field(1e-6, gt=0, description="relative objective decrease stopping threshold")
    step_init: float = Field(1.0, gt=0)
    step_shrink: float = Field(0.5, gt=0, lt=1)
    sufficient_decrease: float = Field(1e-4, gt=0, lt=1)
    max_backtracks: int = Field(40, gt=0)
    enforce_infinity: bool = False
    init: Literal["symmetric", "nonnegative"] = Field(
        "symmetric", description="random start: uniform on [-1, 1] or on [0, 1]"
    )
    mode_order: Literal["cyclic", "densest_first"] = Field(
        "cyclic", description="factor update order within a sweep: 1..d, or by increasing N_j"
    )
    seed: int = 0

    @field_validator("r_max")
    @classmethod
    def _not_nan(cls, value: float) -> float:
        if math.isnan(value):
            raise ValueError("r_max must be a number")
        return value

    def columns_for(self, shape: Shape) -> int:
        return self.k_cap if self.k_cap is not None else 2 * max(shape)

    def row_bound(self, order: int) -> float:
        """Per-factor row norm bound R_max^(1/d)."""
        return self.r_max ** (1.0 / order)

    def update_order(self, shape: Shape) -> List[int]:
        """Modes in the order their factors are updated within one sweep."""
        if self.mode_order == "cyclic":
            return list(range(len(shape)))
        return sorted(range(len(shape)), key=lambda mode: shape[mode])


@dataclass(eq=False)
class FitResult:
    """
    Recovered factors and the optimization record of one fit.

    For a matricized fit, 'factors' live in matrix coordinates and 'row_modes'
    and 'tensor_shape' describe the index bijection back to the tensor.
    """
    factors: CpFactorSet
    objective_trace: List[float]
    chosen_r: float
    iterations: int
    converged: bool
    row_modes: Optional[List[int]] = None
    tensor_shape: Optional[Shape] = None
    cv_table: List[Tuple[float, float]] = field(default_factory=list)

    @property
    def objective(self) -> float:
        return self.objective_trace[-1]

    def estimate(self) -> DenseTensor:
        """T-hat in the coordinates of the original tensor."""
        expanded = cp_expand(self.factors)
        if self.row_modes is None:
            return expanded
        return unmatricize(expanded, self.tensor_shape, self.row_modes)


def project_row_norm(matrix: np.ndarray, bound: float) -> np.ndarray:
    """
    Projection onto {V : ||V||_{2,inf} <= bound}: rows longer than the bound are
    scaled back to it, other rows are left unchanged.

    :param matrix: np.ndarray, factor matrix
    :param bound: float, positive row norm bound (inf: no-op)
    :return: np.ndarray, the projected matrix
    """
    if not bound > 0:
        raise ValueError(f"project_row_norm(): bound must be positive, got {bound}")
    matrix = np.asarray(matrix, dtype=np.float64)
    if math.isinf(bound):
        return matrix.copy()
    norms = row_norms(matrix)
    over = norms > bound * (1.0 + ROW_NORM_SLACK)
    projected = matrix.copy()
    projected[over] *= (bound / norms[over])[:, np.newaxis]
    return projected


def rescale_infinity(factors: CpFactorSet, alpha: float, mode: int = 0) -> CpFactorSet:
    """
    Approximate projection onto {||V_1 o ... o V_d||_inf <= alpha}: when the
    expanded tensor exceeds alpha, the factor of 'mode' is multiplied by alpha/||T||_inf.

    :param factors: CpFactorSet
    :param alpha: float, infinity-norm bound
    :param mode: int, the factor to rescale (the one just updated)
    :return: CpFactorSet
    """
    if not alpha > 0:
        raise ValueError(f"rescale_infinity(): alpha must be positive, got {alpha}")
    peak = infinity_norm(cp_expand(factors))
    if peak <= alpha:
        return factors
    return factors.replace(mode, factors.factors[mode] * (alpha / peak))


def initial_factors(shape: Shape, k: int, bound: float, seed: int, nonnegative: bool = False) -> CpFactorSet:
    """
    i.i.d. uniform [-1, 1] (or [0, 1]) factors projected onto the feasible row norm ball.
    """
    rng = np.random.default_rng(seed)
    low = 0.0 if nonnegative else -1.0
    return CpFactorSet(tuple(
        project_row_norm(rng.uniform(low, 1.0, size=(n, k)), bound) for n in shape
    ))


Observations = Union[ObservationSet, RealObservationSet]


class _FactorSubproblem:
    """
    f_i(V_i) with every other factor fixed: the partner products are computed
    once and reused by every objective and gradient evaluation of the sweep.
    The loss and gradient decompose over the rows of V_i.
    """
    def __init__(self, factors: CpFactorSet, obs: Observations, loss: EntryLoss, mode: int):
        self.targets = obs.targets
        self.loss_fn = loss
        self.rows = obs.indices[:, mode]
        self.n_rows = factors.shape[mode]
        self.partners = partner_products(factors, obs.indices, skip=mode)

    def entries(self, factor: np.ndarray) -> np.ndarray:
        return np.sum(factor[self.rows] * self.partners, axis=1)

    def loss(self, factor: np.ndarray) -> float:
        return float(self.loss_fn.losses(self.entries(factor), self.targets).sum())

    def gradient(self, factor: np.ndarray) -> np.ndarray:
        slopes = self.loss_fn.slopes(self.entries(factor), self.targets)
        return accumulate_rows(slopes[:, np.newaxis] * self.partners, self.rows, self.n_rows)


def _update_factor(
        factors: CpFactorSet,
        obs: Observations,
        loss: EntryLoss,
        mode: int,
        config: SolverConfig,
        bound: float,
        current: float
) -> Tuple[CpFactorSet, float]:
    """
    Up to max_inner projected gradient steps V <- P(V - gamma grad f_i) on one
    factor, each with an Armijo backtracking search restarted at step_init.
    Returns the updated factors and objective; never increases the objective.
    """
    subproblem = _FactorSubproblem(factors, obs, loss, mode)
    factor = np.array(factors.factors[mode])
    for _ in range(config.max_inner):
        grad = subproblem.gradient(factor)
        gamma = config.step_init
        accepted = False
        for _ in range(config.max_backtracks):
            candidate = project_row_norm(factor - gamma * grad, bound)
            if config.enforce_infinity:
                candidate = rescale_infinity(factors.replace(mode, candidate), config.alpha, mode).factors[mode]
            value = subproblem.loss(candidate)
            decrease = float(np.sum(grad * (candidate - factor)))
            if np.isfinite(value) and value <= current + config.sufficient_decrease * decrease and value <= current:
                accepted = True
                break
            gamma *= config.step_shrink
        if not accepted:
            logger.debug(f"_update_factor(): no descent step found for mode {mode}")
            break
        improvement = current - value
        factor = candidate
        current = value
        if improvement <= config.tol * max(abs(current), 1e-300):
            break
    return factors.replace(mode, factor), current


def fit_max_qnorm(
        obs: Observations,
        link: Optional[LinkFunction],
        config: Optional[SolverConfig] = None,
        init: Optional[CpFactorSet] = None
) -> FitResult:
    """
    Approximate the max-qnorm constrained maximum-likelihood estimate by
    alternating projected gradient over the factors V_1,...,V_d, each kept in
    the l2,inf ball of radius R_max^(1/d).

    :param obs: ObservationSet of 1-bit observations, or RealObservationSet
        for a squared-loss fit of unquantized values
    :param link: LinkFunction used in the likelihood (unused for a RealObservationSet)
    :param config: SolverConfig (default settings when omitted)
    :param init: Optional[CpFactorSet], starting factors (default: seeded random start)
    :return: FitResult
    """
    config = config or SolverConfig()
    if obs is None or len(obs) < 1:
        raise ValueError("fit_max_qnorm(): at least one observation is required")
    loss = entry_loss(obs, link)
    shape = obs.shape
    order = len(shape)
    bound = config.row_bound(order)

    if init is None:
        factors = initial_factors(
            shape, config.columns_for(shape), bound, config.seed, nonnegative=config.init == "nonnegative"
        )
    else:
        if init.shape != shape:
            raise ValueError(f"fit_max_qnorm(): initial factors of shape {init.shape} do not match {shape}")
        factors = CpFactorSet(tuple(project_row_norm(factor, bound) for factor in init.factors))
    if config.enforce_infinity:
        factors = rescale_infinity(factors, config.alpha, 0)

    modes = config.update_order(shape)
    current = total_loss(factors, obs, loss)
    trace: List[float] = [current]
    converged = False
    sweeps = 0
    for sweeps in range(1, config.max_outer + 1):
        previous = current
        for mode in modes:
            factors, current = _update_factor(factors, obs, loss, mode, config, bound, current)
        trace.append(current)
        logger.debug(f"fit_max_qnorm(): sweep {sweeps} objective {current:.6g}")
        if previous - current <= config.tol * max(abs(previous), 1e-300):
            converged = True
            break

    logger.info(
        f"fit_max_qnorm(): shape {shape}, m={len(obs)}, R_max={config.r_max:g}, {loss.describe()}: "
        f"objective {trace[0]:.6g} -> {current:.6g} after {sweeps} sweeps, " +
        f"factor max-qnorm {factor_max_qnorm(factors):.4g}" + ("" if converged else " (not converged)")
    )
    return FitResult(
        factors=factors,
        objective_trace=trace,
        chosen_r=config.r_max,
        iterations=sweeps,
        converged=converged
    )


def matricized_observations(obs: Observations, row_modes: Sequence[int]) -> Observations:
    """
    Observations re-indexed through the matricization bijection.
    """
    rows_cols = matricize_indices(obs.indices, obs.shape, row_modes)
    n_rows = int(np.prod([obs.shape[mode] for mode in row_modes]))
    matrix_shape = (n_rows, int(np.prod(obs.shape)) // n_rows)
    if isinstance(obs, RealObservationSet):
        return RealObservationSet(shape=matrix_shape, indices=rows_cols, values=obs.values)
    distribution = SamplingDistribution.uniform(matrix_shape)
    if not obs.distribution.is_uniform:
        weights = np.zeros(matrix_shape)
        all_indices = np.stack(np.unravel_index(np.arange(int(np.prod(obs.shape))), obs.shape), axis=1)
        weights[tuple(matricize_indices(all_indices, obs.shape, row_modes).T)] = \
            obs.distribution.weights[tuple(all_indices.T)]
        distribution = SamplingDistribution(shape=matrix_shape, weights=weights)
    return ObservationSet(
        shape=matrix_shape,
        indices=rows_cols,
        labels=obs.labels,
        distribution=distribution,
        link=obs.link
    )


def fit_matricized(
        obs: Observations,
        link: Optional[LinkFunction],
        config: Optional[SolverConfig],
        row_modes: Sequence[int],
        init: Optional[CpFactorSet] = None
) -> FitResult:
    """
    Baseline: matricize the observations and solve the max-norm (d = 2)
    constrained 1-bit matrix completion problem with the same solver.

    :param obs: ObservationSet (or RealObservationSet), tensor observations
    :param link: LinkFunction
    :param config: SolverConfig
    :param row_modes: Sequence[int], 0-based modes mapped to the matrix rows
    :param init: Optional[CpFactorSet], starting factors in matrix coordinates
    :return: FitResult in matrix coordinates, carrying the index bijection
    """
    if obs is None or len(obs) < 1:
        raise ValueError("fit_matricized(): at least one observation is required")
    result = fit_max_qnorm(matricized_observations(obs, row_modes), link, config, init=init)
    result.row_modes = [int(mode) for mode in row_modes]
    result.tensor_shape = obs.shape
    return result


def default_radius_grid(alpha: float = 1.0) -> List[float]:
    """Geometric radius grid alpha * 2^j, j = 0..7."""
    return [alpha * 2.0 ** j for j in range(8)]


def _fit(
        obs: Observations,
        link: Optional[LinkFunction],
        config: SolverConfig,
        row_modes: Optional[Sequence[int]]
) -> FitResult:
    if row_modes is None:
        return fit_max_qnorm(obs, link, config)
    return fit_matricized(obs, link, config, row_modes)


def _average_loss(result: FitResult, obs: Observations, loss: EntryLoss) -> float:
    if result.row_modes is not None:
        obs = matricized_observations(obs, result.row_modes)
    return total_loss(result.factors, obs, loss) / len(obs)


def cross_validate_radius(
        obs: Observations,
        link: Optional[LinkFunction],
        config: Optional[SolverConfig] = None,
        grid: Optional[Sequence[float]] = None,
        holdout_fraction: float = 0.1,
        row_modes: Optional[Sequence[int]] = None,
        validation: Optional[Sequence[int]] = None
) -> Tuple[float, FitResult]:
    """
    Choose R_max on a held-out share of the samples and refit on all of them.

    :param obs: ObservationSet, or RealObservationSet (scored by squared loss)
    :param link: LinkFunction
    :param config: SolverConfig; its r_max is replaced by each grid value
    :param grid: Sequence[float], candidate radii (default: default_radius_grid(config.alpha))
    :param holdout_fraction: float, validation share in (0, 0.5)
    :param row_modes: Optional, cross-validate the matricized baseline instead
    :param validation: Optional, explicit validation sample positions (overrides holdout_fraction)
    :return: Tuple, (best radius, FitResult refitted on all samples at that radius)
    """
    config = config or SolverConfig()
    grid = list(default_radius_grid(config.alpha) if grid is None else grid)
    if not grid:
        raise ValueError("cross_validate_radius(): the radius grid is empty")
    if any(not r > 0 for r in grid):
        raise ValueError(f"cross_validate_radius(): grid values must be positive: {grid}")
    if validation is None and not 0 < holdout_fraction < 0.5:
        raise ValueError(f"cross_validate_radius(): holdout fraction must lie in (0, 0.5), got {holdout_fraction}")
    if obs is None or len(obs) < 1:
        raise ValueError("cross_validate_radius(): at least one observation is required")
    loss = entry_loss(obs, link)

    table: List[Tuple[float, float]] = []
    best_r = float(grid[0])
    if len(grid) > 1:
        if len(obs) < 2:
            raise ValueError("cross_validate_radius(): at least two observations are needed to hold some out")
        if validation is None:
            train, validation = train_test_split(
                np.arange(len(obs)), test_size=holdout_fraction, random_state=config.seed, shuffle=True
            )
        else:
            validation = np.unique(np.asarray(validation, dtype=np.int64))
            if len(validation) == 0 or len(validation) >= len(obs) or validation[0] < 0 or validation[-1] >= len(obs):
                raise ValueError("cross_validate_radius(): validation positions must be a proper subset of the samples")
            train = np.setdiff1d(np.arange(len(obs)), validation)
        train_obs, validation_obs = obs.subset(np.sort(train)), obs.subset(np.sort(validation))
        best_score = math.inf
        for radius in grid:
            result = _fit(train_obs, link, config.model_copy(update={"r_max": float(radius)}), row_modes)
            score = _average_loss(result, validation_obs, loss)
            table.append((float(radius), score))
            logger.info(f"cross_validate_radius(): R_max={radius:g} validation {loss.describe()} {score:.6g}")
            # strict comparison: the first of tied radii wins
            if score < best_score:
                best_score, best_r = score, float(radius)

    result = _fit(obs, link, config.model_copy(update={"r_max": best_r}), row_modes)
    result.cv_table = table
    return best_r, result
