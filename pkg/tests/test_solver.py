"""
Unit tests of the projections, the alternating projected gradient solver,
radius cross-validation and the matricized baseline.
"""
from typing import List
import itertools
import math

import numpy as np
import pytest
from pydantic import ValidationError

from one_bit_tensor.tensor_core import DenseTensor, CpFactorSet, cp_expand, infinity_norm, row_norms
from one_bit_tensor.observation_model import (
    LinkFunction,
    ObservationSet,
    RealObservationSet,
    SamplingDistribution,
    UNDITHERED,
    sample_indices,
    quantize
)
from one_bit_tensor.likelihood import nll, SquaredLoss, total_loss
from one_bit_tensor.solver import (
    SolverConfig,
    project_row_norm,
    rescale_infinity,
    initial_factors,
    fit_max_qnorm,
    fit_matricized,
    cross_validate_radius,
    default_radius_grid
)

LOGISTIC = LinkFunction.logistic()


def _repeated(pattern: np.ndarray, agreeing: int, disagreeing: int = 0) -> ObservationSet:
    """Every entry of 'pattern' observed 'agreeing' times with its sign, 'disagreeing' times against it."""
    shape = pattern.shape
    indices, labels = [], []
    for index in itertools.product(*(range(n) for n in shape)):
        sign = 1 if pattern[index] >= 0 else -1
        indices += [index] * (agreeing + disagreeing)
        labels += [sign] * agreeing + [-sign] * disagreeing
    return ObservationSet(shape=shape, indices=np.array(indices), labels=np.array(labels))


def _synthetic_obs(shape, m: int, seed: int, link=LinkFunction.probit(0.1)) -> ObservationSet:
    rng = np.random.default_rng(seed)
    factors = CpFactorSet(tuple(rng.uniform(-1.0, 1.0, size=(n, 2)) for n in shape))
    truth = cp_expand(factors)
    truth = truth.scaled(1.0 / infinity_norm(truth))
    return quantize(truth, sample_indices(SamplingDistribution.uniform(shape), m, seed), link, seed)


@pytest.mark.parametrize(
    "row,bound,expected",
    [
        ([3.0, 4.0], 1.0, [0.6, 0.8]),    # Query 0 - norm 5 row scaled back
        ([0.1, 0.1], 1.0, [0.1, 0.1]),    # Query 1 - feasible row unchanged
        ([3.0, 4.0], 5.0, [3.0, 4.0])     # Query 2 - on the boundary
    ]
)
def test_project_row_norm_examples(row: List[float], bound: float, expected: List[float]):
    assert np.allclose(project_row_norm(np.array([row]), bound), np.array([expected]), rtol=0, atol=1e-15)


@pytest.mark.parametrize("seed", range(10))
def test_project_row_norm_is_idempotent_and_feasible(seed: int):
    rng = np.random.default_rng(seed)
    matrix = rng.normal(scale=3.0, size=(12, 5))
    bound = float(rng.uniform(0.1, 4.0))
    once = project_row_norm(matrix, bound)
    assert np.array_equal(project_row_norm(once, bound), once)
    assert np.all(row_norms(once) <= bound * (1 + 1e-9))


def test_project_row_norm_is_nonexpansive():
    rng = np.random.default_rng(2024)
    for _ in range(100):
        a, b = rng.normal(scale=2.0, size=(2, 6, 3))
        bound = float(rng.uniform(0.2, 3.0))
        distance = np.linalg.norm(project_row_norm(a, bound) - project_row_norm(b, bound))
        assert distance <= np.linalg.norm(a - b) + 1e-12


def test_project_row_norm_bounds():
    matrix = np.array([[30.0, 40.0]])
    projected = project_row_norm(matrix, math.inf)
    assert np.array_equal(projected, matrix) and projected is not matrix
    with pytest.raises(ValueError):
        project_row_norm(matrix, 0.0)


def test_rescale_infinity():
    twos = CpFactorSet((2.0 * np.ones((2, 1)), np.ones((2, 1)), np.ones((2, 1))))
    rescaled = rescale_infinity(twos, 1.0)
    assert infinity_norm(cp_expand(rescaled)) == pytest.approx(1.0, abs=1e-15)
    assert np.allclose(rescaled.factors[0], twos.factors[0] * 0.5)
    small = CpFactorSet((0.5 * np.ones((2, 1)), np.ones((2, 1))))
    assert rescale_infinity(small, 1.0) is small


@pytest.mark.parametrize(
    "settings",
    [
        {"r_max": -1.0},            # Query 0
        {"r_max": float("nan")},    # Query 1
        {"max_outer": 0},           # Query 2
        {"step_shrink": 1.5},       # Query 3
        {"unknown": 1}              # Query 4 - extra fields are rejected
    ]
)
def test_solver_config_validation(settings):
    with pytest.raises(ValidationError):
        SolverConfig(**settings)


def test_solver_config_defaults():
    config = SolverConfig()
    assert config.columns_for((20, 30, 10)) == 60
    assert config.model_copy(update={"k_cap": 3}).columns_for((20, 30, 10)) == 3
    assert config.row_bound(3) == pytest.approx(1.0)
    assert default_radius_grid(1.0) == [1.0, 2.0, 4.0, 8.0, 16.0, 32.0, 64.0, 128.0]


def test_fit_requires_observations():
    with pytest.raises(ValueError):
        fit_max_qnorm(None, LOGISTIC)


@pytest.mark.parametrize("max_outer", [1, 2, 5])
@pytest.mark.parametrize("r_max", [0.5, 2.0, 10.0])
def test_fit_stays_feasible_and_descends(max_outer: int, r_max: float):
    obs = _synthetic_obs((5, 4, 6), 80, seed=int(r_max * 10) + max_outer)
    config = SolverConfig(r_max=r_max, k_cap=3, max_outer=max_outer, max_inner=5, seed=1)
    result = fit_max_qnorm(obs, LinkFunction.probit(0.1), config)
    bound = r_max ** (1.0 / 3)
    for factor in result.factors.factors:
        assert np.all(row_norms(factor) <= bound * (1 + 1e-9))
    assert np.all(np.diff(result.objective_trace) <= 1e-10)
    assert result.objective == pytest.approx(nll(result.factors, obs, LinkFunction.probit(0.1)).value)
    assert len(result.objective_trace) == result.iterations + 1


def test_fit_recovers_rank_one_sign_pattern():
    pattern = np.einsum("i,j,k->ijk", [1, -1], [1, 1], [-1, 1]).astype(float)
    obs = _repeated(pattern, agreeing=50)
    result = fit_max_qnorm(obs, LOGISTIC, SolverConfig(r_max=4.0, seed=3))
    assert np.array_equal(np.sign(result.estimate().entries), pattern)


def test_fit_single_positive_observation():
    obs = ObservationSet(shape=(3, 3), indices=[[1, 2]], labels=[1])
    result = fit_max_qnorm(obs, LOGISTIC, SolverConfig(r_max=16.0, k_cap=2, seed=0))
    assert result.estimate().entries[1, 2] > 0.0


def test_fit_enforces_infinity_bound():
    obs = _synthetic_obs((4, 4, 4), 60, seed=4)
    config = SolverConfig(r_max=8.0, alpha=0.5, enforce_infinity=True, k_cap=3, max_outer=10, seed=2)
    result = fit_max_qnorm(obs, LinkFunction.probit(0.1), config)
    assert infinity_norm(result.estimate()) <= 0.5 * (1 + 1e-9)
    assert np.all(np.diff(result.objective_trace) <= 1e-10)


def test_unconstrained_fit():
    obs = _synthetic_obs((4, 5), 15, seed=8)
    result = fit_max_qnorm(obs, LOGISTIC, SolverConfig(r_max=math.inf, k_cap=2, max_outer=20, seed=0))
    assert math.isinf(result.chosen_r)
    assert np.all(np.diff(result.objective_trace) <= 1e-10)


def _grid_oracle(obs: ObservationSet, r_max: float, step: float = 0.05) -> float:
    # k = 1 factorizations of a 2 x 2 matrix with every factor entry in [-sqrt(R), sqrt(R)]
    values = np.arange(-math.sqrt(r_max), math.sqrt(r_max) + step / 2, step)
    u0, u1, v0, v1 = np.meshgrid(values, values, values, values, indexing="ij", sparse=True)
    entries = {(0, 0): u0 * v0, (0, 1): u0 * v1, (1, 0): u1 * v0, (1, 1): u1 * v1}
    total = 0.0
    for (i, j), y in zip(map(tuple, obs.indices), obs.labels):
        total = total + np.logaddexp(0.0, -y * entries[(i, j)])
    return float(np.min(total))


@pytest.mark.parametrize(
    "pattern,agreeing,disagreeing,r_max",
    [
        (np.array([[1.0, -1.0], [1.0, -1.0]]), 20, 0, 1.0),    # Query 0 - optimum on the constraint boundary
        (np.array([[1.0, 1.0], [-1.0, -1.0]]), 40, 10, 4.0),   # Query 1 - interior optimum, logits log 4
        (np.array([[-1.0, 1.0], [1.0, -1.0]]), 30, 0, 0.5)     # Query 2
    ]
)
def test_small_instance_oracle(pattern: np.ndarray, agreeing: int, disagreeing: int, r_max: float):
    obs = _repeated(pattern, agreeing, disagreeing)
    config = SolverConfig(r_max=r_max, k_cap=2, max_outer=500, max_inner=50, tol=1e-12, seed=0)
    result = fit_max_qnorm(obs, LOGISTIC, config)

    # every entry of a feasible X satisfies |X(w)| <= R_max, so each entry's loss is
    # bounded below by its best value on [-R_max, R_max]; rank-one patterns attain it
    n = agreeing + disagreeing
    p = agreeing / n
    best_x = min(math.log(p / (1 - p)), r_max) if disagreeing else r_max
    per_entry = agreeing * math.log1p(math.exp(-best_x)) + disagreeing * math.log1p(math.exp(best_x))
    optimum = 4 * per_entry

    assert result.objective >= optimum - 1e-9
    assert result.objective <= optimum + 1e-3
    if disagreeing == 0:
        assert optimum <= _grid_oracle(obs, r_max) + 1e-9


def test_cross_validation_single_value_grid():
    obs = _synthetic_obs((4, 4, 4), 40, seed=1)
    best, result = cross_validate_radius(obs, LinkFunction.probit(0.1), SolverConfig(max_outer=3, k_cap=2), grid=[3.0])
    assert best == 3.0
    assert result.chosen_r == 3.0
    assert result.cv_table == []


def test_cross_validation_picks_the_first_minimum():
    obs = _synthetic_obs((6, 6, 6), 300, seed=2)
    config = SolverConfig(max_outer=8, max_inner=5, k_cap=3, seed=0)
    grid = [1.0, 5.0, 5.0, 25.0]
    best, result = cross_validate_radius(obs, LinkFunction.probit(0.1), config, grid=grid, holdout_fraction=0.2)
    radii = [r for r, _ in result.cv_table]
    scores = [score for _, score in result.cv_table]
    assert radii == grid
    assert scores[1] == scores[2]
    assert best == radii[int(np.argmin(scores))]
    assert all(scores[radii.index(best)] <= score for score in scores)
    assert result.chosen_r == best
    assert len(result.objective_trace) >= 1


def test_cross_validation_with_explicit_validation_positions():
    obs = _synthetic_obs((5, 5), 40, seed=3)
    config = SolverConfig(max_outer=4, k_cap=2, seed=0)
    best, result = cross_validate_radius(obs, LOGISTIC, config, grid=[1.0, 4.0], validation=[0, 1, 2, 3])
    assert best in (1.0, 4.0)
    assert len(result.cv_table) == 2
    with pytest.raises(ValueError):
        cross_validate_radius(obs, LOGISTIC, config, grid=[1.0, 4.0], validation=list(range(40)))


@pytest.mark.parametrize(
    "grid,holdout",
    [
        ([], 0.1),          # Query 0 - empty grid
        ([1.0, -2.0], 0.1),  # Query 1 - nonpositive radius
        ([1.0, 2.0], 0.0),   # Query 2 - no holdout
        ([1.0, 2.0], 0.5)    # Query 3 - holdout too large
    ]
)
def test_cross_validation_errors(grid: List[float], holdout: float):
    obs = _synthetic_obs((4, 4), 20, seed=0)
    with pytest.raises(ValueError):
        cross_validate_radius(obs, LOGISTIC, SolverConfig(max_outer=2), grid=grid, holdout_fraction=holdout)


def test_matricized_order_two_matches_direct_fit():
    obs = _synthetic_obs((6, 5), 25, seed=5, link=LOGISTIC)
    config = SolverConfig(r_max=3.0, k_cap=3, max_outer=15, seed=9)
    direct = fit_max_qnorm(obs, LOGISTIC, config)
    matricized = fit_matricized(obs, LOGISTIC, config, [0])
    assert matricized.objective_trace == direct.objective_trace
    assert np.array_equal(matricized.estimate().entries, direct.estimate().entries)


def test_matricized_fit_returns_tensor_coordinates():
    obs = _synthetic_obs((3, 4, 2), 20, seed=6)
    config = SolverConfig(r_max=2.0, k_cap=2, max_outer=5, seed=0)
    result = fit_matricized(obs, LinkFunction.probit(0.1), config, [0, 2])
    assert result.factors.shape == (6, 4)
    assert result.estimate().shape == (3, 4, 2)
    assert result.row_modes == [0, 2]
    assert np.all(np.diff(result.objective_trace) <= 1e-10)


def test_matricized_cross_validation():
    obs = _synthetic_obs((4, 4, 4), 60, seed=7)
    config = SolverConfig(k_cap=2, max_outer=3, seed=0)
    best, result = cross_validate_radius(obs, LinkFunction.probit(0.1), config, grid=[1.0, 8.0], row_modes=[0])
    assert best in (1.0, 8.0)
    assert result.estimate().shape == (4, 4, 4)


def test_undithered_observations_can_be_fitted():
    truth = DenseTensor(np.array([[0.5, -0.5], [-0.5, 0.5]]))
    obs = quantize(truth, np.array([[0, 0], [0, 1], [1, 0], [1, 1]] * 5), UNDITHERED)
    result = fit_max_qnorm(obs, LOGISTIC, SolverConfig(r_max=2.0, k_cap=2, seed=0))
    assert np.array_equal(np.sign(result.estimate().entries), np.sign(truth.entries))


def test_fit_is_deterministic():
    obs = _synthetic_obs((5, 4, 3), 50, seed=11)
    config = SolverConfig(r_max=4.0, k_cap=3, max_outer=8, seed=5)
    first = fit_max_qnorm(obs, LinkFunction.probit(0.1), config)
    second = fit_max_qnorm(obs, LinkFunction.probit(0.1), config)
    for left, right in zip(first.factors.factors, second.factors.factors):
        assert np.array_equal(left, right)
    assert first.objective_trace == second.objective_trace


@pytest.mark.parametrize("bound", [0.5, 1.0, 3.0])
def test_nonnegative_initial_factors(bound: float):
    factors = initial_factors((6, 4, 3), 5, bound, seed=2, nonnegative=True)
    for factor in factors.factors:
        assert np.all(factor >= 0.0)
        assert np.all(row_norms(factor) <= bound * (1 + 1e-9))


@pytest.mark.parametrize(
    "mode_order,shape,expected",
    [
        ("cyclic", (30, 20, 4), [0, 1, 2]),           # Query 0 - modes 1..d
        ("densest_first", (30, 20, 4), [2, 1, 0]),    # Query 1 - fewest rows first
        ("densest_first", (5, 2, 9), [1, 0, 2]),      # Query 2 - unsorted shape
        ("densest_first", (4, 4), [0, 1])             # Query 3 - ties keep mode order
    ]
)
def test_update_order(mode_order: str, shape, expected: List[int]):
    assert SolverConfig(mode_order=mode_order).update_order(shape) == expected


def test_densest_first_nonnegative_fit_stays_feasible_and_descends():
    obs = _synthetic_obs((6, 5, 2), 70, seed=12)
    config = SolverConfig(r_max=4.0, k_cap=3, max_outer=10, init="nonnegative", mode_order="densest_first", seed=0)
    result = fit_max_qnorm(obs, LinkFunction.probit(0.1), config)
    bound = 4.0 ** (1.0 / 3)
    for factor in result.factors.factors:
        assert np.all(row_norms(factor) <= bound * (1 + 1e-9))
    assert np.all(np.diff(result.objective_trace) <= 1e-10)


def _real_rank_one(repeats: int = 3) -> RealObservationSet:
    truth = np.einsum("i,j,k->ijk", [0.8, -0.6], [0.7, 0.9], [-0.5, 0.8])
    indices = np.array(list(itertools.product(range(2), range(2), range(2))) * repeats)
    return RealObservationSet(shape=(2, 2, 2), indices=indices, values=truth[tuple(indices.T)])


def test_squared_loss_fit_recovers_observed_values():
    obs = _real_rank_one()
    truth = np.einsum("i,j,k->ijk", [0.8, -0.6], [0.7, 0.9], [-0.5, 0.8])
    result = fit_max_qnorm(obs, None, SolverConfig(r_max=4.0, k_cap=2, seed=0))
    assert np.max(np.abs(result.estimate().entries - truth)) < 0.1
    assert np.all(np.diff(result.objective_trace) <= 1e-12)
    assert result.objective == pytest.approx(total_loss(result.factors, obs, SquaredLoss()))


def test_squared_loss_cross_validation_and_matricized_fit():
    obs = _real_rank_one(repeats=4)
    config = SolverConfig(k_cap=2, max_outer=5, seed=1)
    best, result = cross_validate_radius(obs, None, config, grid=[1.0, 4.0])
    assert best in (1.0, 4.0)
    assert [r for r, _ in result.cv_table] == [1.0, 4.0]
    assert all(math.isfinite(score) for _, score in result.cv_table)
    matricized = fit_matricized(obs, None, config, [0])
    assert matricized.estimate().shape == (2, 2, 2)
    assert np.all(np.diff(matricized.objective_trace) <= 1e-12)


def test_one_bit_fit_requires_a_link():
    obs = _synthetic_obs((3, 3), 5, seed=0)
    with pytest.raises(ValueError):
        fit_max_qnorm(obs, None, SolverConfig(max_outer=1))
