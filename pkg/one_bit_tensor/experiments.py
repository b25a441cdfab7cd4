"""
Synthetic experiment sweeps and the ratings recipe.

Available experiments (registry codes):

- sigma       - recovery error over a range of probit noise levels
- sample      - recovery error over ranks and sampling fractions
- robustness  - sign prediction accuracy under a misspecified probit sigma

Every sweep is split into independent cells (one per parameter combination and
repetition) that derive their seeds from the experiment seed and the cell key,
so results do not depend on the order or concurrency of cell execution.
"""
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Literal, Any
from dataclasses import dataclass, field
from functools import wraps
from pathlib import Path
import asyncio
import math

import numpy as np
import pandas as pd
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator
from sklearn.model_selection import train_test_split

from one_bit_tensor.tensor_core import (
    Shape,
    DenseTensor,
    CpFactorSet,
    cp_expand,
    infinity_norm,
    balanced_row_modes,
    check_shape
)
from one_bit_tensor.observation_model import (
    LinkFunction,
    ObservationSet,
    RealObservationSet,
    SamplingDistribution,
    sample_indices,
    quantize
)
from one_bit_tensor.solver import (
    SolverConfig,
    FitResult,
    fit_max_qnorm,
    fit_matricized,
    cross_validate_radius
)
from one_bit_tensor.metrics import (
    rse,
    sign_accuracy,
    sign_hits,
    mean_by_level,
    accuracy_standard_error
)
from one_bit_tensor.io import RatingsTable, ingest_csv, write_metrics_record
from one_bit_tensor.report import RunReport

import logging
logger = logging.getLogger(__name__)

METHODS = ("tensor", "matricized")

FULL_SCALE_SHAPES: Dict[int, Shape] = {3: (30, 30, 30), 4: (15, 15, 15, 15)}

MONOTONE_SLACK: float = 1e-10

_experiments: Dict[str, Callable] = dict()
_experiment_definitions: Dict[str, str] = dict()


def get_experiment_definitions() -> Dict[str, str]:
    return _experiment_definitions.copy()


def get_experiment_codes() -> List[str]:
    return list(_experiments.keys())


def get_experiment_runner(code: str) -> Callable:
    try:
        return _experiments[code]
    except KeyError:
        raise ValueError(f"get_experiment_runner(): unknown experiment '{code}', expected one of {get_experiment_codes()}")


class ExperimentKind:
    """
    Registers a sweep runner under a short experiment code.
    """
    def __init__(self, code: str, kind: str, description: str):
        self.code = code
        self.kind = kind
        self.description = description

    def __call__(self, fn):
        @wraps(fn)
        def wrapper(spec: "ExperimentSpec", *args, **kwargs):
            if spec.kind != self.kind:
                spec = spec.model_copy(update={"kind": self.kind})
            logger.info(f"Running '{self.code}' experiment on shape {spec.shape}")
            return fn(spec, *args, **kwargs)
        _experiments[self.code] = wrapper
        _experiment_definitions[self.code] = self.description
        return wrapper


def _split_list(value):
    # "a,b,c" strings from spec files and the command line; "none" clears an optional list
    if isinstance(value, str):
        if value.strip().lower() in ("", "none"):
            return None
        return [token.strip() for token in value.split(",") if token.strip()]
    return value


class ExperimentSpec(BaseModel):
    """
    Design of one synthetic experiment.
    """
    model_config = ConfigDict(frozen=True, extra="forbid")

    kind: Literal["sigma_sweep", "sample_sweep", "sigma_robustness", "recipe"] = "sigma_sweep"
    shape: Tuple[int, ...] = (20, 20, 20)
    rank: int = Field(5, ge=1)
    ranks: List[int] = [3, 5, 10]
    fraction: float = Field(0.5, gt=0, le=1, description="m / N^d of the sigma experiments")
    fractions: List[float] = [0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9, 1.0]
    sigma: float = Field(0.1, gt=0, description="probit sigma of the sample sweep")
    sigmas: List[float] = [0.001, 0.01, 0.1, 1.0, 10.0]
    true_sigma: float = Field(0.15, gt=0, description="generating sigma of the robustness experiment")
    fit_sigmas: List[float] = [0.05, 0.15, 0.5]
    link: Literal["probit", "logistic"] = "probit"
    repetitions: int = Field(5, ge=1)
    seed: int = Field(0, ge=0)
    methods: List[Literal["tensor", "matricized"]] = ["tensor", "matricized"]
    row_modes: Optional[List[int]] = None
    radius_grid: Optional[List[float]] = None
    validation_fraction: float = Field(0.1, gt=0, lt=0.5)
    test_fraction: float = Field(0.1, gt=0, lt=1)
    k_cap: Optional[int] = Field(None, gt=0)
    max_outer: int = Field(200, gt=0)
    max_inner: int = Field(20, gt=0)
    tol: float = Field(1e-6, gt=0)
    max_workers: int = Field(1, ge=1)
    output: Optional[str] = None

    @field_validator("shape", mode="before")
    @classmethod
    def _shape_text(cls, value):
        return _split_list(value.replace("x", ",")) if isinstance(value, str) else value

    @field_validator(
        "ranks", "fractions", "sigmas", "fit_sigmas", "methods", "row_modes", "radius_grid", mode="before"
    )
    @classmethod
    def _comma_lists(cls, value):
        return _split_list(value)

    @field_validator("shape")
    @classmethod
    def _valid_shape(cls, value):
        return check_shape(value)

    @field_validator("fractions")
    @classmethod
    def _valid_fractions(cls, value):
        if not value or any(not 0 < f <= 1 for f in value):
            raise ValueError(f"sampling fractions must lie in (0, 1]: {value}")
        return value

    @field_validator("ranks", "sigmas", "fit_sigmas", "radius_grid")
    @classmethod
    def _positive(cls, value):
        if value is not None and any(not v > 0 for v in value):
            raise ValueError(f"values must be positive: {value}")
        return value

    def full_scale(self) -> "ExperimentSpec":
        """The same design at full size (30^3 or 15^4)."""
        order = len(self.shape)
        if order not in FULL_SCALE_SHAPES:
            raise ValueError(f"ExperimentSpec.full_scale(): no full size for order {order}")
        return self.model_copy(update={"shape": FULL_SCALE_SHAPES[order]})

    def solver_config(self, seed: int) -> SolverConfig:
        return SolverConfig(
            k_cap=self.k_cap,
            max_outer=self.max_outer,
            max_inner=self.max_inner,
            tol=self.tol,
            seed=seed
        )

    def matrix_row_modes(self) -> List[int]:
        return list(self.row_modes) if self.row_modes is not None else balanced_row_modes(self.shape)

    def fit_link(self, sigma: float) -> LinkFunction:
        return LinkFunction.probit(sigma) if self.link == "probit" else LinkFunction.logistic()


def cell_seed(seed: int, *keys: int) -> int:
    """A reproducible seed for one sweep cell, independent of execution order."""
    return int(np.random.SeedSequence([seed, *keys]).generate_state(1)[0])


def all_indices(shape: Sequence[int]) -> np.ndarray:
    return np.stack(np.unravel_index(np.arange(int(np.prod(shape))), tuple(shape)), axis=1)


def gen_synthetic(shape: Sequence[int], r: int, seed: int) -> DenseTensor:
    """
    A rank-r tensor from i.i.d. uniform [-1, 1] factors, scaled to unit infinity norm.

    :param shape: Sequence[int], tensor dimensions
    :param r: int, CP rank
    :param seed: int
    :return: DenseTensor with ||T||_inf = 1
    """
    shape = check_shape(shape)
    if r < 1:
        raise ValueError(f"gen_synthetic(): rank must be at least 1, got {r}")
    attempt = 0
    while True:
        # substream 0 is the seed itself; later substreams only follow an all-zero draw
        rng = np.random.default_rng(seed if attempt == 0 else np.random.SeedSequence([seed, attempt]))
        factors = CpFactorSet(tuple(rng.uniform(-1.0, 1.0, size=(n, r)) for n in shape))
        tensor = cp_expand(factors)
        peak = infinity_norm(tensor)
        if peak > 0.0:
            return tensor.scaled(1.0 / peak)
        logger.warning(f"gen_synthetic(): all-zero draw for seed {seed}, regenerating")
        attempt += 1


def objective_is_monotone(trace: Sequence[float], slack: float = MONOTONE_SLACK) -> bool:
    return bool(np.all(np.diff(np.asarray(trace, dtype=np.float64)) <= slack))


def fit_method(
        method: str,
        obs: ObservationSet,
        link: LinkFunction,
        spec: ExperimentSpec,
        seed: int
) -> Tuple[float, FitResult]:
    """Cross-validated fit of one method ('tensor' or 'matricized')."""
    return cross_validate_radius(
        obs,
        link,
        spec.solver_config(seed),
        grid=spec.radius_grid,
        holdout_fraction=spec.validation_fraction,
        row_modes=spec.matrix_row_modes() if method == "matricized" else None
    )


def _fit_row(method: str, truth: DenseTensor, result: FitResult, **keys) -> Dict[str, Any]:
    estimate = result.estimate()
    indices = all_indices(truth.shape)
    row: Dict[str, Any] = dict(keys)
    row.update({
        "method": method,
        "rse": rse(estimate, truth),
        "sign_accuracy": sign_accuracy(estimate, indices, truth.entries[tuple(indices.T)], 0.0),
        "chosen_r": result.chosen_r,
        "iterations": result.iterations,
        "converged": result.converged,
        "objective": result.objective,
        "monotone": objective_is_monotone(result.objective_trace)
    })
    return row


SweepCell = Callable[[], List[Dict[str, Any]]]


async def execute_cells(cells: Sequence[SweepCell], max_workers: int = 1) -> List[Dict[str, Any]]:
    """
    Run sweep cells on worker threads, at most 'max_workers' at a time.

    :return: the rows of all cells, in cell order
    """
    semaphore = asyncio.Semaphore(max_workers)

    async def run_cell(cell: SweepCell) -> List[Dict[str, Any]]:
        async with semaphore:
            return await asyncio.to_thread(cell)

    batches = await asyncio.gather(*(run_cell(cell) for cell in cells))
    return [row for batch in batches for row in batch]


def run_cells(cells: Sequence[SweepCell], max_workers: int = 1) -> List[Dict[str, Any]]:
    if max_workers <= 1:
        return [row for cell in cells for row in cell()]
    return asyncio.run(execute_cells(cells, max_workers))


@dataclass(eq=False)
class SweepResult:
    """
    Per-run rows, the aggregated table and derived scalar figures of one sweep.
    """
    spec: ExperimentSpec
    runs: pd.DataFrame
    summary: pd.DataFrame
    figures: Dict[str, float] = field(default_factory=dict)

    def record(self) -> Dict[str, Any]:
        return {
            "experiment": self.spec.kind,
            "spec": self.spec.model_dump(mode="json"),
            "figures": self.figures,
            "all_monotone": bool(self.runs["monotone"].all()) if len(self.runs) else True
        }

    def save(self, output: Optional[str] = None) -> Path:
        """
        Write <output>.csv (aggregate), <output>_runs.csv (per run) and <output>.json (figures).
        """
        target = Path(output or self.spec.output or self.spec.kind)
        target.parent.mkdir(parents=True, exist_ok=True)
        self.summary.to_csv(target.with_suffix(".csv"), index=False)
        self.runs.to_csv(target.with_name(target.stem + "_runs.csv"), index=False)
        write_metrics_record(self.record(), target.with_suffix(".json"))
        return target.with_suffix(".csv")


def _summarize(runs: pd.DataFrame, keys: List[str]) -> pd.DataFrame:
    summary = runs.groupby(keys, sort=True).agg(
        rse_mean=("rse", "mean"),
        rse_std=("rse", "std"),
        rse_median=("rse", "median"),
        sign_accuracy_mean=("sign_accuracy", "mean"),
        repetitions=("rse", "count")
    ).reset_index()
    return summary


def _sorted_runs(rows: List[Dict[str, Any]], keys: List[str]) -> pd.DataFrame:
    return pd.DataFrame(rows).sort_values(keys + ["repetition"], kind="mergesort").reset_index(drop=True)


@ExperimentKind(
    code="sigma",
    kind="sigma_sweep",
    description="Relative squared error of tensor and matricized recovery over a range of probit sigma"
)
def run_sigma_sweep(spec: ExperimentSpec) -> SweepResult:
    """
    For each sigma and repetition: generate a rank-r tensor, sample m = fraction * N^d
    indices, quantize with probit(sigma), fit each method with the same link and
    record the RSE.  Truth and sample indices are shared across sigma within a repetition.
    """
    n_samples = max(1, int(round(spec.fraction * np.prod(spec.shape))))

    def make_cell(s: int, sigma: float, repetition: int) -> SweepCell:
        def cell() -> List[Dict[str, Any]]:
            seed = cell_seed(spec.seed, repetition)
            truth = gen_synthetic(spec.shape, spec.rank, seed)
            indices = sample_indices(SamplingDistribution.uniform(spec.shape), n_samples, cell_seed(seed, 1))
            link = spec.fit_link(sigma)
            obs = quantize(truth, indices, link, cell_seed(seed, 2, s))
            rows = []
            for method in spec.methods:
                _, result = fit_method(method, obs, link, spec, cell_seed(seed, 3))
                rows.append(_fit_row(
                    method, truth, result,
                    sigma=sigma, rank=spec.rank, fraction=spec.fraction, repetition=repetition, seed=seed
                ))
            return rows
        return cell

    cells = [
        make_cell(s, sigma, repetition)
        for s, sigma in enumerate(spec.sigmas) for repetition in range(spec.repetitions)
    ]
    runs = _sorted_runs(run_cells(cells, spec.max_workers), ["method", "sigma"])
    summary = _summarize(runs, ["method", "sigma"])
    figures: Dict[str, float] = dict()
    for method in spec.methods:
        means = summary[summary["method"] == method].set_index("sigma")["rse_mean"]
        best = float(means.idxmin())
        figures[f"best_sigma_{method}"] = best
    return SweepResult(spec=spec, runs=runs, summary=summary, figures=figures)


@ExperimentKind(
    code="sample",
    kind="sample_sweep",
    description="Relative squared error of tensor and matricized recovery over ranks and sampling fractions"
)
def run_sample_sweep(spec: ExperimentSpec) -> SweepResult:
    """
    For each rank, sampling fraction and repetition: generate, quantize with
    probit(spec.sigma), fit each method with radius validation on a held-out
    share of the observations and record the RSE.
    """
    link = spec.fit_link(spec.sigma)

    def make_cell(rank: int, f: int, fraction: float, repetition: int) -> SweepCell:
        def cell() -> List[Dict[str, Any]]:
            seed = cell_seed(spec.seed, rank, repetition)
            truth = gen_synthetic(spec.shape, rank, seed)
            n_samples = max(2, int(round(fraction * np.prod(spec.shape))))
            indices = sample_indices(SamplingDistribution.uniform(spec.shape), n_samples, cell_seed(seed, 1, f))
            obs = quantize(truth, indices, link, cell_seed(seed, 2, f))
            rows = []
            for method in spec.methods:
                _, result = fit_method(method, obs, link, spec, cell_seed(seed, 3))
                rows.append(_fit_row(
                    method, truth, result,
                    sigma=spec.sigma, rank=rank, fraction=fraction, repetition=repetition, seed=seed
                ))
            return rows
        return cell

    cells = [
        make_cell(rank, f, fraction, repetition)
        for rank in spec.ranks
        for f, fraction in enumerate(spec.fractions)
        for repetition in range(spec.repetitions)
    ]
    runs = _sorted_runs(run_cells(cells, spec.max_workers), ["method", "rank", "fraction"])
    summary = _summarize(runs, ["method", "rank", "fraction"])

    figures: Dict[str, float] = dict()
    for (method, rank), group in summary.groupby(["method", "rank"]):
        if len(group) > 1:
            figures[f"rse_slope_{method}_r{rank}"] = float(np.polyfit(group["fraction"], group["rse_mean"], 1)[0])
    if set(METHODS) <= set(spec.methods):
        reference = min(spec.fractions, key=lambda f: abs(f - 0.3))
        at_reference = summary[np.isclose(summary["fraction"], reference)]
        for rank in spec.ranks:
            rows = at_reference[at_reference["rank"] == rank].set_index("method")["rse_mean"]
            if rows.get("tensor", 0.0) > 0.0:
                figures[f"matricized_over_tensor_r{rank}_f{reference:g}"] = float(rows["matricized"] / rows["tensor"])
    return SweepResult(spec=spec, runs=runs, summary=summary, figures=figures)


@ExperimentKind(
    code="robustness",
    kind="sigma_robustness",
    description="Sign prediction accuracy when fitting with a probit sigma other than the generating one"
)
def run_sigma_robustness(spec: ExperimentSpec) -> SweepResult:
    """
    Observations are generated once per repetition with probit(true_sigma) and
    fitted with probit(sigma) for each sigma of 'fit_sigmas'.
    """
    n_samples = max(2, int(round(spec.fraction * np.prod(spec.shape))))
    generating_link = LinkFunction.probit(spec.true_sigma)

    def make_cell(sigma: float, repetition: int) -> SweepCell:
        def cell() -> List[Dict[str, Any]]:
            seed = cell_seed(spec.seed, repetition)
            truth = gen_synthetic(spec.shape, spec.rank, seed)
            indices = sample_indices(SamplingDistribution.uniform(spec.shape), n_samples, cell_seed(seed, 1))
            obs = quantize(truth, indices, generating_link, cell_seed(seed, 2))
            _, result = fit_method("tensor", obs, LinkFunction.probit(sigma), spec, cell_seed(seed, 3))
            return [_fit_row(
                "tensor", truth, result,
                sigma=sigma, true_sigma=spec.true_sigma, rank=spec.rank, fraction=spec.fraction,
                repetition=repetition, seed=seed
            )]
        return cell

    cells = [make_cell(sigma, repetition) for sigma in spec.fit_sigmas for repetition in range(spec.repetitions)]
    runs = _sorted_runs(run_cells(cells, spec.max_workers), ["method", "sigma"])
    summary = _summarize(runs, ["method", "sigma"])
    accuracies = summary["sign_accuracy_mean"]
    figures = {
        "sign_accuracy_spread": float(accuracies.max() - accuracies.min()),
        "best_rse_sigma": float(summary.set_index("sigma")["rse_mean"].idxmin())
    }
    return SweepResult(spec=spec, runs=runs, summary=summary, figures=figures)


class RecipeParams(BaseModel):
    """
    Settings of the ratings recipe.
    """
    model_config = ConfigDict(frozen=True, extra="forbid")

    eta: Optional[float] = Field(None, description="approximate mean rating (default: mean of the train ratings)")
    scale: Optional[float] = Field(None, gt=0, description="rating maximum used for unit rescaling")
    train_fraction: float = Field(0.8, gt=0, lt=1)
    validation_fraction: float = Field(0.1, ge=0, lt=1)
    test_fraction: float = Field(0.1, gt=0, lt=1)
    repetitions: int = Field(10, ge=1, description="random train / validation / test splits, scored together")
    link: Literal["probit", "logistic"] = "probit"
    sigma: float = Field(0.1, gt=0)
    radius_grid: Optional[List[float]] = None
    row_modes: Optional[List[int]] = None
    unconstrained: bool = False
    full_information: bool = Field(False, description="squared-loss fit of the unquantized ratings")
    init: Literal["symmetric", "nonnegative"] = "nonnegative"
    mode_order: Literal["cyclic", "densest_first"] = "densest_first"
    diagnostic_same_split: bool = False
    seed: int = Field(0, ge=0)

    @field_validator("radius_grid", "row_modes", mode="before")
    @classmethod
    def _comma_lists(cls, value):
        return _split_list(value)

    @model_validator(mode="after")
    def _fractions_sum_to_one(self):
        total = self.train_fraction + self.validation_fraction + self.test_fraction
        if abs(total - 1.0) > 1e-9:
            raise ValueError(f"train, validation and test fractions sum to {total}, not 1")
        return self

    def fit_link(self) -> LinkFunction:
        return LinkFunction.probit(self.sigma) if self.link == "probit" else LinkFunction.logistic()

    def method(self) -> str:
        name = "matricized" if self.row_modes is not None else "tensor"
        if self.full_information:
            name += "_full_information"
        if self.unconstrained:
            name += "_unconstrained"
        return name


def split_positions(
        n: int,
        params: RecipeParams,
        seed: Optional[int] = None
) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """
    Seeded disjoint train / validation / test sample positions (seed defaults to params.seed).
    """
    if n < 3:
        raise ValueError(f"split_positions(): need at least 3 ratings to split, got {n}")
    seed = params.seed if seed is None else seed
    positions = np.arange(n)
    fit, test = train_test_split(positions, test_size=params.test_fraction, random_state=seed, shuffle=True)
    validation_share = params.validation_fraction / (params.train_fraction + params.validation_fraction)
    if validation_share > 0 and len(fit) > 1:
        train, validation = train_test_split(fit, test_size=validation_share, random_state=seed, shuffle=True)
    else:
        train, validation = fit, np.empty(0, dtype=np.int64)
    return np.sort(train), np.sort(validation), np.sort(test)


def _level_key(prefix: str, level: float) -> str:
    return f"{prefix}_{level:g}"


@dataclass
class RecipeSplit:
    """Test predictions of the recipe on one train / validation / test split."""
    seed: int
    eta: float
    chosen_r: Optional[float]
    degenerate: bool
    n_train: int
    n_validation: int
    ratings: np.ndarray
    predicted: np.ndarray
    hits: np.ndarray


def _fit_split(
        obs,
        link: LinkFunction,
        config: SolverConfig,
        params: RecipeParams,
        validation: Optional[np.ndarray],
        report: RunReport
) -> FitResult:
    if params.unconstrained:
        config = config.model_copy(update={"r_max": math.inf})
        if params.row_modes is not None:
            return fit_matricized(obs, link, config, params.row_modes)
        return fit_max_qnorm(obs, link, config)
    grid = params.radius_grid
    if validation is None:
        report.info("empty validation split: a single radius is fitted")
        grid = [grid[0] if grid else config.alpha]
    _, result = cross_validate_radius(obs, link, config, grid, row_modes=params.row_modes, validation=validation)
    return result


def recipe_split(
        table: RatingsTable,
        params: RecipeParams,
        config: SolverConfig,
        seed: int,
        report: RunReport
) -> RecipeSplit:
    """
    Steps 1-4 of the recipe on the split drawn with 'seed', and the test
    predictions of the resulting estimate.
    """
    link = params.fit_link()
    config = config.model_copy(update={"seed": seed, "init": params.init, "mode_order": params.mode_order})
    train, validation, test = split_positions(len(table), params, seed)
    fit_positions = np.sort(np.concatenate([train, validation]))
    if params.diagnostic_same_split:
        test = fit_positions
        report.info("diagnostic mode: the test split equals the fit split")
    if len(test) == 0:
        raise ValueError("recipe_split(): the test split is empty")

    fit_table = table.subset(fit_positions)
    eta = float(np.mean(table.ratings[train])) if params.eta is None else float(params.eta)
    scale = float(params.scale or table.scale_max)
    if abs(eta) > scale:
        raise ValueError(f"recipe_split(): eta={eta:g} lies outside the rating scale [-{scale:g}, {scale:g}]")

    # steps 1 and 2: strict threshold, ratings exactly at eta are 'below'
    labels = np.where(fit_table.ratings > eta, 1, -1)
    for label, count in zip(*np.unique(labels, return_counts=True)):
        report.info(f"{int(count)} fit labels equal to {int(label):+d}")
    degenerate = not params.full_information and bool(np.all(labels == labels[0]))

    chosen_r: Optional[float] = None
    if degenerate:
        report.warning(f"degenerate labels: every 1-bit label is {int(labels[0]):+d}")
        report.skip("fit skipped, the estimate is constant")
        estimate = DenseTensor(np.full(table.shape, labels[0] * link.sigma))
    else:
        if params.full_information:
            obs = RealObservationSet(
                shape=table.shape, indices=fit_table.indices, values=(fit_table.ratings - eta) / scale
            )
        else:
            obs = ObservationSet(shape=table.shape, indices=fit_table.indices, labels=labels)
        # step 3
        result = _fit_split(
            obs, link, config, params,
            np.searchsorted(fit_positions, validation) if len(validation) else None,
            report
        )
        chosen_r = result.chosen_r
        if not result.converged:
            report.info(f"fit stopped after {result.iterations} sweeps without converging")
        estimate = result.estimate()

    # step 4
    estimate = estimate.scaled(scale, eta)
    ratings = table.ratings[test]
    predicted = estimate.entries[tuple(table.indices[test].T)]
    return RecipeSplit(
        seed=seed,
        eta=eta,
        chosen_r=chosen_r,
        degenerate=degenerate,
        n_train=int(len(train)),
        n_validation=int(len(validation)),
        ratings=ratings,
        predicted=predicted,
        hits=sign_hits(predicted, ratings, eta, strict_truth=True)
    )


def run_recipe(
        table: RatingsTable,
        params: Optional[RecipeParams] = None,
        config: Optional[SolverConfig] = None,
        report: Optional[RunReport] = None
) -> Dict[str, Any]:
    """
    The ratings recipe, repeated over params.repetitions seeded splits:

    1. scale the ratings to unit infinity norm;
    2. take sign(rating - eta) on the fit split as undithered 1-bit observations
       (or the centered ratings themselves for the full-information fit);
    3. fit, cross-validating R_max on the validation split;
    4. add eta back and undo the scaling;
    5. evaluate sign accuracy and MAE on the test entries of every split
       together (overall and per rating level).

    A test rating counts as +1 exactly when it lies strictly above eta, the
    rule the training labels follow.

    :param table: RatingsTable
    :param params: RecipeParams
    :param config: SolverConfig (radius, seed and start are managed by the recipe)
    :param report: Optional[RunReport], collects warnings (degenerate labels...)
    :return: Dict, flat metrics record
    """
    params = params or RecipeParams()
    config = config or SolverConfig()
    report = report if report is not None else RunReport("recipe")

    splits: List[RecipeSplit] = []
    for repetition in range(params.repetitions):
        split_report = RunReport(f"{report.run_name} split {repetition}")
        splits.append(recipe_split(table, params, config, params.seed + repetition, split_report))
        report.merge(split_report)

    # step 5
    ratings = np.concatenate([split.ratings for split in splits])
    errors = np.abs(ratings - np.concatenate([split.predicted for split in splits]))
    hits = np.concatenate([split.hits for split in splits])
    accuracy = float(np.mean(hits))
    record: Dict[str, Any] = {
        "method": params.method(),
        "link": "squared loss" if params.full_information else params.fit_link().describe(),
        "repetitions": params.repetitions,
        "eta": float(np.mean([split.eta for split in splits])),
        "eta_per_split": [split.eta for split in splits],
        "scale": float(params.scale or table.scale_max),
        "chosen_R": [split.chosen_r for split in splits],
        "n_train": splits[0].n_train,
        "n_validation": splits[0].n_validation,
        "n_test": int(len(splits[0].ratings)),
        "n_test_pooled": int(len(ratings)),
        "degenerate_labels": any(split.degenerate for split in splits),
        "sign_accuracy": accuracy,
        "sign_accuracy_stderr": accuracy_standard_error(accuracy, len(ratings)),
        "sign_accuracy_per_split": [float(np.mean(split.hits)) for split in splits],
        "mae": float(np.mean(errors))
    }
    for level, value in mean_by_level(hits, ratings).items():
        record[_level_key("accuracy_level", level)] = value
    for level, value in mean_by_level(errors, ratings).items():
        record[_level_key("mae_level", level)] = value
    record["messages"] = report.get_messages()
    report.report_outcome()
    return record


def planted_ratings(
        shape: Sequence[int],
        rank: int,
        observed_fraction: float,
        seed: int,
        levels: int = 5
) -> RatingsTable:
    """
    Synthetic ratings fixture: a planted rank-r tensor mapped onto the integer
    levels 1..levels and observed on a uniformly sampled fraction of distinct entries.

    The first component multiplies nonnegative factors (uniform on [0.5, 1])
    of every mode but the last with a last-mode factor spread evenly over
    [-1, 1], like user and item affinities modulated by a context. The other
    r - 1 components are uniform [-1, 1] interactions at a quarter of that weight.
    """
    shape = check_shape(shape)
    if rank < 1:
        raise ValueError(f"planted_ratings(): rank must be at least 1, got {rank}")
    rng = np.random.default_rng(seed)
    main = [rng.uniform(0.5, 1.0, size=(n, 1)) for n in shape[:-1]]
    main.append(rng.permutation(np.linspace(-1.0, 1.0, shape[-1]))[:, np.newaxis])
    interactions = [rng.uniform(-1.0, 1.0, size=(n, rank - 1)) for n in shape]
    interactions[0] = 0.25 * interactions[0]
    factors = CpFactorSet(tuple(np.hstack([a, b]) for a, b in zip(main, interactions)))
    truth = cp_expand(factors)
    truth = truth.scaled(1.0 / infinity_norm(truth))

    sampler = np.random.default_rng(cell_seed(seed, 1))
    total = int(np.prod(shape))
    n_observed = max(3, int(round(observed_fraction * total)))
    linear = np.sort(sampler.choice(total, size=n_observed, replace=False))
    indices = np.stack(np.unravel_index(linear, shape), axis=1)
    ratings = np.clip(np.rint((truth.entries[tuple(indices.T)] + 1.0) / 2.0 * (levels - 1)) + 1, 1, levels)
    return RatingsTable(shape=shape, indices=indices, ratings=ratings, scale_max=float(levels))
