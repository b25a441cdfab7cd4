"""
One-bit tensor completion: max-qnorm constrained maximum-likelihood recovery of
a low-rank tensor from 1-bit (sign) measurements of a sampled subset of its
entries, with synthetic experiment sweeps and a ratings recipe.
"""
from typing import Dict, List, Optional, Sequence
from argparse import ArgumentParser, Namespace
from pathlib import Path
import logging
import math

import numpy as np
from pydantic import ValidationError

from one_bit_tensor.tensor_core import DenseTensor, factor_max_qnorm
from one_bit_tensor.observation_model import (
    LinkFunction,
    ObservationSet,
    SamplingDistribution,
    UNDITHERED,
    sample_indices,
    quantize
)
from one_bit_tensor.likelihood import sample_losses
from one_bit_tensor.solver import (
    SolverConfig,
    FitResult,
    fit_max_qnorm,
    fit_matricized,
    cross_validate_radius
)
from one_bit_tensor.metrics import rse, sign_accuracy, pi_weighted_mse
from one_bit_tensor.experiments import (
    ExperimentSpec,
    RecipeParams,
    SweepResult,
    gen_synthetic,
    all_indices,
    get_experiment_runner,
    get_experiment_codes,
    run_recipe
)
from one_bit_tensor.io import (
    parse_shape,
    save_tensor,
    load_tensor,
    save_observations,
    load_observations,
    ingest_csv,
    save_checkpoint,
    load_checkpoint,
    read_spec_file,
    write_metrics_record
)
from one_bit_tensor.report import RunReport

logger = logging.getLogger(__name__)

LOG_LEVELS = ["ERROR", "WARNING", "INFO", "DEBUG"]


class OneBitExperiment:

    def __init__(self, spec: ExperimentSpec, log_level: Optional[str] = None):
        """
        OneBitExperiment constructor.

        :param spec: ExperimentSpec, design shared by the experiments to run
        :param log_level: Optional[str], logging level of the package loggers (unchanged when omitted)
        """
        self.spec: ExperimentSpec = spec
        self.log_level: Optional[str] = log_level
        if log_level:
            logging.getLogger(__name__).setLevel(log_level)
        self.results: Dict[str, SweepResult] = dict()

    def run(self, codes: Sequence[str]):
        """
        Run the registered experiments named by 'codes' (see get_experiment_codes()).

        :return: None (use 'get_results()' below)
        """
        for code in codes:
            self.results[code] = get_experiment_runner(code)(self.spec)

    def save(self, output: Optional[str] = None) -> List[Path]:
        prefix = output or self.spec.output or "sweep"
        return [result.save(f"{prefix}_{code}") for code, result in self.results.items()]

    def get_results(self) -> Dict[str, Dict]:
        return {code: result.record() for code, result in self.results.items()}


def _link(kind: str, sigma: float) -> LinkFunction:
    return LinkFunction.probit(sigma) if kind == "probit" else LinkFunction.logistic()


def _row_modes(text: Optional[str]) -> Optional[List[int]]:
    # 1-based on the command line
    if not text:
        return None
    return [int(token) - 1 for token in text.split(",") if token.strip()]


def _grid(text: Optional[str]) -> Optional[List[float]]:
    if not text:
        return None
    return [float(token) for token in text.split(",") if token.strip()]


def simulate(args: Namespace) -> Dict:
    """Generate a rank-r tensor and its 1-bit observations."""
    shape = parse_shape(args.shape)
    truth = gen_synthetic(shape, args.rank, args.seed)
    n_samples = max(1, int(round(args.fraction * np.prod(shape))))
    indices = sample_indices(SamplingDistribution.uniform(shape), n_samples, args.seed + 1)
    link = UNDITHERED if args.link == UNDITHERED else _link(args.link, args.sigma)
    obs = quantize(truth, indices, link, args.seed + 2)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_tensor(truth, out / "truth.txt")
    save_observations(obs, out / "observations.csv")
    return {"truth": str(out / "truth.txt"), "observations": str(out / "observations.csv"), "m": n_samples}


def fit(args: Namespace) -> Dict:
    """Fit observations and write a checkpoint."""
    obs = load_observations(args.observations)
    link = _link(args.link, args.sigma)
    fixed_radius = args.unconstrained or args.r_max is not None
    config = SolverConfig(
        r_max=math.inf if args.unconstrained else (args.r_max if args.r_max is not None else 1.0),
        k_cap=args.k_cap,
        max_outer=args.max_outer,
        max_inner=args.max_inner,
        seed=args.seed
    )
    row_modes = _row_modes(args.row_modes)
    result: FitResult
    if fixed_radius:
        result = fit_matricized(obs, link, config, row_modes) if row_modes is not None \
            else fit_max_qnorm(obs, link, config)
    else:
        _, result = cross_validate_radius(obs, link, config, _grid(args.grid), args.holdout, row_modes=row_modes)
    save_checkpoint(result, args.out)
    return {"checkpoint": args.out, "chosen_R": result.chosen_r, "objective": result.objective}


def evaluate(args: Namespace) -> Dict:
    """Compare a fit checkpoint with the ground truth."""
    result = load_checkpoint(args.checkpoint)
    truth = load_tensor(args.truth)
    estimate = result.estimate()
    indices = all_indices(truth.shape)
    record: Dict = {
        "rse": rse(estimate, truth),
        "sign_accuracy": sign_accuracy(estimate, indices, truth.entries[tuple(indices.T)]),
        "pi_weighted_mse": pi_weighted_mse(estimate, truth, SamplingDistribution.uniform(truth.shape)),
        "factor_max_qnorm": factor_max_qnorm(result.factors),
        "chosen_R": result.chosen_r,
        "iterations": result.iterations,
        "converged": result.converged
    }
    if args.observations:
        obs = load_observations(args.observations, truth.shape)
        record["average_nll_truth"] = nll_at_truth(truth, obs, _link(args.link, args.sigma))
    write_metrics_record(record, args.out)
    return record


def nll_at_truth(truth: DenseTensor, obs: ObservationSet, link: LinkFunction) -> float:
    """Average negative log-likelihood of the observations under the true entries."""
    values = truth.entries[tuple(obs.indices.T)]
    return float(np.mean(sample_losses(values, obs.labels, link)))


def sweep(args: Namespace) -> Dict:
    """Run a synthetic experiment sweep described by a spec file and/or flags."""
    settings: Dict = read_spec_file(args.spec) if args.spec else dict()
    for flag in ("seed", "shape", "rank", "sigma", "fraction", "repetitions", "max_workers"):
        value = getattr(args, flag)
        if value is not None:
            settings[flag] = value
    settings.pop("kind", None)
    spec = ExperimentSpec(**settings)
    if args.full_scale:
        spec = spec.full_scale()
    experiment = OneBitExperiment(spec, log_level=args.log_level)
    experiment.run([args.kind])
    paths = experiment.save(args.out)
    return {"tables": [str(path) for path in paths], "figures": experiment.get_results()[args.kind]["figures"]}


def recipe(args: Namespace) -> Dict:
    """Run the ratings recipe on a CSV and write its metrics record."""
    report = RunReport("recipe")
    table = ingest_csv(args.ratings, parse_shape(args.shape), scale_max=args.scale, report=report)
    params = RecipeParams(
        eta=args.eta,
        scale=args.scale,
        link=args.link,
        sigma=args.sigma,
        radius_grid=_grid(args.grid),
        row_modes=_row_modes(args.row_modes),
        unconstrained=args.unconstrained,
        full_information=args.full_information,
        repetitions=args.repetitions,
        diagnostic_same_split=args.diagnostic_same_split,
        seed=args.seed
    )
    config = SolverConfig(k_cap=args.k_cap, max_outer=args.max_outer, max_inner=args.max_inner, seed=args.seed)
    record = run_recipe(table, params, config, report=report)
    write_metrics_record(record, args.out)
    return record


COMMANDS = {
    "simulate": simulate,
    "fit": fit,
    "evaluate": evaluate,
    "sweep": sweep,
    "recipe": recipe
}


def _add_fit_options(parser: ArgumentParser):
    parser.add_argument(
        "--link",
        type=str,
        choices=["probit", "logistic"],
        help="Link function of the likelihood",
        default="probit"
    )
    parser.add_argument("--sigma", type=float, help="Probit noise level (default: 0.1)", default=0.1)
    parser.add_argument(
        "--grid",
        type=str,
        help="Comma separated R_max values to cross-validate (default: 1,2,4,...,128)",
        default=None
    )
    parser.add_argument(
        "--row_modes", "--row-modes",
        dest="row_modes",
        type=str,
        help="Comma separated 1-based modes mapped to the matrix rows: fit the matricized baseline instead",
        default=None
    )
    parser.add_argument(
        "--unconstrained",
        action="store_true",
        help="Fit without the max-qnorm constraint (R_max = infinity)"
    )
    parser.add_argument("--k_cap", type=int, help="Factor column count (default: 2 max N_j)", default=None)
    parser.add_argument("--max_outer", type=int, help="Maximum alternating sweeps", default=200)
    parser.add_argument("--max_inner", type=int, help="Projected gradient steps per factor", default=20)


def get_parameters(argv: Optional[Sequence[str]] = None) -> Namespace:
    """Parse CLI args."""

    # Sample command line interface sessions:
    #     one-bit-tc simulate --shape 20,20,20 --rank 5 --fraction 0.5 --sigma 0.1 --out run1
    #     one-bit-tc fit --observations run1/observations.csv --out run1/fit.json
    #     one-bit-tc evaluate --checkpoint run1/fit.json --truth run1/truth.txt --out run1/metrics.json
    #     one-bit-tc sweep --kind sigma --spec sigma.spec --out results/sigma
    #     one-bit-tc recipe --ratings ratings.csv --shape 30,20,4 --scale 5 --out recipe.json

    parser = ArgumentParser(description="One-bit tensor completion by max-qnorm constrained maximum likelihood")
    parser.add_argument(
        "--log_level",
        type=str,
        choices=LOG_LEVELS,
        help="Level of the logs.",
        default="WARNING"
    )
    subparsers = parser.add_subparsers(dest="command", required=True)

    simulate_parser = subparsers.add_parser("simulate", help="Generate a synthetic tensor and its 1-bit observations")
    simulate_parser.add_argument("--shape", type=str, help="Tensor dimensions, e.g. 20,20,20", default="20,20,20")
    simulate_parser.add_argument("--rank", type=int, help="CP rank of the generated tensor", default=5)
    simulate_parser.add_argument("--fraction", type=float, help="Number of samples as a fraction of N^d", default=0.5)
    simulate_parser.add_argument(
        "--link",
        type=str,
        choices=["probit", "logistic", UNDITHERED],
        help="Dithering link ('none': plain signs)",
        default="probit"
    )
    simulate_parser.add_argument("--sigma", type=float, help="Probit noise level", default=0.1)
    simulate_parser.add_argument("--seed", type=int, default=0)
    simulate_parser.add_argument("--out", type=str, required=True, help="Output directory")

    fit_parser = subparsers.add_parser("fit", help="Fit 1-bit observations and write a checkpoint")
    fit_parser.add_argument("--observations", type=str, required=True, help="Observation CSV (1-based indices)")
    fit_parser.add_argument(
        "--r_max",
        type=float,
        help="Fixed max-qnorm radius (default: cross-validate over --grid)",
        default=None
    )
    fit_parser.add_argument("--holdout", type=float, help="Validation share of the samples", default=0.1)
    fit_parser.add_argument("--seed", type=int, default=0)
    fit_parser.add_argument("--out", type=str, required=True, help="Checkpoint JSON file")
    _add_fit_options(fit_parser)

    evaluate_parser = subparsers.add_parser("evaluate", help="Compare a checkpoint with the ground truth")
    evaluate_parser.add_argument("--checkpoint", type=str, required=True)
    evaluate_parser.add_argument("--truth", type=str, required=True, help="Ground truth tensor file")
    evaluate_parser.add_argument(
        "--observations",
        type=str,
        help="Observation CSV: also report the average negative log-likelihood of the truth",
        default=None
    )
    evaluate_parser.add_argument("--link", type=str, choices=["probit", "logistic"], default="probit")
    evaluate_parser.add_argument("--sigma", type=float, default=0.1)
    evaluate_parser.add_argument("--out", type=str, required=True, help="Metrics JSON file")

    sweep_parser = subparsers.add_parser("sweep", help="Run a synthetic experiment sweep")
    sweep_parser.add_argument(
        "--kind",
        type=str,
        required=True,
        choices=get_experiment_codes(),
        help="Experiment to run"
    )
    sweep_parser.add_argument("--spec", type=str, help="Flat 'key: value' experiment spec file", default=None)
    sweep_parser.add_argument("--shape", type=str, default=None)
    sweep_parser.add_argument("--rank", type=int, default=None)
    sweep_parser.add_argument("--sigma", type=float, default=None)
    sweep_parser.add_argument("--fraction", type=float, default=None)
    sweep_parser.add_argument("--repetitions", type=int, default=None)
    sweep_parser.add_argument("--seed", type=int, default=None)
    sweep_parser.add_argument("--max_workers", type=int, help="Sweep cells run concurrently", default=None)
    sweep_parser.add_argument(
        "--full_scale",
        action="store_true",
        help="Run at full size (30^3 or 15^4) instead of the desk-scale shapes"
    )
    sweep_parser.add_argument("--out", type=str, help="Output path prefix of the result tables", default=None)

    recipe_parser = subparsers.add_parser("recipe", help="Run the ratings recipe on a CSV file")
    recipe_parser.add_argument("--ratings", type=str, required=True, help="Ratings CSV: i_1,...,i_d,rating")
    recipe_parser.add_argument("--shape", type=str, required=True, help="Declared tensor dimensions")
    recipe_parser.add_argument("--scale", type=float, help="Rating scale maximum", default=None)
    recipe_parser.add_argument("--eta", type=float, help="Mean rating offset (default: train mean)", default=None)
    recipe_parser.add_argument(
        "--repetitions",
        type=int,
        help="Random train / validation / test splits scored together",
        default=10
    )
    recipe_parser.add_argument(
        "--full_information",
        action="store_true",
        help="Fit the unquantized ratings with a squared loss instead of their signs"
    )
    recipe_parser.add_argument(
        "--diagnostic_same_split",
        action="store_true",
        help="Evaluate on the fit split (overfitting sanity check)"
    )
    recipe_parser.add_argument("--seed", type=int, default=0)
    recipe_parser.add_argument("--out", type=str, required=True, help="Metrics JSON file")
    _add_fit_options(recipe_parser)

    return parser.parse_args(argv)


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = get_parameters(argv)
    logging.basicConfig(level=getattr(logging, args.log_level), format="%(asctime)s [%(levelname)8s] %(message)s")
    try:
        outcome: Dict = COMMANDS[args.command](args)
    except (ValueError, IndexError, FileNotFoundError, ValidationError) as error:
        logger.error(f"{args.command}: {error}")
        return 1
    logger.info(f"{args.command}: {outcome}")
    return 0
