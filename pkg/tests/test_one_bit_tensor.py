"""
Unit tests of the command line interface
"""
from pathlib import Path
import logging

import pytest

from one_bit_tensor import OneBitExperiment, main, get_parameters, nll_at_truth
from one_bit_tensor.tensor_core import DenseTensor
from one_bit_tensor.observation_model import LinkFunction, ObservationSet
from one_bit_tensor.io import load_checkpoint, load_observations, read_metrics_record, save_ratings
from one_bit_tensor.experiments import ExperimentSpec, planted_ratings

QUICK_FIT = ["--k_cap", "3", "--max_outer", "5", "--max_inner", "3"]


def test_get_parameters():
    args = get_parameters(["--log_level", "INFO", "fit", "--observations", "obs.csv", "--out", "fit.json"])
    assert args.command == "fit"
    assert args.log_level == "INFO"
    assert args.link == "probit"
    assert args.sigma == 0.1
    assert args.r_max is None
    args = get_parameters(["recipe", "--ratings", "r.csv", "--shape", "3,3", "--out", "m.json", "--row-modes", "2"])
    assert args.row_modes == "2"


@pytest.mark.parametrize(
    "argv",
    [
        ["sweep", "--kind", "nuclear"],            # Query 0 - unknown experiment
        ["--log_level", "CHATTY", "sweep"],        # Query 1
        ["fit", "--observations", "obs.csv"]       # Query 2 - no output file
    ]
)
def test_get_parameters_rejects(argv):
    with pytest.raises(SystemExit):
        get_parameters(argv)


def test_simulate_fit_evaluate(tmp_path: Path):
    run = tmp_path / "run"
    assert main(["simulate", "--shape", "4,4,4", "--rank", "1", "--fraction", "0.5", "--seed", "3", "--out", str(run)]) == 0
    obs = load_observations(run / "observations.csv")
    assert obs.shape == (4, 4, 4)
    assert len(obs) == 32

    assert main([
        "fit", "--observations", str(run / "observations.csv"), "--grid", "1,4", "--out", str(run / "fit.json")
    ] + QUICK_FIT) == 0
    assert load_checkpoint(run / "fit.json").chosen_r in (1.0, 4.0)

    assert main([
        "evaluate",
        "--checkpoint", str(run / "fit.json"),
        "--truth", str(run / "truth.txt"),
        "--observations", str(run / "observations.csv"),
        "--out", str(run / "metrics.json")
    ]) == 0
    metrics = read_metrics_record(run / "metrics.json")
    for key in ("rse", "sign_accuracy", "pi_weighted_mse", "factor_max_qnorm", "chosen_R", "average_nll_truth"):
        assert key in metrics
    assert 0.0 <= metrics["sign_accuracy"] <= 1.0


@pytest.mark.parametrize(
    "options",
    [
        ["--r_max", "2"],                         # Query 0 - fixed radius
        ["--unconstrained"],                      # Query 1
        ["--row_modes", "1", "--grid", "2"]       # Query 2 - matricized baseline, 1-based modes
    ]
)
def test_fit_variants(tmp_path: Path, options):
    assert main(["simulate", "--shape", "3,3,3", "--rank", "1", "--link", "none", "--out", str(tmp_path)]) == 0
    assert main(
        ["fit", "--observations", str(tmp_path / "observations.csv"), "--out", str(tmp_path / "fit.json")] +
        QUICK_FIT + options
    ) == 0
    result = load_checkpoint(tmp_path / "fit.json")
    assert result.estimate().shape == (3, 3, 3)


def test_fit_reports_missing_input(tmp_path: Path):
    assert main(["fit", "--observations", str(tmp_path / "absent.csv"), "--out", str(tmp_path / "fit.json")]) == 1


@pytest.mark.parametrize("r_max", ["0", "-2"])
def test_fit_rejects_nonpositive_radius(tmp_path: Path, r_max: str):
    assert main(["simulate", "--shape", "3,3,3", "--rank", "1", "--out", str(tmp_path)]) == 0
    assert main(
        ["fit", "--observations", str(tmp_path / "observations.csv"), "--out", str(tmp_path / "fit.json"),
         "--r_max", r_max] + QUICK_FIT
    ) == 1
    assert not (tmp_path / "fit.json").exists()


def test_experiment_applies_its_log_level():
    package_logger = logging.getLogger("one_bit_tensor")
    previous = package_logger.level
    try:
        experiment = OneBitExperiment(ExperimentSpec(), log_level="DEBUG")
        assert experiment.log_level == "DEBUG"
        assert package_logger.level == logging.DEBUG
        OneBitExperiment(ExperimentSpec())
        assert package_logger.level == logging.DEBUG
    finally:
        package_logger.setLevel(previous)


def test_nll_at_truth():
    truth = DenseTensor([[0.0, 1.0], [2.0, -1.0]])
    obs = ObservationSet(shape=(2, 2), indices=[[0, 0], [0, 0]], labels=[1, -1])
    assert nll_at_truth(truth, obs, LinkFunction.logistic()) == pytest.approx(0.6931471805599453)


def test_sweep_command(tmp_path: Path):
    spec = tmp_path / "sigma.spec"
    spec.write_text(
        "# tiny sigma sweep\n"
        "shape: 4,4,4\n"
        "rank: 1\n"
        "sigmas: 0.1,1\n"
        "methods: tensor\n"
        "repetitions: 1\n"
        "radius-grid: 1,4\n"
        "k_cap: 3\n"
        "max_outer: 5\n"
        "max_inner: 3\n"
    )
    assert main(["sweep", "--kind", "sigma", "--spec", str(spec), "--seed", "2", "--out", str(tmp_path / "out")]) == 0
    assert (tmp_path / "out_sigma.csv").exists()
    assert (tmp_path / "out_sigma_runs.csv").exists()
    record = read_metrics_record(tmp_path / "out_sigma.json")
    assert record["spec"]["seed"] == 2
    assert "best_sigma_tensor" in record["figures"]


def test_sweep_rejects_unknown_spec_keys(tmp_path: Path):
    spec = tmp_path / "bad.spec"
    spec.write_text("rank: 1\nnoise: 0.1\n")
    assert main(["sweep", "--kind", "sigma", "--spec", str(spec), "--out", str(tmp_path / "out")]) == 1


def test_recipe_command(tmp_path: Path):
    save_ratings(planted_ratings((6, 5, 4), 2, 0.5, seed=1), tmp_path / "ratings.csv")
    assert main([
        "recipe",
        "--ratings", str(tmp_path / "ratings.csv"),
        "--shape", "6,5,4",
        "--scale", "5",
        "--grid", "1,4",
        "--repetitions", "2",
        "--out", str(tmp_path / "recipe.json")
    ] + QUICK_FIT) == 0
    record = read_metrics_record(tmp_path / "recipe.json")
    assert record["scale"] == 5.0
    assert record["method"] == "tensor"
    assert record["repetitions"] == 2
    assert len(record["chosen_R"]) == 2
    assert any(key.startswith("accuracy_level_") for key in record)
    assert main([
        "recipe",
        "--ratings", str(tmp_path / "ratings.csv"),
        "--shape", "6,5,4",
        "--grid", "1,4",
        "--repetitions", "1",
        "--full_information",
        "--out", str(tmp_path / "exact.json")
    ] + QUICK_FIT) == 0
    assert read_metrics_record(tmp_path / "exact.json")["method"] == "tensor_full_information"
    assert main([
        "recipe",
        "--ratings", str(tmp_path / "ratings.csv"),
        "--shape", "6,5,4",
        "--scale", "5",
        "--eta", "7",
        "--out", str(tmp_path / "bad.json")
    ]) == 1
