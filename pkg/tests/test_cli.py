"""CLI contract: exit codes, artifact shapes, manifests, determinism."""

import csv
import json
import subprocess
import sys

import pytest

from radsurv.cli import dispatch
from radsurv.radiomics import FEATURE_NAMES

N = 10
SEED = 11
LIGHT = ["--k-folds", "3", "--n-lambdas", "15", "--lambda-ratio", "0.2"]


@pytest.fixture(scope="module")
def cohort(tmp_path_factory):
    out = tmp_path_factory.mktemp("cli") / "cohort"
    assert dispatch(["simulate", "--n", str(N), "--seed", str(SEED),
                     "--out", str(out), "--jobs", "4"]) == 0
    return out


@pytest.fixture(scope="module")
def fragile_cohort(tmp_path_factory):
    out = tmp_path_factory.mktemp("cli_fragile") / "cohort"
    assert dispatch(["simulate", "--n", "6", "--seed", "2", "--out", str(out),
                     "--fragile-fraction", "0.5",
                     "--fragile-semi-axes", "2.0"]) == 0
    return out


def test_usage_errors_exit_two(capsys):
    assert dispatch([]) == 2
    assert dispatch(["frobnicate"]) == 2
    assert dispatch(["extract", "--no-such-flag"]) == 2
    assert dispatch(["features"]) == 2
    capsys.readouterr()


def test_version_and_help_exit_zero(capsys):
    assert dispatch(["--version"]) == 0
    assert dispatch(["--help"]) == 0
    out = capsys.readouterr().out
    assert "simulate" in out and "perturb" in out


def test_missing_required_setting_is_typed(cohort, capsys):
    assert dispatch(["extract", "--cohort", str(cohort)]) == 1
    assert "ArgumentError" in capsys.readouterr().err


def test_domain_errors_exit_one(cohort, capsys):
    assert dispatch(["extract", "--cohort", str(cohort), "--out", "x.csv",
                     "--modality", "mri"]) == 1
    assert "modality" in capsys.readouterr().err
    assert dispatch(["extract", "--cohort", "/nonexistent", "--out",
                     "x.csv"]) == 1
    capsys.readouterr()


def test_simulate_layout_and_manifest(cohort):
    for name in ("clinical.csv", "outcomes.csv", "truth.json",
                 "manifest.json", "volumes", "labels"):
        assert (cohort / name).exists()
    manifest = json.loads((cohort / "manifest.json").read_text())
    assert manifest["command"] == "simulate"
    assert manifest["config"]["n"] == N
    assert manifest["config"]["seed"] == SEED
    assert manifest["config"]["k_folds"] == 8  # defaults echoed too
    assert len(manifest["config_sha256"]) == 64
    rows = list(csv.reader(open(cohort / "clinical.csv")))
    assert len(rows) == 1 + N


def test_extract_shape_and_job_invariance(cohort, tmp_path, capsys):
    a, b = tmp_path / "a.csv", tmp_path / "b.csv"
    assert dispatch(["extract", "--cohort", str(cohort), "--modality", "ct",
                     "--out", str(a)]) == 0
    assert dispatch(["extract", "--cohort", str(cohort), "--modality", "ct",
                     "--out", str(b), "--jobs", "3"]) == 0
    capsys.readouterr()
    assert a.read_bytes() == b.read_bytes()
    rows = list(csv.reader(open(a)))
    assert len(rows) == 1 + N
    assert all(len(r) == 1 + len(FEATURE_NAMES) == 37 for r in rows)
    assert rows[0] == ["patient_id", *FEATURE_NAMES]
    manifest = json.loads((tmp_path / "a.manifest.json").read_text())
    assert manifest["command"] == "extract"
    assert manifest["excluded"] == []


def test_extract_reports_fragile_failures(fragile_cohort, tmp_path, capsys):
    out = tmp_path / "pet.csv"
    assert dispatch(["extract", "--cohort", str(fragile_cohort),
                     "--modality", "pet", "--mask", "eroded_r2",
                     "--out", str(out)]) == 0
    err = capsys.readouterr().err
    assert "EmptyRoiError" in err
    manifest = json.loads((tmp_path / "pet.manifest.json").read_text())
    excluded = dict(manifest["excluded"])
    assert excluded  # the fragile patients vanished under deep erosion
    assert set(excluded.values()) == {"EmptyRoiError"}
    rows = list(csv.reader(open(out)))
    assert len(rows) == 1 + 6 - len(excluded)


def test_features_compare_prints_and_writes(cohort, tmp_path, capsys):
    assert dispatch(["features", "compare", "--cohort", str(cohort),
                     "--patient", "P003"]) == 0
    out = capsys.readouterr().out
    assert "shape.voxel_volume" in out and "common" in out
    csv_path = tmp_path / "cmp.csv"
    assert dispatch(["features", "compare", "--cohort", str(cohort),
                     "--patient", "P003", "--out", str(csv_path)]) == 0
    capsys.readouterr()
    rows = list(csv.reader(open(csv_path)))
    assert rows[0] == ["feature", "ct", "pet", "tag"]
    assert len(rows) == 1 + len(FEATURE_NAMES)
    tags = {r[0]: r[3] for r in rows[1:]}
    # geometry agrees exactly across modalities over the shared mask
    assert tags["shape.voxel_volume"] == "common"
    assert set(tags.values()) <= {"common", "modality_specific"}
    unknown = dispatch(["features", "compare", "--cohort", str(cohort),
                        "--patient", "nope"])
    assert unknown == 1
    capsys.readouterr()


def test_select_writes_curve_and_choice(cohort, tmp_path, capsys):
    out = tmp_path / "sel"
    assert dispatch(["select", "--cohort", str(cohort), "--blocks",
                     "ct,clinical", "--seed", str(SEED), "--out", str(out),
                     "--jobs", "4", *LIGHT]) == 0
    stdout = capsys.readouterr().out
    assert "selected" in stdout
    doc = json.loads((out / "selection.json").read_text())
    assert doc["chosen_lambda"] > 0
    assert doc["n_train"] <= N
    rows = list(csv.reader(open(out / "cv_curve.csv")))
    assert rows[0] == ["lambda", "mean_cv_c_index"]
    assert len(rows) == 1 + 15
    assert (out / "cv_curve.png").stat().st_size > 1000
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["command"] == "select"
    assert manifest["config"]["blocks"] == ["ct", "clinical"]


def test_fit_eval_round_trip(cohort, tmp_path, capsys):
    model = tmp_path / "model.json"
    assert dispatch(["fit", "--cohort", str(cohort), "--blocks",
                     "ct,pet,clinical", "--seed", str(SEED), "--out",
                     str(model), "--jobs", "4", *LIGHT]) == 0
    capsys.readouterr()
    doc = json.loads(model.read_text())
    for key in ("beta", "covariate_names", "chosen_lambda", "standardization",
                "blocks", "mask", "seed", "split_ratios", "run_config",
                "converged"):
        assert key in doc
    assert len(doc["beta"]) == len(doc["covariate_names"])
    assert doc["mask"] == "ground_truth"
    assert doc["run_config"]["k_folds"] == 3

    result = tmp_path / "eval.json"
    assert dispatch(["eval", "--cohort", str(cohort), "--model", str(model),
                     "--split", "all", "--out", str(result)]) == 0
    stdout = capsys.readouterr().out
    assert "all c-index:" in stdout
    ev = json.loads(result.read_text())
    assert ev["split"] == "all"
    assert ev["n_patients"] == N
    assert 0.0 <= ev["c_index"] <= 1.0
    assert (tmp_path / "eval.manifest.json").exists()

    assert dispatch(["eval", "--cohort", str(cohort), "--model", str(model),
                     "--split", "nope"]) == 1
    capsys.readouterr()


def test_fit_is_deterministic_across_jobs(cohort, tmp_path, capsys):
    a, b = tmp_path / "a.json", tmp_path / "b.json"
    for path, jobs in ((a, "1"), (b, "4")):
        assert dispatch(["fit", "--cohort", str(cohort), "--blocks",
                         "pet,clinical", "--seed", str(SEED), "--out",
                         str(path), "--jobs", jobs, *LIGHT]) == 0
    capsys.readouterr()
    assert a.read_bytes() == b.read_bytes()


def test_config_file_with_flag_overrides(cohort, tmp_path, capsys):
    run = tmp_path / "run.json"
    run.write_text(json.dumps({"cohort": str(cohort), "blocks": ["clinical"],
                               "seed": SEED, "k_folds": 3, "n_lambdas": 15,
                               "lambda_ratio": 0.2}))
    out = tmp_path / "sel"
    assert dispatch(["select", "--config", str(run), "--out", str(out),
                     "--n-lambdas", "12"]) == 0
    capsys.readouterr()
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["config"]["n_lambdas"] == 12  # flag wins
    assert manifest["config"]["k_folds"] == 3  # file wins over default
    rows = list(csv.reader(open(out / "cv_curve.csv")))
    assert len(rows) == 1 + 12


def test_perturb_grid_report_and_reruns(cohort, tmp_path, capsys):
    args = ["perturb", "--cohort", str(cohort), "--radii", "1", "--seed",
            str(SEED), "--k-folds", "2", "--n-lambdas", "12",
            "--lambda-ratio", "0.2"]
    a, b = tmp_path / "ra", tmp_path / "rb"
    assert dispatch([*args, "--out", str(a), "--jobs", "4"]) == 0
    table = capsys.readouterr().out
    assert dispatch([*args, "--out", str(b), "--jobs", "1"]) == 0
    capsys.readouterr()
    # header, separator, clinical row, 3 combos x 3 variants
    lines = [ln for ln in table.splitlines() if ln and "report" not in ln]
    assert len(lines) == 2 + 1 + 9
    assert lines[2].startswith("clinical")
    assert (a / "results.csv").read_bytes() == (b / "results.csv").read_bytes()
    manifest = json.loads((a / "manifest.json").read_text())
    assert manifest["command"] == "perturb"
    assert manifest["run_config"]["radii"] == [1]
    assert (a / "c_index_by_variant.png").stat().st_size > 1000
    assert (a / "exclusions.png").stat().st_size > 1000


def test_console_entry_point():
    proc = subprocess.run(["radsurv", "--version"], capture_output=True,
                          text=True)
    assert proc.returncode == 0
    assert "radsurv" in proc.stdout
    proc = subprocess.run([sys.executable, "-m", "radsurv", "--version"],
                          capture_output=True, text=True)
    assert proc.returncode == 0
