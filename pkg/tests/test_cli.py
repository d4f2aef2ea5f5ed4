import csv
import json
from pathlib import Path

import numpy as np
import pytest

from dprkit.cli import _parse_grid, _parse_periods, main
from dprkit.errors import ValidationError


def run_cli(capsys, *argv):
    code = main(list(argv))
    captured = capsys.readouterr()
    return code, captured.out, captured.err


def _synth(capsys, tmp_path, name="panel.csv", seed=11, spec="n_entities=8,n_periods=8,n_features=4,n_clusters=2"):
    path = tmp_path / name
    code, out, _ = run_cli(
        capsys, "synth", "--output", str(path), "--seed", str(seed), "--spec", spec
    )
    assert code == 0
    return path


def test_grid_syntax():
    assert _parse_grid("1,2.5,3") == [1.0, 2.5, 3.0]
    assert _parse_grid("range:0:1:0.5") == [0.0, 0.5, 1.0]
    np.testing.assert_allclose(_parse_grid("logspace:-2:0:3"), [0.01, 0.1, 1.0])
    with pytest.raises(ValidationError):
        _parse_grid("range:0:1:0")
    with pytest.raises(ValidationError):
        _parse_grid("1,banana")


def test_period_syntax():
    assert _parse_periods("2000-2002", [2000, 2001, 2002, 2003]) == [2000, 2001, 2002]
    assert _parse_periods("2000,2003", [2000, 2001, 2002, 2003]) == [2000, 2003]
    assert _parse_periods("a,b", ["a", "b", "c"]) == ["a", "b"]
    with pytest.raises(ValidationError):
        _parse_periods("2002-2000", [2000, 2001, 2002])


def test_missing_input_exits_1(capsys, tmp_path):
    code, _, err = run_cli(
        capsys, "cluster", "--input", str(tmp_path / "nope.csv"),
        "--output-dir", str(tmp_path), "--eps", "0.5", "--min-pts", "3",
    )
    assert code == 1
    assert "not found" in err


def test_usage_error_exits_1(capsys):
    code, _, err = run_cli(capsys, "fit", "--penalty", "huber")
    assert code == 1


def test_bad_penalty_exits_1(capsys, tmp_path):
    panel = _synth(capsys, tmp_path)
    code, _, err = run_cli(
        capsys, "fit", "--input", str(panel), "--output-dir", str(tmp_path / "o"),
        "--penalty", "huber", "--lam", "0.1",
    )
    assert code == 1
    assert "penalty" in err


def test_synth_ok_line_and_determinism(capsys, tmp_path):
    a = _synth(capsys, tmp_path, "a.csv")
    b = _synth(capsys, tmp_path, "b.csv")
    assert a.read_bytes() == b.read_bytes()


def test_ingest_renames_columns(capsys, tmp_path):
    raw = tmp_path / "raw.csv"
    raw.write_text(
        "prov;yr;co2;coal;oil\nB;2001;4.0;2.0;1.0\nA;2000;1.5;1.0;3.0\n"
    )
    out = tmp_path / "canon.csv"
    code, stdout, _ = run_cli(
        capsys, "ingest", "--input", str(raw), "--output", str(out),
        "--entity-column", "prov", "--period-column", "yr",
        "--target-column", "co2", "--delimiter", ";",
    )
    assert code == 0
    assert "ingest ok rows=2" in stdout
    rows = list(csv.reader(out.open()))
    assert rows[0] == ["entity", "period", "target", "coal", "oil"]
    assert rows[1][:2] == ["A", "2000"]


def test_ingest_with_factor_table(capsys, tmp_path):
    raw = tmp_path / "raw.csv"
    raw.write_text("entity,period,coal,oil\nA,2000,2.0,1.0\n")
    factors = tmp_path / "factors.csv"
    factors.write_text("feature,factor\ncoal,2.5\noil,3.0\n")
    out = tmp_path / "canon.csv"
    code, stdout, _ = run_cli(
        capsys, "ingest", "--input", str(raw), "--output", str(out),
        "--target-column", "", "--factors", str(factors),
    )
    # empty target name means: no target column in the raw file
    assert code == 0
    rows = list(csv.reader(out.open()))
    assert float(rows[1][2]) == 2.0 * 2.5 + 1.0 * 3.0


def test_cluster_fit_cv_path_compose(capsys, tmp_path):
    panel = _synth(capsys, tmp_path)
    code, out, _ = run_cli(
        capsys, "cluster", "--input", str(panel), "--output-dir", str(tmp_path / "c"),
        "--eps", "0.2", "--min-pts", "3",
    )
    assert code == 0 and "cluster ok" in out
    bundle = tmp_path / "c" / "cluster_model.json"
    assert bundle.exists()

    code, out, _ = run_cli(
        capsys, "fit", "--input", str(panel), "--output-dir", str(tmp_path / "f"),
        "--penalty", "lasso", "--lam", "0.001", "--cluster-model", str(bundle),
    )
    assert code == 0 and "fit ok" in out
    assert (tmp_path / "f" / "coefficients.csv").exists()

    code, out, _ = run_cli(
        capsys, "cv", "--input", str(panel), "--output", str(tmp_path / "cv.csv"),
        "--penalty", "elastic_net", "--lambda-grid", "logspace:-4:-1:5",
        "--alpha-grid", "0.5,1.0", "--folds", "4", "--cluster-model", str(bundle),
    )
    assert code == 0 and "cv ok" in out

    code, out, _ = run_cli(
        capsys, "path", "--input", str(panel), "--output", str(tmp_path / "path.csv"),
        "--penalty", "lasso", "--lambda-grid", "logspace:-4:-1:5",
        "--cluster-model", str(bundle),
    )
    assert code == 0 and "path ok" in out
    with (tmp_path / "path.csv").open() as fh:
        header = fh.readline().strip().split(",")
    assert header[:2] == ["lambda", "intercept"]


def test_cluster_model_must_match_panel(capsys, tmp_path):
    panel = _synth(capsys, tmp_path)
    other = _synth(capsys, tmp_path, "other.csv", seed=99,
                   spec="n_entities=5,n_periods=4,n_features=4,n_clusters=2")
    run_cli(
        capsys, "cluster", "--input", str(other), "--output-dir", str(tmp_path / "c2"),
        "--eps", "0.2", "--min-pts", "3",
    )
    code, _, err = run_cli(
        capsys, "fit", "--input", str(panel), "--output-dir", str(tmp_path / "f2"),
        "--penalty", "lasso", "--lam", "0.01",
        "--cluster-model", str(tmp_path / "c2" / "cluster_model.json"),
    )
    assert code == 1
    assert "row keys" in err


def test_rank_deficient_ridge_exits_2(capsys, tmp_path):
    # two identical feature columns and lam=0
    path = tmp_path / "p.csv"
    rows = ["entity,period,target,a,b"]
    rng = np.random.default_rng(0)
    for e in ("X", "Y", "Z"):
        for t in (2000, 2001, 2002):
            v = rng.uniform(1, 5)
            rows.append(f"{e},{t},{v + 1:.6f},{v:.6f},{v:.6f}")
    path.write_text("\n".join(rows) + "\n")
    code, _, err = run_cli(
        capsys, "fit", "--input", str(path), "--output-dir", str(tmp_path / "rd"),
        "--penalty", "ridge", "--lam", "0",
    )
    assert code == 2
    assert "numerical" in err


def test_scan_and_suggestion(capsys, tmp_path):
    panel = _synth(capsys, tmp_path)
    code, out, _ = run_cli(
        capsys, "scan", "--input", str(panel), "--output", str(tmp_path / "scan.csv"),
        "--eps-grid", "0.05,0.1,0.3", "--minpts-grid", "3,4", "--threads", "2",
    )
    assert code == 0
    assert "scan ok cells=6" in out
    assert "best_eps=" in out
    lines = (tmp_path / "scan.csv").read_text().splitlines()
    assert lines[0] == "eps,min_pts,k,sc,sse"
    assert len(lines) == 7


def test_run_and_forecast_round_trip(capsys, tmp_path):
    panel = _synth(capsys, tmp_path, seed=5)
    outdir = tmp_path / "run"
    code, out, _ = run_cli(
        capsys, "run", "--input", str(panel), "--output-dir", str(outdir),
        "--eps", "0.2", "--min-pts", "3", "--penalty", "elastic_net",
        "--lambda-grid", "logspace:-4:-1:6", "--alpha-grid", "0.5,1.0",
        "--train-count", "6", "--folds", "4", "--plots",
    )
    assert code == 0 and "run ok" in out
    for name in ("clusters.csv", "cv_table.csv", "coefficients.csv", "fitted.csv",
                 "forecast.csv", "summary.json", "model.json"):
        assert (outdir / name).exists()
    assert (outdir / "plots" / "path_trajectories.csv").exists()
    assert (outdir / "plots" / "k_distance.csv").exists()
    assert (outdir / "plots" / "fit_scatter.csv").exists()

    # standalone forecast from the saved bundle reproduces the run's test rows
    code, out, _ = run_cli(
        capsys, "forecast", "--input", str(panel), "--model", str(outdir / "model.json"),
        "--output", str(tmp_path / "fc.csv"),
    )
    assert code == 0 and "forecast ok" in out

    def read_rows(path):
        with Path(path).open() as fh:
            return {(r["entity"], r["period"]): r for r in csv.DictReader(fh)}

    run_fc = read_rows(outdir / "forecast.csv")
    solo_fc = read_rows(tmp_path / "fc.csv")
    assert set(run_fc) <= set(solo_fc)
    for key, row in run_fc.items():
        assert solo_fc[key]["predicted_log"] == row["predicted_log"]


def test_run_is_reproducible_byte_for_byte(capsys, tmp_path):
    panel = _synth(capsys, tmp_path, seed=8)
    args = [
        "run", "--input", str(panel), "--eps", "0.2", "--min-pts", "3",
        "--penalty", "lasso", "--lambda-grid", "logspace:-4:-1:5",
        "--train-count", "6", "--folds", "3",
    ]
    for d in ("r1", "r2"):
        code, *_ = run_cli(capsys, *args, "--output-dir", str(tmp_path / d))
        assert code == 0
    for p1 in sorted((tmp_path / "r1").iterdir()):
        p2 = tmp_path / "r2" / p1.name
        assert p2.read_bytes() == p1.read_bytes(), p1.name


def test_config_file_with_flag_override(capsys, tmp_path):
    panel = _synth(capsys, tmp_path, seed=3)
    cfg = tmp_path / "run.cfg"
    cfg.write_text(
        "# run settings\n"
        "penalty=ridge\n"
        "lambda_grid=0.1,0.5\n"
        "eps=0.2\n"
        "min_pts=3\n"
        "train_count=6\n"
        "folds=3   # trailing comment\n"
    )
    out1 = tmp_path / "from_cfg"
    code, out, _ = run_cli(
        capsys, "run", "--input", str(panel), "--output-dir", str(out1),
        "--config", str(cfg),
    )
    assert code == 0
    assert json.loads((out1 / "summary.json").read_text())["chosen"]["kind"] == "ridge"

    out2 = tmp_path / "overridden"
    code, out, _ = run_cli(
        capsys, "run", "--input", str(panel), "--output-dir", str(out2),
        "--config", str(cfg), "--penalty", "lasso",
        "--lambda-grid", "logspace:-4:-2:4",
    )
    assert code == 0
    assert json.loads((out2 / "summary.json").read_text())["chosen"]["kind"] == "lasso"


def test_config_file_errors(capsys, tmp_path):
    panel = _synth(capsys, tmp_path)
    cfg = tmp_path / "bad.cfg"
    cfg.write_text("nonsense_key=1\n")
    code, _, err = run_cli(
        capsys, "run", "--input", str(panel), "--output-dir", str(tmp_path / "x"),
        "--config", str(cfg),
    )
    assert code == 1
    assert "nonsense_key" in err

    cfg.write_text("penalty ridge\n")
    code, _, err = run_cli(
        capsys, "run", "--input", str(panel), "--output-dir", str(tmp_path / "x"),
        "--config", str(cfg),
    )
    assert code == 1
    assert "key=value" in err


def test_run_without_split_settings_exits_1(capsys, tmp_path):
    panel = _synth(capsys, tmp_path)
    code, _, err = run_cli(
        capsys, "run", "--input", str(panel), "--output-dir", str(tmp_path / "y"),
        "--eps", "0.2", "--min-pts", "3",
    )
    assert code == 1
    assert "train" in err
