import json
import subprocess
import sys

import pytest

from tempheno.cli import main
from tempheno.report import read_csv

SMALL = {
    "seed": 1,
    "synth": {"n_subjects": 60, "n_hours": 48, "missing_fraction": 0.3, "max_shift": 2},
    "impute": {"rank": 3, "max_shift": 2, "max_iters": 30},
    "cluster": {"t_max": 30},
    "post": {"k_min": 2, "k_max": 8, "min_k": 4},
    "predict": {"horizons": [12, 48], "iters": 100},
}


def write_config(tmp_path, data, name="config.json"):
    path = tmp_path / name
    path.write_text(json.dumps(data))
    return path


@pytest.fixture(scope="module")
def small_run(tmp_path_factory):
    tmp = tmp_path_factory.mktemp("cli")
    cfg = write_config(tmp, {**SMALL, "out": str(tmp / "run")})
    assert main(["run-all", "--config", str(cfg)]) == 0
    return tmp / "run"


def test_run_all_writes_every_artifact(small_run):
    expected = [
        "cohort", "labels.csv", "outcomes.csv", "ground_truth/ground_truth.json",
        "normalization.json", "imputed", "imputation/meta.json", "soft",
        "post/representation.csv", "post/hybrid_assignments.csv", "post/silhouette_sweep.csv",
        "post/summary.csv", "post/meta.json",
        "predict/features_12.csv", "predict/model_48.json", "predict/metrics_48.csv",
        "predict/confusion_12.csv",
        "report/table1.csv", "report/silhouette.csv", "report/silhouette.svg",
        "report/trajectories.csv", "report/trajectories.svg", "report/confusion_48.svg",
        "report/recovery.json",
    ]
    missing = [p for p in expected if not (small_run / p).exists()]
    assert not missing


def test_table1_columns(small_run):
    header, rows = read_csv(small_run / "report" / "table1.csv")
    assert header[:5] == ["sub_phenotype", "size", "mu_1", "mu_2", "mu_3"]
    assert header[5] == "ABM" and header[-1] == "mortality_pct"
    assert [int(r[0]) for r in rows] == list(range(1, len(rows) + 1))
    abm = [float(r[5]) for r in rows]
    assert all(0 <= a <= 1 for a in abm)


def test_sweep_range(small_run):
    _, rows = read_csv(small_run / "post" / "silhouette_sweep.csv")
    assert [int(r[0]) for r in rows] == list(range(2, 9))
    meta = json.loads((small_run / "post" / "meta.json").read_text())
    assert meta["k"] >= 4


def test_metrics_scopes(small_run):
    header, rows = read_csv(small_run / "predict" / "metrics_48.csv")
    assert header == ["scope", "accuracy", "precision", "recall", "auprc"]
    assert rows[0][0] == "macro"
    # accuracy is reported for the macro row only
    assert all(r[1] == "" for r in rows[1:])
    assert all(0 <= float(v) <= 1 for r in rows for v in r[1:] if v)


def test_config_errors_listed(tmp_path, capsys):
    bad = {"seed": 0, "bogus": 1, "synth": {"n_subjects": 0}, "cluster": {"eta": 1.0, "K": "three"}}
    code = main(["synth", "--config", str(write_config(tmp_path, bad))])
    err = capsys.readouterr().err
    assert code == 2
    for fragment in ("bogus", "n_subjects", "eta", "cluster.K"):
        assert fragment in err


def test_missing_config_file(tmp_path):
    assert main(["impute", "--config", str(tmp_path / "nope.json")]) == 2


def test_stage_out_of_order(tmp_path, capsys):
    cfg = write_config(tmp_path, {**SMALL, "out": str(tmp_path / "run")})
    assert main(["impute", "--config", str(cfg)]) == 3
    assert "tempheno synth" in capsys.readouterr().err
    assert main(["synth", "--config", str(cfg)]) == 0
    assert main(["cluster", "--config", str(cfg)]) == 3
    err = capsys.readouterr().err
    assert "imputed" in err and "tempheno impute" in err


def test_data_error_exit_code(tmp_path):
    # the stratified split needs every class on both sides
    cfg = {**SMALL, "out": str(tmp_path / "run"), "synth": {**SMALL["synth"], "n_subjects": 8}}
    path = write_config(tmp_path, cfg)
    assert main(["synth", "--config", str(path)]) == 0
    assert main(["impute", "--config", str(path)]) == 0
    assert main(["cluster", "--config", str(path)]) == 0
    assert main(["post", "--config", str(path), "--k", "4", "--min-k", "2"]) == 0
    assert main(["predict", "--config", str(path), "--split", "0.2"]) == 1


def test_flags_override_config(tmp_path):
    cfg = write_config(tmp_path, {**SMALL, "out": str(tmp_path / "a")})
    out = tmp_path / "b"
    assert main(["synth", "--config", str(cfg), "--out", str(out), "--seed", "5"]) == 0
    truth = json.loads((out / "ground_truth" / "ground_truth.json").read_text())
    assert truth["spec"]["seed"] == 5
    assert not (tmp_path / "a").exists()


def test_fixed_k_skips_sweep(small_run, tmp_path):
    cfg = write_config(tmp_path, {**SMALL, "out": str(small_run)})
    assert main(["post", "--config", str(cfg), "--k", "5"]) == 0
    assert json.loads((small_run / "post" / "meta.json").read_text())["k"] == 5
    _, rows = read_csv(small_run / "post" / "silhouette_sweep.csv")
    assert [r[0] for r in rows] == ["5"]


def test_synth_from_spec(tmp_path):
    spec = tmp_path / "spec.json"
    spec.write_text(json.dumps({"n_subjects": 20, "seed": 3}))
    out = tmp_path / "s"
    assert main(["synth", "--spec", str(spec), "--out", str(out)]) == 0
    _, rows = read_csv(out / "labels.csv")
    assert len(rows) == 20
    spec.write_text(json.dumps({"n_subjects": 20, "oops": 1}))
    assert main(["synth", "--spec", str(spec), "--out", str(out)]) == 2


def test_console_entry_point(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "tempheno.cli", "--help"], capture_output=True, text=True)
    assert proc.returncode == 0 and "run-all" in proc.stdout
