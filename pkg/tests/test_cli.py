import csv
import json
import os
import subprocess
import sys

import numpy as np
import pytest
from scipy import stats

from tolf import cli
from tolf import experiment as ex
from tolf.flowdist import FlowConfig, FlowModel

TINY = {
    "tag": "tiny",
    "seed": 3,
    "dataset": {"n_train": 400, "n_test": 200},
    "noise": {"kind": "student_t", "scale": 1.0},
    "train": {"loss": "tolf", "epochs": 2, "batch": 64},
    "flow": {"num_coupling_layers": 2, "subnet_width": 16},
}


def _write(tmp_path, d, name="cfg.json"):
    p = tmp_path / name
    p.write_text(json.dumps(d))
    return str(p)


def _read_csv(path):
    with open(path, newline="", encoding="utf-8") as fh:
        return list(csv.reader(fh))


# -- config layer ----------------------------------------------------------------

def test_config_roundtrip():
    cfg = ex.ExperimentConfig.from_dict(TINY)
    d = cfg.to_dict()
    again = ex.ExperimentConfig.from_dict(json.loads(json.dumps(d)))
    assert again == cfg and again.to_dict() == d
    assert d["train"]["lr"] == 0.01 and d["flow"]["num_coupling_layers"] == 2


def test_bundled_quickstart_is_valid():
    from importlib.resources import files

    cfg = ex.load_config(files("tolf") / "configs" / "quickstart.json")
    assert cfg.tag == "quickstart" and cfg.train["loss"] == "tolf" and cfg.train["lam"] == 0.1


@pytest.mark.parametrize("patch,path", [
    ({"train": {"lr": -1}}, "train.lr"),
    ({"train": {"lrr": 0.1}}, "train.lrr"),
    ({"noise": {"kind": "laplace"}}, "noise.kind"),
    ({"dataset": {"scale_mix": [0.5, 0.5, 0.5, 0]}}, "dataset.scale_mix"),
    ({"dataset": {"scale_mix": [1, 0]}}, "dataset.scale_mix"),
    ({"flow": {"dim": 2}}, "flow.dim"),
    ({"noise": {"kind": "student_t", "scale": 1.0, "nu": 1.5}}, "noise.nu"),
    ({"tag": "has space"}, "tag"),
    ({"extra": 1}, "extra"),
])
def test_config_errors_name_the_field(patch, path):
    d = {**TINY, **patch}
    with pytest.raises(ex.ConfigError) as err:
        ex.ExperimentConfig.from_dict(d)
    assert err.value.path == path
    assert str(err.value).startswith(path + ":")


def test_missing_tag():
    with pytest.raises(ex.ConfigError):
        ex.ExperimentConfig.from_dict({"seed": 0})


def test_digest_ignores_out_dir_and_tracks_content():
    a = ex.ExperimentConfig.from_dict(TINY)
    assert a.digest() == a.with_overrides(out_dir="/elsewhere").digest()
    assert a.digest() != a.with_overrides(seed=4).digest()
    assert a.digest() == ex.ExperimentConfig.from_dict({**TINY, "train": {**TINY["train"], "lr": 0.01}}).digest()


def test_overrides():
    a = ex.ExperimentConfig.from_dict(TINY)
    assert a.with_overrides(noise_scale=2).noise.scale == 2.0
    assert a.with_overrides(**{"lambda": 1.0}).train["lam"] == 1.0
    assert a.with_overrides(coupling_layers=3).flow.num_coupling_layers == 3
    assert a.with_overrides(loss="l2").train_config.loss == "l2"
    with pytest.raises(KeyError):
        a.with_overrides(width=3)
    with pytest.raises(ValueError):
        a.with_overrides(loss="huber")


def test_test_set_is_clean_and_seed_offset():
    cfg = ex.ExperimentConfig.from_dict(TINY)
    train, test = ex.build_data(cfg)
    assert not np.array_equal(train.gt, train.noisy)
    assert np.array_equal(test.gt, test.noisy)
    assert test.meta["seed"] == cfg.seed + ex.TEST_SEED_OFFSET


# -- run -------------------------------------------------------------------------

def test_run_writes_artifacts_and_is_deterministic(tmp_path, capsys):
    cfg_path = _write(tmp_path, TINY)
    out = str(tmp_path / "runs")
    assert cli.main(["run", "--config", cfg_path, "--out", out]) == 0
    cfg = ex.load_config(cfg_path)
    run_dir = os.path.join(out, ex.run_dir_name(cfg))
    for name in ("config.json", "record.json", "records.jsonl", "summary.csv", "trace.csv",
                 "checkpoint/head.json", "checkpoint/head.f64", "checkpoint/flow.json",
                 "checkpoint/flow.f64"):
        assert os.path.exists(os.path.join(run_dir, name)), name
    first = json.load(open(os.path.join(run_dir, "record.json")))
    raw = open(os.path.join(run_dir, "summary.csv"), "rb").read()
    assert raw.startswith(b"metric,subset,value\r\n")
    assert _read_csv(os.path.join(run_dir, "trace.csv"))[0] == ["epoch", "loss"]
    assert "run dir:" in capsys.readouterr().out

    # refusing to overwrite, then forcing
    assert cli.main(["run", "--config", cfg_path, "--out", out]) == cli.EXIT_EXISTS
    assert cli.main(["run", "--config", cfg_path, "--out", out, "--force"]) == 0
    second = json.load(open(os.path.join(run_dir, "record.json")))
    first.pop("wall_time"), second.pop("wall_time")
    assert first == second
    # the saved checkpoint is the trained flow in little-endian float64
    flow = FlowModel.load(os.path.join(run_dir, "checkpoint", "flow"))
    assert flow.config.num_coupling_layers == 2
    assert np.fromfile(os.path.join(run_dir, "checkpoint", "flow.f64"), dtype="<f8").size == len(flow.params)


def test_seed_flag_changes_run_dir(tmp_path):
    cfg_path = _write(tmp_path, {**TINY, "train": {**TINY["train"], "epochs": 1}})
    out = str(tmp_path / "runs")
    assert cli.main(["run", "--config", cfg_path, "--out", out, "--seed", "9"]) == 0
    rec = json.load(open(os.path.join(out, ex.run_dir_name(ex.load_config(cfg_path).with_overrides(seed=9)),
                                      "record.json")))
    assert rec["extra"]["seed"] == 9


def test_out_dir_precedence(tmp_path, monkeypatch):
    cfg = ex.ExperimentConfig.from_dict(TINY)
    monkeypatch.setenv("TOLF_OUT_DIR", str(tmp_path / "env"))
    assert cli.out_root(None, cfg) == str(tmp_path / "env")
    assert cli.out_root(None, cfg.with_overrides(out_dir="cfgdir")) == "cfgdir"
    assert cli.out_root("flag", cfg.with_overrides(out_dir="cfgdir")) == "flag"
    monkeypatch.delenv("TOLF_OUT_DIR")
    assert cli.out_root(None, cfg) == cli.DEFAULT_OUT


def test_env_out_dir_used_by_run(tmp_path, monkeypatch):
    monkeypatch.setenv("TOLF_OUT_DIR", str(tmp_path / "envroot"))
    cfg_path = _write(tmp_path, {**TINY, "train": {**TINY["train"], "epochs": 1}})
    assert cli.main(["run", "--config", cfg_path]) == 0
    assert len(os.listdir(tmp_path / "envroot")) == 1


def test_config_error_exit_code(tmp_path, capsys):
    bad = _write(tmp_path, {**TINY, "train": {"lr": "fast"}})
    assert cli.main(["run", "--config", bad, "--out", str(tmp_path)]) == cli.EXIT_CONFIG
    assert "train.lr" in capsys.readouterr().err
    assert cli.main(["run", "--config", str(tmp_path / "missing.json")]) == cli.EXIT_CONFIG
    (tmp_path / "broken.json").write_text("{not json")
    assert cli.main(["run", "--config", str(tmp_path / "broken.json")]) == cli.EXIT_CONFIG


def test_divergence_exit_code(tmp_path):
    d = {**TINY, "noise": {"kind": "gaussian_center", "scale": 3.0},
         "train": {"loss": "l2", "lr": 50.0, "grad_clip": None, "epochs": 3}}
    out = str(tmp_path / "runs")
    assert cli.main(["run", "--config", _write(tmp_path, d), "--out", out]) == cli.EXIT_DIVERGED
    (run_dir,) = os.listdir(out)
    assert json.load(open(os.path.join(out, run_dir, "failure.json")))["status"] == "diverged"


# -- sweep -----------------------------------------------------------------------

def test_sweep_lambda_with_jobs(tmp_path):
    cfg_path = _write(tmp_path, {**TINY, "train": {**TINY["train"], "epochs": 1}})
    out = str(tmp_path / "runs")
    args = ["sweep", "--config", cfg_path, "--axis", "lambda", "--values", "0.01", "0.1", "1.0",
            "--seeds", "0", "1", "--out", out]
    assert cli.main(args + ["--jobs", "2"]) == 0
    (sweep_dir,) = [os.path.join(out, d) for d in os.listdir(out)]
    comp = _read_csv(os.path.join(sweep_dir, "comparison.csv"))
    assert comp[0] == cli.COMPARISON_HEADER
    assert [r[1] for r in comp[1:]] == ["0.01", "0.1", "1.0"]
    assert all(r[2] == "2" and r[3] == "0" for r in comp[1:])
    cells = _read_csv(os.path.join(sweep_dir, "cells.csv"))
    assert len(cells) == 7 and all(r[3] == "ok" for r in cells[1:])
    assert len(open(os.path.join(sweep_dir, "records.jsonl")).read().splitlines()) == 6

    # sequential execution gives the same tables
    seq_out = str(tmp_path / "seq")
    assert cli.main(args[:-1] + [seq_out]) == 0
    (seq_dir,) = [os.path.join(seq_out, d) for d in os.listdir(seq_out)]
    assert _read_csv(os.path.join(seq_dir, "comparison.csv")) == comp
    assert cli.main(args) == cli.EXIT_EXISTS


def test_sweep_failed_cell_marked(tmp_path):
    d = {**TINY, "noise": {"kind": "gaussian_center", "scale": 3.0},
         "train": {"loss": "l2", "grad_clip": None, "epochs": 2}}
    out = str(tmp_path / "runs")
    code = cli.main(["sweep", "--config", _write(tmp_path, d), "--axis", "loss", "--values", "l2", "kl",
                     "--out", out])
    assert code == 0
    code = cli.main(["sweep", "--config", _write(tmp_path, {**d, "train": {**d["train"], "lr": 50.0}}),
                     "--axis", "noise_scale", "--values", "0", "3", "--out", out])
    assert code == cli.EXIT_DIVERGED
    sweep_dir = [os.path.join(out, x) for x in os.listdir(out) if "noise_scale" in x][0]
    statuses = [r[3] for r in _read_csv(os.path.join(sweep_dir, "cells.csv"))[1:]]
    assert "diverged" in statuses


def test_sweep_bad_value(tmp_path):
    cfg_path = _write(tmp_path, TINY)
    code = cli.main(["sweep", "--config", cfg_path, "--axis", "coupling_layers", "--values", "three",
                     "--out", str(tmp_path)])
    assert code == cli.EXIT_CONFIG


# -- density export --------------------------------------------------------------

def test_density_export_identity_flow(tmp_path):
    FlowModel(FlowConfig(), seed=0).save(tmp_path / "flow")
    out = str(tmp_path / "dens")
    code = cli.main(["density-export", "--checkpoint", str(tmp_path / "flow.json"), "--coordinate", "w",
                     "--grid", "-3", "3", "61", "--samples", "50", "--out", out])
    assert code == 0
    rows = _read_csv(out + ".csv")
    assert rows[0] == ["t_bar", "log_prob"] and len(rows) == 62
    t = np.array([float(r[0]) for r in rows[1:]])
    lp = np.array([float(r[1]) for r in rows[1:]])
    assert t[0] == -3.0 and t[-1] == 3.0
    np.testing.assert_allclose(lp, stats.norm.logpdf(t), atol=1e-9)
    meta = json.load(open(out + ".json"))
    assert meta["grid"] == {"first": -3.0, "last": 3.0, "step": 0.1, "points": 61}
    assert meta["local_maxima"] == 1
    samples = _read_csv(out + "_samples.csv")
    assert samples[0] == ["x", "y", "w", "h"] and len(samples) == 51
    # refuses to overwrite
    assert cli.main(["density-export", "--checkpoint", str(tmp_path / "flow"), "--coordinate", "w",
                     "--out", out]) == cli.EXIT_EXISTS


def test_density_export_errors(tmp_path):
    FlowModel(FlowConfig(), seed=0).save(tmp_path / "flow")
    ck = str(tmp_path / "flow")
    assert cli.main(["density-export", "--checkpoint", ck, "--coordinate", "z"]) == cli.EXIT_CONFIG
    assert cli.main(["density-export", "--checkpoint", ck, "--coordinate", "x",
                     "--grid", "1", "0", "5"]) == cli.EXIT_CONFIG
    assert cli.main(["density-export", "--checkpoint", str(tmp_path / "nope"),
                     "--coordinate", "x"]) == cli.EXIT_CONFIG


def test_density_export_from_run_dir(tmp_path):
    cfg_path = _write(tmp_path, {**TINY, "train": {**TINY["train"], "epochs": 1}})
    out = str(tmp_path / "runs")
    assert cli.main(["run", "--config", cfg_path, "--out", out]) == 0
    (run_dir,) = [os.path.join(out, d) for d in os.listdir(out)]
    assert cli.main(["density-export", "--checkpoint", run_dir, "--coordinate", "x"]) == 0
    assert os.path.exists(os.path.join(run_dir, "checkpoint", "density-x.csv"))


# -- selftest / entry points -----------------------------------------------------

def test_selftest(capsys):
    assert cli.main(["selftest"]) == 0
    lines = capsys.readouterr().out.splitlines()
    assert sum(line.startswith("PASS") for line in lines) == 11
    assert not any(line.startswith("FAIL") for line in lines)


def test_module_entry_point():
    r = subprocess.run([sys.executable, "-m", "tolf", "--help"], capture_output=True, text=True)
    assert r.returncode == 0
    for cmd in ("run", "sweep", "density-export", "selftest"):
        assert cmd in r.stdout
