import copy
import csv
import json
import math

import numpy as np
import pytest

from jacshield import cli
from jacshield import network as nw

BASE = {
    "dataset": {"kind": "synthetic", "classes": 3, "dims": 4, "n_per_class": 40, "n_train": 80,
                "n_test": 40, "spread": 0.3},
    "architecture": {"name": "tiny-mlp", "hidden": 8},
    "train": {"rate": 0.01, "batch_size": 20, "epochs_phase1": 3, "epochs_phase2": 2,
              "probe_size": 10},
    "evaluation": {"n_bounds": 10, "n_verify": 5},
}


def config(**sections):
    cfg = copy.deepcopy(BASE)
    for key, value in sections.items():
        if isinstance(value, dict) and isinstance(cfg.get(key), dict):
            cfg[key].update(value)
        else:
            cfg[key] = value
    return cfg


def write_cfg(tmp_path, cfg, name="cfg.json"):
    path = tmp_path / name
    path.write_text(json.dumps(cfg))
    return str(path)


def without_time(report):
    return {k: v for k, v in report.items() if k != "created"}


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    cfg = cli.normalize(config(defense={"reg_kind": "jacobian", "lam": 0.1},
                               attacks=[{"kind": "fgsm", "epsilons": [0.0, 0.1, 0.2]}]))
    report = cli.cmd_train(cfg, str(out))
    return cfg, out, report


# --- config ------------------------------------------------------------------

def test_normalize_is_idempotent():
    once = cli.normalize(config(attacks=[{"kind": "jsma"}]))
    assert cli.normalize(copy.deepcopy(once)) == once
    assert once["attacks"][0]["name"] == "jsma"
    assert once["evaluation"]["deepfool"]["overshoot"] == 0.02


@pytest.mark.parametrize("bad", [
    {"bogus": 1},
    {"train": {"ratez": 1.0}},
    {"defense": {"reg_kind": "jacobian", "lam": -1.0}},
    {"defense": {"reg_kind": "input_gradient", "reg_layer": "L-1"}},
    {"attacks": [{"kind": "fgsm"}, {"kind": "fgsm"}]},
    {"evaluation": {"deepfool": {"kind": "fgsm"}}},
    {"defense": {"adv_fraction": 0.5}},
])
def test_normalize_rejects(bad):
    with pytest.raises(cli.ConfigError):
        cli.normalize(config(**bad))


def test_config_copy_round_trips(trained):
    cfg, out, _ = trained
    saved = json.loads((out / "config.json").read_text())
    assert cli.normalize(saved) == cfg


# --- train -------------------------------------------------------------------

def test_train_writes_artifacts(trained):
    _, out, report = trained
    for name in ("config.json", "phase1.jshd", "model.jshd", "report.json", "curve_fgsm.csv"):
        assert (out / name).exists(), name
    on_disk = json.loads((out / "report.json").read_text())
    cli.validate_report(on_disk)
    assert on_disk["status"] == "ok"
    assert [r["phase"] for r in on_disk["history"]] == [1, 1, 1, 2, 2]


def test_plain_run_reports_clean_accuracy_only(tmp_path):
    report = cli.cmd_train(cli.normalize(config()), str(tmp_path))
    assert "clean_accuracy" in report and "evaluation" not in report
    assert len(report["history"]) == 3
    assert (tmp_path / "phase1.jshd").read_bytes() == (tmp_path / "model.jshd").read_bytes()


def test_curve_csv(trained):
    _, out, report = trained
    raw = (out / "curve_fgsm.csv").read_bytes()
    assert raw.count(b"\r\n") == 4
    rows = list(csv.reader(raw.decode().splitlines()))
    assert rows[0] == ["epsilon", "accuracy"] and len(rows) - 1 == 3
    assert float(rows[1][1]) == report["evaluation"]["clean_accuracy"]
    assert report["evaluation"]["bound_violation_rate"] == 0.0


def test_train_is_deterministic(tmp_path, trained):
    cfg, out, report = trained
    again = cli.cmd_train(cfg, str(tmp_path))
    assert (tmp_path / "model.jshd").read_bytes() == (out / "model.jshd").read_bytes()
    assert without_time(again) == without_time(report)


DIVERGING = dict(train={"optimizer": "sgd", "rate": 1e300},
                 defense={"reg_kind": "jacobian", "lam": 0.1, "from_scratch": True})


def test_failed_train_leaves_marked_report(tmp_path):
    cfg = cli.normalize(config(**DIVERGING))
    with pytest.raises((cli.DivergenceError, cli.NonFiniteError)):
        with np.errstate(all="ignore"):
            cli.cmd_train(cfg, str(tmp_path))
    rep = json.loads((tmp_path / "report.json").read_text())
    assert rep["status"] == "failed" and rep["error"]


# --- evaluate ----------------------------------------------------------------

def test_evaluate_repeatable(tmp_path, trained):
    cfg, out, _ = trained
    cfg = copy.deepcopy(cfg)
    cfg["evaluation"]["svg"] = True
    a = cli.cmd_evaluate(cfg, str(out / "model.jshd"), str(tmp_path / "a"))
    b = cli.cmd_evaluate(cfg, str(out / "model.jshd"), str(tmp_path / "b"))
    assert without_time(a) == without_time(b)
    assert (tmp_path / "a" / "curves.svg").read_text().startswith("<svg")
    assert a["evaluation"]["attack_curves"]["fgsm"][0][1] == a["clean_accuracy"]


def test_evaluate_architecture_mismatch(tmp_path, trained):
    cfg, out, _ = trained
    other = cli.normalize(config(architecture={"name": "tiny-mlp", "hidden": 9}))
    with pytest.raises(cli.ConfigError, match="does not match"):
        cli.cmd_evaluate(other, str(out / "model.jshd"), str(tmp_path))


def test_non_finite_values_serialize(tmp_path):
    path = tmp_path / "x.json"
    cli.write_json(path, {"a": math.inf, "b": -math.inf, "c": np.float64(0.5)})
    assert json.loads(path.read_text()) == {"a": "inf", "b": "-inf", "c": 0.5}


# --- sweep -------------------------------------------------------------------

def test_sweep_axis_count():
    with pytest.raises(cli.ConfigError):
        cli.sweep_axis(cli.normalize(config()))
    with pytest.raises(cli.ConfigError):
        cli.sweep_axis(cli.normalize(config(sweep={"lam": [0.1], "adv_fraction": [0.1]})))
    assert cli.sweep_axis(cli.normalize(config(sweep={"reg_layer": ["L"]}))) == "reg_layer"


def test_lambda_sweep(tmp_path):
    cfg = cli.normalize(config(defense={"reg_kind": "jacobian"}, sweep={"lam": [0.0, 0.1]}))
    report = cli.cmd_sweep(cfg, str(tmp_path / "sweep"))
    rows = report["sweep"]["rows"]
    assert [r["value"] for r in rows] == [0.0, 0.1]
    plain = cli.cmd_train(cli.normalize(config()), str(tmp_path / "plain"))
    assert rows[0]["test_accuracy"] == plain["clean_accuracy"]
    lines = (tmp_path / "sweep" / "sweep.csv").read_bytes().split(b"\r\n")
    assert lines[0] == b"lam,test_accuracy,rho_adv,avg_jac_fro" and len(lines) == 4


def test_fraction_sweep_rows(tmp_path):
    fractions = [0.1, 0.2, 0.3, 0.4, 0.5]
    cfg = cli.normalize(config(train={"epochs_phase1": 1, "epochs_phase2": 1},
                               defense={"adv_attack": {"kind": "fgsm", "epsilon": 0.05}},
                               sweep={"adv_fraction": fractions}))
    report = cli.cmd_sweep(cfg, str(tmp_path))
    assert [r["value"] for r in report["sweep"]["rows"]] == fractions


# --- verify ------------------------------------------------------------------

def test_verify_linear_checkpoint(tmp_path):
    cfg = config()
    cfg["architecture"] = {"name": "linear"}
    cfg = cli.normalize(cfg)
    cli.cmd_train(cfg, str(tmp_path / "run"))
    ckpt = str(tmp_path / "run" / "model.jshd")
    report = cli.cmd_verify(cfg, ckpt, str(tmp_path / "verify"), n=7)
    ver = report["verify"]
    assert ver["n"] == 7 and len(ver["samples"]) == 7
    assert ver["summary"]["curvature_violations"] == 0
    assert ver["summary"]["bound_chain_violations"] == 0
    net = nw.load_checkpoint(ckpt)
    w = net.layers[0].weight
    fro = np.linalg.norm(w)
    _, test = cli.load_data(cfg)
    for s in ver["samples"]:
        b = s["bounds"]
        z = nw.logits(net, test.x[b["sample_id"]])
        k = b["predicted"]
        others = [j for j in range(w.shape[1]) if j != k]
        diffs = [np.linalg.norm(w[:, k] - w[:, j]) for j in others]
        gaps = [abs(z[k] - z[j]) for j in others]
        assert b["d_cor2"] == pytest.approx(min(g / d for g, d in zip(gaps, diffs)), rel=1e-9)
        assert b["d_prop3"] == pytest.approx(min(gaps) / (math.sqrt(2) * fro), rel=1e-9)
        closest = int(np.argmin([g / d for g, d in zip(gaps, diffs)]))
        if closest == int(np.argmin(gaps)):
            # same class for both: the ratio is that class's gradient gap over sqrt2 ||J||_F
            assert b["d_prop3"] / b["d_cor2"] == pytest.approx(
                diffs[closest] / (math.sqrt(2) * fro), rel=1e-9)
        assert b["d_prop3"] <= b["d_cor2"]


def test_verify_n_too_large(tmp_path, trained):
    cfg, out, _ = trained
    with pytest.raises(cli.ConfigError):
        cli.cmd_verify(cfg, str(out / "model.jshd"), str(tmp_path), n=10_000)


# --- entry point and exit codes -------------------------------------------------

def test_exit_ok_and_seed_override(tmp_path):
    path = write_cfg(tmp_path, config())
    assert cli.main(["train", "--config", path, "--out", str(tmp_path / "r"), "--seed", "5"]) == 0
    saved = json.loads((tmp_path / "r" / "config.json").read_text())
    assert saved["seed"] == 5


def test_exit_config_errors(tmp_path, capsys):
    assert cli.main(["train", "--config", write_cfg(tmp_path, {"nope": 1})]) == 2
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    assert cli.main(["train", "--config", str(bad)]) == 2
    assert "jacshield:" in capsys.readouterr().err


def test_exit_io_errors(tmp_path):
    path = write_cfg(tmp_path, config())
    assert cli.main(["train", "--config", str(tmp_path / "missing.json")]) == 4
    assert cli.main(["evaluate", "--config", path, "--checkpoint", str(tmp_path / "none.jshd"),
                     "--out", str(tmp_path / "e")]) == 4
    junk = tmp_path / "junk.jshd"
    junk.write_bytes(b"not a checkpoint")
    assert cli.main(["verify", "--config", path, "--checkpoint", str(junk),
                     "--out", str(tmp_path / "v")]) == 4


def test_exit_divergence(tmp_path):
    path = write_cfg(tmp_path, config(**DIVERGING))
    with np.errstate(all="ignore"):
        assert cli.main(["train", "--config", path, "--out", str(tmp_path / "r")]) == 3
