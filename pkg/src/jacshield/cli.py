"""``jacshield`` command line: train, evaluate, sweep and verify.

Every command reads one JSON config (unknown keys are rejected), writes its
outputs under ``--out`` and exits with 0 on success, 2 on a config error, 3 on
numeric divergence and 4 on an IO or file-format error.
"""

from __future__ import annotations

import argparse
import copy
import csv
import functools
import json
import math
import os
import sys
from dataclasses import asdict
from datetime import datetime, timezone
from importlib import resources

import jsonschema
import numpy as np

from . import data_io
from . import network as nw
from . import robustness as rb
from .attacks import AttackConfig, deepfool_batch
from .autodiff import NonFiniteError
from .regularizers import LossConfig
from .trainer import DivergenceError, OptimizerConfig, TrainConfig, post_process, train_phase

EXIT_OK, EXIT_CONFIG, EXIT_DIVERGENCE, EXIT_IO = 0, 2, 3, 4
SWEEP_AXES = ("lam", "adv_fraction", "reg_layer")
DEFAULT_FGSM_GRID = [0.0, 0.05, 0.1, 0.15, 0.2, 0.25, 0.3]

DEFAULTS = {
    "seed": 0,
    "output_dir": "runs",
    "dataset": {"kind": "mnist5k", "n_train": 2000, "n_test": 1000, "split_seed": 0},
    "architecture": {"name": "mnist-small", "orthonormal_last_layer": False},
    "train": {"optimizer": "adam", "rate": 1e-4, "beta1": 0.9, "beta2": 0.999, "decay": 0.9,
              "eps": 1e-8, "batch_size": 50, "epochs_phase1": 10, "epochs_phase2": 5,
              "probe_size": 100},
    "defense": {"reg_kind": "none", "lam": 0.0, "reg_layer": "L", "per_sample_sqrt": False,
                "jacobian_mode": "train", "adv_fraction": 0.0, "from_scratch": False},
    "attacks": [],
    "evaluation": {"deepfool": {"kind": "deepfool"}, "n_bounds": 100, "n_verify": 20,
                   "svg": False},
}
SYNTH_DEFAULTS = {"classes": 2, "dims": 2, "n_per_class": 100, "spread": 0.1}


class ConfigError(ValueError):
    pass


# --- config ------------------------------------------------------------------

@functools.lru_cache(maxsize=None)
def _schema(name):
    return json.loads(resources.files("jacshield").joinpath("schemas").joinpath(name).read_text())


def _attack_defaults(spec):
    out = {k: v for k, v in asdict(AttackConfig(spec["kind"])).items()}
    out.update(spec)
    out.setdefault("name", spec["kind"])
    if out["kind"] == "fgsm":
        out.setdefault("epsilons", list(DEFAULT_FGSM_GRID))
    else:
        out.setdefault("epsilons", [out["epsilon"]])
    return out


def normalize(cfg):
    """Validate ``cfg`` and fill in every default; idempotent."""
    try:
        jsonschema.validate(cfg, _schema("config.schema.json"))
    except jsonschema.ValidationError as exc:
        where = "/".join(str(p) for p in exc.absolute_path) or "<root>"
        raise ConfigError(f"config error at {where}: {exc.message}") from None
    out = copy.deepcopy(DEFAULTS)
    for key, value in cfg.items():
        if isinstance(value, dict) and isinstance(out.get(key), dict):
            out[key].update(copy.deepcopy(value))
        else:
            out[key] = copy.deepcopy(value)
    if out["dataset"]["kind"] == "synthetic":
        out["dataset"] = {**SYNTH_DEFAULTS, **out["dataset"]}
    out["attacks"] = [_attack_defaults(a) for a in out["attacks"]]
    out["evaluation"]["deepfool"] = _attack_defaults(out["evaluation"]["deepfool"])
    if "adv_attack" in out["defense"]:
        out["defense"]["adv_attack"] = _attack_defaults(out["defense"]["adv_attack"])
    names = [a["name"] for a in out["attacks"]]
    if len(set(names)) != len(names):
        raise ConfigError("attack names must be unique")
    # build every typed config once so semantic errors surface here
    try:
        train_config(out)
        for a in out["attacks"]:
            attack_config(a)
        attack_config(out["evaluation"]["deepfool"])
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"config error: {exc}") from None
    if out["evaluation"]["deepfool"]["kind"] != "deepfool":
        raise ConfigError("evaluation.deepfool must be a deepfool attack")
    return out


def load_config(path):
    try:
        with open(path) as fh:
            raw = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON: {exc}") from None
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: top level must be an object")
    return normalize(raw)


def attack_config(spec):
    return AttackConfig(**{k: v for k, v in spec.items() if k not in ("name", "epsilons")})


def loss_config(cfg):
    d = cfg["defense"]
    return LossConfig(d["lam"], d["reg_kind"], d["reg_layer"], d["per_sample_sqrt"],
                      d["jacobian_mode"])


def train_config(cfg):
    t, d = cfg["train"], cfg["defense"]
    opt = OptimizerConfig(t["optimizer"], t["rate"], t["beta1"], t["beta2"], t["decay"], t["eps"])
    adv = attack_config(d["adv_attack"]) if "adv_attack" in d else None
    return TrainConfig(opt, t["batch_size"], t["epochs_phase1"], t["epochs_phase2"],
                       loss_config(cfg), d["adv_fraction"], adv, cfg["seed"], t["probe_size"])


# --- building blocks ---------------------------------------------------------

def load_data(cfg):
    d = cfg["dataset"]
    kind = d["kind"]
    if kind == "synthetic":
        full = data_io.synth_gaussians(d["classes"], d["dims"], d["n_per_class"], d["spread"],
                                       d["split_seed"])
    elif kind == "mnist5k":
        full = data_io.mnist_subset(d.get("root"))
    elif kind == "idx":
        if "images" not in d or "labels" not in d:
            raise ConfigError("dataset kind 'idx' needs images and labels paths")
        root = data_io.data_dir(".")
        full = data_io.load_idx(os.path.join(root, d["images"]), os.path.join(root, d["labels"]))
    else:
        if "batch" not in d:
            raise ConfigError("dataset kind 'cifar10' needs a batch path")
        full = data_io.load_cifar10(os.path.join(data_io.data_dir("."), d["batch"]))
    if d["n_train"] + d["n_test"] > len(full):
        raise ConfigError(f"dataset has {len(full)} samples, config asks for "
                          f"{d['n_train']} + {d['n_test']}")
    return data_io.train_test_split(full, d["n_train"], d["n_test"], d["split_seed"])


def build_network(cfg, input_shape, num_classes):
    a = cfg["architecture"]
    seed = cfg["seed"]
    opts = {k: a[k] for k in ("hidden", "maps") if k in a}
    if "maps" in opts:
        opts["maps"] = tuple(opts["maps"])
    name = a["name"]
    if name in ("tiny-mlp", "linear"):
        if len(input_shape) != 1:
            raise ConfigError(f"{name} needs flat inputs")
        if "maps" in opts or (name == "linear" and opts):
            raise ConfigError(f"{name} takes no {'maps' if 'maps' in opts else 'hidden'}")
        if name == "linear":
            net = nw.init_network([nw.dense(input_shape[0], num_classes)], tuple(input_shape), seed)
        else:
            net = nw.tiny_mlp(input_shape[0], num_classes, seed, **opts)
    elif name == "cifar":
        net = nw.cifar_net(seed, k=num_classes, **opts)
    elif name == "mnist-small":
        net = nw.mnist_small(seed, **opts)
    else:
        if opts:
            raise ConfigError("the mnist architecture is fixed; use mnist-small to resize it")
        net = nw.mnist_net(seed)
    if tuple(net.input_shape) != tuple(input_shape):
        raise ConfigError(f"architecture {name} expects inputs {net.input_shape}, "
                          f"dataset has {tuple(input_shape)}")
    if a["orthonormal_last_layer"]:
        net = nw.freeze_orthonormal(net, net.dense_indices()[-1], seed)
    return net


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, (np.floating, float)):
        v = float(obj)
        return v if math.isfinite(v) else ("inf" if v > 0 else "-inf" if v < 0 else "nan")
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, np.bool_):
        return bool(obj)
    return obj


def write_json(path, obj):
    with open(path, "w") as fh:
        json.dump(_jsonable(obj), fh, indent=2, sort_keys=True)
        fh.write("\n")


def validate_report(report):
    jsonschema.validate(_jsonable(report), _schema("report.schema.json"))


def _report(command, cfg, **fields):
    rep = {"version": 1, "command": command, "status": "ok",
           "created": datetime.now(timezone.utc).isoformat(timespec="seconds"),
           "config": cfg,
           "decisions": {"adversarial_mixing": "online, regenerated each batch",
                         "optimizer_state": "reset between phases",
                         "rho_norm": "pre-overshoot DeepFool l2",
                         "table1_perturbed_inputs": "successful DeepFool examples only",
                         "jsma_variant": "larger best score of increase/decrease"}}
    rep.update(fields)
    return rep


def write_curve_csv(path, curve):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\r\n")
        w.writerow(["epsilon", "accuracy"])
        for eps, acc in curve:
            w.writerow([repr(float(eps)), repr(float(acc))])


def curves_svg(curves, width=480, height=320):
    """Small hand-written SVG line plot of accuracy against epsilon."""
    pad = 40
    eps_all = [e for c in curves.values() for e, _ in c] or [0.0, 1.0]
    lo, hi = min(eps_all), max(eps_all)
    span = hi - lo or 1.0

    def px(e, a):
        return (pad + (e - lo) / span * (width - 2 * pad),
                height - pad - a * (height - 2 * pad))

    colors = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e"]
    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}">',
             f'<rect width="{width}" height="{height}" fill="white"/>',
             f'<line x1="{pad}" y1="{height - pad}" x2="{width - pad}" y2="{height - pad}" '
             'stroke="black"/>',
             f'<line x1="{pad}" y1="{pad}" x2="{pad}" y2="{height - pad}" stroke="black"/>',
             f'<text x="{width / 2}" y="{height - 8}" text-anchor="middle" '
             'font-size="12">epsilon</text>',
             f'<text x="12" y="{height / 2}" font-size="12" '
             f'transform="rotate(-90 12 {height / 2})">accuracy</text>']
    for i, (name, curve) in enumerate(sorted(curves.items())):
        color = colors[i % len(colors)]
        pts = " ".join("%.2f,%.2f" % px(e, a) for e, a in curve)
        parts.append(f'<polyline fill="none" stroke="{color}" stroke-width="2" points="{pts}"/>')
        parts.append(f'<text x="{width - pad}" y="{pad + 14 * i}" text-anchor="end" '
                     f'font-size="11" fill="{color}">{name}</text>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def evaluation_section(net, test, cfg, out_dir, threads=1):
    """Robustness report over the configured attacks; writes one CSV per curve."""
    ev = cfg["evaluation"]
    n_eval = min(ev.get("n_eval", len(test)), len(test))
    subset = test.take(np.arange(n_eval))
    curves = {a["name"]: (attack_config(a), a["epsilons"]) for a in cfg["attacks"]}
    jsma = next((attack_config(a) for a in cfg["attacks"] if a["kind"] == "jsma"), None)
    report = rb.evaluate_robustness(net, subset, deepfool_cfg=attack_config(ev["deepfool"]),
                                    curves=curves, jsma_cfg=jsma, n_bounds=ev["n_bounds"],
                                    threads=threads)
    for name, curve in report.attack_curves.items():
        write_curve_csv(os.path.join(out_dir, f"curve_{name}.csv"), curve)
    if ev["svg"] and report.attack_curves:
        with open(os.path.join(out_dir, "curves.svg"), "w") as fh:
            fh.write(curves_svg(report.attack_curves))
    return report.to_dict()


def _history(hist):
    return [asdict(r) for r in hist.records]


def _accuracy(net, data):
    return float(np.mean(nw.predict(net, data.x) == data.y))


# --- commands ----------------------------------------------------------------

def cmd_train(cfg, out_dir, threads=1, evaluate=True):
    """Phase 1, checkpoint, optional phase 2; returns the report dict."""
    os.makedirs(out_dir, exist_ok=True)
    write_json(os.path.join(out_dir, "config.json"), cfg)
    report = _report("train", cfg)
    try:
        train, test = load_data(cfg)
        net = build_network(cfg, train.x.shape[1:], train.num_classes)
        tcfg = train_config(cfg)
        from_scratch = cfg["defense"]["from_scratch"]
        net1, hist = train_phase(net, train, test, tcfg, 1,
                                 tcfg.loss if from_scratch else None)
        nw.save_checkpoint(net1, os.path.join(out_dir, "phase1.jshd"))
        report["phase1_accuracy"] = _accuracy(net1, test)
        final = net1
        defended = tcfg.loss.active or tcfg.adv_fraction > 0
        if defended and not from_scratch:
            final, hist2 = post_process(net1, train, tcfg, test)
            hist.extend(hist2)
        nw.save_checkpoint(final, os.path.join(out_dir, "model.jshd"))
        report["checkpoint"] = "model.jshd"
        report["history"] = _history(hist)
        report["clean_accuracy"] = _accuracy(final, test)
        if evaluate and cfg["attacks"]:
            report["evaluation"] = evaluation_section(final, test, cfg, out_dir, threads)
    except BaseException as exc:
        report["status"] = "failed"
        report["error"] = f"{type(exc).__name__}: {exc}"
        write_json(os.path.join(out_dir, "report.json"), report)
        raise
    validate_report(report)
    write_json(os.path.join(out_dir, "report.json"), report)
    return report


def _load_for(cfg, checkpoint):
    net = nw.load_checkpoint(checkpoint)
    _, test = load_data(cfg)
    expected = build_network(cfg, test.x.shape[1:], test.num_classes)
    if expected.signature() != net.signature():
        raise ConfigError(f"checkpoint {checkpoint} does not match architecture "
                          f"{cfg['architecture']['name']}")
    return net, test


def cmd_evaluate(cfg, checkpoint, out_dir, threads=1):
    os.makedirs(out_dir, exist_ok=True)
    net, test = _load_for(cfg, checkpoint)
    evaluation = evaluation_section(net, test, cfg, out_dir, threads)
    report = _report("evaluate", cfg, checkpoint=os.path.abspath(checkpoint),
                     clean_accuracy=_accuracy(net, test), evaluation=evaluation)
    validate_report(report)
    write_json(os.path.join(out_dir, "report.json"), report)
    return report


def sweep_axis(cfg):
    axes = [a for a in SWEEP_AXES if cfg.get("sweep", {}).get(a)]
    if len(axes) != 1:
        raise ConfigError(f"sweep needs exactly one axis among {SWEEP_AXES}, got {axes or 'none'}")
    return axes[0]


def cmd_sweep(cfg, out_dir, threads=1):
    axis = sweep_axis(cfg)
    os.makedirs(out_dir, exist_ok=True)
    rows = []
    ev = cfg["evaluation"]
    for value in cfg["sweep"][axis]:
        sub = copy.deepcopy(cfg)
        del sub["sweep"]
        sub["defense"][axis] = value
        sub = normalize(sub)
        run_dir = os.path.join(out_dir, f"{axis}={value}")
        rep = cmd_train(sub, run_dir, threads)
        net = nw.load_checkpoint(os.path.join(run_dir, "model.jshd"))
        _, test = load_data(sub)
        subset = test.take(np.arange(min(ev.get("n_eval", len(test)), len(test))))
        rho = rb.rho_adv(net, subset, attack_config(ev["deepfool"]), threads=threads)
        jac = rb.avg_jacobian_frobenius(net, subset.x[:ev["n_bounds"]])
        rows.append({"value": value, "test_accuracy": rep["clean_accuracy"],
                     "rho_adv": rho.rho_adv, "avg_jac_fro": jac, "run_dir": run_dir})
    with open(os.path.join(out_dir, "sweep.csv"), "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\r\n")
        w.writerow([axis, "test_accuracy", "rho_adv", "avg_jac_fro"])
        for r in rows:
            w.writerow([r["value"], repr(r["test_accuracy"]), repr(r["rho_adv"]),
                        repr(r["avg_jac_fro"])])
    report = _report("sweep", cfg, sweep={"axis": axis, "rows": rows})
    validate_report(report)
    write_json(os.path.join(out_dir, "report.json"), report)
    return report


def cmd_verify(cfg, checkpoint, out_dir, n=None, threads=1):
    os.makedirs(out_dir, exist_ok=True)
    net, test = _load_for(cfg, checkpoint)
    n = cfg["evaluation"]["n_verify"] if n is None else n
    if n > len(test):
        raise ConfigError(f"n={n} exceeds the {len(test)} test samples")
    ids = np.sort(np.random.default_rng(cfg["seed"]).choice(len(test), n, replace=False))
    x = test.x[ids]
    outs = deepfool_batch(net, x, attack_config(cfg["evaluation"]["deepfool"]))
    bounds = rb.fooling_bounds_batch(net, x, outs, ids)
    z = nw.logits(net, x)
    samples = []
    curv_viol = mvt_viol = 0
    for i, b in enumerate(bounds):
        order = np.argsort(-z[i], kind="stable")
        curv = rb.curvature_diagnostics(net, x[i], int(order[0]), int(order[1]))
        curv_viol += curv["approx_curvature"] > curv["upper_bound"]
        mvt = None
        if outs[i].l2 > 0:
            mvt = rb.mvt_diagnostic(net, x[i], outs[i].x_pert, 64)
            mvt_viol += mvt["lhs_ratio"] > mvt["max_jac_fro_on_segment"] + 1e-6
        samples.append({"bounds": asdict(b), "curvature": curv, "mvt": mvt,
                        "attack_success": outs[i].success})
    measured = [b for b, o in zip(bounds, outs) if o.success]
    summary = {
        "bound_chain_violations": int(sum(rb.chain_violated(b) for b in bounds)),
        "curvature_violations": int(curv_viol),
        "mvt_violations": int(mvt_viol),
        "mvt_checked": int(sum(s["mvt"] is not None for s in samples)),
        "prop4_available": bool(rb.last_layer_orthonormal(net)),
        "measured_below_prop3_rate": (sum(b.d_measured < b.d_prop3 for b in measured)
                                      / len(measured)) if measured else None,
    }
    report = _report("verify", cfg, checkpoint=os.path.abspath(checkpoint),
                     verify={"n": n, "samples": samples, "summary": summary})
    validate_report(report)
    write_json(os.path.join(out_dir, "report.json"), report)
    return report


# --- entry point -------------------------------------------------------------

def _parser():
    p = argparse.ArgumentParser(prog="jacshield", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)
    for name in ("train", "evaluate", "sweep", "verify"):
        s = sub.add_parser(name)
        s.add_argument("--config", required=True, help="JSON experiment config")
        s.add_argument("--out", help="output directory (default: config output_dir)")
        s.add_argument("--seed", type=int, help="override the config seed")
        s.add_argument("--threads", type=int, default=1,
                       help="threads for attack evaluation loops")
        if name in ("evaluate", "verify"):
            s.add_argument("--checkpoint", required=True)
        if name == "verify":
            s.add_argument("--n", type=int, help="number of test samples to check")
    return p


def run(argv=None):
    args = _parser().parse_args(argv)
    cfg = load_config(args.config)
    if args.seed is not None:
        if args.seed < 0:
            raise ConfigError("--seed must be nonnegative")
        cfg["seed"] = args.seed
    if args.threads < 1:
        raise ConfigError("--threads must be at least 1")
    out = args.out or cfg["output_dir"]
    if args.command == "train":
        cmd_train(cfg, out, args.threads)
    elif args.command == "evaluate":
        cmd_evaluate(cfg, args.checkpoint, out, args.threads)
    elif args.command == "sweep":
        cmd_sweep(cfg, out, args.threads)
    else:
        cmd_verify(cfg, args.checkpoint, out, args.n, args.threads)
    return EXIT_OK


def main(argv=None):
    try:
        return run(argv)
    except (ConfigError, jsonschema.ValidationError) as exc:
        print(f"jacshield: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DivergenceError, NonFiniteError) as exc:
        print(f"jacshield: numeric divergence: {exc}", file=sys.stderr)
        return EXIT_DIVERGENCE
    except (OSError, data_io.DataFormatError, nw.CheckpointError) as exc:
        print(f"jacshield: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
