"""Command line entry point (``et3`` or ``python -m et3``).

Exit codes: 0 success, 2 configuration error, 3 theorem audit failure.
``--spec`` accepts a JSON file path or ``bundled:<name>`` for a shipped config.
"""
from __future__ import annotations

import argparse
import csv
import io
import json
import sys
from dataclasses import replace
from pathlib import Path
from typing import List, Optional

import numpy as np

from . import harness
from .attacks import budget_ok
from .data import load_dataset, read_feature_csv, save_dataset
from .defense import NORMS, DefenseConfig, et3, et3_with_proxy
from .harness import ConfigError, ReportMismatchError
from .nets import DimensionError, load_model, save_model
from .trainer import generate_adversaries

EXIT_OK, EXIT_CONFIG, EXIT_AUDIT = 0, 2, 3


def _spec(arg: str, out: Optional[str] = None) -> harness.ExperimentSpec:
    if arg.startswith("bundled:"):
        name = arg[len("bundled:"):]
        if name not in harness.bundled_config_names():
            raise ConfigError("", f"no bundled config named {name!r}; have {harness.bundled_config_names()}")
        spec = harness.parse_spec(harness.bundled_config(name))
    else:
        spec = harness.load_spec(arg)
    return replace(spec, outputs=out) if out is not None else spec


def _load_model(path: str, what: str = "model"):
    try:
        return load_model(path)
    except OSError as exc:
        raise ConfigError(what, f"cannot read {path}: {exc.strerror}") from None
    except (ValueError, KeyError) as exc:
        raise ConfigError(what, f"invalid model file {path}: {exc}") from None


def cmd_gen_data(args) -> int:
    spec = _spec(args.spec)
    if spec.dataset is None:
        raise ConfigError("dataset", "missing required key")
    ds = harness.make_dataset(spec.dataset)
    save_dataset(ds, args.out)
    print(f"wrote {len(ds)} samples (dim {ds.dim}, {ds.num_classes} classes) to {args.out}")
    return EXIT_OK


def cmd_train(args) -> int:
    spec = _spec(args.spec)
    if spec.model is None or spec.model.kind == "path":
        raise ConfigError("model", "train needs a model.train or model.robust_cluster_net section")
    if spec.dataset is None:
        raise ConfigError("dataset", "missing required key")
    train_set, _ = harness.split_dataset(harness.make_dataset(spec.dataset), spec.dataset.n_train)
    model, log = harness.resolve_model(spec, train_set)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_model(model, out)
    if log is not None:
        out.with_suffix(".log.csv").write_text(log.to_csv())
        print(f"trained {len(log.epoch)} epochs, final loss {log.loss[-1]:.6f}" if log.epoch else "no epochs run")
    print(f"wrote {out}")
    return EXIT_OK


def cmd_attack(args) -> int:
    spec = _spec(args.spec)
    if not spec.attacks:
        raise ConfigError("attacks", "at least one attack is required")
    model = _load_model(args.model)
    try:
        ds = load_dataset(args.data)
    except OSError as exc:
        raise ConfigError("data", f"cannot read dataset in {args.data}: {exc}") from None
    if ds.dim != model.dim:
        raise ConfigError("data", f"dataset dim {ds.dim} does not match model dim {model.dim}")
    proxy = harness.resolve_proxy(spec)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    summary = {}
    for entry in spec.attacks:
        x_adv = generate_adversaries(model, ds.X, ds.y, entry.config, entry.adaptivity, spec.defense, proxy)
        adv_ds = replace(ds, X=x_adv)
        save_dataset(adv_ds, out / entry.label)
        fooled = np.argmax(model.forward(x_adv), axis=1) != ds.y if spec.defense is None else \
            harness.Pipeline(model, spec.defense, proxy).predict(x_adv) != ds.y
        summary[entry.label] = {
            "adaptivity": entry.adaptivity,
            "fooled_rate": float(np.mean(fooled)) if len(ds) else 0.0,
            "within_budget": bool(np.all(budget_ok(ds.X, x_adv, entry.config.epsilon_a, entry.config.norm))),
        }
    (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    for label, s in summary.items():
        print(f"{label}: fooled {s['fooled_rate']:.4f}")
    return EXIT_OK


def cmd_defend(args) -> int:
    model = _load_model(args.model)
    try:
        with open(args.input, newline="") as fh:
            header = next(csv.reader(fh), [])
        X, _ = read_feature_csv(args.input, labeled=bool(header) and header[-1] == "label")
    except OSError as exc:
        raise ConfigError("input", f"cannot read {args.input}: {exc.strerror}") from None
    except ValueError as exc:
        raise ConfigError("input", f"malformed CSV {args.input}: {exc}") from None
    X = X.reshape(-1, model.dim) if X.size else np.zeros((0, model.dim))
    try:
        cfg = DefenseConfig(epsilon=args.epsilon, alpha=args.alpha, steps=args.steps, norm=args.norm,
                            clamp=tuple(args.clamp) if args.clamp else None,
                            energy_head="proxy" if args.proxy else "eval")
    except ValueError as exc:
        raise ConfigError("defense", str(exc)) from None
    if len(X) == 0:
        xp, trace = X, np.zeros((0, cfg.steps + 1))
    else:
        try:
            res = (et3_with_proxy(model, _load_model(args.proxy, "proxy"), X, cfg) if args.proxy
                   else et3(model, X, cfg))
        except DimensionError as exc:
            raise ConfigError("input", str(exc)) from None
        xp, trace = res.x_p, res.energy_trace
    d = xp.shape[1]
    rows = io.StringIO()
    w = csv.writer(rows, lineterminator="\n")
    w.writerow([f"x{i}" for i in range(d)] + [f"energy_{t}" for t in range(cfg.steps + 1)])
    for x_row, e_row in zip(xp, trace):
        w.writerow([repr(float(v)) for v in x_row] + [repr(float(v)) for v in e_row])
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        Path(args.out).write_text(rows.getvalue())
    else:
        sys.stdout.write(rows.getvalue())
    return EXIT_OK


def cmd_eval(args) -> int:
    spec = _spec(args.spec, args.out)
    res = harness.run_experiment(spec)
    r = res.report
    parts = [f"clean {r.clean_acc:.4f}"] + [f"{k} {v:.4f}" for k, v in r.robust_acc.items()]
    print(f"{spec.name}: " + ", ".join(parts))
    print(f"wrote {spec.output_dir / 'report.json'}")
    return EXIT_OK


def cmd_verify_theorem(args) -> int:
    spec = _spec(args.spec, args.out)
    run = harness.run_theorem_audit(spec)
    met = sum(r.hypotheses_met for r in run.reports)
    print(f"{len(run.reports)} checks, {met} with hypotheses met, {run.certified} certified, "
          f"{run.violations} violations")
    if run.violations:
        print(f"theorem audit failed: {run.violations} hypothesis-satisfying instances misclassified",
              file=sys.stderr)
        return EXIT_AUDIT
    return EXIT_OK


def cmd_compare(args) -> int:
    rows = harness.compare(harness.load_report(args.a), harness.load_report(args.b))
    text = harness.compare_csv(rows)
    if args.out:
        Path(args.out).write_text(text)
    else:
        sys.stdout.write(text)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="et3", description="Energy-guided test-time transformation toolkit.")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("gen-data", help="sample a dataset and store it as CSV + meta.json")
    s.add_argument("--spec", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(fn=cmd_gen_data)

    s = sub.add_parser("train", help="train (or build) the configured model")
    s.add_argument("--spec", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(fn=cmd_train)

    s = sub.add_parser("attack", help="generate adversaries for a stored dataset")
    s.add_argument("--model", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--spec", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(fn=cmd_attack)

    s = sub.add_parser("defend", help="transform CSV rows and report energy traces")
    s.add_argument("--model", required=True)
    s.add_argument("--input", required=True)
    s.add_argument("--epsilon", type=float, required=True)
    s.add_argument("--alpha", type=float, required=True)
    s.add_argument("--steps", type=int, required=True)
    s.add_argument("--norm", choices=NORMS, required=True)
    s.add_argument("--clamp", type=float, nargs=2, metavar=("LO", "HI"))
    s.add_argument("--proxy", help="model whose logits define the energy")
    s.add_argument("--out", help="output CSV (default: stdout)")
    s.set_defaults(fn=cmd_defend)

    s = sub.add_parser("eval", help="run a full experiment")
    s.add_argument("--spec", required=True)
    s.add_argument("--out", help="override the output directory")
    s.set_defaults(fn=cmd_eval)

    s = sub.add_parser("verify-theorem", help="run the theorem audit")
    s.add_argument("--spec", required=True)
    s.add_argument("--out", help="override the output directory")
    s.set_defaults(fn=cmd_verify_theorem)

    s = sub.add_parser("compare", help="delta table between two reports (b - a)")
    s.add_argument("--a", required=True)
    s.add_argument("--b", required=True)
    s.add_argument("--out", help="output CSV (default: stdout)")
    s.set_defaults(fn=cmd_compare)
    return p


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except (ConfigError, ReportMismatchError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
