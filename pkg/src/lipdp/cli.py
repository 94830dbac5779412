"""Command line entry point: ``lipdp {train,bias-lab,accountant,sensitivity-report}``.

Failures exit with status 1 and print one JSON object on stderr:
``{"error": "<ExceptionType>", "message": "..."}``.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import math
import sys

import numpy as np

from . import accountant, bias_lab
from .dp_optim import clip_weights
from .experiment import ExperimentConfig, build_model, load_dataset, run_experiment
from .sensitivity import layer_sensitivity
from .tensor import make_rng


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="INI experiment config")
    for section in ExperimentConfig.SECTIONS:
        group = p.add_argument_group(section)
        for f in dataclasses.fields(getattr(ExperimentConfig(), section)):
            group.add_argument(
                f"--{section}.{f.name}".replace("_", "-"),
                dest=f"{section}.{f.name}",
                metavar=f.name.upper(),
                help=f"override [{section}] {f.name}",
            )


def _resolve_config(args) -> ExperimentConfig:
    cfg = ExperimentConfig.load(args.config) if args.config else ExperimentConfig()
    for section in ExperimentConfig.SECTIONS:
        for f in dataclasses.fields(getattr(cfg, section)):
            value = getattr(args, f"{section}.{f.name}", None)
            if value is not None:
                cfg.set(section, f.name, value)
    cfg.train.__post_init__()
    return cfg


def cmd_train(args) -> int:
    cfg = _resolve_config(args)
    outcome = run_experiment(cfg)
    w = csv.DictWriter(sys.stdout, fieldnames=list(outcome.row), lineterminator="\n")
    w.writeheader()
    w.writerow(outcome.row)
    return 0


def cmd_sensitivity(args) -> int:
    cfg = _resolve_config(args)
    ds = load_dataset(cfg.data, cfg.train.input_bound)
    model = build_model(cfg.model, ds.features.shape[1], ds.classes)
    params = model.init_params(make_rng(cfg.run.seed))
    clipped = clip_weights(model, params, cfg.train.clip_threshold, cfg.train.norm,
                           cfg.run.variant == "fix", cfg.train.power_tol, cfg.train.power_max_iter)
    report = layer_sensitivity(model, clipped.params, clipped.u_theta, cfg.train.input_bound,
                               norm=cfg.train.norm, tol=cfg.train.power_tol,
                               max_iter=cfg.train.power_max_iter)
    sys.stdout.write(report.to_text())
    return 0


def cmd_accountant(args) -> int:
    q = args.q if args.q is not None else args.batch_size / args.n
    steps = args.steps
    if steps is None:
        steps = args.epochs * max(1, round(args.n / args.batch_size))
    delta = args.delta if args.delta is not None else 1.0 / args.n
    sigma = args.sigma
    if sigma is None:
        sigma = accountant.noise_multiplier_for(args.target_epsilon, q, steps, delta)
    ledger = accountant.RdpLedger(q, sigma, steps)
    print(ledger.to_json(delta))
    return 0


def cmd_bias_lab(args) -> int:
    scenario = bias_lab.BiasScenario(
        args.a, args.b, tuple(_parse_errors(args.errors)),
        math.inf if args.clip <= 0 else args.clip,
    )
    t1 = np.linspace(args.a + args.lo, args.a + args.hi, args.grid)
    t2 = np.linspace(args.b + args.lo, args.b + args.hi, args.grid)
    rows = bias_lab.gradient_field(scenario, t1, t2)
    out = open(args.out, "w", newline="") if args.out else sys.stdout
    try:
        w = csv.DictWriter(out, fieldnames=list(rows[0]), lineterminator="\n")
        w.writeheader()
        w.writerows(rows)
    finally:
        if args.out:
            out.close()
    if math.isfinite(scenario.clip_C):
        fp = bias_lab.find_clipped_fixed_point(scenario)
        print(json.dumps({"fixed_point": fp.theta, "residual": fp.residual,
                          "converged": fp.converged}), file=sys.stderr)
    return 0


def _parse_errors(text: str):
    for item in text.split(","):
        value, prob = item.split(":")
        yield float(value), float(prob)


class _Parser(argparse.ArgumentParser):
    """Usage errors also go to stderr as one JSON line."""

    def error(self, message):
        print(json.dumps({"error": "UsageError", "message": f"{self.prog}: {message}"}), file=sys.stderr)
        self.exit(2)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="lipdp", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train, evaluate and account one configuration")
    _add_config_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("sensitivity-report", help="per-layer bounds for freshly initialized weights")
    _add_config_flags(p)
    p.set_defaults(func=cmd_sensitivity)

    p = sub.add_parser("accountant", help="RDP ledger for the subsampled Gaussian mechanism")
    p.add_argument("--q", type=float)
    p.add_argument("--n", type=int, default=1000)
    p.add_argument("--batch-size", type=int, default=64)
    p.add_argument("--epochs", type=int, default=1)
    p.add_argument("--steps", type=int)
    p.add_argument("--sigma", type=float)
    p.add_argument("--target-epsilon", type=float, default=1.0,
                   help="calibrate sigma to this epsilon when --sigma is absent")
    p.add_argument("--delta", type=float)
    p.set_defaults(func=cmd_accountant)

    p = sub.add_parser("bias-lab", help="expected clipped/unclipped gradient field as CSV")
    p.add_argument("--a", type=float, default=0.0)
    p.add_argument("--b", type=float, default=0.0)
    p.add_argument("--errors", default="9:0.1,-1:0.9", help="value:prob pairs")
    p.add_argument("--clip", type=float, default=1.0, help="<= 0 disables clipping")
    p.add_argument("--lo", type=float, default=-2.0)
    p.add_argument("--hi", type=float, default=2.0)
    p.add_argument("--grid", type=int, default=11)
    p.add_argument("--out")
    p.set_defaults(func=cmd_bias_lab)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except Exception as exc:  # noqa: BLE001 - reported as a machine-readable line
        print(json.dumps({"error": type(exc).__name__, "message": str(exc)}), file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
