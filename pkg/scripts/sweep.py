"""Matched-epsilon grid sweep of lip, fix and classic variants.

Writes one row per (variant, loss, C, learning rate, seed) and prints the best
grid point per variant by mean accuracy over seeds.
"""

import argparse
import csv
import itertools
import sys
from collections import defaultdict

import numpy as np

from lipdp.accountant import epsilon_for, noise_multiplier_for
from lipdp.data import stratified_split
from lipdp.dp_optim import TrainConfig
from lipdp.experiment import ExperimentConfig, load_dataset, run_experiment
from lipdp.tensor import make_rng


def floats(text):
    return [float(v) for v in text.split(",")]


def main(argv=None):
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--config", help="INI config supplying the [data] and [model] sections")
    p.add_argument("--variants", default="lip,classic")
    p.add_argument("--losses", default="ce,hinge")
    p.add_argument("--hinge-margin", type=float, default=10.0)
    p.add_argument("--clip", type=floats, default=floats("1,3,10,15"))
    p.add_argument("--lr", type=floats, default=floats("0.003,0.01,0.03,0.1"))
    p.add_argument("--seeds", type=int, default=10)
    p.add_argument("--epochs", type=int, default=20)
    p.add_argument("--batch-size", type=int, default=64)
    p.add_argument("--epsilon", type=float, default=1.0)
    p.add_argument("--out", help="CSV path (stdout if absent)")
    args = p.parse_args(argv)

    base = ExperimentConfig.load(args.config) if args.config else ExperimentConfig()
    ds = load_dataset(base.data, base.train.input_bound)
    n_train = len(stratified_split(ds.labels, make_rng(0))[0])
    q, delta = args.batch_size / n_train, 1.0 / n_train
    steps = args.epochs * round(n_train / args.batch_size)
    sigma = noise_multiplier_for(args.epsilon, q, steps, delta)
    print(f"n_train={n_train} q={q:.4f} steps={steps} sigma={sigma:.4f} "
          f"epsilon={epsilon_for(q, sigma, steps, delta):.4f}", file=sys.stderr)

    out = open(args.out, "w", newline="") if args.out else sys.stdout
    fields = ["variant", "loss", "clip", "lr", "seed", "epsilon", "accuracy"]
    writer = csv.DictWriter(out, fieldnames=fields, lineterminator="\n")
    writer.writeheader()
    means = defaultdict(list)
    grid = itertools.product(args.variants.split(","), args.losses.split(","), args.clip, args.lr)
    for variant, loss, C, lr in grid:
        for seed in range(args.seeds):
            cfg = ExperimentConfig.from_ini(base.to_ini())
            cfg.model.loss, cfg.model.margin = loss, args.hinge_margin
            cfg.train = TrainConfig(epochs=args.epochs, noise_multiplier=sigma,
                                    expected_batch_size=args.batch_size, clip_threshold=C, learning_rate=lr)
            cfg.run.variant, cfg.run.seed, cfg.run.output = variant, seed, ""
            row = run_experiment(cfg, dataset=ds, write=False).row
            writer.writerow({"variant": variant, "loss": loss, "clip": C, "lr": lr, "seed": seed,
                             "epsilon": row["epsilon"], "accuracy": row["accuracy"]})
            means[(variant, loss, C, lr)].append(row["accuracy"])
    if args.out:
        out.close()
    for variant in args.variants.split(","):
        best = max((np.mean(v), k) for k, v in means.items() if k[0] == variant)
        print(f"best {variant}: {best[0]:.4f} at loss={best[1][1]} C={best[1][2]} lr={best[1][3]}",
              file=sys.stderr)


if __name__ == "__main__":
    main()
