"""Per-iteration clipping error of a classic run on skewed-error regression."""

import argparse
import csv
import sys

from lipdp.bias_lab import BiasScenario, clip_error_trajectory, regression_model
from lipdp.dp_optim import TrainConfig
from lipdp.tensor import make_rng


def main(argv=None):
    p = argparse.ArgumentParser(description=__doc__)
    p.add_argument("--n", type=int, default=2000)
    p.add_argument("--clip", type=float, default=1.0)
    p.add_argument("--epochs", type=int, default=50)
    p.add_argument("--batch-size", type=int, default=200)
    p.add_argument("--lr", type=float, default=0.05)
    p.add_argument("--noise", type=float, default=0.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", help="CSV path (stdout if absent)")
    args = p.parse_args(argv)

    s = BiasScenario.asymmetric(0.5, 0.5, clip_C=args.clip)
    rng = make_rng(args.seed)
    data = s.sample(args.n, rng)
    cfg = TrainConfig(epochs=args.epochs, noise_multiplier=args.noise, expected_batch_size=args.batch_size,
                      clip_threshold=args.clip, learning_rate=args.lr, step_rule="fixed")
    traj = clip_error_trajectory(regression_model(s), data, cfg, rng)
    out = open(args.out, "w", newline="") if args.out else sys.stdout
    w = csv.writer(out, lineterminator="\n")
    w.writerow(["iteration", "clip_error", "clipped_grad_norm"])
    for i, (err, norm) in enumerate(traj):
        w.writerow([i, repr(err), repr(norm)])
    if args.out:
        out.close()


if __name__ == "__main__":
    main()
