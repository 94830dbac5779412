"""Clipping bias in one-dimensional regression with skewed errors.

Prints the clipped mean gradient at the true parameters and the clipped
fixed point for a range of clip thresholds.
"""

import argparse

import numpy as np

from lipdp.bias_lab import BiasScenario, expected_gradient, find_clipped_fixed_point


def main(argv=None):
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--a", type=float, default=0.0)
    p.add_argument("--b", type=float, default=0.0)
    p.add_argument("--clips", default="0.25,0.5,1,2,5,10,20")
    args = p.parse_args(argv)

    print("C\tg1_at_truth\tg2_at_truth\tnorm\ttheta1-a\ttheta2-b\tresidual")
    for C in (float(v) for v in args.clips.split(",")):
        s = BiasScenario.asymmetric(args.a, args.b, clip_C=C)
        g = expected_gradient(s, (args.a, args.b))
        fp = find_clipped_fixed_point(s)
        print(f"{C:g}\t{g[0]:.6f}\t{g[1]:.6f}\t{np.linalg.norm(g):.6f}\t"
              f"{fp.theta[0] - args.a:.6f}\t{fp.theta[1] - args.b:.6f}\t{fp.residual:.1e}")


if __name__ == "__main__":
    main()
