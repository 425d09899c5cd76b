"""Mean |x - Q(x)| of FixP4, Posit4-sc4 and Posit4-sc8 on synthetic weights.

Sweeps Gaussian widths and a few heavy-tailed shapes, so the crossover
where scaled Posit starts beating the adaptive-scale uniform grid is
visible.

    python scripts/error_ordering.py --samples 100000 --seeds 0,1,2
"""

import argparse

import numpy as np

from mixcomp.posit import ScaleVariant
from mixcomp.quantize import fixp_dequantize, posit_quantize_weights


def errors(x):
    return (
        float(np.mean(np.abs(fixp_dequantize(x) - x))),
        float(np.mean(np.abs(posit_quantize_weights(x, ScaleVariant.SC4) - x))),
        float(np.mean(np.abs(posit_quantize_weights(x, ScaleVariant.SC8) - x))),
    )


def samplers(n):
    for sigma in (0.02, 0.04, 0.05, 0.1, 0.2, 0.25, 0.5, 1.0):
        yield f"normal sigma={sigma}", lambda rng, s=sigma: rng.normal(0, s, n)
    for df in (1.5, 3.0):
        yield f"student-t df={df} x0.02", lambda rng, d=df: 0.02 * rng.standard_t(d, n)
    yield "laplace b=0.05", lambda rng: rng.laplace(0, 0.05, n)
    yield "spike-and-slab", lambda rng: np.where(rng.random(n) < 0.9, rng.normal(0, 0.01, n), rng.normal(0, 0.5, n))


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--samples", type=int, default=100_000)
    ap.add_argument("--seeds", default="0,1,2")
    args = ap.parse_args()
    seeds = [int(s) for s in args.seeds.split(",")]

    print(f"{'distribution':<28}{'fixp4':>10}{'sc4':>10}{'sc8':>10}  best")
    for name, draw in samplers(args.samples):
        e = np.mean([errors(draw(np.random.default_rng(s))) for s in seeds], axis=0)
        best = ["fixp4", "sc4", "sc8"][int(np.argmin(e))]
        print(f"{name:<28}{e[0]:>10.5f}{e[1]:>10.5f}{e[2]:>10.5f}  {best}")


if __name__ == "__main__":
    main()
