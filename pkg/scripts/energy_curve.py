"""Energy overhead versus Posit fraction, plus the layer-budget sweep of a trained model.

    python scripts/energy_curve.py                  # analytic curve only
    python scripts/energy_curve.py --model fp.json --dataset synthetic
"""

import argparse

from mixcomp.io import dataset_spec_from_arg, load_dataset, load_model
from mixcomp.macsim import EnergyModel
from mixcomp.pipeline import RunConfig, analyze


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--posit-overhead", type=float, default=0.30)
    ap.add_argument("--compute-share", type=float, default=0.10)
    ap.add_argument("--model")
    ap.add_argument("--dataset", default="synthetic")
    args = ap.parse_args()
    em = EnergyModel(args.posit_overhead, args.compute_share)

    print("posit fraction  overhead %")
    for f in (0.0, 0.05, 0.083, 0.1, 0.2, 0.5, 1.0):
        print(f"{f:>14.3f}  {100 * em.overhead(f):.4f}")

    if args.model:
        model = load_model(args.model)
        data = load_dataset(dataset_spec_from_arg(args.dataset))
        print("\neta    posit params  overhead %  layers")
        for eta in (0.0, 0.05, 0.1, 0.2, 0.5, 1.0):
            _, plan, _ = analyze(model, data, RunConfig(eta=eta))
            names = [n for n, _ in plan.posit_layers]
            print(f"{eta:<6.2f} {plan.posit_fraction:>12.4f}  {100 * em.overhead(plan.posit_fraction):>10.4f}  {names}")


if __name__ == "__main__":
    main()
