"""fp32 / FixP4 / Posit4 / mixed accuracy on the seeded synthetic benchmark.

    python scripts/run_experiment.py --seeds 0,1,2 --out results/experiment

Writes table.csv (one row per seed plus a mean row) and experiment.json.
"""

import argparse
import time
from pathlib import Path

import numpy as np

from mixcomp.io import atomic_write_text, csv_text, dumps_json
from mixcomp.pipeline import TABLE_COLUMNS, RunConfig, run_experiment


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--seeds", default="0,1,2")
    ap.add_argument("--eta", type=float, default=0.1)
    ap.add_argument("--epochs", type=int, default=30)
    ap.add_argument("--qat-epochs", type=int, default=5)
    ap.add_argument("--no-skip-nonpositive", action="store_true")
    ap.add_argument("--out", default="results/experiment")
    args = ap.parse_args()

    rows = []
    for s in (int(v) for v in args.seeds.split(",")):
        cfg = RunConfig(
            seed=s,
            eta=args.eta,
            epochs=args.epochs,
            qat_epochs=args.qat_epochs,
            skip_nonpositive=not args.no_skip_nonpositive,
        )
        t = time.perf_counter()
        row = run_experiment(cfg)
        print(f"seed {s} ({time.perf_counter() - t:.1f}s): "
              + "  ".join(f"{k} {row[k]:.4f}" for k in TABLE_COLUMNS[1:]))
        print(f"  posit layers: {row['posit_layers']}")
        rows.append(row)

    mean = {"seed": "mean", **{k: float(np.mean([r[k] for r in rows])) for k in TABLE_COLUMNS[1:]}}
    print("mean: " + "  ".join(f"{k} {mean[k]:.4f}" for k in TABLE_COLUMNS[1:]))
    print(f"mixed - fixp4: {100 * (mean['mixed'] - mean['fixp4']):+.2f} pp")

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    atomic_write_text(out / "table.csv", csv_text(rows + [mean], TABLE_COLUMNS))
    atomic_write_text(out / "experiment.json", dumps_json({"args": vars(args), "runs": rows}))


if __name__ == "__main__":
    main()
