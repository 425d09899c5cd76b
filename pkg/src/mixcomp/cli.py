"""Command-line front end.

    mixcomp train --dataset synthetic --out fp.json
    mixcomp analyze --model fp.json --dataset synthetic --out report.json
    mixcomp quantize --model fp.json --report report.json --dataset synthetic --out q.json
    mixcomp train --model q.json --dataset synthetic --out q_ft.json
    mixcomp eval --model q_ft.json --dataset synthetic --out eval.json
    mixcomp macverify --model q_ft.json --dataset synthetic --out mac.json
    mixcomp energy --model q_ft.json --out energy.json
    mixcomp export-tables --out posit4.csv

Exit codes: 0 success, 1 usage, 2 data error, 3 verification failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .engine import ContractError, TrainingDiverged, build_mlp, evaluate, train
from .io import (
    DataError,
    atomic_write_text,
    csv_text,
    dataset_csv_text,
    dataset_spec_from_arg,
    dumps_json,
    load_dataset,
    load_model,
    make_blobs,
    save_model,
)
from .macsim import EnergyModel, UndefinedTrace
from .pipeline import (
    TABLE_COLUMNS,
    RunConfig,
    analyze,
    energy_summary,
    four_way_eval,
    macverify,
    quantize_model,
    run_experiment,
    snap_weights,
)
from .posit import decode_table_rows
from .sensitivity import plan_from_report

log = logging.getLogger("mixcomp")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_VERIFY = 0, 1, 2, 3
HISTORY_COLUMNS = ["epoch", "lr", "train_loss", "train_acc", "val_acc"]


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _config(args) -> RunConfig:
    hidden = tuple(int(h) for h in args.hidden.split(",")) if getattr(args, "hidden", None) else None
    overrides = dict(
        seed=args.seed,
        eta=getattr(args, "eta", None),
        epochs=getattr(args, "epochs", None),
        batch_size=getattr(args, "batch_size", None),
        lr_max=getattr(args, "lr", None),
        posit_estimator=getattr(args, "posit_estimator", None),
        hidden=hidden,
        calib_batches=getattr(args, "calib_batches", None),
    )
    if getattr(args, "no_skip_nonpositive", False):
        overrides["skip_nonpositive"] = False
    if getattr(args, "no_quantize_first_last", False):
        overrides["quantize_first_last"] = False
    try:
        return RunConfig.load(args.config, **overrides)
    except (OSError, TypeError, ValueError) as e:
        raise UsageError(f"invalid configuration: {e}") from e


def _data(args):
    if not args.dataset:
        raise UsageError("--dataset is required")
    return load_dataset(dataset_spec_from_arg(args.dataset, args.seed if args.seed is not None else 0))


def cmd_analyze(args):
    cfg = _config(args)
    model = load_model(args.model)
    if any(l.scheme is not None for l in model.quant_layers()):
        raise DataError("analyze expects a full-precision model")
    data = _data(args)
    _, _, report = analyze(model, data, cfg)
    report["skip_nonpositive"] = cfg.skip_nonpositive
    atomic_write_text(args.out, dumps_json(report))
    print(f"posit layers: {[l['layer_id'] for l in report['layers'] if l['chosen'] == 'posit4']}, "
          f"fraction {report['posit_param_fraction']:.4f}")


def cmd_quantize(args):
    cfg = _config(args)
    model = load_model(args.model)
    try:
        report = json.loads(Path(args.report).read_text())
        plan = plan_from_report(report)
    except (OSError, ValueError, KeyError) as e:
        raise DataError(f"cannot read report {args.report}: {e}") from e
    names = [l.name for l in model.quant_layers()]
    if sorted(names) != sorted(e["layer_id"] for e in report["layers"]):
        raise DataError("report layers do not match the model")
    x_calib = _data(args).x_train if args.dataset else None
    q = quantize_model(model, plan, cfg, x_calib)
    snap_weights(q)
    save_model(q, args.out)
    print(f"wrote {args.out}: {len(plan.posit_layers)} posit layers, {len(plan.fixp_layers)} fixp layers")


def cmd_train(args):
    cfg = _config(args)
    data = _data(args)
    if args.model:
        model = load_model(args.model)
    else:
        if len(data.input_shape) != 1:
            raise DataError("a new model needs flat feature vectors")
        model = build_mlp(data.input_shape[0], cfg.hidden, data.n_classes, seed=cfg.seed)
    quantized = any(l.scheme is not None for l in model.quant_layers())
    tc = cfg.train_config(qat=quantized)
    if args.epochs is not None:
        tc.epochs = args.epochs
    history = train(model, data.x_train, data.y_train, tc, quantized, data.x_test, data.y_test)
    model.meta["training"] = {"epochs": tc.epochs, "quantized": quantized, "seed": tc.seed, "lr_max": tc.lr_max}
    if quantized:
        snap_weights(model)
    else:
        model.to_storage_precision()
    out = Path(args.out)
    summary = {
        "quantized": quantized,
        "final_train_loss": history[-1]["train_loss"],
        "test_acc": evaluate(model, data.x_test, data.y_test, quantized),
        "config": cfg.to_dict(),
    }
    save_model(model, out)
    atomic_write_text(out.with_suffix(".history.csv"), csv_text(history, HISTORY_COLUMNS))
    atomic_write_text(out.with_suffix(".summary.json"), dumps_json(summary))
    print(f"test accuracy {summary['test_acc']:.4f}")


def cmd_eval(args):
    cfg = _config(args)
    model = load_model(args.model)
    data = _data(args)
    if any(l.scheme is not None for l in model.quant_layers()):
        result = {
            "fp32": evaluate(model, data.x_test, data.y_test, quantized=False),
            "quantized": evaluate(model, data.x_test, data.y_test, quantized=True),
        }
    else:
        result = four_way_eval(model, data, cfg)
    atomic_write_text(args.out, dumps_json(result))
    print(json.dumps(result))


def cmd_macverify(args):
    model = load_model(args.model)
    data = _data(args)
    x = data.x_test[: args.batch]
    summary, records = macverify(model, x, args.posit_width, args.fixp_width, args.trace_limit if args.trace else 0)
    atomic_write_text(args.out, dumps_json(summary))
    if args.trace:
        atomic_write_text(args.trace, "".join(json.dumps(r) + "\n" for r in records))
    print(f"dot products {summary['dot_products']}, max discrepancy {summary['max_discrepancy_ulp']} ulp, "
          f"saturations {summary['saturation_count']}")
    return EXIT_OK if summary["passed"] else EXIT_VERIFY


def cmd_energy(args):
    model = load_model(args.model)
    em = EnergyModel(args.posit_overhead, args.compute_share)
    rep = energy_summary(model, em)
    atomic_write_text(args.out, dumps_json(rep))
    print(f"posit MAC fraction {rep['posit_mac_fraction']:.4f}, overhead {rep['overhead_pct']:.4f}%")


def cmd_export_tables(args):
    cols = ["code", "bit_pattern", "value_unit", "value_sc4", "value_sc8"]
    rows = []
    for r in decode_table_rows():
        rows.append({k: ("NaR" if isinstance(v, float) and v != v else v) for k, v in r.items()})
    atomic_write_text(args.out, csv_text(rows, cols))


def cmd_experiment(args):
    cfg = _config(args)
    seeds = [int(s) for s in args.seeds.split(",")]
    rows = []
    for s in seeds:
        c = RunConfig(**{**cfg.to_dict(), "seed": s})
        row = run_experiment(c)
        log.info("seed %d: %s", s, {k: row[k] for k in TABLE_COLUMNS})
        rows.append(row)
    out = Path(args.out)
    atomic_write_text(out / "table.csv", csv_text(rows, TABLE_COLUMNS))
    atomic_write_text(out / "experiment.json", dumps_json({"config": cfg.to_dict(), "runs": rows}))
    print(csv_text(rows, TABLE_COLUMNS), end="")


def cmd_make_dataset(args):
    x, y = make_blobs(args.classes, args.dim, args.samples, seed=args.seed or 0)
    atomic_write_text(args.out, dataset_csv_text(x, y))


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="mixcomp", description="Mixed Posit4/FixP4 quantization toolkit")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp, model=True, dataset=True):
        if model:
            sp.add_argument("--model", required=True)
        if dataset:
            sp.add_argument("--dataset", help="'synthetic', a CSV file, 'images.idx,labels.idx', or a JSON spec")
        sp.add_argument("--config", help="JSON RunConfig file; flags override it")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--eta", type=float)
        sp.add_argument("--out", required=True)

    sp = sub.add_parser("analyze", help="sensitivity report and Posit layer plan")
    common(sp)
    sp.add_argument("--no-skip-nonpositive", action="store_true", help="admit layers with s <= 0 (literal loop)")
    sp.add_argument("--calib-batches", type=int)
    sp.set_defaults(func=cmd_analyze)

    sp = sub.add_parser("quantize", help="attach schemes from a report and snap weights")
    common(sp)
    sp.add_argument("--report", required=True)
    sp.add_argument("--no-quantize-first-last", action="store_true")
    sp.set_defaults(func=cmd_quantize)

    sp = sub.add_parser("train", help="train a new fp32 model or retrain a quantized one")
    common(sp, model=False)
    sp.add_argument("--model")
    sp.add_argument("--epochs", type=int)
    sp.add_argument("--batch-size", type=int)
    sp.add_argument("--lr", type=float)
    sp.add_argument("--hidden", help="comma-separated hidden widths for a new MLP")
    sp.add_argument("--posit-estimator", choices=["tanh", "ste"])
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("eval", help="accuracy in fp32 and quantized modes")
    common(sp)
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("macverify", help="check every dot product against the MAC simulator")
    common(sp)
    sp.add_argument("--batch", type=int, default=64)
    sp.add_argument("--posit-width", type=int, default=24)
    sp.add_argument("--fixp-width", type=int, default=18)
    sp.add_argument("--trace", help="write MAC records as JSON lines")
    sp.add_argument("--trace-limit", type=int, default=10000)
    sp.set_defaults(func=cmd_macverify)

    sp = sub.add_parser("energy", help="MAC energy overhead report")
    common(sp, dataset=False)
    sp.add_argument("--posit-overhead", type=float, default=0.30)
    sp.add_argument("--compute-share", type=float, default=0.10)
    sp.set_defaults(func=cmd_energy)

    sp = sub.add_parser("export-tables", help="Posit4 decode tables as CSV")
    sp.add_argument("--out", required=True)
    sp.add_argument("--seed", type=int)
    sp.set_defaults(func=cmd_export_tables)

    sp = sub.add_parser("experiment", help="fp32 / FixP4 / Posit4 / mixed comparison on synthetic data")
    common(sp, model=False, dataset=False)
    sp.add_argument("--seeds", default="0,1,2")
    sp.add_argument("--epochs", type=int)
    sp.add_argument("--hidden")
    sp.set_defaults(func=cmd_experiment)

    sp = sub.add_parser("make-dataset", help="write the synthetic blob dataset as CSV")
    sp.add_argument("--out", required=True)
    sp.add_argument("--seed", type=int)
    sp.add_argument("--classes", type=int, default=10)
    sp.add_argument("--dim", type=int, default=64)
    sp.add_argument("--samples", type=int, default=6000)
    sp.set_defaults(func=cmd_make_dataset)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        rc = args.func(args)
    except UsageError as e:
        print(f"mixcomp: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, ContractError, UndefinedTrace) as e:
        print(f"mixcomp: data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except TrainingDiverged as e:
        print(f"mixcomp: training diverged: {e}", file=sys.stderr)
        return EXIT_DATA
    return rc or EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
