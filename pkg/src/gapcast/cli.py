"""Command-line entry point: mask, train, forecast, benchmark, encode-inspect.

Every option can also come from a plain ``key=value`` config file passed with
``--config``; flags on the command line override file entries. Each run
writes its fully resolved configuration next to its outputs.

Exit codes: 0 success, 2 usage error, 3 data/codec error, 4 training diverged.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from .benchmark import ALL_METHODS, BenchmarkConfig, benchmark
from .codec import compression_stats, encode_window
from .data import (CsvSchema, MaskingConfig, apply_scaling, fit_scaling,
                   load_csv, make_examples, make_synthetic_dataset, mask_stats,
                   load_scaling, save_scaling, synthetic_mask, write_csv)
from .errors import (CodecError, DataError, GapcastError, TrainingDiverged,
                     UsageError)
from .model import (DecoderVariant, DualEncoderModel, ModelConfig,
                    TrainingConfig, load_checkpoint, save_checkpoint, train)

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_DIVERGED = 0, 2, 3, 4


def _parse_widths(spec: str) -> tuple:
    spec = spec.strip()
    if "-" in spec and "," not in spec:
        lo, hi = spec.split("-", 1)
        return tuple(range(int(lo), int(hi) + 1))
    return tuple(int(w) for w in spec.split(",") if w)


def _schema(args) -> CsvSchema:
    return CsvSchema(series_col=args.series_col, tick_col=args.tick_col,
                     y_cols=tuple(args.y_cols.split(",")),
                     x_cols=tuple(args.x_cols.split(",")))


def _load_records(args):
    if args.synthetic:
        return make_synthetic_dataset(n_series=args.synthetic_series,
                                      length=args.synthetic_length,
                                      seed=args.synthetic_seed)
    if not args.data:
        raise UsageError("either --data or --synthetic is required")
    return load_csv(args.data, _schema(args))


def _write_resolved(outdir: Path, args) -> None:
    outdir.mkdir(parents=True, exist_ok=True)
    skip = {"func", "config"}
    lines = []
    for key in sorted(vars(args)):
        if key in skip:
            continue
        lines.append(f"{key}={getattr(args, key)}")
    (outdir / "resolved_config.txt").write_text("\n".join(lines) + "\n")


def _training_config(args) -> TrainingConfig:
    return TrainingConfig(batch_size=args.batch_size, epochs=args.epochs,
                          optimizer=args.optimizer, learning_rate=args.lr,
                          seed=args.seed, loss_mode=args.loss_mode,
                          patience=args.patience)


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------

def cmd_mask(args) -> int:
    records = _load_records(args)
    out = Path(args.out)
    _write_resolved(out, args)
    cfg = MaskingConfig(q0=args.q0, widths=_parse_widths(args.widths), seed=args.seed)
    masked = [synthetic_mask(r, cfg) for r in records]
    write_csv(masked, out / "masked.csv", _schema(args))
    report = {
        "q0": cfg.q0, "widths": list(cfg.widths), "seed": cfg.seed,
        "series": {m.series_id: mask_stats(m) for m in masked},
    }
    total = sum(s["length"] for s in report["series"].values())
    missing = sum(s["length"] * s["missing_fraction"] for s in report["series"].values())
    report["overall_missing_fraction"] = missing / total if total else 0.0
    (out / "mask_report.json").write_text(json.dumps(report, sort_keys=True, indent=2) + "\n")
    print(f"wrote {out / 'masked.csv'} "
          f"(missing fraction {report['overall_missing_fraction']:.3f})")
    return EXIT_OK


def cmd_train(args) -> int:
    records = _load_records(args)
    if not records:
        raise DataError("no series in the input data")
    out = Path(args.out)
    _write_resolved(out, args)

    profile = None
    if len(records) > 1:
        # many short sequences: scale each, train one shared background model
        profile = fit_scaling(records)
        records = [apply_scaling(r, profile) for r in records]

    examples = []
    for rec in records:
        exs, dropped = make_examples(rec, args.in_len, args.horizon, args.stride)
        if dropped:
            print(f"series {rec.series_id}: dropped {dropped} empty-input windows")
        examples.extend(exs)
    if not examples:
        raise DataError("no training examples could be built")

    model = DualEncoderModel(ModelConfig(
        exo_dim=examples[0].future_x.shape[1],
        target_dim=examples[0].targets.shape[1],
        enc_hidden=args.enc_hidden, dec_hidden=args.dec_hidden,
        layers=args.layers, variant=DecoderVariant(args.variant)), seed=args.seed)
    result = train(model, examples, _training_config(args))

    save_checkpoint(model, out / "checkpoint.json")
    with open(out / "loss_trace.csv", "w") as fh:
        fh.write("epoch,loss\n")
        for i, v in enumerate(result.loss_trace):
            fh.write(f"{i},{v!r}\n")
    if profile is not None:
        save_scaling(profile, out / "scaling_profile.txt")
    skipped = {k: v for k, v in result.skipped.items() if v}
    print(f"trained {args.variant} on {result.n_examples} examples; "
          f"final loss {result.loss_trace[-1]:.6g}"
          + (f"; skipped {skipped}" if skipped else ""))
    print(f"checkpoint: {out / 'checkpoint.json'}")
    return EXIT_OK


def cmd_forecast(args) -> int:
    model = load_checkpoint(args.checkpoint)
    records = _load_records(args)
    by_id = {r.series_id: r for r in records}
    sid = args.series or records[0].series_id
    if sid not in by_id:
        raise UsageError(f"series {sid!r} not found in the data")
    rec = by_id[sid]
    profile = load_scaling(args.scaling) if args.scaling else None
    if profile is not None:
        rec = apply_scaling(rec, profile)

    anchor_tick = args.at if args.at is not None else rec.first_tick + rec.length - args.horizon
    idx = anchor_tick - rec.first_tick
    if idx - args.in_len < 0 or idx + args.horizon > rec.length:
        raise UsageError(f"forecast window at tick {anchor_tick} does not fit the series")
    window = rec.window(idx - args.in_len, args.in_len)
    future_x = rec.x[idx:idx + args.horizon]
    future_mask = rec.observed[idx:idx + args.horizon].astype(float)
    preds = model.forecast(encode_window(window), future_x, future_mask, args.horizon)
    if profile is not None:
        preds = preds * profile.scale_y[sid]

    rows = [{"tick": int(anchor_tick + i),
             "prediction": [float(v) for v in preds[i]]}
            for i in range(preds.shape[0])]
    payload = {"series_id": sid, "anchor_tick": int(anchor_tick),
               "horizon": args.horizon, "predictions": rows}
    if args.out:
        out = Path(args.out)
        _write_resolved(out, args)
        (out / "forecast.json").write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")
        print(f"wrote {out / 'forecast.json'}")
    for row in rows:
        vals = ", ".join(f"{v:.4f}" for v in row["prediction"])
        print(f"tick {row['tick']}: {vals}")
    return EXIT_OK


def cmd_benchmark(args) -> int:
    records = _load_records(args)
    if not records:
        raise DataError("no series in the input data")
    out = Path(args.out)
    _write_resolved(out, args)
    methods = [m.strip() for m in args.methods.split(",") if m.strip()]
    masking = None
    if not args.no_mask:
        masking = MaskingConfig(q0=args.mask_q0, widths=_parse_widths(args.mask_widths),
                                seed=args.mask_seed)
    cfg = BenchmarkConfig(
        in_len=args.in_len, horizon=args.horizon, stride=args.stride,
        eval_stride=args.eval_stride, test_len=args.test_len,
        enc_hidden=args.enc_hidden, dec_hidden=args.dec_hidden,
        layers=args.layers, mode=args.mode, masking=masking,
        train=_training_config(args))
    report = benchmark(methods, records, cfg)
    (out / "report.json").write_text(report.to_json())
    (out / "report.txt").write_text(report.to_text())
    (out / "per_sequence.csv").write_text(report.per_series_csv())
    print(report.to_text())
    print(f"report: {out / 'report.json'}")
    return EXIT_OK


def cmd_encode_inspect(args) -> int:
    records = _load_records(args)
    if not records:
        raise DataError("no series in the input data")
    by_id = {r.series_id: r for r in records}
    sid = args.series or records[0].series_id
    if sid not in by_id:
        raise UsageError(f"series {sid!r} not found in the data")
    rec = by_id[sid]
    start_tick = args.start if args.start is not None else rec.first_tick
    idx = start_tick - rec.first_tick
    if idx < 0 or idx + args.in_len > rec.length:
        raise UsageError(f"window of length {args.in_len} at tick {start_tick} "
                         f"is out of range for series {sid!r}")
    enc = encode_window(rec.window(idx, args.in_len))
    stats = compression_stats(enc)
    print(f"series {sid!r}, window ticks {start_tick}..{start_tick + args.in_len - 1} "
          f"(L={enc.length})")
    print(f"available points ({enc.n_available}):")
    for pos, x, y in zip(enc.positions, enc.x, enc.y):
        xs = ", ".join(f"{v:.6g}" for v in x)
        ys = ", ".join(f"{v:.6g}" for v in y)
        print(f"  pos {int(pos):>3}: x=({xs}) y=({ys})")
    if enc.n_blocks:
        blocks = " ".join(f"(start={int(s)},width={int(w)})" for s, w in enc.blocks)
        print(f"blocks: {blocks}")
    else:
        print("blocks: (none)")
    print(f"encoder steps: {stats.enc1_steps} + {stats.enc2_steps} "
          f"= {stats.enc1_steps + stats.enc2_steps} of {enc.length} "
          f"(ratio {stats.ratio:.3f})")
    if args.out:
        out = Path(args.out)
        _write_resolved(out, args)
    return EXIT_OK


# ---------------------------------------------------------------------------
# Parser plumbing
# ---------------------------------------------------------------------------

def _add_data_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--data", help="input CSV path")
    p.add_argument("--series-col", default="series_id")
    p.add_argument("--tick-col", default="tick")
    p.add_argument("--y-cols", default="y", help="comma-separated target columns")
    p.add_argument("--x-cols", default="x", help="comma-separated exogenous columns")
    p.add_argument("--synthetic", action="store_true",
                   help="use the bundled synthetic dataset instead of --data")
    p.add_argument("--synthetic-series", type=int, default=4)
    p.add_argument("--synthetic-length", type=int, default=600)
    p.add_argument("--synthetic-seed", type=int, default=7)


def _add_train_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--in-len", type=int, default=20)
    p.add_argument("--horizon", type=int, default=10)
    p.add_argument("--stride", type=int, default=1)
    p.add_argument("--enc-hidden", type=int, default=7)
    p.add_argument("--dec-hidden", type=int, default=7)
    p.add_argument("--layers", type=int, default=1, choices=(1, 2))
    p.add_argument("--batch-size", type=int, default=64)
    p.add_argument("--epochs", type=int, default=100)
    p.add_argument("--optimizer", default="adam", choices=("adam", "rmsprop"))
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--loss-mode", default=None,
                   choices=("observed_only", "imputed_targets"))
    p.add_argument("--patience", type=int, default=0)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="gapcast",
        description="Forecasting for gappy time series without input imputation.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("mask", help="block-mask a fully observed dataset")
    p.add_argument("--config", help="key=value defaults file")
    _add_data_flags(p)
    p.add_argument("--q0", type=float, default=0.05)
    p.add_argument("--widths", default="6-10",
                   help="mask widths, e.g. '6-10' or '30,31,32'")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_mask)

    p = sub.add_parser("train", help="train a dual-encoder forecaster")
    p.add_argument("--config")
    _add_data_flags(p)
    _add_train_flags(p)
    p.add_argument("--variant", default="degd",
                   choices=[v.value for v in DecoderVariant])
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("forecast", help="forecast with a trained checkpoint")
    p.add_argument("--config")
    _add_data_flags(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--series", help="series id (default: first in the data)")
    p.add_argument("--at", type=int, default=None,
                   help="tick of the first forecast step (default: series end)")
    p.add_argument("--in-len", type=int, default=20)
    p.add_argument("--horizon", type=int, default=10)
    p.add_argument("--scaling", help="scaling profile for background models")
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_forecast)

    p = sub.add_parser("benchmark", help="compare methods on one dataset")
    p.add_argument("--config")
    _add_data_flags(p)
    _add_train_flags(p)
    p.add_argument("--methods", default="demi,degd,bedxm,bedxl,grud_full",
                   help=f"comma-separated subset of {ALL_METHODS}")
    p.add_argument("--eval-stride", type=int, default=1)
    p.add_argument("--test-len", type=int, default=60)
    p.add_argument("--mode", default="per_series",
                   choices=("per_series", "background"))
    p.add_argument("--no-mask", action="store_true",
                   help="data already has gaps; skip synthetic masking")
    p.add_argument("--mask-q0", type=float, default=0.05)
    p.add_argument("--mask-widths", default="10-15")
    p.add_argument("--mask-seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_benchmark)

    p = sub.add_parser("encode-inspect", help="pretty-print one encoded window")
    p.add_argument("--config")
    _add_data_flags(p)
    p.add_argument("--series")
    p.add_argument("--start", type=int, default=None,
                   help="tick of the window's first position")
    p.add_argument("--in-len", type=int, default=20)
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_encode_inspect)

    return parser


def _inject_config(argv: list[str]) -> list[str]:
    """Splice key=value file entries in as flags, before user flags."""
    if "--config" in argv:
        i = argv.index("--config")
        if i + 1 >= len(argv):
            raise UsageError("--config needs a path")
        path = argv[i + 1]
    else:
        prefixed = [a for a in argv if a.startswith("--config=")]
        if not prefixed:
            return argv
        path = prefixed[0].split("=", 1)[1]
    try:
        text = Path(path).read_text()
    except OSError as e:
        raise UsageError(f"cannot read config file {path!r}: {e}") from None
    extra = []
    for line in text.splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise UsageError(f"bad config line (want key=value): {line!r}")
        key, value = line.split("=", 1)
        extra.append(f"--{key.strip().replace('_', '-')}={value.strip()}")
    # subcommand first, then file entries, then explicit flags (flags win)
    return argv[:1] + extra + argv[1:]


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        if argv and not argv[0].startswith("-"):
            argv = _inject_config(argv)
        args = build_parser().parse_args(argv)
        return args.func(args)
    except UsageError as e:
        print(f"usage error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (CodecError, DataError) as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except TrainingDiverged as e:
        print(f"training diverged: {e}", file=sys.stderr)
        return EXIT_DIVERGED
    except GapcastError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
