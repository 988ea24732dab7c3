"""Command-line entry point: ``ramat {synth,preprocess,pretrain,finetune,predict,eval}``.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numeric failure.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import synthetic
from .checkpoint import Checkpoint, CheckpointError, check_compatible, load_dataset, save_dataset
from .config import RunConfig
from .model import ConfigError, ModelConfig, init_params
from .numerics import NumericError
from .pipeline import (TABLE1, DataError, KpiFrame, KpiSchema, Scalers, SchemaError,
                       fit_dataset_scalers, impute_and_drop, preprocess_frames, read_csv,
                       write_csv)
from .reservoir import ReservoirError, build_reservoir
from .report import EvalReport
from .train import FreezePlan, channel_mse, finetune, predict, pretrain

log = logging.getLogger("ramat")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4
TRACE_FIELDS = ["step", "split", "metric", "lr", "grad_norm", "clipped_norm"]


def _sidecar(out, suffix: str) -> Path:
    out = Path(out)
    return out.with_name(out.name + suffix)


def _echo(cfg: RunConfig, out, K: int | None = None) -> dict:
    eff = cfg.effective(K)
    text = json.dumps(eff, indent=2, sort_keys=True)
    print(text, file=sys.stderr)
    if out is not None:
        _sidecar(out, ".config.json").write_text(text + "\n")
    return eff


def _echo_checkpoint(ckpt: Checkpoint) -> None:
    print(json.dumps(ckpt.config, indent=2, sort_keys=True), file=sys.stderr)


def _write_trace(path, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=TRACE_FIELDS, lineterminator="\n", extrasaction="ignore")
        w.writeheader()
        for r in rows:
            w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()})


def _load_cfg(args) -> RunConfig:
    return RunConfig.load(getattr(args, "config", None)).with_seed(getattr(args, "seed", None))


def _synthetic_frame(kind: str, cfg: RunConfig) -> tuple[KpiFrame, KpiSchema]:
    rows = cfg.data.rows
    if kind == "bursty":
        frame = synthetic.bursty(rows=rows or 1000, seed=cfg.seed, step_ms=cfg.data.t_step)
        return frame, TABLE1
    values = synthetic.generate(kind, seed=cfg.seed, **({"n": rows} if rows else {}))
    names = [f"ch{j}" for j in range(values.shape[1])]
    frame = KpiFrame(np.arange(len(values), dtype=np.int64) * cfg.data.t_step, names, values)
    return frame, KpiSchema.generic(names)


def _schema(cfg: RunConfig) -> KpiSchema:
    if cfg.data.schema:
        return KpiSchema.from_json(json.loads(Path(cfg.data.schema).read_text()))
    return TABLE1


# ---------------------------------------------------------------------------
# commands


def cmd_synth(args) -> int:
    cfg = _load_cfg(args)
    if args.rows:
        cfg = dataclasses.replace(cfg, data=dataclasses.replace(cfg.data, rows=args.rows))
    frame, _ = _synthetic_frame(args.kind, cfg)
    write_csv(frame, args.out)
    return EXIT_OK


def cmd_preprocess(args) -> int:
    cfg = _load_cfg(args)
    _echo(cfg, args.out)
    d = cfg.data
    if args.synthetic:
        frame, schema = _synthetic_frame(args.synthetic, cfg)
        frames = [frame]
    else:
        paths = args.inputs or list(d.csv)
        if not paths:
            raise ConfigError("no input: pass --in CSV... or --synthetic KIND")
        frames = [read_csv(p) for p in paths]
        schema = _schema(cfg)
    train, test, summary = preprocess_frames(frames, schema, d.n_seq, d.t_step, d.window_ms,
                                             d.step_ms, d.test_fraction)
    if train.M == 0:
        raise DataError("preprocessing produced no sequences (M=0)")
    train.scalers = Scalers.load(args.scalers) if args.scalers else fit_dataset_scalers(train)
    train.scalers.check_channels(train.channels)
    meta = {"n_seq": d.n_seq, "t_step": d.t_step, "summary": summary.to_json()}
    save_dataset(args.out, train, meta)
    train.scalers.save(_sidecar(args.out, ".scalers.json"))
    _sidecar(args.out, ".summary.json").write_text(json.dumps(summary.to_json(), indent=2) + "\n")
    if test is not None and args.test_out:
        test.scalers = train.scalers
        save_dataset(args.test_out, test, meta)
    print(json.dumps(summary.to_json()))
    return EXIT_OK


def cmd_pretrain(args) -> int:
    cfg = _load_cfg(args)
    if args.synthetic:
        frame, schema = _synthetic_frame(args.synthetic, cfg)
        dataset, _, _ = preprocess_frames([frame], schema, cfg.data.n_seq, cfg.data.t_step,
                                          cfg.data.window_ms, cfg.data.step_ms)
        dataset.scalers = fit_dataset_scalers(dataset)
    else:
        dataset, _ = load_dataset(args.data)
    model = cfg.model_config(dataset.K)
    eff = _echo(cfg, args.out, dataset.K)
    seeds = cfg.seeds()
    spec = build_reservoir(cfg.reservoir, model.patch_dim, seeds["reservoir"])
    params = init_params(model, spec.reservoir_size, seeds["init"])
    trace: list[dict] = []
    try:
        result = pretrain(dataset.series, params, spec, model, cfg.train, seeds["mask"],
                          callback=trace.append)
    finally:
        _write_trace(_sidecar(args.out, ".loss.csv"), trace)
    ckpt = Checkpoint(model, spec, result.params, dataset.scalers, result.opt,
                      seeds["mask"].bit_generator.state, eff,
                      {"stage": "pretrain", "steps": len(result.trace)})
    ckpt.save(args.out)
    return EXIT_OK


def cmd_finetune(args) -> int:
    cfg = _load_cfg(args)
    ckpt = Checkpoint.load(args.ckpt)
    dataset, meta = load_dataset(args.data)
    model = ModelConfig(**{**dataclasses.asdict(ckpt.model), **cfg.model})
    check_compatible(ckpt, model)
    if dataset.scalers is None:
        raise DataError(f"{args.data} carries no scalers")
    if ckpt.scalers is not None and ckpt.scalers.channels != dataset.scalers.channels:
        raise ConfigError(f"scaler channels {list(dataset.scalers.channels)} do not match "
                          f"checkpoint channels {list(ckpt.scalers.channels)}")
    train = cfg.train
    if args.freeze:
        train = dataclasses.replace(train, freeze_mode=args.freeze)
    if args.top_k is not None:
        train = dataclasses.replace(train, top_k=args.top_k)
    cfg = dataclasses.replace(cfg, train=train, model=dataclasses.asdict(model))
    cfg = dataclasses.replace(cfg, data=dataclasses.replace(
        cfg.data, n_seq=int(meta.get("n_seq", dataset.n_seq)),
        t_step=int(meta.get("t_step", cfg.data.t_step))))
    eff = _echo(cfg, args.out, dataset.K)
    X, y = dataset.standardized()
    plan = FreezePlan(train.freeze_mode, train.top_k)
    rng = cfg.seeds()["shuffle"]
    trace: list[dict] = []
    try:
        result = finetune(ckpt.params, ckpt.reservoir, model, train, X, y, plan, rng,
                          callback=trace.append)
    finally:
        _write_trace(_sidecar(args.out, ".val.csv"), trace)
    trace = result.trace + [
        {"step": result.best_epoch, "split": "best_epoch", "metric": min(
            (r["metric"] for r in result.trace if r["split"] == "val"), default=float("nan"))},
        {"step": result.stopped_epoch, "split": "early_stop",
         "metric": 1.0 if result.early_stopped else 0.0},
    ]
    _write_trace(_sidecar(args.out, ".val.csv"), trace)
    out = Checkpoint(model, ckpt.reservoir, result.params, dataset.scalers, result.opt,
                     rng.bit_generator.state, eff,
                     {"stage": "finetune", "best_epoch": result.best_epoch,
                      "stopped_epoch": result.stopped_epoch,
                      "freeze_mode": plan.mode, "top_k": plan.k})
    out.save(args.out)
    return EXIT_OK


def _prediction_windows(frame: KpiFrame, n_seq: int, t_step: int) -> np.ndarray:
    if len(frame) < n_seq:
        raise DataError(f"need at least n_seq={n_seq} rows, got {len(frame)}")
    gaps = np.flatnonzero(np.diff(frame.timestamps) != t_step)
    if len(gaps):
        i = int(gaps[0])
        raise DataError(f"timestamp gap between rows {i} and {i + 1} "
                        f"(t={frame.timestamps[i]} -> {frame.timestamps[i + 1]}, "
                        f"expected step {t_step})")
    idx = np.arange(n_seq - 1, len(frame))[:, None] + np.arange(-n_seq + 1, 1)
    return frame.values[idx]


def cmd_predict(args) -> int:
    ckpt = Checkpoint.load(args.ckpt)
    _echo_checkpoint(ckpt)
    if ckpt.scalers is None:
        raise ConfigError(f"{args.ckpt} has no scalers; fine-tune it first")
    data = ckpt.config.get("data", {})
    n_seq, t_step = int(data.get("n_seq", 8)), int(data.get("t_step", 20))
    frame = read_csv(args.inputs)
    schema = KpiSchema.generic(ckpt.scalers.channels)
    padded, dropped = impute_and_drop(frame, schema)
    if dropped:
        raise DataError(f"{dropped} row(s) have missing KPI values")
    windows = _prediction_windows(padded, n_seq, t_step)
    pred = ckpt.scalers.invert(predict(ckpt.params, ckpt.reservoir, ckpt.model,
                                       ckpt.scalers.apply(windows)))
    stamps = padded.timestamps[n_seq - 1:] + t_step
    with open(args.out, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["timestamp_ms", "channel", "prediction"])
        for t, row in zip(stamps, pred):
            for name, v in zip(ckpt.scalers.channels, row):
                w.writerow([int(t), name, repr(float(v))])
    return EXIT_OK


def cmd_eval(args) -> int:
    ckpt = Checkpoint.load(args.ckpt)
    _echo_checkpoint(ckpt)
    if ckpt.scalers is None:
        raise ConfigError(f"{args.ckpt} has no scalers; fine-tune it first")
    dataset, _ = load_dataset(args.data)
    ckpt.scalers.check_channels(dataset.channels)
    X, y = dataset.standardized(ckpt.scalers)
    pred_std = predict(ckpt.params, ckpt.reservoir, ckpt.model, X)
    report = EvalReport.build(dataset.channels, ckpt.scalers.invert(y),
                              ckpt.scalers.invert(pred_std), channel_mse(pred_std, y))
    report.write(args.out)
    for row in report.table():
        print(f"{row['index']:>2} {row['channel']:<20} MSE={row['mse']:.6g}")
    return EXIT_OK


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="ramat", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, out_help):
        sp.add_argument("--config", help="run configuration JSON")
        sp.add_argument("--seed", type=int, help="overrides RAMAT_SEED and the config seed")
        sp.add_argument("--out", required=True, help=out_help)

    sp = sub.add_parser("synth", help="write a synthetic raw CSV")
    sp.add_argument("--kind", choices=synthetic.KINDS, required=True)
    sp.add_argument("--rows", type=int)
    common(sp, "CSV path")
    sp.set_defaults(func=cmd_synth)

    sp = sub.add_parser("preprocess", help="align, filter and sequence KPI CSVs")
    src = sp.add_mutually_exclusive_group()
    src.add_argument("--in", dest="inputs", nargs="+", help="raw CSV file(s)")
    src.add_argument("--synthetic", choices=synthetic.KINDS)
    sp.add_argument("--scalers", help="pre-fitted scalers JSON to reuse instead of fitting")
    sp.add_argument("--test-out", help="dataset path for the held-out tail (data.test_fraction)")
    common(sp, "dataset path")
    sp.set_defaults(func=cmd_preprocess)

    sp = sub.add_parser("pretrain", help="masked-patch pretraining")
    src = sp.add_mutually_exclusive_group(required=True)
    src.add_argument("--data")
    src.add_argument("--synthetic", choices=synthetic.KINDS)
    common(sp, "checkpoint path")
    sp.set_defaults(func=cmd_pretrain)

    sp = sub.add_parser("finetune", help="supervised fine-tuning")
    sp.add_argument("--ckpt", required=True)
    sp.add_argument("--data", required=True)
    sp.add_argument("--freeze", choices=("head_only", "top_k_blocks", "full"))
    sp.add_argument("--top-k", type=int)
    common(sp, "checkpoint path")
    sp.set_defaults(func=cmd_finetune)

    sp = sub.add_parser("predict", help="one-step predictions for a window CSV")
    sp.add_argument("--ckpt", required=True)
    sp.add_argument("--in", dest="inputs", required=True)
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_predict)

    sp = sub.add_parser("eval", help="per-KPI test MSE report")
    sp.add_argument("--ckpt", required=True)
    sp.add_argument("--data", required=True)
    sp.add_argument("--out", required=True, help="report directory")
    sp.set_defaults(func=cmd_eval)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ConfigError, CheckpointError, ReservoirError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, SchemaError, OSError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
