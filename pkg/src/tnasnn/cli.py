"""Command line entry points: train, eval, sweep and inspect-checkpoint."""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import checkpoint as ckpt
from . import snn
from .config import SWEEP_ALPHAS, TrainConfig, load_config, with_changes, write_snapshot
from .data import load_dataset
from .errors import ConfigurationError, FormatError, TrainingDiverged
from .tensor import precision
from .training import evaluate, metrics_columns, train

logger = logging.getLogger("tnasnn")


def data_root(cfg: TrainConfig) -> str:
    root = cfg.data_root or os.environ.get("DATA_ROOT", "")
    if not root and cfg.dataset != "synthetic":
        raise ConfigurationError("no dataset root: pass --data-root or set DATA_ROOT")
    return root


def load_splits(cfg: TrainConfig):
    try:
        train_h, test_h = load_dataset(cfg.dataset, data_root(cfg), "train", timesteps=cfg.timesteps,
                                       seed=cfg.seed_data)
    except FileNotFoundError as exc:
        raise ConfigurationError(f"dataset {cfg.dataset!r} unavailable: {exc}") from None
    return train_h.head(cfg.train_limit), test_h.head(cfg.test_limit)


def run_train(cfg: TrainConfig, out_dir=None) -> dict:
    """Train per ``cfg`` and write the config snapshot, metrics, checkpoints and a test report."""
    cfg.validate()
    out = Path(out_dir or cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_snapshot(cfg, out / "config.snapshot")
    train_h, test_h = load_splits(cfg)
    result = train(cfg, train_h, out_dir=out)
    report = run_eval(out / "final.ckpt", test_h, out / "test_report.json")
    return {"result": result, "report": report, "out_dir": out}


def run_eval(checkpoint_path, handle, report_path=None, batch_size: int = 256) -> dict:
    """Top-1 and per-class accuracy plus mean spikes per LIF layer and sample for one checkpoint."""
    ck = ckpt.load_checkpoint(checkpoint_path)
    with precision(np.float32):
        spec, params = ckpt.load_network(ck)
        if spec.input_shape != handle.sample_shape or spec.num_classes != handle.class_count:
            raise ConfigurationError(
                f"checkpoint expects input {spec.input_shape} with {spec.num_classes} classes, dataset "
                f"{handle.name!r} provides {handle.sample_shape} with {handle.class_count}")
        trace = snn.ForwardTrace()
        acc, preds = evaluate(spec, params, handle, batch_size, trace=trace)
    per_class = []
    for c in range(handle.class_count):
        mask = handle.labels == c
        per_class.append(float(np.mean(preds[mask] == c)) if mask.any() else None)
    n = max(len(handle), 1)
    report = {
        "checkpoint": str(checkpoint_path),
        "dataset": handle.name,
        "split": handle.split,
        "samples": len(handle),
        "accuracy": acc,
        "per_class_accuracy": per_class,
        "mean_spikes_per_sample": {f"lif{i}": trace.spike_counts.get(i, 0.0) / n for i in spec.lif_layers()},
        "layer_dtypes": ck.layer_dtypes(),
        "networks": 1,
        "epoch": ck.epoch,
    }
    if report_path is not None:
        Path(report_path).write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
    return report


def run_sweep(cfg: TrainConfig, alphas=SWEEP_ALPHAS, out_dir=None) -> list[dict]:
    """One child run per alpha with shared seeds; writes sweep.csv and sweep_summary.csv."""
    if not alphas:
        raise ConfigurationError("the sweep needs at least one alpha value")
    out = Path(out_dir or cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    n_net = max(cfg.resolved_n_networks(), 2)
    columns = ["alpha"] + metrics_columns(n_net)
    summary = []
    with open(out / "sweep.csv", "w", newline="") as merged:
        writer = csv.writer(merged, lineterminator="\n")
        writer.writerow(columns)
        for alpha in alphas:
            child = out / f"alpha_{alpha:g}"
            row = {"alpha": alpha, "status": "ok", "epochs": 0, "final_acc_val_base": "",
                   "best_acc_val_base": "", "final_match_loss": "", "test_accuracy": ""}
            try:
                done = run_train(with_changes(cfg, alpha_match=float(alpha), out_dir=str(child)), child)
                metrics = done["result"].metrics
                for m in metrics:
                    writer.writerow([repr(float(alpha))] + [_cell(m.get(c)) for c in columns[1:]])
                row.update(epochs=len(metrics), final_acc_val_base=metrics[-1]["acc_val_base"],
                           best_acc_val_base=max(m["acc_val_base"] for m in metrics),
                           final_match_loss=metrics[-1]["match_loss"],
                           test_accuracy=done["report"]["accuracy"])
            except Exception as exc:  # a failed child must not stop the sweep
                logger.error("alpha %g failed: %s", alpha, exc)
                row["status"] = f"failed: {type(exc).__name__}: {exc}"
            summary.append(row)
    keys = ["alpha", "status", "epochs", "final_acc_val_base", "best_acc_val_base",
            "final_match_loss", "test_accuracy"]
    with open(out / "sweep_summary.csv", "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(keys)
        for row in summary:
            writer.writerow([_cell(row[k]) for k in keys])
    return summary


def _cell(value) -> str:
    if value is None:
        return ""
    return repr(value) if isinstance(value, float) else str(value)


def inspect_checkpoint(path) -> dict:
    ck = ckpt.load_checkpoint(path)
    layers = []
    for e in ck.entries:
        info = {"name": e.name, "shape": list(e.shape), "dtype": ckpt.DTYPE_NAMES[e.dtype],
                "bytes": len(e.payload)}
        if e.dtype == ckpt.TERNARY2BIT:
            info["zero_fraction"] = float(np.mean(e.array() == 0))
        layers.append(info)
    return {"version": ck.version, "epoch": ck.epoch, "digest": ck.digest.hex(), "meta": ck.meta,
            "layers": layers, "optimizer": ck.optimizer is not None}


def _config_from_args(args) -> TrainConfig:
    return load_config(args.config, args.override, data_root=args.data_root, out_dir=args.out,
                       seed_base=args.seed_base, seed_twin=args.seed_twin, seed_data=args.seed_data)


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="tnasnn", description="Twin-network SNN training and evaluation")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", help="sectioned key = value configuration file")
        sp.add_argument("--data-root", help="dataset directory (falls back to $DATA_ROOT)")
        sp.add_argument("--out", help="output directory")
        sp.add_argument("--seed-base", type=int)
        sp.add_argument("--seed-twin", type=int)
        sp.add_argument("--seed-data", type=int)
        sp.add_argument("--override", action="append", default=[], metavar="KEY=VALUE")

    common(sub.add_parser("train", help="train a network"))
    sw = sub.add_parser("sweep", help="train once per logit-matching weight")
    common(sw)
    sw.add_argument("--alphas", help="comma separated list (default 1e-2,...,1e-6)")

    ev = sub.add_parser("eval", help="evaluate a checkpoint")
    ev.add_argument("checkpoint")
    ev.add_argument("--dataset", required=True)
    ev.add_argument("--data-root")
    ev.add_argument("--split", default="test", choices=["train", "test"])
    ev.add_argument("--limit", type=int, default=0)
    ev.add_argument("--report", help="write the JSON report here")

    ins = sub.add_parser("inspect-checkpoint", help="print checkpoint layout")
    ins.add_argument("checkpoint")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "train":
            done = run_train(_config_from_args(args))
            print(json.dumps({"out_dir": str(done["out_dir"]), "test_accuracy": done["report"]["accuracy"]}))
        elif args.command == "sweep":
            cfg = _config_from_args(args)
            alphas = SWEEP_ALPHAS if not args.alphas else [float(a) for a in args.alphas.split(",")]
            summary = run_sweep(cfg, alphas)
            for row in summary:
                print(f"alpha={row['alpha']:g} {row['status']} acc_val={row['final_acc_val_base']}")
            if any(row["status"] != "ok" for row in summary):
                return 1
        elif args.command == "eval":
            cfg = TrainConfig(dataset=args.dataset, data_root=args.data_root or "")
            ck_meta = ckpt.load_checkpoint(args.checkpoint).meta
            handle, _ = load_dataset(args.dataset, data_root(cfg), args.split, timesteps=ck_meta.get("timesteps", 5))
            report = run_eval(args.checkpoint, handle.head(args.limit), args.report)
            print(json.dumps(report, indent=2, sort_keys=True))
        else:
            print(json.dumps(inspect_checkpoint(args.checkpoint), indent=2, sort_keys=True))
    except (ConfigurationError, FormatError, TrainingDiverged, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
