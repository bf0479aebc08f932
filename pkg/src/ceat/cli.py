"""Command-line entry point.

Every command prints one JSON object on stdout. Failures print
``{"error": kind, "message": ...}`` and exit non-zero.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

EXIT_ERROR = 1
EXIT_CHECK_FAILED = 2


class CheckFailed(Exception):
    def __init__(self, payload: dict):
        super().__init__(payload.get("message", "check failed"))
        self.payload = payload


def _emit(obj) -> None:
    print(json.dumps(obj, indent=2, sort_keys=True, default=float))


def cmd_train(args) -> dict:
    from .config import load_config
    from .trainer import run_experiment

    cfg = load_config(args.config)
    if args.output_dir:
        cfg.output_dir = args.output_dir
    reports = run_experiment(cfg)
    return {
        "output_dir": str(cfg.output_dir),
        "runs": {
            m: {
                "average_incremental_accuracy": r["average_incremental_accuracy"],
                "average_forgetting": r["average_forgetting"],
                "runtime_seconds": r["runtime_seconds"],
            }
            for m, r in reports.items()
        },
    }


def cmd_eval(args) -> dict:
    from .autodiff import no_grad, precision
    from .data import load_dataset
    from .trainer import NECILSchedule, model_from_checkpoint

    model, meta = model_from_checkpoint(args.checkpoint)
    ds = load_dataset(args.dataset)
    schedule = NECILSchedule.from_dict(meta["schedule"])
    col = schedule.column_of()
    seen = schedule.class_order[: model.num_classes]
    keep = np.flatnonzero(np.isin(ds.labels, seen))
    if len(keep) == 0:
        raise ValueError("dataset holds no samples of the checkpoint's seen classes")
    cols = np.array([col[int(c)] for c in ds.labels[keep]])
    preds = []
    with precision(meta["config"]["precision"]), no_grad():
        dtype = model.embed["cls"].dtype
        for s in range(0, len(keep), 256):
            batch = ds.pixels(keep[s : s + 256]).astype(dtype)
            preds.append(np.argmax(model(batch)[1].data, axis=1))
    preds = np.concatenate(preds)
    per_task = {}
    start = 0
    for t, classes in enumerate(schedule.tasks):
        if start >= model.num_classes:
            break
        mask = np.isin(cols, np.arange(start, start + len(classes)))
        if mask.any():
            per_task[str(t)] = float((preds[mask] == cols[mask]).mean())
        start += len(classes)
    return {"samples": int(len(keep)), "accuracy": float((preds == cols).mean()), "per_task": per_task}


def cmd_verify_absorb(args) -> dict:
    from . import absorb as ab
    from .autodiff import precision
    from .trainer import model_from_checkpoint

    model, meta = model_from_checkpoint(args.checkpoint)
    prec = args.precision or meta["config"]["precision"]
    tol = args.tolerance or (1e-5 if prec == "float32" else 1e-10)
    with precision(prec):
        model = model.astype(np.float32 if prec == "float32" else np.float64)
        rng = np.random.default_rng(args.seed)
        num_new = max(meta["head_widths"][-1], 1)
        plan = ab.expand(model, max(len(meta["head_widths"]), 1), num_new)
        if args.random_psi:
            for _, _, psi in plan.sites:
                psi.data = (rng.normal(size=psi.shape) * 0.02).astype(psi.data.dtype)
        expanded = model.copy()
        ab.absorb_all(model, plan)
        c = model.config
        images = rng.uniform(size=(args.inputs, c.image_size, c.image_size, c.channels))
        residual = ab.verify_equivalence(expanded, model, images)
    out = {"residual": residual, "tolerance": tol, "precision": prec, "random_psi": bool(args.random_psi)}
    if residual > tol:
        raise CheckFailed({"error": "absorption_residual", "message": "residual above tolerance", **out})
    return out


def cmd_gradcheck(args) -> dict:
    from .gradsuite import TOLERANCE, run_suite

    errors = run_suite(seed=args.seed)
    out = {"max_relative_error": {k: float(v) for k, v in errors.items()}, "tolerance": TOLERANCE}
    bad = sorted(k for k, v in errors.items() if not v < TOLERANCE)
    if bad:
        raise CheckFailed({"error": "gradient_mismatch", "message": f"failed: {', '.join(bad)}", **out})
    return out


def cmd_report(args) -> dict:
    from .report import summarize

    run = Path(args.run_dir)
    dirs = [run] if (run / "report.json").exists() else sorted(p.parent for p in run.glob("*/report.json"))
    if not dirs:
        raise FileNotFoundError(f"no report.json under {run}")
    out = {d.name: summarize(d) for d in dirs}
    mismatched = [k for k, v in out.items() if not v["matches_report"]]
    if mismatched:
        raise CheckFailed({"error": "metric_mismatch", "message": f"CSV replay disagrees: {mismatched}", "runs": out})
    return {"runs": out}


def cmd_synth(args) -> dict:
    from .data import generate_synthetic, save_dataset

    train, test = generate_synthetic(
        num_classes=args.classes, train_per_class=args.train_per_class,
        test_per_class=args.test_per_class, size=args.size, seed=args.seed,
    )
    out = Path(args.out_dir)
    save_dataset(train, out / "train.ceatds")
    save_dataset(test, out / "test.ceatds")
    return {"train": str(out / "train.ceatds"), "test": str(out / "test.ceatds"),
            "train_samples": len(train), "test_samples": len(test)}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="ceat", description="Continual expansion-and-absorption ViT tools")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("train", help="run the protocol from a YAML config")
    s.add_argument("config")
    s.add_argument("--output-dir")
    s.set_defaults(fn=cmd_train)

    s = sub.add_parser("eval", help="accuracy of a checkpoint on a dataset file")
    s.add_argument("checkpoint")
    s.add_argument("dataset")
    s.set_defaults(fn=cmd_eval)

    s = sub.add_parser("verify-absorb", help="expand, absorb and compare logits")
    s.add_argument("checkpoint")
    s.add_argument("--random-psi", action="store_true", help="random branches instead of zeros")
    s.add_argument("--precision", choices=["float32", "float64"])
    s.add_argument("--tolerance", type=float, default=0.0)
    s.add_argument("--inputs", type=int, default=100)
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(fn=cmd_verify_absorb)

    s = sub.add_parser("gradcheck", help="finite-difference check of every loss")
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(fn=cmd_gradcheck)

    s = sub.add_parser("report", help="recompute metrics from a run directory's CSV")
    s.add_argument("run_dir")
    s.set_defaults(fn=cmd_report)

    s = sub.add_parser("synth", help="write a synthetic train/test pair")
    s.add_argument("out_dir")
    s.add_argument("--classes", type=int, default=10)
    s.add_argument("--train-per-class", type=int, default=200)
    s.add_argument("--test-per-class", type=int, default=50)
    s.add_argument("--size", type=int, default=16)
    s.add_argument("--seed", type=int, default=1993)
    s.set_defaults(fn=cmd_synth)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, stream=sys.stderr)
    try:
        _emit(args.fn(args))
        return 0
    except CheckFailed as e:
        _emit(e.payload)
        return EXIT_CHECK_FAILED
    except Exception as e:  # noqa: BLE001 - reported as machine-readable JSON
        _emit({"error": type(e).__name__, "message": str(e)})
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
