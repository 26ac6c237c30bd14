"""Command-line entry point: ``conviformer <command> ...``.

Every command writes line-delimited JSON records to stdout followed by a
human-readable summary line starting with ``#``. With ``--assert`` a command
exits with status 1 when its acceptance threshold is missed.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .checkpoint import CheckpointBundle, convert, load_model, save_model
from .data import SynthDataset, SynthSpec, generate
from .errors import ConviformerError
from .losses import LOSS_MODES
from .model import Conviformer
from .presizer import PresizeConfig, presize_directory
from .train import evaluate, gradient_suite, load_experiment, preset, resolution_experiment, train

GRAD_TOL = 1e-3


def emit(record: dict) -> None:
    print(json.dumps(record, sort_keys=True, default=_jsonable), flush=True)


def _jsonable(o):
    if isinstance(o, np.generic):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(f"cannot serialise {type(o).__name__}")


def summary(text: str) -> None:
    print(f"# {text}", flush=True)


def _experiment(path: Optional[str], default: str) -> dict:
    return load_experiment(path) if path else preset(default)


def _ints(text: str) -> list[int]:
    return [int(t) for t in text.split(",") if t.strip()]


# ---------------------------------------------------------------- commands


def cmd_presize(args) -> int:
    cfg = PresizeConfig(border_px=args.border, resize_to=args.resize, crop_to=args.crop)
    written = presize_directory(args.src, args.dst, cfg)
    for p in written:
        emit({"written": str(p)})
    summary(f"presized {len(written)} images into {args.dst}")
    return 0


def cmd_gen_data(args) -> int:
    spec = SynthSpec.load(args.spec) if args.spec else SynthSpec()
    ds = generate(spec, workers=args.workers)
    ds.save(args.out)
    counts = ds.class_counts()
    emit({"samples": len(ds), "taxa": int(counts.size), "min_count": int(counts.min()),
          "max_count": int(counts.max())})
    summary(f"wrote {len(ds)} samples to {args.out}")
    return 0


def cmd_train(args) -> int:
    exp = _experiment(args.config, "toy")
    data = SynthDataset.load(args.data) if args.data else generate(exp["data"])
    cfg = exp["train"]
    res = cfg.input_res or args.resolution or data.img_size
    model = Conviformer(exp["model"], res)
    eval_data = SynthDataset.load(args.eval_data) if args.eval_data else None
    result = train(model, data, cfg, eval_data=eval_data, callback=emit)
    final = result.history[-1]
    save_model(result.model, args.out, train=cfg.to_dict(), history=result.history)
    summary(f"trained {len(result.history)} epochs, final loss {final['loss']:.4f}, "
            f"train top-1 {final.get('train_top1', float('nan')):.3f}; checkpoint {args.out}")
    if args.check and cfg.target_top1 is not None and final.get("train_top1", 0.0) < cfg.target_top1:
        summary(f"FAIL train top-1 below target {cfg.target_top1}")
        return 1
    return 0


def cmd_eval(args) -> int:
    model, _ = load_model(args.ckpt)
    data = SynthDataset.load(args.data)
    report = evaluate(model, data, level=args.level)
    emit({**report.summary(), "per_class_precision": report.precision, "per_class_recall": report.recall})
    summary(f"top-1 {report.top1:.4f}, macro-F1 {report.macro_f1:.4f} on {report.n} samples")
    if args.check and report.top1 < args.min_top1:
        summary(f"FAIL top-1 below {args.min_top1}")
        return 1
    return 0


def cmd_resolution_exp(args) -> int:
    exp = _experiment(args.config, "resolution")
    spec = SynthSpec.load(args.spec) if args.spec else exp["data"]
    resolutions = _ints(args.resolutions) if args.resolutions else exp["resolutions"]
    seeds = _ints(args.seeds) if args.seeds else exp["seeds"]
    report = resolution_experiment(spec, resolutions, exp["model"], exp["train"], seeds=seeds, callback=emit)
    for run in report.runs:
        emit({"resolution": run.resolution, "t_p": run.t_p, "t_p_convit": run.t_p_convit,
              "attention_proxy": run.attention_proxy, "mean_test_top1": run.mean_accuracy})
    lo, hi = report.runs[0], report.runs[-1]
    better = all(h > l for h, l in zip(hi.accuracies, lo.accuracies))
    summary(f"test top-1 {lo.resolution}px {lo.mean_accuracy:.3f} vs {hi.resolution}px {hi.mean_accuracy:.3f}; "
            f"higher resolution better on every seed: {better}")
    return 1 if args.check and not better else 0


def cmd_gradcheck(args) -> int:
    exp = _experiment(args.config, "toy")
    modes = args.modes.split(",") if args.modes else list(LOSS_MODES)
    errs = gradient_suite(exp["model"], modes, input_res=args.resolution, probes=args.probes)
    for mode, err in errs.items():
        emit({"mode": mode, "max_rel_err": err, "pass": err < GRAD_TOL})
    worst = max(errs.values())
    summary(f"worst relative error {worst:.2e} (tolerance {GRAD_TOL:g})")
    return 1 if args.check and worst >= GRAD_TOL else 0


def cmd_convert(args) -> int:
    bundle = CheckpointBundle.load(args.src)
    out = convert(bundle, args.direction)
    out.save(args.dst)
    dropped = out.metadata["conversion"]["dropped"]
    emit({"direction": args.direction, "entries_in": len(bundle), "entries_out": len(out), "dropped": dropped})
    summary(f"dropped {len(dropped)} entries; wrote {args.dst}")
    return 0


# ---------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="conviformer", description=__doc__.splitlines()[0])
    ap.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = ap.add_subparsers(dest="command", required=True)

    def add(name, fn, help_):
        p = sub.add_parser(name, help=help_)
        p.set_defaults(fn=fn)
        return p

    p = add("presize", cmd_presize, "strip, mirror-pad, resize and crop a directory of PPM images")
    p.add_argument("--src", required=True)
    p.add_argument("--dst", required=True)
    p.add_argument("--border", type=int, default=20)
    p.add_argument("--resize", type=int, default=512)
    p.add_argument("--crop", type=int, default=448)

    p = add("gen-data", cmd_gen_data, "render the synthetic dataset to a directory")
    p.add_argument("--spec", help="YAML synth spec (optional top-level 'data' key)")
    p.add_argument("--out", required=True)
    p.add_argument("--workers", type=int, default=1)

    p = add("train", cmd_train, "train a model and write a checkpoint")
    p.add_argument("--config", help="YAML with data/model/train sections (default: toy preset)")
    p.add_argument("--data", help="dataset directory (default: generate from the config)")
    p.add_argument("--eval-data")
    p.add_argument("--resolution", type=int)
    p.add_argument("--out", required=True)
    p.add_argument("--assert", dest="check", action="store_true")

    p = add("eval", cmd_eval, "evaluate a checkpoint on a dataset")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--level", default="taxon", choices=["taxon", "genus", "family"])
    p.add_argument("--min-top1", type=float, default=0.95)
    p.add_argument("--assert", dest="check", action="store_true")

    p = add("resolution-exp", cmd_resolution_exp, "accuracy versus input resolution")
    p.add_argument("--config", help="YAML experiment (default: resolution preset)")
    p.add_argument("--spec", help="YAML synth spec overriding the experiment's data section")
    p.add_argument("--resolutions", help="comma-separated, e.g. 32,128")
    p.add_argument("--seeds", help="comma-separated, e.g. 0,1,2")
    p.add_argument("--assert", dest="check", action="store_true")

    p = add("gradcheck", cmd_gradcheck, "finite-difference check of the full model under each loss mode")
    p.add_argument("--config", help="YAML experiment whose model section is checked (default: toy preset)")
    p.add_argument("--modes", help=f"comma-separated subset of {','.join(LOSS_MODES)}")
    p.add_argument("--resolution", type=int, default=64)
    p.add_argument("--probes", type=int, default=3)
    p.add_argument("--assert", dest="check", action="store_true")

    p = add("convert", cmd_convert, "convert a checkpoint between base and conviformer layouts")
    p.add_argument("--in", dest="src", required=True)
    p.add_argument("--out", dest="dst", required=True)
    p.add_argument("--direction", required=True, choices=["base-to-conviformer", "conviformer-to-base"])
    return ap


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.fn(args)
    except (ConviformerError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
