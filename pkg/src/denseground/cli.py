"""Command-line surface: gen-data, train, eval, verify."""

from __future__ import annotations

import argparse
import os
import sys

import numpy as np

from .config import RunConfig, apply_overrides, load_config, save_config
from .metrics import evaluate, save_predictions
from .model import load_model
from .report import write_report
from .scenes import generate_dataset, load_dataset
from .train import train_model


def _base_config(args) -> RunConfig:
    config = load_config(args.config) if getattr(args, "config", None) else RunConfig()
    return apply_overrides(config, args)


def _add_common(parser):
    parser.add_argument("--config", help="JSON config file (defaults are used otherwise)")
    parser.add_argument("--seed", type=int, help="master seed override")


def cmd_gen_data(args) -> int:
    config = _base_config(args)
    manifest = generate_dataset(args.out, config.scene, config.seed, args.count)
    print(f"wrote {manifest['count']} scenes to {args.out} "
          f"(train {len(manifest['train'])} / val {len(manifest['val'])}, family {manifest['family']})")
    return 0


def cmd_train(args) -> int:
    config = _base_config(args)
    result = train_model(config, args.dataset, args.out)
    best = result["best"]
    if best["epoch"] >= 0:
        print(f"best val Acc@50 {best['acc50']:.3f} at epoch {best['epoch']}; "
              f"checkpoint at {result['checkpoint']}")
    else:
        print(f"no validation split; final checkpoint at {result['checkpoint']}")
    return 0


def cmd_eval(args) -> int:
    model, meta = load_model(args.checkpoint)
    config = apply_overrides(model.config, args)
    model.config = config
    train_scenes, val_scenes = load_dataset(args.dataset)
    scenes = train_scenes if args.split == "train" else val_scenes
    if not scenes:
        print(f"no scenes in the {args.split} split", file=sys.stderr)
        return 2
    predictions = {}
    lengths = {}
    for name, scene in scenes:
        pc = np.concatenate([scene.points, scene.colors], axis=1)
        lengths[name] = scene.n_points
        for ridx, ref in enumerate(scene.referrals):
            if config.use_mve:
                predictions[(name, ridx)] = model.predict_ensembled(
                    pc, ref.tokens, views=config.mve.views, threshold=config.mve.threshold)
            else:
                predictions[(name, ridx)] = model.predict(pc, ref.tokens)
    report = evaluate(predictions, scenes)
    os.makedirs(args.out, exist_ok=True)
    save_predictions(os.path.join(args.out, "predictions.jsonl"), predictions, lengths)
    write_report(args.out, report, figures=not args.no_figures)
    save_config(config, os.path.join(args.out, "eval_config.json"))
    print(open(os.path.join(args.out, "report.txt"), encoding="utf-8").read().rstrip())
    return 0


def cmd_verify(args) -> int:
    from .verify import run_all

    results, ok = run_all()
    shown_fail = 0
    for r in results:
        if not r.ok:
            print(r.line())
            shown_fail += 1
    groups = {}
    for r in results:
        key = (r.module, r.prop.split(":")[0])
        groups.setdefault(key, []).append(r.ok)
    for (module, prop), oks in sorted(groups.items()):
        status = "PASS" if all(oks) else "FAIL"
        print(f"{status}  {module}/{prop}: {sum(oks)}/{len(oks)} checks")
    print("verify: " + ("all checks passed" if ok else f"{shown_fail} check(s) FAILED"))
    return 0 if ok else 1


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="denseground",
        description="dense 3D visual grounding on synthetic scenes")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a scene dataset with a train/val manifest")
    _add_common(p)
    p.add_argument("--count", type=int, required=True, help="number of scenes")
    p.add_argument("--out", required=True, help="output dataset directory")
    p.add_argument("--family", choices=["mixed", "relational", "view"],
                   help="scene family override")
    p.set_defaults(fn=cmd_gen_data)

    p = sub.add_parser("train", help="train a model and keep the best-validation checkpoint")
    _add_common(p)
    p.add_argument("--dataset", required=True)
    p.add_argument("--out", required=True, help="run directory")
    p.add_argument("--epochs", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--no-baf", action="store_true", help="swap spherical masks for all-zero masks")
    p.add_argument("--no-contrastive", action="store_true", help="drop the contrastive term")
    p.add_argument("--no-gct", action="store_true", help="drop the camera token and its loss")
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("eval", help="run inference and emit a metrics report")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--out", required=True, help="report directory")
    p.add_argument("--split", choices=["train", "val"], default="val")
    p.add_argument("--mve", action="store_true", help="ensemble over rotated views")
    p.add_argument("--no-mve", action="store_true", help="force single-view inference")
    p.add_argument("--views", type=int, help="number of MVE views (default 5)")
    p.add_argument("--mve-threshold", type=float, help="MVE filtering threshold (default 0.9)")
    p.add_argument("--no-figures", action="store_true")
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("verify", help="run the invariant suite (nonzero exit on failure)")
    p.set_defaults(fn=cmd_verify)

    args = parser.parse_args(argv)
    return args.fn(args)


if __name__ == "__main__":
    sys.exit(main())
