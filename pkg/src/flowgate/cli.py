"""Command-line entry point: ``flowgate <command> ...``.

Failures print a single ``error: <kind>: <message>`` line to stderr and exit
with status 1; usage errors exit with status 2.
"""

from __future__ import annotations

import argparse
import logging
import sys

import numpy as np

from . import datakit
from .flow import FarnebackParams, farneback_flow, write_flo
from .imops import to_gray
from .model import ModelVariant, build_model, format_param_table
from .train import TrainConfig, evaluate, preprocess_manifest, train


def _cmd_manifest(args) -> int:
    m = datakit.build_manifest(args.root)
    m.save(args.out)
    for path, why in m.errors:
        print(f"skipped\t{path}\t{why}", file=sys.stderr)
    print(f"{len(m)} clips indexed, {len(m.errors)} skipped -> {args.out}")
    return 0


def _cmd_split(args) -> int:
    m = datakit.split_dataset(datakit.Manifest.load(args.manifest), args.fraction, args.seed)
    m.save(args.out or args.manifest)
    n_train = len(m.subset("train"))
    print(f"train {n_train} / test {len(m) - n_train}")
    return 0


def _cmd_audit(args) -> int:
    m = datakit.Manifest.load(args.manifest)
    feats = datakit.manifest_features(m, args.root)
    pairs = datakit.similarity_audit(m, feats, args.top)
    datakit.write_audit_csv(pairs, args.out)
    print(f"{len(pairs)} pairs scored, {sum(p.flagged for p in pairs)} flagged -> {args.out}")
    return 0


def _cmd_preprocess(args) -> int:
    m = datakit.Manifest.load(args.manifest)
    written = preprocess_manifest(m, args.root, args.out, args.frames, args.side, overwrite=args.overwrite)
    print(f"{len(written)} samples cached in {args.out}")
    return 0


def _cmd_flow(args) -> int:
    clip = datakit.load_clip(args.input)
    i = args.index
    if not 0 <= i < len(clip) - 1:
        raise ValueError(f"frame index {i} out of range for a {len(clip)}-frame clip")
    f = farneback_flow(to_gray(clip.frames[i]), to_gray(clip.frames[i + 1]), FarnebackParams())
    write_flo(f, args.out)
    mag = np.hypot(f.u, f.v)
    print(f"{f.width}x{f.height} mean|flow|={mag.mean():.4f} -> {args.out}")
    return 0


def _config(args) -> TrainConfig:
    overrides = {k: v for k, v in (kv.split("=", 1) for kv in args.set)} if args.set else {}
    if getattr(args, "metrics", None):
        overrides["metrics_path"] = args.metrics
    if args.config:
        return TrainConfig.from_file(args.config, overrides)
    return TrainConfig.from_mapping(overrides)


def _cmd_train(args) -> int:
    cfg = _config(args)
    result = train(cfg)
    last = result.epochs[-1]
    print(f"trained {last.epoch} epochs ({last.step} steps), train_acc={last.train_acc:.4f} -> {cfg.checkpoint_path}")
    return 0


def _cmd_eval(args) -> int:
    cfg = _config(args)
    report = evaluate(args.checkpoint, datakit.Manifest.load(args.manifest or cfg.manifest_path), args.split, cfg)
    if args.csv:
        report.write_csv(args.csv)
    if args.predictions:
        report.write_predictions(args.predictions)
    for row in report.csv_rows():
        print(",".join(map(str, row)))
    return 0


def _cmd_params(args) -> int:
    print(format_param_table(build_model(args.variant)))
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="flowgate", description="Flow-gated violence detection toolkit")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    mp = sub.add_parser("manifest", help="dataset index")
    msub = mp.add_subparsers(dest="action", required=True)
    mb = msub.add_parser("build", help="index a Violent/NonViolent frame tree")
    mb.add_argument("--root", required=True)
    mb.add_argument("--out", default="manifest.jsonl")
    mb.set_defaults(func=_cmd_manifest)

    sp = sub.add_parser("split", help="assign source groups to train/test")
    sp.add_argument("--manifest", default="manifest.jsonl")
    sp.add_argument("--fraction", type=float, default=0.8)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--out")
    sp.set_defaults(func=_cmd_split)

    ap = sub.add_parser("audit", help="rank intra-partition histogram similarity")
    ap.add_argument("--manifest", default="manifest.jsonl")
    ap.add_argument("--root", default=".")
    ap.add_argument("--top", type=float, default=0.3)
    ap.add_argument("--out", default="audit.csv")
    ap.set_defaults(func=_cmd_audit)

    pp = sub.add_parser("preprocess", help="cache network inputs for every clip")
    pp.add_argument("--manifest", default="manifest.jsonl")
    pp.add_argument("--root", default=".")
    pp.add_argument("--out", default="cache")
    pp.add_argument("--frames", type=int, default=64)
    pp.add_argument("--side", type=int, default=224)
    pp.add_argument("--overwrite", action="store_true")
    pp.set_defaults(func=_cmd_preprocess)

    fp = sub.add_parser("flow", help="dump the flow between two frames of a clip")
    fp.add_argument("--in", dest="input", required=True)
    fp.add_argument("--out", required=True)
    fp.add_argument("--index", type=int, default=0, help="first frame of the pair")
    fp.set_defaults(func=_cmd_flow)

    for name, func, help_ in (("train", _cmd_train, "train a model"), ("eval", _cmd_eval, "evaluate a checkpoint")):
        tp = sub.add_parser(name, help=help_)
        tp.add_argument("--config")
        tp.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override a config key")
        tp.set_defaults(func=func)
    sub.choices["train"].add_argument("--metrics", help="metrics CSV path")
    ep = sub.choices["eval"]
    ep.add_argument("--checkpoint", required=True)
    ep.add_argument("--split", default="test", choices=("train", "test"))
    ep.add_argument("--manifest")
    ep.add_argument("--csv", help="write the report as CSV")
    ep.add_argument("--predictions", help="write per-clip predictions as CSV")

    pa = sub.add_parser("params", help="per-block parameter table")
    pa.add_argument("--variant", default="fusion-p3d", type=ModelVariant.parse)
    pa.set_defaults(func=_cmd_params)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (ValueError, OSError, RuntimeError, KeyError) as exc:
        msg = str(exc).replace("\n", " ")
        print(f"error: {type(exc).__name__}: {msg}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
