"""Command-line entry points: train, eval, predict, synth.

Exit codes: 0 success, 1 validation/configuration error, 2 runtime abort
(non-finite loss or unexpected failure).
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from .data import (ExemplarBox, SyntheticConfig, ValidationError,
                   generate_synthetic, load_annotations, preprocess,
                   serialize_annotations)
from .harness import (ExperimentConfig, TrainingAbort, evaluate,
                      load_checkpoint, predict_and_render, train, _load_split)
from .metrics import MetricError


def _cmd_train(args) -> int:
    config = ExperimentConfig.from_json(args.config)
    train(config, resume_from=args.resume)
    print(f"run complete; artifacts in {config.out_dir}")
    return 0


def _cmd_eval(args) -> int:
    model, config, _ = load_checkpoint(args.ckpt)
    if args.annotations:
        setattr(config, f"{args.split}_annotations", args.annotations)
    split = _load_split(config, args.split)
    report = evaluate(model, split, config, dump_path=args.dump)
    print(json.dumps(report, indent=1))
    return 0


def _cmd_predict(args) -> int:
    model, config, _ = load_checkpoint(args.ckpt)
    import numpy as np
    from PIL import Image

    with Image.open(args.image) as im:
        image = np.asarray(im.convert("RGB"), dtype="float32") / 255.0
    with open(args.exemplars) as fh:
        boxes = [ExemplarBox(*map(float, b)) for b in json.load(fh)]
    from .data import AnnotatedImage
    sample = AnnotatedImage(image_id=Path(args.image).stem, image=image,
                            points=[], exemplars=boxes)
    sample.validate(require_points=False)
    out_json = args.out_json or f"{Path(args.image).stem}_pred.json"
    out_png = args.out_png or f"{Path(args.image).stem}_overlay.png"
    dump = predict_and_render(model, sample, config, out_json, out_png)
    print(f"count: {len(dump['predictions'])} -> {out_json}, {out_png}")
    return 0


def _cmd_synth(args) -> int:
    with open(args.config) as fh:
        doc = json.load(fh)
    n_samples = doc.pop("n_samples", 10)
    config = SyntheticConfig(**{
        k: tuple(v) if isinstance(v, list) and k.endswith(("size", "range")) else v
        for k, v in doc.items()})
    split = generate_synthetic(config, n_samples, name=args.name)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    serialize_annotations(split, image_dir=out, out_path=out / "annotations.json")
    print(f"wrote {len(split)} samples to {out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="locount",
        description="Few-shot counting-by-localization toolkit")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a model from a JSON config")
    p.add_argument("--config", required=True)
    p.add_argument("--resume", default=None, help="checkpoint to resume from")
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a split")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--split", default="val", choices=["train", "val", "test"])
    p.add_argument("--annotations", default=None,
                   help="override the split's annotation file")
    p.add_argument("--dump", default=None, help="write per-image predictions here")
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("predict", help="predict and render one image")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--exemplars", required=True,
                   help="JSON file: [[x1,y1,x2,y2], ...]")
    p.add_argument("--out-json", default=None)
    p.add_argument("--out-png", default=None)
    p.set_defaults(func=_cmd_predict)

    p = sub.add_parser("synth", help="generate a synthetic dataset")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--name", default="train")
    p.set_defaults(func=_cmd_synth)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ValidationError, MetricError, ValueError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except TrainingAbort as exc:
        print(f"abort: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
