"""Command line interface.

Subcommands cover the full loop: prepare-data builds the captioned record
store, train fits the denoiser, expand grows a window into a canvas, and
evaluate scores a directory of canvases.

Exit codes: 0 on success, 1 on runtime failures (backend transport, training
divergence), 2 on configuration or validation problems.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import sys
from pathlib import Path

import torch

from .backends import make_backend
from .canvas import image_digest, load_png
from .conditioning import ABLATION_LABELS, AblationFlags
from .config import RunConfig
from .metrics import PixelClassifier, clip_similarity, compare_runs, inception_score
from .pipeline import (
    expand,
    load_pairs,
    make_synthetic_pairs,
    prepare_dataset,
    save_state,
    train,
)
from .encoders import HashTextEncoder, PatchVisionEncoder
from .validation import ConfigurationError, ValidationError

KNOWN_METRICS = ("is", "clipsim")


def _parse_ratio(text: str) -> tuple[int, int]:
    try:
        kept, masked = (int(part) for part in text.split(","))
    except Exception:
        raise ConfigurationError(f"ratio must look like '1,1', got {text!r}") from None
    return kept, masked


def _make_backend(args):
    return make_backend(args.backend, transcript=getattr(args, "transcript", None))


def cmd_prepare(args) -> int:
    pairs_dir = Path(args.pairs)
    if args.synthetic:
        if not (pairs_dir / "annotations.jsonl").exists():
            make_synthetic_pairs(pairs_dir, args.synthetic, size=args.size, seed=args.seed)
    pairs = load_pairs(pairs_dir)
    backend = _make_backend(args)
    summary = prepare_dataset(
        pairs, args.k, backend, args.out, ratio=_parse_ratio(args.ratio),
    )
    print(json.dumps(summary, indent=2, sort_keys=True))
    return 0


def cmd_train(args) -> int:
    overrides = {}
    if args.steps is not None:
        overrides["train_steps"] = args.steps
    if args.seed is not None:
        overrides["seed"] = args.seed
    config = RunConfig.from_sources(args.config, overrides)
    flags = AblationFlags.from_labels(args.ablate) if args.ablate else None
    out_path = Path(args.out)
    if out_path.suffix == ".npz":
        out_dir, name = out_path.parent, out_path.name
    else:
        out_dir, name = out_path, "checkpoint.npz"
    checkpoint = train(
        args.data, out_dir, config, resume=args.resume, flags=flags, checkpoint_name=name,
    )
    meta = json.loads(checkpoint.with_suffix(".json").read_text())["meta"]
    losses = meta.get("loss_history", [])
    print(json.dumps({
        "checkpoint": str(checkpoint),
        "steps": meta.get("global_step"),
        "final_loss": losses[-1] if losses else None,
    }, indent=2))
    return 0


def cmd_expand(args) -> int:
    flags = AblationFlags.from_labels(args.ablate) if args.ablate else None
    if flags is not None and not flags.use_local:
        backend = None
    else:
        backend = _make_backend(args)
    image = load_png(args.image)
    state = expand(
        image, args.caption, args.steps, args.direction, backend, args.ckpt,
        flags=flags, seed=args.seed,
    )
    out = save_state(state, args.out)
    print(json.dumps({
        "out": str(out),
        "canvas": str(out / "canvas.png"),
        "extent": list(state.canvas.image.shape[:2]),
        "steps": state.canvas.steps_taken,
        "digest": image_digest(state.canvas.image),
    }, indent=2))
    return 0


def _load_eval_inputs(args):
    image_dir = Path(args.images)
    paths = sorted(image_dir.glob("*.png"))
    if not paths:
        raise ValidationError(f"{image_dir} holds no PNG files")
    images = [load_png(path) for path in paths]
    captions = {}
    if args.captions:
        for line in Path(args.captions).read_text().splitlines():
            if line.strip():
                entry = json.loads(line)
                captions[entry["image"]] = entry["caption"]
    return paths, images, captions


def cmd_evaluate(args) -> int:
    metrics = [token.strip().lower() for token in args.metrics.split(",") if token.strip()]
    for token in metrics:
        if token == "fid" or token == "kid":
            raise ConfigurationError(
                f"{token} is not supported: expanded canvases have no ground-truth "
                "images to compare against, so distribution distances are undefined here"
            )
        if token not in KNOWN_METRICS:
            raise ConfigurationError(
                f"unknown metric {token!r}; choose from {', '.join(KNOWN_METRICS)}"
            )
    if not metrics:
        raise ConfigurationError("no metrics requested")

    paths, images, captions = _load_eval_inputs(args)
    digest_source = json.dumps({
        "splits": args.splits, "classes": args.classes,
        "tokens": args.tokens, "dim": args.dim,
    }, sort_keys=True)
    config_digest = hashlib.sha256(digest_source.encode()).hexdigest()[:16]

    reports = {}
    if "is" in metrics:
        classifier = PixelClassifier(classes=args.classes)
        probs = classifier.predict_proba(images)
        splits = args.splits if args.splits is not None else min(10, len(images))
        reports["is"] = inception_score(probs, splits, config_digest=config_digest)
    if "clipsim" in metrics:
        pairs = []
        for path, img in zip(paths, images):
            if path.name not in captions:
                raise ValidationError(
                    f"no caption found for {path.name}; clipsim needs --captions entries"
                )
            pairs.append((img, captions[path.name]))
        reports["clipsim"] = clip_similarity(
            pairs,
            HashTextEncoder(tokens=args.tokens, dim=args.dim),
            PatchVisionEncoder(tokens=args.tokens, dim=args.dim),
            config_digest=config_digest,
        )

    payload = {name: report.to_dict() for name, report in reports.items()}
    if args.out:
        Path(args.out).write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")
    row = {"variant": "run", "dataset": Path(args.images).name, "factor": "—"}
    row.update({name.upper(): report for name, report in reports.items()})
    print(compare_runs([row]))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="outpainter",
        description="Text-guided autoregressive image outpainting, desk scale.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("prepare-data", help="caption pairs and build the record store")
    p.add_argument("--pairs", required=True, help="directory of PNGs + annotations.jsonl")
    p.add_argument("--out", required=True, help="record store output directory")
    p.add_argument("--k", type=int, default=4, help="imagined captions per image")
    p.add_argument("--backend", choices=["stub", "transcript", "http"], default="stub")
    p.add_argument("--transcript", help="transcript JSONL for --backend transcript")
    p.add_argument("--ratio", default="1,1", help="kept,masked strip ratio")
    p.add_argument("--synthetic", type=int, default=0,
                   help="generate this many synthetic pairs into --pairs when it is empty")
    p.add_argument("--size", type=int, default=32, help="synthetic image side in pixels")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_prepare)

    p = sub.add_parser("train", help="train the denoiser on a record store")
    p.add_argument("--data", required=True, help="record store directory")
    p.add_argument("--config", help="JSON config file (flags override it)")
    p.add_argument("--out", required=True, help="checkpoint path (.npz) or output directory")
    p.add_argument("--steps", type=int, help="override train_steps")
    p.add_argument("--seed", type=int, help="override the run seed")
    p.add_argument("--resume", help="continue from this checkpoint")
    p.add_argument("--ablate", action="append", choices=list(ABLATION_LABELS),
                   help="drop a conditioning component (repeatable)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("expand", help="grow an image by repeated shift-and-inpaint steps")
    p.add_argument("--image", required=True, help="square input PNG")
    p.add_argument("--caption", required=True, help="global caption guiding the expansion")
    p.add_argument("--steps", type=int, required=True)
    p.add_argument("--direction", required=True, choices=["left", "right", "top", "bottom"])
    p.add_argument("--ckpt", required=True, help="trained checkpoint (.npz)")
    p.add_argument("--ablate", action="append", choices=list(ABLATION_LABELS),
                   help="drop a conditioning component (repeatable)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--backend", choices=["stub", "transcript", "http"], default="stub")
    p.add_argument("--transcript", help="transcript JSONL for --backend transcript")
    p.add_argument("--out", default="expansion_out", help="state output directory")
    p.set_defaults(func=cmd_expand)

    p = sub.add_parser("evaluate", help="score a directory of canvases")
    p.add_argument("--images", required=True, help="directory of PNG canvases")
    p.add_argument("--captions", help="JSONL of {image, caption} for clipsim")
    p.add_argument("--metrics", default="is,clipsim", help="comma list: is, clipsim")
    p.add_argument("--out", help="write the reports as JSON here")
    p.add_argument("--splits", type=int, default=None,
                   help="IS split count (default: 10, capped at the sample count)")
    p.add_argument("--classes", type=int, default=4, help="toy classifier class count")
    p.add_argument("--tokens", type=int, default=8, help="encoder token rows")
    p.add_argument("--dim", type=int, default=32, help="encoder embedding width")
    p.set_defaults(func=cmd_evaluate)
    return parser


def main(argv=None) -> int:
    torch.set_num_threads(1)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code) if exc.code else 0
    try:
        return int(args.func(args) or 0)
    except (ConfigurationError, ValidationError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # runtime failures: backend, training, I/O
        print(f"error: {exc}", file=sys.stderr)
        return 1


def entrypoint():
    sys.exit(main())


if __name__ == "__main__":
    entrypoint()
