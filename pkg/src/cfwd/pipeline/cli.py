"""Command-line entry point: ``cfwd {train,enhance,evaluate,decompose}``."""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from ..errors import CFWDError
from ..imaging import IMAGE_SUFFIXES, load_dataset, load_image, save_image, to_tensor
from ..vlg import make_embedder
from ..wavelet import decompose, visualize_band
from .checkpoint import load_checkpoint
from .config import TrainConfig, load_config, smoke_config
from .inference import Enhancer, evaluate, image_seed
from .train import train


def cmd_train(args) -> int:
    if args.config:
        cfg = load_config(args.config)
    elif args.smoke:
        cfg = smoke_config()
    else:
        cfg = TrainConfig()
    data = load_dataset(args.data)
    embedder = make_embedder(args.embedder, args.embedder_path)
    trail, rows = train(cfg, data, embedder, out_dir=args.out)
    print(f"trained {rows[-1]['iteration']} iterations, final loss {rows[-1]['total']:.5f}; "
          f"{len(trail)} checkpoints in {args.out}")
    return 0


def cmd_enhance(args) -> int:
    enhancer = Enhancer.from_checkpoint(load_checkpoint(args.ckpt))
    src = Path(args.input)
    files = sorted(p for p in src.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES) if src.is_dir() else [src]
    out = Path(args.out)
    for i, path in enumerate(files):
        result = enhancer(load_image(path), image_seed(args.seed, i))
        save_image(result, out / f"{path.stem}.png")
    print(f"enhanced {len(files)} image(s) into {out}")
    return 0


def cmd_evaluate(args) -> int:
    report = evaluate(load_dataset(args.data), load_checkpoint(args.ckpt), seed=args.seed)
    csv_path = report.write_csv(args.out)
    text = report.to_text()
    csv_path.with_suffix(".txt").write_text(text)
    print(text, end="")
    return 0


def cmd_decompose(args) -> int:
    img = load_image(args.input)
    pyr = decompose(to_tensor(img)[0], args.levels)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    lines = ["# band lo hi  (pixel = (value - lo) / (hi - lo))"]
    scale = 2.0**args.levels
    approx = (pyr.approx / scale).clamp(0, 1)
    save_image(approx.permute(1, 2, 0).numpy(), out / f"A{args.levels}.png")
    lines.append(f"A{args.levels} 0 {scale:g}")
    for k, triple in enumerate(pyr.details, start=1):
        for name, band in zip("VHD", triple):
            vis, lo, hi = visualize_band(band)
            save_image(vis.transpose(1, 2, 0), out / f"{name}{k}.png")
            lines.append(f"{name}{k} {lo!r} {hi!r}")
    (out / "mapping.txt").write_text("\n".join(lines) + "\n")
    print(f"wrote {1 + 3 * args.levels} bands to {out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="cfwd", description="Wavelet-diffusion low-light enhancement")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train denoiser + HFPM on a paired dataset")
    t.add_argument("--config", help="key = value config file (defaults when omitted)")
    t.add_argument("--smoke", action="store_true", help="use the desk-scale preset when no --config is given")
    t.add_argument("--data", required=True, help="dataset root with low/ and high/")
    t.add_argument("--embedder", choices=("stub", "pretrained"), default="stub")
    t.add_argument("--embedder-path", help="local CLIP checkpoint directory for --embedder pretrained")
    t.add_argument("--out", required=True)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("enhance", help="enhance an image or a directory of images")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--input", required=True)
    e.add_argument("--out", required=True)
    e.add_argument("--seed", type=int, default=0)
    e.set_defaults(func=cmd_enhance)

    v = sub.add_parser("evaluate", help="PSNR/SSIM report over a paired dataset")
    v.add_argument("--ckpt", required=True)
    v.add_argument("--data", required=True)
    v.add_argument("--out", required=True, help="CSV path; an aligned .txt table is written alongside")
    v.add_argument("--seed", type=int, default=0)
    v.set_defaults(func=cmd_evaluate)

    d = sub.add_parser("decompose", help="write every wavelet band of an image as PNG")
    d.add_argument("--input", required=True)
    d.add_argument("--levels", type=int, default=2)
    d.add_argument("--out", required=True)
    d.set_defaults(func=cmd_decompose)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except CFWDError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
