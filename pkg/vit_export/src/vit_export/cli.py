"""vit-export command line interface."""

from __future__ import annotations

import argparse
import fnmatch
import sys
from pathlib import Path

from .export import ExportError, ExportJob, export_dataset
from .sidecar import verify_sidecar
from .vit import ARCHS


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="vit-export",
        description="write per-superpixel ViT attention features as .spxf sidecars",
    )
    parser.add_argument("--data", required=True, help="dataset root with *_rgb.png and *_spx.png")
    parser.add_argument("--frames", default="*", help="glob over frame ids (default: all)")
    parser.add_argument("--arch", default="vit_small_16", choices=sorted(ARCHS))
    parser.add_argument("--weights", help="local ViT checkpoint (.pth state dict)")
    parser.add_argument(
        "--random-weights", action="store_true",
        help="seeded random init instead of a checkpoint (smoke testing only)",
    )
    parser.add_argument("--seed", type=int, default=0, help="seed for --random-weights")
    parser.add_argument("--layer", type=int, default=-1, help="attention block (-1 = final)")
    parser.add_argument("--image-size", type=int, default=224, dest="image_size")
    parser.add_argument("--heads-from-model", action="store_true", dest="heads_from_model",
                        help="derive the feature dim M from the model (always on; kept for scripts)")
    parser.add_argument("--overwrite", action="store_true")
    parser.add_argument("--verify", action="store_true", help="only validate existing sidecars")
    return parser


def _frame_ids(root: Path, pattern: str) -> list:
    ids = sorted(p.name[: -len("_rgb.png")] for p in root.glob("*_rgb.png"))
    return [fid for fid in ids if fnmatch.fnmatch(fid, pattern)]


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    root = Path(args.data)
    if not root.is_dir():
        print(f"error: {root} is not a directory", file=sys.stderr)
        return 2
    frame_ids = _frame_ids(root, args.frames)
    if not frame_ids:
        print(f"error: no frames match {args.frames!r} under {root}", file=sys.stderr)
        return 2

    if args.verify:
        failures = 0
        for fid in frame_ids:
            path = root / f"{fid}.spxf"
            if not path.exists():
                print(f"{fid}: missing sidecar")
                failures += 1
                continue
            report = verify_sidecar(path)
            if report.ok:
                print(f"{fid}: ok (N={report.patch_count}, M={report.feature_dim})")
            else:
                print(f"{fid}: {'; '.join(report.errors)}")
                failures += 1
        return 1 if failures else 0

    if not args.weights and not args.random_weights:
        print(
            "error: pass --weights <checkpoint.pth> or explicitly opt into --random-weights",
            file=sys.stderr,
        )
        return 2
    try:
        job = ExportJob(
            data_root=root,
            arch=args.arch,
            weights=args.weights,
            layer=args.layer,
            image_size=args.image_size,
            overwrite=args.overwrite,
            seed=args.seed,
        )
        written = export_dataset(job, frame_ids)
    except ExportError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    print(f"wrote {len(written)} sidecars under {root}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
