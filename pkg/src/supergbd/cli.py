"""Command-line entry point: synth, preprocess, train, infer, eval, viz.

Every command accepts --config pointing at a JSON file of option defaults;
explicit flags override the file. SUPERGBD_SEED serves as a global seed
fallback. Exit codes: 0 success, 1 runtime failure, 2 invalid arguments.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from multiprocessing import Pool
from pathlib import Path

from . import imagery, metrics, pipeline, synthgen, tinynet, viz, zsplit
from .patch_graph import read_sidecar
from .superpixel import SlicConfig, load_superpixel_map, save_superpixel_map


class UsageError(ValueError):
    """Invalid arguments or unmet preconditions; exits with code 2."""


def _env_seed() -> int:
    raw = os.environ.get("SUPERGBD_SEED")
    return int(raw) if raw else 0


def _layered(args, key, default):
    """Flag value if given, else the JSON config value, else the default."""
    val = getattr(args, key, None)
    if val is not None:
        return val
    if getattr(args, "_config", None) and key in args._config:
        return args._config[key]
    return default


def _load_config(args):
    args._config = {}
    if getattr(args, "config", None):
        path = Path(args.config)
        if not path.exists():
            raise UsageError(f"config file {path} does not exist")
        args._config = json.loads(path.read_text())


def _parse_pn_ratio(raw) -> float | None:
    if raw is None:
        return 0.25
    text = str(raw).strip().lower()
    if text in ("natural", "random"):
        return None
    if "/" in text:
        pos, neg = text.split("/", 1)
        p, n = float(pos), float(neg)
        if p <= 0 or n <= 0:
            raise UsageError(f"invalid p/n ratio {raw!r}")
        return p / (p + n)
    value = float(text)
    if not 0.0 < value < 1.0:
        raise UsageError(f"positive fraction {raw!r} outside (0, 1)")
    return value


def _parse_features(raw) -> tuple:
    if raw is None:
        return ("rgb", "xyz", "normals")
    blocks = tuple(b.strip() for b in str(raw).split(",") if b.strip())
    bad = set(blocks) - {"rgb", "xyz", "normals", "implicit"}
    if bad or not blocks:
        raise UsageError(f"unknown feature blocks: {sorted(bad) or raw!r}")
    return blocks


def _split_frames(index, split):
    if split == "all":
        return index.frame_ids
    ids = [fid for fid in index.frame_ids if index.split_tags.get(fid) == split]
    if not ids:
        raise UsageError(f"no frames tagged {split!r} in {index.root}")
    return ids


def _jobs(args) -> int:
    n = _layered(args, "jobs", 0) or os.cpu_count() or 1
    return max(1, int(n))


# --- synth -------------------------------------------------------------------


def cmd_synth(args) -> int:
    _load_config(args)
    if args.out is None:
        raise UsageError("--out is required")
    seed = int(_layered(args, "seed", _env_seed()))

    if args.groups:
        grouping = zsplit.ClassGrouping.from_json(args.groups)
        split = zsplit.stratified_split(grouping, int(_layered(args, "split_seed", seed)))
        seen, unseen = tuple(split.seen), tuple(split.unseen)
    else:
        seen = tuple((_layered(args, "seen", "box,cylinder,sphere,wedge")).split(","))
        unseen = tuple((_layered(args, "unseen", "ring,lbracket")).split(","))

    size = _layered(args, "size", 256)
    objects = _layered(args, "objects", "5,25")
    lo, hi = (int(v) for v in str(objects).split(","))
    try:
        spec = synthgen.SceneSpec(
            seed=seed,
            object_count=(lo, hi),
            image_size=(int(size), int(size)),
            seen_families=seen,
            unseen_families=unseen,
            depth_noise_sigma=float(_layered(args, "noise_sigma", 0.002)),
            depth_dropout=float(_layered(args, "depth_dropout", 0.01)),
            rgb_texture_amplitude=float(_layered(args, "texture", 0.035)),
        )
    except ValueError as exc:
        raise UsageError(str(exc))
    index = synthgen.generate_benchmark(
        spec, int(_layered(args, "train", 200)), int(_layered(args, "test", 50)), args.out
    )
    tags = list(index.split_tags.values())
    print(
        f"wrote {len(index.frame_ids)} frames to {index.root} "
        f"({tags.count('train')} train / {tags.count('test')} test), "
        f"seen={sorted(seen)} unseen={sorted(unseen)}"
    )
    return 0


# --- preprocess ---------------------------------------------------------------


def _preprocess_one(task) -> str:
    root, fid, patches = task
    index = imagery.scan_dataset(root)
    frame = imagery.load_frame(index, fid)
    config = pipeline.PipelineConfig(slic=SlicConfig(target_patch_count=patches))
    pack = pipeline.preprocess(frame, config)
    save_superpixel_map(pack.spx, root, fid)
    return fid


def cmd_preprocess(args) -> int:
    _load_config(args)
    patches = int(_layered(args, "patches", 128))
    if patches not in (32, 64, 128, 256):
        raise UsageError(f"--patches must be one of 32/64/128/256, got {patches}")
    index = imagery.scan_dataset(args.data)
    frame_ids = _split_frames(index, _layered(args, "split", "all"))
    tasks = [(str(index.root), fid, patches) for fid in frame_ids]
    jobs = _jobs(args)
    if jobs > 1 and len(tasks) > 1:
        with Pool(jobs) as pool:
            for fid in pool.imap_unordered(_preprocess_one, tasks):
                pass
    else:
        for task in tasks:
            _preprocess_one(task)
    print(f"preprocessed {len(tasks)} frames at {patches} patches per modality")
    return 0


# --- train ---------------------------------------------------------------------


def _load_pack(index, fid, features):
    frame = imagery.load_frame(index, fid)
    spx = load_superpixel_map(index.root, fid)
    sidecar = None
    if "implicit" in features:
        entry = index.entries[fid]
        if entry.sidecar_path is None:
            raise UsageError(
                f"frame {fid!r}: implicit features requested but no .spxf sidecar exists"
            )
        sidecar = read_sidecar(entry.sidecar_path)
    config = pipeline.PipelineConfig(features=features)
    return pipeline.preprocess(frame, config, sidecar=sidecar, spx=spx)


def cmd_train(args) -> int:
    _load_config(args)
    features = _parse_features(_layered(args, "features", None))
    index = imagery.scan_dataset(args.data)
    frame_ids = _split_frames(index, "train")
    missing = [fid for fid in frame_ids if not (index.root / f"{fid}_spx.png").exists()]
    if missing:
        raise UsageError(
            f"{len(missing)} train frames lack superpixel maps (run `supergbd preprocess` first)"
        )
    config = tinynet.TrainConfig(
        epochs=int(_layered(args, "epochs", 10)),
        learning_rate=float(_layered(args, "lr", 1e-3)),
        lr_step_epochs=int(_layered(args, "lr_step", 3)),
        lr_decay=float(_layered(args, "lr_decay", 0.5)),
        batch_size=int(_layered(args, "batch", 256)),
        target_positive_fraction=_parse_pn_ratio(_layered(args, "pn_ratio", None)),
        seed=int(_layered(args, "seed", _env_seed())),
        features=features,
        merge_threshold=float(_layered(args, "theta", 0.5)),
    )
    packs = [_load_pack(index, fid, features) for fid in frame_ids]
    model, log = tinynet.train(packs, config)

    out = Path(_layered(args, "out", index.root / "model.ckpt"))
    out.parent.mkdir(parents=True, exist_ok=True)
    sidecar_dim = packs[0].graph.features.implicit_dim if "implicit" in features else 0
    manifest = {
        "features": list(features),
        "implicit_dim": sidecar_dim,
        "train_config": {
            "epochs": config.epochs,
            "learning_rate": config.learning_rate,
            "lr_step_epochs": config.lr_step_epochs,
            "lr_decay": config.lr_decay,
            "batch_size": config.batch_size,
            "target_positive_fraction": config.target_positive_fraction,
            "seed": config.seed,
            "merge_threshold": config.merge_threshold,
        },
    }
    tinynet.write_checkpoint(model, out, manifest)
    clean_log = [
        {k: (None if isinstance(v, float) and v != v else v) for k, v in e.items()}
        for e in log
    ]
    Path(str(out) + ".log.json").write_text(json.dumps(clean_log, indent=2) + "\n")
    lines = [
        f"epoch {e['epoch']:>3}  lr {e['lr']:.6f}  loss {e['mean_loss']:.4f}  val F {e['val_overlap_f']:.2f}"
        for e in log
    ]
    Path(str(out) + ".log.txt").write_text("\n".join(lines) + "\n")
    best = max((e["val_overlap_f"] for e in log), default=float("nan"))
    print(f"trained {config.epochs} epochs on {len(packs)} frames; best val F {best:.2f}")
    print(f"checkpoint: {out} ({model.parameter_count()} parameters)")
    return 0


# --- infer ---------------------------------------------------------------------


def _infer_one(task) -> str:
    root, fid, ckpt_path, features, theta = task
    index = imagery.scan_dataset(root)
    model = tinynet.read_checkpoint(ckpt_path)
    frame = imagery.load_frame(index, fid)
    spx = None
    if (Path(root) / f"{fid}_spx.png").exists():
        spx = load_superpixel_map(root, fid)
    sidecar = None
    if "implicit" in features:
        sidecar = read_sidecar(index.entries[fid].sidecar_path)
    config = pipeline.PipelineConfig(features=tuple(features), merge_threshold=theta)
    pred = pipeline.infer(frame, model, config, sidecar=sidecar, spx=spx)
    pipeline.save_prediction(pred, root, fid, checkpoint_path=ckpt_path)
    return fid


def cmd_infer(args) -> int:
    _load_config(args)
    ckpt = Path(_layered(args, "checkpoint", ""))
    if not ckpt or not ckpt.exists():
        raise UsageError(f"--checkpoint {ckpt} does not exist")
    manifest = tinynet.read_checkpoint_manifest(ckpt) or {}
    features = tuple(manifest.get("features", ("rgb", "xyz", "normals")))
    requested = getattr(args, "features", None)
    if requested is not None and _parse_features(requested) != features:
        raise UsageError(
            f"--features {requested!r} conflicts with checkpoint features {list(features)}"
        )
    theta = float(_layered(args, "theta", manifest.get("train_config", {}).get("merge_threshold", 0.5)))
    if not 0.0 < theta < 1.0:
        raise UsageError("--theta must be in (0, 1)")

    index = imagery.scan_dataset(args.data)
    frame_ids = _split_frames(index, _layered(args, "split", "test"))
    if "implicit" in features:
        missing = [fid for fid in frame_ids if index.entries[fid].sidecar_path is None]
        if missing:
            raise UsageError(f"{len(missing)} frames lack .spxf sidecars for implicit features")
    tasks = [(str(index.root), fid, str(ckpt), features, theta) for fid in frame_ids]
    jobs = _jobs(args)
    if jobs > 1 and len(tasks) > 1:
        with Pool(jobs) as pool:
            for _ in pool.imap_unordered(_infer_one, tasks):
                pass
    else:
        for task in tasks:
            _infer_one(task)
    print(f"inferred {len(tasks)} frames at threshold {theta}")
    return 0


# --- eval ----------------------------------------------------------------------


def cmd_eval(args) -> int:
    _load_config(args)
    index = imagery.scan_dataset(args.data)
    frame_ids = _split_frames(index, _layered(args, "split", "test"))
    radius = _layered(args, "boundary_radius", None)
    evals = []
    for fid in frame_ids:
        frame = imagery.load_frame(index, fid)
        if frame.instance_gt is None:
            raise UsageError(f"frame {fid!r} has no instance ground truth")
        pred = pipeline.load_prediction_map(index.root, fid)
        evals.append(
            metrics.evaluate_frame(
                pred,
                frame.instance_gt,
                frame_id=fid,
                class_of_instance=frame.class_of_instance,
                boundary_radius=None if radius is None else int(radius),
            )
        )
    seen = index.meta.get("seen_families")
    unseen = index.meta.get("unseen_families")
    zsplit_meta = index.meta.get("zero_shot_split")
    if zsplit_meta:
        seen, unseen = zsplit_meta["seen"], zsplit_meta["unseen"]
    aggregation = "per_image" if getattr(args, "per_image", False) else "pooled"
    if aggregation == "per_image":
        seen = unseen = None
    report = metrics.zero_shot_aggregate(evals, seen, unseen, aggregation=aggregation)

    out_dir = Path(_layered(args, "out", index.root / "report"))
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "report.json").write_text(report.to_json() + "\n")
    (out_dir / "report.txt").write_text(report.to_table() + "\n")
    (out_dir / "report.csv").write_text(report.to_csv())
    viz.save_report_figures(report, out_dir)
    print(report.to_table())
    print(f"report written to {out_dir}")
    return 0


# --- viz -----------------------------------------------------------------------


def cmd_viz(args) -> int:
    _load_config(args)
    index = imagery.scan_dataset(args.data)
    frame_ids = _split_frames(index, _layered(args, "split", "test"))
    count = 0
    for fid in frame_ids:
        frame = imagery.load_frame(index, fid)
        pred = pipeline.load_prediction_map(index.root, fid)
        viz.save_overlay(frame.rgb, pred, index.root / f"{fid}_overlay.png")
        spx_labels = None
        if (index.root / f"{fid}_spx.png").exists():
            spx_labels = load_superpixel_map(index.root, fid).labels
        viz.save_panels(frame, pred, index.root / f"{fid}_panels.png", spx_labels=spx_labels)
        count += 1
    print(f"wrote overlays for {count} frames")
    return 0


# --- parser --------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="supergbd",
        description="zero-shot RGB-D instance segmentation toolchain",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="JSON file of option defaults (flags override)")
        p.add_argument("--seed", type=int, help="RNG seed (default: $SUPERGBD_SEED or 0)")

    p = sub.add_parser("synth", help="generate a synthetic RGB-D benchmark")
    common(p)
    p.add_argument("--out", help="output dataset directory")
    p.add_argument("--train", type=int, help="number of training frames (default 200)")
    p.add_argument("--test", type=int, help="number of test frames (default 50)")
    p.add_argument("--seen", help="comma-separated seen shape families")
    p.add_argument("--unseen", help="comma-separated unseen shape families")
    p.add_argument("--groups", help="JSON class grouping; stratified split picks seen/unseen")
    p.add_argument("--split-seed", dest="split_seed", type=int, help="seed for --groups splitting")
    p.add_argument("--size", type=int, help="square image size (default 256)")
    p.add_argument("--objects", help="object count range LO,HI (default 5,25)")
    p.add_argument("--noise-sigma", dest="noise_sigma", type=float, help="depth noise sigma")
    p.add_argument("--depth-dropout", dest="depth_dropout", type=float, help="depth dropout rate")
    p.add_argument("--texture", type=float, help="RGB texture amplitude")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("preprocess", help="write combined superpixel maps per frame")
    common(p)
    p.add_argument("--data", required=True, help="dataset root")
    p.add_argument("--patches", type=int, help="target patches per modality: 32/64/128/256")
    p.add_argument("--split", choices=("train", "test", "all"), help="frames to process")
    p.add_argument("--jobs", type=int, help="parallel workers (default: all cores)")
    p.set_defaults(func=cmd_preprocess)

    p = sub.add_parser("train", help="train the edge merger network")
    common(p)
    p.add_argument("--data", required=True, help="dataset root (preprocessed)")
    p.add_argument("--out", help="checkpoint path (default <data>/model.ckpt)")
    p.add_argument("--epochs", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--lr-step", dest="lr_step", type=int)
    p.add_argument("--lr-decay", dest="lr_decay", type=float)
    p.add_argument("--batch", type=int)
    p.add_argument("--pn-ratio", dest="pn_ratio", help="positive/negative ratio, e.g. 25/75 or natural")
    p.add_argument("--features", help="comma-separated blocks: rgb,xyz,normals,implicit")
    p.add_argument("--theta", type=float, help="merge threshold for validation inference")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("infer", help="segment frames with a trained checkpoint")
    common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--checkpoint", help="checkpoint path")
    p.add_argument("--theta", type=float, help="merge threshold (default: checkpoint setting)")
    p.add_argument("--split", choices=("train", "test", "all"))
    p.add_argument("--features", help="must match the checkpoint manifest")
    p.add_argument("--jobs", type=int)
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("eval", help="score predictions against ground truth")
    common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--split", choices=("train", "test", "all"))
    p.add_argument("--out", help="report directory (default <data>/report)")
    p.add_argument("--boundary-radius", dest="boundary_radius", type=int)
    p.add_argument("--per-image", dest="per_image", action="store_true",
                   help="average per-image scores instead of pooling over objects")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("viz", help="write boundary overlays and panel figures")
    common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--split", choices=("train", "test", "all"))
    p.set_defaults(func=cmd_viz)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # runtime failure convention
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
