"""Command-line entry point: ``marlin <command> ...``.

Every command writes ``report.json`` into its ``--out`` directory and echoes it
to stdout. Exit codes: 0 success, 2 usage, 3 invalid input, 4 training
diverged, 5 missing file / I/O, 1 anything else. ``MARLIN_LOG_LEVEL`` sets
log verbosity.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import os
import sys
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch

from .data import (
    ClipFormatError,
    ClipSpec,
    DatasetManifest,
    ManifestEntry,
    MotionParams,
    load_clip,
    read_manifest,
    synth_face_clip,
    write_clip,
    write_manifest,
)
from .masking import STRATEGIES, make_plan
from .model import checksum, load_checkpoint, save_checkpoint
from .tokenizer import TokenBatch, TokenGridSpec, patchify, token_region_labels, unpatchify
from .training import (
    TrainConfig,
    TrainingDiverged,
    adapt_downstream,
    derive_seed,
    evaluate,
    extract_features,
    few_shot_subset,
    load_head,
    pretrain,
    save_head,
)

log = logging.getLogger("marlin")

ABLATION_COLUMNS = (
    "setting", "mask_strategy", "mask_ratio", "seed", "final_recon", "train_size", "accuracy", "mean_auc",
)


@dataclass
class RunReport:
    command: str
    config_hash: str
    seed: int
    metrics: dict = field(default_factory=dict)
    artifacts: dict = field(default_factory=dict)
    config: dict = field(default_factory=dict)
    wall_clock: float = 0.0

    def write(self, out_dir: Path) -> Path:
        out_dir.mkdir(parents=True, exist_ok=True)
        path = out_dir / "report.json"
        path.write_text(json.dumps(asdict(self), indent=2, sort_keys=True, default=_jsonable) + "\n")
        return path


def _jsonable(obj):
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.floating,)):
        return float(obj)
    if isinstance(obj, Path):
        return str(obj)
    raise TypeError(f"not JSON serialisable: {type(obj)}")


def config_hash(config: dict) -> str:
    canon = json.dumps(config, sort_keys=True, separators=(",", ":"), default=_jsonable)
    return hashlib.sha256(canon.encode()).hexdigest()


def _report(command: str, seed: int, config: dict, t0: float, metrics=None, artifacts=None) -> RunReport:
    return RunReport(
        command=command,
        config_hash=config_hash(config),
        seed=int(seed),
        metrics=metrics or {},
        artifacts={k: str(v) for k, v in (artifacts or {}).items()},
        config=config,
        wall_clock=round(time.time() - t0, 3),
    )


# --------------------------------------------------------------------------
# commands (also usable from Python)
# --------------------------------------------------------------------------


def cmd_synth(count: int, spec: ClipSpec, out_dir, seed: int = 0, labeled: bool = False,
              motion: MotionParams = MotionParams()) -> RunReport:
    """Write ``count`` synthetic clips plus ``manifest.jsonl``.

    Labeled mode alternates the mouth-open flag (even index closed, odd open)
    and records it as a one-hot ``[closed, open]`` label.
    """
    t0 = time.time()
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    entries = []
    for i in range(count):
        mouth_open = bool(i % 2) if labeled else motion.mouth_open
        clip = synth_face_clip(derive_seed(seed, i), spec, MotionParams(**{**asdict(motion), "mouth_open": mouth_open}))
        clip.clip_id = f"clip_{i:05d}"
        name = f"{clip.clip_id}.mclip"
        write_clip(clip, out / name)
        entries.append(ManifestEntry(name, [float(not mouth_open), float(mouth_open)] if labeled else None))
    manifest = DatasetManifest(entries, task="multiclass" if labeled else None, root=out)
    write_manifest(manifest, out / "manifest.jsonl")
    config = {"count": count, "spec": asdict(spec), "labeled": labeled, "motion": asdict(motion)}
    report = _report("synth", seed, config, t0, {"clips": count}, {"manifest": out / "manifest.jsonl"})
    report.write(out)
    return report


def cmd_mask(clip_path, strategy: str, ratio: float, seed: int, out_dir, cube=(2, 16, 16),
             preview: bool = True) -> RunReport:
    """Serialise a mask plan for one clip; the preview zeroes masked cubes."""
    t0 = time.time()
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    clip = load_clip(clip_path)
    grid = TokenGridSpec.for_shape(clip.shape, cube)
    labels = token_region_labels(clip.segmap, grid)
    plan = make_plan(strategy, grid, ratio, seed, labels)
    (out / "plan.json").write_text(plan.to_json() + "\n")
    artifacts = {"plan": out / "plan.json"}
    if preview:
        tokens = patchify(clip, grid).values.copy()
        tokens[plan.masked] = 0.0
        clip.pixels = unpatchify(TokenBatch(tokens, grid))
        write_clip(clip, out / "preview.mclip")
        artifacts["preview"] = out / "preview.mclip"
    config = {"clip": str(clip_path), "strategy": strategy, "ratio": ratio, "cube": list(cube)}
    metrics = {"k": plan.k, "n": plan.n, "label_histogram": plan.label_histogram()}
    report = _report("mask", seed, config, t0, metrics, artifacts)
    report.write(out)
    return report


def cmd_pretrain(config: TrainConfig, out_dir) -> RunReport:
    t0 = time.time()
    out = Path(out_dir)
    if config.manifest is None:
        raise ValueError("config has no 'manifest' to pre-train on")
    manifest = read_manifest(config.manifest)
    ckpt = pretrain(manifest, config, out)
    metrics = {
        "steps": ckpt.step,
        "initial_recon": ckpt.reports[0].recon if ckpt.reports else None,
        "final_recon": ckpt.reports[-1].recon if ckpt.reports else None,
        "encoder_checksum": checksum(ckpt.model.encoder),
    }
    report = _report(
        "pretrain", config.seed, config.to_dict(), t0, metrics, {"checkpoint": ckpt.path, "log": ckpt.log_path}
    )
    report.write(out)
    return report


def cmd_features(checkpoint, manifest_path, out_dir, stride: int = 2, window_stride: int | None = None) -> RunReport:
    """One ``<clip_id>.npy`` (num_windows x embed_dim) per clip plus ``features.json`` index."""
    t0 = time.time()
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    model, meta = load_checkpoint(checkpoint)
    manifest = read_manifest(manifest_path)
    index = []
    for i, entry in enumerate(manifest.entries):
        clip = manifest.load(i)
        feats = extract_features(clip, model, stride, window_stride).numpy()
        name = f"{Path(entry.path).stem}.npy"
        np.save(out / name, feats)
        index.append({"path": entry.path, "features": name, "windows": int(feats.shape[0])})
    (out / "features.json").write_text(json.dumps(index, indent=2) + "\n")
    config = {"checkpoint": str(checkpoint), "manifest": str(manifest_path), "stride": stride,
              "window_stride": window_stride}
    report = _report("features", meta.get("seed", 0), config, t0,
                     {"clips": len(index), "embed_dim": model.config.embed_dim}, {"index": out / "features.json"})
    report.write(out)
    return report


def _probe(checkpoint, train_manifest: DatasetManifest, test_manifest: DatasetManifest, mode: str,
           fraction: float, config: TrainConfig, out: Path):
    model, meta = load_checkpoint(checkpoint)
    down = config.downstream_config().replace(model=model.config)
    subset = few_shot_subset(train_manifest, fraction, config.seed) if fraction < 1.0 else train_manifest
    before = checksum(model.encoder)
    result = adapt_downstream(subset, mode, model, down)
    encoder = result.model or model
    metrics = evaluate(result.head, encoder, test_manifest, down.temporal_stride)
    metrics.update(
        {
            "mode": mode.upper(),
            "fraction": fraction,
            "train_size": result.train_size,
            "full_train_size": len(train_manifest),
            "encoder_changed": checksum(encoder.encoder) != before,
            "final_loss": result.losses[-1] if result.losses else None,
        }
    )
    artifacts = {"head": save_head(out / "head", result.head, {"mode": mode.upper()})}
    if result.model is not None:
        artifacts["encoder"] = save_checkpoint(out / "encoder", result.model, seed=config.seed)
    return metrics, artifacts


def cmd_probe(checkpoint, manifest_train, manifest_test, mode: str, fraction: float, config: TrainConfig,
              out_dir) -> RunReport:
    t0 = time.time()
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    metrics, artifacts = _probe(
        checkpoint, read_manifest(manifest_train), read_manifest(manifest_test), mode, fraction, config, out
    )
    cfg = {"checkpoint": str(checkpoint), "train": str(manifest_train), "test": str(manifest_test), "mode": mode,
           "fraction": fraction, "train_config": config.to_dict()}
    report = _report("probe", config.seed, cfg, t0, metrics, artifacts)
    report.write(out)
    return report


def cmd_eval(checkpoint, head_path, manifest_test, out_dir, stride: int = 2) -> RunReport:
    t0 = time.time()
    out = Path(out_dir)
    model, meta = load_checkpoint(checkpoint)
    head, _ = load_head(head_path)
    metrics = evaluate(head, model, read_manifest(manifest_test), stride)
    cfg = {"checkpoint": str(checkpoint), "head": str(head_path), "test": str(manifest_test), "stride": stride}
    report = _report("eval", meta.get("seed", 0), cfg, t0, metrics)
    report.write(out)
    return report


def _ablate(command: str, config: TrainConfig, settings: list[tuple[str, TrainConfig]], out_dir,
            mode: str = "lp") -> RunReport:
    """Pre-train and probe once per setting with the shared seed; CSV rows are flushed as settings finish."""
    t0 = time.time()
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for name in ("manifest", "probe_train", "probe_test"):
        if getattr(config, name) is None:
            raise ValueError(f"ablation config needs '{name}'")
    manifest = read_manifest(config.manifest)
    train_m, test_m = read_manifest(config.probe_train), read_manifest(config.probe_test)
    csv_path = out / f"{command}.csv"
    rows = []
    with open(csv_path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(ABLATION_COLUMNS)
        fh.flush()
        for name, cfg in settings:
            run_dir = out / name
            ckpt = pretrain(manifest, cfg, run_dir)
            metrics, _ = _probe(ckpt.path, train_m, test_m, mode, 1.0, cfg, run_dir)
            row = [name, cfg.mask_strategy, cfg.mask_ratio, cfg.seed, ckpt.reports[-1].recon,
                   metrics["train_size"], metrics["accuracy"], metrics["mean_auc"]]
            writer.writerow(row)
            fh.flush()
            rows.append(dict(zip(ABLATION_COLUMNS, row)))
    report = _report(command, config.seed, {"base": config.to_dict(), "settings": [n for n, _ in settings]}, t0,
                     {"rows": rows, "seeds": sorted({r["seed"] for r in rows})}, {"csv": csv_path})
    report.write(out)
    return report


def cmd_ablate_ratio(config: TrainConfig, ratios, out_dir, mode: str = "lp") -> RunReport:
    settings = [(f"ratio_{r:.2f}", config.replace(mask_ratio=float(r))) for r in ratios]
    return _ablate("ablate_ratio", config, settings, out_dir, mode)


def cmd_ablate_strategy(config: TrainConfig, strategies, out_dir, mode: str = "lp") -> RunReport:
    for s in strategies:
        if s not in STRATEGIES:
            raise ValueError(f"unknown strategy {s!r}; choose from {STRATEGIES}")
    settings = [(f"strategy_{s}", config.replace(mask_strategy=s)) for s in strategies]
    return _ablate("ablate_strategy", config, settings, out_dir, mode)


# --------------------------------------------------------------------------
# argument parsing
# --------------------------------------------------------------------------


def _floats(text: str) -> list[float]:
    return [float(x) for x in text.split(",") if x.strip()]


def _load_config(args) -> TrainConfig:
    cfg = TrainConfig.from_json(args.config) if getattr(args, "config", None) else TrainConfig()
    if getattr(args, "seed", None) is not None:
        cfg = cfg.replace(seed=args.seed)
    if getattr(args, "strategy", None) is not None:
        cfg = cfg.replace(mask_strategy=args.strategy)
    if getattr(args, "ratio", None) is not None:
        cfg = cfg.replace(mask_ratio=args.ratio)
    return cfg


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="marlin", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="write a synthetic face-clip corpus")
    p.add_argument("--count", type=int, required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--frames", type=int, default=8)
    p.add_argument("--height", type=int, default=32)
    p.add_argument("--width", type=int, default=32)
    p.add_argument("--channels", type=int, default=3)
    p.add_argument("--labeled", action="store_true", help="alternate the mouth-open flag and record labels")
    p.add_argument("--static", action="store_true", help="no motion")

    p = sub.add_parser("mask", help="compute a mask plan for one clip")
    p.add_argument("clip")
    p.add_argument("--strategy", choices=STRATEGIES, default="fasking")
    p.add_argument("--ratio", type=float, default=0.9)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--cube", type=int, nargs=3, default=[2, 16, 16], metavar=("T", "H", "W"))
    p.add_argument("--no-preview", action="store_true")

    p = sub.add_parser("pretrain", help="adversarial masked pre-training")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--strategy", choices=STRATEGIES)
    p.add_argument("--ratio", type=float)

    p = sub.add_parser("features", help="sliding-window feature extraction")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--stride", type=int, default=2)
    p.add_argument("--window-stride", type=int)

    p = sub.add_parser("probe", help="linear probing or fine-tuning on a labeled manifest")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--train", required=True)
    p.add_argument("--test", required=True)
    p.add_argument("--mode", choices=("lp", "ft"), default="lp")
    p.add_argument("--fraction", type=float, default=1.0)
    p.add_argument("--config")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", required=True)

    p = sub.add_parser("eval", help="evaluate a trained head")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--head", required=True)
    p.add_argument("--test", required=True)
    p.add_argument("--stride", type=int, default=2)
    p.add_argument("--out", required=True)

    p = sub.add_parser("ablate-ratio", help="pre-train + probe per masking ratio, CSV out")
    p.add_argument("--config", required=True)
    p.add_argument("--ratios", type=_floats, default=[0.3, 0.6, 0.9])
    p.add_argument("--mode", choices=("lp", "ft"), default="lp")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", required=True)

    p = sub.add_parser("ablate-strategy", help="pre-train + probe per masking strategy, CSV out")
    p.add_argument("--config", required=True)
    p.add_argument("--strategies", type=lambda s: [x for x in s.split(",") if x], default=list(STRATEGIES))
    p.add_argument("--mode", choices=("lp", "ft"), default="lp")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", required=True)
    return parser


def run(args) -> RunReport:
    if args.command == "synth":
        spec = ClipSpec(args.channels, args.frames, args.height, args.width)
        motion = MotionParams.static() if args.static else MotionParams()
        return cmd_synth(args.count, spec, args.out, args.seed, args.labeled, motion)
    if args.command == "mask":
        return cmd_mask(args.clip, args.strategy, args.ratio, args.seed, args.out, tuple(args.cube),
                        not args.no_preview)
    if args.command == "pretrain":
        return cmd_pretrain(_load_config(args), args.out)
    if args.command == "features":
        return cmd_features(args.checkpoint, args.manifest, args.out, args.stride, args.window_stride)
    if args.command == "probe":
        return cmd_probe(args.checkpoint, args.train, args.test, args.mode, args.fraction, _load_config(args),
                         args.out)
    if args.command == "eval":
        return cmd_eval(args.checkpoint, args.head, args.test, args.out, args.stride)
    if args.command == "ablate-ratio":
        return cmd_ablate_ratio(_load_config(args), args.ratios, args.out, args.mode)
    if args.command == "ablate-strategy":
        return cmd_ablate_strategy(_load_config(args), args.strategies, args.out, args.mode)
    raise ValueError(f"unknown command {args.command!r}")


def main(argv=None) -> int:
    logging.basicConfig(level=os.environ.get("MARLIN_LOG_LEVEL", "WARNING").upper(),
                        format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    torch.set_num_threads(max(1, torch.get_num_threads()))
    try:
        report = run(args)
    except TrainingDiverged as exc:
        log.error("%s", exc)
        return 4
    except FileNotFoundError as exc:
        log.error("%s", exc)
        return 5
    except (ClipFormatError, ValueError) as exc:
        log.error("%s", exc)
        return 3
    except OSError as exc:
        log.error("%s", exc)
        return 5
    print(json.dumps(asdict(report), indent=2, sort_keys=True, default=_jsonable))
    return 0


if __name__ == "__main__":
    sys.exit(main())
