"""Adversarial masked pre-training, downstream adaptation and evaluation."""

from __future__ import annotations

import copy
import csv
import json
import logging
import math
import os
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from scipy.stats import rankdata

from .data import ClipSpec, DatasetManifest, VideoClip, sample_clip
from .losses import LossReport, combine, disc_loss, gen_adv_loss, recon_loss
from .masking import STRATEGIES, make_plan
from .model import (
    Marlin,
    ModelConfig,
    encode_all,
    forward_reconstruct,
    init_params,
    load_tensors,
    save_checkpoint,
    save_tensors,
)
from .tokenizer import patchify, token_region_labels

log = logging.getLogger(__name__)

LOG_COLUMNS = ("epoch", "step", "recon", "adv_g", "adv_d", "total_g", "total_d", "lr")

_DOWNSTREAM_DEFAULTS = dict(
    base_lr=1e-4, beta1=0.5, beta2=0.9, weight_decay=0.0, batch_size=16, epochs=50, schedule="cosine"
)


class TrainingDiverged(RuntimeError):
    """A loss went non-finite; ``dump_path`` holds the parameters at that point."""

    def __init__(self, message, dump_path=None):
        super().__init__(message)
        self.dump_path = dump_path


@dataclass
class TrainConfig:
    base_lr: float = 1.5e-4
    batch_size: int = 8
    beta1: float = 0.9
    beta2: float = 0.95
    weight_decay: float = 0.05
    schedule: str = "cosine"
    epochs: int = 1
    lambda_w: float = 0.1
    mask_ratio: float = 0.9
    mask_strategy: str = "fasking"
    clip_value: float = 0.01
    seed: int = 0
    temporal_stride: int = 2
    checkpoint_every: int = 1
    model: ModelConfig = field(default_factory=lambda: ModelConfig.preset("tiny"))
    # data locations, used by the CLI
    manifest: str | None = None
    probe_train: str | None = None
    probe_test: str | None = None
    # overrides applied on top of the downstream defaults (Adam 0.5/0.9, lr 1e-4, no weight decay)
    downstream: dict = field(default_factory=dict)

    def __post_init__(self):
        if isinstance(self.model, dict):
            self.model = ModelConfig.from_dict(self.model)
        if self.schedule not in ("cosine", "constant"):
            raise ValueError(f"schedule must be 'cosine' or 'constant', got {self.schedule!r}")
        if self.mask_strategy not in STRATEGIES:
            raise ValueError(f"unknown mask_strategy {self.mask_strategy!r}")
        if self.batch_size < 1 or self.epochs < 0:
            raise ValueError("batch_size must be >= 1 and epochs >= 0")
        if not 0.0 <= self.mask_ratio <= 1.0:
            raise ValueError(f"mask_ratio must lie in [0, 1], got {self.mask_ratio}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["model"] = self.model.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> TrainConfig:
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown TrainConfig fields: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def from_json(cls, path: str | os.PathLike) -> TrainConfig:
        path = Path(path)
        cfg = cls.from_dict(json.loads(path.read_text()))
        for name in ("manifest", "probe_train", "probe_test"):
            value = getattr(cfg, name)
            if value is not None and not Path(value).is_absolute():
                setattr(cfg, name, str(path.parent / value))
        return cfg

    def replace(self, **kw) -> TrainConfig:
        return replace(self, **kw)

    def downstream_config(self) -> TrainConfig:
        return self.replace(**{**_DOWNSTREAM_DEFAULTS, **self.downstream})

    @property
    def clip_spec(self) -> ClipSpec:
        m = self.model
        return ClipSpec(m.channels, m.frames, m.height, m.width, self.temporal_stride)


def lr_at(step: int, total_steps: int, config: TrainConfig) -> float:
    """Linearly scaled base lr (``base_lr * batch_size / 256``), cosine-decayed to 0 at ``total_steps``."""
    if step > total_steps:
        raise ValueError(f"step {step} beyond total_steps {total_steps}")
    peak = config.base_lr * config.batch_size / 256
    if config.schedule == "constant" or total_steps == 0:
        return peak
    return peak * 0.5 * (1.0 + math.cos(math.pi * step / total_steps))


def derive_seed(*parts: int) -> int:
    return int(np.random.SeedSequence([int(p) for p in parts]).generate_state(1)[0])


# --------------------------------------------------------------------------
# pre-training
# --------------------------------------------------------------------------


@dataclass
class PretrainState:
    model: Marlin
    opt_g: torch.optim.Optimizer
    opt_d: torch.optim.Optimizer
    total_steps: int
    step: int = 0


def _decay_groups(named_params, weight_decay: float) -> list[dict]:
    # biases, norm gains, positional embeddings and the mask token are not decayed
    decay, no_decay = [], []
    for name, p in named_params:
        if p.ndim <= 1 or name.endswith(("pos_embed", "mask_token")):
            no_decay.append(p)
        else:
            decay.append(p)
    return [{"params": decay, "weight_decay": weight_decay}, {"params": no_decay, "weight_decay": 0.0}]


def make_state(model: Marlin, config: TrainConfig, total_steps: int) -> PretrainState:
    betas = (config.beta1, config.beta2)
    lr = lr_at(0, total_steps, config)
    gen_named = [*model.encoder.named_parameters("encoder"), *model.decoder.named_parameters("decoder")]
    opt_g = torch.optim.AdamW(_decay_groups(gen_named, config.weight_decay), lr=lr, betas=betas)
    opt_d = torch.optim.AdamW(
        _decay_groups(model.discriminator.named_parameters("discriminator"), config.weight_decay), lr=lr, betas=betas
    )
    return PretrainState(model, opt_g, opt_d, total_steps)


def build_batch(clips: list[VideoClip], config: TrainConfig, step: int):
    """Tokenise clips and draw one mask plan per clip; plans are seeded by (seed, step, index)."""
    grid = config.model.grid
    tokens, plans = [], []
    for i, clip in enumerate(clips):
        tokens.append(patchify(clip, grid).values)
        labels = token_region_labels(clip.segmap, grid) if config.mask_strategy == "fasking" else None
        plans.append(
            make_plan(config.mask_strategy, grid, config.mask_ratio, derive_seed(config.seed, step, i), labels)
        )
    return torch.from_numpy(np.stack(tokens)), plans


def _set_lr(opt, lr):
    for group in opt.param_groups:
        group["lr"] = lr


def _finite_or_raise(value: float, what: str, state: PretrainState, dump_dir):
    if math.isfinite(value):
        return
    dump = None
    if dump_dir is not None:
        dump = save_checkpoint(Path(dump_dir) / "diverged", state.model, step=state.step)
    raise TrainingDiverged(f"non-finite {what} ({value}) at step {state.step}; state dumped to {dump}", dump)


def pretrain_step(clips: list[VideoClip], state: PretrainState, config: TrainConfig, dump_dir=None) -> LossReport:
    """One critic update followed by one encoder/decoder update on the same mask plans."""
    if not clips:
        raise ValueError("empty batch")
    model = state.model
    tokens, plans = build_batch(clips, config, state.step)
    N, n = len(plans), plans[0].n
    lr = lr_at(state.step, state.total_steps, config)
    _set_lr(state.opt_g, lr)
    _set_lr(state.opt_d, lr)

    # phase 1: critic only
    with torch.no_grad():
        pred, target = forward_reconstruct(tokens, plans, model)
    if n > 0:
        loss_d = disc_loss(model.discriminator(target), model.discriminator(pred), N, n)
        _finite_or_raise(loss_d.item(), "critic loss", state, dump_dir)
        state.opt_d.zero_grad(set_to_none=True)
        loss_d.backward()
        state.opt_d.step()
        with torch.no_grad():
            for p in model.discriminator.parameters():
                p.clamp_(-config.clip_value, config.clip_value)
        adv_d = loss_d.item()
    else:
        adv_d = 0.0

    # phase 2: encoder + decoder, fresh forward
    if n > 0:
        pred, target = forward_reconstruct(tokens, plans, model)
        recon = recon_loss(target, pred)
        adv_g = gen_adv_loss(model.discriminator(pred), N, n)
        total = recon + config.lambda_w * adv_g
        _finite_or_raise(total.item(), "generator loss", state, dump_dir)
        state.opt_g.zero_grad(set_to_none=True)
        total.backward()
        state.opt_g.step()
        model.discriminator.zero_grad(set_to_none=True)
        report = combine(recon.item(), adv_g.item(), adv_d, config.lambda_w)
    else:
        report = combine(0.0, 0.0, adv_d, config.lambda_w)
    state.step += 1
    return report


@dataclass
class Checkpoint:
    path: Path
    model: Marlin
    step: int
    log_path: Path | None = None
    reports: list[LossReport] = field(default_factory=list)


def _load_all(manifest: DatasetManifest) -> list[VideoClip]:
    return [manifest.load(i) for i in range(len(manifest))]


def pretrain(manifest: DatasetManifest, config: TrainConfig, checkpoint_dir: str | os.PathLike,
             clips: list[VideoClip] | None = None) -> Checkpoint:
    """Run ``config.epochs`` epochs over shuffled batches; checkpoints and a CSV loss log go to ``checkpoint_dir``."""
    out = Path(checkpoint_dir)
    out.mkdir(parents=True, exist_ok=True)
    clips = _load_all(manifest) if clips is None else clips
    if not clips:
        raise ValueError("pre-training manifest is empty")
    spec = config.clip_spec
    model = init_params(config.model, config.seed)
    steps_per_epoch = math.ceil(len(clips) / config.batch_size)
    state = make_state(model, config, config.epochs * steps_per_epoch)
    log_path = out / "train_log.csv"
    reports = []
    meta = {"train_config": config.to_dict()}
    with open(log_path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(LOG_COLUMNS)
        for epoch in range(config.epochs):
            order = np.random.default_rng([config.seed, epoch]).permutation(len(clips))
            for b in range(steps_per_epoch):
                idx = order[b * config.batch_size : (b + 1) * config.batch_size]
                batch = [
                    sample_clip(clips[j], spec, np.random.default_rng([config.seed, state.step, int(j)]))
                    for j in idx
                ]
                lr = lr_at(state.step, state.total_steps, config)
                report = pretrain_step(batch, state, config, dump_dir=out)
                reports.append(report)
                writer.writerow(
                    [epoch, state.step - 1]
                    + [repr(getattr(report, c)) for c in LOG_COLUMNS[2:7]]
                    + [repr(lr)]
                )
            fh.flush()
            log.info("epoch %d step %d recon %.5f", epoch, state.step, reports[-1].recon if reports else float("nan"))
            if config.checkpoint_every and (epoch + 1) % config.checkpoint_every == 0:
                save_checkpoint(out / f"epoch_{epoch + 1:04d}", model, step=state.step, seed=config.seed, extra=meta)
    final = save_checkpoint(out / "final", model, step=state.step, seed=config.seed, extra=meta)
    return Checkpoint(final, model, state.step, log_path, reports)


# --------------------------------------------------------------------------
# features and downstream adaptation
# --------------------------------------------------------------------------


def window_starts(num_frames: int, frames: int, stride: int, window_stride: int | None = None) -> list[int]:
    span = frames * stride
    if num_frames < span:
        raise ValueError(f"input too short: {num_frames} frames < {frames}*{stride}")
    return list(range(0, num_frames - span + 1, window_stride or span))


def _window_tokens(clip: VideoClip, model: Marlin, stride: int, window_stride: int | None) -> torch.Tensor:
    cfg = model.config
    spec = ClipSpec(cfg.channels, cfg.frames, cfg.height, cfg.width, stride)
    starts = window_starts(clip.num_frames, cfg.frames, stride, window_stride)
    toks = [patchify(sample_clip(clip, spec, start=s), cfg.grid).values for s in starts]
    return torch.from_numpy(np.stack(toks))


def extract_features(clip: VideoClip, model: Marlin, stride: int = 2, window_stride: int | None = None) -> torch.Tensor:
    """One mean-pooled encoder feature per sliding temporal window, shape (num_windows, embed_dim).

    Windows span ``frames * stride`` source frames and advance by
    ``window_stride`` frames (default: one full span).
    """
    with torch.no_grad():
        return encode_all(_window_tokens(clip, model, stride, window_stride), model).mean(dim=1)


def pooled_features(clips: list[VideoClip], model: Marlin, stride: int = 2, window_stride: int | None = None,
                    grad: bool = False) -> torch.Tensor:
    """Mean over windows of per-window features, one row per clip."""
    windows = [_window_tokens(c, model, stride, window_stride) for c in clips]
    counts = [w.shape[0] for w in windows]
    with torch.set_grad_enabled(grad):
        z = encode_all(torch.cat(windows), model).mean(dim=1)
        return torch.stack([chunk.mean(dim=0) for chunk in torch.split(z, counts)])


class DownstreamHead(nn.Module):
    """Linear head over standardised features; the standardisation statistics are fixed buffers."""

    def __init__(self, embed_dim: int, num_outputs: int, task: str = "multiclass"):
        super().__init__()
        if task not in ("multiclass", "multilabel"):
            raise ValueError(f"unknown task {task!r}")
        self.task = task
        self.register_buffer("feature_mean", torch.zeros(embed_dim))
        self.register_buffer("feature_std", torch.ones(embed_dim))
        self.fc = nn.Linear(embed_dim, num_outputs)

    def forward(self, features):
        return self.fc((features - self.feature_mean) / self.feature_std)

    def probabilities(self, features):
        logits = self(features)
        return logits.softmax(-1) if self.task == "multiclass" else torch.sigmoid(logits)

    def loss(self, logits, labels):
        if self.task == "multiclass":
            return F.cross_entropy(logits, labels.argmax(-1))
        return F.binary_cross_entropy_with_logits(logits, labels)


def save_head(path, head: DownstreamHead, extra: dict | None = None) -> Path:
    meta = {"kind": "head", "task": head.task, "embed_dim": head.fc.in_features, "num_outputs": head.fc.out_features}
    meta.update(extra or {})
    return save_tensors(path, head.state_dict(), meta)


def load_head(path) -> tuple[DownstreamHead, dict]:
    tensors, meta = load_tensors(path)
    head = DownstreamHead(meta["embed_dim"], meta["num_outputs"], meta["task"])
    head.load_state_dict(tensors)
    return head, meta


@dataclass
class Adaptation:
    head: DownstreamHead
    model: Marlin | None  # updated encoder for FT, None for LP
    losses: list[float]
    train_size: int


def adapt_downstream(manifest: DatasetManifest, mode: str, model: Marlin, config: TrainConfig,
                     clips: list[VideoClip] | None = None) -> Adaptation:
    """Linear probing (``"LP"``, frozen encoder) or fine-tuning (``"FT"``, encoder + head).

    ``config`` is used as-is, so pass ``cfg.downstream_config()`` for the
    downstream optimiser settings. The input ``model`` is never modified; FT
    trains a copy.
    """
    mode = mode.upper()
    if mode not in ("LP", "FT"):
        raise ValueError(f"mode must be LP or FT, got {mode!r}")
    if not manifest.labeled or manifest.task is None:
        raise ValueError("downstream adaptation needs a labeled manifest with task metadata")
    if model.config.to_dict() != config.model.to_dict():
        raise ValueError("checkpoint model config does not match the training config")
    labels = torch.as_tensor(manifest.labels(), dtype=torch.float32)
    clips = _load_all(manifest) if clips is None else clips
    stride = config.temporal_stride

    encoder_model = copy.deepcopy(model) if mode == "FT" else model
    feats = pooled_features(clips, encoder_model, stride)
    head = DownstreamHead(model.config.embed_dim, labels.shape[1], manifest.task)
    gen = torch.Generator().manual_seed(config.seed)
    with torch.no_grad():
        head.feature_mean.copy_(feats.mean(0))
        head.feature_std.copy_(feats.std(0, unbiased=False).clamp_min(1e-6))
        nn.init.trunc_normal_(head.fc.weight, std=0.02, a=-0.04, b=0.04, generator=gen)
        head.fc.bias.zero_()

    params = list(head.parameters())
    if mode == "FT":
        params += list(encoder_model.encoder.parameters())
    opt = torch.optim.Adam(params, lr=0.0, betas=(config.beta1, config.beta2), weight_decay=config.weight_decay)
    N = len(clips)
    steps_per_epoch = math.ceil(N / config.batch_size)
    total = config.epochs * steps_per_epoch
    losses, step = [], 0
    for epoch in range(config.epochs):
        order = np.random.default_rng([config.seed, 7919, epoch]).permutation(N)
        for b in range(steps_per_epoch):
            idx = order[b * config.batch_size : (b + 1) * config.batch_size]
            _set_lr(opt, lr_at(step, total, config))
            if mode == "LP":
                x = feats[idx]
            else:
                x = pooled_features([clips[i] for i in idx], encoder_model, stride, grad=True)
            loss = head.loss(head(x), labels[idx])
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
            losses.append(loss.item())
            step += 1
    return Adaptation(head, encoder_model if mode == "FT" else None, losses, N)


def few_shot_subset(manifest: DatasetManifest, fraction: float, seed: int) -> DatasetManifest:
    """Stratified subsample keeping ``ceil(fraction * count)`` entries per class.

    Each class uses one seed-fixed permutation and keeps a prefix of it, so
    smaller fractions give subsets of larger ones under the same seed.
    """
    if not 0.0 < fraction <= 1.0:
        raise ValueError(f"fraction must lie in (0, 1], got {fraction}")
    labels = manifest.labels()
    if manifest.task == "multilabel":
        keys = [tuple(int(v) for v in row) for row in labels]
    else:
        keys = [int(i) for i in labels.argmax(axis=1)]
    keep = []
    for j, key in enumerate(sorted(set(keys))):
        members = np.flatnonzero([k == key for k in keys])
        take = math.ceil(fraction * len(members))
        assert take >= 1
        perm = np.random.default_rng([seed, j]).permutation(len(members))
        keep.extend(members[perm[:take]].tolist())
    return manifest.subset(sorted(keep))


def roc_auc(scores, labels) -> float | None:
    """Rank-statistic AUC (ties share the average rank); None when only one class is present."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels).astype(bool)
    pos, neg = int(labels.sum()), int((~labels).sum())
    if pos == 0 or neg == 0:
        return None
    ranks = rankdata(scores)
    return float((ranks[labels].sum() - pos * (pos + 1) / 2) / (pos * neg))


def classification_metrics(probs: np.ndarray, labels: np.ndarray, task: str) -> dict:
    probs = np.asarray(probs)
    labels = np.asarray(labels)
    if task == "multiclass":
        accuracy = float((probs.argmax(1) == labels.argmax(1)).mean())
    else:
        accuracy = float(((probs > 0.5) == (labels > 0.5)).mean())
    aucs = [roc_auc(probs[:, j], labels[:, j] > 0.5) for j in range(labels.shape[1])]
    defined = [a for a in aucs if a is not None]
    return {
        "accuracy": accuracy,
        "auc": aucs,
        "mean_auc": float(np.mean(defined)) if defined else None,
        "n": int(labels.shape[0]),
    }


def evaluate(head: DownstreamHead, model: Marlin, manifest: DatasetManifest, stride: int = 2,
             clips: list[VideoClip] | None = None) -> dict:
    if not manifest.labeled:
        raise ValueError("evaluation needs a labeled manifest")
    clips = _load_all(manifest) if clips is None else clips
    with torch.no_grad():
        probs = head.probabilities(pooled_features(clips, model, stride)).numpy()
    return classification_metrics(probs, manifest.labels(), head.task)
