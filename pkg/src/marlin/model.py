"""Masked video autoencoder: cube embedding, ViT encoder/decoder, per-token critic, checkpoints."""

from __future__ import annotations

import hashlib
import json
import math
import os
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .masking import MaskPlan
from .tokenizer import TokenBatch, TokenGridSpec

CHECKPOINT_VERSION = 1

_VARIANTS = {
    # embed_dim, depth, heads
    "tiny": dict(embed_dim=16, depth=1, heads=2, decoder_dim=8, decoder_depth=1, decoder_heads=2, disc_hidden=[16]),
    "vit_s": dict(embed_dim=384, depth=12, heads=6, decoder_dim=192, decoder_depth=4, decoder_heads=3),
    "vit_b": dict(embed_dim=768, depth=12, heads=12, decoder_dim=384, decoder_depth=4, decoder_heads=6),
    "vit_l": dict(embed_dim=1024, depth=24, heads=16, decoder_dim=512, decoder_depth=4, decoder_heads=8),
}


@dataclass
class ModelConfig:
    variant: str = "vit_b"
    channels: int = 3
    frames: int = 16
    height: int = 224
    width: int = 224
    cube: tuple[int, int, int] = (2, 16, 16)
    embed_dim: int = 768
    depth: int = 12
    heads: int = 12
    decoder_dim: int = 384
    decoder_depth: int = 4
    decoder_heads: int = 6
    mlp_ratio: float = 4.0
    disc_hidden: list[int] = field(default_factory=lambda: [256, 256])
    pos_embed: str = "learned"  # or "sinusoidal"

    def __post_init__(self):
        self.cube = tuple(self.cube)
        self.disc_hidden = list(self.disc_hidden)
        if self.embed_dim % self.heads:
            raise ValueError(f"embed_dim {self.embed_dim} not divisible by heads {self.heads}")
        if self.decoder_dim % self.decoder_heads:
            raise ValueError(f"decoder_dim {self.decoder_dim} not divisible by decoder_heads {self.decoder_heads}")
        if self.pos_embed not in ("learned", "sinusoidal"):
            raise ValueError(f"pos_embed must be 'learned' or 'sinusoidal', got {self.pos_embed!r}")
        self.grid  # validates divisibility

    @classmethod
    def preset(cls, variant: str, **overrides) -> ModelConfig:
        if variant not in _VARIANTS:
            raise ValueError(f"unknown variant {variant!r}; choose from {sorted(_VARIANTS)}")
        if variant == "tiny":
            geometry = dict(frames=4, height=32, width=32, cube=(2, 8, 8))
        else:
            geometry = {}
        return cls(variant=variant, **{**geometry, **_VARIANTS[variant], **overrides})

    @property
    def grid(self) -> TokenGridSpec:
        return TokenGridSpec(self.channels, self.frames, self.height, self.width, *self.cube)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["cube"] = list(self.cube)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> ModelConfig:
        return cls(**d)

    def replace(self, **kw) -> ModelConfig:
        return replace(self, **kw)


def sinusoid_table(positions: int, dim: int) -> torch.Tensor:
    pos = np.arange(positions)[:, None]
    i = np.arange(dim)[None, :]
    angle = pos / np.power(10000, 2 * (i // 2) / dim)
    table = np.where(i % 2 == 0, np.sin(angle), np.cos(angle))
    return torch.tensor(table, dtype=torch.float32)[None]


class Attention(nn.Module):
    def __init__(self, dim, heads):
        super().__init__()
        self.heads = heads
        self.qkv = nn.Linear(dim, 3 * dim)
        self.proj = nn.Linear(dim, dim)

    def forward(self, x):
        B, L, D = x.shape
        q, k, v = self.qkv(x).reshape(B, L, 3, self.heads, D // self.heads).permute(2, 0, 3, 1, 4)
        attn = (q @ k.transpose(-2, -1)) * (D // self.heads) ** -0.5
        out = attn.softmax(dim=-1) @ v
        return self.proj(out.transpose(1, 2).reshape(B, L, D))


class Mlp(nn.Module):
    def __init__(self, dim, hidden):
        super().__init__()
        self.fc1 = nn.Linear(dim, hidden)
        self.fc2 = nn.Linear(hidden, dim)

    def forward(self, x):
        return self.fc2(F.gelu(self.fc1(x)))


class Block(nn.Module):
    """Pre-norm transformer block."""

    def __init__(self, dim, heads, mlp_ratio):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.attn = Attention(dim, heads)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = Mlp(dim, int(dim * mlp_ratio))

    def forward(self, x):
        x = x + self.attn(self.norm1(x))
        return x + self.mlp(self.norm2(x))


class _Stack(nn.Module):
    # blocks registered as block0, block1, ... so checkpoint names read encoder.block0.attn.qkv.weight
    def _add_blocks(self, depth, dim, heads, mlp_ratio):
        self.depth = depth
        for i in range(depth):
            self.add_module(f"block{i}", Block(dim, heads, mlp_ratio))

    def _run_blocks(self, x):
        for i in range(self.depth):
            x = getattr(self, f"block{i}")(x)
        return x


class Encoder(_Stack):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        grid = cfg.grid
        self.patch_embed = nn.Linear(grid.e, cfg.embed_dim)
        if cfg.pos_embed == "learned":
            self.pos_embed = nn.Parameter(torch.zeros(1, grid.k, cfg.embed_dim))
        else:
            self.register_buffer("pos_embed", sinusoid_table(grid.k, cfg.embed_dim), persistent=False)
        self._add_blocks(cfg.depth, cfg.embed_dim, cfg.heads, cfg.mlp_ratio)
        self.norm = nn.LayerNorm(cfg.embed_dim)

    def forward(self, visible, positions):
        pos = self.pos_embed[0][positions]
        return self.norm(self._run_blocks(self.patch_embed(visible) + pos))


class Decoder(_Stack):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        grid = cfg.grid
        self.embed = nn.Linear(cfg.embed_dim, cfg.decoder_dim)
        self.mask_token = nn.Parameter(torch.zeros(1, 1, cfg.decoder_dim))
        if cfg.pos_embed == "learned":
            self.pos_embed = nn.Parameter(torch.zeros(1, grid.k, cfg.decoder_dim))
        else:
            self.register_buffer("pos_embed", sinusoid_table(grid.k, cfg.decoder_dim), persistent=False)
        self._add_blocks(cfg.decoder_depth, cfg.decoder_dim, cfg.decoder_heads, cfg.mlp_ratio)
        self.norm = nn.LayerNorm(cfg.decoder_dim)
        self.head = nn.Linear(cfg.decoder_dim, grid.e)

    def forward(self, z, visible_index, masked_index):
        B = z.shape[0]
        k = visible_index.shape[1] + masked_index.shape[1]
        D = self.mask_token.shape[-1]
        x = self.mask_token.expand(B, k, D).clone()
        x = x.scatter(1, visible_index[..., None].expand(-1, -1, D), self.embed(z))
        x = self._run_blocks(x + self.pos_embed)
        x = torch.gather(x, 1, masked_index[..., None].expand(-1, -1, D))
        return self.head(self.norm(x))


class Discriminator(nn.Module):
    """Per-token MLP critic e -> hidden... -> 1."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        widths = [cfg.grid.e, *cfg.disc_hidden, 1]
        self.num_layers = len(widths) - 1
        for i in range(self.num_layers):
            self.add_module(f"layer{i}", nn.Linear(widths[i], widths[i + 1]))

    def forward(self, x):
        for i in range(self.num_layers):
            x = getattr(self, f"layer{i}")(x)
            if i < self.num_layers - 1:
                x = F.gelu(x)
        return x[..., 0]


class Marlin(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.config = cfg
        self.encoder = Encoder(cfg)
        self.decoder = Decoder(cfg)
        self.discriminator = Discriminator(cfg)

    @property
    def grid(self) -> TokenGridSpec:
        return self.config.grid

    def parameter_sets(self) -> dict[str, list[nn.Parameter]]:
        return {
            "encoder": list(self.encoder.parameters()),
            "decoder": list(self.decoder.parameters()),
            "discriminator": list(self.discriminator.parameters()),
        }

    def generator_parameters(self):
        return [*self.encoder.parameters(), *self.decoder.parameters()]


def init_params(config: ModelConfig, seed: int = 0) -> Marlin:
    """Build a model with truncated-normal (std 0.02) weights and zero biases, deterministic in ``seed``."""
    model = Marlin(config)
    gen = torch.Generator().manual_seed(int(seed))
    with torch.no_grad():
        for name, p in model.named_parameters():
            leaf = name.rsplit(".", 1)[-1]
            if name.split(".")[-2].startswith("norm"):
                p.fill_(1.0 if leaf == "weight" else 0.0)
            elif leaf == "bias":
                p.zero_()
            else:
                nn.init.trunc_normal_(p, std=0.02, a=-0.04, b=0.04, generator=gen)
    return model


def _as_tensor(x, ref: torch.Tensor | None = None) -> torch.Tensor:
    if isinstance(x, TokenBatch):
        x = x.values
    t = torch.as_tensor(np.asarray(x)) if not isinstance(x, torch.Tensor) else x
    if ref is not None and t.is_floating_point():
        t = t.to(ref.dtype)
    return t


def _batched(x: torch.Tensor, ndim: int):
    return (x[None], True) if x.dim() == ndim - 1 else (x, False)


def plan_indices(plans) -> tuple[torch.Tensor, torch.Tensor]:
    """Stack visible/masked index lists of equally sized plans into (B, k-n) and (B, n) tensors."""
    if isinstance(plans, MaskPlan):
        plans = [plans]
    ns = {p.n for p in plans}
    if len(ns) != 1:
        raise ValueError(f"plans in one batch must mask equally many tokens, got {sorted(ns)}")
    vis = torch.as_tensor(np.stack([p.visible_index for p in plans]), dtype=torch.long)
    msk = torch.as_tensor(np.stack([p.masked_index for p in plans]), dtype=torch.long)
    return vis, msk


def encode(visible, visible_positions, model: Marlin) -> torch.Tensor:
    """Embed visible tokens, add positional embeddings at their original indices, run the encoder."""
    ref = model.encoder.patch_embed.weight
    visible, squeeze = _batched(_as_tensor(visible, ref), 3)
    positions, _ = _batched(torch.as_tensor(np.asarray(visible_positions), dtype=torch.long)
                            if not isinstance(visible_positions, torch.Tensor) else visible_positions, 2)
    if visible.shape[-1] != model.grid.e:
        raise ValueError(f"token width {visible.shape[-1]} != e={model.grid.e}")
    if positions.shape != visible.shape[:2]:
        raise ValueError(f"positions {tuple(positions.shape)} do not match tokens {tuple(visible.shape[:2])}")
    z = model.encoder(visible, positions)
    return z[0] if squeeze else z


def decode(z, plan, model: Marlin) -> torch.Tensor:
    """Reconstruct the masked tokens; rows come back in masked-index order."""
    z, squeeze = _batched(_as_tensor(z, model.decoder.head.weight), 3)
    vis, msk = plan_indices(plan)
    if vis.shape[0] != z.shape[0] or vis.shape[1] != z.shape[1]:
        raise ValueError(f"latent rows {tuple(z.shape[:2])} do not match plan visible count {tuple(vis.shape)}")
    out = model.decoder(z, vis, msk)
    return out[0] if squeeze else out


def forward_reconstruct(tokens, plans, model: Marlin) -> tuple[torch.Tensor, torch.Tensor]:
    """Return (reconstruction, ground truth) for the masked tokens of each clip."""
    x, squeeze = _batched(_as_tensor(tokens, model.encoder.patch_embed.weight), 3)
    vis, msk = plan_indices(plans)
    if vis.shape[0] != x.shape[0] or vis.shape[1] + msk.shape[1] != x.shape[1]:
        raise ValueError("plans do not match token batch shape")
    visible = torch.gather(x, 1, vis[..., None].expand(-1, -1, x.shape[-1]))
    target = torch.gather(x, 1, msk[..., None].expand(-1, -1, x.shape[-1]))
    pred = model.decoder(model.encoder(visible, vis), vis, msk)
    if squeeze:
        return pred[0], target[0]
    return pred, target


def discriminate(tokens, model: Marlin) -> torch.Tensor:
    x = _as_tensor(tokens, model.discriminator.layer0.weight)
    if x.shape[-1] != model.grid.e:
        raise ValueError(f"token width {x.shape[-1]} != e={model.grid.e}")
    return model.discriminator(x)


def encode_all(tokens, model: Marlin) -> torch.Tensor:
    """Encoder output for every token of every clip (no masking)."""
    x, squeeze = _batched(_as_tensor(tokens, model.encoder.patch_embed.weight), 3)
    pos = torch.arange(x.shape[1]).expand(x.shape[0], -1)
    z = model.encoder(x, pos)
    return z[0] if squeeze else z


def parameter_count(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())


# --------------------------------------------------------------------------
# checkpoints: <dir>/manifest.json + one little-endian float32 blob per tensor
# --------------------------------------------------------------------------


def save_tensors(path: str | os.PathLike, tensors: dict[str, torch.Tensor], meta: dict) -> Path:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    index = []
    for name in sorted(tensors):
        arr = tensors[name].detach().cpu().to(torch.float32).contiguous().numpy().astype("<f4")
        fname = f"{name}.f32"
        (path / fname).write_bytes(arr.tobytes(order="C"))
        index.append({"name": name, "shape": list(arr.shape), "file": fname})
    manifest = {"format_version": CHECKPOINT_VERSION, **meta, "tensors": index}
    (path / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


def load_tensors(path: str | os.PathLike) -> tuple[dict[str, torch.Tensor], dict]:
    path = Path(path)
    mf = path / "manifest.json"
    if not mf.is_file():
        raise FileNotFoundError(f"no checkpoint manifest at {mf}")
    meta = json.loads(mf.read_text())
    if meta.get("format_version") != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint format_version {meta.get('format_version')!r}")
    tensors = {}
    for entry in meta["tensors"]:
        raw = (path / entry["file"]).read_bytes()
        count = math.prod(entry["shape"])
        if len(raw) != 4 * count:
            raise ValueError(f"checkpoint blob {entry['file']}: expected {4 * count} bytes, found {len(raw)}")
        arr = np.frombuffer(raw, dtype="<f4").reshape(entry["shape"]).copy()
        tensors[entry["name"]] = torch.from_numpy(arr)
    return tensors, meta


def save_checkpoint(path, model: Marlin, step: int = 0, seed: int = 0, extra: dict | None = None) -> Path:
    meta = {"kind": "marlin", "model": model.config.to_dict(), "step": int(step), "seed": int(seed)}
    if extra:
        meta.update(extra)
    return save_tensors(path, model.state_dict(), meta)


def load_checkpoint(path) -> tuple[Marlin, dict]:
    tensors, meta = load_tensors(path)
    model = Marlin(ModelConfig.from_dict(meta["model"]))
    model.load_state_dict(tensors)
    return model, meta


def checksum(module: nn.Module) -> str:
    h = hashlib.sha256()
    for name, t in sorted(module.state_dict().items()):
        h.update(name.encode())
        h.update(t.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()
