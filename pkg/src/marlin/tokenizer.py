"""Cube tokenisation of clips and per-token facial-region labels.

Token ``i`` covers grid cell ``(ti, hi, wi)`` with
``i = (ti * grid_h + hi) * grid_w + wi``; each row holds the cube's pixels
flattened in ``(C, cube_t, cube_h, cube_w)`` order.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import NUM_REGIONS, RegionLabel

# higher wins a tie
_TIE_RANK = np.empty(NUM_REGIONS, dtype=np.int64)
for _rank, _label in enumerate(
    [
        RegionLabel.BACKGROUND,
        RegionLabel.SKIN,
        RegionLabel.HAIR,
        RegionLabel.MOUTH,
        RegionLabel.NOSE,
        RegionLabel.RIGHT_EYE,
        RegionLabel.LEFT_EYE,
    ]
):
    _TIE_RANK[_label] = _rank


@dataclass(frozen=True)
class TokenGridSpec:
    channels: int
    frames: int
    height: int
    width: int
    cube_t: int = 2
    cube_h: int = 16
    cube_w: int = 16

    def __post_init__(self):
        for dim, cube in (("frames", "cube_t"), ("height", "cube_h"), ("width", "cube_w")):
            d, c = getattr(self, dim), getattr(self, cube)
            if c < 1 or d < 1 or d % c:
                raise ValueError(f"{cube}={c} does not divide {dim}={d}")

    @classmethod
    def for_shape(cls, shape, cube=(2, 16, 16)) -> TokenGridSpec:
        C, T, H, W = shape
        return cls(C, T, H, W, *cube)

    @property
    def cube(self) -> tuple[int, int, int]:
        return (self.cube_t, self.cube_h, self.cube_w)

    @property
    def clip_shape(self) -> tuple[int, int, int, int]:
        return (self.channels, self.frames, self.height, self.width)

    @property
    def grid_t(self) -> int:
        return self.frames // self.cube_t

    @property
    def grid_h(self) -> int:
        return self.height // self.cube_h

    @property
    def grid_w(self) -> int:
        return self.width // self.cube_w

    @property
    def grid(self) -> tuple[int, int, int]:
        return (self.grid_t, self.grid_h, self.grid_w)

    @property
    def k(self) -> int:
        return self.grid_t * self.grid_h * self.grid_w

    @property
    def e(self) -> int:
        return self.channels * self.cube_t * self.cube_h * self.cube_w

    def to_dict(self) -> dict:
        return {
            "channels": self.channels,
            "frames": self.frames,
            "height": self.height,
            "width": self.width,
            "cube": list(self.cube),
        }

    @classmethod
    def from_dict(cls, d: dict) -> TokenGridSpec:
        return cls(d["channels"], d["frames"], d["height"], d["width"], *d["cube"])


@dataclass
class TokenBatch:
    values: np.ndarray  # k x e
    spec: TokenGridSpec

    def __post_init__(self):
        if self.values.shape != (self.spec.k, self.spec.e):
            raise ValueError(f"TokenBatch of shape {self.values.shape}, spec wants ({self.spec.k}, {self.spec.e})")


def _pixels(clip_or_pixels) -> np.ndarray:
    return getattr(clip_or_pixels, "pixels", clip_or_pixels)


def patchify(clip, spec: TokenGridSpec) -> TokenBatch:
    """Cut a clip (or a bare C x T x H x W array) into ``spec.k`` rows of width ``spec.e``."""
    x = np.asarray(_pixels(clip))
    if x.shape != spec.clip_shape:
        raise ValueError(f"clip shape {x.shape} does not match grid spec {spec.clip_shape}")
    C = spec.channels
    gt, gh, gw = spec.grid
    ct, ch, cw = spec.cube
    x = x.reshape(C, gt, ct, gh, ch, gw, cw).transpose(1, 3, 5, 0, 2, 4, 6)
    return TokenBatch(np.ascontiguousarray(x.reshape(spec.k, spec.e)), spec)


def unpatchify(tokens: TokenBatch) -> np.ndarray:
    spec = tokens.spec
    gt, gh, gw = spec.grid
    ct, ch, cw = spec.cube
    x = np.asarray(tokens.values).reshape(gt, gh, gw, spec.channels, ct, ch, cw)
    return np.ascontiguousarray(x.transpose(3, 0, 4, 1, 5, 2, 6).reshape(spec.clip_shape))


def token_region_labels(segmap: np.ndarray, spec: TokenGridSpec) -> np.ndarray:
    """Majority region per cube; ties go to the higher-priority region.

    Priority: left-eye > right-eye > nose > mouth > hair > skin > background.
    """
    segmap = np.asarray(segmap)
    if segmap.shape != spec.clip_shape[1:]:
        raise ValueError(f"segmap shape {segmap.shape} does not match grid {spec.clip_shape[1:]}")
    gt, gh, gw = spec.grid
    ct, ch, cw = spec.cube
    cubes = segmap.reshape(gt, ct, gh, ch, gw, cw).transpose(0, 2, 4, 1, 3, 5).reshape(spec.k, -1)
    counts = (cubes[:, :, None] == np.arange(NUM_REGIONS)).sum(axis=1)
    score = counts * NUM_REGIONS + _TIE_RANK[None, :]
    return score.argmax(axis=1).astype(np.uint8)
