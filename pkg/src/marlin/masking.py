"""Mask plans: facial-region guided tube masking (fasking) and the random/frame/tube baselines."""

from __future__ import annotations

import base64
import json
import math
from dataclasses import dataclass

import numpy as np

from .data import NUM_REGIONS, PRIORITY_REGIONS, RegionLabel
from .tokenizer import TokenBatch, TokenGridSpec

STRATEGIES = ("fasking", "random", "frame", "tube")

# r * k can land a hair under an integer in binary floating point (0.29 * 100)
_FLOOR_EPS = 1e-9


def masked_count(r: float, k: int) -> int:
    """``floor(r * k)``, robust to float representation of ``r``."""
    return min(k, int(math.floor(r * k + _FLOOR_EPS)))


def _check_ratio(r: float) -> float:
    r = float(r)
    if not 0.0 <= r <= 1.0 or math.isnan(r):
        raise ValueError(f"masking ratio must lie in [0, 1], got {r}")
    return r


@dataclass
class MaskPlan:
    masked: np.ndarray  # bool, length k
    r: float
    strategy: str
    seed: int
    labels: np.ndarray | None = None

    def __post_init__(self):
        self.masked = np.asarray(self.masked, dtype=bool)
        if self.strategy not in STRATEGIES:
            raise ValueError(f"unknown strategy {self.strategy!r}")

    @property
    def k(self) -> int:
        return int(self.masked.size)

    @property
    def n(self) -> int:
        return int(self.masked.sum())

    @property
    def visible_index(self) -> np.ndarray:
        return np.flatnonzero(~self.masked)

    @property
    def masked_index(self) -> np.ndarray:
        return np.flatnonzero(self.masked)

    def label_histogram(self) -> dict[str, int] | None:
        """Count of masked tokens per region, if labels are known."""
        if self.labels is None:
            return None
        counts = np.bincount(np.asarray(self.labels)[self.masked].astype(np.int64), minlength=NUM_REGIONS)
        return {RegionLabel(i).name.lower(): int(c) for i, c in enumerate(counts)}

    def to_dict(self) -> dict:
        bits = np.packbits(self.masked, bitorder="little").tobytes()
        return {
            "strategy": self.strategy,
            "seed": int(self.seed),
            "r": self.r,
            "k": self.k,
            "n": self.n,
            "masked": base64.b64encode(bits).decode("ascii"),
            "label_histogram": self.label_histogram(),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> MaskPlan:
        raw = np.frombuffer(base64.b64decode(d["masked"]), dtype=np.uint8)
        masked = np.unpackbits(raw, bitorder="little", count=d["k"]).astype(bool)
        plan = cls(masked, r=d["r"], strategy=d["strategy"], seed=d["seed"])
        if plan.n != d["n"]:
            raise ValueError(f"mask plan bitset has {plan.n} masked tokens, header says {d['n']}")
        return plan

    @classmethod
    def from_json(cls, text: str) -> MaskPlan:
        return cls.from_dict(json.loads(text))


def fasking(labels, r: float, seed: int) -> MaskPlan:
    """Fill the visible set region by region and mask whatever is left.

    Regions are visited as background, skin, then the five priority regions in
    a seed-shuffled order. Within a region, tokens are taken in a seed-shuffled
    order, one at a time, so the visible count stops at exactly ``k - n``.

    Draw protocol for ``np.random.default_rng(seed)``: first a permutation of
    the priority regions, then a permutation of all ``k`` token indices.
    """
    labels = np.asarray(labels)
    r = _check_ratio(r)
    if labels.ndim != 1 or labels.size == 0:
        raise ValueError("fasking needs a non-empty 1-D label vector")
    k = labels.size
    n = masked_count(r, k)
    rng = np.random.default_rng(seed)
    order = [RegionLabel.BACKGROUND, RegionLabel.SKIN] + [
        PRIORITY_REGIONS[i] for i in rng.permutation(len(PRIORITY_REGIONS))
    ]
    token_order = rng.permutation(k)

    group_rank = np.empty(NUM_REGIONS, dtype=np.int64)
    group_rank[np.asarray(order, dtype=np.int64)] = np.arange(NUM_REGIONS)
    # stable sort by group keeps the shuffled order inside each group
    fill = token_order[np.argsort(group_rank[labels[token_order].astype(np.int64)], kind="stable")]
    masked = np.ones(k, dtype=bool)
    masked[fill[: k - n]] = False
    return MaskPlan(masked, r=r, strategy="fasking", seed=seed, labels=labels)


def random_mask(k: int, r: float, seed: int) -> MaskPlan:
    r = _check_ratio(r)
    n = masked_count(r, k)
    rng = np.random.default_rng(seed)
    masked = np.zeros(k, dtype=bool)
    masked[rng.permutation(k)[:n]] = True
    return MaskPlan(masked, r=r, strategy="random", seed=seed)


def frame_mask(spec: TokenGridSpec, r: float, seed: int) -> MaskPlan:
    """Mask every token of ``floor(r * grid_t)`` randomly chosen temporal slices."""
    r = _check_ratio(r)
    gt, gh, gw = spec.grid
    rng = np.random.default_rng(seed)
    slices = np.zeros(gt, dtype=bool)
    slices[rng.permutation(gt)[: masked_count(r, gt)]] = True
    masked = np.repeat(slices, gh * gw)
    return MaskPlan(masked, r=r, strategy="frame", seed=seed)


def tube_mask(spec: TokenGridSpec, r: float, seed: int) -> MaskPlan:
    """Mask ``floor(r * grid_h * grid_w)`` spatial cells at every temporal index."""
    r = _check_ratio(r)
    gt, gh, gw = spec.grid
    rng = np.random.default_rng(seed)
    cells = np.zeros(gh * gw, dtype=bool)
    cells[rng.permutation(gh * gw)[: masked_count(r, gh * gw)]] = True
    masked = np.tile(cells, gt)
    return MaskPlan(masked, r=r, strategy="tube", seed=seed)


def expected_masked_count(strategy: str, spec: TokenGridSpec, r: float) -> int:
    """Number of masked tokens each strategy's flooring rule produces."""
    gt, gh, gw = spec.grid
    if strategy in ("fasking", "random"):
        return masked_count(r, spec.k)
    if strategy == "frame":
        return masked_count(r, gt) * gh * gw
    if strategy == "tube":
        return masked_count(r, gh * gw) * gt
    raise ValueError(f"unknown strategy {strategy!r}")


def make_plan(strategy: str, spec: TokenGridSpec, r: float, seed: int, labels=None) -> MaskPlan:
    if strategy == "fasking":
        if labels is None:
            raise ValueError("fasking needs per-token region labels")
        return fasking(labels, r, seed)
    if strategy == "random":
        plan = random_mask(spec.k, r, seed)
    elif strategy == "frame":
        plan = frame_mask(spec, r, seed)
    elif strategy == "tube":
        plan = tube_mask(spec, r, seed)
    else:
        raise ValueError(f"unknown strategy {strategy!r}; choose from {STRATEGIES}")
    if labels is not None:
        plan.labels = np.asarray(labels)
    return plan


def split_tokens(tokens, plan: MaskPlan):
    """Partition token rows into (visible, masked, visible_index, masked_index), order preserved."""
    values = tokens.values if isinstance(tokens, TokenBatch) else tokens
    if values.shape[0] != plan.k:
        raise ValueError(f"plan covers {plan.k} tokens, batch has {values.shape[0]}")
    vis, msk = plan.visible_index, plan.masked_index
    return values[vis], values[msk], vis, msk


def merge_tokens(visible, masked, visible_index, masked_index):
    """Inverse of :func:`split_tokens`."""
    k = len(visible_index) + len(masked_index)
    out = np.empty((k,) + visible.shape[1:], dtype=np.result_type(visible, masked))
    out[visible_index] = visible
    out[masked_index] = masked
    return out
