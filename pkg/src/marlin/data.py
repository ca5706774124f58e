"""Clip container format, temporal sampling, manifests and the synthetic face generator."""

from __future__ import annotations

import enum
import json
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

FORMAT_VERSION = 1
MANIFEST_SCHEMA_VERSION = 1
_HEADER_KEYS = ("version", "C", "T", "H", "W", "dtype", "seg_dtype", "clip_id")


class ClipFormatError(ValueError):
    """Raised when a clip file or in-memory clip violates the container contract."""


class RegionLabel(enum.IntEnum):
    BACKGROUND = 0
    SKIN = 1
    LEFT_EYE = 2
    RIGHT_EYE = 3
    NOSE = 4
    MOUTH = 5
    HAIR = 6


NUM_REGIONS = len(RegionLabel)
PRIORITY_REGIONS = (
    RegionLabel.LEFT_EYE,
    RegionLabel.RIGHT_EYE,
    RegionLabel.NOSE,
    RegionLabel.MOUTH,
    RegionLabel.HAIR,
)


@dataclass(frozen=True)
class ClipSpec:
    channels: int = 3
    frames: int = 16
    height: int = 224
    width: int = 224
    temporal_stride: int = 2

    def __post_init__(self):
        for name in ("channels", "frames", "height", "width", "temporal_stride"):
            if int(getattr(self, name)) < 1:
                raise ValueError(f"ClipSpec.{name} must be >= 1, got {getattr(self, name)}")

    @property
    def shape(self) -> tuple[int, int, int, int]:
        return (self.channels, self.frames, self.height, self.width)


@dataclass
class VideoClip:
    """A C x T x H x W float32 clip in [0, 1] with its T x H x W region map."""

    pixels: np.ndarray
    segmap: np.ndarray
    clip_id: str = ""

    def __post_init__(self):
        self.pixels = np.ascontiguousarray(self.pixels, dtype=np.float32)
        self.segmap = np.ascontiguousarray(self.segmap, dtype=np.uint8)
        validate_clip(self)

    @property
    def shape(self) -> tuple[int, int, int, int]:
        return tuple(self.pixels.shape)

    @property
    def num_frames(self) -> int:
        return self.pixels.shape[1]


def validate_clip(clip: VideoClip) -> None:
    if clip.pixels.ndim != 4:
        raise ClipFormatError(f"shape mismatch: pixels must be C x T x H x W, got {clip.pixels.shape}")
    if clip.segmap.shape != clip.pixels.shape[1:]:
        raise ClipFormatError(
            f"shape mismatch: segmap {clip.segmap.shape} vs pixels {clip.pixels.shape}"
        )
    if not np.isfinite(clip.pixels).all():
        raise ClipFormatError("pixels: non-finite value (NaN/Inf)")
    if clip.segmap.size and int(clip.segmap.max()) >= NUM_REGIONS:
        raise ClipFormatError(f"segmap: label out of range (max {int(clip.segmap.max())})")


# --------------------------------------------------------------------------
# .mclip container
# --------------------------------------------------------------------------


def encode_clip(clip: VideoClip) -> bytes:
    C, T, H, W = clip.shape
    header = {
        "version": FORMAT_VERSION,
        "C": C,
        "T": T,
        "H": H,
        "W": W,
        "dtype": "f32",
        "seg_dtype": "u8",
        "clip_id": str(clip.clip_id),
    }
    # canonical: fixed key order, no whitespace
    head = json.dumps({k: header[k] for k in _HEADER_KEYS}, separators=(",", ":")).encode("utf-8")
    return b"".join(
        [
            struct.pack("<I", len(head)),
            head,
            clip.pixels.astype("<f4", copy=False).tobytes(order="C"),
            clip.segmap.astype(np.uint8, copy=False).tobytes(order="C"),
        ]
    )


def decode_clip(buf: bytes) -> VideoClip:
    if len(buf) < 4:
        raise ClipFormatError("header: truncated length prefix")
    (hlen,) = struct.unpack_from("<I", buf, 0)
    if 4 + hlen > len(buf):
        raise ClipFormatError("header: declared length exceeds file size")
    try:
        header = json.loads(buf[4 : 4 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ClipFormatError(f"header: not valid UTF-8 JSON ({exc})") from exc
    missing = [k for k in _HEADER_KEYS if k not in header]
    if missing:
        raise ClipFormatError(f"header: missing keys {missing}")
    if header["version"] != FORMAT_VERSION:
        raise ClipFormatError(f"version: unsupported {header['version']!r}")
    if header["dtype"] != "f32" or header["seg_dtype"] != "u8":
        raise ClipFormatError(f"dtype: unsupported {header['dtype']!r}/{header['seg_dtype']!r}")
    dims = []
    for key in ("C", "T", "H", "W"):
        val = header[key]
        if not isinstance(val, int) or val < 1:
            raise ClipFormatError(f"header: field {key} must be a positive integer, got {val!r}")
        dims.append(val)
    C, T, H, W = dims
    n_pix = C * T * H * W
    n_seg = T * H * W
    payload = len(buf) - 4 - hlen
    if payload != 4 * n_pix + n_seg:
        raise ClipFormatError(
            f"shape mismatch: header {C}x{T}x{H}x{W} needs {4 * n_pix + n_seg} payload bytes, found {payload}"
        )
    off = 4 + hlen
    pixels = np.frombuffer(buf, dtype="<f4", count=n_pix, offset=off).reshape(C, T, H, W)
    segmap = np.frombuffer(buf, dtype=np.uint8, count=n_seg, offset=off + 4 * n_pix).reshape(T, H, W)
    if not np.isfinite(pixels).all():
        raise ClipFormatError("pixels: non-finite value (NaN/Inf)")
    if int(segmap.max()) >= NUM_REGIONS:
        raise ClipFormatError(f"segmap: label out of range (max {int(segmap.max())})")
    return VideoClip(pixels.astype(np.float32), segmap.copy(), clip_id=header["clip_id"])


def write_clip(clip: VideoClip, path: str | os.PathLike) -> None:
    Path(path).write_bytes(encode_clip(clip))


def load_clip(path: str | os.PathLike) -> VideoClip:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"clip file not found: {path}")
    return decode_clip(path.read_bytes())


# --------------------------------------------------------------------------
# temporal sampling
# --------------------------------------------------------------------------


def sample_clip(source: VideoClip, spec: ClipSpec, rng: np.random.Generator | int | None = None,
                start: int | None = None) -> VideoClip:
    """Take ``spec.frames`` frames at ``spec.temporal_stride`` from a random valid start.

    The valid start range is ``[0, T0 - frames * stride]``; passing ``start``
    bypasses the draw.
    """
    T0 = source.num_frames
    span = spec.frames * spec.temporal_stride
    if T0 < span:
        raise ValueError(
            f"source too short: {T0} frames < frames*stride = {spec.frames}*{spec.temporal_stride}"
        )
    if source.pixels.shape[0] != spec.channels:
        raise ClipFormatError(f"shape mismatch: {source.pixels.shape[0]} channels, spec wants {spec.channels}")
    if start is None:
        rng = np.random.default_rng(rng)
        start = int(rng.integers(0, T0 - span + 1))
    elif not 0 <= start <= T0 - span:
        raise ValueError(f"start {start} outside valid range [0, {T0 - span}]")
    idx = start + spec.temporal_stride * np.arange(spec.frames)
    return VideoClip(source.pixels[:, idx], source.segmap[idx], clip_id=source.clip_id)


# --------------------------------------------------------------------------
# manifests (JSON lines)
# --------------------------------------------------------------------------


@dataclass
class ManifestEntry:
    path: str
    label: list[float] | None = None


@dataclass
class DatasetManifest:
    entries: list[ManifestEntry]
    task: str | None = None  # "multiclass" | "multilabel" | None
    num_outputs: int | None = None
    root: Path = field(default_factory=Path)
    schema_version: int = MANIFEST_SCHEMA_VERSION

    def __post_init__(self):
        dims = {len(e.label) for e in self.entries if e.label is not None}
        if len(dims) > 1:
            raise ClipFormatError(f"manifest: label vectors disagree on dimensionality {sorted(dims)}")
        if dims and self.num_outputs is None:
            self.num_outputs = dims.pop()
        if self.task not in (None, "multiclass", "multilabel"):
            raise ClipFormatError(f"manifest: unknown task {self.task!r}")

    def __len__(self) -> int:
        return len(self.entries)

    def resolve(self, entry: ManifestEntry) -> Path:
        p = Path(entry.path)
        return p if p.is_absolute() else self.root / p

    def load(self, i: int) -> VideoClip:
        return load_clip(self.resolve(self.entries[i]))

    @property
    def labeled(self) -> bool:
        return bool(self.entries) and all(e.label is not None for e in self.entries)

    def labels(self) -> np.ndarray:
        if not self.labeled:
            raise ValueError("manifest has unlabeled entries")
        return np.asarray([e.label for e in self.entries], dtype=np.float64)

    def subset(self, indices) -> DatasetManifest:
        return DatasetManifest(
            [self.entries[i] for i in indices], task=self.task, num_outputs=self.num_outputs, root=self.root
        )


def write_manifest(manifest: DatasetManifest, path: str | os.PathLike) -> None:
    lines = []
    for e in manifest.entries:
        row = {
            "schema_version": manifest.schema_version,
            "path": e.path,
            "label": e.label,
            "task": manifest.task,
            "num_outputs": manifest.num_outputs,
        }
        lines.append(json.dumps(row, separators=(",", ":")))
    Path(path).write_text("".join(line + "\n" for line in lines))


def read_manifest(path: str | os.PathLike, check_paths: bool = True) -> DatasetManifest:
    path = Path(path)
    entries, tasks, outs = [], set(), set()
    for lineno, line in enumerate(path.read_text().splitlines(), 1):
        if not line.strip():
            continue
        row = json.loads(line)
        if row.get("schema_version", MANIFEST_SCHEMA_VERSION) != MANIFEST_SCHEMA_VERSION:
            raise ClipFormatError(f"manifest line {lineno}: unsupported schema_version {row['schema_version']}")
        if "path" not in row:
            raise ClipFormatError(f"manifest line {lineno}: missing 'path'")
        entries.append(ManifestEntry(row["path"], row.get("label")))
        tasks.add(row.get("task"))
        outs.add(row.get("num_outputs"))
    if len(tasks) > 1 or len(outs) > 1:
        raise ClipFormatError("manifest: rows disagree on task metadata")
    manifest = DatasetManifest(
        entries, task=tasks.pop() if tasks else None, num_outputs=outs.pop() if outs else None, root=path.parent
    )
    if check_paths:
        for e in entries:
            if not manifest.resolve(e).is_file():
                raise FileNotFoundError(f"manifest entry does not resolve: {e.path}")
    return manifest


# --------------------------------------------------------------------------
# synthetic faces
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class MotionParams:
    """Motion knobs for :func:`synth_face_clip`.

    ``translate`` and ``deform`` are amplitudes in normalised image units
    ([-1, 1] spans the frame); with both at zero every frame is identical.
    """

    translate: float = 0.06
    deform: float = 0.25
    cycles: float = 1.0
    mouth_open: bool = False

    @classmethod
    def static(cls, mouth_open: bool = False) -> MotionParams:
        return cls(translate=0.0, deform=0.0, mouth_open=mouth_open)


def _ellipse(u, v, cx, cy, rx, ry):
    return ((u - cx) / rx) ** 2 + ((v - cy) / ry) ** 2 <= 1.0


def synth_face_clip(seed: int, spec: ClipSpec = ClipSpec(), motion: MotionParams = MotionParams()) -> VideoClip:
    """Render a cartoon face whose parts drift and deform smoothly over ``spec.frames`` frames.

    Pure function of ``(seed, spec, motion)``. The region map is exact: every
    pixel's label is the part painted last over it.
    """
    rng = np.random.default_rng(seed)
    C, T, H, W = spec.shape
    # pixel centres in normalised coordinates
    v, u = np.meshgrid((np.arange(H) + 0.5) / H * 2 - 1, (np.arange(W) + 0.5) / W * 2 - 1, indexing="ij")

    base_cx, base_cy = rng.uniform(-0.05, 0.05, size=2)
    rx = 0.6 * rng.uniform(0.95, 1.05)
    ry = 0.75 * rng.uniform(0.95, 1.05)
    phase = rng.uniform(0, 2 * np.pi, size=3)

    colors = np.empty((NUM_REGIONS, 3))
    colors[RegionLabel.BACKGROUND] = rng.uniform(0.45, 0.55) + rng.uniform(-0.03, 0.03, 3)
    skin = np.array([0.85, 0.65, 0.5]) * rng.uniform(0.8, 1.05)
    colors[RegionLabel.SKIN] = skin
    colors[RegionLabel.HAIR] = rng.uniform(0.1, 0.4) * np.array([1.0, 0.8, 0.6])
    eye = np.array([0.15, 0.12, 0.1]) * rng.uniform(0.8, 1.2)
    colors[RegionLabel.LEFT_EYE] = eye
    colors[RegionLabel.RIGHT_EYE] = eye
    colors[RegionLabel.NOSE] = skin * 0.8
    colors[RegionLabel.MOUTH] = (
        np.array([0.12, 0.02, 0.04]) if motion.mouth_open else np.array([0.8, 0.25, 0.3])
    )
    colors = np.clip(colors, 0.0, 1.0)
    texture = rng.normal(0.0, 0.02, size=(3, H, W))

    pixels = np.empty((C, T, H, W), dtype=np.float32)
    segmap = np.empty((T, H, W), dtype=np.uint8)
    mouth_h = 0.28 if motion.mouth_open else 0.08
    # an open mouth drops the jaw: the lower half of the face is longer
    jaw = 1.2 if motion.mouth_open else 1.0
    for t in range(T):
        w = 2 * np.pi * motion.cycles * t / T
        cx = base_cx + motion.translate * np.sin(w + phase[0])
        cy = base_cy + motion.translate * np.sin(w + phase[1])
        wobble = motion.deform * np.sin(w + phase[2])

        seg = np.zeros((H, W), dtype=np.uint8)
        head = _ellipse(u, v, cx, cy, rx * 1.08, ry * 1.1)
        seg[head & (v < cy - 0.35 * ry)] = RegionLabel.HAIR
        face = np.where(v > cy, _ellipse(u, v, cx, cy, rx, ry * jaw), _ellipse(u, v, cx, cy, rx, ry))
        seg[face & (seg != RegionLabel.HAIR)] = RegionLabel.SKIN
        ex, ey = 0.4 * rx, cy - 0.2 * ry
        erx, ery = 0.22 * rx, 0.16 * ry * (1 + 0.3 * wobble)
        seg[_ellipse(u, v, cx - ex, ey, erx, ery)] = RegionLabel.LEFT_EYE
        seg[_ellipse(u, v, cx + ex, ey, erx, ery)] = RegionLabel.RIGHT_EYE
        # nose: triangle with apex between the eyes, base above the mouth
        top, bot = cy - 0.1 * ry, cy + 0.25 * ry
        half = 0.18 * rx * np.clip((v - top) / (bot - top), 0, 1)
        seg[(v >= top) & (v <= bot) & (np.abs(u - cx) <= np.maximum(half, 0.06 * rx))] = RegionLabel.NOSE
        my = cy + 0.5 * ry * jaw
        mh = mouth_h * ry * (1 + 0.4 * wobble)
        mw = (0.45 if motion.mouth_open else 0.35) * rx
        seg[(np.abs(u - cx) <= mw) & (np.abs(v - my) <= mh)] = RegionLabel.MOUTH

        segmap[t] = seg
        rgb = colors[seg].transpose(2, 0, 1) + texture
        frame = np.resize(rgb, (C, H, W)) if C != 3 else rgb
        pixels[:, t] = np.clip(frame, 0.0, 1.0)
    return VideoClip(pixels, segmap, clip_id=f"synth-{seed}")


def required_frames(spec: ClipSpec) -> int:
    return spec.frames * spec.temporal_stride


__all__ = [
    "ClipFormatError",
    "RegionLabel",
    "NUM_REGIONS",
    "PRIORITY_REGIONS",
    "ClipSpec",
    "VideoClip",
    "MotionParams",
    "ManifestEntry",
    "DatasetManifest",
    "encode_clip",
    "decode_clip",
    "write_clip",
    "load_clip",
    "sample_clip",
    "synth_face_clip",
    "read_manifest",
    "write_manifest",
]
