"""Synthetic consistent and dynamic occlusions with exact replay.

Every occlusion is described by an :class:`OcclusionSpec`; applying the same
spec to the same sequence always yields bit-identical frames.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, replace
from fractions import Fraction
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .silhouette import SeedLike, SilhouetteSequence, resize_binary

NONE = "none"
TOP = "top"
BOTTOM = "bottom"
MIDDLE = "middle"
DYNAMIC_SMALL = "dynamic_small"
DYNAMIC_TALL = "dynamic_tall"

CONSISTENT_KINDS = (TOP, BOTTOM, MIDDLE)
DYNAMIC_KINDS = (DYNAMIC_SMALL, DYNAMIC_TALL)
ALL_KINDS = (NONE, TOP, BOTTOM, MIDDLE, DYNAMIC_SMALL, DYNAMIC_TALL)

LEFT_TO_RIGHT = "left_to_right"
RIGHT_TO_LEFT = "right_to_left"

AMOUNT_RANGE = (0.4, 0.6)       # R
TALL_WIDTH_RANGE = (0.2, 0.4)   # R_t
SPEED_RANGE = (0.5, 1.0)        # R_s, pixels per frame


class OcclusionError(ValueError):
    pass


def default_amount_range(kind: str) -> tuple[float, float]:
    if kind == NONE:
        return (0.0, 0.0)
    return TALL_WIDTH_RANGE if kind == DYNAMIC_TALL else AMOUNT_RANGE


@dataclass(frozen=True)
class OcclusionSpec:
    kind: str = NONE
    amount: float = 0.0
    direction: str | None = None
    speed: float | None = None
    start_offset: int | None = None
    vertical_offset: int | None = None
    seed: int | None = None

    def __post_init__(self):
        if self.kind not in ALL_KINDS:
            raise OcclusionError(f"unknown occlusion kind {self.kind!r}")
        if not 0.0 <= self.amount <= 1.0:
            raise OcclusionError(f"amount {self.amount} outside [0, 1]")
        if self.kind == NONE and self.amount != 0.0:
            raise OcclusionError("kind 'none' requires amount 0")
        if self.kind in DYNAMIC_KINDS:
            if self.direction not in (LEFT_TO_RIGHT, RIGHT_TO_LEFT):
                raise OcclusionError(f"dynamic occlusion needs a direction, got {self.direction!r}")
            if self.speed is None or self.speed < 0:
                raise OcclusionError("dynamic occlusion needs a non-negative speed")
            if self.start_offset is None:
                raise OcclusionError("dynamic occlusion needs a start offset")
            if self.kind == DYNAMIC_SMALL and self.vertical_offset is None:
                raise OcclusionError("dynamic_small needs a vertical offset")

    def to_record(self) -> dict:
        return asdict(self)

    @classmethod
    def from_record(cls, record: dict) -> "OcclusionSpec":
        fields = {k: record[k] for k in cls.__dataclass_fields__ if k in record}
        return cls(**fields)

    def to_json(self) -> str:
        return json.dumps(self.to_record(), sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "OcclusionSpec":
        return cls.from_record(json.loads(text))


@dataclass(frozen=True)
class VisibilityLabel:
    kind: str
    class_index: int
    amount_target: float


def visibility_label(spec: OcclusionSpec, class_set: Sequence[str] = ALL_KINDS) -> VisibilityLabel:
    index = list(class_set).index(spec.kind) if spec.kind in class_set else -1
    return VisibilityLabel(spec.kind, index, 0.0 if spec.kind == NONE else float(spec.amount))


def sample_spec(allowed_kinds: Iterable[str], rng_seed: SeedLike = None,
                amount_range: tuple[float, float] | None = None,
                frame_size: tuple[int, int] = (64, 64)) -> OcclusionSpec:
    """Draw one occlusion: kind uniformly from ``allowed_kinds``, then its geometry.

    ``amount_range`` overrides the default range for every kind (used by the
    range sweep); the tall-patch width keeps its own range unless overridden.
    """
    kinds = sorted(set(allowed_kinds), key=ALL_KINDS.index)
    if not kinds:
        raise OcclusionError("allowed_kinds is empty")
    for k in kinds:
        if k not in ALL_KINDS:
            raise OcclusionError(f"unknown occlusion kind {k!r}")
    seed = None
    if rng_seed is None or isinstance(rng_seed, (int, np.integer)):
        seed = None if rng_seed is None else int(rng_seed)
    rng = np.random.default_rng(rng_seed)
    kind = kinds[int(rng.integers(len(kinds)))]
    if kind == NONE:
        return OcclusionSpec(NONE, 0.0, seed=seed)
    lo, hi = amount_range if amount_range is not None else default_amount_range(kind)
    amount = float(rng.uniform(lo, hi))
    if kind in CONSISTENT_KINDS:
        return OcclusionSpec(kind, amount, seed=seed)
    h, w = frame_size
    direction = (LEFT_TO_RIGHT, RIGHT_TO_LEFT)[int(rng.integers(2))]
    speed = float(rng.uniform(*SPEED_RANGE))
    start = int(rng.integers(0, w))
    vertical = None
    if kind == DYNAMIC_SMALL:
        ph = int(math.floor(amount * h))
        vertical = int(rng.integers(0, h - ph + 1))
    return OcclusionSpec(kind, amount, direction, speed, start, vertical, seed)


def band_rows(amount: float, height: int) -> int:
    return int(math.floor(amount * height))


def middle_band(amount: float, height: int) -> tuple[int, int]:
    """[start, stop) rows of the vertically centred band."""
    n = band_rows(amount, height)
    start = (height - n) // 2
    return start, start + n


def apply_consistent(seq: SilhouetteSequence, spec: OcclusionSpec) -> SilhouetteSequence:
    if spec.kind not in CONSISTENT_KINDS and spec.kind != NONE:
        raise OcclusionError(f"apply_consistent cannot handle kind {spec.kind!r}")
    frames = _consistent_frames(seq.frames, spec)
    return seq.with_frames(frames, _valid_after(frames, seq.valid_mask))


def _consistent_frames(frames: np.ndarray, spec: OcclusionSpec) -> np.ndarray:
    t, h, w = frames.shape
    n = band_rows(spec.amount, h)
    if spec.kind == NONE or n == 0:
        return frames.copy()
    if spec.kind == MIDDLE:
        out = frames.copy()
        a, b = middle_band(spec.amount, h)
        out[:, a:b] = 0
        return out
    if n >= h:
        return np.zeros_like(frames)
    kept = frames[:, n:] if spec.kind == TOP else frames[:, :h - n]
    return np.stack([resize_binary(f, (h, w)) for f in kept])


def patch_displacement(speed: float, t: int) -> int:
    """floor(speed * t) evaluated exactly on the float's rational value."""
    return math.floor(Fraction(speed) * t)


def patch_geometry(spec: OcclusionSpec, t: int, frame_size: tuple[int, int]):
    """(left column, width, top row, height) of the moving patch at frame t."""
    h, w = frame_size
    pw = band_rows(spec.amount, w)
    if spec.kind == DYNAMIC_SMALL:
        ph, top = band_rows(spec.amount, h), int(spec.vertical_offset)
    else:
        ph, top = h, 0
    shift = patch_displacement(spec.speed, t)
    if spec.direction == RIGHT_TO_LEFT:
        shift = -shift
    return (int(spec.start_offset) + shift) % w, pw, top, ph


def apply_dynamic(seq: SilhouetteSequence, spec: OcclusionSpec) -> SilhouetteSequence:
    if spec.kind not in DYNAMIC_KINDS:
        raise OcclusionError(f"apply_dynamic cannot handle kind {spec.kind!r}")
    out = seq.frames.copy()
    t_count, h, w = out.shape
    for t in range(t_count):
        left, pw, top, ph = patch_geometry(spec, t, (h, w))
        cols = (left + np.arange(pw)) % w
        out[t, top:top + ph][:, cols] = 0
    return seq.with_frames(out, _valid_after(out, seq.valid_mask))


def _valid_after(frames: np.ndarray, before: np.ndarray) -> np.ndarray:
    # a frame emptied by the occluder behaves like a missed detection
    return before & frames.reshape(frames.shape[0], -1).any(axis=1)


def apply(seq: SilhouetteSequence, spec: OcclusionSpec,
          class_set: Sequence[str] = ALL_KINDS) -> tuple[SilhouetteSequence, VisibilityLabel]:
    if spec.kind == NONE:
        out = seq
    elif spec.kind in CONSISTENT_KINDS:
        out = apply_consistent(seq, spec)
    else:
        out = apply_dynamic(seq, spec)
    return out, visibility_label(spec, class_set)


def flip_mid_video(seq: SilhouetteSequence, spec_a: OcclusionSpec,
                   spec_b: OcclusionSpec) -> SilhouetteSequence:
    """Occlude the first ceil(T/2) frames with ``spec_a`` and the rest with ``spec_b``."""
    for s in (spec_a, spec_b):
        if s.kind not in CONSISTENT_KINDS and s.kind != NONE:
            raise OcclusionError(f"flip_mid_video only supports consistent kinds, got {s.kind!r}")
    half = math.ceil(len(seq) / 2)
    first = _consistent_frames(seq.frames[:half], spec_a)
    second = _consistent_frames(seq.frames[half:], spec_b)
    frames = np.concatenate([first, second]) if second.size else first
    return seq.with_frames(frames, _valid_after(frames, seq.valid_mask))


def flipped_kind(spec: OcclusionSpec) -> OcclusionSpec:
    """The top<->bottom counterpart used by the changing-occlusion scenario."""
    swap = {TOP: BOTTOM, BOTTOM: TOP}
    return replace(spec, kind=swap.get(spec.kind, spec.kind))


# --- manifests -------------------------------------------------------------

def write_manifest(records: list[dict], path: Path) -> Path:
    path = Path(path)
    path.write_text(json.dumps({"format": "occlusion-manifest", "version": 1,
                                "records": records}, indent=1, sort_keys=True))
    return path


def read_manifest(path: Path) -> list[dict]:
    doc = json.loads(Path(path).read_text())
    if doc.get("format") != "occlusion-manifest":
        raise OcclusionError(f"{path}: not an occlusion manifest")
    return doc["records"]
