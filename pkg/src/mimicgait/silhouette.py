"""Binary silhouette videos and the preprocessing shared by every stage."""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Union

import cv2
import numpy as np

FRAME_SIZE = (64, 64)
BINARY_THRESHOLD = 128

PACKED_MAGIC = b"SILP"
PACKED_VERSION = 1
_PACKED_HEADER = struct.Struct("<4sHIHHI")  # magic, version, T, H, W, meta_len

SeedLike = Union[int, np.random.Generator, None]


class SilhouetteError(ValueError):
    """Raised when silhouette data violates the binary-video invariants."""


@dataclass(frozen=True)
class BoundingBox:
    top: int
    left: int
    height: int
    width: int

    def __post_init__(self):
        if self.height <= 0 or self.width <= 0:
            raise SilhouetteError(f"degenerate bounding box {self}")
        if self.top < 0 or self.left < 0:
            raise SilhouetteError(f"bounding box outside frame {self}")

    @classmethod
    def of(cls, frame: np.ndarray) -> "BoundingBox | None":
        """Tight box around the foreground, or None for an empty frame."""
        rows = np.flatnonzero(frame.any(axis=1))
        if rows.size == 0:
            return None
        cols = np.flatnonzero(frame.any(axis=0))
        return cls(int(rows[0]), int(cols[0]),
                   int(rows[-1] - rows[0] + 1), int(cols[-1] - cols[0] + 1))


@dataclass(frozen=True, eq=False)
class SilhouetteSequence:
    """T binary frames of H x W plus per-frame validity.

    ``frames`` is stored as a read-only uint8 array so sequences can be shared
    freely between threads and stages.
    """

    frames: np.ndarray
    valid_mask: np.ndarray | None = None
    subject_id: str = "unlabeled"
    sequence_id: str = ""
    fps: float = 30.0
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        frames = np.asarray(self.frames)
        if frames.ndim != 3:
            raise SilhouetteError(f"expected T x H x W frames, got shape {frames.shape}")
        if frames.shape[0] < 1:
            raise SilhouetteError("a sequence needs at least one frame")
        if frames.dtype != np.uint8:
            if not np.isin(frames, (0, 1)).all():
                raise SilhouetteError("frames must be binary {0, 1}")
            frames = frames.astype(np.uint8)
        elif frames.max(initial=0) > 1:
            raise SilhouetteError("frames must be binary {0, 1}")
        frames = np.array(frames, copy=True)
        frames.flags.writeable = False
        if self.valid_mask is None:
            valid = frames.reshape(frames.shape[0], -1).any(axis=1)
        else:
            valid = np.asarray(self.valid_mask, dtype=bool).copy()
            if valid.shape != (frames.shape[0],):
                raise SilhouetteError("valid_mask must hold one flag per frame")
            if frames[~valid].any():
                raise SilhouetteError("frames flagged invalid must be all-zero")
        valid.flags.writeable = False
        object.__setattr__(self, "frames", frames)
        object.__setattr__(self, "valid_mask", valid)
        object.__setattr__(self, "subject_id", str(self.subject_id))
        object.__setattr__(self, "sequence_id", str(self.sequence_id))

    def __len__(self) -> int:
        return self.frames.shape[0]

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.frames.shape

    def with_frames(self, frames: np.ndarray, valid_mask=None, **meta) -> "SilhouetteSequence":
        """Same identity and metadata, new pixel content."""
        return SilhouetteSequence(frames, valid_mask, self.subject_id, self.sequence_id,
                                  self.fps, {**self.meta, **meta})

    def __eq__(self, other):
        if not isinstance(other, SilhouetteSequence):
            return NotImplemented
        return (self.subject_id == other.subject_id and self.sequence_id == other.sequence_id
                and np.array_equal(self.frames, other.frames)
                and np.array_equal(self.valid_mask, other.valid_mask))

    __hash__ = None


def _check_binary(frame: np.ndarray) -> np.ndarray:
    frame = np.asarray(frame)
    if frame.ndim != 2:
        raise SilhouetteError(f"expected a 2D frame, got shape {frame.shape}")
    if not np.isin(frame, (0, 1)).all():
        raise SilhouetteError("frame is not binary; rebinarize it first")
    return frame.astype(np.uint8)


def rebinarize(frame: np.ndarray) -> np.ndarray:
    """8-bit frame -> {0, 1}: a pixel is foreground iff its value is >= 128."""
    return (np.asarray(frame) >= BINARY_THRESHOLD).astype(np.uint8)


def resize_binary(frame: np.ndarray, size: tuple[int, int]) -> np.ndarray:
    """Bilinear resize of a binary frame through the 8-bit domain, then threshold.

    ``size`` is (height, width).
    """
    h, w = size
    if frame.shape == (h, w):
        return frame.astype(np.uint8, copy=True)
    scaled = cv2.resize(frame.astype(np.uint8) * 255, (w, h), interpolation=cv2.INTER_LINEAR)
    return rebinarize(scaled)


def center_and_resize(raw_frame: np.ndarray, target: tuple[int, int] = FRAME_SIZE,
                      return_valid: bool = False):
    """Scale the subject's box to full frame height and centre it horizontally.

    Returns the processed frame, or ``(frame, valid)`` when ``return_valid`` is
    set. An empty input gives an empty (invalid) frame.
    """
    frame = _check_binary(raw_frame)
    th, tw = target
    box = BoundingBox.of(frame)
    out = np.zeros((th, tw), dtype=np.uint8)
    if box is None:
        return (out, False) if return_valid else out
    crop = frame[box.top:box.top + box.height, box.left:box.left + box.width]
    new_w = max(1, int(round(box.width * th / box.height)))
    scaled = resize_binary(crop, (th, new_w))
    if new_w <= tw:
        left = (tw - new_w) // 2
        out[:, left:left + new_w] = scaled
    else:
        cut = (new_w - tw) // 2
        out[:] = scaled[:, cut:cut + tw]
    valid = bool(out.any())
    return (out, valid) if return_valid else out


def preprocess_frames(raw_frames, target: tuple[int, int] = FRAME_SIZE, **seq_kwargs) -> SilhouetteSequence:
    """Centre/resize every raw frame and wrap the result as a sequence."""
    processed, valid = [], []
    for raw in raw_frames:
        f, v = center_and_resize(raw, target, return_valid=True)
        processed.append(f)
        valid.append(v)
    return SilhouetteSequence(np.stack(processed), np.array(valid), **seq_kwargs)


@dataclass(frozen=True)
class ClipPolicy:
    """How many frames to draw: ``fixed`` uses ``lo``; ``uniform`` draws from [lo, hi]."""

    mode: str = "fixed"
    lo: int = 30
    hi: int = 30

    def __post_init__(self):
        if self.mode not in ("fixed", "uniform"):
            raise ValueError(f"unknown clip policy {self.mode!r}")
        if self.lo < 1 or (self.mode == "uniform" and self.hi < self.lo):
            raise ValueError(f"invalid clip bounds ({self.lo}, {self.hi})")

    @classmethod
    def fixed(cls, n: int) -> "ClipPolicy":
        return cls("fixed", n, n)

    @classmethod
    def uniform(cls, lo: int, hi: int) -> "ClipPolicy":
        return cls("uniform", lo, hi)

    def draw_length(self, rng: np.random.Generator) -> int:
        if self.mode == "fixed":
            return self.lo
        return int(rng.integers(self.lo, self.hi + 1))


def clip_indices(total: int, n: int, rng: np.random.Generator) -> np.ndarray:
    """Indices of a contiguous window of length n, wrapping cyclically when total < n."""
    if total >= n:
        start = int(rng.integers(0, total - n + 1))
        return np.arange(start, start + n)
    start = int(rng.integers(0, total))
    return (start + np.arange(n)) % total


def sample_clip(seq: SilhouetteSequence, n_policy: ClipPolicy, rng_seed: SeedLike = None) -> SilhouetteSequence:
    rng = np.random.default_rng(rng_seed)
    n = n_policy.draw_length(rng)
    idx = clip_indices(len(seq), n, rng)
    return seq.with_frames(seq.frames[idx], seq.valid_mask[idx])


# --- on-disk formats -------------------------------------------------------

META_FILE = "meta.json"


def write_frame_dir(seq: SilhouetteSequence, directory: Path) -> Path:
    """Write ``seq`` as zero-padded 8-bit PNGs (foreground = 255) plus metadata."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for t, frame in enumerate(seq.frames):
        ok = cv2.imwrite(str(directory / f"{t:05d}.png"), frame * 255)
        if not ok:
            raise OSError(f"could not write frame {t} to {directory}")
    meta = {"subject_id": seq.subject_id, "sequence_id": seq.sequence_id, "fps": seq.fps}
    (directory / META_FILE).write_text(json.dumps(meta, sort_keys=True))
    return directory


def read_frame_dir(directory: Path, target: tuple[int, int] = FRAME_SIZE) -> SilhouetteSequence:
    directory = Path(directory)
    meta_path = directory / META_FILE
    if not meta_path.exists():
        raise SilhouetteError(f"{directory}: missing {META_FILE}")
    try:
        meta = json.loads(meta_path.read_text())
    except json.JSONDecodeError as exc:
        raise SilhouetteError(f"{meta_path}: malformed metadata ({exc})") from exc
    if "subject_id" not in meta:
        raise SilhouetteError(f"{meta_path}: metadata lacks subject_id")
    paths = sorted(directory.glob("*.png"))
    if not paths:
        raise SilhouetteError(f"{directory}: no frame images")
    frames, valid = [], []
    for p in paths:
        img = cv2.imread(str(p), cv2.IMREAD_GRAYSCALE)
        if img is None:
            raise SilhouetteError(f"{p}: unreadable frame image")
        binary = rebinarize(img)
        if binary.shape == target:
            f, v = binary, bool(binary.any())
        else:
            f, v = center_and_resize(binary, target, return_valid=True)
        frames.append(f)
        valid.append(v)
    return SilhouetteSequence(np.stack(frames), np.array(valid), meta["subject_id"],
                              meta.get("sequence_id", directory.name), float(meta.get("fps", 30.0)))


def write_packed(seq: SilhouetteSequence, path: Path) -> Path:
    """Single-file format: little-endian header, JSON metadata, bit-packed frames."""
    path = Path(path)
    t, h, w = seq.shape
    meta = json.dumps({"subject_id": seq.subject_id, "sequence_id": seq.sequence_id,
                       "fps": seq.fps}, sort_keys=True).encode()
    bits = np.packbits(seq.frames.reshape(-1), bitorder="little")
    with open(path, "wb") as fh:
        fh.write(_PACKED_HEADER.pack(PACKED_MAGIC, PACKED_VERSION, t, h, w, len(meta)))
        fh.write(meta)
        fh.write(bits.tobytes())
    return path


def read_packed(path: Path) -> SilhouetteSequence:
    path = Path(path)
    blob = path.read_bytes()
    if len(blob) < _PACKED_HEADER.size:
        raise SilhouetteError(f"{path}: truncated header")
    magic, version, t, h, w, meta_len = _PACKED_HEADER.unpack_from(blob)
    if magic != PACKED_MAGIC:
        raise SilhouetteError(f"{path}: bad magic {magic!r}")
    if version != PACKED_VERSION:
        raise SilhouetteError(f"{path}: unsupported version {version}")
    if t < 1 or h < 1 or w < 1:
        raise SilhouetteError(f"{path}: corrupt dimensions {(t, h, w)}")
    off = _PACKED_HEADER.size
    try:
        meta = json.loads(blob[off:off + meta_len])
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise SilhouetteError(f"{path}: corrupt metadata") from exc
    off += meta_len
    n_bits = t * h * w
    payload = np.frombuffer(blob, dtype=np.uint8, offset=off)
    if payload.size != (n_bits + 7) // 8:
        raise SilhouetteError(f"{path}: payload size does not match header")
    frames = np.unpackbits(payload, count=n_bits, bitorder="little").reshape(t, h, w)
    return SilhouetteSequence(frames, None, meta["subject_id"], meta.get("sequence_id", path.stem),
                              float(meta.get("fps", 30.0)))
