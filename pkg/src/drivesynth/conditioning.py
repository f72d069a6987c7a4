"""Conditioning signal preparation: depth videos, prompts, reference images.

Depth is normalized per frame to [0, 1] with the (min, max) recorded so the
raw values can be recovered; prompts are embedded through a fixed hashed
vocabulary table; reference images are assigned to segments uniformly at
random with the segment's own first frame excluded, which is what breaks
the spatial correspondence between reference and target.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigurationError, NumericError, ShapeError, UsageError
from .model import TextEmbedding

PROMPT_VOCAB = 4096
_FLAT_FILL = 0.5


@dataclass
class ConditionVideo:
    """Per-frame min-max normalized depth video with its inversion record."""

    video: np.ndarray  # (T, H, W, 1), values in [0, 1]
    source_id: str = ""
    frame_ranges: np.ndarray = None  # (T, 2) per-frame (min, max) of the raw input

    def __post_init__(self):
        self.video = np.asarray(self.video, dtype=np.float64)
        if self.video.ndim != 4 or self.video.shape[3] != 1:
            raise ShapeError(f"condition video must be (T,H,W,1), got {self.video.shape}")

    @property
    def shape(self):
        return self.video.shape


@dataclass
class ReferencePool:
    """Candidate style images: (id, image array, source dataset tag)."""

    images: list = field(default_factory=list)  # [(image_id, array, source_tag)]

    def __post_init__(self):
        if not self.images:
            raise UsageError("reference pool must be nonempty")
        ids = [i for i, _, _ in self.images]
        if len(set(ids)) != len(ids):
            raise ConfigurationError("reference pool ids must be unique")

    @property
    def ids(self):
        return [i for i, _, _ in self.images]

    def image(self, image_id: str) -> np.ndarray:
        for i, arr, _ in self.images:
            if i == image_id:
                return arr
        raise UsageError(f"unknown reference image id {image_id!r}")


@dataclass
class ReferenceAssignment:
    mapping: dict  # segment id -> reference image id
    seed: int


def normalize_depth(raw: np.ndarray, source_id: str = "") -> ConditionVideo:
    """Per-frame min-max scaling to [0, 1]; flat frames map to 0.5."""
    raw = np.asarray(raw, dtype=np.float64)
    if raw.ndim != 4 or raw.shape[3] != 1:
        raise ShapeError(f"raw depth must be (T,H,W,1), got {raw.shape}")
    if not np.all(np.isfinite(raw)):
        raise NumericError("raw depth contains non-finite values")
    T = raw.shape[0]
    out = np.empty_like(raw)
    ranges = np.empty((T, 2))
    for fi in range(T):
        lo = raw[fi].min()
        hi = raw[fi].max()
        ranges[fi] = (lo, hi)
        if hi > lo:
            out[fi] = (raw[fi] - lo) / (hi - lo)
        else:
            out[fi] = _FLAT_FILL
    return ConditionVideo(video=out, source_id=source_id, frame_ranges=ranges)


def denormalize_depth(cond: ConditionVideo) -> np.ndarray:
    """Invert normalize_depth using the recorded per-frame ranges."""
    if cond.frame_ranges is None:
        raise UsageError("condition video carries no normalization record")
    out = np.empty_like(cond.video)
    for fi in range(cond.video.shape[0]):
        lo, hi = cond.frame_ranges[fi]
        if hi > lo:
            out[fi] = cond.video[fi] * (hi - lo) + lo
        else:
            out[fi] = lo
    return out


def assign_random_references(
    segments, pool: ReferencePool, seed: int
) -> ReferenceAssignment:
    """Uniform reference draw per segment, excluding its own first frame.

    ``segments`` is a sequence of (segment id, own first-frame image id);
    the own-frame id may be absent from the pool, in which case nothing is
    excluded for that segment. Deterministic under the seed.
    """
    rng = np.random.default_rng(int(seed))
    pool_ids = pool.ids
    mapping = {}
    for seg_id, own_id in segments:
        admissible = [p for p in pool_ids if p != own_id]
        if not admissible:
            raise ConfigurationError(
                f"reference pool exhausted for segment {seg_id!r} after exclusion"
            )
        mapping[seg_id] = admissible[int(rng.integers(0, len(admissible)))]
    return ReferenceAssignment(mapping=mapping, seed=int(seed))


def _token_row(token: str) -> int:
    h = hashlib.sha256(token.encode("utf-8")).digest()
    return int.from_bytes(h[:8], "little") % PROMPT_VOCAB


_TABLE_CACHE = {}


def _embedding_table(width: int) -> np.ndarray:
    if width not in _TABLE_CACHE:
        rng = np.random.default_rng(0x5EED + width)
        _TABLE_CACHE[width] = rng.normal(0.0, 1.0 / np.sqrt(width),
                                         size=(PROMPT_VOCAB, width))
    return _TABLE_CACHE[width]


def embed_prompt(text: str, width: int = 32) -> TextEmbedding:
    """Whitespace-tokenized hashed embedding; deterministic in (text, width)."""
    if not isinstance(text, str) or not text.strip():
        raise UsageError("prompt must be a nonempty string")
    table = _embedding_table(width)
    rows = [table[_token_row(tok)] for tok in text.strip().split()]
    return TextEmbedding(np.stack(rows))
