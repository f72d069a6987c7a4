"""Procedural latent-clip generator used as the desk-scale simulator.

Each clip is a rectangle moving over a background with depth ordering: the
condition (depth) video determines where the rectangle is per frame, and a
per-clip style (channel offsets and signal amplitude) determines how the
clip looks. Reference images are first frames of other clips, so they
carry both a style and a *different* layout - exactly the situation in
which generation must follow the condition for structure and the reference
only for appearance. Rectangle tracks double as real per-frame bounding
box annotations for the pipeline.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .conditioning import embed_prompt, normalize_depth
from .flow import TrainSample
from .model import BackboneConfig, LatentVideo
from .util import rng_for

DEPTH_FAR = 10.0
DEPTH_NEAR = 4.0
_SIGNAL_DIR_SEED = 0xD1F


def signal_direction(channels: int) -> np.ndarray:
    """Fixed unit vector along which the structure signal lives in channel space."""
    rng = np.random.default_rng(_SIGNAL_DIR_SEED)
    v = rng.normal(size=channels) + 1.0
    return v / np.linalg.norm(v)


@dataclass
class Style:
    """Per-clip appearance: channel offsets plus structure-signal amplitude."""

    base: np.ndarray
    amp: float


def render_latent(mask: np.ndarray, style: Style, noise_rng=None) -> np.ndarray:
    """Compose a latent video: style offsets plus the mask along the signal
    direction. Structure comes entirely from the mask, appearance entirely
    from the style."""
    x = style.base + style.amp * mask[..., None] * signal_direction(style.base.shape[0])
    if noise_rng is not None:
        x = x + 0.05 * noise_rng.standard_normal(x.shape)
    return x


@dataclass
class SynthClip:
    clip_id: str
    mask: np.ndarray        # (T, H, W) rectangle occupancy in {0, 1}
    depth_raw: np.ndarray   # (T, H, W, 1) simulated depth before normalization
    x_1: np.ndarray         # (T, H, W, C) latent rendered in the clip's own style
    bboxes: list            # per-frame [y0, x0, y1, x1]
    prompt: str
    style: Style

    @property
    def first_frame(self) -> np.ndarray:
        return self.x_1[0]

    def annotation_blobs(self) -> list:
        """Canonical per-frame annotation bytes (bbox labels)."""
        return [
            json.dumps({"frame": i, "bbox": [int(v) for v in bb], "track_id": 0},
                       sort_keys=True).encode("utf-8")
            for i, bb in enumerate(self.bboxes)
        ]


def _rect_track(rng, frames, height, width, patch):
    """Cell-aligned rectangle track: geometry moves at patch granularity so
    the structure signal is compact in token space (one value per patch)."""
    t_p, h_p, w_p = patch
    cells_h, cells_w = height // h_p, width // w_p
    rh = int(rng.integers(1, max(cells_h // 2, 1) + 1))
    rw = int(rng.integers(1, max(cells_w // 2, 1) + 1))
    y = int(rng.integers(0, cells_h - rh + 1))
    x = int(rng.integers(0, cells_w - rw + 1))
    dy = int(rng.integers(-1, 2))
    dx = int(rng.integers(-1, 2))
    if dy == 0 and dx == 0:
        dx = 1
    boxes = []
    for fi in range(frames):
        boxes.append((y * h_p, x * w_p, (y + rh) * h_p, (x + rw) * w_p))
        if (fi + 1) % t_p == 0:  # move once per time-patch block
            y += dy
            x += dx
            if y < 0 or y + rh > cells_h:
                dy = -dy
                y += 2 * dy
            if x < 0 or x + rw > cells_w:
                dx = -dx
                x += 2 * dx
            y = min(max(y, 0), cells_h - rh)
            x = min(max(x, 0), cells_w - rw)
    return boxes


def make_clip(clip_id: str, config: BackboneConfig, seed: int) -> SynthClip:
    rng = np.random.default_rng(int(seed))
    T, H, W, C = config.frames, config.height, config.width, config.channels
    boxes = _rect_track(rng, T, H, W, config.patch)
    mask = np.zeros((T, H, W))
    for i, (y0, x0, y1, x1) in enumerate(boxes):
        mask[i, y0:y1, x0:x1] = 1.0

    depth = DEPTH_FAR - (DEPTH_FAR - DEPTH_NEAR) * mask
    depth = depth + 0.05 * rng.standard_normal((T, H, W))
    depth_raw = depth[..., None]

    # appearance: per-channel base offsets with fixed signs plus the
    # structure signal along the shared channel direction; the structure
    # amplitude dominates so layout is the main thing worth learning
    signs = np.where(np.arange(C) % 2 == 0, 1.0, -1.0)
    style = Style(base=signs * rng.uniform(1.2, 2.2, size=C),
                  amp=float(rng.uniform(2.6, 3.4)))
    x_1 = render_latent(mask, style, noise_rng=rng)

    # prompts must not identify the clip: structure knowledge has to come
    # from the condition pathway, not from memorized prompt tokens
    prompt = f"urban drive lane {int(rng.integers(0, 4))}"
    return SynthClip(
        clip_id=clip_id, mask=mask, depth_raw=depth_raw, x_1=x_1,
        bboxes=[list(b) for b in boxes], prompt=prompt, style=style,
    )


def make_clips(config: BackboneConfig, n: int, seed: int, prefix: str = "clip") -> list:
    base = rng_for(seed, "synthclips")
    seeds = base.integers(0, 2**63 - 1, size=n)
    return [make_clip(f"{prefix}{i:03d}", config, int(seeds[i])) for i in range(n)]


@dataclass
class FixtureDataset:
    clips: list
    samples: list            # [TrainSample]
    assignment: dict         # segment id -> reference clip id
    pool_images: dict        # clip id -> first-frame image

    def clip(self, clip_id: str) -> SynthClip:
        for c in self.clips:
            if c.clip_id == clip_id:
                return c
        raise KeyError(clip_id)


def build_fixture_dataset(config: BackboneConfig, n_clips: int, seed: int,
                          prefix: str = "clip") -> FixtureDataset:
    """Clips plus TrainSamples with randomized cross-clip references.

    The training target of each sample is rendered with its *assigned
    reference's* style over its own mask: structure must be read from the
    condition, appearance from the reference.
    """
    from .conditioning import ReferencePool, assign_random_references

    clips = make_clips(config, n_clips, seed, prefix=prefix)
    pool = ReferencePool([(c.clip_id, c.first_frame, "fixture") for c in clips])
    assignment = assign_random_references(
        [(c.clip_id, c.clip_id) for c in clips], pool, rng_for(seed, "refs").integers(0, 2**31)
    )
    noise_rng = rng_for(seed, "noise")
    samples = []
    by_id = {c.clip_id: c for c in clips}
    for c in clips:
        cond = normalize_depth(c.depth_raw, source_id=c.clip_id)
        ref_clip = by_id[assignment.mapping[c.clip_id]]
        target = render_latent(c.mask, ref_clip.style, noise_rng=noise_rng)
        samples.append(
            TrainSample(
                sample_id=c.clip_id,
                x_1=LatentVideo(target, role="data_sample"),
                condition=LatentVideo(cond.video, role="condition"),
                text=embed_prompt(c.prompt, width=config.text_width),
                reference=ref_clip.first_frame,
                x_0=LatentVideo(noise_rng.standard_normal(target.shape), role="noisy_state"),
            )
        )
    return FixtureDataset(
        clips=clips, samples=samples, assignment=assignment.mapping,
        pool_images={c.clip_id: c.first_frame for c in clips},
    )


# ---------------------------------------------------------------------------
# Structure-correlation oracle for the conditioning-dominance check
# ---------------------------------------------------------------------------


def _downsample2(video: np.ndarray) -> np.ndarray:
    T, H, W = video.shape
    return video.reshape(T, H // 2, 2, W // 2, 2).mean(axis=(2, 4))


def structure_signal(video: np.ndarray) -> np.ndarray:
    """Project a (T,H,W,C) clip onto the structure direction, downsampled 2x."""
    proj = video @ signal_direction(video.shape[-1])
    return _downsample2(proj)


def _pearson(a: np.ndarray, b: np.ndarray) -> float:
    a = a.ravel() - a.mean()
    b = b.ravel() - b.mean()
    denom = np.linalg.norm(a) * np.linalg.norm(b)
    if denom == 0.0:
        return 0.0
    return float(a @ b / denom)


def structure_correlation(generated: np.ndarray, mask: np.ndarray) -> float:
    """Correlation between a generated clip's structure signal and a mask track."""
    return _pearson(structure_signal(generated), _downsample2(mask))


def reference_implied_mask(ref_clip: SynthClip, frames: int) -> np.ndarray:
    """Static mask video a reference image would imply (its first frame, tiled)."""
    return np.repeat(ref_clip.mask[0][None], frames, axis=0)
