"""Depth-preservation metrics: SSIM, AbsRel, RMSE, delta accuracies.

Ratio metrics run over a validity mask (reference > 0 by default) after an
optional closed-form scale/shift alignment, since conditions produced by
relative-depth predictors are only defined up to an affine map. SSIM uses
an 11-tap Gaussian window (sigma 1.5) with the standard stabilizer
constants k1=0.01, k2=0.03, computed without padding.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import kernels
from .errors import ShapeError, UsageError


@dataclass
class DepthPair:
    pred: np.ndarray
    ref: np.ndarray
    mask: np.ndarray = None

    def __post_init__(self):
        self.pred = np.asarray(self.pred, dtype=np.float64)
        self.ref = np.asarray(self.ref, dtype=np.float64)
        if self.pred.shape != self.ref.shape:
            raise ShapeError(f"pred {self.pred.shape} != ref {self.ref.shape}")
        if self.mask is None:
            self.mask = self.ref > 0
        else:
            self.mask = np.asarray(self.mask, dtype=bool)
            if self.mask.shape != self.ref.shape:
                raise ShapeError("mask shape differs from depth shape")


@dataclass
class DepthMetrics:
    ssim: float
    abs_rel: float
    rmse: float
    delta1: float
    delta2: float
    delta3: float
    aligned: bool = True

    def as_dict(self):
        return {
            "ssim": self.ssim, "abs_rel": self.abs_rel, "rmse": self.rmse,
            "delta1": self.delta1, "delta2": self.delta2, "delta3": self.delta3,
            "aligned": self.aligned,
        }


def _masked(pair: DepthPair):
    if not pair.mask.any():
        raise UsageError("empty validity mask")
    return pair.pred[pair.mask], pair.ref[pair.mask]


def abs_rel(pair: DepthPair) -> float:
    """Mean |pred - ref| / ref over the mask."""
    p, r = _masked(pair)
    return float(np.mean(np.abs(p - r) / r))


def rmse(pair: DepthPair) -> float:
    """Root mean squared error over the mask."""
    p, r = _masked(pair)
    return float(np.sqrt(np.mean((p - r) ** 2)))


def delta_acc(pair: DepthPair, k: int) -> float:
    """Fraction of masked pixels with max(pred/ref, ref/pred) < 1.25**k."""
    if k not in (1, 2, 3):
        raise UsageError(f"k must be 1, 2 or 3, got {k}")
    p, r = _masked(pair)
    if np.any(p <= 0):
        raise UsageError("delta accuracy needs positive predictions on the mask")
    ratio = np.maximum(p / r, r / p)
    return float(np.mean(ratio < 1.25**k))


def align_scale_shift(pred: np.ndarray, ref: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Least-squares s*pred + b fit to ref over the mask (closed form)."""
    mask = np.asarray(mask, dtype=bool)
    p = pred[mask]
    r = ref[mask]
    if p.size < 2 or np.unique(r).size < 2 or np.ptp(p) == 0:
        raise UsageError("degenerate mask for scale/shift alignment")
    pm, rm = p.mean(), r.mean()
    var = np.mean((p - pm) ** 2)
    cov = np.mean((p - pm) * (r - rm))
    s = cov / var
    b = rm - s * pm
    return s * pred + b


def ssim(a: np.ndarray, b: np.ndarray, data_range: float = 1.0,
         window: int = 11, sigma: float = 1.5) -> float:
    """Mean local structural similarity with a Gaussian window."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 2:
        raise ShapeError(f"ssim needs two equal 2-D images, got {a.shape} vs {b.shape}")
    taps = kernels.gaussian_window(window, sigma)
    c1 = (0.01 * data_range) ** 2
    c2 = (0.03 * data_range) ** 2
    mu_a = kernels.gaussian_filter_valid(a, taps)
    mu_b = kernels.gaussian_filter_valid(b, taps)
    var_a = kernels.gaussian_filter_valid(a * a, taps) - mu_a**2
    var_b = kernels.gaussian_filter_valid(b * b, taps) - mu_b**2
    cov = kernels.gaussian_filter_valid(a * b, taps) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a**2 + mu_b**2 + c1) * (var_a + var_b + c2)
    return float(np.mean(num / den))


def evaluate_pair(pair: DepthPair, align: bool = True,
                  data_range: float = 1.0) -> DepthMetrics:
    """All metrics for one frame pair; alignment applies to the ratio metrics.

    Predictions are floored at the smallest positive masked reference value
    before the ratio metrics, since alignment can push them nonpositive.
    SSIM is computed on the depth maps normalized to [0, 1] by the
    reference frame's own range, so the window statistics live on a fixed scale.
    """
    if align:
        aligned = align_scale_shift(pair.pred, pair.ref, pair.mask)
        work = DepthPair(aligned, pair.ref, pair.mask)
    else:
        work = pair
    _, r = _masked(work)
    clamped = np.clip(work.pred, np.min(r[r > 0]) if (r > 0).any() else 1e-6, None)
    ratio_pair = DepthPair(clamped, work.ref, work.mask)

    lo, hi = pair.ref.min(), pair.ref.max()
    scale = (hi - lo) if hi > lo else 1.0
    ref_n = (pair.ref - lo) / scale
    pred_n = np.clip((pair.pred - lo) / scale, 0.0, 1.0)
    return DepthMetrics(
        ssim=ssim(pred_n, ref_n, data_range=data_range),
        abs_rel=abs_rel(ratio_pair),
        rmse=rmse(work),
        delta1=delta_acc(ratio_pair, 1),
        delta2=delta_acc(ratio_pair, 2),
        delta3=delta_acc(ratio_pair, 3),
        aligned=align,
    )


def evaluate_directory_pair(pred_dir, ref_dir, align: bool = True):
    """Match *.npy frames by filename; per-frame metrics plus dataset means."""
    from pathlib import Path

    from .util import load_array_npy

    pred_dir, ref_dir = Path(pred_dir), Path(ref_dir)
    names = sorted(p.name for p in pred_dir.glob("*.npy"))
    if not names:
        raise UsageError(f"no .npy frames found in {pred_dir}")
    per_frame = []
    for name in names:
        ref_path = ref_dir / name
        if not ref_path.exists():
            raise UsageError(f"reference frame missing for {name}")
        pred = load_array_npy(pred_dir / name)
        ref = load_array_npy(ref_path)
        metrics = evaluate_pair(DepthPair(pred, ref), align=align)
        per_frame.append({"frame": name, **metrics.as_dict()})
    keys = ("ssim", "abs_rel", "rmse", "delta1", "delta2", "delta3")
    means = {k: float(np.mean([m[k] for m in per_frame])) for k in keys}
    return per_frame, means
