"""Hot numeric kernels with numba-compiled and pure-numpy twins.

The two call sites that dominate runtime are the multi-head attention core
(forward and backward, called once per block per training step) and the
separable Gaussian window filter behind the structural-similarity metric.
Each has two implementations selected at call time:

* ``numba`` - explicit-loop kernels compiled with ``@njit(cache=True)``;
* ``numpy`` - vectorized fallback, used when numba is not installed.

The default backend is numba when importable; set the environment variable
``DRIVESYNTH_NUMBA=0`` before import (or call :func:`set_backend`) to force
the numpy path. Both paths are deterministic; they may differ in the last
few ulps because summation orders differ, so replay-sensitive callers pin
one backend. ``benchmarks/bench_kernels.py`` times the two side by side.
"""

from __future__ import annotations

import math
import os

import numpy as np

try:
    from numba import njit

    HAS_NUMBA = True
except ImportError:  # pragma: no cover - exercised only without numba
    HAS_NUMBA = False

    def njit(*args, **kwargs):
        def wrap(fn):
            return fn

        if args and callable(args[0]):
            return args[0]
        return wrap


_env = os.environ.get("DRIVESYNTH_NUMBA", "").strip()
if _env == "0" or not HAS_NUMBA:
    _backend = "numpy"
else:
    _backend = "numba"


def get_backend() -> str:
    return _backend


def set_backend(name: str) -> None:
    """Select 'numba' or 'numpy' for all kernel dispatch from now on."""
    global _backend
    if name not in ("numba", "numpy"):
        raise ValueError(f"unknown kernel backend {name!r}")
    if name == "numba" and not HAS_NUMBA:
        raise ValueError("numba backend requested but numba is not installed")
    _backend = name


# ---------------------------------------------------------------------------
# Multi-head attention core.
#
# Shapes: q (h, nq, dh), k and v (h, nk, dh). Scores are scaled by
# 1/sqrt(dh) before the row-wise softmax. The forward returns the attention
# weights so the backward does not recompute them.
# ---------------------------------------------------------------------------


def _attn_forward_numpy(q, k, v):
    scale = 1.0 / math.sqrt(q.shape[-1])
    scores = np.einsum("hqd,hkd->hqk", q, k) * scale
    scores -= scores.max(axis=-1, keepdims=True)
    attn = np.exp(scores)
    attn /= attn.sum(axis=-1, keepdims=True)
    out = np.einsum("hqk,hkd->hqd", attn, v)
    return out, attn


def _attn_backward_numpy(q, k, v, attn, d_out):
    scale = 1.0 / math.sqrt(q.shape[-1])
    dv = np.einsum("hqk,hqd->hkd", attn, d_out)
    d_attn = np.einsum("hqd,hkd->hqk", d_out, v)
    # softmax backward: rows of attn sum to 1
    inner = (d_attn * attn).sum(axis=-1, keepdims=True)
    d_scores = attn * (d_attn - inner)
    dq = np.einsum("hqk,hkd->hqd", d_scores, k) * scale
    dk = np.einsum("hqk,hqd->hkd", d_scores, q) * scale
    return dq, dk, dv


@njit(cache=True)
def _attn_forward_nb(q, k, v):  # pragma: no cover - measured via dispatch tests
    h, nq, dh = q.shape
    nk = k.shape[1]
    scale = 1.0 / math.sqrt(dh)
    out = np.empty((h, nq, dh))
    attn = np.empty((h, nq, nk))
    for hi in range(h):
        for i in range(nq):
            m = -1e300
            for j in range(nk):
                s = 0.0
                for d in range(dh):
                    s += q[hi, i, d] * k[hi, j, d]
                s *= scale
                attn[hi, i, j] = s
                if s > m:
                    m = s
            z = 0.0
            for j in range(nk):
                e = math.exp(attn[hi, i, j] - m)
                attn[hi, i, j] = e
                z += e
            for j in range(nk):
                attn[hi, i, j] /= z
            for d in range(dh):
                acc = 0.0
                for j in range(nk):
                    acc += attn[hi, i, j] * v[hi, j, d]
                out[hi, i, d] = acc
    return out, attn


@njit(cache=True)
def _attn_backward_nb(q, k, v, attn, d_out):  # pragma: no cover
    h, nq, dh = q.shape
    nk = k.shape[1]
    scale = 1.0 / math.sqrt(dh)
    dq = np.zeros((h, nq, dh))
    dk = np.zeros((h, nk, dh))
    dv = np.zeros((h, nk, dh))
    d_scores = np.empty(nk)
    for hi in range(h):
        for i in range(nq):
            inner = 0.0
            for j in range(nk):
                da = 0.0
                for d in range(dh):
                    da += d_out[hi, i, d] * v[hi, j, d]
                d_scores[j] = da
                inner += da * attn[hi, i, j]
            for j in range(nk):
                ds = attn[hi, i, j] * (d_scores[j] - inner)
                for d in range(dh):
                    dq[hi, i, d] += ds * k[hi, j, d] * scale
                    dk[hi, j, d] += ds * q[hi, i, d] * scale
                    dv[hi, j, d] += attn[hi, i, j] * d_out[hi, i, d]
    return dq, dk, dv


def attn_forward(q, k, v):
    """Scaled-dot-product attention. Returns (out, attention weights)."""
    if _backend == "numba":
        return _attn_forward_nb(
            np.ascontiguousarray(q), np.ascontiguousarray(k), np.ascontiguousarray(v)
        )
    return _attn_forward_numpy(q, k, v)


def attn_backward(q, k, v, attn, d_out):
    """Gradients (dq, dk, dv) given the cached attention weights."""
    if _backend == "numba":
        return _attn_backward_nb(
            np.ascontiguousarray(q),
            np.ascontiguousarray(k),
            np.ascontiguousarray(v),
            np.ascontiguousarray(attn),
            np.ascontiguousarray(d_out),
        )
    return _attn_backward_numpy(q, k, v, attn, d_out)


# ---------------------------------------------------------------------------
# Separable Gaussian window filter, 'valid' mode (no padding). Output is
# (H - w + 1, W - w + 1) for window length w. Tap loops accumulate in the
# same order on both paths.
# ---------------------------------------------------------------------------


def gaussian_window(length: int = 11, sigma: float = 1.5) -> np.ndarray:
    """Normalized 1-D Gaussian taps centred on the window."""
    half = (length - 1) / 2.0
    xs = np.arange(length, dtype=np.float64) - half
    w = np.exp(-(xs**2) / (2.0 * sigma * sigma))
    return w / w.sum()


def _gaussian_filter_valid_numpy(img, taps):
    w = taps.shape[0]
    h_out = img.shape[0] - w + 1
    w_out = img.shape[1] - w + 1
    rows = np.zeros((h_out, img.shape[1]))
    for t in range(w):
        rows += taps[t] * img[t : t + h_out, :]
    out = np.zeros((h_out, w_out))
    for t in range(w):
        out += taps[t] * rows[:, t : t + w_out]
    return out


@njit(cache=True)
def _gaussian_filter_valid_nb(img, taps):  # pragma: no cover
    w = taps.shape[0]
    h_out = img.shape[0] - w + 1
    w_out = img.shape[1] - w + 1
    rows = np.zeros((h_out, img.shape[1]))
    for t in range(w):
        for i in range(h_out):
            for j in range(img.shape[1]):
                rows[i, j] += taps[t] * img[i + t, j]
    out = np.zeros((h_out, w_out))
    for t in range(w):
        for i in range(h_out):
            for j in range(w_out):
                out[i, j] += taps[t] * rows[i, j + t]
    return out


def gaussian_filter_valid(img: np.ndarray, taps: np.ndarray) -> np.ndarray:
    """Separable Gaussian smoothing without padding; needs img >= window."""
    if img.shape[0] < taps.shape[0] or img.shape[1] < taps.shape[0]:
        raise ValueError(
            f"image {img.shape} smaller than the {taps.shape[0]}-tap window"
        )
    img = np.ascontiguousarray(img, dtype=np.float64)
    taps = np.ascontiguousarray(taps, dtype=np.float64)
    if _backend == "numba":
        return _gaussian_filter_valid_nb(img, taps)
    return _gaussian_filter_valid_numpy(img, taps)
