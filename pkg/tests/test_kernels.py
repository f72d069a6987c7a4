"""Numba and numpy kernel paths must agree; filters match a direct oracle."""

import numpy as np
import pytest

from drivesynth import kernels


needs_numba = pytest.mark.skipif(not kernels.HAS_NUMBA, reason="numba not installed")


@pytest.fixture()
def restore_backend():
    before = kernels.get_backend()
    yield
    kernels.set_backend(before)


def _rand_qkv(seed=0, h=3, nq=17, nk=23, dh=8):
    rng = np.random.default_rng(seed)
    return (rng.normal(size=(h, nq, dh)), rng.normal(size=(h, nk, dh)),
            rng.normal(size=(h, nk, dh)))


def test_attention_rows_sum_to_one(restore_backend):
    q, k, v = _rand_qkv()
    for backend in ("numpy",) + (("numba",) if kernels.HAS_NUMBA else ()):
        kernels.set_backend(backend)
        _, attn = kernels.attn_forward(q, k, v)
        np.testing.assert_allclose(attn.sum(axis=-1), 1.0, rtol=1e-12)


@needs_numba
def test_attention_paths_agree(restore_backend):
    q, k, v = _rand_qkv(seed=5)
    g = np.random.default_rng(6).normal(size=q.shape)
    kernels.set_backend("numpy")
    o1, a1 = kernels.attn_forward(q, k, v)
    b1 = kernels.attn_backward(q, k, v, a1, g)
    kernels.set_backend("numba")
    o2, a2 = kernels.attn_forward(q, k, v)
    b2 = kernels.attn_backward(q, k, v, a2, g)
    np.testing.assert_allclose(o1, o2, rtol=1e-12, atol=1e-14)
    for x, y in zip(b1, b2):
        np.testing.assert_allclose(x, y, rtol=1e-10, atol=1e-13)


def test_attention_backward_matches_finite_differences(restore_backend):
    kernels.set_backend("numpy")
    q, k, v = _rand_qkv(seed=1, h=1, nq=4, nk=5, dh=3)
    g = np.random.default_rng(2).normal(size=(1, 4, 3))

    def loss(q_, k_, v_):
        out, _ = kernels.attn_forward(q_, k_, v_)
        return float((out * g).sum())

    _, attn = kernels.attn_forward(q, k, v)
    dq, dk, dv = kernels.attn_backward(q, k, v, attn, g)
    eps = 1e-6
    for arr, grad in ((q, dq), (k, dk), (v, dv)):
        flat, gflat = arr.ravel(), grad.ravel()
        for idx in range(0, flat.size, 7):
            orig = flat[idx]
            flat[idx] = orig + eps
            lp = loss(q, k, v)
            flat[idx] = orig - eps
            lm = loss(q, k, v)
            flat[idx] = orig
            fd = (lp - lm) / (2 * eps)
            assert abs(fd - gflat[idx]) < 1e-6 * max(1.0, abs(fd))


def test_gaussian_window_normalized():
    taps = kernels.gaussian_window(11, 1.5)
    assert taps.shape == (11,)
    assert abs(taps.sum() - 1.0) < 1e-12
    assert np.all(taps > 0)
    np.testing.assert_allclose(taps, taps[::-1])  # symmetric


def test_gaussian_filter_matches_direct_convolution(restore_backend):
    # oracle: dense 2-D valid convolution with the outer-product window
    rng = np.random.default_rng(3)
    img = rng.normal(size=(15, 18))
    taps = kernels.gaussian_window(11, 1.5)
    win = np.outer(taps, taps)
    h_out, w_out = img.shape[0] - 10, img.shape[1] - 10
    expected = np.zeros((h_out, w_out))
    for i in range(h_out):
        for j in range(w_out):
            expected[i, j] = (img[i : i + 11, j : j + 11] * win).sum()
    for backend in ("numpy",) + (("numba",) if kernels.HAS_NUMBA else ()):
        kernels.set_backend(backend)
        got = kernels.gaussian_filter_valid(img, taps)
        np.testing.assert_allclose(got, expected, rtol=1e-12, atol=1e-14)


def test_gaussian_filter_constant_image_is_preserved(restore_backend):
    kernels.set_backend("numpy")
    img = np.full((12, 12), 3.25)
    out = kernels.gaussian_filter_valid(img, kernels.gaussian_window())
    np.testing.assert_allclose(out, 3.25, rtol=1e-12)


def test_gaussian_filter_rejects_small_images():
    with pytest.raises(ValueError):
        kernels.gaussian_filter_valid(np.ones((5, 5)), kernels.gaussian_window(11))


def test_set_backend_rejects_unknown():
    with pytest.raises(ValueError):
        kernels.set_backend("cuda")
