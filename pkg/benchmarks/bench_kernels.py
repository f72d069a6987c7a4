"""Time the numba kernel path against the pure-numpy fallback.

Covers the two hot kernels (attention core forward/backward, SSIM Gaussian
window filter) plus one full model forward. Run:

    python3 benchmarks/bench_kernels.py [--repeats 50]
"""

import argparse
import time

import numpy as np

from drivesynth import kernels
from drivesynth.depth_eval import ssim
from drivesynth.model import BackboneConfig, LatentVideo, TextEmbedding, build_model


def timed(fn, repeats):
    fn()  # warmup / compile
    start = time.perf_counter()
    for _ in range(repeats):
        fn()
    return (time.perf_counter() - start) / repeats


def bench(name, fn, repeats, rows):
    results = {}
    for backend in ("numpy", "numba") if kernels.HAS_NUMBA else ("numpy",):
        kernels.set_backend(backend)
        results[backend] = timed(fn, repeats)
    row = {"kernel": name, **{b: t * 1e3 for b, t in results.items()}}
    if "numba" in results:
        row["speedup"] = results["numpy"] / results["numba"]
    rows.append(row)


def main():
    parser = argparse.ArgumentParser()
    parser.add_argument("--repeats", type=int, default=50)
    args = parser.parse_args()

    rng = np.random.default_rng(0)
    rows = []

    for label, (h, nq, nk, dh) in (
        ("attn fwd 4x64x64x16", (4, 64, 64, 16)),
        ("attn fwd 8x256x256x32", (8, 256, 256, 32)),
    ):
        q = rng.normal(size=(h, nq, dh))
        k = rng.normal(size=(h, nk, dh))
        v = rng.normal(size=(h, nk, dh))
        bench(label, lambda q=q, k=k, v=v: kernels.attn_forward(q, k, v),
              args.repeats, rows)

    q = rng.normal(size=(4, 64, 16))
    k = rng.normal(size=(4, 64, 16))
    v = rng.normal(size=(4, 64, 16))
    g = rng.normal(size=(4, 64, 16))
    _, attn = kernels.attn_forward(q, k, v)
    bench("attn bwd 4x64x64x16",
          lambda: kernels.attn_backward(q, k, v, attn, g), args.repeats, rows)

    img_small = rng.uniform(0, 1, (64, 64))
    img_big = rng.uniform(0, 1, (512, 512))
    taps = kernels.gaussian_window()
    bench("gauss filter 64x64",
          lambda: kernels.gaussian_filter_valid(img_small, taps),
          args.repeats, rows)
    bench("gauss filter 512x512",
          lambda: kernels.gaussian_filter_valid(img_big, taps),
          max(args.repeats // 5, 3), rows)
    other = np.clip(img_big + rng.normal(0, 0.1, img_big.shape), 0, 1)
    bench("ssim 512x512", lambda: ssim(img_big, other),
          max(args.repeats // 5, 3), rows)

    config = BackboneConfig()
    model = build_model(config, seed=0)
    xv = LatentVideo(
        rng.normal(size=(config.frames, config.height, config.width, config.channels)),
        role="noisy_state",
    )
    cv = LatentVideo(
        rng.uniform(size=(config.frames, config.height, config.width, 1)),
        role="condition",
    )
    tv = TextEmbedding(rng.normal(size=(4, config.text_width)))
    ref = model.encode_reference(
        rng.normal(size=(config.height, config.width, config.channels))
    )
    bench("model forward (desk cfg)",
          lambda: model.forward(xv, cv, tv, ref, 0.5), args.repeats, rows)

    width = max(len(r["kernel"]) for r in rows) + 2
    header = f"{'kernel':<{width}}{'numpy ms':>10}"
    if kernels.HAS_NUMBA:
        header += f"{'numba ms':>10}{'speedup':>9}"
    print(header)
    print("-" * len(header))
    for r in rows:
        line = f"{r['kernel']:<{width}}{r['numpy']:>10.3f}"
        if "numba" in r:
            line += f"{r['numba']:>10.3f}{r['speedup']:>8.1f}x"
        print(line)
    if not kernels.HAS_NUMBA:
        print("\nnumba not installed; only the numpy fallback was timed")


if __name__ == "__main__":
    main()
