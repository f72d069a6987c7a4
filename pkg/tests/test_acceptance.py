"""Acceptance suite: one test per exit criterion, one printed line each.

Run with `pytest tests/test_acceptance.py -v -s` to see the pass lines.
The expensive 500-step training run is shared between the frozen-backbone
and conditioning-dominance criteria.
"""

import json
import time
from pathlib import Path

import numpy as np
import pytest

from drivesynth import kernels
from drivesynth.adapter import attach_adapter, default_branches
from drivesynth.conditioning import (
    ReferencePool,
    assign_random_references,
    embed_prompt,
    normalize_depth,
)
from drivesynth.depth_eval import (
    DepthPair,
    abs_rel,
    align_scale_shift,
    delta_acc,
    rmse,
    ssim,
)
from drivesynth.dvrs import COMPONENTS, DvrsConfig, dvrs_score
from drivesynth.flow import SamplerConfig, sample, smoothed_endpoints
from drivesynth.model import LatentVideo, TextEmbedding, build_model
from drivesynth.pipeline import (
    ArtifactStore,
    build_jobs,
    ingest_sim_dataset,
    load_reference_pool,
    replay_manifest,
    run_generation,
    verify_manifest,
    write_reference_pool,
    write_sim_dataset,
)
from drivesynth.synthdata import (
    make_clips,
    reference_implied_mask,
    structure_correlation,
)

from conftest import make_inputs
from test_dvrs import load_reference_rows
from test_gradcheck import build_gradcheck_problem, run_gradcheck
from toytrain import FIXTURE_PATH, run_toy_training


def _ok(n, message):
    print(f"\nACCEPTANCE {n:>2} PASS  {message}")


@pytest.fixture(scope="module")
def trained500():
    """500-step toy training shared by criteria 3 and 6."""
    config, model, data, branches, history = run_toy_training(
        steps=500, backend=kernels.get_backend()
    )
    return config, model, data, branches, history


def test_criterion_01_dvrs_reference_reproduction():
    """Published component columns reproduce every published final score
    within +/- 0.01 under default weights and rescale. The published table
    carries 11 rows (6 for one target domain, 5 for the other)."""
    start = time.time()
    cfg = DvrsConfig()
    rows = load_reference_rows()
    assert len(rows) == 11
    for row in rows:
        rep = dvrs_score({k: row[k] for k in COMPONENTS}, cfg)
        assert abs(rep.score - row["dvrs"]) <= 0.01, row
    # spot anchors
    by = {(r["group"], r["label"]): r["dvrs"] for r in rows}
    assert by[("cityscapes", "adapted_model")] == 10.63
    assert by[("cityscapes", "base_model")] == 13.42
    assert by[("cityscapes", "translator_a")] == 39.70
    assert by[("cityscapes", "intra_domain")] == 0.99
    assert by[("waymo", "adapted_model")] == 10.47
    assert by[("waymo", "intra_domain")] == 3.34
    elapsed = time.time() - start
    assert elapsed < 1.0
    _ok(1, f"11/11 reference rows within +/-0.01 in {elapsed * 1000:.0f} ms")


def test_criterion_02_zero_adapter_identity(desk_config, desk_model):
    """Freshly attached adapters leave the forward bit-identical, 100 inputs."""
    branch = attach_adapter(desk_config, 4, 4.0, "high", (0.5, 1.0), seed=2)
    rng = np.random.default_rng(0)
    for i in range(100):
        x, cond, text, ref_img = make_inputs(desk_config, seed=i)
        ref = desk_model.encode_reference(ref_img)
        t = float(rng.uniform(0.5, 1.0))
        plain = desk_model.forward(x, cond, text, ref, t).data
        adapted = desk_model.forward(x, cond, text, ref, t, branch).data
        assert np.array_equal(plain, adapted)
    _ok(2, "zero-adapter forward bit-identical on 100 random inputs")


def test_criterion_03_frozen_backbone_invariance(trained500):
    """500 training steps leave the backbone digest unchanged; only the
    adapter factors move."""
    config, model, data, branches, history = trained500
    fresh = build_model(config, seed=101)
    assert model.params.digest() == fresh.params.digest()
    fresh_branches = default_branches(config, 4, 4.0, seed=7)
    for tag in ("high", "low"):
        assert branches[tag].digest() != fresh_branches[tag].digest()
    assert len(history) == 500
    _ok(3, "backbone digest unchanged after 500 steps; adapters differ")


def test_criterion_04_gradient_correctness(tiny_config, tiny_model):
    """Analytic gradients match central differences (eps=1e-4) with relative
    error < 1e-3 on every adapter parameter of the width-16 2-block model."""
    start = time.time()
    sample_, branch = build_gradcheck_problem(tiny_config, tiny_model)
    n_params = sum(s.A.size + s.B.size for s in branch.sites.values())
    worst, checked = run_gradcheck(tiny_model, branch, sample_, stride=1)
    elapsed = time.time() - start
    assert checked == n_params == 1408
    assert worst < 1e-3
    assert elapsed < 120.0
    _ok(4, f"all {checked} adapter grads match FD, worst rel err "
           f"{worst:.2e}, {elapsed:.1f} s")


def test_criterion_05_toy_training_regression():
    """200 seeded steps halve the smoothed total loss and reproduce the
    frozen trajectory bit-exactly (same seeds, numpy kernel backend)."""
    frozen = json.loads(FIXTURE_PATH.read_text())
    _, _, _, _, history = run_toy_training(steps=200, backend="numpy")
    first, last = smoothed_endpoints(history)
    assert last <= 0.5 * first, f"smoothed loss {first:.3f} -> {last:.3f}"
    assert [r.loss for r in history] == frozen["losses"]
    assert [r.branch for r in history] == frozen["branches"]
    assert [r.t_mean for r in history] == frozen["t_means"]
    _ok(5, f"smoothed loss {first:.3f} -> {last:.3f} "
           f"({last / first:.0%}); trajectory bit-exact vs fixture")


def test_criterion_06_conditioning_dominance(trained500):
    """For 20 held-out conditions with randomized references, generated
    structure correlates with the condition more than with the reference's
    implied structure in at least 18 of 20 cases."""
    config, model, data, branches, _ = trained500
    held = make_clips(config, 20, seed=777, prefix="held")
    pool = ReferencePool([(c.clip_id, c.first_frame, "fixture") for c in data.clips])
    assignment = assign_random_references(
        [(c.clip_id, c.clip_id) for c in held], pool, 31337
    )
    by_id = {c.clip_id: c for c in data.clips}
    wins = 0
    for i, clip in enumerate(held):
        cond = normalize_depth(clip.depth_raw, source_id=clip.clip_id)
        ref_clip = by_id[assignment.mapping[clip.clip_id]]
        generated = sample(
            model, branches, LatentVideo(cond.video, role="condition"),
            embed_prompt(clip.prompt, width=config.text_width),
            ref_clip.first_frame, SamplerConfig(steps=16, seed=1000 + i),
        )
        corr_cond = structure_correlation(generated.data, clip.mask)
        corr_ref = structure_correlation(
            generated.data, reference_implied_mask(ref_clip, config.frames)
        )
        wins += corr_cond > corr_ref
    assert wins >= 18, f"condition won only {wins}/20"
    _ok(6, f"condition beats reference structure {wins}/20")


def test_criterion_07_sampler_exactness(tiny_config):
    """A constant velocity field is integrated to the analytic endpoint for
    every step count. Exactness is mathematical: summing N equal float
    increments leaves associativity roundoff of a few ulps, so the assert
    bound is 1e-12 absolute on O(1) values."""
    shape = (tiny_config.frames, tiny_config.height,
             tiny_config.width, tiny_config.channels)
    rng = np.random.default_rng(1)
    target = rng.normal(size=shape)
    cond = LatentVideo(rng.uniform(size=shape[:3] + (1,)), role="condition")
    text = TextEmbedding(rng.normal(size=(2, tiny_config.text_width)))
    branches = default_branches(tiny_config, 2, 2.0, seed=1)

    class ConstStub:
        config = tiny_config

        def __init__(self, field):
            self.field = field

        def forward(self, x_t, condition, text, ref, t, adapter=None):
            return LatentVideo(self.field, role="velocity")

        def encode_reference(self, image):
            return None

    worst = 0.0
    for n in (1, 2, 3, 8, 32):
        seed = 42
        start = np.random.default_rng(seed).standard_normal(shape)
        out = sample(ConstStub(target - start), branches, cond, text, None,
                     SamplerConfig(steps=n, seed=seed))
        np.testing.assert_allclose(out.data, target, rtol=0, atol=1e-12)
        worst = max(worst, float(np.max(np.abs(out.data - target))))
    _ok(7, f"constant-field sampling exact for N in {{1,2,3,8,32}} "
           f"(worst fp residue {worst:.1e})")


def test_criterion_08_annotation_preservation(tmp_path, tiny_config, tiny_model):
    """Manifest entries inherit source annotation digests untouched and
    replaying the manifest regenerates bit-identical clips."""
    clips = make_clips(tiny_config, 4, seed=21)
    write_sim_dataset(tmp_path / "sim", clips)
    write_reference_pool(tmp_path / "pool", clips)
    ingested = ingest_sim_dataset(tmp_path / "sim")
    pool = load_reference_pool(tmp_path / "pool")
    jobs = build_jobs(ingested.clips, pool, seed=5)
    branches = default_branches(tiny_config, 2, 2.0, seed=1)
    store = ArtifactStore(tmp_path / "store")
    manifest = run_generation(jobs, tiny_model, branches, 4, store, global_seed=5)
    assert len(manifest.ok_entries()) == 4
    source = {c.clip_id: c.annotation_digests for c in ingested.clips}
    for entry in manifest.ok_entries():
        assert entry["annotation_digests"] == source[entry["source_clip_id"]]
    assert verify_manifest(manifest, store).all_passed
    assert replay_manifest(manifest, store, pool, tiny_model, branches) == []
    _ok(8, "annotation digests inherited; replay bit-identical for 4/4 clips")


def test_criterion_09_depth_metric_fixtures():
    """Hand-derived metric fixtures hold exactly; delta accuracies are
    monotone on 1000 random pairs."""
    ref = np.array([[1.0, 2.0], [4.0, 8.0]])
    pred = np.array([[1.0, 3.0], [4.0, 4.0]])
    assert abs_rel(DepthPair(pred, ref)) == pytest.approx(0.25)

    ref2 = np.array([[0.0, 0.0], [1.0, 2.0]])
    pred2 = np.array([[9.0, 9.0], [4.0, 6.0]])
    assert rmse(DepthPair(pred2, ref2)) == pytest.approx(np.sqrt(12.5))

    ratio_pair = DepthPair(np.array([[1.1, 1.3], [1.6, 2.0]]), np.ones((2, 2)))
    assert delta_acc(ratio_pair, 1) == pytest.approx(0.25)
    assert delta_acc(ratio_pair, 2) == pytest.approx(0.5)
    assert delta_acc(ratio_pair, 3) == pytest.approx(0.75)

    rng = np.random.default_rng(5)
    img = rng.uniform(0, 1, (16, 16))
    assert ssim(img, img) == pytest.approx(1.0)

    base = rng.uniform(1, 9, (6, 6))
    aligned = align_scale_shift(2.0 * base + 3.0, base, np.ones_like(base, bool))
    np.testing.assert_allclose(aligned, base, atol=1e-9)

    for trial in range(1000):
        r = np.random.default_rng(trial)
        pair = DepthPair(r.uniform(0.5, 10, (4, 4)), r.uniform(0.5, 10, (4, 4)))
        d1, d2, d3 = (delta_acc(pair, k) for k in (1, 2, 3))
        assert d1 <= d2 <= d3
    _ok(9, "hand-derived depth fixtures exact; monotone on 1000 random pairs")


def test_criterion_10_desk_scale_exclusions_documented():
    """The absolute published judge scores, external-benchmark numbers,
    absolute depth table, and segmentation results need the full-size
    backbone plus external judges and perception models; they are declared
    out of desk-scale reach, and the README says so."""
    readme = (Path(__file__).parent.parent / "README.md").read_text()
    assert "not reproduced at desk scale" in readme.lower()
    for marker in ("judge", "depth", "segmentation"):
        assert marker in readme.lower()
    _ok(10, "out-of-reach results declared in README and replaced by "
            "criteria 1-9 plus module invariant suites")
