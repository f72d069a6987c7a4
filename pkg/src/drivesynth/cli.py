"""Command-line entry point.

Subcommands: train, generate, build-dataset, dvrs, depth-eval, report.
Every run is reproducible from (config file, seed); artifacts carry content
digests. Exit codes are stable:

    0  success (including partial build-dataset failures, which are recorded)
    2  configuration error (bad config file, unknown keys, bad dimensions)
    3  numeric failure during training
    4  dataset build where every job failed
    5  judge unreachable or persistently invalid
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from .adapter import default_branches, load_branch, save_branch
from .config import RunConfig, default_config_dict, load_config
from .conditioning import ReferencePool, embed_prompt, normalize_depth
from .dvrs import (
    DEFAULT_PROTOTYPE,
    DvrsConfig,
    DvrsEvaluator,
    MockJudge,
    RemoteJudge,
    Segment,
)
from .errors import ConfigurationError, JudgeError, NumericError, UsageError
from .flow import SamplerConfig, sample, smoothed_endpoints, train_adapters
from .model import LatentVideo, build_model
from .pipeline import (
    ArtifactStore,
    DatasetManifest,
    build_jobs,
    ingest_sim_dataset,
    load_reference_pool,
    run_generation,
    verify_manifest,
    write_reference_pool,
    write_sim_dataset,
)
from .synthdata import build_fixture_dataset, make_clips
from .util import derive_seed, dump_jsonl, load_array_npy, load_jsonl, save_array_npy

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERIC = 3
EXIT_ALL_JOBS_FAILED = 4
EXIT_JUDGE = 5


def _build_model_from(cfg: RunConfig):
    return build_model(cfg.backbone_config(), derive_seed(cfg.seed, "backbone"))


def _training_dataset(cfg: RunConfig, model):
    pl = cfg["pipeline"]
    if pl["source"] == "procedural":
        fixture = build_fixture_dataset(
            model.config, pl["fixture_clips"], derive_seed(cfg.seed, "fixture")
        )
        return fixture.samples
    report = ingest_sim_dataset(pl["root"])
    if not report.clips:
        raise UsageError(f"no usable clips under {pl['root']}")
    from .flow import TrainSample

    pool = _reference_pool(cfg, report.clips)
    from .conditioning import assign_random_references

    assignment = assign_random_references(
        [(c.clip_id, c.clip_id) for c in report.clips], pool,
        derive_seed(cfg.seed, "refs"),
    )
    noise_rng = np.random.default_rng(derive_seed(cfg.seed, "noise"))
    samples = []
    for c in report.clips:
        if not c.latent_path:
            raise UsageError(f"clip {c.clip_id} has no latent; cannot train on it")
        latent = load_array_npy(c.latent_path)
        cond = normalize_depth(load_array_npy(c.depth_path), source_id=c.clip_id)
        samples.append(
            TrainSample(
                sample_id=c.clip_id,
                x_1=LatentVideo(latent, role="data_sample"),
                condition=LatentVideo(cond.video, role="condition"),
                text=embed_prompt(c.prompt, width=model.config.text_width),
                reference=pool.image(assignment.mapping[c.clip_id]),
                x_0=LatentVideo(noise_rng.standard_normal(latent.shape), role="noisy_state"),
            )
        )
    return samples


def _reference_pool(cfg: RunConfig, clips=None) -> ReferencePool:
    pool_dir = cfg["pipeline"]["reference_pool"]
    if pool_dir:
        return load_reference_pool(pool_dir)
    fixture = build_fixture_dataset(
        cfg.backbone_config(), cfg["pipeline"]["fixture_clips"],
        derive_seed(cfg.seed, "fixture"),
    )
    return ReferencePool(
        [(c.clip_id, c.first_frame, "fixture") for c in fixture.clips]
    )


def cmd_train(args) -> int:
    cfg = load_config(args.config)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    model = _build_model_from(cfg)
    ad = cfg["adapter"]
    branches = default_branches(
        model.config, ad["rank"], ad["alpha"],
        derive_seed(cfg.seed, "adapter"), boundary=ad["boundary"],
    )
    dataset = _training_dataset(cfg, model)
    tr = cfg["training"]
    branches, history = train_adapters(
        model, branches, dataset, steps=tr["steps"],
        learning_rate=tr["learning_rate"], seed=derive_seed(cfg.seed, "train"),
        batch_size=tr["batch_size"],
    )
    digests = {}
    for tag, br in branches.items():
        digests[tag] = save_branch(out / f"adapter_{tag}.npz", br)
    dump_jsonl(out / "loss_log.jsonl", (r.as_dict() for r in history))
    first, last = smoothed_endpoints(history)
    meta = {
        "backbone_digest": model.digest(),
        "checkpoint_digests": digests,
        "smoothed_loss_initial": first,
        "smoothed_loss_final": last,
        "steps": tr["steps"],
        "seed": cfg.seed,
    }
    (out / "train_meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True))
    print(f"trained {tr['steps']} steps; smoothed loss {first:.4f} -> {last:.4f}")
    for tag, dg in sorted(digests.items()):
        print(f"checkpoint {tag}: {dg}")
    return EXIT_OK


def _load_branches(run_dir: Path) -> dict:
    branches = {}
    for tag in ("high", "low"):
        path = run_dir / f"adapter_{tag}.npz"
        if not path.exists():
            raise UsageError(f"missing checkpoint {path}; run train first")
        branches[tag] = load_branch(path)
    return branches


def cmd_generate(args) -> int:
    cfg = load_config(args.config)
    model = _build_model_from(cfg)
    branches = _load_branches(Path(args.checkpoints))
    depth = load_array_npy(args.depth)
    if depth.ndim == 3:
        depth = depth[..., None]
    cond = normalize_depth(depth)
    text = embed_prompt(args.prompt, width=model.config.text_width)
    reference = load_array_npy(args.reference)
    if reference.ndim != 3:
        raise UsageError(
            f"--reference must be one (H, W, C) image, got shape {reference.shape}"
        )
    seed = args.seed if args.seed is not None else derive_seed(cfg.seed, "generate")
    clip = sample(
        model, branches, LatentVideo(cond.video, role="condition"), text,
        reference, SamplerConfig(steps=cfg["sampler"]["steps"], seed=seed),
    )
    save_array_npy(args.out, clip.data)
    print(f"generated clip {clip.shape} -> {args.out}")
    return EXIT_OK


def cmd_build_dataset(args) -> int:
    cfg = load_config(args.config)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    model = _build_model_from(cfg)
    branches = _load_branches(Path(args.checkpoints))
    pl = cfg["pipeline"]

    if pl["source"] == "procedural":
        sim_root = out / "sim_source"
        if not (sim_root / "index.json").exists():
            clips = make_clips(
                model.config, pl["fixture_clips"], derive_seed(cfg.seed, "fixture")
            )
            write_sim_dataset(sim_root, clips)
            write_reference_pool(out / "reference_pool", clips)
        pool = load_reference_pool(out / "reference_pool")
        ingested = ingest_sim_dataset(sim_root)
    else:
        pool = _reference_pool(cfg)
        ingested = ingest_sim_dataset(pl["root"])

    for cid, reason in ingested.rejected:
        print(f"rejected clip {cid}: {reason}", file=sys.stderr)
    if not ingested.clips:
        print("no usable clips", file=sys.stderr)
        return EXIT_ALL_JOBS_FAILED

    jobs = build_jobs(ingested.clips, pool, cfg.seed)
    store = ArtifactStore(out / "store")
    manifest = run_generation(
        jobs, model, branches, cfg["sampler"]["steps"], store,
        global_seed=cfg.seed, workers=pl["workers"],
    )
    manifest.save(out / "manifest.jsonl")
    report = verify_manifest(manifest, store)
    ok = len(manifest.ok_entries())
    failed = len(manifest.entries) - ok
    print(f"built {ok} clips, {failed} failed; manifest verification "
          f"{'passed' if report.all_passed else 'FAILED'}")
    if ok == 0:
        return EXIT_ALL_JOBS_FAILED
    return EXIT_OK


def _make_judge(cfg: RunConfig):
    name = cfg["dvrs"]["judge"]
    if name == "mock":
        return MockJudge()
    if name == "remote":
        return RemoteJudge(frames_per_segment=cfg["dvrs"]["frames_per_segment"])
    raise ConfigurationError(f"unknown judge {name!r}; use 'mock' or 'remote'")


def _segments_from_manifest(manifest_path, store_dir):
    manifest = DatasetManifest.load(manifest_path)
    store = ArtifactStore(Path(store_dir))
    segments = []
    for e in manifest.ok_entries():
        segments.append(
            Segment(segment_id=e["source_clip_id"],
                    video=store.get_array(e["generated_clip_digest"]))
        )
    return segments


def _segments_from_list(list_path):
    if not Path(list_path).exists():
        raise UsageError(f"real segment list not found: {list_path}")
    base = Path(list_path).parent
    segments = []
    for line in Path(list_path).read_text().splitlines():
        line = line.strip()
        if not line:
            continue
        path = (base / line) if not Path(line).is_absolute() else Path(line)
        segments.append(Segment(segment_id=path.stem, video=load_array_npy(path)))
    if not segments:
        raise UsageError(f"no segments listed in {list_path}")
    return segments


def cmd_dvrs(args) -> int:
    cfg = load_config(args.config)
    dv = cfg["dvrs"]
    dcfg = DvrsConfig(
        weight_kc=dv["weight_kc"], weight_dyn=dv["weight_dyn"],
        weight_vis=dv["weight_vis"], dyn_rescale=dv["dyn_rescale"],
        retries=dv["retries"], workers=dv["workers"],
        frames_per_segment=dv["frames_per_segment"],
    )
    judge = _make_judge(cfg)
    prototype = dv["prototype"] or DEFAULT_PROTOTYPE
    evaluator = DvrsEvaluator(judge, dcfg, prototype=prototype)
    gen = _segments_from_manifest(args.gen_manifest, args.store)
    real = _segments_from_list(args.real_list)
    report, gen_scores, real_scores = evaluator.evaluate_pair(
        gen, real, gen_id=str(args.gen_manifest), real_id=str(args.real_list)
    )
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    evaluator.build_checklist().save(out / "checklist.json")
    (out / "dvrs_report.json").write_text(
        json.dumps(report.as_dict(), indent=2, sort_keys=True)
    )
    dump_jsonl(out / "segment_scores.jsonl", (
        {"set": name, "segment": s.segment_id, "kc": s.kc, "phy": s.phy,
         "cau": s.cau, "tmp": s.tmp, "vis": s.vis}
        for name, scores in (("gen", gen_scores), ("real", real_scores))
        for s in scores
    ))
    print(f"DVRS {report.score:.4f} (coverage gen {report.coverage_gen:.2f}, "
          f"real {report.coverage_real:.2f}) -> {out / 'dvrs_report.json'}")
    return EXIT_OK


def cmd_depth_eval(args) -> int:
    from .depth_eval import evaluate_directory_pair

    align = True
    if args.config:
        align = load_config(args.config)["depth_eval"]["align"]
    per_frame, means = evaluate_directory_pair(args.pred, args.ref, align=align)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    dump_jsonl(out, per_frame + [{"frame": "__mean__", **means, "aligned": align}])
    print("depth metrics means: " + " ".join(f"{k}={v:.4f}" for k, v in means.items()))
    return EXIT_OK


def cmd_report(args) -> int:
    run = Path(args.run)
    lines = ["run report", "=" * 60]

    loss_path = run / "loss_log.jsonl"
    lines.append("[training]")
    if loss_path.exists():
        records = load_jsonl(loss_path)
        losses = [r["loss"] for r in records]
        half = [r["loss"] for r in records if r["branch"] == "high"]
        low = [r["loss"] for r in records if r["branch"] == "low"]
        lines.append(f"  steps: {len(records)}")
        lines.append(f"  first/last loss: {losses[0]:.4f} / {losses[-1]:.4f}")
        lines.append(f"  mean high-branch loss: {np.mean(half):.4f}")
        lines.append(f"  mean low-branch loss: {np.mean(low):.4f}")
    else:
        lines.append("  absent")

    manifest_path = run / "manifest.jsonl"
    lines.append("[dataset]")
    if manifest_path.exists():
        manifest = DatasetManifest.load(manifest_path)
        ok = manifest.ok_entries()
        lines.append(f"  entries: {len(manifest.entries)} ({len(ok)} ok)")
        lines.append(f"  backbone digest: {manifest.header['backbone_digest'][:16]}...")
    else:
        lines.append("  absent")

    dvrs_path = run / "dvrs_report.json"
    lines.append("[dvrs]")
    if dvrs_path.exists():
        rep = json.loads(dvrs_path.read_text())
        dist = rep["distances"]
        lines.append(
            "  distances: " + " ".join(f"{k}={dist[k]:.3f}" for k in sorted(dist))
        )
        lines.append(f"  dynamic distance: {rep['d_dyn']:.4f}")
        lines.append(f"  DVRS: {rep['dvrs']:.4f}")
        lines.append(f"  coverage: gen {rep['coverage_gen']:.2f} real {rep['coverage_real']:.2f}")
    else:
        lines.append("  absent")

    depth_path = run / "depth_report.jsonl"
    lines.append("[depth]")
    if depth_path.exists():
        rows = load_jsonl(depth_path)
        mean_row = next((r for r in rows if r.get("frame") == "__mean__"), None)
        if mean_row:
            lines.append("  means: " + " ".join(
                f"{k}={mean_row[k]:.4f}" for k in
                ("ssim", "abs_rel", "rmse", "delta1", "delta2", "delta3")
            ))
        else:
            lines.append(f"  {len(rows)} frame records, no mean row")
    else:
        lines.append("  absent")

    text = "\n".join(lines) + "\n"
    if args.out:
        Path(args.out).write_text(text)
    sys.stdout.write(text)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="drivesynth",
        description="Structure-conditioned sim-to-real video synthesis toolkit",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train the two adapter branches")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("generate", help="generate one clip from a depth video")
    p.add_argument("--config", required=True)
    p.add_argument("--checkpoints", required=True)
    p.add_argument("--depth", required=True)
    p.add_argument("--prompt", required=True)
    p.add_argument("--reference", required=True)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_generate)

    p = sub.add_parser("build-dataset", help="run the generation pipeline")
    p.add_argument("--config", required=True)
    p.add_argument("--checkpoints", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_build_dataset)

    p = sub.add_parser("dvrs", help="score a generated set against a real set")
    p.add_argument("--config", required=True)
    p.add_argument("--gen-manifest", required=True)
    p.add_argument("--store", required=True)
    p.add_argument("--real-list", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_dvrs)

    p = sub.add_parser("depth-eval", help="depth metrics between two frame dirs")
    p.add_argument("--pred", required=True)
    p.add_argument("--ref", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--config", default=None)
    p.set_defaults(fn=cmd_depth_eval)

    p = sub.add_parser("report", help="summarize a run directory")
    p.add_argument("--run", required=True)
    p.add_argument("--out", default=None)
    p.set_defaults(fn=cmd_report)

    p = sub.add_parser("init-config", help="write a complete default config")
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_init_config)

    return parser


def cmd_init_config(args) -> int:
    Path(args.out).write_text(json.dumps(default_config_dict(), indent=2, sort_keys=True))
    print(f"wrote default config to {args.out}")
    return EXIT_OK


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except ConfigurationError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except JudgeError as exc:
        print(f"judge error: {exc}", file=sys.stderr)
        return EXIT_JUDGE
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
