"""Annotation-preserving dataset generation pipeline.

Simulator clips come in under a small on-disk layout (an index file plus
per-clip arrays and annotation lines); each clip becomes one generation
job binding its condition, prompt, an unpaired reference image, and a
derived seed. Generated clips land in a content-addressed store and the
manifest records, per entry, everything needed to regenerate the clip
bit-for-bit and to hand the source's frame-wise annotations straight to
the generated video under an identity frame map.
"""

from __future__ import annotations

import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .conditioning import ReferencePool, assign_random_references, embed_prompt, normalize_depth
from .errors import NumericError, UsageError
from .flow import SamplerConfig, sample
from .model import LatentVideo
from .util import (
    array_to_npy_bytes,
    derive_seed,
    load_array_npy,
    npy_bytes_to_array,
    sha256_hex,
)

PIPELINE_VERSION = "1"


class ArtifactStore:
    """Content-addressed blob store: objects/<sha256> holds the exact bytes."""

    def __init__(self, root):
        self.root = Path(root)
        (self.root / "objects").mkdir(parents=True, exist_ok=True)

    def _path(self, digest: str) -> Path:
        return self.root / "objects" / digest

    def put(self, data: bytes) -> str:
        digest = sha256_hex(data)
        path = self._path(digest)
        if not path.exists():
            path.write_bytes(data)
        return digest

    def get(self, digest: str) -> bytes:
        path = self._path(digest)
        if not path.exists():
            raise UsageError(f"missing artifact {digest}")
        return path.read_bytes()

    def has(self, digest: str) -> bool:
        return self._path(digest).exists()

    def verify(self, digest: str) -> bool:
        """Recompute the hash of the stored bytes; False if absent or tampered."""
        path = self._path(digest)
        if not path.exists():
            return False
        return sha256_hex(path.read_bytes()) == digest

    def put_array(self, arr: np.ndarray) -> str:
        return self.put(array_to_npy_bytes(arr))

    def get_array(self, digest: str) -> np.ndarray:
        return npy_bytes_to_array(self.get(digest))


@dataclass
class SimClip:
    clip_id: str
    depth_path: str
    prompt: str
    annotation_blobs: list      # per-frame bytes
    annotation_digests: list    # per-frame sha256 hex
    frames: int
    latent_path: str = None     # optional; only needed for training sources


@dataclass
class IngestReport:
    clips: list                 # accepted SimClips
    rejected: list              # [(clip id, reason)]


@dataclass
class GenerationJob:
    clip_id: str
    condition_raw: np.ndarray   # (T, H, W, 1) depth before normalization
    prompt: str
    reference_id: str
    reference_image: np.ndarray
    seed: int
    annotation_blobs: list
    annotation_digests: list


def ingest_sim_dataset(root) -> IngestReport:
    """Load and validate clips listed by <root>/index.json.

    Per-clip failures are collected in the report, not raised; a missing
    index is a usage error.
    """
    root = Path(root)
    index_path = root / "index.json"
    if not index_path.exists():
        raise UsageError(f"missing index file {index_path}")
    index = json.loads(index_path.read_text())
    prompts_path = root / "prompts.txt"
    prompts = (
        prompts_path.read_text().splitlines() if prompts_path.exists() else []
    )

    clips, rejected = [], []
    for i, entry in enumerate(index.get("clips", [])):
        cid = entry.get("id", f"<entry {i}>")
        try:
            depth_path = root / entry["depth"]
            depth = load_array_npy(depth_path)
            frames = depth.shape[0]
            ann_path = root / entry["annotations"]
            blobs = [
                line.encode("utf-8")
                for line in ann_path.read_text().splitlines()
                if line.strip()
            ]
            declared = entry.get("annotation_digests", [])
            if len(blobs) != frames:
                rejected.append((cid, "annotation/frame count mismatch"))
                continue
            if len(declared) != len(blobs):
                rejected.append((cid, "annotation digest count mismatch"))
                continue
            actual = [sha256_hex(b) for b in blobs]
            if actual != declared:
                rejected.append((cid, "digest mismatch"))
                continue
            prompt = prompts[i] if i < len(prompts) else entry.get("prompt", "")
            if not prompt.strip():
                rejected.append((cid, "missing prompt"))
                continue
            latent = entry.get("latent")
            clips.append(
                SimClip(
                    clip_id=cid,
                    depth_path=str(depth_path),
                    prompt=prompt,
                    annotation_blobs=blobs,
                    annotation_digests=actual,
                    frames=frames,
                    latent_path=str(root / latent) if latent else None,
                )
            )
        except (KeyError, OSError, ValueError) as exc:
            rejected.append((cid, f"unreadable: {exc}"))
    return IngestReport(clips=clips, rejected=rejected)


def build_jobs(clips, pool: ReferencePool, seed: int) -> list:
    """One job per clip with its assigned reference and derived seed."""
    if not clips:
        raise UsageError("build_jobs needs at least one clip")
    assignment = assign_random_references(
        [(c.clip_id, c.clip_id) for c in clips], pool, derive_seed(seed, "refs")
    )
    jobs = []
    for c in clips:
        ref_id = assignment.mapping[c.clip_id]
        jobs.append(
            GenerationJob(
                clip_id=c.clip_id,
                condition_raw=load_array_npy(c.depth_path),
                prompt=c.prompt,
                reference_id=ref_id,
                reference_image=pool.image(ref_id),
                seed=derive_seed(seed, f"job:{c.clip_id}"),
                annotation_blobs=c.annotation_blobs,
                annotation_digests=c.annotation_digests,
            )
        )
    return jobs


@dataclass
class DatasetManifest:
    header: dict
    entries: list = field(default_factory=list)

    def to_lines(self):
        yield json.dumps({"record": "header", **self.header}, sort_keys=True)
        for e in sorted(self.entries, key=lambda e: e["source_clip_id"]):
            yield json.dumps({"record": "entry", **e}, sort_keys=True)

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            for line in self.to_lines():
                fh.write(line + "\n")

    @classmethod
    def load(cls, path) -> "DatasetManifest":
        header, entries = None, []
        with open(path, "r", encoding="utf-8") as fh:
            for line in fh:
                line = line.strip()
                if not line:
                    continue
                rec = json.loads(line)
                kind = rec.pop("record", None)
                if kind == "header":
                    header = rec
                elif kind == "entry":
                    entries.append(rec)
                else:
                    raise UsageError(f"manifest line with unknown record kind: {kind}")
        if header is None:
            raise UsageError(f"manifest {path} has no header record")
        return cls(header=header, entries=entries)

    def ok_entries(self):
        return [e for e in self.entries if e["status"] == "ok"]


def _run_one_job(job: GenerationJob, model, branches, sampler_steps: int, store: ArtifactStore,
                 text_width: int):
    cond = normalize_depth(job.condition_raw, source_id=job.clip_id)
    cond_lv = LatentVideo(cond.video, role="condition")
    text = embed_prompt(job.prompt, width=text_width)
    cfg = SamplerConfig(steps=sampler_steps, seed=job.seed)
    generated = sample(model, branches, cond_lv, text, job.reference_image, cfg)
    cond_digest = store.put_array(cond.video)
    gen_digest = store.put_array(generated.data)
    for blob in job.annotation_blobs:
        store.put(blob)
    return cond_digest, gen_digest


def run_generation(jobs, model, branches, sampler_steps: int, store: ArtifactStore,
                   global_seed: int, workers: int = 2) -> DatasetManifest:
    """Execute all jobs; one failed job never blocks the others."""
    if not jobs:
        raise UsageError("run_generation needs at least one job")
    header = {
        "pipeline_version": PIPELINE_VERSION,
        "global_seed": int(global_seed),
        "sampler_steps": int(sampler_steps),
        "backbone_digest": model.digest(),
        "checkpoint_digests": {tag: br.digest() for tag, br in branches.items()},
    }
    text_width = model.config.text_width

    def work(job):
        try:
            cond_digest, gen_digest = _run_one_job(
                job, model, branches, sampler_steps, store, text_width
            )
            frames = job.condition_raw.shape[0]
            return {
                "status": "ok",
                "source_clip_id": job.clip_id,
                "condition_digest": cond_digest,
                "reference_image_id": job.reference_id,
                "prompt": job.prompt,
                "seed": job.seed,
                "generated_clip_digest": gen_digest,
                "frame_map": list(range(frames)),
                "annotation_digests": job.annotation_digests,
            }
        except NumericError as exc:
            return {
                "status": "failed",
                "source_clip_id": job.clip_id,
                "reference_image_id": job.reference_id,
                "prompt": job.prompt,
                "seed": job.seed,
                "error": str(exc),
            }

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            entries = list(pool.map(work, jobs))
    else:
        entries = [work(j) for j in jobs]
    return DatasetManifest(header=header, entries=entries)


@dataclass
class VerificationReport:
    results: list  # [(entry id, ok, [reasons])]

    @property
    def all_passed(self) -> bool:
        return all(ok for _, ok, _ in self.results)

    def failures(self):
        return [(cid, reasons) for cid, ok, reasons in self.results if not ok]


def verify_manifest(manifest: DatasetManifest, store: ArtifactStore) -> VerificationReport:
    """Check digest integrity, identity frame maps, annotation completeness."""
    results = []
    for e in manifest.entries:
        cid = e.get("source_clip_id", "<unknown>")
        reasons = []
        if e.get("status") != "ok":
            results.append((cid, True, [f"skipped: recorded as {e.get('status')}"]))
            continue
        fm = e.get("frame_map", [])
        if fm != list(range(len(fm))) or not fm:
            reasons.append("frame map not identity")
        if not store.verify(e.get("generated_clip_digest", "")):
            reasons.append("missing or corrupt generated clip")
        if not store.verify(e.get("condition_digest", "")):
            reasons.append("missing or corrupt condition")
        anns = e.get("annotation_digests", [])
        if fm and len(anns) != len(fm):
            reasons.append("annotation count mismatch")
        for d in anns:
            if not store.verify(d):
                reasons.append("missing annotation")
                break
        results.append((cid, not reasons, reasons))
    return VerificationReport(results=results)


def replay_manifest(manifest: DatasetManifest, store: ArtifactStore, pool: ReferencePool,
                    model, branches, workers: int = 1) -> list:
    """Regenerate every ok entry from its recorded seed; return mismatches."""
    mismatches = []
    for e in manifest.ok_entries():
        cond = store.get_array(e["condition_digest"])
        cond_lv = LatentVideo(cond, role="condition")
        text = embed_prompt(e["prompt"], width=model.config.text_width)
        cfg = SamplerConfig(steps=int(manifest.header["sampler_steps"]), seed=int(e["seed"]))
        regen = sample(model, branches, cond_lv, text,
                       pool.image(e["reference_image_id"]), cfg)
        digest = sha256_hex(array_to_npy_bytes(regen.data))
        if digest != e["generated_clip_digest"]:
            mismatches.append(e["source_clip_id"])
    return mismatches


# ---------------------------------------------------------------------------
# On-disk writer for the simulator layout (used by fixtures and the CLI).
# ---------------------------------------------------------------------------


def write_sim_dataset(root, clips, include_latents: bool = True) -> None:
    """Materialize SynthClips in the ingestible directory layout."""
    from .util import save_array_npy

    root = Path(root)
    (root / "clips").mkdir(parents=True, exist_ok=True)
    (root / "annotations").mkdir(exist_ok=True)
    index = {"clips": []}
    prompts = []
    for c in clips:
        depth_rel = f"clips/{c.clip_id}_depth.npy"
        save_array_npy(root / depth_rel, c.depth_raw)
        blobs = c.annotation_blobs()
        ann_rel = f"annotations/{c.clip_id}.jsonl"
        (root / ann_rel).write_bytes(b"\n".join(blobs) + b"\n")
        entry = {
            "id": c.clip_id,
            "depth": depth_rel,
            "annotations": ann_rel,
            "annotation_digests": [sha256_hex(b) for b in blobs],
        }
        if include_latents:
            latent_rel = f"clips/{c.clip_id}_latent.npy"
            save_array_npy(root / latent_rel, c.x_1)
            entry["latent"] = latent_rel
        index["clips"].append(entry)
        prompts.append(c.prompt)
    (root / "index.json").write_text(json.dumps(index, indent=2, sort_keys=True))
    (root / "prompts.txt").write_text("\n".join(prompts) + "\n")


def write_reference_pool(root, clips) -> None:
    """Materialize first-frame reference images with an index file."""
    from .util import save_array_npy

    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    index = {"images": []}
    for c in clips:
        rel = f"{c.clip_id}_ref.npy"
        save_array_npy(root / rel, c.first_frame)
        index["images"].append({"id": c.clip_id, "file": rel, "source": "fixture"})
    (root / "index.json").write_text(json.dumps(index, indent=2, sort_keys=True))


def load_reference_pool(root) -> ReferencePool:
    root = Path(root)
    index_path = root / "index.json"
    if not index_path.exists():
        raise UsageError(f"missing reference pool index {index_path}")
    index = json.loads(index_path.read_text())
    images = []
    for rec in index.get("images", []):
        images.append((rec["id"], load_array_npy(root / rec["file"]), rec.get("source", "")))
    return ReferencePool(images)
