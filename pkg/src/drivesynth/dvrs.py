"""Driving-video realism scoring against a real reference set.

A judge scores every segment on five components: a checklist satisfaction
percentage (from per-item booleans), three dynamic sub-scores on [0, 10]
(physical plausibility, causal coherence, temporal consistency), and a
visual realism score on [0, 100]. Component distances are absolute gaps
between the per-dataset means; the dynamic distance is the mean of the
three dynamic gaps, rescaled (default x10) onto the percentage range in
the final weighted score:

    score = w_kc * D_kc + w_dyn * (rescale * D_dyn) + w_vis * D_vis

with equal default weights of 1/3. Smaller is closer to the real data.
Judges are pluggable: the deterministic table-driven MockJudge for tests
and offline runs, and a RemoteJudge speaking strict JSON to an external
multimodal endpoint.
"""

from __future__ import annotations

import json
import logging
import os
import urllib.request
from base64 import b64encode
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .errors import ConfigurationError, JudgeError, UsageError
from .util import sha256_hex

logger = logging.getLogger(__name__)

COMPONENTS = ("kc", "phy", "cau", "tmp", "vis")
_RANGES = {"kc": (0.0, 100.0), "phy": (0.0, 10.0), "cau": (0.0, 10.0),
           "tmp": (0.0, 10.0), "vis": (0.0, 100.0)}

DEFAULT_PROTOTYPE = (
    "Front-facing urban driving videos with roads, vehicles, pedestrians, "
    "buildings, traffic lights, road signs, and lane markings."
)

DEFAULT_CHECKLIST = [
    "Vehicles drive on a visible road surface",
    "Vehicle sizes are consistent with their distance",
    "Lane markings form continuous lines",
    "Vehicles keep to lanes except when maneuvering",
    "Pedestrians appear on sidewalks or crossings",
    "Traffic lights face oncoming traffic",
    "Road signs are upright and legible in shape",
    "Buildings meet the ground plane",
    "Shadows fall in a single consistent direction",
    "Sky and lighting match the scene exposure",
    "Moving objects displace smoothly between frames",
    "Stationary background stays fixed across frames",
    "Vehicle headings match their motion direction",
    "Occlusions resolve in depth order",
    "No objects appear or vanish mid-frame without cause",
    "Road curvature is consistent across frames",
    "Reflections appear on reflective surfaces only",
    "Ego motion is consistent with a forward-facing camera",
    "Object textures are free of repeating artifacts",
    "Colors stay stable for persistent objects",
]


@dataclass
class Segment:
    """One scoreable video segment."""

    segment_id: str
    video: np.ndarray = None  # (T, H, W, C); may be None for table-driven judges


@dataclass
class Checklist:
    items: list
    judge_id: str
    prototype_digest: str

    def __post_init__(self):
        if not self.items or any(not str(i).strip() for i in self.items):
            raise JudgeError("checklist must be a nonempty list of nonempty items")

    @property
    def size(self) -> int:
        return len(self.items)

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump({"items": self.items, "judge_id": self.judge_id,
                       "prototype_digest": self.prototype_digest}, fh, indent=2)

    @classmethod
    def load(cls, path) -> "Checklist":
        with open(path, "r", encoding="utf-8") as fh:
            rec = json.load(fh)
        return cls(items=rec["items"], judge_id=rec["judge_id"],
                   prototype_digest=rec["prototype_digest"])


@dataclass
class SegmentScores:
    segment_id: str
    judge_id: str
    kc: float
    phy: float
    cau: float
    tmp: float
    vis: float

    def __post_init__(self):
        for name in COMPONENTS:
            lo, hi = _RANGES[name]
            v = float(getattr(self, name))
            if not (lo <= v <= hi) or not np.isfinite(v):
                raise JudgeError(
                    f"segment {self.segment_id}: component {name}={v} "
                    f"outside [{lo}, {hi}]"
                )

    def component(self, name: str) -> float:
        return float(getattr(self, name))


@dataclass
class DatasetScores:
    means: dict
    n_segments: int


@dataclass
class DvrsConfig:
    weight_kc: float = 1.0 / 3.0
    weight_dyn: float = 1.0 / 3.0
    weight_vis: float = 1.0 / 3.0
    dyn_rescale: float = 10.0
    retries: int = 2
    workers: int = 2
    frames_per_segment: int = 8

    def __post_init__(self):
        for name in ("weight_kc", "weight_dyn", "weight_vis"):
            if getattr(self, name) < 0:
                raise ConfigurationError(f"{name} must be >= 0")
        if self.dyn_rescale <= 0:
            raise ConfigurationError("dyn_rescale must be positive")


@dataclass
class DvrsReport:
    distances: dict           # component -> D_x
    d_dyn: float
    score: float
    gen_id: str
    real_id: str
    coverage_gen: float
    coverage_real: float
    config: dict
    n_gen: int = 0
    n_real: int = 0

    def as_dict(self):
        return {
            "distances": self.distances, "d_dyn": self.d_dyn, "dvrs": self.score,
            "gen_id": self.gen_id, "real_id": self.real_id,
            "coverage_gen": self.coverage_gen, "coverage_real": self.coverage_real,
            "n_gen": self.n_gen, "n_real": self.n_real, "config": self.config,
        }


def kc_from_items(item_flags) -> float:
    """Checklist satisfaction percentage: 100 * (#true / #items)."""
    flags = list(item_flags)
    if not flags:
        raise UsageError("kc_from_items needs at least one item flag")
    return 100.0 * sum(bool(f) for f in flags) / len(flags)


def dataset_means(scores) -> DatasetScores:
    """Arithmetic mean per component; order-independent."""
    scores = list(scores)
    if not scores:
        raise UsageError("dataset_means needs at least one segment score")
    means = {
        name: float(np.mean([s.component(name) for s in scores]))
        for name in COMPONENTS
    }
    return DatasetScores(means=means, n_segments=len(scores))


def component_distances(gen: DatasetScores, real: DatasetScores) -> dict:
    """Absolute distance per component between the two dataset means."""
    return {name: abs(gen.means[name] - real.means[name]) for name in COMPONENTS}


def dvrs_score(distances: dict, cfg: DvrsConfig, gen_id: str = "gen",
               real_id: str = "real", coverage=(1.0, 1.0),
               counts=(0, 0)) -> DvrsReport:
    """Fold component distances into the final weighted realism score."""
    for name in COMPONENTS:
        if distances[name] < 0:
            raise ConfigurationError(f"distance {name} is negative")
    d_dyn = (distances["phy"] + distances["cau"] + distances["tmp"]) / 3.0
    score = (
        cfg.weight_kc * distances["kc"]
        + cfg.weight_dyn * (cfg.dyn_rescale * d_dyn)
        + cfg.weight_vis * distances["vis"]
    )
    return DvrsReport(
        distances=dict(distances), d_dyn=d_dyn, score=float(score),
        gen_id=gen_id, real_id=real_id,
        coverage_gen=float(coverage[0]), coverage_real=float(coverage[1]),
        config={
            "weight_kc": cfg.weight_kc, "weight_dyn": cfg.weight_dyn,
            "weight_vis": cfg.weight_vis, "dyn_rescale": cfg.dyn_rescale,
            "frames_per_segment": cfg.frames_per_segment,
        },
        n_gen=int(counts[0]), n_real=int(counts[1]),
    )


# ---------------------------------------------------------------------------
# Judges
# ---------------------------------------------------------------------------


class MockJudge:
    """Deterministic judge: scripted tables, or content-hash derived scores.

    ``score_table`` maps segment id -> dict with either per-item boolean
    ``items`` or a direct ``kc`` percentage, plus phy/cau/tmp/vis values.
    ``fail_ids`` simulates judge failures for the named segments.
    """

    judge_id = "mock"

    def __init__(self, checklist_items=None, score_table=None, fail_ids=None):
        # an explicitly empty item list stays empty so the judge-error
        # contract for invalid checklists remains testable
        self.checklist_items = (
            list(DEFAULT_CHECKLIST) if checklist_items is None else list(checklist_items)
        )
        self.score_table = dict(score_table or {})
        self.fail_ids = set(fail_ids or ())

    def build_checklist(self, prototype: str) -> Checklist:
        if not prototype.strip():
            raise UsageError("prototype text must be nonempty")
        return Checklist(
            items=list(self.checklist_items),
            judge_id=self.judge_id,
            prototype_digest=sha256_hex(prototype.encode("utf-8")),
        )

    def _derived(self, segment: Segment, checklist: Checklist) -> dict:
        rng = np.random.default_rng(
            int.from_bytes(sha256_hex(segment.segment_id.encode())[:16].encode(), "little")
        )
        return {
            "items": [bool(rng.random() < 0.8) for _ in checklist.items],
            "phy": round(float(rng.uniform(5, 10)), 3),
            "cau": round(float(rng.uniform(5, 10)), 3),
            "tmp": round(float(rng.uniform(5, 10)), 3),
            "vis": round(float(rng.uniform(50, 100)), 3),
        }

    def score_segment(self, segment: Segment, checklist: Checklist) -> SegmentScores:
        if segment.segment_id in self.fail_ids:
            raise JudgeError(f"scripted failure for segment {segment.segment_id}")
        rec = self.score_table.get(segment.segment_id)
        if rec is None:
            rec = self._derived(segment, checklist)
        if "items" in rec:
            kc = kc_from_items(rec["items"])
        else:
            kc = float(rec["kc"])
        return SegmentScores(
            segment_id=segment.segment_id, judge_id=self.judge_id, kc=kc,
            phy=float(rec["phy"]), cau=float(rec["cau"]),
            tmp=float(rec["tmp"]), vis=float(rec["vis"]),
        )


def _default_transport(url, payload: bytes, headers: dict, timeout: float) -> bytes:
    req = urllib.request.Request(url, data=payload, headers=headers, method="POST")
    with urllib.request.urlopen(req, timeout=timeout) as resp:  # pragma: no cover
        return resp.read()


class RemoteJudge:
    """Judge backed by an external multimodal endpoint.

    Endpoint and credentials come from arguments or the environment
    (DRIVESYNTH_JUDGE_URL, DRIVESYNTH_JUDGE_TOKEN). Responses must be strict
    JSON; anything else raises JudgeError with the raw payload logged.
    """

    judge_id = "remote"

    def __init__(self, url=None, token=None, timeout=30.0,
                 frames_per_segment=8, transport=None):
        self.url = url or os.environ.get("DRIVESYNTH_JUDGE_URL", "")
        self.token = token or os.environ.get("DRIVESYNTH_JUDGE_TOKEN", "")
        self.timeout = float(timeout)
        self.frames_per_segment = int(frames_per_segment)
        self.transport = transport or _default_transport
        if not self.url:
            raise ConfigurationError(
                "RemoteJudge needs an endpoint url (DRIVESYNTH_JUDGE_URL)"
            )

    def _headers(self):
        headers = {"Content-Type": "application/json"}
        if self.token:
            headers["Authorization"] = f"Bearer {self.token}"
        return headers

    def _call(self, body: dict) -> dict:
        payload = json.dumps(body, sort_keys=True).encode("utf-8")
        try:
            raw = self.transport(self.url, payload, self._headers(), self.timeout)
        except OSError as exc:  # connection refused, DNS, timeout
            raise JudgeError(f"judge endpoint unreachable: {exc}") from exc
        try:
            parsed = json.loads(raw.decode("utf-8"))
            if not isinstance(parsed, dict):
                raise ValueError("response is not a JSON object")
            return parsed
        except (ValueError, UnicodeDecodeError) as exc:
            logger.error("judge returned malformed payload: %r", raw[:512])
            raise JudgeError(f"malformed judge response: {exc}") from exc

    def _subsample(self, video: np.ndarray) -> np.ndarray:
        n = min(self.frames_per_segment, video.shape[0])
        idx = np.linspace(0, video.shape[0] - 1, n).round().astype(int)
        return video[idx]

    def build_checklist(self, prototype: str) -> Checklist:
        if not prototype.strip():
            raise UsageError("prototype text must be nonempty")
        parsed = self._call({"task": "build_checklist", "prototype": prototype})
        items = parsed.get("checklist")
        if not isinstance(items, list) or not items:
            logger.error("judge checklist payload invalid: %r", parsed)
            raise JudgeError("judge returned an empty or invalid checklist")
        return Checklist(
            items=[str(i) for i in items], judge_id=self.judge_id,
            prototype_digest=sha256_hex(prototype.encode("utf-8")),
        )

    def score_segment(self, segment: Segment, checklist: Checklist) -> SegmentScores:
        if segment.video is None:
            raise UsageError(f"segment {segment.segment_id} has no video payload")
        from .util import array_to_npy_bytes

        frames = self._subsample(segment.video)
        parsed = self._call({
            "task": "score_segment",
            "segment_id": segment.segment_id,
            "frames_npy_b64": b64encode(array_to_npy_bytes(frames)).decode("ascii"),
            "checklist": checklist.items,
        })
        items = parsed.get("items")
        if not isinstance(items, list) or len(items) != checklist.size or not all(
            isinstance(i, bool) for i in items
        ):
            logger.error("judge score payload invalid: %r", parsed)
            raise JudgeError(
                f"segment {segment.segment_id}: expected {checklist.size} "
                "boolean checklist items"
            )
        try:
            return SegmentScores(
                segment_id=segment.segment_id, judge_id=self.judge_id,
                kc=kc_from_items(items),
                phy=float(parsed["phy"]), cau=float(parsed["cau"]),
                tmp=float(parsed["tmp"]), vis=float(parsed["vis"]),
            )
        except (KeyError, TypeError, ValueError) as exc:
            logger.error("judge score payload invalid: %r", parsed)
            raise JudgeError(f"segment {segment.segment_id}: {exc}") from exc


# ---------------------------------------------------------------------------
# Evaluation session: one checklist per run, bounded-parallel scoring.
# ---------------------------------------------------------------------------


class DvrsEvaluator:
    """Holds the judge, config, and single cached checklist of one run."""

    def __init__(self, judge, cfg: DvrsConfig, prototype: str = DEFAULT_PROTOTYPE):
        self.judge = judge
        self.cfg = cfg
        self.prototype = prototype
        self._checklist = None

    def build_checklist(self) -> Checklist:
        """First call builds via the judge; later calls return the cached one."""
        if self._checklist is None:
            self._checklist = self.judge.build_checklist(self.prototype)
        return self._checklist

    def _score_many(self, segments):
        checklist = self.build_checklist()

        def attempt(segment):
            last = None
            for _ in range(self.cfg.retries + 1):
                try:
                    return self.judge.score_segment(segment, checklist)
                except JudgeError as exc:
                    last = exc
            logger.warning("segment %s unscored: %s", segment.segment_id, last)
            return None

        if self.cfg.workers > 1:
            with ThreadPoolExecutor(max_workers=self.cfg.workers) as pool:
                results = list(pool.map(attempt, segments))
        else:
            results = [attempt(s) for s in segments]
        scored = {s.segment_id: r for s, r in zip(segments, results) if r is not None}
        # aggregation over a sorted view keeps the fold order-independent
        ordered = [scored[sid] for sid in sorted(scored)]
        coverage = len(ordered) / len(segments) if segments else 0.0
        return ordered, coverage

    def evaluate_pair(self, gen_segments, real_segments,
                      gen_id: str = "gen", real_id: str = "real") -> tuple:
        """Score both sides and fold into a DvrsReport + per-segment logs."""
        if not gen_segments or not real_segments:
            raise UsageError("both segment sets must be nonempty")
        gen_scores, cov_gen = self._score_many(list(gen_segments))
        real_scores, cov_real = self._score_many(list(real_segments))
        if not gen_scores or not real_scores:
            raise JudgeError("no segments could be scored on one side")
        distances = component_distances(
            dataset_means(gen_scores), dataset_means(real_scores)
        )
        report = dvrs_score(
            distances, self.cfg, gen_id=gen_id, real_id=real_id,
            coverage=(cov_gen, cov_real),
            counts=(len(gen_scores), len(real_scores)),
        )
        return report, gen_scores, real_scores

    def intra_domain_baseline(self, segments, split_seed: int) -> DvrsReport:
        """Score the gap between two disjoint seeded halves of one real set."""
        segments = list(segments)
        if len(segments) < 2:
            raise UsageError("intra-domain baseline needs at least 2 segments")
        half_a, half_b = split_segments([s.segment_id for s in segments], split_seed)
        by_id = {s.segment_id: s for s in segments}
        report, _, _ = self.evaluate_pair(
            [by_id[i] for i in half_a], [by_id[i] for i in half_b],
            gen_id="intra_half_a", real_id="intra_half_b",
        )
        return report


def split_segments(segment_ids, seed: int) -> tuple:
    """Seeded random halving into two disjoint id lists."""
    ids = list(segment_ids)
    rng = np.random.default_rng(int(seed))
    perm = rng.permutation(len(ids))
    mid = (len(ids) + 1) // 2
    first = [ids[i] for i in sorted(perm[:mid])]
    second = [ids[i] for i in sorted(perm[mid:])]
    return first, second
