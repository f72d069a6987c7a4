"""Low-rank adapter branches over the frozen backbone.

Each branch owns a timestep interval and one low-rank (A, B) factor pair
per projection site: the four self-attention projections, the four
cross-attention projections, and the two feed-forward linears of every
block. B starts at exactly zero so a freshly attached adapter is a no-op,
and the two branches partition [0, 1] so every timestep selects exactly
one of them.
"""

from __future__ import annotations

import copy
import json
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigurationError, ShapeError
from .model import SITE_TAGS, BackboneConfig, BackboneParams, _SITE_ATTR
from .util import arrays_digest

BRANCH_TAGS = ("high", "low")


@dataclass
class LoraSite:
    block: int
    tag: str
    A: np.ndarray  # (rank, d_in)
    B: np.ndarray  # (d_out, rank)
    rank: int
    alpha: float

    def delta(self) -> np.ndarray:
        """Dense weight update (alpha/rank) * B @ A."""
        return (self.alpha / self.rank) * (self.B @ self.A)

    @property
    def n_params(self) -> int:
        return self.A.size + self.B.size


@dataclass
class AdapterBranch:
    branch: str
    interval: tuple  # [t_lo, t_hi); the branch with t_hi == 1.0 also owns t == 1.0
    sites: dict = field(default_factory=dict)  # (block, site tag) -> LoraSite
    rank: int = 0
    alpha: float = 0.0
    seed: int = 0

    @property
    def n_trainable(self) -> int:
        return sum(s.n_params for s in self.sites.values())

    def digest(self) -> str:
        arrays = []
        for key in sorted(self.sites):
            arrays.append(self.sites[key].A)
            arrays.append(self.sites[key].B)
        return arrays_digest(arrays)

    def copy(self) -> "AdapterBranch":
        return copy.deepcopy(self)


def attach_adapter(
    config: BackboneConfig,
    rank: int,
    alpha: float,
    branch: str,
    interval,
    seed: int,
) -> AdapterBranch:
    """Create a zero-initialized branch covering all 10 sites per block."""
    if branch not in BRANCH_TAGS:
        raise ConfigurationError(f"branch must be one of {BRANCH_TAGS}, got {branch!r}")
    if rank < 1:
        raise ConfigurationError(f"rank must be >= 1, got {rank}")
    t_lo, t_hi = float(interval[0]), float(interval[1])
    if not (0.0 <= t_lo < t_hi <= 1.0):
        raise ConfigurationError(f"invalid timestep interval [{t_lo}, {t_hi})")
    rng = np.random.default_rng(int(seed))
    sites = {}
    for bi in range(config.blocks):
        for tag in SITE_TAGS:
            d_in, d_out = config.site_dims(tag)
            if rank > min(d_in, d_out):
                raise ConfigurationError(
                    f"rank {rank} exceeds min(d_in, d_out)={min(d_in, d_out)} at {tag}"
                )
            A = rng.normal(0.0, 1.0 / math.sqrt(d_in), size=(rank, d_in))
            B = np.zeros((d_out, rank))
            sites[(bi, tag)] = LoraSite(bi, tag, A, B, rank, float(alpha))
    return AdapterBranch(
        branch=branch, interval=(t_lo, t_hi), sites=sites,
        rank=rank, alpha=float(alpha), seed=int(seed),
    )


def _validate_partition(branches: dict) -> None:
    if set(branches) != set(BRANCH_TAGS):
        raise ConfigurationError(f"need exactly branches {BRANCH_TAGS}, got {sorted(branches)}")
    ivals = sorted((b.interval for b in branches.values()), key=lambda iv: iv[0])
    if ivals[0][0] != 0.0 or ivals[1][1] != 1.0 or ivals[0][1] != ivals[1][0]:
        raise ConfigurationError(
            f"branch intervals {ivals} do not partition [0, 1]"
        )


def select_branch(t: float, branches: dict) -> str:
    """Return the tag of the unique branch whose interval contains t.

    Intervals are half-open [lo, hi); the branch reaching hi == 1.0 also
    owns t == 1.0 so the union covers the closed interval.
    """
    t = float(t)
    if not (0.0 <= t <= 1.0):
        raise ConfigurationError(f"timestep t={t} outside [0, 1]")
    _validate_partition(branches)
    for tag, b in branches.items():
        lo, hi = b.interval
        if lo <= t < hi or (t == hi == 1.0):
            return tag
    raise ConfigurationError(f"no branch owns t={t}")  # unreachable after validation


def default_branches(config: BackboneConfig, rank: int, alpha: float, seed: int,
                     boundary: float = 0.5) -> dict:
    """High branch owns [boundary, 1.0], low branch owns [0.0, boundary)."""
    if not (0.0 < boundary < 1.0):
        raise ConfigurationError(f"branch boundary {boundary} must lie in (0, 1)")
    return {
        "high": attach_adapter(config, rank, alpha, "high", (boundary, 1.0), seed),
        "low": attach_adapter(config, rank, alpha, "low", (0.0, boundary), seed + 1),
    }


def merge_weights(params: BackboneParams, branch: AdapterBranch) -> BackboneParams:
    """Fold the branch deltas into a copy of the frozen weights."""
    merged = copy.deepcopy(params)
    for (bi, tag), site in branch.sites.items():
        attr = _SITE_ATTR[tag] + "_w"
        w = getattr(merged.blocks[bi], attr)
        delta = site.delta()
        if delta.shape != w.shape:
            raise ShapeError(
                f"delta shape {delta.shape} does not match weight {w.shape} at {tag}"
            )
        setattr(merged.blocks[bi], attr, w + delta)
    return merged


# ---------------------------------------------------------------------------
# Checkpoint I/O: one .npz per branch, metadata in the header entry.
# ---------------------------------------------------------------------------


def save_branch(path, branch: AdapterBranch) -> str:
    """Persist a branch; returns its content digest."""
    header = {
        "branch": branch.branch,
        "interval": list(branch.interval),
        "rank": branch.rank,
        "alpha": branch.alpha,
        "seed": branch.seed,
        "digest": branch.digest(),
    }
    arrays = {"__header__": np.frombuffer(json.dumps(header).encode(), dtype=np.uint8)}
    for (bi, tag), site in branch.sites.items():
        arrays[f"A.{bi}.{tag}"] = site.A
        arrays[f"B.{bi}.{tag}"] = site.B
    np.savez(path, **arrays)
    return header["digest"]


def load_branch(path) -> AdapterBranch:
    with np.load(path) as data:
        header = json.loads(bytes(data["__header__"]).decode())
        sites = {}
        for name in data.files:
            if name.startswith("A."):
                _, bi, tag = name.split(".", 2)
                bi = int(bi)
                sites[(bi, tag)] = LoraSite(
                    block=bi, tag=tag,
                    A=np.asarray(data[name], dtype=np.float64),
                    B=np.asarray(data[f"B.{bi}.{tag}"], dtype=np.float64),
                    rank=int(header["rank"]), alpha=float(header["alpha"]),
                )
    branch = AdapterBranch(
        branch=header["branch"], interval=tuple(header["interval"]),
        sites=sites, rank=int(header["rank"]), alpha=float(header["alpha"]),
        seed=int(header["seed"]),
    )
    if branch.digest() != header["digest"]:
        raise ConfigurationError(f"checkpoint {path} digest mismatch")
    return branch
