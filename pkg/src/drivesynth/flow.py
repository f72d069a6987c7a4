"""Flow-matching objective, two-branch training loop, and Euler sampler.

The interpolation path is linear, x_t = (1 - t) * x_0 + t * x_1 with x_0
the Gaussian noise endpoint, so the velocity target is the constant
x_1 - x_0. Each training step draws timesteps from one branch's interval,
computes the mean-squared residual against the target velocity, and applies
plain SGD to that branch's adapter factors only. Sampling starts from
seeded noise at the noise end of the path and Euler-integrates the
predicted velocity across N uniform steps, switching branches per step.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .adapter import AdapterBranch, select_branch
from .errors import NumericError, ShapeError, UsageError
from .model import LatentVideo, TextEmbedding


@dataclass
class TrainSample:
    """One training pair plus its conditioning signals and fixed noise."""

    sample_id: str
    x_1: LatentVideo
    condition: LatentVideo
    text: TextEmbedding
    reference: np.ndarray  # (H, W, C) image, post-randomization
    x_0: LatentVideo


@dataclass
class SamplerConfig:
    steps: int = 16
    seed: int = 0

    def __post_init__(self):
        if self.steps < 1:
            raise UsageError(f"sampler needs steps >= 1, got {self.steps}")


@dataclass
class LossRecord:
    step: int
    branch: str
    loss: float
    t_mean: float

    def as_dict(self):
        return {"step": self.step, "branch": self.branch,
                "t": self.t_mean, "loss": self.loss}


def interpolate(x_0: LatentVideo, x_1: LatentVideo, t: float) -> LatentVideo:
    """Point on the linear path: (1 - t) * x_0 + t * x_1."""
    if x_0.shape != x_1.shape:
        raise ShapeError(f"endpoint shapes differ: {x_0.shape} vs {x_1.shape}")
    if not (0.0 <= t <= 1.0):
        raise UsageError(f"t={t} outside [0, 1]")
    return LatentVideo((1.0 - t) * x_0.data + t * x_1.data, role="noisy_state")


def target_velocity(x_0: LatentVideo, x_1: LatentVideo) -> LatentVideo:
    """Constant velocity of the linear path: x_1 - x_0."""
    if x_0.shape != x_1.shape:
        raise ShapeError(f"endpoint shapes differ: {x_0.shape} vs {x_1.shape}")
    return LatentVideo(x_1.data - x_0.data, role="velocity")


def total_loss(high: LossRecord, low: LossRecord) -> float:
    """Sum of the two branch objectives."""
    value = float(high.loss) + float(low.loss)
    if not np.isfinite(value):
        raise NumericError(f"non-finite total loss {value}")
    return value


def _draw_timesteps(rng, interval, n):
    lo, hi = interval
    return lo + (hi - lo) * rng.random(n)


def _mse_and_grad(pred: np.ndarray, target: np.ndarray):
    resid = pred - target
    loss = float(np.mean(resid * resid))
    grad = (2.0 / resid.size) * resid
    return loss, grad


def branch_loss(
    model,
    adapter: AdapterBranch,
    batch,
    seed: int,
    step: int = 0,
    ref_tokens=None,
    want_grads: bool = False,
):
    """Flow-matching MSE of one branch over a batch, timesteps ~ U(interval).

    Returns a LossRecord, or (LossRecord, grads) with ``want_grads`` where
    grads maps (block, site tag) -> [dA, dB] averaged over the batch.
    """
    if not batch:
        raise UsageError("branch_loss needs a nonempty batch")
    rng = np.random.default_rng(int(seed))
    ts = _draw_timesteps(rng, adapter.interval, len(batch))
    grads = None
    losses = []
    for sample, t in zip(batch, ts):
        x_t = interpolate(sample.x_0, sample.x_1, float(t))
        u_star = target_velocity(sample.x_0, sample.x_1).data
        ref = (
            ref_tokens[sample.sample_id]
            if ref_tokens is not None and sample.sample_id in ref_tokens
            else model.encode_reference(sample.reference)
        )
        if want_grads:
            pred, cache = model.forward_cached(
                x_t, sample.condition, sample.text, ref, float(t), adapter
            )
            loss, g = _mse_and_grad(pred, u_star)
            grads = model.backward(cache, g / len(batch), adapter, grads)
        else:
            pred = model.forward(
                x_t, sample.condition, sample.text, ref, float(t), adapter
            ).data
            loss, _ = _mse_and_grad(pred, u_star)
        losses.append(loss)
    mean_loss = float(np.mean(losses))
    if not np.isfinite(mean_loss):
        raise NumericError(f"non-finite branch loss at step {step}")
    record = LossRecord(step=step, branch=adapter.branch,
                        loss=mean_loss, t_mean=float(np.mean(ts)))
    if want_grads:
        return record, grads
    return record


def train_adapters(
    model,
    branches: dict,
    dataset,
    steps: int,
    learning_rate: float,
    seed: int,
    batch_size: int = 4,
):
    """Alternate SGD steps over the two branches; backbone stays frozen.

    Even steps train the high branch, odd steps the low branch; each step's
    timesteps are drawn from the branch's own interval, so every update
    touches exactly the regime that branch owns. Returns the loss history.
    """
    if not dataset:
        raise UsageError("train_adapters needs a nonempty dataset")
    digest_before = model.params.digest()
    rng = np.random.default_rng(int(seed))
    ref_cache = {s.sample_id: model.encode_reference(s.reference) for s in dataset}
    history = []
    order = ("high", "low")
    for step in range(int(steps)):
        branch = branches[order[step % 2]]
        idx = rng.integers(0, len(dataset), size=min(batch_size, len(dataset)))
        batch = [dataset[i] for i in idx]
        step_seed = int(rng.integers(0, 2**63 - 1))
        record, grads = branch_loss(
            model, branch, batch, seed=step_seed, step=step,
            ref_tokens=ref_cache, want_grads=True,
        )
        if not np.isfinite(record.loss):
            raise NumericError(f"training aborted: non-finite loss at step {step}")
        for key, (ga, gb) in grads.items():
            site = branch.sites[key]
            site.A -= learning_rate * ga
            site.B -= learning_rate * gb
        history.append(record)
    assert model.params.digest() == digest_before, "frozen backbone was modified"
    return branches, history


def smoothed_endpoints(history, window: int = 10):
    """(initial, final) moving averages of the summed high+low loss pairs."""
    totals = []
    for i in range(0, len(history) - 1, 2):
        totals.append(history[i].loss + history[i + 1].loss)
    if not totals:
        raise UsageError("history too short to smooth")
    w = min(window, len(totals))
    return float(np.mean(totals[:w])), float(np.mean(totals[-w:]))


def sample(
    model,
    branches: dict,
    condition: LatentVideo,
    text: TextEmbedding,
    reference: np.ndarray,
    cfg: SamplerConfig,
) -> LatentVideo:
    """Integrate the learned velocity field from noise to a generated clip.

    Explicit Euler with N uniform steps: starting from seeded Gaussian
    noise at the noise end of the path, x += (1/N) * u(x, t_k) for
    t_k = k / N, selecting the adapter branch per step. A constant field
    is integrated exactly for any N.
    """
    T, H, W, _ = condition.shape
    channels = model.config.channels
    rng = np.random.default_rng(int(cfg.seed))
    x = rng.standard_normal((T, H, W, channels))
    if reference is None:
        ref_tok = None
    elif reference.ndim == 3:
        ref_tok = model.encode_reference(reference)
    else:
        ref_tok = reference
    dt = 1.0 / cfg.steps
    for k in range(cfg.steps):
        t = k / cfg.steps
        branch = branches[select_branch(t, branches)]
        u = model.forward(
            LatentVideo(x, role="noisy_state"), condition, text, ref_tok, t, branch
        )
        x = x + dt * u.data
        if not np.all(np.isfinite(x)):
            raise NumericError(f"non-finite sampler state at step {k}")
    return LatentVideo(x, role="data_sample")
