"""Frozen miniature video transformer with a condition-injection pathway.

The backbone is a pre-LN transformer over spatio-temporal patches. The
structural condition video is fused with the noisy latent by channel-wise
concatenation before a shared linear patch embedding, text tokens are
projected into model width and attended to via cross-attention together
with reference-image tokens, and a sinusoidal timestep embedding is added
to every token. Parameters are randomly initialized once and then frozen;
all trainable capacity lives in low-rank adapter factors (see adapter.py).

Forward passes are pure and deterministic. ``forward_cached`` retains the
activations needed by ``backward_adapter_grads``, which backpropagates the
output gradient through every block and accumulates gradients only for the
adapter factors, never for the frozen weights.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .errors import ConfigurationError, NumericError, ShapeError, UsageError
from .util import arrays_digest

ROLE_TAGS = ("noisy_state", "data_sample", "condition", "velocity")

SITE_TAGS = (
    "self_q",
    "self_k",
    "self_v",
    "self_o",
    "cross_q",
    "cross_k",
    "cross_v",
    "cross_o",
    "ffn_in",
    "ffn_out",
)

_SITE_ATTR = {
    "self_q": "sa_q",
    "self_k": "sa_k",
    "self_v": "sa_v",
    "self_o": "sa_o",
    "cross_q": "ca_q",
    "cross_k": "ca_k",
    "cross_v": "ca_v",
    "cross_o": "ca_o",
    "ffn_in": "ff_in",
    "ffn_out": "ff_out",
}

_LN_EPS = 1e-6
_GELU_C = 0.7978845608028654  # sqrt(2/pi)
_GELU_A = 0.044715


@dataclass
class LatentVideo:
    """A (frames, rows, cols, channels) float array with a role tag."""

    data: np.ndarray
    role: str = "data_sample"

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float64)
        if self.role not in ROLE_TAGS:
            raise ConfigurationError(f"unknown latent role {self.role!r}")
        if self.data.ndim != 4:
            raise ShapeError(f"latent video must be 4-D, got shape {self.data.shape}")
        if min(self.data.shape) < 1:
            raise ShapeError(f"latent video has empty axis: {self.data.shape}")
        if not np.all(np.isfinite(self.data)):
            raise NumericError("latent video contains non-finite entries")

    @property
    def shape(self):
        return self.data.shape


@dataclass
class TextEmbedding:
    """Prompt token embeddings, one row per token."""

    tokens: np.ndarray

    def __post_init__(self):
        self.tokens = np.asarray(self.tokens, dtype=np.float64)
        if self.tokens.ndim != 2 or self.tokens.shape[0] < 1:
            raise ShapeError(f"text embedding must be (n_tokens, width), got {self.tokens.shape}")
        if not np.all(np.isfinite(self.tokens)):
            raise NumericError("text embedding contains non-finite entries")


@dataclass
class BackboneConfig:
    frames: int = 8
    height: int = 16
    width: int = 16
    channels: int = 4
    cond_channels: int = 1
    patch: tuple = (2, 4, 4)
    embed_dim: int = 64
    blocks: int = 4
    heads: int = 4
    ffn_hidden: int = 256
    text_width: int = 32
    ref_tokens: int = 4

    def __post_init__(self):
        self.patch = tuple(int(p) for p in self.patch)
        self.validate()

    def validate(self):
        t_p, h_p, w_p = self.patch
        for name, dim, p in (
            ("frames", self.frames, t_p),
            ("height", self.height, h_p),
            ("width", self.width, w_p),
        ):
            if dim < 1 or p < 1 or dim % p != 0:
                raise ConfigurationError(
                    f"{name}={dim} is not divisible by its patch dim {p}"
                )
        if self.channels < 1 or self.cond_channels < 1:
            raise ConfigurationError("channel counts must be >= 1")
        if self.embed_dim < 1 or self.embed_dim % self.heads != 0:
            raise ConfigurationError(
                f"embed_dim={self.embed_dim} must be divisible by heads={self.heads}"
            )
        if self.blocks < 1 or self.ffn_hidden < 1 or self.text_width < 1:
            raise ConfigurationError("blocks, ffn_hidden and text_width must be >= 1")
        if not (1 <= self.ref_tokens <= self.height):
            raise ConfigurationError(
                f"ref_tokens={self.ref_tokens} must lie in [1, height]"
            )

    @property
    def patch_in_dim(self) -> int:
        t_p, h_p, w_p = self.patch
        return t_p * h_p * w_p * (self.channels + self.cond_channels)

    @property
    def patch_out_dim(self) -> int:
        t_p, h_p, w_p = self.patch
        return t_p * h_p * w_p * self.channels

    @property
    def n_tokens(self) -> int:
        t_p, h_p, w_p = self.patch
        return (self.frames // t_p) * (self.height // h_p) * (self.width // w_p)

    def site_dims(self, tag: str) -> tuple:
        """(d_in, d_out) of an adapter-eligible projection site."""
        d = self.embed_dim
        if tag == "ffn_in":
            return d, self.ffn_hidden
        if tag == "ffn_out":
            return self.ffn_hidden, d
        if tag in SITE_TAGS:
            return d, d
        raise ConfigurationError(f"unknown site tag {tag!r}")


@dataclass
class BlockParams:
    sa_q_w: np.ndarray
    sa_q_b: np.ndarray
    sa_k_w: np.ndarray
    sa_k_b: np.ndarray
    sa_v_w: np.ndarray
    sa_v_b: np.ndarray
    sa_o_w: np.ndarray
    sa_o_b: np.ndarray
    ca_q_w: np.ndarray
    ca_q_b: np.ndarray
    ca_k_w: np.ndarray
    ca_k_b: np.ndarray
    ca_v_w: np.ndarray
    ca_v_b: np.ndarray
    ca_o_w: np.ndarray
    ca_o_b: np.ndarray
    ff_in_w: np.ndarray
    ff_in_b: np.ndarray
    ff_out_w: np.ndarray
    ff_out_b: np.ndarray


@dataclass
class BackboneParams:
    patch_w: np.ndarray
    patch_b: np.ndarray
    time_w: np.ndarray
    time_b: np.ndarray
    text_w: np.ndarray
    text_b: np.ndarray
    ref_w: np.ndarray
    ref_b: np.ndarray
    blocks: list = field(default_factory=list)
    out_w: np.ndarray = None
    out_b: np.ndarray = None
    frozen: bool = True

    def iter_weights(self):
        """Yield (name, array) in a fixed order; basis for digests and I/O."""
        yield "patch_w", self.patch_w
        yield "patch_b", self.patch_b
        yield "time_w", self.time_w
        yield "time_b", self.time_b
        yield "text_w", self.text_w
        yield "text_b", self.text_b
        yield "ref_w", self.ref_w
        yield "ref_b", self.ref_b
        for i, blk in enumerate(self.blocks):
            for name in (
                "sa_q", "sa_k", "sa_v", "sa_o",
                "ca_q", "ca_k", "ca_v", "ca_o",
                "ff_in", "ff_out",
            ):
                yield f"block{i}.{name}_w", getattr(blk, name + "_w")
                yield f"block{i}.{name}_b", getattr(blk, name + "_b")
        yield "out_w", self.out_w
        yield "out_b", self.out_b

    def digest(self) -> str:
        return arrays_digest(arr for _, arr in self.iter_weights())

    def site_weight(self, block: int, tag: str) -> np.ndarray:
        return getattr(self.blocks[block], _SITE_ATTR[tag] + "_w")


def init_backbone(config: BackboneConfig, seed: int) -> BackboneParams:
    """Deterministically initialize and freeze the backbone parameters."""
    config.validate()
    rng = np.random.default_rng(int(seed))
    d = config.embed_dim

    def lin(d_out, d_in, scale=None):
        s = (1.0 / math.sqrt(d_in)) if scale is None else scale
        w = rng.normal(0.0, s, size=(d_out, d_in))
        b = rng.normal(0.0, 0.02, size=(d_out,))
        return w, b

    patch_w, patch_b = lin(d, config.patch_in_dim)
    time_w, time_b = lin(d, d)
    text_w, text_b = lin(d, config.text_width)
    ref_w, _ = lin(d, config.channels)
    ref_b = rng.normal(0.0, 0.2, size=(d,))

    blocks = []
    for _ in range(config.blocks):
        kw = {}
        for name in ("sa_q", "sa_k", "sa_v", "sa_o", "ca_q", "ca_k", "ca_v", "ca_o"):
            w, b = lin(d, d)
            kw[name + "_w"], kw[name + "_b"] = w, b
        kw["ff_in_w"], kw["ff_in_b"] = lin(config.ffn_hidden, d)
        kw["ff_out_w"], kw["ff_out_b"] = lin(d, config.ffn_hidden)
        blocks.append(BlockParams(**kw))

    out_w, _ = lin(config.patch_out_dim, d)
    out_b = rng.normal(0.0, 0.002, size=(config.patch_out_dim,))

    return BackboneParams(
        patch_w=patch_w, patch_b=patch_b,
        time_w=time_w, time_b=time_b,
        text_w=text_w, text_b=text_b,
        ref_w=ref_w, ref_b=ref_b,
        blocks=blocks, out_w=out_w, out_b=out_b, frozen=True,
    )


# ---------------------------------------------------------------------------
# Patchification and conditioning pathways
# ---------------------------------------------------------------------------


def _patchify(arr: np.ndarray, patch) -> np.ndarray:
    """(T,H,W,C) -> (n_tokens, t_p*h_p*w_p*C), token order (t, h, w)."""
    T, H, W, C = arr.shape
    t_p, h_p, w_p = patch
    a = arr.reshape(T // t_p, t_p, H // h_p, h_p, W // w_p, w_p, C)
    a = a.transpose(0, 2, 4, 1, 3, 5, 6)
    return a.reshape(-1, t_p * h_p * w_p * C)


def _unpatchify(tokens: np.ndarray, shape, patch) -> np.ndarray:
    T, H, W, C = shape
    t_p, h_p, w_p = patch
    a = tokens.reshape(T // t_p, H // h_p, W // w_p, t_p, h_p, w_p, C)
    a = a.transpose(0, 3, 1, 4, 2, 5, 6)
    return a.reshape(T, H, W, C)


def patch_embed(
    params: BackboneParams, config: BackboneConfig, x: LatentVideo, condition: LatentVideo
) -> np.ndarray:
    """Fuse condition with the latent and map patches to model width."""
    xa, ca = x.data, condition.data
    if xa.shape[:3] != ca.shape[:3]:
        raise ShapeError(
            f"latent {xa.shape} and condition {ca.shape} disagree on (T, H, W)"
        )
    if xa.shape[3] != config.channels or ca.shape[3] != config.cond_channels:
        raise ShapeError(
            f"channel counts {xa.shape[3]}/{ca.shape[3]} do not match config "
            f"{config.channels}/{config.cond_channels}"
        )
    fused = np.concatenate([xa, ca], axis=-1)
    patches = _patchify(fused, config.patch)
    return patches @ params.patch_w.T + params.patch_b


def encode_reference(
    params: BackboneParams, config: BackboneConfig, image: np.ndarray
) -> np.ndarray:
    """Map a reference image to a fixed-length token sequence.

    The image is split into ``ref_tokens`` horizontal bands; each band is
    mean-pooled per channel and linearly projected, so the tokens carry
    appearance statistics rather than spatial layout.
    """
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 3 or image.shape[2] != config.channels:
        raise ShapeError(
            f"reference image must be (H, W, {config.channels}), got {image.shape}"
        )
    if image.shape[0] < config.ref_tokens:
        raise ShapeError(
            f"reference image height {image.shape[0]} < ref_tokens {config.ref_tokens}"
        )
    if not np.all(np.isfinite(image)):
        raise NumericError("reference image contains non-finite entries")
    bands = np.array_split(image, config.ref_tokens, axis=0)
    feats = np.stack([b.mean(axis=(0, 1)) for b in bands])  # (n_ref, C)
    return feats @ params.ref_w.T + params.ref_b


def time_features(t: float, d: int) -> np.ndarray:
    """Sinusoidal features of a scalar timestep, length d."""
    half = d // 2
    freqs = np.exp(-math.log(10000.0) * np.arange(half) / max(half, 1))
    ang = t * freqs
    feat = np.concatenate([np.sin(ang), np.cos(ang)])
    if feat.shape[0] < d:
        feat = np.concatenate([feat, np.zeros(d - feat.shape[0])])
    return feat


# ---------------------------------------------------------------------------
# Primitive forward/backward pieces
# ---------------------------------------------------------------------------


def _layernorm(x):
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + _LN_EPS)
    return xc * inv, inv


def _layernorm_backward(g, xhat, inv):
    gm = g.mean(axis=-1, keepdims=True)
    gx = (g * xhat).mean(axis=-1, keepdims=True)
    return inv * (g - gm - xhat * gx)


def _gelu(x):
    u = _GELU_C * (x + _GELU_A * x**3)
    return 0.5 * x * (1.0 + np.tanh(u))


def _gelu_grad(x):
    u = _GELU_C * (x + _GELU_A * x**3)
    th = np.tanh(u)
    return 0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * _GELU_C * (1.0 + 3.0 * _GELU_A * x**2)


def _site_of(adapter, block: int, tag: str):
    if adapter is None:
        return None
    return adapter.sites.get((block, tag))


def _linear(x, w, b, site):
    y = x @ w.T + b
    if site is not None and site.B.any():
        y = y + (site.alpha / site.rank) * ((x @ site.A.T) @ site.B.T)
    return y


def _linear_backward(g, x, w, site, grads, key):
    """Propagate through a (possibly adapted) linear; accumulate A/B grads."""
    gx = g @ w
    if site is not None:
        s = site.alpha / site.rank
        gb_path = g @ site.B  # (N, r)
        if site.B.any():
            gx = gx + s * (gb_path @ site.A)
        if grads is not None:
            ga, gb = grads[key]
            ga += s * (gb_path.T @ x)
            gb += s * (g.T @ (x @ site.A.T))
    return gx


def _split_heads(x, heads):
    n, d = x.shape
    return x.reshape(n, heads, d // heads).transpose(1, 0, 2)


def _merge_heads(x):
    h, n, dh = x.shape
    return x.transpose(1, 0, 2).reshape(n, h * dh)


# ---------------------------------------------------------------------------
# Full forward / backward
# ---------------------------------------------------------------------------


def _forward_impl(params, config, x_arr, cond_arr, text_arr, ref_tok, t, adapter, keep):
    heads = config.heads
    cache = {"blocks": []} if keep else None

    ctx = np.concatenate([text_arr @ params.text_w.T + params.text_b, ref_tok])
    patches = _patchify(np.concatenate([x_arr, cond_arr], axis=-1), config.patch)
    x = patches @ params.patch_w.T + params.patch_b
    x = x + (params.time_w @ time_features(float(t), config.embed_dim) + params.time_b)

    if keep:
        cache["ctx"] = ctx

    for bi, blk in enumerate(params.blocks):
        bc = {} if keep else None

        xhat1, inv1 = _layernorm(x)
        q = _split_heads(_linear(xhat1, blk.sa_q_w, blk.sa_q_b, _site_of(adapter, bi, "self_q")), heads)
        k = _split_heads(_linear(xhat1, blk.sa_k_w, blk.sa_k_b, _site_of(adapter, bi, "self_k")), heads)
        v = _split_heads(_linear(xhat1, blk.sa_v_w, blk.sa_v_b, _site_of(adapter, bi, "self_v")), heads)
        o_heads, attn1 = kernels.attn_forward(q, k, v)
        o1 = _merge_heads(o_heads)
        x = x + _linear(o1, blk.sa_o_w, blk.sa_o_b, _site_of(adapter, bi, "self_o"))

        xhat2, inv2 = _layernorm(x)
        qc = _split_heads(_linear(xhat2, blk.ca_q_w, blk.ca_q_b, _site_of(adapter, bi, "cross_q")), heads)
        kc = _split_heads(_linear(ctx, blk.ca_k_w, blk.ca_k_b, _site_of(adapter, bi, "cross_k")), heads)
        vc = _split_heads(_linear(ctx, blk.ca_v_w, blk.ca_v_b, _site_of(adapter, bi, "cross_v")), heads)
        oc_heads, attn2 = kernels.attn_forward(qc, kc, vc)
        o2 = _merge_heads(oc_heads)
        x = x + _linear(o2, blk.ca_o_w, blk.ca_o_b, _site_of(adapter, bi, "cross_o"))

        xhat3, inv3 = _layernorm(x)
        h1 = _linear(xhat3, blk.ff_in_w, blk.ff_in_b, _site_of(adapter, bi, "ffn_in"))
        g = _gelu(h1)
        x = x + _linear(g, blk.ff_out_w, blk.ff_out_b, _site_of(adapter, bi, "ffn_out"))

        if not np.all(np.isfinite(x)):
            raise NumericError(f"non-finite activations in block {bi}")
        if keep:
            bc.update(
                xhat1=xhat1, inv1=inv1, q=q, k=k, v=v, attn1=attn1, o1=o1,
                xhat2=xhat2, inv2=inv2, qc=qc, kc=kc, vc=vc, attn2=attn2, o2=o2,
                xhat3=xhat3, inv3=inv3, h1=h1, g=g,
            )
            cache["blocks"].append(bc)

    y = x @ params.out_w.T + params.out_b
    out = _unpatchify(y, x_arr.shape, config.patch)
    if keep:
        cache["x_shape"] = x_arr.shape
    return out, cache


def _check_forward_args(params, config, x_t, condition, text, ref_tok, t):
    if not (0.0 <= float(t) <= 1.0):
        raise UsageError(f"timestep t={t} outside [0, 1]")
    xa = x_t.data
    if xa.shape != (config.frames, config.height, config.width, config.channels):
        raise ShapeError(
            f"x_t shape {xa.shape} does not match config "
            f"({config.frames},{config.height},{config.width},{config.channels})"
        )
    ca = condition.data
    if ca.shape[:3] != xa.shape[:3] or ca.shape[3] != config.cond_channels:
        raise ShapeError(f"condition shape {ca.shape} inconsistent with x_t {xa.shape}")
    if ref_tok is None:
        raise ShapeError("reference tokens are required (encode_reference an image)")
    ref_tok = np.asarray(ref_tok, dtype=np.float64)
    if ref_tok.shape != (config.ref_tokens, config.embed_dim):
        raise ShapeError(
            f"reference tokens shape {ref_tok.shape} != "
            f"({config.ref_tokens}, {config.embed_dim})"
        )
    if text.tokens.shape[1] != config.text_width:
        raise ShapeError(
            f"text width {text.tokens.shape[1]} != config {config.text_width}"
        )
    return ref_tok


def backbone_forward(
    params: BackboneParams,
    config: BackboneConfig,
    x_t: LatentVideo,
    condition: LatentVideo,
    text: TextEmbedding,
    ref: np.ndarray,
    t: float,
    adapter=None,
) -> LatentVideo:
    """Predict the flow target for one clip; pure function of its arguments."""
    ref_tok = _check_forward_args(params, config, x_t, condition, text, ref, t)
    out, _ = _forward_impl(
        params, config, x_t.data, condition.data, text.tokens, ref_tok, t, adapter, False
    )
    return LatentVideo(out, role="velocity")


def forward_cached(params, config, x_t, condition, text, ref, t, adapter):
    """Forward keeping the activation cache needed for adapter gradients."""
    ref_tok = _check_forward_args(params, config, x_t, condition, text, ref, t)
    out, cache = _forward_impl(
        params, config, x_t.data, condition.data, text.tokens, ref_tok, t, adapter, True
    )
    return out, cache


def backward_adapter_grads(params, config, cache, g_out, adapter, grads=None):
    """Backpropagate d(loss)/d(output) and accumulate adapter-factor grads.

    ``grads`` maps (block, site tag) -> [dA, dB] and is created zeroed when
    not supplied, so calls can accumulate over a batch. Frozen weights are
    never written to.
    """
    heads = config.heads
    if grads is None:
        grads = {}
        for key, site in adapter.sites.items():
            grads[key] = [np.zeros_like(site.A), np.zeros_like(site.B)]

    gy = _patchify(g_out, config.patch)
    gx = gy @ params.out_w

    ctx = cache["ctx"]
    for bi in range(len(params.blocks) - 1, -1, -1):
        blk = params.blocks[bi]
        bc = cache["blocks"][bi]

        # FFN branch
        g_h2 = gx
        g_g = _linear_backward(
            g_h2, bc["g"], blk.ff_out_w, _site_of(adapter, bi, "ffn_out"), grads, (bi, "ffn_out")
        )
        g_h1 = g_g * _gelu_grad(bc["h1"])
        g_xhat3 = _linear_backward(
            g_h1, bc["xhat3"], blk.ff_in_w, _site_of(adapter, bi, "ffn_in"), grads, (bi, "ffn_in")
        )
        gx = gx + _layernorm_backward(g_xhat3, bc["xhat3"], bc["inv3"])

        # cross-attention branch
        g_o2 = _linear_backward(
            gx, bc["o2"], blk.ca_o_w, _site_of(adapter, bi, "cross_o"), grads, (bi, "cross_o")
        )
        gqc, gkc, gvc = kernels.attn_backward(
            bc["qc"], bc["kc"], bc["vc"], bc["attn2"], _split_heads(g_o2, heads)
        )
        g_xhat2 = _linear_backward(
            _merge_heads(gqc), bc["xhat2"], blk.ca_q_w, _site_of(adapter, bi, "cross_q"), grads, (bi, "cross_q")
        )
        # context is built from frozen pathways only: keep the A/B grads,
        # drop the propagated context gradient
        _linear_backward(
            _merge_heads(gkc), ctx, blk.ca_k_w, _site_of(adapter, bi, "cross_k"), grads, (bi, "cross_k")
        )
        _linear_backward(
            _merge_heads(gvc), ctx, blk.ca_v_w, _site_of(adapter, bi, "cross_v"), grads, (bi, "cross_v")
        )
        gx = gx + _layernorm_backward(g_xhat2, bc["xhat2"], bc["inv2"])

        # self-attention branch
        g_o1 = _linear_backward(
            gx, bc["o1"], blk.sa_o_w, _site_of(adapter, bi, "self_o"), grads, (bi, "self_o")
        )
        gq, gk, gv = kernels.attn_backward(
            bc["q"], bc["k"], bc["v"], bc["attn1"], _split_heads(g_o1, heads)
        )
        g_xhat1 = _linear_backward(
            _merge_heads(gq), bc["xhat1"], blk.sa_q_w, _site_of(adapter, bi, "self_q"), grads, (bi, "self_q")
        )
        g_xhat1 = g_xhat1 + _linear_backward(
            _merge_heads(gk), bc["xhat1"], blk.sa_k_w, _site_of(adapter, bi, "self_k"), grads, (bi, "self_k")
        )
        g_xhat1 = g_xhat1 + _linear_backward(
            _merge_heads(gv), bc["xhat1"], blk.sa_v_w, _site_of(adapter, bi, "self_v"), grads, (bi, "self_v")
        )
        gx = gx + _layernorm_backward(g_xhat1, bc["xhat1"], bc["inv1"])

    return grads


@dataclass
class Model:
    """Config + frozen params bundle with the forward/backward entry points."""

    config: BackboneConfig
    params: BackboneParams

    def forward(self, x_t, condition, text, ref, t, adapter=None) -> LatentVideo:
        return backbone_forward(
            self.params, self.config, x_t, condition, text, ref, t, adapter
        )

    def forward_cached(self, x_t, condition, text, ref, t, adapter):
        return forward_cached(
            self.params, self.config, x_t, condition, text, ref, t, adapter
        )

    def backward(self, cache, g_out, adapter, grads=None):
        return backward_adapter_grads(
            self.params, self.config, cache, g_out, adapter, grads
        )

    def encode_reference(self, image) -> np.ndarray:
        return encode_reference(self.params, self.config, image)

    def patch_embed(self, x, condition) -> np.ndarray:
        return patch_embed(self.params, self.config, x, condition)

    def digest(self) -> str:
        return self.params.digest()


def build_model(config: BackboneConfig, seed: int) -> Model:
    return Model(config=config, params=init_backbone(config, seed))
