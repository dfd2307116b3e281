"""Two-resolution denoiser with instrumented attention blocks.

The network predicts the noise content of a latent given a timestep and an
encoded prompt.  Layout:

    conv_in -> res0 -> sa0 -> ca0          (full latent resolution)
    -> strided conv -> res1 -> sa1 -> ca1 -> res2   (half resolution)
    -> upsample + conv, additive skip -> out conv

Every attention block runs pre-norm multi-head attention; ``sa*`` attends
spatially over itself, ``ca*`` attends into the encoded prompt tokens.  The
forward pass can record what the attention blocks computed: the spatial
output of each self-attention block and the per-head attention weights of
each cross-attention block.  Those records are the raw material for feature
extraction, so they are kept differentiable when the pass is traced.

All math routes through the autodiff dispatch layer: feeding plain float64
arrays runs a plain float64 forward, feeding ``Var`` parameters produces a
taped graph, and both paths compute bitwise-identical values.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .. import autodiff as ad
from ..errors import InvalidArgument
from .config import ModelConfig


@dataclass
class AttentionRecord:
    """What the instrumented blocks saw during one forward pass.

    ``sa_out`` maps layer id to the block output on the spatial grid,
    shape (B, h, w, c).  ``ca_weights`` maps layer id to softmax-normalized
    attention weights, shape (B, heads, h*w, n_tokens); rows sum to one.
    Values are ndarrays on a plain pass and ``Var`` nodes on a traced pass.
    """

    sa_out: dict
    ca_weights: dict


def timestep_embedding(t, dim: int, max_period: float = 10000.0) -> np.ndarray:
    """Sinusoidal features of integer timesteps, shape (B, dim)."""
    t = np.asarray(t, dtype=np.float64).reshape(-1)
    half = dim // 2
    freqs = np.exp(-np.log(max_period) * np.arange(half, dtype=np.float64) / half)
    args = t[:, None] * freqs[None, :]
    return np.concatenate([np.sin(args), np.cos(args)], axis=1)


def init_params(config: ModelConfig, rng: np.random.Generator) -> dict[str, np.ndarray]:
    """Fresh parameter dictionary; keys are stable and checkpoint-ordered."""
    p: dict[str, np.ndarray] = {}
    w0, w1 = config.width_full, config.width_half
    cl, dt = config.latent_channels, config.text_dim

    def conv(name, k, cin, cout, scale=None):
        s = scale if scale is not None else np.sqrt(2.0 / (k * k * cin))
        p[f"{name}.w"] = rng.normal(0.0, s, size=(k, k, cin, cout))
        p[f"{name}.b"] = np.zeros(cout)

    def norm(name, c):
        p[f"{name}.g"] = np.ones(c)
        p[f"{name}.b"] = np.zeros(c)

    def res(name, c):
        norm(f"{name}.gn1", c)
        conv(f"{name}.c1", 3, c, c)
        p[f"{name}.time.w"] = rng.normal(0.0, np.sqrt(1.0 / config.time_dim), size=(config.time_dim, c))
        p[f"{name}.time.b"] = np.zeros(c)
        norm(f"{name}.gn2", c)
        conv(f"{name}.c2", 3, c, c)

    p["text.embed"] = rng.normal(0.0, 1.0, size=(len(config.vocab), dt))
    p["text.pos"] = rng.normal(0.0, 0.1, size=(config.max_tokens, dt))
    p["time.w1"] = rng.normal(0.0, np.sqrt(1.0 / config.time_dim), size=(config.time_dim, config.time_dim))
    p["time.b1"] = np.zeros(config.time_dim)
    p["time.w2"] = rng.normal(0.0, np.sqrt(1.0 / config.time_dim), size=(config.time_dim, config.time_dim))
    p["time.b2"] = np.zeros(config.time_dim)

    conv("conv_in", 3, cl, w0)
    res("res0", w0)
    for lid, (dk, c) in (("sa0", (w0, w0)), ("ca0", (dt, w0)), ("sa1", (w1, w1)), ("ca1", (dt, w1))):
        norm(f"{lid}.ln", c)
        p[f"{lid}.q"] = rng.normal(0.0, np.sqrt(1.0 / c), size=(c, c))
        p[f"{lid}.k"] = rng.normal(0.0, np.sqrt(1.0 / dk), size=(dk, c))
        p[f"{lid}.v"] = rng.normal(0.0, np.sqrt(1.0 / dk), size=(dk, c))
        p[f"{lid}.o"] = rng.normal(0.0, np.sqrt(1.0 / c), size=(c, c))
    conv("down", 3, w0, w1)
    res("res1", w1)
    res("res2", w1)
    conv("up", 3, w1, w0)
    norm("out.gn", w0)
    conv("out", 3, w0, cl, scale=1e-4)
    return p


def _resblock(p, name, x, temb, groups):
    h = ad.group_norm(x, groups, p[f"{name}.gn1.g"], p[f"{name}.gn1.b"])
    h = ad.silu(h)
    h = ad.conv2d(h, p[f"{name}.c1.w"], p[f"{name}.c1.b"], stride=1, pad=1)
    tproj = ad.matmul(temb, p[f"{name}.time.w"]) + p[f"{name}.time.b"]
    b = ad.value(tproj).shape[0]
    h = h + ad.reshape(tproj, (b, 1, 1, ad.value(tproj).shape[1]))
    h = ad.group_norm(h, groups, p[f"{name}.gn2.g"], p[f"{name}.gn2.b"])
    h = ad.silu(h)
    return x + ad.conv2d(h, p[f"{name}.c2.w"], p[f"{name}.c2.b"], stride=1, pad=1)


def _split_heads(x, heads):
    b, n, c = ad.value(x).shape
    x = ad.reshape(x, (b, n, heads, c // heads))
    return ad.swapaxes(x, 1, 2)  # (B, heads, n, hd)


def _merge_heads(x):
    b, heads, n, hd = ad.value(x).shape
    return ad.reshape(ad.swapaxes(x, 1, 2), (b, n, heads * hd))


def _attention(p, lid, x_seq, kv_seq, heads):
    """Pre-norm residual attention; returns (out_seq, weights (B,heads,n,m))."""
    h = ad.layer_norm(x_seq, p[f"{lid}.ln.g"], p[f"{lid}.ln.b"])
    q = _split_heads(ad.matmul(h, p[f"{lid}.q"]), heads)
    k = _split_heads(ad.matmul(kv_seq, p[f"{lid}.k"]), heads)
    v = _split_heads(ad.matmul(kv_seq, p[f"{lid}.v"]), heads)
    hd = ad.value(q).shape[-1]
    logits = ad.matmul(q, ad.swapaxes(k, 2, 3)) * (1.0 / np.sqrt(hd))
    w = ad.softmax(logits, axis=-1)
    o = _merge_heads(ad.matmul(w, v))
    return x_seq + ad.matmul(o, p[f"{lid}.o"]), w


def _spatial_attention(p, lid, h, ctx, heads, capture: AttentionRecord | None):
    b, hh, ww, c = ad.value(h).shape
    seq = ad.reshape(h, (b, hh * ww, c))
    if lid.startswith("sa"):
        out, w = _attention(p, lid, seq, seq, heads)
        if capture is not None:
            capture.sa_out[lid] = ad.reshape(out, (b, hh, ww, c))
    else:
        out, w = _attention(p, lid, seq, ctx, heads)
        if capture is not None:
            capture.ca_weights[lid] = w
    return ad.reshape(out, (b, hh, ww, c))


def encode_tokens(p, token_ids: np.ndarray, config: ModelConfig):
    """Token ids (B, L) -> context vectors (B, L, text_dim).

    Identity is carried by the learned embedding table, word order by an
    additive positional table; both live in the parameter dict and are
    differentiable so prompt-side adapters receive gradients.
    """
    ids = np.asarray(token_ids)
    if ids.ndim != 2:
        raise InvalidArgument("token_ids must be (batch, length)")
    if ids.shape[1] > config.max_tokens:
        raise InvalidArgument(f"prompt longer than max_tokens={config.max_tokens}")
    emb = ad.take(p["text.embed"], ids)  # (B, L, dt)
    pos_slice = ad.take(p["text.pos"], np.arange(ids.shape[1]))
    return emb + pos_slice


def denoise(p, z, t, token_ids: np.ndarray, config: ModelConfig,
            capture: AttentionRecord | None = None):
    """Predict noise for a batch of latents.

    p: parameter dict (ndarray or Var values), z: (B, H, W, C) latents,
    t: (B,) integer timesteps, token_ids: (B, L).  Returns (B, H, W, C);
    if ``capture`` is given it is filled in place.
    """
    zv = ad.value(z)
    if zv.ndim != 4 or zv.shape[1] != config.latent_hw or zv.shape[3] != config.latent_channels:
        raise InvalidArgument(f"latent batch must be (B, {config.latent_hw}, {config.latent_hw}, "
                              f"{config.latent_channels}), got {zv.shape}")
    temb = timestep_embedding(t, config.time_dim)
    temb = ad.matmul(ad.silu(ad.matmul(temb, p["time.w1"]) + p["time.b1"]), p["time.w2"]) + p["time.b2"]
    ctx = encode_tokens(p, token_ids, config)

    g = config.gn_groups
    h = ad.conv2d(z, p["conv_in.w"], p["conv_in.b"], stride=1, pad=1)
    h = _resblock(p, "res0", h, temb, g)
    h = _spatial_attention(p, "sa0", h, ctx, config.heads, capture)
    h = _spatial_attention(p, "ca0", h, ctx, config.heads, capture)
    skip = h
    h = ad.conv2d(h, p["down.w"], p["down.b"], stride=2, pad=1)
    h = _resblock(p, "res1", h, temb, g)
    h = _spatial_attention(p, "sa1", h, ctx, config.heads, capture)
    h = _spatial_attention(p, "ca1", h, ctx, config.heads, capture)
    h = _resblock(p, "res2", h, temb, g)
    h = ad.conv2d(ad.upsample2x(h), p["up.w"], p["up.b"], stride=1, pad=1)
    h = h + skip
    h = ad.silu(ad.group_norm(h, g, p["out.gn.g"], p["out.gn.b"]))
    return ad.conv2d(h, p["out.w"], p["out.b"], stride=1, pad=1)
