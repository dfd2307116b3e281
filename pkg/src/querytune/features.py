"""Feature extraction from a single denoising pass, plus object localization.

One capture pass through the denoiser yields two kinds of material:

* appearance features: the outputs of selected self-attention blocks, a
  descriptor grid per layer;
* concept maps: the cross-attention weight from each spatial location to
  the concept token, head-averaged, a scalar grid in [0, 1] per layer.

The pass conditions on a timestep but never alters the input latent.  By
default the latent is fed clean with the schedule's last timestep as
conditioning; ``add_noise`` instead noises it to that timestep first with
a seeded draw.

``extract`` has a traced twin used during refinement: same math, but the
capture tensors stay differentiable with respect to adapter parameters.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .backbone import Latent, Model, Prompt, forward_diffuse
from .backbone.denoiser import AttentionRecord, denoise
from .errors import InvalidArgument

_SENTINEL_LAST = -1


@dataclass(frozen=True)
class ExtractionConfig:
    """What to capture.  t = -1 means the schedule's last index.

    sa_layers None selects the deepest self-attention layer only; ca_layers
    None selects every cross-attention layer.
    """

    t: int = _SENTINEL_LAST
    sa_layers: tuple[str, ...] | None = None
    ca_layers: tuple[str, ...] | None = None
    add_noise: bool = False
    noise_seed: int = 0

    def resolve_t(self, schedule) -> int:
        t = schedule.num_train_steps - 1 if self.t == _SENTINEL_LAST else self.t
        schedule.check_t(t)
        return t

    def resolve_layers(self, config) -> tuple[tuple[str, ...], tuple[str, ...]]:
        sa = (config.deepest_sa_layer,) if self.sa_layers is None else tuple(self.sa_layers)
        ca = config.ca_layer_ids if self.ca_layers is None else tuple(self.ca_layers)
        for lid in sa:
            if lid not in config.sa_layer_ids:
                raise InvalidArgument(f"unknown self-attention layer {lid!r}")
        for lid in ca:
            if lid not in config.ca_layer_ids:
                raise InvalidArgument(f"unknown cross-attention layer {lid!r}")
        return sa, ca


@dataclass
class AppearanceFeatures:
    """Self-attention block outputs, one (h, w, d) grid per selected layer."""

    per_layer: dict
    source_t: int


@dataclass
class CrossAttnMaps:
    """Concept-token attention mass, one (h, w) grid in [0, 1] per layer."""

    per_layer: dict
    source_t: int


@dataclass
class ObjectMask:
    mask: np.ndarray  # boolean (h, w)
    degenerate: bool = False


def _one_hot(n: int, i: int) -> np.ndarray:
    v = np.zeros(n)
    v[i] = 1.0
    return v


def _extract_core(model: Model, z_arr, prompt: Prompt, adapters, config: ExtractionConfig):
    """Shared pass; returns taped tensors when adapters carry tape handles."""
    mc = model.config
    sa_ids, ca_ids = config.resolve_layers(mc)
    if ca_ids and prompt.concept_index is None:
        raise InvalidArgument("prompt has no concept token but concept maps were requested")
    model.vocab.validate(prompt)
    t = config.resolve_t(model.schedule)

    z_in = z_arr
    if config.add_noise:
        eps = np.random.default_rng(config.noise_seed).standard_normal(z_arr.shape)
        z_in = forward_diffuse(z_arr, t, eps, model.schedule)

    params = model.params if adapters is None else adapters.materialize(model.params, mc)
    ids = np.asarray(prompt.token_ids, dtype=np.int64)[None, :]
    rec = AttentionRecord({}, {})
    denoise(params, z_in[None], np.array([t]), ids, mc, capture=rec)

    feats = {}
    for lid in sa_ids:
        v = rec.sa_out[lid]
        b, h, w, c = ad.value(v).shape
        feats[lid] = ad.reshape(v, (h, w, c))
    maps = {}
    if ca_ids:
        onehot = _one_hot(len(prompt.token_ids), prompt.concept_index)[:, None]
        for lid in ca_ids:
            wts = rec.ca_weights[lid]             # (1, heads, hw, L)
            _, heads, hw, _ = ad.value(wts).shape
            col = ad.reshape(ad.matmul(wts, onehot), (1, heads, hw))
            avg = ad.mean(col, axis=1)            # (1, hw)
            side = int(round(np.sqrt(hw)))
            maps[lid] = ad.reshape(avg, (side, side))
    return AppearanceFeatures(feats, t), CrossAttnMaps(maps, t)


def extract(model: Model, z, prompt: Prompt, adapters=None,
            config: ExtractionConfig = ExtractionConfig()):
    """Plain extraction: concrete float64 grids, input latent untouched."""
    z_arr = z.data if isinstance(z, Latent) else np.asarray(z, dtype=np.float64)
    feats, maps = _extract_core(model, z_arr, prompt, adapters, config)
    feats.per_layer = {k: np.asarray(ad.value(v)) for k, v in feats.per_layer.items()}
    maps.per_layer = {k: np.asarray(ad.value(v)) for k, v in maps.per_layer.items()}
    return feats, maps


def extract_traced(model: Model, z, prompt: Prompt, live_adapters,
                   config: ExtractionConfig = ExtractionConfig()):
    """Extraction whose outputs stay on the tape of ``live_adapters``."""
    z_arr = z.data if isinstance(z, Latent) else np.asarray(z, dtype=np.float64)
    return _extract_core(model, z_arr, prompt, live_adapters, config)


def extract_reference(model: Model, x_ref: np.ndarray, ref_prompt: Prompt, adapters=None,
                      config: ExtractionConfig = ExtractionConfig()):
    """Encode a reference image and extract; composition convenience."""
    z = model.encode(x_ref)
    return extract(model, z, ref_prompt, adapters, config)


# ---------------------------------------------------------------------------
# resampling helpers (shared with matching and losses)


def bilinear_resize(grid: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Resize a (h, w) grid with pixel-center alignment."""
    g = np.asarray(grid, dtype=np.float64)
    h, w = g.shape
    ys = (np.arange(out_h) + 0.5) * (h / out_h) - 0.5
    xs = (np.arange(out_w) + 0.5) * (w / out_w) - 0.5
    yy = np.clip(ys, 0, h - 1)
    xx = np.clip(xs, 0, w - 1)
    y0 = np.floor(yy).astype(int)
    x0 = np.floor(xx).astype(int)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    fy = (yy - y0)[:, None]
    fx = (xx - x0)[None, :]
    top = g[y0][:, x0] * (1 - fx) + g[y0][:, x1] * fx
    bot = g[y1][:, x0] * (1 - fx) + g[y1][:, x1] * fx
    return top * (1 - fy) + bot * fy


def bilinear_sample(grid, coords: np.ndarray):
    """Values of a (h, w, ...) grid at fractional (row, col) coords, (n, 2).

    Differentiable in the grid: corner gathers go through the tape, corner
    weights are plain constants derived from the coordinates.
    """
    gv = ad.value(grid)
    h, w = gv.shape[:2]
    tail = gv.shape[2:]
    c = np.asarray(coords, dtype=np.float64)
    yy = np.clip(c[:, 0], 0, h - 1)
    xx = np.clip(c[:, 1], 0, w - 1)
    y0 = np.floor(yy).astype(int)
    x0 = np.floor(xx).astype(int)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    fy = yy - y0
    fx = xx - x0
    flat = ad.reshape(grid, (h * w,) + tail)
    wshape = (-1,) + (1,) * len(tail)

    def corner(yi, xi, wt):
        return ad.take(flat, yi * w + xi) * wt.reshape(wshape)

    return (corner(y0, x0, (1 - fy) * (1 - fx)) + corner(y0, x1, (1 - fy) * fx)
            + corner(y1, x0, fy * (1 - fx)) + corner(y1, x1, fy * fx))


def scale_coords(coords: np.ndarray, src_hw: tuple[int, int], dst_hw: tuple[int, int]) -> np.ndarray:
    """Map (row, col) coords between grid resolutions, pixel-center convention."""
    c = np.asarray(coords, dtype=np.float64)
    sy = dst_hw[0] / src_hw[0]
    sx = dst_hw[1] / src_hw[1]
    out = np.empty_like(c)
    out[:, 0] = (c[:, 0] + 0.5) * sy - 0.5
    out[:, 1] = (c[:, 1] + 0.5) * sx - 0.5
    return out


# ---------------------------------------------------------------------------
# localization


def object_mask(maps: CrossAttnMaps, threshold_quantile: float,
                working_hw: int | None = None) -> ObjectMask:
    """Threshold the layer-averaged concept map at a rank quantile.

    The top ceil((1 - q) * N) locations are selected, ties resolved in
    row-major order.  A constant map cannot be thresholded; the fallback is
    an all-ones mask with the degenerate flag set.
    """
    if not maps.per_layer:
        raise InvalidArgument("no concept maps to localize from")
    if not (0.0 < threshold_quantile < 1.0):
        raise InvalidArgument("threshold_quantile must lie in (0, 1)")
    hw = working_hw
    if hw is None:
        hw = max(g.shape[0] for g in maps.per_layer.values())
    acc = np.zeros((hw, hw))
    for g in maps.per_layer.values():
        acc += g if g.shape == (hw, hw) else bilinear_resize(g, hw, hw)
    acc /= len(maps.per_layer)

    if float(acc.max() - acc.min()) < 1e-12:
        return ObjectMask(np.ones((hw, hw), dtype=bool), degenerate=True)
    n = hw * hw
    k = int(np.ceil((1.0 - threshold_quantile) * n))
    order = np.argsort(-acc.reshape(-1), kind="stable")
    mask = np.zeros(n, dtype=bool)
    mask[order[:k]] = True
    return ObjectMask(mask.reshape(hw, hw), degenerate=False)
