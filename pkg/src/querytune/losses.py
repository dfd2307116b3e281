"""The three refinement losses and their weighted combination.

Appearance loss: squared L2 distance between reference and generated
self-attention descriptors at matched locations.  Concept-map loss: the
same over scalar concept-attention values.  Denoising loss: the standard
noise-prediction objective on the reference latent at a seeded (t, eps)
draw.  Reduction everywhere is the mean over matched pairs and over
layers, with the squared L2 over the descriptor dimension summed, so the
weighting defaults are resolution-independent; the report records these
conventions.

The reference side of each loss is a constant; only the generated-side
extraction pass and the denoising prediction carry gradients, which is
what confines the update to adapter parameters.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .backbone import Model, Prompt
from .backbone.schedule import diffuse_with_abar
from .errors import EmptyMatchError, InvalidArgument, NumericalFailure
from .features import AppearanceFeatures, CrossAttnMaps, bilinear_sample, scale_coords
from .matching import MatchSet

DEFAULT_LAMBDAS = (1.0, 1.0, 1.0)  # appearance, concept-map, denoising

REDUCTION_NOTES = {
    "pair_norm": "squared L2, summed over descriptor dim",
    "reduction": "mean over pairs, then mean over layers",
    "ldm_sampling": "fresh (t, eps) per update step from the run seed",
}


@dataclass(frozen=True)
class LossReport:
    l_sa: float
    l_ca: float
    l_ldm: float
    lambdas: tuple[float, float, float]
    combined: float
    metadata: dict = field(default_factory=dict)

    def to_json_dict(self) -> dict:
        return {"l_sa": self.l_sa, "l_ca": self.l_ca, "l_ldm": self.l_ldm,
                "lambdas": list(self.lambdas), "combined": self.combined,
                "metadata": dict(self.metadata)}


def _matched_values(grid, coords: np.ndarray, resolution: tuple[int, int]):
    """Grid values at match coordinates, rescaled to the grid's resolution."""
    gh, gw = ad.value(grid).shape[:2]
    if (gh, gw) != tuple(resolution):
        coords = scale_coords(coords, tuple(resolution), (gh, gw))
    return bilinear_sample(grid, coords)


def loss_sa(f_ref: AppearanceFeatures, f_gen: AppearanceFeatures, matches: MatchSet):
    """Mean over pairs and layers of squared descriptor distance at matches."""
    if set(f_ref.per_layer) != set(f_gen.per_layer):
        raise InvalidArgument("reference and generated feature layer sets differ")
    if not f_ref.per_layer:
        raise InvalidArgument("no feature layers to compare")
    if len(matches) == 0:
        raise EmptyMatchError("no matched pairs for the appearance loss")
    rc, gc = matches.ref_coords(), matches.gen_coords()
    total = None
    for lid in sorted(f_ref.per_layer):
        ref_vals = np.asarray(ad.value(_matched_values(f_ref.per_layer[lid], rc,
                                                       matches.resolution)))
        gen_vals = _matched_values(f_gen.per_layer[lid], gc, matches.resolution)
        d = gen_vals - ref_vals
        per_layer = ad.mean(ad.sum_(d * d, axis=1))
        total = per_layer if total is None else total + per_layer
    return total * (1.0 / len(f_ref.per_layer))


def loss_ca(m_ref: CrossAttnMaps, m_gen: CrossAttnMaps, matches: MatchSet):
    """Mean over pairs and layers of squared concept-attention difference."""
    if set(m_ref.per_layer) != set(m_gen.per_layer):
        raise InvalidArgument("reference and generated map layer sets differ")
    if not m_ref.per_layer:
        raise InvalidArgument("no concept-map layers to compare")
    if len(matches) == 0:
        raise EmptyMatchError("no matched pairs for the concept-map loss")
    rc, gc = matches.ref_coords(), matches.gen_coords()
    total = None
    for lid in sorted(m_ref.per_layer):
        ref_vals = np.asarray(ad.value(_matched_values(m_ref.per_layer[lid], rc,
                                                       matches.resolution)))
        gen_vals = _matched_values(m_gen.per_layer[lid], gc, matches.resolution)
        d = gen_vals - ref_vals
        per_layer = ad.mean(d * d)
        total = per_layer if total is None else total + per_layer
    return total * (1.0 / len(m_ref.per_layer))


def draw_ldm_batch(schedule, shape: tuple, rng_seed: int):
    """The seeded (t, eps) draw for the denoising loss; one (t, eps) pair."""
    rng = np.random.default_rng(rng_seed)
    t = int(rng.integers(0, schedule.num_train_steps))
    eps = rng.standard_normal(shape)
    return t, eps


def loss_ldm(model: Model, x_ref: np.ndarray, prompt: Prompt, adapters=None,
             rng_seed: int = 0, eps_fn=None):
    """Noise-prediction error on the reference latent at a seeded draw.

    eps_fn substitutes the denoiser (z_t, t, prompt, adapters) -> prediction;
    tests use it to force closed-form outcomes.
    """
    z0 = model.encode(x_ref).data
    t, eps = draw_ldm_batch(model.schedule, z0.shape, rng_seed)
    zt = diffuse_with_abar(z0, eps, model.schedule.alpha_bars[t])
    if eps_fn is not None:
        pred = eps_fn(zt, t, prompt, adapters)
    else:
        from .backbone.denoiser import denoise
        params = model.params if adapters is None else adapters.materialize(
            model.params, model.config)
        ids = np.asarray(prompt.token_ids, dtype=np.int64)[None, :]
        pred = ad.reshape(denoise(params, zt[None], np.array([t]), ids, model.config),
                          zt.shape)
    d = pred - eps
    return ad.mean(d * d)


def combine(l_sa, l_ca, l_ldm, lambdas: tuple[float, float, float] = DEFAULT_LAMBDAS,
            metadata: dict | None = None) -> LossReport:
    """Weighted sum with the exact arithmetic recorded in the report."""
    vals = (float(ad.value(l_sa)), float(ad.value(l_ca)), float(ad.value(l_ldm)))
    if not all(np.isfinite(v) for v in vals):
        raise NumericalFailure(f"non-finite loss components {vals}")
    la, lb, lc = (float(x) for x in lambdas)
    combined = la * vals[0] + lb * vals[1] + lc * vals[2]
    md = dict(REDUCTION_NOTES)
    if metadata:
        md.update(metadata)
    return LossReport(l_sa=vals[0], l_ca=vals[1], l_ldm=vals[2],
                      lambdas=(la, lb, lc), combined=combined, metadata=md)


def combined_objective(l_sa, l_ca, l_ldm, lambdas=DEFAULT_LAMBDAS):
    """The same weighted sum kept on the tape, for the backward pass."""
    la, lb, lc = (float(x) for x in lambdas)
    return l_sa * la + l_ca * lb + l_ldm * lc
