"""Per-query refinement: one seeded generation, compared against the
reference through matched features, driving a gradient update of the
adapter parameters only.

The sequence for a query (prompt, seed):

  (A) extract reference appearance features and concept maps;
  (B) generate with the current adapters and extract the same material
      from the generated latent;
  (C) localize the reference object and match reference locations to
      generated locations by descriptor similarity;
  (D) appearance, concept-map, and denoising losses, combined and
      differentiated with respect to the adapters; plain SGD update(s).

Correspondences are frozen across update steps; the generated-side
extraction pass is re-run under the current adapters each step, which is
what makes the objective differentiable.  The multi-step variant draws
the same material at several points along the denoising path (reference
side via trajectory inversion, generated side from its own sampling
trajectory) and averages the per-point losses.

Refinement output is a query-specific adapter snapshot; base weights and
base adapters are never folded into.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field, replace

import numpy as np

from . import autodiff as ad
from .adapters import AdapterParams, gradient_step, traced
from .backbone import Latent, Model, Prompt, SamplerConfig
from .backbone import sampler as _samp
from .errors import EmptyMaskError, InvalidArgument, NumericalFailure
from .features import (ExtractionConfig, extract, extract_traced, object_mask)
from .losses import (DEFAULT_LAMBDAS, LossReport, combine, combined_objective,
                     loss_ca, loss_ldm, loss_sa)
from .matching import MatchConfig, dift_descriptors, match

_CLEAN = -1  # marker for the clean end of the denoising path


@dataclass(frozen=True)
class RefineConfig:
    prompt: Prompt
    seed: int = 0
    learning_rate: float = 0.5
    num_updates: int = 1
    T_feature_steps: int = 1
    lambdas: tuple[float, float, float] = DEFAULT_LAMBDAS
    extraction: ExtractionConfig = ExtractionConfig()
    matching: MatchConfig = MatchConfig()
    mask_quantile: float = 0.6
    num_inference_steps: int = 8
    guidance_scale: float = 1.0

    def __post_init__(self):
        if self.prompt.concept_index is None:
            raise InvalidArgument("refinement prompt must contain the concept token")
        if self.learning_rate <= 0:
            raise InvalidArgument("learning_rate must be positive")
        if self.num_updates < 1:
            raise InvalidArgument("num_updates must be >= 1")
        if self.T_feature_steps < 1:
            raise InvalidArgument("T_feature_steps must be >= 1")
        if self.T_feature_steps > self.num_inference_steps:
            raise InvalidArgument("T_feature_steps cannot exceed num_inference_steps")
        if not (0.0 < self.mask_quantile < 1.0):
            raise InvalidArgument("mask_quantile must lie in (0, 1)")


@dataclass
class RefineResult:
    adapters_after: AdapterParams
    image_before: np.ndarray
    image_after: np.ndarray
    report: LossReport | None
    report_after: LossReport | None
    wall_time: float
    aborted: bool = False
    match_sets: list = field(default_factory=list)
    metadata: dict = field(default_factory=dict)


def _ldm_seed(base_seed: int, step: int) -> int:
    return int(np.random.SeedSequence([base_seed, step]).generate_state(1)[0])


def _feature_times(config: RefineConfig, model: Model) -> list[int]:
    """The denoising-path points used for extraction; _CLEAN plus grid times."""
    T = config.T_feature_steps
    if T == 1:
        return [_CLEAN]
    grid_up = model.inversion_timesteps(config.num_inference_steps)
    avail = [_CLEAN] + grid_up
    idx = np.round(np.linspace(0, len(avail) - 1, T)).astype(int)
    return [avail[i] for i in idx]


def _descriptor_grid(feats, model, z, prompt, adapters, config: RefineConfig, ec):
    """Reuse the extraction capture when it already covers the matcher's needs.

    A default descriptor_t follows the extraction timestep of the current
    path point, so per-point matches use per-point descriptors; an explicit
    descriptor_t forces its own capture pass.
    """
    mc = config.matching
    if mc.descriptor_t == _CLEAN:
        mc = replace(mc, descriptor_t=ec.t)
    layer = mc.descriptor_layer or model.config.deepest_sa_layer
    if mc.descriptor_t == ec.t and layer in feats.per_layer:
        return np.asarray(ad.value(feats.per_layer[layer]))
    return dift_descriptors(model, z, prompt, adapters, mc)


def _prepare_point(model, adapters, z_ref, ref_prompt, z_gen, gen_prompt,
                   config: RefineConfig, t_point: int):
    """Frozen per-point material: reference features/maps, mask, matches."""
    ec = config.extraction if t_point == _CLEAN else replace(config.extraction, t=t_point)
    f_ref, m_ref = extract(model, z_ref, ref_prompt, adapters, ec)
    mask = object_mask(m_ref, config.mask_quantile)
    f_gen, m_gen = extract(model, z_gen, gen_prompt, adapters, ec)
    desc_ref = _descriptor_grid(f_ref, model, z_ref, ref_prompt, adapters, config, ec)
    desc_gen = _descriptor_grid(f_gen, model, z_gen, gen_prompt, adapters, config, ec)
    matches = match(desc_ref, desc_gen, mask.mask, config.matching)
    return {"ec": ec, "f_ref": f_ref, "m_ref": m_ref, "mask": mask, "matches": matches}


def _point_losses(model, live, gen_prompt, points):
    """SA/CA losses averaged over the path points; taped when ``live`` is traced."""
    sa_total, ca_total = None, None
    for pt in points:
        f_gen, m_gen = extract_traced(model, pt["z_gen"], gen_prompt, live, pt["ec"])
        sa = loss_sa(pt["f_ref"], f_gen, pt["matches"])
        ca = loss_ca(pt["m_ref"], m_gen, pt["matches"])
        sa_total = sa if sa_total is None else sa_total + sa
        ca_total = ca if ca_total is None else ca_total + ca
    k = 1.0 / len(points)
    return sa_total * k, ca_total * k


def refine_query(model: Model, adapters: AdapterParams, x_ref: np.ndarray,
                 ref_prompt: Prompt, config: RefineConfig) -> RefineResult:
    """Single-point refinement (features from the clean ends of the path)."""
    return _refine(model, adapters, x_ref, ref_prompt, config, feature_times=[_CLEAN])


def refine_query_multiT(model: Model, adapters: AdapterParams, x_ref: np.ndarray,
                        ref_prompt: Prompt, config: RefineConfig) -> RefineResult:
    """Refinement with features drawn from T points along the denoising path."""
    return _refine(model, adapters, x_ref, ref_prompt, config,
                   feature_times=_feature_times(config, model))


def _refine(model, adapters, x_ref, ref_prompt, config, feature_times) -> RefineResult:
    t_start = time.perf_counter()
    if ref_prompt.concept_index is None:
        raise InvalidArgument("reference prompt must contain the concept token")
    model.vocab.validate(ref_prompt)

    sampler_cfg = SamplerConfig(num_inference_steps=config.num_inference_steps,
                                seed=config.seed,
                                guidance_scale=config.guidance_scale)

    # (B) seeded generation under the current adapters
    z_ref0 = model.encode(x_ref)
    eps_fn = model._eps_fn(config.prompt, adapters, config.guidance_scale)
    rng = np.random.default_rng(config.seed)
    c = model.config
    seed_noise = rng.standard_normal((1, c.latent_hw, c.latent_hw, c.latent_channels))
    z_gen_final, gen_traj = _samp.sample(eps_fn, model.schedule,
                                         config.num_inference_steps, seed_noise,
                                         return_trajectory=True)
    if not np.all(np.isfinite(z_gen_final)):
        raise NumericalFailure("generation produced non-finite values")
    image_before = model.decode(Latent(z_gen_final[0]))

    # states along both paths for every requested feature time
    ref_states = {_CLEAN: z_ref0}
    gen_states = {_CLEAN: Latent(z_gen_final[0])}
    noisy_times = [t for t in feature_times if t != _CLEAN]
    if noisy_times:
        traj = model.invert(z_ref0, ref_prompt, adapters,
                            num_steps=config.num_inference_steps)
        grid_up = model.inversion_timesteps(config.num_inference_steps)
        for t, state in zip(grid_up, traj[1:]):
            ref_states[t] = state
        gen_states[grid_up[-1]] = Latent(seed_noise[0])
        for t_to, z in gen_traj:
            if t_to != -1:
                gen_states[t_to] = Latent(z[0])

    # (A) + (C): frozen reference material and correspondences per point
    points = []
    mask_degenerate = False
    try:
        for t_point in feature_times:
            pt = _prepare_point(model, adapters, ref_states[t_point], ref_prompt,
                                gen_states[t_point], config.prompt, config, t_point)
            pt["z_gen"] = gen_states[t_point]
            mask_degenerate = mask_degenerate or pt["mask"].degenerate
            points.append(pt)
    except EmptyMaskError as e:
        return RefineResult(adapters_after=adapters, image_before=image_before,
                            image_after=image_before.copy(), report=None,
                            report_after=None,
                            wall_time=time.perf_counter() - t_start, aborted=True,
                            metadata={"abort_reason": str(e)})

    lam = config.lambdas
    metadata = {"feature_times": list(feature_times),
                "mask_degenerate": mask_degenerate,
                "num_matches": [len(p["matches"]) for p in points]}

    # (D) update loop; correspondences stay frozen
    report = None
    current = adapters
    updated = any(l != 0.0 for l in lam)
    for step in range(config.num_updates):
        live, handles = traced(current)
        sa, ca = _point_losses(model, live, config.prompt, points)
        ldm = loss_ldm(model, x_ref, ref_prompt, live, rng_seed=_ldm_seed(config.seed, step))
        if step == 0:
            report = combine(sa, ca, ldm, lam, metadata=metadata)
        total = combined_objective(sa, ca, ldm, lam)
        tv = float(ad.value(total))
        if not np.isfinite(tv):
            raise NumericalFailure("refinement loss non-finite", step=step)
        if not updated:
            break
        ad.backward(total)
        grads = {k: h.grad for k, h in handles.items()}
        current = gradient_step(current, grads, config.learning_rate)

    # after-update measurement on the identical frozen material
    report_after = None
    if updated:
        sa_a, ca_a = _point_losses(model, current, config.prompt, points)
        ldm_a = loss_ldm(model, x_ref, ref_prompt, current,
                         rng_seed=_ldm_seed(config.seed, 0))
        report_after = combine(sa_a, ca_a, ldm_a, lam, metadata=metadata)
        image_after = model.decode(model.sample(config.prompt, sampler_cfg, current))
    else:
        report_after = report
        image_after = image_before.copy()

    return RefineResult(adapters_after=current, image_before=image_before,
                        image_after=image_after, report=report,
                        report_after=report_after,
                        wall_time=time.perf_counter() - t_start,
                        aborted=False,
                        match_sets=[p["matches"] for p in points],
                        metadata=metadata)
