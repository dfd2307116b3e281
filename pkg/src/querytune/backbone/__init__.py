"""Desk-scale latent diffusion backbone.

`Model` bundles the pieces (schedule, text vocabulary, denoiser, codec) behind
the operations the rest of the package builds on: forward diffusion, noise
prediction with optional attention capture, deterministic sampling, trajectory
inversion, and image/latent codecs.  The model is immutable after load; any
parameter variation enters through an ``adapters`` argument, an object with a
``materialize(base_params, config) -> params`` method that produces the
effective parameter dict for one call.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..errors import InvalidArgument, NumericalFailure
from . import checkpoint as _ckpt
from . import denoiser as _den
from . import sampler as _samp
from . import vae as _vae
from .config import ModelConfig
from .denoiser import AttentionRecord
from .schedule import NoiseSchedule, diffuse_with_abar
from .text import CONCEPT_WORD, NULL_WORD, Prompt, Vocabulary

PIXEL = "pixel"
LATENT = "latent"


@dataclass(frozen=True)
class Latent:
    """A real grid (H, W, C) tagged with the space it lives in."""

    data: np.ndarray
    space: str = LATENT

    def __post_init__(self):
        arr = np.asarray(self.data, dtype=np.float64)
        if not np.all(np.isfinite(arr)):
            raise InvalidArgument("latent entries must be finite")
        if self.space not in (PIXEL, LATENT):
            raise InvalidArgument(f"unknown space tag {self.space!r}")
        object.__setattr__(self, "data", arr)


@dataclass(frozen=True)
class DenoiserOutput:
    eps_pred: np.ndarray
    captured: AttentionRecord | None = None


@dataclass(frozen=True)
class SamplerConfig:
    num_inference_steps: int = 20
    seed: int = 0
    guidance_scale: float = 1.0

    def __post_init__(self):
        if self.num_inference_steps < 1:
            raise InvalidArgument("num_inference_steps must be >= 1")
        if self.guidance_scale < 0:
            raise InvalidArgument("guidance_scale must be nonnegative")


def forward_diffuse(x0, t: int, eps, schedule: NoiseSchedule):
    """Noising map sqrt(abar_t) x0 + sqrt(1 - abar_t) eps; accepts Latent or array."""
    wrap = isinstance(x0, Latent)
    a = x0.data if wrap else np.asarray(x0, dtype=np.float64)
    e = eps.data if isinstance(eps, Latent) else np.asarray(eps, dtype=np.float64)
    if a.shape != e.shape:
        raise InvalidArgument(f"x0 and eps shapes differ: {a.shape} vs {e.shape}")
    schedule.check_t(t)
    out = diffuse_with_abar(a, e, schedule.alpha_bars[t])
    return Latent(out, x0.space) if wrap else out


def _latent_array(z, config: ModelConfig) -> np.ndarray:
    if isinstance(z, Latent):
        if z.space != LATENT:
            raise InvalidArgument("expected a latent-space grid, got a pixel-space one")
        z = z.data
    arr = np.asarray(z, dtype=np.float64)
    want = (config.latent_hw, config.latent_hw, config.latent_channels)
    if arr.shape != want:
        raise InvalidArgument(f"latent must have shape {want}, got {arr.shape}")
    return arr


class Model:
    """Loaded backbone: immutable parameters plus pure operations."""

    def __init__(self, config: ModelConfig, params: dict[str, np.ndarray],
                 schedule: NoiseSchedule | None = None):
        self.config = config
        self.params = params
        self.schedule = schedule if schedule is not None else NoiseSchedule.linear(
            config.num_train_steps, config.beta_start, config.beta_end)
        self.vocab = Vocabulary(config.vocab)

    # ---- construction and persistence ----

    @classmethod
    def init(cls, config: ModelConfig, seed: int = 0) -> "Model":
        rng = np.random.default_rng(seed)
        params = _den.init_params(config, rng)
        params.update(_vae.init_vae_params(config, rng))
        return cls(config, params)

    def save(self, path) -> None:
        meta = {
            "kind": "backbone",
            "config": self.config.to_dict(),
            "schedule": {"num_train_steps": self.schedule.num_train_steps,
                         "beta_start": self.config.beta_start,
                         "beta_end": self.config.beta_end},
        }
        _ckpt.save_tensors(path, self.params, meta)

    @classmethod
    def load(cls, path) -> "Model":
        params, meta = _ckpt.load_tensors(path)
        config = ModelConfig.from_dict(meta["config"])
        return cls(config, params)

    # ---- prompts ----

    def encode_prompt(self, text: str) -> Prompt:
        return self.vocab.encode(text)

    def null_prompt(self, length: int) -> Prompt:
        nid = self.vocab.id_of(NULL_WORD)
        return Prompt(token_ids=(nid,) * length, concept_index=None)

    # ---- core ops ----

    def _effective_params(self, adapters):
        if adapters is None:
            return self.params
        return adapters.materialize(self.params, self.config)

    def _eps_fn(self, prompt: Prompt, adapters, guidance_scale: float = 1.0):
        params = self._effective_params(adapters)
        ids = np.asarray(prompt.token_ids, dtype=np.int64)[None, :]

        def cond(z, t):
            reps = np.repeat(ids, z.shape[0], axis=0)
            return _den.denoise(params, z, t, reps, self.config)

        if guidance_scale == 1.0:
            return cond
        nids = np.asarray(self.null_prompt(len(prompt.token_ids)).token_ids,
                          dtype=np.int64)[None, :]

        def null(z, t):
            reps = np.repeat(nids, z.shape[0], axis=0)
            return _den.denoise(params, z, t, reps, self.config)

        return _samp.guided(cond, null, guidance_scale)

    def predict_noise(self, z, t: int, prompt: Prompt, adapters=None,
                      capture: bool = False) -> DenoiserOutput:
        """One denoiser evaluation on a single latent.

        With capture=True the returned bundle holds, per instrumented layer,
        the self-attention block outputs (h, w, c) and cross-attention weight
        tensors (heads, h*w, n_tokens), batch dimension squeezed away.
        """
        arr = _latent_array(z, self.config)
        self.schedule.check_t(t)
        self.vocab.validate(prompt)
        params = self._effective_params(adapters)
        ids = np.asarray(prompt.token_ids, dtype=np.int64)[None, :]
        rec = AttentionRecord({}, {}) if capture else None
        eps = _den.denoise(params, arr[None], np.array([t]), ids, self.config, capture=rec)
        if rec is not None:
            rec = AttentionRecord({k: v[0] for k, v in rec.sa_out.items()},
                                  {k: v[0] for k, v in rec.ca_weights.items()})
        return DenoiserOutput(eps_pred=eps[0], captured=rec)

    def sample(self, prompt: Prompt, config: SamplerConfig, adapters=None) -> Latent:
        """Deterministic generation from seeded Gaussian noise."""
        self.vocab.validate(prompt)
        c = self.config
        rng = np.random.default_rng(config.seed)
        seed_noise = rng.standard_normal((1, c.latent_hw, c.latent_hw, c.latent_channels))
        eps_fn = self._eps_fn(prompt, adapters, config.guidance_scale)
        z = _samp.sample(eps_fn, self.schedule, config.num_inference_steps, seed_noise)
        if not np.all(np.isfinite(z)):
            raise NumericalFailure("sampling produced non-finite values")
        return Latent(z[0], LATENT)

    def invert(self, z0, prompt: Prompt, adapters=None, num_steps: int = 20) -> list[Latent]:
        """Deterministic trajectory [z_0 ... z_T], length num_steps + 1."""
        if num_steps < 1:
            raise InvalidArgument("num_steps must be >= 1")
        self.vocab.validate(prompt)
        arr = _latent_array(z0, self.config)
        ts = _samp.timestep_grid(self.schedule, num_steps)
        if len(ts) != num_steps:
            raise InvalidArgument("num_steps too dense for the training horizon")
        eps_fn = self._eps_fn(prompt, adapters, 1.0)
        _, traj = _samp.invert(eps_fn, self.schedule, num_steps, arr[None])
        out = [Latent(arr, LATENT)]
        for step, (t, z) in enumerate(traj):
            if not np.all(np.isfinite(z)):
                raise NumericalFailure("inversion produced non-finite values", step=step)
            out.append(Latent(z[0], LATENT))
        return out

    def inversion_timesteps(self, num_steps: int) -> list[int]:
        """The increasing timestep of each trajectory entry after z_0."""
        return [int(t) for t in _samp.timestep_grid(self.schedule, num_steps)[::-1]]

    # ---- codec ----

    def encode(self, image: np.ndarray) -> Latent:
        img = np.asarray(image, dtype=np.float64)
        z = _vae.encode(self.params, img[None], self.config)
        return Latent(z[0], LATENT)

    def decode(self, z) -> np.ndarray:
        arr = _latent_array(z, self.config)
        return _vae.decode(self.params, arr[None], self.config)[0]


__all__ = [
    "AttentionRecord", "CONCEPT_WORD", "DenoiserOutput", "Latent", "LATENT",
    "Model", "ModelConfig", "NULL_WORD", "NoiseSchedule", "PIXEL", "Prompt",
    "SamplerConfig", "Vocabulary", "forward_diffuse",
]
