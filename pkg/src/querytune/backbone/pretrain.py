"""Training loops for the backbone: conv codec first, then the denoiser.

Both loops use Adam on float64 parameters and log a loss curve.  The
denoiser trains on the standard noise-prediction objective: draw an image
and caption, noise its latent to a uniform random timestep, regress the
injected noise.  Captions are the manifest templates with the concept slot
filled by ground-truth attribute words, padded to a common length with the
null token.
"""

from __future__ import annotations

import dataclasses
import time

import numpy as np

from .. import autodiff as ad
from ..corpus import Corpus, describe, fill_caption
from ..errors import InvalidArgument, NumericalFailure
from ..optim import Adam
from . import Model
from .denoiser import denoise
from .schedule import diffuse_with_abar
from .text import NULL_WORD
from .vae import reconstruction, _enc_forward


def _grads(params: dict, names: list[str], forward):
    """Run forward() with the named params wrapped for tracing; return (loss, grads)."""
    wrapped = {k: (ad.Var(v) if k in names else v) for k, v in params.items()}
    loss = forward(wrapped)
    ad.backward(loss)
    return float(ad.value(loss)), {k: wrapped[k].grad for k in names}


def encode_captions(corpus: Corpus, vocab, pad_to: int | None = None) -> np.ndarray:
    """All corpus captions as one (N, L) id array, end-padded with the null token."""
    prompts = [vocab.encode(corpus.caption(i)) for i in range(len(corpus.rows))]
    length = pad_to if pad_to is not None else max(len(p) for p in prompts)
    nid = vocab.id_of(NULL_WORD)
    ids = np.full((len(prompts), length), nid, dtype=np.int64)
    for i, p in enumerate(prompts):
        if len(p) > length:
            raise InvalidArgument(f"caption {i} longer than pad length {length}")
        ids[i, :len(p)] = p.token_ids
    return ids


def train_vae(model: Model, corpus: Corpus, steps: int = 400, batch_size: int = 16,
              lr: float = 2e-3, seed: int = 0, log=None) -> tuple[Model, list[float]]:
    """Train the conv codec on reconstruction MSE, then calibrate latent_scale."""
    cfg = model.config
    if cfg.vae != "conv":
        raise InvalidArgument("train_vae requires a conv codec configuration")
    images = np.stack([corpus.image(i) for i in range(len(corpus.rows))])
    rng = np.random.default_rng(seed)
    params = dict(model.params)
    names = [k for k in params if k.startswith("vae.")]
    opt = Adam(lr=lr)
    losses = []
    for step in range(steps):
        idx = rng.integers(0, len(images), size=batch_size)
        batch = images[idx]

        def forward(p):
            rec = reconstruction(p, batch, cfg)
            d = rec - batch
            return ad.mean(d * d)

        loss, grads = _grads(params, names, forward)
        if not np.isfinite(loss):
            raise NumericalFailure("codec training diverged", step=step)
        losses.append(loss)
        params = opt.step(params, grads)
        if log and (step % 50 == 0 or step == steps - 1):
            log(f"vae step {step} loss {loss:.5f}")

    # unit-scale latents for the diffusion stage
    z = _enc_forward(params, images)
    scale = 1.0 / max(float(np.std(z)), 1e-8)
    new_cfg = dataclasses.replace(cfg, latent_scale=round(scale, 6))
    return Model(new_cfg, params, model.schedule), losses


def train_denoiser(model: Model, corpus: Corpus, steps: int = 2000, batch_size: int = 16,
                   lr: float = 2e-3, seed: int = 0, log=None) -> tuple[Model, list[float]]:
    """Noise-prediction training over the corpus; returns (trained model, loss curve)."""
    if steps < 1:
        raise InvalidArgument("steps must be >= 1")
    cfg = model.config
    images = np.stack([corpus.image(i) for i in range(len(corpus.rows))])
    from .vae import encode as vae_encode
    latents = vae_encode(model.params, images, cfg)
    ids = encode_captions(corpus, model.vocab)

    rng = np.random.default_rng(seed)
    params = dict(model.params)
    names = [k for k in params if not k.startswith("vae.")]
    opt = Adam(lr=lr)
    losses = []
    t_start = time.perf_counter()
    for step in range(steps):
        idx = rng.integers(0, len(latents), size=batch_size)
        t = rng.integers(0, cfg.num_train_steps, size=batch_size)
        eps = rng.standard_normal(latents[idx].shape)
        abar = model.schedule.alpha_bars[t][:, None, None, None]
        zt = diffuse_with_abar(latents[idx], eps, abar)
        tok = ids[idx]

        def forward(p):
            pred = denoise(p, zt, t, tok, cfg)
            d = pred - eps
            return ad.mean(d * d)

        loss, grads = _grads(params, names, forward)
        if not np.isfinite(loss):
            raise NumericalFailure("denoiser training diverged", step=step)
        losses.append(loss)
        params = opt.step(params, grads)
        if log and (step % 100 == 0 or step == steps - 1):
            rate = (step + 1) / (time.perf_counter() - t_start)
            log(f"denoiser step {step} loss {loss:.5f} ({rate:.1f} steps/s)")
    return Model(cfg, params, model.schedule), losses
