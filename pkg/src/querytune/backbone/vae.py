"""Image <-> latent codecs.

Two flavours, selected by ``ModelConfig.vae``:

* ``identity``: latents are the images themselves.  Zero parameters, exact
  round trip.  Meant for small fast configurations where the diffusion model
  works directly in pixel space.
* ``conv``: a small convolutional autoencoder mapping (64, 64, 3) images to
  (16, 16, C) latents and back.  Trained separately with plain MSE; after
  training, ``latent_scale`` is calibrated so encoded corpus latents have
  roughly unit standard deviation.

Both directions route through the autodiff dispatch layer so the conv
autoencoder can be trained with the same machinery as the denoiser.
"""

from __future__ import annotations

import numpy as np

from .. import autodiff as ad
from ..errors import InvalidArgument
from .config import ModelConfig


def init_vae_params(config: ModelConfig, rng: np.random.Generator) -> dict[str, np.ndarray]:
    if config.vae == "identity":
        return {}
    w, cl, ci = config.vae_width, config.latent_channels, config.image_channels
    p: dict[str, np.ndarray] = {}

    def conv(name, k, cin, cout):
        p[f"{name}.w"] = rng.normal(0.0, np.sqrt(2.0 / (k * k * cin)), size=(k, k, cin, cout))
        p[f"{name}.b"] = np.zeros(cout)

    conv("vae.enc0", 3, ci, w)
    conv("vae.enc1", 3, w, 2 * w)
    conv("vae.enc2", 3, 2 * w, cl)
    conv("vae.dec0", 3, cl, 2 * w)
    conv("vae.dec1", 3, 2 * w, w)
    conv("vae.dec2", 3, w, ci)
    return p


def _enc_forward(p, images):
    h = ad.silu(ad.conv2d(images, p["vae.enc0.w"], p["vae.enc0.b"], stride=2, pad=1))
    h = ad.silu(ad.conv2d(h, p["vae.enc1.w"], p["vae.enc1.b"], stride=2, pad=1))
    return ad.conv2d(h, p["vae.enc2.w"], p["vae.enc2.b"], stride=1, pad=1)


def _dec_forward(p, z):
    h = ad.silu(ad.conv2d(z, p["vae.dec0.w"], p["vae.dec0.b"], stride=1, pad=1))
    h = ad.silu(ad.conv2d(ad.upsample2x(h), p["vae.dec1.w"], p["vae.dec1.b"], stride=1, pad=1))
    return ad.conv2d(ad.upsample2x(h), p["vae.dec2.w"], p["vae.dec2.b"], stride=1, pad=1)


def _check_images(images, config: ModelConfig):
    v = ad.value(images)
    if v.ndim != 4 or v.shape[1:] != (config.image_hw, config.image_hw, config.image_channels):
        raise InvalidArgument(f"image batch must be (B, {config.image_hw}, {config.image_hw}, "
                              f"{config.image_channels}), got {v.shape}")


def encode(p, images, config: ModelConfig):
    """Image batch (B, H, W, 3) in [0, 1] -> latent batch (B, h, w, c)."""
    _check_images(images, config)
    if config.vae == "identity":
        return np.array(ad.value(images), dtype=np.float64)
    return _enc_forward(p, images) * config.latent_scale


def decode(p, z, config: ModelConfig):
    """Latent batch -> image batch clipped to [0, 1]."""
    v = ad.value(z)
    if v.ndim != 4 or v.shape[1:] != (config.latent_hw, config.latent_hw, config.latent_channels):
        raise InvalidArgument(f"latent batch must be (B, {config.latent_hw}, {config.latent_hw}, "
                              f"{config.latent_channels}), got {v.shape}")
    if config.vae == "identity":
        return np.clip(np.array(v, dtype=np.float64), 0.0, 1.0)
    out = ad.value(_dec_forward(p, v * (1.0 / config.latent_scale)))
    return np.clip(out, 0.0, 1.0)


def reconstruction(p, images, config: ModelConfig):
    """Differentiable encode -> decode without scale or clipping (training)."""
    _check_images(images, config)
    return _dec_forward(p, _enc_forward(p, images))
