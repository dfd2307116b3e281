"""Model configuration shared by the denoiser, autoencoder, and checkpoints."""

from __future__ import annotations

from dataclasses import dataclass, field, asdict

from ..errors import InvalidArgument
from .text import default_vocab


@dataclass(frozen=True)
class ModelConfig:
    """Static description of the desk-scale backbone.

    Two autoencoder flavours exist: ``identity`` treats images as latents
    directly (image and latent geometry must agree), ``conv`` downsamples
    images 4x into the latent grid through a trained encoder/decoder pair.
    """

    latent_hw: int = 16
    latent_channels: int = 4
    image_hw: int = 64
    image_channels: int = 3
    width_full: int = 24
    width_half: int = 48
    heads: int = 2
    text_dim: int = 16
    time_dim: int = 32
    max_tokens: int = 16
    gn_groups: int = 8
    vae: str = "conv"
    vae_width: int = 16
    latent_scale: float = 1.0
    num_train_steps: int = 1000
    beta_start: float = 1e-4
    beta_end: float = 0.02
    vocab: tuple[str, ...] = field(default_factory=default_vocab)

    def __post_init__(self):
        if self.vae not in ("identity", "conv"):
            raise InvalidArgument(f"unknown vae kind {self.vae!r}")
        if self.vae == "identity":
            if self.image_hw != self.latent_hw or self.image_channels != self.latent_channels:
                raise InvalidArgument("identity vae requires image and latent geometry to match")
        elif self.image_hw != 4 * self.latent_hw:
            raise InvalidArgument("conv vae downsamples 4x: image_hw must be 4 * latent_hw")
        if self.latent_hw % 2 != 0:
            raise InvalidArgument("latent_hw must be even (two-resolution denoiser)")
        for w in (self.width_full, self.width_half):
            if w % self.gn_groups or w % self.heads:
                raise InvalidArgument("widths must be divisible by gn_groups and heads")

    # instrumented attention layers, shallow to deep
    @property
    def sa_layer_ids(self) -> tuple[str, ...]:
        return ("sa0", "sa1")

    @property
    def ca_layer_ids(self) -> tuple[str, ...]:
        return ("ca0", "ca1")

    @property
    def deepest_sa_layer(self) -> str:
        return "sa1"

    def layer_hw(self, layer_id: str) -> int:
        if layer_id in ("sa0", "ca0"):
            return self.latent_hw
        if layer_id in ("sa1", "ca1"):
            return self.latent_hw // 2
        raise InvalidArgument(f"unknown layer id {layer_id!r}")

    def layer_width(self, layer_id: str) -> int:
        return self.width_full if layer_id in ("sa0", "ca0") else self.width_half

    def projection_shapes(self) -> dict[str, tuple[int, int]]:
        """d_in x d_out of every attention projection, keyed by parameter name."""
        shapes = {}
        for lid in self.sa_layer_ids + self.ca_layer_ids:
            c = self.layer_width(lid)
            d_in_kv = self.text_dim if lid.startswith("ca") else c
            shapes[f"{lid}.q"] = (c, c)
            shapes[f"{lid}.k"] = (d_in_kv, c)
            shapes[f"{lid}.v"] = (d_in_kv, c)
            shapes[f"{lid}.o"] = (c, c)
        return shapes

    def to_dict(self) -> dict:
        d = asdict(self)
        d["vocab"] = list(self.vocab)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        d["vocab"] = tuple(d["vocab"])
        return cls(**d)
