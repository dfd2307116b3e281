"""Personalization parameter sets and the base (first-stage) trainer.

An adapter set is the only thing that varies between a base model and a
personalized one.  Two tunable families, composable:

* ``token_embedding``: one replacement row for the concept token in the
  text embedding table.
* ``low_rank``: additive deltas A @ B on named attention projections.

Adapter values are immutable; every update produces a new set.  The
``materialize`` method builds the effective parameter dict for one model
call without mutating the base weights.  When adapter fields are wrapped
for tracing (see ``traced``), materialization stays on the tape, which is
how gradients reach exactly the tunable parameters and nothing else.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from . import autodiff as ad
from .backbone import CONCEPT_WORD, Model, Prompt
from .backbone.checkpoint import load_tensors, save_tensors
from .backbone.config import ModelConfig
from .backbone.denoiser import denoise
from .backbone.schedule import diffuse_with_abar
from .errors import InvalidArgument, NumericalFailure

KINDS = ("token_embedding", "low_rank", "composite")


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 0.5
    steps: int = 200
    batch_size: int = 1
    seed: int = 0

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise InvalidArgument("learning_rate must be positive")
        if self.steps < 1:
            raise InvalidArgument("steps must be >= 1")
        if self.batch_size < 1:
            raise InvalidArgument("batch_size must be >= 1")


@dataclass(frozen=True)
class AdapterParams:
    """One immutable set of personalization parameters theta."""

    kind: str
    concept_token_id: int
    token_vec: np.ndarray | None = None
    low_rank: dict | None = None  # projection name -> (A: d_in x r, B: r x d_out)
    rank: int = 0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise InvalidArgument(f"unknown adapter kind {self.kind!r}")
        has_tok = self.token_vec is not None
        has_lr = bool(self.low_rank)
        if not (has_tok or has_lr):
            raise InvalidArgument("adapter set has no tunable parameters")
        if self.kind == "token_embedding" and (has_lr or not has_tok):
            raise InvalidArgument("token_embedding kind carries exactly a token vector")
        if self.kind == "low_rank" and (has_tok or not has_lr):
            raise InvalidArgument("low_rank kind carries exactly factor pairs")
        if self.kind == "composite" and not (has_tok and has_lr):
            raise InvalidArgument("composite kind needs both tunable sets")
        if has_lr and self.rank < 1:
            raise InvalidArgument("rank must be >= 1")

    def param_count(self) -> int:
        n = 0 if self.token_vec is None else int(np.size(ad.value(self.token_vec)))
        for a, b in (self.low_rank or {}).values():
            n += int(np.size(ad.value(a))) + int(np.size(ad.value(b)))
        return n

    def named_parameters(self) -> dict:
        """Flat name -> array view of every tunable parameter."""
        out = {}
        if self.token_vec is not None:
            out["token_vec"] = self.token_vec
        for name, (a, b) in (self.low_rank or {}).items():
            out[f"low_rank.{name}.A"] = a
            out[f"low_rank.{name}.B"] = b
        return out

    def with_parameters(self, flat: dict) -> "AdapterParams":
        """Counterpart of named_parameters: rebuild with the given arrays."""
        tok = flat.get("token_vec", self.token_vec)
        lr = None
        if self.low_rank:
            lr = {name: (flat.get(f"low_rank.{name}.A", ab[0]),
                         flat.get(f"low_rank.{name}.B", ab[1]))
                  for name, ab in self.low_rank.items()}
        return replace(self, token_vec=tok, low_rank=lr)

    def validate_shapes(self, config: ModelConfig):
        if self.token_vec is not None and ad.value(self.token_vec).shape != (config.text_dim,):
            raise InvalidArgument(f"token vector must have shape ({config.text_dim},)")
        shapes = config.projection_shapes()
        for name, (a, b) in (self.low_rank or {}).items():
            if name not in shapes:
                raise InvalidArgument(f"unknown projection name {name!r}")
            d_in, d_out = shapes[name]
            av, bv = ad.value(a), ad.value(b)
            if av.shape != (d_in, self.rank) or bv.shape != (self.rank, d_out):
                raise InvalidArgument(
                    f"factors for {name!r} must be ({d_in}, {self.rank}) and "
                    f"({self.rank}, {d_out}), got {av.shape} and {bv.shape}")

    def materialize(self, base_params: dict, config: ModelConfig) -> dict:
        """Effective weights for one call; base weights are never touched."""
        self.validate_shapes(config)
        eff = dict(base_params)
        if self.token_vec is not None:
            eff["text.embed"] = ad.put_row(base_params["text.embed"],
                                           self.concept_token_id, self.token_vec)
        for name, (a, b) in (self.low_rank or {}).items():
            eff[name] = base_params[name] + ad.matmul(a, b)
        return eff

    # ---- persistence (shared checkpoint container) ----

    def save(self, path) -> None:
        tensors = {k: ad.value(v) for k, v in self.named_parameters().items()}
        meta = {"kind": self.kind, "adapter": True, "rank": self.rank,
                "concept_token_id": self.concept_token_id}
        save_tensors(path, tensors, meta)

    @classmethod
    def load(cls, path) -> "AdapterParams":
        tensors, meta = load_tensors(path)
        if not meta.get("adapter"):
            raise InvalidArgument(f"{path} is not an adapter checkpoint")
        tok = tensors.get("token_vec")
        lr: dict = {}
        for name in tensors:
            if name.startswith("low_rank.") and name.endswith(".A"):
                proj = name[len("low_rank."):-2]
                lr[proj] = (tensors[name], tensors[f"low_rank.{proj}.B"])
        return cls(kind=meta["kind"], concept_token_id=int(meta["concept_token_id"]),
                   token_vec=tok, low_rank=lr or None, rank=int(meta["rank"]))


def apply(adapters: AdapterParams, base_weights: dict, config: ModelConfig) -> dict:
    """Module-level alias for AdapterParams.materialize."""
    return adapters.materialize(base_weights, config)


def traced(adapters: AdapterParams) -> tuple[AdapterParams, dict]:
    """Wrap every tunable parameter for tracing.

    Returns (adapter set whose fields are taped, flat name -> tape handle).
    After a backward pass each handle's ``grad`` holds the gradient.
    """
    handles = {k: ad.Var(ad.value(v)) for k, v in adapters.named_parameters().items()}
    return adapters.with_parameters(handles), handles


def gradient_step(adapters: AdapterParams, grads: dict, lr: float) -> AdapterParams:
    """Plain SGD: theta <- theta - lr * grad.  Pure; inputs unchanged."""
    if lr < 0:
        raise InvalidArgument("learning rate must be nonnegative")
    if lr == 0:
        return adapters
    current = adapters.named_parameters()
    new = {}
    for name, p in current.items():
        g = grads.get(name)
        if g is None:
            new[name] = p
            continue
        g = np.asarray(ad.value(g), dtype=np.float64)
        pv = ad.value(p)
        if g.shape != pv.shape:
            raise InvalidArgument(f"gradient shape {g.shape} does not match "
                                  f"{name!r} shape {pv.shape}")
        if not np.all(np.isfinite(g)):
            raise NumericalFailure(f"non-finite gradient for {name!r}")
        new[name] = pv - lr * g
    return adapters.with_parameters(new)


def init_adapters(model: Model, kind: str, class_word: str | None = None,
                  rank: int = 4, seed: int = 0, factor_scale: float = 0.0) -> AdapterParams:
    """Fresh adapter set against a loaded model.

    The concept row starts at the class word's embedding plus a small
    deterministic perturbation; absent a class word, at the perturbation
    alone.  Low-rank factors start with random A and zero B so the initial
    delta vanishes; factor_scale > 0 makes B random too (useful when a
    nonzero initial delta is wanted, e.g. for gradient probes).
    """
    rng = np.random.default_rng(seed)
    cid = model.vocab.id_of(CONCEPT_WORD)
    tok = None
    if kind in ("token_embedding", "composite"):
        base = np.zeros(model.config.text_dim)
        if class_word is not None:
            base = model.params["text.embed"][model.vocab.id_of(class_word)].copy()
        tok = base + 0.02 * rng.standard_normal(model.config.text_dim)
    lr = None
    if kind in ("low_rank", "composite"):
        lr = {}
        for name, (d_in, d_out) in model.config.projection_shapes().items():
            a = rng.normal(0.0, 1.0 / np.sqrt(d_in), size=(d_in, rank))
            b = (rng.normal(0.0, factor_scale, size=(rank, d_out)) if factor_scale > 0
                 else np.zeros((rank, d_out)))
            lr[name] = (a, b)
    out = AdapterParams(kind=kind, concept_token_id=cid, token_vec=tok,
                        low_rank=lr, rank=rank if lr else 0)
    out.validate_shapes(model.config)
    return out


def personalize_base(model: Model, images: list, reference_prompt: Prompt,
                     kind: str = "composite", config: TrainConfig = TrainConfig(),
                     class_word: str | None = None, rank: int = 4,
                     on_step=None) -> tuple[AdapterParams, list[float]]:
    """First-stage personalization: fit adapters to reference images.

    Minimizes the standard noise-prediction objective over the reference
    set with plain SGD, touching only the adapter parameters.  Returns the
    fitted adapters and the per-step loss curve.
    """
    if len(images) < 1:
        raise InvalidArgument("need at least one reference image")
    if reference_prompt.concept_index is None:
        raise InvalidArgument("reference prompt must contain the concept token")
    model.vocab.validate(reference_prompt)

    cfg = model.config
    latents = np.stack([model.encode(img).data for img in images])
    ids = np.asarray(reference_prompt.token_ids, dtype=np.int64)
    rng = np.random.default_rng(config.seed)
    adapters = init_adapters(model, kind, class_word=class_word, rank=rank,
                             seed=config.seed)
    losses = []
    for step in range(config.steps):
        idx = rng.integers(0, len(latents), size=config.batch_size)
        t = rng.integers(0, cfg.num_train_steps, size=config.batch_size)
        eps = rng.standard_normal(latents[idx].shape)
        abar = model.schedule.alpha_bars[t][:, None, None, None]
        zt = diffuse_with_abar(latents[idx], eps, abar)
        tok = np.repeat(ids[None, :], config.batch_size, axis=0)

        live, handles = traced(adapters)
        eff = live.materialize(model.params, cfg)
        pred = denoise(eff, zt, t, tok, cfg)
        d = pred - eps
        loss = ad.mean(d * d)
        lv = float(ad.value(loss))
        if not np.isfinite(lv):
            raise NumericalFailure("personalization diverged", step=step)
        ad.backward(loss)
        grads = {k: h.grad for k, h in handles.items()}
        adapters = gradient_step(adapters, grads, config.learning_rate)
        losses.append(lv)
        if on_step is not None:
            on_step(step, lv, adapters)
    return adapters, losses
