"""Semantic correspondence between reference and generated latents.

Descriptors are self-attention activations captured at a chosen layer and
timestep.  Matching walks every selected reference location and picks the
generated location with the highest cosine similarity; ties resolve to the
smallest row-major index.  Correspondences are established on concrete
arrays only and are never differentiated through: they select where the
losses look, they are not themselves part of the objective.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .backbone import Model, Prompt
from .errors import EmptyMaskError, InvalidArgument
from .features import ExtractionConfig, extract

_T_LAST = -1


@dataclass(frozen=True)
class MatchConfig:
    n: int = 256
    descriptor_layer: str | None = None  # None = deepest self-attention layer
    descriptor_t: int = _T_LAST
    similarity: str = "cosine"
    sampling: str = "all_masked"
    sample_seed: int = 0
    cycle_consistent: bool = False

    def __post_init__(self):
        if self.n < 1:
            raise InvalidArgument("n must be >= 1")
        if self.similarity != "cosine":
            raise InvalidArgument("only cosine similarity is supported")
        if self.sampling not in ("all_masked", "uniform_masked"):
            raise InvalidArgument(f"unknown sampling mode {self.sampling!r}")


@dataclass
class MatchSet:
    """n matched location pairs on a descriptor grid, reference -> generated."""

    pairs: list  # [((ref_row, ref_col), (gen_row, gen_col)), ...]
    scores: list
    resolution: tuple[int, int]
    n_requested: int

    def __len__(self):
        return len(self.pairs)

    def ref_coords(self) -> np.ndarray:
        return np.array([p[0] for p in self.pairs], dtype=np.float64).reshape(-1, 2)

    def gen_coords(self) -> np.ndarray:
        return np.array([p[1] for p in self.pairs], dtype=np.float64).reshape(-1, 2)

    def to_json_dict(self) -> dict:
        return {"resolution": list(self.resolution), "n_requested": self.n_requested,
                "pairs": [{"ref": list(r), "gen": list(g), "score": s}
                          for (r, g), s in zip(self.pairs, self.scores)]}


def dift_descriptors(model: Model, z, prompt: Prompt, adapters=None,
                     config: MatchConfig = MatchConfig()) -> np.ndarray:
    """Descriptor grid (h, w, d) for one latent; concrete, never on a tape."""
    layer = config.descriptor_layer or model.config.deepest_sa_layer
    ec = ExtractionConfig(t=config.descriptor_t, sa_layers=(layer,), ca_layers=())
    feats, _ = extract(model, z, prompt, adapters, ec)
    return feats.per_layer[layer]


def _unit_rows(x: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(x, axis=-1, keepdims=True)
    return x / np.where(norms == 0.0, 1.0, norms)


def resize_mask(mask: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Nearest-neighbour mask resize (each output cell reads its center)."""
    m = np.asarray(mask, dtype=bool)
    h, w = m.shape
    ys = np.clip(((np.arange(out_h) + 0.5) * h / out_h - 0.5).round().astype(int), 0, h - 1)
    xs = np.clip(((np.arange(out_w) + 0.5) * w / out_w - 0.5).round().astype(int), 0, w - 1)
    return m[np.ix_(ys, xs)]


def _select_ref_points(mask: np.ndarray, config: MatchConfig) -> np.ndarray:
    idx = np.flatnonzero(mask.reshape(-1))
    if idx.size == 0:
        raise EmptyMaskError("reference mask selects no locations")
    if config.sampling == "all_masked" or idx.size <= config.n:
        return idx[:config.n]
    rng = np.random.default_rng(config.sample_seed)
    return np.sort(rng.choice(idx, size=config.n, replace=False))


def _best_matches(sel_unit: np.ndarray, gen_unit: np.ndarray):
    sims = sel_unit @ gen_unit.T
    best = np.argmax(sims, axis=1)  # first occurrence = smallest row-major index
    return best, sims[np.arange(len(best)), best]


def match(desc_ref: np.ndarray, desc_gen: np.ndarray, mask_ref: np.ndarray,
          config: MatchConfig = MatchConfig()) -> MatchSet:
    """Reference locations inside the mask, each matched to its best generated cell."""
    dr = np.asarray(desc_ref, dtype=np.float64)
    dg = np.asarray(desc_gen, dtype=np.float64)
    if dr.ndim != 3 or dg.ndim != 3:
        raise InvalidArgument("descriptor grids must be (h, w, d)")
    if dr.shape[-1] != dg.shape[-1]:
        raise InvalidArgument(f"descriptor dims differ: {dr.shape[-1]} vs {dg.shape[-1]}")
    h, w, d = dr.shape
    gh, gw = dg.shape[:2]
    mask = np.asarray(mask_ref, dtype=bool)
    if mask.shape != (h, w):
        mask = resize_mask(mask, h, w)
        if not mask.any():
            raise EmptyMaskError("mask is empty after resizing to the descriptor grid")

    ref_unit = _unit_rows(dr.reshape(h * w, d))
    gen_unit = _unit_rows(dg.reshape(gh * gw, d))
    sel = _select_ref_points(mask, config)
    best, scores = _best_matches(ref_unit[sel], gen_unit)

    if config.cycle_consistent:
        back, _ = _best_matches(gen_unit[best], ref_unit)
        keep = back == sel
        sel, best, scores = sel[keep], best[keep], scores[keep]

    pairs = [((int(s // w), int(s % w)), (int(b // gw), int(b % gw)))
             for s, b in zip(sel, best)]
    return MatchSet(pairs=pairs, scores=[float(s) for s in scores],
                    resolution=(h, w), n_requested=config.n)
