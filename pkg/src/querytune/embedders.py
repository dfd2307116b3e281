"""Desk-scale embedders standing in for pretrained vision/text encoders.

Two families:

* `HistogramMomentEmbedder`: image-only; per-channel color histograms
  concatenated with central geometric moments of the intensity field.
  Plays the role of a subject-similarity encoder.
* `AttributeEmbedder`: text-image pair; both sides map into one
  attribute space (object color, shape, texture, background color).
  Image attributes are recovered programmatically by comparing measured
  descriptors against prototypes rendered from the same generator that
  produced the corpus, so the space is self-calibrating and needs no
  learned weights.  Words map to their prototype coordinates; a concept
  token maps to the concept's recorded ground-truth attributes.

Every embedding is L2-normalized; callers may rely on unit norm to 1e-6.
"""

from __future__ import annotations

import numpy as np

from .backbone.text import (COLOR_WORDS, CONCEPT_WORD, SHAPE_WORDS, TEXTURE_WORDS,
                            Prompt, Vocabulary)
from .corpus import PALETTE, ConceptSpec, render
from .errors import InvalidArgument


def _unit(v: np.ndarray) -> np.ndarray:
    n = float(np.linalg.norm(v))
    if n == 0.0:
        out = np.zeros_like(v)
        out[0] = 1.0
        return out
    return v / n


class HistogramMomentEmbedder:
    """Color histograms + central moments of the subject region, unit-normalized.

    Statistics are computed over the foreground (pixels far from the border
    color) so the embedding tracks the depicted subject rather than whatever
    backdrop it sits on.  Central moments are taken about the foreground
    centroid, which makes them translation invariant.
    """

    name = "hist-moments"

    def __init__(self, bins: int = 8):
        self.bins = bins

    def embed_image(self, image: np.ndarray) -> np.ndarray:
        img = np.clip(np.asarray(image, dtype=np.float64), 0.0, 1.0)
        if img.ndim != 3 or img.shape[2] != 3:
            raise InvalidArgument("expected an (h, w, 3) image")
        mask, _ = _object_split(img)
        ys, xs = np.nonzero(mask)
        vals = img[ys, xs]
        n = float(len(ys))
        hists = [np.histogram(vals[:, c], bins=self.bins, range=(0.0, 1.0))[0] / n
                 for c in range(3)]
        # normalized central moments of the silhouette: scale and translation
        # invariant, so they respond to shape rather than placement
        cy, cx = ys.mean(), xs.mean()
        dy, dx = ys - cy, xs - cx
        mu = [float((dy ** p * dx ** q).sum()) / n ** (1.0 + (p + q) / 2.0)
              for p, q in ((2, 0), (0, 2), (1, 1), (2, 1), (1, 2), (3, 0), (0, 3))]
        moments = np.array(mu + [n / mask.size])
        return _unit(np.concatenate([np.concatenate(hists), 2.0 * moments]))


# ---------------------------------------------------------------------------
# attribute recovery


def _object_split(img: np.ndarray):
    """Separate object pixels from background by distance to the border color."""
    h, w, _ = img.shape
    border = np.concatenate([img[0], img[-1], img[:, 0], img[:, -1]])
    bg = np.median(border, axis=0)
    dist = np.linalg.norm(img - bg, axis=2)
    mask = dist > 0.18
    if mask.sum() < 4:  # nothing object-like; fall back to brightest pixels
        thr = np.quantile(dist, 0.9)
        mask = dist >= thr
    return mask, bg


def _shape_descriptor(mask: np.ndarray) -> np.ndarray:
    """Scale-invariant silhouette statistics of a boolean mask."""
    ys, xs = np.nonzero(mask)
    area = float(len(ys))
    if area == 0:
        return np.zeros(5)
    cy, cx = ys.mean(), xs.mean()
    ext_y = ys.max() - ys.min() + 1.0
    ext_x = xs.max() - xs.min() + 1.0
    solidity = area / (ext_y * ext_x)
    aspect = min(ext_y, ext_x) / max(ext_y, ext_x)
    ry = (ys - cy) / ext_y
    rx = (xs - cx) / ext_x
    m20 = float((ry ** 2).mean())
    m02 = float((rx ** 2).mean())
    m30 = float((ry ** 3).mean())  # vertical asymmetry separates triangles
    return np.array([solidity, aspect, m20 + m02, m20 - m02, m30])


def _texture_descriptor(img: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Brightness split and flip statistics inside the object."""
    ys, xs = np.nonzero(mask)
    if len(ys) == 0:
        return np.zeros(3)
    vals = img[ys, xs].mean(axis=1)
    hi = float(np.quantile(vals, 0.85))
    lo = float(np.quantile(vals, 0.15))
    dark_frac = float((vals < (hi + lo) / 2.0).mean()) if hi - lo > 0.08 else 0.0
    binary = np.zeros(img.shape[:2], dtype=np.float64)
    binary[ys, xs] = (vals >= (hi + lo) / 2.0).astype(np.float64)
    flips_x = float(np.abs(np.diff(binary, axis=1))[mask[:, 1:] & mask[:, :-1]].mean()) \
        if (mask[:, 1:] & mask[:, :-1]).any() else 0.0
    flips_y = float(np.abs(np.diff(binary, axis=0))[mask[1:, :] & mask[:-1, :]].mean()) \
        if (mask[1:, :] & mask[:-1, :]).any() else 0.0
    return np.array([dark_frac, flips_x, flips_y])


def _color_scores(rgb: np.ndarray, sigma: float = 0.30) -> np.ndarray:
    d = np.array([np.linalg.norm(rgb - np.array(PALETTE[wd])) for wd in COLOR_WORDS])
    return np.exp(-(d ** 2) / (2 * sigma ** 2))


def _gauss_scores(desc: np.ndarray, protos: dict[str, np.ndarray], sigma: float) -> np.ndarray:
    d = np.array([np.linalg.norm(desc - protos[k]) for k in protos])
    return np.exp(-(d ** 2) / (2 * sigma ** 2))


class AttributeEmbedder:
    """Shared attribute space for captions and rendered images.

    Layout: [object color | shape | texture | background color], weighted so
    each block contributes comparably.  Shape and texture prototypes are
    measured from canonical renders at the working resolution.
    """

    name = "attr-bag"

    def __init__(self, vocab: Vocabulary, hw: int = 64):
        self.vocab = vocab
        self.hw = hw
        self._protos(hw)

    def _protos(self, hw: int):
        self.shape_protos = {}
        for shape in SHAPE_WORDS:
            spec = ConceptSpec(id="p", shape=shape, color=PALETTE["red"],
                               texture="solid", color_word="red",
                               size_range=(0.40, 0.40), jitter=0.0)
            img, _ = render(spec, 0, hw=hw, background_word="gray")
            mask, _ = _object_split(img)
            self.shape_protos[shape] = _shape_descriptor(mask)
        self.texture_protos = {}
        for tex in TEXTURE_WORDS:
            spec = ConceptSpec(id="p", shape="square", color=PALETTE["blue"],
                               texture=tex, color_word="blue",
                               size_range=(0.45, 0.45), jitter=0.0)
            img, _ = render(spec, 0, hw=hw, background_word="gray")
            mask, _ = _object_split(img)
            self.texture_protos[tex] = _texture_descriptor(img, mask)

    # block weights: color carries most signal at desk scale
    _W = (1.0, 0.8, 0.6, 0.7)

    def _assemble(self, color, shape, texture, bg) -> np.ndarray:
        wc, ws, wt, wb = self._W
        return _unit(np.concatenate([wc * color, ws * shape, wt * texture, wb * bg]))

    def embed_image(self, image: np.ndarray) -> np.ndarray:
        img = np.clip(np.asarray(image, dtype=np.float64), 0.0, 1.0)
        mask, bg_rgb = _object_split(img)
        ys, xs = np.nonzero(mask)
        vals = img[ys, xs]
        bright = vals.mean(axis=1) >= np.quantile(vals.mean(axis=1), 0.5)
        obj_rgb = vals[bright].mean(axis=0) if bright.any() else vals.mean(axis=0)
        color = _color_scores(obj_rgb)
        shape = _gauss_scores(_shape_descriptor(mask), self.shape_protos, sigma=0.16)
        texture = _gauss_scores(_texture_descriptor(img, mask), self.texture_protos, sigma=0.22)
        # undo the background muting used by the renderer
        bg_est = np.clip((bg_rgb - 0.18) / 0.30, 0.0, 1.0)
        bg = _color_scores(bg_est)
        return self._assemble(color, shape, texture, bg)

    def embed_text(self, prompt: Prompt, concept_attrs: dict | None = None) -> np.ndarray:
        """Caption side of the space.

        concept_attrs carries the ground-truth attributes the concept token
        stands for ({"color": rgb, "shape": word, "texture": word}); without
        it the token contributes nothing.
        """
        words = [self.vocab.word_of(t) for t in prompt.token_ids]
        color = np.zeros(len(COLOR_WORDS))
        shape = np.zeros(len(SHAPE_WORDS))
        texture = np.zeros(len(TEXTURE_WORDS))
        bg = np.zeros(len(COLOR_WORDS))
        # a color word right before "background" describes the scene, not the object
        for i, wd in enumerate(words):
            nxt = words[i + 1] if i + 1 < len(words) else None
            if wd in COLOR_WORDS:
                if nxt == "background":
                    bg[COLOR_WORDS.index(wd)] = 1.0
                else:
                    color[COLOR_WORDS.index(wd)] = 1.0
            elif wd in SHAPE_WORDS:
                shape[SHAPE_WORDS.index(wd)] = 1.0
            elif wd in TEXTURE_WORDS:
                texture[TEXTURE_WORDS.index(wd)] = 1.0
            elif wd == CONCEPT_WORD and concept_attrs is not None:
                color = np.maximum(color, _color_scores(np.asarray(concept_attrs["color"])))
                if "shape" in concept_attrs:
                    shape[SHAPE_WORDS.index(concept_attrs["shape"])] = 1.0
                if "texture" in concept_attrs:
                    texture[TEXTURE_WORDS.index(concept_attrs["texture"])] = 1.0
        return self._assemble(color, shape, texture, bg)
