"""Synthetic shape corpus with exact ground-truth attributes.

Concepts are colored, textured geometric figures on muted colored
backgrounds.  Rendering is a pure function of (spec, seed), captions come
from a closed vocabulary, and every attribute that appears in a caption is
recorded in the manifest, so alignment scores downstream can be computed
against ground truth instead of a pretrained encoder.

Captions are stored as templates with a ``{concept}`` slot.  Backbone
training fills the slot with the attribute words ("striped red circle");
personalization fills it with the concept placeholder token.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field

import numpy as np
from PIL import Image

from .backbone.text import COLOR_WORDS, SHAPE_WORDS, TEXTURE_WORDS, CONCEPT_WORD
from .errors import InvalidArgument

PALETTE: dict[str, tuple[float, float, float]] = {
    "red": (0.85, 0.10, 0.10),
    "green": (0.10, 0.75, 0.15),
    "blue": (0.15, 0.20, 0.85),
    "yellow": (0.85, 0.80, 0.10),
    "magenta": (0.80, 0.15, 0.80),
    "cyan": (0.10, 0.75, 0.80),
    "gray": (0.55, 0.55, 0.55),
}

DEFAULT_TEMPLATES = (
    "a photo of {concept} on {background} background",
    "{concept} on {background} background",
    "a photo of {concept}",
)


@dataclass(frozen=True)
class ConceptSpec:
    """One renderable concept: shape x color x texture plus jitter ranges."""

    id: str
    shape: str
    color: tuple[float, float, float]
    texture: str = "solid"
    color_word: str | None = None  # None for off-palette colors
    size_range: tuple[float, float] = (0.28, 0.42)
    jitter: float = 0.12

    def __post_init__(self):
        if self.shape not in SHAPE_WORDS:
            raise InvalidArgument(f"unknown shape {self.shape!r}")
        if self.texture not in TEXTURE_WORDS:
            raise InvalidArgument(f"unknown texture {self.texture!r}")
        if self.color_word is not None and self.color_word not in COLOR_WORDS:
            raise InvalidArgument(f"unknown color word {self.color_word!r}")
        if not all(0.0 <= c <= 1.0 for c in self.color):
            raise InvalidArgument("color channels must lie in [0, 1]")


def _shape_mask(shape: str, hw: int, cx: float, cy: float, r: float) -> np.ndarray:
    y, x = np.mgrid[0:hw, 0:hw].astype(np.float64) + 0.5
    dx, dy = x - cx, y - cy
    if shape == "circle":
        return dx * dx + dy * dy <= r * r
    if shape == "square":
        return np.maximum(np.abs(dx), np.abs(dy)) <= r
    if shape == "triangle":
        # apex up: width grows linearly from 0 at dy=-r to 1.1*r at dy=+r
        return (dy >= -r) & (dy <= r) & (np.abs(dx) <= (dy + r) * 0.55)
    if shape == "cross":
        arm = 0.36 * r
        return ((np.abs(dx) <= arm) & (np.abs(dy) <= r)) | \
               ((np.abs(dy) <= arm) & (np.abs(dx) <= r))
    raise InvalidArgument(f"unknown shape {shape!r}")


def _texture_field(texture: str, hw: int, phase: int) -> np.ndarray:
    """Boolean grid: True where the primary color shows, False on the dark bands."""
    if texture == "solid":
        return np.ones((hw, hw), dtype=bool)
    y, x = np.mgrid[0:hw, 0:hw]
    band = max(2, hw // 10)
    if texture == "striped":
        return ((x + y + phase) // band) % 2 == 0
    if texture == "checkered":
        return ((x // band + phase) % 2) == ((y // band) % 2)
    raise InvalidArgument(f"unknown texture {texture!r}")


def render(spec: ConceptSpec, seed: int, hw: int = 64,
           background_word: str | None = None) -> tuple[np.ndarray, dict]:
    """Render one image of the concept; returns (image (hw,hw,3) in [0,1], attrs)."""
    rng = np.random.default_rng(seed)
    bg_word = background_word
    if bg_word is None:
        bg_word = str(rng.choice([w for w in COLOR_WORDS if w != spec.color_word]))
    bg_rgb = np.array(PALETTE[bg_word])
    img = np.empty((hw, hw, 3), dtype=np.float64)
    img[:] = 0.18 + 0.30 * bg_rgb  # muted background, object stays dominant

    lo, hi = spec.size_range
    r = 0.5 * hw * (lo + (hi - lo) * rng.random())
    cx = hw * (0.5 + spec.jitter * (2 * rng.random() - 1))
    cy = hw * (0.5 + spec.jitter * (2 * rng.random() - 1))
    phase = int(rng.integers(0, 4))

    mask = _shape_mask(spec.shape, hw, cx, cy, r)
    bright = _texture_field(spec.texture, hw, phase)
    color = np.array(spec.color)
    img[mask & bright] = color
    img[mask & ~bright] = 0.35 * color

    attrs = {
        "concept_id": spec.id,
        "shape": spec.shape,
        "texture": spec.texture,
        "color": [round(float(c), 6) for c in spec.color],
        "color_word": spec.color_word,
        "background_word": bg_word,
        "radius": round(float(r), 4),
        "center": [round(float(cx), 4), round(float(cy), 4)],
    }
    return img, attrs


def describe(attrs: dict) -> str:
    """Attribute words for the {concept} slot, closed-vocabulary."""
    color_word = attrs.get("color_word")
    if color_word is None:
        color_word = CONCEPT_WORD  # off-palette colors have no word
    if attrs["texture"] == "solid":
        return f"{color_word} {attrs['shape']}"
    return f"{attrs['texture']} {color_word} {attrs['shape']}"


def fill_caption(template: str, concept_phrase: str, background_word: str) -> str:
    return template.format(concept=concept_phrase, background=background_word)


def save_png(path, image: np.ndarray) -> None:
    arr = np.clip(np.asarray(image), 0.0, 1.0)
    Image.fromarray((arr * 255.0 + 0.5).astype(np.uint8), mode="RGB").save(path, format="PNG")


def load_png(path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0


def palette_concepts(n: int, textures: tuple[str, ...] = ("solid", "striped", "checkered")) -> list[ConceptSpec]:
    """Deterministic enumeration over shape x color x texture, first n entries."""
    specs = []
    i = 0
    for texture in textures:
        for shape in SHAPE_WORDS:
            for word in COLOR_WORDS:
                if word == "gray":
                    continue  # backgrounds own gray; keeps object colors saturated
                if i >= n:
                    return specs
                specs.append(ConceptSpec(id=f"c{i:03d}", shape=shape,
                                         color=PALETTE[word], texture=texture,
                                         color_word=word))
                i += 1
    if i < n:
        raise InvalidArgument(f"at most {i} distinct palette concepts available")
    return specs


def novel_concept(seed: int, id: str = "novel") -> ConceptSpec:
    """A held-out concept with an off-palette color, for personalization targets."""
    rng = np.random.default_rng(seed)
    words = [w for w in COLOR_WORDS if w != "gray"]
    a, b = rng.choice(len(words), size=2, replace=False)
    mix = 0.35 + 0.3 * rng.random()
    color = tuple(np.clip(mix * np.array(PALETTE[words[a]])
                          + (1 - mix) * np.array(PALETTE[words[b]]), 0.05, 0.95))
    shape = str(rng.choice(list(SHAPE_WORDS)))
    texture = str(rng.choice(list(TEXTURE_WORDS)))
    return ConceptSpec(id=id, shape=shape, color=color, texture=texture, color_word=None)


@dataclass
class Corpus:
    root: str
    image_hw: int
    rows: list[dict] = field(default_factory=list)

    def image(self, i: int) -> np.ndarray:
        return load_png(os.path.join(self.root, self.rows[i]["path"]))

    def caption(self, i: int, concept_phrase: str | None = None) -> str:
        row = self.rows[i]
        phrase = concept_phrase if concept_phrase is not None else describe(row["attributes"])
        return fill_caption(row["caption"], phrase, row["attributes"]["background_word"])


def make_corpus(out_dir, n_concepts: int, images_per_concept: int,
                caption_templates: tuple[str, ...] = DEFAULT_TEMPLATES,
                seed: int = 0, image_hw: int = 64) -> Corpus:
    """Render the dataset under out_dir and write manifest.json atomically."""
    if n_concepts < 1 or images_per_concept < 1:
        raise InvalidArgument("n_concepts and images_per_concept must be >= 1")
    os.makedirs(os.path.join(out_dir, "images"), exist_ok=True)
    specs = palette_concepts(n_concepts)
    rng = np.random.default_rng(seed)
    rows = []
    for spec in specs:
        for j in range(images_per_concept):
            render_seed = int(rng.integers(0, 2**31 - 1))
            img, attrs = render(spec, render_seed, hw=image_hw)
            rel = os.path.join("images", f"{spec.id}_{j:02d}.png")
            save_png(os.path.join(out_dir, rel), img)
            template = caption_templates[j % len(caption_templates)]
            rows.append({"path": rel, "caption": template, "render_seed": render_seed,
                         "attributes": attrs})
    manifest = {"format": "querytune-corpus", "version": 1, "image_hw": image_hw,
                "seed": seed, "caption_templates": list(caption_templates), "rows": rows}
    tmp = os.path.join(out_dir, "manifest.json.tmp")
    with open(tmp, "w") as f:
        json.dump(manifest, f, indent=1)
    os.replace(tmp, os.path.join(out_dir, "manifest.json"))
    return Corpus(root=str(out_dir), image_hw=image_hw, rows=rows)


def load_corpus(root) -> Corpus:
    with open(os.path.join(root, "manifest.json")) as f:
        manifest = json.load(f)
    if manifest.get("format") != "querytune-corpus":
        raise InvalidArgument(f"{root} does not contain a corpus manifest")
    return Corpus(root=str(root), image_hw=manifest["image_hw"], rows=manifest["rows"])
