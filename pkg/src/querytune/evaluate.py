"""Alignment metrics and the paired with/without evaluation protocol.

Subject alignment: mean pairwise cosine between embeddings of generated
and reference images.  Prompt adherence: mean cosine between the caption
embedding and each generated image's embedding.  The suite runner
generates every query under two adapter arms with identical seeds and
reports per-query metrics, deltas, and win rates.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field

import numpy as np

from .backbone import Model, Prompt, SamplerConfig
from .errors import InvalidArgument


@dataclass(frozen=True)
class Query:
    prompt: Prompt
    seed: int
    refs: tuple
    concept_attrs: dict | None = None
    name: str = ""


@dataclass
class AlignmentReport:
    image_mean: float
    image_std: float
    text_mean: float
    text_std: float
    rows: list = field(default_factory=list)
    embedders: dict = field(default_factory=dict)
    win_rates: dict | None = None

    def to_json_dict(self) -> dict:
        d = {"image_alignment": {"mean": self.image_mean, "std": self.image_std},
             "text_alignment": {"mean": self.text_mean, "std": self.text_std},
             "embedders": dict(self.embedders), "rows": list(self.rows)}
        if self.win_rates is not None:
            d["win_rates"] = dict(self.win_rates)
        return d


def _cos(a: np.ndarray, b: np.ndarray) -> float:
    return float(np.dot(a, b))


def image_alignment(generated, references, embedder) -> float:
    """Mean cosine over every (generated, reference) pair."""
    gen = list(generated)
    ref = list(references)
    if not gen or not ref:
        raise InvalidArgument("image sets must be nonempty")
    ge = [embedder.embed_image(g) for g in gen]
    re_ = [embedder.embed_image(r) for r in ref]
    return float(np.mean([[_cos(g, r) for r in re_] for g in ge]))


def text_alignment(generated, prompt: Prompt, embedder,
                   concept_attrs: dict | None = None) -> float:
    """Mean cosine between the caption embedding and each generated image."""
    gen = list(generated)
    if not gen:
        raise InvalidArgument("image set must be nonempty")
    te = embedder.embed_text(prompt, concept_attrs=concept_attrs)
    return float(np.mean([_cos(te, embedder.embed_image(g)) for g in gen]))


def _arm_images(model: Model, queries, adapters, num_inference_steps: int,
                guidance_scale: float):
    """One generated image per query; adapters may be one set or one per query."""
    per_query = isinstance(adapters, (list, tuple))
    if per_query and len(adapters) != len(queries):
        raise InvalidArgument("per-query adapter list must match query count")
    out = []
    for i, q in enumerate(queries):
        a = adapters[i] if per_query else adapters
        cfg = SamplerConfig(num_inference_steps=num_inference_steps, seed=q.seed,
                            guidance_scale=guidance_scale)
        out.append(model.decode(model.sample(q.prompt, cfg, a)))
    return out


def evaluate_suite(model: Model, queries, adapters_without, adapters_with,
                   image_embedder, text_embedder, num_inference_steps: int = 8,
                   guidance_scale: float = 1.0) -> AlignmentReport:
    """Paired protocol: same queries and seeds, two adapter arms.

    adapters_without is the base personalization; adapters_with is either a
    single set or one refined set per query.  Win rate = fraction of queries
    where the with-arm strictly improves a metric.
    """
    queries = list(queries)
    if not queries:
        raise InvalidArgument("need at least one query")
    imgs_wo = _arm_images(model, queries, adapters_without, num_inference_steps,
                          guidance_scale)
    imgs_w = _arm_images(model, queries, adapters_with, num_inference_steps,
                         guidance_scale)
    rows = []
    for q, gw, gwo in zip(queries, imgs_w, imgs_wo):
        ia_wo = image_alignment([gwo], q.refs, image_embedder)
        ia_w = image_alignment([gw], q.refs, image_embedder)
        ta_wo = text_alignment([gwo], q.prompt, text_embedder, q.concept_attrs)
        ta_w = text_alignment([gw], q.prompt, text_embedder, q.concept_attrs)
        rows.append({"query": q.name, "seed": q.seed,
                     "image_wo": ia_wo, "image_w": ia_w,
                     "text_wo": ta_wo, "text_w": ta_w,
                     "image_delta": ia_w - ia_wo, "text_delta": ta_w - ta_wo})
    img_w = [r["image_w"] for r in rows]
    txt_w = [r["text_w"] for r in rows]
    win_img = float(np.mean([r["image_delta"] > 0 for r in rows]))
    win_txt = float(np.mean([r["text_delta"] > 0 for r in rows]))
    return AlignmentReport(
        image_mean=float(np.mean(img_w)), image_std=float(np.std(img_w)),
        text_mean=float(np.mean(txt_w)), text_std=float(np.std(txt_w)),
        rows=rows,
        embedders={"image": image_embedder.name, "text": text_embedder.name},
        win_rates={"image_alignment": win_img, "text_alignment": win_txt},
    )


def write_report_json(report: AlignmentReport, path) -> None:
    with open(path, "w") as f:
        json.dump(report.to_json_dict(), f, indent=1)


def write_report_csv(report: AlignmentReport, path) -> None:
    cols = ["query", "seed", "image_wo", "image_w", "image_delta",
            "text_wo", "text_w", "text_delta"]
    with open(path, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=cols)
        w.writeheader()
        for row in report.rows:
            w.writerow({k: row[k] for k in cols})
