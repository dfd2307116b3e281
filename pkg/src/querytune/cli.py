"""Command-line pipeline surface.

Seven subcommands cover the full workflow: corpus generation, backbone
training, base personalization, per-query refinement, plain generation,
paired evaluation, and correspondence debugging.  Every invocation writes a
timestamped run directory containing the merged config snapshot, a log, and
the command's outputs.  Reports are deterministic given config and seed;
wall-clock data lives in meta.json only.

Configuration comes from one JSON file plus dotted-path overrides
(`--set refine.learning_rate=0.25`).  Environment variables are honored for
exactly two things: QUERYTUNE_OUT (output root) and QUERYTUNE_JOBS (worker
cap).  Exit codes: 0 success, 2 missing checkpoint or input artifact,
3 invalid configuration (the error JSON names the field), 1 anything else.
"""
from __future__ import annotations

import argparse
import copy
import hashlib
import json
import logging
import os
import sys
import time

EXIT_OK = 0
EXIT_RUNTIME = 1
EXIT_MISSING = 2
EXIT_CONFIG = 3

COMMANDS = ("make-corpus", "train-backbone", "personalize", "refine",
            "generate", "eval", "match-debug")

DEFAULTS: dict = {
    "seed": 0,
    "output": {"root": None},  # None -> QUERYTUNE_OUT or ./runs
    "paths": {"backbone": None, "adapter": None, "corpus": None},
    "model": {
        "latent_hw": 16, "latent_channels": 4, "image_hw": 64,
        "image_channels": 3, "width_full": 24, "width_half": 48,
        "heads": 2, "text_dim": 16, "time_dim": 32, "max_tokens": 16,
        "gn_groups": 8, "vae": "conv", "vae_width": 16, "latent_scale": 1.0,
        "num_train_steps": 1000, "beta_start": 1e-4, "beta_end": 0.02,
    },
    "corpus": {
        "out": None, "n_concepts": 6, "images_per_concept": 8,
        "caption_templates": None,  # None -> corpus module defaults
    },
    "train": {
        "vae_steps": 400, "denoiser_steps": 2000, "batch_size": 16,
        "learning_rate": 2e-3,
    },
    "personalize": {
        "concept_id": None, "kind": "composite", "rank": 4,
        "class_word": None, "learning_rate": 0.5, "steps": 200,
        "batch_size": 1, "reference_prompt": "a photo of <concept>",
    },
    "refine": {
        "prompt": None, "reference_image": None, "concept_id": None,
        "ref_index": 0, "reference_prompt": "a photo of <concept>",
        "learning_rate": 0.5, "num_updates": 1, "T_feature_steps": 1,
        "lambda_sa": 1.0, "lambda_ca": 1.0, "lambda_ldm": 1.0,
        "mask_quantile": 0.6, "num_inference_steps": 8,
        "guidance_scale": 1.0, "extraction_t": -1, "match_n": 256,
        "match_sampling": "all_masked", "match_sample_seed": 0,
    },
    "generate": {
        "prompt": None, "num_images": 1, "num_inference_steps": 20,
        "guidance_scale": 1.0,
    },
    "eval": {
        "concept_id": None, "prompts": None, "num_queries": 8,
        "num_inference_steps": 8, "guidance_scale": 1.0, "paired": False,
    },
    "match_debug": {
        "prompt": None, "reference_image": None, "concept_id": None,
        "ref_index": 0, "reference_prompt": "a photo of <concept>",
        "n": 64, "num_inference_steps": 8, "mask_quantile": 0.6,
    },
}

_NUM = (int, float)
_STR_OR_NONE = (str, type(None))

# leaf -> tuple of accepted types (bool is excluded from int checks below)
SCHEMA: dict = {
    "seed": (int,),
    "output": {"root": _STR_OR_NONE},
    "paths": {"backbone": _STR_OR_NONE, "adapter": _STR_OR_NONE,
              "corpus": _STR_OR_NONE},
    "model": {
        "latent_hw": (int,), "latent_channels": (int,), "image_hw": (int,),
        "image_channels": (int,), "width_full": (int,), "width_half": (int,),
        "heads": (int,), "text_dim": (int,), "time_dim": (int,),
        "max_tokens": (int,), "gn_groups": (int,), "vae": (str,),
        "vae_width": (int,), "latent_scale": _NUM, "num_train_steps": (int,),
        "beta_start": _NUM, "beta_end": _NUM,
    },
    "corpus": {"out": _STR_OR_NONE, "n_concepts": (int,),
               "images_per_concept": (int,),
               "caption_templates": (list, type(None))},
    "train": {"vae_steps": (int,), "denoiser_steps": (int,),
              "batch_size": (int,), "learning_rate": _NUM},
    "personalize": {"concept_id": _STR_OR_NONE, "kind": (str,),
                    "rank": (int,), "class_word": _STR_OR_NONE,
                    "learning_rate": _NUM, "steps": (int,),
                    "batch_size": (int,), "reference_prompt": (str,)},
    "refine": {"prompt": _STR_OR_NONE, "reference_image": _STR_OR_NONE,
               "concept_id": _STR_OR_NONE, "ref_index": (int,),
               "reference_prompt": (str,), "learning_rate": _NUM,
               "num_updates": (int,), "T_feature_steps": (int,),
               "lambda_sa": _NUM, "lambda_ca": _NUM, "lambda_ldm": _NUM,
               "mask_quantile": _NUM, "num_inference_steps": (int,),
               "guidance_scale": _NUM, "extraction_t": (int,),
               "match_n": (int,), "match_sampling": (str,),
               "match_sample_seed": (int,)},
    "generate": {"prompt": _STR_OR_NONE, "num_images": (int,),
                 "num_inference_steps": (int,), "guidance_scale": _NUM},
    "eval": {"concept_id": _STR_OR_NONE, "prompts": (list, type(None)),
             "num_queries": (int,), "num_inference_steps": (int,),
             "guidance_scale": _NUM, "paired": (bool,)},
    "match_debug": {"prompt": _STR_OR_NONE, "reference_image": _STR_OR_NONE,
                    "concept_id": _STR_OR_NONE, "ref_index": (int,),
                    "reference_prompt": (str,), "n": (int,),
                    "num_inference_steps": (int,), "mask_quantile": _NUM},
}

# fields that must be non-null before a command can run
REQUIRED: dict = {
    "train-backbone": ["paths.corpus"],
    "personalize": ["paths.backbone", "paths.corpus", "personalize.concept_id"],
    "refine": ["paths.backbone", "paths.adapter", "refine.prompt"],
    "generate": ["paths.backbone", "generate.prompt"],
    "eval": ["paths.backbone", "paths.adapter", "paths.corpus",
             "eval.concept_id"],
    "match-debug": ["paths.backbone", "paths.adapter", "match_debug.prompt"],
}


class RunError(Exception):
    """Carries the exit code and the machine-readable error payload."""

    def __init__(self, code: int, kind: str, message: str, field: str | None = None):
        super().__init__(message)
        self.code = code
        self.kind = kind
        self.field = field

    def payload(self) -> dict:
        err = {"type": self.kind, "message": str(self)}
        if self.field is not None:
            err["field"] = self.field
        return {"error": err}


# ---------------------------------------------------------------------------
# config plumbing


def _deep_merge(base: dict, over: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _deep_merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def _parse_set(expr: str) -> tuple[str, object]:
    if "=" not in expr:
        raise RunError(EXIT_CONFIG, "config",
                       f"override {expr!r} is not of the form path=value",
                       field=expr)
    path, raw = expr.split("=", 1)
    path = path.strip()
    if not path:
        raise RunError(EXIT_CONFIG, "config",
                       f"override {expr!r} has an empty path", field=expr)
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw  # bare strings need no quoting
    return path, value


def _set_path(cfg: dict, dotted: str, value) -> None:
    keys = dotted.split(".")
    node = cfg
    for k in keys[:-1]:
        nxt = node.get(k)
        if not isinstance(nxt, dict):
            if k in node and nxt is not None:
                raise RunError(EXIT_CONFIG, "config",
                               f"{dotted}: {k} is not a section", field=dotted)
            nxt = {}
            node[k] = nxt
        node = nxt
    node[keys[-1]] = value


def _validate(cfg: dict, schema: dict, prefix: str = "") -> None:
    for key, value in cfg.items():
        path = f"{prefix}{key}"
        if key not in schema:
            raise RunError(EXIT_CONFIG, "config", f"{path}: unknown field",
                           field=path)
        expected = schema[key]
        if isinstance(expected, dict):
            if not isinstance(value, dict):
                raise RunError(EXIT_CONFIG, "config",
                               f"{path}: expected a section", field=path)
            _validate(value, expected, prefix=path + ".")
            continue
        if isinstance(value, bool) and bool not in expected:
            raise RunError(EXIT_CONFIG, "config",
                           f"{path}: expected {_type_names(expected)}, got bool",
                           field=path)
        if not isinstance(value, expected):
            raise RunError(EXIT_CONFIG, "config",
                           f"{path}: expected {_type_names(expected)}, "
                           f"got {type(value).__name__}", field=path)


def _type_names(types) -> str:
    names = [("null" if t is type(None) else t.__name__) for t in types]
    return " or ".join(names)


def _get_path(cfg: dict, dotted: str):
    node = cfg
    for k in dotted.split("."):
        node = node[k]
    return node


def load_config(config_path: str | None, sets: list[str]) -> dict:
    cfg = copy.deepcopy(DEFAULTS)
    if config_path is not None:
        if not os.path.exists(config_path):
            raise RunError(EXIT_CONFIG, "config",
                           f"config file not found: {config_path}",
                           field="config")
        try:
            with open(config_path) as f:
                file_cfg = json.load(f)
        except json.JSONDecodeError as e:
            raise RunError(EXIT_CONFIG, "config",
                           f"config file is not valid JSON: {e}",
                           field="config")
        if not isinstance(file_cfg, dict):
            raise RunError(EXIT_CONFIG, "config",
                           "config file must hold a JSON object",
                           field="config")
        cfg = _deep_merge(cfg, file_cfg)
    for expr in sets:
        path, value = _parse_set(expr)
        _set_path(cfg, path, value)
    _validate(cfg, SCHEMA)
    return cfg


def _check_required(cfg: dict, command: str) -> None:
    for path in REQUIRED.get(command, []):
        if _get_path(cfg, path) is None:
            raise RunError(EXIT_CONFIG, "config",
                           f"{path} is required for {command}", field=path)


# ---------------------------------------------------------------------------
# run directory and artifact helpers


def _out_root(cfg: dict) -> str:
    root = cfg["output"]["root"]
    if root is None:
        root = os.environ.get("QUERYTUNE_OUT", "runs")
    return root


def _make_run_dir(cfg: dict, command: str) -> str:
    stamp = time.strftime("%Y%m%d-%H%M%S", time.gmtime())
    base = os.path.join(_out_root(cfg), f"{command}-{stamp}")
    path = base
    i = 1
    while True:
        try:
            os.makedirs(path)
            return path
        except FileExistsError:
            path = f"{base}-{i}"
            i += 1


def _write_json(path: str, payload: dict) -> None:
    with open(path, "w") as f:
        json.dump(payload, f, indent=1, sort_keys=True)
        f.write("\n")


def _sha256(path: str) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(65536), b""):
            h.update(chunk)
    return h.hexdigest()


def _require_artifact(path: str | None, field: str, kind: str) -> str:
    # presence was checked by _check_required; here the file must exist
    assert path is not None
    if not os.path.exists(path):
        raise RunError(EXIT_MISSING, kind, f"{field}: no file at {path}",
                       field=field)
    return path


def _load_backbone(cfg: dict):
    from .backbone import Model
    path = _require_artifact(cfg["paths"]["backbone"], "paths.backbone",
                             "missing_checkpoint")
    try:
        return Model.load(path)
    except Exception as e:
        raise RunError(EXIT_RUNTIME, "checkpoint",
                       f"cannot load backbone: {e}", field="paths.backbone")


def _load_adapter(cfg: dict):
    from .adapters import AdapterParams
    path = _require_artifact(cfg["paths"]["adapter"], "paths.adapter",
                             "missing_checkpoint")
    try:
        return AdapterParams.load(path)
    except Exception as e:
        raise RunError(EXIT_RUNTIME, "checkpoint",
                       f"cannot load adapter: {e}", field="paths.adapter")


def _load_corpus_at(cfg: dict, field: str = "paths.corpus"):
    from .corpus import load_corpus
    path = _get_path(cfg, field)
    _require_artifact(path, field, "missing_input")
    manifest = os.path.join(path, "manifest.json")
    if not os.path.exists(manifest):
        raise RunError(EXIT_MISSING, "missing_input",
                       f"{field}: no corpus manifest under {path}", field=field)
    return load_corpus(path)


def _concept_rows(corpus, concept_id: str, field: str) -> list[int]:
    rows = [i for i, r in enumerate(corpus.rows)
            if r["attributes"]["concept_id"] == concept_id]
    if not rows:
        known = sorted({r["attributes"]["concept_id"] for r in corpus.rows})
        raise RunError(EXIT_CONFIG, "config",
                       f"{field}: concept {concept_id!r} not in corpus "
                       f"(has {', '.join(known)})", field=field)
    return rows


def _encode_prompt(model, text: str, field: str, need_concept: bool = False):
    from .errors import InvalidArgument
    try:
        prompt = model.vocab.encode(text)
    except InvalidArgument as e:
        raise RunError(EXIT_CONFIG, "config", f"{field}: {e}", field=field)
    if need_concept and prompt.concept_index is None:
        raise RunError(EXIT_CONFIG, "config",
                       f"{field}: prompt must contain the concept token",
                       field=field)
    return prompt


def _reference_image(cfg: dict, model, section: str):
    """One reference image, either a PNG path or corpus + concept + index."""
    from .corpus import load_png
    sec = cfg[section]
    if sec["reference_image"] is not None:
        path = _require_artifact(sec["reference_image"],
                                 f"{section}.reference_image", "missing_input")
        img = load_png(path)
    elif sec["concept_id"] is not None:
        corpus = _load_corpus_at(cfg)
        rows = _concept_rows(corpus, sec["concept_id"], f"{section}.concept_id")
        idx = sec["ref_index"]
        if not (0 <= idx < len(rows)):
            raise RunError(EXIT_CONFIG, "config",
                           f"{section}.ref_index: out of range for "
                           f"{len(rows)} reference images",
                           field=f"{section}.ref_index")
        img = corpus.image(rows[idx])
    else:
        raise RunError(EXIT_CONFIG, "config",
                       f"{section}.reference_image or {section}.concept_id "
                       "must be set", field=f"{section}.reference_image")
    c = model.config
    want = (c.image_hw, c.image_hw, c.image_channels)
    if img.shape != want:
        raise RunError(EXIT_CONFIG, "config",
                       f"{section}.reference_image: shape {img.shape} does not "
                       f"match the backbone's {want}",
                       field=f"{section}.reference_image")
    return img


def _refine_config(cfg: dict, prompt):
    from .features import ExtractionConfig
    from .matching import MatchConfig
    from .refine import RefineConfig
    from .errors import InvalidArgument
    r = cfg["refine"]
    try:
        return RefineConfig(
            prompt=prompt,
            seed=cfg["seed"],
            learning_rate=float(r["learning_rate"]),
            num_updates=r["num_updates"],
            T_feature_steps=r["T_feature_steps"],
            lambdas=(float(r["lambda_sa"]), float(r["lambda_ca"]),
                     float(r["lambda_ldm"])),
            extraction=ExtractionConfig(t=r["extraction_t"]),
            matching=MatchConfig(n=r["match_n"], sampling=r["match_sampling"],
                                 sample_seed=r["match_sample_seed"]),
            mask_quantile=float(r["mask_quantile"]),
            num_inference_steps=r["num_inference_steps"],
            guidance_scale=float(r["guidance_scale"]),
        )
    except InvalidArgument as e:
        raise RunError(EXIT_CONFIG, "config", f"refine: {e}", field="refine")


def _run_refine(model, adapters, x_ref, ref_prompt, rconf):
    from .refine import refine_query, refine_query_multiT
    if rconf.T_feature_steps > 1:
        return refine_query_multiT(model, adapters, x_ref, ref_prompt, rconf)
    return refine_query(model, adapters, x_ref, ref_prompt, rconf)


# ---------------------------------------------------------------------------
# commands


def cmd_make_corpus(cfg: dict, run_dir: str, log) -> dict:
    from . import corpus as corpus_mod
    sec = cfg["corpus"]
    dest = sec["out"] or os.path.join(run_dir, "corpus")
    templates = sec["caption_templates"]
    kwargs = {} if templates is None else {"caption_templates": tuple(templates)}
    corpus = corpus_mod.make_corpus(dest, sec["n_concepts"],
                                    sec["images_per_concept"],
                                    seed=cfg["seed"],
                                    image_hw=cfg["model"]["image_hw"],
                                    **kwargs)
    log.info("wrote %d images to %s", len(corpus.rows), dest)
    return {"n_images": len(corpus.rows), "n_concepts": sec["n_concepts"],
            "image_hw": cfg["model"]["image_hw"],
            "manifest_sha256": _sha256(os.path.join(dest, "manifest.json"))}


def cmd_train_backbone(cfg: dict, run_dir: str, log) -> dict:
    from .backbone import Model, ModelConfig
    from .backbone.pretrain import train_denoiser, train_vae
    from .errors import InvalidArgument
    corpus = _load_corpus_at(cfg)
    try:
        mc = ModelConfig(**cfg["model"])
    except InvalidArgument as e:
        raise RunError(EXIT_CONFIG, "config", f"model: {e}", field="model")
    if corpus.image_hw != mc.image_hw:
        raise RunError(EXIT_CONFIG, "config",
                       f"model.image_hw: corpus images are {corpus.image_hw}px",
                       field="model.image_hw")
    model = Model.init(mc, seed=cfg["seed"])
    t = cfg["train"]
    curves = {}
    if mc.vae == "conv":
        log.info("training codec for %d steps", t["vae_steps"])
        model, curves["vae"] = train_vae(model, corpus, steps=t["vae_steps"],
                                         batch_size=t["batch_size"],
                                         lr=float(t["learning_rate"]),
                                         seed=cfg["seed"], log=log.info)
    log.info("training denoiser for %d steps", t["denoiser_steps"])
    model, curves["denoiser"] = train_denoiser(
        model, corpus, steps=t["denoiser_steps"], batch_size=t["batch_size"],
        lr=float(t["learning_rate"]), seed=cfg["seed"], log=log.info)
    ckpt = os.path.join(run_dir, "backbone.ckpt")
    model.save(ckpt)
    _write_json(os.path.join(run_dir, "loss_curve.json"), curves)
    tail = curves["denoiser"][-min(50, len(curves["denoiser"])):]
    return {"checkpoint": "backbone.ckpt", "checkpoint_sha256": _sha256(ckpt),
            "denoiser_steps": t["denoiser_steps"],
            "final_loss": round(sum(tail) / len(tail), 6),
            "n_params": int(sum(v.size for v in model.params.values())),
            "latent_scale": model.config.latent_scale}


def cmd_personalize(cfg: dict, run_dir: str, log) -> dict:
    from .adapters import TrainConfig, personalize_base
    model = _load_backbone(cfg)
    corpus = _load_corpus_at(cfg)
    sec = cfg["personalize"]
    rows = _concept_rows(corpus, sec["concept_id"], "personalize.concept_id")
    images = [corpus.image(i) for i in rows]
    ref_prompt = _encode_prompt(model, sec["reference_prompt"],
                                "personalize.reference_prompt",
                                need_concept=True)
    class_word = sec["class_word"]
    if class_word is None:
        class_word = corpus.rows[rows[0]]["attributes"]["shape"]
    tc = TrainConfig(learning_rate=float(sec["learning_rate"]),
                     steps=sec["steps"], batch_size=sec["batch_size"],
                     seed=cfg["seed"])
    log.info("fitting %s adapters to %d references of %s",
             sec["kind"], len(images), sec["concept_id"])
    adapters, curve = personalize_base(model, images, ref_prompt,
                                       kind=sec["kind"], config=tc,
                                       class_word=class_word,
                                       rank=sec["rank"],
                                       on_step=lambda s, lv, _a: log.info(
                                           "step %d loss %.6f", s, lv)
                                       if s % 50 == 0 else None)
    ckpt = os.path.join(run_dir, "adapter.ckpt")
    adapters.save(ckpt)
    _write_json(os.path.join(run_dir, "loss_curve.json"), {"loss": curve})
    return {"checkpoint": "adapter.ckpt", "checkpoint_sha256": _sha256(ckpt),
            "kind": adapters.kind, "rank": adapters.rank,
            "param_count": adapters.param_count(),
            "n_references": len(images), "steps": sec["steps"],
            "loss_first": round(curve[0], 6), "loss_last": round(curve[-1], 6)}


def cmd_refine(cfg: dict, run_dir: str, log) -> dict:
    from .corpus import save_png
    model = _load_backbone(cfg)
    adapters = _load_adapter(cfg)
    sec = cfg["refine"]
    x_ref = _reference_image(cfg, model, "refine")
    prompt = _encode_prompt(model, sec["prompt"], "refine.prompt",
                            need_concept=True)
    ref_prompt = _encode_prompt(model, sec["reference_prompt"],
                                "refine.reference_prompt", need_concept=True)
    rconf = _refine_config(cfg, prompt)
    log.info("refining %r for %d update(s), T=%d",
             sec["prompt"], rconf.num_updates, rconf.T_feature_steps)
    result = _run_refine(model, adapters, x_ref, ref_prompt, rconf)
    save_png(os.path.join(run_dir, "before.png"), result.image_before)
    save_png(os.path.join(run_dir, "after.png"), result.image_after)
    _write_json(os.path.join(run_dir, "matches.json"),
                {"match_sets": [ms.to_json_dict() for ms in result.match_sets]})
    ckpt = os.path.join(run_dir, "adapter_after.ckpt")
    result.adapters_after.save(ckpt)
    if result.aborted:
        log.warning("refinement aborted: %s",
                    result.metadata.get("abort_reason", "unknown"))
    report = {
        "aborted": result.aborted,
        "metadata": result.metadata,
        "losses_before": None if result.report is None
        else result.report.to_json_dict(),
        "losses_after": None if result.report_after is None
        else result.report_after.to_json_dict(),
        "num_updates": rconf.num_updates,
        "adapter_sha256": _sha256(ckpt),
        "image_before_sha256": _sha256(os.path.join(run_dir, "before.png")),
        "image_after_sha256": _sha256(os.path.join(run_dir, "after.png")),
    }
    return report


def cmd_generate(cfg: dict, run_dir: str, log) -> dict:
    from .backbone import SamplerConfig
    from .corpus import save_png
    model = _load_backbone(cfg)
    adapters = None
    if cfg["paths"]["adapter"] is not None:
        adapters = _load_adapter(cfg)
    sec = cfg["generate"]
    prompt = _encode_prompt(model, sec["prompt"], "generate.prompt")
    images = []
    for i in range(sec["num_images"]):
        sc = SamplerConfig(num_inference_steps=sec["num_inference_steps"],
                           seed=cfg["seed"] + i,
                           guidance_scale=float(sec["guidance_scale"]))
        img = model.decode(model.sample(prompt, sc, adapters))
        name = f"sample-{i:03d}.png"
        save_png(os.path.join(run_dir, name), img)
        images.append({"file": name, "seed": sc.seed,
                       "sha256": _sha256(os.path.join(run_dir, name))})
        log.info("wrote %s (seed %d)", name, sc.seed)
    return {"prompt": sec["prompt"], "images": images}


def cmd_eval(cfg: dict, run_dir: str, log) -> dict:
    from .backbone import SamplerConfig
    from .backbone.text import CONCEPT_WORD
    from .embedders import AttributeEmbedder, HistogramMomentEmbedder
    from .evaluate import (Query, evaluate_suite, image_alignment,
                           text_alignment, write_report_csv)
    model = _load_backbone(cfg)
    base = _load_adapter(cfg)
    corpus = _load_corpus_at(cfg)
    sec = cfg["eval"]
    rows = _concept_rows(corpus, sec["concept_id"], "eval.concept_id")
    refs = tuple(corpus.image(i) for i in rows)
    attrs_row = corpus.rows[rows[0]]["attributes"]
    concept_attrs = {"color": tuple(attrs_row["color"]),
                     "shape": attrs_row["shape"],
                     "texture": attrs_row["texture"]}
    prompt_texts = sec["prompts"]
    if prompt_texts is None:
        prompt_texts = [f"a photo of {CONCEPT_WORD} on gray background",
                        f"{CONCEPT_WORD} on blue background",
                        f"a photo of {CONCEPT_WORD}"]
    queries = []
    for i in range(sec["num_queries"]):
        text = prompt_texts[i % len(prompt_texts)]
        prompt = _encode_prompt(model, text, "eval.prompts", need_concept=True)
        queries.append(Query(prompt=prompt, seed=cfg["seed"] + i, refs=refs,
                             concept_attrs=concept_attrs, name=f"q{i:03d}"))
    image_embedder = HistogramMomentEmbedder()
    text_embedder = AttributeEmbedder(model.vocab, hw=model.config.image_hw)

    if not sec["paired"]:
        # single-arm: alignment of the base personalization, no refinement
        gens, per_query = [], []
        for q in queries:
            sc = SamplerConfig(num_inference_steps=sec["num_inference_steps"],
                               seed=q.seed,
                               guidance_scale=float(sec["guidance_scale"]))
            img = model.decode(model.sample(q.prompt, sc, base))
            gens.append(img)
            per_query.append({
                "query": q.name, "seed": q.seed,
                "image_alignment": image_alignment([img], refs, image_embedder),
                "text_alignment": text_alignment([img], q.prompt, text_embedder,
                                                 q.concept_attrs)})
        mean_i = sum(r["image_alignment"] for r in per_query) / len(per_query)
        mean_t = sum(r["text_alignment"] for r in per_query) / len(per_query)
        log.info("single-arm: image %.4f text %.4f", mean_i, mean_t)
        return {"paired": False, "image_alignment": mean_i,
                "text_alignment": mean_t, "rows": per_query}

    # paired: refine per query, then compare arms on the same seeds
    ref_prompt = _encode_prompt(model, cfg["refine"]["reference_prompt"],
                                "refine.reference_prompt", need_concept=True)
    refined, aborted = [], 0
    for i, q in enumerate(queries):
        rconf = _refine_config(cfg, q.prompt)
        rconf = _with_seed(rconf, q.seed)
        res = _run_refine(model, base, refs[i % len(refs)], ref_prompt, rconf)
        refined.append(res.adapters_after)
        aborted += int(res.aborted)
        log.info("refined %s%s", q.name, " (aborted)" if res.aborted else "")
    rep = evaluate_suite(model, queries, base, refined, image_embedder,
                         text_embedder,
                         num_inference_steps=sec["num_inference_steps"],
                         guidance_scale=float(sec["guidance_scale"]))
    write_report_csv(rep, os.path.join(run_dir, "report.csv"))
    log.info("paired: image %.4f (win %.2f) text %.4f (win %.2f)",
             rep.image_mean, rep.win_rates["image_alignment"],
             rep.text_mean, rep.win_rates["text_alignment"])
    out = rep.to_json_dict()
    out["paired"] = True
    out["aborted_refinements"] = aborted
    return out


def _with_seed(rconf, seed: int):
    from dataclasses import replace
    return replace(rconf, seed=seed)


def cmd_match_debug(cfg: dict, run_dir: str, log) -> dict:
    import numpy as np
    from .backbone import SamplerConfig
    from .corpus import save_png
    from .features import ExtractionConfig, extract, extract_reference, object_mask
    from .matching import MatchConfig, dift_descriptors, match, resize_mask
    model = _load_backbone(cfg)
    adapters = _load_adapter(cfg)
    sec = cfg["match_debug"]
    x_ref = _reference_image(cfg, model, "match_debug")
    prompt = _encode_prompt(model, sec["prompt"], "match_debug.prompt",
                            need_concept=True)
    ref_prompt = _encode_prompt(model, sec["reference_prompt"],
                                "match_debug.reference_prompt",
                                need_concept=True)

    sc = SamplerConfig(num_inference_steps=sec["num_inference_steps"],
                       seed=cfg["seed"], guidance_scale=1.0)
    z_gen = model.sample(prompt, sc, adapters)
    gen_img = model.decode(z_gen)

    ec = ExtractionConfig()
    _, ca_ref = extract_reference(model, x_ref, ref_prompt, adapters, ec)
    mask = object_mask(ca_ref, sec["mask_quantile"])
    mconf = MatchConfig(n=sec["n"])
    d_ref = dift_descriptors(model, model.encode(x_ref), ref_prompt, adapters,
                             mconf)
    d_gen = dift_descriptors(model, z_gen, prompt, adapters, mconf)
    m = resize_mask(mask.mask, d_ref.shape[0], d_ref.shape[1])
    ms = match(d_ref, d_gen, m, mconf)
    log.info("matched %d/%d points at %s", len(ms), ms.n_requested,
             ms.resolution)

    panel = _match_panel(np.asarray(x_ref), np.asarray(gen_img), ms)
    save_png(os.path.join(run_dir, "matches.png"), panel)
    _write_json(os.path.join(run_dir, "matches.json"),
                {"matches": ms.to_json_dict(),
                 "mask_degenerate": mask.degenerate})
    return {"n_matches": len(ms), "n_requested": ms.n_requested,
            "resolution": list(ms.resolution),
            "mask_degenerate": mask.degenerate,
            "mean_score": (sum(ms.scores) / len(ms)) if len(ms) else None,
            "panel_sha256": _sha256(os.path.join(run_dir, "matches.png"))}


def _match_panel(ref_img, gen_img, ms):
    """Reference and generated side by side, matched cells tinted in pairs."""
    import numpy as np
    from .features import scale_coords
    hw = ref_img.shape[0]
    colors = np.array([[1.0, 0.2, 0.2], [0.2, 1.0, 0.2], [0.2, 0.4, 1.0],
                       [1.0, 1.0, 0.2], [1.0, 0.3, 1.0], [0.2, 1.0, 1.0]])
    left = ref_img.copy()
    right = gen_img.copy()
    if len(ms):
        rc = scale_coords(ms.ref_coords(), ms.resolution, (hw, hw))
        gc = scale_coords(ms.gen_coords(), ms.resolution, (hw, hw))
        for i, (a, b) in enumerate(zip(rc, gc)):
            c = colors[i % len(colors)]
            ar, ac = int(round(a[0])), int(round(a[1]))
            br, bc = int(round(b[0])), int(round(b[1]))
            left[max(ar - 1, 0):ar + 1, max(ac - 1, 0):ac + 1] = c
            right[max(br - 1, 0):br + 1, max(bc - 1, 0):bc + 1] = c
    gap = np.ones((hw, 2, ref_img.shape[2]))
    return np.concatenate([left, gap, right], axis=1)


HANDLERS = {
    "make-corpus": cmd_make_corpus,
    "train-backbone": cmd_train_backbone,
    "personalize": cmd_personalize,
    "refine": cmd_refine,
    "generate": cmd_generate,
    "eval": cmd_eval,
    "match-debug": cmd_match_debug,
}


# ---------------------------------------------------------------------------
# entry point


class _Parser(argparse.ArgumentParser):
    # argparse's default exit(2) collides with the missing-checkpoint code
    def error(self, message):
        raise RunError(EXIT_CONFIG, "usage", message)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="querytune",
                description="Desk-scale personalization pipeline.")
    sub = p.add_subparsers(dest="command", metavar="command")
    for name in COMMANDS:
        sp = sub.add_parser(name, description=f"Run the {name} step.")
        sp.add_argument("--config", default=None,
                        help="JSON config file merged over built-in defaults")
        sp.add_argument("--set", action="append", default=[], metavar="K=V",
                        help="dotted-path override, e.g. refine.prompt='...'")
        sp.add_argument("--jobs", type=int, default=None,
                        help="worker cap (also QUERYTUNE_JOBS)")
        if name == "eval":
            sp.add_argument("--paired", action="store_true",
                            help="run both arms and report per-query deltas")
    return p


def _apply_jobs(jobs: int | None) -> None:
    if jobs is None:
        jobs = int(os.environ.get("QUERYTUNE_JOBS", "0") or 0)
    if jobs and jobs > 0:
        for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS",
                    "MKL_NUM_THREADS"):
            os.environ.setdefault(var, str(jobs))


def _setup_log(run_dir: str) -> logging.Logger:
    log = logging.getLogger("querytune.cli")
    log.setLevel(logging.INFO)
    log.handlers.clear()
    fmt = logging.Formatter("%(asctime)s %(levelname)s %(message)s")
    fh = logging.FileHandler(os.path.join(run_dir, "log.txt"))
    fh.setFormatter(fmt)
    sh = logging.StreamHandler(sys.stderr)
    sh.setFormatter(fmt)
    log.addHandler(fh)
    log.addHandler(sh)
    log.propagate = False
    return log


def _close_log(log: logging.Logger) -> None:
    for h in list(log.handlers):
        h.close()
        log.removeHandler(h)


def _emit_error(err: RunError, run_dir: str | None) -> None:
    payload = err.payload()
    sys.stderr.write(json.dumps(payload) + "\n")
    if run_dir is not None:
        try:
            _write_json(os.path.join(run_dir, "error.json"), payload)
        except OSError:
            pass


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    run_dir = None
    log = None
    try:
        parser = build_parser()
        args = parser.parse_args(argv)
        if args.command is None:
            raise RunError(EXIT_CONFIG, "usage",
                           f"choose a command: {', '.join(COMMANDS)}")
        _apply_jobs(args.jobs)
        cfg = load_config(args.config, args.set)
        if getattr(args, "paired", False):
            cfg["eval"]["paired"] = True
        _check_required(cfg, args.command)

        started = time.time()
        run_dir = _make_run_dir(cfg, args.command)
        log = _setup_log(run_dir)
        _write_json(os.path.join(run_dir, "config.json"),
                    {"command": args.command, **cfg})
        log.info("run directory %s", run_dir)

        report = HANDLERS[args.command](cfg, run_dir, log)
        _write_json(os.path.join(run_dir, "report.json"), report)
        _write_json(os.path.join(run_dir, "meta.json"),
                    {"command": args.command, "argv": argv,
                     "started_utc": time.strftime(
                         "%Y-%m-%dT%H:%M:%SZ", time.gmtime(started)),
                     "wall_seconds": round(time.time() - started, 3)})
        log.info("done")
        print(run_dir)
        return EXIT_OK
    except RunError as e:
        _emit_error(e, run_dir)
        return e.code
    except Exception as e:  # noqa: BLE001 - boundary: report, do not crash
        err = RunError(EXIT_RUNTIME, "runtime", f"{type(e).__name__}: {e}")
        _emit_error(err, run_dir)
        return EXIT_RUNTIME
    finally:
        if log is not None:
            _close_log(log)


if __name__ == "__main__":
    sys.exit(main())
