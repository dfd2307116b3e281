"""Per-query refinement of personalized text-to-image models.

A self-contained latent-diffusion stack small enough to train on a desk:
backbone, lightweight personalization adapters, attention-feature
extraction, diffusion-feature correspondence, the refinement objective,
and a paired evaluation harness.  Everything runs on numpy float64 with
deterministic seeds end to end.
"""

from .adapters import (AdapterParams, TrainConfig, gradient_step,
                       init_adapters, personalize_base)
from .backbone import (CONCEPT_WORD, LATENT, PIXEL, Latent, Model,
                       ModelConfig, NoiseSchedule, Prompt, SamplerConfig,
                       Vocabulary, forward_diffuse)
from .corpus import (ConceptSpec, Corpus, load_corpus, load_png, make_corpus,
                     novel_concept, palette_concepts, render, save_png)
from .embedders import AttributeEmbedder, HistogramMomentEmbedder
from .errors import (CheckpointError, EmptyMaskError, EmptyMatchError,
                     InvalidArgument, NumericalFailure)
from .evaluate import (AlignmentReport, Query, evaluate_suite,
                       image_alignment, text_alignment)
from .features import (AppearanceFeatures, CrossAttnMaps, ExtractionConfig,
                       ObjectMask, extract, extract_reference, object_mask)
from .losses import (LossReport, combine, combined_objective, loss_ca,
                     loss_ldm, loss_sa)
from .matching import MatchConfig, MatchSet, dift_descriptors, match
from .refine import (RefineConfig, RefineResult, refine_query,
                     refine_query_multiT)

__version__ = "0.1.0"

__all__ = [
    "AdapterParams", "AlignmentReport", "AppearanceFeatures",
    "AttributeEmbedder", "CONCEPT_WORD", "CheckpointError", "ConceptSpec",
    "Corpus", "CrossAttnMaps", "EmptyMaskError", "EmptyMatchError",
    "ExtractionConfig", "HistogramMomentEmbedder", "InvalidArgument",
    "LATENT", "Latent", "LossReport", "MatchConfig", "MatchSet", "Model",
    "ModelConfig", "NoiseSchedule", "NumericalFailure", "ObjectMask",
    "PIXEL", "Prompt", "Query", "RefineConfig", "RefineResult",
    "SamplerConfig", "TrainConfig", "Vocabulary", "combine",
    "combined_objective", "dift_descriptors", "evaluate_suite", "extract",
    "extract_reference", "forward_diffuse", "gradient_step",
    "image_alignment", "init_adapters", "load_corpus", "load_png",
    "loss_ca", "loss_ldm", "loss_sa", "make_corpus", "match",
    "novel_concept", "object_mask", "palette_concepts", "personalize_base",
    "refine_query", "refine_query_multiT", "render", "save_png",
    "text_alignment",
]
