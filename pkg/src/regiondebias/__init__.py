"""Region-level test-time debiasing for zero-shot vision-language classifiers.

The non-target region of an image is neutralized by a small pixel
perturbation that makes its embedding equally similar to every class prompt;
the original target region is then restored and the image classified
zero-shot.
"""

from .data import GeneratorParams, Sample, generate, load_manifest, split, write_manifest
from .debias import (VARIANTS, DebiasConfig, DebiasResult, PerturbationState, ablation_variant,
                     classify_zero_shot, equalization_loss, neutralize_nontarget, reconstruct,
                     run_pipeline)
from .encoder import EncoderConfig, ToyViTEncoder, VisionTextEncoder
from .estimators import RegionDebiasClassifier
from .masks import (ExternalSegmenterProvider, OracleMaskProvider, SegmenterRequest, apply_mask,
                    complement, get_target_mask, mask_to_patch_grid)
from .metrics import (DeltaPair, GroupedPrediction, attention_iou, correlation, delta_similarities,
                      emit_report, group_metrics)
from .training import BiasInductionParams, induce_bias

__version__ = "0.1.0"

__all__ = [
    "GeneratorParams", "Sample", "generate", "load_manifest", "split", "write_manifest",
    "VARIANTS", "DebiasConfig", "DebiasResult", "PerturbationState", "ablation_variant",
    "classify_zero_shot", "equalization_loss", "neutralize_nontarget", "reconstruct", "run_pipeline",
    "EncoderConfig", "ToyViTEncoder", "VisionTextEncoder", "RegionDebiasClassifier",
    "ExternalSegmenterProvider", "OracleMaskProvider", "SegmenterRequest", "apply_mask", "complement",
    "get_target_mask", "mask_to_patch_grid", "DeltaPair", "GroupedPrediction", "attention_iou",
    "correlation", "delta_similarities", "emit_report", "group_metrics", "BiasInductionParams",
    "induce_bias",
]
