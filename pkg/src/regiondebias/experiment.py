"""End-to-end evaluation on the synthetic benchmark: baseline, ablations, correlation, attention."""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .data import GeneratorParams, Sample, generate, split
from .debias import VARIANTS, DebiasConfig, DebiasResult, debias_batch, predict_from_similarities, \
    prompt_embeddings
from .encoder import EncoderConfig, ToyViTEncoder, VisionTextEncoder
from .exceptions import InputError, MissingMaskError, UndefinedCorrelationError
from .masks import apply_mask, complement, mask_to_patch_grid
from .metrics import DeltaPair, GroupedPrediction, GroupMetrics, attention_iou, correlation, group_metrics
from .training import BiasInductionParams, induce_bias

logger = logging.getLogger(__name__)

ZERO_SHOT = "zero_shot"
ALL_VARIANTS = (ZERO_SHOT,) + VARIANTS
DEFAULT_FRACTIONS = (0.5, 0.1, 0.4)
CHUNK_SIZE = 64


@dataclass(frozen=True)
class BenchmarkConfig:
    """Synthetic benchmark: dataset, split and the bias-induced reference encoder."""

    generator: GeneratorParams = GeneratorParams()
    fractions: tuple[float, float, float] = DEFAULT_FRACTIONS
    encoder: EncoderConfig = EncoderConfig()
    bias: BiasInductionParams = BiasInductionParams()

    def with_seed(self, seed: int) -> "BenchmarkConfig":
        from dataclasses import replace
        return replace(self, generator=replace(self.generator, seed=seed),
                       encoder=replace(self.encoder, seed=seed), bias=replace(self.bias, seed=seed))


@dataclass
class Benchmark:
    train: list[Sample]
    val: list[Sample]
    test: list[Sample]
    encoder: ToyViTEncoder


def build_benchmark(config: BenchmarkConfig, prompts: Sequence[str]) -> Benchmark:
    samples = generate(config.generator)
    train, val, test = split(samples, config.fractions, config.generator.seed)
    base = ToyViTEncoder(config.encoder)
    if train:
        x = np.stack([s.image for s in train])
        y = np.array([s.class_label for s in train])
        encoder = induce_bias(base, x, y, prompts, config.bias)
    else:
        encoder = base
    return Benchmark(train, val, test, encoder)


def _chunks(n: int, size: int) -> list[slice]:
    return [slice(i, min(i + size, n)) for i in range(0, n, size)]


def _map_chunks(fn, n: int, workers: int, size: int = CHUNK_SIZE) -> list:
    """Apply ``fn`` to fixed-size index chunks and concatenate results in input order.

    Chunk boundaries do not depend on ``workers``, and every per-sample
    computation is independent of its chunk, so outputs are identical for any
    worker count.
    """
    parts = _chunks(n, size)
    if workers <= 1 or len(parts) <= 1:
        results = [fn(p) for p in parts]
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(fn, parts))
    return [r for part in results for r in part]


def _require_masks(samples: Sequence[Sample]) -> None:
    missing = [s.id for s in samples if s.target_mask is None or not np.any(s.target_mask)]
    if missing:
        shown = ", ".join(missing[:10]) + (" ..." if len(missing) > 10 else "")
        raise MissingMaskError(f"{len(missing)} samples lack a target mask: {shown}")


def run_variant(samples: Sequence[Sample], variant: str, config: DebiasConfig,
                encoder: VisionTextEncoder, workers: int = 1) -> list[DebiasResult]:
    """Classify ``samples`` with one variant; ``zero_shot`` uses raw images and needs no mask."""
    if variant not in ALL_VARIANTS:
        raise InputError(f"unknown variant {variant!r}; expected one of {ALL_VARIANTS}")
    if not samples:
        return []
    text = prompt_embeddings(encoder, config.prompts)
    images = np.stack([s.image for s in samples])
    keys = [s.id for s in samples]

    if variant == ZERO_SHOT:
        def fn(sl):
            z = encoder.encode_images(images[sl])
            sims = z @ (text / np.linalg.norm(text, axis=1, keepdims=True)).T
            preds = predict_from_similarities(sims)
            return [DebiasResult(images[sl][k], int(preds[k]), [float(v) for v in sims[k]], None,
                                 None, ZERO_SHOT, keys[sl][k]) for k in range(len(preds))]
        return _map_chunks(fn, len(samples), workers)

    _require_masks(samples)
    masks = np.stack([s.target_mask for s in samples]).astype(np.uint8)

    def fn(sl):
        return debias_batch(images[sl], masks[sl], config, encoder, variant, keys[sl], text)
    return _map_chunks(fn, len(samples), workers)


def score(samples: Sequence[Sample], results: Sequence[DebiasResult],
          groups: Sequence[int] | None = None) -> GroupMetrics:
    preds = [GroupedPrediction(r.predicted_class, s.class_label, s.group_id)
             for s, r in zip(samples, results)]
    return group_metrics(preds, groups)


def delta_pairs(samples: Sequence[Sample], encoder: VisionTextEncoder, prompts: Sequence[str],
                workers: int = 1) -> list[DeltaPair]:
    """Similarity differences between the first two prompts for the non-target region and the full image."""
    if len(prompts) < 2:
        raise InputError("delta analysis needs at least two prompts")
    _require_masks(samples)
    text = prompt_embeddings(encoder, prompts[:2])
    text = text / np.linalg.norm(text, axis=1, keepdims=True)
    images = np.stack([s.image for s in samples])
    bgs = np.stack([apply_mask(s.image, complement(s.target_mask)) for s in samples])

    def fn(sl):
        s_bg = encoder.encode_images(bgs[sl]) @ text.T
        s_full = encoder.encode_images(images[sl]) @ text.T
        return [DeltaPair(float(a[0] - a[1]), float(b[0] - b[1])) for a, b in zip(s_bg, s_full)]
    return _map_chunks(fn, len(samples), workers)


def safe_correlation(pairs: Sequence[DeltaPair]) -> float | None:
    try:
        return correlation(pairs)
    except UndefinedCorrelationError as exc:
        logger.warning("correlation undefined: %s", exc)
        return None


@dataclass
class AttentionRecord:
    sample_id: str
    before: np.ndarray
    after: np.ndarray
    target_patches: np.ndarray
    iou_before: float
    iou_after: float
    empty_target: bool


def attention_records(samples: Sequence[Sample], results: Sequence[DebiasResult],
                      encoder: VisionTextEncoder, patch_threshold: float = 0.5,
                      workers: int = 1) -> list[AttentionRecord]:
    """CLS attention maps on the original and the debiased image, with their Attention-IoU."""
    _require_masks(samples)

    def one(k: int) -> AttentionRecord:
        s, r = samples[k], results[k]
        before = encoder.extract_cls_attention(s.image)
        after = encoder.extract_cls_attention(r.reconstructed)
        patches = mask_to_patch_grid(s.target_mask, encoder.patch_size, patch_threshold)
        b = attention_iou(before, patches)
        a = attention_iou(after, patches)
        return AttentionRecord(s.id, before, after, patches, b.iou, a.iou, b.empty_target)

    return _map_chunks(lambda sl: [one(k) for k in range(sl.start, sl.stop)], len(samples), workers)


def mean_iou(records: Sequence[AttentionRecord], which: str = "after") -> float | None:
    vals = [getattr(r, f"iou_{which}") for r in records]
    return float(np.mean(vals)) if vals else None


@dataclass
class SeedReport:
    seed: int
    metrics: dict[str, GroupMetrics] = field(default_factory=dict)
    correlation: float | None = None
    iou_before: float | None = None
    iou_after: float | None = None
    converged_fraction: float | None = None


def evaluate_seed(bench_config: BenchmarkConfig, config: DebiasConfig, seed: int,
                  variants: Sequence[str] = ALL_VARIANTS, workers: int = 1) -> SeedReport:
    """Build the seeded benchmark and evaluate all requested variants on its test split."""
    bench = build_benchmark(bench_config.with_seed(seed), config.prompts)
    test = bench.test
    groups = sorted({s.group_id for s in test})
    report = SeedReport(seed)
    full_results = None
    for v in variants:
        res = run_variant(test, v, config, bench.encoder, workers)
        report.metrics[v] = score(test, res, groups)
        if v == "full":
            full_results = res
            report.converged_fraction = float(np.mean([bool(r.converged) for r in res]))
    report.correlation = safe_correlation(delta_pairs(test, bench.encoder, config.prompts, workers))
    if full_results is not None:
        recs = attention_records(test, full_results, bench.encoder, workers=workers)
        report.iou_before = mean_iou(recs, "before")
        report.iou_after = mean_iou(recs, "after")
    return report
