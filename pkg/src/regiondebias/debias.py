"""Test-time non-target neutralization and zero-shot classification.

The pipeline for one image ``x`` with target mask ``M``:

1. ``x_bg = x * (1 - M)`` keeps only the non-target region.
2. A pixel perturbation ``delta`` supported on ``1 - M`` is optimized so that
   the embedding of ``x_bg + delta`` is equally similar to every class prompt.
3. ``x_rec = x * M + (x_bg + delta) * (1 - M)`` restores the target region.
4. ``x_rec`` is classified zero-shot by maximum cosine similarity.
"""

from __future__ import annotations

import math
import zlib
from dataclasses import dataclass, field
from itertools import combinations
from typing import Sequence

import numpy as np
import torch

from .encoder import DTYPE, VisionTextEncoder, require_gradients
from .exceptions import ConfigurationError, DegenerateSupportError, InputError, MissingMaskError, NumericalError
from .masks import SegmenterRequest, apply_mask, get_target_mask
from .validation import check_image, check_mask, check_prompts

VARIANTS = ("target_only", "noise_filled", "random_repaint", "full")
STEP_RULES = ("polyak", "fixed")


@dataclass(frozen=True)
class DebiasConfig:
    """Settings for the neutralization optimizer and the ablation variants.

    ``step_rule="polyak"`` scales each step by ``loss / |grad|^2`` (times
    ``step_size``), which makes the step independent of the encoder's gradient
    scale; ``"fixed"`` is plain gradient descent with step ``step_size``.
    """

    prompts: tuple[str, ...] = ("A photo of a landbird", "A photo of a waterbird")
    target_attribute: str = "bird"
    step_size: float = 1.0
    max_iterations: int = 500
    stop_tolerance: float = 1e-3
    noise_sigma: float = 0.1
    seed: int = 0
    step_rule: str = "polyak"

    def __post_init__(self):
        object.__setattr__(self, "prompts", tuple(check_prompts(self.prompts)))
        if not self.target_attribute or not str(self.target_attribute).strip():
            raise ConfigurationError("target_attribute must be non-empty")
        if not self.step_size > 0:
            raise ConfigurationError("step_size must be positive")
        if int(self.max_iterations) < 1:
            raise ConfigurationError("max_iterations must be >= 1")
        if not self.stop_tolerance > 0:
            raise ConfigurationError("stop_tolerance must be positive")
        if self.noise_sigma < 0:
            raise ConfigurationError("noise_sigma must be non-negative")
        if self.step_rule not in STEP_RULES:
            raise ConfigurationError(f"step_rule must be one of {STEP_RULES}")


@dataclass
class PerturbationState:
    delta: np.ndarray
    support: np.ndarray
    iterations_used: int
    final_max_pairwise_diff: float
    converged: bool
    initial_loss: float = math.nan
    final_loss: float = math.nan


@dataclass
class DebiasResult:
    reconstructed: np.ndarray
    predicted_class: int
    per_prompt_similarity: list[float]
    converged: bool | None
    state: PerturbationState | None = None
    variant: str = "full"
    sample_id: str | None = None
    target_mask: np.ndarray | None = field(default=None, repr=False)

    def to_record(self) -> dict:
        """Plain-JSON summary (no image data)."""
        return {
            "sample_id": self.sample_id,
            "variant": self.variant,
            "predicted_class": int(self.predicted_class),
            "similarities": [float(s) for s in self.per_prompt_similarity],
            "converged": self.converged,
            "iterations": None if self.state is None else int(self.state.iterations_used),
            "final_max_pairwise_diff": None if self.state is None
            else float(self.state.final_max_pairwise_diff),
        }


def equalization_loss(embedding, prompt_embeddings) -> float:
    """Sum over prompt pairs ``i < j`` of the squared cosine-similarity difference."""
    z = np.asarray(embedding, dtype=np.float64)
    t = np.atleast_2d(np.asarray(prompt_embeddings, dtype=np.float64))
    if t.shape[0] < 1:
        raise InputError("at least one prompt embedding is required")
    sims = (t @ z) / (np.linalg.norm(t, axis=1) * np.linalg.norm(z))
    return float(sum((sims[i] - sims[j]) ** 2 for i, j in combinations(range(len(sims)), 2)))


def max_pairwise_difference(similarities) -> float:
    s = np.asarray(similarities, dtype=np.float64)
    return float(s.max() - s.min()) if s.size else 0.0


def _pair_loss(sims: torch.Tensor) -> torch.Tensor:
    n = sims.shape[-1]
    if n < 2:
        return torch.zeros(sims.shape[:-1], dtype=sims.dtype)
    i, j = torch.triu_indices(n, n, offset=1)
    return ((sims[..., i] - sims[..., j]) ** 2).sum(dim=-1)


def prompt_embeddings(encoder: VisionTextEncoder, prompts: Sequence[str]) -> np.ndarray:
    return encoder.encode_texts(check_prompts(prompts))


def neutralize_batch(images: np.ndarray, nontarget_masks: np.ndarray, text_embeddings: np.ndarray,
                     config: DebiasConfig, encoder: VisionTextEncoder) -> list[PerturbationState]:
    """Optimize a support-constrained perturbation for each image in a batch.

    Samples are independent: each has its own step size and stops as soon as
    its max pairwise similarity difference drops below ``stop_tolerance``.
    After every step the perturbation is zeroed outside the support and the
    perturbed pixels are clamped into [0, 1].
    """
    require_gradients(encoder)
    images = np.asarray(images, dtype=np.float64)
    supports = np.asarray(nontarget_masks).astype(np.uint8)
    b = images.shape[0]
    if b == 0:
        return []
    for k in range(b):
        if not supports[k].any():
            raise DegenerateSupportError(f"non-target mask {k} is empty; nothing to neutralize")

    support = torch.from_numpy(supports[..., None].astype(np.float64))
    on_support = support.bool().expand(-1, -1, -1, images.shape[-1])
    x_bg = torch.from_numpy(images) * support
    text = torch.from_numpy(np.asarray(text_embeddings, dtype=np.float64))
    text = text / torch.linalg.vector_norm(text, dim=-1, keepdim=True)
    zero = torch.zeros((), dtype=DTYPE)

    delta = torch.zeros_like(x_bg)
    active = torch.ones(b, dtype=torch.bool)
    iterations = np.zeros(b, dtype=np.int64)
    spread = np.zeros(b)
    losses = np.zeros(b)
    initial = None

    for it in range(int(config.max_iterations) + 1):
        d = delta.clone().requires_grad_(True)
        z = encoder.embed_images(torch.clamp(x_bg + d, 0.0, 1.0))
        sims = z @ text.T
        loss = _pair_loss(sims)
        if not torch.all(torch.isfinite(loss)):
            raise NumericalError("non-finite equalization loss during neutralization")
        cur_spread = (sims.max(dim=-1).values - sims.min(dim=-1).values).detach().numpy()
        cur_loss = loss.detach().numpy()
        if initial is None:
            initial = cur_loss.copy()
        act = active.numpy()
        spread[act] = cur_spread[act]
        losses[act] = cur_loss[act]
        done = act & (cur_spread < config.stop_tolerance)
        active = active & ~torch.from_numpy(done)
        if it == int(config.max_iterations) or not bool(active.any()):
            break
        (grad,) = torch.autograd.grad(loss[active].sum(), d)
        with torch.no_grad():
            grad = torch.where(on_support, grad, zero)
            if config.step_rule == "polyak":
                gnorm2 = (grad ** 2).flatten(1).sum(dim=1)
                eta = torch.where(gnorm2 > 0, config.step_size * loss.detach() / gnorm2.clamp_min(1e-300),
                                  zero)
            else:
                eta = torch.full((b,), float(config.step_size), dtype=DTYPE)
            proposal = torch.clamp(x_bg + delta - eta[:, None, None, None] * grad, 0.0, 1.0) - x_bg
            proposal = torch.where(on_support, proposal, zero)
            delta = torch.where(active[:, None, None, None], proposal, delta)
        iterations[active.numpy()] += 1

    delta_np = delta.numpy()
    return [
        PerturbationState(
            delta=delta_np[k].copy(),
            support=supports[k].copy(),
            iterations_used=int(iterations[k]),
            final_max_pairwise_diff=float(spread[k]),
            converged=bool(spread[k] < config.stop_tolerance),
            initial_loss=float(initial[k]),
            final_loss=float(losses[k]),
        )
        for k in range(b)
    ]


def neutralize_nontarget(image, nontarget_mask, prompts: Sequence[str], config: DebiasConfig,
                         encoder: VisionTextEncoder) -> PerturbationState:
    """Neutralize the non-target region of a single image."""
    require_gradients(encoder)
    img = check_image(image, size=encoder.image_size)
    support = check_mask(nontarget_mask, img.shape)
    text = prompt_embeddings(encoder, prompts)
    return neutralize_batch(img[None], support[None], text, config, encoder)[0]


def perturbed_background(image, state: PerturbationState) -> np.ndarray:
    """``clamp(x_bg + delta)``, the non-target image the optimizer encodes."""
    img = np.asarray(image, dtype=np.float64)
    bg = apply_mask(img, state.support)
    return np.clip(bg + state.delta, 0.0, 1.0)


def reconstruct(image, target_mask, state: PerturbationState) -> np.ndarray:
    """Restore the original target region over the perturbed background.

    Target pixels are copied from ``image`` bit-exactly.
    """
    img = np.asarray(image, dtype=np.float64)
    m = check_mask(target_mask, img.shape)
    if not np.array_equal(check_mask(state.support, img.shape), 1 - m):
        raise InputError("perturbation support is not the complement of the target mask")
    if state.delta.shape != img.shape:
        raise InputError(f"perturbation shape {state.delta.shape} does not match image {img.shape}")
    return np.where(m[..., None] == 1, img, perturbed_background(img, state))


def _similarities(encoder: VisionTextEncoder, images: np.ndarray, text: np.ndarray) -> np.ndarray:
    z = encoder.encode_images(images)
    t = text / np.linalg.norm(text, axis=1, keepdims=True)
    return z @ t.T


def predict_from_similarities(similarities) -> np.ndarray:
    """Row-wise argmax; ties go to the lowest index."""
    return np.argmax(np.atleast_2d(np.asarray(similarities, dtype=np.float64)), axis=1)


def classify_zero_shot(image, prompts: Sequence[str], encoder: VisionTextEncoder) -> tuple[int, list[float]]:
    """Return the index of the most similar prompt and all similarities."""
    prompts = check_prompts(prompts)
    img = check_image(image, size=encoder.image_size)
    sims = _similarities(encoder, img[None], prompt_embeddings(encoder, prompts))[0]
    return int(predict_from_similarities(sims)[0]), [float(s) for s in sims]


def noise_field(shape, sigma: float, seed: int, key: str | int) -> np.ndarray:
    """Gaussian noise seeded by ``(seed, key)`` so each sample's draw is independent of batching."""
    key_int = zlib.crc32(str(key).encode())
    rng = np.random.default_rng([int(seed) & 0xFFFFFFFF, key_int])
    return rng.normal(0.0, 1.0, shape) * sigma


def variant_inputs(images: np.ndarray, target_masks: np.ndarray, variant: str, config: DebiasConfig,
                   keys: Sequence) -> np.ndarray:
    """Build the classifier inputs for the non-optimizing ablation variants.

    ``target_only`` zeroes the non-target region; ``noise_filled`` replaces it
    with clamped zero-mean Gaussian noise; ``random_repaint`` composites the
    target onto the original background plus an unoptimized Gaussian noise
    field.
    """
    out = np.empty_like(images)
    for k, (img, m) in enumerate(zip(images, target_masks)):
        keep = m[..., None] == 1
        if variant == "target_only":
            out[k] = np.where(keep, img, 0.0)
        elif variant == "noise_filled":
            noise = noise_field(img.shape, config.noise_sigma, config.seed, keys[k])
            out[k] = np.where(keep, img, np.clip(noise, 0.0, 1.0))
        elif variant == "random_repaint":
            noise = noise_field(img.shape, config.noise_sigma, config.seed + 1, keys[k])
            out[k] = np.where(keep, img, np.clip(img + noise, 0.0, 1.0))
        else:
            raise InputError(f"unknown variant {variant!r}; expected one of {VARIANTS}")
    return out


def debias_batch(images: np.ndarray, target_masks: np.ndarray, config: DebiasConfig,
                 encoder: VisionTextEncoder, variant: str = "full", keys: Sequence | None = None,
                 text_embeddings: np.ndarray | None = None) -> list[DebiasResult]:
    """Apply ``variant`` to a batch of images with known target masks."""
    if variant not in VARIANTS:
        raise InputError(f"unknown variant {variant!r}; expected one of {VARIANTS}")
    images = np.asarray(images, dtype=np.float64)
    target_masks = np.asarray(target_masks).astype(np.uint8)
    n = images.shape[0]
    keys = list(keys) if keys is not None else list(range(n))
    text = prompt_embeddings(encoder, config.prompts) if text_embeddings is None else text_embeddings
    if n == 0:
        return []
    for k in range(n):
        if not target_masks[k].any():
            raise MissingMaskError(f"target mask for sample {keys[k]!r} is empty; "
                                   f"attribute {config.target_attribute!r} not found")

    states: list[PerturbationState | None] = [None] * n
    if variant == "full":
        recon = images.copy()
        supports = 1 - target_masks
        todo = [k for k in range(n) if supports[k].any()]
        if todo:
            solved = neutralize_batch(images[todo], supports[todo], text, config, encoder)
            for k, st in zip(todo, solved):
                states[k] = st
                recon[k] = reconstruct(images[k], target_masks[k], st)
        for k in range(n):
            if states[k] is None:
                # target covers the whole image: nothing to neutralize
                states[k] = PerturbationState(np.zeros_like(images[k]), supports[k].copy(), 0, 0.0, True,
                                              0.0, 0.0)
    else:
        recon = variant_inputs(images, target_masks, variant, config, keys)

    sims = _similarities(encoder, recon, text)
    preds = predict_from_similarities(sims)
    return [
        DebiasResult(
            reconstructed=recon[k],
            predicted_class=int(preds[k]),
            per_prompt_similarity=[float(s) for s in sims[k]],
            converged=None if states[k] is None else states[k].converged,
            state=states[k],
            variant=variant,
            sample_id=None if keys[k] is None else str(keys[k]),
            target_mask=target_masks[k],
        )
        for k in range(n)
    ]


def _resolve_mask(sample, config: DebiasConfig, mask_provider) -> np.ndarray:
    request = SegmenterRequest(np.asarray(sample.image), config.target_attribute, sample.id)
    mask = get_target_mask(request, mask_provider)
    if not mask.any():
        raise MissingMaskError(f"attribute {config.target_attribute!r} not found in sample {sample.id!r}")
    return mask


def run_pipeline(sample, config: DebiasConfig, encoder: VisionTextEncoder, mask_provider) -> DebiasResult:
    """Mask lookup, neutralization, reconstruction and zero-shot classification for one sample."""
    require_gradients(encoder)
    image = check_image(sample.image, size=encoder.image_size)
    mask = _resolve_mask(sample, config, mask_provider)
    return debias_batch(image[None], mask[None], config, encoder, "full", [sample.id])[0]


def ablation_variant(sample, variant: str, config: DebiasConfig, encoder: VisionTextEncoder,
                     mask_provider) -> DebiasResult:
    """Run one of the ablation inputs (``target_only``, ``noise_filled``, ``random_repaint``, ``full``)."""
    if variant not in VARIANTS:
        raise InputError(f"unknown variant {variant!r}; expected one of {VARIANTS}")
    if variant == "full":
        return run_pipeline(sample, config, encoder, mask_provider)
    image = check_image(sample.image, size=encoder.image_size)
    mask = _resolve_mask(sample, config, mask_provider)
    return debias_batch(image[None], mask[None], config, encoder, variant, [sample.id])[0]


__all__ = [
    "VARIANTS", "DebiasConfig", "PerturbationState", "DebiasResult", "equalization_loss",
    "max_pairwise_difference", "neutralize_batch", "neutralize_nontarget", "perturbed_background",
    "reconstruct", "classify_zero_shot", "predict_from_similarities", "noise_field", "variant_inputs",
    "debias_batch", "run_pipeline", "ablation_variant",
]
