"""Brief contrastive fitting that makes the reference encoder exploit shortcuts.

Pretrained vision-language models arrive already biased; the reference
encoder starts random, so it is fitted for a few epochs on a spuriously
correlated training split. Images are pulled toward the text embedding of
their class prompt (text tower frozen), which is enough for the encoder to
pick up the dominant background cue alongside the target shape.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
import torch

from .encoder import DTYPE, ToyViTEncoder, image_forward, text_forward
from .exceptions import InputError

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class BiasInductionParams:
    epochs: int = 10
    learning_rate: float = 3e-3
    batch_size: int = 32
    logit_scale: float = 30.0
    seed: int = 0
    trainable: str = "image"  # "image" (whole image tower) or "projection"

    def __post_init__(self):
        if self.epochs < 0 or self.batch_size < 1:
            raise InputError("epochs must be >= 0 and batch_size >= 1")
        if self.trainable not in ("image", "projection"):
            raise InputError("trainable must be 'image' or 'projection'")


def _trainable_names(encoder: ToyViTEncoder, mode: str) -> list[str]:
    text_only = {"tok_emb", "txt_proj"}
    if mode == "projection":
        return ["img_proj"]
    return [k for k in encoder.params if k not in text_only]


def induce_bias(encoder: ToyViTEncoder, images, labels, prompts,
                params: BiasInductionParams = BiasInductionParams()) -> ToyViTEncoder:
    """Return a new encoder fitted to align images with their class prompt."""
    images = np.asarray(images, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if images.shape[0] != labels.shape[0]:
        raise InputError("images and labels differ in length")
    if len(prompts) < 2:
        raise InputError("need at least two class prompts")
    if images.shape[0] == 0 or params.epochs == 0:
        return ToyViTEncoder(encoder.config, encoder.params)

    torch_params = {k: v.clone() for k, v in encoder.params.items()}
    names = _trainable_names(encoder, params.trainable)
    for k in names:
        torch_params[k].requires_grad_(True)
    with torch.no_grad():
        text = torch.stack([text_forward(torch_params, encoder.tokenize(p)) for p in prompts])

    opt = torch.optim.Adam([torch_params[k] for k in names], lr=params.learning_rate)
    steps = params.epochs * -(-images.shape[0] // params.batch_size)
    sched = torch.optim.lr_scheduler.CosineAnnealingLR(opt, T_max=steps)
    gen = torch.Generator().manual_seed(int(params.seed))
    x_all = torch.from_numpy(images)
    y_all = torch.from_numpy(labels)
    n = x_all.shape[0]
    for epoch in range(params.epochs):
        order = torch.randperm(n, generator=gen)
        total = 0.0
        for start in range(0, n, params.batch_size):
            idx = order[start:start + params.batch_size]
            z = image_forward(torch_params, encoder.config, x_all[idx])
            logits = params.logit_scale * z @ text.T
            loss = torch.nn.functional.cross_entropy(logits, y_all[idx])
            opt.zero_grad()
            loss.backward()
            opt.step()
            sched.step()
            total += float(loss.detach()) * len(idx)
        logger.debug("bias induction epoch %d: loss %.4f", epoch, total / n)

    fitted = {k: v.detach().to(DTYPE) for k, v in torch_params.items()}
    return ToyViTEncoder(encoder.config, fitted)
