"""Binary target masks: algebra, file I/O and mask providers.

A target mask is an ``H x W`` uint8 array in {0, 1} where 1 marks the target
attribute. Mask files are single-channel PNGs holding {0, 255}.
"""

from __future__ import annotations

import json
import subprocess
import tempfile
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Protocol

import numpy as np
from PIL import Image

from .exceptions import InputError, MissingMaskError, ProviderError
from .validation import check_image, check_mask


@dataclass(frozen=True)
class SegmenterRequest:
    image: np.ndarray
    attribute: str
    sample_id: str | None = None

    def __post_init__(self):
        if not isinstance(self.attribute, str) or not self.attribute.strip():
            raise InputError("attribute must be a non-empty string")

    @property
    def prompt(self) -> str:
        return f"Photo of a {self.attribute}"


class MaskProvider(Protocol):
    def __call__(self, request: SegmenterRequest) -> np.ndarray: ...


def complement(mask) -> np.ndarray:
    m = check_mask(mask)
    return (1 - m).astype(np.uint8)


def union(masks) -> np.ndarray:
    masks = [check_mask(m) for m in masks]
    if not masks:
        raise InputError("cannot take the union of zero masks")
    out = masks[0].copy()
    for m in masks[1:]:
        if m.shape != out.shape:
            raise InputError(f"mask shapes differ: {m.shape} vs {out.shape}")
        out |= m
    return out


def apply_mask(image, mask) -> np.ndarray:
    """Elementwise product of ``image`` with ``mask`` broadcast over channels.

    Masked-out pixels are exactly 0.
    """
    img = np.asarray(image, dtype=np.float64)
    if img.ndim != 3:
        raise InputError(f"expected an (H, W, C) image, got shape {img.shape}")
    m = check_mask(mask, img.shape)
    return np.where(m[..., None] == 1, img, 0.0)


def mask_to_patch_grid(mask, patch_size: int, threshold: float = 0.5) -> np.ndarray:
    """Reduce a pixel mask to a patch grid.

    A patch is set iff the fraction of 1-pixels inside it is at least
    ``threshold``.
    """
    m = check_mask(mask)
    if not 0.0 < threshold <= 1.0:
        raise InputError(f"threshold must lie in (0, 1], got {threshold}")
    h, w = m.shape
    if patch_size <= 0 or h % patch_size or w % patch_size:
        raise InputError(f"mask size {h}x{w} is not divisible by patch size {patch_size}")
    counts = m.reshape(h // patch_size, patch_size, w // patch_size, patch_size).sum(axis=(1, 3))
    # integer comparison avoids float rounding at the threshold
    return (counts >= threshold * patch_size * patch_size).astype(np.uint8)


def save_mask(mask, path) -> None:
    m = check_mask(mask)
    Image.fromarray((m * 255).astype(np.uint8), mode="L").save(path, format="PNG")


def load_mask(path) -> np.ndarray:
    with Image.open(path) as im:
        arr = np.asarray(im.convert("L"))
    if not np.all((arr == 0) | (arr == 255)):
        raise InputError(f"{path}: mask pixels must be 0 or 255")
    return (arr == 255).astype(np.uint8)


class OracleMaskProvider:
    """Ground-truth lookup keyed by ``(sample_id, attribute)``.

    Stored masks are returned verbatim (as copies).
    """

    def __init__(self, store: Mapping[tuple[str, str], np.ndarray] | None = None):
        self._store = {k: check_mask(v) for k, v in (store or {}).items()}

    @classmethod
    def from_samples(cls, samples, attribute: str) -> "OracleMaskProvider":
        return cls({(s.id, attribute): s.target_mask for s in samples if s.target_mask is not None})

    def add(self, sample_id: str, attribute: str, mask) -> None:
        self._store[(sample_id, attribute)] = check_mask(mask)

    def __call__(self, request: SegmenterRequest) -> np.ndarray:
        key = (request.sample_id, request.attribute)
        if key not in self._store:
            raise MissingMaskError(
                f"no stored mask for sample {request.sample_id!r}, attribute {request.attribute!r}"
            )
        return self._store[key].copy()


class ExternalSegmenterProvider:
    """Runs an external detector + segmenter as a subprocess.

    The command receives the path to a JSON request ``{"image_path", "attribute"}``
    as its last argument and must print a JSON response on stdout: either
    ``{"mask_path": ...}``, ``{"mask_paths": [...]}`` (masks are unioned) or
    ``{"error": ...}``. One subprocess per request, so concurrent calls are
    limited only by the external tool.
    """

    def __init__(self, command: list[str], timeout: float = 120.0, workdir=None):
        if not command:
            raise InputError("segmenter command must not be empty")
        self.command = list(command)
        self.timeout = timeout
        self.workdir = workdir

    def __call__(self, request: SegmenterRequest) -> np.ndarray:
        image = check_image(request.image)
        with tempfile.TemporaryDirectory(dir=self.workdir) as tmp:
            tmp = Path(tmp)
            from .data import save_image

            image_path = tmp / "image.png"
            save_image(image, image_path)
            req_path = tmp / "request.json"
            req_path.write_text(json.dumps({"image_path": str(image_path),
                                            "attribute": request.attribute}))
            try:
                proc = subprocess.run(self.command + [str(req_path)], capture_output=True,
                                      text=True, timeout=self.timeout, check=False)
            except (OSError, subprocess.TimeoutExpired) as exc:
                raise ProviderError(f"segmenter unavailable: {exc}") from exc
            if proc.returncode != 0:
                raise ProviderError(f"segmenter exited with code {proc.returncode}: {proc.stderr.strip()}")
            try:
                response = json.loads(proc.stdout)
            except json.JSONDecodeError as exc:
                raise ProviderError(f"segmenter returned invalid JSON: {exc}") from exc
            if "error" in response:
                raise ProviderError(f"segmenter error: {response['error']}")
            paths = response.get("mask_paths") or ([response["mask_path"]] if "mask_path" in response else [])
            if not paths:
                raise ProviderError("segmenter response has no mask_path")
            mask = union([load_mask(p) for p in paths])
        if mask.shape != image.shape[:2]:
            raise ProviderError(f"segmenter mask shape {mask.shape} does not match image {image.shape[:2]}")
        return mask


def get_target_mask(request: SegmenterRequest, provider: MaskProvider) -> np.ndarray:
    """Resolve the target mask for ``request`` and check it against the image."""
    mask = check_mask(provider(request))
    if mask.shape != np.asarray(request.image).shape[:2]:
        raise InputError(f"mask shape {mask.shape} does not match image shape "
                         f"{np.asarray(request.image).shape[:2]}")
    return mask
