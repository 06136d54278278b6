"""Input validation helpers shared by the estimators and pipeline functions."""

from __future__ import annotations

import numpy as np

from .exceptions import InputError


def check_image(image, *, size: int | None = None, patch_size: int | None = None) -> np.ndarray:
    """Validate an ``H x W x C`` image in [0, 1] and return it as float64.

    Parameters
    ----------
    image : array-like of shape (H, W, C)
    size : int, optional
        Required height and width.
    patch_size : int, optional
        Height and width must be multiples of this.
    """
    arr = np.asarray(image, dtype=np.float64)
    if arr.ndim != 3:
        raise InputError(f"expected an (H, W, C) image, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise InputError("image contains non-finite values")
    if arr.size and (arr.min() < 0.0 or arr.max() > 1.0):
        raise InputError(
            f"image values must lie in [0, 1], got [{arr.min():.4g}, {arr.max():.4g}]"
        )
    h, w = arr.shape[:2]
    if size is not None and (h, w) != (size, size):
        raise InputError(f"expected a {size}x{size} image, got {h}x{w}")
    if patch_size is not None and (h % patch_size or w % patch_size):
        raise InputError(f"image size {h}x{w} is not a multiple of patch size {patch_size}")
    return arr


def check_images(images, **kwargs) -> np.ndarray:
    """Validate a stack of images of shape (n, H, W, C)."""
    arr = np.asarray(images, dtype=np.float64)
    if arr.ndim == 3:
        arr = arr[None]
    if arr.ndim != 4:
        raise InputError(f"expected an (n, H, W, C) image stack, got shape {arr.shape}")
    for img in arr:
        check_image(img, **kwargs)
    return arr


def check_mask(mask, shape: tuple[int, ...] | None = None) -> np.ndarray:
    """Validate a binary ``H x W`` mask and return it as uint8 in {0, 1}."""
    arr = np.asarray(mask)
    if arr.ndim != 2:
        raise InputError(f"expected an (H, W) mask, got shape {arr.shape}")
    if arr.dtype == bool:
        arr = arr.astype(np.uint8)
    elif not np.all((arr == 0) | (arr == 1)):
        raise InputError("mask values must be exactly 0 or 1")
    arr = arr.astype(np.uint8)
    if shape is not None and arr.shape != tuple(shape[:2]):
        raise InputError(f"mask shape {arr.shape} does not match image shape {tuple(shape[:2])}")
    return arr


def check_masks(masks, n: int, shape) -> np.ndarray:
    arr = np.asarray(masks)
    if arr.ndim == 2:
        arr = arr[None]
    if arr.shape[0] != n:
        raise InputError(f"got {arr.shape[0]} masks for {n} images")
    return np.stack([check_mask(m, shape) for m in arr]) if n else arr.astype(np.uint8)


def check_prompts(prompts) -> list[str]:
    if isinstance(prompts, str):
        raise InputError("prompts must be a sequence of strings, not a single string")
    out = [str(p) for p in prompts]
    if not out:
        raise InputError("at least one prompt is required")
    for p in out:
        if not p.strip():
            raise InputError("prompts must be non-empty")
    return out
