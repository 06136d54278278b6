"""Synthetic spuriously-correlated shape dataset, manifests and stratified splits.

Class 0 ("landbird") is a tan object, class 1 ("waterbird") a pale grey one.
Per-sample colour jitter makes the two overlap, so the object alone is an
imperfect cue. The silhouette (square or disk) is drawn independently of the
class so that the hole left by masking the object out carries no label
information.
Background 0 is a blotchy green "land" texture, background 1 a striped blue
"water" texture. A sample's background matches its class with
probability ``correlation``, assigned by exact counting so that minority groups
have deterministic sizes. Group ids are ``2 * class_label + background_label``.
"""

from __future__ import annotations

import csv
import math
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from .exceptions import GenerationError, InputError, ManifestParseError, StratificationError
from .masks import load_mask, save_mask

CLASS_NAMES = ("landbird", "waterbird")
BACKGROUND_NAMES = ("land", "water")
GROUP_NAMES = tuple(f"{c}_on_{b}" for c in CLASS_NAMES for b in BACKGROUND_NAMES)
SPLITS = ("train", "val", "test")
MANIFEST_COLUMNS = ("image_path", "mask_path", "class_label", "group_id", "split")

_FG_COLORS = (np.array([0.62, 0.56, 0.48]), np.array([0.70, 0.66, 0.62]))
_FG_JITTER = 0.08
_BG_COLORS = (np.array([0.36, 0.50, 0.20]), np.array([0.16, 0.36, 0.70]))


@dataclass
class Sample:
    image: np.ndarray
    class_label: int
    group_id: int
    target_mask: np.ndarray | None
    id: str
    split: str | None = None

    @property
    def background_label(self) -> int:
        return self.group_id % 2

    @property
    def has_mask(self) -> bool:
        return self.target_mask is not None

    def same_as(self, other: "Sample") -> bool:
        """Bit-exact equality of all fields."""
        if (self.id, self.class_label, self.group_id) != (other.id, other.class_label, other.group_id):
            return False
        if self.image.shape != other.image.shape or not np.array_equal(self.image, other.image):
            return False
        if (self.target_mask is None) != (other.target_mask is None):
            return False
        return self.target_mask is None or np.array_equal(self.target_mask, other.target_mask)


@dataclass(frozen=True)
class GeneratorParams:
    n_samples: int = 1000
    image_size: int = 32
    correlation: float = 0.9
    class_balance: float = 0.5
    target_coverage: float = 0.25
    seed: int = 0

    def __post_init__(self):
        if self.n_samples < 0:
            raise GenerationError("n_samples must be non-negative")
        if not 0.5 <= self.correlation <= 1.0:
            raise GenerationError("correlation must lie in [0.5, 1]")
        if not 0.0 <= self.class_balance <= 1.0:
            raise GenerationError("class_balance must lie in [0, 1]")
        if not 0.0 < self.target_coverage < 1.0:
            raise GenerationError("target_coverage must lie in (0, 1)")
        if self.image_size < 8:
            raise GenerationError("image_size must be at least 8")


def group_id(class_label: int, background_label: int) -> int:
    return 2 * int(class_label) + int(background_label)


def group_counts(params: GeneratorParams) -> tuple[int, int, int, int]:
    """Exact per-group sizes implied by ``params``, indexed by group id.

    Raises :class:`GenerationError` when a group with positive expected
    proportion rounds to zero samples.
    """
    n = params.n_samples
    n1 = int(round(n * params.class_balance))
    per_class = (n - n1, n1)
    counts = [0, 0, 0, 0]
    for c, nc in enumerate(per_class):
        aligned = int(round(nc * params.correlation))
        counts[group_id(c, c)] = aligned
        counts[group_id(c, 1 - c)] = nc - aligned
    if n > 0:
        class_p = (1.0 - params.class_balance, params.class_balance)
        for c in (0, 1):
            for bg in (0, 1):
                p = class_p[c] * (params.correlation if bg == c else 1.0 - params.correlation)
                gid = group_id(c, bg)
                if p > 0 and counts[gid] == 0:
                    raise GenerationError(
                        f"group {gid} ({GROUP_NAMES[gid]}) would be empty with "
                        f"n_samples={n}; increase n_samples or change proportions"
                    )
    return tuple(counts)


def _smooth_noise(rng, size: int, cells: int) -> np.ndarray:
    coarse = rng.standard_normal((cells, cells))
    img = Image.fromarray(coarse.astype(np.float32), mode="F").resize((size, size), Image.BILINEAR)
    return np.asarray(img, dtype=np.float64)


def _background(rng, size: int, bg: int) -> np.ndarray:
    base = _BG_COLORS[bg] + rng.uniform(-0.04, 0.04, 3)
    if bg == 0:
        tex = 0.10 * _smooth_noise(rng, size, 4)
        img = base + tex[..., None] * np.array([0.8, 1.0, 0.5])
    else:
        yy = np.arange(size)[:, None] * np.ones((1, size))
        period = rng.uniform(5.0, 8.0)
        waves = 0.09 * np.sin(2 * np.pi * yy / period + rng.uniform(0, 2 * np.pi))
        img = base + waves[..., None] * np.array([0.6, 0.8, 1.0])
    img = img + rng.normal(0.0, 0.02, (size, size, 3))
    return img


def _shape_mask(rng, size: int, shape: int, coverage: float) -> np.ndarray:
    area = coverage * size * size
    mask = np.zeros((size, size), dtype=np.uint8)
    if shape == 0:
        side = max(1, int(round(math.sqrt(area))))
        top, left = rng.integers(0, size - side + 1, 2)
        mask[top:top + side, left:left + side] = 1
    else:
        r = math.sqrt(area / math.pi)
        span = int(math.ceil(2 * r))
        top, left = rng.integers(0, size - span + 1, 2)
        cy, cx = top + span / 2.0, left + span / 2.0
        yy, xx = np.mgrid[0:size, 0:size]
        mask[((yy + 0.5 - cy) ** 2 + (xx + 0.5 - cx) ** 2) <= r * r] = 1
    return mask


def _quantize(img: np.ndarray) -> np.ndarray:
    return np.round(np.clip(img, 0.0, 1.0) * 255.0) / 255.0


def make_sample(rng, size: int, cls: int, bg: int, coverage: float, sample_id: str) -> Sample:
    background = _background(rng, size, bg)
    mask = _shape_mask(rng, size, int(rng.integers(0, 2)), coverage)
    fg_color = _FG_COLORS[cls] + rng.uniform(-_FG_JITTER, _FG_JITTER, 3)
    foreground = fg_color + rng.normal(0.0, 0.02, (size, size, 3))
    image = np.where(mask[..., None] == 1, foreground, background)
    return Sample(_quantize(image), cls, group_id(cls, bg), mask, sample_id)


def generate(params: GeneratorParams) -> list[Sample]:
    """Generate a seeded dataset; identical params give bit-identical samples."""
    counts = group_counts(params)
    if params.n_samples > 0:
        empty = [GROUP_NAMES[g] for g, c in enumerate(counts) if c == 0]
        if empty:
            warnings.warn(f"empty groups at correlation={params.correlation}: {', '.join(empty)}",
                          stacklevel=2)
    rng = np.random.default_rng(params.seed)
    labels = [(g // 2, g % 2) for g, c in enumerate(counts) for _ in range(c)]
    order = rng.permutation(len(labels))
    width = max(4, len(str(params.n_samples)))
    samples = []
    for i, idx in enumerate(order):
        cls, bg = labels[idx]
        samples.append(make_sample(rng, params.image_size, cls, bg, params.target_coverage,
                                   f"s{i:0{width}d}"))
    return samples


def split(samples: list[Sample], fractions=(0.6, 0.2, 0.2), seed: int = 0):
    """Group-stratified, seed-deterministic train/val/test split.

    Within each group the per-split counts follow the largest-remainder rule,
    so every split holds its group's share to within one sample. Order inside
    each split follows the input order.
    """
    fractions = tuple(float(f) for f in fractions)
    if len(fractions) != 3 or any(f < 0 for f in fractions) or not math.isclose(sum(fractions), 1.0):
        raise InputError(f"fractions must be three non-negative numbers summing to 1, got {fractions}")
    active = sum(f > 0 for f in fractions)
    rng = np.random.default_rng(seed)
    assignment = np.empty(len(samples), dtype=np.int64)
    groups = sorted({s.group_id for s in samples})
    for g in groups:
        idx = np.array([i for i, s in enumerate(samples) if s.group_id == g])
        if len(idx) < active:
            raise StratificationError(
                f"group {g} has {len(idx)} samples, fewer than the {active} non-empty splits"
            )
        exact = np.array(fractions) * len(idx)
        counts = np.floor(exact).astype(int)
        remainder = len(idx) - counts.sum()
        for k in np.argsort(-(exact - counts), kind="stable")[:remainder]:
            counts[k] += 1
        perm = idx[rng.permutation(len(idx))]
        labels = np.repeat(np.arange(3), counts)
        assignment[perm] = labels
    out = ([], [], [])
    for i, s in enumerate(samples):
        out[assignment[i]].append(s)
    return out


def save_image(image: np.ndarray, path) -> None:
    arr = np.round(np.asarray(image) * 255.0).astype(np.uint8)
    Image.fromarray(arr, mode="RGB").save(path, format="PNG")


def load_image(path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0


def write_manifest(samples: list[Sample], directory, splits: dict[str, str] | None = None) -> Path:
    """Write images, masks and ``manifest.csv`` under ``directory``.

    ``splits`` maps sample id to split name; otherwise each sample's own
    ``split`` attribute is used, defaulting to ``test``.
    """
    directory = Path(directory)
    (directory / "images").mkdir(parents=True, exist_ok=True)
    (directory / "masks").mkdir(parents=True, exist_ok=True)
    manifest = directory / "manifest.csv"
    with open(manifest, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(MANIFEST_COLUMNS)
        for s in samples:
            image_rel = f"images/{s.id}.png"
            save_image(s.image, directory / image_rel)
            mask_rel = ""
            if s.target_mask is not None:
                mask_rel = f"masks/{s.id}.png"
                save_mask(s.target_mask, directory / mask_rel)
            name = (splits or {}).get(s.id, s.split or "test")
            writer.writerow([image_rel, mask_rel, s.class_label, s.group_id, name])
    return manifest


def load_manifest(path, split_name: str | None = None) -> list[Sample]:
    """Load samples listed in a manifest CSV.

    Paths are resolved relative to the manifest's directory. Rows with an
    empty ``mask_path`` produce mask-less samples.
    """
    path = Path(path)
    root = path.parent
    samples = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            return []
        if tuple(h.strip() for h in header) != MANIFEST_COLUMNS:
            raise ManifestParseError(f"{path}:1: expected header {','.join(MANIFEST_COLUMNS)}")
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(MANIFEST_COLUMNS):
                raise ManifestParseError(f"{path}:{lineno}: expected 5 fields, got {len(row)}")
            image_rel, mask_rel, cls, gid, name = (v.strip() for v in row)
            try:
                cls, gid = int(cls), int(gid)
            except ValueError:
                raise ManifestParseError(f"{path}:{lineno}: class_label and group_id must be integers") from None
            if name not in SPLITS:
                raise ManifestParseError(f"{path}:{lineno}: unknown split {name!r}")
            if split_name is not None and name != split_name:
                continue
            image_path = root / image_rel
            if not image_path.is_file():
                raise FileNotFoundError(f"{path}:{lineno}: image not found: {image_path}")
            mask = None
            if mask_rel:
                mask_path = root / mask_rel
                if not mask_path.is_file():
                    raise FileNotFoundError(f"{path}:{lineno}: mask not found: {mask_path}")
                mask = load_mask(mask_path)
            samples.append(Sample(load_image(image_path), cls, gid, mask, Path(image_rel).stem, name))
    return samples
