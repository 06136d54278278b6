"""Vision-text encoder abstraction and a small deterministic reference ViT.

Images are ``H x W x C`` float arrays in [0, 1]; batched torch tensors use the
same channel-last layout ``(B, H, W, C)``. All reference-encoder arithmetic is
float64 so that input gradients can be checked against finite differences.
"""

from __future__ import annotations

import json
import math
import re
from abc import ABC, abstractmethod
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Callable, Mapping

import numpy as np
import torch

from .exceptions import CapabilityError, ConfigurationError, InputError, NumericalError
from .validation import check_image

DTYPE = torch.float64
PIXEL_MEAN = 0.5
PIXEL_STD = 0.25

DEFAULT_VOCAB = (
    "[unk]", "a", "an", "the", "photo", "picture", "image", "of", "with", "on", "in",
    "waterbird", "landbird", "bird", "water", "land", "background",
    "celebrity", "person", "face", "blond", "dark", "hair", "non",
)

_TOKEN_RE = re.compile(r"[a-z0-9]+")


@dataclass(frozen=True)
class EncoderConfig:
    image_size: int = 32
    patch_size: int = 8
    embed_dim: int = 16
    num_layers: int = 2
    num_heads: int = 2
    text_vocab: tuple[str, ...] = DEFAULT_VOCAB
    seed: int = 0
    channels: int = 3
    mlp_ratio: int = 2
    init_std: float = 0.02

    def __post_init__(self):
        object.__setattr__(self, "text_vocab", tuple(self.text_vocab))
        if self.patch_size <= 0 or self.image_size <= 0:
            raise ConfigurationError("image_size and patch_size must be positive")
        if self.image_size % self.patch_size:
            raise ConfigurationError(
                f"image_size {self.image_size} is not a multiple of patch_size {self.patch_size}"
            )
        if self.embed_dim % self.num_heads:
            raise ConfigurationError("embed_dim must be divisible by num_heads")
        if self.num_layers < 1 or self.num_heads < 1:
            raise ConfigurationError("num_layers and num_heads must be >= 1")
        if "[unk]" not in self.text_vocab:
            raise ConfigurationError("text_vocab must contain the '[unk]' token")
        if len(set(self.text_vocab)) != len(self.text_vocab):
            raise ConfigurationError("text_vocab contains duplicate tokens")

    @property
    def grid_size(self) -> int:
        return self.image_size // self.patch_size

    @property
    def num_patches(self) -> int:
        return self.grid_size ** 2

    @property
    def patch_dim(self) -> int:
        return self.patch_size * self.patch_size * self.channels

    def to_dict(self) -> dict:
        d = asdict(self)
        d["text_vocab"] = list(self.text_vocab)
        return d

    @classmethod
    def from_dict(cls, d: Mapping) -> "EncoderConfig":
        return cls(**d)


def cosine_similarity(a, b) -> float:
    """Cosine similarity ``dot(a, b) / (|a| |b|)`` of two vectors."""
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    if a.shape != b.shape:
        raise InputError(f"dimension mismatch: {a.shape} vs {b.shape}")
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0.0 or nb == 0.0:
        raise NumericalError("cosine similarity is undefined for a zero-norm vector")
    return float(np.clip(np.dot(a, b) / (na * nb), -1.0, 1.0))


def average_cls_attention(rows, grid_size: int | None = None) -> np.ndarray:
    """Average CLS-to-patch attention rows over layers and heads.

    ``rows`` has shape ``(layers, heads, patches)`` (a 2-d ``(layers, patches)``
    input is treated as single-head). The mean is mass-normalized to sum to one
    and reshaped to a ``G x G`` grid.
    """
    arr = np.asarray(rows, dtype=np.float64)
    if arr.ndim == 2:
        arr = arr[:, None, :]
    if arr.ndim != 3:
        raise InputError(f"expected (layers, heads, patches) attention rows, got {arr.shape}")
    if np.any(arr < 0) or not np.all(np.isfinite(arr)):
        raise NumericalError("attention weights must be finite and non-negative")
    mean = arr.mean(axis=(0, 1))
    total = mean.sum()
    if total <= 0:
        raise NumericalError("attention map has zero mass")
    mean = mean / total
    g = grid_size if grid_size is not None else math.isqrt(mean.size)
    if g * g != mean.size:
        raise InputError(f"{mean.size} patches do not form a square grid")
    return mean.reshape(g, g)


class VisionTextEncoder(ABC):
    """Interface every encoder (reference or adapter) implements.

    Subclasses provide a differentiable batched image forward pass, a text
    forward pass and, optionally, CLS attention introspection.
    """

    supports_gradients: bool = True
    supports_attention: bool = False

    @property
    @abstractmethod
    def image_size(self) -> int: ...

    @property
    @abstractmethod
    def patch_size(self) -> int: ...

    @property
    def grid_size(self) -> int:
        return self.image_size // self.patch_size

    @abstractmethod
    def embed_images(self, images: torch.Tensor) -> torch.Tensor:
        """Map a ``(B, H, W, C)`` float64 tensor to unit-norm ``(B, D)`` embeddings."""

    @abstractmethod
    def encode_text(self, prompt: str) -> np.ndarray: ...

    def cls_attention_rows(self, image: np.ndarray) -> np.ndarray:
        """Return CLS-to-patch attention weights of shape ``(layers, heads, patches)``."""
        raise CapabilityError(f"{type(self).__name__} does not expose attention weights")

    def _check(self, image) -> np.ndarray:
        img = check_image(image)
        if img.shape[0] != self.image_size or img.shape[1] != self.image_size:
            raise ConfigurationError(
                f"image is {img.shape[0]}x{img.shape[1]}, encoder expects "
                f"{self.image_size}x{self.image_size}"
            )
        return img

    def encode_image(self, image) -> np.ndarray:
        img = self._check(image)
        with torch.no_grad():
            z = self.embed_images(torch.from_numpy(img)[None])
        return z[0].numpy()

    def encode_images(self, images) -> np.ndarray:
        imgs = np.asarray(images, dtype=np.float64)
        if imgs.shape[0] == 0:
            return np.zeros((0, 0))
        for img in imgs:
            self._check(img)
        with torch.no_grad():
            return self.embed_images(torch.from_numpy(imgs)).numpy()

    def encode_texts(self, prompts) -> np.ndarray:
        return np.stack([self.encode_text(p) for p in prompts])

    def image_gradient(self, image, loss: Callable[[torch.Tensor], torch.Tensor]) -> np.ndarray:
        """Gradient of ``loss(embedding)`` with respect to every pixel.

        ``loss`` receives the ``(D,)`` embedding as a float64 tensor and must
        return a scalar tensor. A loss that ignores the embedding has a zero
        gradient field.
        """
        if not self.supports_gradients:
            raise CapabilityError(f"{type(self).__name__} does not provide input gradients")
        img = self._check(image)
        x = torch.from_numpy(img.copy()).requires_grad_(True)
        z = self.embed_images(x[None])[0]
        if not torch.all(torch.isfinite(z)):
            raise NumericalError("non-finite values in encoder forward pass")
        value = loss(z)
        if not isinstance(value, torch.Tensor):
            value = torch.as_tensor(value, dtype=DTYPE)
        if not torch.isfinite(value):
            raise NumericalError("loss is not finite")
        if not value.requires_grad:
            return np.zeros_like(img)
        (grad,) = torch.autograd.grad(value, x, allow_unused=True)
        if grad is None:
            return np.zeros_like(img)
        return grad.numpy()

    def extract_cls_attention(self, image) -> np.ndarray:
        """CLS attention averaged over heads and layers, as a mass-normalized G x G map."""
        if not self.supports_attention:
            raise CapabilityError(f"{type(self).__name__} does not expose attention weights")
        rows = self.cls_attention_rows(self._check(image))
        return average_cls_attention(rows, self.grid_size)


def _tokenize(text: str) -> list[str]:
    return _TOKEN_RE.findall(text.lower())


def init_parameters(config: EncoderConfig) -> dict[str, torch.Tensor]:
    """Draw encoder parameters from a seeded Gaussian; identical config gives identical tensors."""
    gen = torch.Generator().manual_seed(int(config.seed))
    std = config.init_std
    d = config.embed_dim
    hidden = d * config.mlp_ratio

    def normal(*shape):
        return torch.randn(*shape, generator=gen, dtype=DTYPE) * std

    p: dict[str, torch.Tensor] = {
        "patch_w": normal(config.patch_dim, d),
        "patch_b": torch.zeros(d, dtype=DTYPE),
        "cls": normal(d),
        "pos": normal(config.num_patches + 1, d),
        "ln_pre_g": torch.ones(d, dtype=DTYPE),
        "ln_pre_b": torch.zeros(d, dtype=DTYPE),
    }
    for i in range(config.num_layers):
        p[f"blk{i}.ln1_g"] = torch.ones(d, dtype=DTYPE)
        p[f"blk{i}.ln1_b"] = torch.zeros(d, dtype=DTYPE)
        p[f"blk{i}.qkv_w"] = normal(d, 3 * d)
        p[f"blk{i}.qkv_b"] = torch.zeros(3 * d, dtype=DTYPE)
        p[f"blk{i}.out_w"] = normal(d, d)
        p[f"blk{i}.out_b"] = torch.zeros(d, dtype=DTYPE)
        p[f"blk{i}.ln2_g"] = torch.ones(d, dtype=DTYPE)
        p[f"blk{i}.ln2_b"] = torch.zeros(d, dtype=DTYPE)
        p[f"blk{i}.fc1_w"] = normal(d, hidden)
        p[f"blk{i}.fc1_b"] = torch.zeros(hidden, dtype=DTYPE)
        p[f"blk{i}.fc2_w"] = normal(hidden, d)
        p[f"blk{i}.fc2_b"] = torch.zeros(d, dtype=DTYPE)
    p["ln_f_g"] = torch.ones(d, dtype=DTYPE)
    p["ln_f_b"] = torch.zeros(d, dtype=DTYPE)
    p["img_proj"] = normal(d, d)
    p["tok_emb"] = normal(len(config.text_vocab), d)
    p["txt_proj"] = normal(d, d)
    return p


def _layer_norm(x, g, b):
    return torch.nn.functional.layer_norm(x, (x.shape[-1],), g, b, eps=1e-6)


def image_forward(params: Mapping[str, torch.Tensor], config: EncoderConfig, images: torch.Tensor,
                  return_attention: bool = False):
    """Reference ViT forward pass.

    Returns unit-norm embeddings ``(B, D)``; with ``return_attention`` also a
    ``(layers, B, heads, T, T)`` tensor of attention probabilities.
    """
    b = images.shape[0]
    ps, g, c = config.patch_size, config.grid_size, config.channels
    # (B, G, ps, G, ps, C) -> (B, G*G, ps*ps*C), row-major patch order
    patches = images.reshape(b, g, ps, g, ps, c).permute(0, 1, 3, 2, 4, 5).reshape(b, g * g, -1)
    patches = (patches - PIXEL_MEAN) / PIXEL_STD
    tokens = patches @ params["patch_w"] + params["patch_b"]
    cls = params["cls"].expand(b, 1, -1)
    x = torch.cat([cls, tokens], dim=1) + params["pos"]
    x = _layer_norm(x, params["ln_pre_g"], params["ln_pre_b"])

    heads = config.num_heads
    dh = config.embed_dim // heads
    attn_maps = []
    for i in range(config.num_layers):
        pre = f"blk{i}."
        h = _layer_norm(x, params[pre + "ln1_g"], params[pre + "ln1_b"])
        qkv = h @ params[pre + "qkv_w"] + params[pre + "qkv_b"]
        q, k, v = qkv.reshape(b, -1, 3, heads, dh).permute(2, 0, 3, 1, 4)
        attn = torch.softmax(q @ k.transpose(-1, -2) / math.sqrt(dh), dim=-1)
        if return_attention:
            attn_maps.append(attn)
        out = (attn @ v).transpose(1, 2).reshape(b, -1, config.embed_dim)
        x = x + out @ params[pre + "out_w"] + params[pre + "out_b"]
        h = _layer_norm(x, params[pre + "ln2_g"], params[pre + "ln2_b"])
        h = torch.nn.functional.gelu(h @ params[pre + "fc1_w"] + params[pre + "fc1_b"])
        x = x + h @ params[pre + "fc2_w"] + params[pre + "fc2_b"]

    cls_out = _layer_norm(x[:, 0], params["ln_f_g"], params["ln_f_b"])
    z = cls_out @ params["img_proj"]
    z = z / torch.linalg.vector_norm(z, dim=-1, keepdim=True)
    if return_attention:
        return z, torch.stack(attn_maps)
    return z


def text_forward(params: Mapping[str, torch.Tensor], token_ids: list[int]) -> torch.Tensor:
    """Bag-of-tokens mean embedding followed by a linear projection, L2-normalized."""
    emb = params["tok_emb"][torch.tensor(token_ids, dtype=torch.long)].mean(dim=0)
    z = emb @ params["txt_proj"]
    return z / torch.linalg.vector_norm(z)


class ToyViTEncoder(VisionTextEncoder):
    """Small seeded ViT image tower plus bag-of-tokens text tower.

    Parameters are frozen after construction; ``induce_bias`` in
    :mod:`regiondebias.training` returns a new encoder rather than mutating one.
    """

    supports_gradients = True
    supports_attention = True

    def __init__(self, config: EncoderConfig | None = None,
                 params: Mapping[str, torch.Tensor] | None = None):
        self.config = config if config is not None else EncoderConfig()
        expected = init_parameters(self.config)
        if params is None:
            params = expected
        else:
            missing = set(expected) - set(params)
            if missing:
                raise ConfigurationError(f"missing parameters: {sorted(missing)}")
            for name, ref in expected.items():
                if tuple(params[name].shape) != tuple(ref.shape):
                    raise ConfigurationError(
                        f"parameter {name} has shape {tuple(params[name].shape)}, "
                        f"expected {tuple(ref.shape)}"
                    )
        self.params = {k: torch.as_tensor(v, dtype=DTYPE).detach().clone() for k, v in params.items()}
        self._vocab = {tok: i for i, tok in enumerate(self.config.text_vocab)}

    def __repr__(self):
        c = self.config
        return (f"ToyViTEncoder(image_size={c.image_size}, patch_size={c.patch_size}, "
                f"embed_dim={c.embed_dim}, num_layers={c.num_layers}, seed={c.seed})")

    @property
    def image_size(self) -> int:
        return self.config.image_size

    @property
    def patch_size(self) -> int:
        return self.config.patch_size

    def embed_images(self, images: torch.Tensor) -> torch.Tensor:
        return image_forward(self.params, self.config, images)

    def tokenize(self, prompt: str) -> list[int]:
        if not isinstance(prompt, str) or not prompt.strip():
            raise InputError("prompt must be a non-empty string")
        tokens = _tokenize(prompt)
        if not tokens:
            raise InputError(f"prompt {prompt!r} contains no tokens")
        unk = self._vocab["[unk]"]
        return [self._vocab.get(t, unk) for t in tokens]

    def encode_text(self, prompt: str) -> np.ndarray:
        with torch.no_grad():
            return text_forward(self.params, self.tokenize(prompt)).numpy()

    def cls_attention_rows(self, image: np.ndarray) -> np.ndarray:
        img = self._check(image)
        with torch.no_grad():
            _, attn = image_forward(self.params, self.config, torch.from_numpy(img)[None],
                                    return_attention=True)
        # (layers, 1, heads, T, T) -> CLS query row over patch keys
        return attn[:, 0, :, 0, 1:].numpy()

    def save(self, path) -> None:
        """Write parameters and config to a single ``.npz`` checkpoint."""
        arrays = {f"param/{k}": v.numpy() for k, v in self.params.items()}
        arrays["config_json"] = np.frombuffer(
            json.dumps(self.config.to_dict(), sort_keys=True).encode(), dtype=np.uint8
        )
        with open(path, "wb") as fh:
            np.savez(fh, **arrays)

    @classmethod
    def load(cls, path) -> "ToyViTEncoder":
        path = Path(path)
        try:
            with np.load(path, allow_pickle=False) as data:
                config = EncoderConfig.from_dict(json.loads(data["config_json"].tobytes().decode()))
                params = {k[len("param/"):]: torch.from_numpy(data[k].copy())
                          for k in data.files if k.startswith("param/")}
        except (OSError, KeyError, ValueError) as exc:
            raise ConfigurationError(f"cannot read encoder checkpoint {path}: {exc}") from exc
        return cls(config, params)


def require_gradients(encoder: VisionTextEncoder) -> None:
    """Reject encoders that cannot back-propagate to pixels."""
    if not getattr(encoder, "supports_gradients", False):
        raise CapabilityError(f"{type(encoder).__name__} does not provide input gradients")
