"""Run configuration: YAML/JSON file parsing with strict schema validation.

Example::

    run_id: demo
    dataset:
      generator: {n_samples: 1000, correlation: 0.9}
      fractions: [0.5, 0.1, 0.4]
    encoder:
      config: {patch_size: 8, embed_dim: 16}
      bias: {epochs: 10}
    debias:
      prompts: ["A photo of a landbird", "A photo of a waterbird"]
    variants: [zero_shot, full]

Exactly one of ``dataset.generator`` / ``dataset.manifest`` may be given
(generator defaults apply when neither is). ``encoder.checkpoint`` loads a
saved encoder and skips bias induction.
"""

from __future__ import annotations

import dataclasses
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping

import yaml

from .data import GeneratorParams
from .debias import DebiasConfig
from .encoder import EncoderConfig
from .exceptions import ConfigurationError, RegionDebiasError
from .experiment import ALL_VARIANTS, DEFAULT_FRACTIONS
from .training import BiasInductionParams

TOP_KEYS = {"run_id", "dataset", "encoder", "debias", "variants", "masks", "patch_threshold"}


@dataclass(frozen=True)
class MaskSource:
    provider: str = "oracle"
    command: tuple[str, ...] = ()
    timeout: float = 120.0


@dataclass(frozen=True)
class RunConfig:
    run_id: str = "run"
    generator: GeneratorParams | None = field(default_factory=GeneratorParams)
    manifest: Path | None = None
    fractions: tuple[float, float, float] = DEFAULT_FRACTIONS
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    checkpoint: Path | None = None
    bias: BiasInductionParams = field(default_factory=BiasInductionParams)
    debias: DebiasConfig = field(default_factory=DebiasConfig)
    variants: tuple[str, ...] = ALL_VARIANTS
    masks: MaskSource = field(default_factory=MaskSource)
    patch_threshold: float = 0.5

    @property
    def dataset_name(self) -> str:
        return self.manifest.parent.name if self.manifest is not None else "synthetic"

    def with_overrides(self, seed: int | None = None, variant: str | None = None) -> "RunConfig":
        cfg = self
        if seed is not None:
            replace = dataclasses.replace
            cfg = replace(cfg, encoder=replace(cfg.encoder, seed=seed), bias=replace(cfg.bias, seed=seed),
                          debias=replace(cfg.debias, seed=seed),
                          generator=None if cfg.generator is None else replace(cfg.generator, seed=seed))
        if variant is not None:
            cfg = dataclasses.replace(cfg, variants=_variants(variant))
        return cfg


def _variants(value) -> tuple[str, ...]:
    if isinstance(value, str):
        value = ALL_VARIANTS if value == "all" else [v.strip() for v in value.split(",") if v.strip()]
    out = tuple(str(v) for v in value)
    if not out:
        raise ConfigurationError("at least one variant is required")
    bad = [v for v in out if v not in ALL_VARIANTS]
    if bad:
        raise ConfigurationError(f"unknown variant(s) {bad}; expected any of {ALL_VARIANTS} or 'all'")
    return out


def _section(cls, data: Any, where: str):
    """Build dataclass ``cls`` from a mapping, rejecting unknown keys."""
    if data is None:
        data = {}
    if not isinstance(data, Mapping):
        raise ConfigurationError(f"{where}: expected a mapping, got {type(data).__name__}")
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - names)
    if unknown:
        raise ConfigurationError(f"{where}: unknown key(s) {unknown}; allowed {sorted(names)}")
    kwargs = {}
    for f in dataclasses.fields(cls):
        if f.name not in data:
            continue
        value = data[f.name]
        if isinstance(value, list):
            value = tuple(value)
        kwargs[f.name] = value
    try:
        return cls(**kwargs)
    except RegionDebiasError as exc:
        raise ConfigurationError(f"{where}: {exc}") from exc
    except (TypeError, ValueError) as exc:
        raise ConfigurationError(f"{where}: invalid value: {exc}") from exc


def _check_types(cls, obj, where: str) -> None:
    # shallow type check against the dataclass defaults
    for f in dataclasses.fields(cls):
        default = f.default if f.default is not dataclasses.MISSING else None
        value = getattr(obj, f.name)
        if isinstance(default, bool) or default is None:
            continue
        if isinstance(default, int) and not (isinstance(value, int) and not isinstance(value, bool)):
            raise ConfigurationError(f"{where}.{f.name}: expected an integer, got {value!r}")
        if isinstance(default, float) and (isinstance(value, bool) or not isinstance(value, (int, float))):
            raise ConfigurationError(f"{where}.{f.name}: expected a number, got {value!r}")
        if isinstance(default, str) and not isinstance(value, str):
            raise ConfigurationError(f"{where}.{f.name}: expected a string, got {value!r}")


def _typed(cls, data, where):
    obj = _section(cls, data, where)
    _check_types(cls, obj, where)
    return obj


def parse_config(data: Any, base_dir: Path | None = None) -> RunConfig:
    """Validate a parsed config document and build a :class:`RunConfig`."""
    if data is None:
        data = {}
    if not isinstance(data, Mapping):
        raise ConfigurationError("config: top level must be a mapping")
    unknown = sorted(set(data) - TOP_KEYS)
    if unknown:
        raise ConfigurationError(f"config: unknown key(s) {unknown}; allowed {sorted(TOP_KEYS)}")
    base_dir = base_dir or Path.cwd()

    def resolve(p) -> Path:
        if not isinstance(p, str) or not p:
            raise ConfigurationError(f"expected a path string, got {p!r}")
        path = Path(os.path.expanduser(p))
        return path if path.is_absolute() else base_dir / path

    run_id = data.get("run_id", "run")
    if not isinstance(run_id, str) or not run_id:
        raise ConfigurationError("run_id must be a non-empty string")

    ds = data.get("dataset") or {}
    if not isinstance(ds, Mapping):
        raise ConfigurationError("dataset: expected a mapping")
    bad = sorted(set(ds) - {"generator", "manifest", "fractions"})
    if bad:
        raise ConfigurationError(f"dataset: unknown key(s) {bad}")
    if "generator" in ds and "manifest" in ds:
        raise ConfigurationError("dataset: give exactly one of 'generator' or 'manifest'")
    manifest = resolve(ds["manifest"]) if "manifest" in ds else None
    generator = None if manifest is not None else _typed(GeneratorParams, ds.get("generator"), "dataset.generator")
    fractions = ds.get("fractions", list(DEFAULT_FRACTIONS))
    if (not isinstance(fractions, (list, tuple)) or len(fractions) != 3
            or not all(isinstance(f, (int, float)) and not isinstance(f, bool) and f >= 0 for f in fractions)
            or abs(sum(fractions) - 1.0) > 1e-9):
        raise ConfigurationError(f"dataset.fractions: expected three non-negative numbers summing to 1, "
                                 f"got {fractions!r}")

    enc = data.get("encoder") or {}
    if not isinstance(enc, Mapping):
        raise ConfigurationError("encoder: expected a mapping")
    bad = sorted(set(enc) - {"checkpoint", "config", "bias"})
    if bad:
        raise ConfigurationError(f"encoder: unknown key(s) {bad}")
    if "checkpoint" in enc and "config" in enc:
        raise ConfigurationError("encoder: give at most one of 'checkpoint' or 'config'")
    checkpoint = resolve(enc["checkpoint"]) if "checkpoint" in enc else None
    if checkpoint is not None and not checkpoint.is_file():
        raise ConfigurationError(f"encoder.checkpoint: file not found: {checkpoint}")
    encoder = _typed(EncoderConfig, enc.get("config"), "encoder.config")
    bias = _typed(BiasInductionParams, enc.get("bias"), "encoder.bias")

    debias = _typed(DebiasConfig, data.get("debias"), "debias")
    variants = _variants(data.get("variants", list(ALL_VARIANTS)))

    ms = data.get("masks") or {}
    if isinstance(ms, Mapping) and isinstance(ms.get("command"), str):
        ms = {**ms, "command": [ms["command"]]}
    masks = _section(MaskSource, ms, "masks")
    if masks.provider not in ("oracle", "external"):
        raise ConfigurationError("masks.provider must be 'oracle' or 'external'")
    if masks.provider == "external" and not masks.command:
        raise ConfigurationError("masks.command is required for the external provider")

    threshold = data.get("patch_threshold", 0.5)
    if isinstance(threshold, bool) or not isinstance(threshold, (int, float)) or not 0 < threshold <= 1:
        raise ConfigurationError("patch_threshold must be a number in (0, 1]")

    return RunConfig(run_id, generator, manifest, tuple(float(f) for f in fractions), encoder, checkpoint,
                     bias, debias, variants, masks, float(threshold))


def load_config(path) -> RunConfig:
    """Read a YAML or JSON config file and validate it."""
    path = Path(path)
    try:
        text = path.read_text()
    except FileNotFoundError:
        raise ConfigurationError(f"config file not found: {path}") from None
    except OSError as exc:
        raise ConfigurationError(f"cannot read config {path}: {exc}") from exc
    try:
        data = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigurationError(f"{path}: not valid YAML/JSON: {exc}") from exc
    return parse_config(data, path.parent)
