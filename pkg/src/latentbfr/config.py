"""Typed configuration loaded from YAML. Unknown keys are rejected."""

from __future__ import annotations

import dataclasses
import hashlib
import json
import math
import types
import typing
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import yaml


class ConfigError(ValueError):
    pass


@dataclass
class VqTrainConfig:
    f: int = 4
    codebook_size: int = 512
    code_dim: int = 3
    # channel width at each resolution level; the last entry repeats for deeper levels
    widths: list[int] = field(default_factory=lambda: [32, 64, 64])
    rec_weight: float = 1.0
    perceptual_weight: float = 1.0
    adversarial_weight: float = 0.1
    codebook_weight: float = 1.0
    commitment_weight: float = 1.0
    lr: float = 1e-3
    disc_lr: float = 1e-3
    betas: list[float] = field(default_factory=lambda: [0.5, 0.9])
    batch_size: int = 16
    steps: int = 1000
    disc_start: int = 500
    # re-seed codebook entries unused for this many steps; 0 disables
    dead_code_restart: int = 0

    def validate(self) -> None:
        if self.f not in (2, 4, 8, 16, 32):
            raise ConfigError(f"vq.f must be one of 2, 4, 8, 16, 32, got {self.f}")
        if self.codebook_size < 2:
            raise ConfigError("vq.codebook_size must be >= 2")
        if self.code_dim < 1 or not self.widths or min(self.widths) < 1:
            raise ConfigError("vq.code_dim and vq.widths must be positive")
        for name in ("rec_weight", "perceptual_weight", "adversarial_weight",
                     "codebook_weight", "commitment_weight"):
            if getattr(self, name) < 0:
                raise ConfigError(f"vq.{name} must be >= 0")
        if self.steps < 0 or self.batch_size < 1:
            raise ConfigError("vq.steps must be >= 0 and vq.batch_size >= 1")


@dataclass
class DiffusionConfig:
    sigma_min: float = 0.01
    # None: set at training time to 3x the empirical std of the clean latents
    sigma_max: float | None = None
    rho: float = 7.0
    num_steps: int = 16
    weighting: str = "t2"
    # None: empirical std of the clean latents
    sigma_data: float | None = None
    conditional: bool = True
    base_width: int = 32
    lr: float = 2e-3
    batch_size: int = 64
    steps: int = 3000
    pair_variants: int = 4

    def validate(self) -> None:
        if self.sigma_min <= 0:
            raise ConfigError("diffusion.sigma_min must be > 0")
        if self.sigma_max is not None and self.sigma_max <= self.sigma_min:
            raise ConfigError("diffusion.sigma_max must exceed sigma_min")
        if self.num_steps < 2:
            raise ConfigError("diffusion.num_steps must be >= 2")
        if self.weighting not in ("t2", "edm", "none"):
            raise ConfigError(f"unknown diffusion.weighting {self.weighting!r}")
        if self.rho <= 0:
            raise ConfigError("diffusion.rho must be > 0")


@dataclass
class GuidanceConfig:
    scale: float = 1.0
    enabled: bool = True
    use_mask: bool = True
    embedder: str = "toy"
    embed_dim: int = 32
    embedder_steps: int = 600
    embedder_margin: float = 0.3
    embedder_scale: float = 16.0
    irn_alpha: float = 0.1
    irn_width: int = 32
    irn_steps: int = 800
    irn_lr: float = 1e-3
    mask_width: int = 16
    mask_layers: int = 3
    mask_feat_weight: float = 1.0
    mask_id_weight: float = 1.0
    mask_sparsity_weight: float = 0.1
    mask_steps: int = 300
    mask_lr: float = 1e-3
    batch_size: int = 16

    def validate(self) -> None:
        if self.scale < 0:
            raise ConfigError("guidance.scale must be >= 0")
        for name in ("irn_alpha", "mask_feat_weight", "mask_id_weight", "mask_sparsity_weight"):
            if getattr(self, name) < 0:
                raise ConfigError(f"guidance.{name} must be >= 0")
        if self.mask_layers < 1:
            raise ConfigError("guidance.mask_layers must be >= 1")


@dataclass
class DegradationRanges:
    """Sampling intervals. Noise std is in [0, 1] intensity units; the default spans 0..20 on a 0..255 scale."""

    sigma_range: list[float] = field(default_factory=lambda: [0.0, 20.0 / 255.0])
    s_range: list[int] = field(default_factory=lambda: [1, 32])
    q_range: list[int] = field(default_factory=lambda: [30, 90])
    kernel_width_range: list[float] = field(default_factory=lambda: [0.2, 3.0])
    anisotropic: bool = False

    def validate(self) -> None:
        def check(name, lo_legal, hi_legal):
            rng = getattr(self, name)
            if len(rng) != 2 or rng[0] > rng[1]:
                raise ConfigError(f"degradation.{name} must be a non-empty [lo, hi] interval")
            if rng[0] < lo_legal or rng[1] > hi_legal:
                raise ConfigError(f"degradation.{name} {rng} outside [{lo_legal}, {hi_legal}]")

        check("sigma_range", 0.0, math.inf)
        check("s_range", 1, math.inf)
        check("q_range", 1, 100)
        check("kernel_width_range", 0.0, math.inf)


@dataclass
class CorpusConfig:
    train_dir: str | None = None
    eval_dir: str | None = None
    # procedural corpus used when the directories are unset
    toy_identities: int = 16
    toy_train_variants: int = 16
    toy_eval_variants: int = 4

    def validate(self) -> None:
        if min(self.toy_identities, self.toy_train_variants, self.toy_eval_variants) < 1:
            raise ConfigError("corpus.toy_* counts must be >= 1")


@dataclass
class SeedConfig:
    data: int = 0
    init: int = 1
    sampler: int = 2


@dataclass
class PipelineConfig:
    resolution: int = 64
    vq: VqTrainConfig = field(default_factory=VqTrainConfig)
    diffusion: DiffusionConfig = field(default_factory=DiffusionConfig)
    guidance: GuidanceConfig = field(default_factory=GuidanceConfig)
    degradation: DegradationRanges = field(default_factory=DegradationRanges)
    corpus: CorpusConfig = field(default_factory=CorpusConfig)
    seeds: SeedConfig = field(default_factory=SeedConfig)
    out_dir: str = "runs/default"
    ablation_f: int = 32

    def validate(self) -> None:
        self.vq.validate()
        self.diffusion.validate()
        self.guidance.validate()
        self.degradation.validate()
        self.corpus.validate()
        if self.resolution % self.vq.f:
            raise ConfigError(f"resolution {self.resolution} not divisible by vq.f={self.vq.f}")
        if self.resolution < self.ablation_f or self.resolution % self.ablation_f:
            raise ConfigError(f"resolution {self.resolution} incompatible with ablation_f={self.ablation_f}")
        latent = self.resolution // self.vq.f
        # the score network halves the latent grid once
        if latent % 2:
            raise ConfigError(f"latent grid {latent}x{latent} must be even for the score network")

    @property
    def latent_shape(self) -> tuple[int, int, int]:
        side = self.resolution // self.vq.f
        return (self.vq.code_dim, side, side)

    def to_dict(self) -> dict[str, Any]:
        return dataclasses.asdict(self)

    def digest(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()


def _coerce(tp, value, where):
    origin = typing.get_origin(tp)
    if dataclasses.is_dataclass(tp):
        if not isinstance(value, dict):
            raise ConfigError(f"{where}: expected a mapping")
        return from_dict(tp, value, where)
    if origin in (typing.Union, types.UnionType):
        args = typing.get_args(tp)
        if value is None and type(None) in args:
            return None
        inner = [a for a in args if a is not type(None)]
        return _coerce(inner[0], value, where)
    if origin is list:
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"{where}: expected a list")
        (item_tp,) = typing.get_args(tp)
        return [_coerce(item_tp, v, f"{where}[{i}]") for i, v in enumerate(value)]
    if tp is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"{where}: expected true/false")
        return value
    if tp is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{where}: expected an integer")
        return value
    if tp is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{where}: expected a number")
        return float(value)
    if tp is str:
        if not isinstance(value, str):
            raise ConfigError(f"{where}: expected a string")
        return value
    return value


def from_dict(cls, data: dict[str, Any], where: str = "config"):
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - names)
    if unknown:
        raise ConfigError(f"{where}: unknown keys {unknown}")
    kwargs = {k: _coerce(hints[k], v, f"{where}.{k}") for k, v in data.items()}
    return cls(**kwargs)


def load_config(path: str | Path | None = None, overrides: dict[str, Any] | None = None) -> PipelineConfig:
    data: dict[str, Any] = {}
    if path is not None:
        text = Path(path).read_text()
        data = yaml.safe_load(text) or {}
        if not isinstance(data, dict):
            raise ConfigError(f"{path}: top level must be a mapping")
    cfg = from_dict(PipelineConfig, data)
    if overrides:
        cfg = from_dict(PipelineConfig, _merge(cfg.to_dict(), overrides))
    cfg.validate()
    return cfg


def config_from_dict(data: dict[str, Any]) -> PipelineConfig:
    cfg = from_dict(PipelineConfig, data)
    cfg.validate()
    return cfg


def _merge(base: dict, extra: dict) -> dict:
    out = dict(base)
    for k, v in extra.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = v
    return out


def save_config(cfg: PipelineConfig, path: str | Path) -> None:
    Path(path).write_text(yaml.safe_dump(cfg.to_dict(), sort_keys=True))


def derive_seed(base: int, *names: str | int) -> int:
    """Stable 63-bit sub-seed for a named stream."""
    h = hashlib.sha256(str(base).encode())
    for n in names:
        h.update(b"/" + str(n).encode())
    return int.from_bytes(h.digest()[:8], "little") >> 1
