"""Run configuration: schema, JSON round-trip, hashing, seed derivation.

A run is described by one JSON document (schema_version 1) with sections
``backbone``, ``cas``, ``masking``, ``model`` and ``io``. Every piece of
randomness in a run is derived from the single root ``seed`` via
:func:`derive_seed`, so any sub-result (masks for one image, a data split,
a parameter init) is independently reproducible.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

from .errors import ConfigError

SCHEMA_VERSION = 1


def derive_seed(root_seed: int, label: str) -> int:
    """Map (root seed, label) to a stable 63-bit child seed.

    Labels namespace the consumers ("masking", "split/train", "init/model",
    "masks/<image-hash>", ...) so adding a new consumer never perturbs the
    streams of existing ones.
    """
    digest = hashlib.sha256(f"{root_seed}/{label}".encode()).digest()
    return int.from_bytes(digest[:8], "little") % (2**63)


@dataclass
class CasConfig:
    """Weights and guards for the per-patch anomaly score.

    lambda_weight scales the reconstruction mismatch term; sigma_nll is the
    Gaussian scale of the conditional NLL; sigma_floor keeps context standard
    deviations away from zero on flat regions. reduction is "mean" (default,
    patch-size independent) or "sum" (raw squared norms).
    """

    lambda_weight: float = 1.0
    sigma_nll: float = 1.0
    sigma_floor: float = 1e-4
    reduction: str = "mean"

    def __post_init__(self) -> None:
        if self.lambda_weight < 0:
            raise ConfigError("lambda must be >= 0")
        if self.sigma_nll <= 0:
            raise ConfigError("sigma_nll must be > 0")
        if self.sigma_floor <= 0:
            raise ConfigError("sigma_floor must be > 0")
        if self.reduction not in ("mean", "sum"):
            raise ConfigError(f"unknown reduction {self.reduction!r}")

    def to_dict(self) -> dict:
        # "lambda" is the on-disk field name; it is a keyword in Python.
        return {
            "lambda": self.lambda_weight,
            "sigma_nll": self.sigma_nll,
            "sigma_floor": self.sigma_floor,
            "reduction": self.reduction,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "CasConfig":
        return cls(
            lambda_weight=float(d.get("lambda", 1.0)),
            sigma_nll=float(d.get("sigma_nll", 1.0)),
            sigma_floor=float(d.get("sigma_floor", 1e-4)),
            reduction=str(d.get("reduction", "mean")),
        )


@dataclass
class BackboneConfig:
    arch_tag: str = "toy-4"
    weights_path: str = ""

    def to_dict(self) -> dict:
        return {"arch_tag": self.arch_tag, "weights_path": self.weights_path}

    @classmethod
    def from_dict(cls, d: dict) -> "BackboneConfig":
        return cls(
            arch_tag=str(d.get("arch_tag", "toy-4")),
            weights_path=str(d.get("weights_path", "")),
        )


@dataclass
class MaskingConfig:
    """Stochastic masking: K independent runs at a fixed ratio.

    K=0 disables the anomaly branch entirely (classification from the global
    feature alone). Valid K range is 0..8.
    """

    k_runs: int = 2
    mask_ratio: float = 0.75

    def __post_init__(self) -> None:
        if not 0 <= self.k_runs <= 8:
            raise ConfigError("K must be in 0..8")
        if not 0.0 < self.mask_ratio < 1.0:
            raise ConfigError("mask_ratio must be in (0, 1)")

    def to_dict(self) -> dict:
        return {"k_runs": self.k_runs, "mask_ratio": self.mask_ratio}

    @classmethod
    def from_dict(cls, d: dict) -> "MaskingConfig":
        return cls(
            k_runs=int(d.get("k_runs", 2)),
            mask_ratio=float(d.get("mask_ratio", 0.75)),
        )

    def replace(self, **kwargs) -> "MaskingConfig":
        return dataclasses.replace(self, **kwargs)


@dataclass
class TrainConfig:
    epochs: int = 25
    batch_size: int = 32
    learning_rate: float = 1e-2
    optimizer: str = "adam"

    def __post_init__(self) -> None:
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")

    def to_dict(self) -> dict:
        return {
            "epochs": self.epochs,
            "batch_size": self.batch_size,
            "learning_rate": self.learning_rate,
            "optimizer": self.optimizer,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        return cls(
            epochs=int(d.get("epochs", 25)),
            batch_size=int(d.get("batch_size", 32)),
            learning_rate=float(d.get("learning_rate", 1e-2)),
            optimizer=str(d.get("optimizer", "adam")),
        )


@dataclass
class ModelConfig:
    strategy: str = "add"
    hidden_dim: int = 64
    train: TrainConfig = field(default_factory=TrainConfig)

    def to_dict(self) -> dict:
        return {
            "strategy": self.strategy,
            "hidden_dim": self.hidden_dim,
            "train": self.train.to_dict(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(
            strategy=str(d.get("strategy", "add")),
            hidden_dim=int(d.get("hidden_dim", 64)),
            train=TrainConfig.from_dict(d.get("train", {})),
        )


@dataclass
class IoConfig:
    cache_dir: str = ""
    output_dir: str = "out"

    def to_dict(self) -> dict:
        return {"cache_dir": self.cache_dir, "output_dir": self.output_dir}

    @classmethod
    def from_dict(cls, d: dict) -> "IoConfig":
        return cls(
            cache_dir=str(d.get("cache_dir", "")),
            output_dir=str(d.get("output_dir", "out")),
        )


@dataclass
class RunConfig:
    seed: int = 0
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    cas: CasConfig = field(default_factory=CasConfig)
    masking: MaskingConfig = field(default_factory=MaskingConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    io: IoConfig = field(default_factory=IoConfig)

    def to_dict(self) -> dict:
        return {
            "schema_version": SCHEMA_VERSION,
            "seed": self.seed,
            "backbone": self.backbone.to_dict(),
            "cas": self.cas.to_dict(),
            "masking": self.masking.to_dict(),
            "model": self.model.to_dict(),
            "io": self.io.to_dict(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        version = d.get("schema_version", SCHEMA_VERSION)
        if version != SCHEMA_VERSION:
            raise ConfigError(f"unsupported schema_version {version}")
        return cls(
            seed=int(d.get("seed", 0)),
            backbone=BackboneConfig.from_dict(d.get("backbone", {})),
            cas=CasConfig.from_dict(d.get("cas", {})),
            masking=MaskingConfig.from_dict(d.get("masking", {})),
            model=ModelConfig.from_dict(d.get("model", {})),
            io=IoConfig.from_dict(d.get("io", {})),
        )

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")

    @classmethod
    def load(cls, path: str | Path) -> "RunConfig":
        p = Path(path)
        if not p.is_file():
            raise ConfigError(f"config file not found: {p}")
        try:
            data = json.loads(p.read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"malformed config {p}: {exc}") from exc
        if not isinstance(data, dict):
            raise ConfigError(f"config root must be an object: {p}")
        return cls.from_dict(data)

    def replace(self, **kwargs) -> "RunConfig":
        return dataclasses.replace(self, **kwargs)

    def replace_masking(self, **kwargs) -> "RunConfig":
        return dataclasses.replace(self, masking=dataclasses.replace(self.masking, **kwargs))

    def replace_model(self, **kwargs) -> "RunConfig":
        return dataclasses.replace(self, model=dataclasses.replace(self.model, **kwargs))

    def replace_cas(self, **kwargs) -> "RunConfig":
        return dataclasses.replace(self, cas=dataclasses.replace(self.cas, **kwargs))


def canonical_json(obj) -> str:
    """Deterministic JSON encoding used for hashing."""
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def config_hash(cfg: RunConfig | dict) -> str:
    """Short stable hash identifying a run configuration.

    io paths are excluded: moving output or cache directories must not change
    the identity of the computation.
    """
    d = cfg.to_dict() if isinstance(cfg, RunConfig) else dict(cfg)
    d = {k: v for k, v in d.items() if k != "io"}
    return hashlib.sha256(canonical_json(d).encode()).hexdigest()[:16]


def cas_config_hash(cas: CasConfig) -> str:
    return hashlib.sha256(canonical_json(cas.to_dict()).encode()).hexdigest()[:16]
