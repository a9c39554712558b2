"""Flat run configuration shared by the CLI and the training pipeline."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from . import __version__
from .augment import AugmentSpec, default_transforms
from .losses import LossHyperparams
from .nn_core import NetworkConfig


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    manifest: str = ""
    out_dir: str = ""
    # tiling / tissue gate
    patch_size: int = 512
    stride: int = 512
    min_tissue_fraction: float = 0.10
    input_size: int = 128
    # network
    channels: list[int] = field(default_factory=lambda: [16, 32, 64, 64])
    embed_dim: int = 64
    contrastive: bool = True
    # losses
    alpha: float = 0.5
    lam: float = 1.0  # 0.5 starves the reject term; see README
    tau: float = 0.1
    alpha_pos: float = 0.5
    alpha_neg: float = 0.5
    warmup_epochs: int = 10
    reject_mode: str = "literal"
    # inference
    infer_lam: float | None = 0.4
    cancer_cutoff: float = 0.5
    # training
    epochs: int = 20
    cancer_epochs: int = 10
    batch_size: int = 32
    lr: float = 1e-3
    seed: int = 0
    k_folds: int = 5
    augment_prob: float = 0.3
    augment: dict | None = None
    workers: int = 1
    # evaluation
    verify_paper_tables: bool = False

    def __post_init__(self):
        self.loss_hyperparams()  # validates ranges
        if self.patch_size <= 0 or self.stride <= 0 or self.input_size <= 0:
            raise ConfigError("patch_size, stride and input_size must be positive")
        if not 0.0 <= self.min_tissue_fraction <= 1.0:
            raise ConfigError("min_tissue_fraction must be in [0, 1]")
        if self.infer_lam is not None and not 0.0 <= self.infer_lam <= 1.0:
            raise ConfigError("infer_lam must be in [0, 1]")
        if self.epochs < 0 or self.cancer_epochs < 0 or self.batch_size < 2:
            raise ConfigError("epochs must be >= 0 and batch_size >= 2")
        if self.k_folds < 2:
            raise ConfigError("k_folds must be >= 2")
        if not 0.0 <= self.augment_prob <= 1.0:
            raise ConfigError("augment_prob must be in [0, 1]")
        if self.workers < 1:
            raise ConfigError("workers must be >= 1")

    def loss_hyperparams(self) -> LossHyperparams:
        try:
            return LossHyperparams(self.alpha, self.lam, self.tau, self.alpha_pos, self.alpha_neg,
                                   self.warmup_epochs, self.reject_mode)
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc

    @property
    def inference_lam(self) -> float:
        return self.lam if self.infer_lam is None else self.infer_lam

    def network_config(self, num_classes: int, embed: bool) -> NetworkConfig:
        return NetworkConfig(
            input_size=self.input_size,
            stages=[(c, 3, 2) for c in self.channels],
            num_classes=num_classes,
            embed_dim=self.embed_dim if embed else 0,
        )

    def augment_spec(self) -> AugmentSpec:
        if self.augment is not None:
            return AugmentSpec.from_dict(self.augment)
        return AugmentSpec(default_transforms(self.augment_prob), self.seed)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, raw: dict) -> RunConfig:
        names = {f.name for f in fields(cls)}
        unknown = sorted(set(raw) - names)
        if unknown:
            raise ConfigError(f"unknown config keys: {unknown}")
        try:
            return cls(**raw)
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc


def load_config(path: str | Path) -> RunConfig:
    path = Path(path)
    try:
        raw = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}:{exc.lineno}:{exc.colno}: {exc.msg}") from exc
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: top level must be a JSON object")
    return RunConfig.from_dict(raw)


def write_run_json(out_dir: str | Path, command: str, payload: dict, **extra) -> None:
    """Record the resolved configuration of a subcommand (no timestamps)."""
    doc = {"tool": "wsirisk", "version": __version__, "command": command, "config": payload, **extra}
    Path(out_dir, "run.json").write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
