"""Experiment configuration: dataclass sections and YAML (de)serialisation.

A config file has the sections ``dataset``, ``partition``, ``schedule``,
``attack``, ``model``, ``train`` and ``seeds``, plus an explicit
``matrix`` of runs (no implicit cross products)::

    matrix:
      - {variant: clean, partition: iid, fraction: 0.0}
      - {variant: fgsm,  partition: iid, fraction: 0.3}
"""

from __future__ import annotations

import copy
import dataclasses
import hashlib
import json
import math
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import yaml

from fedpoison.attacks import ATTACK_KINDS, AttackSpec, check_derangement, pairwise_flip_map
from fedpoison.datakit import canonical_scheme
from fedpoison.errors import ConfigurationError
from fedpoison.model import ModelConfig, TrainConfig

VARIANTS = ("clean", "fgsm", "awgn", "flip")
PARTITIONS = ("iid", "noniid")


@dataclass
class DatasetSection:
    path: str | None = None
    schemes: list[str] = field(default_factory=lambda: ["BPSK", "QPSK", "PAM4", "QAM16"])
    frames_per_class: int = 2500
    snr_db: float = 10.0
    fading: str = "none"
    length: int = 128
    samples_per_symbol: int = 8
    train_fraction: float = 0.8


@dataclass
class PartitionSection:
    mode: str = "iid"
    K: int = 10
    quantity_mean: float = 800.0
    quantity_std: float = 8.0
    labels_per_device: int = 3


@dataclass
class ScheduleSection:
    rounds: int = 60
    attack_start: int = 15
    adversary_fraction: float | None = 0.3
    adversaries: int | None = None

    def num_adversaries(self, K: int) -> int:
        if self.adversaries is not None:
            return int(self.adversaries)
        frac = self.adversary_fraction or 0.0
        return int(math.floor(frac * K + 0.5))


@dataclass
class AttackSection:
    kind: str = "fgsm"
    pnr_db: float = 8.1
    alpha: float = 1.0
    flip_map: Any = "pairwise"

    def spec(self, num_classes: int, kind: str | None = None) -> AttackSpec:
        kind = self.kind if kind is None else kind
        if kind == "clean":
            kind = "none"
        flip = None
        if kind == "flip":
            flip = pairwise_flip_map(num_classes) if self.flip_map == "pairwise" else tuple(self.flip_map)
        return AttackSpec(kind=kind, pnr_db=self.pnr_db, alpha=self.alpha, flip_map=flip)


@dataclass
class ModelSection:
    conv1_maps: int = 16
    conv1_kernel: list[int] = field(default_factory=lambda: [1, 3])
    conv2_maps: int = 80
    conv2_kernel: list[int] = field(default_factory=lambda: [2, 3])
    dense_units: int = 256
    dtype: str = "float32"

    def build_config(self, length: int, num_classes: int, seed: int) -> ModelConfig:
        return ModelConfig(
            length=length,
            num_classes=num_classes,
            conv1_maps=self.conv1_maps,
            conv1_kernel=tuple(self.conv1_kernel),
            conv2_maps=self.conv2_maps,
            conv2_kernel=tuple(self.conv2_kernel),
            dense_units=self.dense_units,
            seed=seed,
            dtype=self.dtype,
        )


@dataclass
class TrainSection:
    lr: float = 0.001
    batch_size: int = 128
    local_epochs: int = 1

    def build_config(self, shuffle_seed: int = 0) -> TrainConfig:
        return TrainConfig(self.lr, self.batch_size, self.local_epochs, shuffle_seed)


@dataclass
class SeedsSection:
    master: int = 0
    repetitions: int = 1

    def seeds(self) -> list[int]:
        return [self.master + i for i in range(self.repetitions)]


@dataclass
class MatrixEntry:
    variant: str = "clean"
    partition: str = "iid"
    fraction: float = 0.0

    @property
    def name(self) -> str:
        return f"{self.variant}_{self.partition}_{self.fraction:g}"


@dataclass
class RunConfig:
    """Everything one simulation needs."""

    dataset: DatasetSection = field(default_factory=DatasetSection)
    partition: PartitionSection = field(default_factory=PartitionSection)
    schedule: ScheduleSection = field(default_factory=ScheduleSection)
    attack: AttackSection = field(default_factory=AttackSection)
    model: ModelSection = field(default_factory=ModelSection)
    train: TrainSection = field(default_factory=TrainSection)
    seed: int = 0


@dataclass
class ExperimentConfig:
    dataset: DatasetSection = field(default_factory=DatasetSection)
    partition: PartitionSection = field(default_factory=PartitionSection)
    schedule: ScheduleSection = field(default_factory=ScheduleSection)
    attack: AttackSection = field(default_factory=AttackSection)
    model: ModelSection = field(default_factory=ModelSection)
    train: TrainSection = field(default_factory=TrainSection)
    seeds: SeedsSection = field(default_factory=SeedsSection)
    matrix: list[MatrixEntry] = field(default_factory=lambda: [MatrixEntry()])

    def expand(self, variants: list[str] | None = None) -> list[tuple[MatrixEntry, int, RunConfig]]:
        """One RunConfig per (matrix entry, seed), in config order."""
        runs = []
        for entry in self.matrix:
            if variants is not None and entry.variant not in variants:
                continue
            for seed in self.seeds.seeds():
                rc = RunConfig(
                    dataset=copy.deepcopy(self.dataset),
                    partition=dataclasses.replace(self.partition, mode=entry.partition),
                    schedule=dataclasses.replace(
                        self.schedule,
                        adversary_fraction=0.0 if entry.variant == "clean" else entry.fraction,
                        adversaries=None,
                    ),
                    attack=dataclasses.replace(self.attack, kind="none" if entry.variant == "clean" else entry.variant),
                    model=copy.deepcopy(self.model),
                    train=copy.deepcopy(self.train),
                    seed=seed,
                )
                runs.append((entry, seed, rc))
        return runs


_SECTIONS = {
    "dataset": DatasetSection,
    "partition": PartitionSection,
    "schedule": ScheduleSection,
    "attack": AttackSection,
    "model": ModelSection,
    "train": TrainSection,
    "seeds": SeedsSection,
}


def _build_section(cls, raw: Any, name: str):
    if raw is None:
        return cls()
    if not isinstance(raw, dict):
        raise ConfigurationError(f"section {name!r} must be a mapping")
    known = {f.name for f in dataclasses.fields(cls)}
    unknown = set(raw) - known
    if unknown:
        raise ConfigurationError(f"unknown field(s) in {name}: {', '.join(sorted(unknown))}")
    return cls(**raw)


def from_dict(raw: dict, base_dir: str | os.PathLike | None = None, check_paths: bool = True) -> ExperimentConfig:
    if not isinstance(raw, dict):
        raise ConfigurationError("config must be a mapping of sections")
    unknown = set(raw) - set(_SECTIONS) - {"matrix"}
    if unknown:
        raise ConfigurationError(f"unknown section(s): {', '.join(sorted(unknown))}")
    sections = {name: _build_section(cls, raw.get(name), name) for name, cls in _SECTIONS.items()}
    matrix_raw = raw.get("matrix")
    matrix = [MatrixEntry()] if matrix_raw is None else [_build_section(MatrixEntry, m, "matrix") for m in matrix_raw]
    cfg = ExperimentConfig(**sections, matrix=matrix)
    if cfg.dataset.path and base_dir is not None and not os.path.isabs(cfg.dataset.path):
        cfg.dataset.path = str(Path(base_dir) / cfg.dataset.path)
    validate(cfg, check_paths=check_paths)
    return cfg


def to_dict(cfg: ExperimentConfig) -> dict:
    return dataclasses.asdict(cfg)


def load(path: str | os.PathLike, check_paths: bool = True) -> ExperimentConfig:
    path = Path(path)
    try:
        raw = yaml.safe_load(path.read_text())
    except yaml.YAMLError as exc:
        raise ConfigurationError(f"{path}: not valid YAML: {exc}") from exc
    return from_dict(raw or {}, base_dir=path.parent, check_paths=check_paths)


def dumps(cfg: ExperimentConfig) -> str:
    return yaml.safe_dump(to_dict(cfg), sort_keys=False)


def config_hash(cfg: ExperimentConfig) -> str:
    canon = json.dumps(to_dict(cfg), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canon.encode()).hexdigest()


def validate(cfg: ExperimentConfig, check_paths: bool = True) -> None:
    d = cfg.dataset
    if d.path is None:
        for i, s in enumerate(d.schemes):
            try:
                canonical_scheme(s)
            except ConfigurationError as exc:
                raise ConfigurationError(f"dataset.schemes[{i}]: {exc}") from None
        if len(d.schemes) < 2:
            raise ConfigurationError("dataset.schemes: need at least 2 schemes")
        if d.frames_per_class < 2:
            raise ConfigurationError("dataset.frames_per_class must be at least 2")
    elif check_paths and not Path(d.path).exists():
        raise ConfigurationError(f"dataset.path: file not found: {d.path}")
    if d.fading not in ("none", "rayleigh_flat"):
        raise ConfigurationError(f"dataset.fading: unknown fading {d.fading!r}")
    if not 0 < d.train_fraction < 1:
        raise ConfigurationError("dataset.train_fraction must be in (0, 1)")
    p = cfg.partition
    if p.mode not in PARTITIONS:
        raise ConfigurationError(f"partition.mode must be one of {PARTITIONS}")
    if p.K < 1:
        raise ConfigurationError("partition.K must be positive")
    s = cfg.schedule
    if s.rounds < 1 or s.attack_start < 0 or s.attack_start > s.rounds:
        raise ConfigurationError("schedule: need rounds >= 1 and 0 <= attack_start <= rounds")
    if s.adversary_fraction is not None and not 0 <= s.adversary_fraction <= 1:
        raise ConfigurationError("schedule.adversary_fraction must be in [0, 1]")
    if cfg.attack.kind not in ATTACK_KINDS:
        raise ConfigurationError(f"attack.kind must be one of {ATTACK_KINDS}")
    if cfg.attack.flip_map != "pairwise":
        check_derangement(cfg.attack.flip_map)
    if not cfg.attack.alpha > 0:
        raise ConfigurationError("attack.alpha must be positive")
    if cfg.train.lr < 0 or cfg.train.batch_size < 1 or cfg.train.local_epochs < 1:
        raise ConfigurationError("train: lr >= 0, batch_size >= 1, local_epochs >= 1 required")
    if cfg.seeds.repetitions < 1:
        raise ConfigurationError("seeds.repetitions must be positive")
    for i, m in enumerate(cfg.matrix):
        if m.variant not in VARIANTS:
            raise ConfigurationError(f"matrix[{i}].variant must be one of {VARIANTS}, got {m.variant!r}")
        if m.partition not in PARTITIONS:
            raise ConfigurationError(f"matrix[{i}].partition must be one of {PARTITIONS}")
        if not 0 <= m.fraction <= 1:
            raise ConfigurationError(f"matrix[{i}].fraction must be in [0, 1]")
