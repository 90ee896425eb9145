"""Experiment configuration: one JSON file describing data, model, training and evaluation."""
from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

from .core import ConfigError, ModelConfig, PipelineOptions, Scenario, _from_mapping
from .synth import DatasetSpec
from .training import TrainConfig

SECTIONS = ("model", "train", "data", "pipeline")

# Small bank, fast training; the default for every command.
TOY = {
    "model": {"P": 8, "D": 16, "H": 4, "L_lgr": 2, "L_grmm": 2, "k": 2, "num_classes": 8},
    "train": {"epochs": 20, "batch_size": 6, "identities_per_batch": 2, "base_lr": 0.05},
    "data": {"num_identities": 8, "samples_per_identity": 10, "P": 8, "D": 16, "noise_sigma": 0.3, "group_shift": 1.0},
    "pipeline": {},
    "holdout_per_identity": 4,
    "scenarios": ["ALL"],
    "sweep_k": [0, 1, 2, 3, 4],
    "output_dir": "runs/toy",
}

# Noisier, larger bank with uncentred features: leaves room for module
# comparisons and missing-modality studies.
ABLATION = {
    "model": {"P": 8, "D": 16, "H": 4, "L_lgr": 2, "L_grmm": 2, "k": 2, "num_classes": 8},
    "train": {"epochs": 20, "batch_size": 8, "identities_per_batch": 2, "base_lr": 0.005},
    "data": {
        "num_identities": 8,
        "samples_per_identity": 24,
        "P": 8,
        "D": 16,
        "noise_sigma": 1.0,
        "group_shift": 1.0,
        "latent_mean": 1.5,
    },
    "pipeline": {},
    "holdout_per_identity": 8,
    "scenarios": ["ALL", "R", "N", "T", "RN", "RT", "NT"],
    "sweep_k": [0, 1, 2, 3, 4],
    "output_dir": "runs/ablation",
}

# Ablation bank with two heavy-noise patches in every NIR sample.
CORRUPTION = {
    **ABLATION,
    "data": {**ABLATION["data"], "noise_sigma": 2.0, "corruption_rate": 0.2, "corrupted_modalities": ["N"], "corruption_scale": 5.0},
    "scenarios": ["ALL"],
    "output_dir": "runs/corruption",
}

PRESETS = {"toy": TOY, "ablation": ABLATION, "corruption": CORRUPTION}


@dataclass(frozen=True)
class ExperimentConfig:
    model: ModelConfig
    train: TrainConfig
    data: DatasetSpec
    pipeline: PipelineOptions = PipelineOptions()
    holdout_per_identity: int = 4
    scenarios: tuple = ("ALL",)
    sweep_k: tuple = (0, 1, 2, 3, 4)
    output_dir: str = "runs/toy"
    source: dict = field(default_factory=dict, compare=False, repr=False)

    def __post_init__(self):
        m, d = self.model, self.data
        if (m.P, m.D) != (d.P, d.D):
            raise ConfigError(f"model P={m.P}, D={m.D} disagrees with data P={d.P}, D={d.D}")
        if m.num_classes != d.num_identities:
            raise ConfigError(f"model.num_classes={m.num_classes} must equal data.num_identities={d.num_identities}")
        if not 1 <= self.holdout_per_identity < d.samples_per_identity:
            raise ConfigError(
                f"holdout_per_identity={self.holdout_per_identity} must lie in [1, samples_per_identity)"
            )
        for s in self.scenarios:
            Scenario.parse(s)
        for k in self.sweep_k:
            if not 0 <= k <= m.P:
                raise ConfigError(f"sweep_k entry {k} outside [0, P={m.P}]")

    @classmethod
    def from_dict(cls, raw: dict) -> "ExperimentConfig":
        """Build from a mapping layered over a preset (``"preset"``, default ``toy``).

        Section dictionaries override individual fields of the preset.
        """
        if not isinstance(raw, dict):
            raise ConfigError("experiment config must be a JSON object")
        raw = dict(raw)
        name = raw.pop("preset", "toy")
        if name not in PRESETS:
            raise ConfigError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
        merged = json.loads(json.dumps(PRESETS[name]))
        for key, val in raw.items():
            if key not in merged:
                raise ConfigError(f"experiment config: unknown key {key!r}")
            if key in SECTIONS:
                if not isinstance(val, dict):
                    raise ConfigError(f"experiment config: section {key!r} must be an object")
                merged[key].update(val)
            else:
                merged[key] = val
        data = dict(merged["data"])
        if "corrupted_modalities" in data:
            data["corrupted_modalities"] = tuple(data["corrupted_modalities"])
        model = dict(merged["model"])
        model.setdefault("tau", None)
        model.setdefault("row_normalize_adjacency", True)
        return cls(
            model=ModelConfig.from_dict(model),
            train=_from_mapping(TrainConfig, merged["train"], name="TrainConfig"),
            data=_from_mapping(DatasetSpec, data, name="DatasetSpec"),
            pipeline=PipelineOptions.from_dict(merged["pipeline"]),
            holdout_per_identity=int(merged["holdout_per_identity"]),
            scenarios=tuple(str(s) for s in merged["scenarios"]),
            sweep_k=tuple(int(k) for k in merged["sweep_k"]),
            output_dir=str(merged["output_dir"]),
            source={"preset": name, **raw},
        )

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        try:
            raw = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc.msg} at line {exc.lineno})") from None
        return cls.from_dict(raw)

    def to_dict(self) -> dict:
        return {
            "model": self.model.to_dict(),
            "train": dataclasses.asdict(self.train),
            "data": self.data.to_dict(),
            "pipeline": dataclasses.asdict(self.pipeline),
            "holdout_per_identity": self.holdout_per_identity,
            "scenarios": list(self.scenarios),
            "sweep_k": list(self.sweep_k),
            "output_dir": self.output_dir,
        }

    def digest(self) -> str:
        """SHA-256 of the canonical resolved configuration."""
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()

    def with_overrides(
        self,
        seed: int | None = None,
        k: int | None = None,
        enable_sgns: bool | None = None,
        enable_grmm: bool | None = None,
        output_dir: str | None = None,
    ) -> "ExperimentConfig":
        model, train, data, pipeline = self.model, self.train, self.data, self.pipeline
        if seed is not None:
            data = dataclasses.replace(data, seed=seed)
            train = dataclasses.replace(train, seed=seed)
        if k is not None:
            model = dataclasses.replace(model, k=k)
        if enable_sgns is not None:
            train = dataclasses.replace(train, enable_sgns=enable_sgns)
            pipeline = dataclasses.replace(pipeline, enable_sgns=enable_sgns)
        if enable_grmm is not None:
            train = dataclasses.replace(train, enable_grmm=enable_grmm)
            if not enable_grmm:
                pipeline = dataclasses.replace(pipeline, recovery="zero")
        return dataclasses.replace(
            self,
            model=model,
            train=train,
            data=data,
            pipeline=pipeline,
            output_dir=self.output_dir if output_dir is None else output_dir,
        )


def preset(name: str = "toy", **sections) -> ExperimentConfig:
    return ExperimentConfig.from_dict({"preset": name, **sections})
