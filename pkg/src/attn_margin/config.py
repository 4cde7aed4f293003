from __future__ import annotations

from enum import Enum
from pathlib import Path
from typing import Any, List, Optional, Tuple

import yaml
from pydantic import BaseModel, Field, model_validator

from .datasets import BUILTINS
from .losses import LossKind


class ScenarioName(str, Enum):
    FIG1_GLOBAL = "fig1_global"
    FIG1_LOCAL = "fig1_local"
    FIG1_MULTI = "fig1_multi"
    FIG2_JOINT_SUPPORT = "fig2_joint_support"
    FIG2_JOINT_NONSUPPORT = "fig2_joint_nonsupport"
    FIG2_PROBABILITIES = "fig2_probabilities"
    FIG3_LOSS_BIAS = "fig3_loss_bias"
    FIG4_CENSUS = "fig4_census"
    SATURATION_DYNAMICS = "saturation_dynamics"
    LEMMA2_EQUIVALENCE = "lemma2_equivalence"
    CONE_FAILURE = "cone_failure"


class SourceKind(str, Enum):
    BUILTIN = "builtin"
    RANDOM = "random"
    FILE = "file"


class DatasetSource(BaseModel):
    kind: SourceKind = SourceKind.BUILTIN
    name: Optional[str] = None
    n: int = Field(6, ge=1)
    T: int = Field(10, ge=1)
    d: int = Field(16, ge=1)
    seed: Optional[int] = None
    path: Optional[Path] = None

    @model_validator(mode="after")
    def _check_kind(self) -> "DatasetSource":
        if self.kind is SourceKind.RANDOM and self.seed is None:
            raise ValueError("random dataset sources need a seed")
        if self.kind is SourceKind.FILE and self.path is None:
            raise ValueError("file dataset sources need a path")
        if self.kind is SourceKind.BUILTIN and self.name is not None:
            if self.name not in BUILTINS and not self.name.startswith("loss_bias("):
                raise ValueError(f"unknown builtin dataset {self.name!r}")
        return self


class OptimizerMethod(str, Enum):
    GD = "gd"
    NORMALIZED_GD = "normalized_gd"


class OptimizerSpec(BaseModel):
    method: OptimizerMethod = OptimizerMethod.NORMALIZED_GD
    eta: Optional[float] = Field(None, gt=0.0)
    steps: int = Field(1000, ge=0, le=100_000)
    grad_tol: float = Field(1e-10, ge=0.0)


class ExperimentConfig(BaseModel):
    scenario: ScenarioName
    dataset: DatasetSource = Field(default_factory=DatasetSource)
    optimizer: OptimizerSpec = Field(default_factory=OptimizerSpec)
    loss: LossKind = LossKind.LOGISTIC
    targets: List[str] = Field(default_factory=lambda: ["gmm"])
    output_dir: Path = Path("output")
    seed: int = 0
    trials: int = Field(200, ge=1)
    dims: List[int] = Field(default_factory=lambda: [2, 4, 8, 16, 32, 64])
    jobs: int = Field(1, ge=1)
    radii: List[float] = Field(default_factory=lambda: [1.0, 2.0, 5.0, 10.0, 20.0])
    joint_schedule: List[Tuple[float, float]] = Field(
        default_factory=lambda: [(1.0, 1.0), (2.0, 2.0), (4.0, 4.0), (8.0, 8.0), (16.0, 16.0)]
    )
    bias_scores: List[float] = Field(default_factory=lambda: [1.0, 2.0, 3.0, 5.0])

    @model_validator(mode="after")
    def _check_schedules(self) -> "ExperimentConfig":
        if any(d < 1 for d in self.dims):
            raise ValueError("census dimensions must be positive")
        if any(b <= a for a, b in zip(self.radii, self.radii[1:])) or any(r <= 0 for r in self.radii):
            raise ValueError("radii must be positive and strictly increasing")
        if any(c <= 0 for c in self.bias_scores):
            raise ValueError("loss-bias scores must be positive")
        return self

    @classmethod
    def load(cls, path: Path, **overrides: Any) -> "ExperimentConfig":
        """Read a YAML (or JSON) config file; keyword overrides replace top-level fields."""
        with Path(path).expanduser().open("r", encoding="utf-8") as handle:
            raw = yaml.safe_load(handle)
        return cls.model_validate({**(raw or {}), **overrides})

    def with_overrides(
        self,
        seed: Optional[int] = None,
        trials: Optional[int] = None,
        jobs: Optional[int] = None,
        output_dir: Optional[Path] = None,
    ) -> "ExperimentConfig":
        updates = {
            key: value
            for key, value in (("seed", seed), ("trials", trials), ("jobs", jobs), ("output_dir", output_dir))
            if value is not None
        }
        return self.model_validate({**self.model_dump(), **updates})
