"""Experiment configuration schema (JSON on disk, validated with pydantic)."""

from __future__ import annotations

import json
from pathlib import Path
from typing import Literal, Optional

from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from .errors import ConfigError
from .nn import LayerSpec, mlp_specs
from .tracker import TrackerHyper

Task = Literal["toy_regression", "uci_regression", "mnist_classification", "mnist_ood"]


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid")


class DataConfig(_Strict):
    source: str = "default"
    path: Optional[str] = None
    target_column: int | str = -1
    n_train: int = Field(20, ge=1)
    n_test: int = Field(241, ge=1)
    train_range: tuple[float, float] = (-2.0, 2.0)
    test_range: tuple[float, float] = (-6.0, 6.0)
    folds: int = Field(20, ge=1)
    test_fraction: float = Field(0.1, gt=0, lt=1)
    ood_source: Optional[str] = None
    ood_path: Optional[str] = None
    max_train: Optional[int] = Field(None, ge=1)
    max_test: Optional[int] = Field(None, ge=1)
    calibration_size: int = Field(2000, ge=1)


class ArchitectureConfig(_Strict):
    hidden: list[int] = [50]
    batchnorm: bool = False
    layers: Optional[list[dict]] = None

    def specs(self, in_dim, out_dim, dropout=0.0):
        if self.layers is not None:
            specs = [LayerSpec(**d) for d in self.layers]
            if dropout > 0:
                out = []
                for s in specs[:-1]:
                    out.append(s)
                    if s.kind == "relu":
                        out.append(LayerSpec.dropout(s.out_dim, dropout))
                specs = out + specs[-1:]
            return specs
        return mlp_specs(in_dim, self.hidden, out_dim, batchnorm=self.batchnorm, dropout=dropout)


class OptimizerConfig(_Strict):
    lr: float = Field(1e-2, gt=0)
    batch_size: int = Field(128, ge=1)
    epochs: int = Field(40, ge=1)
    phase_split: float = Field(0.5, gt=0, lt=1)
    track_every: int = Field(1, ge=1)


class TrackerConfig(_Strict):
    sigma_mu: float = Field(1e-4, ge=0)
    sigma_mu_obs: float = Field(1e-3, gt=0)
    sigma_sigma: float = Field(1e-4, ge=0)
    sigma_sigma_obs: float = Field(1e-3, gt=0)
    variance_rule: Literal["algorithm", "main", "appendix"] = "algorithm"
    var_floor: float = Field(1e-8, ge=0)

    def hyper(self):
        return TrackerHyper(**self.model_dump())


class SamplerConfig(_Strict):
    mode: Literal["rff", "full_cov"] = "rff"
    n_model: int = Field(20, ge=1)
    rff_n: int = Field(10, ge=1)
    sigma_rbf: float = Field(1.0, gt=0)
    per_layer: bool = False
    cov_limit: int = Field(100, ge=1)


class BaselineEntry(_Strict):
    method: Literal["deep_ensemble", "mc_dropout", "gauss_perturb", "mcp"]
    M: int = Field(20, ge=1)
    perturb_scale: float = Field(1.0, ge=0)
    dropout_rate: float = Field(0.1, ge=0, lt=1)


class MetricsConfig(_Strict):
    ece_bins: int = Field(15, ge=1)
    curve_bins: int = Field(10, ge=1)
    binning: Literal["width", "count"] = "width"
    thresholds: int = Field(21, ge=2)


class ExperimentConfig(_Strict):
    task: Task
    name: str = "experiment"
    seed: int = 0
    data: DataConfig = DataConfig()
    architecture: ArchitectureConfig = ArchitectureConfig()
    optimizer: OptimizerConfig = OptimizerConfig()
    tracker: TrackerConfig = TrackerConfig()
    sampler: SamplerConfig = SamplerConfig()
    baselines: list[BaselineEntry] = []
    metrics: MetricsConfig = MetricsConfig()
    output_dir: str = "runs"
    save_ensemble: bool = False

    @field_validator("baselines")
    @classmethod
    def _unique(cls, v):
        names = [b.method for b in v]
        if len(names) != len(set(names)):
            raise ValueError("each baseline method may appear once")
        return v

    @model_validator(mode="after")
    def _task_rules(self):
        if self.task in ("toy_regression", "uci_regression") and "mcp" in [b.method for b in self.baselines]:
            raise ValueError("mcp is a classification baseline")
        if self.task == "uci_regression" and self.data.path is None and self.data.source == "default":
            raise ValueError("uci_regression needs data.path or data.source naming a file under TRADI_DATA_DIR")
        return self

    def baseline(self, method):
        for b in self.baselines:
            if b.method == method:
                return b
        return None


def load_config(source, overrides=None):
    """Parse a JSON file (or dict) into an :class:`ExperimentConfig`."""
    try:
        if isinstance(source, dict):
            raw = dict(source)
        else:
            raw = json.loads(Path(source).read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{source}: invalid JSON: {exc}") from exc
    raw.update({k: v for k, v in (overrides or {}).items() if v is not None})
    try:
        return ExperimentConfig.model_validate(raw)
    except ValidationError as exc:
        raise ConfigError(str(exc)) from exc
