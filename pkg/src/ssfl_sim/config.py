#!/usr/bin/env python3
#
# Copyright (c) 2025 SnapFS, LLC
#
# Licensed under the Apache License, Version 2.0 (the "License");
# you may not use this file except in compliance with the License.
# You may obtain a copy of the License at
#
#     http://www.apache.org/licenses/LICENSE-2.0
#
# Unless required by applicable law or agreed to in writing, software
# distributed under the License is distributed on an "AS IS" BASIS,
# WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
# See the License for the specific language governing permissions and
# limitations under the License.


import configparser
import os
from pathlib import Path
from typing import Any, Dict, List, Literal, Union

from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from .errors import ConfigError


class Settings(BaseModel):
    # Worker threads for concurrent client rounds (0 = one per client)
    threads: int = int(os.getenv("SSFL_THREADS", "0"))

    # loguru level
    log_level: str = os.getenv("SSFL_LOG_LEVEL", "INFO")

    # Default output directory for CLI commands
    out_dir: str = os.getenv("SSFL_OUT_DIR", "runs")


settings = Settings()


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid", validate_assignment=True)


def _split_list(value: Any) -> Any:
    if isinstance(value, str):
        return [v.strip() for v in value.split(",") if v.strip()]
    return value


class DatasetSection(_Section):
    n_classes: int = Field(3, ge=2)
    samples_per_class: int = Field(300, ge=1)
    length: int = Field(256, ge=16)
    channels: int = Field(1, ge=1)
    noise_std: float = Field(0.8, ge=0.0)
    # cycles per window; class j sits at base_frequency + j * frequency_step
    base_frequency: int = Field(6, ge=1)
    frequency_step: int = Field(3, ge=1)
    harmonics: int = Field(2, ge=0)
    harmonic_amplitude: float = Field(0.5, ge=0.0, lt=1.0)
    modulation_depth: float = Field(0.5, ge=0.0, le=1.0)
    modulation_frequency: int = Field(2, ge=1)

    @model_validator(mode="after")
    def check_nyquist(self) -> "DatasetSection":
        top = self.base_frequency + (self.n_classes - 1) * self.frequency_step
        top = top * (self.harmonics + 1) + self.modulation_frequency
        if top >= self.length // 2:
            raise ValueError(
                f"highest generated frequency {top} must stay below length/2 = {self.length // 2}"
            )
        return self


class FederationSection(_Section):
    clients: int = Field(5, ge=1)
    nu: float = Field(0.5, gt=0.0)
    chi: float = Field(0.10, gt=0.0, le=1.0)
    rounds: int = Field(60, ge=1)
    stragglers: int = Field(0, ge=0)
    kappa: float = Field(0.9, ge=0.0, lt=1.0)
    local_epochs: int = Field(1, ge=1)
    finetune_epochs: int = Field(5, ge=0)
    min_client_samples: int = Field(10, ge=5)

    @model_validator(mode="after")
    def check_stragglers(self) -> "FederationSection":
        if self.stragglers >= self.clients:
            raise ValueError(
                f"stragglers={self.stragglers} must be smaller than clients={self.clients}"
            )
        return self


class WeightingSection(_Section):
    lambda_max: float = Field(1.0, gt=0.0)
    ema_momentum: float = Field(0.95, ge=0.0, lt=1.0)
    eta_f: float = Field(3.0, ge=0.0)
    t1_fraction: float = Field(0.3, ge=0.0, le=1.0)
    t2_fraction: float = Field(0.7, ge=0.0, le=1.0)
    theta_c: float = Field(0.95, ge=0.0)

    @model_validator(mode="after")
    def check_ramp(self) -> "WeightingSection":
        if not self.t1_fraction < self.t2_fraction:
            raise ValueError("t1_fraction must be smaller than t2_fraction")
        return self


class ContrastiveSection(_Section):
    tau: float = Field(0.5, gt=0.0)
    alpha: float = Field(1.0, ge=0.0)


class AugmentSection(_Section):
    jitter_std: float = Field(0.05, ge=0.0)
    scale_low: float = Field(0.9, gt=0.0)
    scale_high: float = Field(1.1, gt=0.0)
    max_segments: int = Field(8, ge=1)
    strong_jitter_std: float = Field(0.05, ge=0.0)

    @model_validator(mode="after")
    def check_scale(self) -> "AugmentSection":
        if self.scale_low > self.scale_high:
            raise ValueError("scale_low must not exceed scale_high")
        return self


class ModelSection(_Section):
    conv_channels: List[int] = Field(default_factory=lambda: [16, 32])
    kernel_size: int = Field(8, ge=1)
    stride: int = Field(1, ge=1)
    padding: int = Field(4, ge=0)
    pool: int = Field(2, ge=1)
    proj_hidden: int = Field(64, ge=1)
    embed_dim: int = Field(32, ge=1)

    @field_validator("conv_channels", mode="before")
    @classmethod
    def split_channels(cls, v: Any) -> Any:
        return _split_list(v)

    @field_validator("conv_channels")
    @classmethod
    def check_channels(cls, v: List[int]) -> List[int]:
        if not v or any(c < 1 for c in v):
            raise ValueError("conv_channels must be a non-empty list of positive ints")
        return v


class OptimSection(_Section):
    learning_rate: float = Field(0.001, gt=0.0)
    beta1: float = Field(0.9, ge=0.0, lt=1.0)
    beta2: float = Field(0.999, ge=0.0, lt=1.0)
    eps: float = Field(1e-8, gt=0.0)
    batch_size: int = Field(16, ge=2)


class TrialsSection(_Section):
    seeds: List[int] = Field(default_factory=lambda: [0, 1, 2, 3, 4])

    @field_validator("seeds", mode="before")
    @classmethod
    def split_seeds(cls, v: Any) -> Any:
        return _split_list(v)

    @field_validator("seeds")
    @classmethod
    def check_seeds(cls, v: List[int]) -> List[int]:
        if not v or any(s < 0 for s in v):
            raise ValueError("seeds must be a non-empty list of non-negative ints")
        return v


Method = Literal["ssfl-dcsl", "fedavg-supervised", "fixmatch-threshold"]


class RunSection(_Section):
    method: Method = "ssfl-dcsl"
    sequential: bool = False


class AblationSection(_Section):
    tlaw: bool = True
    lcl: bool = True
    gcl: bool = True
    spnp: bool = True
    dt: bool = True
    literal_aggregation: bool = False
    weighted_prototypes: bool = False


class VerifySection(_Section):
    bound_trials: int = Field(1000, ge=1)
    pool_size: int = Field(256, ge=4)
    pool_classes: int = Field(3, ge=2)
    grad_seeds: int = Field(20, ge=1)
    grad_step: float = Field(1e-5, gt=0.0)
    grad_tolerance: float = Field(1e-4, gt=0.0)
    grad_entries: int = Field(0, ge=0)
    aggregation_instances: int = Field(100, ge=1)


class RunConfig(_Section):
    dataset: DatasetSection = Field(default_factory=DatasetSection)
    federation: FederationSection = Field(default_factory=FederationSection)
    weighting: WeightingSection = Field(default_factory=WeightingSection)
    contrastive: ContrastiveSection = Field(default_factory=ContrastiveSection)
    augment: AugmentSection = Field(default_factory=AugmentSection)
    model: ModelSection = Field(default_factory=ModelSection)
    optim: OptimSection = Field(default_factory=OptimSection)
    trials: TrialsSection = Field(default_factory=TrialsSection)
    run: RunSection = Field(default_factory=RunSection)
    ablation: AblationSection = Field(default_factory=AblationSection)
    verify: VerifySection = Field(default_factory=VerifySection)

    def with_updates(self, **sections: Dict[str, Any]) -> "RunConfig":
        """Copy with per-section overrides, re-validated."""
        data = self.model_dump()
        for name, values in sections.items():
            if name not in data:
                raise ConfigError(f"unknown config section [{name}]")
            data[name].update(values)
        return _validate(data, "<override>")


SECTIONS: Dict[str, type] = {
    name: field.annotation for name, field in RunConfig.model_fields.items()
}

# flat key -> owning section, so keys may appear before any [section] header
KEY_OWNER: Dict[str, str] = {}
for _section, _model in SECTIONS.items():
    for _key in _model.model_fields:
        assert _key not in KEY_OWNER, f"config key {_key} defined twice"
        KEY_OWNER[_key] = _section

_ROOT = "__root__"


def _validate(data: Dict[str, Any], source: str) -> RunConfig:
    try:
        return RunConfig.model_validate(data)
    except ValidationError as e:
        problems = []
        for err in e.errors():
            where = ".".join(str(p) for p in err["loc"])
            problems.append(f"{where}: {err['msg']}")
        raise ConfigError(f"invalid config {source}: " + "; ".join(problems)) from None


def parse_config(text: str, source: str = "<string>") -> RunConfig:
    parser = configparser.ConfigParser(interpolation=None, default_section="__defaults__")
    parser.optionxform = str  # keep key case
    try:
        parser.read_string(f"[{_ROOT}]\n" + text, source=source)
    except configparser.Error as e:
        raise ConfigError(f"cannot parse {source}: {e}") from None

    data: Dict[str, Dict[str, str]] = {}
    for section in parser.sections():
        if section != _ROOT and section not in SECTIONS:
            raise ConfigError(f"{source}: unknown section [{section}]")
    for section in parser.sections():
        for key, value in parser.items(section):
            owner = KEY_OWNER.get(key)
            if owner is None:
                raise ConfigError(f"{source}: unknown key '{key}'")
            if section not in (_ROOT, owner):
                raise ConfigError(f"{source}: key '{key}' belongs to [{owner}], not [{section}]")
            data.setdefault(owner, {})[key] = value
    return _validate(data, source)


def load_config(path: Union[str, Path]) -> RunConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    return parse_config(path.read_text(encoding="utf-8"), source=str(path))


def _format(value: Any) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, (list, tuple)):
        return ",".join(_format(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def render_config(cfg: RunConfig) -> str:
    lines: List[str] = []
    for section, values in cfg.model_dump().items():
        lines.append(f"[{section}]")
        for key, value in values.items():
            lines.append(f"{key} = {_format(value)}")
        lines.append("")
    return "\n".join(lines)


def dump_config(cfg: RunConfig, path: Union[str, Path]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(render_config(cfg), encoding="utf-8")
    return path
