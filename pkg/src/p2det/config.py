"""Run configuration: one JSON document, validated in full before any compute."""

from __future__ import annotations

import json
from pathlib import Path
from typing import Literal

from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator

from p2det.detector import AssignerSettings, LossSettings, ModelConfig, TrainConfig
from p2det.synthgen import SceneConfig


class ConfigError(ValueError):
    """Invalid configuration; the message names the offending key path."""


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


class AssignerConfig(_Section):
    w: float = Field(2.0, gt=0)
    top_k: int = Field(9, ge=1)
    distance_exponent: Literal[1, 2] = 1
    rotated_frame: bool = True
    fixed_threshold: float | None = Field(None, ge=0, le=1)

    def settings(self) -> AssignerSettings:
        return AssignerSettings(self.w, self.top_k, self.rotated_frame, self.distance_exponent, self.fixed_threshold)


class LossConfig(_Section):
    lambdas: tuple[float, float, float] = (1.0, 1.0, 1.0)
    gamma: float = Field(2.0, ge=0)
    alpha_bal: float = Field(0.25, ge=0, le=1)
    bc_inside_weighting: bool = True

    @field_validator("lambdas")
    @classmethod
    def _nonneg(cls, v):
        if any(x < 0 for x in v):
            raise ValueError("every lambda must be >= 0")
        return v

    def settings(self) -> LossSettings:
        return LossSettings(tuple(self.lambdas), self.gamma, self.alpha_bal, self.bc_inside_weighting)


class EvalConfig(_Section):
    iou_thresholds: tuple[float, ...] = (0.5, 0.75)
    score_thresh: float = Field(0.05, ge=0, lt=1)
    nms_iou: float = Field(0.1, gt=0, le=1)
    max_dets: int = Field(100, ge=1)

    @field_validator("iou_thresholds")
    @classmethod
    def _unit(cls, v):
        if not v or any(not 0 < t <= 1 for t in v):
            raise ValueError("thresholds must lie in (0, 1]")
        return v


class DataConfig(_Section):
    seed: int = Field(0, ge=0)
    n_train: int = Field(200, ge=0)
    n_test: int = Field(50, ge=0)


class RunConfig(_Section):
    scene: SceneConfig = SceneConfig()
    model: ModelConfig = ModelConfig()
    assigner: AssignerConfig = AssignerConfig()
    loss: LossConfig = LossConfig()
    train: TrainConfig = TrainConfig()
    eval: EvalConfig = EvalConfig()
    data: DataConfig = DataConfig()

    def dumps(self) -> str:
        return json.dumps(self.model_dump(mode="json"), sort_keys=True, indent=2)


_OPS = {
    "greater_than": (">", "gt"),
    "greater_than_equal": (">=", "ge"),
    "less_than": ("<", "lt"),
    "less_than_equal": ("<=", "le"),
}


def _describe(err: dict) -> str:
    loc = ".".join(str(p) for p in err["loc"])
    kind = err["type"]
    if kind in _OPS:
        op, key = _OPS[kind]
        bound = err["ctx"][key]
        return f"{loc} {op} {bound:g}" if isinstance(bound, (int, float)) else f"{loc} {op} {bound}"
    if kind == "extra_forbidden":
        return f"{loc}: unknown key"
    msg = err["msg"].removeprefix("Value error, ")
    return f"{loc}: {msg}" if loc else msg


def parse_config(obj) -> RunConfig:
    if not isinstance(obj, dict):
        raise ConfigError("config root must be a JSON object")
    try:
        return RunConfig.model_validate(obj)
    except ValidationError as exc:
        raise ConfigError("; ".join(_describe(e) for e in exc.errors(include_url=False))) from None


def load_config(path: str | Path | None) -> RunConfig:
    """Load and validate a JSON config; ``None`` gives all defaults."""
    if path is None:
        return RunConfig()
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    try:
        obj = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON at line {exc.lineno} column {exc.colno}: {exc.msg}") from None
    return parse_config(obj)
