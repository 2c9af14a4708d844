"""Solve configuration: YAML validated with pydantic.

Validation errors name the offending field and, where the YAML parser
can tell, the line it was written on.
"""
from __future__ import annotations

import hashlib
import json
from pathlib import Path
from typing import Literal

import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from ..detect import BlobBackend, VariationalFlowBackend
from ..pipeline.stages import (
    SmoothingConfig,
    StageSpec,
    default_expression_stages,
    default_rigid_stages,
)
from ..procedural import fiducial_colors
from ..render import AppearanceFitOptions
from ..solver import SolveOptions


class ConfigError(ValueError):
    pass


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid")


class SolverSection(_Strict):
    max_iterations: int = 30
    initial_radius: float = 1.0
    min_radius: float = 1e-10
    max_radius: float = 1e4
    accept_ratio: float = 0.0
    shrink_ratio: float = 0.05
    expand_ratio: float = 0.75
    shrink_factor: float = 0.5
    expand_factor: float = 2.0
    gradient_tolerance: float = 1e-10
    step_tolerance: float = 1e-10
    regularization: float = 1e-8

    def options(self) -> SolveOptions:
        try:
            return SolveOptions(**self.model_dump())
        except ValueError as e:
            raise ConfigError(str(e)) from e


class StageSection(_Strict):
    name: str
    theta: bool = False
    t: bool = False
    shapes: list[str] = Field(default_factory=list)
    landmarks: Literal["all", "non_jaw", "jaw_only", "mouth_heavy"] = "all"
    landmark_weight: float = Field(1.0, ge=0)
    edge_weight: float = Field(1.0, ge=0)
    regularization: float = Field(0.0, ge=0)
    prior_weight: float = Field(0.0, ge=0)
    solver: SolverSection = Field(default_factory=SolverSection)

    def spec(self) -> StageSpec:
        return StageSpec(self.name, self.theta, self.t, tuple(self.shapes), self.landmarks,
                         self.landmark_weight, self.edge_weight, self.regularization, self.prior_weight,
                         self.solver.options())


class DetectorSection(_Strict):
    backend: Literal["blob"] = "blob"
    beta: float = Field(50.0, gt=0)
    validity_threshold: float = Field(0.1, ge=0)
    support: float = Field(0.15, gt=0)
    blur_sigma: float = Field(2.0, ge=0)
    gain: float = Field(5.0, gt=0)

    def build(self):
        return BlobBackend(fiducial_colors(), support=self.support, blur_sigma=self.blur_sigma, gain=self.gain)


class FlowSection(_Strict):
    backend: Literal["variational"] = "variational"
    levels: int = Field(3, ge=1)
    iterations: int = Field(20, ge=1)
    smoothness: float = Field(0.1, gt=0)
    resolution: int = Field(512, ge=8)
    dtype: Literal["float32", "float64"] = "float64"
    mask_dilation: int = Field(5, ge=0)

    def build(self):
        return VariationalFlowBackend(self.levels, self.iterations, self.smoothness, self.resolution, self.dtype)


class RigidSection(_Strict):
    stages: list[StageSection] | None = None

    def specs(self):
        return default_rigid_stages() if self.stages is None else tuple(s.spec() for s in self.stages)


class ExpressionSection(_Strict):
    enabled: bool = True
    regularization: float = Field(100.0, ge=0)
    tether_rigid: bool = True
    prior_weight: float = Field(1.0, ge=0)
    stages: list[StageSection] | None = None

    def specs(self):
        if self.stages is not None:
            return tuple(s.spec() for s in self.stages)
        return default_expression_stages(self.regularization, self.prior_weight, self.tether_rigid)


class InfillSection(_Strict):
    sweeps: int = Field(2, ge=1)
    max_iterations: int = Field(20, ge=1)
    shapes: list[str] = Field(default_factory=lambda: ["jaw", "mouth"])

    def stage(self):
        return StageSpec("infill", theta=True, t=True, shapes=tuple(self.shapes),
                         options=SolveOptions(max_iterations=self.max_iterations))


class SmoothingSection(_Strict):
    mode: Literal["averaging", "self_flow", "plate_flow", "hybrid"] = "hybrid"
    window: list[float] = Field(default_factory=lambda: [0.25, 0.5, 0.25])
    sweeps: int = Field(1, ge=1)
    prior_weight: float = Field(1.0, ge=0)
    gauss_seidel: bool = False
    max_iterations: int = Field(10, ge=1)
    shapes: list[str] = Field(default_factory=lambda: ["jaw", "mouth"])

    @field_validator("window")
    @classmethod
    def _window(cls, v):
        if len(v) != 3:
            raise ValueError("window needs exactly three weights")
        return v

    def build(self) -> SmoothingConfig:
        stage = StageSpec("flow_smooth", theta=True, t=True, shapes=tuple(self.shapes),
                          options=SolveOptions(max_iterations=self.max_iterations))
        try:
            return SmoothingConfig(self.mode, tuple(self.window), self.sweeps, self.prior_weight,
                                   self.gauss_seidel, stage)
        except ValueError as e:
            raise ConfigError(f"smoothing: {e}") from e


class AppearanceSection(_Strict):
    iterations: int = Field(100, ge=1)
    smoothness: float = Field(1e-2, ge=0)

    def options(self):
        return AppearanceFitOptions(iterations=self.iterations, smoothness=self.smoothness)


class FailureSection(_Strict):
    # mean landmark residual (pixels) above which a solved frame is marked failed; off when null
    landmark_residual_threshold: float | None = None


class SolveConfig(_Strict):
    seed: int = 0
    cameras: list[str] | None = None
    detector: DetectorSection = Field(default_factory=DetectorSection)
    flow: FlowSection = Field(default_factory=FlowSection)
    rigid: RigidSection = Field(default_factory=RigidSection)
    expression: ExpressionSection = Field(default_factory=ExpressionSection)
    infill: InfillSection = Field(default_factory=InfillSection)
    smoothing: SmoothingSection = Field(default_factory=SmoothingSection)
    reestimate: ExpressionSection = Field(default_factory=ExpressionSection)
    appearance: AppearanceSection = Field(default_factory=AppearanceSection)
    failure: FailureSection = Field(default_factory=FailureSection)

    @model_validator(mode="after")
    def _stages_build(self):
        for sec in (self.rigid, self.expression, self.reestimate):
            sec.specs()
        self.smoothing.build()
        return self

    def digest(self):
        return hashlib.sha256(json.dumps(self.model_dump(), sort_keys=True).encode()).hexdigest()

    def validate_for_rig(self, rig):
        try:
            for sec in (self.rigid, self.expression, self.reestimate):
                for s in sec.specs():
                    s.validate(rig)
            self.infill.stage().validate(rig)
            self.smoothing.build().flow_stage.validate(rig)
        except ValueError as e:
            raise ConfigError(f"config does not match the rig: {e}") from e


def _node_line(node, loc):
    """Line (1-based) of the YAML node addressed by a pydantic error location."""
    line = node.start_mark.line + 1 if node is not None else None
    for key in loc:
        if isinstance(node, yaml.MappingNode):
            nxt = None
            for k, v in node.value:
                if k.value == key:
                    nxt = v
                    line = k.start_mark.line + 1
                    break
            node = nxt
        elif isinstance(node, yaml.SequenceNode) and isinstance(key, int) and key < len(node.value):
            node = node.value[key]
            line = node.start_mark.line + 1
        else:
            break
        if node is None:
            break
    return line


def parse_config(text, source="<config>") -> SolveConfig:
    try:
        node = yaml.compose(text)
        data = yaml.safe_load(text)
    except yaml.YAMLError as e:
        mark = getattr(e, "problem_mark", None)
        where = f"line {mark.line + 1}" if mark is not None else "unknown line"
        raise ConfigError(f"{source}: {where}: malformed YAML: {getattr(e, 'problem', e)}") from e
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise ConfigError(f"{source}: line 1: the config must be a mapping")
    try:
        return SolveConfig.model_validate(data)
    except ValidationError as e:
        msgs = []
        for err in e.errors():
            loc = tuple(err["loc"])
            field = ".".join(str(x) for x in loc) or "<root>"
            line = _node_line(node, loc)
            msgs.append(f"{source}: line {line}: field '{field}': {err['msg']}")
        raise ConfigError("\n".join(msgs)) from e
    except ConfigError as e:
        raise ConfigError(f"{source}: {e}") from e


def load_config(path=None) -> SolveConfig:
    if path is None:
        return SolveConfig()
    p = Path(path)
    return parse_config(p.read_text(), str(p))
