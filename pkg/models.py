from enum import Enum
from typing import Any, Dict, List, Optional

from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator


# Enums
class Activation(str, Enum):
    RELU = "relu"
    TANH = "tanh"
    IDENTITY = "identity"
    CLIP = "clip"


class OptimizerKind(str, Enum):
    SGD = "sgd"
    MOMENTUM = "momentum"
    ADAM = "adam"


class EnvironmentId(str, Enum):
    CARTPOLE = "cartpole"
    SHUTTLE = "shuttle"
    DOUBLE_INTEGRATOR = "double_integrator"


class PolicyKind(str, Enum):
    """Policy families sharing one training pipeline"""

    BASELINE = "baseline"
    POLICED = "policed"
    FIXED_AFFINE = "fixed_affine"


class Verdict(str, Enum):
    PASS = "pass"
    FAIL = "fail"


class FindingKind(str, Enum):
    """Upper-bound excess classes along a monitored trajectory"""

    VIOLATION = "violation"
    OVERSHOOT = "overshoot"


class StrictModel(BaseModel):
    model_config = ConfigDict(extra="forbid")


# Config Models
class EnvironmentBlock(StrictModel):
    id: EnvironmentId
    params: Dict[str, float] = Field(default_factory=dict)
    dt: Optional[float] = None
    horizon: Optional[float] = None
    initial_low: Optional[List[float]] = None
    initial_high: Optional[List[float]] = None

    @field_validator("dt", "horizon")
    @classmethod
    def positive(cls, value: Optional[float]) -> Optional[float]:
        if value is not None and value <= 0:
            raise ValueError("must be positive")
        return value


class AuxBox(StrictModel):
    low: List[float]
    high: List[float]

    @model_validator(mode="after")
    def ordered(self) -> "AuxBox":
        if len(self.low) != len(self.high):
            raise ValueError("aux box low/high lengths differ")
        if any(lo > hi for lo, hi in zip(self.low, self.high)):
            raise ValueError("aux box low must not exceed high")
        return self


class BufferBlock(StrictModel):
    y_min: float
    y_max: float
    ydot_max: float
    lower_bounds: List[float]
    aux_box: Optional[AuxBox] = None
    aux_vertices: Optional[List[List[float]]] = None

    @model_validator(mode="after")
    def one_aux_shape(self) -> "BufferBlock":
        if self.aux_box is not None and self.aux_vertices is not None:
            raise ValueError("give either aux_box or aux_vertices, not both")
        if not self.lower_bounds:
            raise ValueError("lower_bounds must list at least y_min")
        return self


class TrainConfig(StrictModel):
    seed: int = 0
    kind: PolicyKind = PolicyKind.POLICED
    environment: Optional[EnvironmentId] = None
    iterations: int = 200
    episodes: int = 8
    steps_per_episode: int = 500
    dt: Optional[float] = None
    gamma: float = 0.99
    gae_lambda: float = 0.95
    clip_ratio: float = 0.2
    actor_lr: float = 3e-4
    critic_lr: float = 1e-3
    epochs: int = 5
    minibatch_size: int = 256
    hidden_sizes: List[int] = Field(default_factory=lambda: [128, 128])
    critic_hidden_sizes: List[int] = Field(default_factory=lambda: [128, 128])
    init_log_std: float = -0.5
    entropy_coef: float = 0.0
    value_coef: float = 0.5
    max_grad_norm: float = 0.5
    penalty_weight: float = 1.0
    bound_penalty_weight: float = 1.0
    penalize_baseline: bool = False
    eps: float = 0.1
    eps_refresh_every: int = 50
    eps_samples: int = 300
    residual_samples: int = 10000
    checkpoint_every: int = 50
    workers: int = 1
    input_scale: Optional[List[float]] = None
    affine_d: Optional[List[List[float]]] = None
    affine_e: Optional[List[float]] = None

    @field_validator("gamma")
    @classmethod
    def discount_range(cls, value: float) -> float:
        if not 0.0 < value <= 1.0:
            raise ValueError("gamma must lie in (0, 1]")
        return value

    @field_validator("clip_ratio")
    @classmethod
    def clip_range(cls, value: float) -> float:
        if not 0.0 < value < 1.0:
            raise ValueError("clip_ratio must lie in (0, 1)")
        return value

    @field_validator("penalty_weight", "bound_penalty_weight", "eps")
    @classmethod
    def non_negative(cls, value: float) -> float:
        if value < 0:
            raise ValueError("must be non-negative")
        return value

    @field_validator("iterations", "episodes", "steps_per_episode", "epochs", "minibatch_size", "workers")
    @classmethod
    def at_least_one(cls, value: int) -> int:
        if value < 1:
            raise ValueError("must be at least 1")
        return value

    @model_validator(mode="after")
    def affine_policy_given(self) -> "TrainConfig":
        if self.kind == PolicyKind.FIXED_AFFINE and (
            self.affine_d is None or self.affine_e is None
        ):
            raise ValueError("fixed_affine policies need affine_d and affine_e")
        return self


class VerifyBlock(StrictModel):
    samples: int = 500
    seed: int = 7
    inflation: float = 1.2
    abs_margin: float = 1e-3
    holdout_factor: int = 10
    fd_delta: float = 1e-4
    eps: Optional[float] = None

    @field_validator("inflation")
    @classmethod
    def inflation_at_least_one(cls, value: float) -> float:
        if value < 1.0:
            raise ValueError("inflation must be >= 1")
        return value


class SimulateBlock(StrictModel):
    rollouts: int = 100
    seed: int = 11
    horizon: Optional[float] = None
    initial_low: Optional[List[float]] = None
    initial_high: Optional[List[float]] = None


class ExperimentConfig(StrictModel):
    name: str
    environment: EnvironmentBlock
    buffer: BufferBlock
    train: TrainConfig = Field(default_factory=TrainConfig)
    verify: VerifyBlock = Field(default_factory=VerifyBlock)
    simulate: SimulateBlock = Field(default_factory=SimulateBlock)
    output_dir: Optional[str] = None


# Report Models
class LowerBoundCheck(BaseModel):
    index: int
    condition: str
    family: str
    required: float
    closed_form: float
    actual: float
    ok: bool


class LowerBoundReport(BaseModel):
    checks: List[LowerBoundCheck] = Field(default_factory=list)

    @property
    def ok(self) -> bool:
        return all(check.ok for check in self.checks)

    @property
    def violations(self) -> List[LowerBoundCheck]:
        return [check for check in self.checks if not check.ok]


class ApproxMeasure(BaseModel):
    """Fitted scalar affine model of the actuated output derivative"""

    w_s: List[float]
    w_u: List[float]
    w0: float
    eps_fit: float
    inflation: float
    abs_margin: float
    eps: float
    sample_count: int
    seed: int
    rank: int
    holdout_max_residual: Optional[float] = None
    holdout_violations: int = 0
    policy_hash: Optional[str] = None


class VertexRecord(BaseModel):
    s: List[float]
    u: List[float]
    f_tilde: Optional[float] = None
    threshold: float
    margin: Optional[float] = None
    passed: bool
    error: Optional[str] = None


class Certificate(BaseModel):
    version: int = 1
    env: str
    beta: float
    eps: float
    vertices: List[VertexRecord]
    verdict: Verdict
    dtheta: Optional[List[List[float]]] = None
    etheta: Optional[List[float]] = None
    notes: Dict[str, Any] = Field(default_factory=dict)

    @property
    def min_margin(self) -> float:
        margins = [v.margin for v in self.vertices if v.margin is not None]
        return min(margins) if margins else float("-inf")


class Finding(BaseModel):
    step: int
    t: float
    component: str
    value: float
    bound: float
    excess: float
    kind: FindingKind


class Segment(BaseModel):
    start_step: int
    end_step: int
    t0: float
    t1: float
    exit_reason: str
    envelope_min_slack: List[float]


class TrajectoryReport(BaseModel):
    rollout: int = 0
    entered: bool
    t0: Optional[float] = None
    t1: Optional[float] = None
    segments: List[Segment] = Field(default_factory=list)
    violations: List[Finding] = Field(default_factory=list)
    overshoots: List[Finding] = Field(default_factory=list)
    constraint_ok: bool = True
    upper_ok: bool = True


class SimulationReport(BaseModel):
    env: str
    rollouts: int
    entered: int
    violations: int
    overshoots: int
    reports: List[TrajectoryReport] = Field(default_factory=list)


class IterationRecord(BaseModel):
    iter: int
    return_mean: float
    penalty: float
    min_vertex_margin: float
    eps: float
    bound_penalty: float = 0.0
    affine_residual: Optional[float] = None
