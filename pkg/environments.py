"""
Deterministic continuous-time systems behind an evaluation-only interface.

Each environment exposes f(x, u), the output row C, the state transformation
T (to_s) and its inverse (from_s), the control box and the relative degree of
its output. Everything downstream (buffer certification, training, trajectory
checks) touches the dynamics only through these calls.
"""

import math
from abc import ABC, abstractmethod
from dataclasses import dataclass
from typing import Any, Callable, Dict, List, Optional, Sequence

import numpy as np
import pandas as pd
from pydantic import BaseModel, ConfigDict, ValidationError, field_validator

from errors import ConfigError, DomainError, IntegrationError, InvalidStateError
from logger import get_logger
from models import EnvironmentBlock, EnvironmentId

logger = get_logger(__name__)

FD_DELTA = 1e-4
MIN_SIN_GAMMA = 1e-9


class CartPoleParams(BaseModel):
    model_config = ConfigDict(extra="forbid")

    cart_mass: float = 1.0
    pole_mass: float = 0.1
    half_length: float = 0.5
    gravity: float = 9.8
    gear: float = 10.0
    u_max: float = 3.0
    y_max: float = 0.2
    fall_angle: float = 1.0

    @field_validator("cart_mass", "pole_mass", "half_length", "gravity", "gear", "u_max", "fall_angle")
    @classmethod
    def positive(cls, value: float) -> float:
        if value <= 0:
            raise ValueError("must be positive")
        return value


class ShuttleParams(BaseModel):
    model_config = ConfigDict(extra="forbid")

    s_over_m: float = 0.9118
    cl0: float = 2.3
    cd0: float = 0.0975
    k: float = 0.1819
    rho0: float = 0.0027
    gravity: float = 32.174
    scale_height: float = 27890.0
    alpha_max: float = math.pi / 3
    y_max: float = 0.0

    @field_validator("s_over_m", "cl0", "cd0", "k", "rho0", "gravity", "scale_height", "alpha_max")
    @classmethod
    def positive(cls, value: float) -> float:
        if value <= 0:
            raise ValueError("must be positive")
        return value


class DoubleIntegratorParams(BaseModel):
    model_config = ConfigDict(extra="forbid")

    u_max: float = 5.0
    y_max: float = 1.0


@dataclass
class Trajectory:
    times: np.ndarray
    states_x: np.ndarray
    states_s: np.ndarray
    controls: np.ndarray
    outputs: np.ndarray

    def __len__(self) -> int:
        return len(self.times)

    def to_frame(self) -> pd.DataFrame:
        columns: Dict[str, np.ndarray] = {"t": self.times}
        for j in range(self.states_x.shape[1]):
            columns[f"x{j + 1}"] = self.states_x[:, j]
        for j in range(self.states_s.shape[1]):
            columns[f"s{j + 1}"] = self.states_s[:, j]
        for j in range(self.controls.shape[1]):
            columns[f"u{j + 1}"] = self.controls[:, j]
        columns["y"] = self.outputs
        return pd.DataFrame(columns)


class Environment(ABC):
    env_id: EnvironmentId
    n: int
    m: int
    r: int
    dt: float
    horizon: float
    initial_low: np.ndarray
    initial_high: np.ndarray

    @property
    @abstractmethod
    def C(self) -> np.ndarray: ...

    @property
    @abstractmethod
    def y_max(self) -> float: ...

    @property
    @abstractmethod
    def u_low(self) -> np.ndarray: ...

    @property
    @abstractmethod
    def u_high(self) -> np.ndarray: ...

    @abstractmethod
    def f(self, x: np.ndarray, u: np.ndarray) -> np.ndarray: ...

    @abstractmethod
    def to_s(self, x: np.ndarray) -> np.ndarray: ...

    @abstractmethod
    def from_s(self, s: np.ndarray) -> np.ndarray: ...

    @property
    def default_input_scale(self) -> np.ndarray:
        return np.ones(self.n)

    def output(self, x: np.ndarray) -> float:
        return float(self.C @ np.asarray(x, dtype=np.float64))

    def clip_control(self, u: np.ndarray) -> np.ndarray:
        return np.clip(np.asarray(u, dtype=np.float64).reshape(self.m), self.u_low, self.u_high)

    def sample_initial(
        self,
        rng: np.random.Generator,
        low: Optional[Sequence[float]] = None,
        high: Optional[Sequence[float]] = None,
    ) -> np.ndarray:
        lo = self.initial_low if low is None else np.asarray(low, dtype=np.float64)
        hi = self.initial_high if high is None else np.asarray(high, dtype=np.float64)
        return rng.uniform(lo, hi)

    def should_stop(self, x: np.ndarray, t: float, horizon: Optional[float] = None) -> bool:
        """End of a simulated rollout"""
        return t >= (horizon or self.horizon) - 1e-12

    def training_done(self, x: np.ndarray) -> bool:
        """Early termination of a training episode"""
        return False

    def metadata(self) -> Dict[str, Any]:
        return {"env": self.env_id.value, "n": self.n, "m": self.m, "r": self.r}


class CartPole(Environment):
    """Frictionless cart-pole; x = (p, theta, p_dot, theta_dot), y = theta"""

    env_id = EnvironmentId.CARTPOLE
    n, m, r = 4, 1, 2
    permutation = np.array([1, 3, 0, 2])

    def __init__(self, params: Optional[CartPoleParams] = None, dt: float = 0.01, horizon: float = 10.0):
        self.params = params or CartPoleParams()
        self.dt = dt
        self.horizon = horizon
        self.initial_low = np.array([-0.5, -0.05, -0.5, -0.5])
        self.initial_high = np.array([0.5, 0.15, 0.5, 1.5])
        self._inverse = np.argsort(self.permutation)

    @property
    def C(self) -> np.ndarray:
        return np.array([0.0, 1.0, 0.0, 0.0])

    @property
    def y_max(self) -> float:
        return self.params.y_max

    @property
    def u_low(self) -> np.ndarray:
        return np.array([-self.params.u_max])

    @property
    def u_high(self) -> np.ndarray:
        return np.array([self.params.u_max])

    @property
    def default_input_scale(self) -> np.ndarray:
        return np.array([5.0, 0.5, 1.0, 1.0])

    def f(self, x: np.ndarray, u: np.ndarray) -> np.ndarray:
        return cartpole_f(x, u, self.params)

    def to_s(self, x: np.ndarray) -> np.ndarray:
        return np.asarray(x, dtype=np.float64)[self.permutation]

    def from_s(self, s: np.ndarray) -> np.ndarray:
        return np.asarray(s, dtype=np.float64)[self._inverse]

    def should_stop(self, x: np.ndarray, t: float, horizon: Optional[float] = None) -> bool:
        return super().should_stop(x, t, horizon) or abs(x[1]) > self.params.fall_angle

    def training_done(self, x: np.ndarray) -> bool:
        return abs(x[1]) > self.params.y_max


def cartpole_f(x: np.ndarray, u: np.ndarray, params: CartPoleParams) -> np.ndarray:
    """Cart-pole derivative; the cart force is gear * u (gear 10 by default, u in [-u_max, u_max])"""
    _, theta, p_dot, theta_dot = np.asarray(x, dtype=np.float64)
    force = params.gear * float(np.asarray(u, dtype=np.float64).reshape(-1)[0])
    total = params.cart_mass + params.pole_mass
    pole_ml = params.pole_mass * params.half_length
    sin_t, cos_t = math.sin(theta), math.cos(theta)

    temp = (force + pole_ml * theta_dot**2 * sin_t) / total
    theta_acc = (params.gravity * sin_t - cos_t * temp) / (
        params.half_length * (4.0 / 3.0 - params.pole_mass * cos_t**2 / total)
    )
    p_acc = temp - pole_ml * theta_acc * cos_t / total
    return np.array([p_dot, theta_dot, p_acc, theta_acc])


class Shuttle(Environment):
    """Shuttle descent; x = (h, gamma, v), y = -h, control is the angle of attack"""

    env_id = EnvironmentId.SHUTTLE
    n, m, r = 3, 1, 2

    def __init__(self, params: Optional[ShuttleParams] = None, dt: float = 0.05, horizon: float = 60.0):
        self.params = params or ShuttleParams()
        self.dt = dt
        self.horizon = horizon
        self.initial_low = np.array([500.0, math.radians(-30.0), 300.0])
        self.initial_high = np.array([500.0, math.radians(-10.0), 400.0])

    @property
    def C(self) -> np.ndarray:
        return np.array([-1.0, 0.0, 0.0])

    @property
    def y_max(self) -> float:
        return self.params.y_max

    @property
    def u_low(self) -> np.ndarray:
        return np.array([0.0])

    @property
    def u_high(self) -> np.ndarray:
        return np.array([self.params.alpha_max])

    @property
    def default_input_scale(self) -> np.ndarray:
        return np.array([1.0 / 500.0, 1.0 / 100.0, 1.0])

    def f(self, x: np.ndarray, u: np.ndarray) -> np.ndarray:
        return shuttle_f(x, u, self.params)

    def to_s(self, x: np.ndarray) -> np.ndarray:
        h, gamma, v = np.asarray(x, dtype=np.float64)
        return np.array([-h, -v * math.sin(gamma), gamma])

    def from_s(self, s: np.ndarray) -> np.ndarray:
        s1, s2, s3 = np.asarray(s, dtype=np.float64)
        sin_g = math.sin(s3)
        if abs(sin_g) < MIN_SIN_GAMMA:
            raise DomainError(f"flight path angle {s3} too close to level flight to recover speed")
        v = -s2 / sin_g
        if v <= 0:
            raise DomainError(f"transformed state {s.tolist()} maps to non-positive speed {v}")
        return np.array([-s1, s3, v])

    def should_stop(self, x: np.ndarray, t: float, horizon: Optional[float] = None) -> bool:
        return super().should_stop(x, t, horizon) or x[0] <= 0.0

    def training_done(self, x: np.ndarray) -> bool:
        return x[0] <= 0.0

    def metadata(self) -> Dict[str, Any]:
        meta = super().metadata()
        meta["gravity"] = self.params.gravity
        return meta


def shuttle_f(x: np.ndarray, u: np.ndarray, params: ShuttleParams) -> np.ndarray:
    h, gamma, v = np.asarray(x, dtype=np.float64)
    if v <= 0:
        raise InvalidStateError(f"shuttle speed must be positive, got {v}")
    alpha = float(np.asarray(u, dtype=np.float64).reshape(-1)[0])
    rho = params.rho0 * math.exp(-h / params.scale_height)
    cl = params.cl0 * math.sin(alpha) ** 2 * math.cos(alpha)
    cd = params.cd0 + params.k * cl**2
    half_s_over_m = 0.5 * params.s_over_m

    h_dot = v * math.sin(gamma)
    gamma_dot = rho * v * cl * half_s_over_m - params.gravity * math.cos(gamma) / v
    v_dot = -rho * v**2 * cd * half_s_over_m - params.gravity * math.sin(gamma)
    return np.array([h_dot, gamma_dot, v_dot])


class DoubleIntegrator(Environment):
    """y'' = u with T the identity"""

    env_id = EnvironmentId.DOUBLE_INTEGRATOR
    n, m, r = 2, 1, 2

    def __init__(self, params: Optional[DoubleIntegratorParams] = None, dt: float = 0.01, horizon: float = 5.0):
        self.params = params or DoubleIntegratorParams()
        self.dt = dt
        self.horizon = horizon
        self.initial_low = np.array([-0.5, 0.0])
        self.initial_high = np.array([0.5, 2.0])

    @property
    def C(self) -> np.ndarray:
        return np.array([1.0, 0.0])

    @property
    def y_max(self) -> float:
        return self.params.y_max

    @property
    def u_low(self) -> np.ndarray:
        return np.array([-self.params.u_max])

    @property
    def u_high(self) -> np.ndarray:
        return np.array([self.params.u_max])

    def f(self, x: np.ndarray, u: np.ndarray) -> np.ndarray:
        return np.array([x[1], float(np.asarray(u).reshape(-1)[0])])

    def to_s(self, x: np.ndarray) -> np.ndarray:
        return np.array(x, dtype=np.float64)

    def from_s(self, s: np.ndarray) -> np.ndarray:
        return np.array(s, dtype=np.float64)


ENVIRONMENTS = {
    EnvironmentId.CARTPOLE: (CartPole, CartPoleParams),
    EnvironmentId.SHUTTLE: (Shuttle, ShuttleParams),
    EnvironmentId.DOUBLE_INTEGRATOR: (DoubleIntegrator, DoubleIntegratorParams),
}


def make_environment(block: EnvironmentBlock) -> Environment:
    env_cls, params_cls = ENVIRONMENTS[block.id]
    try:
        params = params_cls(**block.params)
    except ValidationError as e:
        raise ConfigError(f"invalid {block.id.value} parameters: {e}")
    kwargs: Dict[str, Any] = {}
    if block.dt is not None:
        kwargs["dt"] = block.dt
    if block.horizon is not None:
        kwargs["horizon"] = block.horizon
    env = env_cls(params, **kwargs)
    if block.initial_low is not None:
        env.initial_low = np.asarray(block.initial_low, dtype=np.float64)
    if block.initial_high is not None:
        env.initial_high = np.asarray(block.initial_high, dtype=np.float64)
    return env


def _rk4(env: Environment, x: np.ndarray, u: np.ndarray, dt: float) -> np.ndarray:
    k1 = env.f(x, u)
    k2 = env.f(x + 0.5 * dt * k1, u)
    k3 = env.f(x + 0.5 * dt * k2, u)
    k4 = env.f(x + dt * k3, u)
    return x + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


def rk4_step(env: Environment, x: np.ndarray, u: np.ndarray, dt: float) -> np.ndarray:
    """One classical Runge-Kutta step with the control held constant"""
    if dt <= 0:
        raise IntegrationError(f"step size must be positive, got {dt}")
    x_next = _rk4(env, np.asarray(x, dtype=np.float64), np.asarray(u, dtype=np.float64), dt)
    if not np.all(np.isfinite(x_next)):
        raise IntegrationError(f"non-finite state after step from {np.asarray(x).tolist()}")
    return x_next


def f_tilde_r_control(env: Environment, s: np.ndarray, u: np.ndarray, delta: float = FD_DELTA) -> float:
    """y^(r) at s under a frozen control, by central difference of s_r over +-delta micro-rollouts"""
    x = env.from_s(np.asarray(s, dtype=np.float64))
    return f_tilde_r_state(env, x, u, delta)


def f_tilde_r_state(env: Environment, x: np.ndarray, u: np.ndarray, delta: float = FD_DELTA) -> float:
    control = np.asarray(u, dtype=np.float64).reshape(env.m)
    forward = env.to_s(_rk4(env, x, control, delta))[env.r - 1]
    backward = env.to_s(_rk4(env, x, control, -delta))[env.r - 1]
    return float((forward - backward) / (2.0 * delta))


def f_tilde_r(
    env: Environment,
    policy: Callable[[np.ndarray], np.ndarray],
    s: np.ndarray,
    delta: float = FD_DELTA,
) -> float:
    """Closed-loop y^(r) at s with u = policy(s)"""
    return f_tilde_r_control(env, s, policy(np.asarray(s, dtype=np.float64)), delta)


def simulate(
    env: Environment,
    policy: Callable[[np.ndarray], np.ndarray],
    x0: np.ndarray,
    horizon: Optional[float] = None,
    dt: Optional[float] = None,
) -> Trajectory:
    """Deterministic closed-loop rollout; the policy sees transformed coordinates"""
    step = dt or env.dt
    times: List[float] = []
    xs: List[np.ndarray] = []
    us: List[np.ndarray] = []
    x = np.asarray(x0, dtype=np.float64)
    t = 0.0
    k = 0
    while True:
        s = env.to_s(x)
        u = env.clip_control(policy(s))
        times.append(t)
        xs.append(x)
        us.append(u)
        if env.should_stop(x, t, horizon):
            break
        try:
            x = rk4_step(env, x, u, step)
        except InvalidStateError as e:
            logger.warning(f"Rollout stopped at t={t:.4f}: {e.detail}")
            break
        k += 1
        t = k * step

    states_x = np.array(xs)
    return Trajectory(
        times=np.array(times),
        states_x=states_x,
        states_s=np.array([env.to_s(x) for x in states_x]),
        controls=np.array(us).reshape(len(us), env.m),
        outputs=states_x @ env.C,
    )
