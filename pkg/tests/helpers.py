from typing import Optional

import numpy as np

from buffer_geometry import AuxPolytope, BufferSpec, tight_lower_bounds
from environments import Environment
from models import EnvironmentId


class QuadraticDrift(Environment):
    """y'' = y^2 + u; the closed loop is not affine in y"""

    env_id = EnvironmentId.DOUBLE_INTEGRATOR
    n, m, r = 2, 1, 2

    def __init__(self, dt: float = 0.01, horizon: float = 5.0):
        self.dt = dt
        self.horizon = horizon
        self.initial_low = np.array([-0.5, 0.0])
        self.initial_high = np.array([0.5, 1.0])

    @property
    def C(self) -> np.ndarray:
        return np.array([1.0, 0.0])

    @property
    def y_max(self) -> float:
        return 1.0

    @property
    def u_low(self) -> np.ndarray:
        return np.array([-10.0])

    @property
    def u_high(self) -> np.ndarray:
        return np.array([10.0])

    def f(self, x: np.ndarray, u: np.ndarray) -> np.ndarray:
        return np.array([x[1], x[0] ** 2 + float(np.asarray(u).reshape(-1)[0])])

    def to_s(self, x: np.ndarray) -> np.ndarray:
        return np.array(x, dtype=np.float64)

    def from_s(self, s: np.ndarray) -> np.ndarray:
        return np.array(s, dtype=np.float64)


def make_spec(
    r: int,
    y_min: float = 0.0,
    y_max: float = 1.0,
    ydot_max: float = 1.0,
    lower_bounds: Optional[np.ndarray] = None,
    aux: Optional[AuxPolytope] = None,
) -> BufferSpec:
    lo = tight_lower_bounds(r, y_min, y_max, ydot_max) if lower_bounds is None else np.asarray(lower_bounds)
    return BufferSpec(
        r=r,
        y_min=y_min,
        y_max=y_max,
        ydot_max=ydot_max,
        lower_bounds=lo,
        aux=aux or AuxPolytope.trivial(),
    )

