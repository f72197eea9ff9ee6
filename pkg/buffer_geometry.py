"""
Buffer polytope next to an affine output constraint.

The buffer lives in transformed coordinates s = (y, y', ..., y^(r-1), rest):
constant lower bounds on s_1..s_r, upper bounds coupled to the previous
coordinate, and an auxiliary polytope on the remaining n - r coordinates.
Vertices are returned as float64 arrays with one vertex per row.
"""

import itertools
from dataclasses import dataclass
from functools import cached_property
from typing import List, Optional, Sequence, Tuple

import numpy as np
from scipy.spatial import ConvexHull, QhullError

from errors import DegenerateBufferError
from logger import get_logger
from models import BufferBlock, LowerBoundCheck, LowerBoundReport

logger = get_logger(__name__)

DEDUP_ATOL = 1e-12
DEDUP_RTOL = 1e-12
VALIDATOR_RTOL = 1e-12


@dataclass
class AuxPolytope:
    """Bounded polytope for the coordinates past the output derivatives"""

    vertices: np.ndarray
    low: Optional[np.ndarray] = None
    high: Optional[np.ndarray] = None

    def __post_init__(self):
        self.vertices = np.atleast_2d(np.asarray(self.vertices, dtype=np.float64))
        if self.vertices.shape[0] < 1:
            raise DegenerateBufferError("auxiliary polytope needs at least one vertex")

    @classmethod
    def box(cls, low: Sequence[float], high: Sequence[float]) -> "AuxPolytope":
        low_arr = np.asarray(low, dtype=np.float64)
        high_arr = np.asarray(high, dtype=np.float64)
        if low_arr.shape != high_arr.shape or np.any(low_arr > high_arr):
            raise DegenerateBufferError("auxiliary box needs matching low <= high")
        corners = []
        for corner in itertools.product(*zip(low_arr, high_arr)):
            if not any(np.array_equal(corner, c) for c in corners):
                corners.append(np.array(corner))
        return cls(vertices=np.array(corners).reshape(len(corners), low_arr.size), low=low_arr, high=high_arr)

    @classmethod
    def trivial(cls) -> "AuxPolytope":
        """Zero-dimensional polytope for systems with n == r"""
        return cls(vertices=np.zeros((1, 0)), low=np.zeros(0), high=np.zeros(0))

    @property
    def dim(self) -> int:
        return self.vertices.shape[1]

    @cached_property
    def _facets(self) -> np.ndarray:
        try:
            return ConvexHull(self.vertices).equations
        except QhullError as e:
            raise DegenerateBufferError(f"auxiliary vertices do not span a full-dimensional polytope: {e}")

    def contains(self, p: np.ndarray, tol: float = 0.0) -> bool:
        point = np.asarray(p, dtype=np.float64).reshape(self.dim)
        if self.dim == 0:
            return True
        if self.low is not None and self.high is not None:
            return bool(np.all(point >= self.low - tol) and np.all(point <= self.high + tol))
        if self.dim == 1:
            return bool(self.vertices.min() - tol <= point[0] <= self.vertices.max() + tol)
        return bool(np.all(self._facets[:, :-1] @ point + self._facets[:, -1] <= tol))


@dataclass
class BufferSpec:
    r: int
    y_min: float
    y_max: float
    ydot_max: float
    lower_bounds: np.ndarray
    aux: AuxPolytope

    def __post_init__(self):
        self.lower_bounds = np.asarray(self.lower_bounds, dtype=np.float64)

    @property
    def n(self) -> int:
        return self.r + self.aux.dim


def spec_from_block(block: BufferBlock) -> BufferSpec:
    if block.aux_box is not None:
        aux = AuxPolytope.box(block.aux_box.low, block.aux_box.high)
    elif block.aux_vertices is not None:
        aux = AuxPolytope(vertices=np.asarray(block.aux_vertices, dtype=np.float64))
    else:
        aux = AuxPolytope.trivial()
    return BufferSpec(
        r=len(block.lower_bounds),
        y_min=block.y_min,
        y_max=block.y_max,
        ydot_max=block.ydot_max,
        lower_bounds=np.asarray(block.lower_bounds, dtype=np.float64),
        aux=aux,
    )


def _check_spec(spec: BufferSpec):
    if spec.r < 1:
        raise DegenerateBufferError(f"relative degree must be positive, got {spec.r}")
    if not np.isfinite([spec.y_min, spec.y_max, spec.ydot_max]).all():
        raise DegenerateBufferError("buffer limits must be finite")
    if spec.y_max <= spec.y_min:
        raise DegenerateBufferError(f"y_max ({spec.y_max}) must exceed y_min ({spec.y_min})")
    if spec.ydot_max <= 0:
        raise DegenerateBufferError(f"ydot_max must be positive, got {spec.ydot_max}")
    if spec.lower_bounds.shape != (spec.r,):
        raise DegenerateBufferError(f"expected {spec.r} lower bounds, got {spec.lower_bounds.shape}")
    if spec.lower_bounds[0] != spec.y_min:
        raise DegenerateBufferError("first lower bound must equal y_min")


def beta(spec: BufferSpec) -> float:
    """Dissipation rate ydot_max / (y_max - y_min)"""
    _check_spec(spec)
    return spec.ydot_max / (spec.y_max - spec.y_min)


def _beta_unchecked(spec: BufferSpec) -> float:
    return spec.ydot_max / (spec.y_max - spec.y_min)


def upper_bound(spec: BufferSpec, s: np.ndarray) -> np.ndarray:
    """Coupled upper bounds [y_max, beta (y_max - s_1), -beta s_2, ..., -beta s_{r-1}]"""
    state = np.asarray(s, dtype=np.float64)
    b = _beta_unchecked(spec)
    bounds = np.empty(spec.r)
    bounds[0] = spec.y_max
    if spec.r >= 2:
        bounds[1] = b * (spec.y_max - state[0])
    if spec.r >= 3:
        bounds[2:] = -b * state[1 : spec.r - 1]
    return bounds


def _excess_ok(value: np.ndarray, bound: np.ndarray, tol: float) -> bool:
    return bool(np.all(value <= bound + tol * np.maximum(1.0, np.abs(bound))))


def contains(spec: BufferSpec, s: np.ndarray, tol: float = 0.0) -> bool:
    state = np.asarray(s, dtype=np.float64)
    head = state[: spec.r]
    if not _excess_ok(spec.lower_bounds, head, tol):
        return False
    if not _excess_ok(head, upper_bound(spec, state), tol):
        return False
    return spec.aux.contains(state[spec.r :], tol=tol)


def strictly_below_upper(spec: BufferSpec, s: np.ndarray, slack: float = 0.0) -> bool:
    """Strict inequality on every coupled bound; values equal up to round-off count as on the face"""
    state = np.asarray(s, dtype=np.float64)
    head, bound = state[: spec.r], upper_bound(spec, state)
    on_face = np.isclose(head, bound, rtol=DEDUP_RTOL, atol=DEDUP_ATOL)
    return bool(np.all((head < bound - slack) & ~on_face))


def validate_lower_bounds(spec: BufferSpec) -> LowerBoundReport:
    """Check that every lower bound sits below the smallest reachable upper bound"""
    b = beta(spec)
    lo = spec.lower_bounds
    checks: List[LowerBoundCheck] = []
    for k in range(2, spec.r + 1):
        if k == 2:
            required, closed_form = 0.0, 0.0
            family, condition = "velocity_floor", "s2min <= 0"
        elif k == 3:
            required = -b * spec.ydot_max
            closed_form = required
            family, condition = "odd_chain", "s3min <= -beta*ydot_max"
        else:
            required = b * b * lo[k - 3]
            if k % 2:
                closed_form = -(b ** (k - 2)) * spec.ydot_max
                family = "odd_chain"
            else:
                closed_form = (b ** (k - 2)) * lo[1]
                family = "even_chain"
            condition = f"s{k}min <= beta^2*s{k - 2}min"
        actual = float(lo[k - 1])
        ok = actual <= required + VALIDATOR_RTOL * max(1.0, abs(required))
        checks.append(
            LowerBoundCheck(
                index=k,
                condition=condition,
                family=family,
                required=required,
                closed_form=closed_form,
                actual=actual,
                ok=ok,
            )
        )
    report = LowerBoundReport(checks=checks)
    for check in report.violations:
        logger.warning(
            f"Lower bound s{check.index}min = {check.actual:.6g} breaks {check.condition} "
            f"(needs <= {check.required:.6g}); trajectories may leave the buffer through its floor"
        )
    return report


def tight_lower_bounds(r: int, y_min: float, y_max: float, ydot_max: float) -> np.ndarray:
    """Largest lower bounds that still pass validation; minimises the vertex count"""
    if y_max <= y_min or ydot_max <= 0:
        raise DegenerateBufferError("tight bounds need y_max > y_min and ydot_max > 0")
    b = ydot_max / (y_max - y_min)
    lo = np.zeros(r)
    lo[0] = y_min
    if r >= 3:
        lo[2] = -b * ydot_max
    for k in range(3, r):
        lo[k] = b * b * lo[k - 2]
    return lo


def fibonacci_vertex_count(r: int) -> int:
    if r < 1:
        raise ValueError(f"relative degree must be >= 1, got {r}")
    prev, cur = 0, 1
    for _ in range(r + 1):
        prev, cur = cur, prev + cur
    return cur


def _close(a: float, b: float) -> bool:
    return abs(a - b) <= DEDUP_ATOL + DEDUP_RTOL * max(abs(a), abs(b))


def _dedup(points: np.ndarray) -> np.ndarray:
    kept: List[np.ndarray] = []
    for p in points:
        if not any(all(_close(a, b) for a, b in zip(p, q)) for q in kept):
            kept.append(p)
    return np.array(kept).reshape(len(kept), points.shape[1])


def vertex_tree(spec: BufferSpec) -> np.ndarray:
    """Candidates from the lower/upper branching tree over s_1..s_r, unfiltered"""
    _check_spec(spec)
    prefixes: List[List[float]] = [[]]
    for k in range(spec.r):
        children = []
        for prefix in prefixes:
            padded = np.zeros(spec.r)
            padded[:k] = prefix
            lo = float(spec.lower_bounds[k])
            hi = float(upper_bound(spec, padded)[k])
            children.append(prefix + [lo])
            if not _close(lo, hi):
                children.append(prefix + [hi])
        prefixes = children
    return np.array(prefixes, dtype=np.float64) + 0.0


def buffer_inequalities(spec: BufferSpec) -> Tuple[np.ndarray, np.ndarray]:
    """(A, b) with A s_{1:r} <= b describing the output-derivative part of the buffer"""
    b = beta(spec)
    r = spec.r
    lower = -np.eye(r)
    upper = np.eye(r)
    rhs_upper = np.zeros(r)
    rhs_upper[0] = spec.y_max
    if r >= 2:
        upper[1, 0] = b
        rhs_upper[1] = b * spec.y_max
    for k in range(2, r):
        upper[k, k - 1] = b
    return np.vstack([lower, upper]), np.concatenate([-spec.lower_bounds, rhs_upper])


def halfspace_vertices(spec: BufferSpec, tol: float = 1e-9) -> np.ndarray:
    """Brute force: solve every r-subset of active constraints and keep feasible points"""
    A, rhs = buffer_inequalities(spec)
    r = spec.r
    found = []
    for rows in itertools.combinations(range(A.shape[0]), r):
        sub = A[list(rows)]
        if np.linalg.matrix_rank(sub) < r:
            continue
        point = np.linalg.solve(sub, rhs[list(rows)])
        if np.all(A @ point <= rhs + tol * np.maximum(1.0, np.abs(rhs))):
            found.append(point + 0.0)
    if not found:
        return np.zeros((0, r))
    return _dedup(np.array(found))


def enumerate_vertices(spec: BufferSpec) -> np.ndarray:
    """Exact vertex set of the buffer (N x n)"""
    _check_spec(spec)
    if validate_lower_bounds(spec).ok:
        head = _dedup(vertex_tree(spec))
    else:
        head = halfspace_vertices(spec)
        if head.shape[0] == 0:
            raise DegenerateBufferError("buffer is empty: lower bounds exceed every upper bound")
    rows = [np.concatenate([h, a]) for h in head for a in spec.aux.vertices]
    return np.array(rows, dtype=np.float64).reshape(len(rows), spec.n)
