"""
Policies that are exactly affine on a polytope region.

A ReLU network is affine on a convex region as soon as every hidden unit keeps
one sign over the region's vertices. enforce_affine_region shifts hidden biases
layer by layer until that holds, so the policy reads mu(s) = D s + e on the
buffer and stays a free piecewise-affine network everywhere else.
"""

from dataclasses import dataclass
from typing import Any, Dict, Optional, Sequence, Tuple

import numpy as np
import orjson
import xxhash

from errors import NotAffineError, ShapeError, UnsupportedArchitectureError
from logger import get_logger
from models import Activation
from nn_core import Mlp, forward, forward_raw, mlp_from_dict, mlp_to_dict

logger = get_logger(__name__)

AFFINE_TOL = 1e-9


@dataclass
class PolicedPolicy:
    net: Mlp
    region_vertices: np.ndarray
    input_scale: np.ndarray
    enforced: bool = False

    def __post_init__(self):
        self.region_vertices = np.atleast_2d(np.asarray(self.region_vertices, dtype=np.float64))
        self.input_scale = np.asarray(self.input_scale, dtype=np.float64).reshape(self.net.input_dim)
        if np.any(self.input_scale <= 0):
            raise ShapeError("input scale must be positive in every coordinate")

    @property
    def n(self) -> int:
        return self.net.input_dim

    @property
    def m(self) -> int:
        return self.net.output_dim

    def __call__(self, s: np.ndarray) -> np.ndarray:
        return forward(self.net, np.asarray(s, dtype=np.float64) * self.input_scale)

    def raw(self, s: np.ndarray) -> np.ndarray:
        """Policy output before output clipping"""
        return forward_raw(self.net, np.asarray(s, dtype=np.float64) * self.input_scale)


def enforce_affine_region(
    net: Mlp,
    vertices: np.ndarray,
    input_scale: Optional[Sequence[float]] = None,
) -> PolicedPolicy:
    """Shift hidden biases so every hidden unit keeps one sign over the vertices"""
    if net.hidden_activation != Activation.RELU:
        raise UnsupportedArchitectureError(
            f"affine-region enforcement needs ReLU hidden layers, got {net.hidden_activation.value}"
        )
    verts = np.atleast_2d(np.asarray(vertices, dtype=np.float64))
    if verts.shape[0] == 0 or verts.shape[1] != net.input_dim:
        raise ShapeError(f"need at least one vertex of dimension {net.input_dim}, got {verts.shape}")
    scale = np.ones(net.input_dim) if input_scale is None else np.asarray(input_scale, dtype=np.float64)

    biases = [b.copy() for b in net.biases]
    a = verts * scale
    total_shift = 0.0
    for k in range(len(net.weights) - 1):
        z = a @ net.weights[k].T + biases[k]
        active = (z > 0).sum(axis=0) >= (z < 0).sum(axis=0)
        shift = np.where(
            active,
            np.maximum(0.0, -z.min(axis=0)),
            -np.maximum(0.0, z.max(axis=0)),
        )
        biases[k] = biases[k] + shift
        total_shift += float(np.abs(shift).sum())
        a = np.maximum(a @ net.weights[k].T + biases[k], 0.0)

    logger.debug(f"Affine-region enforcement shifted hidden biases by {total_shift:.6g} in total")
    enforced = Mlp(
        weights=[w.copy() for w in net.weights],
        biases=biases,
        hidden_activation=net.hidden_activation,
        output_activation=net.output_activation,
        output_low=net.output_low,
        output_high=net.output_high,
    )
    return PolicedPolicy(net=enforced, region_vertices=verts, input_scale=scale, enforced=True)


def _fit_vertices(policy: PolicedPolicy) -> Tuple[np.ndarray, np.ndarray, float]:
    verts = policy.region_vertices
    outputs = np.atleast_2d(policy(verts))
    design = np.hstack([verts, np.ones((verts.shape[0], 1))])
    coef, *_ = np.linalg.lstsq(design, outputs, rcond=None)
    D = coef[:-1].T
    e = coef[-1]
    residual = float(np.max(np.abs(outputs - (verts @ D.T + e))))
    return D, e, residual


def extract_affine_map(policy: PolicedPolicy, tol: float = AFFINE_TOL) -> Tuple[np.ndarray, np.ndarray]:
    """(D, e) with policy(s) = D s + e on the region, checked at every vertex"""
    D, e, residual = _fit_vertices(policy)
    if residual > tol:
        raise NotAffineError(f"policy deviates from its affine fit by {residual:.3g} at a region vertex")
    return D, e


def affine_residual(
    policy: PolicedPolicy,
    samples: np.ndarray,
    D: Optional[np.ndarray] = None,
    e: Optional[np.ndarray] = None,
) -> float:
    """Max over samples of |policy(s) - (D s + e)|_inf"""
    points = np.atleast_2d(np.asarray(samples, dtype=np.float64))
    if points.shape[0] == 0:
        return 0.0
    if D is None or e is None:
        D, e, _ = _fit_vertices(policy)
    predicted = points @ D.T + e
    return float(np.max(np.abs(np.atleast_2d(policy(points)) - predicted)))


def controls_within_bounds(policy: PolicedPolicy, low: np.ndarray, high: np.ndarray) -> Tuple[bool, float]:
    """Pre-clip outputs at the region vertices inside [low, high]; returns (ok, worst excess)"""
    raw = np.atleast_2d(policy.raw(policy.region_vertices))
    excess = np.maximum(raw - np.asarray(high), np.asarray(low) - raw)
    worst = float(np.max(excess))
    ok = worst <= 0.0
    if not ok:
        logger.warning(f"Policy leaves the control box at a region vertex by {worst:.6g}")
    return ok, worst


def policy_from_affine(
    D: np.ndarray,
    e: np.ndarray,
    vertices: np.ndarray,
    input_scale: Optional[Sequence[float]] = None,
    low: Optional[Sequence[float]] = None,
    high: Optional[Sequence[float]] = None,
) -> PolicedPolicy:
    """Hidden-layer-free policy s -> clip(D s + e)"""
    D = np.atleast_2d(np.asarray(D, dtype=np.float64))
    e = np.asarray(e, dtype=np.float64).reshape(D.shape[0])
    scale = np.ones(D.shape[1]) if input_scale is None else np.asarray(input_scale, dtype=np.float64)
    clipped = low is not None and high is not None
    net = Mlp(
        weights=[D / scale],
        biases=[e],
        output_activation=Activation.CLIP if clipped else Activation.IDENTITY,
        output_low=None if low is None else np.asarray(low, dtype=np.float64),
        output_high=None if high is None else np.asarray(high, dtype=np.float64),
    )
    return enforce_affine_region(net, vertices, scale)


def policy_to_dict(policy: PolicedPolicy) -> Dict[str, Any]:
    return {
        "net": mlp_to_dict(policy.net),
        "region_vertices": policy.region_vertices.tolist(),
        "input_scale": policy.input_scale.tolist(),
        "enforced": policy.enforced,
    }


def policy_from_dict(payload: Dict[str, Any]) -> PolicedPolicy:
    return PolicedPolicy(
        net=mlp_from_dict(payload["net"]),
        region_vertices=np.asarray(payload["region_vertices"], dtype=np.float64),
        input_scale=np.asarray(payload["input_scale"], dtype=np.float64),
        enforced=bool(payload["enforced"]),
    )


def policy_hash(policy: PolicedPolicy) -> str:
    """xxh64 of the canonical serialized policy"""
    return xxhash.xxh64(orjson.dumps(policy_to_dict(policy), option=orjson.OPT_SORT_KEYS)).hexdigest()
