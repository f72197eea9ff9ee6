"""
Approximation measure of the closed-loop dynamics over the buffer.

Samples the buffer, fits y^(r) ~ w_s . s + w_u . u + w0 by least squares and
turns the largest residual into an over-approximated bound eps.
"""

from typing import Optional

import numpy as np

from buffer_geometry import BufferSpec, beta, enumerate_vertices
from environments import FD_DELTA, Environment, f_tilde_r_control
from logger import get_logger
from models import ApproxMeasure
from police_policy import PolicedPolicy, policy_hash

logger = get_logger(__name__)

RCOND = 1e-10
DEFAULT_INFLATION = 1.2
DEFAULT_ABS_MARGIN = 1e-3


def sample_buffer(spec: BufferSpec, count: int, seed: int, vertices: Optional[np.ndarray] = None) -> np.ndarray:
    """All vertices followed by `count` random convex combinations of them"""
    verts = enumerate_vertices(spec) if vertices is None else np.asarray(vertices, dtype=np.float64)
    rng = np.random.default_rng(seed)
    group = min(spec.n + 1, verts.shape[0])
    extra = np.empty((count, spec.n))
    for i in range(count):
        picked = rng.choice(verts.shape[0], size=group, replace=False)
        weights = rng.dirichlet(np.ones(group))
        extra[i] = weights @ verts[picked]
    return np.vstack([verts, extra])


def _targets(samples: np.ndarray, policy: PolicedPolicy, env: Environment, delta: float):
    controls = np.array([env.clip_control(policy(s)) for s in samples]).reshape(len(samples), env.m)
    values = np.array([f_tilde_r_control(env, s, u, delta) for s, u in zip(samples, controls)])
    return controls, values


def _design(samples: np.ndarray, controls: np.ndarray) -> np.ndarray:
    return np.hstack([samples, controls, np.ones((samples.shape[0], 1))])


def fit_affine(
    samples: np.ndarray,
    policy: PolicedPolicy,
    env: Environment,
    inflation: float = DEFAULT_INFLATION,
    abs_margin: float = DEFAULT_ABS_MARGIN,
    seed: int = 0,
    delta: float = FD_DELTA,
) -> ApproxMeasure:
    """Least-squares affine model of y^(r) in (s, u) and its max residual"""
    points = np.atleast_2d(np.asarray(samples, dtype=np.float64))
    controls, values = _targets(points, policy, env, delta)
    design = _design(points, controls)
    coef, _, rank, _ = np.linalg.lstsq(design, values, rcond=RCOND)
    if rank < design.shape[1]:
        logger.warning(
            f"Rank-deficient regression ({rank} of {design.shape[1]} columns); using the minimum-norm fit"
        )
    eps_fit = float(np.max(np.abs(design @ coef - values)))
    return ApproxMeasure(
        w_s=coef[: env.n].tolist(),
        w_u=coef[env.n : env.n + env.m].tolist(),
        w0=float(coef[-1]),
        eps_fit=eps_fit,
        inflation=inflation,
        abs_margin=abs_margin,
        eps=eps_fit * inflation + abs_margin,
        sample_count=int(points.shape[0]),
        seed=seed,
        rank=int(rank),
        policy_hash=policy_hash(policy),
    )


def measure_residuals(
    measure: ApproxMeasure,
    samples: np.ndarray,
    policy: PolicedPolicy,
    env: Environment,
    delta: float = FD_DELTA,
) -> np.ndarray:
    points = np.atleast_2d(np.asarray(samples, dtype=np.float64))
    controls, values = _targets(points, policy, env, delta)
    coef = np.array([*measure.w_s, *measure.w_u, measure.w0])
    return np.abs(_design(points, controls) @ coef - values)


def extend_measure(
    measure: ApproxMeasure,
    samples: np.ndarray,
    policy: PolicedPolicy,
    env: Environment,
    delta: float = FD_DELTA,
) -> ApproxMeasure:
    """Grow the sample set under the stored fit; eps_fit can only increase"""
    residuals = measure_residuals(measure, samples, policy, env, delta)
    eps_fit = max(measure.eps_fit, float(residuals.max(initial=0.0)))
    return measure.model_copy(
        update={
            "eps_fit": eps_fit,
            "eps": eps_fit * measure.inflation + measure.abs_margin,
            "sample_count": measure.sample_count + len(residuals),
        }
    )


def estimate_eps(
    env: Environment,
    policy: PolicedPolicy,
    spec: BufferSpec,
    samples: int = 500,
    seed: int = 7,
    inflation: float = DEFAULT_INFLATION,
    abs_margin: float = DEFAULT_ABS_MARGIN,
    holdout_factor: int = 10,
    delta: float = FD_DELTA,
) -> ApproxMeasure:
    """Fit on a seeded sample, then validate eps on a fresh holdout sample"""
    beta(spec)
    vertices = enumerate_vertices(spec)
    measure = fit_affine(
        sample_buffer(spec, samples, seed, vertices),
        policy,
        env,
        inflation=inflation,
        abs_margin=abs_margin,
        seed=seed,
        delta=delta,
    )
    if holdout_factor <= 0:
        return measure

    holdout = sample_buffer(spec, samples * holdout_factor, seed + 1, vertices)[vertices.shape[0] :]
    residuals = measure_residuals(measure, holdout, policy, env, delta)
    worst = float(residuals.max(initial=0.0))
    violations = int(np.sum(residuals > measure.eps))
    if violations:
        logger.warning(
            f"Holdout residual {worst:.6g} exceeds eps {measure.eps:.6g} at {violations} of {len(residuals)} samples"
        )
    logger.info(
        f"Approximation measure - eps_fit: {measure.eps_fit:.6g}, eps: {measure.eps:.6g}, "
        f"holdout max: {worst:.6g}, samples: {measure.sample_count}"
    )
    return measure.model_copy(update={"holdout_max_residual": worst, "holdout_violations": violations})
