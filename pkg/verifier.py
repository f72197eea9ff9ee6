"""
Certification and trajectory monitoring.

verify_dissipation checks the dissipation inequality at every buffer vertex and
emits a Certificate. check_trajectory replays a sampled trajectory against the
buffer bounds and the exponential envelopes the certificate implies.
"""

from concurrent.futures import ThreadPoolExecutor
from typing import Callable, List, Optional, Tuple

import numpy as np

from buffer_geometry import BufferSpec, beta, contains, enumerate_vertices, strictly_below_upper, upper_bound
from environments import FD_DELTA, Environment, Trajectory, f_tilde_r_control, simulate
from errors import DomainError, IntegrationError, InvalidStateError, NotAffineError
from logger import get_logger, log_certificate, log_rollout_summary
from models import (
    ApproxMeasure,
    Certificate,
    Finding,
    FindingKind,
    Segment,
    SimulationReport,
    TrajectoryReport,
    Verdict,
    VertexRecord,
)
from police_policy import (
    PolicedPolicy,
    affine_residual,
    controls_within_bounds,
    extract_affine_map,
    policy_hash,
)

logger = get_logger(__name__)

CERTIFICATE_VERSION = 1
STRICT_SLACK = 1e-9
OVERSHOOT_RTOL = 1e-6


def verify_dissipation(
    env: Environment,
    policy: PolicedPolicy,
    spec: BufferSpec,
    eps: float,
    measure: Optional[ApproxMeasure] = None,
    delta: float = FD_DELTA,
) -> Certificate:
    """Check f_r(v) <= -2 eps - beta v_r at every buffer vertex"""
    b = beta(spec)
    vertices = enumerate_vertices(spec)
    reasons: List[str] = []

    if not policy.enforced:
        reasons.append("policy is not enforced affine on the buffer")
    dtheta: Optional[List[List[float]]] = None
    etheta: Optional[List[float]] = None
    try:
        D, e = extract_affine_map(policy)
        dtheta, etheta = D.tolist(), e.tolist()
    except NotAffineError as err:
        reasons.append(err.detail)
    within, worst_excess = controls_within_bounds(policy, env.u_low, env.u_high)
    if not within:
        reasons.append(f"policy leaves the control box at a vertex by {worst_excess:.6g}")

    records: List[VertexRecord] = []
    for v in vertices:
        u = env.clip_control(policy(v))
        threshold = -2.0 * eps - b * v[spec.r - 1]
        try:
            value = f_tilde_r_control(env, v, u, delta)
        except (DomainError, InvalidStateError, IntegrationError) as err:
            records.append(
                VertexRecord(s=v.tolist(), u=u.tolist(), threshold=threshold, passed=False, error=err.detail)
            )
            continue
        margin = threshold - value
        records.append(
            VertexRecord(
                s=v.tolist(),
                u=u.tolist(),
                f_tilde=value,
                threshold=threshold,
                margin=margin,
                passed=margin >= 0.0,
            )
        )

    failing = sum(not record.passed for record in records)
    verdict = Verdict.PASS if failing == 0 and not reasons else Verdict.FAIL
    notes = {
        "policy_hash": policy_hash(policy),
        "within_control_bounds": within,
        "affine_residual": affine_residual(policy, vertices),
        "worst_control_excess": worst_excess,
        "reasons": reasons,
        **{k: v for k, v in env.metadata().items() if k not in ("env",)},
    }
    if measure is not None:
        notes["approx_measure"] = measure.model_dump(mode="json")

    certificate = Certificate(
        version=CERTIFICATE_VERSION,
        env=env.env_id.value,
        beta=b,
        eps=eps,
        vertices=records,
        verdict=verdict,
        dtheta=dtheta,
        etheta=etheta,
        notes=notes,
    )
    log_certificate(logger, env.env_id.value, verdict.value, eps, failing, "; ".join(reasons) or None)
    return certificate


def envelope_bounds(y_derivs_at_t0: np.ndarray, y_max: float, beta_: float, dt_grid: np.ndarray) -> np.ndarray:
    """Exponential envelopes for y, y', ..., y^(r-1) on the elapsed-time grid (len(grid) x r)"""
    derivs = np.asarray(y_derivs_at_t0, dtype=np.float64)
    decay = np.exp(-beta_ * np.asarray(dt_grid, dtype=np.float64)).reshape(-1, 1)
    bounds = decay * derivs.reshape(1, -1)
    bounds[:, 0] = (derivs[0] - y_max) * decay[:, 0] + y_max
    return bounds


def comparison_ode_check(
    beta_: float,
    slack_fn: Callable[[float], float],
    y0: float,
    horizon: float,
    dt: float = 1e-3,
    tol: float = 1e-7,
) -> bool:
    """Integrate y' = -beta y + slack(t) and confirm y(t) stays under y0 exp(-beta t)"""

    def rhs(t: float, y: float) -> float:
        return -beta_ * y + slack_fn(t)

    steps = int(np.ceil(horizon / dt))
    y, t = y0, 0.0
    for k in range(steps):
        k1 = rhs(t, y)
        k2 = rhs(t + 0.5 * dt, y + 0.5 * dt * k1)
        k3 = rhs(t + 0.5 * dt, y + 0.5 * dt * k2)
        k4 = rhs(t + dt, y + dt * k3)
        y = y + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        t = (k + 1) * dt
        if y > y0 * np.exp(-beta_ * t) + tol:
            return False
    return True


def _in_segment(spec: BufferSpec, s: np.ndarray) -> Tuple[bool, str]:
    below = np.nonzero(s[: spec.r] < spec.lower_bounds)[0]
    if below.size:
        return False, f"lower_bound:s{below[0] + 1}"
    if not spec.aux.contains(s[spec.r :]):
        return False, "aux_polytope"
    return True, ""


def _classify(excess: float, scale: float, slack: float, rtol: float) -> Optional[FindingKind]:
    if excess <= slack:
        return None
    if excess <= rtol * max(1.0, scale):
        return FindingKind.OVERSHOOT
    return FindingKind.VIOLATION


def check_trajectory(
    traj: Trajectory,
    spec: BufferSpec,
    rollout: int = 0,
    slack: float = STRICT_SLACK,
    overshoot_rtol: float = OVERSHOOT_RTOL,
) -> TrajectoryReport:
    """Find buffer entries below the upper bounds and audit each in-buffer segment"""
    b = beta(spec)
    states, times = traj.states_s, traj.times
    total = len(times)
    segments: List[Segment] = []
    findings: List[Finding] = []

    i = 0
    while i < total:
        start = next(
            (j for j in range(i, total) if contains(spec, states[j]) and strictly_below_upper(spec, states[j])),
            None,
        )
        if start is None:
            break
        k = start
        exit_reason = "end_of_trajectory"
        while k < total:
            inside, reason = _in_segment(spec, states[k])
            if not inside:
                exit_reason = reason
                break
            s = states[k]
            bar = upper_bound(spec, s)
            scale = float(np.max(np.abs(bar)))
            for idx in range(spec.r):
                kind = _classify(float(s[idx] - bar[idx]), scale, slack, overshoot_rtol)
                if kind is not None:
                    findings.append(
                        Finding(
                            step=k,
                            t=float(times[k]),
                            component=f"s{idx + 1}",
                            value=float(s[idx]),
                            bound=float(bar[idx]),
                            excess=float(s[idx] - bar[idx]),
                            kind=kind,
                        )
                    )
            y_excess = float(traj.outputs[k] - spec.y_max)
            kind = _classify(y_excess, scale, slack, overshoot_rtol)
            if kind is not None:
                findings.append(
                    Finding(
                        step=k,
                        t=float(times[k]),
                        component="y",
                        value=float(traj.outputs[k]),
                        bound=spec.y_max,
                        excess=y_excess,
                        kind=kind,
                    )
                )
            k += 1

        window = states[start:k, : spec.r]
        envelopes = envelope_bounds(states[start, : spec.r], spec.y_max, b, times[start:k] - times[start])
        segments.append(
            Segment(
                start_step=start,
                end_step=k,
                t0=float(times[start]),
                t1=float(times[min(k, total - 1)]),
                exit_reason=exit_reason,
                envelope_min_slack=np.min(envelopes - window, axis=0).tolist(),
            )
        )
        i = k

    violations = [f for f in findings if f.kind == FindingKind.VIOLATION]
    overshoots = [f for f in findings if f.kind == FindingKind.OVERSHOOT]
    return TrajectoryReport(
        rollout=rollout,
        entered=bool(segments),
        t0=segments[0].t0 if segments else None,
        t1=segments[0].t1 if segments else None,
        segments=segments,
        violations=violations,
        overshoots=overshoots,
        constraint_ok=not any(f.component == "y" for f in violations),
        upper_ok=not any(f.component != "y" for f in violations),
    )


def interior_dissipation_excess(
    env: Environment,
    policy: PolicedPolicy,
    spec: BufferSpec,
    states: np.ndarray,
    delta: float = FD_DELTA,
) -> float:
    """Max of f_r(s) + beta s_r over the given in-buffer states"""
    b = beta(spec)
    points = np.atleast_2d(np.asarray(states, dtype=np.float64))
    if points.shape[0] == 0:
        return float("-inf")
    excess = [
        f_tilde_r_control(env, s, env.clip_control(policy(s)), delta) + b * s[spec.r - 1] for s in points
    ]
    return float(max(excess))


def run_rollouts(
    env: Environment,
    policy: Callable[[np.ndarray], np.ndarray],
    spec: BufferSpec,
    count: int,
    seed: int,
    horizon: Optional[float] = None,
    low: Optional[np.ndarray] = None,
    high: Optional[np.ndarray] = None,
    workers: int = 1,
) -> Tuple[List[Trajectory], SimulationReport]:
    """Seeded deterministic rollouts from the initial-state distribution, each checked against the buffer"""

    def one(index: int) -> Tuple[Trajectory, TrajectoryReport]:
        rng = np.random.default_rng([seed, index])
        x0 = env.sample_initial(rng, low, high)
        traj = simulate(env, policy, x0, horizon=horizon)
        return traj, check_trajectory(traj, spec, rollout=index)

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(one, range(count)))
    else:
        results = [one(index) for index in range(count)]

    trajectories = [traj for traj, _ in results]
    reports = [report for _, report in results]
    summary = SimulationReport(
        env=env.env_id.value,
        rollouts=count,
        entered=sum(r.entered for r in reports),
        violations=sum(len(r.violations) for r in reports),
        overshoots=sum(len(r.overshoots) for r in reports),
        reports=reports,
    )
    log_rollout_summary(logger, summary.env, count, summary.entered, summary.violations, summary.overshoots)
    return trajectories, summary
