from dataclasses import dataclass
from pathlib import Path
from typing import Callable, List, Optional

import numpy as np
import pandas as pd
import typer
import yaml
from dotenv import load_dotenv
from pydantic import ValidationError
from rich.console import Console
from rich.table import Table

# Load environment
ROOT_DIR = Path(__file__).parent
load_dotenv(ROOT_DIR / ".env")

# Import our modules
from approx_measure import estimate_eps
from buffer_geometry import (
    BufferSpec,
    beta,
    enumerate_vertices,
    fibonacci_vertex_count,
    spec_from_block,
    tight_lower_bounds,
    validate_lower_bounds,
)
from environments import Environment, make_environment
from errors import BufferGuardError, ConfigError, DegenerateBufferError
from logger import get_logger, log_command, log_command_error
from models import ApproxMeasure, ExperimentConfig, FindingKind, PolicyKind, TrainConfig, Verdict
from police_policy import policy_hash
from presets import list_presets, preset_path
from storage import OUTPUT_DIR, ArtifactStore
from trainer import TrainResult, load_checkpoint, save_checkpoint, train
from verifier import run_rollouts, verify_dissipation

# Initialize logger
logger = get_logger(__name__)

app = typer.Typer(
    name="bufferguard",
    help="Dissipation buffers, affine-on-buffer policies and vertex certificates for high relative degree constraints.",
    no_args_is_help=True,
    add_completion=False,
)
console = Console()

CHECKPOINT_NAME = "policy.json"
MEASURE_NAME = "approx_measure.json"

FINDING_COLUMNS = ["rollout", "step", "t", "component", "value", "bound", "excess", "kind"]


# ==================== HELPER FUNCTIONS ====================


@dataclass
class Experiment:
    config: ExperimentConfig
    env: Environment
    spec: BufferSpec
    store: ArtifactStore


def resolve_config_path(config: str) -> Path:
    """A file path, or the name of a shipped preset"""
    path = Path(config)
    if path.is_file():
        return path
    preset = preset_path(config)
    if preset is not None:
        return preset
    raise ConfigError(f"config {config!r} is neither a file nor a preset ({', '.join(list_presets())})")


def check_consistency(config: ExperimentConfig, env: Environment, spec: BufferSpec):
    if abs(spec.y_max - env.y_max) > 1e-12 * max(1.0, abs(env.y_max)):
        raise ConfigError(f"buffer y_max {spec.y_max} differs from the {env.env_id.value} constraint {env.y_max}")
    if spec.r != env.r:
        raise ConfigError(f"buffer has {spec.r} lower bounds, {env.env_id.value} has relative degree {env.r}")
    if spec.n != env.n:
        raise ConfigError(f"auxiliary polytope has dimension {spec.aux.dim}, expected {env.n - env.r}")
    ranges = {
        "environment.initial_low": config.environment.initial_low,
        "environment.initial_high": config.environment.initial_high,
        "simulate.initial_low": config.simulate.initial_low,
        "simulate.initial_high": config.simulate.initial_high,
    }
    for name, values in ranges.items():
        if values is not None and len(values) != env.n:
            raise ConfigError(f"{name} has length {len(values)}, state dimension is {env.n}")
    train_cfg = config.train
    if train_cfg.environment is not None and train_cfg.environment != env.env_id:
        raise ConfigError(f"train block targets {train_cfg.environment.value}, environment is {env.env_id.value}")
    if train_cfg.input_scale is not None and len(train_cfg.input_scale) != env.n:
        raise ConfigError(f"train.input_scale has length {len(train_cfg.input_scale)}, state dimension is {env.n}")
    if train_cfg.affine_d is not None:
        D = np.asarray(train_cfg.affine_d, dtype=np.float64)
        if D.shape != (env.m, env.n) or len(train_cfg.affine_e or []) != env.m:
            raise ConfigError(f"affine_d must be {env.m}x{env.n} and affine_e of length {env.m}")


def load_experiment_config(config: str) -> ExperimentConfig:
    path = resolve_config_path(config)
    try:
        raw = yaml.safe_load(path.read_text())
    except (OSError, yaml.YAMLError) as e:
        raise ConfigError(f"cannot read config {path}: {e}")
    if not isinstance(raw, dict):
        raise ConfigError(f"config {path} must be a mapping")
    try:
        return ExperimentConfig.model_validate(raw)
    except ValidationError as e:
        raise ConfigError(f"invalid config {path}: {e}")


def build_experiment(config: str, out: Optional[Path], check_env: bool = True) -> Experiment:
    """Load a config; vertices only needs the buffer block to be valid"""
    cfg = load_experiment_config(config)
    env = make_environment(cfg.environment)
    try:
        spec = spec_from_block(cfg.buffer)
        beta(spec)
    except DegenerateBufferError as e:
        raise ConfigError(f"invalid buffer: {e.detail}")
    if check_env:
        check_consistency(cfg, env, spec)
    root = out or Path(cfg.output_dir or Path(OUTPUT_DIR) / cfg.name)
    return Experiment(config=cfg, env=env, spec=spec, store=ArtifactStore(root))


def run_command(command: str, body: Callable[[], None]):
    """Run a command body, turning library errors into exit codes"""
    try:
        body()
    except BufferGuardError as e:
        log_command_error(logger, command, e, e.exit_code)
        console.print(f"[red]{command} failed:[/red] {e.detail}")
        raise typer.Exit(code=e.exit_code)


def checkpoint_path(exp: Experiment, checkpoint: Optional[Path]) -> Path:
    return checkpoint if checkpoint is not None else exp.store.root / CHECKPOINT_NAME


def load_policy(exp: Experiment, checkpoint: Optional[Path]) -> TrainResult:
    path = checkpoint_path(exp, checkpoint)
    result = load_checkpoint(path, exp.env)
    logger.info(f"Loaded {result.kind.value} policy from {path} (iteration {result.iteration})")
    return result


def lower_bounds_are_tight(spec: BufferSpec) -> bool:
    tight = tight_lower_bounds(spec.r, spec.y_min, spec.y_max, spec.ydot_max)
    return bool(np.allclose(spec.lower_bounds, tight, rtol=1e-12, atol=1e-12))


def state_columns(n: int) -> List[str]:
    return [f"s{i + 1}" for i in range(n)]


# ==================== COMMANDS ====================

ConfigOption = typer.Option(..., "--config", "-c", help="Experiment config file or preset name")
SeedOption = typer.Option(None, "--seed", help="Override the command's seed")
OutOption = typer.Option(None, "--out", help="Output directory for artifacts")
CheckpointOption = typer.Option(None, "--checkpoint", help="Policy checkpoint (default: <out>/policy.json)")


@app.command()
def vertices(config: str = ConfigOption, out: Optional[Path] = OutOption):
    """Enumerate the buffer vertices and write vertices.csv"""

    def body():
        exp = build_experiment(config, out, check_env=False)
        log_command(logger, "vertices", exp.config.name, None, str(exp.store.root))
        spec = exp.spec
        report = validate_lower_bounds(spec)
        verts = enumerate_vertices(spec)
        exp.store.write_frame("vertices.csv", pd.DataFrame(verts, columns=state_columns(spec.n)))

        table = Table(title=f"Lower bounds ({exp.config.name}, beta={beta(spec):.6g})")
        for column in ("k", "family", "required", "actual", "ok"):
            table.add_column(column)
        for check in report.checks:
            table.add_row(
                str(check.index),
                check.family,
                f"{check.required:.6g}",
                f"{check.actual:.6g}",
                "[green]yes[/green]" if check.ok else "[red]no[/red]",
            )
        console.print(table)
        console.print(f"Vertices: {verts.shape[0]}")
        if lower_bounds_are_tight(spec):
            aux_count = spec.aux.vertices.shape[0]
            predicted = fibonacci_vertex_count(spec.r) * aux_count
            console.print(
                f"Tight lower bounds: F_{spec.r + 2} x |V(P)| = {fibonacci_vertex_count(spec.r)} x {aux_count} = {predicted}"
            )
        exp.store.write_manifest("vertices", exp.config)
        exp.store.write_metadata("vertices")

    run_command("vertices", body)


@app.command("train")
def train_command(
    config: str = ConfigOption,
    seed: Optional[int] = SeedOption,
    out: Optional[Path] = OutOption,
    kind: Optional[PolicyKind] = typer.Option(None, "--kind", help="Override the policy kind"),
    progress: bool = typer.Option(False, "--progress", help="Show a progress bar"),
):
    """Train a policy with PPO and write policy.json plus training_log.csv"""

    def body():
        exp = build_experiment(config, out)
        updates = {k: v for k, v in (("seed", seed), ("kind", kind)) if v is not None}
        try:
            train_cfg = TrainConfig.model_validate({**exp.config.train.model_dump(), **updates})
        except ValidationError as e:
            raise ConfigError(f"invalid train overrides: {e}")
        effective = exp.config.model_copy(update={"train": train_cfg})
        log_command(logger, "train", exp.config.name, train_cfg.seed, str(exp.store.root))

        def checkpoint(result: TrainResult):
            name = f"checkpoints/policy_iter_{result.iteration:04d}.json"
            save_checkpoint(exp.store.path(name), result, exp.env)
            exp.store.track(name)

        result = train(train_cfg, exp.env, exp.spec, checkpoint_fn=checkpoint, progress=progress)
        save_checkpoint(exp.store.path(CHECKPOINT_NAME), result, exp.env)
        exp.store.track(CHECKPOINT_NAME)
        log_frame = pd.DataFrame([record.model_dump() for record in result.log])
        exp.store.write_frame("training_log.csv", log_frame)

        last = result.log[-1] if result.log else None
        console.print(f"[green]Trained {result.kind.value} policy[/green] ({result.iteration} iterations, eps={result.eps:.6g})")
        if last is not None:
            console.print(
                f"Final return {last.return_mean:.4f}, penalty {last.penalty:.6g}, min vertex margin {last.min_vertex_margin:.6g}"
            )
        exp.store.write_manifest("train", effective, train_cfg.seed)
        exp.store.write_metadata("train")

    run_command("train", body)


@app.command("estimate-eps")
def estimate_eps_command(
    config: str = ConfigOption,
    checkpoint: Optional[Path] = CheckpointOption,
    seed: Optional[int] = SeedOption,
    out: Optional[Path] = OutOption,
):
    """Fit the approximation measure of the closed loop over the buffer"""

    def body():
        exp = build_experiment(config, out)
        verify_cfg = exp.config.verify if seed is None else exp.config.verify.model_copy(update={"seed": seed})
        effective = exp.config.model_copy(update={"verify": verify_cfg})
        log_command(logger, "estimate-eps", exp.config.name, verify_cfg.seed, str(exp.store.root))
        result = load_policy(exp, checkpoint)
        measure = estimate_eps(
            exp.env,
            result.policy,
            exp.spec,
            samples=verify_cfg.samples,
            seed=verify_cfg.seed,
            inflation=verify_cfg.inflation,
            abs_margin=verify_cfg.abs_margin,
            holdout_factor=verify_cfg.holdout_factor,
            delta=verify_cfg.fd_delta,
        )
        exp.store.write_json(MEASURE_NAME, measure)
        console.print(
            f"eps = {measure.eps:.6g} (fit residual {measure.eps_fit:.6g}, holdout max {measure.holdout_max_residual})"
        )
        exp.store.write_manifest("estimate-eps", effective, verify_cfg.seed)
        exp.store.write_metadata("estimate-eps")

    run_command("estimate-eps", body)


@app.command()
def verify(
    config: str = ConfigOption,
    checkpoint: Optional[Path] = CheckpointOption,
    eps: Optional[float] = typer.Option(None, "--eps", help="Approximation measure (default: approx_measure.json)"),
    seed: Optional[int] = SeedOption,
    out: Optional[Path] = OutOption,
):
    """Check the dissipation condition at every buffer vertex and write certificate.json"""

    def body():
        exp = build_experiment(config, out)
        verify_cfg = exp.config.verify if seed is None else exp.config.verify.model_copy(update={"seed": seed})
        log_command(logger, "verify", exp.config.name, verify_cfg.seed, str(exp.store.root))
        result = load_policy(exp, checkpoint)

        measure: Optional[ApproxMeasure] = None
        value = eps if eps is not None else verify_cfg.eps
        if value is None and (exp.store.root / MEASURE_NAME).is_file():
            measure = ApproxMeasure.model_validate(exp.store.read_json(MEASURE_NAME))
            current = policy_hash(result.policy)
            if measure.policy_hash != current:
                logger.warning(
                    f"{MEASURE_NAME} was fitted for policy {measure.policy_hash}, checkpoint is {current}; re-estimating eps"
                )
                measure = None
        if value is None and measure is None:
            measure = estimate_eps(
                exp.env,
                result.policy,
                exp.spec,
                samples=verify_cfg.samples,
                seed=verify_cfg.seed,
                inflation=verify_cfg.inflation,
                abs_margin=verify_cfg.abs_margin,
                holdout_factor=verify_cfg.holdout_factor,
                delta=verify_cfg.fd_delta,
            )
        if measure is not None:
            value = measure.eps
        if value is None or value < 0:
            raise ConfigError(f"eps must be non-negative, got {value}")

        certificate = verify_dissipation(exp.env, result.policy, exp.spec, value, measure, delta=verify_cfg.fd_delta)
        exp.store.write_json("certificate.json", certificate)

        failing = [v for v in certificate.vertices if not v.passed]
        colour = "green" if certificate.verdict == Verdict.PASS else "red"
        console.print(
            f"[{colour}]Verdict: {certificate.verdict.value}[/{colour}] "
            f"(eps={value:.6g}, beta={certificate.beta:.6g}, min margin {certificate.min_margin:.6g}, "
            f"{len(failing)} of {len(certificate.vertices)} vertices failing)"
        )
        for reason in certificate.notes.get("reasons", []):
            console.print(f"  - {reason}")
        effective = exp.config.model_copy(update={"verify": verify_cfg.model_copy(update={"eps": value})})
        exp.store.write_manifest("verify", effective, verify_cfg.seed)
        exp.store.write_metadata("verify")

    run_command("verify", body)


@app.command()
def simulate(
    config: str = ConfigOption,
    checkpoint: Optional[Path] = CheckpointOption,
    rollouts: Optional[int] = typer.Option(None, "--rollouts", help="Number of rollouts"),
    seed: Optional[int] = SeedOption,
    out: Optional[Path] = OutOption,
    workers: int = typer.Option(1, "--workers", help="Rollout worker threads"),
):
    """Roll out the deterministic policy and audit every buffer entry"""

    def body():
        exp = build_experiment(config, out)
        updates = {k: v for k, v in (("rollouts", rollouts), ("seed", seed)) if v is not None}
        sim_cfg = exp.config.simulate.model_copy(update=updates)
        if sim_cfg.rollouts < 0:
            raise ConfigError(f"rollouts must be non-negative, got {sim_cfg.rollouts}")
        effective = exp.config.model_copy(update={"simulate": sim_cfg})
        log_command(logger, "simulate", exp.config.name, sim_cfg.seed, str(exp.store.root))
        result = load_policy(exp, checkpoint)

        low = sim_cfg.initial_low if sim_cfg.initial_low is not None else exp.config.environment.initial_low
        high = sim_cfg.initial_high if sim_cfg.initial_high is not None else exp.config.environment.initial_high
        trajectories, report = run_rollouts(
            exp.env,
            result.policy,
            exp.spec,
            sim_cfg.rollouts,
            sim_cfg.seed,
            horizon=sim_cfg.horizon,
            low=None if low is None else np.asarray(low, dtype=np.float64),
            high=None if high is None else np.asarray(high, dtype=np.float64),
            workers=workers,
        )

        portraits = []
        for index, traj in enumerate(trajectories):
            exp.store.write_frame(f"trajectories/rollout_{index:04d}.csv", traj.to_frame())
            portraits.append(
                pd.DataFrame({"rollout": index, "y": traj.states_s[:, 0], "ydot": traj.states_s[:, 1]})
            )
        portrait = pd.concat(portraits, ignore_index=True) if portraits else pd.DataFrame(columns=["rollout", "y", "ydot"])
        exp.store.write_frame("phase_portrait.csv", portrait)

        findings = [
            {"rollout": r.rollout, **f.model_dump(mode="json")}
            for r in report.reports
            for f in [*r.violations, *r.overshoots]
        ]
        exp.store.write_frame("violations.csv", pd.DataFrame(findings, columns=FINDING_COLUMNS))
        exp.store.write_json("simulation_report.json", report)

        colour = "green" if report.violations == 0 else "red"
        console.print(
            f"[{colour}]{report.rollouts} rollouts, {report.entered} entered the buffer, "
            f"{report.violations} violations[/{colour}], {report.overshoots} overshoots"
        )
        if findings:
            worst = max(
                (f for f in findings if f["kind"] == FindingKind.VIOLATION.value),
                key=lambda f: f["excess"],
                default=None,
            )
            if worst is not None:
                console.print(f"  worst violation: rollout {worst['rollout']} {worst['component']} by {worst['excess']:.6g}")
        exp.store.write_manifest("simulate", effective, sim_cfg.seed)
        exp.store.write_metadata("simulate")

    run_command("simulate", body)


if __name__ == "__main__":
    app()
