"""
Proximal policy optimization for baseline and buffer-affine policies.

Both policy kinds share the same rollout, advantage and update machinery. The
policed kind additionally re-applies affine-region enforcement after every
actor step and adds a hinge penalty on the vertex dissipation condition.
"""

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, Tuple, Union

import numpy as np
from tqdm import tqdm

from approx_measure import estimate_eps, sample_buffer
from buffer_geometry import BufferSpec, beta, enumerate_vertices
from environments import Environment, f_tilde_r_control, rk4_step
from errors import IncompatibleCheckpointError, IntegrationError, InvalidStateError, TrainingError
from logger import get_logger, log_training_iteration
from models import Activation, EnvironmentId, IterationRecord, OptimizerKind, PolicyKind, TrainConfig
from nn_core import GradTape, Mlp, Optimizer, backward, clip_grad_norm, forward, init_mlp, mlp_from_dict, mlp_to_dict
from police_policy import (
    PolicedPolicy,
    affine_residual,
    enforce_affine_region,
    policy_from_affine,
    policy_from_dict,
    policy_to_dict,
)
from storage import CHECKPOINT_VERSION, read_json_file, write_json_file

logger = get_logger(__name__)

LOG_2PI = math.log(2.0 * math.pi)
CONTROL_FD_STEP = 1e-4
SHUTTLE_SMOOTHNESS = 0.2


# Rewards
def reward_pendulum(x: np.ndarray, u: np.ndarray, limit: float = 0.2) -> float:
    theta = float(x[1])
    if abs(theta) > limit:
        return 0.0
    effort = float(np.sum(np.asarray(u, dtype=np.float64) ** 2))
    return 1.0 - (theta / limit) ** 2 - 0.01 * effort


def reward_shuttle(a_t: float, a_prev: float, h_tf: float, hdot_tf: float, is_final: bool) -> float:
    reward = -SHUTTLE_SMOOTHNESS * abs(a_t - a_prev)
    if is_final:
        reward -= abs(h_tf) + abs(hdot_tf)
    return reward


def reward_double_integrator(x: np.ndarray, u: np.ndarray) -> float:
    return -float(x[0] ** 2 + 0.1 * x[1] ** 2 + 0.01 * np.sum(np.asarray(u) ** 2))


def step_reward(
    env: Environment,
    x_next: np.ndarray,
    u: np.ndarray,
    u_prev: np.ndarray,
    is_final: bool,
) -> float:
    if env.env_id == EnvironmentId.CARTPOLE:
        return reward_pendulum(x_next, u, env.y_max)
    if env.env_id == EnvironmentId.SHUTTLE:
        h_dot = float(x_next[2] * math.sin(x_next[1]))
        return reward_shuttle(float(u[0]), float(u_prev[0]), float(x_next[0]), h_dot, is_final)
    return reward_double_integrator(x_next, u)


def gae(
    rewards: np.ndarray,
    values: np.ndarray,
    gamma: float,
    lam: float,
    dones: Optional[np.ndarray] = None,
) -> np.ndarray:
    """Generalized advantage estimates; values carries one trailing bootstrap entry"""
    rewards = np.asarray(rewards, dtype=np.float64)
    values = np.asarray(values, dtype=np.float64)
    if values.shape[0] != rewards.shape[0] + 1:
        raise ValueError("values needs exactly one more entry than rewards")
    not_done = np.ones_like(rewards) if dones is None else 1.0 - np.asarray(dones, dtype=np.float64)
    advantages = np.zeros_like(rewards)
    running = 0.0
    for t in range(len(rewards) - 1, -1, -1):
        delta = rewards[t] + gamma * values[t + 1] * not_done[t] - values[t]
        running = delta + gamma * lam * not_done[t] * running
        advantages[t] = running
    return advantages


# Vertex penalties
def vertex_margins(policy: PolicedPolicy, vertices: np.ndarray, env: Environment, eps: float, beta_: float) -> np.ndarray:
    """-2 eps - beta v_r - f_r(v) per vertex"""
    return np.array(
        [
            -2.0 * eps - beta_ * v[env.r - 1] - f_tilde_r_control(env, v, env.clip_control(policy(v)))
            for v in vertices
        ]
    )


def dissipation_penalty(policy: PolicedPolicy, vertices: np.ndarray, env: Environment, eps: float, beta_: float) -> float:
    """Sum over vertices of the squared hinge on the dissipation condition"""
    margins = vertex_margins(policy, vertices, env, eps, beta_)
    return float(np.sum(np.maximum(0.0, -margins) ** 2))


def dissipation_penalty_and_grad(
    policy: PolicedPolicy,
    vertices: np.ndarray,
    env: Environment,
    eps: float,
    beta_: float,
    fd_step: float = CONTROL_FD_STEP,
) -> Tuple[float, GradTape, np.ndarray]:
    """Penalty, its parameter gradient and the vertex margins

    The control sensitivity of f_r is a central difference on u; the rest is
    backpropagated through the policy network.
    """
    tape = GradTape.zeros_like(policy.net)
    penalty = 0.0
    margins = np.empty(len(vertices))
    for i, v in enumerate(vertices):
        u = env.clip_control(policy(v))
        value = f_tilde_r_control(env, v, u)
        hinge = value + 2.0 * eps + beta_ * v[env.r - 1]
        margins[i] = -hinge
        if hinge <= 0.0:
            continue
        penalty += hinge**2
        upstream = np.empty(env.m)
        for j in range(env.m):
            bump = np.zeros(env.m)
            bump[j] = fd_step
            upstream[j] = (f_tilde_r_control(env, v, u + bump) - f_tilde_r_control(env, v, u - bump)) / (2.0 * fd_step)
        tape = tape.add(backward(policy.net, v * policy.input_scale, 2.0 * hinge * upstream))
    return penalty, tape, margins


def bound_penalty_and_grad(
    policy: PolicedPolicy, vertices: np.ndarray, low: np.ndarray, high: np.ndarray
) -> Tuple[float, GradTape]:
    """Squared hinge on pre-clip outputs leaving the control box at the vertices"""
    raw = np.atleast_2d(policy.raw(vertices))
    above = np.maximum(0.0, raw - high)
    below = np.maximum(0.0, low - raw)
    penalty = float(np.sum(above**2 + below**2))
    if penalty == 0.0:
        return 0.0, GradTape.zeros_like(policy.net)
    upstream = 2.0 * (above - below)
    return penalty, backward(policy.net, vertices * policy.input_scale, upstream, raw_output=True)


@dataclass
class RolloutBatch:
    states: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    values: np.ndarray
    log_probs: np.ndarray
    advantages: np.ndarray
    returns: np.ndarray
    episode_returns: List[float]


@dataclass
class Episode:
    states: List[np.ndarray] = field(default_factory=list)
    actions: List[np.ndarray] = field(default_factory=list)
    rewards: List[float] = field(default_factory=list)
    terminal: bool = False
    last_state: Optional[np.ndarray] = None


@dataclass
class TrainResult:
    policy: PolicedPolicy
    critic: Mlp
    log_std: np.ndarray
    log: List[IterationRecord]
    eps: float
    kind: PolicyKind
    iteration: int = 0


def gaussian_log_prob(actions: np.ndarray, means: np.ndarray, log_std: np.ndarray) -> np.ndarray:
    z = (actions - means) / np.exp(log_std)
    return -0.5 * np.sum(z**2, axis=1) - np.sum(log_std) - 0.5 * actions.shape[1] * LOG_2PI


class PpoTrainer:
    """Clipped-surrogate PPO with a learned state-independent log-std"""

    def __init__(self, config: TrainConfig, env: Environment, spec: BufferSpec):
        self.config = config
        self.env = env
        self.spec = spec
        self.beta = beta(spec)
        self.vertices = enumerate_vertices(spec)
        self.scale = (
            np.asarray(config.input_scale, dtype=np.float64)
            if config.input_scale is not None
            else env.default_input_scale
        )
        self.eps = config.eps
        self.policed = config.kind == PolicyKind.POLICED
        self.penalized = self.policed or (config.kind == PolicyKind.BASELINE and config.penalize_baseline)

        rng = np.random.default_rng(config.seed)
        actor = init_mlp(
            [env.n, *config.hidden_sizes, env.m],
            rng,
            output_activation=Activation.CLIP,
            output_low=env.u_low,
            output_high=env.u_high,
        )
        actor.biases[-1] = 0.5 * (env.u_low + env.u_high)
        self.policy = self._wrap(actor)
        self.critic = init_mlp([env.n, *config.critic_hidden_sizes, 1], rng, output_gain=1.0)
        self.log_std = np.full(env.m, config.init_log_std)
        self.actor_opt = Optimizer(kind=OptimizerKind.ADAM)
        self.critic_opt = Optimizer(kind=OptimizerKind.ADAM)
        self.residual_samples = (
            sample_buffer(spec, config.residual_samples, config.seed, self.vertices) if self.policed else None
        )

    def _wrap(self, net: Mlp) -> PolicedPolicy:
        if self.policed:
            return enforce_affine_region(net, self.vertices, self.scale)
        return PolicedPolicy(net=net, region_vertices=self.vertices, input_scale=self.scale, enforced=False)

    # Rollouts
    def _run_episode(self, iteration: int, index: int) -> Episode:
        cfg, env = self.config, self.env
        rng = np.random.default_rng([cfg.seed, iteration, index])
        dt = cfg.dt or env.dt
        std = np.exp(self.log_std)
        episode = Episode()
        x = env.sample_initial(rng)
        u_prev: Optional[np.ndarray] = None
        for step in range(cfg.steps_per_episode):
            s = env.to_s(x)
            mean = self.policy.raw(s)
            action = mean + std * rng.standard_normal(env.m)
            u = env.clip_control(action)
            if u_prev is None:
                u_prev = u
            try:
                x_next = rk4_step(env, x, u, dt)
            except (InvalidStateError, IntegrationError) as e:
                logger.warning(f"Episode {index} of iteration {iteration} stopped: {e.detail}")
                episode.terminal = True
                break
            terminal = env.training_done(x_next) or env.should_stop(x_next, (step + 1) * dt)
            final = terminal or step == cfg.steps_per_episode - 1
            episode.states.append(s)
            episode.actions.append(action)
            episode.rewards.append(step_reward(env, x_next, u, u_prev, final))
            u_prev = u
            x = x_next
            if terminal:
                episode.terminal = True
                break
        episode.last_state = env.to_s(x)
        return episode

    def collect(self, iteration: int) -> RolloutBatch:
        cfg = self.config
        indices = range(cfg.episodes)
        if cfg.workers > 1:
            with ThreadPoolExecutor(max_workers=cfg.workers) as pool:
                episodes = list(pool.map(lambda i: self._run_episode(iteration, i), indices))
        else:
            episodes = [self._run_episode(iteration, i) for i in indices]

        states, actions, rewards, values, advantages = [], [], [], [], []
        for ep in episodes:
            if not ep.states:
                continue
            ep_states = np.array(ep.states)
            ep_values = forward(self.critic, ep_states * self.scale)[:, 0]
            bootstrap = 0.0 if ep.terminal else float(forward(self.critic, ep.last_state * self.scale)[0])
            ep_rewards = np.array(ep.rewards)
            advantages.append(gae(ep_rewards, np.append(ep_values, bootstrap), cfg.gamma, cfg.gae_lambda))
            states.append(ep_states)
            actions.append(np.array(ep.actions))
            rewards.append(ep_rewards)
            values.append(ep_values)

        if not states:
            raise TrainingError(f"iteration {iteration} collected no transitions")
        all_states = np.vstack(states)
        all_actions = np.vstack(actions)
        all_values = np.concatenate(values)
        all_adv = np.concatenate(advantages)
        means = np.atleast_2d(self.policy.raw(all_states))
        return RolloutBatch(
            states=all_states,
            actions=all_actions,
            rewards=np.concatenate(rewards),
            values=all_values,
            log_probs=gaussian_log_prob(all_actions, means, self.log_std),
            advantages=all_adv,
            returns=all_adv + all_values,
            episode_returns=[float(np.sum(ep.rewards)) for ep in episodes],
        )

    # Updates
    def _actor_step(self, batch: RolloutBatch, idx: np.ndarray, advantages: np.ndarray) -> Tuple[float, float]:
        cfg, env = self.config, self.env
        states, actions = batch.states[idx], batch.actions[idx]
        adv = advantages[idx]
        means = np.atleast_2d(self.policy.raw(states))
        std = np.exp(self.log_std)
        log_probs = gaussian_log_prob(actions, means, self.log_std)
        ratio = np.exp(log_probs - batch.log_probs[idx])
        clipped = ((adv > 0) & (ratio > 1.0 + cfg.clip_ratio)) | ((adv < 0) & (ratio < 1.0 - cfg.clip_ratio))
        weight = np.where(clipped, 0.0, -adv * ratio) / len(idx)

        standardized = (actions - means) / std
        grad_mean = weight[:, None] * standardized / std
        grad_log_std = np.sum(weight[:, None] * (standardized**2 - 1.0), axis=0) - cfg.entropy_coef
        tape = backward(self.policy.net, states * self.scale, grad_mean, raw_output=True)

        penalty = bound = 0.0
        if self.penalized and cfg.penalty_weight > 0:
            penalty, pen_tape, _ = dissipation_penalty_and_grad(self.policy, self.vertices, env, self.eps, self.beta)
            tape = tape.add(pen_tape.scaled(cfg.penalty_weight))
        if cfg.bound_penalty_weight > 0:
            bound, bound_tape = bound_penalty_and_grad(self.policy, self.vertices, env.u_low, env.u_high)
            tape = tape.add(bound_tape.scaled(cfg.bound_penalty_weight))

        grads = clip_grad_norm([*tape.gradients(), grad_log_std], cfg.max_grad_norm)
        params = self.actor_opt.step([*self.policy.net.parameters(), self.log_std], grads, cfg.actor_lr)
        self.log_std = params[-1]
        self.policy = self._wrap(self.policy.net.with_parameters(params[:-1]))
        return penalty, bound

    def _critic_step(self, batch: RolloutBatch, idx: np.ndarray) -> float:
        cfg = self.config
        inputs = batch.states[idx] * self.scale
        predicted = forward(self.critic, inputs)[:, 0]
        error = predicted - batch.returns[idx]
        upstream = (2.0 * cfg.value_coef / len(idx)) * error
        tape = backward(self.critic, inputs, upstream[:, None])
        grads = clip_grad_norm(tape.gradients(), cfg.max_grad_norm)
        self.critic = self.critic.with_parameters(self.critic_opt.step(self.critic.parameters(), grads, cfg.critic_lr))
        return float(cfg.value_coef * np.mean(error**2))

    def update(self, batch: RolloutBatch, iteration: int) -> Tuple[float, float, float]:
        cfg = self.config
        rng = np.random.default_rng([cfg.seed, iteration])
        advantages = (batch.advantages - batch.advantages.mean()) / (batch.advantages.std() + 1e-8)
        penalty = bound = value_loss = 0.0
        for _ in range(cfg.epochs):
            order = rng.permutation(len(batch.states))
            for start in range(0, len(order), cfg.minibatch_size):
                idx = order[start : start + cfg.minibatch_size]
                penalty, bound = self._actor_step(batch, idx, advantages)
                value_loss = self._critic_step(batch, idx)
        if not np.isfinite([penalty, bound, value_loss]).all():
            raise TrainingError(f"non-finite loss at iteration {iteration}")
        return penalty, bound, value_loss

    def refresh_eps(self):
        measure = estimate_eps(
            self.env,
            self.policy,
            self.spec,
            samples=self.config.eps_samples,
            seed=self.config.seed,
            holdout_factor=0,
        )
        self.eps = measure.eps

    def record(self, iteration: int, batch: RolloutBatch) -> IterationRecord:
        margins = vertex_margins(self.policy, self.vertices, self.env, self.eps, self.beta)
        penalty = float(np.sum(np.maximum(0.0, -margins) ** 2))
        bound, _ = bound_penalty_and_grad(self.policy, self.vertices, self.env.u_low, self.env.u_high)
        residual = affine_residual(self.policy, self.residual_samples) if self.policed else None
        return IterationRecord(
            iter=iteration,
            return_mean=float(np.mean(batch.episode_returns)),
            penalty=penalty,
            min_vertex_margin=float(margins.min()),
            eps=self.eps,
            bound_penalty=bound,
            affine_residual=residual,
        )

    def result(self, log: List[IterationRecord], iteration: int) -> TrainResult:
        return TrainResult(
            policy=self.policy,
            critic=self.critic,
            log_std=self.log_std.copy(),
            log=list(log),
            eps=self.eps,
            kind=self.config.kind,
            iteration=iteration,
        )


CheckpointFn = Callable[[TrainResult], None]


def train(
    config: TrainConfig,
    env: Environment,
    spec: BufferSpec,
    checkpoint_fn: Optional[CheckpointFn] = None,
    progress: bool = False,
) -> TrainResult:
    """Run PPO for config.iterations and return the final policy with its per-iteration log"""
    if config.environment is not None and config.environment != env.env_id:
        raise IncompatibleCheckpointError(
            f"train config targets {config.environment.value}, environment is {env.env_id.value}"
        )
    trainer = PpoTrainer(config, env, spec)
    if config.kind == PolicyKind.FIXED_AFFINE:
        trainer.policy = policy_from_affine(
            np.asarray(config.affine_d),
            np.asarray(config.affine_e),
            trainer.vertices,
            trainer.scale,
            env.u_low,
            env.u_high,
        )
        trainer.log_std = np.full(env.m, -20.0)
        batch = trainer.collect(0)
        result = trainer.result([trainer.record(0, batch)], 0)
        log_training_iteration(
            logger, 0, result.log[0].return_mean, result.log[0].penalty, result.log[0].min_vertex_margin, trainer.eps
        )
        return result

    log: List[IterationRecord] = []
    iterations = tqdm(range(1, config.iterations + 1), desc=f"train {config.kind.value}", disable=not progress)
    for iteration in iterations:
        if trainer.policed and config.eps_refresh_every > 0 and iteration > 1 and (iteration - 1) % config.eps_refresh_every == 0:
            trainer.refresh_eps()
        batch = trainer.collect(iteration)
        try:
            trainer.update(batch, iteration)
        except TrainingError:
            if checkpoint_fn is not None:
                checkpoint_fn(trainer.result(log, iteration - 1))
            raise
        entry = trainer.record(iteration, batch)
        log.append(entry)
        log_training_iteration(logger, iteration, entry.return_mean, entry.penalty, entry.min_vertex_margin, entry.eps)
        if checkpoint_fn is not None and config.checkpoint_every > 0 and iteration % config.checkpoint_every == 0:
            checkpoint_fn(trainer.result(log, iteration))
    return trainer.result(log, config.iterations)


# Checkpoints
def checkpoint_payload(result: TrainResult, env: Environment) -> Dict[str, Any]:
    return {
        "version": CHECKPOINT_VERSION,
        "env": env.env_id.value,
        "n": env.n,
        "m": env.m,
        "kind": result.kind.value,
        "iteration": result.iteration,
        "eps": result.eps,
        "policy": policy_to_dict(result.policy),
        "critic": mlp_to_dict(result.critic),
        "log_std": result.log_std.tolist(),
    }


def save_checkpoint(path: Union[str, Path], result: TrainResult, env: Environment) -> Path:
    return write_json_file(path, checkpoint_payload(result, env))


def load_checkpoint(path: Union[str, Path], env: Environment) -> TrainResult:
    try:
        payload = read_json_file(path)
    except (OSError, ValueError) as e:
        raise IncompatibleCheckpointError(f"cannot read checkpoint {path}: {e}")
    if payload.get("version") != CHECKPOINT_VERSION:
        raise IncompatibleCheckpointError(f"unsupported checkpoint version {payload.get('version')}")
    if payload.get("env") != env.env_id.value or payload.get("n") != env.n or payload.get("m") != env.m:
        raise IncompatibleCheckpointError(
            f"checkpoint is for {payload.get('env')} (n={payload.get('n')}, m={payload.get('m')}), "
            f"config is {env.env_id.value} (n={env.n}, m={env.m})"
        )
    return TrainResult(
        policy=policy_from_dict(payload["policy"]),
        critic=mlp_from_dict(payload["critic"]),
        log_std=np.asarray(payload["log_std"], dtype=np.float64),
        log=[],
        eps=float(payload["eps"]),
        kind=PolicyKind(payload["kind"]),
        iteration=int(payload["iteration"]),
    )
