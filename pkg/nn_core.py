"""
Feedforward networks with piecewise-affine activations.

Networks are plain dataclasses of float64 arrays; forward and backward are
pure functions so a network can be shared read-only across threads. Updates
return a new network.
"""

from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np

from errors import ShapeError, TrainingError
from models import Activation, OptimizerKind

SERIAL_VERSION = 1


@dataclass
class Mlp:
    weights: List[np.ndarray]
    biases: List[np.ndarray]
    hidden_activation: Activation = Activation.RELU
    output_activation: Activation = Activation.IDENTITY
    output_low: Optional[np.ndarray] = None
    output_high: Optional[np.ndarray] = None

    def __post_init__(self):
        if not self.weights or len(self.weights) != len(self.biases):
            raise ShapeError("network needs one bias per weight matrix")
        self.weights = [np.asarray(w, dtype=np.float64) for w in self.weights]
        self.biases = [np.asarray(b, dtype=np.float64) for b in self.biases]
        for k, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.ndim != 2 or b.shape != (w.shape[0],):
                raise ShapeError(f"layer {k}: weight {w.shape} and bias {b.shape} do not match")
            if k > 0 and w.shape[1] != self.weights[k - 1].shape[0]:
                raise ShapeError(
                    f"layer {k} expects {w.shape[1]} inputs, previous layer gives {self.weights[k - 1].shape[0]}"
                )
        if self.hidden_activation not in (Activation.RELU, Activation.TANH):
            raise ShapeError(f"unsupported hidden activation {self.hidden_activation}")
        if self.output_low is not None:
            self.output_low = np.asarray(self.output_low, dtype=np.float64).reshape(self.output_dim)
        if self.output_high is not None:
            self.output_high = np.asarray(self.output_high, dtype=np.float64).reshape(self.output_dim)
        if self.output_activation == Activation.CLIP:
            if self.output_low is None or self.output_high is None:
                raise ShapeError("clip output needs low and high bounds")
        elif self.output_activation != Activation.IDENTITY:
            raise ShapeError(f"unsupported output activation {self.output_activation}")

    @property
    def input_dim(self) -> int:
        return self.weights[0].shape[1]

    @property
    def output_dim(self) -> int:
        return self.weights[-1].shape[0]

    @property
    def hidden_sizes(self) -> List[int]:
        return [w.shape[0] for w in self.weights[:-1]]

    def parameters(self) -> List[np.ndarray]:
        """Weights then biases, in layer order"""
        return [*self.weights, *self.biases]

    def with_parameters(self, params: Sequence[np.ndarray]) -> "Mlp":
        depth = len(self.weights)
        return Mlp(
            weights=[np.array(p) for p in params[:depth]],
            biases=[np.array(p) for p in params[depth:]],
            hidden_activation=self.hidden_activation,
            output_activation=self.output_activation,
            output_low=self.output_low,
            output_high=self.output_high,
        )

    def copy(self) -> "Mlp":
        return self.with_parameters(self.parameters())


@dataclass
class GradTape:
    weights: List[np.ndarray]
    biases: List[np.ndarray]

    @classmethod
    def zeros_like(cls, net: Mlp) -> "GradTape":
        return cls(
            weights=[np.zeros_like(w) for w in net.weights],
            biases=[np.zeros_like(b) for b in net.biases],
        )

    def gradients(self) -> List[np.ndarray]:
        return [*self.weights, *self.biases]

    def add(self, other: "GradTape") -> "GradTape":
        return GradTape(
            weights=[a + b for a, b in zip(self.weights, other.weights)],
            biases=[a + b for a, b in zip(self.biases, other.biases)],
        )

    def scaled(self, factor: float) -> "GradTape":
        return GradTape(
            weights=[w * factor for w in self.weights],
            biases=[b * factor for b in self.biases],
        )

    def norm(self) -> float:
        return float(np.sqrt(sum(float(np.sum(g * g)) for g in self.gradients())))

    def is_finite(self) -> bool:
        return all(np.all(np.isfinite(g)) for g in self.gradients())


def init_mlp(
    sizes: Sequence[int],
    rng: np.random.Generator,
    hidden_activation: Activation = Activation.RELU,
    output_activation: Activation = Activation.IDENTITY,
    output_low: Optional[Sequence[float]] = None,
    output_high: Optional[Sequence[float]] = None,
    output_gain: float = 0.01,
) -> Mlp:
    """He-scaled hidden layers, small output layer so the initial policy is near its bias"""
    if len(sizes) < 2:
        raise ShapeError("network needs at least an input and an output size")
    weights, biases = [], []
    for k, (fan_in, fan_out) in enumerate(zip(sizes[:-1], sizes[1:])):
        scale = np.sqrt(2.0 / fan_in)
        if k == len(sizes) - 2:
            scale *= output_gain
        weights.append(rng.normal(0.0, scale, size=(fan_out, fan_in)))
        biases.append(np.zeros(fan_out))
    return Mlp(
        weights=weights,
        biases=biases,
        hidden_activation=hidden_activation,
        output_activation=output_activation,
        output_low=None if output_low is None else np.asarray(output_low, dtype=np.float64),
        output_high=None if output_high is None else np.asarray(output_high, dtype=np.float64),
    )


def _hidden(z: np.ndarray, kind: Activation) -> np.ndarray:
    if kind == Activation.RELU:
        return np.maximum(z, 0.0)
    return np.tanh(z)


def _hidden_grad(z: np.ndarray, kind: Activation) -> np.ndarray:
    if kind == Activation.RELU:
        return (z > 0.0).astype(np.float64)
    return 1.0 - np.tanh(z) ** 2


def _as_batch(net: Mlp, x: np.ndarray) -> Tuple[np.ndarray, bool]:
    arr = np.asarray(x, dtype=np.float64)
    single = arr.ndim == 1
    batch = arr.reshape(1, -1) if single else arr
    if batch.ndim != 2 or batch.shape[1] != net.input_dim:
        raise ShapeError(f"expected input of dimension {net.input_dim}, got shape {arr.shape}")
    return batch, single


def pre_activations(net: Mlp, x: np.ndarray) -> List[np.ndarray]:
    """Pre-activation values of every layer for a batch of inputs"""
    batch, _ = _as_batch(net, x)
    zs = []
    a = batch
    for k, (w, b) in enumerate(zip(net.weights, net.biases)):
        z = a @ w.T + b
        zs.append(z)
        if k < len(net.weights) - 1:
            a = _hidden(z, net.hidden_activation)
    return zs


def _output(net: Mlp, z: np.ndarray) -> np.ndarray:
    if net.output_activation == Activation.CLIP:
        return np.clip(z, net.output_low, net.output_high)
    return z


def forward(net: Mlp, x: np.ndarray) -> np.ndarray:
    """Network output for one input (length n) or a batch (k x n)"""
    batch, single = _as_batch(net, x)
    if not np.all(np.isfinite(batch)):
        raise ShapeError("network input must be finite")
    out = _output(net, pre_activations(net, batch)[-1])
    return out[0] if single else out


def forward_raw(net: Mlp, x: np.ndarray) -> np.ndarray:
    """Output before the clip squashing"""
    batch, single = _as_batch(net, x)
    out = pre_activations(net, batch)[-1]
    return out[0] if single else out


def backward(net: Mlp, x: np.ndarray, upstream: np.ndarray, raw_output: bool = False) -> GradTape:
    """Gradient of sum_i upstream_i . forward(net, x_i) with respect to every parameter

    raw_output differentiates the pre-clip output instead.
    """
    batch, _ = _as_batch(net, x)
    up = np.asarray(upstream, dtype=np.float64).reshape(batch.shape[0], -1)
    if up.shape[1] != net.output_dim:
        raise ShapeError(f"upstream has dimension {up.shape[1]}, network outputs {net.output_dim}")

    zs = pre_activations(net, batch)
    acts = [batch] + [_hidden(z, net.hidden_activation) for z in zs[:-1]]

    delta = up
    if net.output_activation == Activation.CLIP and not raw_output:
        inside = (zs[-1] > net.output_low) & (zs[-1] < net.output_high)
        delta = delta * inside

    tape = GradTape.zeros_like(net)
    for k in range(len(net.weights) - 1, -1, -1):
        tape.weights[k] = delta.T @ acts[k]
        tape.biases[k] = delta.sum(axis=0)
        if k > 0:
            delta = (delta @ net.weights[k]) * _hidden_grad(zs[k - 1], net.hidden_activation)
    return tape


@dataclass
class Optimizer:
    """First-order update rule over a list of parameter arrays"""

    kind: OptimizerKind = OptimizerKind.ADAM
    momentum: float = 0.9
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    steps: int = 0
    first: List[np.ndarray] = field(default_factory=list)
    second: List[np.ndarray] = field(default_factory=list)

    def step(self, params: Sequence[np.ndarray], grads: Sequence[np.ndarray], lr: float) -> List[np.ndarray]:
        if lr <= 0:
            raise TrainingError(f"learning rate must be positive, got {lr}")
        for k, g in enumerate(grads):
            if not np.all(np.isfinite(g)):
                raise TrainingError(f"non-finite gradient in parameter block {k}")
        if not self.first:
            self.first = [np.zeros_like(p) for p in params]
            self.second = [np.zeros_like(p) for p in params]
        self.steps += 1

        updated = []
        for k, (p, g) in enumerate(zip(params, grads)):
            if self.kind == OptimizerKind.SGD:
                updated.append(p - lr * g)
            elif self.kind == OptimizerKind.MOMENTUM:
                self.first[k] = self.momentum * self.first[k] + g
                updated.append(p - lr * self.first[k])
            else:
                self.first[k] = self.beta1 * self.first[k] + (1.0 - self.beta1) * g
                self.second[k] = self.beta2 * self.second[k] + (1.0 - self.beta2) * g * g
                m_hat = self.first[k] / (1.0 - self.beta1**self.steps)
                v_hat = self.second[k] / (1.0 - self.beta2**self.steps)
                updated.append(p - lr * m_hat / (np.sqrt(v_hat) + self.epsilon))
        return updated


def sgd_step(net: Mlp, tape: GradTape, lr: float, optimizer: Optional[Optimizer] = None) -> Mlp:
    """Descend along the tape; plain SGD unless an optimizer carries momentum/adaptive state"""
    if not tape.is_finite():
        bad = [k for k, g in enumerate(tape.gradients()) if not np.all(np.isfinite(g))]
        raise TrainingError(f"non-finite gradients in parameter blocks {bad}")
    rule = optimizer or Optimizer(kind=OptimizerKind.SGD)
    return net.with_parameters(rule.step(net.parameters(), tape.gradients(), lr))


def clip_grad_norm(grads: Sequence[np.ndarray], max_norm: float) -> List[np.ndarray]:
    total = float(np.sqrt(sum(float(np.sum(g * g)) for g in grads)))
    if max_norm <= 0 or total <= max_norm:
        return list(grads)
    return [g * (max_norm / total) for g in grads]


def mlp_to_dict(net: Mlp) -> Dict[str, Any]:
    return {
        "version": SERIAL_VERSION,
        "hidden_activation": net.hidden_activation.value,
        "output_activation": net.output_activation.value,
        "output_low": None if net.output_low is None else net.output_low.tolist(),
        "output_high": None if net.output_high is None else net.output_high.tolist(),
        "layers": [
            {"shape": list(w.shape), "weights": w.ravel().tolist(), "bias": b.tolist()}
            for w, b in zip(net.weights, net.biases)
        ],
    }


def mlp_from_dict(payload: Dict[str, Any]) -> Mlp:
    if payload.get("version") != SERIAL_VERSION:
        raise ShapeError(f"unsupported network format version {payload.get('version')}")
    weights, biases = [], []
    for layer in payload["layers"]:
        rows, cols = layer["shape"]
        weights.append(np.asarray(layer["weights"], dtype=np.float64).reshape(rows, cols))
        biases.append(np.asarray(layer["bias"], dtype=np.float64))
    return Mlp(
        weights=weights,
        biases=biases,
        hidden_activation=Activation(payload["hidden_activation"]),
        output_activation=Activation(payload["output_activation"]),
        output_low=payload.get("output_low"),
        output_high=payload.get("output_high"),
    )
