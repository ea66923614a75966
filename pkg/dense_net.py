"""
Dense network engine for Gemini Lab.

Fixed layer stacks with hand-derived backpropagation, batch normalization on
hidden pre-activations and an Adam optimizer. Every model in the toolkit
(the three Gemini nets and the baseline regressors) is built from DenseNet.
"""

import json
import logging
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy.special import expit

logger = logging.getLogger(__name__)

LEAKY_SLOPE = 0.2
BN_MOMENTUM = 0.99
BN_EPSILON = 1e-5
CHECKPOINT_FORMAT = "gemini-lab/dense-net"
CHECKPOINT_VERSION = 1


class InputShapeError(ValueError):
    """Raised when a batch does not match the network input width."""


class NetworkStateError(RuntimeError):
    """Raised when an operation needs state that is not there yet."""


class TrainingDivergenceError(ArithmeticError):
    """Raised when parameters, gradients or losses stop being finite."""

    def __init__(self, message: str, block: Optional[str] = None, epoch: Optional[int] = None):
        super().__init__(message)
        self.block = block
        self.epoch = epoch


class ActivationKind(str, Enum):
    LEAKY_RELU = "leaky_relu"
    SOFTPLUS = "softplus"
    RELU = "relu"
    LINEAR = "linear"
    LOGISTIC = "logistic"


def activate(kind: ActivationKind, z: np.ndarray) -> np.ndarray:
    kind = ActivationKind(kind)
    if kind is ActivationKind.LEAKY_RELU:
        return np.where(z > 0, z, LEAKY_SLOPE * z)
    if kind is ActivationKind.SOFTPLUS:
        return np.logaddexp(0.0, z)
    if kind is ActivationKind.RELU:
        return np.maximum(z, 0.0)
    if kind is ActivationKind.LOGISTIC:
        return expit(z)
    return z


def activation_grad(kind: ActivationKind, z: np.ndarray) -> np.ndarray:
    """Derivative of the activation with respect to its input, elementwise."""
    kind = ActivationKind(kind)
    if kind is ActivationKind.LEAKY_RELU:
        return np.where(z > 0, 1.0, LEAKY_SLOPE)
    if kind is ActivationKind.SOFTPLUS:
        return expit(z)
    if kind is ActivationKind.RELU:
        return (z > 0).astype(float)
    if kind is ActivationKind.LOGISTIC:
        s = expit(z)
        return s * (1.0 - s)
    return np.ones_like(z)


@dataclass
class BatchNormState:
    gamma: np.ndarray
    beta: np.ndarray
    running_mean: np.ndarray
    running_var: np.ndarray
    momentum: float = BN_MOMENTUM
    epsilon: float = BN_EPSILON

    @classmethod
    def fresh(cls, width: int, momentum: float = BN_MOMENTUM, epsilon: float = BN_EPSILON) -> "BatchNormState":
        return cls(
            gamma=np.ones(width),
            beta=np.zeros(width),
            running_mean=np.zeros(width),
            running_var=np.ones(width),
            momentum=momentum,
            epsilon=epsilon,
        )

    def normalize(self, z: np.ndarray, train: bool) -> Tuple[np.ndarray, Optional[Tuple[np.ndarray, np.ndarray]]]:
        """
        Normalize a batch of pre-activations.

        Train mode uses the batch statistics and folds them into the running
        averages; eval mode uses the running averages and returns no cache.

        Returns:
            (gamma * z_hat + beta, cache) where cache is (z_hat, std) in train mode
        """
        if not train:
            z_hat = (z - self.running_mean) / np.sqrt(self.running_var + self.epsilon)
            return self.gamma * z_hat + self.beta, None

        mean = z.mean(axis=0)
        var = z.var(axis=0)
        std = np.sqrt(var + self.epsilon)
        z_hat = (z - mean) / std
        self.running_mean = self.momentum * self.running_mean + (1.0 - self.momentum) * mean
        self.running_var = self.momentum * self.running_var + (1.0 - self.momentum) * var
        return self.gamma * z_hat + self.beta, (z_hat, std)

    def set_statistics(self, z: np.ndarray) -> None:
        self.running_mean = z.mean(axis=0)
        self.running_var = np.maximum(z.var(axis=0), self.epsilon)

    def backward(self, grad: np.ndarray, cache: Tuple[np.ndarray, np.ndarray]) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
        z_hat, std = cache
        n = grad.shape[0]
        dgamma = np.sum(grad * z_hat, axis=0)
        dbeta = np.sum(grad, axis=0)
        dz_hat = grad * self.gamma
        dz = (n * dz_hat - dz_hat.sum(axis=0) - z_hat * np.sum(dz_hat * z_hat, axis=0)) / (n * std)
        return dz, dgamma, dbeta


@dataclass
class DenseLayer:
    W: np.ndarray
    b: np.ndarray
    activation: ActivationKind
    batch_norm: Optional[BatchNormState] = None

    @property
    def in_dim(self) -> int:
        return self.W.shape[0]

    @property
    def out_dim(self) -> int:
        return self.W.shape[1]


@dataclass
class _LayerCache:
    inputs: np.ndarray
    pre: np.ndarray
    bn: Optional[Tuple[np.ndarray, np.ndarray]] = None


class DenseNet:
    """
    A fixed stack of dense layers.

    Each layer computes act(BN(a @ W + b)); batch normalization is optional
    per layer and is never applied to the output layer by `build`.
    """

    def __init__(self, layers: List[DenseLayer]):
        if not layers:
            raise ValueError("DenseNet needs at least one layer")
        for i in range(1, len(layers)):
            if layers[i - 1].out_dim != layers[i].in_dim:
                raise InputShapeError(
                    f"layer {i - 1} outputs {layers[i - 1].out_dim} units but layer {i} expects {layers[i].in_dim}"
                )
        self.layers = layers
        self.last_cache: Optional[List[_LayerCache]] = None

    @classmethod
    def build(
        cls,
        input_dim: int,
        hidden_sizes: Sequence[int],
        output_dim: int,
        hidden_activation: ActivationKind = ActivationKind.LEAKY_RELU,
        output_activation: ActivationKind = ActivationKind.LINEAR,
        batch_norm: bool = True,
        rng: Optional[np.random.Generator] = None,
        bn_momentum: float = BN_MOMENTUM,
        bn_epsilon: float = BN_EPSILON,
        zero_output: bool = False,
    ) -> "DenseNet":
        """
        Build a net with fan-in/fan-out scaled uniform weights and zero biases.

        A net built with `zero_output` outputs exactly 0 until its first update.

        Args:
            input_dim: Width of the input vectors
            hidden_sizes: Widths of the hidden layers, in order
            output_dim: Width of the output vectors
            hidden_activation: Activation of every hidden layer
            output_activation: Activation of the output layer
            batch_norm: Normalize hidden pre-activations
            rng: Generator used for the weight draw
        """
        if input_dim < 1 or output_dim < 1:
            raise ValueError("input_dim and output_dim must be positive")
        rng = rng if rng is not None else np.random.default_rng()
        dims = [int(input_dim)] + [int(h) for h in hidden_sizes] + [int(output_dim)]
        layers = []
        for i in range(len(dims) - 1):
            fan_in, fan_out = dims[i], dims[i + 1]
            bound = np.sqrt(6.0 / (fan_in + fan_out))
            is_output = i == len(dims) - 2
            W = rng.uniform(-bound, bound, size=(fan_in, fan_out))
            if is_output and zero_output:
                W[...] = 0.0
            layers.append(
                DenseLayer(
                    W=W,
                    b=np.zeros(fan_out),
                    activation=ActivationKind(output_activation if is_output else hidden_activation),
                    batch_norm=None if (is_output or not batch_norm) else BatchNormState.fresh(fan_out, bn_momentum, bn_epsilon),
                )
            )
        return cls(layers)

    @property
    def input_dim(self) -> int:
        return self.layers[0].in_dim

    @property
    def output_dim(self) -> int:
        return self.layers[-1].out_dim

    @property
    def has_batch_norm(self) -> bool:
        return any(layer.batch_norm is not None for layer in self.layers)

    def refresh_batch_norm(self, X) -> None:
        """Replace the running statistics with the exact statistics of X under the current weights."""
        if not self.has_batch_norm:
            return
        a = self._check_input(X)
        if a.shape[0] < 2:
            return
        for layer in self.layers:
            z = a @ layer.W + layer.b
            if layer.batch_norm is not None:
                layer.batch_norm.set_statistics(z)
                z, _ = layer.batch_norm.normalize(z, train=False)
            a = activate(layer.activation, z)

    def _check_input(self, X) -> np.ndarray:
        X = np.asarray(X, dtype=float)
        if X.ndim == 1 and X.shape[0] == self.input_dim:
            X = X[None, :]
        if X.ndim != 2 or X.shape[1] != self.input_dim:
            raise InputShapeError(f"expected a batch of width {self.input_dim}, got shape {X.shape}")
        return X

    def forward(self, X, mode: str = "eval") -> np.ndarray:
        """
        Run a batch through the stack.

        Train mode caches the intermediates needed by `backward` (also kept
        on `last_cache`) and updates batch-norm running statistics.
        """
        if mode not in ("train", "eval"):
            raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
        train = mode == "train"
        a = self._check_input(X)
        cache = []
        for layer in self.layers:
            z = a @ layer.W + layer.b
            bn_cache = None
            if layer.batch_norm is not None:
                z, bn_cache = layer.batch_norm.normalize(z, train)
            cache.append(_LayerCache(inputs=a, pre=z, bn=bn_cache))
            a = activate(layer.activation, z)
        if train:
            self.last_cache = cache
        return a

    def backward(self, loss_grad, cache: Optional[List[_LayerCache]] = None) -> Tuple[Dict[str, np.ndarray], np.ndarray]:
        """
        Reverse-mode pass through the cached forward.

        Args:
            loss_grad: dL/d(output), shape (batch, output_dim)
            cache: Intermediates of a train-mode forward; defaults to `last_cache`

        Returns:
            (gradients keyed like `parameters()`, dL/d(input))
        """
        cache = cache if cache is not None else self.last_cache
        if cache is None:
            raise NetworkStateError("backward called without a preceding train-mode forward pass")
        delta = np.asarray(loss_grad, dtype=float)
        if delta.shape != (cache[0].inputs.shape[0], self.output_dim):
            raise InputShapeError(f"loss gradient shape {delta.shape} does not match the cached forward pass")

        grads: Dict[str, np.ndarray] = {}
        for i in reversed(range(len(self.layers))):
            layer, lc = self.layers[i], cache[i]
            dz = delta * activation_grad(layer.activation, lc.pre)
            if layer.batch_norm is not None:
                dz, dgamma, dbeta = layer.batch_norm.backward(dz, lc.bn)
                grads[f"layer{i}.gamma"] = dgamma
                grads[f"layer{i}.beta"] = dbeta
            grads[f"layer{i}.W"] = lc.inputs.T @ dz
            grads[f"layer{i}.b"] = dz.sum(axis=0)
            delta = dz @ layer.W.T
        return {name: grads[name] for name in self.parameters()}, delta

    def parameters(self) -> Dict[str, np.ndarray]:
        """Trainable arrays by stable name; the arrays are live references."""
        params: Dict[str, np.ndarray] = {}
        for i, layer in enumerate(self.layers):
            params[f"layer{i}.W"] = layer.W
            params[f"layer{i}.b"] = layer.b
            if layer.batch_norm is not None:
                params[f"layer{i}.gamma"] = layer.batch_norm.gamma
                params[f"layer{i}.beta"] = layer.batch_norm.beta
        return params

    def weight_names(self) -> List[str]:
        # weights and biases only; batch-norm scale/shift are left unregularized
        return [name for name in self.parameters() if name.endswith((".W", ".b"))]

    def snapshot(self) -> Dict[str, np.ndarray]:
        state = {name: arr.copy() for name, arr in self.parameters().items()}
        for i, layer in enumerate(self.layers):
            if layer.batch_norm is not None:
                state[f"layer{i}.running_mean"] = layer.batch_norm.running_mean.copy()
                state[f"layer{i}.running_var"] = layer.batch_norm.running_var.copy()
        return state

    def restore(self, state: Dict[str, np.ndarray]) -> None:
        for i, layer in enumerate(self.layers):
            layer.W[...] = state[f"layer{i}.W"]
            layer.b[...] = state[f"layer{i}.b"]
            if layer.batch_norm is not None:
                layer.batch_norm.gamma[...] = state[f"layer{i}.gamma"]
                layer.batch_norm.beta[...] = state[f"layer{i}.beta"]
                layer.batch_norm.running_mean = state[f"layer{i}.running_mean"].copy()
                layer.batch_norm.running_var = state[f"layer{i}.running_var"].copy()

    def zero_parameters(self) -> None:
        for arr in self.parameters().values():
            arr[...] = 0.0

    def squared_norm(self) -> float:
        return float(sum(np.sum(self.parameters()[name] ** 2) for name in self.weight_names()))

    def copy(self) -> "DenseNet":
        return DenseNet.from_dict(self.to_dict())

    def to_dict(self) -> dict:
        layers = []
        for layer in self.layers:
            entry = {
                "in_dim": layer.in_dim,
                "out_dim": layer.out_dim,
                "activation": layer.activation.value,
                "W": layer.W.ravel().tolist(),
                "b": layer.b.tolist(),
                "batch_norm": None,
            }
            if layer.batch_norm is not None:
                bn = layer.batch_norm
                entry["batch_norm"] = {
                    "gamma": bn.gamma.tolist(),
                    "beta": bn.beta.tolist(),
                    "running_mean": bn.running_mean.tolist(),
                    "running_var": bn.running_var.tolist(),
                    "momentum": bn.momentum,
                    "epsilon": bn.epsilon,
                }
            layers.append(entry)
        return {"format": CHECKPOINT_FORMAT, "version": CHECKPOINT_VERSION, "layers": layers}

    @classmethod
    def from_dict(cls, data: dict) -> "DenseNet":
        if data.get("format") != CHECKPOINT_FORMAT:
            raise ValueError(f"not a dense-net checkpoint: format={data.get('format')!r}")
        if data.get("version") != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {data.get('version')!r}")
        layers = []
        for entry in data["layers"]:
            bn = None
            if entry.get("batch_norm"):
                raw = entry["batch_norm"]
                bn = BatchNormState(
                    gamma=np.array(raw["gamma"], dtype=float),
                    beta=np.array(raw["beta"], dtype=float),
                    running_mean=np.array(raw["running_mean"], dtype=float),
                    running_var=np.array(raw["running_var"], dtype=float),
                    momentum=float(raw["momentum"]),
                    epsilon=float(raw["epsilon"]),
                )
            layers.append(
                DenseLayer(
                    W=np.array(entry["W"], dtype=float).reshape(entry["in_dim"], entry["out_dim"]),
                    b=np.array(entry["b"], dtype=float),
                    activation=ActivationKind(entry["activation"]),
                    batch_norm=bn,
                )
            )
        return cls(layers)

    def save(self, path: Union[str, Path]) -> None:
        Path(path).write_text(json.dumps(self.to_dict()))

    @classmethod
    def load(cls, path: Union[str, Path]) -> "DenseNet":
        return cls.from_dict(json.loads(Path(path).read_text()))


@dataclass
class AdamState:
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0


def adam_step(
    params: Dict[str, np.ndarray], grads: Dict[str, np.ndarray], state: AdamState
) -> Tuple[Dict[str, np.ndarray], AdamState]:
    """
    One bias-corrected Adam update, applied in place to `params`.

    Raises:
        TrainingDivergenceError: a gradient or an updated parameter is not finite
        InputShapeError: a gradient does not match its parameter
    """
    for name, p in params.items():
        g = grads.get(name)
        if g is None or np.shape(g) != p.shape:
            raise InputShapeError(f"gradient for {name} has shape {np.shape(g)}, expected {p.shape}")
        if not np.all(np.isfinite(g)):
            raise TrainingDivergenceError(f"non-finite gradient in parameter block {name}", block=name)

    state.step += 1
    t = state.step
    c1 = 1.0 - state.beta1 ** t
    c2 = 1.0 - state.beta2 ** t
    for name, p in params.items():
        g = grads[name]
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        v = state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        p -= state.learning_rate * (m / c1) / (np.sqrt(v / c2) + state.epsilon)
        if not np.all(np.isfinite(p)):
            raise TrainingDivergenceError(f"parameter block {name} became non-finite", block=name)
    return params, state
