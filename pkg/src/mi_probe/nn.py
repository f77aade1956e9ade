"""Dense float64 kernel: a small MLP with hand-written backprop and Adam.

Matrices are plain ``numpy.ndarray`` objects of dtype float64. Weight
matrices follow the ``(fan_out, fan_in)`` convention, so a layer computes
``a @ W.T + b``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Sequence, Union

import numpy as np

from .errors import DimensionError, NumericError, UsageError

ACTIVATIONS = ("relu", "elu")


@dataclass(frozen=True)
class MlpParams:
    """Parameters of a feed-forward network with a single scalar output."""

    layer_sizes: tuple
    weights: tuple
    biases: tuple
    activation: str = "elu"

    def __post_init__(self):
        if self.activation not in ACTIVATIONS:
            raise UsageError(f"unknown activation {self.activation!r}")
        if len(self.layer_sizes) < 2 or self.layer_sizes[-1] != 1:
            raise UsageError("layer_sizes must end in a single scalar output")
        if len(self.weights) != len(self.layer_sizes) - 1 or len(self.biases) != len(self.weights):
            raise UsageError("one weight/bias pair is required per layer")
        for k, (w, b) in enumerate(zip(self.weights, self.biases)):
            expected = (self.layer_sizes[k + 1], self.layer_sizes[k])
            if w.shape != expected or b.shape != (expected[0],):
                raise DimensionError(
                    f"layer {k}: weight {w.shape} / bias {b.shape}, expected {expected}"
                )

    @property
    def n_layers(self) -> int:
        return len(self.weights)

    def to_dict(self) -> dict:
        out = {}
        for k, (w, b) in enumerate(zip(self.weights, self.biases)):
            out[f"W{k}"] = w
            out[f"b{k}"] = b
        return out

    def replace_arrays(self, arrays: Mapping[str, np.ndarray]) -> "MlpParams":
        n = self.n_layers
        return MlpParams(
            layer_sizes=self.layer_sizes,
            weights=tuple(np.asarray(arrays[f"W{k}"], dtype=np.float64) for k in range(n)),
            biases=tuple(np.asarray(arrays[f"b{k}"], dtype=np.float64) for k in range(n)),
            activation=self.activation,
        )


def init_mlp(layer_sizes: Sequence[int], rng: np.random.Generator, activation: str = "elu") -> MlpParams:
    """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) initialisation for weights and biases."""
    sizes = tuple(int(s) for s in layer_sizes)
    weights, biases = [], []
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        bound = 1.0 / np.sqrt(fan_in)
        weights.append(rng.uniform(-bound, bound, size=(fan_out, fan_in)))
        biases.append(rng.uniform(-bound, bound, size=fan_out))
    return MlpParams(sizes, tuple(weights), tuple(biases), activation)


def zeros_like_mlp(params: MlpParams) -> MlpParams:
    return MlpParams(
        params.layer_sizes,
        tuple(np.zeros_like(w) for w in params.weights),
        tuple(np.zeros_like(b) for b in params.biases),
        params.activation,
    )


def _act(z: np.ndarray, kind: str) -> np.ndarray:
    if kind == "relu":
        return np.maximum(z, 0.0)
    neg = np.minimum(z, 0.0)
    np.expm1(neg, out=neg)
    neg += np.maximum(z, 0.0)
    return neg


def _act_grad(a: np.ndarray, kind: str) -> np.ndarray:
    """Derivative expressed through the activation output ``a``."""
    if kind == "relu":
        return (a > 0).astype(np.float64)
    # elu: 1 where z > 0, exp(z) = a + 1 elsewhere
    g = a + 1.0
    np.minimum(g, 1.0, out=g)
    return g


@dataclass
class MlpCache:
    """Inputs to every layer, kept from a forward pass."""

    inputs: list = field(default_factory=list)


def _check_batch(params: MlpParams, batch: np.ndarray) -> np.ndarray:
    batch = np.asarray(batch, dtype=np.float64)
    if batch.ndim != 2:
        raise DimensionError(f"layer 0: batch must be 2-D, got shape {batch.shape}")
    if batch.shape[1] != params.layer_sizes[0]:
        raise DimensionError(
            f"layer 0: batch has {batch.shape[1]} columns, network expects {params.layer_sizes[0]}"
        )
    return batch


def mlp_forward_cached(params: MlpParams, batch: np.ndarray) -> tuple[np.ndarray, MlpCache]:
    batch = _check_batch(params, batch)
    cache = MlpCache()
    a = batch
    last = params.n_layers - 1
    for k, (w, b) in enumerate(zip(params.weights, params.biases)):
        cache.inputs.append(a)
        z = a @ w.T
        z += b
        a = z if k == last else _act(z, params.activation)
    return a[:, 0], cache


def mlp_forward(params: MlpParams, batch: np.ndarray) -> np.ndarray:
    """One scalar score per row of ``batch``."""
    return mlp_forward_cached(params, batch)[0]


def mlp_backward(params: MlpParams, cache: MlpCache | None, upstream: np.ndarray) -> MlpParams:
    """Gradient of ``sum(upstream * scores)`` with respect to every parameter.

    The result is returned as an :class:`MlpParams` mirror holding gradients.
    """
    if cache is None or not cache.inputs:
        raise UsageError("mlp_backward called without a forward cache")
    upstream = np.asarray(upstream, dtype=np.float64)
    n_rows = cache.inputs[0].shape[0]
    if upstream.shape != (n_rows,):
        raise DimensionError(f"upstream has shape {upstream.shape}, expected ({n_rows},)")

    grad_w = [None] * params.n_layers
    grad_b = [None] * params.n_layers
    delta = upstream[:, None]
    for k in range(params.n_layers - 1, -1, -1):
        grad_w[k] = delta.T @ cache.inputs[k]
        grad_b[k] = delta.sum(axis=0)
        if k > 0:
            delta = delta @ params.weights[k]
            delta *= _act_grad(cache.inputs[k], params.activation)
    return MlpParams(params.layer_sizes, tuple(grad_w), tuple(grad_b), params.activation)


# ---------------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------------

ParamTree = Union[MlpParams, Mapping[str, np.ndarray]]


def _as_dict(tree: ParamTree) -> dict:
    return tree.to_dict() if isinstance(tree, MlpParams) else dict(tree)


@dataclass(frozen=True)
class AdamState:
    first_moment: dict
    second_moment: dict
    step_count: int = 0
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8


def init_adam(params: ParamTree, learning_rate: float = 1e-3, beta1: float = 0.9,
              beta2: float = 0.999, epsilon: float = 1e-8) -> AdamState:
    arrays = _as_dict(params)
    return AdamState(
        first_moment={k: np.zeros_like(v) for k, v in arrays.items()},
        second_moment={k: np.zeros_like(v) for k, v in arrays.items()},
        learning_rate=learning_rate,
        beta1=beta1,
        beta2=beta2,
        epsilon=epsilon,
    )


def adam_step(params: ParamTree, grads: ParamTree, state: AdamState):
    """Bias-corrected Adam descent step.

    ``params`` may be an :class:`MlpParams` or a mapping of named arrays; the
    same container type is returned alongside the new state.
    """
    p = _as_dict(params)
    g = _as_dict(grads)
    if p.keys() != g.keys() or p.keys() != state.first_moment.keys():
        raise DimensionError("parameter, gradient and optimizer-state names differ")
    for name, grad in g.items():
        if grad.shape != p[name].shape:
            raise DimensionError(f"{name}: gradient shape {grad.shape} != parameter shape {p[name].shape}")
        if not np.all(np.isfinite(grad)):
            raise NumericError(f"non-finite gradient in tensor {name!r}", tensor=name)

    t = state.step_count + 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    step_size = state.learning_rate * np.sqrt(c2) / c1
    eps = state.epsilon * np.sqrt(c2)
    new_p, new_m, new_v = {}, {}, {}
    for name, value in p.items():
        grad = g[name]
        m = state.first_moment[name] * b1
        m += (1.0 - b1) * grad
        v = state.second_moment[name] * b2
        v += (1.0 - b2) * (grad * grad)
        # lr * m_hat / (sqrt(v_hat) + eps), with both corrections folded into scalars
        denom = np.sqrt(v)
        denom += eps
        new_p[name] = value - step_size * m / denom
        new_m[name] = m
        new_v[name] = v
    new_state = AdamState(new_m, new_v, t, state.learning_rate, b1, b2, state.epsilon)
    if isinstance(params, MlpParams):
        return params.replace_arrays(new_p), new_state
    return new_p, new_state
