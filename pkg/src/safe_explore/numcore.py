"""Small numpy substrate: dense MLPs with hand-written backprop, Adam, seeded RNG streams.

Everything runs in float64. Networks accept either a single input vector of
shape ``(n,)`` or a batch of shape ``(B, n)``; batched parameter gradients are
summed over the batch.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

ACTIVATIONS = ("tanh", "relu", "linear")


def make_rng(seed: int, *stream: int) -> np.random.Generator:
    """Counter-based generator (Philox) for ``seed`` and an optional sub-stream path."""
    if seed < 0:
        raise ValueError(f"seed must be non-negative, got {seed}")
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([seed, *stream])))


def _act(name: str, z: np.ndarray) -> np.ndarray:
    if name == "tanh":
        return np.tanh(z)
    if name == "relu":
        return np.maximum(z, 0.0)
    return z


def _act_grad(name: str, z: np.ndarray, h: np.ndarray) -> np.ndarray:
    # derivative expressed through pre-activation z and output h
    if name == "tanh":
        return 1.0 - h * h
    if name == "relu":
        return (z > 0.0).astype(np.float64)
    return np.ones_like(z)


@dataclass
class Mlp:
    """Fully connected network; ``weights[l]`` has shape ``(sizes[l+1], sizes[l])``."""

    layer_sizes: list[int]
    weights: list[np.ndarray]
    biases: list[np.ndarray]
    hidden_activation: str = "tanh"
    output_activation: str = "linear"

    def __post_init__(self) -> None:
        if self.hidden_activation not in ACTIVATIONS or self.output_activation not in ACTIVATIONS:
            raise ValueError(
                f"unknown activation {self.hidden_activation!r}/{self.output_activation!r}"
            )
        if len(self.weights) != len(self.layer_sizes) - 1 or len(self.biases) != len(self.weights):
            raise ValueError("layer count does not match layer_sizes")
        for l, (w, b) in enumerate(zip(self.weights, self.biases)):
            expected = (self.layer_sizes[l + 1], self.layer_sizes[l])
            if w.shape != expected or b.shape != (expected[0],):
                raise ValueError(f"layer {l}: weight {w.shape}, bias {b.shape}, expected {expected}")

    @property
    def input_size(self) -> int:
        return self.layer_sizes[0]

    @property
    def output_size(self) -> int:
        return self.layer_sizes[-1]

    def params(self) -> list[np.ndarray]:
        """Parameter arrays in the order ``[W0, b0, W1, b1, ...]`` (live references)."""
        out: list[np.ndarray] = []
        for w, b in zip(self.weights, self.biases):
            out.extend((w, b))
        return out

    def num_params(self) -> int:
        return sum(p.size for p in self.params())

    def flat_params(self) -> np.ndarray:
        return np.concatenate([p.ravel() for p in self.params()])

    def copy(self) -> "Mlp":
        return Mlp(
            list(self.layer_sizes),
            [w.copy() for w in self.weights],
            [b.copy() for b in self.biases],
            self.hidden_activation,
            self.output_activation,
        )

    def __call__(self, x: np.ndarray) -> np.ndarray:
        return mlp_forward(self, x)

    def to_dict(self) -> dict:
        return {
            "layer_sizes": list(self.layer_sizes),
            "hidden_activation": self.hidden_activation,
            "output_activation": self.output_activation,
            "weights": [w.ravel(order="C").tolist() for w in self.weights],
            "biases": [b.tolist() for b in self.biases],
        }

    @classmethod
    def from_dict(cls, data: dict) -> "Mlp":
        sizes = [int(s) for s in data["layer_sizes"]]
        weights = [
            np.asarray(w, dtype=np.float64).reshape(sizes[l + 1], sizes[l])
            for l, w in enumerate(data["weights"])
        ]
        biases = [np.asarray(b, dtype=np.float64) for b in data["biases"]]
        return cls(
            sizes,
            weights,
            biases,
            data.get("hidden_activation", "tanh"),
            data.get("output_activation", "linear"),
        )


def mlp_init(
    layer_sizes: Sequence[int],
    hidden_activation: str = "tanh",
    rng: np.random.Generator | None = None,
    output_activation: str = "linear",
) -> Mlp:
    """Weights uniform on ``[-1/sqrt(fan_in), 1/sqrt(fan_in)]``, biases zero."""
    sizes = [int(s) for s in layer_sizes]
    if len(sizes) < 2:
        raise ValueError(f"need at least an input and an output layer, got {sizes}")
    if any(s <= 0 for s in sizes):
        raise ValueError(f"layer sizes must be positive, got {sizes}")
    if rng is None:
        rng = make_rng(0)
    weights, biases = [], []
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        bound = 1.0 / np.sqrt(fan_in)
        weights.append(rng.uniform(-bound, bound, size=(fan_out, fan_in)))
        biases.append(np.zeros(fan_out))
    return Mlp(sizes, weights, biases, hidden_activation, output_activation)


def _check_input(net: Mlp, x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim not in (1, 2) or x.shape[-1] != net.input_size:
        raise ValueError(f"input shape {x.shape} incompatible with input size {net.input_size}")
    return x


def forward_cached(net: Mlp, x: np.ndarray) -> tuple[np.ndarray, list]:
    """Forward pass that also returns per-layer ``(input, pre_activation, output)`` records."""
    x = _check_input(net, x)
    h = x
    cache = []
    last = len(net.weights) - 1
    for l, (w, b) in enumerate(zip(net.weights, net.biases)):
        z = h @ w.T + b
        act = net.output_activation if l == last else net.hidden_activation
        out = _act(act, z)
        cache.append((h, z, out, act))
        h = out
    return h, cache


def mlp_forward(net: Mlp, x: np.ndarray) -> np.ndarray:
    return forward_cached(net, x)[0]


def backward_cached(
    net: Mlp, cache: list, upstream: np.ndarray, need_input_grad: bool = True
) -> tuple[list[np.ndarray], np.ndarray | None]:
    """Reverse pass for ``<upstream, output>``; parameter grads ordered like ``net.params()``."""
    out = cache[-1][2]
    upstream = np.asarray(upstream, dtype=np.float64)
    if upstream.shape != out.shape:
        raise ValueError(f"upstream shape {upstream.shape} != output shape {out.shape}")
    grads: list[np.ndarray] = [None] * (2 * len(net.weights))  # type: ignore[list-item]
    delta = upstream
    for l in range(len(net.weights) - 1, -1, -1):
        h_in, z, h_out, act = cache[l]
        dz = delta * _act_grad(act, z, h_out)
        if dz.ndim == 1:
            grads[2 * l] = np.outer(dz, h_in)
            grads[2 * l + 1] = dz.copy()
        else:
            grads[2 * l] = dz.T @ h_in
            grads[2 * l + 1] = dz.sum(axis=0)
        if l > 0 or need_input_grad:
            delta = dz @ net.weights[l]
    return grads, (delta if need_input_grad else None)


def mlp_gradients(
    net: Mlp, x: np.ndarray, upstream: np.ndarray
) -> tuple[list[np.ndarray], np.ndarray]:
    """Exact gradients of ``<upstream, net(x)>`` with respect to parameters and to ``x``."""
    _, cache = forward_cached(net, x)
    grads, dx = backward_cached(net, cache, upstream)
    return grads, dx  # type: ignore[return-value]


def relative_error(a: np.ndarray, b: np.ndarray, floor: float) -> np.ndarray:
    """Elementwise ``|a-b| / max(|a|, |b|, floor)``."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)


def finite_difference_gradients(
    net: Mlp, x: np.ndarray, upstream: np.ndarray, h: float = 1e-5
) -> tuple[list[np.ndarray], np.ndarray]:
    """Central differences of ``<upstream, net(x)>``; uses forward passes only."""
    x = _check_input(net, x).copy()
    upstream = np.asarray(upstream, dtype=np.float64)

    def objective() -> float:
        return float(np.sum(upstream * mlp_forward(net, x)))

    param_grads = []
    for p in net.params():
        g = np.zeros_like(p)
        flat, gflat = p.reshape(-1), g.reshape(-1)
        for k in range(flat.size):
            orig = flat[k]
            flat[k] = orig + h
            fp = objective()
            flat[k] = orig - h
            fm = objective()
            flat[k] = orig
            gflat[k] = (fp - fm) / (2 * h)
        param_grads.append(g)
    dx = np.zeros_like(x)
    xf, dxf = x.reshape(-1), dx.reshape(-1)
    for k in range(xf.size):
        orig = xf[k]
        xf[k] = orig + h
        fp = objective()
        xf[k] = orig - h
        fm = objective()
        xf[k] = orig
        dxf[k] = (fp - fm) / (2 * h)
    return param_grads, dx


def gradient_check(
    net: Mlp,
    x: np.ndarray,
    upstream: np.ndarray,
    h: float = 1e-5,
    abs_floor: float = 1e-7,
) -> float:
    """Worst relative error between backprop and central differences.

    Entries whose absolute discrepancy is below ``abs_floor`` count as exact.
    """
    analytic, dx = mlp_gradients(net, x, upstream)
    numeric, ndx = finite_difference_gradients(net, x, upstream, h)
    worst = 0.0
    for a, n in zip([*analytic, dx], [*numeric, ndx]):
        diff = np.abs(a - n)
        rel = np.where(diff <= abs_floor, 0.0, relative_error(a, n, abs_floor))
        if rel.size:
            worst = max(worst, float(rel.max()))
    return worst


@dataclass
class Adam:
    """Adam with bias correction. Moment buffers are allocated on the first step."""

    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    step_count: int = 0
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)

    def step(self, params: Sequence[np.ndarray], grads: Sequence[np.ndarray]) -> None:
        """Update ``params`` in place."""
        if len(params) != len(grads):
            raise ValueError(f"{len(params)} params but {len(grads)} grads")
        for p, g in zip(params, grads):
            if p.shape != np.shape(g):
                raise ValueError(f"param shape {p.shape} != grad shape {np.shape(g)}")
        if not self.m:
            self.m = [np.zeros_like(p) for p in params]
            self.v = [np.zeros_like(p) for p in params]
        elif [m.shape for m in self.m] != [p.shape for p in params]:
            raise ValueError("parameter shapes changed since the first step")
        self.step_count += 1
        t = self.step_count
        c1 = 1.0 - self.beta1**t
        c2 = 1.0 - self.beta2**t
        for p, g, m, v in zip(params, grads, self.m, self.v):
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * np.square(g)
            p -= self.learning_rate * (m / c1) / (np.sqrt(v / c2) + self.epsilon)

    def to_dict(self) -> dict:
        return {
            "learning_rate": self.learning_rate,
            "beta1": self.beta1,
            "beta2": self.beta2,
            "epsilon": self.epsilon,
            "step_count": self.step_count,
            "m": [a.tolist() for a in self.m],
            "v": [a.tolist() for a in self.v],
        }

    @classmethod
    def from_dict(cls, data: dict) -> "Adam":
        return cls(
            learning_rate=data["learning_rate"],
            beta1=data["beta1"],
            beta2=data["beta2"],
            epsilon=data["epsilon"],
            step_count=data["step_count"],
            m=[np.asarray(a, dtype=np.float64) for a in data["m"]],
            v=[np.asarray(a, dtype=np.float64) for a in data["v"]],
        )


def adam_step(state: Adam, params: Sequence[np.ndarray], grads: Sequence[np.ndarray]) -> None:
    state.step(params, grads)
