"""Small dense networks with exact backprop, AdamW and a cosine schedule.

Batches are row-major: an input of shape (N, d_in) gives outputs (N, d_out),
with the same weights applied to every row (the shared per-point MLP).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

ACTIVATIONS = ("relu", "tanh", "identity", "softmax")
LOG_CLAMP = 1e-12


class GradientBlowUp(FloatingPointError):
    pass


def softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def _act(name, z):
    if name == "relu":
        return np.maximum(z, 0.0)
    if name == "tanh":
        return np.tanh(z)
    if name == "identity":
        return z
    if name == "softmax":
        return softmax(z)
    raise ValueError(f"unknown activation {name!r}")


def _act_backward(name, z, y, g):
    if name == "relu":
        # relu'(0) = 0
        return g * (z > 0)
    if name == "tanh":
        return g * (1.0 - y * y)
    if name == "identity":
        return g
    # softmax Jacobian-vector product
    return y * (g - (g * y).sum(axis=-1, keepdims=True))


@dataclass
class Trace:
    inputs: list  # input of each layer
    pre: list  # pre-activations
    output: np.ndarray


@dataclass
class Mlp:
    weights: list
    biases: list
    activations: list

    def __post_init__(self):
        if not (len(self.weights) == len(self.biases) == len(self.activations)):
            raise ValueError("weights, biases and activations must align")
        for a in self.activations:
            if a not in ACTIVATIONS:
                raise ValueError(f"unknown activation {a!r}")
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            if b.shape != (w.shape[0],):
                raise ValueError(f"layer {i}: bias shape {b.shape} vs weight {w.shape}")
            if i and w.shape[1] != self.weights[i - 1].shape[0]:
                raise ValueError(f"layer {i}: input dim {w.shape[1]} != {self.weights[i - 1].shape[0]}")

    @classmethod
    def create(cls, dims, activations, rng: np.random.Generator, zero_last: bool = False) -> Mlp:
        """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) init; ``zero_last`` zeroes the final layer."""
        if len(activations) != len(dims) - 1:
            raise ValueError("need one activation per layer")
        ws, bs = [], []
        for i, (fi, fo) in enumerate(zip(dims[:-1], dims[1:])):
            bound = math.sqrt(1.0 / fi)
            if zero_last and i == len(dims) - 2:
                ws.append(np.zeros((fo, fi)))
                bs.append(np.zeros(fo))
            else:
                ws.append(rng.uniform(-bound, bound, size=(fo, fi)))
                bs.append(rng.uniform(-bound, bound, size=fo))
        return cls(ws, bs, list(activations))

    @property
    def dims(self) -> list[int]:
        return [self.weights[0].shape[1]] + [w.shape[0] for w in self.weights]

    @property
    def params(self) -> list[np.ndarray]:
        out = []
        for w, b in zip(self.weights, self.biases):
            out += [w, b]
        return out

    def copy(self) -> Mlp:
        return Mlp([w.copy() for w in self.weights], [b.copy() for b in self.biases], list(self.activations))

    def forward(self, x: np.ndarray) -> Trace:
        x = np.asarray(x, dtype=np.float64)
        if x.shape[-1] != self.dims[0]:
            raise ValueError(f"input dim {x.shape[-1]} != {self.dims[0]}")
        inputs, pre = [], []
        h = x
        for w, b, a in zip(self.weights, self.biases, self.activations):
            inputs.append(h)
            z = h @ w.T + b
            pre.append(z)
            h = _act(a, z)
        return Trace(inputs, pre, h)

    def __call__(self, x: np.ndarray) -> np.ndarray:
        return self.forward(x).output

    def backward(self, trace: Trace, grad_out: np.ndarray):
        """Gradients of sum(grad_out * output) w.r.t. params (``params`` order) and input."""
        g = np.asarray(grad_out, dtype=np.float64)
        grads = [None] * (2 * len(self.weights))
        for i in range(len(self.weights) - 1, -1, -1):
            y = trace.output if i == len(self.weights) - 1 else trace.inputs[i + 1]
            gz = _act_backward(self.activations[i], trace.pre[i], y, g)
            x = trace.inputs[i]
            gz2 = gz.reshape(-1, gz.shape[-1])
            grads[2 * i] = gz2.T @ x.reshape(-1, x.shape[-1])
            grads[2 * i + 1] = gz2.sum(axis=0)
            g = gz @ self.weights[i]
        return grads, g

    def to_dict(self) -> dict:
        return {
            "dims": self.dims,
            "activations": list(self.activations),
            "params": [p.ravel().tolist() for p in self.params],
        }

    @classmethod
    def from_dict(cls, d: dict) -> Mlp:
        dims = d["dims"]
        flat = d["params"]
        ws, bs = [], []
        for i, (fi, fo) in enumerate(zip(dims[:-1], dims[1:])):
            ws.append(np.asarray(flat[2 * i], dtype=np.float64).reshape(fo, fi))
            bs.append(np.asarray(flat[2 * i + 1], dtype=np.float64).reshape(fo))
        return cls(ws, bs, list(d["activations"]))


def cross_entropy(probs: np.ndarray, labels: np.ndarray, weights: np.ndarray | None = None):
    """Weighted mean of -log p[label]; probabilities clamped to [1e-12, 1].

    ``weights`` defaults to 1/N per row. Returns ``(loss, dloss/dprobs)``;
    the gradient is zero where the clamp is active.
    """
    probs = np.asarray(probs, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    n = len(labels)
    if weights is None:
        weights = np.full(n, 1.0 / n)
    p = probs[np.arange(n), labels]
    pc = np.clip(p, LOG_CLAMP, 1.0)
    loss = float(-(weights * np.log(pc)).sum())
    grad = np.zeros_like(probs)
    grad[np.arange(n), labels] = np.where(p >= LOG_CLAMP, -weights / pc, 0.0)
    return loss, grad


def row_cross_entropy(probs: np.ndarray, labels: np.ndarray) -> np.ndarray:
    p = probs[np.arange(len(labels)), np.asarray(labels, dtype=np.int64)]
    return -np.log(np.clip(p, LOG_CLAMP, 1.0))


@dataclass
class AdamW:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 1e-2
    step_count: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)

    def step(self, params: list[np.ndarray], grads: list[np.ndarray], lr: float) -> None:
        """In-place decoupled-weight-decay Adam update."""
        if len(params) != len(grads):
            raise ValueError("params/grads length mismatch")
        for p, g in zip(params, grads):
            if p.shape != g.shape:
                raise ValueError(f"shape mismatch {p.shape} vs {g.shape}")
            if not np.all(np.isfinite(g)):
                raise GradientBlowUp("gradient blow-up")
        if not self.m:
            self.m = [np.zeros_like(p) for p in params]
            self.v = [np.zeros_like(p) for p in params]
        self.step_count += 1
        t = self.step_count
        c1 = 1.0 - self.beta1**t
        c2 = 1.0 - self.beta2**t
        for p, g, m, v in zip(params, grads, self.m, self.v):
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p *= 1.0 - lr * self.weight_decay
            p -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def to_dict(self) -> dict:
        return {
            "beta1": self.beta1,
            "beta2": self.beta2,
            "eps": self.eps,
            "weight_decay": self.weight_decay,
            "step_count": self.step_count,
            "m": [a.ravel().tolist() for a in self.m],
            "v": [a.ravel().tolist() for a in self.v],
        }

    @classmethod
    def from_dict(cls, d: dict, like: list[np.ndarray]) -> AdamW:
        opt = cls(d["beta1"], d["beta2"], d["eps"], d["weight_decay"], d["step_count"])
        opt.m = [np.asarray(a, dtype=np.float64).reshape(p.shape) for a, p in zip(d["m"], like)]
        opt.v = [np.asarray(a, dtype=np.float64).reshape(p.shape) for a, p in zip(d["v"], like)]
        return opt


@dataclass(frozen=True)
class CosineSchedule:
    base_lr: float
    total_steps: int

    def __post_init__(self):
        if self.base_lr <= 0:
            raise ValueError("base_lr must be positive")
        if self.total_steps < 1:
            raise ValueError("total_steps must be >= 1")


def lr_at(sched: CosineSchedule, step: int) -> float:
    if not 0 <= step <= sched.total_steps:
        raise ValueError(f"step {step} outside [0, {sched.total_steps}]")
    return sched.base_lr * (1.0 + math.cos(math.pi * step / sched.total_steps)) / 2.0
