"""Two-layer classifier: ReLU feature extractor plus linear head, trained by hand-written backprop."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple, Optional

import numpy as np

LOG_EPS = 1e-12
PARAM_NAMES = ("W1", "b1", "W2", "b2")


@dataclass
class ModelParams:
    W1: np.ndarray  # (h, d)
    b1: np.ndarray  # (h,)
    W2: np.ndarray  # (C, h)
    b2: np.ndarray  # (C,)

    @property
    def shapes(self) -> tuple[int, int, int]:
        """(d, h, C)"""
        return self.W1.shape[1], self.W1.shape[0], self.W2.shape[0]

    def tensors(self) -> list[np.ndarray]:
        return [self.W1, self.b1, self.W2, self.b2]

    def copy(self) -> "ModelParams":
        return ModelParams(*(t.copy() for t in self.tensors()))

    def check(self) -> None:
        d, h, c = self.shapes
        if self.b1.shape != (h,) or self.W2.shape != (c, h) or self.b2.shape != (c,):
            raise ValueError("inconsistent parameter shapes")
        if not all(np.isfinite(t).all() for t in self.tensors()):
            raise ValueError("non-finite parameters")


class ForwardResult(NamedTuple):
    pre: np.ndarray     # hidden pre-activations
    z: np.ndarray       # penultimate features, after the ReLU
    logits: np.ndarray
    probs: np.ndarray


@dataclass
class OptState:
    learning_rate: float
    momentum: float = 0.0
    velocity: Optional[list[np.ndarray]] = field(default=None)

    def __post_init__(self):
        if not self.learning_rate >= 0:
            raise ValueError("learning rate must be nonnegative")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError("momentum must be in [0, 1)")

    def copy(self) -> "OptState":
        vel = None if self.velocity is None else [v.copy() for v in self.velocity]
        return OptState(self.learning_rate, self.momentum, vel)


def init(d: int, h: int, c: int, rng: np.random.Generator) -> ModelParams:
    """Uniform init in +-1/sqrt(fan_in) for weights and biases alike."""
    if min(d, h, c) < 1:
        raise ValueError(f"dimensions must be >= 1, got d={d}, h={h}, C={c}")
    a1, a2 = 1.0 / np.sqrt(d), 1.0 / np.sqrt(h)
    return ModelParams(
        W1=rng.uniform(-a1, a1, (h, d)),
        b1=rng.uniform(-a1, a1, h),
        W2=rng.uniform(-a2, a2, (c, h)),
        b2=rng.uniform(-a2, a2, c),
    )


def softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def forward(params: ModelParams, x: np.ndarray) -> ForwardResult:
    """Accepts a single vector of length d or an (n, d) batch."""
    x = np.asarray(x, dtype=float)
    if not np.isfinite(x).all():
        raise ValueError("non-finite input")
    if x.shape[-1] != params.W1.shape[1]:
        raise ValueError(f"input has {x.shape[-1]} features, model expects {params.W1.shape[1]}")
    pre = x @ params.W1.T + params.b1
    z = np.maximum(pre, 0.0)
    logits = z @ params.W2.T + params.b2
    return ForwardResult(pre, z, logits, softmax(logits))


def predict_proba(params: ModelParams, x: np.ndarray) -> np.ndarray:
    return forward(params, x).probs


def _check_distribution(p: np.ndarray, name: str) -> None:
    if (p < 0).any() or not np.isfinite(p).all() or np.abs(p.sum(axis=-1) - 1.0).max() > 1e-6:
        raise ValueError(f"{name} is not a valid probability distribution")


def soft_cross_entropy(probs: np.ndarray, target: np.ndarray) -> np.ndarray:
    """-sum_c target_c * log(probs_c + eps), row-wise for 2-D input."""
    probs = np.asarray(probs, dtype=float)
    target = np.asarray(target, dtype=float)
    _check_distribution(probs, "probs")
    _check_distribution(target, "target")
    return -(target * np.log(probs + LOG_EPS)).sum(axis=-1)


def entropy(p: np.ndarray) -> np.ndarray:
    p = np.asarray(p, dtype=float)
    return -(np.where(p > 0, p * np.log(np.where(p > 0, p, 1.0)), 0.0)).sum(axis=-1)


def weighted_loss(params: ModelParams, x: np.ndarray, targets: np.ndarray,
                  weights: np.ndarray) -> float:
    """(1 / sum w) * sum_i w_i * CE(target_i, p(x_i)); what ``backward`` differentiates."""
    fr = forward(params, x)
    losses = -(targets * np.log(fr.probs + LOG_EPS)).sum(axis=1)
    w = np.asarray(weights, dtype=float)
    return float((w * losses).sum() / w.sum())


def backward(params: ModelParams, x: np.ndarray, targets: np.ndarray,
             weights: Optional[np.ndarray] = None,
             fr: Optional[ForwardResult] = None) -> list[np.ndarray]:
    """Gradients of the weighted mean soft cross-entropy, ordered like ``PARAM_NAMES``.

    ``fr`` may carry a forward pass of the same ``x`` to avoid recomputing it.
    """
    x = np.atleast_2d(np.asarray(x, dtype=float))
    targets = np.atleast_2d(np.asarray(targets, dtype=float))
    n = x.shape[0]
    w = np.ones(n) if weights is None else np.asarray(weights, dtype=float)
    if (w < 0).any():
        raise ValueError("sample weights must be nonnegative")
    total = w.sum()
    if not total > 0:
        raise ValueError("empty effective batch: all sample weights are zero")
    if fr is None:
        fr = forward(params, x)
    p = fr.probs
    # d/dlogit of -sum t log(p + eps); reduces to p * sum(t) - t when eps -> 0
    r = targets / (p + LOG_EPS)
    g_logits = p * (r * p).sum(axis=1, keepdims=True) - r * p
    g_logits *= (w / total)[:, None]
    gW2 = g_logits.T @ fr.z
    gb2 = g_logits.sum(axis=0)
    g_pre = (g_logits @ params.W2) * (fr.pre > 0)
    gW1 = g_pre.T @ x
    gb1 = g_pre.sum(axis=0)
    return [gW1, gb1, gW2, gb2]


def sgd_step(params: ModelParams, grads: list[np.ndarray], opt: OptState) -> ModelParams:
    """Heavy-ball SGD. Updates ``opt.velocity`` in place and returns new params."""
    tensors = params.tensors()
    if len(grads) != len(tensors) or any(g.shape != t.shape for g, t in zip(grads, tensors)):
        raise ValueError("gradient shapes do not match parameters")
    if opt.velocity is None:
        opt.velocity = [np.zeros_like(t) for t in tensors]
    new = []
    for i, (t, g) in enumerate(zip(tensors, grads)):
        v = opt.momentum * opt.velocity[i] + g
        opt.velocity[i] = v
        new.append(t - opt.learning_rate * v)
    return ModelParams(*new)


# -- checkpoints -----------------------------------------------------------

def save_checkpoint(params: ModelParams, path: str | Path) -> None:
    """JSON with a shape header per tensor; floats stored as hex so they round-trip exactly."""
    doc = {
        "format": "llcdro-mlp/1",
        "tensors": [
            {"name": n, "shape": list(t.shape), "data": [float(v).hex() for v in t.ravel()]}
            for n, t in zip(PARAM_NAMES, params.tensors())
        ],
    }
    Path(path).write_text(json.dumps(doc))


def load_checkpoint(path: str | Path) -> ModelParams:
    doc = json.loads(Path(path).read_text())
    by_name = {
        t["name"]: np.array([float.fromhex(v) for v in t["data"]], dtype=float).reshape(t["shape"])
        for t in doc["tensors"]
    }
    params = ModelParams(*(by_name[n] for n in PARAM_NAMES))
    params.check()
    return params
