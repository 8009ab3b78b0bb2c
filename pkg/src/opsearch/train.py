"""Adam with parameter groups, minibatch iteration and evaluation."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .tensor import Tensor, cross_entropy


class NonFiniteError(FloatingPointError):
    """A loss or gradient became NaN/Inf during training."""


@dataclass
class ParamGroup:
    params: list[Tensor]
    lr: float
    name: str = ""
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)

    def __post_init__(self):
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]


class Adam:
    """Bias-corrected Adam. Each group keeps its own moments, step count and lr."""

    def __init__(self, groups: Sequence[ParamGroup], betas=(0.9, 0.999), eps: float = 1e-8):
        self.groups = {g.name or f"group{i}": g for i, g in enumerate(groups)}
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.steps = {name: 0 for name in self.groups}

    def zero_grad(self, group: str | None = None) -> None:
        for name, g in self.groups.items():
            if group is None or name == group:
                for p in g.params:
                    p.grad = None

    def step(self, group: str | None = None) -> None:
        """Update one group (or all). Parameters without a gradient count as zero-gradient."""
        for name, g in self.groups.items():
            if group is not None and name != group:
                continue
            self.steps[name] += 1
            t = self.steps[name]
            c1 = 1.0 - self.beta1**t
            c2 = 1.0 - self.beta2**t
            for i, p in enumerate(g.params):
                grad = p.grad if p.grad is not None else np.zeros_like(p.data)
                if not np.all(np.isfinite(grad)):
                    raise NonFiniteError(f"non-finite gradient for parameter {p.name or i!r}")
                g.m[i] = self.beta1 * g.m[i] + (1.0 - self.beta1) * grad
                g.v[i] = self.beta2 * g.v[i] + (1.0 - self.beta2) * grad * grad
                p.data = p.data - g.lr * (g.m[i] / c1) / (np.sqrt(g.v[i] / c2) + self.eps)


def batches(n: int, batch_size: int, rng: np.random.Generator | None):
    """Index batches over ``n`` samples; shuffled when ``rng`` is given."""
    order = rng.permutation(n) if rng is not None else np.arange(n)
    for start in range(0, n, batch_size):
        yield order[start : start + batch_size]


@dataclass
class EvalResult:
    accuracy: float
    loss: float


def evaluate(net, x: np.ndarray, y: np.ndarray, assignment=None, quantized: bool = False, batch_size: int = 256) -> EvalResult:
    """Accuracy and mean cross-entropy over a split, in fixed-order batches.

    Quantized evaluation scales activations per batch, so results depend on
    ``batch_size``; keep it fixed when comparing runs.
    """
    if len(y) == 0:
        raise ValueError("cannot evaluate on an empty split")
    correct = 0
    loss_sum = 0.0
    for idx in batches(len(y), batch_size, None):
        logits = net.forward(x[idx], assignment=assignment, quantized=quantized)
        loss_sum += cross_entropy(logits.detach(), y[idx]).item() * len(idx)
        correct += int(np.sum(np.argmax(logits.data, axis=1) == y[idx]))
    return EvalResult(correct / len(y), loss_sum / len(y))


class EarlyStopping:
    """Stop once the monitored loss fails to improve by ``min_delta`` for ``patience`` epochs."""

    def __init__(self, patience: int = 5, min_delta: float = 1e-4):
        self.patience = patience
        self.min_delta = min_delta
        self.best = np.inf
        self.stale = 0

    def update(self, value: float) -> bool:
        if value < self.best - self.min_delta:
            self.best = value
            self.stale = 0
        else:
            self.stale += 1
        return self.patience > 0 and self.stale >= self.patience
