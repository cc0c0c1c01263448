"""Test-time energy minimization of inputs inside a norm ball around the original input."""
from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Optional, Tuple

import numpy as np

from .energy import energy, energy_grad_input
from .nets import Classifier, DimensionError, cross_entropy

NORMS = ("l2", "linf")
ENERGY_HEADS = ("eval", "proxy")


class NonFiniteGradientError(FloatingPointError):
    def __init__(self, step: int, message: str = "non-finite energy gradient"):
        super().__init__(f"{message} at step {step}")
        self.step = step


@dataclass(frozen=True)
class DefenseConfig:
    epsilon: float
    alpha: float
    steps: int = 2
    norm: str = "l2"
    clamp: Optional[Tuple[float, float]] = None
    energy_head: str = "eval"

    def __post_init__(self):
        if not self.epsilon > 0:
            raise ValueError("epsilon must be positive")
        if not self.alpha > 0:
            raise ValueError("alpha must be positive")
        if int(self.steps) != self.steps or self.steps < 1:
            raise ValueError("steps must be a positive integer")
        if self.norm not in NORMS:
            raise ValueError(f"norm must be one of {NORMS}")
        if self.energy_head not in ENERGY_HEADS:
            raise ValueError(f"energy_head must be one of {ENERGY_HEADS}")
        if self.clamp is not None:
            lo, hi = self.clamp
            if not lo < hi:
                raise ValueError("clamp needs lo < hi")
            object.__setattr__(self, "clamp", (float(lo), float(hi)))

    @classmethod
    def preset(cls, name: str, **overrides) -> "DefenseConfig":
        return replace(PRESETS[name], **overrides)


# Zero-shot settings for the two robust CLIP backbones; scales are image-space.
PRESETS = {
    "tecoa": DefenseConfig(epsilon=5.0, alpha=2.5, steps=2),
    "fare": DefenseConfig(epsilon=4.0, alpha=2.0, steps=2),
    "tecoa_single_step": DefenseConfig(epsilon=5.0, alpha=5.0, steps=1),
    "fare_single_step": DefenseConfig(epsilon=4.0, alpha=4.0, steps=1),
}


@dataclass(frozen=True)
class TransformResult:
    x_p: np.ndarray
    energy_trace: np.ndarray
    displacement_norm: np.ndarray


def norm_of(delta, norm: str) -> np.ndarray:
    delta = np.asarray(delta, dtype=np.float64)
    if norm == "l2":
        return np.linalg.norm(delta, axis=-1)
    if norm == "linf":
        return np.max(np.abs(delta), axis=-1)
    raise ValueError(f"unknown norm {norm!r}")


def project_l2(delta, epsilon: float) -> np.ndarray:
    delta = np.asarray(delta, dtype=np.float64)
    n = np.linalg.norm(delta, axis=-1, keepdims=True)
    scale = np.where(n > epsilon, epsilon / np.where(n > 0, n, 1.0), 1.0)
    return delta * scale


def project_linf(delta, epsilon: float) -> np.ndarray:
    return np.clip(np.asarray(delta, dtype=np.float64), -epsilon, epsilon)


def project(delta, epsilon: float, norm: str) -> np.ndarray:
    if norm == "l2":
        return project_l2(delta, epsilon)
    if norm == "linf":
        return project_linf(delta, epsilon)
    raise ValueError(f"unknown norm {norm!r}")


def et3(model: Classifier, x, cfg: DefenseConfig) -> TransformResult:
    """Run ``cfg.steps`` projected gradient-descent steps on the input energy.

    Each iterate is ``x + P(x_prev - alpha * grad E(x_prev) - x)``: the ball is
    always centred on the original ``x``.  ``x`` may be a single vector or a
    batch of row vectors.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != model.dim:
        raise DimensionError(f"input has dimension {x.shape[-1]}, model expects {model.dim}")
    cur = x.copy()
    trace = [energy(model.forward(cur))]
    for t in range(1, cfg.steps + 1):
        grad = energy_grad_input(model, cur)
        if not np.all(np.isfinite(grad)):
            raise NonFiniteGradientError(t)
        step = cur - cfg.alpha * grad
        cur = x + project(step - x, cfg.epsilon, cfg.norm)
        if cfg.clamp is not None:
            cur = np.clip(cur, *cfg.clamp)
        trace.append(energy(model.forward(cur)))
    return TransformResult(
        x_p=cur,
        energy_trace=np.stack(trace, axis=-1),
        displacement_norm=norm_of(cur - x, cfg.norm),
    )


def et3_with_proxy(model_eval: Classifier, model_proxy: Classifier, x, cfg: DefenseConfig) -> TransformResult:
    """Transform ``x`` using the energy of a separate proxy label head.

    ``model_eval`` is only checked for a compatible input dimension; callers
    classify the returned point with it.
    """
    if model_eval.dim != model_proxy.dim:
        raise DimensionError("evaluation and proxy heads take different input dimensions")
    if cfg.energy_head != "proxy":
        raise ValueError("et3_with_proxy expects a config with energy_head='proxy'")
    return et3(model_proxy, x, cfg)


class Pipeline:
    """A classifier optionally preceded by the energy transformation."""

    def __init__(self, model: Classifier, defense: Optional[DefenseConfig] = None,
                 proxy: Optional[Classifier] = None):
        if defense is not None and defense.energy_head == "proxy" and proxy is None:
            raise ValueError("proxy energy head requested but no proxy model given")
        self.model = model
        self.defense = defense
        self.proxy = proxy

    @property
    def dim(self) -> int:
        return self.model.dim

    def transform(self, x) -> np.ndarray:
        if self.defense is None:
            return np.asarray(x, dtype=np.float64)
        if self.defense.energy_head == "proxy":
            return et3_with_proxy(self.model, self.proxy, x, self.defense).x_p
        return et3(self.model, x, self.defense).x_p

    def logits(self, x) -> np.ndarray:
        return self.model.forward(self.transform(x))

    def predict(self, x) -> np.ndarray:
        return np.argmax(self.logits(x), axis=-1)

    def loss(self, x, y) -> np.ndarray:
        return cross_entropy(self.logits(x), y)
