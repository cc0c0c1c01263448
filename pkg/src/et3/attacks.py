"""Gradient attacks on raw classifiers and on energy-defended pipelines.

All attacks accept one sample (``x`` of shape ``(d,)`` with an integer label) or
a batch (``x`` of shape ``(n, d)`` with ``n`` labels) and return an
:class:`AttackResult` with matching leading shape.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, List, Optional, Sequence

import numpy as np

from .defense import NORMS, DefenseConfig, Pipeline, norm_of, project
from .nets import Classifier, cross_entropy, softmax

LOSSES = ("cross_entropy", "margin")


@dataclass(frozen=True)
class AttackConfig:
    epsilon_a: float
    step_size: float
    steps: int = 10
    norm: str = "linf"
    restarts: int = 0
    loss: str = "cross_entropy"
    seed: int = 0

    def __post_init__(self):
        # radius 0 is allowed: it degenerates to clean evaluation
        if not self.epsilon_a >= 0:
            raise ValueError("epsilon_a must be non-negative")
        if not self.step_size > 0:
            raise ValueError("step_size must be positive")
        if int(self.steps) != self.steps or self.steps < 1:
            raise ValueError("steps must be a positive integer")
        if int(self.restarts) != self.restarts or self.restarts < 0:
            raise ValueError("restarts must be a non-negative integer")
        if self.norm not in NORMS:
            raise ValueError(f"norm must be one of {NORMS}")
        if self.loss not in LOSSES:
            raise ValueError(f"loss must be one of {LOSSES}")
        if self.seed < 0:
            raise ValueError("seed must be non-negative")


@dataclass
class AttackResult:
    x_adv: np.ndarray
    success: np.ndarray
    loss_trace: np.ndarray
    restart_index_used: np.ndarray
    aborted: List[tuple] = field(default_factory=list)

    @property
    def final_loss(self) -> np.ndarray:
        return self.loss_trace[..., -1]


def attack_loss(logits, y, kind: str) -> np.ndarray:
    if kind == "cross_entropy":
        return cross_entropy(logits, y)
    if kind == "margin":
        logits = np.asarray(logits, dtype=np.float64)
        y = np.asarray(y)
        true = np.take_along_axis(logits, y[..., None], axis=-1)[..., 0]
        others = logits.copy()
        np.put_along_axis(others, y[..., None], -np.inf, axis=-1)
        return others.max(axis=-1) - true
    raise ValueError(f"unknown loss {kind!r}")


def attack_loss_grad(model: Classifier, x, y, kind: str) -> np.ndarray:
    """Gradient of :func:`attack_loss` w.r.t. the input (batched over rows of ``x``)."""
    logits = model.forward(x)
    jac = model.input_jacobian(x)
    if kind == "cross_entropy":
        dl = softmax(logits)
        dl[np.arange(len(y)), y] -= 1.0
    elif kind == "margin":
        others = logits.copy()
        others[np.arange(len(y)), y] = -np.inf
        dl = np.zeros_like(logits)
        dl[np.arange(len(y)), others.argmax(axis=-1)] = 1.0
        dl[np.arange(len(y)), y] -= 1.0
    else:
        raise ValueError(f"unknown loss {kind!r}")
    return np.einsum("nk,nkd->nd", dl, jac)


def random_start(rng: np.random.Generator, d: int, epsilon: float, norm: str) -> np.ndarray:
    """A point drawn uniformly from the norm ball of radius ``epsilon``."""
    if norm == "linf":
        return rng.uniform(-epsilon, epsilon, size=d)
    direction = rng.standard_normal(d)
    direction /= np.linalg.norm(direction)
    return direction * epsilon * rng.uniform() ** (1.0 / d)


def _ascent_direction(grad: np.ndarray, norm: str) -> np.ndarray:
    if norm == "linf":
        return np.sign(grad)
    n = np.linalg.norm(grad, axis=-1, keepdims=True)
    return np.where(n > 0, grad / np.where(n > 0, n, 1.0), 0.0)


def _batch(x, y):
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    return np.atleast_2d(x), np.atleast_1d(np.asarray(y, dtype=np.int64)), single


def _unbatch(result: AttackResult, single: bool) -> AttackResult:
    if not single:
        return result
    return AttackResult(result.x_adv[0], result.success[0], result.loss_trace[0],
                        result.restart_index_used[0], result.aborted)


def _run(x, y, cfg: AttackConfig, grad_fn: Callable, loss_fn: Callable, fooled_fn: Callable,
         sample_ids: Optional[Sequence[int]]) -> AttackResult:
    n, d = x.shape
    ids = np.arange(n) if sample_ids is None else np.asarray(sample_ids)
    already = fooled_fn(x, y)
    runs_x, runs_trace, runs_fooled = [], [], []
    aborted = []
    for r in range(cfg.restarts + 1):
        if r == 0:
            cur = x.copy()
        else:
            starts = [random_start(np.random.default_rng([cfg.seed, int(i), r]), d, cfg.epsilon_a, cfg.norm)
                      for i in ids]
            cur = x + np.stack(starts)
        alive = ~already
        trace = [loss_fn(cur, y)]
        for _ in range(cfg.steps):
            g = np.zeros_like(cur)
            if alive.any():
                g[alive] = grad_fn(cur[alive], y[alive])
            bad = alive & ~np.all(np.isfinite(g), axis=-1)
            for i in np.flatnonzero(bad):
                aborted.append((int(ids[i]), r))
            alive &= ~bad
            g[~alive] = 0.0
            stepped = cur + cfg.step_size * _ascent_direction(g, cfg.norm)
            cur = np.where(alive[:, None], x + project(stepped - x, cfg.epsilon_a, cfg.norm), cur)
            trace.append(loss_fn(cur, y))
        trace = np.stack(trace, axis=-1)
        # an aborted restart never wins the selection
        dead = ~alive & ~already
        trace[dead, -1] = -np.inf
        runs_x.append(cur)
        runs_trace.append(trace)
        runs_fooled.append(fooled_fn(cur, y))

    fooled = np.stack(runs_fooled)            # (R, n)
    final = np.stack([t[:, -1] for t in runs_trace])
    key = np.where(fooled, final, -np.inf)
    best_fooled = np.argmax(key, axis=0)
    best_any = np.argmax(final, axis=0)
    pick = np.where(fooled.any(axis=0), best_fooled, best_any)
    pick = np.where(already, 0, pick)
    rows = np.arange(n)
    x_adv = np.stack(runs_x)[pick, rows]
    trace = np.stack(runs_trace)[pick, rows]
    if already.any():
        x_adv[already] = x[already]
        trace[already] = loss_fn(x[already], y[already])[:, None]
    return AttackResult(x_adv, fooled[pick, rows] | already, trace, pick, aborted)


def _model_fns(model: Classifier, loss: str):
    grad_fn = lambda xs, ys: attack_loss_grad(model, xs, ys, loss)
    loss_fn = lambda xs, ys: attack_loss(model.forward(xs), ys, loss)
    fooled_fn = lambda xs, ys: np.argmax(model.forward(xs), axis=-1) != ys
    return grad_fn, loss_fn, fooled_fn


def fgsm(model: Classifier, x, y, epsilon_a: float, norm: str = "linf") -> AttackResult:
    """One cross-entropy ascent step of length ``epsilon_a`` (sign step for linf)."""
    cfg = AttackConfig(epsilon_a=epsilon_a, step_size=max(epsilon_a, np.finfo(float).tiny),
                       steps=1, norm=norm)
    return pgd(model, x, y, cfg)


def pgd(model: Classifier, x, y, cfg: AttackConfig, sample_ids=None) -> AttackResult:
    """Projected gradient ascent with ``cfg.restarts`` extra random starts.

    Restart 0 begins at ``x``.  Inputs that are already misclassified are
    returned unchanged.  Among the restarts the highest-loss successful one is
    kept, else the highest-loss one overall.
    """
    xb, yb, single = _batch(x, y)
    res = _run(xb, yb, cfg, *_model_fns(model, cfg.loss), sample_ids)
    return _unbatch(res, single)


def bpda_attack(model: Classifier, defense_cfg: DefenseConfig, x, y, atk_cfg: AttackConfig,
                proxy: Optional[Classifier] = None, sample_ids=None) -> AttackResult:
    """Defense-aware PGD treating the energy transformation as identity on the backward pass.

    The loss gradient is taken at the transformed point and applied to the raw
    input; losses and success are measured on the full defended pipeline.
    """
    pipe = Pipeline(model, defense_cfg, proxy)
    xb, yb, single = _batch(x, y)
    grad_fn = lambda xs, ys: attack_loss_grad(model, pipe.transform(xs), ys, atk_cfg.loss)
    loss_fn = lambda xs, ys: attack_loss(pipe.logits(xs), ys, atk_cfg.loss)
    fooled_fn = lambda xs, ys: pipe.predict(xs) != ys
    res = _run(xb, yb, atk_cfg, grad_fn, loss_fn, fooled_fn, sample_ids)
    return _unbatch(res, single)


def worst_case(results: Sequence[AttackResult], pipeline: Pipeline, y) -> AttackResult:
    """Combine several attacks on the same inputs, judged on ``pipeline``.

    Per sample the first result that fools the pipeline wins; otherwise the
    one with the highest pipeline cross-entropy.  Success flags are
    recomputed on the pipeline, so a sample is robust only if it survives
    every attack in the list.
    """
    if not results:
        raise ValueError("worst_case needs at least one attack result")
    single = np.asarray(results[0].x_adv).ndim == 1
    xs = np.stack([np.atleast_2d(r.x_adv) for r in results])       # (A, n, d)
    yb = np.atleast_1d(np.asarray(y, dtype=np.int64))
    fooled = np.stack([pipeline.predict(xa) != yb for xa in xs])
    losses = np.stack([pipeline.loss(xa, yb) for xa in xs])
    first_fool = np.argmax(fooled, axis=0)
    pick = np.where(fooled.any(axis=0), first_fool, np.argmax(losses, axis=0))
    rows = np.arange(xs.shape[1])
    traces = [np.atleast_2d(r.loss_trace) for r in results]
    restarts = np.stack([np.atleast_1d(r.restart_index_used) for r in results])
    same_len = len({t.shape[1] for t in traces}) == 1
    trace = np.stack(traces)[pick, rows] if same_len else losses[pick, rows][:, None]
    aborted = [a for r in results for a in r.aborted]
    res = AttackResult(xs[pick, rows], fooled[pick, rows], trace, restarts[pick, rows], aborted)
    return _unbatch(res, single)


def budget_ok(x, x_adv, epsilon: float, norm: str, slack: float = 1e-9) -> np.ndarray:
    return norm_of(np.asarray(x_adv) - np.asarray(x), norm) <= epsilon + slack
