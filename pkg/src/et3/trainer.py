"""Minibatch SGD (optionally adversarial) for the toy classifiers, and accuracy evaluation."""
from __future__ import annotations

import time
from dataclasses import dataclass, field, replace
from typing import Dict, List, Optional

import numpy as np

from .attacks import AttackConfig, bpda_attack, pgd, worst_case
from .data import Dataset
from .defense import DefenseConfig, Pipeline
from .nets import Classifier, LinearClassifier, TwoLayerReluNet, cross_entropy, param_gradients

ADAPTIVITY = ("non_adaptive", "adaptive", "worst_case")


class TrainingDivergedError(FloatingPointError):
    pass


@dataclass(frozen=True)
class ArchSpec:
    kind: str
    dim: int
    num_classes: int
    hidden: int = 0

    def __post_init__(self):
        if self.kind not in ("linear", "two_layer_relu"):
            raise ValueError(f"unknown architecture {self.kind!r}")
        if self.kind == "two_layer_relu" and self.hidden < 1:
            raise ValueError("two_layer_relu needs hidden >= 1")


@dataclass(frozen=True)
class TrainConfig:
    epochs: int
    batch_size: int
    learning_rate: float
    adv: Optional[AttackConfig] = None
    momentum: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 0 or self.batch_size < 1:
            raise ValueError("epochs must be >= 0 and batch_size >= 1")
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")
        if not 0 <= self.momentum < 1:
            raise ValueError("momentum must lie in [0, 1)")


@dataclass
class TrainLog:
    epoch: List[int] = field(default_factory=list)
    loss: List[float] = field(default_factory=list)
    clean_acc: List[float] = field(default_factory=list)

    def to_csv(self) -> str:
        lines = ["epoch,loss,clean_acc"]
        lines += [f"{e},{l!r},{a!r}" for e, l, a in zip(self.epoch, self.loss, self.clean_acc)]
        return "\n".join(lines) + "\n"


def init_model(arch: ArchSpec, seed: int) -> Classifier:
    """Uniform ``[-1/sqrt(fan_in), 1/sqrt(fan_in)]`` initialization."""
    rng = np.random.default_rng(seed)

    def u(shape, fan_in):
        lim = 1.0 / np.sqrt(fan_in)
        return rng.uniform(-lim, lim, size=shape)

    if arch.kind == "linear":
        return LinearClassifier(u((arch.num_classes, arch.dim), arch.dim), u(arch.num_classes, arch.dim))
    return TwoLayerReluNet(
        u((arch.hidden, arch.dim), arch.dim),
        u(arch.hidden, arch.dim),
        u((arch.num_classes, arch.hidden), arch.hidden),
    )


def accuracy(model: Classifier, X, y) -> float:
    if len(y) == 0:
        return 0.0
    return float(np.mean(np.argmax(model.forward(X), axis=-1) == y))


def train(arch: ArchSpec, dataset: Dataset, cfg: TrainConfig):
    """Train from the seeded initialization; returns ``(model, TrainLog)``.

    With ``cfg.adv`` each minibatch is replaced by PGD adversaries against the
    current model before the gradient step.
    """
    if len(dataset) == 0:
        raise ValueError("cannot train on an empty dataset")
    if dataset.dim != arch.dim or dataset.num_classes != arch.num_classes:
        raise ValueError("dataset shape does not match the architecture")
    model = init_model(arch, cfg.seed)
    log = TrainLog()
    rng = np.random.default_rng([cfg.seed, 1])
    velocity = {k: np.zeros_like(v) for k, v in model.params().items()}
    n = len(dataset)
    for epoch in range(1, cfg.epochs + 1):
        order = rng.permutation(n)
        losses = []
        for b, start in enumerate(range(0, n, cfg.batch_size)):
            idx = order[start:start + cfg.batch_size]
            xb, yb = dataset.X[idx], dataset.y[idx]
            if cfg.adv is not None:
                atk = replace(cfg.adv, seed=int(np.random.SeedSequence([cfg.adv.seed, epoch, b]).generate_state(1)[0]))
                xb = pgd(model, xb, yb, atk, sample_ids=idx).x_adv
            loss = float(np.mean(cross_entropy(model.forward(xb), yb)))
            if not np.isfinite(loss):
                raise TrainingDivergedError(f"loss became non-finite in epoch {epoch}")
            losses.append(loss)
            grads = param_gradients(model, xb, yb)
            params = {}
            for k, p in model.params().items():
                velocity[k] = cfg.momentum * velocity[k] + grads[k]
                params[k] = p - cfg.learning_rate * velocity[k]
                if not np.all(np.isfinite(params[k])):
                    raise TrainingDivergedError(f"parameters became non-finite in epoch {epoch}")
            model = model.with_params(params)
        log.epoch.append(epoch)
        log.loss.append(float(np.mean(losses)))
        log.clean_acc.append(accuracy(model, dataset.X, dataset.y))
    return model, log


@dataclass
class EvalReport:
    clean_acc: float
    robust_acc: Dict[str, float] = field(default_factory=dict)
    per_sample: List[dict] = field(default_factory=list)
    runtime_ms: Dict[str, float] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "clean_acc": self.clean_acc,
            "robust_acc": dict(self.robust_acc),
            "per_sample": [dict(r) for r in self.per_sample],
            "runtime_ms": dict(self.runtime_ms),
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "EvalReport":
        return cls(doc["clean_acc"], dict(doc["robust_acc"]), [dict(r) for r in doc["per_sample"]],
                   dict(doc.get("runtime_ms", {})))


def generate_adversaries(model: Classifier, X, y, attack: AttackConfig, adaptivity: str,
                         defense: Optional[DefenseConfig] = None, proxy: Optional[Classifier] = None,
                         sample_ids=None) -> np.ndarray:
    """Adversarial inputs for the given threat model.

    ``non_adaptive`` attacks the undefended model and transfers; ``adaptive``
    runs BPDA through the defense; ``worst_case`` keeps, per sample, whichever
    of the two fools the defended pipeline.
    """
    if adaptivity not in ADAPTIVITY:
        raise ValueError(f"adaptivity must be one of {ADAPTIVITY}")
    if defense is None or adaptivity == "non_adaptive":
        return pgd(model, X, y, attack, sample_ids=sample_ids).x_adv
    adaptive = bpda_attack(model, defense, X, y, attack, proxy=proxy, sample_ids=sample_ids)
    if adaptivity == "adaptive":
        return adaptive.x_adv
    transfer = pgd(model, X, y, attack, sample_ids=sample_ids)
    return worst_case([transfer, adaptive], Pipeline(model, defense, proxy), y).x_adv


def evaluate_accuracy(model: Classifier, dataset: Dataset, defense: Optional[DefenseConfig] = None,
                      attack: Optional[AttackConfig] = None, adaptivity: str = "non_adaptive",
                      proxy: Optional[Classifier] = None, label: str = "attack",
                      x_adv: Optional[np.ndarray] = None) -> EvalReport:
    """Clean and (optionally) robust accuracy of ``model`` behind ``defense``.

    A sample counts as robust only if it is classified correctly both clean
    and after the attack.  Precomputed adversaries may be passed as ``x_adv``;
    they are evaluated as-is.
    """
    pipe = Pipeline(model, defense, proxy)
    timings = {}
    t0 = time.perf_counter()
    clean_ok = pipe.predict(dataset.X) == dataset.y if len(dataset) else np.zeros(0, bool)
    timings["clean"] = 1e3 * (time.perf_counter() - t0)
    per_sample = [{"sample_id": i, "clean_correct": bool(c), "survived": {}} for i, c in enumerate(clean_ok)]
    report = EvalReport(float(np.mean(clean_ok)) if len(dataset) else 0.0, {}, per_sample, timings)
    if attack is None and x_adv is None:
        return report
    t0 = time.perf_counter()
    if x_adv is None:
        x_adv = generate_adversaries(model, dataset.X, dataset.y, attack, adaptivity, defense, proxy)
    survived = clean_ok & (pipe.predict(x_adv) == dataset.y)
    timings[label] = 1e3 * (time.perf_counter() - t0)
    for rec, s in zip(per_sample, survived):
        rec["survived"][label] = bool(s)
    report.robust_acc[label] = float(np.mean(survived))
    return report
