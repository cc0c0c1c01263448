"""Experiment orchestration: config parsing, dataset/model resolution, cached
adversaries, evaluation and report emission.

An experiment is described by one JSON document::

    {
      "name": "toy_et3",
      "seed": 0,
      "dataset": {"kind": "concepts", "n_samples": 2000, "n_train": 1000, ...},
      "model": {"train": {"arch": {"kind": "two_layer_relu", "hidden": 64}, ...}},
      "proxy": {"concept_bank": {"temperature": 10.0}},
      "defense": {"epsilon": 3.0, "alpha": 30.0, "steps": 1, "energy_head": "proxy"},
      "attacks": [{"label": "pgd", "adaptivity": "non_adaptive", "epsilon_a": 1.5, ...}],
      "outputs": "runs/toy_et3"
    }

Unknown keys anywhere are rejected with the dotted path of the offending key.
"""
from __future__ import annotations

import csv
import hashlib
import io
import json
import math
import os
import tempfile
import time
from dataclasses import asdict, dataclass, field, replace
from importlib import resources
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple

import numpy as np

from .attacks import AttackConfig
from .data import Dataset, concept_clusters, concept_means, gaussian_blobs, load_dataset, moons
from .defense import PRESETS, DefenseConfig, Pipeline
from .nets import Classifier, cosine_head, dumps_model, load_model
from .theory import (ClusterSpec, ScatterRow, TheoremReport, build_robust_cluster_net, check_theorem,
                     random_theorem_instance, sample_clusters, scatter_c_vs_margin, split_two_logit)
from .trainer import ADAPTIVITY, ArchSpec, EvalReport, TrainConfig, TrainLog, evaluate_accuracy, \
    generate_adversaries, train

REPORT_VERSION = 1


class ConfigError(ValueError):
    """A schema violation, reported with the dotted key path where it occurred."""

    def __init__(self, path: str, message: str):
        super().__init__(f"{path}: {message}" if path else message)
        self.path = path


class ReportMismatchError(ValueError):
    pass


# ---------------------------------------------------------------- schema helpers

def _key(path: str, k: str) -> str:
    return f"{path}.{k}" if path else k


def _obj(doc, path: str, required=(), optional=()) -> dict:
    if not isinstance(doc, dict):
        raise ConfigError(path, "expected an object")
    allowed = set(required) | set(optional)
    for k in doc:
        if k not in allowed:
            raise ConfigError(_key(path, k), "unknown key")
    for k in required:
        if k not in doc:
            raise ConfigError(_key(path, k), "missing required key")
    return doc


def _num(doc: dict, key: str, path: str, default=None, kind=float):
    if key not in doc:
        if default is None:
            raise ConfigError(_key(path, key), "missing required key")
        return default
    v = doc[key]
    if isinstance(v, bool) or not isinstance(v, (int, float)):
        raise ConfigError(_key(path, key), f"expected a number, got {v!r}")
    if kind is int:
        if int(v) != v:
            raise ConfigError(_key(path, key), f"expected an integer, got {v!r}")
        return int(v)
    return float(v)


def _str(doc: dict, key: str, path: str, default=None, choices=None) -> str:
    v = doc.get(key, default)
    if v is None:
        raise ConfigError(_key(path, key), "missing required key")
    if not isinstance(v, str):
        raise ConfigError(_key(path, key), f"expected a string, got {v!r}")
    if choices is not None and v not in choices:
        raise ConfigError(_key(path, key), f"must be one of {list(choices)}")
    return v


def _build(cls, path: str, **kw):
    try:
        return cls(**kw)
    except (ValueError, TypeError) as exc:
        raise ConfigError(path, str(exc)) from None


# ---------------------------------------------------------------- spec types

@dataclass(frozen=True)
class DatasetSpec:
    kind: str                       # clusters | concepts | gaussians | moons | path
    params: Tuple[Tuple[str, Any], ...]
    n_train: int = 0

    def get(self, key, default=None):
        return dict(self.params).get(key, default)


@dataclass(frozen=True)
class ModelSpec:
    kind: str                       # path | train | robust_cluster_net
    path: Optional[str] = None
    arch: Optional[Tuple[str, int]] = None
    train: Optional[TrainConfig] = None
    width: Optional[int] = None
    split: bool = True


@dataclass(frozen=True)
class ProxySpec:
    kind: str                       # concept_bank | path
    temperature: float = 1.0
    path: Optional[str] = None


@dataclass(frozen=True)
class AttackEntry:
    label: str
    adaptivity: str
    config: AttackConfig


@dataclass(frozen=True)
class TheoremSpec:
    mode: str                       # samples | random_linear
    epsilon: float = 0.0
    attack: Optional[str] = None
    instances: int = 0
    seed: int = 0
    dim_range: Tuple[int, int] = (2, 32)
    ratio_factor: float = 1.05


@dataclass(frozen=True)
class ExperimentSpec:
    name: str
    seed: int = 0
    dataset: Optional[DatasetSpec] = None
    model: Optional[ModelSpec] = None
    proxy: Optional[ProxySpec] = None
    defense: Optional[DefenseConfig] = None
    attacks: Tuple[AttackEntry, ...] = ()
    scatter_attack: Optional[str] = None
    theorem: Optional[TheoremSpec] = None
    outputs: Optional[str] = None
    cache: Optional[str] = None

    @property
    def output_dir(self) -> Path:
        if self.outputs is None:
            raise ConfigError("outputs", "missing required key")
        return Path(self.outputs)

    @property
    def cache_dir(self) -> Path:
        return Path(self.cache) if self.cache is not None else self.output_dir.parent / "adv_cache"


_DATASET_KEYS = {
    "clusters": ({"dim", "k", "sigma", "samples_per_cluster"}, {"labels", "means", "seed", "n_train"}),
    "concepts": ({"n_samples", "num_concepts", "num_classes", "dim"}, {"radius", "sigma", "seed", "n_train"}),
    "gaussians": ({"n_per_class", "num_classes", "dim"}, {"separation", "sigma", "seed", "n_train"}),
    "moons": ({"n_samples"}, {"dim", "noise", "seed", "n_train"}),
    "path": ({"path"}, {"n_train"}),
}


def _parse_dataset(doc, path: str, seed: int) -> DatasetSpec:
    if not isinstance(doc, dict):
        raise ConfigError(path, "expected an object")
    kind = _str(doc, "kind", path, choices=tuple(_DATASET_KEYS))
    req, opt = _DATASET_KEYS[kind]
    _obj(doc, path, required=req | {"kind"}, optional=opt)
    params = {}
    for k, v in doc.items():
        if k in ("kind", "n_train"):
            continue
        if k in ("labels", "means", "path"):
            params[k] = json.dumps(v) if k != "path" else _str(doc, k, path)
        elif k in ("dim", "k", "samples_per_cluster", "n_samples", "num_concepts", "num_classes",
                   "n_per_class", "seed"):
            params[k] = _num(doc, k, path, kind=int)
        else:
            params[k] = _num(doc, k, path)
    if kind != "path":
        params.setdefault("seed", seed)
    n_train = _num(doc, "n_train", path, default=0, kind=int)
    if n_train < 0:
        raise ConfigError(f"{path}.n_train", "must be non-negative")
    return DatasetSpec(kind, tuple(sorted(params.items())), n_train)


_ATTACK_FIELDS = ("epsilon_a", "step_size", "steps", "norm", "restarts", "loss", "seed")


def _parse_attack_config(doc, path: str, extra=()) -> AttackConfig:
    _obj(doc, path, required=("epsilon_a", "step_size"), optional=set(_ATTACK_FIELDS) | set(extra))
    kw = {}
    for k in _ATTACK_FIELDS:
        if k not in doc:
            continue
        if k in ("norm", "loss"):
            kw[k] = _str(doc, k, path)
        elif k in ("steps", "restarts", "seed"):
            kw[k] = _num(doc, k, path, kind=int)
        else:
            kw[k] = _num(doc, k, path)
    return _build(AttackConfig, path, **kw)


def _parse_model(doc, path: str) -> ModelSpec:
    _obj(doc, path, optional=("path", "train", "robust_cluster_net"))
    if len(doc) != 1:
        raise ConfigError(path, "expected exactly one of path, train, robust_cluster_net")
    if "path" in doc:
        return ModelSpec("path", path=_str(doc, "path", path))
    if "robust_cluster_net" in doc:
        sub = _obj(doc["robust_cluster_net"], f"{path}.robust_cluster_net", optional=("width", "split"))
        width = _num(sub, "width", f"{path}.robust_cluster_net", kind=int) if "width" in sub else None
        split = sub.get("split", True)
        if not isinstance(split, bool):
            raise ConfigError(f"{path}.robust_cluster_net.split", "expected a boolean")
        return ModelSpec("robust_cluster_net", width=width, split=split)
    tp = f"{path}.train"
    sub = _obj(doc["train"], tp, required=("arch", "epochs", "batch_size", "learning_rate"),
               optional=("adv", "momentum", "seed"))
    arch = _obj(sub["arch"], f"{tp}.arch", required=("kind",), optional=("hidden",))
    kind = _str(arch, "kind", f"{tp}.arch", choices=("linear", "two_layer_relu"))
    hidden = _num(arch, "hidden", f"{tp}.arch", default=0, kind=int)
    adv = None if sub.get("adv") is None else _parse_attack_config(sub["adv"], f"{tp}.adv")
    cfg = _build(TrainConfig, tp, epochs=_num(sub, "epochs", tp, kind=int),
                 batch_size=_num(sub, "batch_size", tp, kind=int),
                 learning_rate=_num(sub, "learning_rate", tp), adv=adv,
                 momentum=_num(sub, "momentum", tp, default=0.0),
                 seed=_num(sub, "seed", tp, default=0, kind=int))
    return ModelSpec("train", arch=(kind, hidden), train=cfg)


def _parse_proxy(doc, path: str) -> ProxySpec:
    _obj(doc, path, optional=("concept_bank", "path"))
    if len(doc) != 1:
        raise ConfigError(path, "expected exactly one of concept_bank, path")
    if "path" in doc:
        return ProxySpec("path", path=_str(doc, "path", path))
    sub = _obj(doc["concept_bank"], f"{path}.concept_bank", optional=("temperature",))
    return ProxySpec("concept_bank", temperature=_num(sub, "temperature", f"{path}.concept_bank", default=1.0))


def _parse_defense(doc, path: str) -> DefenseConfig:
    _obj(doc, path, optional=("preset", "epsilon", "alpha", "steps", "norm", "clamp", "energy_head"))
    kw = {}
    for k in ("epsilon", "alpha"):
        if k in doc:
            kw[k] = _num(doc, k, path)
    if "steps" in doc:
        kw["steps"] = _num(doc, "steps", path, kind=int)
    for k in ("norm", "energy_head"):
        if k in doc:
            kw[k] = _str(doc, k, path)
    if doc.get("clamp") is not None:
        c = doc["clamp"]
        if not (isinstance(c, list) and len(c) == 2):
            raise ConfigError(f"{path}.clamp", "expected [lo, hi]")
        kw["clamp"] = (float(c[0]), float(c[1]))
    if "preset" in doc:
        name = _str(doc, "preset", path, choices=tuple(PRESETS))
        try:
            return DefenseConfig.preset(name, **kw)
        except ValueError as exc:
            raise ConfigError(path, str(exc)) from None
    for k in ("epsilon", "alpha"):
        if k not in kw:
            raise ConfigError(f"{path}.{k}", "missing required key")
    return _build(DefenseConfig, path, **kw)


def _parse_theorem(doc, path: str) -> TheoremSpec:
    mode = _str(_obj(doc, path, optional=("mode", "epsilon", "attack", "instances", "seed", "dim_range",
                                          "ratio_factor")), "mode", path, choices=("samples", "random_linear"))
    if mode == "samples":
        _obj(doc, path, required=("mode", "epsilon"), optional=("attack",))
        eps = _num(doc, "epsilon", path)
        if not eps > 0:
            raise ConfigError(f"{path}.epsilon", "must be positive")
        attack = _str(doc, "attack", path) if "attack" in doc else None
        return TheoremSpec("samples", epsilon=eps, attack=attack)
    _obj(doc, path, required=("mode", "instances"), optional=("seed", "dim_range", "ratio_factor"))
    dr = doc.get("dim_range", [2, 32])
    if not (isinstance(dr, list) and len(dr) == 2 and all(isinstance(v, int) for v in dr) and 1 <= dr[0] <= dr[1]):
        raise ConfigError(f"{path}.dim_range", "expected [lo, hi] positive integers with lo <= hi")
    n = _num(doc, "instances", path, kind=int)
    if n < 1:
        raise ConfigError(f"{path}.instances", "must be positive")
    return TheoremSpec("random_linear", instances=n, seed=_num(doc, "seed", path, default=0, kind=int),
                       dim_range=(dr[0], dr[1]), ratio_factor=_num(doc, "ratio_factor", path, default=1.05))


def parse_spec(doc: dict) -> ExperimentSpec:
    """Validate a config document and build an :class:`ExperimentSpec`."""
    _obj(doc, "", optional=("name", "seed", "dataset", "model", "proxy", "defense", "attacks", "scatter",
                            "theorem", "outputs", "cache"))
    seed = _num(doc, "seed", "", default=0, kind=int) if "seed" in doc else 0
    name = _str(doc, "name", "", default="experiment")
    dataset = _parse_dataset(doc["dataset"], "dataset", seed) if "dataset" in doc else None
    model = _parse_model(doc["model"], "model") if "model" in doc else None
    proxy = _parse_proxy(doc["proxy"], "proxy") if doc.get("proxy") is not None else None
    defense = _parse_defense(doc["defense"], "defense") if doc.get("defense") is not None else None
    if defense is not None and defense.energy_head == "proxy" and proxy is None:
        raise ConfigError("defense.energy_head", "proxy energy head needs a proxy section")
    attacks = []
    raw = doc.get("attacks", [])
    if not isinstance(raw, list):
        raise ConfigError("attacks", "expected a list")
    for i, a in enumerate(raw):
        p = f"attacks[{i}]"
        _obj(a, p, required=("label",), optional=set(_ATTACK_FIELDS) | {"adaptivity"})
        label = _str(a, "label", p)
        adaptivity = _str(a, "adaptivity", p, default="non_adaptive", choices=ADAPTIVITY)
        cfg = _parse_attack_config({k: v for k, v in a.items() if k not in ("label", "adaptivity")}, p)
        attacks.append(AttackEntry(label, adaptivity, cfg))
    labels = [a.label for a in attacks]
    if len(set(labels)) != len(labels):
        raise ConfigError("attacks", "attack labels must be unique")
    scatter_attack = None
    if doc.get("scatter") is not None:
        sc = _obj(doc["scatter"], "scatter", required=("attack",))
        scatter_attack = _str(sc, "attack", "scatter")
        if scatter_attack not in labels:
            raise ConfigError("scatter.attack", f"no attack labelled {scatter_attack!r}")
    theorem = _parse_theorem(doc["theorem"], "theorem") if doc.get("theorem") is not None else None
    if theorem is not None and theorem.attack is not None and theorem.attack not in labels:
        raise ConfigError("theorem.attack", f"no attack labelled {theorem.attack!r}")
    outputs = _str(doc, "outputs", "") if "outputs" in doc else None
    cache = _str(doc, "cache", "") if "cache" in doc else None
    return ExperimentSpec(name, seed, dataset, model, proxy, defense, tuple(attacks), scatter_attack,
                          theorem, outputs, cache)


def load_spec(path) -> ExperimentSpec:
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError("", f"{path} is not valid JSON: {exc}") from None
    except OSError as exc:
        raise ConfigError("", f"cannot read {path}: {exc.strerror}") from None
    return parse_spec(doc)


def bundled_config(name: str) -> dict:
    """One of the JSON configs shipped in ``et3/configs`` (name without extension)."""
    text = resources.files("et3").joinpath("configs", f"{name}.json").read_text()
    return json.loads(text)


def bundled_config_names() -> List[str]:
    return sorted(p.name[:-5] for p in resources.files("et3").joinpath("configs").iterdir()
                  if p.name.endswith(".json"))


# ---------------------------------------------------------------- resolution

def _cluster_spec(ds: DatasetSpec) -> ClusterSpec:
    dim, k = ds.get("dim"), ds.get("k")
    labels = json.loads(ds.get("labels")) if ds.get("labels") else [1 if j % 2 == 0 else -1 for j in range(k)]
    if ds.get("means"):
        means = np.asarray(json.loads(ds.get("means")), dtype=np.float64)
        return _build(ClusterSpec, "dataset", dim=dim, means=means, labels=labels, sigma=ds.get("sigma"),
                      samples_per_cluster=ds.get("samples_per_cluster"), seed=ds.get("seed"))
    if k > dim:
        raise ConfigError("dataset.k", "orthogonal means need k <= dim")
    try:
        return ClusterSpec.orthogonal(dim, labels, ds.get("sigma"), ds.get("samples_per_cluster"), ds.get("seed"))
    except ValueError as exc:
        raise ConfigError("dataset", str(exc)) from None


def make_dataset(ds: DatasetSpec) -> Dataset:
    """Materialize the full dataset (train split first, evaluation split after)."""
    try:
        if ds.kind == "clusters":
            return sample_clusters(_cluster_spec(ds))
        if ds.kind == "concepts":
            return concept_clusters(ds.get("n_samples"), ds.get("num_concepts"), ds.get("num_classes"),
                                    ds.get("dim"), ds.get("radius", 4.0), ds.get("sigma", 0.5), ds.get("seed"))
        if ds.kind == "gaussians":
            return gaussian_blobs(ds.get("n_per_class"), ds.get("num_classes"), ds.get("dim"),
                                  ds.get("separation", 3.0), ds.get("sigma", 1.0), ds.get("seed"))
        if ds.kind == "moons":
            return moons(ds.get("n_samples"), ds.get("dim", 2), ds.get("noise", 0.1), ds.get("seed"))
        return load_dataset(ds.get("path"))
    except (OSError, KeyError) as exc:
        raise ConfigError("dataset", f"cannot load dataset: {exc}") from None
    except ValueError as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError("dataset", str(exc)) from None


def split_dataset(full: Dataset, n_train: int) -> Tuple[Dataset, Dataset]:
    if n_train > len(full):
        raise ConfigError("dataset.n_train", "exceeds the number of samples")
    idx = np.arange(len(full))
    return full.subset(idx[:n_train]), full.subset(idx[n_train:])


def resolve_model(spec: ExperimentSpec, train_set: Optional[Dataset] = None) -> Tuple[Classifier, Optional[TrainLog]]:
    ms = spec.model
    if ms is None:
        raise ConfigError("model", "missing required key")
    if ms.kind == "path":
        try:
            return load_model(ms.path), None
        except OSError as exc:
            raise ConfigError("model.path", f"cannot load model {ms.path!r}: {exc.strerror}") from None
        except (ValueError, KeyError) as exc:
            raise ConfigError("model.path", f"invalid model file {ms.path!r}: {exc}") from None
    if spec.dataset is None:
        raise ConfigError("dataset", "missing required key")
    if ms.kind == "robust_cluster_net":
        if spec.dataset.kind != "clusters":
            raise ConfigError("model.robust_cluster_net", "needs a clusters dataset")
        net = build_robust_cluster_net(_cluster_spec(spec.dataset), ms.width)
        return (split_two_logit(net) if ms.split else net), None
    if train_set is None or len(train_set) == 0:
        raise ConfigError("dataset.n_train", "training needs n_train > 0")
    kind, hidden = ms.arch
    arch = _build(ArchSpec, "model.train.arch", kind=kind, dim=train_set.dim,
                  num_classes=train_set.num_classes, hidden=hidden)
    return train(arch, train_set, ms.train)


def resolve_proxy(spec: ExperimentSpec) -> Optional[Classifier]:
    ps = spec.proxy
    if ps is None:
        return None
    if ps.kind == "path":
        try:
            return load_model(ps.path)
        except OSError as exc:
            raise ConfigError("proxy.path", f"cannot load model {ps.path!r}: {exc.strerror}") from None
    ds = spec.dataset
    if ds is None or ds.kind not in ("concepts", "clusters"):
        raise ConfigError("proxy.concept_bank", "needs a concepts or clusters dataset")
    if ds.kind == "concepts":
        means = concept_means(ds.get("num_concepts"), ds.get("dim"), ds.get("radius", 4.0), ds.get("seed"))
    else:
        means = _cluster_spec(ds).means
    return cosine_head(means, ps.temperature)


# ---------------------------------------------------------------- adversary cache

def _hash_update_array(h, a: np.ndarray) -> None:
    a = np.ascontiguousarray(a)
    h.update(str(a.dtype).encode() + str(a.shape).encode())
    h.update(a.tobytes())


def adversary_key(model: Classifier, dataset: Dataset, entry: AttackEntry,
                  defense: Optional[DefenseConfig] = None, proxy: Optional[Classifier] = None) -> str:
    """Content hash of everything the adversaries depend on.

    Non-adaptive adversaries ignore the defense, so base and defended runs of
    the same model share them.
    """
    h = hashlib.sha256()
    h.update(dumps_model(model).encode())
    _hash_update_array(h, dataset.X)
    _hash_update_array(h, dataset.y)
    # without a defense every threat model reduces to plain PGD on the model
    adaptive = entry.adaptivity != "non_adaptive" and defense is not None
    kind = entry.adaptivity if adaptive else "non_adaptive"
    h.update(json.dumps({"adaptivity": kind, **asdict(entry.config)}, sort_keys=True).encode())
    if adaptive:
        h.update(json.dumps(asdict(defense), sort_keys=True).encode())
        if proxy is not None:
            h.update(dumps_model(proxy).encode())
    return h.hexdigest()


def _atomic_write_bytes(path: Path, payload: bytes) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def cached_adversaries(cache_dir: Optional[Path], model: Classifier, dataset: Dataset, entry: AttackEntry,
                       defense: Optional[DefenseConfig] = None,
                       proxy: Optional[Classifier] = None) -> np.ndarray:
    """Generate (or load) the adversaries for one attack entry."""
    path = None
    if cache_dir is not None:
        path = Path(cache_dir) / f"{adversary_key(model, dataset, entry, defense, proxy)}.npy"
        if path.exists():
            x = np.load(path, allow_pickle=False)
            if x.shape == dataset.X.shape:
                return x
    x_adv = generate_adversaries(model, dataset.X, dataset.y, entry.config, entry.adaptivity,
                                 defense, proxy)
    if path is not None:
        buf = io.BytesIO()
        np.save(buf, x_adv, allow_pickle=False)
        _atomic_write_bytes(path, buf.getvalue())
    return x_adv


# ---------------------------------------------------------------- reports

@dataclass
class ExperimentReport:
    name: str
    seed: int
    n_samples: int
    eval: EvalReport
    defense: Optional[dict] = None
    attacks: Dict[str, dict] = field(default_factory=dict)

    @property
    def clean_acc(self) -> float:
        return self.eval.clean_acc

    @property
    def robust_acc(self) -> Dict[str, float]:
        return self.eval.robust_acc

    def to_dict(self) -> dict:
        return {"report_version": REPORT_VERSION, "name": self.name, "seed": self.seed,
                "n_samples": self.n_samples, "defense": self.defense, "attacks": self.attacks,
                **self.eval.to_dict()}

    @classmethod
    def from_dict(cls, doc: dict) -> "ExperimentReport":
        if doc.get("report_version") != REPORT_VERSION:
            raise ReportMismatchError(f"unsupported report version {doc.get('report_version')!r}")
        return cls(doc["name"], doc["seed"], doc["n_samples"], EvalReport.from_dict(doc),
                   doc.get("defense"), dict(doc.get("attacks", {})))


def emit_report(report: ExperimentReport) -> str:
    return json.dumps(report.to_dict(), indent=2, sort_keys=True, allow_nan=False) + "\n"


def parse_report(text: str) -> ExperimentReport:
    return ExperimentReport.from_dict(json.loads(text))


def load_report(path) -> ExperimentReport:
    try:
        return parse_report(Path(path).read_text())
    except OSError as exc:
        raise ConfigError("", f"cannot read report {path}: {exc.strerror}") from None
    except (json.JSONDecodeError, KeyError) as exc:
        raise ReportMismatchError(f"{path} is not a report: {exc}") from None


def per_sample_csv(report: ExperimentReport) -> str:
    labels = list(report.robust_acc)
    has_margin = any("post_defense_margin" in r for r in report.eval.per_sample)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["sample_id", "clean_correct"] + [f"survived_{l}" for l in labels]
               + (["post_defense_margin"] if has_margin else []))
    for r in report.eval.per_sample:
        row = [r["sample_id"], int(r["clean_correct"])] + [int(r["survived"][l]) for l in labels]
        if has_margin:
            row.append(repr(r["post_defense_margin"]))
        w.writerow(row)
    return buf.getvalue()


def scatter_csv(rows: List[ScatterRow]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["C", "post_margin", "was_adversarial"])
    for r in rows:
        w.writerow(["inf" if math.isinf(r.C) else repr(r.C), repr(r.post_margin), int(r.was_adversarial)])
    return buf.getvalue()


def _write_text(path: Path, text: str) -> None:
    _atomic_write_bytes(path, text.encode())


def _margins(logits: np.ndarray, y: np.ndarray) -> np.ndarray:
    rows = np.arange(len(y))
    others = logits.copy()
    others[rows, y] = -np.inf
    return logits[rows, y] - others.max(axis=1)


# ---------------------------------------------------------------- running

@dataclass
class ExperimentResult:
    report: ExperimentReport
    scatter: Optional[List[ScatterRow]] = None
    train_log: Optional[TrainLog] = None
    model: Optional[Classifier] = None
    adversaries: Dict[str, np.ndarray] = field(default_factory=dict)


def run_experiment(spec: ExperimentSpec, write: bool = True) -> ExperimentResult:
    """Train or load, generate adversaries, evaluate, and emit the report files.

    Writes ``report.json`` and ``per_sample.csv`` (plus ``scatter.csv`` when
    a scatter attack is configured) into ``spec.outputs``.
    """
    if spec.dataset is None:
        raise ConfigError("dataset", "missing required key")
    timings = {}
    t0 = time.perf_counter()
    full = make_dataset(spec.dataset)
    train_set, test_set = split_dataset(full, spec.dataset.n_train)
    model, log = resolve_model(spec, train_set)
    proxy = resolve_proxy(spec)
    if model.dim != test_set.dim:
        raise ConfigError("model", f"model expects dim {model.dim}, dataset has {test_set.dim}")
    timings["setup"] = 1e3 * (time.perf_counter() - t0)
    cache_dir = spec.cache_dir if write else None

    report = evaluate_accuracy(model, test_set, spec.defense, proxy=proxy)
    advs = {}
    for entry in spec.attacks:
        t0 = time.perf_counter()
        x_adv = cached_adversaries(cache_dir, model, test_set, entry, spec.defense, proxy)
        advs[entry.label] = x_adv
        part = evaluate_accuracy(model, test_set, spec.defense, proxy=proxy, label=entry.label, x_adv=x_adv)
        report.robust_acc[entry.label] = part.robust_acc[entry.label]
        for rec, other in zip(report.per_sample, part.per_sample):
            rec["survived"][entry.label] = other["survived"][entry.label]
        timings[entry.label] = 1e3 * (time.perf_counter() - t0)
    if spec.defense is not None and len(test_set):
        pipe = Pipeline(model, spec.defense, proxy)
        for rec, m in zip(report.per_sample, _margins(pipe.logits(test_set.X), test_set.y)):
            rec["post_defense_margin"] = float(m)
    timings["clean"] = report.runtime_ms["clean"]
    report.runtime_ms = timings

    scatter = None
    if spec.scatter_attack is not None:
        if spec.defense is None:
            raise ConfigError("scatter", "the scatter needs a defense section")
        scatter = scatter_c_vs_margin(model, test_set, None, replace(spec.defense, energy_head="eval"),
                                      x_adv=advs[spec.scatter_attack])

    out = ExperimentReport(spec.name, spec.seed, len(test_set), report,
                           None if spec.defense is None else _defense_dict(spec.defense),
                           {e.label: {"adaptivity": e.adaptivity, **asdict(e.config)} for e in spec.attacks})
    if write:
        d = spec.output_dir
        _write_text(d / "report.json", emit_report(out))
        _write_text(d / "per_sample.csv", per_sample_csv(out))
        if scatter is not None:
            _write_text(d / "scatter.csv", scatter_csv(scatter))
    return ExperimentResult(out, scatter, log, model, advs)


def _defense_dict(cfg: DefenseConfig) -> dict:
    d = asdict(cfg)
    d["clamp"] = None if cfg.clamp is None else list(cfg.clamp)
    return d


# ---------------------------------------------------------------- theorem audit

@dataclass
class TheoremRun:
    reports: List[TheoremReport]
    scatter: List[ScatterRow]

    @property
    def violations(self) -> int:
        return sum(r.violation for r in self.reports)

    @property
    def certified(self) -> int:
        return sum(r.certified for r in self.reports)


def run_theorem_audit(spec: ExperimentSpec, write: bool = True) -> TheoremRun:
    """Per-sample (or random-instance) theorem checks; writes ``theorem_reports.jsonl`` and ``scatter.csv``.

    In random-linear mode a scatter row is marked adversarial when the
    instance starts misclassified.
    """
    th = spec.theorem
    if th is None:
        raise ConfigError("theorem", "missing required key")
    reports, rows = [], []
    if th.mode == "random_linear":
        for i in range(th.instances):
            rng = np.random.default_rng([th.seed, i])
            dim = int(rng.integers(th.dim_range[0], th.dim_range[1] + 1))
            model, x, y, eps = random_theorem_instance(rng, dim, th.ratio_factor)
            rep = check_theorem(model, x, y, eps, strict=False)
            reports.append(rep)
            rows.append(ScatterRow(rep.C, rep.post_margin, rep.r_x < 0, rep.r_x, rep.C_required))
    else:
        if spec.dataset is None:
            raise ConfigError("dataset", "missing required key")
        full = make_dataset(spec.dataset)
        train_set, test_set = split_dataset(full, spec.dataset.n_train)
        model, _ = resolve_model(spec, train_set)
        if model.num_classes != 2:
            raise ConfigError("model", "theorem checks need a two-logit model")
        points = [(test_set.X, False)]
        if th.attack is not None:
            entry = next(e for e in spec.attacks if e.label == th.attack)
            cache_dir = spec.cache_dir if write else None
            points.append((cached_adversaries(cache_dir, model, test_set, entry, spec.defense,
                                              resolve_proxy(spec)), True))
        for i in range(len(test_set)):
            for X, is_adv in points:
                rep = check_theorem(model, X[i], int(test_set.y[i]), th.epsilon, strict=False)
                reports.append(rep)
                rows.append(ScatterRow(rep.C, rep.post_margin, is_adv, rep.r_x, rep.C_required))
    run = TheoremRun(reports, rows)
    if write:
        d = spec.output_dir
        lines = [json.dumps(r.to_dict(), sort_keys=True, allow_nan=False) for r in reports]
        _write_text(d / "theorem_reports.jsonl", "".join(l + "\n" for l in lines))
        _write_text(d / "scatter.csv", scatter_csv(rows))
    return run


# ---------------------------------------------------------------- comparison

def compare(report_a: ExperimentReport, report_b: ExperimentReport) -> List[Tuple[str, float, float, float]]:
    """Rows ``(metric, a, b, b - a)`` for clean and every robust accuracy, then their average."""
    if report_a.n_samples != report_b.n_samples:
        raise ReportMismatchError("reports cover different numbers of samples")
    if set(report_a.robust_acc) != set(report_b.robust_acc):
        raise ReportMismatchError("reports have different attack labels")
    rows = [("clean_acc", report_a.clean_acc, report_b.clean_acc)]
    rows += [(f"robust_acc[{l}]", report_a.robust_acc[l], report_b.robust_acc[l]) for l in sorted(report_a.robust_acc)]
    out = [(m, a, b, b - a) for m, a, b in rows]
    avg = [float(np.mean([r[i] for r in out])) for i in (1, 2, 3)]
    out.append(("average", *avg))
    return out


def compare_csv(rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["metric", "a", "b", "delta"])
    for m, a, b, d in rows:
        w.writerow([m, repr(float(a)), repr(float(b)), repr(float(d))])
    return buf.getvalue()
