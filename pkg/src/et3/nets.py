"""Small dense classifiers with analytic input Jacobians and parameter gradients.

Every model maps a feature vector ``x`` of shape ``(d,)`` (or a batch of shape
``(n, d)``) to logits of shape ``(K,)`` (or ``(n, K)``).  Models are frozen
dataclasses holding read-only float64 arrays; "updating" a model means building
a new one with :meth:`with_params`.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Union

import numpy as np

FORMAT_VERSION = 1


class DimensionError(ValueError):
    """Input dimension does not match the classifier."""


class ZeroEmbeddingError(ArithmeticError):
    """The similarity classifier received an input whose embedding is zero."""


def _frozen(a, ndim: int) -> np.ndarray:
    arr = np.array(a, dtype=np.float64)
    if arr.ndim != ndim:
        raise ValueError(f"expected a {ndim}-d array, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError("parameters must be finite")
    arr.setflags(write=False)
    return arr


def _as_input(x, d: int) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim not in (1, 2) or x.shape[-1] != d:
        raise DimensionError(f"expected input with last axis {d}, got shape {x.shape}")
    return x


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - np.max(logits, axis=-1, keepdims=True)
    ez = np.exp(z)
    return ez / ez.sum(axis=-1, keepdims=True)


def _one_hot(y, k: int) -> np.ndarray:
    y = np.asarray(y)
    return np.eye(k)[y]


@dataclass(frozen=True)
class LinearClassifier:
    """Affine classifier ``f(x) = W x + a``."""

    weight: np.ndarray
    bias: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "weight", _frozen(self.weight, 2))
        object.__setattr__(self, "bias", _frozen(self.bias, 1))
        if self.bias.shape[0] != self.weight.shape[0]:
            raise ValueError("bias length must equal the number of weight rows")

    @property
    def dim(self) -> int:
        return self.weight.shape[1]

    @property
    def num_classes(self) -> int:
        return self.weight.shape[0]

    def forward(self, x) -> np.ndarray:
        x = _as_input(x, self.dim)
        return x @ self.weight.T + self.bias

    def input_jacobian(self, x) -> np.ndarray:
        x = _as_input(x, self.dim)
        return np.broadcast_to(self.weight, x.shape[:-1] + self.weight.shape).copy()

    def params(self) -> dict:
        return {"weight": self.weight, "bias": self.bias}

    def with_params(self, params: dict) -> "LinearClassifier":
        return LinearClassifier(params["weight"], params["bias"])

    def backward(self, x, dlogits) -> dict:
        """Parameter gradients given the loss gradient w.r.t. the logits (summed over a batch)."""
        x = _as_input(x, self.dim)
        dlogits = np.asarray(dlogits, dtype=np.float64)
        xb, gb = np.atleast_2d(x), np.atleast_2d(dlogits)
        return {"weight": gb.T @ xb, "bias": gb.sum(axis=0)}

    def to_dict(self) -> dict:
        return {
            "format_version": FORMAT_VERSION,
            "arch": "linear",
            "dims": {"d": self.dim, "K": self.num_classes},
            "weights": [self.weight.tolist()],
            "biases": [self.bias.tolist()],
        }


@dataclass(frozen=True)
class TwoLayerReluNet:
    """One hidden ReLU layer: ``f(x)_k = sum_j V[k, j] * relu(w_j . x + b_j)``.

    ``output_weights`` has shape ``(K, J)``; ``K = 1`` is the single-output
    binary form.  At a kink (pre-activation exactly zero) the unit is treated
    as inactive.
    """

    hidden_weights: np.ndarray
    hidden_biases: np.ndarray
    output_weights: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "hidden_weights", _frozen(self.hidden_weights, 2))
        object.__setattr__(self, "hidden_biases", _frozen(self.hidden_biases, 1))
        ow = np.asarray(self.output_weights, dtype=np.float64)
        if ow.ndim == 1:
            ow = ow[None, :]
        object.__setattr__(self, "output_weights", _frozen(ow, 2))
        J = self.hidden_weights.shape[0]
        if self.hidden_biases.shape[0] != J or self.output_weights.shape[1] != J:
            raise ValueError("hidden width mismatch between layers")

    @property
    def dim(self) -> int:
        return self.hidden_weights.shape[1]

    @property
    def num_classes(self) -> int:
        return self.output_weights.shape[0]

    @property
    def width(self) -> int:
        return self.hidden_weights.shape[0]

    def preactivations(self, x) -> np.ndarray:
        x = _as_input(x, self.dim)
        return x @ self.hidden_weights.T + self.hidden_biases

    def forward(self, x) -> np.ndarray:
        h = self.preactivations(x)
        return np.maximum(h, 0.0) @ self.output_weights.T

    def input_jacobian(self, x) -> np.ndarray:
        active = (self.preactivations(x) > 0).astype(np.float64)
        # (..., K, J) gated output weights times (J, d)
        gated = self.output_weights * active[..., None, :]
        return gated @ self.hidden_weights

    def params(self) -> dict:
        return {
            "hidden_weights": self.hidden_weights,
            "hidden_biases": self.hidden_biases,
            "output_weights": self.output_weights,
        }

    def with_params(self, params: dict) -> "TwoLayerReluNet":
        return TwoLayerReluNet(
            params["hidden_weights"], params["hidden_biases"], params["output_weights"]
        )

    def backward(self, x, dlogits) -> dict:
        x = _as_input(x, self.dim)
        xb = np.atleast_2d(x)
        gb = np.atleast_2d(np.asarray(dlogits, dtype=np.float64))
        h = xb @ self.hidden_weights.T + self.hidden_biases
        a = np.maximum(h, 0.0)
        dh = (gb @ self.output_weights) * (h > 0)
        return {
            "hidden_weights": dh.T @ xb,
            "hidden_biases": dh.sum(axis=0),
            "output_weights": gb.T @ a,
        }

    def to_dict(self) -> dict:
        return {
            "format_version": FORMAT_VERSION,
            "arch": "two_layer_relu",
            "dims": {"d": self.dim, "K": self.num_classes, "J": self.width},
            "weights": [self.hidden_weights.tolist(), self.output_weights.tolist()],
            "biases": [self.hidden_biases.tolist()],
        }


@dataclass(frozen=True)
class EmbeddingSimilarityClassifier:
    """Zero-shot style head: scaled cosine similarity against a fixed class bank.

    ``logit_k = temperature * <e / |e|, bank_k>`` with ``e = embed(x)``.
    """

    embed: Union[LinearClassifier, TwoLayerReluNet]
    class_bank: np.ndarray
    temperature: float = 1.0

    def __post_init__(self):
        bank = _frozen(self.class_bank, 2)
        if bank.shape[1] != self.embed.num_classes:
            raise ValueError("class bank width must equal the embedding dimension")
        if not np.allclose(np.linalg.norm(bank, axis=1), 1.0, rtol=0.0, atol=1e-9):
            raise ValueError("class bank vectors must have unit l2 norm")
        if not self.temperature > 0:
            raise ValueError("temperature must be positive")
        object.__setattr__(self, "class_bank", bank)
        object.__setattr__(self, "temperature", float(self.temperature))

    @property
    def dim(self) -> int:
        return self.embed.dim

    @property
    def num_classes(self) -> int:
        return self.class_bank.shape[0]

    def _embedding(self, x):
        e = self.embed.forward(x)
        norm = np.linalg.norm(e, axis=-1, keepdims=True)
        if np.any(norm == 0):
            raise ZeroEmbeddingError("embedding has zero norm; cosine logits undefined")
        return e, norm

    def forward(self, x) -> np.ndarray:
        e, norm = self._embedding(x)
        return self.temperature * (e / norm) @ self.class_bank.T

    def _normalize_jacobian(self, x):
        # d(e/|e|)/de = (I - u u^T) / |e|
        e, norm = self._embedding(x)
        u = e / norm
        eye = np.eye(e.shape[-1])
        return (eye - u[..., :, None] * u[..., None, :]) / norm[..., None]

    def input_jacobian(self, x) -> np.ndarray:
        dn = self._normalize_jacobian(x)
        je = self.embed.input_jacobian(x)
        return self.temperature * self.class_bank @ dn @ je

    def params(self) -> dict:
        return self.embed.params()

    def with_params(self, params: dict) -> "EmbeddingSimilarityClassifier":
        return EmbeddingSimilarityClassifier(
            self.embed.with_params(params), self.class_bank, self.temperature
        )

    def backward(self, x, dlogits) -> dict:
        gb = np.atleast_2d(np.asarray(dlogits, dtype=np.float64))
        dn = np.atleast_3d(self._normalize_jacobian(np.atleast_2d(x)))
        de = np.einsum("nk,km,nmp->np", gb, self.temperature * self.class_bank, dn)
        return self.embed.backward(np.atleast_2d(x), de)

    def to_dict(self) -> dict:
        return {
            "format_version": FORMAT_VERSION,
            "arch": "embedding_similarity",
            "dims": {"d": self.dim, "K": self.num_classes, "m": self.embed.num_classes},
            "embed": self.embed.to_dict(),
            "bank": self.class_bank.tolist(),
            "temperature": self.temperature,
        }


Classifier = Union[LinearClassifier, TwoLayerReluNet, EmbeddingSimilarityClassifier]


def cosine_head(directions, temperature: float = 1.0) -> EmbeddingSimilarityClassifier:
    """Similarity head on the raw input: identity embedding, bank = normalized ``directions``."""
    bank = np.asarray(directions, dtype=np.float64)
    bank = bank / np.linalg.norm(bank, axis=1, keepdims=True)
    d = bank.shape[1]
    return EmbeddingSimilarityClassifier(LinearClassifier(np.eye(d), np.zeros(d)), bank, temperature)


def forward(model: Classifier, x) -> np.ndarray:
    return model.forward(x)


def input_jacobian(model: Classifier, x) -> np.ndarray:
    """Exact Jacobian of the logits w.r.t. the input, shape ``(K, d)`` (or ``(n, K, d)``)."""
    return model.input_jacobian(x)


def fd_jacobian(model: Classifier, x, h: float = 1e-5) -> np.ndarray:
    """Central finite-difference Jacobian; the reference oracle for :func:`input_jacobian`."""
    if not h > 0:
        raise ValueError("h must be positive")
    x = _as_input(x, model.dim)
    if x.ndim != 1:
        raise DimensionError("fd_jacobian takes a single input vector")
    d = x.shape[0]
    cols = []
    for i in range(d):
        step = np.zeros(d)
        step[i] = h
        cols.append((model.forward(x + step) - model.forward(x - step)) / (2 * h))
    return np.stack(cols, axis=-1)


def logsumexp(logits) -> np.ndarray:
    logits = np.asarray(logits, dtype=np.float64)
    m = np.max(logits, axis=-1, keepdims=True)
    return (m + np.log(np.exp(logits - m).sum(axis=-1, keepdims=True)))[..., 0]


def cross_entropy(logits, y) -> np.ndarray:
    logits = np.asarray(logits, dtype=np.float64)
    picked = np.take_along_axis(logits, np.asarray(y)[..., None], axis=-1)[..., 0]
    return logsumexp(logits) - picked


def param_gradients(model: Classifier, x, y, loss_kind: str = "cross_entropy") -> dict:
    """Backprop gradients of the cross-entropy loss w.r.t. every parameter.

    For a batch the loss is averaged over samples.
    """
    if loss_kind != "cross_entropy":
        raise ValueError(f"unsupported loss {loss_kind!r}")
    x = _as_input(x, model.dim)
    y = np.atleast_1d(np.asarray(y))
    if np.any((y < 0) | (y >= model.num_classes)):
        raise ValueError("label out of range")
    xb = np.atleast_2d(x)
    if xb.shape[0] != y.shape[0]:
        raise DimensionError("inputs and labels have different lengths")
    dlogits = (softmax(model.forward(xb)) - _one_hot(y, model.num_classes)) / xb.shape[0]
    return model.backward(xb, dlogits)


def _model_from_dict(doc: dict) -> Classifier:
    version = doc.get("format_version")
    if version != FORMAT_VERSION:
        raise ValueError(f"unsupported model format_version {version!r}")
    arch = doc.get("arch")
    if arch == "linear":
        return LinearClassifier(doc["weights"][0], doc["biases"][0])
    if arch == "two_layer_relu":
        return TwoLayerReluNet(doc["weights"][0], doc["biases"][0], doc["weights"][1])
    if arch == "embedding_similarity":
        return EmbeddingSimilarityClassifier(
            _model_from_dict(doc["embed"]), doc["bank"], doc["temperature"]
        )
    raise ValueError(f"unknown architecture {arch!r}")


def model_from_dict(doc: dict) -> Classifier:
    return _model_from_dict(doc)


def dumps_model(model: Classifier) -> str:
    # json writes floats with repr(), the shortest string that round-trips exactly
    return json.dumps(model.to_dict(), allow_nan=False)


def loads_model(text: str) -> Classifier:
    return model_from_dict(json.loads(text))


def save_model(model: Classifier, path) -> None:
    Path(path).write_text(dumps_model(model) + "\n")


def load_model(path) -> Classifier:
    return loads_model(Path(path).read_text())
