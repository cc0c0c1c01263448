"""Energy of a classifier input: the negative log-sum-exp of its logits."""
from __future__ import annotations

import numpy as np

from .nets import Classifier, logsumexp, softmax


def _check_logits(logits) -> np.ndarray:
    logits = np.asarray(logits, dtype=np.float64)
    if logits.ndim == 0 or logits.shape[-1] == 0:
        raise ValueError("energy needs at least one logit")
    return logits


def energy(logits) -> np.ndarray:
    """``-logsumexp(logits)`` over the last axis, computed with a max shift."""
    return -logsumexp(_check_logits(logits))


def energy_grad_logits(logits) -> np.ndarray:
    """Gradient of :func:`energy` w.r.t. the logits, which is ``-softmax(logits)``."""
    return -softmax(_check_logits(logits))


def energy_grad_input(model: Classifier, x) -> np.ndarray:
    """Gradient of ``energy(model(x))`` w.r.t. ``x``.

    Evaluated as ``-sum_k e_k g_k`` where ``e = softmax(f(x))`` and ``g_k`` is
    row ``k`` of the input Jacobian, so both factors stay individually inspectable.
    """
    weights = softmax(model.forward(x))
    jac = model.input_jacobian(x)
    return -np.einsum("...k,...kd->...d", weights, jac)


def input_energy(model: Classifier, x) -> np.ndarray:
    return energy(model.forward(x))
