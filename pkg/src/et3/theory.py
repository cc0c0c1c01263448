"""Certified single-step energy purification for two-logit classifiers.

Builds the robust two-layer ReLU network on clustered data, splits its single
output into two non-negative logits, and checks per sample whether the
sufficient conditions for a one-step energy transformation to land on the
correct class hold, and whether it actually does.

Binary labels are stored as class indices: ``-1 -> 0`` and ``+1 -> 1``.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import List, NamedTuple, Optional, Sequence

import numpy as np
from scipy.stats import spearmanr

from .attacks import AttackConfig, pgd
from .data import Dataset
from .defense import DefenseConfig, et3
from .energy import energy_grad_input
from .nets import Classifier, DimensionError, LinearClassifier, TwoLayerReluNet, softmax


class TheoremViolation(AssertionError):
    """All hypotheses were verified yet the transformed point is misclassified."""

    def __init__(self, report: "TheoremReport"):
        super().__init__(
            f"hypotheses hold but post-defense margin is {report.post_margin!r} "
            f"(r_x={report.r_x!r}, C={report.C!r}, C_required={report.C_required!r})"
        )
        self.report = report


def label_to_index(label: int) -> int:
    if label not in (-1, 1):
        raise ValueError("binary labels must be -1 or +1")
    return (label + 1) // 2


def index_to_label(index: int) -> int:
    return 2 * int(index) - 1


@dataclass
class ClusterSpec:
    dim: int
    means: np.ndarray
    labels: Sequence[int]
    sigma: float
    samples_per_cluster: int
    seed: int = 0

    def __post_init__(self):
        self.means = np.asarray(self.means, dtype=np.float64).reshape(-1, self.dim)
        self.labels = [int(v) for v in self.labels]
        if len(self.labels) != self.means.shape[0]:
            raise ValueError("one label per cluster mean")
        for v in self.labels:
            label_to_index(v)
        if self.sigma < 0 or self.samples_per_cluster < 1:
            raise ValueError("sigma must be >= 0 and samples_per_cluster >= 1")
        k = self.means.shape[0]
        for i in range(k):
            for j in range(i + 1, k):
                if np.array_equal(self.means[i], self.means[j]):
                    raise ValueError("cluster means must be pairwise distinct")

    @property
    def mean_sq_norms(self) -> np.ndarray:
        return np.sum(self.means ** 2, axis=1)

    @classmethod
    def orthogonal(cls, dim: int, labels: Sequence[int], sigma: float,
                   samples_per_cluster: int, seed: int = 0) -> "ClusterSpec":
        """Means ``sqrt(d) * e_j``, so each has squared norm ``d``."""
        k = len(labels)
        if k > dim:
            raise ValueError("at most d orthogonal clusters")
        means = np.sqrt(dim) * np.eye(dim)[:k]
        return cls(dim, means, labels, sigma, samples_per_cluster, seed)


def sample_clusters(spec: ClusterSpec) -> Dataset:
    k = spec.means.shape[0]
    if k == 0:
        raise ValueError("need at least one cluster")
    rng = np.random.default_rng(spec.seed)
    n = spec.samples_per_cluster
    cluster = np.repeat(np.arange(k), n)
    noise = spec.sigma * rng.standard_normal((k * n, spec.dim))
    X = spec.means[cluster] + noise
    y = np.array([label_to_index(spec.labels[q]) for q in cluster], dtype=np.int64)
    return Dataset(X, y, 2, spec.seed, cluster)


def build_robust_cluster_net(spec: ClusterSpec, width: Optional[int] = None) -> TwoLayerReluNet:
    """Unit ``j`` has ``w_j = 4 mu_j / d``, ``b_j = -2``, ``v_j = y_j``; padding units are zero."""
    k, d = spec.means.shape
    width = k if width is None else width
    if width < k:
        raise ValueError("width must be at least the number of clusters")
    W = np.zeros((width, d))
    b = np.zeros(width)
    v = np.zeros(width)
    W[:k] = 4.0 * spec.means / d
    b[:k] = -2.0
    v[:k] = spec.labels
    return TwoLayerReluNet(W, b, v[None, :])


@dataclass(frozen=True)
class TwoLogitSplitNet(TwoLayerReluNet):
    """Two non-negative logits whose difference reproduces a single-output net.

    Logit 1 sums the units with ``v_j >= 0``; logit 0 is minus the sum over
    units with ``v_j < 0``.
    """

    base: Optional[TwoLayerReluNet] = None
    positive_head: tuple = ()
    negative_head: tuple = ()


def split_two_logit(net: TwoLayerReluNet) -> TwoLogitSplitNet:
    if net.num_classes != 1:
        raise ValueError("split_two_logit expects a single-output network")
    v = net.output_weights[0]
    pos = tuple(int(j) for j in np.flatnonzero(v >= 0))
    neg = tuple(int(j) for j in np.flatnonzero(v < 0))
    V = np.zeros((2, net.width))
    V[1, list(pos)] = v[list(pos)]
    V[0, list(neg)] = -v[list(neg)]
    return TwoLogitSplitNet(net.hidden_weights, net.hidden_biases, V,
                            base=net, positive_head=pos, negative_head=neg)


class GradientRatio(NamedTuple):
    C: float
    g_true: np.ndarray
    g_false: np.ndarray
    e_true: float
    e_false: float
    r_x: float


def _require_two_logits(model: Classifier) -> None:
    if model.num_classes != 2:
        raise ValueError("this check is defined for two-logit classifiers only")


def gradient_ratio(model: Classifier, x, y_true: int) -> GradientRatio:
    """Ratio of softmax-weighted logit gradients, true class over the other class.

    ``C`` is ``math.inf`` when the other class contributes a zero vector.
    """
    _require_two_logits(model)
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1:
        raise DimensionError("gradient_ratio takes a single input vector")
    logits = model.forward(x)
    e = softmax(logits)
    jac = model.input_jacobian(x)
    t, f = int(y_true), 1 - int(y_true)
    num = e[t] * np.linalg.norm(jac[t])
    den = e[f] * np.linalg.norm(jac[f])
    C = math.inf if den == 0 else float(num / den)
    return GradientRatio(C, jac[t], jac[f], float(e[t]), float(e[f]), float(logits[t] - logits[f]))


def required_ratio(r_x: float, epsilon: float, g_true_norm: float) -> float:
    """Smallest admissible ratio bound ``max{exp|r| eps |g| / (eps |g| + 2 r), 1}``.

    Infinite when the budget is too small for the bound to exist.
    """
    denom = epsilon * g_true_norm + 2.0 * r_x
    if denom <= 0:
        return math.inf
    return max(math.exp(abs(r_x)) * epsilon * g_true_norm / denom, 1.0)


def theorem_alpha(epsilon: float, e_true: float, C: float, g_true_norm: float) -> float:
    """Step size ``eps / (e_true (1 + 1/C) |g_true|)``; ``C = inf`` drops the ``1/C`` term."""
    if g_true_norm <= 0:
        raise ValueError("true-class gradient has zero norm")
    if not (epsilon > 0 and e_true > 0 and C > 0):
        raise ValueError("epsilon, e_true and C must be positive")
    inv_c = 0.0 if math.isinf(C) else 1.0 / C
    return epsilon / (e_true * (1.0 + inv_c) * g_true_norm)


def is_locally_linear(model: Classifier, x, epsilon: float) -> bool:
    """Exact test that ``model`` is affine on the closed l2 ball of radius ``epsilon``.

    Linear models always are; a ReLU net is iff no unit's pre-activation can
    change sign inside the ball.  Other models fall back to a probe.
    """
    if isinstance(model, LinearClassifier):
        return True
    if isinstance(model, TwoLayerReluNet):
        h = model.preactivations(np.asarray(x, dtype=np.float64))
        reach = epsilon * np.linalg.norm(model.hidden_weights, axis=1)
        # units whose outgoing weights are all zero cannot bend any logit
        live = np.any(model.output_weights != 0, axis=0)
        return bool(np.all((np.abs(h) >= reach) & ((h != 0) | (reach == 0)) | ~live))
    return local_linearity_probe(model, x, epsilon, 256) <= 1e-9


def local_linearity_probe(model: Classifier, x, epsilon: float, n_probes: int,
                          seed: int = 0) -> float:
    """Max over random ball points of ``|f(x+u) - f(x) - J u| / (1 + |f(x)|)``."""
    if n_probes < 1:
        raise ValueError("n_probes must be >= 1")
    x = np.asarray(x, dtype=np.float64)
    rng = np.random.default_rng(seed)
    d = x.shape[0]
    dirs = rng.standard_normal((n_probes, d))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    u = dirs * (epsilon * rng.uniform(size=n_probes) ** (1.0 / d))[:, None]
    f0 = model.forward(x)
    jac = model.input_jacobian(x)
    resid = model.forward(x + u) - f0 - u @ jac.T
    return float(np.max(np.abs(resid) / (1.0 + np.abs(f0))))


def _json_float(v: float):
    if math.isinf(v):
        return "inf" if v > 0 else "-inf"
    return v


@dataclass
class TheoremReport:
    r_x: float
    g_true_norm: float
    g_false_norm: float
    e_true: float
    e_false: float
    C: float
    C_required: float
    epsilon: float
    epsilon_min: float
    alpha_star: float
    step_norm: float
    ratio_ok: bool
    epsilon_ok: bool
    locally_linear_ok: bool
    post_margin: float
    certified: bool

    @property
    def hypotheses_met(self) -> bool:
        return self.ratio_ok and self.epsilon_ok and self.locally_linear_ok

    @property
    def violation(self) -> bool:
        return self.hypotheses_met and not self.post_margin > 0

    def to_dict(self) -> dict:
        out = {k: (_json_float(v) if isinstance(v, float) else v) for k, v in asdict(self).items()}
        out["hypotheses_met"] = self.hypotheses_met
        return out

    @classmethod
    def from_dict(cls, doc: dict) -> "TheoremReport":
        names = cls.__dataclass_fields__
        return cls(**{k: (float(v) if isinstance(v, str) else v) for k, v in doc.items() if k in names})


def check_theorem(model: Classifier, x, y_true: int, epsilon: float,
                  strict: bool = True) -> TheoremReport:
    """Evaluate every hypothesis at ``x`` and run the single certified step.

    The step uses one iteration, the closed-form step size and l2 projection.
    With ``strict`` a hypothesis-satisfying sample that ends up misclassified
    raises :class:`TheoremViolation`.
    """
    ratio = gradient_ratio(model, x, y_true)
    g_norm = float(np.linalg.norm(ratio.g_true))
    if g_norm == 0:
        raise ValueError("true-class gradient is zero; the step is undefined")
    r = ratio.r_x
    c_req = required_ratio(r, epsilon, g_norm)
    eps_min = -2.0 * r / g_norm
    epsilon_ok = epsilon > eps_min
    ratio_ok = epsilon_ok and ratio.C > c_req
    alpha = theorem_alpha(epsilon, ratio.e_true, ratio.C, g_norm)
    x = np.asarray(x, dtype=np.float64)
    raw_step = -alpha * energy_grad_input(model, x)
    res = et3(model, x, DefenseConfig(epsilon=epsilon, alpha=alpha, steps=1, norm="l2"))
    out = model.forward(res.x_p)
    t, f = int(y_true), 1 - int(y_true)
    post = float(out[t] - out[f])
    report = TheoremReport(
        r_x=r, g_true_norm=g_norm, g_false_norm=float(np.linalg.norm(ratio.g_false)),
        e_true=ratio.e_true, e_false=ratio.e_false, C=ratio.C, C_required=c_req,
        epsilon=float(epsilon), epsilon_min=eps_min, alpha_star=alpha,
        step_norm=float(np.linalg.norm(raw_step)), ratio_ok=bool(ratio_ok),
        epsilon_ok=bool(epsilon_ok), locally_linear_ok=is_locally_linear(model, x, epsilon),
        post_margin=post, certified=False,
    )
    report.certified = report.hypotheses_met and post > 0
    if strict and report.violation:
        raise TheoremViolation(report)
    return report


def random_theorem_instance(rng: np.random.Generator, dim: int, ratio_factor: float = 1.05):
    """A random two-logit linear model meeting the hypotheses by construction.

    Draws the true-class gradient, the margin and a budget above the minimum,
    then scales a random false-class gradient so the weighted ratio equals
    ``ratio_factor`` times the required bound.  Returns ``(model, x, y_true, epsilon)``.
    """
    y_true = int(rng.integers(0, 2))
    g_true = rng.standard_normal(dim)
    g_norm = np.linalg.norm(g_true)
    r = rng.uniform(-3.0, 3.0)
    eps = rng.uniform(0.1, 5.0)
    if eps * g_norm + 2 * r <= 0:
        eps = (-2.0 * r / g_norm) * rng.uniform(1.1, 3.0)
    e_true = 1.0 / (1.0 + math.exp(-r))
    C = ratio_factor * required_ratio(r, eps, g_norm)
    u = rng.standard_normal(dim)
    u /= np.linalg.norm(u)
    g_false = u * e_true * g_norm / ((1.0 - e_true) * C)
    W = np.zeros((2, dim))
    W[y_true], W[1 - y_true] = g_true, g_false
    x = rng.standard_normal(dim)
    bias = np.zeros(2)
    base = W @ x
    # choose biases so that logit_true - logit_false == r at x
    bias[y_true] = r - (base[y_true] - base[1 - y_true])
    return LinearClassifier(W, bias), x, y_true, float(eps)


@dataclass
class AuditSummary:
    instances: int
    hypotheses_met: int
    certified: int
    violations: int
    step_over_budget: int
    reports: List[TheoremReport] = field(default_factory=list, repr=False)


def theorem_audit(n_instances: int, seed: int = 0, dim_range=(2, 32),
                  ratio_factor: float = 1.05, keep_reports: bool = False) -> AuditSummary:
    """Check many random hypothesis-satisfying linear instances (non-strict)."""
    reports = []
    met = cert = viol = over = 0
    for i in range(n_instances):
        rng = np.random.default_rng([seed, i])
        dim = int(rng.integers(dim_range[0], dim_range[1] + 1))
        model, x, y, eps = random_theorem_instance(rng, dim, ratio_factor)
        rep = check_theorem(model, x, y, eps, strict=False)
        met += rep.hypotheses_met
        cert += rep.certified
        viol += rep.violation
        over += rep.hypotheses_met and rep.step_norm > rep.epsilon * (1 + 1e-12)
        if keep_reports:
            reports.append(rep)
    return AuditSummary(n_instances, met, cert, viol, over, reports)


@dataclass
class ScatterRow:
    C: float
    post_margin: float
    was_adversarial: bool
    r_x: float
    C_required: float


def scatter_c_vs_margin(model: Classifier, dataset: Dataset, attack_cfg: AttackConfig,
                        defense_cfg: DefenseConfig, x_adv=None) -> List[ScatterRow]:
    """Gradient ratio against post-transformation logit margin, clean then adversarial per sample.

    The transformation always differentiates ``model`` itself.  Precomputed
    adversaries may be passed as ``x_adv``; otherwise PGD with ``attack_cfg``
    is run.
    """
    _require_two_logits(model)
    adv = pgd(model, dataset.X, dataset.y, attack_cfg).x_adv if x_adv is None else np.asarray(x_adv)
    rows = []
    for i in range(len(dataset)):
        y = int(dataset.y[i])
        for point, is_adv in ((dataset.X[i], False), (adv[i], True)):
            ratio = gradient_ratio(model, point, y)
            gn = float(np.linalg.norm(ratio.g_true))
            c_req = required_ratio(ratio.r_x, defense_cfg.epsilon, gn) if gn > 0 else math.inf
            out = model.forward(et3(model, point, defense_cfg).x_p)
            rows.append(ScatterRow(ratio.C, float(out[y] - out[1 - y]), is_adv, ratio.r_x, c_req))
    return rows


def spearman(a, b) -> float:
    return float(spearmanr(a, b)[0])
