import numpy as np
import pytest

from et3.nets import EmbeddingSimilarityClassifier, LinearClassifier, TwoLayerReluNet


def random_linear(rng, d=None, k=None):
    d = d or int(rng.integers(2, 9))
    k = k or int(rng.integers(2, 6))
    return LinearClassifier(rng.standard_normal((k, d)), rng.standard_normal(k))


def random_relu(rng, d=None, k=None, width=None):
    d = d or int(rng.integers(2, 9))
    k = k or int(rng.integers(2, 6))
    width = width or int(rng.integers(3, 12))
    return TwoLayerReluNet(rng.standard_normal((width, d)), rng.standard_normal(width),
                           rng.standard_normal((k, width)))


def random_similarity(rng, d=None, k=None, m=None):
    d = d or int(rng.integers(2, 9))
    k = k or int(rng.integers(2, 6))
    m = m or int(rng.integers(2, 6))
    bank = rng.standard_normal((k, m))
    bank /= np.linalg.norm(bank, axis=1, keepdims=True)
    if rng.uniform() < 0.5:
        embed = random_linear(rng, d, m)
    else:
        # unit 0 is always active, so the embedding never vanishes identically
        net = random_relu(rng, d, m)
        W, b = net.hidden_weights.copy(), net.hidden_biases.copy()
        W[0], b[0] = 0.0, 1.0
        embed = TwoLayerReluNet(W, b, net.output_weights)
    return EmbeddingSimilarityClassifier(embed, bank, float(rng.uniform(0.5, 5.0)))


BUILDERS = {"linear": random_linear, "two_layer_relu": random_relu, "similarity": random_similarity}


def usable(model, x) -> bool:
    """False for similarity heads whose embedding (nearly) vanishes anywhere near ``x``."""
    if isinstance(model, EmbeddingSimilarityClassifier):
        return float(np.linalg.norm(model.embed.forward(x))) > 1e-2
    return True


def away_from_kinks(model, x, margin=1e-3):
    """True when no ReLU pre-activation on the evaluation path is within ``margin`` of zero."""
    nets = [model]
    if isinstance(model, EmbeddingSimilarityClassifier):
        if not usable(model, x):
            return False
        nets = [model.embed]
    for net in nets:
        if isinstance(net, TwoLayerReluNet) and np.min(np.abs(net.preactivations(x))) < margin:
            return False
    return True


def rel_err(a, b):
    a, b = np.asarray(a), np.asarray(b)
    return float(np.max(np.abs(a - b)) / max(1.0, float(np.max(np.abs(b)))))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def constant_classifier(d=2, k=2, value=0.7):
    return LinearClassifier(np.zeros((k, d)), np.full(k, value))


@pytest.fixture(autouse=True)
def _isolated_cwd(tmp_path, monkeypatch):
    # bundled configs use relative output and cache paths
    monkeypatch.chdir(tmp_path)
