import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from et3.nets import (DimensionError, EmbeddingSimilarityClassifier, LinearClassifier, TwoLayerReluNet,
                      ZeroEmbeddingError, cosine_head, cross_entropy, dumps_model, fd_jacobian, forward,
                      input_jacobian, load_model, loads_model, model_from_dict, param_gradients, save_model)

from conftest import BUILDERS, away_from_kinks, constant_classifier, random_linear, random_relu, rel_err


# ---- forward


def test_linear_identity_forward():
    m = LinearClassifier(np.eye(2), np.zeros(2))
    assert np.array_equal(forward(m, [3.0, -1.0]), [3.0, -1.0])


def test_relu_inactive_unit_gives_zero():
    m = TwoLayerReluNet([[1.0, 0.0]], [-2.0], [[1.0]])
    assert forward(m, [1.0, 0.0]).tolist() == [0.0]


def test_similarity_aligned_vector():
    m = EmbeddingSimilarityClassifier(LinearClassifier(np.eye(2), np.zeros(2)), np.eye(2), 1.0)
    assert np.allclose(forward(m, [1.0, 0.0]), [1.0, 0.0], atol=0, rtol=0)


def test_dimension_mismatch_raises():
    m = LinearClassifier(np.eye(3), np.zeros(3))
    with pytest.raises(DimensionError):
        m.forward([1.0, 2.0])
    with pytest.raises(DimensionError):
        m.input_jacobian(np.zeros((4, 2)))


def test_zero_embedding_raises():
    m = EmbeddingSimilarityClassifier(LinearClassifier(np.eye(2), np.zeros(2)), np.eye(2), 1.0)
    with pytest.raises(ZeroEmbeddingError):
        m.forward([0.0, 0.0])


def test_bank_must_be_unit_norm():
    with pytest.raises(ValueError):
        EmbeddingSimilarityClassifier(LinearClassifier(np.eye(2), np.zeros(2)), [[1.0, 0.0], [0.0, 1.1]])
    with pytest.raises(ValueError):
        EmbeddingSimilarityClassifier(LinearClassifier(np.eye(2), np.zeros(2)), np.eye(2), temperature=0.0)


def test_non_finite_parameters_rejected():
    with pytest.raises(ValueError):
        LinearClassifier([[np.nan, 0.0]], [0.0])


def test_models_are_immutable():
    m = LinearClassifier(np.eye(2), np.zeros(2))
    with pytest.raises(ValueError):
        m.weight[0, 0] = 5.0


def test_batched_forward_matches_rows(rng):
    for build in BUILDERS.values():
        m = build(rng)
        X = rng.standard_normal((7, m.dim))
        batch = m.forward(X)
        assert np.allclose(batch, np.stack([m.forward(x) for x in X]), rtol=0, atol=1e-12)


# ---- Jacobians


def test_linear_jacobian_is_weight_everywhere(rng):
    m = random_linear(rng)
    mats = [input_jacobian(m, rng.standard_normal(m.dim)) for _ in range(10)]
    for J in mats:
        assert np.array_equal(J, m.weight)


def test_relu_jacobian_chain_rule():
    m = TwoLayerReluNet([[2.0, 0.0]], [1.0], [[3.0]])
    assert input_jacobian(m, [0.0, 0.0]).tolist() == [[6.0, 0.0]]


def test_relu_kink_counts_as_inactive():
    m = TwoLayerReluNet([[1.0, 0.0]], [0.0], [[1.0]])
    assert input_jacobian(m, [0.0, 0.0]).tolist() == [[0.0, 0.0]]


def test_fd_jacobian_linear_exact(rng):
    m = random_linear(rng)
    assert np.allclose(fd_jacobian(m, rng.standard_normal(m.dim)), m.weight, rtol=0, atol=1e-8)


def test_fd_jacobian_constant_classifier():
    assert np.allclose(fd_jacobian(constant_classifier(), [0.3, -0.2]), 0.0, atol=0)


def test_fd_jacobian_rejects_bad_step():
    with pytest.raises(ValueError):
        fd_jacobian(constant_classifier(), [0.0, 0.0], h=0.0)


@pytest.mark.parametrize("arch", sorted(BUILDERS))
def test_jacobian_matches_finite_differences(arch):
    rng = np.random.default_rng(7)
    checked = 0
    while checked < 100:
        m = BUILDERS[arch](rng)
        x = rng.standard_normal(m.dim)
        if not away_from_kinks(m, x):
            continue
        assert rel_err(input_jacobian(m, x), fd_jacobian(m, x)) < 1e-4
        checked += 1


def test_similarity_scale_invariance(rng):
    embed = random_relu(rng, 4, 3)
    bank = rng.standard_normal((5, 3))
    bank /= np.linalg.norm(bank, axis=1, keepdims=True)
    base = EmbeddingSimilarityClassifier(embed, bank, 2.0)
    x = rng.standard_normal(4)
    for c in (0.5, 2.0, 10.0):
        # scaling the last layer scales the embedding by c
        scaled = EmbeddingSimilarityClassifier(
            TwoLayerReluNet(embed.hidden_weights, embed.hidden_biases, c * embed.output_weights), bank, 2.0)
        assert np.allclose(scaled.forward(x), base.forward(x), rtol=0, atol=1e-9)


def test_relu_positively_homogeneous_in_output_weights(rng):
    m = random_relu(rng)
    x = rng.standard_normal(m.dim)
    for c in (0.1, 3.0, 17.0):
        scaled = TwoLayerReluNet(m.hidden_weights, m.hidden_biases, c * m.output_weights)
        assert np.allclose(scaled.forward(x), c * m.forward(x), rtol=0, atol=1e-12 * max(1.0, c))


def test_cosine_head_normalizes_directions():
    m = cosine_head([[3.0, 0.0], [0.0, 0.5]], temperature=4.0)
    assert np.allclose(m.forward([2.0, 0.0]), [4.0, 0.0], atol=1e-15)


# ---- parameter gradients


def test_saturated_linear_gradients_vanish():
    m = LinearClassifier([[0.0, 0.0], [0.0, 0.0]], [50.0, 0.0])
    g = param_gradients(m, [1.0, -2.0], 0)
    for v in g.values():
        assert np.max(np.abs(v)) <= 1e-15 * 10


def test_uniform_logits_bias_gradient():
    m = LinearClassifier(np.zeros((2, 3)), np.zeros(2))
    g = param_gradients(m, [0.1, 0.2, 0.3], 0)
    assert np.allclose(g["bias"], [-0.5, 0.5], atol=0, rtol=0)


def test_param_gradients_rejects_bad_inputs():
    m = LinearClassifier(np.zeros((2, 3)), np.zeros(2))
    with pytest.raises(ValueError):
        param_gradients(m, [0.0, 0.0, 0.0], 2)
    with pytest.raises(ValueError):
        param_gradients(m, [0.0, 0.0, 0.0], 0, loss_kind="hinge")
    with pytest.raises(DimensionError):
        param_gradients(m, np.zeros((3, 3)), [0, 1])


def _fd_param_grad(model, X, y, h=1e-6):
    out = {}
    for name, p in model.params().items():
        g = np.zeros_like(p)
        for idx in np.ndindex(p.shape):
            up, dn = p.copy(), p.copy()
            up[idx] += h
            dn[idx] -= h
            lu = np.mean(cross_entropy(model.with_params({**model.params(), name: up}).forward(X), y))
            ld = np.mean(cross_entropy(model.with_params({**model.params(), name: dn}).forward(X), y))
            g[idx] = (lu - ld) / (2 * h)
        out[name] = g
    return out


@pytest.mark.parametrize("arch", sorted(BUILDERS))
def test_param_gradients_match_finite_differences(arch):
    rng = np.random.default_rng(3)
    done = 0
    while done < 10:
        m = BUILDERS[arch](rng)
        X = rng.standard_normal((4, m.dim))
        if not all(away_from_kinks(m, x, 1e-2) for x in X):
            continue
        y = rng.integers(0, m.num_classes, 4)
        analytic = param_gradients(m, X, y)
        numeric = _fd_param_grad(m, X, y)
        for name in analytic:
            assert rel_err(analytic[name], numeric[name]) < 1e-4, name
        done += 1


# ---- serialization


@pytest.mark.parametrize("arch", sorted(BUILDERS))
def test_json_round_trip_bit_exact(arch, tmp_path):
    rng = np.random.default_rng(11)
    m = BUILDERS[arch](rng)
    back = loads_model(dumps_model(m))
    x = rng.standard_normal(m.dim)
    assert np.array_equal(back.forward(x), m.forward(x))
    for k, v in m.params().items():
        assert np.array_equal(back.params()[k], v)
    save_model(m, tmp_path / "m.json")
    assert dumps_model(load_model(tmp_path / "m.json")) == dumps_model(m)


def test_json_document_layout():
    doc = json.loads(dumps_model(TwoLayerReluNet([[1.0, 2.0]], [0.5], [[1.0], [-1.0]])))
    assert doc["format_version"] == 1
    assert doc["arch"] == "two_layer_relu"
    assert doc["dims"] == {"d": 2, "K": 2, "J": 1}


def test_unknown_format_rejected():
    doc = json.loads(dumps_model(LinearClassifier(np.eye(2), np.zeros(2))))
    with pytest.raises(ValueError):
        model_from_dict({**doc, "format_version": 99})
    with pytest.raises(ValueError):
        model_from_dict({**doc, "arch": "conv"})


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-1e300, 1e300, allow_nan=False), min_size=4, max_size=4))
def test_round_trip_preserves_any_finite_double(vals):
    m = LinearClassifier(np.array(vals).reshape(2, 2), [vals[0], vals[3]])
    back = loads_model(dumps_model(m))
    assert np.array_equal(back.weight, m.weight) and np.array_equal(back.bias, m.bias)
