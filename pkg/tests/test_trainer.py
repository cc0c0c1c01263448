import numpy as np
import pytest

from et3.attacks import AttackConfig
from et3.data import Dataset, concept_clusters, concept_means, gaussian_blobs, moons
from et3.defense import DefenseConfig
from et3.nets import LinearClassifier, cosine_head
from et3.trainer import (ArchSpec, EvalReport, TrainConfig, TrainingDivergedError, TrainLog, accuracy,
                         evaluate_accuracy, generate_adversaries, init_model, train)


def test_linear_model_separates_gaussians():
    ds = gaussian_blobs(200, 2, 2, separation=4.0, sigma=0.5, seed=0)
    model, log = train(ArchSpec("linear", 2, 2), ds, TrainConfig(50, 16, 0.1, seed=0))
    assert accuracy(model, ds.X, ds.y) >= 0.99
    assert log.epoch == list(range(1, 51))
    assert log.loss[-1] < log.loss[0]


def test_zero_epochs_returns_initialization():
    arch = ArchSpec("two_layer_relu", 3, 2, 5)
    ds = gaussian_blobs(10, 2, 3, seed=1)
    model, log = train(arch, ds, TrainConfig(0, 4, 0.1, seed=9))
    init = init_model(arch, 9)
    for k, v in init.params().items():
        assert np.array_equal(model.params()[k], v)
    assert log.epoch == []


def test_init_is_uniform_in_fan_in_range():
    model = init_model(ArchSpec("two_layer_relu", 16, 3, 64), 0)
    assert np.max(np.abs(model.hidden_weights)) <= 1 / 4
    assert np.max(np.abs(model.output_weights)) <= 1 / 8


def test_adversarial_training_beats_standard_twin():
    ds = moons(600, 2, 0.1, seed=0)
    arch = ArchSpec("two_layer_relu", 2, 2, 32)
    std, _ = train(arch, ds, TrainConfig(60, 32, 0.1, seed=0))
    at, _ = train(arch, ds, TrainConfig(60, 32, 0.1, adv=AttackConfig(0.15, 0.15 / 4, 10, "l2"), seed=0))
    attack = AttackConfig(0.15, 0.15 / 8, 20, "l2")
    base = evaluate_accuracy(std, ds, attack=attack).robust_acc["attack"]
    robust = evaluate_accuracy(at, ds, attack=attack).robust_acc["attack"]
    assert robust > base


def test_training_is_bit_reproducible():
    ds = moons(200, 3, 0.1, seed=2)
    arch = ArchSpec("two_layer_relu", 3, 2, 8)
    cfg = TrainConfig(5, 16, 0.1, adv=AttackConfig(0.1, 0.05, 3, "linf"), momentum=0.5, seed=3)
    a, log_a = train(arch, ds, cfg)
    b, log_b = train(arch, ds, cfg)
    for k in a.params():
        assert a.params()[k].tobytes() == b.params()[k].tobytes()
    assert log_a.to_csv() == log_b.to_csv()


def test_divergence_is_detected():
    ds = gaussian_blobs(20, 2, 2, seed=0)
    with pytest.raises(TrainingDivergedError), np.errstate(all="ignore"):
        train(ArchSpec("two_layer_relu", 2, 2, 8), ds, TrainConfig(20, 4, 1e100, seed=0))


def test_config_and_shape_errors():
    with pytest.raises(ValueError):
        TrainConfig(1, 1, 0.0)
    with pytest.raises(ValueError):
        TrainConfig(-1, 1, 0.1)
    with pytest.raises(ValueError):
        ArchSpec("conv", 2, 2)
    with pytest.raises(ValueError):
        train(ArchSpec("linear", 3, 2), gaussian_blobs(5, 2, 2), TrainConfig(1, 1, 0.1))
    with pytest.raises(ValueError):
        train(ArchSpec("linear", 2, 2), Dataset(np.zeros((0, 2)), [], 2), TrainConfig(1, 1, 0.1))


def test_log_csv_layout():
    log = TrainLog([1, 2], [0.5, 0.25], [0.75, 1.0])
    assert log.to_csv().splitlines()[0] == "epoch,loss,clean_acc"
    assert len(log.to_csv().splitlines()) == 3


# ---- evaluation


def test_perfect_margin_linear_model():
    ds = Dataset([[2.0, 0.0], [-2.0, 0.0]], [0, 1], 2)
    m = LinearClassifier([[1.0, 0.0], [-1.0, 0.0]], [0.0, 0.0])
    rep = evaluate_accuracy(m, ds)
    assert rep.clean_acc == 1.0 and rep.robust_acc == {}


@pytest.mark.parametrize("adaptivity", ["non_adaptive", "adaptive", "worst_case"])
def test_zero_radius_attack_keeps_clean_accuracy(adaptivity):
    ds = gaussian_blobs(50, 3, 4, separation=1.5, seed=3)
    model, _ = train(ArchSpec("two_layer_relu", 4, 3, 8), ds, TrainConfig(3, 16, 0.1, seed=0))
    rep = evaluate_accuracy(model, ds, DefenseConfig(0.3, 0.3, 1), AttackConfig(0.0, 0.1, 5, "l2"),
                            adaptivity, label="zero")
    assert rep.robust_acc["zero"] == rep.clean_acc


def test_per_sample_counts_add_up():
    ds = gaussian_blobs(40, 2, 2, separation=1.0, seed=5)
    m = LinearClassifier([[1.0, 0.0], [-1.0, 0.0]], [0.0, 0.0])
    rep = evaluate_accuracy(m, ds, attack=AttackConfig(0.3, 0.1, 5, "l2"))
    clean = sum(r["clean_correct"] for r in rep.per_sample)
    assert len(rep.per_sample) == len(ds)
    assert clean + sum(not r["clean_correct"] for r in rep.per_sample) == len(ds)
    assert clean / len(ds) == rep.clean_acc
    assert all(r["clean_correct"] or not r["survived"]["attack"] for r in rep.per_sample)
    assert EvalReport.from_dict(rep.to_dict()) == rep


def test_precomputed_adversaries_are_used_as_is():
    ds = Dataset([[1.0, 0.0]], [0], 2)
    m = LinearClassifier([[1.0, 0.0], [-1.0, 0.0]], [0.0, 0.0])
    rep = evaluate_accuracy(m, ds, x_adv=np.array([[-1.0, 0.0]]), label="given")
    assert rep.robust_acc == {"given": 0.0}


def test_unknown_adaptivity_rejected():
    with pytest.raises(ValueError):
        generate_adversaries(LinearClassifier(np.eye(2), np.zeros(2)), np.zeros((1, 2)), [0],
                             AttackConfig(0.1, 0.1), "oblivious", DefenseConfig(1.0, 1.0))


def test_et3_helps_adversarially_trained_toy_net():
    full = concept_clusters(2000, 10, 2, 20, 4.0, 0.5, seed=1)
    train_set, test_set = full.subset(np.arange(1000)), full.subset(np.arange(1000, 2000))
    cfg = TrainConfig(30, 32, 0.05, adv=AttackConfig(0.5, 0.125, 10, "l2"), seed=0)
    model, _ = train(ArchSpec("two_layer_relu", 20, 2, 64), train_set, cfg)
    proxy = cosine_head(concept_means(10, 20, 4.0, seed=1), 10.0)
    defense = DefenseConfig(3.0, 30.0, 1, "l2", energy_head="proxy")
    transfer = AttackConfig(1.5, 1.5 / 8, 20, "l2")
    x_adv = generate_adversaries(model, test_set.X, test_set.y, transfer, "non_adaptive")
    base = evaluate_accuracy(model, test_set, x_adv=x_adv, label="pgd")
    et3 = evaluate_accuracy(model, test_set, defense, proxy=proxy, x_adv=x_adv, label="pgd")
    assert et3.robust_acc["pgd"] >= base.robust_acc["pgd"]
    strong = AttackConfig(1.5, 1.5 / 20, 100, "l2", restarts=4, loss="margin")
    worst = evaluate_accuracy(model, test_set, defense, strong, "worst_case", proxy, label="worst")
    assert worst.robust_acc["worst"] >= base.robust_acc["pgd"]
