import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from diffcurriculum.classifier import (
    Classifier,
    TrainConfig,
    hard_by_probability,
    identify_hard,
    identify_tail,
    predict_proba,
    train_epochs,
)
from diffcurriculum.data import Dataset

from conftest import random_dataset


def test_zero_head_gives_uniform():
    clf = Classifier.init(10, (8, 8), zero_head=True)
    p = predict_proba(clf, np.random.default_rng(0).random((5, 8, 8)))
    np.testing.assert_allclose(p, 0.1, atol=1e-7)


@pytest.mark.parametrize("head", ["linear", "cosine"])
def test_probabilities_sum_to_one(head):
    clf = Classifier.init(7, (8, 8), seed=2, head=head)
    p = predict_proba(clf, np.random.default_rng(1).normal(0, 3, size=(20, 8, 8)))
    np.testing.assert_allclose(p.sum(axis=1), 1.0, atol=1e-6)
    assert p.min() >= 0
    assert predict_proba(clf, np.zeros((8, 8))).shape == (7,)


def _loss(clf, x, y):
    return clf.loss_and_grads(x, y)[0]


@pytest.mark.parametrize("head", ["linear", "cosine"])
def test_gradients_match_finite_differences(head):
    rng = np.random.default_rng(3)
    clf = Classifier.init(5, (6, 6), seed=4, head=head).astype(np.float64)
    clf.params = {k: v + rng.normal(0, 0.05, v.shape) for k, v in clf.params.items()}
    x, y = rng.random((7, 6, 6)), rng.integers(0, 5, 7)
    _, grads = clf.loss_and_grads(x, y)
    coords = [(k, i) for k in clf.params for i in range(clf.params[k].size)]
    if head == "cosine":
        coords = [c for c in coords if c[0] != "b2"]
    picks = rng.choice(len(coords), size=10, replace=False)
    for j in picks:
        name, flat = coords[j]
        p = clf.params[name]
        idx = np.unravel_index(flat, p.shape)
        old, h = p[idx], 1e-6
        p[idx] = old + h
        up = _loss(clf, x, y)
        p[idx] = old - h
        down = _loss(clf, x, y)
        p[idx] = old
        fd, an = (up - down) / (2 * h), grads[name][idx]
        assert abs(an - fd) <= 1e-4 * max(abs(an), abs(fd), 1e-6), (name, idx, an, fd)


def test_zero_epochs_leaves_parameters_unchanged():
    clf = Classifier.init(3, (8, 8), seed=1)
    out, log = train_epochs(clf, random_dataset(6), TrainConfig(epochs=5, curriculum_epochs=0), 0)
    assert log == []
    for k in clf.params:
        assert out.params[k].tobytes() == clf.params[k].tobytes()


def test_empty_dataset_rejected():
    with pytest.raises(ValueError):
        train_epochs(Classifier.init(3, (8, 8)), Dataset.empty((8, 8)), TrainConfig(), 1)


def test_single_sample_overfits():
    clf = Classifier.init(4, (8, 8), seed=5)
    data = random_dataset(1, k=4)
    data.labels[:] = 3
    cfg = TrainConfig(epochs=200, curriculum_epochs=0, learn_rate=1e-2, seed=0)
    out, log = train_epochs(clf, data, cfg, 200)
    assert log[-1].accuracy == 1.0
    assert predict_proba(out, data.images[0]).argmax() == 3


def test_training_bit_reproducible():
    data = random_dataset(40, k=3)
    cfg = TrainConfig(epochs=3, curriculum_epochs=0, seed=9)
    a, la = train_epochs(Classifier.init(3, (8, 8), seed=1), data, cfg, 3)
    b, lb = train_epochs(Classifier.init(3, (8, 8), seed=1), data, cfg, 3)
    for k in a.params:
        assert a.params[k].tobytes() == b.params[k].tobytes()
    assert [r.loss for r in la] == [r.loss for r in lb]


def test_nonfinite_loss_aborts():
    from diffcurriculum.diffusion import TrainingDiverged

    clf = Classifier.init(3, (8, 8), seed=1)
    clf.params["W1"][:] = np.nan
    with pytest.raises(TrainingDiverged):
        train_epochs(clf, random_dataset(4), TrainConfig(epochs=1, curriculum_epochs=0), 1)


def test_train_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(epochs=3, curriculum_epochs=4)
    with pytest.raises(ValueError):
        TrainConfig(loss="hinge")


def test_checkpoint_roundtrip(tmp_path):
    clf = Classifier.init(3, (8, 8), seed=7, head="cosine")
    clf.save(tmp_path / "c.dscf")
    back = Classifier.load(tmp_path / "c.dscf")
    x = np.random.default_rng(0).random((3, 8, 8))
    np.testing.assert_array_equal(back.logits(x), clf.logits(x))
    assert back.head == "cosine"


def test_hard_strict_inequality():
    assert hard_by_probability(np.array([0.9, 0.2, 0.5]), 0.5).tolist() == [1]


def test_hard_zero_threshold_is_empty():
    assert hard_by_probability(np.array([0.0, 0.3, 1.0]), 0.0).size == 0


def test_hard_threshold_one_and_above():
    assert hard_by_probability(np.array([1.0, 0.99, 0.2]), 1.0).tolist() == [1, 2]
    with pytest.raises(ValueError):
        hard_by_probability(np.array([0.5]), 1.0 + 1e-9)
    with pytest.raises(ValueError):
        identify_hard(Classifier.init(3, (8, 8)), random_dataset(3), 1.5)


@given(st.lists(st.floats(0, 1), min_size=1, max_size=40), st.floats(0, 1), st.floats(0, 1))
def test_hard_monotone_in_threshold(p, a, b):
    lo, hi = sorted((a, b))
    p = np.array(p)
    assert set(hard_by_probability(p, lo)) <= set(hard_by_probability(p, hi))


def test_identify_hard_uses_true_class_probability():
    clf = Classifier.init(3, (8, 8), seed=2)
    data = random_dataset(12)
    probs = predict_proba(clf, data.images)[np.arange(12), data.labels]
    h = float(np.median(probs))
    assert identify_hard(clf, data, h).tolist() == np.flatnonzero(probs < h).tolist()


def test_identify_tail():
    data = random_dataset(9)
    assert identify_tail(data, {0: "many", 1: "medium", 2: "few"}).tolist() == [2, 5, 8]
