import itertools

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from partgait import tensor as T
from partgait.errors import DegenerateBatch, ZeroVector
from partgait.losses import (Adam, TripletConfig, adam_step, batch_all_triplet_loss, cosine_proximity_loss,
                             count_valid_triplets, triplet_loss)


def test_triplet_loss_examples():
    assert triplet_loss(0.7, 0.7, 0.2) == pytest.approx(0.5)
    assert triplet_loss(0.1, 0.3, 0.2) == pytest.approx(0.0, abs=1e-12)
    assert triplet_loss(0.1, 0.9, 0.2) == 0.0
    assert triplet_loss(0.3, 0.1, 0.2) == pytest.approx(1.0)


def test_margin_must_be_positive():
    with pytest.raises(ValueError):
        TripletConfig(margin=0.0)


def test_four_label_batch_has_eight_triplets():
    emb = np.random.default_rng(0).normal(size=(4, 3))
    _, report = batch_all_triplet_loss(emb, ["A", "A", "B", "B"])
    assert report.total == 8
    assert count_valid_triplets(["A", "A", "B", "B"]) == 8


def test_identical_embeddings_give_half():
    loss, report = batch_all_triplet_loss(np.ones((6, 4)), [0, 0, 1, 1, 2, 2], 0.2)
    assert float(loss.data) == pytest.approx(0.5)
    assert report.easy == 0


def test_separated_embeddings_are_easy():
    emb = np.repeat(np.eye(3) * 5, 2, axis=0)
    loss, report = batch_all_triplet_loss(emb, [0, 0, 1, 1, 2, 2], 0.2)
    assert float(loss.data) == 0.0
    assert report.easy == report.total == count_valid_triplets([0, 0, 1, 1, 2, 2])


def test_degenerate_batch():
    with pytest.raises(DegenerateBatch):
        batch_all_triplet_loss(np.zeros((3, 2)), [0, 0, 0])
    with pytest.raises(DegenerateBatch):
        batch_all_triplet_loss(np.zeros((3, 2)), [0, 1, 2])


def exhaustive(emb, labels, margin):
    """Loop over every ordered (anchor, positive, negative)."""
    d = np.sqrt(((emb[:, None] - emb[None]) ** 2).sum(-1))
    easy = semi = hard = 0
    losses = []
    for a, p, n in itertools.product(range(len(labels)), repeat=3):
        if a == p or labels[a] != labels[p] or labels[a] == labels[n]:
            continue
        l = triplet_loss(d[a, p], d[a, n], margin)
        if l <= 0:
            easy += 1
        elif d[a, n] > d[a, p]:
            semi += 1
        else:
            hard += 1
        if l > 0:
            losses.append(l)
    return easy, semi, hard, (np.mean(losses) if losses else 0.0)


@settings(max_examples=40, deadline=None)
@given(st.integers(2, 12), st.integers(2, 4), st.integers(0, 2**31 - 1))
def test_mining_matches_enumeration(n, k, seed):
    rng = np.random.default_rng(seed)
    labels = rng.integers(0, k, size=n)
    emb = rng.normal(scale=0.3, size=(n, 3))
    easy, semi, hard, mean = exhaustive(emb, labels, 0.2)
    if easy + semi + hard == 0:
        with pytest.raises(DegenerateBatch):
            batch_all_triplet_loss(emb, labels, 0.2)
        return
    loss, report = batch_all_triplet_loss(emb, labels, 0.2)
    assert (report.easy, report.semi_hard, report.hard) == (easy, semi, hard)
    assert float(loss.data) == pytest.approx(mean, abs=1e-12)


def test_triplet_gradients():
    rng = np.random.default_rng(1)
    labels = [0, 0, 1, 1, 2, 2]
    for seed in range(3):
        x = np.random.default_rng(seed).normal(scale=0.2, size=(6, 4))
        err = T.grad_check(lambda t: batch_all_triplet_loss(t, labels, 0.2)[0], x)
        assert err < 1e-4


def test_cosine_examples():
    t = np.array([0.0, 1.0, 0.0])
    assert float(cosine_proximity_loss(t, t).data) == -1.0
    assert float(cosine_proximity_loss(np.array([1.0, 0.0, 0.0]), t).data) == 0.0
    for C in (2, 5, 10):
        onehot = np.eye(C)[0]
        got = float(cosine_proximity_loss(np.full(C, 1.0 / C), onehot).data)
        assert abs(got + 1 / np.sqrt(C)) < 1e-15


def test_cosine_zero_vector():
    with pytest.raises(ZeroVector):
        cosine_proximity_loss(np.zeros(3), np.eye(3)[0])
    with pytest.raises(ZeroVector):
        cosine_proximity_loss(np.ones(3), np.zeros(3))


def test_cosine_gradient():
    target = np.eye(4)[[1, 3]]
    x = np.random.default_rng(2).normal(size=(2, 4))
    assert T.grad_check(lambda t: cosine_proximity_loss(T.softmax(t), target), x) < 1e-4


def test_adam_zero_gradient():
    state = {}
    p = np.array([1.5, -2.0])
    out = adam_step(p, np.zeros(2), state)
    np.testing.assert_array_equal(out, p)
    assert not state["m"].any() and not state["v"].any()


def test_adam_first_step_magnitude():
    out = adam_step(np.array([0.0]), np.array([1.0]), {}, lr=1e-4)
    assert out[0] == pytest.approx(-1e-4, rel=1e-6)


def test_adam_two_steps_reference():
    lr, b1, b2, eps, g = 1e-3, 0.9, 0.999, 1e-8, 0.7
    p, m, v = 2.0, 0.0, 0.0
    for t in (1, 2):
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        p = p - lr * (m / (1 - b1 ** t)) / (np.sqrt(v / (1 - b2 ** t)) + eps)
    state = {}
    q = np.array([2.0])
    for _ in range(2):
        q = adam_step(q, np.array([g]), state, lr, b1, b2, eps)
    assert abs(q[0] - p) < 1e-12


def test_adam_class_skips_missing_grads():
    a = T.Tensor(np.ones(2), requires_grad=True)
    b = T.Tensor(np.ones(2), requires_grad=True)
    opt = Adam({"a": a, "b": b}, lr=0.1)
    a.grad = np.ones(2)
    opt.step()
    assert np.all(a.data < 1) and np.all(b.data == 1)


@settings(max_examples=30, deadline=None)
@given(st.floats(0, 5), st.floats(0, 5), st.floats(0.01, 2))
def test_triplet_loss_nonnegative_and_zero_iff_easy(d_ap, d_an, m):
    v = triplet_loss(d_ap, d_an, m)
    assert v >= 0
    assert (v == 0) == (d_an >= d_ap + m)


def test_cosine_range_and_scale_invariance():
    rng = np.random.default_rng(5)
    for _ in range(20):
        pred = rng.random(6) + 1e-3
        target = np.eye(6)[rng.integers(6)]
        base = float(cosine_proximity_loss(pred, target).data)
        assert -1.0 <= base <= 1.0
        for c in (1e-3, 2.0, 1e3):
            assert float(cosine_proximity_loss(pred * c, target).data) == pytest.approx(base, abs=1e-12)
