import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from lipnext.oracles import finite_diff_grad, rel_err
from lipnext.trainer.loss import margin_loss


def plain_ce(logits, labels):
    total = 0.0
    for row, y in zip(logits, labels):
        m = max(row)
        total += -(row[y] - m - np.log(sum(np.exp(v - m) for v in row)))
    return total / len(labels)


def test_eps_zero_is_cross_entropy():
    rng = np.random.default_rng(0)
    logits = rng.standard_normal((6, 5))
    y = rng.integers(0, 5, 6)
    assert margin_loss(logits, y)[0] == pytest.approx(plain_ce(logits, y), abs=1e-12)
    assert margin_loss(logits, y, 0.0, V=rng.standard_normal((5, 3)))[0] == pytest.approx(plain_ce(logits, y), abs=1e-12)


def test_uniform_logits():
    loss, grad = margin_loss(np.zeros((1, 4)), [2])
    assert loss == pytest.approx(np.log(4))
    assert np.allclose(grad, [[0.25, 0.25, -0.75, 0.25]], atol=1e-15)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000), st.floats(0.0, 2.0))
def test_margin_loss_dominates_ce(seed, eps):
    rng = np.random.default_rng(seed)
    logits = rng.standard_normal((4, 6))
    y = rng.integers(0, 6, 4)
    V = rng.standard_normal((6, 5))
    assert margin_loss(logits, y, eps, V)[0] >= plain_ce(logits, y) - 1e-12


def test_gradients_match_fd():
    rng = np.random.default_rng(3)
    logits = rng.standard_normal((5, 4))
    y = np.array([0, 1, 3, 3, 2])
    V = rng.standard_normal((4, 6))
    _, g, gV = margin_loss(logits, y, 0.4, V, v_grad=True)
    fd = finite_diff_grad(lambda z: margin_loss(z, y, 0.4, V)[0], logits)
    assert rel_err(fd, g) < 1e-8
    fdV = finite_diff_grad(lambda w: margin_loss(logits, y, 0.4, w)[0], V)
    assert rel_err(fdV, gV) < 1e-8


def test_v_grad_zero_without_margin():
    _, _, gV = margin_loss(np.zeros((2, 3)), [0, 1], 0.0, np.ones((3, 2)), v_grad=True)
    assert not np.any(gV)


def test_single_row():
    loss, grad = margin_loss(np.array([1.0, 0.0]), 0)
    assert grad.shape == (2,)
    assert loss == pytest.approx(np.log(1 + np.exp(-1)))


def test_errors():
    with pytest.raises(ValueError):
        margin_loss(np.zeros((2, 3)), [0, 3])
    with pytest.raises(ValueError):
        margin_loss(np.zeros((2, 3)), [0.0, 1.0])
    with pytest.raises(ValueError):
        margin_loss(np.zeros((2, 3)), [0, 1], eps_train=0.1)
    with pytest.raises(ValueError):
        margin_loss(np.zeros((2, 3)), [0, 1], eps_train=-1, V=np.ones((3, 2)))
