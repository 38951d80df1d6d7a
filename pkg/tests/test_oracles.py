import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from lipnext.oracles import (
    Kernel2D,
    circular_conv_matrix,
    direct_circular_conv,
    finite_diff_grad,
    isometry_check,
    rel_err,
    run_verify_suite,
    theorem1_enumerate,
)


def test_kernel_validation():
    with pytest.raises(ValueError):
        Kernel2D(np.ones((2, 3)))
    with pytest.raises(ValueError):
        Kernel2D(np.array([[np.inf]]))
    assert Kernel2D(np.eye(3)).k == 3


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000), st.integers(1, 3), st.integers(3, 6), st.integers(3, 6))
def test_conv_matrix_matches_direct_loops(seed, k, H, W):
    rng = np.random.default_rng(seed)
    kern = Kernel2D(rng.standard_normal((k, k)))
    x = rng.standard_normal((H, W))
    y = (circular_conv_matrix(kern, H, W) @ x.ravel()).reshape(H, W)
    assert np.max(np.abs(y - direct_circular_conv(kern, x))) < 1e-12


def test_conv_matrix_rejects_large_kernel():
    with pytest.raises(ValueError):
        circular_conv_matrix(Kernel2D(np.ones((5, 5))), 4, 4)


def test_one_hot_is_permutation():
    K = np.zeros((3, 3))
    K[1, 2] = 1
    op = circular_conv_matrix(Kernel2D(K), 4, 5)
    assert np.array_equal(op @ op.T, np.eye(20))
    assert np.all(op.sum(axis=0) == 1) and np.all(op.sum(axis=1) == 1)


@pytest.mark.parametrize(
    "entries,iso",
    [
        ([[0.0, -1.0], [0.0, 0.0]], True),
        ([[1 / np.sqrt(2), 1 / np.sqrt(2)], [0.0, 0.0]], False),
        ([[2.0]], False),
        ([[0.5, 0.5], [0.5, 0.5]], False),
    ],
)
def test_isometry_examples(entries, iso):
    kern = Kernel2D(np.array(entries))
    v = isometry_check(circular_conv_matrix(kern, 4, 4), kern, (4, 4))
    assert v.is_isometry is iso
    assert v.dft_agrees
    assert "singular value" in v.evidence and "DFT" in v.evidence


def test_averaging_kernel_has_unit_top_value():
    # rows sum to sqrt(2) here, so the constant image is stretched
    kern = Kernel2D(np.array([[1 / np.sqrt(2), 1 / np.sqrt(2)], [0.0, 0.0]]))
    v = isometry_check(circular_conv_matrix(kern, 4, 4))
    assert v.max_sv == pytest.approx(np.sqrt(2))
    assert v.min_sv == pytest.approx(0.0, abs=1e-12)
    assert v.dft_agrees is None


def test_isometry_check_rejects_non_square():
    with pytest.raises(ValueError):
        isometry_check(np.ones((2, 3)))


@pytest.mark.parametrize("k", [1, 2, 3])
@pytest.mark.parametrize("n", [4, 5])
def test_one_hot_characterisation(k, n):
    rep = theorem1_enumerate(k, n, n, trials=100, seed=k)
    assert rep.one_hot_checked == 2 * k * k
    assert rep.random_checked == 100
    assert rep.ok, rep.counterexamples[:1]


def test_small_grid_admits_dense_isometry():
    # When the kernel fills the whole period, dense orthogonal patterns such
    # as a 2x2 Hadamard kernel are isometries too: the one-hot
    # characterisation needs the grid to be larger than the kernel.
    kern = Kernel2D(0.5 * np.array([[1.0, 1.0], [1.0, -1.0]]))
    v = isometry_check(circular_conv_matrix(kern, 2, 2), kern, (2, 2))
    assert v.is_isometry and v.dft_agrees
    v4 = isometry_check(circular_conv_matrix(kern, 4, 4), kern, (4, 4))
    assert not v4.is_isometry


def test_finite_diff_examples():
    g = finite_diff_grad(lambda x: float(np.sum(x**2)), np.array([1.0, -2.0, 0.5]))
    assert np.max(np.abs(g - [2.0, -4.0, 1.0])) < 1e-8
    A = np.random.default_rng(0).standard_normal((3, 3))
    x = np.random.default_rng(1).standard_normal((3, 3))
    g = finite_diff_grad(lambda z: float(np.sum(A * np.sin(z))), x)
    assert rel_err(g, A * np.cos(x)) < 1e-8


def test_finite_diff_restores_point():
    x = np.array([1.0, 2.0])
    finite_diff_grad(lambda z: float(z @ z), x)
    assert x.tolist() == [1.0, 2.0]


def test_rel_err():
    assert rel_err(np.zeros(3), np.zeros(3)) == 0.0
    assert rel_err(np.array([1.0]), np.array([1.1])) == pytest.approx(0.1 / 1.1)


def test_verify_suite_all_pass():
    lines = []
    assert run_verify_suite(seed=0, out=lines.append)
    assert len(lines) == 6
    assert all(line.startswith("PASS ") for line in lines)
