"""Optimisation on the orthogonal manifold.

Riemannian gradient projection, the norm-adaptive truncated exponential
(``fast_exp``), plain Manifold Adam, and the stabilised variant with
tangent-space Lookahead and per-epoch polar retraction.  Parameters that are
not orthogonal use ordinary Adam (``adam_step``).
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .linalg import (
    TOL_BETWEEN,
    TOL_RETRACTED,
    LinalgError,
    OrthogonalParam,
    frobenius_norm,
    is_skew,
    matrix_exp,
    polar_project,
    skew,
    sym,
)

# Frobenius-norm thresholds selecting Taylor order 2 / 3 / 4 / exact.
FASTEXP_THRESHOLDS = (0.05, 0.25, 1.0)

DENOMINATORS = ("sqrt_v", "literal_v")


class NonFiniteGradientError(FloatingPointError):
    pass


@dataclass(frozen=True)
class OptimizerMode:
    """Switches for the stabilised optimizer.

    ``denominator="sqrt_v"`` divides the first moment by ``sqrt(v) + eps``
    (Adam semantics); ``"literal_v"`` divides by ``v + eps`` with no square
    root.  ``lookahead`` and ``retraction`` toggle the two stabilisers.
    """

    denominator: str = "sqrt_v"
    bias_correction: bool = True
    lookahead: bool = True
    retraction: bool = True

    def __post_init__(self):
        if self.denominator not in DENOMINATORS:
            raise ValueError(f"unknown denominator mode {self.denominator!r}; expected one of {DENOMINATORS}")


LITERAL_MODE = OptimizerMode(denominator="literal_v", bias_correction=False)


@dataclass
class ManifoldAdamState:
    m: np.ndarray
    v: np.ndarray
    B: np.ndarray
    x_slow: OrthogonalParam
    t: int = 0
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    k: int = 5
    n: int | None = None
    mode: OptimizerMode = field(default_factory=OptimizerMode)

    @classmethod
    def create(cls, x: OrthogonalParam, *, v0="inv_d", **hyper) -> "ManifoldAdamState":
        """Fresh state for ``x``.

        ``v0`` is the initial second moment: ``"inv_d"`` for ``1/d`` in every
        entry, ``"zero"``, or an explicit float.
        """
        d = x.d
        if v0 == "inv_d":
            v_init = 1.0 / d
        elif v0 == "zero":
            v_init = 0.0
        else:
            v_init = float(v0)
        state = cls(
            m=np.zeros((d, d)),
            v=np.full((d, d), v_init),
            B=np.zeros((d, d)),
            x_slow=x.copy(),
            **hyper,
        )
        if state.k <= 0:
            raise ValueError("lookahead period K must be positive")
        return state

    def arrays(self) -> dict[str, np.ndarray]:
        return {"m": self.m, "v": self.v, "B": self.B, "x_slow": self.x_slow.value}


def _check_grad(x: OrthogonalParam, grad) -> np.ndarray:
    grad = np.asarray(grad, dtype=np.float64)
    if grad.shape != x.value.shape:
        raise LinalgError(f"gradient shape {grad.shape} does not match parameter {x.value.shape}")
    if not np.all(np.isfinite(grad)):
        raise NonFiniteGradientError("non-finite gradient")
    return grad


def riemannian_grad(x: OrthogonalParam, euclid_grad) -> np.ndarray:
    """Project a Euclidean gradient onto the tangent space at ``x``."""
    X = x.value
    G = np.asarray(euclid_grad, dtype=np.float64)
    if G.shape != X.shape:
        raise LinalgError(f"gradient shape {G.shape} does not match parameter {X.shape}")
    return G - X @ sym(X.T @ G)


def fast_exp_order(norm: float) -> int | None:
    """Taylor order used by ``fast_exp`` at a given Frobenius norm (None = exact)."""
    for order, bound in zip((2, 3, 4), FASTEXP_THRESHOLDS):
        if norm < bound:
            return order
    return None


def fast_exp(a) -> np.ndarray:
    """Norm-adaptive truncated exponential of a skew-symmetric matrix.

    For skew ``A`` every power obeys ``||A^k||_F <= ||A||_F^k / 2^((k-1)/2)``
    (the spectral norm is at most ``||A||_F / sqrt 2``), so the truncation
    error of each branch sits below the next Taylor term ``||A||^(p+1)/(p+1)!``.
    """
    a = np.asarray(a, dtype=np.float64)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise LinalgError(f"fast_exp needs a square matrix, got {a.shape}")
    if not is_skew(a, 1e-10):
        raise LinalgError("fast_exp argument is not skew-symmetric")
    order = fast_exp_order(frobenius_norm(a))
    if order is None:
        return matrix_exp(a)
    eye = np.eye(a.shape[0])
    # Horner: I + A(I + A/2(I + A/3(I + A/4)))
    acc = eye
    for k in range(order, 0, -1):
        acc = eye + (a @ acc) / k
    return acc


def _adam_direction(state: ManifoldAdamState, step: int, mode: OptimizerMode) -> np.ndarray:
    m, v = state.m, state.v
    if mode.bias_correction:
        m = m / (1.0 - state.beta1**step)
        v = v / (1.0 - state.beta2**step)
    if mode.denominator == "sqrt_v":
        return m / (np.sqrt(v) + state.eps)
    return m / (v + state.eps)


def _update_moments(state: ManifoldAdamState, g: np.ndarray) -> None:
    state.m = state.beta1 * state.m + (1.0 - state.beta1) * g
    state.v = state.beta2 * state.v + (1.0 - state.beta2) * g * g


def manifold_adam_step(state: ManifoldAdamState, x: OrthogonalParam, euclid_grad) -> OrthogonalParam:
    """One step of plain Manifold Adam with the exact exponential.

    The Adam direction is pulled into the Lie algebra as ``skew(X^T D)`` so
    that ``X exp(-lr skew(X^T D))`` stays on the manifold.
    """
    g = riemannian_grad(x, _check_grad(x, euclid_grad))
    _update_moments(state, g)
    state.t += 1
    direction = _adam_direction(state, state.t, OptimizerMode())
    step = -state.lr * skew(x.value.T @ direction)
    out = OrthogonalParam(x.value @ matrix_exp(step), TOL_BETWEEN)
    state.x_slow = out.copy()
    return out


def stabilized_step(state: ManifoldAdamState, x: OrthogonalParam, euclid_grad) -> OrthogonalParam:
    """One step of Manifold Adam with FastExp and tangent-space Lookahead.

    Every ``K``-th step (``state.t + 1`` divisible by ``K``, counting from
    zero) the slow weight advances by ``FastExp(B/2)`` where ``B`` holds the
    last ``K`` skew updates, and the fast weight is reset to it.  Other steps
    move the fast weight by ``FastExp(delta)``.  Returns the new fast weight.
    """
    if state.k <= 0:
        raise ValueError("lookahead period K must be positive")
    mode = state.mode
    g = riemannian_grad(x, _check_grad(x, euclid_grad))
    _update_moments(state, g)
    index = state.t  # zero-based index of this step
    state.t += 1
    direction = _adam_direction(state, state.t, mode)
    delta = -state.lr * skew(x.value.T @ direction)

    if not mode.lookahead:
        out = OrthogonalParam(x.value @ fast_exp(delta), TOL_BETWEEN)
        state.x_slow = out.copy()
        return out

    state.B = state.B + delta
    if (index + 1) % state.k != 0:
        return OrthogonalParam(x.value @ fast_exp(delta), TOL_BETWEEN)
    state.x_slow = OrthogonalParam(state.x_slow.value @ fast_exp(state.B / 2), TOL_BETWEEN)
    state.B = np.zeros_like(state.B)
    return state.x_slow.copy()


def retraction_due(state: ManifoldAdamState) -> bool:
    """True when the step just taken closes an epoch of ``state.n`` steps."""
    return bool(state.n) and state.t % state.n == 0


def epoch_retraction(state: ManifoldAdamState, x: OrthogonalParam) -> OrthogonalParam:
    """Polar-project the fast weight and sync the slow weight to it.

    The moment estimates and the Lookahead buffer are left untouched.
    """
    out = polar_project(x.value)
    out.tolerance = TOL_RETRACTED
    state.x_slow = out.copy()
    return out


@dataclass
class AdamState:
    """Plain Adam state for unconstrained parameters."""

    m: np.ndarray
    v: np.ndarray
    t: int = 0
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def create(cls, param: np.ndarray, **hyper) -> "AdamState":
        return cls(m=np.zeros_like(param, dtype=np.float64), v=np.zeros_like(param, dtype=np.float64), **hyper)

    def arrays(self) -> dict[str, np.ndarray]:
        return {"m": self.m, "v": self.v}


def adam_step(state: AdamState, param: np.ndarray, grad) -> np.ndarray:
    grad = np.asarray(grad, dtype=np.float64)
    if grad.shape != param.shape:
        raise ValueError(f"gradient shape {grad.shape} does not match parameter {param.shape}")
    if not np.all(np.isfinite(grad)):
        raise NonFiniteGradientError("non-finite gradient")
    state.t += 1
    state.m = state.beta1 * state.m + (1.0 - state.beta1) * grad
    state.v = state.beta2 * state.v + (1.0 - state.beta2) * grad * grad
    m_hat = state.m / (1.0 - state.beta1**state.t)
    v_hat = state.v / (1.0 - state.beta2**state.t)
    return param - state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
