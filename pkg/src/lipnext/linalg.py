"""Dense matrix kernels: products, symmetric/skew parts, exponential, SVD.

Everything operates on 2-D ``numpy`` arrays.  The matrix exponential and the
SVD are written out here (scaling-and-squaring Taylor, one-sided Jacobi)
rather than delegated, so the optimizer and the oracles share one audited
code path.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

# Orthogonality tolerances: right after a polar retraction, and between them.
TOL_RETRACTED = 1e-6
TOL_BETWEEN = 1e-3

_EXP_SCALE_TARGET = 0.25
_EXP_TAYLOR_RTOL = 1e-16
_EXP_MAX_TERMS = 40

SVD_MAX_SWEEPS = 60
SVD_TOL = 1e-14


class LinalgError(ValueError):
    """Raised for malformed matrix arguments."""


class SVDConvergenceError(ArithmeticError):
    """Jacobi sweeps did not converge within the iteration cap."""


class RankDeficientError(LinalgError):
    pass


class OrthogonalityError(ValueError):
    """A matrix that should be orthogonal drifted beyond its tolerance."""


def _as_matrix(a, name="a") -> np.ndarray:
    a = np.asarray(a)
    if a.ndim != 2:
        raise LinalgError(f"{name} must be 2-D, got shape {a.shape}")
    return a


def _require_square(a, name="a") -> np.ndarray:
    a = _as_matrix(a, name)
    if a.shape[0] != a.shape[1]:
        raise LinalgError(f"{name} must be square, got shape {a.shape}")
    return a


def orthogonality_drift(x) -> float:
    """Return ``||X^T X - I||_F``."""
    x = _require_square(x, "x")
    g = x.T @ x
    g[np.diag_indices_from(g)] -= 1.0
    return float(np.linalg.norm(g))


@dataclass
class OrthogonalParam:
    """A square weight matrix living on the orthogonal manifold.

    ``tolerance`` is the drift allowed in the current regime: ``TOL_RETRACTED``
    right after a retraction, ``TOL_BETWEEN`` while FastExp steps accumulate.
    """

    value: np.ndarray
    tolerance: float = TOL_RETRACTED

    def __post_init__(self):
        self.value = _require_square(np.asarray(self.value, dtype=np.float64), "value")
        if not np.all(np.isfinite(self.value)):
            raise LinalgError("orthogonal parameter has non-finite entries")

    @property
    def d(self) -> int:
        return self.value.shape[0]

    def drift(self) -> float:
        return orthogonality_drift(self.value)

    def check(self, name: str = "parameter") -> None:
        drift = self.drift()
        if drift > self.tolerance:
            raise OrthogonalityError(
                f"{name}: orthogonality drift {drift:.3e} exceeds tolerance {self.tolerance:.1e}"
            )

    def copy(self) -> "OrthogonalParam":
        return OrthogonalParam(self.value.copy(), self.tolerance)


def matmul(a, b) -> np.ndarray:
    a = _as_matrix(a, "a")
    b = _as_matrix(b, "b")
    if a.shape[1] != b.shape[0]:
        raise LinalgError(f"dimension mismatch: {a.shape} x {b.shape}")
    return a @ b


def sym(a) -> np.ndarray:
    a = _require_square(a)
    return (a + a.T) / 2


def skew(a) -> np.ndarray:
    a = _require_square(a)
    return (a - a.T) / 2


def is_skew(a, tol: float = 1e-10) -> bool:
    a = _require_square(a)
    return float(np.linalg.norm(a + a.T)) / 2 <= tol


def frobenius_norm(a) -> float:
    return float(np.sqrt(np.sum(np.square(np.asarray(a, dtype=np.float64)))))


def matrix_exp(a) -> np.ndarray:
    """Matrix exponential by scaling and squaring with a Taylor core.

    ``a`` is scaled by ``2**-s`` until its Frobenius norm drops below 0.25,
    the Taylor series is summed until the next term is negligible at machine
    precision, and the result is squared ``s`` times.
    """
    a = _require_square(a)
    if not np.all(np.isfinite(a)):
        raise LinalgError("matrix_exp: non-finite entries")
    a = a.astype(np.float64, copy=False)
    n = a.shape[0]
    norm = frobenius_norm(a)
    s = 0
    if norm >= _EXP_SCALE_TARGET:
        s = int(math.floor(math.log2(norm / _EXP_SCALE_TARGET))) + 1
    scaled = a / (2.0**s)

    result = np.eye(n)
    term = np.eye(n)
    for k in range(1, _EXP_MAX_TERMS):
        term = term @ scaled / k
        result += term
        if frobenius_norm(term) < _EXP_TAYLOR_RTOL * frobenius_norm(result):
            break
    for _ in range(s):
        result = result @ result
    return result


def _round_robin(n: int):
    """Yield rounds of disjoint column pairs covering every pair once.

    Circle-method tournament; ``n`` must be even.  Pairs are normalised so
    the first index is the smaller one.
    """
    players = list(range(n))
    for _ in range(n - 1):
        half = n // 2
        left, right = players[:half], players[half:][::-1]
        p = np.array([min(i, j) for i, j in zip(left, right)])
        q = np.array([max(i, j) for i, j in zip(left, right)])
        yield p, q
        players = [players[0]] + [players[-1]] + players[1:-1]


def _complete_basis(u: np.ndarray, keep: np.ndarray) -> np.ndarray:
    """Replace columns of ``u`` not in ``keep`` by an orthonormal completion."""
    m, n = u.shape
    basis = [u[:, j] for j in range(n) if keep[j]]
    out = u.copy()
    candidates = iter(np.eye(m))
    for j in range(n):
        if keep[j]:
            continue
        while True:
            v = next(candidates).copy()
            for _ in range(2):
                for b in basis:
                    v -= (b @ v) * b
            nv = np.linalg.norm(v)
            if nv > 1e-8:
                v /= nv
                break
        basis.append(v)
        out[:, j] = v
    return out


def svd(a, max_sweeps: int = SVD_MAX_SWEEPS, tol: float = SVD_TOL):
    """One-sided (Hestenes) Jacobi SVD.

    Returns ``(U, s, V)`` with ``a = U @ diag(s) @ V.T`` and ``s`` sorted in
    descending order.  For ``m >= n`` the decomposition is thin (``U`` is
    ``m x n``); wide inputs are handled through the transpose.

    Column pairs are orthogonalised in round-robin order so that each round
    of disjoint rotations is applied as one vectorised update.  A sweep ends
    the iteration once every pair satisfies
    ``|u_p . u_q| <= tol * ||u_p|| ||u_q||``, or one of the two columns has
    shrunk below ``eps * ||a||_F`` (a numerically zero singular value).
    """
    a = _as_matrix(a)
    if not np.all(np.isfinite(a)):
        raise LinalgError("svd: non-finite entries")
    m, n = a.shape
    if m < n:
        u, s, v = svd(a.T, max_sweeps, tol)
        return v, s, u

    work = np.array(a, dtype=np.float64)
    vmat = np.eye(n)
    if n % 2:
        # dummy zero column keeps the tournament even; dropped afterwards
        work = np.hstack([work, np.zeros((m, 1))])
        vmat = np.pad(vmat, ((0, 1), (0, 1)))
    tiny = np.finfo(np.float64).tiny
    # columns below this squared norm are rounding noise of a zero singular value
    floor = max((np.finfo(np.float64).eps * float(np.linalg.norm(a))) ** 2, tiny)

    rounds = list(_round_robin(work.shape[1]))
    for _sweep in range(max_sweeps):
        rotated = False
        for p, q in rounds:
            up, uq = work[:, p], work[:, q]
            alpha = np.einsum("ij,ij->j", up, up)
            beta = np.einsum("ij,ij->j", uq, uq)
            gamma = np.einsum("ij,ij->j", up, uq)
            active = (np.abs(gamma) > tol * np.sqrt(alpha * beta)) & (np.minimum(alpha, beta) > floor)
            if not np.any(active):
                continue
            rotated = True
            p, q = p[active], q[active]
            alpha, beta, gamma = alpha[active], beta[active], gamma[active]
            zeta = (beta - alpha) / (2.0 * gamma)
            t = np.sign(zeta) / (np.abs(zeta) + np.sqrt(1.0 + zeta * zeta))
            t[zeta == 0] = 1.0
            c = 1.0 / np.sqrt(1.0 + t * t)
            sn = c * t
            for mat in (work, vmat):
                cp, cq = mat[:, p], mat[:, q]
                mat[:, p] = c * cp - sn * cq
                mat[:, q] = sn * cp + c * cq
        if not rotated:
            break
    else:
        raise SVDConvergenceError(f"one-sided Jacobi did not converge in {max_sweeps} sweeps")

    work, vmat = work[:, :n], vmat[:n, :n]
    s = np.sqrt(np.einsum("ij,ij->j", work, work))
    order = np.argsort(-s, kind="stable")
    s, work, vmat = s[order], work[:, order], vmat[:, order]
    smax = s[0] if n else 0.0
    keep = s > max(smax * n * np.finfo(np.float64).eps, tiny)
    u = np.zeros_like(work)
    u[:, keep] = work[:, keep] / s[keep]
    if not np.all(keep):
        u = _complete_basis(u, keep)
    return u, s, vmat


def polar_project(a) -> OrthogonalParam:
    """Closest orthogonal matrix to ``a`` in Frobenius norm (``U V^T``)."""
    a = _require_square(a)
    u, s, v = svd(a)
    if s[-1] <= 1e-12:
        raise RankDeficientError(f"polar_project: smallest singular value {s[-1]:.3e}")
    return OrthogonalParam(u @ v.T)


def random_orthogonal(d: int, seed=None) -> OrthogonalParam:
    """Haar-distributed orthogonal matrix from the QR of a Gaussian matrix.

    ``seed`` may be an integer or a ``numpy.random.Generator``.
    """
    if d < 1:
        raise LinalgError("random_orthogonal: d must be >= 1")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    g = rng.standard_normal((d, d))
    q, r = np.linalg.qr(g)
    signs = np.where(np.diag(r) < 0, -1.0, 1.0)
    return OrthogonalParam(q * signs)
