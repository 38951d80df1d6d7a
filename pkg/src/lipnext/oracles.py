"""Brute-force oracles: circulant convolution operators, isometry checks,
one-hot kernel enumeration, finite differences, and a runnable suite."""
from __future__ import annotations

import time
from dataclasses import dataclass, field
from itertools import product

import numpy as np

from .linalg import svd

ISOMETRY_TOL = 1e-9


@dataclass(frozen=True)
class Kernel2D:
    entries: np.ndarray

    def __post_init__(self):
        e = np.asarray(self.entries, dtype=np.float64)
        if e.ndim != 2 or e.shape[0] != e.shape[1] or e.shape[0] < 1:
            raise ValueError(f"kernel must be a non-empty k x k array, got {e.shape}")
        if not np.all(np.isfinite(e)):
            raise ValueError("kernel entries must be finite")
        object.__setattr__(self, "entries", e)

    @property
    def k(self) -> int:
        return self.entries.shape[0]

    def padded(self, H: int, W: int) -> np.ndarray:
        out = np.zeros((H, W))
        out[: self.k, : self.k] = self.entries
        return out


@dataclass
class IsometryVerdict:
    is_isometry: bool
    max_sv: float
    min_sv: float
    evidence: str = ""
    dft_agrees: bool | None = None


def direct_circular_conv(kernel: Kernel2D, x) -> np.ndarray:
    """``y[i, j] = sum_{a, b} K[a, b] x[(i + a) mod H, (j + b) mod W]`` by explicit loops."""
    x = np.asarray(x, dtype=np.float64)
    H, W = x.shape
    K = kernel.entries
    y = np.zeros((H, W))
    for i in range(H):
        for j in range(W):
            acc = 0.0
            for a in range(kernel.k):
                for b in range(kernel.k):
                    acc += K[a, b] * x[(i + a) % H, (j + b) % W]
            y[i, j] = acc
    return y


def circular_conv_matrix(kernel: Kernel2D, H: int, W: int) -> np.ndarray:
    """The ``HW x HW`` matrix of circular (cross-)correlation on a flattened grid."""
    if kernel.k > min(H, W):
        raise ValueError(f"kernel size {kernel.k} exceeds grid {H}x{W}")
    op = np.zeros((H * W, H * W))
    for i, j in product(range(H), range(W)):
        row = i * W + j
        for a, b in product(range(kernel.k), range(kernel.k)):
            op[row, ((i + a) % H) * W + (j + b) % W] += kernel.entries[a, b]
    return op


def _sv_verdict(op: np.ndarray, tol: float) -> IsometryVerdict:
    _, s, _ = svd(op)
    dev = np.abs(s - 1.0)
    worst = int(np.argmax(dev))
    return IsometryVerdict(
        bool(np.all(dev <= tol)), float(s[0]), float(s[-1]), f"singular value #{worst} = {s[worst]:.12g}"
    )


def dft_magnitudes(kernel: Kernel2D, H: int, W: int) -> np.ndarray:
    return np.abs(np.fft.fft2(kernel.padded(H, W)))


def isometry_check(op, kernel: Kernel2D | None = None, grid=None, tol: float = ISOMETRY_TOL) -> IsometryVerdict:
    """Isometry test from singular values; with ``kernel`` and ``grid`` also
    cross-checked against the DFT magnitudes of the zero-padded kernel (the
    circulant operator is diagonalised by the 2-D DFT)."""
    op = np.asarray(op, dtype=np.float64)
    if op.ndim != 2 or op.shape[0] != op.shape[1]:
        raise ValueError(f"isometry_check needs a square matrix, got {op.shape}")
    verdict = _sv_verdict(op, tol)
    if kernel is not None:
        H, W = grid
        mags = dft_magnitudes(kernel, H, W)
        dev = np.abs(mags - 1.0)
        dft_iso = bool(np.all(dev <= tol))
        verdict.dft_agrees = dft_iso == verdict.is_isometry
        u, v = np.unravel_index(int(np.argmax(dev)), dev.shape)
        verdict.evidence += f"; worst DFT frequency ({u}, {v}) |K^| = {mags[u, v]:.12g}"
    return verdict


@dataclass
class OneHotReport:
    k: int
    H: int
    W: int
    one_hot_checked: int = 0
    random_checked: int = 0
    counterexamples: list = field(default_factory=list)
    disagreements: list = field(default_factory=list)
    seconds: float = 0.0

    @property
    def ok(self) -> bool:
        return not self.counterexamples and not self.disagreements


def _random_non_one_hot(k: int, rng) -> np.ndarray:
    """A random kernel that is not a signed one-hot: either dense (>= 2
    nonzeros) or a single entry whose value is not +-1."""
    if k == 1 or rng.random() < 0.25:
        K = np.zeros((k, k))
        val = rng.uniform(0.05, 3.0) * rng.choice([-1.0, 1.0])
        while abs(abs(val) - 1.0) < 1e-3:
            val = rng.uniform(0.05, 3.0)
        K.flat[rng.integers(k * k)] = val
        return K
    K = rng.standard_normal((k, k))
    # keep at least two nonzeros
    K[np.abs(K) < 1e-6] = 0.1
    return K


def theorem1_enumerate(k: int, H: int, W: int, trials: int = 100, seed: int = 0) -> OneHotReport:
    """Every signed one-hot kernel must give an isometry; random other kernels must not."""
    t0 = time.perf_counter()
    rep = OneHotReport(k, H, W)
    for idx, sign in product(range(k * k), (1.0, -1.0)):
        K = np.zeros((k, k))
        K.flat[idx] = sign
        kern = Kernel2D(K)
        v = isometry_check(circular_conv_matrix(kern, H, W), kern, (H, W))
        rep.one_hot_checked += 1
        if not v.is_isometry:
            rep.counterexamples.append(("one-hot not isometric", K, v))
        if not v.dft_agrees:
            rep.disagreements.append(K)
    rng = np.random.default_rng(seed)
    for _ in range(trials):
        kern = Kernel2D(_random_non_one_hot(k, rng))
        v = isometry_check(circular_conv_matrix(kern, H, W), kern, (H, W))
        rep.random_checked += 1
        if v.is_isometry:
            rep.counterexamples.append(("non-one-hot isometric", kern.entries, v))
        if not v.dft_agrees:
            rep.disagreements.append(kern.entries)
    rep.seconds = time.perf_counter() - t0
    return rep


def finite_diff_grad(fn, point, step: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of a scalar function, one coordinate at a time."""
    if step <= 0:
        raise ValueError("step must be positive")
    x = np.array(point, dtype=np.float64)
    grad = np.zeros_like(x)
    for idx in np.ndindex(x.shape):
        old = x[idx]
        x[idx] = old + step
        fp = fn(x)
        x[idx] = old - step
        fm = fn(x)
        x[idx] = old
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise FloatingPointError(f"non-finite function value at coordinate {idx}")
        grad[idx] = (fp - fm) / (2 * step)
    return grad


def rel_err(a, b) -> float:
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    scale = max(float(np.linalg.norm(a)), float(np.linalg.norm(b)), 1e-12)
    return float(np.linalg.norm(a - b)) / scale


# -- the verify suite -----------------------------------------------------


@dataclass
class OracleResult:
    name: str
    passed: bool
    residual: float
    detail: str = ""

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return f"{status} {self.name}: worst residual {self.residual:.3e} {self.detail}".rstrip()


def _check_one_hot_isometries(seed: int) -> OracleResult:
    worst_detail, n_bad, worst = "", 0, 0.0
    for k, n in product((1, 2, 3), (4, 5)):
        rep = theorem1_enumerate(k, n, n, trials=100, seed=seed + k)
        n_bad += len(rep.counterexamples) + len(rep.disagreements)
        for K in (e[1] for e in rep.counterexamples):
            worst_detail = f"counterexample k={k} H=W={n}: {K.tolist()}"
        # residual: largest singular-value deviation among one-hot kernels
        for idx in range(k * k):
            K = np.zeros((k, k))
            K.flat[idx] = 1.0
            s = svd(circular_conv_matrix(Kernel2D(K), n, n))[1]
            worst = max(worst, float(np.max(np.abs(s - 1))))
    return OracleResult("one-hot shift kernels are the only isometries", n_bad == 0, worst, worst_detail)


def _check_minmax_identity(seed: int) -> OracleResult:
    from .layers import ActivationSpec, beta_abs, minmax, minmax_rotation

    rng = np.random.default_rng(seed)
    worst = 0.0
    for d in (1, 4, 16):
        R = minmax_rotation(d)
        x = rng.standard_normal((10_000, 2 * d))
        rhs = beta_abs(x @ R.T, ActivationSpec(0.5)) @ R
        worst = max(worst, float(np.max(np.abs(minmax(x) - rhs))))
    return OracleResult("minmax = R^T beta_abs(R x)", worst <= 1e-12, worst)


def _check_fastexp(seed: int) -> OracleResult:
    from .linalg import matrix_exp
    from .manifold import fast_exp

    rng = np.random.default_rng(seed)
    worst_ratio = 0.0
    for lo, hi, order in ((0.0, 0.05, 2), (0.05, 0.25, 3), (0.25, 1.0, 4)):
        for _ in range(100):
            g = rng.standard_normal((16, 16))
            a = g - g.T
            a *= rng.uniform(lo, hi) / np.linalg.norm(a)
            nrm = np.linalg.norm(a)
            bound = nrm ** (order + 1) / np.prod(np.arange(1, order + 2))
            err = np.linalg.norm(fast_exp(a) - matrix_exp(a))
            worst_ratio = max(worst_ratio, err / bound if bound > 0 else 0.0)
    return OracleResult("fastexp within next-term Taylor remainder", worst_ratio <= 1.0, worst_ratio, "(ratio err/bound)")


def _check_conv_matrix(seed: int) -> OracleResult:
    rng = np.random.default_rng(seed)
    kern = Kernel2D(rng.standard_normal((3, 3)))
    op = circular_conv_matrix(kern, 4, 4)
    worst = 0.0
    for _ in range(20):
        x = rng.standard_normal((4, 4))
        worst = max(worst, float(np.max(np.abs(op @ x.ravel() - direct_circular_conv(kern, x).ravel()))))
    return OracleResult("circulant operator = direct convolution", worst <= 1e-12, worst)


def _check_block_grads(seed: int) -> OracleResult:
    from .model import LipNeXt, ModelSpec

    spec = ModelSpec(depth=2, width=8, alpha=1 / 8, beta=0.5, patch=1, n_classes=3, input_shape=(2, 2, 2))
    model = LipNeXt.init(spec, seed)
    rng = np.random.default_rng(seed)
    for b in model.blocks:
        b.b = 0.3 * rng.standard_normal(b.b.shape)
        b.p = 0.3 * rng.standard_normal(b.p.shape)
    x = rng.standard_normal((2,) + spec.input_shape)
    w = rng.standard_normal((2, spec.n_classes))
    _, cache = model.forward_train(x)
    grads = model.backward(cache, w)
    worst = 0.0
    for name in model.parameter_names():
        val = model.get(name)
        arr = val.value if hasattr(val, "value") else val
        orig = arr.copy()

        def loss(p):
            arr[...] = p
            return float(np.sum(model.logits(x) * w))

        fd = finite_diff_grad(loss, orig)
        arr[...] = orig
        worst = max(worst, rel_err(fd, grads[name]))
    return OracleResult("manual backward = finite differences", worst <= 1e-4, worst, "(relative)")


def _check_lipschitz(seed: int) -> OracleResult:
    from .certify import empirical_lipschitz_lower_bound
    from .model import LipNeXt, ModelSpec

    spec = ModelSpec(depth=2, width=16, alpha=1 / 16, patch=1, input_shape=(4, 4, 1))
    model = LipNeXt.init(spec, seed)
    ratio = empirical_lipschitz_lower_bound(model, trials=200, seed=seed)
    return OracleResult("backbone empirical Lipschitz <= 1", ratio <= 1 + 1e-6, ratio, "(max distance ratio)")


ORACLES = (
    _check_one_hot_isometries,
    _check_minmax_identity,
    _check_fastexp,
    _check_conv_matrix,
    _check_block_grads,
    _check_lipschitz,
)


def run_verify_suite(seed: int = 0, out=print) -> bool:
    ok = True
    for check in ORACLES:
        res = check(seed)
        out(res.line())
        ok &= res.passed
    return ok
