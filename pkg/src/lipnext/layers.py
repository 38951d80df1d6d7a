"""1-Lipschitz building blocks with hand-written reverse mode.

Feature maps are arrays of shape ``(..., H, W, C)`` (channels last, any number
of leading batch axes).  Each forward function that needs state for the
backward pass returns it explicitly; nothing is recorded globally.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .linalg import OrthogonalParam

PADDINGS = ("circular", "zero")
ACTIVATIONS = ("beta_abs", "minmax")


class PartitionError(ValueError):
    """Channel partition sizes are not integral or do not fit."""


class StaleCacheError(ValueError):
    pass


def _integral(value: float, what: str) -> int:
    n = int(round(value))
    if abs(value - n) > 1e-9:
        raise PartitionError(f"{what} = {value} is not an integer")
    return n


@dataclass(frozen=True)
class ShiftSpec:
    alpha: float = 1 / 16
    padding: str = "circular"

    def __post_init__(self):
        if self.padding not in PADDINGS:
            raise ValueError(f"padding must be one of {PADDINGS}, got {self.padding!r}")
        if self.alpha < 0:
            raise PartitionError("alpha must be non-negative")

    def partition(self, c: int, parts: int) -> int:
        """Size of each shifted partition; ``parts`` of them must fit in ``c``."""
        d = _integral(self.alpha * c, f"alpha*C (C={c})")
        if parts * d > c:
            raise PartitionError(f"{parts} partitions of {d} channels exceed C={c}")
        return d


@dataclass(frozen=True)
class ActivationSpec:
    beta: float = 0.75
    kind: str = "beta_abs"

    def __post_init__(self):
        if self.kind not in ACTIVATIONS:
            raise ValueError(f"activation must be one of {ACTIVATIONS}, got {self.kind!r}")
        if not 0.0 <= self.beta <= 1.0:
            raise ValueError("beta must lie in [0, 1]")

    def count(self, c: int) -> int:
        return _integral(self.beta * c, f"beta*C (C={c})")


# -- spatial shift ---------------------------------------------------------


def _roll(a: np.ndarray, axis: int, step: int, zero: bool, src: np.ndarray | None = None) -> None:
    """Roll ``src`` (default: ``a`` itself, in place) by +1/-1 along ``axis``
    into ``a``; with ``zero`` the wrapped slot is zeroed instead."""

    def at(sl):
        idx = [slice(None)] * a.ndim
        idx[axis] = sl
        return tuple(idx)

    inplace = src is None
    src = a if inplace else src
    if step == 1:
        edge = None if zero else src[at(-1)].copy()
        a[at(slice(1, None))] = src[at(slice(None, -1))]
        a[at(0)] = 0 if zero else edge
    else:
        edge = None if zero else src[at(0)].copy()
        a[at(slice(None, -1))] = src[at(slice(1, None))]
        a[at(-1)] = 0 if zero else edge


def shift_1d(x, spec: ShiftSpec) -> np.ndarray:
    """Shift a ``d x n`` sequence: first ``alpha*d`` rows right, next ``alpha*d`` left."""
    x = np.asarray(x)
    if x.ndim != 2:
        raise ValueError(f"shift_1d expects a d x n matrix, got {x.shape}")
    d = spec.partition(x.shape[0], 2)
    out = x.copy()
    if d == 0:
        return out
    zero = spec.padding == "zero"
    _roll(out[:d], 1, 1, zero)
    _roll(out[d : 2 * d], 1, -1, zero)
    return out


# (spatial axis, direction) for channel partitions 1..4 in a channels-first
# array (C, ..., H, W); partition 0 is fixed.
_SHIFTS_2D = ((-2, 1), (-2, -1), (-1, 1), (-1, -1))


def _shift_planes(x: np.ndarray, spec: ShiftSpec, adjoint: bool) -> np.ndarray:
    """In-place shift of a channels-first array ``(C, ..., H, W)``."""
    c = x.shape[0]
    d = spec.partition(c, 4)
    if d == 0:
        return x
    c0 = c - 4 * d
    zero = spec.padding == "zero"
    for i, (axis, step) in enumerate(_SHIFTS_2D):
        _roll(x[c0 + i * d : c0 + (i + 1) * d], axis, -step if adjoint else step, zero)
    return x


def shift_2d(x, spec: ShiftSpec, adjoint: bool = False) -> np.ndarray:
    """Five-way channel split ``[C-4d, d, d, d, d]`` of a ``(..., H, W, C)``
    map; partitions 1-4 roll by +1/-1 along H and +1/-1 along W.

    With ``adjoint=True`` the transpose is applied (opposite directions), which
    for circular padding is also the inverse.
    """
    x = np.asarray(x)
    if x.ndim < 3:
        raise ValueError(f"shift_2d expects (..., H, W, C), got {x.shape}")
    out = x.copy()
    _shift_planes(np.moveaxis(out, -1, 0), spec, adjoint)
    return out


# -- activations -----------------------------------------------------------


def beta_abs(x, spec: ActivationSpec) -> np.ndarray:
    x = np.asarray(x)
    k = spec.count(x.shape[-1])
    out = x.copy()
    np.abs(out[..., :k], out=out[..., :k])
    return out


def beta_abs_backward(x, grad, spec: ActivationSpec) -> np.ndarray:
    """Gradient through ``beta_abs`` evaluated at ``x``; sign(0) is taken as +1."""
    k = spec.count(x.shape[-1])
    out = np.array(grad, copy=True)
    out[..., :k] = np.where(x[..., :k] < 0, -out[..., :k], out[..., :k])
    return out


def minmax(x) -> np.ndarray:
    """Pairwise sort of the halves: ``(max(x1, x2), min(x1, x2))``."""
    x = np.asarray(x)
    n = x.shape[-1]
    if n % 2:
        raise ValueError(f"minmax needs an even length, got {n}")
    h = n // 2
    x1, x2 = x[..., :h], x[..., h:]
    return np.concatenate([np.maximum(x1, x2), np.minimum(x1, x2)], axis=-1)


def minmax_backward(x, grad) -> np.ndarray:
    h = x.shape[-1] // 2
    first = x[..., :h] >= x[..., h:]
    g1, g2 = grad[..., :h], grad[..., h:]
    return np.concatenate([np.where(first, g1, g2), np.where(first, g2, g1)], axis=-1)


def minmax_rotation(d: int) -> np.ndarray:
    """Orthogonal ``R`` with ``minmax(x) = R^T beta_abs(R x)`` at beta = 0.5."""
    eye = np.eye(d)
    return np.block([[eye, -eye], [eye, eye]]) / np.sqrt(2.0)


def _act_forward(z: np.ndarray, act: ActivationSpec):
    """Activation over axis 0 of a channels-first ``z``, in place where
    possible; returns ``(y, saved)`` where ``saved`` feeds the backward."""
    c = z.shape[0]
    if act.kind == "minmax":
        h = c // 2
        first = z[:h] >= z[h:]
        return np.concatenate([np.maximum(z[:h], z[h:]), np.minimum(z[:h], z[h:])]), first
    k = act.count(c)
    # copysign gives +1 at +0; z = Ws + b never holds -0 unless b does
    sgn = np.copysign(z.dtype.type(1), z[:k])
    np.abs(z[:k], out=z[:k])
    return z, sgn


def _act_backward(grad: np.ndarray, saved: np.ndarray, act: ActivationSpec, overwrite: bool = False) -> np.ndarray:
    if act.kind == "minmax":
        h = grad.shape[0] // 2
        g1, g2 = grad[:h], grad[h:]
        return np.concatenate([np.where(saved, g1, g2), np.where(saved, g2, g1)])
    k = saved.shape[0]
    out = grad if overwrite else grad.copy()
    out[:k] *= saved
    return out


# -- LipNeXt block ---------------------------------------------------------


@dataclass
class BlockParams:
    R: OrthogonalParam
    M: OrthogonalParam
    b: np.ndarray
    p: np.ndarray

    @property
    def channels(self) -> int:
        return self.R.d


class BlockGrads(NamedTuple):
    x: np.ndarray
    R: np.ndarray
    M: np.ndarray
    b: np.ndarray
    p: np.ndarray


@dataclass
class BlockCache:
    xp: np.ndarray  # channels-first (C, ..., H, W)
    s: np.ndarray
    saved: np.ndarray
    R: np.ndarray
    M: np.ndarray
    W: np.ndarray
    shift: ShiftSpec
    act: ActivationSpec
    channels_last: bool = False


def block_forward_cf(x: np.ndarray, params: BlockParams, shift: ShiftSpec, act: ActivationSpec):
    """Block on a channels-first map ``(C, ..., H, W)``; see ``lipnext_block_forward``."""
    c = params.channels
    if x.ndim < 3 or x.shape[0] != c:
        raise ValueError(f"block expects ({c}, ..., H, W), got {x.shape}")
    if params.p.shape != x.shape[-2:] + (1,):
        raise ValueError(f"positional embedding {params.p.shape} does not match grid {x.shape[-2:]}")
    dt = x.dtype
    R = params.R.value.astype(dt)
    M = params.M.value.astype(dt)
    W = (params.M.value @ params.R.value.T).astype(dt)

    xp = x + params.p[..., 0].astype(dt)
    s = (R @ xp.reshape(c, -1)).reshape(xp.shape)
    _shift_planes(s, shift, adjoint=False)
    z = (W @ s.reshape(c, -1)).reshape(xp.shape)
    z += params.b.astype(dt).reshape((c,) + (1,) * (z.ndim - 1))
    y, saved = _act_forward(z, act)
    return y, BlockCache(xp, s, saved, R, M, W, shift, act)


def block_backward_cf(cache: BlockCache, grad_out: np.ndarray, overwrite: bool = False) -> BlockGrads:
    """Reverse mode for ``block_forward_cf``; ``overwrite`` lets the pass use
    ``grad_out`` as scratch space."""
    grad_out = np.asarray(grad_out, dtype=cache.xp.dtype)
    if grad_out.shape != cache.xp.shape:
        raise StaleCacheError(f"gradient shape {grad_out.shape} does not match cached forward {cache.xp.shape}")
    c = cache.R.shape[0]
    gz = _act_backward(grad_out, cache.saved, cache.act, overwrite).reshape(c, -1)
    # reductions as products with a ones vector: BLAS is far faster than ufunc.reduce here
    gb = (gz @ np.ones(gz.shape[1], dtype=gz.dtype)).astype(np.float64)
    gW = (gz @ cache.s.reshape(c, -1).T).astype(np.float64)
    gu = (cache.W.T @ gz).reshape(cache.xp.shape)
    del gz
    _shift_planes(gu, cache.shift, adjoint=True)
    gu = gu.reshape(c, -1)
    R64 = cache.R.astype(np.float64)
    M64 = cache.M.astype(np.float64)
    gR = gW.T @ M64 + (gu @ cache.xp.reshape(c, -1).T).astype(np.float64)
    gM = gW @ R64
    gx = (cache.R.T @ gu).reshape(cache.xp.shape)
    hw = gx.shape[-2:]
    flat = gx.reshape(-1, hw[0] * hw[1])
    gp = (np.ones(flat.shape[0], dtype=gx.dtype) @ flat).astype(np.float64).reshape(hw + (1,))
    return BlockGrads(gx, gR, gM, gb, gp)


def lipnext_block_forward(x, params: BlockParams, shift: ShiftSpec, act: ActivationSpec):
    """``act(M R^T shift(R (x + p)) + b)`` applied at every spatial location
    of a ``(..., H, W, C)`` map.

    Computation runs in ``x.dtype``; parameters are cast to it.
    """
    x = np.asarray(x)
    c = params.channels
    if x.ndim < 3 or x.shape[-1] != c:
        raise ValueError(f"block expects (..., H, W, {c}), got {x.shape}")
    y, cache = block_forward_cf(np.ascontiguousarray(np.moveaxis(x, -1, 0)), params, shift, act)
    cache.channels_last = True
    return np.moveaxis(y, 0, -1).copy(), cache


def lipnext_block_backward(cache: BlockCache, grad_out) -> BlockGrads:
    """Reverse mode through one block (``grad_out`` shaped like the output).

    Returns Euclidean gradients; orthogonal parameters still need projecting
    onto the tangent space by the optimizer.
    """
    grad_out = np.asarray(grad_out)
    if cache.channels_last:
        if grad_out.ndim != cache.xp.ndim:
            raise StaleCacheError(f"gradient shape {grad_out.shape} does not match cached forward")
        grad_out = np.ascontiguousarray(np.moveaxis(grad_out, -1, 0))
    g = block_backward_cf(cache, grad_out, overwrite=True)
    if cache.channels_last:
        g = g._replace(x=np.moveaxis(g.x, 0, -1).copy())
    return g


# -- pooling, stem, head ---------------------------------------------------


def l2_spatial_pool(x) -> np.ndarray:
    """Per-channel Euclidean norm over the two spatial axes."""
    x = np.asarray(x)
    return np.sqrt(np.einsum("...hwc,...hwc->...c", x, x))


def l2_spatial_pool_backward(x, out, grad) -> np.ndarray:
    """Gradient of the pool; channels with zero norm get zero gradient."""
    safe = np.where(out > 0, out, 1)
    scale = np.where(out > 0, grad / safe, 0).astype(x.dtype)
    return x * scale[..., None, None, :]


def l2_pool_cf(x: np.ndarray) -> np.ndarray:
    """Pool of a channels-first map ``(C, ..., H, W)``; returns ``(..., C)``."""
    c = x.shape[0]
    flat = x.reshape(c, -1, x.shape[-2] * x.shape[-1])
    out = np.sqrt(np.einsum("cnk,cnk->nc", flat, flat))
    return out.reshape(x.shape[1:-2] + (c,))


def l2_pool_cf_backward(x: np.ndarray, out: np.ndarray, grad) -> np.ndarray:
    safe = np.where(out > 0, out, 1)
    scale = np.where(out > 0, grad / safe, 0).astype(x.dtype)
    return x * np.moveaxis(scale, -1, 0)[..., None, None]


def patchify(x, q: int) -> np.ndarray:
    """Space-to-depth: ``(..., H, W, C) -> (..., H/q, W/q, C*q*q)``."""
    x = np.asarray(x)
    *lead, h, w, c = x.shape
    if h % q or w % q:
        raise ValueError(f"grid {h}x{w} not divisible by patch size {q}")
    if q == 1:
        return x.copy()
    y = x.reshape(*lead, h // q, q, w // q, q, c)
    n = len(lead)
    y = y.transpose(*range(n), n, n + 2, n + 1, n + 3, n + 4)
    return y.reshape(*lead, h // q, w // q, q * q * c)


def unpatchify(y, q: int, c: int) -> np.ndarray:
    """Inverse (and adjoint) of ``patchify``."""
    y = np.asarray(y)
    if q == 1:
        return y.copy()
    *lead, hq, wq, _ = y.shape
    n = len(lead)
    x = y.reshape(*lead, hq, wq, q, q, c)
    x = x.transpose(*range(n), n, n + 2, n + 1, n + 3, n + 4)
    return x.reshape(*lead, hq * q, wq * q, c)


def channel_lift(x, target_c: int) -> np.ndarray:
    """Append zero channels up to ``target_c``."""
    x = np.asarray(x)
    c = x.shape[-1]
    if target_c < c:
        raise ValueError(f"cannot lift {c} channels down to {target_c}")
    out = np.zeros(x.shape[:-1] + (target_c,), dtype=x.dtype)
    out[..., :c] = x
    return out


def head_forward(z, V, c_bias) -> np.ndarray:
    z, V, c_bias = np.asarray(z), np.asarray(V), np.asarray(c_bias)
    if V.ndim != 2 or z.shape[-1] != V.shape[1] or c_bias.shape != (V.shape[0],):
        raise ValueError(f"head shapes disagree: z {z.shape}, V {V.shape}, bias {c_bias.shape}")
    return z @ V.T + c_bias


def head_backward(z, V, grad_logits):
    """Return ``(grad_z, grad_V, grad_bias)`` for ``logits = z V^T + c``."""
    z, g = np.asarray(z), np.asarray(grad_logits)
    if z.ndim == 1:
        return g @ V, np.outer(g, z), g.copy()
    return g @ V, g.T @ z, g.sum(axis=0)
