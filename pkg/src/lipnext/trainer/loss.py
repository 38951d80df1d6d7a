"""Margin-augmented cross-entropy.

Each competitor logit is inflated by ``eps * ||V_y - V_j||``, which is the
worst case it can reach under an l2 perturbation of size ``eps`` through a
1-Lipschitz backbone.  Training on the inflated logits pushes the certified
margin up rather than just the clean one.
"""
from __future__ import annotations

import numpy as np


def _log_softmax(g: np.ndarray) -> np.ndarray:
    shifted = g - g.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def margin_loss(logits, labels, eps_train: float = 0.0, V=None, v_grad: bool = False):
    """Mean cross-entropy over radius-adjusted logits.

    Returns ``(loss, grad_logits)``, or ``(loss, grad_logits, grad_V)`` when
    ``v_grad`` is set (the gradient through the pair norms).
    """
    logits = np.asarray(logits, dtype=np.float64)
    single = logits.ndim == 1
    logits = np.atleast_2d(logits)
    labels = np.atleast_1d(np.asarray(labels))
    n, k = logits.shape
    if eps_train < 0:
        raise ValueError("eps_train must be non-negative")
    if labels.shape != (n,) or labels.dtype.kind not in "iu" or np.any((labels < 0) | (labels >= k)):
        raise ValueError(f"labels must be integers in [0, {k}) with one per row")

    rows = np.arange(n)
    g = logits.copy()
    if eps_train > 0:
        if V is None:
            raise ValueError("V is required when eps_train > 0")
        V = np.asarray(V, dtype=np.float64)
        diff = V[labels][:, None, :] - V[None, :, :]  # (n, k, C)
        norms = np.sqrt(np.einsum("nkc,nkc->nk", diff, diff))
        g += eps_train * norms  # label column adds 0
    logp = _log_softmax(g)
    loss = -float(np.mean(logp[rows, labels]))
    grad = np.exp(logp)
    grad[rows, labels] -= 1.0
    grad /= n
    out_grad = grad[0] if single else grad
    if not v_grad:
        return loss, out_grad
    gV = np.zeros_like(V) if V is not None else None
    if eps_train > 0:
        # d||V_y - V_j|| / dV_y = u, / dV_j = -u with u the unit difference
        safe = np.where(norms > 0, norms, 1.0)
        coef = eps_train * grad * (norms > 0) / safe  # (n, k)
        w = coef[:, :, None] * diff
        np.add.at(gV, labels, w.sum(axis=1))
        gV -= w.sum(axis=0)
    return loss, out_grad, gV
