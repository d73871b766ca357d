"""Triplet, dual triplet, softmax cross-entropy and total losses with exact gradients."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .mining import TripletSet

DIST_EPS = 1e-12


@dataclass
class LossOutput:
    value: float
    grad: np.ndarray
    active_count: int
    empty: bool = False


def _dist_and_unit(F, i, j):
    """Distances between rows ``F[i]`` and ``F[j]`` and d(dist)/dF[i] per pair."""
    diff = F[i] - F[j]
    d = np.sqrt(np.einsum("ij,ij->i", diff, diff))
    safe = d >= DIST_EPS
    unit = np.zeros_like(diff)
    unit[safe] = diff[safe] / d[safe, None]
    return d, unit


def _hinge_terms(F, anchor, near, far, tau, scale, grad):
    """Accumulate ``scale * [d(anchor,near) - d(anchor,far) + tau]_+`` into grad.

    Returns the summed hinge and the number of active terms.
    """
    d_near, u_near = _dist_and_unit(F, anchor, near)
    d_far, u_far = _dist_and_unit(F, anchor, far)
    h = d_near - d_far + tau
    act = h > 0.0
    if act.any():
        a, n, f = anchor[act], near[act], far[act]
        un, uf = scale * u_near[act], scale * u_far[act]
        np.add.at(grad, a, un - uf)
        np.add.at(grad, n, -un)
        np.add.at(grad, f, uf)
    return float(np.sum(h[act])), int(act.sum())


def _check(F, triplets: TripletSet, tau):
    F = np.asarray(F, dtype=np.float64)
    if tau < 0:
        raise ValueError("margin must be non-negative")
    n = F.shape[0]
    for arr in (triplets.anchors, triplets.positives, triplets.negatives):
        if len(arr) and (arr.min() < 0 or arr.max() >= n):
            raise IndexError("triplet index out of range")
    return F


def triplet_loss(F, triplets: TripletSet, tau: float) -> LossOutput:
    """Mean of ``[d(a,p) - d(a,n) + tau]_+`` over the triplets."""
    F = _check(F, triplets, tau)
    grad = np.zeros_like(F)
    K = len(triplets)
    if K == 0:
        return LossOutput(0.0, grad, 0, empty=True)
    total, active = _hinge_terms(F, triplets.anchors, triplets.positives, triplets.negatives,
                                 tau, 1.0 / K, grad)
    return LossOutput(total / K, grad, active)


def dual_triplet_loss(F, triplets: TripletSet, tau: float) -> LossOutput:
    """Anchor-centred hinge plus its positive-centred mirror, averaged over 2K terms.

    The mirror term ``[d(p,a) - d(p,n) + tau]_+`` penalizes a negative that
    sits closer to the positive than the anchor does.
    """
    F = _check(F, triplets, tau)
    grad = np.zeros_like(F)
    K = len(triplets)
    if K == 0:
        return LossOutput(0.0, grad, 0, empty=True)
    a, p, n = triplets.anchors, triplets.positives, triplets.negatives
    s = 1.0 / (2 * K)
    t1, c1 = _hinge_terms(F, a, p, n, tau, s, grad)
    t2, c2 = _hinge_terms(F, p, a, n, tau, s, grad)
    return LossOutput((t1 + t2) * s, grad, c1 + c2)


def triplet_loss_by_kind(kind: str):
    if kind == "trad":
        return triplet_loss
    if kind == "dual":
        return dual_triplet_loss
    raise ValueError(f"unknown triplet loss kind {kind!r}")


def one_hot(labels, num_classes: int) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64)
    T = np.zeros((len(labels), num_classes))
    T[np.arange(len(labels)), labels] = 1.0
    return T


def softmax(logits) -> np.ndarray:
    z = np.asarray(logits, dtype=np.float64)
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def softmax_cross_entropy(logits, targets) -> LossOutput:
    """Mean cross-entropy of softmax(logits) against one-hot targets."""
    z = np.asarray(logits, dtype=np.float64)
    T = np.asarray(targets, dtype=np.float64)
    if z.shape != T.shape:
        raise ValueError(f"logits {z.shape} and targets {T.shape} differ in shape")
    ok = np.all((T == 0.0) | (T == 1.0), axis=1) & (T.sum(axis=1) == 1.0)
    if not ok.all():
        raise ValueError(f"target row {int(np.flatnonzero(~ok)[0])} is not one-hot")
    M = z.shape[0]
    if M == 0:
        return LossOutput(0.0, np.zeros_like(z), 0, empty=True)
    shifted = z - z.max(axis=1, keepdims=True)
    log_z = np.log(np.exp(shifted).sum(axis=1))
    cls = np.argmax(T, axis=1)
    rows = np.arange(M)
    nll = log_z - shifted[rows, cls]
    probs = np.exp(shifted - log_z[:, None])
    grad = probs.copy()
    # target entry set to minus the off-target mass so each row sums to ~0
    probs[rows, cls] = 0.0
    grad[rows, cls] = -probs.sum(axis=1)
    grad /= M
    return LossOutput(float(nll.mean()), grad, int(np.sum(nll > 0)))


def total_loss(slice_losses, softmax_value: float, lam: float) -> float:
    """``lam * sum(slice_losses) + softmax_value`` (all slice weights fixed at 1)."""
    if lam < 0:
        raise ValueError("lambda must be non-negative")
    return lam * math.fsum(float(v) for v in slice_losses) + float(softmax_value)
