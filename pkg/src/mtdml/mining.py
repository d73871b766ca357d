"""PK batch planning, Batch-Hard triplet mining and the incomplete-judgement audit."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .numerics import pairwise_euclidean


class BatchPlanError(ValueError):
    pass


@dataclass
class BatchPlan:
    P: int
    K: int
    index_lists: list[np.ndarray]

    def __len__(self) -> int:
        return len(self.index_lists)


@dataclass
class TripletSet:
    anchors: np.ndarray
    positives: np.ndarray
    negatives: np.ndarray
    tau: float | None = None
    no_negatives: bool = False

    def __len__(self) -> int:
        return len(self.anchors)

    def as_tuples(self) -> list[tuple[int, int, int]]:
        return [(int(a), int(p), int(n)) for a, p, n in zip(self.anchors, self.positives, self.negatives)]

    @classmethod
    def empty(cls, tau=None, no_negatives=False) -> "TripletSet":
        z = np.zeros(0, dtype=np.int64)
        return cls(z, z.copy(), z.copy(), tau, no_negatives)


def plan_batches(labels, P: int, K: int, rng: np.random.Generator) -> BatchPlan:
    """One epoch of P-classes-by-K-samples batches, drawn without replacement.

    Each class's indices are shuffled and cut into chunks of K (leftovers
    dropped). Batches are then filled by picking P distinct classes that
    still hold chunks, favouring those with the most chunks left, ties
    resolved at random.
    """
    labels = np.asarray(labels, dtype=np.int64)
    if P < 2 or K < 2:
        raise BatchPlanError("Batch-Hard needs P >= 2 and K >= 2")
    classes = np.unique(labels)
    counts = {int(c): int(np.sum(labels == c)) for c in classes}
    eligible = [c for c in counts if counts[c] >= K]
    if len(eligible) < P:
        short = sorted((c for c in counts if counts[c] < K), key=lambda c: (counts[c], c))
        if short:
            c = short[0]
            raise BatchPlanError(
                f"class {c} has {counts[c]} samples, fewer than K={K}; "
                f"only {len(eligible)} classes can fill a batch but P={P}")
        raise BatchPlanError(f"only {len(eligible)} classes present, P={P} requested")

    chunks: dict[int, list[np.ndarray]] = {}
    for c in eligible:
        idx = rng.permutation(np.flatnonzero(labels == c))
        n_chunks = len(idx) // K
        chunks[c] = [idx[j * K:(j + 1) * K] for j in range(n_chunks)]

    batches = []
    while True:
        avail = [c for c in eligible if chunks[c]]
        if len(avail) < P:
            break
        jitter = rng.random(len(avail))
        order = sorted(range(len(avail)), key=lambda j: (-len(chunks[avail[j]]), jitter[j]))
        picked = sorted(avail[j] for j in order[:P])
        batches.append(np.concatenate([chunks[c].pop() for c in picked]))
    return BatchPlan(P, K, batches)


def batch_hard(labels, D) -> TripletSet:
    """Hardest positive (farthest) and hardest negative (nearest) per anchor.

    Ties go to the lowest index. Anchors without an in-batch positive are
    skipped; if no anchor has a negative the result is empty and flagged.
    """
    labels = np.asarray(labels)
    D = np.asarray(D, dtype=np.float64)
    n = len(labels)
    if D.shape != (n, n):
        raise ValueError(f"distance matrix shape {D.shape} does not match {n} labels")
    same = labels[:, None] == labels[None, :]
    pos_mask = same & ~np.eye(n, dtype=bool)
    neg_mask = ~same
    has_pos = pos_mask.any(axis=1)
    has_neg = neg_mask.any(axis=1)
    if n == 0 or not has_neg.any():
        return TripletSet.empty(no_negatives=True)
    keep = has_pos & has_neg
    pos_d = np.where(pos_mask, D, -np.inf)
    neg_d = np.where(neg_mask, D, np.inf)
    p = np.argmax(pos_d, axis=1)
    q = np.argmin(neg_d, axis=1)
    a = np.flatnonzero(keep)
    return TripletSet(a.astype(np.int64), p[a].astype(np.int64), q[a].astype(np.int64))


def mine(embeddings, labels, tau: float | None = None) -> TripletSet:
    """Batch-Hard on the Euclidean distances of ``embeddings``."""
    ts = batch_hard(labels, pairwise_euclidean(embeddings))
    ts.tau = tau
    return ts


@dataclass
class AuditResult:
    count: int
    flagged: np.ndarray
    d_ap: np.ndarray
    d_an: np.ndarray
    d_pn: np.ndarray
    tau: float
    mask: np.ndarray = field(repr=False, default=None)


def _row_dist(F, i, j):
    diff = F[i] - F[j]
    return np.sqrt(np.einsum("ij,ij->i", diff, diff))


def audit_incomplete(F, triplets: TripletSet, tau: float) -> AuditResult:
    """Flag triplets whose anchor-side margin holds while the positive-side one fails.

    A triplet is flagged when ``d(a,n) >= d(a,p) + tau`` and
    ``d(p,n) < d(p,a) + tau``.
    """
    F = np.asarray(F, dtype=np.float64)
    a, p, n = triplets.anchors, triplets.positives, triplets.negatives
    d_ap, d_an, d_pn = _row_dist(F, a, p), _row_dist(F, a, n), _row_dist(F, p, n)
    mask = (d_an >= d_ap + tau) & (d_pn < d_ap + tau)
    flagged = np.flatnonzero(mask)
    return AuditResult(int(len(flagged)), flagged, d_ap, d_an, d_pn, float(tau), mask)
