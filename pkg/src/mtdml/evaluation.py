"""Accuracy and confusion matrices, distance distributions, majority voting, feature export."""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .numerics import pairwise_euclidean

N_BINS = 64
HIST_RANGE = (0.0, 2.0)


@dataclass
class MetricsReport:
    overall_accuracy: float
    per_class_accuracy: list[float]
    confusion: list[list[int]]
    n_samples: int

    def to_dict(self) -> dict:
        return asdict(self)


def confusion(preds, labels, num_classes: int) -> MetricsReport:
    """Counts with rows indexed by the true class. Classes absent from
    ``labels`` get per-class accuracy 0."""
    preds = np.asarray(preds, dtype=np.int64)
    labels = np.asarray(labels, dtype=np.int64)
    if preds.shape != labels.shape:
        raise ValueError("preds and labels differ in length")
    if len(labels) == 0:
        raise ValueError("cannot score an empty prediction set")
    for name, arr in (("prediction", preds), ("label", labels)):
        if arr.min() < 0 or arr.max() >= num_classes:
            raise ValueError(f"{name} id outside [0, {num_classes})")
    cm = np.zeros((num_classes, num_classes), dtype=np.int64)
    np.add.at(cm, (labels, preds), 1)
    rows = cm.sum(axis=1)
    per_class = [float(cm[c, c] / rows[c]) if rows[c] else 0.0 for c in range(num_classes)]
    return MetricsReport(float(np.trace(cm) / cm.sum()), per_class, cm.tolist(), int(len(labels)))


def write_metrics(report: MetricsReport | dict, path) -> None:
    payload = report.to_dict() if isinstance(report, MetricsReport) else report
    Path(path).write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8")


@dataclass
class DistanceDistribution:
    slice_index: int
    tau: float | None
    bin_edges: np.ndarray
    intra_hist: np.ndarray
    inter_hist: np.ndarray
    intra_mean: float
    intra_std: float
    inter_mean: float
    inter_std: float
    empty: bool = False


def _stats(x):
    return (float(x.mean()), float(x.std())) if len(x) else (float("nan"), float("nan"))


def distance_distributions(slice_embeddings, labels, taus=None) -> list[DistanceDistribution]:
    """Histograms of same-class and cross-class pair distances, one per slice.

    64 bins over [0, 2]; a distance that overshoots 2 by rounding lands in
    the last bin.
    """
    labels = np.asarray(labels)
    edges = np.linspace(*HIST_RANGE, N_BINS + 1)
    out = []
    taus = list(taus) if taus is not None else [None] * len(slice_embeddings)
    for s, (F, tau) in enumerate(zip(slice_embeddings, taus)):
        n = len(labels)
        if n < 2:
            zero = np.zeros(N_BINS, dtype=np.int64)
            out.append(DistanceDistribution(s, tau, edges, zero, zero.copy(),
                                            float("nan"), float("nan"), float("nan"),
                                            float("nan"), empty=True))
            continue
        D = pairwise_euclidean(F)
        iu = np.triu_indices(n, k=1)
        d = D[iu]
        same = labels[iu[0]] == labels[iu[1]]
        intra, inter = d[same], d[~same]
        h_in = np.histogram(np.clip(intra, *HIST_RANGE), bins=edges)[0]
        h_out = np.histogram(np.clip(inter, *HIST_RANGE), bins=edges)[0]
        out.append(DistanceDistribution(s, tau, edges, h_in, h_out, *_stats(intra), *_stats(inter)))
    return out


def write_distributions(dists: list[DistanceDistribution], path) -> None:
    """CSV rows: slice, tau, kind (intra|inter), bin_lo, bin_hi, count."""
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["slice", "tau", "kind", "bin_lo", "bin_hi", "count"])
        for dd in dists:
            for kind, hist in (("intra", dd.intra_hist), ("inter", dd.inter_hist)):
                for b in range(len(hist)):
                    w.writerow([dd.slice_index, "" if dd.tau is None else repr(dd.tau), kind,
                                repr(float(dd.bin_edges[b])), repr(float(dd.bin_edges[b + 1])),
                                int(hist[b])])


def majority_vote(per_slice_predictions, num_classes: int | None = None) -> np.ndarray:
    """Modal class per sample across voters; ties go to the lowest class id."""
    votes = np.asarray(per_slice_predictions, dtype=np.int64)
    if votes.ndim != 2 or votes.shape[0] < 1:
        raise ValueError("need at least one voter with a prediction sequence")
    C = int(votes.max()) + 1 if num_classes is None else num_classes
    counts = np.zeros((votes.shape[1], C), dtype=np.int64)
    for row in votes:
        counts[np.arange(votes.shape[1]), row] += 1
    return np.argmax(counts, axis=1)


def export_slice_features(model, X, path) -> None:
    """Eval-mode slice embeddings as CSV: sample, slice, e0..e{d-1}."""
    from .model import forward

    trace = forward(model, X, "eval")
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["sample", "slice"] + [f"e{j}" for j in range(model.slice_dim)])
        for i in range(trace.concat_embedding.shape[0]):
            for s, emb in enumerate(trace.slice_embeddings):
                w.writerow([i, s] + [repr(float(v)) for v in emb[i]])


def read_slice_features(path) -> dict[tuple[int, int], np.ndarray]:
    out = {}
    with Path(path).open(newline="", encoding="utf-8") as fh:
        r = csv.reader(fh)
        next(r)
        for rec in r:
            out[(int(rec[0]), int(rec[1]))] = np.array([float(v) for v in rec[2:]])
    return out
