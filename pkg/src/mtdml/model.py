"""Sliced-embedding network with exact manual backpropagation.

Layout: a fully-connected ReLU backbone produces the shared feature g(x);
each slice i maps it linearly through its own matrix ``M_i`` and is
L2-normalized on its own; the normalized slices are concatenated and fed to
a softmax classifier (one shared head, or one head per slice in the
multitask variant).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .numerics import as_matrix, l2_normalize_backward, l2_normalize_rows


@dataclass
class SlicedModel:
    layer_widths: tuple[int, ...]  # input width followed by backbone widths
    n_slices: int
    slice_dim: int
    num_classes: int
    params: dict[str, np.ndarray]
    dropout_rate: float = 0.5
    multitask: bool = False
    meta: dict = field(default_factory=dict)

    @property
    def n_layers(self) -> int:
        return len(self.layer_widths) - 1

    @property
    def feature_dim(self) -> int:
        return self.layer_widths[-1]

    @property
    def embedding_dim(self) -> int:
        return self.n_slices * self.slice_dim

    @property
    def slice_bounds(self) -> list[tuple[int, int]]:
        return [(i * self.slice_dim, (i + 1) * self.slice_dim) for i in range(self.n_slices)]

    def head_names(self) -> list[tuple[str, str]]:
        if self.multitask:
            return [(f"Wc{i}", f"bc{i}") for i in range(self.n_slices)]
        return [("Wc", "bc")]

    def copy(self) -> "SlicedModel":
        return SlicedModel(self.layer_widths, self.n_slices, self.slice_dim, self.num_classes,
                           {k: v.copy() for k, v in self.params.items()}, self.dropout_rate,
                           self.multitask, dict(self.meta))


@dataclass
class ForwardTrace:
    inputs: np.ndarray
    pre_activations: list[np.ndarray]
    activations: list[np.ndarray]  # post-ReLU, post-dropout; last one is g(x)
    dropout_masks: list[np.ndarray | None]
    raw_slices: list[np.ndarray]
    slice_embeddings: list[np.ndarray]
    concat_embedding: np.ndarray
    logits: list[np.ndarray]  # one entry per classifier head

    @property
    def cnn_feature(self) -> np.ndarray:
        return self.activations[-1]


def init_model(layer_widths, n_slices: int, slice_dim: int, num_classes: int,
               rng: np.random.Generator, dropout_rate: float = 0.5,
               multitask: bool = False) -> SlicedModel:
    """He-uniform weights (bound sqrt(6 / fan_in)), zero biases."""
    widths = tuple(int(w) for w in layer_widths)
    if len(widths) < 2 or min(widths) < 1:
        raise ValueError(f"need input width plus at least one backbone width >= 1, got {widths}")
    if n_slices < 1 or slice_dim < 1 or num_classes < 2:
        raise ValueError("n_slices, slice_dim must be >= 1 and num_classes >= 2")
    if not 0.0 <= dropout_rate < 1.0:
        raise ValueError("dropout_rate must be in [0, 1)")

    def he(fan_in, fan_out):
        bound = np.sqrt(6.0 / fan_in)
        return rng.uniform(-bound, bound, size=(fan_in, fan_out))

    params: dict[str, np.ndarray] = {}
    for k in range(len(widths) - 1):
        params[f"W{k}"] = he(widths[k], widths[k + 1])
        params[f"b{k}"] = np.zeros(widths[k + 1])
    h = widths[-1]
    for i in range(n_slices):
        params[f"M{i}"] = he(h, slice_dim)
    if multitask:
        for i in range(n_slices):
            params[f"Wc{i}"] = he(slice_dim, num_classes)
            params[f"bc{i}"] = np.zeros(num_classes)
    else:
        params["Wc"] = he(n_slices * slice_dim, num_classes)
        params["bc"] = np.zeros(num_classes)
    return SlicedModel(widths, n_slices, slice_dim, num_classes, params, dropout_rate, multitask)


def forward(model: SlicedModel, X, mode: str = "eval", rng: np.random.Generator | None = None,
            masks: list[np.ndarray | None] | None = None) -> ForwardTrace:
    """Forward pass. ``train`` mode applies inverted dropout to backbone layers.

    Passing ``masks`` (e.g. from an earlier trace) replays those dropout masks
    instead of drawing new ones.
    """
    X = as_matrix(X)
    if X.shape[1] != model.layer_widths[0]:
        raise ValueError(f"input width {X.shape[1]} != model input width {model.layer_widths[0]}")
    if mode not in ("train", "eval"):
        raise ValueError(f"unknown mode {mode!r}")
    p = model.params
    drop = mode == "train" and model.dropout_rate > 0.0
    if drop and masks is None and rng is None:
        raise ValueError("train mode with dropout needs an rng or explicit masks")
    pre, acts, used_masks = [], [], []
    a = X
    for k in range(model.n_layers):
        z = a @ p[f"W{k}"] + p[f"b{k}"]
        a = np.maximum(z, 0.0)
        mask = None
        if masks is not None:
            mask = masks[k]
        elif drop:
            keep = 1.0 - model.dropout_rate
            mask = (rng.random(a.shape) < keep) / keep
        if mask is not None:
            a = a * mask
        pre.append(z)
        acts.append(a)
        used_masks.append(mask)
    g = acts[-1]
    raw = [g @ p[f"M{i}"] for i in range(model.n_slices)]
    emb = [l2_normalize_rows(r) for r in raw]
    concat = np.hstack(emb)
    if model.multitask:
        logits = [emb[i] @ p[f"Wc{i}"] + p[f"bc{i}"] for i in range(model.n_slices)]
    else:
        logits = [concat @ p["Wc"] + p["bc"]]
    return ForwardTrace(X, pre, acts, used_masks, raw, emb, concat, logits)


def backward(model: SlicedModel, trace: ForwardTrace, grad_slices, grad_logits) -> dict[str, np.ndarray]:
    """Parameter gradients given upstream gradients on slices and logits.

    ``grad_slices`` holds one batch x slice_dim matrix per slice (``None``
    means zero); ``grad_logits`` holds one matrix per classifier head (a bare
    matrix is accepted for the shared head).
    """
    p = model.params
    n = trace.inputs.shape[0]
    if isinstance(grad_logits, np.ndarray) or grad_logits is None:
        grad_logits = [grad_logits]
    heads = model.head_names()
    if len(grad_logits) != len(heads):
        raise ValueError(f"expected {len(heads)} logit gradients, got {len(grad_logits)}")
    if len(grad_slices) != model.n_slices:
        raise ValueError(f"expected {model.n_slices} slice gradients, got {len(grad_slices)}")
    grads: dict[str, np.ndarray] = {}

    g_emb = []
    for i, gs in enumerate(grad_slices):
        if gs is None:
            gs = np.zeros((n, model.slice_dim))
        gs = np.asarray(gs, dtype=np.float64)
        if gs.shape != (n, model.slice_dim):
            raise ValueError(f"slice gradient {i} has shape {gs.shape}, expected {(n, model.slice_dim)}")
        g_emb.append(gs.copy())

    for (wn, bn), gl, i in zip(heads, grad_logits, range(len(heads))):
        if gl is None:
            gl = np.zeros((n, model.num_classes))
        gl = np.asarray(gl, dtype=np.float64)
        if gl.shape != (n, model.num_classes):
            raise ValueError(f"logit gradient has shape {gl.shape}, expected {(n, model.num_classes)}")
        src = trace.slice_embeddings[i] if model.multitask else trace.concat_embedding
        grads[wn] = src.T @ gl
        grads[bn] = gl.sum(axis=0)
        back = gl @ p[wn].T
        if model.multitask:
            g_emb[i] += back
        else:
            for j, (lo, hi) in enumerate(model.slice_bounds):
                g_emb[j] += back[:, lo:hi]

    g_feat = np.zeros_like(trace.cnn_feature)
    for i in range(model.n_slices):
        g_raw = l2_normalize_backward(trace.raw_slices[i], g_emb[i])
        grads[f"M{i}"] = trace.cnn_feature.T @ g_raw
        g_feat += g_raw @ p[f"M{i}"].T

    g = g_feat
    for k in reversed(range(model.n_layers)):
        if trace.dropout_masks[k] is not None:
            g = g * trace.dropout_masks[k]
        g = g * (trace.pre_activations[k] > 0.0)
        a_in = trace.inputs if k == 0 else trace.activations[k - 1]
        grads[f"W{k}"] = a_in.T @ g
        grads[f"b{k}"] = g.sum(axis=0)
        if k > 0:
            g = g @ p[f"W{k}"].T
    return grads


@dataclass
class FusedEmbedding:
    matrix: np.ndarray
    bounds: list[tuple[int, int]]


def fuse_embedding(model: SlicedModel) -> FusedEmbedding:
    """Stack the slice matrices column-wise into one h x d matrix."""
    M = np.hstack([model.params[f"M{i}"] for i in range(model.n_slices)])
    return FusedEmbedding(M, model.slice_bounds)


def forward_fused(model: SlicedModel, fused: FusedEmbedding, X) -> tuple[np.ndarray, list[np.ndarray]]:
    """Eval-mode forward through one fused embedding layer.

    Returns the concatenated embedding and the logits of each head.
    """
    X = as_matrix(X)
    p = model.params
    a = X
    for k in range(model.n_layers):
        a = np.maximum(a @ p[f"W{k}"] + p[f"b{k}"], 0.0)
    raw = a @ fused.matrix
    emb = np.empty_like(raw)
    for lo, hi in fused.bounds:
        emb[:, lo:hi] = l2_normalize_rows(raw[:, lo:hi])
    if model.multitask:
        logits = [emb[:, lo:hi] @ p[f"Wc{i}"] + p[f"bc{i}"] for i, (lo, hi) in enumerate(fused.bounds)]
    else:
        logits = [emb @ p["Wc"] + p["bc"]]
    return emb, logits


def predict(model: SlicedModel, X) -> np.ndarray:
    """Eval-mode class predictions (majority vote across heads when multitask)."""
    from .evaluation import majority_vote

    trace = forward(model, X, "eval")
    votes = [np.argmax(lg, axis=1) for lg in trace.logits]
    return votes[0] if len(votes) == 1 else majority_vote(votes, model.num_classes)


# -- checkpoints ---------------------------------------------------------------

def _fmt(x: float) -> str:
    return format(float(x), ".17g")


def save_checkpoint(model: SlicedModel, path) -> None:
    """JSON checkpoint; floats written with 17 significant digits (bit-exact reload)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    header = {
        "layer_widths": list(model.layer_widths),
        "n_slices": model.n_slices,
        "slice_dim": model.slice_dim,
        "num_classes": model.num_classes,
        "dropout_rate": model.dropout_rate,
        "multitask": model.multitask,
        "meta": model.meta,
    }
    parts = [json.dumps(header, sort_keys=True)[:-1], ', "params": {']
    entries = []
    for name in sorted(model.params):
        arr = model.params[name]
        vals = ", ".join(_fmt(v) for v in arr.ravel())
        entries.append(f'"{name}": {{"shape": {json.dumps(list(arr.shape))}, "data": [{vals}]}}')
    parts.append(", ".join(entries))
    parts.append("}}\n")
    path.write_text("".join(parts), encoding="utf-8")


def load_checkpoint(path) -> SlicedModel:
    doc = json.loads(Path(path).read_text(encoding="utf-8"))
    params = {name: np.array(e["data"], dtype=np.float64).reshape(e["shape"])
              for name, e in doc["params"].items()}
    return SlicedModel(tuple(doc["layer_widths"]), doc["n_slices"], doc["slice_dim"],
                       doc["num_classes"], params, doc.get("dropout_rate", 0.5),
                       doc.get("multitask", False), doc.get("meta", {}))
