"""Shared oracles for the test suite."""

import numpy as np

from mtdml.datagen import LabeledDataset
from mtdml.losses import triplet_loss_by_kind
from mtdml.model import backward, forward, init_model
from mtdml.numerics import pairwise_euclidean
from mtdml.trainer import batch_objective, units


def hinge_pattern(F, ts, tau, kind):
    a, p, n = ts.anchors, ts.positives, ts.negatives

    def d(i, j):
        return np.linalg.norm(F[i] - F[j], axis=1)

    pats = [d(a, p) - d(a, n) + tau > 0]
    if kind == "dual":
        pats.append(d(p, a) - d(p, n) + tau > 0)
    return pats


def full_objective(model, X, y, strategy, triplet_sets, masks=None):
    """Total loss at the model's current parameters with triplets held fixed,
    plus the branch pattern (ReLU signs and hinge activity)."""
    mode = "train" if masks is not None else "eval"
    trace = forward(model, X, mode, masks=masks)
    loss_fn = triplet_loss_by_kind(strategy.loss_kind)
    tot, *_ = batch_objective(model, strategy, trace, y, loss_fn, triplet_sets)
    pattern = [z > 0 for z in trace.pre_activations]
    for F, ts, tau in zip(units(strategy, trace), triplet_sets, strategy.taus):
        pattern.extend(hinge_pattern(F, ts, tau, strategy.loss_kind))
    return tot, pattern


def analytic_gradients(model, X, y, strategy, masks=None):
    mode = "train" if masks is not None else "eval"
    trace = forward(model, X, mode, masks=masks)
    loss_fn = triplet_loss_by_kind(strategy.loss_kind)
    tot, _, _, g_sl, g_lg, tsets = batch_objective(model, strategy, trace, y, loss_fn)
    return tot, backward(model, trace, g_sl, g_lg), tsets


def tiny_problem(rng, n_slices=2, slice_dim=4, hidden=(12, 8), C=3, batch=8, d_in=5,
                 multitask=False, dropout=0.0):
    model = init_model((d_in, *hidden), n_slices, slice_dim, C, rng, dropout, multitask)
    per = batch // C
    y = np.concatenate([np.repeat(np.arange(C), per), rng.integers(0, C, batch - per * C)])
    X = rng.standard_normal((batch, d_in))
    return model, X, y


def toy_dataset(rng, C=3, per_class=20, d=4, radius=4.0, scale=0.3):
    centers = rng.standard_normal((C, d))
    centers *= radius / np.linalg.norm(centers, axis=1, keepdims=True)
    X = np.concatenate([centers[c] + scale * rng.standard_normal((per_class, d)) for c in range(C)])
    return LabeledDataset(X, np.repeat(np.arange(C), per_class))


def brute_force_batch_hard(labels, D):
    out = []
    n = len(labels)
    for a in range(n):
        best_p, best_n = None, None
        for j in range(n):
            if j == a:
                continue
            if labels[j] == labels[a]:
                if best_p is None or D[a, j] > D[a, best_p]:
                    best_p = j
            else:
                if best_n is None or D[a, j] < D[a, best_n]:
                    best_n = j
        if best_p is not None and best_n is not None:
            out.append((a, best_p, best_n))
    return out


def random_batch(rng, n_max=64, c_min=2, c_max=7):
    n = int(rng.integers(2, n_max + 1))
    C = int(rng.integers(c_min, c_max + 1))
    labels = rng.integers(0, C, size=n)
    # coarse grid values so distance ties actually occur
    F = rng.integers(-3, 4, size=(n, int(rng.integers(1, 5)))).astype(float)
    return labels, pairwise_euclidean(F)


# -- default-set training runs, cached so acceptance checks can share them ------

ACCEPTANCE_LINES: list[str] = []
_RUN_CACHE: dict = {}


def default_run(name, seed, tau=None):
    """Train one strategy on the default synthetic set with the default
    settings and return (val accuracy, final mean triplet loss,
    per-epoch incomplete counts)."""
    from mtdml.cli import RunConfig, prepare_data
    from mtdml.trainer import train

    key = (name, tau, seed)
    if key not in _RUN_CACHE:
        cfg = RunConfig(strategy=name, tau=tau, seed=seed)
        tr, va, rng = prepare_data(cfg)
        _, hist = train(cfg.strategy_config(), cfg.model_config(), tr, cfg.optim_config(), rng, val=va)
        _RUN_CACHE[key] = (hist.epoch_val_acc[-1], hist.epoch_mean_triplet_loss(),
                           hist.epoch_incomplete_counts())
    return _RUN_CACHE[key]
