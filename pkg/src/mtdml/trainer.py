"""Multi-threshold training loop and the ablation strategy table."""

from __future__ import annotations

import math
import time
from dataclasses import asdict, dataclass, field
from decimal import Decimal
from typing import Callable

import numpy as np

from .datagen import LabeledDataset
from .evaluation import MetricsReport, confusion
from .losses import one_hot, softmax_cross_entropy, total_loss, triplet_loss_by_kind
from .mining import BatchPlanError, audit_incomplete, mine, plan_batches
from .model import SlicedModel, backward, forward, init_model, predict
from .numerics import Adam, NonFiniteError


class ScheduleError(ValueError):
    pass


class TrainingAborted(RuntimeError):
    def __init__(self, message: str, iteration: int | None = None):
        super().__init__(message)
        self.iteration = iteration


# -- thresholds -----------------------------------------------------------------

@dataclass(frozen=True)
class ThresholdSchedule:
    tau_min: float
    tau_max: float
    dtau: float
    thresholds: tuple[float, ...]

    @property
    def n(self) -> int:
        return len(self.thresholds)


def sample_thresholds(tau_min: float, tau_max: float, dtau: float) -> ThresholdSchedule:
    """Evenly spaced margins ``tau_min + dtau * (i - 1)``, i = 1..N.

    Arithmetic is done in decimal on the shortest repr of each input, so
    (0.15, 0.75, 0.1) yields exactly the floats 0.15, 0.25, ..., 0.75.
    """
    lo, hi = Decimal(repr(float(tau_min))), Decimal(repr(float(tau_max)))
    if lo < 0 or hi < lo:
        raise ScheduleError(f"need 0 <= tau_min <= tau_max, got ({tau_min}, {tau_max})")
    if hi == lo:
        return ThresholdSchedule(float(tau_min), float(tau_max), float(dtau), (float(lo),))
    step = Decimal(repr(float(dtau)))
    if step <= 0:
        raise ScheduleError("dtau must be positive when tau_max > tau_min")
    q = (hi - lo) / step
    k = q.to_integral_value()
    if abs(q - k) > Decimal("1e-9"):
        raise ScheduleError(
            f"non-integral N: ({tau_max} - {tau_min}) / {dtau} = {float(q):.6g}, "
            f"fractional remainder {float(q - q.to_integral_value(rounding='ROUND_FLOOR')):.6g}")
    n = int(k) + 1
    return ThresholdSchedule(float(tau_min), float(tau_max), float(dtau),
                             tuple(float(lo + step * i) for i in range(n)))


# -- strategies -----------------------------------------------------------------

STRATEGIES = (
    "S-Trad-Triplet", "S-Dual-Triplet", "S-DML", "Mul-DML-Same", "Mul-DML", "CNN-only",
    "Mul-DML-Multask", "Mul-DML-Multask-Same", "CNN-Multask",
)


@dataclass(frozen=True)
class StrategyConfig:
    name: str
    n_slices: int
    taus: tuple[float, ...]  # one margin per triplet-supervised unit
    loss_kind: str = "dual"
    whole_layer: bool = False  # one loss on the full concatenated embedding
    multitask: bool = False

    @property
    def n_units(self) -> int:
        return len(self.taus)

    @property
    def lam(self) -> float:
        return 0.5 / self.n_units if self.n_units else 0.0


def make_strategy(name: str, schedule: ThresholdSchedule | None = None, tau: float | None = None,
                  loss_kind: str | None = None) -> StrategyConfig:
    """Build the slice/threshold layout of a named training strategy.

    ``schedule`` fixes the slice count (and margins for Mul-DML variants);
    ``tau`` is the single margin used by the single-threshold strategies.
    """
    if name not in STRATEGIES:
        raise ValueError(f"unknown strategy {name!r}; choose from {', '.join(STRATEGIES)}")
    n = schedule.n if schedule is not None else 1
    needs_tau = name in ("S-Trad-Triplet", "S-Dual-Triplet", "S-DML", "Mul-DML-Same",
                         "Mul-DML-Multask-Same")
    if needs_tau and tau is None:
        raise ValueError(f"strategy {name} needs a single margin tau")
    if name in ("Mul-DML", "Mul-DML-Multask") and schedule is None:
        raise ValueError(f"strategy {name} needs a threshold schedule")
    if name == "S-Trad-Triplet":
        return StrategyConfig(name, 1, (tau,), loss_kind or "trad")
    if name == "S-Dual-Triplet":
        return StrategyConfig(name, 1, (tau,), loss_kind or "dual")
    if name == "S-DML":
        return StrategyConfig(name, n, (tau,), loss_kind or "dual", whole_layer=True)
    if name == "Mul-DML-Same":
        return StrategyConfig(name, n, (tau,) * n, loss_kind or "dual")
    if name == "Mul-DML":
        return StrategyConfig(name, n, schedule.thresholds, loss_kind or "dual")
    if name == "CNN-only":
        return StrategyConfig(name, 1, (), loss_kind or "dual")
    if name == "Mul-DML-Multask":
        return StrategyConfig(name, n, schedule.thresholds, loss_kind or "dual", multitask=True)
    if name == "Mul-DML-Multask-Same":
        return StrategyConfig(name, n, (tau,) * n, loss_kind or "dual", multitask=True)
    return StrategyConfig(name, n, (), loss_kind or "dual", multitask=True)


@dataclass
class ModelConfig:
    hidden: tuple[int, ...] = (256, 512)
    slice_dim: int = 256
    dropout: float = 0.0


@dataclass
class OptimConfig:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    epochs: int = 30
    P: int | None = None  # None: every class in each batch
    K: int = 12
    audit_rows: str = "final"  # which epochs keep per-triplet audit rows: all|final|none


# -- history --------------------------------------------------------------------

@dataclass
class RunHistory:
    strategy: str
    taus: list[float]
    lam: float
    iter_epoch: list[int] = field(default_factory=list)
    total_loss: list[float] = field(default_factory=list)
    triplet_losses: list[list[float]] = field(default_factory=list)
    softmax_loss: list[float] = field(default_factory=list)
    incomplete: list[list[int]] = field(default_factory=list)
    n_triplets: list[list[int]] = field(default_factory=list)
    epoch_train_acc: list[float] = field(default_factory=list)
    epoch_val_acc: list[float] = field(default_factory=list)
    epoch_val_total: list[float] = field(default_factory=list)
    epoch_val_triplet: list[float] = field(default_factory=list)
    epoch_val_softmax: list[float] = field(default_factory=list)
    epoch_seconds: list[float] = field(default_factory=list)
    audit_rows: list[tuple] = field(default_factory=list)
    best_epoch: int = -1

    @property
    def n_epochs(self) -> int:
        return len(self.epoch_train_acc)

    def _epoch_slice(self, epoch: int) -> slice:
        it = np.asarray(self.iter_epoch)
        idx = np.flatnonzero(it == epoch)
        return slice(int(idx[0]), int(idx[-1]) + 1) if len(idx) else slice(0, 0)

    def epoch_mean_triplet_loss(self, epoch: int = -1) -> float:
        """Mean over the epoch's iterations of the mean per-unit triplet loss."""
        epoch = epoch % self.n_epochs
        rows = self.triplet_losses[self._epoch_slice(epoch)]
        if not rows or not rows[0]:
            return 0.0
        return float(np.mean([np.mean(r) for r in rows]))

    def epoch_incomplete(self, epoch: int = -1) -> int:
        epoch = epoch % self.n_epochs
        return int(sum(sum(r) for r in self.incomplete[self._epoch_slice(epoch)]))

    def epoch_incomplete_counts(self) -> list[int]:
        return [self.epoch_incomplete(e) for e in range(self.n_epochs)]

    def to_dict(self, include_timing: bool = True) -> dict:
        d = asdict(self)
        d.pop("audit_rows")
        if not include_timing:
            d.pop("epoch_seconds")
        d["epoch_mean_triplet_loss"] = [self.epoch_mean_triplet_loss(e) for e in range(self.n_epochs)]
        d["epoch_incomplete"] = self.epoch_incomplete_counts()
        return d


# -- training -------------------------------------------------------------------

def units(strategy: StrategyConfig, trace):
    if strategy.whole_layer:
        return [trace.concat_embedding]
    return trace.slice_embeddings[:strategy.n_units]


def batch_objective(model, strategy, trace, y, loss_fn, triplet_sets=None):
    """Loss terms and upstream gradients for one forward trace.

    Mines each unit with Batch-Hard unless ``triplet_sets`` is given.
    Returns (total, per-unit triplet values, softmax value, grad_slices,
    grad_logits, per-unit triplet sets).
    """
    n = len(y)
    lam = strategy.lam
    grad_slices = [np.zeros((n, model.slice_dim)) for _ in range(model.n_slices)]
    values, mined = [], []
    for u, (F, tau) in enumerate(zip(units(strategy, trace), strategy.taus)):
        ts = mine(F, y, tau) if triplet_sets is None else triplet_sets[u]
        out = loss_fn(F, ts, tau)
        values.append(out.value)
        mined.append(ts)
        if strategy.whole_layer:
            for j, (lo, hi) in enumerate(model.slice_bounds):
                grad_slices[j] += lam * out.grad[:, lo:hi]
        else:
            grad_slices[u] += lam * out.grad
    T = one_hot(y, model.num_classes)
    sm_value, grad_logits = 0.0, []
    for lg in trace.logits:
        ce = softmax_cross_entropy(lg, T)
        sm_value += ce.value
        grad_logits.append(ce.grad)
    return (total_loss(values, sm_value, lam), values, sm_value, grad_slices, grad_logits, mined)


def build_model(strategy: StrategyConfig, model_cfg: ModelConfig, input_dim: int,
                num_classes: int, rng: np.random.Generator) -> SlicedModel:
    model = init_model((input_dim, *model_cfg.hidden), strategy.n_slices, model_cfg.slice_dim,
                       num_classes, rng, model_cfg.dropout, strategy.multitask)
    model.meta = {"strategy": strategy.name, "taus": list(strategy.taus),
                  "loss_kind": strategy.loss_kind, "whole_layer": strategy.whole_layer}
    return model


def train(strategy: StrategyConfig, model_cfg: ModelConfig, data: LabeledDataset,
          optim_cfg: OptimConfig, rng: np.random.Generator, val: LabeledDataset | None = None,
          on_epoch: Callable[[int, SlicedModel, RunHistory], None] | None = None,
          ) -> tuple[SlicedModel, RunHistory]:
    init_rng, batch_rng, drop_rng, val_rng = rng.spawn(4)
    C = data.num_classes
    model = build_model(strategy, model_cfg, data.input_dim, C, init_rng)
    opt = Adam(optim_cfg.lr, optim_cfg.beta1, optim_cfg.beta2, optim_cfg.eps)
    loss_fn = triplet_loss_by_kind(strategy.loss_kind)
    P = optim_cfg.P or C
    K = optim_cfg.K
    hist = RunHistory(strategy.name, list(strategy.taus), strategy.lam)
    val_plan = _val_plan(val, P, K, val_rng) if val is not None else None
    best_acc = -1.0
    it = 0
    for epoch in range(optim_cfg.epochs):
        t0 = time.perf_counter()
        plan = plan_batches(data.labels, P, K, batch_rng)
        epoch_triplets = 0
        keep_rows = optim_cfg.audit_rows == "all" or (
            optim_cfg.audit_rows == "final" and epoch == optim_cfg.epochs - 1)
        for idx in plan.index_lists:
            Xb, yb = data.features[idx], data.labels[idx]
            try:
                trace = forward(model, Xb, "train", rng=drop_rng)
                tot, values, sm, g_sl, g_lg, tsets = batch_objective(model, strategy, trace, yb, loss_fn)
            except NonFiniteError as exc:
                raise TrainingAborted(f"non-finite values at iteration {it}: {exc}", it) from exc
            if not math.isfinite(tot):
                raise TrainingAborted(f"non-finite loss at iteration {it}", it)
            counts = []
            for u, (F, ts) in enumerate(zip(units(strategy, trace), tsets)):
                res = audit_incomplete(F, ts, strategy.taus[u])
                counts.append(res.count)
                if keep_rows:
                    for k in range(len(ts)):
                        hist.audit_rows.append((it, u, k, float(res.d_ap[k]), float(res.d_an[k]),
                                                float(res.d_pn[k]), res.tau, bool(res.mask[k])))
            epoch_triplets += sum(len(ts) for ts in tsets)
            grads = backward(model, trace, g_sl, g_lg)
            opt.step(model.params, grads)
            hist.iter_epoch.append(epoch)
            hist.total_loss.append(tot)
            hist.triplet_losses.append(values)
            hist.softmax_loss.append(sm)
            hist.incomplete.append(counts)
            hist.n_triplets.append([len(ts) for ts in tsets])
            it += 1
        if strategy.n_units and epoch_triplets == 0:
            raise TrainingAborted(
                f"mining starvation: no triplets mined in epoch {epoch} "
                f"({len(plan)} batches of P={P}, K={K})", it)
        if not all(np.all(np.isfinite(v)) for v in model.params.values()):
            raise TrainingAborted(f"non-finite parameters after iteration {it - 1}", it - 1)
        hist.epoch_train_acc.append(evaluate(model, data).overall_accuracy)
        if val is not None and len(val):
            hist.epoch_val_acc.append(evaluate(model, val).overall_accuracy)
            vt, vtr, vsm = _val_losses(model, strategy, val, val_plan, loss_fn)
            hist.epoch_val_total.append(vt)
            hist.epoch_val_triplet.append(vtr)
            hist.epoch_val_softmax.append(vsm)
            score = hist.epoch_val_acc[-1]
        else:
            score = hist.epoch_train_acc[-1]
        if score > best_acc:
            best_acc = score
            hist.best_epoch = epoch
        hist.epoch_seconds.append(time.perf_counter() - t0)
        if on_epoch is not None:
            on_epoch(epoch, model, hist)
    return model, hist


def _val_plan(val: LabeledDataset, P: int, K: int, rng):
    """Fixed validation batches; K shrinks to the smallest class if needed."""
    counts = val.class_counts()
    present = counts[counts > 0]
    if len(present) < 2:
        return None
    k = int(min(K, present.min()))
    p = int(min(P, len(present)))
    if k < 2:
        return None
    try:
        return plan_batches(val.labels, p, k, rng)
    except BatchPlanError:
        return None


def _val_losses(model, strategy, val, plan, loss_fn) -> tuple[float, float, float]:
    if plan is None or len(plan) == 0:
        return float("nan"), float("nan"), float("nan")
    tots, trs, sms = [], [], []
    for idx in plan.index_lists:
        trace = forward(model, val.features[idx], "eval")
        tot, values, sm, *_ = batch_objective(model, strategy, trace, val.labels[idx], loss_fn)
        tots.append(tot)
        trs.append(float(np.mean(values)) if values else 0.0)
        sms.append(sm)
    return float(np.mean(tots)), float(np.mean(trs)), float(np.mean(sms))


def evaluate(model: SlicedModel, data: LabeledDataset) -> MetricsReport:
    if data.input_dim != model.layer_widths[0]:
        raise ValueError(f"data width {data.input_dim} != model input width {model.layer_widths[0]}")
    return confusion(predict(model, data.features), data.labels, model.num_classes)
