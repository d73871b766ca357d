"""Command-line entry point: gen-data, train, eval, sweep, audit.

Settings come from built-in defaults, then a JSON config file (``--config``),
then command-line flags; later sources win.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import statistics
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from importlib import resources
from pathlib import Path


from .datagen import ClusterSpec, DatasetError, LabeledDataset, export_csv, load_csv, split, synth_clusters
from .evaluation import distance_distributions, export_slice_features, write_distributions, write_metrics
from .mining import BatchPlanError, audit_incomplete, mine, plan_batches
from .model import forward, load_checkpoint, save_checkpoint
from .numerics import spawn_rngs
from .trainer import (
    STRATEGIES,
    ModelConfig,
    OptimConfig,
    ScheduleError,
    TrainingAborted,
    evaluate,
    make_strategy,
    sample_thresholds,
    train,
)

EXIT_CONFIG = 2
EXIT_ABORT = 3


class ConfigError(ValueError):
    pass


@dataclass
class DataConfig:
    source: str = "synth"
    num_classes: int = 7
    input_dim: int = 32
    samples_per_class: int = 200
    class_center_radius: float = 3.0
    per_class_scales: list[float] = field(default_factory=lambda: [0.2, 0.4, 0.6, 0.8, 1.0, 1.2, 1.4])
    path: str | None = None
    label_column: str = "label"

    def cluster_spec(self) -> ClusterSpec:
        return ClusterSpec(self.num_classes, self.input_dim, self.samples_per_class,
                           self.class_center_radius, tuple(self.per_class_scales))


@dataclass
class RunConfig:
    strategy: str = "Mul-DML"
    tau_min: float = 0.15
    tau_max: float = 0.75
    dtau: float = 0.1
    tau: float | None = None
    loss_kind: str | None = None
    slice_dim: int = 256
    hidden: list[int] = field(default_factory=lambda: [256, 512])
    dropout: float = 0.0
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    epochs: int = 30
    P: int | None = None
    K: int = 12
    val_fraction: float = 0.2
    seed: int = 0
    out: str = "runs/default"
    data: DataConfig = field(default_factory=DataConfig)

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        d = dict(d)
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
        data = d.pop("data", None) or {}
        if not isinstance(data, dict):
            raise ConfigError("'data' must be an object")
        dk = {f.name for f in fields(DataConfig)}
        bad = sorted(set(data) - dk)
        if bad:
            raise ConfigError(f"unknown data config keys: {', '.join(bad)}")
        return cls(**d, data=DataConfig(**data))

    def to_dict(self) -> dict:
        return asdict(self)

    def schedule(self):
        return sample_thresholds(self.tau_min, self.tau_max, self.dtau)

    def strategy_config(self):
        if self.strategy not in STRATEGIES:
            raise ConfigError(f"unknown strategy {self.strategy!r}; choose from {', '.join(STRATEGIES)}")
        if self.loss_kind not in (None, "trad", "dual"):
            raise ConfigError(f"loss_kind must be trad or dual, got {self.loss_kind!r}")
        return make_strategy(self.strategy, self.schedule(), self.tau, self.loss_kind)

    def model_config(self) -> ModelConfig:
        return ModelConfig(tuple(self.hidden), self.slice_dim, self.dropout)

    def optim_config(self) -> OptimConfig:
        return OptimConfig(self.lr, self.beta1, self.beta2, self.eps, self.epochs, self.P, self.K)

    def validate(self) -> None:
        try:
            self.strategy_config()
            if self.data.source == "synth":
                self.data.cluster_spec().validate()
            elif self.data.source == "csv":
                if not self.data.path:
                    raise ConfigError("csv data source needs a path")
            else:
                raise ConfigError(f"unknown data source {self.data.source!r}")
            if not 0.0 <= self.dropout < 1.0:
                raise ConfigError("dropout must lie in [0, 1)")
            if self.epochs < 1 or self.slice_dim < 1 or not self.hidden:
                raise ConfigError("epochs, slice_dim and hidden must be positive")
            if not 0.0 <= self.val_fraction < 1.0:
                raise ConfigError("val_fraction must lie in [0, 1)")
        except (ScheduleError, DatasetError) as exc:
            raise ConfigError(str(exc)) from exc
        except ValueError as exc:
            if isinstance(exc, ConfigError):
                raise
            raise ConfigError(str(exc)) from exc


def bundled_config_path(name: str) -> Path:
    return Path(str(resources.files("mtdml") / "configs" / name))


def read_config(path) -> dict:
    p = Path(path)
    if not p.exists() and not p.is_absolute():
        p = bundled_config_path(str(path))
    try:
        return json.loads(p.read_text(encoding="utf-8"))
    except FileNotFoundError as exc:
        raise ConfigError(f"config file not found: {path}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from exc


def load_data(cfg: RunConfig, rng) -> LabeledDataset:
    if cfg.data.source == "csv":
        return load_csv(cfg.data.path, cfg.data.label_column)
    return synth_clusters(cfg.data.cluster_spec(), rng)


def prepare_data(cfg: RunConfig):
    data_rng, split_rng, train_rng = spawn_rngs(cfg.seed, 3)
    ds = load_data(cfg, data_rng)
    if cfg.val_fraction > 0:
        tr, va = split(ds, (1.0 - cfg.val_fraction, cfg.val_fraction), split_rng)
    else:
        tr, va = ds, None
    return tr, va, train_rng


# -- artifacts ------------------------------------------------------------------

def _dump_json(obj, path: Path) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def write_loss_csvs(hist, out: Path) -> None:
    with (out / "losses.csv").open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        n_units = len(hist.taus)
        w.writerow(["iteration", "epoch", "total", "softmax"]
                   + [f"triplet_{u}" for u in range(n_units)] + ["incomplete"])
        for i, ep in enumerate(hist.iter_epoch):
            w.writerow([i, ep, repr(hist.total_loss[i]), repr(hist.softmax_loss[i])]
                       + [repr(v) for v in hist.triplet_losses[i]] + [sum(hist.incomplete[i])])
    with (out / "epochs.csv").open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", "train_acc", "val_acc", "mean_triplet_loss", "incomplete",
                    "val_total", "val_triplet", "val_softmax"])
        for e in range(hist.n_epochs):
            def val(seq):
                return repr(seq[e]) if e < len(seq) else ""
            w.writerow([e, repr(hist.epoch_train_acc[e]), val(hist.epoch_val_acc),
                        repr(hist.epoch_mean_triplet_loss(e)), hist.epoch_incomplete(e),
                        val(hist.epoch_val_total), val(hist.epoch_val_triplet), val(hist.epoch_val_softmax)])


AUDIT_HEADER = ["iteration", "slice", "triplet_index", "d_ap", "d_an", "d_pn", "tau", "flagged"]


def write_audit_csv(rows, path: Path) -> None:
    with path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(AUDIT_HEADER)
        for it, u, k, dap, dan, dpn, tau, flag in rows:
            w.writerow([it, u, k, repr(dap), repr(dan), repr(dpn), repr(tau), int(flag)])


def run_training(cfg: RunConfig) -> dict:
    """Train one configuration and write every artifact under ``cfg.out``."""
    cfg.validate()
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    _dump_json(cfg.to_dict(), out / "effective-config.json")
    strategy = cfg.strategy_config()
    tr, va, train_rng = prepare_data(cfg)

    def on_epoch(epoch, model, hist):
        if hist.best_epoch == epoch:
            save_checkpoint(model, out / "model-best.json")

    model, hist = train(strategy, cfg.model_config(), tr, cfg.optim_config(), train_rng,
                        val=va, on_epoch=on_epoch)
    save_checkpoint(model, out / "model.json")
    _dump_json(hist.to_dict(), out / "history.json")
    write_loss_csvs(hist, out)
    write_audit_csv(hist.audit_rows, out / "audit.csv")
    metrics = {
        "strategy": strategy.name,
        "taus": list(strategy.taus),
        "lambda": strategy.lam,
        "seed": cfg.seed,
        "epochs": hist.n_epochs,
        "best_epoch": hist.best_epoch,
        "final_mean_triplet_loss": hist.epoch_mean_triplet_loss(),
        "final_epoch_incomplete": hist.epoch_incomplete(),
        "train": evaluate(model, tr).to_dict(),
        "val": evaluate(model, va).to_dict() if va is not None and len(va) else None,
    }
    write_metrics(metrics, out / "metrics.json")
    return metrics


# -- commands -------------------------------------------------------------------

def _config_from_args(args) -> RunConfig:
    base = read_config(args.config) if getattr(args, "config", None) else {}
    cfg = RunConfig.from_dict(base)
    overrides = {
        "seed": "seed", "out": "out", "strategy": "strategy", "tau_min": "tau_min",
        "tau_max": "tau_max", "dtau": "dtau", "tau": "tau", "slice_dim": "slice_dim",
        "epochs": "epochs", "p": "P", "k": "K", "loss_kind": "loss_kind",
    }
    for arg, key in overrides.items():
        v = getattr(args, arg, None)
        if v is not None:
            setattr(cfg, key, v)
    if getattr(args, "csv", None):
        cfg.data.source = "csv"
        cfg.data.path = args.csv
    if getattr(args, "label_col", None):
        cfg.data.label_column = args.label_col
    return cfg


def cmd_train(args) -> int:
    cfg = _config_from_args(args)
    cfg.validate()
    try:
        metrics = run_training(cfg)
    except (DatasetError, BatchPlanError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except TrainingAborted as exc:
        print(f"training aborted: {exc}", file=sys.stderr)
        return EXIT_ABORT
    val = metrics["val"]["overall_accuracy"] if metrics["val"] else float("nan")
    print(f"{metrics['strategy']}: train acc {metrics['train']['overall_accuracy']:.4f}, "
          f"val acc {val:.4f}, final incomplete {metrics['final_epoch_incomplete']}")
    return 0


def cmd_eval(args) -> int:
    cfg = _config_from_args(args)
    cfg.validate()
    model = load_checkpoint(args.checkpoint)
    tr, va, _ = prepare_data(cfg)
    data = va if (args.split == "val" and va is not None) else tr
    if data.input_dim != model.layer_widths[0]:
        print(f"error: data width {data.input_dim} != checkpoint input width {model.layer_widths[0]}",
              file=sys.stderr)
        return EXIT_CONFIG
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    report = evaluate(model, data)
    write_metrics(report, out / "eval-metrics.json")
    trace = forward(model, data.features, "eval")
    taus = model.meta.get("taus") or None
    if taus is not None and len(taus) != model.n_slices:
        taus = None
    write_distributions(distance_distributions(trace.slice_embeddings, data.labels, taus),
                        out / "distances.csv")
    export_slice_features(model, data.features, out / "slice-features.csv")
    print(f"{args.split} accuracy {report.overall_accuracy:.4f} on {report.n_samples} samples")
    return 0


def audit_model(model, data: LabeledDataset, taus, P: int, K: int, rng):
    """One eval-mode Batch-Hard pass per slice over PK batches of ``data``."""
    plan = plan_batches(data.labels, P, K, rng)
    rows, per_slice = [], [0] * model.n_slices
    for b, idx in enumerate(plan.index_lists):
        trace = forward(model, data.features[idx], "eval")
        for s, F in enumerate(trace.slice_embeddings):
            ts = mine(F, data.labels[idx])
            res = audit_incomplete(F, ts, taus[s])
            per_slice[s] += res.count
            rows.extend((b, s, k, float(res.d_ap[k]), float(res.d_an[k]), float(res.d_pn[k]),
                         res.tau, bool(res.mask[k])) for k in range(len(ts)))
    return per_slice, rows


def cmd_audit(args) -> int:
    cfg = _config_from_args(args)
    cfg.validate()
    model = load_checkpoint(args.checkpoint)
    data_rng, _, audit_rng = spawn_rngs(cfg.seed, 3)
    data = load_data(cfg, data_rng)
    if len(data) == 0:
        print("error: empty dataset", file=sys.stderr)
        return EXIT_CONFIG
    if data.input_dim != model.layer_widths[0]:
        print(f"error: data width {data.input_dim} != checkpoint input width {model.layer_widths[0]}",
              file=sys.stderr)
        return EXIT_CONFIG
    if args.tau is not None:
        taus = [args.tau] * model.n_slices
    else:
        taus = list(model.meta.get("taus") or [])
        if len(taus) != model.n_slices:
            taus = [taus[0] if taus else 0.4] * model.n_slices
    per_slice, rows = audit_model(model, data, taus, cfg.P or data.num_classes, cfg.K, audit_rng)
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    write_audit_csv(rows, out / "audit.csv")
    summary = {"per_slice": per_slice, "total": sum(per_slice), "taus": taus,
               "n_triplets": len(rows)}
    _dump_json(summary, out / "audit-summary.json")
    for s, c in enumerate(per_slice):
        print(f"slice {s} (tau={taus[s]}): {c} incomplete judgements")
    print(f"total: {sum(per_slice)} of {len(rows)} triplets")
    return 0


def cmd_gen_data(args) -> int:
    cfg = _config_from_args(args)
    cfg.data.source = "synth"
    cfg.validate()
    data_rng, _, _ = spawn_rngs(cfg.seed, 3)
    ds = synth_clusters(cfg.data.cluster_spec(), data_rng)
    out = Path(cfg.out)
    path = out if out.suffix == ".csv" else out / "data.csv"
    export_csv(ds, path)
    print(f"wrote {len(ds)} samples to {path}")
    return 0


# -- sweeps ---------------------------------------------------------------------

SWEEP_KEYS = {"strategies", "taus", "seeds", "n_seeds"}
TAU_STRATEGIES = {"S-Trad-Triplet", "S-Dual-Triplet", "S-DML", "Mul-DML-Same", "Mul-DML-Multask-Same"}


def sweep_cells(base: RunConfig, spec: dict) -> list[tuple[str, float | None, int]]:
    bad = sorted(set(spec) - SWEEP_KEYS)
    if bad:
        raise ConfigError(f"unknown sweep keys: {', '.join(bad)}")
    strategies = spec.get("strategies") or []
    taus = spec.get("taus") or []
    if not strategies and not taus:
        raise ConfigError("sweep spec lists neither strategies nor taus")
    strategies = strategies or [base.strategy]
    if "seeds" in spec:
        seeds = list(spec["seeds"])
    else:
        seeds = list(range(base.seed, base.seed + int(spec.get("n_seeds", 1))))
    if not seeds:
        raise ConfigError("sweep has no seeds")
    settings = []
    for s in strategies:
        if s in TAU_STRATEGIES:
            settings.extend((s, float(t)) for t in (taus or [base.tau]))
        else:
            settings.append((s, None))
    return [(s, t, seed) for s, t in settings for seed in seeds]


def _cell_dir(out: Path, strategy: str, tau, seed: int) -> Path:
    tag = strategy if tau is None else f"{strategy}_tau{tau:g}"
    return out / "cells" / f"{tag}_seed{seed}"


def _run_cell(payload):
    cfg_dict, strategy, tau, seed, out = payload
    cfg = RunConfig.from_dict(cfg_dict)
    cfg.strategy, cfg.seed, cfg.out = strategy, seed, out
    if tau is not None:
        cfg.tau = tau
    try:
        m = run_training(cfg)
    except Exception as exc:  # recorded per cell, the sweep keeps going
        return {"status": f"failed: {type(exc).__name__}: {exc}"}
    return {"status": "ok", "val_acc": m["val"]["overall_accuracy"] if m["val"] else None,
            "train_acc": m["train"]["overall_accuracy"],
            "final_triplet_loss": m["final_mean_triplet_loss"],
            "final_incomplete": m["final_epoch_incomplete"]}


def run_sweep(base: RunConfig, spec: dict, workers: int = 1) -> list[dict]:
    cells = sweep_cells(base, spec)
    out = Path(base.out)
    payloads = [(base.to_dict(), s, t, seed, str(_cell_dir(out, s, t, seed))) for s, t, seed in cells]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as ex:
            results = list(ex.map(_run_cell, payloads))
    else:
        results = [_run_cell(p) for p in payloads]
    rows = [{"kind": "cell", "strategy": s, "tau": t, "seed": seed, **r}
            for (s, t, seed), r in zip(cells, results)]
    summary = []
    seen = []
    for s, t, _ in cells:
        if (s, t) not in seen:
            seen.append((s, t))
    for s, t in seen:
        accs = [r["val_acc"] for r in rows
                if r["strategy"] == s and r["tau"] == t and r["status"] == "ok" and r["val_acc"] is not None]
        mean = statistics.fmean(accs) if accs else float("nan")
        std = statistics.pstdev(accs) if len(accs) > 1 else 0.0
        summary.append({"kind": "summary", "strategy": s, "tau": t, "seed": "", "status": f"n={len(accs)}",
                        "val_acc": mean, "val_acc_std": std,
                        "median_val_acc": statistics.median(accs) if accs else float("nan"),
                        "mean_pm_std": f"{100 * mean:.2f}±{100 * std:.2f}"})
    return rows + summary


SWEEP_COLUMNS = ["kind", "strategy", "tau", "seed", "status", "val_acc", "val_acc_std", "median_val_acc",
                 "mean_pm_std", "train_acc", "final_triplet_loss", "final_incomplete"]


def write_sweep_csv(rows, path: Path) -> None:
    with path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=SWEEP_COLUMNS, extrasaction="ignore")
        w.writeheader()
        for r in rows:
            w.writerow({k: ("" if r.get(k) is None else r.get(k)) for k in SWEEP_COLUMNS})


def cmd_sweep(args) -> int:
    cfg = _config_from_args(args)
    if not args.sweep:
        raise ConfigError("sweep needs --sweep pointing at a sweep spec")
    spec = read_config(args.sweep)
    if not isinstance(spec, dict):
        raise ConfigError("sweep spec must be a JSON object")
    cells = sweep_cells(cfg, spec)
    if cfg.tau is None and any(s in TAU_STRATEGIES for s, _, _ in cells):
        if any(t is None for s, t, _ in cells if s in TAU_STRATEGIES):
            raise ConfigError("sweep includes single-threshold strategies but no taus or config tau")
    workers = max(1, int(os.environ.get("MTML_THREADS", "1")))
    rows = run_sweep(cfg, spec, workers)
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    write_sweep_csv(rows, out / "sweep.csv")
    for r in rows:
        if r["kind"] == "summary":
            tau = "" if r["tau"] is None else f" tau={r['tau']:g}"
            print(f"{r['strategy']}{tau}: {r['mean_pm_std']} ({r['status']})")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mtdml", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="JSON run config (file path or bundled config name)")
        p.add_argument("--seed", type=int)
        p.add_argument("--out", help="output directory")
        p.add_argument("--strategy", choices=STRATEGIES)
        p.add_argument("--tau-min", type=float, dest="tau_min")
        p.add_argument("--tau-max", type=float, dest="tau_max")
        p.add_argument("--dtau", type=float)
        p.add_argument("--tau", type=float, help="single margin for single-threshold strategies")
        p.add_argument("--loss-kind", choices=("trad", "dual"), dest="loss_kind")
        p.add_argument("--slice-dim", type=int, dest="slice_dim")
        p.add_argument("--epochs", type=int)
        p.add_argument("--p", type=int, help="classes per batch")
        p.add_argument("--k", type=int, help="samples per class per batch")
        p.add_argument("--csv", help="load features from this CSV instead of synthesizing")
        p.add_argument("--label-col", dest="label_col")

    p = sub.add_parser("train", help="train one strategy")
    common(p)
    p.set_defaults(func=cmd_train)
    p = sub.add_parser("eval", help="evaluate a checkpoint and export distributions/features")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--split", choices=("train", "val"), default="val")
    p.set_defaults(func=cmd_eval)
    p = sub.add_parser("sweep", help="run a grid of strategies/thresholds/seeds")
    common(p)
    p.add_argument("--sweep", help="sweep spec JSON: strategies, taus, seeds or n_seeds")
    p.set_defaults(func=cmd_sweep)
    p = sub.add_parser("audit", help="count incomplete judgements of a checkpoint")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.set_defaults(func=cmd_audit)
    p = sub.add_parser("gen-data", help="write the synthetic dataset as CSV")
    common(p)
    p.set_defaults(func=cmd_gen_data)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, ScheduleError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DatasetError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except BatchPlanError as exc:
        print(f"batching error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except TrainingAborted as exc:
        print(f"training aborted: {exc}", file=sys.stderr)
        return EXIT_ABORT


if __name__ == "__main__":
    sys.exit(main())
