"""Training runs on refreshed coresets, with per-epoch metrics and CSV artifacts."""

from __future__ import annotations

import csv
import logging
import math
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import NamedTuple, Sequence

import numpy as np
from scipy.special import entr

from . import coreset as cs
from .curvature import EmaState, PreconditionerConfig, ema_update_grad, ema_update_hess, hutchinson_diag, refresh_curvature, selection_features
from .data import Dataset, generate_synthetic, imbalanced_spec, load_libsvm, standardize, normalize_01, train_test_split
from .models import Model, build_model
from .numerics import SeededRng
from .optim import Schedule, diag_newton_step, init_state, minibatches, newton_step, schedule_lr, sgd_momentum_step

log = logging.getLogger(__name__)

METHODS = ("adacore", "craig_mode", "random", "full", "convex_one_shot")
METRIC_COLUMNS = ("epoch", "seconds", "train_loss", "loss_residual", "test_acc", "grad_diff", "distinct_frac")


class ConfigError(ValueError):
    """Invalid or contradictory experiment configuration; ``field`` names the culprit."""

    def __init__(self, field: str, message: str):
        super().__init__(f"{field}: {message}")
        self.field = field


@dataclass
class ExperimentConfig:
    # data
    data_source: str = "synthetic"  # synthetic | libsvm
    train_path: str = ""
    test_path: str = ""
    synth_n: int = 5000
    synth_d: int = 22
    class_fractions: tuple[float, ...] = (0.9, 0.1)
    separation: float = 0.5
    modes: int = 8
    scale_spread: float = 10.0
    mode_spread: float = 1.0
    noise: float = 0.5
    data_seed: int = 0
    test_fraction: float = 0.2
    standardize: bool = False
    normalize_divisor: float = 0.0  # 0 disables
    # model
    model: str = "logistic"  # logistic | ridge | mlp
    mu: float = 1e-3
    lam: float = 1e-3
    hidden: int = 32
    weight_decay: float = 1e-4
    # optimizer
    optimizer: str = "sgd"  # sgd | newton | diag_newton
    schedule: str = "exp_decay"
    lr0: float = 0.1
    lr_decay: float = 0.9
    milestones: tuple[int, ...] = ()
    lr_factor: float = 0.1
    warmup_epochs: int = 0
    momentum: float = 0.9
    hessian_power: float = 1.0
    batch_size: int = 32  # 0 = whole coreset per step
    batch_weighting: str = "batch"  # batch: divide by the batch's weight sum | coreset: by len(batch) * mean coreset weight
    # selection
    method: str = "adacore"
    fraction: float = 0.1
    refresh: int = 1
    greedy: str = "lazy"
    curvature: str = "hutchinson"  # hutchinson (shared diagonal) | analytic_diag | analytic_full (convex models only)
    beta1: float = 0.9
    beta2: float = 0.999
    hessian_batch: int = 64
    hutchinson_samples: int = 1
    delta_floor: float = 1e-12
    unit_preconditioner: bool = False
    dense_threshold: int = 8_000
    # run
    epochs: int = 20
    seed: int = 0
    output_dir: str = ""
    track_examples: bool = True

    def validate(self) -> "ExperimentConfig":
        if not 0 < self.fraction <= 1:
            raise ConfigError("fraction", f"must lie in (0, 1], got {self.fraction}")
        if self.refresh < 1:
            raise ConfigError("refresh", "must be >= 1")
        if self.epochs < 1:
            raise ConfigError("epochs", "must be >= 1")
        if self.method not in METHODS:
            raise ConfigError("method", f"unknown method {self.method!r}; expected one of {METHODS}")
        if self.model not in ("logistic", "ridge", "mlp"):
            raise ConfigError("model", f"unknown model {self.model!r}")
        if self.optimizer not in ("sgd", "newton", "diag_newton"):
            raise ConfigError("optimizer", f"unknown optimizer {self.optimizer!r}")
        if self.data_source not in ("synthetic", "libsvm"):
            raise ConfigError("data_source", f"unknown data source {self.data_source!r}")
        if self.data_source == "libsvm" and not self.train_path:
            raise ConfigError("train_path", "required when data_source = libsvm")
        if self.method == "convex_one_shot" and self.model == "mlp":
            raise ConfigError("method", "convex_one_shot needs a convex model")
        if self.optimizer == "newton" and self.model == "mlp":
            raise ConfigError("optimizer", "full Newton needs an analytic Hessian (logistic or ridge)")
        if self.curvature not in ("hutchinson", "analytic_diag", "analytic_full"):
            raise ConfigError("curvature", f"unknown curvature source {self.curvature!r}")
        if self.model == "mlp" and self.curvature.startswith("analytic"):
            raise ConfigError("curvature", "analytic curvature is only available for convex models")
        if self.greedy not in cs.GREEDY_MODES:
            raise ConfigError("greedy", f"unknown greedy mode {self.greedy!r}")
        if self.batch_weighting not in ("batch", "coreset"):
            raise ConfigError("batch_weighting", f"unknown rule {self.batch_weighting!r}")
        if self.batch_size < 0:
            raise ConfigError("batch_size", "must be >= 0")
        if not self.lr0 > 0:
            raise ConfigError("lr0", "must be positive")
        if self.schedule not in ("constant", "exp_decay", "step_decay"):
            raise ConfigError("schedule", f"unknown schedule {self.schedule!r}")
        if self.schedule == "exp_decay" and not 0 < self.lr_decay <= 1:
            raise ConfigError("lr_decay", "must lie in (0, 1]")
        if not 0 <= self.beta1 < 1:
            raise ConfigError("beta1", "must lie in [0, 1)")
        if not 0 < self.beta2 < 1:
            raise ConfigError("beta2", "must lie in (0, 1)")
        if not 0 <= self.hessian_power <= 1:
            raise ConfigError("hessian_power", "must lie in [0, 1]")
        if not 0 <= self.momentum <= 1:
            raise ConfigError("momentum", "must lie in [0, 1]")
        if not self.delta_floor > 0:
            raise ConfigError("delta_floor", "must be positive")
        if self.hessian_batch < 1 or self.hutchinson_samples < 1:
            raise ConfigError("hessian_batch", "hessian_batch and hutchinson_samples must be >= 1")
        if abs(sum(self.class_fractions) - 1.0) > 1e-9 or min(self.class_fractions) <= 0:
            raise ConfigError("class_fractions", "must be positive and sum to 1")
        return self

    def schedule_obj(self) -> Schedule:
        return Schedule(self.schedule, self.lr0, self.lr_decay, tuple(self.milestones), self.lr_factor, self.warmup_epochs)

    def preconditioner(self, model: Model) -> PreconditionerConfig:
        if self.curvature != "hutchinson" and not model.convex:
            raise ConfigError("curvature", "analytic curvature is only available for convex models")
        return PreconditionerConfig(
            delta_floor=self.delta_floor,
            hessian_batch=self.hessian_batch,
            hutchinson_samples=self.hutchinson_samples,
            hessian_power=self.hessian_power,
            beta1=self.beta1,
            beta2=self.beta2,
            curvature=self.curvature,
            unit_preconditioner=self.unit_preconditioner,
        )

    @classmethod
    def field_types(cls) -> dict[str, type]:
        defaults = cls()
        return {f.name: type(getattr(defaults, f.name)) for f in fields(cls)}


@dataclass
class MetricsRecord:
    epoch: int
    seconds: float
    train_loss: float
    loss_residual: float
    test_acc: float
    grad_diff: float
    distinct_frac: float
    grad_diff_flagged: bool = False


@dataclass
class PerExampleStats:
    selection_count: np.ndarray
    forgetting: np.ndarray
    last_correct: np.ndarray
    entropy: np.ndarray
    evaluations: int = 0

    @classmethod
    def empty(cls, n: int) -> "PerExampleStats":
        return cls(np.zeros(n, dtype=np.int64), np.zeros(n, dtype=np.int64), np.zeros(n, dtype=bool), np.zeros(n))


def forgetting_update(stats: PerExampleStats, predictions, labels) -> PerExampleStats:
    """Count correct-to-incorrect transitions since the previous evaluation."""
    predictions = np.asarray(predictions)
    labels = np.asarray(labels)
    if predictions.shape != labels.shape or predictions.shape != stats.forgetting.shape:
        raise ValueError("need one prediction and one label per tracked example")
    correct = predictions == labels
    forgetting = stats.forgetting.copy()
    if stats.evaluations > 0:
        forgetting += (stats.last_correct & ~correct).astype(np.int64)
    return PerExampleStats(stats.selection_count, forgetting, correct, stats.entropy, stats.evaluations + 1)


def uncertainty(predictions) -> np.ndarray:
    """Shannon entropy (nats) of each row of class probabilities."""
    P = np.atleast_2d(np.asarray(predictions, dtype=np.float64))
    if np.any(P < -1e-12) or np.any(np.abs(P.sum(axis=1) - 1.0) > 1e-6):
        raise ValueError("rows must be probability vectors")
    return entr(np.clip(P, 0.0, 1.0)).sum(axis=1)


def normalized_grad_diff(model: Model, w, coreset: cs.Coreset, n: int | None = None) -> tuple[float, bool]:
    """``|g_full - sum_j gamma_j g_j / n| / |g_full|``; returns ``(value, flagged)``.

    ``flagged`` is True when the full gradient is exactly zero and the value
    is reported as 0 by convention.
    """
    if len(coreset) == 0:
        raise ValueError("coreset is empty")
    n = model.n if n is None else n
    G = model.grads(w)
    # one pass over all examples with coefficient 1 - gamma_i (gamma_i = 0 off the coreset),
    # so a coreset that reproduces the full set gives exactly zero
    gamma = np.zeros(model.n)
    gamma[coreset.indices] = coreset.weights
    g_full = G.sum(axis=0) / n
    norm = float(np.linalg.norm(g_full))
    if norm == 0.0:
        return 0.0, True
    return float(np.linalg.norm((1.0 - gamma) @ G / n)) / norm, False


class BoundCheck(NamedTuple):
    """Weighted-sum error of one class's selection against its cover cost ``L(S)``."""

    epoch: int
    label: int
    error: float
    residual: float

    @property
    def holds(self) -> bool:
        return self.error <= self.residual


class ExperimentResult(NamedTuple):
    metrics: list[MetricsRecord]
    stats: PerExampleStats
    coresets: list[tuple[int, cs.Coreset]]
    w: np.ndarray
    bound_checks: list[BoundCheck] = []


# ---------------------------------------------------------------- data setup


def load_data(cfg: ExperimentConfig) -> tuple[Dataset, Dataset | None]:
    if cfg.data_source == "libsvm":
        train = load_libsvm(cfg.train_path)
        test = load_libsvm(cfg.test_path, dim_hint=train.d) if cfg.test_path else None
    else:
        spec = imbalanced_spec(
            n=cfg.synth_n,
            d=cfg.synth_d,
            class_fractions=cfg.class_fractions,
            separation=cfg.separation,
            modes=cfg.modes,
            scale_spread=cfg.scale_spread,
            mode_spread=cfg.mode_spread,
            noise=cfg.noise,
            seed=cfg.data_seed,
        )
        full = generate_synthetic(spec)
        train, test = train_test_split(full, cfg.test_fraction, SeededRng(cfg.data_seed).spawn(2)[1])
    if cfg.normalize_divisor:
        train = normalize_01(train, cfg.normalize_divisor)
        test = normalize_01(test, cfg.normalize_divisor) if test is not None else None
    if cfg.standardize:
        if test is None:
            (train,) = standardize(train)
        else:
            train, test = standardize(train, test)
    return train, test


def make_model(cfg: ExperimentConfig, ds: Dataset) -> Model:
    if cfg.model == "logistic":
        return build_model("logistic", ds, mu=cfg.mu)
    if cfg.model == "ridge":
        return build_model("ridge", ds, lam=cfg.lam)
    return build_model("mlp", ds, hidden=cfg.hidden, weight_decay=cfg.weight_decay)


# --------------------------------------------------------------------- runner


class _Selector:
    """Holds the selection-side moving averages between refreshes."""

    def __init__(self, cfg: ExperimentConfig, model: Model, ds: Dataset, rng: SeededRng):
        self.cfg = cfg
        self.model = model
        self.ds = ds
        self.rng = rng
        self.pre = cfg.preconditioner(model)
        self.ema = EmaState(cfg.beta1, cfg.beta2)
        self.last_vectors = None

    def features(self, w, mode: str):
        if mode == "gradient_only":
            return selection_features(self.model, w, None, self.pre, "gradient_only")
        self.ema = ema_update_grad(self.ema, self.model.proxy_grads(w))
        if self.pre.curvature == "hutchinson" and not self.pre.unit_preconditioner:
            self.ema = refresh_curvature(self.model, w, self.ema, self.pre, self.rng, proxy=True)
        return selection_features(self.model, w, self.ema, self.pre, "preconditioned")

    def select(self, w) -> cs.Coreset:
        cfg = self.cfg
        if cfg.method == "full":
            return cs.Coreset.full(self.ds)
        if cfg.method == "random":
            return cs.random_select(self.ds, cfg.fraction, self.rng)
        if cfg.method == "convex_one_shot":
            return cs.convex_one_shot(self.ds, cfg.fraction, cfg.greedy, self.rng, cfg.dense_threshold)
        mode = "preconditioned" if cfg.method == "adacore" else "gradient_only"
        feats = self.features(w, mode)
        self.last_vectors = feats.vectors
        return cs.per_class_select(self.ds, feats, cfg.fraction, cfg.greedy, self.rng, cfg.dense_threshold)

    def check_bound(self, core: cs.Coreset) -> list[tuple[int, float, float]]:
        """Weighted-sum error vs cover cost per class for the latest greedy selection (diagnostic, untimed)."""
        V, self.last_vectors = self.last_vectors, None
        if V is None:
            return []
        out = []
        for c, (ix, wt) in sorted(core.per_class.items()):
            rows = self.ds.class_index[c]
            err = cs.weighted_sum_error(V, cs.Coreset(ix, wt, core.class_residuals[c]), rows)
            if err > core.class_residuals[c]:
                log.warning("class %d: weighted-sum error %.6g exceeds cover cost %.6g", c, err, core.class_residuals[c])
            out.append((c, err, core.class_residuals[c]))
        return out


def run_experiment(
    cfg: ExperimentConfig,
    train: Dataset | None = None,
    test: Dataset | None = None,
    w0: np.ndarray | None = None,
    write: bool = True,
) -> ExperimentResult:
    """Train on coresets refreshed at epochs ``0, R, 2R, ...`` and record one metrics row per epoch.

    ``seconds`` counts selection and optimizer time only; evaluation passes
    are excluded. ``loss_residual`` is relative to the run's own best loss;
    use :func:`apply_loss_residuals` to rebase a comparison group.
    """
    cfg.validate()
    if train is None:
        train, test = load_data(cfg)
    model = make_model(cfg, train)
    if cfg.method == "convex_one_shot" and not model.convex:
        raise ConfigError("method", "convex_one_shot needs a convex model")

    root = SeededRng(cfg.seed)
    init_rng, select_rng, batch_rng, curv_rng = root.spawn(4)
    w = model.init_params(init_rng) if w0 is None else np.array(w0, dtype=np.float64)
    state = init_state(w, cfg.optimizer, momentum=cfg.momentum, hessian_power=cfg.hessian_power, delta_floor=cfg.delta_floor)
    opt_ema = EmaState(cfg.beta1, cfg.beta2)
    schedule = cfg.schedule_obj()
    selector = _Selector(cfg, model, train, select_rng)

    stats = PerExampleStats.empty(train.n)
    seen = np.zeros(train.n, dtype=bool)
    history: list[tuple[int, cs.Coreset]] = []
    checks: list[BoundCheck] = []
    metrics: list[MetricsRecord] = []
    coreset = None
    clock = 0.0

    for epoch in range(cfg.epochs):
        t0 = time.perf_counter()
        if epoch % cfg.refresh == 0 and (coreset is None or cfg.method != "convex_one_shot"):
            coreset = selector.select(state.w)
            history.append((epoch, coreset))
            stats.selection_count[coreset.indices] += 1
            seen[coreset.indices] = True

        bs = cfg.batch_size or len(coreset)
        batches = minibatches(coreset.indices, coreset.weights, bs, batch_rng)
        mean_weight = coreset.total_weight / len(coreset)
        for step, (idx, wt) in enumerate(batches):
            lr = schedule_lr(schedule, epoch, step, len(batches))
            if cfg.optimizer == "sgd":
                norm = len(idx) * mean_weight if cfg.batch_weighting == "coreset" and len(idx) < len(coreset) else None
                state = sgd_momentum_step(state, idx, model, wt, lr, norm)
            elif cfg.optimizer == "newton":
                state = newton_step(state, idx, model, wt, lr)
            else:
                opt_ema = ema_update_grad(opt_ema, model.grad(state.w, idx, wt))
                hb = idx if len(idx) <= cfg.hessian_batch else np.sort(curv_rng.choice(idx, cfg.hessian_batch, replace=False))
                opt_ema = ema_update_hess(opt_ema, hutchinson_diag(model, state.w, hb, cfg.hutchinson_samples, curv_rng))
                state = diag_newton_step(state, opt_ema, lr)
        clock += time.perf_counter() - t0
        if history[-1][0] == epoch:
            checks.extend(BoundCheck(epoch, *c) for c in selector.check_bound(coreset))

        train_loss = model.loss(state.w)
        test_acc = model.accuracy(state.w, test) if test is not None else float("nan")
        gd, flagged = normalized_grad_diff(model, state.w, coreset)
        metrics.append(MetricsRecord(epoch, clock, train_loss, float("nan"), test_acc, gd, float(seen.mean()), flagged))
        if cfg.track_examples:
            probs = model.predict_proba(state.w)
            stats = forgetting_update(stats, np.argmax(probs, axis=1), train.labels)
            stats.entropy = uncertainty(probs)
        if not math.isfinite(train_loss):
            raise FloatingPointError(f"training diverged at epoch {epoch}")

    apply_loss_residuals([metrics])
    result = ExperimentResult(metrics, stats, history, state.w, checks)
    if write and cfg.output_dir:
        write_outputs(result, cfg.output_dir)
    return result


def apply_loss_residuals(groups: Sequence[list[MetricsRecord]]) -> float:
    """Set ``loss_residual`` against the smallest training loss seen in any run of the group."""
    best = min(r.train_loss for g in groups for r in g)
    for g in groups:
        for r in g:
            r.loss_residual = r.train_loss - best
    return best


def time_to_loss(metrics: Sequence[MetricsRecord], target: float) -> float:
    """Wall-clock seconds at the first epoch whose training loss is at or below ``target`` (inf if never)."""
    for r in metrics:
        if r.train_loss <= target:
            return r.seconds
    return math.inf


# ------------------------------------------------------------------- outputs


def _write_rows(path: Path, header, rows) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        writer.writerows(rows)


def write_outputs(result: ExperimentResult, out_dir: str | Path) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    _write_rows(
        out / "metrics.csv",
        METRIC_COLUMNS,
        ([r.epoch] + [repr(float(getattr(r, c))) for c in METRIC_COLUMNS[1:]] for r in result.metrics),
    )
    st = result.stats
    _write_rows(out / "selection_counts.csv", ("index", "count"), enumerate(st.selection_count.tolist()))
    _write_rows(
        out / "per_example.csv",
        ("index", "forgetting", "entropy"),
        ((i, f, repr(float(h))) for i, (f, h) in enumerate(zip(st.forgetting.tolist(), st.entropy.tolist()))),
    )
    for epoch, core in result.coresets:
        cs.write_coreset_csv(core, out / f"coreset_epoch{epoch}.csv")
    return out


def read_metrics(path: str | Path) -> list[MetricsRecord]:
    with open(path, newline="") as fh:
        return [
            MetricsRecord(int(row["epoch"]), *(float(row[c]) for c in METRIC_COLUMNS[1:]))
            for row in csv.DictReader(fh)
        ]
