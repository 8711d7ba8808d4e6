"""SGD training loop with snapshot-teacher distillation and the multi-run protocol."""
from __future__ import annotations

import io
import math
import time
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .data import DatasetSplit, augment_batch
from .losses import LossConfig, compute_loss
from .nn import ParamSet, backward, forward, init_params, predict, save_params
from .snapshots import SnapshotConfig, SnapshotRing, ring_init


class TrainingDivergedError(FloatingPointError):
    def __init__(self, step: int, value: float):
        super().__init__(f"non-finite loss {value!r} at step {step}")
        self.step = step
        self.value = value


class RunFailedError(RuntimeError):
    def __init__(self, run_index: int, seed: int, cause: BaseException):
        super().__init__(f"run {run_index} (seed {seed}) failed: {cause}")
        self.run_index = run_index
        self.seed = seed


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 200
    batch_size: int = 128
    lr_max: float = 0.1
    lr_min: float = 0.0001
    momentum: float = 0.9
    weight_decay: float = 0.0005
    seed: int = 0
    hidden: tuple[int, ...] = (64, 64)
    loss: LossConfig = field(default_factory=LossConfig)
    snapshot: SnapshotConfig | None = None
    checkpoint_every: int | None = None

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError(f"epochs: must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size: must be >= 1, got {self.batch_size}")
        if not 0 < self.lr_min <= self.lr_max:
            raise ValueError(f"lr_min/lr_max: need 0 < lr_min <= lr_max, got {self.lr_min}, {self.lr_max}")
        if not 0 <= self.momentum < 1:
            raise ValueError(f"momentum: must lie in [0, 1), got {self.momentum}")
        if self.weight_decay < 0:
            raise ValueError(f"weight_decay: must be >= 0, got {self.weight_decay}")
        if any(h < 1 for h in self.hidden):
            raise ValueError(f"hidden: layer widths must be positive, got {self.hidden}")
        if self.loss.uses_snapshots != (self.snapshot is not None):
            raise ValueError(
                f"snapshot: required exactly when the loss method is MrKD or MrKD-TC (method {self.loss.method})")
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))


def steps_per_epoch(n_train: int, batch_size: int) -> int:
    return math.ceil(n_train / batch_size)


def lr_at(t: int, cfg: TrainConfig, total_steps: int) -> float:
    """Cosine-annealed rate from ``lr_max`` at step 0 to ``lr_min`` at ``total_steps``."""
    if not 0 <= t <= total_steps:
        raise ValueError(f"step {t} outside [0, {total_steps}]")
    w = 0.5 * (1.0 + math.cos(math.pi * t / total_steps))
    # written as a convex mix so both endpoints come out exact
    return cfg.lr_min * (1.0 - w) + cfg.lr_max * w


def sgd_step(params: ParamSet, grads: ParamSet, velocity: ParamSet, lr: float,
             momentum: float, weight_decay: float) -> ParamSet:
    """In-place heavy-ball update with L2 folded into the gradient."""
    if not (params.same_shape(grads) and params.same_shape(velocity)):
        raise ValueError("parameter, gradient and momentum shapes differ")
    for p, g, v in zip(params.arrays(), grads.arrays(), velocity.arrays()):
        v *= momentum
        v += g + weight_decay * p
        p -= lr * v
    return params


def error_rate(params: ParamSet, x: np.ndarray, y: np.ndarray) -> float:
    """Top-1 error in percent."""
    if len(y) == 0:
        return 0.0
    wrong = int(np.count_nonzero(predict(params, x).argmax(axis=1) != y))
    return 100.0 * wrong / len(y)


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    train_err: float
    test_err: float


CSV_HEADER = "epoch,train_loss,train_err,test_err\n"


@dataclass
class RunMetrics:
    records: list[EpochRecord]
    seed: int
    steps_per_epoch: int
    total_steps: int
    shifts: int = 0
    wall_seconds: float = 0.0
    params: ParamSet | None = field(default=None, repr=False)

    @property
    def final_test_error(self) -> float:
        return self.records[-1].test_err

    @property
    def final_train_error(self) -> float:
        return self.records[-1].train_err

    def to_csv(self) -> str:
        """CSV body; wall-clock time is deliberately left out so reruns are byte-identical."""
        buf = io.StringIO()
        buf.write(CSV_HEADER)
        for r in self.records:
            buf.write(f"{r.epoch},{r.train_loss!r},{r.train_err!r},{r.test_err!r}\n")
        return buf.getvalue()


@dataclass
class AggregateMetrics:
    mean: float
    std: float
    runs: int
    final_errors: list[float]
    degenerate: bool = False
    run_metrics: list[RunMetrics] = field(default_factory=list, repr=False)

    def format(self) -> str:
        """Table-style ``mean (±std)``."""
        return f"{self.mean:.2f} (±{self.std:.2f})"


def aggregate(final_errors: list[float]) -> AggregateMetrics:
    """Mean and sample standard deviation; a single run reports std 0 and is flagged."""
    errs = [float(e) for e in final_errors]
    if not errs:
        raise ValueError("no runs to aggregate")
    mean = float(np.mean(errs))
    if len(errs) == 1:
        return AggregateMetrics(mean, 0.0, 1, errs, degenerate=True)
    return AggregateMetrics(mean, float(np.std(errs, ddof=1)), len(errs), errs)


def _resolve(cfg: TrainConfig, data: DatasetSplit, spe: int) -> TrainConfig:
    loss = cfg.loss
    if loss.num_classes is None:
        loss = replace(loss, num_classes=data.num_classes)
    elif loss.num_classes != data.num_classes:
        raise ValueError(f"loss configured for {loss.num_classes} classes, data has {data.num_classes}")
    snap = cfg.snapshot
    if snap is not None and snap.steps_per_epoch is None:
        snap = replace(snap, steps_per_epoch=spe)
    return replace(cfg, loss=loss, snapshot=snap)


def train_run(data: DatasetSplit, cfg: TrainConfig, teacher: ParamSet | None = None,
              checkpoint_dir: str | Path | None = None, log=None) -> RunMetrics:
    """One complete training run.

    Per step: tick the snapshot ring (snapshot methods only), take the next
    mini-batch of a seeded per-epoch shuffle, run student and teachers, and
    apply one momentum SGD step on the selected loss.  Errors on the full
    train and test sets are recorded after every epoch.
    """
    n_train = data.x_train.shape[0]
    if n_train == 0:
        raise ValueError("training set is empty")
    if cfg.loss.method == "KD" and teacher is None:
        raise ValueError("KD training needs a teacher network")
    spe = steps_per_epoch(n_train, cfg.batch_size)
    cfg = _resolve(cfg, data, spe)
    total = cfg.epochs * spe

    started = time.perf_counter()
    params = init_params((data.n_features,) + cfg.hidden + (data.num_classes,), cfg.seed)
    velocity = params.zeros_like()
    ring: SnapshotRing | None = ring_init(params, cfg.snapshot) if cfg.snapshot else None
    order_rng = np.random.default_rng([cfg.seed, 1])
    aug_rng = np.random.default_rng([cfg.seed, 2])
    if checkpoint_dir is not None:
        checkpoint_dir = Path(checkpoint_dir)
        checkpoint_dir.mkdir(parents=True, exist_ok=True)

    records = []
    t = 0
    for epoch in range(1, cfg.epochs + 1):
        order = order_rng.permutation(n_train)
        loss_sum = 0.0
        for s in range(spe):
            t += 1
            if ring is not None:
                ring.tick(params)
            idx = order[s * cfg.batch_size:(s + 1) * cfg.batch_size]
            xb = data.x_train[idx]
            if data.augment.active:
                xb = augment_batch(xb, data.augment, data.image_shape, aug_rng)
            yb = data.y_train[idx]

            logits, cache = forward(params, xb)
            if ring is not None:
                teachers = ring.teachers(xb)
            elif teacher is not None:
                teachers = predict(teacher, xb)
            else:
                teachers = None
            res = compute_loss(cfg.loss, yb, logits, teachers)
            if not np.isfinite(res.value) or not np.all(np.isfinite(res.grad_logits)):
                raise TrainingDivergedError(t, res.value)
            grads = backward(params, cache, res.grad_logits)
            sgd_step(params, grads, velocity, lr_at(t - 1, cfg, total), cfg.momentum, cfg.weight_decay)
            loss_sum += res.value * len(idx)

        rec = EpochRecord(epoch, loss_sum / n_train,
                          error_rate(params, data.x_train, data.y_train),
                          error_rate(params, data.x_test, data.y_test))
        records.append(rec)
        if log is not None:
            log(rec)
        if checkpoint_dir is not None and cfg.checkpoint_every and (
                epoch % cfg.checkpoint_every == 0 or epoch == cfg.epochs):
            save_params(params, checkpoint_dir / f"epoch{epoch:04d}.params")
            if ring is not None:
                ring.save(checkpoint_dir / f"epoch{epoch:04d}.ring")

    return RunMetrics(records, cfg.seed, spe, total,
                      shifts=ring.shift_count if ring else 0,
                      wall_seconds=time.perf_counter() - started, params=params)


def train_protocol(data: DatasetSplit, cfg: TrainConfig, runs: int = 4, same_seed: bool = False,
                   teacher: ParamSet | None = None) -> AggregateMetrics:
    """Repeat :func:`train_run` with seeds ``seed, seed+1, ...`` and aggregate last-epoch test error."""
    if runs < 1:
        raise ValueError(f"runs must be >= 1, got {runs}")
    results = []
    for k in range(runs):
        seed = cfg.seed if same_seed else cfg.seed + k
        try:
            results.append(train_run(data, replace(cfg, seed=seed), teacher=teacher))
        except Exception as exc:
            raise RunFailedError(k, seed, exc) from exc
    agg = aggregate([r.final_test_error for r in results])
    agg.run_metrics = results
    return agg
