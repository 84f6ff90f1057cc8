"""Training: corrupt the ground truth, denoise once, combine the three losses, step Adam."""

from __future__ import annotations

import csv
import logging
import math
from collections.abc import Sequence
from dataclasses import dataclass, field
from pathlib import Path
from typing import Literal

import numpy as np
from numpy.typing import ArrayLike, NDArray
from scipy.spatial import cKDTree

from .datasyn import RegPair
from .diffusion import NoiseSchedule, draw_sample
from .exceptions import ConfigError, IoFailure, NonFiniteLoss, ShapeMismatch
from .geom3d import RigidTransform, TransformCodec, apply, as_cloud
from .hooks import TrainStepEvent, TrainStepHook
from .nnkit import GradCheckResult, adam_step, grad_check
from .regnet import BatchForward, RegistrationModel, batch_signature, save_model

logger = logging.getLogger(__name__)

FloatArray = NDArray[np.float64]
LOSS_LOG_HEADER = ("step", "epoch", "loss_total", "loss_diff", "loss_cf1", "loss_cf2", "lr")
STATE_FILE = "state.npz"


# ----------------------------------------------------------------------
# Configuration
# ----------------------------------------------------------------------
@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 100
    batch_size: int | None = None
    lr: float = 1e-4
    lr_factor: float = 0.5
    lr_patience: int = 10
    min_lr: float = 1e-6
    lambda_diff: float = 1.0
    lambda_cf1: float = 1.0
    lambda_cf2: float = 1.0
    T: int = 1000
    seed: int = 0
    checkpoint_every: int = 10

    def __post_init__(self) -> None:
        if self.epochs < 0:
            raise ConfigError("train.epochs", f"must be >= 0, got {self.epochs}")
        if self.batch_size is not None and self.batch_size < 1:
            raise ConfigError("train.batch_size", f"must be positive, got {self.batch_size}")
        if self.lr <= 0.0:
            raise ConfigError("train.lr", f"must be positive, got {self.lr}")
        weights = (self.lambda_diff, self.lambda_cf1, self.lambda_cf2)
        if any(w < 0.0 for w in weights) or not any(w > 0.0 for w in weights):
            raise ConfigError("train.lambda_diff", "loss weights must be >= 0 and not all zero")
        if self.T < 1:
            raise ConfigError("train.T", f"must be >= 1, got {self.T}")
        if self.checkpoint_every < 1:
            raise ConfigError("train.checkpoint_every", "must be positive")

    def resolved_batch_size(self, variant: str) -> int:
        if self.batch_size is not None:
            return self.batch_size
        return 8 if variant == "cb" else 32


@dataclass
class PlateauScheduler:
    """Multiply the learning rate by ``factor`` after ``patience`` rounds without improvement."""

    lr: float
    factor: float = 0.5
    patience: int = 10
    min_lr: float = 1e-6
    best: float = math.inf
    bad_rounds: int = 0

    def step(self, metric: float) -> float:
        if metric < self.best:
            self.best = metric
            self.bad_rounds = 0
            return self.lr
        self.bad_rounds += 1
        if self.bad_rounds > self.patience:
            new_lr = max(self.lr * self.factor, self.min_lr)
            if new_lr < self.lr:
                logger.warning("learning rate decayed %.3g -> %.3g", self.lr, new_lr)
            self.lr = new_lr
            self.bad_rounds = 0
        return self.lr


# ----------------------------------------------------------------------
# Losses
# ----------------------------------------------------------------------
def loss_diff(g_pred: ArrayLike, g0: ArrayLike) -> float:
    """0.5 |g_pred - g0|^2."""
    return loss_diff_grad(g_pred, g0)[0]


def loss_diff_grad(g_pred: ArrayLike, g0: ArrayLike) -> tuple[float, FloatArray]:
    pred = np.asarray(g_pred, dtype=np.float64)
    target = np.asarray(g0, dtype=np.float64)
    if pred.shape != target.shape:
        raise ShapeMismatch(f"prediction {pred.shape} vs target {target.shape}")
    delta = pred - target
    return 0.5 * float(delta @ delta), delta


NearestMethod = Literal["kdtree", "brute"]


def nearest_indices(
    points: FloatArray, queries: FloatArray, method: NearestMethod = "kdtree"
) -> NDArray[np.intp]:
    """Index into ``points`` of the exact nearest neighbour of every query."""
    if method == "kdtree":
        _, index = cKDTree(points).query(queries, k=1)
        return np.asarray(index, dtype=np.intp)
    dist2 = ((queries[:, None, :] - points[None, :, :]) ** 2).sum(axis=2)
    return np.argmin(dist2, axis=1)


def chamfer_grad(
    moved: ArrayLike, template: ArrayLike, method: NearestMethod = "kdtree"
) -> tuple[float, FloatArray]:
    """Symmetric Chamfer distance and its gradient with respect to ``moved``."""
    x = as_cloud(moved)
    q = as_cloud(template)
    to_template = x - q[nearest_indices(q, x, method)]
    back_index = nearest_indices(x, q, method)
    to_moved = q - x[back_index]
    n, m = x.shape[0], q.shape[0]
    value = float((to_template**2).sum() / n + (to_moved**2).sum() / m)
    grad = 2.0 * to_template / n
    np.add.at(grad, back_index, -2.0 * to_moved / m)
    return value, grad


def loss_chamfer(moved: ArrayLike, template: ArrayLike, method: NearestMethod = "kdtree") -> float:
    """(1/N) sum min |p - q|^2 + (1/M) sum min |q - p|^2."""
    return chamfer_grad(moved, template, method)[0]


def loss_transform_grad(
    g0_pred: RigidTransform, g_gt: RigidTransform
) -> tuple[float, FloatArray, FloatArray]:
    """|inverse(pred) gt - I|_F with gradients on the predicted rotation matrix and translation."""
    R = g0_pred.rotation_matrix
    R_gt = g_gt.rotation_matrix
    offset = g_gt.t - g0_pred.t
    rot_block = R.T @ R_gt - np.eye(3)
    trans_block = R.T @ offset
    value = math.sqrt(float((rot_block**2).sum() + trans_block @ trans_block))
    if value == 0.0:
        return 0.0, np.zeros((3, 3)), np.zeros(3)
    g_rot_block = rot_block / value
    g_trans_block = trans_block / value
    grad_rotation = R_gt @ g_rot_block.T + np.outer(offset, g_trans_block)
    grad_translation = -R @ g_trans_block
    return value, grad_rotation, grad_translation


def loss_transform(g0_pred: RigidTransform, g_gt: RigidTransform) -> float:
    return loss_transform_grad(g0_pred, g_gt)[0]


@dataclass(frozen=True)
class StepLosses:
    total: float
    diff: float
    cf1: float
    cf2: float


@dataclass
class LossGrads:
    vectors: FloatArray
    rotations: FloatArray
    translations: FloatArray


def batch_losses(
    predictions: FloatArray,
    transforms: Sequence[RigidTransform],
    pairs: Sequence[RegPair],
    codec: TransformCodec,
    cfg: TrainConfig,
) -> tuple[StepLosses, LossGrads]:
    """Batch-mean weighted losses and their gradients on predictions and decoded (R, t)."""
    count = len(pairs)
    grads = LossGrads(
        vectors=np.zeros_like(predictions),
        rotations=np.zeros((count, 3, 3)),
        translations=np.zeros((count, 3)),
    )
    sums = np.zeros(3)
    for b, (pair, transform) in enumerate(zip(pairs, transforms)):
        diff, g_vec = loss_diff_grad(predictions[b], codec.encode(pair.g_gt))
        cf1, g_moved = chamfer_grad(apply(transform, pair.source), pair.template)
        cf2, g_rot, g_trans = loss_transform_grad(transform, pair.g_gt)
        sums += (diff, cf1, cf2)
        grads.vectors[b] = cfg.lambda_diff * g_vec / count
        rotation = cfg.lambda_cf1 * g_moved.T @ pair.source + cfg.lambda_cf2 * g_rot
        translation = cfg.lambda_cf1 * g_moved.sum(axis=0) + cfg.lambda_cf2 * g_trans
        grads.rotations[b] = rotation / count
        grads.translations[b] = translation / count
    diff, cf1, cf2 = (float(v) for v in sums / count)
    total = cfg.lambda_diff * diff + cfg.lambda_cf1 * cf1 + cfg.lambda_cf2 * cf2
    return StepLosses(total=total, diff=diff, cf1=cf1, cf2=cf2), grads


# ----------------------------------------------------------------------
# Steps
# ----------------------------------------------------------------------
def _corrupt(
    model: RegistrationModel,
    pairs: Sequence[RegPair],
    sched: NoiseSchedule,
    rng: np.random.Generator,
) -> tuple[FloatArray, NDArray[np.int64]]:
    samples = [draw_sample(sched, model.codec.encode(pair.g_gt), rng) for pair in pairs]
    return np.stack([s.g_t for s in samples]), np.array([s.t for s in samples], dtype=np.int64)


def _forward_losses(
    model: RegistrationModel,
    pairs: Sequence[RegPair],
    g_t: FloatArray,
    t: NDArray[np.int64],
    cfg: TrainConfig,
) -> tuple[BatchForward, StepLosses, LossGrads]:
    forward = model.forward_batch(
        [pair.source for pair in pairs], [pair.template for pair in pairs], g_t, t
    )
    losses, grads = batch_losses(forward.predictions, forward.transforms, pairs, model.codec, cfg)
    return forward, losses, grads


def train_step(
    model: RegistrationModel,
    pairs: Sequence[RegPair],
    sched: NoiseSchedule,
    cfg: TrainConfig,
    rng: np.random.Generator,
    *,
    lr: float | None = None,
    corruption: tuple[FloatArray, NDArray[np.int64]] | None = None,
) -> StepLosses:
    """One optimizer step on a batch: every cloud encoded once, the decoder run once per pair.

    ``corruption`` pins the noised transforms and timesteps instead of drawing them from ``rng``.
    """
    if not pairs:
        raise ConfigError("train.batch_size", "empty batch")
    g_t, t = _corrupt(model, pairs, sched, rng) if corruption is None else corruption
    if g_t.shape != (len(pairs), model.dim) or t.shape != (len(pairs),):
        raise ShapeMismatch(f"corruption {g_t.shape}/{t.shape} does not fit {len(pairs)} pairs")
    forward, losses, grads = _forward_losses(model, pairs, g_t, t, cfg)
    if not all(math.isfinite(v) for v in (losses.total, losses.diff, losses.cf1, losses.cf2)):
        logger.error(
            "non-finite loss: total=%s diff=%s cf1=%s cf2=%s at t=%s",
            losses.total,
            losses.diff,
            losses.cf1,
            losses.cf2,
            t.tolist(),
        )
        raise NonFiniteLoss(f"loss became non-finite ({losses})")
    model.store.zero_grad()
    model.backward(forward, grads.vectors, grads.rotations, grads.translations)
    adam_step(model.store, lr=cfg.lr if lr is None else lr)
    return losses


def evaluate_loss(
    model: RegistrationModel,
    pairs: Sequence[RegPair],
    sched: NoiseSchedule,
    cfg: TrainConfig,
    rng: np.random.Generator,
) -> float:
    """Mean total loss without updating parameters."""
    g_t, t = _corrupt(model, pairs, sched, rng)
    _, losses, _ = _forward_losses(model, pairs, g_t, t, cfg)
    return losses.total


def overfit_pair(
    model: RegistrationModel,
    pair: RegPair,
    sched: NoiseSchedule,
    cfg: TrainConfig,
    rng: np.random.Generator,
    *,
    steps: int = 200,
    lr: float = 1e-2,
) -> list[StepLosses]:
    """Fit one pair against a single frozen corruption, cosine-annealing ``lr`` to zero.

    Returns the losses seen before each update. A healthy network and loss stack drive the
    last entry to a small fraction of the first.
    """
    if steps < 1:
        raise ConfigError("train.epochs", f"overfit needs at least one step, got {steps}")
    corruption = _corrupt(model, [pair], sched, rng)
    logger.debug("overfitting %s at t=%d", pair.meta.pair_id, int(corruption[1][0]))
    history: list[StepLosses] = []
    for k in range(steps):
        step_lr = 0.5 * lr * (1.0 + math.cos(math.pi * k / steps))
        history.append(
            train_step(model, [pair], sched, cfg, rng, lr=step_lr, corruption=corruption)
        )
    return history


def check_model_gradients(
    model: RegistrationModel,
    pairs: Sequence[RegPair],
    sched: NoiseSchedule,
    cfg: TrainConfig,
    rng: np.random.Generator,
    *,
    h: float = 1e-6,
    sample_size: int = 10_000,
) -> GradCheckResult:
    """Finite-difference check of the full training loss on a frozen batch."""
    g_t, t = _corrupt(model, pairs, sched, rng)
    last: list[BatchForward] = []

    def closure(*, backward: bool) -> float:
        forward, losses, grads = _forward_losses(model, pairs, g_t, t, cfg)
        last[:] = [forward]
        if backward:
            model.store.zero_grad()
            model.backward(forward, grads.vectors, grads.rotations, grads.translations)
        return losses.total

    return grad_check(
        closure,
        model.store,
        h,
        sample_size=sample_size,
        rng=rng,
        signature=lambda: batch_signature(last[0]),
    )


# ----------------------------------------------------------------------
# Loop
# ----------------------------------------------------------------------
@dataclass
class TrainResult:
    steps: int
    epochs: int
    history: list[StepLosses] = field(default_factory=list)
    best_metric: float = math.inf
    lr: float = 0.0


def _epoch_rng(seed: int, epoch: int) -> np.random.Generator:
    return np.random.default_rng([seed, epoch])


def _save_state(
    path: Path, model: RegistrationModel, epoch: int, scheduler: PlateauScheduler, best: float
) -> None:
    store = model.store
    arrays: dict[str, FloatArray] = {}
    for name in store.names():
        arrays[f"param/{name}"] = store.params[name]
        arrays[f"m/{name}"] = store.first_moments[name]
        arrays[f"v/{name}"] = store.second_moments[name]
    meta = np.array(
        [epoch, store.step, scheduler.lr, scheduler.best, scheduler.bad_rounds, best],
        dtype=np.float64,
    )
    try:
        with path.open("wb") as handle:
            np.savez(handle, meta=meta, **arrays)
    except OSError as exc:
        raise IoFailure(f"cannot write training state {path}: {exc}") from exc


def _load_state(
    path: Path, model: RegistrationModel, scheduler: PlateauScheduler
) -> tuple[int, float]:
    try:
        with np.load(path) as data:
            arrays = {key: np.array(data[key]) for key in data.files}
    except (OSError, ValueError) as exc:
        raise IoFailure(f"cannot read training state {path}: {exc}") from exc
    store = model.store
    store.load({name: arrays[f"param/{name}"] for name in store.names()})
    for name in store.names():
        store.first_moments[name][...] = arrays[f"m/{name}"]
        store.second_moments[name][...] = arrays[f"v/{name}"]
    epoch, step, lr, best_loss, bad_rounds, best = arrays["meta"].tolist()
    store.step = int(step)
    scheduler.lr = lr
    scheduler.best = best_loss
    scheduler.bad_rounds = int(bad_rounds)
    return int(epoch), best


def _append_rows(path: Path, rows: list[tuple[object, ...]], *, header: bool) -> None:
    try:
        with path.open("a", newline="", encoding="utf-8") as handle:
            writer = csv.writer(handle)
            if header:
                writer.writerow(LOSS_LOG_HEADER)
            writer.writerows(rows)
    except OSError as exc:
        raise IoFailure(f"cannot write loss log {path}: {exc}") from exc


def train_loop(
    model: RegistrationModel,
    dataset: Sequence[RegPair],
    sched: NoiseSchedule,
    cfg: TrainConfig,
    out_dir: str | Path,
    *,
    validation: Sequence[RegPair] | None = None,
    resume: bool = False,
    hooks: Sequence[TrainStepHook] = (),
) -> TrainResult:
    """Seeded epochs of shuffled batches with periodic, last and best checkpoints.

    Writes ``loss.csv``, ``checkpoints/epoch_XXXX.pcrd``, ``last.pcrd``, ``best.pcrd``
    (each with a JSON sidecar) and ``state.npz`` for exact resumption.
    """
    if not dataset:
        raise ConfigError("data", "training set is empty")
    out = Path(out_dir)
    try:
        (out / "checkpoints").mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise IoFailure(f"cannot create output directory {out}: {exc}") from exc
    batch_size = cfg.resolved_batch_size(model.variant)
    scheduler = PlateauScheduler(cfg.lr, cfg.lr_factor, cfg.lr_patience, cfg.min_lr)
    log_path = out / "loss.csv"
    state_path = out / STATE_FILE
    start_epoch, best = 0, math.inf
    if resume and state_path.exists():
        start_epoch, best = _load_state(state_path, model, scheduler)
        logger.info("resuming from epoch %d (step %d)", start_epoch, model.store.step)
    elif log_path.exists():
        log_path.unlink()
    result = TrainResult(
        steps=model.store.step, epochs=start_epoch, best_metric=best, lr=scheduler.lr
    )

    for epoch in range(start_epoch, cfg.epochs):
        rng = _epoch_rng(cfg.seed, epoch)
        order = rng.permutation(len(dataset))
        rows: list[tuple[object, ...]] = []
        epoch_losses: list[float] = []
        for start in range(0, len(order), batch_size):
            batch = [dataset[i] for i in order[start : start + batch_size]]
            losses = train_step(model, batch, sched, cfg, rng, lr=scheduler.lr)
            result.history.append(losses)
            epoch_losses.append(losses.total)
            step = model.store.step
            event = TrainStepEvent(
                step, epoch, losses.total, losses.diff, losses.cf1, losses.cf2, scheduler.lr
            )
            rows.append(
                (step, epoch, losses.total, losses.diff, losses.cf1, losses.cf2, scheduler.lr)
            )
            for hook in hooks:
                hook(event)

        if validation:
            val_rng = np.random.default_rng([cfg.seed, epoch, 1])
            metric = evaluate_loss(model, validation, sched, cfg, val_rng)
        else:
            metric = float(np.mean(epoch_losses))
        logger.info(
            "epoch %d: loss %.6g, monitored %.6g, lr %.3g",
            epoch,
            np.mean(epoch_losses),
            metric,
            scheduler.lr,
        )
        scheduler.step(metric)

        _append_rows(log_path, rows, header=not log_path.exists())
        if metric < best:
            best = metric
            save_model(out / "best.pcrd", model)
        if (epoch + 1) % cfg.checkpoint_every == 0:
            save_model(out / "checkpoints" / f"epoch_{epoch + 1:04d}.pcrd", model)
        save_model(out / "last.pcrd", model)
        _save_state(state_path, model, epoch + 1, scheduler, best)
        result.epochs = epoch + 1

    if not (out / "last.pcrd").exists():
        save_model(out / "last.pcrd", model)
    result.steps = model.store.step
    result.best_metric = best
    result.lr = scheduler.lr
    return result


__all__ = [
    "TrainConfig",
    "PlateauScheduler",
    "loss_diff",
    "loss_diff_grad",
    "nearest_indices",
    "chamfer_grad",
    "loss_chamfer",
    "loss_transform",
    "loss_transform_grad",
    "StepLosses",
    "LossGrads",
    "batch_losses",
    "train_step",
    "evaluate_loss",
    "overfit_pair",
    "check_model_gradients",
    "TrainResult",
    "train_loop",
    "LOSS_LOG_HEADER",
]
