"""Training loop: margin loss, manual backward, manifold Adam, epoch retraction."""
from __future__ import annotations

import csv
import math
import time
from dataclasses import dataclass, field

import numpy as np

from ..linalg import OrthogonalParam
from ..manifold import (
    AdamState,
    ManifoldAdamState,
    NonFiniteGradientError,
    adam_step,
    epoch_retraction,
    stabilized_step,
)
from ..model import LipNeXt
from .config import TrainConfig
from .data import Dataset
from .loss import margin_loss


class TrainingDivergedError(FloatingPointError):
    pass


@dataclass
class OptimizerStates:
    orth: dict
    adam: dict
    steps_per_epoch: int
    step: int = 0

    def to_tensors(self) -> dict:
        out = {"step": np.array([self.step], dtype=np.int64)}
        for name, st in self.orth.items():
            for key, arr in st.arrays().items():
                out[f"{name}/{key}"] = arr
            out[f"{name}/t"] = np.array([st.t], dtype=np.int64)
        for name, st in self.adam.items():
            for key, arr in st.arrays().items():
                out[f"{name}/{key}"] = arr
            out[f"{name}/t"] = np.array([st.t], dtype=np.int64)
        return out


def init_optimizer(model: LipNeXt, config: TrainConfig, steps_per_epoch: int) -> OptimizerStates:
    orth, adam = {}, {}
    v0 = config.v0 if config.v0 in ("inv_d", "zero") else float(config.v0)
    for name in model.parameter_names():
        val = model.get(name)
        if isinstance(val, OrthogonalParam):
            orth[name] = ManifoldAdamState.create(
                val,
                v0=v0,
                lr=config.lr,
                beta1=config.beta1,
                beta2=config.beta2,
                eps=config.eps_adam,
                k=config.lookahead_k,
                n=steps_per_epoch,
                mode=config.mode,
            )
        else:
            adam[name] = AdamState.create(
                val, lr=config.lr_adam, beta1=config.beta1, beta2=config.beta2, eps=config.eps_adam
            )
    return OptimizerStates(orth, adam, steps_per_epoch)


def eps_at(step: int, total_steps: int, config: TrainConfig) -> float:
    """Training radius: linear ramp to ``radius_factor * eps_train`` over the
    first ``warmup_frac`` of all steps, constant afterwards."""
    top = config.radius_factor * config.eps_train
    ramp = config.warmup_frac * total_steps
    if ramp <= 0:
        return top
    return top * min(1.0, step / ramp)


def lr_scale(step: int, total_steps: int, config: TrainConfig) -> float:
    """Multiplier on both learning rates: 1 throughout, or a half cosine from 1 to 0."""
    if config.lr_schedule == "constant" or total_steps <= 0:
        return 1.0
    return 0.5 * (1.0 + math.cos(math.pi * min(step, total_steps) / total_steps))


def set_learning_rates(opt: OptimizerStates, config: TrainConfig, scale: float) -> None:
    for st in opt.orth.values():
        st.lr = config.lr * scale
    for st in opt.adam.values():
        st.lr = config.lr_adam * scale


@dataclass
class EpochMetrics:
    epoch: int
    loss: float
    clean_acc: float
    drift_max: float
    seconds: float
    drift_pre: float = 0.0


def _worst_drift(model: LipNeXt) -> tuple[float, str]:
    return model.max_drift()


def apply_gradients(model: LipNeXt, opt: OptimizerStates, grads: dict) -> None:
    for name, st in opt.orth.items():
        model.set(name, stabilized_step(st, model.get(name), grads[name]))
    for name, st in opt.adam.items():
        if name in grads:
            model.set(name, adam_step(st, model.get(name), grads[name]))
    opt.step += 1


def retract_all(model: LipNeXt, opt: OptimizerStates) -> None:
    for name, st in opt.orth.items():
        model.set(name, epoch_retraction(st, model.get(name)))


def train_epoch(
    model: LipNeXt,
    opt: OptimizerStates,
    data: Dataset,
    config: TrainConfig,
    epoch: int = 0,
    rng=None,
    total_steps: int | None = None,
) -> EpochMetrics:
    t0 = time.perf_counter()
    dtype = np.float32 if config.precision == "float32" else np.float64
    n = len(data)
    order = np.arange(n) if rng is None else rng.permutation(n)
    if total_steps is None:
        total_steps = opt.steps_per_epoch * config.epochs
    loss_sum, correct = 0.0, 0
    for start in range(0, n, config.batch_size):
        idx = order[start : start + config.batch_size]
        x, y = data.images[idx], data.labels[idx]
        logits, cache = model.forward_train(x, dtype)
        eps = eps_at(opt.step, total_steps, config)
        loss, g_logits, g_V = margin_loss(logits, y, eps, model.head_V, v_grad=True)
        if not np.isfinite(loss):
            drift, name = _worst_drift(model)
            raise TrainingDivergedError(
                f"non-finite loss at step {opt.step} (epoch {epoch}); worst drift {drift:.3e} in {name}"
            )
        grads = model.backward(cache, g_logits, grad_V_extra=g_V)
        del cache
        set_learning_rates(opt, config, lr_scale(opt.step, total_steps, config))
        try:
            apply_gradients(model, opt, grads)
        except NonFiniteGradientError as exc:
            drift, name = _worst_drift(model)
            raise TrainingDivergedError(
                f"non-finite gradient at step {opt.step} (epoch {epoch}); worst drift {drift:.3e} in {name}"
            ) from exc
        loss_sum += loss * len(idx)
        correct += int(np.sum(np.argmax(logits, axis=1) == y))
    drift_pre = _worst_drift(model)[0]
    if config.retraction:
        retract_all(model, opt)
    return EpochMetrics(
        epoch,
        loss_sum / n,
        correct / n,
        _worst_drift(model)[0],
        time.perf_counter() - t0,
        drift_pre,
    )


def accuracy(model: LipNeXt, data: Dataset, batch_size: int = 512, dtype=np.float64) -> float:
    hits = 0
    for start in range(0, len(data), batch_size):
        sl = slice(start, start + batch_size)
        hits += int(np.sum(np.argmax(model.logits(data.images[sl], dtype), axis=1) == data.labels[sl]))
    return hits / len(data)


METRIC_COLUMNS = ("epoch", "loss", "clean_acc", "drift_max", "seconds")


@dataclass
class FitResult:
    model: LipNeXt
    optimizer: OptimizerStates
    history: list = field(default_factory=list)


def fit(config: TrainConfig, train: Dataset, n_classes: int = 10, log=None) -> FitResult:
    """Train from a fresh seeded initialisation; ``config.metrics`` (if set) receives a CSV row per epoch."""
    rng = np.random.default_rng(config.seed)
    spec = config.model_spec(train.input_shape, n_classes)
    model = LipNeXt.init(spec, rng)
    steps = -(-len(train) // config.batch_size)
    opt = init_optimizer(model, config, steps)
    history = []
    writer = fh = None
    if config.metrics:
        fh = open(config.metrics, "w", newline="")
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(METRIC_COLUMNS)
    try:
        for epoch in range(config.epochs):
            m = train_epoch(model, opt, train, config, epoch, rng, steps * config.epochs)
            history.append(m)
            if writer:
                writer.writerow([m.epoch, f"{m.loss:.6f}", f"{m.clean_acc:.6f}", f"{m.drift_max:.3e}", f"{m.seconds:.2f}"])
                fh.flush()
            if log:
                log(
                    f"epoch {m.epoch}: loss {m.loss:.4f} train_acc {m.clean_acc:.4f} "
                    f"drift {m.drift_max:.2e} ({m.seconds:.1f}s)"
                )
    finally:
        if fh:
            fh.close()
    return FitResult(model, opt, history)
