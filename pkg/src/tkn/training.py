"""Training and evaluation loops."""
from __future__ import annotations

import contextlib
import logging
import math
from dataclasses import dataclass, fields
from typing import Callable, Dict, List, Optional, Tuple

import numpy as np

from . import flops
from .data import LabeledImageSet, batches
from .exceptions import ConfigError, NumericalError
from .network import Model, NetworkSpec, init_weights
from .optim import NesterovSGD, step_lr
from .tensor import softmax_xent

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    batch_size: int = 128
    epochs: int = 20
    lr: float = 0.1
    lr_div: float = 10.0
    milestones: Optional[Tuple[int, ...]] = None
    weight_decay: float = 1e-4
    momentum: float = 0.9
    l2_attention: float = 1e-4
    beta: float = 4.0
    family: str = "cauchy"
    seed: int = 0

    def __post_init__(self):
        if self.milestones is None:
            self.milestones = default_milestones(self.epochs)
        self.milestones = tuple(int(m) for m in self.milestones)
        self.validate()

    def validate(self) -> None:
        for name in ("lr", "lr_div", "weight_decay", "momentum", "l2_attention", "beta"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0")
        if self.batch_size < 1 or self.epochs < 0:
            raise ConfigError("batch_size must be >= 1 and epochs >= 0")
        ms = self.milestones
        if any(b <= a for a, b in zip(ms, ms[1:])) or any(m >= self.epochs or m < 0 for m in ms):
            raise ConfigError(f"milestones {ms} must be strictly increasing and < epochs ({self.epochs})")

    def as_dict(self) -> Dict[str, object]:
        return {f.name: getattr(self, f.name) for f in fields(self)}


def default_milestones(epochs: int) -> Tuple[int, ...]:
    """Divide the rate at half and three quarters of the run (10 and 15 of 20)."""
    ms = sorted({round(epochs * 0.5), round(epochs * 0.75)})
    return tuple(m for m in ms if 0 < m < epochs)


@contextlib.contextmanager
def deterministic():
    """Single-threaded BLAS so reductions happen in a fixed order."""
    from threadpoolctl import threadpool_limits

    with threadpool_limits(limits=1):
        yield


def evaluate(model: Model, dataset: LabeledImageSet, batch_size: int = 500) -> Tuple[float, float]:
    """Returns ``(error_rate, mean_cross_entropy)`` in eval mode."""
    if len(dataset) == 0:
        raise ValueError("cannot evaluate on an empty dataset")
    wrong = 0
    loss_sum = 0.0
    for i in range(0, len(dataset), batch_size):
        x = dataset.images[i:i + batch_size]
        y = dataset.labels[i:i + batch_size]
        logits = model.forward(x)
        loss, _ = softmax_xent(logits.astype(np.float64), y)
        loss_sum += loss * len(y)
        wrong += int((logits.argmax(axis=1) != y).sum())
    return wrong / len(dataset), loss_sum / len(dataset)


def mean_scale(model: Model) -> float:
    s = [np.concatenate([l.attn.s_x, l.attn.s_y]) for _, l in model.target_layers()]
    return float(np.mean(np.concatenate(s))) if s else float("nan")


@dataclass
class TrainResult:
    model: Model
    best: Model
    history: List[Dict[str, object]]
    best_epoch: int


def train(
    spec: NetworkSpec,
    config: TrainConfig,
    train_set: LabeledImageSet,
    test_set: LabeledImageSet | None = None,
    on_epoch: Callable[[Dict[str, object]], None] | None = None,
    on_step: Callable[[int, float], None] | None = None,
    model: Model | None = None,
) -> TrainResult:
    """Train with minibatch SGD/Nesterov; gradients are batch means.

    After every epoch the model is evaluated on ``test_set`` (when given)
    and the epoch with the lowest test error is kept as ``best``.
    """
    if len(train_set) == 0:
        raise ValueError("training set is empty")
    if model is None:
        model = init_weights(spec, config.seed)
    opt = NesterovSGD(config.momentum, config.weight_decay)
    history: List[Dict[str, object]] = []
    best, best_err, best_epoch = model.copy(), math.inf, 0

    if config.epochs == 0 and test_set is not None:
        err, loss = evaluate(model, test_set)
        rec = _record(model, 0, float("nan"), float("nan"), 0.0, err, loss)
        history.append(rec)
        if on_epoch:
            on_epoch(rec)

    step = 0
    for epoch in range(config.epochs):
        lr = step_lr(epoch, config.lr, config.milestones, config.lr_div)
        loss_sum = 0.0
        for x, y in batches(train_set, config.batch_size, config.seed, epoch):
            xent, pen = model.loss_and_grad(x, y, train=True)
            if not math.isfinite(xent) or not math.isfinite(pen):
                raise NumericalError(f"loss became {xent} at epoch {epoch + 1}, step {step}")
            opt.step(model, lr)
            loss_sum += xent * len(y)
            step += 1
            if on_step:
                on_step(step, xent)
        train_loss = loss_sum / len(train_set)
        err = loss = float("nan")
        if test_set is not None:
            err, loss = evaluate(model, test_set)
            if err < best_err:
                best, best_err, best_epoch = model.copy(), err, epoch + 1
        rec = _record(model, epoch + 1, lr, train_loss, model.penalty(), err, loss)
        history.append(rec)
        log.info(" ".join(f"{k}={v}" for k, v in rec.items()))
        if on_epoch:
            on_epoch(rec)
    if test_set is None:
        best, best_epoch = model.copy(), config.epochs
    return TrainResult(model, best, history, best_epoch)


def _record(model, epoch, lr, train_loss, penalty, err, loss) -> Dict[str, object]:
    rep = flops.count(model)
    return {
        "epoch": epoch,
        "lr": lr,
        "train_loss": round(float(train_loss), 6),
        "penalty": round(float(penalty), 6),
        "test_error": round(float(err), 6),
        "test_loss": round(float(loss), 6),
        "conv_macs": rep.conv_macs,
        "flops": rep.total,
        "ratio": round(rep.ratio, 6),
        "mean_s": round(mean_scale(model), 6),
    }
