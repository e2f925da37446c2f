"""AdamW, the reduce-on-plateau learning-rate rule and the training loop."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import tensor as T
from .tensor import ContractError, Tensor

log = logging.getLogger(__name__)

__all__ = [
    "TrainConfig",
    "OptimizerState",
    "NumericError",
    "adamw_step",
    "AdamW",
    "PlateauState",
    "plateau_schedule",
    "fit",
    "EpochRecord",
    "write_epoch_log",
]


class NumericError(RuntimeError):
    """Training produced a non-finite loss."""


@dataclass
class TrainConfig:
    epochs: int = 75
    batch: int = 16
    lr: float = 2e-3
    eps: float = 1e-8
    betas: tuple[float, float] = (0.9, 0.999)
    weight_decay: float = 1e-2
    plateau_patience: int = 15
    plateau_factor: float = 0.1
    seed: int = 0

    def __post_init__(self) -> None:
        self.betas = tuple(float(b) for b in self.betas)  # type: ignore[assignment]
        if self.epochs < 1 or self.plateau_patience < 1:
            raise ContractError("epochs and plateau_patience must be positive")
        if self.batch < 2:
            raise ContractError(f"batch must be >= 2 for batch-norm statistics, got {self.batch}")
        if self.lr <= 0 or self.eps <= 0 or self.weight_decay < 0:
            raise ContractError("lr and eps must be positive, weight_decay non-negative")
        if not all(0.0 < b < 1.0 for b in self.betas):
            raise ContractError(f"betas must lie in (0, 1), got {self.betas}")
        if not 0.0 < self.plateau_factor < 1.0:
            raise ContractError(f"plateau_factor must lie in (0, 1), got {self.plateau_factor}")


@dataclass
class OptimizerState:
    step: int = 0
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)
    # fp32 copies of fp16 parameters, None for wider ones
    master: list[np.ndarray | None] = field(default_factory=list)


def adamw_step(
    params: Sequence[Tensor],
    grads: Sequence[np.ndarray | None],
    state: OptimizerState,
    cfg: TrainConfig,
    lr: float | None = None,
) -> OptimizerState:
    """One bias-corrected AdamW update with decoupled weight decay, in place.

    ``theta <- theta - lr * (m_hat / (sqrt(v_hat) + eps) + wd * theta)``.
    A missing gradient is treated as zero.  fp16 parameters are updated
    through an fp32 master copy.
    """
    lr = cfg.lr if lr is None else lr
    b1, b2 = cfg.betas
    if not state.m:
        for p in params:
            wide = np.float64 if p.data.dtype == np.float64 else np.float32
            state.m.append(np.zeros(p.shape, dtype=wide))
            state.v.append(np.zeros(p.shape, dtype=wide))
            state.master.append(p.data.astype(np.float32) if p.data.dtype == np.float16 else None)
    if len(state.m) != len(params) or len(grads) != len(params):
        raise ContractError(f"{len(params)} parameters, {len(grads)} gradients, {len(state.m)} moment buffers")
    state.step += 1
    bc1 = 1.0 - b1**state.step
    bc2 = 1.0 - b2**state.step
    for i, (p, g) in enumerate(zip(params, grads)):
        m, v = state.m[i], state.v[i]
        if g is None:
            g = np.zeros_like(m)
        elif g.shape != p.shape:
            raise ContractError(f"gradient shape {g.shape} != parameter shape {p.shape}")
        g = g.astype(m.dtype, copy=False)
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        theta = state.master[i] if state.master[i] is not None else p.data
        update = (m / bc1) / (np.sqrt(v / bc2) + cfg.eps) + cfg.weight_decay * theta
        theta -= (lr * update).astype(theta.dtype, copy=False)
        if state.master[i] is not None:
            p.data = theta.astype(np.float16)
    return state


class AdamW:
    """Stateful wrapper around :func:`adamw_step` for a fixed parameter list."""

    def __init__(self, params: Sequence[Tensor], cfg: TrainConfig):
        self.params = list(params)
        self.cfg = cfg
        self.state = OptimizerState()
        self.lr = cfg.lr

    def step(self) -> None:
        adamw_step(self.params, [p.grad for p in self.params], self.state, self.cfg, self.lr)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None


@dataclass
class PlateauState:
    lr: float
    best: float = math.inf
    bad_epochs: int = 0
    reductions: int = 0


def plateau_schedule(
    history: Sequence[float],
    state: PlateauState | None = None,
    *,
    lr: float = 2e-3,
    patience: int = 15,
    factor: float = 0.1,
) -> PlateauState:
    """Feed per-epoch validation losses to the plateau rule and return the state.

    After ``patience`` consecutive epochs without a new best loss the rate is
    multiplied by ``factor`` and the counter restarts.
    """
    state = PlateauState(lr) if state is None else state
    for loss in history:
        if loss < state.best:
            state.best = loss
            state.bad_epochs = 0
        else:
            state.bad_epochs += 1
            if state.bad_epochs >= patience:
                state.lr *= factor
                state.reductions += 1
                state.bad_epochs = 0
    return state


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_loss: float
    lr: float
    train_acc: float
    val_acc: float


LOG_FIELDS = ("epoch", "train_loss", "val_loss", "lr", "train_acc", "val_acc")


def write_epoch_log(records: Sequence[EpochRecord], path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(LOG_FIELDS)
        for r in records:
            writer.writerow([r.epoch, repr(r.train_loss), repr(r.val_loss), repr(r.lr),
                             repr(r.train_acc), repr(r.val_acc)])


def read_epoch_log(path: str | Path) -> list[EpochRecord]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    return [EpochRecord(int(r["epoch"]), *(float(r[k]) for k in LOG_FIELDS[1:])) for r in rows]


def _as_arrays(data) -> tuple[np.ndarray, np.ndarray]:
    if isinstance(data, tuple):
        x, y = data
        return np.asarray(x), np.asarray(y, dtype=np.int64)
    return data.images(), data.labels()


def evaluate_loss(model, x: np.ndarray, y: np.ndarray, batch: int) -> tuple[float, np.ndarray]:
    """Mean cross-entropy and argmax predictions in evaluation mode."""
    was_training = model.training
    model.eval()
    total, preds = 0.0, []
    with T.no_grad():
        for lo in range(0, len(x), batch):
            out = model(x[lo : lo + batch])
            total += T.cross_entropy(out.logits, y[lo : lo + batch]).item() * len(y[lo : lo + batch])
            preds.append(out.probs.data.argmax(axis=1))
    model.train(was_training)
    return total / max(len(x), 1), np.concatenate(preds) if preds else np.zeros(0, dtype=np.int64)


def _param_norms(model) -> str:
    norms = [(n, float(np.linalg.norm(p.data.astype(np.float64)))) for n, p in model.named_parameters()]
    worst = sorted(norms, key=lambda t: -t[1] if math.isfinite(t[1]) else -math.inf)[:5]
    bad = [n for n, v in norms if not math.isfinite(v)]
    return f"largest parameter norms {worst}; non-finite: {bad[:5]}"


def fit(model, train, val, cfg: TrainConfig, *, on_epoch=None) -> tuple[object, list[EpochRecord]]:
    """Train ``model`` in place with mean cross-entropy, AdamW and the plateau rule.

    ``train`` and ``val`` are datasets or ``(images, labels)`` pairs.  Each
    epoch shuffles with a generator seeded from ``(cfg.seed, epoch)``.
    ``on_epoch`` sees each record as it is produced; a truthy return stops
    training early.  Returns the model and one :class:`EpochRecord` per epoch.
    """
    xtr, ytr = _as_arrays(train)
    xva, yva = _as_arrays(val)
    if len(xtr) == 0 or len(xva) == 0:
        raise ContractError("training and validation sets must be non-empty")
    params = model.parameters()
    opt = AdamW(params, cfg)
    plateau = PlateauState(cfg.lr)
    records: list[EpochRecord] = []
    for epoch in range(1, cfg.epochs + 1):
        model.train()
        order = np.random.default_rng([cfg.seed, epoch]).permutation(len(xtr))
        lr_used = plateau.lr
        opt.lr = lr_used
        loss_sum, correct = 0.0, 0
        for b, lo in enumerate(range(0, len(order), cfg.batch)):
            idx = order[lo : lo + cfg.batch]
            if len(idx) < 2:
                # batch norm needs two samples; fold the straggler into the next epoch
                continue
            out = model(xtr[idx])
            loss = T.cross_entropy(out.logits, ytr[idx])
            value = loss.item()
            if not math.isfinite(value):
                raise NumericError(f"epoch {epoch}, batch {b}: loss is {value}; {_param_norms(model)}")
            opt.zero_grad()
            loss.backward()
            opt.step()
            loss_sum += value * len(idx)
            correct += int((out.probs.data.argmax(axis=1) == ytr[idx]).sum())
        seen = len(order) - (len(order) % cfg.batch == 1)
        val_loss, val_pred = evaluate_loss(model, xva, yva, cfg.batch)
        if not math.isfinite(val_loss):
            raise NumericError(f"epoch {epoch}: validation loss is {val_loss}; {_param_norms(model)}")
        plateau_schedule([val_loss], plateau, patience=cfg.plateau_patience, factor=cfg.plateau_factor)
        rec = EpochRecord(epoch, loss_sum / seen, val_loss, lr_used, correct / seen, float((val_pred == yva).mean()))
        records.append(rec)
        log.info("epoch %d: train_loss=%.4f val_loss=%.4f lr=%.2e train_acc=%.4f val_acc=%.4f",
                 rec.epoch, rec.train_loss, rec.val_loss, rec.lr, rec.train_acc, rec.val_acc)
        if on_epoch is not None and on_epoch(rec):
            break
    return model, records


def config_dict(cfg: TrainConfig) -> dict:
    d = asdict(cfg)
    d["betas"] = list(cfg.betas)
    return d
