"""Objective construction and the three-phase Adam schedule with early stopping."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .models import CPB, Model, infer, save_model, snapshot, restore

LOSS_KINDS = ("mse", "poisson")

# discrete Laplacian stencil used by the first-layer smoothness penalty
_LAPLACIAN = np.array([[0.0, 1.0, 0.0],
                       [1.0, -4.0, 1.0],
                       [0.0, 1.0, 0.0]])


@dataclass
class TrainSchedule:
    phases: list = field(default_factory=lambda: [(1e-3, 300, 10),
                                                  (1e-4, 300, 10),
                                                  (1e-5, 300, 10)])
    batch_size: int = 64
    l1_readout_weight: float = 1e-3
    l1_conv_weight: float = 1e-4
    smoothness_weight: float = 1e-3
    loss_kind: str = "mse"
    seed: int = 0

    def __post_init__(self):
        if self.loss_kind not in LOSS_KINDS:
            raise ValueError(f"unknown loss kind {self.loss_kind!r}")
        lrs = [p[0] for p in self.phases]
        if any(b >= a for a, b in zip(lrs, lrs[1:])):
            raise ValueError("learning rates must be strictly decreasing across phases")
        if any(p[2] < 1 for p in self.phases):
            raise ValueError("patience must be >= 1")

    def to_dict(self):
        return {"phases": [list(p) for p in self.phases],
                "batch_size": self.batch_size,
                "l1_readout_weight": self.l1_readout_weight,
                "l1_conv_weight": self.l1_conv_weight,
                "smoothness_weight": self.smoothness_weight,
                "loss_kind": self.loss_kind, "seed": self.seed}

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        d["phases"] = [tuple(p) for p in d.get("phases", cls().phases)]
        return cls(**d)


@dataclass
class TrainHistory:
    epochs: list = field(default_factory=list)   # (phase, epoch, train_loss, val_loss)
    stop_epochs: list = field(default_factory=list)
    best_val: float = float("inf")

    def write_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["phase", "epoch", "train_loss", "val_loss"])
            for row in self.epochs:
                w.writerow([row[0], row[1], f"{row[2]:.10g}", f"{row[3]:.10g}"])


class Adam:
    """Adam with bias correction; one slot pair per parameter tensor."""

    def __init__(self, params, lr, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = list(params)
        self.lr = lr
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def step(self):
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        for p, m, v in zip(self.params, self.m, self.v):
            g = p.grad
            if g is None:
                # parameter not reached by this objective (e.g. a kernel whose
                # every path was ablated); leave it untouched
                continue
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            mhat = m / (1 - b1 ** self.t)
            vhat = v / (1 - b2 ** self.t)
            p.data -= self.lr * mhat / (np.sqrt(vhat) + self.eps)


def prediction_loss(pred: Tensor, target: np.ndarray, kind: str) -> Tensor:
    """Mean loss over neurons and images: squared error or Poisson."""
    target = np.asarray(target, dtype=np.float64)
    if pred.data.shape != target.shape:
        raise ValueError(f"shape mismatch {pred.data.shape} vs {target.shape}")
    if not (np.isfinite(pred.data).all() and np.isfinite(target).all()):
        raise ValueError("non-finite values in loss inputs")
    if kind == "mse":
        diff = ad.add_const(pred, -target)
        return ad.mean_all(ad.square(diff))
    if kind == "poisson":
        # mean(r_hat - r * ln r_hat); r_hat clamped at 1e-8 before the log
        logp = ad.log_clamped(pred, 1e-8)
        return ad.mean_all(ad.sub(pred, ad.mul_const(logp, target)))
    raise ValueError(f"unknown loss kind {kind!r}")


def per_iteration_loss(pred: Tensor, iter_preds, target, kind: str, mode: str) -> Tensor:
    """The training objective's data term: per-iteration losses averaged for
    the iteration-averaging readout modes, the single final loss otherwise."""
    if mode in ("late_avg", "two_avg"):
        if not iter_preds:
            raise ValueError("per-iteration predictions missing from the trace")
        losses = [prediction_loss(p, target, kind) for p in iter_preds]
        acc = losses[0]
        for l in losses[1:]:
            acc = ad.add(acc, l)
        return ad.scale(acc, 1.0 / len(losses))
    return prediction_loss(pred, target, kind)


def regularization(model: Model, l1_readout: float, l1_conv: float,
                   smoothness: float) -> Tensor:
    terms = []
    if l1_readout:
        r = model.readout
        terms.append(ad.scale(ad.add(ad.sum_all(ad.absval(r.spatial_mask)),
                                     ad.sum_all(ad.absval(r.feature_weights))),
                              l1_readout))
    if l1_conv:
        acc = None
        for blk in model.blocks:
            kernels = [blk.kernel] if isinstance(blk, CPB) else [blk.ff_kernel,
                                                                 blk.lateral_kernel]
            for kern in kernels:
                term = ad.sum_all(ad.absval(kern))
                acc = term if acc is None else ad.add(acc, term)
        terms.append(ad.scale(acc, l1_conv))
    if smoothness:
        first = model.blocks[0].kernel  # (C, 1, k, k)
        stencil = Tensor(_LAPLACIAN[None, None])
        lap = ad.conv2d(first, stencil, padding="valid")
        terms.append(ad.scale(ad.sum_all(ad.square(lap)), smoothness))
    if not terms:
        return Tensor(np.zeros(()))
    acc = terms[0]
    for t in terms[1:]:
        acc = ad.add(acc, t)
    return acc


def batch_objective(model: Model, x: Tensor, target: np.ndarray,
                    schedule: TrainSchedule, bn_mode: str = "train") -> Tensor:
    pred, trace = infer(model, x, bn_mode)
    data_term = per_iteration_loss(pred, trace.get("iter_preds"), target,
                                   schedule.loss_kind, model.config.readout_mode)
    reg = regularization(model, schedule.l1_readout_weight,
                         schedule.l1_conv_weight, schedule.smoothness_weight)
    return ad.add(data_term, reg)


def validation_loss(model: Model, images: np.ndarray, target: np.ndarray,
                    kind: str, batch_size: int = 256) -> float:
    total = 0.0
    with ad.no_grad():
        for i in range(0, len(images), batch_size):
            x = Tensor(images[i:i + batch_size][:, None, :, :])
            pred, _ = infer(model, x, bn_mode="eval")
            loss = prediction_loss(pred, target[i:i + batch_size], kind)
            total += float(loss.data) * len(x.data)
    return total / len(images)


def train(model: Model, dataset, schedule: TrainSchedule,
          history_path=None, checkpoint_dir=None):
    """Three sequential Adam phases with per-phase early stopping on the
    validation prediction loss; each phase restores its best parameters
    before the next begins. Returns (model, TrainHistory)."""
    tr_images, tr_trials = dataset.split_arrays("train")
    va_images, va_trials = dataset.split_arrays("val")
    if len(tr_images) == 0 or len(va_images) == 0:
        raise ValueError("empty train or validation split")
    tr_target = tr_trials.mean(axis=0)
    va_target = va_trials.mean(axis=0)

    rng = np.random.default_rng(schedule.seed)
    params = [p for _, p in model.parameters()]
    model.set_requires_grad(True)
    history = TrainHistory()

    for phase, (lr, max_epochs, patience) in enumerate(schedule.phases):
        opt = Adam(params, lr)
        best = snapshot(model)
        best_val = validation_loss(model, va_images, va_target, schedule.loss_kind)
        since_best = 0
        for epoch in range(1, max_epochs + 1):
            order = rng.permutation(len(tr_images))
            epoch_loss = 0.0
            for i in range(0, len(order), schedule.batch_size):
                idx = order[i:i + schedule.batch_size]
                x = Tensor(tr_images[idx][:, None, :, :].astype(np.float64))
                loss = batch_objective(model, x, tr_target[idx], schedule)
                if not np.isfinite(loss.data):
                    raise FloatingPointError(
                        f"non-finite training loss in phase {phase} epoch {epoch}")
                ad.zero_grads(params)
                ad.backward(loss)
                opt.step()
                epoch_loss += float(loss.data) * len(idx)
            epoch_loss /= len(order)
            val = validation_loss(model, va_images, va_target, schedule.loss_kind)
            history.epochs.append((phase, epoch, epoch_loss, val))
            if val < best_val:
                best_val = val
                best = snapshot(model)
                since_best = 0
            else:
                since_best += 1
                if since_best >= patience:
                    break
        restore(model, best)
        history.stop_epochs.append(history.epochs[-1][1] if history.epochs else 0)
        history.best_val = best_val
        if checkpoint_dir is not None:
            save_model(model, f"{checkpoint_dir}/phase{phase}.ckpt")
    model.set_requires_grad(False)
    if history_path is not None:
        history.write_csv(history_path)
    return model, history
