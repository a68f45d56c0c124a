"""Training loop: Adam with exponential LR decay, losses, metrics, k-fold.

Losses return (scalar, gradient-w.r.t.-prediction) pairs so the caller can
feed the gradient straight into the model's manual backward pass.
"""

import json
import math
import os
import time
from dataclasses import dataclass, field, asdict

import numpy as np

from .models import save_checkpoint

__all__ = [
    "Adam", "lr_at_epoch", "cross_entropy", "bce_with_logits", "mse",
    "accuracy", "iou", "psnr", "kfold_indices", "TrainConfig", "FitResult",
    "fit", "evaluate", "DivergenceError", "TASKS",
]

TASKS = ("classification", "segmentation", "denoising")

BCE_LOGIT_CLIP = 30.0


class DivergenceError(RuntimeError):
    """Raised when a run produces non-finite loss or gradients."""


def lr_at_epoch(epoch, base=1e-3, decay=0.9):
    """Exponential schedule: base * decay**epoch."""
    if epoch < 0:
        raise ValueError(f"epoch must be >= 0, got {epoch}")
    return base * decay ** epoch


class Adam:
    """Standard Adam over a list of Param objects.

    L2 is added to the gradient of every parameter whose ``l2`` flag is set
    (convolution/FC weights and biases); Gabor theta/lambda/sigma carry
    ``l2=False`` and are updated from their data gradient alone.
    """

    BETA1 = 0.9
    BETA2 = 0.999
    EPS = 1e-8

    def __init__(self, params, l2=1e-7):
        self.params = [p for p in params if p.trainable]
        self.l2 = l2
        self.m = [np.zeros_like(p.value, dtype=np.float64) for p in self.params]
        self.v = [np.zeros_like(p.value, dtype=np.float64) for p in self.params]
        self.t = 0

    def step(self, lr):
        """Apply one update.  If any gradient is non-finite, no parameter is
        touched and the offending name is raised in a DivergenceError."""
        for p in self.params:
            if not np.isfinite(p.grad).all():
                raise DivergenceError(
                    f"non-finite gradient in parameter {p.name!r}; step aborted")
        self.t += 1
        b1t = 1.0 - self.BETA1 ** self.t
        b2t = 1.0 - self.BETA2 ** self.t
        for p, m, v in zip(self.params, self.m, self.v):
            g = p.grad.astype(np.float64)
            if self.l2 and p.l2:
                g = g + self.l2 * p.value
            m *= self.BETA1
            m += (1.0 - self.BETA1) * g
            v *= self.BETA2
            v += (1.0 - self.BETA2) * g * g
            update = lr * (m / b1t) / (np.sqrt(v / b2t) + self.EPS)
            p.value -= update.astype(p.value.dtype)


# ---------------------------------------------------------------------------
# losses (each returns (mean loss, gradient w.r.t. first argument))
# ---------------------------------------------------------------------------

def cross_entropy(logits, labels):
    """Softmax cross-entropy, mean over the batch."""
    logits = np.asarray(logits, dtype=np.float64)
    labels = np.asarray(labels)
    n, k = logits.shape
    if labels.min() < 0 or labels.max() >= k:
        raise ValueError(
            f"label out of range: got min {labels.min()} max {labels.max()} "
            f"for {k} classes")
    z = logits - logits.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    loss = -logp[np.arange(n), labels].mean()
    grad = np.exp(logp)
    grad[np.arange(n), labels] -= 1.0
    return loss, grad / n


def bce_with_logits(logits, targets):
    """Binary cross-entropy on logits, clipped at +/-30, mean over elements."""
    z = np.clip(np.asarray(logits, dtype=np.float64),
                -BCE_LOGIT_CLIP, BCE_LOGIT_CLIP)
    t = np.asarray(targets, dtype=np.float64)
    # log(1 + e^z) computed stably
    loss = (np.logaddexp(0.0, z) - t * z).mean()
    p = 1.0 / (1.0 + np.exp(-z))
    return loss, (p - t) / z.size


def mse(pred, target):
    d = np.asarray(pred, dtype=np.float64) - np.asarray(target, dtype=np.float64)
    return float((d * d).mean()), 2.0 * d / d.size


# ---------------------------------------------------------------------------
# metrics
# ---------------------------------------------------------------------------

def accuracy(logits, labels):
    return float((np.argmax(logits, axis=1) == np.asarray(labels)).mean())


def iou(pred_mask, gt, threshold=0.5):
    """Intersection over union of binarized masks.  Empty union counts as a
    perfect match when the ground truth is also empty, otherwise zero."""
    p = np.asarray(pred_mask) >= threshold
    g = np.asarray(gt) >= threshold
    union = np.logical_or(p, g).sum()
    if union == 0:
        return 1.0
    return float(np.logical_and(p, g).sum() / union)


def psnr(pred, target, peak=1.0):
    """10*log10(peak^2 / MSE); identical inputs report +inf."""
    err = float(((np.asarray(pred, np.float64) -
                  np.asarray(target, np.float64)) ** 2).mean())
    if err == 0.0:
        return math.inf
    return 10.0 * math.log10(peak * peak / err)


# ---------------------------------------------------------------------------
# data splitting
# ---------------------------------------------------------------------------

def kfold_indices(n, k, seed=0):
    """Shuffled partition of range(n) into k folds; returns a list of
    (train_indices, val_indices) pairs covering every fold once."""
    if not 2 <= k <= n:
        raise ValueError(f"need 2 <= folds <= n, got k={k}, n={n}")
    perm = np.random.default_rng(seed).permutation(n)
    folds = np.array_split(perm, k)
    out = []
    for i in range(k):
        val = folds[i]
        train = np.concatenate([folds[j] for j in range(k) if j != i])
        out.append((np.sort(train), np.sort(val)))
    return out


# ---------------------------------------------------------------------------
# fit
# ---------------------------------------------------------------------------

@dataclass
class TrainConfig:
    epochs: int = 10
    batch_size: int = 64
    base_lr: float = 1e-3
    lr_decay: float = 0.9
    l2: float = 1e-7
    seed: int = 0
    log_path: str = None          # JSONL, one record per epoch
    checkpoint_path: str = None   # best-validation model


@dataclass
class FitResult:
    history: list
    best_epoch: int
    best_metric: float
    diverged: bool = False


_TASK_FNS = {
    "classification": (cross_entropy, accuracy, True),
    "segmentation": (bce_with_logits, iou, True),
    "denoising": (mse, psnr, True),
}


def _batches(n, batch_size, order=None):
    idx = np.arange(n) if order is None else order
    for s in range(0, n, batch_size):
        yield idx[s:s + batch_size]


def predict(model, X, batch_size=64):
    outs = [model.forward(X[b], train=False)
            for b in _batches(X.shape[0], batch_size)]
    return np.concatenate(outs, axis=0)


def evaluate(model, X, y, task, batch_size=64):
    """Mean task metric over a dataset (eval mode)."""
    _, metric_fn, _ = _TASK_FNS[task]
    pred = predict(model, X, batch_size)
    if task == "classification":
        return metric_fn(pred, y)
    # dense tasks: average the per-sample metric, sigmoid for masks
    vals = []
    for i in range(pred.shape[0]):
        p = pred[i, 0]
        if task == "segmentation":
            p = 1.0 / (1.0 + np.exp(-np.clip(p, -BCE_LOGIT_CLIP, BCE_LOGIT_CLIP)))
        vals.append(metric_fn(p, y[i]))
    finite = [v for v in vals if math.isfinite(v)]
    return float(np.mean(finite)) if finite else math.inf


def _snapshot(model):
    params = [(p, p.value.copy()) for _, p in model.named_params()]
    bufs = [(layer, attr, getattr(layer, attr).copy())
            for _, layer, attr in model.buffers()]
    return params, bufs


def _restore(model, snap):
    params, bufs = snap
    for p, val in params:
        p.value[...] = val
    for layer, attr, val in bufs:
        setattr(layer, attr, val.copy())


def _dense_target(y, task):
    return y[:, None].astype(np.float64) if y.ndim == 3 else y


def fit(model, train_data, val_data, task, cfg: TrainConfig) -> FitResult:
    """Train `model` on (X, y) pairs; deterministic given cfg.seed.

    Retains the best-validation state: the model is left at its best epoch,
    and cfg.checkpoint_path (if set) holds that state on disk.  A non-finite
    loss or gradient halts the run at the last good state.
    """
    if task not in _TASK_FNS:
        raise ValueError(f"unknown task {task!r}; expected one of {TASKS}")
    loss_fn, _, higher_better = _TASK_FNS[task]
    Xtr, ytr = train_data
    Xva, yva = val_data
    if task != "classification":
        ytr = _dense_target(ytr, task)
        yva_m = yva
    rng = np.random.default_rng(cfg.seed)
    opt = Adam(model.params(), l2=cfg.l2)

    history = []
    best = -math.inf if higher_better else math.inf
    best_epoch = -1
    best_snap = _snapshot(model)
    diverged = False

    for epoch in range(cfg.epochs):
        t0 = time.perf_counter()
        lr = lr_at_epoch(epoch, cfg.base_lr, cfg.lr_decay)
        order = rng.permutation(Xtr.shape[0])
        losses = []
        try:
            for b in _batches(Xtr.shape[0], cfg.batch_size, order):
                out = model.forward(Xtr[b], train=True)
                loss, grad = loss_fn(out, ytr[b])
                if not math.isfinite(loss):
                    raise DivergenceError(f"non-finite loss at epoch {epoch}")
                model.zero_grads()
                model.backward(grad)
                opt.step(lr)
                losses.append(loss)
        except DivergenceError:
            diverged = True
        val_metric = evaluate(model, Xva, yva, task, cfg.batch_size)
        rec = {
            "epoch": epoch,
            "lr": lr,
            "train_loss": float(np.mean(losses)) if losses else math.nan,
            "val_metric": val_metric,
            "wall_time": time.perf_counter() - t0,
        }
        history.append(rec)
        if cfg.log_path:
            with open(cfg.log_path, "a") as f:
                f.write(json.dumps(rec) + "\n")
        improved = (val_metric > best) if higher_better else (val_metric < best)
        if math.isfinite(val_metric) and improved and not diverged:
            best, best_epoch = val_metric, epoch
            best_snap = _snapshot(model)
            if cfg.checkpoint_path:
                save_checkpoint(cfg.checkpoint_path, model,
                                extra={"epoch": epoch, "val_metric": val_metric,
                                       "task": task})
        if diverged:
            break

    _restore(model, best_snap)
    if cfg.log_path:
        summary = {"summary": True, "best_epoch": best_epoch,
                   "best_metric": best, "diverged": diverged}
        with open(cfg.log_path, "a") as f:
            f.write(json.dumps(summary) + "\n")
    return FitResult(history=history, best_epoch=best_epoch,
                     best_metric=best, diverged=diverged)
