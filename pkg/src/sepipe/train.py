"""Rectified Adam and a minibatch training loop with early stopping."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, replace

import numpy as np

from .errors import ConfigError, DataError, DimensionError
from .models import predict

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    epochs_max: int = 20
    batch_size: int = 32
    learning_rate: float = 1e-3
    early_stop_patience: int = 3
    val_fraction: float = 0.1
    seed: int = 0

    def __post_init__(self):
        if self.early_stop_patience < 1:
            raise ConfigError(f"early_stop_patience must be >= 1, got {self.early_stop_patience}")
        if not 0 < self.val_fraction < 1:
            raise ConfigError(f"val_fraction must be in (0, 1), got {self.val_fraction}")
        if self.epochs_max < 1 or self.batch_size < 1:
            raise ConfigError("epochs_max and batch_size must be >= 1")
        if not self.learning_rate > 0:
            raise ConfigError(f"learning_rate must be > 0, got {self.learning_rate}")

    @classmethod
    def from_dict(cls, d):
        return cls(**{k: v for k, v in d.items() if k in cls.__dataclass_fields__})


@dataclass
class RAdamState:
    m: dict
    v: dict
    t: int = 0


def radam_init(params):
    return RAdamState({k: np.zeros_like(p) for k, p in params.items()},
                      {k: np.zeros_like(p) for k, p in params.items()})


def radam_step(params, grads, state, lr, beta1=0.9, beta2=0.999, eps=1e-8, t=None):
    """One Rectified Adam update. Returns (new_params, new_state); inputs are not mutated."""
    t = state.t + 1 if t is None else t
    if t < 1:
        raise ConfigError(f"step t must be >= 1, got {t}")
    rho_inf = 2.0 / (1.0 - beta2) - 1.0
    b2t = beta2 ** t
    rho_t = rho_inf - 2.0 * t * b2t / (1.0 - b2t)
    bias1 = 1.0 - beta1 ** t
    rect = None
    if rho_t > 4.0:
        rect = math.sqrt((rho_t - 4) * (rho_t - 2) * rho_inf / ((rho_inf - 4) * (rho_inf - 2) * rho_t))
    new_p, new_m, new_v = {}, {}, {}
    for k, p in params.items():
        g = grads.get(k)
        if g is None:
            new_p[k], new_m[k], new_v[k] = p, state.m[k], state.v[k]
            continue
        if g.shape != p.shape or state.m[k].shape != p.shape:
            raise DimensionError(f"{k}: param {p.shape}, grad {g.shape}, state {state.m[k].shape}")
        m = beta1 * state.m[k] + (1 - beta1) * g
        v = beta2 * state.v[k] + (1 - beta2) * g * g
        m_hat = m / bias1
        if rect is not None:
            v_hat = np.sqrt(v / (1.0 - b2t))
            step = lr * rect * m_hat / (v_hat + eps)
        else:
            step = lr * m_hat
        new_p[k] = (p - step).astype(p.dtype)
        new_m[k], new_v[k] = m, v
    return new_p, RAdamState(new_m, new_v, t)


def accuracy(model, x, y, batch_size=128):
    correct = 0
    for i in range(0, len(y), batch_size):
        correct += int((predict(model, x[i:i + batch_size]) == y[i:i + batch_size]).sum())
    return correct / len(y)


def split_train_val(n, val_fraction, seed):
    perm = np.random.default_rng(seed).permutation(n)
    n_val = min(n - 1, max(1, int(round(n * val_fraction))))
    return perm[n_val:], perm[:n_val]


def train(model, dataset, tc, progress=None):
    """Fit ``model`` on ``dataset = (x, y)``; x is N x S x S in [0, 1], y holds 0/1 labels.

    Returns ``(trained_model, history)``; the parameters come from the epoch
    with the best validation accuracy.
    """
    x, y = dataset
    x = np.asarray(x, dtype=np.float32)
    y = np.asarray(y, dtype=np.int64)
    if len(y) == 0:
        raise DataError("cannot train on an empty dataset")
    if len(np.unique(y)) < 2:
        raise DataError("training data must contain both classes")
    if x.ndim == 3:
        x = x[:, None]
    tr_idx, val_idx = split_train_val(len(y), tc.val_fraction, tc.seed)
    rng = np.random.default_rng(tc.seed + 1)
    params = {k: v.copy() for k, v in model.params.items()}
    state = radam_init(params)
    best_acc, best_params, wait = -1.0, params, 0
    history = []
    for epoch in range(tc.epochs_max):
        order = tr_idx[rng.permutation(len(tr_idx))]
        losses = []
        for i in range(0, len(order), tc.batch_size):
            b = order[i:i + tc.batch_size]
            current = replace(model, params=params)
            ptensors = current.tensors(requires_grad=True)
            loss = current.loss(x[b], y[b], ptensors)
            loss.backward()
            grads = {k: t.grad for k, t in ptensors.items()}
            params, state = radam_step(params, grads, state, tc.learning_rate)
            losses.append(loss.item())
        val_acc = accuracy(replace(model, params=params), x[val_idx], y[val_idx])
        history.append({"epoch": epoch + 1, "train_loss": float(np.mean(losses)), "val_accuracy": val_acc})
        log.info("epoch %d loss %.4f val_acc %.4f", epoch + 1, history[-1]["train_loss"], val_acc)
        if progress is not None:
            progress(history[-1])
        if val_acc > best_acc:
            best_acc, best_params, wait = val_acc, params, 0
        else:
            wait += 1
            if wait >= tc.early_stop_patience:
                break
    trained = replace(model, params=best_params, trained=True,
                      meta={**model.meta, "history": history, "best_val_accuracy": best_acc})
    return trained, history
