"""Losses, Bregman proximal-point objective, AdamW, fit loop, and metrics.

The fine-tuning objective is

    L_total = (1 - mu) * L_vanilla + mu * L_bregman

where L_bregman compares the model's outputs under the current parameters
theta against the previous optimizer iterate theta_t: symmetric KL between
the two Bernoulli outputs for classification, mean squared output
difference for regression. The theta_t branch is a constant; gradients
flow only through theta. mu = 0 skips the Bregman branch entirely, so such
a run is bit-identical to plain vanilla-loss training.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .errors import ConfigError, DataError
from .tensor import ParamStore, Tape, Tensor, backward

CLAMP = 1e-7  # probability clamp before any log

METRICS = ("auc", "ap", "rmse")


class UndefinedMetricError(ValueError):
    """Metric has no value on this label set (e.g. single-class AUC)."""


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-3
    batch_size: int = 32
    epochs: int = 10
    mu: float = 0.0
    beta1: float = 0.9
    beta2: float = 0.999
    weight_decay: float = 0.0
    eps: float = 1e-8
    seed: int = 0
    patience: int = 0  # 0 disables early stopping
    eval_metric: str = "auc"
    mask_fraction: float = 0.15  # masked-node pretraining only

    def __post_init__(self):
        if not (0.0 <= self.mu < 1.0):
            raise ConfigError(f"mu={self.mu} outside [0, 1)")
        if self.eval_metric not in METRICS:
            raise ConfigError(f"eval_metric must be one of {METRICS}")
        if self.batch_size < 1 or self.epochs < 0:
            raise ConfigError("batch_size >= 1 and epochs >= 0 required")


@dataclass
class TrainState:
    """Optimizer state plus the previous iterate theta_t for the Bregman term."""

    store: ParamStore
    trainable: list[str]
    theta_t: dict[str, np.ndarray]
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int = 0
    history: list[dict] = field(default_factory=list)


def init_train_state(store: ParamStore) -> TrainState:
    names = store.trainable_names()
    snap = store.snapshot(names)
    zeros = lambda: {n: np.zeros_like(store.get(n).tensor.data) for n in names}
    return TrainState(store=store, trainable=names, theta_t=snap, m=zeros(), v=zeros())


# ---------------------------------------------------------------------------
# Losses.


def _as_probs(preds: Tensor) -> Tensor:
    return T.clip(preds, CLAMP, 1.0 - CLAMP)


def vanilla_loss(preds: Tensor, labels: np.ndarray, task: str) -> Tensor:
    """Mean BCE (clamped) for classification, mean squared error for regression."""
    labels = np.asarray(labels, dtype=np.float64)
    if task == "clf":
        if not np.all((labels == 0.0) | (labels == 1.0)):
            raise DataError("classification labels must be 0 or 1")
        y = Tensor(labels)
        p = _as_probs(preds)
        ll = T.add(T.mul(y, T.log(p)), T.mul(Tensor(1.0 - labels), T.log(T.sub(1.0, p))))
        return T.mul(T.sum_all(ll), -1.0 / labels.size)
    if task == "reg":
        d = T.sub(preds, Tensor(labels))
        return T.mul(T.sum_all(T.mul(d, d)), 1.0 / labels.size)
    raise ConfigError(f"unknown task {task!r}")


def bregman_divergence(out_theta: Tensor, out_theta_t: Tensor, task: str) -> Tensor:
    """Output-space divergence between current and previous-iterate models.

    Classification: mean symmetric KL of the Bernoulli pairs, which for
    clamped p, q collapses to (p - q) * (logit(p) - logit(q)). Regression:
    mean squared output difference. out_theta_t is a constant.
    """
    if task == "clf":
        p = _as_probs(out_theta)
        q = _as_probs(out_theta_t)
        logit_p = T.sub(T.log(p), T.log(T.sub(1.0, p)))
        logit_q = T.sub(T.log(q), T.log(T.sub(1.0, q)))
        per = T.mul(T.sub(p, q), T.sub(logit_p, logit_q))
    elif task == "reg":
        d = T.sub(out_theta, out_theta_t)
        per = T.mul(d, d)
    else:
        raise ConfigError(f"unknown task {task!r}")
    return T.mul(T.sum_all(per), 1.0 / out_theta.size)


def total_loss(vanilla: Tensor, bregman: Tensor, mu: float) -> Tensor:
    if not (0.0 <= mu < 1.0):
        raise ConfigError(f"mu={mu} outside [0, 1)")
    if mu == 0.0:
        return vanilla
    return T.add(T.mul(vanilla, 1.0 - mu), T.mul(bregman, mu))


# ---------------------------------------------------------------------------
# AdamW.


def adamw_step(state: TrainState, grads: dict[str, np.ndarray], config: TrainConfig) -> TrainState:
    """One decoupled-weight-decay Adam update over the trainable set.

    theta_t is refreshed to the pre-step parameters first, so after the
    call it lags theta by exactly one step. Parameters missing from grads
    receive a zero gradient (decay still applies).
    """
    state.theta_t = state.store.snapshot(state.trainable)
    state.step += 1
    t = state.step
    bc1 = 1.0 - config.beta1**t
    bc2 = 1.0 - config.beta2**t
    for name in state.trainable:
        p = state.store.get(name).tensor
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p.data)
        elif not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite gradient for parameter {name}")
        state.m[name] = config.beta1 * state.m[name] + (1.0 - config.beta1) * g
        state.v[name] = config.beta2 * state.v[name] + (1.0 - config.beta2) * (g * g)
        m_hat = state.m[name] / bc1
        v_hat = state.v[name] / bc2
        p.data = p.data - config.lr * (m_hat / (np.sqrt(v_hat) + config.eps) + config.weight_decay * p.data)
    return state


# ---------------------------------------------------------------------------
# Metrics (plain numpy; the model is not involved).


def auc_score(scores: np.ndarray, labels: np.ndarray) -> float:
    """Probability a random positive outranks a random negative, ties 1/2.

    Computed from tie-averaged ranks; numerator stays a dyadic rational so
    the result matches pairwise brute force bit-for-bit.
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    n_pos = int((labels == 1).sum())
    n_neg = int((labels == 0).sum())
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError("AUC needs both classes present")
    order = np.argsort(scores, kind="mergesort")
    ranks = np.empty(len(scores))
    i = 0
    while i < len(scores):
        j = i
        while j + 1 < len(scores) and scores[order[j + 1]] == scores[order[i]]:
            j += 1
        # ranks are 1-based; ties share the average rank, a multiple of 1/2
        ranks[order[i : j + 1]] = (i + j) / 2.0 + 1.0
        i = j + 1
    r_pos = float(ranks[labels == 1].sum())
    return (r_pos - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg)


def ap_score(scores: np.ndarray, labels: np.ndarray) -> float:
    """Average precision via step interpolation over distinct thresholds."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    n_pos = int((labels == 1).sum())
    if n_pos == 0 or n_pos == len(labels):
        raise UndefinedMetricError("AP needs both classes present")
    order = np.argsort(-scores, kind="mergesort")
    sorted_scores = scores[order]
    sorted_labels = labels[order]
    ap = 0.0
    prev_recall = 0.0
    tp = 0
    for i in range(len(order)):
        tp += int(sorted_labels[i] == 1)
        last_of_group = i + 1 == len(order) or sorted_scores[i + 1] != sorted_scores[i]
        if last_of_group:
            precision = tp / (i + 1)
            recall = tp / n_pos
            ap += (recall - prev_recall) * precision
            prev_recall = recall
    return ap


def rmse_score(preds: np.ndarray, targets: np.ndarray) -> float:
    preds = np.asarray(preds, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.float64)
    return math.sqrt(float(np.mean((preds - targets) ** 2)))


def compute_metric(metric: str, scores: np.ndarray, labels: np.ndarray) -> float:
    if metric == "auc":
        return auc_score(scores, labels)
    if metric == "ap":
        return ap_score(scores, labels)
    if metric == "rmse":
        return rmse_score(scores, labels)
    raise ConfigError(f"unknown metric {metric!r}")


def metric_is_higher_better(metric: str) -> bool:
    return metric in ("auc", "ap")


def predict_dataset(model, dataset, chunk: int = 128) -> np.ndarray:
    """Model scores over a whole dataset, inference mode, dataset order."""
    out = []
    for start in range(0, len(dataset), chunk):
        batch = dataset.collate(list(range(start, min(start + chunk, len(dataset)))))
        out.append(model.predict_batch(batch).data)
    return np.concatenate(out)


def evaluate(model, dataset, metric: str) -> float:
    scores = predict_dataset(model, dataset)
    return compute_metric(metric, scores, dataset.labels)


# ---------------------------------------------------------------------------
# The fine-tuning loop.


def fit(model, mask, train_ds, eval_ds, config: TrainConfig) -> TrainState:
    """Mini-batch training under the proximal objective.

    Per batch: forward under theta_t (constant, skipped when mu = 0),
    forward under theta on the tape, total loss, backward, AdamW. Tracks
    per-epoch train loss and eval metric; keeps the best-eval parameters
    and restores them at the end; early-stops after `patience` epochs
    without improvement (patience 0 disables).
    """
    if len(train_ds) == 0:
        raise DataError("empty training dataset")
    if mask is not None:
        model.store.apply_mask(set(mask.trainable))
    state = init_train_state(model.store)
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence(entropy=config.seed, spawn_key=(0xF1,))))
    higher = metric_is_higher_better(config.eval_metric)
    best_value: float | None = None
    best_snap: dict[str, np.ndarray] | None = None
    stale = 0
    for epoch in range(config.epochs):
        order = rng.permutation(len(train_ds))
        losses = []
        for start in range(0, len(order), config.batch_size):
            idx = [int(i) for i in order[start : start + config.batch_size]]
            if not idx:
                warnings.warn("skipping empty batch")
                continue
            batch = train_ds.collate(idx)
            preds_t = None
            if config.mu > 0.0:
                current = state.store.snapshot(state.trainable)
                state.store.load_snapshot(state.theta_t)
                preds_t = model.predict_batch(batch)  # inference mode, constant
                state.store.load_snapshot(current)
            with Tape() as tape:
                preds = model.predict_batch(batch)
                loss = vanilla_loss(preds, batch.labels, batch.task)
                if config.mu > 0.0:
                    breg = bregman_divergence(preds, preds_t, batch.task)
                    loss = total_loss(loss, breg, config.mu)
            if not math.isfinite(loss.item()):
                raise FloatingPointError(f"non-finite loss at epoch {epoch}, step {state.step}")
            grads = backward(loss, tape)
            adamw_step(state, grads, config)
            losses.append(loss.item())
        row = {"epoch": epoch, "train_loss": float(np.mean(losses))}
        if eval_ds is not None:
            value = evaluate(model, eval_ds, config.eval_metric)
            row["eval_metric"] = value
            improved = best_value is None or (value > best_value if higher else value < best_value)
            if improved:
                best_value = value
                best_snap = state.store.snapshot(state.trainable)
                stale = 0
            else:
                stale += 1
        state.history.append(row)
        if eval_ds is not None and config.patience > 0 and stale >= config.patience:
            break
    if best_snap is not None:
        state.store.load_snapshot(best_snap)
    return state
