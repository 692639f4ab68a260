"""Trained-model wrapper, training loop, evaluation and ensembling."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace

import numpy as np

from ..eeg import ActionLabel
from . import layers as L
from .config import Family, ModelConfig
from .forest import RandomForest, extract_features
from .networks import Network, build_network, network_param_count
from .optim import Optimizer, OptimizerSpec

log = logging.getLogger(__name__)

LABEL_ORDER = tuple(l.name for l in ActionLabel)
EVAL_CHUNK = 512


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainedModel:
    config: ModelConfig
    n_channels: int
    network: Network | None = None
    forest: RandomForest | None = None
    train_report: dict = field(default_factory=dict)
    meta: dict = field(default_factory=dict)
    label_order: tuple = LABEL_ORDER

    @property
    def window_samples(self) -> int:
        return self.config.window_samples

    def tensors(self) -> dict:
        return self.network.tensors() if self.network is not None else {}

    def n_params(self) -> int:
        if self.network is not None:
            return self.network.n_params()
        return self.forest.n_nodes

    def _check(self, x):
        if x.ndim != 3 or x.shape[1] != self.n_channels or x.shape[2] != self.window_samples:
            raise ValueError(
                f"shape mismatch: got {x.shape}, model expects (n, {self.n_channels}, "
                f"{self.window_samples})"
            )

    def predict_proba(self, windows) -> np.ndarray:
        x = np.asarray(windows)
        single = x.ndim == 2
        if single:
            x = x[None]
        self._check(x)
        if self.forest is not None:
            p = self.forest.predict_proba(x)
        else:
            p = np.concatenate([
                self.network.predict_proba(x[i:i + EVAL_CHUNK])
                for i in range(0, len(x), EVAL_CHUNK)
            ]) if len(x) else np.zeros((0, 3))
        return p[0] if single else p

    def copy(self) -> TrainedModel:
        from .artifact import clone_model
        return clone_model(self)


def param_count(config_or_model, n_channels: int = 16) -> int:
    """Trainable scalars for networks; total tree nodes for a trained forest."""
    if isinstance(config_or_model, TrainedModel):
        return config_or_model.n_params()
    return network_param_count(config_or_model, n_channels)


def forward(model: TrainedModel, x, features: bool = False) -> np.ndarray:
    """Class probabilities for a window, a window batch, or (forest only) a feature batch."""
    if features:
        if model.forest is None:
            raise ValueError("feature input is only accepted by random forests")
        return model.forest.vote_proba(np.atleast_2d(x))
    return model.predict_proba(x)


def backward(model: TrainedModel, batch, labels, train: bool = False):
    """Gradients of mean cross-entropy for every tensor, and the loss."""
    if model.network is None:
        raise ValueError("random forests have no gradients")
    x = np.asarray(batch, dtype=np.float64)
    model._check(x)
    logits = model.network.forward(x, train=train)
    loss, dlogits, _ = L.softmax_cross_entropy(logits, np.asarray(labels))
    model.network.backward(dlogits)
    return model.network.gradients(), loss


def optimizer_for(config: ModelConfig, seed: int = 0) -> OptimizerSpec:
    return OptimizerSpec(
        kind=config.get("optimizer", "Adam"),
        learning_rate=config.get("learning_rate", 1e-3),
        weight_decay=config.get("weight_decay", 0.0) if config.get("optimizer") == "AdamW" else 0.0,
        seed=seed,
    )


def _fit_windows(windows, w):
    if windows.window_samples < w:
        raise ValueError(f"windows have {windows.window_samples} samples, model needs {w}")
    return windows.trailing(w) if windows.window_samples > w else windows


def _mean_loss(net, data, labels):
    if len(labels) == 0:
        return float("nan")
    total = 0.0
    for i in range(0, len(labels), EVAL_CHUNK):
        logits = net.forward(data[i:i + EVAL_CHUNK].astype(np.float64), train=False)
        loss, _, _ = L.softmax_cross_entropy(logits, labels[i:i + EVAL_CHUNK])
        total += loss * len(labels[i:i + EVAL_CHUNK])
    return total / len(labels)


def train(config: ModelConfig, split, epochs: int = 30, seed: int = 0, patience: int = 5,
          max_features="sqrt", init: Network | None = None, masks: dict | None = None,
          learning_rate: float | None = None) -> TrainedModel:
    """Train on ``split.train``; keep the tensors of the best validation epoch.

    Epoch 0 in the report is the starting model, so the returned model's
    validation loss never exceeds it. ``init`` continues from an existing network
    (copied, never mutated); ``masks`` maps tensor names to 0/1 arrays that are
    re-applied after every optimizer step so pruned weights stay exactly zero.
    """
    config.validate(strict=False)
    w = config.window_samples
    tr = _fit_windows(split.train, w)
    va = _fit_windows(split.val, w) if len(split.val) else split.val
    n_ch = tr.n_channels
    if config.family is Family.RandomForest:
        X = extract_features(tr.data, config["features"])
        forest = RandomForest.fit(X, tr.labels, n_trees=int(config["trees"]),
                                  max_depth=config.get("max_depth"), seed=seed,
                                  max_features=max_features, features=config["features"],
                                  n_channels=n_ch)
        report = {"seed": seed, "n_nodes": forest.n_nodes}
        return TrainedModel(config, n_ch, forest=forest, train_report=report)

    if init is not None:
        net = build_network(config, n_ch, seed)
        net.load_tensors({k: v.copy() for k, v in init.tensors().items()})
    else:
        net = build_network(config, n_ch, seed)
    masks = {k: np.asarray(m, dtype=np.float64) for k, m in (masks or {}).items()}
    spec = optimizer_for(config, seed)
    if learning_rate is not None:
        spec = replace(spec, learning_rate=learning_rate)
    opt = Optimizer(spec)
    rng = np.random.default_rng([seed, 1])
    select_on_val = len(va) > 0
    train_losses = [_mean_loss(net, tr.data, tr.labels)]
    val_losses = [_mean_loss(net, va.data, va.labels) if select_on_val else float("nan")]
    crit = val_losses if select_on_val else train_losses
    best = crit[0]
    best_epoch = 0
    best_tensors = {k: v.copy() for k, v in net.tensors().items()}
    bs = config.batch_size
    stale = 0
    for epoch in range(1, epochs + 1):
        perm = rng.permutation(len(tr))
        running = 0.0
        for i in range(0, len(perm), bs):
            idx = np.sort(perm[i:i + bs])
            xb = tr.data[idx].astype(np.float64)
            logits = net.forward(xb, train=True)
            loss, dlogits, _ = L.softmax_cross_entropy(logits, tr.labels[idx])
            if not math.isfinite(loss):
                raise TrainingError(f"non-finite training loss at epoch {epoch}")
            net.backward(dlogits)
            opt.step(net.tensors(), net.gradients())
            if masks:
                tensors = net.tensors()
                for k, m in masks.items():
                    tensors[k] *= m
            running += loss * len(idx)
        train_losses.append(running / len(perm))
        val_losses.append(_mean_loss(net, va.data, va.labels) if select_on_val else float("nan"))
        current = val_losses[-1] if select_on_val else train_losses[-1]
        if not math.isfinite(current):
            raise TrainingError(f"non-finite validation loss at epoch {epoch}")
        log.debug("epoch %d train %.4f val %.4f", epoch, train_losses[-1], val_losses[-1])
        if current < best:
            best, best_epoch, stale = current, epoch, 0
            best_tensors = {k: v.copy() for k, v in net.tensors().items()}
        else:
            stale += 1
            if stale >= patience:
                break
    net.load_tensors(best_tensors)
    report = {"seed": seed, "train_loss": train_losses, "val_loss": val_losses,
              "best_epoch": best_epoch}
    return TrainedModel(config, n_ch, network=net, train_report=report)


def predict_labels(model, windows) -> np.ndarray:
    """Argmax labels; ``np.argmax`` picks the lowest code on ties."""
    return np.argmax(model.predict_proba(_fit_windows(windows, model.window_samples).data), axis=1)


def evaluate(model, windows) -> float:
    if len(windows) == 0:
        raise ValueError("cannot evaluate on an empty window set")
    return float(np.mean(predict_labels(model, windows) == windows.labels))


class Ensemble:
    """Unweighted mean of member probabilities; each member reads the trailing slice
    of a shared buffer that matches its own window."""

    def __init__(self, models):
        self.models = list(models)
        if not self.models:
            raise ValueError("empty ensemble")

    @property
    def window_samples(self) -> int:
        return max(m.window_samples for m in self.models)

    @property
    def n_channels(self) -> int:
        return self.models[0].n_channels

    def predict_proba(self, buffers) -> np.ndarray:
        x = np.asarray(buffers)
        single = x.ndim == 2
        if single:
            x = x[None]
        p = sum(m.predict_proba(x[:, :, x.shape[2] - m.window_samples:]) for m in self.models)
        p = p / len(self.models)
        return p[0] if single else p


def ensemble_predict(models, window) -> np.ndarray:
    return Ensemble(models).predict_proba(window)
