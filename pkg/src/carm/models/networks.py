"""Sequential networks for the three neural families."""
from __future__ import annotations

import numpy as np

from . import layers as L
from .config import Family, ModelConfig

N_CLASSES = 3
FFN_MULT = 2


class Network(L.Layer):
    """Ordered stack of layers. ``tensors()`` maps dotted names to the live arrays."""

    def __init__(self, named_layers, seed=0):
        super().__init__()
        self.layers = list(named_layers)
        self.seed = seed

    def children(self):
        return [(n, l) for n, l in self.layers if n is not None]

    def forward(self, x, train=False):
        for _, layer in self.layers:
            x = layer.forward(x, train)
        return x

    def backward(self, dy):
        for _, layer in reversed(self.layers):
            dy = layer.backward(dy)
        return dy

    def tensors(self) -> dict:
        return dict(self.named_params())

    def gradients(self) -> dict:
        return dict(self.named_grads())

    def prunable_tensors(self) -> list:
        return list(self.prunable_names())

    def load_tensors(self, tensors: dict) -> None:
        live = self.tensors()
        missing = set(live) - set(tensors)
        if missing:
            raise KeyError(f"missing tensors {sorted(missing)}")
        for name, arr in live.items():
            src = np.asarray(tensors[name])
            if src.shape != arr.shape:
                raise ValueError(f"tensor {name}: shape {src.shape} != {arr.shape}")
            arr[...] = src
        self.invalidate()

    def n_params(self) -> int:
        return sum(v.size for v in self.tensors().values())

    def predict_proba(self, x) -> np.ndarray:
        return L.softmax(self.forward(np.asarray(x, dtype=np.float64), train=False))

    def set_sparse(self, on: bool) -> None:
        for mod in _walk(self):
            if hasattr(mod, "use_sparse"):
                mod.use_sparse(on)


def _walk(layer):
    yield layer
    if isinstance(layer, Network):
        for _, l in layer.layers:
            yield from _walk(l)
    else:
        for _, c in layer.children():
            yield from _walk(c)


def build_network(config: ModelConfig, n_channels: int, seed: int = 0) -> Network:
    config.validate(strict=False)
    rng = np.random.default_rng(seed)
    g = config.genes
    T = config.window_samples
    named = []
    if config.family is Family.CNN:
        c, t = n_channels, T
        n_conv = int(g["conv_layers"])
        for i in range(n_conv):
            named.append((f"conv{i}", L.Conv1D(c, g["filters"], g["kernel"], g["stride"], rng)))
            named.append((None, L.ReLU()))
            t = L.Conv1D.out_length(t, g["kernel"], g["stride"])
            c = g["filters"]
            if i < n_conv - 1:
                named.append((None, L.Pool1D(g["pooling"])))
                t = L.Pool1D.out_length(t)
        named.append((None, L.Flatten()))
        named.append(("head", L.Dense(c * t, N_CLASSES, rng)))
    elif config.family is Family.LSTM:
        named.append((None, L.Transpose()))
        d = n_channels
        n_layers = int(g["layers"])
        for i in range(n_layers):
            if i > 0:
                named.append((None, L.Dropout(g.get("dropout", 0.0), rng)))
            named.append((f"lstm{i}", L.LSTM(d, g["hidden"], rng,
                                              return_sequences=i < n_layers - 1)))
            d = g["hidden"]
        named.append((None, L.Dropout(g.get("dropout", 0.0), rng)))
        named.append(("head", L.Dense(d, N_CLASSES, rng)))
    elif config.family is Family.Transformer:
        d = g["model_dim"]
        named.append((None, L.Transpose()))
        named.append(("embed", L.Dense(n_channels, d, rng)))
        named.append(("pos", L.PositionalEmbedding(T, d, rng)))
        for i in range(int(g["layers"])):
            named.append((f"block{i}", L.TransformerBlock(d, g["heads"], FFN_MULT * d,
                                                          g.get("dropout", 0.0), rng)))
        named.append((None, L.MeanPoolTime()))
        named.append(("head", L.Dense(d, N_CLASSES, rng)))
    else:
        raise ValueError(f"{config.family} is not a network family")
    return Network(named, seed)


def network_param_count(config: ModelConfig, n_channels: int = 16) -> int:
    """Closed-form trainable-scalar count (matches ``build_network(...).n_params()``)."""
    config.validate(strict=False)
    g = config.genes
    T = config.window_samples
    if config.family is Family.CNN:
        total, c, t = 0, n_channels, T
        n_conv = int(g["conv_layers"])
        for i in range(n_conv):
            total += g["filters"] * c * g["kernel"] + g["filters"]
            t = L.Conv1D.out_length(t, g["kernel"], g["stride"])
            c = g["filters"]
            if i < n_conv - 1:
                t = L.Pool1D.out_length(t)
        return total + c * t * N_CLASSES + N_CLASSES
    if config.family is Family.LSTM:
        total, d = 0, n_channels
        for _ in range(int(g["layers"])):
            h = g["hidden"]
            total += 4 * (h * (h + d) + h)
            d = h
        return total + d * N_CLASSES + N_CLASSES
    if config.family is Family.Transformer:
        d = g["model_dim"]
        f = FFN_MULT * d
        block = 4 * (d * d + d) + 2 * 2 * d + (d * f + f) + (f * d + d)
        return (n_channels * d + d) + T * d + int(g["layers"]) * block + d * N_CLASSES + N_CLASSES
    raise ValueError("random forest size is known only after training")
