"""Finite-difference gradient checks shared by the layer tests and the acceptance suite."""
import numpy as np

from carm.models import layers as L
from carm.models.config import Family, ModelConfig
from carm.models.networks import build_network
from oracles import central_difference, rel_error

TOL = 1e-4


def check_layer(layer, x, seed=0, h=1e-5):
    """Worst relative error over the input and every parameter for loss = sum(G * y)."""
    rng = np.random.default_rng(seed)
    G = rng.standard_normal(layer.forward(x).shape)

    def f():
        return float(np.sum(G * layer.forward(x)))

    layer.forward(x, train=False)
    dx = layer.backward(G)
    analytic = {"input": dx, **{k: v.copy() for k, v in layer.named_grads()}}
    errs = {"input": rel_error(dx, central_difference(f, x, h))}
    for name, arr in layer.named_params():
        errs[name] = rel_error(analytic[name], central_difference(f, arr, h))
    return errs


def check_loss(seed=0, h=1e-5):
    rng = np.random.default_rng(seed)
    logits = rng.standard_normal((5, 3))
    labels = rng.integers(0, 3, 5)
    _, d, _ = L.softmax_cross_entropy(logits, labels)
    num = central_difference(lambda: L.softmax_cross_entropy(logits, labels)[0], logits, h)
    return rel_error(d, num)


TOY_CONFIGS = {
    "CNN": ModelConfig(Family.CNN, {"window_samples": 12, "conv_layers": 2, "filters": 3,
                                    "kernel": 3, "stride": 1, "pooling": "max"}),
    "LSTM": ModelConfig(Family.LSTM, {"window_samples": 12, "hidden": 4, "layers": 2,
                                      "dropout": 0.1}),
    "Transformer": ModelConfig(Family.Transformer, {"window_samples": 12, "layers": 1, "heads": 2,
                                                    "model_dim": 4, "dropout": 0.1}),
}


def check_network(config, seed=0, h=1e-5):
    """Worst relative error per tensor of the full mean cross-entropy on a toy batch."""
    rng = np.random.default_rng(seed)
    net = build_network(config, 2, seed)
    x = rng.standard_normal((3, 2, config.window_samples))
    y = rng.integers(0, 3, 3)

    def f():
        return L.softmax_cross_entropy(net.forward(x), y)[0]

    _, d, _ = L.softmax_cross_entropy(net.forward(x), y)
    net.backward(d)
    grads = {k: v.copy() for k, v in net.gradients().items()}
    return {name: rel_error(grads[name], central_difference(f, arr, h))
            for name, arr in net.tensors().items()}


def layer_suite(seed=0):
    """``{layer kind: worst relative error}`` over the required layer types."""
    rng = np.random.default_rng(seed)
    out = {}
    out["dense"] = max(check_layer(L.Dense(4, 3, rng), rng.standard_normal((2, 5, 4)), seed).values())
    out["conv"] = max(max(check_layer(L.Conv1D(2, 3, 3, s, rng), rng.standard_normal((2, 2, 12)),
                                      seed).values()) for s in (1, 2))
    lstm_seq = check_layer(L.LSTM(2, 3, rng, return_sequences=True), rng.standard_normal((2, 6, 2)), seed)
    lstm_last = check_layer(L.LSTM(2, 3, rng), rng.standard_normal((2, 6, 2)), seed)
    out["lstm_cell"] = max(max(lstm_seq.values()), max(lstm_last.values()))
    out["attention"] = max(check_layer(L.MultiHeadSelfAttention(4, 2, rng),
                                       rng.standard_normal((2, 5, 4)), seed).values())
    out["layer_norm"] = max(check_layer(L.LayerNorm(4), rng.standard_normal((2, 5, 4)), seed).values())
    out["loss"] = check_loss(seed)
    for fam, cfg in TOY_CONFIGS.items():
        out[f"net_{fam}"] = max(check_network(cfg, seed).values())
    return out
