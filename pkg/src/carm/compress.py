"""Global magnitude pruning, per-tensor affine uint8 quantisation and latency timing."""
from __future__ import annotations

import time
from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np

from .models.artifact import TensorRecord, write_container
from .models.config import ModelConfig
from .models.networks import build_network
from .models.training import LABEL_ORDER, TrainedModel, train

PRUNE_LEVELS = (0.0, 0.3, 0.5, 0.7, 0.9)
QMAX = 255


@dataclass(frozen=True)
class PruneSpec:
    ratio: float = 0.7

    def __post_init__(self):
        if not 0 <= self.ratio < 1:
            raise ValueError(f"prune ratio must be in [0, 1), got {self.ratio}")

    def count(self, n: int) -> int:
        """``floor(ratio * n)`` taken on the decimal value of ``ratio``."""
        return int(Fraction(repr(float(self.ratio))) * n)


@dataclass(frozen=True)
class QuantSpec:
    bits: int = 8

    def __post_init__(self):
        if self.bits != 8:
            raise ValueError("only 8-bit quantisation is supported")


def _require_network(model):
    if getattr(model, "network", None) is None:
        raise ValueError("random forests have no weight tensors to compress")


def prunable_weights(model) -> dict:
    _require_network(model)
    tensors = model.network.tensors()
    return {name: tensors[name] for name in model.network.prunable_tensors()}


def prune_global(model: TrainedModel, ratio: float) -> TrainedModel:
    """Zero the ``floor(ratio * n)`` smallest-magnitude prunable weights across all
    prunable tensors; ties go to the earlier tensor, then the earlier index."""
    spec = PruneSpec(ratio)
    _require_network(model)
    out = model.copy()
    weights = prunable_weights(out)
    flat = np.concatenate([np.abs(w).ravel() for w in weights.values()])
    k = spec.count(flat.size)
    if k:
        order = np.argsort(flat, kind="stable")[:k]
        mask = np.ones(flat.size, dtype=bool)
        mask[order] = False
        off = 0
        for w in weights.values():
            w *= mask[off:off + w.size].reshape(w.shape)
            off += w.size
    out.network.invalidate()
    out.network.set_sparse(k > 0)
    out.meta = dict(out.meta, prune_ratio=float(ratio), sparsity=sparsity_of(out))
    return out


def pruning_masks(model) -> dict:
    """0/1 masks marking the nonzero prunable weights."""
    return {name: (w != 0).astype(np.float64) for name, w in prunable_weights(model).items()}


def finetune_pruned(model: TrainedModel, split, epochs: int = 3, seed: int = 0,
                    learning_rate: float | None = None) -> TrainedModel:
    """Retrain a pruned network with its zero pattern frozen.

    The best-validation epoch is kept (epoch 0 is the pruned model itself), and the
    set of zeroed weights is unchanged, so sparsity is exactly preserved.
    """
    _require_network(model)
    out = train(model.config, split, epochs=epochs, seed=seed, init=model.network,
                masks=pruning_masks(model), learning_rate=learning_rate)
    out.network.set_sparse(sparsity_of(out) > 0)
    out.meta = dict(model.meta, finetune_epochs=int(epochs), sparsity=sparsity_of(out))
    return out


def sparsity_of(model) -> float:
    """Fraction of exact zeros over the prunable weights."""
    if isinstance(model, QuantizedModel):
        qs = [model.quantized[n] for n in model.prunable]
        total = sum(q.q.size for q in qs)
        return sum(int(np.count_nonzero(q.q == q.zero_point)) for q in qs) / max(total, 1)
    weights = prunable_weights(model)
    total = sum(w.size for w in weights.values())
    return sum(w.size - np.count_nonzero(w) for w in weights.values()) / max(total, 1)


# -- quantisation -------------------------------------------------------------------

@dataclass(frozen=True)
class QuantizedTensor:
    q: np.ndarray  # uint8
    scale: float
    zero_point: int

    def dequantize(self) -> np.ndarray:
        return (self.q.astype(np.float64) - self.zero_point) * self.scale


def quant_params(w: np.ndarray) -> tuple:
    """Scale and zero point over ``[min(w, 0), max(w, 0)]`` so that 0 is exact."""
    lo = min(float(np.min(w)), 0.0) if w.size else 0.0
    hi = max(float(np.max(w)), 0.0) if w.size else 0.0
    if hi == lo:
        return 1.0, 0
    # scale is stored as float32; keep it normal so tiny ranges do not divide by zero
    scale = max(float(np.float32((hi - lo) / QMAX)), float(np.finfo(np.float32).tiny))
    zp = int(np.clip(np.round(-lo / scale), 0, QMAX))
    return scale, zp


def quantize_tensor(w: np.ndarray) -> QuantizedTensor:
    w = np.asarray(w, dtype=np.float64)
    scale, zp = quant_params(w)
    q = np.clip(np.round(w / scale) + zp, 0, QMAX).astype(np.uint8)
    return QuantizedTensor(q, scale, zp)


@dataclass
class QuantizedModel:
    config: ModelConfig
    n_channels: int
    quantized: dict  # name -> QuantizedTensor
    floats: dict  # name -> float32 array (biases, norms, embeddings)
    label_order: tuple = LABEL_ORDER
    meta: dict = field(default_factory=dict)
    _network: object = field(default=None, init=False, repr=False, compare=False)

    @property
    def prunable(self) -> list:
        return [n for n in self.quantized]

    @property
    def window_samples(self) -> int:
        return self.config.window_samples

    def dequantized_tensors(self) -> dict:
        out = {k: v.astype(np.float64) for k, v in self.floats.items()}
        out.update({k: q.dequantize() for k, q in self.quantized.items()})
        return out

    def n_params(self) -> int:
        return sum(q.q.size for q in self.quantized.values()) + sum(
            v.size for v in self.floats.values())

    def _net(self):
        # Weights are stored as uint8 and expanded once on first use.
        if self._network is None:
            net = build_network(self.config, self.n_channels)
            net.load_tensors(self.dequantized_tensors())
            if self.meta.get("sparsity", 0.0) > 0:
                net.set_sparse(True)
            self._network = net
        return self._network

    def predict_proba(self, windows) -> np.ndarray:
        return quantized_forward(self, windows)

    @classmethod
    def from_container(cls, header, records) -> QuantizedModel:
        quantized, floats = {}, {}
        for r in records:
            if r.data.dtype == np.uint8:
                quantized[r.name] = QuantizedTensor(r.data, float(r.scale), int(r.zero_point))
            else:
                floats[r.name] = r.data
        order = header.get("tensor_order") or [r.name for r in records]
        return cls(ModelConfig.from_json(header["config"]), header["n_channels"],
                   {k: quantized[k] for k in order if k in quantized},
                   {k: floats[k] for k in order if k in floats},
                   tuple(header.get("label_order") or LABEL_ORDER), header.get("meta", {}))

    def to_records(self) -> list:
        recs = []
        for name in self._order():
            if name in self.quantized:
                q = self.quantized[name]
                recs.append(TensorRecord(name, q.q, q.scale, q.zero_point))
            else:
                recs.append(TensorRecord(name, np.asarray(self.floats[name], np.float32)))
        return recs

    def _order(self):
        return self.meta.get("tensor_order") or list(self.floats) + list(self.quantized)


def quantize_int8(model: TrainedModel) -> QuantizedModel:
    """Quantise every prunable weight tensor; biases and norm parameters stay float32."""
    _require_network(model)
    tensors = model.network.tensors()
    prunable = set(model.network.prunable_tensors())
    quantized = {n: quantize_tensor(tensors[n]) for n in tensors if n in prunable}
    floats = {n: tensors[n].astype(np.float32) for n in tensors if n not in prunable}
    meta = {k: v for k, v in model.meta.items()}
    meta["tensor_order"] = list(tensors)
    meta["sparsity"] = sparsity_of(model)
    return QuantizedModel(model.config, model.n_channels, quantized, floats,
                          tuple(model.label_order), meta)


def dequantize(qm: QuantizedModel) -> TrainedModel:
    net = build_network(qm.config, qm.n_channels)
    net.load_tensors(qm.dequantized_tensors())
    return TrainedModel(qm.config, qm.n_channels, network=net, meta=dict(qm.meta),
                        label_order=tuple(qm.label_order))


def quantized_forward(qm: QuantizedModel, window) -> np.ndarray:
    x = np.asarray(window, dtype=np.float64)
    single = x.ndim == 2
    if single:
        x = x[None]
    if x.shape[1:] != (qm.n_channels, qm.window_samples):
        raise ValueError(f"shape mismatch: got {x.shape}, model expects "
                         f"(n, {qm.n_channels}, {qm.window_samples})")
    p = qm._net().predict_proba(x)
    return p[0] if single else p


def save_quantized(qm: QuantizedModel, path) -> int:
    header = {
        "kind": "quantized",
        "config": qm.config.to_json(),
        "n_channels": qm.n_channels,
        "label_order": list(qm.label_order),
        "tensor_order": qm._order(),
        "meta": {k: v for k, v in qm.meta.items() if k != "tensor_order"},
    }
    return write_container(path, header, qm.to_records())


# -- latency ------------------------------------------------------------------------

@dataclass(frozen=True)
class LatencyReport:
    median: float
    p95: float
    per_window: tuple

    @property
    def n(self) -> int:
        return len(self.per_window)

    def to_json(self) -> dict:
        return {"median_s": self.median, "p95_s": self.p95, "n": self.n}


def latency_report(samples) -> LatencyReport:
    s = np.asarray(samples, dtype=np.float64)
    if s.size == 0:
        return LatencyReport(float("nan"), float("nan"), ())
    return LatencyReport(float(np.median(s)), float(np.percentile(s, 95)), tuple(s.tolist()))


def benchmark_latency(model, windows, repeats: int = 100, warmup: int = 5) -> LatencyReport:
    """Wall-clock seconds per single-window inference, cycling through ``windows``.

    Pruned networks run their sparse path, so the work scales with non-zeros.
    """
    x = np.asarray(getattr(windows, "data", windows), dtype=np.float64)
    if x.ndim == 2:
        x = x[None]
    if len(x) == 0:
        raise ValueError("no windows to benchmark")
    if repeats < 1:
        raise ValueError("repeats must be >= 1")
    w = model.window_samples
    x = x[:, :, x.shape[2] - w:]
    for i in range(warmup):
        model.predict_proba(x[i % len(x)])
    times = []
    for i in range(repeats):
        xi = x[i % len(x)]
        t0 = time.perf_counter()
        model.predict_proba(xi)
        times.append(time.perf_counter() - t0)
    return latency_report(times)
