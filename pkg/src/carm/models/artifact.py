"""``CARM`` model container.

Layout (all little-endian)::

    b"CARM" | u16 version | u32 len + JSON header | u32 n_tensors
    name table, per tensor: u16 len + utf-8 name | u8 dtype | u8 ndim | u32 dims...
                            [dtype u8 only: f32 scale | i32 zero_point]
    tensor data in table order (f32 or u8, row-major)

dtype 0 is float32, 1 is affine-quantised uint8. Random forests carry their trees
in the JSON header and no tensors.
"""
from __future__ import annotations

import copy
import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .config import ModelConfig
from .forest import RandomForest
from .networks import build_network

MAGIC = b"CARM"
VERSION = 1
F32, U8 = 0, 1


class ArtifactError(ValueError):
    pass


@dataclass
class TensorRecord:
    name: str
    data: np.ndarray  # float32 or uint8
    scale: float = 1.0
    zero_point: int = 0

    @property
    def dtype_code(self) -> int:
        return U8 if self.data.dtype == np.uint8 else F32


def write_container(path, header: dict, records) -> int:
    """Write a container; returns its size in bytes."""
    blob = json.dumps(header, separators=(",", ":"), sort_keys=True).encode()
    parts = [MAGIC, struct.pack("<HI", VERSION, len(blob)), blob,
             struct.pack("<I", len(records))]
    for r in records:
        name = r.name.encode()
        parts.append(struct.pack("<H", len(name)) + name)
        parts.append(struct.pack("<BB", r.dtype_code, r.data.ndim))
        parts.append(struct.pack(f"<{r.data.ndim}I", *r.data.shape))
        if r.dtype_code == U8:
            parts.append(struct.pack("<fi", r.scale, r.zero_point))
    for r in records:
        arr = r.data.astype("<f4") if r.dtype_code == F32 else r.data.astype(np.uint8)
        parts.append(np.ascontiguousarray(arr).tobytes())
    payload = b"".join(parts)
    Path(path).write_bytes(payload)
    return len(payload)


def read_container(path):
    buf = Path(path).read_bytes()
    try:
        return _parse_container(path, buf)
    except (struct.error, ValueError, UnicodeDecodeError) as exc:
        if isinstance(exc, ArtifactError):
            raise
        raise ArtifactError(f"{path}: truncated or corrupt container ({exc})") from exc


def _parse_container(path, buf):
    if buf[:4] != MAGIC:
        raise ArtifactError(f"{path}: bad magic {buf[:4]!r}")
    version, n = struct.unpack_from("<HI", buf, 4)
    if version != VERSION:
        raise ArtifactError(f"{path}: unsupported version {version}")
    off = 10
    header = json.loads(buf[off:off + n])
    off += n
    (count,) = struct.unpack_from("<I", buf, off)
    off += 4
    table = []
    for _ in range(count):
        (ln,) = struct.unpack_from("<H", buf, off)
        off += 2
        name = buf[off:off + ln].decode()
        off += ln
        code, ndim = struct.unpack_from("<BB", buf, off)
        off += 2
        shape = struct.unpack_from(f"<{ndim}I", buf, off)
        off += 4 * ndim
        scale, zp = 1.0, 0
        if code == U8:
            scale, zp = struct.unpack_from("<fi", buf, off)
            off += 8
        table.append((name, code, shape, scale, zp))
    records = []
    for name, code, shape, scale, zp in table:
        dtype = np.dtype("<f4") if code == F32 else np.dtype(np.uint8)
        size = int(np.prod(shape)) * dtype.itemsize
        arr = np.frombuffer(buf, dtype=dtype, count=int(np.prod(shape)), offset=off).reshape(shape)
        off += size
        records.append(TensorRecord(name, arr.copy(), scale, zp))
    if off != len(buf):
        raise ArtifactError(f"{path}: {len(buf) - off} trailing bytes")
    return header, records


def _header(model, kind):
    return {
        "kind": kind,
        "config": model.config.to_json(),
        "n_channels": model.n_channels,
        "label_order": list(model.label_order),
        "train_report": model.train_report,
        "meta": model.meta,
    }


def save_model(model, path) -> int:
    if model.forest is not None:
        header = _header(model, "forest")
        header["forest"] = model.forest.to_json()
        return write_container(path, header, [])
    records = [TensorRecord(k, v.astype(np.float32)) for k, v in model.tensors().items()]
    return write_container(path, _header(model, "network"), records)


def load_any(path):
    """Load a float model or, for quantised containers, a ``QuantizedModel``."""
    header, records = read_container(path)
    if header["kind"] == "quantized":
        from ..compress import QuantizedModel
        return QuantizedModel.from_container(header, records)
    return _model_from(header, records)


def load_model(path):
    header, records = read_container(path)
    if header["kind"] == "quantized":
        raise ArtifactError(f"{path} holds a quantized model; use load_any")
    return _model_from(header, records)


def _model_from(header, records):
    from .training import LABEL_ORDER, TrainedModel
    config = ModelConfig.from_json(header["config"])
    n_ch = header["n_channels"]
    common = dict(train_report=header.get("train_report", {}), meta=header.get("meta", {}),
                  label_order=tuple(header.get("label_order") or LABEL_ORDER))
    if header["kind"] == "forest":
        return TrainedModel(config, n_ch, forest=RandomForest.from_json(header["forest"]), **common)
    net = build_network(config, n_ch)
    net.load_tensors({r.name: r.data.astype(np.float64) for r in records})
    return TrainedModel(config, n_ch, network=net, **common)


def clone_model(model):
    return copy.deepcopy(model)
