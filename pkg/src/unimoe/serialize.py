"""Flat binary array container with a JSON sidecar.

Layout of ``<name>.bin`` (all integers little-endian)::

    magic     8 bytes   b"UMOEBIN1"
    count     uint32    number of arrays
    per array:
      name_len  uint16
      name      utf-8 bytes
      ndim      uint8
      dims      ndim x uint64
      payload   prod(dims) x float64 (little-endian, row-major)

``<name>.bin.json`` holds free-form hyperparameters.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from . import tensor as tn
from .affinity import GateParams
from .layer import ExpertBank

__all__ = ["MAGIC", "save_arrays", "load_arrays", "save_model", "load_model"]

MAGIC = b"UMOEBIN1"


def _sidecar(path: Path) -> Path:
    return path.with_name(path.name + ".json")


def save_arrays(path, arrays: dict[str, np.ndarray], meta: dict | None = None) -> Path:
    path = Path(path)
    chunks = [MAGIC, struct.pack("<I", len(arrays))]
    for name, arr in arrays.items():
        arr = np.asarray(arr, dtype="<f8", order="C")
        encoded = name.encode("utf-8")
        chunks.append(struct.pack("<H", len(encoded)) + encoded)
        chunks.append(struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}Q", *arr.shape))
        chunks.append(arr.tobytes(order="C"))
    path.write_bytes(b"".join(chunks))
    _sidecar(path).write_text(json.dumps(meta or {}, indent=2, sort_keys=True))
    return path


def load_arrays(path) -> tuple[dict[str, np.ndarray], dict]:
    path = Path(path)
    buf = path.read_bytes()
    if buf[:8] != MAGIC:
        raise ValueError(f"{path}: not a parameter file (bad magic)")
    (count,) = struct.unpack_from("<I", buf, 8)
    pos = 12
    arrays = {}
    for _ in range(count):
        (name_len,) = struct.unpack_from("<H", buf, pos)
        pos += 2
        name = buf[pos : pos + name_len].decode("utf-8")
        pos += name_len
        (ndim,) = struct.unpack_from("<B", buf, pos)
        pos += 1
        shape = struct.unpack_from(f"<{ndim}Q", buf, pos)
        pos += 8 * ndim
        size = int(np.prod(shape, dtype=np.int64))
        arrays[name] = np.frombuffer(buf, dtype="<f8", count=size, offset=pos).reshape(shape).astype(np.float64)
        pos += 8 * size
    if pos != len(buf):
        raise ValueError(f"{path}: {len(buf) - pos} trailing bytes")
    side = _sidecar(path)
    meta = json.loads(side.read_text()) if side.exists() else {}
    return arrays, meta


def save_model(path, bank: ExpertBank, gate: GateParams | None, meta: dict | None = None, extra=None) -> Path:
    arrays = {f"expert.{k}": v.value for k, v in bank.parameters().items()}
    meta = dict(meta or {})
    if gate is not None:
        arrays["gate.W"] = gate.W.value
        if gate.bias is not None:
            arrays["gate.bias"] = np.asarray(gate.bias)
        meta["gate.noise_std"] = gate.noise_std
    for name, value in (extra or {}).items():
        arrays[name] = np.asarray(value)
    return save_arrays(path, arrays, meta)


def load_model(path) -> tuple[ExpertBank, GateParams | None, dict, dict[str, np.ndarray]]:
    """Returns ``(bank, gate, meta, extra_arrays)``."""
    arrays, meta = load_arrays(path)
    take = {k[len("expert.") :]: arrays.pop(k) for k in list(arrays) if k.startswith("expert.")}
    bank = ExpertBank(
        tn.parameter(take["w1"]),
        tn.parameter(take["b1"]),
        tn.parameter(take["w2"]),
        tn.parameter(take["b2"]),
        tn.parameter(take["phi"]) if "phi" in take else None,
    )
    gate = None
    if "gate.W" in arrays:
        gate = GateParams(
            tn.parameter(arrays.pop("gate.W")),
            float(meta.get("gate.noise_std", 0.0)),
            arrays.pop("gate.bias", None),
        )
    return bank, gate, meta, arrays
