"""Flat parameter vectors with a structured name index, and checkpoint I/O."""

from __future__ import annotations

import json
from collections import OrderedDict
from pathlib import Path

import numpy as np

from .autodiff import Tensor
from .dataset import atomic_write_bytes, atomic_write_text
from .errors import IoError, ShapeMismatch


class ParamVector:
    """All model weights as one float64 vector plus name -> (offset, shape)."""

    def __init__(self, index: "OrderedDict[str, tuple]", flat: np.ndarray):
        self.index = OrderedDict((k, (int(o), tuple(s))) for k, (o, s) in index.items())
        self.flat = np.asarray(flat, dtype=np.float64)
        total = 0
        for name, (offset, shape) in self.index.items():
            if offset != total:
                raise ShapeMismatch(f"index gap/overlap at {name}")
            total += int(np.prod(shape))
        if total != self.flat.size:
            raise ShapeMismatch(f"index covers {total} entries, vector has {self.flat.size}")

    @classmethod
    def from_arrays(cls, arrays: "OrderedDict[str, np.ndarray]") -> "ParamVector":
        index, offset = OrderedDict(), 0
        for name, arr in arrays.items():
            index[name] = (offset, arr.shape)
            offset += arr.size
        flat = np.concatenate([np.ravel(a) for a in arrays.values()]) if arrays else np.zeros(0)
        return cls(index, flat)

    def __len__(self) -> int:
        return self.flat.size

    def names(self) -> list:
        return list(self.index)

    def arrays(self) -> "OrderedDict[str, np.ndarray]":
        return OrderedDict((k, self.flat[o:o + int(np.prod(s))].reshape(s))
                           for k, (o, s) in self.index.items())

    def tensors(self, requires_grad: bool = False) -> "OrderedDict[str, Tensor]":
        return OrderedDict((k, Tensor(v.copy(), requires_grad)) for k, v in self.arrays().items())

    def flatten(self, values) -> np.ndarray:
        """Concatenate a name -> array/Tensor mapping in index order."""
        parts = []
        for name, (_, shape) in self.index.items():
            v = values[name]
            v = v.data if isinstance(v, Tensor) else np.asarray(v)
            if v.shape != shape:
                raise ShapeMismatch(f"{name}: {v.shape} != {shape}")
            parts.append(v.ravel())
        return np.concatenate(parts) if parts else np.zeros(0)

    def with_flat(self, flat: np.ndarray) -> "ParamVector":
        return ParamVector(self.index, np.array(flat, dtype=np.float64))

    def copy(self) -> "ParamVector":
        return self.with_flat(self.flat)


def save_checkpoint(params: ParamVector, path, meta: dict | None = None) -> None:
    """Write ``<path>.json`` (index manifest) and ``<path>.bin`` (little-endian float64)."""
    path = Path(path)
    manifest = {
        "dtype": "<f8",
        "n_params": len(params),
        "index": [[name, off, list(shape)] for name, (off, shape) in params.index.items()],
        "meta": meta or {},
    }
    atomic_write_bytes(path.with_suffix(".bin"), params.flat.astype("<f8").tobytes())
    atomic_write_text(path.with_suffix(".json"), json.dumps(manifest, indent=2, sort_keys=True))


def load_checkpoint(path) -> tuple:
    path = Path(path)
    mpath, bpath = path.with_suffix(".json"), path.with_suffix(".bin")
    if not mpath.is_file() or not bpath.is_file():
        raise IoError(f"checkpoint {path} is incomplete")
    manifest = json.loads(mpath.read_text(encoding="utf-8"))
    flat = np.frombuffer(bpath.read_bytes(), dtype="<f8").astype(np.float64)
    if flat.size != manifest["n_params"]:
        raise IoError(f"checkpoint payload has {flat.size} values, manifest {manifest['n_params']}")
    index = OrderedDict((name, (off, tuple(shape))) for name, off, shape in manifest["index"])
    return ParamVector(index, flat), manifest.get("meta", {})
