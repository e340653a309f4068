"""Weight persistence: manifest.json + weights.bin.

The manifest is an ordered list of ``{"name": ..., "shape": [...]}``;
weights.bin concatenates the row-major little-endian float64 buffers in
manifest order.  Round-tripping is bit-exact.
"""

from __future__ import annotations

import json
from pathlib import Path
from typing import Sequence

import numpy as np

from .autodiff import Tensor
from .errors import ShapeError

__all__ = ["save_weights", "load_weights", "assign_weights"]

MANIFEST_NAME = "manifest.json"
WEIGHTS_NAME = "weights.bin"


def save_weights(directory: str | Path, named_params: Sequence[tuple[str, Tensor]]) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    manifest = [{"name": n, "shape": list(t.data.shape)} for n, t in named_params]
    with open(directory / MANIFEST_NAME, "w") as fh:
        json.dump(manifest, fh, indent=1)
    with open(directory / WEIGHTS_NAME, "wb") as fh:
        for _, t in named_params:
            fh.write(np.ascontiguousarray(t.data, dtype="<f8").tobytes())


def load_weights(directory: str | Path) -> dict[str, np.ndarray]:
    directory = Path(directory)
    with open(directory / MANIFEST_NAME) as fh:
        manifest = json.load(fh)
    out: dict[str, np.ndarray] = {}
    raw = (directory / WEIGHTS_NAME).read_bytes()
    offset = 0
    for item in manifest:
        shape = tuple(item["shape"])
        count = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(raw, dtype="<f8", count=count, offset=offset).astype(np.float64)
        out[item["name"]] = arr.reshape(shape)
        offset += count * 8
    if offset != len(raw):
        raise ShapeError(
            f"weights.bin length {len(raw)} does not match manifest total {offset}"
        )
    return out


def assign_weights(named_params: Sequence[tuple[str, Tensor]], values: dict[str, np.ndarray]) -> None:
    """Copy loaded arrays into existing parameter tensors."""
    for name, t in named_params:
        if name not in values:
            raise ShapeError(f"checkpoint missing parameter {name!r}")
        arr = values[name]
        if arr.shape != t.data.shape:
            raise ShapeError(
                f"checkpoint shape {arr.shape} != parameter shape {t.data.shape} for {name!r}"
            )
        t.data = arr.copy()
