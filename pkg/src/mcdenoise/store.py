"""Array persistence: raw little-endian binary + JSON sidecar.

The data file holds the raw scalars in C order; ``<path>.json`` carries
shape, scalar type, axis names, units, free-form metadata and provenance
(seed, config hash, input hashes). The pair is the on-disk interchange
format for every pipeline artifact.
"""

import dataclasses
import json
import os

import numpy as np

from .errors import DataError

FORMAT_VERSION = 1

AXIS_NAMES = {"angle", "channel", "z", "y", "x", "u", "v", "t", "material"}

_DTYPES = {
    "float32": np.dtype("<f4"),
    "uint16": np.dtype("<u2"),
    "uint32": np.dtype("<u4"),
}


@dataclasses.dataclass
class ArrayContainer:
    data: np.ndarray
    axis_names: tuple
    units: str = ""
    meta: dict = dataclasses.field(default_factory=dict)
    provenance: dict = dataclasses.field(default_factory=dict)

    def __post_init__(self):
        self.axis_names = tuple(self.axis_names)
        if len(self.axis_names) != self.data.ndim:
            raise DataError(
                f"got {len(self.axis_names)} axis names for a rank-{self.data.ndim} array"
            )
        unknown = set(self.axis_names) - AXIS_NAMES
        if unknown:
            raise DataError(f"unknown axis names {sorted(unknown)}; allowed: {sorted(AXIS_NAMES)}")
        if self.data.dtype.name not in _DTYPES:
            raise DataError(
                f"unsupported scalar type {self.data.dtype.name!r}; "
                f"supported: {sorted(_DTYPES)}"
            )


def _sidecar_path(path):
    return str(path) + ".json"


def write(container: ArrayContainer, path) -> None:
    """Write a container to ``path`` (+ sidecar). Atomic per file."""
    path = str(path)
    data = np.ascontiguousarray(container.data)
    sidecar = {
        "format_version": FORMAT_VERSION,
        "shape": list(data.shape),
        "dtype": data.dtype.name,
        "axis_names": list(container.axis_names),
        "units": container.units,
        "meta": container.meta,
        "provenance": container.provenance,
    }
    tmp = path + ".tmp"
    with open(tmp, "wb") as fh:
        fh.write(data.astype(_DTYPES[data.dtype.name], copy=False).tobytes(order="C"))
    os.replace(tmp, path)
    tmp_json = _sidecar_path(path) + ".tmp"
    with open(tmp_json, "w", encoding="utf-8") as fh:
        json.dump(sidecar, fh, indent=1, sort_keys=True)
        fh.write("\n")
    os.replace(tmp_json, _sidecar_path(path))


def read(path) -> ArrayContainer:
    """Read a container written by :func:`write`."""
    path = str(path)
    sidecar_path = _sidecar_path(path)
    if not os.path.exists(sidecar_path):
        raise DataError(f"missing sidecar {sidecar_path}")
    if not os.path.exists(path):
        raise DataError(f"missing data file {path}")
    with open(sidecar_path, "r", encoding="utf-8") as fh:
        try:
            sidecar = json.load(fh)
        except json.JSONDecodeError as exc:
            raise DataError(f"unreadable sidecar {sidecar_path}: {exc}") from exc
    dtype_name = sidecar.get("dtype")
    if dtype_name not in _DTYPES:
        raise DataError(f"{sidecar_path}: unknown scalar type {dtype_name!r}")
    dtype = _DTYPES[dtype_name]
    shape = tuple(int(n) for n in sidecar["shape"])
    expected = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
    actual = os.path.getsize(path)
    if actual != expected:
        raise DataError(
            f"{path}: length mismatch, sidecar implies {expected} bytes, file has {actual}"
        )
    raw = np.fromfile(path, dtype=dtype).reshape(shape)
    return ArrayContainer(
        data=raw,
        axis_names=tuple(sidecar["axis_names"]),
        units=sidecar.get("units", ""),
        meta=sidecar.get("meta", {}),
        provenance=sidecar.get("provenance", {}),
    )
