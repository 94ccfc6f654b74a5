"""Field files: a JSON header next to a raw little-endian payload.

Header keys: ``version`` (1), ``dim``, ``shape``, ``origin``, ``spacing``,
``components``, ``dtype`` (``"f64-le"`` for fields, ``"u8"`` for masks) and
``payload`` (file name relative to the header). The payload is row-major with
axis 0 slowest and the component index fastest.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .grid import Grid, RegionMask, ScalarField, VectorField

FORMAT_VERSION = 1
_DTYPES = {"f64-le": np.dtype("<f8"), "u8": np.dtype("u1")}


class FieldFormatError(ValueError):
    pass


def _payload_name(header_path: Path) -> str:
    return header_path.with_suffix(".bin").name if header_path.suffix else header_path.name + ".bin"


def write_field(path, field: ScalarField | VectorField | RegionMask) -> Path:
    """Write ``field`` as ``path`` (header) plus a sibling ``.bin`` payload."""
    path = Path(path)
    grid = field.grid
    if isinstance(field, RegionMask):
        dtype, components = "u8", 1
        data = field.flags.astype(np.uint8)
    elif isinstance(field, VectorField):
        dtype, components = "f64-le", field.components
        data = field.values
    else:
        dtype, components = "f64-le", 1
        data = field.values
    payload = _payload_name(path)
    header = {
        "version": FORMAT_VERSION,
        **grid.header(),
        "components": components,
        "dtype": dtype,
        "payload": payload,
    }
    path.parent.mkdir(parents=True, exist_ok=True)
    (path.parent / payload).write_bytes(np.ascontiguousarray(data, dtype=_DTYPES[dtype]).tobytes(order="C"))
    path.write_text(json.dumps(header, indent=2, sort_keys=True) + "\n")
    return path


def read_header(path) -> dict:
    path = Path(path)
    try:
        header = json.loads(path.read_text())
    except FileNotFoundError:
        raise
    except (OSError, json.JSONDecodeError) as exc:
        raise FieldFormatError(f"{path}: unreadable header ({exc})") from exc
    for key in ("version", "dim", "shape", "origin", "spacing", "components", "dtype", "payload"):
        if key not in header:
            raise FieldFormatError(f"{path}: header is missing key '{key}'")
    if header["version"] != FORMAT_VERSION:
        raise FieldFormatError(f"{path}: unsupported version {header['version']}")
    if header["dtype"] not in _DTYPES:
        raise FieldFormatError(f"{path}: unsupported dtype {header['dtype']!r}")
    if len(header["shape"]) != header["dim"]:
        raise FieldFormatError(f"{path}: dim does not match shape")
    return header


def read_field(path) -> ScalarField | VectorField | RegionMask:
    """Load a field written by :func:`write_field`.

    Returns a :class:`RegionMask` for ``u8`` payloads, a :class:`ScalarField`
    for one component and a :class:`VectorField` otherwise.
    """
    path = Path(path)
    header = read_header(path)
    grid = Grid(tuple(header["shape"]), tuple(header["origin"]), header["spacing"])
    m = int(header["components"])
    dtype = _DTYPES[header["dtype"]]
    payload_path = path.parent / header["payload"]
    raw = np.frombuffer(payload_path.read_bytes(), dtype=dtype)
    expected = grid.size * m
    if raw.size != expected:
        raise FieldFormatError(f"{payload_path}: expected {expected} values, found {raw.size}")
    if header["dtype"] == "u8":
        if m != 1 or np.any(raw > 1):
            raise FieldFormatError(f"{payload_path}: mask payload must hold one 0/1 byte per node")
        return RegionMask(grid, raw.reshape(grid.shape).astype(bool))
    values = raw.astype(np.float64).reshape(grid.shape + ((m,) if m > 1 else ()))
    if m == 1:
        return ScalarField(grid, values)
    return VectorField(grid, values)


def read_vector_field(path) -> VectorField:
    """Like :func:`read_field` but always returns a :class:`VectorField` (maps with m = 1)."""
    f = read_field(path)
    if isinstance(f, RegionMask):
        raise FieldFormatError(f"{path}: expected a vector field, found a mask")
    if isinstance(f, ScalarField):
        return VectorField(f.grid, f.values[..., None])
    return f


def read_mask(path) -> RegionMask:
    f = read_field(path)
    if not isinstance(f, RegionMask):
        raise FieldFormatError(f"{path}: expected a mask (dtype u8)")
    return f


def read_scalar_field(path) -> ScalarField:
    f = read_field(path)
    if not isinstance(f, ScalarField):
        raise FieldFormatError(f"{path}: expected a scalar field")
    return f
