"""SPHF container: magic, header length, JSON header, float64 payload.

Layout:
    8 bytes   b"SPHF\\0\\0\\0\\1"
    4 bytes   little-endian uint32 header length
    header    UTF-8 JSON (sorted keys): grid, lmax, channels, count, dtype, role,
              record_layout ([{name, shape}]) and any extra metadata
    payload   little-endian float64, record-major: record i holds every
              layout entry for sample i, in layout order

Spectral coefficients are stored as interleaved (re, im) pairs over the
triangle 0 <= m <= l, with l outer, m inner and channel innermost.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .datasets import Dataset
from .errors import FormatError, InvalidArgument
from .sphere import SphericalGrid, grid_from_descriptor

MAGIC = b"SPHF\x00\x00\x00\x01"
ROLES = ("field", "coeffs", "dataset")


def _dumps(header: dict) -> bytes:
    return json.dumps(header, sort_keys=True, separators=(",", ":")).encode()


def write_sphf(path, header: dict, arrays: dict[str, np.ndarray]) -> Path:
    """Write named arrays sharing a leading record axis."""
    role = header.get("role")
    if role not in ROLES:
        raise InvalidArgument(f"role must be one of {ROLES}")
    counts = {a.shape[0] for a in arrays.values()}
    if len(counts) != 1:
        raise InvalidArgument("arrays must share the record count")
    count = counts.pop()
    layout = [{"name": k, "shape": list(a.shape[1:])} for k, a in arrays.items()]
    header = dict(header, count=count, dtype="f64", record_layout=layout)
    flat = [np.asarray(a, dtype="<f8").reshape(count, -1) for a in arrays.values()]
    payload = np.concatenate(flat, axis=1) if flat else np.zeros((count, 0))
    blob = _dumps(header)
    path = Path(path)
    with path.open("wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        fh.write(np.ascontiguousarray(payload, dtype="<f8").tobytes())
    return path


def read_sphf(path) -> tuple[dict, dict[str, np.ndarray]]:
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise FormatError(f"cannot read {path}: {exc}") from None
    if data[:8] != MAGIC:
        raise FormatError(f"{path}: not an SPHF file")
    if len(data) < 12:
        raise FormatError(f"{path}: truncated header")
    (hlen,) = struct.unpack("<I", data[8:12])
    try:
        header = json.loads(data[12 : 12 + hlen].decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"{path}: bad header: {exc}") from None
    try:
        count = int(header["count"])
        layout = header["record_layout"]
        sizes = [int(np.prod(e["shape"], dtype=np.int64)) for e in layout]
    except (KeyError, TypeError, ValueError) as exc:
        raise FormatError(f"{path}: incomplete header: {exc}") from None
    if header.get("dtype") != "f64":
        raise FormatError(f"{path}: unsupported dtype {header.get('dtype')!r}")
    record = sum(sizes)
    body = data[12 + hlen :]
    if len(body) != 8 * count * record:
        raise FormatError(f"{path}: payload has {len(body)} bytes, expected {8 * count * record}")
    flat = np.frombuffer(body, dtype="<f8").reshape(count, record)
    arrays, offset = {}, 0
    for entry, size in zip(layout, sizes):
        arrays[entry["name"]] = flat[:, offset : offset + size].reshape([count] + list(entry["shape"])).copy()
        offset += size
    return header, arrays


# -- typed helpers -----------------------------------------------------------------


def pack_coeffs(half: np.ndarray) -> np.ndarray:
    """(N, L+1, L+1, C) half tables -> (N, n_tri * C * 2) interleaved re/im."""
    lmax = half.shape[-3] - 1
    l, m = np.tril_indices(lmax + 1)
    tri = half[:, l, m, :]  # (N, n_tri, C), l outer then m
    out = np.stack([tri.real, tri.imag], axis=-1)
    return out.reshape(half.shape[0], -1)


def unpack_coeffs(flat: np.ndarray, lmax: int, channels: int) -> np.ndarray:
    l, m = np.tril_indices(lmax + 1)
    pairs = flat.reshape(flat.shape[0], l.size, channels, 2)
    half = np.zeros((flat.shape[0], lmax + 1, lmax + 1, channels), dtype=complex)
    half[:, l, m, :] = pairs[..., 0] + 1j * pairs[..., 1]
    return half


def save_fields(path, grid: SphericalGrid, values: np.ndarray, lmax: int | None = None, meta: dict | None = None):
    values = np.asarray(values, dtype=float)
    if values.ndim == 3:
        values = values[None]
    header = dict(meta or {}, role="field", grid=grid.descriptor(), lmax=lmax, channels=values.shape[-1])
    return write_sphf(path, header, {"values": values})


def save_coeffs(path, half: np.ndarray, grid: SphericalGrid | None = None, meta: dict | None = None):
    half = np.asarray(half)
    if half.ndim == 3:
        half = half[None]
    lmax, channels = half.shape[-3] - 1, half.shape[-1]
    header = dict(
        meta or {}, role="coeffs", grid=None if grid is None else grid.descriptor(), lmax=lmax, channels=channels
    )
    return write_sphf(path, header, {"coeffs": pack_coeffs(half)})


def load_coeffs(path) -> tuple[dict, np.ndarray]:
    header, arrays = read_sphf(path)
    if header.get("role") != "coeffs":
        raise FormatError("not a coefficient container")
    return header, unpack_coeffs(arrays["coeffs"], int(header["lmax"]), int(header["channels"]))


def save_dataset(path, ds: Dataset, lmax: int | None = None):
    arrays = {"input": ds.inputs}
    if ds.targets is not None:
        arrays["target"] = ds.targets
    if ds.labels is not None:
        arrays["label"] = np.asarray(ds.labels, dtype=float)
    header = dict(ds.meta, role="dataset", grid=ds.grid.descriptor(), lmax=lmax, channels=ds.inputs.shape[-1])
    return write_sphf(path, header, arrays)


def load_dataset(path) -> Dataset:
    header, arrays = read_sphf(path)
    if header.get("role") not in ("dataset", "field"):
        raise FormatError(f"role {header.get('role')!r} is not a dataset")
    try:
        grid = grid_from_descriptor(header["grid"])
    except (KeyError, TypeError, InvalidArgument) as exc:
        raise FormatError(f"bad grid descriptor: {exc}") from None
    inputs = arrays.get("input", arrays.get("values"))
    if inputs is None or inputs.shape[1:3] != grid.shape:
        raise FormatError("field records do not match the grid")
    labels = arrays.get("label")
    if labels is not None:
        labels = labels.astype(np.int64)
    meta = {k: v for k, v in header.items() if k not in ("record_layout", "count", "dtype")}
    return Dataset(grid, inputs, arrays.get("target"), labels, meta)
