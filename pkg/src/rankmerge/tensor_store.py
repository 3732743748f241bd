"""Checkpoint container: named dense tensors in a bit-exact binary format.

A checkpoint is stored as a single file:

* 8 bytes: unsigned little-endian length ``N`` of the JSON header,
* ``N`` bytes: UTF-8 JSON mapping tensor name to
  ``{"dtype": "F32"|"F64", "shape": [...], "data_offsets": [start, end]}``,
  plus an optional ``"__metadata__"`` string-to-string map,
* the concatenated raw little-endian row-major buffers.

Offsets are relative to the start of the data section. Tensors are written
in lexicographic name order with contiguous buffers, so saving the same map
twice produces byte-identical files.
"""

from __future__ import annotations

import enum
import json
import struct
from pathlib import Path
from typing import Iterable, Iterator, Mapping

import numpy as np

from .errors import (
    ArchitectureMismatch,
    FormatError,
    TruncationError,
    UnsupportedDtype,
)

__all__ = [
    "ParamClass",
    "TensorMap",
    "classify",
    "load_checkpoint",
    "save_checkpoint",
    "validate_aligned",
]

_DTYPE_TAGS = {"F32": np.dtype("<f4"), "F64": np.dtype("<f8")}
_TAG_FOR_KIND = {"f4": "F32", "f8": "F64"}


def _dtype_tag(dtype: np.dtype) -> str:
    tag = _TAG_FOR_KIND.get(dtype.str.lstrip("<>=|"))
    if tag is None:
        raise UnsupportedDtype(f"dtype {dtype} is not one of float32/float64")
    return tag


def _check_tensor(name: str, arr: np.ndarray) -> np.ndarray:
    if arr.ndim < 1:
        raise FormatError(f"tensor '{name}' must have at least one dimension")
    if any(d < 1 for d in arr.shape):
        raise FormatError(f"tensor '{name}' has a non-positive dimension: {arr.shape}")
    _dtype_tag(arr.dtype)
    out = np.ascontiguousarray(arr)
    if out is arr and arr.flags.writeable:
        out = arr.copy()
    out.flags.writeable = False
    return out


class ParamClass(enum.Enum):
    """Merge treatment of a parameter: SVD path or plain averaging."""

    MATRIX = "matrix"
    NON_MATRIX = "non_matrix"


class TensorMap:
    """Immutable, name-ordered collection of dense tensors plus metadata.

    Iteration order is lexicographic by name regardless of insertion order.
    Arrays are stored read-only; mutate-by-accident is a bug we refuse to
    inherit from callers.
    """

    __slots__ = ("_entries", "_metadata")

    def __init__(
        self,
        entries: Mapping[str, np.ndarray],
        metadata: Mapping[str, str] | None = None,
    ):
        checked = {name: _check_tensor(name, np.asarray(arr)) for name, arr in entries.items()}
        self._entries: dict[str, np.ndarray] = {k: checked[k] for k in sorted(checked)}
        self._metadata: dict[str, str] = {str(k): str(v) for k, v in (metadata or {}).items()}

    @property
    def metadata(self) -> dict[str, str]:
        return dict(self._metadata)

    def names(self) -> list[str]:
        return list(self._entries)

    def items(self) -> Iterable[tuple[str, np.ndarray]]:
        return self._entries.items()

    def __iter__(self) -> Iterator[str]:
        return iter(self._entries)

    def __len__(self) -> int:
        return len(self._entries)

    def __contains__(self, name: object) -> bool:
        return name in self._entries

    def __getitem__(self, name: str) -> np.ndarray:
        return self._entries[name]

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, TensorMap):
            return NotImplemented
        if self.names() != other.names() or self._metadata != other._metadata:
            return False
        return all(
            a.dtype == b.dtype and a.shape == b.shape and np.array_equal(a, b)
            for (_, a), (_, b) in zip(self.items(), other.items())
        )

    def __repr__(self) -> str:
        return f"TensorMap({len(self)} tensors)"


def classify(name: str, tensor: np.ndarray) -> ParamClass:
    """Classify a parameter by shape alone.

    Exactly-2-D tensors with both dimensions >= 2 take the SVD merge path;
    everything else (biases, norm scales, [1, n] strips, 3-D tensors) is
    averaged. ``name`` is accepted for signature symmetry with per-name
    overrides applied by callers, but never influences the result.
    """
    del name
    shape = np.asarray(tensor).shape
    if len(shape) == 2 and shape[0] >= 2 and shape[1] >= 2:
        return ParamClass.MATRIX
    return ParamClass.NON_MATRIX


def save_checkpoint(tmap: TensorMap, path: str | Path) -> None:
    """Write ``tmap`` to ``path`` in the container format."""
    header: dict[str, object] = {}
    if tmap.metadata:
        header["__metadata__"] = tmap.metadata
    offset = 0
    buffers: list[bytes] = []
    for name, arr in tmap.items():
        tag = _dtype_tag(arr.dtype)
        raw = np.ascontiguousarray(arr, dtype=_DTYPE_TAGS[tag]).tobytes()
        header[name] = {
            "dtype": tag,
            "shape": list(arr.shape),
            "data_offsets": [offset, offset + len(raw)],
        }
        offset += len(raw)
        buffers.append(raw)
    header_bytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(struct.pack("<Q", len(header_bytes)))
        fh.write(header_bytes)
        for raw in buffers:
            fh.write(raw)


def load_checkpoint(path: str | Path) -> TensorMap:
    """Read a checkpoint file, materializing every tensor.

    Raises :class:`FormatError` for malformed or inconsistent headers,
    :class:`UnsupportedDtype` for dtypes outside {float32, float64}, and
    :class:`TruncationError` when a declared buffer extends past the file.
    """
    blob = Path(path).read_bytes()
    if len(blob) < 8:
        raise FormatError("file shorter than the 8-byte header length")
    (header_len,) = struct.unpack("<Q", blob[:8])
    if 8 + header_len > len(blob):
        raise FormatError(
            f"declared header length {header_len} exceeds file size {len(blob)}"
        )
    try:
        header = json.loads(blob[8 : 8 + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"header is not valid UTF-8 JSON: {exc}") from exc
    if not isinstance(header, dict):
        raise FormatError("header JSON must be an object")

    data = blob[8 + header_len :]
    metadata = header.pop("__metadata__", {})
    if not isinstance(metadata, dict) or not all(
        isinstance(k, str) and isinstance(v, str) for k, v in metadata.items()
    ):
        raise FormatError("__metadata__ must map strings to strings")

    entries: dict[str, np.ndarray] = {}
    for name, spec in header.items():
        if not isinstance(spec, dict):
            raise FormatError(f"entry '{name}' is not an object")
        missing = {"dtype", "shape", "data_offsets"} - spec.keys()
        if missing:
            raise FormatError(f"entry '{name}' is missing {sorted(missing)}")
        tag = spec["dtype"]
        if tag not in _DTYPE_TAGS:
            raise UnsupportedDtype(f"entry '{name}' declares dtype {tag!r}")
        shape = spec["shape"]
        if (
            not isinstance(shape, list)
            or not shape
            or not all(isinstance(d, int) and d >= 1 for d in shape)
        ):
            raise FormatError(f"entry '{name}' has invalid shape {shape!r}")
        offsets = spec["data_offsets"]
        if (
            not isinstance(offsets, list)
            or len(offsets) != 2
            or not all(isinstance(o, int) for o in offsets)
            or offsets[0] < 0
            or offsets[1] < offsets[0]
        ):
            raise FormatError(f"entry '{name}' has invalid offsets {offsets!r}")
        start, end = offsets
        dtype = _DTYPE_TAGS[tag]
        expected = int(np.prod(shape)) * dtype.itemsize
        if end - start != expected:
            raise FormatError(
                f"entry '{name}': offsets span {end - start} bytes but shape "
                f"{shape} at {tag} needs {expected}"
            )
        if end > len(data):
            raise TruncationError(
                f"entry '{name}' declares bytes up to {end} but the data "
                f"section holds only {len(data)}"
            )
        arr = np.frombuffer(data, dtype=dtype, count=int(np.prod(shape)), offset=start)
        entries[name] = arr.reshape(shape).copy()
    return TensorMap(entries, metadata)


def validate_aligned(maps: list[TensorMap]) -> None:
    """Check that all checkpoints share one architecture.

    Succeeds iff every map has identical name sets, shapes, and dtypes.
    The first offending tensor (lexicographically) is named in the raised
    :class:`ArchitectureMismatch`. Requires at least two maps.
    """
    if len(maps) < 2:
        raise ValueError("validate_aligned needs at least two checkpoints")
    reference = maps[0]
    for other in maps[1:]:
        for name in sorted(set(reference.names()) | set(other.names())):
            if name not in other:
                raise ArchitectureMismatch(name, "missing from a checkpoint")
            if name not in reference:
                raise ArchitectureMismatch(name, "absent from the first checkpoint")
            a, b = reference[name], other[name]
            if a.shape != b.shape:
                raise ArchitectureMismatch(name, f"shape {a.shape} vs {b.shape}")
            if a.dtype != b.dtype:
                raise ArchitectureMismatch(name, f"dtype {a.dtype} vs {b.dtype}")
