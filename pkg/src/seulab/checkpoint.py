"""Named-tensor container with copy-on-write single-bit mutation.

File layout is compatible with the single-file tensor container used by
common diffusion-model weight distributions, so the mutation tooling
also works on real checkpoints:

    [u64 little-endian header length][UTF-8 JSON header][raw data]

Each header entry maps a tensor name to
``{"dtype": "F16", "shape": [...], "data_offsets": [begin, end]}`` with
offsets relative to the start of the data region.  An optional
``__metadata__`` object of string pairs is tolerated and preserved.

A parsed store never mutates its base bytes.  Bit flips produce new
store views that share the base buffer and carry a sparse overlay of
changed elements, so any number of corrupted views can coexist with the
pristine base.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from enum import Enum
from math import prod
from typing import BinaryIO, Iterable, Iterator, Mapping

import numpy as np

from .half16 import flip_bit


class CheckpointError(Exception):
    """Base class for container and addressing failures."""


class MalformedHeaderError(CheckpointError):
    """Header is not valid JSON or violates the entry schema."""


class RangeError(CheckpointError):
    """A byte range is out of bounds, overlapping, or of the wrong length."""


class DtypeError(CheckpointError):
    """A binary16 operation was requested on a non-binary16 tensor."""


class UnknownTensorError(CheckpointError):
    """The named tensor does not exist in the store."""


class UnknownTargetError(CheckpointError):
    """A selector does not address any tensor under the naming scheme."""


_DTYPE_NBYTES = {
    "F16": 2, "BF16": 2, "F32": 4, "F64": 8,
    "I8": 1, "I16": 2, "I32": 4, "I64": 8,
    "U8": 1, "U16": 2, "U32": 4, "U64": 8,
    "BOOL": 1, "F8_E4M3": 1, "F8_E5M2": 1,
}

_DTYPE_NUMPY = {
    "F16": "<f2", "BF16": "<u2", "F32": "<f4", "F64": "<f8",
    "I8": "i1", "I16": "<i2", "I32": "<i4", "I64": "<i8",
    "U8": "u1", "U16": "<u2", "U32": "<u4", "U64": "<u8",
    "BOOL": "?",
}

_NUMPY_DTYPE_TAGS = {
    np.dtype(np.float16): "F16",
    np.dtype("<f4"): "F32",
    np.dtype("<f8"): "F64",
    np.dtype("<i4"): "I32",
    np.dtype("<i8"): "I64",
    np.dtype("u1"): "U8",
}


@dataclass(frozen=True)
class TensorEntry:
    """One header entry: dtype tag, shape and byte range in the data region."""

    dtype: str
    shape: tuple[int, ...]
    start: int
    end: int

    @property
    def nbytes(self) -> int:
        return self.end - self.start

    @property
    def element_count(self) -> int:
        return prod(self.shape)


def _reject_duplicate_keys(pairs):
    seen = set()
    for key, _ in pairs:
        if key in seen:
            raise MalformedHeaderError(f"duplicate tensor name in header: {key!r}")
        seen.add(key)
    return dict(pairs)


def parse_checkpoint(source: bytes | bytearray | BinaryIO) -> "CheckpointStore":
    """Parse a container byte stream into an addressable store.

    Raises MalformedHeaderError for structural problems (bad JSON,
    missing or unknown entry fields), RangeError for byte ranges that
    fall outside the data region, overlap each other, or disagree with
    shape * element size.
    """
    if isinstance(source, (bytes, bytearray)):
        raw = bytes(source)
    else:
        raw = source.read()
    if len(raw) < 8:
        raise MalformedHeaderError("stream shorter than the 8-byte length prefix")
    header_len = int.from_bytes(raw[:8], "little")
    if 8 + header_len > len(raw):
        raise MalformedHeaderError(
            f"declared header length {header_len} exceeds stream size {len(raw)}"
        )
    header_bytes = raw[8:8 + header_len]
    data = raw[8 + header_len:]
    try:
        header = json.loads(header_bytes.decode("utf-8"), object_pairs_hook=_reject_duplicate_keys)
    except MalformedHeaderError:
        raise
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise MalformedHeaderError(f"header is not valid UTF-8 JSON: {exc}") from exc
    if not isinstance(header, dict):
        raise MalformedHeaderError("header must be a JSON object")

    entries: dict[str, TensorEntry] = {}
    for name, spec in header.items():
        if name == "__metadata__":
            if not isinstance(spec, dict):
                raise MalformedHeaderError("__metadata__ must be an object")
            continue
        if not isinstance(spec, dict):
            raise MalformedHeaderError(f"entry {name!r} must be an object")
        unknown = set(spec) - {"dtype", "shape", "data_offsets"}
        if unknown:
            raise MalformedHeaderError(f"entry {name!r} has unknown fields {sorted(unknown)}")
        missing = {"dtype", "shape", "data_offsets"} - set(spec)
        if missing:
            raise MalformedHeaderError(f"entry {name!r} is missing fields {sorted(missing)}")
        dtype = spec["dtype"]
        shape = spec["shape"]
        offsets = spec["data_offsets"]
        if not isinstance(dtype, str):
            raise MalformedHeaderError(f"entry {name!r}: dtype must be a string")
        if (not isinstance(shape, list)
                or any(not isinstance(d, int) or isinstance(d, bool) or d < 0 for d in shape)):
            raise MalformedHeaderError(f"entry {name!r}: shape must be a list of ints >= 0")
        if (not isinstance(offsets, list) or len(offsets) != 2
                or any(not isinstance(o, int) or isinstance(o, bool) for o in offsets)):
            raise MalformedHeaderError(f"entry {name!r}: data_offsets must be [begin, end]")
        start, end = offsets
        if not 0 <= start <= end <= len(data):
            raise RangeError(
                f"entry {name!r}: byte range [{start}, {end}) outside data region "
                f"of {len(data)} bytes"
            )
        elem_size = _DTYPE_NBYTES.get(dtype)
        if elem_size is not None and end - start != prod(shape) * elem_size:
            raise RangeError(
                f"entry {name!r}: byte range length {end - start} != "
                f"{prod(shape)} elements * {elem_size} bytes"
            )
        entries[name] = TensorEntry(dtype, tuple(shape), start, end)

    occupied = sorted((e.start, e.end, n) for n, e in entries.items() if e.end > e.start)
    for (s0, e0, n0), (s1, e1, n1) in zip(occupied, occupied[1:]):
        if s1 < e0:
            raise RangeError(f"byte ranges of {n0!r} and {n1!r} overlap")

    return CheckpointStore(entries, data, header_bytes)


class CheckpointStore:
    """Immutable view over a parsed container plus a sparse flip overlay.

    Reads see base data with the overlay applied.  ``flip`` returns a new
    view; the receiver is never modified, so a base store can be shared
    across any number of concurrent trials.
    """

    def __init__(
        self,
        entries: Mapping[str, TensorEntry],
        data: bytes,
        header_bytes: bytes,
        overlay: Mapping[tuple[str, int], int] | None = None,
    ):
        self._entries = dict(entries)
        self._data = data
        self._header_bytes = header_bytes
        self._overlay: dict[tuple[str, int], int] = dict(overlay or {})

    def names(self) -> list[str]:
        return list(self._entries)

    def __contains__(self, name: str) -> bool:
        return name in self._entries

    def __iter__(self) -> Iterator[str]:
        return iter(self._entries)

    def entry(self, name: str) -> TensorEntry:
        try:
            return self._entries[name]
        except KeyError:
            raise UnknownTensorError(f"no tensor named {name!r}") from None

    def element_count(self, name: str) -> int:
        return self.entry(name).element_count

    @property
    def overlay(self) -> Mapping[tuple[str, int], int]:
        return dict(self._overlay)

    def _require_f16(self, name: str) -> TensorEntry:
        entry = self.entry(name)
        if entry.dtype != "F16":
            raise DtypeError(f"tensor {name!r} has dtype {entry.dtype}, binary16 required")
        return entry

    def read_element(self, name: str, flat_index: int) -> int:
        """The 16-bit pattern of one element, overlay applied."""
        entry = self._require_f16(name)
        if not 0 <= flat_index < entry.element_count:
            raise IndexError(
                f"flat index {flat_index} out of range for {name!r} "
                f"with {entry.element_count} elements"
            )
        hit = self._overlay.get((name, flat_index))
        if hit is not None:
            return hit
        offset = entry.start + 2 * flat_index
        return int.from_bytes(self._data[offset:offset + 2], "little")

    def flip(self, name: str, flat_index: int, position: int) -> "CheckpointStore":
        """New view with one bit of one element flipped; self is unchanged."""
        entry = self._require_f16(name)
        if not 0 <= flat_index < entry.element_count:
            raise IndexError(
                f"flat index {flat_index} out of range for {name!r} "
                f"with {entry.element_count} elements"
            )
        new_pattern = flip_bit(self.read_element(name, flat_index), position)
        offset = entry.start + 2 * flat_index
        base_pattern = int.from_bytes(self._data[offset:offset + 2], "little")
        overlay = dict(self._overlay)
        key = (name, flat_index)
        if new_pattern == base_pattern:
            overlay.pop(key, None)
        else:
            overlay[key] = new_pattern
        return CheckpointStore(self._entries, self._data, self._header_bytes, overlay)

    def uint16(self, name: str) -> np.ndarray:
        """Flat uint16 pattern array of a binary16 tensor, overlay applied."""
        entry = self._require_f16(name)
        arr = np.frombuffer(
            self._data, dtype="<u2", count=entry.element_count, offset=entry.start
        )
        touched = [(i, p) for (n, i), p in self._overlay.items() if n == name]
        if touched:
            arr = arr.copy()
            for i, p in touched:
                arr[i] = p
        return arr

    def tensor(self, name: str) -> np.ndarray:
        """Tensor as a numpy array (float16 for F16), overlay applied."""
        entry = self.entry(name)
        if entry.dtype == "F16":
            return self.uint16(name).view(np.float16).reshape(entry.shape)
        np_dtype = _DTYPE_NUMPY.get(entry.dtype)
        if np_dtype is None:
            raise DtypeError(f"tensor {name!r} has unsupported dtype {entry.dtype}")
        arr = np.frombuffer(
            self._data, dtype=np_dtype, count=entry.element_count, offset=entry.start
        )
        return arr.reshape(entry.shape)

    def to_bytes(self) -> bytes:
        """Serialize with the overlay materialized.

        An unmodified store round-trips byte-identically: the original
        header bytes are kept verbatim and the data region is untouched.
        """
        if not self._overlay:
            data = self._data
        else:
            buf = bytearray(self._data)
            for (name, flat_index), pattern in self._overlay.items():
                offset = self._entries[name].start + 2 * flat_index
                buf[offset:offset + 2] = pattern.to_bytes(2, "little")
            data = bytes(buf)
        return len(self._header_bytes).to_bytes(8, "little") + self._header_bytes + data

    def digest(self) -> str:
        """SHA-256 of the serialized container (overlay materialized)."""
        return hashlib.sha256(self.to_bytes()).hexdigest()

    def element_offset(self, name: str, flat_index: int) -> int:
        """Absolute byte offset of an element in the serialized stream."""
        entry = self._require_f16(name)
        if not 0 <= flat_index < entry.element_count:
            raise IndexError(f"flat index {flat_index} out of range for {name!r}")
        return 8 + len(self._header_bytes) + entry.start + 2 * flat_index


def flip_element(
    store: CheckpointStore, name: str, flat_index: int, position: int
) -> CheckpointStore:
    """Copy-on-write single-bit flip; returns a new view, base unchanged."""
    return store.flip(name, flat_index, position)


def write_checkpoint(store: CheckpointStore) -> bytes:
    return store.to_bytes()


def bit_statistics(store: CheckpointStore, names: Iterable[str]) -> np.ndarray:
    """Per-position fraction of set bits over all elements of the named tensors.

    Returns 16 values indexed by bit position (0 = mantissa LSB, 15 = sign),
    each in [0, 1].
    """
    counts = np.zeros(16, dtype=np.int64)
    total = 0
    for name in names:
        arr = store.uint16(name)
        total += arr.size
        for p in range(16):
            counts[p] += int(((arr >> p) & 1).sum())
    if total == 0:
        raise ValueError("bit statistics over zero elements are undefined")
    return counts / total


def build_checkpoint(
    tensors: Mapping[str, np.ndarray], metadata: Mapping[str, str] | None = None
) -> bytes:
    """Serialize named arrays into a fresh container.

    Tensors are laid out in sorted-name order with contiguous offsets and
    a canonical compact JSON header, so identical inputs always produce
    identical bytes.
    """
    header: dict[str, object] = {}
    if metadata:
        header["__metadata__"] = {str(k): str(v) for k, v in sorted(metadata.items())}
    chunks: list[bytes] = []
    cursor = 0
    for name in sorted(tensors):
        arr = np.ascontiguousarray(tensors[name])
        tag = _NUMPY_DTYPE_TAGS.get(arr.dtype)
        if tag is None:
            raise DtypeError(f"cannot serialize dtype {arr.dtype} of tensor {name!r}")
        blob = arr.astype(arr.dtype.newbyteorder("<"), copy=False).tobytes()
        header[name] = {
            "dtype": tag,
            "shape": list(arr.shape),
            "data_offsets": [cursor, cursor + len(blob)],
        }
        chunks.append(blob)
        cursor += len(blob)
    header_bytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return len(header_bytes).to_bytes(8, "little") + header_bytes + b"".join(chunks)


class Block(str, Enum):
    DOWN = "down"
    MID = "mid"
    UP = "up"


class Layer(str, Enum):
    SA = "sa"
    CA = "ca"
    FFN = "ffn"


class Matrix(str, Enum):
    WQ = "wq"
    WK = "wk"
    WV = "wv"
    WO = "wo"
    WF1 = "wf1"
    WF2 = "wf2"


_ATTENTION_MATRICES = frozenset({Matrix.WQ, Matrix.WK, Matrix.WV, Matrix.WO})


@dataclass(frozen=True)
class TensorSelector:
    """Structural address of a transformer weight matrix.

    ``level`` counts from the top of the UNet (0 = highest resolution);
    the mid block has a single level 0.  Attention matrices (Wq/Wk/Wv/Wo)
    go with SA or CA layers, Wf1/Wf2 with FFN.
    """

    block: Block
    level: int
    transformer_index: int
    layer: Layer
    matrix: Matrix

    def __post_init__(self):
        if self.level < 0 or self.transformer_index < 0:
            raise ValueError("level and transformer_index must be >= 0")
        attention = self.matrix in _ATTENTION_MATRICES
        if attention and self.layer == Layer.FFN:
            raise ValueError(f"matrix {self.matrix.value} requires an SA or CA layer")
        if not attention and self.layer != Layer.FFN:
            raise ValueError(f"matrix {self.matrix.value} requires the FFN layer")

    def block_label(self) -> str:
        """Paper-style block label: DB1/DB2/... for down, MB for mid, UBn for up."""
        if self.block == Block.MID:
            return "MB"
        prefix = "DB" if self.block == Block.DOWN else "UB"
        return f"{prefix}{self.level + 1}"

    def layer_label(self) -> str:
        """Column label used in reports: SA, CA, FC1 or FC2."""
        if self.layer == Layer.FFN:
            return "FC1" if self.matrix == Matrix.WF1 else "FC2"
        return self.layer.value.upper()


@dataclass(frozen=True)
class NamingScheme:
    """Data-driven selector -> tensor-name table for one model family."""

    name: str
    table: Mapping[TensorSelector, str]

    def selectors(self) -> list[TensorSelector]:
        return list(self.table)

    def resolve(self, selector: TensorSelector) -> str:
        try:
            return self.table[selector]
        except KeyError:
            raise UnknownTargetError(
                f"selector {selector} does not address a tensor under "
                f"the {self.name!r} scheme"
            ) from None


def resolve_selector(selector: TensorSelector, scheme: NamingScheme) -> str:
    """Unique tensor name for a selector under a scheme, or UnknownTargetError."""
    return scheme.resolve(selector)


def sd2_unet_naming_scheme() -> NamingScheme:
    """Name table for the production SD 2.0 UNet layout.

    Four down levels where the deepest is attention-free, two transformers
    per down cross-attention block, three per up block, one in the mid
    block.  Up levels count from the top, so up level 0 maps to the last
    up_blocks index.
    """
    levels = 4
    per_down, per_up = 2, 3

    def parts(layer: Layer, matrix: Matrix) -> str:
        if layer == Layer.FFN:
            return "ff.net.0.proj.weight" if matrix == Matrix.WF1 else "ff.net.2.weight"
        attn = "attn1" if layer == Layer.SA else "attn2"
        suffix = {
            Matrix.WQ: "to_q.weight",
            Matrix.WK: "to_k.weight",
            Matrix.WV: "to_v.weight",
            Matrix.WO: "to_out.0.weight",
        }[matrix]
        return f"{attn}.{suffix}"

    def matrices() -> list[tuple[Layer, Matrix]]:
        out = []
        for layer in (Layer.SA, Layer.CA):
            for matrix in (Matrix.WQ, Matrix.WK, Matrix.WV, Matrix.WO):
                out.append((layer, matrix))
        out.append((Layer.FFN, Matrix.WF1))
        out.append((Layer.FFN, Matrix.WF2))
        return out

    table: dict[TensorSelector, str] = {}
    for level in range(levels - 1):
        for t in range(per_down):
            for layer, matrix in matrices():
                sel = TensorSelector(Block.DOWN, level, t, layer, matrix)
                table[sel] = (
                    f"down_blocks.{level}.attentions.{t}."
                    f"transformer_blocks.0.{parts(layer, matrix)}"
                )
        for t in range(per_up):
            for layer, matrix in matrices():
                sel = TensorSelector(Block.UP, level, t, layer, matrix)
                table[sel] = (
                    f"up_blocks.{levels - 1 - level}.attentions.{t}."
                    f"transformer_blocks.0.{parts(layer, matrix)}"
                )
    for layer, matrix in matrices():
        sel = TensorSelector(Block.MID, 0, 0, layer, matrix)
        table[sel] = f"mid_block.attentions.0.transformer_blocks.0.{parts(layer, matrix)}"
    return NamingScheme("sd2-unet", table)
