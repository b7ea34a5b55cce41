"""Bit-exact model serialization and byte-accurate size accounting.

Stream layout (all integers little-endian, bit packing LSB-first within each
byte; full field table in docs/format.md):

    magic "QNZ1" | u16 version=1 | u32 tensor_count | records...

Each record carries name, scheme tag, shape, then a scheme-specific payload:
raw float32 values; intN grid parameters plus bit-packed codes (two int4
codes per byte, low nibble first); or a PQ layout, codebook (float32 or int8
codes with their grid parameters) and the index matrix packed at
ceil(log2 K) bits per entry. Header fields fully determine every payload
length, so truncation is detected before parsing.
"""

from __future__ import annotations

import io
import os
import struct
import tempfile
from dataclasses import dataclass

import numpy as np

from .quant_pq import BlockLayout, Codebook, index_bits
from .quant_scalar import ChannelQuantParams, QuantParams
from .tensors import (
    SCHEME_INTN,
    SCHEME_PQ,
    SCHEME_PQ_INT8,
    SCHEME_RAW,
    CompressedTensor,
    dequantize_tensor,
)

MAGIC = b"QNZ1"
VERSION = 1


class ModelFormatError(Exception):
    """Base class for malformed-stream diagnostics."""


class BadMagicError(ModelFormatError):
    pass


class VersionError(ModelFormatError):
    pass


class TruncatedStreamError(ModelFormatError):
    pass


class IndexRangeError(ModelFormatError):
    pass


def pack_bits(values: np.ndarray, width: int) -> bytes:
    """Pack integers at ``width`` bits each, LSB-first, zero-padded to bytes."""
    if width == 0:
        return b""
    v = np.asarray(values, dtype=np.uint64).reshape(-1)
    if v.size and int(v.max()) >= (1 << width):
        raise ValueError(f"value does not fit in {width} bits")
    shifts = np.arange(width, dtype=np.uint64)
    bits = ((v[:, None] >> shifts) & np.uint64(1)).astype(np.uint8)
    return np.packbits(bits.reshape(-1), bitorder="little").tobytes()


def unpack_bits(data: bytes, width: int, count: int) -> np.ndarray:
    """Inverse of pack_bits; returns int64 values."""
    if width == 0:
        return np.zeros(count, dtype=np.int64)
    need = (count * width + 7) // 8
    if len(data) < need:
        raise TruncatedStreamError(f"expected {need} packed bytes, got {len(data)}")
    bits = np.unpackbits(np.frombuffer(data, dtype=np.uint8), bitorder="little")[: count * width]
    weights = np.left_shift(np.int64(1), np.arange(width, dtype=np.int64))
    return bits.reshape(count, width).astype(np.int64) @ weights


def _write_params(out: io.BytesIO, q) -> None:
    if isinstance(q, QuantParams):
        out.write(struct.pack("<BI", 0, 1))
        out.write(struct.pack("<dq", q.scale, q.zero_point))
    elif isinstance(q, ChannelQuantParams):
        out.write(struct.pack("<BI", q.axis + 1, len(q.channels)))
        for cp in q.channels:
            out.write(struct.pack("<dq", cp.scale, cp.zero_point))
    else:
        raise TypeError(f"unsupported params {type(q)}")


def _tensor_record(name: str, ct: CompressedTensor) -> bytes:
    out = io.BytesIO()
    nb = name.encode("utf-8")
    out.write(struct.pack("<H", len(nb)))
    out.write(nb)
    rows, cols = ct.shape
    out.write(struct.pack("<BII", ct.scheme, rows, cols))
    if ct.scheme == SCHEME_RAW:
        out.write(np.ascontiguousarray(ct.raw, dtype="<f4").tobytes())
    elif ct.scheme == SCHEME_INTN:
        bits = ct.params.bits
        out.write(struct.pack("<B", bits))
        _write_params(out, ct.params)
        out.write(pack_bits(ct.codes.reshape(-1), bits))
    elif ct.scheme in (SCHEME_PQ, SCHEME_PQ_INT8):
        lay: BlockLayout = ct.layout
        cb: Codebook = ct.codebook
        out.write(struct.pack("<III", lay.block_rows, lay.block_cols, cb.k))
        if ct.scheme == SCHEME_PQ:
            out.write(np.ascontiguousarray(cb.centroids, dtype="<f4").tobytes())
        else:
            if cb.int8_codes is None or cb.int8_params is None:
                raise ValueError("pq+int8 tensor lacks int8 codebook data")
            out.write(struct.pack("<dq", cb.int8_params.scale, cb.int8_params.zero_point))
            out.write(np.ascontiguousarray(cb.int8_codes, dtype=np.uint8).tobytes())
        # Index matrix in block order (column-major over blocks).
        out.write(pack_bits(ct.indices.T.reshape(-1), index_bits(cb.k)))
    else:
        raise ValueError(f"unknown scheme {ct.scheme}")
    return out.getvalue()


def serialize(model: dict[str, CompressedTensor]) -> bytes:
    """Encode the named tensors; an empty model is the 10-byte header."""
    out = io.BytesIO()
    out.write(MAGIC)
    out.write(struct.pack("<HI", VERSION, len(model)))
    for name, ct in model.items():
        out.write(_tensor_record(name, ct))
    return out.getvalue()


class _Reader:
    def __init__(self, data: bytes):
        self._data = data
        self._pos = 0

    def take(self, n: int) -> bytes:
        if self._pos + n > len(self._data):
            raise TruncatedStreamError(
                f"stream ends at byte {len(self._data)}, needed {self._pos + n}"
            )
        chunk = self._data[self._pos : self._pos + n]
        self._pos += n
        return chunk

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    @property
    def exhausted(self) -> bool:
        return self._pos == len(self._data)


def _read_params(r: _Reader, bits: int):
    axis_mode, n_params = r.unpack("<BI")
    entries = [r.unpack("<dq") for _ in range(n_params)]
    if axis_mode == 0:
        if n_params != 1:
            raise ModelFormatError("per-tensor params must have exactly one entry")
        s, z = entries[0]
        return QuantParams(scale=s, zero_point=int(z), bits=bits)
    if axis_mode in (1, 2):
        channels = tuple(QuantParams(scale=s, zero_point=int(z), bits=bits) for s, z in entries)
        return ChannelQuantParams(axis=axis_mode - 1, channels=channels)
    raise ModelFormatError(f"bad axis mode {axis_mode}")


def _read_tensor(r: _Reader) -> tuple[str, CompressedTensor]:
    (name_len,) = r.unpack("<H")
    name = r.take(name_len).decode("utf-8")
    scheme, rows, cols = r.unpack("<BII")
    shape = (rows, cols)
    if scheme == SCHEME_RAW:
        raw = np.frombuffer(r.take(rows * cols * 4), dtype="<f4").reshape(shape).copy()
        return name, CompressedTensor(SCHEME_RAW, shape, raw=raw)
    if scheme == SCHEME_INTN:
        (bits,) = r.unpack("<B")
        if bits not in (4, 8):
            raise ModelFormatError(f"bad bit width {bits}")
        params = _read_params(r, bits)
        n_codes = rows * cols
        packed = r.take((n_codes * bits + 7) // 8)
        codes = unpack_bits(packed, bits, n_codes).astype(np.uint8).reshape(shape)
        return name, CompressedTensor(SCHEME_INTN, shape, params=params, codes=codes)
    if scheme in (SCHEME_PQ, SCHEME_PQ_INT8):
        br, bc, k = r.unpack("<III")
        if k < 1:
            raise ModelFormatError("codebook must have at least one entry")
        try:
            layout = BlockLayout.fit(rows, cols, br, bc)
        except ValueError as e:
            raise ModelFormatError(str(e)) from None
        d = layout.d
        if scheme == SCHEME_PQ:
            cents = np.frombuffer(r.take(k * d * 4), dtype="<f4").reshape(k, d).copy()
            codebook = Codebook(cents)
        else:
            scale, zero = r.unpack("<dq")
            codes = np.frombuffer(r.take(k * d), dtype=np.uint8).reshape(k, d).copy()
            params = QuantParams(scale=scale, zero_point=int(zero), bits=8)
            cents = ((codes.astype(np.float64) + params.zero_point) * params.scale).astype(np.float32)
            codebook = Codebook(cents, int8_codes=codes, int8_params=params)
        n_idx = layout.n_blocks
        width = index_bits(k)
        flat = unpack_bits(r.take((n_idx * width + 7) // 8), width, n_idx)
        if flat.size and int(flat.max()) >= k:
            raise IndexRangeError(f"codeword index {int(flat.max())} out of range [0, {k})")
        indices = np.ascontiguousarray(flat.reshape(layout.q, layout.m).T.astype(np.int32))
        return name, CompressedTensor(scheme, shape, layout=layout, codebook=codebook, indices=indices)
    raise ModelFormatError(f"unknown scheme tag {scheme}")


def deserialize(data: bytes) -> dict[str, CompressedTensor]:
    """Decode a stream produced by serialize; exact inverse."""
    r = _Reader(data)
    magic = r.take(4)
    if magic != MAGIC:
        raise BadMagicError(f"bad magic {magic!r}, expected {MAGIC!r}")
    version, count = r.unpack("<HI")
    if version != VERSION:
        raise VersionError(f"unsupported format version {version}")
    model: dict[str, CompressedTensor] = {}
    for _ in range(count):
        name, ct = _read_tensor(r)
        model[name] = ct
    return model


@dataclass
class SizeReport:
    per_tensor: dict[str, int]
    total_bytes: int
    baseline_bytes: int

    @property
    def ratio(self) -> float:
        return self.baseline_bytes / self.total_bytes


def size_report(model: dict[str, CompressedTensor]) -> SizeReport:
    """Byte-accurate sizes against a raw-float32 serialization baseline."""
    per = {name: len(_tensor_record(name, ct)) for name, ct in model.items()}
    total = len(serialize(model))
    raw = {
        name: CompressedTensor(SCHEME_RAW, ct.shape, raw=dequantize_tensor(ct))
        for name, ct in model.items()
    }
    baseline = len(serialize(raw))
    return SizeReport(per_tensor=per, total_bytes=total, baseline_bytes=baseline)


def save_model(model: dict[str, CompressedTensor], path: str | os.PathLike) -> None:
    """Serialize to ``path`` atomically (temp file then rename)."""
    data = serialize(model)
    directory = os.path.dirname(os.fspath(path)) or "."
    fd, tmp = tempfile.mkstemp(dir=directory, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def load_model(path: str | os.PathLike) -> dict[str, CompressedTensor]:
    with open(path, "rb") as f:
        return deserialize(f.read())
