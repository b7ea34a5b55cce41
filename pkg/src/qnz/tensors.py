"""Tagged container for a weight matrix in any supported representation.

Schemes: raw float32, fixed-point intN codes, product-quantized (codebook +
index matrix), and product-quantized with int8-compressed centroids. Arrays
are kept unpacked in memory; bit packing (two int4 codes per byte, indices at
ceil(log2 K) bits) happens in the serialization layer.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

SCHEME_RAW = 0
SCHEME_INTN = 1
SCHEME_PQ = 2
SCHEME_PQ_INT8 = 3

SCHEME_NAMES = {
    SCHEME_RAW: "raw32",
    SCHEME_INTN: "intN",
    SCHEME_PQ: "pq",
    SCHEME_PQ_INT8: "pq+int8",
}


@dataclass
class CompressedTensor:
    """One weight matrix in compressed (or raw) form.

    Exactly the fields for the tagged scheme are populated:
      raw32:   ``raw`` (float32 matrix)
      intN:    ``params`` (QuantParams or ChannelQuantParams), ``codes``
               (uint8 matrix of N-bit code values)
      pq:      ``layout``, ``codebook``, ``indices`` (int32, shape (m, q))
      pq+int8: same as pq with ``codebook.int8_codes``/``int8_params`` set
    """

    scheme: int
    shape: tuple[int, int]
    raw: np.ndarray | None = None
    params: object | None = None  # QuantParams | ChannelQuantParams
    codes: np.ndarray | None = None
    layout: object | None = None  # BlockLayout
    codebook: object | None = None  # Codebook
    indices: np.ndarray | None = None

    def __post_init__(self):
        if self.scheme not in SCHEME_NAMES:
            raise ValueError(f"unknown scheme tag {self.scheme}")
        r, c = self.shape
        if r <= 0 or c <= 0:
            raise ValueError(f"bad shape {self.shape}")


def dequantize_tensor(ct: CompressedTensor) -> np.ndarray:
    """Reconstruct the float32 matrix this tensor encodes."""
    if ct.scheme == SCHEME_RAW:
        return np.asarray(ct.raw, dtype=np.float32)
    if ct.scheme == SCHEME_INTN:
        from .quant_scalar import dequantize_intn

        return dequantize_intn(ct)
    if ct.scheme in (SCHEME_PQ, SCHEME_PQ_INT8):
        from .quant_pq import reconstruct

        return reconstruct(ct.codebook, ct.indices, ct.layout)
    raise ValueError(f"unknown scheme tag {ct.scheme}")
