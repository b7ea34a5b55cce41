"""Fixed-point scalar quantization.

Weights are mapped onto a grid of 2**N evenly spaced codes via a scale ``s``
and an integer zero point ``z``: the code level of ``w`` is
``round(w / s + z) - z``, which for calibrated in-range values lies in
``[z, z + 2**N - 1]``; dequantization multiplies the level by ``s``.
Calibrators compute (s, z) from data: plain min/max, an L2-minimizing clip
range search over a histogram, or per-channel min/max. An ActivationObserver
accumulates the same statistics over forward passes and freezes them.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .numerics import as_matrix
from .tensors import SCHEME_INTN, CompressedTensor

HIST_BINS = 2048
HIST_STRIDE = 8
DEGENERATE_SCALE = 1e-8


def round_half_away(x):
    """Round to nearest integer, halves away from zero. Works elementwise."""
    x = np.asarray(x, dtype=np.float64)
    return np.where(x >= 0.0, np.floor(x + 0.5), np.ceil(x - 0.5))


@dataclass(frozen=True)
class QuantParams:
    """Scale, zero point and bit width of one fixed-point grid."""

    scale: float
    zero_point: int
    bits: int

    def __post_init__(self):
        if self.scale <= 0.0:
            raise ValueError(f"scale must be positive, got {self.scale}")
        if self.bits not in (4, 8):
            raise ValueError(f"bits must be 4 or 8, got {self.bits}")
        if self.zero_point != int(self.zero_point):
            raise ValueError("zero_point must be an integer")

    @property
    def levels(self) -> int:
        return (1 << self.bits) - 1


@dataclass(frozen=True)
class ChannelQuantParams:
    """Independent QuantParams per row (axis=0) or column (axis=1)."""

    axis: int
    channels: tuple[QuantParams, ...]

    def __post_init__(self):
        if self.axis not in (0, 1):
            raise ValueError(f"axis must be 0 or 1, got {self.axis}")
        if not self.channels:
            raise ValueError("need at least one channel")

    @property
    def bits(self) -> int:
        return self.channels[0].bits


def _params_from_range(lo: float, hi: float, bits: int) -> QuantParams:
    if hi > lo:
        scale = (hi - lo) / ((1 << bits) - 1)
    else:
        # Constant tensor: pick a scale that represents the value exactly.
        scale = max(abs(lo), DEGENERATE_SCALE)
    zero = int(round_half_away(lo / scale))
    return QuantParams(scale=scale, zero_point=zero, bits=bits)


def calibrate_minmax(w: np.ndarray, bits: int) -> QuantParams:
    """Scale and zero point from the full [min, max] range of ``w``."""
    w = as_matrix(w)
    return _params_from_range(float(w.min()), float(w.max()), bits)


def quant_levels(w, q: QuantParams, clamp: bool = True) -> np.ndarray:
    """Integer grid levels of ``w``; clamped to [z, z + 2**N - 1] by default."""
    x = np.asarray(w, dtype=np.float64)
    k = round_half_away(x / q.scale + q.zero_point) - q.zero_point
    if clamp:
        k = np.clip(k, q.zero_point, q.zero_point + q.levels)
    return k.astype(np.int64)


def fake_quant(w, q: QuantParams):
    """Quantize-then-dequantize in real arithmetic.

    Scalar in, float out; array in, float64 array out. Values land exactly on
    the grid {k * s}, so applying fake_quant twice equals applying it once.
    """
    k = quant_levels(w, q)
    out = k.astype(np.float64) * q.scale
    if np.isscalar(w) or np.ndim(w) == 0:
        return float(out)
    return out


def fake_quant_matrix(w: np.ndarray, q) -> np.ndarray:
    """Elementwise fake quantization of a matrix, float32 result.

    ``q`` may be per-tensor QuantParams or ChannelQuantParams.
    """
    w = as_matrix(w)
    if isinstance(q, QuantParams):
        return np.asarray(fake_quant(w, q), dtype=np.float32)
    out = np.empty_like(w)
    for i, cp in enumerate(q.channels):
        sl = (i, slice(None)) if q.axis == 0 else (slice(None), i)
        out[sl] = fake_quant(w[sl], cp)
    return out


def quantization_l2(w: np.ndarray, q) -> float:
    """Total squared error sum((w - fake_quant(w))**2)."""
    w = as_matrix(w)
    d = w.astype(np.float64) - fake_quant_matrix(w, q).astype(np.float64)
    return float(np.sum(d * d))


def _search_clip_ranges(counts: np.ndarray, lo: float, hi: float, bits: int) -> QuantParams:
    """Best clip range over the histogram, by count-weighted center error.

    Candidate ranges are every (start_bin, end_bin) pair on a stride-8 grid,
    including the full range. Centers outside a candidate range clamp to its
    ends, so clipping cost is part of the objective.

    The grid point nearest an in-range center depends only on the candidate's
    scale (integer zero points shift the grid onto itself), and the scale
    depends only on the candidate's width. So candidates are grouped by
    width: the in-range error becomes one cumulative sum per width, and the
    two clamp regions collapse into prefix sums of (c, c*m, c*m**2), leaving
    O(1) work per candidate instead of a pass over all bins.
    """
    edges = np.linspace(lo, hi, HIST_BINS + 1)
    centers = 0.5 * (edges[:-1] + edges[1:])
    c = counts.astype(np.float64)
    n_levels = (1 << bits) - 1
    csum = np.concatenate([[0.0], np.cumsum(c)])
    cm = np.concatenate([[0.0], np.cumsum(c * centers)])
    cm2 = np.concatenate([[0.0], np.cumsum(c * centers * centers)])
    bin_w = (hi - lo) / HIST_BINS
    best_err = np.inf
    best = (0, HIST_BINS)
    for width in range(HIST_STRIDE, HIST_BINS + 1, HIST_STRIDE):
        scale = width * bin_w / n_levels
        u = centers / scale
        in_err = c * (u - round_half_away(u)) ** 2 * (scale * scale)
        esum = np.concatenate([[0.0], np.cumsum(in_err)])
        starts = np.arange(0, HIST_BINS - width + 1, HIST_STRIDE)
        zeros = round_half_away(edges[starts] / scale)
        v_lo = zeros * scale
        v_hi = (zeros + n_levels) * scale
        i_lo = np.searchsorted(centers, (zeros - 0.5) * scale, side="left")
        i_hi = np.searchsorted(centers, (zeros + n_levels + 0.5) * scale, side="right")
        left = cm2[i_lo] - 2.0 * v_lo * cm[i_lo] + v_lo * v_lo * csum[i_lo]
        right = (cm2[-1] - cm2[i_hi]) - 2.0 * v_hi * (cm[-1] - cm[i_hi]) + v_hi * v_hi * (csum[-1] - csum[i_hi])
        errs = left + right + (esum[i_hi] - esum[i_lo])
        i = int(np.argmin(errs))
        if errs[i] < best_err:
            best_err = float(errs[i])
            best = (int(starts[i]), int(starts[i]) + width)
    return _params_from_range(float(edges[best[0]]), float(edges[best[1]]), bits)


def calibrate_histogram(w: np.ndarray, bits: int) -> QuantParams:
    """Clip-range search minimizing the L2 quantization error on ``w``.

    Refines min/max calibration: a 2048-bin histogram guides the search, and
    the winner is kept only if its true L2 error on ``w`` does not exceed the
    min/max error, so the result never does worse than calibrate_minmax.
    """
    w = as_matrix(w)
    lo, hi = float(w.min()), float(w.max())
    minmax = _params_from_range(lo, hi, bits)
    if hi <= lo:
        return minmax
    counts, _ = np.histogram(w, bins=HIST_BINS, range=(lo, hi))
    candidate = _search_clip_ranges(counts.astype(np.float64), lo, hi, bits)
    if quantization_l2(w, candidate) <= quantization_l2(w, minmax):
        return candidate
    return minmax


def calibrate_per_channel(w: np.ndarray, bits: int, axis: int) -> ChannelQuantParams:
    """Independent min/max calibration per row (axis=0) or column (axis=1)."""
    w = as_matrix(w)
    if axis not in (0, 1):
        raise ValueError(f"axis must be 0 or 1, got {axis}")
    n = w.shape[axis]
    channels = []
    for i in range(n):
        sl = w[i, :] if axis == 0 else w[:, i]
        channels.append(_params_from_range(float(sl.min()), float(sl.max()), bits))
    return ChannelQuantParams(axis=axis, channels=tuple(channels))


def quantize_tensor(w: np.ndarray, q) -> CompressedTensor:
    """Encode ``w`` as N-bit codes plus its quantization parameters.

    Stored code values are the clamped levels shifted into [0, 2**N - 1];
    dequantize_intn inverts exactly, so the round trip equals elementwise
    fake quantization.
    """
    w = as_matrix(w)
    if isinstance(q, QuantParams):
        codes = (quant_levels(w, q) - q.zero_point).astype(np.uint8)
    else:
        codes = np.empty(w.shape, dtype=np.uint8)
        for i, cp in enumerate(q.channels):
            sl = (i, slice(None)) if q.axis == 0 else (slice(None), i)
            codes[sl] = (quant_levels(w[sl], cp) - cp.zero_point).astype(np.uint8)
    return CompressedTensor(scheme=SCHEME_INTN, shape=w.shape, params=q, codes=codes)


def dequantize_intn(ct: CompressedTensor) -> np.ndarray:
    """Decode an intN tensor back to a float32 matrix."""
    if ct.scheme != SCHEME_INTN:
        raise ValueError("not an intN tensor")
    q = ct.params
    codes = ct.codes.astype(np.float64)
    if isinstance(q, QuantParams):
        return ((codes + q.zero_point) * q.scale).astype(np.float32)
    out = np.empty(ct.shape, dtype=np.float32)
    for i, cp in enumerate(q.channels):
        sl = (i, slice(None)) if q.axis == 0 else (slice(None), i)
        out[sl] = ((codes[sl] + cp.zero_point) * cp.scale).astype(np.float32)
    return out


class ObserverFrozenError(RuntimeError):
    """Raised when observing after freeze or freezing with no data."""


@dataclass
class ActivationObserver:
    """Running min/max plus a fixed-bin histogram over observed batches.

    Call observe() on calibration batches, then freeze() to obtain the
    QuantParams; once frozen the parameters never change and further
    observations are rejected.
    """

    bits: int = 8
    lo: float | None = None
    hi: float | None = None
    counts: np.ndarray = field(default_factory=lambda: np.zeros(HIST_BINS, dtype=np.float64))
    frozen: bool = False
    _params: QuantParams | None = None
    _n_observed: int = 0

    def observe(self, batch: np.ndarray) -> None:
        if self.frozen:
            raise ObserverFrozenError("observer is frozen; no further observations accepted")
        m = as_matrix(batch)
        blo, bhi = float(m.min()), float(m.max())
        new_lo = blo if self.lo is None else min(self.lo, blo)
        new_hi = bhi if self.hi is None else max(self.hi, bhi)
        if new_hi > new_lo:
            fresh = np.zeros(HIST_BINS, dtype=np.float64)
            if self._n_observed and self.counts.sum() > 0 and (new_lo, new_hi) != (self.lo, self.hi):
                # Range grew: rebin existing mass at old bin centers.
                old_edges = np.linspace(self.lo, self.hi, HIST_BINS + 1)
                old_centers = 0.5 * (old_edges[:-1] + old_edges[1:])
                fresh += np.histogram(old_centers, bins=HIST_BINS, range=(new_lo, new_hi), weights=self.counts)[0]
                self.counts = fresh
            elif self._n_observed and self.counts.sum() == 0 and self.lo == self.hi:
                # Previous batches were constant: all mass sat at one point.
                fresh += np.histogram([self.lo], bins=HIST_BINS, range=(new_lo, new_hi), weights=[float(self._n_observed)])[0]
                self.counts = fresh
            h, _ = np.histogram(m, bins=HIST_BINS, range=(new_lo, new_hi))
            self.counts = self.counts + h
        self.lo, self.hi = new_lo, new_hi
        self._n_observed += m.size

    def freeze(self) -> QuantParams:
        if self._n_observed == 0:
            raise ObserverFrozenError("cannot freeze an observer with no observations")
        if self._params is None:
            if self.hi <= self.lo:
                self._params = _params_from_range(self.lo, self.hi, self.bits)
            else:
                self._params = _search_clip_ranges(self.counts, self.lo, self.hi, self.bits)
            self.frozen = True
        return self._params


def observe_and_freeze(obs: ActivationObserver, batches) -> QuantParams:
    """Feed every batch to the observer and return the frozen parameters."""
    for b in batches:
        obs.observe(b)
    return obs.freeze()
