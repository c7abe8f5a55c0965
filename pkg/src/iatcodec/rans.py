"""Range asymmetric numeral system coder over quantized Gaussian tables.

Classic single-state byte-renormalizing rANS: the encoder folds symbols
into an integer state in reverse order, the decoder unfolds them forward.
Frequencies live on a fixed 2^precision grid, every in-support symbol
keeps a count of at least one, and values outside the table's support are
coded through a reserved escape slot followed by a raw signed 16-bit
value, so coding is total over int16 latents. Sigma values are snapped to
a small logarithmic grid before table construction so encoder and decoder
always derive identical tables from identical Gaussian parameters.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .entropy import SIGMA_MIN, gaussian_bin_probability, round_half_away

PRECISION_DEFAULT = 16
_RANS_L = 1 << 24  # lower bound of the normalized state interval; state < 2^32
_STATE_BYTES = 4

SIGMA_LEVELS = 64
SIGMA_MAX = 256.0
_SIGMA_GRID = np.exp(np.linspace(np.log(SIGMA_MIN), np.log(SIGMA_MAX), SIGMA_LEVELS))
_LOG_STEP = (np.log(SIGMA_MAX) - np.log(SIGMA_MIN)) / (SIGMA_LEVELS - 1)

RAW_BITS = 16
_RAW_MIN = -(1 << (RAW_BITS - 1))
_RAW_MAX = (1 << (RAW_BITS - 1)) - 1


class CoderError(ValueError):
    """Raised for malformed streams or invalid coder configuration."""


def bin_sigma(sigma) -> np.ndarray:
    """Snap sigma values to the nearest grid level (in log space)."""
    s = np.clip(np.asarray(sigma, dtype=np.float64), SIGMA_MIN, SIGMA_MAX)
    idx = np.clip(np.round(np.log(s / SIGMA_MIN) / _LOG_STEP).astype(np.int64), 0, SIGMA_LEVELS - 1)
    return _SIGMA_GRID[idx]


@dataclass
class CdfTable:
    """Cumulative frequency table over integer support plus an escape slot.

    `cum` has one entry per symbol boundary: cum[0] = 0, cum[-1] = 2^p,
    strictly increasing; the escape slot is the last symbol.
    """

    precision: int
    k_min: int
    k_max: int
    cum: np.ndarray

    @property
    def n_symbols(self) -> int:  # escape included
        return self.k_max - self.k_min + 2

    def slot(self, value: int) -> int:
        """Symbol index for an integer value; the escape index if outside."""
        if self.k_min <= value <= self.k_max:
            return value - self.k_min
        return self.k_max - self.k_min + 1

    def start_freq(self, index: int) -> tuple[int, int]:
        return int(self.cum[index]), int(self.cum[index + 1] - self.cum[index])

    def bits(self, value: int) -> float:
        """Ideal code length for a value under this table (escape adds the
        raw payload bits)."""
        start, freq = self.start_freq(self.slot(value))
        base = self.precision - np.log2(freq)
        if self.slot(value) == self.k_max - self.k_min + 1:
            base += RAW_BITS
        return float(base)


def _fix_counts(counts: np.ndarray, total: int) -> np.ndarray:
    """Adjust integer counts (each >= 1) to sum exactly to `total`."""
    diff = total - int(counts.sum())
    if diff > 0:
        counts[int(np.argmax(counts))] += diff
        return counts
    while diff < 0:
        i = int(np.argmax(counts))
        take = min(counts[i] - 1, -diff)
        if take == 0:
            raise CoderError("cannot renormalize counts: support too large for precision")
        counts[i] -= take
        diff += take
    return counts


def build_cdf(mean: float, sigma: float, precision: int = PRECISION_DEFAULT) -> CdfTable:
    """Quantize Gaussian unit-bin masses to a 2^precision frequency table.

    Support is centered on round(mean) and covers mean +- 8 sigma; every
    symbol (and the escape slot) keeps a count of at least 1.
    """
    if not 8 <= precision <= 24:
        raise CoderError(f"precision {precision} outside [8, 24]")
    if sigma < SIGMA_MIN - 1e-12:
        raise CoderError(f"sigma {sigma} below floor {SIGMA_MIN}")
    center = int(round_half_away(mean))
    radius = max(1, int(np.ceil(8.0 * sigma + 0.5)))
    ks = np.arange(center - radius, center + radius + 1)
    probs = gaussian_bin_probability(ks.astype(np.float64), float(mean), float(sigma))
    total = 1 << precision
    counts = np.maximum(1, round_half_away(probs * total)).astype(np.int64)
    counts = np.append(counts, 1)  # escape slot
    counts = _fix_counts(counts, total)
    cum = np.zeros(counts.size + 1, dtype=np.int64)
    np.cumsum(counts, out=cum[1:])
    return CdfTable(precision, int(ks[0]), int(ks[-1]), cum)


def build_cdf_tables(means: np.ndarray, sigmas: np.ndarray,
                     precision: int = PRECISION_DEFAULT) -> list[CdfTable]:
    """Vectorized build_cdf over flat arrays of per-element parameters.

    Elements are grouped by support radius (sigma is expected pre-binned,
    so only a handful of radii occur) and each group's bin probabilities
    are evaluated in one shot.
    """
    means = np.asarray(means, dtype=np.float64).reshape(-1)
    sigmas = np.asarray(sigmas, dtype=np.float64).reshape(-1)
    if means.shape != sigmas.shape:
        raise CoderError("means and sigmas differ in length")
    if not 8 <= precision <= 24:
        raise CoderError(f"precision {precision} outside [8, 24]")
    if sigmas.size == 0:
        return []
    if sigmas.min() < SIGMA_MIN - 1e-12:
        raise CoderError("sigma below floor")
    centers = round_half_away(means).astype(np.int64)
    radii = np.maximum(1, np.ceil(8.0 * sigmas + 0.5).astype(np.int64))
    total = 1 << precision
    tables: list[CdfTable | None] = [None] * means.size
    for r in np.unique(radii):
        idx = np.flatnonzero(radii == r)
        offsets = np.arange(-r, r + 1)
        ks = centers[idx, None] + offsets[None, :]
        probs = gaussian_bin_probability(ks.astype(np.float64), means[idx, None], sigmas[idx, None])
        counts = np.maximum(1, round_half_away(probs * total)).astype(np.int64)
        for row, i in enumerate(idx):
            c = np.append(counts[row], 1)  # escape slot
            c = _fix_counts(c, total)
            cum = np.zeros(c.size + 1, dtype=np.int64)
            np.cumsum(c, out=cum[1:])
            tables[i] = CdfTable(precision, int(centers[i] - r), int(centers[i] + r), cum)
    return tables


def _raw_table(precision: int) -> CdfTable:
    # uniform over 256 byte values, used for escape payloads
    step = (1 << precision) >> 8
    cum = np.arange(257, dtype=np.int64) * step
    return CdfTable(precision, 0, 254, cum)  # 256 slots: bytes 0..254 plus "escape"=255


def _symbol_ops(symbols, tables) -> list[tuple[int, int, int]]:
    """Flatten symbols into (start, freq, precision) coding operations."""
    ops = []
    for value, table in zip(symbols, tables):
        idx = table.slot(value)
        start, freq = table.start_freq(idx)
        ops.append((start, freq, table.precision))
        if idx == table.k_max - table.k_min + 1:  # escape: raw int16 payload
            if not _RAW_MIN <= value <= _RAW_MAX:
                raise CoderError(f"symbol {value} outside raw escape range")
            raw = _raw_table(table.precision)
            u = value - _RAW_MIN
            for byte in (u & 0xFF, (u >> 8) & 0xFF):
                ops.append((int(raw.cum[byte]), int(raw.cum[byte + 1] - raw.cum[byte]), table.precision))
    return ops


def rans_encode(symbols, tables) -> bytes:
    """Encode integer symbols with per-symbol tables; exact inverse of
    rans_decode."""
    symbols = list(symbols)
    tables = list(tables)
    if len(symbols) != len(tables):
        raise CoderError(f"{len(symbols)} symbols but {len(tables)} tables")
    ops = _symbol_ops(symbols, tables)
    state = _RANS_L
    out = bytearray()
    for start, freq, precision in reversed(ops):
        limit = ((_RANS_L >> precision) << 8) * freq
        while state >= limit:
            out.append(state & 0xFF)
            state >>= 8
        state = ((state // freq) << precision) + (state % freq) + start
    head = state.to_bytes(_STATE_BYTES, "big")
    return head + bytes(reversed(out))


def rans_decode(data: bytes, tables, n: int | None = None) -> list[int]:
    """Decode `n` symbols (default: one per table) from a rans_encode stream."""
    tables = list(tables)
    if n is None:
        n = len(tables)
    if n != len(tables):
        raise CoderError(f"asked for {n} symbols but got {len(tables)} tables")
    if len(data) < _STATE_BYTES:
        raise CoderError("truncated stream: missing state header")
    state = int.from_bytes(data[:_STATE_BYTES], "big")
    pos = _STATE_BYTES
    values = []

    def pop(table: CdfTable) -> int:
        nonlocal state, pos
        mask = (1 << table.precision) - 1
        cf = state & mask
        idx = int(np.searchsorted(table.cum, cf, side="right")) - 1
        start, freq = table.start_freq(idx)
        state = freq * (state >> table.precision) + cf - start
        while state < _RANS_L:
            if pos >= len(data):
                raise CoderError("truncated stream: ran out of renormalization bytes")
            state = (state << 8) | data[pos]
            pos += 1
        return idx

    for table in tables:
        idx = pop(table)
        if idx == table.k_max - table.k_min + 1:  # escape
            raw = _raw_table(table.precision)
            lo = pop(raw)
            hi = pop(raw)
            values.append((hi << 8 | lo) + _RAW_MIN)
        else:
            values.append(table.k_min + idx)
    if state != _RANS_L:
        raise CoderError("corrupt stream: final state mismatch")
    if pos != len(data):
        raise CoderError("corrupt stream: trailing bytes after final symbol")
    return values


def stream_shannon_bits(symbols, tables) -> float:
    """Ideal total code length of the symbols under the quantized tables."""
    return float(sum(t.bits(v) for v, t in zip(symbols, tables)))
