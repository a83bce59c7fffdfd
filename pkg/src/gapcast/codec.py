"""Lossless two-stream encoding of a gappy input window.

A window of length L with missing ticks is split into

* the ordered list of available points with their values, and
* the maximal runs of consecutive missing ticks as (start, width) blocks.

The two streams partition 1..L, so the original window, including exactly
which ticks were missing, can always be rebuilt. When data goes missing in
wide blocks the pair is much shorter than L, which is what lets the encoders
downstream unroll far fewer steps than the window length.

Positions are 1-based relative to the window start: a block whose first
missing tick is the 4th tick of the window has start 4. That convention is
fixed here, in ``FIRST_TICK``, and nowhere else.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .errors import CodecError, DataError

Array = np.ndarray

FIRST_TICK = 1  # windows are indexed 1..L


def _value_matrix(a, n_rows: int) -> Array:
    """Coerce per-point values to (n_rows, d); empty input means d = 1."""
    a = np.asarray(a, dtype=float)
    if a.ndim == 2:
        if a.shape[0] != n_rows:
            raise CodecError(f"expected {n_rows} value rows, got {a.shape[0]}")
        return a
    if a.size == 0:
        return a.reshape(n_rows, 1 if n_rows == 0 else -1)
    return a.reshape(n_rows, -1)


@dataclass
class Window:
    """A fixed-length slice of a series: exogenous x, endogenous y, joint mask.

    Rows of ``x`` and ``y`` at unobserved ticks are NaN. A tick is either
    fully present (all of x and y) or fully absent; partially observed rows
    are rejected.
    """

    x: Array          # (L, d_x)
    y: Array          # (L, d_y)
    observed: Array   # (L,) bool

    def __post_init__(self):
        self.x = np.atleast_2d(np.asarray(self.x, dtype=float))
        self.y = np.atleast_2d(np.asarray(self.y, dtype=float))
        if self.x.shape[0] == 1 and np.asarray(self.observed).size != 1:
            # tolerate (L,) vectors passed for single-variable windows
            self.x = self.x.T
        if self.y.shape[0] == 1 and np.asarray(self.observed).size != 1:
            self.y = self.y.T
        self.observed = np.asarray(self.observed, dtype=bool)
        L = self.observed.size
        if self.x.shape[0] != L or self.y.shape[0] != L:
            raise DataError(f"window arrays disagree on length: x {self.x.shape}, "
                            f"y {self.y.shape}, mask {L}")
        if L < 1:
            raise DataError("window length must be >= 1")
        for name, a in (("x", self.x), ("y", self.y)):
            row_finite = np.isfinite(a).all(axis=1)
            row_nan = np.isnan(a).all(axis=1)
            if np.any(row_finite != self.observed) or np.any(row_nan == self.observed):
                raise DataError(f"window '{name}' values disagree with the mask: "
                                "ticks must be fully present or fully absent")

    @property
    def length(self) -> int:
        return self.observed.size


def windows_equal(a: Window, b: Window) -> bool:
    """True when both windows have the same mask and the same observed values."""
    if a.length != b.length or not np.array_equal(a.observed, b.observed):
        return False
    obs = a.observed
    return (np.array_equal(a.x[obs], b.x[obs])
            and np.array_equal(a.y[obs], b.y[obs]))


@dataclass
class EncodedWindow:
    """The two streams: available points in order, missing blocks as (start, width)."""

    positions: Array   # (n_avail,) int, 1-based, strictly increasing
    x: Array           # (n_avail, d_x) values at the available ticks
    y: Array           # (n_avail, d_y)
    blocks: Array      # (n_blocks, 2) int rows of (start, width)
    length: int

    def __post_init__(self):
        self.positions = np.asarray(self.positions, dtype=np.int64).reshape(-1)
        self.blocks = np.asarray(self.blocks, dtype=np.int64).reshape(-1, 2)
        self.x = _value_matrix(self.x, self.positions.size)
        self.y = _value_matrix(self.y, self.positions.size)

    @property
    def n_available(self) -> int:
        return self.positions.size

    @property
    def n_blocks(self) -> int:
        return self.blocks.shape[0]


def validate_encoded(e: EncodedWindow) -> None:
    """Raise :class:`CodecError` unless ``e`` satisfies every invariant."""
    L = e.length
    if L < 1:
        raise CodecError("encoded length must be >= 1")
    pos = e.positions
    if pos.size and (pos[0] < FIRST_TICK or pos[-1] > L or np.any(np.diff(pos) <= 0)):
        raise CodecError("available positions must be strictly increasing within 1..L")
    covered = np.zeros(L, dtype=bool)
    covered[pos - FIRST_TICK] = True
    prev_end = None
    for start, width in e.blocks:
        if width < 1 or start < FIRST_TICK or start + width - 1 > L:
            raise CodecError(f"block ({start},{width}) falls outside 1..{L}")
        if prev_end is not None and start <= prev_end + 1:
            raise CodecError(f"block ({start},{width}) overlaps or abuts the previous block")
        sl = slice(start - FIRST_TICK, start - FIRST_TICK + width)
        if covered[sl].any():
            raise CodecError(f"block ({start},{width}) collides with an available point")
        covered[sl] = True
        prev_end = start + width - 1
    if not covered.all():
        raise CodecError("available points and blocks do not partition the window")
    if not np.all(np.isfinite(e.x)) or not np.all(np.isfinite(e.y)):
        raise CodecError("available values must be finite")


def encode_window(w: Window) -> EncodedWindow:
    """Split a window into its available-point and missing-block streams."""
    obs = w.observed
    positions = np.flatnonzero(obs) + FIRST_TICK
    # maximal runs of missing ticks via run-length encoding on the mask
    padded = np.concatenate([[False], ~obs, [False]])
    edges = np.flatnonzero(padded[1:] != padded[:-1])
    starts = edges[0::2]
    widths = edges[1::2] - starts
    blocks = np.stack([starts + FIRST_TICK, widths], axis=1) if starts.size else \
        np.empty((0, 2), dtype=np.int64)
    enc = EncodedWindow(positions, w.x[obs], w.y[obs], blocks, w.length)
    validate_encoded(enc)
    return enc


def decode_window(e: EncodedWindow) -> Window:
    """Exact inverse of :func:`encode_window`."""
    validate_encoded(e)
    d_x = e.x.shape[1]
    d_y = e.y.shape[1]
    x = np.full((e.length, d_x), np.nan)
    y = np.full((e.length, d_y), np.nan)
    observed = np.zeros(e.length, dtype=bool)
    idx = e.positions - FIRST_TICK
    x[idx] = e.x
    y[idx] = e.y
    observed[idx] = True
    return Window(x, y, observed)


class CompressionStats(NamedTuple):
    enc1_steps: int
    enc2_steps: int
    ratio: float


def compression_stats(e: EncodedWindow) -> CompressionStats:
    """How many steps each encoder unrolls, and their total relative to L."""
    enc1 = e.n_available
    enc2 = e.n_blocks
    return CompressionStats(enc1, enc2, (enc1 + enc2) / e.length)
