"""Data plumbing: CSV ingestion, synthetic block masking, windowing into
forecast examples, per-series scaling, and the bundled synthetic dataset.

The CSV layout is one row per (series, tick) with empty cells marking missing
values. A tick is jointly missing or jointly present across all value columns;
rows that violate that are rejected. Ticks absent from the file inside a
series' tick range count as missing.
"""

from __future__ import annotations

import csv
import warnings
import zlib
from dataclasses import dataclass, field

import numpy as np

from .codec import EncodedWindow, Window, encode_window
from .errors import DataError
from .numerics import Array


@dataclass
class CsvSchema:
    """Column names: a series id, an integer tick, targets, exogenous drivers."""

    series_col: str = "series_id"
    tick_col: str = "tick"
    y_cols: tuple = ("y",)
    x_cols: tuple = ("x",)

    @property
    def value_cols(self) -> tuple:
        return tuple(self.y_cols) + tuple(self.x_cols)


@dataclass
class SeriesRecord:
    """One series on integer ticks with a joint observation mask."""

    series_id: str
    y: Array          # (N, d_y), NaN rows at missing ticks
    x: Array          # (N, d_x)
    observed: Array   # (N,) bool
    first_tick: int = 1

    def __post_init__(self):
        self.y = np.asarray(self.y, dtype=float).reshape(len(self.observed), -1)
        self.x = np.asarray(self.x, dtype=float).reshape(len(self.observed), -1)
        self.observed = np.asarray(self.observed, dtype=bool)

    @property
    def length(self) -> int:
        return self.observed.size

    def slice(self, start: int, stop: int) -> "SeriesRecord":
        return SeriesRecord(self.series_id, self.y[start:stop], self.x[start:stop],
                            self.observed[start:stop], self.first_tick + start)

    def window(self, start: int, length: int) -> Window:
        if start < 0 or start + length > self.length:
            raise DataError(f"window [{start}, {start + length}) outside series "
                            f"'{self.series_id}' of length {self.length}")
        return Window(self.x[start:start + length],
                      self.y[start:start + length],
                      self.observed[start:start + length])


def _parse_tick(raw: str, where: str) -> int:
    try:
        return int(raw)
    except (TypeError, ValueError):
        raise DataError(f"non-integer tick {raw!r} at {where}") from None


def _parse_cell(raw, where: str) -> float:
    if raw is None or raw == "":
        return np.nan
    try:
        return float(raw)
    except ValueError:
        raise DataError(f"non-numeric value {raw!r} at {where}") from None


def load_csv(path, schema: CsvSchema | None = None) -> list[SeriesRecord]:
    """Read per-series records, sorted by tick, with joint missingness enforced."""
    schema = schema or CsvSchema()
    rows: dict[str, dict[int, tuple]] = {}
    order: list[str] = []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None:
            warnings.warn(f"{path}: empty file, no series loaded")
            return []
        missing_cols = [c for c in (schema.series_col, schema.tick_col) + schema.value_cols
                        if c not in reader.fieldnames]
        if missing_cols:
            raise DataError(f"{path}: missing columns {missing_cols}")
        for lineno, row in enumerate(reader, start=2):
            sid = row[schema.series_col]
            where = f"{path}:{lineno}"
            tick = _parse_tick(row[schema.tick_col], where)
            values = tuple(_parse_cell(row[c], where) for c in schema.value_cols)
            present = [not np.isnan(v) for v in values]
            if any(present) and not all(present):
                raise DataError(f"partially missing tick at {where}: a tick must be "
                                "fully present or fully absent across value columns")
            if sid not in rows:
                rows[sid] = {}
                order.append(sid)
            if tick in rows[sid]:
                raise DataError(f"duplicate (series, tick) = ({sid!r}, {tick}) at {where}")
            rows[sid][tick] = values
    if not rows:
        warnings.warn(f"{path}: no data rows, no series loaded")
        return []

    d_y, d_x = len(schema.y_cols), len(schema.x_cols)
    records = []
    for sid in order:
        ticks = sorted(rows[sid])
        first, last = ticks[0], ticks[-1]
        n = last - first + 1
        y = np.full((n, d_y), np.nan)
        x = np.full((n, d_x), np.nan)
        observed = np.zeros(n, dtype=bool)
        for tick, values in rows[sid].items():
            i = tick - first
            if not np.isnan(values[0]):
                y[i] = values[:d_y]
                x[i] = values[d_y:]
                observed[i] = True
        records.append(SeriesRecord(sid, y, x, observed, first_tick=first))
    return records


def write_csv(records: list[SeriesRecord], path, schema: CsvSchema | None = None) -> None:
    """Write records back out; missing ticks become rows with empty value cells."""
    schema = schema or CsvSchema()
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow([schema.series_col, schema.tick_col, *schema.value_cols])
        for rec in records:
            for i in range(rec.length):
                tick = rec.first_tick + i
                if rec.observed[i]:
                    cells = [repr(float(v)) for v in np.concatenate([rec.y[i], rec.x[i]])]
                else:
                    cells = [""] * (rec.y.shape[1] + rec.x.shape[1])
                writer.writerow([rec.series_id, tick, *cells])


# ---------------------------------------------------------------------------
# Synthetic block masking
# ---------------------------------------------------------------------------

@dataclass
class MaskingConfig:
    """Left-to-right coin-toss masking that removes data in whole blocks.

    At each unmasked tick a coin with the current heads probability ``q``
    comes up heads with probability q; on heads a block width is drawn
    uniformly from ``widths``, that many ticks are masked, the scan jumps past
    them, and q becomes 1/width. This retains, in expectation, one block of
    data per block removed, so about half the ticks end up missing.
    """

    q0: float = 0.05
    widths: tuple = (6, 7, 8, 9, 10)
    seed: int = 0

    def __post_init__(self):
        if not (0.0 <= self.q0 <= 1.0):
            raise DataError("q0 must lie in [0, 1]")
        if not self.widths or any(w < 1 for w in self.widths):
            raise DataError("mask widths must all be >= 1")
        self.widths = tuple(int(w) for w in self.widths)


def _series_rng(seed: int, series_id: str) -> np.random.Generator:
    # stable per-series stream: master seed + crc of the id
    return np.random.default_rng(np.random.SeedSequence((seed, zlib.crc32(series_id.encode()))))


def synthetic_mask(record: SeriesRecord, cfg: MaskingConfig) -> SeriesRecord:
    """Return a copy of ``record`` with block-masked ticks removed."""
    if not record.observed.all():
        raise DataError(f"series '{record.series_id}' already has missing ticks; "
                        "synthetic masking expects fully observed input")
    rng = _series_rng(cfg.seed, record.series_id)
    n = record.length
    masked = np.zeros(n, dtype=bool)
    q = cfg.q0
    t = 0
    while t < n:
        if q > 0.0 and rng.random() < q:
            width = cfg.widths[rng.integers(len(cfg.widths))]
            masked[t:t + width] = True
            q = 1.0 / width
            # the tick right after a block is always retained, so blocks never
            # merge and the expected retained run length is exactly the width
            t += width + 1
        else:
            t += 1
    y = record.y.copy()
    x = record.x.copy()
    y[masked] = np.nan
    x[masked] = np.nan
    return SeriesRecord(record.series_id, y, x, ~masked, record.first_tick)


def mask_stats(masked: SeriesRecord) -> dict:
    """Missing fraction and a histogram of missing-run widths."""
    miss = ~masked.observed
    padded = np.concatenate([[False], miss, [False]])
    edges = np.flatnonzero(padded[1:] != padded[:-1])
    widths = (edges[1::2] - edges[0::2]).tolist()
    hist: dict[int, int] = {}
    for w in widths:
        hist[w] = hist.get(w, 0) + 1
    return {
        "length": int(masked.length),
        "missing_fraction": float(miss.mean()),
        "n_blocks": len(widths),
        "width_histogram": {str(k): hist[k] for k in sorted(hist)},
    }


# ---------------------------------------------------------------------------
# Difficulty ranking
# ---------------------------------------------------------------------------

def total_variation(values, observed=None) -> float:
    """Sum of absolute differences between consecutive observed values.

    Gaps are skipped: the difference is taken between each observed value and
    the next observed one. Fewer than two observed points gives 0.
    """
    v = np.asarray(values, dtype=float).reshape(-1)
    if observed is None:
        obs = np.isfinite(v)
    else:
        obs = np.asarray(observed, dtype=bool)
    pts = v[obs]
    if pts.size < 2:
        warnings.warn("total_variation: fewer than 2 observed points, returning 0")
        return 0.0
    return float(np.abs(np.diff(pts)).sum())


def select_top_variation(records: list[SeriesRecord], fraction: float,
                         column: int = 0) -> list[SeriesRecord]:
    """Keep the top ``fraction`` of series ranked by target total variation."""
    if not (0.0 < fraction <= 1.0):
        raise DataError("fraction must lie in (0, 1]")
    ranked = sorted(records,
                    key=lambda r: total_variation(r.y[:, column], r.observed),
                    reverse=True)
    keep = max(1, int(round(fraction * len(ranked))))
    return ranked[:keep]


# ---------------------------------------------------------------------------
# Windowing into forecast examples
# ---------------------------------------------------------------------------

@dataclass
class ForecastExample:
    """One encoded input window plus the horizon the model must fill in."""

    series_id: str
    input_start: int          # 0-based offset of the input window in the series
    encoded_input: EncodedWindow
    future_x: Array           # (K, d_x), NaN at missing ticks
    future_mask: Array        # (K,) 1.0 observed / 0.0 missing
    targets: Array            # (K, d_y), NaN at missing ticks
    target_mask: Array        # (K,)
    horizon: int


def make_examples(record: SeriesRecord, in_len: int, out_len: int,
                  stride: int = 1) -> tuple[list[ForecastExample], int]:
    """Slide an (input, output) window pair along the series.

    Input windows with zero available points cannot be encoded usefully and
    are dropped; the second return value counts them.
    """
    if in_len < 1 or out_len < 1 or stride < 1:
        raise DataError("in_len, out_len and stride must be >= 1")
    if in_len + out_len > record.length:
        raise DataError(f"series '{record.series_id}' is shorter than one window: "
                        f"{record.length} < {in_len} + {out_len}")
    examples: list[ForecastExample] = []
    dropped = 0
    for start in range(0, record.length - in_len - out_len + 1, stride):
        w = record.window(start, in_len)
        if not w.observed.any():
            dropped += 1
            continue
        out_lo = start + in_len
        out_hi = out_lo + out_len
        mask = record.observed[out_lo:out_hi].astype(float)
        examples.append(ForecastExample(
            series_id=record.series_id,
            input_start=start,
            encoded_input=encode_window(w),
            future_x=record.x[out_lo:out_hi].copy(),
            future_mask=mask,
            targets=record.y[out_lo:out_hi].copy(),
            target_mask=mask.copy(),
            horizon=out_len,
        ))
    return examples, dropped


# ---------------------------------------------------------------------------
# Per-series scaling for a shared background model
# ---------------------------------------------------------------------------

@dataclass
class ScalingProfile:
    """Per-series positive scale vectors for targets and exogenous inputs."""

    scale_y: dict[str, Array] = field(default_factory=dict)
    scale_x: dict[str, Array] = field(default_factory=dict)

    def series_ids(self) -> list[str]:
        return list(self.scale_y)


def _mean_abs_scale(values: Array, observed: Array) -> Array:
    obs = values[observed]
    scale = np.abs(obs).mean(axis=0)
    return np.where(scale > 0, scale, 1.0)


def fit_scaling(train_records: list[SeriesRecord]) -> ScalingProfile:
    """Mean absolute observed value per series and variable; 1.0 if that is 0.

    Fit this on training slices only, then scale whole series with it.
    """
    profile = ScalingProfile()
    for rec in train_records:
        if not rec.observed.any():
            raise DataError(f"series '{rec.series_id}' has no observed training values "
                            "to fit a scale from")
        profile.scale_y[rec.series_id] = _mean_abs_scale(rec.y, rec.observed)
        profile.scale_x[rec.series_id] = _mean_abs_scale(rec.x, rec.observed)
    return profile


def apply_scaling(record: SeriesRecord, profile: ScalingProfile) -> SeriesRecord:
    if record.series_id not in profile.scale_y:
        raise DataError(f"series '{record.series_id}' absent from the scaling profile")
    return SeriesRecord(record.series_id,
                        record.y / profile.scale_y[record.series_id],
                        record.x / profile.scale_x[record.series_id],
                        record.observed, record.first_tick)


def invert_scaling(values: Array, series_id: str, profile: ScalingProfile,
                   kind: str = "y") -> Array:
    scales = profile.scale_y if kind == "y" else profile.scale_x
    if series_id not in scales:
        raise DataError(f"series '{series_id}' absent from the scaling profile")
    return np.asarray(values, dtype=float) * scales[series_id]


def save_scaling(profile: ScalingProfile, path) -> None:
    with open(path, "w") as fh:
        for sid in profile.series_ids():
            ys = ",".join(repr(float(v)) for v in profile.scale_y[sid])
            xs = ",".join(repr(float(v)) for v in profile.scale_x[sid])
            fh.write(f"{sid}\ty={ys}\tx={xs}\n")


def load_scaling(path) -> ScalingProfile:
    profile = ScalingProfile()
    with open(path) as fh:
        for line in fh:
            line = line.rstrip("\n")
            if not line:
                continue
            sid, ypart, xpart = line.split("\t")
            profile.scale_y[sid] = np.array([float(v) for v in ypart[2:].split(",")])
            profile.scale_x[sid] = np.array([float(v) for v in xpart[2:].split(",")])
    return profile


# ---------------------------------------------------------------------------
# Bundled synthetic dataset
# ---------------------------------------------------------------------------

def make_synthetic_dataset(n_series: int = 4, length: int = 600,
                           seed: int = 7) -> list[SeriesRecord]:
    """Seasonal demand driven by a promotional price, plus noise.

    Each series mixes a sinusoidal seasonal component with an exogenous price
    that occasionally dips (promotions lift the target), so a forecaster only
    does well if it tracks both the phase of the season and the future price
    path. Fully observed; pair with :func:`synthetic_mask` for gap studies.
    """
    root = np.random.default_rng(np.random.SeedSequence((seed, 0xda7a)))
    records = []
    for i in range(n_series):
        rng = np.random.default_rng(root.integers(2 ** 63))
        period = float(rng.choice([12, 14, 16, 20]))
        amp = rng.uniform(2.0, 4.0)
        level = rng.uniform(12.0, 20.0)
        phase = rng.uniform(0, 2 * np.pi)
        beta = rng.uniform(1.5, 3.0)  # sales lift per unit of price discount
        base_price = rng.uniform(8.0, 12.0)

        t = np.arange(length)
        price = np.full(length, base_price)
        pos = 0
        while pos < length:
            if rng.random() < 0.06:
                promo_len = int(rng.integers(3, 8))
                price[pos:pos + promo_len] = base_price * (1.0 - rng.uniform(0.1, 0.3))
                pos += promo_len
            else:
                pos += 1
        season = amp * np.sin(2 * np.pi * t / period + phase)
        y = level + season + beta * (base_price - price) + rng.normal(0, 0.3, length)
        records.append(SeriesRecord(f"S{i + 1}", y[:, None], price[:, None],
                                    np.ones(length, dtype=bool)))
    return records
