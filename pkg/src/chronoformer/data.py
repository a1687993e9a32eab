"""Series generation, ingestion, windowing, embedding, normalisation, baselines and metrics."""

from __future__ import annotations

import io
import math
from dataclasses import dataclass, replace

import numpy as np

from .blocks import Batch
from .errors import ConfigError, DataError, DimensionError, ParseError

SYNTHETIC_KINDS = ("sine", "trend_seasonal")
BASELINES = ("persistence", "seasonal")
DEFAULT_SPLIT = (0.7, 0.15, 0.15)


@dataclass(frozen=True)
class TimeSeries:
    """``values`` is ``n x v``; ``timestamps`` are strictly increasing integers."""

    timestamps: np.ndarray
    values: np.ndarray
    period: int | None = None

    def __post_init__(self):
        ts = np.asarray(self.timestamps)
        if ts.ndim != 1:
            raise DataError(f"timestamps must be 1-D, got shape {ts.shape}")
        if not np.issubdtype(ts.dtype, np.integer) and not np.all(ts == np.round(ts)):
            raise DataError("timestamps must be integers")
        ts = ts.astype(np.int64)
        values = np.asarray(self.values, dtype=np.float64)
        if values.ndim == 1:
            values = values[:, None]
        if values.ndim != 2 or values.shape[0] != ts.size:
            raise DataError(f"{ts.size} timestamps but values of shape {values.shape}")
        if ts.size > 1:
            bad = np.flatnonzero(np.diff(ts) <= 0)
            if bad.size:
                i = int(bad[0]) + 1
                raise DataError(f"timestamps must increase: row {i} has {ts[i]} after {ts[i - 1]}")
        if np.isnan(values).any():
            raise DataError("values contain NaN")
        if self.period is not None and self.period < 1:
            raise DataError(f"sampling period must be positive, got {self.period}")
        object.__setattr__(self, "timestamps", ts)
        object.__setattr__(self, "values", values)

    def __len__(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]

    def slice(self, start: int, stop: int) -> TimeSeries:
        return TimeSeries(self.timestamps[start:stop], self.values[start:stop], self.period)


def gen_synthetic(
    kind: str = "sine",
    n: int = 4096,
    period: float = 64,
    sigma: float = 0.1,
    seed: int = 0,
    slope: float = 0.0,
    step_seconds: int = 300,
) -> TimeSeries:
    """``sin(2 pi t / P)`` plus Gaussian noise; ``trend_seasonal`` adds ``slope * t``.

    Timestamps start at 0 and advance ``step_seconds`` per sample.
    """
    if kind not in SYNTHETIC_KINDS:
        raise ConfigError(f"unknown series kind {kind!r}; expected one of {SYNTHETIC_KINDS}")
    if n < 1:
        raise ConfigError(f"series length must be >= 1, got {n}")
    if period < 2:
        raise ConfigError(f"period must be >= 2, got {period}")
    if sigma < 0:
        raise ConfigError(f"noise level must be >= 0, got {sigma}")
    t = np.arange(n)
    x = np.sin(2 * np.pi * t / period)
    if kind == "trend_seasonal":
        x = x + slope * t
    if sigma > 0:
        x = x + np.random.default_rng(seed).normal(0.0, sigma, size=n)
    return TimeSeries(t * step_seconds, x, step_seconds)


def add_differences(ts: TimeSeries, orders=(1, 2)) -> TimeSeries:
    """Append first/second differences of every variable as extra columns.

    The first ``max(orders)`` rows are dropped, since their differences
    are undefined.
    """
    if not orders:
        return ts
    top = max(orders)
    if top < 1 or min(orders) < 1:
        raise ConfigError(f"difference orders must be >= 1, got {orders}")
    if len(ts) <= top:
        raise DataError(f"series of length {len(ts)} too short for order-{top} differences")
    cols = [ts.values[top:]]
    for k in orders:
        cols.append(np.diff(ts.values, n=k, axis=0)[top - k :])
    return TimeSeries(ts.timestamps[top:], np.concatenate(cols, axis=1), ts.period)


def time_delay_embed(ts: TimeSeries, d: int, tau: int = 1) -> TimeSeries:
    """Replace each row by its ``d`` lagged copies spaced ``tau`` apart.

    Columns are lag-major: lag 0 of every variable, then lag ``tau`` and so
    on, so the first ``v`` columns are the raw current values.  Rows without
    a full history are dropped.
    """
    if d < 1 or tau < 1:
        raise ConfigError(f"delay embedding needs d >= 1 and tau >= 1, got d={d}, tau={tau}")
    span = (d - 1) * tau
    n = len(ts)
    if span >= n:
        raise DataError(f"series of length {n} too short for delay embedding with d={d}, tau={tau}")
    lags = [ts.values[span - j * tau : n - j * tau] for j in range(d)]
    return TimeSeries(ts.timestamps[span:], np.concatenate(lags, axis=1), ts.period)


def split_chronological(ts: TimeSeries, fractions=DEFAULT_SPLIT) -> tuple[TimeSeries, ...]:
    """Consecutive train/validation/test pieces; no shuffling across time."""
    fractions = tuple(float(f) for f in fractions)
    if any(f < 0 for f in fractions) or not math.isclose(sum(fractions), 1.0, abs_tol=1e-9):
        raise ConfigError(f"split fractions must be non-negative and sum to 1, got {fractions}")
    n = len(ts)
    bounds = np.round(np.cumsum((0.0,) + fractions) * n).astype(int)
    bounds[-1] = n
    return tuple(ts.slice(a, b) for a, b in zip(bounds[:-1], bounds[1:]))


@dataclass(frozen=True)
class Normalizer:
    mean: np.ndarray
    std: np.ndarray

    @classmethod
    def fit(cls, values) -> Normalizer:
        values = np.asarray(values, dtype=np.float64)
        values = values.reshape(-1, values.shape[-1])
        if values.shape[0] == 0:
            raise DataError("cannot compute normalisation statistics from zero rows")
        mean = values.mean(axis=0)
        std = values.std(axis=0)
        zero = np.flatnonzero(~(std > 0))
        if zero.size:
            raise DataError(f"variable v{zero[0] + 1} has zero spread in the training split")
        return cls(mean, std)

    def normalize(self, x, columns=None) -> np.ndarray:
        mean, std = self._select(columns)
        return (np.asarray(x, dtype=np.float64) - mean) / std

    def denormalize(self, x, columns=None) -> np.ndarray:
        mean, std = self._select(columns)
        return np.asarray(x, dtype=np.float64) * std + mean

    def _select(self, columns):
        if columns is None:
            return self.mean, self.std
        return self.mean[columns], self.std[columns]


@dataclass
class WindowedDataset:
    """Stacked ``(input, target)`` windows with their positions and times."""

    inputs: np.ndarray
    targets: np.ndarray
    input_index: np.ndarray
    input_times: np.ndarray
    target_times: np.ndarray
    M: int
    H: int
    stats: Normalizer | None = None

    def __len__(self) -> int:
        return self.inputs.shape[0]

    def batch(self, indices) -> Batch:
        idx = np.asarray(indices, dtype=np.intp)
        return Batch(
            self.inputs[idx],
            self.targets[idx],
            input_index=self.input_index[idx],
            input_times=self.input_times[idx],
        )


SEGMENTS = {"none": (), "daily": ("daily",), "weekly": ("weekly",), "daily_weekly": ("weekly", "daily")}


def segment_lags(period: int | None, segments) -> tuple[int, ...]:
    """Row offsets of the same-time-yesterday / last-week windows, oldest first."""
    names = SEGMENTS[segments] if isinstance(segments, str) else tuple(segments)
    if not names:
        return ()
    unknown = set(names) - {"daily", "weekly"}
    if unknown:
        raise ConfigError(f"unknown segment {sorted(unknown)[0]!r}; expected daily or weekly")
    if period is None or period <= 0 or 86_400 % period:
        raise DataError(f"segments need a sampling interval that divides one day, got {period}")
    day = 86_400 // period
    return tuple(sorted({"daily": day, "weekly": 7 * day}[n] for n in names)[::-1])


def window_rows(starts, M: int, lags=()) -> np.ndarray:
    """Input row indices per window: each lagged copy of the recent window, then the recent window."""
    starts = np.asarray(starts)[:, None]
    return np.concatenate([starts - lag + np.arange(M) for lag in (*lags, 0)], axis=1)


def make_windows(
    ts: TimeSeries,
    M: int,
    H: int,
    stride: int = 1,
    target_width: int | None = None,
    first_index: int = 0,
    lags=(),
    start: int = 0,
) -> WindowedDataset:
    """Windows at offsets ``start, start + stride, ...``: ``M`` inputs then ``H`` targets.

    Targets carry the first ``target_width`` columns (all by default).
    ``first_index`` is the absolute position of row 0 in the parent series.
    With ``lags``, each input also holds the ``M`` rows that many steps
    earlier (oldest first), so inputs are ``M * (1 + len(lags))`` long; windows
    whose lagged rows would fall before row 0 are skipped.
    """
    if M < 1 or H < 1 or stride < 1:
        raise ConfigError(f"need M, H, stride >= 1, got M={M}, H={H}, stride={stride}")
    n = len(ts)
    if start + M + H > n:
        raise DataError(f"window {M} + horizon {H} exceeds series length {n - start}")
    width = ts.width if target_width is None else target_width
    if not 1 <= width <= ts.width:
        raise ConfigError(f"target width {width} outside 1..{ts.width}")
    starts = np.arange(start, n - M - H + 1, stride)
    if lags:
        starts = starts[starts >= max(lags)]
        if starts.size == 0:
            raise DataError(f"no window has {max(lags)} rows of history for its oldest segment")
    in_idx = window_rows(starts, M, lags)
    out_idx = starts[:, None] + M + np.arange(H)
    return WindowedDataset(
        inputs=ts.values[in_idx],
        targets=ts.values[out_idx][:, :, :width],
        input_index=in_idx + first_index,
        input_times=ts.timestamps[in_idx],
        target_times=ts.timestamps[out_idx],
        M=in_idx.shape[1],
        H=H,
    )


def split_windows(
    embedded: TimeSeries,
    k: int,
    M: int,
    H: int,
    stride: int = 1,
    target_width: int | None = None,
    first_index: int = 0,
    lags=(),
    fractions=DEFAULT_SPLIT,
) -> WindowedDataset:
    """Windows whose recent inputs and targets lie in chronological split ``k``.

    Lagged segments may reach back into earlier splits (they are past data).
    """
    n = len(embedded)
    bounds = [0]
    for piece in split_chronological(embedded, fractions):
        bounds.append(bounds[-1] + len(piece))
    lo, hi = bounds[k], bounds[k + 1]
    if hi - lo < M + H:
        raise DataError(f"split {k} has {hi - lo} rows, fewer than window {M} + horizon {H}")
    return make_windows(embedded.slice(0, hi), M, H, stride, target_width, first_index, lags, start=lo)


def zscore_normalize(ds: WindowedDataset, stats: Normalizer) -> WindowedDataset:
    """Standardise inputs and targets with precomputed (training-split) statistics."""
    v_out = ds.targets.shape[-1]
    return replace(
        ds,
        inputs=stats.normalize(ds.inputs),
        targets=stats.normalize(ds.targets, slice(0, v_out)),
        stats=stats,
    )


def metrics(pred, truth) -> dict[str, float]:
    pred = np.asarray(pred, dtype=np.float64)
    truth = np.asarray(truth, dtype=np.float64)
    if pred.shape != truth.shape:
        raise DimensionError(f"prediction shape {pred.shape} differs from truth {truth.shape}")
    err = pred - truth
    return {"rmse": float(np.sqrt(np.mean(err**2))), "mae": float(np.mean(np.abs(err)))}


def baseline_forecast(kind: str, window, H: int, period: int | None = None) -> np.ndarray:
    """Naive forecasts from a ``(..., M, v)`` window.

    ``persistence`` repeats the last value; ``seasonal`` copies the value
    ``period`` steps before each target (whole periods back when ``H`` exceeds it).
    """
    window = np.asarray(window, dtype=np.float64)
    if H < 1:
        raise ConfigError(f"horizon must be >= 1, got {H}")
    M = window.shape[-2]
    if kind == "persistence":
        return np.repeat(window[..., -1:, :], H, axis=-2)
    if kind == "seasonal":
        if period is None or period < 1:
            raise ConfigError("seasonal baseline needs a period >= 1")
        if M < period:
            raise DataError(f"seasonal baseline needs a window of at least {period} steps, got {M}")
        h = np.arange(1, H + 1)
        back = period * np.ceil(h / period).astype(int)
        return window[..., M - 1 + h - back, :]
    raise ConfigError(f"unknown baseline {kind!r}; expected one of {BASELINES}")


def persistence_rmse_analytic(h, period: float) -> np.ndarray:
    """Expected persistence RMSE on a unit sine over uniformly random phase."""
    return np.sqrt(1.0 - np.cos(2 * np.pi * np.asarray(h, dtype=np.float64) / period))


# -- CSV -------------------------------------------------------------------------


def write_csv(dest, ts: TimeSeries) -> None:
    """``timestamp,v1,...`` header, then one row per step with 17 significant digits."""
    lines = ["timestamp," + ",".join(f"v{j + 1}" for j in range(ts.width))]
    for t, row in zip(ts.timestamps, ts.values):
        lines.append(",".join([str(int(t))] + [format(x, ".17g") for x in row]))
    text = "\n".join(lines) + "\n"
    if isinstance(dest, io.TextIOBase):
        dest.write(text)
    else:
        with open(dest, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(text)


def read_csv(src, period: int | None = None) -> TimeSeries:
    if isinstance(src, io.TextIOBase):
        text = src.read()
    else:
        with open(src, encoding="utf-8") as fh:
            text = fh.read()
    lines = text.split("\n")
    if lines and lines[-1] == "":
        lines.pop()
    header = lines[0].strip().split(",") if lines else []
    if not header or header[0].strip() != "timestamp" or len(header) < 2:
        raise ParseError("expected header 'timestamp,v1[,v2,...]'", line=1)
    width = len(header) - 1
    stamps: list[int] = []
    rows: list[list[float]] = []
    for lineno, line in enumerate(lines[1:], start=2):
        fields = line.strip().split(",")
        if len(fields) != width + 1:
            raise ParseError(f"expected {width + 1} fields, got {len(fields)}", line=lineno)
        try:
            t = int(fields[0])
        except ValueError:
            raise ParseError(f"timestamp {fields[0]!r} is not an integer", line=lineno) from None
        try:
            row = [float(x) for x in fields[1:]]
        except ValueError as exc:
            raise ParseError(str(exc), line=lineno) from None
        if any(math.isnan(x) for x in row):
            raise ParseError("missing or NaN value", line=lineno)
        if stamps and t <= stamps[-1]:
            raise DataError(f"line {lineno}: timestamp {t} does not increase (previous {stamps[-1]})")
        stamps.append(t)
        rows.append(row)
    if not rows:
        raise DataError("no data rows after the header")
    values = np.array(rows, dtype=np.float64)
    if period is None and len(stamps) > 1:
        gaps = np.diff(stamps)
        if np.all(gaps == gaps[0]):
            period = int(gaps[0])
    return TimeSeries(np.array(stamps, dtype=np.int64), values, period)


# -- pipeline helper ------------------------------------------------------------------


@dataclass
class PreparedData:
    train: WindowedDataset
    valid: WindowedDataset | None
    test: WindowedDataset | None
    stats: Normalizer
    target_width: int


def prepare_datasets(
    ts: TimeSeries,
    M: int,
    H: int,
    tde_dim: int = 1,
    tde_tau: int = 1,
    stride: int = 1,
    fractions=DEFAULT_SPLIT,
    differences: bool = False,
    segments="none",
) -> PreparedData:
    """Split chronologically, standardise with training statistics, embed, window.

    A split too short to hold one window is returned as ``None`` (except the
    training split, which must hold at least one).
    """
    v = ts.width
    lags = segment_lags(ts.period, segments)
    if differences:
        ts = add_differences(ts)
    train_raw, _, _ = split_chronological(ts, fractions)
    stats = Normalizer.fit(train_raw.values)
    normed = TimeSeries(ts.timestamps, stats.normalize(ts.values), ts.period)
    embedded = time_delay_embed(normed, tde_dim, tde_tau)
    offset = len(ts) - len(embedded)
    sets = []
    for k in range(len(fractions)):
        try:
            ds = split_windows(embedded, k, M, H, stride, v, offset, lags, fractions)
        except DataError as exc:
            if k == 0:
                raise DataError(f"training split: {exc}") from None
            ds = None
        else:
            ds.stats = stats
        sets.append(ds)
    return PreparedData(sets[0], sets[1], sets[2], stats, v)
