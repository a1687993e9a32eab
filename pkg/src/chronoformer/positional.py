"""Position information: sinusoidal encodings, relative shifts, calendar stamps."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ConfigError, DataError, DimensionError
from .tensor import Tensor

PE_VARIANTS = ("sinusoidal", "global", "relative", "periodic_daily", "periodic_weekly")

SECONDS_PER_DAY = 86_400
DAY_BUCKET_SECONDS = 300  # 24 * 60 / 5 = 288 buckets per day
DAY_BUCKETS = SECONDS_PER_DAY // DAY_BUCKET_SECONDS
# 1970-01-01 was a Thursday; days are numbered Monday = 0
EPOCH_WEEKDAY = 3


@dataclass(frozen=True)
class PESpec:
    d: int
    base: float = 10_000.0
    variant: str = "sinusoidal"

    def __post_init__(self):
        if self.d < 2 or self.d % 2:
            raise ConfigError(f"positional encoding size must be even and >= 2, got {self.d}")
        if self.base <= 1:
            raise ConfigError(f"positional encoding base must exceed 1, got {self.base}")
        if self.variant not in PE_VARIANTS:
            raise ConfigError(f"unknown PE variant {self.variant!r}; expected one of {PE_VARIANTS}")

    def frequencies(self) -> np.ndarray:
        """Angular frequency of each sin/cos pair, fastest first."""
        i = np.arange(self.d // 2)
        return self.base ** (-2.0 * i / self.d)


def pe_columns(positions, spec: PESpec) -> np.ndarray:
    """Sinusoidal encodings for arbitrary positions, one column each (``d x n``)."""
    pos = np.asarray(positions, dtype=np.float64).reshape(-1)
    angles = spec.frequencies()[:, None] * pos[None, :]
    out = np.empty((spec.d, pos.size))
    out[0::2] = np.sin(angles)
    out[1::2] = np.cos(angles)
    return out


def sinusoidal_pe(pos: int, spec: PESpec) -> np.ndarray:
    if pos < 0:
        raise ConfigError(f"position must be >= 0, got {pos}")
    return pe_columns([pos], spec)[:, 0]


def pe_matrix(n: int, spec: PESpec) -> np.ndarray:
    if n < 1:
        raise ConfigError(f"need at least one position, got {n}")
    return pe_columns(np.arange(n), spec)


def rotation_blocks(k: float, spec: PESpec) -> np.ndarray:
    """The ``(d/2, 2, 2)`` rotations that advance an encoding by ``k`` steps."""
    theta = spec.frequencies() * k
    c, s = np.cos(theta), np.sin(theta)
    return np.stack([np.stack([c, s], axis=-1), np.stack([-s, c], axis=-1)], axis=-2)


def rotation_advance(p: np.ndarray, k: int, spec: PESpec) -> np.ndarray:
    """Map the encoding of ``pos`` to the encoding of ``pos + k``.

    Only ``k`` is needed, not ``pos``: each (sin, cos) pair is rotated by
    its own frequency times ``k``.
    """
    p = np.asarray(p, dtype=np.float64)
    if p.shape != (spec.d,):
        raise DimensionError(f"expected an encoding of size {spec.d}, got shape {p.shape}")
    if k == 0:
        return p.copy()
    pairs = p.reshape(spec.d // 2, 2)
    return np.einsum("fij,fj->fi", rotation_blocks(k, spec), pairs).reshape(spec.d)


@dataclass(frozen=True)
class StampFeatures:
    """Calendar attributes per position."""

    minute_bucket: np.ndarray
    weekday: np.ndarray
    holiday: np.ndarray

    def __post_init__(self):
        for name, hi in (("minute_bucket", DAY_BUCKETS), ("weekday", 7), ("holiday", 2)):
            values = np.asarray(getattr(self, name), dtype=np.intp)
            if values.size and (values.min() < 0 or values.max() >= hi):
                raise DataError(f"{name} outside [0, {hi - 1}]: {values.min()}..{values.max()}")
            object.__setattr__(self, name, values)
        if not (self.minute_bucket.shape == self.weekday.shape == self.holiday.shape):
            raise DimensionError("stamp feature arrays must share a shape")

    @classmethod
    def from_timestamps(cls, timestamps, holidays=None) -> StampFeatures:
        """Derive stamps from epoch seconds; sub-5-minute detail is floored away."""
        ts = np.asarray(timestamps, dtype=np.int64)
        seconds_of_day = ts % SECONDS_PER_DAY
        days = ts // SECONDS_PER_DAY
        holiday = np.zeros(ts.shape, dtype=np.intp) if holidays is None else np.asarray(holidays)
        return cls(
            minute_bucket=seconds_of_day // DAY_BUCKET_SECONDS,
            weekday=(days + EPOCH_WEEKDAY) % 7,
            holiday=holiday,
        )

    def __len__(self) -> int:
        return int(self.minute_bucket.shape[-1])


def traffic_pe(positions, spec: PESpec, stamps: StampFeatures | None = None) -> np.ndarray:
    """Encode a window of absolute series indices with one of the traffic strategies.

    ``relative`` restarts at 0 for each window, ``global``/``sinusoidal`` use
    the absolute index, ``periodic_daily`` the 5-minute bucket of the day and
    ``periodic_weekly`` the day of the week.
    """
    positions = np.asarray(positions, dtype=np.int64)
    if spec.variant in ("global", "sinusoidal"):
        return pe_columns(positions, spec)
    if spec.variant == "relative":
        return pe_columns(positions - positions[0], spec)
    if stamps is None:
        raise ConfigError(f"PE variant {spec.variant!r} needs timestamps")
    if spec.variant == "periodic_daily":
        return pe_columns(stamps.minute_bucket, spec)
    return pe_columns(stamps.weekday, spec)


def stamp_embedding(stamps: StampFeatures, tables: dict[str, Tensor]) -> Tensor:
    """Sum of the looked-up rows from the minute, weekday and holiday tables.

    Returns ``(..., d, n)`` for stamps shaped ``(..., n)``.
    """
    minute, weekday, holiday = tables["minute"], tables["weekday"], tables["holiday"]
    d = minute.shape[1]
    expected = {"minute": (DAY_BUCKETS, d), "weekday": (7, d), "holiday": (2, d)}
    for name, shape in expected.items():
        if tables[name].shape != shape:
            raise DimensionError(f"stamp table {name!r} must be {shape}, got {tables[name].shape}")
    rows = T.add(
        T.add(T.take(minute, stamps.minute_bucket, axis=0), T.take(weekday, stamps.weekday, axis=0)),
        T.take(holiday, stamps.holiday, axis=0),
    )
    return rows if rows.ndim == 1 else T.transpose(rows)


def add_pe_to_embedding(X: Tensor, P, S: Tensor | None = None) -> Tensor:
    """``X + P`` (plus the stamp embedding ``S`` when given)."""
    P = P if isinstance(P, Tensor) else T.tensor(P)
    if X.shape[-2:] != P.shape[-2:]:
        raise DimensionError(f"embedding {X.shape} and encoding {P.shape} differ")
    out = T.add(X, P)
    if S is not None:
        if S.shape[-2:] != X.shape[-2:]:
            raise DimensionError(f"embedding {X.shape} and stamp embedding {S.shape} differ")
        out = T.add(out, S)
    return out
