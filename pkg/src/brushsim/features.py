"""Brushing-session corpus ingestion and state feature construction.

Decision index convention: ``t`` is 1-based, odd ``t`` is the morning window
and even ``t`` the evening window, and ``day(t) = ceil(t / 2)``.  A user's
durations are stored as a flat array where entry ``t - 1`` is the duration
observed at decision time ``t``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np
import pandas as pd

DURATION_CENTER = 172.0
DURATION_SCALE = 118.0

# (center, half-width, last day) for day-in-study normalization
DAY_NORMALIZATION = {
    "fitting": (14.5, 13.5, 28),
    "generation": (35.5, 34.5, 70),
}

PROPORTION_WINDOW_DAYS = 7
SESSIONS_PER_DAY = 2

VARIANTS = ("S", "NS")
TARGETS = ("env_baseline", "env_advantage", "alg")


class SchemaError(ValueError):
    """Raised when the corpus file does not match the expected columns."""


class IntegrityError(ValueError):
    """Raised when the corpus contains duplicated or malformed sessions."""


@dataclass(frozen=True)
class SessionRecord:
    user_id: str
    day: int
    time_of_day: int
    duration: int


def normalize_duration(seconds):
    """Z-score a (total) brushing duration in seconds."""
    if np.ndim(seconds):
        return (np.asarray(seconds, dtype=float) - DURATION_CENTER) / DURATION_SCALE
    return (float(seconds) - DURATION_CENTER) / DURATION_SCALE


def normalize_day(day: int, mode: str = "generation") -> float:
    """Map day-in-study onto [-1, 1] using the fitting (28 day) or generation (70 day) range."""
    try:
        center, half_width, last = DAY_NORMALIZATION[mode]
    except KeyError:
        raise ValueError(f"unknown day normalization mode {mode!r}") from None
    if not 1 <= day <= last:
        raise ValueError(f"day {day} outside [1, {last}] for mode {mode!r}")
    return (day - center) / half_width


def day_of(t: int) -> int:
    return (t + 1) // 2


def time_of_day(t: int) -> int:
    return 0 if t % 2 == 1 else 1


def is_weekend(day: int, weekend_offset: int = 0) -> int:
    """Day 1 is a Monday unless shifted by ``weekend_offset`` days."""
    return int((day - 1 + weekend_offset) % 7 in (5, 6))


def prior_day_total(durations: Sequence[float], t: int) -> float:
    """Sum of the two sessions of the previous day; 0 before any completed day."""
    day = day_of(t)
    if day <= 1:
        return 0.0
    start = SESSIONS_PER_DAY * (day - 2)
    window = np.asarray(durations[start:start + SESSIONS_PER_DAY], dtype=float)
    return float(window.sum())


def nonzero_proportion(durations: Sequence[float], t: int) -> float:
    """Fraction of non-zero sessions over the completed days in the trailing 7-day window."""
    day = day_of(t)
    first_day = max(1, day - PROPORTION_WINDOW_DAYS)
    start = SESSIONS_PER_DAY * (first_day - 1)
    stop = SESSIONS_PER_DAY * (day - 1)
    window = np.asarray(durations[start:stop], dtype=float)
    if window.size == 0:
        return 0.0
    return float(np.count_nonzero(window) / window.size)


def build_features(
    durations: Sequence[float],
    t: int,
    variant: str = "S",
    target: str = "env_baseline",
    *,
    day_mode: str = "generation",
    weekend_offset: int = 0,
):
    """Feature vector(s) for decision time ``t`` given the durations observed before it.

    ``durations`` may be longer than ``t - 1``; only entries strictly before
    ``t`` are read.  For ``target="alg"`` a ``(f, m)`` pair is returned.
    """
    if t < 1:
        raise ValueError("decision index t must be >= 1")
    if variant not in VARIANTS:
        raise ValueError(f"unknown variant {variant!r}")
    past = durations[: t - 1]
    day = day_of(t)
    tod = time_of_day(t)
    prior = normalize_duration(prior_day_total(past, t))
    weekend = is_weekend(day, weekend_offset)

    if target == "alg":
        f = np.array([1.0, tod, prior])
        m = np.array([1.0, tod, prior, weekend])
        return f, m
    if target == "env_baseline":
        row = [1.0, tod, prior, weekend, nonzero_proportion(past, t)]
    elif target == "env_advantage":
        row = [1.0, tod, prior, weekend]
    else:
        raise ValueError(f"unknown feature target {target!r}")
    if variant == "NS":
        row.append(normalize_day(day, day_mode))
    return np.array(row, dtype=float)


def feature_matrix(
    durations: Sequence[float],
    variant: str = "S",
    target: str = "env_baseline",
    *,
    day_mode: str = "fitting",
    weekend_offset: int = 0,
) -> np.ndarray:
    """Stack feature rows for every decision time covered by ``durations``.

    Used to reconstruct the states an observed trajectory passed through.
    """
    rows = [
        build_features(durations, t, variant, target, day_mode=day_mode, weekend_offset=weekend_offset)
        for t in range(1, len(durations) + 1)
    ]
    return np.vstack(rows)


DEFAULT_COLUMN_MAP = {
    "user": "user_id",
    "day": "day",
    "session": "time_of_day",
    "duration": "duration",
}


@dataclass
class Corpus:
    """Per-user duration trajectories, ordered by (day, time of day)."""

    durations: dict[str, np.ndarray]

    @property
    def user_ids(self) -> list[str]:
        return list(self.durations)

    def __len__(self) -> int:
        return len(self.durations)

    def __iter__(self):
        return iter(self.durations.items())

    def all_durations(self) -> np.ndarray:
        return np.concatenate(list(self.durations.values())) if self.durations else np.empty(0)

    def reward_variance(self, cap: float = 180.0) -> float:
        """Variance of truncated rewards across every session in the corpus."""
        rewards = np.minimum(self.all_durations(), cap)
        return float(np.var(rewards))

    @classmethod
    def from_records(cls, records: Iterable[SessionRecord]) -> "Corpus":
        by_user: dict[str, dict[tuple[int, int], int]] = {}
        for rec in records:
            slots = by_user.setdefault(rec.user_id, {})
            key = (rec.day, rec.time_of_day)
            if key in slots:
                raise IntegrityError(f"duplicate session {key} for user {rec.user_id}")
            if rec.duration < 0:
                raise IntegrityError(f"negative duration for user {rec.user_id} at {key}")
            slots[key] = rec.duration
        durations = {}
        for user, slots in by_user.items():
            ordered = sorted(slots)
            durations[user] = np.array([slots[k] for k in ordered], dtype=float)
        return cls(durations)


def _parse_time_of_day(value) -> int:
    if isinstance(value, str):
        lowered = value.strip().lower()
        if lowered in ("morning", "am", "0"):
            return 0
        if lowered in ("evening", "pm", "night", "1"):
            return 1
        raise IntegrityError(f"unrecognized time-of-day value {value!r}")
    ivalue = int(value)
    if ivalue not in (0, 1):
        raise IntegrityError(f"time-of-day must be 0 or 1, got {value!r}")
    return ivalue


def load_corpus(
    path: str | Path,
    column_map: Mapping[str, str] | None = None,
    delimiter: str = ",",
) -> Corpus:
    """Read a session-level CSV into a :class:`Corpus`.

    ``column_map`` maps the logical names ``user``, ``day``, ``session`` and
    ``duration`` to the file's header names.
    """
    cmap = {**DEFAULT_COLUMN_MAP, **(column_map or {})}
    try:
        frame = pd.read_csv(path, sep=delimiter, dtype=str)
    except pd.errors.EmptyDataError:
        raise SchemaError(f"{path}: empty file") from None
    missing = [col for col in cmap.values() if col not in frame.columns]
    if missing:
        raise SchemaError(f"{path}: missing columns {missing}")

    records = []
    for row in frame.itertuples(index=False):
        values = dict(zip(frame.columns, row))
        raw = values[cmap["duration"]]
        try:
            as_float = float(raw)
        except (TypeError, ValueError):
            raise IntegrityError(f"non-numeric duration {raw!r}") from None
        if not math.isfinite(as_float) or as_float != int(as_float):
            raise IntegrityError(f"non-integer duration {raw!r}")
        records.append(
            SessionRecord(
                user_id=str(values[cmap["user"]]),
                day=int(float(values[cmap["day"]])),
                time_of_day=_parse_time_of_day(values[cmap["session"]]),
                duration=int(as_float),
            )
        )
    return Corpus.from_records(records)
