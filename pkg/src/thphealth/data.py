"""Event-sequence data model, JSON Lines ingestion, splitting and the
per-dataset statistics (type frequencies, class weights, gap normalization)
that are fitted on a training split and carried inside checkpoints."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

DEFAULT_TYPE_NAMES = ("IP", "OP", "ED")
GAP_STD_FLOOR = 1e-6


class DataError(ValueError):
    """Raised for malformed or invariant-violating event data."""


@dataclass(frozen=True)
class EventSequence:
    """One patient trajectory: strictly increasing times (days) and type indices."""

    patient_id: str
    times: np.ndarray
    types: np.ndarray

    def __post_init__(self):
        times = np.asarray(self.times, dtype=np.float64).reshape(-1)
        types = np.asarray(self.types, dtype=np.int64).reshape(-1)
        if times.shape != types.shape:
            raise DataError(f"{self.patient_id}: times and types differ in length")
        if times.size and (not np.all(np.isfinite(times)) or times[0] < 0):
            raise DataError(f"{self.patient_id}: times must be finite and non-negative")
        if np.any(np.diff(times) <= 0):
            raise DataError(f"{self.patient_id}: non-increasing times")
        times.setflags(write=False)
        types.setflags(write=False)
        object.__setattr__(self, "times", times)
        object.__setattr__(self, "types", types)

    def __len__(self):
        return int(self.times.size)

    @property
    def gaps(self) -> np.ndarray:
        """Inter-event gaps with the first event assigned a gap of 0."""
        if len(self) == 0:
            return np.zeros(0)
        return np.concatenate([[0.0], np.diff(self.times)])

    def shifted(self, offset: float) -> "EventSequence":
        return EventSequence(self.patient_id, self.times + offset, self.types)

    def truncated(self, max_len: int) -> "EventSequence":
        """Keep the most recent ``max_len`` events."""
        if len(self) <= max_len:
            return self
        return EventSequence(self.patient_id, self.times[-max_len:], self.types[-max_len:])

    def to_json(self) -> dict:
        return {
            "patient_id": self.patient_id,
            "events": [[float(t), int(k)] for t, k in zip(self.times, self.types)],
        }


@dataclass(frozen=True)
class Dataset:
    sequences: tuple[EventSequence, ...]
    type_names: tuple[str, ...] = DEFAULT_TYPE_NAMES

    def __post_init__(self):
        object.__setattr__(self, "sequences", tuple(self.sequences))
        object.__setattr__(self, "type_names", tuple(self.type_names))
        if len(self.type_names) < 1:
            raise DataError("at least one event type is required")
        K = self.K
        seen = set()
        for seq in self.sequences:
            if seq.patient_id in seen:
                raise DataError(f"duplicate patient_id {seq.patient_id!r}")
            seen.add(seq.patient_id)
            if len(seq) and (seq.types.min() < 0 or seq.types.max() >= K):
                raise DataError(f"{seq.patient_id}: type index out of range [0, {K})")

    @property
    def K(self) -> int:
        return len(self.type_names)

    def __len__(self):
        return len(self.sequences)

    def __iter__(self):
        return iter(self.sequences)

    def __getitem__(self, i):
        return self.sequences[i]

    def by_id(self, patient_id: str) -> EventSequence:
        for seq in self.sequences:
            if seq.patient_id == patient_id:
                return seq
        raise KeyError(patient_id)

    def subset(self, sequences: Iterable[EventSequence]) -> "Dataset":
        return Dataset(tuple(sequences), self.type_names)

    def filter_min_events(self, min_events: int) -> "Dataset":
        return self.subset(s for s in self.sequences if len(s) >= min_events)

    @property
    def n_events(self) -> int:
        return sum(len(s) for s in self.sequences)


@dataclass(frozen=True)
class GapStats:
    """Mean and (population) std of log(1 + gap) over a training split."""

    mean_log_gap: float
    std_log_gap: float

    def __post_init__(self):
        if not self.std_log_gap > 0:
            raise DataError("std_log_gap must be positive")


@dataclass(frozen=True)
class ClassWeights:
    w: tuple[float, ...] = field(default_factory=tuple)

    def __post_init__(self):
        w = tuple(float(x) for x in self.w)
        if not w or any(not (math.isfinite(x) and x > 0) for x in w):
            raise DataError("class weights must be finite and positive")
        object.__setattr__(self, "w", w)

    def as_array(self) -> np.ndarray:
        return np.asarray(self.w, dtype=np.float64)

    @classmethod
    def uniform(cls, K: int) -> "ClassWeights":
        return cls((1.0,) * K)


def parse_sequences(path, K: int | None = None, type_names: Sequence[str] | None = None) -> Dataset:
    """Read a JSON Lines dataset, one ``{"patient_id", "events": [[t, k], ...]}``
    object per line. Blank lines are skipped; errors carry the line number."""
    if type_names is None:
        if K is None:
            K = len(DEFAULT_TYPE_NAMES)
        type_names = DEFAULT_TYPE_NAMES if K == len(DEFAULT_TYPE_NAMES) else tuple(f"type{k}" for k in range(K))
    elif K is not None and len(type_names) != K:
        raise DataError("type_names length does not match K")
    K = len(type_names)

    sequences = []
    seen = set()
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
                pid = obj["patient_id"]
                events = obj["events"]
                if not isinstance(pid, str):
                    raise TypeError("patient_id must be a string")
                arr = np.asarray(events, dtype=np.float64).reshape(-1, 2) if events else np.zeros((0, 2))
            except (ValueError, KeyError, TypeError) as exc:
                raise DataError(f"line {lineno}: malformed record ({exc})") from None
            types = arr[:, 1]
            if np.any(types != np.round(types)) or np.any(types < 0) or np.any(types >= K):
                raise DataError(f"line {lineno}: type index out of range [0, {K})")
            if pid in seen:
                raise DataError(f"line {lineno}: duplicate patient_id {pid!r}")
            seen.add(pid)
            try:
                sequences.append(EventSequence(pid, arr[:, 0], types.astype(np.int64)))
            except DataError as exc:
                raise DataError(f"line {lineno}: {exc}") from None
    return Dataset(tuple(sequences), tuple(type_names))


def write_sequences(dataset: Dataset, path) -> None:
    path = Path(path)
    with open(path, "w", encoding="utf-8") as fh:
        for seq in dataset:
            fh.write(json.dumps(seq.to_json(), separators=(",", ":")) + "\n")


def split_dataset(d: Dataset, train_fraction: float, seed: int) -> tuple[Dataset, Dataset]:
    """Partition patients into (train, test). The train size is
    ``ceil(train_fraction * n)`` so a single-patient dataset goes to train."""
    if not 0.0 < train_fraction < 1.0:
        raise DataError("train_fraction must lie in (0, 1)")
    n = len(d)
    if n == 0:
        raise DataError("cannot split an empty dataset")
    n_train = min(n, math.ceil(train_fraction * n - 1e-12))
    order = np.random.default_rng(seed).permutation(n)
    train_idx = sorted(order[:n_train])
    test_idx = sorted(order[n_train:])
    return (
        d.subset(d.sequences[i] for i in train_idx),
        d.subset(d.sequences[i] for i in test_idx),
    )


def type_counts(d: Dataset) -> np.ndarray:
    counts = np.zeros(d.K, dtype=np.int64)
    for seq in d:
        counts += np.bincount(seq.types, minlength=d.K)
    return counts


def compute_type_frequencies(d: Dataset) -> np.ndarray:
    """Relative frequency of each event type (counts over total events)."""
    counts = type_counts(d)
    total = counts.sum()
    if total == 0:
        raise DataError("dataset contains no events")
    return counts / total


def compute_class_weights(f) -> ClassWeights:
    """Weights 1/sqrt(f_k). A class with zero frequency gets the weight of
    the rarest observed class instead of an infinite one."""
    f = np.asarray(f, dtype=np.float64)
    if np.any(f < 0):
        raise DataError("frequencies must be non-negative")
    observed = f[f > 0]
    if observed.size == 0:
        raise DataError("empty frequency vector")
    w = np.full(f.shape, 1.0 / math.sqrt(observed.min()))
    w[f > 0] = 1.0 / np.sqrt(f[f > 0])
    return ClassWeights(tuple(w))


def gap_stats(train: Dataset) -> GapStats:
    logs = [np.log1p(np.diff(seq.times)) for seq in train if len(seq) >= 2]
    logs = np.concatenate(logs) if logs else np.zeros(0)
    if logs.size < 2:
        raise DataError("need at least 2 inter-event gaps to compute gap statistics")
    return GapStats(float(logs.mean()), float(max(logs.std(), GAP_STD_FLOOR)))


def normalize_gap(dt, s: GapStats):
    """(log(1 + dt) - mean) / std; accepts scalars or arrays."""
    dt = np.asarray(dt, dtype=np.float64)
    if np.any(dt < 0):
        raise DataError("gap must be non-negative")
    out = (np.log1p(dt) - s.mean_log_gap) / s.std_log_gap
    return float(out) if out.ndim == 0 else out


def median_gap(d: Dataset) -> float:
    gaps = [np.diff(seq.times) for seq in d if len(seq) >= 2]
    if not gaps:
        raise DataError("no inter-event gaps")
    return float(np.median(np.concatenate(gaps)))


def empirical_event_rate(d: Dataset) -> float:
    """Events per day pooled over sequences, using each trajectory's span."""
    events = 0
    exposure = 0.0
    for seq in d:
        if len(seq) >= 2:
            events += len(seq) - 1
            exposure += float(seq.times[-1] - seq.times[0])
    if events == 0 or exposure <= 0:
        raise DataError("cannot estimate an event rate from this dataset")
    return events / exposure
