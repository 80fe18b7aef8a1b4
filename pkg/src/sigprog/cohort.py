"""Cohort containers: subjects with fixed attributes and irregular, partially
observed multi-target visits."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

POLARITIES = ("increasing", "decreasing")


@dataclass(frozen=True)
class TargetInfo:
    """A time-varying target. ``polarity`` is the direction the score moves as
    the disease advances: MMSE-like scores are ``decreasing``."""

    name: str
    low: float
    high: float
    polarity: str = "increasing"

    def __post_init__(self):
        if self.polarity not in POLARITIES:
            raise ValueError(f"polarity must be one of {POLARITIES}, got {self.polarity!r}")
        if not self.high > self.low:
            raise ValueError(f"target {self.name!r}: empty range [{self.low}, {self.high}]")

    @property
    def healthy(self) -> float:
        return self.low if self.polarity == "increasing" else self.high

    @property
    def signed_range(self) -> float:
        span = self.high - self.low
        return span if self.polarity == "increasing" else -span


@dataclass
class History:
    """Visit times (age, years) and an (n_visits, m) value matrix, NaN = missing."""

    ages: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        self.ages = np.asarray(self.ages, dtype=float).reshape(-1)
        self.values = np.asarray(self.values, dtype=float)
        if self.values.ndim == 1:
            self.values = self.values.reshape(self.ages.size, -1)
        if self.values.shape[0] != self.ages.size:
            raise ValueError("values must have one row per visit")
        if not np.all(np.isfinite(self.ages)):
            raise ValueError("visit ages must be finite")

    @classmethod
    def empty(cls, m: int) -> "History":
        return cls(np.zeros(0), np.zeros((0, m)))

    @property
    def n_visits(self) -> int:
        return self.ages.size

    @property
    def n_observed(self) -> int:
        return int(np.isfinite(self.values).sum())


@dataclass
class Subject:
    subject_id: str
    attributes: np.ndarray
    ages: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        self.attributes = np.asarray(self.attributes, dtype=float).reshape(-1)
        h = History(self.ages, self.values)
        order = np.argsort(h.ages, kind="stable")
        self.ages = h.ages[order]
        self.values = h.values[order]

    @property
    def n_visits(self) -> int:
        return self.ages.size

    def history(self, n_visits: int | None = None) -> History:
        """The first ``n_visits`` visits (all of them when ``None``)."""
        k = self.n_visits if n_visits is None else n_visits
        return History(self.ages[:k].copy(), self.values[:k].copy())

    def select_targets(self, indices) -> "Subject":
        return Subject(self.subject_id, self.attributes.copy(), self.ages.copy(),
                       self.values[:, list(indices)].copy())


@dataclass
class Cohort:
    subjects: list[Subject]
    targets: list[TargetInfo]
    attribute_names: list[str]
    attribute_units: list[str] = field(default_factory=list)

    def __post_init__(self):
        if not self.attribute_units:
            self.attribute_units = [""] * len(self.attribute_names)
        d, m = self.d, self.m
        for s in self.subjects:
            if s.attributes.shape != (d,):
                raise ValueError(f"subject {s.subject_id}: expected {d} attributes")
            if not np.all(np.isfinite(s.attributes)):
                raise ValueError(f"subject {s.subject_id}: non-finite attributes")
            if s.values.shape != (s.n_visits, m):
                raise ValueError(f"subject {s.subject_id}: expected {m} target columns")

    @property
    def d(self) -> int:
        return len(self.attribute_names)

    @property
    def m(self) -> int:
        return len(self.targets)

    @property
    def n(self) -> int:
        return len(self.subjects)

    @property
    def target_names(self) -> list[str]:
        return [t.name for t in self.targets]

    def __len__(self):
        return len(self.subjects)

    def attribute_index(self, name: str) -> int:
        return self.attribute_names.index(name)

    def attributes(self) -> np.ndarray:
        return np.array([s.attributes for s in self.subjects]).reshape(self.n, self.d)

    def subset(self, indices) -> "Cohort":
        return Cohort([self.subjects[i] for i in indices], list(self.targets),
                      list(self.attribute_names), list(self.attribute_units))

    def select_targets(self, names) -> "Cohort":
        idx = [self.target_names.index(nm) for nm in names]
        return Cohort([s.select_targets(idx) for s in self.subjects],
                      [self.targets[i] for i in idx], list(self.attribute_names),
                      list(self.attribute_units))

    def observed_age_range(self) -> tuple[float, float]:
        ages = [s.ages for s in self.subjects if s.n_visits]
        if not ages:
            raise ValueError("cohort has no visits")
        allages = np.concatenate(ages)
        return float(allages.min()), float(allages.max())


@dataclass
class PackedObservations:
    """Flat arrays of every observed (subject, target, age, value) entry."""

    subject: np.ndarray
    target: np.ndarray
    time: np.ndarray
    value: np.ndarray
    x: np.ndarray
    m: int

    @property
    def n(self) -> int:
        return self.x.shape[0]

    @property
    def size(self) -> int:
        return self.value.size


def pack(attributes: np.ndarray, histories: list[History], m: int) -> PackedObservations:
    """Flatten histories into observation arrays, skipping missing entries."""
    subj, tgt, time, val = [], [], [], []
    for i, h in enumerate(histories):
        if h.n_visits == 0:
            continue
        j, k = np.nonzero(np.isfinite(h.values))
        subj.append(np.full(j.size, i))
        tgt.append(k)
        time.append(h.ages[j])
        val.append(h.values[j, k])
    if subj:
        cat = np.concatenate
        arrays = cat(subj), cat(tgt), cat(time).astype(float), cat(val).astype(float)
    else:
        arrays = (np.zeros(0, int), np.zeros(0, int), np.zeros(0), np.zeros(0))
    x = np.asarray(attributes, dtype=float).reshape(len(histories), -1)
    return PackedObservations(arrays[0].astype(np.intp), arrays[1].astype(np.intp),
                              arrays[2], arrays[3], x, m)


def pack_cohort(cohort: Cohort) -> PackedObservations:
    return pack(cohort.attributes(), [s.history() for s in cohort.subjects], cohort.m)
