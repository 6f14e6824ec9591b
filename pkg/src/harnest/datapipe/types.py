"""Core data containers for the preprocessing pipeline."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

RECIPE_NAMES = ("opportunity", "pamap2", "mhealth", "mocapaci", "synthetic")
NORMALIZATIONS = ("minmax_fixed", "zscore_per_user", "gesture_endpoint", "none")


class DataError(ValueError):
    """Raised for malformed recordings, recipes or dataset files."""


@dataclass
class RawRecording:
    """A continuous multichannel stream from one subject.

    ``samples`` is ``[time, channels]``; ``per_sample_activity`` holds one
    integer label per time step.
    """

    samples: np.ndarray
    sample_rate: float
    per_sample_activity: np.ndarray
    subject_id: int

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        self.per_sample_activity = np.asarray(self.per_sample_activity, dtype=np.int64)
        if self.samples.ndim != 2:
            raise DataError(f"samples must be 2-D [time, channels], got shape {self.samples.shape}")
        if len(self.per_sample_activity) != len(self.samples):
            raise DataError(
                f"label length {len(self.per_sample_activity)} != sample length {len(self.samples)}"
            )
        if not self.sample_rate > 0:
            raise DataError(f"sample_rate must be positive, got {self.sample_rate}")

    @property
    def length(self) -> int:
        return self.samples.shape[0]

    @property
    def n_channels(self) -> int:
        return self.samples.shape[1]

    def replace(self, samples: np.ndarray, labels: Optional[np.ndarray] = None) -> "RawRecording":
        return RawRecording(
            samples=samples,
            sample_rate=self.sample_rate,
            per_sample_activity=self.per_sample_activity if labels is None else labels,
            subject_id=self.subject_id,
        )


@dataclass
class WindowedDataset:
    """Windows ``X [n, n_c, n_w]`` with activity labels ``Y`` and subject ids ``S``."""

    X: np.ndarray
    Y: np.ndarray
    S: np.ndarray
    n_a: int
    subject_ids: list[int] = field(default_factory=list)

    def __post_init__(self):
        self.X = np.ascontiguousarray(self.X, dtype=np.float32)
        self.Y = np.ascontiguousarray(self.Y, dtype=np.int64)
        self.S = np.ascontiguousarray(self.S, dtype=np.int64)
        if not self.subject_ids:
            self.subject_ids = sorted(int(s) for s in np.unique(self.S))
        self.subject_ids = [int(s) for s in self.subject_ids]
        self.validate()

    def validate(self) -> None:
        if self.X.ndim != 3:
            raise DataError(f"X must be 3-D [n, n_c, n_w], got shape {self.X.shape}")
        n = self.X.shape[0]
        if len(self.Y) != n or len(self.S) != n:
            raise DataError(f"length mismatch: X={n}, Y={len(self.Y)}, S={len(self.S)}")
        if self.n_a < 1:
            raise DataError("n_a must be >= 1")
        if n and (self.Y.min() < 0 or self.Y.max() >= self.n_a):
            raise DataError(f"labels outside [0, {self.n_a})")
        unknown = set(np.unique(self.S).tolist()) - set(self.subject_ids)
        if unknown:
            raise DataError(f"subject ids {sorted(unknown)} missing from subject_ids")

    @property
    def n(self) -> int:
        return self.X.shape[0]

    @property
    def n_c(self) -> int:
        return self.X.shape[1]

    @property
    def n_w(self) -> int:
        return self.X.shape[2]

    def subset(self, mask_or_idx) -> "WindowedDataset":
        idx = np.asarray(mask_or_idx)
        if idx.dtype == bool:
            idx = np.flatnonzero(idx)
        sub_s = self.S[idx]
        present = [s for s in self.subject_ids if s in set(sub_s.tolist())]
        return WindowedDataset(self.X[idx], self.Y[idx], sub_s, self.n_a, present or [])

    def for_subjects(self, subjects) -> "WindowedDataset":
        return self.subset(np.isin(self.S, list(subjects)))

    def subject_histogram(self) -> dict[int, int]:
        return {s: int(np.sum(self.S == s)) for s in self.subject_ids}

    @staticmethod
    def concatenate(parts: list["WindowedDataset"], n_a: int) -> "WindowedDataset":
        parts = [p for p in parts if p.n]
        if not parts:
            raise DataError("no windows to concatenate")
        subjects = sorted({s for p in parts for s in p.subject_ids})
        return WindowedDataset(
            np.concatenate([p.X for p in parts]),
            np.concatenate([p.Y for p in parts]),
            np.concatenate([p.S for p in parts]),
            n_a,
            subjects,
        )


@dataclass
class DatasetRecipe:
    """How to turn one dataset's raw files into windows."""

    name: str
    window_size: int
    step: int
    channel_selection: list[int] = field(default_factory=list)
    normalization: str = "none"
    activity_filter: list[int] = field(default_factory=list)
    subject_filter: list[int] = field(default_factory=list)
    # loader-specific knobs (label track, null handling, synthetic sizes, ...)
    options: dict = field(default_factory=dict)

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.name not in RECIPE_NAMES:
            raise DataError(f"unknown recipe name {self.name!r}; expected one of {RECIPE_NAMES}")
        if self.normalization not in NORMALIZATIONS:
            raise DataError(
                f"unknown normalization {self.normalization!r}; expected one of {NORMALIZATIONS}"
            )
        if not (0 < self.step <= self.window_size):
            raise DataError(f"need 0 < step <= window_size, got step={self.step}, window={self.window_size}")
        if len(set(self.channel_selection)) != len(self.channel_selection):
            raise DataError("channel_selection indices must be distinct")

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "DatasetRecipe":
        known = {"name", "window_size", "step", "channel_selection", "normalization",
                 "activity_filter", "subject_filter", "options"}
        extra = set(d) - known
        if extra:
            raise DataError(f"unknown recipe fields: {sorted(extra)}")
        return cls(**d)

    @classmethod
    def load(cls, path) -> "DatasetRecipe":
        with open(path) as fh:
            try:
                data = json.load(fh)
            except json.JSONDecodeError as exc:
                raise DataError(f"{path}: invalid JSON: {exc}") from exc
        return cls.from_dict(data)

    def save(self, path) -> None:
        Path(path).write_text(self.to_json())
