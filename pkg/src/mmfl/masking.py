"""Controlled missing-modality patterns driven by missing statistics (p_m, p_s).

p_s is the fraction of samples that lose modalities; p_m is the fraction of
modalities dropped inside each of those samples.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ExcludedConfiguration, FormatError, InvalidStats, ShapeMismatch

# absorbs representation error in products such as 0.35 * 10 = 3.4999999999999996
_ROUND_EPS = 1e-9


def round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5 + _ROUND_EPS))


@dataclass(frozen=True)
class MissingStats:
    p_m: float
    p_s: float

    def __post_init__(self):
        for name in ("p_m", "p_s"):
            v = getattr(self, name)
            if not (isinstance(v, (int, float)) and math.isfinite(v) and 0.0 <= v <= 1.0):
                raise InvalidStats(f"{name}={v!r} must be a fraction in [0, 1]")

    @property
    def excluded(self) -> bool:
        return self.p_m == 1.0 and self.p_s == 1.0

    def check_usable(self):
        if self.excluded:
            raise ExcludedConfiguration("missing statistics p_m=p_s=1 remove every modality and are excluded")
        return self

    def __str__(self):
        return f"{self.p_m:g}/{self.p_s:g}"


@dataclass(frozen=True, eq=False)
class MissingMask:
    """Binary samples x modalities availability matrix; 0 marks a missing modality."""

    entries: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.entries)
        if arr.ndim != 2:
            raise ShapeMismatch(f"mask must be 2-D, got shape {arr.shape}")
        if not np.isin(arr, (0, 1)).all():
            raise ValueError("mask entries must be 0 or 1")
        arr = arr.astype(np.uint8)
        arr.setflags(write=False)
        object.__setattr__(self, "entries", arr)

    @property
    def n_samples(self) -> int:
        return self.entries.shape[0]

    @property
    def n_modalities(self) -> int:
        return self.entries.shape[1]

    @property
    def shape(self):
        return self.entries.shape

    def available(self) -> np.ndarray:
        return self.entries.astype(bool)

    def subset(self, indices) -> MissingMask:
        return MissingMask(self.entries[np.asarray(indices, dtype=np.int64)])

    @classmethod
    def full(cls, n_samples: int, n_modalities: int) -> MissingMask:
        return cls(np.ones((n_samples, n_modalities), dtype=np.uint8))

    def __eq__(self, other):
        if not isinstance(other, MissingMask):
            return NotImplemented
        return self.shape == other.shape and bool(np.array_equal(self.entries, other.entries))

    def __hash__(self):
        return hash((self.shape, self.entries.tobytes()))


def make_missing_mask(n_samples: int, n_modalities: int, stats: MissingStats, seed: int) -> MissingMask:
    """Build a mask with exactly round(p_s*n) affected rows, each missing round(p_m*M) modalities.

    Affected rows and the missing columns inside each row are drawn uniformly at
    random (columns independently per row). When p_m < 1 the per-row count is
    capped at M - 1 so every sample keeps at least one modality.
    """
    if not isinstance(stats, MissingStats):
        stats = MissingStats(*stats)
    stats.check_usable()
    if n_samples < 1:
        raise ShapeMismatch(f"n_samples must be >= 1, got {n_samples}")
    if n_modalities < 2:
        raise ShapeMismatch(f"n_modalities must be >= 2, got {n_modalities}")

    n_rows = min(round_half_up(stats.p_s * n_samples), n_samples)
    n_zero = min(round_half_up(stats.p_m * n_modalities), n_modalities)
    if stats.p_m < 1.0:
        n_zero = min(n_zero, n_modalities - 1)

    entries = np.ones((n_samples, n_modalities), dtype=np.uint8)
    if n_rows == 0 or n_zero == 0:
        return MissingMask(entries)
    rng = np.random.default_rng(seed)
    rows = np.sort(rng.choice(n_samples, size=n_rows, replace=False))
    for r in rows:
        cols = rng.choice(n_modalities, size=n_zero, replace=False)
        entries[r, cols] = 0
    return MissingMask(entries)


def missing_degree(stats: MissingStats) -> float:
    return stats.p_m * stats.p_s


def apply_mask(dataset, mask: MissingMask):
    """Zero the masked modality slots of ``dataset`` and attach the mask as availability.

    An availability mask already on the dataset is intersected with ``mask``.
    """
    n = dataset.n_samples
    m = len(dataset.modalities)
    if mask.shape != (n, m):
        raise ShapeMismatch(f"mask shape {mask.shape} does not match dataset ({n}, {m})")
    avail = mask.entries
    if dataset.availability is not None:
        avail = avail & dataset.availability.entries
    features = []
    for j, x in enumerate(dataset.features):
        keep = avail[:, j].astype(bool)
        if keep.all():
            features.append(x)
            continue
        y = x.copy()
        y[~keep] = 0.0
        y.setflags(write=False)
        features.append(y)
    return dataclasses.replace(dataset, features=tuple(features), availability=MissingMask(avail))


def save_mask(mask: MissingMask, path) -> None:
    lines = [",".join(str(int(v)) for v in row) for row in mask.entries]
    Path(path).write_text("".join(line + "\n" for line in lines), encoding="utf-8")


def load_mask(path) -> MissingMask:
    path = Path(path)
    rows = []
    width = None
    with path.open(encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line:
                raise FormatError("empty mask row", path, lineno)
            try:
                row = [int(tok) for tok in line.split(",")]
            except ValueError:
                raise FormatError(f"non-integer mask entry in {line!r}", path, lineno) from None
            if any(v not in (0, 1) for v in row):
                raise FormatError("mask entries must be 0 or 1", path, lineno)
            if width is None:
                width = len(row)
            elif len(row) != width:
                raise FormatError(f"expected {width} columns, got {len(row)}", path, lineno)
            rows.append(row)
    if not rows:
        raise FormatError("mask file is empty", path)
    return MissingMask(np.array(rows, dtype=np.uint8))
