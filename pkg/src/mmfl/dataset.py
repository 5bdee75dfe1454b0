"""Multimodal datasets: synthetic generation, on-disk format, splitting and client partitioning."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .errors import Degenerate, FormatError, InvalidShape, ShapeMismatch
from .masking import MissingMask, load_mask, round_half_up, save_mask

MANIFEST = "manifest.txt"
LABELS = "labels.csv"
MASK = "mask.csv"


def _readonly(a):
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class MultimodalDataset:
    """Per-modality feature matrices sharing one label vector.

    ``availability`` is the attached missing mask (None means every modality is
    present). Arrays are made read-only so datasets can be shared freely.
    """

    modalities: tuple
    features: tuple
    labels: np.ndarray
    n_classes: int
    availability: Optional[MissingMask] = None

    def __post_init__(self):
        labels = np.asarray(self.labels, dtype=np.int64)
        if labels.ndim != 1:
            raise InvalidShape("labels must be one-dimensional")
        feats = []
        for name, x in zip(self.modalities, self.features):
            x = np.asarray(x, dtype=np.float64)
            if x.ndim != 2 or x.shape[0] != labels.shape[0]:
                raise InvalidShape(
                    f"modality {name!r} has shape {x.shape}, expected ({labels.shape[0]}, feature_len)"
                )
            feats.append(_readonly(x) if x.flags.writeable else x)
        if len(feats) != len(self.modalities):
            raise InvalidShape("one feature matrix is required per modality")
        if len(set(self.modalities)) != len(self.modalities):
            raise InvalidShape("modality names must be unique")
        if self.n_classes < 1:
            raise InvalidShape("n_classes must be >= 1")
        if labels.size and (labels.min() < 0 or labels.max() >= self.n_classes):
            raise InvalidShape(f"labels must lie in [0, {self.n_classes})")
        if self.availability is not None and self.availability.shape != (labels.shape[0], len(feats)):
            raise ShapeMismatch(
                f"availability shape {self.availability.shape} does not match ({labels.shape[0]}, {len(feats)})"
            )
        object.__setattr__(self, "modalities", tuple(self.modalities))
        object.__setattr__(self, "features", tuple(feats))
        object.__setattr__(self, "labels", _readonly(labels) if labels.flags.writeable else labels)

    @property
    def n_samples(self) -> int:
        return int(self.labels.shape[0])

    @property
    def n_modalities(self) -> int:
        return len(self.modalities)

    @property
    def feature_lens(self) -> tuple:
        return tuple(x.shape[1] for x in self.features)

    def available(self) -> np.ndarray:
        """Boolean (n_samples, n_modalities) availability, all True when no mask is attached."""
        if self.availability is None:
            return np.ones((self.n_samples, self.n_modalities), dtype=bool)
        return self.availability.available()

    def subset(self, indices) -> MultimodalDataset:
        idx = np.asarray(indices, dtype=np.int64)
        return MultimodalDataset(
            modalities=self.modalities,
            features=tuple(x[idx] for x in self.features),
            labels=self.labels[idx],
            n_classes=self.n_classes,
            availability=None if self.availability is None else self.availability.subset(idx),
        )

    def without_mask(self) -> MultimodalDataset:
        return dataclasses.replace(self, availability=None)


@dataclass(frozen=True)
class Partition:
    """Disjoint per-client sample index lists."""

    assignments: tuple

    @property
    def sizes(self) -> list:
        return [len(a) for a in self.assignments]

    def __len__(self):
        return len(self.assignments)


def synthetic_class_means(n_modalities, feature_len, n_classes, seed, latent_dim=None):
    """Target class-conditional means of :func:`generate_synthetic`, shape (M, n_classes, feature_len)."""
    latent_dim = latent_dim or feature_len
    proto = np.random.default_rng([seed, 1]).standard_normal((n_classes, latent_dim))
    means = []
    for m in range(n_modalities):
        view = np.random.default_rng([seed, 2, m]).standard_normal((feature_len, latent_dim))
        means.append(proto @ view.T / np.sqrt(latent_dim))
    return np.stack(means)


def generate_synthetic(
    n_samples: int,
    n_modalities: int,
    feature_len: int,
    n_classes: int,
    class_separation: float,
    seed: int,
    latent_dim: Optional[int] = None,
) -> MultimodalDataset:
    """Draw a balanced synthetic classification set with mutually informative modalities.

    Each class has a latent prototype; modality m observes a fixed random linear
    view of it plus Gaussian noise with standard deviation ``1 / class_separation``.
    Labels come from their own random stream, so they do not depend on the
    number or order of modalities.
    """
    if min(n_samples, feature_len, n_classes) < 1:
        raise InvalidShape("n_samples, feature_len and n_classes must all be >= 1")
    if n_modalities < 2:
        raise InvalidShape(f"need at least 2 modalities, got {n_modalities}")
    if not class_separation > 0:
        raise InvalidShape("class_separation must be positive")

    labels = np.arange(n_samples, dtype=np.int64) % n_classes
    np.random.default_rng([seed, 0]).shuffle(labels)
    means = synthetic_class_means(n_modalities, feature_len, n_classes, seed, latent_dim)
    noise_std = 1.0 / class_separation
    features = []
    for m in range(n_modalities):
        noise = np.random.default_rng([seed, 3, m]).standard_normal((n_samples, feature_len))
        features.append(means[m][labels] + noise_std * noise)
    return MultimodalDataset(
        modalities=tuple(f"m{m}" for m in range(n_modalities)),
        features=tuple(features),
        labels=labels,
        n_classes=n_classes,
    )


def stratified_split_indices(labels, test_fraction: float, seed: int):
    if not 0.0 < test_fraction < 1.0:
        raise ValueError(f"test_fraction must lie in (0, 1), got {test_fraction}")
    labels = np.asarray(labels)
    rng = np.random.default_rng(seed)
    train, test = [], []
    for c in np.unique(labels):
        idx = np.flatnonzero(labels == c)
        idx = idx[rng.permutation(idx.size)]
        n_test = round_half_up(test_fraction * idx.size)
        test.append(idx[:n_test])
        train.append(idx[n_test:])
    return np.sort(np.concatenate(train)), np.sort(np.concatenate(test))


def train_test_split(dataset: MultimodalDataset, test_fraction: float, seed: int):
    """Stratified split; each class contributes round(test_fraction * n_c) test samples."""
    train_idx, test_idx = stratified_split_indices(dataset.labels, test_fraction, seed)
    return dataset.subset(train_idx), dataset.subset(test_idx)


def _n(train) -> int:
    return train if isinstance(train, (int, np.integer)) else train.n_samples


def partition_iid(train, n_clients: int, seed: int) -> Partition:
    """Random disjoint shards whose sizes differ by at most one."""
    if n_clients < 1:
        raise ValueError("n_clients must be >= 1")
    perm = np.random.default_rng(seed).permutation(_n(train))
    return Partition(tuple(np.sort(s) for s in np.array_split(perm, n_clients)))


def largest_remainder(proportions, total: int) -> np.ndarray:
    """Integer counts summing to ``total`` that follow ``proportions`` (Hamilton rounding)."""
    raw = np.asarray(proportions, dtype=np.float64) * total
    counts = np.floor(raw).astype(np.int64)
    short = total - int(counts.sum())
    if short > 0:
        # stable sort keeps lower client index first on equal remainders
        order = np.argsort(-(raw - counts), kind="stable")
        counts[order[:short]] += 1
    return counts


def partition_dirichlet(train, n_clients: int, alpha: float, seed: int, max_tries: int = 100) -> Partition:
    """Label-skewed partition: each class is spread over clients by a Dirichlet(alpha) draw."""
    if n_clients < 1:
        raise ValueError("n_clients must be >= 1")
    if not alpha > 0:
        raise ValueError("alpha must be positive")
    labels = np.asarray(train.labels)
    n = labels.size
    if n < n_clients:
        raise Degenerate(f"cannot give {n_clients} clients a sample each from {n} samples")
    rng = np.random.default_rng(seed)
    classes = np.unique(labels)

    shards = None
    for _ in range(max_tries):
        shards = [[] for _ in range(n_clients)]
        for c in classes:
            idx = np.flatnonzero(labels == c)
            idx = idx[rng.permutation(idx.size)]
            props = rng.dirichlet(np.full(n_clients, alpha))
            if not np.all(np.isfinite(props)) or props.sum() <= 0:
                props = np.full(n_clients, 1.0 / n_clients)
            counts = largest_remainder(props / props.sum(), idx.size)
            start = 0
            for k, cnt in enumerate(counts):
                shards[k].extend(idx[start:start + cnt].tolist())
                start += cnt
        if all(shards):
            break
    else:
        for k in range(n_clients):
            if not shards[k]:
                donor = max(range(n_clients), key=lambda j: (len(shards[j]), -j))
                shards[k].append(shards[donor].pop())
    return Partition(tuple(np.sort(np.asarray(s, dtype=np.int64)) for s in shards))


def _fmt_row(values) -> str:
    return ",".join(repr(float(v)) for v in values)


def save_dataset(dataset: MultimodalDataset, directory) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    manifest = [
        "modalities=" + ",".join(dataset.modalities),
        "feature_len=" + ",".join(str(f) for f in dataset.feature_lens),
        f"n_classes={dataset.n_classes}",
    ]
    (directory / MANIFEST).write_text("\n".join(manifest) + "\n", encoding="utf-8")
    (directory / LABELS).write_text("".join(f"{int(y)}\n" for y in dataset.labels), encoding="utf-8")
    for name, x in zip(dataset.modalities, dataset.features):
        (directory / f"{name}.csv").write_text("".join(_fmt_row(row) + "\n" for row in x), encoding="utf-8")
    if dataset.availability is not None:
        save_mask(dataset.availability, directory / MASK)
    return directory


def _read_manifest(path: Path) -> dict:
    if not path.is_file():
        raise FormatError("manifest file not found", path)
    entries = {}
    for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), start=1):
        if not line.strip() or line.lstrip().startswith("#"):
            continue
        if "=" not in line:
            raise FormatError(f"expected key=value, got {line!r}", path, lineno)
        key, value = (s.strip() for s in line.split("=", 1))
        entries[key] = (value, lineno)
    for key in ("modalities", "feature_len", "n_classes"):
        if key not in entries:
            raise FormatError(f"manifest lacks required key {key!r}", path)
    return entries


def _read_matrix(path: Path, width: int, what: str) -> np.ndarray:
    if not path.is_file():
        raise FormatError(f"file for {what} not found", path)
    rows = []
    with path.open(encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            toks = line.rstrip("\n").split(",")
            if len(toks) != width:
                raise FormatError(f"expected {width} values, got {len(toks)}", path, lineno)
            try:
                rows.append([float(t) for t in toks])
            except ValueError:
                raise FormatError(f"non-numeric value in {line.strip()!r}", path, lineno) from None
    return np.array(rows, dtype=np.float64).reshape(len(rows), width)


def load_dataset(directory) -> MultimodalDataset:
    directory = Path(directory)
    manifest_path = directory / MANIFEST
    entries = _read_manifest(manifest_path)
    names = [s.strip() for s in entries["modalities"][0].split(",") if s.strip()]
    try:
        lens = [int(s) for s in entries["feature_len"][0].split(",")]
        n_classes = int(entries["n_classes"][0])
    except ValueError as exc:
        raise FormatError(f"malformed manifest value ({exc})", manifest_path) from None
    if len(lens) != len(names):
        raise FormatError(
            f"{len(names)} modalities but {len(lens)} feature lengths", manifest_path, entries["feature_len"][1]
        )

    labels_path = directory / LABELS
    if not labels_path.is_file():
        raise FormatError("labels file not found", labels_path)
    labels = []
    for lineno, line in enumerate(labels_path.read_text(encoding="utf-8").splitlines(), start=1):
        try:
            labels.append(int(line.strip()))
        except ValueError:
            raise FormatError(f"label must be an integer, got {line!r}", labels_path, lineno) from None
    labels = np.asarray(labels, dtype=np.int64)
    if labels.size and (labels.min() < 0 or labels.max() >= n_classes):
        bad = int(np.flatnonzero((labels < 0) | (labels >= n_classes))[0]) + 1
        raise FormatError(f"label outside [0, {n_classes})", labels_path, bad)

    features = []
    for name, width in zip(names, lens):
        path = directory / f"{name}.csv"
        if not path.is_file():
            raise FormatError(f"modality {name!r} listed in manifest has no data file", path)
        x = _read_matrix(path, width, f"modality {name!r}")
        if x.shape[0] != labels.size:
            raise FormatError(f"modality {name!r} has {x.shape[0]} rows but there are {labels.size} labels", path)
        features.append(x)

    availability = None
    if (directory / MASK).is_file():
        availability = load_mask(directory / MASK)
        if availability.shape != (labels.size, len(names)):
            raise FormatError(f"mask shape {availability.shape} does not match the data", directory / MASK)
    return MultimodalDataset(tuple(names), tuple(features), labels, n_classes, availability)


def stack_features(dataset: MultimodalDataset, modality_order: Sequence[int] = None) -> np.ndarray:
    """Concatenate modality matrices column-wise (for simple baselines and oracles)."""
    order = range(dataset.n_modalities) if modality_order is None else modality_order
    return np.concatenate([dataset.features[j] for j in order], axis=1)
