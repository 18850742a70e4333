"""Datasets: pinwheel generation, CSV ingestion, standardization and splits."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

__all__ = [
    "DataError",
    "Dataset",
    "Standardization",
    "PinwheelParams",
    "generate_pinwheel",
    "load_csv",
    "write_csv",
    "standardize",
    "stratified_split",
    "stratified_order",
    "doubling_schedule",
]

CONSTANT_STD = 1e-12


class DataError(ValueError):
    """Malformed or unusable input data."""


@dataclass(frozen=True)
class Standardization:
    mean: np.ndarray
    std: np.ndarray

    def apply(self, features: np.ndarray) -> np.ndarray:
        scale = np.where(self.std < CONSTANT_STD, 1.0, self.std)
        return (features - self.mean) / scale

    def to_dict(self):
        return {"mean": self.mean.tolist(), "std": self.std.tolist()}

    @classmethod
    def from_dict(cls, d):
        return cls(np.asarray(d["mean"], dtype=float), np.asarray(d["std"], dtype=float))


@dataclass(frozen=True)
class Dataset:
    features: np.ndarray
    labels: np.ndarray
    class_names: tuple[str, ...] | None = None
    standardization: Standardization | None = None
    num_classes: int | None = None
    seed: int | None = None
    indices: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        features = np.asarray(self.features, dtype=float)
        labels = np.asarray(self.labels, dtype=int)
        if features.ndim != 2 or labels.shape != (features.shape[0],):
            raise DataError("features must be (N, d) with one label per row")
        if not np.all(np.isfinite(features)):
            raise DataError("features contain non-finite values")
        num_classes = self.num_classes
        if num_classes is None:
            if self.class_names is not None:
                num_classes = len(self.class_names)
            else:
                num_classes = int(labels.max()) + 1 if labels.size else 0
        if labels.size and (labels.min() < 0 or labels.max() >= num_classes):
            raise DataError("labels out of range")
        indices = np.arange(len(labels)) if self.indices is None else np.asarray(self.indices)
        object.__setattr__(self, "features", features)
        object.__setattr__(self, "labels", labels)
        object.__setattr__(self, "num_classes", int(num_classes))
        object.__setattr__(self, "indices", indices)

    def __len__(self):
        return self.labels.shape[0]

    @property
    def d(self) -> int:
        return self.features.shape[1]

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx, dtype=int)
        return replace(self, features=self.features[idx], labels=self.labels[idx], indices=self.indices[idx])

    def manifest(self) -> dict:
        return {
            "n": len(self),
            "d": self.d,
            "L": self.num_classes,
            "class_names": list(self.class_names) if self.class_names is not None else None,
            "standardization": self.standardization.to_dict() if self.standardization else None,
            "seed": self.seed,
        }

    def write_manifest(self, path) -> None:
        Path(path).write_text(json.dumps(self.manifest(), indent=2))


@dataclass(frozen=True)
class PinwheelParams:
    num_clusters: int = 5
    radial_deviation: float = 0.7
    tangential_deviation: float = 0.3
    angular_rate: float = 0.2
    points_per_cluster: int = 420
    seed: int = 0


def generate_pinwheel(p: PinwheelParams = PinwheelParams()) -> Dataset:
    """Spiral arms around the origin, one per class.

    A point starts at ``(1 + r, t)`` with ``r ~ N(0, radial^2)`` and
    ``t ~ N(0, tangential^2)`` and is rotated by
    ``2 pi c / C + rate * exp(1 + r)``. Rows are shuffled.
    """
    rng = np.random.default_rng(p.seed)
    n = p.num_clusters * p.points_per_cluster
    labels = np.repeat(np.arange(p.num_clusters), p.points_per_cluster)
    noise = rng.standard_normal((n, 2))
    radial = 1.0 + p.radial_deviation * noise[:, 0]
    tangential = p.tangential_deviation * noise[:, 1]
    base = 2 * np.pi * labels / p.num_clusters
    angle = base + p.angular_rate * np.exp(radial)
    cos, sin = np.cos(angle), np.sin(angle)
    points = np.column_stack([cos * radial - sin * tangential, sin * radial + cos * tangential])
    order = rng.permutation(n)
    return Dataset(
        points[order],
        labels[order],
        tuple(str(c) for c in range(p.num_clusters)),
        num_classes=p.num_clusters,
        seed=p.seed,
    )


def _resolve_label_column(header, label_column, ncols):
    if label_column in (None, "last", -1):
        return ncols - 1
    if isinstance(label_column, int):
        return label_column
    if header is None:
        raise DataError("a named label column requires a header row")
    try:
        return header.index(label_column)
    except ValueError:
        raise DataError(f"label column {label_column!r} not in header {header}") from None


def load_csv(path, label_column="last", has_header: bool = True, class_names=None) -> Dataset:
    """Read numeric features and a label column from a UTF-8 CSV file.

    Labels map to indices by first appearance unless ``class_names`` is given,
    in which case that mapping is used and unknown labels are rejected.
    """
    path = Path(path)
    if not path.exists():
        raise DataError(f"no such file: {path}")
    with path.open(newline="", encoding="utf-8") as fh:
        rows = [r for r in csv.reader(fh) if r and any(cell.strip() for cell in r)]
    header = None
    first_row = 1
    if has_header:
        if not rows:
            raise DataError(f"{path}: empty file")
        header = [c.strip() for c in rows[0]]
        rows = rows[1:]
        first_row = 2
    if not rows:
        raise DataError(f"{path}: no data rows")
    ncols = len(header) if header is not None else len(rows[0])
    col = _resolve_label_column(header, label_column, ncols)

    mapping = {} if class_names is None else {name: i for i, name in enumerate(class_names)}
    features, labels, bad = [], [], []
    for offset, row in enumerate(rows):
        lineno = first_row + offset
        if len(row) != ncols:
            bad.append(f"row {lineno}: expected {ncols} fields, got {len(row)}")
            continue
        label = row[col].strip()
        try:
            values = [float(v) for i, v in enumerate(row) if i != col]
        except ValueError:
            bad.append(f"row {lineno}: non-numeric feature")
            continue
        if label not in mapping:
            if class_names is not None:
                bad.append(f"row {lineno}: unknown label {label!r}")
                continue
            mapping[label] = len(mapping)
        features.append(values)
        labels.append(mapping[label])
    if bad:
        shown = "; ".join(bad[:10])
        more = f" (+{len(bad) - 10} more)" if len(bad) > 10 else ""
        raise DataError(f"{path}: {shown}{more}")
    names = tuple(sorted(mapping, key=mapping.get))
    return Dataset(np.array(features, dtype=float), np.array(labels), names)


def write_csv(ds: Dataset, path, header: bool = True) -> None:
    names = ds.class_names or tuple(str(i) for i in range(ds.num_classes))
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        if header:
            w.writerow([f"x{i + 1}" for i in range(ds.d)] + ["label"])
        for x, y in zip(ds.features, ds.labels):
            w.writerow([repr(float(v)) for v in x] + [names[y]])


def standardize(train: Dataset, others=()):
    """Z-score every dataset with the training mean and std.

    Features whose training std is below 1e-12 are centered only.
    """
    if len(train) == 0:
        raise DataError("cannot standardize with an empty training set")
    st = Standardization(train.features.mean(axis=0), train.features.std(axis=0))
    out = [replace(ds, features=st.apply(ds.features), standardization=st) for ds in (train, *others)]
    return out[0], out[1:]


def _largest_remainder(quotas, total, caps):
    base = np.minimum(np.floor(quotas).astype(int), caps)
    rest = int(total - base.sum())
    # hand out the remaining units by remainder, skipping classes at their cap
    order = np.argsort(-(quotas - base), kind="stable")
    while rest > 0:
        for i in order:
            if rest and base[i] < caps[i]:
                base[i] += 1
                rest -= 1
    return base


def stratified_split(ds: Dataset, test_fraction=None, seed: int = 0, test_size: int | None = None):
    """Split into (train, test) keeping class proportions.

    Exactly one of ``test_fraction`` and ``test_size`` is used; per-class test
    counts follow the largest-remainder rule.
    """
    classes, counts = np.unique(ds.labels, return_counts=True)
    if np.any(counts < 2):
        raise DataError(f"classes {classes[counts < 2].tolist()} have fewer than 2 members")
    n = len(ds)
    if test_size is None:
        if test_fraction is None or not 0 < test_fraction < 1:
            raise DataError("test_fraction must lie in (0, 1)")
        test_size = int(round(test_fraction * n))
    if not 0 < test_size < n:
        raise DataError("test size must leave both parts nonempty")
    if test_size > n - len(classes):
        raise DataError("test size must leave every class a training row")
    per_class = _largest_remainder(counts * test_size / n, test_size, counts - 1)
    rng = np.random.default_rng(seed)
    test_idx = []
    for c, k in zip(classes, per_class):
        members = np.flatnonzero(ds.labels == c)
        test_idx.extend(rng.choice(members, size=k, replace=False).tolist())
    test_mask = np.zeros(n, dtype=bool)
    test_mask[test_idx] = True
    return ds.subset(np.flatnonzero(~test_mask)), ds.subset(np.flatnonzero(test_mask))


def stratified_order(labels, seed: int = 0) -> np.ndarray:
    """Row order whose every prefix tracks the class proportions.

    Members are shuffled within class, then interleaved by always taking the
    class whose count lags its proportional share the most.
    """
    labels = np.asarray(labels)
    rng = np.random.default_rng(seed)
    classes, counts = np.unique(labels, return_counts=True)
    pools = [list(rng.permutation(np.flatnonzero(labels == c))) for c in classes]
    share = counts / counts.sum()
    taken = np.zeros(len(classes))
    order = []
    for step in range(1, len(labels) + 1):
        deficit = step * share - taken
        deficit[taken >= counts] = -np.inf
        c = int(np.argmax(deficit))
        order.append(pools[c][int(taken[c])])
        taken[c] += 1
    return np.array(order, dtype=int)


def doubling_schedule(train: Dataset, sizes, seed: int = 0):
    """Nested class-balanced subsets of ``train`` with the requested sizes."""
    sizes = [int(s) for s in sizes]
    if any(s <= 0 or s > len(train) for s in sizes):
        raise DataError(f"sizes must lie in [1, {len(train)}]")
    order = stratified_order(train.labels, seed)
    return [train.subset(np.sort(order[:s])) for s in sizes]
