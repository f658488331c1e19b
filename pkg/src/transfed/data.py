"""Sensor-stream loading, averaged-window construction and client partitioning.

Two raw formats are supported:

* own CSV, header ``timestamp_ms,ax,ay,az,gx,gy,gz,mx,my,mz,label``:
  nine feature columns (tri-axial accelerometer, gyroscope, magnetometer)
  and an integer activity label 0-14, sampled at 115 Hz.
* WISDM text lines ``user,activity,timestamp,x,y,z;`` with three features
  and six named activities, sampled at 20 Hz.

Windowing averages each fixed-duration frame of raw samples feature-wise
into one row and stacks ``window_rows`` consecutive rows into one training
window. Windows never mix labels: the stream is cut into maximal
constant-label runs first and frames never cross a cut.
"""

from __future__ import annotations

import csv
import struct
from dataclasses import dataclass

import numpy as np

from . import wire
from .wire import ProtocolError


class DataError(ValueError):
    """Unreadable or malformed input data."""


OWN_HEADER = ("timestamp_ms", "ax", "ay", "az", "gx", "gy", "gz",
              "mx", "my", "mz", "label")

OWN_ACTIVITY_NAMES = (
    "Standing", "Sitting", "Walking", "Jogging", "Going Upstairs",
    "Going Downstairs", "Eating", "Writing", "Using Laptop", "Washing Face",
    "Washing Hand", "Swiping", "Vacuuming", "Dusting", "Brushing Teeth",
)

WISDM_ACTIVITY_IDS = {
    "Walking": 0, "Jogging": 1, "Upstairs": 2,
    "Downstairs": 3, "Sitting": 4, "Standing": 5,
}

WISDM_ACTIVITY_NAMES = (
    "Walking", "Jogging", "Going Upstairs", "Going Downstairs",
    "Sitting", "Standing",
)


@dataclass
class RawSeries:
    """Time-ordered raw samples: (n, F) features plus per-sample labels."""

    features: np.ndarray
    labels: np.ndarray
    sample_rate_hz: float = 115.0

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.features.ndim != 2 or len(self.labels) != len(self.features):
            raise DataError("features must be (n, F) with one label per row")
        if self.sample_rate_hz <= 0:
            raise DataError("sample_rate_hz must be positive")

    def __len__(self) -> int:
        return len(self.labels)


@dataclass
class Dataset:
    """Windowed samples: x is (n, W, F) float64, y is (n,) class ids."""

    x: np.ndarray
    y: np.ndarray
    source: str = ""

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=np.float64)
        self.y = np.asarray(self.y, dtype=np.int64)
        if self.x.ndim != 3 or self.y.shape != (self.x.shape[0],):
            raise DataError(f"bad dataset shapes {self.x.shape} / {self.y.shape}")

    def __len__(self) -> int:
        return int(self.x.shape[0])

    @property
    def window_shape(self) -> tuple[int, int]:
        return self.x.shape[1], self.x.shape[2]

    def class_counts(self, n_classes: int | None = None) -> np.ndarray:
        n = n_classes if n_classes is not None else (int(self.y.max()) + 1 if len(self) else 0)
        return np.bincount(self.y, minlength=n)

    def subset(self, indices, source: str | None = None) -> "Dataset":
        indices = np.asarray(indices, dtype=np.int64)
        return Dataset(self.x[indices], self.y[indices],
                       self.source if source is None else source)


def _finish_load(rows, labels, malformed, path, threshold):
    total = len(rows) + malformed
    if total and malformed / total > threshold:
        raise DataError(
            f"{path}: {malformed} of {total} rows malformed "
            f"(threshold {threshold:.0%})"
        )
    if not rows:
        raise DataError(f"{path}: no usable rows")
    return np.array(rows, dtype=np.float64), np.array(labels, dtype=np.int64), malformed


def load_own_csv(path, malformed_threshold: float = 0.01,
                 sample_rate_hz: float = 115.0) -> RawSeries:
    """Load the 15-activity 9-feature CSV format.

    Unparseable rows are counted and tolerated up to ``malformed_threshold``
    of the file; an out-of-range label is always an error naming the row.
    """
    try:
        fh = open(path, newline="")
    except OSError as exc:
        raise DataError(f"cannot open {path}: {exc}") from exc
    rows: list[list[float]] = []
    labels: list[int] = []
    malformed = 0
    with fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or tuple(h.strip() for h in header) != OWN_HEADER:
            raise DataError(
                f"{path}: bad header; expected {','.join(OWN_HEADER)}"
            )
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != len(OWN_HEADER):
                malformed += 1
                continue
            try:
                feats = [float(c) for c in row[1:10]]
                label = int(row[10])
            except ValueError:
                malformed += 1
                continue
            if not 0 <= label < len(OWN_ACTIVITY_NAMES):
                raise DataError(f"{path}: label {label} out of range on row {lineno}")
            rows.append(feats)
            labels.append(label)
    feats, labs, _ = _finish_load(rows, labels, malformed, path, malformed_threshold)
    return RawSeries(feats, labs, sample_rate_hz)


def load_wisdm(path, malformed_threshold: float = 0.01,
               sample_rate_hz: float = 20.0) -> RawSeries:
    """Load WISDM raw text: ``user,activity,timestamp,x,y,z;`` lines.

    Trailing semicolons and blank lines are tolerated; an unknown activity
    string is always an error.
    """
    try:
        fh = open(path)
    except OSError as exc:
        raise DataError(f"cannot open {path}: {exc}") from exc
    rows: list[list[float]] = []
    labels: list[int] = []
    malformed = 0
    with fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip().rstrip(";").strip()
            if not line:
                continue
            parts = line.split(",")
            if len(parts) != 6:
                malformed += 1
                continue
            activity = parts[1].strip()
            if activity not in WISDM_ACTIVITY_IDS:
                raise DataError(
                    f"{path}: unknown activity {activity!r} on line {lineno}"
                )
            try:
                xyz = [float(p) for p in parts[3:6]]
            except ValueError:
                malformed += 1
                continue
            rows.append(xyz)
            labels.append(WISDM_ACTIVITY_IDS[activity])
    feats, labs, _ = _finish_load(rows, labels, malformed, path, malformed_threshold)
    return RawSeries(feats, labs, sample_rate_hz)


def _label_runs(labels: np.ndarray):
    """Yield (start, end, label) for maximal constant-label stretches."""
    n = len(labels)
    start = 0
    for i in range(1, n + 1):
        if i == n or labels[i] != labels[start]:
            yield start, i, int(labels[start])
            start = i


def make_windows(series: RawSeries, window_rows: int,
                 frame_seconds: float = 2.0,
                 stride_rows: int | None = None) -> Dataset:
    """Build averaged windows from a raw series.

    Each averaged row is the feature-wise mean of ``round(frame_seconds *
    sample_rate)`` consecutive raw samples (230 at 115 Hz and 2 s frames);
    a window stacks ``window_rows`` consecutive averaged rows, advancing by
    ``stride_rows`` rows between windows (default: half a window). Label
    runs too short for a single window contribute nothing.
    """
    if window_rows < 1:
        raise DataError("window_rows must be positive")
    frame_len = int(round(frame_seconds * series.sample_rate_hz))
    if frame_len < 1:
        raise DataError("frame covers no samples; increase frame_seconds")
    if stride_rows is None:
        stride_rows = max(1, window_rows // 2)
    if stride_rows < 1:
        raise DataError("stride_rows must be positive")

    windows = []
    labels = []
    for start, end, label in _label_runs(series.labels):
        n_frames = (end - start) // frame_len
        if n_frames < window_rows:
            continue
        seg = series.features[start : start + n_frames * frame_len]
        averaged = seg.reshape(n_frames, frame_len, -1).mean(axis=1)
        for row0 in range(0, n_frames - window_rows + 1, stride_rows):
            windows.append(averaged[row0 : row0 + window_rows])
            labels.append(label)
    if not windows:
        return Dataset(
            np.empty((0, window_rows, series.features.shape[1])),
            np.empty(0, dtype=np.int64),
        )
    return Dataset(np.stack(windows), np.array(labels, dtype=np.int64))


def split(dataset: Dataset, train_frac: float, val_frac: float,
          test_frac: float, seed: int, stratified: bool = True):
    """Disjoint, exhaustive train/val/test split, stratified per class.

    Fractions must sum to 1. Deterministic for a given seed.
    """
    if abs(train_frac + val_frac + test_frac - 1.0) > 1e-9:
        raise DataError("split fractions must sum to 1")
    rng = np.random.default_rng(seed)
    n = len(dataset)
    buckets: list[list[np.ndarray]] = [[], [], []]
    if stratified:
        groups = [np.flatnonzero(dataset.y == c) for c in np.unique(dataset.y)]
        for idx in groups:
            if len(idx) == 0:
                raise DataError("empty class under stratification")
            perm = idx[rng.permutation(len(idx))]
            a = int(np.floor(len(idx) * train_frac))
            b = int(np.floor(len(idx) * (train_frac + val_frac)))
            buckets[0].append(perm[:a])
            buckets[1].append(perm[a:b])
            buckets[2].append(perm[b:])
    else:
        perm = rng.permutation(n)
        a = int(np.floor(n * train_frac))
        b = int(np.floor(n * (train_frac + val_frac)))
        buckets[0].append(perm[:a])
        buckets[1].append(perm[a:b])
        buckets[2].append(perm[b:])
    parts = []
    for part in buckets:
        idx = np.sort(np.concatenate(part)) if part else np.empty(0, np.int64)
        parts.append(dataset.subset(idx))
    return tuple(parts)


@dataclass
class PartitionSpec:
    """How to skew the data across federated clients.

    Client k keeps the full class mix except for its reduced class, which
    loses a ``reduction`` fraction of windows (40-50% unless forced).
    """

    n_clients: int = 5
    reduction: float = 0.5
    reduced_classes: tuple[int, ...] | None = None  # default: client k -> class k
    mode: str = "replicate_reduce"
    seed: int = 0
    force: bool = False

    def __post_init__(self):
        if self.n_clients < 1:
            raise DataError("n_clients must be at least 1")
        if self.mode not in ("replicate_reduce", "disjoint_reduce"):
            raise DataError(f"unknown partition mode {self.mode!r}")
        if not self.force and not 0.40 <= self.reduction <= 0.50:
            raise DataError(
                f"reduction {self.reduction} outside [0.40, 0.50]; "
                "pass force=True to override"
            )

    def reduced_class(self, client: int) -> int:
        if self.reduced_classes is None:
            return client
        return self.reduced_classes[client]


def partition_noniid(dataset: Dataset, spec: PartitionSpec) -> list[Dataset]:
    """Produce the per-client skewed datasets.

    replicate_reduce: every client sees the full dataset minus
    ``floor(reduction * count)`` windows of its reduced class, dropped
    uniformly at random. disjoint_reduce: windows are first dealt round-robin
    per class, then the same per-client reduction applies.
    """
    rng = np.random.default_rng(spec.seed)
    counts = dataset.class_counts()
    clients: list[Dataset] = []
    if spec.mode == "replicate_reduce":
        base = [np.arange(len(dataset))] * spec.n_clients
    else:
        base = [[] for _ in range(spec.n_clients)]
        for c in np.unique(dataset.y):
            idx = np.flatnonzero(dataset.y == c)
            for k in range(spec.n_clients):
                base[k].append(idx[k :: spec.n_clients])
        base = [np.sort(np.concatenate(parts)) if parts else np.empty(0, np.int64)
                for parts in base]

    for k in range(spec.n_clients):
        target = spec.reduced_class(k)
        if target >= len(counts) or counts[target] == 0:
            raise DataError(f"reduced class {target} absent from the dataset")
        keep = np.asarray(base[k])
        local_y = dataset.y[keep]
        in_class = np.flatnonzero(local_y == target)
        n_drop = int(np.floor(spec.reduction * len(in_class)))
        drop = rng.choice(in_class, size=n_drop, replace=False)
        mask = np.ones(len(keep), dtype=bool)
        mask[drop] = False
        clients.append(dataset.subset(keep[mask], source=f"client{k}"))
    return clients


@dataclass
class AugmentConfig:
    """Jitter/scale settings; feature_std comes from the training split."""

    jitter: float = 0.01
    scale_range: float = 0.1
    feature_std: np.ndarray | None = None


def feature_std(dataset: Dataset) -> np.ndarray:
    """Per-feature standard deviation over every row of every window."""
    return dataset.x.reshape(-1, dataset.x.shape[2]).std(axis=0)


def augment(window: np.ndarray, rng: np.random.Generator,
            cfg: AugmentConfig) -> np.ndarray:
    """Jitter and rescale one window; the label is untouched.

    Adds zero-mean Gaussian noise with per-feature sigma
    ``jitter * feature_std`` and multiplies the whole window by a scalar
    drawn uniform from [1 - scale_range, 1 + scale_range]. With both
    settings zero this is the identity.
    """
    window = np.asarray(window, dtype=np.float64)
    std = cfg.feature_std if cfg.feature_std is not None else np.ones(window.shape[-1])
    out = window + rng.normal(0.0, 1.0, size=window.shape) * (cfg.jitter * std)
    out *= rng.uniform(1.0 - cfg.scale_range, 1.0 + cfg.scale_range)
    return out


def augment_batch(batch: np.ndarray, rng: np.random.Generator,
                  cfg: AugmentConfig) -> np.ndarray:
    return np.stack([augment(w, rng, cfg) for w in batch])


def synthetic_windows(n_per_class: int, n_classes: int, window_rows: int,
                      features: int, seed: int = 0,
                      noise: float = 0.25) -> Dataset:
    """Separable synthetic windows: per-class Gaussian feature signatures.

    Class c draws rows around a fixed random mean vector, so classes are
    linearly separable for reasonable noise levels. Used by tests and demos.
    """
    rng = np.random.default_rng(seed)
    signatures = rng.normal(0.0, 1.0, size=(n_classes, features))
    x = np.empty((n_classes * n_per_class, window_rows, features))
    y = np.empty(n_classes * n_per_class, dtype=np.int64)
    for c in range(n_classes):
        lo = c * n_per_class
        x[lo : lo + n_per_class] = signatures[c] + rng.normal(
            0.0, noise, size=(n_per_class, window_rows, features)
        )
        y[lo : lo + n_per_class] = c
    perm = rng.permutation(len(y))
    return Dataset(x[perm], y[perm], source="synthetic")


def save_windows(path, dataset: Dataset) -> None:
    """Write a window archive (.tfw); see the wire module for the layout."""
    with open(path, "wb") as fh:
        fh.write(wire.ARCHIVE_MAGIC)
        fh.write(struct.pack("<BI", wire.VERSION, len(dataset)))
        for i in range(len(dataset)):
            fh.write(wire.encode_tensor("window", dataset.x[i]))
            fh.write(struct.pack("<H", int(dataset.y[i])))


def load_windows(path) -> Dataset:
    try:
        with open(path, "rb") as fh:
            buf = fh.read()
    except OSError as exc:
        raise DataError(f"cannot open {path}: {exc}") from exc
    if buf[:4] != wire.ARCHIVE_MAGIC:
        raise ProtocolError(f"{path}: not a window archive")
    if len(buf) < 9:
        raise ProtocolError(f"{path}: truncated archive header")
    version, count = struct.unpack("<BI", buf[4:9])
    if version != wire.VERSION:
        raise ProtocolError(f"{path}: unsupported archive version {version}")
    cur = wire._Cursor(buf[9:])
    windows = []
    labels = []
    for _ in range(count):
        _, values = wire.decode_tensor(cur)
        windows.append(values)
        labels.append(cur.u16())
    if not cur.done():
        raise ProtocolError(f"{path}: trailing bytes after {count} records")
    if not windows:
        raise DataError(f"{path}: empty archive")
    return Dataset(np.stack(windows), np.array(labels, dtype=np.int64),
                   source=str(path))


def write_manifest(path, dataset: Dataset, n_classes: int | None = None) -> None:
    """Per-class window counts as ``class_id,count`` CSV."""
    counts = dataset.class_counts(n_classes)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["class_id", "count"])
        for c, n in enumerate(counts):
            writer.writerow([c, int(n)])


def read_manifest(path) -> dict[int, int]:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if header != ["class_id", "count"]:
            raise DataError(f"{path}: bad manifest header")
        return {int(row[0]): int(row[1]) for row in reader if row}
