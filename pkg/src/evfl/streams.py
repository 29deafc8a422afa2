"""Data streams: loaders, feature partitioning and per-round sampling.

A stream produces one :class:`StreamSample` per round by first drawing a
class from a :class:`ClassSampler` and then a random example of that class
(with replacement), so it never runs dry.
"""

import csv
import gzip
import struct
from dataclasses import dataclass

import numpy as np

from .tensor_math import DimensionError

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


class IdxError(ValueError):
    pass


class BadMagicError(IdxError):
    pass


class TruncatedPayloadError(IdxError):
    pass


class CountMismatchError(IdxError):
    pass


class CsvFormatError(ValueError):
    pass


class EmptyClassError(LookupError):
    pass


def _read_bytes(path):
    opener = gzip.open if str(path).endswith(".gz") else open
    with opener(path, "rb") as f:
        return f.read()


def _parse_idx(path, magic, ndim):
    data = _read_bytes(path)
    if len(data) < 4 + 4 * ndim:
        raise TruncatedPayloadError(f"{path}: header shorter than {4 + 4 * ndim} bytes")
    found = struct.unpack_from(">I", data, 0)[0]
    if found != magic:
        raise BadMagicError(f"{path}: magic 0x{found:08x}, expected 0x{magic:08x}")
    dims = struct.unpack_from(">" + "I" * ndim, data, 4)
    need = int(np.prod(dims))
    payload = data[4 + 4 * ndim:]
    if len(payload) != need:
        raise TruncatedPayloadError(
            f"{path}: header declares {need} payload bytes, found {len(payload)}"
        )
    return np.frombuffer(payload, dtype=np.uint8).reshape(dims)


def normalize_pixels(raw):
    """Map bytes 0..255 to [-1, 1]."""
    return raw.astype(np.float64) / 127.5 - 1.0


def load_idx_images(path):
    """Images as flattened float64 rows scaled to [-1, 1]."""
    raw = _parse_idx(path, IDX_IMAGES_MAGIC, 3)
    return normalize_pixels(raw.reshape(raw.shape[0], -1))


def load_idx_labels(path):
    return _parse_idx(path, IDX_LABELS_MAGIC, 1).astype(np.int64)


def load_idx_pair(images_path, labels_path):
    X = load_idx_images(images_path)
    y = load_idx_labels(labels_path)
    if X.shape[0] != y.shape[0]:
        raise CountMismatchError(f"{X.shape[0]} images but {y.shape[0]} labels")
    return X, y


def read_idx_header(path):
    """Magic and dimension sizes without reading the payload."""
    opener = gzip.open if str(path).endswith(".gz") else open
    with opener(path, "rb") as f:
        head = f.read(4)
        if len(head) < 4:
            raise TruncatedPayloadError(f"{path}: empty file")
        magic = struct.unpack(">I", head)[0]
        ndim = {IDX_IMAGES_MAGIC: 3, IDX_LABELS_MAGIC: 1}.get(magic)
        if ndim is None:
            raise BadMagicError(f"{path}: unknown magic 0x{magic:08x}")
        rest = f.read(4 * ndim)
        if len(rest) < 4 * ndim:
            raise TruncatedPayloadError(f"{path}: truncated header")
        return magic, struct.unpack(">" + "I" * ndim, rest)


def write_idx_images(path, images):
    """Write uint8 images of shape (n, rows, cols)."""
    images = np.asarray(images, dtype=np.uint8)
    opener = gzip.open if str(path).endswith(".gz") else open
    with opener(path, "wb") as f:
        f.write(struct.pack(">IIII", IDX_IMAGES_MAGIC, *images.shape))
        f.write(images.tobytes())


def write_idx_labels(path, labels):
    labels = np.asarray(labels, dtype=np.uint8)
    opener = gzip.open if str(path).endswith(".gz") else open
    with opener(path, "wb") as f:
        f.write(struct.pack(">II", IDX_LABELS_MAGIC, labels.shape[0]))
        f.write(labels.tobytes())


def load_csv(path, label_column=0, class_map=None, skip_header=False,
             stats_rows=10_000, sigma_floor=1e-8):
    """Load a numeric CSV into standardized features and integer labels.

    Standardization uses mean/std of the first ``stats_rows`` rows only.
    ``class_map`` maps raw label values to class indices; by default labels
    are cast to int.
    """
    rows = []
    try:
        f = open(path, newline="")
    except OSError as e:
        raise OSError(f"cannot open CSV {path}: {e.strerror}") from e
    with f:
        reader = csv.reader(f)
        if skip_header:
            next(reader, None)
        width = None
        for lineno, row in enumerate(reader, start=2 if skip_header else 1):
            if not row:
                continue
            if width is None:
                width = len(row)
            elif len(row) != width:
                raise CsvFormatError(
                    f"{path}:{lineno}: ragged row with {len(row)} cells, expected {width}"
                )
            try:
                rows.append([float(c) for c in row])
            except ValueError as e:
                raise CsvFormatError(f"{path}:{lineno}: non-numeric cell ({e})") from None
    if not rows:
        raise CsvFormatError(f"{path}: no data rows")
    table = np.array(rows)
    raw_labels = table[:, label_column]
    X = np.delete(table, label_column, axis=1)
    if class_map is None:
        y = raw_labels.astype(np.int64)
    else:
        y = np.array([class_map[v] for v in raw_labels], dtype=np.int64)
    head = X[:stats_rows]
    mu = head.mean(axis=0)
    sigma = np.maximum(head.std(axis=0), sigma_floor)
    return (X - mu) / sigma, y


@dataclass(frozen=True)
class FeaturePartition:
    """Contiguous feature slices, one per client, given as cut points.

    ``cuts = (0, c_1, ..., dim)``; client ``m`` owns ``[cuts[m], cuts[m+1])``.
    """

    cuts: tuple

    def __post_init__(self):
        cuts = tuple(int(c) for c in self.cuts)
        object.__setattr__(self, "cuts", cuts)
        if len(cuts) < 2 or cuts[0] != 0 or any(b <= a for a, b in zip(cuts, cuts[1:])):
            raise ValueError(f"partition cuts must start at 0 and increase: {cuts}")

    @classmethod
    def even(cls, dim, num_clients):
        """Near-equal contiguous split; earlier clients take the remainder."""
        sizes = [len(a) for a in np.array_split(np.arange(dim), num_clients)]
        return cls(tuple(np.concatenate([[0], np.cumsum(sizes)]).tolist()))

    @property
    def dim(self):
        return self.cuts[-1]

    @property
    def num_clients(self):
        return len(self.cuts) - 1

    @property
    def sizes(self):
        return [b - a for a, b in zip(self.cuts, self.cuts[1:])]

    def slices(self):
        return [slice(a, b) for a, b in zip(self.cuts, self.cuts[1:])]


def partition_features(x, partition):
    if x.shape != (partition.dim,):
        raise DimensionError(
            f"feature vector has shape {x.shape}, partition covers {partition.dim}"
        )
    return [x[s] for s in partition.slices()]


@dataclass
class StreamSample:
    round: int
    parts: list
    label: int


class ClassSampler:
    """Class-prior sampler; with ``resample_period`` set, the prior drifts.

    In drift mode the simplex is redrawn from normalized U(0,1)^K whenever
    ``t % resample_period == 0``, before that round's draw.
    """

    def __init__(self, num_classes, resample_period=None, probs=None):
        self.num_classes = int(num_classes)
        self.resample_period = resample_period
        if probs is None:
            probs = np.full(self.num_classes, 1.0 / self.num_classes)
        self.probs = np.asarray(probs, dtype=np.float64)
        self._cdf = np.cumsum(self.probs)

    def maybe_resample(self, t, rng):
        if self.resample_period and t % self.resample_period == 0:
            u = rng.uniform(0.0, 1.0, size=self.num_classes)
            self.probs = u / u.sum()
            self._cdf = np.cumsum(self.probs)
            return True
        return False

    def draw(self, rng):
        k = int(np.searchsorted(self._cdf, rng.random() * self._cdf[-1], side="right"))
        return min(k, self.num_classes - 1)


class LabeledDataset:
    """Finite labeled example pool, sampled per class with replacement."""

    def __init__(self, X, y, num_classes=None, image_shape=None, max_shift=0):
        self.X = np.asarray(X, dtype=np.float64)
        self.y = np.asarray(y, dtype=np.int64)
        if self.X.shape[0] != self.y.shape[0]:
            raise CountMismatchError(f"{self.X.shape[0]} rows but {self.y.shape[0]} labels")
        self.num_classes = int(num_classes or self.y.max() + 1)
        self.dim = self.X.shape[1]
        self.buckets = [np.flatnonzero(self.y == k) for k in range(self.num_classes)]
        self.image_shape = image_shape
        self.max_shift = int(max_shift)

    def draw(self, label, rng):
        bucket = self.buckets[label]
        if bucket.size == 0:
            raise EmptyClassError(f"no examples of class {label}")
        x = self.X[bucket[rng.integers(bucket.size)]]
        if self.max_shift and self.image_shape is not None:
            dr, dc = rng.integers(-self.max_shift, self.max_shift + 1, size=2)
            x = shift_image(x, self.image_shape, int(dr), int(dc))
        return x


def shift_image(x, shape, dr, dc, fill=-1.0):
    """Translate a flattened image by (dr, dc) pixels, padding with ``fill``."""
    img = x.reshape(shape)
    out = np.full(shape, fill)
    rows, cols = shape
    src_r = slice(max(0, -dr), min(rows, rows - dr))
    dst_r = slice(max(0, dr), min(rows, rows + dr))
    src_c = slice(max(0, -dc), min(cols, cols - dc))
    dst_c = slice(max(0, dc), min(cols, cols + dc))
    out[dst_r, dst_c] = img[src_r, src_c]
    return out.reshape(-1)


class GaussianClassSource:
    """Synthetic infinite source: class centroids plus isotropic Gaussian noise."""

    def __init__(self, dim, num_classes, rng, separation=1.0, noise=1.0):
        self.dim = int(dim)
        self.num_classes = int(num_classes)
        self.centroids = rng.normal(0.0, separation, size=(num_classes, dim))
        self.noise = noise

    def draw(self, label, rng):
        return self.centroids[label] + self.noise * rng.standard_normal(self.dim)


class SeparableBinarySource:
    """Linearly separable binary data with a margin around a random hyperplane.

    Features lie in [-1, 1]^dim and every point satisfies
    ``|uᵀx| / ||u|| >= margin`` with the label given by the side.
    """

    num_classes = 2

    def __init__(self, dim, rng, margin=0.1):
        self.dim = int(dim)
        u = rng.standard_normal(self.dim)
        self.normal = u / np.linalg.norm(u)
        self.margin = margin

    def draw(self, label, rng):
        sign = 1.0 if label == 1 else -1.0
        while True:
            x = rng.uniform(-1.0, 1.0, size=self.dim)
            s = self.normal @ x
            if sign * s >= self.margin:
                return x
            if -sign * s >= self.margin:
                return -x


def next_sample(sampler, dataset, t, rng, partition):
    """Draw round ``t``'s sample: resample the prior if due, then class, then example."""
    sampler.maybe_resample(t, rng)
    label = sampler.draw(rng)
    x = dataset.draw(label, rng)
    return StreamSample(t, partition_features(x, partition), label)


class DataStream:
    """Stateful single-owner iterator over rounds ``0, 1, 2, ...``."""

    def __init__(self, dataset, partition, sampler, rng):
        if dataset.dim != partition.dim:
            raise DimensionError(
                f"dataset dim {dataset.dim} != partition dim {partition.dim}"
            )
        self.dataset = dataset
        self.partition = partition
        self.sampler = sampler
        self.rng = rng
        self.t = 0

    def __iter__(self):
        return self

    def __next__(self):
        s = next_sample(self.sampler, self.dataset, self.t, self.rng, self.partition)
        self.t += 1
        return s
