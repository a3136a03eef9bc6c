"""Dataset ingestion, synthesis and partitioning.

Everything here returns :class:`LabeledDataset` objects: a float64 feature
matrix plus integer utility and sensitive label columns.
"""

from __future__ import annotations

import csv
import gzip
import logging
import os
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import numpy as np

from .errors import ConfigError, DataError, DomainError, ParseError

log = logging.getLogger(__name__)

IDX_LABELS_MAGIC = 0x00000801
IDX_IMAGES_MAGIC = 0x00000803
_IDX_NDIM = {IDX_LABELS_MAGIC: 1, IDX_IMAGES_MAGIC: 3}
_MAX_IDX_ITEMS = 1 << 31


@dataclass
class LabeledDataset:
    x: np.ndarray
    u: np.ndarray
    s: np.ndarray
    u_card: Tuple[int, ...]
    s_card: Tuple[int, ...]

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=np.float64)
        self.u = np.asarray(self.u, dtype=np.int64)
        self.s = np.asarray(self.s, dtype=np.int64)
        if self.u.ndim == 1:
            self.u = self.u[:, None]
        if self.s.ndim == 1:
            self.s = self.s[:, None]
        self.u_card = tuple(int(c) for c in self.u_card)
        self.s_card = tuple(int(c) for c in self.s_card)
        n = self.x.shape[0]
        if self.x.ndim != 2 or self.u.shape[0] != n or self.s.shape[0] != n:
            raise DataError("x, u and s must have the same number of rows")
        if self.u.shape[1] != len(self.u_card) or self.s.shape[1] != len(self.s_card):
            raise DataError("one cardinality per label column is required")
        for lab, card in ((self.u, self.u_card), (self.s, self.s_card)):
            if lab.size and (lab.min() < 0 or np.any(lab.max(axis=0) >= np.array(card))):
                raise DataError("label outside its cardinality")
        if not np.all(np.isfinite(self.x)):
            raise DataError("features contain missing or non-finite values")

    @property
    def n(self) -> int:
        return self.x.shape[0]

    @property
    def d_x(self) -> int:
        return self.x.shape[1]

    def subset(self, idx) -> "LabeledDataset":
        idx = np.asarray(idx)
        return LabeledDataset(self.x[idx], self.u[idx], self.s[idx], self.u_card, self.s_card)


# ---------------------------------------------------------------------------
# IDX

def parse_idx(data: bytes) -> np.ndarray:
    """Parse an unsigned-byte IDX file (labels or images).

    Labels come back as int64; images as float64 scaled to [0, 1].
    """
    if len(data) < 4:
        raise ParseError("truncated IDX magic", 0)
    (magic,) = struct.unpack_from(">I", data, 0)
    if magic not in _IDX_NDIM:
        raise ParseError(f"bad IDX magic 0x{magic:08x}", 0)
    ndim = _IDX_NDIM[magic]
    header = 4 + 4 * ndim
    if len(data) < header:
        raise ParseError("truncated IDX dimension header", len(data))
    dims = struct.unpack_from(f">{ndim}I", data, 4)
    total = 1
    for i, d in enumerate(dims):
        total *= d
        if total >= _MAX_IDX_ITEMS:
            raise ParseError("IDX dimensions overflow", 4 + 4 * i)
    if len(data) < header + total:
        raise ParseError(f"truncated IDX payload: need {total} bytes, have "
                         f"{len(data) - header}", len(data))
    raw = np.frombuffer(data, dtype=np.uint8, count=total, offset=header).reshape(dims)
    if magic == IDX_LABELS_MAGIC:
        return raw.astype(np.int64)
    return raw.astype(np.float64) / 255.0


def write_idx(arr: np.ndarray) -> bytes:
    """Serialize labels (1-D ints) or images (3-D floats in [0,1]) as IDX bytes."""
    arr = np.asarray(arr)
    if arr.ndim == 1:
        magic, raw = IDX_LABELS_MAGIC, arr
    elif arr.ndim == 3:
        magic, raw = IDX_IMAGES_MAGIC, np.rint(np.asarray(arr, dtype=np.float64) * 255.0)
    else:
        raise DomainError("IDX writer supports 1-D labels or 3-D images")
    if raw.size and (raw.min() < 0 or raw.max() > 255):
        raise DomainError("values do not fit in an unsigned byte")
    head = struct.pack(">I", magic) + struct.pack(f">{arr.ndim}I", *arr.shape)
    return head + raw.astype(np.uint8).tobytes()


def read_idx_file(path) -> np.ndarray:
    path = Path(path)
    opener = gzip.open if path.suffix == ".gz" else open
    with opener(path, "rb") as f:
        return parse_idx(f.read())


# ---------------------------------------------------------------------------
# MNIST

MNIST_FILES = {
    "train": ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
    "test": ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
}
SAMPLE_FILES = {
    "train": ("mnist-sample-train-images-idx3-ubyte", "mnist-sample-train-labels-idx1-ubyte"),
    "test": ("mnist-sample-test-images-idx3-ubyte", "mnist-sample-test-labels-idx1-ubyte"),
}
SAMPLE_TEST_PER_DIGIT = 100


def data_dir() -> Path:
    return Path(os.environ.get("GPP_DATA_DIR", Path.home() / ".cache" / "gpp"))


def _find(directory: Path, name: str) -> Optional[Path]:
    for cand in (directory / name, directory / (name + ".gz")):
        if cand.exists():
            return cand
    return None


def mnist_sample_source() -> Optional[Path]:
    """Path of the 5,000-digit MNIST sample shipped with mlxtend, if installed."""
    import importlib.util
    spec = importlib.util.find_spec("mlxtend")
    if spec is None or not spec.submodule_search_locations:
        return None
    path = Path(list(spec.submodule_search_locations)[0]) / "data" / "data" / "mnist_5k.csv.gz"
    return path if path.exists() else None


def materialize_mnist_sample(directory: Path = None, seed: int = 0) -> Path:
    """Write the mlxtend MNIST sample as IDX train/test files in ``directory``.

    ``SAMPLE_TEST_PER_DIGIT`` images per digit go to the test split.
    """
    directory = Path(directory or data_dir())
    src = mnist_sample_source()
    if src is None:
        raise DataError("MNIST sample unavailable: install mlxtend "
                        "(pip install mlxtend) or place the MNIST IDX files in "
                        f"{directory}")
    table = np.loadtxt(src, delimiter=",", dtype=np.int64)
    pixels, labels = table[:, :-1], table[:, -1]
    rng = np.random.default_rng(seed)
    test_idx = np.concatenate([
        rng.permutation(np.flatnonzero(labels == d))[:SAMPLE_TEST_PER_DIGIT]
        for d in range(10)])
    test_mask = np.zeros(labels.size, dtype=bool)
    test_mask[test_idx] = True
    directory.mkdir(parents=True, exist_ok=True)
    for split, mask in (("train", ~test_mask), ("test", test_mask)):
        img_name, lab_name = SAMPLE_FILES[split]
        imgs = pixels[mask].reshape(-1, 28, 28) / 255.0
        (directory / img_name).write_bytes(write_idx(imgs))
        (directory / lab_name).write_bytes(write_idx(labels[mask]))
    return directory


def load_mnist(split: str = "train", directory: Path = None, allow_sample: bool = True):
    """Load MNIST ``(images, labels)`` from IDX files.

    The full dataset is preferred; otherwise the mlxtend sample is used,
    materializing it as IDX on first use.
    """
    directory = Path(directory or data_dir())
    img_name, lab_name = MNIST_FILES[split]
    img, lab = _find(directory, img_name), _find(directory, lab_name)
    if img is None or lab is None:
        if not allow_sample:
            raise DataError(f"MNIST {split} IDX files not found in {directory}; download "
                            "them from the MNIST site into GPP_DATA_DIR")
        img_name, lab_name = SAMPLE_FILES[split]
        img, lab = _find(directory, img_name), _find(directory, lab_name)
        if img is None or lab is None:
            materialize_mnist_sample(directory)
            img, lab = directory / img_name, directory / lab_name
        log.info("using the 5k MNIST sample for split %s", split)
    images, labels = read_idx_file(img), read_idx_file(lab)
    if images.shape[0] != labels.shape[0]:
        raise DataError("MNIST image and label counts differ")
    return images, labels


def build_mnist_composite(images: np.ndarray, digit_labels, seed: int,
                          n_pairings: int = 1, max_samples: int = None) -> LabeledDataset:
    """Pair digits side by side; utility = digit sum (19 classes), sensitive = parity.

    Each pairing round draws a fresh random permutation and pairs consecutive
    digits without replacement; an odd leftover is dropped. ``n_pairings > 1``
    repeats this to build more composites from a small digit pool.
    """
    images = np.asarray(images, dtype=np.float64)
    digit_labels = np.asarray(digit_labels, dtype=np.int64)
    if images.ndim == 2:
        images = images.reshape(-1, 28, 28)
    rng = np.random.default_rng(seed)
    n = (images.shape[0] // 2) * 2
    lefts, rights = [], []
    for _ in range(n_pairings):
        perm = rng.permutation(images.shape[0])[:n]
        lefts.append(perm[0::2])
        rights.append(perm[1::2])
    a, b = np.concatenate(lefts), np.concatenate(rights)
    if max_samples is not None:
        a, b = a[:max_samples], b[:max_samples]
    x = np.concatenate([images[a], images[b]], axis=2).reshape(a.size, -1)
    total = digit_labels[a] + digit_labels[b]
    return LabeledDataset(x, total, total % 2, (19,), (2,))


# ---------------------------------------------------------------------------
# synthetic

SYNTH_AMPLITUDE = 2.0
SYNTH_BLOCK = 4


def gen_correlated_synthetic(n: int, d_x: int, rho: float, seed: int) -> LabeledDataset:
    """Binary utility/sensitive pair with Pearson correlation ``rho``.

    ``s ~ Bernoulli(1/2)``; ``u = s`` with probability ``(1 + rho) / 2``.
    Features: ``2 * u`` on a unit-norm pattern in coordinates 0-3, ``2 * s`` on
    one in coordinates 4-7, plus standard normal noise everywhere.
    """
    if not 0.0 <= rho <= 1.0:
        raise DomainError(f"rho must lie in [0, 1], got {rho}")
    if d_x < 2 * SYNTH_BLOCK:
        raise DomainError(f"d_x must be at least {2 * SYNTH_BLOCK}")
    rng = np.random.default_rng(seed)
    s = rng.integers(0, 2, size=n)
    agree = rng.random(n) < (1.0 + rho) / 2.0
    u = np.where(agree, s, 1 - s)
    pattern = np.full(SYNTH_BLOCK, 1.0 / np.sqrt(SYNTH_BLOCK))
    x = rng.standard_normal((n, d_x))
    x[:, :SYNTH_BLOCK] += SYNTH_AMPLITUDE * u[:, None] * pattern
    x[:, SYNTH_BLOCK:2 * SYNTH_BLOCK] += SYNTH_AMPLITUDE * s[:, None] * pattern
    return LabeledDataset(x, u, s, (2,), (2,))


# ---------------------------------------------------------------------------
# CSV

def load_csv_labeled(path, feature_cols: Sequence[str] = None, utility_col: str = "activity",
                     sensitive_col: str = "subject", stats=None):
    """Load a labeled CSV (header row, comma separated, UTF-8).

    Features are standardized per column; pass ``stats=(mean, std)`` from a
    training split to standardize a test split with training statistics.
    Labels are re-indexed densely from 0 in sorted order.

    Returns ``(dataset, (mean, std), (u_values, s_values))``.
    """
    with open(path, newline="", encoding="utf-8") as f:
        reader = csv.reader(f)
        try:
            header = next(reader)
        except StopIteration:
            raise ParseError("empty CSV file", 1)
        header = [h.strip() for h in header]
        for col in (utility_col, sensitive_col):
            if col not in header:
                raise ConfigError(f"label column {col!r} missing from {path}")
        if feature_cols is None:
            feature_cols = [h for h in header if h not in (utility_col, sensitive_col)]
        missing = [c for c in feature_cols if c not in header]
        if missing:
            raise ConfigError(f"feature columns missing: {missing}")
        fidx = [header.index(c) for c in feature_cols]
        ui, si = header.index(utility_col), header.index(sensitive_col)
        feats, us, ss = [], [], []
        for rownum, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(header):
                raise ParseError(f"row has {len(row)} cells, header has {len(header)}", rownum)
            try:
                feats.append([float(row[i]) for i in fidx])
                us.append(int(row[ui]))
                ss.append(int(row[si]))
            except ValueError as exc:
                raise ParseError(f"non-numeric cell: {exc}", rownum) from None
    x = np.array(feats, dtype=np.float64).reshape(len(feats), len(fidx))
    if stats is None:
        mean = x.mean(axis=0)
        std = x.std(axis=0)
    else:
        mean, std = stats
    safe = np.where(std > 0, std, 1.0)
    x = (x - mean) / safe
    u_vals, u = np.unique(np.array(us), return_inverse=True)
    s_vals, s = np.unique(np.array(ss), return_inverse=True)
    ds = LabeledDataset(x, u, s, (len(u_vals),), (len(s_vals),))
    return ds, (mean, std), (u_vals, s_vals)


# ---------------------------------------------------------------------------
# partitioning

@dataclass(frozen=True)
class Shard:
    client_id: int
    indices: np.ndarray


def partition_horizontal(dataset: LabeledDataset, t: int, mode: str = "uniform-random",
                         seed: int = 0) -> List[Shard]:
    """Split sample indices into ``t`` disjoint shards covering the dataset.

    ``by-sensitive-class`` gives every value of the first sensitive attribute
    to exactly one client (subject partitioning).
    """
    n = dataset.n
    if t < 1 or t > n:
        raise ConfigError(f"cannot split {n} samples across {t} clients")
    rng = np.random.default_rng(seed)
    if mode == "uniform-random":
        parts = np.array_split(rng.permutation(n), t)
    elif mode == "by-sensitive-class":
        classes = np.unique(dataset.s[:, 0])
        if classes.size < t:
            raise ConfigError(f"{classes.size} sensitive classes cannot cover {t} clients")
        owner = {int(c): i % t for i, c in enumerate(rng.permutation(classes))}
        assign = np.array([owner[int(c)] for c in dataset.s[:, 0]])
        parts = [np.flatnonzero(assign == m) for m in range(t)]
    else:
        raise ConfigError(f"unknown partition mode {mode!r}")
    return [Shard(m, np.sort(p)) for m, p in enumerate(parts)]


def train_test_split(dataset: LabeledDataset, fraction: float, seed: int = 0):
    """Seeded split stratified on the first sensitive attribute.

    ``fraction`` is the share of samples that go to the test split.
    """
    if not 0.0 < fraction < 1.0:
        raise DomainError("fraction must lie strictly between 0 and 1")
    rng = np.random.default_rng(seed)
    test = []
    for c in np.unique(dataset.s[:, 0]):
        idx = rng.permutation(np.flatnonzero(dataset.s[:, 0] == c))
        test.append(idx[:int(round(fraction * idx.size))])
    test = np.sort(np.concatenate(test))
    mask = np.zeros(dataset.n, dtype=bool)
    mask[test] = True
    if mask.all() or not mask.any():
        raise DomainError("split leaves one side empty")
    return dataset.subset(np.flatnonzero(~mask)), dataset.subset(test)


# ---------------------------------------------------------------------------
# binary dataset cache

def save_dataset_cache(dataset: LabeledDataset, path) -> None:
    """Little-endian: u32 n, d_x, d_u, d_s; u32 cardinalities; f32 features; u16 labels."""
    d_u, d_s = len(dataset.u_card), len(dataset.s_card)
    head = struct.pack("<4I", dataset.n, dataset.d_x, d_u, d_s)
    head += struct.pack(f"<{d_u + d_s}I", *dataset.u_card, *dataset.s_card)
    body = dataset.x.astype("<f4").tobytes()
    body += np.concatenate([dataset.u, dataset.s], axis=1).astype("<u2").tobytes()
    Path(path).write_bytes(head + body)


def load_dataset_cache(path) -> LabeledDataset:
    data = Path(path).read_bytes()
    if len(data) < 16:
        raise ParseError("truncated dataset cache header", 0)
    n, d_x, d_u, d_s = struct.unpack_from("<4I", data, 0)
    off = 16
    cards = struct.unpack_from(f"<{d_u + d_s}I", data, off)
    off += 4 * (d_u + d_s)
    need = off + 4 * n * d_x + 2 * n * (d_u + d_s)
    if len(data) != need:
        raise ParseError(f"dataset cache has {len(data)} bytes, expected {need}", len(data))
    x = np.frombuffer(data, "<f4", n * d_x, off).reshape(n, d_x).astype(np.float64)
    off += 4 * n * d_x
    lab = np.frombuffer(data, "<u2", n * (d_u + d_s), off).reshape(n, d_u + d_s)
    return LabeledDataset(x, lab[:, :d_u], lab[:, d_u:], cards[:d_u], cards[d_u:])
