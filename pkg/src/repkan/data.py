"""Dataset container, synthetic multispectral generator, normalization,
and light augmentation.

MSTD binary layout (little-endian), bit-exact on round trip::

    magic   6 bytes  "MSTD1\\0"
    u32     N, C, H, W, K
    K x (u32 length + UTF-8 bytes)   class names
    C x (u32 length + UTF-8 bytes)   band names
    u16[N]  labels
    f32[N*C*H*W]  image data, NCHW contiguous

Images are promoted to float64 in memory; files store float32.
"""

import csv
import logging
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigurationError, DataFormatError, InputError
from . import rng as rng_mod

log = logging.getLogger(__name__)

MSTD_MAGIC = b"MSTD1\x00"

# Sentinel-2 style band labels used for 13-channel synthetic data
SENTINEL2_BANDS = [
    "B01_Aerosol", "B02_Blue", "B03_Green", "B04_Red", "B05_RedEdge1",
    "B06_RedEdge2", "B07_RedEdge3", "B08_NIR", "B8A_NarrowNIR",
    "B09_WaterVapour", "B10_Cirrus", "B11_SWIR1", "B12_SWIR2",
]
RED_IDX_13 = 3
NIR_IDX_13 = 7

INDEX_EPS = 1e-6  # denominator guard of the planted band-ratio index
INDEX_RANGE = (-0.8, 0.8)
MAX_CLASSES = 8


@dataclass
class MstdDataset:
    images: np.ndarray  # (N,C,H,W) float64
    labels: np.ndarray  # (N,) int64
    class_names: list
    band_names: list

    def __post_init__(self):
        self.images = np.ascontiguousarray(self.images, dtype=np.float64)
        self.labels = np.ascontiguousarray(self.labels, dtype=np.int64)
        if self.images.ndim != 4:
            raise InputError("images must be (N,C,H,W)")
        if self.labels.shape != (self.images.shape[0],):
            raise InputError("one label per image required")
        if len(self.class_names) == 0:
            raise InputError("at least one class required")
        if len(self.band_names) != self.images.shape[1]:
            raise InputError("one band name per channel required")
        if self.labels.size and (self.labels.min() < 0
                                 or self.labels.max() >= len(self.class_names)):
            raise InputError(f"labels must lie in [0, {len(self.class_names)})")

    def __len__(self):
        return self.images.shape[0]

    @property
    def n_classes(self):
        return len(self.class_names)

    @property
    def shape_chw(self):
        return self.images.shape[1:]

    def subset(self, indices) -> "MstdDataset":
        idx = np.asarray(indices, dtype=np.int64)
        return MstdDataset(self.images[idx], self.labels[idx],
                           list(self.class_names), list(self.band_names))


# --------------------------------------------------------------------- I/O


def _read_exact(f, n, what):
    buf = f.read(n)
    if len(buf) != n:
        raise DataFormatError(
            f"truncated MSTD file while reading {what} at byte offset {f.tell() - len(buf)}")
    return buf


def _read_names(f, count, what):
    names = []
    for i in range(count):
        (ln,) = struct.unpack("<I", _read_exact(f, 4, f"{what} name length"))
        names.append(_read_exact(f, ln, f"{what} name {i}").decode("utf-8"))
    return names


def mstd_read(path) -> MstdDataset:
    path = Path(path)
    with open(path, "rb") as f:
        magic = f.read(len(MSTD_MAGIC))
        if magic != MSTD_MAGIC:
            raise DataFormatError(f"{path}: bad magic {magic!r} at byte offset 0")
        n, c, h, w, k = struct.unpack("<5I", _read_exact(f, 20, "header"))
        if k == 0:
            raise DataFormatError(f"{path}: zero class count at byte offset 6")
        class_names = _read_names(f, k, "class")
        band_names = _read_names(f, c, "band")
        if len(band_names) != c:
            raise DataFormatError(f"{path}: expected {c} band names")
        labels_off = f.tell()
        labels = np.frombuffer(_read_exact(f, 2 * n, "labels"), dtype="<u2").astype(np.int64)
        bad = np.nonzero(labels >= k)[0]
        if bad.size:
            raise DataFormatError(
                f"{path}: label {labels[bad[0]]} >= K={k} at byte offset "
                f"{labels_off + 2 * int(bad[0])}")
        data = np.frombuffer(_read_exact(f, 4 * n * c * h * w, "image data"), dtype="<f4")
        images = data.astype(np.float64).reshape(n, c, h, w)
    return MstdDataset(images, labels, class_names, band_names)


def mstd_write(dataset: MstdDataset, path) -> None:
    path = Path(path)
    n, c, h, w = dataset.images.shape
    with open(path, "wb") as f:
        f.write(MSTD_MAGIC)
        f.write(struct.pack("<5I", n, c, h, w, dataset.n_classes))
        for name in dataset.class_names + dataset.band_names:
            raw = name.encode("utf-8")
            f.write(struct.pack("<I", len(raw)))
            f.write(raw)
        f.write(dataset.labels.astype("<u2").tobytes())
        f.write(dataset.images.astype("<f4").tobytes())


def mstd_import(manifest_path, channels: int, height: int, width: int,
                class_names=None, band_names=None) -> MstdDataset:
    """Assemble a dataset from a manifest CSV (columns: path,label) pointing
    at raw little-endian float32 files of shape C*H*W each."""
    manifest_path = Path(manifest_path)
    root = manifest_path.parent
    paths, labels = [], []
    with open(manifest_path, newline="") as f:
        reader = csv.DictReader(f)
        if reader.fieldnames is None or {"path", "label"} - set(reader.fieldnames):
            raise DataFormatError(f"{manifest_path}: manifest needs 'path,label' columns")
        for row in reader:
            paths.append(root / row["path"])
            labels.append(int(row["label"]))
    if not paths:
        raise DataFormatError(f"{manifest_path}: empty manifest")
    expect = channels * height * width
    images = np.empty((len(paths), channels, height, width))
    for i, p in enumerate(paths):
        raw = np.fromfile(p, dtype="<f4")
        if raw.size != expect:
            raise DataFormatError(f"{p}: expected {expect} float32 values, found {raw.size}")
        images[i] = raw.astype(np.float64).reshape(channels, height, width)
    k = max(labels) + 1
    if class_names is None:
        class_names = [f"class_{i}" for i in range(k)]
    if band_names is None:
        band_names = default_band_names(channels)
    return MstdDataset(images, np.asarray(labels), class_names, band_names)


def default_band_names(channels: int):
    if channels == 13:
        return list(SENTINEL2_BANDS)
    return [f"band_{i}" for i in range(channels)]


# ------------------------------------------------------------- synthetic data


def index_intervals(n_classes: int):
    """Disjoint planted-index intervals, one per class, partitioning
    [-0.8, 0.8] evenly."""
    if not 2 <= n_classes <= MAX_CLASSES:
        raise ConfigurationError(
            f"planted-index partition supports 2..{MAX_CLASSES} classes, got {n_classes}")
    edges = np.linspace(INDEX_RANGE[0], INDEX_RANGE[1], n_classes + 1)
    return [(float(edges[i]), float(edges[i + 1])) for i in range(n_classes)]


def planted_index(images: np.ndarray, red_idx: int, nir_idx: int) -> np.ndarray:
    """Per-sample normalized difference (nir - red) / (nir + red + eps),
    computed from spatial band means of raw (unnormalized) images."""
    red = images[:, red_idx].mean(axis=(1, 2))
    nir = images[:, nir_idx].mean(axis=(1, 2))
    return (nir - red) / (nir + red + INDEX_EPS)


def rule_classify(images: np.ndarray, red_idx: int, nir_idx: int,
                  n_classes: int) -> np.ndarray:
    """Closed-form classifier: bin the planted index into class intervals
    (values outside the range snap to the nearest interval)."""
    d = planted_index(images, red_idx, nir_idx)
    lo, hi = INDEX_RANGE
    width = (hi - lo) / n_classes
    return np.clip(np.floor((d - lo) / width), 0, n_classes - 1).astype(np.int64)


def rule_accuracy(dataset: MstdDataset, red_idx: int, nir_idx: int) -> float:
    """Overall accuracy of the closed-form index rule on a dataset; the
    separability certificate of the generator."""
    pred = rule_classify(dataset.images, red_idx, nir_idx, dataset.n_classes)
    return float(np.mean(pred == dataset.labels))


def default_spectral_indices(channels: int):
    if channels == 13:
        return RED_IDX_13, NIR_IDX_13
    return 0, 1


def generate_synthetic(n_classes: int, per_class: int, channels: int,
                       height: int, width: int, seed: int,
                       noise: float = 0.05,
                       red_idx: int | None = None,
                       nir_idx: int | None = None) -> MstdDataset:
    """Labeled multispectral set with a planted non-linear spectral rule.

    Every image is spatially constant plus iid Gaussian texture noise. The
    class signal lives solely in the red/nir pair: the normalized
    difference d = (nir-red)/(nir+red+eps) is drawn inside the class's
    interval (with a 10% safety margin), while all other bands share
    class-independent base levels. A direct d-threshold rule therefore
    classifies the noise-free set perfectly, certifying separability.
    """
    if channels < 2:
        raise ConfigurationError("need at least 2 channels for the red/nir pair")
    if per_class < 1:
        raise ConfigurationError("per_class must be positive")
    intervals = index_intervals(n_classes)
    if red_idx is None or nir_idx is None:
        red_idx, nir_idx = default_spectral_indices(channels)
    if red_idx == nir_idx or not (0 <= red_idx < channels and 0 <= nir_idx < channels):
        raise ConfigurationError("red_idx and nir_idx must be distinct valid channels")

    rng = rng_mod.stream(seed, rng_mod.STREAM_DATA)
    base = rng.uniform(0.2, 0.8, size=channels)  # shared across classes
    n = n_classes * per_class
    images = np.empty((n, channels, height, width))
    labels = np.repeat(np.arange(n_classes), per_class)
    for i, k in enumerate(labels):
        lo, hi = intervals[k]
        margin = 0.1 * (hi - lo)
        d = rng.uniform(lo + margin, hi - margin)
        total = 1.0  # red + nir level; d alone fixes the pair
        level = base.copy()
        level[nir_idx] = total * (1.0 + d) / 2.0
        level[red_idx] = total * (1.0 - d) / 2.0
        images[i] = level[:, None, None]
    if noise > 0:
        images += rng.normal(0.0, noise, size=images.shape)

    class_names = [f"class_{k}" for k in range(n_classes)]
    return MstdDataset(images, labels, class_names, default_band_names(channels))


# ----------------------------------------------------------- normalization


@dataclass
class BandStats:
    mean: np.ndarray  # (C,)
    std: np.ndarray   # (C,)


def compute_band_stats(dataset: MstdDataset) -> BandStats:
    mean = dataset.images.mean(axis=(0, 2, 3))
    std = dataset.images.std(axis=(0, 2, 3))
    return BandStats(mean, std)


def normalize(dataset: MstdDataset, stats: BandStats) -> MstdDataset:
    """Per-band standardization (x - mean) / std; the bulk of the values
    should land in the spline domain's neighbourhood."""
    std = np.asarray(stats.std, dtype=np.float64)
    mean = np.asarray(stats.mean, dtype=np.float64)
    degenerate = np.nonzero(std < 1e-12)[0]
    if degenerate.size:
        band = dataset.band_names[int(degenerate[0])]
        raise InputError(f"degenerate band {band!r}: zero variance, cannot normalize")
    images = (dataset.images - mean[None, :, None, None]) / std[None, :, None, None]
    out = MstdDataset(images, dataset.labels.copy(),
                      list(dataset.class_names), list(dataset.band_names))
    coverage = float(np.mean(np.abs(images) <= 3.0))
    log.info("normalize: %.2f%% of values within [-3, 3]", 100.0 * coverage)
    return out


# ------------------------------------------------------------- augmentation


def augment(images: np.ndarray, rng: np.random.Generator,
            flip_prob: float = 0.5, pad: int = 4) -> np.ndarray:
    """Per-sample horizontal flip + zero-pad-and-crop jitter.

    Label-preserving and shape-preserving. Draw order (flips, then crop
    offsets) is fixed so a given generator state replays exactly.
    """
    n, c, h, w = images.shape
    if pad > min(h, w):
        raise ConfigurationError("augment: pad exceeds image size")
    out = images.copy()
    flips = rng.random(n) < flip_prob
    out[flips] = out[flips][..., ::-1]
    if pad == 0:
        return out
    offsets = rng.integers(0, 2 * pad + 1, size=(n, 2))
    padded = np.zeros((n, c, h + 2 * pad, w + 2 * pad))
    padded[:, :, pad : pad + h, pad : pad + w] = out
    for i, (dy, dx) in enumerate(offsets):
        out[i] = padded[i, :, dy : dy + h, dx : dx + w]
    return out


# ------------------------------------------------------------------- splits


def split_dataset(dataset: MstdDataset, val_fraction: float, seed: int):
    """Stratified train/validation split, deterministic for a seed."""
    if not 0.0 <= val_fraction < 1.0:
        raise ConfigurationError("val_fraction must be in [0, 1)")
    rng = rng_mod.stream(seed, rng_mod.STREAM_SHUFFLE)
    train_idx, val_idx = [], []
    for k in range(dataset.n_classes):
        idx = np.nonzero(dataset.labels == k)[0]
        idx = idx[rng.permutation(idx.size)]
        n_val = int(round(val_fraction * idx.size))
        val_idx.extend(idx[:n_val])
        train_idx.extend(idx[n_val:])
    return dataset.subset(np.sort(train_idx)), dataset.subset(np.sort(val_idx))
