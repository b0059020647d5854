"""Intrinsic interpretability exports.

Everything here reads a trained (or fused) model without touching it:
per-class path energy ratios, expert-filter selection, activation-curve
sampling with data histograms, additive two-band interaction landscapes,
and per-image spectral reasoning maps. Outputs are plot-ready CSV/PGM
files; no figure rendering.
"""

from dataclasses import dataclass

import numpy as np

from .data import MstdDataset
from .errors import InputError
from .model import RepKanModel
from .splines import edge_forward, sample_edge

HIST_BINS = 64
_BATCH = 128


@dataclass
class EnergyReport:
    class_id: int
    class_name: str
    stage: int
    spline_energy: float
    spatial_energy: float

    @property
    def spline_ratio(self) -> float:
        return self.spline_energy / (self.spline_energy + self.spatial_energy)


@dataclass
class ExpertFilter:
    class_id: int
    class_name: str
    stage: int
    channel: int
    mean_activation: float


def _stage_paths_batched(model: RepKanModel, images: np.ndarray, stage: int):
    spatials, spectrals = [], []
    for start in range(0, images.shape[0], _BATCH):
        _, spatial, spectral = model.stage_paths(images[start : start + _BATCH], stage)
        spatials.append(spatial)
        spectrals.append(spectral)
    return np.concatenate(spatials), np.concatenate(spectrals)


def energy_profile(model: RepKanModel, dataset: MstdDataset, stage: int = 1,
                   metric: str = "l1"):
    """Per-class path energies at a stage's first block.

    Energy of a path is the mean |activation| over the class's samples and
    all (channel, position) entries ("l1"; "l2" uses squared activations).
    Returns (reports, warnings); classes without samples are omitted and
    noted in warnings.
    """
    if metric not in ("l1", "l2"):
        raise InputError(f"unknown energy metric {metric!r}")
    spatial, spectral = _stage_paths_batched(model, dataset.images, stage)
    agg = np.abs if metric == "l1" else np.square
    reports, warnings = [], []
    for k, name in enumerate(dataset.class_names):
        sel = dataset.labels == k
        if not sel.any():
            warnings.append(f"class {k} ({name}): no samples, omitted")
            continue
        e_spatial = float(agg(spatial[sel]).mean())
        e_spline = float(agg(spectral[sel]).mean())
        if e_spatial + e_spline == 0.0:
            raise InputError(f"class {k}: both paths are identically zero")
        reports.append(EnergyReport(k, name, stage, e_spline, e_spatial))
    return reports, warnings


def energy_report_csv(reports, metric: str = "l1") -> str:
    lines = ["class_id,class_name,stage,metric,spline_energy,spatial_energy,spline_ratio"]
    for r in sorted(reports, key=lambda r: r.class_id):
        lines.append(f"{r.class_id},{r.class_name},{r.stage},{metric},"
                     f"{r.spline_energy!r},{r.spatial_energy!r},{r.spline_ratio!r}")
    return "\n".join(lines) + "\n"


def select_expert_filters(model: RepKanModel, dataset: MstdDataset, stage: int = 1):
    """Per class, the spline-path output channel with the highest mean
    activation over that class's samples (ties break to the lowest index).

    Returns (filters, warnings); empty classes are skipped.
    """
    _, spectral = _stage_paths_batched(model, dataset.images, stage)
    filters, warnings = [], []
    for k, name in enumerate(dataset.class_names):
        sel = dataset.labels == k
        if not sel.any():
            warnings.append(f"class {k} ({name}): no samples, skipped")
            continue
        per_channel = spectral[sel].mean(axis=(0, 2, 3))
        channel = int(np.argmax(per_channel))
        filters.append(ExpertFilter(k, name, stage, channel, float(per_channel[channel])))
    return filters, warnings


@dataclass
class CurveSample:
    xs: np.ndarray
    phi: np.ndarray
    histograms: dict  # class name -> (bin_centers, counts)


def sample_curve_with_distribution(model: RepKanModel, dataset: MstdDataset,
                                   band: int, expert: ExpertFilter,
                                   n_points: int = 200,
                                   classes=None) -> CurveSample:
    """Activation curve of the expert's edge for ``band`` over the spline
    domain, plus fixed-bin histograms of that band's pixel values for the
    requested classes (all classes by default)."""
    bank = model.stage_bank(expert.stage)
    if not 0 <= band < bank.in_channels:
        raise InputError(f"band {band} outside [0, {bank.in_channels})")
    if n_points < 2:
        raise InputError("n_points must be at least 2")
    grid = bank.grid
    xs = np.linspace(grid.lo, grid.hi, n_points)
    phi = sample_edge(bank.edge(expert.channel, band), xs)
    edges = np.linspace(grid.lo, grid.hi, HIST_BINS + 1)
    centers = 0.5 * (edges[:-1] + edges[1:])
    histograms = {}
    wanted = range(dataset.n_classes) if classes is None else classes
    for k in wanted:
        sel = dataset.labels == k
        if not sel.any():
            continue
        values = dataset.images[sel][:, band].ravel()
        counts, _ = np.histogram(values, bins=edges)
        histograms[dataset.class_names[k]] = (centers, counts)
    return CurveSample(xs, phi, histograms)


def curve_csv(sample: CurveSample) -> str:
    """Long-format CSV: curve rows then per-class histogram rows."""
    lines = ["kind,class,x,value"]
    for x, v in zip(sample.xs, sample.phi):
        lines.append(f"curve,,{x!r},{v!r}")
    for name, (centers, counts) in sample.histograms.items():
        for x, cnt in zip(centers, counts):
            lines.append(f"hist,{name},{x!r},{int(cnt)}")
    return "\n".join(lines) + "\n"


def expert_edge_response(model: RepKanModel, expert: ExpertFilter, band: int,
                         dataset: MstdDataset) -> np.ndarray:
    """Per-sample activation of the expert's edge for ``band``: the edge
    evaluated at each sample's spatial-mean value of that (normalized)
    band. This is the scatter behind a distilled equation: how the single
    learned curve responds across the evaluation set."""
    bank = model.stage_bank(expert.stage)
    if not 0 <= band < bank.in_channels:
        raise InputError(f"band {band} outside [0, {bank.in_channels})")
    values = dataset.images[:, band].mean(axis=(1, 2))
    return edge_forward(bank.edge(expert.channel, band), values)


def interaction_landscape(model: RepKanModel, expert: ExpertFilter,
                          band_x: int, band_y: int, resolution: int = 64):
    """Additive two-band activation surface Z[i,j] = phi_x(x_i) + phi_y(y_j)
    over the spline domain (separable by construction)."""
    if band_x == band_y:
        raise InputError("landscape bands must be distinct")
    bank = model.stage_bank(expert.stage)
    for band in (band_x, band_y):
        if not 0 <= band < bank.in_channels:
            raise InputError(f"band {band} outside [0, {bank.in_channels})")
    if resolution < 2:
        raise InputError("resolution must be at least 2")
    grid = bank.grid
    xs = np.linspace(grid.lo, grid.hi, resolution)
    ys = np.linspace(grid.lo, grid.hi, resolution)
    phi_x = sample_edge(bank.edge(expert.channel, band_x), xs)
    phi_y = sample_edge(bank.edge(expert.channel, band_y), ys)
    z = phi_x[:, None] + phi_y[None, :]
    return xs, ys, z


def landscape_csv(xs, ys, z) -> str:
    lines = ["x,y,z"]
    for i, x in enumerate(xs):
        for j, y in enumerate(ys):
            lines.append(f"{x!r},{y!r},{z[i, j]!r}")
    return "\n".join(lines) + "\n"


def reasoning_map(model: RepKanModel, image: np.ndarray,
                  expert: ExpertFilter) -> np.ndarray:
    """Spline-path activation of the expert channel for one image,
    nearest-neighbour upsampled to input resolution and scaled to [-1, 1]
    by its max magnitude (a zero map stays zero)."""
    if image.ndim != 3:
        raise InputError("reasoning_map expects a single (C,H,W) image")
    _, _, spectral = model.stage_paths(image[None], expert.stage)
    amap = spectral[0, expert.channel]
    factor = model.stage_downsample_factor(expert.stage)
    if factor > 1:
        amap = np.repeat(np.repeat(amap, factor, axis=0), factor, axis=1)
    peak = np.abs(amap).max()
    return amap / peak if peak > 0 else amap


def write_pgm(path, amap: np.ndarray) -> None:
    """P5 grayscale: [-1, 1] mapped linearly onto [0, 255]."""
    h, w = amap.shape
    pixels = np.clip(np.rint((amap + 1.0) * 127.5), 0, 255).astype(np.uint8)
    with open(path, "wb") as f:
        f.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        f.write(pixels.tobytes())


def write_f32(path, amap: np.ndarray) -> None:
    """Raw little-endian float32 sidecar, row-major, no header (dimensions
    come from the paired PGM)."""
    with open(path, "wb") as f:
        f.write(np.ascontiguousarray(amap, dtype="<f4").tobytes())
