"""Distill learned spline edges into explicit low-degree polynomial
equations, with an R-squared score per degree.

Fits are least squares on an affinely rescaled abscissa (numpy's
Polynomial.fit maps the sample range onto [-1, 1] before solving, then
the coefficients are converted back), which keeps the Vandermonde system
well conditioned. For nested degrees on the same samples R-squared is
non-decreasing; that property is asserted on every emitted row.
"""

from dataclasses import dataclass

import numpy as np
from numpy.polynomial import Polynomial

from .data import MstdDataset
from .errors import InputError, NumericError
from .interpret import ExpertFilter, select_expert_filters
from .model import RepKanModel
from .splines import sample_edge

DEGREES = (1, 2, 3)
DEFAULT_SAMPLES = 200


def polyfit(xs, ys, degree: int) -> np.ndarray:
    """Least-squares polynomial coefficients, highest degree first."""
    xs = np.asarray(xs, dtype=np.float64)
    ys = np.asarray(ys, dtype=np.float64)
    if xs.ndim != 1 or xs.shape != ys.shape:
        raise InputError("polyfit needs matching 1-D sample vectors")
    if xs.size < degree + 1:
        raise InputError(f"degree {degree} needs at least {degree + 1} samples")
    if np.ptp(xs) == 0.0:
        raise InputError("singular fit: all abscissae identical")
    fit = Polynomial.fit(xs, ys, degree)
    coeffs = fit.convert().coef  # ascending powers in natural coordinates
    if coeffs.size < degree + 1:  # numpy trims exact-zero leading terms
        coeffs = np.pad(coeffs, (0, degree + 1 - coeffs.size))
    return coeffs[::-1].copy()


def polyval(coeffs, xs) -> np.ndarray:
    """Evaluate highest-first coefficients at xs."""
    return np.polyval(np.asarray(coeffs, dtype=np.float64), xs)


def r_squared(ys, ys_hat) -> float:
    """1 - SS_res / SS_tot; undefined (error) for a constant target."""
    ys = np.asarray(ys, dtype=np.float64)
    ys_hat = np.asarray(ys_hat, dtype=np.float64)
    if ys.size < 2 or ys.shape != ys_hat.shape:
        raise InputError("r_squared needs at least two aligned samples")
    ss_tot = float(np.sum((ys - ys.mean()) ** 2))
    if ss_tot == 0.0:
        raise InputError("r_squared undefined for a constant target")
    ss_res = float(np.sum((ys - ys_hat) ** 2))
    return 1.0 - ss_res / ss_tot


def format_polynomial(coeffs, decimals: int = 4) -> str:
    """Render highest-first coefficients as e.g.
    ``-0.0181x^3 - 0.0245x^2 + 0.1349x + 0.1166``."""
    coeffs = np.asarray(coeffs, dtype=np.float64)
    degree = coeffs.size - 1
    parts = []
    for i, c in enumerate(coeffs):
        power = degree - i
        mag = f"{abs(c):.{decimals}f}"
        term = mag if power == 0 else (f"{mag}x" if power == 1 else f"{mag}x^{power}")
        if not parts:
            parts.append(f"-{term}" if c < 0 else term)
        else:
            parts.append(f"{'-' if c < 0 else '+'} {term}")
    return " ".join(parts)


@dataclass
class SymbolicFit:
    class_id: int
    class_name: str
    band: int
    n_samples: int
    domain: tuple
    coeffs: dict     # degree -> highest-first coefficient vector
    r2: dict         # degree -> float
    equation: str    # rendered cubic

    def r2_row(self):
        return [self.r2[d] for d in DEGREES]


def distill_edge(model: RepKanModel, expert: ExpertFilter, band: int,
                 n_samples: int = DEFAULT_SAMPLES,
                 dataset: MstdDataset | None = None,
                 density_weighted: bool = False) -> SymbolicFit:
    """Sample the expert's edge for ``band`` over the spline domain and fit
    polynomials of degree 1..3.

    ``density_weighted=True`` weights samples by the band's empirical value
    density in ``dataset`` instead of uniformly (changes R-squared
    materially; off by default).
    """
    if n_samples < 8:
        raise InputError("n_samples must be at least 8")
    bank = model.stage_bank(expert.stage)
    if not 0 <= band < bank.in_channels:
        raise InputError(f"band {band} outside [0, {bank.in_channels})")
    grid = bank.grid
    xs = np.linspace(grid.lo, grid.hi, n_samples)
    ys = sample_edge(bank.edge(expert.channel, band), xs)
    weights = None
    if density_weighted:
        if dataset is None:
            raise InputError("density weighting needs a dataset")
        values = dataset.images[:, band].ravel()
        hist, edges = np.histogram(values, bins=32, range=(grid.lo, grid.hi))
        idx = np.clip(np.searchsorted(edges, xs, side="right") - 1, 0, hist.size - 1)
        weights = hist[idx].astype(np.float64) + 1e-12

    coeffs, r2 = {}, {}
    for d in DEGREES:
        if weights is None:
            coeffs[d] = polyfit(xs, ys, d)
        else:
            fit = Polynomial.fit(xs, ys, d, w=np.sqrt(weights))
            c = fit.convert().coef
            if c.size < d + 1:
                c = np.pad(c, (0, d + 1 - c.size))
            coeffs[d] = c[::-1].copy()
        r2[d] = r_squared(ys, polyval(coeffs[d], xs))
    for lo_d, hi_d in zip(DEGREES, DEGREES[1:]):
        if r2[hi_d] < r2[lo_d] - 1e-9:
            raise NumericError(
                f"least-squares R-squared decreased from degree {lo_d} to {hi_d}")
    return SymbolicFit(
        class_id=expert.class_id,
        class_name=expert.class_name,
        band=band,
        n_samples=n_samples,
        domain=(grid.lo, grid.hi),
        coeffs=coeffs,
        r2=r2,
        equation=format_polynomial(coeffs[3]),
    )


ABLATION_HEADER = "class,band,r2_d1,r2_d2,r2_d3,equation,error"


def ablation_table(model: RepKanModel, dataset: MstdDataset, bands,
                   stage: int = 1, n_samples: int = DEFAULT_SAMPLES,
                   density_weighted: bool = False):
    """One distillation row per (class expert, band); failures land in the
    row's error column rather than aborting the table."""
    experts, _ = select_expert_filters(model, dataset, stage)
    rows = []
    for expert in experts:
        for band in bands:
            try:
                fit = distill_edge(model, expert, band, n_samples=n_samples,
                                   dataset=dataset, density_weighted=density_weighted)
                rows.append((expert.class_name, band, fit, ""))
            except (InputError, NumericError) as exc:
                rows.append((expert.class_name, band, None, str(exc)))
    return rows


def ablation_csv(rows, band_names=None) -> str:
    lines = [ABLATION_HEADER]
    for class_name, band, fit, error in rows:
        band_label = band_names[band] if band_names else str(band)
        if fit is None:
            lines.append(f"{class_name},{band_label},,,,,{error}")
        else:
            r1, r2_, r3 = fit.r2_row()
            lines.append(f"{class_name},{band_label},{r1!r},{r2_!r},{r3!r},"
                         f"{fit.equation},")
    return "\n".join(lines) + "\n"
