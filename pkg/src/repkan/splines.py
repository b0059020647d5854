"""B-spline basis machinery and learnable univariate edge functions.

An edge function is

    phi(x) = w_b * silu(x) + w_s * sum_i c_i * B_i(x)

with B_i the B-spline basis over a uniform knot grid. ``w_b`` and ``w_s``
are separate scalars per edge (a single shared multiplier is the special
case ``w_b == w_s``), which conditions training better.

The grid covers a fixed domain (default [-1, 1], matching per-band
standardized inputs) and is extended ``order`` knots past each end. For x
outside the domain the basis is evaluated on the extended knots as-is:
it decays to zero beyond the extension, no clamping, so gradients remain
defined everywhere while the silu term keeps carrying signal.

A :class:`SplineBank` stores a Cout x Cin matrix of edges over one shared
grid and applies them channel-wise: every spatial position is mapped
independently, with no spatial mixing.
"""

from dataclasses import dataclass

import numpy as np

from .errors import ConfigurationError, DimensionError
from .params import Parameter

DOMAIN_LO = -1.0
DOMAIN_HI = 1.0


def silu(x):
    """x * sigmoid(x), overflow-safe on both tails."""
    x = np.asarray(x, dtype=np.float64)
    return x * _sigmoid(x)


def silu_grad(x):
    """d/dx silu(x) = sigmoid(x) * (1 + x * (1 - sigmoid(x)))."""
    x = np.asarray(x, dtype=np.float64)
    s = _sigmoid(x)
    return s * (1.0 + x * (1.0 - s))


def _sigmoid(x):
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    e = np.exp(x[~pos])
    out[~pos] = e / (1.0 + e)
    return out


class SplineGrid:
    """Uniform knot grid: ``grid_size`` interior intervals on [lo, hi],
    degree ``order``, extended ``order`` knots beyond each end.

    Basis count is ``grid_size + order``.
    """

    def __init__(self, grid_size: int, order: int = 3,
                 lo: float = DOMAIN_LO, hi: float = DOMAIN_HI):
        if grid_size < 1:
            raise ConfigurationError("grid_size must be a positive integer")
        if order < 1:
            raise ConfigurationError("spline order must be a positive integer")
        if not hi > lo:
            raise ConfigurationError(f"degenerate spline domain [{lo}, {hi}]")
        self.grid_size = int(grid_size)
        self.order = int(order)
        self.lo = float(lo)
        self.hi = float(hi)
        self.h = (self.hi - self.lo) / self.grid_size
        j = np.arange(-self.order, self.grid_size + self.order + 1, dtype=np.float64)
        self.knots = self.lo + j * self.h

    @property
    def n_basis(self) -> int:
        return self.grid_size + self.order

    def __eq__(self, other):
        return (isinstance(other, SplineGrid)
                and (self.grid_size, self.order, self.lo, self.hi)
                == (other.grid_size, other.order, other.lo, other.hi))

    def __repr__(self):
        return (f"SplineGrid(grid_size={self.grid_size}, order={self.order}, "
                f"domain=[{self.lo}, {self.hi}])")


def _basis_upto(x: np.ndarray, grid: SplineGrid, stop_order: int) -> np.ndarray:
    """Cox-de Boor recursion up to ``stop_order``; returns (..., n) values."""
    t = grid.knots
    xe = x[..., None]
    b = ((xe >= t[:-1]) & (xe < t[1:])).astype(np.float64)
    for r in range(1, stop_order + 1):
        left = (xe - t[: -r - 1]) / (t[r:-1] - t[: -r - 1]) * b[..., :-1]
        right = (t[r + 1 :] - xe) / (t[r + 1 :] - t[1:-r]) * b[..., 1:]
        b = left + right
    return b


def bspline_basis_recursive(x, grid: SplineGrid) -> np.ndarray:
    """Basis values via the full Cox-de Boor recursion (reference path)."""
    x = np.atleast_1d(np.asarray(x, dtype=np.float64))
    return _basis_upto(x, grid, grid.order)


def bspline_basis_and_deriv_recursive(x, grid: SplineGrid):
    """Reference basis values and first derivatives, both (..., n_basis).

    The derivative uses the standard recursion
    dB_i^k = k * (B_i^{k-1}/(t_{i+k}-t_i) - B_{i+1}^{k-1}/(t_{i+k+1}-t_{i+1})).
    """
    x = np.atleast_1d(np.asarray(x, dtype=np.float64))
    k = grid.order
    t = grid.knots
    lower = _basis_upto(x, grid, k - 1)  # (..., n_basis + 1)
    xe = x[..., None]
    left = (xe - t[: -k - 1]) / (t[k:-1] - t[: -k - 1]) * lower[..., :-1]
    right = (t[k + 1 :] - xe) / (t[k + 1 :] - t[1:-k]) * lower[..., 1:]
    b = left + right
    db = k * (lower[..., :-1] / (t[k:-1] - t[: -k - 1])
              - lower[..., 1:] / (t[k + 1 :] - t[1:-k]))
    return b, db


def _local_segments(x: np.ndarray, grid: SplineGrid, want_deriv: bool):
    """Values (and optionally derivatives) of the ``order + 1`` bases active
    at each x, exploiting that uniform B-splines are shift-invariant.

    Returns (cell, vals, derivs) where ``cell + i`` is the dense basis index
    of column i (may fall outside [0, n_basis) near the boundary, where the
    truncated basis set drops those entries).
    """
    k = grid.order
    pos = (x - grid.lo) / grid.h
    cell = np.floor(pos).astype(np.int64)
    u = pos - cell

    def _cols(*parts):
        out = np.empty(u.shape + (len(parts),))
        for i, p in enumerate(parts):
            out[..., i] = p
        return out

    if k == 1:
        vals = _cols(1.0 - u, u)
        derivs = _cols(-np.ones_like(u), np.ones_like(u)) if want_deriv else None
    elif k == 2:
        vals = _cols(0.5 * (1.0 - u) ** 2,
                     0.5 * (-2.0 * u * u + 2.0 * u + 1.0),
                     0.5 * u * u)
        derivs = _cols(u - 1.0, 1.0 - 2.0 * u, u) if want_deriv else None
    elif k == 3:
        u2 = u * u
        u3 = u2 * u
        vals = _cols((1.0 - u) ** 3 / 6.0,
                     (3.0 * u3 - 6.0 * u2 + 4.0) / 6.0,
                     (-3.0 * u3 + 3.0 * u2 + 3.0 * u + 1.0) / 6.0,
                     u3 / 6.0)
        derivs = _cols(-0.5 * (1.0 - u) ** 2,
                       0.5 * (3.0 * u2 - 4.0 * u),
                       0.5 * (-3.0 * u2 + 2.0 * u + 1.0),
                       0.5 * u2) if want_deriv else None
    else:
        return None
    if want_deriv:
        derivs /= grid.h
    return cell, vals, derivs


def _scatter_dense(cell, vals, n_basis):
    """Place the k+1 active values at dense columns cell..cell+k, dropping
    columns outside [0, n_basis) (truncated boundary bases)."""
    width = vals.shape[-1]  # order + 1
    flat_cell = cell.reshape(-1)
    flat_vals = vals.reshape(-1, width)
    # clip far-out cells into a padding margin; their bases are all zero
    cell_c = np.clip(flat_cell, -width, n_basis)
    oob = cell_c != flat_cell
    if oob.any():
        flat_vals = flat_vals.copy()
        flat_vals[oob] = 0.0
    padded = np.zeros((flat_cell.size, n_basis + 2 * width))
    cols = (cell_c + width)[:, None] + np.arange(width)
    np.put_along_axis(padded, cols, flat_vals, axis=-1)
    return np.ascontiguousarray(padded[:, width: width + n_basis]).reshape(
        cell.shape + (n_basis,))


def bspline_basis(x, grid: SplineGrid) -> np.ndarray:
    """Basis values B_i(x), i = 0..n_basis-1; x scalar or array.

    Inside [lo, hi] the values form a partition of unity; at most
    ``order + 1`` entries are nonzero at any x. Orders 1..3 use the
    closed-form uniform segments; other orders fall back to the recursion.
    """
    x = np.atleast_1d(np.asarray(x, dtype=np.float64))
    local = _local_segments(x, grid, want_deriv=False)
    if local is None:
        return _basis_upto(x, grid, grid.order)
    cell, vals, _ = local
    return _scatter_dense(cell, vals, grid.n_basis)


def bspline_basis_and_deriv(x, grid: SplineGrid):
    """Basis values and their first derivatives, both (..., n_basis)."""
    x = np.atleast_1d(np.asarray(x, dtype=np.float64))
    local = _local_segments(x, grid, want_deriv=True)
    if local is None:
        return bspline_basis_and_deriv_recursive(x, grid)
    cell, vals, derivs = local
    return (_scatter_dense(cell, vals, grid.n_basis),
            _scatter_dense(cell, derivs, grid.n_basis))


@dataclass
class SplineEdge:
    """One learnable univariate function phi(x) = w_b*silu(x) + w_s*s(x)."""

    grid: SplineGrid
    coeffs: np.ndarray
    w_b: float = 1.0
    w_s: float = 1.0

    def __post_init__(self):
        self.coeffs = np.asarray(self.coeffs, dtype=np.float64)
        if self.coeffs.shape != (self.grid.n_basis,):
            raise DimensionError(
                f"edge coefficients must have length {self.grid.n_basis}, "
                f"got {self.coeffs.shape}"
            )


def edge_forward(edge: SplineEdge, x):
    """Evaluate phi at scalar or array x."""
    xs = np.atleast_1d(np.asarray(x, dtype=np.float64))
    val = edge.w_b * silu(xs) + edge.w_s * (bspline_basis(xs, edge.grid) @ edge.coeffs)
    return float(val[0]) if np.isscalar(x) or np.ndim(x) == 0 else val


def edge_backward(edge: SplineEdge, x: float, grad_out: float):
    """Exact derivatives of ``grad_out * phi(x)``.

    Returns (grad_x, grad_coeffs, grad_w_b, grad_w_s).
    """
    b, db = bspline_basis_and_deriv(np.float64(x), edge.grid)
    b, db = b[0], db[0]
    s_val = float(b @ edge.coeffs)
    grad_x = grad_out * (edge.w_b * float(silu_grad(x)) + edge.w_s * float(db @ edge.coeffs))
    grad_coeffs = grad_out * edge.w_s * b
    grad_w_b = grad_out * float(silu(x))
    grad_w_s = grad_out * s_val
    return grad_x, grad_coeffs, grad_w_b, grad_w_s


def sample_edge(edge: SplineEdge, xs) -> np.ndarray:
    """phi evaluated at each x in ``xs`` (activation-curve sampling)."""
    return edge_forward(edge, np.asarray(xs, dtype=np.float64))


class SplineBank:
    """Cout x Cin matrix of spline edges sharing one grid, applied along
    the channel axis of NCHW feature maps:

        out[n,o,h,w] = sum_c phi_{o,c}(x[n,c,h,w])
    """

    def __init__(self, in_channels: int, out_channels: int, grid: SplineGrid,
                 rng: np.random.Generator | None = None):
        if in_channels < 1 or out_channels < 1:
            raise ConfigurationError("SplineBank needs positive channel counts")
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.grid = grid
        nb = grid.n_basis
        if rng is None:
            coeffs = np.zeros((out_channels, in_channels, nb))
        else:
            coeffs = rng.normal(0.0, 0.1 / np.sqrt(nb), size=(out_channels, in_channels, nb))
        self.coeffs = Parameter(coeffs)
        self.w_b = Parameter(np.ones((out_channels, in_channels)))
        self.w_s = Parameter(np.ones((out_channels, in_channels)))

    def parameters(self):
        return [self.coeffs, self.w_b, self.w_s]

    def named_parameters(self, prefix: str = ""):
        return [(prefix + "coeffs", self.coeffs),
                (prefix + "w_b", self.w_b),
                (prefix + "w_s", self.w_s)]

    def edge(self, o: int, c: int) -> SplineEdge:
        """Copy of edge (o, c) for sampling or distillation."""
        return SplineEdge(self.grid, self.coeffs.value[o, c].copy(),
                          float(self.w_b.value[o, c]), float(self.w_s.value[o, c]))

    def forward(self, x: np.ndarray, need_grad: bool = False):
        """Apply the bank to (N,Cin,H,W); returns (out, cache)."""
        if x.ndim != 4 or x.shape[1] != self.in_channels:
            raise DimensionError(
                f"SplineBank expects (N,{self.in_channels},H,W), got {x.shape}"
            )
        n, _, h, w = x.shape
        xf = np.ascontiguousarray(x.transpose(0, 2, 3, 1), dtype=np.float64)
        xf = xf.reshape(-1, self.in_channels)  # (M, Cin)
        sig = _sigmoid(xf)
        sil = xf * sig
        if need_grad:
            basis, dbasis = bspline_basis_and_deriv(xf, self.grid)
        else:
            basis, dbasis = bspline_basis(xf, self.grid), None
        nb = self.grid.n_basis
        # spline term: contract (Cin, nb) against w_s-scaled coefficients
        sw = self.w_s.value[:, :, None] * self.coeffs.value  # (Cout,Cin,nb)
        out = basis.reshape(-1, self.in_channels * nb) @ sw.reshape(self.out_channels, -1).T
        out += sil @ self.w_b.value.T
        out = out.reshape(n, h, w, self.out_channels).transpose(0, 3, 1, 2)
        cache = (xf, sig, sil, basis, dbasis, (n, h, w))
        return np.ascontiguousarray(out), cache

    def backward(self, grad_out: np.ndarray, cache):
        """Accumulate parameter grads, return grad w.r.t. the input map."""
        xf, sig, sil, basis, dbasis, (n, h, w) = cache
        if dbasis is None:
            raise DimensionError("SplineBank.backward needs a forward with need_grad=True")
        gf = np.ascontiguousarray(grad_out.transpose(0, 2, 3, 1), dtype=np.float64)
        gf = gf.reshape(-1, self.out_channels)  # (M, Cout)
        nb = self.grid.n_basis

        self.w_b.grad += gf.T @ sil
        # t[o,c,i] = sum_m gf[m,o] * basis[m,c,i]
        t = (gf.T @ basis.reshape(-1, self.in_channels * nb)).reshape(
            self.out_channels, self.in_channels, nb)
        self.coeffs.grad += self.w_s.value[:, :, None] * t
        self.w_s.grad += np.einsum("oci,oci->oc", t, self.coeffs.value)

        sw = self.w_s.value[:, :, None] * self.coeffs.value
        u = (gf @ sw.reshape(self.out_channels, -1)).reshape(-1, self.in_channels, nb)
        grad_xf = (u * dbasis).sum(axis=2)
        grad_xf += (gf @ self.w_b.value) * (sig * (1.0 + xf * (1.0 - sig)))
        grad_x = grad_xf.reshape(n, h, w, self.in_channels).transpose(0, 3, 1, 2)
        return np.ascontiguousarray(grad_x)
