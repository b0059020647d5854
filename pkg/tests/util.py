"""Shared test oracles: finite differences and naive reference loops.

These stay deliberately independent of the package's fast paths; they are
the ground truth the implementations are checked against.
"""

import numpy as np

FD_EPS = 1e-6


def central_diff(f, arr, index, eps=FD_EPS):
    """d f / d arr[index] by central differences; f takes no arguments and
    reads ``arr`` by reference."""
    old = arr[index]
    arr[index] = old + eps
    plus = f()
    arr[index] = old - eps
    minus = f()
    arr[index] = old
    return (plus - minus) / (2.0 * eps)


def check_grad_coords(f, arr, analytic, rng, n_points=20, eps=FD_EPS,
                      rtol=1e-5, abs_floor=1e-8):
    """Compare analytic gradients against central differences at randomly
    chosen coordinates. Elements with |analytic| < abs_floor are compared
    absolutely, the rest relatively."""
    for _ in range(n_points):
        index = tuple(rng.integers(0, s) for s in arr.shape)
        fd = central_diff(f, arr, index, eps)
        a = analytic[index]
        if abs(a) < abs_floor and abs(fd) < abs_floor:
            assert abs(a - fd) < abs_floor, (index, a, fd)
        else:
            rel = abs(a - fd) / max(abs(fd), abs(a), 1e-300)
            assert rel < rtol, (index, a, fd, rel)


def conv2d_loops(x, kernel, bias, stride=1, padding=0):
    """Six-nested-loop cross-correlation, the reference for conv2d."""
    n, cin, h, w = x.shape
    cout, _, kh, kw = kernel.shape
    oh = (h + 2 * padding - kh) // stride + 1
    ow = (w + 2 * padding - kw) // stride + 1
    xp = np.zeros((n, cin, h + 2 * padding, w + 2 * padding))
    xp[:, :, padding : padding + h, padding : padding + w] = x
    out = np.zeros((n, cout, oh, ow))
    for b in range(n):
        for o in range(cout):
            for i in range(oh):
                for j in range(ow):
                    acc = bias[o]
                    for c in range(cin):
                        for u in range(kh):
                            for v in range(kw):
                                acc += xp[b, c, i * stride + u, j * stride + v] \
                                    * kernel[o, c, u, v]
                    out[b, o, i, j] = acc
    return out


def spearman(a, b) -> float:
    """Spearman rank correlation (no tie correction; inputs are continuous)."""
    ra = np.argsort(np.argsort(a)).astype(np.float64)
    rb = np.argsort(np.argsort(b)).astype(np.float64)
    ra -= ra.mean()
    rb -= rb.mean()
    return float((ra * rb).sum() / np.sqrt((ra * ra).sum() * (rb * rb).sum()))
