"""Dense tensor operations with hand-derived backward passes.

Conventions
-----------
* Activations are C-contiguous ``float64`` numpy arrays in NCHW order
  (batch, channels, height, width).
* Every forward op allocates a fresh output; inputs are never mutated
  (the single exception is ``batchnorm2d`` updating the running-stat
  buffers it is handed in train mode, which is its documented job).
* ``conv2d`` means cross-correlation (no kernel flip), kernel sizes are
  restricted to 1x1 and 3x3, and the reference semantics are the naive
  direct loops in ``conv2d_naive``; the default windowed path must stay
  numerically on top of it (tested to 1e-10).
* Backward functions return gradients of ``sum(grad_out * f(...))`` with
  respect to each argument.
"""

import numpy as np

from .errors import ConfigurationError, DimensionError, InputError

BN_MOMENTUM = 0.1
BN_EPS = 1e-5


def _as_f64(x) -> np.ndarray:
    return np.ascontiguousarray(x, dtype=np.float64)


def _conv_out_size(size: int, k: int, stride: int, padding: int) -> int:
    # floor semantics: trailing positions that do not fit a full window are
    # dropped (with stride 2, k 3, padding 1 on even sizes only padding is
    # dropped and the size halves exactly)
    span = size + 2 * padding - k
    if span < 0:
        raise ConfigurationError(
            f"conv2d: kernel {k} with padding {padding} does not fit input size {size}"
        )
    return span // stride + 1


def _check_conv_args(x, kernel, bias, stride, padding):
    if x.ndim != 4 or kernel.ndim != 4:
        raise DimensionError("conv2d expects 4-D input and kernel")
    if kernel.shape[2] not in (1, 3) or kernel.shape[3] not in (1, 3):
        raise ConfigurationError("conv2d supports 1x1 and 3x3 kernels only")
    if kernel.shape[1] != x.shape[1]:
        raise DimensionError(
            f"conv2d: kernel expects {kernel.shape[1]} input channels, got {x.shape[1]}"
        )
    if bias.shape != (kernel.shape[0],):
        raise DimensionError("conv2d: bias must have one entry per output channel")
    if stride < 1:
        raise ConfigurationError("conv2d: stride must be positive")
    if padding < 0:
        raise ConfigurationError("conv2d: padding must be non-negative")


def _pad_nchw(x: np.ndarray, padding: int) -> np.ndarray:
    if padding == 0:
        return x
    n, c, h, w = x.shape
    out = np.zeros((n, c, h + 2 * padding, w + 2 * padding))
    out[:, :, padding : padding + h, padding : padding + w] = x
    return out


def _windows(xp: np.ndarray, kh: int, kw: int, stride: int, oh: int, ow: int) -> np.ndarray:
    """Strided view (N, C, OH, OW, kh, kw) over the padded input."""
    n, c = xp.shape[:2]
    sn, sc, sh, sw = xp.strides
    return np.lib.stride_tricks.as_strided(
        xp,
        shape=(n, c, oh, ow, kh, kw),
        strides=(sn, sc, sh * stride, sw * stride, sh, sw),
        writeable=False,
    )


def conv2d(x, kernel, bias, stride: int = 1, padding: int = 0) -> np.ndarray:
    """Cross-correlate ``x`` (N,Cin,H,W) with ``kernel`` (Cout,Cin,kh,kw).

    Windowed fast path; same result as :func:`conv2d_naive`.
    """
    x, kernel, bias = _as_f64(x), _as_f64(kernel), _as_f64(bias)
    _check_conv_args(x, kernel, bias, stride, padding)
    kh, kw = kernel.shape[2:]
    oh = _conv_out_size(x.shape[2], kh, stride, padding)
    ow = _conv_out_size(x.shape[3], kw, stride, padding)
    win = _windows(_pad_nchw(x, padding), kh, kw, stride, oh, ow)
    # (N,OH,OW,Cout) <- contract (Cin,kh,kw)
    out = np.tensordot(win, kernel, axes=([1, 4, 5], [1, 2, 3]))
    out += bias
    return np.ascontiguousarray(out.transpose(0, 3, 1, 2))


def conv2d_naive(x, kernel, bias, stride: int = 1, padding: int = 0) -> np.ndarray:
    """Reference direct convolution (slow nested loops, small inputs only)."""
    x, kernel, bias = _as_f64(x), _as_f64(kernel), _as_f64(bias)
    _check_conv_args(x, kernel, bias, stride, padding)
    n, cin, _, _ = x.shape
    cout, _, kh, kw = kernel.shape
    oh = _conv_out_size(x.shape[2], kh, stride, padding)
    ow = _conv_out_size(x.shape[3], kw, stride, padding)
    xp = _pad_nchw(x, padding)
    out = np.zeros((n, cout, oh, ow))
    for b in range(n):
        for o in range(cout):
            for i in range(oh):
                for j in range(ow):
                    acc = 0.0
                    for c in range(cin):
                        for u in range(kh):
                            for v in range(kw):
                                acc += xp[b, c, i * stride + u, j * stride + v] * kernel[o, c, u, v]
                    out[b, o, i, j] = acc + bias[o]
    return out


def conv2d_backward(x, kernel, grad_out, stride: int = 1, padding: int = 0):
    """Gradients of conv2d w.r.t. (input, kernel, bias)."""
    x, kernel, grad_out = _as_f64(x), _as_f64(kernel), _as_f64(grad_out)
    kh, kw = kernel.shape[2:]
    oh = _conv_out_size(x.shape[2], kh, stride, padding)
    ow = _conv_out_size(x.shape[3], kw, stride, padding)
    if grad_out.shape != (x.shape[0], kernel.shape[0], oh, ow):
        raise DimensionError(
            f"conv2d_backward: grad_out shape {grad_out.shape} does not match "
            f"forward output {(x.shape[0], kernel.shape[0], oh, ow)}"
        )
    xp = _pad_nchw(x, padding)
    win = _windows(xp, kh, kw, stride, oh, ow)

    grad_bias = grad_out.sum(axis=(0, 2, 3))
    # (Cout,Cin,kh,kw) <- contract (N,OH,OW)
    grad_kernel = np.tensordot(grad_out, win, axes=([0, 2, 3], [0, 2, 3]))

    # scatter-add kernel taps back onto the padded input grid
    gcol = np.tensordot(grad_out, kernel, axes=(1, 0))  # (N,OH,OW,Cin,kh,kw)
    grad_xp = np.zeros_like(xp)
    for u in range(kh):
        for v in range(kw):
            grad_xp[:, :, u : u + stride * oh : stride, v : v + stride * ow : stride] += (
                gcol[:, :, :, :, u, v].transpose(0, 3, 1, 2)
            )
    if padding:
        grad_x = grad_xp[:, :, padding:-padding, padding:-padding]
    else:
        grad_x = grad_xp
    return np.ascontiguousarray(grad_x), grad_kernel, grad_bias


def batchnorm2d(x, gamma, beta, running_mean, running_var, eps: float = BN_EPS,
                mode: str = "train", momentum: float = BN_MOMENTUM):
    """Per-channel batch normalization over (N,H,W).

    Train mode normalizes with biased batch statistics and updates
    ``running_mean``/``running_var`` in place (running variance stores the
    unbiased estimate). Eval mode applies the running statistics as a
    fixed affine map. Returns ``(out, cache)``; feed ``cache`` to
    :func:`batchnorm2d_backward` (train mode only).
    """
    x = _as_f64(x)
    if eps <= 0:
        raise ConfigurationError("batchnorm2d: eps must be > 0")
    if x.ndim != 4:
        raise DimensionError("batchnorm2d expects NCHW input")
    c = x.shape[1]
    for name, arr in (("gamma", gamma), ("beta", beta),
                      ("running_mean", running_mean), ("running_var", running_var)):
        if arr.shape != (c,):
            raise DimensionError(f"batchnorm2d: {name} must have shape ({c},)")
    if mode not in ("train", "eval"):
        raise InputError(f"batchnorm2d: unknown mode {mode!r}")

    if mode == "eval":
        inv_std = 1.0 / np.sqrt(running_var + eps)
        xhat = (x - running_mean[None, :, None, None]) * inv_std[None, :, None, None]
        out = gamma[None, :, None, None] * xhat + beta[None, :, None, None]
        return out, ("eval", xhat, inv_std)

    m = x.shape[0] * x.shape[2] * x.shape[3]
    if m < 2:
        raise ConfigurationError("batchnorm2d train mode needs at least 2 values per channel")
    mean = x.mean(axis=(0, 2, 3))
    var = x.var(axis=(0, 2, 3))  # biased, used for normalization
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x - mean[None, :, None, None]) * inv_std[None, :, None, None]
    out = gamma[None, :, None, None] * xhat + beta[None, :, None, None]
    running_mean *= 1.0 - momentum
    running_mean += momentum * mean
    running_var *= 1.0 - momentum
    running_var += momentum * var * (m / (m - 1.0))
    return out, ("train", xhat, inv_std)


def batchnorm2d_backward(grad_out, gamma, cache):
    """Gradients of train-mode batchnorm2d w.r.t. (x, gamma, beta)."""
    kind, xhat, inv_std = cache
    grad_out = _as_f64(grad_out)
    grad_gamma = (grad_out * xhat).sum(axis=(0, 2, 3))
    grad_beta = grad_out.sum(axis=(0, 2, 3))
    if kind == "eval":
        grad_x = grad_out * (gamma * inv_std)[None, :, None, None]
        return grad_x, grad_gamma, grad_beta
    g_mean = grad_out.mean(axis=(0, 2, 3))
    gx_mean = (grad_out * xhat).mean(axis=(0, 2, 3))
    grad_x = (gamma * inv_std)[None, :, None, None] * (
        grad_out - g_mean[None, :, None, None] - xhat * gx_mean[None, :, None, None]
    )
    return grad_x, grad_gamma, grad_beta


def global_avg_pool(x) -> np.ndarray:
    """Spatial mean: (N,C,H,W) -> (N,C)."""
    x = _as_f64(x)
    if x.ndim != 4:
        raise DimensionError("global_avg_pool expects NCHW input")
    return x.mean(axis=(2, 3))


def global_avg_pool_backward(grad_out, h: int, w: int) -> np.ndarray:
    grad_out = _as_f64(grad_out)
    return np.broadcast_to(grad_out[:, :, None, None] / (h * w),
                           grad_out.shape + (h, w)).copy()


def linear(x, weight, bias) -> np.ndarray:
    """Affine map: (N,D) @ (K,D)^T + (K,)."""
    x, weight, bias = _as_f64(x), _as_f64(weight), _as_f64(bias)
    if x.ndim != 2 or weight.ndim != 2 or x.shape[1] != weight.shape[1]:
        raise DimensionError(
            f"linear: input {x.shape} incompatible with weight {weight.shape}"
        )
    if bias.shape != (weight.shape[0],):
        raise DimensionError("linear: bias must have one entry per output feature")
    return x @ weight.T + bias


def linear_backward(x, weight, grad_out):
    x, weight, grad_out = _as_f64(x), _as_f64(weight), _as_f64(grad_out)
    if grad_out.shape != (x.shape[0], weight.shape[0]):
        raise DimensionError("linear_backward: grad_out shape mismatch")
    return grad_out @ weight, grad_out.T @ x, grad_out.sum(axis=0)


def softmax(logits) -> np.ndarray:
    """Row-wise softmax, stabilized by max subtraction."""
    logits = _as_f64(logits)
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def softmax_cross_entropy(logits, labels):
    """Mean negative log-likelihood and its logit gradient.

    Returns ``(loss, grad_logits)`` with ``grad = (softmax - onehot) / N``.
    """
    logits = _as_f64(logits)
    labels = np.asarray(labels, dtype=np.int64)
    n, k = logits.shape
    if labels.shape != (n,):
        raise DimensionError("softmax_cross_entropy: one label per row required")
    if labels.min(initial=0) < 0 or labels.max(initial=0) >= k:
        raise InputError(f"softmax_cross_entropy: labels must lie in [0, {k})")
    z = logits - logits.max(axis=1, keepdims=True)
    log_norm = np.log(np.exp(z).sum(axis=1))
    loss = float(np.mean(log_norm - z[np.arange(n), labels]))
    grad = softmax(logits)
    grad[np.arange(n), labels] -= 1.0
    grad /= n
    return loss, grad
