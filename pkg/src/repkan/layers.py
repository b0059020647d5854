"""Dual-path block: multi-branch spatial convolutions plus a channel-wise
spline bank, with train-time and fused deploy-time forms.

Train structure:   out = BN(conv1x1(x)) + BN(conv3x3(x)) + bank(x)
Deploy structure:  out = conv3x3(x; W_deploy) + B + bank(x)

``fuse`` folds each branch's batch norm into its kernel using the running
statistics, zero-pads the 1x1 kernel into the center of a 3x3 one, and
sums branches. The spline bank is non-linear and is carried over
untouched. Spatial size is preserved (stride 1; padding 1 on the 3x3
branch, 0 on the 1x1 branch); downsampling belongs to transition convs
outside the block.
"""

import numpy as np

from . import ops
from .errors import DimensionError, StateError
from .params import Parameter
from .splines import SplineBank, SplineGrid


class BatchNorm2d:
    """Per-channel batch norm with running statistics."""

    def __init__(self, channels: int, momentum: float = ops.BN_MOMENTUM,
                 eps: float = ops.BN_EPS):
        self.channels = channels
        self.momentum = momentum
        self.eps = eps
        self.gamma = Parameter(np.ones(channels))
        self.beta = Parameter(np.zeros(channels))
        self.running_mean = np.zeros(channels)
        self.running_var = np.ones(channels)
        self.populated = False  # set by a train-mode forward or a checkpoint load

    def forward(self, x, mode: str):
        out, cache = ops.batchnorm2d(x, self.gamma.value, self.beta.value,
                                     self.running_mean, self.running_var,
                                     eps=self.eps, mode=mode, momentum=self.momentum)
        if mode == "train":
            self.populated = True
        return out, cache

    def backward(self, grad_out, cache):
        grad_x, g_gamma, g_beta = ops.batchnorm2d_backward(grad_out, self.gamma.value, cache)
        self.gamma.grad += g_gamma
        self.beta.grad += g_beta
        return grad_x

    def fold(self):
        """(scale, shift) such that eval-mode BN(x) == scale*x + shift per channel."""
        if not self.populated:
            raise StateError("batch norm running statistics not populated; "
                             "run a train-mode forward or load a checkpoint first")
        inv_std = 1.0 / np.sqrt(self.running_var + self.eps)
        scale = self.gamma.value * inv_std
        shift = self.beta.value - self.running_mean * scale
        return scale, shift

    def named_parameters(self, prefix=""):
        return [(prefix + "gamma", self.gamma), (prefix + "beta", self.beta)]

    def named_buffers(self, prefix=""):
        return [(prefix + "running_mean", self.running_mean),
                (prefix + "running_var", self.running_var)]


class ConvBN:
    """Bias-free convolution followed by batch norm."""

    def __init__(self, in_channels, out_channels, kernel_size, stride=1, padding=0,
                 rng: np.random.Generator | None = None):
        fan_in = in_channels * kernel_size * kernel_size
        shape = (out_channels, in_channels, kernel_size, kernel_size)
        kernel = np.zeros(shape) if rng is None else rng.normal(0.0, fan_in**-0.5, shape)
        self.kernel = Parameter(kernel)
        self.stride = stride
        self.padding = padding
        self.bn = BatchNorm2d(out_channels)
        self._zero_bias = np.zeros(out_channels)

    @property
    def in_channels(self):
        return self.kernel.shape[1]

    @property
    def out_channels(self):
        return self.kernel.shape[0]

    def forward(self, x, bn_mode: str, need_grad: bool = False):
        conv_out = ops.conv2d(x, self.kernel.value, self._zero_bias,
                              stride=self.stride, padding=self.padding)
        out, bn_cache = self.bn.forward(conv_out, bn_mode)
        cache = (x, bn_cache) if need_grad else None
        return out, cache

    def backward(self, grad_out, cache):
        x, bn_cache = cache
        grad_conv = self.bn.backward(grad_out, bn_cache)
        grad_x, grad_kernel, _ = ops.conv2d_backward(x, self.kernel.value, grad_conv,
                                                     stride=self.stride, padding=self.padding)
        self.kernel.grad += grad_kernel
        return grad_x

    def fuse(self):
        """Fold BN into the kernel: returns (weight, bias) of the equivalent conv."""
        scale, shift = self.bn.fold()
        return self.kernel.value * scale[:, None, None, None], shift.copy()

    def named_parameters(self, prefix=""):
        return [(prefix + "kernel", self.kernel)] + self.bn.named_parameters(prefix + "bn.")

    def named_buffers(self, prefix=""):
        return self.bn.named_buffers(prefix + "bn.")


class FusedConv:
    """Plain conv with bias, produced by folding ConvBN."""

    def __init__(self, weight, bias, stride=1, padding=0):
        self.weight = Parameter(weight)
        self.bias = Parameter(bias)
        self.stride = stride
        self.padding = padding

    def forward(self, x):
        return ops.conv2d(x, self.weight.value, self.bias.value,
                          stride=self.stride, padding=self.padding)

    def named_parameters(self, prefix=""):
        return [(prefix + "weight", self.weight), (prefix + "bias", self.bias)]

    def named_buffers(self, prefix=""):
        return []


def pad_1x1_to_3x3(kernel_1x1: np.ndarray) -> np.ndarray:
    """Place a 1x1 kernel at the center of a zero 3x3 kernel."""
    out = np.zeros(kernel_1x1.shape[:2] + (3, 3))
    out[:, :, 1, 1] = kernel_1x1[:, :, 0, 0]
    return out


class RepKanLayer:
    """The dual-path block; ``mode`` is "train" or "deploy"."""

    def __init__(self, in_channels: int, out_channels: int, grid: SplineGrid,
                 rng: np.random.Generator | None = None):
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.mode = "train"
        self.branch1 = ConvBN(in_channels, out_channels, 1, padding=0, rng=rng)
        self.branch3 = ConvBN(in_channels, out_channels, 3, padding=1, rng=rng)
        self.bank = SplineBank(in_channels, out_channels, grid, rng=rng)
        self.w_deploy: Parameter | None = None
        self.b_deploy: Parameter | None = None

    def forward(self, x, bn_mode: str = "train", need_grad: bool = False):
        """Returns (out, cache); cache is None unless need_grad."""
        if x.ndim != 4 or x.shape[1] != self.in_channels:
            raise DimensionError(
                f"RepKanLayer expects (N,{self.in_channels},H,W), got {x.shape}"
            )
        spatial, spectral, cache = self._paths(x, bn_mode, need_grad)
        return spatial + spectral, cache

    def forward_paths(self, x, bn_mode: str = "eval"):
        """(spatial, spectral) path outputs, for interpretability reports."""
        spatial, spectral, _ = self._paths(x, bn_mode, need_grad=False)
        return spatial, spectral

    def _paths(self, x, bn_mode, need_grad):
        if self.mode == "deploy":
            if bn_mode == "train":
                raise StateError("deploy-mode layer has no train-mode batch norm")
            spatial = ops.conv2d(x, self.w_deploy.value, self.b_deploy.value,
                                 stride=1, padding=1)
            spectral, bank_cache = self.bank.forward(x, need_grad=need_grad)
            return spatial, spectral, (None, None, bank_cache) if need_grad else None
        out1, c1 = self.branch1.forward(x, bn_mode, need_grad)
        out3, c3 = self.branch3.forward(x, bn_mode, need_grad)
        spectral, bank_cache = self.bank.forward(x, need_grad=need_grad)
        cache = (c1, c3, bank_cache) if need_grad else None
        return out1 + out3, spectral, cache

    def backward(self, grad_out, cache):
        if self.mode == "deploy":
            raise StateError("deploy-mode layer does not support backward")
        c1, c3, bank_cache = cache
        grad_x = self.branch1.backward(grad_out, c1)
        grad_x += self.branch3.backward(grad_out, c3)
        grad_x += self.bank.backward(grad_out, bank_cache)
        return grad_x

    def fuse(self) -> "RepKanLayer":
        """Fold both conv+BN branches into one 3x3 conv; bank copied as-is."""
        if self.mode == "deploy":
            raise StateError("layer is already fused")
        w1, b1 = self.branch1.fuse()
        w3, b3 = self.branch3.fuse()
        fused = RepKanLayer.__new__(RepKanLayer)
        fused.in_channels = self.in_channels
        fused.out_channels = self.out_channels
        fused.mode = "deploy"
        fused.branch1 = fused.branch3 = None
        fused.w_deploy = Parameter(w3 + pad_1x1_to_3x3(w1))
        fused.b_deploy = Parameter(b3 + b1)
        bank = SplineBank(self.in_channels, self.out_channels, self.bank.grid)
        bank.coeffs.value[...] = self.bank.coeffs.value
        bank.w_b.value[...] = self.bank.w_b.value
        bank.w_s.value[...] = self.bank.w_s.value
        fused.bank = bank
        return fused

    def spatial_param_reads(self) -> int:
        """Kernel parameters read by one spatial-path forward."""
        if self.mode == "deploy":
            return 9 * self.out_channels * self.in_channels
        return 10 * self.out_channels * self.in_channels

    def named_parameters(self, prefix=""):
        if self.mode == "deploy":
            named = [(prefix + "w_deploy", self.w_deploy),
                     (prefix + "b_deploy", self.b_deploy)]
        else:
            named = (self.branch1.named_parameters(prefix + "branch1.")
                     + self.branch3.named_parameters(prefix + "branch3."))
        return named + self.bank.named_parameters(prefix + "bank.")

    def named_buffers(self, prefix=""):
        if self.mode == "deploy":
            return []
        return (self.branch1.named_buffers(prefix + "branch1.")
                + self.branch3.named_buffers(prefix + "branch3."))
