"""Hierarchical classifier: stem embedding, residual dual-path stages,
global-average-pooled linear head.

Within a stage every block keeps its width, so each block is wrapped in a
residual connection (zeroing a block's parameters turns it into an
identity). Stride-2 transition convs between stages halve the spatial
resolution and change width; they carry no residual.
"""

from dataclasses import dataclass, field

import numpy as np

from . import ops
from .errors import ConfigurationError, DimensionError, StateError
from .layers import ConvBN, FusedConv, RepKanLayer
from .params import Parameter
from .splines import SplineGrid
from . import rng as rng_mod


@dataclass
class ModelConfig:
    in_channels: int = 13
    stage_widths: tuple = (32, 64, 128)
    blocks_per_stage: tuple = (1, 1, 1)
    grid_size: int = 3
    spline_order: int = 3
    num_classes: int = 4
    input_hw: tuple = (16, 16)

    def __post_init__(self):
        self.stage_widths = tuple(int(w) for w in self.stage_widths)
        self.blocks_per_stage = tuple(int(b) for b in self.blocks_per_stage)
        self.input_hw = tuple(int(v) for v in self.input_hw)
        if len(self.stage_widths) != len(self.blocks_per_stage) or not self.stage_widths:
            raise ConfigurationError(
                "stage_widths and blocks_per_stage must be equal-length, non-empty")
        if min(self.stage_widths) < 1 or min(self.blocks_per_stage) < 1:
            raise ConfigurationError("stage widths and block counts must be positive")
        if self.in_channels < 1 or self.num_classes < 1:
            raise ConfigurationError("in_channels and num_classes must be positive")
        factor = 2 ** (len(self.stage_widths) - 1)
        h, w = self.input_hw
        if h % factor or w % factor:
            raise ConfigurationError(
                f"input size {h}x{w} must be divisible by {factor} "
                f"for {len(self.stage_widths)} stages")

    @property
    def n_stages(self) -> int:
        return len(self.stage_widths)

    def to_dict(self) -> dict:
        return {
            "in_channels": self.in_channels,
            "stage_widths": list(self.stage_widths),
            "blocks_per_stage": list(self.blocks_per_stage),
            "grid_size": self.grid_size,
            "spline_order": self.spline_order,
            "num_classes": self.num_classes,
            "input_hw": list(self.input_hw),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**{k: tuple(v) if isinstance(v, list) else v for k, v in d.items()})


@dataclass
class _ForwardCache:
    stem: object = None
    blocks: list = field(default_factory=list)       # per stage: list of block caches
    transitions: list = field(default_factory=list)
    feat_hw: tuple = None
    feat: np.ndarray = None


class RepKanModel:
    """Stem ConvBN -> stages of residual RepKanLayers with stride-2
    transitions -> GAP -> linear head."""

    def __init__(self, config: ModelConfig, seed: int = 0):
        self.config = config
        self.seed = seed
        self.mode = "train"
        rng = rng_mod.stream(seed, rng_mod.STREAM_INIT)
        grid = SplineGrid(config.grid_size, config.spline_order)
        self.grid = grid

        widths = config.stage_widths
        self.stem = ConvBN(config.in_channels, widths[0], 3, stride=1, padding=1, rng=rng)
        self.stages = []
        self.transitions = []
        for si, width in enumerate(widths):
            blocks = [RepKanLayer(width, width, grid, rng=rng)
                      for _ in range(config.blocks_per_stage[si])]
            self.stages.append(blocks)
            if si + 1 < len(widths):
                self.transitions.append(
                    ConvBN(width, widths[si + 1], 3, stride=2, padding=1, rng=rng))
        d = widths[-1]
        self.head_w = Parameter(rng.normal(0.0, d**-0.5, (config.num_classes, d)))
        self.head_b = Parameter(np.zeros(config.num_classes))

    # ------------------------------------------------------------------ forward

    def _check_images(self, images):
        if images.ndim != 4 or images.shape[1] != self.config.in_channels:
            raise DimensionError(
                f"model expects (N,{self.config.in_channels},H,W), got {images.shape}")

    def forward(self, images, bn_mode: str = "eval", need_grad: bool = False):
        """Returns (logits, cache); cache is usable by :meth:`backward`."""
        self._check_images(images)
        if self.mode == "deploy" and bn_mode == "train":
            raise StateError("deploy-mode model has no train-mode batch norm")
        cache = _ForwardCache()
        t = self._stem_forward(images, bn_mode, need_grad, cache)
        for si, blocks in enumerate(self.stages):
            stage_caches = []
            for block in blocks:
                y, bc = block.forward(t, bn_mode=bn_mode, need_grad=need_grad)
                t = t + y
                stage_caches.append(bc)
            cache.blocks.append(stage_caches)
            if si < len(self.transitions):
                t = self._transition_forward(si, t, bn_mode, need_grad, cache)
        cache.feat_hw = t.shape[2:]
        feat = ops.global_avg_pool(t)
        cache.feat = feat if need_grad else None
        logits = ops.linear(feat, self.head_w.value, self.head_b.value)
        return logits, (cache if need_grad else None)

    def _stem_forward(self, x, bn_mode, need_grad, cache):
        if self.mode == "deploy":
            return self.stem.forward(x)
        out, sc = self.stem.forward(x, bn_mode, need_grad)
        cache.stem = sc
        return out

    def _transition_forward(self, si, x, bn_mode, need_grad, cache):
        tr = self.transitions[si]
        if self.mode == "deploy":
            return tr.forward(x)
        out, tc = tr.forward(x, bn_mode, need_grad)
        cache.transitions.append(tc)
        return out

    def backward(self, grad_logits, cache: _ForwardCache):
        """Accumulate parameter grads; returns grad w.r.t. the input images."""
        if self.mode == "deploy":
            raise StateError("deploy-mode model does not support backward")
        grad_feat, gw, gb = ops.linear_backward(cache.feat, self.head_w.value, grad_logits)
        self.head_w.grad += gw
        self.head_b.grad += gb
        grad_t = ops.global_avg_pool_backward(grad_feat, *cache.feat_hw)
        for si in reversed(range(len(self.stages))):
            if si < len(self.transitions):
                grad_t = self.transitions[si].backward(grad_t, cache.transitions[si])
            for block, bc in zip(reversed(self.stages[si]), reversed(cache.blocks[si])):
                grad_t = grad_t + block.backward(grad_t, bc)
        return self.stem.backward(grad_t, cache.stem)

    def predict(self, images) -> np.ndarray:
        """Class indices; ties break toward the lowest index."""
        logits, _ = self.forward(images, bn_mode="eval")
        return np.argmax(logits, axis=1)

    # ------------------------------------------------------------------ fusion

    def fuse(self) -> "RepKanModel":
        """Fold every BN and branch pair; returns a deploy-mode model."""
        if self.mode == "deploy":
            raise StateError("model is already fused")
        fused = RepKanModel.__new__(RepKanModel)
        fused.config = self.config
        fused.seed = self.seed
        fused.mode = "deploy"
        fused.grid = self.grid
        fused.stem = FusedConv(*self.stem.fuse(), stride=1, padding=1)
        fused.stages = [[b.fuse() for b in blocks] for blocks in self.stages]
        fused.transitions = [FusedConv(*t.fuse(), stride=2, padding=1)
                             for t in self.transitions]
        fused.head_w = Parameter(self.head_w.value.copy())
        fused.head_b = Parameter(self.head_b.value.copy())
        return fused

    # ------------------------------------------------------------------ plumbing

    def named_parameters(self):
        named = self.stem.named_parameters("stem.")
        for si, blocks in enumerate(self.stages):
            for bi, block in enumerate(blocks):
                named += block.named_parameters(f"stages.{si}.{bi}.")
            if si < len(self.transitions):
                named += self.transitions[si].named_parameters(f"transitions.{si}.")
        named += [("head.weight", self.head_w), ("head.bias", self.head_b)]
        return named

    def named_buffers(self):
        named = self.stem.named_buffers("stem.")
        for si, blocks in enumerate(self.stages):
            for bi, block in enumerate(blocks):
                named += block.named_buffers(f"stages.{si}.{bi}.")
            if si < len(self.transitions):
                named += self.transitions[si].named_buffers(f"transitions.{si}.")
        return named

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def zero_grad(self):
        for p in self.parameters():
            p.zero_grad()

    def bn_populated(self) -> bool:
        if self.mode == "deploy":
            return True
        bns = [self.stem.bn] + [t.bn for t in self.transitions]
        bns += [br.bn for blocks in self.stages for b in blocks
                for br in (b.branch1, b.branch3)]
        return all(bn.populated for bn in bns)

    def set_bn_populated(self) -> None:
        if self.mode == "deploy":
            return
        self.stem.bn.populated = True
        for t in self.transitions:
            t.bn.populated = True
        for blocks in self.stages:
            for b in blocks:
                b.branch1.bn.populated = True
                b.branch3.bn.populated = True

    def param_count(self) -> int:
        return sum(p.value.size for p in self.parameters())

    def spline_param_count(self) -> int:
        """Cout*Cin*(n_basis + 2) summed over blocks: coefficients plus the
        two path weights per edge."""
        total = 0
        for blocks in self.stages:
            for b in blocks:
                nb = b.bank.grid.n_basis
                total += b.bank.out_channels * b.bank.in_channels * (nb + 2)
        return total

    # -------------------------------------------------------- interpretability

    def stage_paths(self, images, stage: int):
        """Eval-mode path outputs of the first block of ``stage`` (1-based).

        Returns (block_input, spatial_out, spectral_out).
        """
        self._check_images(images)
        if not 1 <= stage <= len(self.stages):
            raise ConfigurationError(f"stage must be in [1, {len(self.stages)}]")
        t = self._plain_stem(images)
        for si, blocks in enumerate(self.stages):
            for bi, block in enumerate(blocks):
                if si == stage - 1 and bi == 0:
                    spatial, spectral = block.forward_paths(t, bn_mode="eval")
                    return t, spatial, spectral
                y, _ = block.forward(t, bn_mode="eval")
                t = t + y
            if si < len(self.transitions):
                t = self._plain_transition(si, t)
        raise AssertionError("unreachable")

    def _plain_stem(self, x):
        if self.mode == "deploy":
            return self.stem.forward(x)
        out, _ = self.stem.forward(x, "eval")
        return out

    def _plain_transition(self, si, x):
        if self.mode == "deploy":
            return self.transitions[si].forward(x)
        out, _ = self.transitions[si].forward(x, "eval")
        return out

    def stage_bank(self, stage: int):
        """Spline bank of the first block of ``stage`` (1-based)."""
        if not 1 <= stage <= len(self.stages):
            raise ConfigurationError(f"stage must be in [1, {len(self.stages)}]")
        return self.stages[stage - 1][0].bank

    def stage_downsample_factor(self, stage: int) -> int:
        """Spatial downsampling between the input image and ``stage``."""
        return 2 ** (stage - 1)
