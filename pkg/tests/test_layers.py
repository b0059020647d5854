"""Dual-path block behaviour: path composition, backward, branch fusion."""

import numpy as np
import pytest

from repkan.errors import StateError
from repkan.layers import ConvBN, RepKanLayer, pad_1x1_to_3x3
from repkan.splines import SplineGrid

from util import check_grad_coords


def make_layer(cin=3, cout=4, grid_size=5, seed=0) -> RepKanLayer:
    return RepKanLayer(cin, cout, SplineGrid(grid_size, 3),
                       rng=np.random.default_rng(seed))


def zero_bank(layer: RepKanLayer) -> None:
    layer.bank.coeffs.value[...] = 0.0
    layer.bank.w_b.value[...] = 0.0
    layer.bank.w_s.value[...] = 0.0


def transparent_bn(bn) -> None:
    bn.gamma.value[...] = 1.0
    bn.beta.value[...] = 0.0
    bn.running_mean[...] = 0.0
    bn.running_var[...] = 1.0 - bn.eps  # folds to an exact identity
    bn.populated = True


class TestForward:
    def test_zero_bank_leaves_spatial_path(self):
        rng = np.random.default_rng(0)
        layer = make_layer()
        zero_bank(layer)
        x = rng.normal(size=(2, 3, 5, 5))
        layer.forward(x, bn_mode="train")  # populate running stats
        out, _ = layer.forward(x, bn_mode="eval")
        spatial, _ = layer.forward_paths(x, bn_mode="eval")
        np.testing.assert_array_equal(out, spatial)
        s1, _ = layer.branch1.forward(x, "eval")
        s3, _ = layer.branch3.forward(x, "eval")
        np.testing.assert_allclose(out, s1 + s3, atol=1e-15)

    def test_zero_spatial_leaves_spectral_path(self):
        rng = np.random.default_rng(1)
        layer = make_layer()
        layer.branch1.kernel.value[...] = 0.0
        layer.branch3.kernel.value[...] = 0.0
        transparent_bn(layer.branch1.bn)
        transparent_bn(layer.branch3.bn)
        x = rng.normal(size=(2, 3, 5, 5))
        out, _ = layer.forward(x, bn_mode="eval")
        spectral, _ = layer.bank.forward(x)
        np.testing.assert_allclose(out, spectral, atol=1e-15)

    def test_output_is_sum_of_paths(self):
        rng = np.random.default_rng(2)
        layer = make_layer(cin=4, cout=3)
        x = rng.normal(size=(2, 4, 6, 6))
        layer.forward(x, bn_mode="train")
        out, _ = layer.forward(x, bn_mode="eval")
        spatial, spectral = layer.forward_paths(x, bn_mode="eval")
        assert np.abs(out - (spatial + spectral)).max() < 1e-12


class TestBackward:
    def test_zero_grad_out(self):
        rng = np.random.default_rng(0)
        layer = make_layer()
        x = rng.normal(size=(2, 3, 4, 4))
        _, cache = layer.forward(x, bn_mode="train", need_grad=True)
        gx = layer.backward(np.zeros((2, 4, 4, 4)), cache)
        assert not gx.any()
        assert not any(p.grad.any() for _, p in layer.named_parameters())

    def test_zero_bank_reduces_to_conv_gradient(self):
        rng = np.random.default_rng(1)
        layer = make_layer()
        zero_bank(layer)
        x = rng.normal(size=(2, 3, 4, 4))
        gout = rng.normal(size=(2, 4, 4, 4))
        _, cache = layer.forward(x, bn_mode="train", need_grad=True)
        gx = layer.backward(gout, cache)

        ref = ConvBN(3, 4, 1, padding=0)
        ref.kernel.value[...] = layer.branch1.kernel.value
        ref3 = ConvBN(3, 4, 3, padding=1)
        ref3.kernel.value[...] = layer.branch3.kernel.value
        _, c1 = ref.forward(x, "train", need_grad=True)
        _, c3 = ref3.forward(x, "train", need_grad=True)
        expected = ref.backward(gout, c1) + ref3.backward(gout, c3)
        np.testing.assert_allclose(gx, expected, atol=1e-12)

    def test_finite_differences(self):
        rng = np.random.default_rng(2)
        layer = make_layer(cin=2, cout=3, grid_size=3)
        x = rng.uniform(-1.5, 1.5, size=(2, 2, 4, 4))
        gout = rng.normal(size=(2, 3, 4, 4))
        _, cache = layer.forward(x, bn_mode="train", need_grad=True)
        gx = layer.backward(gout, cache)

        def loss():
            out, _ = layer.forward(x, bn_mode="train")
            return float((gout * out).sum())

        check_grad_coords(loss, x, gx, rng, n_points=10)
        for name, p in layer.named_parameters():
            check_grad_coords(loss, p.value, p.grad, rng, n_points=4)

    def test_deploy_mode_backward_rejected(self):
        layer = make_layer()
        layer.forward(np.zeros((2, 3, 4, 4)), bn_mode="train")
        fused = layer.fuse()
        with pytest.raises(StateError):
            fused.backward(np.zeros((2, 4, 4, 4)), None)


class TestFusion:
    def test_transparent_bn_fuses_to_kernel_sum(self):
        layer = make_layer()
        transparent_bn(layer.branch1.bn)
        transparent_bn(layer.branch3.bn)
        fused = layer.fuse()
        expected = layer.branch3.kernel.value + pad_1x1_to_3x3(layer.branch1.kernel.value)
        np.testing.assert_allclose(fused.w_deploy.value, expected, atol=1e-12)
        np.testing.assert_allclose(fused.b_deploy.value, np.zeros(4), atol=1e-15)

    def test_zero_kernel_branch_contributes_only_bias(self):
        layer = make_layer()
        layer.branch1.kernel.value[...] = 0.0
        layer.branch3.kernel.value[...] = 0.0
        rng = np.random.default_rng(0)
        for bn in (layer.branch1.bn, layer.branch3.bn):
            bn.gamma.value[...] = rng.normal(size=4)
            bn.beta.value[...] = rng.normal(size=4)
            bn.running_mean[...] = rng.normal(size=4)
            bn.running_var[...] = rng.uniform(0.5, 2.0, size=4)
            bn.populated = True
        fused = layer.fuse()
        assert not fused.w_deploy.value.any()
        expected = sum(
            bn.beta.value - bn.gamma.value * bn.running_mean
            / np.sqrt(bn.running_var + bn.eps)
            for bn in (layer.branch1.bn, layer.branch3.bn))
        np.testing.assert_allclose(fused.b_deploy.value, expected, atol=1e-12)

    @pytest.mark.parametrize("grid_size", [3, 5, 7])
    @pytest.mark.parametrize("cin,cout", [(3, 3), (2, 5)])
    def test_equivalence_on_random_inputs(self, grid_size, cin, cout):
        rng = np.random.default_rng(grid_size * 10 + cin)
        layer = make_layer(cin=cin, cout=cout, grid_size=grid_size, seed=grid_size)
        for _ in range(3):  # a little training traffic for the BN stats
            layer.forward(rng.normal(size=(4, cin, 5, 5)), bn_mode="train")
        fused = layer.fuse()
        worst = 0.0
        for _ in range(100):
            x = rng.uniform(-2, 2, size=(2, cin, 5, 5))
            ref, _ = layer.forward(x, bn_mode="eval")
            out, _ = fused.forward(x, bn_mode="eval")
            worst = max(worst, float(np.abs(ref - out).max()))
        assert worst < 1e-9

    def test_refusing_reconstructed_single_branch_changes_nothing(self):
        rng = np.random.default_rng(3)
        layer = make_layer()
        layer.forward(rng.normal(size=(4, 3, 5, 5)), bn_mode="train")
        fused = layer.fuse()

        rebuilt = make_layer(seed=9)
        rebuilt.branch3.kernel.value[...] = fused.w_deploy.value
        transparent_bn(rebuilt.branch3.bn)
        rebuilt.branch3.bn.beta.value[...] = fused.b_deploy.value
        rebuilt.branch1.kernel.value[...] = 0.0
        transparent_bn(rebuilt.branch1.bn)
        rebuilt.bank.coeffs.value[...] = fused.bank.coeffs.value
        rebuilt.bank.w_b.value[...] = fused.bank.w_b.value
        rebuilt.bank.w_s.value[...] = fused.bank.w_s.value
        refused = rebuilt.fuse()

        x = rng.uniform(-2, 2, size=(3, 3, 5, 5))
        a, _ = fused.forward(x, bn_mode="eval")
        b, _ = refused.forward(x, bn_mode="eval")
        assert np.abs(a - b).max() < 1e-12

    def test_bank_parameters_bit_identical_after_fuse(self):
        layer = make_layer(seed=4)
        layer.forward(np.random.default_rng(0).normal(size=(2, 3, 4, 4)), bn_mode="train")
        fused = layer.fuse()
        np.testing.assert_array_equal(fused.bank.coeffs.value, layer.bank.coeffs.value)
        np.testing.assert_array_equal(fused.bank.w_b.value, layer.bank.w_b.value)
        np.testing.assert_array_equal(fused.bank.w_s.value, layer.bank.w_s.value)

    def test_fuse_requires_populated_stats(self):
        layer = make_layer()
        with pytest.raises(StateError):
            layer.fuse()

    def test_double_fuse_rejected(self):
        layer = make_layer()
        layer.forward(np.zeros((2, 3, 4, 4)), bn_mode="train")
        fused = layer.fuse()
        with pytest.raises(StateError):
            fused.fuse()

    def test_deploy_refuses_train_bn_mode(self):
        layer = make_layer()
        layer.forward(np.zeros((2, 3, 4, 4)), bn_mode="train")
        fused = layer.fuse()
        with pytest.raises(StateError):
            fused.forward(np.zeros((2, 3, 4, 4)), bn_mode="train")

    def test_param_read_accounting(self):
        layer = make_layer(cin=3, cout=4)
        assert layer.spatial_param_reads() == 10 * 4 * 3
        layer.forward(np.zeros((2, 3, 4, 4)), bn_mode="train")
        fused = layer.fuse()
        assert fused.spatial_param_reads() == 9 * 4 * 3
        assert fused.spatial_param_reads() < layer.spatial_param_reads()
