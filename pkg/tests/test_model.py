"""Model assembly: residual stages, fusion, prediction, parameter counts."""

import numpy as np
import pytest

from repkan import ops
from repkan.errors import ConfigurationError, StateError
from repkan.model import ModelConfig, RepKanModel


def tiny_config(**kw):
    base = dict(in_channels=4, stage_widths=(8,), blocks_per_stage=(1,),
                grid_size=3, spline_order=3, num_classes=3, input_hw=(8, 8))
    base.update(kw)
    return ModelConfig(**base)


def zero_model(model: RepKanModel) -> None:
    for _, p in model.named_parameters():
        p.value[...] = 0.0
    model.set_bn_populated()


class TestConfig:
    def test_mismatched_lengths(self):
        with pytest.raises(ConfigurationError):
            ModelConfig(stage_widths=(8, 16), blocks_per_stage=(1,))

    def test_input_not_divisible(self):
        with pytest.raises(ConfigurationError):
            ModelConfig(stage_widths=(8, 16, 32), blocks_per_stage=(1, 1, 1),
                        input_hw=(10, 10))

    def test_roundtrip_dict(self):
        cfg = tiny_config()
        assert ModelConfig.from_dict(cfg.to_dict()) == cfg


class TestForward:
    def test_all_zero_weights_yield_head_bias(self):
        model = RepKanModel(tiny_config(), seed=0)
        zero_model(model)
        model.head_b.value[...] = [0.5, -1.0, 2.0]
        logits, _ = model.forward(np.random.default_rng(0).normal(size=(3, 4, 8, 8)),
                                  bn_mode="eval")
        np.testing.assert_allclose(logits, np.tile([0.5, -1.0, 2.0], (3, 1)), atol=1e-12)

    def test_zero_block_acts_as_identity(self):
        model = RepKanModel(tiny_config(blocks_per_stage=(2,)), seed=1)
        block = model.stages[0][1]
        for _, p in block.named_parameters():
            p.value[...] = 0.0
        x = np.random.default_rng(1).normal(size=(2, 8, 8, 8))
        out, _ = block.forward(x, bn_mode="eval")
        assert np.abs(out).max() < 1e-12  # residual addition is then an identity

    def test_logits_match_hand_traced_composition(self):
        cfg = tiny_config(stage_widths=(6, 8), blocks_per_stage=(1, 1))
        model = RepKanModel(cfg, seed=2)
        rng = np.random.default_rng(2)
        x = rng.normal(size=(3, 4, 8, 8))
        model.forward(x, bn_mode="train")  # populate BN stats
        logits, _ = model.forward(x, bn_mode="eval")

        def convbn(mod, t):
            conv = ops.conv2d(t, mod.kernel.value, np.zeros(mod.out_channels),
                              stride=mod.stride, padding=mod.padding)
            out, _ = ops.batchnorm2d(conv, mod.bn.gamma.value, mod.bn.beta.value,
                                     mod.bn.running_mean.copy(),
                                     mod.bn.running_var.copy(), mode="eval")
            return out

        t = convbn(model.stem, x)
        for si, blocks in enumerate(model.stages):
            for block in blocks:
                spatial = convbn(block.branch1, t) + convbn(block.branch3, t)
                spectral, _ = block.bank.forward(t)
                t = t + spatial + spectral
            if si < len(model.transitions):
                t = convbn(model.transitions[si], t)
        ref = ops.linear(ops.global_avg_pool(t), model.head_w.value, model.head_b.value)
        assert np.abs(logits - ref).max() < 1e-10

    def test_batch_permutation_consistency(self):
        model = RepKanModel(tiny_config(), seed=3)
        rng = np.random.default_rng(3)
        x = rng.normal(size=(5, 4, 8, 8))
        model.forward(x, bn_mode="train")
        logits, _ = model.forward(x, bn_mode="eval")
        perm = rng.permutation(5)
        logits_p, _ = model.forward(x[perm], bn_mode="eval")
        np.testing.assert_array_equal(logits_p, logits[perm])


class TestFusion:
    def test_model_fusion_equivalence(self):
        cfg = tiny_config(stage_widths=(6, 8), blocks_per_stage=(1, 1))
        model = RepKanModel(cfg, seed=4)
        rng = np.random.default_rng(4)
        model.forward(rng.normal(size=(4, 4, 8, 8)), bn_mode="train")
        fused = model.fuse()
        worst = 0.0
        for _ in range(20):
            x = rng.uniform(-2, 2, size=(3, 4, 8, 8))
            a, _ = model.forward(x, bn_mode="eval")
            b, _ = fused.forward(x, bn_mode="eval")
            worst = max(worst, float(np.abs(a - b).max()))
        assert worst < 1e-8

    def test_fuse_without_stats_rejected(self):
        model = RepKanModel(tiny_config(), seed=5)
        with pytest.raises(StateError):
            model.fuse()

    def test_double_fuse_rejected(self):
        model = RepKanModel(tiny_config(), seed=6)
        model.forward(np.zeros((2, 4, 8, 8)), bn_mode="train")
        fused = model.fuse()
        with pytest.raises(StateError):
            fused.fuse()

    def test_zero_model_deploy_logits_equal_head_bias(self):
        model = RepKanModel(tiny_config(), seed=7)
        zero_model(model)
        model.head_b.value[...] = [1.0, 2.0, 3.0]
        fused = model.fuse()
        logits, _ = fused.forward(np.ones((2, 4, 8, 8)), bn_mode="eval")
        np.testing.assert_allclose(logits, np.tile([1.0, 2.0, 3.0], (2, 1)), atol=1e-12)

    def test_deploy_backward_rejected(self):
        model = RepKanModel(tiny_config(), seed=8)
        model.forward(np.zeros((2, 4, 8, 8)), bn_mode="train")
        fused = model.fuse()
        with pytest.raises(StateError):
            fused.backward(np.zeros((2, 3)), None)


class TestPredictAndCounts:
    def test_tie_breaks_to_lowest_class(self):
        model = RepKanModel(tiny_config(), seed=9)
        zero_model(model)  # logits all equal head bias = 0
        pred = model.predict(np.random.default_rng(0).normal(size=(4, 4, 8, 8)))
        np.testing.assert_array_equal(pred, np.zeros(4, dtype=np.int64))

    def test_one_hot_logits(self):
        model = RepKanModel(tiny_config(), seed=10)
        zero_model(model)
        model.head_b.value[...] = [0.0, 5.0, 0.0]
        pred = model.predict(np.zeros((2, 4, 8, 8)))
        np.testing.assert_array_equal(pred, [1, 1])

    def test_batch_predict_matches_scalar_argmax(self):
        model = RepKanModel(tiny_config(), seed=11)
        rng = np.random.default_rng(11)
        x = rng.normal(size=(6, 4, 8, 8))
        model.forward(x, bn_mode="train")
        logits, _ = model.forward(x, bn_mode="eval")
        ref = np.array([int(np.argmax(row)) for row in logits])
        np.testing.assert_array_equal(model.predict(x), ref)

    def test_spline_parameter_count_formula(self):
        cfg = tiny_config(stage_widths=(6, 8), blocks_per_stage=(2, 1), grid_size=5)
        model = RepKanModel(cfg, seed=12)
        nb_plus2 = 5 + 3 + 2
        expected = (6 * 6 * nb_plus2) * 2 + (8 * 8 * nb_plus2)
        assert model.spline_param_count() == expected
        direct = sum(b.bank.coeffs.value.size + b.bank.w_b.value.size
                     + b.bank.w_s.value.size
                     for blocks in model.stages for b in blocks)
        assert model.spline_param_count() == direct

    def test_named_parameters_unique(self):
        model = RepKanModel(tiny_config(stage_widths=(6, 8),
                                        blocks_per_stage=(2, 1)), seed=13)
        names = [n for n, _ in model.named_parameters()]
        assert len(names) == len(set(names))
