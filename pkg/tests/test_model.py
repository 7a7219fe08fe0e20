"""Architecture, residual wiring, and parameter/MAC accounting tests."""

import numpy as np
import pytest

from flexinet import model as M
from flexinet import tensor as T
from flexinet.model import ArchConfig, BlockSpec, StageSpec, build_model
from flexinet.reference import finite_difference_check
from flexinet.tensor import Tape, Tensor, backward


TINY = ArchConfig(stem_channels=(4, 6), stages=(StageSpec(1, 8, 2), StageSpec(1, 8, 1)))


def rand_feats(n=2, f=32, t=16, seed=0, dtype=np.float32):
    rng = np.random.default_rng(seed)
    return rng.standard_normal((n, 1, f, t)).astype(dtype)


class TestArchConfig:
    def test_stem_halves_twice(self):
        model = build_model(TINY)
        feats = rand_feats(f=256, t=64)
        h = model.stem1.forward(Tensor(feats), training=False)
        h = model.stem2.forward(h, training=False)
        assert h.shape[2:] == (64, 16)

    def test_projection_rule(self):
        assert BlockSpec(8, 16, 1).needs_projection
        assert BlockSpec(8, 8, 2).needs_projection
        assert not BlockSpec(8, 8, 1).needs_projection

    def test_non_decreasing_channels_enforced(self):
        with pytest.raises(ValueError, match="non-decreasing"):
            ArchConfig(stages=(StageSpec(1, 32, 2), StageSpec(1, 16, 2)))

    def test_num_classes_fixed(self):
        with pytest.raises(ValueError, match="10"):
            ArchConfig(stages=(StageSpec(1, 8, 2),), num_classes=5)

    def test_invalid_stride_rejected(self):
        with pytest.raises(ValueError, match="stride"):
            StageSpec(1, 8, 3)


class TestForward:
    def test_ten_logits_per_clip(self):
        model = build_model(TINY, seed=1)
        logits = model.forward(rand_feats(n=3), training=False)
        assert logits.shape == (3, 10)
        assert np.all(np.isfinite(logits.data))

    def test_identity_residual_with_zero_weights(self):
        # in == out channels, stride 1, zero weights, identity BN: the main
        # path contributes zero so the block reduces to ReLU(input)
        model = build_model(TINY, seed=2)
        block = model.blocks[1]
        assert block.proj_w is None
        block.dw_w.data[:] = 0
        block.pw_w.data[:] = 0
        x = Tensor(np.random.default_rng(3).standard_normal((2, 8, 8, 4)).astype(np.float32))
        out = block.forward(x, training=False)
        np.testing.assert_allclose(out.data, np.maximum(x.data, 0), atol=1e-6)

    def test_projection_triggers_exactly_when_needed(self):
        cfg = ArchConfig(stem_channels=(4, 6),
                         stages=(StageSpec(2, 8, 2), StageSpec(1, 8, 1)))
        model = build_model(cfg)
        # block 0: 6 -> 8 stride 2 (projection); block 1: 8 -> 8 stride 1 (none);
        # block 2 starts a stage with stride 1 and equal channels (none)
        assert model.blocks[0].proj_w is not None
        assert model.blocks[1].proj_w is None
        assert model.blocks[2].proj_w is None

    def test_forward_deterministic(self):
        model = build_model(TINY, seed=4)
        feats = rand_feats(seed=5)
        a = model.forward(feats, training=False).data
        b = model.forward(feats, training=False).data
        assert np.array_equal(a, b)

    def test_resnorm_placement_none(self):
        cfg = ArchConfig(stem_channels=(4, 6), stages=(StageSpec(1, 8, 2),),
                         resnorm_placement="none")
        model = build_model(cfg)
        assert model.resnorm is None
        assert model.forward(rand_feats(), training=False).shape == (2, 10)

    def test_lambda_in_params(self):
        model = build_model(TINY)
        assert "resnorm.lambda" in model.params()


class TestFullModelGradients:
    def test_finite_difference_including_lambda(self):
        model = build_model(TINY, seed=6, dtype=np.float64)
        feats = rand_feats(n=2, f=16, t=8, seed=7, dtype=np.float64)
        labels = np.array([1, 4])

        def loss():
            logits = model.forward(feats, training=True)
            ls = T.log_softmax(logits, axis=1)
            onehot = np.zeros((2, 10))
            onehot[np.arange(2), labels] = 1.0
            picked = T.mul(ls, Tensor(onehot, dtype=np.float64))
            return T.mul_scalar(T.tsum(picked), -0.5)

        params = model.params()
        worst, per_param = finite_difference_check(loss, params, max_elems=6)
        assert worst < 1e-3, per_param
        assert per_param["resnorm.lambda"] < 1e-3

    def test_training_updates_running_stats(self):
        model = build_model(TINY, seed=8)
        before = model.stem1.bn.running_mean.copy()
        model.forward(rand_feats(seed=9), training=True)
        assert not np.array_equal(before, model.stem1.bn.running_mean)
        frozen = model.stem1.bn.running_mean.copy()
        model.forward(rand_feats(seed=10), training=False)
        assert np.array_equal(frozen, model.stem1.bn.running_mean)


class TestCounting:
    def test_pointwise_hand_computed(self):
        # single pointwise 16 -> 32 on an 8x8 map
        p = 16 * 32 + 32
        m = 16 * 32 * 64
        assert m == 32768
        assert p == 544

    def test_block_counts_match_hand_computation(self):
        # one-stage net: stem (2, 4), single block 4 -> 8 stride 2 on 256x64 input
        cfg = ArchConfig(stem_channels=(2, 4), stages=(StageSpec(1, 8, 2),))
        total_p, total_m, rows = M.count_params_macs(cfg, detail=True)
        by_name = {r.name: r for r in rows}
        # stem1: 9*1*2 weights + 2*2 bn = 22 params; 9*1*2*128*32 macs
        assert by_name["stem1"].params == 22
        assert by_name["stem1"].macs == 9 * 2 * 128 * 32
        # stem2: 9*2*4 + 2*4 = 80; macs 9*2*4*64*16
        assert by_name["stem2"].params == 80
        assert by_name["stem2"].macs == 9 * 2 * 4 * 64 * 16
        # block: dw 9*4 + bn 8 + pw 4*8 + bn 16 + proj 4*8 = 124 params
        assert by_name["s0.b0"].params == 9 * 4 + 8 + 4 * 8 + 16 + 4 * 8
        # dw macs 9*4*32*8, pw 4*8*32*8, proj 4*8*32*8
        assert by_name["s0.b0"].macs == (9 * 4 + 4 * 8 + 4 * 8) * 32 * 8
        # head: 8*10 + 10
        assert by_name["head"].params == 90
        assert by_name["head"].macs == 80

    def test_depthwise_macs_hand_computed(self):
        # depthwise 3x3 over 16 channels on an 8x8 map
        assert 9 * 16 * 64 == 9216

    def test_separable_to_full_mac_ratio(self):
        sep = 9 * 16 * 64 + 16 * 32 * 64
        full = 9 * 16 * 32 * 64
        assert sep / full == pytest.approx(0.1423, abs=1e-3)

    def test_counter_matches_built_model_params(self):
        for name, cfg in M.REFERENCE_CONFIGS.items():
            counted, _ = M.count_params_macs(cfg)
            built = sum(p.data.size for p in build_model(cfg).params().values())
            assert counted == built, name

    def test_reference_configs_within_budgets(self):
        for name, budget in M.PARAM_BUDGETS.items():
            p, _ = M.count_params_macs(M.REFERENCE_CONFIGS[name])
            assert abs(p - budget) / budget <= 0.15, f"{name}: {p} vs {budget}"
