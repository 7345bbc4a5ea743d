import numpy as np
import pytest

import recnsi.autodiff as ad
from recnsi.autodiff import Tensor
from recnsi.models import (CPB, RCPB, ModelConfig, build_model, cpb_forward,
                           first_block_forward, infer, infer_feedforward,
                           infer_recurrent, load_model, matched_feedforward_config,
                           param_count, rcpb_forward, readout_head, save_model,
                           t1_feedforward_twin)


def small_config(**kw):
    base = dict(kind="recurrent", num_blocks=2, channels=3, num_neurons=4,
                input_shape=(15, 15), iterations=3, readout_mode="no_avg", seed=0)
    base.update(kw)
    return ModelConfig(**base)


class TestModelConfig:
    def test_feedforward_structure(self):
        cfg = ModelConfig(kind="feedforward", num_blocks=3, channels=4,
                          num_neurons=2, input_shape=(15, 15))
        m = build_model(cfg)
        assert len(m.blocks) == 3
        assert all(isinstance(b, CPB) for b in m.blocks)
        assert m.blocks[0].kernel.data.shape == (4, 1, 9, 9)
        assert m.blocks[0].padding == "valid"
        for b in m.blocks[1:]:
            assert b.kernel.data.shape == (4, 4, 3, 3)
            assert b.padding == "same"

    def test_recurrent_structure(self):
        m = build_model(small_config(num_blocks=3, iterations=4))
        assert isinstance(m.blocks[0], CPB)
        assert all(isinstance(b, RCPB) for b in m.blocks[1:])
        for b in m.blocks[1:]:
            assert len(b.bns) == 4  # one BN per iteration

    def test_same_seed_bit_identical(self):
        a = build_model(small_config())
        b = build_model(small_config())
        for (_, pa), (_, pb) in zip(a.parameters(), b.parameters()):
            np.testing.assert_array_equal(pa.data, pb.data)

    def test_invalid_configs(self):
        with pytest.raises(ValueError):
            small_config(iterations=0)
        with pytest.raises(ValueError):
            small_config(kind="feedforward", iterations=3)
        with pytest.raises(ValueError):
            small_config(num_blocks=4)  # 3 RCPBs unsupported
        with pytest.raises(ValueError):
            small_config(readout_mode="bogus")
        with pytest.raises(ValueError):
            small_config(kind="feedforward", iterations=1, multipath=True)
        with pytest.raises(ValueError):
            small_config(removed_lengths=(1,))  # needs multipath

    def test_roundtrip_dict(self):
        cfg = small_config(multipath=True, removed_lengths=(2,))
        assert ModelConfig.from_dict(cfg.to_dict()) == cfg


class TestBlockForward:
    def test_cpb_composition_oracle(self):
        rng = np.random.default_rng(0)
        m = build_model(small_config())
        blk = m.blocks[0]
        x = Tensor(rng.standard_normal((2, 1, 15, 15)))
        got = cpb_forward(blk, x, "relu", "eval")
        manual = ad.relu(ad.batchnorm(ad.conv2d(x, blk.kernel, "valid"),
                                      blk.bn, "eval"))
        np.testing.assert_array_equal(got.data, manual.data)

    def test_cpb_zero_input_softplus(self):
        m = build_model(small_config(activation="softplus"))
        x = Tensor(np.zeros((1, 1, 15, 15)))
        y = cpb_forward(m.blocks[0], x, "softplus", "eval")
        np.testing.assert_allclose(y.data, np.log(2.0), rtol=1e-12)

    def test_rcpb_t1_equals_cpb_of_ff_kernel(self):
        rng = np.random.default_rng(1)
        m = build_model(small_config())
        blk = m.blocks[1]
        y = Tensor(rng.standard_normal((2, 3, 7, 7)))
        got = rcpb_forward(blk, y, None, 1, "relu", "eval")
        as_cpb = CPB(kernel=blk.ff_kernel, bn=blk.bns[0], padding="same")
        np.testing.assert_array_equal(got.data,
                                      cpb_forward(as_cpb, y, "relu", "eval").data)

    def test_rcpb_composition_oracle(self):
        rng = np.random.default_rng(2)
        m = build_model(small_config())
        blk = m.blocks[1]
        y = Tensor(rng.standard_normal((2, 3, 7, 7)))
        lat = Tensor(rng.standard_normal((2, 3, 7, 7)))
        got = rcpb_forward(blk, y, lat, 2, "relu", "eval")
        manual = ad.relu(ad.batchnorm(
            ad.add(ad.conv2d(y, blk.ff_kernel, "same"),
                   ad.conv2d(lat, blk.lateral_kernel, "same")),
            blk.bns[1], "eval"))
        np.testing.assert_array_equal(got.data, manual.data)

    def test_rcpb_zero_ff_kernel_lateral_only(self):
        rng = np.random.default_rng(3)
        m = build_model(small_config())
        blk = m.blocks[1]
        blk.ff_kernel.data[...] = 0.0
        lat = Tensor(rng.standard_normal((1, 3, 7, 7)))
        a = rcpb_forward(blk, Tensor(rng.standard_normal((1, 3, 7, 7))),
                         lat, 2, "relu", "eval")
        b = rcpb_forward(blk, Tensor(np.zeros((1, 3, 7, 7))),
                         lat, 2, "relu", "eval")
        np.testing.assert_array_equal(a.data, b.data)

    def test_rcpb_iteration_bounds(self):
        m = build_model(small_config())
        y = Tensor(np.zeros((1, 3, 7, 7)))
        with pytest.raises(ValueError):
            rcpb_forward(m.blocks[1], y, None, 4, "relu", "eval")


class TestInference:
    def test_zero_readout_gives_activation_of_bias(self):
        cfg = ModelConfig(kind="feedforward", num_blocks=2, channels=2,
                          num_neurons=3, input_shape=(15, 15))
        m = build_model(cfg)
        m.readout.spatial_mask.data[...] = 0.0
        m.readout.bias.data[...] = np.array([0.5, -1.0, 2.0])
        x = Tensor(np.random.default_rng(4).random((2, 1, 15, 15)))
        pred = infer_feedforward(m, x)
        expect = np.tile(np.maximum([0.5, -1.0, 2.0], 0.0), (2, 1))
        np.testing.assert_allclose(pred.data, expect)

    def test_selector_readout(self):
        cfg = ModelConfig(kind="feedforward", num_blocks=2, channels=2,
                          num_neurons=1, input_shape=(15, 15))
        m = build_model(cfg)
        m.readout.spatial_mask.data[...] = 0.0
        m.readout.spatial_mask.data[0, 1, 0] = 1.0
        m.readout.feature_weights.data[...] = np.array([[0.0, 1.0]])
        m.readout.bias.data[...] = 0.25
        x = Tensor(np.random.default_rng(5).random((1, 1, 15, 15)))
        y = first_block_forward(m, x, "eval")
        y = cpb_forward(m.blocks[1], y, "relu", "eval")
        pooled = ad.avgpool3(y)
        expect = max(pooled.data[0, 1, 1, 0] + 0.25, 0.0)
        np.testing.assert_allclose(infer_feedforward(m, x).data, [[expect]],
                                   rtol=1e-12)

    def test_feedforward_manual_chain(self):
        cfg = ModelConfig(kind="feedforward", num_blocks=3, channels=3,
                          num_neurons=4, input_shape=(15, 15), seed=6)
        m = build_model(cfg)
        x = Tensor(np.random.default_rng(7).random((2, 1, 15, 15)))
        y = first_block_forward(m, x, "eval")
        for blk in m.blocks[1:]:
            y = cpb_forward(blk, y, "relu", "eval")
        manual = readout_head(m, y, "eval")
        np.testing.assert_array_equal(infer_feedforward(m, x).data, manual.data)

    @pytest.mark.parametrize("mode", ["no_avg", "early_avg", "late_avg", "two_avg"])
    def test_t1_equals_feedforward_chain_bitwise(self, mode):
        m = build_model(small_config(iterations=1, readout_mode=mode, seed=8))
        x = Tensor(np.random.default_rng(9).random((4, 1, 15, 15)))
        pred, _ = infer_recurrent(m, x, "eval")
        twin = t1_feedforward_twin(m)
        np.testing.assert_array_equal(pred.data,
                                      infer_feedforward(twin, x, "eval").data)

    def test_identical_states_all_modes_agree(self):
        # zero lateral kernels and tied per-iteration BNs force equal states
        preds = {}
        x = Tensor(np.random.default_rng(10).random((2, 1, 15, 15)))
        for mode in ["no_avg", "early_avg", "late_avg", "two_avg"]:
            m = build_model(small_config(readout_mode=mode, seed=11))
            for blk in m.blocks[1:]:
                blk.lateral_kernel.data[...] = 0.0
                for bn in blk.bns[1:]:
                    bn.gamma.data[...] = blk.bns[0].gamma.data
                    bn.beta.data[...] = blk.bns[0].beta.data
            preds[mode] = infer_recurrent(m, x, "eval")[0].data
        for mode in ["early_avg", "late_avg", "two_avg"]:
            np.testing.assert_allclose(preds[mode], preds["no_avg"], rtol=1e-12)

    def test_two_avg_trace_replay(self):
        m = build_model(small_config(readout_mode="two_avg", seed=12))
        x = Tensor(np.random.default_rng(13).random((2, 1, 15, 15)))
        pred, trace = infer_recurrent(m, x, "eval")
        states = [s.data for s in trace["final_states"]]
        preds = []
        for t in range(1, 4):
            cum = np.mean(states[:t], axis=0)
            preds.append(readout_head(m, Tensor(cum), "eval").data)
        np.testing.assert_allclose(pred.data, np.mean(preds, axis=0), rtol=1e-12)

    def test_eval_inference_pure(self):
        m = build_model(small_config(readout_mode="late_avg", seed=14))
        x = Tensor(np.random.default_rng(15).random((2, 1, 15, 15)))
        a, _ = infer(m, x, "eval")
        b, _ = infer(m, x, "eval")
        np.testing.assert_array_equal(a.data, b.data)

    def test_rank_one_effective_readout(self):
        m = build_model(small_config(seed=16))
        n = m.config.num_neurons
        mask = m.readout.spatial_mask.data
        featw = m.readout.feature_weights.data
        for i in range(n):
            w_eff = np.einsum("hw,c->chw", mask[i], featw[i])
            flat = w_eff.reshape(m.config.channels, -1)
            assert np.linalg.matrix_rank(flat, tol=1e-10) <= 1


class TestParamCount:
    def test_cpb_rcpb_arithmetic(self):
        m = build_model(small_config(channels=16, num_blocks=2,
                                     input_shape=(15, 15)))
        rcpb = m.blocks[1]
        assert rcpb.ff_kernel.data.size == 3 * 3 * 16 * 16 == 2304
        assert rcpb.ff_kernel.data.size + rcpb.lateral_kernel.data.size == 4608

    @pytest.mark.parametrize("channels", [2, 4, 8])
    @pytest.mark.parametrize("num_blocks", [2, 3])
    def test_matched_feedforward_conv_params_equal(self, channels, num_blocks):
        cfg = small_config(channels=channels, num_blocks=num_blocks)
        rec = build_model(cfg)
        ff = build_model(matched_feedforward_config(cfg))
        assert param_count(rec)["conv"] == param_count(ff)["conv"]

    def test_reflection_walk(self):
        m = build_model(small_config(num_blocks=3, iterations=2))
        total = sum(p.data.size for _, p in m.parameters())
        assert param_count(m)["total"] == total


class TestCheckpoint:
    def test_roundtrip_bit_exact(self, tmp_path):
        m = build_model(small_config(readout_mode="two_avg", seed=17))
        # make running stats nontrivial
        x = Tensor(np.random.default_rng(18).random((4, 1, 15, 15)))
        infer_recurrent(m, x, "train")
        path = tmp_path / "model.ckpt"
        save_model(m, path)
        m2 = load_model(path)
        assert m2.config == m.config
        for (_, a), (_, b) in zip(m.parameters(), m2.parameters()):
            np.testing.assert_array_equal(a.data, b.data)
        for (_, a), (_, b) in zip(m.batchnorms(), m2.batchnorms()):
            np.testing.assert_array_equal(a.running_mean, b.running_mean)
            np.testing.assert_array_equal(a.running_var, b.running_var)
        xt = Tensor(np.random.default_rng(19).random((2, 1, 15, 15)))
        np.testing.assert_array_equal(infer(m, xt)[0].data, infer(m2, xt)[0].data)

    def test_wrong_format_rejected(self, tmp_path):
        from recnsi import container
        path = tmp_path / "other.bin"
        container.save(path, {"format": "other"}, {"x": np.zeros(3)})
        with pytest.raises(ValueError):
            load_model(path)
