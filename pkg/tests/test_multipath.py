import dataclasses
import itertools
from collections import Counter
from fractions import Fraction

import numpy as np
import pytest

import recnsi.autodiff as ad
from recnsi.autodiff import Tensor
from recnsi.models import (ModelConfig, build_model, infer_feedforward,
                           infer_recurrent, t1_feedforward_twin)
from recnsi.multipath import (EnsembleSummary, build_multipath_model,
                              component_strength, ensemble_summary,
                              enumerate_paths, infer_multipath, length_windows,
                              path_strength, readout_weight)


def dag_paths_oracle(m_rec, T):
    """Exhaustive DAG enumeration: nondecreasing entry iterations per layer."""
    out = []
    for t_end in range(1, T + 1):
        for entries in itertools.product(range(1, t_end + 1), repeat=m_rec):
            if list(entries) == sorted(entries):
                out.append((entries, t_end, m_rec + t_end - entries[0]))
    return out


def rec_config(**kw):
    base = dict(kind="recurrent", num_blocks=2, channels=3, num_neurons=4,
                input_shape=(15, 15), iterations=3, readout_mode="no_avg", seed=0)
    base.update(kw)
    return ModelConfig(**base)


class TestEnumeratePaths:
    def test_single_layer_t3(self):
        paths = enumerate_paths(1, 3, "no_avg")
        assert sorted(p.length for p in paths) == [1, 2, 3]

    def test_t1_single_path(self):
        for mode in ["no_avg", "early_avg", "late_avg", "two_avg"]:
            paths = enumerate_paths(1, 1, mode)
            assert len(paths) == 1 and paths[0].length == 1

    def test_two_layer_t3_multiplicities(self):
        paths = enumerate_paths(2, 3, "no_avg")
        assert len(paths) == 6
        assert Counter(p.length for p in paths) == {4: 3, 3: 2, 2: 1}

    @pytest.mark.parametrize("m_rec", [1, 2])
    @pytest.mark.parametrize("T", range(1, 8))
    def test_counts_match_dag_oracle(self, m_rec, T):
        got = enumerate_paths(m_rec, T, "late_avg")
        oracle = dag_paths_oracle(m_rec, T)
        assert len(got) == len(oracle)
        assert (Counter((p.entry_iterations, p.end_iteration, p.length) for p in got)
                == Counter(oracle))
        expect_final = T if m_rec == 1 else T * (T + 1) // 2
        assert sum(p.end_iteration == T for p in got) == expect_final

    def test_no_avg_only_final_iteration(self):
        assert all(p.end_iteration == 4 for p in enumerate_paths(2, 4, "no_avg"))

    def test_staircase_monotone(self):
        for p in enumerate_paths(2, 5, "early_avg"):
            a1, a2 = p.entry_iterations
            assert 1 <= a1 <= a2 <= p.end_iteration
            assert p.length == 2 + p.end_iteration - a1

    def test_unsupported_depth(self):
        with pytest.raises(ValueError):
            enumerate_paths(3, 2)


class TestReadoutWeight:
    def test_late_avg(self):
        assert [readout_weight("late_avg", 3, t) for t in (1, 2, 3)] \
            == [1 / 3, 1 / 3, 1 / 3]

    def test_no_avg_t5(self):
        assert [readout_weight("no_avg", 5, t) for t in range(1, 6)] \
            == [0, 0, 0, 0, 1]

    def test_two_avg_t3_exact_fractions(self):
        got = [readout_weight("two_avg", 3, t) for t in (1, 2, 3)]
        expect = [Fraction(11, 18), Fraction(5, 18), Fraction(2, 18)]
        for g, e in zip(got, expect):
            assert abs(g - float(e)) < 1e-15

    @pytest.mark.parametrize("mode", ["no_avg", "early_avg", "late_avg", "two_avg"])
    @pytest.mark.parametrize("T", range(1, 8))
    def test_weights_sum_to_one(self, mode, T):
        s = sum(readout_weight(mode, T, t) for t in range(1, T + 1))
        assert abs(s - 1.0) < 1e-12


class TestStrengths:
    def test_bn_strength_absolute(self):
        from recnsi.autodiff import BatchNormParams
        bn = BatchNormParams.create(4)
        bn.gamma.data[...] = [1.0, -1.0, 1.0, -1.0]
        assert component_strength(bn) == 1.0

    def test_one_hot_conv_strength(self):
        w = np.zeros((3, 2, 3, 3))
        for o in range(3):
            w[o, 0, 1, 1] = 1.0
        assert component_strength(w) == 1.0

    def test_random_conv_norm_oracle(self):
        w = np.random.default_rng(0).standard_normal((4, 2, 3, 3))
        expect = np.mean([np.linalg.norm(w[o].ravel()) for o in range(4)])
        np.testing.assert_allclose(component_strength(w), expect, rtol=1e-12)

    def test_activation_strength(self):
        assert component_strength("activation") == 1.0

    def test_single_path_normalizes_to_one(self):
        m = build_model(rec_config(iterations=1))
        s = ensemble_summary(m)
        np.testing.assert_allclose(s.strengths, [1.0])
        assert s.average_path_length == 1.0
        assert s.diversity == {1: 1.0}

    def test_unroll_and_multiply_oracle(self):
        m = build_model(rec_config(iterations=3, seed=3))
        blk = m.blocks[1]
        s_ff = component_strength(blk.ff_kernel)
        s_lat = component_strength(blk.lateral_kernel)
        s_bn = [component_strength(bn) for bn in blk.bns]
        paths = enumerate_paths(1, 3, "no_avg")
        by_entry = {p.entry_iterations[0]: path_strength(p, m) for p in paths}
        # entry a: ff conv + bn_a, then lateral conv + bn_j for j in a+1..3
        for a in range(1, 4):
            expect = s_ff * s_bn[a - 1]
            for j in range(a + 1, 4):
                expect *= s_lat * s_bn[j - 1]
            np.testing.assert_allclose(by_entry[a], expect, rtol=1e-12)

    def test_summary_sums_and_average(self):
        m = build_model(rec_config(num_blocks=3, iterations=7,
                                   readout_mode="two_avg", seed=4))
        s = ensemble_summary(m)
        np.testing.assert_allclose(s.strengths.sum(), 1.0, atol=1e-9)
        assert (s.strengths >= 0).all()
        lengths = np.array([p.length for p in s.paths])
        assert lengths.min() >= 2 and lengths.max() <= 7 + 1
        np.testing.assert_allclose(s.average_path_length,
                                   np.dot(s.strengths, lengths), rtol=1e-12)
        np.testing.assert_allclose(sum(s.diversity.values()), 1.0, atol=1e-9)

    def test_degenerate_ensemble_flagged(self):
        m = build_model(rec_config())
        m.blocks[1].ff_kernel.data[...] = 0.0
        s = ensemble_summary(m)
        assert s.degenerate
        assert isinstance(s, EnsembleSummary)


class TestMultipathInference:
    def test_t1_bitwise_equals_feedforward(self):
        cfg = rec_config(iterations=1, multipath=True, seed=5)
        m = build_multipath_model(rec_config(iterations=1, seed=5))
        assert m.config == cfg
        x = Tensor(np.random.default_rng(6).random((3, 1, 15, 15)))
        pred, _ = infer_multipath(m, x, "eval")
        twin = t1_feedforward_twin(m)
        np.testing.assert_array_equal(pred.data,
                                      infer_feedforward(twin, x, "eval").data)

    @pytest.mark.parametrize("mode", ["no_avg", "early_avg", "late_avg", "two_avg"])
    @pytest.mark.parametrize("num_blocks", [2, 3])
    def test_zero_lateral_equals_recurrent(self, mode, num_blocks):
        cfg = rec_config(num_blocks=num_blocks, iterations=3,
                         readout_mode=mode, seed=7)
        rec = build_model(cfg)
        mp = build_multipath_model(cfg)
        for m in (rec, mp):
            for blk in m.blocks[1:]:
                blk.lateral_kernel.data[...] = 0.0
        x = Tensor(np.random.default_rng(8).random((2, 1, 15, 15)))
        a, _ = infer_recurrent(rec, x, "eval")
        b, _ = infer_multipath(mp, x, "eval")
        np.testing.assert_array_equal(a.data, b.data)

    def test_single_surviving_path_is_feedforward_chain(self):
        # keep only the length-1 path of a 1-RCPB no_avg model
        cfg = rec_config(iterations=3, multipath=True, removed_lengths=(2, 3))
        m = build_model(cfg)
        x = Tensor(np.random.default_rng(9).random((2, 1, 15, 15)))
        pred, _ = infer_multipath(m, x, "eval")
        # manual chain: first block, then Act(BN_T(Conv_ff(.)))
        from recnsi.models import CPB, cpb_forward, first_block_forward, readout_head
        u = first_block_forward(m, x, "eval")
        blk = m.blocks[1]
        y = cpb_forward(CPB(kernel=blk.ff_kernel, bn=blk.bns[2], padding="same"),
                        u, "relu", "eval")
        np.testing.assert_array_equal(pred.data, readout_head(m, y, "eval").data)

    def test_all_paths_removed_errors(self):
        cfg = rec_config(iterations=2, multipath=True, removed_lengths=(1, 2))
        m = build_model(cfg)
        with pytest.raises(ValueError):
            infer_multipath(m, Tensor(np.zeros((1, 1, 15, 15))))

    def test_removal_changes_output(self):
        base = build_model(rec_config(iterations=3, multipath=True, seed=10))
        ablated = build_model(rec_config(iterations=3, multipath=True,
                                         removed_lengths=(3,), seed=10))
        x = Tensor(np.random.default_rng(11).random((2, 1, 15, 15)))
        a, _ = infer_multipath(base, x)
        b, _ = infer_multipath(ablated, x)
        assert not np.allclose(a.data, b.data)

    def test_gradients_flow_through_ensemble(self):
        m = build_model(rec_config(num_blocks=3, iterations=2,
                                   readout_mode="two_avg", multipath=True, seed=12))
        m.set_requires_grad(True)
        x = Tensor(np.random.default_rng(13).random((2, 1, 15, 15)))
        pred, _ = infer_multipath(m, x, "train")
        ad.backward(ad.mean_all(ad.square(pred)))
        grads = [np.abs(p.grad).sum() for _, p in m.parameters()]
        assert sum(g > 0 for g in grads) > len(grads) // 2


class TestWindows:
    def test_window_enumeration(self):
        lengths = [p.length for p in enumerate_paths(1, 7, "no_avg")]
        assert length_windows(lengths, 3) == [(1, 2, 3), (2, 3, 4), (3, 4, 5),
                                              (4, 5, 6), (5, 6, 7)]

    def test_too_wide(self):
        with pytest.raises(ValueError):
            length_windows([1, 2], 3)
