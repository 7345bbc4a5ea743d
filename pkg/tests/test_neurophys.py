import numpy as np
import pytest

from recnsi.models import ModelConfig, build_model
from recnsi.neurophys import (GRATING_PHASES, RFMap, TuningCurve,
                              build_suppressive_circuit, length_tuning,
                              map_receptive_fields, optimal_frequencies,
                              probe_units, size_tuning, stability_mask,
                              suppression_index, temporal_dynamics)
from recnsi.stimuli import BAR_LENGTHS, GRATING_DIAMETERS


@pytest.fixture(scope="module")
def circuit():
    return build_suppressive_circuit()


@pytest.fixture(scope="module")
def circuit_size(circuit):
    return size_tuning(circuit)


@pytest.fixture(scope="module")
def circuit_length(circuit):
    return length_tuning(circuit)


class TestSuppressionIndex:
    def test_monotone_rising_curve_zero(self):
        assert suppression_index(np.array([1.0, 2.0, 3.0])) == 0.0

    def test_peak_ten_final_five_half(self):
        assert suppression_index(np.array([1.0, 10.0, 5.0])) == 0.5

    def test_accepts_tuning_curve(self):
        c = TuningCurve(parameter=np.array([1.0, 2.0]),
                        mean=np.array([4.0, 3.0]),
                        se=np.zeros(2), n_units=1)
        assert suppression_index(c) == 0.25

    def test_errors(self):
        with pytest.raises(ValueError):
            suppression_index(np.array([1.0]))
        with pytest.raises(ValueError):
            suppression_index(np.array([0.0, 0.0]))


class TestStabilityMask:
    def test_rule(self):
        # unit 0: one stimulus stays >= 1 at all iterations -> stable
        # unit 1: every stimulus dips below 1 somewhere -> unstable
        resp = np.zeros((2, 3, 2))
        resp[0, :, 0] = [1.0, 1.5, 2.0]
        resp[0, :, 1] = [0.0, 5.0, 5.0]
        resp[1, :, 0] = [5.0, 0.9, 5.0]
        resp[1, :, 1] = [0.9, 5.0, 5.0]
        np.testing.assert_array_equal(stability_mask(resp), [True, False])

    def test_threshold_is_inclusive(self):
        resp = np.full((1, 2, 1), 1.0)
        assert stability_mask(resp)[0]


class TestProbeAndRF:
    def test_probe_shape_and_rejects_feedforward(self):
        m = build_model(ModelConfig(kind="recurrent", num_blocks=2, channels=3,
                                    num_neurons=2, input_shape=(20, 20),
                                    iterations=2, seed=0))
        imgs = np.random.default_rng(0).random((5, 20, 20))
        resp = probe_units(m, imgs)
        assert resp.shape == (3, 2, 5)
        ff = build_model(ModelConfig(kind="feedforward", num_blocks=2,
                                     channels=3, num_neurons=2,
                                     input_shape=(20, 20), seed=0))
        with pytest.raises(ValueError):
            probe_units(ff, imgs)

    def test_planted_filter_orientation_recovery(self):
        # give channel 0 a horizontal dark-bar detector and channel 1 a
        # vertical one; RF mapping should recover 0 and 90 degrees
        m = build_suppressive_circuit(image_size=48)
        rf_h = map_receptive_fields(m)
        assert rf_h.orientations[0] == 0.0
        v = build_suppressive_circuit(image_size=48)
        v.blocks[0].kernel.data[0, 0] = v.blocks[0].kernel.data[0, 0].T
        rf_v = map_receptive_fields(v)
        assert rf_v.orientations[0] == 90.0
        assert rf_h.mappable[0] and rf_v.mappable[0]

    def test_zero_model_not_mappable(self):
        m = build_suppressive_circuit()
        m.blocks[0].kernel.data[...] = 0.0
        rf = map_receptive_fields(m)
        assert not rf.mappable.any()


@pytest.fixture(scope="module")
def control():
    m = build_suppressive_circuit()
    m.blocks[1].lateral_kernel.data[...] = 0.0
    return m


class TestZeroLateralControls:
    def test_flat_temporal_dynamics(self, control):
        td = temporal_dynamics(control)
        assert td.shape == (5,)
        np.testing.assert_allclose(td, td[0], rtol=1e-12)

    def test_first_and_last_curves_identical(self, control):
        out = size_tuning(control)
        np.testing.assert_allclose(out["first"].mean, out["last"].mean,
                                   rtol=1e-12)
        assert suppression_index(out["last"]) == suppression_index(out["first"])


class TestSuppressiveCircuit:
    def test_first_iteration_no_suppression(self, circuit_size, circuit_length):
        assert suppression_index(circuit_size["first"]) == 0.0
        assert suppression_index(circuit_length["first"]) == 0.0

    def test_last_iteration_surround_suppression(self, circuit_size):
        assert suppression_index(circuit_size["last"]) > 0.25

    def test_last_iteration_end_stopping_rise_then_fall(self, circuit_length):
        last = circuit_length["last"].mean
        peak = int(np.argmax(last))
        assert 0 < peak < len(last) - 1          # interior peak
        assert last[-1] < last[peak]             # falls after the peak
        first = circuit_length["first"].mean
        assert np.all(np.diff(first) >= -1e-12)  # first iteration saturates

    def test_curve_parameters_match_catalogues(self, circuit_size,
                                               circuit_length):
        np.testing.assert_array_equal(circuit_size["parameter"],
                                      GRATING_DIAMETERS)
        np.testing.assert_array_equal(circuit_length["parameter"], BAR_LENGTHS)

    def test_temporal_dynamics_not_flat(self, circuit):
        td = temporal_dynamics(circuit)
        assert np.ptp(td) > 0.01

    def test_optimal_frequency_positive(self, circuit):
        rf = map_receptive_fields(circuit)
        f = optimal_frequencies(circuit, rf)
        assert f[0] > 0

    def test_csv_roundtrip(self, circuit_size, tmp_path):
        import csv
        path = tmp_path / "size.csv"
        circuit_size["last"].write_csv(path)
        with open(path) as fh:
            rows = list(csv.DictReader(fh))
        assert len(rows) == len(GRATING_DIAMETERS)
        assert float(rows[0]["parameter"]) == GRATING_DIAMETERS[0]
        assert int(rows[0]["n_units"]) == circuit_size["last"].n_units


class TestTuningCurveValidation:
    def test_length_mismatch(self):
        with pytest.raises(ValueError):
            TuningCurve(parameter=np.arange(3.0), mean=np.arange(2.0),
                        se=np.zeros(2), n_units=1)

    def test_negative_se(self):
        with pytest.raises(ValueError):
            TuningCurve(parameter=np.arange(2.0), mean=np.zeros(2),
                        se=np.array([0.0, -1.0]), n_units=1)

    def test_four_phases(self):
        assert len(GRATING_PHASES) == 4
        assert np.allclose(np.diff(GRATING_PHASES), np.pi / 2)
