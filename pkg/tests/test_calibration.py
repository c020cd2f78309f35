import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from canlm.calibration import (
    DEFAULT_LADDER,
    CalibrationTable,
    FeatureCalibration,
    assign_bin_count,
    calibrate,
    dumps_calibration,
    estimate_empirical_bounds,
    loads_calibration,
    temporal_variation,
)
from canlm.datagen import generate_corpus
from canlm.errors import CalibrationError, InsufficientDataError
from canlm.trips import ERRVAL


def brute_force_variation(series, trim_fraction, value_range=None):
    """Independent re-derivation: sort diffs, drop floor(trim*M) per tail, average."""
    diffs = sorted(abs(series[i + 1] - series[i]) for i in range(len(series) - 1))
    k = math.floor(trim_fraction * len(diffs))
    kept = diffs[k : len(diffs) - k] if k else diffs
    delta = sum(kept) / len(kept)
    rng = (max(series) - min(series)) if value_range is None else value_range
    return delta, (delta / rng if rng > 0 else 0.0)


class TestEmpiricalBounds:
    def test_exact_extremes(self):
        lo, hi = estimate_empirical_bounds(np.arange(101), quantile_clip=0.0)
        assert (lo, hi) == (0.0, 100.0)

    def test_nearest_rank_quantiles(self):
        # oracle: nearest-rank index over the sorted list
        lo, hi = estimate_empirical_bounds(np.arange(101), quantile_clip=0.05)
        assert (lo, hi) == (5.0, 95.0)

    def test_degenerate_constant(self):
        lo, hi = estimate_empirical_bounds(np.full(10, 7.0))
        assert (lo, hi) == (7.0, 7.0)

    def test_clamped_into_static_range(self):
        lo, hi = estimate_empirical_bounds(np.array([-5.0, 50.0, 400.0]), static_min=0.0, static_max=250.0)
        assert (lo, hi) == (0.0, 250.0)

    def test_empty_stream(self):
        with pytest.raises(InsufficientDataError, match="mysensor"):
            estimate_empirical_bounds(np.array([np.nan]), feature="mysensor")

    def test_shuffled_input_equals_sorted(self):
        rng = np.random.default_rng(0)
        values = rng.normal(size=501)
        a = estimate_empirical_bounds(values, 0.02)
        b = estimate_empirical_bounds(np.sort(values), 0.02)
        assert a == b


class TestTemporalVariation:
    def test_alternating(self):
        series = np.array([0.0, 1.0] * 10)
        delta, r = temporal_variation(series, trim_fraction=0.005, value_range=1.0)
        assert delta == 1.0 and r == 1.0

    def test_ramp(self):
        delta, r = temporal_variation(np.arange(10.0), trim_fraction=0.005, value_range=9.0)
        assert delta == 1.0
        assert r == pytest.approx(1 / 9, abs=1e-15)

    def test_constant(self):
        delta, r = temporal_variation(np.full(4, 5.0), trim_fraction=0.005)
        assert (delta, r) == (0.0, 0.0)

    def test_too_short(self):
        with pytest.raises(InsufficientDataError):
            temporal_variation(np.array([1.0]))

    def test_matches_brute_force(self):
        rng = np.random.default_rng(42)
        for _ in range(200):
            n = int(rng.integers(2, 400))
            series = rng.normal(size=n) * rng.uniform(0.1, 100)
            trim = float(rng.uniform(0, 0.2))
            delta, r = temporal_variation(series, trim)
            bd, br = brute_force_variation(list(series), trim)
            assert delta == pytest.approx(bd, rel=1e-12)
            assert r == pytest.approx(br, rel=1e-12)

    @given(
        series=st.lists(st.floats(-1e3, 1e3), min_size=2, max_size=60),
        scale=st.floats(0.01, 1e3),
        shift=st.floats(-1e3, 1e3),
    )
    def test_scale_equivariance(self, series, scale, shift):
        # loose tolerance: hypothesis may pick catastrophically cancelling shifts
        x = np.asarray(series)
        _, r1 = temporal_variation(x, 0.01)
        _, r2 = temporal_variation(scale * x + shift, 0.01)
        assert r2 == pytest.approx(r1, rel=1e-6, abs=1e-9)

    def test_scale_equivariance_well_conditioned(self):
        rng = np.random.default_rng(11)
        for _ in range(50):
            x = rng.normal(size=200)
            _, r1 = temporal_variation(x, 0.005)
            _, r2 = temporal_variation(3.7 * x + 11.0, 0.005)
            assert r2 == pytest.approx(r1, rel=1e-12)

    def test_trimming_bounds_spike(self):
        rng = np.random.default_rng(3)
        series = rng.normal(size=900)
        delta, _ = temporal_variation(series, 0.005)
        spiked = np.concatenate([series, [1e9]])
        delta_spiked, _ = temporal_variation(spiked, 0.005)
        assert delta <= delta_spiked  # trimming removed the spike's diff; means stay close
        assert delta_spiked < delta * 1.01


class TestBinLadder:
    def test_fine_bins_for_smooth_signal(self):
        assert assign_bin_count(0.001) == 256

    def test_catch_all_coarsest(self):
        assert assign_bin_count(1.0) == 16

    def test_zero_gets_finest(self):
        assert assign_bin_count(0.0) == max(c for _, c in DEFAULT_LADDER)

    def test_ladder_lookup_oracle(self):
        # first rung whose bound covers r
        for r in np.linspace(0, 0.6, 200):
            expect = next((c for b, c in DEFAULT_LADDER if r <= b), DEFAULT_LADDER[-1][1])
            assert assign_bin_count(float(r)) == expect

    def test_invalid_ladders(self):
        with pytest.raises(CalibrationError):
            assign_bin_count(0.1, thresholds=((0.1, 64), (0.05, 32)))
        with pytest.raises(CalibrationError):
            assign_bin_count(0.1, thresholds=((0.1, 64), (0.2, 64)))


class TestCalibrate:
    def test_covers_all_continuous_features(self, small_assets):
        schema, table = small_assets["schema"], small_assets["calib"]
        assert set(table.per_feature) == {f.name for f in schema.continuous_features()}

    def test_deterministic(self, ref_schema):
        corpus = generate_corpus(ref_schema, 4, 2, 120, seed=9)
        t1 = calibrate(corpus, ref_schema, n_vehicles=3, trips_per_vehicle=2, seed=21)
        t2 = calibrate(corpus, ref_schema, n_vehicles=3, trips_per_vehicle=2, seed=21)
        assert dumps_calibration(t1) == dumps_calibration(t2)

    def test_oversampling_warns_and_uses_all(self, ref_schema):
        corpus = generate_corpus(ref_schema, 2, 1, 120, seed=9)
        with pytest.warns(UserWarning, match="using all"):
            calibrate(corpus, ref_schema, n_vehicles=10, trips_per_vehicle=5, seed=0)

    def test_all_error_feature_reported(self, ref_schema):
        corpus = generate_corpus(ref_schema, 2, 1, 120, seed=9)
        for trip in corpus:
            trip.flags["fuel_rate_lph"][:] = ERRVAL
        with pytest.raises(InsufficientDataError, match="fuel_rate_lph"):
            calibrate(corpus, ref_schema, n_vehicles=2, trips_per_vehicle=1, seed=0)

    def test_constant_feature_single_bin(self, ref_schema):
        corpus = generate_corpus(ref_schema, 2, 1, 120, seed=9)
        for trip in corpus:
            trip.cont["battery_voltage_v"][:] = 12.0
            trip.flags["battery_voltage_v"][:] = 0
        table = calibrate(corpus, ref_schema, n_vehicles=2, trips_per_vehicle=1, seed=0)
        fc = table.per_feature["battery_voltage_v"]
        assert fc.bin_count == 1 and fc.r == 0.0 and fc.emp_min == fc.emp_max == 12.0


class TestSerialization:
    def test_round_trip(self, small_assets):
        table = small_assets["calib"]
        text = dumps_calibration(table)
        loaded = loads_calibration(text)
        assert dumps_calibration(loaded) == text
        assert loaded.calibration_hash == table.calibration_hash

    def test_infinite_catch_all_bound_survives(self):
        table = CalibrationTable(
            schema_hash="x",
            thresholds=((0.1, 64), (math.inf, 16)),
            trim_fraction=0.005,
            per_feature={"a": FeatureCalibration("a", 0.0, 1.0, 0.1, 0.1, 64)},
        )
        loaded = loads_calibration(dumps_calibration(table))
        assert loaded.thresholds == table.thresholds
