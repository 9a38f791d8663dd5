"""Statistical contour features: closed-form fixtures and matrix plumbing."""

import io
import math

import numpy as np
import pytest

from contourlab.contour import segment_track
from contourlab.errors import FeatureError, ValidationError
from contourlab.ingest import DEFAULT_FRAME_PERIOD, PitchTrack
from contourlab.statfeat import (
    STAT_FEATURE_NAMES,
    StatFeatures,
    extract_stat_features,
    features_from_csv,
    features_to_csv,
    stat_feature_matrix,
    zscore_block,
)

FP = DEFAULT_FRAME_PERIOD


def contour_from_f0(f0):
    f0 = np.asarray(f0, dtype=np.float64)
    track = PitchTrack(
        recording_id="r0",
        times=np.arange(len(f0)) * FP,
        f0=f0,
        confidence=np.ones(len(f0)),
        frame_period=FP,
    ).validate()
    return segment_track(track).contours[0]


def vibrato_f0(rate_hz, depth_cents, n=100, base=440.0):
    t = np.arange(n) * FP
    return base * 2.0 ** (depth_cents * np.sin(2 * math.pi * rate_hz * t) / 1200.0)


class TestClosedFormFixtures:
    def test_constant_contour_has_zero_motion(self):
        f = extract_stat_features(contour_from_f0(np.full(100, 440.0)))
        assert f.mean_cents == 0.0
        assert f.std_cents == 0.0
        assert f.range_cents == 0.0
        assert f.mean_abs_grad_cents == 0.0
        assert f.sign_change_rate_cents == 0.0
        assert f.mod_rate_cents == 0.0
        assert f.mod_extent_cents == 0.0
        assert f.std_hz == 0.0
        assert f.mean_abs_grad_hz == 0.0
        assert f.fit_slope == 0.0
        assert f.total_variation == 0.0
        assert f.valid_fraction == 1.0

    def test_ramp_slope_and_gradient(self):
        # 10 cents per frame = 10/0.012 cents per second
        f0 = 440.0 * 2.0 ** (np.arange(100) * 10.0 / 1200.0)
        f = extract_stat_features(contour_from_f0(f0))
        assert f.fit_slope == pytest.approx(10.0 / FP, rel=1e-6)
        assert f.mean_abs_grad_cents == pytest.approx(10.0, rel=1e-6)
        assert f.sign_change_rate_cents == 0.0
        # median centering puts the midpoint at zero
        assert f.mean_cents == pytest.approx(0.0, abs=1e-9)
        assert f.total_variation == pytest.approx(99 * 10.0, rel=1e-6)

    def test_vibrato_rate_recovered(self):
        f = extract_stat_features(contour_from_f0(vibrato_f0(6.0, 50.0)))
        assert f.mod_rate_cents == pytest.approx(6.0, abs=0.5)

    def test_vibrato_extent_recovered(self):
        f = extract_stat_features(contour_from_f0(vibrato_f0(6.0, 50.0)))
        assert f.mod_extent_cents == pytest.approx(50.0, rel=0.10)

    def test_vibrato_rate_sweep(self):
        for rate in (4.0, 5.0, 6.5, 7.0):
            f = extract_stat_features(contour_from_f0(vibrato_f0(rate, 60.0)))
            assert f.mod_rate_cents == pytest.approx(rate, abs=0.5), f"rate {rate}"

    def test_no_modulation_below_threshold(self):
        # tiny jitter on a flat contour must not register as vibrato
        rng = np.random.default_rng(0)
        f0 = 440.0 * 2.0 ** (rng.normal(0, 0.5, size=100) / 1200.0)
        f = extract_stat_features(contour_from_f0(f0))
        assert f.mod_rate_cents == 0.0 or f.mod_extent_cents < 5.0

    def test_valid_fraction_partial(self):
        f = extract_stat_features(contour_from_f0(np.full(60, 440.0)))
        assert f.valid_fraction == pytest.approx(0.6)

    def test_sign_change_rate_alternating(self):
        # strict alternation flips at every interior step
        f0 = 440.0 * 2.0 ** (np.tile([10.0, -10.0], 50) / 1200.0)
        f = extract_stat_features(contour_from_f0(f0))
        assert f.sign_change_rate_cents == pytest.approx(98 / 98)


class TestFieldOrder:
    def test_names_match_dataclass_fields(self):
        from dataclasses import fields

        assert tuple(f.name for f in fields(StatFeatures)) == STAT_FEATURE_NAMES

    def test_to_array_follows_names(self):
        f = extract_stat_features(contour_from_f0(vibrato_f0(5.0, 40.0)))
        arr = f.to_array()
        assert arr.shape == (17,)
        assert arr[STAT_FEATURE_NAMES.index("valid_fraction")] == f.valid_fraction


class TestErrors:
    def test_too_few_valid_frames(self):
        with pytest.raises(FeatureError, match="valid"):
            extract_stat_features(contour_from_f0(np.full(3, 440.0)))

    def test_matrix_propagates_short_contour(self):
        contours = [contour_from_f0(np.full(100, 440.0)),
                    contour_from_f0(np.full(3, 440.0))]
        with pytest.raises(FeatureError):
            stat_feature_matrix(contours)

    def test_matrix_skip_short(self):
        contours = [contour_from_f0(np.full(100, 440.0)),
                    contour_from_f0(np.full(3, 440.0))]
        m = stat_feature_matrix(contours, skip_short=True)
        assert m.shape == (1, 17)


class TestZscoreBlock:
    def test_standardizes_columns(self):
        rng = np.random.default_rng(1)
        m = rng.normal(5.0, 3.0, size=(50, 4))
        z, stats = zscore_block(m)
        assert np.mean(z, axis=0) == pytest.approx(np.zeros(4), abs=1e-12)
        assert np.std(z, axis=0) == pytest.approx(np.ones(4))

    def test_constant_column_maps_to_zero(self):
        m = np.column_stack([np.full(10, 7.0), np.arange(10.0)])
        z, _ = zscore_block(m)
        assert np.all(z[:, 0] == 0.0)

    def test_stats_reused_on_heldout_rows(self):
        rng = np.random.default_rng(2)
        train = rng.normal(size=(30, 3))
        test = rng.normal(size=(10, 3))
        _, stats = zscore_block(train)
        z1, _ = zscore_block(test, stats)
        z2, _ = zscore_block(test, stats)
        assert np.array_equal(z1, z2)
        mean, std = stats
        assert z1 == pytest.approx((test - mean) / std)

    def test_single_row_needs_stats(self):
        with pytest.raises(ValidationError):
            zscore_block(np.ones((1, 3)))
        _, stats = zscore_block(np.random.default_rng(3).normal(size=(5, 3)))
        z, _ = zscore_block(np.ones((1, 3)), stats)
        assert z.shape == (1, 3)


class TestCsvRoundTrip:
    def test_exact_round_trip_with_ids(self):
        rng = np.random.default_rng(4)
        m = rng.normal(size=(6, 17))
        ids = [(f"rec{i % 2}", 100 * i) for i in range(6)]
        text = features_to_csv(m, STAT_FEATURE_NAMES, ids=ids)
        back, names, back_ids = features_from_csv(io.StringIO(text))
        assert np.array_equal(back, m)
        assert tuple(names) == STAT_FEATURE_NAMES
        assert back_ids == ids

    def test_round_trip_without_ids(self):
        m = np.array([[1.5, -2.25], [0.1, 3.75]])
        text = features_to_csv(m, ["a", "b"])
        back, names, ids = features_from_csv(io.StringIO(text))
        assert np.array_equal(back, m)
        assert names == ["a", "b"]
        assert ids is None

    def test_header_mismatch_rejected(self):
        with pytest.raises(ValidationError):
            features_to_csv(np.ones((2, 3)), ["a", "b"])
