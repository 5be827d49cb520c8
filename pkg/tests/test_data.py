import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from riskoracle import data as D
from riskoracle import synth
from riskoracle.errors import IndicatorError, SamplingError, SplitError


class TestAggregateRisk:
    def test_minor_plus_fatal(self):
        risk, acc, rep = D.aggregate_risk([(10, 0, 1), (20, 0, 3)], m=2, interval_seconds=60,
                                          n_intervals=1)
        assert risk[0, 0] == 4 and acc[0, 0] == 2 and risk[0, 1] == 0

    def test_no_events(self):
        risk, _, rep = D.aggregate_risk([], m=3, interval_seconds=60, n_intervals=2)
        assert not risk.any() and rep.total == 0

    def test_two_injured(self):
        risk, _, _ = D.aggregate_risk([(1, 1, 2), (2, 1, 2)], 2, 60, 1)
        assert risk[0, 1] == 4

    def test_rejections_are_counted(self):
        events = [(5, 0, 1), (5, 0, 4), (9999, 0, 1), (5, 7, 2), (65, 1, 2)]
        risk, _, rep = D.aggregate_risk(events, 2, 60, 2)
        assert rep.total == rep.binned + rep.rejected == 5
        assert rep.reasons == {"severity": 1, "timestamp": 1, "subregion": 1}
        assert risk[1, 1] == 2


class TestIndicator:
    def test_single_cell(self):
        np.testing.assert_allclose(D.risk_indicator([[3.0]]), [1.0])

    def test_one_week(self):
        np.testing.assert_allclose(D.risk_indicator([[5.0, 5.0]]), [0.5, 0.5])

    def test_two_weeks(self):
        np.testing.assert_allclose(D.risk_indicator([[4, 6], [2, 8.0]]), [0.3, 0.7])

    def test_zero_week_dropped(self):
        np.testing.assert_allclose(D.risk_indicator([[4, 6], [0, 0.0]]), [0.4, 0.6])

    def test_all_zero(self):
        with pytest.raises(IndicatorError):
            D.risk_indicator([[0, 0], [0, 0.0]])

    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 2**31 - 1))
    def test_sums_to_one(self, seed):
        weekly = np.random.default_rng(seed).poisson(2.0, size=(5, 9)).astype(float)
        weekly[0, 0] += 1
        assert D.risk_indicator(weekly).sum() == pytest.approx(1, abs=1e-9)

    def test_weekly_totals(self):
        risk = np.ones((3 * 7 * 2 + 2, 2))
        w = D.weekly_totals(risk, day_len=2)
        assert w.shape == (4, 2) and w[0, 0] == 14 and w[3, 0] == 2


class TestPkde:
    def test_anchor_instance(self):
        # anchors: pi(0.5) = -1, pi(0.125) = -3 -> -b1 + b2 = -1, -3 b1 + b2 = -3
        eps = np.array([0.5, 0.25, 0.125, 0.125])
        lab = D.pkde_enhance(np.zeros((1, 4)), eps, r_min=1, r_max=3)
        assert lab.b1 == pytest.approx(1, abs=1e-12) and lab.b2 == pytest.approx(0, abs=1e-12)
        assert lab.pi[1] == pytest.approx(-2, abs=1e-12)

    def test_nonzero_untouched(self):
        eps = np.array([0.5, 0.25, 0.125, 0.125])
        lab = D.pkde_enhance(np.array([[4.0, 0, 1, 0]]), eps)
        assert lab.values[0, 0] == 4 and lab.values[0, 2] == 1
        assert np.all(lab.values[0, [1, 3]] < 0)

    def test_floor(self):
        eps = D.floor_indicator([0.6, 0.4, 0.0])
        assert eps[2] == pytest.approx(0.2)

    def test_constant_indicator_fallback(self):
        lab = D.pkde_enhance(np.array([[0, 1.0, 3.0]]), np.full(3, 1 / 3))
        np.testing.assert_allclose(lab.pi, -2.0)

    @settings(max_examples=50, deadline=None)
    @given(st.integers(0, 2**31 - 1))
    def test_monotone_and_negative(self, seed):
        rng = np.random.default_rng(seed)
        m = 12
        risk = rng.poisson(0.3, size=(40, m)) * rng.integers(1, 4, size=(40, m))
        risk[0, 0] = 1
        eps = rng.dirichlet(np.ones(m))
        lab = D.pkde_enhance(risk, eps)
        assert np.all(lab.values[risk == 0] < 0)
        np.testing.assert_array_equal(lab.values[risk > 0], risk[risk > 0])
        order = np.argsort(eps)
        assert np.all(np.diff(lab.pi[order]) >= 0)
        strict = np.diff(eps[order]) > 0
        assert np.all(np.diff(lab.pi[order])[strict] > 0)


class TestTemporalSample:
    def test_thirty_minute(self):
        s = D.temporal_sample(7200, 48)
        assert s.closeness == (7199, 7198, 7197)
        assert s.period == (7152, 7104, 7056)
        assert s.trend == (6720, 6240, 5760)

    def test_boundary(self):
        t = D.earliest_sample(48)
        s = D.temporal_sample(t, 48)
        assert min(min(p) for p in s.perspectives()) == 0

    def test_ten_minute_stride(self):
        s = D.temporal_sample(10_000, 144)
        assert s.period[0] - s.period[1] == 144

    def test_insufficient(self):
        with pytest.raises(SamplingError) as err:
            D.temporal_sample(100, 48)
        assert err.value.earliest == 1440 and "1440" in str(err.value)

    @settings(max_examples=30, deadline=None)
    @given(st.integers(1440, 10_000), st.sampled_from([48, 144]))
    def test_strictly_decreasing(self, t, day_len):
        if t < D.earliest_sample(day_len):
            return
        for idx in D.temporal_sample(t, day_len).perspectives():
            assert all(a > b for a, b in zip(idx, idx[1:]))
            assert all(0 <= i < t for i in idx)


class TestSplit:
    def test_hundred(self):
        assert [len(r) for r in D.split(100)] == [60, 30, 10]

    def test_ten(self):
        assert [len(r) for r in D.split(10)] == [6, 3, 1]

    @pytest.mark.parametrize("n", [4, 7, 11, 99, 1001])
    def test_exhaustive(self, n):
        parts = D.split(n)
        assert [i for p in parts for i in p] == list(range(n))

    def test_too_few(self):
        with pytest.raises(SplitError):
            D.split(2)


class TestSynth:
    def test_deterministic_files(self, tmp_path):
        g = synth.desk_grid(4, 4, 2, 2)
        for sub in ("a", "b"):
            synth.synth_generate(g, 45, seed=3, out_dir=tmp_path / sub)
        for name in ("events.csv", "volumes.csv", "speeds.csv", "weather.csv", "static.csv",
                     "grid.json", "manifest.json"):
            assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()

    def test_zero_base_rate(self):
        city, events, _ = synth.generate(synth.desk_grid(4, 4, 2, 2), 3, 1, "no_accidents")
        assert not events and not city.risk.any()

    def test_accidents_track_volume(self):
        city, _, _ = synth.generate(synth.desk_grid(), 14, 0)
        tot = city.accidents.sum(axis=0)
        vol = np.nanmean(city.volume, axis=0)
        assert np.corrcoef(tot, vol)[0, 1] > 0.2

    def test_ingest_round_trip(self, tmp_path):
        g = synth.desk_grid(4, 6, 2, 3)
        city, events, _ = synth.synth_generate(g, 45, seed=5, out_dir=tmp_path)
        back, rep = D.ingest(tmp_path / "manifest.json")
        assert rep.rejected == 0 and rep.binned == len(events)
        np.testing.assert_array_equal(back.risk, city.risk)
        np.testing.assert_array_equal(back.volume_mask, city.volume_mask)
        np.testing.assert_allclose(back.volume, city.volume, equal_nan=True)
        np.testing.assert_array_equal(back.weather, city.weather)
        assert back.grid == g

    def test_npz_round_trip(self, tmp_path):
        city, _, _ = synth.generate(synth.desk_grid(4, 4, 2, 2), 2, 1)
        city.save(tmp_path / "f.npz")
        back = D.CityData.load(tmp_path / "f.npz")
        np.testing.assert_array_equal(back.speed_mask, city.speed_mask)
        assert back.grid == city.grid and back.static_names == city.static_names

    def test_calendar(self):
        city, _, _ = synth.generate(synth.desk_grid(2, 2, 1, 1), 8, 0)
        assert city.day_of_week(0) == 0  # the synthetic start is a Monday
        assert city.interval_of_day(49) == 1 and city.day_of_week(48 * 6) == 6

    def test_rect_counts(self):
        city, _, _ = synth.generate(synth.desk_grid(), 2, 0)
        np.testing.assert_array_equal(city.rect_counts().sum(axis=1), city.accidents.sum(axis=1))
