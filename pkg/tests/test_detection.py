"""
Tests for level sets, anomaly scores, the streaming detector and the
detection manager.
"""

import math
from pathlib import Path

import numpy as np
import pytest

from detection.detection_manager import DetectionManager, MetricJob
from detection.level_sets import (
    MIN_MC_SAMPLES,
    TIE_TOLERANCE,
    CategoricalLevelSet,
    Method,
    count_vectors,
    coverage,
    credible_set,
    dirmult_outcomes,
    exact_eta,
    mc_eta,
)
from detection.scoring import (
    Regime,
    ScoreRecord,
    Stage,
    asymptotic_score,
    combine,
    point_score,
    window_score,
)
from detection.streaming import (
    END_OF_WINDOW,
    DetectionConfig,
    DetectorState,
    MetricModel,
    StreamingDetector,
    detect_observations,
    detect_windows,
    stream_step,
    warm_up,
)
from exceptions import (
    ConfigError,
    DetectorError,
    InvalidArgumentError,
    LateEventError,
    StateCorruptError,
)
from model.covariates import CovariateSpec
from model.dist import LikelihoodKind
from model.dynamics import ModelDims, ModelParams
from model.grid import BinnedObservation, floored_observation, make_regular_grid
from model.persistence import checkpoint_to_bytes


class TestLevelSets:
    """Test exact and Monte-Carlo level sets."""

    def test_exact_threshold_example(self):
        probs = np.array([0.7, 0.2, 0.1])
        threshold = exact_eta(np.log(probs), probs, 0.25)
        assert threshold.eta == pytest.approx(math.log(0.2))
        assert threshold.eta_natural == pytest.approx(0.2)
        assert threshold.method == Method.EXACT
        assert threshold.flags(math.log(0.1))
        assert not threshold.flags(math.log(0.2))
        np.testing.assert_array_equal(credible_set(np.log(probs), threshold), [True, True, False])

    def test_ties_enter_together(self):
        probs = np.array([0.4, 0.3, 0.3])
        threshold = exact_eta(np.log(probs), probs, 0.5)
        assert threshold.eta == pytest.approx(math.log(0.3))
        assert coverage(np.log(probs), probs, threshold) == 0.0

    def test_epsilon_bounds(self):
        for epsilon in (0.0, 1.0, -0.1):
            with pytest.raises(InvalidArgumentError):
                exact_eta([0.0], [1.0], epsilon)
        with pytest.raises(InvalidArgumentError):
            exact_eta([0.0, -1.0], [0.5, 0.4], 0.1)

    def test_count_vectors(self):
        vectors = list(count_vectors(3, 3))
        assert len(vectors) == 10
        assert all(sum(v) == 3 for v in vectors)
        assert len(set(vectors)) == 10

    @pytest.mark.parametrize("seed", range(30))
    def test_coverage_bounded_by_epsilon(self, seed):
        rng = np.random.default_rng(seed)
        d = int(rng.integers(2, 5))
        n = int(rng.integers(1, 7))
        alpha = rng.gamma(1.0, 2.0, size=d) + 0.1
        epsilon = float(rng.uniform(0.01, 0.3))
        _, logliks = dirmult_outcomes(alpha, n)
        probs = np.exp(logliks)
        threshold = exact_eta(logliks, probs / probs.sum(), epsilon)
        assert coverage(logliks, probs, threshold) <= epsilon + 1e-9

    def test_categorical_level_set(self):
        level_set = CategoricalLevelSet([7.0, 2.0, 1.0], 0.25)
        assert level_set.flags(2)
        assert not level_set.flags(1)
        assert level_set.p_value(2) == pytest.approx(0.1)
        assert level_set.p_value(1) == pytest.approx(0.3)
        assert level_set.p_value(0) == pytest.approx(1.0)

    def test_mc_threshold(self, rng):
        threshold = mc_eta([5.0, 3.0, 2.0], LikelihoodKind.DIR_MULT, 0.05, 1000, rng, sample_count=8)
        assert threshold.method == Method.MONTE_CARLO
        assert threshold.samples == 1000
        assert np.all(np.diff(threshold.sample_logliks) >= 0)
        assert threshold.eta == threshold.sample_logliks[49]
        assert threshold.p_value(-1e9) == pytest.approx(1.0 / 1001)
        assert threshold.p_value(0.0) == 1.0

    def test_mc_requires_enough_samples(self, rng):
        with pytest.raises(InvalidArgumentError):
            mc_eta([1.0, 1.0], LikelihoodKind.DIRICHLET, 0.05, MIN_MC_SAMPLES - 1, rng)
        with pytest.raises(InvalidArgumentError):
            mc_eta([1.0, 1.0], LikelihoodKind.DIR_MULT, 0.05, 200, rng)

    def test_mc_is_seeded(self):
        first = mc_eta([2.0, 2.0, 2.0], LikelihoodKind.DIRICHLET, 0.1, 500, np.random.default_rng(4))
        second = mc_eta([2.0, 2.0, 2.0], LikelihoodKind.DIRICHLET, 0.1, 500, np.random.default_rng(4))
        assert first.eta == second.eta

    @pytest.mark.slow
    def test_mc_agrees_with_enumeration(self):
        rng = np.random.default_rng(2024)
        agree = 0
        instances = 200
        for _ in range(instances):
            d = int(rng.integers(2, 4))
            n = int(rng.integers(2, 5))
            alpha = rng.gamma(2.0, 1.0, size=d) + 0.2
            _, logliks = dirmult_outcomes(alpha, n)
            exact = exact_eta(logliks, np.exp(logliks) / np.exp(logliks).sum(), 0.05)
            estimate = mc_eta(alpha, LikelihoodKind.DIR_MULT, 0.05, 100_000, rng, sample_count=n)
            agree += abs(estimate.eta - exact.eta) <= 10 * TIE_TOLERANCE
        assert agree >= 0.95 * instances


class TestScoring:
    """Test point, window and combined scores."""

    def test_point_score(self):
        score = point_score([7.0, 2.0, 1.0], 2, epsilon=0.25, interval_index=9)
        assert score.stage is Stage.POINT
        assert score.interval_index == 9
        assert score.log_p == pytest.approx(math.log(0.1))
        assert score.is_anomaly
        assert not point_score([7.0, 2.0, 1.0], 0, epsilon=0.25).is_anomaly

    def test_point_flag_follows_p_value_at_boundary(self):
        score = point_score([3.0, 1.0], 1, epsilon=0.25)
        assert score.log_p == pytest.approx(math.log(0.25))
        assert not score.is_anomaly
        assert point_score([3.0, 1.0], 1, epsilon=0.26).is_anomaly

    def test_window_score_extreme_counts(self, rng):
        score = window_score([100.0, 1.0, 1.0], np.array([0, 0, 10]), 10, 0.05, 200, rng, interval_index=3)
        assert score.stage is Stage.WINDOW
        assert score.is_anomaly
        assert score.log_p == pytest.approx(math.log(1.0 / 201))

    def test_window_score_typical_counts(self, rng):
        score = window_score([100.0, 1.0, 1.0], np.array([10, 0, 0]), 10, 0.05, 200, rng)
        assert not score.is_anomaly
        assert score.log_p > math.log(0.05)

    @pytest.mark.parametrize("m", [[2, 0], [1, 1], [0, 2]])
    def test_window_score_total_tie(self, rng, m):
        # every outcome of Dir-Mult(2, (1, 1)) has mass 1/3
        score = window_score([1.0, 1.0], np.array(m), 2, 0.05, 500, rng)
        assert score.log_p == pytest.approx(0.0)
        assert not score.is_anomaly

    def test_scores_fall_with_likelihood(self, rng):
        alpha = np.array([4.0, 1.5, 0.5, 2.0])
        level_set = CategoricalLevelSet(alpha, 0.2)
        order = np.argsort(level_set.logliks)
        p_values = [level_set.p_value(int(k)) for k in order]
        assert np.all(np.diff(p_values) >= 0)

        _, logliks = dirmult_outcomes(alpha, 3)
        threshold = mc_eta(alpha, LikelihoodKind.DIR_MULT, 0.05, 2000, rng, sample_count=3)
        ranked = np.sort(logliks)
        p_values = [threshold.p_value(value) for value in ranked]
        flags = [threshold.flags(value) for value in ranked]
        assert np.all(np.diff(p_values) >= 0)
        # once an outcome is inside the credible set, every likelier one is too
        assert flags == sorted(flags, reverse=True)

    def test_asymptotic_score(self, rng):
        alpha = np.array([50.0, 30.0, 20.0])
        typical = asymptotic_score(alpha, alpha / alpha.sum(), 0.05, 500, rng)
        shifted = asymptotic_score(alpha, np.array([0.02, 0.08, 0.9]), 0.05, 500, rng)
        assert not typical.is_anomaly
        assert shifted.is_anomaly
        assert shifted.log_p < typical.log_p

    def test_combine(self, rng):
        window = window_score([100.0, 1.0, 1.0], np.array([0, 0, 10]), 10, 0.05, 200, rng, interval_index=3)
        combined = combine(-0.5, window, 3)
        assert combined.stage is Stage.COMBINED
        assert combined.log_p == pytest.approx(-0.5 + window.log_p_window)
        assert combined.is_anomaly

        point_only = combine(-2.0, None, 4, point_flagged=True)
        assert point_only.log_p == -2.0
        assert point_only.is_anomaly

    def test_regime_parse(self):
        assert Regime.parse("Asymptotic") is Regime.ASYMPTOTIC
        assert Regime.parse(Regime.SINGLE) is Regime.SINGLE
        with pytest.raises(ConfigError):
            Regime.parse("sometimes")

    def test_score_record_row(self):
        record = ScoreRecord("cpu", 12, Stage.SUBWINDOW, -1.5, True)
        assert record.to_row() == ["cpu", "12", "subwindow", "-1.5", "1"]


def make_model(d=4, hidden=3, layers=2, seed=7):
    dims = ModelDims(bin_count=d, covariate_width=5, hidden_width=hidden, num_layers=layers)
    params = ModelParams.initialize(dims, np.random.default_rng(seed))
    return MetricModel(params, make_regular_grid(-2.0, 2.0, d), CovariateSpec.fit(24, interval_seconds=10.0))


def sample_windows(count=6, per_window=8, seed=0):
    rng = np.random.default_rng(seed)
    return [(w, rng.normal(size=per_window)) for w in range(count)]


def events_of(windows, window_seconds=10.0):
    events = []
    for index, values in windows:
        for j, value in enumerate(values):
            events.append((index * window_seconds + j, float(value)))
    return events


class TestStreaming:
    """Test the two-stage streaming detector."""

    def setup_method(self):
        self.model = make_model()
        self.config = DetectionConfig(mode=Regime.FINITE, epsilon=0.05, mc_samples=100,
                                      window_seconds=10.0, seed=1)

    def stream(self, events, detector=None):
        detector = detector or StreamingDetector(self.model, self.config, "cpu")
        records = []
        for timestamp, value in events:
            records.extend(detector.push(timestamp, value))
        return detector, records

    def test_first_window_is_not_scored(self):
        _, records = detect_windows(self.model, self.config, sample_windows(3), "cpu")
        assert all(r.interval_index > 0 for r in records)

    def test_record_layout_per_window(self):
        _, records = detect_windows(self.model, self.config, sample_windows(3, per_window=5), "cpu")
        window_one = [r.stage for r in records if r.interval_index == 1]
        assert window_one == [Stage.POINT] * 5 + [Stage.WINDOW, Stage.COMBINED]
        for r in records:
            assert r.log_p <= 0.0

    def test_batch_and_stream_agree(self):
        windows = sample_windows(6)
        _, batch = detect_windows(self.model, self.config, windows, "cpu")
        detector, streamed = self.stream(events_of(windows))
        streamed.extend(detector.flush())
        assert streamed == batch

    def test_checkpoint_resume_is_exact(self, temp_dir):
        events = events_of(sample_windows(6))
        _, expected = self.stream(events)
        path = Path(temp_dir, "cpu.ckpt.json")

        for cut in (5, 19, 24):
            detector, head = self.stream(events[:cut])
            detector.checkpoint(path)
            restored = StreamingDetector.restore(path, self.model, self.config, "cpu")
            assert restored.events_consumed == cut
            _, tail = self.stream(events[cut:], restored)
            assert head + tail == expected

    def test_late_event(self):
        detector, _ = self.stream([(1.0, 0.1), (25.0, 0.2)])
        with pytest.raises(LateEventError) as info:
            detector.push(3.0, 0.3)
        assert info.value.event == (3.0, 0.3)

    def test_reordering_inside_open_window_is_late(self):
        detector, _ = self.stream([(1.0, 0.1), (8.0, 0.2)])
        with pytest.raises(LateEventError) as info:
            detector.push(4.0, 0.3)
        assert info.value.watermark == 8.0
        assert detector.state.counts.sum() == 2

    def test_reorder_buffer(self):
        config = DetectionConfig(mode=Regime.FINITE, mc_samples=100, window_seconds=10.0,
                                 reorder_buffer_seconds=5.0, seed=1)
        detector = StreamingDetector(self.model, config, "cpu")
        detector.push(8.0, 0.1)
        detector.push(12.0, 0.2)
        detector.push(9.0, 0.3)
        assert detector.state.counts.sum() == 2
        records = detector.push(16.0, 0.4)
        assert detector.state.interval_index == 1
        # window 0 closes unscored; the two held samples of window 1 are scored on release
        assert [(r.interval_index, r.stage) for r in records] == [(1, Stage.POINT), (1, Stage.POINT)]

    def test_subwindow_cadence(self):
        config = DetectionConfig(mode=Regime.FINITE, mc_samples=100, window_seconds=10.0,
                                 subwindow_events=3, seed=1)
        _, records = detect_windows(self.model, config, sample_windows(2, per_window=7), "cpu")
        stages = [r.stage for r in records if r.interval_index == 1]
        assert stages.count(Stage.SUBWINDOW) == 2
        assert stages.index(Stage.SUBWINDOW) == 3

    def test_single_mode_has_no_window_stage(self):
        config = DetectionConfig(mode=Regime.SINGLE, mc_samples=100, window_seconds=10.0)
        _, records = detect_windows(self.model, config, sample_windows(3, per_window=1), "cpu")
        assert [r.stage for r in records] == [Stage.POINT, Stage.COMBINED] * 2

    def test_missing_window_repeats_last_frequencies(self):
        windows = sample_windows(4)
        windows[2] = (2, np.empty(0))
        state, records = detect_windows(self.model, self.config, windows, "cpu")
        assert not [r for r in records if r.interval_index == 2]
        assert state.interval_index == 4

    def test_windows_must_follow_state(self):
        state = DetectorState.initial(self.model, self.config, interval_index=5)
        with pytest.raises(InvalidArgumentError):
            detect_windows(self.model, self.config, sample_windows(2), "cpu", state)

    def test_asymptotic_observations(self):
        config = DetectionConfig(mode=Regime.ASYMPTOTIC, mc_samples=200, window_seconds=10.0)
        observations = [floored_observation([0.1, 0.4, 0.4, 0.1], t) for t in range(4)]
        observations[2] = None
        _, records = detect_observations(self.model, config, observations, "cpu")
        assert [(r.interval_index, r.stage) for r in records] == [
            (1, Stage.WINDOW), (1, Stage.COMBINED), (3, Stage.WINDOW), (3, Stage.COMBINED)]

    def test_warm_up_positions_state(self):
        history = [BinnedObservation(t, counts=np.array([1, 2, 3, 4])) for t in range(10, 15)]
        state = warm_up(self.model, self.config, history, first_index=10)
        assert state.interval_index == 15
        assert state.alpha is not None
        np.testing.assert_allclose(state.last_z, [0.1, 0.2, 0.3, 0.4])

    def test_state_requires_position(self):
        state = DetectorState.initial(self.model, self.config)
        with pytest.raises(InvalidArgumentError):
            stream_step(state, self.model, self.config, 0.5)
        assert stream_step(state, self.model, self.config, END_OF_WINDOW)[1] == []

    def test_state_checked_against_model(self):
        state = DetectorState.initial(self.model, self.config, interval_index=0)
        other = make_model(d=5)
        with pytest.raises(StateCorruptError):
            state.check(other)
        payload = state.to_payload()
        payload["counts"] = "broken"
        with pytest.raises(StateCorruptError):
            DetectorState.from_payload(payload)

    def test_state_size_bound(self):
        model = make_model(d=100, hidden=40, layers=2)
        config = DetectionConfig(mode=Regime.FINITE, mc_samples=100, window_seconds=10.0)
        rng = np.random.default_rng(0)
        history = [BinnedObservation(t, counts=rng.multinomial(60, np.full(100, 0.01))) for t in range(3)]
        state = warm_up(model, config, history)
        detector = StreamingDetector(model, config, "cpu", state)
        for j in range(30):
            detector.push(30.0 + j * 0.1, float(rng.normal()))
        detector.push(45.0, 0.0)
        assert len(checkpoint_to_bytes({"detector": detector.state.to_payload(),
                                        "events_consumed": detector.events_consumed})) <= 80 * 1024

    def test_config_validation(self):
        with pytest.raises(InvalidArgumentError):
            DetectionConfig(epsilon=0.0)
        with pytest.raises(InvalidArgumentError):
            DetectionConfig(mc_samples=50)
        with pytest.raises(InvalidArgumentError):
            DetectionConfig(window_seconds=0.0)
        with pytest.raises(ConfigError):
            DetectionConfig(mode="hourly")


class TestDetectionManager:
    """Test concurrent scoring of many metrics."""

    def setup_method(self):
        self.model = make_model()
        self.config = DetectionConfig(mode=Regime.FINITE, mc_samples=100, window_seconds=10.0, seed=2)
        self.manager = DetectionManager(self.config, max_concurrent=2)

    def test_results_sorted_and_match_single_runs(self):
        jobs = [MetricJob(name, self.model, windows=sample_windows(4, seed=i))
                for i, name in enumerate(["mem", "cpu", "disk"])]
        results = self.manager.detect(jobs)
        assert [r.metric_id for r in results] == ["cpu", "disk", "mem"]
        assert all(r.success for r in results)
        _, expected = detect_windows(self.model, self.config, sample_windows(4, seed=1), "cpu")
        assert results[0].records == expected

        progress = self.manager.get_progress()
        assert progress['completed'] == 3
        assert progress['progress_percentage'] == 100
        assert not self.manager.is_detecting()

    def test_history_warm_up(self):
        history = [BinnedObservation(t, counts=np.array([2, 2, 2, 2])) for t in range(3)]
        job = MetricJob("cpu", self.model, windows=[(w + 3, v) for w, v in sample_windows(2)],
                        history=history)
        result = self.manager.run_job(job)
        assert result.success
        assert {r.interval_index for r in result.records} == {3, 4}

    def test_errors_are_reported_per_metric(self, mock_logger):
        self.manager.set_logger(mock_logger)
        history = [BinnedObservation(0, counts=np.array([1, 1, 1, 1]))]
        bad = MetricJob("bad", self.model, windows=sample_windows(2), history=history)
        good = MetricJob("good", self.model, windows=sample_windows(2))
        results = self.manager.detect([bad, good])
        assert isinstance(results[0].error, InvalidArgumentError)
        assert results[1].success
        assert mock_logger.error.called
        assert self.manager.get_progress()['success_count'] == 1

    def test_empty_job_list(self):
        assert self.manager.detect([]) == []

    def test_unexpected_errors_do_not_drop_metrics(self, monkeypatch, mock_logger):
        import detection.detection_manager as manager_module

        original = manager_module.detect_windows

        def failing(model, config, windows, metric_id, state=None):
            if metric_id == "b":
                raise ValueError("non-finite alpha")
            return original(model, config, windows, metric_id, state)

        monkeypatch.setattr(manager_module, "detect_windows", failing)
        manager = DetectionManager(self.config, max_concurrent=1)
        manager.set_logger(mock_logger)
        jobs = [MetricJob(name, self.model, windows=sample_windows(2)) for name in "abc"]
        results = manager.detect(jobs)

        assert [r.metric_id for r in results] == ["a", "b", "c"]
        assert [r.success for r in results] == [True, False, True]
        assert isinstance(results[1].error, DetectorError)
        assert isinstance(results[1].error.__cause__, ValueError)
        assert mock_logger.error.called
        progress = manager.get_progress()
        assert (progress['completed'], progress['success_count']) == (3, 2)
