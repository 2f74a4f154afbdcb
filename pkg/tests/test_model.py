"""
Tests for bin grids, likelihoods, covariates, the recurrent model and model files.
"""

import math
from pathlib import Path
from unittest.mock import patch

import numpy as np
import pytest
from scipy.special import logsumexp
from scipy.stats import norm

from exceptions import (
    DegenerateGridError,
    InvalidArgumentError,
    LateEventError,
    StateCorruptError,
    TrainingDivergedError,
)
from model.covariates import CovariateSpec
from model.dist import (
    ConcentrationVector,
    LikelihoodKind,
    categorical_logpmf,
    dirichlet_logpdf,
    dirichlet_sample,
    dirmult_logpmf,
    dirmult_sample,
    grad_alpha,
)
from model.dynamics import (
    HiddenState,
    ModelDims,
    ModelParams,
    Trainer,
    TrainingConfig,
    TrainingSeries,
    _forward_backward,
    _slice_batch,
    backward,
    encode_series,
    predict_alpha,
    rollout,
    step,
    unroll_loss,
)
from model.grid import (
    BinGrid,
    BinnedObservation,
    EventAggregator,
    aggregate_events,
    bin_samples,
    cdf_from_distribution,
    cdf_from_quantiles,
    cdf_to_probs,
    default_support,
    floored_observation,
    make_quantile_grid,
    make_regular_grid,
    observations_from_windows,
    quantile_levels,
)
from detection.level_sets import dirmult_outcomes
from model.optimizer import Adam, clip_by_global_norm
from model.persistence import (
    ModelBundle,
    checkpoint_to_bytes,
    load_model,
    model_to_bytes,
    read_checkpoint,
    save_model,
    write_checkpoint,
)


def count_series(rng, length, d=4, n=12):
    """Finite-mode observations drawn around a slowly moving mean."""
    observations = []
    for t in range(length):
        p = np.full(d, 1.0)
        p[t % d] += 2.0
        counts = rng.multinomial(n, p / p.sum())
        observations.append(BinnedObservation(t, counts=counts))
    return observations


class TestGrid:
    """Test grids, binning and CDF helpers."""

    def test_regular_grid(self):
        grid = make_regular_grid(0.0, 1.0, 4)
        np.testing.assert_allclose(grid.knots, [0.0, 0.25, 0.5, 0.75, 1.0])
        assert grid.bin_count == 4
        assert grid.y_min == 0.0 and grid.y_max == 1.0

    def test_bin_index_clamps(self):
        grid = make_regular_grid(0.0, 1.0, 4)
        assert grid.bin_index(-5.0) == 0
        assert grid.bin_index(0.25) == 1
        assert grid.bin_index(1.0) == 3
        assert grid.bin_index(7.0) == 3
        with pytest.raises(InvalidArgumentError):
            grid.bin_index(float("nan"))

    @pytest.mark.parametrize("lo,hi,d", [(1.0, 1.0, 4), (2.0, 1.0, 4), (0.0, 1.0, 1), (0.0, math.inf, 4)])
    def test_invalid_regular_grid(self, lo, hi, d):
        with pytest.raises(InvalidArgumentError):
            make_regular_grid(lo, hi, d)

    def test_knots_must_increase(self):
        with pytest.raises(InvalidArgumentError):
            BinGrid(np.array([0.0, 1.0, 1.0]))

    def test_bin_samples(self, small_grid):
        observation = bin_samples([-3.0, -1.5, 0.0, 0.1, 1.9, 2.0], small_grid, interval_index=4)
        np.testing.assert_array_equal(observation.counts, [2, 0, 2, 2])
        assert observation.sample_count == 6
        assert observation.interval_index == 4
        np.testing.assert_allclose(observation.frequencies(), [1 / 3, 0, 1 / 3, 1 / 3])

    def test_observation_validation(self):
        with pytest.raises(InvalidArgumentError):
            BinnedObservation(0, counts=np.zeros(3))
        with pytest.raises(InvalidArgumentError):
            BinnedObservation(0, probs=np.array([0.5, 0.6]))
        with pytest.raises(InvalidArgumentError):
            BinnedObservation(0, counts=np.array([1, 2]), sample_count=4)
        with pytest.raises(InvalidArgumentError):
            BinnedObservation(0)

    def test_quantile_grid(self, rng):
        samples = rng.normal(size=2000)
        grid = make_quantile_grid(samples, 10, (-5.0, 5.0))
        assert grid.bin_count == 10
        counts = bin_samples(samples, grid).counts
        assert counts.min() >= 150

    def test_quantile_grid_converges_to_regular_grid(self):
        N = 100_000
        samples = np.random.default_rng(42).uniform(0.0, 1.0, size=N)
        grid = make_quantile_grid(samples, 10, (0.0, 1.0))
        regular = make_regular_grid(0.0, 1.0, 10)
        assert np.max(np.abs(grid.knots - regular.knots)) <= 3.0 / math.sqrt(N)

    def test_nested_grids_are_consistent(self, rng):
        coarse = make_regular_grid(-2.0, 2.0, 4)
        fine = make_regular_grid(-2.0, 2.0, 8)
        np.testing.assert_array_equal(fine.knots[::2], coarse.knots)

        coarse_probs = cdf_to_probs(cdf_from_distribution(coarse, norm.cdf)).probs
        fine_probs = cdf_to_probs(cdf_from_distribution(fine, norm.cdf)).probs
        np.testing.assert_allclose(fine_probs.reshape(4, 2).sum(axis=1), coarse_probs, rtol=0, atol=1e-12)

        samples = np.concatenate([rng.normal(size=500), fine.knots])
        fine_counts = bin_samples(samples, fine).counts
        np.testing.assert_array_equal(fine_counts.reshape(4, 2).sum(axis=1), bin_samples(samples, coarse).counts)

    def test_quantile_grid_with_duplicates(self):
        samples = np.concatenate([np.zeros(50), np.arange(1, 8)])
        grid = make_quantile_grid(samples, 5, (-1.0, 10.0))
        assert grid.bin_count == 5

    def test_degenerate_quantile_grid(self):
        with pytest.raises(DegenerateGridError) as info:
            make_quantile_grid([1.0, 1.0, 2.0], 4, (0.0, 3.0))
        assert info.value.distinct_values == 2

    def test_default_support(self):
        assert default_support([0.0, 10.0], margin=0.1) == (-1.0, 11.0)
        lo, hi = default_support([3.0, 3.0])
        assert lo < 3.0 < hi

    def test_cdf_from_distribution_folds_tails(self):
        grid = BinGrid(np.array([-1.0, 0.0, 1.0]))
        observation = cdf_to_probs(cdf_from_distribution(grid, norm.cdf))
        np.testing.assert_allclose(observation.probs, [0.5, 0.5])
        assert observation.is_asymptotic

    def test_cdf_from_quantiles(self):
        grid = make_regular_grid(0.0, 4.0, 4)
        levels = quantile_levels(3)
        cdf = cdf_from_quantiles(levels, [1.0, 2.0, 3.0], grid)
        np.testing.assert_allclose(cdf.cum, [0.0, 0.25, 0.5, 0.75, 1.0])
        np.testing.assert_allclose(cdf.density(), [0.25] * 4)
        assert cdf.evaluate(1.5) == pytest.approx(0.375)

        with pytest.raises(InvalidArgumentError):
            cdf_from_quantiles(levels, [3.0, 2.0, 1.0], grid)

    def test_floored_observation(self):
        observation = floored_observation([1.0, 0.0, 0.0], interval_index=2)
        assert np.all(observation.probs > 0)
        assert observation.probs.sum() == pytest.approx(1.0)
        assert observation.interval_index == 2

    def test_event_aggregator(self):
        aggregator = EventAggregator(window=10.0)
        assert aggregator.push(1.0, 0.5) == []
        closed = aggregator.push(12.0, 1.5)
        assert [index for index, _ in closed] == [0]
        np.testing.assert_array_equal(closed[0][1], [0.5])
        closed = aggregator.push(35.0, 2.5)
        assert [(index, len(values)) for index, values in closed] == [(1, 1), (2, 0)]
        assert [index for index, _ in aggregator.flush()] == [3]

    def test_reorder_buffer_and_late_events(self):
        aggregator = EventAggregator(window=10.0, reorder_buffer=5.0)
        aggregator.push(8.0, 1.0)
        assert aggregator.push(12.0, 2.0) == []
        assert aggregator.push(9.0, 3.0) == []
        closed = aggregator.push(16.0, 4.0)
        np.testing.assert_array_equal(closed[0][1], [1.0, 3.0])
        with pytest.raises(LateEventError) as info:
            aggregator.push(4.0, 5.0)
        assert info.value.event == (4.0, 5.0)

    def test_reordering_inside_open_window_beyond_buffer(self):
        aggregator = EventAggregator(window=10.0, reorder_buffer=2.0)
        aggregator.push(1.0, 1.0)
        aggregator.push(8.0, 2.0)
        assert aggregator.push(6.5, 3.0) == []
        with pytest.raises(LateEventError) as info:
            aggregator.push(5.0, 4.0)
        assert info.value.watermark == 6.0
        np.testing.assert_array_equal(aggregator.flush()[0][1], [1.0, 2.0, 3.0])

    def test_missing_windows_become_none(self, small_grid):
        windows = list(aggregate_events([(0.0, 0.1), (25.0, 0.2)], window=10.0))
        observations = observations_from_windows(windows, small_grid)
        assert observations[1] is None
        assert observations[2].sample_count == 1


class TestLikelihoods:
    """Test Dirichlet, Dirichlet-Multinomial and categorical likelihoods."""

    def test_uniform_dirichlet_density(self):
        value = dirichlet_logpdf([0.2, 0.3, 0.5], [1.0, 1.0, 1.0]).value
        assert value == pytest.approx(math.log(2.0))

    def test_dirichlet_density_example(self):
        value = dirichlet_logpdf([0.2, 0.8], [2.0, 2.0]).value
        assert value == pytest.approx(math.log(0.96), abs=1e-12)
        assert value == pytest.approx(-0.0408220, abs=1e-7)

    def test_merging_bins_sums_concentrations(self):
        alpha = np.array([1.5, 2.5, 3.0, 0.7])
        draws = dirichlet_sample(alpha, np.random.default_rng(8), size=200_000)
        merged = np.column_stack([draws[:, 0], draws[:, 1] + draws[:, 2], draws[:, 3]])

        target = np.array([1.5, 5.5, 0.7])
        a0 = target.sum()
        mean = target / a0
        var = target * (a0 - target) / (a0 ** 2 * (a0 + 1.0))
        np.testing.assert_allclose(merged.mean(axis=0), mean, atol=3e-3)
        np.testing.assert_allclose(merged.var(axis=0), var, rtol=5e-2)

    def test_zero_bin(self):
        assert dirichlet_logpdf([0.0, 1.0], [2.0, 1.0]).value == -math.inf
        with pytest.raises(InvalidArgumentError):
            dirichlet_logpdf([0.0, 1.0], [0.5, 1.0])

    @pytest.mark.parametrize("n", range(1, 7))
    @pytest.mark.parametrize("d", range(2, 5))
    def test_dirmult_normalizes(self, n, d):
        alpha = np.random.default_rng(n * 10 + d).gamma(1.0, 2.0, size=d) + 0.05
        _, log_masses = dirmult_outcomes(alpha, n)
        assert abs(math.exp(logsumexp(log_masses)) - 1.0) < 1e-9

    def test_single_sample_is_categorical(self):
        alpha = np.array([3.0, 1.0, 6.0])
        for k in range(3):
            m = np.eye(3, dtype=int)[k]
            assert dirmult_logpmf(m, 1, alpha).value == pytest.approx(categorical_logpmf(k, alpha).value)
        assert categorical_logpmf(2, alpha).value == pytest.approx(math.log(0.6))

    def test_invalid_inputs(self):
        with pytest.raises(InvalidArgumentError):
            ConcentrationVector(np.array([1.0, 0.0]))
        with pytest.raises(InvalidArgumentError):
            dirmult_logpmf([1, 1], 3, [1.0, 1.0])
        with pytest.raises(InvalidArgumentError):
            dirichlet_logpdf([0.5, 0.6], [1.0, 1.0])
        with pytest.raises(InvalidArgumentError):
            categorical_logpmf(3, [1.0, 1.0])

    def test_dirichlet_gradient_matches_finite_differences(self, rng):
        for _ in range(5):
            alpha = rng.gamma(2.0, 1.0, size=4) + 0.2
            p = rng.dirichlet(np.ones(4))
            analytic = grad_alpha(dirichlet_logpdf, p, alpha)
            numeric = np.empty(4)
            for k in range(4):
                h = 1e-6 * max(1.0, alpha[k])
                up, down = alpha.copy(), alpha.copy()
                up[k] += h
                down[k] -= h
                numeric[k] = (dirichlet_logpdf(p, up).value - dirichlet_logpdf(p, down).value) / (2 * h)
            np.testing.assert_allclose(analytic, numeric, rtol=1e-4, atol=1e-7)

    def test_dirmult_gradient_matches_finite_differences(self, rng):
        for _ in range(5):
            alpha = rng.gamma(2.0, 1.0, size=4) + 0.2
            m = rng.multinomial(9, np.full(4, 0.25))
            analytic = grad_alpha(LikelihoodKind.DIR_MULT, m, alpha)
            numeric = np.empty(4)
            for k in range(4):
                h = 1e-6 * max(1.0, alpha[k])
                up, down = alpha.copy(), alpha.copy()
                up[k] += h
                down[k] -= h
                numeric[k] = (dirmult_logpmf(m, 9, up).value - dirmult_logpmf(m, 9, down).value) / (2 * h)
            np.testing.assert_allclose(analytic, numeric, rtol=1e-4, atol=1e-7)

    def test_gradient_rejects_unknown_likelihood(self):
        with pytest.raises(InvalidArgumentError):
            grad_alpha(categorical_logpmf, [1, 0], [1.0, 1.0])

    def test_samplers(self, rng):
        p = dirichlet_sample([1e-3, 1e-3, 1e-3], rng, size=50)
        assert np.all(p > 0)
        np.testing.assert_allclose(p.sum(axis=1), 1.0)
        m = dirmult_sample(7, [1.0, 2.0, 3.0], rng, size=20)
        assert m.shape == (20, 3)
        assert np.all(m.sum(axis=1) == 7)


class TestOptimizer:
    """Test the adaptive-moment update."""

    def test_clip_by_global_norm(self):
        np.testing.assert_allclose(clip_by_global_norm(np.array([3.0, 4.0]), 1.0), [0.6, 0.8])
        np.testing.assert_array_equal(clip_by_global_norm(np.array([0.3, 0.4]), 1.0), [0.3, 0.4])

    def test_adam_descends_a_quadratic(self):
        params = np.array([5.0, -3.0])
        optimizer = Adam(2, learning_rate=0.1)
        for _ in range(500):
            optimizer.step(params, 2.0 * params)
        assert np.abs(params).max() < 0.5

    def test_step_scale_is_per_coordinate(self):
        params = np.zeros(3)
        optimizer = Adam(3, learning_rate=0.01, step_scale=np.array([1.0, 10.0, 1.0]))
        optimizer.step(params, np.array([1.0, 1.0, -1.0]))
        np.testing.assert_allclose(params, [-0.01, -0.1, 0.01], rtol=1e-6)

    @pytest.mark.parametrize("scale", [np.ones(2), np.array([1.0, 0.0, 1.0])])
    def test_invalid_step_scale(self, scale):
        with pytest.raises(InvalidArgumentError):
            Adam(3, step_scale=scale)


class TestCovariates:
    """Test time covariates."""

    def test_width_and_periodicity(self):
        spec = CovariateSpec.fit(48, interval_seconds=3600.0)
        rows = spec.build([0, 24, 168])
        assert rows.shape == (3, 5)
        np.testing.assert_allclose(rows[0, :2], rows[1, :2], atol=1e-12)
        np.testing.assert_allclose(rows[0, :4], rows[2, :4], atol=1e-12)
        assert CovariateSpec(use_age=False).width == 4

    def test_age_standardized_on_training_range(self):
        spec = CovariateSpec.fit(100, first_index=50)
        ages = spec.build(np.arange(50, 150))[:, 4]
        assert ages.mean() == pytest.approx(0.0, abs=1e-12)
        assert ages.std() == pytest.approx(1.0)

    def test_round_trip_dict(self):
        spec = CovariateSpec.fit(10, 600.0, use_age=False)
        assert CovariateSpec.from_dict(spec.to_dict()) == spec


class TestDynamics:
    """Test the recurrent model, its gradient and training."""

    def setup_method(self):
        self.rng = np.random.default_rng(3)
        self.spec = CovariateSpec.fit(8)

    def test_step(self, tiny_params):
        state = HiddenState.zeros(tiny_params.dims)
        x = self.spec.build([0])[0]
        new_state, alpha = step(tiny_params, state, np.full(4, 0.25), x)
        assert alpha.dim == 4
        assert np.all(alpha.alpha > 0)
        assert len(new_state.h) == 2
        again = predict_alpha(tiny_params, state, np.full(4, 0.25), x)
        np.testing.assert_array_equal(again.alpha, alpha.alpha)

    def test_step_rejects_bad_inputs(self, tiny_params):
        state = HiddenState.zeros(tiny_params.dims)
        x = self.spec.build([0])[0]
        with pytest.raises(InvalidArgumentError):
            step(tiny_params, state, np.array([0.5, 0.5, 0.5, 0.5]), x)
        with pytest.raises(InvalidArgumentError):
            step(tiny_params, state, np.full(4, 0.25), x[:3])

    def test_parameter_layout(self, tiny_params):
        dims = tiny_params.dims
        assert tiny_params.weight(0).shape == (12, 4 + 5 + 3)
        assert tiny_params.weight(1).shape == (12, 6)
        assert tiny_params.projection_weight.shape == (4, 3)
        assert tiny_params.vector.size == dims.parameter_count
        # forget gate starts open
        np.testing.assert_array_equal(tiny_params.bias(0)[3:6], 1.0)

    @pytest.mark.parametrize("instance", range(20))
    def test_bptt_gradient_matches_finite_differences(self, instance):
        rng = np.random.default_rng(100 + instance)
        dims = ModelDims(bin_count=4, covariate_width=5, hidden_width=3, num_layers=2)
        params = ModelParams.initialize(dims, rng)
        series = count_series(rng, 6)
        if instance % 2:
            series[3] = None
        covariates = self.spec.build(np.arange(6))

        analytic = backward(params, series, covariates).vector
        coords = rng.choice(dims.parameter_count, size=25, replace=False)
        for k in coords:
            h = 1e-6
            up, down = params.copy(), params.copy()
            up.vector[k] += h
            down.vector[k] -= h
            numeric = (unroll_loss(up, series, covariates).total - unroll_loss(down, series, covariates).total) / (2 * h)
            assert numeric == pytest.approx(analytic[k], rel=1e-3, abs=1e-6)

    def test_asymptotic_gradient(self, tiny_params):
        grid = make_regular_grid(-2.0, 2.0, 4)
        series = [floored_observation(cdf_to_probs(cdf_from_distribution(
            grid, lambda y, t=t: norm.cdf(y, loc=0.3 * t))).probs, t) for t in range(5)]
        covariates = self.spec.build(np.arange(5))
        analytic = backward(tiny_params, series, covariates).vector
        for k in (0, 50, tiny_params.dims.parameter_count - 1):
            up, down = tiny_params.copy(), tiny_params.copy()
            up.vector[k] += 1e-6
            down.vector[k] -= 1e-6
            numeric = (unroll_loss(up, series, covariates).total - unroll_loss(down, series, covariates).total) / 2e-6
            assert numeric == pytest.approx(analytic[k], rel=1e-3, abs=1e-6)

    def test_unroll_resumes_from_hidden_state(self, tiny_params):
        series = count_series(self.rng, 10)
        covariates = self.spec.build(np.arange(10))
        full = unroll_loss(tiny_params, series, covariates)
        head = unroll_loss(tiny_params, series[:5], covariates[:5])
        tail = unroll_loss(tiny_params, series[4:], covariates[4:], h0=head.final_state)
        assert head.total + tail.total == pytest.approx(full.total, rel=1e-12)
        np.testing.assert_allclose(np.concatenate([head.per_step, tail.per_step]), full.per_step, rtol=1e-12)

    def test_missing_steps_are_skipped(self, tiny_params):
        series = count_series(self.rng, 6)
        series[2] = None
        result = unroll_loss(tiny_params, series, self.spec.build(np.arange(6)))
        assert math.isnan(result.per_step[1])
        assert result.total == pytest.approx(-np.nansum(result.per_step))

    def test_gradient_adds_over_repeated_series(self, tiny_params):
        series = count_series(self.rng, 8)
        covariates = self.spec.build(np.arange(8))
        single = backward(tiny_params, series, covariates).vector

        seq = encode_series(series, covariates, 4)
        doubled = _slice_batch([seq, seq], [(0, 1, 7), (1, 1, 7)])
        loss, _, gradient, _ = _forward_backward(tiny_params, doubled, HiddenState.zeros(tiny_params.dims, batch=2))
        assert loss == pytest.approx(2.0 * unroll_loss(tiny_params, series, covariates).total, rel=1e-12)
        np.testing.assert_allclose(gradient, 2.0 * single, rtol=1e-10, atol=1e-14)

    def test_unused_inputs_get_zero_gradient(self, tiny_params):
        series = count_series(self.rng, 6)
        gradient = backward(tiny_params, series, np.zeros((6, 5)))
        # layer-0 columns: previous frequencies, covariates, hidden state
        np.testing.assert_array_equal(gradient.weight(0)[:, 4:9], 0.0)
        assert np.any(gradient.weight(0)[:, :4] != 0.0)

    def test_rollout(self, tiny_params):
        state = HiddenState.zeros(tiny_params.dims)
        covariates = self.spec.build(np.arange(5))
        first = rollout(tiny_params, state, np.full(4, 0.25), covariates, 5, LikelihoodKind.DIR_MULT,
                        np.random.default_rng(0), num_paths=3, sample_count=10)
        second = rollout(tiny_params, state, np.full(4, 0.25), covariates, 5, LikelihoodKind.DIR_MULT,
                         np.random.default_rng(0), num_paths=3, sample_count=10)
        assert first.samples.shape == (3, 5, 4)
        np.testing.assert_allclose(first.samples.sum(axis=-1), 1.0)
        np.testing.assert_array_equal(first.samples, second.samples)
        with pytest.raises(InvalidArgumentError):
            rollout(tiny_params, state, np.full(4, 0.25), covariates, 6, LikelihoodKind.DIRICHLET,
                    np.random.default_rng(0))

    def trainer(self, **overrides):
        config = dict(epochs=3, learning_rate=1e-2, batch_size=2, context_length=5,
                      num_layers=1, hidden_width=3, seed=11)
        config.update(overrides)
        return Trainer(TrainingConfig(**config))

    def corpus(self):
        rng = np.random.default_rng(5)
        covariates = self.spec.build(np.arange(16))
        return [TrainingSeries(count_series(rng, 16), covariates, "a"),
                TrainingSeries(count_series(rng, 16), covariates, "b")]

    def test_training_is_deterministic(self):
        corpus = self.corpus()
        first = self.trainer().fit(corpus)
        second = self.trainer().fit(corpus)
        np.testing.assert_array_equal(first.params.vector, second.params.vector)
        assert first.best_loss == second.best_loss
        assert len(first.history) == 3

    def test_training_ignores_corpus_order(self):
        corpus = self.corpus()
        forward = self.trainer().fit(corpus)
        reverse = self.trainer().fit(corpus[::-1])
        np.testing.assert_array_equal(forward.params.vector, reverse.params.vector)

    def test_training_reduces_loss(self):
        result = self.trainer(epochs=15).fit(self.corpus())
        assert result.best_loss <= result.history[0]
        assert result.best_loss == min(result.history)

    def test_minibatches_are_drawn_at_random(self):
        corpus = self.corpus()
        sequences = [encode_series(item.observations, item.covariates, 4) for item in corpus]
        trainer = self.trainer(batch_size=8)
        rng = np.random.default_rng(0)
        first = trainer._sample_ranges(sequences, rng)
        second = trainer._sample_ranges(sequences, rng)
        assert first != second
        for s, start, stop in first + second:
            assert s in (0, 1)
            assert stop - start + 1 == 5
            assert 1 <= start and stop <= 15

    def test_best_loss_is_corpus_loss_of_returned_params(self):
        corpus = self.corpus()
        result = self.trainer(epochs=4).fit(corpus)
        total = sum(unroll_loss(result.params, item.observations, item.covariates).total for item in corpus)
        # 15 predicted intervals per series
        assert result.best_loss == pytest.approx(total / 30, rel=1e-9)
        assert result.best_loss == min(result.history)

    def test_training_logs(self, mock_logger):
        trainer = self.trainer(epochs=1)
        trainer.set_logger(mock_logger)
        trainer.fit(self.corpus())
        assert mock_logger.log.called

    def test_training_rejects_bad_corpus(self):
        with pytest.raises(InvalidArgumentError):
            self.trainer().fit([])
        short = TrainingSeries(count_series(self.rng, 3), self.spec.build(np.arange(3)))
        with pytest.raises(InvalidArgumentError):
            self.trainer().fit([short])

    def test_divergence(self):
        corpus = self.corpus()
        size = ModelDims(4, 5, 3, 1).parameter_count
        state = HiddenState.zeros(ModelDims(4, 5, 3, 1), batch=2)
        with patch("model.dynamics._forward_backward",
                   return_value=(float("nan"), None, np.zeros(size), state)):
            with pytest.raises(TrainingDivergedError) as info:
                self.trainer().fit(corpus)
        assert info.value.epoch == 1


class TestPersistence:
    """Test model files and checkpoints."""

    def bundle(self, tiny_params, small_grid):
        return ModelBundle(params=tiny_params, grids={"cpu": small_grid},
                           covariates=CovariateSpec.fit(24), training={"epochs": 1},
                           mode="finite", samples_per_interval=60, seed=3, final_nll=1.25)

    def test_model_file_round_trip(self, temp_dir, tiny_params, small_grid):
        path = Path(temp_dir, "model.bin")
        save_model(path, self.bundle(tiny_params, small_grid))
        loaded = load_model(path)
        np.testing.assert_array_equal(loaded.params.vector, tiny_params.vector)
        assert loaded.grid_for("cpu").same_as(small_grid)
        assert loaded.grid_for("other").same_as(small_grid)
        assert loaded.covariates == CovariateSpec.fit(24)
        assert loaded.final_nll == 1.25
        assert loaded.samples_per_interval == 60
        assert path.read_bytes().startswith(b"DISTANOM-MODEL 1\n")

    def test_identical_bundles_give_identical_bytes(self, tiny_params, small_grid):
        assert model_to_bytes(self.bundle(tiny_params, small_grid)) == \
            model_to_bytes(self.bundle(tiny_params.copy(), small_grid))

    def test_corrupt_model_file(self, temp_dir, tiny_params, small_grid):
        path = Path(temp_dir, "model.bin")
        data = bytearray(model_to_bytes(self.bundle(tiny_params, small_grid)))
        data[-3] ^= 0xFF
        path.write_bytes(bytes(data))
        with pytest.raises(StateCorruptError):
            load_model(path)

        path.write_bytes(b"SOMETHING ELSE\n{}\n")
        with pytest.raises(StateCorruptError):
            load_model(path)
        with pytest.raises(StateCorruptError):
            load_model(Path(temp_dir, "absent.bin"))

    def test_checkpoint_round_trip(self, temp_dir):
        path = Path(temp_dir, "state.json")
        payload = {"interval_index": 4, "counts": [1, 2, 3]}
        size = write_checkpoint(path, payload)
        assert size == len(checkpoint_to_bytes(payload))
        assert read_checkpoint(path) == payload

    def test_tampered_checkpoint(self, temp_dir):
        path = Path(temp_dir, "state.json")
        write_checkpoint(path, {"interval_index": 4})
        path.write_text(path.read_text().replace('"interval_index":4', '"interval_index":5'))
        with pytest.raises(StateCorruptError):
            read_checkpoint(path)
