import numpy as np
import pytest
import scipy.special

from dpmmad import (
    DpmmModel,
    EmbeddingBatch,
    FitConfig,
    SufficientStats,
    SyntheticSpec,
    digamma,
    effective_components,
    fit,
    init_model,
    m_step,
    mixture_log_likelihood,
    responsibilities,
    sample_synthetic,
    stick_breaking_weights,
    update_alpha,
    update_stats,
)

from util import random_model


def three_cluster_data(seed: int = 1, count: int = 6000, spread: float = 0.1):
    means = 6.0 * np.array(
        [
            [1.0, 0, 0, 0, 0, 0, 0, 0],
            [-0.5, 0.9, 0, 0, 0, 0, 0, 0],
            [-0.5, -0.9, 0, 0, 0, 0, 0, 0],
        ]
    )
    spec = SyntheticSpec(
        means, np.full((3, 8), spread**2), np.array([0.5, 0.3, 0.2]), count, seed=seed
    )
    return spec, *sample_synthetic(spec)


class TestFitConfig:
    def test_defaults_follow_reference_operating_point(self):
        config = FitConfig()
        assert config.k == 500
        assert config.gamma == 0.2
        assert config.epochs == 40
        assert config.batch_vectors == 12288

    @pytest.mark.parametrize(
        "kwargs",
        [
            dict(gamma=0.0),
            dict(gamma=1.5),
            dict(k=0),
            dict(epochs=-1),
            dict(alpha_init=0.0),
            dict(alpha_clamp=(1.0, 0.5)),
        ],
    )
    def test_rejects_bad_values(self, kwargs):
        with pytest.raises(ValueError):
            FitConfig(**kwargs)


class TestDigamma:
    def test_reference_values(self):
        assert digamma(1.0) == pytest.approx(-0.5772156649015329, abs=1e-10)
        assert digamma(2.0) == pytest.approx(0.4227843350984671, abs=1e-10)
        assert digamma(0.5) == pytest.approx(-1.9635100260214235, abs=1e-10)

    def test_agrees_with_scipy_over_wide_range(self):
        x = np.geomspace(1e-3, 1e5, 300)
        ours = digamma(x)
        reference = scipy.special.digamma(x)
        assert np.all(np.abs(ours - reference) <= 1e-10 * np.maximum(1.0, np.abs(reference)))

    def test_rejects_nonpositive(self):
        with pytest.raises(ValueError):
            digamma(0.0)
        with pytest.raises(ValueError):
            digamma(-3.0)


class TestInitModel:
    def test_single_component_sticks(self):
        batch = EmbeddingBatch(np.random.default_rng(0).normal(size=(10, 3)))
        model, _ = init_model(batch, FitConfig(k=1, seed=0))
        np.testing.assert_array_equal(model.sticks, [1.0])
        np.testing.assert_array_equal(model.component_weights(), [1.0])

    def test_uniform_initial_weights(self):
        batch = EmbeddingBatch(np.random.default_rng(0).normal(size=(50, 2)))
        model, stats = init_model(batch, FitConfig(k=7, seed=3))
        np.testing.assert_allclose(model.component_weights(), 1 / 7, rtol=0, atol=1e-12)
        np.testing.assert_allclose(stats.p_bar, 1 / 7, rtol=0, atol=1e-15)

    def test_deterministic_for_seed(self):
        batch = EmbeddingBatch(np.random.default_rng(1).normal(size=(30, 4)))
        m1, s1 = init_model(batch, FitConfig(k=5, seed=9))
        m2, s2 = init_model(batch, FitConfig(k=5, seed=9))
        assert np.array_equal(m1.means, m2.means)
        assert np.array_equal(m1.vars, m2.vars)
        assert np.array_equal(s1.m_bar, s2.m_bar)

    def test_identical_rows_floor_variance(self):
        row = np.array([1.5, -2.0, 0.25])
        batch = EmbeddingBatch(np.tile(row, (20, 1)))
        config = FitConfig(k=4, seed=0)
        model, _ = init_model(batch, config)
        np.testing.assert_array_equal(model.means, np.tile(row, (4, 1)))
        np.testing.assert_array_equal(model.vars, np.full((4, 3), config.var_floor))

    def test_rejects_empty_batch(self):
        with pytest.raises(ValueError):
            init_model(EmbeddingBatch(np.zeros((0, 3))), FitConfig(k=2))


class TestUpdateStats:
    def test_gamma_one_erases_history(self):
        rng = np.random.default_rng(2)
        stats = SufficientStats(np.array([0.3, 0.7]), rng.normal(size=(2, 3)),
                                rng.uniform(1, 2, size=(2, 3)), 5)
        batch = EmbeddingBatch(rng.normal(size=(6, 3)))
        model = random_model(rng, 2, 3)
        resp = responsibilities(batch, model)
        new = update_stats(stats, resp, batch, gamma=1.0)
        np.testing.assert_allclose(new.p_bar, resp.mean(axis=0), atol=1e-15)
        np.testing.assert_allclose(new.m_bar, (resp.T @ batch.data) / 6, atol=1e-15)
        assert new.batch_size == 6

    def test_gamma_zero_rejected(self):
        stats = SufficientStats(np.array([1.0]), np.zeros((1, 2)), np.ones((1, 2)), 1)
        batch = EmbeddingBatch(np.zeros((1, 2)))
        with pytest.raises(ValueError):
            update_stats(stats, np.ones((1, 1)), batch, gamma=0.0)

    def test_midpoint_arithmetic(self):
        stats = SufficientStats(np.array([1.0]), np.zeros((1, 2)), np.zeros((1, 2)), 1)
        batch = EmbeddingBatch(np.array([[2.0, 0.0]]))
        new = update_stats(stats, np.array([[1.0]]), batch, gamma=0.5)
        np.testing.assert_array_equal(new.m_bar, [[1.0, 0.0]])

    def test_p_bar_stays_simplex_through_many_updates(self):
        rng = np.random.default_rng(3)
        stats = SufficientStats(np.full(4, 0.25), np.zeros((4, 2)), np.ones((4, 2)), 1)
        model = random_model(rng, 4, 2)
        for _ in range(200):
            batch = EmbeddingBatch(rng.normal(size=(rng.integers(1, 20), 2)))
            stats = update_stats(stats, responsibilities(batch, model), batch, gamma=0.2)
            assert abs(stats.p_bar.sum() - 1.0) <= 1e-9

    def test_bad_responsibility_rows_rejected(self):
        stats = SufficientStats(np.array([0.5, 0.5]), np.zeros((2, 2)), np.ones((2, 2)), 1)
        batch = EmbeddingBatch(np.ones((1, 2)))
        with pytest.raises(ValueError):
            update_stats(stats, np.array([[0.6, 0.6]]), batch, gamma=0.5)


class TestMStep:
    def test_single_point_mass(self):
        y = np.array([1.0, -2.0])
        stats = SufficientStats(np.array([1.0]), y[None, :], (y**2)[None, :], 1)
        config = FitConfig(k=1)
        means, vars_, sticks = m_step(stats, alpha_prev=1.0, config=config)
        np.testing.assert_allclose(means, y[None, :], atol=1e-15)
        np.testing.assert_array_equal(vars_, np.full((1, 2), config.var_floor))
        np.testing.assert_array_equal(sticks, [1.0])

    def test_two_equal_components_at_alpha_one(self):
        stats = SufficientStats(
            np.array([0.5, 0.5]), np.zeros((2, 2)), np.ones((2, 2)), 10
        )
        _, _, sticks = m_step(stats, alpha_prev=1.0, config=FitConfig(k=2))
        assert sticks[0] == pytest.approx(0.5, abs=1e-15)
        assert sticks[1] == 1.0
        np.testing.assert_allclose(
            stick_breaking_weights(sticks), [0.5, 0.5], rtol=0, atol=1e-15
        )

    def test_alpha_one_reproduces_p_bar(self):
        stats = SufficientStats(
            np.array([0.9, 0.1]), np.zeros((2, 1)), np.ones((2, 1)), 4
        )
        _, _, sticks = m_step(stats, alpha_prev=1.0, config=FitConfig(k=2))
        assert sticks[0] == pytest.approx(0.9, abs=1e-15)
        np.testing.assert_allclose(
            stick_breaking_weights(sticks), [0.9, 0.1], rtol=0, atol=1e-12
        )

    def test_map_collapse_100_random_stat_vectors(self):
        rng = np.random.default_rng(13)
        for _ in range(100):
            k = int(rng.integers(2, 40))
            p = rng.dirichlet(np.full(k, 2.0))
            stats = SufficientStats(
                p, rng.normal(size=(k, 3)) * p[:, None],
                rng.uniform(0.5, 2.0, size=(k, 3)) * p[:, None],
                int(rng.integers(1, 500)),
            )
            _, _, sticks = m_step(stats, alpha_prev=1.0, config=FitConfig(k=k))
            np.testing.assert_allclose(
                stick_breaking_weights(sticks), p, rtol=0, atol=1e-12
            )

    def test_starved_component_keeps_previous_mean(self):
        p = np.array([1.0 - 1e-16, 1e-16])
        stats = SufficientStats(p, np.array([[2.0], [0.0]]) * p[:, None],
                                np.array([[5.0], [0.0]]) * p[:, None], 3)
        prev = np.array([[0.0], [7.5]])
        config = FitConfig(k=2)
        means, vars_, _ = m_step(stats, alpha_prev=1.0, config=config, prev_means=prev)
        assert means[1, 0] == 7.5
        assert vars_[1, 0] == config.var_floor


class TestUpdateAlpha:
    def test_single_component_unchanged(self):
        stats = SufficientStats(np.array([1.0]), np.zeros((1, 2)), np.ones((1, 2)), 7)
        assert update_alpha(stats, alpha_prev=2.5, config=FitConfig(k=1)) == 2.5

    def test_two_component_reference_value(self):
        stats = SufficientStats(
            np.array([0.5, 0.5]), np.zeros((2, 1)), np.ones((2, 1)), 1
        )
        expected = 1.0 / (scipy.special.digamma(3.0) - scipy.special.digamma(1.5))
        assert update_alpha(stats, alpha_prev=1.0, config=FitConfig(k=2)) == pytest.approx(
            expected, abs=1e-10
        )

    def test_result_respects_clamp(self):
        stats = SufficientStats(
            np.array([0.5, 0.5]), np.zeros((2, 1)), np.ones((2, 1)), 1
        )
        config = FitConfig(k=2, alpha_clamp=(1e-3, 1.0))
        assert update_alpha(stats, alpha_prev=1.0, config=config) == 1.0

    def test_rejects_nonpositive_alpha(self):
        stats = SufficientStats(np.array([0.5, 0.5]), np.zeros((2, 1)), np.ones((2, 1)), 1)
        with pytest.raises(ValueError):
            update_alpha(stats, alpha_prev=0.0, config=FitConfig(k=2))


class TestEffectiveComponents:
    def _model(self, sticks):
        sticks = np.asarray(sticks)
        k = sticks.size
        return DpmmModel(np.zeros((k, 2)), np.ones((k, 2)), sticks, 1.0)

    def test_all_above_threshold(self):
        model = self._model([0.5, 0.5, 1.0])  # weights (0.5, 0.25, 0.25)
        assert effective_components(model, 1e-6) == [0, 1, 2]

    def test_vanished_components_dropped(self):
        model = self._model([1.0, 1.0, 1.0])  # weights (1, 0, 0)
        assert effective_components(model, 1e-6) == [0]

    def test_threshold_above_max_weight_rejected(self):
        model = self._model([0.6, 1.0])  # weights (0.6, 0.4)
        with pytest.raises(ValueError):
            effective_components(model, 0.7)


class TestFit:
    def _units(self, data, rows=500):
        return [EmbeddingBatch(data[i : i + rows]) for i in range(0, len(data), rows)]

    def test_zero_epochs_returns_initialization(self):
        _, batch, _ = three_cluster_data(count=800)
        config = FitConfig(k=4, epochs=0, seed=5, batch_vectors=800)
        model, report = fit([batch], [], config)
        expected, _ = init_model(batch, config)
        assert np.array_equal(model.means, expected.means)
        assert report.val_loglik == []
        assert report.best_epoch == -1

    def test_deterministic_given_seed_and_data(self):
        _, batch, _ = three_cluster_data(count=2000)
        units = self._units(batch.data)
        config = FitConfig(k=6, epochs=3, seed=2, batch_vectors=600)
        m1, r1 = fit(units, units[:1], config)
        m2, r2 = fit(units, units[:1], config)
        assert np.array_equal(m1.means, m2.means)
        assert np.array_equal(m1.vars, m2.vars)
        assert np.array_equal(m1.sticks, m2.sticks)
        assert m1.alpha == m2.alpha
        assert r1.val_loglik == r2.val_loglik
        assert r1.best_epoch == r2.best_epoch

    def test_recovers_three_clusters_with_overtruncated_model(self):
        _, batch, _ = three_cluster_data(seed=3, count=6000)
        units = self._units(batch.data)
        _, val, _ = three_cluster_data(seed=30, count=1000)
        model, report = fit(units, [val], FitConfig(k=20, epochs=20, seed=0, batch_vectors=2000))
        weights = model.component_weights()
        keep = effective_components(model, 1e-3)
        top = sorted(weights[keep], reverse=True)
        assert sum(top[:3]) >= 0.95
        assert report.best_epoch == int(np.argmax(report.val_loglik))

    def test_best_epoch_snapshot_is_returned(self):
        _, batch, _ = three_cluster_data(count=1500)
        units = self._units(batch.data)
        model, report = fit(units, units[:1], FitConfig(k=5, epochs=4, seed=1, batch_vectors=700))
        best_ll = max(report.val_loglik)
        assert mixture_log_likelihood(units[0], model) == pytest.approx(best_ll, rel=1e-12)

    def test_variances_respect_floor_every_epoch(self):
        _, batch, _ = three_cluster_data(count=1200)
        config = FitConfig(k=8, epochs=5, seed=4, batch_vectors=400)
        model, _ = fit(self._units(batch.data), [batch], config)
        assert np.all(model.vars >= config.var_floor)

    def test_empty_training_set_rejected(self):
        with pytest.raises(ValueError):
            fit([], [], FitConfig(k=2, epochs=1))

    def test_dimension_mismatch_between_shards_rejected(self):
        a = EmbeddingBatch(np.zeros((5, 3)))
        b = EmbeddingBatch(np.zeros((5, 4)))
        with pytest.raises(ValueError):
            fit([a, b], [a], FitConfig(k=2, epochs=1))

    def test_missing_validation_rejected_when_training(self):
        a = EmbeddingBatch(np.random.default_rng(0).normal(size=(50, 3)))
        with pytest.raises(ValueError, match="validation"):
            fit([a], [], FitConfig(k=2, epochs=1, batch_vectors=50))

    def test_full_batch_mode_is_monotone(self):
        _, batch, _ = three_cluster_data(seed=7, count=3000)
        config = FitConfig(k=10, epochs=12, seed=0, full_batch_mode=True)
        _, report = fit([batch], [batch], config)
        diffs = np.diff(report.val_loglik)
        assert np.all(diffs >= -1e-8)
