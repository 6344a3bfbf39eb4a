import numpy as np
import pytest

from hades import conditioning as cond
from hades.errors import UsageError


class TestQuadrantClassify:
    def test_first_quadrant(self):
        assert cond.quadrant_classify([1.0, 2.0]) == 1.0

    def test_mixed_quadrants(self):
        assert cond.quadrant_classify([-0.5, 3.0]) == 0.0
        assert cond.quadrant_classify([2.0, -1.0]) == 0.0

    def test_third_quadrant(self):
        assert cond.quadrant_classify([-1.0, -1.0]) == -1.0

    def test_axis_points(self):
        assert cond.quadrant_classify([0.0, 1.0]) == 0.0
        assert cond.quadrant_classify([0.0, 0.0]) == 0.0

    def test_scale_invariance(self):
        rng = np.random.default_rng(0)
        for _ in range(50):
            g = rng.normal(size=2)
            for scale in (0.01, 1.0, 250.0):
                assert cond.quadrant_classify(g * scale) == cond.quadrant_classify(g)

    def test_dimension_check(self):
        with pytest.raises(UsageError):
            cond.quadrant_classify([1.0, 2.0, 3.0])


class TestFitnessTargets:
    def test_fisher_zero_spread_returns_mean(self):
        t = cond.fisher_target([5.0, 5.0], np.random.default_rng(0))
        assert t == 5.0

    def test_fisher_never_below_mean(self):
        rng = np.random.default_rng(1)
        fits = [0.0, 4.0, 10.0]
        mu = np.mean(fits)
        assert all(cond.fisher_target(fits, rng) >= mu for _ in range(200))

    def test_fisher_half_normal_mean(self):
        rng = np.random.default_rng(2)
        draws = np.array([cond.fisher_target([0.0, 10.0], rng)
                          for _ in range(10_000)])
        expected = 5.0 + 5.0 * np.sqrt(2.0 / np.pi)  # mean + sigma*sqrt(2/pi)
        assert abs(draws.mean() - expected) <= 0.02 * expected

    def test_greedy_zero_spread_returns_max(self):
        assert cond.greedy_target([7.0, 7.0], np.random.default_rng(0)) == 7.0

    def test_greedy_centered_on_max(self):
        rng = np.random.default_rng(3)
        draws = np.array([cond.greedy_target([0.0, 10.0], rng)
                          for _ in range(10_000)])
        assert abs(draws.mean() - 10.0) <= 0.2
        assert abs(draws.std() - 5.0) <= 0.2

    def test_needs_two_values(self):
        with pytest.raises(UsageError):
            cond.fisher_target([1.0], np.random.default_rng(0))


class TestKnnDiversity:
    def test_hand_enumerated_line(self):
        pts = np.array([[0.0], [1.0], [3.0]])
        d = cond.knn_diversity(pts, k=1)
        # point 0: neighbor distances {1,3}; drop the 1-NN, mean of {3}
        assert np.isclose(d[0], np.log(3.0))
        # point 1: distances {1,2} -> {2}; point 3: distances {2,3} -> {3}
        assert np.isclose(d[1], np.log(2.0))
        assert np.isclose(d[2], np.log(3.0))

    def test_identical_points_hit_floor(self):
        pts = np.ones((5, 2))
        d = cond.knn_diversity(pts, k=2, dist_floor=1e-8)
        assert np.allclose(d, np.log(1e-8))

    def test_translation_invariance(self):
        rng = np.random.default_rng(4)
        pts = rng.normal(size=(20, 3))
        shift = np.array([5.0, -2.0, 100.0])
        assert np.allclose(cond.knn_diversity(pts, 4),
                           cond.knn_diversity(pts + shift, 4))

    def test_permutation_equivariance(self):
        rng = np.random.default_rng(5)
        pts = rng.normal(size=(15, 2))
        perm = rng.permutation(15)
        assert np.allclose(cond.knn_diversity(pts, 3)[perm],
                           cond.knn_diversity(pts[perm], 3))

    def test_k_bounds(self):
        with pytest.raises(UsageError):
            cond.knn_diversity(np.zeros((3, 2)), k=3)
        with pytest.raises(UsageError):
            cond.knn_diversity(np.zeros((3, 2)), k=0)


class TestNoveltyTarget:
    def test_equal_fitness_uniform(self):
        rng = np.random.default_rng(6)
        deltas = np.array([0.1, 0.5, 0.9])
        fits = np.ones(3)
        p = cond.novelty_probs(fits, deltas, beta=10.0, pad=1e-8)
        assert np.allclose(p, 1.0 / 3.0)
        draws = [cond.novelty_target(fits, deltas, 10.0, 1e-8, rng)
                 for _ in range(3000)]
        _, counts = np.unique(draws, return_counts=True)
        assert counts.min() > 800

    def test_two_point_hand_formula(self):
        # fits (0, 1) -> f_tilde (1, 0); equal deltas give equal denominators
        fits = np.array([0.0, 1.0])
        deltas = np.array([2.0, 2.0])
        pad = 1e-8
        denom = 2.0 + abs(2.0 + pad)
        p = cond.novelty_probs(fits, deltas, beta=10.0, pad=pad)
        expected_second = 1.0 / (1.0 + np.exp(-10.0 / denom))
        assert np.isclose(p[1], expected_second)

    def test_beta_zero_uniform(self):
        p = cond.novelty_probs([0.0, 1.0, 2.0], [0.0, 1.0, 2.0], beta=0.0, pad=1e-8)
        assert np.allclose(p, 1.0 / 3.0)

    def test_probs_sum_to_one_and_monotone_in_delta(self):
        rng = np.random.default_rng(7)
        for _ in range(20):
            deltas = np.sort(rng.normal(size=8))
            fits = np.full(8, 3.0)  # equal f_tilde
            p = cond.novelty_probs(fits, deltas, beta=5.0, pad=1e-8)
            assert np.isclose(p.sum(), 1.0)
            assert np.all(np.diff(p) >= -1e-12)

    def test_favors_high_fitness_and_high_delta(self):
        # energy f_tilde/(delta+delta_0): the best-fitness point has energy 0
        p = cond.novelty_probs([5.0, 1.0], [0.1, 0.9], beta=10.0, pad=1e-8)
        assert p[0] > p[1]
        # at equal fitness the higher-delta point is strictly more probable
        p2 = cond.novelty_probs([1.0, 5.0], [0.1, 0.9], beta=10.0, pad=1e-8)
        assert p2[1] > p2[0]


class TestPhenotypeCondition:
    def test_stationary_cart(self):
        from hades.cartpole import EpisodeSummary
        s = EpisodeSummary(steps=500, x_resting=0.5, xdot_resting=0.0)
        triple = cond.phenotype_condition([s])
        assert np.allclose(triple, [0.5, 0.0, 500.0])

    def test_episode_average(self):
        from hades.cartpole import EpisodeSummary
        summaries = [EpisodeSummary(400, 0.2, 0.1), EpisodeSummary(500, 0.6, -0.1)]
        triple = cond.phenotype_condition(summaries)
        assert np.allclose(triple, [0.4, 0.0, 450.0])


class TestSchedule:
    def test_segment_lookup(self):
        sched = cond.ConditionSchedule(((1, 8, [1.0]), (9, 16, [-1.0])))
        assert cond.schedule_target(sched, 5)[0] == 1.0
        assert cond.schedule_target(sched, 9)[0] == -1.0

    def test_single_full_range_segment(self):
        sched = cond.ConditionSchedule(((1, 100, [1.0]),))
        assert all(cond.schedule_target(sched, g)[0] == 1.0 for g in (1, 50, 100))

    def test_uncovered_generation(self):
        sched = cond.ConditionSchedule(((1, 8, [1.0]),))
        with pytest.raises(UsageError):
            cond.schedule_target(sched, 9)

    def test_overlap_rejected(self):
        with pytest.raises(UsageError):
            cond.ConditionSchedule(((1, 8, [1.0]), (8, 16, [-1.0])))

    def test_covers(self):
        sched = cond.ConditionSchedule(((1, 8, [1.0]), (9, 16, [-1.0])))
        assert sched.covers(1, 16)
        assert not sched.covers(1, 17)


class TestSchemes:
    def test_quadrant_scheme_assign_and_target(self):
        scheme = cond.QuadrantScheme(target=1.0)
        g = np.array([[1.0, 1.0], [-2.0, -3.0], [1.0, -1.0]])
        c = scheme.assign(g, np.zeros(3), {})
        assert np.allclose(c[:, 0], [1.0, -1.0, 0.0])
        assert scheme.target(np.zeros(3), c, 4, np.random.default_rng(0))[0] == 1.0

    def test_quadrant_scheme_schedule(self):
        sched = cond.ConditionSchedule(((1, 2, [1.0]), (3, 4, [-1.0])))
        scheme = cond.QuadrantScheme(schedule=sched)
        assert scheme.target(None, None, 2, None)[0] == 1.0
        assert scheme.target(None, None, 3, None)[0] == -1.0

    def test_fitness_scheme(self):
        scheme = cond.FitnessScheme("greedy")
        fits = np.array([1.0, 5.0])
        c = scheme.assign(np.zeros((2, 2)), fits, {})
        assert np.allclose(c[:, 0], fits)
        assert scheme.kind == "fitness_greedy"

    def test_novelty_scheme_refresh(self):
        scheme = cond.NoveltyScheme(k=2)
        g = np.random.default_rng(8).normal(size=(10, 2))
        block = np.zeros((10, 1))
        scheme.refresh_columns(g, np.zeros(10), block)
        assert np.allclose(block[:, 0], cond.knn_diversity(g, 2, scheme.pad))

    def test_composite_concatenation(self):
        scheme = cond.CompositeScheme([cond.NoveltyScheme(k=2),
                                       cond.FitnessScheme("fisher")])
        assert scheme.cond_dim == 2
        assert scheme.needs_refresh
        fits = np.array([0.0, 1.0, 4.0])
        c = scheme.assign(np.zeros((3, 2)), fits, {})
        assert c.shape == (3, 2)
        assert np.allclose(c[:, 1], fits)
        target = scheme.target(fits, c, 1, np.random.default_rng(9))
        assert target.shape == (2,)
