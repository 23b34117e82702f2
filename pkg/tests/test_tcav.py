import math

import numpy as np
import pytest

from concept_probe.errors import CavTrainingError, ParameterError
from concept_probe.model import LayerSpec, ModelGraph, forward
from concept_probe.tcav import (
    Cav,
    TcavStats,
    build_counterexample_pool,
    directional_derivative,
    filter_concepts,
    t_test_against_half,
    tcav_ensemble,
    tcav_score,
    tcav_score_from_gradients,
    train_cav,
)


def student_t_tail_by_quadrature(t_abs: float, df: int, n_steps: int = 200_001) -> float:
    """Independent oracle: two-sided p by Simpson integration of the t
    density over [0, |t|]."""
    if t_abs == 0:
        return 1.0
    const = math.gamma((df + 1) / 2) / (math.sqrt(df * math.pi) * math.gamma(df / 2))
    xs = np.linspace(0.0, t_abs, n_steps)
    pdf = const * (1 + xs**2 / df) ** (-(df + 1) / 2)
    h = xs[1] - xs[0]
    integral = (h / 3) * (pdf[0] + pdf[-1] + 4 * pdf[1:-1:2].sum() + 2 * pdf[2:-2:2].sum())
    return float(2 * (0.5 - integral))


class TestTrainCav:
    def test_separable_clouds_perfect_accuracy(self):
        rng = np.random.default_rng(0)
        sigma = 0.5
        pos = rng.normal(0, sigma, size=(60, 12))
        neg = rng.normal(0, sigma, size=(60, 12))
        pos[:, 0] += 10 * sigma
        # oracle: confirm a separating hyperplane exists via random scan
        merged = np.concatenate([pos, neg])
        y = np.concatenate([np.ones(60), np.zeros(60)])
        separable = False
        for _ in range(1000):
            w = rng.normal(size=12)
            z = merged @ w
            threshold = z[y == 1].min()
            if threshold > z[y == 0].max() or z[y == 1].max() < z[y == 0].min():
                separable = True
                break
        assert separable
        cav = train_cav(pos, neg, seed=1)
        assert cav.validation_accuracy == 1.0

    def test_indistinguishable_classes_near_chance(self):
        # two draws from the same distribution: nothing to separate
        rng = np.random.default_rng(1)
        pos = rng.normal(size=(100, 8))
        neg = rng.normal(size=(100, 8))
        cav = train_cav(pos, neg, seed=2)
        assert abs(cav.validation_accuracy - 0.5) <= 0.15

    def test_literally_identical_sets_not_separable(self):
        # the same array on both sides cannot validate above chance; the
        # holdout anti-correlates with the training noise, so accuracy may
        # fall below 0.5, never meaningfully above it
        rng = np.random.default_rng(1)
        points = rng.normal(size=(100, 8))
        cav = train_cav(points, points.copy(), seed=2)
        assert cav.validation_accuracy <= 0.65

    def test_one_dimensional_symmetric(self):
        pos = np.full((20, 1), 1.0)
        neg = np.full((20, 1), -1.0)
        cav = train_cav(pos, neg, seed=3)
        np.testing.assert_allclose(cav.weight, [1.0], atol=1e-12)
        assert abs(cav.bias) < 1e-6

    def test_unit_norm_always(self):
        rng = np.random.default_rng(2)
        for seed in range(5):
            pos = rng.normal(size=(30, 6)) + rng.normal(size=6)
            neg = rng.normal(size=(25, 6))
            cav = train_cav(pos, neg, seed=seed)
            assert abs(np.linalg.norm(cav.weight) - 1.0) < 1e-6

    def test_degenerate_identical_points(self):
        points = np.ones((10, 4))
        with pytest.raises(CavTrainingError):
            train_cav(points, points.copy(), seed=0)

    def test_orientation_positive_side_is_concept(self):
        rng = np.random.default_rng(3)
        pos = rng.normal(size=(50, 5)) + np.array([4, 0, 0, 0, 0])
        neg = rng.normal(size=(50, 5))
        cav = train_cav(pos, neg, seed=4)
        assert (pos @ cav.weight + cav.bias > 0).mean() > 0.9


class TestCounterPool:
    def _embeddings(self):
        rng = np.random.default_rng(4)
        return {
            0: rng.normal(0, 1, size=(40, 6)),
            1: rng.normal(5, 1, size=(40, 6)),
            2: rng.normal(-5, 1, size=(40, 6)),
        }

    def test_excludes_target_class(self):
        emb = self._embeddings()
        pool, replaced = build_counterexample_pool(emb, 0, 50, seed=0)
        assert not replaced
        assert len(pool) == 50
        target_rows = {tuple(row) for row in emb[0]}
        assert all(tuple(row) not in target_rows for row in pool)

    def test_same_seed_same_pool(self):
        emb = self._embeddings()
        a, _ = build_counterexample_pool(emb, 1, 30, seed=5)
        b, _ = build_counterexample_pool(emb, 1, 30, seed=5)
        np.testing.assert_array_equal(a, b)

    def test_replacement_warns(self):
        emb = self._embeddings()
        pool, replaced = build_counterexample_pool(emb, 2, 200, seed=6)
        assert replaced
        assert len(pool) == 200

    def test_no_other_classes(self):
        with pytest.raises(ParameterError):
            build_counterexample_pool({0: np.zeros((5, 3))}, 0, 5, seed=0)


def linear_capture_model():
    """flatten -> dense: the gradient at 'flat' equals the weight column,
    independent of the image."""
    rng = np.random.default_rng(5)
    w = rng.normal(size=(4, 2)).astype(np.float32)
    return (
        ModelGraph(
            layers=[
                LayerSpec(name="flat", kind="flatten"),
                LayerSpec(name="head", kind="dense", weight=w, bias=np.zeros(2, np.float32)),
            ],
            input_shape=(2, 2, 1),
            norm_mean=np.zeros(1),
            norm_std=np.ones(1),
            class_names=["a", "b"],
        ),
        w,
    )


class TestDirectionalDerivative:
    def test_orthogonal_cav_zero(self):
        model, w = linear_capture_model()
        grad = w.astype(np.float64)[:, 0]
        ortho = np.zeros(4)
        ortho[0], ortho[1] = grad[1], -grad[0]
        ortho /= np.linalg.norm(ortho)
        cav = Cav(weight=ortho, bias=0.0, validation_accuracy=1.0, counterexample_seed=0)
        s = directional_derivative(model, np.random.default_rng(0).random((2, 2, 1)), "flat", 0, cav)
        assert abs(s) < 1e-9

    def test_linear_model_image_independent(self):
        model, w = linear_capture_model()
        rng = np.random.default_rng(6)
        v = rng.normal(size=4)
        cav = Cav(weight=v / np.linalg.norm(v), bias=0.0, validation_accuracy=1.0, counterexample_seed=0)
        values = {
            directional_derivative(model, rng.random((2, 2, 1)), "flat", 1, cav) for _ in range(5)
        }
        assert len(values) == 1
        expected = float(w.astype(np.float64)[:, 1] @ cav.weight)
        assert abs(values.pop() - expected) < 1e-12


class TestTcavScore:
    def test_all_positive(self):
        grads = np.ones((10, 3))
        cav = Cav(weight=np.array([1.0, 0, 0]), bias=0.0, validation_accuracy=1.0, counterexample_seed=0)
        assert tcav_score_from_gradients(grads, cav) == 1.0

    def test_matches_exhaustive_enumeration(self):
        """<= 16 instances: the score must equal an explicit per-instance
        count, exactly."""
        model, _ = linear_capture_model()
        rng = np.random.default_rng(7)
        images = [rng.random((2, 2, 1)) for _ in range(16)]
        v = rng.normal(size=4)
        cav = Cav(weight=v / np.linalg.norm(v), bias=0.0, validation_accuracy=1.0, counterexample_seed=0)
        score = tcav_score(model, images, "flat", 0, cav)
        count = sum(
            1 for img in images if directional_derivative(model, img, "flat", 0, cav) > 0
        )
        assert score == count / 16

    def test_negation_antisymmetry(self):
        rng = np.random.default_rng(8)
        grads = rng.normal(size=(20, 5))
        v = rng.normal(size=5)
        v /= np.linalg.norm(v)
        cav = Cav(weight=v, bias=0.0, validation_accuracy=1.0, counterexample_seed=0)
        flipped = Cav(weight=-v, bias=0.0, validation_accuracy=1.0, counterexample_seed=0)
        s = grads @ v
        assert not (s == 0).any()  # almost surely; guards the identity below
        assert tcav_score_from_gradients(grads, flipped) == pytest.approx(
            1.0 - tcav_score_from_gradients(grads, cav), abs=1e-12
        )

    def test_empty_instances(self):
        cav = Cav(weight=np.ones(2) / np.sqrt(2), bias=0.0, validation_accuracy=1.0, counterexample_seed=0)
        with pytest.raises(ParameterError):
            tcav_score_from_gradients(np.zeros((0, 2)), cav)


class TestTTest:
    def test_all_half_no_evidence(self):
        assert t_test_against_half(np.full(20, 0.5)) == 1.0

    def test_constant_off_half_certain(self):
        # 0.75 is dyadic: the mean is exact, the sd is exactly zero
        assert t_test_against_half(np.full(20, 0.75)) == 0.0
        # 0.9 accumulates rounding (sd ~1e-16), but the verdict is as extreme
        assert t_test_against_half(np.full(20, 0.9)) < 1e-10

    def test_matches_quadrature_oracle(self):
        rng = np.random.default_rng(9)
        for _ in range(5):
            scores = np.clip(rng.normal(0.55, 0.1, size=20), 0, 1)
            p = t_test_against_half(scores)
            t = (scores.mean() - 0.5) / (scores.std(ddof=1) / math.sqrt(20))
            oracle = student_t_tail_by_quadrature(abs(t), df=19)
            assert abs(p - oracle) < 1e-6

    def test_needs_two_scores(self):
        with pytest.raises(ParameterError):
            t_test_against_half(np.array([0.5]))


class TestEnsembleAndFilter:
    def _setup(self):
        rng = np.random.default_rng(10)
        emb = {
            0: rng.normal(0, 1, size=(80, 6)).astype(np.float32),
            1: rng.normal(3, 1, size=(80, 6)).astype(np.float32),
            2: rng.normal(-3, 1, size=(80, 6)).astype(np.float32),
        }
        grads = rng.normal(size=(30, 6))
        return emb, grads

    def test_ensemble_shape_and_stats(self):
        emb, grads = self._setup()
        concept = emb[1][:40] + 1.0
        cavs, stats, warnings = tcav_ensemble(concept, emb, grads, 0, n_cavs=20, seed=3)
        assert len(cavs) == 20
        assert len(stats.per_cav_scores) == 20
        assert abs(stats.mean_score - np.nanmean(stats.per_cav_scores)) < 1e-9
        assert 0.0 <= stats.mean_score <= 1.0
        assert all(0.0 <= s <= 1.0 for s in stats.per_cav_scores if s == s)

    def test_untestable_when_cavs_fail(self):
        # identical concept and counter points make every CAV degenerate
        emb = {0: np.ones((20, 4), dtype=np.float32), 1: np.ones((20, 4), dtype=np.float32)}
        grads = np.random.default_rng(0).normal(size=(10, 4))
        cavs, stats, warnings = tcav_ensemble(np.ones((15, 4)), emb, grads, 0, n_cavs=4, seed=0)
        assert stats is None
        assert any("untestable" in w for w in warnings)

    def test_n_cavs_minimum(self):
        emb, grads = self._setup()
        with pytest.raises(ParameterError):
            tcav_ensemble(emb[1][:10], emb, grads, 0, n_cavs=1, seed=0)

    def test_filter_boundary(self):
        class Stub:
            def __init__(self, p):
                self.tcav = TcavStats([0.9], 0.9, p, p < 0.01) if p is not None else None

        kept, dropped = filter_concepts([Stub(0.005), Stub(0.01), Stub(0.5), Stub(None)], alpha=0.01)
        assert len(kept) == 1 and kept[0].tcav.p_value == 0.005
        assert len(dropped) == 3  # exact threshold and untestable both go
