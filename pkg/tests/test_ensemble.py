import numpy as np
import pytest

from ensemble import (
    PredictionSet,
    WeightVector,
    average_probability,
    compute_weights,
    fuse,
    majority_vote,
    unique_misclassifications,
    weighted_average,
)
from errors import ArityError, ContractError, ShapeError


def stack(*rows):
    """모델별 [샘플, 2] 확률을 [모델, 샘플, 2]로 쌓기"""
    return np.array([np.atleast_2d(r) for r in rows], dtype=np.float64)


def random_probs(rng, models, samples):
    p1 = rng.uniform(0, 1, size=(models, samples))
    # 투표 동률과 확률 동률도 가끔 나오도록 일부를 격자값으로
    p1[rng.uniform(size=p1.shape) < 0.2] = 0.5
    return np.stack([1 - p1, p1], axis=-1)


def brute_force(probs, truth):
    models, samples, _ = probs.shape
    labels = [[1 if probs[m, s, 1] >= probs[m, s, 0] else 0 for s in range(samples)] for m in range(models)]
    average, majority, unique = [], [], [0] * models
    for s in range(samples):
        mean = [sum(probs[m, s, c] for m in range(models)) / models for c in range(2)]
        avg_label = 1 if mean[1] >= mean[0] else 0
        average.append(avg_label)
        ones = sum(labels[m][s] for m in range(models))
        zeros = models - ones
        majority.append(1 if ones > zeros else 0 if zeros > ones else avg_label)
        for m in range(models):
            others_right = all(labels[o][s] == truth[s] for o in range(models) if o != m)
            if labels[m][s] != truth[s] and others_right:
                unique[m] += 1
    return np.array(majority), np.array(average), np.array(unique), np.array(labels)


class TestMajorityVote:
    def test_votes(self):
        probs = stack([0.9, 0.1], [0.8, 0.2], [0.1, 0.9])
        assert majority_vote(np.array([[0], [0], [1]]), probs).tolist() == [0]
        assert majority_vote(np.array([[1], [1], [1]]), probs).tolist() == [1]

    def test_tie_falls_back_to_average(self):
        probs = stack([0.6, 0.4], [0.3, 0.7])
        assert average_probability(probs).probs[0].tolist() == pytest.approx([0.45, 0.55])
        assert majority_vote(np.array([[0], [1]]), probs).tolist() == [1]

    def test_needs_two_models(self):
        with pytest.raises(ArityError):
            majority_vote(np.array([[1, 0]]), stack([[0, 1], [1, 0]]))


class TestAverageProbability:
    def test_identical_models(self):
        fused = average_probability(stack([0.3, 0.7], [0.3, 0.7], [0.3, 0.7]))
        np.testing.assert_allclose(fused.probs[0], [0.3, 0.7])
        assert fused.labels.tolist() == [1]

    def test_exact_tie_picks_malignant(self):
        fused = average_probability(stack([1.0, 0.0], [0.0, 1.0]))
        np.testing.assert_array_equal(fused.probs[0], [0.5, 0.5])
        assert fused.labels.tolist() == [1]

    def test_three_models(self):
        fused = average_probability(stack([0.6, 0.4], [0.2, 0.8], [0.4, 0.6]))
        np.testing.assert_allclose(fused.probs[0], [0.4, 0.6])
        assert fused.labels.tolist() == [1]

    def test_permutation_invariant(self, rng):
        probs = random_probs(rng, 3, 30)
        a = average_probability(probs)
        b = average_probability(probs[[2, 0, 1]])
        np.testing.assert_array_equal(a.labels, b.labels)
        np.testing.assert_allclose(a.probs, b.probs, atol=1e-15)

    def test_single_model_rejected(self):
        with pytest.raises(ArityError):
            average_probability(stack([0.5, 0.5]))


class TestUniqueMisclassifications:
    def test_all_correct(self):
        truth = np.array([0, 1, 1, 0])
        assert unique_misclassifications(np.tile(truth, (3, 1)), truth).tolist() == [0, 0, 0]

    def test_single_model_errs(self):
        truth = np.array([0, 1, 1, 0, 1])
        preds = np.tile(truth, (3, 1))
        preds[0, [1, 3]] = 1 - preds[0, [1, 3]]
        assert unique_misclassifications(preds, truth).tolist() == [2, 0, 0]

    def test_shared_error_not_unique(self):
        truth = np.array([1, 1])
        preds = np.array([[0, 1], [0, 1], [1, 1]])
        assert unique_misclassifications(preds, truth).tolist() == [0, 0, 0]

    def test_two_model_reduction(self):
        truth = np.array([1, 0, 1])
        preds = np.array([[0, 0, 0], [1, 0, 0]])
        assert unique_misclassifications(preds, truth).tolist() == [1, 0]

    def test_requires_truth(self):
        with pytest.raises(ContractError):
            unique_misclassifications(np.zeros((3, 4), int), None)


class TestWeights:
    def test_uniform(self):
        np.testing.assert_allclose(compute_weights([0, 0, 0]).weights, [1 / 3, 1 / 3, 1 / 3])

    def test_pinned(self):
        np.testing.assert_allclose(compute_weights([3, 1, 1]).weights, [0.2, 0.4, 0.4], rtol=0, atol=1e-15)
        np.testing.assert_allclose(compute_weights([1, 1]).weights, [0.5, 0.5])

    def test_sum_to_one(self, rng):
        for _ in range(50):
            weights = compute_weights(rng.integers(0, 100, size=3)).weights
            assert weights.sum() == pytest.approx(1.0, abs=1e-12)
            assert np.all(weights > 0)

    def test_negative_counts(self):
        with pytest.raises(ContractError):
            compute_weights([1, -1, 0])


class TestWeightedAverage:
    def test_hand_arithmetic(self):
        fused = weighted_average(stack([1.0, 0.0], [0.0, 1.0], [0.0, 1.0]), np.array([0.2, 0.4, 0.4]))
        np.testing.assert_allclose(fused.probs[0], [0.2, 0.8])
        assert fused.labels.tolist() == [1]

    def test_equal_weights_match_average(self, rng):
        probs = random_probs(rng, 3, 40)
        weighted = weighted_average(probs, compute_weights([2, 2, 2]))
        average = average_probability(probs)
        np.testing.assert_allclose(weighted.probs, average.probs, atol=1e-15)
        np.testing.assert_array_equal(weighted.labels, average.labels)

    def test_dominant_weight(self, rng):
        probs = rng.uniform(0.01, 0.99, size=(3, 25))
        probs = np.stack([1 - probs, probs], axis=-1)
        delta = 1e-6
        fused = weighted_average(probs, np.array([1 - delta, delta / 2, delta / 2]))
        first = probs[0]
        far_from_tie = np.abs(first[:, 1] - 0.5) > 1e-3
        np.testing.assert_array_equal(fused.labels[far_from_tie], (first[:, 1] >= first[:, 0])[far_from_tie])

    def test_consistent_permutation(self, rng):
        probs = random_probs(rng, 3, 20)
        weights = np.array([0.2, 0.3, 0.5])
        order = [1, 2, 0]
        a = weighted_average(probs, weights)
        b = weighted_average(probs[order], weights[order])
        np.testing.assert_allclose(a.probs, b.probs, atol=1e-15)

    def test_weight_count_mismatch(self):
        with pytest.raises(ArityError):
            weighted_average(stack([0.5, 0.5], [0.5, 0.5]), np.array([1.0]))


class TestPredictionSet:
    def test_validation(self):
        with pytest.raises(ShapeError):
            PredictionSet(["a"], np.zeros((1, 2, 3)))
        with pytest.raises(ArityError):
            PredictionSet(["a", "b"], stack([0.5, 0.5]))
        with pytest.raises(ContractError):
            PredictionSet(["a"], stack([0.6, 0.6]))

    def test_fuse_dispatch(self):
        predictions = PredictionSet(["m1", "m2", "m3"], stack([0.9, 0.1], [0.2, 0.8], [0.3, 0.7]), truth=[1])
        assert fuse(predictions, "majority").labels.tolist() == [1]
        assert fuse(predictions, "average").labels.tolist() == [1]
        weighted = fuse(predictions, "weighted", WeightVector(np.array([0.8, 0.1, 0.1])))
        assert weighted.labels.tolist() == [0]
        with pytest.raises(ContractError):
            fuse(predictions, "weighted")
        with pytest.raises(ContractError):
            fuse(predictions, "median")


class TestOracle:
    def check(self, rng):
        probs = random_probs(rng, 3, 50)
        truth = rng.integers(0, 2, size=50)
        majority, average, unique, labels = brute_force(probs, truth)
        predictions = PredictionSet(["a", "b", "c"], probs, truth)
        np.testing.assert_array_equal(predictions.labels(), labels)
        np.testing.assert_array_equal(majority_vote(labels, probs), majority)
        np.testing.assert_array_equal(average_probability(probs).labels, average)
        np.testing.assert_array_equal(unique_misclassifications(labels, truth), unique)

        weights = compute_weights(unique).weights
        fused = weighted_average(probs, weights)
        for s in range(50):
            mean = [sum(weights[m] * probs[m, s, c] for m in range(3)) for c in range(2)]
            np.testing.assert_allclose(fused.probs[s], mean, atol=1e-15)
            if abs(mean[1] - mean[0]) > 1e-12:
                assert fused.labels[s] == (1 if mean[1] > mean[0] else 0)

    def test_random_instances(self):
        rng = np.random.default_rng(77)
        for _ in range(50):
            self.check(rng)

    @pytest.mark.slow
    def test_thousand_instances(self):
        rng = np.random.default_rng(78)
        for _ in range(1000):
            self.check(rng)
