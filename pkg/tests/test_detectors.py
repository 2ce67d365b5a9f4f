import numpy as np
import pytest

from ostta_lab.detectors import (
    Gmm2,
    PartitionerSpec,
    best_threshold,
    detector_accuracy,
    fit_gmm2,
    kmeans2,
    partition,
    score,
)
from ostta_lab.losses import PartitionedBatch
from ostta_lab.mathcore import ContractError, DegenerateInputError
from ostta_lab.model import ForwardOutput

from oracles import best_threshold_scan


def make_fo(logits, features=None):
    logits = np.atleast_2d(np.asarray(logits, dtype=float))
    if features is None:
        features = np.abs(logits)
    return ForwardOutput(
        features=np.atleast_2d(np.asarray(features, dtype=float)),
        logits=logits,
        batch_mean=np.zeros(logits.shape[1]),
        batch_var=np.ones(logits.shape[1]),
    )


class TestScores:
    def test_entropy_of_uniform_logits(self):
        fo = make_fo(np.zeros((3, 4)))
        np.testing.assert_allclose(score(fo, "entropy"), np.log(4.0), atol=1e-12)

    def test_energy_of_zero_logits(self):
        fo = make_fo(np.zeros((2, 2)))
        np.testing.assert_allclose(score(fo, "energy"), -np.log(2.0), atol=1e-12)

    def test_l1norm_of_zero_features(self):
        fo = make_fo(np.ones((2, 3)), features=np.zeros((2, 5)))
        np.testing.assert_array_equal(score(fo, "l1norm"), 0.0)

    def test_nan_score_is_negated_norm_ratio(self):
        feats = np.array([[3.0, 4.0, 0.0]])
        fo = make_fo(np.ones((1, 2)), features=feats)
        expected = -(7.0 / 5.0)
        assert score(fo, "nan")[0] == pytest.approx(expected, rel=1e-9)

    def test_confidence_scaling_decreases_entropy_and_energy(self, rng):
        # classifier-like logits: the winning logit is positive
        logits = rng.standard_normal((20, 4))
        logits[np.arange(20), logits.argmax(axis=1)] += 2.0
        lo = make_fo(logits)
        hi = make_fo(logits * 3.0)
        assert np.all(score(hi, "entropy") <= score(lo, "entropy") + 1e-12)
        assert np.all(score(hi, "energy") <= score(lo, "energy") + 1e-12)

    def test_unknown_kind(self):
        with pytest.raises(ContractError):
            score(make_fo(np.zeros((1, 2))), "mahalanobis")


class TestKmeans2:
    def test_two_spikes(self):
        centers, assign = kmeans2(np.array([0.0, 0.0, 10.0, 10.0]))
        np.testing.assert_allclose(centers, [0.0, 10.0])
        np.testing.assert_array_equal(assign, [0, 0, 1, 1])

    def test_hand_run_lloyd(self):
        # init (0, 10); boundary 5 -> {0,1} vs {9,10} -> centers (0.5, 9.5); stable
        centers, assign = kmeans2(np.array([0.0, 1.0, 9.0, 10.0]))
        np.testing.assert_allclose(centers, [0.5, 9.5])
        np.testing.assert_array_equal(assign, [0, 0, 1, 1])

    def test_fixed_point_property(self, rng):
        for _ in range(20):
            x = np.concatenate([rng.normal(-2, 1, 30), rng.normal(5, 1, 20)])
            centers, assign = kmeans2(x)
            dist = np.abs(x[:, None] - centers[None, :])
            np.testing.assert_array_equal(assign, dist.argmin(axis=1))

    def test_all_identical_rejected(self):
        with pytest.raises(DegenerateInputError):
            kmeans2(np.full(10, 3.0))


class TestFitGmm2:
    def test_recovers_bimodal_fixture(self):
        rng = np.random.default_rng(0)
        scores = np.concatenate([
            -10.0 + 0.1 * rng.standard_normal(50),
            10.0 + 0.1 * rng.standard_normal(50),
        ])
        gmm = fit_gmm2(scores)
        assert abs(gmm.means[0] - (-10.0)) < 0.2
        assert abs(gmm.means[1] - 10.0) < 0.2
        assert abs(gmm.weights[0] - 0.5) < 0.05
        assert abs(gmm.weights[1] - 0.5) < 0.05

    def test_responsibilities_sum_to_one(self, rng):
        scores = np.concatenate([rng.normal(-1, 1, 40), rng.normal(3, 0.5, 60)])
        gmm = fit_gmm2(scores)
        r = gmm.responsibilities(scores)
        np.testing.assert_allclose(r.sum(axis=1), 1.0, atol=1e-9)

    def test_log_likelihood_monotone(self, rng):
        for seed in range(10):
            r = np.random.default_rng(seed)
            scores = np.concatenate([r.normal(0, 1, 50), r.normal(4, 2, 50)])
            _, history = fit_gmm2(scores, return_history=True)
            diffs = np.diff(history)
            assert np.all(diffs >= -1e-9), f"seed {seed}: {diffs.min()}"

    def test_too_few_samples(self):
        with pytest.raises(ContractError):
            fit_gmm2(np.array([1.0, 2.0, 3.0]))

    def test_all_identical_rejected(self):
        with pytest.raises(DegenerateInputError):
            fit_gmm2(np.full(10, 1.5))

    def test_variance_floor(self):
        scores = np.array([0.0] * 50 + [10.0] * 50)
        gmm = fit_gmm2(scores)
        assert np.all(gmm.variances >= 1e-6)


class TestBestThreshold:
    def test_perfectly_separable(self, rng):
        scores = np.concatenate([rng.uniform(0, 1, 20), rng.uniform(2, 3, 20)])
        flags = np.concatenate([np.zeros(20, bool), np.ones(20, bool)])
        t, acc = best_threshold(scores, flags)
        assert acc == 1.0
        assert 1.0 <= t <= 2.0

    def test_identical_scores_give_max_prior(self):
        scores = np.full(10, 2.0)
        flags = np.array([True] * 7 + [False] * 3)
        _, acc = best_threshold(scores, flags)
        assert acc == pytest.approx(0.7)

    def test_simple_scan(self):
        scores = np.array([1.0, 2.0, 3.0, 4.0])
        flags = np.array([False, False, True, True])
        t, acc = best_threshold(scores, flags)
        assert 2.0 < t < 3.0
        assert acc == 1.0

    def test_matches_bruteforce_scan(self, rng):
        for _ in range(50):
            n = int(rng.integers(4, 60))
            scores = np.round(rng.standard_normal(n), 2)
            flags = rng.random(n) < 0.5
            if flags.all() or not flags.any():
                continue
            t_fast, acc_fast = best_threshold(scores, flags)
            t_slow, acc_slow = best_threshold_scan(scores, flags)
            assert acc_fast == acc_slow
            assert t_fast == t_slow

    def test_single_domain_rejected(self):
        with pytest.raises(ContractError):
            best_threshold(np.arange(4.0), np.zeros(4, bool))


class TestPartition:
    def test_fixed_threshold_boundary_is_csid(self):
        # entropy exactly log K sits csID; strictly above goes csOOD
        logits = np.vstack([np.zeros(4), np.zeros(4)])
        fo = make_fo(logits)
        spec = PartitionerSpec("fixed_threshold", score_kind="entropy", threshold=np.log(4.0))
        part = partition(fo, spec)
        assert len(part.csood_indices) == 0
        assert len(part.csid_indices) == 2

    def test_infinite_thresholds(self):
        fo = make_fo(np.random.default_rng(0).standard_normal((10, 4)))
        hi = PartitionerSpec("fixed_threshold", score_kind="energy", threshold=1e300)
        lo = PartitionerSpec("fixed_threshold", score_kind="energy", threshold=-1e300)
        assert len(partition(fo, hi).csood_indices) == 0
        assert len(partition(fo, lo).csid_indices) == 0

    def test_threshold_monotonicity(self, rng):
        fo = make_fo(rng.standard_normal((50, 4)))
        s = score(fo, "entropy")
        prev_ood = None
        for t in np.quantile(s, [0.1, 0.3, 0.5, 0.7, 0.9]):
            part = partition(fo, PartitionerSpec("fixed_threshold", "entropy", float(t)))
            ood = set(part.csood_indices.tolist())
            if prev_ood is not None:
                assert ood.issubset(prev_ood)
            prev_ood = ood

    def test_gmm_energy_on_bimodal(self, rng):
        # strongly bimodal logit scale -> partition equals the sign split
        n = 60
        confident = rng.standard_normal((n, 4)) + np.array([8.0, 0, 0, 0])
        flat = 0.01 * rng.standard_normal((n, 4))
        fo = make_fo(np.vstack([confident, flat]))
        part = partition(fo, PartitionerSpec("gmm_energy"))
        assert set(part.csood_indices.tolist()) == set(range(n, 2 * n))

    def test_kmeans_partition_picks_higher_center(self, rng):
        n = 40
        confident = rng.standard_normal((n, 4)) + np.array([9.0, 0, 0, 0])
        flat = 0.01 * rng.standard_normal((n, 4))
        fo = make_fo(np.vstack([confident, flat]))
        for tag in ("kmeans_entropy", "kmeans_energy"):
            part = partition(fo, PartitionerSpec(tag))
            assert set(part.csood_indices.tolist()) == set(range(n, 2 * n))

    def test_pseudo_labels_are_argmax(self, rng):
        fo = make_fo(rng.standard_normal((20, 4)))
        part = partition(fo, PartitionerSpec("fixed_threshold", "entropy", 1e9))
        np.testing.assert_array_equal(part.pseudo_labels, fo.logits.argmax(axis=1))

    def test_oracle_requires_flags(self, rng):
        fo = make_fo(rng.standard_normal((10, 4)))
        spec = PartitionerSpec("oracle_best_threshold", score_kind="energy")
        with pytest.raises(ContractError):
            partition(fo, spec)
        flags = np.array([False, True] * 5)
        part = partition(fo, spec, true_is_ood=flags)
        assert part.batch_size == 10

    def test_spec_validation(self):
        with pytest.raises(ContractError):
            PartitionerSpec("fixed_threshold", score_kind="entropy")  # no threshold
        with pytest.raises(ContractError):
            PartitionerSpec("fixed_threshold", score_kind="bogus", threshold=0.0)
        with pytest.raises(ContractError):
            PartitionerSpec("unknown_tag")


class TestDetectorAccuracy:
    def make_part(self, pred_ood):
        pred_ood = np.asarray(pred_ood, dtype=bool)
        csood = np.flatnonzero(pred_ood)
        csid = np.flatnonzero(~pred_ood)
        return PartitionedBatch(csid, np.zeros(len(csid), dtype=int), csood)

    def test_perfect(self):
        flags = np.array([True, False, True, False])
        assert detector_accuracy(self.make_part(flags), flags) == 1.0

    def test_inverted(self):
        flags = np.array([True, False, True, False])
        assert detector_accuracy(self.make_part(~flags), flags) == 0.0

    def test_half_right(self):
        flags = np.array([True, True, False, False])
        pred = np.array([True, False, True, False])
        assert detector_accuracy(self.make_part(pred), flags) == 0.5

    def test_length_mismatch(self):
        flags = np.array([True, False])
        with pytest.raises(ContractError):
            detector_accuracy(self.make_part([True, False, False]), flags)


class TestOracleDominance:
    def test_best_threshold_dominates_fixed(self, rng, pretrained_model):
        from ostta_lab.model import forward
        from ostta_lab.stream import StreamConfig, sample_batch

        cfg = StreamConfig()
        batch = sample_batch(cfg, 0)
        fo = forward(pretrained_model.clone(), batch.inputs, "batch")
        s = score(fo, "entropy")
        _, best_acc = best_threshold(s, batch.is_ood)
        for t in np.quantile(s, np.linspace(0.05, 0.95, 19)):
            spec = PartitionerSpec("fixed_threshold", "entropy", float(t))
            acc = detector_accuracy(partition(fo, spec), batch.is_ood)
            assert best_acc >= acc - 1e-12
