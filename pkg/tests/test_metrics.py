import numpy as np
import pytest

from ostta_lab.mathcore import ContractError
from ostta_lab.metrics import (
    EpisodeRecord,
    MetricsReport,
    accuracy,
    auroc,
    compute_report,
    fpr95,
    h_score,
    mean_report,
    oscr,
    record_from_table,
    record_to_table,
)

from oracles import auroc_pairwise, fpr95_scan, oscr_scan


def make_record(scores, is_ood, true_class=None, predicted=None):
    scores = np.asarray(scores, dtype=float)
    is_ood = np.asarray(is_ood, dtype=bool)
    n = len(scores)
    if true_class is None:
        true_class = np.where(is_ood, -1, 0)
    if predicted is None:
        predicted = np.zeros(n, dtype=int)
    return EpisodeRecord(scores, is_ood, np.asarray(true_class), np.asarray(predicted))


def random_record(rng, max_n=100):
    while True:
        n = int(rng.integers(4, max_n + 1))
        is_ood = rng.random(n) < rng.uniform(0.2, 0.8)
        if is_ood.any() and not is_ood.all():
            break
    # duplicate-heavy scores exercise the tie handling
    scores = np.round(rng.standard_normal(n) * 2, 1)
    true_class = np.where(is_ood, -1, rng.integers(0, 4, n))
    predicted = rng.integers(0, 4, n)
    return make_record(scores, is_ood, true_class, predicted)


class TestAccuracy:
    def test_all_correct(self):
        r = make_record([1, 2, 3], [False, False, True],
                        true_class=[1, 0, -1], predicted=[1, 0, 2])
        assert accuracy(r) == 1.0

    def test_none_correct(self):
        r = make_record([1, 2], [False, False], true_class=[1, 0], predicted=[0, 1])
        assert accuracy(r) == 0.0

    def test_three_of_four(self):
        r = make_record([1, 2, 3, 4], [False] * 4,
                        true_class=[0, 1, 2, 3], predicted=[0, 1, 2, 0])
        assert accuracy(r) == 0.75

    def test_excludes_ood(self):
        r = make_record([1, 2, 3], [False, True, True],
                        true_class=[0, -1, -1], predicted=[0, 3, 3])
        assert accuracy(r) == 1.0

    def test_no_csid_rejected(self):
        r = make_record([1.0, 2.0], [True, True], [-1, -1])
        with pytest.raises(ContractError):
            accuracy(r)


class TestAuroc:
    def test_perfect_separation(self):
        r = make_record([1, 2, 10, 11], [False, False, True, True])
        assert auroc(r) == 1.0

    def test_all_equal_is_half(self):
        r = make_record([5, 5, 5, 5], [False, False, True, True])
        assert auroc(r) == 0.5

    def test_interleaved(self):
        # pairs: (2>1), (2<3), (4>1), (4>3) -> 3/4
        r = make_record([1, 3, 2, 4], [False, False, True, True])
        assert auroc(r) == 0.75

    def test_matches_pairwise_oracle_exactly(self):
        rng = np.random.default_rng(7)
        for _ in range(100):
            r = random_record(rng)
            assert auroc(r) == auroc_pairwise(r)

    def test_invariant_under_monotone_transform(self):
        rng = np.random.default_rng(8)
        for _ in range(30):
            r = random_record(rng)
            base = auroc(r)
            r2 = make_record(np.exp(r.ood_score / 2), r.is_ood, r.true_class, r.predicted_class)
            assert auroc(r2) == pytest.approx(base, abs=1e-12)

    def test_swap_and_negate_symmetry(self):
        rng = np.random.default_rng(9)
        for _ in range(30):
            r = random_record(rng)
            flipped = make_record(
                -r.ood_score, ~r.is_ood,
                np.where(~r.is_ood, -1, 0), r.predicted_class,
            )
            assert auroc(flipped) == pytest.approx(auroc(r), abs=1e-12)

    def test_single_domain_rejected(self):
        with pytest.raises(ContractError):
            auroc(make_record([1, 2], [False, False]))


class TestFpr95:
    def test_perfect_separation(self):
        id_scores = np.linspace(0, 1, 40)
        ood_scores = np.linspace(5, 6, 40)
        r = make_record(np.concatenate([id_scores, ood_scores]),
                        [False] * 40 + [True] * 40)
        assert fpr95(r) == 0.0

    def test_identical_scores(self):
        r = make_record([3.0] * 8, [False] * 4 + [True] * 4)
        assert fpr95(r) == 1.0

    def test_worked_example(self):
        # 20 id scores 1..20, 20 ood scores 11..30; t=19 admits 19/20,
        # ood <= 19 is 9/20
        scores = np.concatenate([np.arange(1, 21), np.arange(11, 31)]).astype(float)
        r = make_record(scores, [False] * 20 + [True] * 20)
        assert fpr95(r) == pytest.approx(9 / 20)

    def test_matches_scan_oracle_exactly(self):
        rng = np.random.default_rng(10)
        for _ in range(100):
            r = random_record(rng)
            assert fpr95(r) == fpr95_scan(r)

    def test_invariant_under_monotone_transform(self):
        rng = np.random.default_rng(11)
        for _ in range(30):
            r = random_record(rng)
            r2 = make_record(np.tanh(r.ood_score), r.is_ood, r.true_class, r.predicted_class)
            assert fpr95(r2) == pytest.approx(fpr95(r), abs=1e-12)


class TestOscr:
    def test_perfect(self):
        r = make_record([0, 0, 5, 5], [False, False, True, True],
                        true_class=[1, 2, -1, -1], predicted=[1, 2, 0, 0])
        assert oscr(r) == 1.0

    def test_all_misclassified(self):
        r = make_record([0, 0, 5], [False, False, True],
                        true_class=[1, 2, -1], predicted=[2, 1, 0])
        assert oscr(r) == 0.0

    def test_small_hand_instance_matches_oracle(self):
        # 3 csID (2 correct) and 2 csOOD with hand-set scores
        r = make_record([0.1, 0.5, 0.9, 0.4, 0.8],
                        [False, False, False, True, True],
                        true_class=[0, 1, 2, -1, -1],
                        predicted=[0, 1, 0, 3, 3])
        assert oscr(r) == oscr_scan(r)
        # hand-run: curve passes (0, 1/3), (1/2, 1/3), (1/2, 2/3), (1, 2/3)
        assert oscr(r) == pytest.approx(0.5, abs=1e-12)

    def test_matches_scan_oracle_exactly(self):
        rng = np.random.default_rng(12)
        for _ in range(100):
            r = random_record(rng)
            assert oscr(r) == oscr_scan(r)

    def test_oscr_never_exceeds_accuracy(self):
        rng = np.random.default_rng(13)
        for _ in range(50):
            r = random_record(rng)
            assert oscr(r) <= accuracy(r) + 1e-12

    def test_invariant_under_monotone_transform(self):
        rng = np.random.default_rng(14)
        for _ in range(30):
            r = random_record(rng)
            r2 = make_record(r.ood_score ** 3 + r.ood_score, r.is_ood,
                             r.true_class, r.predicted_class)
            assert oscr(r2) == pytest.approx(oscr(r), abs=1e-12)


class TestHScore:
    def test_equal_inputs(self):
        assert h_score(0.7, 0.7) == pytest.approx(0.7)

    def test_zero_short_circuits(self):
        assert h_score(0.0, 0.9) == 0.0
        assert h_score(0.9, 0.0) == 0.0

    def test_closed_form(self):
        assert h_score(0.60, 0.80) == pytest.approx(0.6857142857142857)

    def test_out_of_range_rejected(self):
        with pytest.raises(ContractError):
            h_score(1.2, 0.5)


class TestReports:
    def test_compute_report_full(self):
        rng = np.random.default_rng(15)
        r = random_record(rng)
        rep = compute_report(r, detector_acc=0.8)
        for name in MetricsReport.FIELDS:
            assert getattr(rep, name) is not None
            assert 0.0 <= getattr(rep, name) <= 1.0

    def test_compute_report_without_ood(self):
        r = make_record([1.0, 2.0], [False, False], [0, 1], [0, 1])
        rep = compute_report(r)
        assert rep.acc == 1.0
        assert rep.auroc is None and rep.oscr is None and rep.h_score is None

    def test_mean_report_skips_none(self):
        a = MetricsReport(acc=0.8, auroc=0.6)
        b = MetricsReport(acc=0.6)
        m = mean_report([a, b])
        assert m.acc == pytest.approx(0.7)
        assert m.auroc == pytest.approx(0.6)
        assert m.oscr is None


class TestSerialization:
    def test_roundtrip(self):
        rng = np.random.default_rng(16)
        r = random_record(rng)
        text = record_to_table(r)
        back = record_from_table(text)
        np.testing.assert_array_equal(back.ood_score, r.ood_score)
        np.testing.assert_array_equal(back.is_ood, r.is_ood)
        np.testing.assert_array_equal(back.true_class, r.true_class)
        np.testing.assert_array_equal(back.predicted_class, r.predicted_class)

    def test_header_and_domains(self):
        r = make_record([1.5, 2.5], [False, True], [3, -1], [3, 0])
        lines = record_to_table(r).strip().split("\n")
        assert lines[0] == "score,domain,true_class,predicted_class"
        assert lines[1].endswith("csID,3,3")
        assert lines[2].endswith("csOOD,,0")

    def test_ood_with_class_rejected(self):
        with pytest.raises(ContractError):
            make_record([1.0, 2.0], [False, True], [0, 2], [0, 0])
