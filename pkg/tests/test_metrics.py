"""Metrics vs exhaustive and pair-counting oracles."""

import numpy as np
import pytest

from fuseclust import metrics as mt
from fuseclust.autodiff import ContractError

from oracles import acc_exhaustive_oracle, ari_pairs_oracle, nmi_oracle


def _random_case(rng, kmax=5, nmax=12):
    n = int(rng.integers(2, nmax + 1))
    ka = int(rng.integers(1, kmax + 1))
    kb = int(rng.integers(1, kmax + 1))
    return rng.integers(0, ka, size=n), rng.integers(0, kb, size=n)


class TestContingency:
    def test_counts(self):
        m, pl, tl = mt.contingency([0, 0, 1, 1], [0, 1, 0, 1])
        np.testing.assert_array_equal(m, [[1, 1], [1, 1]])
        np.testing.assert_array_equal(pl, [0, 1])
        np.testing.assert_array_equal(tl, [0, 1])

    def test_noncontiguous_labels(self):
        m, pl, tl = mt.contingency([5, 5, 9], [2, 2, 7])
        np.testing.assert_array_equal(m, [[2, 0], [0, 1]])
        np.testing.assert_array_equal(pl, [5, 9])
        np.testing.assert_array_equal(tl, [2, 7])

    def test_length_mismatch(self):
        with pytest.raises(ContractError, match="length mismatch"):
            mt.contingency([0, 1], [0, 1, 2])

    def test_empty(self):
        with pytest.raises(ContractError, match="empty"):
            mt.contingency([], [])

    def test_non_integer(self):
        with pytest.raises(ContractError, match="integers"):
            mt.contingency([0.5, 1.0], [0, 1])


class TestAcc:
    def test_perfect(self):
        assert mt.acc_hungarian([0, 1, 2], [0, 1, 2]) == 1.0

    def test_relabeled_perfect(self):
        assert mt.acc_hungarian([0, 0, 1, 1], [1, 1, 0, 0]) == 1.0

    def test_crossed_half(self):
        assert mt.acc_hungarian([0, 0, 1, 1], [0, 1, 0, 1]) == 0.5

    def test_rectangular_contingency(self):
        # three predicted clusters against two classes still one-to-one
        pred = [0, 0, 1, 1, 2, 2]
        true = [0, 0, 0, 0, 1, 1]
        assert mt.acc_hungarian(pred, true) == pytest.approx(4.0 / 6.0)

    def test_matches_exhaustive_permutations(self):
        rng = np.random.default_rng(0)
        for _ in range(200):
            pred, true = _random_case(rng)
            assert mt.acc_hungarian(pred, true) == acc_exhaustive_oracle(pred, true)


class TestNmi:
    def test_perfect(self):
        assert mt.nmi([0, 1, 0, 1], [1, 0, 1, 0]) == pytest.approx(1.0)

    def test_independent(self):
        assert mt.nmi([0, 0, 1, 1], [0, 1, 0, 1]) == 0.0

    def test_both_constant(self):
        assert mt.nmi([3, 3, 3], [7, 7, 7]) == 1.0

    def test_one_constant(self):
        assert mt.nmi([0, 0, 0], [0, 1, 2]) == 0.0
        assert mt.nmi([0, 1, 2], [0, 0, 0]) == 0.0

    def test_symmetry_and_oracle(self):
        rng = np.random.default_rng(1)
        for _ in range(100):
            pred, true = _random_case(rng)
            ab = mt.nmi(pred, true)
            assert abs(ab - mt.nmi(true, pred)) <= 1e-12
            assert abs(ab - nmi_oracle(pred, true)) <= 1e-12

    def test_range(self):
        rng = np.random.default_rng(2)
        for _ in range(50):
            pred, true = _random_case(rng)
            v = mt.nmi(pred, true)
            assert -1e-12 <= v <= 1.0 + 1e-12


class TestAri:
    def test_perfect(self):
        assert mt.ari([0, 1, 2, 0], [2, 0, 1, 2]) == 1.0

    def test_crossed_negative(self):
        assert mt.ari([0, 0, 1, 1], [0, 1, 0, 1]) == -0.5

    def test_degenerate_constant_partitions(self):
        value, flag = mt._ari_exact([0, 0, 0], [1, 1, 1])
        assert value == 1.0 and flag

    def test_matches_pair_counting(self):
        rng = np.random.default_rng(3)
        for _ in range(150):
            pred, true = _random_case(rng, kmax=5, nmax=30)
            assert abs(mt.ari(pred, true) - ari_pairs_oracle(pred, true)) <= 1e-12

    def test_symmetry(self):
        rng = np.random.default_rng(4)
        for _ in range(50):
            pred, true = _random_case(rng)
            assert abs(mt.ari(pred, true) - mt.ari(true, pred)) <= 1e-12


class TestRelabelInvariance:
    def test_all_metrics(self):
        rng = np.random.default_rng(5)
        for _ in range(30):
            pred, true = _random_case(rng)
            k = pred.max() + 1
            perm = rng.permutation(k)
            relabeled = perm[pred]
            assert mt.acc_hungarian(relabeled, true) == mt.acc_hungarian(pred, true)
            assert abs(mt.nmi(relabeled, true) - mt.nmi(pred, true)) <= 1e-12
            assert abs(mt.ari(relabeled, true) - mt.ari(pred, true)) <= 1e-12


class TestReport:
    def test_fields(self):
        rep = mt.compute_metrics([0, 0, 1, 1], [0, 1, 0, 1])
        assert rep.acc == 0.5
        assert rep.nmi == 0.0
        assert rep.ari == -0.5
        assert rep.n == 4 and rep.k_pred == 2 and rep.k_true == 2
        assert not rep.ari_degenerate
        np.testing.assert_array_equal(rep.contingency, [[1, 1], [1, 1]])

    def test_degenerate_flagged(self):
        rep = mt.compute_metrics([0, 0], [0, 0])
        assert rep.ari == 1.0 and rep.ari_degenerate
        assert "ari_degenerate=1" in rep.to_text()

    def test_text_key_value_lines(self):
        rep = mt.compute_metrics([0, 1, 2], [0, 1, 2])
        text = rep.to_text()
        assert "acc=1.000000" in text
        assert "nmi=1.000000" in text

    def test_contingency_csv(self):
        rep = mt.compute_metrics([0, 0, 1, 1], [0, 1, 0, 1])
        assert rep.contingency_csv() == "1,1\n1,1\n"

    def test_csv_roundtrip(self):
        rep = mt.compute_metrics([0, 0, 1, 1, 2], [0, 1, 0, 1, 2])
        rows = dict(line.split(",") for line in rep.to_csv().strip().splitlines()[1:])
        assert float(rows["acc"]) == rep.acc
        assert float(rows["nmi"]) == rep.nmi
        assert float(rows["ari"]) == rep.ari
        assert int(rows["n"]) == 5
