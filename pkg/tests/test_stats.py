import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats as sps
from statsmodels.stats.multicomp import pairwise_tukeyhsd

from carotidseg.stats import (bland_altman, pearson, studentized_range_cdf,
                              studentized_range_sf, tukey_hsd)

X = [1, 2, 3, 4, 5]
Y = [1, 3, 2, 5, 4]


class TestPearson:
    def test_hand_fixture(self):
        # centred x and y both have sum of squares 10 and cross product 8
        r, p = pearson(X, Y)
        assert r == pytest.approx(0.8, abs=1e-12)
        assert p == pytest.approx(sps.pearsonr(X, Y).pvalue, abs=1e-10)

    def test_perfect_lines(self):
        assert pearson(X, [2 * x + 1 for x in X]) == (pytest.approx(1.0), 0.0)
        assert pearson(X, [-x for x in X])[0] == pytest.approx(-1.0)

    @given(st.floats(0.1, 10), st.floats(-5, 5))
    def test_affine_invariance(self, a, b):
        r0 = pearson(X, Y)[0]
        assert pearson([a * x + b for x in X], Y)[0] == pytest.approx(r0, abs=1e-9)

    def test_degenerate(self):
        with pytest.raises(ValueError):
            pearson([1, 1, 1], [1, 2, 3])
        with pytest.raises(ValueError):
            pearson([1, 2], [1, 2])


class TestBlandAltman:
    def test_hand_fixture(self):
        ba = bland_altman([2, 3, 4], [1, 3, 3])
        assert ba.bias == pytest.approx(0.6667, abs=1e-4)
        assert ba.sd == pytest.approx(0.5774, abs=1e-4)
        assert ba.loa_low == pytest.approx(-0.465, abs=1e-3)
        assert ba.loa_high == pytest.approx(1.798, abs=1e-3)

    def test_swapping_mirrors(self, rng):
        a, b = rng.random(10), rng.random(10)
        fwd, back = bland_altman(a, b), bland_altman(b, a)
        assert back.bias == pytest.approx(-fwd.bias)
        assert back.sd == pytest.approx(fwd.sd)
        assert back.loa_low == pytest.approx(-fwd.loa_high)

    def test_length_mismatch(self):
        with pytest.raises(ValueError):
            bland_altman([1, 2, 3], [1, 2])


class TestStudentizedRange:
    @pytest.mark.parametrize("q,k,df", [(0.5, 2, 5), (3.0, 3, 12), (4.2, 5, 30), (2.0, 9, 200)])
    def test_against_scipy(self, q, k, df):
        assert studentized_range_cdf(q, k, df) == pytest.approx(
            sps.studentized_range.cdf(q, k, df), abs=1e-8)

    def test_tails(self):
        assert studentized_range_cdf(0.0, 3, 10) == 0.0
        assert studentized_range_sf(50.0, 3, 10) < 1e-6


GROUPS = {
    "a": [0.91, 0.93, 0.90, 0.92, 0.94],
    "b": [0.89, 0.90, 0.88, 0.91, 0.87, 0.90],
    "c": [0.93, 0.95, 0.94, 0.96],
}


class TestTukey:
    def test_against_statsmodels(self):
        values = np.concatenate([GROUPS[g] for g in GROUPS])
        labels = np.concatenate([[g] * len(GROUPS[g]) for g in GROUPS])
        ref = pairwise_tukeyhsd(values, labels)
        ours = tukey_hsd(GROUPS)
        for (g1, g2), diff, p in zip(ref._multicomp.pairindices if False else
                                     [(ref.groupsunique[i], ref.groupsunique[j])
                                      for i, j in zip(*np.triu_indices(3, 1))],
                                     ref.meandiffs, ref.pvalues):
            row = ours.pair(g1, g2)
            assert row.mean_diff == pytest.approx(diff, abs=1e-9)
            assert row.p_value == pytest.approx(p, abs=1e-3)

    def test_against_scipy(self):
        ref = sps.tukey_hsd(*GROUPS.values())
        ours = tukey_hsd(GROUPS)
        names = list(GROUPS)
        for i in range(3):
            for j in range(i + 1, 3):
                assert ours.pair(names[i], names[j]).p_value == pytest.approx(ref.pvalue[i, j], abs=1e-3)

    def test_identical_groups(self):
        res = tukey_hsd({"a": [1.0, 2.0, 3.0], "b": [1.0, 2.0, 3.0]})
        assert res.rows[0].p_value == pytest.approx(1.0, abs=1e-9)

    def test_separated_constant_groups(self):
        res = tukey_hsd({"a": [0.5, 0.5, 0.5], "b": [0.9, 0.9, 0.9]})
        assert res.rows[0].p_value < 0.001

    def test_pair_symmetry(self):
        res = tukey_hsd(GROUPS)
        ab, ba = res.pair("a", "b"), res.pair("b", "a")
        assert ab.p_value == ba.p_value and ab.mean_diff == -ba.mean_diff

    @given(st.floats(0.0, 0.2))
    @settings(max_examples=20, deadline=None)
    def test_p_decreases_with_separation(self, shift):
        base = [0.1, 0.2, 0.3, 0.25]
        p_small = tukey_hsd({"a": base, "b": [v + shift for v in base]}).rows[0].p_value
        p_big = tukey_hsd({"a": base, "b": [v + shift + 0.05 for v in base]}).rows[0].p_value
        assert p_big <= p_small + 1e-12

    def test_needs_two_groups(self):
        with pytest.raises(ValueError):
            tukey_hsd({"a": [1, 2]})
