import math

import numpy as np
import pytest

from carotidseg.metrics import Contour, circle_contour
from carotidseg.volume_io import LabelPair
from carotidseg.volumetry import volume_report, vwt_profile, vwv, wall_areas

from conftest import disk

SHAPE = (64, 64)


def annulus_stack(r_out=20, r_in=14, n=10, center=(31.5, 31.5)):
    return [LabelPair(disk(SHAPE, center, r_out), disk(SHAPE, center, r_in), i) for i in range(n)]


def test_annulus_volume():
    analytic = math.pi * (20**2 - 14**2) * 0.01 * 1.0 * 10
    assert analytic == pytest.approx(64.09, abs=0.01)
    assert vwv(annulus_stack(), (0.1, 0.1, 1.0)) == pytest.approx(analytic, rel=0.03)


def test_zero_wall():
    stack = [LabelPair(disk(SHAPE, (32, 32), 10), disk(SHAPE, (32, 32), 10), i) for i in range(4)]
    assert vwv(stack, (0.1, 0.1, 1.0)) == 0.0


def test_linear_in_slice_spacing():
    stack = annulus_stack()
    assert vwv(stack, (0.1, 0.1, 2.0)) == pytest.approx(2 * vwv(stack, (0.1, 0.1, 1.0)))


def test_rigid_motion_invariance():
    a = vwv(annulus_stack(), (0.1, 0.1, 1.0))
    shifted = annulus_stack(center=(25.5, 36.5))
    rotated = [LabelPair(np.rot90(lp.mab_mask), np.rot90(lp.lib_mask), lp.slice_index)
               for lp in annulus_stack()]
    assert vwv(shifted, (0.1, 0.1, 1.0)) == pytest.approx(a)
    assert vwv(rotated, (0.1, 0.1, 1.0)) == pytest.approx(a)


def test_volume_equals_pixel_count_sum(rng):
    stack = []
    for i in range(5):
        mab = disk(SHAPE, (32 + rng.integers(-3, 3), 32), 15 + i)
        stack.append(LabelPair(mab, mab & (rng.random(SHAPE) > 0.5), i))
    counts = sum(int(lp.mab_mask.sum()) - int(lp.lib_mask.sum()) for lp in stack)
    assert vwv(stack, (0.2, 0.3, 1.5)) == pytest.approx(counts * 0.2 * 0.3 * 1.5, rel=1e-12)


def test_non_nested_rejected():
    bad = LabelPair(disk(SHAPE, (32, 32), 10), disk(SHAPE, (32, 40), 6), 0)
    with pytest.raises(ValueError):
        wall_areas([bad], (1, 1, 1))


class TestThickness:
    def test_concentric_circles(self):
        np.testing.assert_allclose(vwt_profile(circle_contour(12), circle_contour(10)), 2.0, atol=0.05)

    def test_ellipse_around_circle(self):
        t = np.linspace(0, 2 * np.pi, 400, endpoint=False)
        ellipse = Contour(np.column_stack([12 * np.cos(t), 10 * np.sin(t)]))
        prof = vwt_profile(ellipse, circle_contour(8))
        assert prof.min() >= 2 - 0.05 and prof.max() <= 4 + 0.05

    def test_profile_non_negative(self):
        t = np.linspace(0, 2 * np.pi, 300, endpoint=False)
        outer = Contour(np.column_stack([14 * np.cos(t), 9 * np.sin(t) + np.sin(3 * t)]))
        assert np.all(vwt_profile(outer, circle_contour(5, center=(2, 1))) >= 0)

    def test_crossing_contours_rejected(self):
        with pytest.raises(ValueError):
            vwt_profile(circle_contour(10), circle_contour(8, center=(5, 0)))

    def test_report(self, tmp_path):
        stack = annulus_stack(n=3)
        rep = volume_report(stack, (0.1, 0.1, 1.0))
        assert rep.vwv == pytest.approx(vwv(stack, (0.1, 0.1, 1.0)))
        assert rep.vwt_mean == pytest.approx(0.6, abs=0.05)
        assert rep.vwt_slice_weighted_mean == pytest.approx(rep.vwt_mean, abs=1e-6)
        assert rep.save(tmp_path / "r.json").is_file()
