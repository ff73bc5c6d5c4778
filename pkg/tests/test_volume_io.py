import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays
from PIL import Image

from carotidseg.metrics import dsc
from carotidseg.volume_io import (FormatError, LabelPair, RoiBox, Volume, crop_to_input,
                                  interpolate_roi, load_labels, load_volume, make_split,
                                  normalize_intensity, reslice_to_input, save_labels,
                                  save_volume)

from conftest import disk


def write_slices(path, slices, meta=None):
    path.mkdir(parents=True, exist_ok=True)
    for i, s in enumerate(slices):
        Image.fromarray(np.asarray(s, dtype=np.uint8)).save(path / f"slice_{i:04d}.png")
    meta = {"in_plane_spacing_mm": [0.1, 0.1], "slice_spacing_mm": 1.0} if meta is None else meta
    if meta is not False:
        (path / "volume.json").write_text(json.dumps(meta))


class TestLoadVolume:
    def test_all_black_volume(self, tmp_path):
        write_slices(tmp_path, [np.zeros((20, 30))] * 40)
        vol = load_volume(tmp_path)
        assert vol.n_slices == 40
        assert vol.voxels.min() == vol.voxels.max() == 0

    def test_extreme_values_scale_to_unit_interval(self, tmp_path):
        s = np.zeros((8, 8))
        s[:4] = 255
        write_slices(tmp_path, [s, s])
        vol = load_volume(tmp_path)
        assert set(np.unique(vol.voxels)) == {0.0, 1.0}

    def test_slice_spacing_passthrough(self, tmp_path):
        write_slices(tmp_path, [np.full((4, 4), 10)] * 3,
                     {"in_plane_spacing_mm": [0.2, 0.3], "slice_spacing_mm": 1.0})
        vol = load_volume(tmp_path)
        assert vol.slice_spacing == 1.0
        assert vol.in_plane_spacing == (0.2, 0.3)
        assert vol.n_slices == 3

    def test_missing_sidecar(self, tmp_path):
        write_slices(tmp_path, [np.zeros((4, 4))], meta=False)
        with pytest.raises(FormatError, match="sidecar"):
            load_volume(tmp_path)

    def test_inconsistent_dimensions(self, tmp_path):
        write_slices(tmp_path, [np.zeros((4, 4)), np.zeros((5, 4))])
        with pytest.raises(FormatError, match="inconsistent"):
            load_volume(tmp_path)

    def test_roi_roundtrip(self, tmp_path):
        vol = Volume(np.random.default_rng(0).random((3, 40, 50)), (0.1, 0.1), 1.0,
                     roi_first=RoiBox((5, 6), (20, 30), 0), roi_last=RoiBox((8, 9), (25, 35), 2))
        save_volume(vol, tmp_path)
        back = load_volume(tmp_path)
        assert back.roi_first == vol.roi_first and back.roi_last == vol.roi_last
        np.testing.assert_allclose(back.voxels, normalize_intensity(np.rint(vol.voxels * 255)),
                                   atol=1e-12)


class TestLabels:
    def test_roundtrip(self, tmp_path):
        mab = disk((30, 30), (15, 15), 10)
        lib = disk((30, 30), (15, 15), 6)
        save_labels([LabelPair(mab, lib, 3)], tmp_path)
        (lp,) = load_labels(tmp_path)
        assert lp.slice_index == 3
        assert np.array_equal(lp.mab_mask, mab) and np.array_equal(lp.lib_mask, lib)

    def test_non_nested_rejected_on_load(self, tmp_path):
        mab = disk((30, 30), (15, 15), 6)
        lib = disk((30, 30), (15, 15), 10)
        save_labels([LabelPair(mab, lib, 0)], tmp_path)
        with pytest.raises(FormatError, match="not contained"):
            load_labels(tmp_path)

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            LabelPair(np.zeros((3, 3)), np.zeros((3, 4)), 0)


class TestNormalize:
    @given(arrays(np.float64, (3, 5, 4), elements=st.floats(-1e3, 1e3, allow_nan=False)))
    @settings(max_examples=50, deadline=None)
    def test_idempotent(self, v):
        once = normalize_intensity(v)
        np.testing.assert_allclose(normalize_intensity(once), once, atol=1e-12)
        assert once.min() >= 0 and once.max() <= 1

    def test_constant_maps_to_zero(self):
        assert not normalize_intensity(np.full((2, 3, 3), 7.0)).any()


class TestReslice:
    def test_identity_at_input_size(self, rng):
        img = rng.random((256, 320))
        out, _ = reslice_to_input(img)
        assert np.array_equal(out, img)

    def test_constant_preserved(self):
        out, _ = reslice_to_input(np.full((512, 640), 0.5))
        assert out.shape == (256, 320)
        np.testing.assert_allclose(out, 0.5, atol=1e-12)

    def test_disk_round_trip(self):
        # oracle: rasterised disk, forward (nearest) then inverse mapping
        mask = disk((128, 160), (60, 85), 25)
        fwd, inv = reslice_to_input(mask, order=0)
        assert fwd.shape == (256, 320)
        back = inv.to_original(fwd)
        assert back.shape == mask.shape
        assert dsc(back, mask) >= 0.98

    def test_bilinear_disk_round_trip(self):
        mask = disk((128, 160), (64, 80), 12)
        fwd, inv = reslice_to_input(mask.astype(float), order=1)
        assert dsc(inv.to_original(fwd >= 0.5), mask) >= 0.98

    @pytest.mark.parametrize("shape", [(1, 10), (10, 1), (0, 5)])
    def test_degenerate_input(self, shape):
        with pytest.raises(ValueError):
            reslice_to_input(np.zeros(shape))

    def test_crop_maps_back_into_frame(self):
        mask = disk((128, 160), (60, 70), 15)
        box = RoiBox((30, 40), (95, 105), 0)
        fwd, inv = crop_to_input(mask, box, order=0)
        back = inv.to_original(fwd)
        assert back.shape == mask.shape
        assert dsc(back, mask) >= 0.98


class TestRoiInterpolation:
    def test_constant_geometry(self):
        a = RoiBox((40, 40), (60, 70), 0)
        b = RoiBox((40, 40), (60, 70), 4)
        boxes = interpolate_roi(a, b, range(5), shape=(200, 200))
        assert len(boxes) == 5
        assert all(bx.top_left == (20, 20) and bx.bottom_right == (80, 90) for bx in boxes)

    def test_midpoint_after_expansion(self):
        # expanded + clamped endpoints: (0,0)-(70,70) and (10,10)-(90,90)
        a = RoiBox((10, 10), (50, 50), 0)
        b = RoiBox((30, 30), (70, 70), 10)
        boxes = interpolate_roi(a, b, range(11), shape=(200, 200))
        assert boxes[0].top_left == (0, 0) and boxes[0].bottom_right == (70, 70)
        assert boxes[10].top_left == (10, 10) and boxes[10].bottom_right == (90, 90)
        assert boxes[5].top_left == (5, 5) and boxes[5].bottom_right == (80, 80)

    def test_unclamped_midpoint(self):
        a = RoiBox((10, 10), (50, 50), 0)
        b = RoiBox((30, 30), (70, 70), 10)
        mid = interpolate_roi(a, b, [5])[0]
        assert mid.top_left == (0, 0) and mid.bottom_right == (80, 80)

    def test_border_clamp(self):
        a = RoiBox((5, 3), (40, 40), 0)
        b = RoiBox((5, 3), (40, 40), 2)
        box = interpolate_roi(a, b, [1], shape=(50, 50))[0]
        assert box.top_left == (0, 0)
        assert box.bottom_right == (50, 50)

    def test_ties_round_toward_larger_box(self):
        a = RoiBox((20, 20), (40, 40), 0)
        b = RoiBox((21, 21), (41, 41), 2)
        box = interpolate_roi(a, b, [1], expansion=0)[0]
        assert box.top_left == (20, 20) and box.bottom_right == (41, 41)

    def test_same_slice_rejected(self):
        a = RoiBox((0, 0), (5, 5), 3)
        with pytest.raises(ValueError):
            interpolate_roi(a, a, [3])

    @given(st.integers(0, 60), st.integers(0, 60), st.integers(5, 40), st.integers(5, 40),
           st.integers(0, 60), st.integers(0, 60), st.integers(1, 30))
    @settings(max_examples=60, deadline=None)
    def test_endpoints_return_expanded_boxes(self, r0, c0, h, w, r1, c1, span):
        shape = (128, 160)
        a = RoiBox((r0, c0), (r0 + h, c0 + w), 0)
        b = RoiBox((r1, c1), (r1 + h, c1 + w), span)
        boxes = interpolate_roi(a, b, range(span + 1), shape=shape)
        assert boxes[0] == a.expand(20, shape)
        assert boxes[-1] == b.expand(20, shape)


class TestSplit:
    def test_sizes(self):
        s = make_split([f"s{i}" for i in range(10)], seed=3)
        assert (len(s.train_ids), len(s.val_ids), len(s.test_ids)) == (6, 2, 2)

    def test_deterministic(self):
        ids = [f"s{i}" for i in range(17)]
        assert make_split(ids, 5) == make_split(ids, 5)

    def test_disjoint_and_complete(self):
        ids = [f"s{i}" for i in range(23)]
        s = make_split(ids, 1)
        parts = [set(s.train_ids), set(s.val_ids), set(s.test_ids)]
        assert set().union(*parts) == set(ids)
        assert sum(len(p) for p in parts) == len(ids)

    def test_subject_volumes_share_partition(self):
        volumes = [("s0", "L"), ("s0", "R")] + [(f"s{i}", "L") for i in range(1, 8)]
        s = make_split([v[0] for v in volumes], seed=0)
        assert len({s.partition_of(sub) for sub, _ in volumes if sub == "s0"}) == 1

    def test_too_few_subjects(self):
        with pytest.raises(ValueError):
            make_split(["a", "b", "c", "d"])
