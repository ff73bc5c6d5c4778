"""Training-set expansion: shape-based interpolation reslicing and geometric augmentation."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .volume_io import LabelPair, RoiBox, Volume


@dataclass(frozen=True)
class AugmentPolicy:
    p_hflip: float = 0.5
    p_vflip: float = 0.5
    max_translate_frac: float = 0.2
    max_rotate_deg: float = 20.0
    seed: int = 0
    symmetric_translate: bool = False

    def __post_init__(self):
        for name in ("p_hflip", "p_vflip", "max_translate_frac"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1]")
        if self.max_rotate_deg < 0:
            raise ValueError("max_rotate_deg must be >= 0")

    @classmethod
    def identity(cls) -> "AugmentPolicy":
        return cls(0.0, 0.0, 0.0, 0.0)


def signed_distance(mask: np.ndarray) -> np.ndarray:
    """Euclidean signed distance map, positive inside the mask.

    Boundary pixels sit at +/-0.5 so that thresholding at zero reproduces the
    input mask exactly.
    """
    mask = np.asarray(mask, dtype=bool)
    if not mask.any():
        return -np.full(mask.shape, float(np.hypot(*mask.shape)))
    if mask.all():
        return np.full(mask.shape, float(np.hypot(*mask.shape)))
    inside = ndimage.distance_transform_edt(mask)
    outside = ndimage.distance_transform_edt(~mask)
    return np.where(mask, inside - 0.5, -(outside - 0.5))


def interpolate_masks(a: np.ndarray, b: np.ndarray, t: float) -> np.ndarray:
    """Shape-based interpolation between two binary masks at fraction t."""
    return (1.0 - t) * signed_distance(a) + t * signed_distance(b) > 0


def shape_interp_reslice(volume: Volume, labels: list[LabelPair], target_spacing: float = 0.1
                         ) -> tuple[Volume, list[LabelPair]]:
    """Reslice a labelled volume at `target_spacing` along the slice axis.

    Masks are interpolated through signed distance maps, images linearly. The
    labelled extent (first to last labelled slice) is resliced; every slice
    inside it must be labelled. Original slices reappear unchanged wherever
    the spacing ratio is an integer.
    """
    if len(labels) < 2:
        raise ValueError("need at least 2 labelled slices")
    if target_spacing <= 0 or target_spacing > volume.slice_spacing:
        raise ValueError("target_spacing must lie in (0, slice_spacing]")
    by_index = {lp.slice_index: lp for lp in labels}
    first, last = min(by_index), max(by_index)
    missing = [i for i in range(first, last + 1) if i not in by_index]
    if missing:
        raise ValueError(f"unlabelled intermediate slices: {missing}")

    ratio = volume.slice_spacing / target_spacing
    n_out = int(np.floor((last - first) * ratio + 1e-9)) + 1
    positions = first + np.arange(n_out) / ratio
    # snap positions that coincide with original slices to exact integers
    snapped = np.rint(positions)
    positions = np.where(np.abs(positions - snapped) < 1e-9, snapped, positions)

    sdf_cache: dict[tuple[int, str], np.ndarray] = {}

    def sdf(i: int, which: str) -> np.ndarray:
        key = (i, which)
        if key not in sdf_cache:
            sdf_cache[key] = signed_distance(getattr(by_index[i], f"{which}_mask"))
        return sdf_cache[key]

    voxels = np.empty((n_out,) + volume.slice_shape)
    out_labels = []
    for k, pos in enumerate(positions):
        lo = int(np.floor(pos))
        t = pos - lo
        if t == 0.0:
            voxels[k] = volume.voxels[lo]
            src = by_index[lo]
            out_labels.append(LabelPair(src.mab_mask.copy(), src.lib_mask.copy(), k))
            continue
        hi = lo + 1
        voxels[k] = (1 - t) * volume.voxels[lo] + t * volume.voxels[hi]
        mab = (1 - t) * sdf(lo, "mab") + t * sdf(hi, "mab") > 0
        lib = (1 - t) * sdf(lo, "lib") + t * sdf(hi, "lib") > 0
        out_labels.append(LabelPair(mab, lib & mab, k))

    def rescale(box: RoiBox | None) -> RoiBox | None:
        if box is None:
            return None
        return RoiBox(box.top_left, box.bottom_right,
                      int(round((box.slice_index - first) * ratio)))

    out = Volume(voxels, volume.in_plane_spacing, target_spacing,
                 slice_axis_label=volume.slice_axis_label,
                 roi_first=rescale(volume.roi_first), roi_last=rescale(volume.roi_last),
                 subject_id=volume.subject_id)
    return out, out_labels


def _shift(a: np.ndarray, dr: int, dc: int) -> np.ndarray:
    """Integer translation with zero fill."""
    out = np.zeros_like(a)
    rows, cols = a.shape
    if abs(dr) >= rows or abs(dc) >= cols:
        return out
    src_r = slice(max(-dr, 0), rows - max(dr, 0))
    dst_r = slice(max(dr, 0), rows - max(-dr, 0))
    src_c = slice(max(-dc, 0), cols - max(dc, 0))
    dst_c = slice(max(dc, 0), cols - max(-dc, 0))
    out[dst_r, dst_c] = a[src_r, src_c]
    return out


def augment_sample(image: np.ndarray, labels: LabelPair, policy: AugmentPolicy,
                   draw: np.random.Generator) -> tuple[np.ndarray, LabelPair]:
    """Random flip, translation and rotation applied identically to image and masks.

    Five numbers are drawn from `draw` on every call regardless of policy,
    so the stream position does not depend on the policy.
    """
    image = np.asarray(image, dtype=np.float64)
    if image.shape != labels.mab_mask.shape:
        raise ValueError("image and masks must share dimensions")
    u = draw.random(5)
    rows, cols = image.shape
    mab, lib = labels.mab_mask, labels.lib_mask

    if u[0] < policy.p_hflip:
        image, mab, lib = image[:, ::-1], mab[:, ::-1], lib[:, ::-1]
    if u[1] < policy.p_vflip:
        image, mab, lib = image[::-1, :], mab[::-1, :], lib[::-1, :]

    max_r = int(np.floor(policy.max_translate_frac * rows))
    max_c = int(np.floor(policy.max_translate_frac * cols))
    if policy.symmetric_translate:
        dr = int(np.floor(u[2] * (2 * max_r + 1))) - max_r
        dc = int(np.floor(u[3] * (2 * max_c + 1))) - max_c
    else:
        dr = int(np.floor(u[2] * (max_r + 1)))
        dc = int(np.floor(u[3] * (max_c + 1)))
    if dr or dc:
        image, mab, lib = _shift(image, dr, dc), _shift(mab, dr, dc), _shift(lib, dr, dc)

    angle = (2.0 * u[4] - 1.0) * policy.max_rotate_deg
    if angle != 0.0:
        image = ndimage.rotate(image, angle, reshape=False, order=1, mode="constant", cval=0.0)
        mab = ndimage.rotate(mab.astype(np.uint8), angle, reshape=False, order=0,
                             mode="constant", cval=0).astype(bool)
        lib = ndimage.rotate(lib.astype(np.uint8), angle, reshape=False, order=0,
                             mode="constant", cval=0).astype(bool)

    return (np.ascontiguousarray(image),
            LabelPair(np.ascontiguousarray(mab), np.ascontiguousarray(lib), labels.slice_index))
