"""Vessel wall volume by slice-wise area summation and per-slice VWT profiles."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from skimage.measure import points_in_poly

from .metrics import Contour, ContourError, largest_contour, symmetric_correspondence
from .volume_io import LabelPair

log = logging.getLogger(__name__)


def _labels_of(result) -> list[LabelPair]:
    return list(getattr(result, "labels", result))


def wall_areas(result, spacing) -> list[float]:
    """Per-slice wall area in mm^2; raises if LIB escapes MAB anywhere."""
    pixel_area = float(spacing[0]) * float(spacing[1])
    areas = []
    for lp in _labels_of(result):
        if not lp.is_nested:
            raise ValueError(f"slice {lp.slice_index}: LIB not contained in MAB")
        areas.append((int(lp.mab_mask.sum()) - int(lp.lib_mask.sum())) * pixel_area)
    return areas


def vwv(result, spacing) -> float:
    """Sum of slice wall areas times slice spacing, in mm^3.

    `spacing` is (mm/px x, mm/px y, mm between slices).
    """
    return float(sum(wall_areas(result, spacing)) * float(spacing[2]))


def vwt_profile(mab: Contour, lib: Contour) -> np.ndarray:
    """Point-wise wall thickness (mm) between nested MAB and LIB contours."""
    if not np.all(points_in_poly(lib.points, mab.points)):
        raise ValueError("LIB contour is not nested inside the MAB contour")
    return symmetric_correspondence(mab, lib).distances


@dataclass
class VolumeReport:
    vwv: float
    per_slice_wall_area: list[float]
    slice_spacing: float
    slice_indices: list[int] = field(default_factory=list)
    vwt_profiles: dict[int, list[float]] = field(default_factory=dict)

    @property
    def vwt_mean(self) -> float:
        vals = [v for prof in self.vwt_profiles.values() for v in prof]
        return float(np.mean(vals)) if vals else float("nan")

    @property
    def vwt_slice_weighted_mean(self) -> float:
        """Mean of per-slice mean thickness, weighted by slice wall area."""
        means, weights = [], []
        for idx, area in zip(self.slice_indices, self.per_slice_wall_area):
            prof = self.vwt_profiles.get(idx)
            if prof:
                means.append(np.mean(prof))
                weights.append(area)
        if not means or sum(weights) <= 0:
            return float("nan")
        return float(np.average(means, weights=weights))

    def to_json(self) -> dict:
        return {
            "vwv_mm3": self.vwv,
            "slice_spacing_mm": self.slice_spacing,
            "slices": self.slice_indices,
            "per_slice_wall_area_mm2": self.per_slice_wall_area,
            "vwt_summary": {
                "mean_mm": self.vwt_mean,
                "area_weighted_mean_mm": self.vwt_slice_weighted_mean,
                "per_slice_mean_mm": {str(k): float(np.mean(v)) for k, v in self.vwt_profiles.items() if v},
                "per_slice_max_mm": {str(k): float(np.max(v)) for k, v in self.vwt_profiles.items() if v},
            },
        }

    def save(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(self.to_json(), indent=2) + "\n")
        return path


def volume_report(result, spacing, with_vwt: bool = True) -> VolumeReport:
    labels = _labels_of(result)
    areas = wall_areas(labels, spacing)
    profiles = {}
    if with_vwt:
        for lp in labels:
            try:
                prof = vwt_profile(largest_contour(lp.mab_mask, spacing[:2]),
                                   largest_contour(lp.lib_mask, spacing[:2]))
            except (ContourError, ValueError) as exc:
                log.debug("no VWT profile for slice %d: %s", lp.slice_index, exc)
                continue
            profiles[lp.slice_index] = [float(v) for v in prof]
    return VolumeReport(float(sum(areas) * spacing[2]), areas, float(spacing[2]),
                        [lp.slice_index for lp in labels], profiles)
