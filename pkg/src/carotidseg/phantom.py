"""Procedural 3D vessel phantoms with exact elliptical MAB/LIB ground truth.

Each slice shows a dark lumen inside a bright wall band inside mid-grey
tissue, with multiplicative Rayleigh speckle and optional vertical shadows.
Vessel centre, radius, wall thickness and ellipticity drift smoothly along
the slice axis so that shape-based interpolation has something to do.
"""

from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import asdict, dataclass, replace
from pathlib import Path
from typing import Optional

import numpy as np
from scipy import ndimage

from .volume_io import LabelPair, RoiBox, Volume, label_dir, save_labels, save_volume

log = logging.getLogger(__name__)

TISSUE_LEVEL = 0.45
WALL_LEVEL = 0.85
LUMEN_LEVEL = 0.08
RAYLEIGH_MEAN = np.sqrt(np.pi / 2)


@dataclass(frozen=True)
class PhantomSpec:
    n_slices: int = 16
    image_size: tuple[int, int] = (128, 160)
    centerline_drift_amplitude: float = 4.0
    mab_radius_range: tuple[float, float] = (18.0, 24.0)
    wall_thickness_range: tuple[float, float] = (4.0, 7.0)
    ellipticity_range: tuple[float, float] = (0.85, 1.0)
    speckle_strength: float = 0.2
    shadow_probability: float = 0.0
    seed: int = 0
    in_plane_spacing: tuple[float, float] = (0.1, 0.1)
    slice_spacing: float = 1.0
    ica_roi: bool = False
    blur_sigma: float = 0.8

    def __post_init__(self):
        for name in ("image_size", "mab_radius_range", "wall_thickness_range",
                     "ellipticity_range", "in_plane_spacing"):
            object.__setattr__(self, name, tuple(getattr(self, name)))
        self.validate()

    def validate(self):
        lo_r, hi_r = self.mab_radius_range
        lo_t, hi_t = self.wall_thickness_range
        lo_e, hi_e = self.ellipticity_range
        if self.n_slices < 1:
            raise ValueError("n_slices must be >= 1")
        if lo_r > hi_r or lo_t > hi_t or lo_e > hi_e:
            raise ValueError("ranges must be (min, max)")
        if lo_t < 1:
            raise ValueError("wall thickness must be >= 1 pixel")
        if not 0 < lo_e <= hi_e <= 1:
            raise ValueError("ellipticity (minor/major axis ratio) must lie in (0, 1]")
        # smallest LIB semi-axis: minor MAB axis minus thickness
        if lo_r * lo_e - hi_t < 2:
            raise ValueError("LIB radius would drop below 2 pixels")
        rows, cols = self.image_size
        if 2 * (hi_r + self.centerline_drift_amplitude) + 4 > min(rows, cols):
            raise ValueError("vessel does not fit inside the image")
        if self.speckle_strength < 0:
            raise ValueError("speckle_strength must be >= 0")
        if not 0 <= self.shadow_probability <= 1:
            raise ValueError("shadow_probability must lie in [0, 1]")


def _smooth_walk(rng: np.random.Generator, n: int, lo: float, hi: float) -> np.ndarray:
    """Low-frequency random curve confined to [lo, hi]."""
    if hi <= lo:
        return np.full(n, float(lo))
    n_knots = max(2, n // 6 + 2)
    knots = rng.uniform(lo, hi, size=n_knots)
    x = np.linspace(0, n_knots - 1, n)
    return np.interp(x, np.arange(n_knots), knots)


def ellipse_mask(shape, center, semi_axes) -> np.ndarray:
    """Pixel-centre rasterisation of an axis-aligned ellipse.

    semi_axes is (row semi-axis, col semi-axis).
    """
    rr, cc = np.ogrid[:shape[0], :shape[1]]
    return ((rr - center[0]) / semi_axes[0]) ** 2 + ((cc - center[1]) / semi_axes[1]) ** 2 <= 1.0


def _geometry(spec: PhantomSpec, rng: np.random.Generator):
    n = spec.n_slices
    rows, cols = spec.image_size
    amp = spec.centerline_drift_amplitude
    cy = rows / 2 - 0.5 + _smooth_walk(rng, n, -amp, amp)
    cx = cols / 2 - 0.5 + _smooth_walk(rng, n, -amp, amp)
    radius = _smooth_walk(rng, n, *spec.mab_radius_range)
    thick = _smooth_walk(rng, n, *spec.wall_thickness_range)
    ell = _smooth_walk(rng, n, *spec.ellipticity_range)
    horizontal = rng.random() < 0.5
    return cy, cx, radius, thick, ell, horizontal


def generate_phantom(spec: PhantomSpec) -> tuple[Volume, list[LabelPair]]:
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    cy, cx, radius, thick, ell, horizontal = _geometry(spec, rng)
    shape = spec.image_size
    voxels = np.empty((spec.n_slices,) + tuple(shape))
    labels = []
    for i in range(spec.n_slices):
        major, minor = radius[i], radius[i] * ell[i]
        mab_axes = (minor, major) if horizontal else (major, minor)
        lib_axes = (mab_axes[0] - thick[i], mab_axes[1] - thick[i])
        mab = ellipse_mask(shape, (cy[i], cx[i]), mab_axes)
        lib = ellipse_mask(shape, (cy[i], cx[i]), lib_axes) & mab
        labels.append(LabelPair(mab, lib, i))

        img = np.full(shape, TISSUE_LEVEL)
        img[mab] = WALL_LEVEL
        img[lib] = LUMEN_LEVEL
        if spec.blur_sigma > 0:
            img = ndimage.gaussian_filter(img, spec.blur_sigma)
        # drawn unconditionally so the stream does not depend on the feature flags
        noise = rng.rayleigh(1.0, size=shape) / RAYLEIGH_MEAN
        shadow_draw = rng.random(4)
        if spec.speckle_strength > 0:
            img = img * (1.0 + spec.speckle_strength * (noise - 1.0))
        if spec.shadow_probability > 0 and shadow_draw[0] < spec.shadow_probability:
            width = int(5 + shadow_draw[1] * 15)
            start = int(shadow_draw[2] * (shape[1] - width))
            img[:, start:start + width] *= 0.3 + 0.3 * shadow_draw[3]
        voxels[i] = np.clip(img, 0.0, 1.0)

    roi_first = roi_last = None
    if spec.ica_roi and spec.n_slices >= 2:
        roi_first = _bbox(labels[0].mab_mask, 0, pad=5)
        roi_last = _bbox(labels[-1].mab_mask, spec.n_slices - 1, pad=5)
    volume = Volume(voxels, spec.in_plane_spacing, spec.slice_spacing,
                    roi_first=roi_first, roi_last=roi_last)
    return volume, labels


def _bbox(mask: np.ndarray, slice_index: int, pad: int) -> RoiBox:
    rows = np.flatnonzero(mask.any(axis=1))
    cols = np.flatnonzero(mask.any(axis=0))
    box = RoiBox((rows[0] - pad, cols[0] - pad), (rows[-1] + 1 + pad, cols[-1] + 1 + pad), slice_index)
    return box.clamp(mask.shape)


def analytic_wall_area(spec: PhantomSpec) -> float:
    """Wall area in px^2 of a constant circular phantom (for checks)."""
    r = spec.mab_radius_range[0]
    t = spec.wall_thickness_range[0]
    return float(np.pi * (r**2 - (r - t) ** 2))


def derive_seed(seed: int, index: int) -> int:
    return int(np.random.SeedSequence([seed, index]).generate_state(1)[0])


def generate_cohort(n_volumes: int, spec_template: PhantomSpec, seed: int, dest,
                    artery: Optional[str] = None) -> list[dict]:
    """Write `n_volumes` phantom volumes plus labels under `dest`.

    Volumes are paired two per synthetic subject (left/right artery). Returns
    the cohort index that is also written to `dest/cohort.json`.
    """
    if n_volumes < 1:
        raise ValueError("n_volumes must be >= 1")
    dest = Path(dest)
    dest.mkdir(parents=True, exist_ok=True)
    artery = (artery or ("ICA" if spec_template.ica_roi else "CCA")).upper()
    entries = []
    for i in range(n_volumes):
        subject = f"S{i // 2:03d}"
        side = "L" if i % 2 == 0 else "R"
        vol_id = f"{subject}{side}_{artery}"
        spec = replace(spec_template, seed=derive_seed(seed, i))
        volume, labels = generate_phantom(spec)
        volume.subject_id = subject
        vdir = dest / vol_id
        save_volume(volume, vdir, extra={"artery": artery, "phantom_seed": spec.seed})
        save_labels(labels, label_dir(vdir))
        entries.append({"volume": vol_id, "subject_id": subject, "artery": artery,
                        "path": vol_id})
        log.debug("wrote phantom %s", vdir)
    index = {"seed": seed, "spec": asdict(spec_template), "volumes": entries}
    (dest / "cohort.json").write_text(json.dumps(index, indent=2, sort_keys=True) + "\n")
    return entries


def directory_checksum(path) -> str:
    """SHA-256 over relative file names and contents, for reproducibility checks."""
    path = Path(path)
    h = hashlib.sha256()
    for f in sorted(p for p in path.rglob("*") if p.is_file()):
        h.update(str(f.relative_to(path)).encode())
        h.update(f.read_bytes())
    return h.hexdigest()
