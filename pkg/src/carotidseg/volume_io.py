"""Volume data model, on-disk layout, preprocessing and ICA ROI interpolation.

On-disk layout of one volume directory::

    <vol>/slice_0000.png ... slice_NNNN.png   8-bit grayscale slices
    <vol>/volume.json                          spacings, ROI endpoints, subject id
    <vol>/labels/slice_0000_mab.png ...        optional 0/255 masks
"""

from __future__ import annotations

import json
import math
import re
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np
from PIL import Image
from scipy import ndimage

INPUT_SHAPE = (256, 320)
ROI_EXPANSION = 20
SIDECAR = "volume.json"
LABEL_SUBDIR = "labels"

_SLICE_RE = re.compile(r"^slice_(\d+)\.png$")
_LABEL_RE = re.compile(r"^slice_(\d+)_(mab|lib)\.png$")


class FormatError(ValueError):
    """Raised for malformed volume or label directories."""


@dataclass(frozen=True)
class RoiBox:
    top_left: tuple[int, int]
    bottom_right: tuple[int, int]
    slice_index: int

    def __post_init__(self):
        object.__setattr__(self, "top_left", tuple(int(v) for v in self.top_left))
        object.__setattr__(self, "bottom_right", tuple(int(v) for v in self.bottom_right))
        if not (self.top_left[0] < self.bottom_right[0] and self.top_left[1] < self.bottom_right[1]):
            raise ValueError(f"invalid ROI box {self.top_left}-{self.bottom_right}")

    def clamp(self, shape: tuple[int, int]) -> "RoiBox":
        r0 = min(max(self.top_left[0], 0), shape[0] - 1)
        c0 = min(max(self.top_left[1], 0), shape[1] - 1)
        r1 = max(min(self.bottom_right[0], shape[0]), r0 + 1)
        c1 = max(min(self.bottom_right[1], shape[1]), c0 + 1)
        return RoiBox((r0, c0), (r1, c1), self.slice_index)

    def expand(self, pixels: int, shape: Optional[tuple[int, int]] = None) -> "RoiBox":
        r0, c0 = self.top_left[0] - pixels, self.top_left[1] - pixels
        r1, c1 = self.bottom_right[0] + pixels, self.bottom_right[1] + pixels
        if shape is not None:
            r0, c0 = max(r0, 0), max(c0, 0)
            r1, c1 = min(r1, shape[0]), min(c1, shape[1])
        return RoiBox((r0, c0), (r1, c1), self.slice_index)

    @property
    def slices(self) -> tuple[slice, slice]:
        """Array slices; bottom_right is exclusive."""
        return (slice(self.top_left[0], self.bottom_right[0]),
                slice(self.top_left[1], self.bottom_right[1]))

    def to_json(self) -> dict:
        return {"slice": self.slice_index, "top_left": list(self.top_left),
                "bottom_right": list(self.bottom_right)}

    @classmethod
    def from_json(cls, d: dict) -> "RoiBox":
        return cls(tuple(d["top_left"]), tuple(d["bottom_right"]), int(d["slice"]))


@dataclass
class Volume:
    voxels: np.ndarray  # (n_slices, rows, cols), float in [0, 1]
    in_plane_spacing: tuple[float, float] = (1.0, 1.0)  # mm/pixel along (x=cols, y=rows)
    slice_spacing: float = 1.0
    slice_axis_label: str = "axial"
    roi_first: Optional[RoiBox] = None
    roi_last: Optional[RoiBox] = None
    subject_id: Optional[str] = None

    def __post_init__(self):
        self.voxels = np.asarray(self.voxels)
        if self.voxels.ndim != 3:
            raise ValueError(f"voxels must be 3D, got shape {self.voxels.shape}")
        self.in_plane_spacing = tuple(float(s) for s in self.in_plane_spacing)
        self.slice_spacing = float(self.slice_spacing)
        if self.slice_spacing <= 0 or min(self.in_plane_spacing) <= 0:
            raise ValueError("spacings must be positive")

    @property
    def n_slices(self) -> int:
        return self.voxels.shape[0]

    @property
    def slice_shape(self) -> tuple[int, int]:
        return self.voxels.shape[1:]

    @property
    def spacing(self) -> tuple[float, float, float]:
        return (*self.in_plane_spacing, self.slice_spacing)

    @property
    def has_roi(self) -> bool:
        return self.roi_first is not None and self.roi_last is not None

    def slice_rois(self) -> dict[int, RoiBox]:
        """Interpolated ROI box for every slice between the two endpoints."""
        if not self.has_roi:
            raise FormatError("volume carries no ICA endpoint ROI boxes")
        first, last = self.roi_first, self.roi_last
        boxes = interpolate_roi(first, last, range(first.slice_index, last.slice_index + 1),
                                shape=self.slice_shape)
        return {b.slice_index: b for b in boxes}


@dataclass
class LabelPair:
    mab_mask: np.ndarray
    lib_mask: np.ndarray
    slice_index: int

    def __post_init__(self):
        self.mab_mask = np.asarray(self.mab_mask, dtype=bool)
        self.lib_mask = np.asarray(self.lib_mask, dtype=bool)
        if self.mab_mask.shape != self.lib_mask.shape:
            raise ValueError(f"mask shapes differ: {self.mab_mask.shape} vs {self.lib_mask.shape}")

    @property
    def is_nested(self) -> bool:
        return not np.any(self.lib_mask & ~self.mab_mask)

    @property
    def wall_mask(self) -> np.ndarray:
        return self.mab_mask & ~self.lib_mask

    def validate(self) -> "LabelPair":
        if not self.is_nested:
            raise FormatError(f"slice {self.slice_index}: LIB mask is not contained in MAB mask")
        return self


@dataclass
class DatasetSplit:
    train_ids: list
    val_ids: list
    test_ids: list

    def partition_of(self, subject_id) -> str:
        for name in ("train", "val", "test"):
            if subject_id in getattr(self, f"{name}_ids"):
                return name
        raise KeyError(subject_id)


# -- intensity / resampling ------------------------------------------------

def normalize_intensity(voxels: np.ndarray) -> np.ndarray:
    """Linear min/max scaling to [0, 1]; a constant array maps to zeros."""
    v = np.asarray(voxels, dtype=np.float64)
    lo, hi = float(v.min()), float(v.max())
    if hi <= lo:
        return np.zeros_like(v)
    return (v - lo) / (hi - lo)


def resample(image: np.ndarray, shape: tuple[int, int], order: int = 1) -> np.ndarray:
    """Resample a 2D array to `shape` with pixel-centre alignment.

    order=1 is bilinear, order=0 nearest neighbour. Same-shape input is
    returned unchanged.
    """
    image = np.asarray(image)
    shape = (int(shape[0]), int(shape[1]))
    if image.shape == shape:
        return image.copy()
    is_bool = image.dtype == bool
    src = image.astype(np.float64)
    rows = (np.arange(shape[0]) + 0.5) * (image.shape[0] / shape[0]) - 0.5
    cols = (np.arange(shape[1]) + 0.5) * (image.shape[1] / shape[1]) - 0.5
    if order == 0:
        ri = np.clip(np.floor(rows + 0.5).astype(int), 0, image.shape[0] - 1)
        ci = np.clip(np.floor(cols + 0.5).astype(int), 0, image.shape[1] - 1)
        out = src[np.ix_(ri, ci)]
    else:
        rr, cc = np.meshgrid(rows, cols, indexing="ij")
        out = ndimage.map_coordinates(src, [rr, cc], order=order, mode="nearest")
    return out.astype(bool) if is_bool else out


@dataclass(frozen=True)
class ResliceMap:
    """Inverse mapping from network-input coordinates back to a slice frame."""
    original_shape: tuple[int, int]
    box: Optional[RoiBox] = None
    frame_shape: Optional[tuple[int, int]] = None

    def to_original(self, mask: np.ndarray) -> np.ndarray:
        """Map a network-resolution mask back (nearest neighbour)."""
        local = resample(np.asarray(mask, dtype=bool), self.original_shape, order=0)
        if self.box is None:
            return local
        full = np.zeros(self.frame_shape, dtype=bool)
        full[self.box.slices] = local
        return full


def reslice_to_input(slice_2d: np.ndarray, shape: tuple[int, int] = INPUT_SHAPE,
                     order: int = 1) -> tuple[np.ndarray, ResliceMap]:
    slice_2d = np.asarray(slice_2d)
    if slice_2d.ndim != 2 or min(slice_2d.shape) < 2:
        raise ValueError(f"cannot reslice degenerate slice of shape {slice_2d.shape}")
    return resample(slice_2d, shape, order), ResliceMap(tuple(slice_2d.shape))


def crop_to_input(slice_2d: np.ndarray, box: RoiBox, shape: tuple[int, int] = INPUT_SHAPE,
                  order: int = 1) -> tuple[np.ndarray, ResliceMap]:
    """Crop an ROI and resample it (anisotropically) to the network input size."""
    box = box.clamp(slice_2d.shape)
    crop = np.asarray(slice_2d)[box.slices]
    if min(crop.shape) < 2:
        raise ValueError(f"ROI {box} is degenerate")
    return resample(crop, shape, order), ResliceMap(tuple(crop.shape), box, tuple(slice_2d.shape))


# -- ROI interpolation -------------------------------------------------------

def _round_half_down(x: float) -> int:
    return int(math.ceil(x - 0.5))


def _round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def interpolate_roi(first: RoiBox, last: RoiBox, slice_indices,
                    shape: Optional[tuple[int, int]] = None,
                    expansion: int = ROI_EXPANSION) -> list[RoiBox]:
    """Linearly interpolate endpoint ROI boxes over `slice_indices`.

    Endpoints are first expanded by `expansion` pixels per side, clamped to
    `shape` when given. Interpolated corners are rounded to the nearest
    integer, ties resolved toward the larger box.
    """
    if first.slice_index == last.slice_index:
        raise ValueError("ROI endpoints lie on the same slice")
    if first.slice_index > last.slice_index:
        first, last = last, first
    a = first.expand(expansion, shape)
    b = last.expand(expansion, shape)
    span = last.slice_index - first.slice_index
    out = []
    for s in slice_indices:
        t = (s - first.slice_index) / span
        tl = [_round_half_down((1 - t) * p + t * q) for p, q in zip(a.top_left, b.top_left)]
        br = [_round_half_up((1 - t) * p + t * q) for p, q in zip(a.bottom_right, b.bottom_right)]
        box = RoiBox(tuple(tl), tuple(br), int(s))
        out.append(box.clamp(shape) if shape is not None else box)
    return out


# -- splits -----------------------------------------------------------------

def make_split(subject_ids, seed: int = 0) -> DatasetSplit:
    """60/20/20 split over unique subjects; all volumes of a subject stay together."""
    unique = sorted(set(subject_ids), key=str)
    n = len(unique)
    if n < 5:
        raise ValueError(f"need at least 5 subjects, got {n}")
    order = np.random.default_rng(seed).permutation(n)
    shuffled = [unique[i] for i in order]
    n_train = int(round(0.6 * n))
    n_val = int(round(0.2 * n))
    return DatasetSplit(shuffled[:n_train], shuffled[n_train:n_train + n_val],
                        shuffled[n_train + n_val:])


# -- disk I/O ---------------------------------------------------------------

def _read_png(path: Path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("L"))


def _write_png(path: Path, array: np.ndarray):
    Image.fromarray(np.asarray(array, dtype=np.uint8), mode="L").save(path, optimize=False)


def to_uint8(voxels: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(np.asarray(voxels, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)


def read_sidecar(path) -> dict:
    sidecar = Path(path) / SIDECAR
    if not sidecar.is_file():
        raise FormatError(f"missing sidecar {sidecar}")
    try:
        return json.loads(sidecar.read_text())
    except json.JSONDecodeError as exc:
        raise FormatError(f"unreadable sidecar {sidecar}: {exc}") from exc


def load_volume(path) -> Volume:
    path = Path(path)
    meta = read_sidecar(path)
    files = sorted((int(m.group(1)), f) for f in path.iterdir()
                   if (m := _SLICE_RE.match(f.name)))
    if not files:
        raise FormatError(f"no slice_*.png files in {path}")
    slices = [_read_png(f) for _, f in files]
    shapes = {s.shape for s in slices}
    if len(shapes) != 1:
        raise FormatError(f"inconsistent slice dimensions in {path}: {sorted(shapes)}")
    try:
        spacing = meta["in_plane_spacing_mm"]
        slice_spacing = meta["slice_spacing_mm"]
    except KeyError as exc:
        raise FormatError(f"sidecar missing key {exc}") from exc
    roi_first = RoiBox.from_json(meta["roi_first"]) if meta.get("roi_first") else None
    roi_last = RoiBox.from_json(meta["roi_last"]) if meta.get("roi_last") else None
    return Volume(
        voxels=normalize_intensity(np.stack(slices)),
        in_plane_spacing=tuple(spacing),
        slice_spacing=slice_spacing,
        slice_axis_label=meta.get("slice_axis_label", "axial"),
        roi_first=roi_first,
        roi_last=roi_last,
        subject_id=meta.get("subject_id"),
    )


def save_volume(volume: Volume, path, extra: Optional[dict] = None) -> Path:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    for stale in path.glob("slice_*.png"):
        stale.unlink()
    data = to_uint8(volume.voxels)
    for i, sl in enumerate(data):
        _write_png(path / f"slice_{i:04d}.png", sl)
    meta = {
        "in_plane_spacing_mm": list(volume.in_plane_spacing),
        "slice_spacing_mm": volume.slice_spacing,
        "slice_axis_label": volume.slice_axis_label,
        "roi_first": volume.roi_first.to_json() if volume.roi_first else None,
        "roi_last": volume.roi_last.to_json() if volume.roi_last else None,
        "subject_id": volume.subject_id,
    }
    meta.update(extra or {})
    (path / SIDECAR).write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    return path


def save_labels(labels: list[LabelPair], path) -> Path:
    """Write `slice_XXXX_mab.png` / `_lib.png` 0/255 masks into `path`."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    for stale in path.glob("slice_*_*.png"):
        stale.unlink()
    for lp in labels:
        _write_png(path / f"slice_{lp.slice_index:04d}_mab.png", lp.mab_mask * 255)
        _write_png(path / f"slice_{lp.slice_index:04d}_lib.png", lp.lib_mask * 255)
    return path


def load_labels(path, validate: bool = True) -> list[LabelPair]:
    """Read a label directory; pairs are sorted by slice index.

    With `validate`, a LIB mask escaping its MAB mask raises FormatError.
    """
    path = Path(path)
    if not path.is_dir():
        raise FormatError(f"label directory {path} does not exist")
    found: dict[int, dict[str, np.ndarray]] = {}
    for f in path.iterdir():
        m = _LABEL_RE.match(f.name)
        if m:
            found.setdefault(int(m.group(1)), {})[m.group(2)] = _read_png(f) > 127
    pairs = []
    for idx in sorted(found):
        masks = found[idx]
        if set(masks) != {"mab", "lib"}:
            raise FormatError(f"slice {idx}: need both _mab and _lib masks in {path}")
        lp = LabelPair(masks["mab"], masks["lib"], idx)
        pairs.append(lp.validate() if validate else lp)
    return pairs


def label_dir(volume_dir) -> Path:
    return Path(volume_dir) / LABEL_SUBDIR
