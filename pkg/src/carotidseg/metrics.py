"""Region and boundary-distance evaluation: DSC, contours, MAD and MAXD."""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, NamedTuple

import numpy as np
from scipy import ndimage
from skimage import measure

from .volume_io import LabelPair

log = logging.getLogger(__name__)

CSV_HEADER = ("volume", "slice", "boundary", "dsc", "mad", "maxd")
MIN_RESAMPLE = 100


CONTOUR_SMOOTHING = 1.0  # Gaussian sigma in pixels


class ContourError(ValueError):
    pass


def dsc(a: np.ndarray, m: np.ndarray) -> float:
    a = np.asarray(a, dtype=bool)
    m = np.asarray(m, dtype=bool)
    if a.shape != m.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {m.shape}")
    total = int(a.sum()) + int(m.sum())
    if total == 0:
        return 1.0
    return 2.0 * int(np.logical_and(a, m).sum()) / total


def signed_area(points: np.ndarray) -> float:
    """Shoelace area; positive for counter-clockwise order in (x, y)."""
    x, y = points[:, 0], points[:, 1]
    return 0.5 * float(np.dot(x, np.roll(y, -1)) - np.dot(np.roll(x, -1), y))


@dataclass(frozen=True)
class Contour:
    """Closed polyline in mm, (x, y) = (col * sx, row * sy), counter-clockwise.

    The closing edge from the last point back to the first is implicit.
    """
    points: np.ndarray
    closed: bool = True

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64).reshape(-1, 2)
        if self.closed and len(pts) > 1 and np.allclose(pts[0], pts[-1]):
            pts = pts[:-1]
        keep = np.ones(len(pts), dtype=bool)
        keep[1:] = np.any(np.diff(pts, axis=0) != 0, axis=1)
        pts = pts[keep]
        if len(pts) < 3:
            raise ContourError("a contour needs at least 3 distinct points")
        if signed_area(pts) < 0:
            pts = pts[::-1].copy()
        object.__setattr__(self, "points", pts)

    def __len__(self):
        return len(self.points)

    @property
    def length(self) -> float:
        return float(np.linalg.norm(np.roll(self.points, -1, axis=0) - self.points, axis=1).sum())

    @property
    def area(self) -> float:
        return signed_area(self.points)

    def resample(self, k: int) -> np.ndarray:
        """k points at equal arc-length steps, starting at the first vertex."""
        closed = np.vstack([self.points, self.points[:1]])
        seg = np.linalg.norm(np.diff(closed, axis=0), axis=1)
        cum = np.concatenate([[0.0], np.cumsum(seg)])
        if cum[-1] <= 0:
            raise ContourError("degenerate contour of zero length")
        s = np.arange(k) * (cum[-1] / k)
        return np.column_stack([np.interp(s, cum, closed[:, 0]), np.interp(s, cum, closed[:, 1])])

    def transformed(self, rotation: np.ndarray, offset) -> "Contour":
        return Contour(self.points @ np.asarray(rotation).T + np.asarray(offset), self.closed)


def circle_contour(radius: float, n: int = 360, center=(0.0, 0.0)) -> Contour:
    t = np.linspace(0, 2 * np.pi, n, endpoint=False)
    return Contour(np.column_stack([center[0] + radius * np.cos(t), center[1] + radius * np.sin(t)]))


def extract_contour(mask: np.ndarray, spacing=(1.0, 1.0)) -> Contour:
    """Sub-pixel 0.5 iso-contour of a single-component mask, scaled to mm.

    `spacing` is (mm per column, mm per row).
    """
    mask = np.asarray(mask, dtype=bool)
    if mask.sum() < 3:
        raise ContourError("mask is empty or smaller than 3 pixels")
    _, n = ndimage.label(mask)
    if n != 1:
        raise ContourError(f"mask has {n} connected components, expected 1")
    pad = 4
    padded = np.pad(mask.astype(np.float64), pad)
    # light smoothing removes the staircase bias of the raw pixel boundary
    contours = measure.find_contours(ndimage.gaussian_filter(padded, CONTOUR_SMOOTHING), 0.5)
    if not contours:
        contours = measure.find_contours(padded, 0.5)
    outer = max(contours, key=lambda c: abs(signed_area(c)))
    rows, cols = outer[:, 0] - pad, outer[:, 1] - pad
    pts = np.column_stack([cols * spacing[0], rows * spacing[1]])
    return Contour(pts)


class Correspondence(NamedTuple):
    source: np.ndarray   # (n, 2) points
    target: np.ndarray   # (n, 2) matched points
    distances: np.ndarray


def _nearest_on_polyline(points: np.ndarray, poly: np.ndarray, chunk: int = 256):
    """Closest point on the closed polyline `poly` for each of `points`."""
    a = poly
    b = np.roll(poly, -1, axis=0)
    ab = b - a
    denom = np.einsum("ij,ij->i", ab, ab)
    denom[denom == 0] = 1.0
    best_pts = np.empty_like(points)
    best_d = np.empty(len(points))
    for start in range(0, len(points), chunk):
        p = points[start:start + chunk, None, :]
        t = np.clip(np.einsum("nkj,kj->nk", p - a[None], ab) / denom, 0.0, 1.0)
        proj = a[None] + t[..., None] * ab[None]
        d = np.linalg.norm(p - proj, axis=2)
        idx = np.argmin(d, axis=1)
        rows = np.arange(len(idx))
        best_pts[start:start + chunk] = proj[rows, idx]
        best_d[start:start + chunk] = d[rows, idx]
    return best_pts, best_d


def symmetric_correspondence(c1: Contour, c2: Contour, k: int | None = None) -> Correspondence:
    """Bidirectional nearest-point matching on equal-arc-length resampled contours.

    Both contours are resampled to K = max(vertex counts, 100) points. Every
    point of one contour is paired with its nearest point on the other, in
    both directions, giving 2K pairs.
    """
    if k is None:
        k = max(len(c1), len(c2), MIN_RESAMPLE)
    p1, p2 = c1.resample(k), c2.resample(k)
    q12, d12 = _nearest_on_polyline(p1, p2)
    q21, d21 = _nearest_on_polyline(p2, p1)
    return Correspondence(np.vstack([p1, q21]), np.vstack([q12, p2]), np.concatenate([d12, d21]))


def mad_maxd(distances) -> tuple[float, float]:
    d = np.asarray(getattr(distances, "distances", distances), dtype=np.float64)
    if d.size == 0:
        raise ValueError("empty set of correspondence distances")
    return float(d.mean()), float(d.max())


@dataclass
class EvalRecord:
    volume: str
    slice_index: int
    boundary: str
    dsc: float
    mad: float
    maxd: float

    def __post_init__(self):
        if not (np.isnan(self.mad) or 0 <= self.mad <= self.maxd + 1e-12):
            raise ValueError(f"invalid MAD/MAXD pair {self.mad}, {self.maxd}")


def largest_contour(mask: np.ndarray, spacing) -> Contour:
    lab, n = ndimage.label(mask)
    if n > 1:
        log.warning("mask has %d components; evaluating the largest", n)
        sizes = ndimage.sum_labels(mask, lab, index=np.arange(1, n + 1))
        mask = lab == (int(np.argmax(sizes)) + 1)
    return extract_contour(mask, spacing)


def evaluate_boundary(pred: np.ndarray, truth: np.ndarray, spacing) -> tuple[float, float, float]:
    """DSC plus MAD/MAXD (NaN when either mask has no usable contour)."""
    score = dsc(pred, truth)
    try:
        corr = symmetric_correspondence(largest_contour(pred, spacing),
                                        largest_contour(truth, spacing))
        mad, maxd = mad_maxd(corr)
    except ContourError as exc:
        log.warning("distance metrics unavailable: %s", exc)
        mad = maxd = float("nan")
    return score, mad, maxd


def evaluate_labels(pred: Iterable[LabelPair], truth: Iterable[LabelPair], spacing,
                    volume: str = "") -> list[EvalRecord]:
    """Evaluate every ground-truth slice that has a prediction."""
    pred_by = {lp.slice_index: lp for lp in pred}
    records = []
    for gt in truth:
        p = pred_by.get(gt.slice_index)
        if p is None:
            continue
        for boundary in ("MAB", "LIB"):
            attr = f"{boundary.lower()}_mask"
            score, mad, maxd = evaluate_boundary(getattr(p, attr), getattr(gt, attr), spacing)
            records.append(EvalRecord(volume, gt.slice_index, boundary, score, mad, maxd))
    return records


def write_records(records: Iterable[EvalRecord], path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(CSV_HEADER)
        for r in records:
            w.writerow([r.volume, r.slice_index, r.boundary, f"{r.dsc:.6f}",
                        f"{r.mad:.6f}", f"{r.maxd:.6f}"])
    return path


def read_records(path) -> list[EvalRecord]:
    with Path(path).open(newline="") as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != CSV_HEADER:
            raise ValueError(f"{path}: expected columns {','.join(CSV_HEADER)}")
        return [EvalRecord(row["volume"], int(row["slice"]), row["boundary"], float(row["dsc"]),
                           float(row["mad"]), float(row["maxd"])) for row in reader]


def per_volume_means(records: Iterable[EvalRecord], boundary: str, metric: str = "dsc"
                     ) -> dict[str, float]:
    acc: dict[str, list[float]] = {}
    for r in records:
        if r.boundary == boundary:
            acc.setdefault(r.volume, []).append(getattr(r, metric))
    return {v: float(np.nanmean(xs)) for v, xs in acc.items()}
