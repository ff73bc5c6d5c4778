"""Thresholding, flip test-time augmentation with majority voting, volume drivers."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
from scipy import ndimage

from .net import predict_batch
from .volume_io import (INPUT_SHAPE, FormatError, LabelPair, ResliceMap, Volume,
                        crop_to_input, load_labels, reslice_to_input, save_labels)

log = logging.getLogger(__name__)

RESULT_FILE = "result.json"


@dataclass
class SegmentationResult:
    labels: list[LabelPair]
    provenance: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.labels)

    @property
    def mab(self) -> np.ndarray:
        return np.stack([lp.mab_mask for lp in self.labels])

    @property
    def lib(self) -> np.ndarray:
        return np.stack([lp.lib_mask for lp in self.labels])

    def save(self, path) -> Path:
        path = Path(path)
        save_labels(self.labels, path)
        (path / RESULT_FILE).write_text(json.dumps(self.provenance, indent=2, sort_keys=True) + "\n")
        return path

    @classmethod
    def load(cls, path) -> "SegmentationResult":
        path = Path(path)
        prov_file = path / RESULT_FILE
        prov = json.loads(prov_file.read_text()) if prov_file.is_file() else {}
        return cls(load_labels(path), prov)


def binarize(prob: np.ndarray, threshold: float = 0.5) -> np.ndarray:
    return np.asarray(prob) >= threshold


def majority_vote(votes: np.ndarray) -> np.ndarray:
    """Pixel-wise majority over the leading axis of a stack of binary masks."""
    votes = np.asarray(votes, dtype=np.uint8)
    return 2 * votes.sum(axis=0) > votes.shape[0]


def largest_component(mask: np.ndarray) -> np.ndarray:
    lab, n = ndimage.label(mask)
    if n <= 1:
        return np.asarray(mask, dtype=bool)
    sizes = ndimage.sum_labels(mask, lab, index=np.arange(1, n + 1))
    return lab == (int(np.argmax(sizes)) + 1)


def _predict(model, images: np.ndarray, tta: bool, threshold: float = 0.5) -> np.ndarray:
    """(N, H, W) images -> (N, 2, H, W) binary masks."""
    if not tta:
        return binarize(predict_batch(model, images), threshold)
    n = len(images)
    stacked = np.concatenate([images, images[:, :, ::-1], images[:, ::-1, :]])
    probs = predict_batch(model, stacked)
    orig = probs[:n]
    h_back = probs[n:2 * n][..., :, ::-1]
    v_back = probs[2 * n:][..., ::-1, :]
    votes = np.stack([binarize(orig, threshold), binarize(h_back, threshold),
                      binarize(v_back, threshold)])
    return majority_vote(votes)


def tta_predict(model, image: np.ndarray, threshold: float = 0.5) -> LabelPair:
    """Vote over the original, horizontally and vertically flipped inputs.

    Each flipped prediction is flipped back and binarised before voting.
    """
    masks = _predict(model, np.asarray(image, dtype=np.float32)[None], tta=True,
                     threshold=threshold)[0]
    return LabelPair(masks[0], masks[1], 0)


def prepare_slice(image: np.ndarray, roi=None, shape=INPUT_SHAPE) -> tuple[np.ndarray, ResliceMap]:
    if roi is None:
        return reslice_to_input(image, shape)
    return crop_to_input(image, roi, shape)


def segment_volume(model, volume: Volume, artery: str = "CCA", tta: bool = False,
                   slice_indices: Optional[list[int]] = None, keep_largest: bool = False,
                   threshold: float = 0.5, input_shape: Optional[tuple[int, int]] = None,
                   provenance: Optional[dict] = None) -> SegmentationResult:
    """Segment every slice (or `slice_indices`) of a volume in original coordinates.

    ICA volumes are restricted to the interpolated ROI of each slice between
    the two endpoint boxes; slices outside that range are not segmented.
    """
    artery = artery.upper()
    if artery not in ("CCA", "ICA"):
        raise ValueError(f"unknown artery type {artery!r}")
    shape = tuple(input_shape or getattr(getattr(model, "config", None), "input_size", INPUT_SHAPE))
    rois = {}
    if artery == "ICA":
        if not volume.has_roi:
            raise FormatError("ICA segmentation needs roi_first/roi_last in the volume sidecar")
        rois = volume.slice_rois()
        indices = sorted(rois) if slice_indices is None else list(slice_indices)
        outside = [i for i in indices if i not in rois]
        if outside:
            raise ValueError(f"slices {outside} lie outside the ICA ROI range")
    else:
        indices = list(range(volume.n_slices)) if slice_indices is None else list(slice_indices)

    inputs, maps = [], []
    for i in indices:
        x, m = prepare_slice(volume.voxels[i], rois.get(i), shape)
        inputs.append(x)
        maps.append(m)
    masks = _predict(model, np.stack(inputs).astype(np.float32), tta, threshold) if inputs else []

    labels = []
    for i, m, pair in zip(indices, maps, masks):
        mab = m.to_original(pair[0])
        lib = m.to_original(pair[1])
        if keep_largest:
            mab, lib = largest_component(mab), largest_component(lib)
        labels.append(LabelPair(mab, lib & mab, i))
    prov = {"artery": artery, "tta": bool(tta), "threshold": threshold,
            "n_slices": len(labels), "keep_largest": keep_largest}
    prov.update(provenance or {})
    return SegmentationResult(labels, prov)
