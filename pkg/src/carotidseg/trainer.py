"""Training loop, checkpoints and the nine-setting experiment matrix."""

from __future__ import annotations

import copy
import csv
import hashlib
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Optional

import numpy as np
import torch

from .augment import AugmentPolicy, augment_sample, shape_interp_reslice
from .infer import segment_volume
from .loss import UNIFORM, LossMode, ScheduleState, atdl_weights, objective
from .metrics import dsc, evaluate_labels, write_records
from .net import NetConfig, build_model, count_parameters, predict_batch
from .volume_io import (FormatError, LabelPair, RoiBox, Volume, crop_to_input, label_dir,
                        load_labels, load_volume, make_split, read_sidecar, resample)
from .volumetry import vwv

log = logging.getLogger(__name__)

WEIGHTS_FILE = "weights.pt"
MANIFEST_FILE = "manifest.json"
LOG_FILE = "training_log.csv"
STEP_LOG_FILE = "steps.csv"
LOG_COLUMNS = ("epoch", "l_mab", "l_lib", "l_cvw", "alpha", "beta", "gamma", "train_loss",
               "val_loss", "val_dsc_mab", "val_dsc_lib", "val_dsc", "seconds")


@dataclass(frozen=True)
class TrainConfig:
    mode: str = "ATDL"
    adaptive_a: float = 0.5
    learning_rate: float = 1e-3
    momentum_beta1: float = 0.9
    momentum_beta2: float = 0.999
    batch_size: int = 8
    epochs: int = 50
    seed: int = 0
    use_reslice_augment: bool = True
    reslice_spacing: float = 0.1
    reslice_epoch_cap: Optional[int] = None
    augment_policy: AugmentPolicy = field(default_factory=AugmentPolicy)
    weight_update: str = "batch"
    artery: str = "CCA"
    split_seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "mode", LossMode(self.mode).value)
        object.__setattr__(self, "artery", self.artery.upper())
        if isinstance(self.augment_policy, dict):
            object.__setattr__(self, "augment_policy", AugmentPolicy(**self.augment_policy))
        if self.mode == "ATDL" and self.epochs < 2:
            raise ValueError("ATDL needs at least 2 epochs (two phases)")
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be positive")
        if self.weight_update not in ("batch", "epoch"):
            raise ValueError("weight_update must be 'batch' or 'epoch'")
        if self.artery not in ("CCA", "ICA"):
            raise ValueError("artery must be CCA or ICA")

    def digest(self) -> str:
        blob = json.dumps(asdict(self), sort_keys=True, default=str).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


# -- cohort access ---------------------------------------------------------------

@dataclass
class CohortEntry:
    volume_id: str
    subject_id: str
    artery: str
    path: Path


def scan_cohort(root) -> list[CohortEntry]:
    """Every volume directory below `root` (one level), sorted by name."""
    root = Path(root)
    entries = []
    for d in sorted(p for p in root.iterdir() if (p / "volume.json").is_file()):
        meta = read_sidecar(d)
        entries.append(CohortEntry(d.name, str(meta.get("subject_id") or d.name),
                                   str(meta.get("artery", "CCA")).upper(), d))
    if not entries:
        raise FormatError(f"no volume directories under {root}")
    return entries


def split_cohort(entries: list[CohortEntry], seed: int) -> dict[str, list[CohortEntry]]:
    split = make_split([e.subject_id for e in entries], seed)
    parts = {"train": [], "val": [], "test": []}
    for e in entries:
        parts[split.partition_of(e.subject_id)].append(e)
    return parts


@dataclass
class Sample:
    image: np.ndarray
    labels: LabelPair
    roi: Optional[RoiBox]


def _volume_samples(volume: Volume, labels: list[LabelPair], artery: str) -> list[Sample]:
    rois = volume.slice_rois() if artery == "ICA" else {}
    out = []
    for lp in labels:
        roi = rois.get(lp.slice_index) if artery == "ICA" else None
        if artery == "ICA" and roi is None:
            continue
        out.append(Sample(volume.voxels[lp.slice_index].astype(np.float32), lp, roi))
    return out


def load_samples(entries: list[CohortEntry], artery: str, reslice_spacing: Optional[float] = None
                 ) -> list[Sample]:
    samples = []
    for e in entries:
        volume = load_volume(e.path)
        labels = load_labels(label_dir(e.path))
        if artery == "ICA" and not volume.has_roi:
            raise FormatError(f"{e.volume_id}: ICA volume without ROI metadata")
        if reslice_spacing is not None:
            volume, labels = shape_interp_reslice(volume, labels, reslice_spacing)
        samples.extend(_volume_samples(volume, labels, artery))
    return samples


def to_input(sample: Sample, shape) -> tuple[np.ndarray, LabelPair]:
    """Resample an image (bilinear) and its masks (nearest) to the network input."""
    lp = sample.labels
    if sample.roi is None:
        img = resample(sample.image, shape, 1)
        mab = resample(lp.mab_mask, shape, 0)
        lib = resample(lp.lib_mask, shape, 0)
    else:
        img, _ = crop_to_input(sample.image, sample.roi, shape, 1)
        mab, _ = crop_to_input(lp.mab_mask, sample.roi, shape, 0)
        lib, _ = crop_to_input(lp.lib_mask, sample.roi, shape, 0)
    return img, LabelPair(mab, lib & mab, lp.slice_index)


# -- training ---------------------------------------------------------------------

@dataclass
class TrainOutcome:
    model: torch.nn.Module
    checkpoint: Path
    log: list[dict]
    best_epoch: int
    best_val_dsc: float


def _epoch_order(config: TrainConfig, epoch: int, pool_size: int, n_original: int) -> np.ndarray:
    rng = np.random.default_rng([config.seed, epoch, 0])
    if config.use_reslice_augment:
        cap = config.reslice_epoch_cap or n_original
        return rng.choice(pool_size, size=min(cap, pool_size), replace=False)
    return rng.permutation(pool_size)


def _validate(model, val_inputs, shape) -> dict:
    if not val_inputs:
        return {"val_loss": math.nan, "val_dsc_mab": math.nan, "val_dsc_lib": math.nan,
                "val_dsc": math.nan}
    images = np.stack([x for x, _ in val_inputs]).astype(np.float32)
    probs = predict_batch(model, images)
    mab = np.stack([lp.mab_mask for _, lp in val_inputs])
    lib = np.stack([lp.lib_mask for _, lp in val_inputs])
    with torch.no_grad():
        val_loss, _ = objective(torch.as_tensor(probs), torch.as_tensor(mab), torch.as_tensor(lib),
                                LossMode.TDL, weights=UNIFORM)
    d_mab = float(np.mean([dsc(p >= 0.5, m) for p, m in zip(probs[:, 0], mab)]))
    d_lib = float(np.mean([dsc(p >= 0.5, m) for p, m in zip(probs[:, 1], lib)]))
    return {"val_loss": float(val_loss), "val_dsc_mab": d_mab, "val_dsc_lib": d_lib,
            "val_dsc": 0.5 * (d_mab + d_lib)}


def _write_csv(path: Path, rows: list[dict], columns) -> None:
    with path.open("w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(columns), extrasaction="ignore")
        w.writeheader()
        for row in rows:
            w.writerow({k: (f"{v:.10g}" if isinstance(v, float) else v) for k, v in row.items()})


def train(config: TrainConfig, dataset, out_dir, net_config: NetConfig = NetConfig(),
          splits: Optional[dict] = None) -> TrainOutcome:
    """Train one model on the train partition of the cohort at `dataset`.

    Writes the best-validation weights, `manifest.json`, the per-epoch
    `training_log.csv` and per-step `steps.csv` into `out_dir`.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    if splits is None:
        entries = [e for e in scan_cohort(dataset) if e.artery == config.artery]
        splits = split_cohort(entries, config.split_seed)
    if not splits["train"]:
        raise ValueError("empty training partition")
    shape = net_config.input_size
    mode = LossMode(config.mode)

    original = load_samples(splits["train"], config.artery)
    if not original:
        raise ValueError("training partition contains no labelled slices")
    pool = (load_samples(splits["train"], config.artery, config.reslice_spacing)
            if config.use_reslice_augment else original)
    val_inputs = [to_input(s, shape) for s in load_samples(splits["val"], config.artery)]
    log.info("%s/%s: %d training slices (pool %d), %d validation slices", mode.value,
             config.artery, len(original), len(pool), len(val_inputs))

    torch.manual_seed(config.seed)
    model = build_model(net_config, sdl=mode is LossMode.SDL)
    opt = torch.optim.Adam(model.parameters(), lr=config.learning_rate,
                           betas=(config.momentum_beta1, config.momentum_beta2))

    history, steps = [], []
    best = (-math.inf, -1, None)
    epoch_weights = None
    for epoch in range(config.epochs):
        t0 = time.time()
        state = ScheduleState(epoch, config.epochs, config.adaptive_a)
        order = _epoch_order(config, epoch, len(pool), len(original))
        aug_rng = np.random.default_rng([config.seed, epoch, 1])
        model.train()
        sums = {"l_mab": 0.0, "l_lib": 0.0, "l_cvw": 0.0, "alpha": 0.0, "beta": 0.0,
                "gamma": 0.0, "train_loss": 0.0}
        n_batches = 0
        fixed = epoch_weights if (mode is LossMode.ATDL and state.adaptive) else None
        for start in range(0, len(order), config.batch_size):
            batch = [pool[i] for i in order[start:start + config.batch_size]]
            xs, mabs, libs = [], [], []
            for s in batch:
                img, lp = to_input(s, shape)
                img, lp = augment_sample(img, lp, config.augment_policy, aug_rng)
                xs.append(img)
                mabs.append(lp.mab_mask)
                libs.append(lp.lib_mask)
            x = torch.as_tensor(np.stack(xs), dtype=torch.float32).unsqueeze(1)
            y_mab = torch.as_tensor(np.stack(mabs))
            y_lib = torch.as_tensor(np.stack(libs))
            opt.zero_grad()
            pred = model(x)
            loss, info = objective(pred, y_mab, y_lib, mode, state, weights=fixed)
            loss.backward()
            opt.step()
            info["train_loss"] = float(loss.detach())
            for k in sums:
                sums[k] += info[k]
            n_batches += 1
            steps.append({"epoch": epoch + 1, "step": len(steps) + 1, **info})
        row = {"epoch": epoch + 1, **{k: v / n_batches for k, v in sums.items()}}
        if mode is LossMode.ATDL and config.weight_update == "epoch":
            nxt = ScheduleState(min(epoch + 1, config.epochs - 1), config.epochs, config.adaptive_a)
            if nxt.adaptive:
                epoch_weights = atdl_weights(row["l_mab"], row["l_lib"], config.adaptive_a)
        row.update(_validate(model, val_inputs, shape))
        row["seconds"] = time.time() - t0
        history.append(row)
        score = row["val_dsc"] if not math.isnan(row["val_dsc"]) else -row["train_loss"]
        if score > best[0]:
            best = (score, epoch + 1, copy.deepcopy(model.state_dict()))
        log.info("%s epoch %d/%d loss %.4f val_dsc %.4f (%.1fs)", mode.value, epoch + 1,
                 config.epochs, row["train_loss"], row["val_dsc"], row["seconds"])

    model.load_state_dict(best[2])
    ckpt = save_checkpoint(model, out_dir, config, net_config, history, best[1])
    _write_csv(out_dir / LOG_FILE, history, LOG_COLUMNS)
    _write_csv(out_dir / STEP_LOG_FILE, steps,
               ("epoch", "step", "l_mab", "l_lib", "l_cvw", "alpha", "beta", "gamma", "train_loss"))
    return TrainOutcome(model, ckpt, history, best[1], best[0])


def save_checkpoint(model, out_dir, config: TrainConfig, net_config: NetConfig,
                    history: list[dict], best_epoch: int) -> Path:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    torch.save(model.state_dict(), out_dir / WEIGHTS_FILE)
    manifest = {
        "epoch": best_epoch,
        "epochs_run": len(history),
        "mode": config.mode,
        "artery": config.artery,
        "sdl": config.mode == "SDL",
        "seed": config.seed,
        "config_hash": config.digest(),
        "net_config": asdict(net_config),
        "train_config": json.loads(json.dumps(asdict(config), default=str)),
        "parameters": count_parameters(model),
        "loss_history": [{k: r[k] for k in ("epoch", "train_loss", "val_loss", "val_dsc")}
                         for r in history],
    }
    (out_dir / MANIFEST_FILE).write_text(json.dumps(manifest, indent=2, default=float) + "\n")
    return out_dir


def load_checkpoint(path) -> tuple[torch.nn.Module, dict]:
    path = Path(path)
    manifest_file = path / MANIFEST_FILE
    if not manifest_file.is_file():
        raise FormatError(f"no checkpoint manifest in {path}")
    manifest = json.loads(manifest_file.read_text())
    net_config = NetConfig(**manifest["net_config"])
    model = build_model(net_config, sdl=manifest.get("sdl", False))
    model.load_state_dict(torch.load(path / WEIGHTS_FILE, map_location="cpu", weights_only=True))
    model.eval()
    return model, manifest


# -- evaluation & matrix ------------------------------------------------------------

def evaluate_model(model, entries: list[CohortEntry], artery: str, tta: bool, out_dir,
                   provenance: Optional[dict] = None) -> dict:
    """Segment and score test volumes; writes metrics.csv and vwv.csv into `out_dir`."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    records, vwv_rows = [], []
    for e in entries:
        volume = load_volume(e.path)
        truth = load_labels(label_dir(e.path))
        wanted = [lp.slice_index for lp in truth]
        if artery == "ICA":
            rois = volume.slice_rois()
            wanted = [i for i in wanted if i in rois]
            truth = [lp for lp in truth if lp.slice_index in rois]
        result = segment_volume(model, volume, artery, tta=tta, slice_indices=wanted,
                                provenance=provenance)
        records.extend(evaluate_labels(result.labels, truth, volume.in_plane_spacing, e.volume_id))
        vwv_rows.append({"volume": e.volume_id, "vwv_manual": vwv(truth, volume.spacing),
                         "vwv_algorithm": vwv(result, volume.spacing)})
        result.save(out_dir / "predictions" / e.volume_id)
    write_records(records, out_dir / "metrics.csv")
    _write_csv(out_dir / "vwv.csv", vwv_rows, ("volume", "vwv_manual", "vwv_algorithm"))
    return {"records": records, "vwv": vwv_rows}


# setting name -> (trained model key, tta)
MATRIX_SETTINGS = {
    "SDL": ("SDL", False),
    "SDL+TTA": ("SDL", True),
    "DDL": ("DDL", False),
    "DDL+TTA": ("DDL", True),
    "TDL": ("TDL", False),
    "TDL+TTA": ("TDL", True),
    "ATDL": ("ATDL", False),
    "ATDL+TTA": ("ATDL", True),
    "ATDL+TTA-noreslice": ("ATDL-noreslice", True),
}


def run_matrix(base_config: TrainConfig, dataset, results_dir,
               net_config: NetConfig = NetConfig(), arteries=None) -> Path:
    """Train the five distinct models per artery and evaluate the nine settings.

    Layout: results/models/<artery>/<model>/, results/<setting>/<artery>/{metrics,vwv}.csv
    plus the summary tables and figures written by `report.write_matrix_report`.
    """
    from .report import write_matrix_report

    results_dir = Path(results_dir)
    results_dir.mkdir(parents=True, exist_ok=True)
    entries = scan_cohort(dataset)
    arteries = arteries or sorted({e.artery for e in entries})
    timing = {}
    for artery in arteries:
        subset = [e for e in entries if e.artery == artery]
        splits = split_cohort(subset, base_config.split_seed)
        models = {}
        for key in ("SDL", "DDL", "TDL", "ATDL", "ATDL-noreslice"):
            mode = key.split("-")[0]
            cfg = replace(base_config, mode=mode, artery=artery,
                          use_reslice_augment=(key != "ATDL-noreslice"))
            t0 = time.time()
            outcome = train(cfg, dataset, results_dir / "models" / artery / key, net_config, splits)
            timing[f"{artery}/{key}/train_s"] = time.time() - t0
            models[key] = outcome.model
        for setting, (key, tta) in MATRIX_SETTINGS.items():
            t0 = time.time()
            evaluate_model(models[key], splits["test"], artery, tta,
                           results_dir / setting / artery,
                           provenance={"setting": setting, "checkpoint": f"models/{artery}/{key}"})
            timing[f"{artery}/{setting}/eval_s"] = time.time() - t0
        (results_dir / f"split_{artery}.json").write_text(json.dumps(
            {k: [e.volume_id for e in v] for k, v in splits.items()}, indent=2) + "\n")
    (results_dir / "timing.json").write_text(json.dumps(timing, indent=2) + "\n")
    write_matrix_report(results_dir, list(MATRIX_SETTINGS), arteries)
    return results_dir
