"""Result tables (CSV / Markdown) and static figures for evaluation runs."""

from __future__ import annotations

import csv
import logging
from pathlib import Path
from typing import Mapping, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .metrics import EvalRecord, per_volume_means, read_records  # noqa: E402
from .stats import bland_altman, pearson, tukey_hsd  # noqa: E402

log = logging.getLogger(__name__)

BOUNDARIES = ("MAB", "LIB")


def read_vwv(path) -> tuple[list[str], np.ndarray, np.ndarray]:
    """(volumes, manual, algorithm) from a `volume,vwv_manual,vwv_algorithm` CSV."""
    vols, manual, algo = [], [], []
    with Path(path).open(newline="") as fh:
        for row in csv.DictReader(fh):
            vols.append(row["volume"])
            manual.append(float(row["vwv_manual"]))
            algo.append(float(row["vwv_algorithm"]))
    return vols, np.asarray(manual), np.asarray(algo)


def read_log(path) -> dict[str, np.ndarray]:
    with Path(path).open(newline="") as fh:
        rows = list(csv.DictReader(fh))
    return {k: np.array([float(r[k]) if r[k] not in ("", "nan") else np.nan for r in rows])
            for k in rows[0]} if rows else {}


# -- figures -------------------------------------------------------------------

def _finish(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def plot_correlation(manual, algorithm, path, units: str = "mm$^3$") -> Path:
    manual = np.asarray(manual, dtype=float)
    algorithm = np.asarray(algorithm, dtype=float)
    fig, ax = plt.subplots(figsize=(4.5, 4.5))
    ax.scatter(manual, algorithm, s=18, color="C0")
    lo = float(min(manual.min(), algorithm.min()))
    hi = float(max(manual.max(), algorithm.max()))
    ax.plot([lo, hi], [lo, hi], "k--", lw=0.8, label="identity")
    if len(manual) >= 3 and np.ptp(manual) > 0 and np.ptp(algorithm) > 0:
        slope, intercept = np.polyfit(manual, algorithm, 1)
        r, p = pearson(manual, algorithm)
        xs = np.array([lo, hi])
        ax.plot(xs, slope * xs + intercept, color="C3", lw=1,
                label=f"fit, r={r:.3f} (p={p:.2g})")
    ax.set_xlabel(f"manual VWV ({units})")
    ax.set_ylabel(f"algorithm VWV ({units})")
    ax.legend(frameon=False, fontsize=8)
    return _finish(fig, path)


def plot_bland_altman(algorithm, manual, path, units: str = "mm$^3$") -> Path:
    algorithm = np.asarray(algorithm, dtype=float)
    manual = np.asarray(manual, dtype=float)
    ba = bland_altman(algorithm, manual)
    mean = 0.5 * (algorithm + manual)
    fig, ax = plt.subplots(figsize=(5, 4))
    ax.scatter(mean, algorithm - manual, s=18, color="C0")
    ax.axhline(ba.bias, color="k", lw=1, label=f"bias {ba.bias:.3g}")
    for v in (ba.loa_low, ba.loa_high):
        ax.axhline(v, color="C3", ls="--", lw=0.8)
    ax.text(1.0, ba.loa_high, f" +1.96 SD {ba.loa_high:.3g}", transform=ax.get_yaxis_transform(),
            va="bottom", ha="right", fontsize=7)
    ax.text(1.0, ba.loa_low, f" -1.96 SD {ba.loa_low:.3g}", transform=ax.get_yaxis_transform(),
            va="top", ha="right", fontsize=7)
    ax.set_xlabel(f"mean of algorithm and manual VWV ({units})")
    ax.set_ylabel(f"algorithm - manual ({units})")
    ax.legend(frameon=False, fontsize=8, loc="upper left")
    return _finish(fig, path)


def plot_loss_curves(logs: Mapping[str, str | Path], path) -> Path:
    """Training/validation loss and ATDL weights per epoch for each named log."""
    fig, axes = plt.subplots(1, 2, figsize=(9, 3.6))
    for i, (name, log_path) in enumerate(logs.items()):
        data = read_log(log_path)
        if not data:
            continue
        c = f"C{i % 10}"
        axes[0].plot(data["epoch"], data["train_loss"], color=c, label=f"{name} train")
        if np.isfinite(data["val_loss"]).any():
            axes[0].plot(data["epoch"], data["val_loss"], color=c, ls="--", label=f"{name} val")
        if np.isfinite(data["gamma"]).any():
            axes[1].plot(data["epoch"], data["alpha"], color=c, ls=":")
            axes[1].plot(data["epoch"], data["beta"], color=c, ls="-.")
            axes[1].plot(data["epoch"], data["gamma"], color=c, label=f"{name} gamma")
    axes[0].set_xlabel("epoch")
    axes[0].set_ylabel("loss")
    axes[0].legend(frameon=False, fontsize=7)
    axes[1].set_xlabel("epoch")
    axes[1].set_ylabel("weight (alpha dotted, beta dash-dot)")
    axes[1].set_ylim(0, 1)
    axes[1].legend(frameon=False, fontsize=7)
    return _finish(fig, path)


# -- tables --------------------------------------------------------------------

def _mean_sd(values) -> tuple[float, float]:
    v = np.asarray(values, dtype=float)
    v = v[np.isfinite(v)]
    if v.size == 0:
        return float("nan"), float("nan")
    return float(v.mean()), float(v.std(ddof=1)) if v.size > 1 else 0.0


def summarize(records: Sequence[EvalRecord], boundary: str) -> dict:
    rs = [r for r in records if r.boundary == boundary]
    out = {"n_slices": len(rs)}
    for metric in ("dsc", "mad", "maxd"):
        out[f"{metric}_mean"], out[f"{metric}_sd"] = _mean_sd([getattr(r, metric) for r in rs])
    return out


def write_table(path, rows: list[dict], columns: Sequence[str]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(columns), extrasaction="ignore")
        w.writeheader()
        for row in rows:
            w.writerow({k: (f"{v:.6g}" if isinstance(v, float) else v) for k, v in row.items()})
    return path


def tukey_rows(records_by_setting: Mapping[str, Sequence[EvalRecord]], boundary: str,
               metric: str = "dsc") -> list[dict]:
    groups = {s: list(per_volume_means(recs, boundary, metric).values())
              for s, recs in records_by_setting.items()}
    groups = {s: v for s, v in groups.items() if len(v) >= 2}
    if len(groups) < 2:
        return []
    res = tukey_hsd(groups)
    return [{"boundary": boundary, "group1": r.group1, "group2": r.group2,
             "mean_diff": r.mean_diff, "q_statistic": r.q_statistic, "p_value": r.p_value}
            for r in res.rows]


def agreement_rows(manual, algorithm, label: str) -> dict:
    row = {"comparison": label, "n": len(manual)}
    try:
        row["pearson_r"], row["pearson_p"] = pearson(algorithm, manual)
    except ValueError as exc:
        log.warning("pearson unavailable for %s: %s", label, exc)
        row["pearson_r"] = row["pearson_p"] = float("nan")
    nan = float("nan")
    row.update(bias=nan, sd=nan, loa_low=nan, loa_high=nan)
    if len(manual) >= 3:
        ba = bland_altman(algorithm, manual)
        row.update(bias=ba.bias, sd=ba.sd, loa_low=ba.loa_low, loa_high=ba.loa_high)
    return row


AGREEMENT_COLUMNS = ("comparison", "n", "pearson_r", "pearson_p", "bias", "sd", "loa_low", "loa_high")
TUKEY_COLUMNS = ("boundary", "group1", "group2", "mean_diff", "q_statistic", "p_value")
SUMMARY_COLUMNS = ("artery", "setting", "boundary", "n_slices", "dsc_mean", "dsc_sd",
                   "mad_mean", "mad_sd", "maxd_mean", "maxd_sd")


def _pct(m, s) -> str:
    return f"{100 * m:.1f} ± {100 * s:.1f}" if np.isfinite(m) else "n/a"


def _mm(m, s) -> str:
    return f"{m:.3f} ± {s:.3f}" if np.isfinite(m) else "n/a"


def markdown_summary(summary_rows: list[dict], tukey: list[dict], agreement: list[dict],
                     title: str = "Segmentation results") -> str:
    lines = [f"# {title}", ""]
    for artery in dict.fromkeys(r["artery"] for r in summary_rows):
        lines += [f"## {artery}", "",
                  "| setting | MAB DSC (%) | LIB DSC (%) | MAB MAD (mm) | LIB MAD (mm) "
                  "| MAB MAXD (mm) | LIB MAXD (mm) |",
                  "|---|---|---|---|---|---|---|"]
        rows = [r for r in summary_rows if r["artery"] == artery]
        for setting in dict.fromkeys(r["setting"] for r in rows):
            by_b = {r["boundary"]: r for r in rows if r["setting"] == setting}
            mab, lib = by_b.get("MAB", {}), by_b.get("LIB", {})
            g = lambda d, k: d.get(k, float("nan"))  # noqa: E731
            lines.append(
                f"| {setting} | {_pct(g(mab, 'dsc_mean'), g(mab, 'dsc_sd'))} "
                f"| {_pct(g(lib, 'dsc_mean'), g(lib, 'dsc_sd'))} "
                f"| {_mm(g(mab, 'mad_mean'), g(mab, 'mad_sd'))} "
                f"| {_mm(g(lib, 'mad_mean'), g(lib, 'mad_sd'))} "
                f"| {_mm(g(mab, 'maxd_mean'), g(mab, 'maxd_sd'))} "
                f"| {_mm(g(lib, 'maxd_mean'), g(lib, 'maxd_sd'))} |")
        lines.append("")
    if tukey:
        lines += ["## Tukey HSD on per-volume mean DSC", "",
                  "| artery | boundary | group 1 | group 2 | mean diff | q | p |",
                  "|---|---|---|---|---|---|---|"]
        for r in tukey:
            lines.append(f"| {r.get('artery', '')} | {r['boundary']} | {r['group1']} | {r['group2']} "
                         f"| {r['mean_diff']:.4f} | {r['q_statistic']:.3f} | {r['p_value']:.4f} |")
        lines.append("")
    if agreement:
        lines += ["## VWV agreement (algorithm vs manual)", "",
                  "| comparison | n | r | p | bias | LoA low | LoA high |",
                  "|---|---|---|---|---|---|---|"]
        for r in agreement:
            lines.append(f"| {r['comparison']} | {r['n']} | {r.get('pearson_r', float('nan')):.4f} "
                         f"| {r.get('pearson_p', float('nan')):.3g} | {r.get('bias', float('nan')):.4f} "
                         f"| {r.get('loa_low', float('nan')):.4f} | {r.get('loa_high', float('nan')):.4f} |")
        lines.append("")
    return "\n".join(lines)


def stats_report(metric_files: Mapping[str, str | Path], out_dir, vwv_file=None,
                 artery: str = "", figures: bool = True) -> dict:
    """Summary, Tukey and VWV agreement tables (plus figures) from metric CSVs."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    records = {name: read_records(p) for name, p in metric_files.items()}
    summary = [{"artery": artery, "setting": s, "boundary": b, **summarize(recs, b)}
               for s, recs in records.items() for b in BOUNDARIES]
    tukey = [dict(row, artery=artery) for b in BOUNDARIES for row in tukey_rows(records, b)]
    agreement = []
    written = {"summary": write_table(out_dir / "summary.csv", summary, SUMMARY_COLUMNS)}
    if tukey:
        written["tukey"] = write_table(out_dir / "tukey.csv", tukey, ("artery",) + TUKEY_COLUMNS)
    if vwv_file is not None:
        _, manual, algo = read_vwv(vwv_file)
        agreement.append(agreement_rows(manual, algo, Path(vwv_file).stem))
        written["agreement"] = write_table(out_dir / "agreement.csv", agreement, AGREEMENT_COLUMNS)
        if figures and len(manual) >= 3:
            written["correlation_fig"] = plot_correlation(manual, algo, out_dir / "vwv_correlation.png")
            written["bland_altman_fig"] = plot_bland_altman(algo, manual, out_dir / "vwv_bland_altman.png")
    md = markdown_summary(summary, tukey, agreement)
    (out_dir / "summary.md").write_text(md)
    written["markdown"] = out_dir / "summary.md"
    return {"summary": summary, "tukey": tukey, "agreement": agreement, "files": written}


def write_matrix_report(results_dir, settings: Sequence[str], arteries: Sequence[str],
                        agreement_setting: str = "ATDL+TTA") -> dict:
    results_dir = Path(results_dir)
    summary, tukey, agreement = [], [], []
    for artery in arteries:
        records = {}
        for s in settings:
            f = results_dir / s / artery / "metrics.csv"
            if f.is_file():
                records[s] = read_records(f)
        summary += [{"artery": artery, "setting": s, "boundary": b, **summarize(recs, b)}
                    for s, recs in records.items() for b in BOUNDARIES]
        tukey += [dict(row, artery=artery) for b in BOUNDARIES for row in tukey_rows(records, b)]
        vwv_file = results_dir / agreement_setting / artery / "vwv.csv"
        if vwv_file.is_file():
            _, manual, algo = read_vwv(vwv_file)
            agreement.append(agreement_rows(manual, algo, f"{artery} {agreement_setting}"))
            if len(manual) >= 3:
                plot_correlation(manual, algo, results_dir / "figures" / f"vwv_correlation_{artery}.png")
                plot_bland_altman(algo, manual, results_dir / "figures" / f"vwv_bland_altman_{artery}.png")
        logs = {p.name: p / "training_log.csv"
                for p in sorted((results_dir / "models" / artery).glob("*"))
                if (p / "training_log.csv").is_file()}
        if logs:
            plot_loss_curves(logs, results_dir / "figures" / f"loss_curves_{artery}.png")
    write_table(results_dir / "summary.csv", summary, SUMMARY_COLUMNS)
    write_table(results_dir / "tukey.csv", tukey, ("artery",) + TUKEY_COLUMNS)
    write_table(results_dir / "agreement.csv", agreement, AGREEMENT_COLUMNS)
    (results_dir / "summary.md").write_text(markdown_summary(summary, tukey, agreement,
                                                             "Experiment matrix"))
    return {"summary": summary, "tukey": tukey, "agreement": agreement}
