"""Command-line entry point: ``carotidseg <subcommand> ...``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

from .config import RESULTS_ENV, ConfigError, load_config

log = logging.getLogger("carotidseg")


def _named_paths(items) -> dict[str, Path]:
    out = {}
    for item in items or []:
        name, sep, path = item.partition("=")
        if not sep:
            path, name = name, Path(name).parent.name or Path(name).stem
        out[name] = Path(path)
    return out


def cmd_config(args, cfg) -> int:
    print(json.dumps(cfg.to_dict(), indent=2))
    return 0


def cmd_phantom(args, cfg) -> int:
    from .phantom import generate_cohort

    spec = cfg.phantom
    artery = (args.artery or cfg.cohort.artery).upper()
    if artery == "ICA" and not spec.ica_roi:
        spec = replace(spec, ica_roi=True)
    out = Path(args.out or cfg.paths.cohort)
    entries = generate_cohort(args.n_volumes or cfg.cohort.n_volumes, spec,
                              cfg.cohort.seed if args.seed is None else args.seed, out, artery)
    print(f"wrote {len(entries)} volumes to {out}")
    return 0


def cmd_train(args, cfg) -> int:
    from .trainer import train

    tc = cfg.train
    if args.mode:
        tc = replace(tc, mode=args.mode.upper())
    if args.epochs:
        tc = replace(tc, epochs=args.epochs)
    if args.artery:
        tc = replace(tc, artery=args.artery.upper())
    if args.no_reslice:
        tc = replace(tc, use_reslice_augment=False)
    out = Path(args.out or cfg.results_root / "models" / tc.artery / tc.mode)
    outcome = train(tc, args.data or cfg.paths.cohort, out, cfg.net)
    print(f"best epoch {outcome.best_epoch} (val DSC {outcome.best_val_dsc:.4f}); checkpoint {out}")
    return 0


def cmd_matrix(args, cfg) -> int:
    from .trainer import run_matrix

    tc = cfg.train if not args.epochs else replace(cfg.train, epochs=args.epochs)
    arteries = [a.upper() for a in args.artery] if args.artery else None
    out = run_matrix(tc, args.data or cfg.paths.cohort, Path(args.results or cfg.results_root),
                     cfg.net, arteries)
    print(f"matrix results in {out}")
    return 0


def cmd_segment(args, cfg) -> int:
    from .infer import segment_volume
    from .trainer import load_checkpoint
    from .volume_io import load_volume

    model, manifest = load_checkpoint(args.checkpoint)
    volume = load_volume(args.volume)
    result = segment_volume(model, volume, args.artery.upper(), tta=args.tta,
                            keep_largest=args.keep_largest,
                            provenance={"checkpoint": str(args.checkpoint),
                                        "config_hash": manifest.get("config_hash"),
                                        "volume": str(args.volume)})
    result.save(args.out)
    print(f"segmented {len(result)} slices into {args.out}")
    return 0


def cmd_evaluate(args, cfg) -> int:
    from .metrics import evaluate_labels, write_records
    from .volume_io import load_labels, read_sidecar
    from .volumetry import volume_report, vwv

    if args.spacing:
        spacing = tuple(args.spacing)
    elif args.volume:
        meta = read_sidecar(args.volume)
        spacing = (*meta["in_plane_spacing_mm"], meta["slice_spacing_mm"])
    else:
        raise ConfigError("evaluate needs --volume or --spacing")
    pred = load_labels(args.pred, validate=False)
    truth = load_labels(args.labels)
    volume_id = args.volume_id or Path(args.pred).name
    records = evaluate_labels(pred, truth, spacing[:2], volume_id)
    out = Path(args.out)
    write_records(records, out)
    pred_idx = {lp.slice_index for lp in pred}
    truth_eval = [lp for lp in truth if lp.slice_index in pred_idx]
    pred_eval = [lp for lp in pred if lp.slice_index in {t.slice_index for t in truth_eval}]
    for lp in pred_eval:
        lp.lib_mask = lp.lib_mask & lp.mab_mask
    vwv_path = out.with_name(out.stem + "_vwv.csv")
    vwv_path.write_text("volume,vwv_manual,vwv_algorithm\n"
                        f"{volume_id},{vwv(truth_eval, spacing):.6f},{vwv(pred_eval, spacing):.6f}\n")
    volume_report(pred_eval, spacing).save(out.with_name("volumereport.json"))
    print(f"wrote {len(records)} rows to {out}")
    return 0


def cmd_stats(args, cfg) -> int:
    from .report import stats_report

    metrics = _named_paths(args.metrics)
    if not metrics and not args.vwv:
        raise ConfigError("stats needs --metrics and/or --vwv inputs")
    res = stats_report(metrics, args.out, vwv_file=args.vwv, artery=args.artery or "",
                       figures=not args.no_figures)
    for row in res["agreement"]:
        print("VWV agreement: r={pearson_r:.4f} bias={bias:.4f} loa=({loa_low:.4f}, {loa_high:.4f})"
              .format(**row))
    print(f"tables written to {args.out}")
    return 0


def cmd_plot(args, cfg) -> int:
    from .report import plot_bland_altman, plot_correlation, plot_loss_curves, read_vwv

    out = Path(args.out)
    made = []
    if args.vwv:
        _, manual, algo = read_vwv(args.vwv)
        if len(manual) < 3:
            raise ValueError(f"{args.vwv}: agreement plots need at least 3 volumes, got {len(manual)}")
        made.append(plot_correlation(manual, algo, out / "vwv_correlation.png"))
        made.append(plot_bland_altman(algo, manual, out / "vwv_bland_altman.png"))
    logs = _named_paths(args.log)
    if logs:
        made.append(plot_loss_curves(logs, out / "loss_curves.png"))
    if not made:
        raise ConfigError("plot needs --vwv and/or --log inputs")
    for p in made:
        print(p)
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="carotidseg",
                                description="Carotid MAB/LIB segmentation lab on vessel phantoms.")
    p.add_argument("-c", "--config", help="JSON run configuration (see `config dump`)")
    p.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = p.add_subparsers(dest="command", required=True, metavar="COMMAND")

    s = sub.add_parser("config", help="print the effective configuration with all defaults")
    s.add_argument("action", choices=["dump"], help="only `dump` is supported")
    s.set_defaults(func=cmd_config)

    s = sub.add_parser("phantom", help="generate a phantom cohort")
    s.add_argument("--out", help="destination directory (default: paths.cohort)")
    s.add_argument("--n-volumes", type=int, help="number of volumes (default: cohort.n_volumes)")
    s.add_argument("--seed", type=int, help="cohort seed (default: cohort.seed)")
    s.add_argument("--artery", choices=["cca", "ica"], help="artery type; ica writes ROI boxes")
    s.set_defaults(func=cmd_phantom)

    s = sub.add_parser("train", help="train one model")
    s.add_argument("--data", help="cohort directory (default: paths.cohort)")
    s.add_argument("--out", help="checkpoint directory")
    s.add_argument("--mode", choices=["sdl", "ddl", "tdl", "atdl"], help="loss mode")
    s.add_argument("--epochs", type=int, help="override train.epochs")
    s.add_argument("--artery", choices=["cca", "ica"], help="override train.artery")
    s.add_argument("--no-reslice", action="store_true", help="disable reslice augmentation")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("matrix", help="run the nine-setting experiment matrix")
    s.add_argument("--data", help="cohort directory (default: paths.cohort)")
    s.add_argument("--results", help=f"results root (default: ${RESULTS_ENV} or paths.results)")
    s.add_argument("--epochs", type=int, help="override train.epochs")
    s.add_argument("--artery", action="append", choices=["cca", "ica"],
                   help="restrict to an artery type (repeatable)")
    s.set_defaults(func=cmd_matrix)

    s = sub.add_parser("segment", help="segment one volume with a checkpoint")
    s.add_argument("--checkpoint", required=True, help="checkpoint directory")
    s.add_argument("--volume", required=True, help="volume directory")
    s.add_argument("--out", required=True, help="output directory for masks and result.json")
    s.add_argument("--artery", choices=["cca", "ica"], default="cca", help="artery type")
    s.add_argument("--tta", action="store_true", help="flip test-time augmentation with voting")
    s.add_argument("--keep-largest", action="store_true",
                   help="keep only the largest connected component per mask")
    s.set_defaults(func=cmd_segment)

    s = sub.add_parser("evaluate", help="score a prediction directory against labels")
    s.add_argument("--pred", required=True, help="predicted mask directory")
    s.add_argument("--labels", required=True, help="ground-truth mask directory")
    s.add_argument("--volume", help="volume directory providing spacings")
    s.add_argument("--spacing", type=float, nargs=3, metavar=("SX", "SY", "SZ"),
                   help="explicit spacings in mm")
    s.add_argument("--volume-id", help="volume name written to the CSV")
    s.add_argument("--out", required=True, help="metric CSV path")
    s.set_defaults(func=cmd_evaluate)

    s = sub.add_parser("stats", help="Pearson / Bland-Altman / Tukey tables from metric CSVs")
    s.add_argument("--metrics", action="append", metavar="NAME=CSV",
                   help="metric CSV for one setting (repeatable)")
    s.add_argument("--vwv", help="CSV with volume,vwv_manual,vwv_algorithm")
    s.add_argument("--artery", help="artery label for the tables")
    s.add_argument("--out", required=True, help="output directory")
    s.add_argument("--no-figures", action="store_true", help="skip figure rendering")
    s.set_defaults(func=cmd_stats)

    s = sub.add_parser("plot", help="emit correlation, Bland-Altman and loss-curve figures")
    s.add_argument("--vwv", help="CSV with volume,vwv_manual,vwv_algorithm")
    s.add_argument("--log", action="append", metavar="NAME=CSV", help="training log (repeatable)")
    s.add_argument("--out", required=True, help="output directory")
    s.set_defaults(func=cmd_plot)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config)
    except ConfigError as exc:
        parser.print_usage(sys.stderr)
        print(f"carotidseg: error: {exc}", file=sys.stderr)
        return 2
    try:
        return args.func(args, cfg)
    except ConfigError as exc:
        print(f"carotidseg: error: {exc}", file=sys.stderr)
        return 2
    except (OSError, ValueError, KeyError, RuntimeError) as exc:
        print(f"carotidseg: {args.command} failed: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
