"""Command-line entry point.

Exit codes: 0 success, 1 runtime failure, 2 configuration or input error.
"""
import argparse
import json
import logging
import math
import os
import sys
from dataclasses import replace

import numpy as np

from . import checkpoint as ckpt
from .config import LABEL_FRACTIONS, build_dataset, load_config
from .datasets import SyntheticSpec, generate_synthetic, rul_truth, write_csv
from .errors import ConfigurationError, HepaError, LoadError
from .metrics import h_auroc, metric_report, per_horizon_auroc
from .pretrain import TrainingSnapshot, pretrain, write_history
from .surface import read_surface, write_surface
from .survival import evaluate_surface, predictor_finetune
from .theory import StoredPretrain, append_sweep_point, read_sweep_csv, run_sweep

log = logging.getLogger("hepa")

EXIT_OK, EXIT_RUNTIME, EXIT_CONFIG = 0, 1, 2


def _dump_json(path, obj):
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _fmt(x):
    return "" if x is None or (isinstance(x, float) and math.isnan(x)) else f"{x:.9g}"


def _out_dir(args, cfg=None):
    out = args.out or (cfg.out_dir if cfg is not None else ".")
    os.makedirs(out, exist_ok=True)
    return out


def _seeds(text):
    return [int(s) for s in text.split(",") if s.strip()]


# -- per-horizon artifacts ---------------------------------------------------

def write_per_horizon_csv(path, rows):
    with open(path, "w") as fh:
        fh.write("dt,auroc,prevalence,n\n")
        for r in rows:
            fh.write(f"{r['dt']},{_fmt(r['auroc'])},{_fmt(r['prevalence'])},{r['n']}\n")


def per_horizon_svg(rows, width=640, height=320, pad=40):
    """Per-horizon AUROC polyline; skipped horizons break the line."""
    K = max(len(rows), 2)

    def xy(dt, a):
        x = pad + (dt - 1) / (K - 1) * (width - 2 * pad)
        y = height - pad - a * (height - 2 * pad)
        return f"{x:.2f},{y:.2f}"

    runs, cur = [], []
    for r in rows:
        if r["auroc"] is None:
            if cur:
                runs.append(cur)
            cur = []
        else:
            cur.append(xy(r["dt"], r["auroc"]))
    if cur:
        runs.append(cur)
    chance = f"{xy(1, 0.5)} {xy(K, 0.5)}"
    lines = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
             f'viewBox="0 0 {width} {height}">',
             f'<rect x="{pad}" y="{pad}" width="{width - 2 * pad}" height="{height - 2 * pad}" '
             'fill="none" stroke="#999"/>',
             f'<polyline points="{chance}" fill="none" stroke="#bbb" stroke-dasharray="4 4"/>']
    lines += [f'<polyline points="{" ".join(run)}" fill="none" stroke="#1f77b4" stroke-width="1.5"/>'
              for run in runs]
    lines += [f'<text x="{width / 2:.0f}" y="{height - 8}" text-anchor="middle" font-size="12">horizon dt</text>',
              f'<text x="12" y="{height / 2:.0f}" font-size="12" transform="rotate(-90 12 {height / 2:.0f})" '
              'text-anchor="middle">AUROC</text>',
              "</svg>"]
    return "\n".join(lines) + "\n"


def emit_report(out, surface, threshold=0.5, rul_true=None, prefix=""):
    report = metric_report(surface, threshold, rul_true)
    rows = per_horizon_auroc(surface)
    _dump_json(os.path.join(out, f"{prefix}report.json"), report)
    write_per_horizon_csv(os.path.join(out, f"{prefix}per_horizon.csv"), rows)
    with open(os.path.join(out, f"{prefix}per_horizon.svg"), "w") as fh:
        fh.write(per_horizon_svg(rows))
    return report


# -- commands ----------------------------------------------------------------

def save_pretrain_outputs(out, result, cfg_dict):
    digest = ckpt.config_hash(cfg_dict)
    for snap in result.snapshots:
        name = "best.ckpt" if snap.label == "best" else f"snap_e{snap.epoch}.ckpt"
        model = result.model
        ckpt.save_checkpoint(os.path.join(out, name), snap.state,
                             {"kind": "hepa", "model": model.config, "config_hash": digest,
                              "epoch": snap.epoch, "epsilon": snap.epsilon, "label": snap.label})
    write_history(os.path.join(out, "pretrain_loss.csv"), result.history)


def load_snapshots(out):
    """Snapshots written by :func:`save_pretrain_outputs`, or None when incomplete."""
    if not os.path.exists(os.path.join(out, "best.ckpt")):
        return None
    snaps, model_cfg = [], None
    for name in sorted(os.listdir(out)):
        if name.endswith(".ckpt") and (name == "best.ckpt" or name.startswith("snap_e")):
            tensors, meta = ckpt.load_checkpoint(os.path.join(out, name))
            model_cfg = meta["model"]
            snaps.append(TrainingSnapshot(meta["epoch"], meta["epsilon"], tensors, meta["label"]))
    snaps.sort(key=lambda s: (s.label == "best", s.epoch))
    return StoredPretrain(snaps, model_cfg)


def cmd_pretrain(args):
    cfg = load_config(args.config)
    pcfg = cfg.pretrain if args.seed is None else replace(cfg.pretrain, seed=args.seed)
    dataset = build_dataset(cfg.dataset, cfg.base_dir)
    out = _out_dir(args, cfg)
    result = pretrain(dataset, pcfg)
    save_pretrain_outputs(out, result, {"dataset": cfg.dataset, "pretrain": pcfg.to_dict()})
    print(f"best epoch {result.best_epoch} val_l1 {result.snapshots[-1].epsilon:.6g} -> {out}")
    return EXIT_OK


def cmd_finetune(args):
    cfg = load_config(args.config)
    fcfg = cfg.finetune
    overrides = {k: v for k, v in (("seed", args.seed), ("label_fraction", args.label_fraction),
                                   ("predictor_init", args.predictor_init), ("mode", args.mode))
                 if v is not None}
    fcfg = replace(fcfg, **overrides)
    model, meta = ckpt.load_model(args.checkpoint)
    dataset = build_dataset(cfg.dataset, cfg.base_dir)
    if dataset.d_in != model.config["d_in"]:
        raise ConfigurationError(f"checkpoint expects d_in={model.config['d_in']}, dataset has {dataset.d_in}")
    out = _out_dir(args, cfg)
    result = predictor_finetune(model, dataset, fcfg)
    ckpt.save_event_model(os.path.join(out, "finetuned.ckpt"), result.event_model,
                          config_hash=ckpt.config_hash(fcfg.to_dict()), epoch=result.best_epoch)
    surface, _ = evaluate_surface(model, result.event_model, dataset, seed=fcfg.seed)
    write_surface(os.path.join(out, "surface.csv"), surface)
    rul = _rul_for(dataset, surface)
    report = emit_report(out, surface, args.threshold, rul)
    report.update({"n_labeled_episodes": result.n_labeled_episodes,
                   "labeled_episodes": result.labeled_episode_ids,
                   "trainable_parameters": result.trainable_parameters,
                   "best_epoch": result.best_epoch, "w_plus": result.w_plus,
                   "monitor": result.val_monitor, "finetune": fcfg.to_dict()})
    _dump_json(os.path.join(out, "report.json"), report)
    print(f"h_auroc {_fmt(report['h_auroc']) or 'undefined'} labeled episodes "
          f"{result.n_labeled_episodes} -> {out}")
    return EXIT_OK


def _rul_for(dataset, surface):
    if not dataset.spec.lifecycle:
        return None
    by_id = {e.id: e for e in dataset.episodes}
    rul = np.empty(surface.n_rows)
    for ep_id in np.unique(surface.episode):
        rows = np.flatnonzero(surface.episode == ep_id)
        rul[rows] = rul_truth(by_id[ep_id], surface.t[rows], dataset.spec.rul_cap)
    return rul if np.all(np.isfinite(rul)) else None


def cmd_evaluate(args):
    surface = read_surface(args.surface)
    out = _out_dir(args)
    report = emit_report(out, surface, args.threshold)
    print(f"h_auroc {_fmt(report['h_auroc']) or 'undefined'} over {report['n_valid_horizons']} horizons -> {out}")
    return EXIT_OK


def cmd_sweep(args):
    cfg = load_config(args.config)
    seeds = _seeds(args.seeds) if args.seeds else cfg.seeds
    dataset = build_dataset(cfg.dataset, cfg.base_dir)
    out = _out_dir(args, cfg)
    csv_path = os.path.join(out, "sweep.csv")
    existing = read_sweep_csv(csv_path)

    def source(seed):
        seed_dir = os.path.join(out, f"seed{seed}")

        def get():
            stored = load_snapshots(seed_dir)
            if stored is not None:
                return stored
            os.makedirs(seed_dir, exist_ok=True)
            result = pretrain(dataset, replace(cfg.pretrain, seed=seed))
            save_pretrain_outputs(seed_dir, result, {"dataset": cfg.dataset, "pretrain": cfg.pretrain.to_dict()})
            return result
        return get

    report = run_sweep(dataset, cfg.pretrain, cfg.finetune, seeds, existing=existing,
                       pretrained={s: source(s) for s in seeds},
                       on_point=lambda p: append_sweep_point(csv_path, p), permutation=args.permutation)
    _dump_json(os.path.join(out, "sweep_report.json"), report.to_dict())
    print(f"spearman rho {_fmt(report.spearman_rho)} p {_fmt(report.p_value)} n {report.n} -> {out}")
    return EXIT_OK


def cmd_labelcurve(args):
    cfg = load_config(args.config)
    seeds = _seeds(args.seeds) if args.seeds else cfg.seeds
    fractions = [float(f) for f in args.fractions.split(",")] if args.fractions else cfg.fractions
    dataset = build_dataset(cfg.dataset, cfg.base_dir)
    out = _out_dir(args, cfg)
    curve = label_curve(dataset, cfg.pretrain, cfg.finetune, seeds, fractions,
                        checkpoint=args.checkpoint)
    write_label_curve(os.path.join(out, "labelcurve.csv"), curve)
    for row in summarize_label_curve(curve):
        print(f"fraction {row['fraction']:g} h_auroc {_fmt(row['h_auroc']) or 'absent'} "
              f"retention {_fmt(row['retention']) or 'absent'}")
    return EXIT_OK


def label_curve(dataset, pretrain_config, finetune_config, seeds, fractions=LABEL_FRACTIONS,
                checkpoint=None, pretrained=None):
    """Rows ``{fraction, seed, n_labeled, h_auroc, retention}``; retention is relative to the
    same seed's full-label score. A fraction that cannot be trained is recorded as absent."""
    rows = []
    for seed in seeds:
        if pretrained is not None and seed in pretrained:
            model = pretrained[seed]
        elif checkpoint is not None:
            model, _ = ckpt.load_model(checkpoint)
        else:
            model = pretrain(dataset, replace(pretrain_config, seed=seed)).model
        full = None
        for frac in sorted(set(fractions) | {1.0}, reverse=True):
            fcfg = replace(finetune_config, seed=seed, label_fraction=frac)
            try:
                res = predictor_finetune(model, dataset, fcfg)
                surface, _ = evaluate_surface(model, res.event_model, dataset, seed=seed)
                value, n_lab = h_auroc(surface)[0], res.n_labeled_episodes
            except ConfigurationError as exc:
                log.warning("fraction %g seed %d absent: %s", frac, seed, exc)
                value, n_lab = None, 0
            if frac == 1.0:
                full = value
            if frac in fractions:
                ret = value / full if value is not None and full else None
                rows.append({"fraction": frac, "seed": seed, "n_labeled": n_lab, "h_auroc": value,
                             "retention": ret})
    return rows


def summarize_label_curve(rows):
    out = []
    for frac in sorted({r["fraction"] for r in rows}, reverse=True):
        sel = [r for r in rows if r["fraction"] == frac]
        h = [r["h_auroc"] for r in sel if r["h_auroc"] is not None]
        ret = [r["retention"] for r in sel if r["retention"] is not None]
        out.append({"fraction": frac, "h_auroc": float(np.mean(h)) if h else None,
                    "retention": float(np.mean(ret)) if ret else None, "n_seeds": len(h)})
    return out


def write_label_curve(path, rows):
    with open(path, "w") as fh:
        fh.write("fraction,seed,n_labeled,h_auroc,retention\n")
        for r in rows:
            fh.write(f"{r['fraction']:.9g},{r['seed']},{r['n_labeled']},{_fmt(r['h_auroc'])},"
                     f"{_fmt(r['retention'])}\n")
        for r in summarize_label_curve(rows):
            fh.write(f"{r['fraction']:.9g},mean,,{_fmt(r['h_auroc'])},{_fmt(r['retention'])}\n")


def cmd_gen_synthetic(args):
    syn = SyntheticSpec(n_episodes=args.n_episodes, S=args.channels, T=args.length, beta=args.beta,
                        noise=args.noise, lifecycle=args.lifecycle, constant=args.constant, seed=args.seed)
    episodes, channels = generate_synthetic(syn)
    write_csv(args.out, episodes, channels)
    n_events = sum(e.event_times.size for e in episodes)
    print(f"{len(episodes)} episodes, {n_events} events -> {args.out}")
    return EXIT_OK


CMAPSS_COLUMNS = ["op1", "op2", "op3"] + [f"s{i}" for i in range(1, 22)]


def convert_cmapss(src, dst):
    """Run-to-failure C-MAPSS text (unit, cycle, 3 settings, 21 sensors) to the CSV schema.

    Each engine fails at its last recorded cycle. Splits are left empty so the
    ``DatasetSpec.test_fraction`` decides them.
    """
    try:
        raw = np.loadtxt(src, ndmin=2)
    except OSError as exc:
        raise ConfigurationError(f"cannot read {src}: {exc.strerror or exc}") from None
    except ValueError as exc:
        raise LoadError(f"{src}: {exc}") from None
    if raw.shape[1] < 26:
        raise LoadError(f"{src}: expected 26 columns, got {raw.shape[1]}")
    with open(dst, "w") as fh:
        fh.write(",".join(["episode_id", "time", *CMAPSS_COLUMNS, "event"]) + "\n")
        units = raw[:, 0].astype(int)
        n = 0
        for u in np.unique(units):
            rows = raw[units == u]
            rows = rows[np.argsort(rows[:, 1])]
            T = rows.shape[0]
            for t in range(T):
                vals = ",".join(f"{v:.9g}" for v in rows[t, 2:26])
                fh.write(f"unit{u:03d},{t},{vals},{int(t == T - 1)}\n")
            n += 1
    return n


def cmd_convert_cmapss(args):
    n = convert_cmapss(args.input, args.out)
    print(f"{n} engines -> {args.out}")
    return EXIT_OK


# -- parser --------------------------------------------------------------------

def build_parser():
    p = argparse.ArgumentParser(prog="hepa", description="Horizon-conditioned event prediction")
    p.add_argument("-v", "--verbose", action="store_true", help="log training progress")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("pretrain", help="self-supervised pretraining")
    s.add_argument("--config", required=True)
    s.add_argument("--seed", type=int)
    s.add_argument("--out")
    s.set_defaults(func=cmd_pretrain)

    s = sub.add_parser("finetune", help="train the event model from a pretrained checkpoint")
    s.add_argument("--config", required=True)
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--seed", type=int)
    s.add_argument("--label-fraction", type=float)
    s.add_argument("--predictor-init", choices=["pretrained", "random"])
    s.add_argument("--mode", choices=["predft", "probe", "multiprobe"])
    s.add_argument("--threshold", type=float, default=0.5)
    s.add_argument("--out")
    s.set_defaults(func=cmd_finetune)

    s = sub.add_parser("evaluate", help="metrics for a probability surface file")
    s.add_argument("surface")
    s.add_argument("--threshold", type=float, default=0.5)
    s.add_argument("--out")
    s.set_defaults(func=cmd_evaluate)

    s = sub.add_parser("sweep", help="snapshot sweep and rank correlation")
    s.add_argument("--config", required=True)
    s.add_argument("--seeds")
    s.add_argument("--permutation", action="store_true", help="permutation p-value")
    s.add_argument("--out")
    s.set_defaults(func=cmd_sweep)

    s = sub.add_parser("labelcurve", help="h-AUROC versus labelled fraction")
    s.add_argument("--config", required=True)
    s.add_argument("--checkpoint", help="reuse one pretrained model for every seed")
    s.add_argument("--seeds")
    s.add_argument("--fractions")
    s.add_argument("--out")
    s.set_defaults(func=cmd_labelcurve)

    s = sub.add_parser("gen-synthetic", help="write a synthetic dataset as CSV")
    s.add_argument("--out", required=True)
    s.add_argument("--beta", type=float, default=2.0)
    s.add_argument("--noise", type=float, default=0.1)
    s.add_argument("--n-episodes", type=int, default=200)
    s.add_argument("--channels", type=int, default=5)
    s.add_argument("--length", type=int, default=600)
    s.add_argument("--lifecycle", action="store_true")
    s.add_argument("--constant", action="store_true")
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_gen_synthetic)

    s = sub.add_parser("convert-cmapss", help="convert a C-MAPSS train_FD00x.txt file to CSV")
    s.add_argument("input")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_convert_cmapss)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ConfigurationError, LoadError, OSError) as exc:
        print(f"hepa: error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except HepaError as exc:
        print(f"hepa: error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
