"""``diva`` command line: gen-data, train, eval, ablate, spectrum.

Exit codes: 0 ok, 2 config error, 3 I/O error, 4 training divergence,
5 checkpoint/data incompatibility.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .checkpoint import CheckpointError, IncompatibleError, check_data, load_checkpoint, model_from_checkpoint
from .checkpoint import restore_trainer, save_checkpoint
from .config import ConfigError, RunConfig, from_dict, load_run_config
from .data import Dataset, FormatError, export_csv, generate_synthetic, import_csv, load_dataset, save_dataset
from .evaluate import evaluate, singular_spectrum, spectral_decay
from .mining import BatchSpecError
from .model import ensemble_embed, embed_all
from .sweep import METRIC_KEYS, default_cells, parse_tasks, run_sweep, summarize, write_rows
from .trainer import DivergenceError, Trainer

EXIT_OK, EXIT_CONFIG, EXIT_IO, EXIT_DIVERGED, EXIT_INCOMPATIBLE = 0, 2, 3, 4, 5

logger = logging.getLogger("diva")


class CliError(Exception):
    def __init__(self, message: str, code: int):
        self.code = code
        super().__init__(message)


def _read_config(path) -> RunConfig:
    if path is None:
        return from_dict(RunConfig, {})
    try:
        return load_run_config(path)
    except OSError as exc:
        raise CliError(f"cannot read config {path}: {exc.strerror or exc}", EXIT_IO) from exc


def _load_data(path) -> Dataset:
    try:
        if str(path).endswith(".csv"):
            return import_csv(path)
        return load_dataset(path)
    except OSError as exc:
        raise CliError(f"cannot read data {path}: {exc.strerror or exc}", EXIT_IO) from exc
    except FormatError as exc:
        raise CliError(f"{path}: {exc}", EXIT_IO) from exc
    except ValueError as exc:
        raise CliError(f"{path}: {exc}", EXIT_CONFIG) from exc


def _load_ckpt(path):
    try:
        return load_checkpoint(path)
    except OSError as exc:
        raise CliError(f"cannot read checkpoint {path}: {exc.strerror or exc}", EXIT_IO) from exc
    except (CheckpointError, KeyError) as exc:
        raise CliError(f"{path}: corrupt checkpoint ({exc})", EXIT_IO) from exc


def _write_json(path, obj) -> None:
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _finite_json(obj):
    # strict JSON has no NaN/Infinity literals
    if isinstance(obj, dict):
        return {k: _finite_json(v) for k, v in obj.items()}
    if isinstance(obj, float) and not np.isfinite(obj):
        return str(obj)
    return obj


def _outdir(path) -> Path:
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    return out


# ---------------------------------------------------------------- commands


def cmd_gen_data(args) -> int:
    cfg = _read_config(args.config)
    ds = generate_synthetic(cfg.synth)
    out = Path(args.out)
    if out.parent != Path(""):
        out.parent.mkdir(parents=True, exist_ok=True)
    if out.suffix == ".csv":
        export_csv(ds, out)
    else:
        save_dataset(ds, out)
    n_train, n_test = len(ds.train_idx), len(ds.test_idx)
    print(f"wrote {out}: {ds.n_total} samples x {ds.dim} features, {ds.n_classes} classes "
          f"(train {n_train} / test {n_test})")
    return EXIT_OK


def _apply_overrides(train_cfg, args):
    if args.tasks is not None:
        try:
            train_cfg.tasks = parse_tasks(args.tasks)
        except ValueError as exc:
            raise CliError(f"--tasks: {exc}", EXIT_CONFIG) from exc
    if args.seed is not None:
        train_cfg.seed = args.seed
    try:
        train_cfg.validate(require_disc=True)
    except ValueError as exc:
        raise CliError(f"config: {exc}", EXIT_CONFIG) from exc
    return train_cfg


def cmd_train(args) -> int:
    ds = _load_data(args.data)
    if args.resume:
        ckpt = _load_ckpt(args.resume)
        try:
            trainer = restore_trainer(ckpt, ds)
        except IncompatibleError as exc:
            raise CliError(str(exc), EXIT_INCOMPATIBLE) from exc
    else:
        cfg = _apply_overrides(_read_config(args.config).train, args)
        trainer = Trainer(ds, cfg)
    out = _outdir(args.out)
    try:
        trainer.fit(log=print)
    except DivergenceError as exc:
        _write_json(out / "divergence.json", _finite_json(exc.dump))
        raise CliError(f"{exc}; diagnostics in {out / 'divergence.json'}", EXIT_DIVERGED) from exc
    save_checkpoint(trainer, out / "checkpoint.bin")
    _write_json(out / "history.json", trainer.history.to_dict())
    report = trainer.history.evals[-1]["report"]
    _write_json(out / "report.json", report)
    print(f"recall@1 {report['ensemble']['recall@1']:.4f}  nmi {report['ensemble']['nmi']:.4f}  "
          f"spectral_decay {report['ensemble']['spectral_decay']:.4f}")
    return EXIT_OK


def _model_and_data(args):
    ckpt = _load_ckpt(args.checkpoint)
    ds = _load_data(args.data)
    try:
        check_data(ckpt, ds.dim)
        model = model_from_checkpoint(ckpt)
    except IncompatibleError as exc:
        raise CliError(str(exc), EXIT_INCOMPATIBLE) from exc
    idx = ds.test_idx if len(ds.test_idx) else ds.train_idx
    return ckpt, model, ds.features[idx], ds.labels[idx]


def cmd_eval(args) -> int:
    ckpt, model, x, y = _model_and_data(args)
    weights = ckpt.config.test_weights or None
    report = evaluate(model, x, y, weights).to_dict()
    _write_json(args.out, report)
    ens = report["ensemble"]
    print(" ".join(f"{k} {ens[k]:.4f}" for k in (*[f"recall@{k}" for k in (1, 2, 4, 8)], "nmi", "spectral_decay")))
    return EXIT_OK


def cmd_ablate(args) -> int:
    cfg = _read_config(args.config)
    ds = _load_data(args.data)
    base = cfg.train
    if args.seeds < 1:
        raise CliError("--seeds must be >= 1", EXIT_CONFIG)
    seeds = [base.seed + i for i in range(args.seeds)]
    cells = default_cells(include_nce=args.nce)
    out = _outdir(args.out)
    try:
        rows = run_sweep(ds, base, cells, seeds, progress=lambda r: print(
            f"{r['cell']:18s} seed {r['seed']}: "
            + (f"recall@1 {r['recall@1']:.4f}" if r["status"] == "ok" else r["status"])
        ))
    except ValueError as exc:
        raise CliError(str(exc), EXIT_CONFIG) from exc
    write_rows(rows, out / "runs.csv", ["cell", "seed", "status", *METRIC_KEYS, "dim", "seconds"])
    summary = summarize(rows)
    cols = ["cell", "n_seeds", "n_failed"] + [f"{k}_{s}" for k in METRIC_KEYS for s in ("mean", "std")]
    write_rows(summary, out / "summary.csv", cols)
    print(f"{'cell':18s} {'R@1':>7s} {'NMI':>7s} {'rho':>7s}")
    for s in summary:
        print(f"{s['cell']:18s} {s['recall@1_mean']:7.4f} {s['nmi_mean']:7.4f} {s['spectral_decay_mean']:7.4f}")
    return EXIT_OK


def spectrum_svg(curves: dict[str, np.ndarray], width: int = 480, height: int = 320) -> str:
    """Static line plot of normalized singular values (log y axis)."""
    pad = 40
    colors = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e"]
    n_max = max(len(v) for v in curves.values())
    lo = min(float(np.log10(v[v > 0].min())) for v in curves.values())
    hi = max(float(np.log10(v.max())) for v in curves.values())
    hi = hi if hi > lo else lo + 1.0

    def xy(i, v):
        x = pad + (width - 2 * pad) * (i / max(1, n_max - 1))
        y = height - pad - (height - 2 * pad) * ((np.log10(max(v, 10**lo)) - lo) / (hi - lo))
        return f"{x:.1f},{y:.1f}"

    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}">',
        f'<rect width="{width}" height="{height}" fill="white"/>',
        f'<line x1="{pad}" y1="{height - pad}" x2="{width - pad}" y2="{height - pad}" stroke="black"/>',
        f'<line x1="{pad}" y1="{pad}" x2="{pad}" y2="{height - pad}" stroke="black"/>',
        f'<text x="{width / 2}" y="{height - 8}" font-size="12" text-anchor="middle">singular value index</text>',
        f'<text x="12" y="{height / 2}" font-size="12" transform="rotate(-90 12 {height / 2})" '
        f'text-anchor="middle">normalized singular value (log)</text>',
    ]
    for k, (label, vals) in enumerate(curves.items()):
        color = colors[k % len(colors)]
        pts = " ".join(xy(i, v) for i, v in enumerate(vals))
        parts.append(f'<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{pts}"/>')
        parts.append(f'<text x="{width - pad}" y="{pad + 14 * k}" font-size="11" fill="{color}" '
                     f'text-anchor="end">{label}</text>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def cmd_spectrum(args) -> int:
    labels = args.label or []
    if labels and len(labels) != len(args.checkpoint):
        raise CliError("give one --label per --checkpoint", EXIT_CONFIG)
    out = Path(args.out)
    stem = out.with_suffix("") if out.suffix in (".csv", ".svg") else out
    if stem.parent != Path(""):
        stem.parent.mkdir(parents=True, exist_ok=True)
    curves = {}
    for i, path in enumerate(args.checkpoint):
        ns = argparse.Namespace(checkpoint=path, data=args.data)
        ckpt, model, x, _ = _model_and_data(ns)
        emb = ensemble_embed(embed_all(model, x), ckpt.config.test_weights or None)
        label = labels[i] if labels else (Path(path).parent.name or f"run{i}")
        if label in curves:
            label = f"{label}-{i}"
        curves[label] = singular_spectrum(emb)
        csv_path = stem.with_suffix(".csv") if len(args.checkpoint) == 1 else Path(f"{stem}_{label}.csv")
        with open(csv_path, "w") as fh:
            fh.write("index,singular_value_normalized\n")
            for j, v in enumerate(curves[label]):
                fh.write(f"{j},{float(v)!r}\n")
        print(f"{label}: spectral_decay {spectral_decay(emb):.6f} ({len(curves[label])} values) -> {csv_path}")
    stem.with_suffix(".svg").write_text(spectrum_svg(curves))
    return EXIT_OK


# ------------------------------------------------------------------ parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="diva", description="Multi-task deep metric learning on synthetic data.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="generate a synthetic dataset (.csv suffix writes CSV)")
    g.add_argument("--config")
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="train one model")
    t.add_argument("--config")
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--tasks", help="comma-separated subset of D,S,I,Da (must include D)")
    t.add_argument("--seed", type=int)
    t.add_argument("--resume", help="continue from a checkpoint instead of starting fresh")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="score a checkpoint on the held-out classes")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--out", required=True)
    e.set_defaults(func=cmd_eval)

    a = sub.add_parser("ablate", help="task-combination grid plus ablation cells")
    a.add_argument("--config")
    a.add_argument("--data", required=True)
    a.add_argument("--out", required=True)
    a.add_argument("--seeds", type=int, default=5)
    a.add_argument("--nce", action="store_true", help="add the disc + plain NCE cell")
    a.set_defaults(func=cmd_ablate)

    s = sub.add_parser("spectrum", help="singular value spectrum as CSV and SVG")
    s.add_argument("--checkpoint", required=True, action="append")
    s.add_argument("--label", action="append")
    s.add_argument("--data", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_spectrum)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except CliError as exc:
        print(f"diva {args.command}: {exc}", file=sys.stderr)
        return exc.code
    except (ConfigError, BatchSpecError) as exc:
        print(f"diva {args.command}: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as exc:
        print(f"diva {args.command}: I/O error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
