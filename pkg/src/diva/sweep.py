"""Task-combination grid and ablation cells, run over seeds."""

from __future__ import annotations

import csv
import dataclasses
import logging
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .data import Dataset
from .evaluate import evaluate_embeddings
from .model import TASK_LETTERS, TASKS, embed_all
from .trainer import TrainConfig, fit, fit_separate

logger = logging.getLogger(__name__)

COMBOS = (
    ("disc",),
    ("disc", "shared"),
    ("disc", "intra"),
    ("disc", "dance"),
    ("disc", "shared", "intra"),
    ("disc", "shared", "dance"),
    ("disc", "intra", "dance"),
    ("disc", "shared", "intra", "dance"),
)
FULL = COMBOS[-1]
_LETTER = {v: k for k, v in TASK_LETTERS.items()}


def combo_name(tasks) -> str:
    return "+".join(_LETTER[t] for t in TASKS if t in tasks)


def parse_tasks(spec: str) -> list[str]:
    """``"D,S,I,Da"`` -> task kinds; letters are case-sensitive."""
    out = []
    for tok in spec.split(","):
        tok = tok.strip()
        if tok not in TASK_LETTERS:
            raise ValueError(f"unknown task letter {tok!r} (use D, S, I, Da)")
        if TASK_LETTERS[tok] not in out:
            out.append(TASK_LETTERS[tok])
    if "disc" not in out:
        raise ValueError("task set must include D")
    return [t for t in TASKS if t in out]


@dataclass
class Cell:
    name: str
    tasks: tuple[str, ...]
    separate: bool = False
    loss: dict = field(default_factory=dict)


def default_cells(include_nce: bool = False) -> list[Cell]:
    cells = [Cell(combo_name(c), c) for c in COMBOS]
    cells.append(Cell("no-decorrelation", FULL, loss={"rho_dec": 0.0}))
    cells.append(Cell("separate", FULL, separate=True))
    if include_nce:
        cells.append(
            Cell("D+NCE", ("disc", "dance"), loss={"nce_include_positive": False, "dance_weighting": False})
        )
    return cells


def cell_config(base: TrainConfig, cell: Cell, seed: int) -> TrainConfig:
    loss = dataclasses.replace(base.loss, **cell.loss)
    return dataclasses.replace(base, tasks=list(cell.tasks), loss=loss, seed=seed)


def run_cell(dataset: Dataset, base: TrainConfig, cell: Cell, seed: int) -> dict:
    """Train and score one (cell, seed); failures come back as a row with the error."""
    row = {"cell": cell.name, "seed": seed}
    t0 = time.perf_counter()
    try:
        cfg = cell_config(base, cell, seed)
        idx = dataset.test_idx
        if cell.separate:
            models, _ = fit_separate(dataset, cfg)
            per_head = {k: embed_all(m, dataset.features[idx])[k] for k, m in models.items()}
            report = evaluate_embeddings(per_head, dataset.labels[idx], cfg.test_weights or None)
        else:
            _, _, trainer = fit(dataset, cfg)
            report = trainer.evaluate()
        row.update(status="ok", **report.ensemble.to_dict())
        row["heads"] = {k: m.recall[1] for k, m in report.heads.items()}
    except Exception as exc:  # a failed cell must not stop the sweep
        logger.warning("cell %s seed %d failed: %s", cell.name, seed, exc)
        row.update(status=f"failed: {type(exc).__name__}: {exc}")
    row["seconds"] = round(time.perf_counter() - t0, 3)
    return row


def worker_count(n_jobs: int) -> int:
    raw = os.environ.get("DIVA_THREADS")
    if raw is None or raw == "":
        cap = os.cpu_count() or 1
    else:
        try:
            cap = int(raw)
        except ValueError:
            raise ValueError(f"DIVA_THREADS must be a positive integer, got {raw!r}") from None
        if cap < 1:
            raise ValueError(f"DIVA_THREADS must be a positive integer, got {raw!r}")
    return max(1, min(cap, n_jobs))


def run_sweep(dataset: Dataset, base: TrainConfig, cells, seeds, workers: int | None = None, progress=None):
    jobs = [(cell, s) for cell in cells for s in seeds]
    workers = worker_count(len(jobs)) if workers is None else workers
    if workers <= 1:
        rows = []
        for cell, s in jobs:
            rows.append(run_cell(dataset, base, cell, s))
            if progress:
                progress(rows[-1])
        return rows
    with ProcessPoolExecutor(max_workers=workers) as pool:
        futures = [pool.submit(run_cell, dataset, base, cell, s) for cell, s in jobs]
        rows = []
        for fut in futures:
            rows.append(fut.result())
            if progress:
                progress(rows[-1])
    return rows


METRIC_KEYS = ("recall@1", "recall@2", "recall@4", "recall@8", "nmi", "spectral_decay")


def summarize(rows) -> list[dict]:
    out = []
    for name in dict.fromkeys(r["cell"] for r in rows):
        mine = [r for r in rows if r["cell"] == name]
        ok = [r for r in mine if r["status"] == "ok"]
        entry = {"cell": name, "n_seeds": len(mine), "n_failed": len(mine) - len(ok)}
        for key in METRIC_KEYS:
            vals = np.array([r[key] for r in ok if key in r], dtype=float)
            entry[f"{key}_mean"] = float(vals.mean()) if vals.size else float("nan")
            entry[f"{key}_std"] = float(vals.std()) if vals.size else float("nan")
        out.append(entry)
    return out


def write_rows(rows, path, columns) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(columns), extrasaction="ignore")
        w.writeheader()
        for r in rows:
            w.writerow({k: r.get(k, "") for k in columns})


def mean_metric(rows, cell: str, key: str = "recall@1") -> float:
    vals = [r[key] for r in rows if r["cell"] == cell and r["status"] == "ok"]
    return float(np.mean(vals)) if vals else float("nan")
