"""Joint optimization loop."""

from __future__ import annotations

import copy
import dataclasses
import logging
import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import autodiff as ad
from .data import Dataset
from .evaluate import evaluate
from .mining import BatchSpec, build_batch, mine_triplets
from .model import (
    DEFAULT_PAIRS,
    RANKING_TASKS,
    TASKS,
    EncoderConfig,
    ModelState,
    bind,
    init_model,
    momentum_update,
    shadow_embed,
)
from .objectives import LossWeights, StepInputs, forward_heads, joint_loss
from .queue import MemoryQueue

logger = logging.getLogger(__name__)


class DivergenceError(RuntimeError):
    def __init__(self, message: str, dump: dict):
        self.dump = dump
        super().__init__(message)


@dataclass
class TrainConfig:
    loss: LossWeights = field(default_factory=LossWeights)
    batch: BatchSpec = field(default_factory=BatchSpec)
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    embed_dim: int = 128
    total_embed_dim: int = 0
    tasks: list[str] = field(default_factory=lambda: list(TASKS))
    pairs: list[list[str]] = field(default_factory=lambda: [list(p) for p in DEFAULT_PAIRS])
    epochs: int = 150
    lr: float = 1e-5
    weight_decay: float = 5e-4
    adam_betas: list[float] = field(default_factory=lambda: [0.9, 0.999])
    adam_eps: float = 1e-8
    lr_decay_epochs: list[int] = field(default_factory=lambda: [100])
    lr_decay_factor: float = 0.3
    momentum: float = 0.999
    queue_size: int = 4096
    mining_lambda: float = 1.0
    aug_noise: float = 0.1
    aug_dropout: float = 0.1
    test_weights: dict[str, float] = field(default_factory=dict)
    eval_every: int = 5
    log_every: int = 0
    seed: int = 0

    def validate(self, require_disc: bool = True) -> None:
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.lr <= 0:
            raise ValueError("learning rate must be > 0")
        if not self.tasks:
            raise ValueError("active task set must be non-empty")
        unknown = set(self.tasks) - set(TASKS)
        if unknown:
            raise ValueError(f"unknown tasks: {sorted(unknown)}")
        if require_disc and "disc" not in self.tasks:
            raise ValueError("active task set must contain disc")
        if not 0.0 <= self.momentum <= 1.0:
            raise ValueError("momentum must lie in [0, 1]")
        if self.queue_size < 1:
            raise ValueError("queue_size must be >= 1")
        if self.embed_dim < 1:
            raise ValueError("embed_dim must be >= 1")
        if self.total_embed_dim and self.total_embed_dim < len(self.tasks):
            raise ValueError("total_embed_dim must leave at least one dimension per head")
        if not 0.0 <= self.aug_dropout <= 1.0 or self.aug_noise < 0:
            raise ValueError("augmentation needs noise >= 0 and dropout in [0, 1]")
        if self.mining_lambda <= 0:
            raise ValueError("mining_lambda must be > 0")
        for pair in self.pairs:
            if len(pair) != 2 or pair[0] == pair[1] or not set(pair) <= set(TASKS):
                raise ValueError(f"bad decorrelation pair {pair}")
        self.batch.validate(self.tasks)

    @property
    def head_dim(self) -> int:
        """Per-head dimension; a nonzero ``total_embed_dim`` is split evenly across heads."""
        if self.total_embed_dim:
            return self.total_embed_dim // len(self.tasks)
        return self.embed_dim

    @property
    def active_pairs(self) -> tuple[tuple[str, str], ...]:
        return tuple(tuple(p) for p in self.pairs if p[0] in self.tasks and p[1] in self.tasks)

    def lr_at(self, epoch: int) -> float:
        n = sum(1 for e in self.lr_decay_epochs if epoch >= e)
        return self.lr * self.lr_decay_factor**n


@dataclass
class TrainHistory:
    steps: list[dict] = field(default_factory=list)
    evals: list[dict] = field(default_factory=list)
    seeds: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"steps": self.steps, "evals": self.evals, "seeds": self.seeds}


def augment(x: np.ndarray, noise: float, dropout: float, rng: np.random.Generator) -> np.ndarray:
    """``mask * (x + eps)`` with ``eps ~ N(0, noise^2)`` and coordinate dropout."""
    x = np.asarray(x, dtype=np.float64)
    eps = rng.standard_normal(x.shape) * noise
    keep = rng.random(x.shape) >= dropout
    return np.where(keep, x + eps, 0.0)


class Adam:
    """Bias-corrected adaptive moments; weight decay enters the gradient as an L2 term."""

    def __init__(self, betas=(0.9, 0.999), eps: float = 1e-8):
        self.b1, self.b2 = float(betas[0]), float(betas[1])
        self.eps = eps
        self.t = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray], lr: float, wd: float = 0.0) -> None:
        self.t += 1
        c1 = 1.0 - self.b1**self.t
        c2 = 1.0 - self.b2**self.t
        for name, g in grads.items():
            p = params[name]
            if g.shape != p.shape:
                raise ad.DimensionError(f"gradient for {name} has shape {g.shape}, parameter {p.shape}")
            if wd and not name.startswith("beta."):
                g = g + wd * p
            m = self.m.setdefault(name, np.zeros_like(p))
            v = self.v.setdefault(name, np.zeros_like(p))
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            p -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


class Trainer:
    """Owns the live model, shadow, queue, optimizer and RNG for one run."""

    def __init__(self, dataset: Dataset, cfg: TrainConfig, require_disc: bool = True):
        cfg = copy.deepcopy(cfg)
        cfg.validate(require_disc=require_disc)
        cfg.encoder.input_dim = dataset.dim
        self.dataset = dataset
        self.cfg = cfg
        self.require_disc = require_disc
        self.train_idx = dataset.train_idx
        self.test_idx = dataset.test_idx
        init_rng = np.random.default_rng([cfg.seed, 1])
        self.model = init_model(
            cfg.encoder, cfg.tasks, cfg.head_dim, cfg.active_pairs, init_rng, beta=cfg.loss.beta
        )
        self.queue = MemoryQueue.init(cfg.queue_size, cfg.head_dim, np.random.default_rng([cfg.seed, 2]))
        self.opt = Adam(cfg.adam_betas, cfg.adam_eps)
        self.rng = np.random.default_rng([cfg.seed, 3])
        self.epoch = 0
        self.step_in_epoch = 0
        self.history = TrainHistory(seeds={"seed": cfg.seed})

    @property
    def steps_per_epoch(self) -> int:
        return max(1, len(self.train_idx) // self.cfg.batch.size)

    def optimizer_params(self) -> dict[str, np.ndarray]:
        return self.model.params

    def prepare(self, idx: np.ndarray) -> tuple[StepInputs, dict]:
        """Forward the batch, mine triplets and draw the augmented views."""
        cfg, model = self.cfg, self.model
        x = self.dataset.features[idx]
        labels = self.dataset.labels[idx]
        tape = ad.Tape()
        nodes = bind(tape, model.params)
        heads = forward_heads(nodes, x, model.n_layers, model.kinds)
        triplets = {}
        for kind in RANKING_TASKS:
            if kind in model.kinds:
                triplets[kind] = mine_triplets(kind, heads[kind].value, labels, cfg.mining_lambda, self.rng)
        x_aug = keys = None
        if "dance" in model.kinds:
            x_aug = augment(x, cfg.aug_noise, cfg.aug_dropout, self.rng)
            keys = shadow_embed(model, x_aug)
        step = StepInputs(x, x_aug, labels, triplets, self.queue.snapshot() if keys is not None else None)
        return step, {"tape": tape, "nodes": nodes, "heads": heads, "keys": keys}

    def loss(self, step: StepInputs, ctx: dict | None = None):
        model = self.model
        if ctx is None:
            tape = ad.Tape()
            nodes, heads = bind(tape, model.params), None
        else:
            tape, nodes, heads = ctx["tape"], ctx["nodes"], ctx["heads"]
        total, parts = joint_loss(step, nodes, model.n_layers, model.kinds, self.cfg.loss, model.pairs, heads)
        return tape, nodes, total, parts

    def train_step(self, idx: np.ndarray) -> dict:
        cfg = self.cfg
        step, ctx = self.prepare(idx)
        tape, nodes, total, parts = self.loss(step, ctx)
        if not math.isfinite(parts["total"]):
            raise DivergenceError(
                f"non-finite loss at epoch {self.epoch} step {self.step_in_epoch}",
                {"epoch": self.epoch, "step": self.step_in_epoch, "breakdown": parts},
            )
        grads = tape.backward(total)
        g = {k: grads[n] for k, n in nodes.items()}
        if not cfg.loss.beta_learnable:
            g = {k: v for k, v in g.items() if not k.startswith("beta.")}
        self.opt.step(self.model.params, g, cfg.lr_at(self.epoch), cfg.weight_decay)
        if ctx["keys"] is not None:
            momentum_update(self.model.shadow, self.model.params, cfg.momentum)
            self.queue.push(ctx["keys"])
        return parts

    def advance(self, log: Callable[[str], None] | None = None) -> dict:
        """One optimization step; rolls the epoch counter over at the end of an epoch."""
        cfg = self.cfg
        idx = build_batch(self.dataset.labels, self.train_idx, cfg.batch, self.rng)
        parts = self.train_step(idx)
        record = {"epoch": self.epoch, "step": self.step_in_epoch, **parts}
        self.history.steps.append(record)
        self.step_in_epoch += 1
        if log and (
            self.step_in_epoch % cfg.log_every == 0 if cfg.log_every else self.step_in_epoch == self.steps_per_epoch
        ):
            log(progress_line(record))
        if self.step_in_epoch >= self.steps_per_epoch:
            self.epoch += 1
            self.step_in_epoch = 0
            if cfg.eval_every and self.epoch % cfg.eval_every == 0 and self.epoch < cfg.epochs:
                self.history.evals.append({"epoch": self.epoch, "report": self.evaluate().to_dict()})
        return record

    def run_epoch(self, log: Callable[[str], None] | None = None) -> None:
        start = self.epoch
        while self.epoch == start:
            self.advance(log)

    def fit(self, log: Callable[[str], None] | None = None, until_epoch: int | None = None):
        end = self.cfg.epochs if until_epoch is None else min(until_epoch, self.cfg.epochs)
        while self.epoch < end:
            self.run_epoch(log)
        if self.epoch == self.cfg.epochs and not any(e["epoch"] == self.epoch for e in self.history.evals):
            self.history.evals.append({"epoch": self.epoch, "report": self.evaluate().to_dict()})
        return self.model, self.history

    def evaluate(self):
        ds = self.dataset
        idx = self.test_idx if len(self.test_idx) else self.train_idx
        return evaluate(self.model, ds.features[idx], ds.labels[idx], self.cfg.test_weights or None)


def progress_line(record: dict) -> str:
    def fmt(v):
        return "-" if v is None else f"{v:.6f}"

    c_sum = sum(v for k, v in record.items() if k.startswith("c:"))
    cols = [record.get(k) for k in ("disc", "shared", "intra", "dance")]
    return " ".join(
        [str(record["epoch"]), str(record["step"]), *map(fmt, cols), fmt(c_sum), fmt(record["total"])]
    )


def fit(dataset: Dataset, cfg: TrainConfig, log=None, require_disc: bool = True):
    """Train from scratch; returns ``(model, history, trainer)``."""
    trainer = Trainer(dataset, cfg, require_disc=require_disc)
    model, history = trainer.fit(log)
    return model, history, trainer


def fit_separate(dataset: Dataset, cfg: TrainConfig, log=None) -> tuple[dict[str, ModelState], list[Trainer]]:
    """One independent encoder per task, no decorrelation; ensembled at test time."""
    models, trainers = {}, []
    for kind in cfg.tasks:
        sub = dataclasses.replace(cfg, tasks=[kind], pairs=[], embed_dim=cfg.head_dim, total_embed_dim=0)
        trainer = Trainer(dataset, sub, require_disc=False)
        trainer.fit(log)
        models[kind] = trainer.model
        trainers.append(trainer)
    return models, trainers

