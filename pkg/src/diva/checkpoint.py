"""Checkpoint files: a JSON header followed by little-endian float64 blobs.

Layout::

    b"DIVACKPT" | u32 version | u64 header_len | header (UTF-8 JSON)
    blob_0 | blob_1 | ...        (float64, order and shapes listed in header["blobs"])

The header carries dims, the training config, epoch/step counters, optimizer
step count, queue cursor/fill, RNG state and the training history, so a
restored trainer continues exactly where the saved one stopped.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .config import ConfigError, from_dict, to_dict
from .data import Dataset
from .model import EncoderConfig, ModelState, init_model
from .queue import MemoryQueue
from .trainer import TrainConfig, TrainHistory, Trainer

MAGIC = b"DIVACKPT"
VERSION = 1
_PREFIX = struct.Struct("<8sIQ")


class CheckpointError(ValueError):
    pass


class IncompatibleError(CheckpointError):
    """Checkpoint and data (or model layout) disagree on dimensions."""


@dataclass
class Checkpoint:
    header: dict
    arrays: dict[str, np.ndarray]

    @property
    def config(self) -> TrainConfig:
        try:
            return from_dict(TrainConfig, self.header["config"])
        except ConfigError as exc:
            raise CheckpointError(f"stored config invalid: {exc}") from exc

    @property
    def input_dim(self) -> int:
        return int(self.header["dims"]["input_dim"])

    def group(self, prefix: str) -> dict[str, np.ndarray]:
        n = len(prefix) + 1
        return {k[n:]: v for k, v in self.arrays.items() if k.startswith(prefix + "/")}


def _collect(trainer: Trainer) -> tuple[dict, dict[str, np.ndarray]]:
    m, cfg = trainer.model, trainer.cfg
    arrays: dict[str, np.ndarray] = {}
    for k, v in m.params.items():
        arrays[f"param/{k}"] = v
    for k, v in m.shadow.items():
        arrays[f"shadow/{k}"] = v
    for k, v in trainer.opt.m.items():
        arrays[f"adam.m/{k}"] = v
    for k, v in trainer.opt.v.items():
        arrays[f"adam.v/{k}"] = v
    arrays["queue"] = trainer.queue.buffer
    header = {
        "version": VERSION,
        "dims": {
            "input_dim": m.encoder.input_dim,
            "hidden_dims": list(m.encoder.hidden_dims),
            "feature_dim": m.encoder.feature_dim,
            "embed_dim": m.embed_dim,
        },
        "kinds": list(m.kinds),
        "pairs": [list(p) for p in m.pairs],
        "config": to_dict(cfg),
        "require_disc": trainer.require_disc,
        "epoch": trainer.epoch,
        "step_in_epoch": trainer.step_in_epoch,
        "adam_t": trainer.opt.t,
        "queue": {"cursor": trainer.queue.cursor, "fill": trainer.queue.fill},
        "rng": trainer.rng.bit_generator.state,
        "history": trainer.history.to_dict(),
        "blobs": [{"name": k, "shape": list(np.shape(v))} for k, v in arrays.items()],
    }
    return header, arrays


def checkpoint_bytes(trainer: Trainer) -> bytes:
    header, arrays = _collect(trainer)
    head = json.dumps(header, sort_keys=True).encode("utf-8")
    parts = [_PREFIX.pack(MAGIC, VERSION, len(head)), head]
    parts += [np.ascontiguousarray(v, dtype="<f8").tobytes() for v in arrays.values()]
    return b"".join(parts)


def save_checkpoint(trainer: Trainer, path) -> None:
    Path(path).write_bytes(checkpoint_bytes(trainer))


def parse_checkpoint(buf: bytes) -> Checkpoint:
    if len(buf) < _PREFIX.size:
        raise CheckpointError("truncated checkpoint prefix")
    magic, version, n = _PREFIX.unpack_from(buf, 0)
    if magic != MAGIC:
        raise CheckpointError(f"bad checkpoint magic {magic!r}")
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    off = _PREFIX.size
    if len(buf) < off + n:
        raise CheckpointError("truncated checkpoint header")
    try:
        header = json.loads(buf[off : off + n].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"corrupt checkpoint header: {exc}") from exc
    off += n
    arrays = {}
    for blob in header["blobs"]:
        shape = tuple(blob["shape"])
        size = 8 * int(np.prod(shape, dtype=np.int64))
        if len(buf) < off + size:
            raise CheckpointError(f"truncated blob {blob['name']}")
        arrays[blob["name"]] = np.frombuffer(buf, dtype="<f8", count=size // 8, offset=off).reshape(shape).copy()
        off += size
    if off != len(buf):
        raise CheckpointError("trailing bytes after last blob")
    return Checkpoint(header, arrays)


def load_checkpoint(path) -> Checkpoint:
    return parse_checkpoint(Path(path).read_bytes())


def _check_layout(ckpt: Checkpoint, expected: ModelState) -> None:
    params = ckpt.group("param")
    if set(params) != set(expected.params):
        missing = sorted(set(expected.params) - set(params))
        extra = sorted(set(params) - set(expected.params))
        raise IncompatibleError(f"parameter set mismatch (missing {missing}, unexpected {extra})")
    for k, v in expected.params.items():
        if params[k].shape != v.shape:
            raise IncompatibleError(f"{k}: stored shape {params[k].shape}, layout needs {v.shape}")
    if set(ckpt.group("shadow")) != set(expected.shadow):
        raise IncompatibleError("shadow parameter set mismatch")


def model_from_checkpoint(ckpt: Checkpoint) -> ModelState:
    dims = ckpt.header["dims"]
    enc = EncoderConfig(
        input_dim=dims["input_dim"], hidden_dims=list(dims["hidden_dims"]), feature_dim=dims["feature_dim"]
    )
    pairs = [tuple(p) for p in ckpt.header["pairs"]]
    model = init_model(enc, ckpt.header["kinds"], dims["embed_dim"], pairs, np.random.default_rng(0))
    _check_layout(ckpt, model)
    for k, v in ckpt.group("param").items():
        model.params[k] = v.reshape(model.params[k].shape).copy()
    for k, v in ckpt.group("shadow").items():
        model.shadow[k] = v.reshape(model.shadow[k].shape).copy()
    return model


def check_data(ckpt: Checkpoint, dim: int) -> None:
    if dim != ckpt.input_dim:
        raise IncompatibleError(f"data has {dim} features, checkpoint expects {ckpt.input_dim}")


def restore_trainer(ckpt: Checkpoint, dataset: Dataset) -> Trainer:
    """Rebuild a trainer whose next step matches the saved run bit for bit."""
    check_data(ckpt, dataset.dim)
    h = ckpt.header
    trainer = Trainer(dataset, ckpt.config, require_disc=h.get("require_disc", True))
    trainer.model = model_from_checkpoint(ckpt)
    trainer.opt.t = int(h["adam_t"])
    trainer.opt.m = ckpt.group("adam.m")
    trainer.opt.v = ckpt.group("adam.v")
    buf = ckpt.arrays["queue"]
    if buf.shape != trainer.queue.buffer.shape:
        raise IncompatibleError(f"queue shape {buf.shape}, config needs {trainer.queue.buffer.shape}")
    trainer.queue = MemoryQueue(buf, h["queue"]["cursor"], h["queue"]["fill"])
    trainer.rng.bit_generator.state = h["rng"]
    trainer.epoch = int(h["epoch"])
    trainer.step_in_epoch = int(h["step_in_epoch"])
    hist = h["history"]
    trainer.history = TrainHistory(hist["steps"], hist["evals"], hist["seeds"])
    return trainer
