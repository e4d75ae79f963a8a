"""Desk-scale training preset used by the benchmark runs and the acceptance suite."""

from __future__ import annotations

from .config import RunConfig, from_dict

DESK = {
    "synth": {},
    "train": {
        "encoder": {"hidden_dims": [128], "feature_dim": 64},
        "total_embed_dim": 128,
        "epochs": 30,
        "lr": 1e-3,
        "lr_decay_epochs": [],
        "queue_size": 1024,
        "eval_every": 10,
        "loss": {"rho_dec": 0.3},
    },
}


def desk_config() -> RunConfig:
    return from_dict(RunConfig, DESK)
