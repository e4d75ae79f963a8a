"""Shared encoder, per-task embedding heads, momentum shadow and ensembling."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad

TASKS = ("disc", "shared", "intra", "dance")
RANKING_TASKS = ("disc", "shared", "intra")
DEFAULT_PAIRS = (("disc", "dance"), ("disc", "shared"), ("disc", "intra"))
TASK_LETTERS = {"D": "disc", "S": "shared", "I": "intra", "Da": "dance"}


@dataclass
class EncoderConfig:
    input_dim: int = 64
    hidden_dims: list[int] = field(default_factory=lambda: [256, 256])
    feature_dim: int = 128
    activation: str = "relu"

    def __post_init__(self):
        dims = [self.input_dim, *self.hidden_dims, self.feature_dim]
        if any(int(d) < 1 for d in dims):
            raise ValueError(f"encoder dims must be >= 1, got {dims}")
        if self.activation != "relu":
            raise ValueError("only the rectifier activation is supported")


@dataclass
class ModelState:
    """Live parameters, shadow copies and the layout needed to use them.

    ``params`` holds everything the optimizer touches: encoder layers
    (``enc.{i}.W/b``), heads (``head.{kind}.W/b``), decorrelation maps
    (``psi.{a}-{b}.{0,1}.W/b``) and learnable margins (``beta.{kind}``).
    ``shadow`` mirrors the encoder and the DaNCE head only.
    """

    encoder: EncoderConfig
    embed_dim: int
    kinds: tuple[str, ...]
    pairs: tuple[tuple[str, str], ...]
    params: dict[str, np.ndarray]
    shadow: dict[str, np.ndarray]

    @property
    def n_layers(self) -> int:
        return len(self.encoder.hidden_dims) + 1

    def copy(self) -> "ModelState":
        return ModelState(
            self.encoder,
            self.embed_dim,
            self.kinds,
            self.pairs,
            {k: v.copy() for k, v in self.params.items()},
            {k: v.copy() for k, v in self.shadow.items()},
        )


def _uniform_layer(rng: np.random.Generator, fan_in: int, fan_out: int):
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=(fan_in, fan_out)), np.zeros(fan_out)


def psi_prefix(pair: tuple[str, str]) -> str:
    return f"psi.{pair[0]}-{pair[1]}"


def init_model(
    encoder: EncoderConfig,
    kinds,
    embed_dim: int = 128,
    pairs=DEFAULT_PAIRS,
    rng: np.random.Generator | None = None,
    beta: float = 1.2,
) -> ModelState:
    kinds = tuple(k for k in TASKS if k in set(kinds))
    if not kinds:
        raise ValueError("at least one head is required")
    if embed_dim < 1:
        raise ValueError("embed_dim must be >= 1")
    pairs = tuple(tuple(p) for p in pairs if p[0] in kinds and p[1] in kinds)
    for a, b in pairs:
        if a == b:
            raise ValueError(f"decorrelation pair ({a}, {b}) must reference distinct heads")
    rng = rng if rng is not None else np.random.default_rng(0)

    params: dict[str, np.ndarray] = {}
    dims = [encoder.input_dim, *encoder.hidden_dims, encoder.feature_dim]
    for i, (fi, fo) in enumerate(zip(dims[:-1], dims[1:])):
        params[f"enc.{i}.W"], params[f"enc.{i}.b"] = _uniform_layer(rng, fi, fo)
    for k in kinds:
        params[f"head.{k}.W"], params[f"head.{k}.b"] = _uniform_layer(rng, encoder.feature_dim, embed_dim)
    for pair in pairs:
        pre = psi_prefix(pair)
        params[f"{pre}.0.W"], params[f"{pre}.0.b"] = _uniform_layer(rng, embed_dim, embed_dim)
        params[f"{pre}.1.W"], params[f"{pre}.1.b"] = _uniform_layer(rng, embed_dim, embed_dim)
    for k in kinds:
        if k in RANKING_TASKS:
            params[f"beta.{k}"] = np.array(float(beta))

    shadow = {k: v.copy() for k, v in params.items() if _in_shadow(k)}
    return ModelState(encoder, embed_dim, kinds, pairs, params, shadow)


def _in_shadow(name: str) -> bool:
    return name.startswith("enc.") or name.startswith("head.dance.")


def bind(tape: ad.Tape, params: dict[str, np.ndarray], requires_grad: bool = True) -> dict[str, ad.Node]:
    return {k: tape.leaf(v, name=k, requires_grad=requires_grad) for k, v in params.items()}


def encode(nodes: dict, x, n_layers: int) -> ad.Node:
    """Feed-forward encoder: rectified hidden layers, linear output."""
    h = x
    for i in range(n_layers):
        h = ad.linear(h, nodes[f"enc.{i}.W"], nodes[f"enc.{i}.b"])
        if i < n_layers - 1:
            h = ad.relu(h)
    return h


def embed(nodes: dict, f: ad.Node, kind: str) -> ad.Node:
    if f"head.{kind}.W" not in nodes:
        raise KeyError(f"no head for task kind {kind!r}")
    return ad.l2_normalize(ad.linear(f, nodes[f"head.{kind}.W"], nodes[f"head.{kind}.b"]))


def psi(nodes: dict, x: ad.Node, pair: tuple[str, str]) -> ad.Node:
    pre = psi_prefix(pair)
    h = ad.relu(ad.linear(x, nodes[f"{pre}.0.W"], nodes[f"{pre}.0.b"]))
    return ad.linear(h, nodes[f"{pre}.1.W"], nodes[f"{pre}.1.b"])


def momentum_update(shadow: dict[str, np.ndarray], live: dict[str, np.ndarray], mu: float) -> None:
    """In place ``p* <- mu p* + (1 - mu) p`` for every shadow parameter."""
    if not 0.0 <= mu <= 1.0:
        raise ValueError(f"momentum must lie in [0, 1], got {mu}")
    for name, p_star in shadow.items():
        p = live[name]
        if p.shape != p_star.shape:
            raise ad.DimensionError(f"shadow {name} has shape {p_star.shape}, live {p.shape}")
        if mu == 1.0:
            continue
        if mu == 0.0:
            p_star[...] = p
        else:
            p_star *= mu
            p_star += (1.0 - mu) * p


def forward_numpy(params: dict[str, np.ndarray], x: np.ndarray, n_layers: int, kinds) -> dict[str, np.ndarray]:
    """Gradient-free forward pass returning one embedding matrix per kind."""
    tape = ad.Tape()
    nodes = bind(tape, params, requires_grad=False)
    f = encode(nodes, tape.constant(np.atleast_2d(x)), n_layers)
    return {k: embed(nodes, f, k).value for k in kinds}


def embed_all(model: ModelState, x: np.ndarray) -> dict[str, np.ndarray]:
    return forward_numpy(model.params, x, model.n_layers, model.kinds)


def shadow_embed(model: ModelState, x: np.ndarray) -> np.ndarray:
    return forward_numpy(model.shadow, x, model.n_layers, ("dance",))["dance"]


def ensemble_embed(per_head: dict[str, np.ndarray], weights: dict[str, float] | None = None) -> np.ndarray:
    """Concatenate ``w_k * phi_k`` over the active heads in canonical task order.

    Squared distances between ensemble vectors equal ``sum_k w_k^2 d_k^2``.
    """
    kinds = [k for k in TASKS if k in per_head] + [k for k in per_head if k not in TASKS]
    if not kinds:
        raise ValueError("ensemble needs at least one active head")
    weights = weights or {}
    return np.concatenate([float(weights.get(k, 1.0)) * per_head[k] for k in kinds], axis=1)


def default_test_weights(kinds, aux_weight: float = 1.0) -> dict[str, float]:
    return {k: (1.0 if k == "disc" else aux_weight) for k in kinds}
