"""Ranking, contrastive and decorrelation losses and their joint combination.

Sign conventions of the joint objective (all parameters descend on ``total``):

    term                   parameter        effect of descending ``total``
    ---------------------  ---------------  ------------------------------------
    L_disc/shared/intra    heads, encoder   ordinary ranking descent
    L_DaNCE                DaNCE head, enc  ordinary contrastive descent
    -rho * c(a, b)         psi(a,b)         ascends c: psi learns to predict a
                                            from b
    -rho * c(a, b)         heads, encoder   gradients pass the reversal nodes,
                                            so they descend c: heads decorrelate
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .mining import D_MAX, D_MIN, Triplet
from .model import RANKING_TASKS, encode, embed, psi

DIST_EPS = 1e-12
PSI_EPS = 1e-12


@dataclass
class LossWeights:
    alpha_shared: float = 0.15
    alpha_intra: float = 0.15
    alpha_dance: float = 0.15
    rho_dec: float = 300.0
    margin: float = 0.2
    beta: float = 1.2
    beta_learnable: bool = True
    tau: float = 0.1
    lam: float = 1.0
    base_loss: str = "margin"
    nce_include_positive: bool = True
    dance_weighting: bool = True
    psi_normalize: bool = True

    def __post_init__(self):
        if self.margin < 0:
            raise ValueError("margin must be >= 0")
        if self.tau <= 0:
            raise ValueError("temperature must be > 0")
        if min(self.alpha_shared, self.alpha_intra, self.alpha_dance) < 0:
            raise ValueError("task weights must be >= 0")
        if self.rho_dec < 0:
            raise ValueError("decorrelation weight must be >= 0")
        if self.beta <= 0:
            raise ValueError("beta must be > 0")
        if self.lam <= 0:
            raise ValueError("lambda cut-off must be > 0")
        if self.base_loss not in ("margin", "triplet"):
            raise ValueError("base_loss must be 'margin' or 'triplet'")

    def alpha(self, kind: str) -> float:
        return {"disc": 1.0, "shared": self.alpha_shared, "intra": self.alpha_intra, "dance": self.alpha_dance}[kind]


# ---------------------------------------------------------------- ranking


def triplet_hinge(d_ap, d_an, margin: float):
    """``[d_ap - d_an + margin]_+``; works on floats, arrays or nodes."""
    if isinstance(d_ap, ad.Node) or isinstance(d_an, ad.Node):
        return ad.relu(ad.add(ad.sub(d_ap, d_an), margin))
    return np.maximum(np.asarray(d_ap) - np.asarray(d_an) + margin, 0.0)


def margin_pair_loss(d_ap, d_an, beta, margin: float):
    """``[margin + d_ap - beta]_+ + [margin + beta - d_an]_+``."""
    if any(isinstance(v, ad.Node) for v in (d_ap, d_an, beta)):
        pos = ad.relu(ad.sub(ad.add(d_ap, margin), beta))
        upper = ad.add(beta, margin) if isinstance(beta, ad.Node) else beta + margin
        neg = ad.relu(ad.sub(upper, d_an))
        return ad.add(pos, neg)
    return np.maximum(margin + np.asarray(d_ap) - beta, 0.0) + np.maximum(margin + beta - np.asarray(d_an), 0.0)


def row_distance(x: ad.Node, y: ad.Node) -> ad.Node:
    diff = ad.sub(x, y)
    return ad.sqrt(ad.add(ad.sum(ad.mul(diff, diff), axis=-1), DIST_EPS))


def task_loss(kind: str, triplets: Sequence[Triplet], embeddings: ad.Node, weights: LossWeights, beta=None):
    """Mean base loss over ``triplets``; None when the list is empty."""
    if not triplets:
        return None
    if any(t.kind != kind for t in triplets):
        raise ValueError(f"task_loss({kind!r}) got triplets of another kind")
    a = ad.take_rows(embeddings, [t.a for t in triplets])
    p = ad.take_rows(embeddings, [t.p for t in triplets])
    n = ad.take_rows(embeddings, [t.n for t in triplets])
    d_ap, d_an = row_distance(a, p), row_distance(a, n)
    if weights.base_loss == "triplet":
        per = triplet_hinge(d_ap, d_an, weights.margin)
    else:
        per = margin_pair_loss(d_ap, d_an, weights.beta if beta is None else beta, weights.margin)
    return ad.mean(per)


# ------------------------------------------------------------- contrastive


def _contrastive(pos_logit: ad.Node, neg_logits: ad.Node, include_positive: bool) -> ad.Node:
    if include_positive:
        B = pos_logit.shape[0]
        logits = ad.concat([ad.reshape(pos_logit, (B, 1)), neg_logits], axis=1)
    else:
        logits = neg_logits
    return ad.mean(ad.sub(ad.logsumexp(logits, axis=1), pos_logit))


def _as_rows(tape: ad.Tape, v) -> ad.Node:
    node = v if isinstance(v, ad.Node) else tape.constant(v)
    return node if node.ndim == 2 else ad.reshape(node, (1, -1))


def nce_loss(anchor, positive, negatives, tau: float, include_positive: bool = True) -> ad.Node:
    """Mean over anchors of ``-log(exp(a.p/tau) / sum exp(a.n/tau))``.

    With ``include_positive`` the positive term joins the denominator.
    """
    tape = ad._tape_of(anchor, positive, negatives)
    a, p = _as_rows(tape, anchor), _as_rows(tape, positive)
    neg = _as_rows(tape, negatives)
    if neg.shape[0] == 0:
        raise ValueError("empty negative set")
    pos_logit = ad.div(ad.rowdot(a, p), tau)
    neg_logits = ad.div(ad.matmul(a, ad.transpose(neg)), tau)
    return _contrastive(pos_logit, neg_logits, include_positive)


def dance_weights(sims: ad.Node, D: int, lam: float) -> ad.Node:
    """``min(lam, 1/q(d))`` for ``d = |a - n|`` computed from unit-vector dot products.

    ``d`` is clamped to ``[D_MIN, D_MAX]``; differentiable away from the clamps
    and the cut-off.
    """
    d2 = ad.clip(ad.sub(2.0, ad.mul(2.0, sims)), D_MIN**2, D_MAX**2)
    log_q = ad.add(ad.mul(0.5 * (D - 2), ad.log(d2)), ad.mul(0.5 * (D - 3), ad.log(ad.sub(1.0, ad.mul(0.25, d2)))))
    return ad.minimum(ad.exp(ad.neg(log_q)), lam)


def dance_loss(
    anchor,
    positive,
    negatives,
    tau: float,
    lam: float,
    D: int | None = None,
    include_positive: bool = True,
    unit_weights: bool = False,
) -> ad.Node:
    """NCE whose negative logits are scaled by the distance weights ``w(d_an)``."""
    tape = ad._tape_of(anchor, positive, negatives)
    a, p = _as_rows(tape, anchor), _as_rows(tape, positive)
    neg = _as_rows(tape, negatives)
    if neg.shape[0] == 0:
        raise ValueError("empty negative set")
    D = a.shape[1] if D is None else D
    sims = ad.matmul(a, ad.transpose(neg))
    pos_logit = ad.div(ad.rowdot(a, p), tau)
    if unit_weights:
        neg_logits = ad.div(sims, tau)
    else:
        neg_logits = ad.div(ad.mul(dance_weights(sims, D, lam), sims), tau)
    return _contrastive(pos_logit, neg_logits, include_positive)


# ----------------------------------------------------------- decorrelation


def decorrelation_score(
    phi_a: ad.Node, phi_b: ad.Node, nodes: dict, pair: tuple[str, str], normalize: bool = False
) -> ad.Node:
    """Batch mean of ``|R(phi_a) * psi(R(phi_b))|^2``.

    With ``normalize`` the output of ``psi`` is scaled to (at most) unit norm,
    which bounds the score by 1; otherwise psi can raise it without limit by
    scaling its weights.
    """
    if phi_a.shape != phi_b.shape:
        raise ad.DimensionError(f"decorrelation needs equal shapes, got {phi_a.shape} and {phi_b.shape}")
    ra = ad.gradient_reversal(phi_a)
    mapped = psi(nodes, ad.gradient_reversal(phi_b), pair)
    if normalize:
        # smooth projection: stays defined when psi maps a row to zero
        sq = ad.sum(ad.mul(mapped, mapped), axis=-1, keepdims=True)
        mapped = ad.div(mapped, ad.sqrt(ad.add(sq, PSI_EPS)))
    prod = ad.mul(ra, mapped)
    return ad.mean(ad.sum(ad.mul(prod, prod), axis=-1))


# ------------------------------------------------------------------ joint


@dataclass
class StepInputs:
    """Everything a joint-loss evaluation consumes, fixed before differentiation."""

    x: np.ndarray
    x_aug: np.ndarray | None
    labels: np.ndarray
    triplets: dict[str, list[Triplet]] = field(default_factory=dict)
    negatives: np.ndarray | None = None


def forward_heads(nodes: dict, x, n_layers: int, kinds) -> dict[str, ad.Node]:
    tape = next(iter(nodes.values())).tape
    f = encode(nodes, tape.constant(x), n_layers)
    return {k: embed(nodes, f, k) for k in kinds}


def joint_loss(
    step: StepInputs,
    nodes: dict,
    n_layers: int,
    kinds,
    weights: LossWeights,
    pairs=(),
    heads: dict[str, ad.Node] | None = None,
):
    """Total loss node plus a float breakdown.

    ``L_disc + a1 L_shared + a2 L_intra + a3 L_DaNCE - rho * sum_pairs c``.
    Absent task terms contribute zero; their breakdown entry is None.
    """
    heads = heads if heads is not None else forward_heads(nodes, step.x, n_layers, kinds)
    terms: dict[str, ad.Node | None] = {}
    for kind in RANKING_TASKS:
        if kind not in kinds:
            continue
        beta = nodes.get(f"beta.{kind}") if weights.beta_learnable else None
        terms[kind] = task_loss(kind, step.triplets.get(kind, []), heads[kind], weights, beta)
    if "dance" in kinds:
        tape = heads["dance"].tape
        pos = forward_heads(nodes, step.x_aug, n_layers, ("dance",))["dance"]
        neg = tape.constant(step.negatives)
        terms["dance"] = dance_loss(
            heads["dance"],
            pos,
            neg,
            weights.tau,
            weights.lam,
            include_positive=weights.nce_include_positive,
            unit_weights=not weights.dance_weighting,
        )
    scores = {}
    for pair in pairs:
        scores[pair] = decorrelation_score(heads[pair[0]], heads[pair[1]], nodes, pair, weights.psi_normalize)

    total = None
    for kind, term in terms.items():
        if term is None:
            continue
        contrib = term if kind == "disc" else ad.mul(weights.alpha(kind), term)
        total = contrib if total is None else ad.add(total, contrib)
    for c in scores.values():
        contrib = ad.mul(-weights.rho_dec, c)
        total = contrib if total is None else ad.add(total, contrib)
    if total is None:
        tape = next(iter(nodes.values())).tape
        total = tape.constant(0.0)

    breakdown = {k: (None if v is None else float(v.value)) for k, v in terms.items()}
    for pair, c in scores.items():
        breakdown[f"c:{pair[0]}-{pair[1]}"] = float(c.value)
    breakdown["total"] = float(total.value)
    return total, breakdown
