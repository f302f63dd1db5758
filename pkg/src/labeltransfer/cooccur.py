"""Image-specific label co-occurrence prediction and intra-image pseudo labels.

A pair network scores every ordered category pair (i, j) from the
concatenation of their feature vectors, producing a per-sample C x C matrix
of co-occurrence probabilities. Known positives then vote for unknown
categories: an unknown label becomes a pseudo positive when its summed
co-occurrence evidence clears a threshold. The pair network itself trains
with an asymmetric loss that downweights easy negative pairs.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .features import param_items


@dataclass
class PairNetParams:
    w1: np.ndarray  # (2D', H1)
    b1: np.ndarray
    w2: np.ndarray  # (H1, H2)
    b2: np.ndarray
    w3: np.ndarray  # (H2, 1)
    b3: np.ndarray


@dataclass
class AsymmetricLossConfig:
    gamma_pos: float = 1.0
    gamma_neg: float = 2.0
    margin: float = 0.05

    def validate(self):
        if self.gamma_pos < 0 or self.gamma_neg < 0:
            raise ValueError("focusing exponents must be >= 0")
        if not 0.0 <= self.margin < 1.0:
            raise ValueError("margin must be in [0, 1)")


def init_pair_net(rng, feature_dim, hidden=(512, 1024)):
    h1, h2 = hidden
    d2 = 2 * feature_dim
    return PairNetParams(
        w1=rng.normal(0.0, np.sqrt(2.0 / d2), size=(d2, h1)),
        b1=np.zeros(h1),
        w2=rng.normal(0.0, np.sqrt(2.0 / h1), size=(h1, h2)),
        b2=np.zeros(h2),
        w3=rng.normal(0.0, np.sqrt(1.0 / h2), size=(h2, 1)),
        b3=np.zeros(1),
    )


def pair_net_leaves(graph, params):
    return {name: graph.leaf(arr, trainable=True)
            for name, arr in param_items(params, "pair")}


def predict_cooccurrence(graph, features, leaves):
    """Category features (B, C, D') -> co-occurrence probabilities (B, C, C).

    Entry (i, j) is pair_net(concat(f_i, f_j)). The diagonal is computed but
    carries no meaning downstream.
    """
    b, c, dp = features.data.shape
    fi = graph.broadcast_to(graph.reshape(features, (b, c, 1, dp)), (b, c, c, dp))
    fj = graph.broadcast_to(graph.reshape(features, (b, 1, c, dp)), (b, c, c, dp))
    pairs = graph.reshape(graph.concat([fi, fj], axis=-1), (b * c * c, 2 * dp))
    h = graph.relu(graph.affine(pairs, leaves["pair.w1"], leaves["pair.b1"]))
    h = graph.relu(graph.affine(h, leaves["pair.w2"], leaves["pair.b2"]))
    out = graph.sigmoid(graph.affine(h, leaves["pair.w3"], leaves["pair.b3"]))
    return graph.reshape(out, (b, c, c))


def generate_intra_pseudo_labels(cooc, labels, theta_intra):
    """Pseudo positives for unknown labels from co-occurrence evidence.

    cooc: (C, C) or (B, C, C) probabilities; labels: matching (C,) or (B, C)
    ternary vector(s). For each unknown category c the evidence is the sum
    of cooc[c, j] over known positives j (diagonal excluded); the pseudo
    label is 1 iff evidence >= theta_intra. Known positions are always 0.
    """
    cooc = np.asarray(cooc, dtype=np.float64)
    labels = np.asarray(labels)
    squeeze = cooc.ndim == 2
    if squeeze:
        cooc, labels = cooc[None], labels[None]
    known_pos = (labels == 1).astype(np.float64)  # (B, C)
    evidence = np.einsum("bcj,bj->bc", cooc, known_pos)
    evidence -= np.einsum("bcc,bc->bc", cooc, known_pos)  # drop diagonal votes
    pseudo = ((evidence >= theta_intra) & (labels == 0)).astype(np.int64)
    return pseudo[0] if squeeze else pseudo


def intra_evidence(cooc, labels):
    """Summed co-occurrence evidence per category (diagonal excluded)."""
    cooc = np.asarray(cooc, dtype=np.float64)
    known_pos = (np.asarray(labels) == 1).astype(np.float64)
    ev = np.einsum("...cj,...j->...c", cooc, known_pos)
    ev -= np.einsum("...cc,...c->...c", cooc, known_pos)
    return ev


def asymmetric_loss(graph, cooc, labels, cfg: AsymmetricLossConfig):
    """Asymmetric pair loss over known label pairs.

    cooc: graph tensor (B, C, C); labels: numpy (B, C) ternary. Positive
    pairs (both labels known positive, i != j) contribute
    (1-p)^g_pos * -log p; negative pairs (both known, not both positive)
    contribute max(p - margin, 0)^g_neg * -log(1-p). Pairs touching an
    unknown label are excluded. Returns (mean-loss tensor, pair count);
    with no contributing pairs the loss is the constant 0.
    """
    cfg.validate()
    labels = np.asarray(labels)
    if labels.ndim == 1:
        labels = labels[None]
    known = labels != 0
    pos = labels == 1
    both_known = known[:, :, None] & known[:, None, :]
    both_pos = pos[:, :, None] & pos[:, None, :]
    c = labels.shape[1]
    off_diag = ~np.eye(c, dtype=bool)
    pos_mask = (both_known & both_pos & off_diag).astype(np.float64)
    neg_mask = (both_known & ~both_pos & off_diag).astype(np.float64)
    count = int(pos_mask.sum() + neg_mask.sum())
    if count == 0:
        return graph.leaf(0.0), 0

    p = graph.clip(cooc, 1e-7, 1.0 - 1e-7)
    one = graph.leaf(1.0)
    pos_term = graph.mul(graph.power(graph.sub(one, p), cfg.gamma_pos),
                         graph.neg(graph.log(p)))
    shifted = graph.relu(graph.sub(p, graph.leaf(cfg.margin)))
    neg_term = graph.mul(graph.power(shifted, cfg.gamma_neg),
                         graph.neg(graph.log(graph.sub(one, p))))
    weighted = graph.add(graph.mul(pos_term, graph.leaf(pos_mask)),
                         graph.mul(neg_term, graph.leaf(neg_mask)))
    loss = graph.mul(graph.sum(weighted), graph.leaf(1.0 / count))
    return loss, count


def statistical_cooccurrence(labels):
    """Dataset-level P(i positive | j positive) from known labels.

    Used by the ablation runner as the "statistical matrix" baseline in
    place of the learned image-specific matrices.
    """
    labels = np.asarray(labels)
    pos = (labels == 1).astype(np.float64)
    joint = pos.T @ pos  # (C, C) co-positive counts
    denom = np.maximum(pos.sum(axis=0), 1.0)
    stat = joint / denom[None, :]
    np.fill_diagonal(stat, 0.0)
    return stat
