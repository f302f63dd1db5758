"""Learnable decision thresholds for pseudo-label generation.

The hard thresholds used when emitting pseudo labels are trained by
replacing the indicator with a sigmoid surrogate: for every known label the
evidence-minus-threshold difference d is mapped to sigma(beta * d) and fed
to the partial BCE loss, so known positives push the threshold below their
evidence and known negatives push it above. Evidence is treated as constant
here (stop-gradient); only the thresholds move.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .cooccur import intra_evidence

DEFAULT_BETA = 4.0


@dataclass
class AdamScalar:
    m: float = 0.0
    v: float = 0.0
    t: int = 0

    def step(self, value, grad, lr, beta1=0.9, beta2=0.999, eps=1e-8):
        self.t += 1
        self.m = beta1 * self.m + (1 - beta1) * grad
        self.v = beta2 * self.v + (1 - beta2) * grad * grad
        mh = self.m / (1 - beta1 ** self.t)
        vh = self.v / (1 - beta2 ** self.t)
        return value - lr * mh / (np.sqrt(vh) + eps)


@dataclass
class ThresholdPair:
    theta_intra: float = 0.5
    theta_cross: float = 0.5
    intra_state: AdamScalar = field(default_factory=AdamScalar)
    cross_state: AdamScalar = field(default_factory=AdamScalar)

    def effective(self):
        """Clamped read-time values: intra >= 0, cross in [-1, 1]."""
        return max(self.theta_intra, 0.0), float(np.clip(self.theta_cross, -1.0, 1.0))


def threshold_differences(cooc, sim_mean, labels, pair: ThresholdPair,
                          cross_valid=None):
    """Evidence-minus-threshold per category; zero at unknown positions.

    cooc: (B, C, C) or (C, C) co-occurrence probabilities; sim_mean: matching
    (B, C) or (C,) mean prototype similarities; labels ternary. Categories
    masked off by `cross_valid` get a zero cross difference.
    """
    labels = np.asarray(labels)
    known = labels != 0
    ti, tc = pair.effective()
    d_intra = np.where(known, intra_evidence(cooc, labels) - ti, 0.0)
    d_cross = np.where(known, np.asarray(sim_mean, dtype=np.float64) - tc, 0.0)
    if cross_valid is not None:
        d_cross = np.where(cross_valid, d_cross, 0.0)
    return d_intra, d_cross


def dtl_loss(graph, evidence, labels, theta, beta=DEFAULT_BETA, valid=None):
    """Partial BCE on sigma(beta * (evidence - theta)) over known labels.

    evidence: numpy (B, C), treated as constant; theta: scalar graph tensor.
    Per sample the loss is normalized by its known-label count; samples with
    none contribute 0; the result is the mean over samples. `valid` masks
    positions out of the loss: a (C,) mask drops whole categories, a (B, C)
    mask drops individual positions (e.g. ones whose evidence has no
    contributing voters). Returns the loss tensor.
    """
    labels = np.asarray(labels)
    if labels.ndim == 1:
        labels = labels[None]
        evidence = np.asarray(evidence)[None]
    known = labels != 0
    if valid is not None:
        valid = np.asarray(valid, dtype=bool)
        if valid.ndim == 1:
            valid = valid[None, :]
        known = known & valid
    pos = (labels == 1).astype(np.float64) * known
    neg = (labels == -1).astype(np.float64) * known
    counts = known.sum(axis=1).astype(np.float64)
    inv = np.where(counts > 0, 1.0 / np.maximum(counts, 1.0), 0.0)

    ev = graph.leaf(np.asarray(evidence, dtype=np.float64))
    d = graph.sub(ev, theta)  # theta broadcasts as a scalar
    p = graph.clip(graph.sigmoid(graph.mul(graph.leaf(beta), d)), 1e-7, 1 - 1e-7)
    one = graph.leaf(1.0)
    ll = graph.add(graph.mul(graph.leaf(pos), graph.log(p)),
                   graph.mul(graph.leaf(neg), graph.log(graph.sub(one, p))))
    per_sample = graph.mul(graph.sum(ll, axis=1), graph.leaf(inv))
    return graph.neg(graph.mean(per_sample))


def step_thresholds(grads, pair: ThresholdPair, lr):
    """One adaptive-moment update per scalar, then clamp to the legal range."""
    gi, gc = grads
    if gi is not None:
        pair.theta_intra = pair.intra_state.step(pair.theta_intra, float(gi), lr)
        pair.theta_intra = max(pair.theta_intra, 0.0)
    if gc is not None:
        pair.theta_cross = pair.cross_state.step(pair.theta_cross, float(gc), lr)
        pair.theta_cross = float(np.clip(pair.theta_cross, -1.0, 1.0))
    return pair
