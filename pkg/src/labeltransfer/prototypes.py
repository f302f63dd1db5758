"""Per-category prototype banks and cross-image pseudo labels.

For every category, the feature vectors of samples where that category is a
known positive are clustered with Lloyd's K-means (k-means++ seeding). An
unknown label becomes a pseudo positive when the mean cosine similarity
between its feature vector and the category's K prototypes clears a
threshold. A pairwise ranking loss pulls same-category positives together
and pushes every other known pair apart.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass
class PrototypeBank:
    prototypes: np.ndarray  # (C, K, D')
    counts: np.ndarray      # (C, K) member counts from the last clustering
    valid: np.ndarray       # (C,) False where the category had no known positives

    @property
    def num_prototypes(self):
        return self.prototypes.shape[1]


@dataclass
class SimilarityRecord:
    sims: np.ndarray   # (B, C, K) cosine similarities
    mean: np.ndarray   # (B, C) average over prototypes
    valid: np.ndarray  # (C,) category has a usable bank entry


def _cosine_rows(a, b):
    """Row-wise cosine with zero vectors mapping to 0."""
    na = np.linalg.norm(a, axis=-1)
    nb = np.linalg.norm(b, axis=-1)
    denom = na * nb
    safe = np.where(denom > 0.0, denom, 1.0)
    s = (a * b).sum(axis=-1) / safe
    return np.clip(np.where(denom > 0.0, s, 0.0), -1.0, 1.0)


def kmeans_pp_seed(points, k, rng):
    """k-means++ seeding: spread initial centroids by squared distance."""
    n = points.shape[0]
    centroids = np.empty((k, points.shape[1]))
    centroids[0] = points[rng.integers(n)]
    d2 = ((points - centroids[0]) ** 2).sum(axis=1)
    for i in range(1, k):
        total = d2.sum()
        if total <= 0.0:
            centroids[i:] = points[rng.integers(n, size=k - i)]
            break
        probs = d2 / total
        centroids[i] = points[rng.choice(n, p=probs)]
        d2 = np.minimum(d2, ((points - centroids[i]) ** 2).sum(axis=1))
    return centroids


def kmeans(points, k, rng, max_iter=50, tol=1e-6):
    """Lloyd's algorithm. Returns (centroids, assignment, objective history).

    The objective (sum of squared distances to assigned centroids) is
    recorded once per iteration and is non-increasing. Stops after max_iter
    iterations or when the largest centroid shift drops below tol.
    """
    points = np.asarray(points, dtype=np.float64)
    centroids = kmeans_pp_seed(points, k, rng)
    history = []
    assign = None
    for _ in range(max_iter):
        d2 = ((points[:, None, :] - centroids[None, :, :]) ** 2).sum(axis=-1)
        assign = d2.argmin(axis=1)
        history.append(d2[np.arange(len(points)), assign].sum())
        new_centroids = centroids.copy()
        for j in range(k):
            members = points[assign == j]
            if len(members):
                new_centroids[j] = members.mean(axis=0)
        shift = np.abs(new_centroids - centroids).max()
        centroids = new_centroids
        if shift < tol:
            break
    d2 = ((points[:, None, :] - centroids[None, :, :]) ** 2).sum(axis=-1)
    assign = d2.argmin(axis=1)
    history.append(d2[np.arange(len(points)), assign].sum())
    return centroids, assign, np.asarray(history)


def build_prototypes(features, labels, k, seed):
    """Cluster known-positive category features into K prototypes per category.

    features: (N, C, D') per-sample category features; labels: (N, C)
    ternary. Categories with no known positives are flagged invalid. With
    fewer than K members, the member mean fills the missing slots so the
    bank keeps a static shape.
    """
    features = np.asarray(features, dtype=np.float64)
    labels = np.asarray(labels)
    n, c, dp = features.shape
    protos = np.zeros((c, k, dp))
    counts = np.zeros((c, k), dtype=np.int64)
    valid = np.zeros(c, dtype=bool)
    for cat in range(c):
        members = features[labels[:, cat] == 1, cat, :]
        if len(members) == 0:
            continue
        valid[cat] = True
        rng = np.random.default_rng(np.random.SeedSequence((seed, cat)))
        if len(members) < k:
            mean = members.mean(axis=0)
            protos[cat, : len(members)] = members
            protos[cat, len(members):] = mean
            counts[cat, : len(members)] = 1
        else:
            cents, assign, _ = kmeans(members, k, rng)
            protos[cat] = cents
            counts[cat] = np.bincount(assign, minlength=k)
    return PrototypeBank(protos, counts, valid)


def prototype_similarity(features, bank: PrototypeBank) -> SimilarityRecord:
    """Cosine similarity of each category feature to its K prototypes.

    features: (B, C, D') or (C, D'). Similarities for invalid categories are
    reported as 0 and masked by `valid`.
    """
    features = np.asarray(features, dtype=np.float64)
    squeeze = features.ndim == 2
    if squeeze:
        features = features[None]
    sims = _cosine_rows(features[:, :, None, :], bank.prototypes[None])  # (B,C,K)
    sims = np.where(bank.valid[None, :, None], sims, 0.0)
    mean = sims.mean(axis=-1)
    if squeeze:
        return SimilarityRecord(sims[0], mean[0], bank.valid)
    return SimilarityRecord(sims, mean, bank.valid)


def generate_cross_pseudo_labels(sim: SimilarityRecord, labels, theta_cross):
    """Pseudo positives for unknown labels with high mean prototype similarity.

    Known positions and invalid (empty-bank) categories never emit 1.
    """
    labels = np.asarray(labels)
    mean = sim.mean
    return ((mean >= theta_cross) & (labels == 0) & sim.valid).astype(np.int64)


def ranking_loss(graph, features, labels):
    """Pairwise cosine ranking loss over a batch of category features.

    features: graph tensor (B, C, D'); labels: numpy (B, C) ternary. For
    every sample pair (m, n), m < n, and category c with both labels known:
    contribution 1 - cos(f_m_c, f_n_c) when both are positive, else
    1 + cos. Pairs touching an unknown label are skipped. Returns
    (mean-loss tensor, contribution count).
    """
    labels = np.asarray(labels)
    b = labels.shape[0]
    if b < 2:
        return graph.leaf(0.0), 0
    m_idx, n_idx = np.triu_indices(b, k=1)
    known = labels != 0
    pos = labels == 1
    both_known = known[m_idx] & known[n_idx]          # (P, C)
    both_pos = pos[m_idx] & pos[n_idx]
    pull = (both_known & both_pos).astype(np.float64)
    push = (both_known & ~both_pos).astype(np.float64)
    count = int(pull.sum() + push.sum())
    if count == 0:
        return graph.leaf(0.0), 0
    fm = graph.take(features, m_idx, axis=0)
    fn = graph.take(features, n_idx, axis=0)
    s = graph.cosine(fm, fn)  # (P, C)
    one = graph.leaf(1.0)
    contrib = graph.add(graph.mul(graph.sub(one, s), graph.leaf(pull)),
                        graph.mul(graph.add(one, s), graph.leaf(push)))
    loss = graph.mul(graph.sum(contrib), graph.leaf(1.0 / count))
    return loss, count


def instance_level_similarity(features, labels):
    """Batch-local instance similarity evidence (ablation-runner variant).

    For each sample n and category c, the mean cosine between f_n_c and the
    features of other batch samples with known positive c. Categories with
    no in-batch positives are invalid.
    """
    features = np.asarray(features, dtype=np.float64)
    labels = np.asarray(labels)
    b, c, _ = features.shape
    mean = np.zeros((b, c))
    valid = np.zeros(c, dtype=bool)
    for cat in range(c):
        keep = np.flatnonzero(labels[:, cat] == 1)
        if len(keep) == 0:
            continue
        valid[cat] = True
        sims = _cosine_rows(features[:, None, cat, :], features[None, keep, cat, :])
        for i in range(b):
            others = keep != i
            if others.any():
                mean[i, cat] = sims[i][others].mean()
    sims_placeholder = mean[:, :, None]
    return SimilarityRecord(sims_placeholder, mean, valid)
