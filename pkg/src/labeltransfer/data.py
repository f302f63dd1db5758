"""Synthetic multi-label datasets with planted pairwise label structure.

Labels are ternary: +1 known positive, -1 known negative, 0 unknown. The
generator plants two kinds of structure: a pairwise affinity matrix that
couples label occurrences, and one feature region per positive category drawn
around that category's center. `drop_labels` turns a fully labeled dataset
into a partial one by keeping an exact per-sample count of known positions.

File format: UTF-8 JSON lines. Line 1 is a header object
{version, C, D, R, N, seed, generator}; each following line is one sample
{id, labels, regions}.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

FORMAT_VERSION = 1


class DatasetError(Exception):
    """Malformed dataset file or invalid configuration."""


@dataclass
class Sample:
    id: str
    regions: np.ndarray  # (R, D) float64
    labels: np.ndarray   # (C,) int in {-1, 0, +1}


@dataclass
class Dataset:
    samples: list[Sample]
    num_categories: int
    feature_dim: int
    regions_per_sample: int
    provenance: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.samples)

    def label_matrix(self):
        return np.stack([s.labels for s in self.samples])

    def region_array(self):
        return np.stack([s.regions for s in self.samples])


@dataclass
class GeneratorConfig:
    num_categories: int
    num_samples: int
    regions_per_sample: int
    feature_dim: int
    pair_affinity: np.ndarray  # (C, C) symmetric, zero diagonal, log-odds
    category_centers: np.ndarray  # (C, D)
    base_logits: np.ndarray  # (C,) prior log-odds per category
    noise_sigma: float = 0.5
    seed: int = 0

    def validate(self):
        c, d = self.num_categories, self.feature_dim
        aff = np.asarray(self.pair_affinity, dtype=np.float64)
        if aff.shape != (c, c):
            raise DatasetError(f"pair_affinity must be {c}x{c}, got {aff.shape}")
        if not np.allclose(aff, aff.T):
            raise DatasetError("pair_affinity must be symmetric")
        if np.any(np.diag(aff) != 0.0):
            raise DatasetError("pair_affinity diagonal must be zero")
        if np.asarray(self.category_centers).shape != (c, d):
            raise DatasetError("category_centers must be C x D")
        if np.asarray(self.base_logits).shape != (c,):
            raise DatasetError("base_logits must have length C")
        if self.noise_sigma <= 0:
            raise DatasetError("noise_sigma must be positive")
        if min(c, self.num_samples, self.regions_per_sample, d) < 1:
            raise DatasetError("counts must be >= 1")


def paired_affinity_matrix(num_categories, pairs, strength):
    """Symmetric zero-diagonal affinity with `strength` on the given (i, j) pairs."""
    aff = np.zeros((num_categories, num_categories))
    for i, j in pairs:
        aff[i, j] = aff[j, i] = strength
    return aff


def benchmark_config(num_categories=20, num_samples=2000,
                     regions_per_sample=8, feature_dim=32,
                     pair_strength=5.0, noise_sigma=2.4, base_logit=-1.0,
                     center_scale=2.0, center_seed=100, seed=0):
    """Standard synthetic benchmark: consecutive category pairs (2i, 2i+1)
    share planted affinity; centers are drawn once from `center_seed` so the
    task geometry is identical across run seeds."""
    centers = np.random.default_rng(center_seed).normal(
        size=(num_categories, feature_dim)) * center_scale
    pairs = [(2 * i, 2 * i + 1) for i in range(num_categories // 2)]
    return GeneratorConfig(
        num_categories=num_categories,
        num_samples=num_samples,
        regions_per_sample=regions_per_sample,
        feature_dim=feature_dim,
        pair_affinity=paired_affinity_matrix(num_categories, pairs,
                                             pair_strength),
        category_centers=centers,
        base_logits=np.full(num_categories, float(base_logit)),
        noise_sigma=noise_sigma,
        seed=seed)


def _sigmoid(x):
    return 1.0 / (1.0 + np.exp(-x))


def generate(config: GeneratorConfig) -> Dataset:
    """Sample a fully labeled dataset from the planted pairwise model.

    Labels are drawn by sequential conditional sampling in fixed category
    order: category c is positive with probability
    sigmoid(base_c + sum of affinities to the already-positive categories).
    Each positive category claims one region near its center; leftover
    regions are background noise. When there are more positives than
    regions, the extra positives share regions round-robin.

    Per-sample RNG streams are derived from (seed, sample index), so the
    result is independent of any parallel evaluation order.
    """
    config.validate()
    c, n, r, d = (config.num_categories, config.num_samples,
                  config.regions_per_sample, config.feature_dim)
    aff = np.asarray(config.pair_affinity, dtype=np.float64)
    base = np.asarray(config.base_logits, dtype=np.float64)
    centers = np.asarray(config.category_centers, dtype=np.float64)

    samples = []
    for idx in range(n):
        rng = np.random.default_rng(np.random.SeedSequence((config.seed, idx)))
        labels = np.full(c, -1, dtype=np.int64)
        for cat in range(c):
            logit = base[cat] + aff[cat, : cat][labels[:cat] == 1].sum()
            if rng.random() < _sigmoid(logit):
                labels[cat] = 1
        regions = rng.normal(0.0, config.noise_sigma, size=(r, d))
        positives = np.flatnonzero(labels == 1)
        for k, cat in enumerate(positives):
            regions[k % r] = centers[cat] + rng.normal(
                0.0, config.noise_sigma, size=d)
        samples.append(Sample(id=f"s{idx:06d}", regions=regions, labels=labels))

    provenance = {
        "seed": config.seed,
        "noise_sigma": config.noise_sigma,
        "base_logits": base.tolist(),
        "pair_affinity": aff.tolist(),
        "category_centers": centers.tolist(),
    }
    return Dataset(samples, c, d, r, provenance)


def drop_labels(dataset: Dataset, known_proportion: float, seed: int) -> Dataset:
    """Keep exactly round(known_proportion * C) labels per sample, zero the rest.

    Retained positions are chosen uniformly without replacement; label values
    are never flipped. Deterministic for a fixed seed.
    """
    if not 0.0 < known_proportion <= 1.0:
        raise DatasetError(
            f"known_proportion must be in (0, 1], got {known_proportion}")
    c = dataset.num_categories
    keep = int(round(known_proportion * c))
    keep = max(keep, 1)
    rng = np.random.default_rng(np.random.SeedSequence((seed, 0x6d61736b)))
    out = []
    for s in dataset.samples:
        if np.any(s.labels == 0):
            raise DatasetError("drop_labels requires a fully labeled dataset")
        kept = rng.choice(c, size=keep, replace=False)
        labels = np.zeros(c, dtype=np.int64)
        labels[kept] = s.labels[kept]
        out.append(Sample(id=s.id, regions=s.regions, labels=labels))
    prov = dict(dataset.provenance)
    prov["known_proportion"] = known_proportion
    prov["drop_seed"] = seed
    return Dataset(out, c, dataset.feature_dim, dataset.regions_per_sample, prov)


def save(dataset: Dataset, path) -> None:
    header = {
        "version": FORMAT_VERSION,
        "C": dataset.num_categories,
        "D": dataset.feature_dim,
        "R": dataset.regions_per_sample,
        "N": len(dataset.samples),
        "seed": dataset.provenance.get("seed"),
        "generator": dataset.provenance,
    }
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(json.dumps(header, sort_keys=True) + "\n")
        for s in dataset.samples:
            rec = {
                "id": s.id,
                "labels": s.labels.tolist(),
                "regions": [[float(v) for v in row] for row in s.regions],
            }
            fh.write(json.dumps(rec, sort_keys=True) + "\n")


def load(path) -> Dataset:
    with open(path, encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    if not lines:
        raise DatasetError(f"{path}: empty file")
    try:
        header = json.loads(lines[0])
    except json.JSONDecodeError as exc:
        raise DatasetError(f"{path}: line 1: invalid header: {exc}") from exc
    for key in ("C", "D", "R", "N"):
        if key not in header:
            raise DatasetError(f"{path}: line 1: header missing '{key}'")
    c, d, r, n = header["C"], header["D"], header["R"], header["N"]
    if len(lines) - 1 != n:
        raise DatasetError(
            f"{path}: header says N={n} but file has {len(lines) - 1} records")
    samples = []
    for lineno, line in enumerate(lines[1:], start=2):
        try:
            rec = json.loads(line)
        except json.JSONDecodeError as exc:
            raise DatasetError(f"{path}: line {lineno}: invalid JSON: {exc}") from exc
        labels = np.asarray(rec.get("labels"), dtype=np.int64)
        if labels.shape != (c,):
            raise DatasetError(
                f"{path}: line {lineno}: expected {c} labels, got {labels.shape}")
        if not np.all(np.isin(labels, (-1, 0, 1))):
            raise DatasetError(
                f"{path}: line {lineno}: labels must be in {{-1, 0, 1}}")
        regions = np.asarray(rec.get("regions"), dtype=np.float64)
        if regions.shape != (r, d):
            raise DatasetError(
                f"{path}: line {lineno}: expected {r}x{d} regions, "
                f"got {regions.shape}")
        samples.append(Sample(id=str(rec.get("id", "")), regions=regions,
                              labels=labels))
    return Dataset(samples, c, d, r, header.get("generator", {}))


def train_test_split(dataset: Dataset, test_fraction: float, seed: int):
    """Deterministic shuffled split into (train, test) datasets."""
    n = len(dataset.samples)
    n_test = int(round(test_fraction * n))
    rng = np.random.default_rng(np.random.SeedSequence((seed, 0x73706c69)))
    order = rng.permutation(n)
    test_idx = set(order[:n_test].tolist())
    train = [dataset.samples[i] for i in range(n) if i not in test_idx]
    test = [dataset.samples[i] for i in range(n) if i in test_idx]
    mk = lambda ss: Dataset(ss, dataset.num_categories, dataset.feature_dim,
                            dataset.regions_per_sample, dict(dataset.provenance))
    return mk(train), mk(test)
