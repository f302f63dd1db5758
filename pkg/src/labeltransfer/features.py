"""Category-specific feature extraction and per-category classification.

Each category owns a trainable embedding that attends over a sample's region
features (scaled dot-product, softmax over regions). The attention-pooled
region mix is pushed through a small affine+ReLU encoder, giving one feature
vector per category per sample. Classification is an independent affine map
per category followed by a sigmoid.
"""

from __future__ import annotations

from dataclasses import dataclass, fields

import numpy as np


@dataclass
class SarlParams:
    category_embeddings: np.ndarray  # (C, D)
    enc_w1: np.ndarray  # (D, D')
    enc_b1: np.ndarray  # (D',)
    enc_w2: np.ndarray  # (D', D')
    enc_b2: np.ndarray  # (D',)
    cls_w: np.ndarray   # (C, D')
    cls_b: np.ndarray   # (C,)

    @property
    def num_categories(self):
        return self.category_embeddings.shape[0]

    @property
    def region_dim(self):
        return self.category_embeddings.shape[1]

    @property
    def feature_dim(self):
        return self.enc_w1.shape[1]


def init_sarl(rng, num_categories, region_dim, feature_dim):
    """Random init: embeddings uniform in [-1/sqrt(D), 1/sqrt(D)], He-scaled encoder."""
    d, dp = region_dim, feature_dim
    lim = 1.0 / np.sqrt(d)
    return SarlParams(
        category_embeddings=rng.uniform(-lim, lim, size=(num_categories, d)),
        enc_w1=rng.normal(0.0, np.sqrt(2.0 / d), size=(d, dp)),
        enc_b1=np.zeros(dp),
        enc_w2=rng.normal(0.0, np.sqrt(2.0 / dp), size=(dp, dp)),
        enc_b2=np.zeros(dp),
        cls_w=rng.normal(0.0, 1.0 / np.sqrt(dp), size=(num_categories, dp)),
        cls_b=np.zeros(num_categories),
    )


def param_items(params, prefix):
    """(name, array) pairs for any flat dataclass of numpy arrays."""
    return [(f"{prefix}.{f.name}", getattr(params, f.name)) for f in fields(params)]


def sarl_leaves(graph, params):
    """Register every SarlParams array as a trainable leaf; returns name -> Tensor."""
    return {name: graph.leaf(arr, trainable=True)
            for name, arr in param_items(params, "sarl")}


def extract_category_features(graph, regions, leaves):
    """Regions (B, R, D) -> category features (B, C, D').

    Attention weight of region r for category c is
    softmax_r(<embed_c, region_r> / sqrt(D)); the pooled region mix is then
    encoded by two affine+ReLU layers. Row order of regions does not matter.
    """
    emb = leaves["sarl.category_embeddings"]
    d = emb.data.shape[1]
    scores = graph.matmul(regions, graph.transpose(emb, (1, 0)))  # (B, R, C)
    scores = graph.mul(scores, graph.leaf(1.0 / np.sqrt(d)))
    attn = graph.softmax(scores, axis=1)  # normalize over regions
    pooled = graph.matmul(graph.transpose(attn, (0, 2, 1)), regions)  # (B, C, D)
    b, c = pooled.data.shape[0], pooled.data.shape[1]
    flat = graph.reshape(pooled, (b * c, d))
    h = graph.relu(graph.affine(flat, leaves["sarl.enc_w1"], leaves["sarl.enc_b1"]))
    out = graph.relu(graph.affine(h, leaves["sarl.enc_w2"], leaves["sarl.enc_b2"]))
    dp = leaves["sarl.enc_w2"].data.shape[1]
    return graph.reshape(out, (b, c, dp))


def classify(graph, features, leaves):
    """Category features (B, C, D') -> per-category probabilities (B, C)."""
    w = leaves["sarl.cls_w"]
    b = leaves["sarl.cls_b"]
    prod = graph.mul(features, w)  # broadcast (B, C, D') * (C, D')
    logits = graph.add(graph.sum(prod, axis=-1), b)
    return graph.sigmoid(logits)
