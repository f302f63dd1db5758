import numpy as np
import pytest

from labeltransfer import autodiff as ad
from labeltransfer import cooccur


def run_pairnet(params, feats):
    g = ad.Graph()
    leaves = cooccur.pair_net_leaves(g, params)
    cooc = cooccur.predict_cooccurrence(g, g.leaf(feats), leaves)
    return g, cooc


def test_cooccurrence_in_unit_interval():
    rng = np.random.default_rng(0)
    params = cooccur.init_pair_net(rng, 5, hidden=(8, 8))
    feats = rng.normal(size=(3, 4, 5)) * 10
    _, cooc = run_pairnet(params, feats)
    assert np.all(cooc.data >= 0.0) and np.all(cooc.data <= 1.0)


def test_zero_final_layer_gives_half():
    rng = np.random.default_rng(1)
    params = cooccur.init_pair_net(rng, 5, hidden=(8, 8))
    params.w3[:] = 0.0
    params.b3[:] = 0.0
    feats = rng.normal(size=(2, 4, 5))
    _, cooc = run_pairnet(params, feats)
    np.testing.assert_array_equal(cooc.data, 0.5)


def test_intra_pseudo_no_known_positives():
    cooc = np.full((3, 3), 0.99)
    labels = np.array([-1, 0, 0])
    pseudo = cooccur.generate_intra_pseudo_labels(cooc, labels, 0.5)
    assert pseudo.sum() == 0


def test_intra_pseudo_direct_case():
    # C=3, category 1 known positive; evidence for c comes from p[c, 1]
    cooc = np.zeros((3, 3))
    cooc[1, 0] = 0.9  # evidence for category index 1 given positive index 0
    cooc[2, 0] = 0.5
    labels = np.array([1, 0, 0])
    pseudo = cooccur.generate_intra_pseudo_labels(cooc, labels, 0.8)
    np.testing.assert_array_equal(pseudo, [0, 1, 0])


def test_intra_pseudo_known_positions_masked():
    cooc = np.full((3, 3), 1.0)
    labels = np.array([1, -1, 0])
    pseudo = cooccur.generate_intra_pseudo_labels(cooc, labels, 0.1)
    assert pseudo[0] == 0 and pseudo[1] == 0 and pseudo[2] == 1


def brute_force_intra(cooc, labels, theta):
    c = len(labels)
    out = np.zeros(c, dtype=np.int64)
    for i in range(c):
        if labels[i] != 0:
            continue
        ev = 0.0
        for j in range(c):
            if j != i and labels[j] == 1:
                ev += cooc[i, j]
        out[i] = 1 if ev >= theta else 0
    return out


def test_intra_pseudo_matches_brute_force():
    rng = np.random.default_rng(2)
    for _ in range(300):
        c = rng.integers(2, 9)
        cooc = rng.random((c, c))
        labels = rng.choice([-1, 0, 1], size=c)
        theta = rng.random() * 2
        fast = cooccur.generate_intra_pseudo_labels(cooc, labels, theta)
        np.testing.assert_array_equal(fast, brute_force_intra(cooc, labels, theta))


def test_intra_pseudo_threshold_monotonicity():
    rng = np.random.default_rng(3)
    for _ in range(200):
        c = rng.integers(2, 9)
        cooc = rng.random((c, c))
        labels = rng.choice([-1, 0, 1], size=c)
        lo, hi = sorted(rng.random(2) * 2)
        n_hi = cooccur.generate_intra_pseudo_labels(cooc, labels, hi).sum()
        n_lo = cooccur.generate_intra_pseudo_labels(cooc, labels, lo).sum()
        assert n_hi <= n_lo


def test_asymmetric_loss_edge_contributions():
    g = ad.Graph()
    # positive pair with p = 1 contributes ~0 (clipped at 1 - 1e-7)
    cooc = g.leaf(np.full((1, 2, 2), 1.0))
    labels = np.array([[1, 1]])
    loss, count = cooccur.asymmetric_loss(g, cooc, labels,
                                          cooccur.AsymmetricLossConfig())
    assert count == 2
    assert abs(loss.data.item()) < 1e-6

    g = ad.Graph()
    # negative pair exactly at the margin contributes 0 via the clamp
    cooc = g.leaf(np.full((1, 2, 2), 0.05))
    labels = np.array([[1, -1]])
    loss, count = cooccur.asymmetric_loss(g, cooc, labels,
                                          cooccur.AsymmetricLossConfig())
    assert count == 2
    assert loss.data.item() == 0.0


def test_asymmetric_loss_reduces_to_bce():
    rng = np.random.default_rng(4)
    cfg = cooccur.AsymmetricLossConfig(0.0, 0.0, 0.0)
    for _ in range(20):
        c = rng.integers(2, 6)
        p = rng.uniform(0.05, 0.95, size=(1, c, c))
        labels = rng.choice([-1, 1], size=(1, c))
        g = ad.Graph()
        loss, count = cooccur.asymmetric_loss(g, g.leaf(p), labels, cfg)
        # brute-force pairwise BCE
        total, n = 0.0, 0
        for i in range(c):
            for j in range(c):
                if i == j:
                    continue
                if labels[0, i] == 1 and labels[0, j] == 1:
                    total += -np.log(p[0, i, j])
                else:
                    total += -np.log(1 - p[0, i, j])
                n += 1
        assert count == n
        assert loss.data.item() == pytest.approx(total / n, abs=1e-12)


def test_asymmetric_loss_empty():
    g = ad.Graph()
    cooc = g.leaf(np.full((1, 3, 3), 0.5))
    labels = np.array([[0, 0, 1]])  # a pair needs two known labels
    loss, count = cooccur.asymmetric_loss(g, cooc, labels,
                                          cooccur.AsymmetricLossConfig())
    assert count == 0 and loss.data.item() == 0.0


def test_asymmetric_loss_gradient_finite_difference():
    rng = np.random.default_rng(5)
    g = ad.Graph()
    # keep probabilities away from the clamp kink at p = margin
    raw = g.leaf(rng.uniform(-1.5, 1.5, size=(2, 4, 4)), trainable=True)
    p = g.sigmoid(raw)
    labels = rng.choice([-1, 0, 1], size=(2, 4))
    loss, _ = cooccur.asymmetric_loss(g, p, labels,
                                      cooccur.AsymmetricLossConfig())
    report = ad.grad_check(g, loss)
    assert max(report.values()) < 1e-4


def test_statistical_cooccurrence():
    labels = np.array([[1, 1, -1], [1, -1, -1], [0, 1, 1]])
    stat = cooccur.statistical_cooccurrence(labels)
    # P(0 pos | 1 pos): category 1 positive in rows 0 and 2; row 0 has 0 pos
    assert stat[0, 1] == pytest.approx(0.5)
    assert np.all(np.diag(stat) == 0.0)
