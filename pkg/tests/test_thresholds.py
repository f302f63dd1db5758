import numpy as np
import pytest

from labeltransfer import autodiff as ad
from labeltransfer import thresholds
from labeltransfer.cooccur import intra_evidence


def test_differences_zero_at_threshold_and_unknowns():
    pair = thresholds.ThresholdPair(0.6, 0.2)
    cooc = np.zeros((3, 3))
    cooc[0, 1] = 0.6  # evidence for category 0 given positive 1
    labels = np.array([-1, 1, 0])
    sim_mean = np.array([0.2, 0.5, 0.9])
    d_i, d_c = thresholds.threshold_differences(cooc, sim_mean, labels, pair)
    assert d_i[0] == pytest.approx(0.0)   # evidence exactly at threshold
    assert d_c[0] == pytest.approx(0.0)
    assert d_i[2] == 0.0 and d_c[2] == 0.0  # unknown position masked


def test_differences_match_direct_formula():
    rng = np.random.default_rng(0)
    for _ in range(200):
        c = rng.integers(2, 8)
        pair = thresholds.ThresholdPair(rng.random(), rng.uniform(-1, 1))
        cooc = rng.random((c, c))
        sim = rng.uniform(-1, 1, size=c)
        labels = rng.choice([-1, 0, 1], size=c)
        d_i, d_c = thresholds.threshold_differences(cooc, sim, labels, pair)
        ti, tc = pair.effective()
        for cat in range(c):
            if labels[cat] == 0:
                assert d_i[cat] == 0.0 and d_c[cat] == 0.0
                continue
            ev = sum(cooc[cat, j] for j in range(c)
                     if j != cat and labels[j] == 1)
            assert d_i[cat] == pytest.approx(ev - ti, abs=1e-12)
            assert d_c[cat] == pytest.approx(sim[cat] - tc, abs=1e-12)


def test_dtl_loss_values():
    g = ad.Graph()
    theta = g.leaf(0.5, trainable=True)
    # evidence == theta: sigma(0) = 0.5 -> per-label contribution log 2
    loss = thresholds.dtl_loss(g, np.array([0.5]), np.array([1]), theta)
    assert loss.data.item() == pytest.approx(np.log(2.0))

    g = ad.Graph()
    theta = g.leaf(0.5, trainable=True)
    loss = thresholds.dtl_loss(g, np.array([50.0]), np.array([1]), theta)
    assert loss.data.item() < 1e-6  # saturated known positive


def test_dtl_loss_ignores_unknowns():
    rng = np.random.default_rng(1)
    labels = np.array([[1, 0, -1, 0]])
    base = rng.random((1, 4))
    g1 = ad.Graph()
    t1 = g1.leaf(0.4, trainable=True)
    l1 = thresholds.dtl_loss(g1, base, labels, t1)
    perturbed = base.copy()
    perturbed[0, [1, 3]] += rng.random(2) * 10
    g2 = ad.Graph()
    t2 = g2.leaf(0.4, trainable=True)
    l2 = thresholds.dtl_loss(g2, perturbed, labels, t2)
    assert l1.data.item() == l2.data.item()


def test_dtl_gradient_direction_and_finite_difference():
    # known positive with evidence below threshold: loss decreases as theta drops
    g = ad.Graph()
    theta = g.leaf(0.8, trainable=True)
    loss = thresholds.dtl_loss(g, np.array([0.3]), np.array([1]), theta)
    grads = ad.backward(g, loss)
    assert grads[theta.node_id].item() > 0.0  # gradient pushes theta down

    report = ad.grad_check(g, loss)
    assert max(report.values()) < 1e-6


def test_dtl_zero_known_contributes_zero():
    g = ad.Graph()
    theta = g.leaf(0.5, trainable=True)
    loss = thresholds.dtl_loss(g, np.zeros((2, 3)),
                               np.array([[0, 0, 0], [1, -1, 0]]), theta)
    # first sample contributes 0; only the second counts
    g2 = ad.Graph()
    t2 = g2.leaf(0.5, trainable=True)
    single = thresholds.dtl_loss(g2, np.zeros((1, 3)),
                                 np.array([[1, -1, 0]]), t2)
    assert loss.data.item() == pytest.approx(single.data.item() / 2)


def test_step_thresholds_zero_grad_and_clamp():
    pair = thresholds.ThresholdPair(0.5, 0.99)
    thresholds.step_thresholds((0.0, 0.0), pair, lr=0.1)
    assert pair.theta_intra == 0.5 and pair.theta_cross == 0.99

    for _ in range(100):
        thresholds.step_thresholds((None, -1.0), pair, lr=0.1)
    assert pair.theta_cross == 1.0  # clamped exactly at the bound


def test_threshold_converges_into_margin():
    # separable evidence: positives at >= 0.7, negatives at <= 0.45
    rng = np.random.default_rng(2)
    pair = thresholds.ThresholdPair(0.1, 0.0)
    for _ in range(400):
        labels = rng.choice([-1, 1], size=(8, 4))
        evidence = np.where(labels == 1, rng.uniform(0.7, 0.9, size=(8, 4)),
                            rng.uniform(0.3, 0.45, size=(8, 4)))
        g = ad.Graph()
        theta = g.leaf(pair.theta_intra, trainable=True)
        loss = thresholds.dtl_loss(g, evidence, labels, theta, beta=8.0)
        grads = ad.backward(g, loss)
        thresholds.step_thresholds((grads[theta.node_id].item(), None),
                                   pair, lr=0.02)
    assert 0.45 < pair.theta_intra < 0.7
