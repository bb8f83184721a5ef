import math

import numpy as np
import pytest

from selcorr.lcr import (
    RepellenceConfig,
    correspondence_matrix,
    evaluate_loss,
    lcr_gradient,
    locality_matrix,
    loss_and_gradient,
    pair_weight,
    repellence_matrix,
    token_coords,
)


def _random_instance(rng, n=None, dp=None):
    n = n or int(rng.integers(3, 12))
    dp = dp or int(rng.integers(2, 6))
    phi = rng.standard_normal((n, dp))
    pos = rng.uniform(0.0, 8.0, size=(n, 2))
    labels = rng.random(n) < 0.5
    if labels.all() or not labels.any():
        labels[0] = ~labels[0]
    return phi, pos, labels


def test_token_coords():
    coords = token_coords(2, 3)
    assert coords.tolist() == [[0, 0], [0, 1], [0, 2], [1, 0], [1, 1], [1, 2]]


def test_locality_matrix_hand_value():
    f = locality_matrix(np.array([[0.0, 0.0], [3.0, 4.0]]))
    assert f[0, 1] == pytest.approx(math.log(6.0), abs=1e-15)
    assert f[0, 0] == 0.0 and f[1, 1] == 0.0
    assert f[0, 1] == f[1, 0]


def test_repellence_matrix_pattern():
    cfg = RepellenceConfig(r_att_att=5.0, r_att_inatt=4.0, r_inatt_inatt=2.0)
    r = repellence_matrix(np.array([True, False, True]), cfg)
    expect = [[5.0, 4.0, 5.0], [4.0, 2.0, 4.0], [5.0, 4.0, 5.0]]
    assert r.tolist() == expect


def test_correspondence_rows_stochastic():
    rng = np.random.default_rng(11)
    for tau in (0.01, 0.07, 1.0):
        for _ in range(10):
            phi, _, _ = _random_instance(rng)
            p = correspondence_matrix(phi, tau=tau)
            assert np.abs(p.sum(axis=1) - 1.0).max() <= 1e-9
            assert p.min() >= 0.0


def test_correspondence_includes_self_pair():
    rng = np.random.default_rng(12)
    phi = rng.standard_normal((5, 3))
    p = correspondence_matrix(phi, tau=0.07)
    # cosine self-similarity is the row maximum, so the diagonal dominates
    assert (np.argmax(p, axis=1) == np.arange(5)).all()


def test_low_temperature_approaches_one_hot():
    rng = np.random.default_rng(13)
    phi = rng.standard_normal((6, 4))
    p = correspondence_matrix(phi, tau=1e-3)
    assert np.diag(p).min() > 1.0 - 1e-9


def test_raw_logits_mode():
    phi = np.array([[2.0, 0.0], [0.0, 1.0]])
    p = correspondence_matrix(phi, tau=1.0, cosine=False)
    # row 0 logits: 4 and 0
    assert p[0, 0] == pytest.approx(math.exp(4.0) / (math.exp(4.0) + 1.0), rel=1e-12)


def test_partials_partition_total():
    rng = np.random.default_rng(14)
    for _ in range(10):
        phi, pos, labels = _random_instance(rng)
        out = evaluate_loss(phi, pos, labels, RepellenceConfig())
        parts = out.att_att + out.att_inatt + out.inatt_inatt
        assert abs(out.total - parts) <= 1e-12 * max(abs(out.total), 1.0)


def test_loss_is_linear_in_repellence_weights():
    rng = np.random.default_rng(15)
    phi, pos, labels = _random_instance(rng)
    base = RepellenceConfig(r_att_att=5.0, r_att_inatt=5.0, r_inatt_inatt=2.0)
    c = 3.7
    scaled = RepellenceConfig(r_att_att=5.0 * c, r_att_inatt=5.0 * c, r_inatt_inatt=2.0 * c)
    l0 = evaluate_loss(phi, pos, labels, base).total
    l1 = evaluate_loss(phi, pos, labels, scaled).total
    assert abs(l1 - c * l0) <= 1e-12 * abs(l1)


def test_diagonal_never_contributes():
    # the locality factor zeroes self pairs, so total is the off-diagonal sum
    rng = np.random.default_rng(16)
    phi, pos, labels = _random_instance(rng)
    cfg = RepellenceConfig()
    out = evaluate_loss(phi, pos, labels, cfg)
    w = pair_weight(pos, labels, cfg)
    terms = w * out.correspondence
    assert out.total == pytest.approx(terms[~np.eye(len(labels), dtype=bool)].sum(), rel=1e-12)


@pytest.mark.parametrize("cosine", [True, False])
def test_gradient_matches_finite_differences(cosine):
    rng = np.random.default_rng(17)
    phi, pos, labels = _random_instance(rng, n=7, dp=3)
    cfg = RepellenceConfig(tau=0.07, cosine=cosine)
    grad = lcr_gradient(phi, pos, labels, cfg)
    h = 1e-5
    fd = np.zeros_like(phi)
    for i in range(phi.shape[0]):
        for j in range(phi.shape[1]):
            p1, p2 = phi.copy(), phi.copy()
            p1[i, j] += h
            p2[i, j] -= h
            fd[i, j] = (
                evaluate_loss(p1, pos, labels, cfg).total
                - evaluate_loss(p2, pos, labels, cfg).total
            ) / (2.0 * h)
    assert np.abs(grad - fd).max() <= 1e-6 * max(np.abs(fd).max(), 1.0)


def test_loss_and_gradient_consistent_with_evaluate():
    rng = np.random.default_rng(18)
    phi, pos, labels = _random_instance(rng)
    cfg = RepellenceConfig()
    w = pair_weight(pos, labels, cfg)
    total, _ = loss_and_gradient(phi, w, tau=cfg.tau, cosine=cfg.cosine)
    assert total == pytest.approx(evaluate_loss(phi, pos, labels, cfg).total, rel=1e-12)


def test_validation_errors():
    with pytest.raises(ValueError):
        RepellenceConfig(tau=0.0).validate()
    with pytest.raises(ValueError):
        RepellenceConfig(r_att_att=-1.0).validate()
    with pytest.raises(ValueError):
        correspondence_matrix(np.zeros((2, 2)), tau=-1.0)
    with pytest.raises(ValueError):
        correspondence_matrix(np.zeros((2, 2)))  # zero rows cannot be normalized
    with pytest.raises(ValueError):
        locality_matrix(np.zeros((3, 3)))
    with pytest.raises(ValueError):
        evaluate_loss(np.zeros((3, 2)) + 1.0, np.zeros((2, 2)), np.zeros(3, dtype=bool), RepellenceConfig())
