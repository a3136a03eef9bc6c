import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from gpp.encoder import encode, init_encoder, kl_divergence
from gpp.errors import DomainError
from gpp.nn import DenseNet, Layer, init_dense_net
from gpp.objective import (DiscreteJoint, GppLossConfig, adversary_classifier_loss,
                           combine_losses, cond_entropy_upper_bound_estimate,
                           cond_entropy_upper_bound_exact, conditional_mi, encoder_loss,
                           entropy, exact_mi_discrete, mi_lower_bound_estimate,
                           mi_lower_bound_exact, utility_classifier_loss)
from gpp.nn import cross_entropy, forward


def _uniform_clf(d_in, c):
    return DenseNet([Layer(np.zeros((d_in, c)), np.zeros(c), "softmax")])


def _perfect_clf(c):
    # one-hot inputs mapped through a large identity: near-certain predictions
    return DenseNet([Layer(200.0 * np.eye(c), np.zeros(c), "softmax")])


def test_uniform_utility_gives_log_19(rng):
    ce, _, _ = utility_classifier_loss(rng.standard_normal((8, 5)), rng.integers(0, 19, 8),
                                       _uniform_clf(5, 19))
    assert ce == pytest.approx(math.log(19), abs=1e-12)


def test_uniform_binary_adversary_gives_log_2(rng):
    ce, _, _ = adversary_classifier_loss(rng.standard_normal((8, 3)), rng.integers(0, 2, 8),
                                         _uniform_clf(3, 2))
    assert ce == pytest.approx(math.log(2), abs=1e-12)


def test_perfect_classifiers_give_zero_loss():
    labels = np.array([0, 1, 2, 1])
    z = np.eye(3)[labels]
    assert utility_classifier_loss(z, labels, _perfect_clf(3))[0] < 1e-12
    assert adversary_classifier_loss(z[:, :2][:2], labels[:2] % 2,
                                     _perfect_clf(2))[0] < 1e-12


def test_classifier_loss_matches_composition(rng):
    clf = init_dense_net((4, 6, 3), rng, output_activation="softmax")
    z, lab = rng.standard_normal((5, 4)), rng.integers(0, 3, 5)
    ce, _, _ = utility_classifier_loss(z, lab, clf)
    assert abs(ce - cross_entropy(forward(clf, z), lab)[0]) < 1e-12


def _setup(rng, d_x=5, d_z=2):
    enc = init_encoder(d_x, d_z, rng, hidden=(4,))
    x = rng.standard_normal((6, d_x))
    eps = rng.standard_normal((6, d_z))
    u = rng.integers(0, 3, 6)
    s = rng.integers(0, 2, 6)
    util = [init_dense_net((d_z, 4, 3), rng, output_activation="softmax")]
    adv = [init_dense_net((d_z, 4, 2), rng, output_activation="softmax")]
    return enc, x, eps, u, s, util, adv


def test_uniform_adversary_only(rng):
    enc, x, eps, u, s, util, _ = _setup(rng)
    res = encoder_loss(enc, x, eps, u, s, util, [_uniform_clf(2, 2)],
                       GppLossConfig(beta=0.0, lam=0.0))
    assert res.loss == pytest.approx(-math.log(2), abs=1e-12)
    assert all(np.all(g == 0) for g in res.grads)


def test_kl_only_term(rng):
    enc, x, eps, u, s, util, adv = _setup(rng)
    res = encoder_loss(enc, x, eps, u, s, util, adv,
                       GppLossConfig(beta=0.0, lam=0.3, adversary_weight=0.0))
    mu, lv = encode(enc, x)
    assert res.loss == pytest.approx(0.3 * kl_divergence(mu, lv)[0], abs=1e-14)


def test_beta_lambda_zero_is_negative_adversary_ce(rng):
    enc, x, eps, u, s, util, adv = _setup(rng)
    res = encoder_loss(enc, x, eps, u, s, util, adv, GppLossConfig(beta=0.0, lam=0.0))
    assert res.loss == -sum(res.adversary_ce)


@given(st.floats(0, 5), st.floats(0, 5), st.floats(0, 2), st.floats(0, 1))
def test_sign_structure(beta, delta, uce, sce):
    cfg = GppLossConfig(beta=beta, lam=0.1)
    base = combine_losses([uce], [sce, sce], 2.0, cfg)
    assert combine_losses([uce], [sce + delta, sce], 2.0, cfg) == pytest.approx(base - delta)
    assert combine_losses([uce + delta], [sce, sce], 2.0, cfg) == pytest.approx(base + beta * delta)


@pytest.mark.parametrize("seed", range(3))
def test_encoder_gradient_matches_finite_differences(seed):
    rng = np.random.default_rng(seed)
    enc, x, eps, u, s, util, adv = _setup(rng)
    cfg = GppLossConfig(beta=1.3, lam=0.2)
    res = encoder_loss(enc, x, eps, u, s, util, adv, cfg)
    h = 1e-6
    worst = 0.0
    for p, g in zip(enc.params(), res.grads):
        flat, gflat = p.reshape(-1), g.reshape(-1)
        for i in range(flat.size):
            old = flat[i]
            flat[i] = old + h
            lp = encoder_loss(enc, x, eps, u, s, util, adv, cfg).loss
            flat[i] = old - h
            lm = encoder_loss(enc, x, eps, u, s, util, adv, cfg).loss
            flat[i] = old
            fd = (lp - lm) / (2 * h)
            worst = max(worst, abs(fd - gflat[i]) / max(1e-7, abs(fd) + abs(gflat[i])))
    assert worst < 1e-4


def test_loss_config_rejects_negative():
    with pytest.raises(DomainError):
        GppLossConfig(beta=-1.0)


# --- exact information measures ---------------------------------------------

def _mi_double_loop(t):
    pz = [sum(row) for row in t]
    ps = [sum(t[i][j] for i in range(len(t))) for j in range(len(t[0]))]
    total = 0.0
    for i in range(len(t)):
        for j in range(len(t[0])):
            if t[i][j] > 0:
                total += t[i][j] * math.log(t[i][j] / (pz[i] * ps[j]))
    return total


def test_independent_joint_has_zero_mi():
    j = DiscreteJoint(np.outer([0.2, 0.8], [0.3, 0.3, 0.4]))
    assert exact_mi_discrete(j)[0] < 1e-15


def test_copy_joint_has_log2_mi():
    mi, h_s, h_sz = exact_mi_discrete(DiscreteJoint(np.diag([0.5, 0.5])))
    assert mi == pytest.approx(math.log(2), abs=1e-15) and abs(h_sz) < 1e-15


def test_random_joint_matches_double_loop(rng):
    t = rng.random((4, 3))
    t /= t.sum()
    mi, h_s, h_sz = exact_mi_discrete(DiscreteJoint(t))
    assert abs(mi - _mi_double_loop(t.tolist())) < 1e-12
    assert abs(mi - (h_s - h_sz)) < 1e-12


def test_invalid_joint_rejected():
    with pytest.raises(DomainError):
        DiscreteJoint(np.array([[0.5, 0.6]]))
    with pytest.raises(DomainError):
        DiscreteJoint(np.array([[-0.1, 1.1]]))


def _random_joint(rng):
    nz, ns = int(rng.integers(1, 9)), int(rng.integers(2, 5))
    t = rng.random((nz, ns)) ** 2
    t[rng.random(t.shape) < 0.2] = 0.0
    if t.sum() == 0:
        t[0, 0] = 1.0
    return DiscreteJoint(t / t.sum())


def _random_q(rng, shape):
    q = rng.random(shape) + 1e-3
    return q / q.sum(axis=1, keepdims=True)


def test_lower_bound_holds_on_random_joints():
    rng = np.random.default_rng(11)
    for _ in range(100):
        j = _random_joint(rng)
        mi = exact_mi_discrete(j)[0]
        assert mi_lower_bound_exact(j, _random_q(rng, j.table.shape)) <= mi + 1e-10
        assert abs(mi_lower_bound_exact(j, j.posterior()) - mi) < 1e-10


def test_upper_bound_holds_on_random_joints():
    rng = np.random.default_rng(12)
    for _ in range(100):
        j = _random_joint(rng)
        h_cond = exact_mi_discrete(j)[2]
        assert cond_entropy_upper_bound_exact(j, _random_q(rng, j.table.shape)) >= h_cond - 1e-10
        assert abs(cond_entropy_upper_bound_exact(j, j.posterior()) - h_cond) < 1e-10


def test_estimate_with_prior_q_is_zero(rng):
    s = rng.choice(2, 1000, p=[0.3, 0.7])
    cells = rng.integers(0, 3, 1000)
    ps = np.bincount(s) / s.size
    assert abs(mi_lower_bound_estimate(cells, s, np.tile(ps, (3, 1)))) < 1e-12


def test_estimate_converges_to_exact_mi():
    rng = np.random.default_rng(5)
    t = np.array([[0.3, 0.05], [0.1, 0.25], [0.05, 0.25]])
    j = DiscreteJoint(t)
    flat = rng.choice(t.size, 1_000_000, p=t.ravel())
    cells, s = np.divmod(flat, 2)
    est = mi_lower_bound_estimate(cells, s, j.posterior(), h_s=entropy(j.p_s))
    assert abs(est - exact_mi_discrete(j)[0]) < 5e-3
    est_h = cond_entropy_upper_bound_estimate(cells, s, j.posterior())
    assert abs(est_h - exact_mi_discrete(j)[2]) < 5e-3


def test_uniform_q_gives_log_cardinality(rng):
    cells, u = rng.integers(0, 4, 50), rng.integers(0, 6, 50)
    assert cond_entropy_upper_bound_estimate(cells, u, np.full((4, 6), 1 / 6)) == \
        pytest.approx(math.log(6), abs=1e-12)


def test_empty_sample_rejected():
    with pytest.raises(DomainError):
        mi_lower_bound_estimate([], [], np.full((1, 2), 0.5))


def test_conditional_mi_of_independent_pair_is_zero(rng):
    pc = np.array([0.4, 0.6])
    t = np.einsum("a,b,c->abc", [0.5, 0.5], [0.2, 0.8], pc)
    assert conditional_mi(t) < 1e-15
