import math

import mpmath as mp
import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from hfo2ps import instances as inst
from hfo2ps import vtr
from hfo2ps.mdp import conditional_variance, phi_v, policy_value

from conftest import random_policy

# 40-digit evaluation of the radius formula at k=1, d=4, H=10, K=500, B=2, delta=0.01
BETA_K1_D4_H10_K500 = 1098.8128475325945


def _radius_oracle(k, d, H, K, B, delta):
    mp.mp.dps = 40
    xi = mp.sqrt(mp.mpf(d) / (K * H))
    g = mp.mpf(d) ** (-mp.mpf(1) / 4)
    lam = mp.mpf(d) / B**2
    L2 = mp.log(32 * (mp.log(g**2 / xi) + 1) * k**2 * H**2 / mp.mpf(delta))
    out = 12 * mp.sqrt(d * mp.log(1 + k * H / (xi**2 * d * lam)) * L2) + 30 * L2 / g**2 + mp.sqrt(lam) * B
    return float(out)


def _radius(k, d=4, H=10, K=500, B=2.0, delta=0.01, terms=(True, True, True)):
    td = vtr.theory_defaults(K, H, d, B)
    return vtr.confidence_radius(k, d, H, td.xi, td.gamma, td.lam, B, delta, terms)


# ---------------------------------------------------------------- radius


def test_radius_frozen_value():
    assert _radius(1) == pytest.approx(BETA_K1_D4_H10_K500, rel=1e-12)


@pytest.mark.parametrize("k", [1, 7, 200, 500])
def test_radius_matches_high_precision_oracle(k):
    assert _radius(k) == pytest.approx(_radius_oracle(k, 4, 10, 500, 2, 0.01), rel=1e-12)


def test_radius_nondecreasing_in_k():
    vals = [_radius(k) for k in range(1, 501)]
    assert all(b >= a for a, b in zip(vals, vals[1:]))
    assert all(v > 0 for v in vals)


def test_radius_only_prior_term():
    # sqrt(lam) B = sqrt(d) under the default lam = d / B^2
    assert _radius(5, terms=(False, False, True)) == pytest.approx(2.0, rel=1e-14)
    parts = sum(_radius(5, terms=t) for t in [(True, False, False), (False, True, False), (False, False, True)])
    assert parts == pytest.approx(_radius(5), rel=1e-14)


@pytest.mark.parametrize(
    "kwargs",
    [
        dict(k=0),
        dict(delta=0.0),
        dict(delta=1.5),
        dict(xi=0.0),
        dict(gamma=0.0),
        dict(lam=-1.0),
        dict(xi=1.0, gamma=0.5),  # gamma^2 / xi <= 1
    ],
)
def test_radius_domain_errors(kwargs):
    base = dict(k=1, d=4, H=10, xi=0.03, gamma=0.7, lam=1.0, B=2.0, delta=0.01)
    base.update(kwargs)
    with pytest.raises(ValueError):
        vtr.confidence_radius(**base)


def test_theory_defaults():
    td = vtr.theory_defaults(500, 10, 4, 2.0)
    assert td.levels == math.ceil(math.log2(4 * 500 * 10))
    assert td.xi == pytest.approx(math.sqrt(4 / 5000))
    assert td.gamma == pytest.approx(4 ** -0.25)
    assert td.lam == pytest.approx(1.0)
    assert td.alpha == pytest.approx(10 / math.sqrt(500))


# ---------------------------------------------------------------- confidence sets


def test_contains_at_center_has_margin_radius():
    cs = vtr.ConfidenceSet(np.array([0.1, 0.2]), 3.0 * np.eye(2), 1.5)
    ok, margin = vtr.confidence_contains(cs, cs.center)
    assert ok and margin == pytest.approx(1.5)


def test_zero_radius_excludes_other_points():
    cs = vtr.ConfidenceSet(np.zeros(2), np.eye(2), 0.0)
    ok, margin = vtr.confidence_contains(cs, np.array([1e-6, 0.0]))
    assert not ok and margin < 0


def test_confidence_set_rejects_bad_input():
    with pytest.raises(ValueError):
        vtr.ConfidenceSet(np.zeros(2), np.eye(2), -1.0)
    with pytest.raises(ValueError):
        vtr.ConfidenceSet(np.zeros(2), np.eye(3), 1.0)


def test_weighted_norm_inv_matches_dense(rng):
    A = rng.normal(size=(4, 4))
    Sigma = A @ A.T + np.eye(4)
    x = rng.normal(size=4)
    got = vtr.weighted_norm_inv(np.linalg.cholesky(Sigma), x)
    assert got == pytest.approx(math.sqrt(x @ np.linalg.solve(Sigma, x)), rel=1e-12)


# ---------------------------------------------------------------- optimistic backup


def _small_reward(rng, model):
    H = model.horizon
    return rng.uniform(0, 1.0 / H, size=(model.num_states, model.num_actions))


def test_backup_huge_radius_saturates(small_model, rng):
    m = small_model
    pol = random_policy(rng, m.horizon, m.num_states, m.num_actions)
    r = _small_reward(rng, m)
    out = vtr.optimistic_backup(r, pol, np.zeros(m.dim), np.eye(m.dim), 1e9, m)
    # the last stage sees V = 0, so phi_V = 0 and no bonus
    np.testing.assert_allclose(out.Q[-1], r)
    assert np.allclose(out.Q[:-1], 1.0)
    assert np.allclose(out.V[: m.horizon - 1], 1.0)
    assert np.all(out.V[m.horizon] == 0.0)


def test_backup_exact_parameter_is_policy_evaluation(small_model, rng):
    m = small_model
    pol = random_policy(rng, m.horizon, m.num_states, m.num_actions)
    r = _small_reward(rng, m)
    out = vtr.optimistic_backup(r, pol, m.theta_star, np.eye(m.dim), 0.0, m)
    V, Q = policy_value(m, pol, r)
    np.testing.assert_allclose(out.Q, Q, atol=1e-12)
    np.testing.assert_allclose(out.V, V, atol=1e-12)


@given(st.integers(0, 10_000))
def test_backup_is_optimistic_under_containment(seed):
    rng = np.random.default_rng(seed)
    m = inst.make_basis_mixture(4, 2, 4, 3, 2.0, seed=seed)
    pol = random_policy(rng, m.horizon, m.num_states, m.num_actions)
    r = _small_reward(rng, m)
    A = rng.normal(size=(3, 3))
    Sigma = A @ A.T + np.eye(3)
    theta_hat = m.theta_star + rng.normal(scale=0.05, size=3)
    cs = vtr.ConfidenceSet(theta_hat, Sigma, 0.0)
    beta = cs.norm(m.theta_star) * (1.0 + rng.uniform(0, 0.5))
    out = vtr.optimistic_backup(r, pol, theta_hat, Sigma, beta, m)
    V, Q = policy_value(m, pol, r)
    assert np.all(out.Q >= Q - 1e-12)
    assert np.all(out.V >= V - 1e-12)


def test_power_targets():
    V = np.array([0.0, 0.5, 0.9, 1.0])
    P = vtr.power_targets(V, 4)
    for m in range(4):
        np.testing.assert_allclose(P[m], V ** (2**m))


# ---------------------------------------------------------------- HOME


def _bank_inputs(d, M):
    I = np.repeat(np.eye(d)[None], M, axis=0)
    return I, I


def test_home_top_level_floor(rng):
    d, M = 3, 4
    phis = rng.normal(size=(M, d))
    phis[-1] = 0.0
    ch, ct = _bank_inputs(d, M)
    sigma2, vbar, err = vtr.home_variances(phis, rng.normal(size=(M, d)), ch, ct, 1.0, 0.5, 0.5)
    assert sigma2[-1] == 1.0
    assert np.isnan(vbar[-1]) and np.isnan(err[-1])


def test_home_zero_radius_has_zero_error(rng):
    d, M = 3, 5
    phis = rng.normal(size=(M, d))
    ch, ct = _bank_inputs(d, M)
    _, _, err = vtr.home_variances(phis, rng.normal(size=(M, d)), ch, ct, 0.0, 0.1, 0.5)
    np.testing.assert_array_equal(err[:-1], 0.0)


def test_home_exact_moments_give_conditional_variance(small_model, rng):
    m = small_model
    M = 4
    V = rng.uniform(size=m.num_states)
    targets = vtr.power_targets(V, M)
    ch, ct = _bank_inputs(m.dim, M)
    theta = np.repeat(m.theta_star[None], M, axis=0)
    for s in range(m.num_states):
        for a in range(m.num_actions):
            phis = np.stack([phi_v(m, targets[j], s, a) for j in range(M)])
            _, vbar, _ = vtr.home_variances(phis, theta, ch, ct, 0.0, 1e-3, 0.5)
            for j in range(M - 1):
                want = conditional_variance(m, targets[j], s, a)
                assert abs(vbar[j] - want) <= 1e-10


def test_home_weights_respect_floors(rng):
    d, M = 3, 5
    phis = rng.normal(size=(M, d))
    ch, ct = _bank_inputs(d, M)
    xi, gamma = 0.3, 0.6
    sigma2, _, _ = vtr.home_variances(phis, rng.normal(size=(M, d)), ch, ct, 1.0, xi, gamma)
    assert np.all(sigma2 >= xi**2)
    assert np.all(sigma2 >= gamma**2 * np.linalg.norm(phis, axis=1) - 1e-12)


# ---------------------------------------------------------------- regression bank


def test_zero_feature_update_is_noop():
    bank = vtr.MomentBank(3, 2, 1.0, 0.1, 0.5)
    before = bank.sigma_tilde.copy(), bank.b_tilde.copy()
    vtr.update_regression(bank, 0, np.zeros(3), 0.7, 1.0)
    np.testing.assert_array_equal(bank.sigma_tilde, before[0])
    np.testing.assert_array_equal(bank.b_tilde, before[1])


def test_single_update_closed_form():
    lam, t = 2.0, 0.6
    bank = vtr.MomentBank(3, 1, lam, 0.1, 0.5)
    vtr.update_regression(bank, 0, np.array([1.0, 0.0, 0.0]), t, 1.0)
    bank.end_episode()
    np.testing.assert_allclose(bank.theta_hat[0], [t / (lam + 1.0), 0.0, 0.0], atol=1e-15)


def test_update_rejects_nonpositive_weight():
    bank = vtr.MomentBank(2, 1, 1.0, 0.1, 0.5)
    with pytest.raises(ValueError):
        bank.update(0, np.ones(2), 0.5, 0.0)
    with pytest.raises(ValueError):
        bank.update_all(np.ones((1, 2)), np.ones(1), np.zeros(1))


def test_update_all_matches_sequential(rng):
    a = vtr.MomentBank(3, 4, 1.0, 0.1, 0.5)
    b = vtr.MomentBank(3, 4, 1.0, 0.1, 0.5)
    for _ in range(5):
        phis, tg, s2 = rng.normal(size=(4, 3)), rng.uniform(size=4), rng.uniform(0.5, 2, size=4)
        a.update_all(phis, tg, s2)
        for j in range(4):
            b.update(j, phis[j], tg[j], math.sqrt(s2[j]))
    np.testing.assert_allclose(a.sigma_tilde, b.sigma_tilde, atol=1e-12)
    np.testing.assert_allclose(a.b_tilde, b.b_tilde, atol=1e-12)


def test_bank_invariants_and_loewner_order(rng):
    bank = vtr.MomentBank(3, 2, 0.5, 0.1, 0.5)
    prev = bank.sigma_tilde.copy()
    for k in range(6):
        bank.begin_episode()
        for _ in range(4):
            bank.update_all(rng.normal(size=(2, 3)), rng.uniform(size=2), rng.uniform(0.5, 2, size=2))
            assert np.linalg.eigvalsh(bank.sigma_tilde - prev).min() >= -1e-12
            prev = bank.sigma_tilde.copy()
        bank.end_episode()
        inv = bank.check_invariants()
        assert inv["min_eig_minus_lambda"] >= -1e-12
        assert inv["normal_eq_residual"] <= 1e-12


def test_det_ratio_indicator():
    bank = vtr.MomentBank(3, 2, 1.0, 0.1, 0.5)
    bank.begin_episode()
    assert bank.det_ratio_indicator() == 1
    seq = []
    phi = np.array([1.0, 0.0, 0.0])
    for _ in range(10):
        bank.update(0, phi, 0.5, 1.0)
        seq.append(bank.det_ratio_indicator())
    assert all(b <= a for a, b in zip(seq, seq[1:]))
    bank.update(1, 1e6 * phi, 0.5, 1.0)
    assert bank.det_ratio_indicator() == 0
    bank.end_episode()
    bank.begin_episode()
    assert bank.det_ratio_indicator() == 1


def test_moment_bank_rejects_bad_params():
    with pytest.raises(ValueError):
        vtr.MomentBank(0, 1, 1.0, 0.1, 0.5)
    with pytest.raises(ValueError):
        vtr.MomentBank(2, 1, 0.0, 0.1, 0.5)


def test_regression_coverage_monte_carlo():
    # N = kH noisy updates with unit weights; the radius for that k should cover theta*
    d, H, K, B, delta = 3, 10, 100, 1.0, 0.05
    td = vtr.theory_defaults(K, H, d, B)
    beta = vtr.confidence_radius(K, d, H, td.xi, td.gamma, td.lam, B, delta)
    hits = 0
    runs = 40
    for seed in range(runs):
        rng = np.random.default_rng(seed)
        theta = rng.dirichlet(np.ones(d)) * B
        bank = vtr.MomentBank(d, 1, td.lam, td.xi, td.gamma)
        for _ in range(K * H):
            phi = rng.dirichlet(np.ones(d)) / math.sqrt(d)
            mean = phi @ theta
            y = mean + rng.uniform(-0.5, 0.5)
            bank.update(0, phi, y, 1.0)
        bank.end_episode()
        hits += vtr.confidence_contains(bank.confidence_set(beta), theta)[0]
    assert hits / runs >= 0.95
