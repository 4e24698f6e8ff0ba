import json

import numpy as np
import pytest

from mfmort.mfss import (
    STATE_DIM,
    MfssParams,
    _row_moments,
    _state_moments,
    apply_identification,
    build_mfss_spec,
    e_step,
    em_fit,
    em_step,
    identify_triple,
    init_params,
    m_step,
    q_function,
    simulate_factor,
    simulate_observations,
)
from mfmort.ssm import conditional_obs_moments, kalman_filter, kalman_smoother, observed_loglik


def make_params(n_a=3, phi1=0.4, phi2=-0.1, mu=-0.02, sw=0.05, s1=1e-3, s2=1e-2, seed=0):
    rng = np.random.default_rng(seed)
    b = rng.uniform(0.5, 1.5, n_a)
    b /= b.sum()
    a2 = np.linspace(-6, -3, n_a)
    return MfssParams(a2 + np.log(12), a2, b, b, phi1, phi2, mu, sw, np.full(n_a, s1), np.full(n_a, s2))


def synth(params, T, seed):
    rng = np.random.default_rng(seed)
    k = simulate_factor(params, T, rng)
    return k, simulate_observations(params, k, rng)


def test_companion_structure():
    spec = build_mfss_spec(make_params(phi1=0.3, phi2=-0.2, mu=0.1))
    assert spec.s == STATE_DIM == 15
    row = spec.H[0]
    assert list(np.flatnonzero(row)) == [0, 1, 11, 12, 13]  # lags 1, 2, 12, 13, 14
    np.testing.assert_array_equal(row[[0, 1, 11, 12, 13]], [0.3, -0.2, 1.0, -0.3, 0.2])
    np.testing.assert_array_equal(spec.H[1:, :-1], np.eye(14))
    assert spec.u[0] == 0.1 and not spec.u[1:].any()
    np.testing.assert_array_equal(spec.G, np.eye(15)[0])


def test_loading_structure():
    p = make_params(n_a=2)
    spec = build_mfss_spec(p)
    np.testing.assert_allclose(spec.B[:2, :12], np.repeat(p.b1[:, None] / 12, 12, axis=1))
    assert not spec.B[:2, 12:].any()
    np.testing.assert_array_equal(spec.B[2:, 0], p.b2)
    assert not spec.B[2:, 1:].any()
    np.testing.assert_array_equal(np.diag(spec.R), np.concatenate([p.sigma1_2, p.sigma2_2]))
    with pytest.raises(ValueError):
        build_mfss_spec(p, 3)


def test_zero_ar_is_seasonal_random_walk():
    spec = build_mfss_spec(make_params(phi1=0.0, phi2=0.0, mu=0.0))
    x = np.random.default_rng(1).normal(size=15)
    hist = list(x[::-1])
    for _ in range(40):
        x = spec.H @ x + spec.u
        hist.append(x[0])
        assert x[0] == hist[-13]


def test_companion_mean_matches_scalar_recursion():
    phi1, phi2, mu = 0.55, -0.25, 0.03
    spec = build_mfss_spec(make_params(phi1=phi1, phi2=phi2, mu=mu))
    rng = np.random.default_rng(2)
    init = rng.normal(size=15)
    x = init.copy()
    k = list(init[::-1])  # oldest first
    for _ in range(30):
        x = spec.H @ x + spec.u
        k.append(mu + phi1 * k[-1] + phi2 * k[-2] + k[-12] - phi1 * k[-13] - phi2 * k[-14])
        assert x[0] == pytest.approx(k[-1], rel=1e-12, abs=1e-12)
    np.testing.assert_allclose(x, k[::-1][:15], rtol=1e-12)


def test_init_params_constant_panel():
    n_a, T = 3, 48
    Y = np.full((T, 2 * n_a), np.nan)
    mask = np.zeros_like(Y, dtype=bool)
    z = np.array([-5.0, -4.0, -3.0])
    Y[:, n_a:] = z
    mask[:, n_a:] = True
    Y[11::12, :n_a] = z + 2
    mask[11::12, :n_a] = True
    p = init_params((Y, mask), n_a)
    np.testing.assert_array_equal(p.b2, np.full(n_a, 1 / 3))
    np.testing.assert_array_equal(p.a2, z)
    assert p.phi1 == 0 and p.phi2 == 0 and p.mu == 0
    np.testing.assert_array_equal(p.sigma2_2, 1e-8)
    np.testing.assert_array_equal(p.sigma1_2, 1e-8)
    assert p.sigma_w2 == 1e-8


def test_init_params_means_and_short_sample():
    p0 = make_params()
    _, (Y, mask) = synth(p0, 60, 3)
    p = init_params((Y, mask), 3)
    for x in range(3):
        assert p.a2[x] == pytest.approx(np.mean(Y[:, 3 + x]), rel=1e-14)
        assert p.a1[x] == pytest.approx(np.mean(Y[mask[:, x], x]), rel=1e-14)
    assert np.all(p.sigma1_2 > 0) and np.all(p.sigma2_2 > 0)
    with pytest.raises(ValueError):
        init_params((Y[:30], mask[:30]), 3)


def test_december_annual_mean_is_year_average_of_factor():
    p = make_params()
    _, (Y, mask) = synth(p, 48, 4)
    spec = build_mfss_spec(p)
    sm = kalman_smoother(spec, kalman_filter(spec, (Y, mask)))
    for t in (11, 23, 35, 47):
        fitted = spec.A[:3] + spec.B[:3] @ sm.k_smooth[t]
        kbar = np.mean([sm.k_smooth[t - j, 0] for j in range(12)])
        np.testing.assert_allclose(fitted, p.a1 + p.b1 * kbar, atol=1e-10)


def test_diagonal_fast_path_matches_general_moments():
    p = make_params()
    _, (Y, mask) = synth(p, 30, 5)
    mask[7, 4] = False
    spec = build_mfss_spec(p)
    sm = kalman_smoother(spec, kalman_filter(spec, (Y, mask)))
    Ey, Eyy, Efy, Ef, Eff = _row_moments(p, sm, Y, mask)
    mom = conditional_obs_moments(spec, sm, (Y, mask))
    fA = np.r_[np.full(12, 1 / 12), np.zeros(3)]
    fM = np.eye(15)[0]
    F = np.array([fA] * 3 + [fM] * 3)  # (6, 15)
    np.testing.assert_allclose(Ey, mom.Y_mean, atol=1e-10)
    np.testing.assert_allclose(Eyy, np.diagonal(mom.Y_var, axis1=1, axis2=2) + mom.Y_mean**2, rtol=1e-10, atol=1e-10)
    cross = np.einsum("is,tsi->ti", F, mom.kY_cross)
    np.testing.assert_allclose(Efy, cross, rtol=1e-10, atol=1e-10)
    np.testing.assert_allclose(Ef, sm.k_smooth @ F.T, atol=1e-12)


def test_state_moments_match_explicit_joint_block():
    p = make_params()
    _, (Y, mask) = synth(p, 20, 6)
    spec = build_mfss_spec(p)
    sm = kalman_smoother(spec, kalman_filter(spec, (Y, mask)))
    Z = _state_moments(sm)
    for t in (0, 5, 19):
        xp = sm.k0_smooth if t == 0 else sm.k_smooth[t - 1]
        Pp = sm.P0_smooth if t == 0 else sm.P_smooth[t - 1]
        m = np.concatenate([sm.k_smooth[t], xp])
        C = np.block([[sm.P_smooth[t], sm.P_lag1[t]], [sm.P_lag1[t].T, Pp]])
        M = C + np.outer(m, m)
        L = np.zeros((4, 30))
        L[0, :] = 0
        L[1, 0], L[1, 15 + 11] = 1, -1
        L[2, 15], L[2, 15 + 12] = 1, -1
        L[3, 16], L[3, 15 + 13] = 1, -1
        ref = L @ M @ L.T
        ref[0, 0] = 1
        ref[0, 1:] = ref[1:, 0] = L[1:] @ m
        np.testing.assert_allclose(Z[t], ref, rtol=1e-10, atol=1e-10)


def test_m_step_maximises_q():
    p = make_params()
    _, obs = synth(p, 60, 7)
    e = e_step(init_params(obs, 3), obs)
    new = m_step(e.stats, 3)
    q0 = q_function(new, e.stats)
    names = ["a1", "a2", "b1", "b2", "sigma1_2", "sigma2_2"]
    for name in names:
        for i in range(3):
            for h in (1e-4, -1e-4):
                v = getattr(new, name).copy()
                v[i] += h * (abs(v[i]) if name.startswith("sigma") else 1.0)
                assert q_function(new.copy(**{name: v}), e.stats) <= q0
    for name in ("phi1", "phi2", "mu", "sigma_w2"):
        for h in (1e-4, -1e-4):
            v = getattr(new, name)
            v = v + h * (abs(v) if name == "sigma_w2" else 1.0)
            assert q_function(new.copy(**{name: v}), e.stats) <= q0


def test_em_is_monotone_without_warmup_trim():
    p = make_params(n_a=3)
    _, obs = synth(p, 96, 8)
    fit, sm, diag = em_fit(obs, init_params(obs, 3), max_iter=60, warmup=0, identify=False)
    assert np.all(np.diff(diag.logliks) >= -1e-8)
    assert diag.logliks[-1] == pytest.approx(observed_loglik(build_mfss_spec(fit), obs), rel=1e-12)


def test_em_diagnostics_and_fixed_point():
    p = make_params(n_a=3)
    _, obs = synth(p, 96, 9)
    fit, sm, diag = em_fit(obs, init_params(obs, 3), identify=False, warmup=0)
    assert diag.converged and diag.iterations < 200
    assert len(diag.q_values) == diag.iterations == len(diag.param_changes)
    assert len(diag.logliks) == diag.iterations + 1
    # one more iteration from the converged point barely moves Q or the likelihood
    new, q, ll = em_step(fit, obs, warmup=0)
    assert abs(q - diag.q_values[-1]) <= 1e-5 * abs(diag.q_values[-1])
    assert ll == pytest.approx(diag.logliks[-1], rel=1e-12)


def test_identification_invariance_class():
    rng = np.random.default_rng(10)
    a2, b2, k = rng.normal(size=4), rng.uniform(0.1, 1, 4), rng.normal(size=30)
    r1 = identify_triple(a2, b2, k)
    r2 = identify_triple(a2 + b2 * 3, b2 * 2, (k - 3) / 2)
    for u, v in zip(r1[:3], r2[:3]):
        np.testing.assert_allclose(u, v, atol=1e-12)
    assert r1[1].sum() == pytest.approx(1.0, abs=1e-12)
    assert r1[2].mean() == pytest.approx(0.0, abs=1e-12)
    again = identify_triple(*r1[:3])
    for u, v in zip(r1[:3], again[:3]):
        np.testing.assert_allclose(u, v, atol=1e-14)


def test_apply_identification_preserves_monthly_fit_and_likelihood():
    p = make_params()
    _, obs = synth(p, 48, 11)
    p = p.copy(b1=p.b1 * 3, b2=p.b2 * 3, a1=p.a1 - 1, a2=p.a2 - 1)
    spec = build_mfss_spec(p)
    sm = kalman_smoother(spec, kalman_filter(spec, obs))
    q, sm2 = apply_identification(p, sm)
    before = p.a2 + np.outer(sm.k_smooth[:, 0], p.b2)
    after = q.a2 + np.outer(sm2.k_smooth[:, 0], q.b2)
    np.testing.assert_allclose(after, before, atol=1e-10)
    assert q.b2.sum() == pytest.approx(1.0, abs=1e-12)
    assert q.b1.sum() == pytest.approx(1.0, abs=1e-12)
    assert sm2.k_smooth[:, 0].mean() == pytest.approx(0.0, abs=1e-12)
    assert q.meta["b1_rescale"] == pytest.approx(1.0, rel=1e-12)  # b1 == b2 here
    with pytest.raises(ValueError):
        apply_identification(p.copy(b2=np.zeros(3)), sm)


def test_params_json_roundtrip(tmp_path):
    p = make_params()
    p.meta.update({"ages": [60, 62], "fit_window": [2000, 2010], "warmup": 14, "tol": 1e-6, "iterations": 12})
    path = tmp_path / "p.json"
    p.save(path)
    keys = set(json.loads(path.read_text()))
    assert {"a1", "a2", "b1", "b2", "phi1", "phi2", "mu", "sigma_w2", "sigma1_2", "sigma2_2", "ages", "fit_window"} <= keys
    q = MfssParams.load(path)
    np.testing.assert_array_equal(q.to_vector(), p.to_vector())
    assert q.meta == p.meta


def test_nonfinite_parameters_rejected():
    p = make_params()
    _, obs = synth(p, 40, 12)
    with pytest.raises(FloatingPointError):
        em_fit(obs, p.copy(mu=np.nan))


def test_warmup_trim_reports_decreases_without_raising():
    p = make_params(n_a=3)
    _, obs = synth(p, 96, 9)
    fit, sm, diag = em_fit(obs, init_params(obs, 3), max_iter=120)
    steps = np.diff(diag.logliks)
    assert len(diag.failures) == int(np.sum(steps < -1e-6))
    assert diag.max_loglik_decrease == pytest.approx(max(0.0, -steps.min()))
    assert fit.meta["warmup"] == 14 and fit.meta["iterations"] == diag.iterations
