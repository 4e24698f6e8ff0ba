"""
Acceptance criteria.  Each test prints one ``criterion N [PASS|FAIL|SKIP]``
line (uncaptured) and then asserts the criterion.
"""

import os
import time
from pathlib import Path

import numpy as np
import pytest

from mfmort.data import AgeGrid, load_data
from mfmort.evaluate import EvalSpec, run_nowcast
from mfmort.forecast import annualize_deaths, prediction_interval, simulate_paths
from mfmort.mfss import build_mfss_spec, em_fit, init_params
from mfmort.reconcile import WeightMatrix, bottom_up, estimate_weights, reconcile
from mfmort.ssm import kalman_filter, kalman_smoother
from mfmort.synth import default_config, default_params, generate
from oracles import condition, joint_gaussian, mvn_logpdf, observed_positions, random_spec

DATA_ENV = "MFMORT_DATA_DIR"


@pytest.fixture
def report(capsys):
    def emit(n, ok, detail):
        status = "PASS" if ok else "FAIL"
        with capsys.disabled():
            print(f"\ncriterion {n} [{status}] {detail}")

    return emit


def _rel(a, b, scale):
    return float(np.max(np.abs(np.asarray(a) - np.asarray(b)))) / scale


def test_criterion_1_filter_smoother_oracle(report):
    t0 = time.perf_counter()
    worst = 0.0
    rng = np.random.default_rng(2024)
    for _ in range(50):
        s, p, T = int(rng.integers(1, 4)), int(rng.integers(1, 4)), int(rng.integers(1, 7))
        spec = random_spec(rng, s, p)
        Y = rng.normal(size=(T, p)) * 2
        mask = rng.random((T, p)) < 0.7
        out = kalman_filter(spec, (Y, mask))
        sm = kalman_smoother(spec, out)
        mean, cov, sidx, oidx = joint_gaussian(spec, T)
        scale = max(1.0, np.abs(cov).max())
        for t in range(T):
            pos, vals = observed_positions(Y, mask, oidx, t + 1)
            m, C = condition(mean, cov, sidx[t + 1], pos, vals)
            worst = max(worst, _rel(out.k_filt[t], m, scale), _rel(out.P_filt[t], C, scale))
        pos, vals = observed_positions(Y, mask, oidx, T)
        for t in range(T):
            m, C = condition(mean, cov, np.concatenate([sidx[t + 1], sidx[t]]), pos, vals)
            worst = max(
                worst,
                _rel(sm.k_smooth[t], m[:s], scale),
                _rel(sm.P_smooth[t], C[:s, :s], scale),
                _rel(sm.P_lag1[t], C[:s, s:], scale),
            )
        ll = mvn_logpdf(vals, mean[pos], cov[np.ix_(pos, pos)])
        worst = max(worst, abs(out.loglik - ll) / max(1.0, abs(ll)))
    secs = time.perf_counter() - t0
    ok = worst <= 1e-8 and secs < 10
    report(1, ok, f"50 random systems, max relative deviation {worst:.2e} (tol 1e-8), {secs:.2f}s (< 10s)")
    assert ok


def _em_panel(seed, n_a=5, years=(2000, 2014)):
    data = generate(default_config(n_a, years, seed=seed)).data
    return data.stacked(*years)


def test_criterion_2_em_monotonicity(report, capsys):
    t0 = time.perf_counter()
    worst, iters, converged = 0.0, [], 0
    for seed in range(10):
        obs = _em_panel(seed)
        _, _, diag = em_fit(obs, init_params(obs, 5))
        worst = max(worst, diag.max_loglik_decrease)
        iters.append(diag.iterations)
        converged += diag.converged
    secs = time.perf_counter() - t0
    # informational: the same panels without the warm-up trim in the M-step
    worst0, conv0 = 0.0, 0
    for seed in range(3):
        obs = _em_panel(seed)
        _, _, d0 = em_fit(obs, init_params(obs, 5), warmup=0)
        worst0 = max(worst0, d0.max_loglik_decrease)
        conv0 += d0.converged
    with capsys.disabled():
        print(f"\ncriterion 2 [INFO] warmup=0 variant on 3 panels: max loglik decrease {worst0:.2e}, converged {conv0}/3")
    ok = worst <= 1e-8 and converged == 10 and secs < 300
    report(
        2,
        ok,
        f"10 panels (default warm-up 14): max loglik decrease {worst:.2e} (tol 1e-8), "
        f"converged {converged}/10, iterations median {int(np.median(iters))} max {max(iters)}, {secs:.0f}s",
    )
    assert ok


def test_criterion_3_parameter_recovery(report):
    hits = []
    detail = []
    for seed in range(10):
        cfg = default_config(10, (2000, 2019), seed=seed)
        truth = cfg.params
        obs = generate(cfg).data.stacked(2000, 2019)
        est, _, _ = em_fit(obs, init_params(obs, 10))
        err = max(abs(est.phi1 - truth.phi1), abs(est.phi2 - truth.phi2), abs(est.mu - truth.mu))
        corr = float(np.corrcoef(est.b2, truth.b2)[0, 1])
        hits.append(err <= 0.15 and corr > 0.95)
        detail.append(f"{err:.3f}/{corr:.3f}")
    ok = sum(hits) >= 8
    report(3, ok, f"{sum(hits)}/10 seeds recover (phi1, phi2, mu) within 0.15 and corr(b2) > 0.95; max err/corr per seed {detail}")
    assert ok


def test_criterion_4_coherence(report):
    rng = np.random.default_rng(4)
    worst = 0.0
    for i in range(1000):
        D = rng.uniform(-1, 1, 13) * 10 ** rng.uniform(0, 4)
        errs = rng.normal(size=(int(rng.integers(1, 25)), 13))
        for method in ("full", "scaled"):
            r = reconcile(D, estimate_weights(errs, method))
            worst = max(worst, abs(r[0] - r[1:].sum()) / max(1e-300, np.abs(r).max()))
    D = rng.uniform(50, 150, 13)
    bu = reconcile(D, WeightMatrix(np.diag([1e12] + [1.0] * 12), "scaled"))
    bu_err = float(np.max(np.abs(bu - bottom_up(D[1:])) / np.abs(bottom_up(D[1:]))))
    ok = worst <= 1e-9 and bu_err <= 1e-6
    report(4, ok, f"1000 vectors x 2 methods: max coherence gap {worst:.2e} (tol 1e-9); bottom-up limit rel err {bu_err:.2e} (tol 1e-6)")
    assert ok


def test_criterion_5_annualization(report):
    hand = annualize_deaths(np.full((12, 1), 10.0), np.array([1000.0]), 0.0)
    zero = annualize_deaths(np.zeros((12, 1)), np.array([1000.0]), 0.0)
    offset = annualize_deaths(np.full((12, 1), 10.0), np.array([1000.0]), np.array([10.0]))
    degenerate_ok = bool(zero.rate[0] == 0.0 and np.all(zero.exposure == 1000.0))
    degenerate_ok &= bool(offset.rate[0] == 10.0 / 1000.0 and np.all(offset.exposure == 1000.0))
    literal = abs(hand.rate[0] - 0.0105820) <= 1e-10
    # the stated value is 120 / 11340 rounded; recursion gives 120 / 11280
    oracle = abs(hand.rate[0] - 120.0 / 11280.0) <= 1e-10
    ok = literal and degenerate_ok
    report(
        5,
        ok,
        f"recursion m = {hand.rate[0]:.10f}, exposure sum {hand.exposure.sum():.0f}; stated 0.0105820 matched: {literal}; "
        f"hand recursion 120/11280 matched: {oracle}; degenerate cases exact: {degenerate_ok}",
    )
    assert ok


def test_criterion_6_nowcast_anchoring(report):
    months = list(range(1, 12))
    ss = np.zeros((20, 11))
    lc = np.zeros((20, 11))
    for r in range(20):
        data = generate(default_config(5, (2000, 2015), seed=100 + r)).data
        spec = EvalSpec(targets=[2015], months=months, methods=["ss_monthly", "lc_monthly"], B=2000, seed=r)
        tab = run_nowcast(spec, data).table()
        ss[r] = [tab[("ss_monthly", 1, h)] for h in months]
        lc[r] = [tab[("lc_monthly", 1, h)] for h in months]
    ssm, lcm = ss.mean(axis=0), lc.mean(axis=0)
    dec_ss = bool(np.all(np.diff(ssm[3:]) < 0))
    dec_lc = bool(np.all(np.diff(lcm[3:]) < 0))
    early = bool(np.all(ssm[:3] <= lcm[:3]))
    ok = dec_ss and dec_lc and early
    fmt = lambda v: " ".join(f"{100 * x:.3f}" for x in v)  # noqa: E731
    report(
        6,
        ok,
        f"mean MAPE% h=1..11 ss_monthly [{fmt(ssm)}] lc_monthly [{fmt(lcm)}]; "
        f"strictly decreasing h=4..11 ss {dec_ss} lc {dec_lc}; ss <= lc at h=1..3 {early}",
    )
    assert ok


def test_criterion_7_interval_coverage(report):
    params = default_params(3)
    spec = build_mfss_spec(params)
    n_a, T, H = 3, 48, 12
    rng = np.random.default_rng(77)
    L0 = np.linalg.cholesky(spec.P0)
    Lr = np.linalg.cholesky(spec.R)
    sw = np.sqrt(spec.sigma_w2)
    hits = 0
    for rep in range(1000):
        x = spec.k0 + L0 @ rng.standard_normal(spec.s)
        Y = np.empty((T + H, spec.p))
        for t in range(T + H):
            x = spec.H @ x + spec.u + spec.G * sw * rng.standard_normal()
            Y[t] = spec.A + spec.B @ x + Lr @ rng.standard_normal(spec.p)
        mask = np.ones_like(Y, dtype=bool)
        mask[(np.arange(T + H) % 12) != 11, :n_a] = False
        f = kalman_filter(spec, (Y[:T], mask[:T]))
        sim = simulate_paths(spec, f.k_filt[-1], f.P_filt[-1], H, 2000, seed=rep, keep={"y": ([H], [0])})
        lo, hi = prediction_interval(np.exp(sim.obs["y"][:, 0, 0]), 0.05)
        truth = np.exp(Y[T + H - 1, 0])
        hits += bool(lo <= truth <= hi)
    cov = hits / 1000
    ok = abs(cov - 0.95) <= 0.03
    report(7, ok, f"95% interval for the 12-month-ahead annual rate covers truth in {100 * cov:.1f}% of 1000 replications (B=2000)")
    assert ok


def test_criterion_8_data_replication(report, capsys):
    root = os.environ.get(DATA_ENV)
    if not root:
        with capsys.disabled():
            print(f"\ncriterion 8 [SKIP] set {DATA_ENV} to a directory with annual_rates.csv, monthly_deaths.csv, population.csv (ages 20-90, 1999-2019)")
        pytest.skip("licensed data not supplied")
    root = Path(root)
    data = load_data(root / "annual_rates.csv", root / "monthly_deaths.csv", root / "population.csv", AgeGrid(20, 90), (1999, 2019))
    spec = EvalSpec(targets=[2015], months=list(range(1, 12)), methods=["lc_annual", "ss_monthly", "lc_monthly", "ss_annual"])
    tab = run_nowcast(spec, data).table()
    lc_a = [tab[("lc_annual", 1, h)] for h in range(1, 12)]
    flat = len(set(lc_a)) == 1
    lowest = all(
        tab[("ss_monthly", 1, h)] <= min(tab[(m, 1, h)] for m in ("lc_annual", "lc_monthly", "ss_annual")) for h in range(5, 12)
    )
    close = abs(100 * lc_a[0] - 3.942) <= 0.15
    ok = flat and lowest and close
    report(8, ok, f"LC-annual 2015 MAPE {100 * lc_a[0]:.3f}% (target 3.942 +/- 0.15), flat {flat}, SS-monthly lowest for h>=5 {lowest}")
    assert ok
