"""Brute-force references used by the test-suite.

Everything here works on the explicit joint Gaussian of all states and
observations, built from the independent noise sources, and never calls the
recursive filter/smoother code it is used to check.
"""

import numpy as np


def joint_gaussian(spec, T):
    """Mean and covariance of ``[k_0, k_1..k_T, Y_1..Y_T]`` (flattened).

    Returns ``(mean, cov, state_idx, obs_idx)`` where ``state_idx[t]`` are the
    positions of ``k_t`` (t = 0..T) and ``obs_idx[t-1]`` those of ``Y_t``.
    """
    s, p = spec.s, spec.p
    n_src = s + T * (1 + p)
    # every variable is an affine map of the sources xi = [k0, w_1..w_T, eps_1..eps_T]
    src_cov = np.zeros((n_src, n_src))
    src_cov[:s, :s] = spec.P0
    src_cov[s : s + T, s : s + T] = spec.sigma_w2 * np.eye(T)
    for t in range(T):
        o = s + T + t * p
        src_cov[o : o + p, o : o + p] = spec.R
    src_mean = np.zeros(n_src)
    src_mean[:s] = spec.k0

    rows, consts = [], []
    L = np.zeros((s, n_src))
    L[:, :s] = np.eye(s)
    c = np.zeros(s)
    states = [(L.copy(), c.copy())]
    for t in range(1, T + 1):
        L = spec.H @ L
        L[:, s + t - 1] += spec.G
        c = spec.H @ c + spec.u
        states.append((L.copy(), c.copy()))
    for L, c in states:
        rows.append(L)
        consts.append(c)
    for t in range(1, T + 1):
        L, c = states[t]
        Ly = spec.B @ L
        o = s + T + (t - 1) * p
        Ly[:, o : o + p] += np.eye(p)
        rows.append(Ly)
        consts.append(spec.A + spec.B @ c)
    Lall = np.vstack(rows)
    call = np.concatenate(consts)
    mean = Lall @ src_mean + call
    cov = Lall @ src_cov @ Lall.T
    state_idx = [np.arange(t * s, (t + 1) * s) for t in range(T + 1)]
    base = (T + 1) * s
    obs_idx = [np.arange(base + t * p, base + (t + 1) * p) for t in range(T)]
    return mean, cov, state_idx, obs_idx


def condition(mean, cov, target, given, values):
    """Moments of ``target`` given ``given == values`` (pseudo-inverse for safety)."""
    if len(given) == 0:
        return mean[target], cov[np.ix_(target, target)]
    Sgg = cov[np.ix_(given, given)]
    Stg = cov[np.ix_(target, given)]
    G = Stg @ np.linalg.pinv(Sgg, rcond=1e-13, hermitian=True)
    m = mean[target] + G @ (values - mean[given])
    C = cov[np.ix_(target, target)] - G @ Stg.T
    return m, C


def mvn_logpdf(x, mean, cov):
    d = len(x)
    if d == 0:
        return 0.0
    sign, logdet = np.linalg.slogdet(cov)
    r = x - mean
    return -0.5 * (d * np.log(2 * np.pi) + logdet + r @ np.linalg.solve(cov, r))


def observed_positions(Y, mask, obs_idx, upto):
    pos, vals = [], []
    for t in range(upto):
        idx = np.flatnonzero(mask[t])
        pos.extend(obs_idx[t][idx])
        vals.extend(Y[t, idx])
    return np.array(pos, dtype=int), np.array(vals, dtype=float)


def random_spec(rng, s, p, q_scale=1.0):
    from mfmort.ssm import StateSpaceSpec

    def psd(n, scale):
        M = rng.normal(size=(n, n))
        return scale * (M @ M.T / n + 0.2 * np.eye(n))

    H = rng.normal(scale=0.5, size=(s, s))
    return StateSpaceSpec(
        A=rng.normal(size=p),
        B=rng.normal(size=(p, s)),
        H=H,
        R=psd(p, 0.5),
        u=rng.normal(scale=0.3, size=s),
        G=rng.normal(size=s),
        sigma_w2=q_scale * rng.uniform(0.2, 1.5),
        k0=rng.normal(size=s),
        P0=psd(s, 1.0),
    )


def simulate_spec(spec, T, rng):
    s, p = spec.s, spec.p
    k = rng.multivariate_normal(spec.k0, spec.P0)
    Y = np.empty((T, p))
    for t in range(T):
        k = spec.H @ k + spec.u + spec.G * rng.normal() * np.sqrt(spec.sigma_w2)
        Y[t] = spec.A + spec.B @ k + rng.multivariate_normal(np.zeros(p), spec.R)
    return Y


def quantile_type7(x, q):
    """Order-statistic interpolation: h = (n-1) q, linear between neighbours."""
    xs = sorted(x)
    n = len(xs)
    h = (n - 1) * q
    lo = int(np.floor(h))
    hi = min(lo + 1, n - 1)
    return xs[lo] + (h - lo) * (xs[hi] - xs[lo])


def hand_annualize(P0, deaths, migration):
    """Month-by-month population / mid-month exposure accounting in plain Python."""
    pop = float(P0)
    tot_d = 0.0
    tot_e = 0.0
    for D in deaths:
        nxt = pop + migration - D
        tot_e += 0.5 * (pop + nxt)
        tot_d += D
        pop = nxt
    return tot_d, tot_e
