"""
Mixed-frequency Lee-Carter state-space model and its EM estimation.

The state is the 15-vector ``x_t = (k_t, k_{t-1}, ..., k_{t-14})`` of the
monthly period factor, which follows a SARIMA(2,0,0)(0,1,0)_12 with drift::

    k_t = mu + phi1 k_{t-1} + phi2 k_{t-2} + k_{t-12} - phi1 k_{t-13} - phi2 k_{t-14} + w_t

Each month stacks an annual block (log annual rates, observed in December
only, loading equally on the 12 months of the year) over a monthly block
(scaled log monthly deaths, loading on the current month).
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field, fields

import numpy as np

from .lc import sarima_fit
from .ssm import SmootherOutput, StateSpaceSpec, as_masked, kalman_filter, kalman_smoother

log = logging.getLogger(__name__)

STATE_DIM = 15
MONTHS = 12
WARMUP = 14
VAR_FLOOR = 1e-8
_AR_COLS = (0, 1, 11, 12, 13)


class EmNumericalError(FloatingPointError):
    pass


@dataclass
class MfssParams:
    a1: np.ndarray
    a2: np.ndarray
    b1: np.ndarray
    b2: np.ndarray
    phi1: float
    phi2: float
    mu: float
    sigma_w2: float
    sigma1_2: np.ndarray
    sigma2_2: np.ndarray
    meta: dict = field(default_factory=dict)

    _VECTORS = ("a1", "a2", "b1", "b2", "sigma1_2", "sigma2_2")
    _SCALARS = ("phi1", "phi2", "mu", "sigma_w2")

    def __post_init__(self):
        for name in self._VECTORS:
            setattr(self, name, np.asarray(getattr(self, name), dtype=float).reshape(-1))
        for name in self._SCALARS:
            setattr(self, name, float(getattr(self, name)))
        n = {getattr(self, v).size for v in self._VECTORS}
        if len(n) != 1:
            raise ValueError("age vectors differ in length")

    @property
    def n_a(self) -> int:
        return self.a1.size

    def to_vector(self) -> np.ndarray:
        return np.concatenate([getattr(self, v) for v in self._VECTORS] + [[getattr(self, s) for s in self._SCALARS]])

    def copy(self, **changes) -> "MfssParams":
        vals = {f.name: getattr(self, f.name) for f in fields(self)}
        vals = {k: (v.copy() if isinstance(v, (np.ndarray, dict)) else v) for k, v in vals.items()}
        vals.update(changes)
        return MfssParams(**vals)

    def check_finite(self):
        if not np.all(np.isfinite(self.to_vector())):
            raise EmNumericalError("non-finite MF-SS parameter")

    def to_dict(self) -> dict:
        out = {v: getattr(self, v).tolist() for v in self._VECTORS}
        out.update({s: getattr(self, s) for s in self._SCALARS})
        out["model"] = "mfss"
        out.update(self.meta)
        return out

    @classmethod
    def from_dict(cls, d: dict) -> "MfssParams":
        keys = set(cls._VECTORS) | set(cls._SCALARS)
        meta = {k: v for k, v in d.items() if k not in keys and k != "model"}
        return cls(**{k: d[k] for k in keys}, meta=meta)

    def save(self, path):
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=2)

    @classmethod
    def load(cls, path) -> "MfssParams":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


@dataclass
class EmDiagnostics:
    q_values: list = field(default_factory=list)
    logliks: list = field(default_factory=list)
    param_changes: list = field(default_factory=list)
    iterations: int = 0
    converged: bool = False
    failures: list = field(default_factory=list)

    @property
    def max_loglik_decrease(self) -> float:
        if len(self.logliks) < 2:
            return 0.0
        return float(max(0.0, -np.diff(self.logliks).min()))

    def to_dict(self) -> dict:
        return {
            "q_values": self.q_values,
            "logliks": self.logliks,
            "param_changes": self.param_changes,
            "iterations": self.iterations,
            "converged": self.converged,
            "failures": self.failures,
        }


def companion_matrix(phi1: float, phi2: float) -> np.ndarray:
    H = np.zeros((STATE_DIM, STATE_DIM))
    H[0, list(_AR_COLS)] = [phi1, phi2, 1.0, -phi1, -phi2]
    H[np.arange(1, STATE_DIM), np.arange(STATE_DIM - 1)] = 1.0
    return H


def loading_vectors() -> tuple[np.ndarray, np.ndarray]:
    """State-to-factor maps ``f_A`` (mean of the current year's months) and ``f_M``."""
    fA = np.zeros(STATE_DIM)
    fA[:MONTHS] = 1.0 / MONTHS
    fM = np.zeros(STATE_DIM)
    fM[0] = 1.0
    return fA, fM


def build_mfss_spec(params: MfssParams, n_a: int | None = None, *, k0=None, P0_scale: float = 1.0) -> StateSpaceSpec:
    n = params.n_a
    if n_a is not None and n_a != n:
        raise ValueError(f"parameters are for {n} ages, expected {n_a}")
    fA, fM = loading_vectors()
    B = np.vstack([np.outer(params.b1, fA), np.outer(params.b2, fM)])
    u = np.zeros(STATE_DIM)
    u[0] = params.mu
    G = fM.copy()
    return StateSpaceSpec(
        A=np.concatenate([params.a1, params.a2]),
        B=B,
        H=companion_matrix(params.phi1, params.phi2),
        R=np.diag(np.concatenate([params.sigma1_2, params.sigma2_2])),
        u=u,
        G=G,
        sigma_w2=params.sigma_w2,
        k0=np.zeros(STATE_DIM) if k0 is None else k0,
        P0=P0_scale * np.eye(STATE_DIM),
    )


def _year_means(k: np.ndarray, T: int) -> np.ndarray:
    """Mean of the 12 monthly values ending at each month (NaN before month 12)."""
    out = np.full(T, np.nan)
    c = np.concatenate([[0.0], np.cumsum(k)])
    out[MONTHS - 1 :] = (c[MONTHS:] - c[:-MONTHS]) / MONTHS
    return out


def init_params(obs, n_a: int) -> MfssParams:
    """Moment-based starting values from the stacked series."""
    Y, mask = as_masked(obs, 2 * n_a)
    T = Y.shape[0]
    if T < 3 * MONTHS:
        raise ValueError(f"need at least 3 years of monthly data, got {T} months")
    yA = np.where(mask[:, :n_a], Y[:, :n_a], np.nan)
    z = np.where(mask[:, n_a:], Y[:, n_a:], np.nan)
    if np.any(np.all(np.isnan(yA), axis=0)) or np.any(np.all(np.isnan(z), axis=0)):
        raise ValueError("some age has no observations")
    a1 = np.nanmean(yA, axis=0)
    a2 = np.nanmean(z, axis=0)
    b = np.full(n_a, 1.0 / n_a)
    zc = z - a2
    col = np.nanmean(zc, axis=1)
    if np.any(np.isnan(col)):
        # months without any monthly data: carry the previous value
        for t in np.flatnonzero(np.isnan(col)):
            col[t] = col[t - 1] if t > 0 else 0.0
    k = n_a * col
    dyn = sarima_fit(k)
    res2 = zc - np.outer(k, b)
    s2 = np.maximum(np.nanmean(res2**2, axis=0), VAR_FLOOR)
    kbar = _year_means(k, T)
    res1 = yA - a1 - np.outer(kbar, b)
    with np.errstate(invalid="ignore"):
        s1 = np.nanmean(res1**2, axis=0)
    s1 = np.maximum(np.where(np.isnan(s1), np.nanvar(yA, axis=0), s1), VAR_FLOOR)
    return MfssParams(a1, a2, b.copy(), b.copy(), dyn.phi1, dyn.phi2, dyn.c, max(dyn.sigma2, VAR_FLOOR), s1, s2)


# ---------------------------------------------------------------------------
# E-step sufficient statistics
# ---------------------------------------------------------------------------


@dataclass
class SuffStats:
    """Warm-up-trimmed sums of expected moments.

    Observation rows (annual then monthly ages) each regress on their own
    factor ``phi = f' x``; per row we keep ``n, sum E[y], sum E[phi],
    sum E[phi^2], sum E[phi y], sum E[y^2]``.  The state part keeps the 4x4
    moment matrix of ``(1, g, r1, r2)`` with ``g = x_t[0] - x_{t-1}[11]``,
    ``r1 = x_{t-1}[0] - x_{t-1}[12]``, ``r2 = x_{t-1}[1] - x_{t-1}[13]``.
    """

    n: int
    Sy: np.ndarray
    Sf: np.ndarray
    Sff: np.ndarray
    Sfy: np.ndarray
    Syy: np.ndarray
    Z: np.ndarray


def _row_moments(params: MfssParams, sm: SmootherOutput, Y, mask):
    """Per-(t, row) E[y], E[y^2], E[phi y], E[phi], E[phi^2] for diagonal R."""
    n_a = params.n_a
    fA, fM = loading_vectors()
    xs, Ps = sm.k_smooth, sm.P_smooth
    mA, mM = xs @ fA, xs @ fM
    vA = np.einsum("i,tij,j->t", fA, Ps, fA)
    vM = Ps[:, 0, 0]
    Ef = np.column_stack([np.repeat(mA[:, None], n_a, 1), np.repeat(mM[:, None], n_a, 1)])
    vf = np.column_stack([np.repeat(vA[:, None], n_a, 1), np.repeat(vM[:, None], n_a, 1)])
    a = np.concatenate([params.a1, params.a2])
    beta = np.concatenate([params.b1, params.b2])
    s2 = np.concatenate([params.sigma1_2, params.sigma2_2])
    mu = a + beta * Ef
    y = np.where(mask, Y, 0.0)
    Ey = np.where(mask, y, mu)
    Eyy = np.where(mask, y**2, mu**2 + s2 + beta**2 * vf)
    Efy = np.where(mask, Ef * y, Ef * mu + beta * vf)
    return Ey, Eyy, Efy, Ef, vf + Ef**2


def _state_moments(sm: SmootherOutput) -> np.ndarray:
    """(T, 4, 4) second moments of (1, g, r1, r2)."""
    T, s = sm.k_smooth.shape
    x_prev = np.vstack([sm.k0_smooth[None, :], sm.k_smooth[:-1]])
    P_prev = np.concatenate([sm.P0_smooth[None], sm.P_smooth[:-1]])
    L = np.zeros((3, 2 * s))
    L[0, 0] = 1.0
    L[0, s + 11] = -1.0
    L[1, s + 0], L[1, s + 12] = 1.0, -1.0
    L[2, s + 1], L[2, s + 13] = 1.0, -1.0
    m = np.concatenate([sm.k_smooth, x_prev], axis=1) @ L.T  # (T, 3)
    La, Lb = L[:, :s], L[:, s:]
    C = (
        La @ sm.P_smooth @ La.T
        + La @ sm.P_lag1 @ Lb.T
        + Lb @ np.swapaxes(sm.P_lag1, 1, 2) @ La.T
        + Lb @ P_prev @ Lb.T
    )
    Z = np.empty((T, 4, 4))
    Z[:, 0, 0] = 1.0
    Z[:, 0, 1:] = m
    Z[:, 1:, 0] = m
    Z[:, 1:, 1:] = C + m[:, :, None] * m[:, None, :]
    return Z


def sufficient_stats(params: MfssParams, sm: SmootherOutput, obs, warmup: int = WARMUP) -> SuffStats:
    Y, mask = as_masked(obs, 2 * params.n_a)
    if Y.shape[0] <= warmup:
        raise ValueError("sample shorter than the warm-up period")
    Ey, Eyy, Efy, Ef, Eff = _row_moments(params, sm, Y, mask)
    Z = _state_moments(sm)
    sl = slice(warmup, None)
    n = Y.shape[0] - warmup
    return SuffStats(
        n, Ey[sl].sum(0), Ef[sl].sum(0), Eff[sl].sum(0), Efy[sl].sum(0), Eyy[sl].sum(0), Z[sl].sum(0)
    )


# ---------------------------------------------------------------------------
# Q-function and M-step
# ---------------------------------------------------------------------------


def q_function(params: MfssParams, st: SuffStats) -> float:
    """Expected complete-data log-likelihood over the trimmed sample.

    Drops the initial-state term and the 2*pi constants.
    """
    a = np.concatenate([params.a1, params.a2])
    beta = np.concatenate([params.b1, params.b2])
    s2 = np.concatenate([params.sigma1_2, params.sigma2_2])
    n = st.n
    sse = st.Syy - 2 * a * st.Sy - 2 * beta * st.Sfy + n * a**2 + 2 * a * beta * st.Sf + beta**2 * st.Sff
    q_obs = -0.5 * np.sum(n * np.log(s2) + sse / s2)
    # state residual g - mu - phi1 r1 - phi2 r2 = th' (1, g, r1, r2)
    th =np.array([-params.mu, 1.0, -params.phi1, -params.phi2])
    sse_w = float(th @ st.Z @ th)
    q_state = -0.5 * (n * np.log(params.sigma_w2) + sse_w / params.sigma_w2)
    return float(q_obs + q_state)


def m_step(st: SuffStats, n_a: int, prev: MfssParams | None = None) -> MfssParams:
    n = st.n
    det = n * st.Sff - st.Sf**2
    if np.any(det <= 0):
        raise EmNumericalError("singular per-age normal equations")
    beta = (n * st.Sfy - st.Sf * st.Sy) / det
    a = (st.Sy - beta * st.Sf) / n
    sse = st.Syy - 2 * a * st.Sy - 2 * beta * st.Sfy + n * a**2 + 2 * a * beta * st.Sf + beta**2 * st.Sff
    s2 = np.maximum(sse / n, VAR_FLOOR)
    Z = st.Z
    idx = [0, 2, 3]
    Srr = Z[np.ix_(idx, idx)]
    Srg = Z[idx, 1]
    theta = np.linalg.solve(Srr, Srg)
    sw = float(Z[1, 1] - 2 * theta @ Srg + theta @ Srr @ theta) / n
    meta = dict(prev.meta) if prev is not None else {}
    out = MfssParams(
        a[:n_a], a[n_a:], beta[:n_a], beta[n_a:], theta[1], theta[2], theta[0], max(sw, VAR_FLOOR), s2[:n_a], s2[n_a:], meta
    )
    out.check_finite()
    return out


@dataclass
class EStep:
    spec: StateSpaceSpec
    smoother: SmootherOutput
    loglik: float
    stats: SuffStats


def e_step(params: MfssParams, obs, warmup: int = WARMUP) -> EStep:
    spec = build_mfss_spec(params)
    filt = kalman_filter(spec, obs)
    sm = kalman_smoother(spec, filt)
    return EStep(spec, sm, filt.loglik, sufficient_stats(params, sm, obs, warmup))


def param_change(new: MfssParams, old: MfssParams) -> float:
    a, b = new.to_vector(), old.to_vector()
    return float(np.max(np.abs(a - b)) / max(1.0, np.max(np.abs(b))))


def em_step(params: MfssParams, obs, warmup: int = WARMUP) -> tuple[MfssParams, float, float]:
    """One EM iteration: returns (new params, Q at the new params, loglik at the old)."""
    e = e_step(params, obs, warmup)
    new = m_step(e.stats, params.n_a, params)
    return new, q_function(new, e.stats), e.loglik


def em_fit(
    obs,
    init: MfssParams,
    tol: float = 1e-6,
    max_iter: int = 200,
    *,
    warmup: int = WARMUP,
    identify: bool = True,
) -> tuple[MfssParams, SmootherOutput, EmDiagnostics]:
    """EM to a (local) maximum of the observed-data likelihood.

    Stops when the relative change of the maximised Q-function falls below
    ``tol``.  Identification is applied once, after convergence, to both
    the parameters and the smoothed states.
    """
    init.check_finite()
    diag = EmDiagnostics()
    params = init
    q_prev = None
    for it in range(1, max_iter + 1):
        e = e_step(params, obs, warmup)
        new = m_step(e.stats, params.n_a, params)
        q = q_function(new, e.stats)
        diag.logliks.append(float(e.loglik))
        diag.q_values.append(q)
        diag.param_changes.append(param_change(new, params))
        diag.iterations = it
        if len(diag.logliks) > 1 and diag.logliks[-1] < diag.logliks[-2] - 1e-6:
            diag.failures.append(f"loglik decreased by {diag.logliks[-2] - diag.logliks[-1]:.3g} at iteration {it}")
        params = new
        if q_prev is not None and abs(q - q_prev) <= tol * abs(q_prev):
            diag.converged = True
            break
        q_prev = q
    if not diag.converged:
        log.warning("EM stopped at max_iter=%d without meeting tol=%g", max_iter, tol)
    final = e_step(params, obs, warmup)
    diag.logliks.append(float(final.loglik))
    if diag.logliks[-1] < diag.logliks[-2] - 1e-6:
        diag.failures.append(f"loglik decreased by {diag.logliks[-2] - diag.logliks[-1]:.3g} at the final update")
    if diag.failures:
        log.warning(
            "observed loglik decreased at %d EM updates (max %.3g); M-step sums exclude the first %d periods",
            len(diag.failures),
            diag.max_loglik_decrease,
            warmup,
        )
    params.meta.update({"warmup": warmup, "tol": tol, "iterations": diag.iterations, "converged": diag.converged})
    params.meta["loglik"] = float(final.loglik)
    sm = final.smoother
    if identify:
        params, sm = apply_identification(params, sm)
    return params, sm, diag


# ---------------------------------------------------------------------------
# identification
# ---------------------------------------------------------------------------


def identify_triple(a, b, k):
    """Shift ``k`` to mean zero and scale ``b`` to sum one; returns (a', b', k', c, s)."""
    a, b, k = (np.asarray(v, dtype=float) for v in (a, b, k))
    c = float(k.mean())
    s = float(b.sum())
    if s == 0:
        raise ValueError("sum of monthly loadings is zero")
    return a + b * c, b / s, (k - c) * s, c, s


def apply_identification(params: MfssParams, sm: SmootherOutput | np.ndarray):
    """Impose ``mean(k) = 0`` and ``sum(b2) = 1`` exactly, then ``sum(b1) = 1``.

    The first two are likelihood-preserving reparametrisations (a shift
    absorbed into ``a1, a2`` and a scale absorbed into ``b1, b2, mu,
    sigma_w2``).  The last rescales ``b1`` alone, which is a restriction on
    the annual block; the factor is kept in ``meta['b1_rescale']``.

    ``sm`` is either a smoother output (all states are transformed) or a
    plain path of current-month factors.
    """
    path = sm.k_smooth[:, 0] if isinstance(sm, SmootherOutput) else np.asarray(sm, dtype=float)
    a2, b2, _, c, s = identify_triple(params.a2, params.b2, path)
    a1 = params.a1 + params.b1 * c
    b1 = params.b1 / s
    sb1 = float(b1.sum())
    if sb1 == 0:
        raise ValueError("sum of annual loadings is zero")
    meta = dict(params.meta)
    meta["b1_rescale"] = sb1
    meta["identification"] = {"shift": c, "scale": s}
    out = params.copy(a1=a1, a2=a2, b1=b1 / sb1, b2=b2, mu=params.mu * s, sigma_w2=params.sigma_w2 * s**2, meta=meta)
    if isinstance(sm, SmootherOutput):
        sm2 = SmootherOutput(
            (sm.k_smooth - c) * s,
            sm.P_smooth * s**2,
            sm.P_lag1 * s**2,
            (sm.k0_smooth - c) * s,
            sm.P0_smooth * s**2,
        )
        return out, sm2
    return out, (path - c) * s


# ---------------------------------------------------------------------------
# simulation
# ---------------------------------------------------------------------------


def simulate_factor(params: MfssParams, T: int, rng, k_init=None) -> np.ndarray:
    """Draw ``T`` months of the period factor after 14 presample values."""
    k = list(np.zeros(WARMUP) if k_init is None else np.asarray(k_init, dtype=float)[-WARMUP:])
    sd = np.sqrt(params.sigma_w2)
    for _ in range(T):
        k.append(
            params.mu
            + params.phi1 * (k[-1] - k[-13])
            + params.phi2 * (k[-2] - k[-14])
            + k[-12]
            + sd * rng.standard_normal()
        )
    return np.array(k[WARMUP:])


def simulate_observations(params: MfssParams, k: np.ndarray, rng, start_month: int = 1):
    """Stacked ``(T, 2 n_a)`` observations and mask for a factor path.

    The annual block is only observed at the end of a calendar year and
    loads on the mean of that year's 12 factors.
    """
    T, n_a = k.size, params.n_a
    kbar = _year_means(k, T)
    Y = np.full((T, 2 * n_a), np.nan)
    mask = np.zeros((T, 2 * n_a), dtype=bool)
    Y[:, n_a:] = params.a2 + np.outer(k, params.b2) + rng.standard_normal((T, n_a)) * np.sqrt(params.sigma2_2)
    mask[:, n_a:] = True
    months = (start_month - 1 + np.arange(T)) % MONTHS + 1
    for t in np.flatnonzero((months == MONTHS) & (np.arange(T) >= MONTHS - 1)):
        Y[t, :n_a] = params.a1 + params.b1 * kbar[t] + rng.standard_normal(n_a) * np.sqrt(params.sigma1_2)
        mask[t, :n_a] = True
    return Y, mask
