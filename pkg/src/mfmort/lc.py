"""
Independent annual and monthly Lee-Carter benchmarks.

``log m[x, t] = a[x] + b[x] k[t] + eps[x, t]`` with per-age Gaussian error
variances, estimated by alternating conditional maximisation from a
rank-one SVD start and normalised to ``sum(b) = 1``, ``sum(k) = 0``.  The
period factor is then given random-walk-with-drift (annual) or
SARIMA(2,0,0)(0,1,0)_12-with-drift (monthly) dynamics fitted to the point
estimate.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Union

import numpy as np

log = logging.getLogger(__name__)

SEASON = 12
SARIMA_LAGS = 14
VAR_FLOOR = 1e-12


class DegenerateFitError(ValueError):
    pass


@dataclass(frozen=True)
class RwDrift:
    d: float
    sigma_eta2: float

    def to_dict(self):
        return {"kind": "rw_drift", "d": self.d, "sigma_eta2": self.sigma_eta2}


@dataclass(frozen=True)
class SarimaCoefs:
    """AR(2) with intercept on the 12-month difference ``g[t] = k[t] - k[t-12]``."""

    phi1: float
    phi2: float
    c: float
    sigma2: float
    bic: float = float("nan")
    n_obs: int = 0
    degenerate: bool = False

    def to_dict(self):
        return {
            "kind": "sarima",
            "phi1": self.phi1,
            "phi2": self.phi2,
            "c": self.c,
            "sigma2": self.sigma2,
            "bic": self.bic,
            "n_obs": self.n_obs,
        }


Dynamics = Union[RwDrift, SarimaCoefs]


@dataclass
class LcParams:
    a: np.ndarray
    b: np.ndarray
    k: np.ndarray
    sigma2: np.ndarray
    dynamics: Dynamics | None = None
    model: str = "lc"
    loglik: float = float("nan")
    loglik_path: list = field(default_factory=list)

    @property
    def n_a(self) -> int:
        return self.a.size

    def fitted(self) -> np.ndarray:
        return self.a[:, None] + np.outer(self.b, self.k)

    def to_dict(self, **meta) -> dict:
        out = {
            "model": self.model,
            "a": self.a.tolist(),
            "b": self.b.tolist(),
            "k": self.k.tolist(),
            "sigma2": self.sigma2.tolist(),
            "dynamics": None if self.dynamics is None else self.dynamics.to_dict(),
            "loglik": self.loglik,
        }
        out.update(meta)
        return out

    @classmethod
    def from_dict(cls, d: dict) -> "LcParams":
        dyn = d.get("dynamics")
        if dyn is None:
            dynamics = None
        elif dyn["kind"] == "rw_drift":
            dynamics = RwDrift(dyn["d"], dyn["sigma_eta2"])
        else:
            dynamics = SarimaCoefs(dyn["phi1"], dyn["phi2"], dyn["c"], dyn["sigma2"], dyn.get("bic", float("nan")), dyn.get("n_obs", 0))
        return cls(
            np.asarray(d["a"], float),
            np.asarray(d["b"], float),
            np.asarray(d["k"], float),
            np.asarray(d["sigma2"], float),
            dynamics,
            d.get("model", "lc"),
            d.get("loglik", float("nan")),
        )


def normalize_lc(a, b, k):
    """Shift ``k`` to mean zero and rescale so ``sum(b) = 1``; fitted values unchanged."""
    a, b, k = (np.asarray(v, dtype=float).copy() for v in (a, b, k))
    c = k.mean()
    a = a + b * c
    k = k - c
    s = b.sum()
    if s == 0:
        raise DegenerateFitError("sum of age loadings is zero; cannot normalise")
    return a, b / s, k * s


def _loglik(resid, w, sigma2):
    n = w.sum(axis=1)
    return float(-0.5 * np.sum(n * np.log(2 * np.pi * sigma2) + (w * resid**2).sum(axis=1) / sigma2))


def _svd_start(Y, W):
    n = W.sum(axis=1)
    a = np.where(W, Y, 0.0).sum(axis=1) / n
    C = np.where(W, Y - a[:, None], 0.0)
    U, S, Vt = np.linalg.svd(C, full_matrices=False)
    b, k = U[:, 0] * S[0], Vt[0]
    return a, b, k


def fit_lc(
    panel, dynamics: str | None = None, *, tol: float = 1e-8, max_iter: int = 1000, model: str = "lc"
) -> LcParams:
    """Gaussian maximum-likelihood Lee-Carter fit.

    Parameters
    ----------
    panel : array (n_a, T)
        Log rates or scaled monthly logs; NaN cells are treated as missing.
    dynamics : {"rw_drift", "sarima", None}
        Time-series model fitted to the normalised period factor.
    """
    Y = np.asarray(panel, dtype=float)
    if Y.ndim != 2 or Y.shape[1] < 3:
        raise ValueError("panel must be (n_a, T) with at least 3 time points")
    if dynamics == "sarima" and Y.shape[1] < 2 * SEASON + 3:
        raise ValueError(f"SARIMA dynamics need at least {2 * SEASON + 3} months")
    W = ~np.isnan(Y)
    if np.any(W.sum(axis=1) < 2) or np.any(W.sum(axis=0) == 0):
        raise ValueError("every age needs two observations and every period one")
    Yz = np.where(W, Y, 0.0)
    a, b, k = _svd_start(Y, W)
    if np.allclose(b, 0) or np.ptp(k) == 0:
        raise DegenerateFitError("panel is constant over time; loadings are unidentified")

    def resid(a, b, k):
        return np.where(W, Yz - a[:, None] - np.outer(b, k), 0.0)

    r = resid(a, b, k)
    scale = max(1.0, float(np.abs(Yz).max()))
    sigma2 = np.maximum((r**2).sum(axis=1) / W.sum(axis=1), VAR_FLOOR * scale**2)
    ll = _loglik(r, W, sigma2)
    path = [ll]
    for _ in range(max_iter):
        if np.abs(r).max() <= 1e-13 * scale:
            break
        # period factors: weighted cross-sectional regression on b
        wb = W * (b / sigma2)[:, None]
        den = (wb * b[:, None]).sum(axis=0)
        k = (wb * (Yz - a[:, None])).sum(axis=0) / np.where(den > 0, den, 1.0)
        # age profiles: per-age regression on (1, k)
        n = W.sum(axis=1)
        Sk = (W * k).sum(axis=1)
        Skk = (W * k**2).sum(axis=1)
        Sy = Yz.sum(axis=1)
        Syk = (Yz * k).sum(axis=1)
        det = n * Skk - Sk**2
        if np.any(det <= 0):
            raise DegenerateFitError("period factor has no variation for some age")
        b = (n * Syk - Sk * Sy) / det
        a = (Sy - b * Sk) / n
        r = resid(a, b, k)
        sigma2 = np.maximum((r**2).sum(axis=1) / n, VAR_FLOOR * scale**2)
        ll_new = _loglik(r, W, sigma2)
        path.append(ll_new)
        done = abs(ll_new - ll) <= tol * max(1.0, abs(ll))
        ll = ll_new
        if done:
            break
    a, b, k = normalize_lc(a, b, k)
    params = LcParams(a, b, k, sigma2, None, model, ll, path)
    if dynamics == "rw_drift":
        params.dynamics = rw_drift_fit(k)
    elif dynamics == "sarima":
        params.dynamics = sarima_fit(k)
    elif dynamics is not None:
        raise ValueError(f"unknown dynamics {dynamics!r}")
    return params


def rw_drift_fit(k) -> RwDrift:
    """MLE of a random walk with drift: mean and (divisor-n) variance of increments."""
    k = np.asarray(k, dtype=float)
    if k.size < 2:
        raise ValueError("need at least two periods")
    dk = np.diff(k)
    d = (k[-1] - k[0]) / (k.size - 1)
    return RwDrift(float(d), float(np.mean((dk - d) ** 2)))


def sarima_fit(k) -> SarimaCoefs:
    """Conditional least squares for ``(1 - phi1 L - phi2 L^2)(1 - L^12) k = c + eta``.

    The first 14 values are conditioned on.  Rank-deficient designs (e.g. a
    perfectly periodic factor) return the minimum-norm solution flagged as
    degenerate.
    """
    k = np.asarray(k, dtype=float)
    if k.size < SARIMA_LAGS + 1:
        raise ValueError(f"need at least {SARIMA_LAGS + 1} values, got {k.size}")
    g = k[SEASON:] - k[:-SEASON]
    y = g[2:]
    X = np.column_stack([np.ones(y.size), g[1:-1], g[:-2]])
    rank = np.linalg.matrix_rank(X)
    degenerate = rank < 3
    if not degenerate:
        coef = np.linalg.lstsq(X, y, rcond=None)[0]
    elif np.ptp(X[:, 1:]) == 0:
        # lagged differences constant (e.g. a perfectly periodic factor): drift only
        log.warning("SARIMA lag regressors are constant; reporting a degenerate drift-only fit")
        coef = np.array([y.mean(), 0.0, 0.0])
    else:
        raise DegenerateFitError(f"collinear SARIMA regressors (rank {rank})")
    resid = y - X @ coef
    n = y.size
    sigma2 = float(resid @ resid / n)
    if sigma2 > 0:
        ll = -0.5 * n * (np.log(2 * np.pi * sigma2) + 1)
        bic = float(-2 * ll + 4 * np.log(n))
    else:
        bic = float("-inf")
    c, phi1, phi2 = (float(v) for v in coef)
    return SarimaCoefs(phi1, phi2, c, sigma2, bic, n, bool(degenerate))


def update_monthly_factor(z_new, params: LcParams) -> float:
    """Cross-age no-intercept least squares for a newly observed month's factor."""
    z = np.asarray(z_new, dtype=float)
    ok = ~np.isnan(z)
    b = params.b[ok]
    den = float(b @ b)
    if den == 0:
        raise ValueError("sum of squared loadings is zero")
    return float(b @ (z[ok] - params.a[ok]) / den)


def sarima_psi(coefs: SarimaCoefs, n: int) -> np.ndarray:
    """MA(inf) weights of ``k`` in the shocks: ``k[T+j] - E = sum_i psi[i] eta[T+j-i]``."""
    psi = np.zeros(n)
    g = np.zeros(n)
    for j in range(n):
        g[j] = (1.0 if j == 0 else 0.0) + coefs.phi1 * (g[j - 1] if j >= 1 else 0.0) + coefs.phi2 * (g[j - 2] if j >= 2 else 0.0)
        psi[j] = g[j] + (psi[j - SEASON] if j >= SEASON else 0.0)
    return psi


def sarima_mean_path(k_hist, coefs: SarimaCoefs, n: int) -> np.ndarray:
    """Deterministic forecast recursion for ``n`` steps beyond ``k_hist``."""
    k = list(np.asarray(k_hist, dtype=float))
    if len(k) < SARIMA_LAGS:
        raise ValueError(f"need {SARIMA_LAGS} past values")
    out = []
    for _ in range(n):
        g1 = k[-1] - k[-1 - SEASON]
        g2 = k[-2] - k[-2 - SEASON]
        nxt = k[-SEASON] + coefs.c + coefs.phi1 * g1 + coefs.phi2 * g2
        k.append(nxt)
        out.append(nxt)
    return np.array(out)
