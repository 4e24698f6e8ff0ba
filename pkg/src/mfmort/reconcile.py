"""
Temporal reconciliation of annual and monthly death forecasts.

For one age and target year the hierarchy stacks annual deaths over the 12
monthly deaths, ``D = S d`` with ``S = [1'; I_12]``.  Independent base
forecasts are combined by generalised least squares
``S (S' W^-1 S)^-1 S' W^-1 D_hat`` with ``W`` estimated from in-sample
one-step errors, either the full sample covariance or the diagonal
variance-scaled form.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .data import MONTHS, MortalityData
from .forecast import ForecastBundle, _summarize, annual_deaths_from_rate, annualize_deaths

log = logging.getLogger(__name__)

N_LEVELS = MONTHS + 1
RIDGE = 1e-8
SCALED_FLOOR = 1e-12
METHODS = ("full", "scaled")


def summing_matrix() -> np.ndarray:
    return np.vstack([np.ones((1, MONTHS)), np.eye(MONTHS)])


def bottom_up(monthly) -> np.ndarray:
    """Coherent 13-vector (annual first) from monthly values along the last axis."""
    d = np.asarray(monthly, dtype=float)
    if d.shape[-1] != MONTHS:
        raise ValueError("need 12 monthly values")
    return np.concatenate([d.sum(axis=-1, keepdims=True), d], axis=-1)


@dataclass
class WeightMatrix:
    W: np.ndarray
    method: str
    n_obs: int = 0

    def __post_init__(self):
        self.W = np.asarray(self.W, dtype=float)
        if self.W.shape != (N_LEVELS, N_LEVELS):
            raise ValueError(f"W must be {N_LEVELS}x{N_LEVELS}")
        if self.method not in METHODS:
            raise ValueError(f"unknown method {self.method!r}")

    def for_inversion(self) -> np.ndarray:
        if self.method == "full":
            return self.W + RIDGE * np.trace(self.W) / N_LEVELS * np.eye(N_LEVELS)
        return self.W

    def to_dict(self) -> dict:
        return {"method": self.method, "n_obs": self.n_obs, "W": self.W.tolist()}


def estimate_weights(errors, method: str = "scaled") -> WeightMatrix:
    """Weight matrix from one-step error vectors ``(N, 13)``.

    ``full`` is the divisor-``N`` second-moment matrix; ``scaled`` is
    ``diag(s_A, s_M, ..., s_M)`` with the mean square annual error and the
    pooled mean square monthly error, each floored at 1e-12.
    """
    e = np.atleast_2d(np.asarray(errors, dtype=float))
    if e.shape[-1] != N_LEVELS or e.shape[0] < 1:
        raise ValueError("errors must be (N, 13) with N >= 1")
    if not np.all(np.isfinite(e)):
        raise ValueError("errors must be finite")
    n = e.shape[0]
    if method == "full":
        if not np.any(e):
            raise ValueError("all errors are zero; the full weight matrix is singular (use method='scaled')")
        return WeightMatrix(e.T @ e / n, "full", n)
    if method == "scaled":
        sa = max(float(np.mean(e[:, 0] ** 2)), SCALED_FLOOR)
        sm = max(float(np.mean(e[:, 1:] ** 2)), SCALED_FLOOR)
        return WeightMatrix(np.diag([sa] + [sm] * MONTHS), "scaled", n)
    raise ValueError(f"unknown method {method!r}")


def combination_matrix(W) -> np.ndarray:
    """``(S' W^-1 S)^-1 S' W^-1``: maps a 13-vector to reconciled monthly values."""
    Wm = W.for_inversion() if isinstance(W, WeightMatrix) else np.asarray(W, dtype=float)
    S = summing_matrix()
    try:
        WiS = np.linalg.solve(Wm, S)
        M = S.T @ WiS
        if np.linalg.cond(M) > 1e14:
            raise np.linalg.LinAlgError("ill-conditioned")
        return np.linalg.solve(M, WiS.T)
    except np.linalg.LinAlgError as e:
        raise np.linalg.LinAlgError(f"S' W^-1 S is singular: {e}") from e


def reconcile(base, W) -> np.ndarray:
    """GLS-reconciled 13-vectors for base forecasts along the last axis.

    The annual entry is returned as the sum of the reconciled months, so
    coherence holds to rounding.
    """
    D = np.asarray(base, dtype=float)
    if D.shape[-1] != N_LEVELS:
        raise ValueError("base forecasts must have 13 entries")
    d = D @ combination_matrix(W).T
    out = bottom_up(d)
    n_neg = int(np.count_nonzero(d < 0))
    if n_neg:
        log.warning("%d reconciled monthly values are negative (not clipped)", n_neg)
    return out


def reconciled_to_rates(coherent, P_start, delta):
    """Push reconciled monthly deaths through the mid-month exposure recursion.

    ``coherent`` has trailing axes ``(n_a, 13)``; returns an ``Annualized``.
    """
    c = np.asarray(coherent, dtype=float)
    return annualize_deaths(np.swapaxes(c[..., 1:], -1, -2), P_start, delta)


# ---------------------------------------------------------------------------
# base errors and bundle integration
# ---------------------------------------------------------------------------


def default_error_years(model) -> list[int]:
    """In-sample years whose previous December and 14-month history are inside the fit window."""
    return list(range(model.fit_start + 2, model.fit_end + 1))


def collect_base_errors(model, data: MortalityData, years=None) -> np.ndarray:
    """One-step errors ``(n_years, n_a, 13)``: realised minus expected deaths, annual first.

    Expectations come from ``model.one_step_means`` (information through the
    previous December, no intra-year data).
    """
    years = default_error_years(model) if years is None else list(years)
    if len(years) < 1:
        raise ValueError("insufficient history for base errors (need at least 2 in-sample years)")
    out = []
    for y in years:
        Da, dm = model.one_step_means(data, y)
        real = data.deaths.year_block(y)  # (n_a, 12)
        e = np.empty((data.ages.n_a, N_LEVELS))
        e[:, 0] = real.sum(axis=1) - Da
        e[:, 1:] = real - dm.T
        out.append(e)
    return np.array(out)


def fit_weights(model, data: MortalityData, method: str = "scaled", years=None) -> list[WeightMatrix]:
    """One weight matrix per age, reused for every horizon."""
    err = collect_base_errors(model, data, years)
    return [estimate_weights(err[:, i], method) for i in range(err.shape[1])]


def base_vectors(bundle: ForecastBundle, year: int) -> np.ndarray:
    """Per-path base 13-vectors ``(B, n_a, 13)`` from the direct-annual and monthly forecasts."""
    m = bundle.get("direct_annual", year).samples
    dm = bundle.get("monthly", year).samples  # (B, 12, n_a)
    Da = annual_deaths_from_rate(m, bundle.P_start[year], bundle.delta[year])
    return np.concatenate([Da[..., None], np.swapaxes(dm, 1, 2)], axis=-1)


def add_reconciled(bundle: ForecastBundle, weights: list[WeightMatrix], alpha: float = 0.05) -> ForecastBundle:
    """Reconcile every path of every target year in place and add ``reconciled`` rate targets."""
    years = sorted({y for k, y in bundle.targets if k == "direct_annual"})
    G = [combination_matrix(w) for w in weights]
    for y in years:
        base = base_vectors(bundle, y)
        coh = np.empty_like(base)
        for i, g in enumerate(G):
            coh[:, i] = bottom_up(base[:, i] @ g.T)
        neg = int(np.count_nonzero(coh[..., 1:] < 0))
        if neg:
            log.warning("%d reconciled monthly deaths are negative in %d (not clipped)", neg, y)
        ann = reconciled_to_rates(coh, bundle.P_start[y], bundle.delta[y])
        tf = _summarize("reconciled", y, ann.annual_rate, alpha, ann.deaths)
        bundle.targets[("reconciled", y)] = tf
    return bundle
