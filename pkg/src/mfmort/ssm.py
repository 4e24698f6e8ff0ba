"""
Linear-Gaussian state-space engine with per-period missing observations.

Model::

    Y_t = A + B k_t + eps_t,        eps_t ~ N(0, R)
    k_t = H k_{t-1} + u + G w_t,    w_t ~ N(0, sigma_w2)

Missing entries of ``Y_t`` are dropped by row selection, which is the same
as premultiplying by the selection matrix ``M_t``.  All covariance updates
are symmetrised.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

LOG_2PI = float(np.log(2.0 * np.pi))
PINV_RTOL = 1e-10


class SingularCovarianceError(np.linalg.LinAlgError):
    """An innovation or observed-block covariance has no usable information."""


@dataclass
class StateSpaceSpec:
    A: np.ndarray
    B: np.ndarray
    H: np.ndarray
    R: np.ndarray
    u: np.ndarray
    G: np.ndarray
    sigma_w2: float
    k0: np.ndarray
    P0: np.ndarray

    def __post_init__(self):
        self.A = np.asarray(self.A, dtype=float).reshape(-1)
        self.B = np.atleast_2d(np.asarray(self.B, dtype=float))
        self.H = np.atleast_2d(np.asarray(self.H, dtype=float))
        self.R = np.atleast_2d(np.asarray(self.R, dtype=float))
        self.u = np.asarray(self.u, dtype=float).reshape(-1)
        self.G = np.asarray(self.G, dtype=float).reshape(-1)
        self.k0 = np.asarray(self.k0, dtype=float).reshape(-1)
        self.P0 = np.atleast_2d(np.asarray(self.P0, dtype=float))
        self.sigma_w2 = float(self.sigma_w2)
        p, s = self.B.shape
        shapes = {
            "A": (self.A.shape, (p,)),
            "H": (self.H.shape, (s, s)),
            "R": (self.R.shape, (p, p)),
            "u": (self.u.shape, (s,)),
            "G": (self.G.shape, (s,)),
            "k0": (self.k0.shape, (s,)),
            "P0": (self.P0.shape, (s, s)),
        }
        for name, (got, want) in shapes.items():
            if got != want:
                raise ValueError(f"{name} has shape {got}, expected {want}")
        if self.sigma_w2 < 0:
            raise ValueError("sigma_w2 must be nonnegative")
        for name in ("R", "P0"):
            M = getattr(self, name)
            if not np.allclose(M, M.T, atol=1e-12 * max(1.0, np.abs(M).max())):
                raise ValueError(f"{name} must be symmetric")

    @property
    def p(self) -> int:
        return self.B.shape[0]

    @property
    def s(self) -> int:
        return self.B.shape[1]

    @property
    def Q(self) -> np.ndarray:
        return self.sigma_w2 * np.outer(self.G, self.G)

    def with_initial(self, k0, P0) -> "StateSpaceSpec":
        return StateSpaceSpec(self.A, self.B, self.H, self.R, self.u, self.G, self.sigma_w2, k0, P0)


@dataclass
class FilterOutput:
    k_pred: np.ndarray  # (T, s)
    P_pred: np.ndarray  # (T, s, s)
    k_filt: np.ndarray
    P_filt: np.ndarray
    v: list  # innovations, length d_t each
    S: list
    K: list
    loglik: float
    loglik_terms: np.ndarray
    k0: np.ndarray
    P0: np.ndarray

    @property
    def T(self) -> int:
        return self.k_filt.shape[0]


@dataclass
class SmootherOutput:
    """Smoothed moments; ``P_lag1[t] = Cov(k_t, k_{t-1} | all data)``.

    For ``t = 0`` the lag refers to the initial state, whose smoothed moments
    are ``k0_smooth`` / ``P0_smooth``.
    """

    k_smooth: np.ndarray
    P_smooth: np.ndarray
    P_lag1: np.ndarray
    k0_smooth: np.ndarray
    P0_smooth: np.ndarray

    @property
    def T(self) -> int:
        return self.k_smooth.shape[0]


@dataclass
class ObsMoments:
    Y_mean: np.ndarray  # (T, p)
    Y_var: np.ndarray  # (T, p, p)
    kY_cross: np.ndarray  # (T, s, p) = E[k Y^T | data]


def _sym(P):
    return 0.5 * (P + np.swapaxes(P, -1, -2))


def as_masked(obs, p: int | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Return ``(Y, mask)`` from a stacked series, a ``(Y, mask)`` pair or a NaN-coded array."""
    if hasattr(obs, "Y") and hasattr(obs, "mask"):
        Y, mask = obs.Y, obs.mask
    elif isinstance(obs, tuple):
        Y, mask = obs
    else:
        Y = obs
        mask = None
    Y = np.atleast_2d(np.asarray(Y, dtype=float))
    if mask is None:
        mask = ~np.isnan(Y)
    mask = np.asarray(mask, dtype=bool) & ~np.isnan(Y)
    if p is not None and Y.shape[1] != p:
        raise ValueError(f"observation length {Y.shape[1]} does not match spec p={p}")
    return Y, mask


class _SolvedCov:
    """Cholesky factorisation of a covariance with eigen-clipped fallback."""

    def __init__(self, S):
        self.S = S
        try:
            self.L = np.linalg.cholesky(S)
            self.logdet = 2.0 * float(np.sum(np.log(np.diag(self.L))))
            self.inv = None
        except np.linalg.LinAlgError:
            self.L = None
            if not np.all(np.isfinite(S)):
                raise SingularCovarianceError("innovation covariance is not finite") from None
            w, V = np.linalg.eigh(S)
            thresh = PINV_RTOL * max(float(np.max(np.diag(S))), 0.0)
            keep = w > thresh
            if not np.any(keep):
                raise SingularCovarianceError("innovation covariance is numerically zero") from None
            self.inv = (V[:, keep] / w[keep]) @ V[:, keep].T
            self.logdet = float(np.sum(np.log(w[keep])))

    def solve(self, b):
        if self.L is not None:
            y = np.linalg.solve(self.L, b)
            return np.linalg.solve(self.L.T, y)
        return self.inv @ b


def kalman_filter(spec: StateSpaceSpec, obs) -> FilterOutput:
    """Forward pass with masked updates; accumulates the innovations log-likelihood."""
    Y, mask = as_masked(obs, spec.p)
    T, s = Y.shape[0], spec.s
    H, u, Q, A, B, R = spec.H, spec.u, spec.Q, spec.A, spec.B, spec.R
    k_pred = np.empty((T, s))
    P_pred = np.empty((T, s, s))
    k_filt = np.empty((T, s))
    P_filt = np.empty((T, s, s))
    vs, Ss, Ks = [], [], []
    terms = np.zeros(T)
    k, P = spec.k0, spec.P0
    for t in range(T):
        k = H @ k + u
        P = _sym(H @ P @ H.T + Q)
        k_pred[t], P_pred[t] = k, P
        obs_idx = np.flatnonzero(mask[t])
        d = obs_idx.size
        if d == 0:
            vs.append(np.empty(0))
            Ss.append(np.empty((0, 0)))
            Ks.append(np.empty((s, 0)))
        else:
            Bt = B[obs_idx]
            v = Y[t, obs_idx] - A[obs_idx] - Bt @ k
            PBt = P @ Bt.T
            S = _sym(Bt @ PBt + R[np.ix_(obs_idx, obs_idx)])
            cs = _SolvedCov(S)
            K = cs.solve(PBt.T).T
            k = k + K @ v
            P = _sym(P - K @ S @ K.T)
            terms[t] = -0.5 * (d * LOG_2PI + cs.logdet + float(v @ cs.solve(v)))
            vs.append(v)
            Ss.append(S)
            Ks.append(K)
        k_filt[t], P_filt[t] = k, P
    return FilterOutput(
        k_pred, P_pred, k_filt, P_filt, vs, Ss, Ks, float(terms.sum()), terms, spec.k0.copy(), spec.P0.copy()
    )


def _smoother_gain(P_f, H, P_p):
    # J = P_f H^T P_p^{-1}; P_p is symmetric so solve P_p J^T = H P_f
    rhs = H @ P_f
    try:
        L = np.linalg.cholesky(P_p)
        return np.linalg.solve(L.T, np.linalg.solve(L, rhs)).T
    except np.linalg.LinAlgError:
        return (np.linalg.pinv(P_p, rcond=PINV_RTOL, hermitian=True) @ rhs).T


def kalman_smoother(spec: StateSpaceSpec, filt: FilterOutput) -> SmootherOutput:
    """Rauch-Tung-Striebel backward pass including lag-one cross-covariances."""
    T, s = filt.k_filt.shape
    H = spec.H
    ks = np.empty((T, s))
    Ps = np.empty((T, s, s))
    Plag = np.empty((T, s, s))
    ks[-1], Ps[-1] = filt.k_filt[-1], filt.P_filt[-1]
    for t in range(T - 2, -2, -1):
        if t >= 0:
            k_f, P_f = filt.k_filt[t], filt.P_filt[t]
        else:
            k_f, P_f = filt.k0, filt.P0
        J = _smoother_gain(P_f, H, filt.P_pred[t + 1])
        k_sm = k_f + J @ (ks[t + 1] - filt.k_pred[t + 1])
        P_sm = _sym(P_f + J @ (Ps[t + 1] - filt.P_pred[t + 1]) @ J.T)
        Plag[t + 1] = Ps[t + 1] @ J.T
        if t >= 0:
            ks[t], Ps[t] = k_sm, P_sm
        else:
            k0s, P0s = k_sm, P_sm
    return SmootherOutput(ks, Ps, Plag, k0s, P0s)


def observed_loglik(spec: StateSpaceSpec, obs) -> float:
    return kalman_filter(spec, obs).loglik


def conditional_obs_moments(spec: StateSpaceSpec, sm: SmootherOutput, obs) -> ObsMoments:
    """Smoothed moments of the full observation vector, missing entries included.

    Uses ``K^Y = R M^T (M R M^T)^{-1}``; with the observed part fixed the
    remaining uncertainty is ``V^Y`` plus the propagated state uncertainty.
    """
    Y, mask = as_masked(obs, spec.p)
    T, p, s = Y.shape[0], spec.p, spec.s
    A, B, R = spec.A, spec.B, spec.R
    Ym = np.empty((T, p))
    Yv = np.empty((T, p, p))
    kY = np.empty((T, s, p))
    eye = np.eye(p)
    for t in range(T):
        idx = np.flatnonzero(mask[t])
        mu = A + B @ sm.k_smooth[t]
        L = eye.copy()
        if idx.size:
            Roo = R[np.ix_(idx, idx)]
            cs = _SolvedCov(_sym(Roo))
            KY = cs.solve(R[idx, :]).T  # (p, d)
            mean = mu + KY @ (Y[t, idx] - mu[idx])
            VY = _sym(R - KY @ R[idx, :])
            L[:, idx] -= KY
        else:
            mean, VY = mu, R.copy()
        LB = L @ B
        Yv[t] = _sym(VY + LB @ sm.P_smooth[t] @ LB.T)
        Ym[t] = mean
        kY[t] = np.outer(sm.k_smooth[t], mean) + sm.P_smooth[t] @ LB.T
    return ObsMoments(Ym, Yv, kY)
