"""
Intra-year updating, Monte Carlo forecasting and annualisation.

Forecasts are made at an origin ``(t_o, h)``: parameters were estimated on
data through December of ``t_o - 1`` and months ``1..h`` of ``t_o`` have
been observed since.  Three kinds of output are produced per target year:
``direct_annual`` (the annual observation equation), ``aggregated_monthly``
(simulated monthly deaths annualised with the mid-month exposure recursion,
realised months substituted) and ``monthly`` (monthly death counts).

Random numbers come from counter-based Philox streams in fixed blocks of
``PATH_BLOCK`` paths, so path ``b`` depends only on ``(seed, stream, b)``.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field

import numpy as np

from .data import MONTHS, AgeGrid, DataError, MortalityData
from .lc import LcParams, RwDrift, SarimaCoefs, fit_lc, sarima_mean_path, sarima_psi, update_monthly_factor
from .mfss import MfssParams, build_mfss_spec, em_fit, init_params, loading_vectors
from .ssm import StateSpaceSpec, as_masked, kalman_filter

log = logging.getLogger(__name__)

PATH_BLOCK = 256
KINDS = ("direct_annual", "aggregated_monthly", "monthly", "reconciled")
CSV_FIELDS = ["model", "target_year", "origin_year", "origin_month", "age", "point", "lower", "upper", "kind", "month"]

# independent streams per model component
STREAM_SS, STREAM_LC_ANNUAL, STREAM_LC_MONTHLY = 0, 1, 2


def path_rng(seed: int, block: int, stream: int = 0) -> np.random.Generator:
    """Generator for paths ``block*PATH_BLOCK .. (block+1)*PATH_BLOCK - 1``."""
    key = np.random.SeedSequence(seed, spawn_key=(stream,)).generate_state(2, np.uint64)
    return np.random.Generator(np.random.Philox(key=key, counter=[0, 0, block, 0]))


def _blocks(B: int, seed: int, stream: int):
    if B < 1:
        raise ValueError("B must be at least 1")
    for j in range(-(-B // PATH_BLOCK)):
        lo = j * PATH_BLOCK
        yield lo, min(B, lo + PATH_BLOCK), path_rng(seed, j, stream)


def _psd_sqrt(M: np.ndarray) -> np.ndarray:
    w, V = np.linalg.eigh(0.5 * (M + M.T))
    return V * np.sqrt(np.clip(w, 0.0, None))


def intra_year_update(spec: StateSpaceSpec, k, P, new_obs) -> tuple[np.ndarray, np.ndarray]:
    """Continue the filter from ``(k, P)`` through ``new_obs`` under frozen parameters."""
    k = np.asarray(k, dtype=float)
    P = np.asarray(P, dtype=float)
    Y, mask = as_masked(new_obs, spec.p)
    if Y.shape[0] == 0:
        return k.copy(), P.copy()
    out = kalman_filter(spec.with_initial(k, P), (Y, mask))
    return out.k_filt[-1], out.P_filt[-1]


@dataclass
class SimBundle:
    """Simulated paths from an origin state.

    ``states0`` holds the drawn origin state, ``k`` the first state
    component for months ``1..horizon`` and ``obs[name]`` the observation
    rows requested for the months requested (index 0 is the origin month).
    """

    states0: np.ndarray
    k: np.ndarray
    obs: dict
    keep: dict
    seed: int
    B: int

    def factor_path(self) -> np.ndarray:
        """Current factor from ``s - 1`` months before the origin to the horizon (B, s + H)."""
        return np.concatenate([self.states0[:, ::-1], self.k], axis=1)


def simulate_paths(
    spec: StateSpaceSpec, k, P, horizon: int, B: int, seed: int, keep: dict | None = None, stream: int = STREAM_SS
) -> SimBundle:
    """Draw ``B`` state and observation paths ``horizon`` months ahead.

    ``keep`` maps a name to ``(month indices, observation rows)``; by default
    every row at months ``1..horizon`` is kept as ``obs["Y"]``.  Month index
    0 is the origin month (a fresh observation draw given the origin state).
    """
    if horizon < 0:
        raise ValueError("horizon must be nonnegative")
    if keep is None:
        if horizon < 1:
            raise ValueError("horizon must be at least 1")
        keep = {"Y": (np.arange(1, horizon + 1), np.arange(spec.p))}
    keep = {n: (np.asarray(j, dtype=int), np.asarray(r, dtype=int)) for n, (j, r) in keep.items()}
    for _, (j, _) in keep.items():
        if j.size and (j.min() < 0 or j.max() > horizon):
            raise ValueError("kept month index outside 0..horizon")
    s, p = spec.s, spec.p
    Lp = _psd_sqrt(np.asarray(P, dtype=float))
    Lr = _psd_sqrt(spec.R)
    sw = np.sqrt(spec.sigma_w2)
    states0 = np.empty((B, s))
    kk = np.empty((B, horizon))
    obs = {n: np.empty((B, j.size, r.size)) for n, (j, r) in keep.items()}
    for lo, hi, rng in _blocks(B, seed, stream):
        nb = hi - lo
        e0 = rng.standard_normal((PATH_BLOCK, s))[:nb]
        w = rng.standard_normal((PATH_BLOCK, horizon))[:nb]
        eps = rng.standard_normal((PATH_BLOCK, horizon + 1, p))[:nb]
        x = k + e0 @ Lp.T
        states0[lo:hi] = x
        X = np.empty((nb, horizon + 1, s))
        X[:, 0] = x
        for t in range(horizon):
            x = x @ spec.H.T + spec.u + np.outer(sw * w[:, t], spec.G)
            X[:, t + 1] = x
        kk[lo:hi] = X[:, 1:, 0]
        for n, (j, r) in keep.items():
            Yj = spec.A[r] + X[:, j] @ spec.B[r].T + eps[:, j] @ Lr[r].T
            obs[n][lo:hi] = Yj
    return SimBundle(states0, kk, obs, keep, seed, B)


# ---------------------------------------------------------------------------
# annualisation
# ---------------------------------------------------------------------------


@dataclass
class Annualized:
    """Deaths, mid-month exposures and implied rates per path.

    ``rate`` is the literal ratio of summed deaths to summed monthly
    exposures (person-months); ``annual_rate`` rescales to person-years and is
    the quantity comparable with annual central death rates.
    """

    deaths: np.ndarray  # (..., 12, n_a)
    exposure: np.ndarray
    rate: np.ndarray  # (..., n_a), NaN on invalid paths
    valid: np.ndarray

    @property
    def annual_rate(self) -> np.ndarray:
        return MONTHS * self.rate

    @property
    def monthly_rates(self) -> np.ndarray:
        with np.errstate(divide="ignore", invalid="ignore"):
            return np.where(self.valid[..., None, :], self.deaths / self.exposure, np.nan)

    @property
    def annual_deaths(self) -> np.ndarray:
        return self.deaths.sum(axis=-2)


def migration_delta(P_next_age, P_prev, D_prev) -> np.ndarray:
    """Monthly net migration ``(P_{x+1,t} - P_{x,t-1} + D_{x,t-1}) / 12``; 0 where ``P_{x+1,t}`` is absent."""
    d = (np.asarray(P_next_age, float) - np.asarray(P_prev, float) + np.asarray(D_prev, float)) / MONTHS
    return np.where(np.isnan(d), 0.0, d)


def annualize_deaths(deaths, P_start, delta) -> Annualized:
    """Mid-month exposure recursion over 12 months of deaths (last two axes: month, age)."""
    D = np.asarray(deaths, dtype=float)
    if D.shape[-2] != MONTHS:
        raise ValueError("need 12 months of deaths")
    pop = np.broadcast_to(np.asarray(P_start, dtype=float), D.shape[:-2] + D.shape[-1:]).copy()
    delta = np.asarray(delta, dtype=float)
    E = np.empty_like(D)
    for h in range(MONTHS):
        nxt = pop + delta - D[..., h, :]
        E[..., h, :] = 0.5 * (pop + nxt)
        pop = nxt
    valid = np.all(E > 0, axis=-2)
    with np.errstate(divide="ignore", invalid="ignore"):
        rate = np.where(valid, D.sum(axis=-2) / E.sum(axis=-2), np.nan)
    n_bad = int(np.size(valid) - np.count_nonzero(valid))
    if n_bad:
        log.warning("%d path-age cells have nonpositive exposure and are marked invalid", n_bad)
    return Annualized(D, E, rate, valid)


def annualize_monthly(z, P_start, delta, realized=None) -> Annualized:
    """Annual rates implied by simulated scaled monthly logs.

    ``z`` has trailing axes ``(12, n_a)``; deaths are ``P_start * exp(z)``.
    Rows of ``realized`` (``(h, n_a)`` death counts) replace months
    ``1..h`` verbatim.
    """
    z = np.asarray(z, dtype=float)
    D = np.asarray(P_start, dtype=float) * np.exp(z)
    if realized is not None:
        realized = np.asarray(realized, dtype=float)
        h = realized.shape[0]
        if h > MONTHS:
            raise ValueError("at most 12 realised months")
        D = D.copy()
        D[..., :h, :] = realized
    return annualize_deaths(D, P_start, delta)


def annual_deaths_from_rate(m, P_start, delta) -> np.ndarray:
    """Annual deaths consistent with an annual rate when deaths and migration are uniform in the year.

    Inverts ``m = D / (P + 6 delta - D/2)``, the person-year exposure of the
    monthly recursion with equal monthly deaths.
    """
    m = np.asarray(m, dtype=float)
    return m * (np.asarray(P_start, float) + 6.0 * np.asarray(delta, float)) / (1.0 + 0.5 * m)


def direct_annual_forecast(y_samples) -> tuple[np.ndarray, np.ndarray]:
    """Point (Monte Carlo mean of ``exp(y)``) and rate samples."""
    m = np.exp(np.asarray(y_samples, dtype=float))
    return m.mean(axis=0), m


def prediction_interval(samples, alpha: float = 0.05, axis: int = 0) -> tuple[np.ndarray, np.ndarray]:
    """Empirical ``alpha/2`` and ``1 - alpha/2`` quantiles, linear between order statistics.

    NaN samples (invalid paths) are ignored.
    """
    if not 0 < alpha < 1:
        raise ValueError(f"alpha must be in (0, 1), got {alpha}")
    x = np.asarray(samples, dtype=float)
    if x.shape[axis] < 2:
        raise ValueError("need at least two samples")
    q = np.nanquantile(x, [alpha / 2, 1 - alpha / 2], axis=axis, method="linear")
    return q[0], q[1]


# ---------------------------------------------------------------------------
# population / exposure inputs at an origin
# ---------------------------------------------------------------------------


@dataclass
class ExposureInputs:
    """Start-of-year populations and migration known at an origin in year ``origin_year``.

    Populations after ``origin_year`` (or past the table) are carried
    forward from the last available year.  Annual deaths are observed for
    completed years before ``origin_year``; later years use forecasts.
    """

    data: MortalityData
    origin_year: int

    def _pop_year(self, year: int) -> int:
        return min(year, self.origin_year, self.data.population.years[1])

    def population(self, year: int) -> np.ndarray:
        return self.data.population.at(self._pop_year(year), self.data.ages)

    def observed_deaths(self, year: int) -> np.ndarray | None:
        if year >= self.origin_year:
            return None
        try:
            return self.data.deaths.annual_totals(year)
        except DataError:
            return None

    def delta(self, year: int, deaths_prev=None) -> np.ndarray:
        pop = self.data.population
        ages = self.data.ages
        prev = year - 1
        if not pop.has_year(min(prev, self._pop_year(prev))):
            log.warning("no population for %d; migration set to zero", prev)
            return np.zeros(ages.n_a)
        D_prev = self.observed_deaths(prev)
        if D_prev is None:
            if deaths_prev is None:
                raise DataError(f"deaths for {prev} are neither observed nor forecast")
            D_prev = deaths_prev
        return migration_delta(pop.next_age(self._pop_year(year), ages), self.population(prev), D_prev)


# ---------------------------------------------------------------------------
# forecast containers
# ---------------------------------------------------------------------------


@dataclass
class TargetForecast:
    kind: str
    year: int
    point: np.ndarray
    lower: np.ndarray
    upper: np.ndarray
    samples: np.ndarray | None = None  # rate samples (B, n_a) or death samples (B, 12, n_a)
    deaths: np.ndarray | None = None  # death samples backing the rate, if any
    n_invalid: int = 0


@dataclass
class ForecastBundle:
    model: str
    ages: AgeGrid
    origin_year: int
    origin_month: int
    targets: dict = field(default_factory=dict)  # (kind, year) -> TargetForecast
    sources: dict = field(default_factory=dict)  # kind -> producing model name
    P_start: dict = field(default_factory=dict)  # year -> start-of-year population used
    delta: dict = field(default_factory=dict)  # year -> migration used

    def get(self, kind: str, year: int) -> TargetForecast:
        return self.targets[(kind, year)]

    @property
    def kinds(self) -> list[str]:
        return sorted({k for k, _ in self.targets})

    def rows(self):
        for (kind, year), tf in sorted(self.targets.items(), key=lambda kv: (kv[0][1], KINDS.index(kv[0][0]))):
            src = self.sources.get(kind, self.model)
            if tf.point.ndim == 1:
                for i, x in enumerate(self.ages.ages):
                    yield [src, year, self.origin_year, self.origin_month, int(x), tf.point[i], tf.lower[i], tf.upper[i], kind, ""]
            else:
                for mo in range(tf.point.shape[0]):
                    for i, x in enumerate(self.ages.ages):
                        yield [
                            src, year, self.origin_year, self.origin_month, int(x),
                            tf.point[mo, i], tf.lower[mo, i], tf.upper[mo, i], kind, mo + 1,
                        ]  # fmt: skip

    def write_csv(self, path, append: bool = False) -> None:
        with open(path, "a" if append else "w", newline="") as fh:
            w = csv.writer(fh)
            if not append:
                w.writerow(CSV_FIELDS)
            for row in self.rows():
                w.writerow([repr(float(v)) if isinstance(v, (float, np.floating)) else v for v in row])


def _summarize(kind, year, samples, alpha, deaths=None) -> TargetForecast:
    lo, hi = prediction_interval(samples, alpha)
    n_bad = int(np.isnan(samples).any(axis=tuple(range(1, samples.ndim))).sum())
    with np.errstate(invalid="ignore"):
        point = np.nanmean(samples, axis=0)
    return TargetForecast(kind, year, point, lo, hi, samples, deaths, n_bad)


def _target_years(origin_year: int, target_years) -> list[int]:
    ys = sorted({int(y) for y in np.atleast_1d(target_years)})
    if not ys or ys[0] < origin_year:
        raise ValueError(f"target years must be >= origin year {origin_year}")
    return ys


def _aggregate_years(bundle, exp_in, years, z_of_year, realized, h, alpha, want):
    """Annualise simulated monthly paths year by year from the origin year on."""
    prev_deaths = None
    for y in range(bundle.origin_year, years[-1] + 1):
        P = exp_in.population(y)
        delta = exp_in.delta(y, prev_deaths)
        ann = annualize_monthly(z_of_year(y), P, delta, realized if y == bundle.origin_year and h else None)
        bundle.P_start[y], bundle.delta[y] = P, delta
        with np.errstate(invalid="ignore"):
            prev_deaths = np.nanmean(np.where(ann.valid[:, None, :], ann.deaths, np.nan), axis=0).sum(axis=0)
        if y in years:
            if "aggregated_monthly" in want:
                bundle.targets[("aggregated_monthly", y)] = _summarize(
                    "aggregated_monthly", y, ann.annual_rate, alpha, ann.deaths
                )
            if "monthly" in want:
                bundle.targets[("monthly", y)] = _summarize("monthly", y, ann.deaths, alpha)


# ---------------------------------------------------------------------------
# mixed-frequency state-space model
# ---------------------------------------------------------------------------


@dataclass
class MfssModel:
    params: MfssParams
    ages: AgeGrid
    fit_start: int
    fit_end: int
    k_end: np.ndarray
    P_end: np.ndarray
    k_filt: np.ndarray = field(repr=False)  # filtered states over the fit window (T, 15)
    P_filt: np.ndarray = field(repr=False)
    diagnostics: object = None

    @classmethod
    def fit(cls, data: MortalityData, t0: int, t1: int, *, tol=1e-6, max_iter=200, warmup=14, init=None):
        obs = data.stacked(t0, t1)
        start = init if init is not None else init_params(obs, data.ages.n_a)
        params, _, diag = em_fit(obs, start, tol=tol, max_iter=max_iter, warmup=warmup)
        params.meta["ages"] = [data.ages.x0, data.ages.x1]
        params.meta["fit_window"] = [t0, t1]
        return cls.from_params(params, data, t0, t1, diag)

    @classmethod
    def from_params(cls, params: MfssParams, data: MortalityData, t0: int, t1: int, diag=None):
        spec = build_mfss_spec(params, data.ages.n_a)
        filt = kalman_filter(spec, data.stacked(t0, t1))
        return cls(params, data.ages, t0, t1, filt.k_filt[-1], filt.P_filt[-1], filt.k_filt, filt.P_filt, diag)

    @property
    def spec(self) -> StateSpaceSpec:
        return build_mfss_spec(self.params)

    def origin_state(self, data: MortalityData, h: int) -> tuple[np.ndarray, np.ndarray]:
        if not 0 <= h <= MONTHS:
            raise ValueError("h must be in 0..12")
        n_a = self.ages.n_a
        z = data.z_months(self.fit_end + 1, h) if h else np.empty((0, n_a))
        Y = np.full((h, 2 * n_a), np.nan)
        Y[:, n_a:] = z
        return intra_year_update(self.spec, self.k_end, self.P_end, (Y, ~np.isnan(Y)))

    def forecast(
        self,
        data: MortalityData,
        h: int,
        target_years,
        B: int = 10_000,
        seed: int = 0,
        alpha: float = 0.05,
        kinds=("direct_annual", "aggregated_monthly", "monthly"),
    ) -> ForecastBundle:
        t_o = self.fit_end + 1
        years = _target_years(t_o, target_years)
        n_a = self.ages.n_a
        k, P = self.origin_state(data, h)
        H = MONTHS * (years[-1] - t_o) + MONTHS - h
        decs = [MONTHS * (y - t_o) + MONTHS - h for y in years]
        keep = {"y": (decs, np.arange(n_a))}
        monthly = bool({"aggregated_monthly", "monthly"} & set(kinds))
        if H >= 1 and monthly:
            keep["z"] = (np.arange(1, H + 1), np.arange(n_a, 2 * n_a))
        sim = simulate_paths(self.spec, k, P, H, B, seed, keep=keep, stream=STREAM_SS)
        bundle = ForecastBundle("mfss", self.ages, t_o, h, sources={k_: "mfss" for k_ in KINDS})
        if "direct_annual" in kinds:
            for i, y in enumerate(years):
                _, m = direct_annual_forecast(sim.obs["y"][:, i])
                bundle.targets[("direct_annual", y)] = _summarize("direct_annual", y, m, alpha)
        if not monthly:
            return bundle
        exp_in = ExposureInputs(data, t_o)
        realized = data.deaths.year_block(t_o, h).T if h else None

        def z_of_year(y):
            z = np.zeros((B, MONTHS, n_a))
            j0 = MONTHS * (y - t_o) - h  # index offset: month m of year y is at j0 + m
            for mo in range(1, MONTHS + 1):
                j = j0 + mo
                if j >= 1:
                    z[:, mo - 1] = sim.obs["z"][:, j - 1]
            return z

        _aggregate_years(bundle, exp_in, years, z_of_year, realized, h, alpha, kinds)
        return bundle

    def one_step_means(self, data: MortalityData, year: int) -> tuple[np.ndarray, np.ndarray]:
        """Expected annual and monthly deaths for ``year`` given data through December of ``year - 1``."""
        idx = MONTHS * (year - 1 - self.fit_start) + MONTHS - 1
        if not 0 <= idx < self.k_filt.shape[0]:
            raise ValueError(f"year {year} has no in-sample origin")
        p = self.params
        spec = self.spec
        x, Px = self.k_filt[idx], self.P_filt[idx]
        fA, _ = loading_vectors()
        P0 = data.population.at(year, self.ages)
        d = np.empty((MONTHS, self.ages.n_a))
        for mo in range(MONTHS):
            x = spec.H @ x + spec.u
            Px = spec.H @ Px @ spec.H.T + spec.Q
            mean = p.a2 + p.b2 * x[0]
            var = p.b2**2 * Px[0, 0] + p.sigma2_2
            d[mo] = P0 * np.exp(mean + 0.5 * var)
        mean = p.a1 + p.b1 * (fA @ x)
        var = p.b1**2 * (fA @ Px @ fA) + p.sigma1_2
        m = np.exp(mean + 0.5 * var)
        delta = ExposureInputs(data, year).delta(year)
        return annual_deaths_from_rate(m, P0, delta), d


def mfss_forecast(model: MfssModel, data, h, target_years, B=10_000, seed=0, alpha=0.05) -> ForecastBundle:
    return model.forecast(data, h, target_years, B, seed, alpha)


# ---------------------------------------------------------------------------
# independent Lee-Carter benchmarks
# ---------------------------------------------------------------------------


@dataclass
class LcModel:
    annual: LcParams
    monthly: LcParams
    ages: AgeGrid
    fit_start: int
    fit_end: int

    @classmethod
    def fit(cls, data: MortalityData, t0: int, t1: int):
        ann, z = data.window(t0, t1)
        annual = fit_lc(ann.y, "rw_drift", model="lc_annual")
        monthly = fit_lc(z.z, "sarima", model="lc_monthly")
        return cls(annual, monthly, data.ages, t0, t1)

    def monthly_history(self, data: MortalityData, h: int) -> np.ndarray:
        """Fitted monthly factors extended by the cross-age update for months 1..h of the origin year."""
        k = list(self.monthly.k)
        for z in data.z_months(self.fit_end + 1, h):
            k.append(update_monthly_factor(z, self.monthly))
        return np.array(k)

    def _annual_paths(self, years, B, seed):
        dyn: RwDrift = self.annual.dynamics
        n = years[-1] - self.fit_end
        p = self.annual
        y = np.empty((B, n, p.n_a))
        for lo, hi, rng in _blocks(B, seed, STREAM_LC_ANNUAL):
            nb = hi - lo
            eta = rng.standard_normal((PATH_BLOCK, n))[:nb]
            eps = rng.standard_normal((PATH_BLOCK, n, p.n_a))[:nb]
            k = p.k[-1] + dyn.d * np.arange(1, n + 1) + np.sqrt(dyn.sigma_eta2) * np.cumsum(eta, axis=1)
            y[lo:hi] = p.a + k[:, :, None] * p.b + eps * np.sqrt(p.sigma2)
        return {yr: y[:, yr - self.fit_end - 1] for yr in years}

    def _monthly_paths(self, k_hist, H, B, seed):
        dyn: SarimaCoefs = self.monthly.dynamics
        p = self.monthly
        z = np.empty((B, H, p.n_a))
        sd = np.sqrt(dyn.sigma2)
        for lo, hi, rng in _blocks(B, seed, STREAM_LC_MONTHLY):
            nb = hi - lo
            eta = rng.standard_normal((PATH_BLOCK, H))[:nb]
            eps = rng.standard_normal((PATH_BLOCK, H, p.n_a))[:nb]
            k = np.tile(k_hist[-14:], (nb, 1))
            for t in range(H):
                g1 = k[:, -1] - k[:, -13]
                g2 = k[:, -2] - k[:, -14]
                nxt = k[:, -12] + dyn.c + dyn.phi1 * g1 + dyn.phi2 * g2 + sd * eta[:, t]
                k = np.column_stack([k[:, 1:], nxt])
                z[lo:hi, t] = p.a + nxt[:, None] * p.b + eps[:, t] * np.sqrt(p.sigma2)
        return z

    def forecast(
        self,
        data: MortalityData,
        h: int,
        target_years,
        B: int = 10_000,
        seed: int = 0,
        alpha: float = 0.05,
        kinds=("direct_annual", "aggregated_monthly", "monthly"),
    ) -> ForecastBundle:
        t_o = self.fit_end + 1
        years = _target_years(t_o, target_years)
        n_a = self.ages.n_a
        bundle = ForecastBundle(
            "lc", self.ages, t_o, h,
            sources={"direct_annual": "lc_annual", "aggregated_monthly": "lc_monthly", "monthly": "lc_monthly", "reconciled": "lc"},
        )  # fmt: skip
        if "direct_annual" in kinds:
            ys = self._annual_paths(years, B, seed)
            for y in years:
                _, m = direct_annual_forecast(ys[y])
                bundle.targets[("direct_annual", y)] = _summarize("direct_annual", y, m, alpha)
        if not {"aggregated_monthly", "monthly"} & set(kinds):
            return bundle
        H = MONTHS * (years[-1] - t_o) + MONTHS - h
        k_hist = self.monthly_history(data, h)
        z = self._monthly_paths(k_hist, H, B, seed) if H else np.empty((B, 0, n_a))
        exp_in = ExposureInputs(data, t_o)
        realized = data.deaths.year_block(t_o, h).T if h else None

        def z_of_year(y):
            out = np.zeros((B, MONTHS, n_a))
            j0 = MONTHS * (y - t_o) - h
            for mo in range(1, MONTHS + 1):
                j = j0 + mo
                if j >= 1:
                    out[:, mo - 1] = z[:, j - 1]
            return out

        _aggregate_years(bundle, exp_in, years, z_of_year, realized, h, alpha, kinds)
        return bundle

    def one_step_means(self, data: MortalityData, year: int) -> tuple[np.ndarray, np.ndarray]:
        i = year - 1 - self.fit_start
        if not 0 <= i < self.annual.k.size:
            raise ValueError(f"year {year} has no in-sample origin")
        pa, pm = self.annual, self.monthly
        ra: RwDrift = pa.dynamics
        m = np.exp(pa.a + pa.b * (pa.k[i] + ra.d) + 0.5 * (pa.b**2 * ra.sigma_eta2 + pa.sigma2))
        sm: SarimaCoefs = pm.dynamics
        hist = pm.k[: MONTHS * (i + 1)]
        if hist.size < 14:
            raise ValueError(f"year {year}: monthly history shorter than 14 months")
        mean = sarima_mean_path(hist, sm, MONTHS)
        var = sm.sigma2 * np.cumsum(sarima_psi(sm, MONTHS) ** 2)
        P0 = data.population.at(year, self.ages)
        d = P0 * np.exp(pm.a + np.outer(mean, pm.b) + 0.5 * (np.outer(var, pm.b**2) + pm.sigma2))
        delta = ExposureInputs(data, year).delta(year)
        return annual_deaths_from_rate(m, P0, delta), d


def lc_forecast(model: LcModel, data, h, target_years, B=10_000, seed=0, alpha=0.05) -> ForecastBundle:
    return model.forecast(data, h, target_years, B, seed, alpha)
