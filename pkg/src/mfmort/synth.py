"""
Synthetic mortality panels from a known mixed-frequency state-space system.

The monthly factor follows the seasonal AR recursion of the model, scaled
monthly logs come from the monthly observation equation, deaths are
``round(P * exp(z))`` and annual log rates load on the within-year mean of
the factor.  Populations are rolled forward cohort by cohort with the
mid-month accounting used for annualisation, so the generated migration is
exactly recoverable from the tables.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple

import numpy as np

from .data import (
    MONTHS,
    AgeGrid,
    AnnualPanel,
    DataError,
    MonthlyDeathPanel,
    MortalityData,
    PopulationTable,
    write_annual_rates,
    write_monthly_deaths,
    write_population,
)
from .mfss import MfssParams

N_START = 14


@dataclass
class DgpConfig:
    """Ground truth and demography for one synthetic panel.

    ``base_population`` covers ages ``x0 .. x0 + n_a`` (one above the model
    grid); the youngest age is replenished with its base value every year.
    ``migration`` is net monthly migration as a fraction of the
    start-of-year population.
    """

    n_a: int
    years: tuple[int, int]
    params: MfssParams
    base_population: np.ndarray
    seed: int = 0
    x0: int = 60
    migration: float = 0.0
    seasonal_profile: np.ndarray = field(default_factory=lambda: np.zeros(MONTHS))
    init_sd: float | None = None  # noise on the 14 starting values; defaults to sigma_w

    def __post_init__(self):
        self.base_population = np.asarray(self.base_population, dtype=float)
        self.seasonal_profile = np.asarray(self.seasonal_profile, dtype=float)
        if self.params.n_a != self.n_a:
            raise ValueError(f"params have {self.params.n_a} ages, config {self.n_a}")
        if self.base_population.shape != (self.n_a + 1,) or np.any(self.base_population <= 0):
            raise ValueError("base_population must be positive with n_a + 1 entries")
        if self.seasonal_profile.shape != (MONTHS,):
            raise ValueError("seasonal_profile needs 12 entries")
        if self.years[1] < self.years[0]:
            raise ValueError("years must be increasing")
        p = self.params
        if min(p.sigma_w2, p.sigma1_2.min(), p.sigma2_2.min()) < 0:
            raise ValueError("variances must be nonnegative")

    @property
    def ages(self) -> AgeGrid:
        return AgeGrid(self.x0, self.x0 + self.n_a - 1)

    @property
    def n_years(self) -> int:
        return self.years[1] - self.years[0] + 1


class Synthetic(NamedTuple):
    annual: AnnualPanel
    deaths: MonthlyDeathPanel
    population: PopulationTable
    k: np.ndarray  # true monthly factor, one value per month

    @property
    def data(self) -> MortalityData:
        return MortalityData(self.annual, self.deaths, self.population)

    def write_csvs(self, out_dir) -> dict:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        paths = {
            "annual": out / "annual_rates.csv",
            "deaths": out / "monthly_deaths.csv",
            "population": out / "population.csv",
        }
        write_annual_rates(paths["annual"], self.annual)
        write_monthly_deaths(paths["deaths"], self.deaths)
        write_population(paths["population"], self.population)
        np.savetxt(out / "true_k.csv", self.k, delimiter=",", header="k", comments="")
        return paths


def default_params(n_a: int = 5, x0: int = 60, rng=None) -> MfssParams:
    """Gompertz age profile with identified loadings (``sum(b2) = 1``).

    The drift makes each age's log rate fall about 1.5% a year.
    """
    rng = np.random.default_rng(0) if rng is None else rng
    ages = np.arange(x0, x0 + n_a)
    a1 = -9.5 + 0.09 * ages
    b = rng.uniform(0.5, 1.5, n_a)
    b /= b.sum()
    phi1, phi2 = 0.5, -0.2
    mu = -0.015 * n_a * (1 - phi1 - phi2)
    return MfssParams(
        a1=a1,
        a2=a1 - np.log(MONTHS),
        b1=b.copy(),
        b2=b,
        phi1=phi1,
        phi2=phi2,
        mu=mu,
        sigma_w2=0.01,
        sigma1_2=np.full(n_a, 4e-4),
        sigma2_2=np.full(n_a, 2.5e-3),
    )


def default_config(n_a: int = 5, years=(2000, 2014), seed: int = 0, x0: int = 60, **kw) -> DgpConfig:
    params = kw.pop("params", None) or default_params(n_a, x0)
    seasonal = kw.pop("seasonal_profile", 0.3 * np.cos(2 * np.pi * np.arange(MONTHS) / MONTHS))
    pop = kw.pop("base_population", np.full(n_a + 1, 1e5))
    return DgpConfig(n_a, tuple(years), params, pop, seed, x0, seasonal_profile=seasonal, **kw)


def simulate_k(cfg: DgpConfig, rng) -> np.ndarray:
    """Monthly factor: 14 seasonal starting values plus noise, then the AR recursion."""
    p = cfg.params
    T = MONTHS * cfg.n_years
    sw = np.sqrt(p.sigma_w2)
    init_sd = sw if cfg.init_sd is None else cfg.init_sd
    n0 = min(N_START, T)
    k = np.empty(T)
    k[:n0] = cfg.seasonal_profile[np.arange(n0) % MONTHS] + init_sd * rng.standard_normal(n0)
    w = rng.standard_normal(T) * sw
    for t in range(N_START, T):
        g1 = k[t - 1] - k[t - 13]
        g2 = k[t - 2] - k[t - 14]
        k[t] = k[t - 12] + p.mu + p.phi1 * g1 + p.phi2 * g2 + w[t]
    return k


def generate(cfg: DgpConfig) -> Synthetic:
    """Simulate annual rates, monthly deaths, populations and the latent factor."""
    rng = np.random.default_rng(cfg.seed)
    p = cfg.params
    n_a, ny = cfg.n_a, cfg.n_years
    k = simulate_k(cfg, rng)
    eps2 = rng.standard_normal((n_a, k.size)) * np.sqrt(p.sigma2_2)[:, None]
    eps1 = rng.standard_normal((n_a, ny)) * np.sqrt(p.sigma1_2)[:, None]
    z = p.a2[:, None] + np.outer(p.b2, k) + eps2

    pop = np.empty((n_a + 1, ny))
    pop[:, 0] = cfg.base_population
    deaths = np.empty((n_a, k.size))
    for j in range(ny):
        P = pop[:n_a, j]
        d = np.round(P[:, None] * np.exp(z[:, MONTHS * j : MONTHS * (j + 1)]))
        deaths[:, MONTHS * j : MONTHS * (j + 1)] = d
        if j + 1 == ny:
            break
        delta = cfg.migration * P
        # the extra top age ages along with the grid; it has no deaths of its own
        end = P + MONTHS * delta - d.sum(axis=1)
        if np.any(P + np.arange(1, MONTHS + 1)[:, None] * delta - np.cumsum(d.T, axis=0) <= 0):
            raise DataError(f"population exhausted in {cfg.years[0] + j}")
        pop[0, j + 1] = cfg.base_population[0]
        pop[1:, j + 1] = end

    y = p.a1[:, None] + np.outer(p.b1, k.reshape(ny, MONTHS).mean(axis=1)) + eps1
    ages = cfg.ages
    try:
        annual = AnnualPanel(ages, cfg.years, np.exp(y))
        dpanel = MonthlyDeathPanel(ages, (cfg.years[0], 1), deaths)
        ptable = PopulationTable(ages.extended(), cfg.years, pop)
    except DataError as e:
        raise DataError(f"synthetic panel invalid: {e}") from e
    return Synthetic(annual, dpanel, ptable, k)
