"""
Ingestion and validation of annual rates, monthly deaths and populations.

All tables are stored age-major: rows are single-year ages ``x0..x1`` and
columns are years (annual tables) or consecutive months (monthly tables).
Monthly log series built from zero death counts are kept as ``NaN`` and
flagged missing so the Kalman filter can skip them.
"""

from __future__ import annotations

import csv
import math
import os
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

MONTHS = 12


class DataError(ValueError):
    """Raised when an input table is malformed or incomplete."""


@dataclass(frozen=True)
class AgeGrid:
    x0: int
    x1: int

    def __post_init__(self):
        if self.x0 > self.x1:
            raise DataError(f"age range invalid: x0={self.x0} > x1={self.x1}")
        if self.n_a < 2:
            raise DataError(f"age range must contain at least two ages, got n_a={self.n_a}")

    @property
    def n_a(self) -> int:
        return self.x1 - self.x0 + 1

    @property
    def ages(self) -> np.ndarray:
        return np.arange(self.x0, self.x1 + 1)

    def extended(self) -> "AgeGrid":
        """Grid with one extra age on top (needed for migration accounting)."""
        return AgeGrid(self.x0, self.x1 + 1)


def month_range(start: tuple[int, int], end: tuple[int, int]) -> list[tuple[int, int]]:
    """Inclusive list of ``(year, month)`` pairs from ``start`` to ``end``."""
    (y0, m0), (y1, m1) = start, end
    if not (1 <= m0 <= MONTHS and 1 <= m1 <= MONTHS):
        raise DataError(f"month outside 1..12 in range {start}..{end}")
    i0, i1 = y0 * MONTHS + m0 - 1, y1 * MONTHS + m1 - 1
    if i1 < i0:
        raise DataError(f"empty month range {start}..{end}")
    return [(i // MONTHS, i % MONTHS + 1) for i in range(i0, i1 + 1)]


def _month_offset(start: tuple[int, int], ym: tuple[int, int]) -> int:
    return (ym[0] - start[0]) * MONTHS + ym[1] - start[1]


@dataclass(frozen=True)
class AnnualPanel:
    """Annual central death rates ``m`` and their logs ``y`` (n_a x n_years)."""

    ages: AgeGrid
    years: tuple[int, int]
    m: np.ndarray

    def __post_init__(self):
        m = np.asarray(self.m, dtype=float)
        object.__setattr__(self, "m", m)
        if m.shape != (self.ages.n_a, self.n_years):
            raise DataError(f"rate matrix shape {m.shape} != {(self.ages.n_a, self.n_years)}")
        if not np.all(np.isfinite(m)) or np.any(m <= 0) or np.any(m >= 1):
            raise DataError("annual rates must be finite and lie in (0, 1)")

    @property
    def n_years(self) -> int:
        return self.years[1] - self.years[0] + 1

    @property
    def year_list(self) -> list[int]:
        return list(range(self.years[0], self.years[1] + 1))

    @property
    def y(self) -> np.ndarray:
        return np.log(self.m)

    def col(self, year: int) -> int:
        if not self.years[0] <= year <= self.years[1]:
            raise DataError(f"year {year} outside annual panel {self.years}")
        return year - self.years[0]

    def rates(self, year: int) -> np.ndarray:
        return self.m[:, self.col(year)]

    def subset(self, years: tuple[int, int]) -> "AnnualPanel":
        a, b = self.col(years[0]), self.col(years[1])
        return AnnualPanel(self.ages, years, self.m[:, a : b + 1])


@dataclass(frozen=True)
class MonthlyDeathPanel:
    """Monthly death counts ``d`` (n_a x T), columns consecutive from ``start``."""

    ages: AgeGrid
    start: tuple[int, int]
    d: np.ndarray

    def __post_init__(self):
        d = np.asarray(self.d, dtype=float)
        object.__setattr__(self, "d", d)
        if d.ndim != 2 or d.shape[0] != self.ages.n_a:
            raise DataError(f"death matrix shape {d.shape} incompatible with {self.ages.n_a} ages")
        if not np.all(np.isfinite(d)) or np.any(d < 0):
            raise DataError("monthly deaths must be finite and nonnegative")
        if np.any(d != np.round(d)):
            raise DataError("monthly deaths must be integer-valued")
        if not 1 <= self.start[1] <= MONTHS:
            raise DataError(f"start month {self.start[1]} outside 1..12")

    @property
    def T(self) -> int:
        return self.d.shape[1]

    @property
    def end(self) -> tuple[int, int]:
        i = self.start[0] * MONTHS + self.start[1] - 1 + self.T - 1
        return (i // MONTHS, i % MONTHS + 1)

    @property
    def months(self) -> list[tuple[int, int]]:
        return month_range(self.start, self.end)

    def index(self, year: int, month: int) -> int:
        i = _month_offset(self.start, (year, month))
        if not 0 <= i < self.T:
            raise DataError(f"month {(year, month)} outside panel {self.start}..{self.end}")
        return i

    def year_block(self, year: int, months: int = MONTHS) -> np.ndarray:
        """Deaths for months ``1..months`` of ``year`` (n_a x months)."""
        i = self.index(year, 1)
        if months:
            self.index(year, months)
        return self.d[:, i : i + months]

    def annual_totals(self, year: int) -> np.ndarray:
        return self.year_block(year).sum(axis=1)

    def subset(self, start: tuple[int, int], end: tuple[int, int]) -> "MonthlyDeathPanel":
        return MonthlyDeathPanel(self.ages, start, self.d[:, self.index(*start) : self.index(*end) + 1])


@dataclass(frozen=True)
class PopulationTable:
    """Start-of-year population on a grid extending one age above the model grid."""

    ages: AgeGrid
    years: tuple[int, int]
    P: np.ndarray

    def __post_init__(self):
        P = np.asarray(self.P, dtype=float)
        object.__setattr__(self, "P", P)
        if P.shape != (self.ages.n_a, self.years[1] - self.years[0] + 1):
            raise DataError(f"population matrix shape {P.shape} inconsistent with grid")
        if not np.all(np.isfinite(P)) or np.any(P <= 0):
            raise DataError("population must be finite and positive")

    def has_year(self, year: int) -> bool:
        return self.years[0] <= year <= self.years[1]

    def at(self, year: int, ages: AgeGrid) -> np.ndarray:
        """Population at the start of ``year`` for ``ages``."""
        if not self.has_year(year):
            raise DataError(f"population missing for year {year}")
        lo = ages.x0 - self.ages.x0
        hi = ages.x1 - self.ages.x0
        if lo < 0 or hi >= self.ages.n_a:
            raise DataError(f"population grid {self.ages} does not cover ages {ages}")
        return self.P[lo : hi + 1, year - self.years[0]]

    def next_age(self, year: int, ages: AgeGrid) -> np.ndarray:
        """``P_{x+1,year}`` for ``x`` in ``ages``; the top age falls back to NaN if absent."""
        if not self.has_year(year):
            raise DataError(f"population missing for year {year}")
        out = np.full(ages.n_a, np.nan)
        for i, x in enumerate(range(ages.x0 + 1, ages.x1 + 2)):
            j = x - self.ages.x0
            if 0 <= j < self.ages.n_a:
                out[i] = self.P[j, year - self.years[0]]
        return out


@dataclass(frozen=True)
class ScaledMonthlyPanel:
    """``z = ln(d / P_start_of_year)`` with zero-death cells set to NaN."""

    ages: AgeGrid
    start: tuple[int, int]
    z: np.ndarray

    @property
    def T(self) -> int:
        return self.z.shape[1]

    @property
    def missing(self) -> np.ndarray:
        return np.isnan(self.z)

    @property
    def months(self) -> list[tuple[int, int]]:
        i = self.start[0] * MONTHS + self.start[1] - 1 + self.T - 1
        return month_range(self.start, (i // MONTHS, i % MONTHS + 1))


@dataclass(frozen=True)
class StackedObsSeries:
    """Per-month stacked observations ``[annual block; monthly block]`` with masks.

    ``Y`` has shape ``(T, 2 n_a)``; unobserved entries hold NaN and are False
    in ``mask``.
    """

    n_a: int
    start: tuple[int, int]
    Y: np.ndarray
    mask: np.ndarray = field(repr=False)

    @property
    def T(self) -> int:
        return self.Y.shape[0]

    @property
    def months(self) -> list[tuple[int, int]]:
        i = self.start[0] * MONTHS + self.start[1] - 1 + self.T - 1
        return month_range(self.start, (i // MONTHS, i % MONTHS + 1))

    @property
    def annual(self) -> np.ndarray:
        return self.Y[:, : self.n_a]

    @property
    def monthly(self) -> np.ndarray:
        return self.Y[:, self.n_a :]

    def is_december(self) -> np.ndarray:
        return np.array([m == MONTHS for _, m in self.months])

    def head(self, T: int) -> "StackedObsSeries":
        return StackedObsSeries(self.n_a, self.start, self.Y[:T], self.mask[:T])


# ---------------------------------------------------------------------------
# CSV readers / writers
# ---------------------------------------------------------------------------


def _read_rows(path, header: Sequence[str]) -> Iterable[tuple[int, list[str]]]:
    if not os.path.exists(path):
        raise DataError(f"file not found: {path}")
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            first = next(reader)
        except StopIteration:
            raise DataError(f"{path}: empty file") from None
        if [h.strip() for h in first] != list(header):
            raise DataError(f"{path}: header must be {','.join(header)}, got {','.join(first)}")
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != len(header):
                raise DataError(f"{path}:{lineno}: malformed row {row!r}")
            yield lineno, [c.strip() for c in row]


def _int(s, path, lineno, name) -> int:
    try:
        return int(s)
    except ValueError:
        raise DataError(f"{path}:{lineno}: malformed {name} {s!r}") from None


def _float(s, path, lineno, name) -> float:
    try:
        v = float(s)
    except ValueError:
        raise DataError(f"{path}:{lineno}: malformed {name} {s!r}") from None
    if not math.isfinite(v):
        raise DataError(f"{path}:{lineno}: non-finite {name} {s!r}")
    return v


def load_annual_rates(path, ages: AgeGrid, years: tuple[int, int]) -> AnnualPanel:
    """Read ``year,age,rate`` rows; rows outside the requested grid are ignored."""
    t0, t1 = years
    m = np.full((ages.n_a, t1 - t0 + 1), np.nan)
    for lineno, (ys, xs, rs) in _read_rows(path, ("year", "age", "rate")):
        yr, x = _int(ys, path, lineno, "year"), _int(xs, path, lineno, "age")
        rate = _float(rs, path, lineno, "rate")
        if not (t0 <= yr <= t1 and ages.x0 <= x <= ages.x1):
            continue
        if rate <= 0:
            raise DataError(f"{path}:{lineno}: nonpositive rate {rate!r} at (year={yr}, age={x})")
        if rate >= 1:
            raise DataError(f"{path}:{lineno}: rate {rate!r} >= 1 at (year={yr}, age={x})")
        i, j = x - ages.x0, yr - t0
        if not np.isnan(m[i, j]):
            raise DataError(f"{path}:{lineno}: duplicate key (year={yr}, age={x})")
        m[i, j] = rate
    gaps = [(t0 + j, ages.x0 + i) for i, j in zip(*np.nonzero(np.isnan(m)))]
    if gaps:
        gaps.sort()
        raise DataError(f"{path}: coverage gap, missing (year, age) {gaps[:20]}" + (" ..." if len(gaps) > 20 else ""))
    return AnnualPanel(ages, (t0, t1), m)


def load_monthly_deaths(path, ages: AgeGrid, months: tuple[tuple[int, int], tuple[int, int]]) -> MonthlyDeathPanel:
    """Read ``year,month,age,deaths`` rows over the inclusive month range."""
    grid = month_range(*months)
    start = grid[0]
    d = np.full((ages.n_a, len(grid)), np.nan)
    for lineno, (ys, ms, xs, ds) in _read_rows(path, ("year", "month", "age", "deaths")):
        yr = _int(ys, path, lineno, "year")
        mo = _int(ms, path, lineno, "month")
        x = _int(xs, path, lineno, "age")
        if not 1 <= mo <= MONTHS:
            raise DataError(f"{path}:{lineno}: month {mo} outside 1..12")
        deaths = _float(ds, path, lineno, "deaths")
        if deaths < 0:
            raise DataError(f"{path}:{lineno}: negative deaths {deaths!r}")
        if deaths != round(deaths):
            raise DataError(f"{path}:{lineno}: non-integer deaths {deaths!r}")
        j = _month_offset(start, (yr, mo))
        if not (0 <= j < len(grid) and ages.x0 <= x <= ages.x1):
            continue
        i = x - ages.x0
        if not np.isnan(d[i, j]):
            raise DataError(f"{path}:{lineno}: duplicate key (year={yr}, month={mo}, age={x})")
        d[i, j] = deaths
    absent = [grid[j] for j in range(len(grid)) if np.all(np.isnan(d[:, j]))]
    if absent:
        raise DataError(f"{path}: gap in month sequence, missing months {absent[:12]}")
    holes = [(grid[j], ages.x0 + i) for i, j in zip(*np.nonzero(np.isnan(d)))]
    if holes:
        raise DataError(f"{path}: coverage gap, missing ((year, month), age) {holes[:20]}")
    return MonthlyDeathPanel(ages, start, d)


def load_population(path, ages: AgeGrid, years: tuple[int, int]) -> PopulationTable:
    """Read ``year,age,population``; ``ages`` should be the extended grid (x0..x1+1)."""
    t0, t1 = years
    P = np.full((ages.n_a, t1 - t0 + 1), np.nan)
    for lineno, (ys, xs, ps) in _read_rows(path, ("year", "age", "population")):
        yr, x = _int(ys, path, lineno, "year"), _int(xs, path, lineno, "age")
        pop = _float(ps, path, lineno, "population")
        if not (t0 <= yr <= t1 and ages.x0 <= x <= ages.x1):
            continue
        if pop <= 0:
            raise DataError(f"{path}:{lineno}: nonpositive population {pop!r}")
        i, j = x - ages.x0, yr - t0
        if not np.isnan(P[i, j]):
            raise DataError(f"{path}:{lineno}: duplicate key (year={yr}, age={x})")
        P[i, j] = pop
    gaps = [(t0 + j, ages.x0 + i) for i, j in zip(*np.nonzero(np.isnan(P)))]
    if gaps:
        raise DataError(f"{path}: coverage gap, missing (year, age) {sorted(gaps)[:20]}")
    return PopulationTable(ages, (t0, t1), P)


def _fmt(v: float) -> str:
    return repr(float(v)) if v != int(v) or abs(v) >= 1e16 else str(int(v))


def write_annual_rates(path, panel: AnnualPanel) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["year", "age", "rate"])
        for j, yr in enumerate(panel.year_list):
            for i, x in enumerate(panel.ages.ages):
                w.writerow([yr, int(x), repr(float(panel.m[i, j]))])


def write_monthly_deaths(path, panel: MonthlyDeathPanel) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["year", "month", "age", "deaths"])
        for j, (yr, mo) in enumerate(panel.months):
            for i, x in enumerate(panel.ages.ages):
                w.writerow([yr, mo, int(x), int(panel.d[i, j])])


def write_population(path, table: PopulationTable) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["year", "age", "population"])
        for j, yr in enumerate(range(table.years[0], table.years[1] + 1)):
            for i, x in enumerate(table.ages.ages):
                w.writerow([yr, int(x), _fmt(table.P[i, j])])


# ---------------------------------------------------------------------------
# Derived series
# ---------------------------------------------------------------------------


def build_scaled_monthly(d: MonthlyDeathPanel, P: PopulationTable) -> ScaledMonthlyPanel:
    """Scale deaths by the start-of-year population of each month's calendar year."""
    z = np.empty_like(d.d)
    for j, (yr, _) in enumerate(d.months):
        pop = P.at(yr, d.ages)
        with np.errstate(divide="ignore"):
            z[:, j] = np.log(d.d[:, j] / pop)
    z[d.d == 0] = np.nan
    return ScaledMonthlyPanel(d.ages, d.start, z)


@dataclass
class ConsistencyReport:
    rows: list[tuple[int, int, float, float, float, bool]]
    tol: float

    @property
    def flagged(self) -> list[tuple[int, int, float]]:
        """``(age, year, diff)`` for cells with ``|diff| > tol``."""
        return [(a, y, diff) for a, y, _, _, diff, f in self.rows if f]

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["age", "year", "annual_deaths", "monthly_sum", "diff", "flagged"])
            for a, y, D, s, diff, f in self.rows:
                w.writerow([a, y, _fmt(D), _fmt(s), _fmt(diff), int(f)])


def check_annual_monthly_consistency(
    annual_deaths: np.ndarray, years: tuple[int, int], d: MonthlyDeathPanel, tol: float = 5
) -> ConsistencyReport:
    """Compare annual death totals with summed monthly deaths over overlapping years.

    A cell is flagged when ``|D - sum_h d| > tol``; a difference equal to
    ``tol`` passes.
    """
    annual_deaths = np.asarray(annual_deaths, dtype=float)
    rows = []
    for j, yr in enumerate(range(years[0], years[1] + 1)):
        try:
            s = d.annual_totals(yr)
        except DataError:
            continue
        for i, x in enumerate(d.ages.ages):
            diff = float(annual_deaths[i, j] - s[i])
            rows.append((int(x), yr, float(annual_deaths[i, j]), float(s[i]), diff, abs(diff) > tol))
    return ConsistencyReport(rows, tol)


def stack_observations(y: AnnualPanel, z: ScaledMonthlyPanel) -> StackedObsSeries:
    """Stack annual and monthly blocks on the monthly grid.

    The annual block is observed only in December of years covered by ``y``;
    monthly cells flagged missing at ingestion stay masked.
    """
    if y.ages != z.ages:
        raise DataError(f"misaligned age grids: {y.ages} vs {z.ages}")
    n_a = y.ages.n_a
    months = z.months
    first, last = months[0], months[-1]
    if _month_offset(first, (y.years[0], 1)) < 0 or _month_offset(last, (y.years[1], MONTHS)) > 0:
        raise DataError(f"monthly range {first}..{last} does not span annual years {y.years}")
    T = len(months)
    Y = np.full((T, 2 * n_a), np.nan)
    Y[:, n_a:] = z.z.T
    for tau, (yr, mo) in enumerate(months):
        if mo == MONTHS and y.years[0] <= yr <= y.years[1]:
            Y[tau, :n_a] = y.y[:, y.col(yr)]
    mask = ~np.isnan(Y)
    return StackedObsSeries(n_a, z.start, Y, mask)


@dataclass(frozen=True)
class MortalityData:
    """Aligned annual, monthly and population inputs."""

    annual: AnnualPanel
    deaths: MonthlyDeathPanel
    population: PopulationTable

    @property
    def ages(self) -> AgeGrid:
        return self.annual.ages

    def scaled(self) -> ScaledMonthlyPanel:
        return build_scaled_monthly(self.deaths, self.population)

    def window(self, t0: int, t1: int) -> tuple[AnnualPanel, ScaledMonthlyPanel]:
        """Annual panel and scaled monthly panel restricted to years ``t0..t1``."""
        ann = self.annual.subset((t0, t1))
        d = self.deaths.subset((t0, 1), (t1, MONTHS))
        return ann, build_scaled_monthly(d, self.population)

    def stacked(self, t0: int, t1: int) -> StackedObsSeries:
        return stack_observations(*self.window(t0, t1))

    def z_months(self, year: int, h: int) -> np.ndarray:
        """Scaled monthly observations for months 1..h of ``year`` (h x n_a)."""
        if h == 0:
            return np.empty((0, self.ages.n_a))
        d = self.deaths.year_block(year, h)
        pop = self.population.at(year, self.ages)
        with np.errstate(divide="ignore"):
            z = np.log(d / pop[:, None])
        z[d == 0] = np.nan
        return z.T


def load_data(annual_path, deaths_path, population_path, ages: AgeGrid, years: tuple[int, int]) -> MortalityData:
    annual = load_annual_rates(annual_path, ages, years)
    deaths = load_monthly_deaths(deaths_path, ages, ((years[0], 1), (years[1], MONTHS)))
    pop = load_population(population_path, ages.extended(), years)
    return MortalityData(annual, deaths, pop)
