"""
Forecast evaluation: APE/MAPE, the intra-year nowcast experiment and the
expanding-window multi-year backtest.

For target year ``T`` and horizon ``n`` the models are fitted on data
through December of ``T - n`` and the forecast origin is month ``h`` of
``T - n + 1``.  Truth is always the annual panel's rate.
"""

from __future__ import annotations

import csv
import logging
import time
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .data import MONTHS, DataError, MortalityData
from .forecast import LcModel, MfssModel
from .reconcile import add_reconciled, fit_weights

log = logging.getLogger(__name__)

# method -> (model family, forecast kind)
METHODS = {
    "ss_annual": ("ss", "direct_annual"),
    "ss_monthly": ("ss", "aggregated_monthly"),
    "lc_annual": ("lc", "direct_annual"),
    "lc_monthly": ("lc", "aggregated_monthly"),
    "ss_reconciled": ("ss", "reconciled"),
    "lc_reconciled": ("lc", "reconciled"),
}
BASE_METHODS = ("ss_annual", "ss_monthly", "lc_annual", "lc_monthly")
MIN_FIT_YEARS = 3


def ape(m_true, m_hat) -> np.ndarray:
    """Absolute percentage error as a fraction, ``|m - m_hat| / m``."""
    m_true = np.asarray(m_true, dtype=float)
    if np.any(m_true <= 0):
        raise ValueError("true rates must be positive")
    return np.abs(m_true - np.asarray(m_hat, dtype=float)) / m_true


def mape(apes) -> float:
    """Mean over ages of per-age APEs."""
    return float(np.mean(apes))


@dataclass
class EvalSpec:
    targets: list
    horizons: list = field(default_factory=lambda: [1])
    months: list = field(default_factory=lambda: list(range(1, MONTHS)))
    methods: list = field(default_factory=lambda: list(BASE_METHODS))
    fit_start: int | None = None  # first year of every expanding window; default data start
    B: int = 10_000
    seed: int = 0
    alpha: float = 0.05
    recon_method: str = "scaled"
    tol: float = 1e-6
    max_iter: int = 200
    warmup: int = 14

    def __post_init__(self):
        self.targets = sorted(int(t) for t in self.targets)
        self.horizons = sorted(int(n) for n in self.horizons)
        self.months = sorted(int(h) for h in self.months)
        bad = [m for m in self.methods if m not in METHODS]
        if bad:
            raise ValueError(f"unknown methods {bad}")
        if not self.targets or not self.horizons or not self.months:
            raise ValueError("targets, horizons and months must be non-empty")
        if min(self.horizons) < 1:
            raise ValueError("horizons must be >= 1")
        if min(self.months) < 0 or max(self.months) > MONTHS:
            raise ValueError("origin months must be in 0..12")


@dataclass
class WindowResult:
    method: str
    target_year: int
    n: int
    h: int
    ape: np.ndarray
    width: np.ndarray
    point: np.ndarray

    @property
    def mape(self) -> float:
        return mape(self.ape)


@dataclass
class EvalReport:
    spec: EvalSpec
    ages: np.ndarray
    results: list = field(default_factory=list)
    jobs: list = field(default_factory=list)  # (fit_end, origin_year, h, n, target)
    n_fits: int = 0
    seconds: float = 0.0

    def table(self) -> dict:
        """Average MAPE (fraction) per ``(method, n, h)`` over target years, equal weights."""
        acc = defaultdict(list)
        for r in self.results:
            acc[(r.method, r.n, r.h)].append(r.mape)
        return {k: float(np.mean(v)) for k, v in sorted(acc.items())}

    def window(self, method: str, target: int, n: int, h: int) -> WindowResult:
        for r in self.results:
            if (r.method, r.target_year, r.n, r.h) == (method, target, n, h):
                return r
        raise KeyError((method, target, n, h))

    def write_summary(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["method", "n", "h", "mape_pct"])
            for (m, n, h), v in self.table().items():
                w.writerow([m, n, h, repr(100 * v)])

    def write_detail(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["method", "target_year", "n", "h", "mape_pct"])
            for r in self.results:
                w.writerow([r.method, r.target_year, r.n, r.h, repr(100 * r.mape)])

    def write_ape(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["method", "target_year", "n", "h", "age", "ape_pct"])
            for r in self.results:
                for x, a in zip(self.ages, r.ape):
                    w.writerow([r.method, r.target_year, r.n, r.h, int(x), repr(100 * float(a))])

    def write_widths(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["method", "age", "target_year", "width95", "n", "h"])
            for r in self.results:
                for x, wd in zip(self.ages, r.width):
                    w.writerow([r.method, int(x), r.target_year, repr(float(wd)), r.n, r.h])

    def write_all(self, out_dir) -> dict:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        paths = {
            "summary": out / "mape_summary.csv",
            "detail": out / "mape_windows.csv",
            "ape": out / "ape_by_age.csv",
            "widths": out / "interval_widths.csv",
        }
        self.write_summary(paths["summary"])
        self.write_detail(paths["detail"])
        self.write_ape(paths["ape"])
        self.write_widths(paths["widths"])
        return paths


def _check_windows(spec: EvalSpec, data: MortalityData) -> int:
    y0, y1 = data.annual.years
    start = y0 if spec.fit_start is None else spec.fit_start
    if start < y0:
        raise DataError(f"fit start {start} precedes data start {y0}")
    for T in spec.targets:
        if T > y1:
            raise DataError(f"target year {T} has no annual truth (data end {y1})")
        for n in spec.horizons:
            fit_end = T - n
            if fit_end - start + 1 < MIN_FIT_YEARS:
                raise DataError(f"window for target {T}, n={n} has {fit_end - start + 1} fit years (< {MIN_FIT_YEARS})")
            if max(spec.months):
                data.deaths.index(fit_end + 1, max(spec.months))
    return start


class _FitCache:
    """Fits keyed by fit-window end; one fit serves every origin month and target."""

    def __init__(self, spec: EvalSpec, data: MortalityData, start: int, families: set):
        self.spec, self.data, self.start, self.families = spec, data, start, families
        self.models: dict = {}
        self.weights: dict = {}

    def get(self, fam: str, fit_end: int):
        key = (fam, fit_end)
        if key not in self.models:
            s = self.spec
            if fam == "ss":
                m = MfssModel.fit(self.data, self.start, fit_end, tol=s.tol, max_iter=s.max_iter, warmup=s.warmup)
            else:
                m = LcModel.fit(self.data, self.start, fit_end)
            self.models[key] = m
        return self.models[key]

    def weights_for(self, fam: str, fit_end: int):
        key = (fam, fit_end)
        if key not in self.weights:
            self.weights[key] = fit_weights(self.get(fam, fit_end), self.data, self.spec.recon_method)
        return self.weights[key]

    @property
    def n_fits(self) -> int:
        return len({fe for _, fe in self.models})


def run_backtest(spec: EvalSpec, data: MortalityData) -> EvalReport:
    """Expanding-window evaluation over every target, horizon and origin month."""
    t_start = time.perf_counter()
    start = _check_windows(spec, data)
    families = {METHODS[m][0] for m in spec.methods}
    cache = _FitCache(spec, data, start, families)
    report = EvalReport(spec, data.ages.ages)
    for T in spec.targets:
        truth = data.annual.rates(T)
        for n in spec.horizons:
            fit_end = T - n
            for h in spec.months:
                report.jobs.append((fit_end, fit_end + 1, h, n, T))
                for fam in sorted(families):
                    kinds = {METHODS[m][1] for m in spec.methods if METHODS[m][0] == fam}
                    fc_kinds = set(kinds) - {"reconciled"}
                    if "reconciled" in kinds:
                        fc_kinds |= {"direct_annual", "aggregated_monthly", "monthly"}
                    model = cache.get(fam, fit_end)
                    bundle = model.forecast(data, h, [T], B=spec.B, seed=spec.seed, alpha=spec.alpha, kinds=tuple(fc_kinds))
                    if "reconciled" in kinds:
                        add_reconciled(bundle, cache.weights_for(fam, fit_end), spec.alpha)
                    for m in spec.methods:
                        f, kind = METHODS[m]
                        if f != fam:
                            continue
                        tf = bundle.get(kind, T)
                        report.results.append(WindowResult(m, T, n, h, ape(truth, tf.point), tf.upper - tf.lower, tf.point))
    report.n_fits = cache.n_fits
    report.seconds = time.perf_counter() - t_start
    return report


def run_nowcast(spec: EvalSpec, data: MortalityData) -> EvalReport:
    """Current-year nowcasts (``n = 1``) at origin months ``h <= 11``."""
    if spec.horizons != [1]:
        raise ValueError("nowcasts use n = 1 only")
    if max(spec.months) > MONTHS - 1:
        raise ValueError("nowcast origin months must be <= 11")
    return run_backtest(spec, data)
