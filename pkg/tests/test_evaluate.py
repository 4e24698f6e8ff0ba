import csv

import numpy as np
import pytest

from mfmort.data import DataError
from mfmort.evaluate import EvalSpec, ape, mape, run_backtest, run_nowcast
from mfmort.synth import default_config, generate


@pytest.fixture(scope="module")
def data():
    return generate(default_config(n_a=3, years=(2000, 2011), seed=21)).data


def small(**kw):
    base = dict(targets=[2010, 2011], B=64, seed=4, max_iter=8)
    base.update(kw)
    return EvalSpec(**base)


@pytest.fixture(scope="module")
def backtest(data):
    return run_backtest(small(horizons=[1, 2], months=[2, 6, 10], methods=["ss_monthly", "lc_annual", "lc_monthly", "ss_reconciled"]), data)


def test_ape_examples():
    assert ape(0.02, 0.02) == 0.0
    assert ape(0.010, 0.011) == pytest.approx(0.1)
    assert mape([0.1, 0.3]) == pytest.approx(0.2)
    with pytest.raises(ValueError):
        ape(0.0, 0.1)


def test_job_count_and_fit_dedup(backtest):
    assert len(backtest.jobs) == 2 * 3 * 2
    # fit-window ends 2008, 2009, 2010
    assert backtest.n_fits == 3


def test_lc_annual_constant_in_h(backtest):
    for T in (2010, 2011):
        for n in (1, 2):
            vals = {backtest.window("lc_annual", T, n, h).mape for h in (2, 6, 10)}
            assert len(vals) == 1


def test_table_is_mean_of_windows(backtest):
    for (m, n, h), v in backtest.table().items():
        per = [backtest.window(m, T, n, h).mape for T in (2010, 2011)]
        assert v == pytest.approx(np.mean(per), abs=1e-12)
        assert v >= 0


def test_nowcast_matches_backtest_n1(data, backtest):
    now = run_nowcast(small(months=[2, 6], methods=["ss_monthly", "lc_annual", "lc_monthly", "ss_reconciled"]), data)
    for r in now.results:
        assert r.mape == backtest.window(r.method, r.target_year, 1, r.h).mape


def test_deterministic(data):
    a = run_nowcast(small(months=[3], targets=[2011]), data)
    b = run_nowcast(small(months=[3], targets=[2011]), data)
    assert [r.mape for r in a.results] == [r.mape for r in b.results]


def test_report_csvs(tmp_path, backtest):
    paths = backtest.write_all(tmp_path)
    with open(paths["summary"]) as fh:
        rows = list(csv.DictReader(fh))
    assert list(rows[0]) == ["method", "n", "h", "mape_pct"]
    assert len(rows) == 4 * 2 * 3
    with open(paths["widths"]) as fh:
        head = next(csv.reader(fh))
    assert head[:4] == ["method", "age", "target_year", "width95"]


def test_window_validation(data):
    with pytest.raises(DataError):
        run_backtest(small(targets=[2012]), data)
    with pytest.raises(DataError):
        run_backtest(small(targets=[2002]), data)
    with pytest.raises(ValueError):
        run_nowcast(small(months=[12]), data)
    with pytest.raises(ValueError):
        EvalSpec(targets=[2010], methods=["ss_daily"])
