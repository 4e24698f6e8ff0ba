"""
Command-line entry point.

Every command reads a flat ``key = value`` config file (``#`` starts a
comment; list values are comma separated; relative paths resolve against
the config file's directory) and writes its outputs plus ``manifest.json``
into the output directory.  Exit codes: 0 success, 2 configuration error,
3 data error, 4 numerical failure.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import platform
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .data import AgeGrid, DataError, MortalityData, load_data
from .evaluate import BASE_METHODS, METHODS, EvalSpec, run_backtest, run_nowcast
from .forecast import KINDS, ForecastBundle, LcModel, MfssModel
from .lc import DegenerateFitError, LcParams
from .mfss import MfssParams
from .reconcile import add_reconciled, base_vectors, fit_weights, reconcile
from .synth import default_config, generate

log = logging.getLogger("mfmort")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4
MODELS = ("mfss", "lc_annual", "lc_monthly", "lc")


class ConfigError(ValueError):
    pass


def _int_list(s):
    out = []
    for part in s.split(","):
        part = part.strip()
        if "-" in part[1:]:  # inclusive range, e.g. 1-11
            a, b = part.split("-", 1)
            out.extend(range(int(a), int(b) + 1))
        elif part:
            out.append(int(part))
    return out


def _pair(s):
    v = _int_list(s)
    if len(v) != 2:
        raise ValueError("expected two comma-separated integers")
    return tuple(v)


def _str_list(s):
    return [p.strip() for p in s.split(",") if p.strip()]


# key -> (parser, default, description)
KEYS = {
    "annual": (str, None, "annual rates CSV (year,age,rate)"),
    "deaths": (str, None, "monthly deaths CSV (year,month,age,deaths)"),
    "population": (str, None, "start-of-year population CSV (year,age,population), ages x0..x1+1"),
    "x0": (int, None, "youngest age"),
    "x1": (int, None, "oldest age"),
    "years": (_pair, None, "first,last year covered by the data files"),
    "fit_start": (int, None, "first fitted year (default: first data year)"),
    "fit_end": (int, None, "last fitted year (default: last data year)"),
    "model": (str, "mfss", "mfss | lc_annual | lc_monthly | lc (both LC benchmarks)"),
    "params": (str, None, "fitted-parameter JSON from `fit`; refitted when absent"),
    "target_years": (_int_list, None, "forecast target years (default: fit_end + 1)"),
    "origin_month": (int, 0, "months h of the origin year already observed (0..12)"),
    "kinds": (_str_list, ["direct_annual", "aggregated_monthly", "monthly"], "forecast kinds to export"),
    "reconcile": (str, "none", "none | scaled | full"),
    "targets": (_int_list, None, "evaluation target years"),
    "horizons": (_int_list, None, "evaluation horizons n (nowcast: 1; backtest default 1-5)"),
    "months": (_int_list, None, "evaluation origin months h (nowcast default 1-11; backtest default 2,6,10)"),
    "methods": (_str_list, list(BASE_METHODS), "evaluation methods"),
    "B": (int, 10_000, "Monte Carlo paths"),
    "alpha": (float, 0.05, "interval level is 1 - alpha"),
    "seed": (int, 0, "master seed"),
    "tol": (float, 1e-6, "EM relative Q-change tolerance"),
    "max_iter": (int, 200, "EM iteration cap"),
    "warmup": (int, 14, "months excluded from the M-step sums"),
    "n_a": (int, 5, "synth: number of ages"),
    "synth_years": (_pair, (2000, 2014), "synth: first,last year"),
    "migration": (float, 0.0, "synth: monthly net migration as a fraction of population"),
}


@dataclass
class RunConfig:
    values: dict
    text: str = ""
    base_dir: Path = field(default_factory=Path.cwd)

    def __getitem__(self, key):
        return self.values[key]

    def path(self, key) -> Path:
        v = self.values.get(key)
        if v is None:
            raise ConfigError(f"config key '{key}' is required")
        p = Path(v)
        return p if p.is_absolute() else self.base_dir / p

    @property
    def sha256(self) -> str:
        canon = json.dumps({k: self.values[k] for k in sorted(self.values)}, sort_keys=True, default=list)
        return hashlib.sha256(canon.encode()).hexdigest()


def parse_config(text: str, base_dir=None, overrides: dict | None = None) -> RunConfig:
    raw = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"config line {lineno}: expected key = value")
        k, v = (s.strip() for s in line.split("=", 1))
        if k not in KEYS:
            raise ConfigError(f"config line {lineno}: unknown key '{k}'")
        if k in raw:
            raise ConfigError(f"config line {lineno}: duplicate key '{k}'")
        raw[k] = v
    values = {}
    for k, (parse, default, _) in KEYS.items():
        if k in raw:
            try:
                values[k] = parse(raw[k])
            except ValueError as e:
                raise ConfigError(f"config key '{k}': cannot parse {raw[k]!r} ({e})") from None
        else:
            values[k] = default
    values.update(overrides or {})
    _validate(values)
    return RunConfig(values, text, Path(base_dir) if base_dir else Path.cwd())


def _validate(v: dict) -> None:
    if v["x0"] is not None and v["x1"] is not None and v["x0"] > v["x1"]:
        raise ConfigError(f"x0 ({v['x0']}) must not exceed x1 ({v['x1']})")
    if v["x0"] is not None and v["x0"] < 0:
        raise ConfigError("x0 must be nonnegative")
    if v["years"] is not None and v["years"][0] > v["years"][1]:
        raise ConfigError("years must be increasing")
    if v["model"] not in MODELS:
        raise ConfigError(f"model must be one of {MODELS}, got {v['model']!r}")
    if not 0 <= v["origin_month"] <= 12:
        raise ConfigError("origin_month must be in 0..12")
    if v["B"] < 1:
        raise ConfigError("B must be at least 1")
    if not 0 < v["alpha"] < 1:
        raise ConfigError("alpha must be in (0, 1)")
    if v["reconcile"] not in ("none", "scaled", "full"):
        raise ConfigError("reconcile must be none, scaled or full")
    bad = [k for k in v["kinds"] if k not in KINDS]
    if bad:
        raise ConfigError(f"unknown kinds {bad}")
    bad = [m for m in v["methods"] if m not in METHODS]
    if bad:
        raise ConfigError(f"unknown methods {bad}")
    if v["tol"] <= 0 or v["max_iter"] < 1 or v["warmup"] < 0:
        raise ConfigError("tol, max_iter and warmup must be positive")


# ---------------------------------------------------------------------------


def _load(cfg: RunConfig) -> MortalityData:
    for k in ("x0", "x1", "years"):
        if cfg[k] is None:
            raise ConfigError(f"config key '{k}' is required")
    ages = AgeGrid(cfg["x0"], cfg["x1"])
    return load_data(cfg.path("annual"), cfg.path("deaths"), cfg.path("population"), ages, cfg["years"])


def _window(cfg: RunConfig, data: MortalityData) -> tuple[int, int]:
    y0, y1 = data.annual.years
    t0 = cfg["fit_start"] if cfg["fit_start"] is not None else y0
    t1 = cfg["fit_end"] if cfg["fit_end"] is not None else y1
    if not y0 <= t0 < t1 <= y1:
        raise ConfigError(f"fit window {t0}..{t1} must lie inside the data years {y0}..{y1}")
    return t0, t1


def _fit_models(cfg, data, t0, t1) -> dict:
    out = {}
    if cfg["model"] == "mfss":
        out["mfss"] = MfssModel.fit(data, t0, t1, tol=cfg["tol"], max_iter=cfg["max_iter"], warmup=cfg["warmup"])
    else:
        out["lc"] = LcModel.fit(data, t0, t1)
    return out


def _params_json(cfg, models: dict, t0: int, t1: int) -> dict:
    meta = {"ages": [cfg["x0"], cfg["x1"]], "fit_window": [t0, t1]}
    if "mfss" in models:
        return models["mfss"].params.to_dict()
    lc: LcModel = models["lc"]
    if cfg["model"] == "lc_annual":
        return lc.annual.to_dict(**meta)
    if cfg["model"] == "lc_monthly":
        return lc.monthly.to_dict(**meta)
    return {"model": "lc", **meta, "annual": lc.annual.to_dict(), "monthly": lc.monthly.to_dict()}


def _models_from_json(d: dict, data: MortalityData):
    t0, t1 = d["fit_window"]
    if d["model"] == "mfss":
        return MfssModel.from_params(MfssParams.from_dict(d), data, t0, t1)
    if d["model"] == "lc":
        return LcModel(LcParams.from_dict(d["annual"]), LcParams.from_dict(d["monthly"]), data.ages, t0, t1)
    raise ConfigError(f"forecasting needs mfss or paired lc parameters, got model {d['model']!r}")


def _write_json(path, obj) -> None:
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True, default=float)
        fh.write("\n")


def _sha(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _manifest(out: Path, command: str, cfg: RunConfig, outputs: list, extra=None) -> None:
    m = {
        "command": command,
        "config": cfg.values,
        "config_sha256": cfg.sha256,
        "seed": cfg["seed"],
        "versions": {"mfmort": __version__, "numpy": np.__version__, "python": platform.python_version()},
        "outputs": {Path(p).name: _sha(p) for p in outputs},
    }
    if extra:
        m.update(extra)
    _write_json(out / "manifest.json", m)


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_fit(cfg: RunConfig, out: Path, verify: bool = False) -> list:
    data = _load(cfg)
    t0, t1 = _window(cfg, data)
    models = _fit_models(cfg, data, t0, t1)
    params = _params_json(cfg, models, t0, t1)
    p_path, d_path = out / "params.json", out / "diagnostics.csv"
    _write_json(p_path, params)
    with open(d_path, "w") as fh:
        fh.write("iteration,Q,loglik\n")
        if "mfss" in models:
            diag = models["mfss"].diagnostics
            for i, ll in enumerate(diag.logliks):
                q = repr(diag.q_values[i]) if i < len(diag.q_values) else ""
                fh.write(f"{i},{q},{ll!r}\n")
        else:
            lc = models["lc"]
            src = {"lc_annual": [lc.annual], "lc_monthly": [lc.monthly]}.get(cfg["model"], [lc.annual, lc.monthly])
            for p in src:
                for i, ll in enumerate(p.loglik_path):
                    fh.write(f"{i},,{ll!r}\n")
    return [p_path, d_path]


def _forecast_bundle(cfg: RunConfig, data: MortalityData, want_recon: str) -> tuple[ForecastBundle, list | None]:
    if cfg["params"]:
        with open(cfg.path("params")) as fh:
            model = _models_from_json(json.load(fh), data)
    else:
        t0, t1 = _window(cfg, data)
        if cfg["model"] in ("lc_annual", "lc_monthly"):
            raise ConfigError("forecasting with LC uses model = lc (both benchmarks)")
        model = next(iter(_fit_models(cfg, data, t0, t1).values()))
    t_o = model.fit_end + 1
    y1 = data.annual.years[1]
    if t_o > y1 + 1:
        raise ConfigError(f"origin year {t_o} is beyond the data end + 1 ({y1 + 1})")
    h = cfg["origin_month"]
    if h:
        data.deaths.index(t_o, h)  # months 1..h must be observed
    targets = cfg["target_years"] or [t_o]
    kinds = set(cfg["kinds"]) - {"reconciled"}
    if want_recon != "none":
        kinds |= {"direct_annual", "aggregated_monthly", "monthly"}
    b = model.forecast(data, h, targets, B=cfg["B"], seed=cfg["seed"], alpha=cfg["alpha"], kinds=tuple(kinds))
    weights = None
    if want_recon != "none":
        weights = fit_weights(model, data, want_recon)
        add_reconciled(b, weights, cfg["alpha"])
    keep = set(cfg["kinds"]) | ({"reconciled"} if want_recon != "none" else set())
    b.targets = {k: v for k, v in b.targets.items() if k[0] in keep}
    return b, weights


def verify_reconciled(bundle: ForecastBundle, weights, tol: float = 1e-9) -> dict:
    """Recompute reconciled paths independently and check the summing constraint."""
    worst_coh, worst_dev = 0.0, 0.0
    for (kind, y), tf in bundle.targets.items():
        if kind != "reconciled":
            continue
        base = base_vectors(bundle, y)
        for i, w in enumerate(weights):
            r = reconcile(base[:, i], w)
            scale = np.maximum(1.0, np.abs(r[:, 0]))
            worst_coh = max(worst_coh, float(np.max(np.abs(r[:, 0] - r[:, 1:].sum(axis=1)) / scale)))
            worst_dev = max(worst_dev, float(np.max(np.abs(r[:, 1:] - tf.deaths[:, :, i]) / scale[:, None])))
    return {"coherence_max_rel": worst_coh, "recompute_max_rel": worst_dev, "ok": worst_coh <= tol and worst_dev <= tol}


def _cmd_forecast(cfg, out, verify, recon) -> tuple[list, dict]:
    data = _load(cfg)
    bundle, weights = _forecast_bundle(cfg, data, recon)
    path = out / "forecast.csv"
    extra = {}
    if verify and weights is not None:
        res = verify_reconciled(bundle, weights)
        extra["verify"] = res
        if not res["ok"]:
            raise FloatingPointError(f"reconciled forecasts failed verification: {res}")
    bundle.write_csv(path)
    return [path], extra


def cmd_forecast(cfg, out, verify=False):
    return _cmd_forecast(cfg, out, verify, cfg["reconcile"])


def cmd_reconcile(cfg, out, verify=False):
    recon = cfg["reconcile"] if cfg["reconcile"] != "none" else "scaled"
    return _cmd_forecast(cfg, out, verify, recon)


def _eval_spec(cfg, data, nowcast: bool) -> EvalSpec:
    if not cfg["targets"]:
        raise ConfigError("config key 'targets' is required")
    months = cfg["months"] or (list(range(1, 12)) if nowcast else [2, 6, 10])
    horizons = [1] if nowcast else (cfg["horizons"] or [1, 2, 3, 4, 5])
    if nowcast and cfg["horizons"] not in (None, [1]):
        raise ConfigError("nowcast uses horizons = 1")
    if nowcast and max(months) > 11:
        raise ConfigError("nowcast origin months must be <= 11")
    return EvalSpec(
        targets=cfg["targets"], horizons=horizons, months=months, methods=cfg["methods"],
        fit_start=cfg["fit_start"], B=cfg["B"], seed=cfg["seed"], alpha=cfg["alpha"],
        recon_method=cfg["reconcile"] if cfg["reconcile"] != "none" else "scaled",
        tol=cfg["tol"], max_iter=cfg["max_iter"], warmup=cfg["warmup"],
    )  # fmt: skip


def cmd_nowcast(cfg, out, verify=False):
    data = _load(cfg)
    rep = run_nowcast(_eval_spec(cfg, data, True), data)
    return list(rep.write_all(out).values()), {"jobs": len(rep.jobs), "fits": rep.n_fits}


def cmd_backtest(cfg, out, verify=False):
    data = _load(cfg)
    rep = run_backtest(_eval_spec(cfg, data, False), data)
    return list(rep.write_all(out).values()), {"jobs": len(rep.jobs), "fits": rep.n_fits}


def cmd_synth(cfg, out, verify=False):
    x0 = cfg["x0"] if cfg["x0"] is not None else 60
    dcfg = default_config(cfg["n_a"], cfg["synth_years"], seed=cfg["seed"], x0=x0, migration=cfg["migration"])
    s = generate(dcfg)
    paths = s.write_csvs(out)
    truth = out / "true_params.json"
    _write_json(truth, dcfg.params.to_dict())
    return [*paths.values(), out / "true_k.csv", truth]


COMMANDS = {
    "fit": cmd_fit,
    "forecast": cmd_forecast,
    "nowcast": cmd_nowcast,
    "backtest": cmd_backtest,
    "reconcile": cmd_reconcile,
    "synth": cmd_synth,
}


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="mfmort", description="Mixed-frequency mortality forecasting")
    ap.add_argument("command", choices=sorted(COMMANDS))
    ap.add_argument("--config", help="flat key = value config file")
    ap.add_argument("--seed", type=int, help="override the config seed")
    ap.add_argument("--out", default="out", help="output directory")
    ap.add_argument("--verify", action="store_true", help="recheck reconciled coherence independently")
    ap.add_argument("-v", "--verbose", action="store_true")
    return ap


def run(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        overrides = {} if args.seed is None else {"seed": args.seed}
        if args.config:
            p = Path(args.config)
            try:
                text = p.read_text()
            except OSError as e:
                raise ConfigError(f"cannot read config: {e}") from None
            cfg = parse_config(text, p.parent, overrides)
        else:
            cfg = parse_config("", None, overrides)
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        res = COMMANDS[args.command](cfg, out, args.verify)
        outputs, extra = res if isinstance(res, tuple) else (res, None)
        _manifest(out, args.command, cfg, outputs, extra)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except DataError as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except (FloatingPointError, np.linalg.LinAlgError, DegenerateFitError) as e:
        print(f"numerical error: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except ValueError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    return EXIT_OK


def main(argv=None) -> None:
    sys.exit(run(argv))


if __name__ == "__main__":
    main()
