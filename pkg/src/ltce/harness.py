"""Config-driven Monte Carlo runner, result tables, and SVG plots.

A run expands ``sweep values x trials`` into independent jobs. Each job draws
one synthetic replication, fits the nuisance models once, runs every rostered
estimator on the same data, and returns one record per method. Records are
sorted by ``(sweep index, trial, roster position)`` before a single write, so
serial and parallel runs produce the same ``results.jsonl``.
"""

from __future__ import annotations

import csv
import json
import logging
import math
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Iterable

import numpy as np
import tomli
from threadpoolctl import threadpool_limits

from . import __version__
from .balancenet import BalanceConfig
from .dgp import DgpConfig, Style, derive_seed, simulate
from .estimators import METHODS, EstimatorConfig, estimate, needs_nuisances
from .metrics import TrialResult, aggregate, eps_ate, eps_cate
from .nn import RegressorConfig, TrainConfig
from .nuisance import NuisanceConfig, fit_nuisances

log = logging.getLogger(__name__)

__all__ = [
    "ConfigError",
    "ExperimentConfig",
    "load_config",
    "parse_overrides",
    "run_experiment",
    "run_trial",
    "read_records",
    "emit_table",
    "emit_plot",
    "SWEEP_AXES",
]

SWEEP_AXES = ("gamma", "C", "lambda", "T")
RESULTS = "results.jsonl"
MANIFEST = "manifest.json"

_DGP_KEYS = {
    "style", "n", "p", "T", "C1", "C2", "mu0", "mu1", "sigma0", "sigma1", "late_sd",
    "gamma", "treatment_coef_scale", "missing", "soft_sharpness", "tau_x_draws",
}
_TOP_KEYS = {"methods", "trials", "seed", "sweep_axis", "sweep_values", "covariates", "reference"}
_EST_KEYS = {
    "regressor", "hidden", "activation", "lr", "lr_grid", "max_epochs", "patience", "val_frac",
    "eps_clip", "l2", "seqmsm_feed_observed",
    "lambda1", "lambda2", "d_rep", "balance_lr_grid", "balance_max_epochs",
}
KNOWN_KEYS = _DGP_KEYS | _TOP_KEYS | _EST_KEYS


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ExperimentConfig:
    """A run's full description, kept as flat key/value settings.

    ``settings`` holds only keys the user supplied; everything else takes the
    library defaults. :meth:`resolved` lists every effective value.
    """

    settings: dict = field(default_factory=dict)

    def __post_init__(self) -> None:
        unknown = set(self.settings) - KNOWN_KEYS
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        if self.trials < 1:
            raise ConfigError("trials must be >= 1")
        bad = [m for m in self.methods if m not in METHODS]
        if bad:
            raise ConfigError(f"unknown methods {bad}; expected a subset of {METHODS}")
        if self.sweep_axis is not None and self.sweep_axis not in SWEEP_AXES:
            raise ConfigError(f"sweep_axis must be one of {SWEEP_AXES}")
        if self.sweep_axis is not None and not self.sweep_values:
            raise ConfigError("sweep_axis given without sweep_values")
        if not (self.covariates == "synthetic" or self.covariates.startswith("csv:")):
            raise ConfigError("covariates must be 'synthetic' or 'csv:<path>'")
        for v in self.sweep_values:
            self.dgp_config(v)
            self.estimator_config(v)

    def get(self, key, default=None):
        return self.settings.get(key, default)

    def with_(self, **changes) -> "ExperimentConfig":
        return ExperimentConfig({**self.settings, **changes})

    @property
    def methods(self) -> tuple[str, ...]:
        return tuple(self.get("methods", METHODS))

    @property
    def trials(self) -> int:
        return int(self.get("trials", 20))

    @property
    def seed(self) -> int:
        return int(self.get("seed", 0))

    @property
    def sweep_axis(self) -> str | None:
        return self.get("sweep_axis")

    @property
    def sweep_values(self) -> tuple:
        return tuple(self.get("sweep_values", ())) if self.sweep_axis else (None,)

    @property
    def covariates(self) -> str:
        return self.get("covariates", "synthetic")

    def dgp_config(self, sweep_value=None, seed: int = 0) -> DgpConfig:
        kw = {k: self.settings[k] for k in _DGP_KEYS if k in self.settings}
        if "late_sd" in kw:
            kw["late_sd"] = tuple(kw["late_sd"])
        if self.sweep_axis == "gamma":
            kw["gamma"] = float(sweep_value)
        elif self.sweep_axis == "T":
            if int(sweep_value) != sweep_value:
                raise ConfigError("T sweep values must be integers")
            kw["T"] = int(sweep_value)
        elif self.sweep_axis == "C":
            style = Style(kw.get("style", "continuous"))
            kw["C1" if style is Style.CONTINUOUS else "C2"] = float(sweep_value)
        try:
            return DgpConfig(seed=seed, **kw)
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from exc

    def estimator_config(self, sweep_value=None, seed: int = 0) -> EstimatorConfig:
        g = self.settings.get
        train = TrainConfig(
            lr=g("lr", 0.005),
            max_epochs=g("max_epochs", 2000),
            patience=g("patience", 10),
            val_frac=g("val_frac", 0.2),
            lr_grid=tuple(g("lr_grid")) if g("lr_grid") else None,
        )
        reg = RegressorConfig(kind=g("regressor", "mlp"), hidden=tuple(g("hidden", (50, 25))),
                              activation=g("activation", "relu"), train=train)
        btrain = replace(train, lr_grid=tuple(g("balance_lr_grid", (0.001, 0.005, 0.01))),
                         max_epochs=g("balance_max_epochs", train.max_epochs))
        lam1, lam2 = g("lambda1", 1.0), g("lambda2", 1.0)
        if self.sweep_axis == "lambda":
            lam1 = lam2 = float(sweep_value)
        try:
            bal = BalanceConfig(lambda1=lam1, lambda2=lam2, d_rep=g("d_rep", 32), train=btrain)
            nuis = NuisanceConfig(eps_clip=g("eps_clip", 0.01), l2=g("l2", 1e-6))
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
        return EstimatorConfig(regressor=reg, nuisance=nuis, balance=bal,
                               seqmsm_feed_observed=bool(g("seqmsm_feed_observed", False)), seed=seed)

    def resolved(self) -> dict:
        dgp = self.dgp_config(self.sweep_values[0]).to_dict()
        dgp.pop("seed")
        est = self.estimator_config(self.sweep_values[0])
        return {
            **dgp,
            "methods": list(self.methods),
            "trials": self.trials,
            "seed": self.seed,
            "sweep_axis": self.sweep_axis,
            "sweep_values": list(self.sweep_values) if self.sweep_axis else [],
            "covariates": self.covariates,
            "regressor": est.regressor.kind,
            "hidden": list(est.regressor.hidden),
            "activation": est.regressor.activation,
            "lr": est.regressor.train.lr,
            "lr_grid": list(est.regressor.train.lr_grid or []),
            "max_epochs": est.regressor.train.max_epochs,
            "patience": est.regressor.train.patience,
            "val_frac": est.regressor.train.val_frac,
            "eps_clip": est.nuisance.eps_clip,
            "l2": est.nuisance.l2,
            "seqmsm_feed_observed": est.seqmsm_feed_observed,
            "lambda1": self.get("lambda1", 1.0),
            "lambda2": self.get("lambda2", 1.0),
            "d_rep": est.balance.d_rep,
            "balance_lr_grid": list(est.balance.train.lr_grid),
            "balance_max_epochs": est.balance.train.max_epochs,
        }


def parse_overrides(items: Iterable[str]) -> dict:
    """``key=value`` strings with TOML-typed values (bare words become strings)."""
    out = {}
    for item in items:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not key=value")
        key, raw = (s.strip() for s in item.split("=", 1))
        try:
            out[key] = tomli.loads(f"v = {raw}")["v"]
        except tomli.TOMLDecodeError:
            out[key] = raw
    return out


def load_config(path=None, overrides: Iterable[str] = (), env=None) -> ExperimentConfig:
    """Read a flat TOML file, apply ``key=value`` overrides, then ``LTCE_SEED``."""
    env = os.environ if env is None else env
    settings: dict = {}
    if path is not None:
        try:
            settings = tomli.loads(Path(path).read_text())
        except tomli.TOMLDecodeError as exc:
            raise ConfigError(f"{path}: {exc}") from exc
        nested = [k for k, v in settings.items() if isinstance(v, dict)]
        if nested:
            raise ConfigError(f"{path}: config must be flat key/value pairs, found tables {nested}")
    settings.update(parse_overrides(overrides))
    if env.get("LTCE_SEED"):
        try:
            settings["seed"] = int(env["LTCE_SEED"])
        except ValueError as exc:
            raise ConfigError(f"LTCE_SEED must be an integer, got {env['LTCE_SEED']!r}") from exc
    return ExperimentConfig(settings)


# ---------------------------------------------------------------- running

def load_covariates(source: str) -> np.ndarray | None:
    """``synthetic`` gives None; ``csv:<path>`` reads a numeric table with a header row."""
    if source == "synthetic":
        return None
    path = source[4:]
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if len(rows) < 2:
        raise ConfigError(f"{path}: no covariate rows")
    try:
        X = np.array([[float(v) for v in r] for r in rows[1:] if r], dtype=float)
    except ValueError as exc:
        raise ConfigError(f"{path}: non-numeric covariate value ({exc})") from exc
    if not np.all(np.isfinite(X)):
        raise ConfigError(f"{path}: covariates must be finite")
    return X


def _jsonable(x):
    if isinstance(x, dict):
        return {str(k): _jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_jsonable(v) for v in x]
    if isinstance(x, np.ndarray):
        return _jsonable(x.tolist())
    if isinstance(x, (np.integer,)):
        return int(x)
    if isinstance(x, (float, np.floating)):
        x = float(x)
        return x if math.isfinite(x) else None
    return x


def trial_seeds(cfg: ExperimentConfig, sweep_index: int, trial: int) -> tuple[int, int]:
    """(data seed, estimator seed). A lambda sweep reuses the data across values."""
    data_idx = 0 if cfg.sweep_axis == "lambda" else sweep_index
    data_seed = derive_seed(cfg.seed, data_idx, trial)
    return data_seed, derive_seed(data_seed, 1)


def run_trial(cfg: ExperimentConfig, sweep_index: int, trial: int, out_dir=None,
              dump_nuisance: bool = False, dump_model: bool = False) -> tuple[list[dict], dict]:
    """All rostered methods on one replication: (records, per-method seconds)."""
    with threadpool_limits(limits=1):
        return _run_trial(cfg, sweep_index, trial, out_dir, dump_nuisance, dump_model)


def _run_trial(cfg, sweep_index, trial, out_dir, dump_nuisance, dump_model):
    value = cfg.sweep_values[sweep_index]
    data_seed, est_seed = trial_seeds(cfg, sweep_index, trial)
    sim = simulate(cfg.dgp_config(value, seed=data_seed), X=load_covariates(cfg.covariates))
    ds, gt = sim.data, sim.truth
    ecfg = cfg.estimator_config(value, seed=est_seed)
    tag = f"sweep{sweep_index}_trial{trial}"
    base = {"sweep_axis": cfg.sweep_axis, "sweep_value": value, "trial": trial}
    timing: dict[str, float] = {}

    nuis, nuis_err = None, None
    if any(needs_nuisances(m) for m in cfg.methods):
        t0 = time.perf_counter()
        try:
            nuis = fit_nuisances(ds, ecfg.nuisance)
        except Exception as exc:  # quarantined: the dependent methods report it
            nuis_err = f"nuisance fit failed: {type(exc).__name__}: {exc}"
        timing["nuisance"] = time.perf_counter() - t0
        if nuis is not None and dump_nuisance and out_dir is not None:
            _dump_nuisance(Path(out_dir) / "nuisance" / f"{tag}.csv", nuis)

    records = []
    for method in cfg.methods:
        t0 = time.perf_counter()
        rec = dict(base, method=method)
        try:
            if needs_nuisances(method) and nuis is None:
                raise RuntimeError(nuis_err)
            est = estimate(method, ds, ecfg, nuis)
            rec.update(
                tau_hat=est.tau_hat,
                eps_ate=eps_ate(est.cate_hat, gt.ite),
                eps_cate=eps_cate(est.cate_hat, gt.tau_x),
                diagnostics=est.diagnostics,
            )
            if dump_model and out_dir is not None and method in ("balancenet", "cfr"):
                path = Path(out_dir) / "models" / f"{tag}_{method}.json"
                path.parent.mkdir(parents=True, exist_ok=True)
                path.write_text(json.dumps([b.to_json() for b in est.model]))
        except Exception as exc:
            log.warning("trial %d %s failed: %s", trial, method, exc)
            rec.update(tau_hat=None, eps_ate=None, eps_cate=None,
                       diagnostics={"error": f"{type(exc).__name__}: {exc}"})
        timing[method] = time.perf_counter() - t0
        records.append(_jsonable(rec))
    return records, timing


def _dump_nuisance(path: Path, nuis) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    T = nuis.r.shape[1]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["e1", *[f"r{t}" for t in range(1, T + 1)]])
        for e, row in zip(nuis.e1, nuis.r):
            w.writerow([repr(float(e)), *["" if np.isnan(v) else repr(float(v)) for v in row]])


def _job(args):
    settings, sweep_index, trial, out_dir, dn, dm = args
    return sweep_index, trial, run_trial(ExperimentConfig(settings), sweep_index, trial, out_dir, dn, dm)


def run_experiment(cfg: ExperimentConfig, out_dir, jobs: int = 1, dump_nuisance: bool = False,
                   dump_model: bool = False) -> Path:
    """Execute every (sweep value, trial) job and write results, table, and manifest.

    Returns the path of ``results.jsonl``.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    tasks = [
        (cfg.settings, si, tr, str(out), dump_nuisance, dump_model)
        for si in range(len(cfg.sweep_values))
        for tr in range(cfg.trials)
    ]
    start = time.perf_counter()
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_job, tasks))
    else:
        results = [_job(t) for t in tasks]
    results.sort(key=lambda r: (r[0], r[1]))

    lines, timings, seeds = [], [], []
    for si, tr, (records, timing) in results:
        lines.extend(json.dumps(r, sort_keys=True) for r in records)
        ds_, es_ = trial_seeds(cfg, si, tr)
        seeds.append({"sweep_index": si, "trial": tr, "data_seed": ds_, "estimator_seed": es_})
        timings.append({"sweep_index": si, "trial": tr, "seconds": timing})
    path = out / RESULTS
    path.write_text("".join(line + "\n" for line in lines))

    n_fail = sum(1 for line in lines if json.loads(line)["eps_cate"] is None)
    manifest = {
        "version": __version__,
        "config": cfg.settings,
        "resolved": cfg.resolved(),
        "trial_seeds": seeds,
        "records": len(lines),
        "failed_records": n_fail,
        "trials_resample_coefficients": True,
        "normal_second_parameter": "standard deviation",
        "timing": {"wall_seconds": time.perf_counter() - start, "jobs": jobs, "per_trial": timings},
    }
    (out / MANIFEST).write_text(json.dumps(_jsonable(manifest), indent=2, sort_keys=True))
    if any(json.loads(line)["eps_cate"] is not None for line in lines):
        emit_table(out, out / "table.csv")
    return path


def replay_manifest(manifest_path, out_dir, jobs: int = 1) -> Path:
    """Rerun the experiment recorded in a manifest."""
    m = json.loads(Path(manifest_path).read_text())
    return run_experiment(ExperimentConfig(m["config"]), out_dir, jobs=jobs)


# ----------------------------------------------------------------- tables

def read_records(results) -> list[dict]:
    path = Path(results)
    if path.is_dir():
        path = path / RESULTS
    with open(path) as fh:
        return [json.loads(line) for line in fh if line.strip()]


def _grid(records: list[dict]):
    """(methods, sweep values, {(method, value): aggregate summary})."""
    methods, values = [], []
    buckets: dict[Any, list[TrialResult]] = {}
    for r in records:
        if r["method"] not in methods:
            methods.append(r["method"])
        if r["sweep_value"] not in values:
            values.append(r["sweep_value"])
        if r["eps_cate"] is None:
            continue
        buckets.setdefault(r["sweep_value"], []).append(
            TrialResult(r["method"], r["eps_ate"], r["eps_cate"], r["trial"], sweep_value=r["sweep_value"])
        )
    cells = {}
    for v, trials in buckets.items():
        agg = aggregate(trials)
        for m, summ in agg.summary.items():
            cells[(m, v)] = summ
    return methods, values, cells


def _fmt(x: float) -> str:
    return "" if x is None or (isinstance(x, float) and math.isnan(x)) else repr(float(x))


def emit_table(results, out_csv) -> tuple[Path, Path]:
    """Methods x (sweep value, metric) grid of trial means, plus a ``_std`` companion.

    Cells without any successful record are left empty.
    """
    records = read_records(results)
    if not records:
        raise ValueError("no records to tabulate")
    axis = records[0]["sweep_axis"] or "all"
    methods, values, cells = _grid(records)
    out_csv = Path(out_csv)
    std_csv = out_csv.with_name(out_csv.stem + "_std" + out_csv.suffix)
    header = ["method"]
    for v in values:
        label = axis if v is None else f"{axis}={v}"
        header += [f"{label}:eps_cate", f"{label}:eps_ate"]
    for path, attr in ((out_csv, "mean"), (std_csv, "std")):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(header)
            for m in methods:
                row = [m]
                for v in values:
                    s = cells.get((m, v))
                    row += [_fmt(getattr(s["eps_cate"], attr)) if s else "",
                            _fmt(getattr(s["eps_ate"], attr)) if s else ""]
                w.writerow(row)
    return out_csv, std_csv


# ------------------------------------------------------------------ plots

_COLORS = ("#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#17becf", "#7f7f7f")


def plot_series(records: list[dict], axis: str, metric: str = "eps_cate") -> dict[str, list[tuple[float, float]]]:
    """Per-method (sweep value, mean metric) points along ``axis``, sorted by x."""
    recs = [r for r in records if r["sweep_axis"] == axis]
    if not recs:
        raise ValueError(f"no results along axis {axis!r}")
    methods, values, cells = _grid(recs)
    series = {}
    for m in methods:
        pts = [(float(v), cells[(m, v)][metric].mean) for v in values if (m, v) in cells]
        series[m] = sorted(pts)
    return series


def emit_plot(results, axis: str, out_svg, metric: str = "eps_cate", width: int = 640, height: int = 400) -> Path:
    """Write a standalone SVG line chart: one polyline per method."""
    series = plot_series(read_records(results), axis, metric)
    xs = [x for pts in series.values() for x, _ in pts]
    ys = [y for pts in series.values() for _, y in pts]
    if not xs:
        raise ValueError(f"no successful results along axis {axis!r}")
    x0, x1 = min(xs), max(xs)
    y0, y1 = min(0.0, min(ys)), max(ys)
    if x1 == x0:
        x0, x1 = x0 - 0.5, x1 + 0.5
    if y1 == y0:
        y1 = y0 + 1.0
    left, right, top, bottom = 60, 150, 20, 50
    pw, ph = width - left - right, height - top - bottom

    def sx(x):
        return left + (x - x0) / (x1 - x0) * pw

    def sy(y):
        return top + ph - (y - y0) / (y1 - y0) * ph

    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
        f'viewBox="0 0 {width} {height}" font-family="sans-serif" font-size="11">',
        f'<rect x="0" y="0" width="{width}" height="{height}" fill="white"/>',
        f'<line x1="{left}" y1="{top + ph}" x2="{left + pw}" y2="{top + ph}" stroke="black"/>',
        f'<line x1="{left}" y1="{top}" x2="{left}" y2="{top + ph}" stroke="black"/>',
    ]
    for v in sorted(set(xs)):
        parts.append(f'<text x="{sx(v):.3f}" y="{top + ph + 15}" text-anchor="middle">{v:g}</text>')
    for k in range(5):
        v = y0 + (y1 - y0) * k / 4
        parts.append(f'<text x="{left - 5}" y="{sy(v) + 4:.3f}" text-anchor="end">{v:.3g}</text>')
    parts.append(f'<text x="{left + pw / 2:.3f}" y="{height - 12}" text-anchor="middle">{axis}</text>')
    parts.append(f'<text x="14" y="{top + ph / 2:.3f}" text-anchor="middle" '
                 f'transform="rotate(-90 14 {top + ph / 2:.3f})">{metric}</text>')
    for i, (m, pts) in enumerate(series.items()):
        color = _COLORS[i % len(_COLORS)]
        coords = " ".join(f"{sx(x):.3f},{sy(y):.3f}" for x, y in pts)
        parts.append(f'<polyline data-method="{m}" fill="none" stroke="{color}" stroke-width="2" points="{coords}"/>')
        ly = top + 14 * i + 10
        parts.append(f'<line x1="{left + pw + 10}" y1="{ly}" x2="{left + pw + 30}" y2="{ly}" stroke="{color}" stroke-width="2"/>')
        parts.append(f'<text x="{left + pw + 35}" y="{ly + 4}">{m}</text>')
    parts.append("</svg>")
    out_svg = Path(out_svg)
    out_svg.write_text("\n".join(parts) + "\n")
    return out_svg
