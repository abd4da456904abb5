"""Simulation-study harness: parameter recovery, predictive bias/coverage, timing."""
from __future__ import annotations

import csv
import json
import logging
import platform
import warnings
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .abc_calibrator import AbcConfig, calibrate as abc_calibrate
from .abm import DEFAULT_HORIZON, EpiParams, child_seed, ensemble_matrix, simulate_ensemble
from .ml_calibrator import TrainedModel, predict
from .scenario import PriorConfig, Scenario, generate_dataset

log = logging.getLogger(__name__)

PARAMS = ("r0", "c_rate", "p_tran")
METHOD_LABELS = {"abc": "ABC", "ml": "BiLSTM"}


@dataclass
class ParamErrorRow:
    parameter: str
    method: str
    mae: float
    rmse: float
    mean_bias: float
    median_bias: float
    n: int


def parameter_metrics(estimates, truths, params=PARAMS) -> dict[str, dict]:
    """Bias-based error summaries per parameter. ``estimates``/``truths`` are index-aligned dicts."""
    if len(estimates) != len(truths):
        raise ValueError(f"length mismatch: {len(estimates)} estimates vs {len(truths)} truths")
    if not estimates:
        raise ValueError("need at least one estimate")
    out = {}
    for p in params:
        bias = np.array([float(e[p]) - float(t[p]) for e, t in zip(estimates, truths)])
        out[p] = {
            "mae": float(np.mean(np.abs(bias))),
            "rmse": float(np.sqrt(np.mean(bias ** 2))),
            "mean_bias": float(np.mean(bias)),
            "median_bias": float(np.median(bias)),
            "n": int(bias.size),
        }
    return out


@dataclass
class PredictiveRow:
    """Forward-simulation check of one calibrated scenario."""

    observed: np.ndarray
    predicted: np.ndarray  # pointwise mean (or median) over reps
    lower: np.ndarray
    upper: np.ndarray
    bias: np.ndarray  # observed - predicted
    rel_bias: np.ndarray  # nan where observed == 0
    covered: np.ndarray
    excluded_days: int
    sims: np.ndarray = field(repr=False)


def _truth_dict(params: EpiParams) -> dict:
    return {"p_tran": params.p_tran, "c_rate": params.c_rate, "r0": params.r0, "p_recov": params.p_recov}


def predictive_eval(theta_hat: dict, scenario: Scenario, reps: int = 100, horizon: int = DEFAULT_HORIZON,
                    seed: int = 0, estimator: str = "mean") -> PredictiveRow:
    """Simulate ``reps`` curves from ``theta_hat`` (true N and i0) and compare with the observed curve.

    ``theta_hat`` needs ``p_tran`` and ``c_rate``; ``p_recov`` falls back to
    the scenario's known value.
    """
    if reps < 2:
        raise ValueError("reps must be >= 2 for an envelope")
    truth = scenario.params
    params = EpiParams(n=truth.n, i0=truth.i0, c_rate=float(theta_hat["c_rate"]),
                       p_tran=float(theta_hat["p_tran"]),
                       p_recov=float(theta_hat.get("p_recov", truth.p_recov)))
    sims = ensemble_matrix(simulate_ensemble(params, horizon, reps, seed))
    if estimator == "mean":
        pred = sims.mean(axis=0)
    elif estimator == "median":
        pred = np.median(sims, axis=0)
    else:
        raise ValueError(f"unknown estimator {estimator!r}")
    lower, upper = np.quantile(sims, [0.025, 0.975], axis=0)
    obs = scenario.curve.incidence[:horizon].astype(float)
    bias = obs - pred
    with np.errstate(divide="ignore", invalid="ignore"):
        rel = np.where(obs > 0, bias / obs, np.nan)
    covered = (obs >= lower) & (obs <= upper)
    return PredictiveRow(obs, pred, lower, upper, bias, rel, covered, int(np.sum(obs <= 0)), sims)


@dataclass
class MethodPredictive:
    bias: np.ndarray  # per-day mean over scenarios
    rel_bias: np.ndarray  # per-day mean over scenarios with I_t > 0
    coverage: np.ndarray  # per-day fraction of scenarios covered
    overall_coverage: float
    q_lower: np.ndarray  # per-day 2.5% quantile of all forward simulations
    q_upper: np.ndarray
    excluded_days: int


def aggregate_predictive(rows: list[PredictiveRow]) -> MethodPredictive:
    bias = np.mean([r.bias for r in rows], axis=0)
    rel = np.array([r.rel_bias for r in rows])
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)  # all-nan days
        rel_mean = np.nanmean(rel, axis=0)
    cov = np.array([r.covered for r in rows], dtype=float)
    pooled = np.concatenate([r.sims for r in rows], axis=0)
    lo, hi = np.quantile(pooled, [0.025, 0.975], axis=0)
    return MethodPredictive(bias, rel_mean, cov.mean(axis=0), float(cov.mean()), lo, hi,
                            int(sum(r.excluded_days for r in rows)))


@dataclass
class BenchConfig:
    n_scenarios: int = 100
    methods: tuple[str, ...] = ("ml", "abc")
    reps: int = 100
    horizon: int = DEFAULT_HORIZON
    seed: int = 0
    estimator: str = "mean"
    abc_iterations: int = 2000
    abc_burn_in: int = 1000
    abc_sigma: float = 0.1
    abc_kernel_factor: float = 0.05
    abc_common_random_numbers: bool = False
    predictive: bool = True


@dataclass
class BenchReport:
    config: BenchConfig
    truths: list[dict]
    estimates: dict[str, list]  # method -> per-scenario estimate (None when failed)
    seconds: dict[str, list]
    predictive: dict[str, MethodPredictive]
    failures: list[dict]
    manifest_extra: dict = field(default_factory=dict)

    def param_table(self) -> list[ParamErrorRow]:
        rows = []
        for p in PARAMS:
            for m in self.config.methods:
                ok = [(e, t) for e, t in zip(self.estimates[m], self.truths) if e is not None]
                if not ok:
                    continue
                met = parameter_metrics([e for e, _ in ok], [t for _, t in ok], (p,))[p]
                rows.append(ParamErrorRow(p, m, met["mae"], met["rmse"], met["mean_bias"], met["median_bias"], met["n"]))
        return rows

    def timing(self) -> dict[str, dict]:
        out = {}
        for m in self.config.methods:
            s = np.array([x for x in self.seconds[m] if x is not None], dtype=float)
            if s.size:
                out[m] = {"mean": float(s.mean()), "median": float(np.median(s)), "total": float(s.sum()), "runs": int(s.size)}
            else:
                out[m] = {"mean": float("nan"), "median": float("nan"), "total": 0.0, "runs": 0}
        return out


def _calibrate_one(method, scenario, model, cfg: BenchConfig, index):
    if method == "ml":
        est = predict(model, scenario)
        return {k: est[k] for k in ("p_tran", "c_rate", "r0")}, est["seconds"]
    if method == "abc":
        acfg = AbcConfig(n=scenario.params.n, i0=scenario.params.i0, iterations=cfg.abc_iterations,
                         burn_in=cfg.abc_burn_in, sigma=cfg.abc_sigma, kernel_factor=cfg.abc_kernel_factor,
                         seed=child_seed(cfg.seed + 2, index),
                         common_random_numbers=cfg.abc_common_random_numbers)
        t0 = time.perf_counter()
        est, _ = abc_calibrate(scenario.curve, acfg)
        return est, time.perf_counter() - t0
    raise ValueError(f"unknown method {method!r}")


def draw_test_scenarios(n: int, horizon: int, seed: int, prior: PriorConfig | None = None) -> list[Scenario]:
    """Fresh draws from the prior, on a seed stream disjoint from training data seeded with ``seed``."""
    return generate_dataset(n, horizon, prior, seed=child_seed(seed, 1_000_003))


def _run_scenario(task):
    """Calibrate and forward-check one scenario with every method; failures are returned, not raised."""
    i, sc, model, cfg = task
    out = {}
    for m in cfg.methods:
        try:
            est, secs = _calibrate_one(m, sc, model, cfg, i)
            row = None
            if cfg.predictive:
                row = predictive_eval(est, sc, cfg.reps, cfg.horizon, child_seed(cfg.seed + 3, i), cfg.estimator)
        except (ValueError, RuntimeError, FloatingPointError) as exc:
            out[m] = (None, None, None, str(exc))
            continue
        out[m] = (est, secs, row, None)
    return out


def run_benchmark(cfg: BenchConfig, model: TrainedModel | None = None,
                  scenarios: list[Scenario] | None = None, progress=None, jobs: int = 1) -> BenchReport:
    """Calibrate every scenario with every method.

    Each scenario owns its seeds, so ``jobs > 1`` (one process per scenario
    at a time) gives the same estimates as ``jobs = 1``; only wall-clock
    timings depend on contention.
    """
    for m in cfg.methods:
        if m not in METHOD_LABELS:
            raise ValueError(f"unknown method {m!r}")
    if "ml" in cfg.methods and model is None:
        raise ValueError("method 'ml' needs a trained model")
    if scenarios is None:
        scenarios = draw_test_scenarios(cfg.n_scenarios, cfg.horizon, cfg.seed)
    tasks = [(i, sc, model, cfg) for i, sc in enumerate(scenarios)]
    if jobs > 1 and len(tasks) > 1:
        pool = ProcessPoolExecutor(max_workers=jobs)
        results = pool.map(_run_scenario, tasks)
    else:
        pool = None
        results = map(_run_scenario, tasks)
    truths = [_truth_dict(s.params) for s in scenarios]
    estimates = {m: [] for m in cfg.methods}
    seconds = {m: [] for m in cfg.methods}
    rows = {m: [] for m in cfg.methods}
    failures = []
    try:
        for i, res in enumerate(results):
            for m in cfg.methods:
                est, secs, row, err = res[m]
                if err is not None:
                    log.warning("scenario %d method %s failed: %s", i, m, err)
                    failures.append({"scenario": i, "method": m, "error": err})
                estimates[m].append(est)
                seconds[m].append(secs)
                if row is not None:
                    rows[m].append(row)
            if progress:
                progress(i + 1, len(scenarios))
    finally:
        if pool is not None:
            pool.shutdown()
    predictive = {m: aggregate_predictive(r) for m, r in rows.items() if r}
    return BenchReport(cfg, truths, estimates, seconds, predictive, failures)


# -- output files ----------------------------------------------------------------

def _fmt(x) -> str:
    x = float(x)
    if np.isnan(x):
        return "nan"
    return repr(x)


def _write_csv(path: Path, header, rows):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def emit_report(report: BenchReport, out_dir, include_timings: bool = True) -> list[Path]:
    """Write the CSV tables, gnuplot data and manifest. Returns the written paths.

    ``timings.csv`` holds wall-clock values and is the only file that varies
    between identical runs.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    methods = list(report.config.methods)
    written = []

    p = out / "param_errors.csv"
    _write_csv(p, ["parameter", "method", "mae", "rmse", "mean_bias", "median_bias", "n"],
               [[r.parameter, METHOD_LABELS[r.method], _fmt(r.mae), _fmt(r.rmse), _fmt(r.mean_bias),
                 _fmt(r.median_bias), r.n] for r in report.param_table()])
    written.append(p)

    horizon = report.config.horizon
    # fixed ABC-then-BiLSTM columns, blank when a method was not run
    bound_cols = ["Day", "ABC_Q2.5", "ABC_Q97.5", "BiLSTM_Q2.5", "BiLSTM_Q97.5"]
    p = out / "daily_bounds.csv"
    bound_rows = []
    if report.predictive:
        for d in range(horizon):
            row = [d]
            for m in ("abc", "ml"):
                mp = report.predictive.get(m)
                row += [_fmt(mp.q_lower[d]), _fmt(mp.q_upper[d])] if mp else ["", ""]
            bound_rows.append(row)
    _write_csv(p, bound_cols, bound_rows)
    written.append(p)

    p = out / "bias_coverage.csv"
    header = ["day"]
    for m in methods:
        lab = METHOD_LABELS[m]
        header += [f"{lab}_bias", f"{lab}_rel_bias", f"{lab}_coverage"]
    cov_rows = []
    present = [m for m in methods if m in report.predictive]
    if present:
        for d in range(horizon):
            row = [d]
            for m in methods:
                mp = report.predictive.get(m)
                row += [_fmt(mp.bias[d]), _fmt(mp.rel_bias[d]), _fmt(mp.coverage[d])] if mp else ["", "", ""]
            cov_rows.append(row)
    _write_csv(p, header, cov_rows)
    written.append(p)

    p = out / "coverage_summary.csv"
    _write_csv(p, ["method", "overall_coverage", "excluded_zero_days"],
               [[METHOD_LABELS[m], _fmt(report.predictive[m].overall_coverage), report.predictive[m].excluded_days]
                for m in methods if m in report.predictive])
    written.append(p)

    p = out / "estimates.csv"
    est_rows = []
    for i, t in enumerate(report.truths):
        for m in methods:
            e = report.estimates[m][i]
            est_rows.append([i, METHOD_LABELS[m]] + [_fmt(t[k]) for k in ("p_tran", "c_rate", "r0")]
                            + ([_fmt(e[k]) for k in ("p_tran", "c_rate", "r0")] if e else ["", "", ""]))
    _write_csv(p, ["scenario", "method", "true_p_tran", "true_c_rate", "true_r0", "est_p_tran", "est_c_rate", "est_r0"],
               est_rows)
    written.append(p)

    p = out / "failures.csv"
    _write_csv(p, ["scenario", "method", "error"], [[f["scenario"], f["method"], f["error"]] for f in report.failures])
    written.append(p)

    if include_timings:
        p = out / "timings.csv"
        tim = report.timing()
        _write_csv(p, ["method", "mean_seconds", "median_seconds", "total_seconds", "runs"],
                   [[METHOD_LABELS[m], f"{tim[m]['mean']:.6f}", f"{tim[m]['median']:.6f}",
                     f"{tim[m]['total']:.6f}", tim[m]["runs"]] for m in methods])
        written.append(p)

    # gnuplot: whitespace-separated, '#' header
    for m in methods:
        mp = report.predictive.get(m)
        if mp is None:
            continue
        p = out / f"plot_{METHOD_LABELS[m]}.dat"
        with open(p, "w", encoding="utf-8") as fh:
            fh.write("# day q2.5 q97.5 bias rel_bias coverage\n")
            for d in range(horizon):
                fh.write(f"{d} {_fmt(mp.q_lower[d])} {_fmt(mp.q_upper[d])} {_fmt(mp.bias[d])} "
                         f"{_fmt(mp.rel_bias[d])} {_fmt(mp.coverage[d])}\n")
        written.append(p)

    p = out / "manifest.json"
    manifest = {
        "package": "abmcalib",
        "version": __version__,
        "numpy": np.__version__,
        "python": platform.python_version(),
        "bench_config": asdict(report.config),
        "n_scenarios": len(report.truths),
        "failures": len(report.failures),
    }
    manifest.update(report.manifest_extra)
    with open(p, "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    written.append(p)
    return written
