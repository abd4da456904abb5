"""Command-line entry point: ``abmcalib <subcommand> [options]``.

Exit codes: 0 success, 2 usage error (unknown flag, bad value), 3 missing or
unreadable input file, 4 runtime failure.  Errors are reported on stderr as a
single ``error:<code>:<kind>:<message>`` line.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import asdict
from pathlib import Path

from . import __version__
from . import abc_calibrator as abc
from . import benchmark as bench
from . import ml_calibrator as mlc
from .abm import EpiParams, read_curve_csv, simulate, write_curve_csv
from .neuralnet import ArchConfig
from .scenario import (Observation, PriorConfig, fit_scalers, generate_dataset, read_dataset_csv,
                       split_train_val, write_dataset_csv, write_scalers_json)

log = logging.getLogger("abmcalib")

EXIT_OK, EXIT_USAGE, EXIT_MISSING, EXIT_RUNTIME = 0, 2, 3, 4


class CliError(Exception):
    def __init__(self, code, kind, message):
        super().__init__(message)
        self.code, self.kind = code, kind


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise CliError(EXIT_USAGE, "usage", message)


def _positive_int(s):
    v = int(s)
    if v < 1:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {s}")
    return v


def _nonneg_int(s):
    v = int(s)
    if v < 0:
        raise argparse.ArgumentTypeError(f"expected a non-negative integer, got {s}")
    return v


def _weights(s):
    parts = [float(x) for x in s.split(",")]
    if len(parts) != 3:
        raise argparse.ArgumentTypeError("expected three comma-separated weights")
    return tuple(parts)


def _add_train_flags(p):
    g = p.add_argument_group("training (defaults follow the tuned published settings where known)")
    g.add_argument("--epochs", type=_nonneg_int, default=100, help="max epochs (default 100, published)")
    g.add_argument("--batch-size", type=_positive_int, default=64, help="mini-batch size (default 64, published)")
    g.add_argument("--lr", type=float, default=2.77e-4, help="Adam learning rate (default 2.77e-4, published)")
    g.add_argument("--dropout", type=float, default=0.5, help="dropout between LSTM layers (default 0.5, published)")
    g.add_argument("--patience", type=_positive_int, default=10, help="early-stopping patience (default 10, chosen)")
    g.add_argument("--val-fraction", type=float, default=0.1, help="validation share (default 0.1, chosen)")
    g.add_argument("--lam", type=float, default=1.0, help="consistency penalty weight (default 1.0, chosen)")
    g.add_argument("--target-weights", type=_weights, default=(1.0, 1.0, 1.0),
                   help="MSE weights for p_tran,c_rate,R0 (default 1,1,1 = plain loss)")
    g.add_argument("--hidden", type=_positive_int, default=160, help="LSTM units per direction (default 160, published)")
    g.add_argument("--layers", type=_positive_int, default=3, help="stacked BiLSTM layers (default 3, published)")
    g.add_argument("--dense", type=_positive_int, default=64, help="dense head width (default 64, published)")


def _add_abc_flags(p):
    g = p.add_argument_group("ABC")
    g.add_argument("--iterations", type=_positive_int, default=2000, help="chain length (default 2000, published)")
    g.add_argument("--burn-in", type=_nonneg_int, default=1000, help="discarded samples (default 1000, published)")
    g.add_argument("--sigma", type=float, default=0.1, help="proposal scale (default 0.1, published)")
    g.add_argument("--kernel-factor", type=float, default=0.05,
                   help="eps = factor * |S_obs| (default 0.05, published)")
    g.add_argument("--crn", action="store_true", help="reuse one simulation seed across the chain")


def _add_global_flags(p, defaults):
    def d(value):
        return value if defaults else argparse.SUPPRESS

    p.add_argument("--config", default=d(None), help="flat JSON file of option defaults (CLI flags override it)")
    p.add_argument("--seed", type=int, default=d(0), help="controls all randomness (default 0)")
    p.add_argument("--jobs", type=_positive_int, default=d(os.cpu_count() or 1),
                   help="worker processes (default: all cores); 1 gives the strict deterministic mode")
    p.add_argument("-v", "--verbose", action="store_true", default=d(False))


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="abmcalib", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    _add_global_flags(parser, defaults=True)
    # global flags are also accepted after the subcommand
    common = argparse.ArgumentParser(add_help=False)
    _add_global_flags(common, defaults=False)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    _orig_add = sub.add_parser

    def add_parser(name, **kw):
        return _orig_add(name, parents=[common], **kw)

    sub.add_parser = add_parser

    p = sub.add_parser("simulate", help="simulate one incidence curve to CSV")
    p.add_argument("--n", type=_positive_int, required=True, help="population size")
    p.add_argument("--i0", type=_positive_int, required=True, help="initially infected agents")
    p.add_argument("--crate", type=float, required=True, help="expected contacts per infectious agent per day")
    p.add_argument("--ptran", type=float, required=True, help="per-contact transmission probability")
    p.add_argument("--precov", type=float, required=True, help="daily recovery probability")
    p.add_argument("--days", type=_positive_int, default=60, help="horizon (default 60, published)")
    p.add_argument("--out", help="CSV path (default stdout)")

    p = sub.add_parser("gen-data", help="generate a labelled dataset CSV and scalers JSON")
    p.add_argument("--count", type=_positive_int, default=20000, help="scenarios (default 20000, chosen)")
    p.add_argument("--days", type=_positive_int, default=60, help="horizon in days (default 60, published)")
    p.add_argument("--out", required=True, help="dataset CSV path")
    p.add_argument("--scalers", help="scalers JSON path (fitted on the training split)")
    p.add_argument("--val-fraction", type=float, default=0.1, help="validation share (default 0.1, chosen)")

    p = sub.add_parser("train", help="train the BiLSTM calibrator")
    p.add_argument("--data", required=True, help="dataset CSV from gen-data")
    p.add_argument("--model", required=True, help="output model file")
    p.add_argument("--log", help="training log CSV (epoch,train_loss,val_loss,seconds)")
    _add_train_flags(p)

    p = sub.add_parser("calibrate", help="calibrate one observed curve")
    p.add_argument("method", choices=["ml", "abc"])
    p.add_argument("--curve", required=True, help="observed curve CSV (day,incidence)")
    p.add_argument("--n", type=_positive_int, required=True, help="population size")
    p.add_argument("--precov", type=float, help="known recovery probability (ml)")
    p.add_argument("--i0", type=_positive_int, help="initially infected (abc; default: day-0 incidence)")
    p.add_argument("--model", help="model file (ml)")
    p.add_argument("--trace", help="write the ABC trace CSV here")
    p.add_argument("--no-timing", action="store_true", help="omit wall time from the JSON output")
    _add_abc_flags(p)

    p = sub.add_parser("bench", help="run the ML-vs-ABC benchmark")
    p.add_argument("--scenarios", type=_positive_int, default=100, help="test scenarios (default 100; published study used 1000)")
    p.add_argument("--full", action="store_true", help="use the full 1000-scenario study")
    p.add_argument("--methods", default="ml,abc", help="comma list from {ml,abc} (default ml,abc)")
    p.add_argument("--reps", type=_positive_int, default=100, help="forward simulations per scenario (default 100, published)")
    p.add_argument("--days", type=_positive_int, default=60, help="horizon in days (default 60, published)")
    p.add_argument("--estimator", choices=["mean", "median"], default="mean",
                   help="pointwise estimator of the predicted curve (default mean, chosen)")
    p.add_argument("--model", help="trained model file; trained on the fly when absent and ml is requested")
    p.add_argument("--train-count", type=_positive_int, default=2000,
                   help="scenarios to train on when no model is given (default 2000)")
    p.add_argument("--out", required=True, help="report directory")
    _add_train_flags(p)
    _add_abc_flags(p)
    return parser


def _apply_config_file(parser, argv):
    """Config-file values become parser defaults, so explicit flags still win."""
    pre = argparse.ArgumentParser(add_help=False)
    pre.add_argument("--config")
    known, _ = pre.parse_known_args(argv)
    if not known.config:
        return
    path = Path(known.config)
    if not path.is_file():
        raise CliError(EXIT_MISSING, "missing-file", f"config file not found: {path}")
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise CliError(EXIT_USAGE, "bad-config", f"{path}: {exc}") from exc
    if not isinstance(doc, dict):
        raise CliError(EXIT_USAGE, "bad-config", f"{path}: expected a flat JSON object")
    keys = {k.replace("-", "_"): v for k, v in doc.items()}
    parser.set_defaults(**keys)
    for action in parser._subparsers._group_actions:
        for sp in action.choices.values():
            sp.set_defaults(**keys)


def _require_file(path, what):
    if path is None:
        raise CliError(EXIT_USAGE, "usage", f"{what} is required")
    if not Path(path).is_file():
        raise CliError(EXIT_MISSING, "missing-file", f"{what} not found: {path}")


def _require_dir_parent(path):
    parent = Path(path).resolve().parent
    if not parent.is_dir():
        raise CliError(EXIT_MISSING, "missing-dir", f"output directory does not exist: {parent}")


def _train_configs(a):
    try:
        tc = mlc.TrainConfig(batch_size=a.batch_size, max_epochs=a.epochs, patience=a.patience, lr=a.lr,
                             dropout=a.dropout, val_fraction=a.val_fraction, seed=a.seed)
        lc = mlc.LossConfig(a.lam, a.target_weights)
    except ValueError as exc:
        raise CliError(EXIT_USAGE, "bad-value", str(exc)) from exc
    return tc, lc, ArchConfig(hidden=a.hidden, layers=a.layers, dense=a.dense)


def _train_model(scenarios, a, log_path=None):
    tc, lc, arch = _train_configs(a)
    train_set, val_set = split_train_val(scenarios, tc.val_fraction, seed=a.seed)
    scalers = fit_scalers(train_set)
    horizon = scenarios[0].curve.horizon
    return mlc.train(train_set, val_set, scalers, tc, lc, arch, horizon, log_path=log_path,
                     progress=lambda e, tl, vl, s: log.info("epoch %d train %.5g val %.5g %.1fs", e, tl, vl, s))


def cmd_simulate(a):
    if a.out:
        _require_dir_parent(a.out)
    try:
        params = EpiParams(n=a.n, i0=a.i0, c_rate=a.crate, p_tran=a.ptran, p_recov=a.precov)
    except ValueError as exc:
        raise CliError(EXIT_USAGE, "bad-value", str(exc)) from exc
    curve = simulate(params, a.days, a.seed)
    if a.out:
        write_curve_csv(curve, a.out)
    else:
        sys.stdout.write("day,incidence\n")
        for d, v in enumerate(curve.incidence.tolist()):
            sys.stdout.write(f"{d},{v}\n")


def cmd_gen_data(a):
    _require_dir_parent(a.out)
    if a.scalers:
        _require_dir_parent(a.scalers)
    data = generate_dataset(a.count, a.days, PriorConfig(), seed=a.seed, jobs=a.jobs)
    write_dataset_csv(data, a.out)
    if a.scalers:
        if a.count < 2:
            raise CliError(EXIT_USAGE, "bad-value", "need at least 2 scenarios to fit scalers")
        train_set, _ = split_train_val(data, a.val_fraction, seed=a.seed)
        write_scalers_json(fit_scalers(train_set), a.scalers)


def cmd_train(a):
    _require_file(a.data, "dataset")
    _require_dir_parent(a.model)
    if a.log:
        _require_dir_parent(a.log)
    scenarios = read_dataset_csv(a.data)
    model = _train_model(scenarios, a, a.log)
    mlc.save(model, a.model)
    print(json.dumps({"model": str(a.model), "epochs_run": model.metadata["epochs_run"],
                      "best_epoch": model.metadata["best_epoch"], "best_val_loss": model.metadata["best_val_loss"]}))


def cmd_calibrate(a):
    _require_file(a.curve, "curve file")
    curve = read_curve_csv(a.curve)
    if a.method == "ml":
        _require_file(a.model, "model file")
        if a.precov is None:
            raise CliError(EXIT_USAGE, "usage", "--precov is required for ml calibration")
        model = mlc.load(a.model)
        est = mlc.predict(model, Observation(curve, a.n, a.precov))
        if a.no_timing:
            est.pop("seconds")
    else:
        if a.trace:
            _require_dir_parent(a.trace)
        i0 = a.i0 if a.i0 is not None else int(curve.incidence[0])
        try:
            cfg = abc.AbcConfig(n=a.n, i0=i0, iterations=a.iterations, burn_in=a.burn_in, sigma=a.sigma,
                                kernel_factor=a.kernel_factor, seed=a.seed, common_random_numbers=a.crn)
        except ValueError as exc:
            raise CliError(EXIT_USAGE, "bad-value", str(exc)) from exc
        est, trace = abc.calibrate(curve, cfg)
        est["acceptance_rate"] = trace.acceptance_rate
        if a.trace:
            abc.write_trace_csv(trace, a.trace)
    print(json.dumps(est, sort_keys=True))


def cmd_bench(a):
    methods = tuple(m.strip() for m in a.methods.split(",") if m.strip())
    bad = [m for m in methods if m not in bench.METHOD_LABELS]
    if bad:
        raise CliError(EXIT_USAGE, "bad-value", f"unknown methods: {','.join(bad)}")
    out = Path(a.out)
    if out.exists() and not out.is_dir():
        raise CliError(EXIT_USAGE, "bad-value", f"--out exists and is not a directory: {out}")
    _require_dir_parent(out)
    if a.model:
        _require_file(a.model, "model file")
    n = 1000 if a.full else a.scenarios
    try:
        cfg = bench.BenchConfig(n_scenarios=n, methods=methods, reps=a.reps, horizon=a.days, seed=a.seed,
                                estimator=a.estimator, abc_iterations=a.iterations, abc_burn_in=a.burn_in,
                                abc_sigma=a.sigma, abc_kernel_factor=a.kernel_factor,
                                abc_common_random_numbers=a.crn)
        abc.AbcConfig(n=2, i0=1, iterations=a.iterations, burn_in=a.burn_in, sigma=a.sigma,
                      kernel_factor=a.kernel_factor)
        if a.reps < 2:
            raise ValueError("--reps must be >= 2")
    except ValueError as exc:
        raise CliError(EXIT_USAGE, "bad-value", str(exc)) from exc
    model = None
    extra = {}
    if "ml" in methods:
        if a.model:
            model = mlc.load(a.model)
            extra["model_file"] = str(a.model)
        else:
            train_data = generate_dataset(a.train_count, a.days, PriorConfig(), seed=a.seed, jobs=a.jobs)
            model = _train_model(train_data, a)
            out.mkdir(parents=True, exist_ok=True)
            mlc.save(model, out / "model.json")
        extra["model_sha256"] = mlc.model_hash(model)
        extra["train_config"] = model.metadata.get("train_config")
        extra["loss_config"] = asdict(model.loss_config)
    report = bench.run_benchmark(cfg, model, progress=lambda i, n: log.info("scenario %d/%d", i, n), jobs=a.jobs)
    report.manifest_extra = extra
    bench.emit_report(report, out)
    print(json.dumps({"out": str(out), "scenarios": n, "failures": len(report.failures),
                      "timing": report.timing()}, sort_keys=True))


COMMANDS = {"simulate": cmd_simulate, "gen-data": cmd_gen_data, "train": cmd_train,
            "calibrate": cmd_calibrate, "bench": cmd_bench}


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        _apply_config_file(parser, argv)
        try:
            a = parser.parse_args(argv)
        except SystemExit as exc:  # --help / --version
            return int(exc.code or 0)
        logging.basicConfig(level=logging.INFO if a.verbose else logging.WARNING, stream=sys.stderr,
                            format="%(levelname)s %(name)s: %(message)s")
        COMMANDS[a.command](a)
    except CliError as exc:
        print(f"error:{exc.code}:{exc.kind}:{exc}", file=sys.stderr)
        return exc.code
    except (OSError, ValueError, RuntimeError, FloatingPointError) as exc:
        print(f"error:{EXIT_RUNTIME}:runtime:{type(exc).__name__}: {exc}".replace("\n", " "), file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
