"""Command-line interface: simulate, fit, gof, evaluate, compare.

Every subcommand reads a YAML config (with ``--set section.key=value``
overrides), writes CSV/JSON artifacts plus rendered PNG figures under an
output directory, and returns a stable exit code: 0 success, 1 validation
error, 2 numerical failure, 3 IO failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import plots
from .data_io import (ConfigError, _write_csv, load_config, load_events,
                      load_results, save_config, save_events, save_results)
from .gibbs import run_chain
from .gof import gof_report, multivariate_gof
from .kernels import SingularKernelError
from .model import (EventSequence, MultivariateModel, heldout_log_likelihood,
                    predictive_intensity)
from .simulate import make_ground_truth, thinning_simulate
from .vi import fit

logger = logging.getLogger(__name__)

REPORT_GRID = 500


def _out_dir(arg) -> Path:
    path = Path(arg)
    root = os.environ.get("GPHAWKES_OUTPUT_ROOT")
    if root and not path.is_absolute():
        path = Path(root) / path
    path.mkdir(parents=True, exist_ok=True)
    return path


def _load_events_flex(path, fallback_window=None) -> EventSequence:
    """Load events, falling back to ``fallback_window`` when the file does
    not declare one."""
    try:
        return load_events(path)
    except ValueError as exc:
        if "no window" in str(exc) and fallback_window is not None:
            return load_events(path, window=fallback_window)
        raise


def _intensity_fn(fitted):
    def fn(t):
        t = np.atleast_1d(np.asarray(t, dtype=np.float64))
        mu, var = fitted.predict_phi(t)
        return predictive_intensity(fitted.lam_mean, mu, var)

    return fn


def _write_predictive(fitted, out: Path, events=None) -> None:
    """Reporting grid CSV plus phi-band and intensity figures."""
    grid = np.linspace(0.0, fitted.window, REPORT_GRID)
    mu, var = fitted.predict_phi(grid)
    sd = np.sqrt(var)
    inten = predictive_intensity(fitted.lam_mean, mu, var)
    _write_csv(out / "predictive_intensity.csv",
               np.column_stack([grid, mu, sd, mu - 1.96 * sd,
                                mu + 1.96 * sd, inten]),
               "t,phi_mean,phi_sd,phi_lo,phi_hi,intensity")
    times = None if events is None else events.times
    plots.phi_band_figure(out / "phi_band.png", grid, mu, sd, times)
    plots.intensity_figure(out / "intensity.png", grid,
                           {"predictive": inten}, times)


# ---------------------------------------------------------------------------
# subcommands

def cmd_simulate(args) -> int:
    cfg = load_config(args.config, overrides=args.set)
    if cfg.window is None or cfg.window <= 0:
        raise ConfigError("simulate needs a positive 'window' in the config")
    if cfg.lam is None or cfg.lam <= 0:
        raise ConfigError("simulate needs a positive 'simulate.lam'")
    out = _out_dir(args.out)
    rng = np.random.default_rng(cfg.seed)
    truth = make_ground_truth(cfg.hyper, cfg.lam, cfg.window, rng=rng)
    events = thinning_simulate(truth, rng)
    save_events(out / "events.csv", events)
    save_config(cfg, out / "config.yaml")

    truth_dir = out / "truth"
    truth_dir.mkdir(exist_ok=True)
    _write_csv(truth_dir / "s.csv",
               np.column_stack([truth.s_grid, truth.s_values]), "t,s")
    _write_csv(truth_dir / "g.csv",
               np.column_stack([truth.g_grid, truth.g_values]), "lag,g")
    with (truth_dir / "meta.json").open("w") as fh:
        json.dump({"lam": truth.lam, "window": truth.window,
                   "seed": cfg.seed, "hyper": cfg.hyper.to_dict()},
                  fh, indent=2, sort_keys=True)
        fh.write("\n")

    grid = np.linspace(0.0, cfg.window, 1000)
    phi = truth.phi(grid, events.times)
    inten = truth.intensity(grid, events.times)
    _write_csv(out / "truth_intensity.csv",
               np.column_stack([grid, phi, inten]), "t,phi,intensity")
    plots.intensity_figure(out / "intensity.png", grid, {"truth": inten},
                           events.times)
    print(f"simulated {len(events)} events on [0, {cfg.window:g}] -> {out}")
    return 0


def _fit_one(events, hyper, cfg, out: Path, kernel=None):
    if cfg.method == "gibbs":
        fitted = run_chain(events, hyper, cfg.gibbs)
        save_results(fitted, out)
        plots.chain_figure(out / "chain.png", fitted.lam_samples,
                           fitted.lam_autocorr)
    else:
        fitted = fit(events, hyper, cfg.vi, kernel=kernel)
        save_results(fitted, out)
        plots.elbo_figure(out / "elbo.png", fitted.elbo_trace)
    _write_predictive(fitted, out, events)
    return fitted


def cmd_fit(args) -> int:
    cfg = load_config(args.config, overrides=args.set)
    events = _load_events_flex(args.events, cfg.window)
    out = _out_dir(args.out)
    save_config(cfg, out / "config.yaml")

    if events.labels is not None and events.n_dims > 1:
        if cfg.method != "vi":
            raise ConfigError(
                "multivariate fitting is supported for the vi method only")
        vi_cfg = cfg.vi
        if vi_cfg.learn_hypers:
            logger.warning("multivariate fit: freezing hyperparameters "
                           "(learning is univariate-only)")
            vi_cfg = replace(vi_cfg, learn_hypers=False)
        n = events.n_dims
        model = MultivariateModel(
            s_params=[cfg.hyper.s_params] * n,
            lambda_priors=[cfg.hyper.lambda_prior] * n,
            memory=[[(cfg.hyper.g_params, cfg.hyper.decay)
                     for _ in range(n)] for _ in range(n)])
        dim_cfg = replace(cfg, vi=vi_cfg)

        def fit_dim(r):
            sub = EventSequence(events.label_times(r), window=events.window)
            return _fit_one(sub, model.dimension_hyper(r), dim_cfg,
                            _out_dir(out / f"dim{r}"),
                            kernel=model.dimension_kernel(r, events))

        with ThreadPoolExecutor(max_workers=n) as pool:
            fitted = list(pool.map(fit_dim, range(n)))
        for r, state in enumerate(fitted):
            print(f"dim{r}: {state.n_events} events, "
                  f"lam_mean {state.lam_mean:.3f} -> {out / f'dim{r}'}")
        return 0

    fitted = _fit_one(events, cfg.hyper, cfg, out)
    print(f"fitted {cfg.method} on {len(events)} events, "
          f"lam_mean {fitted.lam_mean:.3f} -> {out}")
    return 0


def _gof_payload(report) -> dict:
    return {"n": report.n, "ks_statistic": report.statistic,
            "p_value": report.p_value, "band": report.band}


def cmd_gof(args) -> int:
    fit_dir = Path(args.fit)
    dim_dirs = sorted(fit_dir.glob("dim[0-9]*"))
    out = _out_dir(args.out if args.out else fit_dir / "gof")

    if dim_dirs:
        fits = [load_results(d) for d in dim_dirs]
        events = _load_events_flex(args.events, fits[0].window)
        result = multivariate_gof(events, [_intensity_fn(f) for f in fits],
                                  quad_resolution=args.quad_resolution)
        payload = {}
        for r, report in result.reports.items():
            sub = _out_dir(out / f"dim{r}")
            save_results(report, sub)
            plots.qq_figure(sub / "qq.png", report)
            payload[f"dim{r}"] = _gof_payload(report)
        for r, reason in result.skipped.items():
            payload[f"dim{r}"] = {"skipped": reason}
        if args.json:
            print(json.dumps(payload, indent=2, sort_keys=True))
        else:
            for name, row in sorted(payload.items()):
                if "skipped" in row:
                    print(f"{name}: skipped ({row['skipped']})")
                else:
                    print(f"{name}: KS D={row['ks_statistic']:.4f} "
                          f"p={row['p_value']:.4f} (n={row['n']})")
        return 0

    fitted = load_results(fit_dir)
    events = _load_events_flex(args.events, fitted.window)
    report = gof_report(events, _intensity_fn(fitted),
                        quad_resolution=args.quad_resolution)
    save_results(report, out)
    plots.qq_figure(out / "qq.png", report)
    if args.json:
        print(json.dumps(_gof_payload(report), indent=2, sort_keys=True))
    else:
        print(report.summary())
    return 0


def cmd_evaluate(args) -> int:
    fitted = load_results(args.fit)
    test_events = _load_events_flex(args.events, fitted.window)
    inside = test_events.times[test_events.times > args.t_start]
    if inside.size == 0:
        raise ConfigError(
            f"empty test set on ({args.t_start:g}, "
            f"{test_events.window:g}]")
    total, per_event = heldout_log_likelihood(
        test_events, args.t_start, test_events.window, fitted.lam_mean,
        fitted.predict_phi)
    metrics = {"test_log_lik": total, "per_event": per_event,
               "n_events": int(inside.size),
               "t_start": args.t_start, "t_end": test_events.window}
    out = _out_dir(args.out if args.out else Path(args.fit) / "eval")
    with (out / "metrics.json").open("w") as fh:
        json.dump(metrics, fh, indent=2, sort_keys=True)
        fh.write("\n")
    if args.json:
        print(json.dumps(metrics, indent=2, sort_keys=True))
    else:
        print(f"test log-likelihood {total:.4f} total, "
              f"{per_event:.4f} per event over {inside.size} events")
    return 0


def _read_truth_curve(truth_dir: Path, grid: np.ndarray) -> np.ndarray:
    rows = np.loadtxt(truth_dir / "truth_intensity.csv", delimiter=",",
                      skiprows=1, ndmin=2)
    if rows.shape[0] != grid.size or not np.allclose(rows[:, 0], grid):
        logger.info("resampling truth intensity onto the reporting grid")
    return np.interp(grid, rows[:, 0], rows[:, 2])


def cmd_compare(args) -> int:
    named = []
    for d in args.fits:
        name = Path(d).name or str(d)
        while any(name == n for n, _ in named):
            name += "+"
        named.append((name, load_results(d)))
    window = named[0][1].window
    grid = np.linspace(0.0, window, REPORT_GRID)
    curves = {name: _intensity_fn(f)(grid) for name, f in named}

    out = _out_dir(args.out)
    columns, header = [grid], ["t"]
    truth = None
    if args.truth:
        truth = _read_truth_curve(Path(args.truth), grid)
        columns.append(truth)
        header.append("truth")
    for name, _ in named:
        columns.append(curves[name])
        header.append(name)
    _write_csv(out / "compare.csv", np.column_stack(columns),
               ",".join(header))

    rows = []
    for name, fitted in named:
        nrmse = (np.sqrt(np.mean((curves[name] - truth) ** 2))
                 / np.sqrt(np.mean(truth ** 2))) if truth is not None \
            else float("nan")
        per_event = float("nan")
        if args.test_events:
            test_ev = _load_events_flex(args.test_events, fitted.window)
            _, per_event = heldout_log_likelihood(
                test_ev, args.t_start, test_ev.window, fitted.lam_mean,
                fitted.predict_phi)
        rows.append((name, nrmse, per_event))
    with (out / "compare_summary.csv").open("w") as fh:
        fh.write("method,nrmse,test_log_lik_per_event\n")
        for name, nrmse, per_event in rows:
            fh.write(f"{name},{nrmse:.17g},{per_event:.17g}\n")

    overlay = dict(curves)
    if truth is not None:
        overlay = {"truth": truth, **curves}
    plots.intensity_figure(out / "overlay.png", grid, overlay,
                           named[0][1].events.times)
    if truth is not None or args.test_events:
        for name, nrmse, per_event in rows:
            line = f"{name}:"
            if truth is not None:
                line += f" nrmse={nrmse:.4f}"
            if args.test_events:
                line += f" test_ll/event={per_event:.4f}"
            print(line)
    return 0


# ---------------------------------------------------------------------------
# wiring

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="gphawkes",
        description="Sigmoidal Gaussian-process Hawkes processes: "
                    "simulation, Gibbs/VI fitting, and goodness-of-fit.")
    sub = parser.add_subparsers(dest="command", required=True)

    def add_set(p):
        p.add_argument("--set", action="append", default=[],
                       metavar="SECTION.KEY=VALUE",
                       help="override a config value present in the file")

    p = sub.add_parser("simulate", help="draw ground truth and events")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    add_set(p)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("fit", help="fit events with gibbs or vi")
    p.add_argument("--config", required=True)
    p.add_argument("--events", required=True)
    p.add_argument("--out", required=True)
    add_set(p)
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("gof", help="time-rescaling goodness-of-fit")
    p.add_argument("--fit", required=True)
    p.add_argument("--events", required=True)
    p.add_argument("--out")
    p.add_argument("--quad-resolution", type=int, default=50)
    p.add_argument("--json", action="store_true")
    p.set_defaults(func=cmd_gof)

    p = sub.add_parser("evaluate", help="held-out test log-likelihood")
    p.add_argument("--fit", required=True)
    p.add_argument("--events", required=True,
                   help="test events; file window is the test end time")
    p.add_argument("--t-start", type=float, default=0.0)
    p.add_argument("--out")
    p.add_argument("--json", action="store_true")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("compare", help="align fits (and truth) on one grid")
    p.add_argument("--fits", nargs="+", required=True)
    p.add_argument("--truth", help="directory written by 'simulate'")
    p.add_argument("--test-events")
    p.add_argument("--t-start", type=float, default=0.0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_compare)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (SingularKernelError, np.linalg.LinAlgError,
            FloatingPointError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 2
    except (ConfigError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"io error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
