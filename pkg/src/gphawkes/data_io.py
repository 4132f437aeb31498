"""Filesystem boundary: event CSVs, run configs, and results bundles.

Event files are plain CSV with a mandatory ``time`` column, an optional
``type`` column, and the observation window declared on a ``# T=<value>``
comment line (or supplied by the caller).  Configs are YAML with strict
key validation.  Results directories contain a ``manifest`` JSON listing
every artifact with a SHA-256 content hash.
"""

from __future__ import annotations

import hashlib
import io
import json
import logging
import re
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np
import yaml

from .gibbs import ChainOutput, GibbsConfig
from .gof import GofReport, ks_uniform_test, qq_data
from .kernels import (AggregatedKernel, JITTER_START, chol_with_jitter)
from .gp import SparseGp
from .model import EventSequence, ModelHyper
from .vi import ViConfig, VariationalState, _refresh_moments

logger = logging.getLogger(__name__)

__all__ = [
    "RunConfig",
    "load_events",
    "save_events",
    "load_config",
    "save_config",
    "save_results",
    "load_results",
]

#: 17 significant digits round-trips IEEE doubles exactly.
REAL_FMT = "%.17g"

_WINDOW_RE = re.compile(r"^#\s*T\s*=\s*(\S+)\s*$")


# ---------------------------------------------------------------------------
# event files

def load_events(path, window: Optional[float] = None) -> EventSequence:
    """Parse an event CSV into a validated :class:`EventSequence`.

    ``window`` overrides any ``# T=`` line in the file; one of the two
    must be present.  Parse failures report the offending line number.
    """
    path = Path(path)
    file_window = None
    header = None
    times, labels = [], []
    with path.open() as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line:
                continue
            if line.startswith("#"):
                m = _WINDOW_RE.match(line)
                if m:
                    try:
                        file_window = float(m.group(1))
                    except ValueError:
                        raise ValueError(
                            f"{path}:{lineno}: bad window declaration "
                            f"{line!r}") from None
                continue
            cols = [c.strip() for c in line.split(",")]
            if header is None:
                if cols == ["time"] or cols == ["time", "type"]:
                    header = cols
                    continue
                raise ValueError(
                    f"{path}:{lineno}: expected header 'time' or "
                    f"'time,type', got {line!r}")
            if len(cols) != len(header):
                raise ValueError(
                    f"{path}:{lineno}: expected {len(header)} columns, "
                    f"got {len(cols)}")
            try:
                t = float(cols[0])
            except ValueError:
                raise ValueError(
                    f"{path}:{lineno}: malformed time {cols[0]!r}") from None
            if t < 0:
                raise ValueError(f"{path}:{lineno}: negative time {t:g}")
            times.append(t)
            if len(header) == 2:
                try:
                    lab = int(cols[1])
                except ValueError:
                    raise ValueError(
                        f"{path}:{lineno}: malformed type "
                        f"{cols[1]!r}") from None
                if lab < 0:
                    raise ValueError(
                        f"{path}:{lineno}: negative type {lab}")
                labels.append(lab)
    if header is None:
        raise ValueError(f"{path}: missing 'time' header row")
    use_window = window if window is not None else file_window
    if use_window is None:
        raise ValueError(
            f"{path}: no window; declare '# T=<value>' or pass one")
    arr = np.asarray(times, dtype=np.float64)
    if arr.size and arr.max() > use_window:
        bad = int(np.argmax(arr > use_window))
        raise ValueError(
            f"{path}: time {arr[bad]:g} exceeds window T={use_window:g}")
    return EventSequence.from_raw(
        arr, use_window, labels=np.asarray(labels) if labels else None)


def save_events(path, events: EventSequence) -> None:
    path = Path(path)
    with path.open("w") as fh:
        fh.write(f"# T={events.window!r}\n")
        if events.labels is None:
            fh.write("time\n")
            for t in events.times:
                fh.write((REAL_FMT % t) + "\n")
        else:
            fh.write("time,type\n")
            for t, lab in zip(events.times, events.labels):
                fh.write((REAL_FMT % t) + f",{int(lab)}\n")


# ---------------------------------------------------------------------------
# run configs

_MODEL_KEYS = ("a_s", "sigma_s", "a_g", "sigma_g", "alpha", "alpha0",
               "beta0")
_GIBBS_KEYS = {"iterations", "burn_in", "thin", "grid_count",
               "learn_hypers", "hyper_every", "hyper_lr",
               "grad_average_window", "noise"}
_VI_KEYS = {"inducing_count", "grid_count", "max_rounds", "tol",
            "learn_hypers", "hyper_lr", "update_order", "noise"}
_TOP_KEYS = {"model", "method", "gibbs", "vi", "seed", "window",
             "simulate", "output"}


@dataclass
class RunConfig:
    """Everything one inference or simulation run needs."""

    hyper: ModelHyper
    method: str
    gibbs: Optional[GibbsConfig] = None
    vi: Optional[ViConfig] = None
    seed: int = 0
    window: Optional[float] = None
    lam: Optional[float] = None
    output: Optional[str] = None
    noise: float = JITTER_START

    @property
    def method_config(self):
        return self.gibbs if self.method == "gibbs" else self.vi


class ConfigError(ValueError):
    pass


def _require_mapping(obj, where):
    if obj is None:
        return {}
    if not isinstance(obj, dict):
        raise ConfigError(f"config section '{where}' must be a mapping")
    return obj


def _apply_overrides(raw: dict, overrides) -> None:
    """Apply ``section.key=value`` overrides onto the parsed config; each
    override must reference a key already present in the file."""
    for item in overrides:
        dotted, eq, text = item.partition("=")
        if not eq:
            raise ConfigError(
                f"override {item!r} must look like section.key=value")
        node = raw
        keys = dotted.split(".")
        for k in keys[:-1]:
            if not isinstance(node, dict) or k not in node:
                raise ConfigError(
                    f"override references unknown config key {dotted!r}")
            node = node[k]
        if not isinstance(node, dict) or keys[-1] not in node:
            raise ConfigError(
                f"override references unknown config key {dotted!r}")
        node[keys[-1]] = yaml.safe_load(text)


def load_config(path, overrides=()) -> RunConfig:
    path = Path(path)
    with path.open() as fh:
        raw = yaml.safe_load(fh)
    raw = _require_mapping(raw, "<top>")
    _apply_overrides(raw, overrides)

    missing, unknown = [], []
    unknown += [k for k in raw if k not in _TOP_KEYS]

    model = _require_mapping(raw.get("model"), "model")
    missing += [f"model.{k}" for k in _MODEL_KEYS if k not in model]
    unknown += [f"model.{k}" for k in model
                if k not in _MODEL_KEYS + ("noise",)]

    method = raw.get("method")
    if method is None:
        missing.append("method")
    elif method not in ("gibbs", "vi"):
        raise ConfigError(f"method must be 'gibbs' or 'vi', got {method!r}")

    if method is not None:
        if method not in raw:
            missing.append(method)
        other = "vi" if method == "gibbs" else "gibbs"
        if other in raw:
            raise ConfigError(
                f"config declares method={method} but also a '{other}' "
                f"block; exactly one method block is allowed")
        block = _require_mapping(raw.get(method), method)
        allowed = _GIBBS_KEYS if method == "gibbs" else _VI_KEYS
        unknown += [f"{method}.{k}" for k in block if k not in allowed]
        if method == "gibbs" and "iterations" not in block:
            missing.append("gibbs.iterations")

    sim = _require_mapping(raw.get("simulate"), "simulate")
    unknown += [f"simulate.{k}" for k in sim if k != "lam"]

    if missing:
        raise ConfigError(
            "missing required config keys: " + ", ".join(sorted(missing)))
    if unknown:
        raise ConfigError(
            "unknown config keys: " + ", ".join(sorted(unknown)))

    noise = float(model.get("noise", JITTER_START))
    block = dict(raw[method])
    block_noise = float(block.pop("noise", noise))
    for val, where in ((noise, "model.noise"), (block_noise, f"{method}.noise")):
        if abs(val - JITTER_START) > 1e-12 * JITTER_START:
            raise ConfigError(
                f"{where}={val:g} unsupported; the jitter ladder is fixed "
                f"to start at {JITTER_START:g}")

    seed = int(raw.get("seed", 0))
    try:
        hyper = ModelHyper.from_dict({k: model[k] for k in _MODEL_KEYS})
        if method == "gibbs":
            method_cfg = GibbsConfig(seed=seed, **block)
            gibbs_cfg, vi_cfg = method_cfg, None
        else:
            method_cfg = ViConfig(seed=seed, **block)
            gibbs_cfg, vi_cfg = None, method_cfg
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid config value: {exc}") from exc

    window = raw.get("window")
    lam = sim.get("lam")
    return RunConfig(hyper=hyper, method=method, gibbs=gibbs_cfg, vi=vi_cfg,
                     seed=seed,
                     window=None if window is None else float(window),
                     lam=None if lam is None else float(lam),
                     output=raw.get("output"), noise=noise)


def config_as_dict(cfg: RunConfig) -> dict:
    """Full config with every default echoed explicitly."""
    out = {
        "model": {**{k: float(v) for k, v in cfg.hyper.to_dict().items()},
                  "noise": cfg.noise},
        "method": cfg.method,
        "seed": cfg.seed,
    }
    if cfg.method == "gibbs":
        g = cfg.gibbs
        out["gibbs"] = {
            "iterations": g.iterations, "burn_in": g.burn_in,
            "thin": g.thin, "grid_count": g.grid_count,
            "learn_hypers": g.learn_hypers, "hyper_every": g.hyper_every,
            "hyper_lr": g.hyper_lr,
            "grad_average_window": g.grad_average_window,
        }
    else:
        v = cfg.vi
        out["vi"] = {
            "inducing_count": v.inducing_count, "grid_count": v.grid_count,
            "max_rounds": v.max_rounds, "tol": v.tol,
            "learn_hypers": v.learn_hypers, "hyper_lr": v.hyper_lr,
            "update_order": list(v.update_order),
        }
    if cfg.window is not None:
        out["window"] = cfg.window
    if cfg.lam is not None:
        out["simulate"] = {"lam": cfg.lam}
    if cfg.output is not None:
        out["output"] = cfg.output
    return out


def save_config(cfg: RunConfig, path) -> None:
    with Path(path).open("w") as fh:
        yaml.safe_dump(config_as_dict(cfg), fh, sort_keys=True,
                       default_flow_style=False)


# ---------------------------------------------------------------------------
# results bundles

def _sha256(path: Path) -> str:
    h = hashlib.sha256()
    with path.open("rb") as fh:
        for chunk in iter(lambda: fh.read(65536), b""):
            h.update(chunk)
    return h.hexdigest()


def _write_csv(path: Path, arr: np.ndarray, header: str,
               fmt: str = REAL_FMT) -> None:
    arr = np.asarray(arr)
    if arr.ndim == 1:
        arr = arr[:, None]
    with path.open("w") as fh:
        fh.write(header + "\n")
        np.savetxt(fh, arr, fmt=fmt, delimiter=",")


def _read_csv(path: Path, n_cols: int) -> np.ndarray:
    with path.open() as fh:
        fh.readline()  # header
        body = fh.read()
    if not body.strip():
        return np.empty((0, n_cols))
    data = np.loadtxt(io.StringIO(body), delimiter=",", ndmin=2)
    return data


def _finish_manifest(out: Path, kind: str, files) -> dict:
    manifest = {"kind": kind,
                "files": {name: _sha256(out / name) for name in files}}
    with (out / "manifest").open("w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return manifest


def _save_gof(report: GofReport, out: Path) -> dict:
    (out / "summary").write_text(report.summary() + "\n")
    _write_csv(out / "qq.csv", report.qq_rows(),
               "theoretical,empirical,band_lo,band_hi")
    return _finish_manifest(out, "gof", ["summary", "qq.csv"])


def _load_gof(out: Path) -> GofReport:
    rows = _read_csv(out / "qq.csv", 4)
    z = rows[:, 1]
    taus = -np.log1p(-z)
    d, p = ks_uniform_test(z)
    pairs, band = qq_data(z)
    return GofReport(taus=taus, z=z, statistic=d, p_value=p, qq=pairs,
                     band=band)


_TRAJ_HEADER = "a_s,sigma_s,a_g,sigma_g,alpha"


def _save_gibbs(chain: ChainOutput, out: Path) -> dict:
    (out / "samples").mkdir(exist_ok=True)
    save_events(out / "events.csv", chain.events)
    c = chain.config
    meta = {
        "final_hyper": chain.final_hyper.to_dict(),
        "config": {
            "iterations": c.iterations, "burn_in": c.burn_in,
            "thin": c.thin, "seed": c.seed, "grid_count": c.grid_count,
            "learn_hypers": c.learn_hypers, "hyper_every": c.hyper_every,
            "hyper_lr": c.hyper_lr,
            "grad_average_window": c.grad_average_window,
        },
    }
    with (out / "metadata.json").open("w") as fh:
        json.dump(meta, fh, indent=2, sort_keys=True)
        fh.write("\n")
    _write_csv(out / "samples" / "grid.csv", chain.grid, "t")
    _write_csv(out / "samples" / "lam.csv", chain.lam_samples, "lam")
    _write_csv(out / "samples" / "m.csv", chain.m_samples, "m", fmt="%d")
    _write_csv(out / "samples" / "phi_grid.csv", chain.phi_grid_samples,
               ",".join(f"phi_{i}" for i in range(chain.grid.size)))
    _write_csv(out / "samples" / "counts.csv",
               np.column_stack([chain.accept_counts,
                                chain.candidate_counts]),
               "accepted,candidates", fmt="%d")
    _write_csv(out / "samples" / "lam_autocorr.csv", chain.lam_autocorr,
               "autocorr")
    _write_csv(out / "hyper_trajectory.csv",
               np.column_stack([chain.hyper_iterations,
                                chain.hyper_trajectory])
               if chain.hyper_iterations.size
               else np.empty((0, 6)),
               "iteration," + _TRAJ_HEADER)
    lines = [
        "gibbs chain",
        f"n_samples        {chain.n_samples}",
        f"events           {chain.events.times.size}",
        f"lam_mean         {chain.lam_mean:.6f}" if chain.n_samples
        else "lam_mean         nan",
    ]
    (out / "summary").write_text("\n".join(lines) + "\n")
    files = ["summary", "metadata.json", "events.csv",
             "hyper_trajectory.csv", "samples/grid.csv", "samples/lam.csv",
             "samples/m.csv", "samples/phi_grid.csv", "samples/counts.csv",
             "samples/lam_autocorr.csv"]
    return _finish_manifest(out, "gibbs", files)


def _load_gibbs(out: Path) -> ChainOutput:
    with (out / "metadata.json").open() as fh:
        meta = json.load(fh)
    events = load_events(out / "events.csv")
    grid = _read_csv(out / "samples" / "grid.csv", 1)[:, 0]
    traj = _read_csv(out / "hyper_trajectory.csv", 6)
    return ChainOutput(
        grid=grid,
        lam_samples=_read_csv(out / "samples" / "lam.csv", 1)[:, 0],
        m_samples=_read_csv(out / "samples" / "m.csv", 1)[:, 0].astype(int),
        phi_grid_samples=_read_csv(out / "samples" / "phi_grid.csv",
                                   grid.size),
        accept_counts=_read_csv(out / "samples" / "counts.csv",
                                2)[:, 0].astype(int),
        candidate_counts=_read_csv(out / "samples" / "counts.csv",
                                   2)[:, 1].astype(int),
        lam_autocorr=_read_csv(out / "samples" / "lam_autocorr.csv",
                               1)[:, 0],
        hyper_iterations=traj[:, 0].astype(int),
        hyper_trajectory=traj[:, 1:],
        final_hyper=ModelHyper.from_dict(meta["final_hyper"]),
        events=events,
        config=GibbsConfig(**meta["config"]),
    )


def _kernel_as_dict(kern) -> dict:
    """Serialize an aggregated-kernel closure, histories included, so a
    multivariate dimension fit reloads with its cross-dimension terms."""
    return {
        "a_s": kern.s_params.amplitude,
        "sigma_s": kern.s_params.lengthscale,
        "window": kern.window,
        "contributions": [
            {"history": [float(t) for t in hist],
             "a_g": g.amplitude, "sigma_g": g.lengthscale,
             "alpha": d.alpha}
            for hist, g, d in kern.contributions
        ],
    }


def _kernel_from_dict(doc: dict) -> AggregatedKernel:
    from .kernels import DecayParam, RbfParams
    contribs = [
        (np.asarray(c["history"], dtype=np.float64),
         RbfParams(c["a_g"], c["sigma_g"]), DecayParam(c["alpha"]))
        for c in doc["contributions"]
    ]
    return AggregatedKernel(RbfParams(doc["a_s"], doc["sigma_s"]), contribs,
                            window=doc["window"])


def _save_vi(state: VariationalState, out: Path) -> dict:
    (out / "samples").mkdir(exist_ok=True)
    save_events(out / "events.csv", state.events)
    c = state.config
    meta = {
        "hyper": state.hyper.to_dict(),
        "config": {
            "inducing_count": c.inducing_count,
            "grid_count": c.grid_count, "max_rounds": c.max_rounds,
            "tol": c.tol, "seed": c.seed, "learn_hypers": c.learn_hypers,
            "hyper_lr": c.hyper_lr,
            "update_order": list(c.update_order),
        },
        "alpha": state.alpha,
        "beta": state.beta,
        "jitter": state.sgp.jitter,
        "rounds_run": state.rounds_run,
        "kernel": _kernel_as_dict(state.sgp.kernel),
    }
    with (out / "metadata.json").open("w") as fh:
        json.dump(meta, fh, indent=2, sort_keys=True)
        fh.write("\n")
    _write_csv(out / "elbo_trace.csv", np.asarray(state.elbo_trace),
               "elbo")
    _write_csv(out / "hyper_trajectory.csv",
               np.asarray(state.hyper_trajectory)
               if state.hyper_trajectory else np.empty((0, 5)),
               _TRAJ_HEADER)
    _write_csv(out / "samples" / "inducing.csv",
               np.column_stack([state.sgp.inducing, state.sgp.mu]), "t,mu")
    _write_csv(out / "samples" / "Sigma.csv", state.sgp.Sigma,
               ",".join(f"s_{i}" for i in range(state.sgp.inducing.size)))
    _write_csv(out / "samples" / "grid.csv",
               np.column_stack([state.grid, state.quad_w, state.lambda_q2,
                                state.grid_tilts]),
               "t,quad_w,lambda_q2,tilt")
    _write_csv(out / "samples" / "tilts.csv", state.tilts, "tilt")
    lines = [
        "variational fit",
        f"rounds_run       {state.rounds_run}",
        f"events           {state.n_events}",
        f"lam_mean         {state.lam_mean:.6f}",
        f"elbo             "
        f"{state.elbo_trace[-1] if state.elbo_trace else float('nan'):.6f}",
    ]
    (out / "summary").write_text("\n".join(lines) + "\n")
    files = ["summary", "metadata.json", "events.csv", "elbo_trace.csv",
             "hyper_trajectory.csv", "samples/inducing.csv",
             "samples/Sigma.csv", "samples/grid.csv", "samples/tilts.csv"]
    return _finish_manifest(out, "vi", files)


def _load_vi(out: Path) -> VariationalState:
    with (out / "metadata.json").open() as fh:
        meta = json.load(fh)
    events = load_events(out / "events.csv")
    hyper = ModelHyper.from_dict(meta["hyper"])
    config = ViConfig(**meta["config"])
    ind = _read_csv(out / "samples" / "inducing.csv", 2)
    sigma = _read_csv(out / "samples" / "Sigma.csv", ind.shape[0])
    grid_rows = _read_csv(out / "samples" / "grid.csv", 4)
    kern = _kernel_from_dict(meta["kernel"])
    chol_kc, jitter = chol_with_jitter(kern.matrix(ind[:, 0]))
    if abs(jitter - meta["jitter"]) > 0:
        logger.warning("rebuilt jitter %g differs from saved %g", jitter,
                       meta["jitter"])
    sgp = SparseGp(inducing=ind[:, 0], mu=ind[:, 1], Sigma=sigma,
                   chol_kc=chol_kc, kernel=kern, jitter=jitter)
    state = VariationalState(
        events=events, hyper=hyper, config=config, sgp=sgp,
        alpha=meta["alpha"], beta=meta["beta"],
        tilts=_read_csv(out / "samples" / "tilts.csv", 1)[:, 0],
        grid=grid_rows[:, 0], quad_w=grid_rows[:, 1],
        lambda_q2=grid_rows[:, 2], grid_tilts=grid_rows[:, 3],
        elbo_trace=list(_read_csv(out / "elbo_trace.csv", 1)[:, 0]),
        hyper_trajectory=[list(r) for r in
                          _read_csv(out / "hyper_trajectory.csv", 5)],
        rounds_run=meta["rounds_run"],
    )
    _refresh_moments(state)
    return state


def save_results(state, out_dir) -> dict:
    """Persist a fit or report into ``out_dir`` and return the manifest."""
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
        if isinstance(state, GofReport):
            return _save_gof(state, out)
        if isinstance(state, ChainOutput):
            return _save_gibbs(state, out)
        if isinstance(state, VariationalState):
            return _save_vi(state, out)
    except OSError as exc:
        raise OSError(f"cannot write results under {out}: {exc}") from exc
    raise TypeError(f"cannot persist {type(state).__name__}")


def load_results(out_dir, verify: bool = True):
    """Rebuild the persisted object; verifies content hashes by default."""
    out = Path(out_dir)
    manifest_path = out / "manifest"
    if not manifest_path.exists():
        raise OSError(f"no manifest under {out}")
    with manifest_path.open() as fh:
        manifest = json.load(fh)
    if verify:
        for name, digest in manifest["files"].items():
            target = out / name
            if not target.exists():
                raise OSError(f"manifest entry missing on disk: {target}")
            actual = _sha256(target)
            if actual != digest:
                raise OSError(
                    f"content hash mismatch for {target}: manifest "
                    f"{digest[:12]}…, file {actual[:12]}…")
    kind = manifest["kind"]
    if kind == "gof":
        return _load_gof(out)
    if kind == "gibbs":
        return _load_gibbs(out)
    if kind == "vi":
        return _load_vi(out)
    raise OSError(f"unknown results kind {kind!r} in {manifest_path}")
