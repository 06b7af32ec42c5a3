"""Experiment configs, runners and the on-disk archive."""
from __future__ import annotations

import copy
import hashlib
import json
import math
import os
import platform
import time
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from . import __version__
from . import dynamics as dyn
from . import homognet as hn
from . import losses
from . import stability as stab
from . import verify
from .data import SyntheticTask
from .errors import ConfigError, HomolensError, InvalidSpec, NonZeroBayesRequired
from .fitting import log_grid, loglog_fit
from .parallel import parallel_map

EXPERIMENTS = ("stepsize_order", "separation", "gap_scaling", "loss_curve", "identity_suite", "stability_sweep")


# ---------------------------------------------------------------- config


@dataclass(frozen=True)
class TaskConfig:
    d: int = 16
    noise_rate: float = 0.3
    radius: float = 1.0


@dataclass(frozen=True)
class ConstantsConfig:
    method: str = "monte_carlo"
    n_probe: int = 64
    seed: int = 0
    n_starts: int = 16
    pgd_iters: int = 100
    n_mc: int = 2048


@dataclass(frozen=True)
class GridConfig:
    n: tuple = (256,)
    T: tuple = (1000,)
    epochs: tuple = ()
    c2: tuple = (1.0,)
    H: tuple = (3.0,)
    t0: tuple = (0,)
    seeds: int = 8


@dataclass(frozen=True)
class ExperimentConfig:
    experiment: str
    seed: int = 0
    loss: dict = field(default_factory=lambda: {"kind": "example1", "dim": 2, "degree": 3.0})
    network: object = None
    task: TaskConfig = TaskConfig()
    constants: ConstantsConfig = ConstantsConfig()
    schedule: dict = field(default_factory=lambda: {"kind": "effective_harmonic", "c": 1.0})
    compare_schedule: dict | None = None
    grid: GridConfig = GridConfig()
    fit_range: tuple = (100, 10_000)
    probe_every: int | None = None
    heldout_factor: int = 50
    tau: float = 0.0
    window: int = 5
    write_trajectories: int = 1
    quick: bool = False

    def to_dict(self):
        d = asdict(self)
        for key in ("task", "constants", "grid"):
            d[key] = {k: (list(v) if isinstance(v, tuple) else v) for k, v in d[key].items()}
        d["fit_range"] = list(self.fit_range)
        return d

    def canonical_json(self):
        return json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))

    @property
    def config_hash(self):
        return hashlib.sha256(self.canonical_json().encode()).hexdigest()[:16]


_NETWORK_SEP = {"kind": "hinge"}

DEFAULTS = {
    "stepsize_order": {
        "loss": {"kind": "example1", "dim": 2, "degree": 3.0},
        "grid": {"T": [10_000], "H": [3.0, 4.0, 5.0], "c2": [1.0], "seeds": 64},
        "fit_range": [100, 10_000],
    },
    "separation": {
        "loss": {"kind": "example1", "dim": 2, "degree": 3.0},
        "schedule": {"kind": "effective_harmonic", "c": 1.0},
        "compare_schedule": {"kind": "effective_log_damped", "c": None, "offset": 2.0},
        "grid": {"T": [10_000], "seeds": 8},
        "fit_range": [100, 10_000],
        "probe_every": 1,
    },
    "gap_scaling": {
        "loss": _NETWORK_SEP,
        "network": "relu2",
        "grid": {"n": [128, 256, 512, 1024], "epochs": [1, 2, 4, 8], "seeds": 32},
    },
    "loss_curve": {
        "loss": {"kind": "max_margin"},
        "network": "linear",
        "grid": {"n": [256], "epochs": [16], "seeds": 8},
        "probe_every": 32,
        "heldout_factor": 50,
        "tau": 0.005,
    },
    "identity_suite": {},
    "stability_sweep": {
        "loss": _NETWORK_SEP,
        "network": "relu2",
        "grid": {"n": [64, 128], "epochs": [1, 2, 4], "t0": [0, 32], "seeds": 4},
    },
}

QUICK = {
    "stepsize_order": {"grid": {"T": [2000], "seeds": 8}, "fit_range": [100, 2000]},
    "separation": {"grid": {"T": [2000], "seeds": 2}, "fit_range": [100, 2000]},
    "gap_scaling": {"grid": {"n": [64, 128], "epochs": [1, 2], "seeds": 4}, "constants": {"n_probe": 16}},
    "loss_curve": {"grid": {"n": [128], "epochs": [4], "seeds": 2}, "constants": {"n_probe": 16}},
    "identity_suite": {"quick": True},
    "stability_sweep": {"grid": {"n": [32], "epochs": [1, 2], "t0": [0, 8], "seeds": 2},
                        "constants": {"n_probe": 16}},
}


def _merge(base, over):
    out = copy.deepcopy(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict) and k not in ("loss", "schedule", "compare_schedule", "network"):
            out[k] = _merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def _build(cls, d, where):
    if not isinstance(d, dict):
        raise ConfigError(f"{where} must be an object")
    names = {f.name for f in fields(cls)}
    extra = set(d) - names
    if extra:
        raise ConfigError(f"unknown field(s) in {where}: {sorted(extra)}")
    kw = {}
    for f in fields(cls):
        if f.name in d:
            v = d[f.name]
            kw[f.name] = tuple(v) if isinstance(v, list) else v
    try:
        return cls(**kw)
    except TypeError as exc:
        raise ConfigError(f"malformed {where}: {exc}") from exc


def parse_config(raw, quick=False, seed=None):
    """Strict parse: defaults for the experiment, then the user's fields; unknown keys are errors."""
    if not isinstance(raw, dict):
        raise ConfigError("config must be a JSON object")
    exp = raw.get("experiment")
    if exp not in EXPERIMENTS:
        raise ConfigError(f"experiment must be one of {list(EXPERIMENTS)}, got {exp!r}")
    merged = _merge(DEFAULTS[exp], raw)
    if quick or merged.get("quick"):
        merged = _merge(merged, QUICK[exp])
        merged["quick"] = True
    if seed is not None:
        merged["seed"] = int(seed)
    top = {f.name for f in fields(ExperimentConfig)}
    extra = set(merged) - top
    if extra:
        raise ConfigError(f"unknown field(s) in config: {sorted(extra)}")
    sub = {
        "task": _build(TaskConfig, merged.get("task", {}), "task"),
        "constants": _build(ConstantsConfig, merged.get("constants", {}), "constants"),
        "grid": _build(GridConfig, merged.get("grid", {}), "grid"),
    }
    rest = {k: v for k, v in merged.items() if k not in sub}
    if "fit_range" in rest:
        rest["fit_range"] = tuple(rest["fit_range"])
    cfg = ExperimentConfig(**rest, **sub)
    _validate(cfg)
    return cfg


def load_config(path, quick=False, seed=None):
    try:
        with open(path) as fh:
            raw = json.load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config {path} is not valid JSON: {exc}") from exc
    return parse_config(raw, quick, seed)


def _validate(cfg):
    g = cfg.grid
    try:
        loss_kind(cfg)
        if cfg.schedule is not None:
            dyn.ScheduleSpec(**_sched_kw(cfg.schedule))
        if cfg.compare_schedule is not None:
            dyn.ScheduleSpec(**_sched_kw(cfg.compare_schedule))
        if cfg.network is not None:
            build_network(cfg)
    except (InvalidSpec, TypeError, KeyError) as exc:
        raise ConfigError(str(exc)) from exc
    if g.seeds < 1:
        raise ConfigError("grid.seeds must be >= 1")
    if cfg.experiment in ("stepsize_order", "separation") and not g.T:
        raise ConfigError("grid.T must be nonempty")
    if cfg.experiment == "stepsize_order" and not g.H:
        raise ConfigError("grid.H must be nonempty")
    if cfg.experiment in ("gap_scaling", "loss_curve", "stability_sweep") and (not g.n or not g.epochs):
        raise ConfigError("grid.n and grid.epochs must be nonempty")
    if cfg.experiment == "stability_sweep" and not g.t0:
        raise ConfigError("grid.t0 must be nonempty")
    if not g.c2:
        raise ConfigError("grid.c2 must be nonempty")
    if cfg.constants.method not in ("monte_carlo", "analytic"):
        raise ConfigError("constants.method must be monte_carlo or analytic")


def _sched_kw(d):
    d = dict(d)
    allowed = {"kind", "c", "exponent", "offset", "apply_caps"}
    extra = set(d) - allowed
    if extra:
        raise InvalidSpec(f"unknown schedule fields {sorted(extra)}")
    return d


def schedule_spec(d, c2=None):
    kw = _sched_kw(d)
    if c2 is not None and kw["kind"] == dyn.EFFECTIVE_HARMONIC:
        kw["c"] = float(c2)
    return dyn.ScheduleSpec(**kw)


def loss_kind(cfg, degree=None):
    d = dict(cfg.loss)
    if degree is not None and d.get("kind") == "example1":
        d["degree"] = float(degree)
    return losses.LossKind.from_dict(d)


NAMED_NETWORKS = {
    "desk": lambda d: hn.desk_network(d),
    "desk_smooth": lambda d: hn.desk_network(d, smooth=True),
    "relu2": lambda d: hn.mlp(d, (16, 1), hn.relu()),
    "relu3": lambda d: hn.mlp(d, (16, 16, 1), hn.relu()),
    "smooth2": lambda d: hn.mlp(d, (16, 1), hn.power_relu(2.0)),
    "linear": lambda d: hn.mlp(d, (1,), hn.linear()),
}


def build_network(cfg):
    net = cfg.network
    if net is None:
        return None
    if isinstance(net, str):
        if net not in NAMED_NETWORKS:
            raise InvalidSpec(f"unknown network {net!r}; known: {sorted(NAMED_NETWORKS)}")
        return NAMED_NETWORKS[net](cfg.task.d)
    return hn.NetworkSpec.from_dict(net)


def task_of(cfg):
    return SyntheticTask(cfg.task.d, cfg.task.noise_rate, cfg.task.radius)


def constants_for(cfg, kind, spec):
    if not kind.uses_network:
        if cfg.constants.method == "analytic":
            return losses.example1_constants(kind.dim, kind.degree)
    c = cfg.constants
    return losses.estimate_constants(kind, spec, task_of(cfg), n_probe=c.n_probe, seed=c.seed, method=c.method,
                                     n_starts=c.n_starts, pgd_iters=c.pgd_iters, n_mc=c.n_mc)


def _require_positive_floor(cfg, est):
    if cfg.task.noise_rate == 0.0:
        raise NonZeroBayesRequired("the task has no label noise, so the best sphere loss is 0")
    if "zero_bayes" in est.flags or not est.sigma_lower_sq > 0:
        raise NonZeroBayesRequired(f"estimated sigma_lower^2 = {est.sigma_lower_sq:.3g} is not positive")


# ---------------------------------------------------------------- archive


class Archive:
    """Single-writer output directory: config, summary, CSV/.dat files, and a timestamp sidecar."""

    def __init__(self, root, cfg):
        self.root = root
        self.cfg = cfg
        os.makedirs(root, exist_ok=True)
        self.files = []
        self.plots = []

    def path(self, name):
        p = os.path.join(self.root, name)
        os.makedirs(os.path.dirname(p), exist_ok=True)
        return p

    def add_csv_record(self, name, record):
        record.write_csv(self.path(name), comment=f"config_hash {self.cfg.config_hash}")
        self.files.append(name)

    def add_dat(self, name, columns, *, title, xlabel, ylabel, series, logscale="xy"):
        write_dat(self.path(name + ".dat"), columns, comment=f"config_hash {self.cfg.config_hash}")
        self.files.append(name + ".dat")
        self.plots.append({"name": name, "config_hash": self.cfg.config_hash, "columns": list(columns), "title": title, "xlabel": xlabel, "ylabel": ylabel,
                           "series": series, "logscale": logscale})

    def finish(self, summary, started):
        cfgd = self.cfg.to_dict()
        cfgd["config_hash"] = self.cfg.config_hash
        dump_json(self.path("config.json"), cfgd)
        summary = dict(summary)
        summary["config_hash"] = self.cfg.config_hash
        summary["experiment"] = self.cfg.experiment
        summary["files"] = sorted(self.files)
        summary["plots"] = self.plots
        dump_json(self.path("summary.json"), summary)
        render_plots(self.root, self.plots)
        dump_json(self.path("meta.json"), {
            "started": time.strftime("%Y-%m-%dT%H:%M:%S", time.localtime(started)),
            "elapsed_s": round(time.time() - started, 3),
            "version": __version__,
            "python": platform.python_version(),
            "numpy": np.__version__,
        })
        return summary


def _jsonable(x):
    if isinstance(x, dict):
        return {str(k): _jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_jsonable(v) for v in x]
    if isinstance(x, np.ndarray):
        return [_jsonable(v) for v in x.tolist()]
    if isinstance(x, (np.floating, float)):
        x = float(x)
        return x if math.isfinite(x) else repr(x)
    if isinstance(x, (np.integer,)):
        return int(x)
    if isinstance(x, (np.bool_,)):
        return bool(x)
    return x


def dump_json(path, obj):
    with open(path, "w") as fh:
        json.dump(_jsonable(obj), fh, sort_keys=True, indent=1)
        fh.write("\n")


def write_dat(path, columns, comment=None):
    names = list(columns)
    cols = [np.asarray(columns[k], dtype=float) for k in names]
    k = cols[0].shape[0]
    with open(path, "w") as fh:
        if comment:
            fh.write(f"## {comment}\n")
        fh.write("# " + " ".join(names) + "\n")
        for r in range(k):
            fh.write(" ".join(repr(float(c[r])) for c in cols) + "\n")


def read_dat(path):
    with open(path) as fh:
        line = fh.readline()
        while line.startswith("##"):
            line = fh.readline()
    names = line[2:].split()
    arr = np.loadtxt(path, ndmin=2)
    return {n: arr[:, j] for j, n in enumerate(names)}


def gp_script(plot):
    """gnuplot script for one .dat file."""
    name = plot["name"]
    dat = os.path.basename(name) + ".dat"
    with_cols = []
    lines = [f"# config_hash {plot['config_hash']}"] if plot.get("config_hash") else []
    lines += [f"set title {json.dumps(plot['title'])}", f"set xlabel {json.dumps(plot['xlabel'])}",
             f"set ylabel {json.dumps(plot['ylabel'])}", "set key top right"]
    if plot.get("logscale"):
        lines.append(f"set logscale {plot['logscale']}")
    lines.append(f"set terminal pngcairo size 900,600\nset output '{os.path.basename(name)}.png'")
    for s in plot["series"]:
        cols = plot["columns"]
        with_cols.append(f"'{dat}' using {cols.index(s[0]) + 1}:{cols.index(s[1]) + 1} with lines title {json.dumps(s[2])}")
    lines.append("plot " + ", \\\n     ".join(with_cols))
    return "\n".join(lines) + "\n"


def render_plots(root, plots):
    for p in plots:
        with open(os.path.join(root, p["name"] + ".gp"), "w") as fh:
            fh.write(gp_script(p))


# ---------------------------------------------------------------- shared jobs


@dataclass(frozen=True)
class _TrajJob:
    kind: object
    schedule: object
    T: int
    seed: int
    replica: int
    probe_every: object
    keep_record: bool = False


def _example1_job(job):
    rng = dyn.replica_rng(job.seed, job.replica)
    ctx = losses.LossContext(job.kind)
    w0 = hn.init_weights(ctx.n_params, rng)
    rec = dyn.run_trajectory(w0, ctx, job.schedule, job.T, probe_every=job.probe_every)
    return rec if job.keep_record else (rec.w_norm, rec.eta, rec.probe_t, rec.probe_train, rec.clip_count)


def _curve_fit(t_all, y, lo, hi, k=60):
    ts = log_grid(max(lo, 1), min(hi, t_all[-1]), k)
    ys = y[ts]
    if np.any(ys <= 0):
        return None, ts
    return loglog_fit(ts, ys), ts


# ---------------------------------------------------------------- experiments


def exp_stepsize_order(cfg, archive, workers=None):
    T = int(cfg.grid.T[0])
    lo, hi = cfg.fit_range
    out = {"cells": []}
    for H in cfg.grid.H:
        kind = loss_kind(cfg, H)
        const = losses.example1_constants(kind.dim, kind.degree) if not kind.uses_network else None
        if const is None:
            raise ConfigError("stepsize_order runs on the example1 loss")
        for c2 in cfg.grid.c2:
            sched = schedule_spec(cfg.schedule, c2).bind_constants(H, const)
            jobs = [_TrajJob(kind, sched, T, cfg.seed, r, 0, r < cfg.write_trajectories) for r in range(cfg.grid.seeds)]
            res = parallel_map(_example1_job, jobs, workers)
            recs = [r for r in res if isinstance(r, dyn.TrajectoryRecord)]
            for k, rec in enumerate(recs):
                archive.add_csv_record(f"trajectories/stepsize_H{H:g}_c{c2:g}_seed{k}.csv", rec)
            wn = np.array([(r.w_norm if isinstance(r, dyn.TrajectoryRecord) else r[0]) for r in res])
            eta = np.array([(r.eta if isinstance(r, dyn.TrajectoryRecord) else r[1]) for r in res])
            clips = sum((r.clip_count if isinstance(r, dyn.TrajectoryRecord) else r[4]) for r in res)
            mean_sq = np.mean(wn**2, axis=0)
            mean_eta = np.mean(eta, axis=0)
            t = np.arange(T + 1)
            win = (t >= lo) & (t <= min(hi, T))
            norm_scaled = float(np.max(mean_sq[win] * (t[win] + 1))) if np.any(win) else math.nan
            fit_w, ts = _curve_fit(t, mean_sq, lo, hi)
            fit_e, _ = _curve_fit(t[:-1], mean_eta, lo, min(hi, T - 1))
            viol = 0
            for w_norm in wn:
                viol += len(dyn.check_norm_ratio(w_norm, const.sigma_bar_sq, const.sigma_lower_sq, c2))
            target_eta = (H - 4) / 2
            cell = {
                "H": H, "c2": c2, "T": T, "seeds": cfg.grid.seeds, "offset_U": sched.offset, "cap": sched.cap,
                "clip_events": int(clips),
                "max_mean_norm_sq_times_t1": norm_scaled,
                "norm_sq_slope": fit_w.to_dict() if fit_w else None, "norm_sq_target": -1.0,
                "eta_slope": fit_e.to_dict() if fit_e else None, "eta_target": target_eta,
                "eta_slope_within_0.1": bool(fit_e and abs(fit_e.slope - target_eta) <= 0.1),
                # |w_t|^2 ~ t^(-4 c2) once the sphere loss sits at its floor, so eta_t ~ t^(-1 + 2 c2 (H - 2))
                "norm_sq_slope_late": -4.0 * c2, "eta_slope_late": -1.0 + 2.0 * c2 * (H - 2.0),
                "norm_ratio_violations": viol,
                "norm_ratio_T0": 8 * c2 * const.sigma_bar_sq / const.sigma_lower_sq,
                "constants": const.to_dict(),
            }
            out["cells"].append(cell)
            archive.add_dat(f"curves/stepsize_H{H:g}_c{c2:g}",
                            {"t": ts, "mean_norm_sq": mean_sq[ts], "mean_eta": mean_eta[np.minimum(ts, T - 1)],
                             "inv_t1": 1.0 / (ts + 1)},
                            title=f"H={H:g}, c2={c2:g}", xlabel="t", ylabel="value",
                            series=[("t", "mean_norm_sq", "mean |w_t|^2"), ("t", "mean_eta", "mean eta_t"),
                                    ("t", "inv_t1", "1/(t+1)")])
    return out


def exp_separation(cfg, archive, workers=None):
    T = int(cfg.grid.T[0])
    lo, hi = cfg.fit_range
    kind = loss_kind(cfg)
    if kind.uses_network:
        raise ConfigError("separation runs on the example1 loss")
    const = losses.example1_constants(kind.dim, kind.degree)
    floor = const.sigma_lower_sq
    curves = {}
    first_steps = {}
    meta = {}
    for label, sd in (("harmonic", cfg.schedule), ("log_damped", cfg.compare_schedule)):
        sched = schedule_spec(sd, cfg.grid.c2[0]).bind_constants(kind.degree, const)
        jobs = [_TrajJob(kind, sched, T, cfg.seed, r, cfg.probe_every, False) for r in range(cfg.grid.seeds)]
        res = parallel_map(_example1_job, jobs, workers)
        probe_t = res[0][2]
        curves[label] = np.mean([r[3] for r in res], axis=0) - floor
        first_steps[label] = min(sched.effective_raw(0), sched.cap)
        meta[label] = sched.to_dict()
    t = probe_t
    sel = (t >= lo) & (t <= hi)
    fit = loglog_fit(t[sel], curves["harmonic"][sel]) if np.all(curves["harmonic"][sel] > 0) else None
    ratios = {}
    for tt in (1000, 10_000):
        if tt <= T:
            k = int(np.searchsorted(t, tt))
            ratios[str(tt)] = float(curves["log_damped"][k] / curves["harmonic"][k])
    bc = stab.BoundConstants(H=kind.degree, sigma_bar_sq=const.sigma_bar_sq, sigma_lower_sq=const.sigma_lower_sq,
                             L=const.lipschitz_L, beta=const.smooth_beta, mu=const.extras["mu"], B=const.extras["B"])
    try:
        rates = stab.separation_rates(bc, 1.0, T)
    except HomolensError as exc:
        rates = {"lambda": bc.lam, "unavailable": str(exc)}
    ts = log_grid(1, t[-1], 200)
    k = np.searchsorted(t, ts)
    archive.add_dat("curves/separation", {"t": t[k], "harmonic": curves["harmonic"][k],
                                          "log_damped": curves["log_damped"][k]},
                    title="excess sphere loss", xlabel="t", ylabel="excess",
                    series=[("t", "harmonic", "effective harmonic"), ("t", "log_damped", "effective log-damped")])
    return {
        "T": T, "seeds": cfg.grid.seeds, "schedules": meta,
        "first_effective_step": first_steps,
        "harmonic_fit": fit.to_dict() if fit else None,
        "harmonic_r2_at_least_0.95": bool(fit and fit.r2 >= 0.95),
        "excess_ratio_logdamped_over_harmonic": ratios,
        "final_excess": {k: float(v[-1]) for k, v in curves.items()},
        "rate_calculator": rates,
        "constants": const.to_dict(),
    }


def _bound_cells(est, H, n, T, c2, t0=0):
    bc = stab.BoundConstants.from_estimate(est, H, c2=c2, n=n, T=T, t0=t0)
    b31 = stab.bound_thm31(bc)
    b52 = stab.bound_thm52(bc)
    b52x = stab.bound_thm52_exact(bc)
    return bc, b31, b52, b52x


def exp_gap_scaling(cfg, archive, workers=None):
    kind = loss_kind(cfg)
    spec = build_network(cfg)
    task = task_of(cfg)
    est = constants_for(cfg, kind, spec)
    _require_positive_floor(cfg, est)
    c2 = cfg.grid.c2[0]
    sched = schedule_spec(cfg.schedule, c2).bind_constants(spec.degree, est)
    cells = []
    for ep in cfg.grid.epochs:
        for n in cfg.grid.n:
            T = int(ep * n)
            g = stab.empirical_gap(task, kind, spec, sched, n, T, cfg.grid.seeds, cfg.seed,
                                   cfg.heldout_factor * n, workers=workers)
            cell = {"n": n, "epochs": ep, "T": T, "gap": g.value, "gap_stderr": g.stderr,
                    "gap_raw": g.extras["raw"], "gap_raw_stderr": g.extras["raw_stderr"],
                    "gap_at_init": g.extras["gap0"], "gap_at_init_stderr": g.extras["gap0_stderr"]}
            if T > 0:
                bc, b31, b52, b52x = _bound_cells(est, spec.degree, n, T, c2)
                cell.update(bound31=b31.value, bound52=b52.value, bound52_exact=b52x.value,
                            validity_flags={"bound31": list(b31.violations), "bound52": list(b52.violations)},
                            m1=bc.m1, m2=bc.m2, m1p=bc.m1p, m2p=bc.m2p,
                            dominated=bool(g.value - 3 * g.stderr <= min(b31.value, b52.value)))
            cells.append(cell)
    fits = {}
    for ep in cfg.grid.epochs:
        if ep == 0:
            continue
        sub = [c for c in cells if c["epochs"] == ep]
        ns = np.array([c["n"] for c in sub], dtype=float)
        gs = np.array([c["gap"] for c in sub])
        se = np.array([c["gap_stderr"] for c in sub])
        if len(sub) >= 2 and np.all(gs > 0):
            f = loglog_fit(ns, gs, y_se=se)
            fits[str(ep)] = f.to_dict() | {"negative_excluding_0": bool(f.ci[1] < 0)}
        else:
            fits[str(ep)] = {"unavailable": "non-positive gap estimate in a cell" if len(sub) >= 2 else "one cell"}
        archive.add_dat(f"curves/gap_epochs{ep:g}", {"n": ns, "gap": gs, "stderr": se,
                                                      "bound31": [c.get("bound31", math.nan) for c in sub]},
                        title=f"gap at T = {ep:g} n", xlabel="n", ylabel="gap",
                        series=[("n", "gap", "empirical gap"), ("n", "bound31", "bound (Lipschitz)")])
    return {"network": spec.to_dict(), "loss": kind.to_dict(), "task": task.to_dict(), "schedule": sched.to_dict(),
            "constants": est.to_dict(), "k1": 1.0, "k2": 1.0, "cells": cells, "slope_fits": fits}


@dataclass(frozen=True)
class _CurveJob:
    task: object
    kind: object
    spec: object
    schedule: object
    n: int
    T: int
    heldout: int
    seed: int
    replica: int
    probe_every: object


def _curve_job(job):
    rng = dyn.replica_rng(job.seed, job.replica)
    S = job.task.sample(job.n, rng)
    Q = job.task.sample(job.heldout, rng)
    ctx = losses.LossContext(job.kind, job.spec, S)
    w0 = hn.init_weights(ctx.n_params, rng)
    rec = dyn.run_trajectory(w0, ctx, job.schedule, job.T, seed=int(rng.integers(2**63)),
                             probe_every=job.probe_every, test_ctx=ctx.with_dataset(Q))
    return rec


def exp_loss_curve(cfg, archive, workers=None):
    kind = loss_kind(cfg)
    spec = build_network(cfg)
    task = task_of(cfg)
    if task.noise_rate == 0.0:
        raise NonZeroBayesRequired("the task has no label noise, so the best sphere loss is 0")
    est = constants_for(cfg, kind, spec)
    _require_positive_floor(cfg, est)
    floor = est.sigma_lower_sq
    sched = schedule_spec(cfg.schedule, cfg.grid.c2[0]).bind_constants(spec.degree, est)
    n = int(cfg.grid.n[0])
    T = int(cfg.grid.epochs[0] * n)
    jobs = [_CurveJob(task, kind, spec, sched, n, T, cfg.heldout_factor * n, cfg.seed, r, cfg.probe_every)
            for r in range(cfg.grid.seeds)]
    recs = parallel_map(_curve_job, jobs, workers)
    for k, rec in enumerate(recs[: cfg.write_trajectories]):
        archive.add_csv_record(f"trajectories/loss_curve_seed{k}.csv", rec)
    pt = recs[0].probe_t
    train = np.array([r.probe_train for r in recs])
    test = np.array([r.probe_test for r in recs])
    mtrain, mtest = train.mean(axis=0), test.mean(axis=0)
    hit = dyn.detect_hitting_time(pt, mtrain, floor, cfg.tau, cfg.window)
    plateau = None
    if hit.reached:
        sel = (pt > hit.T_a) & (pt <= 4 * max(hit.T_a, 1))
        if np.any(sel):
            per = test[:, sel].mean(axis=1) - floor
            m, se = stab._mean_se(per)
            plateau = {"mean": m, "stderr": se, "window": [int(hit.T_a), int(4 * max(hit.T_a, 1))],
                       "probes": int(sel.sum()), "at_least_minus_3se": bool(m >= -3 * se)}
    fin = test[:, -1]
    fm, fse = stab._mean_se(fin)
    diag = stab.gap_lower_bound_diag(train[:, -1], floor)
    archive.add_dat("curves/loss_curve", {"t": pt, "train": mtrain, "test": mtest, "floor": np.full(pt.shape, floor)},
                    title="sphere loss", xlabel="t", ylabel="loss", logscale="x",
                    series=[("t", "train", "train"), ("t", "test", "held-out"), ("t", "floor", "sigma_lower^2")])
    return {"n": n, "T": T, "replicas": cfg.grid.seeds, "constants": est.to_dict(), "schedule": sched.to_dict(),
            "tau": cfg.tau, "window": cfg.window,
            "T_a": hit.T_a, "plateau_minus_floor": plateau,
            "final_test": {"mean": fm, "stderr": fse, "floor": floor, "at_least_floor_minus_3se": bool(fm >= floor - 3 * fse)},
            "gap_floor_flags": int(diag.flags.sum())}


def exp_identity_suite(cfg, archive, workers=None):
    res = verify.run_identity_suite(quick=cfg.quick, seed=cfg.seed)
    return {"checks": [r.to_dict() for r in res], "passed": verify.suite_passed(res)}


def exp_stability_sweep(cfg, archive, workers=None):
    kind = loss_kind(cfg)
    spec = build_network(cfg)
    task = task_of(cfg)
    est = constants_for(cfg, kind, spec)
    _require_positive_floor(cfg, est)
    c2 = cfg.grid.c2[0]
    sched = schedule_spec(cfg.schedule, c2).bind_constants(spec.degree, est)
    cells = []
    for n in cfg.grid.n:
        for ep in cfg.grid.epochs:
            T = int(ep * n)
            g = stab.empirical_gap(task, kind, spec, sched, n, T, cfg.grid.seeds, cfg.seed,
                                   cfg.heldout_factor * n, workers=workers)
            for t0 in cfg.grid.t0:
                if t0 > T:
                    continue
                e = stab.conditional_on_avg_stability(task, kind, spec, sched, n, T, t0, cfg.grid.seeds,
                                                      cfg.seed, workers=workers)
                bc, b31, b52, _ = _bound_cells(est, spec.degree, n, T, c2, t0)
                l51 = stab.bound_lemma51(bc, e.value)
                flags = sorted(set(b31.violations) | set(b52.violations) | set(l51.violations))
                cells.append({"n": n, "T": T, "t0": t0, "eps2_avg": e.value, "stderr": e.stderr,
                              "gap": g.value, "gap_stderr": g.stderr, "bound31": b31.value, "bound52": b52.value,
                              "bound_lemma51": l51.value, "zeta": l51.extras["zeta"], "validity_flags": flags})
    return {"constants": est.to_dict(), "schedule": sched.to_dict(), "cells": cells}


RUNNERS = {
    "stepsize_order": exp_stepsize_order,
    "separation": exp_separation,
    "gap_scaling": exp_gap_scaling,
    "loss_curve": exp_loss_curve,
    "identity_suite": exp_identity_suite,
    "stability_sweep": exp_stability_sweep,
}


def run_experiment(cfg, out_dir, workers=None):
    started = time.time()
    archive = Archive(out_dir, cfg)
    summary = RUNNERS[cfg.experiment](cfg, archive, workers)
    return archive.finish(summary, started)
