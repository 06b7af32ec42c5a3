"""homolens command line: run / verify / bounds / report."""
from __future__ import annotations

import argparse
import json
import math
import os
import sys

import numpy as np

from . import experiments as ex
from . import stability as stab
from . import verify
from .errors import ConfigError, HomolensError, InvalidConstants, InvalidSpec
from .parallel import resolve_workers

EXIT_OK, EXIT_VERIFY, EXIT_CONFIG, EXIT_RUNTIME = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def _err(kind, message, code):
    sys.stderr.write(json.dumps({"error": kind, "message": message, "exit_code": code}) + "\n")
    return code


def build_parser():
    p = _Parser(prog="homolens", description="Homogeneous-network SGD and stability lab.")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)
    sub.required = True

    r = sub.add_parser("run", help="execute an experiment config")
    r.add_argument("config_path", nargs="?")
    r.add_argument("--config", dest="config_opt")
    r.add_argument("--out", default=None)
    r.add_argument("--seed", type=int, default=None)
    r.add_argument("--workers", type=int, default=None)
    r.add_argument("--quick", action="store_true")

    v = sub.add_parser("verify", help="identity suite; exit 1 on any violation")
    v.add_argument("--quick", action="store_true")
    v.add_argument("--seed", type=int, default=0)
    v.add_argument("--workers", type=int, default=None)
    v.add_argument("--mutation", choices=list(ex.dyn.MUTATIONS), default=None,
                   help="corrupt the update rule (negative control)")
    v.add_argument("--json", action="store_true")

    b = sub.add_parser("bounds", help="evaluate the bound calculators on a constants file")
    b.add_argument("config_path", nargs="?")
    b.add_argument("--config", dest="config_opt")
    b.add_argument("--json", action="store_true")

    rep = sub.add_parser("report", help="summary tables and gnuplot scripts from a run directory")
    rep.add_argument("archive", nargs="?")
    rep.add_argument("--out", dest="out_opt")
    return p


def _path(args):
    path = args.config_opt or args.config_path
    if not path:
        raise ConfigError("a config path is required (positional or --config)")
    return path


def cmd_run(args):
    cfg = ex.load_config(_path(args), quick=args.quick, seed=args.seed)
    out = args.out or os.path.join("runs", f"{cfg.experiment}-{cfg.config_hash}")
    summary = ex.run_experiment(cfg, out, resolve_workers(args.workers))
    print(f"{cfg.experiment} -> {out} (config {cfg.config_hash})")
    for line in summary_lines(summary):
        print(line)
    if cfg.experiment == "identity_suite" and not summary["passed"]:
        return EXIT_VERIFY
    return EXIT_OK


def cmd_verify(args):
    res = verify.run_identity_suite(quick=args.quick, seed=args.seed, mutation=args.mutation)
    for r in res:
        print(r.line())
    ok = verify.suite_passed(res)
    if args.json:
        print(json.dumps({"passed": ok, "checks": [r.to_dict() for r in res]}, sort_keys=True, default=float))
    print("verify:", "OK" if ok else "FAILED")
    return EXIT_OK if ok else EXIT_VERIFY


def _fmt(x):
    return f"{x:.10g}" if isinstance(x, float) else str(x)


def evaluate_bounds(raw):
    """All calculators for a constants object; optional keys eps2, etas / eta_schedule, rate_c."""
    raw = dict(raw)
    eps2 = raw.pop("eps2", None)
    etas = raw.pop("etas", None)
    eta_sched = raw.pop("eta_schedule", None)
    rate_c = raw.pop("rate_c", None)
    c = stab.BoundConstants.from_dict(raw)
    out = {"m1": c.m1, "m2": c.m2, "m1p": c.m1p, "m2p": c.m2p}
    b31 = stab.bound_thm31(c)
    out["bound31"] = {"value": b31.value, "valid": b31.valid, "violations": list(b31.violations)}
    b52 = stab.bound_thm52(c)
    out["bound52"] = {"value": b52.value, "valid": b52.valid, "violations": list(b52.violations),
                      "t0": b52.extras["t0"], "zeta": b52.extras["zeta"]}
    b52x = stab.bound_thm52_exact(c)
    out["bound52_exact"] = {"value": b52x.value, "t0": b52x.extras["t0"], "zeta": b52x.extras["zeta"]}
    if eps2 is not None:
        l51 = stab.bound_lemma51(c, float(eps2))
        out["lemma51"] = {"value": l51.value, "zeta": l51.extras["zeta"], "valid": l51.valid}
    if eta_sched is not None:
        t = np.arange(1, c.T + 1)
        etas = eta_sched["c"] * t ** eta_sched.get("exponent", -1.0)
    if etas is not None:
        cb = stab.classic_bounds(c, etas)
        out["classic"] = {k: {"value": v.value, "valid": v.valid, "violations": list(v.violations)} for k, v in cb.items()}
    if c.mu is not None and c.B is not None:
        out["lambda"] = c.lam
        if rate_c is not None:
            try:
                out["separation_rates"] = stab.separation_rates(c, float(rate_c), c.T)
            except InvalidConstants as exc:
                out["separation_rates"] = {"unavailable": str(exc)}
    return out


def cmd_bounds(args):
    path = _path(args)
    try:
        with open(path) as fh:
            raw = json.load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path} is not valid JSON: {exc}") from exc
    out = evaluate_bounds(raw)
    if args.json:
        print(json.dumps(ex._jsonable(out), sort_keys=True, indent=1))
        return EXIT_OK
    for k, v in out.items():
        if isinstance(v, dict) and all(isinstance(b, dict) for b in v.values()):
            for a, b in v.items():
                print(f"{k}.{a}: " + ", ".join(f"{x}={_fmt(y)}" for x, y in b.items()))
        elif isinstance(v, dict):
            print(f"{k}: " + ", ".join(f"{a}={_fmt(b)}" for a, b in v.items()))
        else:
            print(f"{k} = {_fmt(v)}")
    return EXIT_OK


def summary_lines(s):
    exp = s.get("experiment")
    lines = []
    if exp == "stepsize_order":
        lines.append("H     c2   max E|w|^2(t+1)   slope(|w|^2)   slope(eta)  target   ratio-viol")
        for c in s["cells"]:
            fw, fe = c["norm_sq_slope"], c["eta_slope"]
            lines.append(f"{c['H']:<5g} {c['c2']:<4g} {c['max_mean_norm_sq_times_t1']:<17.4g} "
                         f"{(fw or {}).get('slope', math.nan):<14.4g} {(fe or {}).get('slope', math.nan):<11.4g} "
                         f"{c['eta_target']:<8g} {c['norm_ratio_violations']}")
    elif exp == "separation":
        f = s["harmonic_fit"] or {}
        lines.append(f"harmonic excess fit: slope {f.get('slope', math.nan):.4g}, R^2 {f.get('r2', math.nan):.5f}")
        for k, v in s["excess_ratio_logdamped_over_harmonic"].items():
            lines.append(f"excess ratio log-damped/harmonic at T={k}: {v:.4g}")
    elif exp in ("gap_scaling", "stability_sweep"):
        keys = ["n", "T", "gap", "gap_stderr", "bound31", "bound52"]
        if exp == "stability_sweep":
            keys = ["n", "T", "t0", "eps2_avg", "stderr", "gap", "gap_stderr", "bound31", "bound52", "bound_lemma51"]
        lines.append("  ".join(f"{k:>12}" for k in keys) + "  flags")
        for c in s["cells"]:
            flags = c.get("validity_flags", [])
            if isinstance(flags, dict):
                flags = sorted({x for v in flags.values() for x in v})
            lines.append("  ".join(f"{_fmt(c.get(k, math.nan)):>12}" for k in keys) + "  " + (",".join(flags) or "-"))
        for ep, f in s.get("slope_fits", {}).items():
            if "slope" in f:
                lines.append(f"epochs {ep}: slope {f['slope']:.3f}  95% CI [{f['ci'][0]:.3f}, {f['ci'][1]:.3f}]")
            else:
                lines.append(f"epochs {ep}: {f['unavailable']}")
    elif exp == "loss_curve":
        lines.append(f"T_a = {s['T_a']}, floor = {s['final_test']['floor']:.6g}")
        p = s["plateau_minus_floor"]
        if p:
            lines.append(f"plateau test loss - floor: {p['mean']:.4g} +- {p['stderr']:.2g}")
        lines.append(f"final test loss: {s['final_test']['mean']:.6g} +- {s['final_test']['stderr']:.2g}")
    elif exp == "identity_suite":
        for c in s["checks"]:
            lines.append(f"{'PASS' if c['passed'] else 'FAIL'} {c['name']}: {c['value']:.3e}")
    return lines


def cmd_report(args):
    root = args.out_opt or args.archive
    if not root:
        raise ConfigError("report needs a run directory")
    path = os.path.join(root, "summary.json")
    try:
        with open(path) as fh:
            summary = json.load(fh)
    except OSError as exc:
        raise ConfigError(f"no summary.json in {root}: {exc}") from exc
    ex.render_plots(root, summary.get("plots", []))
    print(f"{summary.get('experiment')} (config {summary.get('config_hash')})")
    for line in summary_lines(summary):
        print(line)
    for p in summary.get("plots", []):
        print(f"plot: {p['name']}.gp <- {p['name']}.dat")
    return EXIT_OK


COMMANDS = {"run": cmd_run, "verify": cmd_verify, "bounds": cmd_bounds, "report": cmd_report}


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        return _err("usage", str(exc), EXIT_CONFIG)
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    try:
        return COMMANDS[args.command](args)
    except (ConfigError, InvalidSpec, InvalidConstants) as exc:
        return _err(type(exc).__name__, str(exc), EXIT_CONFIG)
    except (HomolensError, FloatingPointError, ArithmeticError, ValueError) as exc:
        return _err(type(exc).__name__, str(exc), EXIT_RUNTIME)


if __name__ == "__main__":
    sys.exit(main())
