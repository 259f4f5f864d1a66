"""``fedgen`` command-line front end.

Every command resolves one flat config (defaults < preset < ``--config`` file
< flags), writes its CSV/JSON outputs into ``--out`` and a manifest next to
them.  Passing a manifest back through ``--config`` reruns the same command
with the same settings.
"""

from __future__ import annotations

import argparse
import csv
import json
import math
import os
import sys
import time

import numpy as np

from . import __version__
from . import analysis as an
from . import theory as th
from .config import ExperimentConfig, validate_spec
from .errors import FedGenError, InvalidConfig, RegimeGap
from .simulator import run_monte_carlo

EXIT_OK, EXIT_FAIL, EXIT_INPUT = 0, 1, 2

PRESETS = {
    "fig2": dict(m=3, p=200, s=5, T=10, regime="k1", n=50, alpha=0.05, sigma=0.7,
                 het_kind="stationary", het_norm=0.5, delta0_norm=1.0, trials=20),
    "fig3": dict(m=3, p=200, s=5, T=5, regime="kfinite", K=16, n=144, alpha=0.027, sigma=0.7,
                 het_kind="stationary", het_norm=0.5, delta0_norm=1.0, trials=20),
    "fig4": dict(m=3, p=200, s=5, T=40, regime="kinf", n=25, alpha=0.05, sigma=0.7,
                 het_kind="stationary", het_norm=0.5, delta0_norm=1.0, trials=20),
}

# flag name -> config key
OVERRIDES = {"m": "m", "p": "p", "s": "s", "t": "T", "regime": "regime", "K": "K", "n": "n",
             "alpha": "alpha", "sigma": "sigma", "het_kind": "het_kind", "het_norm": "het_norm",
             "delta0": "delta0_norm", "w_star_norm": "w_star_norm"}

# command options recorded in the manifest so a rerun reproduces them
COMMAND_OPTIONS = {
    "theory": ("verbose_coefficients",),
    "simulate": (),
    "compare": ("theory_sigma",),
    "sweep": ("axis", "values", "range"),
    "verify": ("suite",),
    "opt-k": ("mode", "k_max", "limit", "calibrate"),
}


# ---------------------------------------------------------------------------
# output helpers


def fmt(x) -> str:
    if x is None:
        return ""
    if isinstance(x, (bool, np.bool_)):
        return "true" if x else "false"
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    if isinstance(x, (float, np.floating)):
        return format(float(x), ".17g")
    return str(x)


def write_csv(path: str, columns: list[str], rows: list[dict]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for r in rows:
            w.writerow([fmt(r.get(c)) for c in columns])


def _json_safe(o):
    if isinstance(o, dict):
        return {k: _json_safe(v) for k, v in o.items()}
    if isinstance(o, (list, tuple)):
        return [_json_safe(v) for v in o]
    if isinstance(o, np.ndarray):
        return _json_safe(o.tolist())
    if isinstance(o, np.generic):
        o = o.item()
    if isinstance(o, float) and not math.isfinite(o):
        return None
    return o


def write_json(path: str, obj) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        json.dump(_json_safe(obj), fh, indent=2, sort_keys=True)
        fh.write("\n")


def fail_input(exc: BaseException) -> int:
    sys.stderr.write(json.dumps({"error": type(exc).__name__, "message": str(exc)}) + "\n")
    return EXIT_INPUT


# ---------------------------------------------------------------------------
# config resolution


def _load_config_file(path: str) -> tuple[dict, dict]:
    with open(path, encoding="utf-8") as fh:
        data = json.load(fh)
    if not isinstance(data, dict):
        raise InvalidConfig("config file must hold a JSON object")
    if "resolved_config" in data:
        return dict(data["resolved_config"]), dict(data.get("options", {}))
    return data, {}


def resolve(args) -> tuple[ExperimentConfig, dict]:
    d: dict = {}
    options: dict = {}
    if args.preset:
        d.update(PRESETS[args.preset])
    if args.config:
        fd, options = _load_config_file(args.config)
        d.update(fd)
    for flag, key in OVERRIDES.items():
        v = getattr(args, flag, None)
        if v is not None:
            d[key] = v
    if args.seed is not None:
        d["base_seed"] = args.seed
    if args.trials is not None:
        d["trials"] = args.trials
    if d.get("regime") != "kfinite" and "K" in d and args.K is None:
        d["K"] = None
    for k in COMMAND_OPTIONS[args.command]:
        if getattr(args, k, None) is None and k in options:
            setattr(args, k, options[k])
    cfg = ExperimentConfig.from_dict(d)
    return cfg, {k: getattr(args, k, None) for k in COMMAND_OPTIONS[args.command]}


def materialize(cfg: ExperimentConfig, for_theory: bool):
    spec, plan = cfg.materialize()
    bad = validate_spec(spec, plan, for_theory=for_theory)
    if bad:
        if any(b.startswith("RegimeGap") for b in bad):
            raise RegimeGap("; ".join(bad))
        raise InvalidConfig("violation: " + "; ".join(bad))
    return spec, plan


# ---------------------------------------------------------------------------
# commands


def cmd_theory(cfg, opts, out):
    spec, plan = materialize(cfg, for_theory=True)
    curve = th.theory_curve(spec, plan)
    cols = ["t", "regime", "expected_model_error"]
    rows = [{"t": t, "regime": curve.regime, "expected_model_error": v} for t, v in enumerate(curve.expected)]
    if opts.get("verbose_coefficients"):
        a, b = curve.coef_names
        cols += [a, b]
        for t in range(1, len(rows)):
            rows[t][a], rows[t][b] = curve.scale[t - 1], curve.offset[t - 1]
    path = os.path.join(out, "theory.csv")
    write_csv(path, cols, rows)
    return EXIT_OK, [path], {}


def cmd_simulate(cfg, opts, out, workers):
    if cfg.trials < 2:
        raise InvalidConfig("violation: trials ≥ 2")
    spec, plan = materialize(cfg, for_theory=False)
    sim = run_monte_carlo(spec, plan, cfg.trials, workers=workers)
    rows = [{"t": t, "mean_model_error": m, "stderr": s, "trials": sim.trials}
            for t, (m, s) in enumerate(zip(sim.mean, sim.stderr))]
    path = os.path.join(out, "simulate.csv")
    write_csv(path, ["t", "mean_model_error", "stderr", "trials"], rows)
    return EXIT_OK, [path], {}


def z_scores(theory: np.ndarray, mean: np.ndarray, stderr: np.ndarray) -> np.ndarray:
    diff = mean - theory
    with np.errstate(divide="ignore", invalid="ignore"):
        z = diff / stderr
    exact = stderr == 0
    z[exact & (diff == 0)] = 0.0
    z[exact & (diff != 0)] = np.copysign(np.inf, diff[exact & (diff != 0)])
    return z


def cmd_compare(cfg, opts, out, workers):
    if cfg.trials < 2:
        raise InvalidConfig("violation: trials ≥ 2")
    th_cfg = cfg if opts.get("theory_sigma") is None else cfg.replace(sigma=opts["theory_sigma"])
    spec_t, plan_t = materialize(th_cfg, for_theory=True)
    spec, plan = materialize(cfg, for_theory=False)
    curve = th.theory_curve(spec_t, plan_t)
    sim = run_monte_carlo(spec, plan, cfg.trials, workers=workers)
    z = z_scores(curve.expected, sim.mean, sim.stderr)
    rows = [{"t": t, "theory": curve.expected[t], "mc_mean": sim.mean[t], "mc_stderr": sim.stderr[t],
             "z_score": z[t]} for t in range(len(z))]
    path = os.path.join(out, "compare.csv")
    write_csv(path, ["t", "theory", "mc_mean", "mc_stderr", "z_score"], rows)
    max_z = float(np.max(np.abs(z)))
    summary = {"max_abs_z": max_z, "pass": bool(max_z <= 3.0), "trials": sim.trials,
               "regime": curve.regime}
    spath = os.path.join(out, "compare_summary.json")
    write_json(spath, summary)
    return EXIT_OK, [path, spath], summary


def parse_values(opts) -> list:
    if opts.get("values"):
        return [float(v) if "." in v or "e" in v.lower() else int(v) for v in opts["values"].split(",")]
    if opts.get("range"):
        parts = [int(x) for x in opts["range"].split(":")]
        if len(parts) not in (2, 3):
            raise InvalidConfig("--range takes START:STOP or START:STOP:STEP (inclusive)")
        step = parts[2] if len(parts) == 3 else 1
        if step < 1:
            raise InvalidConfig("--range step must be positive")
        return list(range(parts[0], parts[1] + 1, step))
    raise InvalidConfig("sweep needs --values or --range")


def cmd_sweep(cfg, opts, out):
    axis = opts["axis"]
    values = parse_values(opts)
    rows = []
    if axis == "t":
        if any(v < 0 for v in values):
            raise InvalidConfig("violation: t ≥ 0")
        spec, plan = materialize(cfg.replace(T=max(values)), for_theory=True)
        e = th.theory_curve(spec, plan).expected
        rows = [{"t": v, "expected_model_error": e[v], "skipped_reason": ""} for v in values]
        cols = ["t", "expected_model_error", "skipped_reason"]
    elif axis == "K":
        base = cfg.replace(regime="kfinite")
        for K in values:
            row = {"K": K, "expected_model_error": None, "skipped_reason": ""}
            try:
                spec, plan = materialize(base.replace(K=int(K)), for_theory=True)
                row["expected_model_error"] = th.theory_curve(spec, plan).expected[-1]
            except FedGenError as exc:
                row["skipped_reason"] = type(exc).__name__
            rows.append(row)
        cols = ["K", "expected_model_error", "skipped_reason"]
    elif axis == "p":
        for p in values:
            row = {"p": p, "regime": "", "expected_model_error": None, "skipped_reason": ""}
            try:
                spec, plan = materialize(cfg.replace(p=int(p), s=min(cfg.s, int(p))), for_theory=True)
                curve = th.theory_curve(spec, plan)
                row["regime"], row["expected_model_error"] = curve.regime, curve.expected[-1]
            except FedGenError as exc:
                row["skipped_reason"] = type(exc).__name__
            rows.append(row)
        cols = ["p", "regime", "expected_model_error", "skipped_reason"]
    elif axis == "m":
        for m in values:
            row = {"m": m, "k_opt": None, "expected_model_error": None, "skipped_reason": ""}
            try:
                c = cfg.replace(m=int(m), regime="kfinite", K=1)
                materialize(c, for_theory=True)
                row["k_opt"], row["expected_model_error"], _ = an.kopt_general(c)
            except FedGenError as exc:
                row["skipped_reason"] = type(exc).__name__
            rows.append(row)
        cols = ["m", "k_opt", "expected_model_error", "skipped_reason"]
    else:
        raise InvalidConfig(f"unknown sweep axis {axis!r}")
    path = os.path.join(out, f"sweep_{axis}.csv")
    write_csv(path, cols, rows)
    return EXIT_OK, [path], {}


def cmd_verify(cfg, opts, out, trials):
    suite = opts.get("suite") or "all"
    checks = []
    if suite in ("identities", "all"):
        checks += [{"kind": "identity", **c} for c in an.specialization_checks(seed=cfg.base_seed)]
    if suite in ("lemmas", "all"):
        for r in an.lemma_suite(trials=trials or 5000, seed=cfg.base_seed):
            checks.append({"kind": "lemma", "name": r.lemma_id, **r.to_dict()})
    report = {"suite": suite, "passed": all(c["passed"] for c in checks), "checks": checks}
    sys.stdout.write(json.dumps(_json_safe(report), sort_keys=True) + "\n")
    outputs = []
    if out is not None:
        path = os.path.join(out, "verify.json")
        write_json(path, report)
        outputs.append(path)
    return (EXIT_OK if report["passed"] else EXIT_FAIL), outputs, {"passed": report["passed"]}


def cmd_optk(cfg, opts, out):
    mode = opts.get("mode") or "general"
    summary: dict = {"mode": mode}
    if opts.get("calibrate") is not None:
        cal = an.calibrate_alpha(cfg.replace(regime="kfinite", K=1), int(opts["calibrate"]))
        summary["calibration"] = {"target": cal.target, "hit": cal.hit, "alpha": cal.alpha,
                                  "k_opt": cal.k_opt, "left": list(cal.left), "right": list(cal.right)}
        cfg = cfg.replace(alpha=cal.alpha)
    n = int(np.min(cfg.n))
    k_max = int(opts.get("k_max") or min(n, 512))
    if mode == "general":
        grid = np.arange(1, min(k_max, n) + 1)
        vals = an.kfinite_error_by_K(cfg.replace(regime="kfinite", K=1), grid)
        k = int(grid[an.argmin_smallest(vals)])
        summary.update(k_opt=k, finite_opt=bool(k < grid[-1]), alpha=cfg.alpha)
        rows = [{"K": K, "expected_model_error": v} for K, v in zip(grid, vals)]
        cols = ["K", "expected_model_error"]
    else:
        for name in ("alpha", "sigma"):
            if np.ndim(getattr(cfg, name)) != 0:
                raise InvalidConfig(f"{mode} mode needs a scalar {name}")
        t = None if opts.get("limit") else cfg.T
        rep = an.kopt_search(cfg.p, cfg.m, float(cfg.alpha), float(cfg.sigma), cfg.delta0_norm**2,
                             mode, n, k_max, t)
        summary.update(k_opt=rep.k_opt, finite_opt=rep.finite_opt, f_argmin=rep.f_argmin,
                       bracket=rep.bracket, bracket_contains=rep.bracket_contains)
        rows = [{"K": K, "expected_model_error": v} for K, v in zip(rep.grid, rep.values)]
        cols = ["K", "expected_model_error"]
        if rep.f_values is not None:
            for r, f in zip(rows, rep.f_values):
                r["f_K"] = f
            cols.append("f_K")
    path = os.path.join(out, "opt_k.csv")
    write_csv(path, cols, rows)
    spath = os.path.join(out, "opt_k_summary.json")
    write_json(spath, summary)
    return EXIT_OK, [path, spath], summary


# ---------------------------------------------------------------------------
# argument parsing


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON config or a manifest from an earlier run")
    common.add_argument("--preset", choices=sorted(PRESETS))
    common.add_argument("--seed", type=int)
    common.add_argument("--trials", type=int)
    common.add_argument("--out", help="output directory (default: current directory)")
    common.add_argument("--workers", type=int, default=1)
    common.add_argument("--m", type=int)
    common.add_argument("--p", type=int)
    common.add_argument("--s", type=int)
    common.add_argument("--t", type=int, help="number of rounds T")
    common.add_argument("--regime", choices=["k1", "kfinite", "kinf"])
    common.add_argument("--K", type=int)
    common.add_argument("--n", type=int)
    common.add_argument("--alpha", type=float)
    common.add_argument("--sigma", type=float)
    common.add_argument("--het-kind", dest="het_kind", choices=["zero", "stationary", "nonstationary"])
    common.add_argument("--het-norm", dest="het_norm", type=float)
    common.add_argument("--delta0", type=float)
    common.add_argument("--w-star-norm", dest="w_star_norm", type=float)
    common.add_argument("--inject-fault", dest="inject_fault", choices=["g_sign"], help=argparse.SUPPRESS)

    ap = argparse.ArgumentParser(prog="fedgen", description="FedAvg generalization: closed forms and Monte-Carlo checks")
    ap.add_argument("--version", action="version", version=f"fedgen {__version__}")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("theory", parents=[common], help="closed-form expected model error per round")
    p.add_argument("--verbose-coefficients", dest="verbose_coefficients", action="store_true", default=None)
    sub.add_parser("simulate", parents=[common], help="Monte-Carlo model error per round")
    p = sub.add_parser("compare", parents=[common], help="theory vs Monte-Carlo z-scores")
    p.add_argument("--theory-sigma", dest="theory_sigma", type=float,
                   help="noise level fed to the theory side only (negative control)")
    p = sub.add_parser("sweep", parents=[common], help="theory along one axis")
    p.add_argument("--axis", choices=["t", "K", "p", "m"])
    p.add_argument("--values", help="comma-separated axis values")
    p.add_argument("--range", help="inclusive START:STOP[:STEP]")
    p = sub.add_parser("verify", parents=[common], help="identity and random-matrix oracle checks")
    p.add_argument("suite", nargs="?", choices=["lemmas", "identities", "all"])
    p = sub.add_parser("opt-k", parents=[common], help="optimal number of local steps")
    p.add_argument("--mode", choices=["general", "fixed_batch", "fixed_total"])
    p.add_argument("--k-max", dest="k_max", type=int)
    p.add_argument("--limit", action="store_true", default=None, help="t -> inf limit (fixed_batch/fixed_total)")
    p.add_argument("--calibrate", type=int, metavar="K_TARGET",
                   help="first tune alpha so the general optimum equals K_TARGET")
    return ap


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    t0 = time.perf_counter()
    try:
        cfg, opts = resolve(args)
        if args.command == "sweep" and not opts.get("axis"):
            raise InvalidConfig("sweep needs --axis")
        out = args.out if args.out is not None else (None if args.command == "verify" else ".")
        if out is not None:
            os.makedirs(out, exist_ok=True)
        th.set_fault(args.inject_fault)
        if args.command == "theory":
            code, outputs, extra = cmd_theory(cfg, opts, out)
        elif args.command == "simulate":
            code, outputs, extra = cmd_simulate(cfg, opts, out, args.workers)
        elif args.command == "compare":
            code, outputs, extra = cmd_compare(cfg, opts, out, args.workers)
        elif args.command == "sweep":
            code, outputs, extra = cmd_sweep(cfg, opts, out)
        elif args.command == "verify":
            code, outputs, extra = cmd_verify(cfg, opts, out, args.trials)
        else:
            code, outputs, extra = cmd_optk(cfg, opts, out)
    except (FedGenError, OSError, json.JSONDecodeError, TypeError) as exc:
        return fail_input(exc)
    finally:
        th.set_fault(None)
    if out is not None:
        resolved = cfg.to_dict()
        manifest = {"command": args.command, "resolved_config": resolved, "options": opts,
                    "seed": resolved["base_seed"], "version": __version__,
                    "duration_s": time.perf_counter() - t0, "outputs": outputs,
                    "fingerprint": cfg.fingerprint(), **({"summary": extra} if extra else {})}
        write_json(os.path.join(out, f"{args.command.replace('-', '_')}_manifest.json"), manifest)
    return code


if __name__ == "__main__":
    sys.exit(main())
