#!/usr/bin/env python3
"""
gridscope CLI interface — simulate, sample, certify, fit and evaluate grid state tensors
"""

import argparse
import dataclasses
import json
import sys
from concurrent.futures import ThreadPoolExecutor, as_completed
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Tuple

import numpy as np
import pandas as pd
from tqdm import tqdm

from . import __version__
from .config import ExperimentConfig, apply_overrides, load_config, validate, write_config
from .core import (
    BANNER, FOOTER, GridScopeError, IdentifiabilityError, SolverError, atomic_write_text,
    check_environment, ensure_dir, is_quiet, log, print_environment_report, resolve_feeder_path,
    set_quiet,
)
from .cpd import FitOptions, masked_als_fit, rank_sweep, read_fit_record, reconstruct, write_fit_record
from .feeder import (
    ABS_V, PROFILE_MODES, FeederModel, StateTensorMeta, add_noise, build_state_tensor, generate_feeder,
    make_profiles, read_feeder, read_meta, read_records_csv, records_from_tensor, simulate,
    write_feeder, write_meta, write_records_csv, zero_injection_extras,
)
from .metrics import SCOPES, MetricsReport, aggregate, curve_frame, evaluate, metrics_table
from .sampling import (
    Scheme, SlabScheme, build_mask, check_scheme, min_slab_requirements, read_scheme,
    sampling_fraction, select_fiber_scheme, select_slab_scheme, write_scheme,
)
from .tensor import read_mask, read_tensor, write_mask, write_tensor

COMMANDS = ("simulate", "check", "sample", "fit", "evaluate", "sweep-rank", "run")
FAILURE_LIMIT = 0.2

# Artifact names inside the output directory
STATE_TXT = "state.txt"
STATE_NPY = "state.npy"
META = "meta.json"
RECORDS = "records.csv"
FEEDER = "feeder.txt"
SCHEME = "scheme.json"
MASK_NPY = "mask.npy"
MASK_TXT = "mask.txt"
OBSERVED = "observed.csv"
FIT = "fit.txt"
ESTIMATE = "estimate.npy"
IDENTIFIABILITY = "identifiability.json"


class _Parser(argparse.ArgumentParser):
    """Usage errors exit with 1, like every other configuration error."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _scheme_args(p: argparse.ArgumentParser):
    p.add_argument("--rank", type=int, default=None, help="CPD rank F (overrides fit.rank)")
    p.add_argument("--phases", type=int, default=None, help="Slab: sampled phases, slack included")
    p.add_argument("--steps", type=int, default=None, help="Slab: sampled time steps")
    p.add_argument("--power-rows", type=int, default=None, help="Fiber: power-pattern rows, slack included")


def parse_args(argv=None):
    fmt = argparse.ArgumentDefaultsHelpFormatter
    p = _Parser(
        prog="gridscope",
        description="gridscope — model-free distribution grid state estimation by low-rank "
                    "tensor completion with identifiability certificates",
        formatter_class=fmt,
    )
    p.add_argument("--config", default=None,
                   help="Experiment config: JSON file or bundled name (e.g. 'tiny', 'slab_consecutive')")
    p.add_argument("--seed", type=int, default=None, help="Base seed (overrides the config)")
    p.add_argument("--out", default=None, help="Output directory (overrides the config)")
    p.add_argument("--override-identifiability", action="store_true",
                   help="Fit schemes that fail certification instead of refusing")
    p.add_argument("--threads", type=int, default=None, help="Parallel Monte-Carlo workers")
    p.add_argument("--quiet", action="store_true", help="Suppress progress and log output")
    p.add_argument("--check-env", action="store_true", help="Check environment and exit")
    p.add_argument("--version", action="store_true", help="Print version banner and exit")
    sub = p.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)

    s = sub.add_parser("simulate", help="Solve the feeder over time and write the state tensor",
                       formatter_class=fmt)
    s.add_argument("--mode", choices=sorted(PROFILE_MODES), default=None, help="Profile mode")

    s = sub.add_parser("check", help="Certify a sampling scheme", formatter_class=fmt)
    _scheme_args(s)
    s.add_argument("--scheme", type=Path, default=None, help="Scheme JSON file instead of config sizes")
    s.add_argument("--minimal", action="store_true", help="Also report minimal slab (I_h, K_f) pairs")

    s = sub.add_parser("sample", help="Select a scheme and write mask and observed records",
                       formatter_class=fmt)
    _scheme_args(s)
    s.add_argument("--tensor", type=Path, default=None, help=f"State tensor (default <out>/{STATE_NPY})")
    s.add_argument("--meta", type=Path, default=None, help=f"Tensor meta (default <out>/{META})")
    s.add_argument("--noise", type=float, default=None, help="Noise percent (default: first config level)")
    s.add_argument("--run", type=int, default=0, help="Run index; the selection seed is seed + run")

    s = sub.add_parser("fit", help="Masked ALS fit of observed records", formatter_class=fmt)
    s.add_argument("--rank", type=int, default=None, help="CPD rank F (overrides fit.rank)")
    s.add_argument("--records", type=Path, default=None, help=f"Observed records (default <out>/{OBSERVED})")
    s.add_argument("--meta", type=Path, default=None, help=f"Tensor meta (default <out>/{META})")

    s = sub.add_parser("evaluate", help="Error metrics of an estimate", formatter_class=fmt)
    s.add_argument("--truth", type=Path, default=None, help=f"Ground truth (default <out>/{STATE_NPY})")
    s.add_argument("--estimate", type=Path, default=None, help=f"Estimate (default <out>/{ESTIMATE})")
    s.add_argument("--mask", type=Path, default=None, help=f"Observation mask (default <out>/{MASK_NPY})")
    s.add_argument("--meta", type=Path, default=None, help=f"Tensor meta (default <out>/{META})")
    s.add_argument("--fit", type=Path, default=None,
                   help=f"Fit record; its undetermined phases are excluded (default <out>/{FIT} if present)")
    s.add_argument("--scope", choices=SCOPES, default=None, help="Entries evaluated (default: config scope)")

    s = sub.add_parser("sweep-rank", help="Relative error of the best rank-k fit, k = 1..k_max",
                       formatter_class=fmt)
    s.add_argument("--k-max", type=int, default=None, help="Largest rank (overrides fit.k_max)")
    s.add_argument("--mode", choices=sorted(PROFILE_MODES) + ["both"], default=None,
                   help="Profile mode(s) (default: config mode)")

    sub.add_parser("run", help="Monte-Carlo experiment: metrics tables and curves", formatter_class=fmt)
    return p.parse_args(argv)


def resolve_config(args) -> ExperimentConfig:
    cfg = load_config(args.config) if args.config else ExperimentConfig()
    cfg = apply_overrides(cfg, args.seed, args.out, args.override_identifiability)
    if args.threads is not None:
        cfg = dataclasses.replace(cfg, threads=args.threads)
    scheme = {}
    if getattr(args, "phases", None) is not None:
        scheme.update(n_phases=args.phases, levels=(), horizontal=None, frontal=None)
    if getattr(args, "steps", None) is not None:
        scheme.update(n_steps=args.steps, levels=(), horizontal=None, frontal=None)
    if getattr(args, "power_rows", None) is not None:
        scheme.update(n_power_rows=args.power_rows, cases=())
    fit = {}
    if getattr(args, "rank", None) is not None:
        fit["rank"] = args.rank
    if getattr(args, "k_max", None) is not None:
        fit["k_max"] = args.k_max
    cfg = dataclasses.replace(cfg, scheme=dataclasses.replace(cfg.scheme, **scheme),
                              fit=dataclasses.replace(cfg.fit, **fit))
    return validate(cfg)


# ===== Pipeline pieces =====
def load_feeder(cfg: ExperimentConfig) -> FeederModel:
    if cfg.feeder.n_buses is not None:
        return generate_feeder(cfg.feeder.n_buses, cfg.feeder.generator_seed)
    return read_feeder(resolve_feeder_path(cfg.feeder.file))


def simulate_state(cfg: ExperimentConfig, mode: Optional[str] = None):
    feeder = load_feeder(cfg)
    profiles = make_profiles(feeder, mode or cfg.profile.mode, cfg.profile.n_steps,
                             cfg.profile.seed, cfg.profile.start_minute)
    X, meta = simulate(feeder, profiles)
    return feeder, X, meta


def fit_options(cfg: ExperimentConfig, seed: int) -> FitOptions:
    return FitOptions(max_sweeps=cfg.fit.max_sweeps, rel_tol=cfg.fit.rel_tol,
                      restarts=cfg.fit.restarts, seed=seed, column_scaling=cfg.fit.column_scaling)


def scenario_sizes(cfg: ExperimentConfig) -> List:
    """One entry per sampling level: (n_phases, n_steps) for slab, n_power_rows for fiber,
    ``None`` for explicit slab sets."""
    s = cfg.scheme
    if s.kind == "fiber":
        return list(s.cases) or [s.n_power_rows]
    if s.horizontal is not None or s.frontal is not None:
        return [None]
    return [tuple(level) for level in s.levels] or [(s.n_phases, s.n_steps)]


def size_label(cfg: ExperimentConfig, size) -> str:
    if cfg.scheme.kind == "fiber":
        return f"fiber rows={size}"
    if size is None:
        return "slab explicit"
    return f"slab Ih={size[0]} Kf={size[1]}"


def select_scheme(cfg: ExperimentConfig, meta: StateTensorMeta, size, rng: np.random.Generator) -> Scheme:
    s = cfg.scheme
    if s.kind == "fiber":
        return select_fiber_scheme(meta, size, rng)
    vertical = frozenset(j - 1 for j in s.vertical)
    if size is None:
        return SlabScheme(meta.dims, frozenset(i - 1 for i in s.horizontal or ()),
                          frozenset(k - 1 for k in s.frontal or ()), vertical)
    scheme = select_slab_scheme(meta, size[0], size[1], rng)
    return dataclasses.replace(scheme, vertical_set=vertical) if vertical else scheme


def certify(cfg: ExperimentConfig, schemes: Dict[str, Scheme], out: Path, refuse: bool):
    """Check every scheme, write the reports and refuse violations unless overridden."""
    reports = {}
    for label, scheme in schemes.items():
        rep = check_scheme(scheme, cfg.fit.rank)
        log(f"[Check] {label}")
        log(rep.to_text())
        reports[label] = rep
    atomic_write_text(out / IDENTIFIABILITY, json.dumps(
        [{"scenario": label, **rep.to_dict()} for label, rep in reports.items()], indent=2) + "\n")
    failed = [label for label, rep in reports.items() if not rep.satisfied]
    if failed and refuse:
        first = reports[failed[0]]
        raise IdentifiabilityError(f"{failed[0]}: identifiability fails ({first.which_condition})", first)
    for label in failed:
        log(f"[Warn] {label}: not certified; continuing because of --override-identifiability")
    return reports


def _out(cfg: ExperimentConfig) -> Path:
    out = Path(cfg.out)
    ensure_dir(out)
    return out


def _artifact(path: Optional[Path], out: Path, name: str) -> Path:
    return path if path is not None else out / name


# ===== Monte-Carlo runs =====
@dataclass
class RunOutcome:
    run: int
    seed: int
    report: Optional[MetricsReport]
    measurement_percentage: float
    converged: bool = False
    sweeps_used: int = 0
    message: str = ""


def run_once(cfg: ExperimentConfig, X: np.ndarray, meta: StateTensorMeta, size, noise: float,
             run: int) -> RunOutcome:
    seed = cfg.seed + run
    scheme = select_scheme(cfg, meta, size, np.random.default_rng(seed))
    M = build_mask(scheme)
    extras = zero_injection_extras(meta)
    observed = np.where(extras, 0.0, add_noise(X, M, noise, seed))
    M_fit = M | extras
    pct = sampling_fraction(M, extras)
    try:
        res = masked_als_fit(observed, M_fit, cfg.fit.rank, fit_options(cfg, seed))
        Xhat = reconstruct(res.factors)
    except (SolverError, ValueError, np.linalg.LinAlgError) as e:
        return RunOutcome(run, seed, None, pct, message=str(e))
    if not np.all(np.isfinite(Xhat)):
        return RunOutcome(run, seed, None, pct, res.converged, res.sweeps_used, "non-finite estimate")
    if not res.converged:
        return RunOutcome(run, seed, None, pct, False, res.sweeps_used,
                          f"did not converge in {res.sweeps_used} sweeps")
    report = evaluate(X, Xhat, M_fit, meta, cfg.scope, exclude_phases=res.undetermined["A"])
    return RunOutcome(run, seed, report, pct, True, res.sweeps_used)


def run_scenario(cfg: ExperimentConfig, X: np.ndarray, meta: StateTensorMeta, size, noise: float,
                 label: str) -> Tuple[MetricsReport, List[RunOutcome]]:
    outcomes: List[RunOutcome] = []
    with ThreadPoolExecutor(max_workers=max(1, int(cfg.threads))) as ex:
        fut2run = {ex.submit(run_once, cfg, X, meta, size, noise, r): r for r in range(cfg.runs)}
        for fut in tqdm(as_completed(fut2run), total=len(fut2run), desc=label, leave=False,
                        disable=True if is_quiet() else None):
            outcomes.append(fut.result())
    outcomes.sort(key=lambda o: o.run)

    failed = [o for o in outcomes if o.report is None]
    if failed:
        stalled = sum(1 for o in failed if o.message.startswith("did not converge"))
        log(f"[Warn] {label}: {len(failed)}/{cfg.runs} runs failed and are excluded, "
            f"{stalled} of them without convergence (first: run {failed[0].run}: {failed[0].message})")
    if len(failed) > FAILURE_LIMIT * cfg.runs:
        raise SolverError(f"{label}: {len(failed)} of {cfg.runs} runs failed; "
                          f"more than {FAILURE_LIMIT:.0%} makes the average meaningless "
                          f"(first: run {failed[0].run}: {failed[0].message})")
    return aggregate([o.report for o in outcomes if o.report is not None]), outcomes


# ===== Commands =====
def cmd_simulate(cfg: ExperimentConfig, args) -> int:
    out = _out(cfg)
    feeder, X, meta = simulate_state(cfg, args.mode)
    log(f"[Run] {feeder.name}: {meta.n_phases} phases x {len(meta.measurement_axis)} measurements "
        f"x {meta.n_steps} steps ({args.mode or cfg.profile.mode}, {meta.spacing_min}-minute spacing)")
    write_feeder(feeder, out / FEEDER)
    write_tensor(X, out / STATE_TXT)
    write_tensor(X, out / STATE_NPY)
    write_meta(meta, out / META)
    write_records_csv(records_from_tensor(X, meta), out / RECORDS)
    log(f"[Done] min |V| = {X[:, ABS_V, :].min():.4f} pu; {sum(meta.zero_injection)} zero-injection phases")
    return 0


def cmd_check(cfg: ExperimentConfig, args) -> int:
    out = _out(cfg)
    if args.scheme is not None:
        scheme = read_scheme(args.scheme)
        schemes = {args.scheme.name: scheme}
        dims = scheme.dims
    else:
        _, _, meta = simulate_state(cfg)
        schemes = {size_label(cfg, size): select_scheme(cfg, meta, size, np.random.default_rng(cfg.seed))
                   for size in scenario_sizes(cfg)}
        dims = meta.dims
    if args.minimal:
        req = min_slab_requirements(*dims, cfg.fit.rank)
        if req.feasible:
            pairs = ", ".join(f"({ih}, {kf})" for ih, kf in req.minimal_pairs)
            log(f"[Check] minimal slab (I_h, K_f) pairs for dims {dims}, F = {cfg.fit.rank}: {pairs}")
        else:
            log(f"[Check] no slab scheme certifies F = {cfg.fit.rank}: {req.reason}")
    certify(cfg, schemes, out, refuse=True)
    return 0


def cmd_sample(cfg: ExperimentConfig, args) -> int:
    out = _out(cfg)
    X = read_tensor(_artifact(args.tensor, out, STATE_NPY))
    meta = read_meta(_artifact(args.meta, out, META))
    if X.shape != meta.dims:
        raise ValueError(f"tensor dims {X.shape} do not match meta dims {meta.dims}")
    size = scenario_sizes(cfg)[0]
    seed = cfg.seed + args.run
    scheme = select_scheme(cfg, meta, size, np.random.default_rng(seed))
    certify(cfg, {size_label(cfg, size): scheme}, out, refuse=not cfg.override_identifiability)
    M = build_mask(scheme)
    noise = cfg.noise_percent[0] if args.noise is None else args.noise
    observed = add_noise(X, M, noise, seed)
    write_scheme(scheme, out / SCHEME)
    write_mask(M, out / MASK_NPY)
    write_mask(M, out / MASK_TXT)
    write_records_csv(records_from_tensor(observed, meta, M), out / OBSERVED)
    pct = sampling_fraction(M, zero_injection_extras(meta))
    log(f"[Done] {int(M.sum())} entries observed ({pct:.3f} % with zero-injection entries), "
        f"noise {noise:g} %")
    return 0


def cmd_fit(cfg: ExperimentConfig, args) -> int:
    out = _out(cfg)
    meta = read_meta(_artifact(args.meta, out, META))
    X, M = build_state_tensor(read_records_csv(_artifact(args.records, out, OBSERVED)), meta)
    extras = zero_injection_extras(meta)
    X = np.where(extras, 0.0, X)
    M = M | extras
    log(f"[Run] masked ALS, F = {cfg.fit.rank}, {int(M.sum())} of {M.size} entries known")
    res = masked_als_fit(X, M, cfg.fit.rank, fit_options(cfg, cfg.seed))
    write_fit_record(res, out / FIT)
    write_tensor(reconstruct(res.factors), out / ESTIMATE)
    for mode, rows in res.undetermined.items():
        if rows:
            log(f"[Warn] factor {mode}: {len(rows)} rows have no observation and are undetermined")
    if not res.converged:
        log(f"[Warn] fit did not converge in {res.sweeps_used} sweeps; the estimate is unreliable")
    log(f"[Done] objective {res.objective:.6g} after {res.sweeps_used} sweeps "
        f"(restart {res.restart_index}, converged={res.converged})")
    return 0


def cmd_evaluate(cfg: ExperimentConfig, args) -> int:
    out = _out(cfg)
    truth = read_tensor(_artifact(args.truth, out, STATE_NPY))
    estimate = read_tensor(_artifact(args.estimate, out, ESTIMATE))
    meta = read_meta(_artifact(args.meta, out, META))
    M = read_mask(_artifact(args.mask, out, MASK_NPY))
    M = M | zero_injection_extras(meta)
    fit_path = args.fit if args.fit is not None else out / FIT
    exclude = read_fit_record(fit_path).undetermined["A"] if fit_path.exists() else []
    report = evaluate(truth, estimate, M, meta, args.scope or cfg.scope, exclude_phases=exclude)
    log(metrics_table({"estimate": aggregate([report])}))
    atomic_write_text(out / "metrics.json", json.dumps(report.to_dict(), indent=2) + "\n")
    return 0


def cmd_sweep_rank(cfg: ExperimentConfig, args) -> int:
    out = _out(cfg)
    mode = args.mode or cfg.profile.mode
    modes = sorted(PROFILE_MODES) if mode == "both" else [mode]
    rows = []
    for m in modes:
        _, X, _ = simulate_state(cfg, m)
        log(f"[Run] rank sweep k = 1..{cfg.fit.k_max} on the {m} tensor")
        # the curve is the error of the unweighted best fit
        opts = fit_options(cfg, cfg.seed).replace(column_scaling=False)
        for k, err in rank_sweep(X, cfg.fit.k_max, opts, progress=not is_quiet()):
            rows.append({"mode": m, "k": k, "relative_error": err})
            log(f"  {m:14s} k={k:<3d} {err:.6e}")
    frame = pd.DataFrame(rows, columns=["mode", "k", "relative_error"])
    atomic_write_text(out / "rank_sweep.csv", frame.to_csv(index=False, float_format="%.17g"))
    log(f"[Done] Wrote {out / 'rank_sweep.csv'}")
    return 0


def cmd_run(cfg: ExperimentConfig, args) -> int:
    out = _out(cfg)
    write_config(cfg, out / "config.json")
    _, X, meta = simulate_state(cfg)
    log(f"[Run] {cfg.name}: dims {meta.dims}, F = {cfg.fit.rank}, {cfg.runs} runs per scenario")

    sizes = scenario_sizes(cfg)
    schemes = {size_label(cfg, s): select_scheme(cfg, meta, s, np.random.default_rng(cfg.seed)) for s in sizes}
    certify(cfg, schemes, out, refuse=not cfg.override_identifiability)

    table: Dict[str, object] = {}
    records: List[Dict] = []
    points: List[Dict] = []
    run_rows: List[Dict] = []
    failures: Dict[str, int] = {}
    for size in sizes:
        for noise in cfg.noise_percent:
            label = f"{size_label(cfg, size)} noise={noise:g}%"
            agg, outcomes = run_scenario(cfg, X, meta, size, noise, label)
            pct = outcomes[0].measurement_percentage
            table[label] = agg
            failures[label] = sum(1 for o in outcomes if o.report is None)
            records.append({"scenario": label, "measurement_percentage": pct, "noise_percent": noise,
                            "failed_runs": failures[label], **agg.to_dict()})
            points.append({"scenario": f"{cfg.scheme.kind}_{cfg.profile.mode}_noise{noise:g}",
                           "measurement_percentage": pct, "report": agg})
            for o in outcomes:
                values = o.report.values() if o.report is not None else dict.fromkeys(agg.std)
                run_rows.append({"scenario": label, "run": o.run, "seed": o.seed,
                                 "status": "ok" if o.report is not None else "failed",
                                 "converged": int(o.converged), "sweeps_used": o.sweeps_used,
                                 "measurement_percentage": o.measurement_percentage, **values,
                                 "message": o.message})

    atomic_write_text(out / "metrics_table.txt", metrics_table(table))
    atomic_write_text(out / "metrics.json", json.dumps(records, indent=2) + "\n")
    atomic_write_text(out / "curves.csv", curve_frame(points).to_csv(index=False, float_format="%.17g"))
    atomic_write_text(out / "runs.csv", pd.DataFrame(run_rows).to_csv(index=False, float_format="%.17g"))
    meta_out = {
        "version": __version__,
        "config": cfg.name,
        "seed": cfg.seed,
        "runs": cfg.runs,
        "rank": cfg.fit.rank,
        "profile_mode": cfg.profile.mode,
        "dims": list(meta.dims),
        "scenarios": list(table),
        "failed_runs": failures,
        "override_identifiability": cfg.override_identifiability,
        "outdir": str(cfg.out),
    }
    atomic_write_text(out / "run_meta.json", json.dumps(meta_out, indent=2) + "\n")

    log(metrics_table(table))
    log(f"[Done] Wrote:\n  - {out / 'metrics_table.txt'}\n  - {out / 'metrics.json'}\n"
        f"  - {out / 'curves.csv'}\n  - {out / 'runs.csv'}\n  - {out / IDENTIFIABILITY}")
    return 0


HANDLERS = {
    "simulate": cmd_simulate,
    "check": cmd_check,
    "sample": cmd_sample,
    "fit": cmd_fit,
    "evaluate": cmd_evaluate,
    "sweep-rank": cmd_sweep_rank,
    "run": cmd_run,
}


def main(argv=None) -> int:
    args = parse_args(argv)
    set_quiet(args.quiet)
    if args.version:
        print(BANNER)
        return 0

    log(BANNER)
    if args.check_env:
        print_environment_report(check_environment())
        return 0
    if not args.command:
        print(f"[Error] No command given. Use one of: {', '.join(COMMANDS)}.", file=sys.stderr)
        return 1

    try:
        cfg = resolve_config(args)
        code = HANDLERS[args.command](cfg, args)
    except GridScopeError as e:
        print(f"[Error] {e}", file=sys.stderr)
        return e.exit_code
    except ValueError as e:
        print(f"[Error] {e}", file=sys.stderr)
        return 1
    except KeyboardInterrupt:
        print("Interrupted.", file=sys.stderr)
        return 130
    log(FOOTER)
    return code


if __name__ == "__main__":
    sys.exit(main())
