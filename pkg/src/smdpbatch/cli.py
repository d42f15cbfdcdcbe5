"""Command-line driver: ``smdpbatch {solve,sweep,compare,qlearn,truncation-study} CONFIG``.

Every command reads one JSON config, writes CSV/JSON files into
``--out-dir`` and stamps each CSV with the SHA-256 of the effective config.
Exit codes: 0 success, 1 config or stability error, 2 unacceptable
approximation (or a benchmark beating the optimised policy).
"""
from __future__ import annotations

import argparse
import csv
import hashlib
import io
import json
import logging
import math
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import qlearn as ql
from ._validation import exactly_one
from .discretize import DEFAULT_ETA_FRACTION, to_dtmdp
from .exceptions import BatchingError, ConfigError, ExhaustionError, InstabilityError, StabilityError
from .model import TruncationConfig, build_truncated
from .policies import chart_rows, detect_control_limit, make_static, make_work_conserving, save_policy
from .profile import Weights, Workload, load_profile, traffic_intensity
from .simulator import simulate, weighted_cost_interval
from .solver import evaluate_policy, find_min_smax, relative_value_iteration

log = logging.getLogger("smdpbatch")

EXIT_OK, EXIT_CONFIG, EXIT_UNACCEPTABLE = 0, 1, 2

SOLVER_DEFAULTS = {"epsilon": 0.01, "iter_max": 10_000, "eta_fraction": DEFAULT_ETA_FRACTION, "delta": 1e-3}


# --------------------------------------------------------------------------- config

def load_config(path, overrides=()) -> dict:
    """Read a JSON config and apply ``key.sub=value`` overrides (values parsed as JSON)."""
    path = Path(path)
    try:
        config = json.loads(path.read_text())
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config {path} is not valid JSON: {exc}") from exc
    if not isinstance(config, dict):
        raise ConfigError("config must be a JSON object")
    for item in overrides:
        key, sep, raw = item.partition("=")
        if not sep:
            raise ConfigError(f"override {item!r} must look like key=value")
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
        node = config
        parts = key.split(".")
        for part in parts[:-1]:
            node = node.setdefault(part, {})
        node[parts[-1]] = value
    profile = config.get("profile", "googlenet-p4")
    if isinstance(profile, str) and not Path(profile).is_absolute() and (path.parent / profile).exists():
        config["profile"] = str((path.parent / profile).resolve())
    return config


def config_hash(config: dict) -> str:
    return hashlib.sha256(json.dumps(config, sort_keys=True, separators=(",", ":")).encode()).hexdigest()


def _profile(config):
    return load_profile(config.get("profile", "googlenet-p4"))


def _workload(profile, config) -> Workload:
    key = exactly_one(config, ("rho", "lambda"))
    if key == "rho":
        return Workload.from_rho(profile, float(config["rho"]))
    return Workload(float(config["lambda"]))


def _weights(config) -> Weights:
    w = config.get("weights", {})
    return Weights(float(w.get("w1", 1.0)), float(w.get("w2", 0.0)))


def _solver(config) -> dict:
    out = dict(SOLVER_DEFAULTS)
    out.update(config.get("solver", {}))
    unknown = set(out) - set(SOLVER_DEFAULTS)
    if unknown:
        raise ConfigError(f"unknown solver settings: {sorted(unknown)}")
    return out


def _c_o(trunc: dict, weights: Weights) -> float:
    """Overflow cost; ``c_o_scale`` ties it to the weight sum so it stays a punishment at any scale."""
    if "c_o_scale" in trunc:
        return float(trunc["c_o_scale"]) * (weights.w1 + weights.w2)
    return float(trunc.get("c_o", 0.0))


def _grid(spec, b_max):
    if spec is None:
        return list(range(b_max, 401, 16))
    if isinstance(spec, dict):
        return list(range(int(spec.get("start", b_max)), int(spec["stop"]) + 1, int(spec.get("step", 1))))
    return [int(s) for s in spec]


# --------------------------------------------------------------------------- output

def _atomic_write(path: Path, text: str) -> None:
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text)
    os.replace(tmp, path)


def _csv_text(header, rows, digest) -> str:
    buf = io.StringIO()
    buf.write(f"# config_sha256={digest}\n")
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    for row in rows:
        writer.writerow([_fmt(v) for v in row])
    return buf.getvalue()


def _fmt(v):
    if v is None:
        return ""
    if isinstance(v, (bool, np.bool_)):
        return str(bool(v)).lower()
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if isinstance(v, np.integer):
        return int(v)
    return v


def _json_text(obj) -> str:
    def default(o):
        if isinstance(o, np.ndarray):
            return o.tolist()
        if isinstance(o, np.generic):
            return o.item()
        raise TypeError(type(o))

    return json.dumps(obj, indent=2, sort_keys=True, default=default, allow_nan=True) + "\n"


# --------------------------------------------------------------------------- solve

def _solve_point(profile, workload, weights, trunc_cfg: dict, solver: dict, jobs=1):
    """Resolve the truncation (fixed or searched) and solve one operating point."""
    c_o = _c_o(trunc_cfg, weights)
    records = None
    if trunc_cfg.get("s_max", "auto") == "auto":
        s_max, records = find_min_smax(
            profile, workload, weights, c_o, solver["delta"], solver["epsilon"], solver["iter_max"],
            smax_grid=_grid(trunc_cfg.get("grid"), profile.b_max), eta_fraction=solver["eta_fraction"],
            refine=bool(trunc_cfg.get("refine", True)), n_jobs=jobs,
        )
    else:
        s_max = int(trunc_cfg["s_max"])
    model = build_truncated(profile, workload, weights, TruncationConfig(s_max, c_o))
    policy, report = relative_value_iteration(to_dtmdp(model, solver["eta_fraction"]), solver["epsilon"], solver["iter_max"])
    evaluation = evaluate_policy(policy, model, solver["delta"])
    return model, policy, report, evaluation, records


def cmd_solve(config, out_dir: Path, jobs=1, dump_model=False) -> int:
    digest = config_hash(config)
    profile = _profile(config)
    workload = _workload(profile, config)
    weights = _weights(config)
    solver = _solver(config)
    model, policy, report, ev, _ = _solve_point(profile, workload, weights, config.get("truncation", {}), solver, jobs)
    rho = traffic_intensity(profile, workload).rho
    _atomic_write(
        out_dir / "policy.csv",
        _csv_text(["rho", "w1", "w2", "s", "action"], chart_rows(rho, weights.w1, weights.w2, policy), digest),
    )
    solve_out = report.to_dict()
    solve_out.update(config_sha256=digest, s_max=model.s_max, c_o=model.trunc.c_o, rho=rho,
                     control_limit=detect_control_limit(policy),
                     threshold_limit=detect_control_limit(policy, "threshold"))
    _atomic_write(out_dir / "solve.json", _json_text(solve_out))
    eval_out = ev.to_dict()
    eval_out["config_sha256"] = digest
    _atomic_write(out_dir / "eval.json", _json_text(eval_out))
    if dump_model:
        model.dump_csv(out_dir / "model.csv")
    log.info("g=%.6f delta_pi=%.3e iterations=%d acceptable=%s", report.g, ev.delta_pi, report.iterations, ev.acceptable)
    return EXIT_OK if ev.acceptable else EXIT_UNACCEPTABLE


# --------------------------------------------------------------------------- sweep

def _sweep_point(args):
    profile, rho, weights, trunc_cfg, solver = args
    row = {"rho": rho, "w1": weights.w1, "w2": weights.w2}
    try:
        workload = Workload.from_rho(profile, rho)
        model, policy, report, ev, _ = _solve_point(profile, workload, weights, trunc_cfg, solver)
        row.update(
            g=report.g, g_pi=ev.g_pi, avg_response_time=ev.avg_response_time, avg_power=ev.avg_power,
            energy_efficiency=ev.energy_efficiency, control_limit=detect_control_limit(policy),
            threshold_limit=detect_control_limit(policy, "threshold"), delta_pi=ev.delta_pi,
            acceptable=ev.acceptable, s_max=model.s_max, iterations=report.iterations, error="",
        )
        return row, policy
    except BatchingError as exc:
        row["error"] = f"{type(exc).__name__}: {exc}"
        return row, None


def _map(fn, tasks, jobs):
    if jobs > 1 and len(tasks) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            return list(pool.map(fn, tasks))
    return [fn(t) for t in tasks]


SWEEP_COLUMNS = ["rho", "w1", "w2", "g", "g_pi", "avg_response_time", "avg_power", "energy_efficiency",
                 "control_limit", "threshold_limit", "delta_pi", "acceptable", "s_max", "iterations", "error"]


def cmd_sweep(config, out_dir: Path, jobs=1) -> int:
    digest = config_hash(config)
    profile = _profile(config)
    sweep = config.get("sweep", {})
    rhos = [float(r) for r in sweep.get("rho", [config.get("rho")])]
    w1 = float(sweep.get("w1", _weights(config).w1))
    w2s = [float(w) for w in sweep.get("w2", [_weights(config).w2])]
    if not rhos or not w2s or None in rhos:
        raise ConfigError("sweep needs non-empty rho and w2 grids")
    trunc_cfg = config.get("truncation", {"s_max": 150, "c_o_scale": 100.0})
    solver = _solver(config)
    tasks = [(profile, rho, Weights(w1, w2), trunc_cfg, solver) for rho in rhos for w2 in w2s]
    results = _map(_sweep_point, tasks, jobs)

    rows, chart = [], []
    for row, policy in results:
        rows.append([row.get(c) for c in SWEEP_COLUMNS])
        if policy is not None:
            chart.extend(chart_rows(row["rho"], row["w1"], row["w2"], policy))
    _atomic_write(out_dir / "tradeoff.csv", _csv_text(SWEEP_COLUMNS, rows, digest))
    _atomic_write(out_dir / "policies.csv", _csv_text(["rho", "w1", "w2", "s", "action"], chart, digest))
    failed = [r for r, _ in results if r["error"]]
    for r in failed:
        log.warning("rho=%s w2=%s failed: %s", r["rho"], r["w2"], r["error"])
    unacceptable = [r for r, _ in results if not r["error"] and not r["acceptable"]]
    return EXIT_UNACCEPTABLE if unacceptable else EXIT_OK


# --------------------------------------------------------------------------- compare

def _benchmarks(spec, b_max, s_max):
    out = []
    for item in spec:
        if item == "work_conserving":
            out.append(("work_conserving", make_work_conserving(b_max, s_max)))
        elif isinstance(item, dict) and "static" in item:
            b = int(item["static"])
            out.append((f"static_{b}", make_static(b, b_max, s_max)))
        else:
            raise ConfigError(f"unknown benchmark policy {item!r}")
    return out


COMPARE_COLUMNS = ["rho", "w1", "w2", "policy", "stable", "g_pi", "sim_cost", "sim_stderr", "excess_over_rvi", "beats_rvi"]


def _compare_point(args):
    profile, rho, weights, trunc_cfg, solver, bench_spec, sim_cfg, seed, tol = args
    workload = Workload.from_rho(profile, rho)
    model, policy, report, ev, _ = _solve_point(profile, workload, weights, trunc_cfg, solver)
    lam = workload.lam
    rows = []
    for name, pol in [("rvi", policy)] + _benchmarks(bench_spec, profile.b_max, model.s_max):
        # benchmarks are judged by the batch they serve on a long queue; the optimised
        # policy is certified by its overflow share instead (its S_o action is an artefact)
        a_top = pol.overflow_action
        stable = name == "rvi" or (a_top > 0 and lam * float(profile.latency(a_top)) < a_top)
        g_pi = evaluate_policy(pol, model, solver["delta"]).g_pi if stable else None
        sim_cost = sim_err = None
        if sim_cfg and stable:
            horizon = float(sim_cfg.get("horizon", float(sim_cfg.get("arrivals", 1e6)) / lam))
            try:
                rep = simulate(profile, workload, pol, horizon, seed, weights)
                sim_cost, sim_err = weighted_cost_interval(rep, weights, workload)
            except InstabilityError:
                stable = False
        excess = None if g_pi is None else g_pi - ev.g_pi
        beats = bool(excess is not None and name != "rvi" and excess < -tol * max(1.0, abs(ev.g_pi)))
        rows.append([rho, weights.w1, weights.w2, name, stable, g_pi, sim_cost, sim_err, excess, beats])
    return rows


def cmd_compare(config, out_dir: Path, jobs=1, seed=0) -> int:
    digest = config_hash(config)
    profile = _profile(config)
    comp = config.get("compare", {})
    rhos = [float(r) for r in comp.get("rho", [0.1, 0.3, 0.5, 0.7, 0.9])]
    w1 = float(comp.get("w1", 1.0))
    w2s = [float(w) for w in comp.get("w2", [0.0, 5.0, 10.0, 20.0])]
    bench = comp.get("policies", ["work_conserving", {"static": 8}, {"static": 16}, {"static": 32}])
    sim_cfg = comp.get("simulate")
    tol = float(comp.get("tolerance", 1e-9))
    trunc_cfg = config.get("truncation", {"s_max": 150, "c_o_scale": 100.0})
    solver = _solver(config)
    tasks = [(profile, rho, Weights(w1, w2), trunc_cfg, solver, bench, sim_cfg, seed, tol) for rho in rhos for w2 in w2s]
    rows = [r for block in _map(_compare_point, tasks, jobs) for r in block]
    _atomic_write(out_dir / "comparison.csv", _csv_text(COMPARE_COLUMNS, rows, digest))
    beaten = [r for r in rows if r[-1]]
    for r in beaten:
        log.error("benchmark %s beats the optimised policy at rho=%s w2=%s by %.3g", r[3], r[0], r[2], -r[-2])
    return EXIT_UNACCEPTABLE if beaten else EXIT_OK


# --------------------------------------------------------------------------- qlearn

def cmd_qlearn(config, out_dir: Path, seed=0) -> int:
    digest = config_hash(config)
    profile = _profile(config)
    qcfg = dict(config.get("qlearn", {}))
    if "b_max" in qcfg:
        profile = profile.with_b_max(int(qcfg.pop("b_max")))
    workload = _workload(profile, config)
    weights = _weights(config)
    solver = _solver(config)
    trunc = config.get("truncation", {"s_max": 64, "c_o": 10.0})
    model = build_truncated(profile, workload, weights, TruncationConfig(int(trunc["s_max"]), _c_o(trunc, weights)))
    dt = to_dtmdp(model, solver["eta_fraction"])
    reference, _ = relative_value_iteration(dt, solver["epsilon"], solver["iter_max"])
    mu = evaluate_policy(reference, model, solver["delta"]).mu
    mass_threshold = float(qcfg.pop("mass_threshold", 1e-4))
    high = (mu >= mass_threshold).astype(float)
    snaps = qcfg.pop("snapshots", [10**4, 10**5, 10**6, 10**7])
    qcfg.setdefault("iterations", max(snaps))
    qcfg.setdefault("seed", seed)
    config_obj = ql.QLearnConfig(snapshot_at=tuple(snaps), **qcfg)
    _, snapshots = ql.train(dt, config_obj)

    rows = [
        [s.iteration, ql.policy_agreement(s.policy, reference), ql.policy_agreement(s.policy, reference, mu),
         ql.policy_agreement(s.policy, reference, high)]
        for s in snapshots
    ]
    _atomic_write(out_dir / "agreement.csv",
                  _csv_text(["iteration", "agreement", "agreement_mu", "agreement_high_mass"], rows, digest))
    ql.write_snapshots(snapshots, out_dir / "snapshots.csv.tmp", digest)
    os.replace(out_dir / "snapshots.csv.tmp", out_dir / "snapshots.csv")
    save_policy(reference, out_dir / "rvi_policy.csv", digest)
    return EXIT_OK


# --------------------------------------------------------------------------- truncation study

TABLE1_COLUMNS = ["c_o", "min_s_max", "iterations", "converged", "space_complexity", "time_complexity", "delta_pi", "g_pi"]
RECORD_COLUMNS = ["c_o", "s_max", "g_rvi", "g_pi", "delta_pi", "iterations", "converged", "acceptable",
                  "space_complexity", "time_complexity", "control_limit", "error"]


def cmd_truncation_study(config, out_dir: Path, jobs=1) -> int:
    digest = config_hash(config)
    profile = _profile(config)
    workload = _workload(profile, config)
    weights = _weights(config)
    solver = _solver(config)
    study = config.get("truncation_study", {})
    c_os = [float(c) for c in study.get("c_o", [100.0, 10.0, 0.0])]
    grid = _grid(study.get("grid"), profile.b_max)
    table, all_records = [], []
    exhausted = False
    for c_o in c_os:
        try:
            s_star, records = find_min_smax(
                profile, workload, weights, c_o, solver["delta"], solver["epsilon"], solver["iter_max"],
                smax_grid=grid, eta_fraction=solver["eta_fraction"], refine=bool(study.get("refine", True)),
                exhaustive=bool(study.get("exhaustive", False)), n_jobs=jobs,
            )
            hit = next(r for r in records if r.s_max == s_star)
            table.append([c_o, s_star, hit.iterations, hit.converged, hit.space_complexity, hit.time_complexity,
                          hit.delta_pi, hit.g_pi])
        except ExhaustionError as exc:
            records = exc.records
            exhausted = True
            table.append([c_o, None, None, None, None, None, None, None])
            log.warning("c_o=%s: %s", c_o, exc)
        all_records.extend(records)
    _atomic_write(out_dir / "table1.csv", _csv_text(TABLE1_COLUMNS, table, digest))
    _atomic_write(
        out_dir / "truncation_records.csv",
        _csv_text(RECORD_COLUMNS, [[r.to_row()[c] for c in RECORD_COLUMNS] for r in all_records], digest),
    )
    return EXIT_UNACCEPTABLE if exhausted else EXIT_OK


# --------------------------------------------------------------------------- entry point

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="smdpbatch", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name, help_text in (
        ("solve", "solve one operating point"),
        ("sweep", "solve a rho x w2 grid and emit tradeoff curves"),
        ("compare", "compare the optimised policy against benchmark policies"),
        ("qlearn", "train RVI Q-learning and track agreement with the optimal policy"),
        ("truncation-study", "search the minimal truncation level per overflow cost"),
    ):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("config", help="JSON config file")
        p.add_argument("--out-dir", default=".", help="output directory (created if missing)")
        p.add_argument("--seed", type=int, default=None, help="random seed (overrides config 'seed')")
        p.add_argument("--jobs", type=int, default=1, help="worker processes for grids")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                       help="override a config field, e.g. --set truncation.s_max=80")
        p.add_argument("-v", "--verbose", action="store_true")
        if name == "solve":
            p.add_argument("--dump-model", action="store_true", help="also write model.csv")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        config = load_config(args.config, args.set)
        if args.seed is not None:
            config["seed"] = args.seed
        seed = int(config.get("seed", 0))
        out_dir = Path(args.out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        jobs = max(1, args.jobs)
        if args.command == "solve":
            return cmd_solve(config, out_dir, jobs, args.dump_model)
        if args.command == "sweep":
            return cmd_sweep(config, out_dir, jobs)
        if args.command == "compare":
            return cmd_compare(config, out_dir, jobs, seed)
        if args.command == "qlearn":
            return cmd_qlearn(config, out_dir, seed)
        return cmd_truncation_study(config, out_dir, jobs)
    except (ConfigError, StabilityError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except ExhaustionError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_UNACCEPTABLE
    except (BatchingError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
