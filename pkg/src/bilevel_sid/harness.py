"""Experiment orchestration: MSE sweeps and BSGM campaigns with CSV/JSON reports.

Experiment configs are JSON objects::

    {
      "problem": {"name": "linear-quadratic", "params": {...}, "seed": 0},
      "mse_sweep": {"t_grid": [16, 64, 256, 1024], "repeats": 2000, "lambda": null,
                    "schedule": null, "slack_se": 3.0, "slope_window": [-1.3, -0.8]},
      "bsgm": {"regime": "finite_horizon", "c3": 1.0, "S": 30, "alpha": null,
               "seeds": 100, "lambda0": null, "schedule": null, "floor_t": false}
    }

Random streams: repeat ``r`` at grid index ``i`` of an MSE sweep uses the
path ``(i, r)``; seed replica ``i`` of a campaign uses ``(i,)`` and its
iteration ``s`` uses ``(i, s)``.  SID appends its step index 1..4 (5 is task
sampling).  Work is spread over threads but results are collected in index
order, so reports do not depend on the thread count.

Every CSV starts with a ``# config_hash=<sha256>`` line; floats are written
with 17 significant digits.
"""
from __future__ import annotations

import copy
import csv
import hashlib
import io
import json
import math
import os
from concurrent.futures import ThreadPoolExecutor

import numpy as np

from .bounds import compute_bounds, fit_decay_slope
from .bsgm import (BSGMConfig, Regime, bsgm_run, delta_f, reference_hypergradient,
                   sample_accounting, stationarity_series, theory_rhs)
from .core import FullSpace, as_vector
from .errors import ConfigurationError, DataError, InvariantFailure, NumericalFailure
from .problems import make_problem
from .seeding import SeedStream
from .sid import SIDConfig, repeat_streams, run_repeats, sample_moments
from .solvers import ConstantSchedule, schedule_from_dict

MSE_COLUMNS = ("t", "mse", "bias_sq", "var", "stderr", "bound")
AGGREGATE_COLUMNS = ("seed", "avg_G_alpha_norm_sq", "min_G_alpha_norm_sq", "s_star", "N",
                     "feasible", "accounting_ok", "all_in_region")
TRACE_FIXED_COLUMNS = ("s", "t", "k", "J", "samples", "N", "G_alpha_norm_sq", "f_value")

MSE_DEFAULTS = {"t_grid": [16, 64, 256, 1024], "repeats": 2000, "lambda": None,
                "schedule": None, "slack_se": 3.0, "slope_window": [-1.3, -0.8]}
BSGM_DEFAULTS = {"regime": "finite_horizon", "c3": 1.0, "S": 30, "alpha": None, "seeds": 100,
                 "lambda0": None, "schedule": None, "floor_t": False}


# ---------------------------------------------------------------------------
# Formatting helpers
# ---------------------------------------------------------------------------


def fmt(x) -> str:
    if x is None:
        return ""
    if isinstance(x, (bool, np.bool_)):
        return "1" if x else "0"
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    return format(float(x), ".17g")


def _jsonable(x):
    if isinstance(x, dict):
        return {str(k): _jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_jsonable(v) for v in x]
    if isinstance(x, np.ndarray):
        return _jsonable(x.tolist())
    if isinstance(x, (np.bool_, bool)):
        return bool(x)
    if isinstance(x, np.integer):
        return int(x)
    if isinstance(x, (float, np.floating)):
        x = float(x)
        return x if math.isfinite(x) else str(x)
    return x


def config_hash(config: dict) -> str:
    blob = json.dumps(_jsonable(config), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()


def write_csv(path: str, header, rows, chash: str) -> None:
    buf = io.StringIO()
    buf.write(f"# config_hash={chash}\n")
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    for row in rows:
        writer.writerow([fmt(v) for v in row])
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(buf.getvalue())


def write_json(path: str, payload: dict) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(_jsonable(payload), fh, indent=2, sort_keys=True)
        fh.write("\n")


def read_csv(path: str) -> tuple[str, list[dict]]:
    """Read a report CSV; returns ``(config_hash, rows)``."""
    with open(path, encoding="utf-8") as fh:
        first = fh.readline().strip()
        if not first.startswith("# config_hash="):
            raise DataError(f"{path} does not start with a config_hash line")
        rows = list(csv.DictReader(fh))
    return first.split("=", 1)[1], rows


# ---------------------------------------------------------------------------
# Config handling
# ---------------------------------------------------------------------------


def load_config(path: str | None) -> dict:
    if path is None:
        return {}
    try:
        with open(path, encoding="utf-8") as fh:
            cfg = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigurationError(f"cannot read config {path}: {exc}") from exc
    if not isinstance(cfg, dict):
        raise ConfigurationError("config must be a JSON object")
    return cfg


def _section(config: dict, key: str, defaults: dict) -> dict:
    given = dict(config.get(key) or {})
    unknown = set(given) - set(defaults)
    if unknown:
        raise ConfigurationError(f"unknown keys in {key}: {sorted(unknown)}")
    out = copy.deepcopy(defaults)
    out.update(given)
    return out


def build_problem(config: dict):
    spec = config.get("problem") or {}
    name = spec.get("name", "linear-quadratic")
    return make_problem(name, spec.get("params") or {}, int(spec.get("seed", 0)))


def _effective(config: dict, seed: int, strict: bool, mode: str, section: dict) -> dict:
    prob = config.get("problem") or {}
    return {"mode": mode, "seed": int(seed), "strict_schedule": bool(strict),
            "problem": {"name": prob.get("name", "linear-quadratic"),
                        "params": prob.get("params") or {}, "seed": int(prob.get("seed", 0))},
            mode.replace("-", "_"): section}


def _default_lambda(problem) -> np.ndarray:
    if isinstance(problem.feasible_set, FullSpace):
        return np.zeros(problem.m)
    return problem.feasible_set.project(np.full(problem.m, 1e6))


# ---------------------------------------------------------------------------
# MSE sweep
# ---------------------------------------------------------------------------


def run_mse_sweep(config: dict, seed: int = 0, out_dir: str = ".", threads: int = 1,
                  strict: bool = True) -> dict:
    """SID at ``t = k = J`` over a grid; writes ``mse_sweep.csv`` and ``mse_sweep_summary.json``."""
    section = _section(config, "mse_sweep", MSE_DEFAULTS)
    problem = build_problem(config)
    c = problem.constants
    grid = [int(t) for t in section["t_grid"]]
    if not grid or any(t < 1 for t in grid):
        raise ConfigurationError("t_grid must be a non-empty list of integers >= 1")
    repeats = int(section["repeats"])
    if repeats < 2:
        raise ConfigurationError("repeats must be >= 2")
    if section["schedule"] is None:
        schedule = ConstantSchedule(1.0) if c.is_deterministic else schedule_from_dict(None, c)
    else:
        schedule = schedule_from_dict(section["schedule"], c)
    if strict:
        schedule.validate(c)
    lam = (_default_lambda(problem) if section["lambda"] is None
           else np.broadcast_to(as_vector(section["lambda"]), (problem.m,)).copy())

    try:
        truth = reference_hypergradient(problem, lam)
    except (NotImplementedError, NumericalFailure) as exc:
        raise ConfigurationError(f"no exact hypergradient for {problem.name}: the MSE is "
                                 f"undefined without ground truth ({exc})") from exc

    tb = compute_bounds(c, schedule)
    effective = _effective(config, seed, strict, "mse-sweep", section)
    chash = config_hash(effective)
    master = SeedStream(seed)
    rows, det_bounds, cor_bounds, in_region = [], [], [], True
    for i, t in enumerate(grid):
        cfg = SIDConfig(t=t, k=t, J=t, schedule=schedule, strict=strict)
        outs = run_repeats(problem, lam, cfg, repeat_streams(master.child(i), repeats), threads)
        est = sample_moments([o.hypergradient for o in outs], truth)
        in_region &= all(o.w_in_region for o in outs)
        rows.append((t, est.mse, est.bias_sq, est.variance, est.stderr, tb.mse_bound(t, t, t)))
        det_bounds.append(tb.det_error_bound(t) if c.is_deterministic else None)
        cor_bounds.append(tb.corollary_bound(t) if tb.c_b is not None else None)

    slack = float(section["slack_se"])
    mse_ok = all(r[1] <= r[5] + slack * r[4] for r in rows)
    flags = {"mse_within_bound": mse_ok, "all_in_region": in_region}
    slope = {"computable": False}
    if len(grid) >= 3:
        try:
            sl, ic, r2 = fit_decay_slope([(r[0], r[1]) for r in rows])
            slope = {"computable": True, "slope": sl, "intercept": ic, "r_squared": r2}
        except DataError as exc:
            slope = {"computable": False, "reason": str(exc)}
    if not slope["computable"] and "reason" not in slope:
        slope["reason"] = "fewer than 3 grid points"
    if c.is_deterministic:
        flags["det_bound_ok"] = all(r[1] <= b for r, b in zip(rows, det_bounds))
        ratios = []
        for a, b in zip(rows, rows[1:]):
            if a[1] > 0 and b[1] > 0:
                ratios.append(math.log2(b[1] / a[1]) / math.log2(b[0] / a[0]))
        flags["doubling_rate_ok"] = (all(r <= 2 * math.log2(c.q) for r in ratios)
                                     if ratios else None)
        slope["per_doubling"] = ratios
    else:
        lo, hi = section["slope_window"]
        flags["slope_in_window"] = (lo <= slope["slope"] <= hi) if slope["computable"] else None
        if tb.c_b is not None:
            flags["corollary_bound_ok"] = all(r[1] <= b + slack * r[4]
                                              for r, b in zip(rows, cor_bounds))

    os.makedirs(out_dir, exist_ok=True)
    write_csv(os.path.join(out_dir, "mse_sweep.csv"), MSE_COLUMNS, rows, chash)
    summary = {"config": effective, "config_hash": chash, "problem": problem.describe(),
               "lambda": lam, "true_hypergradient": truth, "slope": slope, "flags": flags,
               "corollary_bounds": cor_bounds, "det_error_bounds": det_bounds,
               "bounds": tb.to_dict(), "columns": list(MSE_COLUMNS)}
    write_json(os.path.join(out_dir, "mse_sweep_summary.json"), summary)
    return summary


# ---------------------------------------------------------------------------
# BSGM campaign
# ---------------------------------------------------------------------------


def bsgm_config_from_section(section: dict, problem, strict: bool = True) -> BSGMConfig:
    c = problem.constants
    regime = Regime(section["regime"], float(section["c3"]))
    if section["schedule"] is not None:
        schedule = schedule_from_dict(section["schedule"], c)
    elif regime.kind == "deterministic":
        schedule = ConstantSchedule(1.0)
    else:
        schedule = schedule_from_dict(None, c)
    alpha = section["alpha"]
    if alpha is None:
        alpha = 1.0 / compute_bounds(c).L_f
    lam0 = (_default_lambda(problem) if section["lambda0"] is None
            else np.broadcast_to(as_vector(section["lambda0"]), (problem.m,)).copy())
    return BSGMConfig(alpha=float(alpha), regime=regime, S=int(section["S"]), schedule=schedule,
                      lambda0=lam0, floor_t=bool(section["floor_t"]), strict=strict)


def _trace_rows(trace):
    rows = []
    for s in range(trace.S):
        t, k, J = trace.sizes[s]
        rows.append([s, t, k, J, trace.samples[s], trace.N[s], trace.G_alpha_norm_sq[s],
                     trace.f_values[s], *trace.lambdas[s], *trace.g_hat[s]])
    return rows


def run_bsgm_campaign(config: dict, seed: int = 0, out_dir: str = ".", threads: int = 1,
                      strict: bool = True) -> dict:
    """Independent BSGM runs, one per replica seed.

    Writes ``bsgm_trace_<i>.csv`` per replica, ``bsgm_aggregate.csv`` and
    ``bsgm_summary.json``.  Raises :class:`InvariantFailure` (after writing
    the reports) when an iterate leaves the feasible set or the sample count
    breaks its bounds.
    """
    section = _section(config, "bsgm", BSGM_DEFAULTS)
    problem = build_problem(config)
    bcfg = bsgm_config_from_section(section, problem, strict)
    bcfg.validate(problem)
    n_seeds = int(section["seeds"])
    if n_seeds < 1:
        raise ConfigurationError("seeds must be >= 1")
    effective = _effective(config, seed, strict, "bsgm", section)
    chash = config_hash(effective)
    master = SeedStream(seed)

    def one(i):
        return bsgm_run(problem, bcfg, master.child(i))

    if threads <= 1:
        traces = [one(i) for i in range(n_seeds)]
    else:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            traces = list(pool.map(one, range(n_seeds)))

    dF, dF_source = delta_f(problem, bcfg.lambda0, traces)
    os.makedirs(out_dir, exist_ok=True)
    m = problem.m
    header = (*TRACE_FIXED_COLUMNS, *[f"lambda_{j}" for j in range(m)],
              *[f"g_hat_{j}" for j in range(m)])
    agg_rows, avgs = [], []
    feasible_all = accounting_all = True
    for i, tr in enumerate(traces):
        write_csv(os.path.join(out_dir, f"bsgm_trace_{i}.csv"), header, _trace_rows(tr), chash)
        series = stationarity_series(tr)
        feasible = all(problem.feasible_set.contains(l) for l in tr.lambdas)
        acc = sample_accounting(bcfg.regime, bcfg.S, tr.total_samples)
        acc_ok = acc.ok if bcfg.S > 1 else True
        feasible_all &= feasible
        accounting_all &= acc_ok
        avg = series.averages[-1] if series.available and series.averages else None
        avgs.append(avg)
        agg_rows.append([i, avg, series.min_value, series.s_star, tr.total_samples, feasible,
                         acc_ok, all(tr.in_region)])
    write_csv(os.path.join(out_dir, "bsgm_aggregate.csv"), AGGREGATE_COLUMNS, agg_rows, chash)

    available = bcfg.S > 0 and all(a is not None for a in avgs)
    mean_avg = float(np.mean(avgs)) if available else None
    se_avg = (float(np.std(avgs, ddof=1) / math.sqrt(len(avgs)))
              if available and len(avgs) > 1 else None)
    rhs = theory_rhs(problem, bcfg, dF) if bcfg.S > 0 else None
    acc = sample_accounting(bcfg.regime, bcfg.S, traces[0].total_samples)
    summary = {
        "config": effective, "config_hash": chash, "problem": problem.describe(),
        "alpha": bcfg.alpha, "delta_f": dF, "delta_f_source": dF_source,
        "mean_avg_G_alpha_norm_sq": mean_avg, "stderr_avg_G_alpha_norm_sq": se_avg,
        "theory_rhs": rhs, "N": traces[0].total_samples,
        "N_bounds": [acc.lower, acc.upper],
        "flags": {"bound_ok": (mean_avg <= rhs) if available else None,
                  "feasible": feasible_all, "sample_accounting": accounting_all,
                  "all_in_region": all(all(tr.in_region) for tr in traces)},
        "bounds": compute_bounds(problem.constants,
                                 bcfg.schedule if bcfg.regime.kind != "deterministic"
                                 else None).to_dict(),
        "final_lambdas": [tr.lambdas[-1] for tr in traces],
    }
    write_json(os.path.join(out_dir, "bsgm_summary.json"), summary)
    if not (feasible_all and accounting_all):
        raise InvariantFailure("feasibility or sample-accounting invariant failed; see "
                               + os.path.join(out_dir, "bsgm_summary.json"))
    return summary


# ---------------------------------------------------------------------------
# Bounds table
# ---------------------------------------------------------------------------


def bounds_table(config: dict, strict: bool = True) -> dict:
    """Flat key-value table of every constant for the configured problem."""
    problem = build_problem(config)
    c = problem.constants
    section = config.get("bsgm") or config.get("mse_sweep") or {}
    spec = section.get("schedule")
    if spec is None and c.is_deterministic:
        schedule = ConstantSchedule(1.0)
    else:
        schedule = schedule_from_dict(spec, c)
    if strict:
        schedule.validate(c)
    table = {"problem": problem.name}
    table.update(compute_bounds(c, schedule).to_dict())
    return table
