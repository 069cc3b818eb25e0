"""Experiment harness: JSON config in, CSV tables and a JSON report out.

Exit codes: 0 on success, 2 on configuration errors (nothing is written),
3 on numerical failure during an experiment (the offending operation is
named on stderr).  CSV bodies are byte-identical across reruns of the same
config and seed; wall-clock information lives only in the JSON report.
"""

from __future__ import annotations

import argparse
import csv
import json
import math
import os
import sys
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.integrate import solve_ivp

from . import __version__
from . import schedule as schedule_mod
from .errors import BridgekitError, ConfigInvalid, NumericalFailure
from .bridge import eta_rho, make_rhos, markov_x0_coefficient, simulate_inference_chain
from .metrics import RunReport, diversity_score, fit_order, moment_check
from .oracle import GaussianBridgeProblem, GaussianOracle, PerturbedOracle
from .samplers import (
    Method,
    SamplerConfig,
    decode,
    drift_dbim,
    drift_pfode,
    encode,
    run_sampler,
    sample_batch,
    slerp_interpolate,
)
from .schedule import GridKind, NoiseSchedule, TimeGrid, coeffs, make_grid

EXPERIMENTS = (
    "sample",
    "marginals",
    "drift-check",
    "convergence",
    "roundtrip",
    "interpolate",
    "diversity",
)


@dataclass
class RunConfig:
    """Fully validated run configuration."""

    schedule: NoiseSchedule
    problem: GaussianBridgeProblem
    grid: TimeGrid
    method: Method
    eta: float
    n_steps_sweep: list[int]
    experiment: str
    seed: int
    out_dir: Path
    n_trajectories: int
    x_T: np.ndarray
    x0: np.ndarray | None
    bias: float
    options: dict
    raw: dict


def _require(mapping: dict, key: str, ctx: str):
    if key not in mapping:
        raise ConfigInvalid(f"missing '{key}' in {ctx}")
    return mapping[key]


def _build_schedule(spec: dict) -> NoiseSchedule:
    kind = _require(spec, "kind", "schedule")
    horizon = float(spec.get("horizon", 1.0))
    try:
        if kind == "vp":
            return NoiseSchedule.vp(spec.get("beta_min", 0.1), spec.get("beta_max", 20.0), horizon)
        if kind == "ve":
            return NoiseSchedule.ve(spec.get("sigma_min", 0.01), spec.get("sigma_max", 50.0), horizon)
        if kind == "brownian_bridge":
            return NoiseSchedule.brownian_bridge(spec.get("beta", 1.0), horizon)
    except BridgekitError as exc:
        raise ConfigInvalid(f"schedule: {exc}") from exc
    raise ConfigInvalid(f"unknown schedule kind '{kind}'")


def _build_grid(spec: dict, horizon: float) -> TimeGrid:
    kind_name = spec.get("kind", "uniform_boot")
    try:
        kind = GridKind(kind_name)
    except ValueError as exc:
        raise ConfigInvalid(f"unknown grid kind '{kind_name}'") from exc
    try:
        return make_grid(
            kind,
            int(_require(spec, "n_steps", "grid")),
            t_min=float(spec.get("t_min", 1e-4)),
            t_max=float(spec.get("t_max", horizon)),
            boot_gap=float(spec.get("boot_gap", 1e-4)),
            edm_exponent=float(spec.get("edm_exponent", 7.0)),
        )
    except BridgekitError as exc:
        raise ConfigInvalid(f"grid: {exc}") from exc


def load_config(raw: dict, out_override: str | None = None, seed_override: int | None = None) -> RunConfig:
    """Validate a raw JSON document into a RunConfig.

    Every referenced object is constructed (and therefore validated) here,
    before any output file is created.
    """
    if not isinstance(raw, dict):
        raise ConfigInvalid("config root must be a JSON object")
    sched = _build_schedule(_require(raw, "schedule", "config"))

    pspec = _require(raw, "problem", "config")
    try:
        problem = GaussianBridgeProblem(
            mix=np.asarray(_require(pspec, "mix", "problem"), dtype=float),
            offset=np.asarray(_require(pspec, "offset", "problem"), dtype=float),
            cov=np.asarray(_require(pspec, "cov", "problem"), dtype=float),
        )
    except BridgekitError as exc:
        raise ConfigInvalid(f"problem: {exc}") from exc
    x_T = np.asarray(_require(pspec, "x_T", "problem"), dtype=float)
    if x_T.shape != (problem.dim,):
        raise ConfigInvalid(f"x_T shape {x_T.shape} != ({problem.dim},)")
    x0 = None
    if "x0" in pspec:
        x0 = np.asarray(pspec["x0"], dtype=float)
        if x0.shape != (problem.dim,):
            raise ConfigInvalid(f"x0 shape {x0.shape} != ({problem.dim},)")
    bias = float(pspec.get("bias", 0.0))

    grid = _build_grid(_require(raw, "grid", "config"), sched.horizon)
    if grid.t_max != sched.horizon:
        raise ConfigInvalid(
            f"grid t_max={grid.t_max} must equal the schedule horizon {sched.horizon}"
        )

    sspec = _require(raw, "sampler", "config")
    method_name = _require(sspec, "method", "sampler")
    try:
        method = Method(method_name)
    except ValueError as exc:
        raise ConfigInvalid(f"unknown sampler method '{method_name}'") from exc
    eta = float(sspec.get("eta", 0.0))
    sweep = [int(n) for n in sspec.get("n_steps_sweep", [])]

    experiment = _require(raw, "experiment", "config")
    if experiment not in EXPERIMENTS:
        raise ConfigInvalid(f"unknown experiment '{experiment}'; choose from {EXPERIMENTS}")
    if experiment in ("convergence", "diversity"):
        if not sweep:
            raise ConfigInvalid(f"experiment '{experiment}' requires sampler.n_steps_sweep")
        for n in sweep:
            try:
                make_grid(
                    grid.kind, n, t_min=grid.t_min, t_max=grid.t_max,
                    boot_gap=grid.boot_gap, edm_exponent=grid.edm_exponent,
                )
            except BridgekitError as exc:
                raise ConfigInvalid(f"n_steps_sweep entry {n}: {exc}") from exc

    seed = int(raw.get("seed", 0)) if seed_override is None else int(seed_override)
    if not 0 <= seed < 2 ** 64:
        raise ConfigInvalid(f"seed must fit in 64 bits, got {seed}")
    out_dir = Path(out_override if out_override is not None else raw.get("output", "out"))
    n_traj = int(raw.get("n_trajectories", 100))
    if n_traj < 1:
        raise ConfigInvalid(f"n_trajectories must be >= 1, got {n_traj}")
    options = raw.get("options", {})
    if not isinstance(options, dict):
        raise ConfigInvalid("options must be a JSON object")

    # construct the sampler config now so its validation also runs up front
    try:
        SamplerConfig(method=method, grid=grid, seed=seed, eta=eta)
    except BridgekitError as exc:
        raise ConfigInvalid(f"sampler: {exc}") from exc

    return RunConfig(
        schedule=sched, problem=problem, grid=grid, method=method, eta=eta,
        n_steps_sweep=sweep, experiment=experiment, seed=seed, out_dir=out_dir,
        n_trajectories=n_traj, x_T=x_T, x0=x0, bias=bias, options=options, raw=raw,
    )


def _fmt(value) -> str:
    if isinstance(value, (float, np.floating)):
        return repr(float(value))
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    return str(value)


def _write_csv(path: Path, header: list[str], rows: list[list]) -> None:
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for row in rows:
            writer.writerow([_fmt(v) for v in row])


def _predictor(cfg: RunConfig):
    base = GaussianOracle(cfg.problem, cfg.schedule)
    if cfg.bias != 0.0:
        return PerturbedOracle(base, cfg.bias, seed=cfg.seed)
    return base


def _grid_with_steps(cfg: RunConfig, n: int) -> TimeGrid:
    return make_grid(
        cfg.grid.kind, n, t_min=cfg.grid.t_min, t_max=cfg.grid.t_max,
        boot_gap=cfg.grid.boot_gap, edm_exponent=cfg.grid.edm_exponent,
    )


# --- experiments ------------------------------------------------------------


def _exp_sample(cfg: RunConfig, predictor, threads: int):
    scfg = SamplerConfig(method=cfg.method, grid=cfg.grid, seed=cfg.seed, eta=cfg.eta)
    terminal, _, calls = sample_batch(scfg, cfg.schedule, predictor, cfg.x_T, cfg.n_trajectories, threads)
    header = ["traj_id"] + [f"coord_{i}" for i in range(cfg.problem.dim)]
    rows = [[i] + list(terminal[i]) for i in range(cfg.n_trajectories)]
    metrics = {
        "terminal_mean_norm": float(np.linalg.norm(terminal.mean(axis=0))),
        "terminal_mean_var": float(terminal.var(axis=0, ddof=1).mean()),
    }
    return "sample.csv", header, rows, metrics, calls * cfg.n_trajectories


def _exp_marginals(cfg: RunConfig, predictor, threads: int):
    x0 = cfg.x0 if cfg.x0 is not None else cfg.problem.mean_given_endpoint(cfg.x_T)
    rhos = make_rhos(cfg.schedule, cfg.grid, cfg.eta)
    states = simulate_inference_chain(
        cfg.schedule, cfg.grid, rhos, x0, cfg.x_T, cfg.n_trajectories,
        np.random.default_rng(cfg.seed),
    )
    rows = []
    max_z = 0.0
    max_var_dev = 0.0
    for t in sorted(states):
        k = coeffs(cfg.schedule, t)
        target_mean = k.a * cfg.x_T + k.b * x0
        target_cov = k.c * k.c * np.eye(cfg.problem.dim)
        report = moment_check(states[t], t, target_mean, target_cov)
        for i in range(cfg.problem.dim):
            emp_var = float(report.empirical_cov[i, i])
            rows.append([
                t, i, float(report.empirical_mean[i]), float(target_mean[i]),
                emp_var, float(k.c * k.c), float(report.z_scores[i]),
            ])
            max_var_dev = max(max_var_dev, abs(emp_var - k.c * k.c) / (k.c * k.c))
        max_z = max(max_z, report.max_abs_z)
    header = ["t", "coord", "emp_mean", "tgt_mean", "emp_var", "tgt_var", "z"]
    return "marginals.csv", header, rows, {"max_abs_z": max_z, "max_var_rel_dev": max_var_dev}, 0


def _exp_drift_check(cfg: RunConfig, predictor, threads: int):
    n_points = int(cfg.options.get("n_points", 1000))
    lo, hi = cfg.options.get("t_range", (0.01, 0.99))
    rng = np.random.default_rng(cfg.seed)
    rows = []
    devs = []
    samples = []
    for i in range(n_points):
        t = float(rng.uniform(lo * cfg.schedule.horizon, hi * cfg.schedule.horizon))
        x = rng.standard_normal(cfg.problem.dim) * 2.0
        xT = rng.standard_normal(cfg.problem.dim) * 2.0
        d1 = drift_dbim(cfg.schedule, predictor, x, t, xT)
        d2 = drift_pfode(cfg.schedule, predictor, x, t, xT)
        samples.append((i, t, d1, d2))
    scale = max(max(np.max(np.abs(d1)), np.max(np.abs(d2))) for _, _, d1, d2 in samples)
    for i, t, d1, d2 in samples:
        denom = max(float(np.max(np.abs(d1))), float(np.max(np.abs(d2))), 1e-4 * scale)
        rel = float(np.max(np.abs(d1 - d2)) / denom)
        devs.append(rel)
        rows.append([i, t, rel])
    header = ["idx", "t", "rel_dev"]
    return "drift_check.csv", header, rows, {"max_rel_dev": max(devs)}, 2 * n_points


def _exp_convergence(cfg: RunConfig, predictor, threads: int):
    rows = []
    errs = []
    calls = 0
    for n in cfg.n_steps_sweep:
        grid = _grid_with_steps(cfg, n)
        scfg = SamplerConfig(method=cfg.method, grid=grid, seed=cfg.seed, eta=cfg.eta)
        traj = run_sampler(scfg, cfg.schedule, predictor, cfg.x_T)
        calls += traj.predictor_calls
        boot_state = traj.states[1][1]
        sol = solve_ivp(
            lambda t, y: drift_pfode(cfg.schedule, predictor, y, t, cfg.x_T),
            (grid.times[grid.n_steps - 1], grid.times[0]),
            boot_state, rtol=1e-12, atol=1e-14, method="DOP853",
        )
        err = float(np.linalg.norm(traj.terminal - sol.y[:, -1]))
        errs.append(err)
        rows.append([cfg.method.value, cfg.eta, n, err])
    header = ["method", "eta", "n_steps", "terminal_err"]
    metrics = {}
    if len(errs) >= 3 and min(errs) > 0:
        metrics["fitted_slope"] = fit_order(cfg.n_steps_sweep, errs)
    return "convergence.csv", header, rows, metrics, calls


def _exp_roundtrip(cfg: RunConfig, predictor, threads: int):
    rng = np.random.default_rng(cfg.seed)
    draws = cfg.problem.sample_x0(cfg.x_T, cfg.n_trajectories, rng)
    rows = []
    worst = 0.0
    for i in range(cfg.n_trajectories):
        x0 = draws[i]
        eps = encode(cfg.schedule, predictor, x0, cfg.x_T, cfg.grid)
        x_rec = decode(cfg.schedule, predictor, eps, cfg.x_T, cfg.grid)
        rel = float(np.linalg.norm(x_rec - x0) / max(np.linalg.norm(x0), 1.0))
        worst = max(worst, rel)
        rows.append([i, rel])
    header = ["traj_id", "recon_rel_err"]
    return "roundtrip.csv", header, rows, {"max_recon_rel_err": worst}, 0


def _exp_interpolate(cfg: RunConfig, predictor, threads: int):
    weights = [float(w) for w in cfg.options.get("weights", [0.0, 0.25, 0.5, 0.75, 1.0])]
    rng = np.random.default_rng(cfg.seed)
    eps_a = rng.standard_normal(cfg.problem.dim)
    eps_b = rng.standard_normal(cfg.problem.dim)
    rows = []
    for w in weights:
        eps = slerp_interpolate(eps_a, eps_b, w)
        x = decode(cfg.schedule, predictor, eps, cfg.x_T, cfg.grid)
        rows.append([w] + list(x))
    header = ["w"] + [f"coord_{i}" for i in range(cfg.problem.dim)]
    return "interpolate.csv", header, rows, {"n_weights": float(len(weights))}, 0


def _exp_diversity(cfg: RunConfig, predictor, threads: int):
    n_conditions = int(cfg.options.get("n_conditions", 8))
    per_condition = int(cfg.options.get("samples_per_condition", 5))
    rng = np.random.default_rng(cfg.seed)
    conditions = rng.standard_normal((n_conditions, cfg.problem.dim))
    rows = []
    metrics = {}
    for n in cfg.n_steps_sweep:
        grid = _grid_with_steps(cfg, n)
        scores = []
        for j in range(n_conditions):
            scfg = SamplerConfig(method=cfg.method, grid=grid, seed=cfg.seed + 1 + j, eta=cfg.eta)
            terminal, _, _ = sample_batch(scfg, cfg.schedule, predictor, conditions[j], per_condition, threads)
            score = diversity_score(terminal)
            scores.append(score)
            rows.append([j, n, cfg.eta, score])
        metrics[f"mean_diversity_n{n}"] = float(np.mean(scores))
    header = ["condition_id", "n_steps", "eta", "score"]
    return "diversity.csv", header, rows, metrics, 0


_RUNNERS = {
    "sample": _exp_sample,
    "marginals": _exp_marginals,
    "drift-check": _exp_drift_check,
    "convergence": _exp_convergence,
    "roundtrip": _exp_roundtrip,
    "interpolate": _exp_interpolate,
    "diversity": _exp_diversity,
}


def run(cfg: RunConfig, threads: int = 1) -> int:
    """Execute one experiment; returns the process exit code."""
    start = time.time()
    predictor = _predictor(cfg)
    try:
        csv_name, header, rows, metrics, calls = _RUNNERS[cfg.experiment](cfg, predictor, threads)
    except BridgekitError as exc:
        raise NumericalFailure(cfg.experiment, str(exc)) from exc
    for value in metrics.values():
        if not math.isfinite(value):
            raise NumericalFailure(cfg.experiment, f"non-finite metric in report: {metrics}")

    cfg.out_dir.mkdir(parents=True, exist_ok=True)
    _write_csv(cfg.out_dir / csv_name, header, rows)
    report = RunReport(
        config=cfg.raw,
        metrics=metrics,
        wall_time_s=time.time() - start,
        predictor_calls=calls,
    ).as_dict()
    report.update({
        "resolved": {
            "experiment": cfg.experiment,
            "method": cfg.method.value,
            "eta": cfg.eta,
            "seed": cfg.seed,
            "n_trajectories": cfg.n_trajectories,
            "grid_times_first_last": [cfg.grid.times[0], cfg.grid.times[-1]],
            "n_steps": cfg.grid.n_steps,
            "threads": threads,
        },
        "version": __version__,
        "generated_at": time.strftime("%Y-%m-%dT%H:%M:%S", time.gmtime()),
    })
    with (cfg.out_dir / "report.json").open("w") as fh:
        json.dump(report, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return 0


# --- selftest ---------------------------------------------------------------


def selftest() -> int:
    """Fast named checks of the library's core identities; 0 only if all pass."""
    sched = NoiseSchedule.brownian_bridge(1.0, 1.0)
    sched_vp = NoiseSchedule.vp(0.1, 20.0, 1.0)
    problem = GaussianBridgeProblem(
        mix=np.array([[0.3]]), offset=np.array([0.2]), cov=np.array([[1.0]])
    )
    rng = np.random.default_rng(12345)
    checks: list[tuple[str, bool, str]] = []

    # coefficient identity a α_T/α_t + b/α_t = 1
    worst = 0.0
    for sch in (sched, sched_vp):
        for t in rng.uniform(0.01, 0.999, size=200):
            k = coeffs(sch, float(t))
            alpha_t = sch.alpha(float(t))
            alpha_T = sch.alpha(sch.horizon)
            worst = max(worst, abs(k.a * alpha_T / alpha_t + k.b / alpha_t - 1.0))
    checks.append(("coefficient-identity", worst <= 1e-12, f"max dev {worst:.2e}"))

    # lambda closed form: lambda_of == 0.5 log(SNR_t − SNR_T)
    worst = 0.0
    for t in rng.uniform(0.01, 0.99, size=200):
        lam = schedule_mod.lambda_of(sched, float(t))
        direct = 0.5 * math.log(sched.snr(float(t)) - sched.snr(1.0))
        worst = max(worst, abs(lam - direct))
    checks.append(("lambda-closed-form", worst <= 1e-10, f"max dev {worst:.2e}"))

    # drift equivalence on 200 random points
    oracle = GaussianOracle(problem, sched_vp)
    devs = []
    pts = []
    for _ in range(200):
        t = float(rng.uniform(0.01, 0.99))
        x = rng.standard_normal(1) * 2
        xT = rng.standard_normal(1) * 2
        d1 = drift_dbim(sched_vp, oracle, x, t, xT)
        d2 = drift_pfode(sched_vp, oracle, x, t, xT)
        pts.append((d1, d2))
    scale = max(max(abs(float(d1[0])), abs(float(d2[0]))) for d1, d2 in pts)
    for d1, d2 in pts:
        devs.append(abs(float(d1[0] - d2[0])) / max(abs(float(d1[0])), abs(float(d2[0])), 1e-4 * scale))
    checks.append(("drift-equivalence", max(devs) <= 1e-9, f"max rel dev {max(devs):.2e}"))

    # Markov boundary: coefficient vanishes exactly at the eta=1 variance
    worst = 0.0
    ok_mid = True
    for _ in range(20):
        t_n = float(rng.uniform(0.05, 0.7))
        t_m = float(rng.uniform(t_n + 0.05, 0.9))
        r1 = eta_rho(sched, t_n, t_m, 1.0)
        worst = max(worst, abs(markov_x0_coefficient(sched, r1, t_n, t_m)))
        ok_mid = ok_mid and abs(markov_x0_coefficient(sched, 0.5 * r1, t_n, t_m)) > 1e-3
    checks.append(("markov-boundary", worst <= 1e-12 and ok_mid, f"eta=1 max {worst:.2e}"))

    # encode/decode round trip at N = 200
    grid = make_grid(GridKind.UNIFORM_WITH_BOOT_STEP, 200)
    oracle_b = GaussianOracle(problem, sched)
    xT = np.array([0.7])
    x0 = problem.sample_x0(xT, 1, rng)[0]
    eps = encode(sched, oracle_b, x0, xT, grid)
    rec = decode(sched, oracle_b, eps, xT, grid)
    rel = float(np.linalg.norm(rec - x0) / max(np.linalg.norm(x0), 1.0))
    checks.append(("roundtrip-n200", rel <= 1e-6, f"rel err {rel:.2e}"))

    width = max(len(name) for name, _, _ in checks)
    failed = 0
    for name, ok, detail in checks:
        status = "PASS" if ok else "FAIL"
        print(f"{name.ljust(width)}  {status}  {detail}")
        failed += 0 if ok else 1
    print(f"{failed} of {len(checks)} checks failed" if failed else f"all {len(checks)} checks passed")
    return 1 if failed else 0


# --- entry point ------------------------------------------------------------


def _resolve_threads(flag_value: int | None) -> int:
    if flag_value is None:
        env = os.environ.get("BRIDGEKIT_THREADS")
        flag_value = int(env) if env else 0
    if flag_value == 0:
        return os.cpu_count() or 1
    if flag_value < 0:
        raise ConfigInvalid(f"--threads must be >= 0, got {flag_value}")
    return flag_value


def main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(prog="bridgekit", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)
    runp = sub.add_parser("run", help="run one experiment from a JSON config")
    runp.add_argument("--config", required=True, help="path to the JSON run configuration")
    runp.add_argument("--out", default=None, help="output directory (overrides config)")
    runp.add_argument("--seed", type=int, default=None, help="seed override (64-bit unsigned)")
    runp.add_argument("--threads", type=int, default=None,
                      help="worker threads; 0 = auto; falls back to BRIDGEKIT_THREADS")
    sub.add_parser("selftest", help="run the fast built-in verification checks")

    args = parser.parse_args(argv)
    if args.command == "selftest":
        return selftest()

    try:
        threads = _resolve_threads(args.threads)
        with open(args.config) as fh:
            raw = json.load(fh)
        cfg = load_config(raw, out_override=args.out, seed_override=args.seed)
    except (OSError, json.JSONDecodeError, ConfigInvalid) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    try:
        return run(cfg, threads=threads)
    except NumericalFailure as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
