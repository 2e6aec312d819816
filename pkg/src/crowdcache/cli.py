"""
Command-line entry point.

    crowdcache <mode> --config <path> [--out <dir>] [--seed <int>] [--quiet]

Exit status is 0 on success, 1 when a solver or ingestion step fails and
2 for usage or configuration errors.
"""

from __future__ import annotations

import argparse
import csv
import json
import math
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from .config import MODES, RunConfig, ingest_positions, load_config
from .errors import ConfigError, CrowdCacheError, UndefinedQuantityError
from .experiments import (
    BaseCaseSpec,
    run_convergence_comparison,
    run_scaling_study,
    run_sensitivity,
    sample_base_case,
    scaling_table,
    write_plot_data,
    write_scaling_csv,
)
from .game import GameParams, analysis_constants
from .solvers import (
    max_admissible_step,
    solve_centralized,
    solve_dcrowdcache,
    solve_dcrowdcache_m,
    step_size_report,
)

EXIT_OK, EXIT_FAILURE, EXIT_USAGE = 0, 1, 2


class _Console:
    def __init__(self, quiet: bool):
        self.quiet = quiet

    def line(self, text: str) -> None:
        if not self.quiet:
            print(text, flush=True)


def _game(cfg: RunConfig) -> GameParams:
    return cfg.inline_params or sample_base_case(cfg.base_case)


def _positions(cfg: RunConfig, n: int):
    path = cfg.raw["positions"]
    if path is None:
        return None
    rng = np.random.Generator(np.random.PCG64(cfg.seed("graph")))
    return ingest_positions(path, cfg.graph.radius_range, rng, n_expected=n)


def _graphs(cfg: RunConfig, n: int):
    return cfg.graph.build(n, cfg.seed("graph"), _positions(cfg, n))


def _summary_line(trace) -> str:
    return (f"{trace.algorithm}: iterations={trace.iterations} final_error={trace.final_error:.6e} "
            f"wall_time={trace.wall_time_s:.3f}s converged={str(trace.converged).lower()}")


def _write_json(path: Path, obj) -> None:
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _export_snapshots(graphs, count: int, out: Path) -> None:
    if count <= 0:
        return
    with open(out / "snapshot_edges.csv", "w", newline="") as fe, \
            open(out / "snapshot_weights.csv", "w", newline="") as fw:
        edges, weights = csv.writer(fe, lineterminator="\n"), csv.writer(fw, lineterminator="\n")
        edges.writerow(["k", "i", "j"])
        weights.writerow(["k", "i", "j", "w"])
        for k in range(count):
            snap = graphs.snapshot(k)
            for i, j in sorted(snap.edges):
                edges.writerow([k, i, j])
            for i, j in zip(*np.nonzero(snap.weights)):
                weights.writerow([k, int(i), int(j), repr(float(snap.weights[i, j]))])


def _write_profile(path: Path, x) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["i", "x"])
        for i, v in enumerate(np.asarray(x).tolist()):
            writer.writerow([i, repr(v)])


def _mode_solve(cfg: RunConfig, out: Path, con: _Console) -> None:
    params = _game(cfg)
    solver = cfg.solver
    algorithm = cfg.raw["algorithm"]
    if algorithm == "centralized":
        _, trace = solve_centralized(params, solver)
    else:
        graphs = _graphs(cfg, params.n_meds)
        _export_snapshots(graphs, cfg.raw["graph"]["export_snapshots"], out)
        fn = solve_dcrowdcache if algorithm == "dcrowdcache" else solve_dcrowdcache_m
        _, trace = fn(params, solver, graphs)
    trace.write_csv(out / "trace.csv")
    trace.write_summary(out / "summary.json")
    _write_profile(out / "final_profile.csv", trace.final.x)
    con.line(_summary_line(trace))


def _mode_compare(cfg: RunConfig, out: Path, con: _Console) -> None:
    spec = cfg.base_case
    if cfg.inline_params is not None:
        raise ConfigError("compare mode samples its game from 'base_case'; remove 'params'")
    positions = _positions(cfg, spec.n_meds)
    traces = run_convergence_comparison(spec, cfg.solver, cfg.section("compare")["betas"], cfg.graph,
                                        graph_seed=cfg.seed("graph"), positions=positions)
    summaries = []
    for label, trace in traces.items():
        slug = write_plot_data({label: trace}, out)[0].stem.removeprefix("plot_")
        trace.write_csv(out / f"trace_{slug}.csv")
        summaries.append(trace.summary())
        con.line(_summary_line(trace))
    _write_json(out / "summary.json", summaries)


def _mode_scale(cfg: RunConfig, out: Path, con: _Console) -> None:
    sc = cfg.section("scale")
    rows = run_scaling_study(sc["sizes"], sc["reps"], replace(cfg.solver, beta=0.0), sc["beta"], cfg.base_case,
                             cfg.graph, cfg.seed("params"))
    write_scaling_csv(rows, out / "scaling.csv")
    for (n, alg), (iters, wall) in scaling_table(rows).items():
        con.line(f"{alg}: n={n} mean_iterations={iters:.1f} mean_wall_time={wall:.3f}s")


def _mode_sweep(cfg: RunConfig, out: Path, con: _Console) -> None:
    sw = cfg.section("sweep")
    spec = BaseCaseSpec(n_meds=sw["n_meds"], p_bar=cfg.raw["base_case"]["p_bar"],
                        gamma=cfg.raw["base_case"]["gamma"], seed=cfg.seed("params"))
    for factor in sw["factors"]:
        result = run_sensitivity(factor, sw["levels"], sw["algorithms"], sw["reps"], spec, cfg.solver,
                                 cfg.graph, cfg.seed("params"), sw["resample"])
        result.write_csv(out / f"sweep_{factor}.csv")
        for alg in sw["algorithms"]:
            util, res = result.level_means(alg)
            for level, u, r in zip(result.levels, util, res):
                con.line(f"{alg}: {factor}={level:g} avg_utility={u:.6g} total_resources={r:.6g}")


def _mode_diagnose(cfg: RunConfig, out: Path, con: _Console) -> None:
    params = _game(cfg)
    consts = analysis_constants(params)
    dg = cfg.section("diagnose")
    c_max = dg["c_max"]
    if c_max is None:
        graphs = _graphs(cfg, params.n_meds)
        cs = [graphs.snapshot(k).contraction for k in range(dg["snapshots"])]
        cs = [c for c in cs if c is not None]
        if not cs:
            raise UndefinedQuantityError("every diagnosed snapshot is disconnected; set 'diagnose.c_max'")
        c_max = max(cs)
    alpha = cfg.solver.alpha
    report = step_size_report(params, c_max, alpha) if 0 < c_max < 1 else None
    alpha_hat = max_admissible_step(params, c_max) if 0 < c_max < 1 else math.nan
    result = {
        "mu": consts.mu, "l1": consts.l1, "l2": consts.l2, "l": consts.l, "xi": consts.xi,
        "c_max": c_max, "alpha": alpha, "alpha_hat": alpha_hat,
        "alpha_upper_simple": 2.0 * consts.xi / consts.l**2,
        "lambda_max": report.lambda_max if report else math.nan,
        "contracts": report.contracts if report else False,
        "sylvester_flags": list(report.sylvester_flags) if report else [],
    }
    _write_json(out / "diagnose.json", result)
    con.line(f"mu={consts.mu!r} L1={consts.l1!r} L2={consts.l2!r} L={consts.l!r} xi={consts.xi!r}")
    con.line(f"c_max={c_max!r} alpha_hat={alpha_hat!r} lambda_max(alpha={alpha!r})={result['lambda_max']!r} "
             f"contracts={str(result['contracts']).lower()}")


_DISPATCH = {
    "solve": _mode_solve,
    "compare": _mode_compare,
    "scale": _mode_scale,
    "sweep": _mode_sweep,
    "diagnose": _mode_diagnose,
}


def run(cfg: RunConfig, quiet: bool = False) -> int:
    """Execute one configured run; returns the process exit status."""
    con = _Console(quiet)
    out = Path(cfg.out)
    try:
        out.mkdir(parents=True, exist_ok=True)
        (out / "resolved_config.json").write_text(cfg.to_json())
        _DISPATCH[cfg.mode](cfg, out, con)
    except ConfigError as exc:
        print(f"crowdcache {cfg.mode}: config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (CrowdCacheError, OSError) as exc:
        print(f"crowdcache {cfg.mode}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_FAILURE
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="crowdcache", description="Decentralized NE seeking for the CrowdCache game.")
    parser.add_argument("mode", choices=MODES)
    parser.add_argument("--config", required=True, help="JSON run configuration")
    parser.add_argument("--out", help="output directory (overrides the config)")
    parser.add_argument("--seed", type=int, help="use this seed for params, graph and init")
    parser.add_argument("--quiet", action="store_true", help="suppress per-algorithm summary lines")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config)
        if args.seed is not None and args.seed < 0:
            raise ConfigError("--seed must be >= 0")
        cfg = cfg.with_overrides(out=args.out, seed=args.seed)
        if cfg.mode != args.mode:
            cfg = RunConfig({**cfg.to_dict(), "mode": args.mode})
    except ConfigError as exc:
        print(f"crowdcache: config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    return run(cfg, quiet=args.quiet)


if __name__ == "__main__":
    sys.exit(main())
