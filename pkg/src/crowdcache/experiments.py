"""
Experimental protocol: base-case sampling, convergence comparison,
scaling study, sensitivity sweeps and the fixed-fraction baselines.

Every replication derives its own generators from ``(seed, rep, ...)``
through ``numpy.random.SeedSequence`` and PCG64, so results do not depend
on execution order or worker count.
"""

from __future__ import annotations

import csv
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import InvalidInputError, SolverFailureError
from .game import GameParams, StrategyProfile, utilities
from .graphs import (
    DEFAULT_BOX_M,
    DEFAULT_MAX_STEP_M,
    DEFAULT_RADIUS_RANGE,
    DevicePositions,
    MobileGraphs,
)
from .solvers import (
    RunTrace,
    SolverConfig,
    solve_centralized,
    solve_dcrowdcache,
    solve_dcrowdcache_m,
    solve_ne_oracle,
)

THREADS_ENV = "CROWDCACHE_THREADS"
SCALING_SIZES = (2**8, 2**9, 2**10, 2**11, 2**12)
SENSITIVITY_FACTORS = ("gamma", "price", "qcost")
SWEEP_ALGORITHMS = ("Proposed", "Heuristic", "Average")
HEURISTIC_FRACTION = 0.2
AVERAGE_FRACTION = 0.5

SCALING_HEADER = ["n", "algorithm", "rep", "iterations", "wall_time_s"]
SWEEP_HEADER = ["factor", "level", "algorithm", "rep", "avg_utility", "total_resources", "iterations"]


@dataclass(frozen=True)
class BaseCaseSpec:
    """
    Sampling laws of the base case.

    ``gamma=None`` means ``1 / n_meds``.
    """

    n_meds: int = 2**9
    p_bar: float = 1.0
    q_range: tuple[float, float] = (0.01, 0.1)
    h_range: tuple[float, float] = (0.05, 0.15)
    cap_choices: tuple[float, ...] = (16.0, 32.0, 48.0, 64.0)
    gamma: float | None = None
    seed: int = 0

    def __post_init__(self):
        if self.n_meds < 1:
            raise InvalidInputError("n_meds must be >= 1")
        if self.gamma is not None and not self.gamma > 0:
            raise InvalidInputError("gamma must be > 0 (mu = 2 min Q + 2 gamma > 0)")

    @property
    def effective_gamma(self) -> float:
        return 1.0 / self.n_meds if self.gamma is None else float(self.gamma)


@dataclass(frozen=True)
class SensitivityFactors:
    gamma_scale: float = 1.0
    price_scale: float = 1.0
    qcost_scale: float = 1.0

    def __post_init__(self):
        if min(self.gamma_scale, self.price_scale, self.qcost_scale) <= 0:
            raise InvalidInputError("scaling factors must be positive")

    @classmethod
    def for_factor(cls, factor: str, level: float) -> "SensitivityFactors":
        if factor not in SENSITIVITY_FACTORS:
            raise InvalidInputError(f"unknown factor {factor!r}; expected one of {SENSITIVITY_FACTORS}")
        return cls(**{f"{factor}_scale": float(level)})

    def apply(self, params: GameParams) -> GameParams:
        return params.scaled(self.gamma_scale, self.price_scale, self.qcost_scale)


@dataclass(frozen=True)
class GraphConfig:
    """Knobs of the synthetic mobile graph process."""

    radius_range: tuple[float, float] = DEFAULT_RADIUS_RANGE
    box_m: float = DEFAULT_BOX_M
    max_step: float = DEFAULT_MAX_STEP_M
    window_b: int = 1

    @property
    def box(self) -> tuple[float, float, float, float]:
        return (0.0, 0.0, self.box_m, self.box_m)

    def build(self, n: int, seed: int, positions: DevicePositions | None = None) -> MobileGraphs:
        """
        Mobile graph process for ``n`` devices.

        Without ``positions`` the devices start uniformly in the box; the
        same seed drives placement, radii and every later move.
        """
        ss = np.random.SeedSequence(seed)
        place, move = (np.random.Generator(np.random.PCG64(s)) for s in ss.spawn(2))
        if positions is None:
            positions = DevicePositions.uniform(n, place, self.box, self.radius_range)
            box = self.box
        else:
            if positions.n != n:
                raise InvalidInputError(f"positions file has {positions.n} devices, game has {n}")
            box = None
        return MobileGraphs(positions, int(move.integers(2**63)), self.max_step, box)


def rep_seeds(seed: int, *keys: int) -> tuple[np.random.Generator, int]:
    """Parameter generator and graph seed for one replication key."""
    params_ss, graph_ss = np.random.SeedSequence([int(seed), *map(int, keys)]).spawn(2)
    return np.random.Generator(np.random.PCG64(params_ss)), int(graph_ss.generate_state(1, np.uint64)[0])


def sample_base_case(spec: BaseCaseSpec, rng: np.random.Generator | None = None) -> GameParams:
    """Draw Q, h and C from the base-case laws (in that order)."""
    if rng is None:
        rng = np.random.Generator(np.random.PCG64(spec.seed))
    n = spec.n_meds
    q = rng.uniform(*spec.q_range, n)
    h = rng.uniform(*spec.h_range, n)
    cap = rng.choice(np.asarray(spec.cap_choices, dtype=float), n)
    return GameParams(n, spec.p_bar, spec.effective_gamma, q, h, cap)


def baseline_fraction(params: GameParams, fraction: float) -> StrategyProfile:
    """
    Offer ``fraction * C_i``, then drop MEDs whose utility is not positive.

    Dropping raises the price, so the pass is repeated on the new profile
    until nobody else drops out. All MEDs are judged simultaneously in a
    pass, which makes the result independent of MED order.
    """
    if not 0.0 < fraction <= 1.0:
        raise InvalidInputError(f"fraction must lie in (0, 1], got {fraction!r}")
    x = fraction * params.cap
    for _ in range(params.n_meds):
        drop = (x > 0) & (utilities(params, x) <= 0)
        if not drop.any():
            break
        x = np.where(drop, 0.0, x)
    return StrategyProfile.in_box(params, x)


def max_deviation_gain(params: GameParams, x, points: int = 100) -> float:
    """Largest utility gain any single MED gets by moving to a grid point in [0, C_i]."""
    vec = np.asarray(x, dtype=float)
    base = utilities(params, vec)
    grid = np.linspace(0.0, 1.0, points)[None, :] * params.cap[:, None]
    others = vec.sum() - vec
    price = params.p_bar - params.gamma * (others[:, None] + grid)
    dev = price * grid - (params.q[:, None] * grid * grid + params.h[:, None] * grid)
    return float((dev.max(axis=1) - base).max())


def worker_count(jobs: int) -> int:
    env = os.environ.get(THREADS_ENV)
    cap = int(env) if env else (os.cpu_count() or 1)
    return max(1, min(cap, jobs))


def map_jobs(fn: Callable, jobs: Sequence, workers: int | None = None) -> list:
    """Run ``fn`` over ``jobs`` on a process pool, results in job order."""
    n = worker_count(len(jobs)) if workers is None else max(1, min(workers, len(jobs)))
    if n == 1:
        return [fn(job) for job in jobs]
    with ProcessPoolExecutor(max_workers=n) as pool:
        return list(pool.map(fn, jobs))


# --------------------------------------------------------------------------
# convergence comparison

CEN, DCC = "Cen-CrowdCache", "DCrowdCache"


def momentum_label(beta: float) -> str:
    return f"DCrowdCache-m(beta={beta:g})"


def _annotated(label: str, fn, *args, **kwargs):
    try:
        return fn(*args, **kwargs)
    except SolverFailureError as exc:
        raise type(exc)(f"[{label}] {exc}") from exc


def run_convergence_comparison(spec: BaseCaseSpec, cfg: SolverConfig, betas: Iterable[float] = (0.5, 0.8),
                               graph_cfg: GraphConfig = GraphConfig(), graph_seed: int | None = None,
                               positions: DevicePositions | None = None) -> dict[str, RunTrace]:
    """
    Centralized, plain and momentum runs on one sampled game and one graph process.

    ``cfg.beta`` is ignored; the momentum runs take their beta from
    ``betas``. Returns traces keyed by algorithm label.
    """
    params = sample_base_case(spec)
    x_star = solve_ne_oracle(params).x
    seed = spec.seed if graph_seed is None else graph_seed
    traces = {}
    _, traces[CEN] = _annotated(CEN, solve_centralized, params, replace(cfg, beta=0.0), x_star)
    graphs = graph_cfg.build(params.n_meds, seed, positions)
    _, traces[DCC] = _annotated(DCC, solve_dcrowdcache, params, replace(cfg, beta=0.0), graphs, x_star)
    for beta in betas:
        label = momentum_label(beta)
        _, traces[label] = _annotated(label, solve_dcrowdcache_m, params, replace(cfg, beta=beta), graphs, x_star)
    return traces


def _slug(label: str) -> str:
    return "".join(ch if ch.isalnum() or ch in ".-" else "_" for ch in label).strip("_")


def write_plot_data(traces: dict[str, RunTrace], out_dir) -> list[Path]:
    """One two-column ``k,error`` CSV per trace (Frobenius error of the estimates)."""
    out = Path(out_dir)
    paths = []
    for label, trace in traces.items():
        path = out / f"plot_{_slug(label)}.csv"
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(["k", "error"])
            for k, e in zip(trace.k.tolist(), trace.err_z.tolist()):
                writer.writerow([k, repr(e)])
        paths.append(path)
    return paths


# --------------------------------------------------------------------------
# scaling study


@dataclass(frozen=True)
class ScalingRow:
    n: int
    algorithm: str
    rep: int
    iterations: int
    wall_time_s: float
    converged: bool


@dataclass(frozen=True)
class _ScalingJob:
    n: int
    rep: int
    seed: int
    cfg: SolverConfig
    beta: float
    spec: BaseCaseSpec
    graph_cfg: GraphConfig


def _scaling_job(job: _ScalingJob) -> list[ScalingRow]:
    params_rng, graph_seed = rep_seeds(job.seed, job.n, job.rep)
    params = sample_base_case(replace(job.spec, n_meds=job.n), params_rng)
    x_star = solve_ne_oracle(params).x
    graphs = job.graph_cfg.build(job.n, graph_seed)
    rows = []
    for label, fn, beta in ((DCC, solve_dcrowdcache, 0.0),
                            (momentum_label(job.beta), solve_dcrowdcache_m, job.beta)):
        _, trace = _annotated(label, fn, params, replace(job.cfg, beta=beta), graphs, x_star)
        rows.append(ScalingRow(job.n, label, job.rep, trace.iterations, trace.wall_time_s, trace.converged))
    return rows


def run_scaling_study(sizes: Sequence[int] = SCALING_SIZES, reps: int = 20, cfg: SolverConfig | None = None,
                      beta: float = 0.5, spec: BaseCaseSpec = BaseCaseSpec(),
                      graph_cfg: GraphConfig = GraphConfig(), seed: int = 0,
                      workers: int | None = None) -> list[ScalingRow]:
    """
    DCrowdCache against DCrowdCache-m over the size grid.

    Each (size, rep) samples a fresh game and graph process, shared by the
    two algorithms. Rows are sorted by (n, algorithm, rep).
    """
    if reps < 1:
        raise InvalidInputError("reps must be >= 1")
    cfg = cfg or SolverConfig(alpha=20.0)
    jobs = [_ScalingJob(int(n), r, seed, cfg, beta, spec, graph_cfg) for n in sizes for r in range(reps)]
    rows = [row for chunk in map_jobs(_scaling_job, jobs, workers) for row in chunk]
    return sorted(rows, key=lambda r: (r.n, r.algorithm, r.rep))


def scaling_table(rows: Iterable[ScalingRow]) -> dict[tuple[int, str], tuple[float, float]]:
    """Mean (iterations, wall time) per (n, algorithm)."""
    groups: dict[tuple[int, str], list[ScalingRow]] = {}
    for row in rows:
        groups.setdefault((row.n, row.algorithm), []).append(row)
    return {key: (float(np.mean([r.iterations for r in g])), float(np.mean([r.wall_time_s for r in g])))
            for key, g in sorted(groups.items())}


def write_scaling_csv(rows: Iterable[ScalingRow], path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(SCALING_HEADER)
        for r in rows:
            writer.writerow([r.n, r.algorithm, r.rep, r.iterations, repr(r.wall_time_s)])


# --------------------------------------------------------------------------
# sensitivity sweeps


@dataclass(frozen=True)
class SweepRecord:
    factor: str
    level: float
    algorithm: str
    rep: int
    avg_utility: float
    total_resources: float
    iterations: int
    converged: bool = True


@dataclass
class SweepResult:
    factor: str
    levels: tuple[float, ...]
    records: list[SweepRecord] = field(default_factory=list)

    def level_means(self, algorithm: str = "Proposed") -> tuple[np.ndarray, np.ndarray]:
        """Per-level mean (avg utility, total resources), in level order."""
        util, res = [], []
        for level in self.levels:
            sel = [r for r in self.records if r.algorithm == algorithm and r.level == level]
            util.append(np.mean([r.avg_utility for r in sel]))
            res.append(np.mean([r.total_resources for r in sel]))
        return np.array(util), np.array(res)

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(SWEEP_HEADER)
            for r in self.records:
                writer.writerow([r.factor, repr(r.level), r.algorithm, r.rep, repr(r.avg_utility),
                                 repr(r.total_resources), r.iterations])


@dataclass(frozen=True)
class _SweepJob:
    factor: str
    levels: tuple[float, ...]
    algorithms: tuple[str, ...]
    rep: int
    seed: int
    spec: BaseCaseSpec
    cfg: SolverConfig
    graph_cfg: GraphConfig
    resample: bool


def _sweep_point(params: GameParams, algorithm: str, graphs, cfg: SolverConfig) -> tuple[np.ndarray, int, bool]:
    if algorithm == "Heuristic":
        return baseline_fraction(params, HEURISTIC_FRACTION).x, 0, True
    if algorithm == "Average":
        return baseline_fraction(params, AVERAGE_FRACTION).x, 0, True
    if algorithm != "Proposed":
        raise InvalidInputError(f"unknown algorithm {algorithm!r}; expected one of {SWEEP_ALGORITHMS}")
    solve = solve_dcrowdcache_m if cfg.beta else solve_dcrowdcache
    _, trace = _annotated("Proposed", solve, params, cfg, graphs)
    return trace.final_clamped.x, trace.iterations, trace.converged


def _sweep_job(job: _SweepJob) -> list[SweepRecord]:
    records = []
    params_rng, graph_seed = rep_seeds(job.seed, job.rep)
    base = sample_base_case(job.spec, params_rng)
    graphs = job.graph_cfg.build(job.spec.n_meds, graph_seed)
    for li, level in enumerate(job.levels):
        if job.resample:
            level_rng, _ = rep_seeds(job.seed, job.rep, li + 1)
            base = sample_base_case(job.spec, level_rng)
        params = SensitivityFactors.for_factor(job.factor, level).apply(base)
        for alg in job.algorithms:
            x, iters, ok = _sweep_point(params, alg, graphs, job.cfg)
            records.append(SweepRecord(job.factor, level, alg, job.rep,
                                       float(utilities(params, x).mean()), float(x.sum()), iters, ok))
    return records


def run_sensitivity(factor: str, levels: Sequence[float], algorithms: Sequence[str] = SWEEP_ALGORITHMS,
                    reps: int = 20, spec: BaseCaseSpec = BaseCaseSpec(), cfg: SolverConfig | None = None,
                    graph_cfg: GraphConfig = GraphConfig(), seed: int = 0, resample: bool = False,
                    workers: int | None = None) -> SweepResult:
    """
    Scale one base parameter over ``levels`` and record equilibrium metrics.

    By default each rep samples one game and one graph process and reuses
    them at every level (paired comparison); ``resample=True`` draws a new
    game per level instead. ``Proposed`` is DCrowdCache-m when
    ``cfg.beta > 0`` and DCrowdCache otherwise.
    """
    if factor not in SENSITIVITY_FACTORS:
        raise InvalidInputError(f"unknown factor {factor!r}; expected one of {SENSITIVITY_FACTORS}")
    levels = tuple(float(v) for v in levels)
    if not levels or min(levels) <= 0:
        raise InvalidInputError("levels must be a nonempty list of positive reals")
    if reps < 1:
        raise InvalidInputError("reps must be >= 1")
    cfg = cfg or SolverConfig(alpha=20.0, beta=0.8)
    jobs = [_SweepJob(factor, levels, tuple(algorithms), r, seed, spec, cfg, graph_cfg, resample)
            for r in range(reps)]
    records = [rec for chunk in map_jobs(_sweep_job, jobs, workers) for rec in chunk]
    order = {lvl: i for i, lvl in enumerate(levels)}
    records.sort(key=lambda r: (order[r.level], r.algorithm, r.rep))
    return SweepResult(factor, levels, records)
