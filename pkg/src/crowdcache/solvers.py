"""
Nash-equilibrium solvers and step-size diagnostics.

``solve_ne_oracle`` computes the unique equilibrium directly (active-set
enumeration for small games, projected gradient otherwise) and serves as
the reference every iterative method is measured against.

The iterative methods are

* ``solve_centralized``   full-information projected gradient play;
* ``solve_dcrowdcache``   consensus-based gradient play over a graph
  sequence, each MED keeping an estimate row of the whole profile;
* ``solve_dcrowdcache_m`` the same with heavy-ball momentum.

The decentralized methods run either as one matrix update per round
(``engine="matrix"``, the default) or MED by MED through
:func:`med_update`, which only ever receives the rows of its current
neighbours (``engine="local"``).
"""

from __future__ import annotations

import csv
import json
import math
import time
from collections.abc import Mapping
from dataclasses import dataclass
from typing import Callable, Iterator, Protocol

import numpy as np

from .errors import InvalidInputError, SolverFailureError, StepSizeTooLargeError
from .game import (
    AnalysisConstants,
    GameParams,
    StrategyProfile,
    analysis_constants,
    game_mapping,
    own_gradient_kernel,
)

INIT_MODES = ("zeros", "seeded-uniform")
STOP_MODES = ("oracle", "residual")
_EPS0 = 1e-15
ENUMERATION_MAX_N = 12


@dataclass(frozen=True)
class SolverConfig:
    """
    Iteration settings shared by all three iterative solvers.

    ``beta`` is only read by the momentum method. ``stop="oracle"`` ends a
    run once ``||x_k - x*|| / ||x_0 - x*|| < tol``; ``stop="residual"``
    uses ``||z_{k+1} - z_k||_F / max(||z_k||_F, 1) < tol`` instead.
    """

    alpha: float
    beta: float = 0.0
    tol: float = 1e-6
    max_iters: int = 50_000
    init: str = "zeros"
    init_seed: int = 0
    stop: str = "oracle"
    clamp_momentum: bool = False
    divergence_factor: float = 1e6

    def __post_init__(self):
        if not (math.isfinite(self.alpha) and self.alpha > 0):
            raise InvalidInputError(f"alpha must be > 0, got {self.alpha!r}")
        if not 0.0 <= self.beta < 1.0:
            raise InvalidInputError(f"beta must lie in [0, 1), got {self.beta!r}")
        if not self.tol > 0:
            raise InvalidInputError(f"tol must be > 0, got {self.tol!r}")
        if int(self.max_iters) < 1:
            raise InvalidInputError(f"max_iters must be >= 1, got {self.max_iters!r}")
        if self.init not in INIT_MODES:
            raise InvalidInputError(f"init must be one of {INIT_MODES}, got {self.init!r}")
        if self.stop not in STOP_MODES:
            raise InvalidInputError(f"stop must be one of {STOP_MODES}, got {self.stop!r}")
        if not self.divergence_factor > 1:
            raise InvalidInputError("divergence_factor must be > 1")


@dataclass
class RunTrace:
    """Per-iteration errors of one solver run plus its terminal record."""

    algorithm: str
    n_meds: int
    alpha: float
    beta: float
    x_star: np.ndarray
    k: np.ndarray
    err_z: np.ndarray
    err_x: np.ndarray
    disagreement: np.ndarray
    iterations: int
    wall_time_s: float
    converged: bool
    final: StrategyProfile
    final_clamped: StrategyProfile
    estimates: np.ndarray | None = None

    @property
    def final_error(self) -> float:
        return float(self.err_x[-1])

    @property
    def relative_errors(self) -> np.ndarray:
        return self.err_x / max(float(self.err_x[0]), _EPS0)

    def summary(self) -> dict:
        return {
            "algorithm": self.algorithm,
            "n_meds": self.n_meds,
            "alpha": self.alpha,
            "beta": self.beta,
            "iterations": self.iterations,
            "wall_time_s": self.wall_time_s,
            "converged": self.converged,
            "final_error": self.final_error,
        }

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(["k", "err_z", "err_x", "disagreement"])
            for row in zip(self.k.tolist(), self.err_z.tolist(), self.err_x.tolist(),
                           self.disagreement.tolist()):
                writer.writerow([row[0], *(repr(v) for v in row[1:])])

    def write_summary(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.summary(), fh, indent=2)
            fh.write("\n")


# --------------------------------------------------------------------------
# equilibrium oracle


def _ne_scale(params: GameParams) -> float:
    return max(1.0, params.p_bar, float(params.h.max()), params.gamma * float(params.cap.sum()))


def ne_by_enumeration(params: GameParams) -> np.ndarray:
    """
    Equilibrium by checking every {lower, interior, upper} active set.

    For a fixed active set the interior block of ``F(x) = 0`` is a
    diagonal-plus-rank-one system, solved here in closed form. The
    candidate with the smallest KKT violation is returned.
    """
    n = params.n_meds
    if n > ENUMERATION_MAX_N:
        raise InvalidInputError(f"enumeration is limited to n <= {ENUMERATION_MAX_N}")
    g, pbar = params.gamma, params.p_bar
    d = 2.0 * params.q + g
    cap, h = params.cap, params.h
    scale = _ne_scale(params)

    best_x, best_viol = None, math.inf
    total = 3 ** n
    powers = 3 ** np.arange(n)
    chunk = 3 ** min(n, 10)
    for start in range(0, total, chunk):
        codes = np.arange(start, min(start + chunk, total))
        state = (codes[:, None] // powers) % 3  # 0 lower, 1 interior, 2 upper
        free = state == 1
        upper = state == 2
        fixed_sum = np.where(upper, cap, 0.0).sum(axis=1)
        rhs = np.where(free, (pbar - h - g * fixed_sum[:, None]) / d, 0.0)
        inv = np.where(free, 1.0 / d, 0.0)
        free_sum = rhs.sum(axis=1) / (1.0 + g * inv.sum(axis=1))
        x = np.where(free, rhs - g * free_sum[:, None] * inv, np.where(upper, cap, 0.0))
        grad = d * x + g * x.sum(axis=1, keepdims=True) + h - pbar
        viol = np.where(free, np.maximum(np.maximum(-x, x - cap), 0.0),
                        np.where(upper, np.maximum(grad, 0.0), np.maximum(-grad, 0.0))).max(axis=1)
        i = int(np.argmin(viol))
        if viol[i] < best_viol:
            best_viol, best_x = float(viol[i]), x[i]
    if best_viol > 1e-9 * scale:
        raise SolverFailureError(f"no active set satisfies the KKT conditions (violation {best_viol:.3e})")
    return np.clip(best_x, 0.0, cap)


def ne_by_projected_gradient(params: GameParams, rel_tol: float = 1e-12,
                             max_iters: int = 10**7) -> np.ndarray:
    """
    Equilibrium by projected gradient from the origin.

    The step is ``1 / (max_i(2Q_i + gamma) + N gamma)``, an upper bound on
    the Jacobian norm, so the iteration contracts with factor
    ``rho = 1 - step * min_i(2Q_i + gamma)``. It stops once the a
    posteriori bound ``rho / (1 - rho) * ||x_{k+1} - x_k||`` drops below
    ``rel_tol * max(||x||, 1)``.
    """
    d = 2.0 * params.q + params.gamma
    step = 1.0 / (float(d.max()) + params.n_meds * params.gamma)
    rho = 1.0 - step * float(d.min())
    factor = rho / (1.0 - rho)
    x = np.zeros(params.n_meds)
    for _ in range(max_iters):
        x_next = np.clip(x - step * game_mapping(params, x), 0.0, params.cap)
        change = float(np.linalg.norm(x_next - x))
        x = x_next
        if factor * change <= rel_tol * max(float(np.linalg.norm(x)), 1.0):
            return x
    raise SolverFailureError(f"projected gradient did not converge within {max_iters} iterations")


def solve_ne_oracle(params: GameParams, method: str = "auto") -> StrategyProfile:
    """The unique Nash equilibrium of the game."""
    if method == "auto":
        method = "enumeration" if params.n_meds <= ENUMERATION_MAX_N else "projected-gradient"
    if method == "enumeration":
        x = ne_by_enumeration(params)
    elif method == "projected-gradient":
        x = ne_by_projected_gradient(params)
    else:
        raise InvalidInputError(f"unknown oracle method {method!r}")
    return StrategyProfile.in_box(params, x)


def fixed_point_residual(params: GameParams, x, alpha: float | None = None) -> float:
    """``||x - Proj_X[x - alpha F(x)]||``, zero exactly at the equilibrium (alpha defaults to 1/L)."""
    vec = np.asarray(x, dtype=float)
    if alpha is None:
        alpha = 1.0 / analysis_constants(params).l
    return float(np.linalg.norm(vec - np.clip(vec - alpha * game_mapping(params, vec), 0.0, params.cap)))


# --------------------------------------------------------------------------
# iterative solvers


class GraphSource(Protocol):
    n: int

    def snapshot(self, k: int): ...


def _initial_matrix(params: GameParams, cfg: SolverConfig) -> np.ndarray:
    n = params.n_meds
    if cfg.init == "zeros":
        return np.zeros((n, n))
    rng = np.random.Generator(np.random.PCG64(cfg.init_seed))
    own = rng.uniform(0.0, params.cap)
    z = rng.uniform(0.0, float(params.cap.max()), (n, n))
    np.fill_diagonal(z, own)
    return z


def _resolve_x_star(params: GameParams, x_star) -> np.ndarray:
    if x_star is None:
        return solve_ne_oracle(params).x
    vec = np.asarray(x_star, dtype=float)
    if vec.shape != (params.n_meds,):
        raise InvalidInputError("x_star has the wrong length")
    return vec


class _Recorder:
    """Collects trace rows and applies the stopping rule and divergence guard."""

    def __init__(self, algorithm: str, params: GameParams, cfg: SolverConfig, x_star: np.ndarray):
        self.algorithm = algorithm
        self.params = params
        self.cfg = cfg
        self.x_star = x_star
        self.rows: list[tuple[int, float, float, float]] = []
        self.err0: float | None = None
        self.t0 = time.perf_counter()

    def record(self, k: int, err_z: float, err_x: float, disagreement: float) -> None:
        if not (math.isfinite(err_z) and math.isfinite(err_x)):
            raise StepSizeTooLargeError(f"{self.algorithm}: non-finite iterate at k={k}; reduce alpha")
        if self.err0 is None:
            self.err0 = err_x
        elif err_x > self.cfg.divergence_factor * max(self.err0, _EPS0):
            raise StepSizeTooLargeError(
                f"{self.algorithm}: error grew by more than {self.cfg.divergence_factor:g}x "
                f"at k={k} (alpha={self.cfg.alpha:g} too large)"
            )
        self.rows.append((k, err_z, err_x, disagreement))

    def oracle_done(self) -> bool:
        return self.rows[-1][2] / max(self.err0, _EPS0) < self.cfg.tol

    def finish(self, final_x: np.ndarray, converged: bool, beta: float) -> RunTrace:
        wall = time.perf_counter() - self.t0
        k, ez, ex, dis = (np.array(col) for col in zip(*self.rows))
        return RunTrace(
            algorithm=self.algorithm,
            n_meds=self.params.n_meds,
            alpha=self.cfg.alpha,
            beta=beta,
            x_star=self.x_star,
            k=k.astype(int),
            err_z=ez,
            err_x=ex,
            disagreement=dis,
            iterations=int(k[-1]),
            wall_time_s=wall,
            converged=converged,
            final=StrategyProfile.unconstrained(self.params, final_x),
            final_clamped=StrategyProfile.in_box(self.params, np.clip(final_x, 0.0, self.params.cap)),
        )


def solve_centralized(params: GameParams, cfg: SolverConfig, x_star=None,
                      initial=None) -> tuple[StrategyProfile, RunTrace]:
    """
    Synchronous projected gradient play with full information (Cen-CrowdCache).

    ``initial`` overrides ``cfg.init`` with an explicit starting profile.
    """
    x_star = _resolve_x_star(params, x_star)
    rec = _Recorder("Cen-CrowdCache", params, cfg, x_star)
    if initial is None:
        x = np.diagonal(_initial_matrix(params, cfg)).copy()
    else:
        x = np.array(initial, dtype=float)
        if x.shape != (params.n_meds,):
            raise InvalidInputError(f"initial profile has shape {x.shape}, expected ({params.n_meds},)")
    root_n = math.sqrt(params.n_meds)

    def errors(k, x, prev):
        ex = float(np.linalg.norm(x - x_star))
        rec.record(k, root_n * ex, ex, 0.0)

    errors(0, x, None)
    converged = False
    prev = x
    for k in range(cfg.max_iters + 1):
        if cfg.stop == "oracle" and rec.oracle_done():
            converged = True
            break
        if k == cfg.max_iters:
            break
        total = np.full_like(x, x.sum())
        x_next = np.clip(x - cfg.alpha * own_gradient_kernel(params, x, total), 0.0, params.cap)
        prev, x = x, x_next
        errors(k + 1, x, prev)
        if cfg.stop == "residual":
            # every MED holds the full profile, so z = 1 x^T
            step = root_n * float(np.linalg.norm(x - prev))
            if step / max(root_n * float(np.linalg.norm(prev)), 1.0) < cfg.tol:
                converged = True
                break
    trace = rec.finish(x, converged, 0.0)
    return trace.final, trace


@dataclass(frozen=True)
class LocalData:
    """What MED i knows: its private costs plus the public price rule."""

    q: float
    h: float
    cap: float
    gamma: float
    p_bar: float


class _RecordingRows(Mapping):
    """Read-only view of neighbour rows that remembers which rows were read."""

    def __init__(self, rows: dict[int, np.ndarray]):
        self._rows = rows
        self.touched: set[int] = set()

    def __getitem__(self, j):
        row = self._rows[j]
        self.touched.add(j)
        return row

    def __iter__(self) -> Iterator[int]:
        return iter(self._rows)

    def __len__(self) -> int:
        return len(self._rows)


def med_update(i: int, rows: Mapping[int, np.ndarray], weights: Mapping[int, float], local: LocalData,
               alpha: float, beta: float = 0.0, own_prev=None, own_prev_prev=None,
               clamp_momentum: bool = False) -> np.ndarray:
    """
    One MED's round: mix neighbour estimates, then take a projected step.

    ``rows`` maps each neighbour j (including i) to its estimate vector
    z_k^j and ``weights`` to [W_k]_ij. For the momentum method
    ``own_prev`` / ``own_prev_prev`` are MED i's own rows z_k^i and
    z_{k-1}^i.
    """
    mixed = None
    for j in sorted(weights):
        term = weights[j] * rows[j]
        mixed = term if mixed is None else mixed + term
    own = mixed[i]
    grad = 2.0 * (local.q + local.gamma) * own + local.gamma * (mixed.sum() - own) + local.h - local.p_bar
    x_next = min(max(own - alpha * grad, 0.0), local.cap)
    new_row = mixed.copy()
    if beta:
        new_row += beta * (own_prev - own_prev_prev)
        x_next = x_next + beta * (own_prev[i] - own_prev_prev[i])
        if clamp_momentum:
            x_next = min(max(x_next, 0.0), local.cap)
    new_row[i] = x_next
    return new_row


TouchLog = Callable[[int, int, frozenset], None]


def _local_round(params: GameParams, snap, z: np.ndarray, z_prev: np.ndarray, alpha: float, beta: float,
                 clamp: bool, k: int, touch_log: TouchLog | None) -> np.ndarray:
    z_next = np.empty_like(z)
    w = snap.weights
    for i, nbrs in enumerate(snap.neighbor_sets):
        view = _RecordingRows({j: z[j] for j in nbrs})
        local = LocalData(params.q[i], params.h[i], params.cap[i], params.gamma, params.p_bar)
        z_next[i] = med_update(i, view, {j: w[i, j] for j in nbrs}, local, alpha, beta,
                               own_prev=z[i], own_prev_prev=z_prev[i], clamp_momentum=clamp)
        if touch_log is not None:
            touch_log(k, i, frozenset(view.touched))
    return z_next


def _matrix_round(params: GameParams, snap, z: np.ndarray, z_prev: np.ndarray, alpha: float, beta: float,
                  momentum: bool, clamp: bool) -> np.ndarray:
    r = snap.mixing_matrix @ z
    own = np.diagonal(r).copy()
    x_next = np.clip(own - alpha * own_gradient_kernel(params, own, r.sum(axis=1)), 0.0, params.cap)
    if momentum:
        z_next = r + beta * (z - z_prev)
        x_next = x_next + beta * (np.diagonal(z) - np.diagonal(z_prev))
        if clamp:
            x_next = np.clip(x_next, 0.0, params.cap)
    else:
        z_next = r
    np.fill_diagonal(z_next, x_next)
    return z_next


def _run_decentralized(algorithm: str, params: GameParams, cfg: SolverConfig, graphs: GraphSource,
                       x_star, momentum: bool, engine: str, touch_log: TouchLog | None,
                       initial) -> tuple[StrategyProfile, RunTrace]:
    if graphs.n != params.n_meds:
        raise InvalidInputError(f"graph has {graphs.n} nodes but the game has {params.n_meds} MEDs")
    if engine not in ("matrix", "local"):
        raise InvalidInputError(f"unknown engine {engine!r}")
    if touch_log is not None and engine != "local":
        raise InvalidInputError("touch logging needs engine='local'")
    x_star = _resolve_x_star(params, x_star)
    beta = cfg.beta if momentum else 0.0
    rec = _Recorder(algorithm, params, cfg, x_star)

    def errors(k, z):
        diff = z - x_star
        spread = z - z.mean(axis=0)
        rec.record(k, float(np.linalg.norm(diff)), float(np.linalg.norm(np.diagonal(diff))),
                   float(np.linalg.norm(spread)))

    if initial is None:
        z = _initial_matrix(params, cfg)
    else:
        z = np.array(initial, dtype=float)
        if z.shape != (params.n_meds, params.n_meds):
            raise InvalidInputError(f"initial estimates have shape {z.shape}, expected N x N")
    z_prev = z
    errors(0, z)
    converged = False
    for k in range(cfg.max_iters + 1):
        if cfg.stop == "oracle" and rec.oracle_done():
            converged = True
            break
        if k == cfg.max_iters:
            break
        snap = graphs.snapshot(k)
        if engine == "matrix":
            z_next = _matrix_round(params, snap, z, z_prev, cfg.alpha, beta, momentum, cfg.clamp_momentum)
        else:
            z_next = _local_round(params, snap, z, z_prev, cfg.alpha, beta, cfg.clamp_momentum, k, touch_log)
        z_prev, z = z, z_next
        errors(k + 1, z)
        if cfg.stop == "residual":
            if float(np.linalg.norm(z - z_prev)) / max(float(np.linalg.norm(z_prev)), 1.0) < cfg.tol:
                converged = True
                break
    trace = rec.finish(np.diagonal(z).copy(), converged, beta)
    trace.estimates = z
    return trace.final, trace


def solve_dcrowdcache(params: GameParams, cfg: SolverConfig, graphs: GraphSource, x_star=None,
                      engine: str = "matrix", touch_log: TouchLog | None = None,
                      initial=None):
    """
    Consensus-based projected gradient play (DCrowdCache).

    Every round each MED averages its neighbours' estimate rows with the
    Metropolis weights of snapshot k, keeps the mixed row as its new
    estimate of the others and replaces its own entry by a projected
    gradient step evaluated at the mixed row.
    """
    return _run_decentralized("DCrowdCache", params, cfg, graphs, x_star, False, engine, touch_log,
                              initial)


def solve_dcrowdcache_m(params: GameParams, cfg: SolverConfig, graphs: GraphSource, x_star=None,
                        engine: str = "matrix", touch_log: TouchLog | None = None,
                        initial=None):
    """
    DCrowdCache with heavy-ball momentum ``beta * (z_k - z_{k-1})``.

    The momentum is added after the projection, so actions can leave
    [0, C_i] for a while; set ``cfg.clamp_momentum`` to project again.
    """
    return _run_decentralized("DCrowdCache-m", params, cfg, graphs, x_star, True, engine, touch_log,
                              initial)


# --------------------------------------------------------------------------
# step-size analysis


@dataclass(frozen=True)
class StepSizeReport:
    alpha_tested: float
    lambda_max: float
    sylvester_flags: tuple[bool, bool, bool, bool]
    alpha_upper_simple: float
    contracts: bool


def qbar_matrix(consts: AnalysisConstants, c: float, alpha: float) -> np.ndarray:
    """The 2x2 matrix bounding one round of the error recursion."""
    L, xi, a = consts.l, consts.xi, alpha
    off = 2.0 * c * L * a
    return np.array([[1.0 - 2.0 * xi * a + L * L * a * a, off],
                     [off, (1.0 + 2.0 * L * a + L * L * a * a) * c * c]])


def _lambda_max_2x2(m: np.ndarray) -> float:
    a, b, d = m[0, 0], m[0, 1], m[1, 1]
    return float(0.5 * (a + d) + math.hypot(0.5 * (a - d), b))


def lambda_max_qbar(consts: AnalysisConstants, c: float, alpha: float) -> float:
    return _lambda_max_2x2(qbar_matrix(consts, c, alpha))


def _sylvester_flags(consts: AnalysisConstants, c: float, a: float) -> tuple[bool, bool, bool, bool]:
    L, xi = consts.l, consts.xi
    c2 = c * c
    f1 = L**2 * a**2 - 2 * xi * a + 1
    f2 = c2 * (L**4 * a**4 + 2 * L**2 * (L - xi) * a**3 - 2 * L * (L + 2 * xi) * a**2 + 2 * (L - xi) * a + 1)
    f3 = -(L**2) * a**2 + 2 * xi * a
    f4 = a * (L**4 * c2 * a**3 + 2 * L**2 * (L - xi) * c2 * a**2
              - (4 * L * (L + xi) * c2 + L**2 * (1 - c2)) * a + 2 * (1 - c2) * xi)
    return (f1 > 0, f2 > 0, f3 > 0, f4 > 0)


def _check_c(c_max: float):
    if not 0.0 < c_max < 1.0:
        raise InvalidInputError(f"c_max must lie in (0, 1), got {c_max!r}")


def step_size_report(params: GameParams, c_max: float, alpha: float) -> StepSizeReport:
    _check_c(c_max)
    if not alpha > 0:
        raise InvalidInputError("alpha must be > 0")
    consts = analysis_constants(params)
    lam = lambda_max_qbar(consts, c_max, alpha)
    return StepSizeReport(
        alpha_tested=float(alpha),
        lambda_max=lam,
        sylvester_flags=_sylvester_flags(consts, c_max, alpha),
        alpha_upper_simple=2.0 * consts.xi / consts.l**2,
        contracts=lam < 1.0,
    )


def max_admissible_step(params: GameParams, c_max: float, rel_tol: float = 1e-10) -> float:
    """
    Supremum of the interval (0, a) on which lambda_max(Qbar_alpha) < 1.

    Bisection on [0, 2 xi / L^2]; the upper end always fails.
    """
    _check_c(c_max)
    consts = analysis_constants(params)
    lo, hi = 0.0, 2.0 * consts.xi / consts.l**2
    while hi - lo > rel_tol * hi:
        mid = 0.5 * (lo + hi)
        if lambda_max_qbar(consts, c_max, mid) < 1.0:
            lo = mid
        else:
            hi = mid
    return lo
