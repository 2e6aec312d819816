import csv
import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from crowdcache.errors import InvalidInputError, StepSizeTooLargeError
from crowdcache.game import GameParams, analysis_constants, game_mapping
from crowdcache.graphs import DevicePositions, GraphSequence, GraphSnapshot, MobileGraphs
from crowdcache.solvers import (
    SolverConfig,
    fixed_point_residual,
    lambda_max_qbar,
    max_admissible_step,
    ne_by_enumeration,
    ne_by_projected_gradient,
    qbar_matrix,
    solve_centralized,
    solve_dcrowdcache,
    solve_dcrowdcache_m,
    solve_ne_oracle,
    step_size_report,
)


def two_med(cap=10.0):
    return GameParams(2, 1.0, 0.1, [0.05, 0.05], [0.1, 0.1], [cap, cap])


def k2_sequence():
    return GraphSequence([GraphSnapshot.from_edges([(0, 1)], 2)])


def random_game(rng, n):
    return GameParams(n, rng.uniform(0.2, 3), rng.uniform(0.01, 0.5), rng.uniform(0.01, 0.5, n),
                      rng.uniform(0, 0.5, n), rng.uniform(0.5, 10, n))


def ring(n):
    return GraphSnapshot.from_edges([(i, (i + 1) % n) for i in range(n)] if n > 2 else [(0, 1)], n)


# --- oracle ------------------------------------------------------------------------

def test_oracle_examples():
    np.testing.assert_allclose(solve_ne_oracle(two_med()).x, [2.25, 2.25], atol=1e-12)
    one = GameParams(1, 1.0, 0.1, [0.05], [0.1], [2.0])
    np.testing.assert_allclose(solve_ne_oracle(one).x, [2.0], atol=1e-12)
    low = GameParams(3, 0.1, 0.1, [0.05] * 3, [0.1, 0.2, 0.3], [5, 5, 5])
    np.testing.assert_array_equal(solve_ne_oracle(low).x, [0, 0, 0])


def test_interior_solution_solves_linear_system():
    np.testing.assert_allclose(np.linalg.solve([[0.3, 0.1], [0.1, 0.3]], [0.9, 0.9]), [2.25, 2.25])


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 9), st.integers(0, 2**32 - 1))
def test_enumeration_matches_pg_and_variational_inequality(n, seed):
    rng = np.random.default_rng(seed)
    p = random_game(rng, n)
    xe, xp = ne_by_enumeration(p), ne_by_projected_gradient(p)
    assert np.abs(xe - xp).max() < 1e-8
    assert fixed_point_residual(p, xe) < 1e-10
    # VI check against random feasible points: <F(x*), y - x*> >= 0
    f = game_mapping(p, xe)
    ys = rng.uniform(0, p.cap, (200, n))
    assert ((ys - xe) @ f).min() >= -1e-9


def test_oracle_method_selection():
    rng = np.random.default_rng(1)
    p = random_game(rng, 14)
    with pytest.raises(InvalidInputError):
        ne_by_enumeration(p)
    assert fixed_point_residual(p, solve_ne_oracle(p).x) < 1e-10


# --- config ---------------------------------------------------------------------------

@pytest.mark.parametrize("kwargs", [dict(alpha=0), dict(alpha=1, beta=1.0), dict(alpha=1, beta=-0.1),
                                    dict(alpha=1, tol=0), dict(alpha=1, init="ones"), dict(alpha=1, stop="x")])
def test_solver_config_validation(kwargs):
    with pytest.raises(InvalidInputError):
        SolverConfig(**kwargs)


# --- centralized ----------------------------------------------------------------------

def test_centralized_one_step_from_zero():
    p = two_med()
    alpha = 0.7
    _, tr = solve_centralized(p, SolverConfig(alpha=alpha, max_iters=1))
    np.testing.assert_allclose(tr.final.x, np.clip(alpha * (p.p_bar - p.h), 0, p.cap), atol=1e-15)


def test_centralized_start_at_ne_terminates_immediately():
    p = two_med()
    x_star = solve_ne_oracle(p).x
    for alpha in (1e-3, 1.0, 50.0):
        _, tr = solve_centralized(p, SolverConfig(alpha=alpha), initial=x_star)
        assert tr.iterations == 0 and tr.converged and tr.final_error == 0.0


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_centralized_error_monotone_at_small_step(seed):
    p = two_med()
    cfg = SolverConfig(alpha=1 / analysis_constants(p).l, init="seeded-uniform", init_seed=seed)
    _, tr = solve_centralized(p, cfg)
    assert tr.converged
    assert np.all(np.diff(tr.err_x) <= 1e-15)


def test_centralized_divergence_guard():
    # projection keeps iterates bounded, so the guard fires relative to a tiny start error
    p = two_med()
    x_near = solve_ne_oracle(p).x + 1e-9
    with pytest.raises(StepSizeTooLargeError, match="alpha"):
        solve_centralized(p, SolverConfig(alpha=100.0), initial=x_near)


# --- decentralized --------------------------------------------------------------------

def test_dcrowdcache_linear_rate_on_complete_graph():
    p = two_med()
    _, tr = solve_dcrowdcache(p, SolverConfig(alpha=1.0, tol=1e-10), k2_sequence())
    assert tr.converged
    half = len(tr.k) // 2
    k, y = tr.k[half:], np.log(tr.err_z[half:])
    slope, icpt = np.polyfit(k, y, 1)
    r2 = 1 - ((y - (slope * k + icpt)) ** 2).sum() / ((y - y.mean()) ** 2).sum()
    assert slope < 0 and r2 > 0.99


def test_identical_rows_at_ne_stay_put():
    rng = np.random.default_rng(2)
    p = random_game(rng, 6)
    x_star = solve_ne_oracle(p).x
    z0 = np.tile(x_star, (6, 1))
    seq = GraphSequence([ring(6)])
    for solve in (solve_dcrowdcache, solve_dcrowdcache_m):
        cfg = SolverConfig(alpha=0.5, beta=0.5, stop="residual", tol=1e-300, max_iters=50)
        _, tr = solve(p, cfg, seq, initial=z0)
        assert tr.iterations == 50
        assert tr.err_z.max() < 1e-12


def test_algorithm1_actions_stay_in_box_and_disagreement_vanishes():
    rng = np.random.default_rng(3)
    p = random_game(rng, 8)
    seq = GraphSequence([ring(8)])
    cfg = SolverConfig(alpha=0.3, tol=1e-9, init="seeded-uniform", init_seed=4)
    _, tr = solve_dcrowdcache(p, cfg, seq)
    assert tr.converged and tr.final.feasible
    assert tr.disagreement[-1] < 1e-6 * tr.disagreement.max()
    assert np.abs(tr.final.x - tr.x_star).max() <= cfg.tol * tr.err_x[0] + 1e-8


def test_momentum_beta_zero_matches_algorithm1_bitwise():
    rng = np.random.default_rng(5)
    p = random_game(rng, 7)
    seq = GraphSequence([ring(7), GraphSnapshot.from_edges([(0, 3), (1, 5), (2, 6), (3, 4)], 7)], 2)
    cfg = SolverConfig(alpha=0.4, beta=0.0, max_iters=300, init="seeded-uniform", init_seed=8)
    _, a = solve_dcrowdcache(p, cfg, seq)
    _, b = solve_dcrowdcache_m(p, cfg, seq)
    np.testing.assert_array_equal(a.estimates, b.estimates)
    np.testing.assert_array_equal(a.err_z, b.err_z)


def test_momentum_may_leave_box_unless_clamped():
    p = GameParams(3, 1.0, 0.1, [0.05] * 3, [0.1] * 3, [5.0, 5.0, 5.0])
    seq = GraphSequence([ring(3)])
    _, tr = solve_dcrowdcache_m(p, SolverConfig(alpha=20.0, beta=0.9, max_iters=4), seq)
    np.testing.assert_allclose(tr.final.x, [-4.5] * 3, atol=1e-12)
    assert not tr.final.feasible
    assert tr.final_clamped.feasible
    _, cl = solve_dcrowdcache_m(p, SolverConfig(alpha=20.0, beta=0.9, max_iters=4, clamp_momentum=True), seq)
    assert cl.final.feasible


def test_local_engine_matches_matrix_and_reads_only_neighbours():
    rng = np.random.default_rng(6)
    n = 9
    p = random_game(rng, n)
    pos = DevicePositions.uniform(n, rng, (0, 0, 400, 400))
    graphs = MobileGraphs(pos, seed=3, max_step=30.0)
    cfg = SolverConfig(alpha=0.3, beta=0.4, max_iters=40, init="seeded-uniform", init_seed=1)
    log = []
    _, loc = solve_dcrowdcache_m(p, cfg, graphs, engine="local", touch_log=lambda k, i, s: log.append((k, i, s)))
    _, mat = solve_dcrowdcache_m(p, cfg, graphs)
    np.testing.assert_allclose(loc.estimates, mat.estimates, rtol=0, atol=1e-12)
    assert len(log) == 40 * n
    for k, i, touched in log:
        assert touched == graphs.snapshot(k).neighbor_sets[i]


def test_dimension_mismatch_rejected():
    with pytest.raises(InvalidInputError):
        solve_dcrowdcache(two_med(), SolverConfig(alpha=1.0), GraphSequence([ring(3)]))


def test_determinism():
    rng = np.random.default_rng(7)
    p = random_game(rng, 10)
    pos = DevicePositions.uniform(10, np.random.default_rng(1), (0, 0, 300, 300))
    cfg = SolverConfig(alpha=0.2, beta=0.5, init="seeded-uniform", init_seed=2, max_iters=500)
    runs = [solve_dcrowdcache_m(p, cfg, MobileGraphs(pos, seed=5))[1] for _ in range(2)]
    np.testing.assert_array_equal(runs[0].err_z, runs[1].err_z)
    np.testing.assert_array_equal(runs[0].estimates, runs[1].estimates)


def test_trace_exports(tmp_path):
    _, tr = solve_dcrowdcache(two_med(), SolverConfig(alpha=1.0), k2_sequence())
    tr.write_csv(tmp_path / "t.csv")
    tr.write_summary(tmp_path / "s.json")
    rows = list(csv.reader(open(tmp_path / "t.csv")))
    assert rows[0] == ["k", "err_z", "err_x", "disagreement"]
    assert len(rows) == tr.iterations + 2
    doc = json.load(open(tmp_path / "s.json"))
    assert set(doc) == {"algorithm", "n_meds", "alpha", "beta", "iterations", "wall_time_s", "converged",
                        "final_error"}
    assert tr.iterations <= 50_000 and min(tr.err_x.min(), tr.err_z.min(), tr.disagreement.min()) >= 0


# --- step-size analysis -----------------------------------------------------------

def bisect_first_contracting(consts, c, hi):
    """Independent oracle: scan then bisect with numpy's symmetric eigen-solver."""
    lam = lambda a: np.linalg.eigvalsh(qbar_matrix(consts, c, a)).max()
    grid = np.linspace(0, hi, 2001)[1:]
    ok = [a for a in grid if lam(a) < 1]
    return ok


@pytest.mark.parametrize("c", [0.05, 0.3, 0.7, 0.95])
def test_lambda_max_closed_form_matches_eigvalsh(c):
    consts = analysis_constants(two_med())
    for a in np.linspace(0, 2 * consts.xi / consts.l ** 2, 17):
        assert lambda_max_qbar(consts, c, a) == pytest.approx(np.linalg.eigvalsh(qbar_matrix(consts, c, a)).max(),
                                                              rel=1e-12, abs=1e-14)


def test_alpha_zero_limit():
    consts = analysis_constants(two_med())
    assert lambda_max_qbar(consts, 0.5, 0.0) == 1.0
    np.testing.assert_array_equal(qbar_matrix(consts, 0.5, 0.0), [[1, 0], [0, 0.25]])
    ok = bisect_first_contracting(consts, 0.5, 2 * consts.xi / consts.l ** 2)
    assert ok and step_size_report(two_med(), 0.5, ok[0]).contracts


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 30), st.integers(0, 2**32 - 1), st.floats(0.01, 0.99))
def test_report_flags_and_bounds(n, seed, c):
    p = random_game(np.random.default_rng(seed), n)
    a_hat = max_admissible_step(p, c)
    simple = 2 * analysis_constants(p).xi / analysis_constants(p).l ** 2
    assert 0 < a_hat <= simple
    assert step_size_report(p, c, a_hat / 2).lambda_max < 1
    assert step_size_report(p, c, 1.01 * a_hat).lambda_max >= 1
    for a in (a_hat / 3, a_hat * 0.9, a_hat * 1.5, simple, 2 * simple):
        r = step_size_report(p, c, a)
        assert r.sylvester_flags[0]
        if r.contracts and n > 1:
            assert all(r.sylvester_flags)
        if a >= simple:
            assert not r.contracts
        if a > simple:
            assert not r.sylvester_flags[2]


def test_single_med_contracts_without_positive_determinant():
    # with N = 1, xi = L and det(Qbar) can be negative while lambda_max < 1
    p = GameParams(1, 1.0, 0.1, [0.05], [0.1], [10.0])
    r = step_size_report(p, 0.1, 0.5 / analysis_constants(p).l)
    assert r.contracts and not r.sylvester_flags[1]


def test_admissible_step_shrinks_with_c():
    p = random_game(np.random.default_rng(11), 12)
    steps = [max_admissible_step(p, c) for c in np.linspace(0.05, 0.99, 25)]
    assert all(b <= a for a, b in zip(steps, steps[1:]))


def test_step_size_report_rejects_bad_c():
    with pytest.raises(InvalidInputError):
        step_size_report(two_med(), 1.0, 0.1)
