"""Acceptance suite: one test per criterion, summarized at the end of the run."""

import time

import numpy as np
import pytest

from oracles import qp_active_set, random_qp, run_balance, sensitivity_vs_fd, toy_setup, two_link_case
from test_forecast import star1_series
from utnmpc.cli import main
from utnmpc.forecast import build_weights, fit, predict
from utnmpc.harness import default_scenario, default_scenario_text, run_interleaved, run_scenario
from utnmpc.mpc.centralized import predict_cost_centralized, solve_centralized
from utnmpc.mpc.distributed import CoordOptions, solve_distributed
from utnmpc.mpc.model import green_bounds
from utnmpc.network import default_benchmark
from utnmpc.solver import SolveOptions, solve
from test_solver import qp_problem

criterion = pytest.mark.criterion


@criterion(1, "flow balance on 100 random networks within 1e-9, no clamps, under 60 s")
def test_c1_conservation():
    t0 = time.perf_counter()
    worst, clamps = 0.0, 0
    for seed in range(100):
        gap, c = run_balance(seed, steps=20)
        worst, clamps = max(worst, gap), clamps + c
    elapsed = time.perf_counter() - t0
    print(f"\nC1 worst balance gap {worst:.3e}, clamps {clamps}, {elapsed:.1f} s")
    assert worst <= 1e-9 and clamps == 0 and elapsed < 60.0


@criterion(2, "two-link 10-step trajectory equals the hand recursion within 1e-9")
def test_c2_two_link_oracle():
    got, expect, events = two_link_case(10)
    err = float(np.max(np.abs(got - expect)))
    print(f"\nC2 max deviation {err:.3e}")
    assert events == 0 and err <= 1e-9


@criterion(3, "20 random QPs within 1e-5 of active-set enumeration")
def test_c3_qp_optimality():
    opts = SolveOptions(opt_tol=1e-9, max_iter=5000)
    rng = np.random.default_rng(2024)
    gaps = []
    for _ in range(20):
        qp = random_qp(rng, int(rng.integers(2, 11)))
        f_star, _ = qp_active_set(*qp)
        rep = solve(qp_problem(*qp), opts)
        assert rep.max_violation <= 1e-8
        gaps.append((rep.objective - f_star) / max(1.0, abs(f_star)))
    print(f"\nC3 worst objective gap {max(gaps):.3e}")
    assert max(gaps) <= 1e-5


@criterion(4, "interface sensitivity equals finite differences within 1e-4 relative")
@pytest.mark.parametrize("m,i,x3", [(1, 2, 80.0), (1, 2, 370.0), (2, 1, 370.0)])
def test_c4_sensitivity(m, i, x3):
    mu, fd = sensitivity_vs_fd(m, i, x3=x3)
    rel = float(np.max(np.abs(mu - fd)) / max(np.max(np.abs(fd)), 1e-12))
    print(f"\nC4 ({m}->{i}, x3={x3}) relative error {rel:.3e}")
    assert np.any(fd != 0.0)
    assert rel <= 1e-4


@criterion(5, "coordinated plan within 1e-3 of the centralized optimum in at most 30 rounds")
def test_c5_dmpc_matches_cmpc():
    t, state, cfg, fc = toy_setup()
    res = solve_distributed(t, state, fc, cfg, CoordOptions())
    plan, _ = solve_centralized(t, state, fc, cfg)
    j_d = predict_cost_centralized(t, state, res.plan, fc, cfg)
    j_c = predict_cost_centralized(t, state, plan, fc, cfg)
    gap = (j_d - j_c) / abs(j_c)
    print(f"\nC5 gap {gap:.3e} after {res.rounds} rounds (converged {res.converged})")
    assert res.converged and res.rounds <= 30
    assert gap <= 1e-3


@pytest.fixture(scope="module")
def default_runs(tmp_path_factory):
    sc = default_scenario()
    root = tmp_path_factory.mktemp("default")
    t0 = time.perf_counter()
    runs = run_interleaved([(sc, c, root / c) for c in ("fixed", "cmpc", "dmpc")])
    elapsed = time.perf_counter() - t0
    return dict(zip(("fixed", "cmpc", "dmpc"), runs)), elapsed


def _applied_violations(res, topo, cfg):
    bounds = green_bounds(topo, cfg)
    bad = 0
    for _, greens in res.signals:
        for j in topo.junctions:
            tot = sum(greens[s] for s in j.phase_streams) + j.lost_time
            bad += abs(tot - j.cycle_time) > 1e-9
        bad += sum(not bounds[s][0] - 1e-9 <= g <= bounds[s][1] + 1e-9 for s, g in greens.items())
    return bad


@criterion(6, "default scenario: no state clamps, cycle sums and green bounds held every step")
def test_c6_default_constraints(default_runs):
    runs, _ = default_runs
    sc = default_scenario()
    for c in ("dmpc", "cmpc"):
        m = runs[c].metrics
        viol = _applied_violations(runs[c], sc.topology, sc.mpc)
        print(f"\nC6 {c}: state clamps {m.state_clamp_events}, queue clamps {m.queue_clamp_events}, "
              f"plan violations {m.plan_violations}/{viol}")
    m = runs["dmpc"].metrics
    assert m.state_clamp_events == 0
    assert m.plan_violations == 0 and _applied_violations(runs["dmpc"], sc.topology, sc.mpc) == 0


@criterion(7, "default scenario: DMPC time, TTS and max queue against CMPC and fixed time")
def test_c7_default_performance(default_runs):
    runs, elapsed = default_runs
    f, c, d = (runs[k].metrics for k in ("fixed", "cmpc", "dmpc"))
    print(f"\nC7 wall dmpc/cmpc {d.wall_time:.2f}/{c.wall_time:.2f} = {d.wall_time / c.wall_time:.3f}")
    print(f"C7 TTS fixed {f.tts:.0f}, cmpc {c.tts:.0f}, dmpc {d.tts:.0f}; dmpc/fixed {d.tts / f.tts:.3f}, "
          f"dmpc/cmpc {d.tts / c.tts:.4f}")
    print(f"C7 max queue cmpc {c.max_queue:.2f}, dmpc {d.max_queue:.2f}; all runs {elapsed:.1f} s")
    assert d.wall_time <= 0.7 * c.wall_time
    assert d.tts <= 0.95 * f.tts
    assert d.tts <= 1.02 * c.tts
    assert d.max_queue <= c.max_queue
    assert elapsed < 1800.0


@criterion(8, "STAR(1) coefficients within 0.1, 3-step forecast equals hand iteration, under 10 s")
def test_c8_star1():
    t0 = time.perf_counter()
    W = build_weights(default_benchmark(), 1)
    y = star1_series(W[1], 2000, seed=11)
    model = fit(y, p=1, d=0, q=0, m=1, weights=W)
    a, b = model.phi[0]
    got = predict(model, y, 3)
    M = a * np.eye(W.N) + b * W[1]
    x, err = y[-1], 0.0
    for h in range(3):
        x = M @ x
        err = max(err, float(np.max(np.abs(got[h] - x))))
    elapsed = time.perf_counter() - t0
    print(f"\nC8 phi = ({a:.4f}, {b:.4f}), forecast deviation {err:.2e}, {elapsed:.2f} s")
    assert abs(a - 0.6) <= 0.1 and abs(b - 0.2) <= 0.1
    assert err <= 1e-9 and elapsed < 10.0


@criterion(9, "metrics.json and trajectory.csv byte-identical at any worker count")
@pytest.mark.parametrize("controller", ["fixed", "cmpc", "dmpc"])
def test_c9_determinism(controller, tmp_path, monkeypatch):
    path = tmp_path / "s.yaml"
    path.write_text(default_scenario_text())
    files = []
    for w in (1, 4):
        monkeypatch.setenv("UTNMPC_WORKERS", str(w))
        out = tmp_path / f"w{w}"
        assert main(["run", "--scenario", str(path), "--controller", controller, "--out", str(out), "--quiet"]) == 0
        files.append(((out / "metrics.json").read_bytes(), (out / "trajectory.csv").read_bytes()))
    assert files[0] == files[1]


def test_single_run_equals_interleaved_run(default_runs):
    # the timing harness must not change what a controller does
    runs, _ = default_runs
    alone = run_scenario(default_scenario(), "dmpc")
    assert alone.metrics.deterministic_dict() == runs["dmpc"].metrics.deterministic_dict()
