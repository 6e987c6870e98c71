import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from oracles import run_balance, two_link_case
from toys import two_link
from utnmpc.dynamics import (
    EXIT, ClockSync, FlowRecord, LinkState, TrajectoryLogger, arrival_flow, compute_delay, initial_state,
    read_trajectory, regime_terms, resample_boundary_flow, step_link, step_network, stream_outflow,
    total_time_spent,
)
from utnmpc.mpc.model import equal_split
from utnmpc.network import LinkParams


def link(C=1000.0, lanes=1, v=40.0, sat=0.5, l_veh=7.0):
    return LinkParams(1, None, 1, C, lanes, v, sat, l_veh)


# ---------------------------------------------------------------------------
# delay


def test_delay_full_queue_is_zero():
    assert compute_delay(link(), 1000.0, 120.0) == (0, 0.0, 0.0)


def test_delay_hand_value():
    # 1000 veh * 7 m over one lane at 40 km/h = 7000 m / (100/9 m/s) = 630 s
    delta, gamma, tau = compute_delay(link(), 0.0, 120.0)
    assert tau == pytest.approx(630.0, abs=1e-9)
    assert delta == 5
    assert gamma == pytest.approx(30.0, abs=1e-9)


def test_delay_halves_with_double_lanes():
    _, _, t1 = compute_delay(link(lanes=1), 200.0, 120.0)
    _, _, t2 = compute_delay(link(lanes=2), 200.0, 120.0)
    assert t2 == pytest.approx(t1 / 2, rel=1e-12)


# ---------------------------------------------------------------------------
# arrival


def test_arrival_zero_remainder_takes_lagged_sample():
    hist = [1.0, 2.0, 3.0, 4.0]
    assert arrival_flow(hist, 2, 0.0, 120.0) == 2.0


def test_arrival_midpoint_blend():
    assert arrival_flow([5.0, 3.0], 0, 60.0, 120.0) == pytest.approx(4.0)


@given(phi=st.floats(0, 5), delta=st.integers(0, 10), frac=st.floats(0, 0.999))
def test_arrival_constant_history_is_exact(phi, delta, frac):
    assert arrival_flow([phi] * 3, delta, frac * 120.0, 120.0) == pytest.approx(phi, abs=1e-12)


def test_arrival_uses_warmup_beyond_history():
    assert arrival_flow([7.0], 3, 0.0, 60.0, warmup=2.0) == 2.0


# ---------------------------------------------------------------------------
# outflow


def test_outflow_empty_link_is_zero():
    assert stream_outflow(0.0, 0.0, 1.0, 0.5, 100.0, 120.0, 1.0, 1000.0, 0.0) == 0.0


def test_outflow_zero_green_is_zero():
    assert stream_outflow(50.0, 0.3, 1.0, 0.5, 0.0, 120.0, 1.0, 1000.0, 0.0) == 0.0


def test_outflow_saturated_hand_value():
    q, fa, beta, mu, u, c = 500.0, 0.1, 1.0, 0.5, 60.0, 120.0
    demand = q / c + fa
    green = beta * mu * u / c
    storage = 1.0 * (1000.0 - 10.0) / c
    assert green == 0.25 and demand > green and storage > green
    assert stream_outflow(q, fa, beta, mu, u, c, 1.0, 1000.0, 10.0) == pytest.approx(0.25, abs=1e-15)


def test_exit_stream_has_no_storage_bound():
    assert regime_terms(10.0, 0.0, 1.0, 1.0, 60.0, 60.0)[2] == math.inf


finite = st.floats(0, 1e3, allow_nan=False)


@given(q=finite, fa=st.floats(0, 5), beta=st.floats(0.01, 1), mu=st.floats(0.1, 3), u=st.floats(0, 120),
       share=st.floats(0.01, 1), occ=finite)
def test_outflow_is_min_of_regime_terms(q, fa, beta, mu, u, share, occ):
    c, cap = 120.0, 1000.0
    t1 = q / c + fa
    t2 = beta * mu * u / c
    t3 = share * (cap - occ) / c
    assert stream_outflow(q, fa, beta, mu, u, c, share, cap, occ) == max(0.0, min(t1, t2, t3))


@given(q=finite, fa=st.floats(0, 5), u=st.floats(0, 119), du=st.floats(0, 1), occ=finite)
def test_outflow_monotone_in_green(q, fa, u, du, occ):
    a = stream_outflow(q, fa, 0.6, 1.0, u, 120.0, 0.5, 800.0, occ)
    b = stream_outflow(q, fa, 0.6, 1.0, u + du, 120.0, 0.5, 800.0, occ)
    assert b >= a


# ---------------------------------------------------------------------------
# link update


def _flows(f_in, f_out, e=0.0, fa=0.0):
    return FlowRecord(f_in=f_in, f_arrive=fa, f_arrive_d={2: fa}, f_out_d={2: f_out}, e=e)


def test_step_link_equilibrium():
    s = LinkState(x=40.0, q={2: 5.0}, f_out=0.3, inflow_history=(0.3,))
    s2, ev = step_link(s, _flows(0.3, 0.3, fa=0.3), 120.0, 1000.0)
    assert s2.x == 40.0 and s2.q[2] == 5.0 and ev.state == 0


def test_step_link_arithmetic():
    s = LinkState(x=0.0, q={2: 0.0}, f_out=0.0, inflow_history=(0.0,))
    s2, _ = step_link(s, _flows(0.2, 0.0), 120.0, 1000.0)
    assert s2.x == pytest.approx(24.0)
    assert s2.inflow_history == (0.2,)


def test_step_link_clamps_and_counts():
    s = LinkState(x=10.0, q={2: 0.0}, f_out=0.0, inflow_history=(0.0,))
    low, ev = step_link(s, _flows(0.0, 0.5), 120.0, 1000.0)
    assert low.x == 0.0 and ev.state_low == 1
    high, ev = step_link(s, _flows(20.0, 0.0), 120.0, 1000.0)
    assert high.x == 1000.0 and ev.state_high == 1
    raw, ev = step_link(s, _flows(0.0, 0.5), 120.0, 1000.0, clamp=False)
    assert raw.x == pytest.approx(-50.0) and ev.state == 0


def test_rounding_level_clamp_is_not_an_event():
    s = LinkState(x=1.0, q={2: 0.0}, f_out=0.0, inflow_history=(0.0,))
    s2, ev = step_link(s, _flows(0.0, 1.0 / 120.0 + 1e-15), 120.0, 1000.0)
    assert s2.x == 0.0 and ev.state == 0


# ---------------------------------------------------------------------------
# clocks and resampling


def test_clock_lcm_and_index():
    clk = ClockSync(((1, 60.0), (2, 90.0)), N=2)
    assert clk.T_lcm == 180.0 and clk.T_c == 360.0
    assert clk.steps_per_lcm(1) == 3
    assert [clk.control_index(1, k) for k in (0, 5, 6, 11, 12)] == [0, 0, 1, 1, 2]


def test_resample_identity():
    v = [0.1, 0.4, 0.2]
    np.testing.assert_allclose(resample_boundary_flow(v, 120, 120), v, atol=1e-15)


def test_resample_coarser_averages_pairs():
    np.testing.assert_allclose(resample_boundary_flow([0.2, 0.6], 60, 120), [0.4], atol=1e-15)


def test_resample_finer_repeats():
    np.testing.assert_allclose(resample_boundary_flow([0.2, 0.6], 120, 60), [0.2, 0.2, 0.6, 0.6], atol=1e-15)


def test_resample_window_must_be_covered():
    with pytest.raises(ValueError):
        resample_boundary_flow([0.2, 0.6], 60, 120, offset=30.0, n_out=1)


@given(vals=st.lists(st.floats(0, 2), min_size=6, max_size=12), c_up=st.sampled_from([30.0, 60.0, 90.0]),
       c_dn=st.sampled_from([30.0, 60.0, 180.0]))
def test_resample_conserves_vehicles(vals, c_up, c_dn):
    total = len(vals) * c_up
    n = int(total // c_dn)
    if n == 0:
        return
    out = resample_boundary_flow(vals, c_up, c_dn, n_out=n)
    window = n * c_dn
    full, rem = divmod(window, c_up)
    expect = sum(vals[: int(full)]) * c_up + (vals[int(full)] * rem if rem else 0.0)
    assert float(np.sum(out)) * c_dn == pytest.approx(expect, abs=1e-9)


# ---------------------------------------------------------------------------
# network step


def test_empty_network_stays_empty():
    t = two_link()
    s = initial_state(t)
    for _ in range(5):
        s, rec = step_network(t, s, equal_split(t))
    assert all(l.x == 0.0 and l.queue == 0.0 for l in s.links.values())


def test_source_sink_chain_reaches_hand_steady_state():
    t = two_link(capacity=400.0, sat=0.5)
    phi = 0.2  # below the 0.5 veh/s green capacity
    s = initial_state(t)
    for _ in range(30):
        s, rec = step_network(t, s, equal_split(t), {1: phi})
    # no queue at steady state; x equals inflow times free travel time
    v = 40.0 / 3.6
    for z in (1, 2):
        assert s.links[z].x == pytest.approx(phi * 400.0 * 7.0 / v, rel=1e-9)
        assert s.links[z].queue == pytest.approx(0.0, abs=1e-9)
    assert rec.mean_flow(2, "f_out") == pytest.approx(phi, rel=1e-12)


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 10_000))
def test_vehicle_balance_on_random_networks(seed):
    worst, clamps = run_balance(seed, steps=10)
    assert clamps == 0
    assert worst <= 1e-9


def test_clamped_run_reports_events():
    t = two_link(capacity=100.0, sat=0.05)
    s = initial_state(t)
    total = 0
    for _ in range(10):
        s, rec = step_network(t, s, equal_split(t), {1: 2.0})
        total += rec.events.state
    assert total > 0
    assert s.links[1].x == 100.0


# ---------------------------------------------------------------------------
# independent straight-line model


def test_two_link_trajectory_matches_straight_line_oracle():
    got, expect, events = two_link_case()
    assert events == 0
    np.testing.assert_allclose(got, expect, rtol=0, atol=1e-9)
    assert expect[-1][2] == pytest.approx(100.0 - 0.1 * 120.0, abs=1e-9)
    assert expect[-1][1] > expect[5][1] > expect[0][1]


# ---------------------------------------------------------------------------
# TTS and the log


def test_tts_zero():
    assert total_time_spent(np.zeros((4, 3)), 120.0) == 0.0


def test_tts_arithmetic():
    assert total_time_spent(np.full((5, 1), 10.0), 120.0) == 6000.0


def test_tts_rejects_empty():
    with pytest.raises(ValueError):
        total_time_spent(np.zeros((0, 0)), 10.0)


def test_logged_trajectory_sums_to_tts(tmp_path):
    t = two_link()
    s = initial_state(t, warmup_inflow={1: 0.2})
    log = TrajectoryLogger(t, 10.0)
    for k in range(6):
        s, rec = step_network(t, s, equal_split(t), {1: 0.2 + 0.05 * k})
        log.record(rec, k)
    log.write(tmp_path / "trajectory.csv")
    rows = read_trajectory(tmp_path / "trajectory.csv")
    assert len(rows) == 6 * 12 * 2
    # spreadsheet-style accumulation on the logged values
    by_sample = {}
    for r in rows:
        by_sample.setdefault(int(r["sample"]), 0.0)
        by_sample[int(r["sample"])] += float(r["x"])
    tts_csv = sum(by_sample.values()) * 10.0
    tts_mem = total_time_spent(np.array(log.x_samples), 10.0)
    assert tts_csv == pytest.approx(tts_mem, rel=1e-6)
