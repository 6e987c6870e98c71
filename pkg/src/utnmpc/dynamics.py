"""Cycle-indexed link/queue dynamics of a signalized network (the plant).

Each link ``z`` carries ``x`` vehicles, per-destination queues ``q[d]`` and a
history of its entering flow.  One step of a link lasts one cycle ``c`` of the
junction that clocks it:

* travel time over the unqueued part of the link gives a whole-cycle delay
  ``delta`` and a remainder ``gamma`` (seconds),
* the flow reaching the queue tail blends two delayed inflow samples,
* each stream ``z -> d`` discharges at the minimum of its queued demand, its
  green-limited saturation flow, and its share of the free storage of ``d``,
* vehicle count and queues integrate the flow balance over the cycle.

The plant clamps ``x`` to ``[0, C]`` and queues at zero, and keeps the total
queue below ``x``; every intervention larger than rounding noise is counted
in :class:`ClampEvents`.
Sink links discharge without a signal into the exit pseudo-destination
``None``.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, replace
from fractions import Fraction
from typing import Mapping, Sequence

import numpy as np

from .network import LinkParams, NetworkTopology

EXIT = None
EVENT_TOL = 1e-9  # vehicles; smaller corrections are rounding, clamped but not counted


# ---------------------------------------------------------------------------
# single-link formulas


def compute_delay(link: LinkParams, q_z: float, c_j: float) -> tuple[int, float, float]:
    """Transport delay of inflow along the unqueued part of a link.

    Returns ``(delta, gamma, tau)``: ``tau`` is the free-flow travel time in
    seconds over the ``C - q`` vehicle lengths not occupied by the queue
    (spread over the lanes), ``delta`` the number of whole cycles in ``tau``
    and ``gamma`` the remaining seconds.
    """
    free = max(link.capacity - q_z, 0.0)
    tau = free * link.veh_length / (link.lanes * link.free_speed_ms)
    delta = int(math.floor(tau / c_j))
    gamma = tau - delta * c_j
    return delta, gamma, tau


def max_delay_steps(link: LinkParams, c_j: float) -> int:
    return compute_delay(link, 0.0, c_j)[0]


def arrival_flow(inflow: Sequence[float], delta: int, gamma: float, c_j: float,
                 warmup: float | None = None) -> float:
    """Flow reaching the queue tail.

    ``inflow`` is the entering-flow history with the current step last.  Lags
    reaching past the recorded history are served with ``warmup`` (default:
    the oldest recorded value).
    """
    n = len(inflow)
    fill = inflow[0] if warmup is None else warmup

    def lagged(lag):
        return inflow[n - 1 - lag] if lag < n else fill

    w = gamma / c_j
    return (1.0 - w) * lagged(delta) + w * lagged(delta + 1)


def regime_terms(q_zd: float, f_arrive_zd: float, beta_zd: float, sat_flow: float,
                 green: float, c_j: float, share: float | None = None,
                 stream_capacity: float | None = None,
                 occupancy: float | None = None) -> tuple[float, float, float]:
    """The unsaturated, saturated and over-saturated bounds of a stream outflow.

    The third bound is ``inf`` for exit streams (no downstream link).
    """
    demand = q_zd / c_j + f_arrive_zd
    green_lim = beta_zd * sat_flow * green / c_j
    if share is None:
        storage = math.inf
    else:
        storage = share * (stream_capacity - occupancy) / c_j
    return demand, green_lim, storage


def stream_outflow(q_zd, f_arrive_zd, beta_zd, sat_flow, green, c_j,
                   share=None, stream_capacity=None, occupancy=None) -> float:
    """Outflow of the stream ``z -> d`` in veh/s, never negative."""
    return max(0.0, min(regime_terms(q_zd, f_arrive_zd, beta_zd, sat_flow, green, c_j,
                                     share, stream_capacity, occupancy)))


# ---------------------------------------------------------------------------
# link state and update


@dataclass(frozen=True)
class LinkState:
    x: float
    q: Mapping  # destination link id (or None for exit) -> vehicles
    f_out: float
    inflow_history: tuple[float, ...]  # oldest first, excludes the step being computed

    @property
    def queue(self) -> float:
        return float(sum(self.q.values()))

    def storage(self, capacity: float) -> float:
        return capacity - self.x


@dataclass(frozen=True)
class FlowRecord:
    f_in: float
    f_arrive: float
    f_arrive_d: Mapping
    f_out_d: Mapping
    e: float = 0.0

    @property
    def f_out(self) -> float:
        return float(sum(self.f_out_d.values()))


@dataclass
class ClampEvents:
    state_low: int = 0
    state_high: int = 0
    queue: int = 0

    @property
    def state(self) -> int:
        return self.state_low + self.state_high

    def __iadd__(self, other: "ClampEvents") -> "ClampEvents":
        self.state_low += other.state_low
        self.state_high += other.state_high
        self.queue += other.queue
        return self


def step_link(state: LinkState, flows: FlowRecord, c_j: float,
              capacity: float = math.inf, clamp: bool = True) -> tuple[LinkState, ClampEvents]:
    """Integrate one cycle of a link.

    With ``clamp=False`` the raw update is returned (no physical bounds).
    """
    ev = ClampEvents()
    x = state.x + (flows.f_in - flows.f_out + flows.e) * c_j
    q = {d: state.q[d] + (flows.f_arrive_d[d] - flows.f_out_d[d]) * c_j for d in state.q}
    if clamp:
        if x < 0.0:
            ev.state_low += x < -EVENT_TOL
            x = 0.0
        elif x > capacity:
            ev.state_high += x > capacity + EVENT_TOL
            x = capacity
        for d, v in q.items():
            if v < 0.0:
                ev.queue += v < -EVENT_TOL
                q[d] = 0.0
        tot = sum(q.values())
        if tot > x:
            ev.queue += tot > x + EVENT_TOL
            scale = x / tot if tot > 0 else 0.0
            q = {d: v * scale for d, v in q.items()}
    hist = state.inflow_history[1:] + (flows.f_in,) if state.inflow_history else (flows.f_in,)
    return LinkState(x=x, q=q, f_out=flows.f_out, inflow_history=hist), ev


# ---------------------------------------------------------------------------
# clocks


@dataclass(frozen=True)
class ClockSync:
    """Common control interval ``T_c = N * lcm(cycle times)``."""

    cycles: tuple[tuple[int, float], ...]
    N: int = 1

    @classmethod
    def from_topology(cls, topo: NetworkTopology, N: int = 1) -> "ClockSync":
        return cls(tuple((j.id, j.cycle_time) for j in topo.junctions), N)

    @property
    def T_lcm(self) -> float:
        fr = [Fraction(c).limit_denominator(1000) for _, c in self.cycles]
        num = math.lcm(*(f.numerator for f in fr))
        den = math.gcd(*(f.denominator for f in fr))
        return float(Fraction(num, den))

    @property
    def T_c(self) -> float:
        return self.N * self.T_lcm

    def steps_per_lcm(self, j: int) -> int:
        """``N_j``: junction cycles per ``T_lcm``."""
        return int(round(self.T_lcm / dict(self.cycles)[j]))

    def control_index(self, j: int, k_j: int) -> int:
        """``k_c(k_j) = floor(k_j / (N * N_j))``."""
        return k_j // (self.N * self.steps_per_lcm(j))


def resample_boundary_flow(values: Sequence[float], c_up: float, c_down: float,
                           offset: float = 0.0, n_out: int | None = None,
                           t0: float = 0.0) -> np.ndarray:
    """Re-clock a piecewise-constant flow.

    ``values[k]`` holds on ``[t0 + k*c_up, t0 + (k+1)*c_up)``.  Sample ``k`` of
    the result is the time average over ``[offset + k*c_down,
    offset + (k+1)*c_down)``.  Raises ``ValueError`` when a window leaves the
    covered interval.
    """
    v = np.asarray(values, dtype=float)
    t_end = t0 + len(v) * c_up
    if n_out is None:
        n_out = int(math.floor((t_end - offset) / c_down + 1e-9))
    edges = t0 + c_up * np.arange(len(v) + 1)
    cum = np.concatenate(([0.0], np.cumsum(v * c_up)))
    a = offset + c_down * np.arange(n_out)
    b = a + c_down
    tol = 1e-9 * max(1.0, abs(t_end))
    if n_out and (a[0] < t0 - tol or b[-1] > t_end + tol):
        raise ValueError(f"resampling window [{a[0]}, {b[-1]}) not covered by [{t0}, {t_end})")
    return (np.interp(b, edges, cum) - np.interp(a, edges, cum)) / c_down


# ---------------------------------------------------------------------------
# network step


def link_destinations(topo: NetworkTopology, z: int) -> tuple:
    if topo.link(z).is_sink:
        return (EXIT,)
    return tuple(d for _, d in topo.out_streams(z))


def history_depth(topo: NetworkTopology) -> int:
    return max(max_delay_steps(l, topo.cycle_of_link[l.id]) for l in topo.links) + 2


@dataclass
class NetworkState:
    links: dict[int, LinkState]
    time: float = 0.0
    step: int = 0
    # previous window's per-substep outflow of every stream, for back edges and offsets
    last_window: dict = field(default_factory=dict)

    def x(self, topo: NetworkTopology) -> np.ndarray:
        return np.array([self.links[z].x for z in topo.link_ids])

    def queues(self, topo: NetworkTopology) -> np.ndarray:
        return np.array([self.links[z].queue for z in topo.link_ids])


def initial_state(topo: NetworkTopology, x0: Mapping | None = None,
                  warmup_inflow: Mapping | None = None, queue_fraction: float = 0.0) -> NetworkState:
    """Plant state at time zero.

    ``warmup_inflow`` (veh/s per link) fills the inflow history; the vehicles
    already travelling on the link under that constant inflow are added to the
    initial count so the history and the state agree.  ``queue_fraction`` of
    the given ``x0`` starts queued, split by turning fractions.
    """
    x0 = x0 or {}
    warm = warmup_inflow or {}
    depth = history_depth(topo)
    beta = topo.turning.as_dict(0)
    links = {}
    for l in topo.links:
        z = l.id
        c = topo.cycle_of_link[z]
        base = float(x0.get(z, 0.0))
        qtot = queue_fraction * base
        dests = link_destinations(topo, z)
        q = {d: qtot * (1.0 if d is EXIT else beta[z][d]) for d in dests}
        phi = float(warm.get(z, 0.0))
        _, _, tau = compute_delay(l, qtot, c)
        links[z] = LinkState(x=base + phi * tau, q=q, f_out=0.0, inflow_history=(phi,) * depth)
    return NetworkState(links=links)


@dataclass
class StepRecord:
    """What happened during one control interval."""

    t0: float
    duration: float
    flows: dict[int, list[FlowRecord]]  # per link, one record per substep
    x_path: dict[int, np.ndarray]  # per link, x at substep boundaries
    q_path: dict[int, np.ndarray]  # per link, total queue at substep boundaries
    qd_path: dict[int, list[dict]]  # per link, per-destination queues at substep boundaries
    cycle: dict[int, float]
    events: ClampEvents
    entering: float  # vehicles entering the network over the interval
    exiting: float  # vehicles leaving the network over the interval
    disturbance: float  # net vehicles added by disturbances

    def mean_flow(self, z: int, attr: str) -> float:
        recs = self.flows[z]
        return float(np.mean([getattr(r, attr) for r in recs]))


def step_network(topo: NetworkTopology, state: NetworkState, greens: Mapping,
                 demand: Mapping | None = None, disturbance: Mapping | None = None,
                 clamp: bool = True, clock: ClockSync | None = None) -> tuple[NetworkState, StepRecord]:
    """Advance the whole network by one common control interval.

    ``greens`` maps each controlled stream ``(z, d)`` to its green time (held
    over the interval); ``demand`` maps source links to entering flow and
    ``disturbance`` maps links to ``e`` (both veh/s).  Links are swept in
    upstream-first order so every link sees the same-interval outflow of its
    feeders; feeders later in the order (back edges of a cyclic network)
    contribute their previous-interval outflow.  Storage limits use the
    downstream occupancy at the start of the interval.
    """
    demand = demand or {}
    disturbance = disturbance or {}
    clock = clock or ClockSync.from_topology(topo)
    Tc = clock.T_c
    beta = topo.turning.as_dict(state.step)
    scap = topo.stream_capacities
    x_start = {z: s.x for z, s in state.links.items()}
    window: dict = {}
    new_links: dict[int, LinkState] = {}
    flows: dict[int, list[FlowRecord]] = {}
    x_path: dict[int, np.ndarray] = {}
    q_path: dict[int, np.ndarray] = {}
    qd_path: dict[int, list[dict]] = {}
    events = ClampEvents()
    entering = exiting = dist_total = 0.0

    for z in topo.sweep_order:
        link = topo.link(z)
        c = topo.cycle_of_link[z]
        n = int(round(Tc / c))
        dests = link_destinations(topo, z)
        if link.is_source:
            f_in_seq = np.full(n, float(demand.get(z, 0.0)))
        else:
            f_in_seq = np.zeros(n)
            j_up = link.upstream_junction
            offset = topo.junction(j_up).offset_to(link.downstream_junction) if link.downstream_junction else 0.0
            for u, _ in topo.in_streams(z):
                cu = topo.cycle_of_link[u]
                prev = state.last_window.get((u, z))
                if prev is None:
                    prev = np.full(int(round(Tc / cu)), state.links[u].f_out * beta[u][z])
                cur = window.get((u, z))
                if cur is None:  # back edge: feeder not swept yet
                    cur, prev = prev, prev
                if offset == 0.0 and cu == c:
                    f_in_seq += cur
                else:
                    seq = np.concatenate((prev, cur))
                    f_in_seq += resample_boundary_flow(seq, cu, c, offset=-offset, n_out=n, t0=-Tc)
        e = float(disturbance.get(z, 0.0))
        s = state.links[z]
        xs, qs, qds, recs = [s.x], [s.queue], [dict(s.q)], []
        outs = {d: np.zeros(n) for d in dests}
        for k in range(n):
            hist = s.inflow_history + (f_in_seq[k],)
            delta, gamma, _ = compute_delay(link, s.queue, c)
            fa = arrival_flow(hist, delta, gamma, c)
            fa_d, fo_d = {}, {}
            for d in dests:
                if d is EXIT:
                    fa_d[d] = fa
                    fo_d[d] = stream_outflow(s.q[d], fa, 1.0, link.sat_flow, c, c)
                else:
                    b = beta[z][d]
                    fa_d[d] = b * fa
                    share = topo.inflow_share(z, d, state.step)
                    fo_d[d] = stream_outflow(s.q[d], fa_d[d], b, link.sat_flow, greens[(z, d)], c,
                                             share, scap[(z, d)], share * x_start[d])
                outs[d][k] = fo_d[d]
            rec = FlowRecord(f_in=float(f_in_seq[k]), f_arrive=fa, f_arrive_d=fa_d, f_out_d=fo_d, e=e)
            s, ev = step_link(s, rec, c, link.capacity, clamp=clamp)
            events += ev
            recs.append(rec)
            xs.append(s.x)
            qs.append(s.queue)
            qds.append(dict(s.q))
            if link.is_source:
                entering += rec.f_in * c
            if EXIT in fo_d:
                exiting += fo_d[EXIT] * c
            dist_total += e * c
        for d in dests:
            if d is not EXIT:
                window[(z, d)] = outs[d]
        new_links[z] = s
        flows[z] = recs
        x_path[z] = np.array(xs)
        q_path[z] = np.array(qs)
        qd_path[z] = qds

    new_state = NetworkState(links=new_links, time=state.time + Tc, step=state.step + 1, last_window=window)
    rec = StepRecord(t0=state.time, duration=Tc, flows=flows, x_path=x_path, q_path=q_path, qd_path=qd_path,
                     cycle=dict(topo.cycle_of_link), events=events,
                     entering=entering, exiting=exiting, disturbance=dist_total)
    return new_state, rec


def total_time_spent(trajectory, dt) -> float:
    """``sum_k sum_z x_z(k) * dt_k`` for a (steps x links) trajectory."""
    x = np.atleast_2d(np.asarray(trajectory, dtype=float))
    if x.size == 0:
        raise ValueError("empty trajectory")
    dt = np.broadcast_to(np.asarray(dt, dtype=float), (x.shape[0],))
    return float(np.sum(x.sum(axis=1) * dt))


# ---------------------------------------------------------------------------
# trajectory log

TRAJECTORY_COLUMNS = (
    "sample", "time_s", "control_step", "link", "x", "queue", "queue_by_dest",
    "f_in", "f_arrive", "f_out", "disturbance",
)
"""Header of ``trajectory.csv``.

One row per (sample, link), samples every ``log_interval`` seconds, links in
id order.  ``x`` and ``queue`` are linearly interpolated inside a cycle (flows
are cycle averages, so this is exact between clamp events).  ``queue_by_dest``
lists ``dest=value`` pairs separated by ``|`` (``exit`` for sinks).  Flows are
the cycle-average rates in veh/s of the cycle containing the sample.  All
numbers are written with 6 decimals.
"""

FLOAT_FMT = "{:.6f}"


def _fmt(v: float) -> str:
    s = FLOAT_FMT.format(v)
    return "0.000000" if s == "-0.000000" else s


class TrajectoryLogger:
    """Collects sub-sampled plant states and writes ``trajectory.csv``."""

    def __init__(self, topo: NetworkTopology, log_interval: float):
        self.topo = topo
        self.log_interval = float(log_interval)
        self.rows: list[tuple] = []
        self.sample = 0
        self.x_samples: list[np.ndarray] = []
        self.q_samples: list[np.ndarray] = []

    def record(self, rec: StepRecord, control_step: int) -> None:
        """Log every sample instant in ``[rec.t0, rec.t0 + rec.duration)``."""
        t_end = rec.t0 + rec.duration
        while True:
            t = self.sample * self.log_interval
            if t >= t_end - 1e-9:
                break
            xs, qs = [], []
            for z in self.topo.link_ids:
                c = rec.cycle[z]
                pos = (t - rec.t0) / c
                k = min(int(math.floor(pos + 1e-12)), len(rec.flows[z]) - 1)
                frac = pos - k
                xp, qp = rec.x_path[z], rec.q_path[z]
                x = xp[k] + frac * (xp[k + 1] - xp[k])
                q = qp[k] + frac * (qp[k + 1] - qp[k])
                fr = rec.flows[z][k]
                start, end = rec.qd_path[z][k], rec.qd_path[z][k + 1]
                qd = "|".join(
                    f"{'exit' if d is EXIT else d}={_fmt(start[d] + frac * (end[d] - start[d]))}" for d in start
                )
                self.rows.append((
                    str(self.sample), _fmt(t), str(control_step), str(z), _fmt(x), _fmt(q), qd,
                    _fmt(fr.f_in), _fmt(fr.f_arrive), _fmt(fr.f_out), _fmt(fr.e),
                ))
                xs.append(x)
                qs.append(q)
            self.x_samples.append(np.array(xs))
            self.q_samples.append(np.array(qs))
            self.sample += 1

    def write(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(TRAJECTORY_COLUMNS)
            w.writerows(self.rows)


def read_trajectory(path) -> list[dict]:
    with open(path, newline="", encoding="utf-8") as fh:
        return list(csv.DictReader(fh))


def with_history(state: LinkState, history: Sequence[float]) -> LinkState:
    return replace(state, inflow_history=tuple(float(v) for v in history))
