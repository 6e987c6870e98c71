"""Closed-loop scenario runner, metrics and run comparison.

A run writes into its output directory:

``metrics.json``
    deterministic run summary (TTS in veh*s, maxima in vehicles, event counts),
    floats rounded to 6 decimals, keys sorted.
``timing.json``
    controller wall time and CPU time in seconds.  Kept apart from
    ``metrics.json`` so that repeated runs give byte-identical metrics.
``trajectory.csv``
    plant log, see :data:`utnmpc.dynamics.TRAJECTORY_COLUMNS`.
``signals.csv``
    applied green time per controlled stream and control step (3 decimals).
``coordination.csv``
    distributed runs only: one row per coordination round.

Wall time covers controller solves only and is measured as CPU time of the
thread doing the work, so it does not depend on how many threads share the
machine.  For the distributed controller it is the critical path: per round,
the slowest subsystem's work (evaluation, sensitivity and local solve), summed
over rounds, i.e. the time a deployment with one processor per junction would
need.  The summed work of all subsystems is reported as ``cpu_time``.
"""

from __future__ import annotations

import copy
import csv
import hashlib
import json
import math
import time
from dataclasses import asdict, dataclass, field
from importlib import resources
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np
import yaml

from . import forecast as fc
from .dynamics import ClampEvents, ClockSync, TrajectoryLogger, initial_state, step_network
from .mpc.centralized import solve_centralized
from .mpc.distributed import CoordOptions, DistributedResult, decompose, solve_distributed
from .mpc.model import Forecast, MpcConfig, PredictionModel, SignalPlan, equal_split
from .network import NetworkTopology, default_benchmark, load_topology_file
from .solver import AffineBoxProjector

CONTROLLERS = ("fixed", "cmpc", "dmpc")
_ALIASES = {"centralized": "cmpc", "distributed": "dmpc", "fixed-time": "fixed"}


class ScenarioError(ValueError):
    pass


class ComparisonError(ValueError):
    pass


# ---------------------------------------------------------------------------
# demand


@dataclass(frozen=True)
class DemandProfile:
    """Gaussian-shaped demand rate in veh/h.

    ``rate(t) = lo + (hi - lo) * exp(-(t - peak_time)^2 / (2 width^2))``.  With
    ``noise > 0``, :meth:`sample` adds seeded multiplicative Gaussian noise and
    clips to ``[lo, hi]``.
    """

    lo: float
    hi: float
    peak_time: float
    width: float
    noise: float = 0.0
    seed: int = 0

    def rate(self, t):
        t = np.asarray(t, dtype=float)
        v = self.lo + (self.hi - self.lo) * np.exp(-((t - self.peak_time) ** 2) / (2.0 * self.width ** 2))
        return float(v) if v.ndim == 0 else v

    def sample(self, t) -> np.ndarray:
        v = np.atleast_1d(np.asarray(self.rate(t), dtype=float))
        if self.noise > 0:
            rng = np.random.default_rng(self.seed)
            v = np.clip(v * (1.0 + self.noise * rng.standard_normal(v.shape)), self.lo, self.hi)
        return v


def gaussian_demand(lo: float, hi: float, duration: float, peak_time: float | None = None,
                    width: float | None = None, seed: int = 0, noise: float = 0.0) -> DemandProfile:
    """Demand profile peaking at ``peak_time`` (default mid-run) with spread
    ``width`` (default a sixth of the run)."""
    if not lo < hi:
        raise ValueError("need lo < hi")
    width = duration / 6.0 if width is None else float(width)
    if width <= 0:
        raise ValueError("width must be > 0")
    peak = duration / 2.0 if peak_time is None else float(peak_time)
    return DemandProfile(float(lo), float(hi), peak, width, float(noise), int(seed))


# ---------------------------------------------------------------------------
# scenario


@dataclass
class Scenario:
    """Everything that defines a closed-loop experiment.

    ``demand`` maps source links to profiles (veh/h); ``disturbance_fraction``
    sets the half-width of the uniform disturbance relative to the current
    demand of each link in ``disturbance_links``.
    """

    topology: NetworkTopology
    name: str = "scenario"
    duration: float = 4 * 3600.0
    demand: dict = field(default_factory=dict)
    envelope: tuple = (300.0, 800.0)
    disturbance_fraction: float = 0.05
    disturbance_links: tuple = ()
    log_interval: float = 10.0
    seed: int = 0
    mpc: MpcConfig = field(default_factory=MpcConfig)
    coordination: CoordOptions = field(default_factory=CoordOptions)
    forecast_orders: dict = field(default_factory=lambda: {"p": 2, "d": 0, "q": 1, "m": 1, "n": 1})
    source: dict = field(default_factory=dict)  # the parsed document, for hashing

    def __post_init__(self):
        lo, hi = self.envelope
        for z, prof in self.demand.items():
            if not self.topology.link(z).is_source:
                raise ScenarioError(f"demand given for non-source link {z}")
            if prof.lo < lo - 1e-9 or prof.hi > hi + 1e-9:
                raise ScenarioError(f"demand of link {z} leaves the envelope [{lo}, {hi}]")
        if self.duration <= 0 or self.log_interval <= 0:
            raise ScenarioError("duration and log_interval must be > 0")

    @property
    def steps(self) -> int:
        return int(math.ceil(self.duration / ClockSync.from_topology(self.topology).T_c - 1e-9))

    def demand_at(self, t: float) -> dict:
        """veh/s per source link."""
        return {z: prof.rate(t) / 3600.0 for z, prof in self.demand.items()}

    def digest(self) -> str:
        text = json.dumps(self.source, sort_keys=True, default=str)
        return hashlib.sha256(text.encode("utf-8")).hexdigest()[:16]


def default_scenario_text() -> str:
    return resources.files("utnmpc.data").joinpath("default_scenario.yaml").read_text(encoding="utf-8")


def scenario_from_dict(doc: Mapping, base_dir: Path | None = None) -> Scenario:
    if not isinstance(doc, Mapping):
        raise ScenarioError("scenario must be a mapping")
    topo_ref = doc.get("topology", "builtin")
    if topo_ref in (None, "builtin", "benchmark"):
        topo = default_benchmark()
    else:
        p = Path(topo_ref)
        if not p.is_absolute() and base_dir is not None:
            p = base_dir / p
        topo = load_topology_file(p)
    duration = float(doc.get("duration", 4 * 3600.0))
    dem = doc.get("demand") or {}
    env = tuple(float(v) for v in dem.get("envelope", (300.0, 800.0)))
    dflt = dict(dem.get("default") or {})
    per = {int(k): dict(v or {}) for k, v in (dem.get("links") or {}).items()}
    seed = int(doc.get("seed", 0))
    profiles = {}
    sources = [l.id for l in topo.links if l.is_source]
    for z in sources:
        entry = {**dflt, **per.get(z, {})}
        if entry.get("off"):
            continue
        profiles[z] = gaussian_demand(
            float(entry.get("lo", env[0])), float(entry.get("hi", env[1])), duration,
            entry.get("peak_time"), entry.get("width"), seed=seed * 1000 + z, noise=float(entry.get("noise", 0.0)))
    for z in per:
        if z not in sources:
            raise ScenarioError(f"demand given for non-source link {z}")
    dist = doc.get("disturbance") or {}
    which = dist.get("links", "sources")
    if which == "sources":
        dlinks = tuple(sources)
    elif which == "all":
        dlinks = topo.link_ids
    else:
        dlinks = tuple(int(z) for z in which)
    mpc_doc = dict(doc.get("mpc") or {})
    coord_doc = dict(doc.get("coordination") or {})
    try:
        mpc = MpcConfig(**mpc_doc)
        coord = CoordOptions(**coord_doc)
    except TypeError as exc:
        raise ScenarioError(f"unknown option: {exc}") from exc
    orders = {"p": 2, "d": 0, "q": 1, "m": 1, "n": 1, **(doc.get("forecast") or {})}
    return Scenario(topology=topo, name=str(doc.get("name", "scenario")), duration=duration, demand=profiles,
                    envelope=env, disturbance_fraction=float(dist.get("fraction", 0.05)),
                    disturbance_links=dlinks, log_interval=float(doc.get("log_interval", 10.0)), seed=seed,
                    mpc=mpc, coordination=coord, forecast_orders=orders, source=copy.deepcopy(dict(doc)))


def load_scenario(path) -> Scenario:
    p = Path(path)
    with open(p, encoding="utf-8") as fh:
        try:
            doc = yaml.safe_load(fh)
        except yaml.YAMLError as exc:
            raise ScenarioError(str(exc)) from exc
    return scenario_from_dict(doc, p.parent)


def default_scenario() -> Scenario:
    return scenario_from_dict(yaml.safe_load(default_scenario_text()))


class DisturbanceSource:
    """Seeded zero-mean uniform disturbance, ``+-fraction`` of current demand (veh/s)."""

    def __init__(self, scenario: Scenario, seed: int):
        self.sc = scenario
        self.rng = np.random.default_rng(seed)

    def draw(self, demand: Mapping) -> dict:
        f = self.sc.disturbance_fraction
        out = {}
        for z in self.sc.disturbance_links:
            w = self.rng.uniform(-1.0, 1.0)  # drawn for every link, keeps streams aligned
            out[z] = f * w * float(demand.get(z, 0.0))
        return out


# ---------------------------------------------------------------------------
# forecasting inside the loop


class StarimaForecaster:
    """Demand and disturbance forecasts from recorded per-step link flows.

    The models are fitted once on a training history (a fixed-time run of the
    same scenario with another disturbance seed); at run time the realized
    history is appended and every forecast conditions on all of it.
    """

    def __init__(self, topo: NetworkTopology, demand_model, dist_model, inflow_hist, dist_hist):
        self.topo = topo
        self.demand_model = demand_model
        self.dist_model = dist_model
        self.inflow = [np.asarray(r, dtype=float) for r in inflow_hist]
        self.dist = [np.asarray(r, dtype=float) for r in dist_hist]

    @classmethod
    def fit(cls, topo: NetworkTopology, inflow_hist, dist_hist, orders: Mapping) -> "StarimaForecaster":
        W = fc.build_weights(topo, max(int(orders.get("m", 1)), int(orders.get("n", 1))))
        kw = {k: orders[k] for k in ("p", "d", "q", "m", "n") if k in orders}
        dm = fc.fit(np.asarray(inflow_hist), weights=W, nonnegative=True, **kw)
        em = fc.fit(np.asarray(dist_hist), weights=W, **kw)
        return cls(topo, dm, em, inflow_hist, dist_hist)

    def observe(self, inflow_row, dist_row) -> None:
        self.inflow.append(np.asarray(inflow_row, dtype=float))
        self.dist.append(np.asarray(dist_row, dtype=float))

    def forecast(self, horizon: int) -> Forecast:
        d = fc.predict(self.demand_model, np.array(self.inflow), horizon)
        e = fc.predict(self.dist_model, np.array(self.dist), horizon)
        return Forecast(self.topo.link_ids, d, e)


def _step_rows(topo: NetworkTopology, rec) -> tuple[np.ndarray, np.ndarray]:
    inflow = np.array([rec.mean_flow(z, "f_in") for z in topo.link_ids])
    dist = np.array([rec.mean_flow(z, "e") for z in topo.link_ids])
    return inflow, dist


def training_history(scenario: Scenario) -> tuple[np.ndarray, np.ndarray]:
    """Per-step link inflow and disturbance of a fixed-time day with its own seed.

    The day lasts as long as the scenario, or longer when the forecast orders
    need more history than that.
    """
    topo = scenario.topology
    o = scenario.forecast_orders
    need = fc.min_history(int(o.get("p", 2)), int(o.get("q", 1)), max(int(o.get("m", 1)), int(o.get("n", 1))))
    clock = ClockSync.from_topology(topo)
    Tc = clock.T_c
    dist = DisturbanceSource(scenario, seed=scenario.seed + 7919)
    state = initial_state(topo, warmup_inflow=scenario.demand_at(0.0))
    greens = equal_split(topo)
    rows_in, rows_e = [], []
    for k in range(max(scenario.steps, need)):
        dem = scenario.demand_at((k + 0.5) * Tc)
        state, rec = step_network(topo, state, greens, dem, dist.draw(dem), clock=clock)
        a, b = _step_rows(topo, rec)
        rows_in.append(a)
        rows_e.append(b)
    return np.array(rows_in), np.array(rows_e)


# ---------------------------------------------------------------------------
# controllers


class FixedTimeController:
    name = "fixed"

    def __init__(self, topo: NetworkTopology, cfg: MpcConfig):
        split = equal_split(topo)
        self.plan = SignalPlan(topo.controlled_streams,
                               np.tile([split[s] for s in topo.controlled_streams], (cfg.Kc, 1)))
        self.needs_forecast = False

    def __call__(self, state, forecast):
        return self.plan, {"time": 0.0, "cpu": 0.0}


class CentralizedController:
    name = "cmpc"

    def __init__(self, topo: NetworkTopology, cfg: MpcConfig):
        self.topo, self.cfg = topo, cfg
        self.warm = None
        self.needs_forecast = True

    def __call__(self, state, forecast):
        t0 = time.thread_time()
        plan, rep = solve_centralized(self.topo, state, forecast, self.cfg, warm=self.warm)
        work = time.thread_time() - t0
        self.warm = plan.shifted()
        return plan, {"time": work, "cpu": work, "converged": rep.converged}


class DistributedController:
    name = "dmpc"

    def __init__(self, topo: NetworkTopology, cfg: MpcConfig, opts: CoordOptions):
        self.topo, self.cfg, self.opts = topo, cfg, opts
        self.memory = None
        self.subs = None
        self.subs_step = None
        self.needs_forecast = True
        self.trace: list = []

    def __call__(self, state, forecast):
        if self.subs is None or self.topo.turning.profile:
            self.subs = decompose(self.topo, self.cfg, step=state.step)
        res: DistributedResult = solve_distributed(self.topo, state, forecast, self.cfg, self.opts,
                                                   subs=self.subs, memory=self.memory)
        self.memory = res.memory
        self.trace.extend(res.trace)
        info = {"time": res.critical_time, "cpu": res.cpu_time, "rounds": res.rounds,
                "coord_converged": res.converged,
                "converged": all(r.converged for r in res.reports.values())}
        return res.plan, info


def make_controller(name: str, scenario: Scenario):
    name = _ALIASES.get(name, name)
    if name == "fixed":
        return FixedTimeController(scenario.topology, scenario.mpc)
    if name == "cmpc":
        return CentralizedController(scenario.topology, scenario.mpc)
    if name == "dmpc":
        return DistributedController(scenario.topology, scenario.mpc, scenario.coordination)
    raise ValueError(f"unknown controller {name!r}; choose from {CONTROLLERS}")


# ---------------------------------------------------------------------------
# run


FLOAT_DECIMALS = 6


def _r(v: float) -> float:
    return float(f"{v:.{FLOAT_DECIMALS}f}")


@dataclass
class RunMetrics:
    scenario: str
    scenario_hash: str
    controller: str
    seed: int
    steps: int
    tts: float  # veh*s
    max_queue: float  # veh, largest logged queue of any link
    max_vehicles: float  # veh, largest logged vehicle count of any link
    constraint_violations: int  # plant clamp events
    state_clamp_events: int
    queue_clamp_events: int
    plan_violations: int  # cycle-sum or green-bound violations of applied plans
    solver_unconverged: int
    coordination_rounds_total: int = 0
    coordination_rounds_max: int = 0
    coordination_unconverged: int = 0
    wall_time: float = 0.0  # s, controller solves only
    cpu_time: float = 0.0

    DETERMINISTIC = (
        "scenario", "scenario_hash", "controller", "seed", "steps", "tts", "max_queue", "max_vehicles",
        "constraint_violations", "state_clamp_events", "queue_clamp_events", "plan_violations",
        "solver_unconverged", "coordination_rounds_total", "coordination_rounds_max",
        "coordination_unconverged",
    )

    def deterministic_dict(self) -> dict:
        d = asdict(self)
        return {k: (_r(d[k]) if isinstance(d[k], float) else d[k]) for k in self.DETERMINISTIC}

    def timing_dict(self) -> dict:
        return {"wall_time": self.wall_time, "cpu_time": self.cpu_time}


@dataclass
class RunResult:
    metrics: RunMetrics
    logger: TrajectoryLogger
    signals: list
    coordination: list
    events: ClampEvents


def _warm_kernels(topo: NetworkTopology, cfg: MpcConfig, state) -> None:
    # loads or compiles the numba kernels so that the first timed solve does not pay for it
    model = PredictionModel.build(topo, cfg)
    u = model.default_plan()
    model.rollout(u, model.inputs(state, Forecast.constant(topo, cfg.Kp)))
    A, b, lo, hi = model.constraints()
    AffineBoxProjector(lo, hi, A, b)(np.ravel(u))


class ClosedLoop:
    """One closed-loop run that advances a control step at a time.

    Each step plans from the measured state and forecasts, applies the first
    move and steps the plant with realized demand and disturbance.
    """

    def __init__(self, scenario: Scenario, controller: str, out_dir=None):
        self.sc = scenario
        self.topo = topo = scenario.topology
        self.clock = ClockSync.from_topology(topo)
        self.ctrl = make_controller(controller, scenario)
        self.forecaster = None
        if self.ctrl.needs_forecast:
            hin, hdist = training_history(scenario)
            self.forecaster = StarimaForecaster.fit(topo, hin, hdist, scenario.forecast_orders)
        self.dist = DisturbanceSource(scenario, seed=scenario.seed)
        self.state = initial_state(topo, warmup_inflow=scenario.demand_at(0.0))
        if self.ctrl.needs_forecast:
            _warm_kernels(topo, scenario.mpc, self.state)
        self.logger = TrajectoryLogger(topo, scenario.log_interval)
        self.events = ClampEvents()
        self.signals: list = []
        self.k = 0
        self.plan_viol = self.unconv = 0
        self.rounds_tot = self.rounds_max = self.coord_unconv = 0
        self.wall = self.cpu = 0.0
        self.out = Path(out_dir) if out_dir is not None else None
        if self.out is not None:
            self.out.mkdir(parents=True, exist_ok=True)

    @property
    def done(self) -> bool:
        return self.k >= self.sc.steps

    def step(self) -> None:
        sc, cfg, k = self.sc, self.sc.mpc, self.k
        fcast = self.forecaster.forecast(cfg.Kp) if self.forecaster is not None else None
        plan, info = self.ctrl(self.state, fcast)
        self.wall += info["time"]
        self.cpu += info["cpu"]
        if info.get("converged") is False:
            self.unconv += 1
        if "rounds" in info:
            self.rounds_tot += info["rounds"]
            self.rounds_max = max(self.rounds_max, info["rounds"])
            self.coord_unconv += 0 if info["coord_converged"] else 1
        self.plan_viol += len(SignalPlan(plan.streams, plan.u[:1]).violations(self.topo, cfg))
        greens = plan.first_move()
        self.signals.append((k, greens))
        dem = sc.demand_at((k + 0.5) * self.clock.T_c)
        self.state, rec = step_network(self.topo, self.state, greens, dem, self.dist.draw(dem), clock=self.clock)
        self.events += rec.events
        self.logger.record(rec, k)
        if self.forecaster is not None:
            self.forecaster.observe(*_step_rows(self.topo, rec))
        self.k += 1

    def flush_logs(self) -> None:
        if self.out is not None and self.logger.rows:
            self.logger.write(self.out / "trajectory.csv")
            write_signals(self.out / "signals.csv", self.topo, self.signals)
            if self.ctrl.name == "dmpc":
                write_coordination(self.out / "coordination.csv", getattr(self.ctrl, "trace", []))

    def finish(self) -> RunResult:
        self.flush_logs()
        sc, lg, ev = self.sc, self.logger, self.events
        xs = np.array([[float(f"{v:.6f}") for v in row] for row in lg.x_samples]) if lg.x_samples else np.zeros(0)
        qs = np.array([[float(f"{v:.6f}") for v in row] for row in lg.q_samples]) if lg.q_samples else np.zeros(0)
        tts = float(np.sum(np.array(lg.x_samples)) * sc.log_interval) if lg.x_samples else 0.0
        m = RunMetrics(
            scenario=sc.name, scenario_hash=sc.digest(), controller=self.ctrl.name, seed=sc.seed,
            steps=sc.steps, tts=tts,
            max_queue=float(qs.max()) if qs.size else 0.0, max_vehicles=float(xs.max()) if xs.size else 0.0,
            constraint_violations=ev.state + ev.queue, state_clamp_events=ev.state,
            queue_clamp_events=ev.queue, plan_violations=self.plan_viol, solver_unconverged=self.unconv,
            coordination_rounds_total=self.rounds_tot, coordination_rounds_max=self.rounds_max,
            coordination_unconverged=self.coord_unconv, wall_time=self.wall, cpu_time=self.cpu,
        )
        if self.out is not None:
            write_metrics(self.out, m)
        return RunResult(metrics=m, logger=lg, signals=self.signals,
                         coordination=getattr(self.ctrl, "trace", []), events=ev)


def run_scenario(scenario: Scenario, controller: str, out_dir=None,
                 progress: Callable[[int, int], None] | None = None) -> RunResult:
    """Run one controller closed-loop over the whole scenario."""
    loop = ClosedLoop(scenario, controller, out_dir)
    try:
        while not loop.done:
            loop.step()
            if progress is not None:
                progress(loop.k, scenario.steps)
    except BaseException:
        loop.flush_logs()
        raise
    return loop.finish()


def run_interleaved(arms: Sequence[tuple]) -> list[RunResult]:
    """Run several ``(scenario, controller[, out_dir])`` arms in lockstep.

    The arms take turns one control step at a time, so slow phases of a shared
    machine hit all of them alike and their timings stay comparable.  Every
    arm's results equal those of :func:`run_scenario`.
    """
    loops = [ClosedLoop(*arm) for arm in arms]
    try:
        while not all(lp.done for lp in loops):
            for lp in loops:
                if not lp.done:
                    lp.step()
    except BaseException:
        for lp in loops:
            lp.flush_logs()
        raise
    return [lp.finish() for lp in loops]


# ---------------------------------------------------------------------------
# files


def write_metrics(out: Path, m: RunMetrics) -> None:
    with open(out / "metrics.json", "w", encoding="utf-8") as fh:
        json.dump(m.deterministic_dict(), fh, indent=2, sort_keys=True)
        fh.write("\n")
    with open(out / "timing.json", "w", encoding="utf-8") as fh:
        json.dump(m.timing_dict(), fh, indent=2, sort_keys=True)
        fh.write("\n")


def write_signals(path, topo: NetworkTopology, signals) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("control_step", "junction", "from_link", "to_link", "green_s"))
        for k, greens in signals:
            for j in topo.junctions:
                for z, d in j.phase_streams:
                    w.writerow((k, j.id, z, d, f"{greens[(z, d)]:.3f}"))


def write_coordination(path, trace) -> None:
    ids = sorted({m for r in trace for m in r.objectives})
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["control_step", "round", "residual", "x_residual", "lambda_max", "alpha"]
                   + [f"phi_{m}" for m in ids])
        for r in trace:
            w.writerow([r.control_step, r.round, f"{r.residual:.9f}", f"{r.x_residual:.6f}",
                        f"{r.lam_norm:.9f}", f"{r.alpha:.6f}"]
                       + [f"{r.objectives.get(m, 0.0):.6f}" for m in ids])


def load_run(path) -> RunMetrics:
    p = Path(path)
    with open(p / "metrics.json", encoding="utf-8") as fh:
        d = json.load(fh)
    timing = {}
    if (p / "timing.json").exists():
        with open(p / "timing.json", encoding="utf-8") as fh:
            timing = json.load(fh)
    return RunMetrics(**d, **timing)


# ---------------------------------------------------------------------------
# comparison

COMPARE_ROWS = (
    ("Maximum queue length (veh)", "max_queue", "{:.1f}"),
    ("Maximum number of vehicles (veh)", "max_vehicles", "{:.1f}"),
    ("Total time spent (veh*s)", "tts", "{:.4e}"),
    ("Run time (s)", "wall_time", "{:.3f}"),
    ("Constraint violations", "constraint_violations", "{:d}"),
)


def percent_change(base: float, other: float) -> str:
    """``(other - base) / base`` with one decimal, e.g. ``-14.3%``."""
    if base == 0:
        return "0.0%" if other == 0 else "n/a"
    v = round(100.0 * (other - base) / base, 1)
    if v == 0:
        v = 0.0
    return f"{v:.1f}%"


def compare(runs: Sequence[RunMetrics], names: Sequence[str] | None = None) -> list[list[str]]:
    """Rows of the comparison table; changes are relative to the first run."""
    if len(runs) < 2:
        raise ComparisonError("need at least two runs")
    hashes = {r.scenario_hash for r in runs}
    if len(hashes) > 1:
        raise ComparisonError(f"runs come from different scenarios: {sorted(hashes)}")
    names = list(names) if names is not None else [r.controller for r in runs]
    header = ["metric"] + names + [f"change {n} vs {names[0]}" for n in names[1:]]
    rows = [header]
    for label, key, fmt in COMPARE_ROWS:
        vals = [getattr(r, key) for r in runs]
        row = [label] + [fmt.format(v) for v in vals]
        row += [percent_change(vals[0], v) for v in vals[1:]]
        rows.append(row)
    return rows


def render_table(rows: list[list[str]]) -> str:
    widths = [max(len(r[i]) for r in rows) for i in range(len(rows[0]))]
    lines = []
    for n, r in enumerate(rows):
        lines.append("  ".join(c.ljust(w) if i == 0 else c.rjust(w) for i, (c, w) in enumerate(zip(r, widths))))
        if n == 0:
            lines.append("  ".join("-" * w for w in widths))
    return "\n".join(lines)


def write_comparison(path, rows) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        csv.writer(fh, lineterminator="\n").writerows(rows)
