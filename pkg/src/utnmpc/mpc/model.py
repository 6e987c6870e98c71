"""Prediction model, configuration and signal plans shared by both controllers.

A :class:`PredictionModel` flattens the dynamics of a set of links into the
arrays consumed by :func:`utnmpc.kernels.rollout`.  The set is either the
whole network (centralized control) or the links owned by one subsystem, in
which case flows entering from outside arrive through ``ext_in`` and the
occupancy of outside destination links through ``ext_x``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from .. import kernels
from ..dynamics import EXIT, ClockSync, NetworkState, compute_delay, link_destinations, resample_boundary_flow
from ..network import NetworkTopology


class ForecastHorizonError(ValueError):
    pass


@dataclass
class MpcConfig:
    Kp: int = 7
    Kc: int = 4
    Q: float | Mapping = 0.1  # per link
    R: float | Mapping = 0.3  # per controlled stream
    x_desired: float | Mapping = 0.0  # per link
    u_min: float = 10.0
    u_max: Mapping | None = None  # per stream override of the derived upper bound
    penalty: float = 1e4  # exact penalty on leaving [0, C]
    softmin: float = 0.05  # temperature as a fraction of saturation flow; 0 = exact min
    restarts: int = 5
    seed: int = 0
    opt_tol: float = 1e-5
    max_iter: int = 500

    def __post_init__(self):
        if not 1 <= self.Kc <= self.Kp:
            raise ValueError(f"need 1 <= Kc <= Kp, got Kc={self.Kc}, Kp={self.Kp}")
        for name in ("Q", "R"):
            v = getattr(self, name)
            vals = v.values() if isinstance(v, Mapping) else [v]
            if any(float(w) < 0 for w in vals):
                raise ValueError(f"{name} weights must be >= 0")
        if self.u_min < 0 or self.penalty < 0 or self.softmin < 0:
            raise ValueError("u_min, penalty and softmin must be >= 0")

    def q_weight(self, z: int) -> float:
        return float(self.Q.get(z, 0.0)) if isinstance(self.Q, Mapping) else float(self.Q)

    def r_weight(self, s) -> float:
        return float(self.R.get(s, 0.0)) if isinstance(self.R, Mapping) else float(self.R)

    def desired(self, z: int) -> float:
        xd = self.x_desired
        return float(xd.get(z, 0.0)) if isinstance(xd, Mapping) else float(xd)


def green_bounds(topo: NetworkTopology, cfg: MpcConfig) -> dict:
    """``(lo, hi)`` per controlled stream.

    ``hi = c - L - (n - 1) * u_min`` leaves every other stream of the junction
    its minimum green.
    """
    out = {}
    for j in topo.junctions:
        n = len(j.phase_streams)
        avail = j.cycle_time - j.lost_time
        hi = avail - (n - 1) * cfg.u_min
        lo = min(cfg.u_min, hi)
        for s in j.phase_streams:
            h = hi
            if cfg.u_max is not None and s in cfg.u_max:
                h = min(h, float(cfg.u_max[s]))
            out[s] = (lo, h)
    return out


def equal_split(topo: NetworkTopology) -> dict:
    """Fixed-time plan: every stream of a junction gets the same green."""
    out = {}
    for j in topo.junctions:
        g = (j.cycle_time - j.lost_time) / len(j.phase_streams)
        for s in j.phase_streams:
            out[s] = g
    return out


@dataclass(frozen=True)
class SignalPlan:
    """Green seconds per controlled stream over the control horizon.

    Row ``p`` of ``u`` is control step ``p``; the last row is held beyond it.
    """

    streams: tuple
    u: np.ndarray

    def at(self, p: int) -> dict:
        row = self.u[min(p, self.u.shape[0] - 1)]
        return {s: float(v) for s, v in zip(self.streams, row)}

    def first_move(self) -> dict:
        return self.at(0)

    def shifted(self) -> "SignalPlan":
        """Warm start for the next control step: drop the applied move, hold the tail."""
        u = np.vstack((self.u[1:], self.u[-1:])) if self.u.shape[0] > 1 else self.u.copy()
        return SignalPlan(self.streams, u)

    def violations(self, topo: NetworkTopology, cfg: MpcConfig, tol: float = 1e-9) -> list[str]:
        bounds = green_bounds(topo, cfg)
        col = {s: i for i, s in enumerate(self.streams)}
        out = []
        for p in range(self.u.shape[0]):
            for j in topo.junctions:
                if not all(s in col for s in j.phase_streams):
                    continue
                tot = sum(self.u[p, col[s]] for s in j.phase_streams) + j.lost_time
                if abs(tot - j.cycle_time) > tol:
                    out.append(f"step {p} junction {j.id}: greens + lost time = {tot!r}, cycle {j.cycle_time}")
            for s, i in col.items():
                lo, hi = bounds[s]
                if not lo - tol <= self.u[p, i] <= hi + tol:
                    out.append(f"step {p} stream {s}: green {self.u[p, i]!r} outside [{lo}, {hi}]")
        return out


@dataclass
class Forecast:
    """Predicted entering demand and disturbance (veh/s), rows = horizon steps."""

    link_ids: tuple
    demand: np.ndarray  # (H, N)
    disturbance: np.ndarray  # (H, N)

    @classmethod
    def constant(cls, topo: NetworkTopology, horizon: int, demand: Mapping | None = None,
                 disturbance: Mapping | None = None) -> "Forecast":
        ids = topo.link_ids
        d = np.array([float((demand or {}).get(z, 0.0)) for z in ids])
        e = np.array([float((disturbance or {}).get(z, 0.0)) for z in ids])
        return cls(ids, np.tile(d, (horizon, 1)), np.tile(e, (horizon, 1)))

    def column(self, z: int) -> int:
        return self.link_ids.index(z)


@dataclass
class ModelInputs:
    """Everything a rollout needs besides the greens."""

    x0: np.ndarray
    q0: np.ndarray
    hist: np.ndarray
    fout0: np.ndarray
    ext_in: np.ndarray
    dist: np.ndarray
    ext_x: np.ndarray
    xd: np.ndarray
    lam: np.ndarray
    dhat: np.ndarray
    rho: float = 0.0


@dataclass
class Rollout:
    cost: float
    X: np.ndarray  # (Kp+1, nL)
    Q: np.ndarray  # (Kp+1, nS)
    Fout: np.ndarray  # (Kp, nS)
    D: np.ndarray  # (Kp, nE) outflow into each external destination link
    grad_u: np.ndarray
    grad_ext_in: np.ndarray
    grad_ext_x: np.ndarray


@dataclass
class PredictionModel:
    """Flat-array dynamics of a set of links over the prediction horizon."""

    topo: NetworkTopology
    cfg: MpcConfig
    link_ids: tuple
    streams: tuple  # (z, d) with d = EXIT for sinks
    ext_links: tuple  # outside destination links, sorted
    green_streams: tuple  # decision columns
    junction_rows: tuple  # (junction id, column indices)
    step_seconds: float
    arrays: dict = field(repr=False)
    H: int = 0

    @classmethod
    def build(cls, topo: NetworkTopology, cfg: MpcConfig, links=None, step: int = 0,
              clock: ClockSync | None = None) -> "PredictionModel":
        clock = clock or ClockSync.from_topology(topo)
        Tc = clock.T_c
        owned = set(topo.link_ids if links is None else links)
        pos = {z: i for i, z in enumerate(topo.sweep_order)}
        link_ids = tuple(z for z in topo.link_ids if z in owned)
        lidx = {z: i for i, z in enumerate(link_ids)}
        streams = tuple((z, d) for z in link_ids for d in link_destinations(topo, z))
        ext_links = tuple(sorted({d for _, d in streams if d is not EXIT and d not in owned}))
        eidx = {d: i for i, d in enumerate(ext_links)}
        controlled = set(topo.controlled_streams)
        green_streams = tuple(s for s in topo.controlled_streams if s in set(streams))
        gidx = {s: i for i, s in enumerate(green_streams)}
        rows = []
        for j in topo.junctions:
            cols = [gidx[s] for s in j.phase_streams if s in gidx]
            if cols and len(cols) != len(j.phase_streams):
                raise ValueError(f"junction {j.id}: streams split across prediction models")
            if cols:
                rows.append((j.id, tuple(cols)))
        beta = topo.turning.as_dict(step)
        scaps = topo.stream_capacities

        nL, nS = len(link_ids), len(streams)
        a = {
            "order": np.array(sorted(range(nL), key=lambda i: pos[link_ids[i]]), dtype=np.int64),
            "cap": np.array([topo.link(z).capacity for z in link_ids]),
            "tau_coef": np.array([topo.link(z).veh_length / (topo.link(z).lanes * topo.link(z).free_speed_ms)
                                  for z in link_ids]),
            "sat": np.array([topo.link(z).sat_flow for z in link_ids]),
            "cyc": np.full(nL, Tc),
            "gcyc": np.array([topo.cycle_of_link[z] for z in link_ids]),
        }
        a["temp"] = cfg.softmin * a["sat"]
        out_ptr, out_idx = [0], []
        for z in link_ids:
            out_idx.extend(i for i, s in enumerate(streams) if s[0] == z)
            out_ptr.append(len(out_idx))
        in_ptr, in_idx = [0], []
        for z in link_ids:
            in_idx.extend(i for i, s in enumerate(streams) if s[1] == z)
            in_ptr.append(len(in_idx))
        a["out_ptr"] = np.array(out_ptr, dtype=np.int64)
        a["out_idx"] = np.array(out_idx, dtype=np.int64)
        a["in_ptr"] = np.array(in_ptr, dtype=np.int64)
        a["in_idx"] = np.array(in_idx, dtype=np.int64)
        s_kind, s_to, s_ctrl, s_back, bvec, share, scap = [], [], [], [], [], [], []
        for z, d in streams:
            if d is EXIT:
                s_kind.append(0)
                s_to.append(-1)
                bvec.append(1.0)
                share.append(0.0)
                scap.append(0.0)
                s_back.append(False)
            else:
                internal = d in owned
                s_kind.append(1 if internal else 2)
                s_to.append(lidx[d] if internal else eidx[d])
                bvec.append(beta[z][d])
                share.append(topo.inflow_share(z, d, step))
                scap.append(scaps[(z, d)])
                s_back.append(internal and pos[z] > pos[d])
            s_ctrl.append(gidx.get((z, d), -1) if (z, d) in controlled else -1)
        a["s_from"] = np.array([lidx[z] for z, _ in streams], dtype=np.int64)
        a["s_kind"] = np.array(s_kind, dtype=np.int64)
        a["s_to"] = np.array(s_to, dtype=np.int64)
        a["s_ctrl"] = np.array(s_ctrl, dtype=np.int64)
        a["s_back"] = np.array(s_back, dtype=np.bool_)
        a["beta"] = np.array(bvec)
        a["share"] = np.array(share)
        a["scap"] = np.array(scap)
        a["qw"] = np.array([cfg.q_weight(z) for z in link_ids])
        a["rw"] = np.array([cfg.r_weight(s) for s in green_streams])
        H = max((int(math.floor(compute_delay(topo.link(z), 0.0, Tc)[2] / Tc)) for z in link_ids), default=0) + 2
        return cls(topo=topo, cfg=cfg, link_ids=link_ids, streams=streams, ext_links=ext_links,
                   green_streams=green_streams, junction_rows=tuple(rows), step_seconds=Tc, arrays=a, H=H)

    # -- sizes -------------------------------------------------------------
    @property
    def n_links(self) -> int:
        return len(self.link_ids)

    @property
    def n_green(self) -> int:
        return len(self.green_streams)

    @property
    def n_ext(self) -> int:
        return len(self.ext_links)

    # -- inputs ------------------------------------------------------------
    def inputs(self, state: NetworkState, forecast: Forecast, ext_in=None, ext_x=None) -> ModelInputs:
        """Model inputs anchored at the measured plant state.

        Source links take the demand forecast; other ``ext_in`` entries (flows
        from outside the model) default to zero.  ``ext_x`` defaults to the
        measured occupancy of the outside links held over the horizon.
        """
        cfg, topo, Kp = self.cfg, self.topo, self.cfg.Kp
        if forecast.demand.shape[0] < Kp or forecast.disturbance.shape[0] < Kp:
            raise ForecastHorizonError(
                f"forecast covers {min(forecast.demand.shape[0], forecast.disturbance.shape[0])} steps, need {Kp}")
        nL = self.n_links
        x0 = np.array([state.links[z].x for z in self.link_ids])
        q0 = np.array([state.links[z].q[d] for z, d in self.streams])
        hist = np.zeros((self.H, nL))
        for i, z in enumerate(self.link_ids):
            hist[:, i] = self._coarse_history(state.links[z].inflow_history, topo.cycle_of_link[z])
        beta = topo.turning.as_dict(state.step)
        fout0 = np.zeros(len(self.streams))
        for k, (z, d) in enumerate(self.streams):
            if d is EXIT:
                continue
            prev = state.last_window.get((z, d))
            fout0[k] = float(np.mean(prev)) if prev is not None else state.links[z].f_out * beta[z][d]
        cols = [forecast.column(z) for z in self.link_ids]
        ein = np.zeros((Kp, nL))
        for i, z in enumerate(self.link_ids):
            if topo.link(z).is_source:
                ein[:, i] = forecast.demand[:Kp, cols[i]]
        if ext_in is not None:
            ein = ein + ext_in
        dist = forecast.disturbance[:Kp][:, cols].copy()
        if ext_x is None:
            ext_x = np.tile([state.links[d].x for d in self.ext_links], (Kp, 1)).reshape(Kp, self.n_ext)
        xd = np.tile([cfg.desired(z) for z in self.link_ids], (Kp, 1))
        nE = self.n_ext
        return ModelInputs(x0=x0, q0=q0, hist=hist, fout0=fout0, ext_in=ein, dist=dist,
                           ext_x=np.asarray(ext_x, dtype=float), xd=xd,
                           lam=np.zeros((Kp, nE)), dhat=np.zeros((Kp, nE)))

    def _coarse_history(self, hist, c) -> np.ndarray:
        h = np.asarray(hist, dtype=float)
        T = self.step_seconds
        if c == T and len(h) >= self.H:
            return h[-self.H:]
        need = int(math.ceil(self.H * T / c)) + 1
        if len(h) < need:
            h = np.concatenate((np.full(need - len(h), h[0] if len(h) else 0.0), h))
        return resample_boundary_flow(h, c, T, offset=-self.H * T, n_out=self.H, t0=-len(h) * c)

    # -- evaluation --------------------------------------------------------
    def rollout(self, u, inp: ModelInputs, want_grad: bool = True, cost_scale: float = 1.0,
                seed_fout=None, seed_x=None) -> Rollout:
        a = self.arrays
        Kp = inp.ext_in.shape[0]
        u = np.ascontiguousarray(np.asarray(u, dtype=float).reshape(self.cfg.Kc, self.n_green))
        if seed_fout is None or seed_x is None:
            zf, zx = self._zero_seeds(Kp)
            seed_fout = zf if seed_fout is None else seed_fout
            seed_x = zx if seed_x is None else seed_x
        static = self.__dict__.get("_static")
        if static is None:
            static = self._static = (
                a["order"], a["cap"], a["tau_coef"], a["sat"], a["cyc"], a["gcyc"], a["temp"],
                a["out_ptr"], a["out_idx"], a["in_ptr"], a["in_idx"],
                a["s_from"], a["s_kind"], a["s_to"], a["s_ctrl"], a["s_back"], a["beta"], a["share"],
                a["scap"], a["qw"], a["rw"], float(self.cfg.penalty))
        res = kernels.rollout(
            *static,
            inp.x0, inp.q0, inp.hist, inp.fout0, inp.ext_in, inp.dist, inp.ext_x, inp.xd, u,
            inp.lam, inp.dhat, float(inp.rho),
            float(cost_scale), seed_fout, seed_x, bool(want_grad))
        return Rollout(*res)

    def _zero_seeds(self, Kp: int):
        # read-only inside the kernel, so one pair per horizon length is shared
        cache = self.__dict__.setdefault("_seed_cache", {})
        if Kp not in cache:
            cache[Kp] = (np.zeros((Kp, len(self.streams))), np.zeros((Kp + 1, self.n_links)))
        return cache[Kp]

    def constraints(self):
        """``(A, b, lo, hi)`` over the flattened ``(Kc, n_green)`` decision vector."""
        Kc, nG = self.cfg.Kc, self.n_green
        bounds = green_bounds(self.topo, self.cfg)
        lo1 = np.array([bounds[s][0] for s in self.green_streams])
        hi1 = np.array([bounds[s][1] for s in self.green_streams])
        rows, rhs = [], []
        for p in range(Kc):
            for jid, cols in self.junction_rows:
                r = np.zeros(Kc * nG)
                r[[p * nG + c for c in cols]] = 1.0
                j = self.topo.junction(jid)
                rows.append(r)
                rhs.append(j.cycle_time - j.lost_time)
        A = np.array(rows).reshape(len(rows), Kc * nG)
        return A, np.array(rhs), np.tile(lo1, Kc), np.tile(hi1, Kc)

    def default_plan(self) -> np.ndarray:
        split = equal_split(self.topo)
        return np.tile([split[s] for s in self.green_streams], (self.cfg.Kc, 1))
