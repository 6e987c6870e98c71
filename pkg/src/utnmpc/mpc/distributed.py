"""Distributed receding-horizon control by dual decomposition.

Every subsystem owns the links entering its junction (plus exit links leaving
it) and optimizes only that junction's greens.  Subsystems are coupled through

* interaction flows ``D[i -> m]``: outflow of ``i``'s streams into links owned
  by ``m``, aggregated per receiving link, and
* storage: a stream into a neighbor's link is limited by that link's
  predicted occupancy ``x_hat``.

A coordination round evaluates every subsystem with the agreed trajectories,
updates the multipliers from the mismatch ``D - D_hat``, replaces the agreed
trajectories by the new predictions, computes each subsystem's sensitivity
``mu`` (gradient of the neighbors' local costs with respect to its own greens,
through both couplings) and re-solves all local problems.  Rounds stop when
the interaction mismatch is within tolerance.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field, replace

import numpy as np

from ..dynamics import EXIT, NetworkState
from ..network import NetworkTopology
from ..parallel import ordered_map, worker_count
from ..solver import AffineBoxProjector, NlpProblem, SolveOptions, SolveReport, SolverError, solve
from .model import Forecast, ModelInputs, MpcConfig, PredictionModel, SignalPlan


@dataclass(frozen=True)
class Interface:
    """Streams of subsystem ``producer`` that discharge into links of ``consumer``."""

    producer: int
    consumer: int
    links: tuple  # receiving links (owned by consumer), sorted
    streams: tuple  # ((from, to), beta) pairs


@dataclass
class SubsystemModel:
    id: int
    links: tuple
    model: PredictionModel
    inflows: tuple  # Interfaces with consumer == id
    outflows: tuple  # Interfaces with producer == id
    ext_owner: dict  # outside destination link -> owning subsystem
    _feasible: tuple | None = field(default=None, repr=False, compare=False)

    def feasible_set(self) -> tuple:
        """``(A, b, lo, hi, projector)`` for the local plan, built once and
        checked for rank on first use."""
        if self._feasible is None:
            A, b, lo, hi = self.model.constraints()
            if A.shape[0]:
                NlpProblem(n=lo.size, lo=lo, hi=hi, u0=lo, objective=float, A=A, b=b)
            self._feasible = (A, b, lo, hi, AffineBoxProjector(lo, hi, A, b))
        return self._feasible

    @property
    def neighbors(self) -> tuple:
        return tuple(sorted({f.producer for f in self.inflows} | {f.consumer for f in self.outflows}
                            | set(self.ext_owner.values())))

    def lidx(self, z: int) -> int:
        return self.model.link_ids.index(z)

    def eidx(self, z: int) -> int:
        return self.model.ext_links.index(z)


def decompose(topo: NetworkTopology, cfg: MpcConfig, step: int = 0) -> list[SubsystemModel]:
    """One prediction model per subsystem plus the interfaces between them."""
    owner = topo.subsystem_of_link
    beta = topo.turning.as_dict(step)
    crossing: dict[tuple, list] = {}
    for z, d in topo.streams:
        i, m = owner[z], owner[d]
        if i != m:
            crossing.setdefault((i, m), []).append(((z, d), beta[z][d]))
    ifaces = {
        pair: Interface(pair[0], pair[1], tuple(sorted({s[1] for s, _ in lst})), tuple(lst))
        for pair, lst in sorted(crossing.items())
    }
    subs = []
    for sub in sorted(topo.partition.subsystems, key=lambda s: s.id):
        model = PredictionModel.build(topo, cfg, links=sub.links, step=step)
        subs.append(SubsystemModel(
            id=sub.id, links=model.link_ids, model=model,
            inflows=tuple(f for (i, m), f in ifaces.items() if m == sub.id),
            outflows=tuple(f for (i, m), f in ifaces.items() if i == sub.id),
            ext_owner={e: owner[e] for e in model.ext_links},
        ))
    return subs


# ---------------------------------------------------------------------------
# coordination state


@dataclass
class CoordinationState:
    """Interaction trajectories and multipliers, keyed by ``(producer, consumer)``.

    ``D`` is what the producer predicts, ``D_hat`` what the consumer currently
    assumes; both are ``(Kp, len(interface.links))`` arrays in veh/s, as is
    ``lam``.  ``mu`` and ``u_opt`` are per subsystem ``(Kc, n_green)``;
    ``x_hat`` maps a link to its owner's predicted occupancy ``(Kp + 1,)``.
    """

    D: dict
    D_hat: dict
    lam: dict
    rho: float = 1.0
    alpha0: float = 1.0
    s: int = 0
    mu: dict = field(default_factory=dict)
    u_opt: dict = field(default_factory=dict)
    x_hat: dict = field(default_factory=dict)

    def alpha(self) -> float:
        return self.alpha0 / (1.0 + self.s)

    def residual(self) -> float:
        r = 0.0
        for k, d in self.D.items():
            if d.size:
                r = max(r, float(np.max(np.abs(d - self.D_hat[k]))))
        return r


def update_multipliers(coord: CoordinationState) -> CoordinationState:
    """``lam += alpha_s * (D - D_hat)`` with ``alpha_s = alpha0 / (1 + s)``; ``s`` advances."""
    a = coord.alpha()
    lam = {k: coord.lam[k] + a * (coord.D[k] - coord.D_hat[k]) for k in coord.lam}
    return replace(coord, lam=lam, s=coord.s + 1)


def _pair_flow(sub: SubsystemModel, iface: Interface, D_sub: np.ndarray) -> np.ndarray:
    return D_sub[:, [sub.eidx(z) for z in iface.links]]


def subsystem_inputs(sub: SubsystemModel, base: ModelInputs, coord: CoordinationState,
                     lagrange: bool) -> ModelInputs:
    """``base`` completed with agreed inflows, neighbor occupancies and, optionally, multipliers."""
    ext_in = base.ext_in.copy()
    Kp = ext_in.shape[0]
    for f in sub.inflows:
        dh = coord.D_hat[(f.producer, f.consumer)]
        for k, z in enumerate(f.links):
            ext_in[:, sub.lidx(z)] += dh[:, k]
    ext_x = base.ext_x.copy()
    for e in sub.ext_owner:
        xh = coord.x_hat.get(e)
        if xh is not None:
            ext_x[:, sub.eidx(e)] = xh[:Kp]
    lam = np.zeros_like(base.lam)
    dhat = np.zeros_like(base.dhat)
    rho = 0.0
    if lagrange:
        rho = coord.rho
        for f in sub.outflows:
            key = (f.producer, f.consumer)
            for k, z in enumerate(f.links):
                lam[:, sub.eidx(z)] = coord.lam[key][:, k]
                dhat[:, sub.eidx(z)] = coord.D_hat[key][:, k]
    return replace(base, ext_in=ext_in, ext_x=ext_x, lam=lam, dhat=dhat, rho=rho)


def local_augmented_cost(sub: SubsystemModel, u, coord: CoordinationState, base: ModelInputs) -> float:
    """Local cost plus multiplier and penalty terms on outgoing interactions
    plus the linear sensitivity correction ``mu . (u - u_opt)``."""
    u = np.asarray(u, dtype=float).reshape(sub.model.cfg.Kc, sub.model.n_green)
    inp = subsystem_inputs(sub, base, coord, lagrange=True)
    val = sub.model.rollout(u, inp, want_grad=False).cost
    mu = coord.mu.get(sub.id)
    if mu is not None and mu.size:
        val += float(np.sum(mu * (u - coord.u_opt[sub.id])))
    return val


def _seeds(sub_m: SubsystemModel, sub_i: SubsystemModel, g_in_i: np.ndarray, g_ext_i: np.ndarray):
    """Adjoint seeds on ``m``'s outputs that ``i``'s local cost depends on."""
    mdl = sub_m.model
    Kp = g_in_i.shape[0]
    seed_fout = np.zeros((Kp, len(mdl.streams)))
    seed_x = np.zeros((Kp + 1, mdl.n_links))
    owned_i = set(sub_i.links)
    for s, (z, d) in enumerate(mdl.streams):
        if d is not EXIT and d in owned_i:
            seed_fout[:, s] = g_in_i[:, sub_i.lidx(d)]
    for e, owner in sub_i.ext_owner.items():
        if owner == sub_m.id:
            seed_x[:Kp, sub_m.lidx(e)] += g_ext_i[:, sub_i.eidx(e)]
    return seed_fout, seed_x


def compute_sensitivity(sub_m: SubsystemModel, sub_i: SubsystemModel, u_m, u_i,
                        inp_m: ModelInputs, inp_i: ModelInputs) -> np.ndarray:
    """``d phi_i / d u_m``: neighbor ``i``'s local cost differentiated through
    ``m``'s interaction flows into ``i`` and ``m``'s occupancies seen by ``i``.

    ``inp_i`` must carry the interaction trajectories produced by ``u_m``.
    Returns a ``(Kc, n_green_m)`` array.
    """
    ri = sub_i.model.rollout(u_i, replace(inp_i, lam=np.zeros_like(inp_i.lam), rho=0.0))
    sf, sx = _seeds(sub_m, sub_i, ri.grad_ext_in, ri.grad_ext_x)
    return sub_m.model.rollout(u_m, inp_m, cost_scale=0.0, seed_fout=sf, seed_x=sx).grad_u


# ---------------------------------------------------------------------------
# controller


@dataclass
class CoordOptions:
    rho: float = 1.0
    alpha0: float | None = None  # default 1 / rho
    tol: float = 1e-3  # veh/s
    max_rounds: int = 30
    relaxation: float = 0.5  # under-relaxed Jacobi; 1.0 can cycle
    use_sensitivity: bool = True
    workers: int | None = None  # default from UTNMPC_WORKERS


@dataclass
class RoundRecord:
    control_step: int
    round: int
    residual: float
    x_residual: float
    objectives: dict
    lam_norm: float
    alpha: float
    critical_time: float


@dataclass
class DmpcMemory:
    """What carries over between control steps: plans and agreed trajectories."""

    u: dict
    D_hat: dict
    x_hat: dict


@dataclass
class DistributedResult:
    plan: SignalPlan
    reports: dict
    trace: list
    converged: bool
    rounds: int
    residual: float
    critical_time: float  # sum over rounds of the slowest subsystem's work
    cpu_time: float  # total work of all subsystems
    memory: DmpcMemory


def _shift_rows(a: np.ndarray) -> np.ndarray:
    return np.concatenate((a[1:], a[-1:])) if a.shape[0] > 1 else a.copy()


def _occupancies(by_id, evals) -> dict:
    return {z: evals[m][0].X[:, k].copy() for m, sub in by_id.items() for k, z in enumerate(sub.links)}


def _measured_inflow(topo, state: NetworkState, iface: Interface, Kp: int) -> np.ndarray:
    beta = topo.turning.as_dict(state.step)
    out = np.zeros((Kp, len(iface.links)))
    for (z, d), _ in iface.streams:
        prev = state.last_window.get((z, d))
        v = float(np.mean(prev)) if prev is not None else state.links[z].f_out * beta[z][d]
        out[:, iface.links.index(d)] += v
    return out


def solve_distributed(topo: NetworkTopology, state: NetworkState, forecast: Forecast, cfg: MpcConfig,
                      opts: CoordOptions | None = None, subs: list[SubsystemModel] | None = None,
                      memory: DmpcMemory | None = None) -> DistributedResult:
    opts = opts or CoordOptions()
    subs = subs or decompose(topo, cfg, step=state.step)
    by_id = {s.id: s for s in subs}
    ids = sorted(by_id)
    workers = worker_count(opts.workers)
    Kp, Kc = cfg.Kp, cfg.Kc
    sopts = SolveOptions(opt_tol=cfg.opt_tol, max_iter=cfg.max_iter)

    base = {m: by_id[m].model.inputs(state, forecast) for m in ids}
    cons = {m: by_id[m].feasible_set() for m in ids}
    ifaces = {(f.producer, f.consumer): f for s in subs for f in s.outflows}

    u = {}
    for m in ids:
        mdl = by_id[m].model
        prev = memory.u.get(m) if memory else None
        u[m] = prev.copy() if prev is not None else mdl.default_plan()
    D_hat = {}
    for key, f in ifaces.items():
        prev = memory.D_hat.get(key) if memory else None
        D_hat[key] = prev.copy() if prev is not None else _measured_inflow(topo, state, f, Kp)
    x_hat = {}
    for z in topo.link_ids:
        meas = state.links[z].x
        prev = memory.x_hat.get(z) if memory else None
        xh = prev.copy() if prev is not None else np.full(Kp + 1, meas)
        xh[0] = meas
        x_hat[z] = xh
    alpha0 = opts.alpha0 if opts.alpha0 is not None else 1.0 / opts.rho
    coord = CoordinationState(D={k: v.copy() for k, v in D_hat.items()}, D_hat=D_hat,
                              lam={k: np.zeros_like(v) for k, v in D_hat.items()},
                              rho=opts.rho, alpha0=alpha0, x_hat=x_hat)

    trace: list[RoundRecord] = []
    reports: dict = {}
    critical = cpu = 0.0
    rounds = 0
    converged = False
    residual = np.inf

    def evaluate(m):
        t0 = time.thread_time()
        sub = by_id[m]
        r = sub.model.rollout(u[m], subsystem_inputs(sub, base[m], coord, lagrange=False))
        return r, time.thread_time() - t0

    for r_idx in range(opts.max_rounds + 1):
        evals = dict(zip(ids, ordered_map(evaluate, ids, workers)))
        phase = [evals[m][1] for m in ids]
        critical += max(phase, default=0.0)
        cpu += sum(phase)
        D = {key: _pair_flow(by_id[key[0]], f, evals[key[0]][0].D) for key, f in ifaces.items()}
        coord.D = D
        residual = coord.residual()
        x_new = _occupancies(by_id, evals)
        x_res = max((float(np.max(np.abs(x_new[e][:Kp] - coord.x_hat[e][:Kp])))
                     for s in subs for e in s.ext_owner), default=0.0)
        lam_norm = max((float(np.max(np.abs(v))) for v in coord.lam.values() if v.size), default=0.0)
        rec = RoundRecord(state.step, r_idx, residual, x_res, {m: evals[m][0].cost for m in ids},
                          lam_norm, coord.alpha(), 0.0)
        trace.append(rec)
        if r_idx >= 1 and residual <= opts.tol:
            converged = True
            break
        if r_idx == opts.max_rounds:
            break

        coord = update_multipliers(coord)
        coord.D_hat = {k: v.copy() for k, v in D.items()}
        coord.x_hat = x_new

        t_mu = {m: 0.0 for m in ids}
        mu = {m: np.zeros((Kc, by_id[m].model.n_green)) for m in ids}
        if opts.use_sensitivity:
            def grads(i):
                t0 = time.thread_time()
                sub = by_id[i]
                rr = sub.model.rollout(u[i], subsystem_inputs(sub, base[i], coord, lagrange=False))
                return rr, time.thread_time() - t0

            gi = dict(zip(ids, ordered_map(grads, ids, workers)))

            def sens(m):
                t0 = time.thread_time()
                sub = by_id[m]
                sf = np.zeros((Kp, len(sub.model.streams)))
                sx = np.zeros((Kp + 1, sub.model.n_links))
                for i in sub.neighbors:
                    a, b = _seeds(sub, by_id[i], gi[i][0].grad_ext_in, gi[i][0].grad_ext_x)
                    sf += a
                    sx += b
                out = sub.model.rollout(u[m], subsystem_inputs(sub, base[m], coord, lagrange=False),
                                        cost_scale=0.0, seed_fout=sf, seed_x=sx).grad_u
                return out, time.thread_time() - t0

            sres = dict(zip(ids, ordered_map(sens, ids, workers)))
            for m in ids:
                mu[m] = sres[m][0]
                t_mu[m] = gi[m][1] + sres[m][1]
        coord.mu = mu
        coord.u_opt = {m: u[m].copy() for m in ids}

        def local_solve(m):
            t0 = time.thread_time()
            sub = by_id[m]
            mdl = sub.model
            if mdl.n_green == 0:
                return u[m], None, time.thread_time() - t0
            inp = subsystem_inputs(sub, base[m], coord, lagrange=True)
            shape = (Kc, mdl.n_green)
            mu_m, uo = mu[m].ravel(), coord.u_opt[m].ravel()

            def fg(v):
                rr = mdl.rollout(v.reshape(shape), inp)
                return rr.cost + float(mu_m @ (v - uo)), rr.grad_u.ravel() + mu_m

            A, b, lo, hi, proj = cons[m]
            prob = NlpProblem(n=lo.size, lo=lo, hi=hi, u0=u[m].ravel(), value_and_grad=fg, A=A, b=b,
                              check_rank=False)
            try:
                rep = solve(prob, sopts, proj)
            except SolverError as exc:
                raise type(exc)(f"subsystem {m} at control step {state.step}, round {r_idx}: {exc}") from exc
            return rep.u.reshape(shape), rep, time.thread_time() - t0

        sol = dict(zip(ids, ordered_map(local_solve, ids, workers)))
        phase = [t_mu[m] + sol[m][2] for m in ids]
        critical += max(phase, default=0.0)
        cpu += sum(phase)
        rec.critical_time = max(phase, default=0.0)
        w = opts.relaxation
        for m in ids:
            new = sol[m][0]
            u[m] = new if w == 1.0 else u[m] + w * (new - u[m])
            if sol[m][1] is not None:
                reports[m] = sol[m][1]
        rounds += 1

    streams = topo.controlled_streams
    col = {s: k for k, s in enumerate(streams)}
    U = np.zeros((Kc, len(streams)))
    for m in ids:
        for k, s in enumerate(by_id[m].model.green_streams):
            U[:, col[s]] = u[m][:, k]
    mem = DmpcMemory(
        u={m: SignalPlan(by_id[m].model.green_streams, u[m]).shifted().u for m in ids},
        D_hat={k: _shift_rows(v) for k, v in coord.D.items()},
        x_hat={z: _shift_rows(v) for z, v in _occupancies(by_id, evals).items()},
    )
    return DistributedResult(plan=SignalPlan(streams, U), reports=reports, trace=trace, converged=converged,
                             rounds=rounds, residual=residual, critical_time=critical, cpu_time=cpu, memory=mem)
