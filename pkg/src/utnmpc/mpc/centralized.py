"""Centralized receding-horizon controller over the whole network."""

from __future__ import annotations

import numpy as np

from ..dynamics import NetworkState
from ..network import NetworkTopology
from ..solver import NlpProblem, SolveOptions, SolveReport, SolverError, solve_multistart
from .model import Forecast, MpcConfig, PredictionModel, SignalPlan


def _as_u(model: PredictionModel, plan: SignalPlan | np.ndarray) -> np.ndarray:
    if isinstance(plan, SignalPlan):
        col = {s: i for i, s in enumerate(plan.streams)}
        return np.ascontiguousarray(plan.u[:, [col[s] for s in model.green_streams]])
    return np.asarray(plan, dtype=float).reshape(model.cfg.Kc, model.n_green)


def predict_cost_centralized(topo: NetworkTopology, state: NetworkState, plan, forecast: Forecast,
                             cfg: MpcConfig, model: PredictionModel | None = None) -> float:
    """Horizon cost of ``plan`` from the measured ``state``.

    Sum over the horizon of ``Q (x - x_d)^2`` per link, ``R u^2`` per green
    over the control horizon, and the exact penalty on leaving ``[0, C]``.
    """
    model = model or PredictionModel.build(topo, cfg, step=state.step)
    inp = model.inputs(state, forecast)
    return model.rollout(_as_u(model, plan), inp, want_grad=False).cost


def solve_centralized(topo: NetworkTopology, state: NetworkState, forecast: Forecast, cfg: MpcConfig,
                      warm: SignalPlan | None = None, model: PredictionModel | None = None,
                      opts: SolveOptions | None = None) -> tuple[SignalPlan, SolveReport]:
    """One receding-horizon solve; apply ``plan.first_move()``."""
    model = model or PredictionModel.build(topo, cfg, step=state.step)
    inp = model.inputs(state, forecast)
    A, b, lo, hi = model.constraints()
    u0 = _as_u(model, warm) if warm is not None else model.default_plan()
    shape = (cfg.Kc, model.n_green)

    def fg(v):
        r = model.rollout(v.reshape(shape), inp)
        return r.cost, r.grad_u.ravel()

    opts = opts or SolveOptions(opt_tol=cfg.opt_tol, max_iter=cfg.max_iter)
    prob = NlpProblem(n=u0.size, lo=lo, hi=hi, u0=u0.ravel(), value_and_grad=fg, A=A, b=b)
    try:
        rep = solve_multistart(prob, opts, restarts=cfg.restarts, seed=cfg.seed + state.step)
    except SolverError as exc:
        raise type(exc)(f"centralized solve at control step {state.step}: {exc}") from exc
    return SignalPlan(model.green_streams, rep.u.reshape(shape)), rep
