"""Compiled versus pure-Python timing of the two hot kernels.

Both paths run on identical inputs taken from the built-in benchmark network,
and their outputs are cross-checked before timing.
"""

from __future__ import annotations

import time

import numpy as np

from . import kernels
from ._accel import backend
from .dynamics import initial_state
from .mpc.model import Forecast, MpcConfig, PredictionModel
from .network import default_benchmark
from .solver import AffineBoxProjector


def _time(fn, repeat: int) -> float:
    fn()  # warm-up, triggers compilation on the first call
    t0 = time.perf_counter()
    for _ in range(repeat):
        fn()
    return (time.perf_counter() - t0) / repeat


def _rollout_args():
    topo = default_benchmark()
    cfg = MpcConfig()
    model = PredictionModel.build(topo, cfg)
    demand = {l.id: 600.0 / 3600.0 for l in topo.links if l.is_source}
    state = initial_state(topo, warmup_inflow=demand)
    inp = model.inputs(state, Forecast.constant(topo, cfg.Kp, demand, {}))
    a = model.arrays
    Kp = inp.ext_in.shape[0]
    u = np.ascontiguousarray(model.default_plan().reshape(cfg.Kc, model.n_green))
    return (
        a["order"], a["cap"], a["tau_coef"], a["sat"], a["cyc"], a["gcyc"], a["temp"],
        a["out_ptr"], a["out_idx"], a["in_ptr"], a["in_idx"],
        a["s_from"], a["s_kind"], a["s_to"], a["s_ctrl"], a["s_back"], a["beta"], a["share"], a["scap"],
        a["qw"], a["rw"], float(cfg.penalty),
        inp.x0, inp.q0, inp.hist, inp.fout0, inp.ext_in, inp.dist, inp.ext_x, inp.xd, u,
        inp.lam, inp.dhat, float(inp.rho), 1.0,
        np.zeros((Kp, len(model.streams))), np.zeros((Kp + 1, model.n_links)), True,
    ), model


def run_benchmark(repeat: int = 200) -> dict:
    """Mean seconds per call for each kernel and backend, plus the speedup."""
    args, model = _rollout_args()
    fast = kernels.rollout(*args)
    slow = kernels.rollout.py_func(*args)
    for a, b in zip(fast, slow):
        np.testing.assert_allclose(a, b, rtol=1e-10, atol=1e-10)

    A, b, lo, hi = model.constraints()
    proj = AffineBoxProjector(lo, hi, A, b)
    y = np.random.default_rng(0).uniform(-20.0, 120.0, lo.size)
    ptr, idx, rhs, free = proj.blocks
    pargs = (y, proj.lo, proj.hi, ptr, idx, rhs, free)
    np.testing.assert_allclose(kernels.project_blocks(*pargs)[0], kernels.project_blocks.py_func(*pargs)[0],
                               atol=1e-12)

    out = {"backend": backend(), "repeat": repeat}
    for name, fn in (("rollout", kernels.rollout), ("project_blocks", kernels.project_blocks)):
        call = args if name == "rollout" else pargs
        t_fast = _time(lambda: fn(*call), repeat)
        t_slow = _time(lambda: fn.py_func(*call), max(1, repeat // 20))
        out[name] = {"compiled_s": t_fast, "python_s": t_slow, "speedup": t_slow / t_fast}
    return out
