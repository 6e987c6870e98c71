import os
import subprocess
import sys

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from utnmpc import kernels
from utnmpc._accel import backend
from utnmpc.bench import _rollout_args, run_benchmark
from utnmpc.solver import AffineBoxProjector


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 10_000), softmin=st.sampled_from([0.0, 0.05]))
def test_compiled_rollout_equals_python(seed, softmin):
    args, model = _rollout_args()
    args = list(args)
    rng = np.random.default_rng(seed)
    names = ["x0", "q0", "hist", "fout0", "ext_in", "dist", "ext_x", "xd", "u"]
    first = 22  # static model arrays come first
    for k, name in enumerate(names):
        a = np.array(args[first + k], dtype=float)
        args[first + k] = a * rng.uniform(0.5, 1.5, a.shape) if name != "u" else a
    args[first + 2] = args[first + 2] + 0.02  # nonzero arrival history
    args[first] = args[first] + rng.uniform(0, 300, args[first].shape)
    args[6] = np.full_like(args[6], softmin * float(np.mean(args[3])))
    fast = kernels.rollout(*args)
    slow = kernels.rollout.py_func(*args)
    for a, b in zip(fast, slow):
        np.testing.assert_allclose(a, b, rtol=1e-11, atol=1e-9)


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 10_000))
def test_compiled_projection_equals_python(seed):
    rng = np.random.default_rng(seed)
    n = 9
    A = np.zeros((3, n))
    A[0, :3] = A[1, 3:5] = A[2, 5:8] = 1.0
    b = np.array([60.0, 40.0, 90.0])
    proj = AffineBoxProjector(np.full(n, 10.0), np.full(n, 50.0), A, b)
    y = rng.uniform(-40, 120, n)
    ptr, idx, rhs, free = proj.blocks
    fast = kernels.project_blocks(y, proj.lo, proj.hi, ptr, idx, rhs, free)
    slow = kernels.project_blocks.py_func(y, proj.lo, proj.hi, ptr, idx, rhs, free)
    np.testing.assert_allclose(fast[0], slow[0], atol=1e-12)
    assert fast[1] == slow[1]


def test_env_flag_selects_python_backend():
    env = {**os.environ, "UTNMPC_NUMBA": "0"}
    code = "from utnmpc._accel import backend; from utnmpc import kernels; print(backend(), kernels.rollout.py_func is kernels.rollout)"
    out = subprocess.run([sys.executable, "-c", code], env=env, capture_output=True, text=True, check=True)
    assert out.stdout.split() == ["python", "True"]


@pytest.mark.skipif(backend() != "numba", reason="compiled backend disabled")
def test_benchmark_reports_both_paths():
    res = run_benchmark(repeat=5)
    assert res["backend"] == "numba"
    for k in ("rollout", "project_blocks"):
        assert res[k]["compiled_s"] > 0 and res[k]["python_s"] > 0
