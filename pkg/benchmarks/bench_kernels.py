"""Time the numba kernels against their pure-Python fallback.

    python benchmarks/bench_kernels.py [repeat]

With ``UTNMPC_NUMBA=0`` both columns run uncompiled, which is a quick sanity
check that the fallback path is what gets selected.
"""

import json
import sys

from utnmpc.bench import run_benchmark

if __name__ == "__main__":
    print(json.dumps(run_benchmark(int(sys.argv[1]) if len(sys.argv) > 1 else 200), indent=2))
