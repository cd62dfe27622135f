"""Compare the numba kernels with the pure-numpy fallback.

Each backend runs in its own interpreter because the choice is made at import
time from NMFRE_DISABLE_NUMBA. The numba run is warmed up first so compile
time is excluded.

    python3 benchmarks/bench_kernels.py [--repeat 5]
"""

import argparse
import json
import os
import subprocess
import sys

WORKER = r"""
import json, sys, time, warnings
import numpy as np
from nmfre import FitConfig, backend, fit, load_orthodont
from nmfre.simulation import generate_dataset, stress_design

repeat = int(sys.argv[1])
warnings.simplefilter("ignore")
orth = load_orthodont()
stress_ds, _ = generate_dataset(stress_design(0.21, R=1), 12345)
cases = {
    "orthodont Q=1": (orth, FitConfig(Q=1, n_restarts=5)),
    "stress Q=3 N=100, 2000 it": (stress_ds, FitConfig(Q=3, lambda_init=1e-3, n_restarts=1,
                                                      maxit=2000, tol=1e-300)),
}
for ds, cfg in cases.values():
    fit(ds, cfg)  # warm-up / JIT compile
out = {"backend": backend()}
for name, (ds, cfg) in cases.items():
    times = []
    for _ in range(repeat):
        t = time.perf_counter()
        fit(ds, cfg)
        times.append(time.perf_counter() - t)
    out[name] = min(times)
print(json.dumps(out))
"""


def run(disable, repeat):
    env = dict(os.environ)
    env.pop("NMFRE_DISABLE_NUMBA", None)
    if disable:
        env["NMFRE_DISABLE_NUMBA"] = "1"
    res = subprocess.run([sys.executable, "-c", WORKER, str(repeat)], env=env,
                         capture_output=True, text=True, check=True)
    return json.loads(res.stdout.strip().splitlines()[-1])


def main():
    ap = argparse.ArgumentParser(description=__doc__.split("\n")[0])
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()
    fast, slow = run(False, args.repeat), run(True, args.repeat)
    print(f"{'case':<30}{fast['backend']:>12}{slow['backend']:>12}{'speed-up':>10}")
    for case in fast:
        if case == "backend":
            continue
        print(f"{case:<30}{fast[case] * 1e3:>10.1f}ms{slow[case] * 1e3:>10.1f}ms"
              f"{slow[case] / fast[case]:>9.1f}x")


if __name__ == "__main__":
    main()
