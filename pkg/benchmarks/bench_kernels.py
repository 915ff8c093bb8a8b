"""Compare the compiled and numpy kernels on Monte Carlo and convolution workloads.

    python3 benchmarks/bench_kernels.py [--rounds 100000] [--repeat 3]
"""

from __future__ import annotations

import argparse
import timeit

import numpy as np

from iotquarantine import _pykernels
from iotquarantine.traffic import ClassTable, ScenarioParams, device_classes, draw_devices

try:
    from iotquarantine import _ckernels
except ImportError:
    _ckernels = None


def tally_inputs(rounds: int):
    params = ScenarioParams()
    table = ClassTable.build(params)
    types, malicious, unit = draw_devices(params, np.random.default_rng(0), rounds)
    classes = device_classes(types, malicious, len(params.catalog))
    return (classes, unit, table.whole, table.frac, table.frame_bits, table.expected_bits, 2 * len(params.catalog))


def convolve_inputs(n: int):
    return np.ones(1), np.array([3, 1000, 150, 30], dtype=np.int64), np.full(4, 0.25), 0.0, n


def n_fold(module, mass, offsets, weights, stay, n):
    for _ in range(n):
        mass = module.shift_convolve(mass, offsets, weights, stay)
    return mass


def best(fn, repeat: int) -> float:
    return min(timeit.repeat(fn, number=1, repeat=repeat))


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--rounds", type=int, default=100_000)
    ap.add_argument("--flow-size", type=int, default=150, help="n for the convolution workload")
    ap.add_argument("--repeat", type=int, default=3)
    args = ap.parse_args()

    tally = tally_inputs(args.rounds)
    conv = convolve_inputs(args.flow_size)
    backends = [("python", _pykernels)] + ([("cython", _ckernels)] if _ckernels else [])
    print(f"{'workload':<34}{'backend':<10}{'seconds':>10}{'speedup':>10}")
    for label, run in (
        (f"tally {args.rounds} rounds x 100", lambda m: m.tally_rounds(*tally)),
        (f"{args.flow_size}-fold convolution", lambda m: n_fold(m, *conv)),
    ):
        base = None
        for name, module in backends:
            t = best(lambda: run(module), args.repeat)
            base = base or t
            print(f"{label:<34}{name:<10}{t:>10.3f}{base / t:>9.1f}x")
    if _ckernels is None:
        print("compiled kernels not built; only the numpy fallback was timed")


if __name__ == "__main__":
    main()
