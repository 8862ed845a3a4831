"""Compare the compiled kernels with the pure-Python fallback.

    python3 benchmarks/bench_kernels.py [--repeat N]

Micro-benchmarks call both modules directly. The end-to-end row runs a full
scenario in a subprocess per implementation, since the choice is made at import.
"""

import argparse
import importlib
import os
import random
import subprocess
import sys
import timeit

END_TO_END = (
    "import time\n"
    "from passvp import KERNEL_IMPLEMENTATION as impl\n"
    "from passvp.harness.config import PlatformConfig\n"
    "from passvp.harness.runner import run_scenario\n"
    "best = float('inf')\n"
    "for _ in range({repeat}):\n"
    "    t = time.perf_counter()\n"
    "    assert run_scenario(PlatformConfig(), 'enumerate-and-run', length=65536).exit_status == 0\n"
    "    best = min(best, time.perf_counter() - t)\n"
    "print(impl, best)\n"
)


def event_queue(mod, n=20000):
    rng = random.Random(0)
    times = [rng.randrange(1_000_000) for _ in range(n)]

    def run():
        q = mod.EventQueue()
        for i, t in enumerate(times):
            q.push(t, i)
        while len(q):
            q.pop()
    return run


def byte_sum(mod, n=1 << 20):
    buf = bytes(random.Random(1).getrandbits(8) for _ in range(n))
    return lambda: mod.byte_sum32(buf)


def lookup(mod, regions=64, probes=20000):
    starts = [i * 0x10000 for i in range(regions)]
    sizes = [0x1000] * regions
    addrs = [random.Random(2).randrange(regions * 0x10000) for _ in range(probes)]

    def run():
        for a in addrs:
            mod.find_range(starts, sizes, a, 4)
    return run


def best_of(fn, repeat):
    return min(timeit.repeat(fn, number=1, repeat=repeat))


def end_to_end(pure, repeat):
    env = dict(os.environ, PASSVP_PURE_PYTHON="1" if pure else "0")
    out = subprocess.run([sys.executable, "-c", END_TO_END.format(repeat=repeat)], env=env,
                         check=True, capture_output=True, text=True).stdout.split()
    return out[0], float(out[1])


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()

    py = importlib.import_module("passvp._pyspeedups")
    try:
        cy = importlib.import_module("passvp._speedups")
    except ImportError:
        sys.exit("compiled extension not built; reinstall without PASSVP_NO_CYTHON")

    print(f"{'kernel':<28}{'python s':>12}{'cython s':>12}{'speedup':>10}")
    for name, make in (("event queue 20k push/pop", event_queue),
                       ("byte_sum32 1 MiB", byte_sum),
                       ("find_range 20k lookups", lookup)):
        tp, tc = best_of(make(py), args.repeat), best_of(make(cy), args.repeat)
        print(f"{name:<28}{tp:>12.4f}{tc:>12.4f}{tp / tc:>9.1f}x")

    (ip, tp), (ic, tc) = end_to_end(True, args.repeat), end_to_end(False, args.repeat)
    if (ip, ic) != ("python", "cython"):
        sys.exit(f"unexpected implementations {ip}/{ic}")
    print(f"{'scenario, 64 KiB copy job':<28}{tp:>12.4f}{tc:>12.4f}{tp / tc:>9.1f}x")


if __name__ == "__main__":
    main()
