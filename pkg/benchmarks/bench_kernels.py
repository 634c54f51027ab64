"""Compare the numba and pure-numpy kernel paths.

Usage:
    python3 benchmarks/bench_kernels.py [--tokens 12800] [--repeat 5] [--end-to-end]

Kernel timings run in one process (both paths are importable by name).
``--end-to-end`` also times a full calibration pass in two subprocesses,
one with MONE_DISABLE_NUMBA=1.
"""

import argparse
import os
import subprocess
import sys
import timeit

import numpy as np

from mone import _kernels

CALIBRATION_SNIPPET = """
import time
from mone import _kernels
from mone.calibration import run_calibration
from mone.corpus import markov_corpus
from mone.model import ModelConfig, init_model
model = init_model(ModelConfig())
corpus = markov_corpus(256, 100, 128, 1)
run_calibration(model, corpus.head(1))  # warm-up, loads compiled kernels
t0 = time.perf_counter()
run_calibration(model, corpus)
print(_kernels.backend(), time.perf_counter() - t0)
"""


def best_of(fn, repeat):
    return min(timeit.repeat(fn, number=1, repeat=repeat))


def bench_topk(tokens, n_experts, k, repeat):
    scores = np.random.default_rng(0).random((tokens, n_experts))
    a, b = _kernels.topk_rows_numba(scores, k), _kernels.topk_rows_numpy(scores, k)
    assert np.array_equal(a, b)
    return (best_of(lambda: _kernels.topk_rows_numba(scores, k), repeat),
            best_of(lambda: _kernels.topk_rows_numpy(scores, k), repeat))


def bench_welford(tokens, n_experts, k, d, repeat):
    rng = np.random.default_rng(1)
    experts = rng.integers(0, n_experts, tokens * k).astype(np.int64)
    gates = rng.random(tokens * k)
    outputs = rng.normal(size=(tokens * k, d))

    def fresh():
        return (np.zeros(n_experts, np.int64), np.zeros(n_experts), np.zeros((n_experts, d)),
                np.zeros((n_experts, d)))

    ref, alt = fresh(), fresh()
    _kernels.welford_scatter_numba(*ref, experts, gates, outputs)
    _kernels.welford_scatter_numpy(*alt, experts, gates, outputs)
    for x, y in zip(ref, alt):
        np.testing.assert_allclose(x, y, rtol=1e-9, atol=1e-9)
    return (best_of(lambda: _kernels.welford_scatter_numba(*fresh(), experts, gates, outputs), repeat),
            best_of(lambda: _kernels.welford_scatter_numpy(*fresh(), experts, gates, outputs), repeat))


def end_to_end():
    rows = []
    for disable in ("0", "1"):
        env = dict(os.environ, MONE_DISABLE_NUMBA=disable)
        out = subprocess.run([sys.executable, "-c", CALIBRATION_SNIPPET], env=env, check=True,
                             capture_output=True, text=True).stdout.split()
        rows.append((out[0], float(out[1])))
    return rows


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--tokens", type=int, default=12_800)
    ap.add_argument("--experts", type=int, default=16)
    ap.add_argument("--top-k", type=int, default=4)
    ap.add_argument("--d-model", type=int, default=64)
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--end-to-end", action="store_true")
    args = ap.parse_args()
    if not _kernels.HAVE_NUMBA:
        sys.exit("numba is not installed; nothing to compare")

    print(f"{'kernel':<18}{'numba [ms]':>12}{'numpy [ms]':>12}{'speedup':>10}")
    for name, (t_nb, t_np) in (
        ("topk_rows", bench_topk(args.tokens, args.experts, args.top_k, args.repeat)),
        ("welford_scatter", bench_welford(args.tokens, args.experts, args.top_k, args.d_model, args.repeat)),
    ):
        print(f"{name:<18}{t_nb * 1e3:>12.2f}{t_np * 1e3:>12.2f}{t_np / t_nb:>9.1f}x")

    if args.end_to_end:
        print("\nfull calibration, 100 x 128 tokens on the default model:")
        for backend, secs in end_to_end():
            print(f"  {backend:<8}{secs:8.2f} s")


if __name__ == "__main__":
    main()
