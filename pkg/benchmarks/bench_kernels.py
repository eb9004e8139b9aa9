"""Timing comparison of the numba and pure-numpy kernel backends.

Runs each hot kernel at sizes representative of desk-scale training, plus
one full forward/backward of the sequence model, under both backends, and
prints per-kernel times with the speedup ratio. Also verifies that both
backends produce matching values, since the fallback must be a drop-in.

Usage: python3 benchmarks/bench_kernels.py [--repeats N]
"""

from __future__ import annotations

import argparse
import time

import numpy as np

from unisep import kernels
from unisep.model.core import ModelConfig, init_model_params, sequence_loss
from unisep.numerics import autodiff as T
from unisep.rng import stream
from unisep.sequence import build_separation_layout

BENCH_MODEL = ModelConfig(embed_dim=128, global_layers=2, local_layers=2,
                          heads=4, ff_dim=256, max_frames=512, n_q=3,
                          codebook_size=256)


def _bench(fn, repeats: int) -> float:
    fn()  # warm up (first numba call compiles)
    best = float("inf")
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


def _kernel_cases(rng):
    frames = rng.standard_normal((4096, 16)).astype(np.float32)
    codebook = rng.standard_normal((256, 16)).astype(np.float32)

    scores = rng.standard_normal((8, 320, 320)).astype(np.float32)
    mask = np.tril(np.ones((320, 320), dtype=bool))
    probs = kernels.masked_softmax(scores, mask)
    dprobs = rng.standard_normal(probs.shape).astype(np.float32)

    acts = rng.standard_normal((960, 128)).astype(np.float32)
    y, _, rstd = kernels.layer_norm(acts, 1e-5)
    dy = rng.standard_normal(acts.shape).astype(np.float32)

    grad = np.zeros((3078, 128), dtype=np.float32)
    idx = rng.integers(0, 3078, size=960)
    rows = rng.standard_normal((960, 128)).astype(np.float32)

    return {
        "nearest_code 4096x256x16":
            lambda: kernels.nearest_code(frames, codebook),
        "masked_softmax 8x320x320":
            lambda: kernels.masked_softmax(scores, mask),
        "softmax_grad 8x320x320":
            lambda: kernels.masked_softmax_grad(probs, dprobs, mask),
        "layer_norm 960x128":
            lambda: kernels.layer_norm(acts, 1e-5),
        "layer_norm_grad 960x128":
            lambda: kernels.layer_norm_grad(dy, y, rstd),
        "scatter_add 960x128":
            lambda: kernels.scatter_add_rows(grad, idx, rows),
    }


def _model_case():
    rng = stream(0, "bench-model")
    vocab = BENCH_MODEL.vocabulary()

    def grid(frames):
        from unisep.codec import TokenGrid
        return TokenGrid(
            tokens=rng.integers(0, BENCH_MODEL.codebook_size,
                                size=(frames, BENCH_MODEL.n_q)),
            n_q=BENCH_MODEL.n_q, frame_hop_samples=160, sample_rate_hz=16000,
            codebook_size=BENCH_MODEL.codebook_size)

    layout = build_separation_layout(vocab, grid(120), grid(80), grid(120))
    store = init_model_params(BENCH_MODEL, seed=0)

    def run():
        store.zero_grads()
        T.backward(sequence_loss(layout, store, BENCH_MODEL))

    return "model fwd+bwd 325 frames", run


def main() -> None:
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--repeats", type=int, default=3)
    args = parser.parse_args()

    if not kernels.numba_available():
        raise SystemExit("numba is not importable; nothing to compare")

    rng = np.random.default_rng(0)
    cases = _kernel_cases(rng)
    name, run_model = _model_case()
    cases[name] = run_model

    # correctness probe: the same inputs must give matching outputs
    probe_frames = rng.standard_normal((64, 8)).astype(np.float32)
    probe_book = rng.standard_normal((16, 8)).astype(np.float32)

    results = {}
    checks = {}
    for backend in ("numpy", "numba"):
        kernels.set_backend(backend)
        checks[backend] = kernels.nearest_code(probe_frames, probe_book)
        for case_name, fn in cases.items():
            results[(backend, case_name)] = _bench(fn, args.repeats)

    np.testing.assert_array_equal(checks["numpy"], checks["numba"])

    width = max(len(n) for n in cases)
    print(f"{'kernel':<{width}}  {'numpy':>10}  {'numba':>10}  {'speedup':>8}")
    for case_name in cases:
        t_np = results[("numpy", case_name)]
        t_nb = results[("numba", case_name)]
        print(f"{case_name:<{width}}  {t_np * 1e3:>8.2f}ms  "
              f"{t_nb * 1e3:>8.2f}ms  {t_np / t_nb:>7.2f}x")


if __name__ == "__main__":
    main()
