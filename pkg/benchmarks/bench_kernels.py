"""Time the numba kernels against their numpy twins, plus one full training step.

    python benchmarks/bench_kernels.py [--repeat 50] [--batch 32]

Shapes follow the toy training config (16 tokens, width 64, 4 heads). The
first numba call compiles; it is run once before timing.
"""

from __future__ import annotations

import argparse
import statistics
import time

import numpy as np

from mdt import kernels
from mdt.data import DatasetSpec, batches, gen_synthetic_pairs
from mdt.network import model_config
from mdt.schedules import build_linear_schedule
from mdt.training import TrainConfig, dual_pass_step, init_train_state


def _time(fn, repeat: int) -> float:
    fn()  # warm-up (and JIT compile on the numba path)
    runs = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        runs.append(time.perf_counter() - t0)
    return statistics.median(runs)


def kernel_cases(batch: int, rng: np.random.Generator) -> dict:
    n, d, heads = 16, 64, 4
    rows = rng.standard_normal((batch * n, d))
    hidden = rng.standard_normal((batch, n, 4 * d))
    logits = rng.standard_normal((batch, heads, n, n))
    g_rows = rng.standard_normal(rows.shape)
    idx = rng.integers(0, 49, size=(n, n))
    g_attn = rng.standard_normal(logits.shape)
    y, rstd = kernels.layer_norm_fwd(rows, 1e-6)
    sm = kernels.softmax_fwd(logits)
    return {
        "layer_norm_fwd": lambda: kernels.layer_norm_fwd(rows, 1e-6),
        "layer_norm_bwd": lambda: kernels.layer_norm_bwd(g_rows, y, rstd),
        "gelu_fwd": lambda: kernels.gelu_fwd(hidden),
        "gelu_bwd": lambda: kernels.gelu_bwd(hidden, hidden),
        "softmax_fwd": lambda: kernels.softmax_fwd(logits),
        "softmax_bwd": lambda: kernels.softmax_bwd(sm, g_attn),
        "bias_scatter": lambda: kernels.bias_scatter(g_attn, idx, 49),
    }


def train_step_case(batch: int, variant: str):
    cfg = model_config("toy", variant)
    tcfg = TrainConfig(batch=batch, lr=1e-3, dual_pass=variant != "dit")
    sched = build_linear_schedule()
    it = batches(gen_synthetic_pairs(DatasetSpec(size=256)), batch, 0)
    state = init_train_state(cfg, tcfg)

    def step():
        dual_pass_step(state, next(it), cfg, tcfg, sched)

    return step


def main(argv=None) -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=50)
    ap.add_argument("--batch", type=int, default=32)
    ap.add_argument("--step-repeat", type=int, default=10)
    args = ap.parse_args(argv)
    if not kernels.HAS_NUMBA:
        raise SystemExit("numba is not importable; nothing to compare")

    rows = []
    names = list(kernel_cases(args.batch, np.random.default_rng(0)))
    for name in names:
        timing = {}
        for backend in ("numpy", "numba"):
            kernels.set_backend(backend)
            timing[backend] = _time(kernel_cases(args.batch, np.random.default_rng(0))[name], args.repeat)
        rows.append((name, timing["numpy"], timing["numba"]))
    for variant in ("dit", "v1", "v2"):
        timing = {}
        for backend in ("numpy", "numba"):
            kernels.set_backend(backend)
            timing[backend] = _time(train_step_case(args.batch, variant), args.step_repeat)
        rows.append((f"train_step[{variant}]", timing["numpy"], timing["numba"]))
    kernels.set_backend("numba" if kernels.USE_NUMBA else "numpy")

    print(f"{'case':<20} {'numpy ms':>10} {'numba ms':>10} {'speedup':>8}")
    for name, t_np, t_nb in rows:
        print(f"{name:<20} {t_np * 1e3:10.3f} {t_nb * 1e3:10.3f} {t_np / t_nb:8.2f}")


if __name__ == "__main__":
    main()
