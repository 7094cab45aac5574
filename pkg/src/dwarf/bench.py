"""Forward-pass timing per ablation variant."""

from __future__ import annotations

import time

import numpy as np

from .autograd import Tensor, get_dtype, no_grad
from .network import DWARF, VARIANTS, ModelConfig, parse_variant


def bench(model: DWARF, size: tuple = (64, 128), repetitions: int = 5, warmup: int = 1, seed: int = 0) -> dict:
    """Wall time of full forward passes on random images of ``size`` (H, W);
    warmup runs are excluded."""
    if repetitions < 1:
        raise ValueError("repetitions must be >= 1")
    rng = np.random.default_rng(seed)
    images = [Tensor(rng.random((1, 3) + tuple(size)).astype(get_dtype())) for _ in range(4)]
    times = []
    with no_grad():
        for i in range(warmup + repetitions):
            t0 = time.perf_counter()
            model(*images)
            if i >= warmup:
                times.append(time.perf_counter() - t0)
    return {"mean_s": float(np.mean(times)), "min_s": float(np.min(times)), "params": model.num_params(),
            "repetitions": repetitions}


def bench_variants(size: tuple = (64, 128), repetitions: int = 5, warmup: int = 1,
                   base: ModelConfig | None = None) -> list[dict]:
    rows = []
    for name, cfg in VARIANTS.items():
        if base is not None:
            cfg = parse_variant(name, base)
        rows.append({"variant": name, **bench(DWARF(cfg), size, repetitions, warmup)})
    return rows
