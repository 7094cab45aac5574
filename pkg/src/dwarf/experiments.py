"""Desk-scale experiments: single-scene overfit and the toy distillation benchmark."""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field, replace

import numpy as np

from .data import PX, NoiseSpec, SceneSample, generate_scene, make_proxy, random_spec
from .metrics import MetricReport, epe
from .network import DWARF, ModelConfig
from .training import TrainSchedule, predict, train

logger = logging.getLogger(__name__)


def scene_epe(model: DWARF, sample: SceneSample) -> tuple[float, float, float]:
    flow, disp, change = predict(model, sample)
    g = sample.gt
    return epe(flow, g.flow, g.valid), epe(disp, g.disp, g.valid), epe(change, g.change, g.valid)


@dataclass
class OverfitResult:
    reached: bool
    steps: int
    epe: tuple
    seconds: float
    curve: list = field(default_factory=list)  # (step, epe_flow, epe_disp, epe_change)
    losses: list = field(default_factory=list)


def overfit(
    scene_seed: int = 0,
    model_seed: int = 0,
    max_steps: int = 2000,
    lr: float = 1e-4,
    threshold: float = 0.5,
    check_every: int = 50,
    config: ModelConfig | None = None,
    gamma: float = 0.0,
) -> OverfitResult:
    """Train on one 64x128 scene until full-resolution EPE drops below
    ``threshold`` on flow, disparity and disparity change."""
    sample = generate_scene(random_spec(scene_seed), seed=scene_seed)
    model = DWARF(config or ModelConfig(), seed=model_seed)
    result = OverfitResult(False, 0, (np.inf,) * 3, 0.0)
    t0 = time.perf_counter()

    class _Done(Exception):
        pass

    def check(step, m, row):
        result.losses.append((step + 1, row["loss"]))
        if (step + 1) % check_every:
            return
        errs = scene_epe(m, sample)
        result.curve.append((step + 1,) + errs)
        result.epe, result.steps = errs, step + 1
        logger.info("overfit step %d: EPE %s", step + 1, errs)
        if max(errs) < threshold:
            result.reached = True
            raise _Done

    sched = TrainSchedule(steps=max_steps, batch_size=1, lr=lr, augment=None, gamma=gamma, name="overfit")
    try:
        train(model, [sample], sched, seed=model_seed, callback=check)
    except _Done:
        pass
    result.seconds = time.perf_counter() - t0
    return result


@dataclass(frozen=True)
class ToyBenchmark:
    """Few clean samples, many noisy proxies, held-out scenes."""

    n_gt: int = 10
    n_px: int = 200
    n_test: int = 20
    noise: NoiseSpec = NoiseSpec(sigma_flow=0.5, sigma_disp=0.5, sigma_change=0.5, outlier_rate=0.05)
    height: int = 64
    width: int = 128

    def build(self, seed: int = 0) -> tuple[list, list]:
        """Training samples (gt then px) and held-out test samples; disjoint scene seeds."""
        base = 1_000_000 * (seed + 1)
        train_set = []
        for i in range(self.n_gt):
            s = base + i
            train_set.append(generate_scene(random_spec(s, self.height, self.width), seed=s))
        for i in range(self.n_px):
            s = base + 10_000 + i
            clean = generate_scene(random_spec(s, self.height, self.width), seed=s)
            proxy = make_proxy(clean.gt, replace(self.noise, seed=s))
            train_set.append(SceneSample(clean.images, proxy, PX))
        test_set = []
        for i in range(self.n_test):
            s = base + 50_000 + i
            test_set.append(generate_scene(random_spec(s, self.height, self.width), seed=s))
        return train_set, test_set


def evaluate_samples(model: DWARF, samples) -> MetricReport:
    report = MetricReport()
    for s in samples:
        report.add(predict(model, s), s.gt)
    return report


def toy_schedules(steps: int = 600, lr: float = 5e-4, split_fraction: float = 0.8) -> dict[str, TrainSchedule]:
    """Gt-only versus proxy-then-ground-truth with the same total budget; the
    learning rate halves at the same relative points as the KITTI fine-tuning preset."""
    decay = tuple(int(steps * f) for f in (0.5, 0.7, 0.9))
    common = dict(steps=steps, batch_size=2, lr=lr, decay_steps=decay, gamma=0.0, augment=None)
    return {
        "gt": TrainSchedule(mode="gt", name="gt", **common),
        "px_then_gt": TrainSchedule(mode="px_then_gt", split=int(steps * split_fraction), name="px_then_gt", **common),
    }


@dataclass
class DistillResult:
    sf_all: dict  # schedule -> list per seed
    curves: dict  # schedule -> list per seed of (step, SF-All)
    seconds: float = 0.0

    def medians(self) -> dict:
        return {k: float(np.median(v)) for k, v in self.sf_all.items()}


def distillation_trend(
    seeds=(0, 1, 2),
    benchmark: ToyBenchmark = ToyBenchmark(),
    config: ModelConfig = ModelConfig(width=0.25),
    steps: int = 600,
    lr: float = 5e-4,
    eval_every: int = 100,
) -> DistillResult:
    """Median held-out SF-All of each schedule across seeds."""
    t0 = time.perf_counter()
    scheds = toy_schedules(steps, lr)
    res = DistillResult({k: [] for k in scheds}, {k: [] for k in scheds})
    for seed in seeds:
        train_set, test_set = benchmark.build(seed)
        for name, sched in scheds.items():
            model = DWARF(config, seed=seed)
            curve = []

            def probe(step, m, row, curve=curve):
                if (step + 1) % eval_every == 0 and step + 1 < sched.steps:
                    curve.append((step + 1, evaluate_samples(m, test_set).sf_all))

            train(model, train_set, sched, seed=seed, callback=probe)
            final = evaluate_samples(model, test_set).sf_all
            curve.append((sched.steps, final))
            res.sf_all[name].append(final)
            res.curves[name].append(curve)
            logger.info("seed %d %s: SF-All %.2f", seed, name, final)
    res.seconds = time.perf_counter() - t0
    return res
