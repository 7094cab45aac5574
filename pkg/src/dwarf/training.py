"""Multi-scale loss, augmentation, schedules and the training loop."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Callable, Sequence

import cv2
import numpy as np

from . import ops
from .autograd import Tensor, get_dtype
from .data import GT, PX, Dataset, SceneFlowField, SceneSample
from .network import DWARF, LEVELS, SceneFlowOutput
from .optim import AdamState, adam_step
from .warp import PRIOR_SCALE

logger = logging.getLogger(__name__)

FULL = 0  # resolution key for full-resolution supervision


# ---------------------------------------------------------------- loss


@dataclass(frozen=True)
class LossWeights:
    alphas: dict = field(default_factory=lambda: {6: 0.32, 5: 0.08, 4: 0.02, 3: 0.01, 2: 0.005})
    eps: tuple = (1.0, 1.0, 0.5)  # disparity, disparity change, flow
    gamma: float = 0.0004
    reg: str = "l2"  # "l2": sum of squares, "l1sq": squared sum of magnitudes
    full_resolution: bool = False  # evaluate the level-2 term on the upsampled output

    def __post_init__(self):
        if any(a < 0 for a in self.alphas.values()) or any(e < 0 for e in self.eps) or self.gamma < 0:
            raise ValueError("loss weights must be non-negative")
        if self.reg not in ("l2", "l1sq"):
            raise ValueError(f"unknown regularizer {self.reg!r}")

    @classmethod
    def pretrain(cls) -> "LossWeights":
        return cls()

    @classmethod
    def finetune(cls) -> "LossWeights":
        return cls(alphas={6: 0.0, 5: 0.0, 4: 0.0, 3: 0.0, 2: 0.001}, full_resolution=True)

    @classmethod
    def preset(cls, name: str) -> "LossWeights":
        if name not in ("pretrain", "finetune"):
            raise ValueError(f"unknown loss preset {name!r}")
        return getattr(cls, name)()

    def resolutions(self) -> list[int]:
        """Downscaling levels the targets must be prepared at."""
        out = []
        for k, a in sorted(self.alphas.items(), reverse=True):
            if a > 0:
                out.append(FULL if (k == LEVELS[-1] and self.full_resolution) else k)
        return out


@dataclass
class Target:
    """Batched ground truth in /20 units at one resolution."""

    flow: np.ndarray  # (N, 2, h, w)
    disp: np.ndarray  # (N, 1, h, w)
    change: np.ndarray
    mask: np.ndarray  # (N, 1, h, w) float 0/1


@dataclass
class LossTerms:
    total: Tensor
    data: float
    reg: float


def downscale_gt(gt: SceneFlowField, level: int) -> SceneFlowField:
    """Valid-aware block average over 2^level blocks, magnitudes divided by 20."""
    f = 2**level
    h, w = gt.shape
    if h % f or w % f:
        raise ValueError(f"ground truth {h}x{w} not divisible by 2^{level}")
    valid = gt.valid.astype(np.float64)

    def pool(x):
        return x.reshape(x.shape[:-2] + (h // f, f, w // f, f)).sum(axis=(-3, -1))

    count = pool(valid)
    denom = np.maximum(count, 1.0)

    def avg(x):
        return pool(np.where(gt.valid, x, 0.0)) / denom / PRIOR_SCALE

    return SceneFlowField(avg(gt.flow), avg(gt.disp), avg(gt.change), count > 0, None, gt.provenance)


def stack_targets(gts: Sequence[SceneFlowField]) -> Target:
    return Target(
        np.stack([g.flow for g in gts]),
        np.stack([g.disp[None] for g in gts]),
        np.stack([g.change[None] for g in gts]),
        np.stack([g.valid[None] for g in gts]).astype(np.float64),
    )


def prepare_targets(gts: Sequence[SceneFlowField], weights: LossWeights) -> dict:
    return {k: stack_targets([downscale_gt(g, k) for g in gts]) for k in weights.resolutions()}


def _masked_l1(pred: Tensor, target: np.ndarray, mask: np.ndarray) -> Tensor:
    dtype = get_dtype()
    err = ops.abs(ops.sub(pred, Tensor(target.astype(dtype))))
    return ops.sum(ops.mul(err, Tensor(mask.astype(dtype))))


def regularizer(params: Sequence[Tensor], kind: str = "l2") -> Tensor:
    if kind == "l2":
        return ops.sum_squares(params)
    return ops.square(ops.sum_abs(params))


def multiscale_loss(
    outputs: SceneFlowOutput, targets: dict, weights: LossWeights, params: Sequence[Tensor] = ()
) -> LossTerms:
    """Weighted masked L1 over the supervised levels plus the weight penalty.

    ``targets`` maps a level (or 0 for full resolution) to a :class:`Target`.
    The finest level uses the refined estimate when the model has one.
    """
    eps_d, eps_c, eps_f = weights.eps
    data_terms = []
    any_valid = False
    for k, alpha in sorted(weights.alphas.items(), reverse=True):
        if alpha <= 0:
            continue
        est = outputs.levels[k]
        if k == LEVELS[-1] and outputs.refined:
            est = outputs.refined
        res = k
        if k == LEVELS[-1] and weights.full_resolution:
            res = FULL
            est = tuple(ops.bilinear_upsample(e, 2**k) for e in est)
        tgt = targets[res]
        if tgt.mask.sum() == 0:
            continue
        any_valid = True
        flow, disp, change = est
        term = ops.add(
            ops.add(ops.scale(_masked_l1(disp, tgt.disp, tgt.mask), eps_d),
                    ops.scale(_masked_l1(change, tgt.change, tgt.mask), eps_c)),
            ops.scale(_masked_l1(flow, tgt.flow, tgt.mask), eps_f),
        )
        data_terms.append(ops.scale(term, alpha))
    if not any_valid:
        logger.warning("empty validity mask; data term is zero")
    total = Tensor(np.zeros((), dtype=get_dtype()))
    for t in data_terms:
        total = ops.add(total, t)
    data_value = float(total.data)
    reg_value = 0.0
    if weights.gamma > 0 and params:
        reg = ops.scale(regularizer(params, weights.reg), weights.gamma)
        reg_value = float(reg.data)
        total = ops.add(total, reg)
    return LossTerms(total, data_value, reg_value)


# ---------------------------------------------------------------- augmentation


@dataclass(frozen=True)
class AugmentSpec:
    gamma: tuple = (0.8, 1.2)
    brightness: tuple = (0.5, 2.0)
    color: tuple = (0.8, 1.2)
    zoom_prob: float = 0.5
    zoom: tuple = (1.0, 1.8)
    photometric: bool = True


def apply_photometric(image: np.ndarray, g: float, b: float, c: Sequence[float]) -> np.ndarray:
    out = np.power(np.clip(image, 0.0, 1.0), g) * b * np.asarray(c, dtype=np.float64)[:, None, None]
    return np.clip(out, 0.0, 1.0).astype(image.dtype)


def augment_photometric(sample: SceneSample, rng: np.random.Generator, spec: AugmentSpec = AugmentSpec()) -> SceneSample:
    """Independent gamma, brightness and per-channel colour jitter per image."""
    images = []
    for img in sample.images:
        g = rng.uniform(*spec.gamma)
        b = rng.uniform(*spec.brightness)
        c = rng.uniform(*spec.color, size=3)
        images.append(apply_photometric(img, g, b, c))
    return replace(sample, images=tuple(images))


def _zoom_index(n: int, z: float) -> tuple[np.ndarray, int]:
    m = int(round(n * z))
    off = (m - n) // 2
    src = np.floor((np.arange(n) + off + 0.5) / z).astype(int)
    return np.clip(src, 0, n - 1), off


def augment_zoom(sample: SceneSample, rng: np.random.Generator | None = None, spec: AugmentSpec = AugmentSpec(),
                 z: float | None = None) -> SceneSample:
    """Rescale all views and ground truth by one factor, then center-crop back.

    Images use bilinear resampling; ground truth uses nearest sampling and
    its magnitudes are multiplied by the factor.
    """
    if z is None:
        z = rng.uniform(*spec.zoom) if rng.random() < spec.zoom_prob else 1.0
    if z == 1.0:
        return sample
    h, w = sample.shape
    iy, oy = _zoom_index(h, z)
    ix, ox = _zoom_index(w, z)
    size = (int(round(w * z)), int(round(h * z)))
    images = []
    for img in sample.images:
        big = cv2.resize(np.ascontiguousarray(img.transpose(1, 2, 0)), size, interpolation=cv2.INTER_LINEAR)
        images.append(np.ascontiguousarray(big[oy:oy + h, ox:ox + w].transpose(2, 0, 1)))
    gt = sample.gt
    if gt is not None:
        pick = np.ix_(iy, ix)
        gt = SceneFlowField(
            gt.flow[:, iy][:, :, ix] * z, gt.disp[pick] * z, gt.change[pick] * z, gt.valid[pick],
            None if gt.noc is None else gt.noc[pick], gt.provenance,
        )
    return replace(sample, images=tuple(images), gt=gt)


def pad_sample(sample: SceneSample, size: tuple) -> SceneSample:
    """Zero-pad bottom/right to (width, height); padded ground truth is invalid."""
    w, h = size
    H, W = sample.shape
    if H > h or W > w:
        raise ValueError(f"sample {W}x{H} larger than pad size {w}x{h}")
    if (H, W) == (h, w):
        return sample
    pad = ((0, h - H), (0, w - W))
    images = tuple(np.pad(i, ((0, 0),) + pad) for i in sample.images)
    gt = sample.gt
    if gt is not None:
        gt = SceneFlowField(np.pad(gt.flow, ((0, 0),) + pad), np.pad(gt.disp, pad), np.pad(gt.change, pad),
                            np.pad(gt.valid, pad), None if gt.noc is None else np.pad(gt.noc, pad), gt.provenance)
    return replace(sample, images=images, gt=gt)


def crop_sample(sample: SceneSample, size: tuple, rng: np.random.Generator) -> SceneSample:
    w, h = size
    H, W = sample.shape
    if H < h or W < w:
        raise ValueError(f"sample {W}x{H} smaller than crop {w}x{h}")
    y0 = int(rng.integers(0, H - h + 1))
    x0 = int(rng.integers(0, W - w + 1))
    sl = (slice(y0, y0 + h), slice(x0, x0 + w))
    images = tuple(i[(slice(None),) + sl] for i in sample.images)
    gt = sample.gt
    if gt is not None:
        gt = SceneFlowField(gt.flow[(slice(None),) + sl], gt.disp[sl], gt.change[sl], gt.valid[sl],
                            None if gt.noc is None else gt.noc[sl], gt.provenance)
    return replace(sample, images=images, gt=gt)


# ---------------------------------------------------------------- schedules

MODES = ("gt", "px", "px+gt", "px_then_gt")


@dataclass(frozen=True)
class TrainSchedule:
    steps: int
    batch_size: int = 4
    crop: tuple | None = None  # (width, height)
    pad: tuple | None = None
    lr: float = 1e-4
    decay_steps: tuple = ()
    decay_factors: tuple = ()  # one per decay step; empty means halve at each
    loss: str = "pretrain"
    augment: AugmentSpec | None = AugmentSpec()
    mode: str = "gt"
    split: int = 0  # first step drawing from the ground-truth pool under px_then_gt
    gamma: float | None = None  # overrides the preset's regularization weight
    name: str = "custom"

    def __post_init__(self):
        if self.steps < 0 or self.batch_size < 1:
            raise ValueError("steps must be >= 0 and batch size >= 1")
        d = list(self.decay_steps)
        if any(b <= a for a, b in zip(d, d[1:])):
            raise ValueError("decay points must be strictly increasing")
        if d and d[-1] >= self.steps:
            raise ValueError("decay points must lie before the final step")
        if self.decay_factors and len(self.decay_factors) != len(d):
            raise ValueError("need one decay factor per decay point")
        if self.mode not in MODES:
            raise ValueError(f"unknown distillation mode {self.mode!r}")
        if self.mode == "px_then_gt" and not 0 < self.split < self.steps:
            raise ValueError("px_then_gt needs 0 < split < steps")
        LossWeights.preset(self.loss)
        for size in (self.crop, self.pad):
            if size is not None and (size[0] % 64 or size[1] % 64):
                raise ValueError(f"crop/pad {size} must be divisible by 64")

    def lr_at(self, step: int) -> float:
        factors = self.decay_factors or (0.5,) * len(self.decay_steps)
        lr = self.lr
        for point, f in zip(self.decay_steps, factors):
            if step >= point:
                lr *= f
        return lr

    def pool_at(self, step: int) -> str:
        if self.mode == "px_then_gt":
            return PX if step < self.split else GT
        return self.mode

    def loss_weights(self) -> LossWeights:
        w = LossWeights.preset(self.loss)
        return w if self.gamma is None else replace(w, gamma=self.gamma)


def make_schedule(preset: str) -> TrainSchedule:
    if preset == "flyingthings":
        return TrainSchedule(steps=1_200_000, batch_size=4, crop=(768, 384), lr=1e-4,
                             decay_steps=(400_000, 600_000, 800_000, 1_000_000), loss="pretrain", name=preset)
    if preset == "kitti_ft":
        return TrainSchedule(steps=50_000, batch_size=4, crop=(896, 320), pad=(1280, 384), lr=3e-5,
                             decay_steps=(25_000, 35_000, 45_000), loss="finetune", name=preset)
    if preset == "distilled_ft":
        return replace(make_schedule("kitti_ft"), mode="px_then_gt", split=40_000, name=preset)
    raise ValueError(f"unknown schedule preset {preset!r}; expected flyingthings, kitti_ft or distilled_ft")


_TUPLE_KEYS = {"crop", "pad", "decay_steps", "decay_factors"}


def write_schedule(schedule: TrainSchedule, path: str | Path) -> None:
    lines = []
    for f in fields(schedule):
        v = getattr(schedule, f.name)
        if f.name == "augment":
            lines.append(f"augment = {'on' if v is not None else 'off'}")
            continue
        if v is None:
            v = "none"
        elif isinstance(v, tuple):
            v = ",".join(str(x) for x in v)
        lines.append(f"{f.name} = {v}")
    Path(path).write_text("\n".join(lines) + "\n")


def read_schedule(path: str | Path) -> TrainSchedule:
    """Parse ``key = value`` lines; ``preset = name`` seeds the defaults."""
    path = Path(path)
    if not path.exists():
        raise ValueError(f"schedule file not found: {path}")
    values = {}
    for lineno, raw in enumerate(path.read_text().splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"{path}:{lineno}: expected 'key = value'")
        key, val = (s.strip() for s in line.split("=", 1))
        values[key] = val
    base = make_schedule(values.pop("preset")) if "preset" in values else None
    kinds = {f.name: f for f in fields(TrainSchedule)}
    parsed = {}
    for key, val in values.items():
        if key not in kinds:
            raise ValueError(f"{path}: unknown schedule key {key!r}")
        try:
            if key == "augment":
                parsed[key] = AugmentSpec() if val.lower() in ("on", "true", "1") else None
            elif val.lower() == "none":
                parsed[key] = () if key in ("decay_steps", "decay_factors") else None
            elif key in _TUPLE_KEYS:
                conv = float if key == "decay_factors" else int
                parsed[key] = tuple(conv(x) for x in val.split(",") if x.strip())
            elif key in ("steps", "batch_size", "split"):
                parsed[key] = int(float(val))
            elif key in ("lr", "gamma"):
                parsed[key] = float(val)
            else:
                parsed[key] = val
        except ValueError:
            raise ValueError(f"{path}: bad value for {key!r}: {val!r}") from None
    if base is None:
        if "steps" not in parsed:
            raise ValueError(f"{path}: 'steps' or 'preset' is required")
        return TrainSchedule(**parsed)
    return replace(base, **parsed)


# ---------------------------------------------------------------- loop


@dataclass
class TrainResult:
    model: DWARF
    log: list = field(default_factory=list)


def _pools(samples) -> dict:
    pools = {GT: [], PX: []}
    for i in range(len(samples)):
        prov = samples.entries[i].provenance if isinstance(samples, Dataset) else samples[i].provenance
        pools[prov].append(i)
    pools["px+gt"] = pools[GT] + pools[PX]
    return pools


def check_provenance(samples, schedule: TrainSchedule) -> dict:
    pools = _pools(samples)
    needed = {"gt": [GT], "px": [PX], "px+gt": ["px+gt"], "px_then_gt": [PX, GT]}[schedule.mode]
    for name in needed:
        if schedule.steps and not pools[name]:
            raise ValueError(f"schedule mode {schedule.mode!r} needs {name} samples, dataset has none")
    return pools


def make_batch(samples, indices: Sequence[int], schedule: TrainSchedule, rng: np.random.Generator):
    batch = []
    for i in indices:
        s = samples.load(i) if isinstance(samples, Dataset) else samples[i]
        if s.gt is None:
            raise ValueError(f"training sample {i} has no ground truth")
        if schedule.augment is not None:
            s = augment_zoom(s, rng, schedule.augment)
            if schedule.augment.photometric:
                s = augment_photometric(s, rng, schedule.augment)
        if schedule.pad is not None:
            s = pad_sample(s, schedule.pad)
        if schedule.crop is not None:
            s = crop_sample(s, schedule.crop, rng)
        batch.append(s)
    dtype = get_dtype()
    images = [Tensor(np.stack([s.images[j] for s in batch]).astype(dtype)) for j in range(4)]
    return images, [s.gt for s in batch]


def train_step(model: DWARF, images, gts, weights: LossWeights, state: AdamState) -> LossTerms:
    model.zero_grad()
    params = model.parameters()
    out = model(*images)
    terms = multiscale_loss(out, prepare_targets(gts, weights), weights, params)
    terms.total.backward()
    adam_step(params, [p.grad for p in params], state)
    return terms


def train(
    model: DWARF,
    samples,
    schedule: TrainSchedule,
    seed: int = 0,
    log_path: str | Path | None = None,
    callback: Callable[[int, DWARF, dict], None] | None = None,
) -> TrainResult:
    """Run ``schedule`` on ``samples`` (a list of SceneSample or a Dataset).

    The batch drawn at step s depends only on (seed, s), so runs are
    reproducible bit for bit.
    """
    pools = check_provenance(samples, schedule)
    weights = schedule.loss_weights()
    params = model.parameters()
    for p in params:
        p.requires_grad = True
    state = AdamState.for_params(params, lr=schedule.lr)
    result = TrainResult(model)
    writer = fh = None
    if log_path is not None:
        fh = open(log_path, "w", newline="")
        writer = csv.writer(fh)
        writer.writerow(["step", "loss", "data_loss", "reg_loss", "lr", "pool"])
    try:
        for step in range(schedule.steps):
            rng = np.random.default_rng([seed, step])
            pool_name = schedule.pool_at(step)
            pool = pools[pool_name]
            indices = [pool[int(j)] for j in rng.integers(0, len(pool), size=schedule.batch_size)]
            images, gts = make_batch(samples, indices, schedule, rng)
            state.lr = schedule.lr_at(step)
            terms = train_step(model, images, gts, weights, state)
            row = {"step": step, "loss": float(terms.total.data), "data_loss": terms.data,
                   "reg_loss": terms.reg, "lr": state.lr, "pool": pool_name}
            result.log.append(row)
            if writer is not None:
                writer.writerow([step, f"{row['loss']:.8g}", f"{terms.data:.8g}", f"{terms.reg:.8g}",
                                 f"{state.lr:.6g}", pool_name])
            if callback is not None:
                callback(step, model, row)
            if not math.isfinite(row["loss"]):
                logger.warning("non-finite loss at step %d", step)
    finally:
        if fh is not None:
            fh.close()
    return result


def predict(model: DWARF, sample: SceneSample) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Full-resolution (flow, disp, change) in pixels for one sample, padding
    to a multiple of 64 and cropping back."""
    from .autograd import no_grad

    H, W = sample.shape
    size = (-(-W // 64) * 64, -(-H // 64) * 64)
    padded = pad_sample(replace(sample, gt=None), size)
    dtype = get_dtype()
    with no_grad():
        out = model(*[Tensor(i[None].astype(dtype)) for i in padded.images])
    flow, disp, change = (t.data[0] for t in out.full)
    return flow[:, :H, :W].astype(np.float64), disp[0, :H, :W].astype(np.float64), change[0, :H, :W].astype(np.float64)
