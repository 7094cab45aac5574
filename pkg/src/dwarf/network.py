"""The scene-flow network: shared encoder pyramid, per-level estimators, refinement.

Parameter enumeration order (fixed, used by checkpoints and optimizers):

1. ``enc.{level}.{i}`` for levels 1..6, three convs each;
2. per estimator level k = 6..2: ``est{k}.backbone.{i}``, then for each task in
   (flow, disp, change): ``est{k}.{task}.{0,1}``, ``est{k}.{task}.pred`` and,
   for k > 2, ``est{k}.{task}.up_pred`` / ``est{k}.{task}.up_zeta``;
3. ``refine.{task}.{i}`` and ``refine.{task}.residual`` when refinement is on.

Every layer contributes ``.w`` then ``.b``.

Predictions are kept in ground-truth/20 units at every level; warping converts
them to level pixels with :func:`dwarf.warp.prior_to_pixels`.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Iterable

import numpy as np

from . import checkpoint, ops
from .autograd import Tensor, as_tensor
from .correlation import CorrConfig, activate, corr1d, corr2d, corr3d
from .warp import PRIOR_SCALE, prior_to_pixels, warp_by_disparity, warp_by_flow, warp_by_flow_and_change

TASKS = (("flow", 2), ("disp", 1), ("change", 1))
LEVELS = (6, 5, 4, 3, 2)


@dataclass(frozen=True)
class ModelConfig:
    dense: bool = True
    corr3d: bool = True
    refine: bool = True
    encoder_channels: tuple = (16, 32, 64, 96, 128, 196)
    backbone_channels: tuple = (128, 128, 96)
    head_channels: tuple = (64, 32)
    refine_channels: tuple = (128, 128, 128, 96, 64, 32)
    refine_dilations: tuple = (1, 2, 4, 8, 16, 1)
    zeta_up_channels: int = 2
    r_1d: int = 4
    r_2d: tuple = (4, 4)
    r_3d: tuple = (4, 4, 0)
    normalize_corr: bool = True
    activate_corr: bool = True
    detach_priors: bool = False
    alpha: float = 0.1
    width: float = 1.0

    def scaled(self, channels: Iterable[int]) -> tuple:
        return tuple(max(2, int(round(c * self.width))) for c in channels)

    @property
    def corr_channels(self) -> int:
        n = (2 * self.r_1d + 1) * 2 + (2 * self.r_2d[0] + 1) * (2 * self.r_2d[1] + 1)
        if self.corr3d:
            ry, rx, rz = self.r_3d
            n += (2 * ry + 1) * (2 * rx + 1) * (2 * rz + 1)
        return n

    def volume_channels(self, level: int) -> int:
        n = self.scaled(self.encoder_channels)[level - 1] + self.corr_channels
        if level < LEVELS[0]:
            n += sum(c for _, c in TASKS) + len(TASKS) * self.zeta_up_channels
        return n


VARIANTS = {
    "baseline": ModelConfig(dense=False, corr3d=False, refine=False),
    "dense": ModelConfig(dense=True, corr3d=False, refine=False),
    "dense+3dcorr": ModelConfig(dense=True, corr3d=True, refine=False),
    "full": ModelConfig(dense=True, corr3d=True, refine=True),
}


def parse_variant(spec: str, base: ModelConfig | None = None) -> ModelConfig:
    """``full`` / ``baseline`` / a VARIANTS key, or a comma list of toggles such as
    ``dense,3dcorr`` (anything not listed is switched off)."""
    if spec in VARIANTS:
        cfg = VARIANTS[spec]
        return cfg if base is None else replace(base, dense=cfg.dense, corr3d=cfg.corr3d, refine=cfg.refine)
    toggles = {t.strip().lower() for t in spec.split(",") if t.strip()}
    unknown = toggles - {"dense", "3dcorr", "refine"}
    if unknown:
        raise ValueError(f"unknown variant toggle(s): {', '.join(sorted(unknown))}")
    return replace(base or ModelConfig(), dense="dense" in toggles, corr3d="3dcorr" in toggles, refine="refine" in toggles)


def _format_value(v) -> str:
    if isinstance(v, tuple):
        return ",".join(str(x) for x in v)
    return str(v).lower() if isinstance(v, bool) else str(v)


def write_model_config(cfg: ModelConfig, path: str | Path) -> None:
    lines = [f"{k} = {_format_value(v)}" for k, v in asdict(cfg).items()]
    Path(path).write_text("\n".join(lines) + "\n")


def read_model_config(path: str | Path) -> ModelConfig:
    types = {f.name: f for f in fields(ModelConfig)}
    defaults = ModelConfig()
    values = {}
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"{path}:{lineno}: expected 'key = value'")
        key, val = (s.strip() for s in line.split("=", 1))
        if key not in types:
            raise ValueError(f"{path}:{lineno}: unknown model setting {key!r}")
        default = getattr(defaults, key)
        if isinstance(default, bool):
            if val.lower() not in ("true", "false"):
                raise ValueError(f"{path}:{lineno}: {key} must be true or false")
            values[key] = val.lower() == "true"
        elif isinstance(default, tuple):
            values[key] = tuple(int(x) for x in val.split(","))
        else:
            values[key] = type(default)(val)
    return replace(defaults, **values)


@dataclass
class SceneFlowOutput:
    """Estimates in ground-truth/20 units per level, plus the full-resolution
    triple in pixels (x20, bilinearly upsampled)."""

    levels: dict = field(default_factory=dict)  # k -> (flow, disp, change)
    refined: tuple = ()
    full: tuple = ()
    zetas: dict = field(default_factory=dict)  # k -> (zeta_flow, zeta_disp, zeta_change)

    @property
    def final(self) -> tuple:
        return self.refined if self.refined else self.levels[min(self.levels)]


class _Layer:
    def __init__(self, model, name, cin, cout, k=3, stride=1, dilation=1, transpose=False):
        self.w, self.b = model.params[f"{name}.w"], model.params[f"{name}.b"]
        self.stride, self.dilation, self.transpose = stride, dilation, transpose
        self.padding = dilation * (k - 1) // 2 if not transpose else 1

    def __call__(self, x: Tensor) -> Tensor:
        if self.transpose:
            return ops.conv2d_transpose(x, self.w, self.b, stride=2, padding=1)
        return ops.conv2d(x, self.w, self.b, stride=self.stride, dilation=self.dilation, padding=self.padding)


def _bilinear_kernel(c: int, k: int = 4) -> np.ndarray:
    """Per-channel transposed-conv kernel that performs 2x bilinear upsampling."""
    f = math.ceil(k / 2)
    center = (2 * f - 1 - f % 2) / (2 * f)
    og = np.arange(k)
    filt = 1 - np.abs(og / f - center)
    kern = np.outer(filt, filt)
    w = np.zeros((c, c, k, k))
    for i in range(c):
        w[i, i] = kern
    return w


class DWARF:
    def __init__(self, config: ModelConfig | None = None, seed: int = 0) -> None:
        self.config = config or ModelConfig()
        self.params: dict[str, Tensor] = {}
        self._rng = np.random.default_rng(seed)
        self._build()
        del self._rng

    # ------------------------------------------------------------ construction

    def _add(self, name, cin, cout, k=3, stride=1, dilation=1, init="he", transpose=False) -> _Layer:
        if transpose:
            shape, fan_in = (cin, cout, k, k), cin * k * k / 4
        else:
            shape, fan_in = (cout, cin, k, k), cin * k * k
        if init == "zero":
            w = np.zeros(shape)
        elif init == "bilinear":
            w = _bilinear_kernel(cin, k)
        else:
            gain = 2.0 if init == "he" else 1.0
            w = self._rng.normal(0.0, math.sqrt(gain / fan_in), size=shape)
        self.params[f"{name}.w"] = Tensor(w, requires_grad=True, name=f"{name}.w")
        self.params[f"{name}.b"] = Tensor(np.zeros(cout), requires_grad=True, name=f"{name}.b")
        return _Layer(self, name, cin, cout, k, stride, dilation, transpose)

    def _build(self) -> None:
        cfg = self.config
        enc = cfg.scaled(cfg.encoder_channels)
        self.encoder = []
        cin = 3
        for level, c in enumerate(enc, 1):
            self.encoder.append([
                self._add(f"enc.{level}.0", cin, c, stride=2),
                self._add(f"enc.{level}.1", c, c),
                self._add(f"enc.{level}.2", c, c),
            ])
            cin = c

        backbone = cfg.scaled(cfg.backbone_channels)
        heads = cfg.scaled(cfg.head_channels)
        zeta_ch = heads[-1]
        self.estimators = {}
        for k in LEVELS:
            est = {"backbone": [], "heads": {}}
            ch = cfg.volume_channels(k)
            for i, co in enumerate(backbone):
                est["backbone"].append(self._add(f"est{k}.backbone.{i}", ch, co))
                ch = ch + co if cfg.dense else co
            for task, pc in TASKS:
                h = ch
                layers = []
                for i, co in enumerate(heads):
                    layers.append(self._add(f"est{k}.{task}.{i}", h, co))
                    h = h + co if cfg.dense else co
                head = {"layers": layers, "pred": self._add(f"est{k}.{task}.pred", h, pc, init="linear")}
                if k > LEVELS[-1]:
                    head["up_pred"] = self._add(f"est{k}.{task}.up_pred", pc, pc, k=4, init="bilinear", transpose=True)
                    head["up_zeta"] = self._add(f"est{k}.{task}.up_zeta", zeta_ch, cfg.zeta_up_channels, k=4, init="linear", transpose=True)
                est["heads"][task] = head
            self.estimators[k] = est

        self.refiners = {}
        if cfg.refine:
            rch = cfg.scaled(cfg.refine_channels)
            for task, pc in TASKS:
                layers = []
                ch = zeta_ch + pc
                for i, (co, dil) in enumerate(zip(rch, cfg.refine_dilations)):
                    layers.append(self._add(f"refine.{task}.{i}", ch, co, dilation=dil))
                    ch = co
                residual = self._add(f"refine.{task}.residual", ch, pc, init="zero")
                self.refiners[task] = (layers, residual)

    # ------------------------------------------------------------ parameters

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def num_params(self) -> int:
        return int(sum(p.size for p in self.params.values()))

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: p.data.astype(np.float32) for k, p in self.params.items()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        missing = set(self.params) - set(state)
        extra = set(state) - set(self.params)
        if missing or extra:
            raise ValueError(f"checkpoint mismatch: missing={sorted(missing)[:3]} unexpected={sorted(extra)[:3]}")
        for k, p in self.params.items():
            if state[k].shape != p.shape:
                raise ValueError(f"checkpoint shape mismatch for {k}: {state[k].shape} vs {p.shape}")
            p.data = np.ascontiguousarray(state[k], dtype=p.data.dtype)

    def save(self, path: str | Path) -> None:
        checkpoint.save(self.state_dict(), path)

    @classmethod
    def load(cls, path: str | Path, config: ModelConfig | None = None) -> "DWARF":
        model = cls(config)
        model.load_state_dict(checkpoint.load(path))
        return model

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    # ------------------------------------------------------------ forward

    def _act(self, x: Tensor) -> Tensor:
        return ops.leaky_relu(x, self.config.alpha)

    def encode(self, image: Tensor) -> list[Tensor]:
        """Feature pyramid; element ``k - 1`` holds the level-k features."""
        image = as_tensor(image)
        if image.ndim != 4 or image.shape[1] != 3:
            raise ValueError(f"encoder expects (batch, 3, H, W) images, got {image.shape}")
        if image.shape[2] % 64 or image.shape[3] % 64:
            raise ValueError(f"image size {image.shape[2]}x{image.shape[3]} is not divisible by 64; pad first")
        feats, x = [], image
        for block in self.encoder:
            for layer in block:
                x = self._act(layer(x))
            feats.append(x)
        return feats

    def estimate(self, level: int, volume: Tensor):
        """Run the level estimator on a stacked volume.

        Returns ``(predictions, zetas)``, each a dict keyed by task.
        """
        expected = self.config.volume_channels(level)
        if volume.shape[1] != expected:
            raise ValueError(f"level {level} estimator expects {expected} channels, got {volume.shape[1]}")
        est = self.estimators[level]
        dense = self.config.dense
        feats = volume
        for layer in est["backbone"]:
            y = self._act(layer(feats))
            feats = ops.concat_channels([feats, y]) if dense else y
        preds, zetas = {}, {}
        for task, _ in TASKS:
            head = est["heads"][task]
            h = feats
            for layer in head["layers"]:
                y = self._act(layer(h))
                h = ops.concat_channels([h, y]) if dense else y
            zetas[task] = y
            preds[task] = head["pred"](h)
        return preds, zetas

    def refine(self, zetas: dict, estimates: dict) -> dict:
        out = {}
        for task, _ in TASKS:
            layers, residual = self.refiners[task]
            x = ops.concat_channels([zetas[task], estimates[task]])
            for layer in layers:
                x = self._act(layer(x))
            out[task] = ops.add(estimates[task], residual(x))
        return out

    def cost_volumes(self, level, l1, r1, l2, r2, priors=None) -> list[Tensor]:
        """Warp the level features by the priors and stack the correlation scores."""
        cfg = self.config
        c1d = CorrConfig(r_x=cfg.r_1d, r_y=0, normalize=cfg.normalize_corr, post_activation=cfg.activate_corr)
        c2d = CorrConfig(r_x=cfg.r_2d[1], r_y=cfg.r_2d[0], normalize=cfg.normalize_corr, post_activation=cfg.activate_corr)
        if priors is not None:
            flow, disp, change = (prior_to_pixels(p, level) for p in priors)
            if cfg.detach_priors:
                flow, disp, change = flow.detach(), disp.detach(), change.detach()
            r1 = warp_by_disparity(r1, disp)
            r2 = warp_by_flow_and_change(r2, flow, change)
            l2 = warp_by_flow(l2, flow)
        cd1 = corr1d(l1, r1, c1d)
        cf1 = corr2d(l1, l2, c2d)
        cd2 = corr1d(l2, r2, c1d)
        vols = [activate(cd1, c1d, cfg.alpha), activate(cf1, c2d, cfg.alpha), activate(cd2, c1d, cfg.alpha)]
        if cfg.corr3d:
            ry, rx, rz = cfg.r_3d
            c3d = CorrConfig(r_x=rx, r_y=ry, r_z=rz, normalize=cfg.normalize_corr, post_activation=cfg.activate_corr)
            vols.append(activate(corr3d(cd1, cd2, c3d), c3d, cfg.alpha))
        return vols

    def forward(self, l1, r1, l2, r2) -> SceneFlowOutput:
        images = [as_tensor(x) for x in (l1, r1, l2, r2)]
        shape = images[0].shape
        for im in images[1:]:
            if im.shape != shape:
                raise ValueError(f"all four images must share a shape, got {shape} and {im.shape}")
        n = shape[0]
        pyramid = self.encode(ops.concat_batch(images))
        out = SceneFlowOutput()
        priors = zeta_up = None
        for k in LEVELS:
            feats = pyramid[k - 1]
            l1f, r1f, l2f, r2f = (ops.slice_batch(feats, i * n, (i + 1) * n) for i in range(4))
            parts = [l1f] + self.cost_volumes(k, l1f, r1f, l2f, r2f, priors)
            if priors is not None:
                parts += list(priors) + list(zeta_up)
            preds, zetas = self.estimate(k, ops.concat_channels(parts))
            if priors is not None:
                preds = {t: ops.add(preds[t], p) for (t, _), p in zip(TASKS, priors)}
            out.levels[k] = tuple(preds[t] for t, _ in TASKS)
            out.zetas[k] = tuple(zetas[t] for t, _ in TASKS)
            if k > LEVELS[-1]:
                heads = self.estimators[k]["heads"]
                priors = tuple(heads[t]["up_pred"](preds[t]) for t, _ in TASKS)
                zeta_up = tuple(heads[t]["up_zeta"](zetas[t]) for t, _ in TASKS)
        final = dict(zip((t for t, _ in TASKS), out.levels[LEVELS[-1]]))
        if self.config.refine:
            final = self.refine(zetas, final)
            out.refined = tuple(final[t] for t, _ in TASKS)
        factor = 2 ** LEVELS[-1]
        out.full = tuple(ops.scale(ops.bilinear_upsample(final[t], factor), PRIOR_SCALE) for t, _ in TASKS)
        return out

    __call__ = forward


def count_params(config: ModelConfig) -> int:
    """Parameter count of a configuration without allocating weights."""
    cfg = config
    total = 0

    def conv(ci, co, k=3):
        return ci * co * k * k + co

    enc = cfg.scaled(cfg.encoder_channels)
    cin = 3
    for c in enc:
        total += conv(cin, c) + 2 * conv(c, c)
        cin = c
    backbone, heads = cfg.scaled(cfg.backbone_channels), cfg.scaled(cfg.head_channels)
    for k in LEVELS:
        ch = cfg.volume_channels(k)
        for co in backbone:
            total += conv(ch, co)
            ch = ch + co if cfg.dense else co
        for _, pc in TASKS:
            h = ch
            for co in heads:
                total += conv(h, co)
                h = h + co if cfg.dense else co
            total += conv(h, pc)
            if k > LEVELS[-1]:
                total += conv(pc, pc, 4) + conv(heads[-1], cfg.zeta_up_channels, 4)
    if cfg.refine:
        for _, pc in TASKS:
            ch = heads[-1] + pc
            for co in cfg.scaled(cfg.refine_channels):
                total += conv(ch, co)
                ch = co
            total += conv(ch, pc)
    return total


def receptive_field(dilations: Iterable[int], k: int = 3) -> int:
    return 1 + sum((k - 1) * d for d in dilations)
