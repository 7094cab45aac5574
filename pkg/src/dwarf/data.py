"""Synthetic layered scenes with exact scene-flow ground truth, proxy labels,
and on-disk datasets described by manifests.

A scene is a static textured background plane plus textured rectangles, each
with its own disparity at t1 and t2 and a planar motion. Layer textures are
smooth random fields attached to the layer, so every view is an exact
resampling of the same surface and the ground truth is known in closed form.
"""

from __future__ import annotations

import logging
import os
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy import ndimage

from . import codecs

logger = logging.getLogger(__name__)

GT, PX = "gt", "px"


@dataclass
class SceneFlowField:
    """Optical flow (2, H, W), disparity (H, W), t2 disparity at L1 pixels (H, W)."""

    flow: np.ndarray
    disp: np.ndarray
    change: np.ndarray
    valid: np.ndarray
    noc: np.ndarray | None = None
    provenance: str = GT
    corrupted: np.ndarray | None = None  # proxy only: pixels inside outlier patches

    @property
    def shape(self) -> tuple:
        return self.disp.shape

    def copy(self) -> "SceneFlowField":
        return SceneFlowField(
            self.flow.copy(), self.disp.copy(), self.change.copy(), self.valid.copy(),
            None if self.noc is None else self.noc.copy(), self.provenance,
            None if self.corrupted is None else self.corrupted.copy(),
        )


@dataclass
class SceneSample:
    images: tuple  # (L1, R1, L2, R2), each (3, H, W) in [0, 1]
    gt: SceneFlowField | None
    provenance: str = GT
    name: str = ""

    @property
    def shape(self) -> tuple:
        return self.images[0].shape[1:]


@dataclass
class ObjectSpec:
    x: float
    y: float
    width: float
    height: float
    disp1: float
    disp2: float
    motion: tuple = (0.0, 0.0)
    texture_seed: int = 0


@dataclass
class SceneSpec:
    height: int = 64
    width: int = 128
    background_seed: int = 0
    background_disparity: float = 2.0
    objects: list = field(default_factory=list)  # back to front


@dataclass
class NoiseSpec:
    sigma_flow: float = 0.5
    sigma_disp: float = 0.5
    sigma_change: float = 0.5
    outlier_rate: float = 0.05
    outlier_magnitude: tuple = (3.0, 10.0)
    patch_size: tuple = (3, 12)
    seed: int = 0


# ---------------------------------------------------------------- rendering

_MARGIN = 48


class _Texture:
    """Smooth 3-channel random field over a padded image domain."""

    def __init__(self, seed: int, height: int, width: int, blur: float = 1.6):
        rng = np.random.default_rng(seed)
        shape = (height + 2 * _MARGIN, width + 2 * _MARGIN)
        base = rng.uniform(0.25, 0.75, size=3)
        chans = []
        for c in range(3):
            noise = ndimage.gaussian_filter(rng.normal(size=shape), blur, mode="wrap")
            noise *= 0.16 / max(noise.std(), 1e-12)
            chans.append(np.clip(base[c] + noise, 0.0, 1.0))
        self.coeffs = [ndimage.spline_filter(ch, order=3, mode="mirror") for ch in chans]

    def sample(self, xs: np.ndarray, ys: np.ndarray) -> np.ndarray:
        coords = np.stack([ys + _MARGIN, xs + _MARGIN])
        return np.stack([
            ndimage.map_coordinates(c, coords, order=3, mode="mirror", prefilter=False) for c in self.coeffs
        ])


def _frame_offsets(obj: ObjectSpec) -> dict:
    dx, dy = obj.motion
    return {"L1": (0.0, 0.0), "R1": (-obj.disp1, 0.0), "L2": (dx, dy), "R2": (dx - obj.disp2, dy)}


def _render_frames(spec: SceneSpec):
    h, w = spec.height, spec.width
    ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
    bg = _Texture(spec.background_seed, h, w)
    d_bg = spec.background_disparity
    frames, labels = {}, {}
    for name, off in {"L1": 0.0, "R1": -d_bg, "L2": 0.0, "R2": -d_bg}.items():
        frames[name] = bg.sample(xs - off, ys)
        labels[name] = np.zeros((h, w), dtype=np.int32)
    for idx, obj in enumerate(spec.objects, 1):
        tex = _Texture(obj.texture_seed, h, w)
        for name, (ox, oy) in _frame_offsets(obj).items():
            u, v = xs - ox, ys - oy
            inside = (u >= obj.x) & (u < obj.x + obj.width) & (v >= obj.y) & (v < obj.y + obj.height)
            if not inside.any():
                continue
            frames[name][:, inside] = tex.sample(u[inside], v[inside])
            labels[name][inside] = idx
    return frames, labels


def _corresponds(labels: np.ndarray, layer: np.ndarray, x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """True where every bilinear corner of (x, y) lies in-bounds on ``layer``."""
    h, w = labels.shape
    x0, y0 = np.floor(x).astype(int), np.floor(y).astype(int)
    ok = np.ones(x.shape, bool)
    for dy in (0, 1):
        for dx in (0, 1):
            xi, yi = x0 + dx, y0 + dy
            inb = (xi >= 0) & (xi < w) & (yi >= 0) & (yi < h)
            lab = labels[np.clip(yi, 0, h - 1), np.clip(xi, 0, w - 1)]
            ok &= inb & (lab == layer)
    return ok


def _fold(a: int, b: int) -> int:
    return int(np.random.SeedSequence([a, b]).generate_state(1)[0])


def generate_scene(spec: SceneSpec, seed: int | None = None, name: str = "") -> SceneSample:
    """Render (L1, R1, L2, R2) and the exact ground truth of ``spec``.

    ``seed`` (if given) is folded into every texture seed. Objects that leave
    the frame at t2 keep their ground truth; such pixels are simply not
    marked as non-occluded.
    """
    if seed is not None:
        spec = replace(
            spec,
            background_seed=_fold(spec.background_seed, seed),
            objects=[replace(o, texture_seed=_fold(o.texture_seed, seed)) for o in spec.objects],
        )
    frames, labels = _render_frames(spec)
    h, w = spec.height, spec.width
    layer = labels["L1"]
    flow = np.zeros((2, h, w))
    disp = np.full((h, w), spec.background_disparity)
    change = np.full((h, w), spec.background_disparity)
    for idx, obj in enumerate(spec.objects, 1):
        m = layer == idx
        flow[0][m], flow[1][m] = obj.motion
        disp[m] = obj.disp1
        change[m] = obj.disp2
    ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
    noc = _corresponds(labels["R1"], layer, xs - disp, ys)
    noc &= _corresponds(labels["L2"], layer, xs + flow[0], ys + flow[1])
    noc &= _corresponds(labels["R2"], layer, xs + flow[0] - change, ys + flow[1])
    gt = SceneFlowField(flow, disp, change, np.ones((h, w), bool), noc, GT)
    images = tuple(frames[k].astype(np.float32) for k in ("L1", "R1", "L2", "R2"))
    return SceneSample(images, gt, GT, name)


def random_spec(seed: int, height: int = 64, width: int = 128, n_objects: int | None = None) -> SceneSpec:
    """Random scene whose motions stay inside the coarse-to-fine search range."""
    rng = np.random.default_rng(seed)
    s = width / 128.0
    if n_objects is None:
        n_objects = int(rng.integers(2, 5))
    objects = []
    for _ in range(n_objects):
        ow = rng.uniform(14, 44) * s
        oh = rng.uniform(12, 34) * height / 64.0
        d1 = rng.uniform(4, 14) * s
        d2 = max(1.0, d1 + rng.uniform(-3, 3) * s)
        objects.append(ObjectSpec(
            x=rng.uniform(-0.2 * ow, width - 0.8 * ow),
            y=rng.uniform(-0.2 * oh, height - 0.8 * oh),
            width=ow, height=oh, disp1=d1, disp2=d2,
            motion=(rng.uniform(-6, 6) * s, rng.uniform(-4, 4) * s),
            texture_seed=int(rng.integers(2**31)),
        ))
    objects.sort(key=lambda o: o.disp1)  # nearer objects are drawn last
    return SceneSpec(height, width, int(rng.integers(2**31)), float(rng.uniform(1.0, 3.0) * s), objects)


# ---------------------------------------------------------------- proxy labels


def make_proxy(gt: SceneFlowField, noise: NoiseSpec) -> SceneFlowField:
    """Noisy stand-in for a teacher's labels: Gaussian noise everywhere plus
    rectangular patches carrying a constant per-patch error."""
    if noise.sigma_flow < 0 or noise.sigma_disp < 0 or noise.sigma_change < 0:
        raise ValueError("noise sigmas must be non-negative")
    if not 0.0 <= noise.outlier_rate <= 1.0:
        raise ValueError("outlier rate must lie in [0, 1]")
    rng = np.random.default_rng(noise.seed)
    h, w = gt.shape
    px = gt.copy()
    px.provenance = PX
    px.flow = px.flow + rng.normal(0.0, noise.sigma_flow, size=px.flow.shape) if noise.sigma_flow else px.flow
    px.disp = px.disp + rng.normal(0.0, noise.sigma_disp, size=px.disp.shape) if noise.sigma_disp else px.disp
    px.change = px.change + rng.normal(0.0, noise.sigma_change, size=px.change.shape) if noise.sigma_change else px.change
    corrupted = np.zeros((h, w), bool)
    lo, hi = noise.outlier_magnitude
    target = noise.outlier_rate * h * w
    while corrupted.sum() < target:
        ph = int(rng.integers(noise.patch_size[0], noise.patch_size[1] + 1))
        pw = int(rng.integers(noise.patch_size[0], noise.patch_size[1] + 1))
        y0, x0 = int(rng.integers(0, max(1, h - ph + 1))), int(rng.integers(0, max(1, w - pw + 1)))
        sl = (slice(y0, y0 + ph), slice(x0, x0 + pw))
        signs = rng.choice([-1.0, 1.0], size=4)
        mags = rng.uniform(lo, hi, size=4) * signs
        px.flow[0][sl] = gt.flow[0][sl] + mags[0]
        px.flow[1][sl] = gt.flow[1][sl] + mags[1]
        px.disp[sl] = gt.disp[sl] + mags[2]
        px.change[sl] = gt.change[sl] + mags[3]
        corrupted[sl] = True
    # a teacher never predicts negative disparity
    np.maximum(px.disp, 0.0, out=px.disp)
    np.maximum(px.change, 0.0, out=px.change)
    px.corrupted = corrupted
    return px


# ---------------------------------------------------------------- datasets on disk


@dataclass
class ManifestEntry:
    images: tuple
    gt: tuple | None  # (D1, F1, D2) paths
    provenance: str
    line: int


@dataclass
class Dataset:
    entries: list
    fmt: str = "kitti"

    def __len__(self) -> int:
        return len(self.entries)

    def pool(self, provenance: str) -> list:
        return [e for e in self.entries if e.provenance == provenance]

    def load(self, i: int) -> SceneSample:
        return load_sample(self.entries[i], self.fmt)


class ManifestError(ValueError):
    pass


def load_manifest(path: str | Path, require_gt: bool = True, check_files: bool = True) -> Dataset:
    """Parse a tab-separated manifest: ``L1 R1 L2 R2 [D1 F1 D2] gt|px``.

    Relative paths resolve against the manifest's directory.
    """
    path = Path(path)
    if not path.exists():
        raise ManifestError(f"manifest not found: {path}")
    base = path.parent
    entries = []
    fmts = set()
    for lineno, raw in enumerate(path.read_text().splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        cols = line.split("\t")
        if len(cols) not in (5, 8):
            raise ManifestError(f"{path}:{lineno}: expected 5 or 8 tab-separated fields, got {len(cols)}")
        prov = cols[-1].strip().lower()
        if prov not in (GT, PX):
            raise ManifestError(f"{path}:{lineno}: provenance must be 'gt' or 'px', got {cols[-1]!r}")
        paths = [base / c.strip() for c in cols[:-1]]
        if len(cols) == 5 and require_gt:
            raise ManifestError(f"{path}:{lineno}: ground-truth paths missing (only allowed for inference sets)")
        if check_files:
            for p in paths:
                if not p.exists():
                    raise ManifestError(f"{path}:{lineno}: missing file {p}")
        gt = tuple(paths[4:7]) if len(cols) == 8 else None
        if gt:
            fmts.add("pfm" if gt[0].suffix.lower() == ".pfm" else "kitti")
        entries.append(ManifestEntry(tuple(paths[:4]), gt, prov, lineno))
    if len(fmts) > 1:
        raise ManifestError(f"{path}: mixed ground-truth formats")
    return Dataset(entries, fmts.pop() if fmts else "kitti")


def write_gt(gt: SceneFlowField, stem: Path, fmt: str) -> tuple:
    if fmt == "kitti":
        paths = (stem.with_name(stem.name + "_disp1.png"), stem.with_name(stem.name + "_flow.png"),
                 stem.with_name(stem.name + "_disp2.png"))
        codecs.write_disp_png(paths[0], gt.disp, gt.valid & (gt.disp >= 1 / 512))
        codecs.write_flow_png(paths[1], gt.flow, gt.valid)
        codecs.write_disp_png(paths[2], gt.change, gt.valid & (gt.change >= 1 / 512))
    elif fmt == "pfm":
        paths = (stem.with_name(stem.name + "_disp1.pfm"), stem.with_name(stem.name + "_flow.pfm"),
                 stem.with_name(stem.name + "_disp2.pfm"))
        inval = ~gt.valid
        codecs.write_pfm(paths[0], np.where(inval, np.nan, gt.disp))
        f3 = np.concatenate([gt.flow, np.zeros((1,) + gt.shape)]).transpose(1, 2, 0)
        f3[inval] = np.nan
        codecs.write_pfm(paths[1], f3)
        codecs.write_pfm(paths[2], np.where(inval, np.nan, gt.change))
    else:
        raise ValueError(f"unknown ground-truth format {fmt!r}")
    return paths


def read_gt(paths: Sequence[Path], fmt: str, provenance: str) -> SceneFlowField:
    if fmt == "kitti":
        disp, v1 = codecs.read_disp_png(paths[0])
        flow, vf = codecs.read_flow_png(paths[1])
        change, v2 = codecs.read_disp_png(paths[2])
        valid = v1 & vf & v2
    else:
        disp = codecs.read_pfm(paths[0]).astype(np.float64)
        flow = codecs.read_pfm(paths[1])[..., :2].transpose(2, 0, 1).astype(np.float64)
        change = codecs.read_pfm(paths[2]).astype(np.float64)
        valid = np.isfinite(disp) & np.isfinite(flow).all(axis=0) & np.isfinite(change)
        disp, flow, change = np.nan_to_num(disp), np.nan_to_num(flow), np.nan_to_num(change)
    return SceneFlowField(flow, disp, change, valid, None, provenance)


def load_sample(entry: ManifestEntry, fmt: str = "kitti") -> SceneSample:
    images = tuple(codecs.read_image(p) for p in entry.images)
    gt = read_gt(entry.gt, fmt, entry.provenance) if entry.gt else None
    return SceneSample(images, gt, entry.provenance, entry.images[0].stem)


def write_sample(sample: SceneSample, directory: str | Path, name: str, fmt: str = "kitti") -> str:
    """Write images + ground truth; returns the manifest line (relative paths)."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    cols = []
    for tag, img in zip(("L1", "R1", "L2", "R2"), sample.images):
        p = directory / f"{name}_{tag}.png"
        codecs.write_image(p, img)
        cols.append(p.name)
    if sample.gt is not None:
        cols += [p.name for p in write_gt(sample.gt, directory / name, fmt)]
    cols.append(sample.provenance)
    return "\t".join(cols)


def write_manifest(path: str | Path, lines: Sequence[str], header: str = "") -> None:
    body = "".join(f"# {h}\n" for h in header.splitlines() if h) + "".join(f"{ln}\n" for ln in lines)
    Path(path).write_text(body)


def combine_manifests(sources: Sequence[str | Path], path: str | Path) -> int:
    """Concatenate manifests into ``path``, rewriting paths relative to it."""
    path = Path(path)
    out = []
    for src in sources:
        src = Path(src)
        for raw in src.read_text().splitlines():
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            cols = line.split("\t")
            moved = [os.path.relpath(src.parent / c.strip(), path.parent) for c in cols[:-1]]
            out.append("\t".join(moved + [cols[-1].strip()]))
    write_manifest(path, out)
    return len(out)
