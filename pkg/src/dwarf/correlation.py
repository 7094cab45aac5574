"""1D, 2D and 3D correlation layers.

All three layers share one kernel: a reference volume ``a`` is compared with
shifted copies of ``b`` along (channel, y, x); the summed product over the
channel axis is divided by its length. 1D/2D correlations shift only
spatially. The 3D layer correlates two 1D cost volumes, treating the
displacement axis of the curves as the summed axis and additionally shifting
it, so its search space is (y, x, curve offset).

Out-of-range samples contribute zero.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .autograd import Function, Tensor, as_tensor
from . import ops


@dataclass(frozen=True)
class CorrConfig:
    r_x: int = 4
    r_y: int = 4
    r_z: int = 0
    normalize: bool = True
    post_activation: bool = True


DWARF_1D = CorrConfig(r_x=4, r_y=0)
DWARF_2D = CorrConfig(r_x=4, r_y=4)
DWARF_3D = CorrConfig(r_x=4, r_y=4, r_z=0)


@dataclass
class CostVolume:
    """Per-pixel correlation scores, one channel per displacement.

    Displacements are ordered lexicographically over ``radii`` (y, then x,
    then curve offset for 3D volumes), each running from -r to +r.
    """

    scores: Tensor
    radii: tuple

    @property
    def channels(self) -> int:
        return self.scores.shape[1]

    @property
    def curve_length(self) -> int:
        return self.channels


def displacement_count(radii: Sequence[int]) -> int:
    n = 1
    for r in radii:
        n *= 2 * r + 1
    return n


def _offsets(rz: int, ry: int, rx: int):
    return [
        (h, i, j)
        for i in range(-ry, ry + 1)
        for j in range(-rx, rx + 1)
        for h in range(-rz, rz + 1)
    ]


class ShiftedCorrelation(Function):
    """out[:, n](y, x) = sum_c a[c, y, x] * b[c + h, y + i, x + j] / norm."""

    def forward(self, a, b, rz=0, ry=0, rx=0, normalize=True):
        n, c, hgt, wid = a.shape
        self.a, self.cfg = a, (rz, ry, rx)
        self.norm = a.dtype.type(c if normalize else 1)
        bp = np.pad(b, ((0, 0), (rz, rz), (ry, ry), (rx, rx)))
        self.bp = bp
        offsets = _offsets(rz, ry, rx)
        out = np.empty((n, len(offsets), hgt, wid), dtype=a.dtype)
        for k, (h, i, j) in enumerate(offsets):
            window = bp[:, rz + h : rz + h + c, ry + i : ry + i + hgt, rx + j : rx + j + wid]
            out[:, k] = np.einsum("nchw,nchw->nhw", a, window) / self.norm
        return out

    def backward(self, grad):
        a, bp = self.a, self.bp
        rz, ry, rx = self.cfg
        _, c, hgt, wid = a.shape
        ga = np.zeros_like(a)
        gbp = np.zeros_like(bp)
        g = grad / self.norm
        for k, (h, i, j) in enumerate(_offsets(rz, ry, rx)):
            sl = (slice(None), slice(rz + h, rz + h + c), slice(ry + i, ry + i + hgt), slice(rx + j, rx + j + wid))
            gk = g[:, k : k + 1]
            ga += gk * bp[sl]
            gbp[sl] += gk * a
        gb = gbp[:, rz : rz + c, ry : ry + hgt, rx : rx + wid]
        return ga, gb


def _check_pair(a: Tensor, b: Tensor, what: str) -> None:
    if a.ndim != 4 or a.shape != b.shape:
        raise ValueError(f"{what}: inputs must share a 4D shape, got {a.shape} and {b.shape}")


def corr1d(a: Tensor, b: Tensor, cfg: CorrConfig = DWARF_1D) -> CostVolume:
    """Horizontal correlation; channel ``j + r_x`` holds <a(y, x), b(y, x + j)>."""
    a, b = as_tensor(a), as_tensor(b)
    _check_pair(a, b, "corr1d")
    scores = ShiftedCorrelation.apply(a, b, rz=0, ry=0, rx=cfg.r_x, normalize=cfg.normalize)
    return CostVolume(scores, (cfg.r_x,))


def corr2d(a: Tensor, b: Tensor, cfg: CorrConfig = DWARF_2D) -> CostVolume:
    a, b = as_tensor(a), as_tensor(b)
    _check_pair(a, b, "corr2d")
    scores = ShiftedCorrelation.apply(a, b, rz=0, ry=cfg.r_y, rx=cfg.r_x, normalize=cfg.normalize)
    return CostVolume(scores, (cfg.r_y, cfg.r_x))


def corr3d(c1: CostVolume | Tensor, c2: CostVolume | Tensor, cfg: CorrConfig = DWARF_3D) -> CostVolume:
    """Correlation between two 1D cost volumes over (y, x, curve offset).

    Channel ``((i + r_y) * (2 r_x + 1) + j + r_x) * (2 r_z + 1) + h + r_z``
    holds ``sum_d c1(y, x, d) * c2(y + i, x + j, d + h) / D``.
    """
    s1 = c1.scores if isinstance(c1, CostVolume) else as_tensor(c1)
    s2 = c2.scores if isinstance(c2, CostVolume) else as_tensor(c2)
    if s1.ndim != 4 or s2.ndim != 4 or s1.shape[1] != s2.shape[1]:
        raise ValueError(
            f"corr3d: cost curves must have equal length, got {s1.shape} and {s2.shape}"
        )
    _check_pair(s1, s2, "corr3d")
    scores = ShiftedCorrelation.apply(s1, s2, rz=cfg.r_z, ry=cfg.r_y, rx=cfg.r_x, normalize=cfg.normalize)
    return CostVolume(scores, (cfg.r_y, cfg.r_x, cfg.r_z))


def activate(volume: CostVolume, cfg: CorrConfig, alpha: float = 0.1) -> Tensor:
    """Scores as stacked into the estimator input."""
    if cfg.post_activation:
        return ops.leaky_relu(volume.scores, alpha)
    return volume.scores


def corr_reference(mode: str, inputs: Sequence[np.ndarray], cfg: CorrConfig) -> np.ndarray:
    """Plain nested-loop evaluation, used as the ground truth in tests."""
    a = np.asarray(inputs[0], dtype=np.float64)
    b = np.asarray(inputs[1], dtype=np.float64)
    n, c, hgt, wid = a.shape
    if mode == "1d":
        rz, ry, rx = 0, 0, cfg.r_x
    elif mode == "2d":
        rz, ry, rx = 0, cfg.r_y, cfg.r_x
    elif mode == "3d":
        rz, ry, rx = cfg.r_z, cfg.r_y, cfg.r_x
    else:
        raise ValueError(f"unknown correlation mode {mode!r}")
    norm = c if cfg.normalize else 1
    out = np.zeros((n, displacement_count((rz, ry, rx)), hgt, wid))
    for bi in range(n):
        for y in range(hgt):
            for x in range(wid):
                k = 0
                for i in range(-ry, ry + 1):
                    for j in range(-rx, rx + 1):
                        for h in range(-rz, rz + 1):
                            yy, xx = y + i, x + j
                            total = 0.0
                            if 0 <= yy < hgt and 0 <= xx < wid:
                                for d in range(c):
                                    if 0 <= d + h < c:
                                        total += a[bi, d, y, x] * b[bi, d + h, yy, xx]
                            out[bi, k, y, x] = total / norm
                            k += 1
    return out


class Shift(int):
    """An integer curve shift that also records whether the search was degenerate."""

    degenerate: bool = False

    def __new__(cls, value: int, degenerate: bool = False):
        obj = super().__new__(cls, value)
        obj.degenerate = degenerate
        return obj


def curve_shift_scores(curve1, curve2, r: int) -> np.ndarray:
    """Normalized correlation of ``curve2`` moved by ``h`` against ``curve1`` for h in [-r, r].

    Moving by ``h`` means the value at index ``d`` lands on ``d + h``.
    """
    c1 = np.asarray(curve1, dtype=np.float64)
    c2 = np.asarray(curve2, dtype=np.float64)
    if c1.shape != c2.shape or c1.ndim != 1:
        raise ValueError(f"curves must be equal-length 1D arrays, got {c1.shape} and {c2.shape}")
    n = c1.size
    if not 0 <= r < n:
        raise ValueError(f"shift radius {r} must be smaller than the curve length {n}")
    scores = np.zeros(2 * r + 1)
    for k, h in enumerate(range(-r, r + 1)):
        lo, hi = max(0, h), min(n, n + h)
        scores[k] = np.dot(c1[lo:hi], c2[lo - h : hi - h]) / n
    return scores


def best_curve_shift(curve1, curve2, r: int) -> Shift:
    """Offset ``h`` in [-r, r] whose moved ``curve2`` best matches ``curve1``.

    A ``curve2`` that equals ``curve1`` displaced by ``+s`` is realigned by
    ``h = -s``. Ties go to the smaller ``|h|`` (then to the negative side).
    """
    scores = curve_shift_scores(curve1, curve2, r)
    if not np.any(np.asarray(curve1)) or not np.any(np.asarray(curve2)):
        return Shift(0, degenerate=True)
    best_h, best = 0, scores[r]
    for h in sorted(range(-r, r + 1), key=lambda v: (abs(v), v)):
        if scores[h + r] > best:
            best_h, best = h, scores[h + r]
    return Shift(best_h)


def feature_count(flow_range: int, disp_range: int, stride: int, r_z: int | None = None) -> int:
    """Stacked correlation channels of a single-scale scene-flow design.

    A flow search of ``flow_range`` at ``stride`` yields ``(flow_range / stride)**2``
    scores, each 1D disparity search ``2 * disp_range + 1``; an added 3D layer
    contributes the flow window times ``2 * r_z + 1`` curve offsets.
    """
    if flow_range <= 0 or disp_range <= 0 or stride <= 0:
        raise ValueError("ranges and stride must be positive")
    flow = (flow_range // stride) ** 2
    total = flow + 2 * (2 * disp_range + 1)
    if r_z is not None:
        total += flow * (2 * r_z + 1)
    return total
