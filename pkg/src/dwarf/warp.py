"""Backward warping of feature maps by flow / disparity priors.

Conventions: flow is (u, v) in pixels with ``L2(p + F(p)) = L1(p)``; disparity
is non-negative with ``R(x - D(x)) = L(x)``; the disparity change map holds
the t2 disparity at L1 pixels, so R2 is reached at ``p + (u - D2, v)``.
"""

from __future__ import annotations

import numpy as np

from . import ops
from .autograd import Function, Tensor, as_tensor

PRIOR_SCALE = 20.0


class BilinearSample(Function):
    """Bilinear read of ``src`` at per-pixel (x, y) source coordinates.

    Each of the four corners outside the image contributes zero.
    """

    def forward(self, src, coords):
        n, c, h, w = src.shape
        ho, wo = coords.shape[2:]
        x, y = coords[:, 0], coords[:, 1]
        x0f, y0f = np.floor(x), np.floor(y)
        fx, fy = x - x0f, y - y0f
        x0, y0 = x0f.astype(np.int64), y0f.astype(np.int64)
        corners = []
        for dy, wy in ((0, 1 - fy), (1, fy)):
            for dx, wx in ((0, 1 - fx), (1, fx)):
                xi, yi = x0 + dx, y0 + dy
                valid = (xi >= 0) & (xi < w) & (yi >= 0) & (yi < h)
                idx = np.where(valid, yi * w + xi, 0).reshape(n, -1)
                corners.append((dx, dy, wx, wy, valid, idx))
        flat = src.reshape(n, c, h * w)
        out = np.zeros((n, c, ho * wo), dtype=src.dtype)
        values = []
        for dx, dy, wx, wy, valid, idx in corners:
            v = np.stack([flat[b][:, idx[b]] for b in range(n)])
            v *= valid.reshape(n, 1, -1)
            values.append(v)
            out += (wx * wy).reshape(n, 1, -1) * v
        self.shape = src.shape
        self.corners, self.values = corners, values
        return out.reshape(n, c, ho, wo)

    def backward(self, grad):
        n, c, h, w = self.shape
        g = grad.reshape(n, c, -1)
        p = g.shape[2]
        base = (np.arange(n)[:, None, None] * c + np.arange(c)[None, :, None]) * (h * w)
        idx_all, wts_all = [], []
        gx = np.zeros((n, p), dtype=grad.dtype)
        gy = np.zeros((n, p), dtype=grad.dtype)
        for (dx, dy, wx, wy, valid, idx), v in zip(self.corners, self.values):
            wgt = (wx * wy * valid).reshape(n, 1, -1)
            idx_all.append((base + idx[:, None, :]).ravel())
            wts_all.append((g * wgt).ravel())
            gv = (g * v).sum(axis=1)
            sx = 1.0 if dx else -1.0
            sy = 1.0 if dy else -1.0
            gx += sx * wy.reshape(n, -1) * gv
            gy += sy * wx.reshape(n, -1) * gv
        gsrc = np.bincount(
            np.concatenate(idx_all), weights=np.concatenate(wts_all), minlength=n * c * h * w
        ).astype(grad.dtype)
        gcoords = np.stack([gx, gy], axis=1).reshape(n, 2, *grad.shape[2:])
        return gsrc.reshape(self.shape), gcoords


def _grid(h: int, w: int) -> np.ndarray:
    ys, xs = np.mgrid[0:h, 0:w]
    return np.stack([xs, ys])[None].astype(np.float64)


def bilinear_sample(src: Tensor, coords: Tensor) -> Tensor:
    src, coords = as_tensor(src), as_tensor(coords)
    if coords.ndim != 4 or coords.shape[1] != 2 or coords.shape[0] != src.shape[0]:
        raise ValueError(f"coords must be (batch, 2, H, W), got {coords.shape}")
    return BilinearSample.apply(src, coords)


def warp_by_displacement(src: Tensor, disp: Tensor) -> Tensor:
    """``out(p) = src(p + disp(p))`` for a 2-channel (dx, dy) field."""
    src, disp = as_tensor(src), as_tensor(disp)
    grid = Tensor(_grid(*disp.shape[2:]))
    return bilinear_sample(src, ops.add(disp, grid))


def warp_by_flow(src: Tensor, flow: Tensor) -> Tensor:
    flow = as_tensor(flow)
    if flow.ndim != 4 or flow.shape[1] != 2:
        raise ValueError(f"flow must have 2 channels, got shape {flow.shape}")
    return warp_by_displacement(src, flow)


def warp_by_disparity(src: Tensor, disp: Tensor) -> Tensor:
    """``out(x) = src(x - disp(x))``; negative disparities are used as given."""
    disp = as_tensor(disp)
    if disp.ndim != 4 or disp.shape[1] != 1:
        raise ValueError(f"disparity must have 1 channel, got shape {disp.shape}")
    zeros = Tensor(np.zeros(disp.shape))
    return warp_by_displacement(src, ops.concat_channels([ops.scale(disp, -1.0), zeros]))


def warp_by_flow_and_change(src: Tensor, flow: Tensor, change: Tensor) -> Tensor:
    """Warp toward the t2 right view: ``out(p) = src(p + (u - D2, v))``."""
    flow, change = as_tensor(flow), as_tensor(change)
    if flow.ndim != 4 or flow.shape[1] != 2:
        raise ValueError(f"flow must have 2 channels, got shape {flow.shape}")
    if change.ndim != 4 or change.shape[1] != 1:
        raise ValueError(f"disparity change must have 1 channel, got shape {change.shape}")
    u = ops.slice_channels(flow, 0, 1)
    v = ops.slice_channels(flow, 1, 2)
    return warp_by_displacement(src, ops.concat_channels([ops.sub(u, change), v]))


def prior_to_pixels(estimate: Tensor, level: int) -> Tensor:
    """Convert a prediction (ground truth / 20 units) to level-``level`` pixels."""
    return ops.scale(estimate, PRIOR_SCALE / 2**level)


def scale_prior(estimate: Tensor, level: int) -> Tensor:
    """Upsample a level ``level + 1`` estimate 2x and express it in level-``level`` pixels."""
    return prior_to_pixels(ops.bilinear_upsample(as_tensor(estimate), 2), level)
