"""Central finite-difference verification of analytic gradients."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from . import ops
from .autograd import Tensor, get_dtype


def finite_difference_check(
    fn: Callable[..., Tensor],
    point: Sequence[np.ndarray],
    h: float = 1e-6,
    seed: int = 0,
    wrt: Sequence[int] | None = None,
) -> float:
    """Worst relative error between analytic and central-difference gradients.

    ``fn`` maps tensors to a tensor of any shape; it is reduced to a scalar
    through a fixed random projection so every output coordinate matters.
    The relative error of a coordinate is ``|a - n| / max(|a|, |n|, 1e-8)``.
    """
    if get_dtype() is not np.float64:
        raise RuntimeError("finite_difference_check requires 64-bit precision mode")
    point = [np.array(p, dtype=np.float64) for p in point]
    wrt = range(len(point)) if wrt is None else wrt

    probe = fn(*[Tensor(p) for p in point])
    proj = np.random.default_rng(seed).uniform(0.5, 1.5, size=probe.shape)
    proj *= np.where(np.random.default_rng(seed + 1).random(probe.shape) < 0.5, -1.0, 1.0)

    def scalar(arrays) -> float:
        return float(np.sum(fn(*[Tensor(a) for a in arrays]).data * proj))

    inputs = [Tensor(p, requires_grad=i in wrt) for i, p in enumerate(point)]
    loss = ops.sum(ops.mul(fn(*inputs), Tensor(proj)))
    loss.backward()

    worst = 0.0
    for i in wrt:
        analytic = inputs[i].grad
        if analytic is None:
            analytic = np.zeros_like(point[i])
        flat = point[i].reshape(-1)
        for idx in range(flat.size):
            orig = flat[idx]
            flat[idx] = orig + h
            fp = scalar(point)
            flat[idx] = orig - h
            fm = scalar(point)
            flat[idx] = orig
            num = (fp - fm) / (2 * h)
            a = analytic.reshape(-1)[idx]
            err = abs(a - num) / max(abs(a), abs(num), 1e-8)
            worst = max(worst, err)
    return worst


def _kink_free(rng, shape, scale=2.0):
    # keep bilinear sample positions away from integer kinks
    v = rng.uniform(-scale, scale, size=shape)
    return np.floor(v) + rng.uniform(0.2, 0.8, size=shape)


def _loss_case(rng):
    from .network import SceneFlowOutput
    from .training import LossWeights, Target, multiscale_loss

    shape = (1, 1, 3, 4)
    targets = {2: Target(rng.normal(size=(1, 2, 3, 4)), rng.normal(size=shape), rng.normal(size=shape),
                         (rng.random(shape) > 0.2).astype(float))}
    # predictions sit at least 0.1 away from the targets, off the |x| kink
    offs = [np.sign(rng.normal(size=t.shape)) * rng.uniform(0.1, 1.0, size=t.shape)
            for t in (targets[2].flow, targets[2].disp, targets[2].change)]
    point = [targets[2].flow + offs[0], targets[2].disp + offs[1], targets[2].change + offs[2], rng.normal(size=(5,))]
    weights = LossWeights(alphas={2: 0.005}, gamma=0.0004)

    def fn(flow, disp, change, theta):
        out = SceneFlowOutput(levels={2: (flow, disp, change)})
        return multiscale_loss(out, targets, weights, [theta]).total

    return fn, point


def run_suite(seed: int = 0) -> dict[str, float]:
    """Worst relative error per differentiable op on small random inputs."""
    from .correlation import CorrConfig, corr1d, corr2d, corr3d
    from .warp import bilinear_sample, _grid, warp_by_disparity, warp_by_flow, warp_by_flow_and_change

    rng = np.random.default_rng(seed)
    r = lambda *s: rng.normal(size=s)  # noqa: E731
    c1, c2, c3 = CorrConfig(r_x=2, r_y=0), CorrConfig(r_x=2, r_y=1), CorrConfig(r_x=1, r_y=1, r_z=1)
    change = np.floor(rng.uniform(-2, 2, size=(1, 1, 4, 5))) + 0.05
    flow2 = np.floor(rng.uniform(-2, 2, size=(1, 2, 4, 5))) + rng.uniform(0.3, 0.7, size=(1, 2, 4, 5))
    # leaky ReLU inputs kept away from zero
    lrelu_x = np.sign(r(1, 2, 3, 3)) * rng.uniform(0.1, 2.0, size=(1, 2, 3, 3))
    cases = {
        "conv2d": (lambda x, w, b: ops.conv2d(x, w, b, stride=2, dilation=1, padding=1), [r(1, 2, 5, 6), r(3, 2, 3, 3), r(3)]),
        "conv2d_dilated": (lambda x, w, b: ops.conv2d(x, w, b, dilation=2, padding=2), [r(1, 2, 5, 5), r(2, 2, 3, 3), r(2)]),
        "conv_transpose": (lambda x, w, b: ops.conv2d_transpose(x, w, b), [r(1, 2, 3, 3), r(2, 3, 4, 4), r(3)]),
        "leaky_relu": (lambda x: ops.leaky_relu(x, 0.1), [lrelu_x]),
        "bilinear_upsample": (lambda x: ops.bilinear_upsample(x, 2), [r(1, 2, 3, 4)]),
        "bilinear_sample": (bilinear_sample, [r(1, 2, 4, 5), _grid(4, 5) + _kink_free(rng, (1, 2, 4, 5))]),
        "corr1d": (lambda a, b: corr1d(a, b, c1).scores, [r(1, 3, 4, 5), r(1, 3, 4, 5)]),
        "corr2d": (lambda a, b: corr2d(a, b, c2).scores, [r(1, 3, 4, 5), r(1, 3, 4, 5)]),
        "corr3d": (lambda a, b: corr3d(a, b, c3).scores, [r(1, 5, 4, 4), r(1, 5, 4, 4)]),
        "warp_flow": (warp_by_flow, [r(1, 2, 4, 5), _kink_free(rng, (1, 2, 4, 5))]),
        "warp_disparity": (warp_by_disparity, [r(1, 2, 4, 5), _kink_free(rng, (1, 1, 4, 5))]),
        "warp_flow_change": (warp_by_flow_and_change, [r(1, 2, 4, 5), flow2, change]),
        "loss": _loss_case(rng),
    }
    return {name: finite_difference_check(fn, point, seed=seed) for name, (fn, point) in cases.items()}
