"""Endpoint error and KITTI-style outlier percentages."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

ABS_THRESHOLD = 3.0
REL_THRESHOLD = 0.05


def _as_field(x: np.ndarray) -> np.ndarray:
    """Give single-channel maps a leading channel axis."""
    x = np.asarray(x, dtype=np.float64)
    return x[None] if x.ndim == 2 else x


def _check(pred, gt, mask):
    pred, gt = _as_field(pred), _as_field(gt)
    if pred.shape != gt.shape:
        raise ValueError(f"prediction {pred.shape} and ground truth {gt.shape} differ")
    mask = np.ones(gt.shape[1:], bool) if mask is None else np.asarray(mask, bool)
    if mask.shape != gt.shape[1:]:
        raise ValueError(f"mask {mask.shape} does not match field {gt.shape[1:]}")
    return pred, gt, mask


def endpoint_error(pred, gt) -> np.ndarray:
    """Per-pixel Euclidean error over the channel axis."""
    pred, gt = _as_field(pred), _as_field(gt)
    return np.sqrt(((pred - gt) ** 2).sum(axis=0))


def epe(pred, gt, mask=None) -> float:
    """Mean endpoint error over ``mask``; NaN when the mask is empty."""
    pred, gt, mask = _check(pred, gt, mask)
    if not mask.any():
        return math.nan
    return float(endpoint_error(pred, gt)[mask].mean())


def outliers(pred, gt) -> np.ndarray:
    """Pixels whose error exceeds both 3 px and 5% of the ground-truth magnitude."""
    pred, gt = _as_field(pred), _as_field(gt)
    err = endpoint_error(pred, gt)
    mag = np.sqrt((gt**2).sum(axis=0))
    return (err > ABS_THRESHOLD) & (err > REL_THRESHOLD * mag)


def outlier_rate(pred, gt, mask=None) -> float:
    pred, gt, mask = _check(pred, gt, mask)
    if not mask.any():
        return math.nan
    return float(100.0 * outliers(pred, gt)[mask].mean())


def sf_all(d1_out, d2_out, f1_out, mask=None) -> float:
    """Percentage of masked pixels that are outliers in any of the three tasks."""
    d1_out, d2_out, f1_out = (np.asarray(x, bool) for x in (d1_out, d2_out, f1_out))
    if not d1_out.shape == d2_out.shape == f1_out.shape:
        raise ValueError("outlier masks are not aligned")
    mask = np.ones(d1_out.shape, bool) if mask is None else np.asarray(mask, bool)
    if mask.shape != d1_out.shape:
        raise ValueError(f"mask {mask.shape} not aligned with outlier maps {d1_out.shape}")
    if not mask.any():
        return math.nan
    return float(100.0 * (d1_out | d2_out | f1_out)[mask].mean())


@dataclass
class Accumulator:
    """Pixel counts for one mask type; merging is associative."""

    pixels: int = 0
    err_sum: dict = field(default_factory=lambda: {"flow": 0.0, "disp": 0.0, "change": 0.0})
    out: dict = field(default_factory=lambda: {"D1": 0, "D2": 0, "F1": 0, "SF": 0})

    def add(self, pred, gt, mask) -> None:
        flow, disp, change = pred
        gflow, gdisp, gchange = gt
        mask = np.asarray(mask, bool)
        self.pixels += int(mask.sum())
        self.err_sum["flow"] += float(endpoint_error(flow, gflow)[mask].sum())
        self.err_sum["disp"] += float(endpoint_error(disp, gdisp)[mask].sum())
        self.err_sum["change"] += float(endpoint_error(change, gchange)[mask].sum())
        d1, d2, f1 = outliers(disp, gdisp), outliers(change, gchange), outliers(flow, gflow)
        self.out["D1"] += int(d1[mask].sum())
        self.out["D2"] += int(d2[mask].sum())
        self.out["F1"] += int(f1[mask].sum())
        self.out["SF"] += int((d1 | d2 | f1)[mask].sum())

    def merge(self, other: "Accumulator") -> "Accumulator":
        res = Accumulator(self.pixels + other.pixels)
        res.err_sum = {k: self.err_sum[k] + other.err_sum[k] for k in self.err_sum}
        res.out = {k: self.out[k] + other.out[k] for k in self.out}
        return res

    def values(self, suffix: str) -> dict:
        n = self.pixels
        if n == 0:
            nan = math.nan
            return {f"EPE-{t}-{suffix}": nan for t in self.err_sum} | {f"{k}-{suffix}": nan for k in self.out}
        out = {f"EPE-{t}-{suffix}": v / n for t, v in self.err_sum.items()}
        out.update({f"{k}-{suffix}": 100.0 * v / n for k, v in self.out.items()})
        return out


@dataclass
class MetricReport:
    all: Accumulator = field(default_factory=Accumulator)
    noc: Accumulator | None = None
    samples: int = 0

    def add(self, pred: tuple, gt_field, noc_mask=None) -> None:
        """``pred`` is (flow, disp, change) in pixels; ``gt_field`` a SceneFlowField."""
        gt = (gt_field.flow, gt_field.disp, gt_field.change)
        self.all.add(pred, gt, gt_field.valid)
        noc = noc_mask if noc_mask is not None else gt_field.noc
        if noc is not None:
            if self.noc is None:
                self.noc = Accumulator()
            self.noc.add(pred, gt, np.asarray(noc, bool) & gt_field.valid)
        self.samples += 1

    def merge(self, other: "MetricReport") -> "MetricReport":
        noc = None
        if self.noc is not None or other.noc is not None:
            noc = (self.noc or Accumulator()).merge(other.noc or Accumulator())
        return MetricReport(self.all.merge(other.all), noc, self.samples + other.samples)

    def as_dict(self) -> dict:
        out = {"samples": self.samples, "pixels-All": self.all.pixels}
        out.update(self.all.values("All"))
        if self.noc is not None:
            out["pixels-Noc"] = self.noc.pixels
            out.update(self.noc.values("Noc"))
        return out

    @property
    def sf_all(self) -> float:
        return self.as_dict()["SF-All"]

    def to_keyvalue(self) -> str:
        lines = []
        for k, v in self.as_dict().items():
            if isinstance(v, float):
                v = "undefined" if math.isnan(v) else f"{v:.4f}"
            lines.append(f"{k}={v}")
        return "\n".join(lines) + "\n"

    def to_table(self) -> str:
        d = self.as_dict()
        rows = [("All", "All")] + ([("Noc", "Noc")] if self.noc is not None else [])
        head = f"{'mask':<5} {'pixels':>8} {'EPE-F':>7} {'EPE-D1':>7} {'EPE-D2':>7} {'D1%':>7} {'D2%':>7} {'F1%':>7} {'SF%':>7}"
        lines = [head]
        for label, s in rows:
            vals = [d[f"EPE-flow-{s}"], d[f"EPE-disp-{s}"], d[f"EPE-change-{s}"],
                    d[f"D1-{s}"], d[f"D2-{s}"], d[f"F1-{s}"], d[f"SF-{s}"]]
            lines.append(f"{label:<5} {d[f'pixels-{s}']:>8} " + " ".join(f"{v:>7.2f}" for v in vals))
        return "\n".join(lines) + "\n"
