import math

import numpy as np
import pytest

from dwarf.data import SceneFlowField
from dwarf.metrics import MetricReport, epe, outlier_rate, outliers, sf_all


def test_epe_examples():
    assert epe(np.zeros((2, 3, 3)), np.zeros((2, 3, 3))) == 0
    assert epe(np.array([[[3.0]], [[4.0]]]), np.zeros((2, 1, 1))) == 5.0
    assert epe(np.array([[8.0]]), np.array([[10.0]])) == 2.0


def test_epe_empty_mask_undefined():
    assert math.isnan(epe(np.zeros((2, 2)), np.zeros((2, 2)), np.zeros((2, 2), bool)))
    assert math.isnan(outlier_rate(np.zeros((2, 2)), np.zeros((2, 2)), np.zeros((2, 2), bool)))


def test_outlier_definition():
    assert outlier_rate(np.array([[104.0]]), np.array([[100.0]])) == 0.0
    assert outlier_rate(np.array([[14.0]]), np.array([[10.0]])) == 100.0
    assert outlier_rate(np.array([[104.0, 14.0]]), np.array([[100.0, 10.0]])) == 50.0
    assert outlier_rate(np.ones((4, 4)), np.ones((4, 4))) == 0.0
    # exactly 3 px is not larger than 3
    assert outlier_rate(np.array([[3.0]]), np.array([[0.0]])) == 0.0


def test_flow_outliers_use_endpoint_error():
    gt = np.zeros((2, 1, 1))
    assert outliers(np.array([[[2.5]], [[2.5]]]), gt).all()  # |e| = 3.54
    assert not outliers(np.array([[[2.0]], [[2.0]]]), gt).any()  # |e| = 2.83


def test_sf_all_union():
    z = np.zeros((10, 10), bool)
    d1, d2, f1 = z.copy(), z.copy(), z.copy()
    d1[0, 0] = d2[1, 1] = f1[2, 2] = True
    assert sf_all(d1, d2, f1) == pytest.approx(3.0)
    assert sf_all(d1, d1, d1) == pytest.approx(1.0)
    assert sf_all(z, z, z) == 0.0
    with pytest.raises(ValueError):
        sf_all(d1, d2, np.zeros((3, 3), bool))
    with pytest.raises(ValueError):
        sf_all(d1, d2, f1, np.ones((3, 3), bool))


def test_sf_all_dominates_each_task():
    rng = np.random.default_rng(0)
    for _ in range(100):
        gt = [rng.normal(size=(2, 8, 8)) * 10, rng.uniform(1, 50, (8, 8)), rng.uniform(1, 50, (8, 8))]
        pred = [g + rng.normal(size=g.shape) * rng.uniform(0, 8) for g in gt]
        mask = rng.random((8, 8)) > 0.3
        f1, d1, d2 = (outliers(p, g) for p, g in zip(pred, gt))
        rates = [outlier_rate(p, g, mask) for p, g in zip(pred, gt)]
        assert sf_all(d1, d2, f1, mask) >= max(rates) - 1e-12


def _field(rng, noc=None):
    return SceneFlowField(rng.normal(size=(2, 6, 7)) * 5, rng.uniform(1, 30, (6, 7)), rng.uniform(1, 30, (6, 7)),
                          rng.random((6, 7)) > 0.2, noc)


def test_report_perfect_prediction(rng):
    g = _field(rng)
    rep = MetricReport()
    rep.add((g.flow, g.disp, g.change), g)
    d = rep.as_dict()
    assert d["SF-All"] == 0 and d["EPE-flow-All"] == 0
    assert "SF-All=0.0000" in rep.to_keyvalue()
    assert "Noc" not in rep.to_keyvalue()


def test_report_noc_equals_all_when_masks_coincide(rng):
    g = _field(rng)
    g.noc = g.valid.copy()
    pred = (g.flow + rng.normal(size=g.flow.shape) * 4, g.disp + 2, g.change * 1.5)
    rep = MetricReport()
    rep.add(pred, g)
    d = rep.as_dict()
    for key in ("SF", "D1", "D2", "F1", "EPE-flow"):
        assert d[f"{key}-All"] == d[f"{key}-Noc"]


def test_report_merge_is_order_independent(rng):
    fields = [_field(rng) for _ in range(3)]
    preds = [(f.flow + 3, f.disp * 1.2, f.change - 4) for f in fields]
    reps = []
    for p, f in zip(preds, fields):
        r = MetricReport()
        r.add(p, f)
        reps.append(r)
    a = reps[0].merge(reps[1]).merge(reps[2]).as_dict()
    b = reps[2].merge(reps[0].merge(reps[1])).as_dict()
    assert a == pytest.approx(b)
    whole = MetricReport()
    for p, f in zip(preds, fields):
        whole.add(p, f)
    assert whole.as_dict() == pytest.approx(a)
    assert 0 <= a["SF-All"] <= 100
