"""Acceptance checks, one test per criterion; each records a PASS/FAIL line.

Run ``pytest tests/test_acceptance.py -v`` and read the "acceptance criteria"
section of the summary. Criteria 7 and 8 train networks and take minutes.
"""

import os
import time
from pathlib import Path

import numpy as np
import pytest

from dwarf import codecs
from dwarf.autograd import Tensor, precision
from dwarf.correlation import CorrConfig, corr1d, corr2d, corr3d, corr_reference, feature_count
from dwarf.data import generate_scene, random_spec
from dwarf.experiments import distillation_trend, overfit
from dwarf.gradcheck import run_suite
from dwarf.metrics import MetricReport, epe, outlier_rate, outliers, sf_all
from dwarf.network import DWARF, VARIANTS, ModelConfig, count_params
from dwarf.training import LossWeights, make_schedule
from dwarf.warp import warp_by_disparity, warp_by_flow, warp_by_flow_and_change

ARTIFACTS = Path(os.environ.get("DWARF_ARTIFACTS", Path(__file__).resolve().parents[1] / "acceptance_artifacts"))


def test_c01_gradient_suite(acceptance):
    t0 = time.perf_counter()
    with precision(64):
        errors = run_suite(seed=0)
    secs = time.perf_counter() - t0
    worst = max(errors, key=errors.get)
    ok = errors[worst] < 1e-5 and secs < 300 and len(errors) >= 12
    assert acceptance(1, ok, f"{len(errors)} ops, max rel error {errors[worst]:.2e} ({worst}) < 1e-5, {secs:.1f}s")


def test_c02_correlation_oracle(acceptance):
    rng = np.random.default_rng(2024)
    t0 = time.perf_counter()
    worst = {"1d": 0.0, "2d": 0.0, "3d": 0.0}
    counts = dict.fromkeys(worst, 0)
    with precision(64):
        for mode in worst:
            for _ in range(200):
                h, w = rng.integers(1, 17, size=2)
                c = int(rng.integers(1, 6))
                rx, ry, rz = (int(v) for v in rng.integers(0, 5, size=3))
                if mode == "1d":
                    cfg = CorrConfig(r_x=rx, r_y=0)
                elif mode == "2d":
                    cfg = CorrConfig(r_x=rx, r_y=ry)
                else:
                    c = int(rng.integers(rz + 1, 10))  # curve length must exceed the shift radius
                    cfg = CorrConfig(r_x=rx, r_y=ry, r_z=rz)
                a, b = rng.normal(size=(1, c, h, w)), rng.normal(size=(1, c, h, w))
                fn = {"1d": corr1d, "2d": corr2d, "3d": corr3d}[mode]
                got = fn(Tensor(a), Tensor(b), cfg).scores.data
                worst[mode] = max(worst[mode], float(np.abs(got - corr_reference(mode, [a, b], cfg)).max()))
                counts[mode] += 1
    secs = time.perf_counter() - t0
    ok = max(worst.values()) < 1e-6 and min(counts.values()) >= 200 and secs < 60
    detail = ", ".join(f"{m} n={counts[m]} max {worst[m]:.1e}" for m in worst)
    assert acceptance(2, ok, f"{detail}; {secs:.1f}s")


def test_c03_configuration(acceptance):
    cfg = ModelConfig()
    a = Tensor(np.ones((1, 2, 5, 5)))
    c1 = corr1d(a, a, CorrConfig(r_x=cfg.r_1d, r_y=0))
    c2 = corr2d(a, a, CorrConfig(r_x=cfg.r_2d[1], r_y=cfg.r_2d[0]))
    ry, rx, rz = cfg.r_3d
    c3 = corr3d(c1, c1, CorrConfig(r_x=rx, r_y=ry, r_z=rz))
    model = DWARF(ModelConfig(width=0.125))
    full_enc = [blk[0].w.shape[0] for blk in DWARF(ModelConfig(dense=False, corr3d=False, refine=False)).encoder]
    pre, fine = LossWeights.pretrain(), LossWeights.finetune()
    ft, kt = make_schedule("flyingthings"), make_schedule("kitti_ft")
    checks = {
        "volumes 9/81/81": (c1.channels, c2.channels, c3.channels) == (9, 81, 81),
        "encoder channels": full_enc == [16, 32, 64, 96, 128, 196],
        "18 encoder convs": sum(len(blk) for blk in model.encoder) == 18,
        "dilations": [l.dilation for l in model.refiners["flow"][0]] == [1, 2, 4, 8, 16, 1],
        "pretrain alphas": pre.alphas == {6: 0.32, 5: 0.08, 4: 0.02, 3: 0.01, 2: 0.005},
        "finetune alphas": fine.alphas[2] == 0.001 and not any(fine.alphas[k] for k in (3, 4, 5, 6)),
        "eps": pre.eps == (1.0, 1.0, 0.5) and fine.eps == pre.eps,
        "gamma": pre.gamma == 0.0004 == fine.gamma,
        "flyingthings": (ft.steps, ft.batch_size, ft.crop, ft.lr, ft.decay_steps)
        == (1_200_000, 4, (768, 384), 1e-4, (400_000, 600_000, 800_000, 1_000_000)),
        "kitti_ft": (kt.steps, kt.batch_size, kt.crop, kt.pad, kt.lr, kt.decay_steps)
        == (50_000, 4, (896, 320), (1280, 384), 3e-5, (25_000, 35_000, 45_000)),
        "halving": ft.lr_at(400_000) == 5e-5 and kt.lr_at(45_000) == 3e-5 / 8,
    }
    failed = [k for k, v in checks.items() if not v]
    assert acceptance(3, not failed, f"{len(checks)} config checks" + (f", failed: {failed}" if failed else " match"))


def test_c04_feature_count(acceptance):
    # flow range 40 at stride 2, disparity range 40: 2D+1D, plus 3D with r_z = 0, plus 3D with r_z = 2
    got = (feature_count(40, 40, 2), feature_count(40, 40, 2, r_z=0), feature_count(40, 40, 2, r_z=2))
    assert acceptance(4, got == (562, 962, 2562), f"feature_count -> {got}, expected (562, 962, 2562)")


def test_c05_parameter_trend(acceptance):
    counts = {name: count_params(cfg) for name, cfg in VARIANTS.items()}
    vals = list(counts.values())
    built = DWARF(VARIANTS["full"]).num_params()
    ok = (
        all(a < b for a, b in zip(vals, vals[1:]))
        and abs(vals[0] / 5.06e6 - 1) < 0.10
        and abs(vals[-1] / 19.62e6 - 1) < 0.10
        and built == vals[-1]
    )
    detail = ", ".join(f"{k} {v / 1e6:.3f}M" for k, v in counts.items())
    assert acceptance(5, ok, f"{detail} (targets 5.06M and 19.62M within 10%)")


def test_c06_warp_consistency(acceptance):
    t0 = time.perf_counter()
    worst = 0.0
    with precision(64):
        for seed in range(50):
            s = generate_scene(random_spec(seed), seed=seed)
            g = s.gt
            L1, R1, L2, R2 = (Tensor(i[None]) for i in s.images)
            flow, disp, change = Tensor(g.flow[None]), Tensor(g.disp[None, None]), Tensor(g.change[None, None])
            mask = g.valid & g.noc
            for rec in (warp_by_flow(L2, flow), warp_by_disparity(R1, disp), warp_by_flow_and_change(R2, flow, change)):
                worst = max(worst, float(np.abs(rec.data[0] - s.images[0])[:, mask].mean()))
    secs = time.perf_counter() - t0
    assert acceptance(6, worst < 0.02 and secs < 120, f"50 scenes, worst mean |L1 - warp| {worst:.4f} < 0.02, {secs:.1f}s")


@pytest.mark.slow
def test_c07_overfit(acceptance):
    res = overfit(scene_seed=0, model_seed=0, max_steps=2000, lr=1e-4, threshold=0.5)
    ARTIFACTS.mkdir(parents=True, exist_ok=True)
    from dwarf.viz import save_curves

    curves = {name: [(c[0], c[i + 1]) for c in res.curve] for i, name in enumerate(("flow", "disparity", "change"))}
    save_curves(ARTIFACTS / "overfit_epe.png", curves, "EPE (px)", title="single-scene overfit")
    ok = res.reached and res.steps <= 2000 and res.seconds < 1800
    errs = ", ".join(f"{e:.3f}" for e in res.epe)
    assert acceptance(7, ok, f"EPE flow/disp/change [{errs}] < 0.5 after {res.steps} steps, {res.seconds:.0f}s")


@pytest.mark.slow
def test_c08_distillation_trend(acceptance):
    res = distillation_trend(seeds=(0, 1, 2))
    med = res.medians()
    ARTIFACTS.mkdir(parents=True, exist_ok=True)
    from dwarf.viz import save_curves

    curves = {f"{name} seed {i}": c for name, per_seed in res.curves.items() for i, c in enumerate(per_seed)}
    save_curves(ARTIFACTS / "distillation_sf_all.png", curves, "held-out SF-All (%)", title="px_then_gt vs gt")
    runs = "; ".join(f"{k}: " + " ".join(f"{v:.2f}" for v in vals) for k, vals in res.sf_all.items())
    ok = med["px_then_gt"] <= med["gt"]
    detail = f"median SF-All px_then_gt {med['px_then_gt']:.2f} vs gt {med['gt']:.2f} ({runs}), {res.seconds:.0f}s"
    assert acceptance(8, ok, detail + f"; curves in {ARTIFACTS / 'distillation_sf_all.png'}")


def test_c09_metrics(acceptance):
    checks = {
        "epe perfect": epe(np.ones((2, 3, 3)), np.ones((2, 3, 3))) == 0.0,
        "epe 3-4-5": epe(np.array([3.0, 4.0]).reshape(2, 1, 1), np.zeros((2, 1, 1))) == 5.0,
        "epe disparity": epe(np.array([[8.0]]), np.array([[10.0]])) == 2.0,
        "100/104 inlier": not outliers(np.array([[104.0]]), np.array([[100.0]])).any(),
        "10/14 outlier": outliers(np.array([[14.0]]), np.array([[10.0]])).all(),
        "two-pixel 50%": outlier_rate(np.array([[104.0, 14.0]]), np.array([[100.0, 10.0]])) == 50.0,
    }
    d1, d2, f1 = (np.zeros((10, 10), bool) for _ in range(3))
    d1[0, 0], d2[0, 1], f1[0, 2] = True, True, True
    checks["disjoint union 3%"] = sf_all(d1, d2, f1) == 3.0
    checks["identical sets"] = sf_all(d1, d1, d1) == outlier_rate(np.where(d1, 10.0, 0.0), np.zeros((10, 10)))

    rng = np.random.default_rng(99)
    violations = 0
    for _ in range(100):
        g = generate_scene(random_spec(int(rng.integers(1 << 30)), 16, 32), seed=0).gt
        noise = rng.uniform(0.5, 8.0)
        pred = (g.flow + rng.normal(0, noise, g.flow.shape), g.disp + rng.normal(0, noise, g.disp.shape),
                g.change + rng.normal(0, noise, g.change.shape))
        rep = MetricReport()
        rep.add(pred, g)
        d = rep.as_dict()
        violations += d["SF-All"] < max(d["D1-All"], d["D2-All"], d["F1-All"])
    checks["SF >= max over 100 evals"] = violations == 0
    failed = [k for k, v in checks.items() if not v]
    assert acceptance(9, not failed, f"{len(checks)} metric checks" + (f", failed: {failed}" if failed else " pass"))


def test_c10_codecs(acceptance, tmp_path):
    rng = np.random.default_rng(5)
    checks = {}
    pfm_ok = True
    for shape in [(7, 9), (5, 4, 3), (1, 1)]:
        a = rng.normal(size=shape).astype(np.float32)
        a.flat[0] = np.inf
        codecs.write_pfm(tmp_path / "a.pfm", a)
        pfm_ok &= codecs.read_pfm(tmp_path / "a.pfm").tobytes() == a.tobytes()
    checks["pfm bit-exact"] = pfm_ok
    flow = rng.uniform(-500, 500, size=(2, 20, 30))
    codecs.write_flow_png(tmp_path / "f.png", flow)
    back, valid = codecs.read_flow_png(tmp_path / "f.png")
    checks["flow within 1/128"] = valid.all() and np.abs(back - flow).max() <= 1 / 128 + 1e-12
    disp = rng.uniform(1 / 512, 255.9, size=(20, 30))
    codecs.write_disp_png(tmp_path / "d.png", disp)
    dback, dvalid = codecs.read_disp_png(tmp_path / "d.png")
    checks["disparity within 1/512"] = dvalid.all() and np.abs(dback - disp).max() <= 1 / 512 + 1e-12
    # golden encodings fixed by hand: 1-px PFM of 3.5, KITTI flow (1.5, -2) valid, disparity 2.25
    checks["golden pfm"] = codecs.pfm_encode(np.array([[3.5]], np.float32)) == b"Pf\n1 1\n-1.0\n" + b"\x00\x00\x60\x40"
    enc = codecs.flow_png_encode(np.array([1.5, -2.0]).reshape(2, 1, 1))
    checks["golden flow png"] = enc.reshape(-1).tolist() == [32864, 32640, 1]
    checks["golden disp png"] = codecs.disp_png_encode(np.array([[2.25]])).reshape(-1).tolist() == [576]
    failed = [k for k, v in checks.items() if not v]
    assert acceptance(10, not failed, f"{len(checks)} codec checks" + (f", failed: {failed}" if failed else " pass"))
