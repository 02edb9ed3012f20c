"""Acceptance suite: one test per criterion, each at its stated tolerance and
runtime budget. Every test records a pass/fail line that is printed in the
terminal summary.

The end-to-end study (criteria 6 and 7) trains 2 x 3 folds and takes well
over an hour on one CPU core; set SCTGAN_SKIP_STUDY=1 to skip it.
"""
import os
import time

import numpy as np
import pytest

from conftest import brute_nearest, record_criterion
from gradcheck import RTOL, sample_indices, worst_relative_error, worst_frozen_relative_error
from reference_rows import REFERENCE_MEAN, REFERENCE_ROWS
from sctgan.metrics import (
    COLUMNS,
    MetricsRow,
    aggregate_report,
    dice,
    format_value,
    mae,
    marching_cubes,
    surface_distance,
)
from sctgan.nn import (
    Discriminator,
    Generator,
    avg_pool2,
    avg_pool2_grad,
    conv2d,
    conv2d_grad,
    nn_upsample2,
    nn_upsample2_grad,
    pixelwise_norm,
    pixelwise_norm_grad,
    receptive_field_analytic,
    receptive_field_empirical,
)
from sctgan.phantom import PhantomSpec, generate_phantom, perturb_pose, random_pose
from sctgan.registration import icp_register, nearest_correspondences
from sctgan.study import run_phantom_study
from sctgan.train import TrainConfig, adversarial, l1_grad, lr_schedule
from sctgan.volume import Mask3D, Volume3D, extract_point_cloud


def test_criterion_1_reference_aggregation():
    t = time.perf_counter()
    mean = aggregate_report([MetricsRow(*r) for r in REFERENCE_ROWS])
    got = tuple(format_value(c, getattr(mean, c)) for c in COLUMNS[1:])
    want = tuple(format_value(c, v) for c, v in zip(COLUMNS[1:], REFERENCE_MEAN))
    elapsed = time.perf_counter() - t
    ok = got == want and elapsed < 1.0
    record_criterion(1, ok, f"mean row {','.join(got)} (expected {','.join(want)}), {elapsed:.3f}s")
    assert ok


def _gradient_errors():
    rng = np.random.default_rng(2024)
    errors = {}

    x = rng.normal(size=(2, 3, 8, 8))
    w = rng.normal(size=(4, 3, 3, 3))
    b = rng.normal(size=4)
    R = rng.normal(size=(2, 4, 8, 8))
    dx, dw, db = conv2d_grad(x, w, R)
    f = lambda: float((conv2d(x, w, b) * R).sum())  # noqa: E731
    errors["conv2d"] = max(worst_relative_error(f, a, g, list(np.ndindex(a.shape)))
                           for a, g in ((x, dx), (w, dw), (b, db)))

    x = rng.normal(size=(2, 3, 6, 8))
    R = rng.normal(size=(2, 3, 3, 4))
    f = lambda: float((avg_pool2(x) * R).sum())  # noqa: E731
    errors["avg_pool2"] = worst_relative_error(f, x, avg_pool2_grad(R), list(np.ndindex(x.shape)))
    R = rng.normal(size=(2, 3, 12, 16))
    f = lambda: float((nn_upsample2(x) * R).sum())  # noqa: E731
    errors["nn_upsample2"] = worst_relative_error(f, x, nn_upsample2_grad(R),
                                                  list(np.ndindex(x.shape)))

    x = rng.normal(scale=2.0, size=(2, 6, 4, 4))
    R = rng.normal(size=x.shape)
    y, inv = pixelwise_norm(x)
    f = lambda: float((pixelwise_norm(x)[0] * R).sum())  # noqa: E731
    errors["pixelwise_norm"] = worst_relative_error(f, x, pixelwise_norm_grad(y, inv, R),
                                                    list(np.ndindex(x.shape)))

    z = rng.normal(size=(2, 1, 4, 4)) * 3
    for mode in ("bce", "lsgan"):
        for target in (0.0, 1.0):
            _, g = adversarial(z, target, mode)
            f = lambda: adversarial(z, target, mode)[0]  # noqa: E731
            errors[f"adversarial[{mode},{target:g}]"] = worst_relative_error(
                f, z, g, list(np.ndindex(z.shape)))
    t_ = rng.normal(size=z.shape)
    f = lambda: float(np.abs(z - t_).mean())  # noqa: E731
    errors["l1"] = worst_relative_error(f, z, l1_grad(z, t_), list(np.ndindex(z.shape)))

    net = Generator()
    params = net.init_params(rng, dtype=np.float64)
    x = rng.uniform(0, 2, size=(1, 3, 16, 16))
    R = rng.normal(size=(1, 1, 16, 16))
    net.forward(params, x)
    grads, dx = net.backward(params, R, need_dx=True)
    f = lambda: float((net.forward(params, x) * R).sum())  # noqa: E731
    # ReLU patterns are frozen at the evaluation point; stencils that would
    # have crossed a kink are counted for the report
    worst, crossings = worst_frozen_relative_error(f, x, dx, sample_indices(x.shape, 64, rng))
    checked = 64
    for name, p in params.items():
        idx = sample_indices(p.shape, 6, rng)
        w, c = worst_frozen_relative_error(f, p, grads[name], idx)
        worst, crossings, checked = max(worst, w), crossings + c, checked + len(idx)
    errors["generator 1x3x16x16"] = worst
    return errors, (checked, crossings)


def test_criterion_2_gradients():
    t = time.perf_counter()
    errors, (checked, crossings) = _gradient_errors()
    elapsed = time.perf_counter() - t
    worst_name = max(errors, key=errors.get)
    ok = all(e < RTOL for e in errors.values()) and elapsed < 300
    record_criterion(2, ok, f"{len(errors)} checks, worst relative error {errors[worst_name]:.2e} "
                            f"({worst_name}); generator entries checked {checked}, of which "
                            f"{crossings} straddle a ReLU kink; {elapsed:.1f}s")
    assert ok, errors


def test_criterion_3_receptive_fields():
    t = time.perf_counter()
    d = Discriminator()
    d_emp = receptive_field_empirical(d, d.init_params(np.random.default_rng(0)), (1, 4, 32, 32))
    d_ana = receptive_field_analytic(d.layer_sequence())
    g = Generator()
    g_params = g.init_params(np.random.default_rng(0))
    g_emp = receptive_field_empirical(g, g_params, (1, 3, 256, 256), pixel=(128, 128))
    g_ana = receptive_field_analytic(g.layer_sequence())
    elapsed = time.perf_counter() - t
    ok = (d_emp == (9, 9) and d_ana == (9, 9) and g_emp[0] == g_emp[1]
          and 64 <= g_emp[0] <= 128 and elapsed < 120)
    record_criterion(3, ok, f"discriminator {d_emp[0]}x{d_emp[1]} (analytic {d_ana[0]}); generator "
                            f"empirical {g_emp[0]}x{g_emp[1]}, analytic {g_ana[0]}, reference 124; "
                            f"{elapsed:.1f}s")
    assert ok


def test_criterion_4_registration_recovery():
    """Misalign each phantom CT by a seeded pose and register it back to the MR."""
    t = time.perf_counter()
    worst_rot = worst_shift = 0.0
    monotone = True
    failures = []
    for i in range(20):
        ph = generate_phantom(PhantomSpec(seed=i))
        xf = random_pose(np.random.default_rng(i), max_rot_deg=10.0, max_shift_vox=5.0)
        moved = perturb_pose(ph.ct, xf)
        res = icp_register(extract_point_cloud(moved, "high-CT"),
                           extract_point_cloud(ph.mr[0], "low-MR"))
        err = res.transform.compose(xf.inverse())
        rot = err.rotation_angle_deg()
        # the phantom origin is the volume centre, so t is the error at the centre
        shift = float(np.linalg.norm(err.t / np.asarray(ph.ct.spacing)))
        worst_rot, worst_shift = max(worst_rot, rot), max(worst_shift, shift)
        monotone &= bool(np.all(np.diff(res.history) <= 1e-9))
        if rot > 0.5 or shift > 0.25:
            failures.append(f"seed {i}: {rot:.2f} deg / {shift:.2f} vox")
    elapsed = time.perf_counter() - t
    ok = not failures and monotone and elapsed < 300
    record_criterion(4, ok, f"{20 - len(failures)}/20 recovered, worst {worst_rot:.2f} deg and "
                            f"{worst_shift:.2f} vox, residual monotone={monotone}, {elapsed:.1f}s")
    assert ok, failures


def _brute_dice(a, b):
    na = nb = inter = 0
    for idx in np.ndindex(a.shape):
        na += bool(a[idx])
        nb += bool(b[idx])
        inter += bool(a[idx] and b[idx])
    return 1.0 if na + nb == 0 else 2.0 * inter / (na + nb)


def _brute_mae(a, b, m):
    total, n = 0.0, 0
    for idx in np.ndindex(a.shape):
        if m[idx]:
            total += abs(float(a[idx]) - float(b[idx]))
            n += 1
    return total / n


def test_criterion_5_metric_oracles():
    t = time.perf_counter()
    rng = np.random.default_rng(5)
    mismatches = []
    for n in range(50):
        a = Volume3D(rng.uniform(-1000, 2000, (16, 16, 16)))
        b = Volume3D(a.values + rng.normal(0, 300, (16, 16, 16)))
        ma, mb = Mask3D(a.values > 200), Mask3D(b.values > 200)
        region = Mask3D(rng.random((16, 16, 16)) > 0.5)
        if dice(ma, mb) != _brute_dice(ma.values, mb.values):
            mismatches.append(f"dice {n}")
        if not np.isclose(mae(a, b, region), _brute_mae(a.values, b.values, region.values),
                          rtol=1e-9, atol=0):
            mismatches.append(f"mae {n}")
        src, dst = rng.uniform(0, 16, (200, 3)), rng.uniform(0, 16, (150, 3))
        _, idx, dist = nearest_correspondences(src, dst)
        bi, bd = brute_nearest(src, dst)
        if not (np.array_equal(idx, bi) and np.array_equal(dist, bd)):
            mismatches.append(f"nearest {n}")
        # smooth fields give moderate meshes; sum of two random blobs
        c = a.grid.centers()
        f1 = 1000 - 40 * np.linalg.norm(c - rng.uniform(4, 12, 3), axis=-1) ** 2 / 4
        f2 = 1000 - 40 * np.linalg.norm(c - rng.uniform(4, 12, 3), axis=-1) ** 2 / 4
        m1, m2 = marching_cubes(Volume3D(f1), 200), marching_cubes(Volume3D(f2), 200)
        for src_m, dst_m in ((m1, m2), (m2, m1)):
            _, mean = surface_distance(src_m, dst_m)
            oracle = brute_nearest(src_m.vertices, dst_m.vertices)[1].mean()
            if not np.isclose(mean, oracle, rtol=1e-9, atol=0):
                mismatches.append(f"surface distance {n}")

    n = 48
    ax = (np.arange(n) - (n - 1) / 2) * 0.5
    X, Y, Z = np.meshgrid(ax, ax, ax, indexing="ij")
    sphere = marching_cubes(Volume3D(10.0 - np.sqrt(X**2 + Y**2 + Z**2), (0.5,) * 3, (ax[0],) * 3), 0.0)
    area_ratio = sphere.area() / (4 * np.pi * 100)
    v = np.full((5, 5, 5), -1000.0)
    v[2, 2, 2] = 1000
    chi = marching_cubes(Volume3D(v), 200).euler_characteristic()
    elapsed = time.perf_counter() - t
    ok = not mismatches and abs(area_ratio - 1) <= 0.05 and chi == 2 and elapsed < 300
    record_criterion(5, ok, f"50 instances, {len(mismatches)} oracle mismatches; sphere area ratio "
                            f"{area_ratio:.4f}; single-voxel Euler characteristic {chi}; "
                            f"{elapsed:.1f}s")
    assert ok, mismatches


# -- end-to-end study ---------------------------------------------------------------

STUDY_CFG = TrainConfig(epochs=30, lr_hold_epochs=24, batches_per_epoch=20, val_max_slices=16,
                        seed=0)
skip_study = pytest.mark.skipif(os.environ.get("SCTGAN_SKIP_STUDY") == "1",
                                reason="SCTGAN_SKIP_STUDY=1")


@pytest.fixture(scope="module")
def study_runs(tmp_path_factory):
    runs = {}

    def run(name):
        if name not in runs:
            out = tmp_path_factory.mktemp(f"study_{name}")
            t = time.perf_counter()
            res = run_phantom_study(out, count=9, k=3, cfg=STUDY_CFG, spec=PhantomSpec(seed=0))
            runs[name] = (out, res, time.perf_counter() - t)
        return runs[name]
    return run


@skip_study
@pytest.mark.slow
def test_criterion_6_end_to_end(study_runs):
    out, res, elapsed = study_runs("a")
    ratios = [min(r["val_l1"] for r in fr.log) / fr.log[0]["val_l1"] for fr in res.fold_results]
    bone_ratio = res.mean.mae_bone_hu / res.baseline_mean.mae_bone_hu
    ok = (res.mean.dice_bone >= 0.80 and bone_ratio <= 0.5 and all(q <= 0.5 for q in ratios)
          and elapsed <= 3600 and len(res.rows) == 9)
    record_criterion(6, ok, f"mean Dice {res.mean.dice_bone:.3f}; bone MAE "
                            f"{res.mean.mae_bone_hu:.1f} HU vs baseline "
                            f"{res.baseline_mean.mae_bone_hu:.1f} HU (ratio {bone_ratio:.3f}); "
                            f"best/epoch-0 val L1 per fold "
                            f"{', '.join(f'{q:.3f}' for q in ratios)}; {elapsed / 60:.1f} min")
    assert ok


@skip_study
@pytest.mark.slow
def test_criterion_7_determinism(study_runs):
    out_a, _, _ = study_runs("a")
    out_b, _, _ = study_runs("b")
    files = sorted(str(p.relative_to(out_a)) for p in out_a.rglob("*")
                   if p.is_file() and (p.suffix in (".csv", ".json", ".ckpt", ".raw")))
    differing = [f for f in files if (out_a / f).read_bytes() != (out_b / f).read_bytes()]
    ok = bool(files) and not differing
    record_criterion(7, ok, f"{len(files)} artifacts compared (loss logs, checkpoints, volumes, "
                            f"tables), {len(differing)} differ")
    assert ok, differing


def test_criterion_8_schedule():
    cfg = TrainConfig()
    points = {0: 0.0002, 399: 0.0002, 450: 0.0001, 500: 0.0}
    exact = all(abs(lr_schedule(e, cfg) - v) <= 1e-12 for e, v in points.items())
    grid = np.linspace(0, 500, 50001)
    lrs = np.array([lr_schedule(e, cfg) for e in grid])
    non_increasing = bool(np.all(np.diff(lrs) <= 0))
    # largest jump between neighbouring samples 0.01 epochs apart
    max_step = float(np.abs(np.diff(lrs)).max())
    continuous = max_step <= cfg.lr0 / 100 * 0.01 + 1e-15
    at_hold = (lr_schedule(400 - 1e-9, cfg), lr_schedule(400, cfg), lr_schedule(400 + 1e-9, cfg))
    ok = exact and non_increasing and continuous and all(abs(v - 0.0002) < 1e-12 for v in at_hold)
    record_criterion(8, ok, f"values at 0/399/450/500 = "
                            f"{'/'.join(f'{lr_schedule(e, cfg):g}' for e in points)}; "
                            f"non-increasing={non_increasing}; max step over 0.01 epoch {max_step:.2e}")
    assert ok
