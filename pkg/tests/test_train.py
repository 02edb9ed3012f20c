import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from gradcheck import RTOL, worst_relative_error
from sctgan.nn import Discriminator, Generator
from sctgan.train import (
    CT_BACKGROUND,
    LOG_COLUMNS,
    NumericalError,
    OptimizerState,
    TrainConfig,
    adam_step,
    adversarial,
    augment_shift,
    ct_denormalize,
    ct_normalize,
    extract_sagittal_slices,
    gan_losses,
    generator_grads,
    l1_grad,
    lr_schedule,
    make_folds,
    synthesize_slices,
    synthesize_volume,
    train_fold,
    write_loss_log,
)
from sctgan.volume import Volume3D


def tiny_nets():
    return Generator(base=4, scales=3), Discriminator(width=4)


class TestSchedule:
    def test_values(self):
        cfg = TrainConfig()
        assert lr_schedule(0, cfg) == 0.0002
        assert lr_schedule(399, cfg) == 0.0002
        assert lr_schedule(400, cfg) == 0.0002
        assert lr_schedule(450, cfg) == pytest.approx(0.0001, abs=1e-15)
        assert lr_schedule(500, cfg) == 0

    def test_out_of_range(self):
        with pytest.raises(ValueError):
            lr_schedule(501, TrainConfig())
        with pytest.raises(ValueError):
            lr_schedule(-1, TrainConfig())

    @given(st.integers(1, 600), st.data())
    @settings(max_examples=40, deadline=None)
    def test_non_increasing(self, epochs, data):
        hold = data.draw(st.integers(0, epochs))
        cfg = TrainConfig(epochs=epochs, lr_hold_epochs=hold)
        lrs = [lr_schedule(e, cfg) for e in range(epochs + 1)]
        assert all(b <= a for a, b in zip(lrs, lrs[1:]))
        assert lrs[-1] == 0


class TestConfig:
    def test_validation(self):
        with pytest.raises(ValueError):
            TrainConfig(epochs=10, lr_hold_epochs=20)
        with pytest.raises(ValueError):
            TrainConfig(lr0=0)
        with pytest.raises(ValueError):
            TrainConfig(gan_mode="wgan")

    def test_json_round_trip(self, tmp_path):
        cfg = TrainConfig(epochs=30, lr_hold_epochs=24, seed=3)
        path = tmp_path / "c.json"
        path.write_text(__import__("json").dumps(cfg.to_dict()))
        assert TrainConfig.load(path) == cfg

    def test_unknown_field(self):
        with pytest.raises(ValueError):
            TrainConfig.from_dict({"epoch": 3})


def reference_adam(theta, grads_fn, steps, lr=0.01, b1=0.5, b2=0.999, eps=1e-8):
    m = v = 0.0
    traj = []
    for t in range(1, steps + 1):
        g = grads_fn(theta)
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        theta = theta - lr * (m / (1 - b1**t)) / (np.sqrt(v / (1 - b2**t)) + eps)
        traj.append(theta)
    return traj


class TestAdam:
    def test_zero_gradient(self):
        p = {"w": np.array([1.0, 2.0])}
        state = OptimizerState()
        adam_step(p, {"w": np.zeros(2)}, state, 0.1, TrainConfig())
        assert p["w"].tolist() == [1.0, 2.0] and state.step == 1

    def test_first_step_is_signed_lr(self):
        for g in (0.3, -7.0):
            p = {"w": np.array([0.0])}
            adam_step(p, {"w": np.array([g])}, OptimizerState(), 0.001, TrainConfig())
            assert p["w"][0] == pytest.approx(-0.001 * np.sign(g), abs=1e-6)

    def test_quadratic_trajectory(self):
        p = {"w": np.array([1.0])}
        state = OptimizerState()
        cfg = TrainConfig()
        ours = []
        for _ in range(10):
            adam_step(p, {"w": 2 * p["w"]}, state, 0.01, cfg)
            ours.append(p["w"][0])
        ref = reference_adam(1.0, lambda th: 2 * th, 10)
        np.testing.assert_allclose(ours, ref, rtol=0, atol=1e-9)

    def test_deterministic(self):
        def run():
            p = {"w": np.linspace(-1, 1, 5)}
            s = OptimizerState()
            for i in range(5):
                adam_step(p, {"w": np.sin(p["w"] * (i + 1))}, s, 0.01, TrainConfig())
            return p["w"].tobytes(), s.m["w"].tobytes(), s.v["w"].tobytes()
        assert run() == run()

    def test_non_finite(self):
        with pytest.raises(NumericalError):
            adam_step({"w": np.zeros(2)}, {"w": np.array([0.0, np.nan])}, OptimizerState(), 0.1,
                      TrainConfig())

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            adam_step({"w": np.zeros(2)}, {"w": np.zeros(3)}, OptimizerState(), 0.1, TrainConfig())


class TestLosses:
    def test_zero_l1(self):
        x = np.random.default_rng(0).random((2, 1, 4, 4))
        _, _, l1 = gan_losses(np.zeros_like(x), np.zeros_like(x), x, x.copy(), 100)
        assert l1 == 0

    def test_logit_zero_is_ln2(self):
        for target in (0.0, 1.0):
            loss, _ = adversarial(np.zeros((1, 1, 3, 3)), target)
            assert loss == pytest.approx(np.log(2), abs=1e-12)
        g, d, _ = gan_losses(np.zeros((1, 1, 2, 2)), np.zeros((1, 1, 2, 2)),
                             np.zeros((1, 1, 2, 2)), np.zeros((1, 1, 2, 2)), 100)
        assert g == pytest.approx(np.log(2)) and d == pytest.approx(np.log(2))

    def test_lambda_linearity(self):
        rng = np.random.default_rng(1)
        dr, df, go, ct = rng.normal(size=(4, 1, 1, 4, 4))
        g1, _, l1 = gan_losses(dr, df, go, ct, 50)
        g2, _, _ = gan_losses(dr, df, go, ct, 100)
        assert g2 - g1 == pytest.approx(50 * l1, rel=1e-12)

    def test_non_finite(self):
        with pytest.raises(NumericalError):
            gan_losses(np.array([np.inf]), np.zeros(1), np.zeros(1), np.zeros(1), 1)

    @pytest.mark.parametrize("mode", ["bce", "lsgan"])
    @pytest.mark.parametrize("target", [0.0, 1.0])
    def test_adversarial_grad(self, mode, target):
        z = np.random.default_rng(2).normal(size=(2, 1, 3, 3)) * 3
        _, g = adversarial(z, target, mode)
        f = lambda: adversarial(z, target, mode)[0]  # noqa: E731
        assert worst_relative_error(f, z, g, list(np.ndindex(z.shape))) < RTOL

    def test_l1_grad(self):
        rng = np.random.default_rng(3)
        x, t = rng.normal(size=(2, 1, 3, 3)), rng.normal(size=(2, 1, 3, 3))
        f = lambda: float(np.abs(x - t).mean())  # noqa: E731
        assert worst_relative_error(f, x, l1_grad(x, t), list(np.ndindex(x.shape))) < RTOL

    def test_lambda_zero_removes_l1_from_update(self):
        gnet, dnet = tiny_nets()
        rng = np.random.default_rng(4)
        gp = gnet.init_params(rng, np.float64)
        dp = dnet.init_params(rng, np.float64)
        mr = rng.random((2, 3, 8, 8))
        ct_a, ct_b = rng.random((2, 2, 1, 8, 8))
        # with lambda 0 the CT target has no influence on the generator gradient
        ga, *_ = generator_grads(gnet, dnet, gp, dp, mr, ct_a, 0.0)
        gb, *_ = generator_grads(gnet, dnet, gp, dp, mr, ct_b, 0.0)
        for k in ga:
            assert np.array_equal(ga[k], gb[k])
        # and it equals the pure adversarial gradient computed by hand
        fake = gnet.forward(gp, mr)
        _, dlogit = adversarial(dnet.forward(dp, np.concatenate([mr, fake], 1)), 1.0)
        _, dx = dnet.backward(dp, dlogit, need_grads=False, need_dx=True)
        gadv, _ = gnet.backward(gp, dx[:, 3:4])
        for k in ga:
            np.testing.assert_allclose(ga[k], gadv[k], rtol=1e-12, atol=1e-15)
        gl, *_ = generator_grads(gnet, dnet, gp, dp, mr, ct_a, 100.0)
        assert any(not np.allclose(gl[k], ga[k]) for k in ga)


class TestNormalization:
    def test_ct_200(self):
        assert ct_normalize(200) == pytest.approx(0.6)

    def test_round_trip(self):
        hu = np.linspace(-1000, 3000, 101)
        np.testing.assert_allclose(ct_denormalize(ct_normalize(hu)), hu, atol=1e-4)

    def test_slices(self, small_phantom):
        s = extract_sagittal_slices(small_phantom.mr, small_phantom.ct)
        nx, ny, nz = small_phantom.ct.dims
        assert len(s) == nx and s.mr.shape == (nx, 3, ny, nz) and s.ct.shape == (nx, 1, ny, nz)
        assert s.mr.min() >= 0 and s.mr.max() <= 2
        assert s.ct.min() >= 0 and s.ct.max() <= 2
        np.testing.assert_allclose(s.ct[3, 0], ct_normalize(small_phantom.ct.values[3]), atol=1e-6)
        # the outermost sagittal planes are air
        assert not s.tissue[0] and s.tissue[nx // 2]

    def test_grid_mismatch(self, small_phantom):
        ct = small_phantom.ct
        moved = Volume3D(ct.values, ct.spacing, (0.0, 0.0, 0.0), "HU")
        with pytest.raises(ValueError):
            extract_sagittal_slices(small_phantom.mr, moved)


class TestAugment:
    def test_zero_shift(self):
        rng = np.random.default_rng(0)
        mr, ct = rng.random((3, 8, 8)), rng.random((1, 8, 8))
        m2, c2, s = augment_shift(mr, ct, rng, shift=(0, 0))
        assert np.array_equal(m2, mr) and np.array_equal(c2, ct) and s == (0, 0)

    def test_bounds_over_many_draws(self):
        rng = np.random.default_rng(1)
        from sctgan.train import draw_shift
        draws = np.array([draw_shift(rng, 8) for _ in range(100_000)])
        assert np.abs(draws).max() == 8
        # every offset in the range occurs
        assert len(np.unique(draws[:, 0])) == 17

    @given(st.integers(0, 10_000))
    @settings(max_examples=30, deadline=None)
    def test_paired_marker(self, seed):
        rng = np.random.default_rng(seed)
        mr = np.zeros((3, 24, 24))
        ct = np.full((1, 24, 24), 0.5)
        mr[:, 12, 10] = 1
        ct[:, 12, 10] = 2
        m2, c2, (dy, dx) = augment_shift(mr, ct, rng, 8)
        assert max(abs(dy), abs(dx)) <= 8
        assert np.argwhere(m2[0] == 1).tolist() == [[12 + dy, 10 + dx]]
        assert np.argwhere(c2[0] == 2).tolist() == [[12 + dy, 10 + dx]]
        # vacated pixels take the background value
        if dy > 0:
            assert np.all(c2[:, :dy] == CT_BACKGROUND) and np.all(m2[:, :dy] == 0)


class TestFolds:
    def test_plan(self):
        plan = make_folds(range(1, 10), seed=7)
        tests = [set(f.test) for f in plan]
        assert set().union(*tests) == set(range(1, 10))
        assert sum(len(t) for t in tests) == 9
        for f in plan:
            assert (len(f.train), len(f.val), len(f.test)) == (4, 2, 3)
            assert set(f.train) | set(f.val) | set(f.test) == set(range(1, 10))
            assert not (set(f.train) & set(f.val))

    def test_deterministic(self):
        a, b = make_folds(range(9), seed=3), make_folds(range(9), seed=3)
        assert [vars(f) for f in a] == [vars(f) for f in b]

    def test_wrong_count(self):
        with pytest.raises(ValueError):
            make_folds(range(8))

    def test_other_sizes_keep_ratio(self):
        plan = make_folds(range(18), seed=0, expected=None)
        for f in plan:
            assert (len(f.train), len(f.val), len(f.test)) == (8, 4, 6)

    @given(st.integers(0, 2**32 - 1))
    @settings(max_examples=50, deadline=None)
    def test_invariants_for_any_seed(self, seed):
        plan = make_folds(list("abcdefghi"), seed=seed)
        assert sorted(x for f in plan for x in f.test) == list("abcdefghi")
        for f in plan:
            assert sorted(f.train + f.val + f.test) == list("abcdefghi")


@pytest.fixture(scope="module")
def tiny_data(small_phantom):
    s = extract_sagittal_slices(small_phantom.mr, small_phantom.ct)
    return [s], [s]


class TestTrainFold:
    cfg = dict(epochs=2, lr_hold_epochs=1, batches_per_epoch=2, val_max_slices=4, seed=11)

    def test_zero_epochs(self, tiny_data):
        gnet, dnet = tiny_nets()
        res = train_fold(*tiny_data, TrainConfig(epochs=0, lr_hold_epochs=0), gnet, dnet)
        assert res.log == [] and res.best_epoch == -1
        fresh = gnet.init_params(np.random.default_rng(np.random.SeedSequence(0).spawn(2)[0]))
        for k in fresh:
            assert np.array_equal(res.best_params[k], fresh[k])

    def test_log_and_determinism(self, tiny_data, tmp_path):
        runs = []
        for n in range(2):
            gnet, dnet = tiny_nets()
            res = train_fold(*tiny_data, TrainConfig(**self.cfg), gnet, dnet)
            write_loss_log(res.log, tmp_path / f"log{n}.csv")
            runs.append(res)
        a, b = ((tmp_path / f"log{n}.csv").read_bytes() for n in range(2))
        assert a == b
        lines = a.decode().splitlines()
        assert lines[0] == ",".join(LOG_COLUMNS) and len(lines) == 3
        for k in runs[0].final_params:
            assert runs[0].final_params[k].tobytes() == runs[1].final_params[k].tobytes()
        assert [r["lr"] for r in runs[0].log] == [0.0002, 0.0002]

    def test_best_checkpoint_tracks_min_val(self, tiny_data):
        gnet, dnet = tiny_nets()
        res = train_fold(*tiny_data, TrainConfig(**{**self.cfg, "epochs": 3, "lr_hold_epochs": 3}),
                         gnet, dnet)
        vals = [r["val_l1"] for r in res.log]
        if min(vals) < res.initial_val_l1:
            assert res.best_val_l1 == min(vals) and res.best_epoch == int(np.argmin(vals))
        else:
            assert res.best_epoch == -1


class TestSynthesis:
    def test_grid_and_reassembly(self, small_phantom):
        gnet = Generator()
        params = gnet.init_params(np.random.default_rng(0))
        sct = synthesize_volume(params, small_phantom.mr, gnet)
        assert sct.grid == small_phantom.mr[0].grid and sct.unit == "HU"
        # direct inference of one slice matches the reassembled volume
        s = extract_sagittal_slices(small_phantom.mr, small_phantom.ct)
        one = synthesize_slices(gnet, params, s.mr[5:6])
        np.testing.assert_allclose(sct.values[5], np.clip(ct_denormalize(one[0, 0]), -1024, 3071),
                                   atol=1e-3)

    def test_pads_indivisible_planes(self):
        gnet = Generator(base=4, scales=3)
        params = gnet.init_params(np.random.default_rng(0))
        out = synthesize_slices(gnet, params, np.zeros((2, 3, 10, 7), np.float32))
        assert out.shape == (2, 1, 10, 7)

    def test_architecture_mismatch(self, small_phantom):
        params = Generator(base=8).init_params(np.random.default_rng(0))
        with pytest.raises(ValueError):
            synthesize_volume(params, small_phantom.mr)
