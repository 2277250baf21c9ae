import numpy as np
import pytest

from drivlab import core
from drivlab.driver import (
    BackboneArch,
    TrainConfig,
    constant_mean_mae,
    driver_forward,
    init_driver_params,
    load_driver,
    predict,
    predict_batch,
    save_driver,
    train_driver,
    windows_to_arrays,
)
from drivlab.errors import NumericalError, ValidationError

from conftest import small_world
from drivlab import simgen


def _constant_windows(n=40, angle=5.0, speed=50.0, d=16, k=4):
    # separable sub-problem: constant targets, constant frames
    rng = np.random.default_rng(0)
    out = []
    for i in range(n):
        out.append(
            core.WindowSample(
                frames=rng.normal(0.0, 1.0, size=(k + 1, d)),
                past_angles=np.full(k, angle),
                past_speeds=np.full(k, speed),
                target_angle=angle + float(rng.normal(0, 1e-6)),
                target_speed=speed + float(rng.normal(0, 1e-6)),
                origin=("c", k + i),
            )
        )
    return out


@pytest.fixture(scope="module")
def trained(small_windows_module):
    net, history = train_driver(small_windows_module, TrainConfig(epochs=2, seed=3))
    return net, history


@pytest.fixture(scope="module")
def small_windows_module():
    eps = simgen.generate_dataset(small_world(), 6, base_seed=500)
    out = []
    for ep in eps:
        out.extend(core.make_windows(ep, k=4))
    return out


class TestPredictContracts:
    def test_zero_heads_predict_channel_means(self, small_windows_module):
        windows = small_windows_module
        net, _ = train_driver(windows[:100], TrainConfig(epochs=1, seed=0))
        for prefix in ("head_angle", "head_speed"):
            for part in ("1", "2"):
                net.params[f"{prefix}{part}.w"].data[:] = 0.0
                net.params[f"{prefix}{part}.b"].data[:] = 0.0
        angle, speed = predict(net, windows[0])
        assert angle == pytest.approx(net.normalizer.mean_angle, abs=1e-12)
        assert speed == pytest.approx(net.normalizer.mean_speed, abs=1e-12)

    def test_outputs_clipped_to_legal_ranges(self, small_windows_module):
        windows = small_windows_module[:50]
        net, _ = train_driver(windows, TrainConfig(epochs=1, seed=1))
        # blow up a head so raw outputs exceed the ranges
        net.params["head_speed2.w"].data[:] = 1e6
        net.params["head_angle2.w"].data[:] = -1e6
        angle, speed = predict_batch(net, windows)
        assert np.all((core.SPEED_MIN <= speed) & (speed <= core.SPEED_MAX))
        assert np.all((core.ANGLE_MIN <= angle) & (angle <= core.ANGLE_MAX))

    def test_dimension_mismatch_rejected(self, trained):
        net, _ = trained
        bad = core.WindowSample(
            frames=np.zeros((3, 16)),  # wrong k
            past_angles=np.zeros(2),
            past_speeds=np.zeros(2),
            target_angle=0.0,
            target_speed=0.0,
            origin=("x", 2),
        )
        with pytest.raises(ValidationError):
            predict(net, bad)

    def test_no_double_normalization(self, trained, small_windows_module):
        # predict() must equal denormalize(raw head output) exactly
        net, _ = trained
        w = small_windows_module[7]
        data = windows_to_arrays([w], net.normalizer)
        out_a, out_s = driver_forward(net.params, net.arch, data["vis"], data["spd"], data["ang"])
        angle, speed = predict(net, w)
        assert angle == float(net.normalizer.denormalize(out_a.data[0, 0], "angle"))
        assert speed == float(net.normalizer.denormalize(out_s.data[0, 0], "speed"))

    def test_trained_on_noiseless_separable_problem_within_one_degree(self):
        # zero-noise world: the target angle is a clean linear readout of one
        # observation channel; training to convergence must nail the oracle
        rng = np.random.default_rng(3)
        windows = []
        for i in range(300):
            frames = rng.normal(0.0, 1.0, size=(5, 16))
            angle = 10.0 * frames[-1, 0]
            windows.append(
                core.WindowSample(
                    frames=frames,
                    past_angles=rng.normal(0.0, 10.0, size=4),
                    past_speeds=np.full(4, 50.0) + rng.normal(0.0, 1.0, size=4),
                    target_angle=angle,
                    target_speed=50.0 + float(rng.normal(0.0, 1.0)),
                    origin=("c", 4 + i),
                )
            )
        net, _ = train_driver(
            windows, TrainConfig(epochs=60, batch_size=32, seed=2, dropout_p=0.0)
        )
        pred_angle, _ = predict_batch(net, windows[:100])
        truth = np.array([w.target_angle for w in windows[:100]])
        assert float(np.mean(np.abs(pred_angle - truth))) < 1.0


class TestTraining:
    def test_lambda_zero_speed_head_gets_no_gradient(self, small_windows_module):
        windows = small_windows_module[:64]
        cfg = TrainConfig(epochs=1, seed=4, lam=0.0)
        normalizer = core.fit_normalizer(windows)
        arch = BackboneArch(obs_dim=16, k=4, dropout_p=cfg.dropout_p)
        rng = np.random.default_rng(0)
        params = init_driver_params(arch, rng)
        data = windows_to_arrays(windows, normalizer)
        from drivlab.diffcore import l2_loss

        out_a, out_s = driver_forward(
            params, arch, data["vis"], data["spd"], data["ang"], mode="train",
            rng=np.random.default_rng(1),
        )
        loss = l2_loss(out_a, data["tgt_a"])  # lam = 0 drops the speed term
        loss.backward()
        for name in params.names():
            grad = params[name].grad
            if name.startswith("head_speed"):
                assert grad is None or np.all(grad == 0.0)
            elif name.startswith("head_angle"):
                assert grad is not None and np.any(grad != 0.0)

    def test_one_step_touches_both_heads_and_all_tracks(self, small_windows_module):
        windows = small_windows_module[:64]
        net, _ = train_driver(windows, TrainConfig(epochs=1, batch_size=64, seed=5))
        fresh = init_driver_params(
            BackboneArch(obs_dim=16, k=4, dropout_p=0.1),
            np.random.default_rng(np.random.SeedSequence(5).spawn(3)[0]),
        )
        for prefix in ("head_angle1", "head_speed1", "vis", "spd", "ang"):
            moved = any(
                not np.array_equal(net.params[n].data, fresh[n].data)
                for n in net.params.names()
                if n.startswith(prefix)
            )
            assert moved, f"no update reached {prefix}"

    def test_seeded_determinism(self, small_windows_module):
        windows = small_windows_module[:200]
        h1 = train_driver(windows, TrainConfig(epochs=2, seed=6))[1]
        h2 = train_driver(windows, TrainConfig(epochs=2, seed=6))[1]
        assert h1 == h2

    def test_loss_decreases_on_subsample(self, small_windows_module):
        windows = small_windows_module[::10]
        _, history = train_driver(windows, TrainConfig(epochs=2, seed=7))
        assert history[-1]["train_loss"] < history[0]["train_loss"]

    @pytest.mark.filterwarnings("ignore:overflow:RuntimeWarning")
    @pytest.mark.filterwarnings("ignore:invalid value:RuntimeWarning")
    def test_non_finite_loss_aborts_with_diagnostics(self, small_windows_module):
        windows = small_windows_module[:40]
        cfg = TrainConfig(epochs=1, seed=8, lr=1e300)
        with pytest.raises(NumericalError, match=r"lr=1e\+300"):
            # first step explodes the params; second batch sees inf loss
            train_driver(windows, cfg)

    def test_empty_training_set(self):
        with pytest.raises(ValidationError):
            train_driver([], TrainConfig())

    def test_invalid_config(self):
        with pytest.raises(ValidationError):
            TrainConfig(lam=-1.0)


class TestEvalMae:
    def test_identity_predictions(self, trained, small_windows_module, monkeypatch):
        import drivlab.driver as driver_mod

        net, _ = trained
        windows = small_windows_module[:30]
        monkeypatch.setattr(
            driver_mod,
            "predict_batch",
            lambda n, ws: (
                np.array([w.target_angle for w in ws]),
                np.array([w.target_speed for w in ws]),
            ),
        )
        assert driver_mod.eval_mae(net, windows) == (0.0, 0.0)

    def test_single_window_angle_off_by_two(self, trained, monkeypatch):
        import drivlab.driver as driver_mod

        net, _ = trained
        w = _constant_windows(n=1)[0]
        monkeypatch.setattr(
            driver_mod,
            "predict_batch",
            lambda n, ws: (
                np.array([x.target_angle + 2.0 for x in ws]),
                np.array([x.target_speed for x in ws]),
            ),
        )
        assert driver_mod.eval_mae(net, [w]) == (0.0, 2.0)

    def test_baseline_is_mean_predictor(self, trained, small_windows_module):
        net, _ = trained
        windows = small_windows_module[:30]
        base_s, base_a = constant_mean_mae(net.normalizer, windows)
        true_s = np.array([w.target_speed for w in windows])
        true_a = np.array([w.target_angle for w in windows])
        assert base_s == pytest.approx(np.mean(np.abs(true_s - net.normalizer.mean_speed)))
        assert base_a == pytest.approx(np.mean(np.abs(true_a - net.normalizer.mean_angle)))


class TestDriverCheckpoint:
    def test_round_trip_bit_exact_predictions(self, trained, small_windows_module, tmp_path):
        net, _ = trained
        windows = small_windows_module[:20]
        before_a, before_s = predict_batch(net, windows)
        p1, p2 = tmp_path / "d1.ckpt", tmp_path / "d2.ckpt"
        save_driver(p1, net)
        loaded = load_driver(p1)
        save_driver(p2, loaded)
        assert p1.read_bytes() == p2.read_bytes()
        after_a, after_s = predict_batch(loaded, windows)
        assert np.max(np.abs(after_a - before_a)) <= 1e-15
        assert np.max(np.abs(after_s - before_s)) <= 1e-15
        assert loaded.trained_on == net.trained_on

    def test_kind_mismatch(self, trained, tmp_path):
        from drivlab.failure import load_hazard

        net, _ = trained
        path = tmp_path / "d.ckpt"
        save_driver(path, net)
        with pytest.raises(ValidationError, match="hazard"):
            load_hazard(path)
