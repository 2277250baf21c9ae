import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from drivlab import core, failure
from drivlab.driver import TrainConfig
from drivlab.errors import SplitLeakageError, ValidationError
from drivlab.failure import (
    CANONICAL_THRESHOLDS,
    Thresholds,
    build_failure_dataset,
    label_horizon,
    label_step,
    predict_hazard_batch,
    read_labels_csv,
    sgn,
    train_failure,
    write_labels_csv,
)


class TestSgn:
    def test_zero_maps_to_one(self):
        assert sgn(0.0) == 1

    def test_negative(self):
        assert sgn(-0.001) == 0

    def test_positive(self):
        assert sgn(3.7) == 1


class TestLabelStep:
    TH = Thresholds(5.0, 2.0)

    def test_angle_failure_only(self):
        assert label_step((6.0, 30.0), (0.0, 30.0), self.TH) == (1, 0, 1)

    def test_no_deviation(self):
        assert label_step((10.0, 50.0), (10.0, 50.0), self.TH) == (0, 0, 0)

    def test_boundary_equality_is_failure(self):
        # deviation exactly at the threshold fails, forced by sgn(0) = 1
        assert label_step((5.0, 0.0), (0.0, 0.0), self.TH)[0] == 1
        assert label_step((0.0, 2.0), (0.0, 0.0), self.TH)[1] == 1

    def test_or_combination(self):
        assert label_step((6.0, 10.0), (0.0, 0.0), self.TH) == (1, 1, 1)

    def test_thresholds_must_be_positive(self):
        with pytest.raises(ValidationError):
            Thresholds(0.0, 1.0)


class TestLabelHorizon:
    def test_example(self):
        assert label_horizon([0, 0, 1, 0], 0, 3) == 1

    def test_all_zero(self):
        assert label_horizon([0, 0, 0, 0], 0, 3) == 0

    def test_m_zero_equals_step(self):
        assert label_horizon([0, 1, 0], 1, 0) == 1
        assert label_horizon([0, 1, 0], 2, 0) == 0

    def test_out_of_bounds(self):
        with pytest.raises(ValidationError):
            label_horizon([0, 1], 1, 1)

    @given(
        g=st.lists(st.integers(0, 1), min_size=1, max_size=40),
        t=st.integers(0, 39),
        m=st.integers(0, 12),
    )
    @settings(max_examples=300, deadline=None)
    def test_matches_brute_force_any(self, g, t, m):
        if t + m >= len(g):
            with pytest.raises(ValidationError):
                label_horizon(g, t, m)
        else:
            assert label_horizon(g, t, m) == (1 if any(g[t : t + m + 1]) else 0)

    @given(g=st.lists(st.integers(0, 1), min_size=14, max_size=30), t=st.integers(0, 3))
    @settings(max_examples=100, deadline=None)
    def test_monotone_in_m(self, g, t):
        values = [label_horizon(g, t, m) for m in range(0, 10)]
        assert all(a <= b for a, b in zip(values, values[1:]))


class _StubDriver:
    """predict_batch stand-in with controllable outputs."""

    def __init__(self, mode):
        self.mode = mode
        self.trained_on = "D1"
        from drivlab.driver import BackboneArch

        self.arch = BackboneArch(obs_dim=16, k=4)


class TestBuildFailureDataset:
    def _episodes(self, n=3, length=40):
        from conftest import small_world
        from drivlab import simgen

        return simgen.generate_dataset(small_world(episode_length=length), n, base_seed=40)

    def test_leakage_refused(self, tiny_pipeline):
        net = tiny_pipeline["driver"]
        with pytest.raises(SplitLeakageError, match="trained on it"):
            build_failure_dataset(net, tiny_pipeline["d1"], split="D1",
                                  th=CANONICAL_THRESHOLDS["middle"])

    def test_leakage_override(self, tiny_pipeline):
        net = tiny_pipeline["driver"]
        ds = build_failure_dataset(
            net, tiny_pipeline["d1"][:2], split="D1",
            th=CANONICAL_THRESHOLDS["middle"], allow_leakage=True,
        )
        assert len(ds.rows) > 0

    def test_perfect_oracle_all_safe(self, tiny_pipeline, monkeypatch):
        net = tiny_pipeline["driver"]

        def perfect(net_, windows):
            return (
                np.array([w.target_angle for w in windows]),
                np.array([w.target_speed for w in windows]),
            )

        monkeypatch.setattr(failure, "predict_batch", perfect)
        ds = build_failure_dataset(net, self._episodes(), split="D2",
                                   th=CANONICAL_THRESHOLDS["middle"])
        assert len(ds.rows) > 0
        assert ds.hazard_fraction == 0.0
        assert all(r.g == 0 and r.g_horizon == 0 for r in ds.rows)

    def test_constant_far_predictor_all_hazardous(self, tiny_pipeline, monkeypatch):
        net = tiny_pipeline["driver"]

        def far(net_, windows):
            n = len(windows)
            return np.full(n, 700.0), np.full(n, 0.0)

        monkeypatch.setattr(failure, "predict_batch", far)
        ds = build_failure_dataset(net, self._episodes(), split="D2",
                                   th=CANONICAL_THRESHOLDS["middle"])
        assert ds.hazard_fraction == 1.0

    def test_drop_count_and_row_range(self, tiny_pipeline):
        net = tiny_pipeline["driver"]
        eps = self._episodes(n=2, length=30)
        m = 8
        ds = build_failure_dataset(net, eps, split="D2", th=CANONICAL_THRESHOLDS["middle"], m=m)
        # windows exist at t in [4, 29]; horizon rows stop at t = 29 - m
        assert ds.n_dropped == 2 * m
        for r in ds.rows:
            assert 4 <= r.t <= 29 - m

    def test_g_consistency(self, tiny_pipeline):
        ds = tiny_pipeline["eval_labels"]
        for r in ds.rows:
            assert r.g == (r.g_a | r.g_s)
            assert r.g_horizon >= r.g


class TestThresholdNesting:
    def test_hazard_sets_nest_across_canonical_triples(self, tiny_pipeline):
        net = tiny_pipeline["driver"]
        d3 = tiny_pipeline["d3"]
        sets = {}
        for name in ("tight", "middle", "loose"):
            ds = build_failure_dataset(net, d3, split="D3", th=CANONICAL_THRESHOLDS[name])
            sets[name] = {
                "step": {(r.episode_id, r.t) for r in ds.rows if r.g == 1},
                "horizon": {(r.episode_id, r.t) for r in ds.rows if r.g_horizon == 1},
            }
        for kind in ("step", "horizon"):
            assert sets["loose"][kind] <= sets["middle"][kind] <= sets["tight"][kind]


class TestLabelsCsv:
    def test_round_trip(self, tiny_pipeline, tmp_path):
        ds = tiny_pipeline["eval_labels"]
        path = tmp_path / "labels.csv"
        write_labels_csv(path, ds, provenance={"seed": "0"})
        rows, meta = read_labels_csv(path)
        assert meta["split"] == "D3"
        assert meta["t_angle"] == "7.0"
        assert len(rows) == len(ds.rows)
        assert rows[0] == ds.rows[0]
        assert rows[-1] == ds.rows[-1]

    def test_header_version_check(self, tmp_path):
        path = tmp_path / "labels.csv"
        path.write_text("#drivlab-labels v7\n")
        from drivlab.errors import ArtifactVersionError

        with pytest.raises(ArtifactVersionError):
            read_labels_csv(path)


def _planted_windows(n, seed, d=16, k=4):
    # hazard label is exactly "channel 3 of the current frame is positive"
    rng = np.random.default_rng(seed)
    windows, labels = [], []
    for i in range(n):
        frames = rng.normal(0.0, 1.0, size=(k + 1, d))
        windows.append(
            core.WindowSample(
                frames=frames,
                past_angles=rng.normal(0.0, 5.0, size=k),
                past_speeds=np.abs(rng.normal(50.0, 5.0, size=k)),
                target_angle=0.0,
                target_speed=50.0,
                origin=("p", k + i),
            )
        )
        labels.append(1 if frames[-1, 3] > 0 else 0)
    return windows, np.array(labels, dtype=np.int64)


class TestHazardNet:
    def test_single_class_rejected(self, tiny_pipeline):
        windows, _ = _planted_windows(20, seed=0)
        norm = core.fit_normalizer(windows)
        with pytest.raises(ValidationError, match="degenerate label distribution"):
            train_failure(
                windows, np.zeros(20, dtype=np.int64), TrainConfig(epochs=1, seed=0),
                normalizer=norm, thresholds=CANONICAL_THRESHOLDS["middle"],
            )

    def test_uniform_logits_give_half_probability(self):
        from drivlab.diffcore import Tensor, softmax

        p = softmax(Tensor(np.zeros((1, 2))))
        assert p.data[0, 1] == pytest.approx(0.5, abs=1e-15)

    def test_probabilities_valid(self, tiny_pipeline):
        net = tiny_pipeline["hazard"]
        ds = tiny_pipeline["eval_labels"]
        probs = predict_hazard_batch(net, ds.windows[:50])
        assert np.all((0.0 <= probs) & (probs <= 1.0))

    def test_class_probabilities_sum_to_one(self, tiny_pipeline):
        from drivlab.diffcore import softmax, Tensor
        from drivlab.driver import windows_to_arrays
        from drivlab.failure import hazard_forward

        net = tiny_pipeline["hazard"]
        ds = tiny_pipeline["eval_labels"]
        data = windows_to_arrays(ds.windows[:40], net.normalizer)
        logits = hazard_forward(net.params, net.arch, data["vis"], data["spd"], data["ang"])
        probs = softmax(logits).data
        assert np.all(np.abs(probs.sum(axis=1) - 1.0) <= 1e-12)

    def test_planted_signal_reaches_high_auc(self):
        from drivlab.evaluate import auc

        train_w, train_y = _planted_windows(600, seed=1)
        test_w, test_y = _planted_windows(300, seed=2)
        norm = core.fit_normalizer(train_w)
        net, _ = train_failure(
            train_w, train_y, TrainConfig(epochs=14, seed=3, dropout_p=0.0),
            normalizer=norm, thresholds=CANONICAL_THRESHOLDS["middle"],
        )
        probs = predict_hazard_batch(net, test_w)
        assert auc(probs, test_y) >= 0.95
