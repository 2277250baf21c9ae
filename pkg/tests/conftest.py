import pytest

from drivlab import core, simgen
from drivlab.driver import TrainConfig, train_driver
from drivlab.failure import CANONICAL_THRESHOLDS, build_failure_dataset, train_failure


def small_world(**overrides) -> simgen.WorldConfig:
    kwargs = dict(episode_length=120, seed=0)
    kwargs.update(overrides)
    return simgen.WorldConfig(**kwargs)


@pytest.fixture(scope="session")
def small_episodes():
    return simgen.generate_dataset(small_world(), 30, base_seed=500)


@pytest.fixture(scope="session")
def small_windows(small_episodes):
    out = []
    for ep in small_episodes[:6]:
        out.extend(core.make_windows(ep, k=4))
    return out


@pytest.fixture(scope="session")
def tiny_pipeline(small_episodes):
    """One in-memory pipeline pass on a small world, shared by integration
    tests: driver on D1, labels + hazard net at the middle threshold, labels
    on D3 for evaluation."""
    splits = core.split_dataset(small_episodes, seed=11)
    by_id = core.episodes_by_id(small_episodes)
    d1 = [by_id[e] for e in splits.d1]
    d2 = [by_id[e] for e in splits.d2]
    d3 = [by_id[e] for e in splits.d3]
    train_w = [w for ep in sorted(d1, key=lambda e: e.episode_id) for w in core.make_windows(ep, 4)]
    net, _ = train_driver(train_w, TrainConfig(epochs=3, seed=21), trained_on="D1")
    th = CANONICAL_THRESHOLDS["middle"]
    ds_train = build_failure_dataset(net, d2, split="D2", th=th, m=8)
    ds_eval = build_failure_dataset(net, d3, split="D3", th=th, m=8)
    hazard, _ = train_failure(
        ds_train.windows, ds_train.labels, TrainConfig(epochs=3, seed=31),
        normalizer=net.normalizer, thresholds=th, m=8, trained_on="D2",
    )
    return {
        "episodes": small_episodes,
        "splits": splits,
        "driver": net,
        "hazard": hazard,
        "train_labels": ds_train,
        "eval_labels": ds_eval,
        "d1": d1, "d2": d2, "d3": d3,
    }
