"""Five-stage pipeline: gen -> train-driver -> label -> train-failure -> eval.

Every stage reads and writes plain files under one output directory, records
provenance (format version, pipeline seed, upstream digests), and is
idempotent for identical inputs and seeds. ``run_all`` chains the stages and
emits a deterministic report.json.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
import numpy as np

from . import core, evaluate, simgen
from .config import PipelineConfig, parse_budgets
from .driver import (
    DriverNet,
    TrainConfig,
    constant_mean_mae,
    eval_mae,
    load_driver,
    save_driver,
    train_driver,
)
from .errors import MissingArtifactError, ValidationError
from .failure import (
    CANONICAL_THRESHOLDS,
    FailureDataset,
    build_failure_dataset,
    load_hazard,
    read_labels_csv,
    save_hazard,
    train_failure,
    write_labels_csv,
)
from .evaluate import (
    GAIN_BUDGETS,
    PolicyScoreTrace,
    build_scenes,
    interval_curve,
    reduction_curve,
    safety_gain,
    score_learned,
    score_oracle,
    score_uncertainty,
    write_scores_csv,
)

log = logging.getLogger("drivlab.pipeline")

STAGES = ("gen", "split", "train-driver", "label", "train-failure", "eval", "report")

ART_EPISODES = "episodes.txt"
ART_SPLITS = "splits.tsv"
ART_DRIVER = "driver.ckpt"
ART_DRIVER_METRICS = "driver_metrics.json"
ART_REPORT = "report.json"


def art_labels(split: str, name: str) -> str:
    return f"labels_{split}_{name}.csv"


def art_hazard(name: str) -> str:
    return f"hazard_{name}.ckpt"


def art_scores(policy: str, name: str | None = None) -> str:
    return f"scores_{policy}.csv" if name is None else f"scores_{policy}_{name}.csv"


def art_eval(name: str) -> str:
    return f"eval_{name}.json"


def file_digest(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def derived_seed(base: int, tag: str) -> int:
    """Stable 63-bit sub-seed per pipeline concern."""
    digest = hashlib.sha256(f"{base}:{tag}".encode()).digest()
    return int.from_bytes(digest[:8], "big") >> 1


def _require(out_dir, *names) -> None:
    for name in names:
        if not os.path.exists(os.path.join(out_dir, name)):
            raise MissingArtifactError(f"missing artifact: {name} (run earlier stages first)")


def _write_json(path, obj) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _load_episodes(out_dir, cache: dict | None):
    path = os.path.join(out_dir, ART_EPISODES)
    if cache is not None and "episodes" in cache:
        return cache["episodes"]
    episodes = core.read_episodes(path)
    if cache is not None:
        cache["episodes"] = episodes
    return episodes


# ---------------------------------------------------------------------------
# Stages
# ---------------------------------------------------------------------------


def stage_gen(cfg: PipelineConfig, out_dir, cache: dict | None = None) -> str:
    episodes = simgen.generate_dataset(
        cfg.world_config(), cfg.episodes, base_seed=derived_seed(cfg.seed, "gen")
    )
    path = os.path.join(out_dir, ART_EPISODES)
    core.write_episodes(path, episodes, provenance={"seed": str(cfg.seed)})
    if cache is not None:
        cache["episodes"] = episodes  # in-memory episodes keep difficulty traces
    log.info("gen: wrote %d episodes to %s", len(episodes), path)
    return path


def stage_split(cfg: PipelineConfig, out_dir, cache: dict | None = None) -> str:
    _require(out_dir, ART_EPISODES)
    episodes = _load_episodes(out_dir, cache)
    splits = core.split_dataset(episodes, seed=derived_seed(cfg.seed, "split"))
    path = os.path.join(out_dir, ART_SPLITS)
    core.write_split_manifest(
        path,
        splits,
        provenance={
            "seed": str(cfg.seed),
            "episodes": file_digest(os.path.join(out_dir, ART_EPISODES)),
        },
    )
    if cache is not None:
        cache["splits"] = splits
    log.info("split: %d/%d/%d episodes", len(splits.d1), len(splits.d2), len(splits.d3))
    return path


def _split_episodes(out_dir, cache, split_name):
    episodes = _load_episodes(out_dir, cache)
    if cache is not None and "splits" in cache:
        splits = cache["splits"]
    else:
        splits = core.read_split_manifest(os.path.join(out_dir, ART_SPLITS))
        if cache is not None:
            cache["splits"] = splits
    ids = set(splits.ids_of(split_name))
    return [ep for ep in episodes if ep.episode_id in ids]


def _windows_of(episodes, k):
    windows = []
    for ep in sorted(episodes, key=lambda e: e.episode_id):
        windows.extend(core.make_windows(ep, k=k, stride=1))
    return windows


def stage_train_driver(cfg: PipelineConfig, out_dir, cache: dict | None = None) -> str:
    _require(out_dir, ART_EPISODES, ART_SPLITS)
    d1 = _split_episodes(out_dir, cache, "D1")
    d3 = _split_episodes(out_dir, cache, "D3")
    train_windows = _windows_of(d1, cfg.k)
    eval_windows = _windows_of(d3, cfg.k)
    tc = TrainConfig(
        lr=cfg.driver_lr,
        epochs=cfg.driver_epochs,
        batch_size=cfg.driver_batch_size,
        lam=cfg.loss_balance,
        seed=derived_seed(cfg.seed, "driver"),
        dropout_p=cfg.driver_dropout,
    )
    val_windows = eval_windows[:2048]  # per-epoch diagnostic only, never model selection
    net, _history = train_driver(train_windows, tc, val_windows=val_windows, trained_on="D1")
    net.provenance = {
        "pipeline_seed": str(cfg.seed),
        "episodes": file_digest(os.path.join(out_dir, ART_EPISODES)),
        "splits": file_digest(os.path.join(out_dir, ART_SPLITS)),
    }
    path = os.path.join(out_dir, ART_DRIVER)
    save_driver(path, net)
    mae_speed, mae_angle = eval_mae(net, eval_windows)
    base_speed, base_angle = constant_mean_mae(net.normalizer, eval_windows)
    metrics = {
        "format": "drivlab-driver-metrics v1",
        "mae_speed": mae_speed,
        "mae_angle": mae_angle,
        "baseline_mae_speed": base_speed,
        "baseline_mae_angle": base_angle,
        "epochs": cfg.driver_epochs,
        "seed": cfg.seed,
        "eval_split": "D3",
        "n_train_windows": len(train_windows),
        "n_eval_windows": len(eval_windows),
    }
    _write_json(os.path.join(out_dir, ART_DRIVER_METRICS), metrics)
    if cache is not None:
        cache["driver"] = net
    log.info(
        "train-driver: mae_speed=%.3f (baseline %.3f), mae_angle=%.3f (baseline %.3f)",
        mae_speed, base_speed, mae_angle, base_angle,
    )
    return path


def _get_driver(out_dir, cache) -> DriverNet:
    if cache is not None and "driver" in cache:
        return cache["driver"]
    net = load_driver(os.path.join(out_dir, ART_DRIVER))
    if cache is not None:
        cache["driver"] = net
    return net


def _label_one(cfg, out_dir, cache, split_name, th_name) -> FailureDataset:
    net = _get_driver(out_dir, cache)
    episodes = _split_episodes(out_dir, cache, split_name)
    ds = build_failure_dataset(
        net, episodes, split=split_name, th=CANONICAL_THRESHOLDS[th_name], m=cfg.m
    )
    path = os.path.join(out_dir, art_labels(split_name, th_name))
    write_labels_csv(
        path,
        ds,
        provenance={
            "seed": str(cfg.seed),
            "driver": file_digest(os.path.join(out_dir, ART_DRIVER)),
        },
    )
    if cache is not None:
        cache[("labels", split_name, th_name)] = ds
    return ds


def stage_label(cfg: PipelineConfig, out_dir, cache: dict | None = None) -> list[str]:
    _require(out_dir, ART_EPISODES, ART_SPLITS, ART_DRIVER)
    paths = []
    for th_name in cfg.threshold_names():
        for split_name in ("D2", "D3"):
            _label_one(cfg, out_dir, cache, split_name, th_name)
            paths.append(os.path.join(out_dir, art_labels(split_name, th_name)))
    return paths


def _get_labels(cfg, out_dir, cache, split_name, th_name) -> FailureDataset:
    key = ("labels", split_name, th_name)
    if cache is not None and key in cache:
        return cache[key]
    path = os.path.join(out_dir, art_labels(split_name, th_name))
    if not os.path.exists(path):
        raise MissingArtifactError(f"missing artifact: {os.path.basename(path)}")
    rows, meta = read_labels_csv(path)
    episodes = core.episodes_by_id(_split_episodes(out_dir, cache, split_name))
    positions = [(r.episode_id, r.t) for r in rows]
    windows = evaluate.windows_at(episodes, positions, cfg.k)
    ds = FailureDataset(
        rows=rows,
        windows=windows,
        labels=np.array([r.g_horizon for r in rows], dtype=np.int64),
        thresholds=CANONICAL_THRESHOLDS[th_name],
        m=int(meta.get("m", cfg.m)),
        split=split_name,
        n_dropped=int(meta.get("dropped", 0)),
    )
    if cache is not None:
        cache[key] = ds
    return ds


def stage_train_failure(cfg: PipelineConfig, out_dir, cache: dict | None = None) -> list[str]:
    _require(out_dir, ART_EPISODES, ART_SPLITS, ART_DRIVER)
    driver_net = _get_driver(out_dir, cache)
    paths = []
    for th_name in cfg.threshold_names():
        ds = _get_labels(cfg, out_dir, cache, "D2", th_name)
        if ds.split == driver_net.trained_on:
            raise ValidationError("hazard training labels derive from the driver's split")
        tc = TrainConfig(
            lr=cfg.hazard_lr,
            epochs=cfg.hazard_epochs,
            batch_size=cfg.hazard_batch_size,
            seed=derived_seed(cfg.seed, f"hazard-{th_name}"),
            dropout_p=cfg.hazard_dropout,
        )
        net, _history = train_failure(
            ds.windows, ds.labels, tc, normalizer=driver_net.normalizer,
            thresholds=ds.thresholds, m=ds.m, trained_on="D2",
        )
        net.provenance = {
            "pipeline_seed": str(cfg.seed),
            "labels": file_digest(os.path.join(out_dir, art_labels("D2", th_name))),
            "driver": file_digest(os.path.join(out_dir, ART_DRIVER)),
        }
        path = os.path.join(out_dir, art_hazard(th_name))
        save_hazard(path, net)
        if cache is not None:
            cache[("hazard", th_name)] = net
        paths.append(path)
    return paths


def _get_hazard(out_dir, cache, th_name):
    key = ("hazard", th_name)
    if cache is not None and key in cache:
        return cache[key]
    net = load_hazard(os.path.join(out_dir, art_hazard(th_name)))
    if cache is not None:
        cache[key] = net
    return net


def stage_eval(cfg: PipelineConfig, out_dir, cache: dict | None = None) -> list[str]:
    _require(out_dir, ART_EPISODES, ART_SPLITS, ART_DRIVER)
    budgets = parse_budgets(cfg.budgets)
    driver_net = _get_driver(out_dir, cache)
    episodes = core.episodes_by_id(_split_episodes(out_dir, cache, "D3"))
    paths = []
    unc_trace: PolicyScoreTrace | None = None
    for th_name in cfg.threshold_names():
        hazard_net = _get_hazard(out_dir, cache, th_name)
        if hazard_net.trained_on == "D3":
            raise ValidationError("hazard net was trained on the evaluation split")
        ds = _get_labels(cfg, out_dir, cache, "D3", th_name)
        scenes = build_scenes(ds.rows, ds.m)
        learned = score_learned(hazard_net, episodes, scenes)
        if unc_trace is None:  # driver-based, threshold-independent
            unc_trace = score_uncertainty(
                driver_net, episodes, scenes,
                n_samples=cfg.mc_samples, seed=derived_seed(cfg.seed, "uncertainty"),
            )
            write_scores_csv(
                os.path.join(out_dir, art_scores("uncertainty")), unc_trace,
                provenance={
                    "split": "D3", "seed": str(cfg.seed),
                    "driver": file_digest(os.path.join(out_dir, ART_DRIVER)),
                },
            )
        write_scores_csv(
            os.path.join(out_dir, art_scores("learned", th_name)), learned,
            provenance={
                "split": "D3", "seed": str(cfg.seed),
                "hazard": file_digest(os.path.join(out_dir, art_hazard(th_name))),
            },
        )
        oracle = score_oracle(ds.rows, scenes, ds.m)
        th = ds.thresholds
        curves = {
            "learned": reduction_curve(ds.rows, learned, budgets, ds.m, th, cfg.count_unit),
            "uncertainty": reduction_curve(ds.rows, unc_trace, budgets, ds.m, th, cfg.count_unit),
            "interval": interval_curve(ds.rows, scenes, budgets, ds.m, th, cfg.count_unit),
            "oracle": reduction_curve(ds.rows, oracle, budgets, ds.m, th, cfg.count_unit),
        }
        gain_budgets = [b for b in GAIN_BUDGETS if any(abs(b - x) < 1e-9 for x in budgets)]
        gains = {}
        for b in gain_budgets:
            g = safety_gain(curves["learned"], curves["interval"], b)
            # undefined when the baseline silenced nothing
            gains[f"{round(100 * b)}"] = g if g is not None else "no-failures"
        row_by_key = {(r.episode_id, r.t): r for r in ds.rows}
        scene_labels = np.array([row_by_key[s].g_horizon for s in scenes], dtype=np.int64)
        learned_scores = np.array([s for _, _, s in learned.entries])
        report = {
            "format": "drivlab-eval v1",
            "thresholds": {"t_angle": th.t_angle, "t_speed": th.t_speed, "name": th_name},
            "m": ds.m,
            "count_unit": cfg.count_unit,
            "n_rows": len(ds.rows),
            "n_scenes": len(scenes),
            "hazard_fraction_windows": ds.hazard_fraction,
            "hazard_fraction_scenes": float(scene_labels.mean()) if len(scenes) else 0.0,
            "auc_learned": evaluate.auc(learned_scores, scene_labels),
            "curves": {
                name: [{"budget": b, "reduction": r} for b, r in res.points]
                for name, res in curves.items()
            },
            "gains_vs_interval_pct": gains,
            "seed": cfg.seed,
        }
        path = os.path.join(out_dir, art_eval(th_name))
        _write_json(path, report)
        paths.append(path)
        log.info(
            "eval[%s]: auc=%s, gain@25%%=%s", th_name,
            report["auc_learned"], gains.get("25"),
        )
    return paths


def stage_report(cfg: PipelineConfig, out_dir, cache: dict | None = None) -> str:
    _require(out_dir, ART_DRIVER_METRICS)
    with open(os.path.join(out_dir, ART_DRIVER_METRICS), "r", encoding="utf-8") as fh:
        driver_metrics = json.load(fh)
    per_threshold = {}
    for th_name in cfg.threshold_names():
        path = os.path.join(out_dir, art_eval(th_name))
        if not os.path.exists(path):
            raise MissingArtifactError(f"missing artifact: {art_eval(th_name)}")
        with open(path, "r", encoding="utf-8") as fh:
            per_threshold[th_name] = json.load(fh)
    artifacts = {}
    for name in sorted(os.listdir(out_dir)):
        if name == ART_REPORT or not os.path.isfile(os.path.join(out_dir, name)):
            continue
        artifacts[name] = file_digest(os.path.join(out_dir, name))
    report = {
        "format": "drivlab-report v1",
        "seed": cfg.seed,
        "config": cfg.to_mapping(),
        "driver": driver_metrics,
        "thresholds": per_threshold,
        "artifacts": artifacts,
    }
    path = os.path.join(out_dir, ART_REPORT)
    _write_json(path, report)
    return path


def run_stage(name: str, cfg: PipelineConfig, out_dir, cache: dict | None = None):
    stages = {
        "gen": stage_gen,
        "split": stage_split,
        "train-driver": stage_train_driver,
        "label": stage_label,
        "train-failure": stage_train_failure,
        "eval": stage_eval,
        "report": stage_report,
    }
    if name not in stages:
        raise ValidationError(f"unknown stage {name!r}; stages: {', '.join(STAGES)}")
    return stages[name](cfg, out_dir, cache)


def run_all(cfg: PipelineConfig, out_dir) -> str:
    os.makedirs(out_dir, exist_ok=True)
    cache: dict = {}
    for name in STAGES:
        log.info("stage %s", name)
        run_stage(name, cfg, out_dir, cache)
    return os.path.join(out_dir, ART_REPORT)
