"""End-to-end driving model: shared per-frame encoder, three parallel
recurrent tracks (frames, past speed, past angle), fused regression heads.

The per-frame encoder is a 2-layer MLP standing in for a visual front-end at
desk scale; topology otherwise mirrors the three-track recurrent design.
Targets are trained in normalized space; predictions are denormalized and
clipped to the legal CAN ranges.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .core import (
    ANGLE_MAX,
    ANGLE_MIN,
    DEFAULT_K,
    DEFAULT_OBS_DIM,
    SPEED_MAX,
    SPEED_MIN,
    Normalizer,
    WindowSample,
    fit_normalizer,
)
from .diffcore import (
    ParameterStore,
    Tensor,
    adam_step,
    add,
    concat,
    dropout,
    init_linear,
    init_lstm,
    l2_loss,
    linear,
    lstm_run,
    narrow,
    relu,
    scale,
)
from .diffcore.checkpoint import load_checkpoint, save_checkpoint
from .errors import NumericalError, ValidationError

log = logging.getLogger("drivlab.driver")

PREDICT_BATCH = 2048


@dataclass(frozen=True)
class BackboneArch:
    """Shape of the shared trunk used by both the driver and hazard nets."""

    obs_dim: int = DEFAULT_OBS_DIM
    k: int = DEFAULT_K
    enc_hidden: int = 64
    enc_out: int = 32
    vis_hidden: int = 32
    sig_hidden: int = 8
    head_hidden: int = 32
    dropout_p: float = 0.1

    @property
    def fused_dim(self) -> int:
        return self.vis_hidden + 2 * self.sig_hidden

    def meta(self) -> dict[str, str]:
        return {
            "obs_dim": str(self.obs_dim),
            "k": str(self.k),
            "enc_hidden": str(self.enc_hidden),
            "enc_out": str(self.enc_out),
            "vis_hidden": str(self.vis_hidden),
            "sig_hidden": str(self.sig_hidden),
            "head_hidden": str(self.head_hidden),
            "dropout_p": repr(float(self.dropout_p)),
        }

    @classmethod
    def from_meta(cls, meta: dict[str, str]) -> "BackboneArch":
        return cls(
            obs_dim=int(meta["obs_dim"]),
            k=int(meta["k"]),
            enc_hidden=int(meta["enc_hidden"]),
            enc_out=int(meta["enc_out"]),
            vis_hidden=int(meta["vis_hidden"]),
            sig_hidden=int(meta["sig_hidden"]),
            head_hidden=int(meta["head_hidden"]),
            dropout_p=float(meta["dropout_p"]),
        )


@dataclass
class TrainConfig:
    lr: float = 1e-3
    epochs: int = 10
    batch_size: int = 32
    lam: float = 1.0  # balance between the angle loss and the speed loss
    seed: int = 0
    dropout_p: float = 0.1

    def __post_init__(self) -> None:
        if self.lam < 0:
            raise ValidationError(f"loss balance must be >= 0, got {self.lam}")
        if self.epochs < 1 or self.batch_size < 1 or self.lr <= 0:
            raise ValidationError("epochs and batch_size must be >= 1, lr > 0")


@dataclass
class DriverNet:
    """Trained driving regressor bundle: parameters + the normalizer fitted on
    its training split, plus provenance for the split-leakage guard.

    ``provenance`` carries upstream artifact digests into the checkpoint and
    survives load/save round trips byte-exactly."""

    arch: BackboneArch
    params: ParameterStore
    normalizer: Normalizer
    trained_on: str
    seed: int
    provenance: dict[str, str] = field(default_factory=dict)


def init_backbone(store: ParameterStore, arch: BackboneArch, rng: np.random.Generator) -> None:
    init_linear(store, "enc1", arch.obs_dim, arch.enc_hidden, rng)
    init_linear(store, "enc2", arch.enc_hidden, arch.enc_out, rng)
    init_lstm(store, "vis", arch.enc_out, arch.vis_hidden, rng)
    init_lstm(store, "spd", 1, arch.sig_hidden, rng)
    init_lstm(store, "ang", 1, arch.sig_hidden, rng)


def init_driver_params(arch: BackboneArch, rng: np.random.Generator) -> ParameterStore:
    store = ParameterStore()
    init_backbone(store, arch, rng)
    for prefix in ("head_angle", "head_speed"):
        init_linear(store, f"{prefix}1", arch.fused_dim, arch.head_hidden, rng)
        init_linear(store, f"{prefix}2", arch.head_hidden, 1, rng)
    return store


def backbone_forward(
    store: ParameterStore,
    arch: BackboneArch,
    vis: np.ndarray,  # (B, k+1, obs_dim), normalized
    spd: np.ndarray,  # (B, k), normalized
    ang: np.ndarray,  # (B, k), normalized
    mode: str,
    rng: np.random.Generator | None = None,
) -> Tensor:
    batch, steps, d = vis.shape
    if steps != arch.k + 1 or d != arch.obs_dim:
        raise ValidationError(
            f"window shape ({steps} frames, obs dim {d}) does not match net "
            f"(k={arch.k}, obs_dim={arch.obs_dim})"
        )
    if spd.shape != (batch, arch.k) or ang.shape != (batch, arch.k):
        raise ValidationError("past speed/angle lengths do not match k")
    # step-major layout so the shared encoder runs once over all frames
    flat = Tensor(np.ascontiguousarray(vis.transpose(1, 0, 2)).reshape(steps * batch, d))
    enc = relu(linear(store, "enc1", flat))
    enc = relu(linear(store, "enc2", enc))
    frame_steps = [narrow(enc, 0, i * batch, (i + 1) * batch) for i in range(steps)]
    h_vis = lstm_run(store, "vis", frame_steps, arch.vis_hidden)
    h_spd = lstm_run(store, "spd", [Tensor(spd[:, i : i + 1]) for i in range(arch.k)], arch.sig_hidden)
    h_ang = lstm_run(store, "ang", [Tensor(ang[:, i : i + 1]) for i in range(arch.k)], arch.sig_hidden)
    fused = concat([h_vis, h_spd, h_ang], axis=1)
    return dropout(fused, arch.dropout_p, mode, rng)


def head_forward(
    store: ParameterStore,
    arch: BackboneArch,
    prefix: str,
    fused: Tensor,
    mode: str,
    rng: np.random.Generator | None = None,
) -> Tensor:
    a = relu(linear(store, f"{prefix}1", fused))
    a = dropout(a, arch.dropout_p, mode, rng)
    return linear(store, f"{prefix}2", a)


def driver_forward(
    store: ParameterStore,
    arch: BackboneArch,
    vis: np.ndarray,
    spd: np.ndarray,
    ang: np.ndarray,
    mode: str = "eval",
    rng: np.random.Generator | None = None,
) -> tuple[Tensor, Tensor]:
    fused = backbone_forward(store, arch, vis, spd, ang, mode, rng)
    out_a = head_forward(store, arch, "head_angle", fused, mode, rng)
    out_s = head_forward(store, arch, "head_speed", fused, mode, rng)
    return out_a, out_s


def windows_to_arrays(
    windows: Sequence[WindowSample], normalizer: Normalizer
) -> dict[str, np.ndarray]:
    vis = normalizer.normalize(np.stack([w.frames for w in windows]), "obs")
    spd = normalizer.normalize(np.stack([w.past_speeds for w in windows]), "speed")
    ang = normalizer.normalize(np.stack([w.past_angles for w in windows]), "angle")
    tgt_s = normalizer.normalize(np.array([[w.target_speed] for w in windows]), "speed")
    tgt_a = normalizer.normalize(np.array([[w.target_angle] for w in windows]), "angle")
    return {"vis": vis, "spd": spd, "ang": ang, "tgt_a": tgt_a, "tgt_s": tgt_s}


def train_driver(
    windows: Sequence[WindowSample],
    cfg: TrainConfig,
    val_windows: Sequence[WindowSample] | None = None,
    trained_on: str = "D1",
) -> tuple[DriverNet, list[dict[str, float]]]:
    """Minimize l2(angle) + lam * l2(speed) over normalized targets with Adam.

    Deterministic for a fixed cfg.seed: init, shuffling and dropout all draw
    from seed-derived streams. Returns the trained bundle plus per-epoch
    train (and optional validation) losses.
    """
    if not windows:
        raise ValidationError("empty training set")
    normalizer = fit_normalizer(windows)
    arch = BackboneArch(
        obs_dim=windows[0].frames.shape[1], k=windows[0].k, dropout_p=cfg.dropout_p
    )
    init_rng, shuffle_rng, drop_rng = (
        np.random.default_rng(s) for s in np.random.SeedSequence(cfg.seed).spawn(3)
    )
    params = init_driver_params(arch, init_rng)
    net = DriverNet(arch=arch, params=params, normalizer=normalizer, trained_on=trained_on, seed=cfg.seed)

    data = windows_to_arrays(windows, normalizer)
    val_data = windows_to_arrays(val_windows, normalizer) if val_windows else None
    n = len(windows)
    history: list[dict[str, float]] = []
    for epoch in range(cfg.epochs):
        order = shuffle_rng.permutation(n)
        total, batches = 0.0, 0
        for start in range(0, n, cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            try:
                out_a, out_s = driver_forward(
                    params, arch, data["vis"][idx], data["spd"][idx], data["ang"][idx],
                    mode="train", rng=drop_rng,
                )
                loss = l2_loss(out_a, data["tgt_a"][idx])
                if cfg.lam > 0:
                    loss = add(loss, scale(l2_loss(out_s, data["tgt_s"][idx]), cfg.lam))
            except NumericalError as exc:
                raise NumericalError(
                    f"{exc} (lr={cfg.lr}, epoch={epoch}, batch={batches})"
                ) from exc
            loss.backward()
            adam_step(params, cfg.lr)
            total += float(loss.data)
            batches += 1
        entry = {"epoch": float(epoch), "train_loss": total / batches}
        if val_data is not None:
            entry["val_loss"] = _eval_loss(net, val_data, cfg.lam)
        history.append(entry)
        log.info(
            "driver epoch %d: train_loss=%.6f%s",
            epoch,
            entry["train_loss"],
            f" val_loss={entry['val_loss']:.6f}" if "val_loss" in entry else "",
        )
    return net, history


def _eval_loss(net: DriverNet, data: dict[str, np.ndarray], lam: float) -> float:
    total, count = 0.0, 0
    n = data["vis"].shape[0]
    for start in range(0, n, PREDICT_BATCH):
        sl = slice(start, start + PREDICT_BATCH)
        out_a, out_s = driver_forward(
            net.params, net.arch, data["vis"][sl], data["spd"][sl], data["ang"][sl]
        )
        b = out_a.data.shape[0]
        loss = float(np.mean((out_a.data - data["tgt_a"][sl]) ** 2))
        if lam > 0:
            loss += lam * float(np.mean((out_s.data - data["tgt_s"][sl]) ** 2))
        total += loss * b
        count += b
    return total / count


def predict_batch(
    net: DriverNet, windows: Sequence[WindowSample]
) -> tuple[np.ndarray, np.ndarray]:
    """Denormalized, range-clipped (angle, speed) predictions."""
    if not windows:
        return np.empty(0), np.empty(0)
    data = windows_to_arrays(windows, net.normalizer)
    angles, speeds = [], []
    n = len(windows)
    for start in range(0, n, PREDICT_BATCH):
        sl = slice(start, start + PREDICT_BATCH)
        out_a, out_s = driver_forward(
            net.params, net.arch, data["vis"][sl], data["spd"][sl], data["ang"][sl]
        )
        angles.append(out_a.data[:, 0])
        speeds.append(out_s.data[:, 0])
    angle = np.clip(net.normalizer.denormalize(np.concatenate(angles), "angle"), ANGLE_MIN, ANGLE_MAX)
    speed = np.clip(net.normalizer.denormalize(np.concatenate(speeds), "speed"), SPEED_MIN, SPEED_MAX)
    return angle, speed


def predict(net: DriverNet, window: WindowSample) -> tuple[float, float]:
    angle, speed = predict_batch(net, [window])
    return float(angle[0]), float(speed[0])


def mc_predict_batch(
    net: DriverNet,
    windows: Sequence[WindowSample],
    n_samples: int,
    rng: np.random.Generator,
) -> tuple[np.ndarray, np.ndarray]:
    """(n_samples, N) stochastic forward passes with dropout kept on."""
    if net.arch.dropout_p <= 0.0:
        raise ValidationError("dropout disabled; uncertainty undefined")
    if n_samples < 2:
        raise ValidationError(f"need at least 2 mc samples, got {n_samples}")
    data = windows_to_arrays(windows, net.normalizer)
    n = len(windows)
    angles = np.empty((n_samples, n))
    speeds = np.empty((n_samples, n))
    for s in range(n_samples):
        for start in range(0, n, PREDICT_BATCH):
            sl = slice(start, start + PREDICT_BATCH)
            out_a, out_s = driver_forward(
                net.params, net.arch, data["vis"][sl], data["spd"][sl], data["ang"][sl],
                mode="mc", rng=rng,
            )
            angles[s, sl] = net.normalizer.denormalize(out_a.data[:, 0], "angle")
            speeds[s, sl] = net.normalizer.denormalize(out_s.data[:, 0], "speed")
    return angles, speeds


def eval_mae(net: DriverNet, windows: Sequence[WindowSample]) -> tuple[float, float]:
    """(mae_speed, mae_angle) in physical units."""
    if not windows:
        raise ValidationError("eval_mae on an empty window list")
    angle, speed = predict_batch(net, windows)
    true_a = np.array([w.target_angle for w in windows])
    true_s = np.array([w.target_speed for w in windows])
    return float(np.mean(np.abs(speed - true_s))), float(np.mean(np.abs(angle - true_a)))


def constant_mean_mae(
    normalizer: Normalizer, windows: Sequence[WindowSample]
) -> tuple[float, float]:
    """MAE of the predict-the-training-mean baseline on ``windows``."""
    if not windows:
        raise ValidationError("baseline MAE on an empty window list")
    true_a = np.array([w.target_angle for w in windows])
    true_s = np.array([w.target_speed for w in windows])
    return (
        float(np.mean(np.abs(normalizer.mean_speed - true_s))),
        float(np.mean(np.abs(normalizer.mean_angle - true_a))),
    )


# ---------------------------------------------------------------------------
# Persistence
# ---------------------------------------------------------------------------


def _normalizer_meta(norm: Normalizer) -> dict[str, str]:
    return {
        "norm_mean_speed": repr(norm.mean_speed),
        "norm_std_speed": repr(norm.std_speed),
        "norm_mean_angle": repr(norm.mean_angle),
        "norm_std_angle": repr(norm.std_angle),
        "norm_obs_mean": ",".join(repr(float(v)) for v in norm.obs_mean),
        "norm_obs_std": ",".join(repr(float(v)) for v in norm.obs_std),
    }


def _normalizer_from_meta(meta: dict[str, str]) -> Normalizer:
    return Normalizer(
        mean_speed=float(meta["norm_mean_speed"]),
        std_speed=float(meta["norm_std_speed"]),
        mean_angle=float(meta["norm_mean_angle"]),
        std_angle=float(meta["norm_std_angle"]),
        obs_mean=np.array([float(v) for v in meta["norm_obs_mean"].split(",")]),
        obs_std=np.array([float(v) for v in meta["norm_obs_std"].split(",")]),
    )


def _provenance_meta(provenance: Mapping[str, str]) -> dict[str, str]:
    return {f"prov_{k}": str(v) for k, v in sorted(provenance.items())}


def _provenance_from_meta(meta: Mapping[str, str]) -> dict[str, str]:
    return {k[len("prov_"):]: v for k, v in meta.items() if k.startswith("prov_")}


def save_driver(path, net: DriverNet) -> None:
    meta = dict(net.arch.meta())
    meta["trained_on"] = net.trained_on
    meta["seed"] = str(net.seed)
    meta.update(_normalizer_meta(net.normalizer))
    meta.update(_provenance_meta(net.provenance))
    save_checkpoint(path, "driver", meta, net.params)


def load_driver(path) -> DriverNet:
    kind, meta, store = load_checkpoint(path)
    if kind != "driver":
        raise ValidationError(f"{path}: expected a driver checkpoint, found kind {kind!r}")
    return DriverNet(
        arch=BackboneArch.from_meta(meta),
        params=store,
        normalizer=_normalizer_from_meta(meta),
        trained_on=meta["trained_on"],
        seed=int(meta["seed"]),
        provenance=_provenance_from_meta(meta),
    )
