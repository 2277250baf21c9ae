"""Procedural driving world with a deterministic human oracle.

Each episode draws a smooth curvature profile, intersection arrivals with a
hidden branch choice (left / straight / right), a lead-vehicle gap process,
and per-episode congestion/visibility levels. The oracle drives a simple
control law on the latent state; the observation vector exposes noisy
previews of the observable part of that state, while the branch choice stays
unobservable so that driving mistakes at intersections are unavoidable and
failure prediction has something real to learn.

All randomness flows from the episode seed through counter-based Philox
streams, one per concern, so changing one config knob never reshuffles
unrelated draws.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, fields, replace
import numpy as np

from .core import ANGLE_MAX, ANGLE_MIN, SPEED_MAX, SPEED_MIN, Episode, TimedRecord
from .errors import ValidationError

# stream ids for the per-concern Philox streams
_STREAM_CURVATURE = 0
_STREAM_ARRIVALS = 1
_STREAM_BRANCHES = 2
_STREAM_NOISE = 3
_STREAM_LEAD = 4
_STREAM_ENV = 5

_MASK64 = (1 << 64) - 1

# geometry of an intersection passage
ZONE_LENGTH = 8  # steps (2 s at 4 Hz)
APPROACH_WINDOW = 8  # steps over which the oracle slows before a zone
ZONE_SPEED_FACTOR = 0.45
ZONE_CURVATURE_DAMP = 0.05  # roads straighten through intersections
TURN_PEAK_DEG = 40.0
BRANCH_PROBS = (0.3, 0.4, 0.3)  # left, straight, right

FOLLOW_GAP_M = 25.0  # below this the oracle tracks the lead vehicle
_DIST_CAP = 40.0  # observation channel saturation for distance-to-zone
_GAP_CAP = 60.0

# signal scale per observation channel; measurement noise is proportional
_CHANNEL_SCALES = np.array(
    [0.01, 0.01, 0.01, 0.01, 0.15, 0.25, 0.2, 0.15, 0.15, 0.15, 0.25, 0.1]
)
N_SIGNAL_CHANNELS = len(_CHANNEL_SCALES)
N_NOISE_CHANNELS = 4  # pure-noise tail channels force the encoder to select


@dataclass(frozen=True)
class WorldConfig:
    """Generator knobs for one episode.

    ``congestion_level`` and ``visibility`` bound the per-episode draws:
    congestion is uniform on [0, congestion_level], visibility uniform on
    [visibility, 1]. ``intersection_rate`` is the expected number of
    intersections per 100 steps.
    """

    episode_length: int = 300
    curvature_sigma: float = 0.004
    curvature_rate: float = 0.08
    curvature_jump_prob: float = 0.015
    curvature_jump_scale: float = 0.02
    intersection_rate: float = 2.5
    congestion_level: float = 0.6
    visibility: float = 0.7
    obs_noise_scale: float = 0.5
    steer_gain: float = 400.0
    base_speed: float = 80.0
    obs_dim: int = 16
    seed: int = 0

    def validate(self, min_length: int = 13) -> None:
        if self.episode_length < min_length:
            raise ValidationError(
                f"episode_length {self.episode_length} < minimum {min_length} (k + m + 1)"
            )
        for name in ("curvature_sigma", "curvature_rate", "intersection_rate",
                     "curvature_jump_prob", "curvature_jump_scale", "obs_noise_scale"):
            if getattr(self, name) < 0:
                raise ValidationError(f"{name} must be >= 0")
        for name in ("congestion_level", "visibility"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValidationError(f"{name} must lie in [0, 1], got {v}")
        if self.curvature_jump_prob > 1.0:
            raise ValidationError("curvature_jump_prob must lie in [0, 1]")
        if self.obs_dim != N_SIGNAL_CHANNELS + N_NOISE_CHANNELS:
            raise ValidationError(
                f"obs_dim must be {N_SIGNAL_CHANNELS + N_NOISE_CHANNELS} "
                f"({N_SIGNAL_CHANNELS} signal + {N_NOISE_CHANNELS} noise channels)"
            )
        if self.base_speed <= 0 or self.base_speed > SPEED_MAX:
            raise ValidationError(f"base_speed must lie in (0, {SPEED_MAX}]")

    def digest(self) -> str:
        payload = ";".join(f"{f.name}={getattr(self, f.name)!r}" for f in fields(self))
        return hashlib.sha256(payload.encode()).hexdigest()[:16]


@dataclass(frozen=True)
class WorldState:
    """Latent state at one step; ``branch_sign`` is hidden from observations."""

    curvature: float  # 1/m
    dist_to_intersection: int  # steps until the next zone starts (0 inside)
    in_zone: bool
    zone_progress: float  # [0, 1) inside a zone, 0 outside
    branch_sign: int  # +1 left, 0 straight, -1 right; 0 outside zones
    lead_gap: float  # m
    congestion: float
    visibility: float

    def __post_init__(self) -> None:
        if self.dist_to_intersection < 0:
            raise ValidationError("dist_to_intersection must be >= 0")
        if self.lead_gap < 0:
            raise ValidationError("lead_gap must be >= 0")


def _stream(seed: int, stream_id: int) -> np.random.Generator:
    key = (seed & _MASK64) | (stream_id << 64)
    return np.random.Generator(np.random.Philox(key=key))


def oracle_action(state: WorldState, config: WorldConfig) -> tuple[float, float]:
    """Deterministic control law standing in for the human driver.

    Angle tracks road curvature (damped through intersections) plus a
    sinusoidal turn ramp of +-TURN_PEAK_DEG for turning branches. Speed is
    the base speed scaled down by congestion, poor visibility, intersection
    approach/passage, and a short lead gap.
    """
    if state.in_zone:
        curv = state.curvature * ZONE_CURVATURE_DAMP
        turn = state.branch_sign * TURN_PEAK_DEG * math.sin(math.pi * state.zone_progress)
    else:
        curv = state.curvature
        turn = 0.0
    angle = float(np.clip(config.steer_gain * curv + turn, ANGLE_MIN, ANGLE_MAX))

    if state.in_zone:
        zone_factor = ZONE_SPEED_FACTOR
    elif state.dist_to_intersection < APPROACH_WINDOW:
        zone_factor = ZONE_SPEED_FACTOR + (1.0 - ZONE_SPEED_FACTOR) * (
            state.dist_to_intersection / APPROACH_WINDOW
        )
    else:
        zone_factor = 1.0
    gap_factor = min(state.lead_gap / FOLLOW_GAP_M, 1.0)
    vis_factor = 0.6 + 0.4 * state.visibility
    speed = (
        config.base_speed
        * (1.0 - 0.5 * state.congestion)
        * vis_factor
        * zone_factor
        * gap_factor
    )
    speed = float(np.clip(speed, SPEED_MIN, SPEED_MAX))
    return angle, speed


def _curvature_path(config: WorldConfig, n: int) -> np.ndarray:
    rng = _stream(config.seed, _STREAM_CURVATURE)
    eps = rng.standard_normal(n)
    jump_u = rng.random(n)
    jump_mag = rng.uniform(0.5, 1.5, size=n) * config.curvature_jump_scale
    jump_sign = np.where(rng.random(n) < 0.5, -1.0, 1.0)
    c = np.empty(n)
    cur = 0.0
    for t in range(n):
        cur += -config.curvature_rate * cur + config.curvature_sigma * eps[t]
        if jump_u[t] < config.curvature_jump_prob:
            cur += jump_sign[t] * jump_mag[t]
        c[t] = cur
    return c


def _zone_schedule(
    config: WorldConfig, n: int
) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray, int]:
    """Zone mask, branch sign, distance-to-next-zone-start and zone progress.

    Arrivals are an independent Bernoulli(rate/100) draw per step; an arrival
    while a zone is active is queued and opens its own zone right after, so
    the arrival count stays exactly Binomial(n, rate/100) and zones never
    overlap.
    """
    p = config.intersection_rate / 100.0
    if p > 1.0:
        raise ValidationError("intersection_rate must be <= 100 per 100 steps")
    rng_arrivals = _stream(config.seed, _STREAM_ARRIVALS)
    rng_branches = _stream(config.seed, _STREAM_BRANCHES)
    arrivals = rng_arrivals.random(n) < p

    in_zone = np.zeros(n, dtype=bool)
    branch = np.zeros(n, dtype=np.int64)
    progress = np.zeros(n)
    starts = []
    pending = 0
    zone_left = 0
    zone_pos = 0
    for t in range(n):
        if arrivals[t]:
            pending += 1
        if zone_left == 0 and pending > 0:
            pending -= 1
            zone_left = ZONE_LENGTH
            zone_pos = 0  # progress restarts even for back-to-back zones
            starts.append(t)
            sign = int(rng_branches.choice((1, 0, -1), p=BRANCH_PROBS))
            branch[t : t + ZONE_LENGTH] = sign
        if zone_left > 0:
            in_zone[t] = True
            progress[t] = zone_pos / ZONE_LENGTH
            zone_pos += 1
            zone_left -= 1

    starts_set = set(starts)
    dist = np.full(n, n, dtype=np.int64)
    next_start: int | None = None
    for t in range(n - 1, -1, -1):
        if t in starts_set:
            next_start = t
        if in_zone[t]:
            dist[t] = 0
        elif next_start is not None:
            dist[t] = next_start - t
    return in_zone, branch, dist, progress, int(arrivals.sum())


def _lead_gap_path(config: WorldConfig, congestion: float, n: int) -> np.ndarray:
    rng = _stream(config.seed, _STREAM_LEAD)
    mean_gap = 45.0 * (1.0 - 0.75 * congestion)
    eps = rng.standard_normal(n)
    g = np.empty(n)
    cur = mean_gap
    for t in range(n):
        cur += 0.15 * (mean_gap - cur) + 1.5 * eps[t]
        cur = max(cur, 0.0)
        g[t] = cur
    return g


def generate_episode(config: WorldConfig, episode_id: str | None = None) -> Episode:
    """Deterministic episode for ``config.seed``; see module docstring."""
    config.validate()
    n = config.episode_length
    lookahead = 8
    curvature = _curvature_path(config, n + lookahead)

    rng_env = _stream(config.seed, _STREAM_ENV)
    congestion = float(config.congestion_level * rng_env.random())
    visibility = float(config.visibility + (1.0 - config.visibility) * rng_env.random())

    in_zone, branch, dist, zone_progress, n_arrivals = _zone_schedule(config, n)
    gap = _lead_gap_path(config, congestion, n)

    rng_noise = _stream(config.seed, _STREAM_NOISE)
    eps = rng_noise.standard_normal((n, config.obs_dim))
    noise_mult = 0.25 + 0.75 * (1.0 - visibility)

    signals = np.column_stack(
        [
            curvature[1 : n + 1],
            curvature[2 : n + 2],
            curvature[4 : n + 4],
            curvature[:n],
            np.minimum(dist, _DIST_CAP) / _DIST_CAP,
            in_zone.astype(np.float64),
            zone_progress,
            np.minimum(gap, _GAP_CAP) / _GAP_CAP,
            np.full(n, congestion),
            np.full(n, visibility),
            (dist <= APPROACH_WINDOW).astype(np.float64),
            np.concatenate([[0.0], np.diff(gap)]) / 5.0,
        ]
    )
    obs = np.empty((n, config.obs_dim))
    obs[:, :N_SIGNAL_CHANNELS] = (
        signals + config.obs_noise_scale * noise_mult * _CHANNEL_SCALES * eps[:, :N_SIGNAL_CHANNELS]
    )
    obs[:, N_SIGNAL_CHANNELS:] = eps[:, N_SIGNAL_CHANNELS:]  # pure noise channels

    angles = np.empty(n)
    speeds = np.empty(n)
    for t in range(n):
        state = WorldState(
            curvature=float(curvature[t]),
            dist_to_intersection=int(dist[t]),
            in_zone=bool(in_zone[t]),
            zone_progress=float(zone_progress[t]),
            branch_sign=int(branch[t]),
            lead_gap=float(gap[t]),
            congestion=congestion,
            visibility=visibility,
        )
        angles[t], speeds[t] = oracle_action(state, config)

    obs.setflags(write=False)
    records = tuple(
        TimedRecord(step_index=t, obs=obs[t], speed=float(speeds[t]), angle=float(angles[t]))
        for t in range(n)
    )
    meta = {
        "config_digest": config.digest(),
        "congestion": congestion,
        "visibility": visibility,
        "n_intersections": n_arrivals,
        "curvature": tuple(float(x) for x in curvature[:n]),
        "zone_mask": tuple(bool(x) for x in in_zone),
        "branch": tuple(int(x) for x in branch),
        "dist_next": tuple(int(x) for x in dist),
        "zone_progress": tuple(float(x) for x in zone_progress),
        "lead_gap": tuple(float(x) for x in gap),
    }
    eid = episode_id if episode_id is not None else f"ep{config.seed:010d}"
    return Episode(episode_id=eid, seed=config.seed, records=records, meta=meta)


def generate_dataset(config: WorldConfig, n_episodes: int, base_seed: int) -> list[Episode]:
    """n episodes with ids ep000000..; episode i uses seed base_seed + i."""
    if n_episodes < 1:
        raise ValidationError("n_episodes must be >= 1")
    out = []
    for i in range(n_episodes):
        cfg = replace(config, seed=base_seed + i)
        out.append(generate_episode(cfg, episode_id=f"ep{i:06d}"))
    return out


def state_at(episode: Episode, t: int) -> WorldState:
    """Rebuild the latent WorldState from the episode's difficulty trace."""
    meta = episode.meta
    try:
        return WorldState(
            curvature=meta["curvature"][t],
            dist_to_intersection=meta["dist_next"][t],
            in_zone=meta["zone_mask"][t],
            zone_progress=meta["zone_progress"][t],
            branch_sign=meta["branch"][t],
            lead_gap=meta["lead_gap"][t],
            congestion=meta["congestion"],
            visibility=meta["visibility"],
        )
    except (KeyError, IndexError):
        raise ValidationError(
            f"episode {episode.episode_id} has no difficulty trace (loaded from file?)"
        ) from None
