"""Agent-based colony simulator with ground-truth duel logging.

Stable episodes contain only correlated-random-walk wanderers plus
static cricket distractors. Unstable episodes additionally spawn duel
pairs as a Poisson process; a duel pins two ants close together, facing,
with fast anchor drift and alternating lunge/retreat jerks, making duels
the strongest local motion in the arena. Every duel is logged with
per-frame bounding boxes so saliency maps can be scored against ground
truth.

Everything is driven by one seeded generator: identical (config, label,
seed) reproduce episodes bitwise.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ValidationError
from .flow import GrayImage

STABLE, UNSTABLE = 0, 1

# ant modes
WANDER, DUEL, LEAVING, AWAY = 0, 1, 2, 3

WANDER_TURN_SD = 0.3          # radians per step
WANDER_SPEED = (5.0, 25.0)    # px/s bounds; draws skew toward the low end
WANDER_SPEED_SHAPE = (1.0, 4.0)  # beta parameters for the speed draw
DUEL_TURN_SD = 0.15           # pair-axis rotation noise per step, radians
DUEL_WALL_MARGIN_PX = 20.0    # dueling pairs bounce back inside this band
BBOX_PAD_PX = 8.0
CAPSULE_LEN_PX = 12.0
CAPSULE_WIDTH_PX = 3.0
ANT_INTENSITY = 0.2
CRICKET_RADIUS_PX = 4.0       # 8-px disc
CRICKET_INTENSITY = 0.4
BACKGROUND = 0.8
EXIT_ZONE_HALF_W = 40.0       # south-center strip ants leave and enter through
EXIT_ZONE_DEPTH = 10.0
LEAVING_SPEED = 25.0
SPAWN_RADIUS_PX = 40.0        # prefer duel partners already this close
MIN_EPISODE_LEN_S = 240.0     # at least one full flow-pair sample


@dataclass(frozen=True)
class SimConfig:
    """Episode generation constants; duel kinematics are configurable stand-ins."""

    n_ants: int = 59
    arena: int = 512
    seed: int = 0
    duel_rate: float = 1.5        # expected duels per minute (Unstable only)
    duel_min_s: float = 4.0
    duel_max_s: float = 10.0
    frame_dt: float = 0.5
    episode_len: float = 600.0
    cricket_count: int = 2
    duel_rate_decay: float = 0.0  # per-second exponential decay of duel_rate
    exit_prob: float = 0.001      # per-ant per-second chance of leaving to forage
    duel_sep_px: float = 7.0      # resting distance between duel partners
    duel_jerk_px: float = 3.0     # per-ant lunge/retreat amplitude
    duel_freq_lo: float = 2.0     # jerk frequency range, Hz
    duel_freq_hi: float = 4.0
    duel_drift_lo: float = 10.0   # pair slide along its axis, px/s
    duel_drift_hi: float = 14.0
    duel_sweep_lo: float = 5.0    # sideways sweep, px/s; slow enough for the
    duel_sweep_hi: float = 7.0    # flow estimator to track between frames

    def __post_init__(self):
        if self.n_ants < 2:
            raise ValidationError(f"n_ants must be >= 2, got {self.n_ants}")
        if self.arena < 64:
            raise ValidationError(f"arena must be >= 64 px, got {self.arena}")
        if self.duel_rate < 0 or self.duel_rate_decay < 0:
            raise ValidationError("duel_rate and duel_rate_decay must be >= 0")
        if not 0 < self.duel_min_s <= self.duel_max_s:
            raise ValidationError(f"bad duel duration range "
                                  f"[{self.duel_min_s}, {self.duel_max_s}]")
        if self.frame_dt <= 0:
            raise ValidationError(f"frame_dt must be positive, got {self.frame_dt}")
        if self.cricket_count < 0 or not 0 <= self.exit_prob <= 1:
            raise ValidationError("cricket_count must be >= 0 and exit_prob in [0, 1]")
        if self.duel_sep_px + self.duel_jerk_px > 10.0:
            raise ValidationError("duel partners must stay within 10 px "
                                  f"(sep {self.duel_sep_px} + jerk {self.duel_jerk_px})")


@dataclass
class DuelEvent:
    """Ground-truth duel record with per-frame bounding boxes."""

    t_start: float
    participants: list[int]
    t_end: float | None = None
    bbox_per_frame: dict[int, tuple[float, float, float, float]] = field(default_factory=dict)

    def to_json_obj(self) -> dict:
        return {"t_start": self.t_start, "t_end": self.t_end,
                "ids": list(self.participants),
                "bbox": {str(k): list(v) for k, v in sorted(self.bbox_per_frame.items())}}

    def to_jsonl(self) -> str:
        return json.dumps(self.to_json_obj(), sort_keys=True, separators=(",", ":"))

    def active_during(self, t0: float, t1: float) -> bool:
        end = self.t_end if self.t_end is not None else math.inf
        return self.t_start <= t1 and end >= t0


class _ActiveDuel:
    __slots__ = ("i", "j", "t_end", "freq", "phase", "anchor", "axis",
                 "side_sign", "event")

    def __init__(self, i, j, t_end, freq, phase, anchor, axis, side_sign, event):
        self.i = i
        self.j = j
        self.t_end = t_end
        self.freq = freq
        self.phase = phase
        self.anchor = anchor
        self.axis = axis
        self.side_sign = side_sign
        self.event = event


def _wander_speeds(rng: np.random.Generator, size=None) -> np.ndarray | float:
    """Speeds in [5, 25] px/s, skewed toward slow walking."""
    lo, hi = WANDER_SPEED
    return lo + (hi - lo) * rng.beta(*WANDER_SPEED_SHAPE, size=size)


class SimState:
    """Mutable simulation state; create via init_state, advance via step."""

    def __init__(self, cfg: SimConfig, label: int):
        if label not in (STABLE, UNSTABLE):
            raise ValidationError(f"label must be {STABLE} or {UNSTABLE}, got {label!r}")
        self.label = label
        self.t = 0.0
        self.rng = np.random.default_rng(cfg.seed)
        n = cfg.n_ants
        self.pos = self.rng.uniform(10.0, cfg.arena - 10.0, size=(n, 2))
        self.heading = self.rng.uniform(0.0, 2.0 * math.pi, size=n)
        self.speed = _wander_speeds(self.rng, n)
        self.mode = np.full(n, WANDER, dtype=np.uint8)
        self.partner = np.full(n, -1, dtype=np.int64)
        self.cricket_pos = self.rng.uniform(30.0, cfg.arena - 30.0,
                                            size=(cfg.cricket_count, 2))
        self.duels: list[_ActiveDuel] = []
        self.events: list[DuelEvent] = []


def init_state(cfg: SimConfig, label: int) -> SimState:
    return SimState(cfg, label)


def _reflect(pos: np.ndarray, heading: np.ndarray, arena: float) -> None:
    """Bounce positions off the walls, mirroring headings, in place."""
    for axis in (0, 1):
        low = pos[:, axis] < 0.0
        pos[low, axis] = -pos[low, axis]
        high = pos[:, axis] > arena
        pos[high, axis] = 2.0 * arena - pos[high, axis]
        flipped = low | high
        if flipped.any():
            if axis == 0:
                heading[flipped] = math.pi - heading[flipped]
            else:
                heading[flipped] = -heading[flipped]
    np.clip(pos, 0.0, arena, out=pos)


def _zone_center(cfg: SimConfig) -> np.ndarray:
    return np.array([cfg.arena / 2.0, cfg.arena - 2.0])


def _end_duel(state: SimState, duel: _ActiveDuel, t_end: float) -> None:
    duel.event.t_end = t_end
    for idx in (duel.i, duel.j):
        state.mode[idx] = WANDER
        state.partner[idx] = -1
        state.heading[idx] = state.rng.uniform(0.0, 2.0 * math.pi)
        state.speed[idx] = _wander_speeds(state.rng)


def _spawn_duel(state: SimState, cfg: SimConfig) -> None:
    idle = np.flatnonzero(state.mode == WANDER)
    if idle.size < 2:
        return
    p = state.pos[idle]
    diff = p[:, None, :] - p[None, :, :]
    dist = np.hypot(diff[..., 0], diff[..., 1])
    iu = np.triu_indices(idle.size, k=1)
    pair_d = dist[iu]
    close = np.flatnonzero(pair_d < SPAWN_RADIUS_PX)
    if close.size:
        pick = close[state.rng.integers(close.size)]
    else:
        pick = int(np.argmin(pair_d))  # fall back to the closest idle pair
    i, j = int(idle[iu[0][pick]]), int(idle[iu[1][pick]])

    anchor = 0.5 * (state.pos[i] + state.pos[j])
    delta = state.pos[j] - state.pos[i]
    axis = math.atan2(delta[1], delta[0]) if np.any(delta) else 0.0
    duration = state.rng.uniform(cfg.duel_min_s, cfg.duel_max_s)
    freq = state.rng.uniform(cfg.duel_freq_lo, cfg.duel_freq_hi)
    phase = state.rng.uniform(0.0, 2.0 * math.pi)
    side_sign = 1.0 if state.rng.random() < 0.5 else -1.0
    event = DuelEvent(t_start=state.t, participants=[i, j])
    duel = _ActiveDuel(i, j, state.t + duration, freq, phase, anchor, axis,
                       side_sign, event)
    state.mode[[i, j]] = DUEL
    state.partner[i] = j
    state.partner[j] = i
    state.duels.append(duel)
    state.events.append(event)
    _place_duel_pair(state, cfg, duel)


def _place_duel_pair(state: SimState, cfg: SimConfig, duel: _ActiveDuel) -> None:
    osc = math.sin(2.0 * math.pi * duel.freq * state.t + duel.phase)
    gap = cfg.duel_sep_px + cfg.duel_jerk_px * (1.0 if osc >= 0 else -1.0)
    direction = np.array([math.cos(duel.axis), math.sin(duel.axis)])
    state.pos[duel.i] = duel.anchor - 0.5 * gap * direction
    state.pos[duel.j] = duel.anchor + 0.5 * gap * direction
    np.clip(state.pos[duel.i], 0.0, cfg.arena, out=state.pos[duel.i])
    np.clip(state.pos[duel.j], 0.0, cfg.arena, out=state.pos[duel.j])
    state.heading[duel.i] = duel.axis
    state.heading[duel.j] = duel.axis + math.pi


def step(state: SimState, cfg: SimConfig, dt: float) -> SimState:
    """Advance the state by dt seconds."""
    if dt <= 0:
        raise ValidationError(f"dt must be positive, got {dt}")
    rng = state.rng
    n = cfg.n_ants
    arena = float(cfg.arena)

    # wanderers: correlated random walk
    turn = rng.normal(0.0, WANDER_TURN_SD, size=n)
    new_speed = _wander_speeds(rng, n)
    wander = state.mode == WANDER
    state.heading[wander] += turn[wander]
    state.speed[wander] = new_speed[wander]
    if wander.any():
        vel = np.stack([np.cos(state.heading[wander]),
                        np.sin(state.heading[wander])], axis=1)
        state.pos[wander] += vel * (state.speed[wander] * dt)[:, None]
        sub_pos = state.pos[wander]
        sub_head = state.heading[wander]
        _reflect(sub_pos, sub_head, arena)
        state.pos[wander] = sub_pos
        state.heading[wander] = sub_head

    # leavers walk to the exit zone, then drop out of view
    leaving = np.flatnonzero(state.mode == LEAVING)
    if leaving.size:
        zone = _zone_center(cfg)
        for idx in leaving:
            to_zone = zone - state.pos[idx]
            state.heading[idx] = math.atan2(to_zone[1], to_zone[0])
            state.speed[idx] = LEAVING_SPEED
            step_len = min(LEAVING_SPEED * dt, float(np.hypot(*to_zone)))
            state.pos[idx] += step_len * np.array([math.cos(state.heading[idx]),
                                                   math.sin(state.heading[idx])])
            np.clip(state.pos[idx], 0.0, arena, out=state.pos[idx])
            if (abs(state.pos[idx][0] - zone[0]) <= EXIT_ZONE_HALF_W
                    and state.pos[idx][1] >= arena - EXIT_ZONE_DEPTH):
                state.mode[idx] = AWAY

    # foraging transitions
    exit_roll = rng.random(n)
    enter_roll = rng.random(n)
    p_move = cfg.exit_prob * dt
    start_leaving = (state.mode == WANDER) & (exit_roll < p_move)
    state.mode[start_leaving] = LEAVING
    returning = np.flatnonzero((state.mode == AWAY) & (enter_roll < p_move))
    for idx in returning:
        state.mode[idx] = WANDER
        state.pos[idx] = [rng.uniform(cfg.arena / 2.0 - EXIT_ZONE_HALF_W,
                                      cfg.arena / 2.0 + EXIT_ZONE_HALF_W),
                          rng.uniform(arena - EXIT_ZONE_DEPTH, arena)]
        state.heading[idx] = rng.uniform(0.0, 2.0 * math.pi)
        state.speed[idx] = _wander_speeds(rng)

    state.t += dt

    # active duels: slide the pair along its axis with a sideways sweep
    # (the sideways component is what the flow estimator tracks best)
    still_active: list[_ActiveDuel] = []
    for duel in state.duels:
        if state.t >= duel.t_end:
            _end_duel(state, duel, duel.t_end)
            continue
        duel.axis += rng.normal(0.0, DUEL_TURN_SD)
        slide = rng.uniform(cfg.duel_drift_lo, cfg.duel_drift_hi)
        sweep = rng.uniform(cfg.duel_sweep_lo, cfg.duel_sweep_hi)
        along = np.array([math.cos(duel.axis), math.sin(duel.axis)])
        perp = np.array([-along[1], along[0]])
        velocity = along * slide + perp * (sweep * duel.side_sign)
        duel.anchor = duel.anchor + velocity * dt
        # bounce the pair off the walls so drift never stalls at the boundary
        lo, hi = DUEL_WALL_MARGIN_PX, arena - DUEL_WALL_MARGIN_PX
        for ax in (0, 1):
            c = duel.anchor[ax]
            if lo <= c <= hi:
                continue
            duel.anchor[ax] = 2 * lo - c if c < lo else 2 * hi - c
            duel.axis = math.pi - duel.axis if ax == 0 else -duel.axis
            duel.side_sign = -duel.side_sign
        duel.anchor = np.clip(duel.anchor, lo, hi)
        _place_duel_pair(state, cfg, duel)
        still_active.append(duel)
    state.duels = still_active

    # Poisson duel spawning; Stable episodes never duel
    rate_per_s = 0.0
    if state.label == UNSTABLE:
        rate_per_s = (cfg.duel_rate / 60.0) * math.exp(-cfg.duel_rate_decay * state.t)
    if rate_per_s > 0.0:
        for _ in range(int(rng.poisson(rate_per_s * dt))):
            _spawn_duel(state, cfg)

    return state


# ---------------------------------------------------------------------------
# rendering


def _render_supersampled(buf: np.ndarray, centers: np.ndarray, radius: float,
                         intensity: float, segments: np.ndarray | None = None) -> None:
    """Darken buf (2x supersampled) with discs or capsules, min-compositing."""
    ss = 2
    size = buf.shape[0]
    for k in range(centers.shape[0]):
        c = centers[k]
        if segments is None:
            half = np.zeros(2)
        else:
            half = segments[k]
        lo_x = c[0] - abs(half[0]) - radius - 1.0
        hi_x = c[0] + abs(half[0]) + radius + 1.0
        lo_y = c[1] - abs(half[1]) - radius - 1.0
        hi_y = c[1] + abs(half[1]) + radius + 1.0
        j0, j1 = max(0, int(lo_x * ss)), min(size, int(math.ceil(hi_x * ss)) + 1)
        i0, i1 = max(0, int(lo_y * ss)), min(size, int(math.ceil(hi_y * ss)) + 1)
        if j0 >= j1 or i0 >= i1:
            continue
        xs = (np.arange(j0, j1) + 0.5) / ss
        ys = (np.arange(i0, i1) + 0.5) / ss
        px = xs[None, :] - c[0]
        py = ys[:, None] - c[1]
        if segments is None or (half[0] == 0.0 and half[1] == 0.0):
            d2 = px * px + py * py
        else:
            seg_len2 = float(half[0] ** 2 + half[1] ** 2) * 4.0
            # project onto the segment from c-half to c+half, clamp to [0, 1]
            tproj = ((px + half[0]) * (2.0 * half[0])
                     + (py + half[1]) * (2.0 * half[1])) / seg_len2
            np.clip(tproj, 0.0, 1.0, out=tproj)
            dx = px + half[0] - tproj * 2.0 * half[0]
            dy = py + half[1] - tproj * 2.0 * half[1]
            d2 = dx * dx + dy * dy
        window = buf[i0:i1, j0:j1]
        np.minimum(window, np.where(d2 <= radius * radius, intensity, window),
                   out=window)


def render_scene(pos: np.ndarray, heading: np.ndarray, visible: np.ndarray,
                 cricket_pos: np.ndarray, arena: int) -> GrayImage:
    """Draw the arena: 0.8 background, capsule ants, disc crickets, 2x box AA.

    The result is snapped to the 8-bit grid so a PGM round trip is lossless.
    """
    buf = np.full((2 * arena, 2 * arena), BACKGROUND)
    if cricket_pos.size:
        _render_supersampled(buf, cricket_pos, CRICKET_RADIUS_PX, CRICKET_INTENSITY)
    shown = np.flatnonzero(visible)
    if shown.size:
        seg_half = (CAPSULE_LEN_PX - CAPSULE_WIDTH_PX) / 2.0
        halves = np.stack([seg_half * np.cos(heading[shown]),
                           seg_half * np.sin(heading[shown])], axis=1)
        _render_supersampled(buf, pos[shown], CAPSULE_WIDTH_PX / 2.0,
                             ANT_INTENSITY, halves)
    img = buf.reshape(arena, 2, arena, 2).mean(axis=(1, 3))
    return GrayImage(np.rint(img * 255.0) / 255.0)


def render(state: SimState, cfg: SimConfig) -> GrayImage:
    visible = state.mode != AWAY
    return render_scene(state.pos, state.heading, visible, state.cricket_pos, cfg.arena)


# ---------------------------------------------------------------------------
# episodes


@dataclass
class Episode:
    """Logged trajectories of one labeled run; frames render lazily."""

    cfg: SimConfig
    label: int
    events: list[DuelEvent]
    cricket_pos: np.ndarray
    pos: np.ndarray       # [n_frames, n_ants, 2]
    heading: np.ndarray   # [n_frames, n_ants]
    mode: np.ndarray      # [n_frames, n_ants]

    @property
    def n_frames(self) -> int:
        return self.pos.shape[0]

    def time_of(self, frame_idx: int) -> float:
        return frame_idx * self.cfg.frame_dt

    def frame_at(self, t: float) -> int:
        idx = t / self.cfg.frame_dt
        rounded = round(idx)
        if abs(idx - rounded) > 1e-9 or not 0 <= rounded < self.n_frames:
            raise ValidationError(f"no frame at t={t} (frame_dt={self.cfg.frame_dt})")
        return int(rounded)

    def frame(self, idx: int) -> GrayImage:
        if not 0 <= idx < self.n_frames:
            raise ValidationError(f"frame index {idx} out of range 0..{self.n_frames - 1}")
        visible = self.mode[idx] != AWAY
        return render_scene(self.pos[idx], self.heading[idx], visible,
                            self.cricket_pos, self.cfg.arena)

    def duels_active(self, t0: float, t1: float) -> list[DuelEvent]:
        return [e for e in self.events if e.active_during(t0, t1)]


def _duel_bbox(state: SimState, duel: _ActiveDuel, arena: float):
    pts = state.pos[[duel.i, duel.j]]
    x0 = max(0.0, float(pts[:, 0].min()) - BBOX_PAD_PX)
    y0 = max(0.0, float(pts[:, 1].min()) - BBOX_PAD_PX)
    x1 = min(arena, float(pts[:, 0].max()) + BBOX_PAD_PX)
    y1 = min(arena, float(pts[:, 1].max()) + BBOX_PAD_PX)
    return (x0, y0, x1, y1)


def generate_episode(cfg: SimConfig, label: int) -> Episode:
    """Run a full labeled episode, logging frames and duel ground truth."""
    if cfg.episode_len < MIN_EPISODE_LEN_S:
        raise ValidationError(f"episode_len must be >= {MIN_EPISODE_LEN_S} s "
                              f"for one flow-pair sample, got {cfg.episode_len}")
    state = init_state(cfg, label)
    n_frames = int(round(cfg.episode_len / cfg.frame_dt)) + 1
    pos_log = np.empty((n_frames, cfg.n_ants, 2))
    head_log = np.empty((n_frames, cfg.n_ants))
    mode_log = np.empty((n_frames, cfg.n_ants), dtype=np.uint8)

    def snapshot(k: int) -> None:
        pos_log[k] = state.pos
        head_log[k] = state.heading
        mode_log[k] = state.mode
        for duel in state.duels:
            duel.event.bbox_per_frame[k] = _duel_bbox(state, duel, float(cfg.arena))

    snapshot(0)
    for k in range(1, n_frames):
        step(state, cfg, cfg.frame_dt)
        snapshot(k)
    for duel in state.duels:  # close out duels still running at the end
        end = min(duel.t_end, cfg.episode_len)
        duel.event.t_end = end if end > duel.event.t_start else duel.t_end
    return Episode(cfg=cfg, label=label, events=state.events,
                   cricket_pos=state.cricket_pos, pos=pos_log,
                   heading=head_log, mode=mode_log)


def events_jsonl(events: list[DuelEvent]) -> str:
    return "".join(e.to_jsonl() + "\n" for e in events)
