"""Grid-road micro-traffic simulator.

The road is a ring of ``road_patches`` cells on each of ``lanes`` parallel
lanes. Vehicles occupy a continuous span ``[pos, pos + length)`` along the
ring; a grid cell is covered by a vehicle when the two intervals intersect.
A safety system clamps each vehicle's speed to that of the nearest vehicle in
its front catchment and vetoes lane changes into occupied side catchments.

Lane 0 is the leftmost lane, so ``GO_LEFT`` decrements the lane index.
Policy-controlled vehicles always carry the lowest ids ``0 .. n_controllable-1``.
"""

from __future__ import annotations

import csv
import enum
import math
from dataclasses import dataclass, field, fields
from typing import Mapping

import numpy as np
from numba import njit

MPH_TO_MS = 0.44704


class SimulationError(RuntimeError):
    """Base class for simulator failures."""


class SetupError(SimulationError):
    """The configuration cannot be turned into a valid world."""


class InvariantViolation(SimulationError):
    """An internal invariant (no overlap, speed bounds) was broken."""


class Action(enum.IntEnum):
    ACCELERATE = 0
    DECELERATE = 1
    GO_LEFT = 2
    GO_RIGHT = 3
    NO_ACTION = 4

    @property
    def label(self) -> str:
        return ACTION_LABELS[int(self)]

    @classmethod
    def from_label(cls, label: str) -> "Action":
        try:
            return cls(ACTION_LABELS.index(label))
        except ValueError:
            raise ValueError(f"unknown action label {label!r}") from None


ACTION_LABELS = ("accelerate", "decelerate", "goLeft", "goRight", "noAction")
N_ACTIONS = len(ACTION_LABELS)


@dataclass(frozen=True)
class SimConfig:
    lanes: int = 7
    road_patches: int = 700
    n_vehicles: int = 20
    n_controllable: int = 1
    tick_seconds: float = 0.1
    max_speed: float = 80.0
    accel_step: float = 2.0
    patch_length: float = 5.0
    vehicle_length: int = 4
    safety_ahead: int = 6
    safety_side: int = 2
    rng_seed: int = 0
    strict_reference: bool = False

    def validate(self) -> None:
        if self.lanes < 3:
            raise SetupError(f"lanes must be >= 3, got {self.lanes}")
        if self.n_vehicles < 1:
            raise SetupError("n_vehicles must be >= 1")
        if not 0 <= self.n_controllable <= min(11, self.n_vehicles):
            raise SetupError(
                f"n_controllable must lie in [0, min(11, n_vehicles)], got {self.n_controllable}"
            )
        if self.strict_reference and (self.n_vehicles != 20 or self.n_controllable < 1):
            raise SetupError("strict reference mode needs 20 vehicles and 1..11 controllable")
        if self.max_speed != 80.0:
            raise SetupError("max_speed is fixed at 80 mph")
        if self.road_patches <= self.n_vehicles * self.vehicle_length:
            raise SetupError(
                f"road_patches={self.road_patches} cannot hold "
                f"{self.n_vehicles} vehicles of length {self.vehicle_length}"
            )
        if self.tick_seconds <= 0 or self.patch_length <= 0 or self.accel_step <= 0:
            raise SetupError("tick_seconds, patch_length and accel_step must be positive")
        if self.vehicle_length < 1 or self.safety_ahead < 1 or self.safety_side < 1:
            raise SetupError("vehicle_length and catchment sizes must be >= 1")
        # entering the front catchment plus one full-speed lag must leave a gap
        if self.safety_side <= 2 * self.max_advance:
            raise SetupError("safety_side too small for the per-tick advance")

    @property
    def max_advance(self) -> float:
        """Patches covered in one tick at full speed."""
        return self.max_speed * MPH_TO_MS * self.tick_seconds / self.patch_length

    def replace(self, **changes) -> "SimConfig":
        values = {f.name: getattr(self, f.name) for f in fields(self)}
        values.update(changes)
        return SimConfig(**values)


@dataclass(frozen=True)
class ObservationSpec:
    lanes_side: int
    patches_ahead: int
    patches_behind: int
    temporal_window: int = 0

    def __post_init__(self):
        if min(self.lanes_side, self.patches_ahead, self.patches_behind, self.temporal_window) < 0:
            raise ValueError("observation spec fields must be non-negative")
        if self.patches_ahead + self.patches_behind < 1:
            raise ValueError("observation slice needs at least one row")

    @property
    def width(self) -> int:
        return 2 * self.lanes_side + 1

    @property
    def rows(self) -> int:
        return self.patches_ahead + self.patches_behind

    @property
    def n_cells(self) -> int:
        return self.width * self.rows


@dataclass
class Observation:
    values: np.ndarray
    ego_speed: float


@dataclass
class StepOutcome:
    tick: int  # tick the decisions were taken at
    applied: np.ndarray  # post-safety action per vehicle
    speed: np.ndarray  # post-step speed per vehicle
    blocked: np.ndarray  # (n, 3) bool: front, left, right at decision time
    prev_lane: np.ndarray
    prev_pos: np.ndarray
    prev_speed: np.ndarray


@dataclass
class World:
    cfg: SimConfig
    lane: np.ndarray
    pos: np.ndarray
    speed: np.ndarray
    length: np.ndarray
    policy: np.ndarray
    rng: np.random.Generator = field(repr=False)
    tick: int = 0

    @property
    def n_vehicles(self) -> int:
        return len(self.lane)

    @property
    def policy_ids(self) -> list[int]:
        return [int(i) for i in np.flatnonzero(self.policy)]

    def state_bytes(self) -> bytes:
        """Canonical serialization of the dynamic state (RNG included)."""
        rng_state = repr(self.rng.bit_generator.state).encode()
        return b"".join(
            [
                np.int64(self.tick).tobytes(),
                self.lane.tobytes(),
                self.pos.tobytes(),
                self.speed.tobytes(),
                self.length.tobytes(),
                self.policy.tobytes(),
                rng_state,
            ]
        )

    def copy(self) -> "World":
        rng = np.random.Generator(type(self.rng.bit_generator)())
        rng.bit_generator.state = self.rng.bit_generator.state
        return World(
            self.cfg,
            self.lane.copy(),
            self.pos.copy(),
            self.speed.copy(),
            self.length.copy(),
            self.policy.copy(),
            rng,
            self.tick,
        )


# --------------------------------------------------------------------------
# numba kernels


@njit(cache=True)
def _wrap(x, ring):
    return x - ring * math.floor(x / ring)


@njit(cache=True)
def _front_leader(i, lane_i, lane, pos, length, ring, safety_ahead):
    """Nearest vehicle whose span starts within the front catchment, or -1."""
    front = pos[i] + length[i]
    best = -1
    best_gap = 1e300
    for j in range(lane.shape[0]):
        if j == i or lane[j] != lane_i:
            continue
        gap = _wrap(pos[j] - front, ring)
        if gap < safety_ahead and gap < best_gap:
            best_gap = gap
            best = j
    return best


@njit(cache=True)
def _side_occupied(i, target, lane, pos, length, ring, n_lanes, safety_side):
    if target < 0 or target >= n_lanes:
        return True
    start = pos[i] - safety_side
    span = length[i] + 2 * safety_side
    for j in range(lane.shape[0]):
        if j == i or lane[j] != target:
            continue
        d = _wrap(pos[j] - start, ring)
        if d < span or d > ring - length[j]:
            return True
    return False


@njit(cache=True)
def _decide(i, intended, lane, pos, speed, length, ring, n_lanes, safety_ahead, safety_side, max_speed):
    """Safety filter for one vehicle against the current arrays.

    Returns (applied, new_lane, speed_cap, front, left, right).
    """
    lane_i = lane[i]
    front = _front_leader(i, lane_i, lane, pos, length, ring, safety_ahead) >= 0
    left = _side_occupied(i, lane_i - 1, lane, pos, length, ring, n_lanes, safety_side)
    right = _side_occupied(i, lane_i + 1, lane, pos, length, ring, n_lanes, safety_side)
    applied = intended
    new_lane = lane_i
    if intended == 2:
        if left:
            applied = 4
        else:
            new_lane = lane_i - 1
    elif intended == 3:
        if right:
            applied = 4
        else:
            new_lane = lane_i + 1
    leader = _front_leader(i, new_lane, lane, pos, length, ring, safety_ahead)
    cap = max_speed
    if leader >= 0:
        cap = min(max_speed, speed[leader])
    return applied, new_lane, cap, front, left, right


@njit(cache=True)
def _step_kernel(
    lane, pos, speed, length, intended, applied, blocked,
    ring, n_lanes, safety_ahead, safety_side, max_speed, accel_step, advance_per_mph,
):
    n = lane.shape[0]
    for i in range(n):
        a, new_lane, cap, f, l, r = _decide(
            i, intended[i], lane, pos, speed, length, ring, n_lanes, safety_ahead, safety_side, max_speed
        )
        applied[i] = a
        blocked[i, 0] = f
        blocked[i, 1] = l
        blocked[i, 2] = r
        lane[i] = new_lane
        v = speed[i]
        if a == 0:
            v += accel_step
        elif a == 1:
            v -= accel_step
        if v > cap:
            v = cap
        if v < 0.0:
            v = 0.0
        speed[i] = v
    for i in range(n):
        pos[i] = _wrap(pos[i] + speed[i] * advance_per_mph, ring)


@njit(cache=True)
def _count_violations(lane, pos, speed, length, ring, max_speed):
    bad = 0
    n = lane.shape[0]
    for i in range(n):
        if speed[i] < 0.0 or speed[i] > max_speed:
            bad += 1
        for j in range(i + 1, n):
            if lane[i] != lane[j]:
                continue
            d = _wrap(pos[j] - pos[i], ring)
            if d < length[i] or ring - d < length[j]:
                bad += 1
    return bad


@njit(cache=True)
def _run_chunk(
    lane, pos, speed, length, actions,
    ring, n_lanes, safety_ahead, safety_side, max_speed, accel_step, advance_per_mph,
):
    n = lane.shape[0]
    applied = np.empty(n, np.int64)
    blocked = np.empty((n, 3), np.bool_)
    bad = 0
    for t in range(actions.shape[0]):
        _step_kernel(
            lane, pos, speed, length, actions[t], applied, blocked,
            ring, n_lanes, safety_ahead, safety_side, max_speed, accel_step, advance_per_mph,
        )
        bad += _count_violations(lane, pos, speed, length, ring, max_speed)
    return bad


@njit(cache=True)
def _observe_kernel(ego, lane, pos, speed, length, ring, n_lanes, lanes_side, ahead, behind, max_speed, out):
    rows = ahead + behind
    width = 2 * lanes_side + 1
    ego_lane = lane[ego]
    anchor = int(math.ceil(pos[ego] + length[ego]))
    base = anchor - behind  # cell at the far-behind row
    for c in range(width):
        ln = ego_lane - lanes_side + c
        on_road = 0 <= ln < n_lanes
        for r in range(rows):
            out[c * rows + r] = 1.0 if on_road else 0.0
    for j in range(lane.shape[0]):
        c = lane[j] - (ego_lane - lanes_side)
        if c < 0 or c >= width:
            continue
        first = int(math.floor(pos[j]))
        last = int(math.ceil(pos[j] + length[j]))
        v = speed[j] / max_speed
        for cell in range(first, last):
            k = int(_wrap(cell - base, ring))
            if k < rows:
                r = rows - 1 - k
                idx = c * rows + r
                if v < out[idx]:
                    out[idx] = v


# --------------------------------------------------------------------------
# public API


def _advance_per_mph(cfg: SimConfig) -> float:
    return MPH_TO_MS * cfg.tick_seconds / cfg.patch_length


def init_world(cfg: SimConfig) -> World:
    """Place vehicles on RNG-drawn slots with at least ``safety_side`` clearance."""
    cfg.validate()
    rng = np.random.default_rng(cfg.rng_seed)
    slot = cfg.vehicle_length + cfg.safety_ahead
    per_lane = cfg.road_patches // slot
    if per_lane * cfg.lanes < cfg.n_vehicles:
        raise SetupError(
            f"cannot place {cfg.n_vehicles} vehicles: only {per_lane * cfg.lanes} slots"
        )
    chosen = rng.choice(per_lane * cfg.lanes, size=cfg.n_vehicles, replace=False)
    jitter = rng.uniform(0.0, cfg.safety_ahead - cfg.safety_side, size=cfg.n_vehicles)
    lane = (chosen // per_lane).astype(np.int64)
    pos = (chosen % per_lane) * float(slot) + jitter
    speed = rng.uniform(40.0, cfg.max_speed, size=cfg.n_vehicles)
    return _assemble(cfg, lane, pos, speed, rng)


def make_world(cfg: SimConfig, lanes, positions, speeds, seed: int | None = None) -> World:
    """Build a world from explicit vehicle placements (ids follow argument order)."""
    lane = np.asarray(lanes, dtype=np.int64)
    if not (len(lane) == len(positions) == len(speeds)):
        raise SetupError("lanes, positions and speeds must have equal length")
    cfg = cfg.replace(n_vehicles=len(lane), n_controllable=min(cfg.n_controllable, len(lane)))
    if np.any(lane < 0) or np.any(lane >= cfg.lanes):
        raise SetupError("lane index out of range")
    rng = np.random.default_rng(cfg.rng_seed if seed is None else seed)
    world = _assemble(
        cfg,
        lane,
        np.mod(np.asarray(positions, dtype=np.float64), cfg.road_patches),
        np.asarray(speeds, dtype=np.float64),
        rng,
    )
    if check_invariants(world):
        raise SetupError("explicit placement overlaps or has out-of-range speeds")
    return world


def _assemble(cfg, lane, pos, speed, rng) -> World:
    n = len(lane)
    policy = np.zeros(n, dtype=np.bool_)
    policy[: cfg.n_controllable] = True
    return World(
        cfg=cfg,
        lane=np.ascontiguousarray(lane, dtype=np.int64),
        pos=np.ascontiguousarray(pos, dtype=np.float64),
        speed=np.ascontiguousarray(speed, dtype=np.float64),
        length=np.full(n, cfg.vehicle_length, dtype=np.int64),
        policy=policy,
        rng=rng,
    )


def check_invariants(world: World) -> int:
    """Number of overlapping same-lane pairs plus out-of-range speeds."""
    cfg = world.cfg
    return int(
        _count_violations(world.lane, world.pos, world.speed, world.length, cfg.road_patches, cfg.max_speed)
    )


def cell_value(world: World, lane: int, patch: int) -> float:
    cfg = world.cfg
    if lane < 0 or lane >= cfg.lanes:
        return 0.0
    patch %= cfg.road_patches
    value = cfg.max_speed
    for j in np.flatnonzero(world.lane == lane):
        first = math.floor(world.pos[j])
        span = math.ceil(world.pos[j] + world.length[j]) - first
        if (patch - first) % cfg.road_patches < span:
            value = min(value, float(world.speed[j]))
    return value


def observe(world: World, vehicle_id: int, spec: ObservationSpec) -> Observation:
    _check_id(world, vehicle_id)
    out = np.empty(spec.n_cells, dtype=np.float64)
    cfg = world.cfg
    _observe_kernel(
        vehicle_id, world.lane, world.pos, world.speed, world.length,
        cfg.road_patches, cfg.lanes, spec.lanes_side, spec.patches_ahead, spec.patches_behind,
        cfg.max_speed, out,
    )
    return Observation(out, float(world.speed[vehicle_id]))


def observe_many(world: World, vehicle_ids, spec: ObservationSpec) -> np.ndarray:
    """Stacked observation vectors, one row per vehicle id."""
    out = np.empty((len(vehicle_ids), spec.n_cells), dtype=np.float64)
    cfg = world.cfg
    for k, vid in enumerate(vehicle_ids):
        _observe_kernel(
            vid, world.lane, world.pos, world.speed, world.length,
            cfg.road_patches, cfg.lanes, spec.lanes_side, spec.patches_ahead, spec.patches_behind,
            cfg.max_speed, out[k],
        )
    return out


def safety_filter(world: World, vehicle_id: int, intended: Action):
    """Apply the safety system to one intended action without mutating the world.

    Returns ``(applied, speed_cap, (front, left, right))``.
    """
    _check_id(world, vehicle_id)
    cfg = world.cfg
    applied, _, cap, f, l, r = _decide(
        vehicle_id, int(intended), world.lane, world.pos, world.speed, world.length,
        cfg.road_patches, cfg.lanes, cfg.safety_ahead, cfg.safety_side, cfg.max_speed,
    )
    return Action(applied), float(cap), (bool(f), bool(l), bool(r))


def random_action(rng: np.random.Generator) -> Action:
    return Action(int(rng.integers(N_ACTIONS)))


def step(world: World, actions: Mapping[int, int] | None = None) -> StepOutcome:
    """Advance the world by one tick.

    Every tick draws one random action per vehicle from the world RNG; policy
    vehicles then use their entry in ``actions`` instead.
    """
    cfg = world.cfg
    actions = actions or {}
    intended = world.rng.integers(N_ACTIONS, size=world.n_vehicles).astype(np.int64)
    for vid in world.policy_ids:
        if vid not in actions:
            raise KeyError(f"no action supplied for policy vehicle {vid}")
        intended[vid] = int(actions[vid])
    for vid in actions:
        if not world.policy[vid]:
            raise KeyError(f"vehicle {vid} is not policy-controlled")
    prev = (world.lane.copy(), world.pos.copy(), world.speed.copy())
    applied = np.empty(world.n_vehicles, np.int64)
    blocked = np.empty((world.n_vehicles, 3), np.bool_)
    _step_kernel(
        world.lane, world.pos, world.speed, world.length, intended, applied, blocked,
        cfg.road_patches, cfg.lanes, cfg.safety_ahead, cfg.safety_side, cfg.max_speed,
        cfg.accel_step, _advance_per_mph(cfg),
    )
    tick = world.tick
    world.tick += 1
    bad = check_invariants(world)
    if bad:
        raise InvariantViolation(f"{bad} overlap/speed violations after tick {tick}")
    return StepOutcome(tick, applied, world.speed.copy(), blocked, *prev)


def run_random(world: World, n_ticks: int, chunk: int = 10_000) -> int:
    """Run ``n_ticks`` with every vehicle acting randomly; returns the violation count.

    Checks overlap and speed bounds after each tick inside the compiled loop.
    Policy vehicles are treated as random here.
    """
    cfg = world.cfg
    bad = 0
    done = 0
    while done < n_ticks:
        k = min(chunk, n_ticks - done)
        acts = world.rng.integers(N_ACTIONS, size=(k, world.n_vehicles)).astype(np.int64)
        bad += int(
            _run_chunk(
                world.lane, world.pos, world.speed, world.length, acts,
                cfg.road_patches, cfg.lanes, cfg.safety_ahead, cfg.safety_side, cfg.max_speed,
                cfg.accel_step, _advance_per_mph(cfg),
            )
        )
        done += k
        world.tick += k
    return bad


def _check_id(world: World, vehicle_id: int) -> None:
    if not 0 <= vehicle_id < world.n_vehicles:
        raise KeyError(f"unknown vehicle id {vehicle_id}")


# --------------------------------------------------------------------------
# trajectory log

LOG_COLUMNS = ("tick", "vehicle_id", "lane", "patch_pos", "speed", "applied_action", "blocked_flags")


def flags_to_str(front: bool, left: bool, right: bool) -> str:
    return f"{int(front)}{int(left)}{int(right)}"


class TrajectoryLog:
    """Append-only CSV writer; one row per vehicle per tick.

    Rows carry the state a vehicle had at the start of the tick together with
    the action applied and the catchment flags seen during that tick.
    """

    def __init__(self, fh):
        self._writer = csv.writer(fh, lineterminator="\n")
        self._writer.writerow(LOG_COLUMNS)

    def record(self, outcome: StepOutcome) -> None:
        rows = []
        for vid in range(len(outcome.applied)):
            f, l, r = outcome.blocked[vid]
            rows.append(
                (
                    outcome.tick,
                    vid,
                    int(outcome.prev_lane[vid]),
                    f"{outcome.prev_pos[vid]:.4f}",
                    f"{outcome.prev_speed[vid]:.4f}",
                    ACTION_LABELS[outcome.applied[vid]],
                    flags_to_str(f, l, r),
                )
            )
        self._writer.writerows(rows)
