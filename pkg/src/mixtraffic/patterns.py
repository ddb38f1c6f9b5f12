"""Congestion-pattern annotation of trajectory logs.

An incident opens when a trained agent's front safety catchment becomes
occupied and stays open until it clears. Each incident is annotated with

* ``B``: front, left and right catchments all blocked at onset (off-road
  sides count as blocked),
* ``S``: the agent's speed at onset,
* ``D``: speed lost within the following half second, floored at 0,
* ``C``: a policy-controlled vehicle sits in one of the blocking catchments.
"""

from __future__ import annotations

import csv
import math
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .sim import ACTION_LABELS, LOG_COLUMNS

BIN_WIDTH = 5.0
N_BINS = 16  # [0,5) ... [75,80]


class LogParseError(ValueError):
    def __init__(self, source, line: int, message: str):
        super().__init__(f"{source}:{line}: {message}")
        self.source = source
        self.line = line


@dataclass(frozen=True)
class Geometry:
    road_patches: int = 700
    lanes: int = 7
    vehicle_length: int = 4
    safety_ahead: int = 6
    safety_side: int = 2

    @classmethod
    def from_sim(cls, cfg) -> "Geometry":
        return cls(cfg.road_patches, cfg.lanes, cfg.vehicle_length, cfg.safety_ahead, cfg.safety_side)


@dataclass
class Trajectory:
    """Column arrays of one trajectory log, rows in file order."""

    tick: np.ndarray
    vehicle_id: np.ndarray
    lane: np.ndarray
    pos: np.ndarray
    speed: np.ndarray
    action: np.ndarray
    flags: np.ndarray  # (n, 3) bool: front, left, right
    _by_tick: dict = field(default=None, repr=False)

    def __len__(self):
        return len(self.tick)

    @classmethod
    def from_rows(cls, rows: Sequence[tuple]) -> "Trajectory":
        """Rows of ``(tick, vehicle_id, lane, pos, speed, action, (front, left, right))``."""
        n = len(rows)
        t = cls(
            np.array([r[0] for r in rows], dtype=np.int64).reshape(n),
            np.array([r[1] for r in rows], dtype=np.int64).reshape(n),
            np.array([r[2] for r in rows], dtype=np.int64).reshape(n),
            np.array([r[3] for r in rows], dtype=np.float64).reshape(n),
            np.array([r[4] for r in rows], dtype=np.float64).reshape(n),
            np.array([r[5] for r in rows], dtype=np.int64).reshape(n),
            np.array([r[6] for r in rows], dtype=bool).reshape(n, 3),
        )
        return t

    def vehicles(self) -> list[int]:
        return sorted(set(self.vehicle_id.tolist()))

    def agent(self, vehicle_id: int) -> np.ndarray:
        """Row indices of one vehicle, ordered by tick."""
        idx = np.flatnonzero(self.vehicle_id == vehicle_id)
        return idx[np.argsort(self.tick[idx], kind="stable")]

    def at_tick(self, tick: int) -> np.ndarray:
        if self._by_tick is None:
            groups = defaultdict(list)
            for i, t in enumerate(self.tick.tolist()):
                groups[t].append(i)
            self._by_tick = {t: np.array(v, dtype=np.int64) for t, v in groups.items()}
        return self._by_tick.get(tick, np.empty(0, dtype=np.int64))


def parse_log(source) -> Trajectory:
    """Read a trajectory CSV (path or open text file)."""
    if isinstance(source, (str, Path)):
        with open(source, newline="") as fh:
            return _parse(fh, str(source))
    return _parse(source, getattr(source, "name", "<log>"))


def _parse(fh, name: str) -> Trajectory:
    reader = csv.reader(fh)
    header = next(reader, None)
    if header is None:
        return Trajectory.from_rows([])
    if tuple(header) != LOG_COLUMNS:
        raise LogParseError(name, 1, f"unexpected header {header}")
    rows = []
    for line, rec in enumerate(reader, start=2):
        if len(rec) != len(LOG_COLUMNS):
            raise LogParseError(name, line, f"expected {len(LOG_COLUMNS)} fields, got {len(rec)}")
        try:
            tick, vid, lane = int(rec[0]), int(rec[1]), int(rec[2])
            pos, speed = float(rec[3]), float(rec[4])
        except ValueError as exc:
            raise LogParseError(name, line, str(exc)) from None
        if rec[5] not in ACTION_LABELS:
            raise LogParseError(name, line, f"unknown action {rec[5]!r}")
        flags = rec[6]
        if len(flags) != 3 or set(flags) - {"0", "1"}:
            raise LogParseError(name, line, f"bad blocked_flags {flags!r}")
        if not (math.isfinite(pos) and math.isfinite(speed)):
            raise LogParseError(name, line, "non-finite value")
        rows.append((tick, vid, lane, pos, speed, ACTION_LABELS.index(rec[5]), tuple(c == "1" for c in flags)))
    return Trajectory.from_rows(rows)


# --------------------------------------------------------------------------
# detection and annotation


@dataclass(frozen=True)
class EventWindow:
    agent_id: int
    start_tick: int
    end_tick: int | None  # first clear tick, None if still blocked at log end


@dataclass(frozen=True)
class CongestionEvent:
    agent_id: int
    start_tick: int
    B: bool
    S: float
    D: float
    C: bool


def detect_onsets(front: Sequence[bool]) -> list[int]:
    """Positions where the front flag switches on (a leading ``True`` counts)."""
    front = np.asarray(front, dtype=bool)
    if front.size == 0:
        return []
    prev = np.concatenate(([False], front[:-1]))
    return np.flatnonzero(front & ~prev).tolist()


def detect_events(traj: Trajectory, agent_id: int) -> list[EventWindow]:
    rows = traj.agent(agent_id)
    front = traj.flags[rows, 0]
    ticks = traj.tick[rows]
    out = []
    for k in detect_onsets(front):
        clear = np.flatnonzero(~front[k:])
        end = int(ticks[k + clear[0]]) if clear.size else None
        out.append(EventWindow(agent_id, int(ticks[k]), end))
    return out


def window_ticks(tick_seconds: float, horizon: float = 0.5) -> int:
    return math.ceil(horizon / tick_seconds - 1e-9)


def _occupied_by(traj: Trajectory, row: int, geom: Geometry) -> dict[str, list[int]]:
    """Vehicles inside the agent's front/left/right catchments at the row's tick."""
    L = geom.road_patches
    lane, pos = int(traj.lane[row]), float(traj.pos[row])
    me = int(traj.vehicle_id[row])
    out = {"front": [], "left": [], "right": []}
    front_start = pos + geom.vehicle_length
    side_start = pos - geom.safety_side
    side_span = geom.vehicle_length + 2 * geom.safety_side
    for j in traj.at_tick(int(traj.tick[row])):
        vid = int(traj.vehicle_id[j])
        if vid == me:
            continue
        lj, pj = int(traj.lane[j]), float(traj.pos[j])
        if lj == lane and (pj - front_start) % L < geom.safety_ahead:
            out["front"].append(vid)
        for side, target in (("left", lane - 1), ("right", lane + 1)):
            if lj == target:
                d = (pj - side_start) % L
                if d < side_span or d > L - geom.vehicle_length:
                    out[side].append(vid)
    return out


def annotate_event(
    window: EventWindow,
    traj: Trajectory,
    tick_seconds: float,
    policy_ids: Iterable[int],
    geom: Geometry,
) -> CongestionEvent | None:
    """Fill in B, S, D, C for one incident; ``None`` if the log ends too early."""
    rows = traj.agent(window.agent_id)
    ticks = traj.tick[rows]
    k = int(np.searchsorted(ticks, window.start_tick))
    n = window_ticks(tick_seconds)
    after = rows[k + 1 : k + 1 + n]
    if len(after) < n or int(traj.tick[after[-1]]) != window.start_tick + n:
        return None
    onset = rows[k]
    front, left, right = (bool(v) for v in traj.flags[onset])
    S = float(traj.speed[onset])
    D = max(0.0, S - float(traj.speed[after].min()))
    occ = _occupied_by(traj, onset, geom)
    policy = set(policy_ids)
    blockers = set(occ["front"]) if front else set()
    if left:
        blockers |= set(occ["left"])
    if right:
        blockers |= set(occ["right"])
    return CongestionEvent(window.agent_id, window.start_tick, front and left and right, S, D, bool(blockers & policy))


@dataclass
class Annotated:
    events: list[CongestionEvent]
    dropped: int


def annotate_log(traj: Trajectory, agent_ids: Iterable[int], policy_ids: Iterable[int], geom: Geometry, tick_seconds: float) -> Annotated:
    policy = list(policy_ids)
    events, dropped = [], 0
    for agent in agent_ids:
        for win in detect_events(traj, agent):
            ev = annotate_event(win, traj, tick_seconds, policy, geom)
            if ev is None:
                dropped += 1
            else:
                events.append(ev)
    return Annotated(events, dropped)


# --------------------------------------------------------------------------
# aggregation


def decel_histogram(events: Iterable[CongestionEvent]) -> np.ndarray:
    bins = np.zeros(N_BINS, dtype=np.int64)
    for ev in events:
        bins[min(int(ev.D // BIN_WIDTH), N_BINS - 1)] += 1
    return bins


def bin_edges() -> list[tuple[float, float]]:
    return [(k * BIN_WIDTH, (k + 1) * BIN_WIDTH) for k in range(N_BINS)]


def regression_slope(points: Sequence[tuple[float, float]]) -> float:
    """Ordinary least-squares slope of y on x."""
    x = np.array([p[0] for p in points], dtype=float)
    y = np.array([p[1] for p in points], dtype=float)
    if len(set(x.tolist())) < 2:
        raise ValueError("regression needs at least two distinct x values")
    xc = x - x.mean()
    return float(np.dot(xc, y - y.mean()) / np.dot(xc, xc))


@dataclass
class PatternRow:
    strategy: str
    n_agents: int
    n_cp: int
    n_full_block: int
    n_coop: int
    histogram: np.ndarray


@dataclass
class PatternReport:
    rows: list[PatternRow]

    def check(self) -> None:
        for r in self.rows:
            if int(r.histogram.sum()) != r.n_cp:
                raise AssertionError(f"histogram does not partition n_cp for {r.strategy}/{r.n_agents}")
            if r.n_full_block > r.n_cp or r.n_coop > r.n_cp:
                raise AssertionError("sub-counts exceed n_cp")


def summarize(event_sets: Mapping[tuple[str, int], Sequence[CongestionEvent]]) -> PatternReport:
    rows = []
    for (strategy, n_agents), events in sorted(event_sets.items()):
        events = list(events)
        rows.append(
            PatternRow(
                strategy,
                n_agents,
                len(events),
                sum(ev.B for ev in events),
                sum(ev.C for ev in events),
                decel_histogram(events),
            )
        )
    report = PatternReport(rows)
    report.check()
    return report


EVENT_COLUMNS = ("agent_id", "start_tick", "B", "S", "D", "C")


def write_events(path: Path, events: Iterable[CongestionEvent], extra: tuple = ()) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(EVENT_COLUMNS)
        for ev in events:
            w.writerow((ev.agent_id, ev.start_tick, int(ev.B), f"{ev.S:.4f}", f"{ev.D:.4f}", int(ev.C)))


def write_report(path: Path, report: PatternReport) -> None:
    report.check()
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("strategy", "n_agents", "n_cp", "n_full_block", "n_coop"))
        for r in report.rows:
            w.writerow((r.strategy, r.n_agents, r.n_cp, r.n_full_block, r.n_coop))


def write_histogram(path: Path, report: PatternReport) -> None:
    report.check()
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("strategy", "n_agents", "bin_lo", "bin_hi", "count"))
        for r in report.rows:
            for (lo, hi), count in zip(bin_edges(), r.histogram):
                w.writerow((r.strategy, r.n_agents, f"{lo:g}", f"{hi:g}", int(count)))
