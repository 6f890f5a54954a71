"""Per-robot mission state machine, turn-sequence exploration policy,
tunnel selection, and return-to-base over the keyframe graph.

Assumed transition edge set (operator commands in caps):
    START    --START_EXPLORE-->  EXPLORE
    EXPLORE  --STOP-->           STOP
    EXPLORE  --RETURN_NOW-->     MOVEBASE
    EXPLORE  --timeout-->        MOVEBASE
    EXPLORE  --no tunnels-->     MOVEBASE
    MOVEBASE --arrival-->        STOP
    MOVEBASE --STOP-->           STOP
    STOP     --START_EXPLORE-->  EXPLORE        (redeploy)
    any non-ESTOP --ESTOP-->     ESTOP          (absorbing)
    ESTOP    --RELEASE-->        STOP
SET_TIME_LIMIT is legal in any non-ESTOP mode; SET_TURNS only in START.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from .geometry import Pose2, angle_diff
from .posegraph import PoseGraph, bfs_path
from .tunnels import TunnelTrack


class Mode(str, Enum):
    START = "START"
    EXPLORE = "EXPLORE"
    STOP = "STOP"
    MOVEBASE = "MOVEBASE"
    ESTOP = "ESTOP"


class Turn(str, Enum):
    LEFT = "LEFT"
    RIGHT = "RIGHT"


class IllegalTransition(Exception):
    """Raised for (mode, command) pairs outside the transition graph."""


class UnreachableBase(Exception):
    """BFS found no path to keyframe 0 — the graph is disconnected."""


# bearing magnitude a newly confirmed track needs before it can consume
# a queued turn; straight-ahead tracks never count as side tunnels
TURN_MIN_BEARING = math.radians(25.0)
THETA_SIM = math.radians(20.0)      # tunnel-vs-vertex similarity threshold
D_ADVANCE = 2.0                     # meters; vertex reached radius
UNTRAVERSABLE_HOLD = 30.0           # seconds a NO_PATH mark lasts
NO_TUNNEL_GRACE = 2.0               # seconds without any track before returning
TURN_POP_SPACING = 8.0              # meters between queue pops (one per junction)


@dataclass
class MissionState:
    mode: Mode = Mode.START
    time_limit: float = 600.0
    elapsed: float = 0.0
    turn_queue: list = field(default_factory=list)      # [Turn]
    current_tunnel: int | None = None
    seen_track_ids: set = field(default_factory=set)
    return_path: list | None = None                     # keyframe node ids
    return_index: int = 0
    no_tunnel_since: float | None = None
    last_pop_xy: tuple | None = None
    log: list = field(default_factory=list)             # transition lines

    def _transition(self, mode: Mode, now: float, why: str):
        if mode != self.mode:
            self.log.append(f"{now:.3f} {self.mode.value} -> {mode.value} ({why})")
            self.mode = mode


def handle_command(state: MissionState, cmd: str, value=None,
                   now: float = 0.0) -> MissionState:
    """Apply one operator command, enforcing transition legality."""
    cmd = cmd.lower()
    if state.mode is Mode.ESTOP and cmd != "release":
        raise IllegalTransition(f"{cmd} in ESTOP")
    if cmd == "estop":
        state._transition(Mode.ESTOP, now, "operator estop")
    elif cmd == "release":
        if state.mode is not Mode.ESTOP:
            raise IllegalTransition("release outside ESTOP")
        state._transition(Mode.STOP, now, "estop released")
    elif cmd == "set_time_limit":
        state.time_limit = float(value)
        state.log.append(f"{now:.3f} time_limit={state.time_limit:.1f}")
    elif cmd == "set_turns":
        if state.mode is not Mode.START:
            raise IllegalTransition("set_turns outside START")
        state.turn_queue = [Turn(v) for v in value]
        state.log.append(f"{now:.3f} turns={[t.value for t in state.turn_queue]}")
    elif cmd == "start_explore":
        if state.mode not in (Mode.START, Mode.STOP):
            raise IllegalTransition(f"start_explore in {state.mode.value}")
        state._transition(Mode.EXPLORE, now, "operator start")
    elif cmd == "stop":
        if state.mode not in (Mode.EXPLORE, Mode.MOVEBASE):
            raise IllegalTransition(f"stop in {state.mode.value}")
        state._transition(Mode.STOP, now, "operator stop")
    elif cmd == "return_now":
        if state.mode is not Mode.EXPLORE:
            raise IllegalTransition(f"return_now in {state.mode.value}")
        state._transition(Mode.MOVEBASE, now, "operator return")
    else:
        raise IllegalTransition(f"unknown command {cmd}")
    return state


def tick(state: MissionState, dt: float, now: float = 0.0) -> MissionState:
    """Advance mission time; EXPLORE past the time limit returns to base."""
    if state.mode is Mode.EXPLORE:
        state.elapsed += dt
        if state.elapsed > state.time_limit:
            state._transition(Mode.MOVEBASE, now, "time limit")
    return state


def select_tunnel(state: MissionState, tracks: list, no_path: bool,
                  now: float = 0.0, pose: Pose2 | None = None):
    """Choose the tunnel to follow; returns the chosen TunnelTrack or None.

    Default is the confirmed traversable track nearest the current
    heading (smallest |bearing|, ties toward the left). A newly
    confirmed side track matching the turn-queue head takes over and
    pops the queue. NO_PATH feedback marks the current tunnel
    untraversable for a while. No candidates left switches the mission
    to MOVEBASE.
    """
    if state.mode is not Mode.EXPLORE:
        return None

    if no_path and state.current_tunnel is not None:
        for t in tracks:
            if t.id == state.current_tunnel:
                t.untraversable_until = now + UNTRAVERSABLE_HOLD
                state.log.append(f"{now:.3f} tunnel {t.id} untraversable")
        state.current_tunnel = None

    usable = [t for t in tracks if t.confirmed and not t.is_untraversable(now)]

    # queue pop on a newly confirmed side tunnel; at most one pop per
    # junction — tracks confirming near the last pop belong to the same
    # intersection and must not consume another queued turn
    fresh = [t for t in usable if t.id not in state.seen_track_ids
             and abs(t.bearing) > TURN_MIN_BEARING]
    # a track is "seen" once it has presented as a side tunnel; a track
    # confirmed nearly dead-ahead (grazing view into a junction arm)
    # stays pop-eligible until its bearing swings past the threshold
    state.seen_track_ids.update(t.id for t in tracks if t.confirmed
                                and abs(t.bearing) > TURN_MIN_BEARING)
    same_junction = (pose is not None and state.last_pop_xy is not None
                     and math.hypot(pose.x - state.last_pop_xy[0],
                                    pose.y - state.last_pop_xy[1])
                     < TURN_POP_SPACING)
    if state.turn_queue and fresh and not same_junction:
        head = state.turn_queue[0]
        side = [t for t in fresh if (t.bearing > 0) == (head is Turn.LEFT)]
        if side:
            chosen = min(side, key=lambda t: abs(t.bearing))
            state.turn_queue.pop(0)
            state.current_tunnel = chosen.id
            if pose is not None:
                state.last_pop_xy = (pose.x, pose.y)
            state.log.append(f"{now:.3f} turn {head.value} -> tunnel {chosen.id}")
            return chosen

    by_id = {t.id: t for t in usable}
    if state.current_tunnel in by_id:
        return by_id[state.current_tunnel]

    if not usable:
        state.current_tunnel = None
        pending = [t for t in tracks if not t.confirmed
                   and not t.is_untraversable(now)]
        if pending:
            state.no_tunnel_since = None
        elif state.no_tunnel_since is None:
            state.no_tunnel_since = now
        elif now - state.no_tunnel_since >= NO_TUNNEL_GRACE:
            state._transition(Mode.MOVEBASE, now, "no tunnels")
        return None
    state.no_tunnel_since = None

    # nearest-heading with left-leaning tie break
    chosen = min(usable, key=lambda t: (round(abs(t.bearing), 9), -t.bearing))
    state.current_tunnel = chosen.id
    return chosen


def return_to_base(state: MissionState, graph: PoseGraph, pose: Pose2,
                   tracks: list, now: float = 0.0) -> np.ndarray | None:
    """Direction (unit world vector) toward base along the keyframe graph.

    Returns None once keyframe 0 is reached (mission moves to STOP).
    """
    if state.mode is not Mode.MOVEBASE:
        return None
    if 0 not in graph.nodes:
        raise UnreachableBase("graph has no base keyframe")

    if state.return_path is None:
        nearest = min(graph.nodes, key=lambda n: graph.nodes[n].distance_to(pose))
        path = bfs_path(graph, nearest, 0)
        if path is None:
            raise UnreachableBase(f"no path from keyframe {nearest}")
        state.return_path = path
        state.return_index = 0

    path = state.return_path
    # re-anchor forward on the chain vertex nearest the robot — local
    # detours can overtake vertices, leaving a stale index whose vertex
    # sits behind the robot
    dists = [graph.nodes[k].distance_to(pose) for k in path]
    state.return_index = max(state.return_index, int(np.argmin(dists)))
    # advance past vertices we are already near
    while (state.return_index < len(path) - 1
           and graph.nodes[path[state.return_index]].distance_to(pose) < D_ADVANCE):
        state.return_index += 1

    target = graph.nodes[path[state.return_index]]
    if path[state.return_index] == 0 and target.distance_to(pose) < D_ADVANCE:
        state._transition(Mode.STOP, now, "arrived at base")
        return None

    vertex_bearing = math.atan2(target.y - pose.y, target.x - pose.x)
    direction = vertex_bearing
    best = None
    for t in tracks:
        if not t.confirmed or t.is_untraversable(now):
            continue
        world_b = pose.theta + t.bearing
        d = abs(angle_diff(world_b, vertex_bearing))
        if d < THETA_SIM and (best is None or d < best[0]):
            best = (d, world_b)
    if best is not None:
        direction = best[1]
    return np.array([math.cos(direction), math.sin(direction)])
