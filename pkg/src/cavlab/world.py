"""Discrete two-lane road micro-simulation.

Geometry: lane 0 is the left-hand (normal speed) lane, lane 1 the right-hand
(overtaking) lane; cells run 0..length-1 and the goal line sits at
pos >= length. Obstacle vehicles hold the speed of their lane and despawn at
the road end. The agent observes the world through a 7-direction scanner and
steers with 9 composite actions (3 lateral x 3 speed).

Scanner ray layout, in reading order:

    [front, front-left, front-right, left, right, rear-left, rear-right]

`front` walks the agent's own lane forward; the four diagonal rays walk the
adjacent lane (the single other lane of the two-lane road) forward/backward
with one cell of longitudinal offset per step; `left`/`right` probe the
laterally adjacent cell, reading 0 when it is off-road or occupied. A ray is
blocked by the nearest obstacle or by the lateral road edge (the wall the
agent can bump into); longitudinally the road is open at both ends, so the
start and the goal line never block a ray. Each reading is the count of free
cells before the blocker, capped at scan_range.

The reward's speed terms apply against `agent_speed_limit` (default: the
global max agent speed for every lane); `lane_speed_limit` is the constant
speed of the obstacle traffic per lane.
"""

from __future__ import annotations

from dataclasses import dataclass, fields
from enum import IntEnum
from typing import NamedTuple, Optional

from .rng import Rng


class ConfigError(ValueError):
    """Invalid configuration value or unknown configuration key."""


class SpawnError(ValueError):
    """World infeasible for the requested obstacle count."""


class Dir(IntEnum):
    LEFT = 0
    STAY = 1
    RIGHT = 2


class Spd(IntEnum):
    DEC = 0
    KEEP = 1
    INC = 2


class Event(IntEnum):
    ALIVE = 0
    GOAL = 1
    CRASH = 2
    BUMP = 3


class ActionPair(NamedTuple):
    dir: Dir
    spd: Spd

    @property
    def index(self) -> int:
        return self.dir * 3 + self.spd


# Fixed total ordering Left<Stay<Right (major), Dec<Keep<Inc (minor):
# index 0 = (Left, Dec) ... index 8 = (Right, Inc).
ACTIONS: tuple[ActionPair, ...] = tuple(
    ActionPair(d, s) for d in (Dir.LEFT, Dir.STAY, Dir.RIGHT) for s in (Spd.DEC, Spd.KEEP, Spd.INC)
)

N_ACTIONS = 9


class VehicleState(NamedTuple):
    lane: int
    pos: int
    speed: int


class WorldState(NamedTuple):
    agent: VehicleState
    obstacles: tuple[VehicleState, ...]
    step: int


class ScannerReading(NamedTuple):
    dist: tuple[int, int, int, int, int, int, int]


class StepOutcome(NamedTuple):
    next: WorldState
    event: Event
    traversed: tuple[tuple[int, int], ...]


@dataclass(frozen=True)
class RoadConfig:
    length: int = 66
    lanes: int = 2
    lane_speed_limit: tuple[int, ...] = (1, 2)
    max_agent_speed: int = 3
    scan_range: int = 5
    n_obstacles: int = 6
    max_steps: int = 200
    agent_speed_limit: Optional[tuple[int, ...]] = None  # None: max_agent_speed per lane

    def __post_init__(self):
        object.__setattr__(self, "lane_speed_limit", tuple(self.lane_speed_limit))
        if self.agent_speed_limit is None:
            object.__setattr__(self, "agent_speed_limit", (self.max_agent_speed,) * self.lanes)
        else:
            object.__setattr__(self, "agent_speed_limit", tuple(self.agent_speed_limit))
        if self.length < 2:
            raise ConfigError(f"length must be >= 2, got {self.length}")
        if self.lanes != 2:
            raise ConfigError(f"only lanes=2 is supported, got {self.lanes}")
        if len(self.lane_speed_limit) != self.lanes:
            raise ConfigError("lane_speed_limit needs one entry per lane")
        for v in self.lane_speed_limit:
            if not 1 <= v <= self.max_agent_speed:
                raise ConfigError(f"lane speed {v} outside [1, {self.max_agent_speed}]")
        if len(self.agent_speed_limit) != self.lanes:
            raise ConfigError("agent_speed_limit needs one entry per lane")
        for v in self.agent_speed_limit:
            if v < 1:
                raise ConfigError("agent speed limits must be >= 1")
        if self.scan_range < 1:
            raise ConfigError("scan_range must be >= 1")
        if self.n_obstacles < 0:
            raise ConfigError("n_obstacles must be >= 0")
        # max_steps >= 0: degenerate caps (including 0) are allowed at the type
        # level; the CLI checks training viability (max_steps >= length/max speed).
        if self.max_steps < 0:
            raise ConfigError("max_steps must be >= 0")

    @classmethod
    def from_dict(cls, d: dict) -> "RoadConfig":
        return cls(**_checked_fields(cls, d))


@dataclass(frozen=True)
class RewardConfig:
    alive_or_goal: float = 0.1
    shift_penalty: float = -0.1
    crash_or_bump: float = -10.0
    speed_bonus_divisor: float = 10.0
    overspeed_factor: float = 2.0

    @classmethod
    def from_dict(cls, d: dict) -> "RewardConfig":
        return cls(**_checked_fields(cls, d))


def _checked_fields(cls, d: dict) -> dict:
    names = {f.name for f in fields(cls)}
    unknown = set(d) - names
    if unknown:
        raise ConfigError(f"unknown {cls.__name__} keys: {sorted(unknown)}")
    return dict(d)


def spawn_world(cfg: RoadConfig, rng: Rng) -> WorldState:
    """Agent at (0, 0, 1) plus n_obstacles distinct cells in pos in [4, length-1]."""
    span = cfg.length - 4
    cells = cfg.lanes * max(span, 0)
    if cfg.n_obstacles > cells:
        raise SpawnError(f"{cfg.n_obstacles} obstacles do not fit in {cells} spawn cells")
    agent = VehicleState(0, 0, 1)
    if cfg.n_obstacles == 0:
        return WorldState(agent, (), 0)
    limits = cfg.lane_speed_limit
    obstacles: list[VehicleState] = []
    if cfg.n_obstacles * 2 <= cells:
        taken = set()
        while len(obstacles) < cfg.n_obstacles:
            lane = rng.randrange(cfg.lanes)
            pos = 4 + rng.randrange(span)
            if (lane, pos) in taken:
                continue
            taken.add((lane, pos))
            obstacles.append(VehicleState(lane, pos, limits[lane]))
    else:
        # dense spawns: rejection would stall, draw without replacement instead
        candidates = [(lane, pos) for lane in range(cfg.lanes) for pos in range(4, cfg.length)]
        for i in range(cfg.n_obstacles):
            j = i + rng.randrange(len(candidates) - i)
            candidates[i], candidates[j] = candidates[j], candidates[i]
            lane, pos = candidates[i]
            obstacles.append(VehicleState(lane, pos, limits[lane]))
    return WorldState(agent, tuple(obstacles), 0)


def occupancy(world: WorldState) -> dict[tuple[int, int], int]:
    """(lane, pos) -> obstacle speed for the current world."""
    return {(o.lane, o.pos): o.speed for o in world.obstacles}


def _walk(occ, lane: int, start: int, step: int, rng_cap: int):
    """Count free cells along one longitudinal ray; return (count, blocker speed or None)."""
    free = 0
    pos = start
    for _ in range(rng_cap):
        pos += step
        spd = occ.get((lane, pos))
        if spd is not None:
            return free, spd
        free += 1
    return free, None


def scan_full(world: WorldState, cfg: RoadConfig, occ=None):
    """ScannerReading plus per-ray nearest-vehicle speed (None when no vehicle in range)."""
    if occ is None:
        occ = occupancy(world)
    lane, pos, _ = world.agent
    other = 1 - lane
    rng_cap = cfg.scan_range

    front, front_spd = _walk(occ, lane, pos, 1, rng_cap)
    diag_f, diag_f_spd = _walk(occ, other, pos, 1, rng_cap)
    diag_r, diag_r_spd = _walk(occ, other, pos, -1, rng_cap)

    def lateral(target_lane: int):
        if target_lane < 0 or target_lane >= cfg.lanes:
            return 0, None
        spd = occ.get((target_lane, pos))
        if spd is not None:
            return 0, spd
        return min(1, rng_cap), None  # next lateral cell is the far wall on 2 lanes

    left, left_spd = lateral(lane - 1)
    right, right_spd = lateral(lane + 1)

    reading = ScannerReading((front, diag_f, diag_f, left, right, diag_r, diag_r))
    speeds = (front_spd, diag_f_spd, diag_f_spd, left_spd, right_spd, diag_r_spd, diag_r_spd)
    return reading, speeds


def scan(world: WorldState, cfg: RoadConfig) -> ScannerReading:
    return scan_full(world, cfg)[0]


def apply_action(world: WorldState, action: ActionPair, cfg: RoadConfig) -> StepOutcome:
    """One simulation step: obstacles advance, then the agent shifts and sweeps.

    Event precedence Bump > Crash > Goal > Alive; a bump aborts the move (the
    speed change still applies), and the crash check covers exactly the cells
    pos+1..pos+new_speed in the post-shift lane against post-move obstacles.
    """
    length = cfg.length
    obstacles = tuple(
        VehicleState(o.lane, o.pos + o.speed, o.speed)
        for o in world.obstacles
        if o.pos + o.speed < length
    )
    agent = world.agent
    speed = agent.speed + (action.spd - 1)
    if speed < 0:
        speed = 0
    elif speed > cfg.max_agent_speed:
        speed = cfg.max_agent_speed

    lane = agent.lane + (action.dir - 1)
    if lane < 0 or lane >= cfg.lanes:
        nxt = WorldState(VehicleState(agent.lane, agent.pos, speed), obstacles, world.step + 1)
        return StepOutcome(nxt, Event.BUMP, ())

    new_pos = agent.pos + speed
    traversed = tuple((lane, p) for p in range(agent.pos + 1, new_pos + 1))
    occ = {(o.lane, o.pos) for o in obstacles}
    if any(cell in occ for cell in traversed):
        event = Event.CRASH
    elif new_pos >= length:
        event = Event.GOAL
    else:
        event = Event.ALIVE
    nxt = WorldState(VehicleState(lane, new_pos, speed), obstacles, world.step + 1)
    return StepOutcome(nxt, event, traversed)


def reward(
    event: Event,
    action: ActionPair,
    agent_speed: int,
    agent_lane: int,
    reward_cfg: RewardConfig,
    road_cfg: RoadConfig,
) -> float:
    """Immediate reward: sum of base, lateral-shift and speed terms.

    agent_speed/agent_lane are the post-update values for the step; the speed
    bonus applies at or below agent_speed_limit for the lane, the overspeed
    penalty above it regardless of outcome.
    """
    failed = event is Event.CRASH or event is Event.BUMP
    r = reward_cfg.crash_or_bump if failed else reward_cfg.alive_or_goal
    if action.dir != Dir.STAY:
        r += reward_cfg.shift_penalty
    if agent_speed <= road_cfg.agent_speed_limit[agent_lane]:
        if failed:
            r += -agent_speed
        else:
            r += agent_speed / reward_cfg.speed_bonus_divisor
    else:
        r += -reward_cfg.overspeed_factor * agent_speed
    return r
