"""Tabular Q-learning on the two-lane road.

State keys are tuples: (speed, 7 scanner distances) without V2V, plus 7
neighbor speeds (sentinel -1 when no vehicle is in range on a ray) with V2V.
The update rule is

    sample = r + gamma * max_a' Q(s', a')      (max term 0 on terminal steps)
    Q(s, a) <- (1 - alpha) * Q(s, a) + alpha * sample

Two independent RNG streams keep paired experiments honest: stream 0 spawns
worlds, stream 1 drives exploration, so V2V on/off runs with the same seed
visit identical worlds.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, fields
from typing import Iterable, NamedTuple, Optional

import numpy as np

from .rng import Rng
from .world import (
    ACTIONS,
    ActionPair,
    ConfigError,
    Event,
    N_ACTIONS,
    RoadConfig,
    RewardConfig,
    ScannerReading,
    VehicleState,
    WorldState,
    apply_action,
    reward,
    scan_full,
    spawn_world,
)

V2V_NONE = -1

WORLD_STREAM = 0
EXPLORE_STREAM = 1

StateKey = tuple

_ZEROS = (0.0,) * N_ACTIONS


def encode_state(
    speed: int,
    scan: ScannerReading,
    neighbor_speeds: Optional[tuple] = None,
    v2v: bool = False,
) -> StateKey:
    """Canonical observation key; neighbor speeds are ignored unless v2v."""
    if not v2v:
        return (speed, *scan.dist)
    if neighbor_speeds is None:
        raise ValueError("v2v encoding requires neighbor speeds")
    packed = tuple(V2V_NONE if s is None else s for s in neighbor_speeds)
    return (speed, *scan.dist, *packed)


class QTable:
    """Sparse map StateKey -> 9 action values; unvisited entries read 0."""

    __slots__ = ("entries", "v2v")

    def __init__(self, v2v: bool = False):
        self.entries: dict[StateKey, list[float]] = {}
        self.v2v = v2v

    def values(self, key: StateKey):
        """Read-only row (shared zeros when unvisited; do not mutate)."""
        return self.entries.get(key, _ZEROS)

    def row(self, key: StateKey) -> list[float]:
        row = self.entries.get(key)
        if row is None:
            row = [0.0] * N_ACTIONS
            self.entries[key] = row
        return row

    def __len__(self) -> int:
        return len(self.entries)

    def to_json(self) -> str:
        entries = [
            {"key": list(k), "q": list(v)} for k, v in self.entries.items()
        ]
        return json.dumps({"version": 1, "v2v": self.v2v, "entries": entries})

    @classmethod
    def from_json(cls, text: str) -> "QTable":
        doc = json.loads(text)
        if doc.get("version") != 1:
            raise ValueError(f"unsupported qtable version {doc.get('version')!r}")
        table = cls(v2v=bool(doc["v2v"]))
        for entry in doc["entries"]:
            row = [float(x) for x in entry["q"]]
            if len(row) != N_ACTIONS:
                raise ValueError("qtable row must have 9 values")
            table.entries[tuple(entry["key"])] = row
        return table


def q_update(
    q: QTable,
    s: StateKey,
    a: ActionPair,
    r: float,
    s_next: StateKey,
    terminal: bool,
    alpha: float,
    gamma: float,
) -> float:
    """Apply the update to Q(s, a) and return the new value."""
    nxt = 0.0 if terminal else max(q.values(s_next))
    row = q.row(s)
    idx = a.dir * 3 + a.spd
    value = (1.0 - alpha) * row[idx] + alpha * (r + gamma * nxt)
    row[idx] = value
    return value


def select_action(q: QTable, s: StateKey, epsilon: float, rng: Rng) -> ActionPair:
    """Epsilon-greedy with uniform tie-breaking over the argmax set.

    epsilon == 0 consumes no draw for the explore test, so greedy rollouts
    leave the stream untouched except on ties.
    """
    if epsilon > 0.0 and rng.random() < epsilon:
        return ACTIONS[rng.randrange(N_ACTIONS)]
    row = q.values(s)
    best = max(row)
    ties = [i for i in range(N_ACTIONS) if row[i] == best]
    if len(ties) == 1:
        return ACTIONS[ties[0]]
    return ACTIONS[ties[rng.randrange(len(ties))]]


def greedy_action(q: QTable, s: StateKey) -> ActionPair:
    """Deterministic argmax with first-index tie-break (evaluation traces)."""
    row = q.values(s)
    best = max(row)
    for i in range(N_ACTIONS):
        if row[i] == best:
            return ACTIONS[i]
    raise AssertionError("unreachable")


@dataclass(frozen=True)
class LearnConfig:
    alpha: float = 0.4
    gamma: float = 0.95
    episodes: int = 100_000
    epsilon_start: float = 1.0
    epsilon_end: float = 0.05
    epsilon_decay_episodes: int = 20_000
    seed: int = 0
    v2v: bool = False
    bucket: int = 1000

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise ConfigError("alpha must be in [0, 1]")
        if not 0.0 <= self.gamma < 1.0:
            raise ConfigError("gamma must be in [0, 1)")
        if not 0.0 <= self.epsilon_end <= self.epsilon_start <= 1.0:
            raise ConfigError("need 0 <= epsilon_end <= epsilon_start <= 1")
        if self.episodes < 0 or self.bucket < 1 or self.epsilon_decay_episodes < 0:
            raise ConfigError("episodes >= 0, bucket >= 1, decay episodes >= 0")

    @classmethod
    def from_dict(cls, d: dict) -> "LearnConfig":
        names = {f.name for f in fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ConfigError(f"unknown LearnConfig keys: {sorted(unknown)}")
        return cls(**d)


def epsilon_at(cfg: LearnConfig, episode: int) -> float:
    """Linear decay from epsilon_start to epsilon_end over the decay window."""
    if cfg.epsilon_decay_episodes <= 0 or episode >= cfg.epsilon_decay_episodes:
        return cfg.epsilon_end
    f = episode / cfg.epsilon_decay_episodes
    return cfg.epsilon_start + (cfg.epsilon_end - cfg.epsilon_start) * f


class EpisodeStats(NamedTuple):
    steps: int
    terminal: Event
    quick: bool


QUICK_LIMIT = 40  # steps; "quick finish" threshold


def _episode(
    road_cfg: RoadConfig,
    reward_cfg: RewardConfig,
    q: QTable,
    learn_cfg: LearnConfig,
    world_rng: Rng,
    explore_rng: Rng,
    epsilon: float,
    learn: bool,
    defer_goal: bool,
    pending=None,
):
    """Shared episode loop; returns (stats, pending goal transition or None).

    With defer_goal, a learned Goal step is not updated in place: (key, action,
    r) is handed back and settled at the start of the next episode against its
    first observation (continuing-drive semantics: the car keeps driving onto a
    fresh road). Crash/Bump/timeout are always terminal (max term 0).
    """
    v2v = learn_cfg.v2v
    alpha, gamma = learn_cfg.alpha, learn_cfg.gamma
    world = spawn_world(road_cfg, world_rng)
    max_steps = road_cfg.max_steps

    if max_steps == 0:
        return EpisodeStats(0, Event.ALIVE, False), pending

    reading, speeds = scan_full(world, road_cfg)
    key = encode_state(world.agent.speed, reading, speeds, v2v)
    if pending is not None:
        pk, pa, pr = pending
        q_update(q, pk, pa, pr, key, False, alpha, gamma)
    steps = 0
    while True:
        action = select_action(q, key, epsilon, explore_rng)
        outcome = apply_action(world, action, road_cfg)
        steps += 1
        agent = outcome.next.agent
        r = reward(outcome.event, action, agent.speed, agent.lane, reward_cfg, road_cfg)
        done = outcome.event is not Event.ALIVE
        cut = not done and steps >= max_steps
        if not done:
            reading, speeds = scan_full(outcome.next, road_cfg)
            next_key = encode_state(agent.speed, reading, speeds, v2v)
        else:
            next_key = key
        if learn:
            if outcome.event is Event.GOAL and defer_goal:
                return EpisodeStats(steps, Event.GOAL, steps < QUICK_LIMIT), (key, action, r)
            q_update(q, key, action, r, next_key, done or cut, alpha, gamma)
        if done:
            return EpisodeStats(steps, outcome.event, outcome.event is Event.GOAL and steps < QUICK_LIMIT), None
        if cut:
            return EpisodeStats(steps, Event.ALIVE, False), None
        world, key = outcome.next, next_key


def run_episode(
    road_cfg: RoadConfig,
    reward_cfg: RewardConfig,
    q: QTable,
    learn_cfg: LearnConfig,
    world_rng: Rng,
    explore_rng: Rng,
    epsilon: float = 0.0,
    learn: bool = False,
) -> EpisodeStats:
    """One standalone episode: spawn, then select/apply/reward(/update).

    All episode-ending steps (Goal, Crash, Bump, timeout) update with max
    term 0; timeout reports terminal=Alive in the stats.
    """
    stats, _ = _episode(
        road_cfg, reward_cfg, q, learn_cfg, world_rng, explore_rng, epsilon, learn, defer_goal=False
    )
    return stats


@dataclass(frozen=True)
class MetricsBucket:
    index: int
    episodes: int
    avg_time_to_goal: Optional[float]
    crash_rate: float
    quick_rate: float
    timeout_rate: float
    epsilon: float


def train(
    road_cfg: RoadConfig,
    reward_cfg: RewardConfig,
    learn_cfg: LearnConfig,
) -> tuple[QTable, list[MetricsBucket]]:
    """Run the full schedule and aggregate one MetricsBucket per `bucket` episodes.

    Training treats the drive as continuing: a Goal step is updated against
    the next episode's start observation (the car keeps driving onto a fresh
    road) rather than with max term 0, so finishing does not zero out future
    value. Crash/Bump/timeout stay terminal.
    """
    q = QTable(v2v=learn_cfg.v2v)
    world_rng = Rng(learn_cfg.seed, WORLD_STREAM)
    explore_rng = Rng(learn_cfg.seed, EXPLORE_STREAM)
    buckets: list[MetricsBucket] = []

    count = goals = goal_steps = crashes = quick = timeouts = 0
    eps = 0.0
    pending = None  # goal transition awaiting the next start observation
    for episode in range(learn_cfg.episodes):
        eps = epsilon_at(learn_cfg, episode)
        stats, pending = _episode(
            road_cfg, reward_cfg, q, learn_cfg, world_rng, explore_rng, eps,
            learn=True, defer_goal=True, pending=pending,
        )
        count += 1
        if stats.terminal is Event.GOAL:
            goals += 1
            goal_steps += stats.steps
            if stats.quick:
                quick += 1
        elif stats.terminal is Event.ALIVE:
            timeouts += 1
        else:
            crashes += 1
        if count == learn_cfg.bucket or episode == learn_cfg.episodes - 1:
            buckets.append(
                MetricsBucket(
                    index=len(buckets),
                    episodes=count,
                    avg_time_to_goal=goal_steps / goals if goals else None,
                    crash_rate=crashes / count,
                    quick_rate=quick / count,
                    timeout_rate=timeouts / count,
                    epsilon=eps,
                )
            )
            count = goals = goal_steps = crashes = quick = timeouts = 0
    if pending is not None:
        pk, pa, pr = pending
        q_update(q, pk, pa, pr, pk, True, learn_cfg.alpha, learn_cfg.gamma)
    return q, buckets


METRICS_HEADER = "bucket,episodes,avg_time_to_goal,crash_rate,quick_rate,timeout_rate,epsilon"


def metrics_to_csv(buckets: Iterable[MetricsBucket]) -> str:
    lines = [METRICS_HEADER]
    for b in buckets:
        avg = "" if b.avg_time_to_goal is None else repr(b.avg_time_to_goal)
        lines.append(
            f"{b.index},{b.episodes},{avg},{b.crash_rate!r},{b.quick_rate!r},"
            f"{b.timeout_rate!r},{b.epsilon!r}"
        )
    return "\n".join(lines) + "\n"


def value_iteration_oracle(
    road_cfg: RoadConfig,
    reward_cfg: RewardConfig,
    gamma: float,
    tol: float = 1e-10,
    max_sweeps: int = 1_000_000,
) -> dict[tuple[int, int, int], list[float]]:
    """Exact Q* for the obstacle-free road by synchronous Bellman backups.

    States are (lane, pos, speed); the returned map holds one 9-vector per
    state. Rejects configurations with obstacles (state space not enumerable).
    """
    if road_cfg.n_obstacles != 0:
        raise ValueError("oracle requires an obstacle-free configuration")
    states = [
        (lane, pos, speed)
        for lane in range(road_cfg.lanes)
        for pos in range(road_cfg.length)
        for speed in range(road_cfg.max_agent_speed + 1)
    ]
    index = {s: i for i, s in enumerate(states)}
    n = len(states)
    rew = np.zeros((n, N_ACTIONS))
    nxt = np.zeros((n, N_ACTIONS), dtype=np.int64)
    term = np.zeros((n, N_ACTIONS), dtype=bool)
    for s, i in index.items():
        w = WorldState(VehicleState(*s), (), 0)
        for a in range(N_ACTIONS):
            out = apply_action(w, ACTIONS[a], road_cfg)
            agent = out.next.agent
            rew[i, a] = reward(out.event, ACTIONS[a], agent.speed, agent.lane, reward_cfg, road_cfg)
            if out.event is Event.ALIVE:
                nxt[i, a] = index[(agent.lane, agent.pos, agent.speed)]
            else:
                term[i, a] = True
    q = np.zeros((n, N_ACTIONS))
    for _ in range(max_sweeps):
        v = q.max(axis=1)
        q_new = rew + gamma * np.where(term, 0.0, v[nxt])
        residual = np.abs(q_new - q).max()
        q = q_new
        if residual < tol:
            return {s: q[i].tolist() for s, i in index.items()}
    raise RuntimeError(f"value iteration did not reach residual {tol}")
