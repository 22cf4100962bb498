"""Table-compiled RoomWorld for fast batched stepping.

Because RoomWorld is deterministic and skull motion is periodic, every
reachable situation is captured by (position, jump state, collected items,
time modulo the skull period).  ``compile_layout`` enumerates those states
breadth-first through :meth:`RoomWorld.step` itself, so the tables are
exactly the scalar dynamics; the episode step limit is the only thing the
vectorized wrapper tracks on its own.
"""

from __future__ import annotations

import dataclasses
import math
from collections import deque
from dataclasses import dataclass

import numpy as np

from .env import BEHAVIOUR, N_COMMON_ACTIONS, EnvState, RoomLayout, RoomWorld


@dataclass
class CompiledRoom:
    layout: RoomLayout
    next_state: np.ndarray  # (n_states, 8) int
    reward: np.ndarray  # (n_states, 8) float
    terminal: np.ndarray  # (n_states, 8) bool, goal or death
    killed: np.ndarray  # (n_states, 8) bool
    obs: np.ndarray  # (n_states, obs_dim)
    pos: np.ndarray  # (n_states, 2) agent cell of each state
    period: int
    # EnvState of every index, step_count reduced modulo ``period``
    states: list = dataclasses.field(default_factory=list, repr=False)

    @property
    def n_states(self) -> int:
        return len(self.next_state)

    @property
    def obs_dim(self) -> int:
        return self.obs.shape[1]

    def shortest_solution(self) -> int | None:
        """Minimum number of steps from the start to a rewarded transition (BFS)."""
        dist = np.full(self.n_states, -1)
        dist[0] = 0
        queue = deque([0])
        while queue:
            s = queue.popleft()
            for b in range(N_COMMON_ACTIONS):
                if self.reward[s, b] > 0:
                    return int(dist[s] + 1)
                if self.terminal[s, b]:
                    continue
                n = self.next_state[s, b]
                if dist[n] < 0:
                    dist[n] = dist[s] + 1
                    queue.append(n)
        return None

    def solution_actions(self) -> list[int] | None:
        """One shortest rewarded action sequence (behaviour ordinals)."""
        parent: dict[int, tuple[int, int]] = {0: (-1, -1)}
        queue = deque([0])
        while queue:
            s = queue.popleft()
            for b in range(N_COMMON_ACTIONS):
                if self.reward[s, b] > 0:
                    path = [b]
                    while s != 0:
                        s, a = parent[s]
                        path.append(a)
                    return path[::-1]
                if self.terminal[s, b]:
                    continue
                n = int(self.next_state[s, b])
                if n not in parent:
                    parent[n] = (s, b)
                    queue.append(n)
        return None


def _key(state: EnvState, period: int):
    return (state.agent_pos, state.jump_step, state.jump_dx, state.collected, state.step_count % period)


def compile_layout(layout: RoomLayout, max_states: int = 500_000) -> CompiledRoom:
    period = 1
    for o in layout.skulls:
        period = math.lcm(period, o.period)
    # the step limit is handled by the wrapper, never by the tables
    world = RoomWorld(dataclasses.replace(layout, max_episode_steps=10**9))
    start = world.reset()
    index = {_key(start, period): 0}
    states = [start]
    rows_next, rows_rew, rows_term, rows_kill = [], [], [], []
    i = 0
    while i < len(states):
        s = states[i]
        nxt = np.zeros(N_COMMON_ACTIONS, dtype=np.int64)
        rew = np.zeros(N_COMMON_ACTIONS)
        term = np.zeros(N_COMMON_ACTIONS, dtype=bool)
        kill = np.zeros(N_COMMON_ACTIONS, dtype=bool)
        for b in range(N_COMMON_ACTIONS):
            ns, r, _ = world.step(s, b)
            rew[b] = r
            term[b] = ns.success or ns.killed
            kill[b] = ns.killed
            if term[b]:
                # terminal successors are never stepped; point back at self
                nxt[b] = i
                continue
            ns = dataclasses.replace(ns, step_count=ns.step_count % period, done=False)
            k = _key(ns, period)
            if k not in index:
                if len(states) >= max_states:
                    raise RuntimeError(f"{layout.name}: more than {max_states} reachable states")
                index[k] = len(states)
                states.append(ns)
            nxt[b] = index[k]
        rows_next.append(nxt)
        rows_rew.append(rew)
        rows_term.append(term)
        rows_kill.append(kill)
        i += 1
    obs = np.stack([world.observe(s) for s in states])
    pos = np.array([s.agent_pos for s in states], dtype=np.int64)
    return CompiledRoom(
        layout=layout,
        next_state=np.stack(rows_next),
        reward=np.stack(rows_rew),
        terminal=np.stack(rows_term),
        killed=np.stack(rows_kill),
        obs=obs,
        pos=pos,
        period=period,
        states=states,
    )


_CACHE: dict[tuple, CompiledRoom] = {}


def _content_key(layout: RoomLayout) -> tuple:
    return (
        tuple(layout.grid),
        layout.start,
        layout.goal,
        layout.room_id,
        layout.require,
        tuple((o.kind, o.pos, o.patrol, o.direction) for o in layout.objects),
    )


def compiled(layout: RoomLayout) -> CompiledRoom:
    """Memoized :func:`compile_layout` keyed by the layout's dynamics."""
    key = _content_key(layout)
    if key not in _CACHE:
        _CACHE[key] = compile_layout(layout)
    room = _CACHE[key]
    if room.layout is not layout:
        room = dataclasses.replace(room, layout=layout)
    return room


class VecRoomWorld:
    """``n_envs`` independent copies of one room, auto-reset on episode end."""

    def __init__(self, room: CompiledRoom, n_envs: int = 1, max_episode_steps: int | None = None):
        self.room = room
        self.n_envs = n_envs
        self.max_episode_steps = max_episode_steps or room.layout.max_episode_steps
        self.state = np.zeros(n_envs, dtype=np.int64)
        self.t = np.zeros(n_envs, dtype=np.int64)

    @property
    def obs_dim(self) -> int:
        return self.room.obs_dim

    def reset(self) -> np.ndarray:
        self.state[:] = 0
        self.t[:] = 0
        return self.room.obs[self.state]

    def step(self, actions: np.ndarray):
        """Advance every env one tick.

        Returns ``(obs, reward, done, success)``; for finished envs ``obs`` is
        already the first observation of the next episode.
        """
        b = BEHAVIOUR[actions]
        s = self.state
        reward = self.room.reward[s, b]
        terminal = self.room.terminal[s, b]
        self.state = self.room.next_state[s, b]
        self.t += 1
        done = terminal | (self.t >= self.max_episode_steps)
        success = reward > 0
        if done.any():
            self.state[done] = 0
            self.t[done] = 0
        return self.room.obs[self.state], reward, done, success
