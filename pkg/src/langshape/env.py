"""RoomWorld: a deterministic side-view gridworld with Montezuma-like objects.

Grid characters
---------------
``#`` wall, ``=`` floor (both solid), ``.`` empty, ``H`` ladder, ``|`` rope,
``S`` start and ``G`` goal (both empty cells underneath).

Movement
--------
* LEFT/RIGHT move one cell if the target is passable.
* UP moves one cell while standing on a ladder or rope.
* DOWN moves one cell into or along a ladder/rope.
* JUMP, JUMP-RIGHT and JUMP-LEFT start a fixed 3-step arc (up, level, down)
  from a supported, non-climbable cell; the sideways variants shift one
  column on every arc step. Actions chosen mid-arc are ignored.
* A grounded agent without support drops straight down in the same step.
* Ordinals 8-17 behave exactly like NO-OP.

Skulls patrol horizontally and kill on contact (same cell or swapped cells).
Keys and coins are picked up on contact; doors are solid until a key is held.
The goal pays +1 (and ends the episode) once every required item is held.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import yaml

N_ACTIONS = 18
N_COMMON_ACTIONS = 8
N_ROOMS = 15

ACTION_NAMES = (
    "NO-OP",
    "JUMP",
    "UP",
    "RIGHT",
    "LEFT",
    "DOWN",
    "JUMP-RIGHT",
    "JUMP-LEFT",
    "UP-RIGHT",
    "UP-LEFT",
    "DOWN-RIGHT",
    "DOWN-LEFT",
    "UP-JUMP",
    "DOWN-JUMP",
    "UP-RIGHT-JUMP",
    "UP-LEFT-JUMP",
    "DOWN-RIGHT-JUMP",
    "DOWN-LEFT-JUMP",
)
ACTION_IDS = {name: i for i, name in enumerate(ACTION_NAMES)}

NOOP, JUMP, UP, RIGHT, LEFT, DOWN, JUMP_RIGHT, JUMP_LEFT = range(8)

# ordinal -> behaviour ordinal in 0..7
BEHAVIOUR = np.array(list(range(8)) + [NOOP] * 10, dtype=np.int64)

JUMP_DX = {JUMP: 0, JUMP_RIGHT: 1, JUMP_LEFT: -1}
ARC_DY = (-1, 0, 1)
ARC_LEN = len(ARC_DY)

CELL_KINDS = {
    "#": "wall",
    "=": "floor",
    ".": "empty",
    "H": "ladder",
    "|": "rope",
    "S": "empty",
    "G": "empty",
}
SOLID = frozenset({"wall", "floor"})
CLIMBABLE = frozenset({"ladder", "rope"})
OBJECT_KINDS = ("skull", "key", "door", "coin")
ITEM_KINDS = ("key", "coin")


class LayoutError(ValueError):
    """A room layout violates one of its invariants."""


class EpisodeDoneError(RuntimeError):
    """``step`` was called on a finished episode."""


def action_name(ordinal: int) -> str:
    return ACTION_NAMES[ordinal]


def action_ordinal(name: str) -> int:
    try:
        return ACTION_IDS[name.upper()]
    except KeyError:
        raise KeyError(f"unknown action name {name!r}") from None


@dataclass(frozen=True)
class RoomObject:
    kind: str
    pos: tuple[int, int]
    # inclusive column range of a skull patrol; None for static objects
    patrol: tuple[int, int] | None = None
    direction: int = 1

    def position_at(self, t: int) -> tuple[int, int]:
        """Position after ``t`` ticks (bouncing patrol for skulls)."""
        if self.patrol is None or self.patrol[0] == self.patrol[1]:
            return self.pos
        lo, hi = self.patrol
        span = hi - lo
        period = 2 * span
        # unfold the bounce into a phase on a circle of length 2*span
        x = self.pos[1] - lo
        phase = x if self.direction > 0 else period - x
        phase = (phase + t) % period
        col = lo + (phase if phase <= span else period - phase)
        return (self.pos[0], col)

    @property
    def period(self) -> int:
        if self.patrol is None or self.patrol[0] == self.patrol[1]:
            return 1
        return 2 * (self.patrol[1] - self.patrol[0])


@dataclass
class RoomLayout:
    """A single room/task: grid, objects, start, goal and episode limit."""

    name: str
    grid: list[str]
    objects: list[RoomObject] = field(default_factory=list)
    start: tuple[int, int] = (0, 0)
    goal: tuple[int, int] = (0, 0)
    max_episode_steps: int = 500
    room_id: int = 0
    require: tuple[str, ...] = ()
    descriptions: tuple[str, ...] = ()

    @property
    def shape(self) -> tuple[int, int]:
        return len(self.grid), len(self.grid[0])

    def cell_kind(self, r: int, c: int) -> str:
        return CELL_KINDS[self.grid[r][c]]

    def in_grid(self, r: int, c: int) -> bool:
        h, w = self.shape
        return 0 <= r < h and 0 <= c < w

    def traversable(self, r: int, c: int) -> bool:
        return self.in_grid(r, c) and self.cell_kind(r, c) not in SOLID

    @property
    def skulls(self) -> list[RoomObject]:
        return [o for o in self.objects if o.kind == "skull"]

    def item_ids(self) -> list[int]:
        return [i for i, o in enumerate(self.objects) if o.kind in ITEM_KINDS]

    def required_ids(self) -> frozenset[int]:
        return frozenset(i for i, o in enumerate(self.objects) if o.kind in self.require)

    def validate(self) -> None:
        if not self.grid:
            raise LayoutError(f"{self.name}: empty grid")
        width = len(self.grid[0])
        for i, row in enumerate(self.grid):
            if len(row) != width:
                raise LayoutError(f"{self.name}: grid row {i} has length {len(row)}, expected {width}")
            bad = set(row) - set(CELL_KINDS)
            if bad:
                raise LayoutError(f"{self.name}: unknown cell characters {sorted(bad)} in row {i}")
        if self.start == self.goal:
            raise LayoutError(f"{self.name}: start equals goal {self.start}")
        for label, pos in (("start", self.start), ("goal", self.goal)):
            if not self.traversable(*pos):
                raise LayoutError(f"{self.name}: {label} {pos} is not a traversable cell")
        if self.max_episode_steps < 1:
            raise LayoutError(f"{self.name}: max_episode_steps must be positive")
        if not 0 <= self.room_id < N_ROOMS:
            raise LayoutError(f"{self.name}: room_id {self.room_id} outside [0, {N_ROOMS})")
        for k in self.require:
            if k not in ITEM_KINDS:
                raise LayoutError(f"{self.name}: required kind {k!r} is not collectable")
        for o in self.objects:
            if o.kind not in OBJECT_KINDS:
                raise LayoutError(f"{self.name}: unknown object kind {o.kind!r}")
            if not self.in_grid(*o.pos):
                raise LayoutError(f"{self.name}: {o.kind} at {o.pos} outside the grid")
            if o.kind == "door":
                continue
            if not self.traversable(*o.pos):
                raise LayoutError(f"{self.name}: {o.kind} at {o.pos} is on a solid cell")
            if o.patrol is not None:
                if o.kind != "skull":
                    raise LayoutError(f"{self.name}: only skulls may move ({o.kind} at {o.pos})")
                lo, hi = o.patrol
                if not lo <= o.pos[1] <= hi:
                    raise LayoutError(f"{self.name}: skull at {o.pos} starts outside its patrol {o.patrol}")
                for c in range(lo, hi + 1):
                    if not self.traversable(o.pos[0], c):
                        raise LayoutError(
                            f"{self.name}: skull patrol {o.patrol} on row {o.pos[0]} leaves the traversable cells"
                        )


def _parse_pos(value) -> tuple[int, int]:
    r, c = value
    return int(r), int(c)


def layout_from_dict(doc: dict) -> RoomLayout:
    """Build a layout from its YAML document form."""
    grid = [str(row) for row in doc["grid"]]
    start = goal = None
    for r, row in enumerate(grid):
        for c, ch in enumerate(row):
            if ch == "S":
                start = (r, c)
            elif ch == "G":
                goal = (r, c)
    if "start" in doc:
        start = _parse_pos(doc["start"])
    if "goal" in doc:
        goal = _parse_pos(doc["goal"])
    if start is None or goal is None:
        raise LayoutError(f"{doc.get('name', '?')}: start and goal must be given ('S'/'G' or explicit)")
    objects = []
    for spec in doc.get("objects", []) or []:
        patrol = spec.get("patrol")
        objects.append(
            RoomObject(
                kind=spec["kind"],
                pos=_parse_pos(spec["pos"]),
                patrol=None if patrol is None else (int(patrol[0]), int(patrol[1])),
                direction=int(spec.get("direction", 1)),
            )
        )
    layout = RoomLayout(
        name=str(doc.get("name", "room")),
        grid=grid,
        objects=objects,
        start=start,
        goal=goal,
        max_episode_steps=int(doc.get("max_episode_steps", 500)),
        room_id=int(doc.get("room_id", 0)),
        require=tuple(doc.get("require", ()) or ()),
        descriptions=tuple(doc.get("descriptions", ()) or ()),
    )
    layout.validate()
    return layout


def load_layout(path: str | Path) -> RoomLayout:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"layout file not found: {path}")
    with open(path) as fh:
        doc = yaml.safe_load(fh)
    doc.setdefault("name", path.stem)
    return layout_from_dict(doc)


LAYOUT_DIR = Path(__file__).parent / "layouts"


def builtin_layout_paths() -> list[Path]:
    return sorted(LAYOUT_DIR.glob("*.yaml"))


def builtin_layouts() -> list[RoomLayout]:
    """The 15 shipped rooms ordered by room id."""
    rooms = [load_layout(p) for p in builtin_layout_paths()]
    return sorted(rooms, key=lambda l: l.room_id)


def get_layout(name: str) -> RoomLayout:
    for p in builtin_layout_paths():
        if p.stem == name:
            return load_layout(p)
    raise KeyError(f"no shipped layout named {name!r}")


@dataclass(frozen=True)
class EnvState:
    agent_pos: tuple[int, int]
    # 0 when grounded, else the number of arc steps already taken (1 or 2)
    jump_step: int = 0
    jump_dx: int = 0
    skull_pos: tuple[tuple[int, int], ...] = ()
    collected: frozenset[int] = frozenset()
    step_count: int = 0
    done: bool = False
    killed: bool = False
    success: bool = False

    @property
    def airborne(self) -> bool:
        return self.jump_step > 0


class RoomWorld:
    """Pure state-transition functions for one layout.

    ``reset``, ``step`` and ``observe`` never mutate their inputs, so the
    same instance can be shared by callers as long as each keeps its own
    ``EnvState``.
    """

    def __init__(self, layout: RoomLayout):
        layout.validate()
        self.layout = layout
        self._skull_idx = [i for i, o in enumerate(layout.objects) if o.kind == "skull"]
        self._doors = {o.pos for o in layout.objects if o.kind == "door"}
        self._items = {o.pos: i for i, o in enumerate(layout.objects) if o.kind in ITEM_KINDS}
        self._key_ids = frozenset(i for i, o in enumerate(layout.objects) if o.kind == "key")
        self._required = layout.required_ids()
        h, w = layout.shape
        self.obs_dim = 2 + N_ROOMS + 2 * len(OBJECT_KINDS) + len(ITEM_KINDS) + 1
        self._norm = np.array([max(h - 1, 1), max(w - 1, 1)], dtype=np.float64)

    # -- cell predicates ---------------------------------------------------
    def _has_key(self, state_collected: frozenset[int]) -> bool:
        return bool(state_collected & self._key_ids)

    def _passable(self, r: int, c: int, collected: frozenset[int]) -> bool:
        if not self.layout.traversable(r, c):
            return False
        if (r, c) in self._doors and not self._has_key(collected):
            return False
        return True

    def _climbable(self, r: int, c: int) -> bool:
        return self.layout.in_grid(r, c) and self.layout.cell_kind(r, c) in CLIMBABLE

    def _supported(self, r: int, c: int, collected: frozenset[int]) -> bool:
        if self._climbable(r, c) or self._climbable(r + 1, c):
            return True
        if not self.layout.in_grid(r + 1, c):
            return True
        return not self._passable(r + 1, c, collected)

    def skulls_at(self, t: int) -> tuple[tuple[int, int], ...]:
        return tuple(self.layout.objects[i].position_at(t) for i in self._skull_idx)

    # -- public API --------------------------------------------------------
    def reset(self, rng_seed: int = 0) -> EnvState:
        """Initial state. Dynamics are deterministic, so the seed only
        participates for interface symmetry."""
        del rng_seed
        return EnvState(agent_pos=self.layout.start, skull_pos=self.skulls_at(0))

    def step(self, state: EnvState, action: int) -> tuple[EnvState, float, bool]:
        if state.done:
            raise EpisodeDoneError("step() called after the episode finished; call reset()")
        if not 0 <= int(action) < N_ACTIONS:
            raise ValueError(f"action ordinal {action} outside [0, {N_ACTIONS})")
        if state.step_count >= self.layout.max_episode_steps:
            raise EpisodeDoneError("step limit already reached")
        b = int(BEHAVIOUR[int(action)])
        collected = state.collected
        r, c = state.agent_pos
        jump_step, jump_dx = state.jump_step, state.jump_dx

        if jump_step > 0:
            r, c = self._arc_move(r, c, ARC_DY[jump_step], jump_dx, collected)
            jump_step = jump_step + 1 if jump_step + 1 < ARC_LEN else 0
            if jump_step == 0:
                jump_dx = 0
        elif b in JUMP_DX and self._supported(r, c, collected) and not self._climbable(r, c):
            jump_dx = JUMP_DX[b]
            r, c = self._arc_move(r, c, ARC_DY[0], jump_dx, collected)
            jump_step = 1
        elif b == UP:
            if self._climbable(r, c) and self._passable(r - 1, c, collected):
                r -= 1
        elif b == DOWN:
            if self._passable(r + 1, c, collected) and (self._climbable(r, c) or self._climbable(r + 1, c)):
                r += 1
        elif b in (LEFT, RIGHT):
            dc = -1 if b == LEFT else 1
            if self._passable(r, c + dc, collected):
                c += dc

        if jump_step == 0:
            while not self._supported(r, c, collected):
                r += 1

        t = state.step_count + 1
        new_skulls = self.skulls_at(t)
        pos = (r, c)
        killed = any(
            s == pos or (s == state.agent_pos and old == pos)
            for s, old in zip(new_skulls, state.skull_pos)
        )
        if not killed and pos in self._items and self._items[pos] not in collected:
            collected = collected | {self._items[pos]}
        success = not killed and pos == self.layout.goal and self._required <= collected
        done = killed or success or t >= self.layout.max_episode_steps
        new_state = EnvState(
            agent_pos=pos,
            jump_step=jump_step,
            jump_dx=jump_dx,
            skull_pos=new_skulls,
            collected=collected,
            step_count=t,
            done=done,
            killed=killed,
            success=success,
        )
        return new_state, (1.0 if success else 0.0), done

    def _arc_move(self, r, c, dy, dx, collected):
        if dy and self._passable(r + dy, c, collected):
            r += dy
        if dx and self._passable(r, c + dx, collected):
            c += dx
        return r, c

    def observe(self, state: EnvState) -> np.ndarray:
        """Fixed-length feature vector (see module docstring of the layout set).

        Layout: normalized (row, col); one-hot room id; for each object kind the
        normalized offset to the nearest active instance (zeros if none);
        fraction of keys and coins held; airborne flag.
        """
        obs = np.zeros(self.obs_dim)
        pos = np.asarray(state.agent_pos, dtype=np.float64)
        obs[0:2] = pos / self._norm
        obs[2 + self.layout.room_id] = 1.0
        base = 2 + N_ROOMS
        skull_iter = iter(state.skull_pos)
        active: dict[str, list[tuple[int, int]]] = {k: [] for k in OBJECT_KINDS}
        for i, o in enumerate(self.layout.objects):
            if o.kind == "skull":
                active["skull"].append(next(skull_iter))
            elif o.kind == "door":
                if not self._has_key(state.collected):
                    active["door"].append(o.pos)
            elif i not in state.collected:
                active[o.kind].append(o.pos)
        for k, kind in enumerate(OBJECT_KINDS):
            if active[kind]:
                offsets = np.asarray(active[kind], dtype=np.float64) - pos
                nearest = offsets[np.argmin(np.abs(offsets).sum(axis=1))]
                obs[base + 2 * k : base + 2 * k + 2] = nearest / self._norm
        base += 2 * len(OBJECT_KINDS)
        for k, kind in enumerate(ITEM_KINDS):
            ids = [i for i, o in enumerate(self.layout.objects) if o.kind == kind]
            if ids:
                obs[base + k] = sum(i in state.collected for i in ids) / len(ids)
        obs[-1] = state.jump_step / (ARC_LEN - 1)
        return obs

    def with_max_steps(self, n: int) -> "RoomWorld":
        return RoomWorld(dataclasses.replace(self.layout, max_episode_steps=n))


def reset(layout: RoomLayout, rng_seed: int = 0) -> EnvState:
    return RoomWorld(layout).reset(rng_seed)


def step(layout: RoomLayout, state: EnvState, action: int) -> tuple[EnvState, float, bool]:
    return RoomWorld(layout).step(state, action)


def observe(state: EnvState, layout: RoomLayout) -> np.ndarray:
    return RoomWorld(layout).observe(state)
