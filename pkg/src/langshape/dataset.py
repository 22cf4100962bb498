"""Training corpus for the relatedness classifier.

Trajectories are cut into overlapping clips, each clip gets up to three
instructions, and (frequency vector, instruction) pairs are sampled from the
clips with two kinds of negatives: a description taken from a different clip,
and a random frequency vector.
"""

from __future__ import annotations

import json
import logging
import warnings
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .env import (
    ACTION_NAMES,
    DOWN,
    JUMP,
    JUMP_LEFT,
    JUMP_RIGHT,
    LEFT,
    N_ACTIONS,
    N_COMMON_ACTIONS,
    NOOP,
    RIGHT,
    UP,
    EnvState,
    RoomLayout,
)
from .vecenv import CompiledRoom

log = logging.getLogger(__name__)

RELATED, UNRELATED = 1, 0
POSITIVE = "positive"
NEG_SWAPPED = "neg_swapped_language"
NEG_RANDOM = "neg_random_frequency"


class ConfigurationError(ValueError):
    pass


@dataclass
class Trajectory:
    actions: np.ndarray
    layout_id: str = ""
    states: list[EnvState] | None = None
    trajectory_id: str = ""

    def __post_init__(self):
        self.actions = np.asarray(self.actions, dtype=np.int64)
        if len(self.actions) < 2:
            raise ValueError("a trajectory needs at least 2 actions")
        if self.states is not None and len(self.states) != len(self.actions) + 1:
            raise ValueError(f"{len(self.states)} states for {len(self.actions)} actions; expected one more state")

    def __len__(self) -> int:
        return len(self.actions)


@dataclass
class AnnotatedClip:
    actions: np.ndarray
    descriptions: list[str] = field(default_factory=list)
    trajectory_id: str = ""
    offset: int = 0
    layout_id: str = ""
    states: list[EnvState] | None = None

    def to_record(self) -> dict:
        return {
            "trajectory_id": self.trajectory_id,
            "offset": int(self.offset),
            "layout": self.layout_id,
            "actions": [int(a) for a in self.actions],
            "descriptions": list(self.descriptions),
        }

    @classmethod
    def from_record(cls, rec: dict) -> "AnnotatedClip":
        return cls(
            actions=np.asarray(rec["actions"], dtype=np.int64),
            descriptions=list(rec["descriptions"]),
            trajectory_id=str(rec.get("trajectory_id", "")),
            offset=int(rec.get("offset", 0)),
            layout_id=str(rec.get("layout", "")),
        )


@dataclass
class LabeledPair:
    f: np.ndarray
    text: str
    label: int
    provenance: str

    def __post_init__(self):
        if (self.provenance == POSITIVE) != (self.label == RELATED):
            raise ValueError(f"provenance {self.provenance!r} inconsistent with label {self.label}")


# -- frequency vectors -------------------------------------------------------

def frequency(actions: Sequence[int]) -> np.ndarray:
    actions = np.asarray(actions, dtype=np.int64)
    if len(actions) == 0:
        raise ValueError("frequency vectors are only defined for non-empty segments")
    return np.bincount(actions, minlength=N_ACTIONS) / len(actions)


def segment_frequency(traj: Trajectory | Sequence[int], i: int, j: int) -> np.ndarray:
    """Frequency of actions i..j-1 (1-based, half-open): exactly ``j - i`` actions."""
    actions = traj.actions if isinstance(traj, Trajectory) else np.asarray(traj)
    if not i < j:
        raise ValueError(f"segment needs i < j, got i={i}, j={j}")
    if i < 1 or j > len(actions) + 1:
        raise ValueError(f"segment [{i}, {j}) outside a trajectory of {len(actions)} actions")
    return frequency(actions[i - 1 : j - 1])


def sample_segment(traj: Trajectory | Sequence[int], rng: np.random.Generator) -> tuple[int, int]:
    """Uniform pair of distinct timesteps i < j from {1, ..., |traj|}."""
    n = len(traj)
    if n < 2:
        raise ValueError(f"need at least 2 timesteps to sample a segment, got {n}")
    i, j = rng.choice(n, size=2, replace=False) + 1
    return (int(i), int(j)) if i < j else (int(j), int(i))


def random_frequency_vector(rng: np.random.Generator, p_common: float = 0.9) -> np.ndarray:
    """Dirichlet(1) over the 8 common actions with probability ``p_common``,
    else Dirichlet(1) over all 18."""
    f = np.zeros(N_ACTIONS)
    if rng.random() < p_common:
        f[:N_COMMON_ACTIONS] = rng.dirichlet(np.ones(N_COMMON_ACTIONS))
    else:
        f[:] = rng.dirichlet(np.ones(N_ACTIONS))
    return f


# -- clips and pairs ---------------------------------------------------------

def extract_clips(traj: Trajectory, clip_len: int = 40, stride: int = 20) -> list[AnnotatedClip]:
    if clip_len < 2:
        raise ValueError("clip_len must be at least 2")
    if not 1 <= stride <= clip_len:
        raise ValueError(f"stride must lie in [1, clip_len], got {stride}")
    n = len(traj)
    if n < clip_len:
        warnings.warn(f"trajectory {traj.trajectory_id!r} has {n} actions, shorter than clip_len={clip_len}")
        return []
    clips = []
    for off in range(0, n - clip_len + 1, stride):
        clips.append(
            AnnotatedClip(
                actions=traj.actions[off : off + clip_len].copy(),
                trajectory_id=traj.trajectory_id,
                offset=off,
                layout_id=traj.layout_id,
                states=None if traj.states is None else traj.states[off : off + clip_len + 1],
            )
        )
    return clips


def build_dataset(clips: Sequence[AnnotatedClip], n_pairs: int, rng: np.random.Generator) -> list[LabeledPair]:
    """Half related pairs, a quarter swapped-language and a quarter random-frequency negatives."""
    clips = [c for c in clips if c.descriptions]
    distinct = {d for c in clips for d in c.descriptions}
    if len(distinct) < 2:
        raise ConfigurationError("need at least 2 distinct descriptions to build swapped-language negatives")
    # every description instance is equally likely, so repeated phrasings keep their weight
    pool = [d for c in clips for d in c.descriptions]
    swappable = [k for k, c in enumerate(clips) if set(c.descriptions) != distinct]
    if not swappable:
        raise ConfigurationError("every clip carries every description; no swapped-language negative exists")
    n_pos = (n_pairs + 1) // 2
    n_neg = n_pairs // 2
    n_swap = (n_neg + 1) // 2
    n_rand = n_neg // 2

    def sampled_f(clip):
        i, j = sample_segment(clip.actions, rng)
        return segment_frequency(clip.actions, i, j)

    def pick(seq):
        return seq[rng.integers(len(seq))]

    pairs = []
    for _ in range(n_pos):
        clip = clips[rng.integers(len(clips))]
        pairs.append(LabeledPair(sampled_f(clip), pick(clip.descriptions), RELATED, POSITIVE))
    for _ in range(n_swap):
        clip = clips[pick(swappable)]
        own = set(clip.descriptions)
        while True:
            other = pick(pool)
            if other not in own:
                break
        pairs.append(LabeledPair(sampled_f(clip), other, UNRELATED, NEG_SWAPPED))
    for _ in range(n_rand):
        clip = clips[rng.integers(len(clips))]
        pairs.append(LabeledPair(random_frequency_vector(rng), pick(clip.descriptions), UNRELATED, NEG_RANDOM))
    order = rng.permutation(len(pairs))
    return [pairs[k] for k in order]


def pairs_to_arrays(pairs: Sequence[LabeledPair]) -> tuple[np.ndarray, list[str], np.ndarray]:
    f = np.stack([p.f for p in pairs])
    return f, [p.text for p in pairs], np.array([p.label for p in pairs], dtype=np.int64)


# -- synthetic instructions --------------------------------------------------

LEXICON: dict[int, list[str]] = {
    NOOP: ["wait", "stay in place", "stand still", "do nothing", "wait for a moment"],
    JUMP: ["jump", "jump in place", "hop", "jump up"],
    RIGHT: ["go right", "move right", "walk right", "go to the right", "run to the right", "walk to the right"],
    LEFT: ["go left", "move left", "walk left", "go to the left", "run to the left", "walk to the left"],
    JUMP_RIGHT: ["jump right", "jump to the right", "hop to the right", "leap right"],
    JUMP_LEFT: ["jump left", "jump to the left", "hop to the left", "leap left"],
}
CLIMB_VERBS = ["go", "climb", "move"]
CONNECTIVES = [" then ", " and then ", " and ", ", then "]
ITEM_CLAUSES = {"key": ["get the key", "grab the key"], "coin": ["collect the coin", "get the coin"]}


def _climb_phrase(direction: str, surface: str | None, rng) -> str:
    verb = CLIMB_VERBS[rng.integers(len(CLIMB_VERBS))]
    return f"{verb} {direction}" + (f" the {surface}" if surface else "")


def _typo(word: str, rng) -> str:
    if len(word) < 3:
        return word
    k = int(rng.integers(1, len(word) - 1))
    op = rng.integers(3)
    if op == 0:
        return word[:k] + word[k + 1 :]
    if op == 1:
        return word[:k] + word[k] + word[k:]
    return word[: k - 1] + word[k] + word[k - 1] + word[k + 1 :]


def _clip_context(clip: AnnotatedClip, layout: RoomLayout | None):
    """Per-step climbable surface, skull proximity and collected item kinds."""
    n = len(clip.actions)
    surfaces: list[str | None] = [None] * n
    near_skull = False
    items: list[str] = []
    if clip.states is None or layout is None:
        return surfaces, near_skull, items
    for t in range(n):
        r, c = clip.states[t].agent_pos
        kind = layout.cell_kind(r, c)
        below = layout.cell_kind(r + 1, c) if layout.in_grid(r + 1, c) else None
        if kind in ("ladder", "rope"):
            surfaces[t] = kind
        elif below in ("ladder", "rope"):
            surfaces[t] = below
        for sr, sc in clip.states[t].skull_pos:
            if abs(sr - r) + abs(sc - c) <= 3:
                near_skull = True
    gained = clip.states[-1].collected - clip.states[0].collected
    for i in sorted(gained):
        items.append(layout.objects[i].kind)
    return surfaces, near_skull, items


def dominant_actions(actions: Sequence[int], threshold: float = 0.25, max_clauses: int = 3) -> list[int]:
    """Common actions covering at least ``threshold`` of the clip, in temporal order."""
    actions = np.asarray(actions)
    common = actions[actions < N_COMMON_ACTIONS]
    if len(common) == 0:
        return [NOOP]
    frac = np.bincount(common, minlength=N_COMMON_ACTIONS) / len(actions)
    chosen = [a for a in np.argsort(-frac, kind="stable")[:max_clauses] if frac[a] >= threshold]
    if not chosen:
        chosen = [int(np.argmax(frac))]
    centre = {a: np.mean(np.flatnonzero(actions == a)) for a in chosen}
    return sorted((int(a) for a in chosen), key=lambda a: centre[a])


def generate_instruction(
    clip: AnnotatedClip,
    rng: np.random.Generator,
    layout: RoomLayout | None = None,
    typo_rate: float = 0.02,
    drop_rate: float = 0.05,
) -> str:
    """Templated English instruction for the clip's dominant actions.

    Synonyms are drawn per clause; with probability ``drop_rate`` the last of
    several clauses is left out (real instructions are often incomplete) and
    every word of three or more letters gets a character-level typo with
    probability ``typo_rate``.
    """
    if len(clip.actions) == 0:
        raise ValueError("cannot describe an empty clip")
    surfaces, near_skull, items = _clip_context(clip, layout)
    acts = dominant_actions(clip.actions)
    clauses = []
    for a in acts:
        if a in (UP, DOWN):
            steps = np.flatnonzero(clip.actions == a)
            kinds = [surfaces[t] for t in steps if surfaces[t]]
            surface = max(set(kinds), key=kinds.count) if len(kinds) * 2 >= len(steps) else None
            clauses.append(_climb_phrase("up" if a == UP else "down", surface, rng))
        elif a in (JUMP_RIGHT, JUMP_LEFT) and near_skull and rng.random() < 0.5:
            side = "right" if a == JUMP_RIGHT else "left"
            clauses.append(f"jump over the skull to the {side}")
        else:
            options = LEXICON[a]
            clauses.append(options[rng.integers(len(options))])
    for kind in items:
        if rng.random() < 0.7:
            options = ITEM_CLAUSES[kind]
            clauses.append(options[rng.integers(len(options))])
    if len(clauses) > 1 and rng.random() < drop_rate:
        clauses.pop()
    text = clauses[0]
    for clause in clauses[1:]:
        text += CONNECTIVES[rng.integers(len(CONNECTIVES))] + clause
    if typo_rate > 0:
        words = text.split(" ")
        words = [_typo(w, rng) if rng.random() < typo_rate else w for w in words]
        text = " ".join(words)
    return text


def annotate(
    clips: Iterable[AnnotatedClip],
    rng: np.random.Generator,
    layouts: dict[str, RoomLayout] | None = None,
    n_descriptions: int = 3,
    **kwargs,
) -> list[AnnotatedClip]:
    """Attach ``n_descriptions`` synthetic instructions to every clip (in place)."""
    layouts = layouts or {}
    out = []
    for clip in clips:
        layout = layouts.get(clip.layout_id)
        clip.descriptions = [generate_instruction(clip, rng, layout, **kwargs) for _ in range(n_descriptions)]
        out.append(clip)
    return out


# -- behaviour trajectories --------------------------------------------------

def _bfs_path(room: CompiledRoom, start: int, target: tuple[int, int]) -> list[int] | None:
    parent = {start: (-1, -1)}
    queue = deque([start])
    while queue:
        s = queue.popleft()
        if tuple(room.pos[s]) == target:
            path = []
            while s != start:
                s, a = parent[s]
                path.append(a)
            return path[::-1]
        for b in range(N_COMMON_ACTIONS):
            if room.terminal[s, b]:
                continue
            n = int(room.next_state[s, b])
            if n not in parent:
                parent[n] = (s, b)
                queue.append(n)
    return None


def generate_trajectory(
    room: CompiledRoom,
    length: int,
    rng: np.random.Generator,
    trajectory_id: str = "",
    p_navigate: float = 0.3,
    eps: float = 0.05,
    p_rare: float = 0.005,
    run_length: tuple[int, int] = (40, 100),
) -> Trajectory:
    """Behaviour-policy rollout: alternating navigation to random cells and
    runs of a single held action, with a little action noise.

    Death or reaching the goal restarts the room; the trajectory keeps going
    until ``length`` actions were taken.
    """
    cells = np.unique(room.pos, axis=0)
    s = 0
    actions: list[int] = []
    idx = [0]
    plan: list[int] = []
    while len(actions) < length:
        if not plan:
            if rng.random() < p_navigate:
                target = tuple(int(v) for v in cells[rng.integers(len(cells))])
                plan = (_bfs_path(room, s, target) or [])[: run_length[1]]
            if len(plan) < run_length[0] // 3:
                plan = [int(rng.integers(N_COMMON_ACTIONS))] * int(rng.integers(run_length[0], run_length[1] + 1))
        u = rng.random()
        if u < p_rare:
            a = int(rng.integers(N_COMMON_ACTIONS, N_ACTIONS))
            b = NOOP
        elif u < p_rare + eps:
            a = b = int(rng.integers(N_COMMON_ACTIONS))
            if plan and plan[0] != plan[-1]:
                plan = []  # navigation gets replanned from wherever the noise leaves us
        else:
            a = b = plan.pop(0)
        actions.append(a)
        s = 0 if room.terminal[s, b] else int(room.next_state[s, b])
        idx.append(s)
    states = [room.states[i] for i in idx]
    return Trajectory(np.array(actions), layout_id=room.layout.name, states=states, trajectory_id=trajectory_id)


# -- corpus files ------------------------------------------------------------

def save_corpus(clips: Iterable[AnnotatedClip], path: str | Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "w") as fh:
        for clip in clips:
            fh.write(json.dumps(clip.to_record(), sort_keys=True) + "\n")
    tmp.replace(path)


def load_corpus(path: str | Path) -> list[AnnotatedClip]:
    clips = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            try:
                rec = json.loads(line)
                clip = AnnotatedClip.from_record(rec)
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
                raise ValueError(f"{path}:{lineno}: bad corpus record ({exc})") from exc
            if not clip.descriptions:
                raise ValueError(f"{path}:{lineno}: clip without descriptions")
            if np.any((clip.actions < 0) | (clip.actions >= N_ACTIONS)):
                raise ValueError(f"{path}:{lineno}: action ordinal outside [0, {N_ACTIONS})")
            clips.append(clip)
    return clips


def save_pairs(pairs: Iterable[LabeledPair], path: str | Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "w") as fh:
        for p in pairs:
            rec = {"f": [float(x) for x in p.f], "text": p.text, "label": int(p.label), "provenance": p.provenance}
            fh.write(json.dumps(rec) + "\n")
    tmp.replace(path)


def load_pairs(path: str | Path) -> list[LabeledPair]:
    out = []
    with open(path) as fh:
        for line in fh:
            if line.strip():
                rec = json.loads(line)
                out.append(LabeledPair(np.array(rec["f"]), rec["text"], int(rec["label"]), rec["provenance"]))
    return out


def describe_actions(f: np.ndarray, top: int = 3) -> str:
    """Short human-readable summary of a frequency vector, for logs."""
    order = np.argsort(-f)[:top]
    return ", ".join(f"{ACTION_NAMES[k]}={f[k]:.2f}" for k in order if f[k] > 0)
