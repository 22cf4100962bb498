"""
A walk through one room
=======================

Loads a shipped room, prints its grid, and replays the shortest action
sequence that reaches the goal while the skulls patrol.
"""

import numpy as np

from langshape.env import RoomWorld, action_name, get_layout
from langshape.vecenv import compiled

layout = get_layout("r13_skull_jump_right")
print(layout.name, "| max steps", layout.max_episode_steps)
print("\n".join(layout.grid))
print("descriptions:", *layout.descriptions, sep="\n  ")

# the compiled table answers "how short can a solution be" by breadth-first search
room = compiled(layout)
plan = room.solution_actions()
print(f"\n{room.n_states} reachable states, shortest solution {len(plan)} steps")

env = RoomWorld(layout)
state = env.reset()
for t, a in enumerate(plan):
    state, reward, done = env.step(state, a)
    skulls = " ".join(f"{p}" for p in state.skull_pos)
    print(f"{t:3d} {action_name(a):<11} agent {state.agent_pos} skulls {skulls} r={reward:g}")
assert state.success

# a uniformly random policy rarely gets there
rng = np.random.default_rng(0)
wins = 0
for episode in range(200):
    state = env.reset()
    while not state.done:
        state, _, _ = env.step(state, int(rng.integers(18)))
    wins += state.success
print(f"\nrandom policy: {wins}/200 episodes reach the goal")
