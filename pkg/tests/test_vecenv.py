import numpy as np
from hypothesis import given, settings
from hypothesis import strategies as st

from langshape.env import BEHAVIOUR, N_ACTIONS, RoomWorld, builtin_layouts
from langshape.vecenv import VecRoomWorld, compiled


@settings(max_examples=30, deadline=None)
@given(room=st.integers(0, 14), seed=st.integers(0, 2**31 - 1))
def test_tables_replay_the_scalar_dynamics(room, seed):
    layout = builtin_layouts()[room]
    croom = compiled(layout)
    world = RoomWorld(layout)
    rng = np.random.default_rng(seed)
    vec = VecRoomWorld(croom, 1)
    obs = vec.reset()
    s = world.reset()
    for _ in range(300):
        a = int(rng.integers(N_ACTIONS))
        assert np.array_equal(obs[0], world.observe(s))
        s, r, done = world.step(s, a)
        obs, rv, dv, succ = vec.step(np.array([a]))
        assert rv[0] == r and dv[0] == done and succ[0] == s.success
        if done:
            s = world.reset()


def test_vector_envs_are_independent_and_auto_reset(corridor_room):
    vec = VecRoomWorld(corridor_room, 3)
    obs = vec.reset()
    start = obs.copy()
    right = 3
    for t in range(4):
        obs, r, done, succ = vec.step(np.array([right, 0, right]))
    assert r.tolist() == [1.0, 0.0, 1.0]
    assert done.tolist() == [True, False, True]
    assert np.array_equal(obs[0], start[0])
    assert not np.array_equal(obs[1], start[1]) or vec.t[1] == 4


def test_step_limit_in_vector_env(corridor_room):
    vec = VecRoomWorld(corridor_room, 1, max_episode_steps=5)
    vec.reset()
    dones = [bool(vec.step(np.array([0]))[2][0]) for _ in range(10)]
    assert dones == [False] * 4 + [True] + [False] * 4 + [True]


def test_shortest_solution_matches_solution_actions():
    for layout in builtin_layouts():
        room = compiled(layout)
        path = room.solution_actions()
        assert len(path) == room.shortest_solution()
        world = RoomWorld(layout)
        s = world.reset()
        for a in path:
            s, r, done = world.step(s, int(a))
        assert s.success
    assert BEHAVIOUR[12] == 0
