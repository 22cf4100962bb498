import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from langshape import rl
from langshape.env import RIGHT
from langshape.rl import PolicyModel, PPOConfig, TabularMDP
from langshape.shaping import ShapingConfig

SMALL = PPOConfig(n_envs=2, n_steps=32, minibatch=32, hidden=8)


def test_gae_matches_the_truncated_sum():
    rng = np.random.default_rng(0)
    T, n, gamma, lam = 12, 3, 0.9, 0.8
    r = rng.normal(size=(T, n))
    v = rng.normal(size=(T, n))
    d = (rng.random((T, n)) < 0.2).astype(float)
    last = rng.normal(size=n)
    adv, ret = rl.compute_gae(r, v, d, last, gamma, lam)
    vals = np.vstack([v, last])
    for j in range(n):
        for t in range(T):
            total, coef = 0.0, 1.0
            for k in range(t, T):
                delta = r[k, j] + gamma * vals[k + 1, j] * (1 - d[k, j]) - v[k, j]
                total += coef * delta
                if d[k, j]:
                    break
                coef *= gamma * lam
            assert np.isclose(adv[t, j], total, atol=1e-12)
    assert np.allclose(ret, adv + v)


def test_ppo_gradient_matches_finite_differences():
    rng = np.random.default_rng(1)
    pol = PolicyModel.init(5, rng, hidden=4, n_actions=6)
    for k in pol.params:
        pol.params[k] = pol.params[k] + rng.normal(0, 0.3, size=pol.params[k].shape)
    obs = rng.normal(size=(10, 5))
    actions = rng.integers(0, 6, size=10)
    old = pol.log_probs(obs)[np.arange(10), actions] + rng.normal(0, 0.3, size=10)
    adv = rng.normal(size=10)
    ret = rng.normal(size=10)
    cfg = PPOConfig(clip=0.2, ent_coef=0.05, vf_coef=0.7)
    _, grads, _ = rl.ppo_loss_and_grad(pol, obs, actions, old, adv, ret, cfg)
    for name, arr in pol.params.items():
        num = np.zeros_like(arr)
        for i in np.ndindex(arr.shape):
            x = arr[i]
            arr[i] = x + 1e-6
            up = rl.ppo_loss_and_grad(pol, obs, actions, old, adv, ret, cfg)[0]
            arr[i] = x - 1e-6
            down = rl.ppo_loss_and_grad(pol, obs, actions, old, adv, ret, cfg)[0]
            arr[i] = x
            num[i] = (up - down) / 2e-6
        assert np.allclose(grads[name], num, rtol=1e-5, atol=1e-8), name


def test_policy_distribution_and_greedy_action():
    rng = np.random.default_rng(0)
    pol = PolicyModel.init(4, rng, hidden=6)
    obs = rng.normal(size=(5, 4))
    assert np.allclose(np.exp(pol.log_probs(obs)).sum(axis=1), 1.0)
    a, lp = pol.act(obs, rng, greedy=True)
    assert np.array_equal(a, np.argmax(pol.log_probs(obs), axis=1))
    assert np.allclose(lp, pol.log_probs(obs).max(axis=1))


def test_sampling_follows_the_policy():
    rng = np.random.default_rng(0)
    pol = PolicyModel.init(2, rng, hidden=3, n_actions=3)
    pol.params["pi_out_b"][:] = np.log([0.2, 0.3, 0.5])
    pol.params["pi_out_W"][:] = 0
    a, _ = pol.act(np.zeros((60_000, 2)), rng)
    assert np.allclose(np.bincount(a) / len(a), [0.2, 0.3, 0.5], atol=0.01)


class Replay:
    """Plays a fixed action forever."""

    def __init__(self, action):
        self.action = action

    def act(self, obs, rng, greedy=False):
        return np.full(len(obs), self.action), np.zeros(len(obs))


def test_frozen_evaluation_counts_successful_episodes(corridor_room):
    steps = corridor_room.shortest_solution()
    assert steps == 4
    assert rl.evaluate_policy(Replay(RIGHT), corridor_room, 10_000) == 10_000 // steps
    assert rl.evaluate_policy(Replay(0), corridor_room, 10_000) == 0


def test_training_run_shape_and_determinism(corridor_room):
    a = rl.train_policy(corridor_room, 256, seed=3, cfg=SMALL, eval_timesteps=100)
    b = rl.train_policy(corridor_room, 256, seed=3, cfg=SMALL, eval_timesteps=100)
    assert a.curve.points() == b.curve.points()
    assert a.curve.points()[0] == (0, 0)
    assert a.curve.timesteps.tolist() == [0, 64, 128, 192, 256]
    assert np.all(np.diff(a.curve.successes) >= 0)
    assert a.final_successes == b.final_successes
    c = rl.train_policy(corridor_room, 256, seed=4, cfg=SMALL, record_actions=True)
    assert c.actions.shape == (128, 2)


def test_zero_lambda_is_bit_identical_to_the_baseline(corridor_room, model):
    base = rl.train_policy(corridor_room, 192, seed=7, cfg=SMALL, record_actions=True, eval_timesteps=50)
    lang = rl.train_policy(corridor_room, 192, seed=7, mode=rl.EXT_LANG, shaping=ShapingConfig(lam=0.0),
                           potential_model=model, instruction="go right", cfg=SMALL,
                           record_actions=True, eval_timesteps=50)
    assert np.array_equal(base.actions, lang.actions)
    assert base.curve.points() == lang.curve.points()
    for k in base.policy.params:
        assert np.array_equal(base.policy.params[k], lang.policy.params[k])


def test_ext_lang_requires_a_model(corridor_room):
    with pytest.raises(ValueError):
        rl.train_policy(corridor_room, 64, mode=rl.EXT_LANG, cfg=SMALL)
    with pytest.raises(ValueError):
        rl.train_policy(corridor_room, 64, mode="Lang", cfg=SMALL)


def test_correlation_log_has_one_row_per_step(corridor_room, model):
    run = rl.train_policy(corridor_room, 128, seed=0, mode=rl.EXT_LANG, shaping=ShapingConfig(lam=0.1),
                          potential_model=model, instruction="go right", cfg=SMALL, log_correlation=True)
    F, p = run.correlation_log
    assert F.shape == (64, 18) and p.shape == (64,)
    assert np.all((p >= 0) & (p <= 1))


# -- tabular DP -----------------------------------------------------------------

def _random_mdp(rng, S, A, gamma=0.9):
    T = rng.dirichlet(np.ones(S) * 0.5, size=(S, A))
    R = rng.normal(size=(S, A, S))
    return TabularMDP(T, R, gamma)


def _expectimax(mdp, s, depth, gamma):
    if depth == 0:
        return np.zeros(mdp.n_actions)
    q = np.zeros(mdp.n_actions)
    for a in range(mdp.n_actions):
        for s2 in range(mdp.n_states):
            p = mdp.T[s, a, s2]
            if p > 0:
                q[a] += p * (mdp.R[s, a, s2] + gamma * _expectimax(mdp, s2, depth - 1, gamma).max())
    return q


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 10**6), S=st.integers(1, 4), A=st.integers(1, 3), H=st.integers(1, 4))
def test_finite_horizon_values_match_expectimax(seed, S, A, H):
    mdp = _random_mdp(np.random.default_rng(seed), S, A)
    Q, sets = rl.value_iteration(mdp, horizon=H)
    assert Q.shape == (H + 1, S, A)
    for s in range(S):
        assert np.allclose(Q[H, s], _expectimax(mdp, s, H, mdp.gamma), atol=1e-12)
    assert sets[H] == rl.argmax_sets(Q[H])


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 10**6), S=st.integers(1, 4), A=st.integers(1, 3))
def test_discounted_values_match_policy_enumeration(seed, S, A):
    mdp = _random_mdp(np.random.default_rng(seed), S, A, gamma=0.8)
    Q, _ = rl.value_iteration(mdp, tol=1e-12)
    assert rl.bellman_residual(mdp, Q) < 1e-10
    r = mdp.expected_reward()
    best = np.full(S, -np.inf)
    for pi in itertools.product(range(A), repeat=S):
        P = mdp.T[np.arange(S), list(pi)]
        v = np.linalg.solve(np.eye(S) - mdp.gamma * P, r[np.arange(S), list(pi)])
        best = np.maximum(best, v)
    assert np.allclose(Q.max(axis=1), best, atol=1e-9)


def test_argmax_sets_keep_ties():
    Q = np.array([[1.0, 1.0 + 1e-12, 0.0], [0.0, 2.0, 1.0]])
    assert rl.argmax_sets(Q) == [frozenset({0, 1}), frozenset({1})]


def test_tabular_mdp_validation():
    with pytest.raises(ValueError):
        TabularMDP(np.ones((2, 1, 2)), np.zeros((2, 1, 2)))
    with pytest.raises(ValueError):
        TabularMDP(np.full((2, 1, 2), 0.5), np.full((2, 1, 2), np.nan))
