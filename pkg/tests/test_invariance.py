from math import comb

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from langshape import invariance
from langshape.rl import value_iteration

from conftest import tiny_model


@settings(max_examples=40, deadline=None)
@given(A=st.integers(1, 5), total=st.integers(0, 6))
def test_count_vectors_enumerate_every_composition(A, total):
    vecs = invariance.count_vectors(A, total)
    assert len(vecs) == len(set(vecs)) == comb(total + A - 1, A - 1)
    assert all(len(g) == A and sum(g) == total and min(g) >= 0 for g in vecs)


def test_augmented_size_matches_enumeration():
    mdp = invariance.random_mdp(np.random.default_rng(0), 3, 2)
    aug = invariance.augment(mdp, 4)
    assert aug.n == invariance.augmented_size(3, 2, 4) == 3 * comb(6, 2)


def test_cap_is_enforced():
    mdp = invariance.random_mdp(np.random.default_rng(0), 6, 4)
    with pytest.raises(invariance.AugmentationSizeError, match="above the cap"):
        invariance.augment(mdp, 8, cap=1000)


def test_lifted_transitions_only_follow_consistent_counts():
    mdp = invariance.random_mdp(np.random.default_rng(1), 2, 2)
    aug = invariance.augment(mdp, 2)
    T, R = aug.dense()
    for i in range(aug.n):
        for a in range(2):
            for j in range(aug.n):
                assert T[i, a, j] == pytest.approx(aug.transition(i, a, j))
                if T[i, a, j] > 0:
                    assert aug.consistent(i, a, j)
                    assert R[i, a, j] == aug.reward(i, a, j)
            if aug.depth[i] < aug.H:
                assert np.isclose(T[i, a].sum(), 1.0)


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 10**6), S=st.integers(2, 4), A=st.integers(2, 3), H=st.integers(1, 4))
def test_shaped_values_are_base_values_minus_the_start_potential(seed, S, A, H):
    rng = np.random.default_rng(seed)
    mdp = invariance.random_mdp(rng, S, A, gamma=0.9)
    phi = invariance.random_potential(A, H, rng)
    aug = invariance.augment(mdp, H)
    shaped = invariance.shaped_rewards(aug, phi)
    Q = invariance.finite_horizon_q(shaped, 0.9, np.where(aug.depth == H, -shaped.potential, 0.0))
    Q_base, _ = value_iteration(mdp, 0.9, horizon=H)
    for i, (s, g) in enumerate(aug.states):
        if aug.depth[i] < H:
            assert np.allclose(Q[i], Q_base[H - aug.depth[i], s] - phi(g), atol=1e-12)


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 10**6))
def test_random_potentials_pass(seed):
    rng = np.random.default_rng(seed)
    mdp = invariance.random_mdp(rng, int(rng.integers(2, 5)), int(rng.integers(2, 4)))
    H = int(rng.integers(1, 5))
    phi = invariance.random_potential(mdp.n_actions, H, rng)
    rep = invariance.verify_policy_invariance(mdp, phi, H)
    assert rep.passed and rep.counterexample is None and rep.n_checked > 0
    assert rep.lifted_residual < 1e-9 and rep.shaped_lifted_residual < 1e-9
    assert invariance.verify_policy_invariance(mdp, invariance.shift(phi, 5.0), H).passed


def test_learned_potential_passes():
    model = tiny_model(0)
    rng = np.random.default_rng(3)
    mdp = invariance.random_mdp(rng, 3, 3)
    phi = invariance.learn_potential(model, "climb down the ladder")
    rep = invariance.verify_policy_invariance(mdp, phi, 4)
    assert rep.passed
    assert abs(phi((0, 0, 0))) <= 1.0


def test_action_bonus_is_caught():
    mdp, bonus, H = invariance.action_bonus_counterexample()
    rep = invariance.verify_policy_invariance(mdp, None, H, shaping=bonus)
    assert not rep.passed
    assert rep.counterexample["base_argmax"] == [1]
    assert rep.counterexample["shaped_argmax"] == [0]


def test_without_leaf_correction_the_claim_can_fail():
    # a potential that only rewards ending on many zeros changes the last choice
    T = np.zeros((1, 2, 1))
    T[0, :, 0] = 1.0
    R = np.zeros((1, 2, 1))
    R[0, 1, 0] = 0.1
    mdp = invariance.TabularMDP(T, R, 0.9)
    phi = lambda g: 1.0 if g[0] == 1 else 0.0
    aug = invariance.augment(mdp, 1)
    shaped = invariance.shaped_rewards(aug, phi)
    Q = invariance.finite_horizon_q(shaped, 0.9)
    assert np.argmax(Q[0]) == 0  # shaped, zero leaf: action 0 wins
    assert invariance.verify_policy_invariance(mdp, phi, 1).passed


def test_verification_table_rows():
    rows, dumps = invariance.verification_table(3, 2, seed=1, max_states=4, max_actions=3, max_horizon=4)
    assert len(rows) == 6 and all(r["passed"] for r in rows) and dumps == []
