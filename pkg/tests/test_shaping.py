import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from langshape import shaping
from langshape.env import N_ACTIONS
from langshape.shaping import BatchedTracker, PotentialTracker, ShapingConfig

from conftest import TEXTS, tiny_model

MODELS = [tiny_model(s) for s in range(3)]


class LinearPotential:
    """phi(f) = tanh(w . f), enough to exercise the trackers."""

    def __init__(self, w):
        self.w = np.asarray(w)

    def potential_batch(self, F, text):
        return np.tanh(np.atleast_2d(F) @ self.w)


def test_potential_examples():
    assert shaping.potential_from_probs(1.0, 0.0) == 1.0
    assert shaping.potential_from_probs(0.5, 0.5) == 0.0
    assert np.isclose(shaping.potential_from_probs(0.9, 0.1), 0.8)


def test_step_reward_arithmetic():
    class Scripted:
        values = iter([0.5, 0.8])

        def potential_batch(self, F, text):
            return np.array([next(self.values)])

    tr = PotentialTracker(Scripted(), "x", gamma=0.99)
    assert tr.phi_prev == 0.5
    assert np.isclose(tr.step_reward(3), 0.99 * 0.8 - 0.5)
    assert np.isclose(0.99 * 0.8 - 0.5, 0.292)


def test_constant_potential_with_unit_gamma_gives_zero():
    class Const:
        def potential_batch(self, F, text):
            return np.full(len(np.atleast_2d(F)), 0.3)

    tr = PotentialTracker(Const(), "x", gamma=1.0 - 1e-12)
    tr.gamma = 1.0
    assert all(tr.step_reward(a) == 0.0 for a in range(10))


def test_total_reward_examples():
    assert np.isclose(shaping.total_reward(1.0, 0.292, 0.5), 1.146)
    assert shaping.total_reward(1.0, 123.0, 0.0) == 1.0
    assert shaping.total_reward(0.0, 0.4, 2.5) == 1.0


def test_reset_is_idempotent_and_uses_the_zero_vector(model):
    tr = PotentialTracker(model, "go left")
    tr.step_reward(2)
    tr.reset()
    first = (tr.counts.copy(), tr.t, tr.phi_prev)
    tr.reset()
    assert np.array_equal(tr.counts, first[0]) and tr.t == first[1] == 1 and tr.phi_prev == first[2]
    assert tr.counts.sum() == 0
    assert tr.phi_prev == shaping.potential(model, np.zeros(N_ACTIONS), "go left")


@settings(max_examples=100, deadline=None)
@given(k=st.integers(0, 2), text=st.sampled_from(TEXTS),
       actions=st.lists(st.integers(0, N_ACTIONS - 1), min_size=1, max_size=80),
       gamma=st.floats(0.5, 0.999))
def test_telescoping_identity(k, text, actions, gamma):
    model = MODELS[k]
    tr = PotentialTracker(model, text, gamma=gamma)
    phi0 = tr.phi_prev
    total = 0.0
    for t, a in enumerate(actions):
        r = tr.step_reward(a)
        assert abs(tr.phi_prev) <= 1.0
        assert tr.counts.sum() == tr.t - 1
        total += gamma**t * r
    f_T = np.bincount(actions, minlength=N_ACTIONS) / len(actions)
    expected = gamma ** len(actions) * shaping.potential(model, f_T, text) - phi0
    assert abs(total - expected) < 1e-10


def test_same_actions_give_the_same_rewards(model):
    seq = [3, 3, 5, 0, 12, 5]
    runs = []
    for _ in range(2):
        tr = PotentialTracker(model, "climb down the ladder")
        runs.append([tr.step_reward(a) for a in seq])
    assert runs[0] == runs[1]


def test_noise_moments():
    rng = np.random.default_rng(0)
    draws = shaping.add_noise(np.zeros(100_000), 0.1, rng)
    assert abs(draws.mean()) < 0.002
    assert abs(draws.std() - 0.1) < 0.002
    assert shaping.add_noise(0.25, 0.0, None) == 0.25
    with pytest.raises(ValueError):
        shaping.add_noise(0.0, -1.0, rng)


def test_sigma_zero_draws_nothing():
    rng = np.random.default_rng(5)
    state = rng.bit_generator.state
    shaping.add_noise(np.ones(4), 0.0, rng)
    assert rng.bit_generator.state == state


@pytest.mark.parametrize("sigma", [0.01, 0.1, 1.0])
def test_sweep_sigmas_are_accepted(sigma):
    ShapingConfig(lam=0.3, noise_sigma=sigma).validate()


@pytest.mark.parametrize("kwargs", [dict(lam=-1.0), dict(lam=float("inf")), dict(gamma=1.0),
                                    dict(noise_sigma=-0.1), dict(recompute_period=0)])
def test_invalid_shaping_configs(kwargs):
    with pytest.raises(ValueError):
        ShapingConfig(**kwargs).validate()


def test_batched_tracker_matches_scalar_trackers():
    rng = np.random.default_rng(2)
    pot = LinearPotential(rng.normal(size=N_ACTIONS))
    n = 4
    bt = BatchedTracker(pot, "x", n, gamma=0.97)
    scalar = [PotentialTracker(pot, "x", gamma=0.97) for _ in range(n)]
    for t in range(60):
        acts = rng.integers(0, N_ACTIONS, size=n)
        r = bt.step(acts)
        expected = [tr.step_reward(a) for tr, a in zip(scalar, acts)]
        assert np.allclose(r, expected, atol=1e-14)
        done = rng.random(n) < 0.1
        bt.reset(done)
        for tr, d in zip(scalar, done):
            if d:
                tr.reset()
    assert np.array_equal(bt.counts, np.stack([tr.counts for tr in scalar]))


def test_recompute_period_holds_phi_between_updates():
    pot = LinearPotential(np.arange(N_ACTIONS) / N_ACTIONS)
    tr = PotentialTracker(pot, "x", gamma=0.9, recompute_period=3)
    seen = []
    for a in [17, 0, 0, 17, 0, 0]:
        tr.step_reward(a)
        seen.append(tr.phi_prev)
    assert seen[0] == seen[1] == tr.phi0
    assert seen[2] != seen[1] and seen[3] == seen[4] == seen[2]


def test_frequencies_keep_zero_rows():
    out = shaping.frequencies(np.array([[0, 0, 0], [1, 3, 0]]))
    assert np.array_equal(out, [[0, 0, 0], [0.25, 0.75, 0]])
