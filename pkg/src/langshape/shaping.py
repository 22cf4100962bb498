"""Potential-based shaping from relatedness predictions.

The potential of an action-frequency vector is ``phi(f) = p_R(f) - p_U(f)``
and each step earns ``gamma * phi(f_t) - phi(f_{t-1})``.  Counts accumulate
over the current episode only; before the first action the frequency vector
is the all-zero vector, which the network accepts as an ordinary input.

Anything exposing ``potential_batch(F, instruction) -> (N,)`` can serve as
the potential source, which keeps the trackers usable with toy potentials in
tests.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Protocol

import numpy as np

from .env import N_ACTIONS


class PotentialSource(Protocol):
    def potential_batch(self, F: np.ndarray, text) -> np.ndarray: ...


@dataclass(frozen=True)
class ShapingConfig:
    lam: float = 0.0
    gamma: float = 0.99
    noise_sigma: float = 0.0
    recompute_period: int = 1

    def validate(self) -> None:
        if not np.isfinite(self.lam) or self.lam < 0:
            raise ValueError(f"lambda must be finite and >= 0, got {self.lam}")
        if not 0.0 < self.gamma < 1.0:
            raise ValueError(f"gamma must lie in (0, 1), got {self.gamma}")
        if self.noise_sigma < 0:
            raise ValueError("noise sigma must be >= 0")
        if self.recompute_period < 1:
            raise ValueError("recompute_period must be >= 1")


def potential_from_probs(p_R: float, p_U: float) -> float:
    return float(p_R) - float(p_U)


def potential(model: PotentialSource, f: np.ndarray, l) -> float:
    """phi(f) = p_R - p_U for one frequency vector."""
    return float(model.potential_batch(np.asarray(f, dtype=np.float64)[None, :], l)[0])


def add_noise(phi, sigma: float, rng: np.random.Generator | None):
    """phi + N(0, sigma).  sigma == 0 returns phi untouched and draws nothing."""
    if sigma < 0:
        raise ValueError("sigma must be >= 0")
    if sigma == 0:
        return phi
    if np.ndim(phi) == 0:
        return float(phi) + float(rng.normal(0.0, sigma))
    return phi + rng.normal(0.0, sigma, size=np.shape(phi))


def total_reward(r_ext, r_lang, lam: float):
    return r_ext + lam * r_lang


def frequencies(counts: np.ndarray) -> np.ndarray:
    """Row-normalise counts; all-zero rows stay zero (the f0 convention)."""
    counts = np.asarray(counts, dtype=np.float64)
    total = counts.sum(axis=-1, keepdims=True)
    return np.divide(counts, total, out=np.zeros_like(counts), where=total > 0)


class PotentialTracker:
    """Per-episode running counts and the previous potential for one environment."""

    def __init__(self, model: PotentialSource, instruction, gamma: float = 0.99,
                 noise_sigma: float = 0.0, rng: np.random.Generator | None = None,
                 recompute_period: int = 1, n_actions: int = N_ACTIONS):
        if noise_sigma > 0 and rng is None:
            raise ValueError("a noise rng is required when noise_sigma > 0")
        self.model = model
        self.instruction = instruction
        self.gamma = gamma
        self.noise_sigma = noise_sigma
        self.rng = rng
        self.recompute_period = recompute_period
        self.counts = np.zeros(n_actions, dtype=np.int64)
        self.reset()

    def _phi(self) -> float:
        return add_noise(potential(self.model, frequencies(self.counts), self.instruction),
                         self.noise_sigma, self.rng)

    def reset(self) -> None:
        self.counts[:] = 0
        self.t = 1
        self.phi_prev = self._phi()
        self.phi0 = self.phi_prev

    def step_reward(self, action: int) -> float:
        self.counts[int(action)] += 1
        if self.t % self.recompute_period == 0:
            phi_t = self._phi()
        else:
            phi_t = self.phi_prev
        r = self.gamma * phi_t - self.phi_prev
        self.phi_prev = phi_t
        self.t += 1
        return r


def reset_tracker(tracker: PotentialTracker) -> None:
    tracker.reset()


def step_reward(tracker: PotentialTracker, new_action: int) -> float:
    return tracker.step_reward(new_action)


class BatchedTracker:
    """Vectorised trackers for ``n`` environments sharing one instruction.

    One network call per step covers all environments.  ``reset(mask)`` resets
    only the flagged rows, matching auto-resetting vector environments.
    """

    def __init__(self, model: PotentialSource, instruction, n: int, gamma: float = 0.99,
                 noise_sigma: float = 0.0, rng: np.random.Generator | None = None,
                 recompute_period: int = 1, n_actions: int = N_ACTIONS):
        if noise_sigma > 0 and rng is None:
            raise ValueError("a noise rng is required when noise_sigma > 0")
        self.model = model
        self.instruction = instruction
        self.gamma = gamma
        self.noise_sigma = noise_sigma
        self.rng = rng
        self.recompute_period = recompute_period
        self.counts = np.zeros((n, n_actions), dtype=np.int64)
        self.t = np.ones(n, dtype=np.int64)
        self._phi_zero = potential(model, np.zeros(n_actions), instruction)
        self.phi_prev = np.empty(n)
        self.raw_phi = np.full(n, self._phi_zero)
        self.reset(np.ones(n, dtype=bool))

    def reset(self, mask: np.ndarray) -> None:
        mask = np.asarray(mask, dtype=bool)
        k = int(mask.sum())
        if k == 0:
            return
        self.counts[mask] = 0
        self.t[mask] = 1
        self.raw_phi[mask] = self._phi_zero
        self.phi_prev[mask] = add_noise(np.full(k, self._phi_zero), self.noise_sigma, self.rng)

    def step(self, actions: np.ndarray) -> np.ndarray:
        n = len(self.t)
        self.counts[np.arange(n), actions] += 1
        due = self.t % self.recompute_period == 0
        phi_t = self.phi_prev.copy()
        if due.any():
            raw = self.model.potential_batch(frequencies(self.counts[due]), self.instruction)
            self.raw_phi[due] = raw
            phi_t[due] = add_noise(raw, self.noise_sigma, self.rng)
        r = self.gamma * phi_t - self.phi_prev
        self.phi_prev = phi_t
        self.t += 1
        return r
