"""Clipped-surrogate PPO over RoomWorld, and exact tabular dynamic programming.

Policy and value functions are separate tanh MLPs with hand-written
backpropagation.  A run collects ``n_envs * n_steps`` transitions from
auto-resetting environments, optionally adds the language shaping reward
``lam * r_lang``, computes GAE advantages and takes ``epochs`` passes of
minibatch Adam over the clipped objective.

Episode ends caused by the step limit are treated like terminal states (no
bootstrapping); the observation carries no clock, so the value function
could not tell them apart anyway.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Callable

import numpy as np

from .env import N_ACTIONS
from .optim import Adam, clip_grad_norm
from .seeding import substream
from .shaping import BatchedTracker, ShapingConfig, frequencies, total_reward
from .vecenv import CompiledRoom, VecRoomWorld

EXT_ONLY = "ExtOnly"
EXT_LANG = "Ext+Lang"
REWARD_MODES = (EXT_ONLY, EXT_LANG)


class TrainingError(RuntimeError):
    pass


@dataclass(frozen=True)
class PPOConfig:
    n_envs: int = 8
    n_steps: int = 256
    epochs: int = 4
    minibatch: int = 256
    clip: float = 0.2
    gamma: float = 0.99
    gae_lambda: float = 0.95
    vf_coef: float = 0.5
    ent_coef: float = 0.01
    lr: float = 3e-4
    max_grad_norm: float = 0.5
    hidden: int = 64
    normalize_advantages: bool = True

    @property
    def rollout(self) -> int:
        return self.n_envs * self.n_steps


# -- networks ----------------------------------------------------------------

def _dense_init(fan_in, fan_out, rng, gain=1.0):
    return rng.normal(0.0, gain / np.sqrt(fan_in), (fan_in, fan_out)), np.zeros(fan_out)


@dataclass
class PolicyModel:
    params: dict[str, np.ndarray]
    n_layers: int = 2

    @classmethod
    def init(cls, obs_dim: int, rng: np.random.Generator, hidden: int = 64,
             n_actions: int = N_ACTIONS, n_layers: int = 2) -> "PolicyModel":
        p = {}
        for head, out, gain in (("pi", n_actions, 0.01), ("v", 1, 1.0)):
            width = obs_dim
            for k in range(n_layers):
                p[f"{head}{k}_W"], p[f"{head}{k}_b"] = _dense_init(width, hidden, rng)
                width = hidden
            p[f"{head}_out_W"], p[f"{head}_out_b"] = _dense_init(width, out, rng, gain)
        return cls(p, n_layers)

    def _mlp(self, head: str, x: np.ndarray):
        hs = [x]
        for k in range(self.n_layers):
            x = np.tanh(x @ self.params[f"{head}{k}_W"] + self.params[f"{head}{k}_b"])
            hs.append(x)
        return x @ self.params[f"{head}_out_W"] + self.params[f"{head}_out_b"], hs

    def _mlp_backward(self, head: str, dout: np.ndarray, hs: list, grads: dict) -> None:
        grads[f"{head}_out_W"] = hs[-1].T @ dout
        grads[f"{head}_out_b"] = dout.sum(axis=0)
        dx = dout @ self.params[f"{head}_out_W"].T
        for k in reversed(range(self.n_layers)):
            dz = dx * (1.0 - hs[k + 1] ** 2)
            grads[f"{head}{k}_W"] = hs[k].T @ dz
            grads[f"{head}{k}_b"] = dz.sum(axis=0)
            dx = dz @ self.params[f"{head}{k}_W"].T

    def log_probs(self, obs: np.ndarray) -> np.ndarray:
        z, _ = self._mlp("pi", obs)
        z = z - z.max(axis=1, keepdims=True)
        return z - np.log(np.exp(z).sum(axis=1, keepdims=True))

    def value(self, obs: np.ndarray) -> np.ndarray:
        return self._mlp("v", obs)[0][:, 0]

    def act(self, obs: np.ndarray, rng: np.random.Generator, greedy: bool = False):
        """Sample (or argmax) actions; returns (actions, their log-probs)."""
        logp = self.log_probs(obs)
        if greedy:
            a = np.argmax(logp, axis=1)
        else:
            cdf = np.cumsum(np.exp(logp), axis=1)
            u = rng.random(len(obs))[:, None] * cdf[:, -1:]
            a = np.minimum((cdf < u).sum(axis=1), logp.shape[1] - 1)
        return a, logp[np.arange(len(a)), a]

    def copy(self) -> "PolicyModel":
        return PolicyModel({k: v.copy() for k, v in self.params.items()}, self.n_layers)


# -- PPO objective -------------------------------------------------------------

@dataclass
class RolloutBatch:
    obs: np.ndarray          # (T, n, d)
    actions: np.ndarray      # (T, n)
    logp: np.ndarray         # (T, n)
    rewards: np.ndarray      # (T, n) total reward used for learning
    values: np.ndarray       # (T, n)
    dones: np.ndarray        # (T, n)
    last_value: np.ndarray   # (n,)
    advantages: np.ndarray | None = None
    returns: np.ndarray | None = None

    def __len__(self) -> int:
        return self.actions.size


def compute_gae(rewards, values, dones, last_value, gamma: float, lam: float):
    """Generalised advantage estimates; ``dones[t]`` cuts the bootstrap after step t."""
    T = len(rewards)
    adv = np.zeros_like(values)
    nxt_adv = np.zeros_like(last_value)
    nxt_val = last_value
    for t in reversed(range(T)):
        live = 1.0 - dones[t]
        delta = rewards[t] + gamma * nxt_val * live - values[t]
        nxt_adv = delta + gamma * lam * live * nxt_adv
        adv[t] = nxt_adv
        nxt_val = values[t]
    return adv, adv + values


def ppo_loss_and_grad(policy: PolicyModel, obs, actions, old_logp, adv, returns, cfg: PPOConfig):
    """Total loss = -clipped surrogate + vf_coef * MSE - ent_coef * entropy.

    Returns (loss, grads, diagnostics).
    """
    n = len(actions)
    idx = np.arange(n)
    z, hs_pi = policy._mlp("pi", obs)
    z = z - z.max(axis=1, keepdims=True)
    logp_all = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    p = np.exp(logp_all)
    logp = logp_all[idx, actions]
    ratio = np.exp(logp - old_logp)
    clipped = np.clip(ratio, 1.0 - cfg.clip, 1.0 + cfg.clip)
    surr1, surr2 = ratio * adv, clipped * adv
    surr = np.minimum(surr1, surr2)
    entropy = -(p * logp_all).sum(axis=1)
    v_out, hs_v = policy._mlp("v", obs)
    v = v_out[:, 0]
    v_loss = np.mean((v - returns) ** 2)
    loss = -surr.mean() + cfg.vf_coef * v_loss - cfg.ent_coef * entropy.mean()

    # d(-mean surr)/d logp through the active branch of the min
    active = surr1 <= surr2
    dlogp = -np.where(active, adv * ratio, 0.0) / n
    onehot = np.zeros_like(p)
    onehot[idx, actions] = 1.0
    dz = dlogp[:, None] * (onehot - p)
    dz += cfg.ent_coef / n * p * (logp_all + entropy[:, None])
    grads: dict[str, np.ndarray] = {}
    policy._mlp_backward("pi", dz, hs_pi, grads)
    dv = (cfg.vf_coef * 2.0 / n * (v - returns))[:, None]
    policy._mlp_backward("v", dv, hs_v, grads)
    diag = {
        "policy_loss": float(-surr.mean()),
        "value_loss": float(v_loss),
        "entropy": float(entropy.mean()),
        "clip_fraction": float(np.mean(np.abs(ratio - 1.0) > cfg.clip)),
        "approx_kl": float(np.mean(old_logp - logp)),
    }
    return float(loss), grads, diag


def ppo_update(policy: PolicyModel, batch: RolloutBatch, cfg: PPOConfig, opt: Adam,
               rng: np.random.Generator) -> dict:
    """``cfg.epochs`` passes of shuffled minibatch updates; returns mean diagnostics."""
    obs = batch.obs.reshape(-1, batch.obs.shape[-1])
    actions = batch.actions.reshape(-1)
    old_logp = batch.logp.reshape(-1)
    adv = batch.advantages.reshape(-1)
    ret = batch.returns.reshape(-1)
    if cfg.normalize_advantages and len(adv) > 1:
        adv = (adv - adv.mean()) / (adv.std() + 1e-8)
    n = len(actions)
    logs = []
    for _ in range(cfg.epochs):
        order = rng.permutation(n)
        for s in range(0, n, cfg.minibatch):
            mb = order[s : s + cfg.minibatch]
            loss, grads, diag = ppo_loss_and_grad(policy, obs[mb], actions[mb], old_logp[mb], adv[mb], ret[mb], cfg)
            if not np.isfinite(loss):
                raise TrainingError(f"non-finite PPO loss {loss}")
            clip_grad_norm(grads, cfg.max_grad_norm)
            opt.step(policy.params, grads)
            logs.append(diag)
    return {k: float(np.mean([d[k] for d in logs])) for k in logs[0]}


# -- training runs -------------------------------------------------------------

@dataclass
class TrainingCurve:
    timesteps: np.ndarray
    successes: np.ndarray
    meta: dict = field(default_factory=dict)

    def points(self) -> list[tuple[int, int]]:
        return list(zip(self.timesteps.tolist(), self.successes.tolist()))


@dataclass
class RunResult:
    curve: TrainingCurve
    policy: PolicyModel
    final_successes: int | None
    correlation_log: tuple[np.ndarray, np.ndarray] | None = None
    diagnostics: list = field(default_factory=list)
    actions: np.ndarray | None = None


class Collector:
    """Steps a vector env with an optional shaping tracker and records rollouts."""

    def __init__(self, room: CompiledRoom, cfg: PPOConfig, shaping: ShapingConfig,
                 potential_model=None, instruction=None, noise_rng=None, log_correlation=False):
        self.env = VecRoomWorld(room, cfg.n_envs)
        self.cfg = cfg
        self.shaping = shaping
        self.tracker = None
        if potential_model is not None:
            self.tracker = BatchedTracker(potential_model, instruction, cfg.n_envs, shaping.gamma,
                                          shaping.noise_sigma, noise_rng, shaping.recompute_period)
        self.obs = self.env.reset()
        self.successes = 0
        self.log_correlation = log_correlation and self.tracker is not None
        self.corr_F: list[np.ndarray] = []
        self.corr_p: list[float] = []
        self.action_trace: list[np.ndarray] = []

    def collect(self, policy: PolicyModel, rng: np.random.Generator) -> RolloutBatch:
        T, n, d = self.cfg.n_steps, self.cfg.n_envs, self.env.obs_dim
        obs = np.empty((T, n, d))
        actions = np.empty((T, n), dtype=np.int64)
        logp = np.empty((T, n))
        rewards = np.empty((T, n))
        values = np.empty((T, n))
        dones = np.empty((T, n))
        for t in range(T):
            a, lp = policy.act(self.obs, rng)
            obs[t], actions[t], logp[t] = self.obs, a, lp
            values[t] = policy.value(self.obs)
            self.obs, r_ext, done, success = self.env.step(a)
            r = r_ext
            if self.tracker is not None:
                r_lang = self.tracker.step(a)
                if self.log_correlation:
                    self.corr_F.append(frequencies(self.tracker.counts[0]))
                    self.corr_p.append(0.5 * (1.0 + self.tracker.raw_phi[0]))
                self.tracker.reset(done)
                r = total_reward(r_ext, r_lang, self.shaping.lam)
            rewards[t] = r
            dones[t] = done
            self.successes += int(success.sum())
            self.action_trace.append(a)
        return RolloutBatch(obs, actions, logp, rewards, values, dones, policy.value(self.obs))


def train_policy(room: CompiledRoom, total_timesteps: int = 100_000, seed: int = 0,
                 mode: str = EXT_ONLY, shaping: ShapingConfig | None = None, potential_model=None,
                 instruction=None, cfg: PPOConfig | None = None, eval_timesteps: int = 0,
                 log_correlation: bool = False, record_actions: bool = False,
                 meta: dict | None = None) -> RunResult:
    """Train from scratch; the curve gains one point per rollout, starting at (0, 0).

    ``mode == ExtOnly`` runs without any tracker.  ``Ext+Lang`` needs a
    potential model and an instruction; with ``lam == 0`` it learns from
    exactly the extrinsic rewards.
    """
    cfg = cfg or PPOConfig()
    shaping = shaping or ShapingConfig()
    if mode not in REWARD_MODES:
        raise ValueError(f"unknown reward mode {mode!r}")
    if mode == EXT_LANG and potential_model is None:
        raise ValueError("Ext+Lang needs a potential model")
    init_rng = substream(seed, "policy-init")
    act_rng = substream(seed, "actions")
    upd_rng = substream(seed, "minibatches")
    noise_rng = substream(seed, "potential-noise")
    policy = PolicyModel.init(room.obs_dim, init_rng, cfg.hidden)
    opt = Adam(policy.params, lr=cfg.lr, eps=1e-5)
    col = Collector(room, cfg, shaping, potential_model if mode == EXT_LANG else None,
                    instruction, noise_rng, log_correlation)
    xs, ys = [0], [0]
    diagnostics = []
    steps = 0
    while steps < total_timesteps:
        batch = col.collect(policy, act_rng)
        steps += len(batch)
        batch.advantages, batch.returns = compute_gae(batch.rewards, batch.values, batch.dones,
                                                      batch.last_value, cfg.gamma, cfg.gae_lambda)
        diagnostics.append(ppo_update(policy, batch, cfg, opt, upd_rng))
        xs.append(steps)
        ys.append(col.successes)
    info = {"mode": mode, "seed": seed, "lam": shaping.lam if mode == EXT_LANG else 0.0,
            "noise_sigma": shaping.noise_sigma if mode == EXT_LANG else 0.0, **(meta or {})}
    curve = TrainingCurve(np.array(xs), np.array(ys), info)
    final = None
    if eval_timesteps:
        final = evaluate_policy(policy, room, eval_timesteps, substream(seed, "evaluation"))
    corr = (np.array(col.corr_F), np.array(col.corr_p)) if col.log_correlation else None
    acts = np.array(col.action_trace) if record_actions else None
    return RunResult(curve, policy, final, corr, diagnostics, acts)


def evaluate_policy(policy, room: CompiledRoom, eval_timesteps: int = 10_000,
                    rng: np.random.Generator | None = None, greedy: bool = False) -> int:
    """Successful episodes in ``eval_timesteps`` steps of one env, no learning.

    ``policy`` needs ``act(obs, rng, greedy) -> (actions, logp)``.
    """
    rng = rng or np.random.default_rng(0)
    env = VecRoomWorld(room, 1)
    obs = env.reset()
    wins = 0
    for _ in range(eval_timesteps):
        a, _ = policy.act(obs, rng, greedy)
        obs, _, _, success = env.step(a)
        wins += int(success[0])
    return wins


# -- exact dynamic programming --------------------------------------------------

@dataclass
class TabularMDP:
    """Finite MDP with T[s, a, s'] probabilities and R[s, a, s'] rewards."""

    T: np.ndarray
    R: np.ndarray
    gamma: float = 0.9
    horizon: int | None = None

    def __post_init__(self):
        self.T = np.asarray(self.T, dtype=np.float64)
        self.R = np.asarray(self.R, dtype=np.float64)
        if self.T.ndim != 3 or self.T.shape[0] != self.T.shape[2] or self.T.shape != self.R.shape:
            raise ValueError("T and R must both have shape (S, A, S)")
        if np.any(self.T < 0) or not np.allclose(self.T.sum(axis=2), 1.0, atol=1e-12, rtol=0):
            raise ValueError("every T[s, a, :] must be a probability distribution")
        if not np.all(np.isfinite(self.R)):
            raise ValueError("rewards must be finite")

    @property
    def n_states(self) -> int:
        return self.T.shape[0]

    @property
    def n_actions(self) -> int:
        return self.T.shape[1]

    def expected_reward(self) -> np.ndarray:
        return np.einsum("sat,sat->sa", self.T, self.R)


def argmax_sets(Q: np.ndarray, tol: float = 1e-9) -> list[frozenset[int]]:
    """Per row, every action whose value is within ``tol`` of the row maximum."""
    best = Q.max(axis=-1, keepdims=True)
    return [frozenset(np.flatnonzero(row).tolist()) for row in (Q >= best - tol)]


def bellman_backup(mdp: TabularMDP, Q: np.ndarray, gamma: float) -> np.ndarray:
    return mdp.expected_reward() + gamma * mdp.T @ Q.max(axis=1)


def value_iteration(mdp: TabularMDP, gamma: float | None = None, tol: float = 1e-10,
                    horizon: int | None = None, max_iter: int = 100_000):
    """Optimal action values and their argmax sets.

    Discounted mode returns Q with sup-norm Bellman residual below ``tol``.
    Finite-horizon mode (``horizon`` or ``mdp.horizon`` set) returns an array
    ``Q[d]`` for d = 0..H steps remaining (Q[0] = 0) and argmax sets per depth.
    """
    gamma = mdp.gamma if gamma is None else gamma
    horizon = mdp.horizon if horizon is None else horizon
    S, A = mdp.n_states, mdp.n_actions
    if horizon is not None:
        Q = np.zeros((horizon + 1, S, A))
        for d in range(1, horizon + 1):
            Q[d] = bellman_backup(mdp, Q[d - 1], gamma)
        return Q, [argmax_sets(Q[d]) for d in range(horizon + 1)]
    if not 0.0 <= gamma < 1.0:
        raise ValueError("discounted value iteration needs gamma in [0, 1)")
    Q = np.zeros((S, A))
    for _ in range(max_iter):
        Q_new = bellman_backup(mdp, Q, gamma)
        if np.max(np.abs(Q_new - Q)) < tol * (1.0 - gamma) / max(gamma, 1e-12) or gamma == 0:
            Q = Q_new
            break
        Q = Q_new
    return Q, argmax_sets(Q)


def bellman_residual(mdp: TabularMDP, Q: np.ndarray, gamma: float | None = None) -> float:
    gamma = mdp.gamma if gamma is None else gamma
    return float(np.max(np.abs(bellman_backup(mdp, Q, gamma) - Q)))


def config_dict(cfg: PPOConfig) -> dict:
    return asdict(cfg)
