"""Finite-horizon environments and behavior-data generation.

Every environment works on batches: states are ``(n, state_dim)`` arrays,
actions ``(n,)`` integer arrays, and ``h`` is the 1-based step index. Each
environment also knows how to embed ``(state, action)`` pairs into kernel
inputs via :meth:`embed`.

Ring-Gaussian
    ``S = [0, C)``, ``A = {0, ..., C}``, default horizon ``C``. The next
    state is ``Normal((s + a) mod C, 1 / (2 alpha))`` reduced mod ``C``;
    the reward ``exp(-alpha (s - C/2)^2) / sqrt(pi / alpha)`` ignores the
    action. Kernel input: ``((s - C/2) / (C/2), (a - C/2) / (C/2))``.

Cart-pole
    Classic-control constants (g = 9.8, cart 1.0 kg, pole 0.1 kg,
    half-length 0.5, force 10, dt 0.02, explicit Euler). Reward 1 while
    ``|x| <= 2.4`` and ``|theta| <= 12 deg``; leaving that box moves the
    system to :data:`CARTPOLE_ABSORBING`, which pays 0 forever. Kernel
    input: each state coordinate divided by its scale in ``bounds`` and
    clipped to ``[-1, 1]``, followed by ``2a - 1``. The divisors default
    to :data:`CARTPOLE_BOUNDS` and can be overridden through ``bounds``.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Callable, Optional

import numpy as np

from udskernel.dataset import Dataset
from udskernel.exceptions import InputError

# (x, x_dot, theta, theta_dot) scales used to map states into [-1, 1]
CARTPOLE_BOUNDS = (2.4, 3.0, 12 * 2 * math.pi / 360, 3.5)
CARTPOLE_ABSORBING = (3.0, 0.0, 0.5, 0.0)


def _as_states(s, state_dim: int) -> np.ndarray:
    s = np.asarray(s, dtype=float)
    return s.reshape(-1, state_dim)


@dataclass(frozen=True)
class RingGaussianEnv:
    alpha: float = 3.0
    C: int = 8
    H: Optional[int] = None

    name = "ring-gaussian"
    state_dim = 1

    def __post_init__(self):
        if not self.alpha > 0:
            raise InputError(f"alpha must be > 0, got {self.alpha}")
        if int(self.C) != self.C or self.C < 1:
            raise InputError(f"C must be a positive integer, got {self.C}")
        if self.H is not None and self.H < 1:
            raise InputError(f"H must be >= 1, got {self.H}")

    @property
    def horizon(self) -> int:
        return int(self.C if self.H is None else self.H)

    @property
    def action_count(self) -> int:
        return int(self.C) + 1

    @property
    def embed_dim(self) -> int:
        return 2

    @property
    def transition_variance(self) -> float:
        return 1.0 / (2.0 * self.alpha)

    def to_dict(self) -> dict:
        return {"variant": self.name, **asdict(self)}

    def sample_initial(self, rng: np.random.Generator, size: int = 1) -> np.ndarray:
        return rng.uniform(0.0, self.C, size=(size, 1))

    def reward_of_state(self, s) -> np.ndarray:
        s = np.asarray(s, dtype=float)
        return np.exp(-self.alpha * (s - self.C / 2) ** 2) / math.sqrt(math.pi / self.alpha)

    def true_reward(self, h, s, a) -> np.ndarray:
        return self.reward_of_state(_as_states(s, 1)[:, 0])

    def wrap(self, g) -> np.ndarray:
        out = np.mod(g, self.C)
        # np.mod can round tiny negatives up to exactly C
        return np.where(out >= self.C, 0.0, out)

    def step(self, h, s, a, rng: np.random.Generator):
        s = _as_states(s, 1)
        a = np.asarray(a, dtype=float).reshape(-1)
        r = self.true_reward(h, s, a)
        mean = np.mod(s[:, 0] + a, self.C)
        g = rng.normal(mean, math.sqrt(self.transition_variance))
        return self.wrap(g)[:, None], r

    def embed(self, s, a) -> np.ndarray:
        s = _as_states(s, 1)
        a = np.asarray(a, dtype=float).reshape(-1, 1)
        half = self.C / 2
        return np.hstack([(s - half) / half, (a - half) / half])


@dataclass(frozen=True)
class CartPoleEnv:
    H: int = 20
    gravity: float = 9.8
    masscart: float = 1.0
    masspole: float = 0.1
    length: float = 0.5
    force_mag: float = 10.0
    tau: float = 0.02
    x_threshold: float = 2.4
    theta_threshold: float = 12 * 2 * math.pi / 360
    bounds: tuple = CARTPOLE_BOUNDS

    name = "cart-pole"
    state_dim = 4
    action_count = 2

    def __post_init__(self):
        if self.H < 1:
            raise InputError(f"H must be >= 1, got {self.H}")
        bounds = tuple(float(b) for b in self.bounds)
        if len(bounds) != 4 or not all(b > 0 for b in bounds):
            raise InputError(f"bounds must be 4 positive scales, got {self.bounds}")
        object.__setattr__(self, "bounds", bounds)

    @property
    def horizon(self) -> int:
        return int(self.H)

    @property
    def embed_dim(self) -> int:
        return 5

    def to_dict(self) -> dict:
        return {"variant": self.name, **asdict(self), "bounds": list(self.bounds)}

    def sample_initial(self, rng: np.random.Generator, size: int = 1) -> np.ndarray:
        return rng.uniform(-0.05, 0.05, size=(size, 4))

    def alive(self, s) -> np.ndarray:
        s = _as_states(s, 4)
        return (np.abs(s[:, 0]) <= self.x_threshold) & (np.abs(s[:, 2]) <= self.theta_threshold)

    def true_reward(self, h, s, a) -> np.ndarray:
        return self.alive(s).astype(float)

    def dynamics(self, s, a) -> np.ndarray:
        """One explicit Euler step, ignoring termination."""
        s = _as_states(s, 4)
        x, x_dot, theta, theta_dot = s.T
        force = np.where(np.asarray(a).reshape(-1) == 1, self.force_mag, -self.force_mag)
        total_mass = self.masspole + self.masscart
        polemass_length = self.masspole * self.length
        cos, sin = np.cos(theta), np.sin(theta)
        temp = (force + polemass_length * theta_dot**2 * sin) / total_mass
        theta_acc = (self.gravity * sin - cos * temp) / (
            self.length * (4.0 / 3.0 - self.masspole * cos**2 / total_mass)
        )
        x_acc = temp - polemass_length * theta_acc * cos / total_mass
        return np.column_stack(
            [x + self.tau * x_dot, x_dot + self.tau * x_acc, theta + self.tau * theta_dot, theta_dot + self.tau * theta_acc]
        )

    def step(self, h, s, a, rng: Optional[np.random.Generator] = None):
        s = _as_states(s, 4)
        alive = self.alive(s)
        r = alive.astype(float)
        nxt = self.dynamics(s, a)
        dead = ~alive | ~self.alive(nxt)
        nxt[dead] = CARTPOLE_ABSORBING
        return nxt, r

    def embed(self, s, a) -> np.ndarray:
        s = _as_states(s, 4)
        z = np.clip(s / np.asarray(self.bounds), -1.0, 1.0)
        a = 2.0 * np.asarray(a, dtype=float).reshape(-1, 1) - 1.0
        return np.hstack([z, a])


@dataclass(frozen=True, eq=False)
class TabularEnv:
    """Small finite MDP with states ``0..n_states-1`` and one-hot embedding.

    ``P[h-1, s, a]`` is the next-state distribution and ``R[h-1, s, a]`` the
    reward. States are carried as a single float coordinate.
    """

    P: np.ndarray
    R: np.ndarray
    initial: np.ndarray

    name = "tabular"
    state_dim = 1

    def __post_init__(self):
        P = np.asarray(self.P, dtype=float)
        R = np.asarray(self.R, dtype=float)
        if P.ndim != 4 or R.shape != P.shape[:3] or P.shape[1] != P.shape[3]:
            raise InputError("P must have shape (H, S, A, S) and R shape (H, S, A)")
        if not np.allclose(P.sum(-1), 1.0):
            raise InputError("rows of P must sum to 1")
        object.__setattr__(self, "P", P)
        object.__setattr__(self, "R", R)
        object.__setattr__(self, "initial", np.asarray(self.initial, dtype=float))

    @property
    def horizon(self) -> int:
        return self.P.shape[0]

    @property
    def n_states(self) -> int:
        return self.P.shape[1]

    @property
    def action_count(self) -> int:
        return self.P.shape[2]

    @property
    def embed_dim(self) -> int:
        return self.n_states * self.action_count

    def to_dict(self) -> dict:
        return {"variant": self.name, "P": self.P.tolist(), "R": self.R.tolist(), "initial": self.initial.tolist()}

    def sample_initial(self, rng, size: int = 1) -> np.ndarray:
        return rng.choice(self.n_states, size=size, p=self.initial).astype(float)[:, None]

    def true_reward(self, h, s, a) -> np.ndarray:
        s = _as_states(s, 1)[:, 0].astype(int)
        return self.R[h - 1, s, np.asarray(a).reshape(-1)]

    def step(self, h, s, a, rng):
        si = _as_states(s, 1)[:, 0].astype(int)
        a = np.asarray(a).reshape(-1)
        probs = self.P[h - 1, si, a]
        u = rng.random(len(si))[:, None]
        nxt = np.minimum((u > np.cumsum(probs, axis=1)).sum(1), self.n_states - 1)
        return nxt.astype(float)[:, None], self.R[h - 1, si, a]

    def embed(self, s, a) -> np.ndarray:
        si = _as_states(s, 1)[:, 0].astype(int)
        a = np.asarray(a).reshape(-1)
        Z = np.zeros((len(si), self.embed_dim))
        Z[np.arange(len(si)), si * self.action_count + a] = 1.0
        return Z


def make_env(cfg: dict):
    """Build an environment from a ``{"variant": ..., **params}`` mapping."""
    cfg = dict(cfg)
    variant = cfg.pop("variant")
    if variant == "ring-gaussian":
        return RingGaussianEnv(**cfg)
    if variant == "cart-pole":
        return CartPoleEnv(**cfg)
    if variant == "tabular":
        return TabularEnv(**cfg)
    raise InputError(f"unknown environment variant {variant!r}")


# -- behavior policies -----------------------------------------------------

Policy = Callable[[int, np.ndarray], np.ndarray]


def uniform_behavior(env) -> Callable:
    def act(h, states, rng):
        return rng.integers(0, env.action_count, size=len(states))

    return act


def epsilon_greedy(env, policy: Policy, epsilon: float) -> Callable:
    """Follow ``policy`` except with probability ``epsilon`` act uniformly."""
    if not 0.0 <= epsilon <= 1.0:
        raise InputError(f"epsilon must lie in [0, 1], got {epsilon}")

    def act(h, states, rng):
        greedy = np.asarray(policy(h, states)).reshape(-1)
        explore = rng.random(len(states)) < epsilon
        random = rng.integers(0, env.action_count, size=len(states))
        return np.where(explore, random, greedy)

    return act


def sample_initial(env, rng, size: int = 1) -> np.ndarray:
    return env.sample_initial(rng, size)


def true_reward(env, h, s, a) -> np.ndarray:
    return env.true_reward(h, s, a)


def step(env, h, s, a, rng):
    return env.step(h, s, a, rng)


def generate_dataset(
    env,
    n_episodes: int,
    labeled: bool,
    rng: np.random.Generator,
    behavior: Optional[Callable] = None,
    noise_sigma: float = 0.0,
) -> Dataset:
    """Roll out ``n_episodes`` episodes of the behavior policy.

    Rewards, when ``labeled``, are the true reward plus ``Normal(0,
    noise_sigma^2)`` noise. ``behavior(h, states, rng)`` defaults to uniform
    random actions.
    """
    if n_episodes < 1:
        raise InputError(f"need at least one episode, got {n_episodes}")
    if noise_sigma < 0:
        raise InputError(f"noise_sigma must be >= 0, got {noise_sigma}")
    behavior = behavior or uniform_behavior(env)
    H = env.horizon
    S = np.empty((n_episodes, H, env.state_dim))
    S2 = np.empty_like(S)
    A = np.empty((n_episodes, H), dtype=np.int64)
    R = np.empty((n_episodes, H))
    s = env.sample_initial(rng, n_episodes)
    for i in range(H):
        h = i + 1
        a = np.asarray(behavior(h, s, rng), dtype=np.int64)
        nxt, r = env.step(h, s, a, rng)
        S[:, i], A[:, i], R[:, i], S2[:, i] = s, a, r, nxt
        s = nxt
    if not labeled:
        return Dataset(S, A, S2, None)
    if noise_sigma > 0:
        R = R + rng.normal(0.0, noise_sigma, size=R.shape)
    return Dataset(S, A, S2, R)
