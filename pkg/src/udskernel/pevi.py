"""Pessimistic value iteration with kernel ridge backups and H-fold splitting.

Episodes are split into ``H`` equal folds; the backup at step ``h`` only
sees the step-``h`` transitions of fold ``h``. With ``K_h`` the fold Gram
matrix and ``k_h(z)`` the kernel vector against the fold support::

    y_h     = r_h + V_{h+1}(s_{h+1})                (V_{H+1} = 0)
    w_h     = (K_h + lam I)^{-1} y_h
    Gamma_h = B lam^{-1/2} sqrt(k(z, z) - k_h(z)^T (K_h + lam I)^{-1} k_h(z))
    Q_h(z)  = clip(k_h(z)^T w_h - Gamma_h(z), 0, H - h + 1)
    pi_h(s) = smallest argmax_a Q_h(s, a),   V_h(s) = Q_h(s, pi_h(s))
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from udskernel.dataset import Dataset
from udskernel.exceptions import InputError
from udskernel.kernels import (
    GramFactor,
    KernelSpec,
    factorize,
    information_gain,
    posterior_variances,
    solve_coefficients,
)
from udskernel.validation import check_delta, check_positive

FOLD_SCHEMES = ("contiguous", "shuffled")


@dataclass(frozen=True, eq=False)
class FoldPlan:
    """Disjoint, equally sized folds of 0-based episode indices."""

    folds: tuple
    scheme: str
    seed: Optional[int]
    n_episodes: int
    truncated: int

    @property
    def fold_size(self) -> int:
        return len(self.folds[0])

    def to_dict(self) -> dict:
        return {
            "folds": [f.tolist() for f in self.folds],
            "scheme": self.scheme,
            "seed": self.seed,
            "n_episodes": self.n_episodes,
            "truncated": self.truncated,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "FoldPlan":
        folds = tuple(np.asarray(f, dtype=np.int64) for f in d["folds"])
        return cls(folds, d["scheme"], d["seed"], d["n_episodes"], d["truncated"])

    def __eq__(self, other):
        return isinstance(other, FoldPlan) and self.to_dict() == other.to_dict()


def split_folds(n_episodes: int, horizon: int, scheme: str = "shuffled", seed: Optional[int] = 0) -> FoldPlan:
    """Partition ``range(n_episodes)`` into ``horizon`` folds of ``n // horizon``.

    ``contiguous`` keeps episode order; ``shuffled`` applies a seeded
    permutation first. Remainder episodes are dropped and counted.
    """
    if scheme not in FOLD_SCHEMES:
        raise InputError(f"fold scheme must be one of {FOLD_SCHEMES}, got {scheme!r}")
    if horizon < 1:
        raise InputError(f"horizon must be >= 1, got {horizon}")
    if n_episodes < horizon:
        raise InputError(f"insufficient episodes for H folds: {n_episodes} episodes, H={horizon}")
    size = n_episodes // horizon
    if scheme == "contiguous":
        order = np.arange(n_episodes, dtype=np.int64)
        seed = None
    else:
        order = np.random.default_rng(seed).permutation(n_episodes).astype(np.int64)
    folds = tuple(order[size * i : size * (i + 1)] for i in range(horizon))
    return FoldPlan(folds, scheme, seed, n_episodes, n_episodes - size * horizon)


def default_bonus_scale(
    fold_supports: Sequence[np.ndarray],
    kernel: KernelSpec,
    lam: float,
    delta: float = 0.1,
    R_Q: float = 2.0,
    c_B: float = 1.0,
    horizon: Optional[int] = None,
) -> float:
    """``c_B H sqrt(2 lam R_Q^2 + 8 G + 2/H + 8 log(H/delta))``.

    ``G`` is the largest realised information gain over the folds, standing
    in for the worst-case gain over all fold-sized datasets.
    """
    H = horizon or len(fold_supports)
    gain = max((information_gain(kernel, Z, lam) for Z in fold_supports), default=0.0)
    return c_B * H * math.sqrt(2 * lam * R_Q**2 + 8 * gain + 2.0 / H + 8 * math.log(H / delta))


def theoretical_bonus_scales(n_episodes: int, horizon: int, delta: float, d: float, m: int, const: float = 1.0) -> dict:
    """Decay-class closed forms for the bonus scale, with an explicit constant.

    The polynomial case is reported for both exponents that appear in the
    literature, ``(m+1)/(2(d+m))`` and ``(d+1)/(2(d+m))``. Diagnostic only.
    """
    N, H = n_episodes, horizon
    log_term = math.log(N / delta)
    out = {
        "finite-spectrum": const * H * math.sqrt(d * log_term),
        "exponential": const * H * math.sqrt(log_term ** (1 + 1 / d)),
    }
    for label, e in (("polynomial(m+1)", (m + 1) / (2 * (d + m))), ("polynomial(d+1)", (d + 1) / (2 * (d + m)))):
        out[label] = const * N**e * H ** (1 - e) * math.sqrt(log_term)
    return out


class KernelPEVI(BaseEstimator):
    """Fit a pessimistic greedy policy from a labeled offline dataset.

    Parameters
    ----------
    env
        Supplies ``horizon``, ``action_count`` and ``embed``.
    kernel : KernelSpec, optional
    lam : float, optional
        Ridge; defaults to ``1 + 1/N``.
    bonus_scale : float, optional
        ``B``. When omitted it comes from :func:`default_bonus_scale`
        with ``c_B``, ``R_Q`` and ``delta``.
    fold_scheme : {"shuffled", "contiguous"}
    seed : int
        Seed of the shuffled fold permutation.
    """

    def __init__(
        self,
        env,
        kernel: Optional[KernelSpec] = None,
        lam=None,
        bonus_scale=None,
        c_B=1.0,
        R_Q=2.0,
        delta=0.1,
        fold_scheme="shuffled",
        seed=0,
    ):
        self.env = env
        self.kernel = kernel
        self.lam = lam
        self.bonus_scale = bonus_scale
        self.c_B = c_B
        self.R_Q = R_Q
        self.delta = delta
        self.fold_scheme = fold_scheme
        self.seed = seed

    def fit(self, X: Dataset, y=None, fold_plan: Optional[FoldPlan] = None):
        if not isinstance(X, Dataset) or not X.labeled:
            raise InputError("PEVI needs a labeled dataset")
        H = X.horizon
        if H != self.env.horizon:
            raise InputError(f"dataset horizon {H} differs from environment horizon {self.env.horizon}")
        N = X.n_episodes
        plan = fold_plan or split_folds(N, H, self.fold_scheme, self.seed)
        if plan.n_episodes != N or len(plan.folds) != H:
            raise InputError("fold plan does not match the dataset")
        lam = self.lam if self.lam is not None else 1.0 + 1.0 / N
        check_positive(lam, "lam")
        kernel = self.kernel or KernelSpec(ambient_dim=self.env.embed_dim)

        supports = []
        for h in range(1, H + 1):
            s, a, _, _ = X.step(h)
            idx = plan.folds[h - 1]
            supports.append(self.env.embed(s[idx], a[idx]))
        if self.bonus_scale is not None:
            B = check_positive(self.bonus_scale, "bonus_scale")
        else:
            check_delta(self.delta)
            B = default_bonus_scale(supports, kernel, lam, self.delta, self.R_Q, self.c_B, H)
            check_positive(B, "bonus scale")

        self.kernel_ = kernel
        self.lam_ = float(lam)
        self.B_ = float(B)
        self.horizon_ = H
        self.action_count_ = self.env.action_count
        self.fold_plan_ = plan
        self.factors_: list = [None] * H
        self.weights_: list = [None] * H
        self.responses_: list = [None] * H
        for h in range(H, 0, -1):
            idx = plan.folds[h - 1]
            _, _, r, s_next = X.step(h)
            y_h = r[idx] + (self.v_hat(h + 1, s_next[idx]) if h < H else 0.0)
            factor = factorize(kernel, supports[h - 1], self.lam_)
            self.factors_[h - 1] = factor
            self.responses_[h - 1] = y_h
            self.weights_[h - 1] = solve_coefficients(factor, y_h)
        return self

    # -- queries ---------------------------------------------------------

    def _check_h(self, h: int) -> None:
        check_is_fitted(self, "weights_")
        if not 1 <= h <= self.horizon_:
            raise InputError(f"h must lie in [1, {self.horizon_}], got {h}")

    def bonus(self, h: int, Z) -> np.ndarray:
        self._check_h(h)
        v = posterior_variances(self.factors_[h - 1], Z)
        return self.B_ / math.sqrt(self.lam_) * np.sqrt(v)

    def q_values(self, h: int, Z) -> np.ndarray:
        """Clipped pessimistic Q at embedded points ``Z``."""
        self._check_h(h)
        factor = self.factors_[h - 1]
        Z = self.kernel_.check_points(Z)
        mean = factor.kernel_vectors(Z) @ self.weights_[h - 1] if factor.size else np.zeros(len(Z))
        return np.clip(mean - self.bonus(h, Z), 0.0, self.horizon_ - h + 1)

    def q_table(self, h: int, states) -> np.ndarray:
        """Q for every action, shape ``(n_states, action_count)``."""
        self._check_h(h)
        states = np.asarray(states, dtype=float).reshape(-1, self.env.state_dim)
        n, k = len(states), self.action_count_
        S = np.repeat(states, k, axis=0)
        A = np.tile(np.arange(k), n)
        return self.q_values(h, self.env.embed(S, A)).reshape(n, k)

    def q_hat(self, h: int, states, actions) -> np.ndarray:
        states = np.asarray(states, dtype=float).reshape(-1, self.env.state_dim)
        return self.q_values(h, self.env.embed(states, np.asarray(actions).reshape(-1)))

    def act(self, h: int, states) -> np.ndarray:
        # np.argmax picks the first maximiser, i.e. the smallest action index
        return np.argmax(self.q_table(h, states), axis=1)

    def v_hat(self, h: int, states) -> np.ndarray:
        return self.q_table(h, states).max(axis=1)

    def predict(self, states, h: int = 1) -> np.ndarray:
        return self.act(h, states)

    def fold_information_gains(self) -> list:
        check_is_fitted(self, "weights_")
        return [information_gain(self.kernel_, f.support, self.lam_) for f in self.factors_]


# -- functional surface ----------------------------------------------------


def backward_induction(d: Dataset, env, kernel, lam, B, fold_plan: FoldPlan) -> KernelPEVI:
    check_positive(B, "B")
    return KernelPEVI(env, kernel, lam, B).fit(d, fold_plan=fold_plan)


def bonus(policy: KernelPEVI, h: int, z) -> np.ndarray:
    return policy.bonus(h, z)


def q_hat(policy: KernelPEVI, h: int, s, a) -> np.ndarray:
    return policy.q_hat(h, s, a)


def v_hat(policy: KernelPEVI, h: int, s) -> np.ndarray:
    return policy.v_hat(h, s)


def act(policy: KernelPEVI, h: int, s) -> np.ndarray:
    return policy.act(h, s)


# -- persistence -----------------------------------------------------------


def save_policy(policy: KernelPEVI, path, fingerprint: str = "") -> None:
    """Write an ``.npz`` archive with per-step supports, weights and metadata."""
    check_is_fitted(policy, "weights_")
    meta = {
        "kind": "pevi-policy",
        "horizon": policy.horizon_,
        "action_count": policy.action_count_,
        "lam": policy.lam_,
        "B": policy.B_,
        "clip": [policy.horizon_ - h + 1 for h in range(1, policy.horizon_ + 1)],
        "kernel": policy.kernel_.to_dict(),
        "env": policy.env.to_dict(),
        "fold_plan": policy.fold_plan_.to_dict(),
        "fingerprint": fingerprint,
    }
    arrays = {"meta": np.array(json.dumps(meta))}
    for h in range(1, policy.horizon_ + 1):
        arrays[f"support_{h}"] = policy.factors_[h - 1].support
        arrays[f"weights_{h}"] = policy.weights_[h - 1]
        arrays[f"responses_{h}"] = policy.responses_[h - 1]
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)


def load_policy(path):
    """Return ``(policy, fingerprint)`` from an archive written by :func:`save_policy`."""
    from udskernel.envs import make_env

    with np.load(path, allow_pickle=False) as data:
        meta = json.loads(str(data["meta"]))
        kernel = KernelSpec.from_dict(meta["kernel"])
        env = make_env(meta["env"])
        policy = KernelPEVI(env, kernel, meta["lam"], meta["B"])
        policy.kernel_ = kernel
        policy.lam_ = float(meta["lam"])
        policy.B_ = float(meta["B"])
        policy.horizon_ = meta["horizon"]
        policy.action_count_ = meta["action_count"]
        policy.fold_plan_ = FoldPlan.from_dict(meta["fold_plan"])
        policy.factors_ = [factorize(kernel, data[f"support_{h}"], policy.lam_) for h in range(1, meta["horizon"] + 1)]
        policy.weights_ = [data[f"weights_{h}"].copy() for h in range(1, meta["horizon"] + 1)]
        policy.responses_ = [data[f"responses_{h}"].copy() for h in range(1, meta["horizon"] + 1)]
    return policy, meta["fingerprint"]


def fold_factors(policy: KernelPEVI) -> list[GramFactor]:
    check_is_fitted(policy, "factors_")
    return list(policy.factors_)
