"""Pessimistic kernel-ridge reward learning and relabeling.

:class:`PessimisticKernelRidge` is the single-step regressor: kernel ridge
regression with ridge ``nu`` plus the confidence radius

    beta = sqrt(nu) * S + sqrt(log det(nu I + K) + 2 log(1 / delta))

and a lower-confidence prediction ``max(mean - beta nu^{-1/2} sqrt(v), 0)``
where ``v`` is the posterior variance under ridge ``nu``.

:class:`RewardRelabeler` fits one regressor per step on a labeled dataset
and rewrites the rewards of an unlabeled dataset with the lower-confidence
prediction.
"""

from __future__ import annotations

import json
import math
from typing import Optional

import numpy as np
from sklearn.base import BaseEstimator, RegressorMixin, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from udskernel.dataset import Dataset
from udskernel.exceptions import InputError
from udskernel.kernels import (
    KernelSpec,
    factorize,
    posterior_variances,
    solve_coefficients,
)
from udskernel.validation import check_delta, check_points, check_positive


def confidence_radius(nu: float, norm_bound: float, delta: float, logdet: float) -> float:
    """``sqrt(nu) S + sqrt(logdet + 2 log(1/delta))``; ``logdet`` is of ``nu I + K``."""
    return math.sqrt(nu) * norm_bound + math.sqrt(logdet + 2.0 * math.log(1.0 / delta))


class PessimisticKernelRidge(RegressorMixin, BaseEstimator):
    """Kernel ridge regression with a lower confidence bound.

    Parameters
    ----------
    kernel : KernelSpec, optional
        Defaults to a unit-lengthscale squared-exponential kernel on the
        input dimension.
    ridge : float, optional
        Ridge ``nu``; defaults to ``1 + 1/n_samples`` (2 when empty).
    norm_bound : float
        Assumed RKHS-norm bound ``S`` on the true reward.
    delta : float
        Confidence level, in ``(0, 1]``.
    beta_scale : float
        Multiplier on ``beta`` inside the penalty only; ``beta_`` itself is
        always the exact radius. 1 reproduces the confidence-set construction.
    """

    def __init__(self, kernel: Optional[KernelSpec] = None, ridge=None, norm_bound=1.0, delta=0.1, beta_scale=1.0):
        self.kernel = kernel
        self.ridge = ridge
        self.norm_bound = norm_bound
        self.delta = delta
        self.beta_scale = beta_scale

    def fit(self, X, y):
        X = check_points(X)
        y = np.asarray(y, dtype=float).reshape(-1)
        if len(y) != len(X):
            raise InputError(f"X has {len(X)} rows but y has {len(y)} entries")
        if not np.all(np.isfinite(y)):
            raise InputError("y contains non-finite values")
        n = len(X)
        kernel = self.kernel if self.kernel is not None else KernelSpec(ambient_dim=X.shape[1])
        if kernel.ambient_dim != X.shape[1]:
            raise InputError(f"kernel expects {kernel.ambient_dim} features, X has {X.shape[1]}")
        ridge = self.ridge if self.ridge is not None else 1.0 + 1.0 / max(n, 1)
        check_positive(ridge, "ridge")
        if self.norm_bound < 0:
            raise InputError(f"norm_bound must be >= 0, got {self.norm_bound}")
        check_delta(self.delta, allow_one=True)
        if not self.beta_scale >= 0:
            raise InputError(f"beta_scale must be >= 0, got {self.beta_scale}")

        self.kernel_ = kernel
        self.ridge_ = float(ridge)
        self.factor_ = factorize(kernel, X, self.ridge_)
        self.dual_coef_ = solve_coefficients(self.factor_, y)
        self.beta_ = confidence_radius(self.ridge_, self.norm_bound, self.delta, self.factor_.logdet())
        self.n_features_in_ = X.shape[1]
        return self

    @property
    def support_(self) -> np.ndarray:
        return self.factor_.support

    def predict(self, X) -> np.ndarray:
        check_is_fitted(self, "dual_coef_")
        X = self.kernel_.check_points(X)
        if self.factor_.size == 0:
            return np.zeros(len(X))
        return self.factor_.kernel_vectors(X) @ self.dual_coef_

    def posterior_variance(self, X) -> np.ndarray:
        check_is_fitted(self, "dual_coef_")
        return posterior_variances(self.factor_, X)

    def penalty(self, X) -> np.ndarray:
        """Width ``beta * nu^{-1/2} * sqrt(v)`` of the confidence band."""
        return self.beta_scale * self.beta_ / math.sqrt(self.ridge_) * np.sqrt(self.posterior_variance(X))

    def predict_pessimistic(self, X) -> np.ndarray:
        return np.maximum(self.predict(X) - self.penalty(X), 0.0)


class RewardRelabeler(TransformerMixin, BaseEstimator):
    """Learn per-step rewards from labeled episodes; relabel unlabeled ones.

    ``env`` only supplies the ``embed(states, actions)`` map into kernel
    inputs. The per-step regressors are independent and share ``ridge``
    (default ``1 + 1/N1``).
    """

    def __init__(self, env, kernel: Optional[KernelSpec] = None, ridge=None, norm_bound=1.0, delta=0.1, beta_scale=1.0):
        self.env = env
        self.kernel = kernel
        self.ridge = ridge
        self.norm_bound = norm_bound
        self.delta = delta
        self.beta_scale = beta_scale

    def fit(self, X: Dataset, y=None):
        if not isinstance(X, Dataset) or not X.labeled:
            raise InputError("reward model must be fit on a labeled dataset")
        ridge = self.ridge if self.ridge is not None else 1.0 + 1.0 / X.n_episodes
        check_positive(ridge, "nu")
        kernel = self.kernel or KernelSpec(ambient_dim=self.env.embed_dim)
        self.models_ = []
        for h in range(1, X.horizon + 1):
            s, a, r, _ = X.step(h)
            model = PessimisticKernelRidge(kernel, ridge, self.norm_bound, self.delta, self.beta_scale)
            self.models_.append(model.fit(self.env.embed(s, a), r))
        self.ridge_ = float(ridge)
        self.horizon_ = X.horizon
        return self

    def _model(self, h: int) -> PessimisticKernelRidge:
        check_is_fitted(self, "models_")
        if not 1 <= h <= self.horizon_:
            raise InputError(f"h must lie in [1, {self.horizon_}], got {h}")
        return self.models_[h - 1]

    def beta(self, h: int) -> float:
        return self._model(h).beta_

    def predict_mean(self, h: int, Z) -> np.ndarray:
        return self._model(h).predict(Z)

    def pessimistic(self, h: int, Z) -> np.ndarray:
        return self._model(h).predict_pessimistic(Z)

    def transform(self, X: Dataset) -> Dataset:
        check_is_fitted(self, "models_")
        if not isinstance(X, Dataset) or X.labeled:
            raise InputError("relabel expects an unlabeled dataset")
        if X.horizon != self.horizon_:
            raise InputError(f"dataset horizon {X.horizon} differs from model horizon {self.horizon_}")
        R = np.empty(X.actions.shape)
        for h in range(1, X.horizon + 1):
            s, a, _, _ = X.step(h)
            R[:, h - 1] = self.pessimistic(h, self.env.embed(s, a))
        return X.with_rewards(R)


def empty_reward_model(env, horizon: int, kernel=None, ridge=2.0, norm_bound=1.0, delta=0.1) -> RewardRelabeler:
    """A relabeler fit on no labeled data at all (the zero-label degenerate case)."""
    model = RewardRelabeler(env, kernel, ridge, norm_bound, delta)
    kernel = kernel or KernelSpec(ambient_dim=env.embed_dim)
    empty = np.zeros((0, kernel.ambient_dim))
    model.models_ = [
        PessimisticKernelRidge(kernel, ridge, norm_bound, delta).fit(empty, np.zeros(0)) for _ in range(horizon)
    ]
    model.ridge_ = float(ridge)
    model.horizon_ = horizon
    return model


# -- functional surface ----------------------------------------------------


def fit_reward(d1: Dataset, env, kernel=None, nu=None, norm_bound=1.0, delta=0.1, beta_scale=1.0) -> RewardRelabeler:
    if nu is not None:
        check_positive(nu, "nu")
    check_delta(delta)
    return RewardRelabeler(env, kernel, nu, norm_bound, delta, beta_scale).fit(d1)


def beta_radius(model: RewardRelabeler, h: int) -> float:
    return model.beta(h)


def predict_mean(model: RewardRelabeler, h: int, z) -> np.ndarray:
    return model.predict_mean(h, z)


def pessimistic_reward(model: RewardRelabeler, h: int, z) -> np.ndarray:
    return model.pessimistic(h, z)


def relabel(d2: Dataset, model: RewardRelabeler) -> Dataset:
    return model.transform(d2)


# -- persistence -----------------------------------------------------------


def save_reward_model(model: RewardRelabeler, path) -> None:
    """Write an ``.npz`` archive: per-step support and coefficients plus JSON metadata."""
    check_is_fitted(model, "models_")
    meta = {
        "kind": "reward-model",
        "horizon": model.horizon_,
        "nu": model.ridge_,
        "norm_bound": model.norm_bound,
        "delta": model.delta,
        "beta_scale": model.beta_scale,
        "kernel": model.models_[0].kernel_.to_dict(),
        "env": model.env.to_dict(),
        "beta": [m.beta_ for m in model.models_],
    }
    arrays = {"meta": np.array(json.dumps(meta))}
    for h, m in enumerate(model.models_, start=1):
        arrays[f"support_{h}"] = m.support_
        arrays[f"alpha_{h}"] = m.dual_coef_
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)


def load_reward_model(path) -> RewardRelabeler:
    from udskernel.envs import make_env

    with np.load(path, allow_pickle=False) as data:
        meta = json.loads(str(data["meta"]))
        kernel = KernelSpec.from_dict(meta["kernel"])
        args = (meta["nu"], meta["norm_bound"], meta["delta"], meta["beta_scale"])
        model = RewardRelabeler(make_env(meta["env"]), kernel, *args)
        model.models_ = []
        for h in range(1, meta["horizon"] + 1):
            reg = PessimisticKernelRidge(kernel, *args)
            reg.kernel_ = kernel
            reg.ridge_ = float(meta["nu"])
            reg.factor_ = factorize(kernel, data[f"support_{h}"], reg.ridge_)
            reg.dual_coef_ = data[f"alpha_{h}"].copy()
            reg.beta_ = float(meta["beta"][h - 1])
            reg.n_features_in_ = kernel.ambient_dim
            model.models_.append(reg)
    model.ridge_ = float(meta["nu"])
    model.horizon_ = meta["horizon"]
    return model
