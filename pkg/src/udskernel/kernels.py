"""Kernel evaluation and Gram-matrix algebra.

Everything downstream (reward regression, the PEVI backups, information
diagnostics) goes through the handful of routines here:

- ``KernelSpec`` describes a kernel family and evaluates it on point sets.
- ``factorize`` builds a lower Cholesky factor of ``K + rho * I`` with a
  small diagonal jitter ladder.
- ``solve_coefficients``, ``posterior_variance`` and the log-determinant
  helpers work off that factor.

Points are always 2-D arrays of shape ``(n_points, ambient_dim)``.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from functools import cached_property
from typing import Optional

import numpy as np
from scipy import linalg
from scipy.spatial.distance import cdist

from udskernel.exceptions import InputError, NumericalError

FAMILIES = ("squared-exponential", "matern", "explicit-features")
DECAY_CLASSES = ("finite-spectrum", "exponential", "polynomial")
MATERN_SMOOTHNESS = (0.5, 1.5, 2.5)

_JITTER_LADDER = (0.0, 1e-10, 1e-9, 1e-8, 1e-7, 1e-6)


@dataclass(frozen=True)
class KernelSpec:
    """Kernel family plus hyperparameters.

    Parameters
    ----------
    family : {"squared-exponential", "matern", "explicit-features"}
    ambient_dim : int
        Dimension of the input points.
    lengthscale : float
        Used by the stationary families.
    smoothness : float
        Matérn smoothness, one of 0.5, 1.5, 2.5.
    degree : int
        Monomial degree (1, 2 or 3) for explicit features. Inputs are
        expected in ``[-1, 1]``; the feature vector is divided by the square
        root of its length so that ``k(z, z) <= 1`` there.
    decay_class, decay_param : metadata describing the eigenvalue decay
        regime the kernel is assumed to fall into. Never used numerically.
    """

    family: str = "squared-exponential"
    ambient_dim: int = 1
    lengthscale: float = 1.0
    smoothness: float = 2.5
    degree: int = 1
    decay_class: Optional[str] = None
    decay_param: float = 1.0

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise InputError(f"unknown kernel family {self.family!r}")
        if int(self.ambient_dim) != self.ambient_dim or self.ambient_dim < 1:
            raise InputError(f"ambient_dim must be a positive integer, got {self.ambient_dim}")
        if self.family != "explicit-features" and not self.lengthscale > 0:
            raise InputError(f"lengthscale must be > 0, got {self.lengthscale}")
        if self.family == "matern" and self.smoothness not in MATERN_SMOOTHNESS:
            raise InputError(f"matern smoothness must be one of {MATERN_SMOOTHNESS}")
        if self.family == "explicit-features" and self.degree not in (1, 2, 3):
            raise InputError(f"explicit-features degree must be 1, 2 or 3, got {self.degree}")
        if self.decay_class is not None and self.decay_class not in DECAY_CLASSES:
            raise InputError(f"unknown decay class {self.decay_class!r}")

    @property
    def resolved_decay_class(self) -> str:
        if self.decay_class is not None:
            return self.decay_class
        return {
            "squared-exponential": "exponential",
            "matern": "polynomial",
            "explicit-features": "finite-spectrum",
        }[self.family]

    @property
    def feature_dim(self) -> Optional[int]:
        """Number of monomials for explicit features, else None."""
        if self.family != "explicit-features":
            return None
        return math.comb(self.ambient_dim + self.degree, self.degree)

    @cached_property
    def _monomials(self):
        dims = range(self.ambient_dim)
        terms = [()]
        for deg in range(1, self.degree + 1):
            terms.extend(itertools.combinations_with_replacement(dims, deg))
        return terms

    def to_dict(self) -> dict:
        return {
            "family": self.family,
            "ambient_dim": int(self.ambient_dim),
            "lengthscale": float(self.lengthscale),
            "smoothness": float(self.smoothness),
            "degree": int(self.degree),
            "decay_class": self.decay_class,
            "decay_param": float(self.decay_param),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "KernelSpec":
        return cls(**d)

    # -- evaluation -------------------------------------------------------

    def features(self, Z) -> np.ndarray:
        """Normalised monomial features, shape ``(n, feature_dim)``."""
        if self.family != "explicit-features":
            raise InputError("features() is only defined for explicit-features kernels")
        Z = self.check_points(Z)
        cols = [np.prod(Z[:, list(t)], axis=1) if t else np.ones(len(Z)) for t in self._monomials]
        return np.column_stack(cols) / math.sqrt(len(cols))

    def cross(self, A, B) -> np.ndarray:
        """Kernel matrix ``[k(a_i, b_j)]`` of shape ``(len(A), len(B))``."""
        A = self.check_points(A)
        B = self.check_points(B)
        if self.family == "explicit-features":
            return self.features(A) @ self.features(B).T
        if self.family == "squared-exponential":
            sq = cdist(A, B, "sqeuclidean")
            return np.exp(-sq / (2.0 * self.lengthscale**2))
        r = cdist(A, B, "euclidean") / self.lengthscale
        if self.smoothness == 0.5:
            return np.exp(-r)
        if self.smoothness == 1.5:
            t = math.sqrt(3.0) * r
            return (1.0 + t) * np.exp(-t)
        t = math.sqrt(5.0) * r
        return (1.0 + t + t * t / 3.0) * np.exp(-t)

    def diag(self, Z) -> np.ndarray:
        """``k(z, z)`` for every row of ``Z``."""
        Z = self.check_points(Z)
        if self.family == "explicit-features":
            F = self.features(Z)
            return np.einsum("ij,ij->i", F, F)
        return np.ones(len(Z))

    def check_points(self, Z) -> np.ndarray:
        Z = np.asarray(Z, dtype=float)
        if Z.ndim == 1:
            Z = Z.reshape(-1, self.ambient_dim) if Z.size else Z.reshape(0, self.ambient_dim)
        if Z.ndim != 2 or Z.shape[1] != self.ambient_dim:
            raise InputError(
                f"expected points with {self.ambient_dim} coordinates, got array of shape {Z.shape}"
            )
        if not np.all(np.isfinite(Z)):
            raise InputError("points contain non-finite entries")
        return Z


def eval_kernel(spec: KernelSpec, z, z_prime) -> float:
    z = np.asarray(z, dtype=float).reshape(1, -1)
    z_prime = np.asarray(z_prime, dtype=float).reshape(1, -1)
    return float(spec.cross(z, z_prime)[0, 0])


def gram_matrix(spec: KernelSpec, Z) -> np.ndarray:
    Z = spec.check_points(Z)
    if len(Z) == 0:
        raise InputError("gram_matrix needs at least one point")
    K = spec.cross(Z, Z)
    # exact symmetry regardless of floating point in cdist
    return np.triu(K) + np.triu(K, 1).T


@dataclass(frozen=True, eq=False)
class GramFactor:
    """Lower Cholesky factor of ``K + (rho + jitter) I`` over ``support``."""

    spec: KernelSpec
    support: np.ndarray
    rho: float
    chol: np.ndarray
    jitter: float = 0.0
    gram: np.ndarray = field(default=None, repr=False)

    @property
    def size(self) -> int:
        return len(self.support)

    def kernel_vectors(self, Z) -> np.ndarray:
        """``k_support(z)`` for each query, shape ``(len(Z), size)``."""
        return self.spec.cross(Z, self.support)

    def logdet(self) -> float:
        """``log det(K + rho I)``; 0 for an empty support."""
        if self.size == 0:
            return 0.0
        return 2.0 * float(np.sum(np.log(np.diag(self.chol))))


def factorize(spec: KernelSpec, Z, rho: float) -> GramFactor:
    """Cholesky-factor ``K_Z + rho I``.

    A diagonal jitter ladder (1e-10 up to 1e-6) absorbs round-off before a
    :class:`NumericalError` is raised. An empty ``Z`` gives an empty factor.
    """
    if not rho > 0:
        raise InputError(f"ridge must be > 0, got {rho}")
    Z = spec.check_points(Z)
    n = len(Z)
    if n == 0:
        return GramFactor(spec, Z, float(rho), np.zeros((0, 0)), 0.0, np.zeros((0, 0)))
    K = gram_matrix(spec, Z)
    A = K + rho * np.eye(n)
    for jitter in _JITTER_LADDER:
        try:
            L = linalg.cholesky(A + jitter * np.eye(n), lower=True)
        except linalg.LinAlgError:
            continue
        return GramFactor(spec, Z, float(rho), L, jitter, K)
    cond = np.linalg.cond(A)
    raise NumericalError(
        f"Cholesky failed for ridge {rho} even with jitter 1e-6 (condition estimate {cond:.3e})"
    )


def solve_coefficients(factor: GramFactor, y) -> np.ndarray:
    """Return ``alpha`` with ``(K + rho I) alpha = y``."""
    y = np.asarray(y, dtype=float)
    if y.shape[0] != factor.size:
        raise InputError(f"response length {y.shape[0]} does not match support size {factor.size}")
    if factor.size == 0:
        return np.zeros_like(y)
    return linalg.cho_solve((factor.chol, True), y)


def _whiten(factor: GramFactor, Kq: np.ndarray) -> np.ndarray:
    # L^{-1} k for every query column
    return linalg.solve_triangular(factor.chol, Kq.T, lower=True)


def posterior_variances(factor: GramFactor, Z) -> np.ndarray:
    """Vectorised ``k(z, z) - k^T (K + rho I)^{-1} k``, clamped at 0."""
    Z = factor.spec.check_points(Z)
    prior = factor.spec.diag(Z)
    if factor.size == 0:
        return prior
    W = _whiten(factor, factor.kernel_vectors(Z))
    v = prior - np.einsum("ij,ij->j", W, W)
    return np.maximum(v, 0.0)


def posterior_variance(spec: KernelSpec, factor: GramFactor, z) -> float:
    if factor.spec != spec:
        raise InputError("factor was built for a different kernel")
    z = np.asarray(z, dtype=float).reshape(1, -1)
    return float(posterior_variances(factor, z)[0])


def logdet_identity_plus(spec: KernelSpec, Z, lam: float) -> float:
    """``log det(I + K_Z / lam)`` from the Cholesky diagonal."""
    if not lam > 0:
        raise InputError(f"lambda must be > 0, got {lam}")
    Z = spec.check_points(Z)
    n = len(Z)
    if n == 0:
        return 0.0
    A = np.eye(n) + gram_matrix(spec, Z) / lam
    L = linalg.cholesky(A, lower=True)
    return 2.0 * float(np.sum(np.log(np.diag(L))))


def information_gain(spec: KernelSpec, Z, lam: float) -> float:
    """Realised information gain ``0.5 log det(I + K_Z / lam)`` of ``Z``."""
    return 0.5 * logdet_identity_plus(spec, Z, lam)


def zeta_information_amount(spec: KernelSpec, Z, z, lam: float) -> float:
    """Log-det increment ``2 [logdet(I + K_{Z+z}/lam) - logdet(I + K_Z/lam)]``."""
    Z = spec.check_points(Z)
    z = spec.check_points(np.asarray(z, dtype=float).reshape(1, -1))
    value = 2.0 * (logdet_identity_plus(spec, np.vstack([Z, z]), lam) - logdet_identity_plus(spec, Z, lam))
    return max(value, 0.0)
