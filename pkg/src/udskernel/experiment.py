"""Policy evaluation, the ring-Gaussian DP oracle, sweeps and the asymptote fit."""

from __future__ import annotations

import csv
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from contextlib import nullcontext
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from udskernel.dataset import concat
from udskernel.envs import RingGaussianEnv, generate_dataset
from udskernel.exceptions import InputError, UnsupportedError
from udskernel.kernels import KernelSpec, factorize, posterior_variances
from udskernel.pevi import KernelPEVI, split_folds
from udskernel.reward import RewardRelabeler

log = logging.getLogger(__name__)

CSV_HEADER = ("n1", "n2", "seed", "v_mean", "v_se", "m_rollouts")


# -- evaluation ------------------------------------------------------------


def rollout_returns(env, policy: Callable, M: int, rng: np.random.Generator, initial_states=None) -> np.ndarray:
    """Undiscounted returns of ``M`` episodes; ``policy(h, states) -> actions``."""
    if M < 1:
        raise InputError(f"M must be >= 1, got {M}")
    if initial_states is None:
        s = env.sample_initial(rng, M)
    else:
        s = np.broadcast_to(np.asarray(initial_states, dtype=float).reshape(-1, env.state_dim), (M, env.state_dim)).copy()
    total = np.zeros(M)
    for h in range(1, env.horizon + 1):
        a = np.asarray(policy(h, s)).reshape(-1)
        s, r = env.step(h, s, a, rng)
        total += r
    return total


def evaluate_policy(env, policy: Callable, M: int, rng: np.random.Generator, initial_states=None):
    """Monte-Carlo value ``(mean, standard error)`` over ``M`` rollouts."""
    returns = rollout_returns(env, policy, M, rng, initial_states)
    if M == 1:
        log.warning("standard error from a single rollout is reported as 0")
        return float(returns[0]), 0.0
    return float(returns.mean()), float(returns.std(ddof=1) / math.sqrt(M))


def uniform_policy(env, rng: np.random.Generator) -> Callable:
    return lambda h, s: rng.integers(0, env.action_count, size=len(s))


# -- DP oracle ---------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class DPOracle:
    """Optimal values of a ring-Gaussian MDP on a uniform cell grid.

    ``values[h - 1]`` is ``V*_h`` at the cell centres (row ``H`` is zero);
    ``actions[h - 1]`` the smallest-index greedy action.
    """

    env: RingGaussianEnv
    grid: np.ndarray
    values: np.ndarray
    actions: np.ndarray

    def value(self, h: int, s) -> np.ndarray:
        s = np.asarray(s, dtype=float).reshape(-1)
        C = self.env.C
        xp = np.concatenate([[self.grid[-1] - C], self.grid, [self.grid[0] + C]])
        fp = self.values[h - 1]
        fp = np.concatenate([[fp[-1]], fp, [fp[0]]])
        return np.interp(np.mod(s, C), xp, fp)

    def act(self, h: int, s) -> np.ndarray:
        s = np.asarray(s, dtype=float).reshape(-1)
        n = len(self.grid)
        cell = np.minimum((np.mod(s, self.env.C) / self.env.C * n).astype(int), n - 1)
        return self.actions[h - 1, cell]

    def mean_initial_value(self) -> float:
        """``E[V*_1(s)]`` for ``s ~ Uniform[0, C)``, by the midpoint rule."""
        return float(self.values[0].mean())


def dp_oracle(env, grid_resolution: int = 512, subcells: int = 4) -> DPOracle:
    """Finite-horizon DP on ``grid_resolution`` cells of ``[0, C)``.

    Cell-to-cell transition mass integrates the wrapped Gaussian density with
    the trapezoid rule on ``subcells`` panels per cell, rows renormalised.
    """
    if not isinstance(env, RingGaussianEnv):
        raise UnsupportedError("dp oracle is only available for the ring-gaussian environment")
    n, C, H = int(grid_resolution), env.C, env.horizon
    if n < 2:
        raise InputError("grid_resolution must be >= 2")
    width = C / n
    grid = (np.arange(n) + 0.5) * width
    nodes = np.linspace(0.0, width, subcells + 1)
    weights = np.full(subcells + 1, width / subcells)
    weights[[0, -1]] /= 2
    pts = (np.arange(n) * width)[:, None] + nodes[None, :]
    var = env.transition_variance
    reward = env.reward_of_state(grid)

    transitions = []
    for a in range(env.action_count):
        mu = np.mod(grid + a, C)
        d = pts[None, :, :] - mu[:, None, None]
        dens = sum(np.exp(-((d + k * C) ** 2) / (2 * var)) for k in range(-3, 4))
        mass = dens @ weights
        transitions.append(mass / mass.sum(axis=1, keepdims=True))

    values = np.zeros((H + 1, n))
    actions = np.zeros((H, n), dtype=np.int64)
    for h in range(H, 0, -1):
        Q = np.column_stack([reward + P @ values[h] for P in transitions])
        actions[h - 1] = np.argmax(Q, axis=1)
        values[h - 1] = Q.max(axis=1)
    return DPOracle(env, grid, values, actions)


def suboptimality(env, policy: Callable, oracle: DPOracle, M: int, rng: np.random.Generator) -> float:
    """``E_rho[V*_1] - V^pi_1`` with the policy value estimated by rollouts."""
    mean, se = evaluate_policy(env, policy, M, rng)
    gap = oracle.mean_initial_value() - mean
    if gap < -3 * se:
        log.warning("suboptimality %.4f is below -3 standard errors (se=%.4f)", gap, se)
    return gap


# -- one pipeline run and sweeps ------------------------------------------------


@dataclass(frozen=True)
class PipelineSettings:
    """Everything a single (N1, N2, seed) cell needs."""

    env_cfg: dict
    kernel: KernelSpec
    noise_sigma: float = 0.0
    nu: Optional[float] = None
    lam: Optional[float] = None
    norm_bound: float = 1.0
    delta: float = 0.1
    beta_scale: float = 1.0
    B: Optional[float] = None
    c_B: float = 1.0
    R_Q: float = 2.0
    fold_scheme: str = "shuffled"
    M: int = 1000


def cell_seed_sequence(master_seed: int, n1: int, n2: int, seed_index: int) -> np.random.SeedSequence:
    return np.random.SeedSequence([int(master_seed), int(n1), int(n2), int(seed_index)])


def train_policy(env, settings: PipelineSettings, d1, d2, fold_seed: int):
    """Fit rewards on ``d1``, relabel ``d2``, merge and run PEVI."""
    relabeler = RewardRelabeler(
        env, settings.kernel, settings.nu, settings.norm_bound, settings.delta, settings.beta_scale
    ).fit(d1)
    merged = concat(d1, relabeler.transform(d2))
    plan = split_folds(merged.n_episodes, env.horizon, settings.fold_scheme, fold_seed)
    pevi = KernelPEVI(
        env, settings.kernel, settings.lam, settings.B, settings.c_B, settings.R_Q, settings.delta,
        settings.fold_scheme, fold_seed,
    ).fit(merged, fold_plan=plan)
    return relabeler, pevi


def run_cell(settings: PipelineSettings, master_seed: int, n1: int, n2: int, seed_index: int) -> "SweepRow":
    from udskernel.envs import make_env

    env = make_env(settings.env_cfg)
    ss = cell_seed_sequence(master_seed, n1, n2, seed_index)
    s_d1, s_d2, s_fold, s_eval = ss.spawn(4)
    d1 = generate_dataset(env, n1, True, np.random.default_rng(s_d1), noise_sigma=settings.noise_sigma)
    d2 = generate_dataset(env, n2, False, np.random.default_rng(s_d2))
    fold_seed = int(s_fold.generate_state(1)[0])
    _, pevi = train_policy(env, settings, d1, d2, fold_seed)
    mean, se = evaluate_policy(env, pevi.act, settings.M, np.random.default_rng(s_eval))
    return SweepRow(n1, n2, seed_index, mean, se, settings.M)


@dataclass(frozen=True, order=True)
class SweepRow:
    n1: int
    n2: int
    seed: int
    v_mean: float
    v_se: float
    m_rollouts: int


@dataclass
class SweepTable:
    rows: list
    fingerprint: str = ""
    errors: list = field(default_factory=list)

    def __post_init__(self):
        self.rows = sorted(self.rows)

    def cell_means(self) -> dict:
        """Mean ``v_mean`` over seeds for every finite ``(n1, n2)`` cell."""
        cells: dict = {}
        for r in self.rows:
            if math.isfinite(r.v_mean):
                cells.setdefault((r.n1, r.n2), []).append(r.v_mean)
        return {k: float(np.mean(v)) for k, v in sorted(cells.items())}

    def cell_se(self) -> dict:
        """Across-seed standard error of the cell mean."""
        cells: dict = {}
        for r in self.rows:
            if math.isfinite(r.v_mean):
                cells.setdefault((r.n1, r.n2), []).append(r.v_mean)
        return {
            k: float(np.std(v, ddof=1) / math.sqrt(len(v))) if len(v) > 1 else 0.0 for k, v in sorted(cells.items())
        }

    def write_csv(self, path) -> None:
        path = Path(path)
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(CSV_HEADER)
            for r in self.rows:
                w.writerow([r.n1, r.n2, r.seed, repr(float(r.v_mean)), repr(float(r.v_se)), r.m_rollouts])
        Path(str(path) + ".fingerprint").write_text(self.fingerprint + "\n", encoding="utf-8")

    @classmethod
    def read_csv(cls, path) -> "SweepTable":
        path = Path(path)
        with open(path, newline="", encoding="utf-8") as fh:
            reader = csv.reader(fh)
            header = next(reader, None)
            if tuple(header or ()) != CSV_HEADER:
                raise InputError(f"{path}: expected header {','.join(CSV_HEADER)}")
            rows = []
            for lineno, rec in enumerate(reader, start=2):
                try:
                    rows.append(SweepRow(int(rec[0]), int(rec[1]), int(rec[2]), float(rec[3]), float(rec[4]), int(rec[5])))
                except (ValueError, IndexError):
                    raise InputError(f"{path}: malformed row at line {lineno}") from None
        fp_path = Path(str(path) + ".fingerprint")
        fingerprint = fp_path.read_text(encoding="utf-8").strip() if fp_path.exists() else ""
        return cls(rows, fingerprint)


def _run_cell_safe(args):
    settings, master_seed, n1, n2, idx = args
    try:
        return run_cell(settings, master_seed, n1, n2, idx), None
    except (InputError, ArithmeticError) as exc:
        return SweepRow(n1, n2, idx, math.nan, math.nan, settings.M), f"n1={n1} n2={n2} seed={idx}: {exc}"


def run_sweep(
    settings: PipelineSettings,
    n1_grid: Sequence[int],
    n2_grid: Sequence[int],
    n_seeds: int,
    master_seed: int = 0,
    workers: int = 1,
    fingerprint: str = "",
) -> SweepTable:
    """One row per ``(n1, n2, seed)``; failing cells are kept as NaN rows."""
    jobs = [(settings, master_seed, n1, n2, i) for n1 in n1_grid for n2 in n2_grid for i in range(n_seeds)]
    results = []
    with ProcessPoolExecutor(max_workers=workers) if workers > 1 else nullcontext() as pool:
        for k, res in enumerate(pool.map(_run_cell_safe, jobs) if pool else map(_run_cell_safe, jobs), 1):
            row = res[0]
            log.info("cell %d/%d n1=%d n2=%d seed=%d v_mean=%.4f", k, len(jobs), row.n1, row.n2, row.seed, row.v_mean)
            results.append(res)
    errors = [e for _, e in results if e]
    for e in errors:
        log.error("sweep cell failed: %s", e)
    return SweepTable([r for r, _ in results], fingerprint, errors)


# -- asymptote fit -----------------------------------------------------------


class DegenerateDesignError(InputError):
    """The regression design matrix is rank deficient."""


@dataclass(frozen=True)
class AsymptoteFit:
    """``V = c0 - c1 / sqrt(N1) - c2 / sqrt(N2)``."""

    c0: float
    c1: float
    c2: float
    r2: float

    def predict(self, n1, n2):
        return self.c0 - self.c1 / np.sqrt(n1) - self.c2 / np.sqrt(n2)

    def to_text(self) -> str:
        return "".join(f"{k}={v!r}\n" for k, v in (("c0", self.c0), ("c1", self.c1), ("c2", self.c2), ("r2", self.r2)))

    @classmethod
    def from_text(cls, text: str) -> "AsymptoteFit":
        kv = dict(line.split("=", 1) for line in text.splitlines() if "=" in line)
        return cls(float(kv["c0"]), float(kv["c1"]), float(kv["c2"]), float(kv["r2"]))


def fit_asymptote_points(n1, n2, v) -> AsymptoteFit:
    n1, n2, v = (np.asarray(x, dtype=float) for x in (n1, n2, v))
    if len({(a, b) for a, b in zip(n1, n2)}) < 3:
        raise DegenerateDesignError("need at least 3 distinct (n1, n2) cells")
    X = np.column_stack([np.ones_like(n1), -1 / np.sqrt(n1), -1 / np.sqrt(n2)])
    if np.linalg.matrix_rank(X) < 3:
        raise DegenerateDesignError("design [1, n1^-1/2, n2^-1/2] is rank deficient")
    coef, *_ = np.linalg.lstsq(X, v, rcond=None)
    resid = v - X @ coef
    ss_tot = float(np.sum((v - v.mean()) ** 2))
    ss_res = float(np.sum(resid**2))
    r2 = 1.0 - ss_res / ss_tot if ss_tot > 0 else 1.0
    return AsymptoteFit(float(coef[0]), float(coef[1]), float(coef[2]), r2)


def fit_asymptote(table: SweepTable) -> AsymptoteFit:
    """Least squares of the per-cell mean value on ``[1, N1^-1/2, N2^-1/2]``."""
    means = table.cell_means()
    keys = list(means)
    return fit_asymptote_points([k[0] for k in keys], [k[1] for k in keys], [means[k] for k in keys])


# -- information diagnostics ----------------------------------------------------


def zeta_batch(kernel: KernelSpec, support, Z, lam: float) -> np.ndarray:
    """Log-det increment for many query points at once.

    Uses ``det(I + K_{Z+z}/lam) = det(I + K_Z/lam) (1 + v(z)/lam)`` with
    ``v`` the posterior variance under ridge ``lam``.
    """
    v = posterior_variances(factorize(kernel, support, lam), Z)
    return 2.0 * np.log1p(v / lam)


def zeta_expected(env, reference_policy: Callable, supports: Sequence, kernel: KernelSpec, lam: float, M: int, rng) -> np.ndarray:
    """Per-step mean of the log-det increment along reference-policy rollouts.

    ``supports[h - 1]`` holds the embedded step-``h`` dataset points.
    """
    if M < 1:
        raise InputError(f"M must be >= 1, got {M}")
    if len(supports) != env.horizon:
        raise InputError(f"need {env.horizon} supports, got {len(supports)}")
    out = np.empty(env.horizon)
    s = env.sample_initial(rng, M)
    for h in range(1, env.horizon + 1):
        a = np.asarray(reference_policy(h, s)).reshape(-1)
        out[h - 1] = zeta_batch(kernel, supports[h - 1], env.embed(s, a), lam).mean()
        s, _ = env.step(h, s, a, rng)
    return out
