import math

import numpy as np
import pytest
from scipy.stats import norm

from oracles import REF_SWEEP_MEANS, REF_SWEEP_N2, REF_SURFACE_10_10
from udskernel.dataset import concat
from udskernel.envs import CartPoleEnv, RingGaussianEnv, TabularEnv, generate_dataset
from udskernel.exceptions import InputError, UnsupportedError
from udskernel.experiment import (
    AsymptoteFit,
    DegenerateDesignError,
    PipelineSettings,
    SweepRow,
    SweepTable,
    dp_oracle,
    evaluate_policy,
    fit_asymptote,
    fit_asymptote_points,
    run_sweep,
    suboptimality,
    train_policy,
    uniform_policy,
    zeta_batch,
    zeta_expected,
)
from udskernel.kernels import KernelSpec, zeta_information_amount
from udskernel.pevi import KernelPEVI, split_folds
from udskernel.reward import empty_reward_model

RING = RingGaussianEnv()
RING_KERNEL = KernelSpec(ambient_dim=2, lengthscale=0.2)
RING_SETTINGS = PipelineSettings(
    {"variant": "ring-gaussian", "alpha": 3.0, "C": 8, "H": 8}, RING_KERNEL, c_B=1e-4, beta_scale=0.02, M=200
)


@pytest.fixture(scope="module")
def oracle():
    return dp_oracle(RING, 512)


def stay_at_peak(h, s):
    return np.mod(np.rint(4.0 - s[:, 0]), 8).astype(int)


def reference_policy_value(env, policy, n=2048):
    """``E_rho V^pi_1`` by a grid recursion with a wrapped-normal kernel built from scipy."""
    C, sd = env.C, math.sqrt(env.transition_variance)
    grid = (np.arange(n) + 0.5) * C / n
    a = policy(1, grid[:, None])
    mu = np.mod(grid + a, C)
    d = grid[None, :] - mu[:, None]
    P = sum(norm.pdf(d + k * C, scale=sd) for k in range(-3, 4)) * (C / n)
    P /= P.sum(axis=1, keepdims=True)
    V = np.zeros(n)
    r = env.reward_of_state(grid)
    for _ in range(env.horizon):
        V = r + P @ V
    return V.mean()


class TestEvaluate:
    def test_zero_reward(self):
        env = TabularEnv(np.ones((3, 1, 2, 1)), np.zeros((3, 1, 2)), np.ones(1))
        mean, se = evaluate_policy(env, lambda h, s: np.zeros(len(s), dtype=int), 50, np.random.default_rng(0))
        assert mean == 0.0 and se == 0.0

    def test_constant_one_step(self):
        env = TabularEnv(np.ones((1, 1, 1, 1)), np.full((1, 1, 1), 0.5), np.ones(1))
        for M in (1, 7, 100):
            mean, _ = evaluate_policy(env, lambda h, s: np.zeros(len(s), dtype=int), M, np.random.default_rng(M))
            assert mean == 0.5

    def test_single_rollout_warns(self, caplog):
        mean, se = evaluate_policy(RING, stay_at_peak, 1, np.random.default_rng(0))
        assert se == 0.0 and "single rollout" in caplog.text

    def test_stay_at_peak_matches_grid_recursion(self):
        mean, se = evaluate_policy(RING, stay_at_peak, 20_000, np.random.default_rng(1))
        assert abs(mean - reference_policy_value(RING, stay_at_peak)) <= 3 * se

    def test_deterministic(self):
        a = evaluate_policy(RING, stay_at_peak, 100, np.random.default_rng(5))
        b = evaluate_policy(RING, stay_at_peak, 100, np.random.default_rng(5))
        assert a == b

    def test_bad_M(self):
        with pytest.raises(InputError):
            evaluate_policy(RING, stay_at_peak, 0, np.random.default_rng(0))


class TestDPOracle:
    def test_one_step(self):
        env = RingGaussianEnv(H=1)
        o = dp_oracle(env, 256)
        np.testing.assert_array_equal(o.values[0], env.reward_of_state(o.grid))

    def test_grid_convergence(self, oracle):
        fine = dp_oracle(RING, 1024)
        probes = np.linspace(0.3, 7.7, 10)
        assert np.max(np.abs(oracle.value(1, probes) - fine.value(1, probes))) <= 1e-3

    def test_peak_bound(self, oracle):
        assert oracle.values[0].max() <= 8 * math.sqrt(3 / math.pi)

    def test_unsupported(self):
        with pytest.raises(UnsupportedError):
            dp_oracle(CartPoleEnv())

    def test_greedy_self_consistency(self, oracle):
        rng = np.random.default_rng(2)
        mean, se = evaluate_policy(RING, oracle.act, 5000, rng)
        gap = suboptimality(RING, oracle.act, oracle, 5000, np.random.default_rng(3))
        assert abs(gap) <= 3 * se + 1e-3

    def test_uniform_is_suboptimal(self, oracle):
        rng = np.random.default_rng(4)
        assert suboptimality(RING, uniform_policy(RING, rng), oracle, 2000, rng) >= 0.1

    def test_trained_beats_zero_relabel(self, oracle):
        for seed in range(5):
            rng = np.random.default_rng(seed)
            d1 = generate_dataset(RING, 100, True, rng)
            d2 = generate_dataset(RING, 200, False, rng)
            _, trained = train_policy(RING, RING_SETTINGS, d1, d2, seed)
            zero = empty_reward_model(RING, 8, RING_KERNEL).transform(concat(d1.without_rewards(), d2))
            blind = KernelPEVI(RING, RING_KERNEL, c_B=1e-4, seed=seed).fit(zero, fold_plan=split_folds(300, 8, seed=seed))
            a = suboptimality(RING, trained.act, oracle, 500, np.random.default_rng(100 + seed))
            b = suboptimality(RING, blind.act, oracle, 500, np.random.default_rng(100 + seed))
            assert a < b


class TestSweep:
    def test_counting_and_determinism(self):
        a = run_sweep(RING_SETTINGS, [10, 20], [10, 20], 2, master_seed=7, fingerprint="fp")
        b = run_sweep(RING_SETTINGS, [10, 20], [10, 20], 2, master_seed=7, fingerprint="fp")
        assert len(a.rows) == 8 and a.rows == b.rows and not a.errors

    def test_workers_match_serial(self):
        a = run_sweep(RING_SETTINGS, [10], [10, 20], 2, master_seed=3)
        b = run_sweep(RING_SETTINGS, [10], [10, 20], 2, master_seed=3, workers=2)
        assert a.rows == b.rows

    def test_failing_cell_recorded(self):
        # N1 + N2 = 6 < H: the cell fails, the sweep continues
        t = run_sweep(RING_SETTINGS, [3, 10], [3], 1, master_seed=1)
        assert len(t.rows) == 2 and len(t.errors) == 1 and "insufficient" in t.errors[0]
        assert math.isnan(t.rows[0].v_mean) and math.isfinite(t.rows[1].v_mean)

    def test_csv_round_trip(self, tmp_path):
        t = run_sweep(RING_SETTINGS, [10], [10], 2, master_seed=1, fingerprint="abc123")
        t.write_csv(tmp_path / "s.csv")
        text = (tmp_path / "s.csv").read_text()
        assert text.splitlines()[0] == "n1,n2,seed,v_mean,v_se,m_rollouts"
        back = SweepTable.read_csv(tmp_path / "s.csv")
        assert back.rows == t.rows and back.fingerprint == "abc123"

    def test_rows_sorted(self):
        t = SweepTable([SweepRow(20, 10, 0, 1.0, 0.1, 5), SweepRow(10, 10, 1, 1.0, 0.1, 5), SweepRow(10, 10, 0, 1.0, 0.1, 5)])
        assert [(r.n1, r.seed) for r in t.rows] == [(10, 0), (10, 1), (20, 0)]

    def test_bad_csv(self, tmp_path):
        (tmp_path / "x.csv").write_text("a,b\n")
        with pytest.raises(InputError):
            SweepTable.read_csv(tmp_path / "x.csv")


class TestAsymptoteFit:
    def test_synthetic(self):
        n1 = [10, 10, 20, 50, 100, 100]
        n2 = [10, 500, 20, 50, 10, 500]
        v = [6 - 3 / math.sqrt(a) - 5 / math.sqrt(b) for a, b in zip(n1, n2)]
        f = fit_asymptote_points(n1, n2, v)
        assert (f.c0, f.c1, f.c2) == pytest.approx((6, 3, 5), abs=1e-9) and f.r2 == pytest.approx(1.0)

    def test_constant(self):
        f = fit_asymptote_points([10, 20, 10, 20], [10, 10, 20, 20], [2.5] * 4)
        assert f.c0 == pytest.approx(2.5) and abs(f.c1) < 1e-12 and abs(f.c2) < 1e-12

    def test_published_surface(self):
        n1 = [a for a in REF_SWEEP_MEANS for _ in REF_SWEEP_N2]
        v = [x for a in REF_SWEEP_MEANS for x in REF_SWEEP_MEANS[a]]
        f = fit_asymptote_points(n1, REF_SWEEP_N2 * 4, v)
        assert abs(f.predict(10, 10) - REF_SURFACE_10_10) <= 0.02

    def test_degenerate(self):
        with pytest.raises(DegenerateDesignError):
            fit_asymptote_points([10, 10, 10], [10, 20, 50], [1, 2, 3])
        with pytest.raises(DegenerateDesignError):
            fit_asymptote_points([10, 20], [10, 20], [1, 2])

    def test_text_round_trip(self):
        f = AsymptoteFit(1.5, 0.25, -3.0, 0.9)
        assert f.to_text().splitlines()[0] == "c0=1.5"
        assert AsymptoteFit.from_text(f.to_text()) == f

    def test_table_fit_uses_cell_means(self):
        rows = [SweepRow(a, b, s, 6 - 3 / math.sqrt(a) - 5 / math.sqrt(b) + (0.1 if s else -0.1), 0.0, 1)
                for a in (10, 50) for b in (10, 100) for s in (0, 1)]
        f = fit_asymptote(SweepTable(rows))
        assert (f.c0, f.c1, f.c2) == pytest.approx((6, 3, 5), abs=1e-9)


class TestZeta:
    def test_empty_closed_form(self):
        spec = KernelSpec(ambient_dim=2)
        out = zeta_expected(RING, stay_at_peak, [np.zeros((0, 2))] * 8, spec, 1.0, 20, np.random.default_rng(0))
        np.testing.assert_allclose(out, 2 * math.log(2), atol=1e-12)
        assert out[0] == pytest.approx(1.3862944, abs=1e-7)

    def test_reference_data_reduces_zeta(self, oracle):
        rng = np.random.default_rng(1)
        behavior = lambda h, s, rng: oracle.act(h, s)
        d = generate_dataset(RING, 200, False, rng, behavior=behavior)
        supports = [RING.embed(*d.step(h)[:2]) for h in range(1, 9)]
        out = zeta_expected(RING, oracle.act, supports, RING_KERNEL, 1.005, 200, rng)
        assert np.all(out >= 0) and np.all(out < 2 * math.log1p(1 / 1.005))

    def test_batch_matches_pointwise(self):
        rng = np.random.default_rng(2)
        S, Z = rng.uniform(-1, 1, (12, 2)), rng.uniform(-1, 1, (5, 2))
        expected = [zeta_information_amount(RING_KERNEL, S, z, 1.3) for z in Z]
        np.testing.assert_allclose(zeta_batch(RING_KERNEL, S, Z, 1.3), expected, atol=1e-10)

    def test_wrong_support_count(self):
        with pytest.raises(InputError):
            zeta_expected(RING, stay_at_peak, [np.zeros((0, 2))], RING_KERNEL, 1.0, 5, np.random.default_rng(0))
