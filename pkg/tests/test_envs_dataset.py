import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from udskernel.dataset import Dataset, DatasetError, concat, read_dataset, write_dataset
from udskernel.envs import (
    CARTPOLE_ABSORBING,
    CartPoleEnv,
    RingGaussianEnv,
    TabularEnv,
    epsilon_greedy,
    generate_dataset,
    make_env,
)
from udskernel.exceptions import InputError

RING = RingGaussianEnv(alpha=3.0, C=8)


def reference_cartpole(state, action, steps):
    """Scalar transcription of the classic-control update, no vectorisation."""
    g, mc, mp, l, f, tau = 9.8, 1.0, 0.1, 0.5, 10.0, 0.02
    x, xd, th, thd = state
    out = [(x, xd, th, thd)]
    for _ in range(steps):
        force = f if action == 1 else -f
        ct, stt = math.cos(th), math.sin(th)
        temp = (force + mp * l * thd * thd * stt) / (mc + mp)
        thacc = (g * stt - ct * temp) / (l * (4.0 / 3.0 - mp * ct * ct / (mc + mp)))
        xacc = temp - mp * l * thacc * ct / (mc + mp)
        x, xd, th, thd = x + tau * xd, xd + tau * xacc, th + tau * thd, thd + tau * thacc
        out.append((x, xd, th, thd))
    return np.array(out)


class TestRingGaussian:
    def test_defaults(self):
        assert RING.horizon == 8 and RING.action_count == 9 and RING.state_dim == 1

    def test_initial_mean(self):
        s = RING.sample_initial(np.random.default_rng(0), 100_000)
        assert abs(s.mean() - 4.0) <= 0.05
        assert s.min() >= 0 and s.max() < 8

    def test_initial_deterministic(self):
        a = RING.sample_initial(np.random.default_rng(5), 3)
        b = RING.sample_initial(np.random.default_rng(5), 3)
        assert np.array_equal(a, b)

    def test_reward_peak(self):
        assert RING.true_reward(1, [[4.0]], [0])[0] == pytest.approx(math.sqrt(3 / math.pi), abs=1e-15)
        assert RING.true_reward(1, [[4.0]], [0])[0] == pytest.approx(0.9772050, abs=1e-7)

    def test_reward_far(self):
        assert RING.true_reward(3, [[0.0]], [5])[0] < 1e-20

    def test_reward_ignores_action_and_step(self):
        s = np.full((9, 1), 3.3)
        r = RING.true_reward(2, s, np.arange(9))
        assert np.all(r == r[0])
        assert RING.true_reward(7, s[:1], [0])[0] == r[0]

    def test_prewrap_moments(self):
        rng = np.random.default_rng(1)
        mean = (3 + 7) % 8
        g = rng.normal(mean, math.sqrt(RING.transition_variance), 100_000)
        assert abs(g.mean() - 2.0) <= 0.01
        assert abs(g.var() - 1 / 6) <= 0.005
        # step() itself: pre-wrap offset recovered from the shortest signed distance
        nxt, _ = RING.step(1, np.full((100_000, 1), 3.0), np.full(100_000, 7), np.random.default_rng(2))
        d = (nxt[:, 0] - 2.0 + 4.0) % 8 - 4.0
        assert abs(d.mean()) <= 0.01 and abs(d.var() - 1 / 6) <= 0.005

    def test_wrap_range(self):
        s = RING.sample_initial(np.random.default_rng(3), 10_000)
        a = np.random.default_rng(4).integers(0, 9, 10_000)
        nxt, _ = RING.step(1, s, a, np.random.default_rng(5))
        assert nxt.min() >= 0 and nxt.max() < 8

    def test_rewards_bounded(self):
        s = np.linspace(0, 8, 1001)[:-1].reshape(-1, 1)
        r = RING.true_reward(1, s, np.zeros(len(s), dtype=int))
        assert np.all(r > 0) and np.all(r <= 1)

    def test_invalid(self):
        with pytest.raises(InputError):
            RingGaussianEnv(alpha=0)
        with pytest.raises(InputError):
            RingGaussianEnv(C=2.5)


class TestCartPole:
    def test_initial_range(self):
        s = CartPoleEnv().sample_initial(np.random.default_rng(0), 10_000)
        assert s.shape == (10_000, 4) and np.all(np.abs(s) <= 0.05)

    def test_matches_reference_integration(self):
        env = CartPoleEnv(H=20)
        ref = reference_cartpole((0.0, 0.0, 0.0, 0.0), 1, 6)
        s = np.zeros((1, 4))
        for t in range(6):
            s, r = env.step(t + 1, s, [1])
            np.testing.assert_allclose(s[0], ref[t + 1], rtol=1e-13, atol=1e-15)
            assert r[0] == 1.0

    def test_push_right_moves_right(self):
        x = reference_cartpole((0.0, 0.0, 0.0, 0.0), 1, 6)[:, 0]
        # explicit Euler uses the old velocity, so the first step leaves x unchanged
        assert x[1] == x[0]
        assert np.all(np.diff(x[1:]) > 0)

    def test_absorbing(self):
        env = CartPoleEnv(H=5)
        s = np.array([[2.39, 5.0, 0.0, 0.0]])
        s, r = env.step(1, s, [1])
        assert r[0] == 1.0 and tuple(s[0]) == CARTPOLE_ABSORBING
        for h in range(2, 6):
            s, r = env.step(h, s, [0])
            assert r[0] == 0.0 and tuple(s[0]) == CARTPOLE_ABSORBING

    def test_absorbing_reward_zero(self):
        assert CartPoleEnv().true_reward(1, [CARTPOLE_ABSORBING], [1])[0] == 0.0

    def test_embed_in_unit_box(self):
        env = CartPoleEnv()
        s = np.random.default_rng(1).normal(scale=5, size=(200, 4))
        z = env.embed(s, np.random.default_rng(2).integers(0, 2, 200))
        assert z.shape == (200, 5) and np.all(np.abs(z) <= 1)

    def test_custom_bounds(self):
        env = CartPoleEnv(bounds=(1.0, 1.0, 1.0, 1.0))
        np.testing.assert_allclose(env.embed([[0.5, 0.2, 0.1, -0.3]], [0]), [[0.5, 0.2, 0.1, -0.3, -1.0]])
        with pytest.raises(InputError):
            CartPoleEnv(bounds=(1.0, 0.0, 1.0, 1.0))

    def test_episode_absorption_invariant(self):
        env = CartPoleEnv(H=60)
        d = generate_dataset(env, 50, True, np.random.default_rng(3))
        for ep in range(50):
            dead = np.flatnonzero(d.rewards[ep] == 0)
            if len(dead):
                first = dead[0]
                assert np.all(d.rewards[ep, first:] == 0)
                assert np.all(d.states[ep, first:] == CARTPOLE_ABSORBING)


class TestGenerateDataset:
    def test_counting(self):
        d = generate_dataset(RING, 3, True, np.random.default_rng(0))
        assert len(d) == 24 and d.n_episodes == 3
        assert [t.episode for t in d.transitions()][::8] == [0, 1, 2]

    def test_noiseless_labels_exact(self):
        d = generate_dataset(RING, 4, True, np.random.default_rng(1))
        for h in range(1, 9):
            s, a, r, _ = d.step(h)
            assert np.array_equal(r, RING.true_reward(h, s, a))

    def test_noise_applied(self):
        d = generate_dataset(RING, 200, True, np.random.default_rng(2), noise_sigma=0.5)
        s, a, r, _ = d.step(1)
        assert abs(np.std(r - RING.true_reward(1, s, a)) - 0.5) < 0.1

    def test_unlabeled(self):
        d = generate_dataset(RING, 2, False, np.random.default_rng(3))
        assert not d.labeled and all(t.r is None for t in d.transitions())

    def test_stitching(self):
        d = generate_dataset(RING, 10, False, np.random.default_rng(4))
        assert np.array_equal(d.next_states[:, :-1], d.states[:, 1:])

    def test_reproducible(self):
        a = generate_dataset(RING, 5, True, np.random.default_rng(9), noise_sigma=0.1)
        b = generate_dataset(RING, 5, True, np.random.default_rng(9), noise_sigma=0.1)
        assert a == b

    def test_epsilon_greedy(self):
        always_zero = lambda h, s: np.zeros(len(s), dtype=int)
        d = generate_dataset(RING, 50, False, np.random.default_rng(5), behavior=epsilon_greedy(RING, always_zero, 0.0))
        assert np.all(d.actions == 0)
        with pytest.raises(InputError):
            epsilon_greedy(RING, always_zero, 1.5)

    def test_bad_args(self):
        with pytest.raises(InputError):
            generate_dataset(RING, 0, True, np.random.default_rng(0))
        with pytest.raises(InputError):
            generate_dataset(RING, 1, True, np.random.default_rng(0), noise_sigma=-1)


class TestDatasetIO:
    def test_round_trip(self, tmp_path):
        for labeled in (True, False):
            d = generate_dataset(RING, 4, labeled, np.random.default_rng(0), noise_sigma=0.3)
            write_dataset(d, tmp_path / "d.jsonl")
            assert read_dataset(tmp_path / "d.jsonl") == d

    def test_round_trip_cartpole(self, tmp_path):
        d = generate_dataset(CartPoleEnv(H=7), 3, True, np.random.default_rng(1))
        write_dataset(d, tmp_path / "c.jsonl")
        assert read_dataset(tmp_path / "c.jsonl", action_count=2) == d

    def _records(self, tmp_path):
        d = generate_dataset(RingGaussianEnv(C=3), 2, True, np.random.default_rng(2))
        write_dataset(d, tmp_path / "d.jsonl")
        return [json.loads(x) for x in (tmp_path / "d.jsonl").read_text().splitlines()]

    def _write(self, tmp_path, recs):
        (tmp_path / "bad.jsonl").write_text("".join(json.dumps(r) + "\n" for r in recs))
        return tmp_path / "bad.jsonl"

    def test_h_zero(self, tmp_path):
        recs = self._records(tmp_path)
        recs[0]["h"] = 0
        with pytest.raises(DatasetError, match="h=0"):
            read_dataset(self._write(tmp_path, recs))

    def test_null_reward_in_labeled(self, tmp_path):
        recs = self._records(tmp_path)
        recs[4]["r"] = None
        with pytest.raises(DatasetError, match="episode 1"):
            read_dataset(self._write(tmp_path, recs))

    def test_malformed_line_number(self, tmp_path):
        recs = self._records(tmp_path)
        p = tmp_path / "m.jsonl"
        p.write_text(json.dumps(recs[0]) + "\n{not json\n")
        with pytest.raises(DatasetError, match="line 2"):
            read_dataset(p)

    def test_broken_stitching(self, tmp_path):
        recs = self._records(tmp_path)
        recs[1]["s"] = [recs[1]["s"][0] + 0.5]
        with pytest.raises(DatasetError, match="episode 0"):
            read_dataset(self._write(tmp_path, recs))

    def test_action_out_of_range(self, tmp_path):
        recs = self._records(tmp_path)
        recs[2]["a"] = 99
        with pytest.raises(DatasetError):
            read_dataset(self._write(tmp_path, recs), action_count=4)

    def test_concat_and_select(self):
        a = generate_dataset(RING, 2, False, np.random.default_rng(0))
        b = generate_dataset(RING, 3, False, np.random.default_rng(1))
        c = concat(a, b)
        assert c.n_episodes == 5 and c.select([0, 1]) == a
        with pytest.raises(InputError):
            concat(a, generate_dataset(RING, 1, True, np.random.default_rng(2)))

    def test_reject_unstitched_construction(self):
        S = np.zeros((1, 2, 1))
        S2 = np.ones((1, 2, 1))
        with pytest.raises(DatasetError):
            Dataset(S, np.zeros((1, 2), dtype=int), S2, None).validate()


class TestMakeEnv:
    def test_round_trip(self):
        for env in (RING, CartPoleEnv(H=9, tau=0.01)):
            assert make_env(env.to_dict()) == env

    def test_unknown(self):
        with pytest.raises(InputError):
            make_env({"variant": "mountain-car"})

    def test_tabular(self):
        P = np.full((2, 2, 2, 2), 0.5)
        R = np.zeros((2, 2, 2))
        env = TabularEnv(P, R, np.array([1.0, 0.0]))
        assert env.embed([[1]], [0]).shape == (1, env.embed_dim)


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 2**31 - 1), n=st.integers(1, 6))
def test_stitching_property(seed, n):
    d = generate_dataset(RING, n, True, np.random.default_rng(seed))
    d.validate(RING.action_count)
    assert np.array_equal(d.next_states[:, :-1], d.states[:, 1:])
    assert np.all((d.rewards > 0) & (d.rewards <= 1))
