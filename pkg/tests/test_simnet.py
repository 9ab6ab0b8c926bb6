import math
from pathlib import Path

import numpy as np
import pytest

from kanlb.errors import ConfigError, StateError
from kanlb.simnet import (
    INTERNET,
    MPLS,
    OBS_FIELDS,
    EpisodeConfig,
    LoadBalanceEnv,
    SimParams,
    arrival_count_rate,
    choose_link,
    compute_action_ratio,
    el_choose_link,
    reward_loss,
    reward_utility,
    scaling_factor,
    trace_row,
    wave_bounds,
    wave_rate,
    write_trace_csv,
)

PARAMS = SimParams()

GOLDEN_CONFIG = EpisodeConfig(
    lambda_hat=0.25,
    wave_phase=0.0,
    wave_trough=9.5e6,
    wave_peak=22e6,
    background_rate=6.5e6,
    seed=7,
)


def make_config(seed=0, **kw) -> EpisodeConfig:
    base = dict(
        lambda_hat=0.25, wave_phase=0.0, wave_trough=9.5e6, wave_peak=22e6,
        background_rate=6.5e6, seed=seed,
    )
    base.update(kw)
    return EpisodeConfig(**base)


# ---------------------------------------------------------------------------
# Pure controller arithmetic
# ---------------------------------------------------------------------------

class TestActionRatio:
    def test_symmetry_zero(self):
        # equal capacity-normalized counts
        assert compute_action_ratio(2, 5, 6e6, 15e6) == pytest.approx(0.0, abs=1e-12)

    def test_all_mpls_is_one(self):
        assert compute_action_ratio(3, 0, 6e6, 15e6) == 1.0

    def test_all_internet_is_minus_one(self):
        assert compute_action_ratio(0, 4, 6e6, 15e6) == -1.0

    def test_undefined_without_flows(self):
        with pytest.raises(ValueError):
            compute_action_ratio(0, 0, 6e6, 15e6)

    def test_range(self):
        rng = np.random.default_rng(0)
        for _ in range(500):
            n_m = int(rng.integers(0, 200))
            n_i = int(rng.integers(0, 200))
            if n_m + n_i == 0:
                continue
            a = compute_action_ratio(n_m, n_i, 6e6, 15e6)
            assert -1.0 <= a <= 1.0


class TestPlacement:
    def test_below_target_goes_mpls(self):
        rng = np.random.default_rng(0)
        assert choose_link(-1.0, 1.0, rng) == MPLS

    def test_above_target_goes_internet(self):
        rng = np.random.default_rng(0)
        assert choose_link(1.0, -1.0, rng) == INTERNET

    def test_tie_break_is_fair(self):
        rng = np.random.default_rng(123)
        picks = [choose_link(0.5, 0.5, rng) for _ in range(10_000)]
        frac_mpls = sum(p == MPLS for p in picks) / len(picks)
        assert abs(frac_mpls - 0.5) <= 0.05


class TestElBaseline:
    def test_first_two_arrivals(self):
        # Internet is the most capacity-deficient link of an empty system.
        assert el_choose_link(0, 0, 6e6, 15e6) == INTERNET
        assert el_choose_link(0, 1, 6e6, 15e6) == MPLS

    def test_long_run_split_matches_capacity_share(self):
        n = {MPLS: 0, INTERNET: 0}
        for _ in range(21_000):
            n[el_choose_link(n[MPLS], n[INTERNET], 6e6, 15e6)] += 1
        total = n[MPLS] + n[INTERNET]
        assert abs(n[MPLS] / total - 6 / 21) < 0.01
        assert abs(n[INTERNET] / total - 15 / 21) < 0.01

    def test_equal_capacities_alternate(self):
        n = {MPLS: 0, INTERNET: 0}
        seq = []
        for _ in range(10):
            link = el_choose_link(n[MPLS], n[INTERNET], 5e6, 5e6)
            seq.append(link)
            n[link] += 1
        assert seq == [MPLS, INTERNET] * 5


class TestRewards:
    def test_scaling_factor_values(self):
        assert scaling_factor(0.2, 1.0, 0.2) == pytest.approx(1.0, abs=1e-12)
        assert scaling_factor(0.25, 1.0, 0.2) == pytest.approx(0.8, abs=1e-12)

    def test_scaling_factor_zero_alpha(self):
        for lam in (0.2, 0.25, 0.3):
            assert scaling_factor(lam, 0.0, 0.2) == pytest.approx(0.2, abs=1e-12)

    def test_scaling_factor_domain(self):
        with pytest.raises(ValueError):
            scaling_factor(0.0, 1.0, 0.2)

    def test_utility_all_satisfied(self):
        assert reward_utility(np.array([10.0, 5.0]), np.array([10.0, 5.0]), 0.8) == 0.0

    def test_utility_hand_case(self):
        # satisfactions {1.0, 0.5} at S = 0.8
        r = reward_utility(np.array([4.0, 2.0]), np.array([4.0, 4.0]), 0.8)
        assert r == pytest.approx(-0.2, abs=1e-12)

    def test_utility_starvation_bound(self):
        assert reward_utility(np.array([0.0]), np.array([3.0]), 0.8) == pytest.approx(-0.8)

    def test_utility_no_flows(self):
        assert reward_utility(np.array([]), np.array([]), 0.8) == 0.0

    def test_loss_values(self):
        assert reward_loss(0.0, 0.8) == 0.0
        assert reward_loss(0.05, 0.8) == pytest.approx(-0.4, abs=1e-12)
        assert reward_loss(1.0, 1.0) == pytest.approx(-10.0, abs=1e-12)

    def test_loss_domain(self):
        with pytest.raises(ValueError):
            reward_loss(1.2, 0.8)
        with pytest.raises(ValueError):
            reward_loss(-0.1, 0.8)


class TestArrivals:
    def test_zero_rate_means_zero_arrivals(self):
        rng = np.random.default_rng(0)
        rate = arrival_count_rate(0.0, PARAMS.flow_rate, PARAMS.flow_mean_duration)
        assert rate == 0.0
        assert all(rng.poisson(rate * 0.2) == 0 for _ in range(100))

    def test_mean_offered_load_matches_wave_mean(self):
        # Little's law: arrived volume rate == time-mean of the wave profile.
        rng = np.random.default_rng(42)
        episodes = 500
        total_bits = 0.0
        expected = 0.0
        dt = PARAMS.step_duration / PARAMS.substeps
        n_sub = PARAMS.steps_per_episode * PARAMS.substeps
        for _ in range(episodes):
            config = EpisodeConfig.random(PARAMS, rng)
            expected += 0.5 * (config.wave_trough + config.wave_peak)
            for j in range(n_sub):
                lam = wave_rate(j * dt, config, PARAMS)
                count = rng.poisson(
                    arrival_count_rate(lam, PARAMS.flow_rate, PARAMS.flow_mean_duration) * dt
                )
                if count:
                    durations = rng.exponential(PARAMS.flow_mean_duration, size=count)
                    total_bits += PARAMS.flow_rate * durations.sum()
        episode_seconds = PARAMS.step_duration * PARAMS.steps_per_episode
        measured = total_bits / (episodes * episode_seconds)
        expected /= episodes
        assert abs(measured - expected) / expected < 0.03

    def test_disjoint_interval_counts_independent(self):
        from scipy.stats import chi2_contingency

        rng = np.random.default_rng(7)
        rate = arrival_count_rate(15e6, PARAMS.flow_rate, PARAMS.flow_mean_duration)
        counts = rng.poisson(rate * 0.2, size=4000)
        a, b = counts[0::2], counts[1::2]
        edges = [0, 1, 2, 3, 100]
        table = np.zeros((4, 4))
        for x, y in zip(a, b):
            i = np.searchsorted(edges, x, side="right") - 1
            j = np.searchsorted(edges, y, side="right") - 1
            table[min(i, 3), min(j, 3)] += 1
        _, p, _, _ = chi2_contingency(table)
        assert p > 0.01


# ---------------------------------------------------------------------------
# Episode configs
# ---------------------------------------------------------------------------

class TestEpisodeConfig:
    def test_random_respects_ranges(self):
        rng = np.random.default_rng(0)
        for _ in range(200):
            c = EpisodeConfig.random(PARAMS, rng)
            c.validate(PARAMS)

    def test_wave_bounds_endpoints(self):
        assert wave_bounds(0.2, PARAMS) == (7e6, 17e6)
        assert wave_bounds(0.3, PARAMS) == (12e6, 27e6)

    def test_background_out_of_range_rejected(self):
        env = LoadBalanceEnv(PARAMS)
        with pytest.raises(ConfigError):
            env.reset(make_config(background_rate=9e6))

    def test_lambda_hat_out_of_range_rejected(self):
        env = LoadBalanceEnv(PARAMS)
        with pytest.raises(ConfigError):
            env.reset(make_config(lambda_hat=0.35))


# ---------------------------------------------------------------------------
# Environment behaviour
# ---------------------------------------------------------------------------

class TestEnv:
    def test_reset_returns_at_rest_observation(self):
        env = LoadBalanceEnv(PARAMS)
        obs = env.reset(make_config())
        fields = dict(zip(OBS_FIELDS, obs))
        assert fields["l_m10"] == 0.0 and fields["l_i10"] == 0.0
        assert fields["u_m"] == 0.0 and fields["u_i"] == 0.0
        assert fields["lam"] == 0.0 and fields["dlam"] == 0.0
        # delay observations sit at the propagation floor, scaled by ten
        assert fields["d_m10"] == pytest.approx(10 * PARAMS.base_delay)

    def test_same_seed_same_trace(self):
        rng = np.random.default_rng(5)
        actions = rng.uniform(-1, 1, 50)
        traces = []
        for _ in range(2):
            env = LoadBalanceEnv(PARAMS)
            env.reset(make_config(seed=11))
            outs = [env.step(a) for a in actions]
            traces.append(outs)
        for a, b in zip(*traces):
            assert np.array_equal(a.obs, b.obs)
            assert a.reward_utility == b.reward_utility
            assert a.reward_loss == b.reward_loss
            assert a.info == b.info

    def test_uncongested_step_has_zero_rewards(self):
        # Trough-phase start, lowest demand knob, minimum background: both
        # links stay under capacity so nothing is lost and all demand is met.
        cfg = make_config(
            lambda_hat=0.2, wave_trough=7e6, wave_peak=17e6,
            background_rate=5e6, wave_phase=3 * math.pi / 2, seed=3,
        )
        env = LoadBalanceEnv(PARAMS)
        env.reset(cfg)
        out = env.step(0.0)
        assert out.reward_loss == 0.0
        assert out.reward_utility == 0.0
        assert out.info["satisfaction"] == 1.0

    def test_bit_conservation_randomized(self):
        # offered = delivered + lost + queue delta, per link, every step
        rng = np.random.default_rng(0)
        steps = 0
        for ep in range(12):
            env = LoadBalanceEnv(PARAMS)
            env.reset(EpisodeConfig.random(PARAMS, rng))
            done = False
            while not done:
                out = env.step(float(rng.uniform(-1, 1)))
                done = out.done
                steps += 1
                for link in (MPLS, INTERNET):
                    offered = out.info[f"offered_{link}"]
                    residual = abs(
                        offered
                        - out.info[f"delivered_{link}"]
                        - out.info[f"lost_{link}"]
                        - out.info[f"dqueue_{link}"]
                    )
                    assert residual <= 1e-9 * max(1.0, offered)
        assert steps == 600

    def test_metric_ranges(self):
        rng = np.random.default_rng(1)
        env = LoadBalanceEnv(PARAMS)
        env.reset(EpisodeConfig.random(PARAMS, rng))
        for _ in range(50):
            out = env.step(float(rng.uniform(-1, 1)))
            for link in (MPLS, INTERNET):
                assert 0.0 <= out.info[f"util_{link}"] <= 1.0
                assert 0.0 <= out.info[f"loss_{link}"] <= 1.0
                assert out.info[f"delay_{link}"] >= PARAMS.base_delay
            assert -1.0 <= out.info["achieved_ratio"] <= 1.0
            assert out.reward_utility <= 0.0
            assert out.reward_loss <= 0.0
            assert np.isfinite(out.obs).all()

    def test_delay_monotone_in_queue(self):
        from kanlb.simnet import LinkState

        link = LinkState(MPLS, 6e6, PARAMS.queue_capacity_bits, 0.01)
        delays = []
        for q in np.linspace(0, PARAMS.queue_capacity_bits, 7):
            link.queue_bits = q
            delays.append(link.delay())
        assert all(b > a for a, b in zip(delays, delays[1:]))
        assert delays[0] == PARAMS.base_delay

    def test_step_after_done_raises(self):
        env = LoadBalanceEnv(PARAMS)
        env.reset(make_config())
        for _ in range(PARAMS.steps_per_episode):
            out = env.step(0.0)
        assert out.done
        with pytest.raises(StateError):
            env.step(0.0)

    def test_step_before_reset_raises(self):
        env = LoadBalanceEnv(PARAMS)
        with pytest.raises(StateError):
            env.step(0.0)

    def test_nonfinite_action_rejected(self):
        env = LoadBalanceEnv(PARAMS)
        env.reset(make_config())
        with pytest.raises(ValueError):
            env.step(float("nan"))

    def test_steering_toward_constant_target(self):
        # Holding any target, the achieved ratio closes in as flows churn.
        for target in (-0.5, 0.0, 0.5):
            gaps = []
            for seed in range(3):
                env = LoadBalanceEnv(PARAMS)
                env.reset(make_config(seed=seed))
                achieved = []
                for _ in range(30):
                    out = env.step(target)
                    achieved.append(out.info["achieved_ratio"])
                gaps.append(np.mean(np.abs(np.array(achieved[-10:]) - target)))
            assert np.mean(gaps) <= 0.15, (target, gaps)

    def test_background_stays_on_internet(self):
        env = LoadBalanceEnv(PARAMS)
        env.reset(make_config())
        for _ in range(20):
            env.step(1.0)
        assert not env.mpls.pool.is_bg.any()
        assert env.internet.pool.n - env.internet.pool.n_main > 0

    def test_online_scaling_mode(self):
        params = SimParams(scaling_mode="online")
        env = LoadBalanceEnv(params)
        env.reset(make_config())
        out = env.step(0.0)
        assert out.info["scaling"] > 0


# ---------------------------------------------------------------------------
# Golden trace
# ---------------------------------------------------------------------------

GOLDEN_PATH = Path(__file__).parent / "data" / "golden_trace_seed7.csv"


def golden_rows():
    env = LoadBalanceEnv(SimParams())
    env.reset(GOLDEN_CONFIG)
    rows = []
    for step in range(GOLDEN_CONFIG.steps_per_episode):
        out = env.step(0.0)
        rows.append(trace_row(step, 0.0, out))
    return rows


class TestGoldenTrace:
    def test_trace_matches_committed_file(self, tmp_path):
        regenerated = tmp_path / "trace.csv"
        write_trace_csv(regenerated, golden_rows())
        assert GOLDEN_PATH.exists(), "golden trace missing from the repo"
        assert regenerated.read_text() == GOLDEN_PATH.read_text()

    def test_golden_trace_invariants(self):
        import csv

        with open(GOLDEN_PATH) as fh:
            rows = list(csv.DictReader(fh))
        assert len(rows) == 50
        for row in rows:
            for key in ("loss_mpls", "loss_internet"):
                assert 0.0 <= float(row[key]) <= 1.0
            for key in ("util_mpls", "util_internet"):
                assert 0.0 <= float(row[key]) <= 1.0
            assert float(row["reward_utility"]) <= 0.0
            assert float(row["reward_loss"]) <= 0.0
            assert float(row["delay_mpls"]) >= 0.0
