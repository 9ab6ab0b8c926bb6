"""Flow-level simulation of a two-link (MPLS / Internet) load-balancing environment.

Discrete 2 s control steps, each integrated in sub-steps: Poisson flow
arrivals riding a sine-wave demand profile, a target-ratio placement
controller (plus a capacity-proportional baseline), drop-tail link queues,
AIMD rate adaptation standing in for TCP elasticity, and the two reward
signals (throughput utility, loss).
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigError, StateError

MPLS = "mpls"
INTERNET = "internet"

#: Observation layout; the order is fixed and shared by every consumer
#: (policies, extraction, traces).
OBS_FIELDS = (
    "lam",      # total main demand / C
    "dlam",     # (arrived - departed main desired load) / C over the last step
    "lam_m",    # MPLS main demand / C_m
    "d_m10",    # 10 x MPLS delay [s]
    "l_m10",    # 10 x MPLS loss ratio
    "u_m",      # MPLS utilization in [0, 1]
    "lam_i",    # Internet main demand / C_i
    "d_i10",    # 10 x Internet delay [s]
    "l_i10",    # 10 x Internet loss ratio
    "u_i",      # Internet utilization in [0, 1]
)

OBS_DIM = len(OBS_FIELDS)


@dataclass(frozen=True)
class SimParams:
    """Physical and traffic constants of the environment.

    Every value here is a deliberate modelling choice (the control-plane
    quantities the policy observes are insensitive to most of them) and can
    be overridden from a config file.
    """

    capacity_mpls: float = 6e6            # bps
    capacity_internet: float = 15e6       # bps
    queue_packets: int = 100
    packet_bytes: int = 1500
    base_delay: float = 0.01              # s, propagation per link
    step_duration: float = 2.0            # s
    steps_per_episode: int = 50
    substeps: int = 10                    # integration sub-steps per control step
    flow_rate: float = 150e3              # bps, desired rate per main flow
    flow_mean_duration: float = 15.0      # s, exponential
    bg_flow_rate: float = 150e3           # bps, desired rate per background flow
    bg_mean_duration: float = 15.0        # s
    rate_ceiling: float = 1.0             # send_rate cap as multiple of desired
    aimd_decrease: float = 0.5            # multiplicative backoff when hit by a drop burst
    aimd_increase: float = 0.03           # additive step, fraction of desired per sub-step
    aimd_burst: float = 12.0              # burstiness: P(flow hit) = burst * loss fraction
    lambda_hat_min: float = 0.2
    lambda_hat_max: float = 0.3
    background_min: float = 5e6           # bps
    background_max: float = 8e6
    wave_trough_min: float = 7e6          # bps
    wave_trough_max: float = 12e6
    wave_peak_min: float = 17e6
    wave_peak_max: float = 27e6
    wave_period: float = 100.0            # s, one full cycle per episode by default
    reward_alpha: float = 1.0
    reward_beta: float = 0.2
    scaling_mode: str = "config"          # "config" | "online"

    @property
    def capacity_total(self) -> float:
        return self.capacity_mpls + self.capacity_internet

    @property
    def queue_capacity_bits(self) -> float:
        return float(self.queue_packets * self.packet_bytes * 8)

    def validate(self) -> None:
        if self.capacity_mpls <= 0 or self.capacity_internet <= 0:
            raise ConfigError("link capacities must be positive")
        if self.step_duration <= 0 or self.substeps < 1 or self.steps_per_episode < 1:
            raise ConfigError("step timing values must be positive")
        if self.flow_rate <= 0 or self.flow_mean_duration <= 0:
            raise ConfigError("flow rate and mean duration must be positive")
        if self.bg_flow_rate <= 0 or self.bg_mean_duration <= 0:
            raise ConfigError("background flow rate and mean duration must be positive")
        if self.rate_ceiling < 1.0:
            raise ConfigError("rate_ceiling must be >= 1")
        if not 0.0 < self.aimd_decrease <= 1.0:
            raise ConfigError("aimd_decrease must be in (0, 1]")
        if self.aimd_increase <= 0:
            raise ConfigError("aimd_increase must be positive")
        if self.aimd_burst <= 0:
            raise ConfigError("aimd_burst must be positive")
        if self.wave_period <= 0:
            raise ConfigError("wave_period must be positive")
        if self.scaling_mode not in ("config", "online"):
            raise ConfigError(f"unknown scaling_mode {self.scaling_mode!r}")


def wave_bounds(lambda_hat: float, params: SimParams) -> tuple[float, float]:
    """Map the demand knob linearly onto the (trough, peak) rate range."""
    span = params.lambda_hat_max - params.lambda_hat_min
    frac = 0.0 if span == 0 else (lambda_hat - params.lambda_hat_min) / span
    trough = params.wave_trough_min + frac * (params.wave_trough_max - params.wave_trough_min)
    peak = params.wave_peak_min + frac * (params.wave_peak_max - params.wave_peak_min)
    return trough, peak


@dataclass(frozen=True)
class EpisodeConfig:
    """Per-episode randomization: demand level, wave shape, background load."""

    lambda_hat: float
    wave_phase: float
    wave_trough: float
    wave_peak: float
    background_rate: float
    seed: int
    step_duration: float = 2.0
    steps_per_episode: int = 50

    def validate(self, params: SimParams) -> None:
        if not (params.lambda_hat_min <= self.lambda_hat <= params.lambda_hat_max):
            raise ConfigError(
                f"lambda_hat {self.lambda_hat} outside "
                f"[{params.lambda_hat_min}, {params.lambda_hat_max}]"
            )
        if not (params.background_min <= self.background_rate <= params.background_max):
            raise ConfigError(
                f"background_rate {self.background_rate} outside "
                f"[{params.background_min}, {params.background_max}]"
            )
        if not (params.wave_trough_min <= self.wave_trough <= params.wave_trough_max):
            raise ConfigError(f"wave_trough {self.wave_trough} out of range")
        if not (params.wave_peak_min <= self.wave_peak <= params.wave_peak_max):
            raise ConfigError(f"wave_peak {self.wave_peak} out of range")
        if not math.isfinite(self.wave_phase):
            raise ConfigError("wave_phase must be finite")
        if self.step_duration <= 0:
            raise ConfigError("step_duration must be positive")
        if self.steps_per_episode < 1:
            raise ConfigError("steps_per_episode must be >= 1")

    @classmethod
    def random(cls, params: SimParams, rng: np.random.Generator) -> "EpisodeConfig":
        lambda_hat = float(rng.uniform(params.lambda_hat_min, params.lambda_hat_max))
        phase = float(rng.uniform(0.0, 2.0 * math.pi))
        background = float(rng.uniform(params.background_min, params.background_max))
        trough, peak = wave_bounds(lambda_hat, params)
        seed = int(rng.integers(0, 2**31 - 1))
        return cls(
            lambda_hat=lambda_hat,
            wave_phase=phase,
            wave_trough=trough,
            wave_peak=peak,
            background_rate=background,
            seed=seed,
            step_duration=params.step_duration,
            steps_per_episode=params.steps_per_episode,
        )


def wave_rate(t: float, config: EpisodeConfig, params: SimParams) -> float:
    """Offered main-demand rate [bps] at episode time t."""
    mid = 0.5 * (config.wave_trough + config.wave_peak)
    amp = 0.5 * (config.wave_peak - config.wave_trough)
    return mid + amp * math.sin(2.0 * math.pi * t / params.wave_period + config.wave_phase)


@dataclass
class Flow:
    """A single elastic flow as handed to the placement controller."""

    id: int
    desired_rate: float
    send_rate: float
    link: str | None
    remaining_duration: float
    delivered_this_step: float = 0.0
    is_background: bool = False


@dataclass
class StepOutcome:
    obs: np.ndarray
    reward_utility: float
    reward_loss: float
    done: bool
    info: dict


# --------------------------------------------------------------------------
# Pure controller / reward arithmetic
# --------------------------------------------------------------------------

def compute_action_ratio(n_m: int, n_i: int, c_m: float, c_i: float) -> float:
    """Capacity-normalized placement ratio in [-1, 1].

    +1 means every flow sits on MPLS, -1 every flow on Internet.  Undefined
    when no flows exist; the caller keeps the previous value in that case.
    """
    if n_m + n_i < 1:
        raise ValueError("ratio undefined with no flows placed")
    rm = n_m / c_m
    ri = n_i / c_i
    return 2.0 * rm / (rm + ri) - 1.0


def choose_link(achieved: float, target: float, rng: np.random.Generator) -> str:
    """Ratio-steering placement rule; exact ties break uniformly at random."""
    if achieved < target:
        return MPLS
    if achieved > target:
        return INTERNET
    return MPLS if rng.random() < 0.5 else INTERNET


def el_choose_link(n_m: int, n_i: int, c_m: float, c_i: float) -> str:
    """Capacity-proportional baseline: fill the link whose flow-count share
    lags its capacity share the most; ties go to MPLS."""
    n = n_m + n_i
    share_m = n_m / n if n else 0.0
    share_i = n_i / n if n else 0.0
    c = c_m + c_i
    deficit_m = c_m / c - share_m
    deficit_i = c_i / c - share_i
    return MPLS if deficit_m >= deficit_i else INTERNET


def scaling_factor(lambda_hat: float, alpha: float, beta: float) -> float:
    """Reward normalizer S = beta / lambda_hat**alpha."""
    if lambda_hat <= 0:
        raise ValueError("lambda_hat must be positive")
    return beta / lambda_hat**alpha


def reward_utility(delivered_bits: np.ndarray, desired_bits: np.ndarray, s: float) -> float:
    """-S * (1 - mean satisfaction), satisfaction capped at 1 per flow.

    Zero flows means no demand to satisfy, which earns reward 0.
    """
    delivered_bits = np.asarray(delivered_bits, dtype=float)
    desired_bits = np.asarray(desired_bits, dtype=float)
    if delivered_bits.size == 0:
        return 0.0
    sat = np.minimum(1.0, delivered_bits / desired_bits)
    return float(-s * (1.0 - sat.mean()))


def reward_loss(loss_ratio: float, s: float) -> float:
    """-10 * S * loss_ratio."""
    if not 0.0 <= loss_ratio <= 1.0:
        raise ValueError(f"loss_ratio {loss_ratio} outside [0, 1]")
    return -10.0 * s * loss_ratio


def arrival_count_rate(load_bps: float, flow_rate: float, mean_duration: float) -> float:
    """Flow arrival intensity [1/s] sustaining `load_bps` of offered demand."""
    return load_bps / (flow_rate * mean_duration)


# --------------------------------------------------------------------------
# Link state
# --------------------------------------------------------------------------

class FlowPool:
    """Struct-of-arrays store for the flows currently active on one link."""

    def __init__(self, capacity_hint: int = 256):
        cap = max(8, capacity_hint)
        self.n = 0
        self.n_main = 0
        self._ids = np.zeros(cap, dtype=np.int64)
        self._desired = np.zeros(cap)
        self._send = np.zeros(cap)
        self._expiry = np.zeros(cap)
        self._offered = np.zeros(cap)     # bits offered this step
        self._wanted = np.zeros(cap)      # desired bits this step
        self._delivered = np.zeros(cap)   # bits apportioned at step end
        self._is_bg = np.zeros(cap, dtype=bool)

    def _grow(self) -> None:
        for name in ("_ids", "_desired", "_send", "_expiry", "_offered",
                     "_wanted", "_delivered", "_is_bg"):
            old = getattr(self, name)
            new = np.zeros(old.size * 2, dtype=old.dtype)
            new[: old.size] = old
            setattr(self, name, new)

    @property
    def ids(self) -> np.ndarray:
        return self._ids[: self.n]

    @property
    def desired(self) -> np.ndarray:
        return self._desired[: self.n]

    @property
    def send(self) -> np.ndarray:
        return self._send[: self.n]

    @property
    def offered(self) -> np.ndarray:
        return self._offered[: self.n]

    @property
    def wanted(self) -> np.ndarray:
        return self._wanted[: self.n]

    @property
    def delivered(self) -> np.ndarray:
        return self._delivered[: self.n]

    @property
    def is_bg(self) -> np.ndarray:
        return self._is_bg[: self.n]

    def add(self, flow: Flow, expiry: float) -> None:
        if self.n == self._ids.size:
            self._grow()
        i = self.n
        self._ids[i] = flow.id
        self._desired[i] = flow.desired_rate
        self._send[i] = flow.send_rate
        self._expiry[i] = expiry
        self._offered[i] = 0.0
        self._wanted[i] = 0.0
        self._delivered[i] = 0.0
        self._is_bg[i] = flow.is_background
        self.n += 1
        if not flow.is_background:
            self.n_main += 1

    def retire_expired(self, t: float) -> dict:
        """Remove flows whose lifetime has elapsed; return their accumulators."""
        n = self.n
        if n == 0:
            return {"ids": np.empty(0, dtype=np.int64), "desired": np.empty(0),
                    "offered": np.empty(0), "wanted": np.empty(0),
                    "is_bg": np.empty(0, dtype=bool)}
        gone = self._expiry[:n] <= t
        if not gone.any():
            return {"ids": np.empty(0, dtype=np.int64), "desired": np.empty(0),
                    "offered": np.empty(0), "wanted": np.empty(0),
                    "is_bg": np.empty(0, dtype=bool)}
        out = {
            "ids": self._ids[:n][gone].copy(),
            "desired": self._desired[:n][gone].copy(),
            "offered": self._offered[:n][gone].copy(),
            "wanted": self._wanted[:n][gone].copy(),
            "is_bg": self._is_bg[:n][gone].copy(),
        }
        keep = ~gone
        k = int(keep.sum())
        for name in ("_ids", "_desired", "_send", "_expiry", "_offered",
                     "_wanted", "_delivered", "_is_bg"):
            arr = getattr(self, name)
            arr[:k] = arr[:n][keep]
        self.n = k
        self.n_main = int((~self._is_bg[:k]).sum())
        return out

    def reset_step(self) -> None:
        self._offered[: self.n] = 0.0
        self._wanted[: self.n] = 0.0
        self._delivered[: self.n] = 0.0


class LinkState:
    """One transport link: capacity, drop-tail queue, per-step accounting."""

    def __init__(self, name: str, capacity: float, queue_capacity_bits: float,
                 base_delay: float):
        self.name = name
        self.capacity = capacity
        self.queue_capacity_bits = queue_capacity_bits
        self.base_delay = base_delay
        self.queue_bits = 0.0
        self.offered_bits = 0.0
        self.delivered_bits = 0.0
        self.lost_bits = 0.0
        self.queue_start_bits = 0.0
        self.flow_ids: set[int] = set()
        self.pool = FlowPool()

    def begin_step(self) -> None:
        self.offered_bits = 0.0
        self.delivered_bits = 0.0
        self.lost_bits = 0.0
        self.queue_start_bits = self.queue_bits
        self.pool.reset_step()

    def substep(self, dt: float, params: "SimParams",
                backoff_rng: np.random.Generator) -> None:
        pool = self.pool
        n = pool.n
        if n:
            offered_f = pool.send * dt
            arrivals = float(offered_f.sum())
        else:
            offered_f = None
            arrivals = 0.0

        # Drain the backlog first, then serve fresh arrivals with what is left;
        # the remainder queues up and overflow past the drop-tail limit is lost.
        available = self.capacity * dt
        from_queue = min(self.queue_bits, available)
        self.queue_bits -= from_queue
        remaining = available - from_queue
        fresh = min(arrivals, remaining)
        leftover = arrivals - fresh
        self.queue_bits += leftover
        drop = self.queue_bits - self.queue_capacity_bits
        if drop > 0.0:
            self.queue_bits = self.queue_capacity_bits
        else:
            drop = 0.0

        self.offered_bits += arrivals
        self.delivered_bits += from_queue + fresh
        self.lost_bits += drop

        if n:
            pool._offered[:n] += offered_f
            pool._wanted[:n] += pool.desired * dt
            # A drop burst clips only the flows sending through it: each flow
            # backs off with probability proportional to the loss fraction,
            # the rest keep probing upward (TCP-like partial synchronization).
            grown = np.minimum(pool.desired * params.rate_ceiling,
                               pool.send + params.aimd_increase * pool.desired)
            if drop > 0.0 and arrivals > 0.0:
                p_hit = min(1.0, params.aimd_burst * drop / arrivals)
                hit = backoff_rng.random(n) < p_hit
                pool._send[:n] = np.where(hit, pool.send * params.aimd_decrease,
                                          grown)
            else:
                pool._send[:n] = grown

    def delay(self) -> float:
        return self.base_delay + self.queue_bits / self.capacity

    def utilization(self, step_duration: float) -> float:
        return min(1.0, self.delivered_bits / (self.capacity * step_duration))

    def loss_ratio(self) -> float:
        if self.offered_bits <= 0.0:
            return 0.0
        return min(1.0, self.lost_bits / self.offered_bits)


# --------------------------------------------------------------------------
# Environment
# --------------------------------------------------------------------------

class LoadBalanceEnv:
    """Two-link load balancing environment.

    Single-threaded; owns three RNG streams (main arrivals, background
    arrivals, placement tie-breaks) so traffic is identical across policies
    run with the same episode config.
    """

    def __init__(self, params: SimParams | None = None, controller: str = "ratio"):
        self.params = params or SimParams()
        self.params.validate()
        if controller not in ("ratio", "el"):
            raise ConfigError(f"unknown controller {controller!r}")
        self.controller = controller
        self.config: EpisodeConfig | None = None
        self._done = True
        self._step_idx = 0
        self._t = 0.0
        self.mpls: LinkState | None = None
        self.internet: LinkState | None = None

    # -- lifecycle ---------------------------------------------------------

    def reset(self, config: EpisodeConfig) -> np.ndarray:
        config.validate(self.params)
        self.config = config
        p = self.params
        self.mpls = LinkState(MPLS, p.capacity_mpls, p.queue_capacity_bits, p.base_delay)
        self.internet = LinkState(INTERNET, p.capacity_internet, p.queue_capacity_bits,
                                  p.base_delay)
        streams = np.random.SeedSequence(config.seed).spawn(4)
        self._arrival_rng = np.random.default_rng(streams[0])
        self._background_rng = np.random.default_rng(streams[1])
        self._tie_rng = np.random.default_rng(streams[2])
        self._backoff_rng = np.random.default_rng(streams[3])
        self._t = 0.0
        self._step_idx = 0
        self._done = False
        self._next_flow_id = 0
        self._achieved = 0.0            # last defined placement ratio
        self._lambda_sum = 0.0          # for the online scaling estimate
        return self._observe(
            lam=0.0, dlam=0.0, lam_m=0.0, lam_i=0.0,
        )

    def step(self, action: float) -> StepOutcome:
        if self.config is None:
            raise StateError("step() before reset()")
        if self._done:
            raise StateError("step() after episode end")
        if not math.isfinite(action):
            raise ValueError("action must be finite")
        target = min(1.0, max(-1.0, float(action)))

        p = self.params
        cfg = self.config
        dt = cfg.step_duration / p.substeps
        links = (self.mpls, self.internet)
        for link in links:
            link.begin_step()

        arrived_rate = 0.0
        departed_rate = 0.0
        departed_main: list[tuple[float, float, str]] = []  # (offered, wanted, link)

        for j in range(p.substeps):
            t_now = self._t + j * dt

            for link in links:
                gone = link.pool.retire_expired(t_now)
                if gone["ids"].size:
                    link.flow_ids.difference_update(int(i) for i in gone["ids"])
                    main = ~gone["is_bg"]
                    departed_rate += float(gone["desired"][main].sum())
                    for off, want in zip(gone["offered"][main], gone["wanted"][main]):
                        departed_main.append((float(off), float(want), link.name))

            # Main arrivals ride the demand wave and go through the controller.
            rate = arrival_count_rate(
                max(0.0, wave_rate(t_now, cfg, p)), p.flow_rate, p.flow_mean_duration
            )
            n_new = int(self._arrival_rng.poisson(rate * dt))
            if n_new:
                durations = self._arrival_rng.exponential(p.flow_mean_duration,
                                                          size=n_new)
                for duration in durations:
                    flow = Flow(
                        id=self._next_flow_id,
                        desired_rate=p.flow_rate,
                        send_rate=p.flow_rate,
                        link=None,
                        remaining_duration=float(duration),
                    )
                    self._next_flow_id += 1
                    link = self._place_main(flow, target)
                    flow.link = link.name
                    link.pool.add(flow, t_now + float(duration))
                    link.flow_ids.add(flow.id)
                    arrived_rate += flow.desired_rate

            # Background arrivals are pinned to the Internet link.
            bg_rate = arrival_count_rate(cfg.background_rate, p.bg_flow_rate,
                                         p.bg_mean_duration)
            n_bg = int(self._background_rng.poisson(bg_rate * dt))
            if n_bg:
                durations = self._background_rng.exponential(p.bg_mean_duration,
                                                             size=n_bg)
                for duration in durations:
                    flow = Flow(
                        id=self._next_flow_id,
                        desired_rate=p.bg_flow_rate,
                        send_rate=p.bg_flow_rate,
                        link=INTERNET,
                        remaining_duration=float(duration),
                        is_background=True,
                    )
                    self._next_flow_id += 1
                    self.internet.pool.add(flow, t_now + float(duration))
                    self.internet.flow_ids.add(flow.id)

            for link in links:
                link.substep(dt, p, self._backoff_rng)

        return self._finish_step(target, arrived_rate, departed_rate, departed_main)

    # -- internals ---------------------------------------------------------

    def _place_main(self, flow: Flow, target: float) -> LinkState:
        n_m = self.mpls.pool.n_main
        n_i = self.internet.pool.n_main
        if self.controller == "el":
            name = el_choose_link(n_m, n_i, self.params.capacity_mpls,
                                  self.params.capacity_internet)
        else:
            try:
                self._achieved = compute_action_ratio(
                    n_m, n_i, self.params.capacity_mpls, self.params.capacity_internet
                )
            except ValueError:
                pass  # keep the previous ratio
            name = choose_link(self._achieved, target, self._tie_rng)
        return self.mpls if name == MPLS else self.internet

    def _current_achieved(self) -> float:
        try:
            self._achieved = compute_action_ratio(
                self.mpls.pool.n_main, self.internet.pool.n_main,
                self.params.capacity_mpls, self.params.capacity_internet,
            )
        except ValueError:
            pass
        return self._achieved

    def _scaling(self, lam: float) -> float:
        p = self.params
        if p.scaling_mode == "online":
            self._lambda_sum += lam
            est = self._lambda_sum / (self._step_idx + 1)
            return scaling_factor(max(est, 1e-6), p.reward_alpha, p.reward_beta)
        return scaling_factor(self.config.lambda_hat, p.reward_alpha, p.reward_beta)

    def _finish_step(self, target: float, arrived_rate: float, departed_rate: float,
                     departed_main: list[tuple[float, float, str]]) -> StepOutcome:
        p = self.params
        cfg = self.config
        dt_step = cfg.step_duration

        # Apportion each link's delivered bits over its flows, proportional to
        # the bits each flow offered during the step.
        factor = {}
        for link in (self.mpls, self.internet):
            factor[link.name] = (
                link.delivered_bits / link.offered_bits if link.offered_bits > 0 else 0.0
            )
            pool = link.pool
            pool._delivered[: pool.n] = pool.offered * factor[link.name]

        sat_delivered: list[np.ndarray] = []
        sat_wanted: list[np.ndarray] = []
        demand_bits = {MPLS: 0.0, INTERNET: 0.0}
        for link in (self.mpls, self.internet):
            pool = link.pool
            main = ~pool.is_bg
            active = main & (pool.wanted > 0)
            sat_delivered.append(pool.delivered[active])
            sat_wanted.append(pool.wanted[active])
            demand_bits[link.name] += float(pool.wanted[main].sum())
        for offered, wanted, name in departed_main:
            if wanted > 0:
                f = factor[name]
                sat_delivered.append(np.array([offered * f]))
                sat_wanted.append(np.array([wanted]))
                demand_bits[name] += wanted

        delivered_all = np.concatenate(sat_delivered) if sat_delivered else np.empty(0)
        wanted_all = np.concatenate(sat_wanted) if sat_wanted else np.empty(0)

        lam = (demand_bits[MPLS] + demand_bits[INTERNET]) / (dt_step * p.capacity_total)
        lam_m = demand_bits[MPLS] / (dt_step * p.capacity_mpls)
        lam_i = demand_bits[INTERNET] / (dt_step * p.capacity_internet)
        dlam = (arrived_rate - departed_rate) / p.capacity_total

        s = self._scaling(lam)
        r_util = reward_utility(delivered_all, wanted_all, s)
        offered_total = self.mpls.offered_bits + self.internet.offered_bits
        lost_total = self.mpls.lost_bits + self.internet.lost_bits
        loss_overall = min(1.0, lost_total / offered_total) if offered_total > 0 else 0.0
        r_loss = reward_loss(loss_overall, s)

        delivered_total = self.mpls.delivered_bits + self.internet.delivered_bits
        if delivered_total > 0:
            delay_overall = (
                self.mpls.delay() * self.mpls.delivered_bits
                + self.internet.delay() * self.internet.delivered_bits
            ) / delivered_total
        else:
            delay_overall = 0.5 * (self.mpls.delay() + self.internet.delay())

        if wanted_all.size:
            satisfaction = float(np.minimum(1.0, delivered_all / wanted_all).mean())
        else:
            satisfaction = 1.0

        self._t += dt_step
        self._step_idx += 1
        self._done = self._step_idx >= cfg.steps_per_episode

        obs = self._observe(lam=lam, dlam=dlam, lam_m=lam_m, lam_i=lam_i)
        info = {
            "achieved_ratio": self._current_achieved(),
            "target_ratio": target,
            "satisfaction": satisfaction,
            "loss_overall": loss_overall,
            "delay_overall": delay_overall,
            "scaling": s,
            "n_mpls": self.mpls.pool.n_main,
            "n_internet": self.internet.pool.n_main,
            "n_background": self.internet.pool.n - self.internet.pool.n_main,
            "n_flows_step": int(wanted_all.size),
        }
        for link in (self.mpls, self.internet):
            info[f"delay_{link.name}"] = link.delay()
            info[f"loss_{link.name}"] = link.loss_ratio()
            info[f"util_{link.name}"] = link.utilization(dt_step)
            info[f"offered_{link.name}"] = link.offered_bits
            info[f"delivered_{link.name}"] = link.delivered_bits
            info[f"lost_{link.name}"] = link.lost_bits
            info[f"dqueue_{link.name}"] = link.queue_bits - link.queue_start_bits
        return StepOutcome(obs, r_util, r_loss, self._done, info)

    def _observe(self, lam: float, dlam: float, lam_m: float, lam_i: float) -> np.ndarray:
        dt_step = self.config.step_duration
        return np.array(
            [
                lam,
                dlam,
                lam_m,
                10.0 * self.mpls.delay(),
                10.0 * self.mpls.loss_ratio(),
                self.mpls.utilization(dt_step),
                lam_i,
                10.0 * self.internet.delay(),
                10.0 * self.internet.loss_ratio(),
                self.internet.utilization(dt_step),
            ]
        )


# --------------------------------------------------------------------------
# Episode traces
# --------------------------------------------------------------------------

TRACE_HEADER = (
    ["step"]
    + list(OBS_FIELDS)
    + [
        "action",
        "achieved_ratio",
        "reward_utility",
        "reward_loss",
        "delay_mpls",
        "delay_internet",
        "loss_mpls",
        "loss_internet",
        "util_mpls",
        "util_internet",
    ]
)


def trace_row(step_idx: int, action: float, outcome: StepOutcome) -> list:
    row: list = [step_idx]
    row += [float(v) for v in outcome.obs]
    row += [
        float(action),
        float(outcome.info["achieved_ratio"]),
        float(outcome.reward_utility),
        float(outcome.reward_loss),
        float(outcome.info["delay_mpls"]),
        float(outcome.info["delay_internet"]),
        float(outcome.info["loss_mpls"]),
        float(outcome.info["loss_internet"]),
        float(outcome.info["util_mpls"]),
        float(outcome.info["util_internet"]),
    ]
    return row


def write_trace_csv(path: str | Path, rows: list[list]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(TRACE_HEADER)
        for row in rows:
            writer.writerow([repr(v) if isinstance(v, float) else v for v in row])
