"""On-policy PPO-clip training loop: rollouts, GAE, clipped surrogate updates.

The update follows common PPO practice: one optimizer over actor, critic and
log-std, full-batch epochs over each 50-step rollout, linear learning-rate
annealing, global gradient-norm clipping.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError
from .neural import (
    Adam,
    GaussianPolicy,
    GridSpec,
    KanLayer,
    Mlp,
    clamp,
    clip_grads_,
    save_checkpoint,
)
from .simnet import OBS_DIM, EpisodeConfig, LoadBalanceEnv, SimParams


class NonFiniteLoss(RuntimeError):
    """Raised when the training loss stops being finite; carries diagnostics."""

    def __init__(self, message: str, snapshot: dict):
        super().__init__(message)
        self.snapshot = snapshot


@dataclass
class PpoConfig:
    total_steps: int = 100_000
    lr: float = 3e-3
    anneal_lr: bool = True
    gamma: float = 0.99
    gae_lambda: float = 0.95
    update_epochs: int = 16
    clip_coeff: float = 0.2
    reward_kind: str = "loss"            # "loss" | "utility"
    vf_coeff: float = 0.5
    ent_coeff: float = 3e-3
    sat_coeff: float = 0.01              # pre-clamp saturation penalty
    max_grad_norm: float = 0.5
    rollout_steps: int = 50
    seed: int = 0

    def validate(self) -> None:
        if not 0.0 < self.clip_coeff < 1.0:
            raise ConfigError("clip_coeff must be in (0, 1)")
        if self.reward_kind not in ("loss", "utility"):
            raise ConfigError(f"unknown reward_kind {self.reward_kind!r}")
        for name in ("lr", "gamma", "gae_lambda", "vf_coeff", "ent_coeff",
                     "sat_coeff", "max_grad_norm"):
            if not math.isfinite(getattr(self, name)):
                raise ConfigError(f"{name} must be finite")
        if self.total_steps < 0 or self.rollout_steps < 1:
            raise ConfigError("step counts must be positive")
        if self.update_epochs < 1:
            raise ConfigError("update_epochs must be >= 1")


@dataclass
class RolloutBuffer:
    obs: np.ndarray
    actions: np.ndarray
    log_probs: np.ndarray
    rewards: np.ndarray
    values: np.ndarray
    dones: np.ndarray                    # 1.0 when the transition ended an episode
    next_obs: np.ndarray | None = None
    advantages: np.ndarray | None = None
    returns: np.ndarray | None = None

    @classmethod
    def empty(cls, n: int, obs_dim: int = OBS_DIM) -> "RolloutBuffer":
        return cls(
            obs=np.zeros((n, obs_dim)),
            actions=np.zeros(n),
            log_probs=np.zeros(n),
            rewards=np.zeros(n),
            values=np.zeros(n),
            dones=np.zeros(n),
        )

    def __len__(self) -> int:
        return self.obs.shape[0]


class RolloutCollector:
    """Steps the environment with sampled actions, auto-resetting at episode end."""

    def __init__(self, env, policy: GaussianPolicy, critic: Mlp, config_factory,
                 reward_kind: str, seed: int):
        self.env = env
        self.policy = policy
        self.critic = critic
        self.config_factory = config_factory
        self.reward_kind = reward_kind
        streams = np.random.SeedSequence(seed).spawn(2)
        self.action_rng = np.random.default_rng(streams[0])
        self.episode_rng = np.random.default_rng(streams[1])
        self._obs: np.ndarray | None = None
        self._needs_reset = True

    def collect(self, n: int) -> RolloutBuffer:
        buf = RolloutBuffer.empty(n)
        for t in range(n):
            if self._needs_reset:
                self._obs = self.env.reset(self.config_factory(self.episode_rng))
                self._needs_reset = False
            obs = self._obs
            action, log_prob = self.policy.sample(obs, self.action_rng)
            value = float(self.critic.forward(obs[None])[0, 0])
            outcome = self.env.step(float(clamp(np.array(action))))
            reward = (outcome.reward_loss if self.reward_kind == "loss"
                      else outcome.reward_utility)
            buf.obs[t] = obs
            buf.actions[t] = action
            buf.log_probs[t] = log_prob
            buf.rewards[t] = reward
            buf.values[t] = value
            buf.dones[t] = 1.0 if outcome.done else 0.0
            self._obs = outcome.obs
            self._needs_reset = outcome.done
        buf.next_obs = self._obs.copy()
        return buf


def compute_gae(buffer: RolloutBuffer, gamma: float, gae_lambda: float,
                bootstrap_value: float) -> tuple[np.ndarray, np.ndarray]:
    """Recursive GAE; the bootstrap value is masked out after terminal steps."""
    n = len(buffer)
    adv = np.zeros(n)
    last = 0.0
    for t in range(n - 1, -1, -1):
        nonterminal = 1.0 - buffer.dones[t]
        v_next = bootstrap_value if t == n - 1 else buffer.values[t + 1]
        delta = buffer.rewards[t] + gamma * v_next * nonterminal - buffer.values[t]
        last = delta + gamma * gae_lambda * nonterminal * last
        adv[t] = last
    buffer.advantages = adv
    buffer.returns = adv + buffer.values
    return buffer.advantages, buffer.returns


def normalize_advantages(adv: np.ndarray) -> np.ndarray:
    mu = adv.mean()
    sd = adv.std()
    if sd == 0.0:
        return adv - mu
    return (adv - mu) / sd


def anneal_lr(global_step: int, config: PpoConfig) -> float:
    if not config.anneal_lr:
        return config.lr
    return config.lr * (1.0 - global_step / config.total_steps)


def surrogate_logprob_grad(ratio: np.ndarray, adv: np.ndarray,
                           clip_coeff: float) -> np.ndarray:
    """d(policy loss)/d(new log-prob) for the clipped surrogate.

    The loss is -mean(min(ratio*A, clip(ratio)*A)); the gradient flows only
    through whichever branch attains the min, and the clipped branch passes
    gradient only while the ratio is strictly inside the clip band.
    """
    n = ratio.size
    unclipped = ratio * adv
    clipped = np.clip(ratio, 1.0 - clip_coeff, 1.0 + clip_coeff) * adv
    use_unclipped = unclipped <= clipped
    in_band = (ratio > 1.0 - clip_coeff) & (ratio < 1.0 + clip_coeff)
    active = use_unclipped | in_band
    return -(adv * ratio * active) / n


def ppo_update(policy: GaussianPolicy, critic: Mlp, buffer: RolloutBuffer,
               config: PpoConfig, optimizer: Adam, lr: float) -> dict:
    """Run the configured number of full-batch epochs on one rollout."""
    adv = normalize_advantages(buffer.advantages)
    obs = buffer.obs
    actions = buffer.actions
    old_log_probs = buffer.log_probs
    returns = buffer.returns
    n = len(buffer)
    stats: dict = {}

    for epoch in range(config.update_epochs):
        new_log_probs = policy.log_prob(obs, actions)
        log_ratio = new_log_probs - old_log_probs
        ratio = np.exp(log_ratio)
        if epoch == 0:
            stats["ratio_dev_first_epoch"] = float(np.abs(ratio - 1.0).max())

        unclipped = ratio * adv
        clipped = np.clip(ratio, 1.0 - config.clip_coeff, 1.0 + config.clip_coeff) * adv
        pg_loss = float(-np.minimum(unclipped, clipped).mean())

        values = critic.forward(obs)[:, 0]
        v_loss = float(0.5 * np.mean((values - returns) ** 2))
        entropy = policy.entropy()
        # Restoring force where the clamp's gradient is dead: penalize the
        # pre-clamp mean beyond the rails (behavior there is identical, so
        # this only breaks the tie toward parameterizations that can learn).
        raw = policy.last_raw()
        excess = np.maximum(np.abs(raw) - 1.0, 0.0)
        sat_loss = float(np.mean(excess**2))
        loss = (pg_loss + config.vf_coeff * v_loss - config.ent_coeff * entropy
                + config.sat_coeff * sat_loss)
        if not math.isfinite(loss):
            raise NonFiniteLoss(
                "training loss is not finite",
                {
                    "epoch": epoch,
                    "pg_loss": pg_loss,
                    "v_loss": v_loss,
                    "log_std": float(policy.log_std),
                    "ratio_max": float(np.max(ratio)),
                    "adv_absmax": float(np.max(np.abs(adv))),
                },
            )

        d_logprob = surrogate_logprob_grad(ratio, adv, config.clip_coeff)
        d_raw = config.sat_coeff * 2.0 * excess * np.sign(raw) / n
        grads = policy.backward_log_prob(d_logprob, raw_grad=d_raw)
        grads = {f"actor.{k}": v for k, v in grads.items()}
        grads["actor.log_std"] = grads.pop("actor.log_std") - config.ent_coeff

        d_values = config.vf_coeff * (values - returns) / n
        critic_grads, _ = critic.backward(d_values[:, None])
        for k, v in critic_grads.items():
            grads[f"critic.{k}"] = v

        clip_grads_(grads, config.max_grad_norm)
        optimizer.step(grads, lr)

        with np.errstate(over="ignore"):
            approx_kl = float(np.mean((ratio - 1.0) - log_ratio))
        clip_frac = float(np.mean(np.abs(ratio - 1.0) > config.clip_coeff))
        stats.update({
            "policy_loss": pg_loss,
            "value_loss": v_loss,
            "entropy": entropy,
            "approx_kl": approx_kl,
            "clip_frac": clip_frac,
        })
    return stats


@dataclass
class TrainResult:
    policy: GaussianPolicy
    critic: Mlp
    actor_kind: str
    config: PpoConfig
    log: list[dict] = field(default_factory=list)
    checkpoint_path: Path | None = None
    log_path: Path | None = None


TRAIN_LOG_HEADER = ["step", "mean_reward", "policy_loss", "value_loss",
                    "approx_kl", "clip_frac", "lr"]


def write_training_log(path: str | Path, rows: list[dict]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(TRAIN_LOG_HEADER)
        for row in rows:
            writer.writerow([repr(float(row[k])) if k != "step" else row[k]
                             for k in TRAIN_LOG_HEADER])


def train_loop(env, policy: GaussianPolicy, critic: Mlp, config: PpoConfig,
               config_factory, actor_kind: str = "custom",
               out_dir: str | Path | None = None) -> TrainResult:
    """Core loop shared by full training and symbolic fine-tuning."""
    config.validate()
    collector = RolloutCollector(env, policy, critic, config_factory,
                                 config.reward_kind, config.seed)
    params = {f"actor.{k}": v for k, v in policy.parameters().items()}
    for k, v in critic.parameters().items():
        params[f"critic.{k}"] = v
    optimizer = Adam(params)

    result = TrainResult(policy, critic, actor_kind, config)
    out_dir = Path(out_dir) if out_dir is not None else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)

    n_iters = config.total_steps // config.rollout_steps
    last_good = {k: v.copy() for k, v in params.items()}
    try:
        for it in range(n_iters):
            global_step = it * config.rollout_steps
            lr = anneal_lr(global_step, config)
            buffer = collector.collect(config.rollout_steps)
            bootstrap = float(critic.forward(buffer.next_obs[None])[0, 0])
            compute_gae(buffer, config.gamma, config.gae_lambda, bootstrap)
            for k, v in params.items():
                last_good[k][...] = v
            stats = ppo_update(policy, critic, buffer, config, optimizer, lr)
            result.log.append({
                "step": global_step + config.rollout_steps,
                "mean_reward": float(buffer.rewards.mean()),
                "policy_loss": stats["policy_loss"],
                "value_loss": stats["value_loss"],
                "approx_kl": stats["approx_kl"],
                "clip_frac": stats["clip_frac"],
                "lr": lr,
            })
    except NonFiniteLoss as exc:
        for k, v in params.items():
            v[...] = last_good[k]
        if out_dir is not None:
            path = save_checkpoint(out_dir / "checkpoint_last_good.json", actor_kind,
                                   policy, critic, meta={"aborted": True,
                                                         "snapshot": exc.snapshot})
            result.checkpoint_path = path
            write_training_log(out_dir / "training_log.csv", result.log)
            result.log_path = out_dir / "training_log.csv"
        raise

    if out_dir is not None:
        result.checkpoint_path = save_checkpoint(
            out_dir / "checkpoint.json", actor_kind, policy, critic,
            meta={"config": vars(config).copy(), "actor_kind": actor_kind},
        )
        result.log_path = out_dir / "training_log.csv"
        write_training_log(result.log_path, result.log)
    return result


def train(params: SimParams, config: PpoConfig, actor_kind: str,
          grid: GridSpec | None = None, mlp_hidden: tuple[int, ...] = (64, 64),
          init_log_std: float = 0.0, coeff_std: float = 0.1,
          w_base_init: float = 0.1, w_spline_init: float = 1.0,
          out_dir: str | Path | None = None) -> TrainResult:
    """Train a policy on the load-balancing environment."""
    config.validate()
    if actor_kind not in ("kan", "mlp"):
        raise ConfigError(f"unknown actor kind {actor_kind!r}")
    init_rng = np.random.default_rng(np.random.SeedSequence([config.seed, 1]))
    if actor_kind == "kan":
        net = KanLayer(OBS_DIM, 1, grid=grid or GridSpec(), rng=init_rng,
                       coeff_std=coeff_std, w_base_init=w_base_init,
                       w_spline_init=w_spline_init)
    else:
        net = Mlp((OBS_DIM, *mlp_hidden, 1), rng=init_rng)
    policy = GaussianPolicy(net, log_std=init_log_std)
    critic = Mlp((OBS_DIM, 64, 64, 1), rng=init_rng)
    env = LoadBalanceEnv(params)

    def config_factory(rng: np.random.Generator) -> EpisodeConfig:
        return EpisodeConfig.random(params, rng)

    return train_loop(env, policy, critic, config, config_factory,
                      actor_kind=actor_kind, out_dir=out_dir)
