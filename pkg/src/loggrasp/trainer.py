"""PPO training loop for the Beta-head policy (mPPO) and the Gaussian baseline.

One update round collects ``n_envs * rollout_len`` transitions, computes
generalized advantage estimates, then runs ``epochs`` passes of shuffled
minibatch Adam steps on the clipped surrogate plus value and entropy terms.
``total_steps`` counts agent transitions, so a run performs
``total_steps // (n_envs * rollout_len)`` rounds.
"""

from __future__ import annotations

import copy
import hashlib
import json
import logging
import os
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch

from . import env as genv
from .errors import CheckpointError, ConfigError, NumericalFailure
from .policy import ActorCritic, ObservationNormalizer, PolicySpec, denormalize_action

log = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1
TIMING_FIELDS = ("steps_per_sec", "wall_time")


@dataclass(frozen=True)
class TrainConfig:
    total_steps: int = 500_000_000
    learning_rate: float = 3e-4
    epochs: int = 30
    clip_ratio: float = 0.2
    gamma: float = 0.99
    gae_lambda: float = 0.95
    value_coef: float = 0.5
    entropy_coef: float = 0.01
    minibatch_size: int = 4096
    max_grad_norm: float = 0.5
    n_envs: int = 42
    rollout_len: int = 1000
    algo: str = "mppo"
    rpo: bool | None = None
    hidden: tuple = (256, 256, 256, 256)
    init_sigma: float = 0.5
    seed: int = 0
    checkpoint_every: int = 50
    float64: bool = False
    # multiplies rewards before GAE so value targets stay O(1); metrics stay unscaled
    reward_scale: float = 0.01

    def __post_init__(self):
        if not 0.0 < self.gamma < 1.0:
            raise ConfigError("gamma must lie in (0, 1)")
        if not 0.0 <= self.gae_lambda <= 1.0:
            raise ConfigError("gae_lambda must lie in [0, 1]")
        if self.clip_ratio <= 0:
            raise ConfigError("clip_ratio must be positive")
        if self.algo not in ("mppo", "ppo"):
            raise ConfigError(f"algo must be 'mppo' or 'ppo', got {self.algo!r}")
        for name in ("n_envs", "rollout_len", "epochs", "minibatch_size", "checkpoint_every"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive")
        if self.learning_rate <= 0 or self.max_grad_norm <= 0:
            raise ConfigError("learning_rate and max_grad_norm must be positive")
        if self.reward_scale <= 0:
            raise ConfigError("reward_scale must be positive")

    @property
    def kind(self) -> str:
        return "beta" if self.algo == "mppo" else "gaussian"

    @property
    def use_rpo(self) -> bool:
        # plain PPO never perturbs; mPPO does unless switched off
        if self.algo == "ppo":
            return False
        return True if self.rpo is None else bool(self.rpo)

    @property
    def batch_size(self) -> int:
        return self.n_envs * self.rollout_len

    @property
    def n_updates(self) -> int:
        return self.total_steps // self.batch_size

    def policy_spec(self) -> PolicySpec:
        return PolicySpec(hidden=tuple(self.hidden), kind=self.kind, init_sigma=self.init_sigma)


@dataclass
class RolloutBuffer:
    """Transitions stored ``(n_envs, rollout_len, ...)``; flattening is env-major."""

    obs: np.ndarray
    actions: np.ndarray
    log_probs: np.ndarray
    rewards: np.ndarray
    values: np.ndarray
    dones: np.ndarray
    reasons: np.ndarray
    last_values: np.ndarray
    advantages: np.ndarray | None = None
    returns: np.ndarray | None = None
    episodes: list = field(default_factory=list)

    @classmethod
    def empty(cls, n_envs: int, length: int, obs_dim: int = genv.OBS_DIM, act_dim: int = genv.ACT_DIM):
        z = lambda *s: np.zeros((n_envs, length) + s)
        return cls(z(obs_dim), z(act_dim), z(), z(), z(), z(), np.zeros((n_envs, length), np.int8), np.zeros(n_envs))

    def __len__(self) -> int:
        return self.rewards.size

    def flat(self, name: str) -> np.ndarray:
        v = getattr(self, name)
        return v.reshape((v.shape[0] * v.shape[1],) + v.shape[2:])

    def digest(self) -> str:
        h = hashlib.sha256()
        for name in ("obs", "actions", "log_probs", "rewards", "values", "dones", "reasons", "last_values"):
            h.update(np.ascontiguousarray(getattr(self, name)).tobytes())
        return h.hexdigest()


def collect_rollouts(vec: genv.VecGraspEnv, net: ActorCritic, rollout_len: int, rng: np.random.Generator,
                     rpo: bool = False, normalizer: ObservationNormalizer | None = None,
                     deterministic: bool = False) -> RolloutBuffer:
    """Step every environment ``rollout_len`` times under ``net``.

    Episodes still running at the end are bootstrapped with ``last_values``.
    """
    normalizer = normalizer or ObservationNormalizer(vec.cfg.limits)
    bounds = genv.action_bounds(vec.cfg)
    buf = RolloutBuffer.empty(vec.n, rollout_len)
    for t in range(rollout_len):
        obs_n = normalizer(vec.obs)
        a, logp, value, executed = net.act(obs_n, None if deterministic else rng, rpo=rpo)
        _, rew, codes, finished = vec.step(denormalize_action(executed, bounds))
        buf.obs[:, t] = obs_n
        buf.actions[:, t] = a
        buf.log_probs[:, t] = logp
        buf.values[:, t] = value
        buf.rewards[:, t] = rew
        buf.dones[:, t] = codes != 0
        buf.reasons[:, t] = codes
        buf.episodes.extend(finished)
    buf.last_values = net.numpy_forward(normalizer(vec.obs))[1]
    return buf


def compute_gae(rewards, values, dones, last_values, gamma: float, lam: float):
    """Advantages and returns along the last axis; ``dones[t]`` cuts the trace after step t."""
    rewards = np.asarray(rewards, dtype=float)
    values = np.asarray(values, dtype=float)
    notdone = 1.0 - np.asarray(dones, dtype=float)
    adv = np.zeros_like(rewards)
    next_value = np.asarray(last_values, dtype=float)
    running = np.zeros(rewards.shape[:-1])
    for t in range(rewards.shape[-1] - 1, -1, -1):
        delta = rewards[..., t] + gamma * next_value * notdone[..., t] - values[..., t]
        running = delta + gamma * lam * notdone[..., t] * running
        adv[..., t] = running
        next_value = values[..., t]
    return adv, adv + values


def normalize_advantages(adv) -> np.ndarray:
    adv = np.asarray(adv, dtype=float)
    std = adv.std()
    centered = adv - adv.mean()
    if std < 1e-12:
        return np.zeros_like(adv)
    return centered / std


def make_optimizer(net: torch.nn.Module, lr: float) -> torch.optim.Optimizer:
    return torch.optim.Adam(net.parameters(), lr=lr, betas=(0.9, 0.999), eps=1e-8)


def ppo_loss(net: ActorCritic, obs, actions, old_log_probs, advantages, returns, cfg: TrainConfig):
    """Clipped-surrogate loss; returns ``(loss, stats)`` with stats as python floats."""
    params, value = net(obs)
    logp = net.log_prob(params, actions)
    ratio = torch.exp(logp - old_log_probs)
    surr1 = ratio * advantages
    surr2 = torch.clamp(ratio, 1.0 - cfg.clip_ratio, 1.0 + cfg.clip_ratio) * advantages
    surrogate = torch.minimum(surr1, surr2).mean()
    value_loss = ((value - returns) ** 2).mean()
    entropy = net.entropy(params).mean()
    loss = -surrogate + cfg.value_coef * value_loss - cfg.entropy_coef * entropy
    with torch.no_grad():
        clip_frac = ((ratio - 1.0).abs() > cfg.clip_ratio).double().mean()
    stats = {
        "surrogate": float(surrogate.detach()),
        "policy_loss": -float(surrogate.detach()),
        "value_loss": float(value_loss.detach()),
        "entropy": float(entropy.detach()),
        "clip_fraction": float(clip_frac),
    }
    return loss, stats


def ppo_update(buf: RolloutBuffer, net: ActorCritic, optimizer: torch.optim.Optimizer, cfg: TrainConfig,
               rng: np.random.Generator) -> dict:
    """Optimize on one buffer. A non-finite loss restores the pre-update weights and optimizer."""
    if buf.advantages is None:
        raise ConfigError("compute advantages before the update")
    dt = net.dtype
    as_t = lambda x: torch.as_tensor(np.ascontiguousarray(x), dtype=dt)
    obs, actions = as_t(buf.flat("obs")), as_t(buf.flat("actions"))
    old_logp = as_t(buf.flat("log_probs"))
    adv = as_t(normalize_advantages(buf.flat("advantages")))
    ret = as_t(buf.flat("returns"))
    n = len(buf)
    mb = min(cfg.minibatch_size, n)
    saved_net = copy.deepcopy(net.state_dict())
    saved_opt = copy.deepcopy(optimizer.state_dict())
    totals: dict[str, float] = {}
    count = 0
    for _ in range(cfg.epochs):
        perm = torch.as_tensor(rng.permutation(n))
        for start in range(0, n - mb + 1, mb):
            idx = perm[start:start + mb]
            loss, stats = ppo_loss(net, obs[idx], actions[idx], old_logp[idx], adv[idx], ret[idx], cfg)
            if not torch.isfinite(loss):
                net.load_state_dict(saved_net)
                optimizer.load_state_dict(saved_opt)
                log.error("non-finite loss; update aborted and parameters restored")
                return {"aborted": True}
            optimizer.zero_grad()
            loss.backward()
            torch.nn.utils.clip_grad_norm_(net.parameters(), cfg.max_grad_norm)
            optimizer.step()
            for k, v in stats.items():
                totals[k] = totals.get(k, 0.0) + v
            count += 1
    for p in net.parameters():
        if not torch.all(torch.isfinite(p)):
            net.load_state_dict(saved_net)
            optimizer.load_state_dict(saved_opt)
            log.error("non-finite parameters after update; restored")
            return {"aborted": True}
    if net.spec.kind == "beta":
        with torch.no_grad():
            (alpha, beta), _ = net(obs[: min(n, 4096)])
        assert bool((alpha > 1).all() and (beta > 1).all()), "Beta parameters fell to the floor"
    out = {k: v / count for k, v in totals.items()}
    out.pop("surrogate", None)
    out["aborted"] = False
    return out


@dataclass
class Trainer:
    """Owns the network, optimizer, environments and random streams of one run."""

    cfg: TrainConfig
    env_cfg: genv.EnvConfig = field(default_factory=genv.EnvConfig)

    def __post_init__(self):
        torch.manual_seed(self.cfg.seed)
        dtype = torch.float64 if self.cfg.float64 else torch.float32
        self.net = ActorCritic(self.cfg.policy_spec(), dtype=dtype, seed=self.cfg.seed)
        self.optimizer = make_optimizer(self.net, self.cfg.learning_rate)
        seeds = np.random.SeedSequence(self.cfg.seed).spawn(2)
        self.vec = genv.VecGraspEnv(self.cfg.n_envs, self.env_cfg, seed=int(seeds[0].generate_state(1)[0]))
        self.rng = np.random.default_rng(seeds[1])
        self.normalizer = ObservationNormalizer(self.env_cfg.limits)
        self.update = 0
        self.metrics: list[dict] = []

    def run_update(self) -> dict:
        t0 = time.perf_counter()
        buf = collect_rollouts(self.vec, self.net, self.cfg.rollout_len, self.rng, self.cfg.use_rpo, self.normalizer)
        buf.advantages, buf.returns = compute_gae(
            self.cfg.reward_scale * buf.rewards, buf.values, buf.dones, buf.last_values, self.cfg.gamma, self.cfg.gae_lambda
        )
        stats = ppo_update(buf, self.net, self.optimizer, self.cfg, self.rng)
        if stats.get("aborted"):
            raise NumericalFailure(f"update {self.update + 1} produced a non-finite loss")
        elapsed = time.perf_counter() - t0
        self.update += 1
        returns = [e["return"] for e in buf.episodes]
        lengths = [e["length"] for e in buf.episodes]
        reasons = [int(e["reason"]) for e in buf.episodes]
        entry = {
            "update": self.update,
            "steps": self.update * self.cfg.batch_size,
            "episodes": len(returns),
            "mean_episode_reward": float(np.mean(returns)) if returns else None,
            "mean_episode_length": float(np.mean(lengths)) if lengths else None,
            "mean_step_reward": float(buf.rewards.mean()),
            "success_episodes": reasons.count(int(genv.TerminationReason.Success)),
            **stats,
            "steps_per_sec": self.cfg.batch_size / elapsed,
            "wall_time": elapsed,
        }
        entry.pop("aborted", None)
        self.metrics.append(entry)
        return entry

    def state_dict(self) -> dict:
        return {
            "version": CHECKPOINT_VERSION,
            "topology": self.net.spec.as_dict(),
            "dtype": str(self.net.dtype),
            "train_config": asdict(self.cfg),
            "weights": {k: v.detach().double().clone() for k, v in self.net.state_dict().items()},
            "optimizer": self.optimizer.state_dict(),
            "rng": self.rng.bit_generator.state,
            "env": self.vec.snapshot(),
            "update": self.update,
            "metrics": self.metrics,
        }

    def save(self, path) -> Path:
        path = Path(path)
        try:
            path.parent.mkdir(parents=True, exist_ok=True)
            tmp = path.with_suffix(path.suffix + ".tmp")
            torch.save(self.state_dict(), tmp)
            os.replace(tmp, path)
        except OSError as exc:
            raise CheckpointError(f"could not write checkpoint {path}: {exc}") from exc
        return path

    def load_state(self, ckpt: dict) -> None:
        check_compatible(ckpt, self.net.spec)
        self.net.load_state_dict({k: v.to(self.net.dtype) for k, v in ckpt["weights"].items()})
        self.optimizer.load_state_dict(ckpt["optimizer"])
        self.rng.bit_generator.state = ckpt["rng"]
        self.vec.restore(ckpt["env"])
        self.update = int(ckpt["update"])
        self.metrics = list(ckpt["metrics"])


def read_checkpoint(path) -> dict:
    try:
        ckpt = torch.load(Path(path), map_location="cpu", weights_only=False)
    except FileNotFoundError as exc:
        raise CheckpointError(f"checkpoint not found: {path}") from exc
    except Exception as exc:  # torch raises several unrelated types for corrupt files
        raise CheckpointError(f"could not read checkpoint {path}: {exc}") from exc
    if not isinstance(ckpt, dict) or ckpt.get("version") != CHECKPOINT_VERSION:
        found = ckpt.get("version") if isinstance(ckpt, dict) else None
        raise CheckpointError(f"checkpoint version {found!r} is not supported (expected {CHECKPOINT_VERSION})")
    return ckpt


def check_compatible(ckpt: dict, spec: PolicySpec) -> None:
    if ckpt["topology"] != spec.as_dict():
        raise CheckpointError(f"checkpoint topology {ckpt['topology']} does not match {spec.as_dict()}")


def load_policy(path) -> ActorCritic:
    """Network from a checkpoint, in float64 for evaluation."""
    ckpt = read_checkpoint(path)
    topo = dict(ckpt["topology"])
    topo["hidden"] = tuple(topo["hidden"])
    net = ActorCritic(PolicySpec(**topo), dtype=torch.float64)
    net.load_state_dict(ckpt["weights"])
    return net


def metrics_digest(metrics: list[dict]) -> str:
    """Hash of the metric stream with wall-clock fields removed."""
    clean = [{k: v for k, v in m.items() if k not in TIMING_FIELDS} for m in metrics]
    return hashlib.sha256(json.dumps(clean, sort_keys=True).encode()).hexdigest()


def train(cfg: TrainConfig, env_cfg: genv.EnvConfig = genv.EnvConfig(), log_dir=None, checkpoint_dir=None,
          resume=None, stop_after: int | None = None, progress=None) -> Trainer:
    """Run (or continue) training; appends one JSON line per update to ``log_dir/metrics.jsonl``.

    ``stop_after`` halts after that many total updates, which is how tests
    simulate an interrupted run.
    """
    trainer = Trainer(cfg, env_cfg)
    if resume is not None:
        trainer.load_state(read_checkpoint(resume))
    metrics_path = Path(log_dir) / "metrics.jsonl" if log_dir else None
    if metrics_path:
        try:
            metrics_path.parent.mkdir(parents=True, exist_ok=True)
            with open(metrics_path, "w") as fh:
                for m in trainer.metrics:
                    fh.write(json.dumps(m) + "\n")
        except OSError as exc:
            raise CheckpointError(f"cannot write metrics log {metrics_path}: {exc}") from exc
    last = cfg.n_updates if stop_after is None else min(stop_after, cfg.n_updates)
    ckpt_dir = Path(checkpoint_dir) if checkpoint_dir else None
    while trainer.update < last:
        entry = trainer.run_update()
        if metrics_path:
            with open(metrics_path, "a") as fh:
                fh.write(json.dumps(entry) + "\n")
        if progress:
            progress(entry)
        if ckpt_dir and (trainer.update % cfg.checkpoint_every == 0 or trainer.update == cfg.n_updates):
            trainer.save(ckpt_dir / f"ckpt_{trainer.update:06d}.pt")
            trainer.save(ckpt_dir / "latest.pt")
    return trainer


def format_progress(entry: dict) -> str:
    r = entry["mean_episode_reward"]
    shown = "n/a" if r is None else f"{r:9.2f}"
    return (
        f"update {entry['update']:5d}  steps {entry['steps']:9d}  mean reward {shown}"
        f"  steps/s {entry['steps_per_sec']:8.1f}"
    )
