"""Action distributions and the actor-critic network.

Actions live in a normalized space ``[0, 1]^6`` that maps affinely onto the
joint-velocity bounds. The Beta head keeps every sample inside that box; the
Gaussian head (the PPO baseline) samples on the real line and is clipped
afterwards.

The scalar helpers here work on numpy arrays and broadcast. The network and
its training-time log-density live in torch.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
from scipy import special
from torch import nn

from . import kinematics as kin
from .errors import ConfigError, InvalidArgumentError, NumericalFailure

ETA = 1e-6
RPO_EPS = 0.1
# softplus underflows to 0 for very negative inputs; this keeps alpha, beta > 1 strictly
PARAM_FLOOR = 1e-6


def _check_beta_params(alpha, beta):
    alpha = np.asarray(alpha, dtype=float)
    beta = np.asarray(beta, dtype=float)
    if not (np.all(alpha > 1.0) and np.all(beta > 1.0)):
        raise InvalidArgumentError("Beta parameters must satisfy alpha > 1 and beta > 1")
    return alpha, beta


def _check_unit(a_n):
    a_n = np.asarray(a_n, dtype=float)
    if not np.all((a_n >= 0.0) & (a_n <= 1.0)):
        raise InvalidArgumentError("normalized action must lie in [0, 1]")
    return np.clip(a_n, ETA, 1.0 - ETA)


def beta_log_prob(a_n, alpha, beta, axis=None):
    """Log-density of Beta(alpha, beta) at ``a_n``; summed over ``axis`` when given."""
    a = _check_unit(a_n)
    alpha = np.asarray(alpha, dtype=float)
    beta = np.asarray(beta, dtype=float)
    lp = (
        special.gammaln(alpha + beta)
        - special.gammaln(alpha)
        - special.gammaln(beta)
        + (alpha - 1.0) * np.log(a)
        + (beta - 1.0) * np.log1p(-a)
    )
    return lp if axis is None else lp.sum(axis=axis)


def beta_log_prob_grad(a_n, alpha, beta):
    """Partial derivatives of :func:`beta_log_prob` w.r.t. ``(alpha, beta, a_n)``."""
    a = _check_unit(a_n)
    alpha = np.asarray(alpha, dtype=float)
    beta = np.asarray(beta, dtype=float)
    common = special.digamma(alpha + beta)
    d_alpha = common - special.digamma(alpha) + np.log(a)
    d_beta = common - special.digamma(beta) + np.log1p(-a)
    d_a = (alpha - 1.0) / a - (beta - 1.0) / (1.0 - a)
    return d_alpha, d_beta, d_a


def beta_mean(alpha, beta):
    alpha, beta = _check_beta_params(alpha, beta)
    return alpha / (alpha + beta)


def beta_sample(alpha, beta, rng: np.random.Generator):
    """Draw via the Gamma ratio X / (X + Y), kept strictly inside (0, 1)."""
    alpha, beta = _check_beta_params(alpha, beta)
    x = rng.standard_gamma(alpha)
    y = rng.standard_gamma(beta)
    return np.clip(x / (x + y), ETA, 1.0 - ETA)


def beta_entropy(alpha, beta):
    alpha, beta = _check_beta_params(alpha, beta)
    return (
        special.betaln(alpha, beta)
        - (alpha - 1.0) * special.digamma(alpha)
        - (beta - 1.0) * special.digamma(beta)
        + (alpha + beta - 2.0) * special.digamma(alpha + beta)
    )


def gaussian_log_prob(a, mu, sigma, axis=None):
    sigma = np.asarray(sigma, dtype=float)
    if not np.all(sigma > 0):
        raise InvalidArgumentError("sigma must be positive")
    z = (np.asarray(a, dtype=float) - mu) / sigma
    lp = -0.5 * z * z - np.log(sigma) - 0.5 * math.log(2.0 * math.pi)
    return lp if axis is None else lp.sum(axis=axis)


def gaussian_sample(mu, sigma, rng: np.random.Generator):
    sigma = np.asarray(sigma, dtype=float)
    if not np.all(sigma > 0):
        raise InvalidArgumentError("sigma must be positive")
    mu = np.asarray(mu, dtype=float)
    return mu + sigma * rng.standard_normal(np.broadcast_shapes(mu.shape, sigma.shape))


def _bounds(bounds):
    lo, hi = (np.asarray(b, dtype=float) for b in bounds)
    if not np.all(hi > lo):
        raise ConfigError("action bounds must satisfy lower < upper in every dimension")
    return lo, hi


def normalize_action(a, bounds):
    lo, hi = _bounds(bounds)
    return (np.asarray(a, dtype=float) - lo) / (hi - lo)


def denormalize_action(a_n, bounds):
    lo, hi = _bounds(bounds)
    # the clip only absorbs rounding at the endpoints
    return np.clip(lo + np.asarray(a_n, dtype=float) * (hi - lo), lo, hi)


def rpo_perturb(a_n, rng: np.random.Generator, eps: float = RPO_EPS):
    a_n = np.asarray(a_n, dtype=float)
    if eps == 0:
        return a_n.copy()
    return np.clip(a_n + rng.uniform(-eps, eps, size=a_n.shape), 0.0, 1.0)


class ObservationNormalizer:
    """Fixed affine rescaling of the raw 18-vector to roughly unit range.

    Joint angles map to [-1, 1] by their limits; the unbounded rotator angle is
    wrapped and divided by pi. Velocities are divided by their speed limits and
    the position error by ``dp_scale``.
    """

    def __init__(self, limits: kin.JointLimits = kin.DEFAULT_MODEL.limits, dp_scale: float = 4.0):
        lo, hi = limits.lo, limits.hi
        bounded = np.isfinite(lo) & np.isfinite(hi)
        lo, hi = np.where(bounded, lo, -np.pi), np.where(bounded, hi, np.pi)
        self.center = 0.5 * (lo + hi)
        self.half = 0.5 * (hi - lo)
        self.wrap = ~bounded
        self.speed = limits.speed
        self.dp_scale = dp_scale

    def __call__(self, obs) -> np.ndarray:
        obs = np.asarray(obs, dtype=float)
        q = obs[..., :8]
        q = np.where(self.wrap, np.mod(q + np.pi, 2 * np.pi) - np.pi, q)
        out = np.empty_like(obs)
        out[..., :8] = (q - self.center) / self.half
        out[..., 8:14] = obs[..., 8:14] / self.speed
        out[..., 14:17] = obs[..., 14:17] / self.dp_scale
        out[..., 17] = obs[..., 17]
        return out


@dataclass(frozen=True)
class PolicySpec:
    """Topology descriptor stored with checkpoints."""

    obs_dim: int = 18
    act_dim: int = 6
    hidden: tuple = (256, 256, 256, 256)
    kind: str = "beta"
    init_sigma: float = 0.5

    def __post_init__(self):
        if self.kind not in ("beta", "gaussian"):
            raise ConfigError(f"distribution kind must be 'beta' or 'gaussian', got {self.kind!r}")
        if not self.hidden or min(self.hidden) <= 0:
            raise ConfigError("hidden layer sizes must be positive")

    def as_dict(self) -> dict:
        return {**self.__dict__, "hidden": list(self.hidden)}


def torch_beta_log_prob(a_n, alpha, beta):
    """Joint log-density over the last dimension; ``a_n`` must already be clamped."""
    lp = (
        torch.lgamma(alpha + beta)
        - torch.lgamma(alpha)
        - torch.lgamma(beta)
        + (alpha - 1.0) * torch.log(a_n)
        + (beta - 1.0) * torch.log1p(-a_n)
    )
    return lp.sum(-1)


def torch_beta_entropy(alpha, beta):
    ent = (
        torch.lgamma(alpha)
        + torch.lgamma(beta)
        - torch.lgamma(alpha + beta)
        - (alpha - 1.0) * torch.digamma(alpha)
        - (beta - 1.0) * torch.digamma(beta)
        + (alpha + beta - 2.0) * torch.digamma(alpha + beta)
    )
    return ent.sum(-1)


def torch_gaussian_log_prob(a, mu, log_std):
    z = (a - mu) * torch.exp(-log_std)
    return (-0.5 * z * z - log_std - 0.5 * math.log(2.0 * math.pi)).sum(-1)


def torch_gaussian_entropy(log_std, batch_shape):
    ent = (0.5 + 0.5 * math.log(2.0 * math.pi) + log_std).sum(-1)
    return ent.expand(batch_shape)


class ActorCritic(nn.Module):
    """Shared tanh trunk with an actor head and a scalar critic head.

    Beta head: ``alpha, beta = 1 + softplus(raw)`` plus a tiny floor. The final actor layer starts
    at zero, so every dimension begins at alpha = beta = 1 + ln 2.
    Gaussian head: mean ``0.5 + raw`` in normalized units with a
    state-independent learnable log standard deviation.
    """

    def __init__(self, spec: PolicySpec = PolicySpec(), dtype=torch.float32, seed: int | None = None):
        super().__init__()
        self.spec = spec
        gen = torch.Generator().manual_seed(seed) if seed is not None else None
        layers, width = [], spec.obs_dim
        for h in spec.hidden:
            layers += [nn.Linear(width, h, dtype=dtype), nn.Tanh()]
            width = h
        self.trunk = nn.Sequential(*layers)
        n_out = 2 * spec.act_dim if spec.kind == "beta" else spec.act_dim
        self.actor = nn.Linear(width, n_out, dtype=dtype)
        self.critic = nn.Linear(width, 1, dtype=dtype)
        if spec.kind == "gaussian":
            self.log_std = nn.Parameter(torch.full((spec.act_dim,), math.log(spec.init_sigma), dtype=dtype))
        self._init(gen)

    def _init(self, gen):
        with torch.no_grad():
            for m in self.trunk:
                if isinstance(m, nn.Linear):
                    _orthogonal(m.weight, math.sqrt(2.0), gen)
                    m.bias.zero_()
            self.actor.weight.zero_()
            self.actor.bias.zero_()
            _orthogonal(self.critic.weight, 1.0, gen)
            self.critic.bias.zero_()

    @property
    def dtype(self):
        return self.critic.weight.dtype

    def forward(self, obs: torch.Tensor):
        """Returns ``(dist_params, value)``; params are ``(alpha, beta)`` or ``(mu, log_std)``."""
        h = self.trunk(obs)
        raw = self.actor(h)
        value = self.critic(h).squeeze(-1)
        if self.spec.kind == "beta":
            alpha, beta = (1.0 + PARAM_FLOOR + nn.functional.softplus(r) for r in raw.chunk(2, dim=-1))
            params = (alpha, beta)
        else:
            params = (0.5 + raw, self.log_std.expand_as(raw))
        return params, value

    def log_prob(self, params, a_n: torch.Tensor) -> torch.Tensor:
        if self.spec.kind == "beta":
            return torch_beta_log_prob(a_n.clamp(ETA, 1.0 - ETA), *params)
        return torch_gaussian_log_prob(a_n, *params)

    def entropy(self, params) -> torch.Tensor:
        if self.spec.kind == "beta":
            return torch_beta_entropy(*params)
        return torch_gaussian_entropy(self.log_std, params[0].shape[:-1])

    def numpy_forward(self, obs_n: np.ndarray):
        """Inference on normalized observations; returns float64 numpy params and values."""
        with torch.no_grad():
            params, value = self(torch.as_tensor(obs_n, dtype=self.dtype))
        out = tuple(p.detach().double().numpy() for p in params), value.double().numpy()
        if not (np.all(np.isfinite(out[0][0])) and np.all(np.isfinite(out[1]))):
            raise NumericalFailure("non-finite network output")
        return out

    def act(self, obs_n: np.ndarray, rng: np.random.Generator | None = None, rpo: bool = False):
        """Sample (or, with ``rng=None``, pick the mean of) a normalized action.

        Returns ``(a_n, behavior_log_prob, value, executed_a_n)``. The log-prob
        refers to the stored ``a_n``; for the Beta head with ``rpo`` that is
        the perturbed action. For the Gaussian head the executed action is
        clipped into [0, 1] while the stored sample stays unclipped.
        """
        params, value = self.numpy_forward(obs_n)
        if self.spec.kind == "beta":
            alpha, beta = params
            if rng is None:
                a = beta_mean(alpha, beta)
                return a, np.zeros(a.shape[:-1]), value, a
            a = beta_sample(alpha, beta, rng)
            if rpo:
                a = rpo_perturb(a, rng)
            return a, beta_log_prob(a, alpha, beta, axis=-1), value, a
        mu, log_std = params
        if rng is None:
            a = np.clip(mu, 0.0, 1.0)
            return a, np.zeros(a.shape[:-1]), value, a
        sigma = np.exp(log_std)
        a = gaussian_sample(mu, sigma, rng)
        return a, gaussian_log_prob(a, mu, sigma, axis=-1), value, np.clip(a, 0.0, 1.0)


def _orthogonal(weight: torch.Tensor, gain: float, gen) -> None:
    rows, cols = weight.shape
    flat = torch.randn(max(rows, cols), min(rows, cols), generator=gen, dtype=torch.float64)
    qm, r = torch.linalg.qr(flat)
    qm = qm * torch.sign(torch.diagonal(r))
    if rows < cols:
        qm = qm.T
    weight.copy_(gain * qm[:rows, :cols].to(weight.dtype))


def flat_parameters(net: nn.Module) -> np.ndarray:
    return torch.cat([p.detach().reshape(-1).double() for p in net.parameters()]).numpy()
