"""Goal-conditioned maximum-entropy actor-critic.

The actor sees the feature-space error history (plus the action history);
the twin critics see the latent-space error and the action. Actions are
tanh-squashed Gaussians scaled to per-axis bounds; network inputs and
log-probabilities use the normalized action ``a / bounds`` in (-1, 1).
"""

from __future__ import annotations

import math
import threading
from dataclasses import asdict, dataclass, field

import numpy as np
import torch
from torch import nn

from . import se3
from .latent import GaussianParams, mlp

ACTOR_LOG_STD = (-5.0, 2.0)
_SQUASH_LIMIT = 1.0 - 1e-6


# ---------------------------------------------------------------------------
# Reward
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class RewardConfig:
    goal_bonus: float = 10.0
    threshold: float = 0.05
    weights: se3.DistanceWeights = se3.DistanceWeights(c1=1.0)

    def __post_init__(self):
        if not (self.goal_bonus > 0 and self.threshold > 0):
            raise ValueError("goal bonus and threshold must be positive")

    @classmethod
    def for_workspace(cls, dims, trans_tol: float = 0.03,
                      rot_tol: float = math.radians(2.0), goal_bonus: float = 10.0) -> "RewardConfig":
        w = se3.DistanceWeights.for_workspace(dims)
        return cls(goal_bonus, w.c1 * trans_tol + w.c2 * rot_tol, w)


def compute_reward(d_prev: float, d_cur: float, cfg: RewardConfig) -> float:
    if d_cur < cfg.threshold:
        return cfg.goal_bonus
    return d_prev - d_cur


# ---------------------------------------------------------------------------
# Networks
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class AgentConfig:
    gamma: float = 0.99
    tau: float = 0.005
    init_alpha: float = 0.1
    target_entropy: float = -6.0
    batch_size: int = 32
    history: int = 3
    hidden: int = 256
    lr_actor: float = 3e-4
    lr_critic: float = 3e-4
    lr_alpha: float = 3e-4
    grad_clip: float = 10.0
    bounds: tuple[float, ...] = tuple(se3.DEFAULT_ACTION_BOUNDS.tolist())
    auto_alpha: bool = True

    def __post_init__(self):
        if not (0 < self.gamma < 1):
            raise ValueError("gamma must lie in (0, 1)")
        if not (0 < self.tau <= 1):
            raise ValueError("tau must lie in (0, 1]")
        if any(b <= 0 for b in self.bounds):
            raise ValueError("action bounds must be positive")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["bounds"] = list(self.bounds)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "AgentConfig":
        d = dict(d)
        d["bounds"] = tuple(d["bounds"])
        return cls(**d)


class Actor(nn.Module):
    def __init__(self, feature_dim: int, action_dim: int, history: int, hidden: int):
        super().__init__()
        self.net = mlp([history * (feature_dim + action_dim), hidden, hidden, 2 * action_dim])

    def forward(self, ef_hist: torch.Tensor, act_hist: torch.Tensor) -> GaussianParams:
        """ef_hist (B, T_L, d_f), act_hist (B, T_L, A) normalized."""
        x = torch.cat([ef_hist.flatten(1), act_hist.flatten(1)], -1)
        mean, raw = self.net(x).chunk(2, -1)
        return GaussianParams(mean, torch.clamp(raw, *ACTOR_LOG_STD))


class TwinCritic(nn.Module):
    def __init__(self, latent_dim: int, action_dim: int, hidden: int):
        super().__init__()
        self.q1 = mlp([latent_dim + action_dim, hidden, hidden, 1])
        self.q2 = mlp([latent_dim + action_dim, hidden, hidden, 1])

    def forward(self, e_z: torch.Tensor, a: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        x = torch.cat([e_z, a], -1)
        return self.q1(x).squeeze(-1), self.q2(x).squeeze(-1)


def squash_log_prob(u: torch.Tensor, dist: GaussianParams) -> torch.Tensor:
    """Log-density of ``tanh(u)`` for ``u ~ dist``, summed over action dims."""
    z = (u - dist.mean) / dist.std
    log_n = -0.5 * z ** 2 - dist.log_std - 0.5 * math.log(2 * math.pi)
    # log(1 - tanh(u)^2), numerically stable form
    log_jac = 2.0 * (math.log(2.0) - u - nn.functional.softplus(-2.0 * u))
    return (log_n - log_jac).sum(-1)


def sample_normalized(dist: GaussianParams, eps: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    """Reparameterized normalized action in (-1, 1) and its log-probability."""
    u = dist.sample(eps)
    a = torch.clamp(torch.tanh(u), -_SQUASH_LIMIT, _SQUASH_LIMIT)
    return a, squash_log_prob(u, dist)


def deterministic_normalized(dist: GaussianParams) -> torch.Tensor:
    return torch.clamp(torch.tanh(dist.mean), -_SQUASH_LIMIT, _SQUASH_LIMIT)


class SacAgent(nn.Module):
    """Actor (theta), critics (phi), target critics and the entropy temperature."""

    def __init__(self, cfg: AgentConfig, feature_dim: int, latent_dim: int, action_dim: int = 6):
        super().__init__()
        self.cfg = cfg
        self.actor = Actor(feature_dim, action_dim, cfg.history, cfg.hidden)
        self.critic = TwinCritic(latent_dim, action_dim, cfg.hidden)
        self.critic_target = TwinCritic(latent_dim, action_dim, cfg.hidden)
        self.critic_target.load_state_dict(self.critic.state_dict())
        for p in self.critic_target.parameters():
            p.requires_grad_(False)
        self.log_alpha = nn.Parameter(torch.tensor(math.log(cfg.init_alpha)))
        self.register_buffer("bounds", torch.tensor(cfg.bounds), persistent=False)
        self.actor_opt = torch.optim.Adam(self.actor.parameters(), lr=cfg.lr_actor)
        self.critic_opt = torch.optim.Adam(self.critic.parameters(), lr=cfg.lr_critic)
        self.alpha_opt = torch.optim.Adam([self.log_alpha], lr=cfg.lr_alpha)

    @property
    def alpha(self) -> torch.Tensor:
        return self.log_alpha.exp()

    def act(self, ef_hist: torch.Tensor, act_hist: torch.Tensor, stochastic: bool,
            gen: torch.Generator | None = None) -> np.ndarray:
        """Physical action(s) within bounds; act_hist is normalized."""
        with torch.no_grad():
            dist = self.actor(ef_hist, act_hist)
            if stochastic:
                eps = torch.randn(dist.mean.shape, generator=gen, dtype=dist.mean.dtype)
                a, _ = sample_normalized(dist, eps)
            else:
                a = deterministic_normalized(dist)
            return (a * self.bounds.to(a.dtype)).cpu().numpy().astype(np.float64)


# ---------------------------------------------------------------------------
# Losses and updates
# ---------------------------------------------------------------------------

@dataclass
class RLInputs:
    """Detached inputs to the actor/critic losses; actions normalized."""

    e_z: torch.Tensor  # (B, d1 + d2) at time t
    e_z_next: torch.Tensor  # (B, d1 + d2) at time t + 1
    ef_hist: torch.Tensor  # (B, T_L, d_f) ending at t
    ef_hist_next: torch.Tensor  # (B, T_L, d_f) ending at t + 1
    act_hist: torch.Tensor  # (B, T_L, A) actions before o_{t-T_L+1} .. o_t
    act_hist_next: torch.Tensor
    action: torch.Tensor  # (B, A)
    reward: torch.Tensor  # (B,)
    done: torch.Tensor  # (B,)


def td_target(agent: SacAgent, inp: RLInputs, eps_next: torch.Tensor) -> torch.Tensor:
    with torch.no_grad():
        dist = agent.actor(inp.ef_hist_next, inp.act_hist_next)
        a_next, logp_next = sample_normalized(dist, eps_next)
        q1, q2 = agent.critic_target(inp.e_z_next, a_next)
        v_next = torch.min(q1, q2) - agent.alpha.detach() * logp_next
        return inp.reward + agent.cfg.gamma * (1.0 - inp.done) * v_next


def critic_loss(agent: SacAgent, inp: RLInputs, eps_next: torch.Tensor) -> torch.Tensor:
    if inp.reward.numel() == 0:
        raise ValueError("empty batch")
    y = td_target(agent, inp, eps_next)
    q1, q2 = agent.critic(inp.e_z, inp.action)
    return 0.5 * (0.5 * ((q1 - y) ** 2).mean() + 0.5 * ((q2 - y) ** 2).mean())


def actor_loss(agent: SacAgent, inp: RLInputs, eps: torch.Tensor,
               alpha: torch.Tensor | None = None) -> tuple[torch.Tensor, torch.Tensor]:
    """Returns (loss, log-probabilities of the reparameterized actions)."""
    dist = agent.actor(inp.ef_hist, inp.act_hist)
    a, logp = sample_normalized(dist, eps)
    q1, q2 = agent.critic(inp.e_z, a)
    alpha = agent.alpha.detach() if alpha is None else alpha
    return (alpha * logp - torch.min(q1, q2)).mean(), logp


def _apply(params, grads, opt: torch.optim.Optimizer, clip: float) -> None:
    for p, g in zip(params, grads):
        p.grad = g
    torch.nn.utils.clip_grad_norm_(params, clip)
    opt.step()
    for p in params:
        p.grad = None


def critic_update(agent: SacAgent, inp: RLInputs, gen: torch.Generator | None = None) -> float:
    eps = torch.randn(inp.action.shape, generator=gen, dtype=inp.action.dtype)
    loss = critic_loss(agent, inp, eps)
    params = list(agent.critic.parameters())
    grads = torch.autograd.grad(loss, params)
    _apply(params, grads, agent.critic_opt, agent.cfg.grad_clip)
    return float(loss.detach())


def actor_update(agent: SacAgent, inp: RLInputs, gen: torch.Generator | None = None) -> dict:
    eps = torch.randn(inp.action.shape, generator=gen, dtype=inp.action.dtype)
    loss, logp = actor_loss(agent, inp, eps)
    params = list(agent.actor.parameters())
    grads = torch.autograd.grad(loss, params)
    _apply(params, grads, agent.actor_opt, agent.cfg.grad_clip)
    out = {"actor_loss": float(loss.detach()), "entropy": float(-logp.detach().mean())}
    if agent.cfg.auto_alpha:
        a_loss = -(agent.log_alpha * (logp.detach() + agent.cfg.target_entropy)).mean()
        (g,) = torch.autograd.grad(a_loss, [agent.log_alpha])
        _apply([agent.log_alpha], [g], agent.alpha_opt, agent.cfg.grad_clip)
        out["alpha_loss"] = float(a_loss.detach())
    out["alpha"] = float(agent.alpha.detach())
    return out


@torch.no_grad()
def soft_update(target: nn.Module, online: nn.Module, tau: float) -> nn.Module:
    t_params = list(target.parameters())
    o_params = list(online.parameters())
    if len(t_params) != len(o_params):
        raise ValueError("parameter lists differ")
    for t, o in zip(t_params, o_params):
        if t.shape != o.shape:
            raise ValueError(f"shape mismatch {tuple(t.shape)} vs {tuple(o.shape)}")
        t.lerp_(o, tau)  # exact at tau = 0 and 1, and when target == online
    return target


# ---------------------------------------------------------------------------
# Replay
# ---------------------------------------------------------------------------

@dataclass(eq=False)
class Transition:
    obs: tuple[np.ndarray, ...]  # T_L frames, oldest first, ending at o_t
    prev_actions: np.ndarray  # (T_L, A): action preceding each obs frame
    action: np.ndarray  # (A,) physical units
    reward: float
    next_obs: np.ndarray
    goal_id: int
    done: bool


@dataclass
class Batch:
    frames: np.ndarray  # (B, T_L + 1, H, W): obs history then next obs
    actions: np.ndarray  # (B, T_L + 1, A): prev actions then the action taken
    reward: np.ndarray
    done: np.ndarray
    goal_ids: np.ndarray

    def __len__(self) -> int:
        return len(self.reward)


def collate(items: list[Transition]) -> Batch:
    frames = np.stack([np.stack(list(tr.obs) + [tr.next_obs]) for tr in items])
    actions = np.stack([np.concatenate([tr.prev_actions, tr.action[None]]) for tr in items])
    return Batch(frames.astype(np.float32), actions.astype(np.float32),
                 np.array([tr.reward for tr in items], dtype=np.float32),
                 np.array([float(tr.done) for tr in items], dtype=np.float32),
                 np.array([tr.goal_id for tr in items], dtype=np.int64))


class ReplayBuffer:
    """Ring buffer of transitions; frames are shared between overlapping histories."""

    def __init__(self, capacity: int):
        if capacity < 1:
            raise ValueError("capacity must be >= 1")
        self.capacity = capacity
        self._items: list[Transition] = []
        self._next = 0
        self._lock = threading.Lock()

    def __len__(self) -> int:
        return len(self._items)

    def push(self, tr: Transition) -> None:
        with self._lock:
            if len(self._items) < self.capacity:
                self._items.append(tr)
            else:
                self._items[self._next] = tr
            self._next = (self._next + 1) % self.capacity

    def items(self) -> list[Transition]:
        """Transitions oldest first."""
        with self._lock:
            if len(self._items) < self.capacity:
                return list(self._items)
            return self._items[self._next:] + self._items[:self._next]

    def sample_indices(self, batch_size: int, rng: np.random.Generator) -> np.ndarray:
        if not self._items:
            raise ValueError("cannot sample from an empty replay buffer")
        return rng.integers(0, len(self._items), size=batch_size)

    def sample(self, batch_size: int, rng: np.random.Generator) -> Batch:
        with self._lock:
            idx = self.sample_indices(batch_size, rng)
            return collate([self._items[i] for i in idx])

    def state(self) -> dict:
        return {"capacity": self.capacity, "next": self._next}
