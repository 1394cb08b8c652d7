"""Sequential stochastic latent model: encoder, two-level latents, decoder.

Latent factorization (per time step t):

    z1_1 ~ q(z1 | f_1)                 prior  p(z1_1)         = N(0, I)
    z2_1 ~ p(z2 | z1_1)
    z1_t ~ q(z1 | f_t, z2_{t-1}, a_{t-1})    prior  p(z1 | z2_{t-1}, a_{t-1})
    z2_t ~ p(z2 | z1_t, z2_{t-1}, a_{t-1})
    x_t  ~ N(decoder(z1_t, z2_t), sigma_dec^2)

All network inputs take actions already divided by the per-axis bounds.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import NamedTuple

import torch
from torch import nn

LOG_STD_MIN = -8.0
LOG_STD_MAX = 2.0


@dataclass(frozen=True)
class ModelConfig:
    image_size: int = 64
    feature_dim: int = 64
    z1_dim: int = 16
    z2_dim: int = 64
    action_dim: int = 6
    hidden: int = 128
    conv_channels: tuple[int, ...] = (16, 32, 32, 64)
    base_log_std: float = 0.0
    decoder_std: float = 0.1

    @classmethod
    def micro(cls) -> "ModelConfig":
        return cls(image_size=8, feature_dim=8, z1_dim=4, z2_dim=8, hidden=8,
                   conv_channels=(2, 2, 3, 3))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["conv_channels"] = list(self.conv_channels)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        d["conv_channels"] = tuple(d["conv_channels"])
        return cls(**d)


class GaussianParams(NamedTuple):
    mean: torch.Tensor
    log_std: torch.Tensor

    @property
    def std(self) -> torch.Tensor:
        return self.log_std.exp()

    def sample(self, eps: torch.Tensor) -> torch.Tensor:
        return self.mean + self.std * eps


def kl_diag_gaussians(q: GaussianParams, p: GaussianParams) -> torch.Tensor:
    """KL(q || p) for diagonal Gaussians, summed over the last dimension."""
    if q.mean.shape[-1] != p.mean.shape[-1]:
        raise ValueError("KL between Gaussians of different dimension")
    var_ratio = torch.exp(2.0 * (q.log_std - p.log_std))
    mahal = ((q.mean - p.mean) / p.std) ** 2
    return 0.5 * (var_ratio + mahal - 1.0).sum(-1) + (p.log_std - q.log_std).sum(-1)


def mlp(sizes, act=nn.ELU) -> nn.Sequential:
    layers = []
    for i in range(len(sizes) - 1):
        layers.append(nn.Linear(sizes[i], sizes[i + 1]))
        if i < len(sizes) - 2:
            layers.append(act())
    return nn.Sequential(*layers)


class GaussianHead(nn.Module):
    def __init__(self, in_dim: int, out_dim: int, hidden: int, base_log_std: float = 0.0):
        super().__init__()
        self.net = mlp([in_dim, hidden, hidden, 2 * out_dim])
        self.base_log_std = base_log_std

    def forward(self, *inputs: torch.Tensor) -> GaussianParams:
        out = self.net(torch.cat(inputs, dim=-1))
        mean, raw = out.chunk(2, dim=-1)
        return GaussianParams(mean, torch.clamp(raw + self.base_log_std, LOG_STD_MIN, LOG_STD_MAX))


class Encoder(nn.Module):
    """Four stride-2 3x3 convolutions and a linear projection."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        layers, c_in = [], 1
        for c in cfg.conv_channels:
            layers += [nn.Conv2d(c_in, c, 3, stride=2, padding=1), nn.ELU()]
            c_in = c
        self.conv = nn.Sequential(*layers)
        with torch.no_grad():
            n = self.conv(torch.zeros(1, 1, cfg.image_size, cfg.image_size)).numel()
        self.fc = nn.Linear(n, cfg.feature_dim)
        self.image_size = cfg.image_size

    def forward(self, img: torch.Tensor) -> torch.Tensor:
        """(..., H, W) -> (..., feature_dim)"""
        s = self.image_size
        if img.shape[-2:] != (s, s):
            raise ValueError(f"expected {s}x{s} images, got {tuple(img.shape[-2:])}")
        lead = img.shape[:-2]
        x = self.conv(img.reshape(-1, 1, s, s))
        return self.fc(x.flatten(1)).reshape(*lead, -1)


class Decoder(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        s = cfg.image_size
        n_up = min(4, int(round(math.log2(s))) - 1)
        self.base = s // 2 ** n_up
        chans = list(reversed(cfg.conv_channels))[:n_up] + [1]
        self.c0 = chans[0]
        self.fc = nn.Linear(cfg.z1_dim + cfg.z2_dim, chans[0] * self.base ** 2)
        layers = [nn.ELU()]
        for i in range(n_up):
            layers.append(nn.ConvTranspose2d(chans[i], chans[i + 1], 4, stride=2, padding=1))
            if i < n_up - 1:
                layers.append(nn.ELU())
        self.deconv = nn.Sequential(*layers)
        self.image_size = s

    def forward(self, z1: torch.Tensor, z2: torch.Tensor) -> torch.Tensor:
        """Image mean in [0, 1]; (..., d1), (..., d2) -> (..., H, W)"""
        lead = z1.shape[:-1]
        h = self.fc(torch.cat([z1, z2], -1)).reshape(-1, self.c0, self.base, self.base)
        x = torch.sigmoid(self.deconv(h))
        return x.reshape(*lead, self.image_size, self.image_size)


class LatentModel(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        d1, d2, a, f, h = cfg.z1_dim, cfg.z2_dim, cfg.action_dim, cfg.feature_dim, cfg.hidden
        b = cfg.base_log_std
        self.encoder = Encoder(cfg)
        self.q1_first = GaussianHead(f, d1, h, b)
        self.p2_first = GaussianHead(d1, d2, h, b)
        self.q1 = GaussianHead(f + d2 + a, d1, h, b)
        self.p1 = GaussianHead(d2 + a, d1, h, b)
        self.p2 = GaussianHead(d1 + d2 + a, d2, h, b)
        self.decoder = Decoder(cfg)

    def p1_first(self, like: torch.Tensor) -> GaussianParams:
        shape = like.shape[:-1] + (self.cfg.z1_dim,)
        return GaussianParams(like.new_zeros(shape), like.new_zeros(shape))


@dataclass
class PosteriorSequence:
    z1: torch.Tensor  # (B, T, d1)
    z2: torch.Tensor  # (B, T, d2)
    post1: GaussianParams  # stacked over T
    prior1: GaussianParams  # stacked over T; step 0 is p(z1_1)


def draw_noise(model: LatentModel, batch_shape, T: int, gen: torch.Generator | None,
               dtype=None) -> tuple[torch.Tensor, torch.Tensor]:
    cfg = model.cfg
    dtype = dtype or next(model.parameters()).dtype
    e1 = torch.randn(*batch_shape, T, cfg.z1_dim, generator=gen, dtype=dtype)
    e2 = torch.randn(*batch_shape, T, cfg.z2_dim, generator=gen, dtype=dtype)
    return e1, e2


def infer_posterior_sequence(model: LatentModel, features: torch.Tensor, actions: torch.Tensor,
                             gen: torch.Generator | None = None, eps=None,
                             mean: bool = False) -> PosteriorSequence:
    """Filter latents along ``features`` (B, T, d_f) with ``actions`` (B, T-1, A).

    Sampling uses ``eps`` if given, otherwise noise from ``gen``; ``mean=True``
    propagates distribution means instead of samples.
    """
    B, T = features.shape[:2]
    if actions.shape[1] != T - 1:
        raise ValueError("need exactly T-1 actions for T features")
    if eps is None and not mean:
        eps = draw_noise(model, (B,), T, gen, features.dtype)

    def pick(g: GaussianParams, which: int, t: int) -> torch.Tensor:
        return g.mean if mean else g.sample(eps[which][:, t])

    q = model.q1_first(features[:, 0])
    prior = model.p1_first(q.mean)
    z1 = pick(q, 0, 0)
    z2 = pick(model.p2_first(z1), 1, 0)
    z1s, z2s, posts, priors = [z1], [z2], [q], [prior]
    for t in range(1, T):
        a = actions[:, t - 1]
        prior = model.p1(z2, a)
        q = model.q1(features[:, t], z2, a)
        z1 = pick(q, 0, t)
        z2 = pick(model.p2(z1, z2, a), 1, t)
        z1s.append(z1)
        z2s.append(z2)
        posts.append(q)
        priors.append(prior)

    def stack(gs):
        return GaussianParams(torch.stack([g.mean for g in gs], 1),
                              torch.stack([g.log_std for g in gs], 1))

    return PosteriorSequence(torch.stack(z1s, 1), torch.stack(z2s, 1), stack(posts), stack(priors))


def prior_step(model: LatentModel, z2: torch.Tensor, a: torch.Tensor) -> GaussianParams:
    return model.p1(z2, a)


def decode(model: LatentModel, z1: torch.Tensor, z2: torch.Tensor) -> torch.Tensor:
    return model.decoder(z1, z2)


def gaussian_nll(x: torch.Tensor, mean: torch.Tensor, std: float) -> torch.Tensor:
    """Per-image negative log-likelihood, summed over the last two dims."""
    se = ((x - mean) / std) ** 2
    return (0.5 * se + math.log(std) + 0.5 * math.log(2 * math.pi)).sum((-1, -2))


@dataclass
class ElboTerms:
    loss: torch.Tensor
    nll: float
    kl: float
    recon_mse: float
    extras: dict = field(default_factory=dict)


def elbo_loss(model: LatentModel, images: torch.Tensor, actions: torch.Tensor,
              gen: torch.Generator | None = None, eps=None) -> ElboTerms:
    """Negative ELBO of image sequences (B, T, H, W) given actions (B, T-1, A).

    Sum over time of reconstruction NLL and the z1 posterior/prior KL,
    averaged over the batch.
    """
    feats = model.encoder(images)
    seq = infer_posterior_sequence(model, feats, actions, gen=gen, eps=eps)
    recon = model.decoder(seq.z1, seq.z2)
    nll = gaussian_nll(images, recon, model.cfg.decoder_std).sum(1)
    kl = kl_diag_gaussians(seq.post1, seq.prior1).sum(1)
    loss = (nll + kl).mean()
    with torch.no_grad():
        mse = float(((images - recon) ** 2).mean())
    return ElboTerms(loss, float(nll.detach().mean()), float(kl.detach().mean()), mse,
                     {"features": feats, "seq": seq})


def nll_floor(cfg: ModelConfig, T: int) -> float:
    """NLL of a perfect reconstruction over T frames."""
    n = cfg.image_size ** 2
    return T * n * (math.log(cfg.decoder_std) + 0.5 * math.log(2 * math.pi))


@dataclass
class GoalLatent:
    z1: torch.Tensor
    z2: torch.Tensor
    features: torch.Tensor

    def z(self) -> torch.Tensor:
        return torch.cat([self.z1, self.z2], -1)


def goal_latent(model: LatentModel, goal_img: torch.Tensor, gen: torch.Generator | None = None,
                mean: bool = True, eps=None) -> GoalLatent:
    """Goal features and non-sequential latents from the first-step posterior."""
    f = model.encoder(goal_img)
    q = model.q1_first(f)
    if mean:
        z1 = q.mean
        z2 = model.p2_first(z1).mean
    else:
        if eps is None:
            eps = (torch.randn(q.mean.shape, generator=gen, dtype=f.dtype),
                   torch.randn(f.shape[:-1] + (model.cfg.z2_dim,), generator=gen, dtype=f.dtype))
        z1 = q.sample(eps[0])
        z2 = model.p2_first(z1).sample(eps[1])
    return GoalLatent(z1, z2, f)


def reconstruct(model: LatentModel, images: torch.Tensor, actions: torch.Tensor) -> torch.Tensor:
    """Posterior-mean reconstructions of a sequence (B, T, H, W)."""
    with torch.no_grad():
        seq = infer_posterior_sequence(model, model.encoder(images), actions, mean=True)
        return model.decoder(seq.z1, seq.z2)
