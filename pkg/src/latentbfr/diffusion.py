"""Conditional score model over VQ latents and its probability-flow sampler.

Forward process is variance exploding: z_t = z_0 + t * eps (drift 0, g(t) = sqrt(2) t),
so the reverse ODE is dz/dt = -t * score(z, z_d, t), integrated from t_0 down to 0.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable

import torch
import torch.nn as nn
import torch.nn.functional as F

from .config import DiffusionConfig

log = logging.getLogger(__name__)

ScoreFn = Callable[[torch.Tensor, torch.Tensor], torch.Tensor]
GuidanceHook = Callable[[torch.Tensor, torch.Tensor, torch.Tensor], torch.Tensor]


class SamplerError(RuntimeError):
    pass


class DiffusionTrainingError(RuntimeError):
    pass


def sigma_schedule(sigma_min: float, sigma_max: float, rho: float, n: int,
                   dtype=torch.float64) -> torch.Tensor:
    """N noise levels with rho-power spacing from sigma_max to sigma_min, then a final 0."""
    if n < 2:
        raise ValueError("need at least 2 steps")
    if not 0 < sigma_min < sigma_max:
        raise ValueError("need 0 < sigma_min < sigma_max")
    i = torch.arange(n, dtype=torch.float64)
    hi, lo = sigma_max ** (1.0 / rho), sigma_min ** (1.0 / rho)
    t = (hi + i / (n - 1) * (lo - hi)) ** rho
    # pin the endpoints exactly; the power round trip can be off by an ulp
    t[0], t[-1] = sigma_max, sigma_min
    sched = torch.cat([t, t.new_zeros(1)]).to(dtype)
    check_schedule(sched)
    return sched


def schedule_from_config(cfg: DiffusionConfig, dtype=torch.float64) -> torch.Tensor:
    if cfg.sigma_max is None:
        raise ValueError("sigma_max unresolved; train the diffusion stage or set it explicitly")
    return sigma_schedule(cfg.sigma_min, cfg.sigma_max, cfg.rho, cfg.num_steps, dtype)


def check_schedule(sched: torch.Tensor) -> None:
    if sched.dim() != 1 or len(sched) < 2:
        raise ValueError("schedule must be a 1-D sequence")
    if not torch.isfinite(sched).all() or (sched < 0).any():
        raise ValueError("schedule entries must be finite and >= 0")
    if sched[-1] != 0:
        raise ValueError("schedule must end at exactly 0")
    if not (sched[1:] < sched[:-1]).all():
        raise ValueError("schedule must be strictly decreasing")


def perturb(z0: torch.Tensor, t, generator: torch.Generator | None = None) -> torch.Tensor:
    """z0 + t * eps with eps ~ N(0, I). ``t`` is a scalar or one level per batch item."""
    t = torch.as_tensor(t, dtype=z0.dtype)
    if (t < 0).any():
        raise ValueError("noise level must be >= 0")
    eps = torch.randn(z0.shape, generator=generator, dtype=z0.dtype)
    if t.dim() == 1:
        t = t.view(-1, *([1] * (z0.dim() - 1)))
    return z0 + t * eps


def denoised_estimate(z_t: torch.Tensor, score: torch.Tensor, t) -> torch.Tensor:
    """Tweedie estimate of the clean latent: z_t + t^2 * score. At t = 0 returns z_t."""
    t = torch.as_tensor(t, dtype=z_t.dtype)
    if t.dim() == 0 and float(t) == 0.0:
        return z_t
    if t.dim() == 1:
        t = t.view(-1, *([1] * (z_t.dim() - 1)))
    return z_t + t * t * score


class FourierEmbedding(nn.Module):
    def __init__(self, dim: int, scale: float = 4.0, seed: int = 0):
        super().__init__()
        gen = torch.Generator().manual_seed(seed)
        self.register_buffer("freqs", torch.randn(dim // 2, generator=gen) * scale)

    def forward(self, x):
        arg = 2 * math.pi * x[:, None] * self.freqs[None]
        return torch.cat([arg.cos(), arg.sin()], dim=1)


class TimeResBlock(nn.Module):
    def __init__(self, cin: int, cout: int, emb_dim: int):
        super().__init__()
        self.conv1 = nn.Conv2d(cin, cout, 3, padding=1)
        self.emb = nn.Linear(emb_dim, cout * 2)
        self.conv2 = nn.Conv2d(cout, cout, 3, padding=1)
        self.skip = nn.Conv2d(cin, cout, 1) if cin != cout else nn.Identity()

    def forward(self, x, emb):
        h = self.conv1(F.silu(x))
        scale, shift = self.emb(emb)[:, :, None, None].chunk(2, dim=1)
        h = F.silu(h * (1 + scale) + shift)
        return self.skip(x) + self.conv2(h)


class ScoreNetwork(nn.Module):
    """Two-level conv U-Net with EDM-style input/output scaling.

    The network outputs a denoised latent D(z_t, z_d, t) = c_skip z_t + c_out F(c_in z_t, z_d, t);
    the score is (D - z_t) / t^2. The condition is concatenated channel-wise, never noised.
    """

    def __init__(self, channels: int, base_width: int = 32, conditional: bool = True,
                 sigma_data: float = 1.0, emb_dim: int = 64):
        super().__init__()
        self.channels = channels
        self.conditional = conditional
        self.register_buffer("sigma_data", torch.tensor(float(sigma_data)))
        w = base_width
        cin = channels * (2 if conditional else 1)
        self.fourier = FourierEmbedding(emb_dim)
        self.emb = nn.Sequential(nn.Linear(emb_dim, emb_dim), nn.SiLU(), nn.Linear(emb_dim, emb_dim))
        self.conv_in = nn.Conv2d(cin, w, 3, padding=1)
        self.enc1 = TimeResBlock(w, w, emb_dim)
        self.down = nn.Conv2d(w, 2 * w, 3, stride=2, padding=1)
        self.mid1 = TimeResBlock(2 * w, 2 * w, emb_dim)
        self.mid2 = TimeResBlock(2 * w, 2 * w, emb_dim)
        self.up = nn.Conv2d(2 * w, w, 3, padding=1)
        self.dec1 = TimeResBlock(2 * w, w, emb_dim)
        self.conv_out = nn.Conv2d(w, channels, 3, padding=1)
        nn.init.zeros_(self.conv_out.weight)
        nn.init.zeros_(self.conv_out.bias)

    def _t(self, t, z):
        t = torch.as_tensor(t, dtype=z.dtype, device=z.device)
        if t.dim() == 0:
            t = t.expand(z.shape[0])
        return t

    def denoise(self, z_t: torch.Tensor, z_d: torch.Tensor | None, t) -> torch.Tensor:
        t = self._t(t, z_t)
        sd = self.sigma_data.to(z_t.dtype)
        tt = t.view(-1, 1, 1, 1)
        c_in = 1.0 / torch.sqrt(tt * tt + sd * sd)
        c_skip = sd * sd / (tt * tt + sd * sd)
        c_out = tt * sd / torch.sqrt(tt * tt + sd * sd)
        h = c_in * z_t
        if self.conditional:
            if z_d is None:
                raise ValueError("conditional score network needs z_d")
            h = torch.cat([h, z_d], dim=1)
        emb = self.emb(self.fourier(torch.log(t) / 4.0))
        h0 = self.conv_in(h)
        h1 = self.enc1(h0, emb)
        h2 = self.mid2(self.mid1(self.down(h1), emb), emb)
        u = self.up(F.interpolate(h2, scale_factor=2, mode="nearest"))
        out = self.conv_out(F.silu(self.dec1(torch.cat([u, h1], dim=1), emb)))
        return c_skip * z_t + c_out * out

    def forward(self, z_t: torch.Tensor, z_d: torch.Tensor | None, t) -> torch.Tensor:
        """Score estimate of the (conditional) noised latent density at level ``t``."""
        t = self._t(t, z_t)
        d = self.denoise(z_t, z_d, t)
        tt = t.view(-1, 1, 1, 1)
        return (d - z_t) / (tt * tt)


def loss_weight(t: torch.Tensor, weighting: str, sigma_data: float = 1.0) -> torch.Tensor:
    if weighting == "t2":
        return t * t
    if weighting == "edm":
        # t^2 * (t^2 + sd^2) / (t sd)^2: unit weight on the network's raw output
        return (t * t + sigma_data ** 2) / sigma_data ** 2
    return torch.ones_like(t)


def sample_levels(n: int, sigma_min: float, sigma_max: float, generator=None) -> torch.Tensor:
    """Log-uniform noise levels in [sigma_min, sigma_max]."""
    u = torch.rand(n, generator=generator, dtype=torch.float64)
    return torch.exp(math.log(sigma_min) + u * (math.log(sigma_max) - math.log(sigma_min))).float()


def dsm_loss(score_fn, z0: torch.Tensor, z_d: torch.Tensor | None, t: torch.Tensor,
             weighting: str = "t2", sigma_data: float = 1.0,
             generator: torch.Generator | None = None, z_t: torch.Tensor | None = None) -> torch.Tensor:
    """Weighted denoising score matching: E lambda(t) || s(z_t, z_d, t) - (z0 - z_t) / t^2 ||^2.

    Only z0 is noised; the condition is passed through untouched.
    """
    if z_t is None:
        z_t = perturb(z0, t, generator)
    tt = t.view(-1, 1, 1, 1)
    target = (z0 - z_t) / (tt * tt)
    s = score_fn(z_t, z_d, t)
    per = (s - target).pow(2).mean(dim=(1, 2, 3))
    loss = (loss_weight(t, weighting, sigma_data) * per).mean()
    if not torch.isfinite(loss):
        bad = t[~torch.isfinite(per)]
        where = f" at t={float(bad[0]):.4g}" if len(bad) else ""
        raise DiffusionTrainingError(f"non-finite score-matching loss{where}")
    return loss


def heun_step(z: torch.Tensor, t_cur, t_next, score_fn: ScoreFn, step: int | None = None) -> torch.Tensor:
    """One step of dz/dt = -t s(z, t) from t_cur to t_next; Euler-only when t_next == 0."""
    t_cur, t_next = float(t_cur), float(t_next)
    if not t_cur > t_next >= 0:
        raise ValueError(f"need t_cur > t_next >= 0, got {t_cur}, {t_next}")
    h = t_next - t_cur
    d = -t_cur * score_fn(z, t_cur)
    z_next = z + h * d
    if t_next > 0:
        d2 = -t_next * score_fn(z_next, t_next)
        z_next = z + h * (0.5 * d + 0.5 * d2)
    if not torch.isfinite(z_next).all():
        where = "" if step is None else f" at step {step}"
        raise SamplerError(f"non-finite latent{where} (t={t_cur:.4g} -> {t_next:.4g})")
    return z_next


def sample(z_init: torch.Tensor, z_d: torch.Tensor | None, schedule: torch.Tensor, net: ScoreNetwork | Callable,
           guidance_hook: GuidanceHook | None = None, record: list | None = None) -> torch.Tensor:
    """Integrate the probability-flow ODE along ``schedule`` starting from ``z_init``.

    ``guidance_hook(score, z, t)`` may replace the score at every evaluation with t > 0.
    If ``record`` is a list, the state at every level except the last is appended to it.
    Deterministic: no noise is drawn here.
    """
    check_schedule(schedule)

    def score_fn(z, t):
        with torch.no_grad():
            s = net(z, z_d, t)
        if guidance_hook is not None:
            s = guidance_hook(s, z, torch.as_tensor(t, dtype=z.dtype))
        return s

    z = z_init
    for i in range(len(schedule) - 1):
        if record is not None:
            record.append(z.detach().clone())
        z = heun_step(z, schedule[i], schedule[i + 1], score_fn, step=i)
    return z


@dataclass
class DiffusionTrainResult:
    net: ScoreNetwork
    sigma_max: float
    sigma_data: float
    history: list[float] = field(default_factory=list)


@torch.enable_grad()
def train_diffusion(z0: torch.Tensor, z_d: torch.Tensor | None, cfg: DiffusionConfig, seed: int = 0,
                    steps: int | None = None, log_every: int = 500) -> DiffusionTrainResult:
    """Fit the conditional score on paired latents (z0 clean, z_d degraded), both (N, d, h, w)."""
    if z0 is None or len(z0) == 0:
        raise DiffusionTrainingError("empty latent corpus")
    if cfg.conditional and (z_d is None or z_d.shape != z0.shape):
        raise DiffusionTrainingError("conditional training needs z_d aligned with z0")
    cfg.validate()
    steps = cfg.steps if steps is None else steps
    std = float(z0.std())
    sigma_data = cfg.sigma_data if cfg.sigma_data is not None else std
    sigma_max = cfg.sigma_max if cfg.sigma_max is not None else 3.0 * std
    if sigma_max <= cfg.sigma_min:
        raise DiffusionTrainingError(f"sigma_max {sigma_max} must exceed sigma_min")
    torch.manual_seed(seed)
    net = ScoreNetwork(z0.shape[1], cfg.base_width, cfg.conditional, sigma_data)
    opt = torch.optim.Adam(net.parameters(), lr=cfg.lr)
    sched = torch.optim.lr_scheduler.LambdaLR(opt, lambda s: min(1.0, (steps - s) / max(1, steps // 4)))
    gen = torch.Generator().manual_seed(seed)
    history = []
    for step in range(steps):
        idx = torch.randint(len(z0), (min(cfg.batch_size, len(z0)),), generator=gen)
        t = sample_levels(len(idx), cfg.sigma_min, sigma_max, gen)
        try:
            loss = dsm_loss(net, z0[idx], z_d[idx] if cfg.conditional else None, t,
                            cfg.weighting, sigma_data, gen)
        except DiffusionTrainingError as exc:
            raise DiffusionTrainingError(f"step {step}: {exc}") from None
        opt.zero_grad(set_to_none=True)
        loss.backward()
        opt.step()
        sched.step()
        history.append(loss.item())
        if log_every and step % log_every == 0:
            log.info("diffusion step %d loss %.4f", step, history[-1])
    for p in net.parameters():
        if not torch.isfinite(p).all():
            raise DiffusionTrainingError("non-finite weights after training")
    net.eval()
    return DiffusionTrainResult(net=net, sigma_max=sigma_max, sigma_data=sigma_data, history=history)
