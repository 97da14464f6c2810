"""Identity recovery network, identity embedders, latent mask and masked identity guidance."""

from __future__ import annotations

import logging
import math
import warnings
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .config import GuidanceConfig
from .diffusion import denoised_estimate
from .features import feature_distance

log = logging.getLogger(__name__)


class GuidanceTrainingError(RuntimeError):
    pass


# --------------------------------------------------------------------------- embedders


class ConvEmbedder(nn.Module):
    """Small CNN mapping images to unit-norm identity embeddings."""

    def __init__(self, embed_dim: int = 32, width: int = 16, seed: int | None = None):
        super().__init__()
        if seed is not None:
            torch.manual_seed(seed)
        w = width
        self.features = nn.Sequential(
            nn.Conv2d(3, w, 3, padding=1), nn.SiLU(),
            nn.Conv2d(w, 2 * w, 3, stride=2, padding=1), nn.SiLU(),
            nn.Conv2d(2 * w, 4 * w, 3, stride=2, padding=1), nn.SiLU(),
            nn.Conv2d(4 * w, 4 * w, 3, stride=2, padding=1), nn.SiLU(),
        )
        self.head = nn.Linear(4 * w, embed_dim)
        self.embed_dim = embed_dim

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        h = self.features(x * 2.0 - 1.0).mean(dim=(2, 3))
        return F.normalize(self.head(h), dim=1, eps=1e-12)


def cosine_distance(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """1 - a.b for unit vectors, per row."""
    return 1.0 - (a * b).sum(dim=-1)


def margin_logits(emb, weight, labels, scale: float, margin: float):
    """Additive angular margin logits (target class angle widened by ``margin``)."""
    cos = emb @ F.normalize(weight, dim=1).T
    theta = torch.acos(cos.clamp(-1 + 1e-6, 1 - 1e-6))
    target = torch.cos(theta + margin)
    onehot = F.one_hot(labels, cos.shape[1]).bool()
    return scale * torch.where(onehot, target, cos)


@torch.enable_grad()
def train_embedder(images: torch.Tensor, labels: torch.Tensor, cfg: GuidanceConfig, seed: int = 0,
                   steps: int | None = None, augment: Callable | None = None) -> ConvEmbedder:
    """Fit a ConvEmbedder with a margin-based identity classification objective."""
    if len(images) == 0:
        raise GuidanceTrainingError("empty embedder corpus")
    steps = cfg.embedder_steps if steps is None else steps
    labels = torch.as_tensor(labels, dtype=torch.long)
    n_cls = int(labels.max()) + 1
    torch.manual_seed(seed)
    net = ConvEmbedder(cfg.embed_dim)
    proxies = nn.Parameter(torch.randn(n_cls, cfg.embed_dim))
    opt = torch.optim.Adam([*net.parameters(), proxies], lr=2e-3)
    gen = torch.Generator().manual_seed(seed)
    for step in range(steps):
        idx = torch.randint(len(images), (min(32, len(images)),), generator=gen)
        x = images[idx]
        if augment is not None:
            x = augment(x, gen)
        logits = margin_logits(net(x), proxies, labels[idx], cfg.embedder_scale, cfg.embedder_margin)
        loss = F.cross_entropy(logits, labels[idx])
        if not torch.isfinite(loss):
            raise GuidanceTrainingError(f"embedder step {step}: non-finite loss")
        opt.zero_grad(set_to_none=True)
        loss.backward()
        opt.step()
    net.eval()
    net.requires_grad_(False)
    return net


_EMBEDDERS: dict[str, Callable[..., nn.Module]] = {}


def register_embedder(name: str, factory: Callable[..., nn.Module]) -> None:
    """``factory(arrays=None, embed_dim=...)`` must return a module producing unit-norm rows."""
    _EMBEDDERS[name] = factory


def _toy_factory(arrays=None, embed_dim: int = 32):
    from .checkpoint import load_module

    net = ConvEmbedder(embed_dim)
    if arrays is None:
        raise KeyError("embedder 'toy' needs trained weights (run the embedder stage)")
    load_module(net, arrays, "embedder")
    net.eval()
    return net.requires_grad_(False)


def _random_factory(arrays=None, embed_dim: int = 32):
    net = ConvEmbedder(embed_dim, seed=4321)
    net.eval()
    return net.requires_grad_(False)


register_embedder("toy", _toy_factory)
register_embedder("random", _random_factory)


def build_embedder(name: str, arrays=None, embed_dim: int = 32) -> nn.Module:
    try:
        factory = _EMBEDDERS[name]
    except KeyError:
        raise KeyError(f"unknown embedder {name!r}; registered: {sorted(_EMBEDDERS)}") from None
    return factory(arrays=arrays, embed_dim=embed_dim)


# --------------------------------------------------------------------------- IRN


class _Res(nn.Module):
    def __init__(self, w):
        super().__init__()
        self.c1 = nn.Conv2d(w, w, 3, padding=1)
        self.c2 = nn.Conv2d(w, w, 3, padding=1)

    def forward(self, x):
        return x + self.c2(F.silu(self.c1(F.silu(x))))


class IdentityRecoveryNet(nn.Module):
    """Residual restoration CNN; the body runs at half resolution."""

    def __init__(self, width: int = 32, blocks: int = 3):
        super().__init__()
        self.head = nn.Conv2d(3, width // 2, 3, padding=1)
        self.down = nn.Conv2d(width // 2, width, 4, stride=2, padding=1)
        self.body = nn.Sequential(*[_Res(width) for _ in range(blocks)])
        self.up = nn.ConvTranspose2d(width, width // 2, 4, stride=2, padding=1)
        self.tail = nn.Conv2d(width, 3, 3, padding=1)
        nn.init.zeros_(self.tail.weight)
        nn.init.zeros_(self.tail.bias)

    def forward(self, x):
        h0 = self.head(x * 2.0 - 1.0)
        h = self.up(self.body(self.down(F.silu(h0))))
        r = self.tail(F.silu(torch.cat([h, h0], dim=1)))
        return (x + r).clamp(0.0, 1.0)


def irn_forward(x_d: torch.Tensor, irn: nn.Module, resolution: int | None = None) -> torch.Tensor:
    if x_d.dim() != 4 or x_d.shape[1] != 3:
        raise ValueError(f"expected (B, 3, H, W) images, got {tuple(x_d.shape)}")
    if resolution is not None and tuple(x_d.shape[-2:]) != (resolution, resolution):
        raise ValueError(f"IRN expects {resolution}x{resolution} inputs, got {tuple(x_d.shape[-2:])}")
    return irn(x_d)


def irn_loss(x_id: torch.Tensor, x: torch.Tensor, alpha: float, embedder: nn.Module) -> torch.Tensor:
    """alpha * L1(x_id, x) + mean cosine distance between their embeddings."""
    l1 = (x_id - x).abs().mean()
    return alpha * l1 + cosine_distance(embedder(x_id), embedder(x)).mean()


@torch.enable_grad()
def train_irn(clean: torch.Tensor, degraded: torch.Tensor, embedder: nn.Module, cfg: GuidanceConfig,
              seed: int = 0, steps: int | None = None, log_every: int = 200) -> tuple[IdentityRecoveryNet, list]:
    if len(clean) == 0:
        raise GuidanceTrainingError("empty IRN corpus")
    steps = cfg.irn_steps if steps is None else steps
    torch.manual_seed(seed)
    irn = IdentityRecoveryNet(cfg.irn_width)
    opt = torch.optim.Adam(irn.parameters(), lr=cfg.irn_lr)
    gen = torch.Generator().manual_seed(seed)
    history = []
    for step in range(steps):
        idx = torch.randint(len(clean), (min(cfg.batch_size, len(clean)),), generator=gen)
        loss = irn_loss(irn(degraded[idx]), clean[idx], cfg.irn_alpha, embedder)
        if not torch.isfinite(loss):
            raise GuidanceTrainingError(f"IRN step {step}: non-finite loss")
        opt.zero_grad(set_to_none=True)
        loss.backward()
        opt.step()
        history.append(loss.item())
        if log_every and step % log_every == 0:
            log.info("irn step %d loss %.4f", step, history[-1])
    irn.eval()
    irn.requires_grad_(False)
    return irn, history


# --------------------------------------------------------------------------- guidance


class MaskNet(nn.Module):
    """Conv stack + sigmoid over [denoised estimate, degraded latent] -> per-element gate."""

    def __init__(self, channels: int, width: int = 16, layers: int = 3):
        super().__init__()
        mods: list[nn.Module] = []
        cin = 2 * channels
        for _ in range(layers - 1):
            mods += [nn.Conv2d(cin, width, 3, padding=1), nn.SiLU()]
            cin = width
        mods.append(nn.Conv2d(cin, channels, 3, padding=1))
        self.net = nn.Sequential(*mods)

    def forward(self, z0_hat: torch.Tensor, z_d: torch.Tensor) -> torch.Tensor:
        return torch.sigmoid(self.net(torch.cat([z0_hat, z_d], dim=1)))


def mask_forward(z0_hat: torch.Tensor, z_d: torch.Tensor, mask_net: MaskNet) -> torch.Tensor:
    return mask_net(z0_hat, z_d)


def guidance_gradient(z0_hat: torch.Tensor, target_embedding: torch.Tensor, decode: Callable,
                      embedder: nn.Module) -> torch.Tensor:
    """Gradient w.r.t. the denoised latent of D_cos(embed(decode(z)), target).

    ``decode`` must quantize with a straight-through estimator. Items whose gradient is
    not finite get a zero gradient (guidance off for them at this step).
    """
    z = z0_hat.detach().requires_grad_(True)
    with torch.enable_grad():
        loss = cosine_distance(embedder(decode(z)), target_embedding).sum()
        (grad,) = torch.autograd.grad(loss, z)
    ok = torch.isfinite(grad).flatten(1).all(dim=1)
    if not ok.all():
        warnings.warn(f"non-finite guidance gradient for {int((~ok).sum())} item(s); guidance skipped")
        grad = torch.where(ok.view(-1, 1, 1, 1), grad, torch.zeros_like(grad))
    return grad


def guided_score(score: torch.Tensor, grad: torch.Tensor, mask: torch.Tensor | float, gamma: float) -> torch.Tensor:
    """score - gamma * (mask * grad): moves sampling down the identity loss."""
    if gamma < 0:
        raise ValueError("guidance scale must be >= 0")
    if gamma == 0:
        return score
    if isinstance(mask, torch.Tensor) and mask.shape != score.shape:
        raise ValueError(f"mask shape {tuple(mask.shape)} != score shape {tuple(score.shape)}")
    if grad.shape != score.shape:
        raise ValueError(f"gradient shape {tuple(grad.shape)} != score shape {tuple(score.shape)}")
    return score - gamma * (mask * grad)


def init_latent(x_id: torch.Tensor, encode: Callable, t0: float, generator: torch.Generator | None = None) -> torch.Tensor:
    """encode(x_id) + t0 * eps."""
    with torch.no_grad():
        z = encode(x_id)
    if t0 == 0:
        return z
    return z + t0 * torch.randn(z.shape, generator=generator, dtype=z.dtype)


def make_guidance_hook(decode: Callable, embedder: nn.Module, x_id: torch.Tensor, z_d: torch.Tensor,
                       gamma: float, mask_net: MaskNet | None = None):
    """Score hook for ``diffusion.sample``: identity guidance toward ``x_id``, optionally masked."""
    with torch.no_grad():
        target = embedder(x_id)

    def hook(score, z, t):
        if gamma == 0:
            return score
        z0_hat = denoised_estimate(z, score, t)
        grad = guidance_gradient(z0_hat, target, decode, embedder)
        if mask_net is None:
            mask = torch.ones_like(grad)
        else:
            with torch.no_grad():
                mask = mask_net(z0_hat, z_d)
        return guided_score(score, grad, mask, gamma)

    return hook


@dataclass
class MaskTrainResult:
    mask_net: MaskNet
    history: list[dict] = field(default_factory=list)


@torch.enable_grad()
def train_mask(trajectories: torch.Tensor, levels: torch.Tensor, z_d: torch.Tensor, x_clean: torch.Tensor,
               x_id: torch.Tensor, score_net: nn.Module, decode: Callable, embedder: nn.Module,
               extractor: nn.Module, cfg: GuidanceConfig, gamma: float, seed: int = 0,
               steps: int | None = None) -> MaskTrainResult:
    """Fit the mask network with upstream networks frozen.

    ``trajectories`` is (N, S, d, h, w): unguided sampler states at noise ``levels`` (S,).
    Per step a random (item, level) is drawn, the score is guided with the current mask,
    the guided denoised latent is decoded, and the loss is
    w_feat * featdist(x_hat, x) + w_id * D_cos(embed(x_hat), embed(x)) + w_sparse * mean(mask).
    """
    if len(trajectories) == 0:
        raise GuidanceTrainingError("empty mask corpus")
    steps = cfg.mask_steps if steps is None else steps
    torch.manual_seed(seed)
    channels = trajectories.shape[2]
    mask_net = MaskNet(channels, cfg.mask_width, cfg.mask_layers)
    opt = torch.optim.Adam(mask_net.parameters(), lr=cfg.mask_lr)
    gen = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        id_target = embedder(x_id)
        clean_emb = embedder(x_clean)
    history = []
    n, s = trajectories.shape[:2]
    for step in range(steps):
        b = min(cfg.batch_size, n)
        idx = torch.randint(n, (b,), generator=gen)
        lvl = torch.randint(s, (b,), generator=gen)
        z = trajectories[idx, lvl]
        t = levels[lvl].to(z.dtype)
        with torch.no_grad():
            score = score_net(z, z_d[idx], t)
        z0_hat = denoised_estimate(z, score, t)
        grad = guidance_gradient(z0_hat, id_target[idx], decode, embedder)
        mask = mask_net(z0_hat, z_d[idx])
        guided = guided_score(score, grad, mask, gamma)
        x_hat = decode(denoised_estimate(z, guided, t))
        feat = feature_distance(extractor, x_hat, x_clean[idx], squared=True).mean()
        ident = cosine_distance(embedder(x_hat), clean_emb[idx]).mean()
        sparse = mask.mean()
        loss = cfg.mask_feat_weight * feat + cfg.mask_id_weight * ident + cfg.mask_sparsity_weight * sparse
        if not torch.isfinite(loss):
            raise GuidanceTrainingError(f"mask step {step}: non-finite loss")
        opt.zero_grad(set_to_none=True)
        loss.backward()
        opt.step()
        history.append({"loss": loss.item(), "feat": feat.item(), "id": ident.item(), "mask_mean": sparse.item()})
    mask_net.eval()
    mask_net.requires_grad_(False)
    return MaskTrainResult(mask_net, history)
