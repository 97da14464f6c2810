"""Vector-quantized autoencoder: encoder, nearest-code quantizer, decoder, VQGAN-style losses.

The decoder owns the quantization step: ``decode`` on a continuous latent snaps it to
the codebook first (straight-through, so gradients still reach the latent).
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from . import kernels
from .config import VqTrainConfig
from .features import PerceptualExtractor, feature_l1

log = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    pass


@dataclass
class QuantizedLatent:
    data: torch.Tensor  # (B, d, h, w); every spatial vector is a codebook row
    indices: torch.Tensor  # (B, h, w) int64


@dataclass
class LossBreakdown:
    reconstruction: torch.Tensor
    perceptual: torch.Tensor
    adversarial: torch.Tensor
    codebook: torch.Tensor
    commitment: torch.Tensor
    total: torch.Tensor

    def items(self) -> dict[str, float]:
        return {k: float(getattr(self, k).detach()) for k in
                ("reconstruction", "perceptual", "adversarial", "codebook", "commitment", "total")}


def _widths(cfg: VqTrainConfig, levels: int) -> list[int]:
    w = list(cfg.widths)
    return [w[min(i, len(w) - 1)] for i in range(levels)]


class ResBlock(nn.Module):
    def __init__(self, cin: int, cout: int):
        super().__init__()
        self.conv1 = nn.Conv2d(cin, cout, 3, padding=1)
        self.conv2 = nn.Conv2d(cout, cout, 3, padding=1)
        self.skip = nn.Conv2d(cin, cout, 1) if cin != cout else nn.Identity()

    def forward(self, x):
        h = self.conv1(F.silu(x))
        h = self.conv2(F.silu(h))
        return self.skip(x) + h


class Encoder(nn.Module):
    def __init__(self, cfg: VqTrainConfig):
        super().__init__()
        n_down = int(math.log2(cfg.f))
        ch = _widths(cfg, n_down + 1)
        self.conv_in = nn.Conv2d(3, ch[0], 3, padding=1)
        blocks = []
        for i in range(n_down):
            blocks += [ResBlock(ch[i], ch[i]), nn.Conv2d(ch[i], ch[i + 1], 4, stride=2, padding=1)]
        blocks.append(ResBlock(ch[-1], ch[-1]))
        self.body = nn.Sequential(*blocks)
        self.conv_out = nn.Conv2d(ch[-1], cfg.code_dim, 3, padding=1)

    def forward(self, x):
        return self.conv_out(F.silu(self.body(self.conv_in(x * 2.0 - 1.0))))


class Decoder(nn.Module):
    def __init__(self, cfg: VqTrainConfig):
        super().__init__()
        n_up = int(math.log2(cfg.f))
        ch = _widths(cfg, n_up + 1)[::-1]
        self.conv_in = nn.Conv2d(cfg.code_dim, ch[0], 3, padding=1)
        blocks = [ResBlock(ch[0], ch[0])]
        for i in range(n_up):
            blocks += [nn.Upsample(scale_factor=2, mode="nearest"),
                       nn.Conv2d(ch[i], ch[i + 1], 3, padding=1),
                       ResBlock(ch[i + 1], ch[i + 1])]
        self.body = nn.Sequential(*blocks)
        self.conv_out = nn.Conv2d(ch[-1], 3, 3, padding=1)

    def forward(self, zq):
        # bounded output keeps every decode inside [0, 1]
        return torch.sigmoid(self.conv_out(F.silu(self.body(self.conv_in(zq)))))


def quantize(z: torch.Tensor, codebook: torch.Tensor) -> QuantizedLatent:
    """Snap each spatial vector of ``z`` (B, d, h, w) to its nearest codebook row.

    Distances use the compiled kernel on a detached float64 copy; the returned data is
    a gather from ``codebook`` so codebook gradients flow through it.
    """
    if z.dim() != 4:
        raise ValueError(f"latent must be (B, d, h, w), got {tuple(z.shape)}")
    b, d, h, w = z.shape
    if codebook.shape[1] != d:
        raise ValueError(f"latent dim {d} != codebook dim {codebook.shape[1]}")
    flat = z.detach().permute(0, 2, 3, 1).reshape(-1, d).cpu().numpy()
    idx = kernels.nearest_code(flat, codebook.detach().cpu().numpy())
    indices = torch.from_numpy(idx).to(z.device).view(b, h, w)
    data = codebook[indices].permute(0, 3, 1, 2)
    return QuantizedLatent(data=data, indices=indices)


def straight_through(z: torch.Tensor, zq: torch.Tensor | QuantizedLatent) -> torch.Tensor:
    """Forward value of ``zq`` (exactly), gradient copied unchanged to ``z``.

    ``z - z.detach()`` is an exact zero that carries the identity Jacobian.
    """
    data = zq.data if isinstance(zq, QuantizedLatent) else zq
    if data.shape != z.shape:
        raise ValueError(f"shape mismatch {tuple(z.shape)} vs {tuple(data.shape)}")
    return data.detach() + (z - z.detach())


class VQModel(nn.Module):
    def __init__(self, cfg: VqTrainConfig, resolution: int = 64):
        super().__init__()
        cfg.validate()
        if resolution % cfg.f:
            raise ValueError(f"resolution {resolution} not divisible by f={cfg.f}")
        self.cfg = cfg
        self.resolution = resolution
        self.encoder = Encoder(cfg)
        self.decoder = Decoder(cfg)
        k = cfg.codebook_size
        self.codebook = nn.Parameter(torch.empty(k, cfg.code_dim).uniform_(-1.0 / k, 1.0 / k))

    @property
    def latent_shape(self) -> tuple[int, int, int]:
        side = self.resolution // self.cfg.f
        return (self.cfg.code_dim, side, side)

    def _check_image(self, x):
        if x.dim() != 4 or tuple(x.shape[1:]) != (3, self.resolution, self.resolution):
            raise ValueError(f"expected images (B, 3, {self.resolution}, {self.resolution}), got {tuple(x.shape)}")

    def _check_latent(self, z):
        if z.dim() != 4 or tuple(z.shape[1:]) != self.latent_shape:
            raise ValueError(f"expected latents (B, {self.latent_shape}), got {tuple(z.shape)}")

    def encode(self, x: torch.Tensor) -> torch.Tensor:
        self._check_image(x)
        return self.encoder(x)

    def quantize(self, z: torch.Tensor) -> QuantizedLatent:
        self._check_latent(z)
        return quantize(z, self.codebook)

    def decode(self, z: torch.Tensor | QuantizedLatent) -> torch.Tensor:
        if isinstance(z, QuantizedLatent):
            self._check_latent(z.data)
            return self.decoder(z.data)
        self._check_latent(z)
        return self.decoder(straight_through(z, self.quantize(z)))

    def forward(self, x):
        z = self.encode(x)
        q = self.quantize(z)
        x_rec = self.decoder(straight_through(z, q))
        return x_rec, z, q


class PatchDiscriminator(nn.Module):
    def __init__(self, width: int = 32):
        super().__init__()
        self.net = nn.Sequential(
            nn.Conv2d(3, width, 4, stride=2, padding=1), nn.LeakyReLU(0.2),
            nn.Conv2d(width, width * 2, 4, stride=2, padding=1), nn.LeakyReLU(0.2),
            nn.Conv2d(width * 2, 1, 3, padding=1),
        )

    def forward(self, x):
        return self.net(x * 2.0 - 1.0)


def vq_loss(x, x_rec, z, zq, disc_logits, feat_fn, cfg: VqTrainConfig | None = None) -> LossBreakdown:
    """Five-term autoencoder objective.

    ``zq`` is the codebook gather (not the straight-through tensor) so the codebook
    term reaches only the codebook and the commitment term only the encoder.
    ``disc_logits`` are discriminator logits on ``x_rec``; None disables the term.
    The adversarial term is the generator's non-saturating loss -log D(x_rec).
    """
    cfg = cfg or VqTrainConfig()
    zq = zq.data if isinstance(zq, QuantizedLatent) else zq
    rec = (x - x_rec).abs().mean()
    perc = feat_fn(x, x_rec) if cfg.perceptual_weight else x.new_zeros(())
    if disc_logits is None:
        adv = x.new_zeros(())
    else:
        adv = F.softplus(-disc_logits).mean()
    codebook = (z.detach() - zq).pow(2).mean()
    commit = (zq.detach() - z).pow(2).mean()
    total = (cfg.rec_weight * rec + cfg.perceptual_weight * perc + cfg.adversarial_weight * adv
             + cfg.codebook_weight * codebook + cfg.commitment_weight * commit)
    out = LossBreakdown(rec, perc, adv, codebook, commit, total)
    for name, val in out.items().items():
        if not math.isfinite(val):
            raise TrainingError(f"non-finite {name} loss ({val})")
    return out


def discriminator_loss(real_logits, fake_logits):
    """-[log D(x) + log(1 - D(x_rec))], averaged over patches."""
    return F.softplus(-real_logits).mean() + F.softplus(fake_logits).mean()


@dataclass
class VqTrainResult:
    model: VQModel
    discriminator: PatchDiscriminator
    history: list[dict] = field(default_factory=list)
    usage: np.ndarray | None = None

    @property
    def dead_fraction(self) -> float:
        return float(np.mean(self.usage == 0)) if self.usage is not None else float("nan")


def codebook_usage(model: VQModel, images: torch.Tensor, batch: int = 64) -> np.ndarray:
    counts = np.zeros(model.cfg.codebook_size, dtype=np.int64)
    with torch.no_grad():
        for i in range(0, len(images), batch):
            q = model.quantize(model.encode(images[i:i + batch]))
            counts += np.bincount(q.indices.flatten().numpy(), minlength=len(counts))
    return counts


@torch.enable_grad()
def train_vqvae(images: torch.Tensor, cfg: VqTrainConfig, resolution: int | None = None,
                seed: int = 0, steps: int | None = None, log_every: int = 100) -> VqTrainResult:
    """Train encoder, decoder, codebook and patch discriminator on ``images`` (N, 3, H, W)."""
    if images is None or len(images) == 0:
        raise TrainingError("empty training corpus")
    cfg.validate()
    resolution = resolution or images.shape[-1]
    steps = cfg.steps if steps is None else steps
    torch.manual_seed(seed)
    model = VQModel(cfg, resolution)
    disc = PatchDiscriminator()
    extractor = PerceptualExtractor()
    feat_fn = lambda a, b: feature_l1(extractor, a, b)  # noqa: E731
    opt = torch.optim.Adam(model.parameters(), lr=cfg.lr, betas=tuple(cfg.betas))
    opt_d = torch.optim.Adam(disc.parameters(), lr=cfg.disc_lr, betas=tuple(cfg.betas))
    gen = torch.Generator().manual_seed(seed)
    last_used = np.zeros(cfg.codebook_size, dtype=np.int64)
    history = []

    for step in range(steps):
        idx = torch.randint(len(images), (min(cfg.batch_size, len(images)),), generator=gen)
        x = images[idx]
        x_rec, z, q = model(x)
        use_adv = cfg.adversarial_weight > 0 and step >= cfg.disc_start
        logits = disc(x_rec) if use_adv else None
        try:
            losses = vq_loss(x, x_rec, z, q.data, logits, feat_fn, cfg)
        except TrainingError as exc:
            raise TrainingError(f"step {step}: {exc}") from None
        opt.zero_grad(set_to_none=True)
        losses.total.backward()
        opt.step()

        if use_adv:
            d_loss = discriminator_loss(disc(x), disc(x_rec.detach()))
            opt_d.zero_grad(set_to_none=True)
            d_loss.backward()
            opt_d.step()

        if cfg.dead_code_restart:
            used = np.unique(q.indices.numpy())
            last_used[used] = step
            stale = np.flatnonzero(step - last_used >= cfg.dead_code_restart)
            if len(stale):
                flat = z.detach().permute(0, 2, 3, 1).reshape(-1, cfg.code_dim)
                pick = torch.randint(len(flat), (len(stale),), generator=gen)
                with torch.no_grad():
                    model.codebook[torch.from_numpy(stale)] = flat[pick]
                last_used[stale] = step

        for p in model.parameters():
            if not torch.isfinite(p).all():
                raise TrainingError(f"step {step}: non-finite weights")
        rec = losses.items()
        rec["step"] = step
        history.append(rec)
        if log_every and step % log_every == 0:
            log.info("vq step %d rec %.4f perc %.4f cb %.4f", step, rec["reconstruction"],
                     rec["perceptual"], rec["codebook"])

    model.eval()
    usage = codebook_usage(model, images)
    return VqTrainResult(model=model, discriminator=disc, history=history, usage=usage)
