"""Acceptance gate: one test per criterion, each at its stated tolerance.

The pipeline criteria share one trained toy run (configs/toy.yaml), built once per session.
A summary with one PASS/FAIL line per criterion is printed at the end of the pytest run.
"""

from __future__ import annotations

import math
import time
from pathlib import Path

import numpy as np
import pytest
import scipy.linalg
import torch

from conftest import ACCEPTANCE
from latentbfr import degradation as dg
from latentbfr import diffusion as df
from latentbfr import guidance as gd
from latentbfr import metrics
from latentbfr.config import DiffusionConfig, load_config
from latentbfr.pipeline import Run, RestoreOptions, image_digest, rerun_from_manifest
from latentbfr.toydata import make_corpus
from latentbfr.vq import VQModel, quantize, train_vqvae
from latentbfr.config import VqTrainConfig

TOY_CONFIG = Path(__file__).resolve().parents[1] / "configs" / "toy.yaml"

pytestmark = pytest.mark.acceptance


def record(key: str, ok: bool, detail: str) -> None:
    ACCEPTANCE[key] = (bool(ok), detail)
    print(f"{key} {'PASS' if ok else 'FAIL'}  {detail}")
    assert ok, detail


# --------------------------------------------------------------------------- shared run


@pytest.fixture(scope="session")
def toy_run(tmp_path_factory):
    cfg = load_config(TOY_CONFIG)
    run = Run(cfg, tmp_path_factory.mktemp("toy_run"))
    t0 = time.perf_counter()
    run.run_all()
    run.train_seconds = time.perf_counter() - t0
    return run


@pytest.fixture(scope="session")
def ablation(toy_run):
    t0 = time.perf_counter()
    reports = toy_run.ablate(["degraded", "diffusion-only", "guidance", "guidance+mask"])
    return reports, time.perf_counter() - t0


# --------------------------------------------------------------------------- AC1


def test_ac1_quantizer_matches_exhaustive_search():
    rng = np.random.default_rng(2024)
    t0 = time.perf_counter()
    mismatches = 0
    for _ in range(1000):
        k = int(rng.integers(1, 65))
        h, w = (int(v) for v in rng.integers(1, 9, size=2))
        d = int(rng.integers(1, 9))
        z = torch.from_numpy(rng.normal(size=(1, d, h, w)))
        cb = torch.from_numpy(rng.normal(size=(k, d)))
        got = quantize(z, cb).indices.numpy().ravel()
        flat = z[0].permute(1, 2, 0).reshape(-1, d).numpy()
        dist = np.array([[sum((a - b) ** 2 for a, b in zip(row, code)) for code in cb.numpy()] for row in flat])
        mismatches += int((got != dist.argmin(axis=1)).sum())
    elapsed = time.perf_counter() - t0
    record("AC1", mismatches == 0 and elapsed < 10,
           f"1000 instances, {mismatches} index mismatches, {elapsed:.1f}s (limit 10s)")


# --------------------------------------------------------------------------- AC2


def test_ac2_straight_through_finite_differences():
    t0 = time.perf_counter()
    torch.manual_seed(0)
    vq = VQModel(VqTrainConfig(f=4, codebook_size=16, code_dim=3, widths=[8, 8, 8]), resolution=8).double()
    target = torch.rand(1, 3, 8, 8, dtype=torch.float64)
    worst = 0.0
    for trial in range(5):
        z = torch.randn(1, 3, 2, 2, dtype=torch.float64, requires_grad=True)
        loss = (vq.decode(z) - target).pow(2).sum()
        (grad,) = torch.autograd.grad(loss, z)
        q = vq.quantize(z.detach()).data
        f = lambda v: (vq.decoder(v) - target).pow(2).sum().item()  # noqa: E731
        fd = torch.zeros_like(q)
        eps = 1e-6
        for idx in np.ndindex(*q.shape):
            e = torch.zeros_like(q)
            e[idx] = eps
            fd[idx] = (f(q + e) - f(q - e)) / (2 * eps)
        worst = max(worst, ((grad - fd).norm() / fd.norm()).item())
    elapsed = time.perf_counter() - t0
    record("AC2", worst < 1e-4 and elapsed < 5,
           f"max relative error {worst:.2e} over 5 latents on 2x2 grids (limit 1e-4), {elapsed:.1f}s")


# --------------------------------------------------------------------------- AC3


def test_ac3_gaussian_score_oracle():
    t0 = time.perf_counter()
    mu, s0 = 0.5, 0.8
    g = torch.Generator().manual_seed(0)
    z0 = mu + s0 * torch.randn(8192, 3, 8, 8, generator=g)
    cfg = DiffusionConfig(conditional=False, sigma_data=s0, sigma_max=3 * s0, steps=1500, batch_size=64,
                          base_width=32, lr=2e-3)
    net = df.train_diffusion(z0, None, cfg, seed=0, log_every=0).net
    grid = [0.1, 0.2, 0.5, 1.0, 2.0]
    errors = []
    for t in grid:
        zt = mu + math.sqrt(s0 ** 2 + t ** 2) * torch.randn(256, 3, 8, 8, generator=g)
        with torch.no_grad():
            s = net(zt, None, t)
        true = -(zt - mu) / (s0 ** 2 + t ** 2)
        errors.append(((s - true).norm() / true.norm()).item())
    sched = df.sigma_schedule(cfg.sigma_min, cfg.sigma_max, cfg.rho, cfg.num_steps)
    start = mu + math.sqrt(s0 ** 2 + cfg.sigma_max ** 2) * torch.randn(512, 3, 8, 8, generator=g)
    end = df.sample(start, None, sched, net)
    mean_err = abs(end.mean().item() - mu) / mu
    std_err = abs(end.std().item() - s0) / s0
    elapsed = time.perf_counter() - t0
    ok = max(errors) < 0.1 and mean_err < 0.1 and std_err < 0.1 and elapsed < 600
    record("AC3", ok, f"score rel. L2 error {max(errors):.3f} max over t={grid} (limit 0.1); "
                      f"endpoint mean err {mean_err:.1%}, std err {std_err:.1%} over 512 (limit 10%); {elapsed:.0f}s")


# --------------------------------------------------------------------------- AC4


def test_ac4_heun_order():
    t0 = time.perf_counter()
    mu, s0, t_max = 0.5, 0.7, 2.0

    def score(z, c, t):
        return -(z - mu) / (s0 ** 2 + float(t) ** 2)

    z = torch.linspace(-2, 2, 9, dtype=torch.float64).view(1, 9, 1, 1) * math.sqrt(s0 ** 2 + t_max ** 2) + mu
    exact = mu + (z - mu) * s0 / math.sqrt(s0 ** 2 + t_max ** 2)
    errs = []
    for n in (16, 32, 64):
        sched = df.sigma_schedule(1e-3, t_max, 7.0, n)
        errs.append((df.sample(z, None, sched, score) - exact).abs().max().item())
    ratios = [a / b for a, b in zip(errs, errs[1:])]
    elapsed = time.perf_counter() - t0
    record("AC4", all(3 <= r <= 5 for r in ratios) and elapsed < 60,
           f"error ratios for N 16->32->64: {', '.join(f'{r:.2f}' for r in ratios)} (need [3, 5]), {elapsed:.1f}s")


# --------------------------------------------------------------------------- AC5


def test_ac5_compression_factor_ablation():
    t0 = time.perf_counter()
    cfg = load_config(TOY_CONFIG)
    corpus = make_corpus(16, 4, cfg.resolution, seed=0)
    images = torch.from_numpy(corpus.images)
    psnrs = {}
    for f in (4, 32):
        vcfg = VqTrainConfig(**{**vars(cfg.vq), "f": f})
        model = train_vqvae(images, vcfg, cfg.resolution, seed=0, log_every=0).model
        with torch.no_grad():
            rec = model.decode(model.encode(images))
        psnrs[f] = float(np.mean([metrics.psnr(a, b) for a, b in zip(rec, images)]))
    gap = psnrs[4] - psnrs[32]
    elapsed = time.perf_counter() - t0
    record("AC5", gap >= 2.0 and elapsed < 1800,
           f"PSNR f=4 {psnrs[4]:.2f} dB vs f=32 {psnrs[32]:.2f} dB, gap {gap:.2f} dB (need >= 2) "
           f"on 64 images, {cfg.vq.steps} steps each, {elapsed:.0f}s")


# --------------------------------------------------------------------------- AC6


def test_ac6_restoration_beats_input(toy_run, ablation):
    reports, elapsed = ablation
    deg, res = reports["degraded"], reports["guidance+mask"]
    fd_in = np.array([r["feat_dist"] for r in deg.records])
    fd_out = np.array([r["feat_dist"] for r in res.records])
    frac = float((fd_out < fd_in).mean())
    ids_in, ids_out = deg.aggregates["mean_ids"], res.aggregates["mean_ids"]
    record("AC6", frac >= 0.85 and ids_out > ids_in and elapsed < 1800,
           f"feat_dist improved on {frac:.0%} of {len(fd_in)} held-out pairs (need 85%); "
           f"mean IDS {ids_out:.4f} restored vs {ids_in:.4f} input")


# --------------------------------------------------------------------------- AC7


def test_ac7_guidance_and_mask_directions(ablation):
    reports, _ = ablation
    agg = {k: reports[k].aggregates for k in ("diffusion-only", "guidance", "guidance+mask")}
    base, guided, masked = agg["diffusion-only"], agg["guidance"], agg["guidance+mask"]
    a = guided["mean_ids"] > base["mean_ids"] and guided["mean_feat_dist"] > base["mean_feat_dist"]
    b = (masked["mean_feat_dist"] <= 1.05 * base["mean_feat_dist"]
         and abs(masked["mean_ids"] - guided["mean_ids"]) <= 0.02)
    detail = (f"IDS/feat_dist: unguided {base['mean_ids']:.4f}/{base['mean_feat_dist']:.4f}, "
              f"guided {guided['mean_ids']:.4f}/{guided['mean_feat_dist']:.4f}, "
              f"masked {masked['mean_ids']:.4f}/{masked['mean_feat_dist']:.4f}; (a) {a}, (b) {b}")
    record("AC7", a and b, detail)


# --------------------------------------------------------------------------- AC8


class _ZeroMask(torch.nn.Module):
    def forward(self, z0_hat, z_d):
        return torch.zeros_like(z0_hat)


def test_ac8_guidance_neutrality(toy_run):
    pool = toy_run.pairs("eval")
    deg, names = pool.degraded[:16], pool.names[:16]
    plain = toy_run.restore(deg, names, RestoreOptions(guidance=False))
    zero_gamma = toy_run.restore(deg, names, RestoreOptions(scale=0.0))
    # mask identically zero with a positive scale, driven through the same sampler
    vq, irn, emb = toy_run.vq(), toy_run.irn(), toy_run.embedder()
    net, _ = toy_run.score()
    sched = toy_run.schedule()
    with torch.no_grad():
        x_id = irn(deg)
        z_d = vq.encode(deg)
        z_init = toy_run._init_latents(x_id, names, sched)
    hook = gd.make_guidance_hook(vq.decode, emb, x_id, z_d, toy_run.cfg.guidance.scale, _ZeroMask())
    with torch.no_grad():
        zero_mask = vq.decode(df.sample(z_init, z_d, sched, net, hook))
    ok = torch.equal(plain, zero_gamma) and torch.equal(plain, zero_mask)
    record("AC8", ok, f"gamma=0: {torch.equal(plain, zero_gamma)}, mask=0: {torch.equal(plain, zero_mask)} "
                      f"(bit-identical to unguided on {len(names)} images)")


# --------------------------------------------------------------------------- AC9


def test_ac9_degradation_identity_and_sizes():
    rng = np.random.default_rng(9)
    x = rng.uniform(0, 1, size=(3, 64, 64))
    ident = dg.DegradationParams(kernel=dg.gaussian_kernel(0.0), sigma=0.0, s=1, q=100)
    err = float(np.abs(dg.apply(x, ident) - x).max())
    big = rng.uniform(0, 1, size=(3, 512, 512))
    p = dg.DegradationParams(kernel=dg.gaussian_kernel(2.0), sigma=0.05, s=32, q=50, noise_seed=1)
    shape = dg.apply(big, p).shape
    record("AC9", err <= 1 / 255 and shape == (3, 16, 16),
           f"identity round-trip max error {err * 255:.3f}/255 (limit 1/255); s=32 on 512x512 -> {shape[1]}x{shape[2]}")


# --------------------------------------------------------------------------- AC10


def _brute_psnr(a, b):
    mse = sum((x - y) ** 2 for x, y in zip(a.ravel().tolist(), b.ravel().tolist())) / a.size
    return 10 * math.log10(1.0 / mse)


def _brute_ssim(a, b):
    # direct windowed sums with an explicit 11x11 Gaussian and reflect padding
    r = 5
    ax = np.arange(-r, r + 1)
    g1 = np.exp(-0.5 * (ax / 1.5) ** 2)
    win = np.outer(g1, g1) / np.outer(g1, g1).sum()
    vals = []
    for x, y in zip(a, b):
        px, py = np.pad(x, r, mode="symmetric"), np.pad(y, r, mode="symmetric")
        h, w = x.shape
        out = np.empty((h, w))
        for i in range(h):
            for j in range(w):
                wx, wy = px[i:i + 11, j:j + 11], py[i:i + 11, j:j + 11]
                mx, my = (win * wx).sum(), (win * wy).sum()
                vx = (win * wx * wx).sum() - mx * mx
                vy = (win * wy * wy).sum() - my * my
                cxy = (win * wx * wy).sum() - mx * my
                out[i, j] = ((2 * mx * my + 1e-4) * (2 * cxy + 9e-4)) / ((mx * mx + my * my + 1e-4) * (vx + vy + 9e-4))
        vals.append(out[r:-r, r:-r].mean())
    return float(np.mean(vals))


def test_ac10_metric_oracles():
    rng = np.random.default_rng(10)
    psnr_err = ssim_err = 0.0
    for _ in range(5):
        a = rng.uniform(0, 1, size=(3, 24, 24))
        b = np.clip(a + rng.normal(0, rng.uniform(0.02, 0.3), size=a.shape), 0, 1)
        psnr_err = max(psnr_err, abs(metrics.psnr(a, b) - _brute_psnr(a, b)))
        ssim_err = max(ssim_err, abs(metrics.ssim(a, b) - _brute_ssim(a, b)))
    e1 = rng.normal(size=(300, 5))
    e2 = rng.normal(0.4, 1.3, size=(300, 5)) @ rng.normal(size=(5, 5))
    c1, c2 = np.cov(e1, rowvar=False), np.cov(e2, rowvar=False)
    want = (np.sum((e1.mean(0) - e2.mean(0)) ** 2) + np.trace(c1 + c2)
            - 2 * np.trace(scipy.linalg.sqrtm(c1 @ c2).real))
    fd_rel = abs(metrics.frechet_distance(e1, e2) - want) / want
    axioms = 0
    for _ in range(100):
        x = rng.uniform(0, 1, size=(3, 16, 16))
        e = rng.normal(size=(10, 4))
        axioms += (metrics.psnr(x, x) == metrics.PSNR_CAP and abs(metrics.ssim(x, x) - 1) < 1e-12
                   and metrics.frechet_distance(e, e) < 1e-8
                   and metrics.lmd(x, x, metrics.centroid_landmarks) == 0)
    ok = psnr_err < 1e-6 and ssim_err < 1e-4 and fd_rel < 0.05 and axioms == 100
    record("AC10", ok, f"psnr err {psnr_err:.1e} (1e-6), ssim err {ssim_err:.1e} (1e-4), "
                       f"frechet rel err {fd_rel:.1e} (5%), identity axioms {axioms}/100")


# --------------------------------------------------------------------------- AC11


def test_ac11_determinism_audit(toy_run, tmp_path):
    ref = toy_run.manifest()
    result = rerun_from_manifest(toy_run.manifest_path, tmp_path / "rerun")
    stages = result["compared"]
    ok = not result["mismatched"] and "restored_eval" in stages and len(stages) == 6
    record("AC11", ok, f"rerun from manifest: {len(stages)} hashes compared ({', '.join(stages)}), "
                       f"mismatched {result['mismatched'] or 'none'}; restored sha "
                       f"{ref['stages']['restored_eval']['sha256'][:12]}")
