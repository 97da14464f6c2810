"""Stage orchestration: corpora, pair pools, training stages, restoration, ablation, run manifests."""

from __future__ import annotations

import hashlib
import json
import logging
import os
import tempfile
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
from PIL import Image

from . import degradation, diffusion, guidance, metrics
from .checkpoint import (CheckpointError, load_checkpoint, load_module, module_arrays,
                         save_checkpoint, tensor_digest)
from .config import PipelineConfig, VqTrainConfig, config_from_dict, derive_seed
from .features import get_extractor
from .toydata import make_corpus, to_uint8
from .vq import VQModel, train_vqvae

log = logging.getLogger(__name__)

STAGES = ("vqvae", "embedder", "diffusion", "irn", "mask")
PREREQUISITES = {
    "vqvae": (),
    "embedder": (),
    "diffusion": ("vqvae",),
    "irn": ("embedder",),
    "mask": ("vqvae", "embedder", "diffusion", "irn"),
}
ABLATION_ARMS = ("degraded", "irn", "vq-rec-f4", "vq-rec-f32", "diffusion-only", "guidance", "guidance+mask")
MANIFEST_NAME = "manifest.json"


class StageError(RuntimeError):
    """Failure tagged with the pipeline stage that raised it."""

    def __init__(self, stage: str, message: str):
        self.stage = stage
        super().__init__(f"[{stage}] {message}")


# --------------------------------------------------------------------------- corpora


@dataclass
class Corpus:
    images: torch.Tensor  # (N, 3, R, R) float32 in [0, 1]
    identities: np.ndarray  # (N,) int, -1 when unknown
    names: list[str]

    def __len__(self) -> int:
        return len(self.names)


def _fit_square(img: Image.Image, size: int) -> np.ndarray:
    w, h = img.size
    side = min(w, h)
    left, top = (w - side) // 2, (h - side) // 2
    img = img.crop((left, top, left + side, top + side))
    if side != size:
        img = img.resize((size, size), Image.BICUBIC)
    return np.asarray(img, dtype=np.float32).transpose(2, 0, 1) / 255.0


def load_image_dir(path: str | Path, resolution: int) -> Corpus:
    """Every PNG below ``path`` (sorted), center-cropped and resized to ``resolution``.

    An optional ``identities.json`` maps relative file names to integer identity labels.
    """
    root = Path(path)
    if not root.is_dir():
        raise FileNotFoundError(f"image directory not found: {root}")
    files = sorted(p for p in root.rglob("*.png") if p.is_file())
    if not files:
        raise FileNotFoundError(f"no PNG images under {root}")
    labels_file = root / "identities.json"
    labels = json.loads(labels_file.read_text()) if labels_file.is_file() else {}
    images, names, ids = [], [], []
    for f in files:
        name = f.relative_to(root).as_posix()
        with Image.open(f) as im:
            images.append(_fit_square(im.convert("RGB"), resolution))
        names.append(name)
        ids.append(int(labels.get(name, -1)))
    return Corpus(torch.from_numpy(np.stack(images)), np.asarray(ids), names)


def toy_corpus(cfg: PipelineConfig, split: str) -> Corpus:
    """Procedural faces. Both splits share identities; eval variants are rendered after train ones."""
    c = cfg.corpus
    full = make_corpus(c.toy_identities, c.toy_train_variants + c.toy_eval_variants, cfg.resolution,
                       seed=cfg.seeds.data)
    cut = c.toy_identities * c.toy_train_variants
    sl = slice(0, cut) if split == "train" else slice(cut, None)
    images = torch.from_numpy(full.images[sl].copy())
    names = [f"{split}_{i:05d}.png" for i in range(len(images))]
    return Corpus(images, full.identities[sl].copy(), names)


def load_corpus(cfg: PipelineConfig, split: str) -> Corpus:
    if split not in ("train", "eval"):
        raise ValueError(f"unknown split {split!r}")
    path = cfg.corpus.train_dir if split == "train" else cfg.corpus.eval_dir
    if path:
        return load_image_dir(path, cfg.resolution)
    return toy_corpus(cfg, split)


@dataclass
class PairPool:
    clean: torch.Tensor
    degraded: torch.Tensor
    params: list
    names: list[str]
    identities: np.ndarray


def build_pairs(cfg: PipelineConfig, corpus: Corpus, split: str, variants: int = 1) -> PairPool:
    """Degraded pairs; pair (i, v) uses the sub-seed derived from (data seed, split, name, v)."""
    clean, deg, params, names, ids = [], [], [], [], []
    imgs = corpus.images.numpy()
    for v in range(variants):
        seeds = [derive_seed(cfg.seeds.data, "pair", split, n, v) for n in corpus.names]
        c, d, p = degradation.make_pairs(imgs, seeds, cfg.degradation, cfg.resolution)
        clean.append(c)
        deg.append(d)
        params += p
        names += corpus.names if variants == 1 else [f"{n}#{v}" for n in corpus.names]
        ids.append(corpus.identities)
    return PairPool(torch.from_numpy(np.concatenate(clean)), torch.from_numpy(np.concatenate(deg)),
                    params, names, np.concatenate(ids))


# --------------------------------------------------------------------------- image io


def write_png(img, path: str | Path) -> None:
    """Write a (3, H, W) float image atomically."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    arr = img.detach().cpu().numpy() if isinstance(img, torch.Tensor) else np.asarray(img)
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", suffix=".png", dir=path.parent)
    os.close(fd)
    try:
        Image.fromarray(to_uint8(arr)).save(tmp, format="PNG")
        os.replace(tmp, path)
    finally:
        if os.path.exists(tmp):
            os.unlink(tmp)


def image_digest(images: torch.Tensor) -> str:
    """sha256 over the 8-bit encoding of a stack of images (what lands in the PNGs)."""
    h = hashlib.sha256()
    for img in images:
        h.update(to_uint8(img.detach().cpu().numpy()).tobytes())
    return h.hexdigest()


def _atomic_json(path: Path, payload) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", dir=path.parent)
    with os.fdopen(fd, "w") as fh:
        json.dump(payload, fh, indent=1, sort_keys=True)
    os.replace(tmp, path)


# --------------------------------------------------------------------------- run


@dataclass
class RestoreOptions:
    guidance: bool = True
    use_mask: bool = True
    scale: float | None = None
    num_steps: int | None = None


class Run:
    """A run directory: checkpoints/<stage>.ckpt plus manifest.json."""

    def __init__(self, cfg: PipelineConfig, out_dir: str | Path | None = None):
        cfg.validate()
        self.cfg = cfg
        self.out = Path(out_dir if out_dir is not None else cfg.out_dir)
        self._cache: dict[str, object] = {}
        self._pools: dict[str, PairPool] = {}

    # ---- manifest

    @property
    def manifest_path(self) -> Path:
        return self.out / MANIFEST_NAME

    def checkpoint_path(self, stage: str) -> Path:
        return self.out / "checkpoints" / f"{stage}.ckpt"

    def manifest(self) -> dict:
        if self.manifest_path.is_file():
            return json.loads(self.manifest_path.read_text())
        return {"stages": {}, "metrics": {}}

    def _update_manifest(self, key: str, name: str, value) -> None:
        data = self.manifest()
        # the manifest always carries the config of the latest write
        data["config"] = self.cfg.to_dict()
        data["config_digest"] = self.cfg.digest()
        data["seeds"] = {"data": self.cfg.seeds.data, "init": self.cfg.seeds.init,
                         "sampler": self.cfg.seeds.sampler}
        data.setdefault(key, {})[name] = value
        _atomic_json(self.manifest_path, data)

    # ---- checkpoints

    def _save(self, stage: str, arrays: dict, meta: dict, steps: int) -> str:
        meta = {"stage": stage, "config_digest": self.cfg.digest(), "steps": steps, **meta}
        digest = save_checkpoint(self.checkpoint_path(stage), arrays, meta)
        self._update_manifest("stages", stage, {"sha256": digest, "path": f"checkpoints/{stage}.ckpt",
                                                "steps": steps, "config_digest": self.cfg.digest()})
        log.info("stage %s saved (%s)", stage, digest[:12])
        return digest

    def _load(self, stage: str) -> tuple[dict, dict]:
        path = self.checkpoint_path(stage)
        if not path.is_file():
            raise StageError(stage, f"checkpoint missing at {path}; run stage {stage!r} first")
        try:
            arrays, meta = load_checkpoint(path)
        except CheckpointError as exc:
            raise StageError(stage, str(exc)) from None
        return arrays, meta

    def has(self, stage: str) -> bool:
        return self.checkpoint_path(stage).is_file()

    # ---- data

    def corpus(self, split: str) -> Corpus:
        key = f"corpus:{split}"
        if key not in self._cache:
            try:
                self._cache[key] = load_corpus(self.cfg, split)
            except (FileNotFoundError, OSError, ValueError) as exc:
                raise StageError("data", str(exc)) from None
        return self._cache[key]  # type: ignore[return-value]

    def pairs(self, split: str) -> PairPool:
        if split not in self._pools:
            variants = self.cfg.diffusion.pair_variants if split == "train" else 1
            self._pools[split] = build_pairs(self.cfg, self.corpus(split), split, variants)
        return self._pools[split]

    # ---- component loaders

    def _restore_module(self, stage, module, arrays, prefix):
        try:
            load_module(module, arrays, prefix)
        except (CheckpointError, RuntimeError) as exc:
            raise StageError(stage, f"checkpoint does not fit the configured architecture: {exc}") from None
        return module.eval().requires_grad_(False)

    def vq(self, stage: str = "vqvae") -> VQModel:
        if stage not in self._cache:
            arrays, meta = self._load(stage)
            vcfg = VqTrainConfig(**meta["vq_config"])
            self._cache[stage] = self._restore_module(stage, VQModel(vcfg, self.cfg.resolution), arrays, "vq")
        return self._cache[stage]  # type: ignore[return-value]

    def embedder(self) -> torch.nn.Module:
        if "embedder" not in self._cache:
            g = self.cfg.guidance
            arrays = self._load("embedder")[0] if g.embedder == "toy" else None
            self._cache["embedder"] = guidance.build_embedder(g.embedder, arrays, g.embed_dim)
        return self._cache["embedder"]  # type: ignore[return-value]

    def score(self) -> tuple[diffusion.ScoreNetwork, float]:
        if "diffusion" not in self._cache:
            arrays, meta = self._load("diffusion")
            d = self.cfg.diffusion
            net = diffusion.ScoreNetwork(self.cfg.vq.code_dim, d.base_width, d.conditional, meta["sigma_data"])
            self._restore_module("diffusion", net, arrays, "score")
            self._cache["diffusion"] = (net, float(meta["sigma_max"]))
        return self._cache["diffusion"]  # type: ignore[return-value]

    def irn(self) -> guidance.IdentityRecoveryNet:
        if "irn" not in self._cache:
            arrays, _ = self._load("irn")
            net = guidance.IdentityRecoveryNet(self.cfg.guidance.irn_width)
            self._cache["irn"] = self._restore_module("irn", net, arrays, "irn")
        return self._cache["irn"]  # type: ignore[return-value]

    def mask_net(self) -> guidance.MaskNet:
        if "mask" not in self._cache:
            arrays, _ = self._load("mask")
            g = self.cfg.guidance
            net = guidance.MaskNet(self.cfg.vq.code_dim, g.mask_width, g.mask_layers)
            self._cache["mask"] = self._restore_module("mask", net, arrays, "mask")
        return self._cache["mask"]  # type: ignore[return-value]

    def schedule(self, num_steps: int | None = None) -> torch.Tensor:
        _, sigma_max = self.score()
        d = self.cfg.diffusion
        return diffusion.sigma_schedule(d.sigma_min, sigma_max, d.rho, num_steps or d.num_steps)

    # ---- stages

    def train(self, stage: str, steps: int | None = None) -> str:
        if stage not in STAGES:
            raise StageError(stage, f"unknown stage; expected one of {STAGES}")
        for dep in PREREQUISITES[stage]:
            if not self.has(dep):
                raise StageError(stage, f"prerequisite stage {dep!r} has no checkpoint in {self.out}")
        seed = derive_seed(self.cfg.seeds.init, stage)
        try:
            return getattr(self, f"_train_{stage}")(seed, steps)
        except StageError:
            raise
        except Exception as exc:  # tag anything else with the stage name
            raise StageError(stage, f"{type(exc).__name__}: {exc}") from exc

    def train_all(self, steps: dict[str, int | None] | None = None) -> dict[str, str]:
        steps = steps or {}
        return {s: self.train(s, steps.get(s)) for s in STAGES}

    def _train_vqvae(self, seed: int, steps: int | None, stage: str = "vqvae", vcfg: VqTrainConfig | None = None) -> str:
        vcfg = vcfg or self.cfg.vq
        steps = vcfg.steps if steps is None else steps
        res = train_vqvae(self.corpus("train").images, vcfg, self.cfg.resolution, seed, steps, log_every=0)
        self._cache[stage] = res.model.requires_grad_(False)
        meta = {"vq_config": vars(vcfg) | {"widths": list(vcfg.widths), "betas": list(vcfg.betas)},
                "dead_fraction": res.dead_fraction, "final": res.history[-1] if res.history else {}}
        return self._save(stage, module_arrays(res.model, "vq"), meta, steps)

    def _train_embedder(self, seed: int, steps: int | None) -> str:
        g = self.cfg.guidance
        if g.embedder != "toy":
            net = guidance.build_embedder(g.embedder, None, g.embed_dim)
            self._cache["embedder"] = net
            return self._save("embedder", module_arrays(net, "embedder"), {"kind": g.embedder}, 0)
        corpus = self.corpus("train")
        if (corpus.identities < 0).any():
            raise StageError("embedder", "training the toy embedder needs identities.json labels")
        steps = g.embedder_steps if steps is None else steps
        net = guidance.train_embedder(corpus.images, corpus.identities, g, seed, steps)
        self._cache["embedder"] = net
        return self._save("embedder", module_arrays(net, "embedder"), {"kind": "toy"}, steps)

    @torch.no_grad()
    def _latent_pairs(self) -> tuple[torch.Tensor, torch.Tensor]:
        vq, pool = self.vq(), self.pairs("train")
        return vq.encode(pool.clean), vq.encode(pool.degraded)

    def _train_diffusion(self, seed: int, steps: int | None) -> str:
        z0, z_d = self._latent_pairs()
        steps = self.cfg.diffusion.steps if steps is None else steps
        res = diffusion.train_diffusion(z0, z_d, self.cfg.diffusion, seed, steps, log_every=0)
        self._cache["diffusion"] = (res.net.requires_grad_(False), res.sigma_max)
        meta = {"sigma_max": res.sigma_max, "sigma_data": res.sigma_data,
                "final_loss": float(np.mean(res.history[-50:])) if res.history else None}
        return self._save("diffusion", module_arrays(res.net, "score"), meta, steps)

    def _train_irn(self, seed: int, steps: int | None) -> str:
        pool = self.pairs("train")
        steps = self.cfg.guidance.irn_steps if steps is None else steps
        net, hist = guidance.train_irn(pool.clean, pool.degraded, self.embedder(), self.cfg.guidance,
                                       seed, steps, log_every=0)
        self._cache["irn"] = net
        return self._save("irn", module_arrays(net, "irn"), {"final_loss": float(np.mean(hist[-50:]))}, steps)

    def _train_mask(self, seed: int, steps: int | None) -> str:
        g = self.cfg.guidance
        steps = g.mask_steps if steps is None else steps
        vq, emb, irn = self.vq(), self.embedder(), self.irn()
        net, _ = self.score()
        frozen = tensor_digest(vq, emb, irn, net)
        corpus = self.corpus("train")
        # one degraded variant per training image keeps trajectory precomputation cheap
        pool = self.pairs("train")
        n = len(corpus)
        clean, deg, names = pool.clean[:n], pool.degraded[:n], pool.names[:n]
        sched = self.schedule()
        with torch.no_grad():
            x_id = irn(deg)
            z_d = vq.encode(deg)
            z_init = self._init_latents(x_id, names, sched)
            record: list[torch.Tensor] = []
            diffusion.sample(z_init, z_d, sched, net, record=record)
        traj = torch.stack(record, dim=1)
        res = guidance.train_mask(traj, sched[:-1], z_d, clean, x_id, net, vq.decode, emb,
                                  get_extractor(), g, g.scale, seed, steps)
        if tensor_digest(vq, emb, irn, net) != frozen:
            raise StageError("mask", "upstream weights changed during mask training")
        self._cache["mask"] = res.mask_net
        last = res.history[-1] if res.history else {}
        return self._save("mask", module_arrays(res.mask_net, "mask"), {"final": last, "gamma": g.scale}, steps)

    # ---- restoration

    def _init_latents(self, x_id: torch.Tensor, names: Sequence[str], sched: torch.Tensor) -> torch.Tensor:
        vq = self.vq()
        t0 = float(sched[0])
        out = []
        for img, name in zip(x_id, names):
            gen = torch.Generator().manual_seed(derive_seed(self.cfg.seeds.sampler, "restore", name))
            out.append(guidance.init_latent(img[None], vq.encode, t0, gen))
        return torch.cat(out)

    def restore(self, degraded: torch.Tensor, names: Sequence[str], opts: RestoreOptions | None = None,
                batch: int = 64) -> torch.Tensor:
        """Restore degraded images (already at working resolution). Deterministic per name."""
        opts = opts or RestoreOptions()
        if len(degraded) != len(names):
            raise StageError("restore", "one name per image required")
        g = self.cfg.guidance
        try:
            vq, irn, emb = self.vq(), self.irn(), self.embedder()
            net, _ = self.score()
            gamma = g.scale if opts.scale is None else opts.scale
            guided = opts.guidance and g.enabled and gamma > 0
            use_mask = guided and opts.use_mask and g.use_mask
            mask_net = self.mask_net() if use_mask else None
            sched = self.schedule(opts.num_steps)
        except StageError as exc:
            raise StageError("restore", str(exc)) from None
        outs = []
        for i in range(0, len(degraded), batch):
            xd = degraded[i:i + batch]
            with torch.no_grad():
                x_id = irn(xd)
                z_d = vq.encode(xd)
                z_init = self._init_latents(x_id, names[i:i + batch], sched)
            hook = guidance.make_guidance_hook(vq.decode, emb, x_id, z_d, gamma, mask_net) if guided else None
            z = diffusion.sample(z_init, z_d, sched, net, hook)
            if not torch.isfinite(z).all():
                raise StageError("restore", "sampler produced non-finite latents")
            with torch.no_grad():
                outs.append(vq.decode(z))
        return torch.cat(outs)

    def restore_eval(self, opts: RestoreOptions | None = None) -> tuple[PairPool, torch.Tensor]:
        pool = self.pairs("eval")
        return pool, self.restore(pool.degraded, pool.names, opts)

    def evaluate(self, restored: torch.Tensor, reference: torch.Tensor, names: Sequence[str]) -> metrics.MetricReport:
        return metrics.evaluate(restored, reference, self.embedder(), get_extractor(),
                                metrics.fixed_landmarks, names)

    def run_all(self, steps: dict[str, int | None] | None = None) -> dict:
        """Train every stage, restore the eval pairs, and record hashes and metrics in the manifest."""
        self.train_all(steps)
        pool, restored = self.restore_eval()
        report = self.evaluate(restored, pool.clean, pool.names)
        self._update_manifest("metrics", "eval", report.aggregates)
        self._update_manifest("stages", "restored_eval", {"sha256": image_digest(restored)})
        return self.manifest()

    # ---- ablation

    def ablate(self, arms: Sequence[str] = ABLATION_ARMS, scale: float | None = None,
               num_steps: int | None = None) -> dict[str, metrics.MetricReport]:
        """Evaluate each arm on the held-out pairs; vq-rec arms reconstruct the clean images."""
        unknown = set(arms) - set(ABLATION_ARMS)
        if unknown:
            raise StageError("ablate", f"unknown arms {sorted(unknown)}")
        pool = self.pairs("eval")
        reports = {}
        for arm in arms:
            out = self._arm_output(arm, pool, scale, num_steps)
            reports[arm] = self.evaluate(out, pool.clean, pool.names)
        return reports

    def ablation_vq(self) -> VQModel:
        stage = f"vqvae_f{self.cfg.ablation_f}"
        if not self.has(stage):
            vcfg = VqTrainConfig(**{**vars(self.cfg.vq), "f": self.cfg.ablation_f})
            self._train_vqvae(derive_seed(self.cfg.seeds.init, "vqvae"), None, stage, vcfg)
        return self.vq(stage)

    def _arm_output(self, arm: str, pool: PairPool, scale: float | None = None,
                    num_steps: int | None = None) -> torch.Tensor:
        with torch.no_grad():
            if arm == "degraded":
                return pool.degraded
            if arm == "irn":
                return self.irn()(pool.degraded)
            if arm == "vq-rec-f4":
                vq = self.vq()
                return vq.decode(vq.encode(pool.clean))
            if arm == "vq-rec-f32":
                vq = self.ablation_vq()
                return vq.decode(vq.encode(pool.clean))
        opts = {"diffusion-only": RestoreOptions(guidance=False, num_steps=num_steps),
                "guidance": RestoreOptions(use_mask=False, scale=scale, num_steps=num_steps),
                "guidance+mask": RestoreOptions(scale=scale, num_steps=num_steps)}[arm]
        return self.restore(pool.degraded, pool.names, opts)


def ablation_table(reports: dict[str, metrics.MetricReport]) -> list[dict]:
    rows = []
    for arm, rep in reports.items():
        row = {"arm": arm}
        row.update({k: v for k, v in rep.aggregates.items() if k != "count"})
        rows.append(row)
    return rows


def rerun_from_manifest(manifest_path: str | Path, out_dir: str | Path) -> dict:
    """Rebuild a run from its manifest into ``out_dir`` and report hash agreement."""
    ref = json.loads(Path(manifest_path).read_text())
    cfg = config_from_dict(ref["config"])
    if cfg.digest() != ref["config_digest"]:
        raise StageError("manifest", "config digest does not match the embedded config")
    steps = {k: v.get("steps") for k, v in ref["stages"].items() if k in STAGES}
    new = Run(cfg, out_dir).run_all(steps)
    compare = sorted(set(ref["stages"]) & set(STAGES + ("restored_eval",)))
    mismatched = [k for k in compare if ref["stages"][k]["sha256"] != new["stages"].get(k, {}).get("sha256")]
    return {"manifest": new, "compared": compare, "mismatched": mismatched}
