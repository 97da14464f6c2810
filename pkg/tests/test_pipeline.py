"""Run orchestration on a seconds-scale config: stage order, manifests, determinism, image IO."""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np
import pytest
import torch

from latentbfr.checkpoint import file_sha256
from latentbfr.config import load_config
from latentbfr.pipeline import (ABLATION_ARMS, STAGES, RestoreOptions, Run, StageError, image_digest,
                                load_image_dir, rerun_from_manifest, write_png)

TINY = Path(__file__).with_name("tiny.yaml")


@pytest.fixture(scope="module")
def tiny_run(tmp_path_factory):
    run = Run(load_config(TINY), tmp_path_factory.mktemp("tiny"))
    run.run_all()
    return run


def test_missing_prerequisite_is_stage_tagged(tmp_path):
    run = Run(load_config(TINY), tmp_path)
    with pytest.raises(StageError, match=r"^\[diffusion\] prerequisite stage 'vqvae'"):
        run.train("diffusion")
    with pytest.raises(StageError, match=r"^\[mask\]"):
        run.train("mask")


def test_unknown_stage_and_arm(tiny_run):
    with pytest.raises(StageError, match="unknown stage"):
        tiny_run.train("nope")
    with pytest.raises(StageError, match=r"^\[ablate\] unknown arms"):
        tiny_run.ablate(["nope"])


def test_restore_without_checkpoints_is_stage_tagged(tmp_path):
    run = Run(load_config(TINY), tmp_path)
    with pytest.raises(StageError, match=r"^\[restore\]"):
        run.restore(torch.zeros(1, 3, 16, 16), ["a.png"])


def test_manifest_records_every_stage(tiny_run):
    m = tiny_run.manifest()
    assert set(STAGES) | {"restored_eval"} <= set(m["stages"])
    for stage in STAGES:
        entry = m["stages"][stage]
        assert entry["sha256"] == file_sha256(tiny_run.out / entry["path"])
        assert entry["config_digest"] == tiny_run.cfg.digest()
    assert m["config_digest"] == tiny_run.cfg.digest()
    assert m["seeds"] == {"data": 0, "init": 1, "sampler": 2}
    assert m["metrics"]["eval"]["count"] == 2
    assert not list((tiny_run.out / "checkpoints").glob(".*")), "temporary files left behind"


def test_corrupt_checkpoint_is_stage_tagged(tiny_run, tmp_path):
    run = Run(tiny_run.cfg, tmp_path)
    ckpt = run.checkpoint_path("vqvae")
    ckpt.parent.mkdir(parents=True)
    ckpt.write_bytes(tiny_run.checkpoint_path("vqvae").read_bytes()[:100])
    with pytest.raises(StageError, match=r"^\[vqvae\]"):
        run.vq()


def test_restore_is_deterministic(tiny_run):
    pool = tiny_run.pairs("eval")
    fresh = Run(tiny_run.cfg, tiny_run.out)
    a = tiny_run.restore(pool.degraded, pool.names)
    b = fresh.restore(pool.degraded, pool.names)
    assert torch.equal(a, b)
    assert image_digest(a) == tiny_run.manifest()["stages"]["restored_eval"]["sha256"]
    for opts in (RestoreOptions(guidance=False), RestoreOptions(use_mask=False), RestoreOptions(scale=0.0)):
        assert tiny_run.restore(pool.degraded, pool.names, opts).shape == a.shape
    short = tiny_run.restore(pool.degraded, pool.names, RestoreOptions(num_steps=2))
    assert short.shape == a.shape


def test_rerun_from_manifest_matches(tiny_run, tmp_path):
    res = rerun_from_manifest(tiny_run.manifest_path, tmp_path)
    assert res["mismatched"] == []
    assert set(res["compared"]) == set(STAGES) | {"restored_eval"}


def test_rerun_rejects_tampered_config(tiny_run, tmp_path):
    m = json.loads(tiny_run.manifest_path.read_text())
    m["config"]["resolution"] = 32
    path = tmp_path / "manifest.json"
    path.write_text(json.dumps(m))
    with pytest.raises(StageError, match=r"^\[manifest\]"):
        rerun_from_manifest(path, tmp_path / "out")


def test_ablate_all_arms(tiny_run):
    reports = tiny_run.ablate()
    assert list(reports) == list(ABLATION_ARMS)
    for rep in reports.values():
        assert rep.aggregates["count"] == 2
        assert np.isfinite(rep.aggregates["mean_feat_dist"])


def test_image_dir_round_trip(tmp_path):
    rng = np.random.default_rng(0)
    imgs = rng.random((3, 3, 16, 16)).astype(np.float32)
    for i, img in enumerate(imgs):
        write_png(img, tmp_path / "sub" / f"{i}.png")
    (tmp_path / "identities.json").write_text(json.dumps({"sub/1.png": 7}))
    corpus = load_image_dir(tmp_path, 16)
    assert corpus.names == ["sub/0.png", "sub/1.png", "sub/2.png"]
    assert corpus.identities.tolist() == [-1, 7, -1]
    assert np.abs(corpus.images.numpy() - imgs).max() <= 0.5 / 255 + 1e-6


def test_image_dir_crops_and_resizes(tmp_path):
    write_png(np.zeros((3, 20, 40), np.float32), tmp_path / "wide.png")
    assert load_image_dir(tmp_path, 16).images.shape == (1, 3, 16, 16)


def test_image_dir_errors(tmp_path):
    with pytest.raises(FileNotFoundError):
        load_image_dir(tmp_path / "missing", 16)
    with pytest.raises(FileNotFoundError, match="no PNG"):
        load_image_dir(tmp_path, 16)
