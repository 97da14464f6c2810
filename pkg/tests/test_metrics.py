import csv
import json
import math

import numpy as np
import pytest
import scipy.linalg
import torch
from hypothesis import given, strategies as st
from skimage.metrics import structural_similarity

from latentbfr import metrics
from latentbfr.features import PerceptualExtractor, feature_distance


def pair(seed, noise=0.1, shape=(3, 32, 32)):
    rng = np.random.default_rng(seed)
    a = rng.uniform(0, 1, size=shape)
    return a, np.clip(a + rng.normal(0, noise, size=shape), 0, 1)


def brute_psnr(a, b):
    mse = sum((x - y) ** 2 for x, y in zip(a.ravel().tolist(), b.ravel().tolist())) / a.size
    return 10 * math.log10(1 / mse)


@given(seed=st.integers(0, 10_000), noise=st.floats(0.01, 0.5))
def test_psnr_matches_brute_force(seed, noise):
    a, b = pair(seed, noise, (3, 8, 8))
    assert abs(metrics.psnr(a, b) - brute_psnr(a, b)) < 1e-6


@pytest.mark.parametrize("seed", range(5))
def test_ssim_matches_skimage(seed):
    a, b = pair(seed, 0.05 + 0.05 * seed)
    want = structural_similarity(a, b, gaussian_weights=True, sigma=1.5, use_sample_covariance=False,
                                 data_range=1.0, channel_axis=0)
    assert abs(metrics.ssim(a, b) - want) < 1e-4


def test_frechet_matches_scipy_sqrtm():
    rng = np.random.default_rng(0)
    a = rng.normal(size=(200, 6))
    b = rng.normal(0.3, 1.2, size=(200, 6)) @ rng.normal(size=(6, 6)) * 0.5
    ca, cb = np.cov(a, rowvar=False), np.cov(b, rowvar=False)
    want = (np.sum((a.mean(0) - b.mean(0)) ** 2) + np.trace(ca) + np.trace(cb)
            - 2 * np.trace(scipy.linalg.sqrtm(ca @ cb).real))
    assert abs(metrics.frechet_distance(a, b) - want) <= 0.05 * abs(want)


def test_frechet_closed_form_for_scalars():
    # 1-D Gaussians: (m1 - m2)^2 + (s1 - s2)^2
    rng = np.random.default_rng(1)
    a, b = rng.normal(0, 1, 5000), rng.normal(2, 3, 5000)
    want = (a.mean() - b.mean()) ** 2 + (a.std(ddof=1) - b.std(ddof=1)) ** 2
    assert abs(metrics.frechet_distance(a, b) - want) < 1e-8


@pytest.mark.parametrize("seed", range(100))
def test_identity_axioms(seed):
    rng = np.random.default_rng(seed)
    x = rng.uniform(0, 1, size=(3, 16, 16))
    assert metrics.psnr(x, x) == metrics.PSNR_CAP
    assert abs(metrics.ssim(x, x) - 1) < 1e-12
    e = rng.normal(size=(20, 4))
    assert abs(metrics.frechet_distance(e, e)) < 1e-8
    assert metrics.lmd(x, x, metrics.centroid_landmarks) == 0


def test_frechet_errors():
    with pytest.raises(ValueError):
        metrics.frechet_distance(np.zeros((1, 3)), np.zeros((5, 3)))
    with pytest.raises(ValueError):
        metrics.frechet_distance(np.zeros((4, 3)), np.zeros((5, 2)))


def test_shape_mismatch():
    with pytest.raises(ValueError):
        metrics.psnr(np.zeros((3, 4, 4)), np.zeros((3, 4, 5)))
    with pytest.raises(ValueError):
        metrics.ssim(np.zeros((3, 8, 8)), np.zeros((3, 8, 8)))


def test_ids_and_lmd():
    emb = lambda x: torch.nn.functional.normalize(x.flatten(1)[:, :8], dim=1)  # noqa: E731
    a, b = pair(0)
    assert abs(metrics.ids(a, a, emb) - 1) < 1e-6
    assert -1 <= metrics.ids(a, b, emb) <= 1
    pts = lambda x: np.array([[0.0, 0.0], [1.0, 1.0]]) + x.mean() * np.array([3.0, 4.0])  # noqa: E731
    assert metrics.lmd(np.zeros((3, 4, 4)), np.ones((3, 4, 4)), pts) == pytest.approx(5.0)
    with pytest.raises(ValueError):
        metrics.lmd(a, a, lambda x: np.zeros((2, 3)))
    with pytest.raises(KeyError):
        metrics.get_landmark_fn("dlib")


def test_feature_distance_axioms():
    ext = PerceptualExtractor()
    x = torch.rand(3, 3, 16, 16)
    y = torch.rand(3, 3, 16, 16)
    assert torch.equal(feature_distance(ext, x, x), torch.zeros(3))
    assert torch.allclose(feature_distance(ext, x, y), feature_distance(ext, y, x))


def test_report_round_trip(tmp_path):
    ext = PerceptualExtractor()
    emb = lambda x: torch.nn.functional.normalize(x.mean(dim=(2, 3)), dim=1)  # noqa: E731
    ref = [pair(i)[0] for i in range(4)]
    out = [pair(i)[1] for i in range(4)]
    rep = metrics.evaluate(out, ref, emb, ext, names=["a", "b", "c", "d"])
    assert rep.aggregates["count"] == 4 and "frechet_distance" in rep.aggregates
    assert rep.aggregates["mean_psnr"] == pytest.approx(np.mean([r["psnr"] for r in rep.records]))
    rep.to_json(tmp_path / "r.json")
    rep.to_csv(tmp_path / "r.csv")
    loaded = json.loads((tmp_path / "r.json").read_text())
    assert loaded["records"][2]["name"] == "c"
    rows = list(csv.DictReader(open(tmp_path / "r.csv")))
    assert [r["name"] for r in rows] == ["a", "b", "c", "d"]
    assert float(rows[0]["psnr"]) == pytest.approx(rep.records[0]["psnr"])
