import numpy as np
import pytest
from hypothesis import given, strategies as st

from latentbfr import degradation as dg
from latentbfr import kernels
from latentbfr.config import DegradationRanges


def rand_img(seed, h=32, w=32):
    return np.random.default_rng(seed).uniform(0, 1, size=(3, h, w))


def identity_params(q=100):
    return dg.DegradationParams(kernel=dg.gaussian_kernel(0), sigma=0.0, s=1, q=q)


@pytest.mark.parametrize("backend", kernels.available_backends())
def test_identity_round_trip(backend):
    x = rand_img(0, 64, 48)
    y = dg.apply(x, identity_params())
    assert y.shape == x.shape
    assert np.abs(y - x).max() <= 1 / 255
    assert np.array_equal(dg.compress(x, 100, backend), dg.compress(x, 100, "python"))


def test_downscale_sizes():
    x = rand_img(1, 512, 512)
    p = dg.DegradationParams(kernel=dg.gaussian_kernel(1.0), sigma=0.0, s=32, q=90)
    assert dg.apply(x, p).shape == (3, 16, 16)
    assert dg.downsample(rand_img(2, 30, 30), 4).shape == (3, 8, 8)


@given(seed=st.integers(0, 10_000), width=st.floats(0.3, 3.0), s=st.sampled_from([1, 2, 4, 8]))
def test_blur_and_area_downsample_preserve_mean(seed, width, s):
    x = rand_img(seed)
    assert abs(dg.blur(x, dg.gaussian_kernel(width)).mean() - x.mean()) < 1e-12
    assert abs(dg.downsample(x, s).mean() - x.mean()) < 1e-12


def test_kernel_properties():
    k = dg.gaussian_kernel(1.5)
    assert k.shape[0] % 2 == 1 and abs(k.sum() - 1) < 1e-12
    np.testing.assert_allclose(k, k[::-1, ::-1])
    a = dg.gaussian_kernel(1.5, anisotropy=0.5, angle=0.3)
    assert abs(a.sum() - 1) < 1e-12 and (a >= 0).all()


def test_noise_is_seeded():
    x = rand_img(0)
    p = dg.DegradationParams(kernel=dg.gaussian_kernel(0), sigma=0.05, s=1, q=100, noise_seed=7)
    assert np.array_equal(dg.apply(x, p), dg.apply(x, p))
    assert not np.array_equal(dg.apply(x, p), dg.apply(x, p, rng_seed=8))


def test_lower_quality_loses_more():
    x = dg.blur(rand_img(3, 64, 64), dg.gaussian_kernel(1.0))
    errs = [np.abs(dg.compress(x, q) - x).mean() for q in (10, 50, 95)]
    assert errs[0] > errs[1] > errs[2]


def test_output_clamped():
    x = rand_img(4)
    p = dg.DegradationParams(kernel=dg.gaussian_kernel(0), sigma=0.5, s=1, q=20, noise_seed=1)
    y = dg.apply(x, p)
    assert y.min() >= 0 and y.max() <= 1


def test_sample_params_in_ranges_and_deterministic():
    r = DegradationRanges()
    for seed in range(50):
        p = dg.sample_params(seed, r)
        assert r.s_range[0] <= p.s <= r.s_range[1] and isinstance(p.s, int)
        assert r.q_range[0] <= p.q <= r.q_range[1]
        assert r.sigma_range[0] <= p.sigma <= r.sigma_range[1]
    assert dg.sample_params(3, r).to_json() == dg.sample_params(3, r).to_json()


def test_make_pair_shapes():
    x = rand_img(5).astype(np.float32)
    r = DegradationRanges(s_range=[2, 4])
    clean, deg, p = dg.make_pair(x, 11, r, 32)
    assert clean.shape == deg.shape == (3, 32, 32)
    c, d, ps = dg.make_pairs(np.stack([x, x]), [1, 2], r, 32)
    assert c.dtype == np.float32 and d.shape == (2, 3, 32, 32) and len(ps) == 2


@pytest.mark.parametrize("kw", [dict(sigma=-1.0), dict(s=0), dict(s=1.5), dict(q=0), dict(q=101),
                                dict(kernel=np.ones((2, 2)) / 4), dict(kernel=np.ones((3, 3)))])
def test_invalid_params(kw):
    base = dict(kernel=dg.gaussian_kernel(0), sigma=0.0, s=1, q=50)
    base.update(kw)
    with pytest.raises(ValueError):
        dg.DegradationParams(**base)


def test_bad_image_shape():
    with pytest.raises(ValueError):
        dg.apply(np.zeros((32, 32)), identity_params())
