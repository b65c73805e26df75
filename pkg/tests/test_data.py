import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from PIL import Image
from scipy.stats import multivariate_normal

from ecgan_lab.data import (
    OracleMixture,
    bayes_posterior,
    load_image_dataset,
    make_dataset,
    read_record_file,
    ring_mixture,
    sample_mixture,
    to_uint8,
    write_record_file,
)


def test_degenerate_single_class():
    mix = OracleMixture(means=[[1.0, -2.0]], covs=[1e-12 * np.eye(2)], priors=[1.0])
    data = sample_mixture(mix, 100, seed=0)
    np.testing.assert_allclose(data.x, np.tile([1.0, -2.0], (100, 1)), atol=1e-4)
    assert np.all(data.y == 0)


def test_class_counts_within_binomial_band():
    n, k = 100_000, 8
    data = sample_mixture(ring_mixture(k), n, seed=1)
    counts = np.bincount(data.y, minlength=k)
    sigma = math.sqrt(n * (1 / k) * (1 - 1 / k))
    assert np.all(np.abs(counts - n / k) <= 4 * sigma)


def test_sampling_deterministic_per_seed():
    a = sample_mixture(ring_mixture(), 500, seed=3)
    b = sample_mixture(ring_mixture(), 500, seed=3)
    c = sample_mixture(ring_mixture(), 500, seed=4)
    assert np.array_equal(a.x, b.x) and np.array_equal(a.y, b.y)
    assert not np.array_equal(a.x, c.x)


def test_ring_geometry():
    mix = ring_mixture()
    np.testing.assert_allclose(np.linalg.norm(mix.means, axis=1), 5.0)
    np.testing.assert_allclose(mix.covs, np.repeat(0.25 * np.eye(2)[None], 8, axis=0))
    np.testing.assert_allclose(mix.priors, np.full(8, 1 / 8))


def test_sample_moments_match_mixture():
    mix = ring_mixture()
    data = sample_mixture(mix, 200_000, seed=2)
    mu, cov = mix.moments()
    np.testing.assert_allclose(data.x.mean(0), mu, atol=0.05)
    np.testing.assert_allclose(np.cov(data.x.T), cov, atol=0.1)


@pytest.mark.parametrize("kw", [
    dict(priors=[0.6, 0.6]),
    dict(covs=[np.eye(2), -np.eye(2)]),
    dict(covs=[np.eye(2), [[1.0, 0.5], [0.0, 1.0]]]),
])
def test_mixture_invariants(kw):
    base = dict(means=[[0.0, 0.0], [1.0, 1.0]], covs=[np.eye(2), np.eye(2)], priors=[0.5, 0.5])
    base.update(kw)
    with pytest.raises((ValueError, np.linalg.LinAlgError)):
        OracleMixture(**base)


# -- Bayes oracle


def test_posterior_at_means():
    mix = ring_mixture()
    assert np.array_equal(bayes_posterior(mix, mix.means).argmax(1), np.arange(8))


def test_identical_components_give_priors():
    mix = OracleMixture(means=[[0.0, 0.0]] * 3, covs=[np.eye(2)] * 3, priors=[0.2, 0.3, 0.5])
    x = np.random.default_rng(0).normal(size=(10, 2))
    np.testing.assert_allclose(bayes_posterior(mix, x), np.tile([0.2, 0.3, 0.5], (10, 1)), atol=1e-12)


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 2**31))
def test_posterior_matches_density_ratios(seed):
    rng = np.random.default_rng(seed)
    k, d = int(rng.integers(2, 6)), int(rng.integers(1, 4))
    a = rng.normal(size=(k, d, d))
    covs = a @ np.swapaxes(a, 1, 2) + 0.5 * np.eye(d)
    mix = OracleMixture(rng.normal(size=(k, d)), covs, rng.dirichlet(np.ones(k)))
    x = rng.normal(size=(20, d))
    dens = np.stack([mix.priors[j] * multivariate_normal(mix.means[j], covs[j]).pdf(x).reshape(-1)
                     for j in range(k)], axis=1)
    post = bayes_posterior(mix, x)
    np.testing.assert_allclose(post.sum(1), 1.0, atol=1e-12)
    np.testing.assert_allclose(post, dens / dens.sum(1, keepdims=True), atol=1e-9)


# -- image data


def _write_png(path, value, shape=(4, 4, 3)):
    Image.fromarray(np.full(shape, value, dtype=np.uint8)).save(path)


def test_empty_directory_rejected(tmp_path):
    with pytest.raises(ValueError):
        load_image_dataset(tmp_path)


def test_folder_of_two_classes(tmp_path):
    for cls, vals in (("cat", (0, 255)), ("dog", (10, 20))):
        (tmp_path / cls).mkdir()
        for i, v in enumerate(vals):
            _write_png(tmp_path / cls / f"{i}.png", v)
    data = load_image_dataset(tmp_path)
    assert len(data) == 4 and data.num_classes == 2
    assert data.y.tolist() == [0, 0, 1, 1]
    assert data.sample_shape == (3, 4, 4)
    assert data.x.min() >= -1 and data.x.max() <= 1
    assert data.x[0].min() == -1 and data.x[1].max() == 1


def test_folder_rejects_mixed_shapes(tmp_path):
    (tmp_path / "a").mkdir()
    _write_png(tmp_path / "a" / "0.png", 1)
    _write_png(tmp_path / "a" / "1.png", 1, shape=(8, 8, 3))
    with pytest.raises(ValueError):
        load_image_dataset(tmp_path)


def test_record_round_trip(tmp_path):
    rng = np.random.default_rng(0)
    pixels = rng.integers(0, 256, size=(6, 5, 3, 2), dtype=np.uint8)
    labels = rng.integers(0, 4, size=6)
    path = write_record_file(tmp_path / "r.bin", pixels, labels, 4)
    got, got_labels, k = read_record_file(path)
    assert k == 4
    assert np.array_equal(got, pixels) and np.array_equal(got_labels, labels)
    data = load_image_dataset(path)
    assert np.array_equal(to_uint8(data.x), pixels)


def test_record_header_layout(tmp_path):
    path = write_record_file(tmp_path / "r.bin", np.zeros((1, 1, 1, 1), np.uint8), [2], 3)
    raw = path.read_bytes()
    assert raw[:20] == bytes([3, 0, 0, 0, 1, 0, 0, 0, 1, 0, 0, 0, 1, 0, 0, 0, 1, 0, 0, 0])
    assert raw[20:] == bytes([2, 0])


def test_truncated_record_reports_offset(tmp_path):
    path = write_record_file(tmp_path / "r.bin", np.zeros((3, 2, 2, 1), np.uint8), [0, 1, 0], 2)
    raw = path.read_bytes()
    path.write_bytes(raw[:-2])
    with pytest.raises(ValueError, match="byte offset 30"):
        read_record_file(path)


def test_bad_label_reports_offset(tmp_path):
    path = write_record_file(tmp_path / "r.bin", np.zeros((3, 2, 2, 1), np.uint8), [0, 1, 0], 2)
    raw = bytearray(path.read_bytes())
    raw[20 + 5 * 2] = 9
    path.write_bytes(bytes(raw))
    with pytest.raises(ValueError, match="byte offset 30"):
        read_record_file(path)


def test_truncated_header(tmp_path):
    (tmp_path / "r.bin").write_bytes(b"\x01\x00")
    with pytest.raises(ValueError, match="byte offset"):
        read_record_file(tmp_path / "r.bin")


def test_make_dataset_ring():
    data = make_dataset("ring8", n=100, seed=0)
    assert data.num_classes == 8 and data.x.shape == (100, 2) and data.oracle is not None
    np.testing.assert_allclose(data.label_marginal().sum(), 1.0)
