import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from w1ray.measures import (
    CorruptionSpec,
    Domain,
    EmpiricalMeasure,
    bounding_domain,
    corrupt,
    gaussian_kernel,
    make_empirical,
    psnr,
    sample,
    synth_dataset,
)


def test_uniform_default_weights():
    m = make_empirical([[0.0, 0.0], [1.0, 0.0], [0.0, 2.0]])
    assert np.allclose(m.weights, 1 / 3)
    assert m.dim == 2 and len(m) == 3


def test_weights_are_normalized():
    m = make_empirical([[0.0], [1.0]], [1.0, 3.0])
    assert np.allclose(m.weights, [0.25, 0.75])


@pytest.mark.parametrize(
    "points, weights",
    [
        ([[0.0, 1.0], [1.0]], None),
        ([[0.0], [1.0]], [1.0, -0.5]),
        ([[0.0], [1.0]], [0.0, 0.0]),
        ([], None),
    ],
)
def test_bad_construction_raises(points, weights):
    with pytest.raises(ValueError):
        make_empirical(points, weights)


def test_measure_arrays_are_frozen():
    m = make_empirical([[0.0], [1.0]])
    with pytest.raises(ValueError):
        m.points[0, 0] = 5.0


def test_direct_constructor_checks_sum():
    with pytest.raises(ValueError):
        EmpiricalMeasure(np.zeros((2, 1)), np.array([0.5, 0.6]))


@given(st.lists(st.floats(0.01, 100.0), min_size=1, max_size=30))
def test_normalization_property(ws):
    m = make_empirical(np.arange(len(ws), dtype=float)[:, None], ws)
    assert abs(m.weights.sum() - 1.0) <= 1e-12


def test_sample_is_deterministic():
    m = synth_dataset("two_moons", seed=3)
    assert np.array_equal(sample(m, 50, 7), sample(m, 50, 7))
    assert sample(m, 50, 7).shape == (50, 2)


def test_two_moons_byte_identical():
    a = synth_dataset("two_moons", seed=11, n=200)
    b = synth_dataset("two_moons", seed=11, n=200)
    assert a.points.tobytes() == b.points.tobytes()
    assert len(a) == 200


def test_atom_grid_corners():
    m = synth_dataset("atom_grid", k=2)
    got = {tuple(p) for p in m.points}
    assert got == {(0.0, 0.0), (0.0, 1.0), (1.0, 0.0), (1.0, 1.0)}
    assert np.allclose(m.weights, 0.25)


def test_ring_chord_lengths():
    m = synth_dataset("ring", n=8, radius=1.0)
    assert np.allclose(np.linalg.norm(m.points, axis=1), 1.0)
    for k in range(1, 8):
        chord = np.linalg.norm(m.points[0] - m.points[k])
        assert chord == pytest.approx(2 * math.sin(math.pi * k / 8), abs=1e-12)


def test_toy_images_in_unit_range():
    m = synth_dataset("toy_images", seed=0, count=6, size=8)
    assert m.shape == (8, 8) and m.dim == 64
    assert m.points.min() >= 0 and m.points.max() <= 1


@pytest.mark.parametrize("name, params", [("nope", {}), ("ring", {"n": 0}), ("ring", {"radius": -1.0})])
def test_bad_dataset_raises(name, params):
    with pytest.raises(ValueError):
        synth_dataset(name, **params)


def test_bounding_domain_margin():
    a = make_empirical([[0.0, 0.0], [1.0, 2.0]])
    dom = bounding_domain(a, margin=0.1)
    assert np.allclose(dom.lo, [-0.1, -0.2])
    assert np.allclose(dom.hi, [1.1, 2.2])
    assert dom.contains([0.5, 1.0])
    assert not dom.contains([1.2, 1.0])
    assert dom.diameter == pytest.approx(math.hypot(1.2, 2.4))


def test_domain_sampling_stays_inside(rng):
    dom = Domain(np.array([-1.0, 0.0]), np.array([1.0, 3.0]))
    assert dom.contains(dom.sample_uniform(500, rng)).all()


def test_psnr_identity_and_offset():
    x = np.full(16, 0.5)
    assert psnr(x, x) == math.inf
    assert psnr(x, x + 0.1) == pytest.approx(20.0, abs=1e-9)


def test_psnr_shape_mismatch():
    with pytest.raises(ValueError):
        psnr(np.zeros(4), np.zeros(5))


def test_noise_rejects_zero_sigma():
    with pytest.raises(ValueError):
        CorruptionSpec("gaussian_noise", 0.0)


def test_noise_is_deterministic_and_unclipped():
    m = synth_dataset("toy_images", seed=1)
    a = corrupt(m, CorruptionSpec("gaussian_noise", 0.3, seed=4))
    b = corrupt(m, CorruptionSpec("gaussian_noise", 0.3, seed=4))
    assert a.points.tobytes() == b.points.tobytes()
    assert a.points.min() < 0 or a.points.max() > 1
    assert np.array_equal(a.weights, m.weights)


def test_blur_requires_square_images():
    m = make_empirical(np.zeros((2, 6)))
    with pytest.raises(ValueError):
        corrupt(m, CorruptionSpec("gaussian_blur", 1.0))


def test_blur_preserves_constant_image():
    m = make_empirical(np.full((1, 64), 0.4), shape=(8, 8))
    out = corrupt(m, CorruptionSpec("gaussian_blur", 2.0, 5))
    assert np.allclose(out.points, 0.4)


def test_kernel_normalized():
    k = gaussian_kernel(5, 2.0)
    assert k.shape == (5, 5) and k.sum() == pytest.approx(1.0)
    assert np.allclose(k, k.T)


@settings(max_examples=10, deadline=None)
@given(st.sampled_from([0.1, 0.15, 0.2]), st.integers(0, 10_000))
def test_noise_psnr_close_to_law(sigma, seed):
    # mean over 100 images of 32x32; its spread is about 0.02 dB
    m = make_empirical(np.full((100, 32 * 32), 0.5), shape=(32, 32))
    noisy = corrupt(m, CorruptionSpec("gaussian_noise", sigma, seed=seed))
    assert abs(psnr(noisy.points, m.points).mean() + 20 * math.log10(sigma)) < 0.1
