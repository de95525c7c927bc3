from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from ddfusion.decomposition import (
    band_energy_report,
    dct2,
    frequency_decompose,
    idct2,
    low_mask,
    retinex_decompose,
    split_frequency,
)
from ddfusion.errors import InvalidInputError
from ddfusion.imaging import add_gaussian_noise, add_stripe_noise

from conftest import synthetic_scene


def _naive_dct2(plane: np.ndarray) -> np.ndarray:
    h, w = plane.shape
    out = np.zeros_like(plane)
    for u in range(h):
        for v in range(w):
            au = np.sqrt((1.0 if u == 0 else 2.0) / h)
            av = np.sqrt((1.0 if v == 0 else 2.0) / w)
            total = 0.0
            for i in range(h):
                for j in range(w):
                    total += (
                        plane[i, j]
                        * np.cos(np.pi * (2 * i + 1) * u / (2 * h))
                        * np.cos(np.pi * (2 * j + 1) * v / (2 * w))
                    )
            out[u, v] = au * av * total
    return out


def test_dct_of_constant_concentrates_in_dc():
    n, c = 16, 0.3
    spectrum = dct2(np.full((n, n), c))
    assert spectrum[0, 0] == pytest.approx(c * n)
    spectrum[0, 0] = 0.0
    assert np.max(np.abs(spectrum)) < 1e-12


def test_dct_matches_direct_sum():
    plane = np.random.default_rng(0).random((8, 10))
    np.testing.assert_allclose(dct2(plane), _naive_dct2(plane), atol=1e-10)


def test_idct_basis_function():
    h, w = 8, 12
    spectrum = np.zeros((h, w))
    spectrum[1, 0] = 1.0
    rows = np.sqrt(2.0 / h) * np.cos(np.pi * (2 * np.arange(h) + 1) / (2 * h))
    expected = np.broadcast_to((rows / np.sqrt(w))[:, None], (h, w))
    np.testing.assert_allclose(idct2(spectrum), expected, atol=1e-12)


@given(seed=st.integers(min_value=0, max_value=2**32 - 1))
def test_dct_roundtrip_linearity_and_parseval(seed):
    rng = np.random.default_rng(seed)
    x, y = rng.normal(size=(2, 12, 9))
    a, b = rng.normal(size=2)
    assert np.max(np.abs(idct2(dct2(x)) - x)) < 1e-10
    np.testing.assert_allclose(dct2(a * x + b * y), a * dct2(x) + b * dct2(y), atol=1e-10)
    assert np.sum(dct2(x) ** 2) == pytest.approx(np.sum(x**2), rel=1e-10)


def test_dct_of_zero_is_zero():
    assert np.array_equal(dct2(np.zeros((8, 8))), np.zeros((8, 8)))


def test_dct_rejects_small_planes():
    with pytest.raises(InvalidInputError):
        dct2(np.zeros((4, 8)))


def test_low_mask_extremes():
    only_dc = low_mask(16, 16, 0.0)
    assert only_dc.sum() == 1 and only_dc[0, 0]
    assert low_mask(16, 16, 2.0).all()
    with pytest.raises(InvalidInputError):
        low_mask(16, 16, 2.5)


@given(
    seed=st.integers(min_value=0, max_value=2**32 - 1),
    tau=st.floats(min_value=0.0, max_value=2.0),
)
def test_split_partitions_spectrum(seed, tau):
    spectrum = np.random.default_rng(seed).normal(size=(10, 14))
    pair = split_frequency(spectrum, tau)
    assert np.array_equal(pair.merged(), spectrum)
    assert not np.any((pair.low != 0) & (pair.high != 0))


def test_split_extremes():
    spectrum = np.random.default_rng(1).normal(size=(8, 8))
    zero = split_frequency(spectrum, 0.0)
    assert np.count_nonzero(zero.low) == 1
    full = split_frequency(spectrum, 2.0)
    assert not np.any(full.high)


def test_frequency_components_sum_to_input():
    plane = synthetic_scene(3, size=32)
    low, high = frequency_decompose(plane)
    assert low.shape == plane.shape
    assert np.max(np.abs(low + high - plane)) < 1e-10


def test_retinex_of_constant():
    pair = retinex_decompose(np.full((1, 16, 16), 0.4))
    np.testing.assert_allclose(pair.illumination, 0.4, atol=1e-12)
    np.testing.assert_allclose(pair.reflectance, 1.0, atol=1e-12)


@given(seed=st.integers(min_value=0, max_value=2**32 - 1))
def test_retinex_recomposes(seed):
    img = 1e-4 + (1 - 1e-4) * np.random.default_rng(seed).random((1, 16, 20))
    pair = retinex_decompose(img, sigma=3.0)
    assert np.all(pair.illumination >= 1e-4) and np.all(pair.illumination <= 1.0)
    assert np.all(pair.reflectance >= 0)
    assert np.max(np.abs(pair.recompose() - img)) < 1e-6


def test_retinex_reflectance_is_scale_invariant():
    img = 0.2 + 0.8 * np.random.default_rng(4).random((32, 32))
    full = retinex_decompose(img)
    half = retinex_decompose(0.5 * img)
    np.testing.assert_allclose(half.reflectance, full.reflectance, atol=1e-6)
    np.testing.assert_allclose(half.illumination, 0.5 * full.illumination, atol=1e-12)


def test_retinex_rejects_multichannel():
    with pytest.raises(InvalidInputError):
        retinex_decompose(np.zeros((3, 16, 16)))


def test_stripe_energy_is_denser_in_low_band():
    clean = np.full((1, 64, 64), 0.5)
    striped = add_stripe_noise(clean, 20.0, "vertical", seed=1)
    energy = band_energy_report(clean[0], striped[0])
    assert energy.low_density >= 2.0 * energy.high_density


def test_gaussian_energy_lands_in_high_band():
    clean = np.full((1, 64, 64), 0.5)
    noisy = add_gaussian_noise(clean, 10.0, seed=1)
    energy = band_energy_report(clean[0], noisy[0])
    assert energy.high > energy.low
    assert 0.5 < energy.high_density / energy.low_density < 2.0
    assert energy.low_count + energy.high_count == 64 * 64


@pytest.mark.parametrize("image", range(10))
def test_separation_holds_across_scenes(image):
    clean = synthetic_scene(500 + image, 64)
    for seed in (1, 2):
        striped = add_stripe_noise(clean, 20.0, "vertical", seed=seed)
        stripe = band_energy_report(clean[0], striped[0])
        assert stripe.low_density >= 2.0 * stripe.high_density
        noisy = add_gaussian_noise(clean, 20.0, seed=seed)
        gaussian = band_energy_report(clean[0], noisy[0])
        assert gaussian.high > gaussian.low


def test_band_energy_rejects_shape_mismatch():
    with pytest.raises(InvalidInputError):
        band_energy_report(np.zeros((8, 8)), np.zeros((8, 16)))
