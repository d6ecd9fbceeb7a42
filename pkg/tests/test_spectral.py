import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pae.oracles import naive_dft2
from pae.spectral import (
    fft2, filter_image, generate_masks, ifft2, load_masks, mask_count, reflect_index,
    save_masks, symmetrize, window_mask,
)
from pae.tensor_core.errors import ConfigError, ShapeError


def test_roundtrip_and_parseval(rng):
    for _ in range(20):
        x = rng.uniform(-1, 1, size=(32, 32))
        X = fft2(x)
        assert np.abs(ifft2(X).real - x).max() <= 1e-9
        assert abs(np.sum(np.abs(X) ** 2) / x.size - np.sum(x * x)) / np.sum(x * x) <= 1e-8


def test_matches_direct_dft(rng):
    x = rng.standard_normal((8, 16))
    assert np.abs(fft2(x) - naive_dft2(x)).max() < 1e-10


def test_dc_is_centered():
    X = fft2(np.ones((16, 16)))
    assert X[8, 8] == pytest.approx(256.0)
    assert np.abs(X).sum() == pytest.approx(256.0)


def test_batched_fft(rng):
    x = rng.standard_normal((3, 16, 16))
    assert np.allclose(fft2(x)[1], fft2(x[1]))


def test_non_power_of_two_rejected():
    with pytest.raises(ConfigError):
        fft2(np.zeros((12, 16)))
    with pytest.raises(ShapeError):
        fft2(np.zeros(16))


@pytest.mark.parametrize("h,w,win,r,expected", [(32, 32, 8, 4, 49), (32, 32, 32, 4, 1), (16, 16, 4, 4, 16),
                                                (32, 32, 8, 8, 16), (32, 16, 8, 4, 21)])
def test_mask_count_formula(h, w, win, r, expected):
    assert mask_count(h, w, win, r) == expected
    assert len(generate_masks(h, w, win, r)) == expected


def test_scan_order():
    masks = generate_masks(32, 32, 8, 4)
    assert masks.origins[:3] == [(0, 0), (0, 4), (0, 8)]
    assert masks.origins[7] == (4, 0)
    assert masks.origins[-1] == (24, 24)


@pytest.mark.parametrize("w,r", [(0, 4), (33, 4), (8, 0)])
def test_invalid_mask_parameters(w, r):
    with pytest.raises(ConfigError):
        generate_masks(32, 32, w, r)


def test_reflect_index():
    assert reflect_index(0, 32) == 0
    assert reflect_index(16, 32) == 16
    assert reflect_index(17, 32) == 15


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 28), st.integers(0, 28), st.integers(1, 4))
def test_masks_are_point_symmetric(row, col, w):
    g = window_mask(32, 32, (row, col), w).grid
    idx = (32 - np.arange(32)) % 32
    assert np.array_equal(g, g[np.ix_(idx, idx)])
    assert set(np.unique(g)) <= {0.0, 1.0}


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 28), st.integers(0, 28), st.integers(0, 2**32 - 1))
def test_filtered_image_is_real(row, col, seed):
    x = np.random.default_rng(seed).standard_normal((32, 32))
    mask = window_mask(32, 32, (row, col), 4)
    field = ifft2(fft2(x) * mask.grid)
    assert np.abs(field.imag).max() < 1e-12


def test_symmetrize_idempotent(rng):
    g = (rng.uniform(size=(16, 16)) > 0.8).astype(float)
    s = symmetrize(g)
    assert np.array_equal(symmetrize(s), s)
    assert np.all(s >= g)


def test_all_ones_filter_is_identity(rng):
    x = rng.standard_normal((4, 32, 32))
    assert np.allclose(filter_image(x, np.ones((32, 32))), x, atol=1e-12)
    assert np.allclose(filter_image(x, np.zeros((32, 32))), 0.0)


def test_filter_keeps_in_band_tone():
    yy, xx = np.mgrid[0:32, 0:32]
    tone = np.cos(2 * np.pi * (-13 * yy / 32 - 12 * xx / 32))  # centered bin (3, 4)
    inside = window_mask(32, 32, (0, 4), 4)
    outside = window_mask(32, 32, (8, 8), 4)
    assert np.allclose(filter_image(tone, inside), tone, atol=1e-12)
    assert np.allclose(filter_image(tone, outside), 0.0, atol=1e-12)


def test_filter_shape_mismatch():
    with pytest.raises(ShapeError):
        filter_image(np.zeros((16, 16)), window_mask(32, 32, (0, 0), 8))


def test_masks_save_load(tmp_path):
    masks = generate_masks(32, 32, 8, 4)
    save_masks(masks, tmp_path)
    back = load_masks(tmp_path, r=4)
    assert back.origins == masks.origins
    assert np.array_equal(back.stack(), masks.stack())
    assert (tmp_path / "masks.txt").read_text().splitlines()[1] == "origin=(0,4) w=8"
