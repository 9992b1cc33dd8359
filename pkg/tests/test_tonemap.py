"""Reinhard tone-mapping tests."""

from __future__ import annotations

import numpy as np
import pytest

from hdrkit.errors import ConfigError
from hdrkit.imgio import HdrImage, LdrImage
from hdrkit.tonemap import ReinhardParams, reinhard


def _hdr(arr):
    return HdrImage(np.asarray(arr, dtype=np.float32))


def test_all_zero_maps_to_all_zero():
    out = reinhard(_hdr(np.zeros((4, 4, 3))))
    assert isinstance(out, LdrImage)
    assert np.all(out.pixels == 0.0)


def test_constant_image_closed_form():
    # L_w == log-average (up to delta), so L_m = key and L_d = key/(1+key)
    out = reinhard(_hdr(np.full((8, 8, 3), 2.5)))
    expect = 0.18 / 1.18  # = 0.15254237288135594
    assert np.allclose(out.pixels, expect, atol=1e-5)
    assert abs(expect - 0.15254237288135594) == 0.0


def test_output_range_and_simple_operator_below_one():
    rng = np.random.default_rng(60)
    px = rng.uniform(0, 100, size=(16, 16, 3)).astype(np.float32)
    px[0, 0] = [1e4, 1e4, 1e4]
    out = reinhard(_hdr(px)).pixels
    assert np.all(out >= 0.0) and np.all(out <= 1.0)
    lum = out.astype(np.float64) @ np.array([0.2126, 0.7152, 0.0722])
    assert np.all(lum < 1.0)


def test_monotone_in_luminance():
    # grey ramp: display luminance must be nondecreasing along the ramp
    ramp = np.linspace(0.0, 50.0, 256, dtype=np.float32)
    px = np.repeat(ramp[:, None, None], 3, axis=2).reshape(256, 1, 3)
    out = reinhard(_hdr(px)).pixels[:, 0, 0].astype(np.float64)
    assert np.all(np.diff(out) >= 0.0)
    assert out[-1] > out[0]


def test_exposure_invariance_of_scaled_luminance():
    rng = np.random.default_rng(61)
    px = rng.uniform(1e-2, 5.0, size=(12, 12, 3)).astype(np.float32)
    base = reinhard(_hdr(px)).pixels
    for k in (0.25, 4.0, 32.0):
        scaled = reinhard(_hdr(k * px)).pixels
        err = np.abs(scaled.astype(np.float64) - base.astype(np.float64))
        assert np.max(err) < 1e-4


def test_white_point_variant_can_reach_one():
    px = np.full((4, 4, 3), 1.0, dtype=np.float32)
    px[0, 0] = [400.0, 400.0, 400.0]
    simple = reinhard(_hdr(px))
    burned = reinhard(_hdr(px), ReinhardParams(white=2.0))
    s_lum = simple.pixels[0, 0].astype(np.float64).mean()
    b_lum = burned.pixels[0, 0].astype(np.float64).mean()
    assert b_lum >= s_lum
    assert b_lum == pytest.approx(1.0, abs=1e-6)


def test_chroma_ratio_preserved():
    # channel ratios survive tone mapping wherever nothing clips
    px = np.zeros((2, 2, 3), dtype=np.float32)
    px[:, :] = [0.8, 0.4, 0.2]
    out = reinhard(_hdr(px)).pixels.astype(np.float64)
    r, g, b = out[0, 0]
    assert r / g == pytest.approx(2.0, rel=1e-5)
    assert g / b == pytest.approx(2.0, rel=1e-5)


def test_params_validation():
    with pytest.raises(ConfigError):
        ReinhardParams(key=0.0)
    with pytest.raises(ConfigError):
        ReinhardParams(delta=-1e-6)
    with pytest.raises(ConfigError):
        ReinhardParams(white=0.0)
