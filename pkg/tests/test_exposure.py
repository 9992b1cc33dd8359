"""Exposure synthesis tests."""

from __future__ import annotations

import numpy as np
import pytest

from hdrkit.errors import ConfigError
from hdrkit.exposure import bracket, synthesize_exposure
from hdrkit.imgio import LdrImage


def _random_ldr(rng, h=6, w=8):
    return LdrImage(rng.uniform(0, 1, size=(h, w, 3)).astype(np.float32))


def test_zero_shift_is_exact_identity():
    rng = np.random.default_rng(0)
    img = _random_ldr(rng)
    out = synthesize_exposure(img, 0.0)
    assert np.array_equal(out.pixels, img.pixels)


def test_closed_form_midtone():
    img = LdrImage(np.full((1, 1, 3), 0.5, dtype=np.float32))
    out = synthesize_exposure(img, +2.0, gamma=2.2)
    expect = ((0.5 ** 2.2) * 4.0) ** (1 / 2.2)  # = 0.9389309106617063
    assert abs(out.pixels[0, 0, 0] - expect) < 1e-6
    assert abs(expect - 0.9389) < 5e-5


def test_saturated_value_clips_to_one():
    img = LdrImage(np.ones((1, 1, 3), dtype=np.float32))
    out = synthesize_exposure(img, +2.0)
    assert np.all(out.pixels == 1.0)


def test_bracket_middle_slot_untouched():
    rng = np.random.default_rng(1)
    img = _random_ldr(rng)
    stack = bracket(img)
    assert stack.ev_0 is img
    assert stack.gamma == 2.2


def test_bracket_all_black_fixed_point():
    img = LdrImage(np.zeros((3, 3, 3), dtype=np.float32))
    stack = bracket(img)
    for out in (stack.ev_minus2, stack.ev_0, stack.ev_plus2):
        assert np.all(out.pixels == 0.0)


def test_monotone_ordering_randomized():
    rng = np.random.default_rng(2)
    for _ in range(100):
        img = _random_ldr(rng, h=4, w=5)
        stack = bracket(img)
        assert np.all(stack.ev_minus2.pixels <= stack.ev_0.pixels + 1e-7)
        assert np.all(stack.ev_0.pixels <= stack.ev_plus2.pixels + 1e-7)


def test_composition_of_shifts():
    rng = np.random.default_rng(3)
    # keep values small enough that a +2 total shift stays unclipped
    px = rng.uniform(0.0, 0.5, size=(4, 4, 3)).astype(np.float32)
    img = LdrImage(px)
    twice = synthesize_exposure(synthesize_exposure(img, +1.0), +1.0)
    once = synthesize_exposure(img, +2.0)
    assert np.max(np.abs(twice.pixels - once.pixels)) < 1e-6


def test_output_in_unit_interval():
    rng = np.random.default_rng(4)
    for shift in (-5.0, -2.0, 2.0, 5.0):
        img = _random_ldr(rng)
        out = synthesize_exposure(img, shift)
        assert out.pixels.min() >= 0.0 and out.pixels.max() <= 1.0


def test_bad_arguments():
    img = LdrImage(np.zeros((2, 2, 3), dtype=np.float32))
    with pytest.raises(ConfigError):
        synthesize_exposure(img, float("nan"))
    with pytest.raises(ConfigError):
        synthesize_exposure(img, 1.0, gamma=0.0)
