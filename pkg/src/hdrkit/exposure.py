"""Exposure bracketing: synthesize EV-2 and EV+2 siblings of an LDR input.

A gamma camera-response model stands in for a learned exposure generator:
undo the CRF (v^gamma), scale linearly by 2^ev_shift, reapply the CRF and
clip. Deterministic and invertible on unclipped values, so the downstream
network always receives a well-defined three-exposure stack.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError
from .imgio import LdrImage

DEFAULT_GAMMA = 2.2


@dataclass
class ExposureStack:
    """The {EV-2, EV0, EV+2} triple fed to the network's feature branches."""

    ev_minus2: LdrImage
    ev_0: LdrImage
    ev_plus2: LdrImage
    gamma: float = DEFAULT_GAMMA

    def __post_init__(self):
        sizes = {(img.width, img.height)
                 for img in (self.ev_minus2, self.ev_0, self.ev_plus2)}
        if len(sizes) != 1:
            raise ConfigError(f"exposure stack extents differ: {sorted(sizes)}")


def synthesize_exposure(ldr: LdrImage, ev_shift: float,
                        gamma: float = DEFAULT_GAMMA) -> LdrImage:
    """Re-expose by ev_shift stops: clip(((v^gamma) * 2^ev_shift)^(1/gamma), 0, 1).

    ev_shift = 0 returns the input pixels bit-exactly (no float round-trip).
    """
    if gamma <= 0:
        raise ConfigError(f"gamma must be positive, got {gamma}")
    if not math.isfinite(ev_shift):
        raise ConfigError(f"ev_shift must be finite, got {ev_shift}")
    if ev_shift == 0.0:
        return LdrImage(ldr.pixels.copy(), ldr.source_depth)
    v = ldr.pixels.astype(np.float64)
    out = np.clip((v ** gamma * 2.0 ** ev_shift) ** (1.0 / gamma), 0.0, 1.0)
    return LdrImage(out.astype(np.float32), ldr.source_depth)


def bracket(ldr: LdrImage, gamma: float = DEFAULT_GAMMA) -> ExposureStack:
    """Build the EV{-2, 0, +2} stack; the middle slot is the untouched input."""
    return ExposureStack(
        ev_minus2=synthesize_exposure(ldr, -2.0, gamma),
        ev_0=ldr,
        ev_plus2=synthesize_exposure(ldr, +2.0, gamma),
        gamma=gamma,
    )
