"""Reinhard global tone mapping for display-ready outputs."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError
from .imgio import HdrImage, LdrImage

# Rec.709 luminance weights
_LUMA = np.array([0.2126, 0.7152, 0.0722], dtype=np.float64)


@dataclass(frozen=True)
class ReinhardParams:
    """Global operator parameters.

    ``key`` sets the target mid-grey; ``white`` enables the white-point
    variant that burns out luminances above it. ``delta`` guards the
    log-average against zero luminance.
    """

    key: float = 0.18
    delta: float = 1e-6
    white: float | None = None

    def __post_init__(self):
        if not (self.key > 0 and math.isfinite(self.key)):
            raise ConfigError(f"key must be positive, got {self.key}")
        if not (self.delta > 0 and math.isfinite(self.delta)):
            raise ConfigError(f"delta must be positive, got {self.delta}")
        if self.white is not None and not (self.white > 0
                                           and math.isfinite(self.white)):
            raise ConfigError(f"white point must be positive, got {self.white}")


def reinhard(hdr: HdrImage, params: ReinhardParams = ReinhardParams()) -> LdrImage:
    """Map radiance to display range.

    Per-pixel world luminance is scaled against the image's log-average,
    compressed with x/(1+x) (or the white-point variant), and the RGB
    channels follow by luminance ratio. An all-zero image stays all-zero.
    """
    px = hdr.pixels.astype(np.float64)
    lum_world = px @ _LUMA
    log_average = math.exp(float(np.mean(np.log(params.delta + lum_world))))
    lum_scaled = (params.key / log_average) * lum_world
    if params.white is None:
        lum_display = lum_scaled / (1.0 + lum_scaled)
    else:
        lum_display = (lum_scaled * (1.0 + lum_scaled / (params.white ** 2))
                       / (1.0 + lum_scaled))
    # chroma by ratio: scale each channel with L_d / L_w, zero stays zero
    ratio = np.zeros_like(lum_world)
    nonzero = lum_world > 0.0
    ratio[nonzero] = lum_display[nonzero] / lum_world[nonzero]
    out = np.clip(px * ratio[:, :, None], 0.0, 1.0)
    return LdrImage(out.astype(np.float32))
