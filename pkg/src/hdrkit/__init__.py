"""hdrkit: single-image HDR reconstruction with a feedback convolutional network.

The package is self-contained: a small reverse-mode autodiff engine over
numpy arrays, the reconstruction network, its training objective, image
codecs (PPM, Radiance RGBE, PFM), quality metrics and a command-line front
end. See README.md for usage.
"""

from __future__ import annotations

__version__ = "0.1.0"
