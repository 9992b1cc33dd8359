"""Evaluation metrics: PSNR on tone-mapped pairs, SSIM on linear HDR pairs.

PSNR operates on tone-mapped arrays in [0, peak]. SSIM operates on linear
radiance: luminance is the plain mean of the RGB channels, local statistics
use an 11x11 Gaussian window (sigma 1.5) over valid positions only, and the
dynamic range L adapts to the pair (max component, floored at 1e-6) so the
score is invariant under joint rescaling of both images.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ConfigError, ContractError, DomainError, ShapeError
from .imgio import HdrImage

_WINDOW = 11
_SIGMA = 1.5
_K1 = 0.01
_K2 = 0.03
_L_FLOOR = 1e-6


def psnr(a: np.ndarray, b: np.ndarray, peak: float = 1.0) -> float:
    """Peak signal-to-noise ratio in dB; identical inputs give +infinity."""
    if peak <= 0 or not np.isfinite(peak):
        raise ConfigError(f"peak must be positive and finite, got {peak}")
    pa = np.asarray(a, dtype=np.float64)
    pb = np.asarray(b, dtype=np.float64)
    if pa.shape != pb.shape:
        raise ShapeError(f"image shapes differ: {pa.shape} vs {pb.shape}")
    for name, arr in (("first", pa), ("second", pb)):
        if arr.size == 0:
            raise ShapeError(f"{name} image is empty")
        if arr.min() < 0.0 or arr.max() > peak:
            raise DomainError(
                f"{name} image has values outside [0, {peak}]")
    mse = float(np.mean((pa - pb) ** 2))
    if mse == 0.0:
        return float("inf")
    return 10.0 * np.log10(peak * peak / mse)


def _gaussian_taps() -> np.ndarray:
    half = (_WINDOW - 1) / 2.0
    x = np.arange(_WINDOW, dtype=np.float64) - half
    g = np.exp(-(x * x) / (2.0 * _SIGMA * _SIGMA))
    return g / g.sum()


_TAPS = _gaussian_taps()


def _filter_valid(img: np.ndarray) -> np.ndarray:
    """Separable Gaussian over valid window positions: rows, then columns."""
    rows = sliding_window_view(img, _WINDOW, axis=0) @ _TAPS
    return sliding_window_view(rows, _WINDOW, axis=1) @ _TAPS


def ssim(a: HdrImage, b: HdrImage) -> float:
    """Mean local structural similarity on the luminance of two HDR images."""
    if not isinstance(a, HdrImage) or not isinstance(b, HdrImage):
        raise ContractError("ssim compares HdrImage values")
    if a.pixels.shape != b.pixels.shape:
        raise ShapeError(
            f"image shapes differ: {a.pixels.shape} vs {b.pixels.shape}")
    if a.height < _WINDOW or a.width < _WINDOW:
        raise ConfigError(
            f"image {a.width}x{a.height} is smaller than the "
            f"{_WINDOW}x{_WINDOW} window")
    la = a.pixels.astype(np.float64).mean(axis=2)
    lb = b.pixels.astype(np.float64).mean(axis=2)
    dynamic_range = max(float(a.pixels.max()), float(b.pixels.max()), _L_FLOOR)
    c1 = (_K1 * dynamic_range) ** 2
    c2 = (_K2 * dynamic_range) ** 2

    mu_a = _filter_valid(la)
    mu_b = _filter_valid(lb)
    var_a = _filter_valid(la * la) - mu_a * mu_a
    var_b = _filter_valid(lb * lb) - mu_b * mu_b
    cov = _filter_valid(la * lb) - mu_a * mu_b

    score = ((2.0 * mu_a * mu_b + c1) * (2.0 * cov + c2)
             / ((mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2)))
    return float(score.mean())


@dataclass
class MetricsRow:
    path: str
    psnr_db: float
    ssim: float


@dataclass
class MetricsReport:
    """Per-image metric rows plus the dataset mean.

    The means are always recomputed from the rows, so the invariant
    "mean equals the arithmetic mean of rows" holds by construction.
    """

    rows: list[MetricsRow] = field(default_factory=list)

    def add(self, path: str, psnr_db: float, ssim_value: float) -> None:
        self.rows.append(MetricsRow(path, float(psnr_db), float(ssim_value)))

    @property
    def mean_psnr_db(self) -> float:
        if not self.rows:
            raise ContractError("report has no rows to average")
        return float(np.mean([r.psnr_db for r in self.rows]))

    @property
    def mean_ssim(self) -> float:
        if not self.rows:
            raise ContractError("report has no rows to average")
        return float(np.mean([r.ssim for r in self.rows]))

    def to_csv(self) -> str:
        # repr keeps the floats exact through a parse round-trip
        lines = ["path,psnr_db,ssim"]
        for r in self.rows:
            lines.append(f"{r.path},{r.psnr_db!r},{r.ssim!r}")
        if self.rows:
            lines.append(f"mean,{self.mean_psnr_db!r},{self.mean_ssim!r}")
        return "\n".join(lines) + "\n"
