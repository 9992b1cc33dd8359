"""mu-law range compression and the composite training objective.

Both loss terms operate in the tone-mapped domain so bright radiance cannot
dominate the error. The type system enforces it: losses accept ToneMapped
wrappers, never raw tensors. The perceptual term compares features from a
fixed-weight convolutional stack whose weights ship as a repository fixture
(magic "AHPX"); identical spec means identical features, so the objective is
reproducible without downloading anything.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from importlib import resources
from pathlib import Path
from typing import Sequence

import numpy as np

from .binio import ByteReader, pack_named_arrays, unpack_named_arrays
from .errors import ConfigError, ContractError, DomainError, FormatError, ShapeError
from .tensor import (
    Tensor,
    absolute,
    add,
    add_scalar,
    conv2d,
    div_scalar,
    exp,
    log,
    mean,
    relu,
    scale,
    sub,
)

DEFAULT_MU = 5000.0
_RANGE_SLACK = 1e-6

_EXTRACTOR_MAGIC = b"AHPX"
_EXTRACTOR_VERSION = 1


@dataclass(frozen=True)
class LossWeights:
    """Weights of the final objective: lambda1 * L1 + lambda2 * perceptual."""

    lambda1: float = 0.1
    lambda2: float = 0.5

    def __post_init__(self):
        for name in ("lambda1", "lambda2"):
            v = getattr(self, name)
            if not math.isfinite(v) or v < 0:
                raise ConfigError(f"{name} must be finite and >= 0, got {v}")


def _check_mu(mu: float) -> float:
    mu = float(mu)
    if not math.isfinite(mu) or mu <= 0:
        raise ConfigError(f"mu must be positive and finite, got {mu}")
    return mu


def _check_unit_range(data: np.ndarray, what: str) -> None:
    lo, hi = float(data.min()), float(data.max())
    if lo < -_RANGE_SLACK or hi > 1.0 + _RANGE_SLACK:
        raise DomainError(f"{what} must lie in [0, 1], got range [{lo}, {hi}]")


# ---------------------------------------------------------------------------
# mu-law compression


def mu_law_values(h: np.ndarray, mu: float = DEFAULT_MU) -> np.ndarray:
    """Array-level log(1 + mu*h) / log(1 + mu); see mu_law for the Tensor op."""
    mu = _check_mu(mu)
    h = np.asarray(h, dtype=np.float64)
    return np.log1p(mu * np.clip(h, 0.0, None)) / np.log1p(mu)


def inverse_mu_law_values(y: np.ndarray, mu: float = DEFAULT_MU) -> np.ndarray:
    mu = _check_mu(mu)
    y = np.asarray(y, dtype=np.float64)
    return np.expm1(y * np.log1p(mu)) / mu


def mu_law(h: Tensor, mu: float = DEFAULT_MU) -> Tensor:
    """Differentiable mu-law compression of a [0, 1] tensor.

    The normalizer is np.log(mu + 1.0), the numerator's exact expression at
    h = 1, so both endpoints are preserved bit-exactly.
    """
    mu = _check_mu(mu)
    _check_unit_range(h.data, "mu_law input")
    return div_scalar(log(add_scalar(scale(h, mu), 1.0)), float(np.log(mu + 1.0)))


def inverse_mu_law(y: Tensor, mu: float = DEFAULT_MU) -> Tensor:
    """Differentiable inverse: ((1 + mu)^y - 1) / mu."""
    mu = _check_mu(mu)
    _check_unit_range(y.data, "inverse_mu_law input")
    return div_scalar(add_scalar(exp(scale(y, float(np.log(mu + 1.0)))), -1.0), mu)


# ---------------------------------------------------------------------------
# tone-mapped wrapper: the only currency the losses accept


@dataclass
class ToneMapped:
    """A tensor certified to live in the mu-law tone-mapped [0, 1] domain."""

    values: Tensor

    def __post_init__(self):
        if not isinstance(self.values, Tensor):
            raise ContractError(f"ToneMapped wraps a Tensor, got {type(self.values).__name__}")
        _check_unit_range(self.values.data, "tone-mapped tensor")


def compress_hdr(h: Tensor, mu: float = DEFAULT_MU) -> ToneMapped:
    """Tone-map normalized linear radiance for loss computation."""
    return ToneMapped(mu_law(h, mu))


def compress_prediction(raw: Tensor) -> ToneMapped:
    """Map a (-1, 1) network output into the tone-mapped domain: (x + 1) / 2.

    The network is trained to predict mu-law-compressed values directly, so
    no further compression is applied.
    """
    return ToneMapped(scale(add_scalar(raw, 1.0), 0.5))


# ---------------------------------------------------------------------------
# fixed-weight perceptual feature extractor


@dataclass(frozen=True)
class ExtractorSpec:
    """Structure + seed of the fixed feature stack; fully determines the
    weights and therefore the features."""

    input_channels: int = 3
    widths: tuple[int, ...] = (16, 32, 32, 64, 64)
    kernel: int = 3
    taps: tuple[int, ...] = (2, 4)  # 1-based conv indices, tapped after ReLU
    seed: int = 7151

    def __post_init__(self):
        if len(self.widths) < 1 or any(w < 1 for w in self.widths):
            raise ConfigError(f"bad extractor widths {self.widths}")
        if self.kernel < 1 or self.kernel % 2 == 0:
            raise ConfigError(f"extractor kernel must be odd and positive, got {self.kernel}")
        if not self.taps or any(t < 1 or t > len(self.widths) for t in self.taps):
            raise ConfigError(f"extractor taps {self.taps} out of range")


class PerceptualExtractor:
    """Frozen conv3x3+ReLU stack; features are tapped after selected layers.

    Weights are plain Tensors with requires_grad False, so gradients flow
    through the extractor into the prediction but never into the extractor.
    """

    def __init__(self, spec: ExtractorSpec, weights: list[tuple[Tensor, Tensor]]):
        if len(weights) != len(spec.widths):
            raise ContractError(
                f"extractor needs {len(spec.widths)} layers, got {len(weights)}")
        self.spec = spec
        self.weights = weights

    @classmethod
    def from_seed(cls, spec: ExtractorSpec = ExtractorSpec()) -> "PerceptualExtractor":
        rng = np.random.default_rng(np.random.SeedSequence(spec.seed))
        weights = []
        cin = spec.input_channels
        for width in spec.widths:
            fan_in = cin * spec.kernel * spec.kernel
            w = rng.normal(0.0, np.sqrt(2.0 / fan_in),
                           size=(width, cin, spec.kernel, spec.kernel))
            weights.append((Tensor(w.astype(np.float32)),
                            Tensor(np.zeros(width, dtype=np.float32))))
            cin = width
        return cls(spec, weights)

    @property
    def min_extent(self) -> int:
        """Smallest H or W the stack accepts: one kernel footprint."""
        return self.spec.kernel

    def features(self, x: Tensor) -> list[Tensor]:
        if x.data.ndim != 4:
            raise ShapeError(f"extractor input must be NCHW, got shape {x.shape}")
        if min(x.data.shape[2], x.data.shape[3]) < self.min_extent:
            raise ConfigError(
                f"spatial extent {x.data.shape[2]}x{x.data.shape[3]} is smaller than "
                f"the extractor's minimum {self.min_extent}")
        taps = []
        h = x
        for index, (w, b) in enumerate(self.weights, start=1):
            h = relu(conv2d(h, w, b))
            if index in self.spec.taps:
                taps.append(h)
        return taps

    def astype(self, dtype) -> "PerceptualExtractor":
        """A copy with weights cast to dtype (float64 for gradient checks)."""
        cast = [(Tensor(w.data.astype(dtype)), Tensor(b.data.astype(dtype)))
                for w, b in self.weights]
        return PerceptualExtractor(self.spec, cast)

    # -- AHPX serialization ------------------------------------------------

    def to_bytes(self) -> bytes:
        import struct

        spec = self.spec
        head = bytearray()
        head += _EXTRACTOR_MAGIC
        head += struct.pack("<B", _EXTRACTOR_VERSION)
        head += struct.pack("<II", spec.input_channels, len(spec.widths))
        head += struct.pack(f"<{len(spec.widths)}I", *spec.widths)
        head += struct.pack("<II", spec.kernel, len(spec.taps))
        head += struct.pack(f"<{len(spec.taps)}I", *spec.taps)
        head += struct.pack("<Q", spec.seed)
        arrays = []
        for i, (w, b) in enumerate(self.weights, start=1):
            arrays.append((f"layer{i}.weight", w.data))
            arrays.append((f"layer{i}.bias", b.data))
        return bytes(head) + pack_named_arrays(arrays)

    @classmethod
    def from_bytes(cls, data: bytes) -> "PerceptualExtractor":
        r = ByteReader(data)
        r.expect(_EXTRACTOR_MAGIC, "extractor magic")
        version = r.u8("version")
        if version != _EXTRACTOR_VERSION:
            raise FormatError(f"unsupported extractor version {version}", offset=r.pos - 1)
        input_channels = r.u32("input channels")
        n_layers = r.u32("layer count")
        if n_layers > 64:
            raise FormatError(f"implausible layer count {n_layers}", offset=r.pos - 4)
        widths = tuple(r.u32("width") for _ in range(n_layers))
        kernel = r.u32("kernel")
        n_taps = r.u32("tap count")
        if n_taps > n_layers:
            raise FormatError(f"implausible tap count {n_taps}", offset=r.pos - 4)
        taps = tuple(r.u32("tap") for _ in range(n_taps))
        seed = r.u64("seed")
        try:
            spec = ExtractorSpec(input_channels=input_channels, widths=widths,
                                 kernel=kernel, taps=taps, seed=seed)
        except ConfigError as e:
            raise FormatError(f"inconsistent extractor header: {e}", offset=r.pos) from None
        arrays = dict(unpack_named_arrays(r))
        weights = []
        cin = spec.input_channels
        for i, width in enumerate(spec.widths, start=1):
            try:
                w = arrays[f"layer{i}.weight"]
                b = arrays[f"layer{i}.bias"]
            except KeyError as e:
                raise FormatError(f"extractor file is missing {e.args[0]!r}",
                                  offset=r.pos) from None
            if w.shape != (width, cin, kernel, kernel) or b.shape != (width,):
                raise FormatError(
                    f"layer {i} shapes {w.shape}/{b.shape} do not match the header",
                    offset=r.pos)
            weights.append((Tensor(w), Tensor(b)))
            cin = width
        return cls(spec, weights)

    def save(self, path) -> None:
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def load(cls, path) -> "PerceptualExtractor":
        return cls.from_bytes(Path(path).read_bytes())


_default_extractor: PerceptualExtractor | None = None


def default_extractor() -> PerceptualExtractor:
    """The packaged fixture (data/perceptual.ahpx), loaded once."""
    global _default_extractor
    if _default_extractor is None:
        data = resources.files("hdrkit").joinpath("data/perceptual.ahpx").read_bytes()
        _default_extractor = PerceptualExtractor.from_bytes(data)
    return _default_extractor


# ---------------------------------------------------------------------------
# loss terms


def _check_outputs(outputs: Sequence[ToneMapped], gt_tm: ToneMapped) -> None:
    if len(outputs) == 0:
        raise ContractError("loss needs at least one prediction")
    if not isinstance(gt_tm, ToneMapped):
        raise ContractError(
            f"losses accept tone-mapped tensors only, got {type(gt_tm).__name__}")
    for out in outputs:
        if not isinstance(out, ToneMapped):
            raise ContractError(
                f"losses accept tone-mapped tensors only, got {type(out).__name__}")
        if out.values.data.shape != gt_tm.values.data.shape:
            raise ShapeError(
                f"prediction shape {out.values.shape} does not match "
                f"ground truth {gt_tm.values.shape}")


def l1_loss(outputs: Sequence[ToneMapped], gt_tm: ToneMapped) -> Tensor:
    """Per-iteration mean absolute error, averaged over the T iterations."""
    _check_outputs(outputs, gt_tm)
    total = None
    for out in outputs:
        term = mean(absolute(sub(out.values, gt_tm.values)))
        total = term if total is None else add(total, term)
    return scale(total, 1.0 / len(outputs))


def perceptual_loss(outputs: Sequence[ToneMapped], gt_tm: ToneMapped,
                    extractor: PerceptualExtractor,
                    gt_features: Sequence[Tensor] | None = None) -> Tensor:
    """Mean absolute feature error over the extractor's tap layers, averaged
    over iterations. Differentiable w.r.t. the predictions only; ground-truth
    features may be passed in precomputed (the trainer caches them)."""
    _check_outputs(outputs, gt_tm)
    if gt_features is None:
        gt_features = extractor.features(gt_tm.values.detach())
    total = None
    for out in outputs:
        pred_features = extractor.features(out.values)
        if len(pred_features) != len(gt_features):
            raise ContractError(
                f"feature tap counts differ: {len(pred_features)} vs {len(gt_features)}")
        term = None
        for pf, gf in zip(pred_features, gt_features):
            tap_term = mean(absolute(sub(pf, gf)))
            term = tap_term if term is None else add(term, tap_term)
        term = scale(term, 1.0 / len(gt_features))
        total = term if total is None else add(total, term)
    return scale(total, 1.0 / len(outputs))


def total_loss(l1: Tensor, per: Tensor, weights: LossWeights = LossWeights()) -> Tensor:
    """lambda1 * l1 + lambda2 * per."""
    return add(scale(l1, weights.lambda1), scale(per, weights.lambda2))
