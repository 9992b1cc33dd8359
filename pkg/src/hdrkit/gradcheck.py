"""Whole-network finite-difference verification.

Builds the full pipeline (bracket inputs -> network -> both loss terms) in
float64 on a small configuration and compares the analytic gradient of every
parameter against central finite differences. This is the numerical ground
truth the engine is held to; quadratic cost keeps it at desk scale.

Central differences are a valid oracle only while no +/-eps perturbation can
push a nonsmooth op across its kink. Two measures keep the check on smooth
ground:

* biases are drawn away from zero. With all-zero biases a rectifier whose
  receptive window is entirely inactive has a pre-activation of exactly 0.0,
  where the one-sided difference quotient and the subgradient convention
  disagree at any step size.
* every draw is audited: the forward pass records the smallest distance from
  any rectifier or absolute-value input to its kink, and the draw is redrawn
  until that distance clears ``kink_margin``. The margin leaves an order of
  magnitude of headroom over ``eps`` for gain through the network.

Gradient elements can also be legitimately tiny (signed contributions cancel
over the image). Once both the analytic and the difference-quotient value sit
below ``fd_floor`` they are indistinguishable from the quotient's roundoff,
ulp(loss)/(2 eps) with accumulation, and compare as equal rather than by
ratio.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor
from .errors import ConfigError
from .losses import (
    ExtractorSpec,
    LossWeights,
    PerceptualExtractor,
    ToneMapped,
    compress_prediction,
    l1_loss,
    perceptual_loss,
    total_loss,
)
from .network import NetworkConfig, forward_tensors, init_params
from .tensor import Tensor, backward, finite_diff_grad, relative_gradient_error

# test hook: set by the negative-control test to corrupt analytic gradients
_CORRUPTION: float = 0.0


@dataclass(frozen=True)
class GradCheckEntry:
    name: str
    rel_error: float


@dataclass
class GradCheckReport:
    entries: list[GradCheckEntry]
    tolerance: float
    attempts: int = 1
    kink_margin: float = 0.0

    @property
    def max_rel_error(self) -> float:
        return max(e.rel_error for e in self.entries)

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.tolerance


def _draw(config: NetworkConfig, height: int, width: int, seed: int,
          attempt: int):
    """One candidate problem instance: parameters, inputs, target, extractor."""
    params = init_params(config, seed=seed, dtype=np.float64)
    rng = np.random.default_rng(np.random.SeedSequence(seed,
                                                       spawn_key=(1, attempt)))
    for name, p in params.items():
        if name.endswith(".bias"):
            mag = rng.uniform(0.05, 0.25, size=p.shape)
            sign = np.where(rng.random(p.shape) < 0.5, -1.0, 1.0)
            p.value.data[...] = mag * sign

    inputs = [Tensor(rng.uniform(0.05, 0.95, size=(1, config.input_channels,
                                                   height, width)))
              for _ in range(3)]
    gt = ToneMapped(Tensor(rng.uniform(0.05, 0.95,
                                       size=(1, config.output_channels,
                                             height, width))))
    extractor = PerceptualExtractor.from_seed(
        ExtractorSpec(widths=(4, 6), taps=(1, 2), seed=seed + 1 + attempt)
    ).astype(np.float64)
    weights = LossWeights()

    def objective() -> Tensor:
        trace = forward_tensors(inputs[0], inputs[1], inputs[2], params, config)
        outputs = [compress_prediction(o) for o in trace.outputs]
        return total_loss(l1_loss(outputs, gt),
                          perceptual_loss(outputs, gt, extractor),
                          weights)

    return params, objective


def _kink_distance(objective) -> float:
    """Smallest distance from any nonsmooth-op input to its kink."""
    tensor._KINK_TRACE = trace = []
    try:
        objective()
    finally:
        tensor._KINK_TRACE = None
    return min(trace) if trace else float("inf")


def run_gradcheck(height: int = 8, width: int = 8, channels: int = 8,
                  iterations: int = 2, growth: int = 4, seed: int = 0,
                  tolerance: float = 1e-4, eps: float = 1e-5,
                  kink_margin: float = 1e-4, fd_floor: float = 1e-7,
                  max_attempts: int = 32) -> GradCheckReport:
    """Check every network parameter against the finite-difference oracle."""
    if height < 3 or width < 3:
        raise ConfigError(f"gradcheck needs at least 3x3 input, got {width}x{height}")
    if kink_margin <= 0:
        raise ConfigError(f"kink_margin must be positive, got {kink_margin}")
    if fd_floor <= 0:
        raise ConfigError(f"fd_floor must be positive, got {fd_floor}")
    if max_attempts < 1:
        raise ConfigError(f"max_attempts must be at least 1, got {max_attempts}")
    config = NetworkConfig(channels=channels, iterations=iterations,
                           growth=growth)

    for attempt in range(max_attempts):
        params, objective = _draw(config, height, width, seed, attempt)
        if _kink_distance(objective) > kink_margin:
            break
    else:
        raise ConfigError(
            f"no draw kept the forward pass at least {kink_margin:g} away "
            f"from a kink after {max_attempts} attempts; lower kink_margin "
            f"or change the seed")

    loss = objective()
    backward(loss)
    analytic = {name: p.grad.copy() for name, p in params.items()}
    for p in params.values():
        p.zero_grad()

    # The oracle only reads values, so drop the tape while it runs.
    for p in params.values():
        p.value.requires_grad = False
    try:
        entries = []
        for name, p in params.items():
            fd = finite_diff_grad(lambda: float(objective().data), p, eps=eps)
            err = relative_gradient_error(analytic[name] + _CORRUPTION, fd,
                                          floor=fd_floor)
            entries.append(GradCheckEntry(name, err))
    finally:
        for p in params.values():
            p.value.requires_grad = True
    return GradCheckReport(entries, tolerance, attempts=attempt + 1,
                           kink_margin=kink_margin)
