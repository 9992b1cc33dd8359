"""The reconstruction network.

Data path: an exposure stack {EV-2, EV0, EV+2} enters three independent
feature branches (3x conv3x3+ReLU each); the branch outputs are summed into
a shared feature map. A feedback stage then iterates T times: on the first
pass it consumes the shared features directly, afterwards it fuses them with
the previous hidden state through a learned 1x1 conv. Each pass runs an
entry 1x1 compression, three dilated dense blocks (per block: 1x1 compress
in, four densely connected dilated 3x3 convs with ReLU and growth rate g,
1x1 compress back to C channels, residual add of the block input) and an
exit 3x3 conv. The hidden state is merged with two parameter-free skips from
the middle branch's first two feature levels, and a three-conv head
(ReLU, ReLU, tanh) emits a 3-channel prediction per iteration, trained in
the mu-law-compressed domain.

Feedback and reconstruction weights are shared across iterations; only the
hidden state evolves.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from .errors import ConfigError, ContractError, ShapeError
from .exposure import ExposureStack
from .imgio import HdrImage
from .losses import DEFAULT_MU, inverse_mu_law_values
from .tensor import Parameter, Tensor, add, concat_channels, conv2d, relu, tanh


@dataclass(frozen=True)
class NetworkConfig:
    """Structural hyperparameters; param_shapes/param_count are pure
    functions of this."""

    channels: int = 32
    iterations: int = 4
    dilation_rate: int = 3
    num_blocks: int = 3
    layers_per_block: int = 4
    growth: int = 16
    input_channels: int = 3
    output_channels: int = 3
    use_skip1: bool = True  # first-level features of the middle branch
    use_skip2: bool = True  # second-level features of the middle branch

    def __post_init__(self):
        for name in ("channels", "iterations", "dilation_rate", "num_blocks",
                     "layers_per_block", "growth", "input_channels", "output_channels"):
            v = getattr(self, name)
            if not isinstance(v, int) or v < 1:
                raise ConfigError(f"{name} must be a positive integer, got {v!r}")


@dataclass
class ForwardTrace:
    """Every intermediate the losses and the tests need, per iteration."""

    fe_minus2: Tensor
    fe_0: Tensor
    fe_plus2: Tensor
    fe_all: Tensor
    fe0_level1: Tensor
    fe0_level2: Tensor
    fb: list[Tensor] = field(default_factory=list)
    frs: list[Tensor] = field(default_factory=list)
    outputs: list[Tensor] = field(default_factory=list)


# ---------------------------------------------------------------------------
# parameter namespace


def param_shapes(config: NetworkConfig) -> dict[str, tuple[int, ...]]:
    """The full parameter namespace, in canonical (initialization) order.

    Names: fu.branch_{m2,0,p2}.conv{1..3}, fbu.fusion, fbu.entry,
    fbu.block{k}.{compress_in,dense{j},compress_out}, fbu.exit,
    ru.conv{1..3}; each with .weight and .bias.
    """
    c, g = config.channels, config.growth
    shapes: dict[str, tuple[int, ...]] = {}

    def conv(name: str, cout: int, cin: int, k: int) -> None:
        shapes[f"{name}.weight"] = (cout, cin, k, k)
        shapes[f"{name}.bias"] = (cout,)

    for branch in ("m2", "0", "p2"):
        conv(f"fu.branch_{branch}.conv1", c, config.input_channels, 3)
        conv(f"fu.branch_{branch}.conv2", c, c, 3)
        conv(f"fu.branch_{branch}.conv3", c, c, 3)
    conv("fbu.fusion", c, 2 * c, 1)
    conv("fbu.entry", c, c, 1)
    for b in range(config.num_blocks):
        conv(f"fbu.block{b}.compress_in", c, c, 1)
        for j in range(config.layers_per_block):
            conv(f"fbu.block{b}.dense{j}", g, c + j * g, 3)
        conv(f"fbu.block{b}.compress_out", c, c + config.layers_per_block * g, 1)
    conv("fbu.exit", c, c, 3)
    conv("ru.conv1", c, c, 3)
    conv("ru.conv2", c, c, 3)
    conv("ru.conv3", config.output_channels, c, 3)
    return shapes


def param_count(config: NetworkConfig) -> int:
    """Total learnable scalars. Closed form (C=channels, g=growth, i/o =
    input/output channels, B=num_blocks, L=layers_per_block):

        FU:      3 * (9*C*i + 2*9*C^2 + 3*C)
        fusion:  2*C^2 + C
        entry:   C^2 + C
        blocks:  B * [ (C^2+C) + sum_{j<L} (9*g*(C+j*g) + g)
                       + C*(C+L*g) + C ]
        exit:    9*C^2 + C
        RU:      2*(9*C^2 + C) + 9*o*C + o

    Implemented as the sum over param_shapes so the namespace stays the
    single source of truth; the formula above is verified in tests.
    """
    return sum(int(np.prod(shape)) for shape in param_shapes(config).values())


def _init_gain(name: str) -> float:
    """Variance gain for a weight, chosen by the activation it feeds.

    ReLU-fed convs (extractor branches, dense layers, the first two
    reconstruction convs) use gain 2 (He). Everything else -- the 1x1
    compress/fusion/entry layers, the exit conv, and the tanh-fed output
    conv -- is linear or saturating, where gain 1 keeps the activation
    variance flat. Gain 2 everywhere stacks up through the linear chain
    and saturates the output tanh at init, which stalls training.
    """
    if name.startswith("fu.") or ".dense" in name:
        return 2.0
    if name in ("ru.conv1.weight", "ru.conv2.weight"):
        return 2.0
    return 1.0


def init_params(config: NetworkConfig, seed: int,
                dtype=np.float32) -> dict[str, Parameter]:
    """Fan-in-scaled normal init (std = sqrt(gain/fan_in), gain per
    activation via _init_gain) for weights, zero biases; deterministic
    in (config, seed)."""
    rng = np.random.default_rng(np.random.SeedSequence(seed))
    params: dict[str, Parameter] = {}
    for name, shape in param_shapes(config).items():
        if name.endswith(".weight"):
            fan_in = int(np.prod(shape[1:]))
            std = np.sqrt(_init_gain(name) / fan_in)
            value = rng.normal(0.0, std, size=shape)
        else:
            value = np.zeros(shape)
        params[name] = Parameter(value.astype(dtype), name)
    return params


def _p(params: Mapping[str, Parameter], name: str) -> Parameter:
    try:
        return params[name]
    except KeyError:
        raise ContractError(f"parameter set is missing {name!r}") from None


# ---------------------------------------------------------------------------
# units


def feature_unit(x: Tensor, params: Mapping[str, Parameter],
                 prefix: str) -> tuple[Tensor, Tensor, Tensor]:
    """One branch: three conv3x3+ReLU stages; returns all three feature levels."""
    fe1 = relu(conv2d(x, _p(params, f"{prefix}.conv1.weight"),
                      _p(params, f"{prefix}.conv1.bias")))
    fe2 = relu(conv2d(fe1, _p(params, f"{prefix}.conv2.weight"),
                      _p(params, f"{prefix}.conv2.bias")))
    fe3 = relu(conv2d(fe2, _p(params, f"{prefix}.conv3.weight"),
                      _p(params, f"{prefix}.conv3.bias")))
    return fe1, fe2, fe3


def fuse_features(fe_m2: Tensor, fe_0: Tensor, fe_p2: Tensor) -> Tensor:
    return add(add(fe_m2, fe_0), fe_p2)


def dilated_dense_block(x: Tensor, params: Mapping[str, Parameter],
                        prefix: str, config: NetworkConfig) -> Tensor:
    """1x1 compress in, L densely connected dilated 3x3+ReLU layers growing
    by g channels each, 1x1 compress out to C, residual add of the block
    input. Compressions are linear."""
    h = conv2d(x, _p(params, f"{prefix}.compress_in.weight"),
               _p(params, f"{prefix}.compress_in.bias"))
    feats = h
    for j in range(config.layers_per_block):
        grown = relu(conv2d(feats, _p(params, f"{prefix}.dense{j}.weight"),
                            _p(params, f"{prefix}.dense{j}.bias"),
                            dilation=config.dilation_rate))
        feats = concat_channels(feats, grown)
    out = conv2d(feats, _p(params, f"{prefix}.compress_out.weight"),
                 _p(params, f"{prefix}.compress_out.bias"))
    return add(out, x)


def feedback_unit(fe_all: Tensor, fb_prev: Tensor | None,
                  params: Mapping[str, Parameter], config: NetworkConfig,
                  step: int) -> Tensor:
    """One feedback pass. The hidden state enters only from step 2 on; the
    first step runs on the shared features alone."""
    if step < 1:
        raise ContractError(f"step must be >= 1, got {step}")
    if (step == 1) != (fb_prev is None):
        raise ContractError(
            f"hidden state must be absent exactly at step 1: step={step}, "
            f"fb_prev {'present' if fb_prev is not None else 'absent'}")
    if fb_prev is None:
        state = fe_all
    else:
        state = conv2d(concat_channels(fe_all, fb_prev),
                       _p(params, "fbu.fusion.weight"),
                       _p(params, "fbu.fusion.bias"))
    h = conv2d(state, _p(params, "fbu.entry.weight"), _p(params, "fbu.entry.bias"))
    for b in range(config.num_blocks):
        h = dilated_dense_block(h, params, f"fbu.block{b}", config)
    return conv2d(h, _p(params, "fbu.exit.weight"), _p(params, "fbu.exit.bias"))


def skip_merge(fe0_level1: Tensor, fe0_level2: Tensor, fb_t: Tensor, *,
               use_skip1: bool = True, use_skip2: bool = True) -> Tensor:
    """Parameter-free sum of the two middle-branch skips and the hidden
    state; ablation flags drop either skip."""
    if use_skip1 and use_skip2:
        return add(add(fe0_level1, fe0_level2), fb_t)
    if use_skip1:
        return add(fe0_level1, fb_t)
    if use_skip2:
        return add(fe0_level2, fb_t)
    return fb_t


def reconstruction_unit(frs_t: Tensor, params: Mapping[str, Parameter]) -> Tensor:
    h = relu(conv2d(frs_t, _p(params, "ru.conv1.weight"), _p(params, "ru.conv1.bias")))
    h = relu(conv2d(h, _p(params, "ru.conv2.weight"), _p(params, "ru.conv2.bias")))
    return tanh(conv2d(h, _p(params, "ru.conv3.weight"), _p(params, "ru.conv3.bias")))


# ---------------------------------------------------------------------------
# full forward pass


def forward_tensors(x_m2: Tensor, x_0: Tensor, x_p2: Tensor,
                    params: Mapping[str, Parameter],
                    config: NetworkConfig) -> ForwardTrace:
    """Forward over pre-converted NCHW tensors (the batched training path)."""
    _, _, fe_m2 = feature_unit(x_m2, params, "fu.branch_m2")
    fe0_l1, fe0_l2, fe_0 = feature_unit(x_0, params, "fu.branch_0")
    _, _, fe_p2 = feature_unit(x_p2, params, "fu.branch_p2")
    fe_all = fuse_features(fe_m2, fe_0, fe_p2)
    trace = ForwardTrace(fe_minus2=fe_m2, fe_0=fe_0, fe_plus2=fe_p2,
                         fe_all=fe_all, fe0_level1=fe0_l1, fe0_level2=fe0_l2)
    fb_prev: Tensor | None = None
    for step in range(1, config.iterations + 1):
        fb = feedback_unit(fe_all, fb_prev, params, config, step)
        frs = skip_merge(fe0_l1, fe0_l2, fb,
                         use_skip1=config.use_skip1, use_skip2=config.use_skip2)
        out = reconstruction_unit(frs, params)
        trace.fb.append(fb)
        trace.frs.append(frs)
        trace.outputs.append(out)
        fb_prev = fb
    return trace


def image_to_tensor(pixels: np.ndarray, dtype=np.float32) -> Tensor:
    """H x W x 3 pixels to a 1 x 3 x H x W activation tensor."""
    if pixels.ndim != 3 or pixels.shape[2] != 3:
        raise ShapeError(f"expected HxWx3 pixels, got {pixels.shape}")
    return Tensor(np.ascontiguousarray(np.moveaxis(pixels.astype(dtype), 2, 0)[None]))


def forward(stack: ExposureStack, params: Mapping[str, Parameter],
            config: NetworkConfig) -> ForwardTrace:
    dtype = next(iter(params.values())).data.dtype
    return forward_tensors(
        image_to_tensor(stack.ev_minus2.pixels, dtype),
        image_to_tensor(stack.ev_0.pixels, dtype),
        image_to_tensor(stack.ev_plus2.pixels, dtype),
        params, config)


def map_to_hdr(raw: Tensor | np.ndarray, mu: float = DEFAULT_MU) -> HdrImage:
    """Map a (-1, 1) network output to linear radiance: affine to [0, 1],
    then inverse mu-law expansion. Peak radiance is 1 (normalized units)."""
    data = raw.data if isinstance(raw, Tensor) else np.asarray(raw)
    if data.ndim == 4:
        if data.shape[0] != 1:
            raise ContractError(f"map_to_hdr takes one image, got batch {data.shape[0]}")
        data = data[0]
    if data.ndim != 3 or data.shape[0] != 3:
        raise ShapeError(f"expected a 3xHxW output, got shape {data.shape}")
    compressed = np.clip((data.astype(np.float64) + 1.0) * 0.5, 0.0, 1.0)
    linear = inverse_mu_law_values(compressed, mu)
    return HdrImage(np.moveaxis(linear, 0, 2).astype(np.float32))
