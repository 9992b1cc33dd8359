"""Model checkpoint serialization.

A checkpoint carries the network configuration, the training epoch counter,
and every parameter array, in a little-endian binary container:

    magic   4 bytes  b"AHDR"
    version u8       1
    config            8 x u32: channels, iterations, dilation_rate,
                      num_blocks, layers_per_block, growth,
                      input_channels, output_channels
                      2 x u8: use_skip1, use_skip2
                      f64: mu
                      u32: epochs_trained
    arrays            named float32 arrays (see binio.pack_named_arrays)

The loader rebuilds the config, then validates the array namespace against
the canonical parameter layout for that config: any missing, extra, or
misshapen entry is a format error, so a checkpoint can never silently load
into the wrong architecture. Optimizer state is not persisted; resuming
restarts the Adam moment estimates.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .binio import ByteReader, pack_named_arrays, unpack_named_arrays
from .errors import ContractError, FormatError
from .network import NetworkConfig, param_shapes
from .tensor import Parameter

_MAGIC = b"AHDR"
_VERSION = 1


@dataclass
class Checkpoint:
    config: NetworkConfig
    params: dict[str, Parameter]
    mu: float = 5000.0
    epochs_trained: int = 0


def _validate(config: NetworkConfig, arrays: dict[str, np.ndarray]) -> None:
    expected = param_shapes(config)
    missing = sorted(set(expected) - set(arrays))
    extra = sorted(set(arrays) - set(expected))
    if missing:
        raise FormatError(f"checkpoint is missing parameters: {missing[:4]}")
    if extra:
        raise FormatError(f"checkpoint has unknown parameters: {extra[:4]}")
    for name, shape in expected.items():
        if arrays[name].shape != shape:
            raise FormatError(
                f"parameter {name} has shape {arrays[name].shape}, "
                f"expected {shape}")


def save_checkpoint(path: str | Path, ckpt: Checkpoint) -> None:
    expected = param_shapes(ckpt.config)
    if set(ckpt.params) != set(expected):
        raise ContractError("parameter set does not match the configuration")
    cfg = ckpt.config
    head = _MAGIC + struct.pack("<B", _VERSION)
    head += struct.pack(
        "<8I", cfg.channels, cfg.iterations, cfg.dilation_rate,
        cfg.num_blocks, cfg.layers_per_block, cfg.growth,
        cfg.input_channels, cfg.output_channels)
    head += struct.pack("<2B", int(cfg.use_skip1), int(cfg.use_skip2))
    head += struct.pack("<d", float(ckpt.mu))
    head += struct.pack("<I", int(ckpt.epochs_trained))
    arrays = [(name, ckpt.params[name].value.data)
              for name in expected]  # canonical order
    Path(path).write_bytes(head + pack_named_arrays(arrays))


def load_checkpoint(path: str | Path) -> Checkpoint:
    raw = Path(path).read_bytes()
    r = ByteReader(raw)
    r.expect(_MAGIC, "checkpoint magic")
    version = r.u8("checkpoint version")
    if version != _VERSION:
        raise FormatError(f"unsupported checkpoint version {version}")
    fields = [r.u32("config field") for _ in range(8)]
    use_skip1 = r.u8("skip flag")
    use_skip2 = r.u8("skip flag")
    if use_skip1 > 1 or use_skip2 > 1:
        raise FormatError("skip flags must be 0 or 1")
    mu = r.f64("mu")
    if not np.isfinite(mu) or mu <= 0:
        raise FormatError(f"implausible mu value {mu}")
    epochs_trained = r.u32("epoch counter")
    try:
        config = NetworkConfig(
            channels=fields[0], iterations=fields[1], dilation_rate=fields[2],
            num_blocks=fields[3], layers_per_block=fields[4], growth=fields[5],
            input_channels=fields[6], output_channels=fields[7],
            use_skip1=bool(use_skip1), use_skip2=bool(use_skip2))
    except Exception as exc:
        raise FormatError(f"checkpoint config is invalid: {exc}") from exc
    pairs = unpack_named_arrays(r)
    if not r.done():
        raise FormatError("trailing bytes after parameter arrays", offset=r.pos)
    names = [name for name, _ in pairs]
    if len(names) != len(set(names)):
        raise FormatError("duplicate parameter names in checkpoint")
    arrays = dict(pairs)
    _validate(config, arrays)
    params = {name: Parameter(arr, name) for name, arr in arrays.items()}
    return Checkpoint(config=config, params=params, mu=mu,
                      epochs_trained=epochs_trained)
