"""Training loop, Adam optimizer, dataset handling, and synthetic data.

The trainer is fully deterministic for a fixed (seed, config, dataset):
per-epoch sample order comes from a SeedSequence spawned off the absolute
epoch number, so a resumed run sees the same order an uninterrupted run
would. Adam moment estimates are not persisted in checkpoints; resuming
restarts them (the checkpoint stores parameters and the epoch counter).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np

from .checkpoint import Checkpoint, save_checkpoint
from .errors import ConfigError, HdrkitError, TrainingError
from .exposure import bracket
from .imgio import HdrImage, LdrImage, load_hdr, load_ldr, resize_bilinear
from .losses import (
    DEFAULT_MU,
    LossWeights,
    PerceptualExtractor,
    ToneMapped,
    compress_prediction,
    default_extractor,
    l1_loss,
    mu_law_values,
    perceptual_loss,
)
from .metrics import MetricsReport, psnr, ssim
from .network import (
    NetworkConfig,
    forward_tensors,
    image_to_tensor,
    init_params,
    map_to_hdr,
)
from .tensor import Parameter, Tensor, add, backward, scale

_PEAK_FLOOR = 1e-12


@dataclass(frozen=True)
class TrainConfig:
    """Run configuration; every field is representable in the key=value
    config file. Paper-scale values (batch 10, 150 epochs, 512px) are
    reachable, the defaults are desk-scale."""

    learning_rate: float = 2e-4
    batch_size: int = 2
    epochs: int = 10
    decay_factor: float = 0.5
    decay_period: int = 50
    seed: int = 0
    iterations: int = 4
    channels: int = 32
    growth: int = 16
    lambda1: float = 0.1
    lambda2: float = 0.5
    size: int = 64
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    use_skip1: bool = True
    use_skip2: bool = True
    checkpoint_period: int = 50

    def __post_init__(self):
        if not (self.learning_rate > 0 and math.isfinite(self.learning_rate)):
            raise ConfigError(f"learning_rate must be positive, got {self.learning_rate}")
        if not (0.0 < self.decay_factor <= 1.0):
            raise ConfigError(f"decay_factor must be in (0, 1], got {self.decay_factor}")
        for name in ("batch_size", "epochs", "decay_period", "iterations",
                     "channels", "growth", "size"):
            v = getattr(self, name)
            if not isinstance(v, int) or v < 1:
                raise ConfigError(f"{name} must be a positive integer, got {v!r}")
        if self.size < 8:
            raise ConfigError(f"size must be at least 8, got {self.size}")
        if self.checkpoint_period < 0:
            raise ConfigError("checkpoint_period must be nonnegative")
        if not isinstance(self.seed, int) or self.seed < 0:
            raise ConfigError(f"seed must be a nonnegative integer, got {self.seed!r}")
        for name in ("lambda1", "lambda2"):
            v = getattr(self, name)
            if not (math.isfinite(v) and v >= 0):
                raise ConfigError(f"{name} must be finite and nonnegative, got {v}")
        if self.lambda1 == 0.0 and self.lambda2 == 0.0:
            raise ConfigError("at least one loss term must be enabled")
        for name in ("beta1", "beta2"):
            v = getattr(self, name)
            if not (0.0 <= v < 1.0):
                raise ConfigError(f"{name} must be in [0, 1), got {v}")
        if self.epsilon <= 0:
            raise ConfigError(f"epsilon must be positive, got {self.epsilon}")

    def network_config(self) -> NetworkConfig:
        return NetworkConfig(channels=self.channels, iterations=self.iterations,
                             growth=self.growth, use_skip1=self.use_skip1,
                             use_skip2=self.use_skip2)

    def loss_weights(self) -> LossWeights:
        return LossWeights(lambda1=self.lambda1, lambda2=self.lambda2)


def parse_config_file(path: str | Path) -> TrainConfig:
    """Read a key=value config file. Unknown keys are errors; '#' starts a
    comment; blank lines are skipped."""
    spec = {f.name: f.type for f in fields(TrainConfig)}
    values: dict[str, object] = {}
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key=value, got {raw!r}")
        key, _, text = line.partition("=")
        key = key.strip()
        text = text.strip()
        if key not in spec:
            raise ConfigError(f"line {lineno}: unknown config key {key!r}")
        kind = spec[key]
        try:
            if kind == "bool":
                if text.lower() in ("true", "1", "yes"):
                    values[key] = True
                elif text.lower() in ("false", "0", "no"):
                    values[key] = False
                else:
                    raise ValueError(text)
            elif kind == "int":
                values[key] = int(text)
            else:
                values[key] = float(text)
        except ValueError:
            raise ConfigError(
                f"line {lineno}: cannot parse {text!r} as {kind} for {key!r}") from None
    return TrainConfig(**values)


# ---------------------------------------------------------------------------
# optimizer


@dataclass
class AdamState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int = 0

    @classmethod
    def for_params(cls, params: dict[str, Parameter]) -> "AdamState":
        return cls(m={n: np.zeros_like(p.value.data) for n, p in params.items()},
                   v={n: np.zeros_like(p.value.data) for n, p in params.items()})


def adam_step(params: dict[str, Parameter], state: AdamState,
              lr: float, beta1: float = 0.9, beta2: float = 0.999,
              epsilon: float = 1e-8) -> None:
    """One bias-corrected Adam update in place; clears gradients after."""
    if set(state.m) != set(params):
        raise TrainingError("optimizer state does not match the parameter set")
    state.step += 1
    t = state.step
    corr1 = 1.0 - beta1 ** t
    corr2 = 1.0 - beta2 ** t
    for name, p in params.items():
        g = p.grad  # zeros when the graph never reached this parameter
        if not np.all(np.isfinite(g)):
            raise TrainingError(f"non-finite gradient in parameter {name!r}")
        m = state.m[name]
        v = state.v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * (g * g)
        update = (lr / corr1) * m / (np.sqrt(v / corr2) + epsilon)
        p.value.data -= update.astype(p.value.data.dtype)
        p.zero_grad()


def lr_schedule(base_lr: float, epoch: int, factor: float = 0.5,
                period: int = 50) -> float:
    """Stepwise decay: base_lr * factor^(epoch // period)."""
    if period < 1:
        raise ConfigError(f"decay period must be positive, got {period}")
    if not (0.0 < factor <= 1.0):
        raise ConfigError(f"decay factor must be in (0, 1], got {factor}")
    if epoch < 0:
        raise ConfigError(f"epoch must be nonnegative, got {epoch}")
    return base_lr * factor ** (epoch // period)


# ---------------------------------------------------------------------------
# datasets


@dataclass(frozen=True)
class DatasetPair:
    ldr_path: Path
    hdr_path: Path
    split: str = "train"


@dataclass
class DatasetIndex:
    pairs: list[DatasetPair]

    def subset(self, split: str) -> list[DatasetPair]:
        return [p for p in self.pairs if p.split == split]


def build_index(directory: str | Path) -> DatasetIndex:
    """Pair up *.ppm and *.hdr files with matching stems, sorted by stem.
    Files without a counterpart are ignored."""
    root = Path(directory)
    if not root.is_dir():
        raise ConfigError(f"dataset directory {root} does not exist")
    ldrs = {p.stem: p for p in root.glob("*.ppm")}
    hdrs = {p.stem: p for p in root.glob("*.hdr")}
    pairs = [DatasetPair(ldrs[stem], hdrs[stem])
             for stem in sorted(set(ldrs) & set(hdrs))]
    return DatasetIndex(pairs)


def split_dataset(index: DatasetIndex, seed: int) -> DatasetIndex:
    """Seeded shuffle, then first 80% (by count, floored) train, rest test."""
    n = len(index.pairs)
    if n < 5:
        raise ConfigError(f"need at least 5 pairs to split, got {n}")
    order = np.random.default_rng(np.random.SeedSequence(seed)).permutation(n)
    cut = int(n * 0.8)
    tagged = []
    for rank, original in enumerate(order):
        pair = index.pairs[int(original)]
        tag = "train" if rank < cut else "test"
        tagged.append(DatasetPair(pair.ldr_path, pair.hdr_path, tag))
    return DatasetIndex(tagged)


# ---------------------------------------------------------------------------
# synthetic pairs


def _synth(seed: int, width: int, height: int):
    """Procedural HDR scene plus its LDR capture; returns the exposure too."""
    if width < 8 or height < 8:
        raise ConfigError(f"synthetic extents must be at least 8, got {width}x{height}")
    rng = np.random.default_rng(np.random.SeedSequence(seed))
    ys, xs = np.mgrid[0:height, 0:width].astype(np.float64)
    ys /= max(height - 1, 1)
    xs /= max(width - 1, 1)

    hdr = np.zeros((height, width, 3), dtype=np.float64)
    # smooth directional gradients per channel
    for c in range(3):
        gx, gy = rng.uniform(-1.0, 1.0, size=2)
        hdr[:, :, c] = 0.3 + 0.25 * (gx * xs + gy * ys) + 0.25
    # a few soft gaussian blobs
    for _ in range(rng.integers(2, 5)):
        cy, cx = rng.uniform(0.1, 0.9, size=2)
        sigma = rng.uniform(0.08, 0.25)
        amp = rng.uniform(0.2, 1.5)
        blob = amp * np.exp(-((ys - cy) ** 2 + (xs - cx) ** 2) / (2 * sigma ** 2))
        hdr += blob[:, :, None] * rng.uniform(0.4, 1.0, size=3)
    # dark region: one corner quadrant pulled down
    dark = np.exp(-((ys - 1.0) ** 2 + (xs - 1.0) ** 2) / (2 * 0.35 ** 2))
    hdr *= (1.0 - 0.85 * dark[:, :, None])
    # bright light-source disk at the normalized peak
    cy, cx = rng.uniform(0.2, 0.8, size=2)
    radius = rng.uniform(0.05, 0.15)
    disk = ((ys - cy) ** 2 + (xs - cx) ** 2) <= radius ** 2
    if not disk.any():
        disk[int(cy * (height - 1)), int(cx * (width - 1))] = True
    intensity = rng.uniform(20.0, 60.0)
    hdr[disk] = intensity * rng.uniform(0.85, 1.0, size=3)

    hdr = np.clip(hdr, 0.0, None)
    hdr /= hdr.max()  # GT normalized to unit peak

    exposure = rng.uniform(4.0, 10.0)
    clipped = np.clip(hdr * exposure, 0.0, 1.0)
    crf = clipped ** (1.0 / 2.2)
    quantized = np.round(crf * 255.0) / 255.0
    ldr = LdrImage(quantized.astype(np.float32))
    return ldr, HdrImage(hdr.astype(np.float32)), exposure


def synth_pair(seed: int, width: int = 64, height: int = 64) -> tuple[LdrImage, HdrImage]:
    ldr, hdr, _ = _synth(seed, width, height)
    return ldr, hdr


# ---------------------------------------------------------------------------
# training


@dataclass(frozen=True)
class LossLogRow:
    epoch: int
    mean_loss: float
    lr: float


@dataclass
class _Sample:
    """Pre-baked per-pair inputs: bracket arrays, tone-mapped GT, features."""

    inputs: tuple[np.ndarray, np.ndarray, np.ndarray]
    gt_tm: np.ndarray
    gt_features: list[np.ndarray]


def _prepare(samples, config: TrainConfig,
             extractor: PerceptualExtractor | None) -> list[_Sample]:
    peak = max(max(float(hdr.pixels.max()) for _, hdr in samples), _PEAK_FLOOR)
    prepared = []
    for ldr, hdr in samples:
        ldr = resize_bilinear(ldr, config.size, config.size)
        hdr = resize_bilinear(hdr, config.size, config.size)
        stack = bracket(ldr)
        inputs = tuple(image_to_tensor(img.pixels).data
                       for img in (stack.ev_minus2, stack.ev_0, stack.ev_plus2))
        gt = np.clip(hdr.pixels.astype(np.float64) / peak, 0.0, 1.0)
        gt_tm = mu_law_values(gt).astype(np.float32)
        gt_tm = gt_tm.transpose(2, 0, 1)[None, :, :, :]
        feats = []
        if extractor is not None:
            feats = [f.data for f in extractor.features(Tensor(gt_tm))]
        prepared.append(_Sample(inputs, gt_tm, feats))
    return prepared


def _batch_loss(batch: list[_Sample], params, net_cfg: NetworkConfig,
                weights: LossWeights,
                extractor: PerceptualExtractor | None) -> tuple[Tensor, float, float]:
    """Loss tensor for one batch plus the detached term values."""
    xm2 = Tensor(np.concatenate([s.inputs[0] for s in batch], axis=0))
    x0 = Tensor(np.concatenate([s.inputs[1] for s in batch], axis=0))
    xp2 = Tensor(np.concatenate([s.inputs[2] for s in batch], axis=0))
    gt_tm = ToneMapped(Tensor(np.concatenate([s.gt_tm for s in batch], axis=0)))
    trace = forward_tensors(xm2, x0, xp2, params, net_cfg)
    outputs = [compress_prediction(o) for o in trace.outputs]
    terms = []
    l1_value = 0.0
    per_value = 0.0
    if weights.lambda1 > 0.0:
        l1 = l1_loss(outputs, gt_tm)
        l1_value = float(l1.data)
        terms.append(scale(l1, weights.lambda1))
    if weights.lambda2 > 0.0:
        gt_features = [Tensor(np.concatenate([s.gt_features[i] for s in batch], axis=0))
                       for i in range(len(batch[0].gt_features))]
        per = perceptual_loss(outputs, gt_tm, extractor, gt_features=gt_features)
        per_value = float(per.data)
        terms.append(scale(per, weights.lambda2))
    total = terms[0]
    for t in terms[1:]:
        total = add(total, t)
    return total, l1_value, per_value


def train(config: TrainConfig, samples, out_path: str | Path | None = None,
          initial: Checkpoint | None = None) -> tuple[Checkpoint, list[LossLogRow]]:
    """Optimize the network on (LdrImage, HdrImage) pairs.

    Returns the final checkpoint and the per-epoch loss log. When
    ``out_path`` is set, checkpoints land there every
    ``checkpoint_period`` epochs and at the end. ``initial`` resumes
    from an existing checkpoint (its config must match).
    """
    samples = list(samples)
    if not samples:
        raise ConfigError("training needs at least one sample pair")
    net_cfg = config.network_config()
    if initial is not None:
        if initial.config != net_cfg:
            raise ConfigError(
                "checkpoint configuration does not match the training config")
        params = initial.params
        epoch_base = initial.epochs_trained
    else:
        params = init_params(net_cfg, seed=config.seed)
        epoch_base = 0
    weights = config.loss_weights()
    extractor = default_extractor() if weights.lambda2 > 0.0 else None
    prepared = _prepare(samples, config, extractor)
    state = AdamState.for_params(params)
    log: list[LossLogRow] = []

    for local_epoch in range(config.epochs):
        epoch = epoch_base + local_epoch
        lr = lr_schedule(config.learning_rate, epoch,
                         config.decay_factor, config.decay_period)
        order = np.random.default_rng(
            np.random.SeedSequence(config.seed, spawn_key=(epoch,))
        ).permutation(len(prepared))
        losses = []
        for batch_no, start in enumerate(range(0, len(order), config.batch_size)):
            batch = [prepared[int(i)] for i in order[start:start + config.batch_size]]
            loss, l1_value, per_value = _batch_loss(
                batch, params, net_cfg, weights, extractor)
            loss_value = float(loss.data)
            if not math.isfinite(loss_value):
                raise TrainingError(
                    f"non-finite loss at epoch {epoch} batch {batch_no}: "
                    f"total={loss_value} l1={l1_value} perceptual={per_value}")
            backward(loss)
            adam_step(params, state, lr, config.beta1, config.beta2,
                      config.epsilon)
            losses.append(loss_value)
        log.append(LossLogRow(epoch, float(np.mean(losses)), lr))
        done = epoch + 1
        if (out_path is not None and config.checkpoint_period > 0
                and done % config.checkpoint_period == 0):
            save_checkpoint(out_path, Checkpoint(net_cfg, params,
                                                 mu=DEFAULT_MU,
                                                 epochs_trained=done))
    ckpt = Checkpoint(net_cfg, params, mu=DEFAULT_MU,
                      epochs_trained=epoch_base + config.epochs)
    if out_path is not None:
        save_checkpoint(out_path, ckpt)
    return ckpt, log


def loss_log_csv(log: list[LossLogRow]) -> str:
    lines = ["epoch,mean_loss,lr"]
    for row in log:
        lines.append(f"{row.epoch},{row.mean_loss!r},{row.lr!r}")
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# evaluation


def infer_hdr(ckpt: Checkpoint, ldr: LdrImage) -> HdrImage:
    """Run the network on one LDR image; final-iteration output only."""
    trace = _infer_trace(ckpt, ldr)
    return map_to_hdr(trace.outputs[-1], mu=ckpt.mu)


def infer_iterations(ckpt: Checkpoint, ldr: LdrImage) -> list[HdrImage]:
    """Every per-iteration network output mapped to linear radiance."""
    trace = _infer_trace(ckpt, ldr)
    return [map_to_hdr(o, mu=ckpt.mu) for o in trace.outputs]


def _infer_trace(ckpt: Checkpoint, ldr: LdrImage):
    stack = bracket(ldr)
    xm2 = image_to_tensor(stack.ev_minus2.pixels)
    x0 = image_to_tensor(stack.ev_0.pixels)
    xp2 = image_to_tensor(stack.ev_plus2.pixels)
    return forward_tensors(xm2, x0, xp2, ckpt.params, ckpt.config)


def _score_pair(pred: HdrImage, gt: HdrImage, mu: float) -> tuple[float, float]:
    """PSNR on tone-mapped unit-peak images, SSIM on the linear pair."""
    gt_n = gt.pixels.astype(np.float64)
    gt_n = gt_n / max(float(gt_n.max()), _PEAK_FLOOR)
    pred_n = np.clip(pred.pixels.astype(np.float64), 0.0, 1.0)
    psnr_db = psnr(mu_law_values(gt_n), mu_law_values(pred_n), peak=1.0)
    ssim_value = ssim(HdrImage(pred_n.astype(np.float32)),
                      HdrImage(gt_n.astype(np.float32)))
    return psnr_db, ssim_value


def evaluate(ckpt: Checkpoint, pairs) -> tuple[MetricsReport, list[tuple[str, str]]]:
    """Score the checkpoint on (ldr_path, hdr_path) pairs at native size.

    Unreadable pairs are skipped and itemized; the report holds one row per
    successfully scored image.
    """
    report = MetricsReport()
    skipped: list[tuple[str, str]] = []
    for pair in pairs:
        ldr_path = Path(pair.ldr_path)
        hdr_path = Path(pair.hdr_path)
        try:
            ldr = load_ldr(ldr_path)
            gt = load_hdr(hdr_path)
            pred = infer_hdr(ckpt, ldr)
            psnr_db, ssim_value = _score_pair(pred, gt, ckpt.mu)
        except (HdrkitError, OSError) as exc:
            skipped.append((str(ldr_path), str(exc)))
            continue
        report.add(str(hdr_path), psnr_db, ssim_value)
    return report, skipped
