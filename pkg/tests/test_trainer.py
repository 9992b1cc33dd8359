"""Trainer, optimizer, dataset, and synthetic-data tests."""

from __future__ import annotations

import math

import numpy as np
import pytest

from hdrkit.checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from hdrkit.errors import ConfigError, TrainingError
from hdrkit.imgio import HdrImage, LdrImage, save_hdr, save_ldr
from hdrkit.losses import LossWeights, default_extractor
from hdrkit.network import init_params
from hdrkit.tensor import Parameter, Tensor, backward, mul, sum_all
from hdrkit.trainer import (
    AdamState,
    DatasetIndex,
    DatasetPair,
    TrainConfig,
    _batch_loss,
    _prepare,
    _score_pair,
    _synth,
    adam_step,
    build_index,
    evaluate,
    loss_log_csv,
    lr_schedule,
    parse_config_file,
    split_dataset,
    synth_pair,
    train,
)

DESK = dict(epochs=2, channels=4, growth=2, iterations=2, size=16)


# ---------------------------------------------------------------------------
# config


def test_train_config_validation():
    with pytest.raises(ConfigError):
        TrainConfig(learning_rate=0.0)
    with pytest.raises(ConfigError):
        TrainConfig(decay_factor=0.0)
    with pytest.raises(ConfigError):
        TrainConfig(decay_factor=1.5)
    with pytest.raises(ConfigError):
        TrainConfig(lambda1=0.0, lambda2=0.0)
    with pytest.raises(ConfigError):
        TrainConfig(size=4)
    with pytest.raises(ConfigError):
        TrainConfig(batch_size=0)


def test_parse_config_file(tmp_path):
    cfg_file = tmp_path / "desk.cfg"
    cfg_file.write_text(
        "# desk-scale run\n"
        "learning_rate = 1e-3\n"
        "epochs = 5\n"
        "channels = 8\n"
        "use_skip1 = false\n"
        "lambda2 = 0  # reconstruction only\n"
        "\n")
    cfg = parse_config_file(cfg_file)
    assert cfg.learning_rate == 1e-3
    assert cfg.epochs == 5
    assert cfg.channels == 8
    assert cfg.use_skip1 is False
    assert cfg.lambda2 == 0.0
    assert cfg.batch_size == 2  # untouched default


def test_parse_config_file_rejects_unknown_key(tmp_path):
    bad = tmp_path / "bad.cfg"
    bad.write_text("learning_rte = 1e-3\n")
    with pytest.raises(ConfigError, match="unknown"):
        parse_config_file(bad)
    bad.write_text("epochs = five\n")
    with pytest.raises(ConfigError, match="parse"):
        parse_config_file(bad)
    bad.write_text("no equals sign\n")
    with pytest.raises(ConfigError):
        parse_config_file(bad)


# ---------------------------------------------------------------------------
# optimizer


def _scalar_param(value):
    return {"w": Parameter(np.array([value], dtype=np.float32), "w")}


def test_adam_zero_gradient_keeps_params():
    params = _scalar_param(0.5)
    state = AdamState.for_params(params)
    params["w"].value.grad = np.zeros(1, dtype=np.float32)
    adam_step(params, state, lr=0.1)
    assert params["w"].value.data[0] == 0.5
    assert state.step == 1


def test_adam_first_step_is_signed_lr():
    # bias correction makes the first update lr * g/(|g| + eps') ~ lr*sign(g)
    for g in (3.0, -0.25):
        params = _scalar_param(1.0)
        state = AdamState.for_params(params)
        params["w"].value.grad = np.array([g], dtype=np.float32)
        adam_step(params, state, lr=1e-3)
        moved = params["w"].value.data[0] - 1.0
        assert moved == pytest.approx(-1e-3 * np.sign(g), rel=1e-4)


def test_adam_nan_gradient_names_parameter():
    params = _scalar_param(1.0)
    state = AdamState.for_params(params)
    params["w"].value.grad = np.array([float("nan")], dtype=np.float32)
    with pytest.raises(TrainingError, match="'w'"):
        adam_step(params, state, lr=1e-3)


def test_adam_clears_gradients():
    params = _scalar_param(1.0)
    state = AdamState.for_params(params)
    params["w"].value.grad = np.ones(1, dtype=np.float32)
    adam_step(params, state, lr=1e-3)
    assert params["w"].value.grad is None


def test_adam_deterministic_trajectory():
    def run():
        params = _scalar_param(2.0)
        state = AdamState.for_params(params)
        for step in range(20):
            x = params["w"].value
            loss = sum_all(mul(x, x))
            backward(loss)
            adam_step(params, state, lr=0.05)
        return params["w"].value.data.copy()

    a, b = run(), run()
    assert np.array_equal(a, b)
    assert abs(a[0]) < 2.0  # moved toward the minimum


def test_lr_schedule():
    assert lr_schedule(2e-4, 0) == 2e-4
    assert lr_schedule(2e-4, 49) == 2e-4
    assert lr_schedule(2e-4, 50) == 1e-4
    assert lr_schedule(2e-4, 100) == 5e-5
    assert lr_schedule(2e-4, 137, factor=1.0) == 2e-4
    with pytest.raises(ConfigError):
        lr_schedule(2e-4, 10, period=0)
    with pytest.raises(ConfigError):
        lr_schedule(2e-4, -1)


# ---------------------------------------------------------------------------
# dataset handling


def _fake_index(n):
    return DatasetIndex([DatasetPair(f"{i}.ppm", f"{i}.hdr") for i in range(n)])


def test_split_80_20():
    out = split_dataset(_fake_index(10), seed=1)
    assert len(out.subset("train")) == 8
    assert len(out.subset("test")) == 2
    all_paths = {p.ldr_path for p in out.pairs}
    assert all_paths == {f"{i}.ppm" for i in range(10)}


def test_split_deterministic_and_seed_sensitive():
    ref = [p.split for p in split_dataset(_fake_index(20), seed=7).pairs]
    same = [p.split for p in split_dataset(_fake_index(20), seed=7).pairs]
    assert ref == same
    orders = set()
    for seed in range(100):
        out = split_dataset(_fake_index(20), seed=seed)
        orders.add(tuple(p.ldr_path for p in out.pairs))
    assert len(orders) > 90


def test_split_too_small():
    with pytest.raises(ConfigError):
        split_dataset(_fake_index(4), seed=0)


def test_build_index_matches_stems(tmp_path):
    rng = np.random.default_rng(70)
    for stem in ("b", "a", "c"):
        save_ldr(tmp_path / f"{stem}.ppm",
                 LdrImage(rng.uniform(0, 1, (8, 8, 3)).astype(np.float32)))
    for stem in ("a", "c", "orphan"):
        save_hdr(tmp_path / f"{stem}.hdr",
                 HdrImage(rng.uniform(0, 2, (8, 8, 3)).astype(np.float32)))
    index = build_index(tmp_path)
    stems = [p.ldr_path.stem for p in index.pairs]
    assert stems == ["a", "c"]
    with pytest.raises(ConfigError):
        build_index(tmp_path / "missing")


# ---------------------------------------------------------------------------
# synthetic pairs


def test_synth_pair_deterministic():
    a_ldr, a_hdr = synth_pair(11, 16, 16)
    b_ldr, b_hdr = synth_pair(11, 16, 16)
    assert np.array_equal(a_ldr.pixels, b_ldr.pixels)
    assert np.array_equal(a_hdr.pixels, b_hdr.pixels)
    c_ldr, _ = synth_pair(12, 16, 16)
    assert not np.array_equal(a_ldr.pixels, c_ldr.pixels)


def test_synth_pair_ldr_on_8bit_grid():
    ldr, hdr = synth_pair(13, 24, 16)
    px = ldr.pixels
    assert px.min() >= 0.0 and px.max() <= 1.0
    grid = np.round(px.astype(np.float64) * 255.0) / 255.0
    assert np.max(np.abs(px.astype(np.float64) - grid)) < 1e-7
    assert hdr.pixels.max() == 1.0


def test_synth_pair_contains_saturated_region():
    ldr, hdr, exposure = _synth(14, 32, 32)
    over = hdr.pixels.astype(np.float64) > (1.0 / exposure) + 1e-9
    assert over.any()
    assert np.all(ldr.pixels[over] == 1.0)


def test_synth_pair_extent_guard():
    with pytest.raises(ConfigError):
        synth_pair(0, 4, 16)


# ---------------------------------------------------------------------------
# training loop


def test_train_log_length_and_decreasing_loss():
    cfg = TrainConfig(seed=5, epochs=8, learning_rate=1e-3, **{
        k: v for k, v in DESK.items() if k != "epochs"})
    samples = [synth_pair(100, 16, 16)]
    ckpt, log = train(cfg, samples)
    assert len(log) == 8
    assert all(math.isfinite(r.mean_loss) for r in log)
    assert log[-1].mean_loss < log[0].mean_loss
    assert ckpt.epochs_trained == 8
    csv = loss_log_csv(log)
    lines = csv.strip().split("\n")
    assert lines[0] == "epoch,mean_loss,lr"
    assert len(lines) == 9


def test_train_deterministic_checkpoints(tmp_path):
    cfg = TrainConfig(seed=9, **DESK)
    samples = [synth_pair(200, 16, 16), synth_pair(201, 16, 16)]
    a_path = tmp_path / "a.ahdr"
    b_path = tmp_path / "b.ahdr"
    train(cfg, samples, out_path=a_path)
    train(cfg, samples, out_path=b_path)
    assert a_path.read_bytes() == b_path.read_bytes()


def test_train_aborts_on_poisoned_params():
    cfg = TrainConfig(seed=5, **DESK)
    net_cfg = cfg.network_config()
    params = init_params(net_cfg, seed=5)
    params["ru.conv3.weight"].value.data[0, 0, 0, 0] = float("nan")
    poisoned = Checkpoint(net_cfg, params, epochs_trained=0)
    with pytest.raises(TrainingError, match="epoch 0 batch 0"):
        train(cfg, [synth_pair(300, 16, 16)], initial=poisoned)


def test_train_resume_matches_uninterrupted(tmp_path):
    samples = [synth_pair(400, 16, 16)]
    full_cfg = TrainConfig(seed=77, **DESK)  # 2 epochs
    _, full_log = train(full_cfg, samples)

    half_cfg = TrainConfig(seed=77, **{**DESK, "epochs": 1})
    path = tmp_path / "half.ahdr"
    train(half_cfg, samples, out_path=path)
    resumed = load_checkpoint(path)
    assert resumed.epochs_trained == 1
    _, resume_log = train(half_cfg, samples, initial=resumed)
    assert resume_log[0].epoch == 1
    # loss of the first resumed step equals the uninterrupted run's
    assert resume_log[0].mean_loss == full_log[1].mean_loss


def test_train_rejects_mismatched_resume():
    cfg = TrainConfig(seed=1, **DESK)
    other = TrainConfig(seed=1, **{**DESK, "channels": 8})
    ckpt, _ = train(other, [synth_pair(500, 16, 16)])
    with pytest.raises(ConfigError):
        train(cfg, [synth_pair(500, 16, 16)], initial=ckpt)


def test_train_periodic_checkpoints(tmp_path):
    cfg = TrainConfig(seed=2, checkpoint_period=2, **{**DESK, "epochs": 3})
    path = tmp_path / "p.ahdr"
    samples = [synth_pair(600, 16, 16)]
    ckpt, _ = train(cfg, samples, out_path=path)
    final = load_checkpoint(path)
    assert final.epochs_trained == 3


# ---------------------------------------------------------------------------
# loss wiring (ablation parity)


def test_batch_loss_term_wiring():
    cfg = TrainConfig(seed=3, **DESK)
    net_cfg = cfg.network_config()
    params = init_params(net_cfg, seed=3)
    extractor = default_extractor()
    prepared = _prepare([synth_pair(700, 16, 16)], cfg, extractor)

    both, l1_value, per_value = _batch_loss(
        prepared, params, net_cfg, LossWeights(0.1, 0.5), extractor)
    assert l1_value > 0 and per_value > 0
    assert float(both.data) == pytest.approx(0.1 * l1_value + 0.5 * per_value,
                                             rel=1e-6)

    only_l1, l1_b, per_b = _batch_loss(
        prepared, params, net_cfg, LossWeights(0.1, 0.0), None)
    assert per_b == 0.0
    assert float(only_l1.data) == pytest.approx(0.1 * l1_b, rel=1e-6)
    assert l1_b == l1_value

    only_per, l1_c, per_c = _batch_loss(
        prepared, params, net_cfg, LossWeights(0.0, 0.5), extractor)
    assert l1_c == 0.0
    assert per_c == per_value


# ---------------------------------------------------------------------------
# evaluation


def _write_pairs(tmp_path, count, size=16):
    pairs = []
    for i in range(count):
        ldr, hdr = synth_pair(800 + i, size, size)
        lp = tmp_path / f"img{i}.ppm"
        hp = tmp_path / f"img{i}.hdr"
        save_ldr(lp, ldr)
        save_hdr(hp, hdr)
        pairs.append(DatasetPair(lp, hp))
    return pairs


def test_score_pair_identity():
    _, hdr = synth_pair(900, 16, 16)
    psnr_db, ssim_value = _score_pair(hdr, hdr, mu=5000.0)
    assert psnr_db == float("inf")
    assert ssim_value == 1.0


def test_evaluate_row_count_and_skips(tmp_path):
    cfg = TrainConfig(seed=4, **{**DESK, "epochs": 1})
    ckpt, _ = train(cfg, [synth_pair(901, 16, 16)])
    pairs = _write_pairs(tmp_path, 3)
    pairs.append(DatasetPair(tmp_path / "missing.ppm", tmp_path / "missing.hdr"))
    report, skipped = evaluate(ckpt, pairs)
    assert len(report.rows) == 3
    assert len(skipped) == 1
    assert "missing.ppm" in skipped[0][0]
    for row in report.rows:
        assert math.isfinite(row.psnr_db)
        assert -1.0 <= row.ssim <= 1.0


def test_evaluate_runs_at_native_size(tmp_path):
    # trained at 16x16 but evaluation accepts other extents
    cfg = TrainConfig(seed=6, **{**DESK, "epochs": 1})
    ckpt, _ = train(cfg, [synth_pair(902, 16, 16)])
    pairs = _write_pairs(tmp_path, 1, size=24)
    report, skipped = evaluate(ckpt, pairs)
    assert not skipped
    assert len(report.rows) == 1
