import math

import numpy as np
import pytest
import torch

from ocnet.checkpoint import (
    Checkpoint,
    CheckpointError,
    load_checkpoint,
    model_from_checkpoint,
    save_checkpoint,
    snapshot_model,
)
from ocnet.encoder import PretrainConfig, pretrain_encoder
from ocnet.episodes import SynthConfig, generate_synthetic, make_folds, sample_episode
from ocnet.model import ForwardOutput, ModelConfig, OCNet, variant_config
from ocnet.trainer import TrainConfig, metrics_csv_lines, total_loss, train

torch.set_num_threads(1)


@pytest.fixture(scope="module")
def desk_data():
    return generate_synthetic(SynthConfig(images_per_class=12, seed=41))


@pytest.fixture(scope="module")
def split():
    return make_folds(12, 0)


@pytest.fixture(scope="module")
def bundle(desk_data, split):
    return pretrain_encoder(
        desk_data, split.train_classes, cfg=PretrainConfig(epochs=6, seed=2)
    )


def tiny_config(**overrides):
    base = dict(epochs=2, episodes_per_epoch=6, val_episodes=3, seed=9)
    base.update(overrides)
    return TrainConfig(**base)


def fresh_model(bundle, variant="full"):
    torch.manual_seed(5)
    return OCNet(bundle, variant_config(variant))


# ------------------------------------------------------------------- losses


def test_perfect_prediction_near_zero_loss():
    gt = np.zeros((8, 8), dtype=np.uint8)
    gt[2:5, 2:5] = 1
    logits = torch.zeros(8, 8, 2)
    logits[..., 1] = torch.from_numpy(gt).float() * 100.0 - 50.0
    logits[..., 0] = -logits[..., 1]
    lb = total_loss(ForwardOutput(query_logits=logits), gt)
    assert float(lb.total) < 1e-6


def test_uniform_logits_ln2():
    gt = (np.random.default_rng(0).random((6, 6)) > 0.5).astype(np.uint8)
    lb = total_loss(ForwardOutput(query_logits=torch.zeros(6, 6, 2)), gt)
    assert float(lb.loss_t) == pytest.approx(math.log(2.0), abs=1e-6)
    assert float(lb.loss_g) == 0.0 and float(lb.loss_p) == 0.0


def test_loss_toggles_reduce_to_pure_target_term(bundle, desk_data, split):
    ep = sample_episode(desk_data, split.train_classes, 1, np.random.default_rng(1), 0)
    with torch.no_grad():
        out = fresh_model(bundle)(ep)
    full = total_loss(out, ep.query_mask)
    only_t = total_loss(out, ep.query_mask, use_loss_g=False, use_loss_p=False)
    assert float(only_t.total) == pytest.approx(float(full.loss_t), abs=1e-7)
    assert float(full.total) >= float(only_t.total)
    assert float(full.loss_t) >= 0 and float(full.loss_g) >= 0 and float(full.loss_p) >= 0


def test_train_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(lr=0.0)
    with pytest.raises(ValueError):
        TrainConfig(batch_size=0)
    with pytest.raises(ValueError):
        TrainConfig(clip_norm=-1.0)


def test_gradient_clipping_changes_updates(bundle, desk_data, split):
    """A vanishingly small norm cap must freeze the weights, which proves the
    clip applies to the accumulated gradients before each step."""
    model = fresh_model(bundle)
    before = {k: v.clone() for k, v in model.state_dict().items()}
    train(model, desk_data, split, tiny_config(clip_norm=1e-12))
    drift = max((v - before[k]).abs().max() for k, v in model.state_dict().items())
    assert float(drift) < 1e-6

    free = fresh_model(bundle)
    free.load_state_dict(before)
    train(free, desk_data, split, tiny_config(clip_norm=0.0))
    moved = max((v - before[k]).abs().max() for k, v in free.state_dict().items())
    assert float(moved) > 1e-4


# ------------------------------------------------------------------ training


def test_training_deterministic(bundle, desk_data, split):
    results = []
    for _ in range(2):
        model = fresh_model(bundle)
        res = train(model, desk_data, split, tiny_config())
        results.append(res.metrics)
    assert results[0] == results[1]


def test_training_loss_decreases(bundle, desk_data, split):
    model = fresh_model(bundle)
    res = train(model, desk_data, split, tiny_config(epochs=10, episodes_per_epoch=16))
    first = res.metrics[0]
    last = res.metrics[9]
    loss = lambda row: row["loss_t"] + row["loss_g"] + row["loss_p"]
    assert loss(last) < loss(first)


def test_encoder_frozen_through_training(bundle, desk_data, split):
    model = fresh_model(bundle)
    before = {n: p.clone() for n, p in model.encoder.named_parameters()}
    before["cam"] = model.cam_head.classifier.weight.clone()
    train(model, desk_data, split, tiny_config())
    for n, p in model.encoder.named_parameters():
        assert torch.equal(before[n], p)
    assert torch.equal(before["cam"], model.cam_head.classifier.weight)


def test_nan_loss_aborts_with_term_name(bundle, desk_data, split):
    model = fresh_model(bundle, "baseline")
    bad = torch.full((64, 64, 2), float("nan"))
    model.forward = lambda episode: ForwardOutput(query_logits=bad)
    with pytest.raises(FloatingPointError, match="loss_t"):
        train(model, desk_data, split, tiny_config())


def test_metrics_csv_format(bundle, desk_data, split, tmp_path):
    model = fresh_model(bundle)
    path = tmp_path / "metrics.csv"
    res = train(model, desk_data, split, tiny_config(), metrics_path=path)
    lines = path.read_text().strip().split("\n")
    assert lines[0] == "epoch,loss_t,loss_g,loss_p,val_miou"
    assert len(lines) == 1 + len(res.metrics)
    fields = lines[1].split(",")
    assert fields[0] == "1"
    assert all("." in f for f in fields[1:])
    assert lines == metrics_csv_lines(res.metrics)


# ---------------------------------------------------------------- checkpoints


def test_checkpoint_roundtrip_bit_exact(bundle, tmp_path):
    model = fresh_model(bundle)
    ckpt = snapshot_model(model, {"lr": 0.005}, {"state": 1})
    p1, p2 = tmp_path / "a.ocnt", tmp_path / "b.ocnt"
    save_checkpoint(p1, ckpt)
    loaded = load_checkpoint(p1)
    save_checkpoint(p2, loaded)
    assert p1.read_bytes() == p2.read_bytes()
    for name, tensor in ckpt.tensors.items():
        assert torch.equal(loaded.tensors[name], tensor)
    assert loaded.config == ckpt.config
    assert loaded.torch_rng == ckpt.torch_rng


def test_checkpoint_restores_identical_model(bundle, desk_data, split, tmp_path):
    model = fresh_model(bundle)
    train(model, desk_data, split, tiny_config())
    path = tmp_path / "m.ocnt"
    save_checkpoint(path, snapshot_model(model))
    rebuilt = model_from_checkpoint(load_checkpoint(path))
    ep = sample_episode(desk_data, split.test_classes, 1, np.random.default_rng(3), 0)
    assert np.array_equal(model.predict(ep), rebuilt.predict(ep))
    assert rebuilt.cfg == model.cfg
    assert not any(p.requires_grad for p in rebuilt.encoder.parameters())


def test_checkpoint_rejects_bad_magic(tmp_path):
    path = tmp_path / "bad.ocnt"
    path.write_bytes(b"NOPE" + b"\x00" * 16)
    with pytest.raises(CheckpointError, match="magic"):
        load_checkpoint(path)


def test_checkpoint_rejects_unknown_version(bundle, tmp_path):
    path = tmp_path / "v.ocnt"
    ckpt = snapshot_model(fresh_model(bundle))
    ckpt.version = 77
    save_checkpoint(path, ckpt)
    with pytest.raises(CheckpointError, match="version 77"):
        load_checkpoint(path)


def test_checkpoint_truncation_reports_offset(bundle, tmp_path):
    path = tmp_path / "t.ocnt"
    save_checkpoint(path, snapshot_model(fresh_model(bundle)))
    blob = path.read_bytes()
    cut = path.with_suffix(".cut")
    cut.write_bytes(blob[: len(blob) // 2])
    with pytest.raises(CheckpointError, match="offset"):
        load_checkpoint(cut)


def test_checkpoint_rejects_trailing_garbage(bundle, tmp_path):
    path = tmp_path / "g.ocnt"
    save_checkpoint(path, snapshot_model(fresh_model(bundle)))
    path.write_bytes(path.read_bytes() + b"xx")
    with pytest.raises(CheckpointError, match="trailing"):
        load_checkpoint(path)


def test_checkpoint_rejects_non_float32(tmp_path):
    ckpt = Checkpoint(config={}, tensors={"w": torch.zeros(2, dtype=torch.float64)})
    with pytest.raises(CheckpointError, match="float32"):
        save_checkpoint(tmp_path / "d.ocnt", ckpt)
