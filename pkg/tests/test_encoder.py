import numpy as np
import pytest
import torch

from ocnet.encoder import (
    CamHead,
    Encoder,
    EncoderBundle,
    EncoderConfig,
    PretrainConfig,
    cam_map,
    classification_accuracy,
    image_to_tensor,
    mask_to_tensor,
    pretrain_encoder,
)
from ocnet.episodes import SynthConfig, generate_synthetic, make_folds
from ocnet.numerics import downsample_mask

torch.set_num_threads(1)


@pytest.fixture(scope="module")
def desk_data():
    return generate_synthetic(SynthConfig(images_per_class=30, seed=11))


@pytest.fixture(scope="module")
def fold0_split():
    return make_folds(12, 0)


@pytest.fixture(scope="module")
def bundle(desk_data, fold0_split):
    return pretrain_encoder(desk_data, fold0_split.train_classes, cfg=PretrainConfig(seed=3))


def rand_image(rng, size=64):
    return torch.from_numpy(rng.random((size, size, 3), dtype=np.float32))


# ---------------------------------------------------------------- shapes


def test_feature_grid_shapes():
    torch.manual_seed(0)
    enc = Encoder(EncoderConfig())
    mid, high = enc.extract(rand_image(np.random.default_rng(0)))
    assert mid.shape == (16, 16, 64)
    assert high.shape == (16, 16, 64)


def test_stride_four_on_other_input_size():
    torch.manual_seed(0)
    enc = Encoder(EncoderConfig(input_size=96))
    mid, high = enc.extract(rand_image(np.random.default_rng(1), 96))
    assert mid.shape[:2] == (24, 24)
    assert high.shape[:2] == (24, 24)


def test_custom_widths_reach_outputs():
    torch.manual_seed(0)
    cfg = EncoderConfig(widths=(8, 16, 24, 40))
    mid, high = Encoder(cfg).extract(rand_image(np.random.default_rng(2)))
    assert mid.shape[2] == 24
    assert high.shape[2] == 40


def test_input_size_mismatch_rejected():
    torch.manual_seed(0)
    enc = Encoder(EncoderConfig())
    with pytest.raises(ValueError, match="64x64"):
        enc.extract(rand_image(np.random.default_rng(3), 32))


def test_stage_order_validated():
    with pytest.raises(ValueError):
        Encoder(EncoderConfig(mid_stage=4, high_stage=3))


def test_extract_matches_batched_forward():
    torch.manual_seed(4)
    enc = Encoder(EncoderConfig())
    img = rand_image(np.random.default_rng(4))
    mid, high = enc.extract(img)
    bmid, bhigh = enc(img.permute(2, 0, 1).unsqueeze(0))
    assert torch.equal(mid, bmid[0].permute(1, 2, 0))
    assert torch.equal(high, bhigh[0].permute(1, 2, 0))


# ---------------------------------------------------------------- CAM head


def test_cam_peak_at_active_cell():
    head = CamHead(high_channels=4, num_base_classes=2)
    with torch.no_grad():
        head.classifier.weight.zero_()
        head.classifier.weight[0, 1] = 1.0
    f_high = torch.zeros(5, 6, 4)
    f_high[2, 3, 1] = 1.0
    cam = cam_map(f_high, head)
    assert cam[2, 3].item() == pytest.approx(1.0, abs=1e-6)
    mask = torch.ones(5, 6, dtype=torch.bool)
    mask[2, 3] = False
    assert cam[mask].abs().max().item() < 1e-6


def test_cam_range_unit_interval():
    torch.manual_seed(5)
    head = CamHead(high_channels=8, num_base_classes=3)
    cam = cam_map(torch.randn(7, 7, 8), head)
    assert cam.min().item() >= 0.0
    assert cam.max().item() <= 1.0


def test_cam_invariant_to_positive_rescale():
    torch.manual_seed(6)
    head = CamHead(high_channels=8, num_base_classes=3)
    f_high = torch.randn(9, 9, 8).abs()
    a = cam_map(f_high, head)
    b = cam_map(3.7 * f_high, head)
    assert torch.allclose(a, b, atol=1e-6)


def test_cam_head_needs_two_classes():
    with pytest.raises(ValueError):
        CamHead(high_channels=8, num_base_classes=1)


# ---------------------------------------------------------------- determinism


def test_pretrain_deterministic():
    data = generate_synthetic(SynthConfig(num_classes=8, images_per_class=8, seed=5))
    split = make_folds(8, 0)
    cfg = PretrainConfig(epochs=2, seed=7)
    a = pretrain_encoder(data, split.train_classes, cfg=cfg)
    b = pretrain_encoder(data, split.train_classes, cfg=cfg)
    for pa, pb in zip(a.encoder.parameters(), b.encoder.parameters()):
        assert torch.equal(pa, pb)
    for pa, pb in zip(a.cam_head.parameters(), b.cam_head.parameters()):
        assert torch.equal(pa, pb)
    assert a.epoch_losses == b.epoch_losses


def test_translation_equivariance_at_stride_granularity():
    torch.manual_seed(8)
    enc = Encoder(EncoderConfig())
    rng = np.random.default_rng(8)
    base = rng.random((64, 64, 3), dtype=np.float32)
    shifted = np.zeros_like(base)
    shifted[:, 4:] = base[:, :-4]
    m1, _ = enc.extract(torch.from_numpy(base))
    m2, _ = enc.extract(torch.from_numpy(shifted))
    # shifting the image 4 px right moves features 1 cell; compare interiors
    assert torch.allclose(m1[6:10, 6:9], m2[6:10, 7:10], atol=1e-5)


# ---------------------------------------------------------------- pretraining


def test_pretrain_needs_two_classes(desk_data):
    with pytest.raises(ValueError, match="2 base classes"):
        pretrain_encoder(desk_data, {4}, cfg=PretrainConfig(epochs=1))


def test_pretrain_loss_decreases(bundle):
    losses = bundle.epoch_losses
    assert losses[-1] < losses[0]
    assert np.mean(losses[-3:]) < np.mean(losses[:3])


def test_pretrain_heldout_accuracy(bundle):
    assert bundle.val_accuracy > 0.8


def test_untrained_head_near_chance(desk_data, fold0_split):
    torch.manual_seed(9)
    cfg = EncoderConfig()
    raw = EncoderBundle(
        Encoder(cfg), CamHead(cfg.high_channels, 9), tuple(sorted(fold0_split.train_classes))
    )
    pool = [s for s in desk_data.samples if s.class_id in fold0_split.train_classes][:120]
    acc = classification_accuracy(raw, pool)
    assert acc < 0.4  # chance is 1/9


def test_pretrained_bundle_is_frozen(bundle):
    for p in bundle.encoder.parameters():
        assert not p.requires_grad
    for p in bundle.cam_head.parameters():
        assert not p.requires_grad
    assert not bundle.encoder.training
    mid, high = bundle.encoder.extract(rand_image(np.random.default_rng(10)))
    # no autograd graph leaks out of a frozen backbone
    assert not mid.requires_grad and not high.requires_grad


def test_cam_localizes_labeled_object(bundle, desk_data, fold0_split):
    """Mean activation inside the target mask beats outside on most images."""
    pool = [s for s in desk_data.samples if s.class_id in fold0_split.train_classes][:200]
    wins = 0
    for s in pool:
        _, high = bundle.encoder.extract(image_to_tensor(s.image))
        cam = cam_map(high, bundle.cam_head)
        grid = downsample_mask(mask_to_tensor(s.mask), 16, 16)
        inside = cam[grid > 0.5]
        outside = cam[grid <= 0.5]
        if inside.numel() and outside.numel() and inside.mean() > outside.mean():
            wins += 1
    assert wins >= 0.8 * len(pool)
