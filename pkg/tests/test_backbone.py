import numpy as np
import pytest
import torch

from textdiff.backbone import (
    UNetNoisePredictor,
    load_backbone,
    save_backbone,
    train_backbone,
)
from textdiff.errors import ConfigError, EmptyDatasetError, ShapeMismatchError, UnknownBlockError
from textdiff.schedule import DiffusionConfig, build_linear_schedule
from textdiff.seeding import torch_generator
from textdiff.serialize import module_digest


@pytest.fixture(scope="module")
def small_cfg():
    return DiffusionConfig(T=100, beta_start=1e-4, beta_end=0.02, image_size=16, channels=1, seed=11)


@pytest.fixture(scope="module")
def model(small_cfg):
    torch.manual_seed(0)
    return UNetNoisePredictor(small_cfg)


def test_registry_has_16_decoder_blocks(model):
    reg = model.block_registry
    assert len(reg) == 16
    assert set(reg) == set(range(1, 17))


def test_registry_shapes_coarsest_first(model):
    reg = model.block_registry
    assert reg[1] == (128, 4, 4)
    assert reg[6] == (128, 4, 4)
    assert reg[7] == (64, 8, 8)
    assert reg[11] == (64, 8, 8)
    assert reg[12] == (32, 16, 16)
    assert reg[16] == (32, 16, 16)


def test_predict_preserves_shape(model):
    x = torch.randn(1, 16, 16, generator=torch_generator(0))
    assert model.predict(x, 50).shape == x.shape
    xb = torch.randn(3, 1, 16, 16, generator=torch_generator(1))
    assert model.predict(xb, 50).shape == xb.shape


def test_taps_empty_selection(model):
    x = torch.randn(1, 16, 16, generator=torch_generator(2))
    eps, taps = model.forward_with_taps(x, 10, [])
    assert taps == {}
    assert eps.shape == x.shape


def test_taps_match_registry_shapes(model):
    x = torch.randn(1, 16, 16, generator=torch_generator(3))
    _, taps = model.forward_with_taps(x, 10, [6, 8, 12, 16])
    assert set(taps) == {6, 8, 12, 16}
    for z, act in taps.items():
        assert tuple(act.shape) == model.block_registry[z]


def test_taps_do_not_perturb_prediction(model):
    x = torch.randn(1, 16, 16, generator=torch_generator(4))
    eps_plain = model.predict(x, 37)
    eps_tapped, _ = model.forward_with_taps(x, 37, [1, 6, 11, 16])
    assert torch.equal(eps_plain, eps_tapped)


def test_unknown_block_rejected(model):
    x = torch.randn(1, 16, 16, generator=torch_generator(5))
    with pytest.raises(UnknownBlockError):
        model.forward_with_taps(x, 10, [17])
    with pytest.raises(UnknownBlockError):
        model.forward_with_taps(x, 10, [0])


def _toy_images(n, size=16, seed=0):
    rng = np.random.default_rng(seed)
    imgs = np.zeros((n, size, size, 1), dtype=np.float32)
    for i in range(n):
        cy, cx = rng.integers(4, size - 4, size=2)
        yy, xx = np.mgrid[0:size, 0:size]
        imgs[i, :, :, 0] = np.where((yy - cy) ** 2 + (xx - cx) ** 2 < 9, 0.8, -0.8)
    return imgs


def test_train_backbone_deterministic(small_cfg):
    imgs = _toy_images(4)
    m1, t1 = train_backbone(imgs, small_cfg, epochs=2, batch_size=2)
    m2, t2 = train_backbone(imgs, small_cfg, epochs=2, batch_size=2)
    assert t1 == t2
    assert module_digest(m1) == module_digest(m2)


def test_train_backbone_loss_decreases(small_cfg):
    imgs = _toy_images(8)
    _, trace = train_backbone(imgs, small_cfg, epochs=6, batch_size=4)
    assert trace[-1] < trace[0]


def test_train_backbone_empty_dataset(small_cfg):
    with pytest.raises(EmptyDatasetError):
        train_backbone(np.zeros((0, 16, 16, 1), dtype=np.float32), small_cfg)


def test_train_backbone_resolution_mismatch(small_cfg):
    with pytest.raises(ShapeMismatchError):
        train_backbone(np.zeros((2, 8, 8, 1), dtype=np.float32), small_cfg)


def test_checkpoint_roundtrip(tmp_path, small_cfg):
    imgs = _toy_images(2)
    model, _ = train_backbone(imgs, small_cfg, epochs=1, batch_size=2)
    sched = build_linear_schedule(small_cfg)
    path = tmp_path / "backbone.pt"
    save_backbone(path, model, sched)
    loaded, cfg2, sched2 = load_backbone(path)
    assert cfg2 == small_cfg
    assert module_digest(loaded) == module_digest(model)
    assert np.array_equal(sched2.betas, sched.betas)
    x = torch.randn(1, 16, 16, generator=torch_generator(6))
    assert torch.equal(loaded.predict(x, 9), model.predict(x, 9))


def test_checkpoint_rejects_wrong_file(tmp_path):
    path = tmp_path / "junk.pt"
    torch.save({"magic": "something-else"}, path)
    with pytest.raises(ConfigError):
        load_backbone(path)
