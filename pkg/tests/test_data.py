import csv

import numpy as np
import pytest
from PIL import Image

from textdiff.data import (
    CLASS_PHRASES,
    DISK,
    SQUARE,
    DatasetManifest,
    generate_synthetic,
    load_folder,
    split,
    write_dataset,
)
from textdiff.errors import (
    ConfigError,
    MissingMaskError,
    MissingTextError,
    PlacementError,
    SplitSizeError,
    UnreadableFileError,
)


def test_generation_deterministic(tmp_path):
    m1, s1 = generate_synthetic(10, resolution=32, seed=7)
    m2, s2 = generate_synthetic(10, resolution=32, seed=7)
    assert m1.train_ids == m2.train_ids and m1.test_ids == m2.test_ids
    for k in s1:
        assert np.array_equal(s1[k].image, s2[k].image)
        assert np.array_equal(s1[k].mask, s2[k].mask)
        assert s1[k].text == s2[k].text
    d1 = write_dataset(tmp_path / "a", m1, s1)
    d2 = write_dataset(tmp_path / "b", m2, s2)
    for sub in ("images", "masks"):
        for f1 in sorted((d1 / sub).iterdir()):
            f2 = d2 / sub / f1.name
            assert f1.read_bytes() == f2.read_bytes()
    assert (d1 / "texts.csv").read_bytes() == (d2 / "texts.csv").read_bytes()


def test_generation_seed_changes_content():
    _, s1 = generate_synthetic(4, resolution=32, seed=0)
    _, s2 = generate_synthetic(4, resolution=32, seed=1)
    assert any(not np.array_equal(s1[k].image, s2[k].image) for k in s1)


def test_masks_nonempty_and_match_named_shape():
    _, samples = generate_synthetic(30, resolution=64, seed=3)
    for s in samples.values():
        assert s.mask.sum() > 0
        assert set(np.unique(s.mask)) <= {0, 1}
        named_disk = CLASS_PHRASES[DISK] in s.text
        named_square = CLASS_PHRASES[SQUARE] in s.text
        assert named_disk != named_square  # exactly one class named


def test_target_class_marginal_balanced():
    _, samples = generate_synthetic(1000, resolution=32, seed=5)
    frac_disk = np.mean([CLASS_PHRASES[DISK] in s.text for s in samples.values()])
    assert 0.45 <= frac_disk <= 0.55


def test_image_range_and_shape():
    _, samples = generate_synthetic(5, resolution=32, seed=2)
    for s in samples.values():
        assert s.image.shape == (32, 32, 1)
        assert s.image.dtype == np.float32
        assert s.image.min() >= -1.0 and s.image.max() <= 1.0


def test_too_small_resolution_unplaceable():
    with pytest.raises(PlacementError):
        generate_synthetic(2, resolution=8, seed=0)


def test_n_too_small_rejected():
    with pytest.raises(ConfigError):
        generate_synthetic(1, resolution=32, seed=0)


def test_roundtrip_identical_tensors(tmp_path):
    manifest, samples = generate_synthetic(6, resolution=32, seed=9)
    root = write_dataset(tmp_path / "ds", manifest, samples)
    loaded_m, loaded = load_folder(root, resolution=32)
    assert loaded_m.train_ids == manifest.train_ids
    assert loaded_m.test_ids == manifest.test_ids
    for k, s in samples.items():
        assert np.array_equal(loaded[k].image, s.image)
        assert np.array_equal(loaded[k].mask, s.mask)
        assert loaded[k].text == s.text


def test_load_folder_resizes_and_binarizes(tmp_path):
    root = tmp_path / "ds"
    (root / "images").mkdir(parents=True)
    (root / "masks").mkdir()
    img = np.linspace(0, 255, 64 * 64, dtype=np.uint8).reshape(64, 64)
    Image.fromarray(img).save(root / "images" / "img_000.png")
    mask = np.zeros((64, 64), dtype=np.uint8)
    mask[10:30, 10:30] = 255
    Image.fromarray(mask).save(root / "masks" / "img_000.png")
    with open(root / "texts.csv", "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["image_id", "text"])
        w.writerow(["img_000", "round opacity in the upper left"])

    manifest, samples = load_folder(root, resolution=32)
    s = samples["img_000"]
    assert s.image.shape == (32, 32, 1)
    assert s.mask.shape == (32, 32)
    assert set(np.unique(s.mask)) <= {0, 1}
    assert s.mask.sum() > 0
    assert manifest.train_ids == ["img_000"]


def test_load_folder_missing_mask(tmp_path):
    root = tmp_path / "ds"
    (root / "images").mkdir(parents=True)
    (root / "masks").mkdir()
    Image.fromarray(np.zeros((16, 16), dtype=np.uint8)).save(root / "images" / "img_013.png")
    (root / "texts.csv").write_text("image_id,text\nimg_013,something\n")
    with pytest.raises(MissingMaskError, match="img_013"):
        load_folder(root, resolution=16)


def test_load_folder_missing_text_row(tmp_path):
    root = tmp_path / "ds"
    (root / "images").mkdir(parents=True)
    (root / "masks").mkdir()
    Image.fromarray(np.zeros((16, 16), dtype=np.uint8)).save(root / "images" / "img_013.png")
    Image.fromarray(np.zeros((16, 16), dtype=np.uint8)).save(root / "masks" / "img_013.png")
    (root / "texts.csv").write_text("image_id,text\nother,something\n")
    with pytest.raises(MissingTextError, match="img_013"):
        load_folder(root, resolution=16)


def test_load_folder_unreadable_file(tmp_path):
    root = tmp_path / "ds"
    (root / "images").mkdir(parents=True)
    (root / "masks").mkdir()
    (root / "images" / "img_007.png").write_bytes(b"not a png at all")
    Image.fromarray(np.zeros((16, 16), dtype=np.uint8)).save(root / "masks" / "img_007.png")
    (root / "texts.csv").write_text("image_id,text\nimg_007,something\n")
    with pytest.raises(UnreadableFileError, match="img_007"):
        load_folder(root, resolution=16)


def test_split_deterministic_disjoint():
    manifest = DatasetManifest(root=None, train_ids=[f"id{i}" for i in range(50)], test_ids=[])
    tr1, te1 = split(manifest, 30, seed=4)
    tr2, te2 = split(manifest, 30, seed=4)
    assert tr1.train_ids == tr2.train_ids
    assert te1.test_ids == te2.test_ids
    assert len(tr1.train_ids) == 30 and len(te1.test_ids) == 20
    assert set(tr1.train_ids).isdisjoint(te1.test_ids)
    tr3, _ = split(manifest, 30, seed=5)
    assert tr3.train_ids != tr1.train_ids


def test_split_leaves_one():
    manifest = DatasetManifest(root=None, train_ids=[f"id{i}" for i in range(10)], test_ids=[])
    tr, te = split(manifest, 9, seed=0)
    assert len(te.test_ids) == 1


def test_split_train_n_too_large():
    manifest = DatasetManifest(root=None, train_ids=["a", "b"], test_ids=[])
    with pytest.raises(SplitSizeError):
        split(manifest, 2, seed=0)


def test_manifest_rejects_overlap():
    with pytest.raises(ConfigError):
        DatasetManifest(root=None, train_ids=["a"], test_ids=["a"])
