"""Preprocessing, MVTec-layout loading and the synthetic generator."""
import hashlib
import json

import numpy as np
import pytest
from PIL import Image

from patchsvdd.data import (
    STYLES,
    DatasetError,
    SyntheticConfig,
    generate_synthetic,
    load_dataset,
    preprocess,
    render_defect,
    render_normal,
)


def _digest(root):
    return {str(p.relative_to(root)): hashlib.sha256(p.read_bytes()).hexdigest()
            for p in sorted(root.rglob("*")) if p.is_file()}


# -- preprocess ------------------------------------------------------------------

def test_rgb_256_is_quantization_only():
    raw = np.random.default_rng(0).integers(0, 256, (256, 256, 3), dtype=np.uint8)
    out = preprocess(raw)
    assert out.shape == (256, 256, 3) and out.dtype == np.float32
    assert np.abs(out * 255 - raw).max() < 1e-3


def test_grayscale_replicated():
    out = preprocess(np.full((256, 256), 100, np.uint8))
    assert np.all(out == np.float32(100) / np.float32(255))


def test_512_downsampled_and_range(tmp_path):
    raw = np.random.default_rng(1).integers(0, 256, (512, 512, 3), dtype=np.uint8)
    Image.fromarray(raw).save(tmp_path / "big.png")
    out = preprocess(tmp_path / "big.png")
    assert out.shape == (256, 256, 3)
    assert out.min() >= 0 and out.max() <= 1


def test_non_square_resampled_with_warning(caplog):
    out = preprocess(np.zeros((100, 300, 3), np.uint8))
    assert out.shape == (256, 256, 3)
    assert "non-square" in caplog.text


def test_undecodable_file_names_path(tmp_path):
    bad = tmp_path / "broken.png"
    bad.write_bytes(b"not a png")
    with pytest.raises(DatasetError, match="broken.png"):
        preprocess(bad)


def test_float_array_rejected():
    with pytest.raises(DatasetError):
        preprocess(np.zeros((8, 8, 3), np.float32))


# -- load_dataset ------------------------------------------------------------------

def _write_layout(root):
    base = root / "widget"
    for sub in ("train/good", "test/good", "test/crack", "ground_truth/crack"):
        (base / sub).mkdir(parents=True)
    rng = np.random.default_rng(2)
    for i in range(3):
        Image.fromarray(rng.integers(0, 256, (64, 64, 3), dtype=np.uint8)).save(base / f"train/good/{i:03d}.png")
    Image.fromarray(rng.integers(0, 256, (64, 64), dtype=np.uint8)).save(base / "test/good/000.png")
    Image.fromarray(rng.integers(0, 256, (64, 64, 3), dtype=np.uint8)).save(base / "test/crack/000.png")
    mask = np.zeros((64, 64), np.uint8)
    mask[10:20, 30:40] = 255
    Image.fromarray(mask).save(base / "ground_truth/crack/000_mask.png")
    return base


def test_load_dataset_layout(tmp_path):
    _write_layout(tmp_path)
    train, test = load_dataset(tmp_path, "widget")
    assert len(train) == 3
    assert all(r.label == "normal" and r.mask is None and r.split == "train" for r in train)
    assert [r.id for r in train] == ["train/good/000", "train/good/001", "train/good/002"]
    by_id = {r.id: r for r in test}
    good, crack = by_id["test/good/000"], by_id["test/crack/000"]
    assert good.label == "normal" and good.mask is None
    assert crack.is_abnormal and crack.mask.shape == crack.pixels.shape[:2] == (256, 256)
    assert crack.mask.sum() == 40 * 40  # 10x10 block upsampled 4x with nearest


def test_missing_components_are_named(tmp_path):
    with pytest.raises(DatasetError, match="widget"):
        load_dataset(tmp_path, "widget")
    base = _write_layout(tmp_path)
    (base / "ground_truth/crack/000_mask.png").unlink()
    with pytest.raises(DatasetError, match="000_mask.png"):
        load_dataset(tmp_path, "widget")


# -- synthetic generator -------------------------------------------------------------

def test_config_validation():
    with pytest.raises(ValueError):
        SyntheticConfig(style="marble")
    with pytest.raises(ValueError):
        SyntheticConfig(defect_types=("dent",))
    with pytest.raises(ValueError):
        SyntheticConfig(n_train=0)
    with pytest.raises(ValueError):
        SyntheticConfig(defect_size=(10, 500))


def test_generation_byte_identical(tmp_path):
    cfg = SyntheticConfig(n_train=2, n_test_good=1, n_test_defect=3)
    generate_synthetic(cfg, tmp_path / "a")
    generate_synthetic(cfg, tmp_path / "b")
    da, db = _digest(tmp_path / "a"), _digest(tmp_path / "b")
    assert da == db and len(da) == 2 + 1 + 3 + 3 + 1
    gen = json.loads((tmp_path / "a" / cfg.category / "generation.json").read_text())
    assert gen["seed"] == 0 and gen["generator_version"]


def test_different_seed_differs():
    a = render_normal(SyntheticConfig(seed=0, style="stripes"), "train", 0)
    b = render_normal(SyntheticConfig(seed=1, style="stripes"), "train", 0)
    assert not np.array_equal(a, b)


@pytest.mark.parametrize("style", STYLES)
def test_defect_differs_exactly_on_mask(style):
    cfg = SyntheticConfig(style=style, n_test_defect=6)
    for k in range(6):
        img, mask, kind, clean = render_defect(cfg, k)
        assert mask.any()
        assert kind == cfg.defect_types[k % 3]
        changed = (img != clean).any(axis=-1)
        assert np.array_equal(changed, mask)


def test_round_trip_counts_labels_masks(tmp_path):
    cfg = SyntheticConfig(category="obj", n_train=3, n_test_good=2, n_test_defect=4)
    generate_synthetic(cfg, tmp_path)
    train, test = load_dataset(tmp_path, "obj")
    assert len(train) == 3
    good = [r for r in test if not r.is_abnormal]
    bad = [r for r in test if r.is_abnormal]
    assert len(good) == 2 and len(bad) == 4
    assert all(r.mask is None for r in good)
    for r in bad:
        assert r.mask.shape == (256, 256) and r.mask.any()
        k = int(r.id.rsplit("/", 1)[1])
        _, mask, kind, _ = render_defect(cfg, k)
        assert r.id.split("/")[1] == kind
        assert np.array_equal(r.mask, mask)
    for i, r in enumerate(train):
        assert np.array_equal(r.pixels, preprocess(render_normal(cfg, "train", i)))


def test_unwritable_root(tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    with pytest.raises(OSError):
        generate_synthetic(SyntheticConfig(n_train=1, n_test_good=1, n_test_defect=1), blocker / "sub")
