import logging

import numpy as np
import pytest
from PIL import Image

from contifuse.data import (
    AugmentationPolicy,
    DatasetError,
    ImagePair,
    PairRecord,
    augment,
    collate,
    discover_dataset,
    load_pair,
    read_image,
    read_manifest,
    recompose_color,
    rgb_to_ycbcr,
    save_image,
    ycbcr_to_rgb,
)

from conftest import synthetic_pairs, write_dataset


def _touch_png(path, value=0):
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(np.full((4, 4), value, np.uint8)).save(path)


def test_discovery_pairs_by_name(toy_dataset):
    records = discover_dataset(toy_dataset)
    assert [r.id for r in records] == ["p000", "p001", "p002"]
    assert all(r.ir_path.parent.name == "ir" and r.vis_path.parent.name == "vi" for r in records)


def test_orphans_are_skipped_with_warnings(tmp_path, caplog):
    for i in range(100):
        _touch_png(tmp_path / "ir" / f"{i:03d}.png")
        _touch_png(tmp_path / "vi" / f"{i:03d}.png")
    for name in ("x1.png", "x2.png"):
        _touch_png(tmp_path / "ir" / name)
    _touch_png(tmp_path / "vi" / "y1.png")
    with caplog.at_level(logging.WARNING):
        records = discover_dataset(tmp_path)
    assert len(records) == 100
    warned = [r for r in caplog.records if r.levelno == logging.WARNING]
    assert len(warned) == 3


def test_discovery_errors(tmp_path):
    with pytest.raises(DatasetError):
        discover_dataset(tmp_path)
    _touch_png(tmp_path / "ir" / "a.png")
    _touch_png(tmp_path / "vi" / "b.png")
    with pytest.raises(DatasetError, match="no paired"):
        discover_dataset(tmp_path)


def test_manifest(tmp_path, toy_dataset):
    manifest = toy_dataset / "pairs.csv"
    manifest.write_text("id,ir_path,vis_path\nfirst,ir/p000.png,vi/p000.png\n")
    records = discover_dataset(manifest)
    assert records == [PairRecord("first", toy_dataset / "ir/p000.png", toy_dataset / "vi/p000.png")]
    bad = tmp_path / "bad.csv"
    bad.write_text("a,b\n")
    with pytest.raises(DatasetError):
        read_manifest(bad)


def test_read_image_scale(tmp_path):
    _touch_png(tmp_path / "white.png", 255)
    assert np.all(read_image(tmp_path / "white.png") == 1.0)
    (tmp_path / "junk.png").write_bytes(b"not an image")
    with pytest.raises(DatasetError):
        read_image(tmp_path / "junk.png")


def test_gray_visible_gets_neutral_chroma(toy_dataset):
    pair = load_pair(discover_dataset(toy_dataset)[0])
    assert np.all(pair.cb == 0.5) and np.all(pair.cr == 0.5)
    assert pair.vis.shape == pair.ir.shape == (24, 24)


def test_color_visible_is_split(tmp_path):
    root = write_dataset(tmp_path, synthetic_pairs(1, 16), color=True)
    pair = load_pair(discover_dataset(root)[0])
    rgb = read_image(root / "vi" / "p000.png")
    assert np.allclose(pair.vis, rgb_to_ycbcr(rgb)[..., 0].clip(0, 1))
    assert not np.allclose(pair.cb, 0.5)


def test_size_mismatch(tmp_path):
    _touch_png(tmp_path / "ir" / "a.png")
    (tmp_path / "vi").mkdir()
    Image.fromarray(np.zeros((5, 4), np.uint8)).save(tmp_path / "vi" / "a.png")
    with pytest.raises(DatasetError, match="sizes differ"):
        load_pair(discover_dataset(tmp_path)[0])


def test_ycbcr_round_trip():
    rgb = np.random.default_rng(0).random((5, 7, 3))
    assert np.allclose(ycbcr_to_rgb(rgb_to_ycbcr(rgb)), rgb, atol=1e-12)
    gray = np.full((2, 2, 3), 0.4)
    assert np.allclose(rgb_to_ycbcr(gray), [0.4, 0.5, 0.5])


def test_recompose_color_of_gray_is_gray():
    y = np.linspace(0, 1, 12).reshape(3, 4)
    rgb = recompose_color(y, np.full_like(y, 0.5), np.full_like(y, 0.5))
    assert np.allclose(rgb, y[..., None])


def test_save_image_round_trip(tmp_path):
    img = np.random.default_rng(1).random((6, 5))
    save_image(tmp_path / "sub" / "x.png", img)
    back = read_image(tmp_path / "sub" / "x.png")
    assert np.abs(back - img).max() <= 0.5 / 255 + 1e-12


def _pair(h, w, seed=0):
    rng = np.random.default_rng(seed)
    return ImagePair("x", *(rng.random((h, w)) for _ in range(4)))


def test_augment_keeps_planes_aligned():
    base = np.arange(30 * 40, dtype=float).reshape(30, 40)
    pair = ImagePair("x", base, base + 1, base + 2, base + 3)
    policy = AugmentationPolicy(crop_size=16, hflip_prob=0.5, vflip_prob=0.5)
    for seed in range(20):
        out = augment(pair, policy, np.random.default_rng(seed))
        assert out.ir.shape == (16, 16)
        assert np.array_equal(out.vis, out.ir + 1)
        assert np.array_equal(out.cr, out.ir + 3)


def test_augment_reproducible():
    pair = _pair(40, 40)
    policy = AugmentationPolicy(crop_size=16)
    a = augment(pair, policy, np.random.default_rng(7))
    b = augment(pair, policy, np.random.default_rng(7))
    assert np.array_equal(a.ir, b.ir) and np.array_equal(a.vis, b.vis)


def test_flip_applied_twice_restores():
    pair = _pair(16, 16)
    policy = AugmentationPolicy(crop_size=16, hflip_prob=1.0, vflip_prob=1.0)
    once = augment(pair, policy, np.random.default_rng(0))
    assert np.array_equal(once.ir, pair.ir[::-1, ::-1])
    twice = augment(once, policy, np.random.default_rng(0))
    assert np.array_equal(twice.ir, pair.ir)


def test_undersized_images_are_reflect_padded():
    pair = _pair(10, 12)
    out = augment(pair, AugmentationPolicy(crop_size=16, hflip_prob=0), np.random.default_rng(0))
    assert out.ir.shape == (16, 16)
    assert np.array_equal(out.ir[:10, :12], pair.ir)
    assert np.array_equal(out.ir[10], pair.ir[8, :12].tolist() + out.ir[10, 12:].tolist())


def test_policy_validation():
    with pytest.raises(ValueError):
        AugmentationPolicy(crop_size=0)
    with pytest.raises(ValueError):
        AugmentationPolicy(hflip_prob=1.5)


def test_collate_shapes():
    pairs = [_pair(8, 8, s) for s in range(3)]
    ir, vis = collate(pairs)
    assert ir.shape == vis.shape == (3, 1, 8, 8)
    assert ir.dtype == np.float32
    assert collate(pairs, np.float64)[0].dtype == np.float64
