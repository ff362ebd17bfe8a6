import numpy as np
import pytest
import torch
from PIL import Image
from scipy.ndimage import gaussian_filter

from contifuse.data import ImagePair
from contifuse.model import ContiFuse, ModelConfig

torch.set_num_threads(1)

ACCEPTANCE_RESULTS = []


def synthetic_pair(size: int, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Registered toy pair: textured visible scene, infrared with hot blobs."""
    rng = np.random.default_rng(seed)
    h, w = (size, size) if np.isscalar(size) else size
    vis = gaussian_filter(rng.random((h, w)), 3)
    vis = 0.2 + 0.6 * (vis - vis.min()) / (vis.max() - vis.min())
    ir = 0.15 + 0.05 * gaussian_filter(rng.random((h, w)), 2)
    yy, xx = np.mgrid[:h, :w]
    for _ in range(3):
        cy, cx = rng.integers(h // 8, h - h // 8), rng.integers(w // 8, w - w // 8)
        r = rng.integers(max(2, h // 24), max(3, h // 10))
        ir[(yy - cy) ** 2 + (xx - cx) ** 2 < r * r] = 0.9
    return ir, vis


def synthetic_pairs(n: int, size, seed: int = 0) -> list[ImagePair]:
    out = []
    for i in range(n):
        ir, vis = synthetic_pair(size, seed * 1000 + i)
        out.append(ImagePair(f"p{i:03d}", ir, vis, np.full_like(vis, 0.5), np.full_like(vis, 0.5)))
    return out


def write_dataset(root, pairs, color: bool = False):
    (root / "ir").mkdir(parents=True, exist_ok=True)
    (root / "vi").mkdir(parents=True, exist_ok=True)
    for p in pairs:
        Image.fromarray(np.round(p.ir * 255).astype(np.uint8)).save(root / "ir" / f"{p.id}.png")
        vis = np.round(p.vis * 255).astype(np.uint8)
        if color:
            vis = np.stack([vis, np.roll(vis, 3, axis=1), vis[::-1]], axis=-1)
        Image.fromarray(vis).save(root / "vi" / f"{p.id}.png")
    return root


@pytest.fixture
def tiny_config():
    return ModelConfig(num_layers=1, num_states=3, base_width=4, heads=4)


@pytest.fixture
def tiny_model(tiny_config):
    return ContiFuse(tiny_config, seed=0).double()


@pytest.fixture
def toy_dataset(tmp_path):
    return write_dataset(tmp_path / "data", synthetic_pairs(3, 24))


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_RESULTS:
            terminalreporter.write_line(line)
