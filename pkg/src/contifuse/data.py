"""Paired infrared/visible dataset discovery, loading and augmentation."""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
from PIL import Image

from contifuse.model import reflect_indices

log = logging.getLogger(__name__)

IMAGE_SUFFIXES = {".png", ".jpg", ".jpeg", ".bmp", ".tif", ".tiff"}

# ITU-R BT.601 full-range RGB -> YCbCr (chroma offset 0.5 on the [0,1] scale)
RGB_TO_YCBCR = np.array(
    [
        [0.299, 0.587, 0.114],
        [-0.168736, -0.331264, 0.5],
        [0.5, -0.418688, -0.081312],
    ]
)
YCBCR_TO_RGB = np.linalg.inv(RGB_TO_YCBCR)


class DatasetError(RuntimeError):
    pass


@dataclass(frozen=True)
class PairRecord:
    id: str
    ir_path: Path
    vis_path: Path


@dataclass
class ImagePair:
    """Registered pair on the [0,1] scale; ``vis`` is the visible luma."""

    id: str
    ir: np.ndarray
    vis: np.ndarray
    cb: np.ndarray | None = None
    cr: np.ndarray | None = None

    @property
    def size(self) -> tuple[int, int]:
        return self.ir.shape


@dataclass(frozen=True)
class AugmentationPolicy:
    crop_size: int = 192
    hflip_prob: float = 0.5
    vflip_prob: float = 0.0

    def __post_init__(self):
        if self.crop_size < 1:
            raise ValueError("crop_size must be positive")
        for name in ("hflip_prob", "vflip_prob"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1]")


def _images(directory: Path) -> dict[str, Path]:
    return {
        p.name: p
        for p in sorted(directory.iterdir())
        if p.is_file() and p.suffix.lower() in IMAGE_SUFFIXES
    }


def discover_dataset(root) -> list[PairRecord]:
    """Pair ``root/ir/*`` with ``root/vi/*`` by file name (or read ``root`` as a manifest CSV)."""
    root = Path(root)
    if root.is_file():
        return read_manifest(root)
    ir_dir, vi_dir = root / "ir", root / "vi"
    if not ir_dir.is_dir() or not vi_dir.is_dir():
        raise DatasetError(f"{root}: expected 'ir/' and 'vi/' subdirectories")
    ir, vi = _images(ir_dir), _images(vi_dir)
    for name in sorted(ir.keys() - vi.keys()):
        log.warning("skipping %s: no visible counterpart", ir[name])
    for name in sorted(vi.keys() - ir.keys()):
        log.warning("skipping %s: no infrared counterpart", vi[name])
    common = sorted(ir.keys() & vi.keys())
    if not common:
        raise DatasetError(
            f"{root}: no paired images (ir/ has {sorted(ir)[:5]}..., vi/ has {sorted(vi)[:5]}...)"
            if ir or vi
            else f"{root}: ir/ and vi/ are empty"
        )
    return [PairRecord(Path(n).stem, ir[n], vi[n]) for n in common]


def read_manifest(path) -> list[PairRecord]:
    """Rows of ``id,ir_path,vis_path``; relative paths resolve against the manifest."""
    path = Path(path)
    records = []
    with open(path, newline="") as fh:
        for row in csv.reader(fh):
            if not row or row[0].startswith("#") or row[0] == "id":
                continue
            if len(row) != 3:
                raise DatasetError(f"{path}: malformed row {row}")
            id_, ir, vi = (c.strip() for c in row)
            records.append(PairRecord(id_, path.parent / ir, path.parent / vi))
    if not records:
        raise DatasetError(f"{path}: manifest lists no pairs")
    return records


def rgb_to_ycbcr(rgb: np.ndarray) -> np.ndarray:
    return rgb @ RGB_TO_YCBCR.T + np.array([0.0, 0.5, 0.5])


def ycbcr_to_rgb(ycc: np.ndarray) -> np.ndarray:
    return (ycc - np.array([0.0, 0.5, 0.5])) @ YCBCR_TO_RGB.T


def read_image(path) -> np.ndarray:
    """Decode to float64 in [0,1], H x W (gray) or H x W x 3 (RGB)."""
    try:
        with Image.open(path) as im:
            if im.mode in ("L", "I;16", "I", "F", "1", "P", "LA"):
                arr = np.asarray(im.convert("L"), dtype=np.float64)
            else:
                arr = np.asarray(im.convert("RGB"), dtype=np.float64)
    except (OSError, ValueError) as exc:
        raise DatasetError(f"cannot decode {path}: {exc}") from exc
    return arr / 255.0


def _is_gray_rgb(arr: np.ndarray) -> bool:
    return arr.ndim == 3 and np.array_equal(arr[..., 0], arr[..., 1]) and np.array_equal(arr[..., 1], arr[..., 2])


def load_pair(record: PairRecord) -> ImagePair:
    ir = read_image(record.ir_path)
    if ir.ndim == 3:
        ir = rgb_to_ycbcr(ir)[..., 0]
    vis = read_image(record.vis_path)
    if vis.ndim == 3 and not _is_gray_rgb(vis):
        ycc = rgb_to_ycbcr(vis)
        y, cb, cr = ycc[..., 0], ycc[..., 1], ycc[..., 2]
    else:
        y = vis if vis.ndim == 2 else vis[..., 0]
        cb = cr = np.full_like(y, 0.5)
    if ir.shape != y.shape:
        raise DatasetError(f"{record.id}: infrared {ir.shape} and visible {y.shape} sizes differ")
    return ImagePair(record.id, np.clip(ir, 0, 1), np.clip(y, 0, 1), cb, cr)


def recompose_color(fused_y: np.ndarray, cb: np.ndarray, cr: np.ndarray) -> np.ndarray:
    return np.clip(ycbcr_to_rgb(np.stack([fused_y, cb, cr], axis=-1)), 0.0, 1.0)


def to_uint8(image: np.ndarray) -> np.ndarray:
    return np.round(np.clip(image, 0.0, 1.0) * 255.0).astype(np.uint8)


def save_image(path, image: np.ndarray) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(to_uint8(image)).save(path)


def _reflect_pad(a: np.ndarray, h: int, w: int) -> np.ndarray:
    rows = reflect_indices(a.shape[0], max(h, a.shape[0]))
    cols = reflect_indices(a.shape[1], max(w, a.shape[1]))
    return a[np.ix_(rows, cols)]


def augment(pair: ImagePair, policy: AugmentationPolicy, rng: np.random.Generator) -> ImagePair:
    """Random crop and flips applied identically to every plane of the pair."""
    planes = [pair.ir, pair.vis, pair.cb, pair.cr]
    size = policy.crop_size
    h, w = pair.size
    if h < size or w < size:
        planes = [None if p is None else _reflect_pad(p, size, size) for p in planes]
        h, w = planes[0].shape
    top = int(rng.integers(0, h - size + 1))
    left = int(rng.integers(0, w - size + 1))
    hflip = rng.random() < policy.hflip_prob
    vflip = rng.random() < policy.vflip_prob

    def apply(p):
        if p is None:
            return None
        p = p[top : top + size, left : left + size]
        if hflip:
            p = p[:, ::-1]
        if vflip:
            p = p[::-1, :]
        return np.ascontiguousarray(p)

    return ImagePair(pair.id, *(apply(p) for p in planes))


def collate(pairs: Sequence[ImagePair], dtype=np.float32) -> tuple[np.ndarray, np.ndarray]:
    """Stack pairs into ``B x 1 x H x W`` infrared and visible arrays."""
    ir = np.stack([p.ir for p in pairs])[:, None].astype(dtype)
    vis = np.stack([p.vis for p in pairs])[:, None].astype(dtype)
    return ir, vis
