"""Reference-based fusion quality metrics on the 0-255 intensity scale.

MI, SF and AG follow their usual textbook definitions. VIF is the multi-scale
pixel-domain fusion variant: Gaussian-windowed local statistics at four scales
with sensor noise variance 2, the information of both sources pooled per scale
and the scales weighted [1, 0, 0.15, 1] / 2.15 (Han et al., 2013). Qabf is the
Xydeas-Petrovic edge preservation score with its standard sigmoid constants.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
from scipy import ndimage

from contifuse.data import IMAGE_SUFFIXES, read_image, rgb_to_ycbcr

log = logging.getLogger(__name__)

VIF_SCALES = 4
VIF_NOISE_VAR = 2.0
VIF_SCALE_WEIGHTS = np.array([1.0, 0.0, 0.15, 1.0]) / 2.15
VIF_VARIANT = "VIFF pixel-domain, 4 scales, sigma_n^2=2, scale weights [1,0,0.15,1]/2.15"

# Xydeas & Petrovic (2000)
QABF_G = (0.9994, -15.0, 0.5)
QABF_A = (0.9879, -22.0, 0.8)

SCALE_NOTE = "metrics on 0-255 intensities"


def _f64(x) -> np.ndarray:
    return np.asarray(x, dtype=np.float64)


# ---------------------------------------------------------------------------
# MI


def _quantize(x: np.ndarray) -> np.ndarray:
    return np.clip(np.round(_f64(x)), 0, 255).astype(np.int64)


def entropy(x) -> float:
    counts = np.bincount(_quantize(x).ravel(), minlength=256)
    p = counts[counts > 0] / counts.sum()
    return float(-(p * np.log(p)).sum())


def mutual_information(a, b) -> float:
    """MI of two 256-level images from their joint histogram, natural log."""
    qa, qb = _quantize(a).ravel(), _quantize(b).ravel()
    joint = np.bincount(qa * 256 + qb, minlength=256 * 256).reshape(256, 256).astype(np.float64)
    joint /= joint.sum()
    pa, pb = joint.sum(1), joint.sum(0)
    nz = joint > 0
    return float((joint[nz] * np.log(joint[nz] / np.outer(pa, pb)[nz])).sum())


def mi(fused, ir, vis) -> float:
    return mutual_information(fused, ir) + mutual_information(fused, vis)


# ---------------------------------------------------------------------------
# SF / AG


def sf(fused) -> float:
    f = _f64(fused)
    rf = np.sqrt(np.mean(np.diff(f, axis=1) ** 2))
    cf = np.sqrt(np.mean(np.diff(f, axis=0) ** 2))
    return float(np.sqrt(rf**2 + cf**2))


def ag(fused) -> float:
    f = _f64(fused)
    gx = np.diff(f, axis=1)[:-1, :]
    gy = np.diff(f, axis=0)[:, :-1]
    return float(np.mean(np.sqrt((gx**2 + gy**2) / 2.0)))


# ---------------------------------------------------------------------------
# VIF


def _gaussian_window(size: int) -> np.ndarray:
    sigma = size / 5.0
    r = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-(r**2) / (2 * sigma**2))
    w = np.outer(g, g)
    return w / w.sum()


def _filter(x: np.ndarray, w: np.ndarray) -> np.ndarray:
    return ndimage.correlate(x, w, mode="reflect")


def _vif_scale_terms(ref: np.ndarray, dist: np.ndarray, w: np.ndarray) -> tuple[float, float]:
    """(information shared with the distorted image, information in the reference)."""
    eps = 1e-10
    mu1, mu2 = _filter(ref, w), _filter(dist, w)
    s1 = np.maximum(_filter(ref * ref, w) - mu1 * mu1, 0.0)
    s2 = np.maximum(_filter(dist * dist, w) - mu2 * mu2, 0.0)
    s12 = _filter(ref * dist, w) - mu1 * mu2

    g = s12 / (s1 + eps)
    sv = s2 - g * s12
    g = np.where(s1 < eps, 0.0, g)
    sv = np.where(s1 < eps, s2, sv)
    s1 = np.where(s1 < eps, 0.0, s1)
    g = np.where(s2 < eps, 0.0, g)
    sv = np.where(s2 < eps, 0.0, sv)
    sv = np.where(g < 0, s2, sv)
    g = np.maximum(g, 0.0)
    sv = np.maximum(sv, eps)

    num = np.sum(np.log10(1.0 + g * g * s1 / (sv + VIF_NOISE_VAR)))
    den = np.sum(np.log10(1.0 + s1 / VIF_NOISE_VAR))
    return float(num), float(den)


def vif(fused, ir, vis) -> float:
    f, a, b = _f64(fused), _f64(ir), _f64(vis)
    score = 0.0
    for scale in range(1, VIF_SCALES + 1):
        w = _gaussian_window(2 ** (VIF_SCALES - scale + 1) + 1)
        if scale > 1:
            f, a, b = (_filter(x, w)[::2, ::2] for x in (f, a, b))
        num_a, den_a = _vif_scale_terms(a, f, w)
        num_b, den_b = _vif_scale_terms(b, f, w)
        den = den_a + den_b
        ratio = (num_a + num_b) / den if den > 0 else 0.0
        score += VIF_SCALE_WEIGHTS[scale - 1] * ratio
    return float(score)


# ---------------------------------------------------------------------------
# Qabf

_SOBEL_X = np.array([[-1.0, 0.0, 1.0], [-2.0, 0.0, 2.0], [-1.0, 0.0, 1.0]])
_SOBEL_Y = _SOBEL_X.T


def edge_strength_orientation(x) -> tuple[np.ndarray, np.ndarray]:
    x = _f64(x)
    gx = ndimage.correlate(x, _SOBEL_X, mode="nearest")
    gy = ndimage.correlate(x, _SOBEL_Y, mode="nearest")
    g = np.hypot(gx, gy)
    with np.errstate(divide="ignore", invalid="ignore"):
        alpha = np.where(gx == 0, np.pi / 2, np.arctan(gy / np.where(gx == 0, 1.0, gx)))
    return g, alpha


def _sigmoid(x, params):
    gamma, k, sigma = params
    return gamma / (1.0 + np.exp(k * (x - sigma)))


def edge_preservation(g_src, a_src, g_f, a_f) -> np.ndarray:
    """Per-pixel preservation of source edges in the fused image."""
    with np.errstate(divide="ignore", invalid="ignore"):
        rel = np.where(g_src > g_f, g_f / g_src, np.where(g_src < g_f, g_src / g_f, 1.0))
    orient = 1.0 - np.abs(a_src - a_f) / (np.pi / 2)
    q = _sigmoid(rel, QABF_G) * _sigmoid(orient, QABF_A)
    # a source edge with no fused edge at all is not preserved
    return np.where((g_f == 0) & (g_src > 0), 0.0, q)


def self_preservation_bound() -> float:
    return float(_sigmoid(1.0, QABF_G) * _sigmoid(1.0, QABF_A))


def qabf(fused, ir, vis) -> float:
    ga, aa = edge_strength_orientation(ir)
    gb, ab = edge_strength_orientation(vis)
    gf, af = edge_strength_orientation(fused)
    weight = ga.sum() + gb.sum()
    if weight == 0:
        return 0.0
    num = (edge_preservation(ga, aa, gf, af) * ga).sum() + (edge_preservation(gb, ab, gf, af) * gb).sum()
    return float(num / weight)


# ---------------------------------------------------------------------------
# reports

METRICS: dict[str, Callable[..., float]] = {
    "MI": mi,
    "SF": lambda f, i, v: sf(f),
    "AG": lambda f, i, v: ag(f),
    "VIF": vif,
    "Qabf": qabf,
}
RESERVED_COLUMNS = ("LIQE", "TOPIQ")


def compute_metrics(fused, ir, vis, names: Sequence[str] | None = None) -> dict[str, float]:
    names = list(names or METRICS)
    return {n: METRICS[n](fused, ir, vis) for n in names}


@dataclass
class MetricReport:
    metrics: list[str]
    per_image: dict[str, dict[str, float]] = field(default_factory=dict)
    skipped: list[str] = field(default_factory=list)

    @property
    def count(self) -> int:
        return len(self.per_image)

    @property
    def means(self) -> dict[str, float]:
        return {m: float(np.mean([row[m] for row in self.per_image.values()])) for m in self.metrics}

    def header(self) -> str:
        return f"# {SCALE_NOTE}; VIF: {VIF_VARIANT}; LIQE/TOPIQ not computed"

    def write_csv(self, path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        cols = ["image_id", *self.metrics, *RESERVED_COLUMNS]
        with open(path, "w", newline="") as fh:
            fh.write(self.header() + "\n")
            w = csv.writer(fh)
            w.writerow(cols)
            for name, row in self.per_image.items():
                w.writerow([name, *(f"{row[m]:.6f}" for m in self.metrics), "", ""])
            means = self.means
            w.writerow(["mean", *(f"{means[m]:.6f}" for m in self.metrics), "", ""])

    def table(self) -> str:
        cols = ["image_id", *self.metrics]
        rows = [[n, *(f"{r[m]:.4f}" for m in self.metrics)] for n, r in self.per_image.items()]
        means = self.means
        rows.append([f"mean (n={self.count})", *(f"{means[m]:.4f}" for m in self.metrics)])
        widths = [max(len(c), *(len(r[i]) for r in rows)) for i, c in enumerate(cols)]
        fmt = lambda r: "  ".join(v.rjust(w) if i else v.ljust(w) for i, (v, w) in enumerate(zip(r, widths)))
        lines = [self.header(), fmt(cols), "  ".join("-" * w for w in widths)]
        lines += [fmt(r) for r in rows[:-1]]
        lines += ["  ".join("-" * w for w in widths), fmt(rows[-1])]
        return "\n".join(lines)


def _read_gray255(path) -> np.ndarray:
    x = read_image(path)
    if x.ndim == 3:
        x = rgb_to_ycbcr(x)[..., 0]
    return np.round(x * 255.0)


def evaluate_directory(fused_dir, ir_dir, vis_dir, names: Sequence[str] | None = None) -> MetricReport:
    """Score every fused image that has infrared and visible counterparts of the same name."""
    fused_dir, ir_dir, vis_dir = Path(fused_dir), Path(ir_dir), Path(vis_dir)
    names = list(names or METRICS)
    unknown = [n for n in names if n not in METRICS]
    if unknown:
        raise ValueError(f"unknown metrics {unknown}; choose from {list(METRICS)}")
    files = sorted(p for p in fused_dir.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES) if fused_dir.is_dir() else []
    if not files:
        raise FileNotFoundError(f"{fused_dir}: no fused images")
    report = MetricReport(names)
    expected = {p.name for d in (ir_dir, vis_dir) if d.is_dir() for p in d.iterdir()}
    for name in sorted(expected - {p.name for p in files}):
        log.warning("no fused image for %s", name)
        report.skipped.append(name)
    for path in files:
        ir_path, vis_path = ir_dir / path.name, vis_dir / path.name
        if not ir_path.exists() or not vis_path.exists():
            log.warning("skipping %s: missing source image", path.name)
            report.skipped.append(path.name)
            continue
        f, i, v = (_read_gray255(p) for p in (path, ir_path, vis_path))
        if not f.shape == i.shape == v.shape:
            log.warning("skipping %s: size mismatch %s %s %s", path.name, f.shape, i.shape, v.shape)
            report.skipped.append(path.name)
            continue
        values = compute_metrics(f, i, v, names)
        if not all(math.isfinite(x) for x in values.values()):
            log.warning("skipping %s: non-finite metric %s", path.name, values)
            report.skipped.append(path.name)
            continue
        report.per_image[path.stem] = values
    if not report.per_image:
        raise FileNotFoundError(f"{fused_dir}: no image could be evaluated")
    return report
