"""PSNR, MS-SSIM, bpp aggregation and rate-distortion curve assembly."""
from __future__ import annotations

import csv
import io
from collections import defaultdict
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ConfigError, DataError, ShapeError

PSNR_CAP = 100.0
MS_SSIM_WEIGHTS = (0.0448, 0.2856, 0.3001, 0.2363, 0.1333)
WINDOW = 11
SIGMA = 1.5
CSV_HEADER = ("quality", "bpp", "psnr_db", "ms_ssim", "n_images")


def _pair(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeError(f"shape mismatch {a.shape} vs {b.shape}")
    if a.ndim == 2:
        a, b = a[:, :, None], b[:, :, None]
    return a, b


def psnr(a, b, peak: float = 1.0, cap: float = PSNR_CAP) -> float:
    """``10 log10(peak^2 / MSE)`` in dB, capped at ``cap`` (identical images give the cap)."""
    if peak <= 0:
        raise ConfigError("peak must be positive")
    a, b = _pair(a, b)
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return float(cap)
    return float(min(cap, 10.0 * np.log10(peak * peak / mse)))


def _gaussian_window(size=WINDOW, sigma=SIGMA):
    x = np.arange(size) - (size - 1) / 2
    g = np.exp(-(x ** 2) / (2 * sigma ** 2))
    return g / g.sum()


def _filter_valid(x, g):
    """Separable 'valid' Gaussian filtering over the two spatial axes of (H, W, C)."""
    x = sliding_window_view(x, len(g), axis=0) @ g
    return sliding_window_view(x, len(g), axis=1) @ g


def _ssim_terms(a, b, peak):
    g = _gaussian_window()
    c1, c2 = (0.01 * peak) ** 2, (0.03 * peak) ** 2
    mu_a, mu_b = _filter_valid(a, g), _filter_valid(b, g)
    s_aa = _filter_valid(a * a, g) - mu_a * mu_a
    s_bb = _filter_valid(b * b, g) - mu_b * mu_b
    s_ab = _filter_valid(a * b, g) - mu_a * mu_b
    cs = (2 * s_ab + c2) / (s_aa + s_bb + c2)
    lum = (2 * mu_a * mu_b + c1) / (mu_a * mu_a + mu_b * mu_b + c1)
    return float(np.mean(lum * cs)), float(np.mean(cs))


def ms_ssim_scales(height: int, width: int, max_scales: int = 5) -> int:
    """Largest scale count whose coarsest level still fits one 11x11 window."""
    m = min(height, width)
    n = 0
    while n < max_scales and m >= WINDOW * 2 ** n:
        n += 1
    return n


def ms_ssim(a, b, peak: float = 1.0, max_scales: int = 5) -> float:
    """Multi-scale SSIM (11-tap Gaussian, sigma 1.5, standard five-scale weights).

    Images smaller than 176 pixels on a side use fewer scales, with the
    leading weights renormalised to sum to one. Negative per-scale terms are
    clipped to zero so the result lies in [0, 1]. Colour images are scored
    per channel and averaged inside each scale.
    """
    a, b = _pair(a, b)
    n = ms_ssim_scales(a.shape[0], a.shape[1], max_scales)
    if n == 0:
        raise DataError(f"image {a.shape[:2]} too small for MS-SSIM (needs >= {WINDOW} px)")
    w = np.asarray(MS_SSIM_WEIGHTS[:n])
    w = w / w.sum()
    value = 1.0
    for j in range(n):
        ssim_j, cs_j = _ssim_terms(a, b, peak)
        term = ssim_j if j == n - 1 else cs_j
        value *= max(term, 0.0) ** w[j]
        if j < n - 1:
            h2, w2 = a.shape[0] // 2 * 2, a.shape[1] // 2 * 2
            a = a[:h2, :w2].reshape(h2 // 2, 2, w2 // 2, 2, -1).mean(axis=(1, 3))
            b = b[:h2, :w2].reshape(h2 // 2, 2, w2 // 2, 2, -1).mean(axis=(1, 3))
    return float(min(max(value, 0.0), 1.0))


_REGISTRY: dict[str, Callable] = {"psnr": psnr, "ms_ssim": ms_ssim}


def register_metric(name: str, fn: Callable) -> None:
    """Add a full-reference metric ``fn(a, b) -> float`` (e.g. a perceptual one)."""
    _REGISTRY[name] = fn


def get_metric(name: str) -> Callable:
    try:
        return _REGISTRY[name]
    except KeyError:
        raise ConfigError(f"unknown metric {name!r}") from None


def aggregate_bpp(bpps, pixels=None, mode: str = "mean") -> float:
    """Per-image mean (default) or pooled ``sum(bits) / sum(pixels)``."""
    bpps = np.asarray(bpps, dtype=np.float64)
    if bpps.size == 0:
        raise DataError("no bpp values")
    if mode == "mean":
        return float(bpps.mean())
    if mode == "pooled":
        if pixels is None:
            raise ConfigError("pooled bpp needs pixel counts")
        pixels = np.asarray(pixels, dtype=np.float64)
        return float((bpps * pixels).sum() / pixels.sum())
    raise ConfigError(f"unknown bpp aggregation {mode!r}")


@dataclass
class RDPoint:
    quality: float
    bpp: float
    psnr_db: float
    ms_ssim: float
    n_images: int
    curve: str = ""


def rd_curve(results, grouping: str = "quality") -> list[RDPoint]:
    """Average per-image records into one point per group, sorted by bpp.

    ``results`` holds mappings with keys ``quality``, ``bpp``, ``psnr``,
    ``ms_ssim`` and optionally ``curve``. Groups are keyed by
    ``(curve, quality)`` for ``grouping="quality"``.
    """
    results = list(results)
    if not results:
        raise DataError("no results to aggregate")
    if grouping != "quality":
        raise ConfigError(f"unsupported grouping {grouping!r}")
    groups = defaultdict(list)
    for r in results:
        groups[(r.get("curve", ""), float(r["quality"]))].append(r)
    points = []
    for (curve, q), rs in groups.items():
        points.append(RDPoint(
            quality=q,
            bpp=aggregate_bpp([r["bpp"] for r in rs]),
            psnr_db=float(np.mean([r["psnr"] for r in rs])),
            ms_ssim=float(np.mean([r["ms_ssim"] for r in rs])),
            n_images=len(rs),
            curve=curve,
        ))
    points.sort(key=lambda p: (p.curve, p.bpp, p.quality))
    return points


def rd_csv(points) -> str:
    """CSV text; a leading ``curve`` column is added when any point is tagged."""
    tagged = any(p.curve for p in points)
    buf = io.StringIO()
    wr = csv.writer(buf, lineterminator="\n")
    wr.writerow((("curve",) if tagged else ()) + CSV_HEADER)
    for p in points:
        row = [repr(float(p.quality)), f"{p.bpp:.6f}", f"{p.psnr_db:.4f}", f"{p.ms_ssim:.6f}", p.n_images]
        wr.writerow(([p.curve] if tagged else []) + row)
    return buf.getvalue()


def write_rd_csv(points, path) -> None:
    Path(path).write_text(rd_csv(points), encoding="utf-8")


def rd_svg(points, width: int = 480, height: int = 320) -> str:
    """Minimal SVG line plot of PSNR against bpp, one polyline per curve."""
    if not points:
        raise DataError("no points to plot")
    xs = [p.bpp for p in points]
    ys = [p.psnr_db for p in points]
    x0, x1 = min(xs), max(xs) if max(xs) > min(xs) else min(xs) + 1
    y0, y1 = min(ys), max(ys) if max(ys) > min(ys) else min(ys) + 1
    pad = 40

    def sx(v):
        return pad + (v - x0) / (x1 - x0) * (width - 2 * pad)

    def sy(v):
        return height - pad - (v - y0) / (y1 - y0) * (height - 2 * pad)

    colors = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd"]
    curves = sorted({p.curve for p in points})
    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}">',
             f'<rect width="{width}" height="{height}" fill="white"/>',
             f'<text x="{width / 2:.0f}" y="{height - 8}" text-anchor="middle" font-size="12">bpp</text>',
             f'<text x="12" y="{height / 2:.0f}" font-size="12" transform="rotate(-90 12 {height / 2:.0f})">PSNR (dB)</text>']
    for i, c in enumerate(curves):
        pts = sorted((p for p in points if p.curve == c), key=lambda p: p.bpp)
        coords = " ".join(f"{sx(p.bpp):.2f},{sy(p.psnr_db):.2f}" for p in pts)
        color = colors[i % len(colors)]
        parts.append(f'<polyline fill="none" stroke="{color}" stroke-width="2" points="{coords}"/>')
        parts.append(f'<text x="{pad + 5}" y="{pad + 14 * (i + 1)}" fill="{color}" font-size="12">{c or "rd"}</text>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"
