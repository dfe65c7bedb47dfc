"""Paired (original, decoded) datasets, paired augmentation and batching."""
from __future__ import annotations

import hashlib
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np
import torch
from scipy.ndimage import gaussian_filter

from .codec import compress_roundtrip, read_bpp
from .errors import ConfigError, DataError
from .images import as_image, quantize8, read_png, to_batch, write_png


@dataclass
class PairedSample:
    original: np.ndarray
    decoded: np.ndarray
    bpp: float
    name: str = ""

    def __post_init__(self):
        if self.original.shape != self.decoded.shape:
            raise DataError(f"{self.name}: original {self.original.shape} != decoded {self.decoded.shape}")


@dataclass
class AugmentConfig:
    crop_size: int = 64
    hflip_prob: float = 0.5
    vflip_prob: float = 0.5
    seed: int = 0

    def __post_init__(self):
        if self.crop_size < 1:
            raise ConfigError("crop_size must be positive")
        for p in (self.hflip_prob, self.vflip_prob):
            if not 0.0 <= p <= 1.0:
                raise ConfigError(f"flip probability {p} outside [0, 1]")


@dataclass
class Batch:
    original: torch.Tensor
    decoded: torch.Tensor
    ids: list


def sample_rng(seed: int, sample_id: int, epoch: int) -> np.random.Generator:
    """Per-sample generator, so worker count never changes the draws."""
    return np.random.default_rng([int(seed), int(sample_id), int(epoch)])


def augment(sample: PairedSample, cfg: AugmentConfig, rng: np.random.Generator) -> PairedSample:
    """Apply one random crop and flip draw identically to both images."""
    h, w = sample.original.shape[:2]
    k = cfg.crop_size
    if k > h or k > w:
        raise DataError(f"crop {k} larger than image {h}x{w} ({sample.name})")
    top = int(rng.integers(0, h - k + 1))
    left = int(rng.integers(0, w - k + 1))
    hflip = rng.random() < cfg.hflip_prob
    vflip = rng.random() < cfg.vflip_prob

    def apply(img):
        out = img[top:top + k, left:left + k]
        if hflip:
            out = out[:, ::-1]
        if vflip:
            out = out[::-1]
        return np.ascontiguousarray(out)

    return replace(sample, original=apply(sample.original), decoded=apply(sample.decoded))


def epoch_order(n: int, shuffle_seed: int | None, epoch: int = 0) -> np.ndarray:
    if shuffle_seed is None:
        return np.arange(n)
    return np.random.default_rng([int(shuffle_seed), int(epoch)]).permutation(n)


def batch_iter(dataset: Sequence[PairedSample], batch_size: int, shuffle_seed: int | None = 0, epoch: int = 0,
               augment_cfg: AugmentConfig | None = None, workers: int = 1) -> Iterator[Batch]:
    """Yield one epoch of batches; the last batch may be short."""
    n = len(dataset)
    if n == 0:
        raise DataError("dataset is empty")
    if batch_size < 1:
        raise ConfigError("batch_size must be >= 1")
    order = epoch_order(n, shuffle_seed, epoch)

    def prepare(i):
        s = dataset[i]
        if augment_cfg is not None:
            s = augment(s, augment_cfg, sample_rng(augment_cfg.seed, i, epoch))
        return s

    pool = ThreadPoolExecutor(workers) if workers > 1 else None
    try:
        for start in range(0, n, batch_size):
            ids = [int(i) for i in order[start:start + batch_size]]
            samples = list(pool.map(prepare, ids)) if pool else [prepare(i) for i in ids]
            yield Batch(to_batch([s.original for s in samples]), to_batch([s.decoded for s in samples]), ids)
    finally:
        if pool:
            pool.shutdown()


def infinite_batches(dataset, batch_size, shuffle_seed=0, augment_cfg=None, workers=1, start_epoch=0):
    epoch = start_epoch
    while True:
        yield from batch_iter(dataset, batch_size, shuffle_seed, epoch, augment_cfg, workers)
        epoch += 1


def synthetic_scene(size: int = 96, seed: int = 0, channels: int = 3) -> np.ndarray:
    """Procedural aerial-style scene: textured terrain, roads and rectangular roofs."""
    rng = np.random.default_rng(seed)
    h = w = size
    terrain = sum(gaussian_filter(rng.standard_normal((h, w)), s) * s for s in (1.0, 3.0, 8.0))
    terrain = (terrain - terrain.mean()) / (terrain.std() + 1e-8)
    base = rng.uniform(0.25, 0.55, channels)
    tint = rng.uniform(0.04, 0.1, channels)
    img = base[None, None, :] + terrain[:, :, None] * tint[None, None, :]
    yy, xx = np.mgrid[0:h, 0:w]
    for _ in range(rng.integers(1, 4)):
        angle = rng.uniform(0, np.pi)
        offset = rng.uniform(-0.3, 0.3) * size
        dist = np.abs((xx - w / 2) * np.sin(angle) - (yy - h / 2) * np.cos(angle) - offset)
        road = dist < rng.uniform(1.5, 3.5)
        img[road] = rng.uniform(0.45, 0.7) + 0.02 * rng.standard_normal((road.sum(), 1))
    for _ in range(rng.integers(4, 12)):
        rh, rw = rng.integers(4, max(5, size // 5), 2)
        y0, x0 = rng.integers(0, h - rh), rng.integers(0, w - rw)
        roof = rng.uniform(0.1, 0.95, channels)
        img[y0:y0 + rh, x0:x0 + rw] = roof
        img[y0:y0 + rh, x0:x0 + rw] += 0.03 * rng.standard_normal((rh, rw, 1))
        sh = min(h, y0 + rh + 2), min(w, x0 + rw + 2)
        img[y0 + rh:sh[0], x0 + 2:sh[1]] *= 0.55
    img = gaussian_filter(img, (0.6, 0.6, 0))
    return quantize8(np.clip(img, 0, 1))


def read_manifest(path) -> list[str]:
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    return [ln.strip() for ln in lines if ln.strip() and not ln.lstrip().startswith("#")]


def list_images(root, manifest=None) -> list[Path]:
    root = Path(root)
    if manifest is not None:
        paths = [root / rel for rel in read_manifest(manifest)]
    else:
        paths = sorted(root.glob("*.png"))
    if not paths:
        raise DataError(f"no images found under {root}")
    return paths


def _cache_key(img: np.ndarray, codec_id: str, q: float, options: dict) -> str:
    h = hashlib.sha256(np.ascontiguousarray(img).tobytes())
    h.update(repr((img.shape, codec_id, float(q), sorted(options.items()))).encode())
    return h.hexdigest()[:24]


def make_pair(original, q, codec_id="blockdct", name="", cache_dir=None, **codec_options) -> PairedSample:
    """Run the codec on ``original``; decoded images are cached under ``cache_dir`` when given."""
    original = as_image(original)
    if cache_dir is None:
        cache_dir = os.environ.get("LDMRIC_CACHE") or None
    if cache_dir is not None and codec_id in ("blockdct", "external"):
        key = _cache_key(original, codec_id, q, codec_options)
        png, txt = Path(cache_dir) / f"{key}.png", Path(cache_dir) / f"{key}.txt"
        if png.is_file() and txt.is_file():
            return PairedSample(original, read_png(png), read_bpp(txt), name)
        res = compress_roundtrip(original, q, codec_id, **codec_options)
        write_png(png, res.decoded)
        txt.write_text(repr(res.bpp), encoding="utf-8")
        return PairedSample(original, res.decoded, res.bpp, name)
    if codec_id == "precomputed":
        codec_options.setdefault("name", name)
    res = compress_roundtrip(original, q, codec_id, **codec_options)
    return PairedSample(original, res.decoded, res.bpp, name)


def build_pairs(originals, q, codec_id="blockdct", names=None, cache_dir=None, **codec_options):
    names = names or [f"img{i:04d}" for i in range(len(originals))]
    return [make_pair(o, q, codec_id, n, cache_dir, **codec_options) for o, n in zip(originals, names)]


def load_precomputed_dir(root, names=None) -> list[PairedSample]:
    """Read every ``<root>/orig/<name>.png`` with its decoded image and bpp sidecar."""
    from .codec import load_precomputed_pair

    root = Path(root)
    if names is None:
        names = sorted(p.stem for p in (root / "orig").glob("*.png"))
    if not names:
        raise DataError(f"no precomputed pairs under {root}")
    out = []
    for n in names:
        orig, res = load_precomputed_pair(root / "orig" / f"{n}.png", root / "dec" / f"{n}.png",
                                          root / "bpp" / f"{n}.txt")
        out.append(PairedSample(orig, res.decoded, res.bpp, n))
    return out


def synthetic_dataset(count: int, size: int, q: float, codec_id: str = "blockdct", seed: int = 0,
                      **codec_options) -> list[PairedSample]:
    originals = [synthetic_scene(size, seed * 100003 + i) for i in range(count)]
    return build_pairs(originals, q, codec_id, [f"syn{seed}_{i:03d}" for i in range(count)], **codec_options)
