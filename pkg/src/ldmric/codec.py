"""Lossy codec backends producing ``(decoded image, bpp)`` pairs.

Backends:

``identity``
    decoded == input, bpp = 8 * channels.
``blockdct``
    8x8 orthonormal block DCT, uniform quantisation with step ``16 / q`` on
    the 0..255 scale, zigzag scan, zlib. bpp counts the compressed payload.
``external``
    runs a user command ``{cmd} {in} {out} {q}``; the command writes the
    decoded PNG to ``{out}`` and its bitstream to ``{bits}`` (default
    ``<out>.bits``), whose byte size gives the rate.
``precomputed``
    looks up ``<root>/dec/<name>.png`` and ``<root>/bpp/<name>.txt``.
"""
from __future__ import annotations

import shlex
import struct
import subprocess
import tempfile
import zlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.fft import dctn, idctn

from .errors import BackendError, ConfigError, DataError, ShapeError
from .images import as_image, quantize8, read_png, write_png

CODECS = ("identity", "blockdct", "external", "precomputed")
BLOCK = 8
BASE_STEP = 16.0
_HEADER = struct.Struct("<4sIIBf")  # magic, H, W, C, q


@dataclass
class CodecResult:
    decoded: np.ndarray
    bpp: float


def _zigzag(n: int = BLOCK) -> np.ndarray:
    order = sorted(((i, j) for i in range(n) for j in range(n)),
                   key=lambda p: (p[0] + p[1], p[1] if (p[0] + p[1]) % 2 == 0 else p[0]))
    return np.array([i * n + j for i, j in order])


ZIGZAG = _zigzag()
UNZIGZAG = np.argsort(ZIGZAG)


def _check_q(q) -> float:
    q = float(q)
    if not np.isfinite(q) or q <= 0:
        raise ConfigError(f"quality parameter must be > 0, got {q}")
    return q


def _to_blocks(x: np.ndarray) -> np.ndarray:
    """(Hp, Wp, C) -> (C, nblocks, 64)."""
    hp, wp, c = x.shape
    b = x.transpose(2, 0, 1).reshape(c, hp // BLOCK, BLOCK, wp // BLOCK, BLOCK)
    return b.transpose(0, 1, 3, 2, 4).reshape(c, -1, BLOCK * BLOCK)


def _from_blocks(b: np.ndarray, hp: int, wp: int) -> np.ndarray:
    c = b.shape[0]
    x = b.reshape(c, hp // BLOCK, wp // BLOCK, BLOCK, BLOCK).transpose(0, 1, 3, 2, 4)
    return x.reshape(c, hp, wp).transpose(1, 2, 0)


def blockdct_encode(image: np.ndarray, q: float) -> bytes:
    img = as_image(image, min_size=BLOCK)
    q = _check_q(q)
    h, w, c = img.shape
    ph, pw = -h % BLOCK, -w % BLOCK
    x = np.pad(img.astype(np.float64), ((0, ph), (0, pw), (0, 0)), mode="reflect") * 255.0 - 128.0
    blocks = _to_blocks(x).reshape(c, -1, BLOCK, BLOCK)
    coef = dctn(blocks, axes=(-2, -1), norm="ortho").reshape(c, -1, BLOCK * BLOCK)
    levels = np.round(coef / (BASE_STEP / q)).astype(np.int64)[:, :, ZIGZAG]
    # coefficient-major layout groups same-frequency values across blocks
    levels = levels.transpose(0, 2, 1)
    wide = np.abs(levels).max(initial=0) > 32767
    payload = levels.astype("<i4" if wide else "<i2").tobytes()
    header = _HEADER.pack(b"BDC4" if wide else b"BDC2", h, w, c, q)
    return header + zlib.compress(payload, 9)


def blockdct_decode(stream: bytes) -> np.ndarray:
    magic, h, w, c, q = _HEADER.unpack_from(stream)
    if magic not in (b"BDC2", b"BDC4"):
        raise DataError("not a blockdct stream")
    dtype = "<i2" if magic == b"BDC2" else "<i4"
    hp, wp = h + (-h % BLOCK), w + (-w % BLOCK)
    nblocks = (hp // BLOCK) * (wp // BLOCK)
    levels = np.frombuffer(zlib.decompress(stream[_HEADER.size:]), dtype=dtype)
    levels = levels.reshape(c, BLOCK * BLOCK, nblocks).transpose(0, 2, 1)[:, :, UNZIGZAG]
    coef = (levels.astype(np.float64) * (BASE_STEP / q)).reshape(c, nblocks, BLOCK, BLOCK)
    pix = idctn(coef, axes=(-2, -1), norm="ortho").reshape(c, nblocks, BLOCK * BLOCK)
    x = _from_blocks(pix, hp, wp)[:h, :w]
    return quantize8((x + 128.0) / 255.0)


def _blockdct(image, q, **_):
    img = as_image(image, min_size=BLOCK)
    stream = blockdct_encode(img, q)
    h, w = img.shape[:2]
    return CodecResult(blockdct_decode(stream), len(stream) * 8.0 / (h * w))


def _identity(image, q, **_):
    img = as_image(image)
    _check_q(q)
    return CodecResult(img.copy(), 8.0 * img.shape[2])


def _external(image, q, command=None, template="{cmd} {in} {out} {q}", timeout=None, **_):
    if not command:
        raise ConfigError("external codec needs a 'command'")
    img = as_image(image, min_size=BLOCK)
    q = _check_q(q)
    with tempfile.TemporaryDirectory() as tmp:
        src, out = Path(tmp) / "in.png", Path(tmp) / "out.png"
        bits = Path(str(out) + ".bits")
        write_png(src, img)
        argv = shlex.split(template.format(**{"cmd": command, "in": src, "out": out, "q": q, "bits": bits}))
        try:
            proc = subprocess.run(argv, capture_output=True, timeout=timeout)
        except (OSError, subprocess.TimeoutExpired) as exc:
            raise BackendError(f"external codec could not run: {exc}") from exc
        if proc.returncode != 0:
            raise BackendError(
                f"external codec exited with status {proc.returncode}: {proc.stderr.decode(errors='replace').strip()}",
                status=proc.returncode,
            )
        if not out.is_file() or not bits.is_file():
            raise BackendError("external codec did not produce both decoded image and bitstream")
        decoded = read_png(out)
        nbytes = bits.stat().st_size
    if decoded.shape != img.shape:
        raise BackendError(f"external codec changed shape {img.shape} -> {decoded.shape}")
    return CodecResult(decoded, nbytes * 8.0 / (img.shape[0] * img.shape[1]))


def read_bpp(path) -> float:
    path = Path(path)
    if not path.is_file():
        raise DataError(f"bpp sidecar missing: {path}")
    try:
        bpp = float(path.read_text(encoding="utf-8").strip())
    except ValueError as exc:
        raise DataError(f"bpp sidecar {path} is not a number") from exc
    if not np.isfinite(bpp) or bpp < 0:
        raise DataError(f"bpp sidecar {path} holds invalid value {bpp}")
    return bpp


def load_precomputed_pair(original_path, decoded_path, bpp_sidecar):
    """Load an (original, decoded) PNG pair; ``bpp_sidecar`` is a path or a number."""
    original = read_png(original_path)
    decoded = read_png(decoded_path)
    if original.shape != decoded.shape:
        raise DataError(f"original {original.shape} and decoded {decoded.shape} differ")
    if isinstance(bpp_sidecar, (str, Path)):
        bpp = read_bpp(bpp_sidecar)
    else:
        bpp = float(bpp_sidecar) if bpp_sidecar is not None else float("nan")
        if not np.isfinite(bpp) or bpp < 0:
            raise DataError(f"invalid bpp {bpp_sidecar}")
    return original, CodecResult(decoded, bpp)


def _precomputed(image, q, root=None, name=None, **_):
    if root is None or name is None:
        raise ConfigError("precomputed codec needs 'root' and 'name'")
    root = Path(root)
    _, result = load_precomputed_pair(root / "orig" / f"{name}.png", root / "dec" / f"{name}.png",
                                      root / "bpp" / f"{name}.txt")
    img = as_image(image)
    if result.decoded.shape != img.shape:
        raise DataError(f"precomputed decoded {result.decoded.shape} does not match input {img.shape}")
    return result


_BACKENDS = {"identity": _identity, "blockdct": _blockdct, "external": _external, "precomputed": _precomputed}


def compress_roundtrip(image, q, codec_id: str = "blockdct", **options) -> CodecResult:
    """Encode and decode ``image`` with the named backend.

    ``options`` are backend specific: ``command``/``template``/``timeout`` for
    external, ``root``/``name`` for precomputed.
    """
    try:
        backend = _BACKENDS[codec_id]
    except KeyError:
        raise ConfigError(f"unknown codec {codec_id!r}; choose from {CODECS}") from None
    result = backend(image, q, **options)
    if result.decoded.shape != as_image(image).shape:
        raise ShapeError("codec changed image shape")
    return result
