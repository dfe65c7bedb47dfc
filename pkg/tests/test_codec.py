import numpy as np
import pytest

from ldmric.codec import (CodecResult, ZIGZAG, blockdct_decode, blockdct_encode, compress_roundtrip,
                          load_precomputed_pair)
from ldmric.data import synthetic_scene
from ldmric.errors import BackendError, ConfigError, DataError
from ldmric.images import write_png


def test_identity_is_exact_with_raw_rate(scene64):
    res = compress_roundtrip(scene64, 1.0, "identity")
    assert np.array_equal(res.decoded, scene64)
    assert res.bpp == 24.0
    gray = scene64[:, :, :1]
    assert compress_roundtrip(gray, 1.0, "identity").bpp == 8.0


def test_constant_image_is_cheap_and_near_exact():
    img = np.full((64, 64, 3), 77 / 255, dtype=np.float32)
    res = compress_roundtrip(img, 1.0, "blockdct")
    assert np.abs(res.decoded - img).max() <= 1 / 255 + 1e-7
    assert res.bpp < 0.5


def test_rate_and_distortion_are_monotone_in_quality(scene64):
    qs = [0.5, 1, 2, 4]
    res = [compress_roundtrip(scene64, q, "blockdct") for q in qs]
    bpps = [r.bpp for r in res]
    mses = [float(np.mean((r.decoded - scene64) ** 2)) for r in res]
    assert bpps == sorted(bpps)
    assert mses == sorted(mses, reverse=True)


def test_blockdct_is_deterministic(scene64):
    a = compress_roundtrip(scene64, 0.7, "blockdct")
    b = compress_roundtrip(scene64, 0.7, "blockdct")
    assert a.bpp == b.bpp
    assert a.decoded.tobytes() == b.decoded.tobytes()


@pytest.mark.parametrize("shape", [(64, 64, 3), (37, 50, 3), (8, 8, 1), (21, 64, 1)])
def test_shape_preserved_for_odd_sizes(shape):
    rng = np.random.default_rng(0)
    img = rng.random(shape).astype(np.float32)
    for codec in ("identity", "blockdct"):
        assert compress_roundtrip(img, 2.0, codec).decoded.shape == shape


def test_bitstream_round_trip_and_rate_accounting(scene64):
    stream = blockdct_encode(scene64, 1.0)
    res = compress_roundtrip(scene64, 1.0)
    assert res.bpp == len(stream) * 8 / (64 * 64)
    assert np.array_equal(blockdct_decode(stream), res.decoded)


def test_zigzag_is_a_permutation_starting_at_dc():
    assert sorted(ZIGZAG) == list(range(64))
    assert list(ZIGZAG[:6]) == [0, 1, 8, 16, 9, 2]


def test_unknown_codec_and_bad_quality(scene64):
    with pytest.raises(ConfigError):
        compress_roundtrip(scene64, 1.0, "jpeg-xl")
    with pytest.raises(ConfigError):
        compress_roundtrip(scene64, 0.0, "blockdct")


def test_external_backend(tmp_path, scene64):
    script = tmp_path / "codec.py"
    script.write_text(
        "import sys, shutil\n"
        "src, out, q = sys.argv[1], sys.argv[2], sys.argv[3]\n"
        "shutil.copy(src, out)\n"
        "open(out + '.bits', 'wb').write(b'x' * 512)\n"
    )
    res = compress_roundtrip(scene64, 1.0, "external", command=f"python3 {script}")
    assert res.decoded.shape == scene64.shape
    assert res.bpp == 512 * 8 / (64 * 64)


def test_external_backend_failure_carries_status(tmp_path, scene64):
    script = tmp_path / "fail.py"
    script.write_text("import sys; sys.stderr.write('boom'); sys.exit(7)\n")
    with pytest.raises(BackendError) as err:
        compress_roundtrip(scene64, 1.0, "external", command=f"python3 {script}")
    assert err.value.status == 7
    assert "boom" in str(err.value)


def test_precomputed_pairs(tmp_path, scene64):
    p = tmp_path / "img.png"
    write_png(p, scene64)
    orig, res = load_precomputed_pair(p, p, 24.0)
    assert np.array_equal(orig, res.decoded) and res.bpp == 24.0

    big = synthetic_scene(256, 1)
    write_png(tmp_path / "o.png", big)
    write_png(tmp_path / "d.png", big)
    (tmp_path / "bpp.txt").write_text("0.0457\n", encoding="utf-8")
    _, res = load_precomputed_pair(tmp_path / "o.png", tmp_path / "d.png", tmp_path / "bpp.txt")
    assert res.bpp == pytest.approx(0.0457)

    write_png(tmp_path / "small.png", big[:128, :128])
    with pytest.raises(DataError):
        load_precomputed_pair(tmp_path / "o.png", tmp_path / "small.png", 1.0)
    (tmp_path / "neg.txt").write_text("-1", encoding="utf-8")
    with pytest.raises(DataError):
        load_precomputed_pair(tmp_path / "o.png", tmp_path / "d.png", tmp_path / "neg.txt")
    with pytest.raises(DataError):
        load_precomputed_pair(tmp_path / "o.png", tmp_path / "d.png", tmp_path / "missing.txt")


def test_precomputed_backend_layout(tmp_path, scene64):
    for sub in ("orig", "dec", "bpp"):
        (tmp_path / sub).mkdir()
    dec = compress_roundtrip(scene64, 0.5).decoded
    write_png(tmp_path / "orig" / "a.png", scene64)
    write_png(tmp_path / "dec" / "a.png", dec)
    (tmp_path / "bpp" / "a.txt").write_text("1.25", encoding="utf-8")
    res = compress_roundtrip(scene64, 1.0, "precomputed", root=tmp_path, name="a")
    assert isinstance(res, CodecResult)
    assert res.bpp == 1.25
    assert np.array_equal(res.decoded, dec)
