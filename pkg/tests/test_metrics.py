import math

import numpy as np
import pytest

from ldmric.errors import DataError, ShapeError
from ldmric.metrics import (RDPoint, aggregate_bpp, ms_ssim, ms_ssim_scales, psnr, rd_csv, rd_curve, rd_svg,
                            register_metric, get_metric)


def checkerboard(n=64, square=4):
    yy, xx = np.mgrid[0:n, 0:n]
    return (((yy // square) + (xx // square)) % 2).astype(np.float64)[:, :, None]


def test_psnr_cases():
    rng = np.random.default_rng(0)
    a = rng.random((16, 16, 3))
    assert psnr(a, a) == 100.0
    b = np.clip(a, 0, 1 - 16 / 255)
    assert psnr(b, b + 16 / 255) == pytest.approx(20 * math.log10(255 / 16), abs=1e-9)
    assert psnr(b, b + 16 / 255) == pytest.approx(24.05, abs=0.01)
    assert psnr(np.zeros((4, 4)), np.ones((4, 4))) == 0.0
    with pytest.raises(ShapeError):
        psnr(np.zeros((4, 4)), np.zeros((4, 5)))


def test_psnr_translation():
    rng = np.random.default_rng(1)
    a, b = rng.random((8, 8, 3)), rng.random((8, 8, 3))
    c = 0.3
    mse = np.mean((a - b - c) ** 2)
    assert psnr(a, b + c) == pytest.approx(10 * math.log10(1 / mse))
    assert psnr(a + c, b + c) == pytest.approx(psnr(a, b))


def test_ms_ssim_identity_and_symmetry():
    rng = np.random.default_rng(2)
    a = rng.random((64, 64, 3))
    b = np.clip(a + 0.1 * rng.standard_normal(a.shape), 0, 1)
    assert ms_ssim(a, a) == 1.0
    assert abs(ms_ssim(a, b) - ms_ssim(b, a)) < 1e-9
    assert 0 < ms_ssim(a, b) < 1


def test_ms_ssim_anti_correlated_checkerboard():
    a = checkerboard()
    assert ms_ssim(a, 1 - a) < 0.2


def test_ms_ssim_scale_count():
    assert ms_ssim_scales(256, 256) == 5
    assert ms_ssim_scales(176, 200) == 5
    assert ms_ssim_scales(175, 200) == 4
    assert ms_ssim_scales(64, 64) == 3
    assert ms_ssim_scales(10, 64) == 0
    with pytest.raises(DataError):
        ms_ssim(np.zeros((10, 10)), np.zeros((10, 10)))


def test_ms_ssim_bounded_on_random_inputs():
    rng = np.random.default_rng(3)
    for i in range(1000):
        kind = i % 4
        a = rng.random((24, 24, 1))
        if kind == 0:
            b = rng.random((24, 24, 1))
        elif kind == 1:
            b = 1 - a
        elif kind == 2:
            b = np.full_like(a, rng.random())
        else:
            b = np.clip(a + rng.normal(0, rng.random(), a.shape), 0, 1)
        v = ms_ssim(a, b)
        assert 0.0 <= v <= 1.0


def test_ms_ssim_decreases_with_noise():
    rng = np.random.default_rng(4)
    a = rng.random((64, 64, 1))
    vals = [ms_ssim(a, np.clip(a + s * rng.standard_normal(a.shape), 0, 1)) for s in (0.01, 0.05, 0.2)]
    assert vals == sorted(vals, reverse=True)


def test_bpp_aggregation():
    assert aggregate_bpp([1.0, 3.0]) == 2.0
    assert aggregate_bpp([1.0, 3.0], pixels=[300, 100], mode="pooled") == pytest.approx(1.5)
    with pytest.raises(DataError):
        aggregate_bpp([])


def _rec(q, bpp, p, s, curve=""):
    return {"quality": q, "bpp": bpp, "psnr": p, "ms_ssim": s, "curve": curve}


def test_rd_curve_grouping_and_order():
    one = rd_curve([_rec(1, 0.5, 30.0, 0.9)])
    assert one == [RDPoint(1.0, 0.5, 30.0, 0.9, 1)]
    two = rd_curve([_rec(4, 2.0, 40, 0.99), _rec(1, 0.5, 30, 0.9), _rec(1, 0.7, 32, 0.92)])
    assert [p.quality for p in two] == [1.0, 4.0]
    assert two[0].bpp == pytest.approx(0.6) and two[0].n_images == 2
    with pytest.raises(DataError):
        rd_curve([])


def test_rd_curve_duplicated_dataset_is_unchanged():
    rng = np.random.default_rng(5)
    recs = [_rec(q, rng.random(), 30 + rng.random(), rng.random()) for q in (1, 2, 4) for _ in range(3)]
    a, b = rd_curve(recs), rd_curve(recs + recs)
    for p, r in zip(a, b):
        assert (p.quality, p.bpp, p.psnr_db, p.ms_ssim) == pytest.approx((r.quality, r.bpp, r.psnr_db, r.ms_ssim))


def test_rd_csv_header_and_svg():
    pts = rd_curve([_rec(1, 0.5, 30.0, 0.9), _rec(2, 1.0, 33.0, 0.95)])
    text = rd_csv(pts)
    assert text.splitlines()[0] == "quality,bpp,psnr_db,ms_ssim,n_images"
    assert len(text.splitlines()) == 3
    tagged = rd_curve([_rec(1, 0.5, 30.0, 0.9, "baseline"), _rec(1, 0.5, 31.0, 0.92, "enhanced")])
    assert rd_csv(tagged).splitlines()[0] == "curve,quality,bpp,psnr_db,ms_ssim,n_images"
    svg = rd_svg(tagged)
    assert svg.startswith("<svg") and svg.count("<polyline") == 2


def test_metric_registry():
    register_metric("mae", lambda a, b: float(np.mean(np.abs(np.asarray(a) - np.asarray(b)))))
    assert get_metric("mae")(np.zeros(3), np.ones(3)) == 1.0
    assert get_metric("psnr") is psnr
