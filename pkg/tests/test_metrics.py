import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from geomask.errors import InvalidArgumentError
from geomask.metrics import binary_iou, iou_per_class, mae, metric_report, psnr, rmse, ssim


def brute_ssim_plane(x, y, data_range):
    """Direct loop over every 11x11 window with explicit Gaussian weights."""
    size, sigma = 11, 1.5
    w = [[math.exp(-((i - 5) ** 2 + (j - 5) ** 2) / (2 * sigma**2)) for j in range(size)] for i in range(size)]
    total = sum(sum(r) for r in w)
    w = [[v / total for v in r] for r in w]
    c1 = (0.01 * data_range) ** 2
    c2 = (0.03 * data_range) ** 2
    h, wd = len(x), len(x[0])
    vals = []
    for r0 in range(h - size + 1):
        for c0 in range(wd - size + 1):
            mx = my = sxx = syy = sxy = 0.0
            for i in range(size):
                for j in range(size):
                    a, b, g = x[r0 + i][c0 + j], y[r0 + i][c0 + j], w[i][j]
                    mx += g * a
                    my += g * b
                    sxx += g * a * a
                    syy += g * b * b
                    sxy += g * a * b
            vx, vy, cxy = sxx - mx * mx, syy - my * my, sxy - mx * my
            vals.append(((2 * mx * my + c1) * (2 * cxy + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2)))
    return sum(vals) / len(vals)


def brute_ssim(p, r, data_range):
    planes = [(a, b) for a, b in zip(p.reshape(-1, *p.shape[-2:]).tolist(), r.reshape(-1, *r.shape[-2:]).tolist())]
    return sum(brute_ssim_plane(a, b, data_range) for a, b in planes) / len(planes)


def brute_psnr(p, r, data_range):
    flat_p, flat_r = p.reshape(-1).tolist(), r.reshape(-1).tolist()
    err = sum((a - b) ** 2 for a, b in zip(flat_p, flat_r)) / len(flat_p)
    return 10 * math.log10(data_range**2 / err)


def brute_mae_rmse(p, r):
    d = [a - b for a, b in zip(p.reshape(-1).tolist(), r.reshape(-1).tolist())]
    return sum(abs(v) for v in d) / len(d), math.sqrt(sum(v * v for v in d) / len(d))


def random_pairs(n=20, seed=0):
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(n):
        c = int(rng.integers(1, 3))
        h, w = int(rng.integers(11, 17)), int(rng.integers(11, 17))
        ref = rng.uniform(0, 1, size=(c, h, w))
        pred = np.clip(ref + rng.normal(0, 0.2, size=ref.shape), 0, 1)
        out.append((pred, ref))
    return out


def test_ssim_matches_brute_force():
    for pred, ref in random_pairs():
        assert ssim(pred, ref, 1.0) == pytest.approx(brute_ssim(pred, ref, 1.0), abs=1e-6)


def test_psnr_mae_rmse_match_brute_force():
    for pred, ref in random_pairs(seed=1):
        assert psnr(pred, ref, 1.0) == pytest.approx(brute_psnr(pred, ref, 1.0), abs=1e-6)
        m, r = brute_mae_rmse(pred, ref)
        assert mae(pred, ref) == pytest.approx(m, abs=1e-6)
        assert rmse(pred, ref) == pytest.approx(r, abs=1e-6)


def test_upscaled_toy_pair():
    rng = np.random.default_rng(3)
    a = np.kron(rng.uniform(size=(2, 2)), np.ones((8, 8)))
    b = np.kron(rng.uniform(size=(2, 2)), np.ones((8, 8)))
    assert ssim(a, b, 1.0) == pytest.approx(brute_ssim(a[None], b[None], 1.0), abs=1e-6)


def test_anticorrelated_images_score_negative():
    rng = np.random.default_rng(4)
    ref = rng.normal(size=(16, 16))
    ref -= ref.mean()
    value = ssim(0.5 + ref, 0.5 - ref, 2.0)
    assert value < 0
    assert value == pytest.approx(brute_ssim((0.5 + ref)[None], (0.5 - ref)[None], 2.0), abs=1e-6)


def test_identity_and_constant_examples():
    x = np.random.default_rng(0).uniform(size=(1, 16, 16))
    assert ssim(x, x, 1.0) == pytest.approx(1.0)
    assert psnr(x, x, 1.0) == float("inf")
    assert mae(x, x) == 0 and rmse(x, x) == 0
    assert mae(x + 0.3, x) == pytest.approx(0.3) and rmse(x + 0.3, x) == pytest.approx(0.3)
    assert mae([0, 2], [0, 0]) == 1 and rmse([0, 2], [0, 0]) == pytest.approx(math.sqrt(2))


def test_psnr_log_examples():
    ref = np.zeros((4, 4))
    assert psnr(ref + 2.0, ref, 2.0) == pytest.approx(0.0)  # MSE = range^2
    assert psnr(ref + 0.2, ref, 2.0) == pytest.approx(20.0)  # MSE = range^2 / 100


@settings(max_examples=1000, deadline=None)
@given(
    arrays(np.float64, st.integers(1, 30), elements=st.floats(-1e3, 1e3)),
    st.data(),
)
def test_rmse_at_least_mae(pred, data):
    ref = data.draw(arrays(np.float64, pred.shape, elements=st.floats(-1e3, 1e3)))
    m, r = mae(pred, ref), rmse(pred, ref)
    assert r >= m - 1e-9 * max(1.0, m) and m >= 0
    if np.array_equal(pred, ref):
        assert m == 0 and r == 0
    elif np.abs(pred - ref).max() >= np.finfo(np.float64).tiny:
        # below the smallest normal float the mean itself is not representable
        assert m > 0 and r > 0


def test_errors():
    with pytest.raises(InvalidArgumentError):
        ssim(np.zeros((8, 8)), np.zeros((8, 8)), 1.0)
    with pytest.raises(InvalidArgumentError):
        ssim(np.zeros((16, 16)), np.zeros((16, 15)), 1.0)
    with pytest.raises(InvalidArgumentError):
        psnr(np.zeros(3), np.ones(3), 0.0)
    with pytest.raises(InvalidArgumentError):
        mae(np.zeros(3), np.zeros(4))


def test_report_ranges():
    pred, ref = random_pairs(1, seed=9)[0]
    r = metric_report(pred, ref, 1.0)
    assert r["RMSE"] >= r["MAE"] >= 0 and -1 <= r["SSIM"] <= 1 and np.isfinite(r["PSNR"])


def test_iou():
    assert binary_iou([1, 1, 0, 0], [1, 0, 1, 0]) == pytest.approx(1 / 3)
    assert binary_iou([0, 0], [0, 0]) == 1.0
    per = iou_per_class([0, 1, 1], [0, 1, 2])
    assert per[0] == 1.0 and per[1] == 0.5 and per[2] == 0.0
    assert math.isnan(iou_per_class([0], [0], classes=[0, 5])[5])
