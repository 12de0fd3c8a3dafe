import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dpgs.core import PinholeCamera
from dpgs.errors import InvalidInput, NumericalError
from dpgs.losses import (LossWeights, apply_brightness, brightness_activation, camera_flow, component_names,
                         dynamic_flow_target, entropy_loss, flow_loss, masked_alpha_loss, masked_rgb_loss, ssim,
                         ssim_loss, total_loss)
from dpgs.metrics import psnr

C1, C2 = 0.01 ** 2, 0.03 ** 2


# -- brightness control ------------------------------------------------------------

def test_brightness_examples():
    assert brightness_activation(0.0) == 0.5
    assert brightness_activation(0.75) == 1.25
    assert brightness_activation(1.0) == 10.0
    # the upper branch evaluated at the knee gives the same value
    assert 35.0 * (0.75 - 0.75) + 1.25 == 0.75 + 0.5


def test_brightness_monotone_on_grid():
    grid = np.linspace(0.0, 1.0, 1001)
    assert np.all(np.diff(brightness_activation(grid)) >= 0)


def test_brightness_gradient_slopes():
    _, slope = brightness_activation(np.array([0.3, 0.9]), grad=True)
    np.testing.assert_array_equal(slope, [1.0, 35.0])


def test_apply_brightness():
    rng = np.random.default_rng(0)
    img = rng.uniform(size=(6, 6, 3))
    np.testing.assert_array_equal(apply_brightness(img, np.ones((6, 6))), img)
    np.testing.assert_allclose(apply_brightness(img, np.full((6, 6), 0.5)), img / 2)
    board = np.indices((6, 6)).sum(axis=0) % 2 * 1.5 + 0.25
    out = apply_brightness(img, board)
    for y in range(6):
        for x in range(6):
            np.testing.assert_allclose(out[y, x], img[y, x] * board[y, x])
    with pytest.raises(InvalidInput):
        apply_brightness(img, np.ones((5, 6)))


# -- motion-flow control ------------------------------------------------------------

def _cam(R=np.eye(3), t=np.zeros(3)):
    return PinholeCamera(60.0, 60.0, 15.5, 15.5, 32, 32, R, t)


def test_dynamic_flow_cancellation_and_identity():
    f = np.random.default_rng(1).normal(size=(8, 8, 2))
    assert not dynamic_flow_target(f, f).any()
    np.testing.assert_array_equal(dynamic_flow_target(f, np.zeros_like(f)), f)


def test_camera_flow_identity_pose():
    flow, valid = camera_flow(np.full((32, 32), 2.0), _cam(), _cam())
    assert valid.all() and not flow.any()


def test_camera_flow_x_translation():
    # the camera centre moves by +delta along x, so x_cam of every point shifts by -delta
    delta, z = 0.05, 2.0
    flow, valid = camera_flow(np.full((32, 32), z), _cam(), _cam(t=np.array([-delta, 0, 0])))
    assert valid.all()
    np.testing.assert_allclose(flow[..., 0], -60.0 * delta / z, atol=1e-12)
    np.testing.assert_allclose(flow[..., 1], 0.0, atol=1e-12)


def test_camera_flow_roll_about_optical_axis():
    th = 0.05
    R = np.array([[np.cos(th), -np.sin(th), 0], [np.sin(th), np.cos(th), 0], [0, 0, 1]])
    flow, _ = camera_flow(np.full((32, 32), 3.0), _cam(), _cam(R=R))
    v, u = np.mgrid[0:32, 0:32].astype(float)
    du, dv = u - 15.5, v - 15.5
    expected = np.stack([np.cos(th) * du - np.sin(th) * dv - du, np.sin(th) * du + np.cos(th) * dv - dv], -1)
    np.testing.assert_allclose(flow, expected, atol=1e-10)


def test_camera_flow_invalid_pixels():
    depth = np.full((32, 32), 2.0)
    depth[0, 0] = -1.0
    alpha = np.ones((32, 32))
    alpha[1, 1] = 0.2
    flow, valid = camera_flow(depth, _cam(), _cam(t=np.array([0.1, 0, 0])), alpha)
    assert not valid[0, 0] and not valid[1, 1] and valid[2, 2]
    assert not flow[0, 0].any() and not flow[1, 1].any()


def test_flow_loss_examples():
    rng = np.random.default_rng(2)
    target = rng.normal(size=(6, 6, 2))
    valid = np.ones((6, 6), bool)
    assert flow_loss(target, target, valid) == 0.0
    assert flow_loss(target + [1.0, 0.0], target, valid) == pytest.approx(0.5)
    pred = target.copy()
    assert flow_loss(pred, -target, valid) == pytest.approx(2 * flow_loss(pred, np.zeros_like(target), valid))


def test_flow_loss_ignores_invalid_pixels():
    valid = np.zeros((4, 4), bool)
    valid[:2] = True
    pred = np.zeros((4, 4, 2))
    pred[2:] = 100.0
    assert flow_loss(pred, np.zeros_like(pred), valid) == 0.0


# -- mask control ----------------------------------------------------------------------

def test_masked_losses_examples():
    rng = np.random.default_rng(3)
    gt = rng.uniform(0.2, 0.8, (8, 8, 3))
    mask = np.zeros((8, 8))
    mask[:, :4] = 1
    assert masked_rgb_loss(gt, gt, mask) == 0.0
    assert masked_alpha_loss(mask, mask) == 0.0
    assert masked_rgb_loss(gt + 0.1, gt, mask) == pytest.approx(0.1)
    # errors outside the mask do not count
    bad = gt.copy()
    bad[:, 4:] += 0.5
    assert masked_rgb_loss(bad, gt, mask) == pytest.approx(0.0, abs=1e-15)


def test_masked_rgb_empty_mask_is_zero():
    assert masked_rgb_loss(np.ones((4, 4, 3)), np.zeros((4, 4, 3)), np.zeros((4, 4))) == 0.0


# -- SSIM and entropy --------------------------------------------------------------------

def _ssim_map_oracle(x, y):
    """Per-pixel SSIM with an explicit 11x11 Gaussian window and zero padding."""
    g = np.exp(-((np.arange(11) - 5) ** 2) / (2 * 1.5 ** 2))
    g /= g.sum()
    w = np.outer(g, g)
    h, wd = x.shape
    pad = lambda a: np.pad(a, 5)
    xp, yp = pad(x), pad(y)
    out = np.empty_like(x)
    for i in range(h):
        for j in range(wd):
            px, py = xp[i:i + 11, j:j + 11], yp[i:i + 11, j:j + 11]
            m1, m2 = (w * px).sum(), (w * py).sum()
            v1 = (w * px * px).sum() - m1 * m1
            v2 = (w * py * py).sum() - m2 * m2
            cv = (w * px * py).sum() - m1 * m2
            out[i, j] = ((2 * m1 * m2 + C1) * (2 * cv + C2)) / ((m1 ** 2 + m2 ** 2 + C1) * (v1 + v2 + C2))
    return out


def test_ssim_matches_window_oracle():
    rng = np.random.default_rng(4)
    x, y = rng.uniform(size=(14, 13)), rng.uniform(size=(14, 13))
    assert ssim(x, y) == pytest.approx(_ssim_map_oracle(x, y).mean(), abs=1e-12)


def test_ssim_constant_shift_luminance_penalty():
    a, b = 0.3, 0.5
    x, y = np.full((40, 40), a), np.full((40, 40), b)
    smap = _ssim_map_oracle(x, y)
    # away from the zero-padded border only the luminance term remains
    np.testing.assert_allclose(smap[5:-5, 5:-5], (2 * a * b + C1) / (a * a + b * b + C1), rtol=1e-12)
    assert ssim(x, y) == pytest.approx(smap.mean(), abs=1e-12)


def test_ssim_identity():
    x = np.random.default_rng(5).uniform(size=(16, 16, 3))
    assert ssim(x, x) == pytest.approx(1.0, abs=1e-12)
    assert ssim_loss(x, x) == pytest.approx(0.0, abs=1e-12)


def test_entropy_examples():
    assert entropy_loss(np.eye(3)) == 0.0
    assert entropy_loss(np.full((5, 3), 1 / 3)) == pytest.approx(np.log(3))


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2 ** 20))
def test_entropy_bounds(seed):
    p = np.random.default_rng(seed).dirichlet(np.ones(3), size=7)
    assert 0.0 <= entropy_loss(p) <= np.log(3) + 1e-12


# -- total loss -------------------------------------------------------------------------

def test_total_loss_zero():
    assert total_loss({}).total == 0.0


def test_total_loss_weighted_sum():
    rng = np.random.default_rng(6)
    comps = {k: float(v) for k, v in zip(component_names(), rng.uniform(size=len(component_names())))}
    w = LossWeights(l1=0.7, ssim=0.3, flow=0.2, rgb=1.5, alpha=0.4, entropy=0.05)
    rep = total_loss(comps, w)
    wv = np.array([getattr(w, k.split("_")[0]) for k in comps])
    assert rep.total == pytest.approx(float(wv @ np.array(list(comps.values()))), rel=1e-14)


def test_removing_flow_weight_changes_only_flow_term():
    comps = {k: 1.0 + i for i, k in enumerate(component_names())}
    a = total_loss(comps, LossWeights())
    b = total_loss(comps, LossWeights(flow=0.0))
    assert a.total - b.total == pytest.approx(LossWeights().flow * comps["flow"])


def test_total_loss_rejects_negative_or_nan():
    with pytest.raises(InvalidInput):
        total_loss({"l1": -1.0})
    with pytest.raises(NumericalError):
        total_loss({"l1": float("nan")})


def test_losses_nonnegative_and_zero_at_truth():
    rng = np.random.default_rng(7)
    img = rng.uniform(size=(12, 12, 3))
    other = rng.uniform(size=(12, 12, 3))
    m = (rng.uniform(size=(12, 12)) > 0.5).astype(float)
    for f in (lambda a, b: masked_rgb_loss(a, b, m), ssim_loss):
        assert f(img, img) == pytest.approx(0.0, abs=1e-12)
        assert f(img, other) > 0


# -- PSNR -----------------------------------------------------------------------------

def test_psnr_examples():
    x = np.random.default_rng(8).uniform(0.2, 0.8, (8, 8, 3))
    assert psnr(x, x) >= 99.0
    assert psnr(x + 0.1, x) == pytest.approx(20.0)
