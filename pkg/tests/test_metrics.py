import numpy as np
import pytest

from dynfield.metrics import flow_epe, flow_to_color, psnr, ssim


def test_psnr_identical_capped():
    img = np.random.default_rng(0).uniform(size=(16, 16, 3))
    assert psnr(img, img) == 99.0


def test_psnr_uniform_error_twenty_db():
    a = np.full((8, 8, 3), 0.5)
    b = a + 0.1
    np.testing.assert_allclose(psnr(a, b), 20.0, atol=1e-9)


def test_psnr_recomputation_oracle():
    rng = np.random.default_rng(1)
    a = rng.uniform(size=(12, 12, 3))
    b = rng.uniform(size=(12, 12, 3))
    mse = np.mean((a - b) ** 2)
    np.testing.assert_allclose(psnr(a, b), -10 * np.log10(mse), atol=1e-10)


def test_psnr_shape_mismatch_and_mask():
    a = np.zeros((4, 4))
    with pytest.raises(ValueError):
        psnr(a, np.zeros((4, 5)))
    b = a.copy()
    b[0, 0] = 1.0
    mask = np.ones((4, 4), bool)
    mask[0, 0] = False
    assert psnr(a, b, mask=mask) == 99.0
    with pytest.raises(ValueError):
        psnr(a, b, mask=np.zeros((4, 4), bool))


def test_ssim_identical_is_one():
    img = np.random.default_rng(2).uniform(size=(24, 24, 3))
    np.testing.assert_allclose(ssim(img, img), 1.0, atol=1e-12)


def test_ssim_negative_image_below_one():
    img = np.clip(np.random.default_rng(3).uniform(size=(24, 24)), 0.05, 0.45)
    assert ssim(img, 1.0 - img) < 0.9


def test_ssim_constant_levels_hand_value():
    a = np.full((16, 16), 0.3)
    b = np.full((16, 16), 0.5)
    c1, c2 = 0.01 ** 2, 0.03 ** 2
    # zero variance: only the luminance term survives
    expect = (2 * 0.3 * 0.5 + c1) / (0.3 ** 2 + 0.5 ** 2 + c1)
    np.testing.assert_allclose(ssim(a, b), expect, atol=1e-9)


def test_ssim_too_small_rejected():
    small = np.zeros((8, 8))
    with pytest.raises(ValueError):
        ssim(small, small)


def test_flow_epe_basics():
    pred = np.array([[[1.0, 0.0], [0.0, 0.0]]])
    gt = np.array([[[0.0, 0.0], [np.nan, np.nan]]])
    epe = flow_epe(pred, gt)
    np.testing.assert_allclose(epe[0, 0], 1.0)
    assert np.isnan(epe[0, 1])


def test_flow_to_color_wheel_properties():
    f = np.array([[[2.0, 0.0], [0.0, 2.0]],
                  [[-2.0, 0.0], [np.nan, np.nan]]])
    c = flow_to_color(f)
    assert c.shape == (2, 2, 3)
    assert c.min() >= 0.0 and c.max() <= 1.0
    # opposite directions land on complementary hues; invalid pixels black
    assert not np.allclose(c[0, 0], c[1, 0])
    np.testing.assert_array_equal(c[1, 1], 0.0)
    # zero flow with a pinned scale is pure white (zero saturation)
    white = flow_to_color(np.zeros((3, 3, 2)), max_mag=1.0)
    np.testing.assert_allclose(white, 1.0, atol=1e-12)
