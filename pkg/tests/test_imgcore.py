import math

import cv2
import numpy as np
import pytest

from hybridwm.config import MetricsConfig
from hybridwm.imgcore import (Image, SeedSpec, seeded_rng, to_luma_ycbcr, psnr, ssim_y, compare,
                              load_image, save_image, image_to_tensor, tensor_to_image,
                              ImageIOException, MetricException, lpips)
from tests.factories import constant_image, gradient_image


def test_image_needs_three_channels():
    with pytest.raises(ImageIOException):
        Image(np.zeros((4, 4, 2), dtype=np.float32))
    with pytest.raises(ImageIOException):
        Image(np.zeros((0, 4, 3), dtype=np.float32))


def test_seed_spec_streams():
    a = seeded_rng(SeedSpec(1, 'img/noise')).random(5)
    b = seeded_rng(SeedSpec(1, 'img/noise')).random(5)
    c = seeded_rng(SeedSpec(1, 'img/mark')).random(5)
    d = seeded_rng(SeedSpec(2, 'img/noise')).random(5)
    assert np.array_equal(a, b)
    assert not np.array_equal(a, c)
    assert not np.array_equal(a, d)


def test_seed_spec_child():
    assert SeedSpec(0, 'img1').child('noise') == SeedSpec(0, 'img1/noise')


def test_luma_of_pure_red():
    red = Image(np.tile(np.array([1.0, 0.0, 0.0], dtype=np.float32), (2, 2, 1)))
    assert to_luma_ycbcr(red) == pytest.approx(np.full((2, 2), 0.299))


def test_psnr_of_constant_offset():
    a = constant_image(0.5)
    b = constant_image(0.5 + 10 / 255)
    assert psnr(a, b) == pytest.approx(28.1308, abs=1e-3)
    assert psnr(a, b, on='luma') == pytest.approx(28.1308, abs=1e-3)


def test_psnr_identical_is_inf(an_image):
    assert psnr(an_image, an_image) == math.inf


def test_psnr_shape_mismatch():
    with pytest.raises(MetricException):
        psnr(constant_image(0.5, 32, 32), constant_image(0.5, 32, 16))


def test_ssim_identical(an_image):
    assert ssim_y(an_image, an_image) == pytest.approx(1.0)
    assert ssim_y(constant_image(0.5), constant_image(0.5)) == pytest.approx(1.0)


def test_ssim_drops_with_noise(an_image):
    rng = np.random.default_rng(0)
    noisy = an_image.with_pixels(np.clip(an_image.pixels + rng.normal(0, 0.1, an_image.shape), 0, 1))
    assert ssim_y(noisy, an_image) < 0.9


def reference_ssim(a: np.ndarray, b: np.ndarray) -> float:
    """Windowed SSIM written out with cv2 filters, on single channel [0, 1] data"""
    c1, c2 = 0.01 ** 2, 0.03 ** 2
    kernel = cv2.getGaussianKernel(11, 1.5)
    window = np.outer(kernel, kernel.transpose())

    def blur(x):
        return cv2.filter2D(x, -1, window)[5:-5, 5:-5]

    mu_a, mu_b = blur(a), blur(b)
    var_a = blur(a * a) - mu_a ** 2
    var_b = blur(b * b) - mu_b ** 2
    cov = blur(a * b) - mu_a * mu_b
    ssim_map = ((2 * mu_a * mu_b + c1) * (2 * cov + c2)
                / ((mu_a ** 2 + mu_b ** 2 + c1) * (var_a + var_b + c2)))
    return float(ssim_map.mean())


@pytest.mark.parametrize("index", range(20))
def test_ssim_matches_reference(index):
    clean = gradient_image(48, 40, seed=index)
    rng = np.random.default_rng(100 + index)
    sigma = 0.02 + 0.01 * index
    noisy = clean.with_pixels(np.clip(clean.pixels + rng.normal(0, sigma, clean.shape), 0, 1)
                              .astype(np.float32))
    expected = reference_ssim(to_luma_ycbcr(noisy), to_luma_ycbcr(clean))
    assert ssim_y(noisy, clean) == pytest.approx(expected, abs=1e-4)


def test_ssim_of_inverted_image(an_image):
    inverted = an_image.with_pixels(1.0 - an_image.pixels)
    assert ssim_y(inverted, an_image) < 0.5
    assert ssim_y(inverted, an_image) == pytest.approx(
        reference_ssim(to_luma_ycbcr(inverted), to_luma_ycbcr(an_image)), abs=1e-4)


def test_ssim_too_small():
    with pytest.raises(MetricException):
        ssim_y(constant_image(0.5, 8, 8), constant_image(0.5, 8, 8))


def test_lpips_absent_without_metric(an_image):
    assert lpips(an_image, an_image, None) is None


def test_compare_without_lpips(an_image):
    report = compare(an_image.with_pixels(an_image.pixels * 0.9), an_image, MetricsConfig(lpips=False))
    assert report.lpips is None
    assert 0 < report.ssim < 1
    assert report.to_dict()['id'] == 'an_image'


def test_tensor_conversion(an_image):
    tensor = image_to_tensor(an_image)
    assert tuple(tensor.shape) == (1, 3, 64, 64)
    assert np.array_equal(tensor_to_image(tensor).pixels, an_image.pixels)


@pytest.mark.parametrize("bit_depth, tolerance", [(8, 0.5 / 255), (16, 0.5 / 65535)])
def test_save_load_precision(tmp_path, an_image, bit_depth, tolerance):
    path = tmp_path / 'img.png'
    save_image(an_image, path, bit_depth=bit_depth)
    loaded = load_image(path)
    assert loaded.id == 'img'
    assert np.abs(loaded.pixels - an_image.pixels).max() <= tolerance + 1e-6


def test_noisy_range_survives_16_bit(tmp_path):
    pixels = np.array([[[-0.2, 0.5, 1.3]]], dtype=np.float32).repeat(4, 0).repeat(4, 1)
    path = tmp_path / 'noisy.png'
    save_image(Image(pixels), path, bit_depth=16, value_range=(-1.0, 2.0))
    loaded = load_image(path, value_range=(-1.0, 2.0))
    assert np.abs(loaded.pixels - pixels).max() < 1e-4


def test_default_range_clamps(tmp_path):
    path = tmp_path / 'clamped.png'
    save_image(constant_image(1.4, 4, 4), path)
    assert load_image(path).pixels.max() == pytest.approx(1.0)


def test_load_grayscale(tmp_path):
    path = tmp_path / 'gray.png'
    cv2.imwrite(str(path), np.full((5, 6), 255, dtype=np.uint8))
    loaded = load_image(path)
    assert loaded.shape == (5, 6, 3)
    assert loaded.pixels.min() == pytest.approx(1.0)


def test_load_keeps_rgb_order(tmp_path):
    pixels = np.zeros((4, 4, 3), dtype=np.float32)
    pixels[..., 0] = 1.0
    path = tmp_path / 'red.png'
    save_image(Image(pixels), path)
    loaded = load_image(path)
    assert loaded.pixels[0, 0].tolist() == [1.0, 0.0, 0.0]


def test_load_missing(tmp_path):
    with pytest.raises(ImageIOException):
        load_image(tmp_path / 'missing.png')


def test_load_garbage(tmp_path):
    path = tmp_path / 'garbage.png'
    path.write_bytes(b'not a png')
    with pytest.raises(ImageIOException):
        load_image(path)


def test_bad_bit_depth(tmp_path):
    with pytest.raises(ImageIOException):
        save_image(gradient_image(), tmp_path / 'x.png', bit_depth=12)
