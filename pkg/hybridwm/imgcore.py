"""Image data model, colour conversion, quality metrics, keyed randomness and
PNG file I/O. Everything else in hybridwm passes Images around.
"""
import hashlib
import logging
import math
from pathlib import Path
from dataclasses import dataclass
from typing import Optional, Tuple

import cv2
import numpy as np
import torch
from skimage.metrics import mean_squared_error, structural_similarity

from hybridwm.config import MetricsConfig
from hybridwm.decorators import except_image_io_error
from hybridwm.exceptions import HybridWMException

logger = logging.getLogger(__name__)

# ITU-R BT.601 full range
LUMA_WEIGHTS = np.array([0.299, 0.587, 0.114])
SSIM_SIGMA = 1.5
# gaussian window radius is int(truncate * sigma + 0.5) = 5, so 11x11
SSIM_WINDOW = 11
UNIT_RANGE = (0.0, 1.0)


class ImageIOException(HybridWMException):
    pass


class MetricException(HybridWMException):
    pass


@dataclass
class Image:
    """An RGB image as H x W x 3 float array.

    Values decoded from file lie in [0, 1]. Noisy intermediates may leave that range.
    """

    pixels: np.ndarray
    id: str = ''

    def __post_init__(self):
        if self.pixels.ndim != 3 or self.pixels.shape[2] != 3:
            raise ImageIOException(f"Image '{self.id}' must be H x W x 3, got {self.pixels.shape}")
        if self.pixels.shape[0] < 1 or self.pixels.shape[1] < 1:
            raise ImageIOException(f"Image '{self.id}' is empty: {self.pixels.shape}")

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    @property
    def shape(self) -> Tuple[int, int, int]:
        return self.pixels.shape

    def clamped(self) -> 'Image':
        return Image(np.clip(self.pixels, 0.0, 1.0), id=self.id)

    def with_pixels(self, pixels: np.ndarray) -> 'Image':
        return Image(pixels, id=self.id)

    def __str__(self):
        return f"Image '{self.id}' {self.height}x{self.width}"


@dataclass(frozen=True)
class SeedSpec:
    """Keys a random stream. Identical (global_seed, stream_id) always yields an
    identical stream, whatever the iteration order or number of workers.
    """

    global_seed: int
    stream_id: str = ''

    def child(self, suffix) -> 'SeedSpec':
        """Stream for a sub-task, like SeedSpec(0, 'img1').child('noise')"""
        return SeedSpec(self.global_seed, f"{self.stream_id}/{suffix}")

    def entropy(self) -> int:
        key = f"{self.global_seed}:{self.stream_id}".encode('utf-8')
        return int.from_bytes(hashlib.sha256(key).digest()[:16], 'little')

    def __str__(self):
        return f"{self.global_seed}:{self.stream_id}"


def seeded_rng(seed: SeedSpec) -> np.random.Generator:
    """Fresh numpy generator for this seed"""
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed.entropy())))


def to_luma_ycbcr(img: Image) -> np.ndarray:
    """Y channel of YCbCr, full-range BT.601: 0.299R + 0.587G + 0.114B"""
    return img.pixels.astype(np.float64) @ LUMA_WEIGHTS


def _check_same_shape(a: Image, b: Image):
    if a.shape != b.shape:
        raise MetricException(f"Cannot compare {a} with {b}: shapes differ")


def psnr(a: Image, b: Image, max_val: float = 1.0, on: str = 'rgb') -> float:
    """Peak signal-to-noise ratio in dB over all channels.

    Parameters
    ----------
    a: Image
    b: Image
    max_val: float, optional
        peak value. Defaults to 1.0
    on: str, optional
        'rgb' (default) or 'luma' to compare the Y channel only

    Raises
    ------
    MetricException
        When shapes differ

    Returns
    -------
    float
        math.inf when the images are identical
    """
    _check_same_shape(a, b)
    if on == 'luma':
        mse = mean_squared_error(to_luma_ycbcr(a), to_luma_ycbcr(b))
    else:
        mse = mean_squared_error(a.pixels.astype(np.float64), b.pixels.astype(np.float64))
    if mse == 0:
        return math.inf
    return 10 * math.log10(max_val ** 2 / mse)


def ssim_y(a: Image, b: Image) -> float:
    """Mean SSIM over the luma channel, 11x11 gaussian window, sigma 1.5, K1=0.01, K2=0.03"""
    _check_same_shape(a, b)
    if min(a.height, a.width) < SSIM_WINDOW:
        raise MetricException(f"SSIM needs at least {SSIM_WINDOW}x{SSIM_WINDOW} pixels, got {a}")
    return float(structural_similarity(
        to_luma_ycbcr(a), to_luma_ycbcr(b), data_range=1.0,
        gaussian_weights=True, sigma=SSIM_SIGMA, use_sample_covariance=False,
        K1=0.01, K2=0.03))


def image_to_tensor(img: Image, device=None) -> torch.Tensor:
    """H x W x 3 Image to 1 x 3 x H x W float32 tensor"""
    tensor = torch.from_numpy(np.ascontiguousarray(img.pixels, dtype=np.float32))
    return tensor.permute(2, 0, 1).unsqueeze(0).to(device)


def tensor_to_image(tensor: torch.Tensor, id: str = '') -> Image:
    """1 x 3 x H x W or 3 x H x W tensor to Image"""
    if tensor.dim() == 4:
        tensor = tensor[0]
    return Image(tensor.detach().cpu().permute(1, 2, 0).numpy().astype(np.float32), id=id)


class LPIPSMetric:
    """Learned perceptual distance through the lpips package. Optional: use
    try_create() to get None instead of an error when it is not installed or
    its weights cannot be loaded
    """

    def __init__(self, net: str = 'alex', device=None):
        import lpips  # optional extra
        self.device = device or torch.device('cpu')
        self.model = lpips.LPIPS(net=net, verbose=False).to(self.device).eval()

    @classmethod
    def try_create(cls, net: str = 'alex', device=None) -> Optional['LPIPSMetric']:
        try:
            return cls(net=net, device=device)
        except Exception as e:
            logger.warning(f"LPIPS unavailable, metric will be absent: {e}")
            return None

    @torch.no_grad()
    def distance(self, a: Image, b: Image) -> float:
        _check_same_shape(a, b)
        # lpips expects inputs in [-1, 1]
        ta = image_to_tensor(a.clamped(), self.device) * 2 - 1
        tb = image_to_tensor(b.clamped(), self.device) * 2 - 1
        return float(self.model(ta, tb).item())


def lpips(a: Image, b: Image, metric: Optional[LPIPSMetric]) -> Optional[float]:
    """LPIPS distance, or None when no metric is available"""
    if metric is None:
        return None
    return metric.distance(a, b)


@dataclass
class MetricReport:
    """Quality of one restored image against its reference. lpips is None when unavailable"""

    psnr: float
    ssim: float
    lpips: Optional[float] = None
    id: str = ''

    def to_dict(self) -> dict:
        return {'id': self.id, 'psnr': self.psnr, 'ssim': self.ssim, 'lpips': self.lpips}


def compare(a: Image, reference: Image, cfg: MetricsConfig = None,
            lpips_metric: Optional[LPIPSMetric] = None) -> MetricReport:
    """All metrics of a against reference"""
    cfg = cfg or MetricsConfig()
    return MetricReport(psnr=psnr(a, reference, on=cfg.psnr_on),
                        ssim=ssim_y(a, reference),
                        lpips=lpips(a, reference, lpips_metric),
                        id=a.id or reference.id)


@except_image_io_error(ImageIOException)
def load_image(path, value_range: Tuple[float, float] = UNIT_RANGE, id: str = None) -> Image:
    """Load an 8 or 16 bit PNG.

    Parameters
    ----------
    path: str or Path
    value_range: Tuple[float, float], optional
        (lo, hi) that the full code range maps to. Defaults to (0, 1)
    id: str, optional
        id of the returned Image. Defaults to the file stem

    Raises
    ------
    ImageIOException
        When the file cannot be read or decoded

    Returns
    -------
    Image
    """
    raw = cv2.imread(str(path), cv2.IMREAD_UNCHANGED)
    if raw is None:
        raise ImageIOException(f"Could not read image '{path}'")
    if raw.dtype == np.uint8:
        unit = raw.astype(np.float32) / 255.0
    elif raw.dtype == np.uint16:
        unit = raw.astype(np.float32) / 65535.0
    else:
        raise ImageIOException(f"Unsupported pixel type {raw.dtype} in '{path}'")

    if unit.ndim == 2:
        unit = np.stack([unit] * 3, axis=-1)
    elif unit.shape[2] == 4:
        unit = cv2.cvtColor(unit, cv2.COLOR_BGRA2RGB)
    else:
        unit = cv2.cvtColor(unit, cv2.COLOR_BGR2RGB)

    lo, hi = value_range
    if id is None:
        id = Path(path).stem
    return Image(unit * (hi - lo) + lo, id=id)


@except_image_io_error(ImageIOException)
def save_image(img: Image, path, bit_depth: int = 8, value_range: Tuple[float, float] = UNIT_RANGE):
    """Save as PNG. Values are mapped from value_range to the code range and
    clamped there, so with the default range anything outside [0, 1] is clipped

    Raises
    ------
    ImageIOException
        When bit_depth is not 8 or 16 or the file cannot be written
    """
    if bit_depth not in (8, 16):
        raise ImageIOException(f"Unsupported bit depth {bit_depth}")
    lo, hi = value_range
    unit = np.clip((img.pixels.astype(np.float64) - lo) / (hi - lo), 0.0, 1.0)
    peak, dtype = (255, np.uint8) if bit_depth == 8 else (65535, np.uint16)
    codes = np.round(unit * peak).astype(dtype)
    if not cv2.imwrite(str(path), cv2.cvtColor(codes, cv2.COLOR_RGB2BGR)):
        raise ImageIOException(f"Could not write image '{path}'")

