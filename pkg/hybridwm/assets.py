"""The twelve built-in watermark templates: RGBA images with soft-edged alpha.

Six text marks (three strings at regular and bold weight), three geometric
logos and three text+logo combinations.
"""
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import List

import cv2
import numpy as np
from PIL import Image as PILImage, ImageDraw, ImageFont

from hybridwm.decorators import except_image_io_error
from hybridwm.exceptions import HybridWMException

logger = logging.getLogger(__name__)

TEXTS = (('SAMPLE', 'sample'), ('(c) PHOTO', 'copyright'), ('watermark.io', 'url'))
FONT_SIZE = 64
ALPHA_BLUR_SIGMA = 1.2


class AssetException(HybridWMException):
    pass


@dataclass
class WatermarkAsset:
    """A watermark template. rgba is h x w x 4 float in [0, 1]; the alpha channel
    is the spatial opacity template and is 0 outside the mark"""

    rgba: np.ndarray
    name: str

    def __post_init__(self):
        if self.rgba.ndim != 3 or self.rgba.shape[2] != 4:
            raise AssetException(f"Watermark '{self.name}' must be h x w x 4, got {self.rgba.shape}")

    @property
    def rgb(self) -> np.ndarray:
        return self.rgba[..., :3]

    @property
    def alpha(self) -> np.ndarray:
        return self.rgba[..., 3]

    @property
    def height(self) -> int:
        return self.rgba.shape[0]

    @property
    def width(self) -> int:
        return self.rgba.shape[1]

    def __str__(self):
        return f"WatermarkAsset '{self.name}' {self.height}x{self.width}"


def _font(size: int):
    try:
        return ImageFont.truetype('DejaVuSans.ttf', size)
    except OSError:
        try:
            return ImageFont.load_default(size=size)
        except TypeError:  # Pillow < 10.1 has a fixed-size bitmap font only
            return ImageFont.load_default()


def _finish(mask: PILImage.Image, color, name: str) -> WatermarkAsset:
    """Crop mask to its content, soften the edge and attach a flat colour"""
    box = mask.getbbox()
    if box is None:
        raise AssetException(f"Rendering '{name}' produced an empty mask")
    left, top, right, bottom = box
    pad = 4
    alpha = np.asarray(mask, dtype=np.float32)[max(top - pad, 0):bottom + pad,
                                               max(left - pad, 0):right + pad] / 255.0
    alpha = np.clip(cv2.GaussianBlur(alpha, (0, 0), sigmaX=ALPHA_BLUR_SIGMA), 0.0, 1.0)
    rgb = np.broadcast_to(np.asarray(color, dtype=np.float32), alpha.shape + (3,))
    return WatermarkAsset(rgba=np.dstack([rgb, alpha]).astype(np.float32), name=name)


def render_text(text: str, bold: bool, color, name: str) -> WatermarkAsset:
    font = _font(FONT_SIZE)
    canvas = PILImage.new('L', (FONT_SIZE * len(text), FONT_SIZE * 2), 0)
    draw = ImageDraw.Draw(canvas)
    draw.text((FONT_SIZE // 4, FONT_SIZE // 4), text, fill=255, font=font,
              stroke_width=3 if bold else 0, stroke_fill=255)
    return _finish(canvas, color, name)


def render_logo(kind: str, color, name: str, size: int = 160) -> WatermarkAsset:
    canvas = PILImage.new('L', (size, size), 0)
    draw = ImageDraw.Draw(canvas)
    m = size // 10
    if kind == 'ring':
        draw.ellipse([m, m, size - m, size - m], outline=255, width=size // 8)
    elif kind == 'triangle':
        draw.polygon([(size // 2, m), (size - m, size - m), (m, size - m)], fill=255)
        draw.polygon([(size // 2, 4 * m), (size - 3 * m, size - 2 * m), (3 * m, size - 2 * m)], fill=0)
    elif kind == 'star':
        centre = np.array([size / 2, size / 2])
        angles = np.pi / 2 + np.arange(10) * np.pi / 5
        radii = np.where(np.arange(10) % 2 == 0, size / 2 - m, size / 5)
        points = centre + np.stack([np.cos(angles) * radii, -np.sin(angles) * radii], axis=1)
        draw.polygon([tuple(p) for p in points], fill=255)
    else:
        raise AssetException(f"Unknown logo kind '{kind}'")
    return _finish(canvas, color, name)


def render_combo(kind: str, text: str, color, name: str) -> WatermarkAsset:
    """Logo on the left, text on the right"""
    logo = render_logo(kind, (1, 1, 1), 'tmp', size=FONT_SIZE * 2)
    word = render_text(text, False, (1, 1, 1), 'tmp')
    height = max(logo.height, word.height)
    canvas = np.zeros((height, logo.width + word.width + 8), dtype=np.float32)
    top = (height - logo.height) // 2
    canvas[top:top + logo.height, :logo.width] = logo.alpha
    top = (height - word.height) // 2
    canvas[top:top + word.height, logo.width + 8:] = word.alpha
    mask = PILImage.fromarray(np.round(canvas * 255).astype(np.uint8))
    return _finish(mask, color, name)


def render_builtin_assets() -> List[WatermarkAsset]:
    """The twelve built-in watermark templates, always in the same order"""
    white, grey, black = (1.0, 1.0, 1.0), (0.6, 0.6, 0.6), (0.05, 0.05, 0.05)
    red, blue, yellow = (0.85, 0.1, 0.1), (0.1, 0.3, 0.9), (0.95, 0.85, 0.1)
    assets = []
    for (text, slug), color in zip(TEXTS, (white, grey, black)):
        assets.append(render_text(text, False, color, f"text_{slug}_regular"))
        assets.append(render_text(text, True, color, f"text_{slug}_bold"))
    for kind, color in zip(('ring', 'triangle', 'star'), (red, blue, yellow)):
        assets.append(render_logo(kind, color, f"logo_{kind}"))
    for kind, text, color in zip(('ring', 'triangle', 'star'), ('STOCK', 'DRAFT', 'PREVIEW'),
                                 (white, yellow, grey)):
        assets.append(render_combo(kind, text, color, f"combo_{kind}_{text.lower()}"))
    return assets


@except_image_io_error(AssetException)
def write_assets(assets: List[WatermarkAsset], asset_dir) -> List[Path]:
    """Save as 8-bit RGBA PNG named '<index>_<name>.png' so sorting keeps the order"""
    asset_dir = Path(asset_dir)
    asset_dir.mkdir(parents=True, exist_ok=True)
    paths = []
    for index, asset in enumerate(assets):
        path = asset_dir / f"{index:02d}_{asset.name}.png"
        codes = np.round(np.clip(asset.rgba, 0, 1) * 255).astype(np.uint8)
        if not cv2.imwrite(str(path), cv2.cvtColor(codes, cv2.COLOR_RGBA2BGRA)):
            raise AssetException(f"Could not write watermark '{path}'")
        paths.append(path)
    logger.info(f"Wrote {len(paths)} watermark templates to {asset_dir}")
    return paths


@except_image_io_error(AssetException)
def load_assets(asset_dir) -> List[WatermarkAsset]:
    """Load every PNG in asset_dir, sorted by filename. Images without alpha get
    a fully opaque matte

    Raises
    ------
    AssetException
        When the directory holds no PNGs or one cannot be read
    """
    paths = sorted(Path(asset_dir).glob('*.png'))
    if not paths:
        raise AssetException(f"No watermark PNGs found in '{asset_dir}'")
    assets = []
    for path in paths:
        raw = cv2.imread(str(path), cv2.IMREAD_UNCHANGED)
        if raw is None:
            raise AssetException(f"Could not read watermark '{path}'")
        peak = 65535.0 if raw.dtype == np.uint16 else 255.0
        unit = raw.astype(np.float32) / peak
        if unit.ndim == 2:
            unit = np.dstack([unit] * 3 + [np.ones_like(unit)])
        elif unit.shape[2] == 3:
            unit = np.dstack([cv2.cvtColor(unit, cv2.COLOR_BGR2RGB), np.ones(unit.shape[:2], np.float32)])
        else:
            unit = cv2.cvtColor(unit, cv2.COLOR_BGRA2RGBA)
        name = path.stem.split('_', 1)[-1] if path.stem[:2].isdigit() else path.stem
        assets.append(WatermarkAsset(rgba=unit, name=name))
    return assets
