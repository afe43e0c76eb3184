"""Builds the self-supervised training corpus. Composites watermarks onto clean
images, adds Gaussian noise and makes the re-watermarked target y_w. Every
sample is a pure function of (inputs, seed) and is recorded in a JSON-lines
manifest.
"""
import hashlib
import json
import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from itertools import product
from pathlib import Path
from typing import Callable, Dict, List, Optional, Tuple

import cv2
import numpy as np
from tqdm import tqdm

from hybridwm.assets import WatermarkAsset, load_assets
from hybridwm.config import CorruptionRanges
from hybridwm.decorators import AccessCounter, counted_access
from hybridwm.exceptions import HybridWMException
from hybridwm.imgcore import Image, SeedSpec, load_image, save_image, seeded_rng

logger = logging.getLogger(__name__)

# Every read of a SamplePair's clean image goes through this counter
CLEAN_READS = AccessCounter('y_clean')

IMAGE_SUFFIXES = ('.png', '.jpg', '.jpeg', '.bmp', '.tif', '.tiff')
NOISY_RANGE = (-1.0, 2.0)
UNIT_RANGE = (0.0, 1.0)
MANIFEST_NAME = 'manifest.jsonl'


class SynthException(HybridWMException):
    pass


class PlacementException(SynthException):
    pass


class ManifestParseException(SynthException):
    pass


class ManifestObject:
    """Something that is written to and read from a manifest line"""

    @classmethod
    def get_item(cls, dict_in: dict, key: str, raise_error: bool = True):
        """Get item from dict, raise ManifestParseException or return None if not found"""
        try:
            return dict_in[key]
        except KeyError:
            if raise_error:
                raise ManifestParseException(f"Could not find key '{key}' in '{dict_in}'")
        except TypeError:
            raise ManifestParseException(f"Expected a mapping for {cls.__name__}, got '{dict_in}'")


@dataclass
class CorruptionSpec(ManifestObject):
    """One watermark placement plus the noise level that goes with it.

    scale is the mark's long side as a fraction of the image's short side.
    coverage is the footprint area as a fraction of the image area.
    footprint is the (height, width) of the scaled mark in pixels.
    """

    transparency: float
    scale: float
    coverage: float
    position: Tuple[int, int]
    watermark_index: int
    noise_sigma: float
    footprint: Tuple[int, int]

    def to_dict(self):
        return {'transparency': self.transparency, 'scale': self.scale,
                'coverage': self.coverage, 'position': list(self.position),
                'watermark_index': self.watermark_index, 'noise_sigma': self.noise_sigma,
                'footprint': list(self.footprint)}

    @classmethod
    def init_from_dict(cls, dict_in):
        return cls(transparency=float(cls.get_item(dict_in, 'transparency')),
                   scale=float(cls.get_item(dict_in, 'scale')),
                   coverage=float(cls.get_item(dict_in, 'coverage')),
                   position=tuple(cls.get_item(dict_in, 'position')),
                   watermark_index=int(cls.get_item(dict_in, 'watermark_index')),
                   noise_sigma=float(cls.get_item(dict_in, 'noise_sigma')),
                   footprint=tuple(cls.get_item(dict_in, 'footprint')))

    def window(self) -> Tuple[slice, slice]:
        (row, col), (h, w) = self.position, self.footprint
        return slice(row, row + h), slice(col, col + w)


@dataclass
class TrainingPair:
    """What the training path sees of a sample. Holds no clean image"""

    x_wn: Image
    x_w: Image
    y_w: Image
    id: str = ''


class SamplePair:
    """A full synthesized sample. The clean image is for evaluation only and
    every read of it is counted in CLEAN_READS"""

    def __init__(self, x_wn: Image, x_w: Image, y_w: Image, spec: CorruptionSpec,
                 extra_spec: CorruptionSpec, y_clean: Optional[Image] = None,
                 id: str = '', y_clean_loader: Optional[Callable[[], Image]] = None):
        """

        Parameters
        ----------
        y_clean: Image, optional
            Clean image, if already in memory
        y_clean_loader: Callable, optional
            Alternatively, called on first read of y_clean
        """
        self.x_wn = x_wn
        self.x_w = x_w
        self.y_w = y_w
        self.spec = spec
        self.extra_spec = extra_spec
        self.id = id
        self._y_clean = y_clean
        self._y_clean_loader = y_clean_loader

    @property
    @counted_access(CLEAN_READS)
    def y_clean(self) -> Image:
        if self._y_clean is None:
            if self._y_clean_loader is None:
                raise SynthException(f"Sample '{self.id}' has no clean image")
            self._y_clean = self._y_clean_loader()
        return self._y_clean

    def training_pair(self) -> TrainingPair:
        return TrainingPair(x_wn=self.x_wn, x_w=self.x_w, y_w=self.y_w, id=self.id)

    def __str__(self):
        return f"SamplePair '{self.id}'"


def footprint_for(asset: WatermarkAsset, scale: float, image_shape) -> Tuple[int, int]:
    """Size of asset once its long side is scale * the image's short side"""
    long_side = max(1, int(round(scale * min(image_shape[0], image_shape[1]))))
    factor = long_side / max(asset.height, asset.width)
    return max(1, int(round(asset.height * factor))), max(1, int(round(asset.width * factor)))


def scaled_mark(asset: WatermarkAsset, footprint: Tuple[int, int]) -> np.ndarray:
    """Bilinear resize of RGB and alpha together"""
    h, w = footprint
    if (h, w) == (asset.height, asset.width):
        return asset.rgba
    return cv2.resize(asset.rgba, (w, h), interpolation=cv2.INTER_LINEAR)


def composite_watermark(base: Image, asset: WatermarkAsset, spec: CorruptionSpec) -> Image:
    """out = a * W + (1 - a) * base with a = transparency * asset alpha.

    Only the footprint is touched and clamped to [0, 1]. Everything outside it
    is bit-identical to base.

    Raises
    ------
    PlacementException
        When the footprint does not fit inside base
    """
    (row, col), (h, w) = spec.position, spec.footprint
    if row < 0 or col < 0 or row + h > base.height or col + w > base.width:
        raise PlacementException(f"Footprint {spec.footprint} at {spec.position} exceeds {base}")
    mark = scaled_mark(asset, spec.footprint)
    alpha = np.float32(spec.transparency) * mark[..., 3:4]
    out = base.pixels.copy()
    window = spec.window()
    region = alpha * mark[..., :3] + (np.float32(1.0) - alpha) * out[window]
    out[window] = np.clip(region, 0.0, 1.0)
    return base.with_pixels(out)


def add_gaussian_noise(img: Image, sigma_255: float, seed: SeedSpec) -> Image:
    """Adds i.i.d. zero-mean Gaussian noise with std sigma_255 / 255. Not clamped

    Raises
    ------
    SynthException
        For a negative sigma
    """
    if sigma_255 < 0:
        raise SynthException(f"Noise sigma must be >= 0, got {sigma_255}")
    if sigma_255 == 0:
        return img.with_pixels(img.pixels.copy())
    noise = seeded_rng(seed).standard_normal(img.shape, dtype=np.float32)
    return img.with_pixels(img.pixels + noise * np.float32(sigma_255 / 255.0))


def _draw_value(rng: np.random.Generator, choices, interval) -> float:
    if interval is not None:
        return float(rng.uniform(interval[0], interval[1]))
    return float(choices[rng.integers(len(choices))])


def draw_sigma(rng: np.random.Generator, ranges: CorruptionRanges) -> float:
    return _draw_value(rng, ranges.sigmas, ranges.sigma_interval)


def draw_spec(rng: np.random.Generator, image_shape, assets: List[WatermarkAsset],
              ranges: CorruptionRanges, extra: bool = False) -> CorruptionSpec:
    """Draw a placement within ranges. Draws whose coverage exceeds the bound
    are rejected and redrawn.

    Parameters
    ----------
    extra: bool, optional
        True for the additional watermark of y_w: uses extra_transparencies if
        set, ignores fixed_position and carries no noise. Defaults to False

    Raises
    ------
    PlacementException
        When no valid placement is found within ranges.max_placement_tries
    """
    if not assets:
        raise SynthException("Need at least one watermark asset")
    indices = ranges.asset_indices if ranges.asset_indices is not None else range(len(assets))
    indices = list(indices)
    index = int(indices[rng.integers(len(indices))])
    if extra and ranges.extra_transparencies is not None:
        transparency = _draw_value(rng, ranges.extra_transparencies, None)
    else:
        transparency = _draw_value(rng, ranges.transparencies, ranges.transparency_interval)
    sigma = 0.0 if extra else draw_sigma(rng, ranges)

    height, width = image_shape[0], image_shape[1]
    for _ in range(ranges.max_placement_tries):
        scale = float(rng.uniform(*ranges.scale_interval))
        h, w = footprint_for(assets[index], scale, image_shape)
        coverage = h * w / (height * width)
        if h > height or w > width or coverage > ranges.coverage_max:
            continue
        if ranges.fixed_position is not None and not extra:
            position = tuple(int(v) for v in ranges.fixed_position)
            if position[0] + h > height or position[1] + w > width:
                continue
        else:
            position = (int(rng.integers(height - h + 1)), int(rng.integers(width - w + 1)))
        return CorruptionSpec(transparency=transparency, scale=scale, coverage=coverage,
                              position=position, watermark_index=index, noise_sigma=sigma,
                              footprint=(h, w))
    raise PlacementException(
        f"No placement of '{assets[index].name}' in a {height}x{width} image within "
        f"scale {ranges.scale_interval} and coverage <= {ranges.coverage_max} "
        f"after {ranges.max_placement_tries} tries")


def make_sample(y_clean: Image, assets: List[WatermarkAsset], ranges: CorruptionRanges,
                seed: SeedSpec, id: str = None) -> SamplePair:
    """Synthesize one sample from a clean image.

    x_w is y_clean with one watermark, x_wn is x_w plus noise and y_w is x_w with
    an additional, independently drawn watermark. With pairing_mode
    'independent' the additional watermark goes onto y_clean instead.
    """
    id = id if id is not None else y_clean.id
    spec = draw_spec(seeded_rng(seed.child('mark')), y_clean.shape, assets, ranges)
    x_w = composite_watermark(y_clean, assets[spec.watermark_index], spec)
    x_wn = add_gaussian_noise(x_w, spec.noise_sigma, seed.child('noise'))
    extra_spec = draw_spec(seeded_rng(seed.child('extra')), y_clean.shape, assets, ranges, extra=True)
    base = x_w if ranges.pairing_mode == 'literal' else y_clean
    y_w = composite_watermark(base, assets[extra_spec.watermark_index], extra_spec)
    return SamplePair(x_wn=x_wn, x_w=x_w, y_w=y_w, spec=spec, extra_spec=extra_spec,
                      y_clean=y_clean, id=id)


def resample_pair(x_w: Image, record: 'ManifestRecord', assets: List[WatermarkAsset],
                  ranges: CorruptionRanges, seed: int, epoch: int) -> TrainingPair:
    """Fresh noise and a fresh additional watermark for one epoch, both drawn
    from the stored noise-free watermarked image. Never touches y_clean
    """
    stream = SeedSpec(seed, f"{record.id}/epoch{epoch}")
    sigma = draw_sigma(seeded_rng(stream.child('sigma')), ranges)
    x_wn = add_gaussian_noise(x_w, sigma, stream.child('noise'))
    extra_spec = draw_spec(seeded_rng(stream.child('extra')), x_w.shape, assets, ranges, extra=True)
    y_w = composite_watermark(x_w, assets[extra_spec.watermark_index], extra_spec)
    return TrainingPair(x_wn=x_wn, x_w=x_w, y_w=y_w, id=record.id)


@dataclass
class ManifestRecord(ManifestObject):
    """One sample on disk. paths are relative to the manifest's directory"""

    id: str
    split: str
    paths: Dict[str, str]
    spec: CorruptionSpec
    extra_spec: CorruptionSpec
    seed: str
    source: str = ''
    noise_range: Tuple[float, float] = NOISY_RANGE

    @property
    def sigma(self) -> float:
        return self.spec.noise_sigma

    @property
    def alpha_w(self) -> float:
        return self.spec.transparency

    @property
    def has_clean(self) -> bool:
        return 'y_clean' in self.paths

    def to_dict(self):
        return {'id': self.id, 'split': self.split, 'paths': dict(self.paths),
                'spec': self.spec.to_dict(), 'extra_spec': self.extra_spec.to_dict(),
                'seed': self.seed, 'source': self.source, 'noise_range': list(self.noise_range)}

    @classmethod
    def init_from_dict(cls, dict_in):
        return cls(id=cls.get_item(dict_in, 'id'),
                   split=cls.get_item(dict_in, 'split'),
                   paths=dict(cls.get_item(dict_in, 'paths')),
                   spec=CorruptionSpec.init_from_dict(cls.get_item(dict_in, 'spec')),
                   extra_spec=CorruptionSpec.init_from_dict(cls.get_item(dict_in, 'extra_spec')),
                   seed=cls.get_item(dict_in, 'seed'),
                   source=cls.get_item(dict_in, 'source', raise_error=False) or '',
                   noise_range=tuple(cls.get_item(dict_in, 'noise_range', raise_error=False)
                                     or NOISY_RANGE))

    def load(self, root: Path, key: str) -> Image:
        if key not in self.paths:
            raise SynthException(f"Sample '{self.id}' has no '{key}' image")
        value_range = self.noise_range if key == 'x_wn' else UNIT_RANGE
        return load_image(Path(root) / self.paths[key], value_range=value_range, id=self.id)

    def load_training(self, root: Path) -> TrainingPair:
        """x_wn, x_w and y_w only"""
        return TrainingPair(x_wn=self.load(root, 'x_wn'), x_w=self.load(root, 'x_w'),
                            y_w=self.load(root, 'y_w'), id=self.id)

    def load_sample(self, root: Path) -> SamplePair:
        """Full sample. y_clean is read from disk on first access"""
        loader = (lambda: self.load(root, 'y_clean')) if self.has_clean else None
        return SamplePair(x_wn=self.load(root, 'x_wn'), x_w=self.load(root, 'x_w'),
                          y_w=self.load(root, 'y_w'), spec=self.spec, extra_spec=self.extra_spec,
                          id=self.id, y_clean_loader=loader)


class Manifest:
    """Ordered set of ManifestRecords plus the directory their paths are relative to"""

    def __init__(self, records: List[ManifestRecord], root):
        self.records = list(records)
        self.root = Path(root)

    def __len__(self):
        return len(self.records)

    def __iter__(self):
        return iter(self.records)

    def __getitem__(self, index) -> ManifestRecord:
        return self.records[index]

    def __str__(self):
        return f"Manifest at {self.root} with {len(self)} records"

    def split(self, name: str) -> 'Manifest':
        return Manifest([r for r in self.records if r.split == name], self.root)

    def to_text(self) -> str:
        return ''.join(json.dumps(r.to_dict(), sort_keys=True) + '\n' for r in self.records)

    def write(self, path=None) -> Path:
        """Write as JSON lines, atomically. Defaults to <root>/manifest.jsonl"""
        path = Path(path) if path else self.root / MANIFEST_NAME
        tmp = path.with_name(path.name + '.tmp')
        tmp.write_text(self.to_text(), encoding='utf-8')
        os.replace(tmp, path)
        return path

    @classmethod
    def read(cls, path) -> 'Manifest':
        """Read a manifest file, or <path>/manifest.jsonl for a directory

        Raises
        ------
        ManifestParseException
            When the file is missing or a line cannot be parsed
        """
        path = Path(path)
        if path.is_dir():
            path = path / MANIFEST_NAME
        try:
            lines = path.read_text(encoding='utf-8').splitlines()
        except OSError as e:
            raise ManifestParseException(f"Could not read manifest '{path}': {e}")
        records = []
        for number, line in enumerate(lines, start=1):
            if not line.strip():
                continue
            try:
                records.append(ManifestRecord.init_from_dict(json.loads(line)))
            except json.JSONDecodeError as e:
                raise ManifestParseException(f"{path} line {number}: {e}")
        return cls(records, path.parent)

    def digest(self) -> str:
        """SHA-256 over the manifest text and every file it references"""
        sha = hashlib.sha256(self.to_text().encode('utf-8'))
        for record in self.records:
            for key in sorted(record.paths):
                sha.update((self.root / record.paths[key]).read_bytes())
        return sha.hexdigest()


def list_images(image_dir) -> List[Path]:
    image_dir = Path(image_dir)
    if not image_dir.is_dir():
        raise SynthException(f"Image directory '{image_dir}' does not exist")
    return sorted(p for p in image_dir.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)


@dataclass
class _Job:
    image_path: Path
    sample_id: str
    ranges: CorruptionRanges


def _plan_jobs(image_paths, n_assets, ranges, split, variants) -> List[_Job]:
    jobs = []
    for image_path in image_paths:
        stem = image_path.stem
        if split == 'test':
            indices = ranges.asset_indices if ranges.asset_indices is not None else range(n_assets)
            for index, sigma, alpha in product(indices, ranges.sigmas, ranges.transparencies):
                pinned = replace(ranges, asset_indices=(index,), sigmas=(sigma,), sigma_interval=None,
                                 transparencies=(alpha,), transparency_interval=None)
                jobs.append(_Job(image_path, f"{stem}_w{index:02d}_s{sigma:g}_a{alpha:g}", pinned))
        else:
            for variant in range(variants):
                jobs.append(_Job(image_path, f"{stem}_v{variant:02d}", ranges))
    return jobs


def _run_job(job: _Job, assets, out_dir: Path, split: str, seed: int) -> ManifestRecord:
    y_clean = load_image(job.image_path, id=job.sample_id)
    stream = SeedSpec(seed, job.sample_id)
    sample = make_sample(y_clean, assets, job.ranges, stream, id=job.sample_id)

    paths = {key: f"{split}/{key}/{job.sample_id}.png" for key in ('x_wn', 'x_w', 'y_w')}
    save_image(sample.x_wn, out_dir / paths['x_wn'], bit_depth=16, value_range=NOISY_RANGE)
    save_image(sample.x_w, out_dir / paths['x_w'], bit_depth=16)
    save_image(sample.y_w, out_dir / paths['y_w'], bit_depth=16)
    # 8-bit clamped copy for looking at, never read back
    save_image(sample.x_wn, out_dir / split / 'preview' / f"{job.sample_id}.png", bit_depth=8)
    if split == 'test':
        paths['y_clean'] = f"{split}/y_clean/{job.sample_id}.png"
        save_image(y_clean, out_dir / paths['y_clean'], bit_depth=16)

    return ManifestRecord(id=job.sample_id, split=split, paths=paths, spec=sample.spec,
                          extra_spec=sample.extra_spec, seed=str(stream),
                          source=job.image_path.name)


def build_corpus(image_dir, assets, ranges: CorruptionRanges, out_dir, seed: int,
                 split: str = 'train', variants: int = 1, workers: int = 0) -> Manifest:
    """Synthesize a corpus split and write its manifest.

    Parameters
    ----------
    image_dir: str or Path
        directory of clean RGB images
    assets: str, Path or List[WatermarkAsset]
        watermark directory, or assets already loaded
    ranges: CorruptionRanges
    out_dir: str or Path
        where PNGs and manifest.jsonl go
    seed: int
        global seed. Each sample uses the stream SeedSpec(seed, sample id)
    split: str, optional
        'train' writes `variants` random samples per image. 'test' writes one
        sample per (image, watermark, sigma, transparency) and keeps y_clean.
        Defaults to 'train'
    variants: int, optional
        samples per image for the train split. Defaults to 1
    workers: int, optional
        thread count. Output does not depend on it. Defaults to 0, no threads

    Raises
    ------
    SynthException
        On empty inputs or any failed sample. The manifest is only written when
        every sample succeeded

    Returns
    -------
    Manifest
    """
    image_paths = list_images(image_dir)
    if not image_paths:
        raise SynthException(f"No images found in '{image_dir}'")
    if not isinstance(assets, list):
        assets = load_assets(assets)
    if not assets:
        raise SynthException("Need at least one watermark asset")

    out_dir = Path(out_dir)
    jobs = _plan_jobs(image_paths, len(assets), ranges, split, variants)
    for key in ('x_wn', 'x_w', 'y_w', 'preview') + (('y_clean',) if split == 'test' else ()):
        (out_dir / split / key).mkdir(parents=True, exist_ok=True)
    logger.info(f"Synthesizing {len(jobs)} {split} samples from {len(image_paths)} images "
                f"and {len(assets)} watermarks into {out_dir}")

    def run(job):
        return _run_job(job, assets, out_dir, split, seed)

    if workers > 0:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            records = list(tqdm(pool.map(run, jobs), total=len(jobs), desc=f"synth {split}"))
    else:
        records = [run(job) for job in tqdm(jobs, desc=f"synth {split}")]

    manifest = Manifest(records, out_dir)
    manifest.write()
    return manifest
