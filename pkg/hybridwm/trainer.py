"""Optimization loop, batching, checkpoints, deterministic resume and evaluation.

Every random choice during training (epoch order, crops, flips, per-epoch
corruption) is drawn from a stream keyed by (seed, epoch, sample id). The
position in training is therefore fully described by the global step, and a
resumed run continues exactly where an uninterrupted one would be.
"""
import json
import logging
import math
from collections import OrderedDict
from dataclasses import dataclass, field
from datetime import datetime
from pathlib import Path
from typing import Dict, List, Optional

import numpy as np
import pandas as pd
import torch
from dateutil import parser as date_parser
from dateutil.tz import tzutc
from PIL import Image as PILImage
from torch.utils.data import DataLoader, Dataset, Sampler
from tqdm import tqdm

from hybridwm.config import (TrainConfig, ModelConfig, MetricsConfig, CorruptionRanges)
from hybridwm.exceptions import HybridWMException
from hybridwm.imgcore import Image, SeedSpec, seeded_rng, compare, save_image, LPIPSMetric
from hybridwm.losses import FeatureExtractor, mixed_loss
from hybridwm.network import HybridNet, infer_outputs, SIZE_MULTIPLE
from hybridwm.synth import CLEAN_READS, Manifest, ManifestRecord, TrainingPair, resample_pair

logger = logging.getLogger(__name__)

CHECKPOINT_SCHEMA = 1
LOG_FIELDS = ('step', 'epoch', 'lr', 'l_s1', 'l_s2', 'l_s3', 'l_t1', 'l_t2', 'total')
METRIC_COLUMNS = ['id', 'sigma', 'alpha_w', 'psnr', 'ssim', 'lpips']


class TrainerException(HybridWMException):
    pass


class CheckpointException(TrainerException):
    pass


def lr_schedule(cfg: TrainConfig, epoch: int) -> float:
    """lr0 * decay_factor ** (epoch // decay_every)

    Raises
    ------
    TrainerException
        For an epoch outside [0, cfg.epochs)
    """
    if not 0 <= epoch < cfg.epochs:
        raise TrainerException(f"Epoch {epoch} outside [0, {cfg.epochs})")
    return cfg.lr0 * cfg.decay_factor ** (epoch // cfg.decay_every)


def select_device(name: str = 'auto') -> torch.device:
    if name == 'auto':
        return torch.device('cuda' if torch.cuda.is_available() else 'cpu')
    return torch.device(name)


@dataclass
class Batch:
    """Stacked training tensors. Holds no clean image"""

    x_wn: torch.Tensor
    x_w: torch.Tensor
    y_w: torch.Tensor
    ids: List[str]

    def to(self, device) -> 'Batch':
        return Batch(self.x_wn.to(device), self.x_w.to(device), self.y_w.to(device), self.ids)


def collate(items: List[dict]) -> Batch:
    return Batch(x_wn=torch.stack([i['x_wn'] for i in items]),
                 x_w=torch.stack([i['x_w'] for i in items]),
                 y_w=torch.stack([i['y_w'] for i in items]),
                 ids=[i['id'] for i in items])


def image_size(path) -> tuple:
    """(height, width) from the file header only"""
    with PILImage.open(path) as img:
        width, height = img.size
    return height, width


class TrainingDataset(Dataset):
    """Random crops of the train split. Indexed by (epoch, index) so every crop
    is a pure function of seed, epoch and sample id"""

    def __init__(self, manifest: Manifest, cfg: TrainConfig, assets=None,
                 ranges: CorruptionRanges = None):
        """

        Parameters
        ----------
        manifest: Manifest
            train split. Its clean images are never opened
        cfg: TrainConfig
        assets: List[WatermarkAsset], optional
            needed with cfg.resample_per_epoch
        ranges: CorruptionRanges, optional
            needed with cfg.resample_per_epoch
        """
        self.records = list(manifest)
        self.root = manifest.root
        self.cfg = cfg
        self.assets = assets
        self.ranges = ranges
        if not self.records:
            raise TrainerException(f"No training samples in {manifest}")
        if cfg.resample_per_epoch and (not assets or ranges is None):
            raise TrainerException("Per-epoch resampling needs watermark assets and corruption ranges")
        smallest = min(min(image_size(self.root / r.paths['x_w'])) for r in self.records)
        self.crop = min(cfg.crop, smallest - smallest % SIZE_MULTIPLE)
        if self.crop < SIZE_MULTIPLE:
            raise TrainerException(f"Smallest training image side {smallest} is below {SIZE_MULTIPLE}")
        if self.crop < cfg.crop:
            logger.warning(f"Crop reduced from {cfg.crop} to {self.crop} to fit the smallest image")

    def __len__(self):
        return len(self.records)

    def load(self, record: ManifestRecord, epoch: int) -> TrainingPair:
        if self.cfg.resample_per_epoch:
            return resample_pair(record.load(self.root, 'x_w'), record, self.assets, self.ranges,
                                 self.cfg.seed, epoch)
        return record.load_training(self.root)

    def __getitem__(self, key) -> dict:
        epoch, index = key
        record = self.records[index]
        pair = self.load(record, epoch)
        rng = seeded_rng(SeedSpec(self.cfg.seed, f"crop/{epoch}/{record.id}"))
        height, width = pair.x_w.height, pair.x_w.width
        top = int(rng.integers(height - self.crop + 1))
        left = int(rng.integers(width - self.crop + 1))
        flip = self.cfg.hflip and rng.random() < 0.5
        item = {'id': record.id}
        for name in ('x_wn', 'x_w', 'y_w'):
            pixels = getattr(pair, name).pixels[top:top + self.crop, left:left + self.crop]
            if flip:
                pixels = pixels[:, ::-1]
            item[name] = torch.from_numpy(np.ascontiguousarray(pixels, dtype=np.float32)).permute(2, 0, 1)
        return item


def epoch_order(seed: int, epoch: int, n: int) -> np.ndarray:
    return seeded_rng(SeedSpec(seed, f"epoch/{epoch}")).permutation(n)


class StepBatchSampler(Sampler):
    """Yields lists of (epoch, index), starting at a global step"""

    def __init__(self, n: int, batch: int, seed: int, start_step: int, stop_step: int):
        self.n = n
        self.batch = min(batch, n)
        self.seed = seed
        self.start_step = start_step
        self.stop_step = stop_step

    @property
    def steps_per_epoch(self) -> int:
        return self.n // self.batch

    def __len__(self):
        return max(0, self.stop_step - self.start_step)

    def __iter__(self):
        order, order_epoch = None, None
        for step in range(self.start_step, self.stop_step):
            epoch, offset = divmod(step, self.steps_per_epoch)
            if epoch != order_epoch:
                order, order_epoch = epoch_order(self.seed, epoch, self.n), epoch
            indices = order[offset * self.batch:(offset + 1) * self.batch]
            yield [(epoch, int(i)) for i in indices]


@dataclass
class TrainState:
    """Everything needed to continue training bit-identically"""

    model_config: ModelConfig
    train_config: TrainConfig
    epoch: int
    step: int
    parameters: Dict[str, torch.Tensor]
    optimizer: Optional[dict] = None
    best_metric: Optional[float] = None
    saved_at: Optional[datetime] = None
    extra: dict = field(default_factory=dict)

    @property
    def cursors(self) -> dict:
        return {'epoch': self.epoch, 'step': self.step}


def save_checkpoint(state: TrainState, path) -> Path:
    """One torch.save file: header, named float32 parameters, optimizer state, cursors"""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    saved_at = datetime.now(tz=tzutc())
    archive = {
        'header': {'schema_version': CHECKPOINT_SCHEMA,
                   'model_config': state.model_config.to_dict(),
                   'train_config': state.train_config.to_dict(),
                   'epoch': state.epoch,
                   'step': state.step,
                   'saved_at': saved_at.isoformat()},
        'parameters': OrderedDict((name, t.detach().cpu().contiguous())
                                  for name, t in state.parameters.items()),
        'optimizer': state.optimizer,
        'cursors': state.cursors,
        'best_metric': state.best_metric,
        'extra': state.extra,
    }
    tmp = path.with_name(path.name + '.tmp')
    torch.save(archive, tmp)
    tmp.replace(path)
    return path


def check_shapes(parameters: Dict[str, torch.Tensor], model: torch.nn.Module):
    """
    Raises
    ------
    CheckpointException
        naming the first tensor that is missing, unexpected or shaped differently
    """
    expected = model.state_dict()
    for name, tensor in expected.items():
        if name not in parameters:
            raise CheckpointException(f"Checkpoint is missing tensor '{name}'")
        if tuple(parameters[name].shape) != tuple(tensor.shape):
            raise CheckpointException(f"Shape mismatch for '{name}': checkpoint "
                                      f"{tuple(parameters[name].shape)} vs model {tuple(tensor.shape)}")
    for name in parameters:
        if name not in expected:
            raise CheckpointException(f"Checkpoint has unexpected tensor '{name}'")


def load_checkpoint(path, model: torch.nn.Module = None) -> TrainState:
    """Read a checkpoint. With a model, validate the shape table against it and
    load the parameters into it

    Raises
    ------
    CheckpointException
        When the file cannot be read, has another schema version, or does not fit model
    """
    try:
        archive = torch.load(path, map_location='cpu', weights_only=False)
    except (OSError, RuntimeError) as e:
        raise CheckpointException(f"Could not read checkpoint '{path}': {e}")
    try:
        header = archive['header']
        version = header['schema_version']
    except (KeyError, TypeError):
        raise CheckpointException(f"'{path}' is not a checkpoint: no header")
    if version != CHECKPOINT_SCHEMA:
        raise CheckpointException(f"Checkpoint schema {version}, expected {CHECKPOINT_SCHEMA}")

    state = TrainState(model_config=ModelConfig.init_from_dict(header['model_config']),
                       train_config=TrainConfig.init_from_dict(header['train_config']),
                       epoch=header['epoch'], step=header['step'],
                       parameters=archive['parameters'], optimizer=archive.get('optimizer'),
                       best_metric=archive.get('best_metric'),
                       saved_at=date_parser.isoparse(header['saved_at']),
                       extra=archive.get('extra') or {})
    if model is not None:
        check_shapes(state.parameters, model)
        model.load_state_dict(state.parameters)
    return state


class Trainer:
    """Owns model, optimizer, data and position in training"""

    def __init__(self, model: HybridNet, manifest: Manifest, cfg: TrainConfig,
                 fx: FeatureExtractor = None, run_dir=None, assets=None,
                 ranges: CorruptionRanges = None, eval_manifest: Manifest = None,
                 metrics_cfg: MetricsConfig = None, device=None):
        """

        Parameters
        ----------
        model: HybridNet
        manifest: Manifest
            corpus. Only its 'train' split is used
        cfg: TrainConfig
        fx: FeatureExtractor, optional
            required unless cfg.alpha is 0
        run_dir: str or Path, optional
            checkpoints/ and logs/ go here. Nothing is written without it
        assets, ranges: optional
            for cfg.resample_per_epoch
        eval_manifest: Manifest, optional
            split with clean images, evaluated every cfg.eval_every epochs

        Raises
        ------
        TrainerException
            When there is no train split, or no extractor while alpha > 0
        """
        if cfg.alpha > 0 and fx is None:
            raise TrainerException(f"Texture loss weight is {cfg.alpha} but no feature extractor "
                                   f"is available. Fetch the weights or set alpha to 0")
        self.cfg = cfg
        self.device = device or select_device(cfg.device)
        self.model = model.to(self.device)
        self.fx = fx.to(self.device) if fx is not None else None
        self.dataset = TrainingDataset(manifest.split('train'), cfg, assets, ranges)
        self.optimizer = torch.optim.Adam(self.model.parameters(), lr=cfg.lr0, betas=tuple(cfg.betas),
                                          eps=cfg.eps)
        self.run_dir = Path(run_dir) if run_dir else None
        self.eval_manifest = eval_manifest
        self.metrics_cfg = metrics_cfg or MetricsConfig()
        self.step = 0
        self.best_metric = None
        self.clean_reads = 0
        self.history: List[dict] = []
        torch.backends.cudnn.benchmark = False
        torch.backends.cudnn.deterministic = True

    @property
    def steps_per_epoch(self) -> int:
        return len(self.dataset) // min(self.cfg.batch, len(self.dataset))

    @property
    def total_steps(self) -> int:
        return self.cfg.epochs * self.steps_per_epoch

    @property
    def epoch(self) -> int:
        return self.step // self.steps_per_epoch

    def state(self) -> TrainState:
        return TrainState(model_config=self.model.config, train_config=self.cfg,
                          epoch=self.epoch, step=self.step,
                          parameters=self.model.state_dict(),
                          optimizer=self.optimizer.state_dict(),
                          best_metric=self.best_metric)

    def restore(self, state: TrainState):
        check_shapes(state.parameters, self.model)
        self.model.load_state_dict(state.parameters)
        if state.optimizer is not None:
            self.optimizer.load_state_dict(state.optimizer)
        self.step = state.step
        self.best_metric = state.best_metric
        logger.info(f"Resuming at epoch {self.epoch}, step {self.step}")

    def save(self, path=None) -> Path:
        if path is None:
            if self.run_dir is None:
                raise TrainerException("No run directory to save a checkpoint in")
            path = self.run_dir / 'checkpoints' / 'last.pt'
        return save_checkpoint(self.state(), path)

    def _loader(self, stop_step: int) -> DataLoader:
        sampler = StepBatchSampler(len(self.dataset), self.cfg.batch, self.cfg.seed,
                                   self.step, stop_step)
        return DataLoader(self.dataset, batch_sampler=sampler, collate_fn=collate,
                          num_workers=self.cfg.workers)

    def _log(self, entry: dict):
        self.history.append(entry)
        if self.run_dir is not None:
            log_path = self.run_dir / 'logs' / 'train.jsonl'
            log_path.parent.mkdir(parents=True, exist_ok=True)
            with open(log_path, 'a') as f:
                f.write(json.dumps({name: entry[name] for name in LOG_FIELDS}) + '\n')

    def train_step(self, batch: Batch) -> dict:
        epoch = self.epoch
        lr = lr_schedule(self.cfg, epoch)
        for group in self.optimizer.param_groups:
            group['lr'] = lr
        self.model.train()
        batch = batch.to(self.device)
        self.optimizer.zero_grad()
        breakdown = mixed_loss(self.model(batch.x_wn), batch, self.cfg.alpha, self.fx)
        breakdown.total.backward()
        self.optimizer.step()
        entry = {'step': self.step, 'epoch': epoch, 'lr': lr, **breakdown.to_dict()}
        self.step += 1
        return entry

    def run(self, max_steps: int = None) -> List[dict]:
        """Train until the last epoch ends, or for at most max_steps more steps.

        Returns
        -------
        List[dict]
            the log entries of the steps run in this call
        """
        stop = self.total_steps if max_steps is None else min(self.total_steps, self.step + max_steps)
        entries = []
        if stop <= self.step:
            return entries
        clean_reads = CLEAN_READS.count
        logger.info(f"Training steps {self.step}..{stop - 1} of {self.total_steps} "
                    f"({self.steps_per_epoch} per epoch, crop {self.dataset.crop})")
        progress = tqdm(self._loader(stop), total=stop - self.step, desc='train')
        for batch in progress:
            entry = self.train_step(batch)
            self._log(entry)
            entries.append(entry)
            progress.set_postfix(loss=f"{entry['total']:.4f}", epoch=entry['epoch'])
            if self.step % self.steps_per_epoch == 0:
                self._end_of_epoch(entry['epoch'])
        self._check_no_clean_reads(CLEAN_READS.count - clean_reads)
        return entries

    def _check_no_clean_reads(self, reads: int):
        """The optimization path must never see a clean image"""
        self.clean_reads = reads
        logger.info(f"Clean image reads during training: {reads}")
        if reads:
            raise TrainerException(f"Training read y_clean {reads} times, it must never see "
                                   f"clean images")

    def _end_of_epoch(self, epoch: int):
        if self.run_dir is not None:
            self.save(self.run_dir / 'checkpoints' / f"epoch_{epoch:03d}.pt")
            self.save()
        if self.eval_manifest is not None and self.cfg.eval_every and (epoch + 1) % self.cfg.eval_every == 0:
            out_dir = self.run_dir / 'eval' / f"epoch_{epoch:03d}" if self.run_dir else None
            with CLEAN_READS.suspended():
                result = evaluate(self.model, self.eval_manifest, self.metrics_cfg, out_dir=out_dir,
                                  device=self.device)
            psnr = result.mean('psnr')
            logger.info(f"Epoch {epoch}: eval PSNR {psnr:.2f} dB")
            if self.best_metric is None or psnr > self.best_metric:
                self.best_metric = psnr
                if self.run_dir is not None:
                    self.save(self.run_dir / 'checkpoints' / 'best.pt')


def train(model: HybridNet, manifest: Manifest, cfg: TrainConfig, fx: FeatureExtractor = None,
          run_dir=None, max_steps: int = None, **kwargs) -> TrainState:
    """Build a Trainer and run it to the end"""
    trainer = Trainer(model, manifest, cfg, fx=fx, run_dir=run_dir, **kwargs)
    trainer.run(max_steps)
    return trainer.state()


def _finite_or_nan(value):
    return float('nan') if value is None or math.isinf(value) else value


def _json_value(value):
    if isinstance(value, float) and math.isinf(value):
        return 'inf'
    if isinstance(value, float) and math.isnan(value):
        return None
    return value


@dataclass
class EvaluationResult:
    """Per-image metric rows and their aggregate per condition (sigma, alpha_w)"""

    rows: List[dict]
    errors: Dict[str, str] = field(default_factory=dict)

    def table(self) -> pd.DataFrame:
        return pd.DataFrame(self.rows, columns=METRIC_COLUMNS)

    def aggregate(self) -> pd.DataFrame:
        """Mean and std per condition. +inf PSNR sentinels are left out"""
        table = self.table()
        if table.empty:
            return pd.DataFrame()
        for column in ('psnr', 'ssim', 'lpips'):
            table[column] = table[column].map(_finite_or_nan).astype(float)
        grouped = table.groupby(['sigma', 'alpha_w'])[['psnr', 'ssim', 'lpips']].agg(['mean', 'std'])
        grouped.columns = [f"{metric}_{stat}" for metric, stat in grouped.columns]
        grouped['count'] = table.groupby(['sigma', 'alpha_w']).size()
        return grouped.reset_index()

    def mean(self, metric: str) -> float:
        values = [_finite_or_nan(r[metric]) for r in self.rows]
        values = [v for v in values if not math.isnan(v)]
        return float(np.mean(values)) if values else float('nan')

    def to_dict(self) -> dict:
        return {'images': [{k: _json_value(v) for k, v in row.items()} for row in self.rows],
                'aggregate': [{k: _json_value(v) for k, v in row.items()}
                              for row in self.aggregate().to_dict(orient='records')],
                'errors': dict(self.errors)}

    def write(self, out_dir) -> Path:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        self.table().to_csv(out_dir / 'metrics.csv', index=False)
        self.aggregate().to_csv(out_dir / 'summary.csv', index=False)
        with open(out_dir / 'metrics.json', 'w') as f:
            json.dump(self.to_dict(), f, indent=2)
        return out_dir


def evaluate(model: HybridNet, manifest: Manifest, cfg: MetricsConfig = None, out_dir=None,
             dump_images: bool = False, lpips_metric: LPIPSMetric = None, device=None,
             restore=None) -> EvaluationResult:
    """Restore every x_wn of a split with clean images and compare against y_clean.

    Parameters
    ----------
    model: HybridNet
    manifest: Manifest
        records with a y_clean image
    cfg: MetricsConfig, optional
    out_dir: str or Path, optional
        metrics.csv, summary.csv and metrics.json go here
    dump_images: bool, optional
        also write y_hat, y_n and y_wn PNGs per image into out_dir/images
    lpips_metric: LPIPSMetric, optional
        when None and cfg.lpips is set, one is created if possible
    restore: Callable[[Image], Dict[str, Image]], optional
        replaces the model, for stub models in tests and baselines

    Returns
    -------
    EvaluationResult
        A failing image is recorded in errors and left out of rows
    """
    cfg = cfg or MetricsConfig()
    if lpips_metric is None and cfg.lpips:
        lpips_metric = LPIPSMetric.try_create(cfg.lpips_net)
    if model is not None:
        model.eval()
    if restore is None:
        def restore(img):
            return infer_outputs(model, img, device)

    rows, errors = [], {}
    for record in tqdm(list(manifest), desc='evaluate'):
        try:
            sample = record.load_sample(manifest.root)
            outputs = restore(sample.x_wn)
            report = compare(outputs['y_hat'], sample.y_clean, cfg, lpips_metric)
        except HybridWMException as e:
            logger.warning(f"Evaluation of '{record.id}' failed: {e}")
            errors[record.id] = str(e)
            continue
        rows.append({'id': record.id, 'sigma': record.sigma, 'alpha_w': record.alpha_w,
                     'psnr': report.psnr, 'ssim': report.ssim, 'lpips': report.lpips})
        if dump_images and out_dir is not None:
            image_dir = Path(out_dir) / 'images'
            image_dir.mkdir(parents=True, exist_ok=True)
            for name, img in outputs.items():
                save_image(img, image_dir / f"{record.id}_{name}.png")
    if errors:
        logger.warning(f"{len(errors)} of {len(manifest)} images failed and are left out of the aggregate")

    result = EvaluationResult(rows=rows, errors=errors)
    if out_dir is not None:
        result.write(out_dir)
    return result


def identity_restore(img: Image) -> Dict[str, Image]:
    """The degradation baseline: returns the corrupted input, clamped"""
    return {'y_hat': img.clamped()}


def degradation_baseline(manifest: Manifest, cfg: MetricsConfig = None, out_dir=None) -> EvaluationResult:
    """Metrics of x_wn itself against y_clean, the floor a useful model must beat"""
    return evaluate(None, manifest, cfg or MetricsConfig(lpips=False), out_dir=out_dir,
                    restore=identity_restore)
