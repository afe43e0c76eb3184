""" Models the configuration records that every other module reads.
Models as simply as possible: plain dataclasses that can be initiated from the
dicts found in a YAML run config and written back to them.
"""
import math
from pathlib import Path
from abc import ABC
from dataclasses import dataclass, field, fields, asdict
from typing import Optional, Tuple, List, Dict, Any

import yaml

from hybridwm.exceptions import ConfigException, ConfigValidationException

VARIANTS = ('full', 'se_nrd_only', 'se_wnrd_only', 'dual_no_ffu', 'dense_mdta', 'dual_encoders')
PAIRING_MODES = ('literal', 'independent')
MASK_FILLS = ('neg_inf', 'zero')
SELECT_ALONG = ('row', 'column')
PSNR_ON = ('rgb', 'luma')


class ConfigObject(ABC):
    """A root for config records. Children are dataclasses that can be initiated
    from a (YAML-loaded) dict and converted back with to_dict()"""

    # field name -> ConfigObject subclass for nested records
    nested: Dict[str, type] = {}

    def __str__(self):
        return f"{self.__class__.__name__} {self.to_dict()}"

    @classmethod
    def get_item(cls, dict_in: dict, key: str, raise_error: bool = True) -> object:
        """ Get item from dict, raise exception or return None if not found

        Parameters
        ----------
        dict_in: dict
            dict to search in
        key: str
            dict key
        raise_error: bool, optional
            If True raises error when key not found. Otherwise returns None. Defaults to True

        Raises
        ------
        ConfigException
            When key is not found in dict and raise_error is True

        Returns
        -------
        object
            Dict item at key
        None
            If item not found and raise_error is False

        """
        try:
            return dict_in[key]
        except KeyError:
            if raise_error:
                raise ConfigException(f"Could not find key '{key}' in '{dict_in}'")
        except TypeError:
            raise ConfigException(f"Expected a mapping for {cls.__name__}, got '{dict_in}'")

    @classmethod
    def init_from_dict(cls, dict_in):
        """ Create an instance of this class from a config dict. Missing keys take
        their default, unknown keys are an error

        Parameters
        ----------
        dict_in: dict or None

        Raises
        ------
        ConfigException
            If dict_in contains keys this record does not know

        Returns
        -------
        ConfigObject
            instance of this class
        """
        dict_in = dict_in or {}
        known = {f.name: f for f in fields(cls)}
        unknown = set(dict_in.keys()) - set(known.keys())
        if unknown:
            raise ConfigException(f"Unknown keys {sorted(unknown)} for {cls.__name__}")

        kwargs = {}
        for name, a_field in known.items():
            value = cls.get_item(dict_in, name, raise_error=False)
            if value is None and name not in dict_in:
                continue
            if name in cls.nested:
                value = cls.nested[name].init_from_dict(value)
            elif isinstance(value, list):
                value = tuple(value)
            kwargs[name] = value
        return cls(**kwargs)

    def to_dict(self) -> dict:
        """As plain dict that can be dumped to YAML or JSON"""
        return _plain(asdict(self))

    def validate(self) -> List[str]:
        """Return a list of problems with this record. Empty when valid"""
        return []


def _plain(value):
    if isinstance(value, dict):
        return {k: _plain(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_plain(v) for v in value]
    return value


def kept_count(rate: float, d_h: int) -> int:
    """Number of attention entries kept per row: ceil(rate * d_h), at least 1.

    A tiny tolerance keeps 2/3 * 12 at 8 instead of float-rounding up to 9.
    """
    return max(1, min(d_h, math.ceil(rate * d_h - 1e-9)))


@dataclass
class TopKConfig(ConfigObject):
    """Top-k rates of the sparse attention branches"""

    rates: Tuple[float, ...] = (1 / 2, 2 / 3, 3 / 4, 4 / 5)
    mask_fill: str = 'neg_inf'
    select_along: str = 'row'

    @property
    def K(self) -> int:
        return len(self.rates)

    def kept_counts(self, d_h: int) -> List[int]:
        return [kept_count(rate, d_h) for rate in self.rates]

    def validate(self):
        problems = []
        if not self.rates:
            problems.append("topk.rates must hold at least one rate")
        for rate in self.rates:
            if not 0 < rate <= 1:
                problems.append(f"topk rate {rate} outside (0, 1]")
        if self.mask_fill not in MASK_FILLS:
            problems.append(f"topk.mask_fill '{self.mask_fill}' not in {MASK_FILLS}")
        if self.select_along not in SELECT_ALONG:
            problems.append(f"topk.select_along '{self.select_along}' not in {SELECT_ALONG}")
        return problems


@dataclass
class ModelConfig(ConfigObject):
    """Every architectural hyperparameter of the network

    level_depths are (L1..L5): L1/L2 are the NAFBlock counts at full and half
    resolution, L3/L4/L5 the transformer block counts at /4, /8 and /16.
    se_depths, nrd_depths and wnrd_depths override (L1, L2) per subnet.
    """

    base_width: int = 48
    level_depths: Tuple[int, ...] = (2, 4, 4, 6, 6)
    st_heads: Tuple[int, ...] = (4, 8, 8, 8, 4)
    topk: TopKConfig = field(default_factory=TopKConfig)
    ffn_expansion: float = 2.66
    variant: str = 'full'
    nrd_bottleneck_depth: int = 2
    se_depths: Optional[Tuple[int, int]] = None
    nrd_depths: Optional[Tuple[int, int]] = None
    wnrd_depths: Optional[Tuple[int, int]] = None

    nested = {'topk': TopKConfig}

    @property
    def st_widths(self) -> Tuple[int, ...]:
        """Channel width at each of the five transformer stages"""
        c = self.base_width
        return c, 2 * c, 4 * c, 2 * c, c

    @property
    def st_depths(self) -> Tuple[int, ...]:
        _, _, l3, l4, l5 = self.level_depths
        return l3, l4, l5, l4, l3

    def conv_depths(self, subnet: str) -> Tuple[int, int]:
        """(L1, L2) for 'se', 'nrd' or 'wnrd', honouring overrides"""
        override = {'se': self.se_depths, 'nrd': self.nrd_depths, 'wnrd': self.wnrd_depths}[subnet]
        if override is not None:
            return tuple(override)
        return tuple(self.level_depths[:2])

    def effective_topk(self) -> TopKConfig:
        """dense_mdta replaces sparse attention by a single dense branch"""
        if self.variant == 'dense_mdta':
            return TopKConfig(rates=(1.0,), mask_fill=self.topk.mask_fill,
                              select_along=self.topk.select_along)
        return self.topk

    def validate(self):
        problems = []
        if self.base_width < 2 or self.base_width % 2:
            problems.append(f"model.base_width {self.base_width} must be even and >= 2")
        if len(self.level_depths) != 5:
            problems.append(f"model.level_depths needs 5 entries, got {len(self.level_depths)}")
        elif any(d < 1 for d in self.level_depths):
            problems.append(f"model.level_depths {self.level_depths} must all be >= 1")
        for name in ('se_depths', 'nrd_depths', 'wnrd_depths'):
            value = getattr(self, name)
            if value is not None and (len(value) != 2 or any(d < 1 for d in value)):
                problems.append(f"model.{name} {value} must be two depths >= 1")
        if self.nrd_bottleneck_depth < 0:
            problems.append("model.nrd_bottleneck_depth must be >= 0")
        if len(self.st_heads) != 5:
            problems.append(f"model.st_heads needs 5 entries, got {len(self.st_heads)}")
        else:
            if self.base_width % min(self.st_heads):
                problems.append(f"model.base_width {self.base_width} not divisible by "
                                f"smallest head count {min(self.st_heads)}")
            for width, heads in zip(self.st_widths, self.st_heads):
                if heads < 1 or width % heads:
                    problems.append(f"{heads} heads do not divide stage width {width}")
        if self.ffn_expansion <= 0:
            problems.append("model.ffn_expansion must be positive")
        if self.variant not in VARIANTS:
            problems.append(f"model.variant '{self.variant}' not in {VARIANTS}")
        return problems + self.topk.validate()


@dataclass
class CorruptionRanges(ConfigObject):
    """Where corruption parameters are drawn from.

    Transparency and sigma are drawn from a discrete choice set unless an
    interval is given. scale is the watermark's long side as a fraction of the
    image's short side. extra_transparencies overrides the choice set for the
    additional watermark that makes y_w.
    """

    transparencies: Tuple[float, ...] = (0.3, 0.5, 0.7, 1.0)
    transparency_interval: Optional[Tuple[float, float]] = None
    sigmas: Tuple[float, ...] = (0, 15, 25, 50)
    sigma_interval: Optional[Tuple[float, float]] = None
    scale_interval: Tuple[float, float] = (0.5, 1.0)
    coverage_max: float = 0.4
    asset_indices: Optional[Tuple[int, ...]] = None
    extra_transparencies: Optional[Tuple[float, ...]] = None
    fixed_position: Optional[Tuple[int, int]] = None
    pairing_mode: str = 'literal'
    max_placement_tries: int = 100

    def validate(self):
        problems = []
        for t in self.transparencies + tuple(self.extra_transparencies or ()):
            if not 0 <= t <= 1:
                problems.append(f"transparency {t} outside [0, 1]")
        if self.transparency_interval is not None:
            lo, hi = self.transparency_interval
            if not 0 <= lo <= hi <= 1:
                problems.append(f"transparency_interval {self.transparency_interval} invalid")
        for s in self.sigmas:
            if s < 0:
                problems.append(f"noise sigma {s} is negative")
        if self.sigma_interval is not None:
            lo, hi = self.sigma_interval
            if not 0 <= lo <= hi:
                problems.append(f"sigma_interval {self.sigma_interval} invalid")
        lo, hi = self.scale_interval
        if not 0 < lo <= hi <= 1:
            problems.append(f"scale_interval {self.scale_interval} invalid")
        if not 0 < self.coverage_max <= 1:
            problems.append(f"coverage_max {self.coverage_max} outside (0, 1]")
        if self.pairing_mode not in PAIRING_MODES:
            problems.append(f"pairing_mode '{self.pairing_mode}' not in {PAIRING_MODES}")
        if self.max_placement_tries < 1:
            problems.append("max_placement_tries must be >= 1")
        return problems


@dataclass
class TrainConfig(ConfigObject):
    """Optimisation settings. lr(epoch) = lr0 * decay_factor ** (epoch // decay_every)"""

    lr0: float = 1e-3
    decay_factor: float = 0.1
    decay_every: int = 30
    epochs: int = 100
    batch: int = 8
    betas: Tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    crop: int = 256
    alpha: float = 0.024
    seed: int = 0
    eval_every: int = 0
    hflip: bool = False
    resample_per_epoch: bool = False
    workers: int = 0
    device: str = 'auto'

    def validate(self):
        problems = []
        if self.lr0 <= 0:
            problems.append("train.lr0 must be positive")
        if self.decay_every < 1:
            problems.append("train.decay_every must be >= 1")
        if self.epochs < 1:
            problems.append("train.epochs must be >= 1")
        if self.batch < 1:
            problems.append("train.batch must be >= 1")
        if self.crop < 16 or self.crop % 16:
            problems.append(f"train.crop {self.crop} must be a positive multiple of 16")
        if self.alpha < 0:
            problems.append("train.alpha must be >= 0")
        if self.eval_every < 0:
            problems.append("train.eval_every must be >= 0")
        if self.workers < 0:
            problems.append("train.workers must be >= 0")
        return problems


@dataclass
class MetricsConfig(ConfigObject):
    psnr_on: str = 'rgb'
    lpips: bool = True
    lpips_net: str = 'alex'

    def validate(self):
        if self.psnr_on not in PSNR_ON:
            return [f"metrics.psnr_on '{self.psnr_on}' not in {PSNR_ON}"]
        return []


@dataclass
class ExtractorConfig(ConfigObject):
    """Perceptual feature extractor for the texture loss. taps are indices into
    VGG16 `features`; 15 is the activation after the third stage's last conv"""

    weights: Optional[str] = None
    taps: Tuple[int, ...] = (15,)

    def validate(self):
        if not self.taps or any(t < 0 or t > 30 for t in self.taps):
            return [f"extractor.taps {self.taps} must be indices in [0, 30]"]
        return []


@dataclass
class CorpusConfig(ConfigObject):
    images: Optional[str] = None
    assets: Optional[str] = None
    out: Optional[str] = None
    split: str = 'train'
    variants: int = 1
    workers: int = 0
    seed: int = 0
    ranges: CorruptionRanges = field(default_factory=CorruptionRanges)

    nested = {'ranges': CorruptionRanges}

    def validate(self):
        problems = []
        if self.split not in ('train', 'test'):
            problems.append(f"corpus.split '{self.split}' not in ('train', 'test')")
        if self.variants < 1:
            problems.append("corpus.variants must be >= 1")
        return problems + self.ranges.validate()


@dataclass
class RunConfig(ConfigObject):
    """Everything one command needs, bound in a single YAML file"""

    name: str = 'default'
    runs_dir: str = 'runs'
    manifest: Optional[str] = None
    eval_manifest: Optional[str] = None
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    corpus: CorpusConfig = field(default_factory=CorpusConfig)
    metrics: MetricsConfig = field(default_factory=MetricsConfig)
    extractor: ExtractorConfig = field(default_factory=ExtractorConfig)

    nested = {'model': ModelConfig, 'train': TrainConfig, 'corpus': CorpusConfig,
              'metrics': MetricsConfig, 'extractor': ExtractorConfig}

    def validate(self):
        problems = []
        for name in self.nested:
            problems += getattr(self, name).validate()
        if self.train.resample_per_epoch and self.corpus.ranges.pairing_mode != 'literal':
            problems.append("train.resample_per_epoch redraws y_w from x_w and needs "
                            "corpus.ranges.pairing_mode 'literal'")
        if not self.name or '/' in self.name:
            problems.append(f"name '{self.name}' must be a non-empty directory name")
        return problems

    def validate_all(self):
        """Raise one exception listing every problem, if there are any

        Raises
        ------
        ConfigValidationException
        """
        problems = self.validate()
        if problems:
            raise ConfigValidationException(problems)

    @classmethod
    def load(cls, path) -> 'RunConfig':
        try:
            with open(path) as f:
                return cls.init_from_dict(yaml.safe_load(f))
        except (OSError, yaml.YAMLError) as e:
            raise ConfigException(f"Could not read run config '{path}': {e}")

    def dump(self, path):
        with open(path, 'w') as f:
            yaml.safe_dump(self.to_dict(), f, sort_keys=False)

    def with_overrides(self, assignments: List[str]) -> 'RunConfig':
        """Apply 'dotted.key=value' assignments. Values are parsed as YAML scalars

        Parameters
        ----------
        assignments: List[str]
            like ['model.base_width=32', 'train.hflip=true']

        Returns
        -------
        RunConfig
            a new config, this one is left untouched
        """
        values = {}
        for assignment in assignments:
            if '=' not in assignment:
                raise ConfigException(f"Override '{assignment}' is not of the form key=value")
            key, raw = assignment.split('=', 1)
            values[key.strip()] = yaml.safe_load(raw)
        return self.with_values(values)

    def with_values(self, values: Dict[str, Any]) -> 'RunConfig':
        """Like with_overrides, for values that are already parsed. None values are skipped"""
        as_dict = self.to_dict()
        for key, value in values.items():
            if value is not None:
                set_dotted(as_dict, key, value)
        return RunConfig.init_from_dict(as_dict)

    @property
    def run_dir(self) -> Path:
        return Path(self.runs_dir) / self.name


def set_dotted(dict_in: dict, dotted_key: str, value: Any):
    """Set dict_in['a']['b'] = value for dotted_key 'a.b'"""
    *parents, leaf = dotted_key.split('.')
    node = dict_in
    for parent in parents:
        if not isinstance(node.get(parent), dict):
            raise ConfigException(f"Cannot set '{dotted_key}': '{parent}' is not a section")
        node = node[parent]
    node[leaf] = value
