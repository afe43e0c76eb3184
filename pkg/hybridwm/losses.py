"""The training objective: L1 structural terms on the three outputs plus an
alpha-weighted L1 texture term on perceptual features.

total = (l_s1 + l_s2 + l_s3) + alpha * (l_t1 + l_t2)
"""
import logging
from dataclasses import dataclass
from typing import List, Sequence, Tuple

import torch
import torch.nn.functional as F
from torch import nn
from torchvision.models import vgg16

from hybridwm.exceptions import HybridWMException
from hybridwm.network import ForwardOutputs

logger = logging.getLogger(__name__)

IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)
# index into vgg16().features of the relu after the third stage's last conv
RELU3_3 = 15


class LossException(HybridWMException):
    pass


class ExtractorUnavailable(LossException):
    pass


class FeatureExtractor(nn.Module):
    """Frozen perceptual network. Returns activations at the tap indices of a
    VGG16 `features` stack for inputs in [0, 1]"""

    def __init__(self, features: nn.Sequential, taps: Sequence[int] = (RELU3_3,)):
        super().__init__()
        self.taps = tuple(sorted(taps))
        if not self.taps or self.taps[-1] >= len(features):
            raise ExtractorUnavailable(f"Taps {taps} outside a {len(features)}-layer feature stack")
        self.features = nn.Sequential(*list(features)[:self.taps[-1] + 1])
        self.register_buffer('mean', torch.tensor(IMAGENET_MEAN).view(1, 3, 1, 1))
        self.register_buffer('std', torch.tensor(IMAGENET_STD).view(1, 3, 1, 1))
        for param in self.parameters():
            param.requires_grad = False
        self.eval()

    @classmethod
    def from_weights(cls, path, taps: Sequence[int] = (RELU3_3,)) -> 'FeatureExtractor':
        """Load a VGG16 state dict file, like the one fetch-weights downloads

        Raises
        ------
        ExtractorUnavailable
            When the file is missing or does not hold VGG16 weights
        """
        model = vgg16(weights=None)
        try:
            model.load_state_dict(torch.load(path, map_location='cpu'))
        except (OSError, RuntimeError) as e:
            raise ExtractorUnavailable(f"Could not load perceptual weights from '{path}': {e}")
        return cls(model.features, taps)

    @classmethod
    def from_torchvision(cls, taps: Sequence[int] = (RELU3_3,)) -> 'FeatureExtractor':
        """Pretrained ImageNet weights through torchvision's own cache"""
        from torchvision.models import VGG16_Weights
        try:
            model = vgg16(weights=VGG16_Weights.IMAGENET1K_V1)
        except Exception as e:
            raise ExtractorUnavailable(f"Could not get pretrained VGG16 from torchvision: {e}")
        return cls(model.features, taps)

    def train(self, mode: bool = True):
        # always frozen
        return super().train(False)

    def forward(self, x) -> List[torch.Tensor]:
        x = (x.clamp(0.0, 1.0) - self.mean) / self.std
        taps, out = set(self.taps), []
        for index, layer in enumerate(self.features):
            x = layer(x)
            if index in taps:
                out.append(x)
        return out


@dataclass
class LossBreakdown:
    """Loss components as scalar tensors. Absent output branches contribute 0"""

    l_s1: torch.Tensor
    l_s2: torch.Tensor
    l_s3: torch.Tensor
    l_t1: torch.Tensor
    l_t2: torch.Tensor
    total: torch.Tensor
    alpha: float = 0.024

    def to_dict(self) -> dict:
        return {name: float(getattr(self, name).detach())
                for name in ('l_s1', 'l_s2', 'l_s3', 'l_t1', 'l_t2', 'total')}


def _zero(like: torch.Tensor) -> torch.Tensor:
    return like.new_zeros(())


def _l1(output, target, name) -> torch.Tensor:
    if output is None:
        return _zero(target)
    if output.shape != target.shape:
        raise LossException(f"{name}: output {tuple(output.shape)} vs target {tuple(target.shape)}")
    return F.l1_loss(output, target)


def structural_loss(outs: ForwardOutputs, x_w: torch.Tensor,
                    y_w: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    """(mean|y_n - x_w|, mean|y_wn - y_w|, mean|y_hat - y_w|)"""
    return (_l1(outs.y_n, x_w, 'l_s1'),
            _l1(outs.y_wn, y_w, 'l_s2'),
            _l1(outs.y_hat, y_w, 'l_s3'))


def _feature_l1(features: List[torch.Tensor], targets: List[torch.Tensor]) -> torch.Tensor:
    return sum(F.l1_loss(f, t) for f, t in zip(features, targets)) / len(targets)


def texture_loss(outs: ForwardOutputs, y_w: torch.Tensor,
                 fx: FeatureExtractor) -> Tuple[torch.Tensor, torch.Tensor]:
    """(mean|fx(y_wn) - fx(y_w)|, mean|fx(y_hat) - fx(y_w)|), averaged over taps

    Raises
    ------
    ExtractorUnavailable
        When fx is None
    """
    if fx is None:
        raise ExtractorUnavailable("Texture loss needs a feature extractor. Fetch the weights "
                                   "or train with alpha = 0")
    with torch.no_grad():
        targets = fx(y_w)
    terms = []
    for output, name in ((outs.y_wn, 'l_t1'), (outs.y_hat, 'l_t2')):
        if output is None:
            terms.append(_zero(y_w))
        elif output.shape != y_w.shape:
            raise LossException(f"{name}: output {tuple(output.shape)} vs target {tuple(y_w.shape)}")
        else:
            terms.append(_feature_l1(fx(output), targets))
    return terms[0], terms[1]


def mixed_loss(outs: ForwardOutputs, pair, alpha: float = 0.024,
               fx: FeatureExtractor = None) -> LossBreakdown:
    """Full objective.

    Parameters
    ----------
    outs: ForwardOutputs
    pair:
        anything with x_w and y_w tensors, like trainer.Batch. Only those two
        attributes are read
    alpha: float, optional
        texture weight. With 0 no extractor is needed. Defaults to 0.024
    fx: FeatureExtractor, optional

    Returns
    -------
    LossBreakdown
    """
    x_w, y_w = pair.x_w, pair.y_w
    l_s1, l_s2, l_s3 = structural_loss(outs, x_w, y_w)
    if alpha == 0:
        l_t1 = l_t2 = _zero(y_w)
    else:
        l_t1, l_t2 = texture_loss(outs, y_w, fx)
    total = (l_s1 + l_s2 + l_s3) + alpha * (l_t1 + l_t2)
    return LossBreakdown(l_s1=l_s1, l_s2=l_s2, l_s3=l_s3, l_t1=l_t1, l_t2=l_t2,
                         total=total, alpha=alpha)
