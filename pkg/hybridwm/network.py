"""The hybrid dual-decoder restoration network.

A shared convolutional encoder feeds two decoders: a light NAFBlock decoder that
removes noise, and a decoder that first runs a sparse transformer U-Net to remove
watermarks and noise. A gated fusion unit merges both into the final output.
"""
import logging
import warnings
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

import numpy as np
import torch
import torch.nn.functional as F
from fvcore.nn import FlopCountAnalysis
from torch import nn

from hybridwm.blocks import (NAFBlock, SparseTransformerBlock, Downsample, Upsample,
                             SkipFusion)
from hybridwm.config import ModelConfig
from hybridwm.exceptions import HybridWMException, ConfigValidationException
from hybridwm.imgcore import Image, image_to_tensor, tensor_to_image

logger = logging.getLogger(__name__)

SIZE_MULTIPLE = 16
WITH_NRD = ('full', 'se_nrd_only', 'dual_no_ffu', 'dense_mdta', 'dual_encoders')
WITH_WNRD = ('full', 'se_wnrd_only', 'dual_no_ffu', 'dense_mdta', 'dual_encoders')
WITH_FFU = ('full', 'dense_mdta', 'dual_encoders')


class NetworkException(HybridWMException):
    pass


@dataclass
class ForwardOutputs:
    """What one forward pass produces. y_hat includes the input residual.
    Branches an ablation variant does not have are None"""

    y_hat: torch.Tensor
    y_n: Optional[torch.Tensor] = None
    y_wn: Optional[torch.Tensor] = None
    gate_map: Optional[torch.Tensor] = None

    def present(self) -> Tuple[torch.Tensor, ...]:
        return tuple(t for t in (self.y_hat, self.y_n, self.y_wn, self.gate_map) if t is not None)

    def map(self, func) -> 'ForwardOutputs':
        """Apply func to every present tensor"""
        return ForwardOutputs(*(None if t is None else func(t)
                                for t in (self.y_hat, self.y_n, self.y_wn, self.gate_map)))


def _stack(blocks: List[nn.Module]) -> nn.Module:
    return nn.Sequential(*blocks) if blocks else nn.Identity()


class ConvEncoder(nn.Module):
    """Two NAFBlock stages, each followed by a stride-2 downsample"""

    def __init__(self, width: int, depths: Tuple[int, int]):
        super().__init__()
        self.level1 = _stack([NAFBlock(width) for _ in range(depths[0])])
        self.down1 = Downsample(width)
        self.level2 = _stack([NAFBlock(width) for _ in range(depths[1])])
        self.down2 = Downsample(width)

    def forward(self, x):
        skip1 = self.level1(x)
        skip2 = self.level2(self.down1(skip1))
        return self.down2(skip2), (skip1, skip2)


class ConvDecoder(nn.Module):
    """Optional NAFBlock bottleneck at /4, then two upsample + skip + NAFBlock stages"""

    def __init__(self, width: int, depths: Tuple[int, int], bottleneck_depth: int = 0):
        super().__init__()
        self.bottleneck = _stack([NAFBlock(width) for _ in range(bottleneck_depth)])
        self.up2 = Upsample(width)
        self.fuse2 = SkipFusion(width)
        self.level2 = _stack([NAFBlock(width) for _ in range(depths[1])])
        self.up1 = Upsample(width)
        self.fuse1 = SkipFusion(width)
        self.level1 = _stack([NAFBlock(width) for _ in range(depths[0])])

    def forward(self, x, skips):
        skip1, skip2 = skips
        x = self.bottleneck(x)
        x = self.level2(self.fuse2(self.up2(x), skip2))
        return self.level1(self.fuse1(self.up1(x), skip1))


class SparseTransformerUNet(nn.Module):
    """Three-level U-Net of sparse transformer blocks. Channels double per level"""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        c1, c2, c3, _, _ = cfg.st_widths
        h1, h2, h3, h4, h5 = cfg.st_heads
        d1, d2, d3, d4, d5 = cfg.st_depths
        topk, expansion = cfg.effective_topk(), cfg.ffn_expansion

        def stage(width, heads, depth):
            return _stack([SparseTransformerBlock(width, heads, expansion, topk) for _ in range(depth)])

        self.encoder1 = stage(c1, h1, d1)
        self.down1 = Downsample(c1, c2)
        self.encoder2 = stage(c2, h2, d2)
        self.down2 = Downsample(c2, c3)
        self.bottleneck = stage(c3, h3, d3)
        self.up2 = Upsample(c3, c2)
        self.fuse2 = SkipFusion(c2)
        self.decoder2 = stage(c2, h4, d4)
        self.up1 = Upsample(c2, c1)
        self.fuse1 = SkipFusion(c1)
        self.decoder1 = stage(c1, h5, d5)

    def forward(self, x):
        skip1 = self.encoder1(x)
        skip2 = self.encoder2(self.down1(skip1))
        x = self.bottleneck(self.down2(skip2))
        x = self.decoder2(self.fuse2(self.up2(x), skip2))
        return self.decoder1(self.fuse1(self.up1(x), skip1))


class FeatureFusionUnit(nn.Module):
    """F_fuse = NAFBlock(F_wn + g * F_n) with g = sigmoid(conv(gelu(conv(F_wn))))"""

    def __init__(self, width: int):
        super().__init__()
        self.gate = nn.Sequential(
            nn.Conv2d(width, width, kernel_size=1),
            nn.GELU(),
            nn.Conv2d(width, width, kernel_size=1),
            nn.Sigmoid())
        self.fuse = NAFBlock(width)

    @property
    def gate_head(self) -> nn.Conv2d:
        return self.gate[2]

    def forward(self, f_wn, f_n):
        g = self.gate(f_wn)
        return self.fuse(f_wn + g * f_n), g


def _head(width: int) -> nn.Conv2d:
    return nn.Conv2d(width, 3, kernel_size=3, padding=1)


class HybridNet(nn.Module):
    """Shared encoder, noise removal decoder (nrd), watermark and noise removal
    decoder (wnrd_transformer + wnrd_decoder) and feature fusion unit (ffu).

    Ablation variants leave out the parts they do not use, so their parameter
    counts reflect what they actually have.
    """

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.config = cfg
        self.variant = cfg.variant
        width = cfg.base_width

        self.stem = nn.Conv2d(3, width, kernel_size=3, padding=1)
        self.encoder = ConvEncoder(width, cfg.conv_depths('se'))
        self.encoder_wn = ConvEncoder(width, cfg.conv_depths('se')) \
            if self.variant == 'dual_encoders' else None

        self.nrd = ConvDecoder(width, cfg.conv_depths('nrd'), cfg.nrd_bottleneck_depth) \
            if self.variant in WITH_NRD else None
        if self.variant in WITH_WNRD:
            self.wnrd_transformer = SparseTransformerUNet(cfg)
            self.wnrd_decoder = ConvDecoder(width, cfg.conv_depths('wnrd'))
        else:
            self.wnrd_transformer = self.wnrd_decoder = None

        self.ffu = FeatureFusionUnit(width) if self.variant in WITH_FFU else None
        self.head_n = _head(width) if self.variant in WITH_NRD and self.variant != 'se_nrd_only' else None
        self.head_wn = _head(width) if self.variant in WITH_FFU else None
        self.head = _head(width)

    def forward(self, x_wn: torch.Tensor) -> ForwardOutputs:
        check_input(x_wn)
        f0 = self.stem(x_wn)
        f_se, skips = self.encoder(f0)

        f_n = self.nrd(f_se, skips) if self.nrd is not None else None
        f_wn = None
        if self.wnrd_transformer is not None:
            f_se_wn, skips_wn = self.encoder_wn(f0) if self.encoder_wn is not None else (f_se, skips)
            f_wn = self.wnrd_decoder(self.wnrd_transformer(f_se_wn), skips_wn)

        if self.variant == 'se_nrd_only':
            return ForwardOutputs(y_hat=self.head(f_n) + x_wn)
        if self.variant == 'se_wnrd_only':
            return ForwardOutputs(y_hat=self.head(f_wn) + x_wn)
        if self.variant == 'dual_no_ffu':
            return ForwardOutputs(y_hat=self.head(f_wn) + x_wn, y_n=self.head_n(f_n))

        f_fuse, gate = self.ffu(f_wn, f_n)
        return ForwardOutputs(y_hat=self.head(f_fuse) + x_wn, y_n=self.head_n(f_n),
                              y_wn=self.head_wn(f_wn), gate_map=gate)


def check_input(x: torch.Tensor):
    if x.dim() != 4 or x.shape[1] != 3:
        raise NetworkException(f"Expected B x 3 x H x W input, got {tuple(x.shape)}")
    h, w = x.shape[-2:]
    if h % SIZE_MULTIPLE or w % SIZE_MULTIPLE:
        raise NetworkException(f"Input size {h}x{w} is not divisible by {SIZE_MULTIPLE}. "
                               f"Reflect-pad it first, or use infer_tiled()")


def build_model(cfg: ModelConfig) -> HybridNet:
    """
    Raises
    ------
    ConfigValidationException
        When cfg is not valid
    """
    problems = cfg.validate()
    if problems:
        raise ConfigValidationException(problems)
    model = HybridNet(cfg)
    logger.debug(f"Built '{cfg.variant}' model with {count_params(model):,} parameters")
    return model


def forward(model: HybridNet, x_wn: torch.Tensor) -> ForwardOutputs:
    return model(x_wn)


def _pad_amount(size: int) -> int:
    return (-size) % SIZE_MULTIPLE


def pad_to_multiple(x: torch.Tensor) -> torch.Tensor:
    """Reflect-pad bottom and right to the next multiple of 16. Falls back to
    replicate padding when the image is too small to reflect"""
    h, w = x.shape[-2:]
    pad_h, pad_w = _pad_amount(h), _pad_amount(w)
    if not pad_h and not pad_w:
        return x
    mode = 'reflect' if pad_h < h and pad_w < w else 'replicate'
    return F.pad(x, (0, pad_w, 0, pad_h), mode=mode)


@torch.no_grad()
def infer_outputs(model: HybridNet, img: Image, device=None) -> Dict[str, Image]:
    """Every present output branch for an image of any size, cropped back and
    clamped to [0, 1]. Keys are 'y_hat', 'y_n', 'y_wn'"""
    device = device or next(model.parameters()).device
    x = image_to_tensor(img, device)
    h, w = x.shape[-2:]
    outputs = model(pad_to_multiple(x)).map(lambda t: t[..., :h, :w].clamp(0.0, 1.0))
    images = {}
    for name in ('y_hat', 'y_n', 'y_wn'):
        tensor = getattr(outputs, name)
        if tensor is not None:
            images[name] = tensor_to_image(tensor, id=img.id)
    return images


def infer_tiled(model: HybridNet, img: Image, device=None) -> Image:
    """Restored image, same size as img, values in [0, 1]"""
    return infer_outputs(model, img, device)['y_hat']


def count_params(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters() if p.requires_grad)


@dataclass
class FlopReport:
    """Multiply-accumulate count and FLOPs (2 x MACs) at one input size.

    by_module maps module names to MACs, '' being the whole model.
    """

    height: int
    width: int
    macs: int
    by_module: Dict[str, int] = field(default_factory=dict)

    @property
    def flops(self) -> int:
        return 2 * self.macs

    def to_dict(self) -> dict:
        return {'height': self.height, 'width': self.width, 'macs': self.macs,
                'flops': self.flops, 'by_module': dict(self.by_module)}


class _TupleOutputs(nn.Module):
    """fvcore traces modules whose outputs are tensors or tuples of them"""

    def __init__(self, model):
        super().__init__()
        self.model = model

    def forward(self, x):
        outputs = self.model(x)
        if isinstance(outputs, ForwardOutputs):
            return outputs.present()
        return outputs


def count_flops(model: nn.Module, h: int, w: int) -> FlopReport:
    """Count convolutions and attention matrix products at a given input size.
    Norms, activations and top-k selection are not counted"""
    device = next(model.parameters()).device
    was_training = model.training
    model.eval()
    try:
        with warnings.catch_warnings():
            warnings.simplefilter('ignore')
            analysis = FlopCountAnalysis(_TupleOutputs(model), torch.zeros(1, 3, h, w, device=device))
            analysis.unsupported_ops_warnings(False).uncalled_modules_warnings(False)
            analysis.tracer_warnings('none')
            by_module = {name[len('model.'):] if name.startswith('model.') else
                         ('' if name == 'model' else name): int(macs)
                         for name, macs in analysis.by_module().items()}
            total = int(analysis.total())
    finally:
        model.train(was_training)
    by_module[''] = total
    return FlopReport(height=h, width=w, macs=total, by_module=by_module)


def describe(model: HybridNet, h: int = 256, w: int = 256) -> dict:
    """Stage shapes, depths, widths and heads plus parameter and MAC breakdowns"""
    cfg = model.config
    c = cfg.base_width
    se1, se2 = cfg.conv_depths('se')
    stages = [{'name': 'stem', 'shape': [c, h, w], 'depth': 1, 'width': c}]
    stages += [{'name': 'encoder.level1', 'shape': [c, h, w], 'depth': se1, 'width': c},
               {'name': 'encoder.level2', 'shape': [c, h // 2, w // 2], 'depth': se2, 'width': c}]
    if model.nrd is not None:
        n1, n2 = cfg.conv_depths('nrd')
        stages += [{'name': 'nrd.bottleneck', 'shape': [c, h // 4, w // 4],
                    'depth': cfg.nrd_bottleneck_depth, 'width': c},
                   {'name': 'nrd.level2', 'shape': [c, h // 2, w // 2], 'depth': n2, 'width': c},
                   {'name': 'nrd.level1', 'shape': [c, h, w], 'depth': n1, 'width': c}]
    if model.wnrd_transformer is not None:
        names = ('encoder1', 'encoder2', 'bottleneck', 'decoder2', 'decoder1')
        scales = (4, 8, 16, 8, 4)
        for name, scale, width, depth, heads in zip(names, scales, cfg.st_widths, cfg.st_depths,
                                                    cfg.st_heads):
            stages.append({'name': f'wnrd_transformer.{name}', 'shape': [width, h // scale, w // scale],
                           'depth': depth, 'width': width, 'heads': heads})
        w1, w2 = cfg.conv_depths('wnrd')
        stages += [{'name': 'wnrd_decoder.level2', 'shape': [c, h // 2, w // 2], 'depth': w2, 'width': c},
                   {'name': 'wnrd_decoder.level1', 'shape': [c, h, w], 'depth': w1, 'width': c}]
    if model.ffu is not None:
        stages.append({'name': 'ffu', 'shape': [c, h, w], 'depth': 1, 'width': c})

    flops = count_flops(model, h, w)
    children = dict(model.named_children())
    return {'variant': cfg.variant,
            'config': cfg.to_dict(),
            'input': [3, h, w],
            'stages': stages,
            'params': count_params(model),
            'params_by_module': {name: count_params(child) for name, child in children.items()},
            'macs': flops.macs,
            'flops': flops.flops,
            'macs_by_module': {name: flops.by_module.get(name, 0) for name in children}}


@torch.no_grad()
def gate_weights(model: HybridNet, x_wn: torch.Tensor) -> torch.Tensor:
    """Fusion gate activations, B x C x h x w

    Raises
    ------
    NetworkException
        For variants without a fusion unit
    """
    if model.ffu is None:
        raise NetworkException(f"Variant '{model.variant}' has no fusion gate")
    return model(x_wn).gate_map


def gate_heat_map(gates: torch.Tensor, size) -> np.ndarray:
    """Channel mean of gates, bilinearly resized to size, as B x H x W array"""
    heat = gates.mean(dim=1, keepdim=True)
    if tuple(heat.shape[-2:]) != tuple(size):
        heat = F.interpolate(heat, size=tuple(size), mode='bilinear', align_corners=False)
    return heat[:, 0].cpu().numpy()


def extract_gate_maps(model: HybridNet, x_wn: torch.Tensor) -> np.ndarray:
    """Channel-averaged gate as B x H x W heat map at input resolution"""
    return gate_heat_map(gate_weights(model, x_wn), x_wn.shape[-2:])


def zero_gate_head(model: HybridNet):
    """Zero the last gate conv so every gate weight is sigmoid(0) = 0.5"""
    if model.ffu is None:
        raise NetworkException(f"Variant '{model.variant}' has no fusion gate")
    with torch.no_grad():
        model.ffu.gate_head.weight.zero_()
        model.ffu.gate_head.bias.zero_()
