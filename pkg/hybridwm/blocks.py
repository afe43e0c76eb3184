"""Neural building blocks: channel layer norm, SimpleGate, simplified channel
attention, NAFBlock, top-k sparse transposed self-attention, the sparse
transformer block with its gated feed-forward, and resampling units.

Feature maps are B x C x H x W tensors throughout.
"""
import logging
from collections import Counter
from typing import List

import torch
import torch.nn.functional as F
from einops import rearrange
from torch import nn

from hybridwm.config import TopKConfig, kept_count
from hybridwm.exceptions import HybridWMException

logger = logging.getLogger(__name__)

LN_EPS = 1e-6


class BlockShapeException(HybridWMException):
    pass


def _check_channels(x: torch.Tensor, expected: int, name: str):
    if x.dim() != 4 or x.shape[1] != expected:
        raise BlockShapeException(f"{name} expects B x {expected} x H x W, got {tuple(x.shape)}")


def layer_norm_channel(x: torch.Tensor, weight: torch.Tensor, bias: torch.Tensor,
                       eps: float = LN_EPS) -> torch.Tensor:
    """Normalize across channels at every spatial location, then scale and shift"""
    _check_channels(x, weight.shape[0], 'layer_norm_channel')
    mu = x.mean(1, keepdim=True)
    var = (x - mu).pow(2).mean(1, keepdim=True)
    y = (x - mu) / torch.sqrt(var + eps)
    return y * weight.view(1, -1, 1, 1) + bias.view(1, -1, 1, 1)


class LayerNorm2d(nn.Module):

    def __init__(self, channels: int, eps: float = LN_EPS):
        super().__init__()
        self.weight = nn.Parameter(torch.ones(channels))
        self.bias = nn.Parameter(torch.zeros(channels))
        self.eps = eps

    def forward(self, x):
        return layer_norm_channel(x, self.weight, self.bias, self.eps)


def simple_gate(x: torch.Tensor) -> torch.Tensor:
    """First half of the channels times the second half"""
    if x.shape[1] % 2:
        raise BlockShapeException(f"simple_gate needs an even channel count, got {x.shape[1]}")
    a, b = x.chunk(2, dim=1)
    return a * b


class SimpleGate(nn.Module):
    def forward(self, x):
        return simple_gate(x)


def sca(x: torch.Tensor, conv: nn.Conv2d) -> torch.Tensor:
    """Simplified channel attention: x times conv(global average of x). No nonlinearity"""
    return x * conv(F.adaptive_avg_pool2d(x, 1))


class SimplifiedChannelAttention(nn.Module):

    def __init__(self, channels: int):
        super().__init__()
        self.conv = nn.Conv2d(channels, channels, kernel_size=1)

    def gain(self, x):
        """Per-channel multiplier, B x C x 1 x 1"""
        return self.conv(F.adaptive_avg_pool2d(x, 1))

    def forward(self, x):
        return sca(x, self.conv)


class NAFBlock(nn.Module):
    """Two residual stages.

    x = x + conv3(sca(sg(dw(conv1(ln1(x))))))
    x = x + conv5(sg(conv4(ln2(x))))

    Both expansions are 2, so SimpleGate returns to the block width.
    """

    def __init__(self, channels: int):
        super().__init__()
        self.channels = channels
        expanded = 2 * channels
        self.norm1 = LayerNorm2d(channels)
        self.conv1 = nn.Conv2d(channels, expanded, kernel_size=1)
        self.conv2 = nn.Conv2d(expanded, expanded, kernel_size=3, padding=1, groups=expanded)
        self.sg = SimpleGate()
        self.sca = SimplifiedChannelAttention(channels)
        self.conv3 = nn.Conv2d(channels, channels, kernel_size=1)

        self.norm2 = LayerNorm2d(channels)
        self.conv4 = nn.Conv2d(channels, expanded, kernel_size=1)
        self.conv5 = nn.Conv2d(channels, channels, kernel_size=1)

    def forward(self, x):
        _check_channels(x, self.channels, 'NAFBlock')
        y = self.conv2(self.conv1(self.norm1(x)))
        y = self.conv3(self.sca(self.sg(y)))
        x = x + y

        y = self.conv5(self.sg(self.conv4(self.norm2(x))))
        return x + y


def nafblock(x: torch.Tensor, block: NAFBlock) -> torch.Tensor:
    return block(x)


def topk_mask(scores: torch.Tensor, kept: int, dim: int = -1) -> torch.Tensor:
    """Boolean mask of the `kept` largest entries along dim. Ties go to the lower index"""
    size = scores.shape[dim]
    if not 1 <= kept <= size:
        raise BlockShapeException(f"Kept count {kept} outside [1, {size}]")
    order = torch.sort(scores, dim=dim, descending=True, stable=True).indices
    mask = torch.zeros_like(scores, dtype=torch.bool)
    return mask.scatter(dim, order.narrow(dim, 0, kept), 1)


def masked_softmax(scores: torch.Tensor, kept: int, mask_fill: str = 'neg_inf',
                   select_along: str = 'row') -> torch.Tensor:
    """Row softmax over scores keeping only the top `kept` entries.

    Parameters
    ----------
    scores: Tensor
        ... x d x d attention scores
    kept: int
        entries kept per row (or per column)
    mask_fill: str, optional
        'neg_inf' (default) gives pruned entries exactly 0 weight. 'zero' sets
        pruned scores to 0 before the softmax, so they keep some weight
    select_along: str, optional
        'row' (default): every output channel keeps its strongest inputs.
        'column': every input channel keeps the outputs it scores highest on.
        Rows left with nothing output 0
    """
    if kept == scores.shape[-1]:
        return scores.softmax(dim=-1)
    mask = topk_mask(scores, kept, dim=-1 if select_along == 'row' else -2)
    if mask_fill == 'zero':
        return scores.masked_fill(~mask, 0.0).softmax(dim=-1)
    if select_along == 'row':
        return scores.masked_fill(~mask, float('-inf')).softmax(dim=-1)
    has_any = mask.any(dim=-1, keepdim=True)
    # fully pruned rows get finite scores, then are zeroed after the softmax
    safe = scores.masked_fill(~mask & has_any, float('-inf'))
    return safe.softmax(dim=-1) * has_any


def sparse_attention_branch(q: torch.Tensor, k: torch.Tensor, v: torch.Tensor, kept: int,
                            temperature, mask_fill: str = 'neg_inf',
                            select_along: str = 'row') -> torch.Tensor:
    """One top-k branch of transposed attention.

    q, k and v are ... x d_h x HW: every channel is a token of length HW.
    The d_h x d_h score matrix is normalize(q) @ normalize(k)^T times
    temperature, the reciprocal of the per-head scale.
    """
    q = F.normalize(q, dim=-1)
    k = F.normalize(k, dim=-1)
    scores = (q @ k.transpose(-2, -1)) * temperature
    return masked_softmax(scores, kept, mask_fill, select_along) @ v


class SparseSelfAttention(nn.Module):
    """Transposed (channel) attention averaged over K top-k branches that all
    share the same Q, K and V.

    Branches with the same kept count are evaluated once and weighted by how
    often they occur, which makes all rates 1 exactly dense attention.
    """

    def __init__(self, channels: int, heads: int, topk: TopKConfig = None, bias: bool = False):
        super().__init__()
        if heads < 1 or channels % heads:
            raise BlockShapeException(f"{heads} heads do not divide {channels} channels")
        self.channels = channels
        self.heads = heads
        self.topk = topk or TopKConfig()
        # scores are multiplied by this, the reciprocal of the per-head scale
        self.temperature = nn.Parameter(torch.ones(heads, 1, 1))
        self.qkv = nn.Conv2d(channels, channels * 3, kernel_size=1, bias=bias)
        self.qkv_dwconv = nn.Conv2d(channels * 3, channels * 3, kernel_size=3, padding=1,
                                    groups=channels * 3, bias=bias)
        self.project_out = nn.Conv2d(channels, channels, kernel_size=1, bias=bias)

    @property
    def head_dim(self) -> int:
        return self.channels // self.heads

    def branch_weights(self) -> List[tuple]:
        """[(kept count, weight)] with weights summing to 1"""
        counts = Counter(kept_count(rate, self.head_dim) for rate in self.topk.rates)
        return [(kept, n / self.topk.K) for kept, n in counts.items()]

    def qkv_heads(self, x):
        q, k, v = self.qkv_dwconv(self.qkv(x)).chunk(3, dim=1)
        return [rearrange(t, 'b (head c) h w -> b head c (h w)', head=self.heads) for t in (q, k, v)]

    def forward(self, x):
        _check_channels(x, self.channels, 'SparseSelfAttention')
        _, _, h, w = x.shape
        q, k, v = self.qkv_heads(x)
        q = F.normalize(q, dim=-1)
        k = F.normalize(k, dim=-1)
        scores = (q @ k.transpose(-2, -1)) * self.temperature

        out = None
        for kept, weight in self.branch_weights():
            branch = masked_softmax(scores, kept, self.topk.mask_fill, self.topk.select_along) @ v
            branch = branch if weight == 1.0 else branch * weight
            out = branch if out is None else out + branch

        out = rearrange(out, 'b head c (h w) -> b (head c) h w', head=self.heads, h=h, w=w)
        return self.project_out(out)


def ssa(x: torch.Tensor, module: SparseSelfAttention) -> torch.Tensor:
    return module(x)


class GatedFeedForward(nn.Module):
    """1x1 to two hidden halves, 3x3 depthwise on both, gelu(a) * b, 1x1 back"""

    def __init__(self, channels: int, expansion: float = 2.66, bias: bool = False):
        super().__init__()
        hidden = int(channels * expansion)
        self.project_in = nn.Conv2d(channels, hidden * 2, kernel_size=1, bias=bias)
        self.dwconv = nn.Conv2d(hidden * 2, hidden * 2, kernel_size=3, padding=1,
                                groups=hidden * 2, bias=bias)
        self.project_out = nn.Conv2d(hidden, channels, kernel_size=1, bias=bias)

    def forward(self, x):
        x1, x2 = self.dwconv(self.project_in(x)).chunk(2, dim=1)
        return self.project_out(F.gelu(x1) * x2)


class SparseTransformerBlock(nn.Module):
    """x + SSA(LN(x)), then + FFN(LN(.))"""

    def __init__(self, channels: int, heads: int, expansion: float = 2.66, topk: TopKConfig = None):
        super().__init__()
        self.channels = channels
        self.norm1 = LayerNorm2d(channels)
        self.attn = SparseSelfAttention(channels, heads, topk)
        self.norm2 = LayerNorm2d(channels)
        self.ffn = GatedFeedForward(channels, expansion)

    def forward(self, x):
        _check_channels(x, self.channels, 'SparseTransformerBlock')
        x = x + self.attn(self.norm1(x))
        return x + self.ffn(self.norm2(x))


def stb(x: torch.Tensor, block: SparseTransformerBlock) -> torch.Tensor:
    return block(x)


class Downsample(nn.Module):
    """3x3 conv with stride 2. Halves H and W"""

    def __init__(self, in_channels: int, out_channels: int = None):
        super().__init__()
        self.conv = nn.Conv2d(in_channels, out_channels or in_channels, kernel_size=3, stride=2,
                              padding=1, bias=False)

    def forward(self, x):
        if x.shape[-2] % 2 or x.shape[-1] % 2:
            raise BlockShapeException(f"Cannot downsample odd size {tuple(x.shape[-2:])}")
        return self.conv(x)


class Upsample(nn.Module):
    """1x1 conv then pixel shuffle. Doubles H and W"""

    def __init__(self, in_channels: int, out_channels: int = None):
        super().__init__()
        out_channels = out_channels or in_channels
        self.body = nn.Sequential(
            nn.Conv2d(in_channels, out_channels * 4, kernel_size=1, bias=False),
            nn.PixelShuffle(2))

    def forward(self, x):
        return self.body(x)


def downsample(x: torch.Tensor, module: Downsample) -> torch.Tensor:
    return module(x)


def upsample(x: torch.Tensor, module: Upsample) -> torch.Tensor:
    return module(x)


class SkipFusion(nn.Module):
    """Concatenate a skip connection and fuse back to `channels` with a 1x1 conv"""

    def __init__(self, channels: int, skip_channels: int = None):
        super().__init__()
        self.conv = nn.Conv2d(channels + (skip_channels or channels), channels, kernel_size=1)

    def forward(self, x, skip):
        return self.conv(torch.cat([x, skip], dim=1))
