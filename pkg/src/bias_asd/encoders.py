"""Stream encoders: visual backbone + temporal network (face, body) and the SE-ResNet audio encoder.

All modules take batched input with the clip axis first. Visual crops are
``(N, T, 3, H, W)``, aligned MFCC blocks are ``(N, T, 4, 13)``. Every
stream ends as an ``(N, T, embed_dim)`` embedding.
"""
from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .config import ModelConfig
from .nn_blocks import BasicBlock, DSConv1d, MultiHeadSelfAttention, SEBlock


@dataclass
class VisualBackboneOutput:
    pre_pool_maps: torch.Tensor  # (N, T, C, h, w), already SE-gated
    se_gate: torch.Tensor        # (N, T, C)
    embedding: torch.Tensor      # (N, T, C)


def _stage(cin, cout, blocks, stride, se_reduction=None):
    layers = [BasicBlock(cin, cout, stride, se_reduction)]
    layers += [BasicBlock(cout, cout, 1, se_reduction) for _ in range(blocks - 1)]
    return nn.Sequential(*layers)


class VisualBackbone(nn.Module):
    """3D conv front, per-frame ResNet18-style trunk, one SE block, spatial average pool.

    The 3D conv uses a temporal kernel of 5 (padded, so T is preserved) and a
    7x7 spatial kernel with stride 2, followed by a 3x3/2 max pool as in
    ResNet18. The four trunk stages use strides 1, 2, 2, 1, giving 7x7 maps
    for 112x112 crops.
    """

    stage_strides = (1, 2, 2, 1)

    def __init__(self, widths=(16, 32, 64, 128), blocks=(2, 2, 2, 2), se_reduction=16,
                 temporal_kernel=5):
        super().__init__()
        self.front = nn.Conv3d(3, widths[0], (temporal_kernel, 7, 7), stride=(1, 2, 2),
                               padding=(temporal_kernel // 2, 3, 3), bias=False)
        self.front_bn = nn.BatchNorm3d(widths[0])
        stages, cin = [], widths[0]
        for width, n, stride in zip(widths, blocks, self.stage_strides):
            stages.append(_stage(cin, width, n, stride))
            cin = width
        self.trunk = nn.Sequential(*stages)
        self.se = SEBlock(widths[-1], se_reduction)
        self.out_channels = widths[-1]

    def forward(self, crops) -> VisualBackboneOutput:
        if crops.ndim != 5 or crops.shape[2] != 3:
            raise ValueError(f"expected (N, T, 3, H, W) crops, got {tuple(crops.shape)}")
        n, t = crops.shape[:2]
        x = F.relu(self.front_bn(self.front(crops.transpose(1, 2))))  # (N, C, T, h, w)
        x = x.transpose(1, 2).reshape(n * t, *x.shape[1:2], *x.shape[3:])
        x = F.max_pool2d(x, 3, stride=2, padding=1)
        maps, gate = self.se(self.trunk(x))
        maps = maps.reshape(n, t, *maps.shape[1:])
        return VisualBackboneOutput(
            pre_pool_maps=maps,
            se_gate=gate.reshape(n, t, -1),
            embedding=maps.mean(dim=(-2, -1)),
        )


class VisualTemporal(nn.Module):
    """Five residual DS-Conv1D layers, then a 1x1 conv down to ``embed_dim``."""

    def __init__(self, channels: int, embed_dim: int = 128, layers: int = 5):
        super().__init__()
        self.layers = nn.ModuleList(
            [DSConv1d(channels, channels, residual=True, norm_act=True) for _ in range(layers)]
        )
        self.project = nn.Conv1d(channels, embed_dim, 1)

    def forward(self, x):
        h = x.transpose(1, 2)
        for layer in self.layers:
            h = layer(h)
        return self.project(h).transpose(1, 2)


class VisualEncoder(nn.Module):
    """Backbone + temporal network (+ optional self-attention) for one visual stream."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.backbone = VisualBackbone(cfg.visual_widths, cfg.visual_blocks, cfg.se_reduction)
        self.temporal = VisualTemporal(cfg.visual_widths[-1], cfg.embed_dim, cfg.temporal_layers)
        self.attention = (MultiHeadSelfAttention(cfg.embed_dim, cfg.heads)
                          if "visual" in cfg.attention_sites else None)

    def forward(self, crops):
        out = self.backbone(crops)
        emb = self.temporal(out.embedding)
        if self.attention is not None:
            emb = self.attention(emb)
        return emb, out


class AudioEncoder(nn.Module):
    """SE-ResNet34-style encoder over the ``1 x 4T x 13`` MFCC image.

    Stage strides on (time, freq) are (1,1), (2,2), (2,2), (1,2): the 4T time
    axis comes back to T, the frequency axis (13 -> 2) is averaged away, and
    a 1x1 conv projects to ``embed_dim``.
    """

    strides = ((1, 1), (2, 2), (2, 2), (1, 2))

    def __init__(self, widths=(16, 32, 64, 128), blocks=(3, 4, 6, 3), se_reduction=16,
                 embed_dim=128):
        super().__init__()
        self.stem = nn.Conv2d(1, widths[0], 3, padding=1, bias=False)
        self.stem_bn = nn.BatchNorm2d(widths[0])
        stages, cin = [], widths[0]
        for width, n, stride in zip(widths, blocks, self.strides):
            stages.append(_stage(cin, width, n, stride, se_reduction))
            cin = width
        self.trunk = nn.Sequential(*stages)
        self.project = nn.Conv1d(widths[-1], embed_dim, 1)

    def forward(self, mfcc):
        if mfcc.ndim != 4 or mfcc.shape[2:] != (4, 13):
            raise ValueError(f"expected (N, T, 4, 13) MFCC blocks, got {tuple(mfcc.shape)}")
        n, t = mfcc.shape[:2]
        x = mfcc.reshape(n, 1, 4 * t, 13)
        x = self.trunk(F.relu(self.stem_bn(self.stem(x))))
        x = x.mean(dim=-1)  # (N, C, T)
        return self.project(x).transpose(1, 2)
