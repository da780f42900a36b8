"""Neural building blocks used by the encoders and the fusion head.

Every block is a plain :class:`torch.nn.Module`; backward passes come from
autograd and are checked against central finite differences in the test
suite.
"""
from __future__ import annotations

import math

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ConfigError


class SEBlock(nn.Module):
    """Squeeze-and-excitation channel gate.

    Works on any ``(N, C, *rest)`` tensor: the squeeze is the mean over all
    trailing dimensions, the excitation is ``C -> C/r -> C`` with ReLU and
    sigmoid. ``forward`` returns both the rescaled tensor and the gate so
    callers can keep the exact gate used for scaling.
    """

    def __init__(self, channels: int, reduction: int = 16):
        super().__init__()
        if channels % reduction:
            raise ConfigError(
                f"SE channels ({channels}) must be divisible by the reduction ratio ({reduction})"
            )
        self.channels = channels
        self.reduction = reduction
        self.fc1 = nn.Linear(channels, channels // reduction)
        self.fc2 = nn.Linear(channels // reduction, channels)

    def excite(self, squeezed: torch.Tensor) -> torch.Tensor:
        return torch.sigmoid(self.fc2(F.relu(self.fc1(squeezed))))

    def forward(self, x, keep=None, gate=None):
        """Gate ``x``.

        keep: optional boolean ``(C,)`` mask. Dropped channels contribute zero
            to the squeeze descriptor and receive a gate of exactly 0, so the
            output never depends on their values.
        gate: optional ``(N, C)`` gate that replaces the computed one.
        """
        if x.shape[1] != self.channels:
            raise ValueError(f"expected {self.channels} channels, got {x.shape[1]}")
        dims = tuple(range(2, x.ndim))
        if gate is None:
            if keep is not None:
                x = torch.where(_bcast(keep, x), x, torch.zeros((), dtype=x.dtype))
            squeezed = x.mean(dim=dims) if dims else x
            gate = self.excite(squeezed)
        if keep is not None:
            gate = torch.where(keep[None, :], gate, torch.zeros((), dtype=gate.dtype))
        out = x * gate.reshape(gate.shape + (1,) * len(dims))
        if keep is not None:
            out = torch.where(_bcast(keep, out), out, torch.zeros((), dtype=out.dtype))
        return out, gate


def _bcast(keep, x):
    return keep.reshape((1, -1) + (1,) * (x.ndim - 2))


class DSConv1d(nn.Module):
    """Depthwise-separable temporal convolution on ``(N, C, T)`` input.

    Per-channel kernel-3 convolution (zero padded, length preserving), then a
    pointwise 1x1 mix. With ``norm_act`` a batch norm and ReLU follow the
    pointwise conv. The residual is added only when ``cin == cout``.
    """

    def __init__(self, cin: int, cout: int, kernel: int = 3, residual: bool = True,
                 norm_act: bool = False):
        super().__init__()
        if kernel % 2 != 1:
            raise ConfigError("DSConv1d kernel must be odd to preserve length")
        self.cin, self.cout = cin, cout
        self.depthwise = nn.Conv1d(cin, cin, kernel, padding=kernel // 2, groups=cin, bias=False)
        self.pointwise = nn.Conv1d(cin, cout, 1, bias=False)
        self.bn = nn.BatchNorm1d(cout) if norm_act else None
        self.residual = residual and cin == cout

    def forward(self, x):
        if x.ndim != 3 or x.shape[1] != self.cin:
            raise ValueError(f"expected (N, {self.cin}, T) input, got {tuple(x.shape)}")
        h = self.pointwise(self.depthwise(x))
        if self.bn is not None:
            h = F.relu(self.bn(h))
        return x + h if self.residual else h


class MultiHeadSelfAttention(nn.Module):
    """Post-norm multi-head self-attention: ``LN(x + W_o · attn(x))``.

    Input is ``(N, T, D)``; attention is bidirectional over the whole window.
    The attention weights of the last call are kept in ``last_weights``.
    """

    def __init__(self, dim: int, heads: int = 8):
        super().__init__()
        if dim % heads:
            raise ConfigError(f"attention dim {dim} not divisible by {heads} heads")
        self.dim, self.heads = dim, heads
        self.head_dim = dim // heads
        self.q = nn.Linear(dim, dim)
        self.k = nn.Linear(dim, dim)
        self.v = nn.Linear(dim, dim)
        self.out = nn.Linear(dim, dim)
        self.norm = nn.LayerNorm(dim)
        self.last_weights = None

    def forward(self, x):
        n, t, d = x.shape
        if d != self.dim:
            raise ValueError(f"expected feature dim {self.dim}, got {d}")

        def split(z):
            return z.reshape(n, t, self.heads, self.head_dim).transpose(1, 2)

        q, k, v = split(self.q(x)), split(self.k(x)), split(self.v(x))
        scores = q @ k.transpose(-1, -2) / math.sqrt(self.head_dim)
        weights = torch.softmax(scores, dim=-1)
        self.last_weights = weights.detach()
        mixed = (weights @ v).transpose(1, 2).reshape(n, t, d)
        return self.norm(x + self.out(mixed))


def sinusoidal_positions(length: int, dim: int, dtype=torch.float32) -> torch.Tensor:
    pos = torch.arange(length, dtype=torch.float64)[:, None]
    freq = torch.exp(torch.arange(0, dim, 2, dtype=torch.float64) * (-math.log(10000.0) / dim))
    table = torch.zeros(length, dim, dtype=torch.float64)
    table[:, 0::2] = torch.sin(pos * freq)
    table[:, 1::2] = torch.cos(pos * freq[: dim // 2])
    return table.to(dtype)


class BasicBlock(nn.Module):
    """ResNet basic block (two 3x3 convs) with an optional SE gate on the residual branch."""

    def __init__(self, cin: int, cout: int, stride=1, se_reduction: int | None = None):
        super().__init__()
        self.conv1 = nn.Conv2d(cin, cout, 3, stride=stride, padding=1, bias=False)
        self.bn1 = nn.BatchNorm2d(cout)
        self.conv2 = nn.Conv2d(cout, cout, 3, padding=1, bias=False)
        self.bn2 = nn.BatchNorm2d(cout)
        self.se = SEBlock(cout, se_reduction) if se_reduction else None
        self.shortcut = None
        if stride != 1 and stride != (1, 1) or cin != cout:
            self.shortcut = nn.Sequential(
                nn.Conv2d(cin, cout, 1, stride=stride, bias=False), nn.BatchNorm2d(cout)
            )

    def forward(self, x):
        h = F.relu(self.bn1(self.conv1(x)))
        h = self.bn2(self.conv2(h))
        if self.se is not None:
            h, _ = self.se(h)
        skip = x if self.shortcut is None else self.shortcut(x)
        return F.relu(h + skip)


def weighted_cross_entropy(logits, labels, class_weights=(1.0, 1.0)):
    """Mean over frames of ``-w[y] * log softmax(logits)[y]`` (log-sum-exp stable).

    ``logits`` has shape ``(..., 2)``; ``labels`` the leading shape with 0/1 entries.
    """
    logp = torch.log_softmax(logits, dim=-1)
    labels = labels.long()
    w = torch.as_tensor(class_weights, dtype=logits.dtype, device=logits.device)[labels]
    picked = logp.gather(-1, labels.unsqueeze(-1)).squeeze(-1)
    return -(w * picked).mean()
