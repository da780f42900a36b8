"""SE-gate readouts: Gaussian top-fraction channel selection, heatmaps and modality importance."""
from __future__ import annotations

import math
from dataclasses import dataclass
from statistics import NormalDist

import numpy as np
from matplotlib import colormaps

from .config import MODALITIES


@dataclass
class ChannelSelection:
    threshold: float
    selected: np.ndarray  # sorted channel indices
    fraction: float
    fallback: bool = False


@dataclass
class HeatmapOverlay:
    intensity: np.ndarray  # (H, W) in [0, 1]
    composite: np.ndarray  # (H, W, 3) in [0, 1]

    def composite_uint8(self):
        return np.round(self.composite * 255.0).astype(np.uint8)


@dataclass
class ModalityImportance:
    audio: float
    face: float
    body: float

    def as_tuple(self):
        return (self.audio, self.face, self.body)


def gaussian_z(fraction: float) -> float:
    """Standard-normal quantile leaving ``fraction`` of the mass above it."""
    if not 0.0 < fraction < 1.0:
        raise ValueError("fraction must lie in (0, 1)")
    return NormalDist().inv_cdf(1.0 - fraction)


def gaussian_top_fraction_threshold(values, fraction: float = 0.10) -> float:
    """``mean + z * std`` (population std) with ``z`` the upper ``fraction`` Normal quantile."""
    v = np.asarray(values, dtype=np.float64).ravel()
    if v.size < 2:
        raise ValueError("need at least two values")
    return float(v.mean() + gaussian_z(fraction) * v.std())


def select_channels(gate, fraction: float = 0.10) -> ChannelSelection:
    """Channels whose gate value reaches the Gaussian top-``fraction`` threshold.

    The comparison is done on standardized values, which makes the result
    independent of any positive affine rescaling of the gate. When no
    channel qualifies (or all values are equal) the ``ceil(fraction * C)``
    largest values are taken instead, ties going to the lower index.
    """
    g = np.asarray(gate, dtype=np.float64).ravel()
    threshold = gaussian_top_fraction_threshold(g, fraction)
    mu, sigma = g.mean(), g.std()
    selected = np.empty(0, dtype=np.int64)
    if sigma > 0:
        selected = np.flatnonzero((g - mu) / sigma >= gaussian_z(fraction))
    fallback = selected.size == 0
    if fallback:
        k = max(1, math.ceil(fraction * g.size))
        order = np.lexsort((np.arange(g.size), -g))
        selected = np.sort(order[:k])
    return ChannelSelection(threshold, selected, fraction, fallback)


def cubic_kernel(x, a: float = -0.5):
    """Keys cubic convolution kernel."""
    x = np.abs(np.asarray(x, dtype=np.float64))
    out = np.zeros_like(x)
    near = x <= 1
    far = (x > 1) & (x < 2)
    out[near] = (a + 2) * x[near] ** 3 - (a + 3) * x[near] ** 2 + 1
    out[far] = a * x[far] ** 3 - 5 * a * x[far] ** 2 + 8 * a * x[far] - 4 * a
    return out


def bicubic_matrix(n_in: int, n_out: int) -> np.ndarray:
    """``(n_out, n_in)`` bicubic resampling matrix, half-pixel centres, edge replication."""
    centers = (np.arange(n_out) + 0.5) * n_in / n_out - 0.5
    base = np.floor(centers).astype(int)
    mat = np.zeros((n_out, n_in))
    for offset in range(-1, 3):
        src = base + offset
        w = cubic_kernel(centers - src)
        np.add.at(mat, (np.arange(n_out), np.clip(src, 0, n_in - 1)), w)
    return mat


def bicubic_upsample(image, height: int, width: int) -> np.ndarray:
    img = np.asarray(image, dtype=np.float64)
    return bicubic_matrix(img.shape[0], height) @ img @ bicubic_matrix(img.shape[1], width).T


def _minmax(x):
    lo, hi = x.min(), x.max()
    if hi - lo <= 0:
        return np.zeros_like(x)
    return (x - lo) / (hi - lo)


def render_heatmap(maps, selection: ChannelSelection, base, gate=None, alpha: float = 0.5,
                   cmap: str = "jet") -> HeatmapOverlay:
    """Overlay the selected channel maps, bicubically upsampled, on ``base``.

    maps: ``(C, h, w)`` pre-pool activations. base: ``(H, W, 3)`` image in
    [0, 1] (uint8 is rescaled). With ``gate`` the selected channels are
    averaged with gate weights instead of uniformly.
    """
    maps = np.asarray(maps, dtype=np.float64)
    base = np.asarray(base)
    base = base.astype(np.float64) / 255.0 if base.dtype == np.uint8 else base.astype(np.float64)
    chosen = maps[selection.selected]
    if gate is None:
        agg = chosen.mean(axis=0)
    else:
        w = np.asarray(gate, dtype=np.float64)[selection.selected]
        agg = np.tensordot(w / w.sum(), chosen, axes=1)
    intensity = np.clip(bicubic_upsample(_minmax(agg), base.shape[0], base.shape[1]), 0.0, 1.0)
    colors = colormaps[cmap](intensity)[..., :3]
    composite = (1.0 - alpha) * base + alpha * colors
    return HeatmapOverlay(intensity, composite)


def modality_importance(gate, embed_dim: int = 128) -> ModalityImportance:
    """Per-modality mean gate value, normalized to sum to one."""
    g = np.asarray(gate, dtype=np.float64).ravel()
    if g.size != len(MODALITIES) * embed_dim:
        raise ValueError(f"fusion gate must have {len(MODALITIES) * embed_dim} entries, got {g.size}")
    means = g.reshape(len(MODALITIES), embed_dim).mean(axis=1)
    total = means.sum()
    if total <= 0:
        raise ValueError("fusion gate has no positive mass")
    return ModalityImportance(*(means / total))
