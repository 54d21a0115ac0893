"""Gradient-weighted class activation maps for the duel classifier.

The chain: back-propagate a class score to the tapped feature maps,
average each channel's gradient into one weight, form the rectified
weighted sum of the maps, keep the top fraction of entries, upsample
with a Catmull-Rom bicubic kernel to frame resolution, and blend the
result over the frame in red.

All stages are pure functions over arrays plus a small ImportanceMap
record carrying the class tag and gating state.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from . import autodiff as ad
from .errors import ValidationError
from .flow import GrayImage
from .model import ForwardPass, class_score

OVERLAY_ALPHA = 0.6
CATMULL_A = -0.5


@dataclass(frozen=True)
class ImportanceMap:
    """Spatial evidence for one class; values are non-negative."""

    values: np.ndarray
    target_class: str
    gated: bool = False
    source_shape: tuple[int, int] = (0, 0)

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        if v.ndim != 2:
            raise ValidationError(f"importance map must be 2-D, got shape {v.shape}")
        if not np.isfinite(v).all() or (v < 0.0).any():
            raise ValidationError("importance map values must be finite and >= 0")
        object.__setattr__(self, "values", v)
        if self.source_shape == (0, 0):
            object.__setattr__(self, "source_shape", v.shape)

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape


def feature_grads(fp: ForwardPass, target_class: str) -> np.ndarray:
    """Gradient of the class score w.r.t. every tap-layer activation."""
    grads = ad.backward(class_score(fp, target_class))
    return grads.grad(fp.tap)


def channel_weights(grad_maps: np.ndarray) -> np.ndarray:
    """Average each channel's gradient map to one weight (Z = h*w)."""
    grad_maps = np.asarray(grad_maps, dtype=np.float64)
    if grad_maps.ndim != 3:
        raise ValidationError(f"expected [K,h,w] gradients, got shape {grad_maps.shape}")
    return grad_maps.mean(axis=(1, 2))


def importance_map(weights: np.ndarray, feature_maps: np.ndarray,
                   target_class: str) -> ImportanceMap:
    """Rectified weighted sum of the feature maps."""
    weights = np.asarray(weights, dtype=np.float64)
    feature_maps = np.asarray(feature_maps, dtype=np.float64)
    if weights.ndim != 1 or feature_maps.ndim != 3 or len(weights) != len(feature_maps):
        raise ValidationError(
            f"need one weight per feature map: {weights.shape} vs {feature_maps.shape}")
    summed = np.einsum("k,khw->hw", weights, feature_maps)
    return ImportanceMap(np.maximum(summed, 0.0), target_class)


def importance_from_forward(fp: ForwardPass, target_class: str) -> ImportanceMap:
    g = feature_grads(fp, target_class)
    return importance_map(channel_weights(g), fp.tap.data, target_class)


def gate_top_fraction(m: ImportanceMap, q: float = 0.05) -> ImportanceMap:
    """Zero everything below the nearest-rank (1-q) quantile; keep ties.

    An all-zero map passes through unchanged (there is no top to keep).
    """
    if not 0.0 < q < 1.0:
        raise ValidationError(f"top fraction must be in (0, 1), got {q}")
    v = m.values
    if not v.any():
        return replace(m, gated=True)
    k = math.ceil((1.0 - q) * v.size)
    threshold = np.sort(v, axis=None)[k - 1]
    return replace(m, values=np.where(v >= threshold, v, 0.0), gated=True)


def _catmull_rom(t: float) -> float:
    a = CATMULL_A
    t = abs(t)
    if t <= 1.0:
        return ((a + 2.0) * t - (a + 3.0)) * t * t + 1.0
    if t < 2.0:
        return a * (((t - 5.0) * t + 8.0) * t - 4.0)
    return 0.0


def _resample_matrix(n_src: int, n_dst: int) -> np.ndarray:
    """Row d holds the 4-tap cubic weights, edge taps clamped and merged."""
    mat = np.zeros((n_dst, n_src))
    scale = n_src / n_dst
    for d in range(n_dst):
        s = (d + 0.5) * scale - 0.5
        base = math.floor(s)
        for tap in range(base - 1, base + 3):
            mat[d, min(max(tap, 0), n_src - 1)] += _catmull_rom(s - tap)
    return mat


def upsample_bicubic(m: ImportanceMap, height: int, width: int) -> ImportanceMap:
    """Catmull-Rom resampling with half-pixel alignment; ringing clipped to 0."""
    h, w = m.values.shape
    if height < h or width < w:
        raise ValidationError(
            f"target {height}x{width} smaller than source {h}x{w}")
    rows = _resample_matrix(h, height)
    cols = _resample_matrix(w, width)
    up = rows @ m.values @ cols.T
    return replace(m, values=np.maximum(up, 0.0), source_shape=m.source_shape)


def overlay(frame: GrayImage, m: ImportanceMap,
            alpha: float = OVERLAY_ALPHA) -> np.ndarray:
    """Blend the map over the frame in red; output [3,H,W] on the 8-bit grid.

    Per-pixel opacity is alpha * value / max(value); a zero map leaves
    the frame untouched (replicated to RGB).
    """
    if not 0.0 <= alpha <= 1.0:
        raise ValidationError(f"alpha must be in [0, 1], got {alpha}")
    if m.values.shape != frame.pixels.shape:
        raise ValidationError(
            f"map shape {m.values.shape} does not match frame {frame.pixels.shape}")
    peak = m.values.max()
    a = (alpha / peak) * m.values if peak > 0.0 else np.zeros_like(m.values)
    gray = frame.pixels
    rgb = np.stack([(1.0 - a) * gray + a, (1.0 - a) * gray, (1.0 - a) * gray])
    return np.rint(rgb * 255.0) / 255.0
