"""Gradient-weighted class activation heatmaps.

Per-map weights are the spatial means of the class-score gradients; the
weighted sum of feature maps is rectified, bilinearly upsampled to the
model input shape and normalized by its maximum (an identically-zero
map stays zero).  Computed and returned in float64; the wire format
narrows heatmaps to float32.
"""

from __future__ import annotations

import numpy as np

from .errors import ShapeMismatch
from .imaging import resize_bilinear


def gradcam(feature_maps: np.ndarray, classification_gradients: np.ndarray,
            output_height: int, output_width: int) -> np.ndarray:
    """Heatmap in [0, 1] of shape (output_height, output_width)."""
    maps = np.asarray(feature_maps, dtype=np.float64)
    grads = np.asarray(classification_gradients, dtype=np.float64)
    if maps.ndim != 3 or maps.shape != grads.shape:
        raise ShapeMismatch(
            f"feature maps {maps.shape} and gradients {grads.shape} must share one (K, h, w) shape")
    alphas = grads.mean(axis=(1, 2))
    raw = np.maximum(np.einsum("k,kij->ij", alphas, maps), 0.0)
    up = resize_bilinear(raw, output_width, output_height)
    up = np.maximum(up, 0.0)
    peak = up.max()
    if peak > 0.0:
        up = up / peak
    return up
