"""Synthetic periodic videos and spectral summaries for desk-scale experiments."""
from __future__ import annotations

import numpy as np

from .net import LayerSpec, NetSpec


def drifting_sinusoid(k, n: int = 16, amplitude: float = 100.0, mean: float = 128.0) -> np.ndarray:
    """Gray plane wave ``mean + A sin(2 pi (ky y + kx x + kt t) / n)`` of shape (1, n, n, n)."""
    y, x, t = np.meshgrid(np.arange(n), np.arange(n), np.arange(n), indexing="ij")
    return (mean + amplitude * np.sin(2 * np.pi * (k[0] * y + k[1] * x + k[2] * t) / n))[None]


def dominant_frequencies(video) -> tuple[tuple[int, int], int]:
    """Argmax of the DFT magnitude (DC removed), as ``((fy, fx), ft)``.

    The spatial peak is taken from the magnitude summed over temporal
    frequency and given a canonical sign (fy > 0, or fy == 0 and fx >= 0).
    The temporal peak is taken from the magnitude summed over space and folded
    into [0, T/2].  Channels are averaged first.
    """
    v = np.asarray(video, dtype=np.float64).mean(axis=0)
    mag = np.abs(np.fft.fftn(v - v.mean()))
    h, w, n = mag.shape
    spatial = mag.sum(axis=2)
    spatial[0, 0] = 0
    fy, fx = np.unravel_index(np.argmax(spatial), spatial.shape)
    fy = int(fy if fy <= h // 2 else fy - h)
    fx = int(fx if fx <= w // 2 else fx - w)
    if fy < 0 or (fy == 0 and fx < 0):
        fy, fx = -fy, -fx
    temporal = mag.sum(axis=(0, 1))
    temporal[0] = 0
    ft = int(np.argmax(temporal))
    return (fy, fx), min(ft, n - ft)


def desk_net() -> NetSpec:
    """Two conv3d layers sized for 16x16x16 gray inputs (output 4 x 4x4x4)."""
    return NetSpec(1, (LayerSpec("conv3d", 8, (5, 5, 5), (2, 2, 2)),
                       LayerSpec("conv3d", 4, (3, 3, 3), (1, 1, 1))))
