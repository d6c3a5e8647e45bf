"""Pairwise Markov random field baseline for occlusion recovery.

Each channel is a separate 3-D grid field over integer levels with
potentials ``lambda * |u - v|^p`` (p = 1 or 2) between the six axis
neighbours (up, down, left, right, previous and next frame).  Occluded
coordinates are resampled by single-site Gibbs sweeps in raster order
conditional on everything else.
"""
from __future__ import annotations

from dataclasses import dataclass

import numba
import numpy as np

from .tensor import as_mask


@dataclass(frozen=True)
class MrfConfig:
    potential: str = "l1"
    weight: float = 1.0
    sweeps: int = 100
    estimate: str = "mean_of_last_n"   # or last_sample
    n: int = 20
    levels: int = 256

    def __post_init__(self):
        if self.potential not in ("l1", "l2"):
            raise ValueError(f"potential must be l1 or l2, got {self.potential!r}")
        if not (np.isfinite(self.weight) and self.weight > 0):
            raise ValueError("weight must be finite and positive")
        if self.estimate not in ("mean_of_last_n", "last_sample"):
            raise ValueError(f"unknown estimate {self.estimate!r}")
        if self.sweeps < 1:
            raise ValueError("sweeps must be at least 1")
        if self.estimate == "mean_of_last_n" and not 1 <= self.n <= self.sweeps:
            raise ValueError("n must be between 1 and sweeps")

    @property
    def power(self) -> int:
        return 1 if self.potential == "l1" else 2


def neighbors(coord, shape) -> list[tuple[int, int, int, int]]:
    """Axis neighbours of ``(c, y, x, t)`` in a video of shape (C, H, W, T), same channel."""
    c, y, x, t = coord
    _, h, w, nt = shape
    if not (0 <= c < shape[0] and 0 <= y < h and 0 <= x < w and 0 <= t < nt):
        raise IndexError(f"coordinate {coord} outside video of shape {shape}")
    out = []
    for dy, dx, dt in ((-1, 0, 0), (1, 0, 0), (0, -1, 0), (0, 1, 0), (0, 0, -1), (0, 0, 1)):
        yy, xx, tt = y + dy, x + dx, t + dt
        if 0 <= yy < h and 0 <= xx < w and 0 <= tt < nt:
            out.append((c, yy, xx, tt))
    return out


def gibbs_conditional(neighbor_values, cfg: MrfConfig) -> np.ndarray:
    """Probabilities over levels ``0 .. cfg.levels - 1`` given the neighbour values."""
    v = np.arange(cfg.levels, dtype=np.float64)[:, None]
    n = np.asarray(neighbor_values, dtype=np.float64)[None, :]
    logw = -cfg.weight * (np.abs(v - n) ** cfg.power).sum(axis=1)
    p = np.exp(logw - logw.max())
    return p / p.sum()


@numba.njit(cache=True)
def _conditional_into(vals, count, lam, power, levels, out):
    top = -np.inf
    for v in range(levels):
        acc = 0.0
        for i in range(count):
            d = abs(v - vals[i])
            acc += d if power == 1 else d * d
        out[v] = -lam * acc
        if out[v] > top:
            top = out[v]
    total = 0.0
    for v in range(levels):
        out[v] = np.exp(out[v] - top)
        total += out[v]
    return total


@numba.njit(cache=True)
def conditional_jit(vals, lam, power, levels):
    out = np.empty(levels)
    total = _conditional_into(vals, len(vals), lam, power, levels, out)
    return out / total


@numba.njit(cache=True)
def _sweep(state, sites, uniforms, lam, power, levels):
    _, h, w, nt = state.shape
    out = np.empty(levels)
    vals = np.empty(6)
    for s in range(sites.shape[0]):
        c, y, x, t = sites[s, 0], sites[s, 1], sites[s, 2], sites[s, 3]
        count = 0
        if y > 0:
            vals[count] = state[c, y - 1, x, t]
            count += 1
        if y < h - 1:
            vals[count] = state[c, y + 1, x, t]
            count += 1
        if x > 0:
            vals[count] = state[c, y, x - 1, t]
            count += 1
        if x < w - 1:
            vals[count] = state[c, y, x + 1, t]
            count += 1
        if t > 0:
            vals[count] = state[c, y, x, t - 1]
            count += 1
        if t < nt - 1:
            vals[count] = state[c, y, x, t + 1]
            count += 1
        total = _conditional_into(vals, count, lam, power, levels, out)
        target = uniforms[s] * total
        acc = 0.0
        pick = levels - 1
        for v in range(levels):
            acc += out[v]
            if acc > target:
                pick = v
                break
        state[c, y, x, t] = pick


def occluded_sites(mask: np.ndarray, channels: int) -> np.ndarray:
    """Occluded coordinates (c, y, x, t) in raster order: frame, channel, row, column."""
    occ = np.broadcast_to(mask[0] == 0, (channels, *mask.shape[1:]))
    tcyx = np.argwhere(np.moveaxis(occ, 3, 0))
    return np.ascontiguousarray(tcyx[:, [1, 2, 3, 0]]).astype(np.int64)


def _initial_state(video: np.ndarray, mask: np.ndarray, levels: int) -> np.ndarray:
    state = video.copy()
    keep = mask[0].astype(bool)
    for c in range(video.shape[0]):
        fill = np.round(video[c][keep].mean()) if keep.any() else (levels - 1) // 2
        state[c][~keep] = np.clip(fill, 0, levels - 1)
    return state


def gibbs_trace(video, mask, cfg: MrfConfig, rng: np.random.Generator, sweeps: int):
    """Values of the occluded sites after each sweep, shape (sweeps, n_sites)."""
    video = np.asarray(video, dtype=np.float64)
    mask = as_mask(mask, video)
    sites = occluded_sites(mask, video.shape[0])
    state = _initial_state(video, mask, cfg.levels)
    trace = np.empty((sweeps, len(sites)))
    idx = tuple(sites.T)
    for s in range(sweeps):
        _sweep(state, sites, rng.random(len(sites)), cfg.weight, cfg.power, cfg.levels)
        trace[s] = state[idx]
    return sites, trace


def mrf_recover(video, mask, cfg: MrfConfig, rng: np.random.Generator) -> np.ndarray:
    """Gibbs recovery of the occluded coordinates; observed ones are returned unchanged."""
    video = np.asarray(video, dtype=np.float64)
    mask = as_mask(mask, video)
    sites = occluded_sites(mask, video.shape[0])
    if len(sites) == 0:
        return video.copy()
    state = _initial_state(video, mask, cfg.levels)
    idx = tuple(sites.T)
    keep_from = cfg.sweeps - (cfg.n if cfg.estimate == "mean_of_last_n" else 1)
    acc = np.zeros(len(sites))
    for s in range(cfg.sweeps):
        _sweep(state, sites, rng.random(len(sites)), cfg.weight, cfg.power, cfg.levels)
        if s >= keep_from:
            acc += state[idx]
    out = video.copy()
    out[idx] = acc / (cfg.sweeps - keep_from)
    return out
