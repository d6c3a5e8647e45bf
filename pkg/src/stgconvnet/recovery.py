"""Learning from occluded videos: joint learning, synthesis and recovery.

Every iteration first runs ``k`` masked Langevin steps on each training
video (only occluded coordinates move), then performs an ordinary learning
iteration that uses the completed videos as observations.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .learner import TrainConfig, TrainState, compute_stats, learning_iteration, start
from .sampler import ChainState, advance, run_langevin
from .tensor import ShapeError, as_mask, read_mask

OCCLUSION_KINDS = ("salt_pepper", "single_region", "missing_frames", "custom")


@dataclass(frozen=True)
class OcclusionSpec:
    kind: str
    block: tuple[int, int] = (7, 7)
    coverage: float = 0.5
    region: tuple[int, int] = (60, 60)
    fraction: float = 0.5
    path: str | None = None

    def __post_init__(self):
        if self.kind not in OCCLUSION_KINDS:
            raise ValueError(f"unknown occlusion kind {self.kind!r}")
        if self.kind == "salt_pepper" and not 0 < self.coverage < 1:
            raise ValueError("salt_pepper coverage must be in (0, 1)")
        if self.kind == "missing_frames" and not 0 < self.fraction < 1:
            raise ValueError("missing_frames fraction must be in (0, 1)")
        if self.kind == "custom" and not self.path:
            raise ValueError("custom occlusion needs a mask path")

    @classmethod
    def parse(cls, text: str) -> "OcclusionSpec":
        """``salt_pepper[:coverage[:HxW]]``, ``single_region[:HxW]``,
        ``missing_frames[:fraction]`` or ``custom:path``."""
        kind, _, rest = text.partition(":")
        args = rest.split(":") if rest else []
        if kind == "salt_pepper":
            kw = {}
            if args:
                kw["coverage"] = float(args[0])
            if len(args) > 1:
                kw["block"] = _hw(args[1])
            return cls(kind, **kw)
        if kind == "single_region":
            return cls(kind, region=_hw(args[0])) if args else cls(kind)
        if kind == "missing_frames":
            return cls(kind, fraction=float(args[0])) if args else cls(kind)
        if kind == "custom":
            return cls(kind, path=rest)
        raise ValueError(f"unknown occlusion kind {kind!r}")


def _hw(text: str) -> tuple[int, int]:
    parts = [int(p) for p in text.lower().split("x")]
    return (parts[0], parts[0]) if len(parts) == 1 else (parts[0], parts[1])


def make_mask(dims, spec: OcclusionSpec, rng: np.random.Generator) -> np.ndarray:
    """Binary mask of shape (1, H, W, T) for video size ``dims = (H, W, T)``; 0 marks occlusion."""
    h, w, t = dims
    mask = np.ones((1, h, w, t), dtype=np.uint8)
    if spec.kind == "salt_pepper":
        bh, bw = spec.block
        if bh > h or bw > w:
            raise ShapeError(f"block {spec.block} larger than frame {(h, w)}")
        target = spec.coverage * h * w
        for f in range(t):
            frame = mask[0, :, :, f]
            occluded = 0
            # blocks may overlap; stop once this frame reaches the coverage target
            while occluded < target:
                y = int(rng.integers(0, h - bh + 1))
                x = int(rng.integers(0, w - bw + 1))
                occluded += int(frame[y:y + bh, x:x + bw].sum())
                frame[y:y + bh, x:x + bw] = 0
    elif spec.kind == "single_region":
        rh, rw = spec.region
        if rh > h or rw > w:
            raise ShapeError(f"region {spec.region} larger than frame {(h, w)}")
        y = int(rng.integers(0, h - rh + 1))
        x = int(rng.integers(0, w - rw + 1))
        mask[0, y:y + rh, x:x + rw, :] = 0
    elif spec.kind == "missing_frames":
        count = int(np.floor(spec.fraction * t))
        frames = rng.choice(t, size=count, replace=False)
        mask[0, :, :, frames] = 0
    else:
        mask = read_mask(spec.path)
        if mask.shape[1:] != (h, w, t):
            raise ShapeError(f"custom mask {mask.shape[1:]} does not match video {(h, w, t)}")
    return mask


def recover_step(spec, params, cfg, recovered, mask, k: int, eps: float, rng) -> np.ndarray:
    """``k`` Langevin steps that move only the occluded (mask 0) coordinates."""
    mask = as_mask(mask, recovered)
    return run_langevin(spec, params, cfg, recovered, eps, rng, k, mask)


def recovery_error(original, recovered, mask) -> float:
    """Mean absolute difference over occluded coordinates."""
    diff = _occluded_diff(original, recovered, mask)
    return float(np.mean(np.abs(diff)))


def recovery_rmse(original, recovered, mask) -> float:
    diff = _occluded_diff(original, recovered, mask)
    return float(np.sqrt(np.mean(diff ** 2)))


def _occluded_diff(original, recovered, mask) -> np.ndarray:
    original = np.asarray(original, dtype=np.float64)
    recovered = np.asarray(recovered, dtype=np.float64)
    if original.shape != recovered.shape:
        raise ShapeError(f"shape mismatch {original.shape} vs {recovered.shape}")
    occluded = np.broadcast_to(as_mask(mask, original) == 0, original.shape)
    if not occluded.any():
        raise ValueError("mask has no occluded coordinates")
    return (recovered - original)[occluded]


@dataclass
class RecoveryState:
    train: TrainState
    recovered: ChainState       # preprocessed scale
    masks: np.ndarray           # (M, 1, H, W, T)
    observed: np.ndarray        # raw input videos

    @property
    def params(self):
        return self.train.params

    @property
    def chains(self):
        return self.train.chains

    @property
    def diagnostics(self):
        return self.train.diagnostics

    def recovered_raw(self) -> np.ndarray:
        """Recovered videos in input units; observed coordinates are the inputs verbatim."""
        raw = np.stack([self.train.stats.inverse(v) for v in self.recovered.chains])
        return np.where(np.broadcast_to(self.masks.astype(bool), raw.shape), self.observed, raw)


def fill_occluded(videos: np.ndarray, masks: np.ndarray) -> np.ndarray:
    """Set occluded coordinates to the per-channel mean of the same video's observed ones."""
    out = videos.copy()
    for m in range(len(videos)):
        keep = masks[m, 0].astype(bool)
        for c in range(videos.shape[1]):
            fill = videos[m, c][keep].mean() if keep.any() else 0.0
            out[m, c][~keep] = fill
    return out


def train_with_recovery(spec_or_preset, occluded_videos, masks, cfg: TrainConfig,
                        params=None, callback=None) -> RecoveryState:
    if len(occluded_videos) == 0:
        raise ValueError("need at least one training video")
    raw = np.stack([np.asarray(v, dtype=np.float64) for v in occluded_videos])
    if len(masks) != len(raw):
        raise ValueError("need one mask per video")
    masks = np.stack([as_mask(m, v) for m, v in zip(masks, raw)])
    stats = compute_stats(raw, cfg.preprocessing, masks)
    data = fill_occluded(np.stack([stats.apply(v) for v in raw]), masks)
    state = start(spec_or_preset, data, cfg, stats, params, masks)
    rngs = [np.random.default_rng((cfg.seed, 2, m)) for m in range(len(data))]
    recovered = ChainState(data, rngs, state.chains.step_size)
    rec = RecoveryState(state, recovered, masks, raw)
    for _ in range(cfg.iterations):
        spec = state.spec.truncated(state.active_layers())
        advance(spec, state.params, cfg.model, recovered, cfg.k, masks)
        batch = state.next_batch(len(data))
        row = learning_iteration(state, recovered.chains[batch])
        if callback is not None:
            callback(rec, row)
    return rec


def inpaint_background(spec_or_preset, video, mask, cfg: TrainConfig, params=None) -> np.ndarray:
    """Fill the masked-out (0) region of a single video with synthesized content."""
    video = np.asarray(video, dtype=np.float64)
    mask = as_mask(mask, video)
    if mask.all():
        return video.copy()
    state = train_with_recovery(spec_or_preset, [video], [mask], cfg, params)
    return state.recovered_raw()[0]
