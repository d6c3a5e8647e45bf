"""Analysis-by-synthesis maximum likelihood training.

Each iteration advances the persistent synthesis chains, compares the mean
parameter gradient of the score on observed videos (``H_obs``) with that on
synthesized videos (``H_syn``), and moves the parameters by
``eta * scale_l * (H_obs - H_syn)`` layer by layer.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import net
from .energy import ModelConfig, energies_from_scores
from .net import NetParams, NetSpec
from .sampler import ChainState, advance, init_chains, rng_from_state, rng_state
from .tensor import ShapeError, _atomic_write, read_stv, write_stv

CHECKPOINT_VERSION = 1
PREPROCESSING = ("none", "mean_subtract", "mean_subtract_and_scale")


@dataclass
class TrainConfig:
    iterations: int = 100
    langevin_steps: int = 20
    num_chains: int = 3
    learning_rate: float = 0.01
    layer_rate_scales: tuple[float, ...] = (1.0, 0.1, 0.01)
    scheme: str = "end_to_end"          # or layer_by_layer
    layer_add_every: int = 400
    minibatch_size: int | None = None   # None: every video each iteration
    seed: int = 0
    epsilon: float | None = None        # None: 0.002 * data scale
    ref_kind: str = "gaussian"
    sigma: float = 1.0
    preprocessing: str = "mean_subtract"
    chain_init: str = "noise"
    lr_decay: str = "none"              # or inverse_t
    init_std: float = 0.01
    recovery_steps: int | None = None   # None: same as langevin_steps
    checkpoint_every: int = 0

    def __post_init__(self):
        self.layer_rate_scales = tuple(float(s) for s in self.layer_rate_scales)
        self.validate()

    def validate(self):
        if self.iterations < 1:
            raise ValueError("iterations must be at least 1")
        if self.langevin_steps < 1:
            raise ValueError("langevin_steps must be at least 1")
        if self.num_chains < 1:
            raise ValueError("num_chains must be at least 1")
        if self.scheme not in ("end_to_end", "layer_by_layer"):
            raise ValueError(f"unknown scheme {self.scheme!r}")
        if self.layer_add_every < 1:
            raise ValueError("layer_add_every must be at least 1")
        if self.minibatch_size is not None and self.minibatch_size < 1:
            raise ValueError("minibatch_size must be positive")
        if self.epsilon is not None and self.epsilon < 0:
            raise ValueError("epsilon must be non-negative")
        if self.preprocessing not in PREPROCESSING:
            raise ValueError(f"unknown preprocessing {self.preprocessing!r}")
        if self.lr_decay not in ("none", "inverse_t"):
            raise ValueError(f"unknown lr_decay {self.lr_decay!r}")
        if self.recovery_steps is not None and self.recovery_steps < 0:
            raise ValueError("recovery_steps must be non-negative")
        ModelConfig(self.ref_kind, self.sigma)

    @property
    def model(self) -> ModelConfig:
        return ModelConfig(self.ref_kind, self.sigma)

    @property
    def k(self) -> int:
        return self.langevin_steps if self.recovery_steps is None else self.recovery_steps


# -- preprocessing -----------------------------------------------------------

@dataclass
class PreprocessStats:
    mode: str
    mean: np.ndarray   # per channel
    scale: float = 1.0

    def apply(self, v: np.ndarray) -> np.ndarray:
        return (v - self.mean[:, None, None, None]) / self.scale

    def inverse(self, v: np.ndarray) -> np.ndarray:
        return v * self.scale + self.mean[:, None, None, None]

    def to_dict(self) -> dict:
        return {"mode": self.mode, "mean": self.mean.tolist(), "scale": self.scale}

    @classmethod
    def from_dict(cls, d: dict) -> "PreprocessStats":
        return cls(d["mode"], np.asarray(d["mean"], dtype=np.float64), float(d["scale"]))


def compute_stats(videos, mode: str, masks=None) -> PreprocessStats:
    """Per-channel mean and global standard deviation, optionally over observed coordinates only."""
    if mode not in PREPROCESSING:
        raise ValueError(f"unknown preprocessing {mode!r}")
    x = np.stack([np.asarray(v, dtype=np.float64) for v in videos])
    c = x.shape[1]
    if masks is None:
        w = np.ones((x.shape[0], 1, *x.shape[2:]))
    else:
        w = np.stack([np.asarray(m, dtype=np.float64) for m in masks])
    w = np.broadcast_to(w, x.shape)
    if mode == "none":
        return PreprocessStats(mode, np.zeros(c))
    counts = w.sum(axis=(0, 2, 3, 4))
    if np.any(counts == 0):
        raise ValueError("no observed coordinates to compute statistics from")
    mean = (x * w).sum(axis=(0, 2, 3, 4)) / counts
    if mode == "mean_subtract":
        return PreprocessStats(mode, mean)
    centred = x - mean[None, :, None, None, None]
    std = float(np.sqrt((centred ** 2 * w).sum() / w.sum()))
    if std == 0:
        raise ValueError("degenerate scale: training data has zero variance")
    return PreprocessStats(mode, mean, std)


def preprocess(videos, mode: str, masks=None):
    stats = compute_stats(videos, mode, masks)
    return [stats.apply(np.asarray(v, dtype=np.float64)) for v in videos], stats


def data_scale(videos: np.ndarray, masks: np.ndarray | None = None) -> float:
    """Per-coordinate standard deviation of (preprocessed) training data."""
    if masks is None:
        masks = np.ones((videos.shape[0], 1, *videos.shape[2:]), dtype=bool)
    w = np.broadcast_to(masks.astype(bool), videos.shape)
    s = float(np.std(videos[w])) if w.any() else 0.0
    return s if s > 0 else 1.0


# -- gradient and update ---------------------------------------------------------

def _stack(videos) -> np.ndarray:
    return np.stack([np.asarray(v, dtype=np.float64) for v in videos])


def estimate_gradient(spec: NetSpec, params: NetParams, observed, synthesized) -> NetParams:
    """``H_obs - H_syn``: mean score gradients on observed minus synthesized videos."""
    if len(observed) == 0 or len(synthesized) == 0:
        raise ValueError("estimate_gradient needs non-empty observed and synthesized sets")
    grad, _ = _gradient_and_value(spec, params, ModelConfig(), _stack(observed), _stack(synthesized))
    return grad


def _gradient_and_value(spec, params, model, obs, syn):
    s_obs, _, g_obs, _ = net.backprop(spec, params, obs, want_input=False)
    s_syn, _, g_syn, _ = net.backprop(spec, params, syn, want_input=False)
    grad = g_obs.scaled(1.0 / len(obs)) - g_syn.scaled(1.0 / len(syn))
    value = float(np.mean(energies_from_scores(model, syn, s_syn))
                  - np.mean(energies_from_scores(model, obs, s_obs)))
    return grad, value


def update_params(params: NetParams, gradient: NetParams, eta: float,
                  layer_rate_scales) -> NetParams:
    """``w + eta * scale_l * g`` for the layers covered by ``gradient``; others are kept."""
    n = len(gradient)
    if len(layer_rate_scales) < n:
        raise ValueError(f"need {n} layer rate scales, got {len(layer_rate_scales)}")
    new = params.copy()
    for l in range(n):
        if gradient.weights[l].shape != params.weights[l].shape:
            raise ShapeError(f"layer {l + 1}: gradient shape {gradient.weights[l].shape} "
                             f"does not match {params.weights[l].shape}")
        step = eta * layer_rate_scales[l]
        new.weights[l] = params.weights[l] + step * gradient.weights[l]
        new.biases[l] = params.biases[l] + step * gradient.biases[l]
    return new


# -- training loop -----------------------------------------------------------------

@dataclass
class TrainState:
    spec: NetSpec
    params: NetParams
    chains: ChainState
    config: TrainConfig
    stats: PreprocessStats
    iteration: int = 0
    diagnostics: list[dict] = field(default_factory=list)
    batch_rng: np.random.Generator | None = None
    _order: list[int] = field(default_factory=list)

    def active_layers(self, t: int | None = None) -> int:
        t = self.iteration if t is None else t
        n = len(self.spec.layers)
        if self.config.scheme == "end_to_end":
            return n
        return min(n, 1 + t // self.config.layer_add_every)

    def learning_rate(self, t: int | None = None) -> float:
        t = self.iteration if t is None else t
        if self.config.lr_decay == "inverse_t":
            return self.config.learning_rate / (t + 1)
        return self.config.learning_rate

    def next_batch(self, n_videos: int) -> np.ndarray:
        size = self.config.minibatch_size
        if size is None or size >= n_videos:
            return np.arange(n_videos)
        # without replacement within an epoch, reshuffled every epoch
        if len(self._order) < size:
            self._order += [int(i) for i in self.batch_rng.permutation(n_videos)]
        batch, self._order = self._order[:size], self._order[size:]
        return np.asarray(batch)


def resolve_spec(spec_or_preset, channels: int) -> NetSpec:
    if isinstance(spec_or_preset, str):
        return net.preset(spec_or_preset, channels)
    return spec_or_preset


def start(spec_or_preset, videos: np.ndarray, cfg: TrainConfig, stats: PreprocessStats,
          params: NetParams | None = None, masks: np.ndarray | None = None) -> TrainState:
    """Initial state for preprocessed ``videos`` of shape (M, C, H, W, T)."""
    spec = resolve_spec(spec_or_preset, videos.shape[1])
    if len(cfg.layer_rate_scales) < len(spec.layers):
        raise ValueError(f"layer_rate_scales has {len(cfg.layer_rate_scales)} entries "
                         f"but the net has {len(spec.layers)} layers")
    shape = videos.shape[1:]
    if params is None:
        params = net.init_params(spec, shape, np.random.default_rng((cfg.seed, 3)), cfg.init_std)
    else:
        net.check_params(spec, params, spec.geometry(shape))
        params = params.copy()
    eps = cfg.epsilon if cfg.epsilon is not None else 0.002 * data_scale(videos, masks)
    chains = init_chains(shape, cfg.num_chains, cfg.chain_init, cfg.seed, cfg.sigma, eps)
    return TrainState(spec, params, chains, cfg, stats,
                      batch_rng=np.random.default_rng((cfg.seed, 1)))


def learning_iteration(state: TrainState, observed: np.ndarray) -> dict:
    """Advance the chains, estimate ``H_obs - H_syn`` and update the parameters."""
    cfg = state.config
    n = state.active_layers()
    spec = state.spec.truncated(n)
    model = cfg.model
    advance(spec, state.params, model, state.chains, cfg.langevin_steps)
    grad, value = _gradient_and_value(spec, state.params, model, observed, state.chains.chains)
    eta = state.learning_rate()
    state.params = update_params(state.params, grad, eta, cfg.layer_rate_scales[:n])
    state.iteration += 1
    row = {"iteration": state.iteration, "active_layers": n, "grad_norm": grad.norm(),
           "value": value, "param_norm": state.params.norm(), "learning_rate": eta}
    state.diagnostics.append(row)
    return row


def train(spec_or_preset, videos, cfg: TrainConfig, params: NetParams | None = None,
          checkpoint_dir=None, callback=None) -> TrainState:
    """Learn a model from training videos (raw intensities) and synthesize from it."""
    if len(videos) == 0:
        raise ValueError("need at least one training video")
    shapes = {np.shape(v) for v in videos}
    if len(shapes) != 1:
        raise ShapeError(f"training videos differ in shape: {sorted(shapes)}")
    pre, stats = preprocess(videos, cfg.preprocessing)
    data = _stack(pre)
    state = start(spec_or_preset, data, cfg, stats, params)
    for _ in range(cfg.iterations):
        batch = state.next_batch(len(data))
        row = learning_iteration(state, data[batch])
        if callback is not None:
            callback(state, row)
        if checkpoint_dir and cfg.checkpoint_every and state.iteration % cfg.checkpoint_every == 0:
            save_checkpoint(state, checkpoint_dir)
    return state


# -- checkpoints -------------------------------------------------------------------

def config_to_dict(cfg: TrainConfig) -> dict:
    d = asdict(cfg)
    d["layer_rate_scales"] = list(cfg.layer_rate_scales)
    return d


def save_checkpoint(state: TrainState, directory) -> Path:
    """Write params (STP1), chains (STV1 f32) and a JSON manifest into ``directory``."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    net.save_params(state.params, directory / "params.stp")
    chain_files = []
    for m, chain in enumerate(state.chains.chains):
        name = f"chain_{m:02d}.stv"
        write_stv(chain, directory / name)
        chain_files.append(name)
    manifest = {
        "version": CHECKPOINT_VERSION,
        "iteration": state.iteration,
        "net": net.spec_to_text(state.spec),
        "config": config_to_dict(state.config),
        "preprocess": state.stats.to_dict(),
        "epsilon": state.chains.step_size,
        "chains": chain_files,
        "chain_rng": [rng_state(r) for r in state.chains.rngs],
    }
    _atomic_write(directory / "manifest.json", json.dumps(manifest, indent=1).encode())
    return directory


def load_checkpoint(directory) -> TrainState:
    directory = Path(directory)
    manifest = json.loads((directory / "manifest.json").read_text())
    if manifest.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"checkpoint version {manifest.get('version')} is not supported "
                         f"(expected {CHECKPOINT_VERSION})")
    spec = net.spec_from_text(manifest["net"])
    cfg_dict = manifest["config"]
    cfg = TrainConfig(**{f.name: cfg_dict[f.name] for f in fields(TrainConfig) if f.name in cfg_dict})
    chains = np.stack([read_stv(directory / name) for name in manifest["chains"]])
    rngs = [rng_from_state(s) for s in manifest["chain_rng"]]
    state = TrainState(spec, net.load_params(directory / "params.stp"),
                       ChainState(chains, rngs, manifest["epsilon"]), cfg,
                       PreprocessStats.from_dict(manifest["preprocess"]),
                       iteration=manifest["iteration"])
    return state

