"""Unnormalized density, energy and the adversarial value function.

The model tilts a reference distribution by ``exp(f(I; w))``.  With a
Gaussian reference of standard deviation ``sigma`` the energy is
``|I|^2 / (2 sigma^2) - f(I; w)``; with a uniform reference it is ``-f``.
Normalizing constants are never represented.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import net
from .tensor import sq_norm


@dataclass(frozen=True)
class ModelConfig:
    ref_kind: str = "gaussian"
    sigma: float = 1.0

    def __post_init__(self):
        if self.ref_kind not in ("gaussian", "uniform"):
            raise ValueError(f"ref_kind must be 'gaussian' or 'uniform', got {self.ref_kind!r}")
        if not (np.isfinite(self.sigma) and self.sigma > 0):
            raise ValueError(f"sigma must be finite and positive, got {self.sigma}")

    def quadratic(self, video: np.ndarray) -> float:
        if self.ref_kind == "uniform":
            return 0.0
        return sq_norm(video) / (2.0 * self.sigma ** 2)


def log_unnormalized_density(spec, params, cfg: ModelConfig, video) -> float:
    return net.score(spec, params, video) - cfg.quadratic(video)


def energy(spec, params, cfg: ModelConfig, video) -> float:
    return -log_unnormalized_density(spec, params, cfg, video)


def energy_grad(spec, params, cfg: ModelConfig, video) -> np.ndarray:
    b = net.grad_input(spec, params, video)
    if cfg.ref_kind == "uniform":
        return -b
    return np.asarray(video, dtype=np.float64) / cfg.sigma ** 2 - b


def batch_energy_grad(spec, params, cfg: ModelConfig, videos: np.ndarray):
    """Energies and energy gradients for a batch ``(B, C, H, W, T)``."""
    scores, b, _, _ = net.backprop(spec, params, videos, want_params=False)
    if cfg.ref_kind == "uniform":
        return -scores, -b
    quad = np.array([cfg.quadratic(v) for v in videos])
    return quad - scores, videos / cfg.sigma ** 2 - b


def energies_from_scores(cfg: ModelConfig, videos, scores) -> np.ndarray:
    return np.array([cfg.quadratic(v) for v in videos]) - np.asarray(scores)


def value_function(spec, params, cfg: ModelConfig, synthesized, observed) -> float:
    """Mean synthesized energy minus mean observed energy."""
    if len(synthesized) == 0 or len(observed) == 0:
        raise ValueError("value_function needs non-empty synthesized and observed lists")
    e_syn = [energy(spec, params, cfg, v) for v in synthesized]
    e_obs = [energy(spec, params, cfg, v) for v in observed]
    return float(np.mean(e_syn) - np.mean(e_obs))
