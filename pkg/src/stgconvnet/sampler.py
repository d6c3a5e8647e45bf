"""Langevin dynamics over persistent chains and its zero-temperature limit.

One step is ``I <- I - (eps^2 / 2) * dE/dI + eps * Z`` with ``Z`` standard
normal.  Each chain owns a generator seeded with ``seed ^ chain_index`` so
results do not depend on how chains are scheduled.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import energy as en
from .tensor import ShapeError, read_stv

DEFAULT_NUM_CHAINS = 3


def chain_rng(seed: int, index: int) -> np.random.Generator:
    return np.random.default_rng(seed ^ index)


def rng_state(rng: np.random.Generator) -> dict:
    return rng.bit_generator.state


def rng_from_state(state: dict) -> np.random.Generator:
    bg = getattr(np.random, state["bit_generator"])()
    bg.state = state
    return np.random.Generator(bg)


@dataclass
class ChainState:
    chains: np.ndarray                 # (M, C, H, W, T)
    rngs: list[np.random.Generator]
    step_size: float

    def __post_init__(self):
        if self.chains.ndim != 5:
            raise ShapeError(f"chains must be (M, C, H, W, T), got {self.chains.shape}")
        if len(self.rngs) != len(self.chains):
            raise ValueError("one generator per chain is required")

    def __len__(self) -> int:
        return len(self.chains)


def _check_finite(x: np.ndarray) -> np.ndarray:
    if not np.all(np.isfinite(x)):
        raise FloatingPointError("Langevin update produced non-finite values")
    return x


def langevin_step(spec, params, cfg: en.ModelConfig, chain: np.ndarray, eps: float,
                  rng: np.random.Generator | None, mask: np.ndarray | None = None,
                  noise: np.ndarray | None = None) -> np.ndarray:
    """One Langevin step for a single video.

    ``mask`` (1 = observed) freezes coordinates.  ``noise`` replaces the
    Gaussian draw, which lets tests run the drift alone.
    """
    if eps < 0:
        raise ValueError("step size must be non-negative")
    chain = np.asarray(chain, dtype=np.float64)
    if mask is not None and mask.shape[-3:] != chain.shape[-3:]:
        raise ShapeError(f"mask {mask.shape} does not match chain {chain.shape}")
    if eps == 0:
        return chain.copy()
    if noise is None:
        noise = rng.standard_normal(chain.shape)
    elif noise.shape != chain.shape:
        raise ShapeError(f"noise {noise.shape} does not match chain {chain.shape}")
    grad = en.energy_grad(spec, params, cfg, chain)
    new = chain - 0.5 * eps * eps * grad + eps * noise
    if mask is not None:
        new = np.where(mask.astype(bool), chain, new)
    return _check_finite(new)


def run_langevin(spec, params, cfg, chain, eps, rng, steps: int, mask=None) -> np.ndarray:
    if steps < 0:
        raise ValueError("steps must be non-negative")
    chain = np.asarray(chain, dtype=np.float64).copy()
    for _ in range(steps):
        chain = langevin_step(spec, params, cfg, chain, eps, rng, mask)
    return chain


def gradient_descent_step(spec, params, cfg, chain, eps: float) -> np.ndarray:
    if eps <= 0:
        raise ValueError("step size must be positive")
    chain = np.asarray(chain, dtype=np.float64)
    return _check_finite(chain - 0.5 * eps * eps * en.energy_grad(spec, params, cfg, chain))


def descend(spec, params, cfg, chain, eps: float, tol: float = 1e-8, max_steps: int = 100_000):
    """Zero-temperature dynamics until the update is below ``tol``.

    The step is halved whenever energy would increase.  Returns the final
    point and the energy after every accepted step.
    """
    x = np.asarray(chain, dtype=np.float64)
    e = en.energy(spec, params, cfg, x)
    history = [e]
    for _ in range(max_steps):
        y = gradient_descent_step(spec, params, cfg, x, eps)
        e_new = en.energy(spec, params, cfg, y)
        if e_new > e:
            eps *= 0.5
            if eps < 1e-12:
                break
            continue
        moved = float(np.max(np.abs(y - x)))
        x, e = y, e_new
        history.append(e)
        if moved <= tol:
            break
    return x, history


def advance(spec, params, cfg: en.ModelConfig, state: ChainState, steps: int,
            masks: np.ndarray | None = None) -> ChainState:
    """Run ``steps`` Langevin steps on every chain, updating ``state`` in place.

    Chains are stepped together through one batched backward pass; noise is
    drawn chain by chain in index order from each chain's own generator.
    ``masks`` has shape ``(M, 1, H, W, T)`` with 1 marking frozen coordinates.
    """
    if steps < 0:
        raise ValueError("steps must be non-negative")
    eps = state.step_size
    if eps == 0 or steps == 0:
        return state
    keep = None
    if masks is not None:
        if masks.shape[0] != len(state) or masks.shape[-3:] != state.chains.shape[-3:]:
            raise ShapeError(f"masks {masks.shape} do not match chains {state.chains.shape}")
        keep = masks.astype(bool)
    x = state.chains
    shape = x.shape[1:]
    for _ in range(steps):
        _, grad = en.batch_energy_grad(spec, params, cfg, x)
        noise = np.stack([rng.standard_normal(shape) for rng in state.rngs])
        new = x - 0.5 * eps * eps * grad + eps * noise
        if keep is not None:
            new = np.where(keep, x, new)
        x = _check_finite(new)
    state.chains = x
    return state


def init_chains(shape, count: int = DEFAULT_NUM_CHAINS, mode: str = "noise", seed: int = 0,
                sigma: float = 1.0, step_size: float = 0.1, paths=None) -> ChainState:
    """Fresh chains of video shape (C, H, W, T).

    ``noise`` draws iid N(0, sigma^2) from each chain's generator, ``zeros``
    starts at the origin and ``from_files`` loads STV1 videos from ``paths``.
    """
    if count < 1:
        raise ValueError("need at least one chain")
    rngs = [chain_rng(seed, m) for m in range(count)]
    shape = tuple(shape)
    if mode == "noise":
        chains = np.stack([sigma * rng.standard_normal(shape) for rng in rngs])
    elif mode == "zeros":
        chains = np.zeros((count, *shape))
    elif mode == "from_files":
        if paths is None or len(paths) != count:
            raise ValueError("from_files needs one path per chain")
        chains = np.stack([read_stv(p) for p in paths])
        if chains.shape[1:] != shape:
            raise ShapeError(f"chain files have shape {chains.shape[1:]}, expected {shape}")
    else:
        raise ValueError(f"unknown chain init mode {mode!r}")
    return ChainState(chains, rngs, step_size)
