"""Finite-difference checks of the analytic gradients on random tiny nets.

A coordinate is only compared when the central difference stays on one
linear piece: the activation pattern at both probe points must equal the
base pattern, and every pre-activation the probe moves must sit more than
``margin`` away from zero.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import energy as en
from . import net
from .net import LayerSpec, NetParams, NetSpec


@dataclass
class CheckResult:
    max_rel_error: dict[str, float] = field(default_factory=dict)
    compared: dict[str, int] = field(default_factory=dict)
    skipped: dict[str, int] = field(default_factory=dict)

    def merge(self, other: "CheckResult") -> None:
        for op, err in other.max_rel_error.items():
            self.max_rel_error[op] = max(self.max_rel_error.get(op, 0.0), err)
            self.compared[op] = self.compared.get(op, 0) + other.compared[op]
            self.skipped[op] = self.skipped.get(op, 0) + other.skipped[op]


def rel_error(analytic, numeric) -> np.ndarray:
    return np.abs(analytic - numeric) / (np.abs(analytic) + 1e-8)


def random_tiny_net(rng: np.random.Generator, max_layers: int = 3, layers: int | None = None):
    """A random net of at most three layers with an input of at most 1x6x6x4."""
    h, w, t = int(rng.integers(3, 7)), int(rng.integers(3, 7)), int(rng.integers(2, 5))
    video_shape = (1, h, w, t)
    n_layers = layers or int(rng.integers(1, max_layers + 1))
    specs, dims = [], (h, w, t)
    for idx in range(n_layers):
        last = idx == n_layers - 1
        kind = "conv3d"
        if last and idx > 0:
            kind = str(rng.choice(["conv3d", "spatial_full", "full"]))
        filters = int(rng.integers(1, 4))
        if kind == "conv3d":
            # leave room for the layers still to come
            room = n_layers - idx - 1
            kernel = tuple(int(rng.integers(1, max(1, d - room) + 1)) for d in dims)
            stride = tuple(int(rng.integers(1, 3)) for _ in dims)
            layer = LayerSpec(kind, filters, kernel, stride)
            dims = tuple((d - k) // s + 1 for d, k, s in zip(dims, kernel, stride))
        elif kind == "spatial_full":
            kt = int(rng.integers(1, dims[2] + 1))
            layer = LayerSpec(kind, filters, (0, 0, kt), (1, 1, 1))
            dims = (1, 1, dims[2] - kt + 1)
        else:
            layer = LayerSpec(kind, filters)
            dims = (1, 1, 1)
        specs.append(layer)
    spec = NetSpec(1, tuple(specs))
    params = net.init_params(spec, video_shape, rng, std=0.5)
    for b in params.biases:
        b[:] = rng.normal(0.0, 0.3, size=b.shape)
    video = rng.normal(size=video_shape)
    return spec, params, video


def _clean(base_pre, probe_pre, margin: float) -> bool:
    for b, p in zip(base_pre, probe_pre):
        if not np.array_equal(b > 0, p > 0):
            return False
        moved = b != p
        if np.any(np.abs(b[moved]) <= margin):
            return False
    return True


def check_input(spec, params, video, h=1e-4, margin=1e-3, cfg: en.ModelConfig | None = None):
    """Compare grad_input (or energy_grad when ``cfg`` is given) with central differences."""
    video = np.asarray(video, dtype=np.float64)
    n = video.size
    eye = np.eye(n).reshape(n, *video.shape)
    probes = np.concatenate([video + h * eye, video - h * eye])
    trace = net.propagate(spec, params, probes)
    base = net.propagate(spec, params, video[None])
    base_pre = [p[0] for p in base.pre]
    top = trace.features[-1].reshape(2 * n, -1).sum(axis=1)
    if cfg is None:
        vals, analytic = top, net.grad_input(spec, params, video)
    else:
        vals = np.array([cfg.quadratic(p) for p in probes]) - top
        analytic = en.energy_grad(spec, params, cfg, video)
    numeric = (vals[:n] - vals[n:]) / (2 * h)
    errs, skipped = [], 0
    for i in range(n):
        if _clean(base_pre, [p[i] for p in trace.pre], margin) and \
                _clean(base_pre, [p[n + i] for p in trace.pre], margin):
            errs.append(rel_error(analytic.flat[i], numeric[i]))
        else:
            skipped += 1
    return (max(errs) if errs else 0.0), len(errs), skipped


def check_params(spec, params: NetParams, video, h=1e-4, margin=1e-3):
    video = np.asarray(video, dtype=np.float64)
    analytic = net.grad_params(spec, params, video)
    base_pre = [p[0] for p in net.propagate(spec, params, video[None]).pre]
    errs, skipped = [], 0
    for arr, garr in zip(params.arrays(), analytic.arrays()):
        for idx in np.ndindex(arr.shape):
            vals, clean = [], True
            orig = arr[idx]
            for sign in (1, -1):
                arr[idx] = orig + sign * h
                tr = net.propagate(spec, params, video[None])
                clean = clean and _clean(base_pre, [p[0] for p in tr.pre], margin)
                vals.append(float(tr.features[-1].sum()))
            arr[idx] = orig
            if clean:
                errs.append(rel_error(garr[idx], (vals[0] - vals[1]) / (2 * h)))
            else:
                skipped += 1
    return (max(errs) if errs else 0.0), len(errs), skipped


def check_net(spec, params, video, h=1e-4, margin=1e-3) -> CheckResult:
    res = CheckResult()
    checks = {
        "grad_input": lambda: check_input(spec, params, video, h, margin),
        "grad_params": lambda: check_params(spec, params, video, h, margin),
        "energy_grad": lambda: check_input(spec, params, video, h, margin, en.ModelConfig()),
    }
    for op, run in checks.items():
        err, n_ok, n_skip = run()
        res.max_rel_error[op], res.compared[op], res.skipped[op] = err, n_ok, n_skip
    return res


def run_suite(n_nets: int = 50, seed: int = 0, max_layers: int = 3, layers: int | None = None,
              h: float = 1e-4, margin: float = 1e-3) -> CheckResult:
    rng = np.random.default_rng(seed)
    total = CheckResult()
    for _ in range(n_nets):
        spec, params, video = random_tiny_net(rng, max_layers, layers)
        total.merge(check_net(spec, params, video, h, margin))
    return total
