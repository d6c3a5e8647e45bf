"""Spatial-temporal ConvNet with ReLU units and exact reverse-mode gradients.

Every layer is a strided "valid" 3-D filter bank followed by ``max(0, r)``.
The score of a video is the sum of all responses of the top layer.  Inputs
are batched internally as ``(batch, channels, height, width, frames)``; the
single-video functions below wrap the batched path.
"""
from __future__ import annotations

import itertools
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .tensor import FormatError, ShapeError, _atomic_write, inner

KINDS = ("conv3d", "spatial_full", "full")


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    num_filters: int
    kernel: tuple[int, int, int] = (1, 1, 1)
    stride: tuple[int, int, int] = (1, 1, 1)

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown layer kind {self.kind!r}; expected one of {KINDS}")
        if self.num_filters < 1:
            raise ValueError("num_filters must be positive")
        object.__setattr__(self, "kernel", tuple(int(k) for k in self.kernel))
        object.__setattr__(self, "stride", tuple(int(s) for s in self.stride))
        if len(self.kernel) != 3 or len(self.stride) != 3:
            raise ValueError("kernel and stride need three components (h, w, t)")
        if any(s < 1 for s in self.stride):
            raise ValueError("strides must be positive")
        if self.kind == "conv3d" and any(k < 1 for k in self.kernel):
            raise ValueError("conv3d kernel sizes must be positive")
        if self.kind == "spatial_full" and self.kernel[2] < 1:
            raise ValueError("spatial_full needs a positive temporal kernel size")


@dataclass(frozen=True)
class Geometry:
    """A layer resolved against a concrete input size."""
    kind: str
    in_shape: tuple[int, int, int, int]   # (channels, h, w, t)
    kernel: tuple[int, int, int]
    stride: tuple[int, int, int]
    out_shape: tuple[int, int, int, int]  # (filters, h, w, t)

    @property
    def weight_shape(self) -> tuple[int, ...]:
        return (self.out_shape[0], self.in_shape[0], *self.kernel)


@dataclass(frozen=True)
class NetSpec:
    input_channels: int
    layers: tuple[LayerSpec, ...]

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple(self.layers))
        if not self.layers:
            raise ValueError("a net needs at least one layer")

    def truncated(self, n: int) -> "NetSpec":
        return NetSpec(self.input_channels, self.layers[:n])

    def with_channels(self, channels: int) -> "NetSpec":
        return NetSpec(channels, self.layers)

    def geometry(self, video_shape) -> list[Geometry]:
        """Resolve kernels and output sizes for a video of shape (C, H, W, T)."""
        c, h, w, t = video_shape
        if c != self.input_channels:
            raise ShapeError(f"net expects {self.input_channels} input channels, video has {c}")
        geoms = []
        for idx, layer in enumerate(self.layers, start=1):
            dims = (h, w, t)
            if layer.kind == "conv3d":
                kernel, stride = layer.kernel, layer.stride
            elif layer.kind == "spatial_full":
                kernel, stride = (h, w, layer.kernel[2]), (1, 1, layer.stride[2])
            else:
                kernel, stride = dims, (1, 1, 1)
            if any(k > d for k, d in zip(kernel, dims)):
                raise ShapeError(
                    f"layer {idx} ({layer.kind}): kernel {kernel} does not fit input {dims}")
            out = tuple((d - k) // s + 1 for d, k, s in zip(dims, kernel, stride))
            geoms.append(Geometry(layer.kind, (c, h, w, t), kernel, stride,
                                  (layer.num_filters, *out)))
            c, (h, w, t) = layer.num_filters, out
        return geoms


@dataclass
class NetParams:
    """Weights ``(N_l, N_{l-1}, kh, kw, kt)`` and biases ``(N_l,)`` per layer.

    Also used for parameter gradients, which may cover only the lower layers.
    """
    weights: list[np.ndarray]
    biases: list[np.ndarray]

    def __len__(self) -> int:
        return len(self.weights)

    def arrays(self):
        for w, b in zip(self.weights, self.biases):
            yield w
            yield b

    def copy(self) -> "NetParams":
        return NetParams([w.copy() for w in self.weights], [b.copy() for b in self.biases])

    def zeros_like(self) -> "NetParams":
        return NetParams([np.zeros_like(w) for w in self.weights],
                         [np.zeros_like(b) for b in self.biases])

    def truncated(self, n: int) -> "NetParams":
        return NetParams(self.weights[:n], self.biases[:n])

    def scaled(self, a: float) -> "NetParams":
        return NetParams([a * w for w in self.weights], [a * b for b in self.biases])

    def __sub__(self, other: "NetParams") -> "NetParams":
        return NetParams([a - b for a, b in zip(self.weights, other.weights)],
                         [a - b for a, b in zip(self.biases, other.biases)])

    def dot(self, other: "NetParams") -> float:
        return float(sum(np.sum(a * b) for a, b in zip(self.arrays(), other.arrays())))

    def norm(self) -> float:
        return float(np.sqrt(self.dot(self)))

    def flat(self) -> np.ndarray:
        return np.concatenate([a.ravel() for a in self.arrays()])

    def equal(self, other: "NetParams") -> bool:
        return len(self) == len(other) and all(
            a.shape == b.shape and np.array_equal(a, b)
            for a, b in zip(self.arrays(), other.arrays()))


def init_params(spec: NetSpec, video_shape, rng: np.random.Generator,
                std: float = 0.01) -> NetParams:
    """Gaussian weights (mean 0, given std) and zero biases, lowest layer first."""
    weights, biases = [], []
    for g in spec.geometry(video_shape):
        weights.append(rng.normal(0.0, std, size=g.weight_shape))
        biases.append(np.zeros(g.out_shape[0]))
    return NetParams(weights, biases)


def check_params(spec: NetSpec, params: NetParams, geoms: list[Geometry]) -> None:
    if len(params) < len(geoms):
        raise ShapeError(f"net has {len(geoms)} layers but only {len(params)} parameter blocks")
    for idx, g in enumerate(geoms):
        if params.weights[idx].shape != g.weight_shape:
            raise ShapeError(f"layer {idx + 1}: weights {params.weights[idx].shape} "
                             f"do not match {g.weight_shape}")
        if params.biases[idx].shape != (g.out_shape[0],):
            raise ShapeError(f"layer {idx + 1}: bias shape {params.biases[idx].shape}")


# -- filter bank kernels --------------------------------------------------

def _by_position(g: Geometry) -> bool:
    # Loop over whichever is shorter: output positions or kernel offsets.
    return np.prod(g.out_shape[1:]) <= np.prod(g.kernel)


def _offset_slices(g: Geometry, i: int, j: int, k: int):
    _, ho, wo, to = g.out_shape
    sh, sw, st = g.stride
    return (slice(None), slice(None),
            slice(i, i + sh * (ho - 1) + 1, sh),
            slice(j, j + sw * (wo - 1) + 1, sw),
            slice(k, k + st * (to - 1) + 1, st))


def _window(g: Geometry, a: int, b: int, c: int):
    kh, kw, kt = g.kernel
    sh, sw, st = g.stride
    return (slice(None), slice(None),
            slice(a * sh, a * sh + kh), slice(b * sw, b * sw + kw), slice(c * st, c * st + kt))


def conv_forward(x: np.ndarray, w: np.ndarray, bias: np.ndarray, g: Geometry) -> np.ndarray:
    """Pre-activations of one layer: x is (B, C, H, W, T), result (B, N, Ho, Wo, To)."""
    n, ho, wo, to = g.out_shape
    if _by_position(g):
        out = np.empty((x.shape[0], n, ho, wo, to))
        for a, b, c in itertools.product(range(ho), range(wo), range(to)):
            patch = x[_window(g, a, b, c)]
            out[:, :, a, b, c] = np.tensordot(patch, w, axes=([1, 2, 3, 4], [1, 2, 3, 4]))
    else:
        acc = np.zeros((x.shape[0], ho, wo, to, n))
        for i, j, k in itertools.product(*map(range, g.kernel)):
            acc += np.tensordot(x[_offset_slices(g, i, j, k)], w[:, :, i, j, k], axes=([1], [1]))
        out = np.moveaxis(acc, -1, 1)
    return out + bias[None, :, None, None, None]


def conv_backward(gpre: np.ndarray, x: np.ndarray, w: np.ndarray, g: Geometry,
                  want_input: bool = True, want_params: bool = True):
    """Gradients of a layer given the upstream gradient of its pre-activations."""
    gx = np.zeros_like(x) if want_input else None
    gw = np.zeros_like(w) if want_params else None
    gb = gpre.sum(axis=(0, 2, 3, 4)) if want_params else None
    _, ho, wo, to = g.out_shape
    if _by_position(g):
        for a, b, c in itertools.product(range(ho), range(wo), range(to)):
            win = _window(g, a, b, c)
            gp = gpre[:, :, a, b, c]
            if want_params:
                gw += np.tensordot(gp, x[win], axes=([0], [0]))
            if want_input:
                gx[win] += np.tensordot(gp, w, axes=([1], [0]))
    else:
        for i, j, k in itertools.product(*map(range, g.kernel)):
            sl = _offset_slices(g, i, j, k)
            if want_params:
                gw[:, :, i, j, k] = np.tensordot(gpre, x[sl], axes=([0, 2, 3, 4], [0, 2, 3, 4]))
            if want_input:
                gx[sl] += np.moveaxis(np.tensordot(gpre, w[:, :, i, j, k], axes=([1], [0])), -1, 1)
    return gx, gw, gb


# -- whole-net passes ------------------------------------------------------

@dataclass
class Trace:
    geometry: list[Geometry]
    inputs: list[np.ndarray] = field(default_factory=list)  # input to each layer
    pre: list[np.ndarray] = field(default_factory=list)     # pre-activations
    features: list[np.ndarray] = field(default_factory=list)

    @property
    def pattern(self) -> list[np.ndarray]:
        return [p > 0 for p in self.pre]


def _batched(videos) -> np.ndarray:
    x = np.asarray(videos, dtype=np.float64)
    if x.ndim != 5:
        raise ShapeError(f"expected a batch (B, C, H, W, T), got shape {x.shape}")
    return x


def propagate(spec: NetSpec, params: NetParams, videos) -> Trace:
    x = _batched(videos)
    geoms = spec.geometry(x.shape[1:])
    check_params(spec, params, geoms)
    trace = Trace(geoms)
    for idx, g in enumerate(geoms):
        trace.inputs.append(x)
        pre = conv_forward(x, params.weights[idx], params.biases[idx], g)
        x = np.maximum(pre, 0.0)
        trace.pre.append(pre)
        trace.features.append(x)
    return trace


def backprop(spec: NetSpec, params: NetParams, videos, *, want_input: bool = True,
             want_params: bool = True, trace: Trace | None = None):
    """Scores and gradients for a batch of videos.

    Returns ``(scores, input_grads, param_grads, trace)`` where ``scores`` has
    one entry per video, ``input_grads`` matches the batch, and
    ``param_grads`` is the gradient of the *summed* score over the batch.
    """
    if trace is None:
        trace = propagate(spec, params, videos)
    top = trace.features[-1]
    scores = top.reshape(top.shape[0], -1).sum(axis=1)
    grad = np.ones_like(top)
    n = len(trace.geometry)
    gws, gbs = [None] * n, [None] * n
    gx = None
    for idx in reversed(range(n)):
        gpre = grad * (trace.pre[idx] > 0)
        need_input = idx > 0 or want_input
        gx, gw, gb = conv_backward(gpre, trace.inputs[idx], params.weights[idx],
                                   trace.geometry[idx], need_input, want_params)
        gws[idx], gbs[idx] = gw, gb
        grad = gx
    pgrad = NetParams(gws, gbs) if want_params else None
    return scores, (gx if want_input else None), pgrad, trace


# -- single-video operations ----------------------------------------------

def forward(spec: NetSpec, params: NetParams, video: np.ndarray):
    """Feature maps per layer and the activation pattern (pre-activation > 0)."""
    trace = propagate(spec, params, np.asarray(video)[None])
    return [f[0] for f in trace.features], [p[0] for p in trace.pattern]


def score(spec: NetSpec, params: NetParams, video: np.ndarray) -> float:
    trace = propagate(spec, params, np.asarray(video)[None])
    return float(trace.features[-1][0].sum())


def grad_input(spec: NetSpec, params: NetParams, video: np.ndarray) -> np.ndarray:
    _, gx, _, _ = backprop(spec, params, np.asarray(video)[None], want_params=False)
    return gx[0]


def grad_params(spec: NetSpec, params: NetParams, video: np.ndarray) -> NetParams:
    _, _, gp, _ = backprop(spec, params, np.asarray(video)[None], want_input=False)
    return gp


def affine_decomposition(spec: NetSpec, params: NetParams, video: np.ndarray):
    """Offset ``a`` and slope ``B`` of the linear piece containing ``video``."""
    scores, gx, _, _ = backprop(spec, params, np.asarray(video)[None], want_params=False)
    b = gx[0]
    return float(scores[0]) - inner(np.asarray(video, dtype=np.float64), b), b


# -- presets ---------------------------------------------------------------

def preset(name: str, input_channels: int = 3) -> NetSpec:
    """Published architectures; ``input_channels`` adapts them to gray video."""
    c = LayerSpec
    table = {
        # stationary in space and time
        "exp1": [c("conv3d", 120, (15, 15, 15), (7, 7, 7)),
                 c("conv3d", 40, (7, 7, 7), (3, 3, 3)),
                 c("conv3d", 20, (3, 3, 2), (2, 2, 1))],
        # stationary in time only
        "exp2": [c("conv3d", 120, (7, 7, 7), (3, 3, 3)),
                 c("spatial_full", 30, (0, 0, 4), (1, 1, 2)),
                 c("conv3d", 5, (1, 1, 2), (1, 1, 1))],
        # mini-batch fire variant of exp2
        "exp2_fire": [c("conv3d", 120, (11, 11, 9), (5, 5, 4)),
                      c("spatial_full", 30, (0, 0, 5), (1, 1, 2)),
                      c("conv3d", 5, (1, 1, 2), (1, 1, 1))],
        # aligned actions, one filter over the whole sequence
        "exp3": [c("conv3d", 200, (7, 7, 7), (3, 3, 3)),
                 c("full", 1, (0, 0, 0), (1, 1, 1))],
    }
    if name not in table:
        raise ValueError(f"unknown preset {name!r}; expected one of {sorted(table)}")
    return NetSpec(input_channels, tuple(table[name]))


# -- serialization ----------------------------------------------------------

def _fmt3(v, wildcard: bool) -> str:
    return "x".join("*" if (wildcard and k == 0) else str(k) for k in v)


def layer_to_text(layer: LayerSpec) -> str:
    kernel = _fmt3(layer.kernel, layer.kind != "conv3d")
    return (f"kind={layer.kind} filters={layer.num_filters} "
            f"kernel={kernel} stride={_fmt3(layer.stride, False)}")


def spec_to_text(spec: NetSpec) -> str:
    lines = [f"input_channels={spec.input_channels}"]
    lines += [layer_to_text(l) for l in spec.layers]
    return "\n".join(lines) + "\n"


def _parse3(text: str) -> tuple[int, int, int]:
    parts = text.lower().split("x")
    if len(parts) == 1:
        parts = parts * 3
    if len(parts) != 3:
        raise ValueError(f"expected HxWxT, got {text!r}")
    return tuple(0 if p == "*" else int(p) for p in parts)


def layer_from_text(line: str) -> LayerSpec:
    fields = {}
    for tok in line.split():
        key, sep, value = tok.partition("=")
        if not sep:
            raise ValueError(f"expected key=value, got {tok!r}")
        fields[key] = value
    unknown = set(fields) - {"kind", "filters", "kernel", "stride"}
    if unknown:
        raise ValueError(f"unknown layer key(s): {', '.join(sorted(unknown))}")
    return LayerSpec(fields["kind"], int(fields["filters"]),
                     _parse3(fields.get("kernel", "1")), _parse3(fields.get("stride", "1")))


def spec_from_text(text: str) -> NetSpec:
    channels, layers = 1, []
    for line in text.splitlines():
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if line.startswith("input_channels="):
            channels = int(line.split("=", 1)[1])
        else:
            layers.append(layer_from_text(line))
    return NetSpec(channels, tuple(layers))


PARAMS_MAGIC = b"STP1"


def encode_params(params: NetParams) -> bytes:
    out = [PARAMS_MAGIC, struct.pack("<I", len(params))]
    for w, b in zip(params.weights, params.biases):
        out.append(struct.pack("<5I", *w.shape))
        out.append(np.ascontiguousarray(w, dtype="<f8").tobytes())
        out.append(np.ascontiguousarray(b, dtype="<f8").tobytes())
    return b"".join(out)


def decode_params(buf: bytes) -> NetParams:
    if len(buf) < 8:
        raise FormatError("truncated header", len(buf))
    if buf[:4] != PARAMS_MAGIC:
        raise FormatError(f"bad magic {buf[:4]!r}", 0)
    (count,) = struct.unpack_from("<I", buf, 4)
    pos, weights, biases = 8, [], []
    for _ in range(count):
        if len(buf) < pos + 20:
            raise FormatError("truncated layer header", pos)
        shape = struct.unpack_from("<5I", buf, pos)
        pos += 20
        nw, nb = int(np.prod(shape)), shape[0]
        if len(buf) < pos + 8 * (nw + nb):
            raise FormatError("truncated layer payload", len(buf))
        weights.append(np.frombuffer(buf, "<f8", nw, pos).reshape(shape).astype(np.float64))
        pos += 8 * nw
        biases.append(np.frombuffer(buf, "<f8", nb, pos).astype(np.float64))
        pos += 8 * nb
    if pos != len(buf):
        raise FormatError("trailing bytes after last layer", pos)
    return NetParams(weights, biases)


def save_params(params: NetParams, path) -> None:
    _atomic_write(path, encode_params(params))


def load_params(path) -> NetParams:
    return decode_params(Path(path).read_bytes())
