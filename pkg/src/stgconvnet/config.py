"""Line-based ``key = value`` configuration files.

Blank lines and ``#`` comments are ignored.  The network is given either
as ``net = <preset name or net file>`` or as repeated ``layer = ...`` lines
in the net-file syntax (``kind=conv3d filters=8 kernel=5x5x5 stride=2x2x2``).
"""
from __future__ import annotations

from dataclasses import fields
from pathlib import Path
from typing import get_type_hints

from . import net
from .learner import TrainConfig


class ConfigError(ValueError):
    pass


_OPTIONAL = {"minibatch_size": "all", "epsilon": "auto", "recovery_steps": "auto"}
NET_KEYS = ("net", "layer")


def _parse_value(name: str, raw: str, lineno: int, source: str):
    hint = get_type_hints(TrainConfig)[name]
    text = raw.strip()
    try:
        if name in _OPTIONAL and text.lower() in (_OPTIONAL[name], "none"):
            return None
        if name == "layer_rate_scales":
            return tuple(float(s) for s in text.split(","))
        if hint in (int, "int") or name in ("minibatch_size", "recovery_steps"):
            return int(text)
        if hint in (float, "float") or name == "epsilon":
            return float(text)
        return text
    except ValueError:
        raise ConfigError(f"{source}:{lineno}: bad value {raw!r} for key {name!r}") from None


def parse(text: str, source: str = "<config>"):
    """Returns ``(TrainConfig, net)`` where ``net`` is a NetSpec, a preset name or None."""
    known = {f.name for f in fields(TrainConfig)}
    values, layers, net_ref = {}, [], None
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        key = key.strip()
        if not sep:
            raise ConfigError(f"{source}:{lineno}: expected key = value, got {line!r}")
        if key == "layer":
            try:
                layers.append(net.layer_from_text(value))
            except (ValueError, KeyError) as exc:
                raise ConfigError(f"{source}:{lineno}: bad layer: {exc}") from None
        elif key == "net":
            net_ref = value.strip()
        elif key in known:
            if key in values:
                raise ConfigError(f"{source}:{lineno}: duplicate key {key!r}")
            values[key] = _parse_value(key, value, lineno, source)
        else:
            raise ConfigError(f"{source}:{lineno}: unknown key {key!r}")
    if layers and net_ref:
        raise ConfigError(f"{source}: give either 'net' or 'layer' lines, not both")
    try:
        cfg = TrainConfig(**values)
    except ValueError as exc:
        raise ConfigError(f"{source}: {exc}") from None
    if layers:
        return cfg, net.NetSpec(1, tuple(layers))
    if net_ref and Path(net_ref).is_file():
        return cfg, net.spec_from_text(Path(net_ref).read_text())
    return cfg, net_ref


def load(path):
    path = Path(path)
    return parse(path.read_text(), str(path))


def resolve_net(net_ref, channels: int) -> net.NetSpec:
    if net_ref is None:
        raise ConfigError("config does not define a network ('net' or 'layer' lines)")
    if isinstance(net_ref, net.NetSpec):
        return net_ref.with_channels(channels)
    try:
        return net.preset(net_ref, channels)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


_TEMPLATES = {
    "exp1": dict(iterations=1200, scheme="layer_by_layer", layer_add_every=400,
                 layer_rate_scales=(1.0, 0.1, 0.01)),
    "exp2": dict(iterations=1200, scheme="end_to_end", layer_rate_scales=(1.0, 0.1, 0.01)),
    "exp2_fire": dict(iterations=1300, scheme="end_to_end", minibatch_size=10, num_chains=13,
                      layer_rate_scales=(1.0, 0.1, 0.01)),
    "exp3": dict(iterations=1200, scheme="end_to_end", layer_rate_scales=(1.0, 0.1)),
}


def template(name: str) -> str:
    if name not in _TEMPLATES:
        raise ConfigError(f"no template for {name!r}; choose from {sorted(_TEMPLATES)}")
    cfg = TrainConfig(**_TEMPLATES[name])
    lines = [f"# training config for preset {name}", "# network (input channels follow the data)"]
    lines += [f"layer = {net.layer_to_text(l)}" for l in net.preset(name).layers]
    lines.append("")
    for f in fields(TrainConfig):
        value = getattr(cfg, f.name)
        if value is None:
            value = _OPTIONAL[f.name]
        elif isinstance(value, tuple):
            value = ",".join(repr(v) for v in value)
        lines.append(f"{f.name} = {value}")
    return "\n".join(lines) + "\n"
