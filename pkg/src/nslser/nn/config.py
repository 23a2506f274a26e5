"""Model architecture descriptions and their key=value text format.

A config file is INI-like: one ``[model]`` section followed by
``[layer.N]`` sections in order::

    [model]
    name = cnn6-toy
    input_frames = 30
    n_mels = 64
    classes = 7

    [layer.1]
    type = conv2d
    out_channels = 8
    kernel = 3
"""
from __future__ import annotations

import configparser
import hashlib
import io
from dataclasses import dataclass, fields, replace
from functools import cached_property
from pathlib import Path

LAYER_TYPES = ("conv2d", "relu", "maxpool2d", "global_avg_pool", "flatten", "dense", "add")
TAP_NAMES = ("FC1", "FC2")


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class LayerSpec:
    type: str
    name: str | None = None
    out_channels: int | None = None
    kernel: int | None = None
    stride: int = 1
    pad: int = 0
    out_dim: int | None = None
    source: str | None = None  # for ``add``: name of the earlier layer to add

    def __post_init__(self):
        if self.type not in LAYER_TYPES:
            raise ConfigError(f"unknown layer type {self.type!r}")


def conv2d(out_channels, kernel, stride=1, pad=0, name=None):
    return LayerSpec("conv2d", name=name, out_channels=out_channels, kernel=kernel, stride=stride, pad=pad)


def relu(name=None):
    return LayerSpec("relu", name=name)


def maxpool2d(kernel, name=None):
    return LayerSpec("maxpool2d", name=name, kernel=kernel)


def global_avg_pool(name=None):
    return LayerSpec("global_avg_pool", name=name)


def flatten(name=None):
    return LayerSpec("flatten", name=name)


def dense(out_dim, name=None):
    return LayerSpec("dense", name=name, out_dim=out_dim)


def add(source, name=None):
    return LayerSpec("add", name=name, source=source)


@dataclass(frozen=True)
class ModelConfig:
    layers: tuple[LayerSpec, ...]
    input_shape: tuple[int, int]  # (frames, n_mels)
    num_classes: int
    name: str = "model"

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple(self.layers))
        object.__setattr__(self, "input_shape", tuple(int(v) for v in self.input_shape))
        self.shapes  # validates

    @cached_property
    def shapes(self) -> list[tuple[int, ...]]:
        """Per-sample output shape of every layer."""
        return infer_shapes(self)

    def layer_index(self, name: str) -> int:
        for i, spec in enumerate(self.layers):
            if spec.name == name:
                return i
        raise ConfigError(f"no layer named {name!r}")

    def tap_index(self, name: str) -> int:
        """Index of the layer whose output is the tap: the named dense layer, or
        the relu directly after it."""
        i = self.layer_index(name)
        if i + 1 < len(self.layers) and self.layers[i + 1].type == "relu":
            return i + 1
        return i

    def tap_dim(self, name: str) -> int:
        return self.shapes[self.tap_index(name)][0]

    def with_input(self, frames: int, n_mels: int) -> "ModelConfig":
        return replace(self, input_shape=(frames, n_mels))

    def digest(self) -> bytes:
        return hashlib.sha256(dump_model_config(self).encode("utf-8")).digest()


def infer_shapes(cfg: ModelConfig) -> list[tuple[int, ...]]:
    frames, n_mels = cfg.input_shape
    if frames < 1 or n_mels < 1:
        raise ConfigError(f"bad input shape {cfg.input_shape}")
    shape: tuple[int, ...] = (1, frames, n_mels)
    shapes = []
    named: dict[str, tuple[int, ...]] = {}
    dense_names = []
    for idx, spec in enumerate(cfg.layers):
        where = f"layer {idx + 1} ({spec.type})"
        t = spec.type
        if t == "conv2d":
            if len(shape) != 3:
                raise ConfigError(f"{where}: conv2d needs a (C, H, W) input, got {shape}")
            if not spec.out_channels or not spec.kernel or spec.stride < 1 or spec.pad < 0:
                raise ConfigError(f"{where}: conv2d needs out_channels, kernel, stride >= 1, pad >= 0")
            c, h, w = shape
            h2 = (h + 2 * spec.pad - spec.kernel) // spec.stride + 1
            w2 = (w + 2 * spec.pad - spec.kernel) // spec.stride + 1
            if h2 < 1 or w2 < 1:
                raise ConfigError(f"{where}: kernel {spec.kernel} does not fit input {shape}")
            shape = (spec.out_channels, h2, w2)
        elif t == "maxpool2d":
            if len(shape) != 3 or not spec.kernel:
                raise ConfigError(f"{where}: maxpool2d needs a (C, H, W) input and a kernel")
            c, h, w = shape
            if h < spec.kernel or w < spec.kernel:
                raise ConfigError(f"{where}: pool {spec.kernel} does not fit input {shape}")
            shape = (c, h // spec.kernel, w // spec.kernel)
        elif t == "global_avg_pool":
            if len(shape) != 3:
                raise ConfigError(f"{where}: global_avg_pool needs a (C, H, W) input")
            shape = (shape[0],)
        elif t == "flatten":
            n = 1
            for v in shape:
                n *= v
            shape = (n,)
        elif t == "dense":
            if len(shape) != 1:
                raise ConfigError(f"{where}: dense needs a flat input, got {shape}; add flatten")
            if not spec.out_dim:
                raise ConfigError(f"{where}: dense needs out_dim")
            shape = (spec.out_dim,)
            if spec.name:
                dense_names.append(spec.name)
        elif t == "add":
            if spec.source not in named:
                raise ConfigError(f"{where}: add source {spec.source!r} is not an earlier named layer")
            if named[spec.source] != shape:
                raise ConfigError(f"{where}: cannot add {named[spec.source]} to {shape}")
        # relu keeps the shape
        if spec.name:
            if spec.name in named:
                raise ConfigError(f"{where}: duplicate layer name {spec.name!r}")
            named[spec.name] = shape
        shapes.append(shape)
    for tap in TAP_NAMES:
        if dense_names.count(tap) != 1:
            raise ConfigError(f"model needs exactly one dense layer named {tap!r}")
    if not cfg.layers or cfg.layers[-1].type != "dense" or cfg.layers[-1].out_dim != cfg.num_classes:
        raise ConfigError(f"final layer must be dense with out_dim == classes ({cfg.num_classes})")
    return shapes


def param_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    """Parameter tensor shapes keyed as ``L<index>.weight`` / ``L<index>.bias``."""
    out = {}
    prev: tuple[int, ...] = (1, *cfg.input_shape)
    for idx, (spec, shape) in enumerate(zip(cfg.layers, cfg.shapes)):
        if spec.type == "conv2d":
            out[f"L{idx}.weight"] = (spec.out_channels, prev[0], spec.kernel, spec.kernel)
            out[f"L{idx}.bias"] = (spec.out_channels,)
        elif spec.type == "dense":
            out[f"L{idx}.weight"] = (prev[0], spec.out_dim)
            out[f"L{idx}.bias"] = (spec.out_dim,)
        prev = shape
    return out


def count_params(cfg: ModelConfig) -> int:
    total = 0
    for shape in param_shapes(cfg).values():
        n = 1
        for v in shape:
            n *= v
        total += n
    return total


_INT_FIELDS = ("out_channels", "kernel", "stride", "pad", "out_dim")


def dump_model_config(cfg: ModelConfig) -> str:
    cp = configparser.ConfigParser(interpolation=None)
    cp.optionxform = str
    cp["model"] = {
        "name": cfg.name,
        "input_frames": str(cfg.input_shape[0]),
        "n_mels": str(cfg.input_shape[1]),
        "classes": str(cfg.num_classes),
    }
    defaults = LayerSpec("relu")
    for i, spec in enumerate(cfg.layers, start=1):
        sec = {"type": spec.type}
        for f in fields(LayerSpec):
            if f.name == "type":
                continue
            v = getattr(spec, f.name)
            if v is not None and v != getattr(defaults, f.name):
                sec[f.name] = str(v)
        cp[f"layer.{i}"] = sec
    buf = io.StringIO()
    cp.write(buf)
    return buf.getvalue()


def parse_model_config(text: str) -> ModelConfig:
    cp = configparser.ConfigParser(interpolation=None)
    cp.optionxform = str
    try:
        cp.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(str(exc)) from None
    if "model" not in cp:
        raise ConfigError("missing [model] section")
    m = cp["model"]
    layer_secs = [s for s in cp.sections() if s.startswith("layer.")]
    try:
        layer_secs.sort(key=lambda s: int(s.split(".", 1)[1]))
    except ValueError:
        raise ConfigError("layer sections must be named layer.<number>") from None
    layers = []
    for s in layer_secs:
        sec = dict(cp[s])
        kwargs = {}
        for k, v in sec.items():
            if k in _INT_FIELDS:
                kwargs[k] = int(v)
            elif k in ("type", "name", "source"):
                kwargs[k] = v
            else:
                raise ConfigError(f"[{s}]: unknown key {k!r}")
        if "type" not in kwargs:
            raise ConfigError(f"[{s}]: missing type")
        layers.append(LayerSpec(**kwargs))
    try:
        return ModelConfig(
            layers=tuple(layers),
            input_shape=(int(m["input_frames"]), int(m["n_mels"])),
            num_classes=int(m["classes"]),
            name=m.get("name", "model"),
        )
    except KeyError as exc:
        raise ConfigError(f"[model]: missing {exc.args[0]}") from None


def load_model_config(path) -> ModelConfig:
    return parse_model_config(Path(path).read_text(encoding="utf-8"))


def save_model_config(cfg: ModelConfig, path) -> None:
    Path(path).write_text(dump_model_config(cfg), encoding="utf-8")
