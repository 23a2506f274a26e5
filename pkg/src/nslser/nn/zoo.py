"""Built-in architectures.

The ``*-toy`` models are small enough to train on a laptop CPU. ``cnn6``,
``vgg15`` and ``resnet9`` are full-size layouts of our own construction,
sized to parameter budgets of 4.44 M, 14.86 M and 4.96 M; they document
scale and are not meant to be trained with this numpy core.
"""
from __future__ import annotations

from pathlib import Path

from .config import ModelConfig, add, conv2d, dense, flatten, global_avg_pool, load_model_config, maxpool2d, relu

TARGET_PARAMS = {"vgg15": 14.86e6, "resnet9": 4.96e6, "cnn6": 4.44e6}


def _conv_stack(channels, kernel=3, pool_after=()):
    out = []
    for i, c in enumerate(channels):
        out += [conv2d(c, kernel, pad=kernel // 2), relu()]
        if i in pool_after:
            out.append(maxpool2d(2))
    return out


def _head(fc1, fc2, classes, pool=True):
    return [global_avg_pool() if pool else flatten(), dense(fc1, name="FC1"), relu(),
            dense(fc2, name="FC2"), relu(), dense(classes)]


def cnn6_toy(frames, n_mels, classes=7, fc1=64, fc2=32):
    layers = [conv2d(8, 3), relu(), maxpool2d(2), conv2d(16, 3), relu(), maxpool2d(2)]
    return ModelConfig(layers + _head(fc1, fc2, classes, pool=False), (frames, n_mels), classes, "cnn6-toy")


def vgg_toy(frames, n_mels, classes=7):
    layers = _conv_stack([8, 8, 16, 16], pool_after=(1, 3))
    return ModelConfig(layers + _head(64, 32, classes, pool=False), (frames, n_mels), classes, "vgg-toy")


def resnet_toy(frames, n_mels, classes=7):
    layers = [conv2d(8, 3, pad=1), relu(), maxpool2d(2, name="stem"),
              conv2d(8, 3, pad=1), relu(), conv2d(8, 3, pad=1), add("stem"), relu(), maxpool2d(2)]
    return ModelConfig(layers + _head(64, 32, classes, pool=False), (frames, n_mels), classes, "resnet-toy")


def cnn6(frames=372, n_mels=64, classes=7):
    layers = _conv_stack([64, 128, 256, 512], kernel=5, pool_after=(0, 1, 2, 3))
    return ModelConfig(layers + _head(224, 96, classes), (frames, n_mels), classes, "cnn6")


def vgg15(frames=372, n_mels=64, classes=7):
    layers = _conv_stack([64, 64, 128, 128, 256, 256, 256, 512, 512, 512, 512, 512], pool_after=(1, 3, 6, 9))
    return ModelConfig(layers + _head(2048, 704, classes), (frames, n_mels), classes, "vgg15")


def resnet9(frames=372, n_mels=64, classes=7):
    layers = [
        conv2d(64, 3, pad=1), relu(), conv2d(128, 3, pad=1), relu(), maxpool2d(2, name="res1_in"),
        conv2d(128, 3, pad=1), relu(), conv2d(128, 3, pad=1), add("res1_in"), relu(),
        conv2d(256, 3, pad=1), relu(), maxpool2d(2),
        conv2d(384, 3, pad=1), relu(), maxpool2d(2, name="res2_in"),
        conv2d(384, 3, pad=1), relu(), conv2d(384, 3, pad=1), add("res2_in"), relu(),
    ]
    return ModelConfig(layers + _head(1024, 352, classes), (frames, n_mels), classes, "resnet9")


BUILTIN = {
    "cnn6-toy": cnn6_toy,
    "vgg-toy": vgg_toy,
    "resnet-toy": resnet_toy,
    "cnn6": cnn6,
    "vgg15": vgg15,
    "resnet9": resnet9,
}


def resolve_model(spec: str, frames: int, n_mels: int, classes: int) -> ModelConfig:
    """A built-in name (sized to the given input) or a path to a config file."""
    if spec in BUILTIN:
        return BUILTIN[spec](frames, n_mels, classes)
    cfg = load_model_config(Path(spec))
    if cfg.input_shape != (frames, n_mels):
        raise ValueError(f"model {spec} expects input {cfg.input_shape}, features are {(frames, n_mels)}")
    if cfg.num_classes != classes:
        raise ValueError(f"model {spec} has {cfg.num_classes} classes, manifest has {classes}")
    return cfg
