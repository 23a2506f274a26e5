"""Forward pass with FC1/FC2 taps and exact reverse-mode gradients.

Parameters live in a plain ``dict[str, ndarray]``; the array dtype selects
the numeric mode (float32 for training, float64 for gradient checks) on an
otherwise identical code path.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import layers as K
from .config import ModelConfig, param_shapes

FUSION_MODES = ("add", "max", "avg")
ADAPTER_KEY = "adapter.weight"


class ShapeError(ValueError):
    pass


@dataclass
class Taps:
    fc1: np.ndarray
    fc2: np.ndarray
    logits: np.ndarray


@dataclass
class ForwardCache:
    layer_caches: list
    fusion: tuple | None = None
    batched: bool = True
    relu_at_zero: bool = False  # some relu input was exactly 0

    def signature(self) -> list[np.ndarray]:
        """Discrete branch decisions (relu masks, pool winners, max-fusion masks)."""
        sig = [c for kind, c in self.layer_caches if kind == "relu"]
        sig += [c[0] for kind, c in self.layer_caches if kind == "maxpool2d"]
        if self.fusion is not None and self.fusion[0] == "max":
            sig.append(self.fusion[1])
        return sig


@dataclass
class ModelState:
    params: dict[str, np.ndarray]
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0

    def __post_init__(self):
        for k, p in self.params.items():
            self.m.setdefault(k, np.zeros_like(p))
            self.v.setdefault(k, np.zeros_like(p))
            if self.m[k].shape != p.shape or self.v[k].shape != p.shape:
                raise ShapeError(f"moment shape mismatch for {k}")

    @property
    def dtype(self):
        return next(iter(self.params.values())).dtype


def _glorot(rng, shape, fan_in, fan_out, dtype):
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape).astype(dtype)


def init_params(cfg: ModelConfig, seed: int, dtype=np.float32, upstream_dim: int | None = None) -> dict[str, np.ndarray]:
    """Glorot-uniform weights, zero biases. ``upstream_dim`` adds a fusion adapter
    when it differs from the FC1 tap width."""
    rng = np.random.default_rng(seed)
    params = {}
    for key, shape in param_shapes(cfg).items():
        if key.endswith(".bias"):
            params[key] = np.zeros(shape, dtype=dtype)
        elif len(shape) == 4:
            o, c, k, _ = shape
            params[key] = _glorot(rng, shape, c * k * k, o * k * k, dtype)
        else:
            params[key] = _glorot(rng, shape, shape[0], shape[1], dtype)
    fc1 = cfg.tap_dim("FC1")
    if upstream_dim is not None and upstream_dim != fc1:
        arng = np.random.default_rng([seed, 1])
        params[ADAPTER_KEY] = _glorot(arng, (upstream_dim, fc1), upstream_dim, fc1, dtype)
    return params


def init_state(cfg: ModelConfig, seed: int, dtype=np.float32, upstream_dim: int | None = None) -> ModelState:
    return ModelState(init_params(cfg, seed, dtype, upstream_dim))


def softmax(logits):
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def _fuse(h, u, mode):
    if h.shape != u.shape:
        raise ShapeError(f"cannot fuse FC1 activation {h.shape} with upstream {u.shape}")
    if mode == "add":
        return h + u, None
    if mode == "avg":
        return (h + u) * 0.5, None
    if mode == "max":
        mask = h >= u  # ties go to the FC1 side
        return np.where(mask, h, u), mask
    raise ValueError(f"unknown fusion mode {mode!r}")


def _unfuse(dz, mode, mask):
    if mode == "add":
        return dz, dz
    if mode == "avg":
        return dz * 0.5, dz * 0.5
    return dz * mask, dz * ~mask


def forward(params, cfg: ModelConfig, x, upstream=None, fusion: str | None = None):
    """Run the model on a batch (B, frames, n_mels) or a single (frames, n_mels) input.

    With ``fusion`` set, the FC1 activation is replaced by its fusion with the
    (adapted) upstream embedding before the rest of the network runs.
    Returns ``(Taps, ForwardCache)``.
    """
    dtype = next(iter(params.values())).dtype
    x = np.asarray(x, dtype=dtype)
    batched = x.ndim == 3
    if not batched:
        x = x[None]
    if x.ndim != 3 or x.shape[1:] != cfg.input_shape:
        raise ShapeError(f"expected input (B, {cfg.input_shape[0]}, {cfg.input_shape[1]}), got {x.shape}")
    if fusion is not None:
        if upstream is None:
            raise ShapeError("fusion requires upstream embeddings")
        upstream = np.asarray(upstream, dtype=dtype)
        if upstream.ndim == 1:
            upstream = upstream[None]
        if upstream.shape[0] != x.shape[0]:
            raise ShapeError("upstream batch size does not match input")
    fc1_at, fc2_at = cfg.tap_index("FC1"), cfg.tap_index("FC2")
    names = {spec.name: i for i, spec in enumerate(cfg.layers) if spec.name}
    h = x[:, None]
    outputs, caches = [], []
    fusion_cache = None
    at_zero = False
    for idx, spec in enumerate(cfg.layers):
        t = spec.type
        if t == "conv2d":
            h, c = K.conv2d_forward(h, params[f"L{idx}.weight"], params[f"L{idx}.bias"], spec.stride, spec.pad)
        elif t == "relu":
            at_zero = at_zero or bool(np.any(h == 0))
            h, c = K.relu_forward(h)
        elif t == "maxpool2d":
            h, c = K.maxpool2d_forward(h, spec.kernel)
        elif t == "global_avg_pool":
            h, c = K.global_avg_pool_forward(h)
        elif t == "flatten":
            c = h.shape
            h = h.reshape(h.shape[0], -1)
        elif t == "dense":
            h, c = K.dense_forward(h, params[f"L{idx}.weight"], params[f"L{idx}.bias"])
        elif t == "add":
            h, c = h + outputs[names[spec.source]], None
        caches.append((t, c))
        if idx == fc1_at and fusion is not None:
            u = upstream @ params[ADAPTER_KEY] if ADAPTER_KEY in params else upstream
            h, mask = _fuse(h, u, fusion)
            fusion_cache = (fusion, mask, upstream)
        outputs.append(h)
    taps = Taps(outputs[fc1_at], outputs[fc2_at], outputs[-1])
    if not batched:
        taps = Taps(taps.fc1[0], taps.fc2[0], taps.logits[0])
    return taps, ForwardCache(caches, fusion_cache, batched, at_zero)


def forward_with_taps(params, cfg: ModelConfig, x, upstream=None, fusion=None) -> Taps:
    if isinstance(params, ModelState):
        params = params.params
    return forward(params, cfg, x, upstream, fusion)[0]


def backprop(params, cfg: ModelConfig, cache: ForwardCache, d_logits, d_fc1=None, d_fc2=None) -> dict[str, np.ndarray]:
    """Gradients of a scalar loss given its derivatives w.r.t. logits and taps."""

    def batched(g):
        if g is None:
            return None
        g = np.asarray(g)
        return g if cache.batched else g[None]

    grads = {k: np.zeros_like(v) for k, v in params.items()}
    fc1_at, fc2_at = cfg.tap_index("FC1"), cfg.tap_index("FC2")
    names = {spec.name: i for i, spec in enumerate(cfg.layers) if spec.name}
    pending: dict[int, np.ndarray] = {}
    for at, g in ((fc1_at, batched(d_fc1)), (fc2_at, batched(d_fc2))):
        if g is not None:
            pending[at] = pending[at] + g if at in pending else g
    dy = batched(d_logits)
    for idx in reversed(range(len(cfg.layers))):
        if idx in pending:
            dy = dy + pending.pop(idx)
        if idx == fc1_at and cache.fusion is not None:
            mode, mask, upstream = cache.fusion
            dy, du = _unfuse(dy, mode, mask)
            if ADAPTER_KEY in params:
                grads[ADAPTER_KEY] += upstream.T @ du
        spec = cfg.layers[idx]
        t, c = cache.layer_caches[idx]
        if t == "conv2d":
            dy, dw, db = K.conv2d_backward(dy, params[f"L{idx}.weight"], c, spec.stride, spec.pad)
            grads[f"L{idx}.weight"] += dw
            grads[f"L{idx}.bias"] += db
        elif t == "relu":
            dy = K.relu_backward(dy, c)
        elif t == "maxpool2d":
            dy = K.maxpool2d_backward(dy, spec.kernel, c)
        elif t == "global_avg_pool":
            dy = K.global_avg_pool_backward(dy, c)
        elif t == "flatten":
            dy = dy.reshape(c)
        elif t == "dense":
            dy, dw, db = K.dense_backward(dy, params[f"L{idx}.weight"], c)
            grads[f"L{idx}.weight"] += dw
            grads[f"L{idx}.bias"] += db
        elif t == "add":
            src = names[spec.source]
            pending[src] = pending[src] + dy if src in pending else dy
    return grads


def value_and_grad(params, cfg: ModelConfig, x, loss_fn, upstream=None, fusion=None):
    """Evaluate ``loss_fn(taps) -> (loss, d_logits, d_fc1, d_fc2)`` and backpropagate it.

    Returns ``(loss, grads, cache)``.
    """
    taps, cache = forward(params, cfg, x, upstream, fusion)
    loss, d_logits, d_fc1, d_fc2 = loss_fn(taps)
    return loss, backprop(params, cfg, cache, d_logits, d_fc1, d_fc2), cache


def predict(params, cfg: ModelConfig, x, upstream=None, fusion=None, chunk: int = 64) -> np.ndarray:
    """Argmax class per row; ties resolve to the lowest class id."""
    preds = []
    for s in range(0, len(x), chunk):
        u = None if upstream is None else upstream[s : s + chunk]
        logits = forward(params, cfg, x[s : s + chunk], u, fusion)[0].logits
        preds.append(np.argmax(logits, axis=1))
    return np.concatenate(preds) if preds else np.zeros(0, dtype=np.int64)
