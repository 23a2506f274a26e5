"""Graph-regularised training.

The objective per batch is

    total = supervised + alpha * neighbor

where ``supervised`` is the cross-entropy of each batch sample and
``neighbor`` sums ``1 - cos(p_i, p_k)`` over every batch sample ``i`` and each
graph neighbour ``k``, with ``p`` a tapped intermediate activation (FC1 or
FC2). By default both terms are averaged (over samples and over neighbour
pairs respectively); ``raw_sums`` keeps plain sums.
"""
from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .audio import load_features
from .evaluation import evaluate_arrays
from .graph import NeighborGraph, neighbors_of
from .nn.checkpoint import save_checkpoint
from .nn.config import ModelConfig, dump_model_config
from .nn.model import ModelState, backprop, forward, init_state, softmax

log = logging.getLogger(__name__)

MODES = ("base", "nsl", "transfer_add", "transfer_max", "transfer_avg")
ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8


@dataclass(frozen=True)
class TrainConfig:
    mode: str = "base"
    alpha: float = 0.1
    tap: str = "FC2"
    batch_size: int = 16
    epochs: int = 50
    lr0: float = 1e-3
    lr_decay: float = 0.9
    lr_period: int = 5
    seed: int = 0
    max_neighbors: int | None = None  # per-sample cap applied when batches are assembled
    raw_sums: bool = False

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.alpha < 0:
            raise ValueError("alpha must be >= 0")
        if self.tap not in ("FC1", "FC2"):
            raise ValueError("tap must be FC1 or FC2")
        if self.batch_size < 1 or self.epochs < 0 or self.lr_period < 1:
            raise ValueError("batch_size and lr_period must be >= 1, epochs >= 0")
        if self.lr0 <= 0 or not 0 < self.lr_decay <= 1:
            raise ValueError("need lr0 > 0 and 0 < lr_decay <= 1")
        if self.max_neighbors is not None and self.max_neighbors < 1:
            raise ValueError("max_neighbors must be >= 1")

    @property
    def fusion(self) -> str | None:
        return self.mode.split("_", 1)[1] if self.mode.startswith("transfer_") else None


@dataclass(frozen=True)
class LossBreakdown:
    supervised: float
    neighbor: float
    alpha: float
    total: float
    pairs: int = 0
    zero_norm_taps: int = 0


# -- loss pieces -----------------------------------------------------------------

def cross_entropy(logits, target: int) -> float:
    """-log softmax(logits)[target], via log-sum-exp."""
    z = np.asarray(logits, dtype=np.float64)
    m = z.max()
    return float(m + np.log(np.exp(z - m).sum()) - z[target])


def _cross_entropy_rows(logits, y):
    m = logits.max(axis=1, keepdims=True)
    lse = m[:, 0] + np.log(np.exp(logits - m).sum(axis=1))
    return lse - logits[np.arange(len(y)), y]


def neighbor_distance(p_i, p_k) -> float:
    """1 - cosine similarity; a zero-norm vector counts as orthogonal (distance 1)."""
    dist, _, _, zero = _pair_distances(np.asarray(p_i, dtype=np.float64)[None], np.asarray(p_k, dtype=np.float64)[None])
    if zero:
        log.warning("zero-norm tap vector; neighbour distance taken as 1")
    return float(dist[0])


def _pair_distances(a, b):
    """Row-wise 1 - cos(a, b) and its gradients w.r.t. a and b."""
    na = np.sqrt((a * a).sum(axis=1))
    nb = np.sqrt((b * b).sum(axis=1))
    ok = (na > 0) & (nb > 0)
    safe_a = np.where(ok, na, 1)
    safe_b = np.where(ok, nb, 1)
    dot = (a * b).sum(axis=1)
    cos = np.where(ok, dot / (safe_a * safe_b), 0)
    cos = np.clip(cos, -1, 1)
    da = -(b / (safe_a * safe_b)[:, None] - (cos / safe_a**2)[:, None] * a)
    db = -(a / (safe_a * safe_b)[:, None] - (cos / safe_b**2)[:, None] * b)
    da = np.where(ok[:, None], da, 0)
    db = np.where(ok[:, None], db, 0)
    return 1 - cos, da, db, int((~ok).sum())


def fuse_transfer(fc1, upstream, mode: str) -> np.ndarray:
    fc1 = np.asarray(fc1)
    upstream = np.asarray(upstream)
    if fc1.shape != upstream.shape:
        raise ValueError(f"dimension mismatch: FC1 {fc1.shape} vs upstream {upstream.shape}")
    if mode == "add":
        return fc1 + upstream
    if mode == "max":
        return np.maximum(fc1, upstream)
    if mode == "avg":
        return (fc1 + upstream) / 2
    raise ValueError(f"unknown fusion mode {mode!r}")


def lr_at(epoch: int, cfg: TrainConfig) -> float:
    if epoch < 0:
        raise ValueError("epoch must be >= 0")
    return cfg.lr0 * cfg.lr_decay ** (epoch // cfg.lr_period)


def adam_step(state: ModelState, grads: dict, lr: float) -> ModelState:
    """In-place Adam update with bias correction; returns ``state``."""
    state.step += 1
    t = state.step
    c1 = 1.0 - ADAM_BETA1**t
    c2 = 1.0 - ADAM_BETA2**t
    for k, p in state.params.items():
        g = grads[k]
        if g.shape != p.shape:
            raise ValueError(f"gradient shape {g.shape} does not match parameter {k} {p.shape}")
        m = state.m[k]
        v = state.v[k]
        m *= ADAM_BETA1
        m += (1 - ADAM_BETA1) * g
        v *= ADAM_BETA2
        v += (1 - ADAM_BETA2) * (g * g)
        p -= lr * (m / c1) / (np.sqrt(v / c2) + ADAM_EPS)
    return state


# -- batches ----------------------------------------------------------------------

@dataclass
class Batch:
    ids: list[str]
    x: np.ndarray  # (B, frames, n_mels)
    y: np.ndarray  # (B,)
    extra_ids: list[str] = field(default_factory=list)
    extra_x: np.ndarray | None = None  # neighbours not in the batch
    pairs: np.ndarray = field(default_factory=lambda: np.zeros((0, 2), dtype=np.int64))
    upstream: np.ndarray | None = None


def assemble_batch(ids, features: dict, labels: dict, graph: NeighborGraph | None = None,
                   max_neighbors: int | None = None, upstream: dict | None = None) -> Batch:
    """Stack features for ``ids`` and resolve their graph neighbours.

    ``pairs`` rows are ``(i, k)`` with ``i`` a batch row and ``k`` a row of the
    concatenation [batch rows; extra rows]. Neighbours outside the batch are
    appended once each, in first-seen order.
    """
    ids = list(ids)
    x = np.stack([features[i] for i in ids])
    y = np.array([labels[i] for i in ids], dtype=np.int64)
    row = {sid: r for r, sid in enumerate(ids)}
    extra_ids, pairs = [], []
    if graph is not None:
        for r, sid in enumerate(ids):
            nbrs = neighbors_of(graph, sid) if sid in graph else []
            if max_neighbors is not None:
                nbrs = nbrs[:max_neighbors]
            for nid, _w in nbrs:
                if nid not in features:
                    raise KeyError(f"neighbour {nid!r} of {sid!r} has no features")
                if nid not in row:
                    row[nid] = len(ids) + len(extra_ids)
                    extra_ids.append(nid)
                pairs.append((r, row[nid]))
    extra_x = np.stack([features[i] for i in extra_ids]) if extra_ids else None
    up = None if upstream is None else np.stack([upstream[i] for i in ids])
    return Batch(ids, x, y, extra_ids, extra_x, np.array(pairs, dtype=np.int64).reshape(-1, 2), up)


def nsl_batch_loss(params, model_cfg: ModelConfig, batch: Batch, cfg: TrainConfig, need_grad: bool = True):
    """Loss breakdown and gradients for one batch.

    Returns ``(LossBreakdown, grads or None, caches)``; ``caches`` holds the
    forward caches of the batch rows and, if any, the extra neighbour rows.
    """
    B = len(batch.ids)
    taps, cache = forward(params, model_cfg, batch.x, batch.upstream, cfg.fusion)
    caches = [cache]
    logits = taps.logits
    ce = _cross_entropy_rows(logits, batch.y)
    sup_scale = 1.0 if cfg.raw_sums else 1.0 / B
    supervised = float(ce.sum() * sup_scale)

    use_graph = cfg.mode == "nsl" and len(batch.pairs) > 0
    neighbor, zero_norm, d_tap_all, extra_cache = 0.0, 0, None, None
    if use_graph:
        tap_b = getattr(taps, cfg.tap.lower())
        if batch.extra_x is not None:
            taps_e, extra_cache = forward(params, model_cfg, batch.extra_x)
            caches.append(extra_cache)
            all_taps = np.concatenate([tap_b, getattr(taps_e, cfg.tap.lower())])
        else:
            all_taps = tap_b
        i, k = batch.pairs[:, 0], batch.pairs[:, 1]
        dist, da, db, zero_norm = _pair_distances(all_taps[i], all_taps[k])
        if zero_norm:
            log.debug("%d zero-norm tap vector pair(s) treated as orthogonal", zero_norm)
        nb_scale = 1.0 if cfg.raw_sums else 1.0 / max(1, len(batch.pairs))
        neighbor = float(dist.sum() * nb_scale)
        if need_grad:
            d_tap_all = np.zeros_like(all_taps)
            np.add.at(d_tap_all, i, (cfg.alpha * nb_scale) * da)
            np.add.at(d_tap_all, k, (cfg.alpha * nb_scale) * db)
    alpha = cfg.alpha if cfg.mode == "nsl" else 0.0
    breakdown = LossBreakdown(supervised, neighbor, alpha, supervised + alpha * neighbor,
                              len(batch.pairs) if use_graph else 0, zero_norm)
    if not need_grad:
        return breakdown, None, caches

    d_logits = softmax(logits)
    d_logits[np.arange(B), batch.y] -= 1
    d_logits *= sup_scale
    tap_kw = {}
    if d_tap_all is not None:
        tap_kw[f"d_{cfg.tap.lower()}"] = d_tap_all[:B]
    grads = backprop(params, model_cfg, cache, d_logits, **tap_kw)
    if extra_cache is not None:
        zeros = np.zeros((len(batch.extra_ids), model_cfg.num_classes), dtype=d_logits.dtype)
        g_extra = backprop(params, model_cfg, extra_cache, zeros, **{f"d_{cfg.tap.lower()}": d_tap_all[B:]})
        for name, g in g_extra.items():
            grads[name] += g
    return breakdown, grads, caches


# -- training loop -------------------------------------------------------------

METRIC_COLUMNS = ("epoch", "lr", "supervised", "neighbor", "total", "val_acc", "val_uar", "train_acc")
BATCH_COLUMNS = ("epoch", "batch", "size", "pairs", "alpha", "supervised", "neighbor", "total")


@dataclass
class TrainResult:
    state: ModelState
    best_params: dict
    best_epoch: int
    metrics: list[dict]
    batches: list[dict]


def _fmt(v) -> str:
    return repr(float(v)) if isinstance(v, (float, np.floating)) else str(v)


def write_tsv(path, columns, rows) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("\t".join(columns) + "\n")
        for r in rows:
            fh.write("\t".join(_fmt(r[c]) for c in columns) + "\n")


def read_tsv(path) -> list[dict]:
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    if not lines:
        raise ValueError(f"{path}: empty file")
    header = lines[0].split("\t")
    out = []
    for n, line in enumerate(lines[1:], start=2):
        if not line:
            continue
        cells = line.split("\t")
        if len(cells) != len(header):
            raise ValueError(f"{path}:{n}: expected {len(header)} fields")
        out.append(dict(zip(header, cells)))
    return out


def file_digest(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def train(manifest, feature_dir, model_cfg: ModelConfig, cfg: TrainConfig, graph: NeighborGraph | None = None,
          embeddings=None, out_dir=None, lock_extra: dict | None = None) -> TrainResult:
    """Train and, if ``out_dir`` is given, write ``best.nnck``, ``last.nnck``,
    ``metrics.tsv``, ``batches.tsv``, ``model.cfg`` and ``config.lock`` there.

    ``lock_extra`` is merged into ``config.lock`` (input digests, paths).
    """
    if cfg.mode == "nsl" and graph is None:
        raise ValueError("mode 'nsl' needs a neighbour graph")
    if cfg.fusion and embeddings is None:
        raise ValueError(f"mode {cfg.mode!r} needs upstream embeddings")
    if len(manifest.vocab) != model_cfg.num_classes:
        raise ValueError(f"model has {model_cfg.num_classes} outputs, manifest has {len(manifest.vocab)} classes")

    # Sorting by id makes the run independent of manifest row order.
    train_recs = sorted(manifest.require_split("train"), key=lambda r: r.id)
    val_recs = sorted(manifest.require_split("val"), key=lambda r: r.id)
    ids_needed = [r.id for r in train_recs] + [r.id for r in val_recs]
    if graph is not None and cfg.mode == "nsl":
        known = set(ids_needed)
        ids_needed += sorted({n for r in train_recs if r.id in graph for n in graph.adjacency[r.id]} - known)
    feats = load_features(feature_dir, ids_needed)
    features = dict(zip(ids_needed, feats))
    labels = {r.id: manifest.vocab.id_of(r.label) for r in manifest.records}
    upstream = None
    if cfg.fusion:
        sub = embeddings.subset([r.id for r in train_recs] + [r.id for r in val_recs])
        upstream = dict(zip(sub.ids, sub.vectors))

    dtype = np.float32
    state = init_state(model_cfg, cfg.seed, dtype, embeddings.dim if cfg.fusion else None)
    train_ids = [r.id for r in train_recs]
    x_val = np.stack([features[r.id] for r in val_recs])
    y_val = np.array([labels[r.id] for r in val_recs])
    x_tr = np.stack([features[i] for i in train_ids])
    y_tr = np.array([labels[i] for i in train_ids])
    up_val = np.stack([upstream[r.id] for r in val_recs]).astype(dtype) if upstream else None
    up_tr = np.stack([upstream[i] for i in train_ids]).astype(dtype) if upstream else None
    C = model_cfg.num_classes
    g = graph if cfg.mode == "nsl" else None

    metrics, batch_log = [], []
    best_uar, best_epoch, best_params = -1.0, -1, None
    for epoch in range(cfg.epochs):
        lr = lr_at(epoch, cfg)
        order = np.random.default_rng([cfg.seed, epoch]).permutation(len(train_ids))
        epoch_rows = []
        for b, start in enumerate(range(0, len(order), cfg.batch_size)):
            ids = [train_ids[j] for j in order[start : start + cfg.batch_size]]
            batch = assemble_batch(ids, features, labels, g, cfg.max_neighbors, upstream)
            if batch.upstream is not None:
                batch.upstream = batch.upstream.astype(dtype)
            lb, grads, _ = nsl_batch_loss(state.params, model_cfg, batch, cfg)
            adam_step(state, grads, lr)
            row = {"epoch": epoch, "batch": b, "size": len(ids), "pairs": lb.pairs, "alpha": lb.alpha,
                   "supervised": lb.supervised, "neighbor": lb.neighbor, "total": lb.total}
            epoch_rows.append(row)
            if lb.zero_norm_taps:
                log.warning("epoch %d batch %d: %d zero-norm tap pair(s) treated as orthogonal", epoch, b, lb.zero_norm_taps)
        batch_log += epoch_rows
        val = evaluate_arrays(state.params, model_cfg, x_val, y_val, C, up_val, cfg.fusion)
        tr = evaluate_arrays(state.params, model_cfg, x_tr, y_tr, C, up_tr, cfg.fusion)
        n = len(epoch_rows)
        metrics.append({
            "epoch": epoch, "lr": lr,
            "supervised": sum(r["supervised"] for r in epoch_rows) / n,
            "neighbor": sum(r["neighbor"] for r in epoch_rows) / n,
            "total": sum(r["total"] for r in epoch_rows) / n,
            "val_acc": val.accuracy, "val_uar": val.uar, "train_acc": tr.accuracy,
        })
        log.info("epoch %d lr %.3g loss %.4f val_uar %.4f", epoch, lr, metrics[-1]["total"], val.uar)
        if val.uar > best_uar:
            best_uar, best_epoch = val.uar, epoch
            best_params = {k: v.copy() for k, v in state.params.items()}
    if best_params is None:
        best_params = {k: v.copy() for k, v in state.params.items()}

    result = TrainResult(state, best_params, best_epoch, metrics, batch_log)
    if out_dir is not None:
        _write_run(Path(out_dir), result, manifest, feature_dir, model_cfg, cfg, embeddings, lock_extra or {})
    return result


def checkpoint_meta(manifest, cfg: TrainConfig, embeddings, epoch: int) -> dict:
    return {
        "classes": list(manifest.vocab.classes),
        "mode": cfg.mode,
        "fusion": cfg.fusion,
        "tap": cfg.tap,
        "upstream_dim": embeddings.dim if (cfg.fusion and embeddings is not None) else None,
        "epoch": epoch,
    }


def _write_run(out: Path, result: TrainResult, manifest, feature_dir, model_cfg, cfg, embeddings, lock_extra):
    out.mkdir(parents=True, exist_ok=True)
    save_checkpoint(out / "best.nnck", result.best_params, model_cfg,
                    checkpoint_meta(manifest, cfg, embeddings, result.best_epoch))
    save_checkpoint(out / "last.nnck", result.state.params, model_cfg,
                    checkpoint_meta(manifest, cfg, embeddings, cfg.epochs - 1))
    write_tsv(out / "metrics.tsv", METRIC_COLUMNS, result.metrics)
    write_tsv(out / "batches.tsv", BATCH_COLUMNS, result.batches)
    (out / "model.cfg").write_text(dump_model_config(model_cfg), encoding="utf-8")
    lock = {"train": asdict(cfg), "model_digest": model_cfg.digest().hex(),
            "norm_stats": file_digest(Path(feature_dir) / "norm.stats"),
            "best_epoch": result.best_epoch, **lock_extra}
    (out / "config.lock").write_text(json.dumps(lock, indent=2, sort_keys=True) + "\n", encoding="utf-8")
