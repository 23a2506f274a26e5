"""Upstream embeddings h(x): the EMB1 file format, cosine similarity and a toy extractor.

EMB1 layout (little endian)::

    b"EMB1" | u32 N | u32 d | N null-terminated UTF-8 ids | N*d float32, row-major
"""
from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

EMB_MAGIC = b"EMB1"


class EmbeddingFormatError(ValueError):
    pass


@dataclass(frozen=True)
class EmbeddingMatrix:
    ids: tuple[str, ...]
    vectors: np.ndarray

    def __post_init__(self):
        ids = tuple(self.ids)
        vectors = np.asarray(self.vectors)
        object.__setattr__(self, "ids", ids)
        object.__setattr__(self, "vectors", vectors)
        if vectors.ndim != 2 or vectors.shape[0] != len(ids):
            raise EmbeddingFormatError(f"expected {len(ids)} rows, got array of shape {vectors.shape}")
        if len(set(ids)) != len(ids):
            dup = next(i for i in ids if ids.count(i) > 1)
            raise EmbeddingFormatError(f"duplicate embedding id {dup!r}")
        if not np.all(np.isfinite(vectors)):
            raise EmbeddingFormatError("embeddings contain non-finite values")
        norms = np.linalg.norm(vectors.astype(np.float64), axis=1)
        if np.any(norms <= 0):
            bad = ids[int(np.argmin(norms))]
            raise EmbeddingFormatError(f"embedding {bad!r} has zero norm")

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]

    def __len__(self) -> int:
        return len(self.ids)

    def row(self, sample_id: str) -> np.ndarray:
        return self.vectors[self.ids.index(sample_id)]

    def subset(self, ids) -> "EmbeddingMatrix":
        pos = {sid: i for i, sid in enumerate(self.ids)}
        missing = [i for i in ids if i not in pos]
        if missing:
            raise KeyError(f"no embedding for {missing[0]!r} ({len(missing)} missing)")
        ids = list(ids)
        return EmbeddingMatrix(tuple(ids), self.vectors[[pos[i] for i in ids]])


def save_embeddings(emb: EmbeddingMatrix, path) -> None:
    n, d = emb.vectors.shape
    with open(path, "wb") as fh:
        fh.write(EMB_MAGIC + struct.pack("<II", n, d))
        for sid in emb.ids:
            if "\0" in sid:
                raise EmbeddingFormatError(f"id {sid!r} contains a NUL byte")
            fh.write(sid.encode("utf-8") + b"\0")
        fh.write(np.ascontiguousarray(emb.vectors, dtype="<f4").tobytes())


def load_embeddings(path) -> EmbeddingMatrix:
    raw = Path(path).read_bytes()
    if raw[:4] != EMB_MAGIC:
        raise EmbeddingFormatError(f"{path}: not an EMB1 file")
    if len(raw) < 12:
        raise EmbeddingFormatError(f"{path}: truncated header")
    n, d = struct.unpack_from("<II", raw, 4)
    pos = 12
    ids = []
    for _ in range(n):
        end = raw.find(b"\0", pos)
        if end < 0:
            raise EmbeddingFormatError(f"{path}: truncated id table")
        ids.append(raw[pos:end].decode("utf-8"))
        pos = end + 1
    body = raw[pos:]
    if len(body) != 4 * n * d:
        raise EmbeddingFormatError(
            f"{path}: declared {n}x{d} floats but found {len(body) / 4:g} values"
        )
    vectors = np.frombuffer(body, dtype="<f4").reshape(n, d).astype(np.float32)
    return EmbeddingMatrix(tuple(ids), vectors)


def cosine_similarity(a, b) -> float:
    """dot(a, b) / (|a| |b|) in float64, clamped to [-1, 1]."""
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    if a.shape != b.shape:
        raise ValueError(f"length mismatch: {a.shape[0]} vs {b.shape[0]}")
    na = np.linalg.norm(a)
    nb = np.linalg.norm(b)
    if na == 0 or nb == 0:
        raise ValueError("cosine similarity is undefined for a zero-norm vector")
    return float(min(1.0, max(-1.0, np.dot(a, b) / (na * nb))))


def toy_projection(n_in: int, d: int, seed: int) -> np.ndarray:
    rng = np.random.default_rng(seed)
    return rng.standard_normal((n_in, d)) / np.sqrt(d)


def toy_embed(spec, d: int, seed: int) -> np.ndarray:
    """Time-average a (frames, n_mels) spectrogram and project it to ``d`` dims.

    A stand-in for averaged upstream-model activations when no pretrained
    model is available.
    """
    if d < 1:
        raise ValueError("d must be >= 1")
    spec = np.asarray(spec, dtype=np.float64)
    return spec.mean(axis=0) @ toy_projection(spec.shape[1], d, seed)


def embed_features(feature_dir, ids, d: int, seed: int) -> EmbeddingMatrix:
    # Raw (unnormalised) log-Mel features, as produced by the front end.
    from .audio import load_spectrogram

    feature_dir = Path(feature_dir)
    rows = [toy_embed(load_spectrogram(feature_dir / f"{sid}.lmel"), d, seed) for sid in ids]
    return EmbeddingMatrix(tuple(ids), np.asarray(rows, dtype=np.float32))
