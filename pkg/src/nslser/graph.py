"""Cosine neighbour graph over upstream embeddings.

Every node picks up to ``max_neighbors`` other nodes whose cosine similarity
strictly exceeds ``epsilon`` (highest first, ties by ascending id); the edge
set is the union of these selections, made symmetric. A popular node can
therefore end up with more than ``max_neighbors`` edges.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .embedding import EmbeddingMatrix, cosine_similarity

# Bound on |vectorised similarity - per-pair similarity|; only used to widen the
# candidate prefilter, never for the final decision.
_PREFILTER_SLACK = 1e-9


class GraphFormatError(ValueError):
    pass


@dataclass(frozen=True)
class GraphConfig:
    epsilon: float = 0.99
    max_neighbors: int = 6

    def __post_init__(self):
        if not -1.0 <= self.epsilon <= 1.0:
            raise ValueError(f"epsilon must lie in [-1, 1], got {self.epsilon}")
        if self.max_neighbors < 1:
            raise ValueError("max_neighbors must be >= 1")


@dataclass
class NeighborGraph:
    node_ids: tuple[str, ...]
    adjacency: dict[str, dict[str, float]] = field(default_factory=dict)

    def __post_init__(self):
        self.node_ids = tuple(self.node_ids)
        for sid in self.node_ids:
            self.adjacency.setdefault(sid, {})

    def __contains__(self, sid) -> bool:
        return sid in self.adjacency

    def edges(self) -> list[tuple[str, str, float]]:
        """Undirected edges (a, b, w) with a < b, in canonical order."""
        out = [(a, b, w) for a, nbrs in self.adjacency.items() for b, w in nbrs.items() if a < b]
        out.sort()
        return out

    @property
    def num_edges(self) -> int:
        return sum(len(v) for v in self.adjacency.values()) // 2

    def degree(self, sid: str) -> int:
        return len(self.adjacency[sid])


def _add_edge(adj, a, b, w):
    if a == b:
        raise GraphFormatError(f"self-loop on {a!r}")
    adj.setdefault(a, {})[b] = w
    adj.setdefault(b, {})[a] = w


def _select(i, sims_row, ids, vectors, cfg):
    """Top-n neighbours of node i, decided on exact per-pair similarities."""
    cand = np.flatnonzero(sims_row > cfg.epsilon - _PREFILTER_SLACK)
    cand = cand[cand != i]
    if cand.size > cfg.max_neighbors:
        nth = np.partition(sims_row[cand], -cfg.max_neighbors)[-cfg.max_neighbors]
        cand = cand[sims_row[cand] >= nth - 2 * _PREFILTER_SLACK]
    scored = []
    for k in cand:
        s = cosine_similarity(vectors[i], vectors[k])
        if s > cfg.epsilon:
            scored.append((-s, ids[k], int(k)))
    scored.sort()
    return [k for _, _, k in scored[: cfg.max_neighbors]]


def build_graph(emb: EmbeddingMatrix, cfg: GraphConfig) -> NeighborGraph:
    if len(emb) < 2:
        raise ValueError("need at least two embeddings to build a graph")
    vectors = emb.vectors.astype(np.float64)
    norms = np.linalg.norm(vectors, axis=1)
    if np.any(norms == 0):
        raise ValueError("cosine similarity is undefined for a zero-norm vector")
    unit = vectors / norms[:, None]
    ids = emb.ids
    adj: dict[str, dict[str, float]] = {}
    # Blocks of rows keep the similarity matrix out of memory for large N.
    block = 1024
    for start in range(0, len(ids), block):
        sims = unit[start : start + block] @ unit.T
        for off, row in enumerate(sims):
            i = start + off
            for k in _select(i, row, ids, vectors, cfg):
                a, b = sorted((i, k), key=lambda j: ids[j])
                _add_edge(adj, ids[a], ids[b], cosine_similarity(vectors[a], vectors[b]))
    return NeighborGraph(ids, adj)


def neighbors_of(g: NeighborGraph, sid: str) -> list[tuple[str, float]]:
    """Neighbours sorted by descending weight, then ascending id."""
    if sid not in g.adjacency:
        raise KeyError(f"unknown node {sid!r}")
    return sorted(g.adjacency[sid].items(), key=lambda kv: (-kv[1], kv[0]))


def format_weight(w: float) -> str:
    return f"{w:.9g}"


def save_graph(g: NeighborGraph, path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for a, b, w in g.edges():
            fh.write(f"{a}\t{b}\t{format_weight(w)}\n")


def load_graph(path, node_ids=None) -> NeighborGraph:
    """Read a graph file.

    Lines with ``id_i < id_j`` list an undirected edge once. A line with
    ``id_i > id_j`` is a directed listing and must be mirrored by its reverse
    with the same weight. ``node_ids`` adds nodes without edges.
    """
    adj: dict[str, dict[str, float]] = {}
    directed: dict[tuple[str, str], float] = {}
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), start=1):
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) != 3:
            raise GraphFormatError(f"{path}:{lineno}: expected 3 tab-separated fields")
        a, b, ws = parts
        try:
            w = float(ws)
        except ValueError:
            raise GraphFormatError(f"{path}:{lineno}: bad weight {ws!r}") from None
        if a == b:
            raise GraphFormatError(f"{path}:{lineno}: self-loop on {a!r}")
        if (a, b) in directed:
            raise GraphFormatError(f"{path}:{lineno}: duplicate edge {a!r}-{b!r}")
        directed[(a, b)] = w
    for (a, b), w in directed.items():
        if a > b:
            back = directed.get((b, a))
            if back is None:
                raise GraphFormatError(f"{path}: edge ({a!r}, {b!r}) has no reverse ({b!r}, {a!r})")
            if back != w:
                raise GraphFormatError(f"{path}: edge {a!r}-{b!r} has unequal weights {back} and {w}")
        _add_edge(adj, a, b, w)
    nodes = set(adj)
    if node_ids is not None:
        nodes.update(node_ids)
    return NeighborGraph(tuple(sorted(nodes)), adj)
