"""End-to-end experiment runner with content-hash stage caching.

A pipeline config is an INI file (or the equivalent nested dict)::

    [data]
    manifest = corpus/manifest.tsv   ; or leave out and add a [synth] section
    [synth]
    seed = 0
    label_noise = 0.3
    [features]
    n_mels = 64
    [embedding]
    source = toy                     ; or a path to an EMB1 file
    dim = 256
    seed = 0
    [graph]
    epsilon = 0.99
    max_neighbors = 6
    split = train
    [model]
    spec = cnn6-toy
    [train]
    epochs = 50
    [grid]
    modes = base, nsl
    neighbors = 3, 6, 9
    alphas = 0.01, 0.1, 1
    taps = FC1, FC2
    seeds = 0

Artifacts land in one output directory: ``corpus/`` (synthetic data only),
``features/``, ``emb.bin``, ``g.tsv`` (graph for ``[graph] max_neighbors``),
``graphs/g_n<k>.tsv`` for other grid values, ``run/<cell>_s<seed>/`` per run
and ``report.tsv``. Each stage records a hash of its inputs and outputs in
``.cache/`` and is skipped when nothing changed.
"""
from __future__ import annotations

import configparser
import hashlib
import itertools
import json
import logging
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from .audio import MelConfig, extract_features, load_norm_stats
from .dataset import load_manifest
from .embedding import embed_features, load_embeddings, save_embeddings
from .evaluation import evaluate, save_confusion, z_test
from .graph import GraphConfig, build_graph, load_graph, save_graph
from .nn.zoo import BUILTIN, resolve_model
from .synth import SynthConfig, synth_corpus
from .train import MODES, TrainConfig, read_tsv, train, write_tsv

log = logging.getLogger(__name__)

SECTIONS = ("data", "synth", "features", "embedding", "graph", "model", "train", "grid")
EVAL_COLUMNS = ("split", "accuracy", "uar", "n")
REPORT_COLUMNS = ("run", "mode", "n", "alpha", "tap", "seed", "val_acc", "val_uar",
                  "test_acc", "test_uar", "z", "p")


class PipelineError(RuntimeError):
    """A stage failed; the message names the stage."""

    def __init__(self, stage: str, cause: BaseException):
        super().__init__(f"stage {stage!r} failed: {cause}")
        self.stage = stage


class ReportError(ValueError):
    pass


# -- experiment grid ---------------------------------------------------------------

@dataclass(frozen=True)
class GridCell:
    mode: str
    n: int | None = None
    alpha: float = 0.0
    tap: str = "FC2"

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"unknown mode {self.mode!r}")
        if self.mode == "nsl" and (self.n is None or self.n < 1):
            raise ValueError("nsl cells need a neighbour cap n >= 1")

    @property
    def name(self) -> str:
        if self.mode != "nsl":
            return self.mode
        return f"nsl_n{self.n}_a{self.alpha:g}_{self.tap}"


@dataclass(frozen=True)
class ExperimentGrid:
    cells: tuple[GridCell, ...]
    seeds: tuple[int, ...] = (0,)

    def __post_init__(self):
        if not self.cells:
            raise ValueError("grid has no cells")
        if len(set(self.cells)) != len(self.cells):
            raise ValueError("grid cells must be unique")
        if not self.seeds or len(set(self.seeds)) != len(self.seeds):
            raise ValueError("seeds must be a non-empty list without repeats")

    @classmethod
    def product(cls, modes, neighbors=(), alphas=(), taps=("FC2",), seeds=(0,)) -> "ExperimentGrid":
        """Non-NSL modes get one cell each; NSL gets the full n x alpha x tap product."""
        cells = []
        for mode in modes:
            if mode == "nsl":
                if not neighbors or not alphas:
                    raise ValueError("nsl in the grid needs neighbour caps and alphas")
                cells += [GridCell("nsl", int(n), float(a), t) for n, a, t in itertools.product(neighbors, alphas, taps)]
            else:
                cells.append(GridCell(mode))
        return cls(tuple(cells), tuple(int(s) for s in seeds))

    @property
    def neighbor_caps(self) -> list[int]:
        return sorted({c.n for c in self.cells if c.mode == "nsl"})

    def runs(self):
        for seed in self.seeds:
            for cell in self.cells:
                yield cell, seed


# -- configuration -----------------------------------------------------------------

def _split_list(value: str) -> list[str]:
    return [v.strip() for v in value.split(",") if v.strip()]


def _coerce(dc_type, values: dict) -> dict:
    """Convert string values to the types of ``dc_type``'s defaults."""
    known = {f.name: f for f in fields(dc_type)}
    out = {}
    for key, raw in values.items():
        if key not in known:
            raise ValueError(f"unknown {dc_type.__name__} option {key!r}")
        default = known[key].default
        if not isinstance(raw, str):
            out[key] = tuple(raw) if isinstance(default, tuple) else raw
        elif raw.strip().lower() in ("", "none"):
            out[key] = None
        elif isinstance(default, bool):
            out[key] = raw.strip().lower() in ("1", "true", "yes", "on")
        elif isinstance(default, tuple):
            out[key] = tuple(type(default[0])(v) for v in _split_list(raw))
        elif isinstance(default, int):
            out[key] = int(raw)
        elif isinstance(default, float) or default is None:
            try:
                out[key] = int(raw) if key in ("target_length", "max_neighbors") else float(raw)
            except ValueError:
                out[key] = raw
        else:
            out[key] = raw
    return out


@dataclass
class PipelineConfig:
    manifest: Path | None = None
    audio_root: Path | None = None
    synth: SynthConfig | None = None
    mel: MelConfig = field(default_factory=MelConfig)
    embedding_source: str = "toy"
    embedding_dim: int = 256
    embedding_seed: int = 0
    graph: GraphConfig = field(default_factory=GraphConfig)
    graph_split: str = "train"
    model: str = "cnn6-toy"
    train: dict = field(default_factory=dict)  # TrainConfig overrides shared by all runs
    grid: ExperimentGrid = field(default_factory=lambda: ExperimentGrid((GridCell("base"),)))

    def __post_init__(self):
        if (self.manifest is None) == (self.synth is None):
            raise ValueError("give exactly one of [data] manifest or a [synth] section")
        needs_emb = any(c.mode.startswith("transfer_") for c in self.grid.cells)
        if needs_emb and not self.embedding_source:
            raise ValueError("transfer cells need upstream embeddings")

    @classmethod
    def from_sections(cls, sections: dict, base_dir=".") -> "PipelineConfig":
        base_dir = Path(base_dir)
        unknown = set(sections) - set(SECTIONS) - {"DEFAULT"}
        if unknown:
            raise ValueError(f"unknown config section(s): {sorted(unknown)}")
        get = lambda name: dict(sections.get(name, {}))  # noqa: E731
        data = get("data")
        manifest = data.get("manifest")
        root = data.get("root")
        synth = None
        if "synth" in sections:
            synth = SynthConfig(**_coerce(SynthConfig, get("synth")))
        emb = get("embedding")
        graph = get("graph")
        split = graph.pop("split", "train")
        model = get("model").get("spec", "cnn6-toy")
        if model not in BUILTIN and not Path(model).is_absolute():
            candidate = base_dir / model
            model = str(candidate) if candidate.exists() else model
        tr = _coerce(TrainConfig, get("train"))
        for key in ("mode", "alpha", "tap", "seed"):
            if key in tr:
                raise ValueError(f"[train] {key} is set per run by [grid]")
        g = get("grid")
        modes = _split_list(g.get("modes", "base"))
        grid = ExperimentGrid.product(
            modes,
            neighbors=[int(v) for v in _split_list(str(g.get("neighbors", "")))],
            alphas=[float(v) for v in _split_list(str(g.get("alphas", "")))],
            taps=_split_list(str(g.get("taps", "FC2"))),
            seeds=[int(v) for v in _split_list(str(g.get("seeds", "0")))],
        )
        return cls(
            manifest=(base_dir / manifest) if manifest else None,
            audio_root=(base_dir / root) if root else None,
            synth=synth,
            mel=MelConfig(**_coerce(MelConfig, get("features"))),
            embedding_source=str(emb.get("source", "toy")),
            embedding_dim=int(emb.get("dim", 256)),
            embedding_seed=int(emb.get("seed", 0)),
            graph=GraphConfig(**_coerce(GraphConfig, graph)),
            graph_split=split,
            model=model,
            train=tr,
            grid=grid,
        )


def read_config(path, overrides: dict | None = None) -> dict:
    """Parse an INI file into ``{section: {key: value}}``, then apply overrides."""
    parser = configparser.ConfigParser(inline_comment_prefixes=(";", "#"))
    if path is not None:
        with open(path, encoding="utf-8") as fh:
            parser.read_file(fh)
    sections = {s: dict(parser[s]) for s in parser.sections()}
    for key, value in (overrides or {}).items():
        section, _, option = key.partition(".")
        sections.setdefault(section, {})[option] = value
    return sections


def load_pipeline_config(path, overrides: dict | None = None) -> PipelineConfig:
    base = Path(path).parent if path is not None else Path(".")
    return PipelineConfig.from_sections(read_config(path, overrides), base)


# -- stage caching -----------------------------------------------------------------

def _digest_path(path: Path) -> str:
    h = hashlib.sha256()
    if path.is_dir():
        for p in sorted(q for q in path.rglob("*") if q.is_file()):
            h.update(p.relative_to(path).as_posix().encode() + b"\0")
            h.update(hashlib.sha256(p.read_bytes()).digest())
    else:
        h.update(path.read_bytes())
    return h.hexdigest()


def _key(material) -> str:
    return hashlib.sha256(json.dumps(material, sort_keys=True, default=str).encode()).hexdigest()


class StageCache:
    """Remembers, per stage, the input key and the digests of its outputs."""

    def __init__(self, out_dir: Path):
        self.out = out_dir
        self.dir = out_dir / ".cache"
        self.log: list[tuple[str, str]] = []

    def _record(self, stage: str) -> Path:
        return self.dir / (stage.replace("/", "__") + ".json")

    def fresh(self, stage: str, key: str, outputs) -> bool:
        rec = self._record(stage)
        if not rec.exists():
            return False
        saved = json.loads(rec.read_text(encoding="utf-8"))
        if saved.get("key") != key:
            return False
        for rel, digest in saved.get("outputs", {}).items():
            p = self.out / rel
            if not p.exists() or _digest_path(p) != digest:
                return False
        return set(saved.get("outputs", {})) == {str(o) for o in outputs}

    def run(self, stage: str, material, outputs, fn):
        key = _key(material)
        if self.fresh(stage, key, outputs):
            log.info("stage %s: up to date", stage)
            self.log.append((stage, "skipped"))
            return
        log.info("stage %s: running", stage)
        try:
            fn()
        except Exception as exc:
            raise PipelineError(stage, exc) from exc
        self.dir.mkdir(parents=True, exist_ok=True)
        digests = {str(o): _digest_path(self.out / o) for o in outputs}
        self._record(stage).write_text(json.dumps({"key": key, "outputs": digests}, indent=1, sort_keys=True),
                                       encoding="utf-8")
        self.log.append((stage, "ran"))


# -- the pipeline ------------------------------------------------------------------

@dataclass
class PipelineResult:
    out_dir: Path
    stages: list[tuple[str, str]]
    report: list[dict]

    @property
    def ran(self) -> list[str]:
        return [s for s, state in self.stages if state == "ran"]


def graph_path(cfg: PipelineConfig, n: int) -> str:
    return "g.tsv" if n == cfg.graph.max_neighbors else f"graphs/g_n{n}.tsv"


def write_eval(run_dir: Path, manifest, model_cfg, feature_dir, embeddings) -> dict:
    rows = {}
    for split in ("val", "test"):
        res = evaluate(run_dir / "best.nnck", model_cfg, manifest, split, feature_dir, embeddings)
        rows[split] = {"split": split, "accuracy": res.accuracy, "uar": res.uar, "n": res.n}
        save_confusion(run_dir / f"confusion_{split}.tsv", res.confusion, manifest.vocab.classes)
    write_tsv(run_dir / "eval.tsv", EVAL_COLUMNS, list(rows.values()))
    return rows


def run_pipeline(cfg: PipelineConfig, out_dir) -> PipelineResult:
    """Run every stage in order, skipping those whose inputs are unchanged."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    cache = StageCache(out)

    # 1. manifest (generated or given)
    if cfg.synth is not None:
        cache.run("synth", {"synth": asdict(cfg.synth)}, ["corpus"],
                  lambda: synth_corpus(out / "corpus", cfg.synth))
        manifest_path, root = out / "corpus" / "manifest.tsv", out / "corpus"
    else:
        manifest_path = cfg.manifest
        root = cfg.audio_root or cfg.manifest.parent
    try:
        manifest = load_manifest(manifest_path)
    except Exception as exc:
        raise PipelineError("manifest", exc) from exc
    manifest_digest = _digest_path(Path(manifest_path))

    # 2. features
    def audio_digest():
        h = hashlib.sha256()
        for r in sorted(manifest.records, key=lambda r: r.id):
            p = Path(r.audio_path)
            h.update(r.id.encode() + b"\0" + _digest_path(p if p.is_absolute() else Path(root) / p).encode())
        return h.hexdigest()

    feat_dir = out / "features"
    try:
        audio_key = audio_digest()
    except Exception as exc:
        raise PipelineError("features", exc) from exc
    cache.run("features", {"manifest": manifest_digest, "audio": audio_key, "mel": asdict(cfg.mel)},
              ["features"], lambda: extract_features(manifest, feat_dir, cfg.mel, root=root))
    features_digest = _digest_path(feat_dir)

    # 3. embeddings
    all_ids = sorted(r.id for r in manifest.records)
    if cfg.embedding_source == "toy":
        emb_material = {"features": features_digest, "dim": cfg.embedding_dim, "seed": cfg.embedding_seed}

        def make_embeddings():
            save_embeddings(embed_features(feat_dir, all_ids, cfg.embedding_dim, cfg.embedding_seed), out / "emb.bin")
    else:
        src = Path(cfg.embedding_source)
        emb_material = {"file": _digest_path(src) if src.exists() else str(src)}

        def make_embeddings():
            save_embeddings(load_embeddings(src).subset(all_ids), out / "emb.bin")
    cache.run("embed", emb_material, ["emb.bin"], make_embeddings)
    embeddings = load_embeddings(out / "emb.bin")
    emb_digest = _digest_path(out / "emb.bin")

    # 4. graphs, one per neighbour cap
    graph_ids = sorted(r.id for r in manifest.records if r.split == cfg.graph_split)
    caps = sorted(set(cfg.grid.neighbor_caps) | {cfg.graph.max_neighbors})
    graph_digests = {}
    for n in caps:
        rel = graph_path(cfg, n)
        gcfg = GraphConfig(cfg.graph.epsilon, n)

        def make_graph(rel=rel, gcfg=gcfg):
            (out / rel).parent.mkdir(parents=True, exist_ok=True)
            save_graph(build_graph(embeddings.subset(graph_ids), gcfg), out / rel)
        cache.run(f"graph_n{n}", {"emb": emb_digest, "graph": asdict(gcfg), "split": cfg.graph_split,
                                  "manifest": manifest_digest}, [rel], make_graph)
        graph_digests[n] = _digest_path(out / rel)

    # 5. training and evaluation, one run per (cell, seed)
    try:
        info = load_norm_stats(feat_dir / "norm.stats")
        n_mels = len(info.mean)
        frames = _feature_frames(feat_dir, all_ids[0])
        model_cfg = resolve_model(cfg.model, frames, n_mels, len(manifest.vocab))
    except Exception as exc:
        raise PipelineError("model", exc) from exc
    for cell, seed in cfg.grid.runs():
        name = f"{cell.name}_s{seed}"
        run_rel = f"run/{name}"
        tcfg = TrainConfig(**{**cfg.train, "mode": cell.mode, "alpha": cell.alpha, "tap": cell.tap, "seed": seed,
                              "max_neighbors": cell.n if cell.mode == "nsl" else cfg.train.get("max_neighbors")})
        lock = {"manifest": manifest_digest, "features": features_digest, "mel": asdict(cfg.mel),
                "model_spec": cfg.model, "model_digest": model_cfg.digest().hex(), "cell": asdict(cell)}
        if cell.mode == "nsl":
            lock.update(graph=graph_path(cfg, cell.n), graph_digest=graph_digests[cell.n],
                        graph_config={"epsilon": cfg.graph.epsilon, "max_neighbors": cell.n,
                                      "split": cfg.graph_split})
        if tcfg.fusion:
            lock.update(embeddings_digest=emb_digest)

        def do_train(cell=cell, tcfg=tcfg, lock=lock, run_rel=run_rel):
            graph = load_graph(out / graph_path(cfg, cell.n)) if cell.mode == "nsl" else None
            train(manifest, feat_dir, model_cfg, tcfg, graph=graph,
                  embeddings=embeddings if tcfg.fusion else None, out_dir=out / run_rel, lock_extra=lock)
            write_eval(out / run_rel, manifest, model_cfg, feat_dir, embeddings if tcfg.fusion else None)
        cache.run(f"train/{name}", {"train": asdict(tcfg), **lock}, [run_rel], do_train)

    # 6. report
    try:
        report = report_grid(out / "run", out / "report.tsv")
    except Exception as exc:
        raise PipelineError("report", exc) from exc
    return PipelineResult(out, cache.log, report)


def _feature_frames(feat_dir: Path, sample_id: str) -> int:
    from .audio import load_spectrogram

    return load_spectrogram(feat_dir / f"{sample_id}.lmel").shape[0]


# -- reporting ---------------------------------------------------------------------

def read_run(run_dir) -> dict:
    """Summarise one finished run directory (config.lock, metrics.tsv, eval.tsv)."""
    run_dir = Path(run_dir)
    try:
        lock = json.loads((run_dir / "config.lock").read_text(encoding="utf-8"))
        metrics = read_tsv(run_dir / "metrics.tsv")
        for row in metrics:
            for key in ("epoch", "total", "val_uar"):
                float(row[key])
        evals = {r["split"]: r for r in read_tsv(run_dir / "eval.tsv")}
        tr = lock["train"]
        row = {
            "run": run_dir.name,
            "mode": tr["mode"],
            "n": tr["max_neighbors"] if tr["mode"] == "nsl" else None,
            "alpha": float(tr["alpha"]) if tr["mode"] == "nsl" else None,
            "tap": tr["tap"] if tr["mode"] == "nsl" else None,
            "seed": int(tr["seed"]),
        }
        for split in ("val", "test"):
            row[f"{split}_acc"] = float(evals[split]["accuracy"])
            row[f"{split}_uar"] = float(evals[split]["uar"])
            row[f"{split}_n"] = int(evals[split]["n"])
    except (OSError, KeyError, ValueError, TypeError) as exc:
        raise ReportError(f"{run_dir}: unreadable run ({exc})") from exc
    if not metrics:
        raise ReportError(f"{run_dir}: metrics.tsv has no epochs")
    return row


def compare(run_a, run_b) -> dict:
    """Test UARs of two runs and the one-tailed z-test for ``a > b``."""
    a, b = read_run(run_a), read_run(run_b)
    t = z_test(a["test_uar"], b["test_uar"], a["test_n"], b["test_n"])
    return {"run_a": a["run"], "run_b": b["run"], "uar_a": a["test_uar"], "uar_b": b["test_uar"],
            "n_a": a["test_n"], "n_b": b["test_n"], "z": t.z, "p": t.p}


def report_grid(runs_dir, out_path=None) -> list[dict]:
    """One row per completed run, sorted by test UAR (descending).

    The ``z``/``p`` columns compare each run against the base run with the
    same seed; they stay empty for base runs or when no such base exists.
    """
    runs_dir = Path(runs_dir)
    dirs = sorted(p for p in runs_dir.iterdir() if p.is_dir()) if runs_dir.is_dir() else []
    if not dirs:
        raise ReportError(f"{runs_dir}: no completed runs")
    rows = [read_run(d) for d in dirs]
    base = {r["seed"]: r for r in rows if r["mode"] == "base"}
    for r in rows:
        ref = base.get(r["seed"])
        if r["mode"] == "base" or ref is None:
            r["z"] = r["p"] = None
        else:
            t = z_test(r["test_uar"], ref["test_uar"], r["test_n"], ref["test_n"])
            r["z"], r["p"] = t.z, t.p
    rows.sort(key=lambda r: (-r["test_uar"], r["run"]))
    if out_path is not None:
        write_report(out_path, rows)
    return rows


def _cell(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return "inf" if math.isinf(v) and v > 0 else ("-inf" if math.isinf(v) else f"{v:.6g}")
    return str(v)


def write_report(path, rows) -> None:
    lines = ["\t".join(REPORT_COLUMNS)]
    lines += ["\t".join(_cell(r[c]) for c in REPORT_COLUMNS) for r in rows]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def format_report(rows) -> str:
    header = ["run", "test_uar", "test_acc", "val_uar", "z", "p"]
    width = max(len(r["run"]) for r in rows)
    out = [f"{'run':<{width}}  " + "  ".join(f"{h:>8}" for h in header[1:])]
    for r in rows:
        cells = [f"{r[h]:8.4f}" if isinstance(r[h], float) else f"{'':>8}" for h in header[1:]]
        out.append(f"{r['run']:<{width}}  " + "  ".join(cells))
    return "\n".join(out)

