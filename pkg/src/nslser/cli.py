"""Command-line entry point.

Every subcommand takes ``--config FILE``: options in the INI section named
after the subcommand become flag defaults (``max-neighbors`` or
``max_neighbors``), and explicit flags on the command line win. ``grid`` and
``run`` read a full pipeline config instead; ``--set section.key=value``
overrides single entries there.
"""
from __future__ import annotations

import argparse
import configparser
import logging
import sys
from pathlib import Path

log = logging.getLogger("nslser")


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="INI file with defaults for this command")
    p.add_argument("--seed", type=int, default=0)


def _parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="nslser", description="Graph-regularised speech emotion recognition toolkit")
    ap.add_argument("-v", "--verbose", action="count", default=0)
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("manifest", help="validate a manifest or print per-split class counts")
    p.add_argument("action", choices=("validate", "stats"))
    p.add_argument("path")
    _add_common(p)

    p = sub.add_parser("features", help="extract log-Mel features")
    p.add_argument("action", choices=("extract",))
    p.add_argument("--manifest", required=True)
    p.add_argument("--root", help="directory that relative audio paths resolve against (default: manifest dir)")
    p.add_argument("--out", required=True)
    p.add_argument("--sample-rate", type=int, default=16000)
    p.add_argument("--win-length", type=int, default=512)
    p.add_argument("--hop-length", type=int, default=256)
    p.add_argument("--n-mels", type=int, default=64)
    p.add_argument("--target-length", type=int)
    _add_common(p)

    p = sub.add_parser("embed", help="produce upstream embeddings")
    p.add_argument("action", choices=("toy",))
    p.add_argument("--features", required=True)
    p.add_argument("--dim", type=int, default=256)
    p.add_argument("--ids", help="manifest whose ids to embed (default: every .lmel file)")
    p.add_argument("--out", required=True)
    _add_common(p)

    p = sub.add_parser("graph", help="build the neighbour graph")
    p.add_argument("action", choices=("build",))
    p.add_argument("--embeddings", required=True)
    p.add_argument("--epsilon", type=float, default=0.99)
    p.add_argument("--max-neighbors", type=int, default=6)
    p.add_argument("--manifest", help="restrict nodes to one split of this manifest")
    p.add_argument("--split", default="train")
    p.add_argument("--out", required=True)
    _add_common(p)

    p = sub.add_parser("train", help="train one model")
    p.add_argument("--manifest", required=True)
    p.add_argument("--features", required=True)
    p.add_argument("--mode", default="base")
    p.add_argument("--graph")
    p.add_argument("--embeddings")
    p.add_argument("--alpha", type=float, default=0.1)
    p.add_argument("--max-neighbors", type=int)
    p.add_argument("--tap", default="FC2", choices=("FC1", "FC2"))
    p.add_argument("--model", default="cnn6-toy", help="built-in name or model config file")
    p.add_argument("--epochs", type=int, default=50)
    p.add_argument("--batch-size", type=int, default=16)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--raw-sums", action="store_true")
    p.add_argument("--out", required=True)
    _add_common(p)

    p = sub.add_parser("eval", help="score a checkpoint on one split")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--model", help="model config (default: model.cfg next to the checkpoint)")
    p.add_argument("--manifest", required=True)
    p.add_argument("--features", required=True)
    p.add_argument("--embeddings")
    p.add_argument("--split", default="test")
    p.add_argument("--confusion", help="where to write the confusion matrix (default: confusion.tsv beside the checkpoint)")
    _add_common(p)

    p = sub.add_parser("compare", help="one-tailed z-test between two evaluated runs")
    p.add_argument("--run-a", required=True)
    p.add_argument("--run-b", required=True)
    _add_common(p)

    for name, text in (("grid", "run an experiment grid from a pipeline config"),
                       ("run", "run the full pipeline from a pipeline config")):
        p = sub.add_parser(name, help=text)
        p.add_argument("pipeline", help="pipeline INI file")
        p.add_argument("--out", required=True)
        p.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE")
        p.add_argument("--config", help=argparse.SUPPRESS)
        p.add_argument("--seed", type=int, help="run a single seed instead of [grid] seeds")

    p = sub.add_parser("report", help="rebuild report.tsv from a directory of runs")
    p.add_argument("runs")
    p.add_argument("--out")
    _add_common(p)

    p = sub.add_parser("synth", help="write the synthetic corpus")
    p.add_argument("--out", required=True)
    p.add_argument("--label-noise", type=float, default=0.0)
    p.add_argument("--clips", type=int, default=4, help="clips per speaker and class")
    p.add_argument("--speakers", default="6,3,3", help="train,val,test speaker counts")
    _add_common(p)
    return ap


def _config_defaults(parser: argparse.ArgumentParser, argv, command: str) -> None:
    """Apply ``[command]`` options from ``--config`` as parser defaults."""
    pre = argparse.ArgumentParser(add_help=False)
    pre.add_argument("--config")
    known, _ = pre.parse_known_args(argv)
    if not known.config or command in ("grid", "run"):
        return
    cp = configparser.ConfigParser(inline_comment_prefixes=(";", "#"))
    with open(known.config, encoding="utf-8") as fh:
        cp.read_file(fh)
    if not cp.has_section(command):
        return
    sub = next(a for a in parser._actions if isinstance(a, argparse._SubParsersAction)).choices[command]
    dests = {a.dest: a for a in sub._actions}
    values = {}
    for key, raw in cp[command].items():
        dest = key.replace("-", "_")
        if dest not in dests:
            raise SystemExit(f"{known.config}: unknown option {key!r} for {command}")
        action = dests[dest]
        if isinstance(action, argparse._StoreTrueAction):
            values[dest] = cp[command].getboolean(key)
        else:
            values[dest] = action.type(raw) if action.type else raw
    sub.set_defaults(**values)
    # Options supplied through the file no longer need to be on the command line.
    for dest in values:
        dests[dest].required = False


def _cmd_manifest(args) -> int:
    from .dataset import format_split_counts, load_manifest, speaker_overlap

    m = load_manifest(args.path)
    if args.action == "validate":
        overlap = speaker_overlap(m)
        print(f"ok: {len(m)} records, {len(m.vocab)} classes" + (f", {len(overlap)} speaker(s) in several splits" if overlap else ""))
    else:
        print(format_split_counts(m))
    return 0


def _cmd_features(args) -> int:
    from .audio import MelConfig, extract_features
    from .dataset import load_manifest

    m = load_manifest(args.manifest)
    cfg = MelConfig(sample_rate=args.sample_rate, win_length=args.win_length, hop_length=args.hop_length,
                    n_mels=args.n_mels, target_length=args.target_length)
    info = extract_features(m, args.out, cfg, root=args.root or Path(args.manifest).parent)
    print(f"{info['count']} spectrograms, {info['frames']} frames x {info['n_mels']} mels "
          f"(target length {info['target_length']} samples)")
    return 0


def _cmd_embed(args) -> int:
    from .dataset import load_manifest
    from .embedding import embed_features, save_embeddings

    if args.ids:
        ids = sorted(r.id for r in load_manifest(args.ids).records)
    else:
        ids = sorted(p.stem for p in Path(args.features).glob("*.lmel"))
    emb = embed_features(args.features, ids, args.dim, args.seed)
    save_embeddings(emb, args.out)
    print(f"{len(emb)} embeddings of dim {emb.dim} -> {args.out}")
    return 0


def _cmd_graph(args) -> int:
    from .dataset import load_manifest
    from .embedding import load_embeddings
    from .graph import GraphConfig, build_graph, save_graph

    emb = load_embeddings(args.embeddings)
    if args.manifest:
        wanted = sorted(r.id for r in load_manifest(args.manifest).require_split(args.split))
        emb = emb.subset(wanted)
    g = build_graph(emb, GraphConfig(args.epsilon, args.max_neighbors))
    save_graph(g, args.out)
    isolated = sum(1 for i in g.node_ids if g.degree(i) == 0)
    print(f"{g.num_edges} edges over {len(g.node_ids)} nodes ({isolated} isolated) -> {args.out}")
    return 0


def _cmd_train(args) -> int:
    from .audio import load_features
    from .dataset import load_manifest
    from .embedding import load_embeddings
    from .graph import load_graph
    from .nn.zoo import resolve_model
    from .train import TrainConfig, train

    m = load_manifest(args.manifest)
    probe = load_features(args.features, [m.records[0].id], normalize=False)
    model_cfg = resolve_model(args.model, probe.shape[1], probe.shape[2], len(m.vocab))
    cfg = TrainConfig(mode=args.mode, alpha=args.alpha, tap=args.tap, batch_size=args.batch_size,
                      epochs=args.epochs, lr0=args.lr, seed=args.seed, max_neighbors=args.max_neighbors,
                      raw_sums=args.raw_sums)
    graph = load_graph(args.graph) if args.graph else None
    emb = load_embeddings(args.embeddings) if args.embeddings else None
    res = train(m, args.features, model_cfg, cfg, graph=graph, embeddings=emb, out_dir=args.out,
                lock_extra={"manifest": str(args.manifest), "graph": args.graph, "embeddings": args.embeddings})
    best = res.metrics[res.best_epoch] if res.metrics else None
    if best:
        print(f"best epoch {res.best_epoch}: val acc {best['val_acc']:.4f} val UAR {best['val_uar']:.4f}")
    return 0


def _cmd_eval(args) -> int:
    from .dataset import load_manifest
    from .embedding import load_embeddings
    from .evaluation import evaluate, save_confusion
    from .nn.config import load_model_config

    ckpt = Path(args.checkpoint)
    model_cfg = load_model_config(args.model or ckpt.parent / "model.cfg")
    m = load_manifest(args.manifest)
    emb = load_embeddings(args.embeddings) if args.embeddings else None
    res = evaluate(ckpt, model_cfg, m, args.split, args.features, emb)
    print("split\taccuracy\tuar\tn")
    print(f"{args.split}\t{res.accuracy:.6f}\t{res.uar:.6f}\t{res.n}")
    save_confusion(args.confusion or ckpt.parent / "confusion.tsv", res.confusion, m.vocab.classes)
    return 0


def _cmd_compare(args) -> int:
    from .pipeline import compare

    c = compare(args.run_a, args.run_b)
    print(f"{c['run_a']}\ttest UAR {c['uar_a']:.4f}\tn {c['n_a']}")
    print(f"{c['run_b']}\ttest UAR {c['uar_b']:.4f}\tn {c['n_b']}")
    print(f"z {c['z']:.4f}\tp (one-tailed, a > b) {c['p']:.4f}")
    return 0


def _pipeline_overrides(args) -> dict:
    out = {}
    for item in args.set:
        key, sep, value = item.partition("=")
        if not sep or "." not in key:
            raise SystemExit(f"--set expects SECTION.KEY=VALUE, got {item!r}")
        out[key.strip()] = value.strip()
    if args.seed is not None:
        out["grid.seeds"] = str(args.seed)
    return out


def _cmd_pipeline(args) -> int:
    from .pipeline import format_report, load_pipeline_config, run_pipeline

    cfg = load_pipeline_config(args.pipeline, _pipeline_overrides(args))
    res = run_pipeline(cfg, args.out)
    for stage, state in res.stages:
        log.info("%-40s %s", stage, state)
    print(format_report(res.report))
    print(f"{len(res.ran)} stage(s) ran, {len(res.stages) - len(res.ran)} up to date; report: {Path(args.out) / 'report.tsv'}")
    return 0


def _cmd_report(args) -> int:
    from .pipeline import format_report, report_grid

    rows = report_grid(args.runs, args.out)
    print(format_report(rows))
    return 0


def _cmd_synth(args) -> int:
    from .synth import SynthConfig, synth_corpus

    speakers = tuple(int(v) for v in args.speakers.split(","))
    if len(speakers) != 3:
        raise SystemExit("--speakers expects three counts: train,val,test")
    m = synth_corpus(args.out, SynthConfig(speakers=speakers, clips_per_speaker_class=args.clips,
                                           label_noise=args.label_noise, seed=args.seed))
    print(f"{len(m)} clips -> {Path(args.out) / 'manifest.tsv'}")
    return 0


COMMANDS = {
    "manifest": _cmd_manifest, "features": _cmd_features, "embed": _cmd_embed, "graph": _cmd_graph,
    "train": _cmd_train, "eval": _cmd_eval, "compare": _cmd_compare, "grid": _cmd_pipeline,
    "run": _cmd_pipeline, "report": _cmd_report, "synth": _cmd_synth,
}


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = _parser()
    command = next((a for a in argv if a in COMMANDS), None)
    if command:
        _config_defaults(parser, argv, command)
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2), format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except (OSError, ValueError, KeyError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
