"""Acceptance suite: one test per numbered criterion.

Each test records a short detail string; conftest prints a PASS/FAIL line per
criterion in the terminal summary.
"""
import statistics
import time
from pathlib import Path

import numpy as np
import pytest

import nslser.train as train_mod
from nslser.audio import AudioClip, MelConfig, extract_features, load_spectrogram, log_mel, num_frames, resample
from nslser.embedding import EmbeddingMatrix, embed_features
from nslser.evaluation import accuracy, one_tailed_z_test, uar, z_test
from nslser.graph import GraphConfig, NeighborGraph, build_graph, save_graph
from nslser.nn import grad_check, init_params
from nslser.nn.zoo import cnn6_toy
from nslser.pipeline import load_pipeline_config, run_pipeline
from nslser.synth import SynthConfig, synth_corpus
from nslser.train import TrainConfig, assemble_batch, nsl_batch_loss, read_tsv, train

from oracles import brute_force_graph, exact_accuracy, exact_uar, graph_text, similarity_table

CONFIGS = Path(__file__).resolve().parents[1] / "configs"


@pytest.fixture(scope="module")
def corpus(tmp_path_factory):
    """Small synthetic corpus with features and a train-split graph."""
    root = tmp_path_factory.mktemp("corpus")
    manifest = synth_corpus(root / "c", SynthConfig(speakers=(3, 1, 1), clips_per_speaker_class=3, label_noise=0.3))
    extract_features(manifest, root / "f", MelConfig(), root=root / "c")
    ids = sorted(r.id for r in manifest.split("train"))
    emb = embed_features(root / "f", ids, 256, 0)
    graph = build_graph(emb, GraphConfig(0.95, 3))
    assert graph.num_edges > 0
    shape = load_spectrogram(root / "f" / f"{ids[0]}.lmel").shape
    return manifest, root / "f", graph, cnn6_toy(shape[0], shape[1], len(manifest.vocab))


@pytest.mark.criterion(1, "graph oracle equivalence")
def test_graph_matches_brute_force_oracle(record_property, tmp_path):
    rng = np.random.default_rng(2024)
    mismatches, spent, cases = [], 0.0, 0
    for trial in range(20):
        n = int(rng.integers(2, 201))
        d = (8, 256)[trial % 2]
        centres = rng.standard_normal((5, d))
        x = centres[rng.integers(0, 5, n)] + rng.choice([0.02, 0.3, 2.0]) * rng.standard_normal((n, d))
        emb = EmbeddingMatrix(tuple(f"x{i:03d}" for i in range(n)), x.astype(np.float32))
        vecs = emb.vectors.astype(np.float64).tolist()
        sims = similarity_table(vecs)
        for eps in (0.0, 0.3, 0.99):
            for cap in (3, 6, 9):
                t0 = time.perf_counter()
                save_graph(build_graph(emb, GraphConfig(eps, cap)), tmp_path / "g.tsv")
                spent += time.perf_counter() - t0
                want = graph_text(brute_force_graph(emb.ids, vecs, eps, cap, sims))
                cases += 1
                if (tmp_path / "g.tsv").read_text() != want:
                    mismatches.append((trial, eps, cap))
    record_property("detail", f"{cases} cases, {len(mismatches)} mismatches, build time {spent:.2f} s")
    assert not mismatches
    assert spent < 10.0


@pytest.mark.criterion(2, "NSL loss gradient check")
def test_nsl_gradient_check(record_property):
    t0 = time.perf_counter()
    rng = np.random.default_rng(3)
    cfg = cnn6_toy(16, 12, 4, fc1=12, fc2=8)
    params = {k: v.astype(np.float64) + 0.05 * rng.standard_normal(v.shape) for k, v in init_params(cfg, 1).items()}
    ids = [f"s{i}" for i in range(9)]
    feats = {s: rng.standard_normal((16, 12)) for s in ids}
    labels = {s: int(rng.integers(4)) for s in ids}
    # every in-batch sample has exactly two neighbours
    edges = [("s0", "s3"), ("s0", "s4"), ("s1", "s5"), ("s1", "s6"), ("s2", "s7"), ("s2", "s8")]
    adj = {}
    for a, b in edges:
        adj.setdefault(a, {})[b] = 0.97
        adj.setdefault(b, {})[a] = 0.97
    batch = assemble_batch(["s0", "s1", "s2"], feats, labels, NeighborGraph(tuple(ids), adj), max_neighbors=2)
    assert len(batch.pairs) == 6
    tcfg = TrainConfig(mode="nsl", alpha=0.1)

    def objective(p, need_grad):
        lb, grads, caches = nsl_batch_loss(p, cfg, batch, tcfg, need_grad)
        return lb.total, grads, caches

    res = grad_check(objective, params, max_params=3000, seed=0)
    spent = time.perf_counter() - t0
    record_property("detail", f"max rel error {res.max_rel_error:.2e} over {res.checked} coords, {spent:.1f} s")
    assert not res.at_kink
    assert res.max_rel_error < 1e-6
    assert spent < 60.0


def _trajectory(monkeypatch, *args, **kwargs):
    """Train and return the bytes of every parameter after every Adam step."""
    steps = []
    real = train_mod.adam_step

    def spy(state, grads, lr):
        out = real(state, grads, lr)
        steps.append(b"".join(state.params[k].tobytes() for k in sorted(state.params)))
        return out
    monkeypatch.setattr(train_mod, "adam_step", spy)
    train(*args, **kwargs)
    monkeypatch.setattr(train_mod, "adam_step", real)
    return steps


@pytest.mark.criterion(3, "alpha = 0 reproduces the base trajectory")
def test_alpha_zero_matches_base(corpus, monkeypatch, record_property):
    manifest, feat_dir, graph, model_cfg = corpus
    base = _trajectory(monkeypatch, manifest, feat_dir, model_cfg, TrainConfig(mode="base", epochs=5, seed=7))
    nsl = _trajectory(monkeypatch, manifest, feat_dir, model_cfg,
                      TrainConfig(mode="nsl", alpha=0.0, epochs=5, seed=7, max_neighbors=3), graph=graph)
    same = sum(a == b for a, b in zip(base, nsl))
    record_property("detail", f"{same}/{len(base)} optimizer steps bit-identical")
    assert len(base) == len(nsl) > 0
    assert same == len(base)


@pytest.mark.criterion(4, "logged loss identity")
def test_logged_loss_identity(corpus, tmp_path, record_property):
    manifest, feat_dir, graph, model_cfg = corpus
    checked, bad = 0, 0
    for alpha, raw in ((0.01, False), (0.1, False), (1.0, True)):
        out = tmp_path / f"a{alpha}_{raw}"
        train(manifest, feat_dir, model_cfg, TrainConfig(mode="nsl", alpha=alpha, epochs=2, max_neighbors=3,
                                                         raw_sums=raw), graph=graph, out_dir=out)
        for row in read_tsv(out / "batches.tsv"):
            checked += 1
            bad += float(row["total"]) != float(row["supervised"]) + float(row["alpha"]) * float(row["neighbor"])
            assert float(row["alpha"]) == alpha
    record_property("detail", f"{checked} logged batches, {bad} violations")
    assert checked > 0 and bad == 0


@pytest.mark.criterion(5, "z-test significance reproduction")
def test_z_test_reproduction(record_property):
    t = z_test(0.789, 0.772, 2326, 2326)
    record_property("detail", f"z = {t.z:.4f}, p = {t.p:.4f}")
    assert t.p == pytest.approx(0.081, abs=0.005)
    assert t.p < 0.1
    assert one_tailed_z_test(0.789, 0.772, 2326, 2326) == t.p


@pytest.mark.criterion(6, "desk-scale NSL benefit under label noise")
def test_desk_nsl_benefit(tmp_path, record_property):
    t0 = time.perf_counter()
    diffs = []
    for seed in range(5):
        over = {"synth.seed": str(seed), "embedding.seed": str(seed), "grid.seeds": str(seed)}
        cfg = load_pipeline_config(CONFIGS / "desk.ini", over)
        assert cfg.synth.label_noise == 0.3
        assert [c.name for c in cfg.grid.cells] == ["base", "nsl_n3_a0.01_FC2"]
        rows = {r["mode"]: r for r in run_pipeline(cfg, tmp_path / f"s{seed}").report}
        diffs.append(rows["nsl"]["test_uar"] - rows["base"]["test_uar"])
    spent = time.perf_counter() - t0
    median = statistics.median(diffs)
    positive = sum(d > 0 for d in diffs)
    record_property("detail", "diffs " + ", ".join(f"{d:+.4f}" for d in diffs)
                    + f"; median {median:+.4f}; {positive}/5 positive; {spent:.0f} s")
    assert median >= 0
    assert positive >= 3
    assert spent < 600


@pytest.mark.criterion(7, "DSP contracts")
def test_dsp_contracts(record_property):
    cfg = MelConfig()
    silence = log_mel(AudioClip(np.zeros(16000), 16000), cfg)
    assert np.all(silence == np.log(1e-6))
    # 1 + floor((L - 512) / 256), worked out by hand
    hand = {512: 1, 768: 2, 1024: 3, 16000: 61, 95488: 372}
    for length, frames in hand.items():
        assert num_frames(length) == frames
        assert log_mel(AudioClip(np.zeros(length), 16000), cfg).shape[0] == frames
    bin_hz = 16000 / 512
    peaks = {}
    for src in (8000, 22050, 44100, 48000):
        t = np.arange(src) / src
        out = resample(AudioClip(np.sin(2 * np.pi * 440 * t), src), 16000).samples
        spectrum = np.abs(np.fft.rfft(out[4000:4512] * np.hanning(512)))
        peaks[src] = np.argmax(spectrum) * bin_hz
    record_property("detail", "peaks " + ", ".join(f"{s}->{p:.1f} Hz" for s, p in peaks.items()))
    assert all(abs(p - 440) <= bin_hz for p in peaks.values())


@pytest.mark.criterion(8, "pipeline determinism")
def test_pipeline_determinism(tmp_path, record_property):
    cfg = load_pipeline_config(CONFIGS / "smoke.ini")
    run_pipeline(cfg, tmp_path / "a")
    run_pipeline(cfg, tmp_path / "b")
    files = ["g.tsv"] + [str(p.relative_to(tmp_path / "a")) for p in sorted((tmp_path / "a" / "run").glob("*/*"))
                         if p.name in ("metrics.tsv", "best.nnck", "last.nnck")]
    differ = [f for f in files if (tmp_path / "a" / f).read_bytes() != (tmp_path / "b" / f).read_bytes()]
    record_property("detail", f"{len(files)} files compared, {len(differ)} differ")
    assert len(files) == 7
    assert not differ


@pytest.mark.criterion(9, "metric oracles")
def test_metric_oracles(record_property):
    rng = np.random.default_rng(99)
    worst = 0.0
    for _ in range(10):
        c = int(rng.integers(2, 9))
        cm = rng.integers(0, 50, size=(c, c))
        cm[:, 0] += 1
        worst = max(worst, abs(accuracy(cm) - float(exact_accuracy(cm))), abs(uar(cm) - float(exact_uar(cm))))
    balanced = 0
    for _ in range(10):
        c = int(rng.integers(2, 9))
        cm = rng.multinomial(40, np.ones(c) / c, size=c)
        balanced += abs(uar(cm) - accuracy(cm)) <= 1e-12
    record_property("detail", f"max deviation from rational oracle {worst:.1e}; {balanced}/10 balanced equal")
    assert worst <= 1e-15
    assert balanced == 10
