import shutil
from pathlib import Path

import numpy as np
import pytest

from nslser.cli import main
from nslser.pipeline import (
    REPORT_COLUMNS,
    ExperimentGrid,
    GridCell,
    PipelineError,
    ReportError,
    compare,
    load_pipeline_config,
    report_grid,
    run_pipeline,
)

CONFIGS = Path(__file__).resolve().parents[1] / "configs"
SMOKE = CONFIGS / "smoke.ini"


@pytest.fixture(scope="module")
def smoke_run(tmp_path_factory):
    out = tmp_path_factory.mktemp("smoke")
    res = run_pipeline(load_pipeline_config(SMOKE), out)
    return out, res


def test_grid_product():
    grid = ExperimentGrid.product(["base", "nsl"], [3, 6, 9], [0.01, 0.1, 1], ["FC1", "FC2"], seeds=[0, 1])
    nsl = [c for c in grid.cells if c.mode == "nsl"]
    assert len(nsl) == 18 and len(grid.cells) == 19
    assert len(list(grid.runs())) == 38
    assert grid.neighbor_caps == [3, 6, 9]
    assert GridCell("nsl", 6, 0.1, "FC1").name == "nsl_n6_a0.1_FC1"
    with pytest.raises(ValueError):
        ExperimentGrid.product(["nsl"], [], [0.1])
    with pytest.raises(ValueError):
        GridCell("bogus")


def test_config_rejects_per_run_keys_in_train(tmp_path):
    ini = tmp_path / "p.ini"
    ini.write_text(SMOKE.read_text() + "\n")
    with pytest.raises(ValueError, match="alpha"):
        load_pipeline_config(ini, {"train.alpha": "0.5"})
    with pytest.raises(ValueError, match="section"):
        load_pipeline_config(ini, {"nonsense.x": "1"})


def test_smoke_layout(smoke_run):
    out, res = smoke_run
    for rel in ("features/norm.stats", "emb.bin", "g.tsv", "report.tsv",
                "run/base_s0/best.nnck", "run/nsl_n3_a0.01_FC2_s0/eval.tsv"):
        assert (out / rel).exists(), rel
    assert set(res.ran) == {"synth", "features", "embed", "graph_n3", "train/base_s0", "train/nsl_n3_a0.01_FC2_s0"}
    header = (out / "report.tsv").read_text().splitlines()[0].split("\t")
    assert tuple(header) == REPORT_COLUMNS


def test_rerun_skips_every_stage(smoke_run):
    out, first = smoke_run
    before = (out / "run/nsl_n3_a0.01_FC2_s0/best.nnck").read_bytes()
    again = run_pipeline(load_pipeline_config(SMOKE), out)
    assert again.ran == []
    assert len(again.stages) == len(first.stages)
    assert (out / "run/nsl_n3_a0.01_FC2_s0/best.nnck").read_bytes() == before


def test_changed_option_reruns_only_downstream(smoke_run, tmp_path):
    out, _ = smoke_run
    copy = tmp_path / "copy"
    shutil.copytree(out, copy)
    res = run_pipeline(load_pipeline_config(SMOKE, {"graph.epsilon": "0.9"}), copy)
    assert set(res.ran) == {"graph_n3", "train/nsl_n3_a0.01_FC2_s0"}


def test_tampered_output_is_rebuilt(smoke_run, tmp_path):
    out, _ = smoke_run
    copy = tmp_path / "copy"
    shutil.copytree(out, copy)
    (copy / "g.tsv").write_text("")
    res = run_pipeline(load_pipeline_config(SMOKE), copy)
    assert "graph_n3" in res.ran
    assert (copy / "g.tsv").read_bytes() == (out / "g.tsv").read_bytes()


def test_report_z_against_same_seed_base(smoke_run):
    out, res = smoke_run
    rows = {r["run"]: r for r in res.report}
    assert rows["base_s0"]["z"] is None
    nsl = rows["nsl_n3_a0.01_FC2_s0"]
    c = compare(out / "run/nsl_n3_a0.01_FC2_s0", out / "run/base_s0")
    assert nsl["p"] == pytest.approx(c["p"]) and nsl["z"] == pytest.approx(c["z"])
    lines = [line.split("\t") for line in (out / "report.tsv").read_text().splitlines()[1:]]
    base_line = next(cells for cells in lines if cells[0] == "base_s0")
    assert base_line[-2:] == ["", ""]


def test_single_base_run_has_empty_z(tmp_path):
    out = tmp_path / "b"
    res = run_pipeline(load_pipeline_config(SMOKE, {"grid.modes": "base", "train.epochs": "1"}), out)
    assert len(res.report) == 1 and res.report[0]["z"] is None


def test_small_full_grid(tmp_path):
    over = {"grid.neighbors": "1, 2, 3", "grid.alphas": "0.01, 0.1, 1", "grid.taps": "FC1, FC2",
            "train.epochs": "1", "synth.speakers": "1, 1, 1", "synth.clips_per_speaker_class": "1"}
    res = run_pipeline(load_pipeline_config(SMOKE, over), tmp_path / "g")
    assert len(res.report) == 19
    assert sum(r["mode"] == "nsl" for r in res.report) == 18
    keys = [(-r["test_uar"], r["run"]) for r in res.report]
    assert keys == sorted(keys)
    assert all((tmp_path / "g" / p).exists() for p in ("g.tsv", "graphs/g_n1.tsv", "graphs/g_n2.tsv"))


@pytest.mark.parametrize("header, stage", [
    ("id\taudio_path\tlabel\tsplit\tspeaker\tduration_s", "features"),  # audio file is missing
    ("id\taudio_path\tlabel\tsplit\tspeaker", "manifest"),               # column is missing
])
def test_stage_error_names_the_stage(tmp_path, header, stage):
    row = "\t".join(["x", "missing.wav", "happiness", "train", "p", "1.0"][:header.count("\t") + 1])
    (tmp_path / "m.tsv").write_text(f"{header}\n{row}\n")
    ini = tmp_path / "p.ini"
    ini.write_text("[data]\nmanifest = m.tsv\n[grid]\nmodes = base\n")
    with pytest.raises(PipelineError) as err:
        run_pipeline(load_pipeline_config(ini), tmp_path / "out")
    assert err.value.stage == stage
    assert repr(stage) in str(err.value)


def test_report_needs_runs(tmp_path):
    with pytest.raises(ReportError):
        report_grid(tmp_path)


# -- command line ------------------------------------------------------------------

def test_cli_step_by_step(tmp_path, capsys):
    corpus = tmp_path / "corpus"
    assert main(["synth", "--out", str(corpus), "--speakers", "1,1,1", "--clips", "2", "--seed", "3"]) == 0
    manifest = str(corpus / "manifest.tsv")
    assert main(["manifest", "validate", manifest]) == 0
    assert main(["manifest", "stats", manifest]) == 0
    feats = str(tmp_path / "feat")
    assert main(["features", "extract", "--manifest", manifest, "--out", feats]) == 0
    emb = str(tmp_path / "emb.bin")
    assert main(["embed", "toy", "--features", feats, "--out", emb, "--ids", manifest]) == 0
    cfg = tmp_path / "defaults.ini"
    cfg.write_text("[graph]\nepsilon = 0.9\nmax-neighbors = 2\nout = " + str(tmp_path / "g.tsv") + "\n")
    assert main(["graph", "build", "--embeddings", emb, "--manifest", manifest, "--config", str(cfg)]) == 0
    assert "edges over" in capsys.readouterr().out
    assert main(["train", "--manifest", manifest, "--features", feats, "--mode", "nsl", "--graph",
                 str(tmp_path / "g.tsv"), "--alpha", "0.1", "--epochs", "1", "--out", str(tmp_path / "r")]) == 0
    assert (tmp_path / "r/best.nnck").exists()
    assert main(["eval", "--checkpoint", str(tmp_path / "r/best.nnck"), "--manifest", manifest,
                 "--features", feats, "--split", "val"]) == 0
    out = capsys.readouterr().out
    assert out.splitlines()[-2] == "split\taccuracy\tuar\tn"
    assert (tmp_path / "r/confusion.tsv").exists()


def test_cli_config_values_are_defaults_not_overrides(tmp_path):
    rng = np.random.default_rng(0)
    from nslser.embedding import EmbeddingMatrix, save_embeddings

    save_embeddings(EmbeddingMatrix(("a", "b", "c"), rng.standard_normal((3, 4)).astype(np.float32)), tmp_path / "e.bin")
    cfg = tmp_path / "d.ini"
    cfg.write_text(f"[graph]\nepsilon = 0.99\nout = {tmp_path / 'from_file.tsv'}\n")
    assert main(["graph", "build", "--config", str(cfg), "--embeddings", str(tmp_path / "e.bin"),
                 "--epsilon", "-1", "--max-neighbors", "2"]) == 0
    g = (tmp_path / "from_file.tsv").read_text()
    assert len(g.splitlines()) == 3  # -1 from the command line beats 0.99 from the file


def test_cli_unknown_config_key(tmp_path):
    cfg = tmp_path / "d.ini"
    cfg.write_text("[graph]\nbogus = 1\n")
    with pytest.raises(SystemExit):
        main(["graph", "build", "--config", str(cfg), "--embeddings", "x", "--out", "y"])


def test_cli_run_report_and_compare(tmp_path, capsys):
    out = tmp_path / "p"
    assert main(["run", str(SMOKE), "--out", str(out), "--set", "train.epochs=1", "--seed", "2"]) == 0
    assert (out / "run/base_s2").is_dir() and (out / "run/nsl_n3_a0.01_FC2_s2").is_dir()
    capsys.readouterr()
    assert main(["report", str(out / "run"), "--out", str(tmp_path / "r.tsv")]) == 0
    assert (tmp_path / "r.tsv").read_text() == (out / "report.tsv").read_text()
    assert main(["compare", "--run-a", str(out / "run/nsl_n3_a0.01_FC2_s2"), "--run-b", str(out / "run/base_s2")]) == 0
    assert "one-tailed" in capsys.readouterr().out
    assert main(["grid", str(SMOKE), "--out", str(out), "--set", "train.epochs=1", "--seed", "2"]) == 0
    assert "0 stage(s) ran" in capsys.readouterr().out


def test_cli_errors_return_one(tmp_path, capsys):
    assert main(["manifest", "validate", str(tmp_path / "nope.tsv")]) == 1
    assert "error" in capsys.readouterr().err
    with pytest.raises(SystemExit):
        main(["run", str(SMOKE), "--out", str(tmp_path), "--set", "novalue"])
