import dataclasses
import json

import numpy as np
import pytest

from talkhead.cli import main
from talkhead.config import DataConfig, GlobalConfig
from talkhead.data import CorpusManifest
from talkhead.gradcheck import tiny_model_config
from talkhead.mesh_graph import read_ptkm
from talkhead.training import load_checkpoint

STEPS = 5


@pytest.fixture
def workdir(tmp_path, monkeypatch):
    """A directory holding a tiny config; relative default paths resolve inside it."""
    cfg = GlobalConfig(model=tiny_model_config(),
                       data=DataConfig(n_styles=2, seqs_per_style=2, seconds=0.8, test_fraction=0.0,
                                       val_fraction=0.0))
    cfg.train = dataclasses.replace(cfg.train, stage1_steps=STEPS, stage2_steps=STEPS, batch_size=2,
                                    log_every=1, lr=1e-3)
    (tmp_path / "cfg.json").write_text(json.dumps(cfg.to_dict()))
    monkeypatch.chdir(tmp_path)
    return tmp_path


def run(*argv):
    return main(list(argv))


def read_log(path):
    rows = [line.split("\t") for line in path.read_text().splitlines() if not line.startswith("#")]
    header, body = rows[0], rows[1:]
    return header, np.array([[float(v) for v in r] for r in body])


@pytest.fixture
def trained(workdir):
    assert run("synth-data", "--config", "cfg.json") == 0
    assert run("train", "--config", "cfg.json") == 0
    return workdir


def test_synth_data_counts_match_disk(workdir, capsys):
    assert run("synth-data", "--config", "cfg.json", "--out", "c") == 0
    out = capsys.readouterr().out
    meshes = list((workdir / "c" / "mesh").glob("*.ptkm"))
    wavs = list((workdir / "c" / "audio").glob("*.wav"))
    assert len(meshes) == len(wavs) == 4
    assert "wrote 4 sequences" in out
    assert len(CorpusManifest.load(workdir / "c" / "manifest.json").entries) == 4


def test_synth_data_zero_sequences(workdir):
    assert run("synth-data", "--config", "cfg.json", "--out", "empty", "--set", "data.seqs_per_style=0") == 0
    assert CorpusManifest.load(workdir / "empty" / "manifest.json").entries == []


def test_synth_data_byte_identical(workdir):
    run("synth-data", "--config", "cfg.json", "--out", "a", "--seed", "3")
    run("synth-data", "--config", "cfg.json", "--out", "b", "--seed", "3")
    files = sorted(p.relative_to(workdir / "a") for p in (workdir / "a").rglob("*") if p.is_file())
    assert files
    for rel in files:
        assert (workdir / "a" / rel).read_bytes() == (workdir / "b" / rel).read_bytes()


def test_train_smoke(trained):
    header, body = read_log(trained / "runs" / "loss_log.tsv")
    assert len(body) == 2 * STEPS
    assert np.all(np.isfinite(body))
    assert (trained / "runs" / "stage1.ptkc").exists()
    assert load_checkpoint(trained / "runs" / "final.ptkc").step == 2 * STEPS


def test_train_resume_matches(trained):
    _, straight = read_log(trained / "runs" / "loss_log.tsv")
    assert run("train", "--config", "cfg.json", "--stop-after", "7", "--set", "paths.checkpoint_dir=r2") == 0
    assert (trained / "r2" / "step7.ptkc").exists()
    assert run("train", "--resume", "r2/step7.ptkc", "--set", "paths.checkpoint_dir=r2") == 0
    _, resumed = read_log(trained / "r2" / "loss_log.tsv")
    np.testing.assert_allclose(resumed, straight, rtol=1e-5, atol=1e-7)


def test_ablation_flags_in_log_header(trained):
    assert run("train", "--config", "cfg.json", "--disable-cts", "--disable-e_g",
               "--set", "paths.checkpoint_dir=abl") == 0
    first = (trained / "abl" / "loss_log.tsv").read_text().splitlines()[0]
    assert first == "# ablations: disable_cts,disable_e_g"


def test_generate(trained):
    manifest = CorpusManifest.load(trained / "corpus" / "manifest.json")
    wav = str(trained / "corpus" / manifest.entries[0].audio)
    args = ["generate", "--checkpoint", "runs/final.ptkc", "--audio", wav]
    assert run(*args, "--identity", "0", "--output", "a.ptkm") == 0
    assert run(*args, "--identity", "0", "--output", "b.ptkm") == 0
    assert run(*args, "--identity", "1", "--output", "c.ptkm") == 0
    a = read_ptkm(trained / "a.ptkm")
    assert a.num_frames == 20
    assert (trained / "a.ptkm").read_bytes() == (trained / "b.ptkm").read_bytes()
    assert np.linalg.norm(a.frames - read_ptkm(trained / "c.ptkm").frames) > 0
    ref = str(trained / "corpus" / manifest.entries[1].mesh)
    assert run(*args, "--identity", "0", "--style-reference", ref, "--output", "d.ptkm") == 0


def test_eval_ground_truth_is_zero(trained, capsys):
    assert run("eval", "--checkpoint", "runs/final.ptkc", "--split", "train", "--ground-truth",
               "--json", "gt.json") == 0
    report = json.loads((trained / "gt.json").read_text())
    assert report["lve"] == 0.0 and report["fdd"] == 0.0
    assert set(report) == {"lve", "fdd", "style_silhouette", "rows"}


def test_eval_rows_aggregate(trained):
    assert run("eval", "--checkpoint", "runs/final.ptkc", "--split", "train", "--json", "r.json") == 0
    report = json.loads((trained / "r.json").read_text())
    assert len(report["rows"]) == 4
    assert abs(report["lve"] - np.mean([r["lve"] for r in report["rows"]])) < 1e-12
    assert abs(report["fdd"] - np.mean([r["fdd"] for r in report["rows"]])) < 1e-12
    assert report["lve"] > 0


def test_gradcheck_subset(capsys):
    assert run("gradcheck", "--only", "grl", "--only", "velocity") == 0
    out = capsys.readouterr().out
    assert "PASS" in out and "negative_control" in out


def test_exit_codes(workdir, capsys):
    assert run("train", "--config", "cfg.json", "--set", "model.d_model=-3") == 2
    assert "model.d_model" in capsys.readouterr().err
    assert run("eval", "--checkpoint", "missing.ptkc") == 3
    (workdir / "junk.ptkc").write_bytes(b"junk")
    assert run("eval", "--checkpoint", "junk.ptkc") == 3
    assert run("train", "--config", "nope.json") == 3
    with pytest.raises(SystemExit):
        run("frobnicate")
