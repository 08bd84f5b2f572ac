import numpy as np

from talkhead import study
from talkhead.config import DataConfig, GlobalConfig
from talkhead.data import TensorCorpus
from talkhead.gradcheck import tiny_model_config


def fake(lve, seed=0):
    return study.StudyResult(seed, [], 1, 0.0, lve)


def test_ablation_verdict_direction_and_se():
    runs = {"full": [fake(1.0), fake(1.2), fake(0.8)],
            "worse": [fake(1.1), fake(1.3), fake(1.0)],
            "better": [fake(0.9), fake(1.0), fake(0.8)]}
    v = study.ablation_verdict(runs)
    assert v["worse"]["passes"] and not v["better"]["passes"]
    diff = np.array([-0.1, -0.1, -0.2])
    assert abs(v["worse"]["paired_se"] - diff.std(ddof=1) / np.sqrt(3)) < 1e-12


def test_linear_probe_separable_and_random():
    rng = np.random.default_rng(0)
    y = np.repeat(np.arange(4), 50)
    x = rng.normal(size=(200, 3)) + 5 * np.eye(4)[y][:, :3]
    assert study.linear_probe(x[::2], y[::2], x[1::2], y[1::2]) > 0.95
    noise = rng.normal(size=(200, 3))
    assert study.linear_probe(noise[::2], y[::2], noise[1::2], y[1::2]) < 0.5


def test_study_config_matches_recorded_settings():
    cfg = study.study_config(seed=4)
    assert cfg.train.seed == 4 and cfg.train.total_steps == 1000
    assert cfg.train.classifier_lr_scale == 100.0 and cfg.train.weights.alpha_c == 3.0
    assert cfg.data.n_styles == 8 and cfg.data.seqs_per_style == 200


def test_run_study_and_ablations_on_tiny_corpus(tmp_path):
    cfg = GlobalConfig(model=tiny_model_config(),
                       data=DataConfig(n_styles=2, seqs_per_style=6, seconds=0.8, test_fraction=0.34,
                                       val_fraction=0.0))
    cfg.train.stage1_steps = cfg.train.stage2_steps = 2
    cfg.train.batch_size = 4
    corpus = TensorCorpus.synthetic(cfg.data, n_mels=cfg.model.n_mels)
    res = study.run_study(cfg, corpus, log_path=tmp_path / "log.tsv")
    assert res.steps == 4 and res.lve > 0 and res.lve_ratio > 0
    assert 0 <= res.probe_motion_content <= 1 and res.chance == 0.5
    runs = study.run_ablations(cfg, corpus, seeds=(0,), reuse={("full", 0): res})
    assert runs["full"][0] is res
    assert runs["no_cts"][0].ablations == ["disable_cts"]
    study.dump({"runs": runs}, tmp_path / "a.json")
    assert (tmp_path / "a.json").read_text().count("disable_cts") == 1
