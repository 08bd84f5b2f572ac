"""Scaled synthetic study: held-out lip error, content/style probes, ablations.

The model dimensions here are smaller than the library defaults so the whole
study (one main run plus the ablation grid) fits a single CPU core.
"""

from __future__ import annotations

import copy
import json
import time
from dataclasses import asdict, dataclass, field

import numpy as np
import torch
from sklearn.linear_model import LogisticRegression
from sklearn.pipeline import make_pipeline
from sklearn.preprocessing import StandardScaler

from .config import GlobalConfig
from .data import TensorCorpus
from .metrics import lip_vertex_error, style_silhouette
from .model import TalkingHeadModel
from .training import Trainer, build_model

STUDY_MODEL = dict(d_model=32, d_graph=8, d_style=32, d_audio=32, d_motion=32,
                   frontend_channels=32, classifier_hidden=32, enc_layers=1, dec_layers=1)

# fixed before tuning; chance for 8 styles is 12.5 %
LVE_RATIO_MAX = 0.5
CONTENT_PROBE_MARGIN = 0.15
STYLE_PROBE_MIN = 0.90
SILHOUETTE_MIN = 0.5


def study_config(seed: int = 0, stage1_steps: int = 300, stage2_steps: int = 700,
                 seqs_per_style: int = 200) -> GlobalConfig:
    """Study settings: library defaults except the dimensions and the adversary.

    The adversary needs a fast-learning classifier (100x the encoder lr) and a
    stronger reversal (alpha_c = 3) before a linear probe on pooled content
    drops near chance; with the library defaults the probe reads style at
    50-90 %.
    """
    cfg = GlobalConfig()
    for k, v in STUDY_MODEL.items():
        setattr(cfg.model, k, v)
    cfg.data.seqs_per_style = seqs_per_style
    cfg.train.seed = seed
    cfg.train.lr = 1e-3
    cfg.train.batch_size = 16
    cfg.train.classifier_lr_scale = 100.0
    cfg.train.weights.alpha_c = 3.0
    cfg.train.stage1_steps = stage1_steps
    cfg.train.stage2_steps = stage2_steps
    return cfg.validate()


def _chunks(idx: np.ndarray, size: int):
    for i in range(0, len(idx), size):
        yield idx[i:i + size]


def held_out_lve(model: TalkingHeadModel, corpus: TensorCorpus, split: str = "test",
                 limit: int | None = None, batch_size: int = 32) -> float:
    """LVE of the audio-only inference path against ground truth."""
    idx = corpus.indices(split)[:limit]
    model.eval()
    preds, gts = [], []
    for chunk in _chunks(idx, batch_size):
        b = corpus.batch(chunk)
        out = model.generate(b.mel, b.identity, b.num_frames)
        preds.extend(out.numpy())
        gts.extend(b.frames.numpy())
    return lip_vertex_error(preds, gts, corpus.topology.lip_mask)


@torch.no_grad()
def pooled_features(model: TalkingHeadModel, corpus: TensorCorpus, split: str,
                    batch_size: int = 64) -> dict[str, np.ndarray]:
    """Time-pooled content features and style codes from ground-truth inputs."""
    model.eval()
    out: dict[str, list] = {"a": [], "c": [], "s": [], "s_a": [], "s_m": [], "label": []}
    for chunk in _chunks(corpus.indices(split), batch_size):
        enc = model.encode(corpus.batch(chunk))
        out["a"].append(enc["a"].mean(1).numpy())
        out["c"].append(enc["c"].mean(1).numpy())
        for key in ("s", "s_a", "s_m"):
            out[key].append(enc[key].numpy())
        out["label"].append(corpus.identity[chunk].numpy())
    return {k: np.concatenate(v) for k, v in out.items()}


def linear_probe(train_x, train_y, test_x, test_y, seed: int = 0) -> float:
    clf = make_pipeline(StandardScaler(), LogisticRegression(max_iter=2000, random_state=seed))
    clf.fit(train_x, train_y)
    return float(clf.score(test_x, test_y))


@dataclass
class StudyResult:
    seed: int
    ablations: list[str]
    steps: int
    seconds: float
    lve: float
    lve_untrained: float | None = None
    probe_audio_content: float | None = None
    probe_motion_content: float | None = None
    probe_style: float | None = None
    silhouette: float | None = None
    chance: float | None = None
    final_losses: dict = field(default_factory=dict)

    @property
    def lve_ratio(self) -> float | None:
        return None if self.lve_untrained is None else self.lve / self.lve_untrained

    def to_dict(self) -> dict:
        return {**asdict(self), "lve_ratio": self.lve_ratio}


def run_study(cfg: GlobalConfig, corpus: TensorCorpus, probes: bool = True,
              lve_limit: int | None = None, log_path=None) -> StudyResult:
    """Train one configuration and score it on the test split."""
    cfg.validate()
    untrained = None
    if probes:
        untrained = held_out_lve(build_model(cfg, corpus.topology, corpus.templates), corpus, limit=lve_limit)
    start = time.perf_counter()
    trainer = Trainer(cfg, corpus, log_path=log_path)
    trainer.run(cfg.train.total_steps)
    seconds = time.perf_counter() - start
    model = trainer.model
    res = StudyResult(cfg.train.seed, cfg.train.ablations.active(), cfg.train.total_steps, seconds,
                      held_out_lve(model, corpus, limit=lve_limit), untrained,
                      final_losses=_tail_mean(trainer.history))
    if probes:
        tr, te = pooled_features(model, corpus, "train"), pooled_features(model, corpus, "test")
        res.probe_audio_content = linear_probe(tr["a"], tr["label"], te["a"], te["label"], cfg.train.seed)
        res.probe_motion_content = linear_probe(tr["c"], tr["label"], te["c"], te["label"], cfg.train.seed)
        res.probe_style = linear_probe(tr["s"], tr["label"], te["s"], te["label"], cfg.train.seed)
        res.silhouette = style_silhouette(te["s"], te["label"])
        res.chance = 1.0 / corpus.templates.shape[0]
    return res


def _tail_mean(history: list[dict], n: int = 20) -> dict:
    tail = history[-n:]
    return {k: float(np.mean([r[k] for r in tail])) for k in tail[0] if k != "step"} if tail else {}


ABLATION_VARIANTS = {"full": (), "no_cts": ("disable_cts",), "no_motion_disent": ("disable_motion_disent",)}


def run_ablations(base: GlobalConfig, corpus: TensorCorpus, seeds=(0, 1, 2), variants=None,
                  lve_limit: int | None = None, progress=None,
                  reuse: dict[tuple[str, int], StudyResult] | None = None) -> dict[str, list[StudyResult]]:
    """Train every (variant, seed) pair; ``reuse`` supplies runs already done."""
    variants = variants or ABLATION_VARIANTS
    reuse = reuse or {}
    out: dict[str, list[StudyResult]] = {}
    for name, flags in variants.items():
        for seed in seeds:
            if (name, seed) in reuse:
                out.setdefault(name, []).append(reuse[(name, seed)])
                continue
            cfg = copy.deepcopy(base)
            cfg.train.seed = seed
            for flag in flags:
                setattr(cfg.train.ablations, flag, True)
            res = run_study(cfg, corpus, probes=False, lve_limit=lve_limit)
            out.setdefault(name, []).append(res)
            if progress:
                progress(name, res)
    return out


def ablation_verdict(results: dict[str, list[StudyResult]], reference: str = "full") -> dict[str, dict]:
    """Enabled-term mean LVE against each ablated mean, with the paired standard error."""
    ref = np.array([r.lve for r in results[reference]])
    verdict = {}
    for name, runs in results.items():
        if name == reference:
            continue
        lve = np.array([r.lve for r in runs])
        diff = ref - lve
        se = float(diff.std(ddof=1) / np.sqrt(len(diff))) if len(diff) > 1 else 0.0
        verdict[name] = {"enabled_mean": float(ref.mean()), "disabled_mean": float(lve.mean()),
                         "paired_se": se, "passes": bool(ref.mean() <= lve.mean())}
    return verdict


def dump(obj, path) -> None:
    def default(o):
        if isinstance(o, StudyResult):
            return o.to_dict()
        raise TypeError(type(o))
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=1, default=default)
