import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from sklearn.metrics import silhouette_score

from talkhead.errors import ConfigError
from talkhead.metrics import (EvalReport, build_report, lip_vertex_error, style_silhouette,
                              upper_face_dynamics_deviation)


def dist(p, q):
    return math.sqrt(sum((a - b) ** 2 for a, b in zip(p, q)))


def loop_lve(preds, gts, lip):
    per_seq = []
    for p, g in zip(preds, gts):
        frames = []
        for t in range(len(p)):
            frames.append(max(dist(p[t][v], g[t][v]) for v in range(len(lip)) if lip[v]))
        per_seq.append(sum(frames) / len(frames))
    return sum(per_seq) / len(per_seq)


def loop_std(xs):
    m = sum(xs) / len(xs)
    return math.sqrt(sum((x - m) ** 2 for x in xs) / len(xs))


def loop_fdd(preds, gts, upper, tmpl):
    per_seq = []
    for p, g in zip(preds, gts):
        gaps = []
        for v in range(len(upper)):
            if not upper[v]:
                continue
            sp = loop_std([dist(p[t][v], tmpl[v]) for t in range(len(p))])
            sg = loop_std([dist(g[t][v], tmpl[v]) for t in range(len(g))])
            gaps.append(abs(sp - sg))
        per_seq.append(sum(gaps) / len(gaps))
    return sum(per_seq) / len(per_seq)


def cos_dist(u, v):
    nu, nv = math.sqrt(sum(a * a for a in u)), math.sqrt(sum(b * b for b in v))
    return min(max(1 - sum(a * b for a, b in zip(u, v)) / (nu * nv), 0.0), 2.0)


def loop_silhouette(x, y):
    n = len(x)
    total = 0.0
    for i in range(n):
        own = [cos_dist(x[i], x[j]) for j in range(n) if j != i and y[j] == y[i]]
        if not own:
            continue
        a = sum(own) / len(own)
        b = min(sum(cos_dist(x[i], x[j]) for j in range(n) if y[j] == c) / sum(1 for j in range(n) if y[j] == c)
                for c in set(y) if c != y[i])
        total += (b - a) / max(a, b)
    return total / n


def fixture(seed):
    rng = np.random.default_rng(seed)
    n_seq, t, nv = rng.integers(1, 4), rng.integers(2, 7), rng.integers(3, 8)
    preds = [rng.normal(size=(t, nv, 3)) for _ in range(n_seq)]
    gts = [rng.normal(size=(t, nv, 3)) for _ in range(n_seq)]
    mask = rng.random(nv) < 0.5
    mask[rng.integers(nv)] = True
    tmpl = rng.normal(size=(nv, 3))
    return preds, gts, mask, tmpl


@pytest.mark.parametrize("seed", range(20))
def test_lve_matches_loop(seed):
    preds, gts, mask, _ = fixture(seed)
    assert abs(lip_vertex_error(preds, gts, mask) - loop_lve(preds, gts, mask)) < 1e-9


@pytest.mark.parametrize("seed", range(20))
def test_fdd_matches_loop(seed):
    preds, gts, mask, tmpl = fixture(100 + seed)
    assert abs(upper_face_dynamics_deviation(preds, gts, mask, tmpl) - loop_fdd(preds, gts, mask, tmpl)) < 1e-9


@pytest.mark.parametrize("seed", range(20))
def test_silhouette_matches_loop_and_sklearn(seed):
    rng = np.random.default_rng(200 + seed)
    k = int(rng.integers(2, 5))
    y = rng.integers(0, k, size=int(rng.integers(k + 2, 16)))
    y[:k] = np.arange(k)
    x = rng.normal(size=(len(y), 4)) + 2 * np.eye(4)[y % 4]
    got = style_silhouette(x, y)
    assert abs(got - loop_silhouette(x.tolist(), y.tolist())) < 1e-9
    assert abs(got - silhouette_score(x, y, metric="cosine")) < 1e-9


def test_lve_hand_value():
    gt = np.zeros((1, 2, 3))
    pred = np.zeros((1, 2, 3))
    pred[0, 0] = (3.0, 4.0, 0.0)
    pred[0, 1] = (1.0, 0.0, 0.0)
    assert lip_vertex_error(pred, gt, [True, True]) == 5.0
    assert lip_vertex_error(pred, gt, [False, True]) == 1.0


def test_lve_perfect_prediction():
    gt = np.random.default_rng(0).normal(size=(4, 5, 3))
    assert lip_vertex_error(gt, gt, [True] * 5) == 0.0


def test_fdd_static_prediction_equals_gt_spread():
    rng = np.random.default_rng(1)
    tmpl = rng.normal(size=(4, 3))
    gt = tmpl + rng.normal(size=(9, 4, 3))
    static = np.broadcast_to(tmpl, gt.shape)
    expect = np.mean([loop_std([dist(gt[t][v], tmpl[v]) for t in range(9)]) for v in range(4)])
    assert abs(upper_face_dynamics_deviation(static, gt, [True] * 4, tmpl) - expect) < 1e-12


@settings(max_examples=25)
@given(st.integers(0, 2 ** 16), st.floats(-50, 50), st.floats(-50, 50), st.floats(-50, 50))
def test_lve_translation_covariance(seed, dx, dy, dz):
    rng = np.random.default_rng(seed)
    pred, gt = rng.normal(size=(2, 3, 4, 3))
    shift = np.array([dx, dy, dz])
    mask = [True, False, True, True]
    assert abs(lip_vertex_error(pred + shift, gt + shift, mask) - lip_vertex_error(pred, gt, mask)) < 1e-9


def test_lve_vertex_permutation_invariance():
    rng = np.random.default_rng(2)
    pred, gt = rng.normal(size=(2, 5, 6, 3))
    mask = np.array([1, 0, 1, 1, 0, 1], bool)
    perm = rng.permutation(6)
    assert abs(lip_vertex_error(pred[:, perm], gt[:, perm], mask[perm]) - lip_vertex_error(pred, gt, mask)) < 1e-12


def test_silhouette_six_point_case():
    x = np.array([[1, 0], [1, 0.1], [1, -0.1], [0, 1], [0.1, 1], [-0.1, 1]], float)
    y = [0, 0, 0, 1, 1, 1]
    assert abs(style_silhouette(x, y) - loop_silhouette(x.tolist(), y)) < 1e-12
    assert style_silhouette(x, y) > 0.9


def test_silhouette_degenerate_cases():
    assert style_silhouette(np.ones((4, 3)), [0, 0, 1, 1]) == 0.0
    assert style_silhouette(np.random.default_rng(0).normal(size=(4, 3)), [0] * 4) == 0.0
    # singletons contribute 0
    x = np.array([[1, 0], [1, 0.1], [0, 1]], float)
    assert abs(style_silhouette(x, [0, 0, 1]) - silhouette_score(x, [0, 0, 1], metric="cosine")) < 1e-12


def test_metric_errors():
    with pytest.raises(ConfigError):
        lip_vertex_error(np.zeros((2, 3, 3)), np.zeros((2, 4, 3)), [True] * 3)
    with pytest.raises(ConfigError):
        lip_vertex_error(np.zeros((2, 3, 3)), np.zeros((2, 3, 3)), [False] * 3)
    with pytest.raises(ConfigError):
        upper_face_dynamics_deviation(np.zeros((2, 3, 3)), np.zeros((2, 3, 3)), [False] * 3, np.zeros((3, 3)))


def test_report_aggregation_and_json_round_trip():
    preds, gts, mask, tmpl = fixture(7)
    names = [f"seq{i}" for i in range(len(preds))]
    ids = list(range(len(preds)))
    report = build_report(preds, gts, [tmpl] * len(preds), mask, mask, names, ids)
    assert abs(report.lve - np.mean([r["lve"] for r in report.rows])) < 1e-12
    assert abs(report.lve - loop_lve(preds, gts, mask)) < 1e-9
    back = EvalReport(**json.loads(report.to_json()))
    assert back == report
    assert "mean" in report.to_table()
