"""Evaluation measures in millimetres plus a style-cluster separation score."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import ConfigError


def _as_sequences(x) -> list[np.ndarray]:
    if isinstance(x, np.ndarray) and x.ndim == 3:
        return [x.astype(np.float64)]
    return [np.asarray(s, dtype=np.float64) for s in x]


def _pairs(pred, gt):
    p, g = _as_sequences(pred), _as_sequences(gt)
    if len(p) != len(g) or any(a.shape != b.shape for a, b in zip(p, g)):
        raise ConfigError("prediction and ground truth sequences must match in number and shape")
    return p, g


def lve_per_sequence(pred, gt, lip_mask) -> np.ndarray:
    lip = np.asarray(lip_mask, dtype=bool)
    if not lip.any():
        raise ConfigError("lip mask is empty")
    out = []
    for p, g in zip(*_pairs(pred, gt)):
        err = np.linalg.norm(p[:, lip] - g[:, lip], axis=-1)  # (T, n_lip)
        out.append(err.max(axis=1).mean())
    return np.array(out)


def lip_vertex_error(pred, gt, lip_mask) -> float:
    """Per frame the worst lip-vertex distance, averaged over frames, then over sequences."""
    per = lve_per_sequence(pred, gt, lip_mask)
    return float(per.mean()) if per.size else 0.0


def fdd_per_sequence(pred, gt, upper_face_mask, template) -> np.ndarray:
    upper = np.asarray(upper_face_mask, dtype=bool)
    if not upper.any():
        raise ConfigError("upper-face mask is empty")
    p_list, g_list = _pairs(pred, gt)
    templates = np.asarray(template, dtype=np.float64)
    if templates.ndim == 2:
        templates = np.broadcast_to(templates, (len(p_list), *templates.shape))
    out = []
    for p, g, tmpl in zip(p_list, g_list, templates):
        std_p = np.linalg.norm(p[:, upper] - tmpl[upper], axis=-1).std(axis=0)
        std_g = np.linalg.norm(g[:, upper] - tmpl[upper], axis=-1).std(axis=0)
        out.append(np.abs(std_p - std_g).mean())
    return np.array(out)


def upper_face_dynamics_deviation(pred, gt, upper_face_mask, template) -> float:
    """Mean over upper-face vertices of the gap between predicted and true temporal
    standard deviation of displacement-from-template norms."""
    per = fdd_per_sequence(pred, gt, upper_face_mask, template)
    return float(per.mean()) if per.size else 0.0


def cosine_distances(x: np.ndarray, eps: float = 1e-12) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    norm = np.linalg.norm(x, axis=1, keepdims=True)
    unit = x / np.maximum(norm, eps)
    return np.clip(1.0 - unit @ unit.T, 0.0, 2.0)


def style_silhouette(style_codes, labels) -> float:
    """Mean silhouette coefficient under cosine distance.

    Singleton clusters score 0, as does a set with fewer than two labels or no
    spread at all.
    """
    x = np.asarray(style_codes, dtype=np.float64)
    y = np.asarray(labels)
    classes = np.unique(y)
    if len(classes) < 2 or len(x) < 2:
        return 0.0
    d = cosine_distances(x)
    same = y[:, None] == y[None, :]
    scores = np.zeros(len(x))
    for i in range(len(x)):
        own = same[i].copy()
        own[i] = False
        if not own.any():
            continue
        a = d[i, own].mean()
        b = min(d[i, y == c].mean() for c in classes if c != y[i])
        denom = max(a, b)
        scores[i] = 0.0 if denom == 0 else (b - a) / denom
    return float(scores.mean())


@dataclass
class EvalReport:
    lve: float
    fdd: float
    style_silhouette: float
    rows: list[dict] = field(default_factory=list)

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1)

    def to_table(self) -> str:
        lines = [f"{'sequence':<24}{'identity':>9}{'LVE (mm)':>12}{'FDD (mm)':>12}"]
        for r in self.rows:
            lines.append(f"{r['sequence']:<24}{r['identity']:>9d}{r['lve']:>12.5f}{r['fdd']:>12.5f}")
        lines.append("-" * 57)
        lines.append(f"{'mean':<33}{self.lve:>12.5f}{self.fdd:>12.5f}")
        lines.append(f"style silhouette: {self.style_silhouette:.4f}")
        return "\n".join(lines)


def build_report(preds, gts, templates, lip_mask, upper_face_mask, names, identities,
                 style_codes=None) -> EvalReport:
    lve = lve_per_sequence(preds, gts, lip_mask)
    fdd = fdd_per_sequence(preds, gts, upper_face_mask, templates)
    rows = [{"sequence": str(n), "identity": int(k), "lve": float(a), "fdd": float(b)}
            for n, k, a, b in zip(names, identities, lve, fdd)]
    sil = style_silhouette(style_codes, identities) if style_codes is not None else 0.0
    return EvalReport(float(lve.mean()) if lve.size else 0.0,
                      float(fdd.mean()) if fdd.size else 0.0, sil, rows)
