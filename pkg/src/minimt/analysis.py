"""Classical MDS projection of encoder features and the overlap analysis.

The projection is Torgerson MDS: double-center the squared-distance
matrix and embed along its top eigenpairs, extracted here by power
iteration with deflation so the whole computation is checkable against a
dense eigendecomposition on small inputs.  The overlap statistic
quantifies how mixed the two languages' token features are in 2D.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .corpus import Language
from .model import ModelParams, encode_features, pad_batch
from .tokenizer import EOS, Vocabulary, encode

MDS_TOL = 1e-9
MDS_MAX_ITER = 10_000

SRC_COLOR = "#1f77b4"  # blue
TGT_COLOR = "#d62728"  # red


@dataclass
class EmbeddingCloud:
    vectors: np.ndarray            # (n, d) token features
    langs: list[Language]          # length n
    projected: np.ndarray | None = None   # (n, 2)

    def __post_init__(self):
        self.vectors = np.asarray(self.vectors, dtype=np.float64)
        if self.vectors.ndim != 2:
            raise ValueError("vectors must be a (n, d) matrix")
        if len(self.langs) != self.vectors.shape[0]:
            raise ValueError("langs length must match vectors")
        if not np.isfinite(self.vectors).all():
            raise ValueError("non-finite feature vectors")

    def count(self, lang: Language) -> int:
        return sum(1 for g in self.langs if g is lang)


def _power_iteration(mat: np.ndarray, seed: int, prior: list[np.ndarray]):
    """Dominant eigenpair of a symmetric matrix, orthogonal to ``prior``."""
    n = mat.shape[0]
    rng = np.random.default_rng(seed)
    v = rng.normal(size=n)
    for p in prior:
        v -= (v @ p) * p
    norm = np.linalg.norm(v)
    if norm == 0.0:
        return 0.0, np.zeros(n)
    v /= norm
    lam = 0.0
    for _ in range(MDS_MAX_ITER):
        w = mat @ v
        for p in prior:
            w -= (w @ p) * p
        norm = np.linalg.norm(w)
        if norm < MDS_TOL:
            return 0.0, v
        w /= norm
        mw = mat @ w
        for p in prior:
            mw -= (mw @ p) * p
        lam = float(w @ mw)
        if np.linalg.norm(mw - lam * w) <= MDS_TOL * max(1.0, abs(lam)):
            return lam, w
        v = w
    return lam, v


def classical_mds(points, out_dim: int = 2) -> np.ndarray:
    """Project ``points`` to ``out_dim`` coordinates preserving distances.

    Eigenpairs of the double-centered squared-distance matrix are taken in
    order of eigenvalue magnitude; a negative eigenvalue among them cannot
    carry a real coordinate, so that output dimension is zeroed with a
    warning.
    """
    x = np.asarray(points, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] < 3:
        raise ValueError("classical_mds needs at least 3 points")
    if not np.isfinite(x).all():
        raise ValueError("non-finite input points")
    n = x.shape[0]
    sq = (x * x).sum(axis=1)
    d2 = sq[:, None] + sq[None, :] - 2.0 * (x @ x.T)
    np.maximum(d2, 0.0, out=d2)
    centered = d2 - d2.mean(axis=0) - d2.mean(axis=1)[:, None] + d2.mean()
    b = -0.5 * centered

    coords = np.zeros((n, out_dim))
    prior: list[np.ndarray] = []
    for k in range(out_dim):
        lam, vec = _power_iteration(b, seed=k, prior=prior)
        prior.append(vec)
        if lam < 0.0:
            warnings.warn(
                f"MDS eigenvalue {k} is negative ({lam:.3e}); dropping that dimension"
            )
        elif lam > 0.0:
            coords[:, k] = vec * np.sqrt(lam)
        b = b - lam * np.outer(vec, vec)
    return coords


def project_cloud(cloud: EmbeddingCloud) -> EmbeddingCloud:
    cloud.projected = classical_mds(cloud.vectors, out_dim=2)
    return cloud


def feature_overlap_report(cloud: EmbeddingCloud) -> float:
    """Nearest-neighbor language mixing statistic in [0, 1].

    Twice the fraction of points whose nearest projected neighbor belongs
    to the other language, clamped: about 1 for fully mixed clouds, about
    0 for fully separated ones.
    """
    for lang in (Language.SRC, Language.TGT):
        if cloud.count(lang) < 10:
            raise ValueError(f"need at least 10 points per language, "
                             f"got {cloud.count(lang)} for {lang.value}")
    pts = cloud.projected if cloud.projected is not None else classical_mds(cloud.vectors)
    sq = (pts * pts).sum(axis=1)
    d2 = sq[:, None] + sq[None, :] - 2.0 * (pts @ pts.T)
    np.fill_diagonal(d2, np.inf)
    nn = np.argmin(d2, axis=1)
    langs = np.array([g is Language.TGT for g in cloud.langs])
    cross = float(np.mean(langs != langs[nn]))
    return min(1.0, max(0.0, 2.0 * cross))


def collect_feature_cloud(params: ModelParams, vocab: Vocabulary,
                          src_lines: list[str], tgt_lines: list[str],
                          max_per_lang: int = 1000, seed: int = 0) -> EmbeddingCloud:
    """Token-level encoder features for a sample of lines from each language."""
    vectors = []
    langs: list[Language] = []
    rng = np.random.default_rng(seed)
    for lang, lines in ((Language.SRC, src_lines), (Language.TGT, tgt_lines)):
        rows = []
        for start in range(0, len(lines), 64):
            chunk = lines[start:start + 64]
            ids = [encode(line, lang, vocab).ids + [EOS] for line in chunk]
            feats = encode_features(params, pad_batch(ids))
            rows.append(feats.stacked())
        all_rows = np.concatenate(rows, axis=0)
        if all_rows.shape[0] > max_per_lang:
            keep = rng.choice(all_rows.shape[0], size=max_per_lang, replace=False)
            all_rows = all_rows[np.sort(keep)]
        vectors.append(all_rows)
        langs.extend([lang] * all_rows.shape[0])
    return EmbeddingCloud(vectors=np.concatenate(vectors, axis=0), langs=langs)


# ---------------------------------------------------------------------------
# Scatter plot (SVG)
# ---------------------------------------------------------------------------

_SVG_W, _SVG_H = 640, 480
_MARGIN = 48


def _scale(vals: np.ndarray, lo_px: float, hi_px: float) -> np.ndarray:
    vmin, vmax = float(vals.min()), float(vals.max())
    span = vmax - vmin
    if span == 0.0:
        return np.full(vals.shape, (lo_px + hi_px) / 2.0)
    return lo_px + (vals - vmin) / span * (hi_px - lo_px)


def emit_scatter(cloud: EmbeddingCloud, path) -> None:
    """Write the projected cloud as a deterministic SVG scatter plot."""
    if cloud.projected is None:
        raise ValueError("cloud has no projection; call project_cloud first")
    pts = cloud.projected
    xs = _scale(pts[:, 0], _MARGIN, _SVG_W - _MARGIN)
    ys = _scale(pts[:, 1], _SVG_H - _MARGIN, _MARGIN)  # svg y grows downward

    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{_SVG_W}" height="{_SVG_H}" '
        f'viewBox="0 0 {_SVG_W} {_SVG_H}">',
        f'<rect x="0" y="0" width="{_SVG_W}" height="{_SVG_H}" fill="white"/>',
        f'<rect x="{_MARGIN}" y="{_MARGIN}" width="{_SVG_W - 2 * _MARGIN}" '
        f'height="{_SVG_H - 2 * _MARGIN}" fill="none" stroke="#888888" stroke-width="1"/>',
    ]
    for label, value, x, y, anchor in (
        ("%.3g" % pts[:, 0].min(), None, _MARGIN, _SVG_H - _MARGIN + 16, "middle"),
        ("%.3g" % pts[:, 0].max(), None, _SVG_W - _MARGIN, _SVG_H - _MARGIN + 16, "middle"),
        ("%.3g" % pts[:, 1].min(), None, _MARGIN - 6, _SVG_H - _MARGIN, "end"),
        ("%.3g" % pts[:, 1].max(), None, _MARGIN - 6, _MARGIN + 4, "end"),
    ):
        parts.append(
            f'<text x="{x}" y="{y}" font-size="11" text-anchor="{anchor}" '
            f'fill="#444444">{label}</text>'
        )
    for (px, py), lang in zip(zip(xs, ys), cloud.langs):
        color = TGT_COLOR if lang is Language.TGT else SRC_COLOR
        parts.append(
            f'<circle cx="{px:.3f}" cy="{py:.3f}" r="3" fill="{color}" '
            f'fill-opacity="0.6" data-lang="{lang.value}"/>'
        )
    legend_x = _SVG_W - _MARGIN - 90
    parts.append(f'<circle cx="{legend_x}" cy="{_MARGIN - 20}" r="4" fill="{SRC_COLOR}"/>')
    parts.append(f'<text x="{legend_x + 10}" y="{_MARGIN - 16}" font-size="12">source</text>')
    parts.append(f'<circle cx="{legend_x}" cy="{_MARGIN - 36}" r="4" fill="{TGT_COLOR}"/>')
    parts.append(f'<text x="{legend_x + 10}" y="{_MARGIN - 32}" font-size="12">target</text>')
    parts.append("</svg>")
    Path(path).write_text("\n".join(parts) + "\n", encoding="utf-8", newline="\n")
