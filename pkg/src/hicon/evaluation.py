"""CTR metrics, smoothness, sparsity strata and angle-density export."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np
from scipy.spatial.distance import pdist
from scipy.special import erf, expit
from scipy.stats import rankdata


class MetricError(ValueError):
    """A metric is undefined for the given input."""


class DegenerateExportError(MetricError):
    pass


def auc(scores_pos, scores_neg) -> float:
    """Mann-Whitney AUC: ``P(pos > neg) + P(pos == neg) / 2`` over all pairs."""
    pos = np.asarray(scores_pos, dtype=np.float64).ravel()
    neg = np.asarray(scores_neg, dtype=np.float64).ravel()
    if pos.size == 0 or neg.size == 0:
        raise MetricError("AUC needs at least one positive and one negative score")
    ranks = rankdata(np.concatenate([pos, neg]))
    u = ranks[:pos.size].sum() - pos.size * (pos.size + 1) / 2.0
    return float(u / (pos.size * neg.size))


def f1(scores, labels, threshold: float = 0.5) -> float:
    """F1 of ``sigmoid(score) >= threshold`` against binary labels; 0 if undefined."""
    scores = np.asarray(scores, dtype=np.float64).ravel()
    labels = np.asarray(labels).ravel()
    if scores.shape != labels.shape:
        raise MetricError(f"f1: {scores.size} scores vs {labels.size} labels")
    pred = expit(scores) >= threshold
    truth = labels == 1
    tp = int(np.sum(pred & truth))
    fp = int(np.sum(pred & ~truth))
    fn = int(np.sum(~pred & truth))
    if tp == 0:
        return 0.0
    precision, recall = tp / (tp + fp), tp / (tp + fn)
    return 2 * precision * recall / (precision + recall)


EXACT_SMV_ROWS = 2000


def smv(representations, pair_budget: int = 200_000, rng: np.random.Generator | None = None) -> float:
    """Mean Euclidean distance between L2-normalized rows.

    Exact below ``EXACT_SMV_ROWS`` rows, otherwise estimated from
    ``pair_budget`` uniformly drawn distinct pairs.
    """
    x = np.asarray(representations, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] < 2:
        raise MetricError("SMV needs at least 2 representations")
    norm = np.linalg.norm(x, axis=1, keepdims=True)
    x = x / np.where(norm > 0, norm, 1.0)
    n = x.shape[0]
    if n < EXACT_SMV_ROWS:
        return float(pdist(x).mean())
    rng = rng if rng is not None else np.random.default_rng(0)
    i = rng.integers(0, n, size=pair_budget)
    j = (i + rng.integers(1, n, size=pair_budget)) % n
    return float(np.linalg.norm(x[i] - x[j], axis=1).mean())


@dataclass
class EvalReport:
    auc: float
    f1: float
    smv: float | None = None
    n_pos: int = 0
    n_neg: int = 0
    epoch: int | None = None
    label: str = "all"
    strata: dict[str, "EvalReport"] = field(default_factory=dict)
    smv_users: float | None = None

    def rows(self) -> list[dict]:
        head = {k: v for k, v in asdict(self).items() if k != "strata"}
        return [head] + [r for s in self.strata.values() for r in s.rows()]

    def to_tsv(self) -> str:
        cols = ["label", "auc", "f1", "smv", "smv_users", "n_pos", "n_neg", "epoch"]
        lines = ["\t".join(cols)]
        for r in self.rows():
            lines.append("\t".join("" if r[c] is None else repr(r[c]) if isinstance(r[c], float) else str(r[c])
                                   for c in cols))
        return "\n".join(lines) + "\n"

    def to_jsonl(self) -> str:
        return "".join(json.dumps(r, sort_keys=True) + "\n" for r in self.rows())


def ctr_report(scores, labels, label: str = "all", epoch: int | None = None) -> EvalReport:
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    pos, neg = scores[labels == 1], scores[labels == 0]
    return EvalReport(auc(pos, neg), f1(scores, labels), None, int(pos.size), int(neg.size), epoch, label)


def activity_bands(train_counts: np.ndarray, users: np.ndarray,
                   band_edges: Sequence[float] = (0, 25, 50, 75, 100)) -> dict[str, np.ndarray]:
    """User ids per percentile band of training-interaction counts.

    Bands are half-open ``[lo, hi)`` in count space except the last, which is closed.
    """
    edges = list(band_edges)
    if len(edges) < 2 or any(b <= a for a, b in zip(edges, edges[1:])) or edges[0] < 0 or edges[-1] > 100:
        raise ValueError(f"band edges must increase within [0, 100], got {edges}")
    users = np.unique(users)
    counts = train_counts[users]
    cuts = np.percentile(counts, edges)
    out = {}
    for k, (lo, hi) in enumerate(zip(cuts[:-1], cuts[1:])):
        last = k == len(cuts) - 2
        member = (counts >= lo) & ((counts <= hi) if last else (counts < hi))
        out[f"{edges[k]:g}-{edges[k + 1]:g}%"] = users[member]
    return out


def stratified_eval(test: np.ndarray, scores, train_counts: np.ndarray,
                    band_edges: Sequence[float] = (0, 25, 50, 75, 100)) -> dict[str, EvalReport]:
    """AUC/F1 within each activity band; bands without both labels are absent."""
    test = np.asarray(test)
    scores = np.asarray(scores, dtype=np.float64)
    out = {}
    for name, members in activity_bands(train_counts, test[:, 0], band_edges).items():
        mask = np.isin(test[:, 0], members)
        labels = test[mask, 2]
        if not (labels == 1).any() or not (labels == 0).any():
            continue
        out[name] = ctr_report(scores[mask], labels, label=name)
    return out


def _pca2(x: np.ndarray, w: np.ndarray) -> np.ndarray:
    mu = w @ x
    xc = x - mu
    cov = (xc * w[:, None]).T @ xc
    vals, vecs = np.linalg.eigh(cov)
    order = np.argsort(vals)[::-1][:2]
    if vals[order[0]] <= 1e-12 * max(1.0, abs(vals).max()):
        raise DegenerateExportError("representations have no spread (all rows equal)")
    comps = vecs[:, order]
    flip = np.sign(comps[np.argmax(np.abs(comps), axis=0), [0, 1]])
    comps = comps * np.where(flip == 0, 1.0, flip)
    return xc @ comps


def angle_density_export(representations, bins: int = 64, wraps: int = 3) -> np.ndarray:
    """``(bins, 2)`` table of bin-centre angle and density of the 2-D PCA angles.

    Rows are deduplicated first (duplicates become weights), projected onto the
    top-2 principal axes, put on the unit circle and summarized by a wrapped
    Gaussian KDE with Scott bandwidth.  Each density value is the exact mean of
    the KDE over its bin, so ``sum(density) * 2*pi/bins == 1``.
    """
    x = np.asarray(representations, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] < 2:
        raise MetricError("angle density needs at least 2 representations")
    if bins < 16:
        raise ValueError("need at least 16 bins")
    uniq, counts = np.unique(x, axis=0, return_counts=True)
    if uniq.shape[0] < 2:
        raise DegenerateExportError("representations have no spread (all rows equal)")
    w = counts / counts.sum()
    if x.shape[1] == 1:
        raise DegenerateExportError("need at least 2 feature dimensions for a 2-D projection")
    proj = _pca2(uniq, w)
    r = np.linalg.norm(proj, axis=1)
    keep = r > 0
    theta = np.arctan2(proj[keep, 1], proj[keep, 0])
    w = w[keep] / w[keep].sum()
    n_eff = 1.0 / np.sum(w**2)
    sigma = np.sqrt(np.sum(w * (theta - w @ theta) ** 2))
    bw = max(sigma, 1e-3) * n_eff ** (-1.0 / 5.0)
    edges = np.linspace(-np.pi, np.pi, bins + 1)
    width = edges[1] - edges[0]
    mass = np.zeros(bins)
    for k in range(-wraps, wraps + 1):
        c = theta + 2 * np.pi * k
        z = (edges[:, None] - c[None, :]) / (bw * np.sqrt(2.0))
        cdf = 0.5 * (1.0 + erf(z))
        mass += (np.diff(cdf, axis=0) * w[None, :]).sum(axis=1)
    density = mass / width
    centres = 0.5 * (edges[:-1] + edges[1:])
    return np.stack([centres, density], axis=1)


def density_csv(table: np.ndarray) -> str:
    return "angle,density\n" + "".join(f"{a!r},{d!r}\n" for a, d in table.tolist())
