"""Desk-scale image quality and hierarchy-consistency metrics.

The frozen hierarchical classifier stands in for the usual pretrained
feature network: its penultimate trunk activations feed a Frechet distance
between gaussian fits of real and generated features (desk-FID), and its
leaf-head probabilities feed an inception-style score (desk-IS). The
consistency rate is the fraction of generated images whose predicted path
matches the conditioning leaf's ancestor path at every level.

All computations here are pure functions of their inputs.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .autodiff import Tape, Tensor
from .embed import ClassEmbeddingTable
from .hierarchy import ClassHierarchy
from .models import HierClassifier, ModelSet, predict_paths
from .synthdata import Dataset


class MetricsError(ValueError):
    """Invalid metric input: degenerate stats, bad distributions, mismatch."""


@dataclass
class GaussianStats:
    mu: np.ndarray  # (F,)
    sigma: np.ndarray  # (F, F), symmetric

    def __post_init__(self):
        self.mu = np.asarray(self.mu, dtype=np.float64)
        self.sigma = np.asarray(self.sigma, dtype=np.float64)
        if self.mu.ndim != 1 or self.sigma.shape != (self.mu.size, self.mu.size):
            raise MetricsError(f"stats shapes disagree: mu {self.mu.shape}, sigma {self.sigma.shape}")
        if np.max(np.abs(self.sigma - self.sigma.T)) > 1e-12:
            raise MetricsError("covariance is not symmetric")
        if np.any(np.diag(self.sigma) < -1e-12):
            raise MetricsError("covariance has negative diagonal entries")


def feature_extract(clf: HierClassifier, images) -> np.ndarray:
    """Penultimate trunk activations, (n, F)."""
    x = np.asarray(images, dtype=np.float64)
    side = int(np.sqrt(clf.pixels))
    if x.shape == (side, side):
        x = x[None]
    if x.ndim != 3 or x.shape[1:] != (side, side):
        raise MetricsError(f"expected {side}x{side} images, got shape {x.shape}")
    tape = Tape()
    return clf.features(tape, Tensor(x.reshape(x.shape[0], -1))).data


def fit_gaussian(features) -> GaussianStats:
    """Sample mean and unbiased covariance, symmetrized."""
    x = np.asarray(features, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] < 2:
        raise MetricsError("fit_gaussian needs at least 2 feature rows")
    mu = x.mean(axis=0)
    centered = x - mu
    sigma = centered.T @ centered / (x.shape[0] - 1)
    return GaussianStats(mu=mu, sigma=(sigma + sigma.T) / 2.0)


def _psd_sqrt(sigma: np.ndarray, what: str) -> np.ndarray:
    vals, vecs = np.linalg.eigh(sigma)
    if np.min(vals) < -1e-8:
        raise MetricsError(f"{what} has eigenvalue {np.min(vals):.3e} below the -1e-8 tolerance")
    vals = np.clip(vals, 0.0, None)
    return (vecs * np.sqrt(vals)) @ vecs.T


def frechet_distance(a: GaussianStats, b: GaussianStats) -> float:
    """||mu_a - mu_b||^2 + Tr(Sa) + Tr(Sb) - 2 Tr((Sa^1/2 Sb Sa^1/2)^1/2),
    evaluated with eigendecomposition square roots; clamped to >= 0."""
    if a.mu.shape != b.mu.shape:
        raise MetricsError(f"stats dimensions differ: {a.mu.shape} vs {b.mu.shape}")
    root_a = _psd_sqrt(a.sigma, "first covariance")
    inner = root_a @ b.sigma @ root_a
    inner = (inner + inner.T) / 2.0
    vals = np.linalg.eigvalsh(inner)
    if np.min(vals) < -1e-8:
        raise MetricsError(f"cross term has eigenvalue {np.min(vals):.3e} below the -1e-8 tolerance")
    trace_sqrt = np.sum(np.sqrt(np.clip(vals, 0.0, None)))
    diff = a.mu - b.mu
    value = float(diff @ diff + np.trace(a.sigma) + np.trace(b.sigma) - 2.0 * trace_sqrt)
    return max(value, 0.0)


def inception_score(pred_probs) -> float:
    """exp(mean_x KL(p(y|x) || p(y))) with the marginal as the row mean."""
    p = np.asarray(pred_probs, dtype=np.float64)
    if p.ndim != 2 or p.shape[0] < 1:
        raise MetricsError("inception_score needs an (n, M) probability matrix")
    if np.any(p < 0.0) or np.max(np.abs(p.sum(axis=1) - 1.0)) > 1e-9:
        raise MetricsError("rows must be probability distributions summing to 1 within 1e-9")
    marginal = p.mean(axis=0)
    kl = np.zeros(p.shape[0])
    mask = p > 0.0
    # wherever p > 0 the marginal is >= p/n > 0, so the log is finite
    for i in range(p.shape[0]):
        row, m = p[i][mask[i]], marginal[mask[i]]
        kl[i] = np.sum(row * (np.log(row) - np.log(m)))
    return float(np.exp(kl.mean()))


def leaf_probabilities(clf: HierClassifier, images) -> np.ndarray:
    """Softmax of the leaf-level head, (n, M_K)."""
    x = np.asarray(images, dtype=np.float64)
    side = int(np.sqrt(clf.pixels))
    if x.shape == (side, side):
        x = x[None]
    tape = Tape()
    logits = clf.logits(tape, Tensor(x.reshape(x.shape[0], -1)))[-1].data
    shifted = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def consistency_rate(clf: HierClassifier, batch, h: ClassHierarchy) -> float:
    """Fraction of generated samples routed to the conditioning leaf's full
    ancestor path (every level must match). Empty batches count as 1.0."""
    images = np.asarray(batch.samples, dtype=np.float64)
    if images.shape[0] == 0:
        return 1.0
    want = np.asarray(h.ancestor_path(batch.leaf))
    got = predict_paths(clf, images)
    return float(np.all(got == want, axis=1).mean())


# ------------------------------------------------------------------ report


@dataclass
class LeafMetrics:
    desk_fid: float
    desk_is: float
    consistency_rate: float
    n_real: int
    n_generated: int


@dataclass
class MetricsReport:
    per_leaf: dict[str, LeafMetrics]  # keyed by leaf class name, id order
    avg_desk_fid: float
    avg_desk_is: float
    avg_consistency_rate: float
    feature_source: str

    def __post_init__(self):
        rows = list(self.per_leaf.values())
        if not rows:
            raise MetricsError("report needs at least one leaf row")
        for got, rows_attr in (
            (self.avg_desk_fid, [r.desk_fid for r in rows]),
            (self.avg_desk_is, [r.desk_is for r in rows]),
            (self.avg_consistency_rate, [r.consistency_rate for r in rows]),
        ):
            if abs(got - float(np.mean(rows_attr))) > 1e-12:
                raise MetricsError("report averages must equal the mean of per-leaf values")


def build_report(per_leaf: dict[str, LeafMetrics], feature_source: str) -> MetricsReport:
    rows = list(per_leaf.values())
    return MetricsReport(
        per_leaf=per_leaf,
        avg_desk_fid=float(np.mean([r.desk_fid for r in rows])),
        avg_desk_is=float(np.mean([r.desk_is for r in rows])),
        avg_consistency_rate=float(np.mean([r.consistency_rate for r in rows])),
        feature_source=feature_source,
    )


def report_csv(report: MetricsReport) -> str:
    lines = ["class,desk_fid,desk_is,consistency_rate"]
    for name, row in report.per_leaf.items():
        lines.append(f"{name},{row.desk_fid:.6f},{row.desk_is:.6f},{row.consistency_rate:.6f}")
    lines.append(
        f"Average,{report.avg_desk_fid:.6f},{report.avg_desk_is:.6f},{report.avg_consistency_rate:.6f}"
    )
    return "\n".join(lines) + "\n"


def report_json(report: MetricsReport) -> str:
    payload = {
        "per_leaf": {
            name: {
                "desk_fid": row.desk_fid,
                "desk_is": row.desk_is,
                "consistency_rate": row.consistency_rate,
                "n_real": row.n_real,
                "n_generated": row.n_generated,
            }
            for name, row in report.per_leaf.items()
        },
        "average": {
            "desk_fid": report.avg_desk_fid,
            "desk_is": report.avg_desk_is,
            "consistency_rate": report.avg_consistency_rate,
        },
        "feature_source": report.feature_source,
    }
    return json.dumps(payload, indent=2, sort_keys=True) + "\n"


def evaluate(
    models: ModelSet,
    embeddings: ClassEmbeddingTable,
    dataset: Dataset,
    h: ClassHierarchy,
    n_per_class: int = 500,
    seed: int = 0,
) -> MetricsReport:
    """Stage-2 metrics per leaf: desk-FID against real test features, desk-IS
    over generated leaf probabilities, and hierarchy consistency."""
    from .training import generate_set  # deferred: training builds on metrics

    clf = models.clf_hi
    real_by_leaf: dict[int, list[np.ndarray]] = {y: [] for y in h.leaves}
    for s in dataset.test:
        real_by_leaf[s.leaf].append(s.hi)
    per_leaf: dict[str, LeafMetrics] = {}
    for y in h.leaves:
        real = real_by_leaf[y]
        if len(real) < 2:
            raise MetricsError(f"leaf {h.name_of(y)!r} has {len(real)} test samples; need at least 2")
        batch = generate_set(models, embeddings, y, n_per_class, seed=[seed, y])
        real_stats = fit_gaussian(feature_extract(clf, np.stack(real)))
        gen_stats = fit_gaussian(feature_extract(clf, batch.samples))
        per_leaf[h.name_of(y)] = LeafMetrics(
            desk_fid=frechet_distance(real_stats, gen_stats),
            desk_is=inception_score(leaf_probabilities(clf, batch.samples)),
            consistency_rate=consistency_rate(clf, batch, h),
            n_real=len(real),
            n_generated=n_per_class,
        )
    side = int(np.sqrt(clf.pixels))
    return build_report(per_leaf, feature_source=f"classifier-{side}x{side}")
