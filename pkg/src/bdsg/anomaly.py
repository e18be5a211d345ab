"""Inference-time services built on a frozen density and boundary generator."""

from dataclasses import dataclass

import numpy as np

from . import _kernels
from .boundary import LossBreakdown, bdsg_loss
from .errors import ConfigurationError, InversionError

INVERSION_FLAG = "inversion_failed"


@dataclass
class AnomalyVerdict:
    point: np.ndarray
    log_density: float
    threshold_epsilon: float
    is_anomalous: bool
    flag: str = None

    def to_record(self):
        return {
            "point": [float(v) for v in self.point],
            "log_density": None if not np.isfinite(self.log_density) else float(self.log_density),
            "epsilon": float(self.threshold_epsilon),
            "verdict": "anomalous" if self.is_anomalous else "normal",
            "flag": self.flag,
        }


def _safe_log_density(density, x):
    """Batch log densities; points whose flow inverse diverges get ``-inf`` and a flag."""
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    try:
        return np.asarray(density.log_density(x), dtype=np.float64), np.zeros(len(x), dtype=bool)
    except InversionError:
        out = np.empty(len(x))
        failed = np.zeros(len(x), dtype=bool)
        for i, row in enumerate(x):
            try:
                out[i] = np.asarray(density.log_density(row[None, :]))[0]
            except InversionError:
                out[i] = -np.inf
                failed[i] = True
        return out, failed


def classify_batch(density, points, epsilon):
    """Verdict per row: anomalous when ``p(x) < epsilon`` (probability units)."""
    if not epsilon > 0:
        raise ConfigurationError(f"epsilon must be positive, got {epsilon}")
    points = np.atleast_2d(np.asarray(points, dtype=np.float64))
    logp, failed = _safe_log_density(density, points)
    log_eps = np.log(epsilon)
    return [AnomalyVerdict(p, float(lp), float(epsilon), bool(f or lp < log_eps),
                           INVERSION_FLAG if f else None)
            for p, lp, f in zip(points, logp, failed)]


def classify(density, x, epsilon):
    return classify_batch(density, np.asarray(x, dtype=np.float64)[None, :], epsilon)[0]


@dataclass
class StrongAnomalies:
    samples: np.ndarray
    generated: np.ndarray
    log_density: np.ndarray
    Q: int
    retained: int


def generate_strong_anomalies(B, density, Q, N_ref, epsilon, seed):
    """Draw ``Q`` boundary samples and keep those with ``p < epsilon``.

    ``N_ref`` is the training batch size the sample count is compared against.
    """
    if not Q >= N_ref >= 1:
        raise ConfigurationError(f"need Q >= N_ref >= 1, got Q={Q}, N_ref={N_ref}")
    z = np.random.default_rng(seed).standard_normal((Q, B.latent_dim))
    x = np.asarray(B(z))
    logp, _ = _safe_log_density(density, x)
    # strict inequality; epsilon <= 0 keeps nothing
    keep = logp < np.log(epsilon) if epsilon > 0 else np.zeros(Q, dtype=bool)
    return StrongAnomalies(x[keep], x, logp, Q, int(keep.sum()))


@dataclass
class ModeSet:
    clusters: list

    def __post_init__(self):
        if len(self.clusters) < 1:
            raise ConfigurationError("a mode set needs at least one cluster")
        self.clusters = [np.atleast_2d(np.asarray(c, dtype=np.float64)) for c in self.clusters]
        if any(c.shape[0] == 0 for c in self.clusters):
            raise ConfigurationError("every cluster must hold at least one reference point")

    @classmethod
    def from_labels(cls, points, labels):
        labels = np.asarray(labels)
        return cls([points[labels == k] for k in np.unique(labels)])

    @property
    def K(self):
        return len(self.clusters)


def cluster_distances(points, modes):
    """``(n, K)`` matrix of point-to-cluster set distances."""
    points = np.atleast_2d(np.asarray(points, dtype=np.float64))
    return np.stack([_kernels.nearest(points, c)[0] for c in modes.clusters], axis=1)


def assign_clusters(points, modes):
    """Batch boundary clustering; returns ``(cluster_index, distance)`` arrays (0-based)."""
    d = cluster_distances(points, modes)
    idx = np.argmin(d, axis=1)
    return idx, d[np.arange(len(idx)), idx]


def assign_boundary_cluster(point, modes):
    idx, dist = assign_clusters(np.asarray(point, dtype=np.float64)[None, :], modes)
    return int(idx[0]), float(dist[0])


def min_set_distance(a, b):
    return float(_kernels.nearest(a, b)[0].min())


def separation_check(points, modes):
    """Per point: is its own-cluster distance below the closest cross-cluster set distance?"""
    k = modes.K
    if k < 2:
        raise ConfigurationError("separation needs at least two clusters")
    gap = min(min_set_distance(modes.clusters[i], modes.clusters[j])
              for i in range(k) for j in range(i + 1, k))
    _, own = assign_clusters(points, modes)
    return own < gap, own, gap


def ood_score(B, density, data, hp, seed=0):
    """Compound loss with a candidate set in the distance term.

    Low total and low ``l1`` mean the candidate set looks like the training
    distribution; the breakdown is returned for external thresholding.
    """
    data = np.atleast_2d(np.asarray(data, dtype=np.float64))
    if data.shape[0] == 0:
        raise ConfigurationError("candidate data set is empty")
    if hp.N < 2:
        raise ConfigurationError("latent batch must hold at least two samples")
    z = np.random.default_rng(seed).standard_normal((hp.N, B.latent_dim))
    return bdsg_loss(density, B, z, data, hp)


def epsilon_from_fraction(peak_log_density, fraction):
    """Absolute probability threshold from a fraction of the peak density."""
    if not fraction > 0:
        raise ConfigurationError("epsilon fraction must be positive")
    return float(np.exp(peak_log_density) * fraction)
