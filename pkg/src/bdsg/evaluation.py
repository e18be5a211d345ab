"""Boundary-quality and detection metrics.

All density thresholds here are fractions of the relevant model's peak
density, so a fraction of 0.01 means "1% of the maximum density".
"""

import csv
import json
import math
from dataclasses import dataclass, asdict, field

import numpy as np

from . import _kernels
from .errors import ConfigurationError, UndefinedMetricError

# slack for closed-band membership, in log-density units
BAND_TOL = 1e-9


@dataclass
class GridSpec:
    lower: tuple
    upper: tuple
    resolution: tuple
    max_cells: int = 10 ** 6

    def __post_init__(self):
        self.lower = tuple(float(v) for v in self.lower)
        self.upper = tuple(float(v) for v in self.upper)
        res = self.resolution
        if np.isscalar(res):
            res = (int(res),) * len(self.lower)
        self.resolution = tuple(int(r) for r in res)
        if not (len(self.lower) == len(self.upper) == len(self.resolution)):
            raise ConfigurationError("grid corners and resolution must share a dimension")
        if any(u <= l for l, u in zip(self.lower, self.upper)):
            raise ConfigurationError("grid upper corner must exceed the lower corner on every axis")
        if any(r < 2 for r in self.resolution):
            raise ConfigurationError("grid resolution must be at least 2 per axis")
        if self.size > self.max_cells:
            raise ConfigurationError(f"grid of {self.size} cells exceeds the cap of {self.max_cells}")

    @property
    def dim(self):
        return len(self.lower)

    @property
    def size(self):
        return int(np.prod(self.resolution))

    @property
    def step(self):
        return np.array([(u - l) / (r - 1) for l, u, r in zip(self.lower, self.upper, self.resolution)])

    def axes(self):
        return [np.linspace(l, u, r) for l, u, r in zip(self.lower, self.upper, self.resolution)]

    def points(self):
        mesh = np.meshgrid(*self.axes(), indexing="ij")
        return np.stack([m.ravel() for m in mesh], axis=1)

    def cell_index(self, x):
        """Flat index of the nearest grid node, or -1 outside the grid."""
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        idx = np.rint((x - np.array(self.lower)) / self.step).astype(np.int64)
        res = np.array(self.resolution)
        inside = np.all((idx >= 0) & (idx < res), axis=1)
        flat = np.ravel_multi_index(tuple(np.clip(idx, 0, res - 1).T), self.resolution)
        return np.where(inside, flat, -1)

    def to_dict(self):
        return {"lower": list(self.lower), "upper": list(self.upper),
                "resolution": list(self.resolution)}


def peak_log_density(model, *reference_sets):
    """Largest log density over the model's own modes (if it knows them) and any
    reference point sets (grid nodes, training data)."""
    best = -np.inf
    if hasattr(model, "peak_log_density"):
        best = model.peak_log_density()
    for ref in reference_sets:
        if ref is not None and len(ref):
            best = max(best, float(np.max(model.log_density(np.asarray(ref, dtype=np.float64)))))
    if not np.isfinite(best):
        raise ConfigurationError("cannot estimate a peak density without reference points")
    return float(best)


def in_band(log_density, peak_log, gamma_frac, epsilon_frac):
    lo = peak_log + np.log(gamma_frac)
    hi = peak_log + np.log(epsilon_frac)
    return (log_density >= lo - BAND_TOL) & (log_density <= hi + BAND_TOL)


@dataclass
class GridMetrics:
    tp: int
    fp: int
    fn: int
    tn: int
    precision: float
    recall: float
    f1: float
    accuracy: float
    epsilon: float
    degenerate: bool = False

    def to_dict(self):
        return asdict(self)


def confusion_metrics(truth_pos, pred_pos, epsilon=float("nan")):
    """Binary metrics with the positive ("normal") class given by boolean masks."""
    truth_pos = np.asarray(truth_pos, dtype=bool)
    pred_pos = np.asarray(pred_pos, dtype=bool)
    tp = int(np.sum(truth_pos & pred_pos))
    fp = int(np.sum(~truth_pos & pred_pos))
    fn = int(np.sum(truth_pos & ~pred_pos))
    tn = int(np.sum(~truth_pos & ~pred_pos))
    degenerate = False
    if tp + fp:
        precision = tp / (tp + fp)
    else:
        degenerate, precision = True, 1.0 if fn == 0 else 0.0
    if tp + fn:
        recall = tp / (tp + fn)
    else:
        degenerate, recall = True, 1.0 if fp == 0 else 0.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
    accuracy = (tp + tn) / (tp + fp + fn + tn)
    return GridMetrics(tp, fp, fn, tn, precision, recall, f1, accuracy, epsilon, degenerate)


def grid_metrics(truth, model, grid, epsilon_frac, reference=None, truth_log=None, model_log=None):
    """Compare the ``epsilon_frac``-of-peak support regions of two densities on a grid.

    ``reference`` (e.g. training data) joins the grid when estimating the
    model's peak. Precomputed grid log densities may be passed to avoid
    re-evaluating them across thresholds.
    """
    if grid.size == 0:
        raise ConfigurationError("empty grid")
    if not 0 < epsilon_frac <= 1:
        raise ConfigurationError(f"epsilon fraction must lie in (0, 1], got {epsilon_frac}")
    pts = grid.points() if truth_log is None or model_log is None else None
    if truth_log is None:
        truth_log = truth.log_density(pts)
    if model_log is None:
        model_log = model.log_density(pts)
    truth_peak = max(float(truth_log.max()), peak_log_density(truth, reference) if
                     hasattr(truth, "peak_log_density") else -np.inf)
    model_peak = max(float(model_log.max()),
                     peak_log_density(model, reference) if (reference is not None or
                                                            hasattr(model, "peak_log_density")) else -np.inf)
    log_eps = np.log(epsilon_frac)
    return confusion_metrics(truth_log >= truth_peak + log_eps,
                             model_log >= model_peak + log_eps, epsilon_frac)


def _check_samples(samples):
    samples = np.atleast_2d(np.asarray(samples, dtype=np.float64))
    if samples.shape[0] == 0 or samples.size == 0:
        raise ConfigurationError("no samples to score")
    return samples


def _check_band(gamma_frac, epsilon_frac):
    if not 0 < gamma_frac < epsilon_frac:
        raise ConfigurationError(f"need 0 < gamma < epsilon, got {gamma_frac}, {epsilon_frac}")


def bp1(samples, truth, gamma_frac=0.001, epsilon_frac=0.01, truth_peak=None):
    """Fraction of samples whose true density lies in ``[gamma, epsilon]`` x peak."""
    samples = _check_samples(samples)
    _check_band(gamma_frac, epsilon_frac)
    peak = peak_log_density(truth) if truth_peak is None else truth_peak
    return float(np.mean(in_band(truth.log_density(samples), peak, gamma_frac, epsilon_frac)))


def bp2(samples, flow, truth, grid, gamma_frac=0.001, epsilon_frac=0.01,
        flow_peak=None, truth_peak=None, reference=None):
    """Fraction of samples falling in grid cells where both the flow's and the
    true density sit inside their own ``[gamma, epsilon]`` bands."""
    samples = _check_samples(samples)
    _check_band(gamma_frac, epsilon_frac)
    pts = grid.points()
    truth_log = truth.log_density(pts)
    flow_log = flow.log_density(pts)
    if truth_peak is None:
        truth_peak = max(float(truth_log.max()), peak_log_density(truth)
                         if hasattr(truth, "peak_log_density") else -np.inf)
    if flow_peak is None:
        flow_peak = peak_log_density(flow, pts if reference is None else reference) \
            if reference is not None else float(flow_log.max())
        flow_peak = max(flow_peak, float(flow_log.max()))
    both = (in_band(truth_log, truth_peak, gamma_frac, epsilon_frac)
            & in_band(flow_log, flow_peak, gamma_frac, epsilon_frac))
    cells = grid.cell_index(samples)
    hit = np.where(cells >= 0, both[np.clip(cells, 0, None)], False)
    return float(np.mean(hit))


def _binary_labels(scores, labels):
    scores = np.asarray(scores, dtype=np.float64).ravel()
    labels = np.asarray(labels).ravel()
    if scores.shape != labels.shape:
        raise ConfigurationError("scores and labels must have the same length")
    if not np.all((labels == 0) | (labels == 1)):
        raise ConfigurationError("labels must be 0 or 1")
    return scores, labels.astype(bool)


def auroc(scores, labels):
    """Probability that a random positive outscores a random negative (ties count 1/2)."""
    scores, labels = _binary_labels(scores, labels)
    pos, neg = scores[labels], np.sort(scores[~labels])
    if pos.size == 0 or neg.size == 0:
        raise UndefinedMetricError("AUROC needs both classes present")
    below = np.searchsorted(neg, pos, side="left")
    upto = np.searchsorted(neg, pos, side="right")
    twice_u = int(np.sum(2 * below + (upto - below)))
    return twice_u / (2 * pos.size * neg.size)


def auprc(scores, labels):
    """Average precision: sum over descending score thresholds of precision x recall gain.

    Tied scores form a single threshold.
    """
    scores, labels = _binary_labels(scores, labels)
    n_pos = int(labels.sum())
    if n_pos == 0:
        raise UndefinedMetricError("AUPRC needs at least one positive")
    order = np.argsort(-scores, kind="stable")
    s, y = scores[order], labels[order]
    last = np.r_[s[1:] != s[:-1], True]          # end of each tie group
    tp = np.cumsum(y)[last]
    fp = np.cumsum(~y)[last]
    gain = np.diff(np.r_[0, tp])
    terms = (tp / (tp + fp)) * (gain / n_pos)
    return math.fsum(terms[gain > 0].tolist())


def dispersion(samples):
    """Mean pairwise Euclidean distance."""
    samples = np.atleast_2d(np.asarray(samples, dtype=np.float64))
    if samples.shape[0] < 2:
        raise ConfigurationError("dispersion needs at least two samples")
    return _kernels.mean_pairwise(samples)


@dataclass
class EvalReport:
    precision: float = None
    recall: float = None
    f1: float = None
    accuracy: float = None
    bp1: float = None
    bp2: float = None
    auroc: float = None
    auprc: float = None
    dispersion: float = None
    epsilon: float = None
    gamma: float = None
    counts: dict = None
    grid_sweep: list = field(default_factory=list)
    cluster_fractions: list = None
    separation_pass_rate: float = None
    losses: dict = None
    backend: str = None

    def to_dict(self):
        return asdict(self)

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


def write_grid_csv(path, points, truth_density, model_density):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["x", "y", "truth_density", "model_density"])
        for p, t, m in zip(points, truth_density, model_density):
            w.writerow([repr(float(p[0])), repr(float(p[1])), repr(float(t)), repr(float(m))])
