import math
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from bdsg.density import GaussianMixture, standard_normal
from bdsg.errors import ConfigurationError, UndefinedMetricError
from bdsg.evaluation import (EvalReport, GridSpec, auprc, auroc, bp1, bp2, confusion_metrics,
                             dispersion, grid_metrics, in_band, write_grid_csv)


def brute_auroc(scores, labels):
    pos = [s for s, y in zip(scores, labels) if y == 1]
    neg = [s for s, y in zip(scores, labels) if y == 0]
    wins = sum(Fraction(1) if p > n else Fraction(1, 2) if p == n else Fraction(0) for p in pos for n in neg)
    return wins / (len(pos) * len(neg))


def brute_auprc(scores, labels):
    """Average precision by sweeping each distinct threshold from the top."""
    n_pos = sum(labels)
    ap, prev_tp = Fraction(0), 0
    for t in sorted(set(scores), reverse=True):
        sel = [y for s, y in zip(scores, labels) if s >= t]
        tp = sum(sel)
        if tp > prev_tp:
            ap += Fraction(tp, len(sel)) * Fraction(tp - prev_tp, n_pos)
        prev_tp = tp
    return ap


class Const:
    """Flat density for hand-built confusion tables."""

    def __init__(self, value):
        self.value = value

    def log_density(self, x):
        return np.full(np.atleast_2d(x).shape[0], math.log(self.value))


# --- AUROC / AUPRC -----------------------------------------------------------------------

def test_auroc_examples():
    assert auroc([0.9, 0.8, 0.3, 0.1], [1, 1, 0, 0]) == 1.0
    assert auroc([0.5, 0.9, 0.1], [1, 0, 0]) == 0.5


def test_auprc_examples():
    assert auprc([0.9, 0.8, 0.7], [1, 0, 1]) == pytest.approx(5 / 6, abs=1e-15)
    assert auprc([0.9, 0.8, 0.1], [1, 1, 0]) == 1.0
    assert auprc([0.3] * 7, [1, 0, 1, 0, 0, 1, 0]) == pytest.approx(3 / 7, abs=1e-15)


def test_undefined_metrics():
    with pytest.raises(UndefinedMetricError):
        auroc([0.1, 0.2], [1, 1])
    with pytest.raises(UndefinedMetricError):
        auprc([0.1, 0.2], [0, 0])
    with pytest.raises(ConfigurationError):
        auroc([0.1, 0.2], [1, 2])


def test_ranking_metrics_match_brute_force_on_500_instances():
    rng = np.random.default_rng(2024)
    for _ in range(500):
        n = int(rng.integers(2, 30))
        labels = rng.integers(0, 2, n)
        labels[0], labels[1] = 0, 1
        scores = rng.integers(0, 6, n).astype(float) / 5    # coarse grid forces ties
        assert auroc(scores, labels) == float(brute_auroc(scores.tolist(), labels.tolist()))
        assert auprc(scores, labels) == pytest.approx(float(brute_auprc(scores.tolist(), labels.tolist())),
                                                      abs=1e-15)


@settings(max_examples=100, deadline=None)
@given(st.lists(st.tuples(st.floats(-1e3, 1e3, allow_nan=False), st.integers(0, 1)), min_size=2, max_size=40))
def test_auroc_symmetry(rows):
    scores = [s for s, _ in rows]
    labels = [y for _, y in rows]
    if len(set(labels)) < 2:
        return
    flipped = [1 - y for y in labels]
    assert auroc(scores, labels) + auroc(scores, flipped) == pytest.approx(1.0, abs=1e-12)
    assert 0.0 <= auprc(scores, labels) <= 1.0


# --- dispersion ------------------------------------------------------------------------

def test_dispersion_examples():
    assert dispersion(np.ones((5, 2))) == 0.0
    assert dispersion(np.array([[0.0, 0.0], [2.0, 0.0]])) == 2.0
    sq = np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0], [1.0, 1.0]])
    assert dispersion(sq) == pytest.approx((4 + 2 * math.sqrt(2)) / 6, abs=1e-12)
    with pytest.raises(ConfigurationError):
        dispersion(np.zeros((1, 2)))


# --- grid ----------------------------------------------------------------------------

def test_grid_validation():
    with pytest.raises(ConfigurationError):
        GridSpec([0, 0], [0, 1], [10, 10])
    with pytest.raises(ConfigurationError):
        GridSpec([0, 0], [1, 1], [1, 10])
    with pytest.raises(ConfigurationError):
        GridSpec([0, 0], [1, 1], [2000, 2000])


def test_grid_cell_index():
    g = GridSpec([0, 0], [4, 4], [5, 5])
    assert g.cell_index(np.array([[1.2, 2.9], [9.0, 0.0]])).tolist() == [1 * 5 + 3, -1]
    assert np.allclose(g.points()[8], [1.0, 3.0])


def test_self_agreement():
    m = GaussianMixture([0.5, 0.5], [[-2, 0], [2, 0]], [np.eye(2)] * 2)
    r = grid_metrics(m, m, GridSpec([-10, -10], [10, 10], [60, 60]), 0.01)
    assert (r.precision, r.recall, r.f1, r.accuracy) == (1.0, 1.0, 1.0, 1.0)
    assert r.tp + r.fp + r.fn + r.tn == 3600


def test_constant_model_hand_grid():
    """1-D-style hand grid: 10 nodes on a line through a bimodal truth."""
    truth = GaussianMixture([0.5, 0.5], [[-2, 0], [2, 0]], [np.eye(2)] * 2)
    grid = GridSpec([-4.5, 0.0], [4.5, 0.0 + 1e-9], [10, 2])
    pts = grid.points()
    tl = truth.log_density(pts)
    truth_pos = tl >= tl.max() + math.log(0.3)
    n_pos = int(truth_pos.sum())
    # a flat model is "normal" everywhere at its own peak fraction
    r = grid_metrics(truth, Const(0.01), grid, 0.3)
    assert (r.tp, r.fp, r.fn, r.tn) == (n_pos, 20 - n_pos, 0, 0)
    assert r.recall == 1.0 and r.precision == pytest.approx(n_pos / 20)
    # swapping roles: a flat truth marks every node positive, so the bimodal
    # model's misses become false negatives and recall drops to n_pos / 20
    r = grid_metrics(Const(0.01), truth, grid, 0.3)
    assert (r.tp, r.fp, r.fn, r.tn) == (n_pos, 0, 20 - n_pos, 0)
    assert r.precision == 1.0 and r.recall == pytest.approx(n_pos / 20)
    with pytest.raises(ConfigurationError):
        grid_metrics(truth, Const(0.01), grid, 1.5)


def test_asymmetry_of_precision_and_recall():
    a = GaussianMixture([1.0], [[0, 0]], [np.eye(2)])
    b = GaussianMixture([1.0], [[0, 0]], [np.eye(2) * 2.0])
    grid = GridSpec([-8, -8], [8, 8], [81, 81])
    ab, ba = grid_metrics(a, b, grid, 0.05), grid_metrics(b, a, grid, 0.05)
    assert ab.accuracy == ba.accuracy
    assert ab.precision == ba.recall and ab.recall == ba.precision
    assert ab.precision != ab.recall


def test_confusion_degenerate_cases():
    r = confusion_metrics(np.zeros(4, bool), np.zeros(4, bool))
    assert r.degenerate and r.precision == 1.0 and r.recall == 1.0 and r.accuracy == 1.0
    r = confusion_metrics(np.array([True, False]), np.zeros(2, bool))
    assert r.degenerate and r.precision == 0.0 and r.recall == 0.0


@settings(max_examples=100, deadline=None)
@given(st.lists(st.tuples(st.booleans(), st.booleans()), min_size=1, max_size=50))
def test_confusion_ranges(pairs):
    t = np.array([p[0] for p in pairs])
    p = np.array([p[1] for p in pairs])
    r = confusion_metrics(t, p)
    assert r.tp + r.fp + r.fn + r.tn == len(pairs)
    for v in (r.precision, r.recall, r.f1, r.accuracy):
        assert 0.0 <= v <= 1.0
    if r.precision + r.recall:
        assert r.f1 == pytest.approx(2 * r.precision * r.recall / (r.precision + r.recall))


# --- boundary precision ------------------------------------------------------------------

def ring(radius, n=64):
    t = np.linspace(0, 2 * np.pi, n, endpoint=False)
    return radius * np.c_[np.cos(t), np.sin(t)]


def test_bp1_at_mode_is_zero():
    assert bp1(np.zeros((10, 2)), standard_normal(2)) == 0.0


def test_bp1_on_epsilon_contour_is_one():
    # p/peak = exp(-r^2/2) = 0.01
    assert bp1(ring(math.sqrt(2 * math.log(100))), standard_normal(2)) == 1.0


def test_bp1_validation():
    with pytest.raises(ConfigurationError):
        bp1(np.zeros((0, 2)), standard_normal(2))
    with pytest.raises(ConfigurationError):
        bp1(np.zeros((3, 2)), standard_normal(2), gamma_frac=0.02, epsilon_frac=0.01)


def test_bp2_with_flow_equal_truth_matches_grid_bp1():
    truth = standard_normal(2)
    grid = GridSpec([-6, -6], [6, 6], [121, 121])
    samples = np.random.default_rng(0).normal(size=(400, 2)) * 2.2
    snapped = grid.points()[grid.cell_index(samples)]
    assert bp2(samples, truth, truth, grid) == pytest.approx(bp1(snapped, truth))


def test_bp2_with_uniform_flow_is_zero():
    truth = standard_normal(2)
    grid = GridSpec([-6, -6], [6, 6], [61, 61])
    assert bp2(ring(3.2), Const(1e-3), truth, grid) == 0.0


@settings(max_examples=30, deadline=None)
@given(radius=st.floats(0.0, 5.0), scale=st.floats(0.7, 1.5))
def test_bp2_never_exceeds_pointwise_bp1_on_grid_nodes(radius, scale):
    truth = standard_normal(2)
    flow = GaussianMixture([1.0], [[0, 0]], [np.eye(2) * scale ** 2])
    grid = GridSpec([-6, -6], [6, 6], [61, 61])
    nodes = grid.points()[grid.cell_index(ring(radius, 32))]
    assert bp2(nodes, flow, truth, grid) <= bp1(nodes, truth)


def test_in_band_is_closed():
    peak = 0.0
    assert in_band(np.array([math.log(0.001), math.log(0.01)]), peak, 0.001, 0.01).all()


def test_report_json_and_grid_csv(tmp_path):
    r = EvalReport(precision=1.0, recall=1.0, bp1=0.8, counts={"tp": 1})
    assert '"bp1": 0.8' in r.to_json()
    write_grid_csv(tmp_path / "g.csv", np.array([[0.0, 1.0]]), np.array([0.5]), np.array([0.25]))
    assert (tmp_path / "g.csv").read_text().splitlines() == ["x,y,truth_density,model_density",
                                                             "0.0,1.0,0.5,0.25"]
