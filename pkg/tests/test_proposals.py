import math
import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from seldkit import _fallback
from seldkit import proposals as pm
from seldkit.errors import DomainError, ShapeError, ValidationError
from seldkit.waveform import SoundEvent


def _event(f0, f1, dt=0.1, cls=0):
    return SoundEvent(f0 * dt, f1 * dt, cls, np.tile([1.0, 0.0, 0.0], (f1 - f0, 1)))


def _scalar_tiou(a, b):
    inter = max(0.0, min(a[1], b[1]) - max(a[0], b[0]))
    return inter / (max(a[1], b[1]) - min(a[0], b[0]))


# -- grid -------------------------------------------------------------------

def test_grid_valid_count():
    g = pm.build_grid(600, 60, 60, 10)
    assert g.num_valid == 1830 == sum(61 - i for i in range(1, 61))


def test_grid_cells():
    g = pm.build_grid(600, 60, 60, 10)
    assert g.cell_to_interval(1, 0) == (0, 10)
    assert not g.is_valid(60, 1)
    with pytest.raises(DomainError):
        g.cell_to_interval(60, 1)
    assert g.cell_seconds(3, 2) == pytest.approx((2.0, 5.0))


@pytest.mark.parametrize("args", [(600, 0, 60, 10), (600, 60, 0, 10), (600, 60, 60, 0), (500, 60, 60, 10)])
def test_grid_degenerate(args):
    with pytest.raises(ShapeError):
        pm.build_grid(*args)


def test_grid_bijection_rectangular():
    g = pm.build_grid(100, 7, 12, 5)
    seen = set()
    for i, j in g.valid_cells():
        a, b = g.cell_to_interval(i, j)
        assert g.interval_to_cell(a, b) == (i, j)
        seen.add((a, b))
    assert len(seen) == g.num_valid
    with pytest.raises(DomainError):
        g.interval_to_cell(3, 10)


# -- tIoU -------------------------------------------------------------------

def test_tiou_examples():
    assert pm.tiou((20, 80), (22, 82)) == pytest.approx(58 / 62)
    assert pm.tiou((3, 9), (3, 9)) == 1.0
    assert pm.tiou((0, 10), (10, 20)) == 0.0
    with pytest.raises(DomainError):
        pm.tiou((5, 5), (0, 10))


def test_tiou_bs_examples():
    assert pm.tiou_bs(1.0, 7.0) == 1.0
    assert pm.tiou_bs(0.0, 3.0) == 0.0
    assert pm.tiou_bs(0.94, 2.0) == pytest.approx(0.8337, abs=1e-4)
    assert pm.tiou_bs(0.9355, 2.0) == pytest.approx(0.822, abs=1e-3)
    assert pm.tiou_bs(0.94, 2.0) == pytest.approx(0.83, abs=0.015)
    assert pm.tiou_bs(0.6, 0.0) == 0.6


def test_boundary_sensitivity_amplifies_gap():
    t = pm.tiou((20, 80), (22, 82))
    assert 1 - pm.tiou_bs(t, 2.0) >= 2 * (1 - t)


intervals = st.tuples(st.floats(-100, 100), st.floats(0.01, 50)).map(lambda p: (p[0], p[0] + p[1]))


@settings(max_examples=200, deadline=None)
@given(intervals, intervals)
def test_tiou_properties(a, b):
    t = pm.tiou(a, b)
    assert 0.0 <= t <= 1.0
    assert t == pytest.approx(pm.tiou(b, a))
    assert pm.tiou(a, a) == 1.0


@settings(max_examples=200, deadline=None)
@given(st.floats(0, 1), st.floats(0, 1), st.floats(0, 5))
def test_tiou_bs_properties(t1, t2, w):
    b1 = pm.tiou_bs(t1, w)
    assert b1 <= t1 + 1e-15
    if w > 1e-3 and 1e-6 < t1 < 1 - 1e-6:
        assert b1 < t1
    if t1 < t2:
        assert pm.tiou_bs(t1, w) <= pm.tiou_bs(t2, w)


# -- overlap map ------------------------------------------------------------

def test_overlap_map_empty():
    g = pm.build_grid(600)
    m = pm.ground_truth_overlap_map(g, [])
    assert np.all(m.values[g.valid] == 0)
    assert np.all(m.values[~g.valid] == pm.INVALID)


def test_overlap_map_brute_force():
    g = pm.build_grid(600)
    ev = _event(200, 500)
    m = pm.ground_truth_overlap_map(g, [ev])
    assert m.values[29, 20] == 1.0
    assert m.values[29, 21] == pytest.approx(pm.tiou_bs(29 / 31, 2.0))
    for i, j in g.valid_cells():
        a, b = g.cell_seconds(i, j)
        expected = _scalar_tiou((a, b), (20.0, 50.0))
        expected *= math.exp(-2.0 * (1 - expected))
        assert m.values[i - 1, j] == pytest.approx(expected, abs=1e-12)


@settings(max_examples=25, deadline=None)
@given(st.lists(st.tuples(st.integers(0, 190), st.integers(1, 50)), min_size=1, max_size=5))
def test_overlap_map_dominance(spans):
    g = pm.build_grid(200, 20, 20, 10)
    events = [_event(a, min(a + n, 200)) for a, n in spans if a + 1 <= 200]
    small = pm.ground_truth_overlap_map(g, events[:-1]).values
    big = pm.ground_truth_overlap_map(g, events).values
    assert np.all(big[g.valid] >= small[g.valid])


# -- smoothness map ---------------------------------------------------------

def test_smoothness_constant_trajectory():
    g = pm.build_grid(100, 10, 10, 10)
    m = pm.motion_smoothness_map(g, np.tile([0.0, 0.0, 1.0], (100, 1)))
    assert np.all(m.values[g.valid] == 0)
    assert np.all(m.values[~g.valid] == pm.INVALID)


def test_smoothness_single_jump():
    g = pm.build_grid(20, 2, 2, 10)
    loc = np.tile([0.0, 0.0, 1.0], (20, 1))
    loc[5] = [1.0, 0.0, 1.0]
    m = pm.motion_smoothness_map(g, loc)
    # steps (0,0,1) -> (1,0,1) and back are inside cell (1, 0)
    assert m.values[0, 0] == 1.0
    assert m.values[0, 1] == 0.0
    loc[15] = [0.0, 0.0, -1.0]
    assert pm.motion_smoothness_map(g, loc).values[0, 1] == 4.0


def test_smoothness_single_frame_cells_are_zero():
    g = pm.build_grid(10, 10, 10, 1)
    rng = np.random.default_rng(0)
    m = pm.motion_smoothness_map(g, rng.standard_normal((10, 3)))
    assert np.all(m.values[0][g.valid[0]] == 0)


def _brute_smoothness(loc, i, j, unit):
    a, b = j * unit, (j + i) * unit
    steps = [np.sum((loc[k + 1] - loc[k]) ** 2) for k in range(a, b - 1)]
    return max(steps, default=0.0)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000), st.integers(1, 5))
def test_smoothness_brute_force_and_monotone(seed, unit):
    rng = np.random.default_rng(seed)
    n = 12 * unit
    loc = rng.standard_normal((n, 3))
    g = pm.build_grid(n, 12, 12, unit)
    m = pm.motion_smoothness_map(g, loc).values
    for i, j in g.valid_cells():
        assert m[i - 1, j] == pytest.approx(_brute_smoothness(loc, i, j, unit), abs=1e-12)
        if g.is_valid(i + 1, j):
            assert m[i, j] >= m[i - 1, j]


def test_smoothness_per_class_and_combine():
    g = pm.build_grid(20, 2, 2, 10)
    loc = np.tile([0.0, 0.0, 1.0], (20, 2, 1))
    loc[5, 1] = [1.0, 0.0, 1.0]
    m = pm.motion_smoothness_map(g, loc)
    assert m.per_class and m.values.shape == (2, 2, 2)
    scores = np.zeros((2, 2, 2))
    scores[..., 1] = 1.0
    agn = pm.combine_class_smoothness(m, scores)
    assert agn.values[0, 0] == 1.0
    scores[..., 0] = 1.0
    assert pm.combine_class_smoothness(m, scores).values[0, 0] == 0.0


def test_smoothness_needs_all_frames():
    g = pm.build_grid(100, 10, 10, 10)
    with pytest.raises(ShapeError):
        pm.motion_smoothness_map(g, np.zeros((50, 3)))


def test_interval_max_backends_agree():
    from seldkit import _backend
    rng = np.random.default_rng(1)
    steps = rng.random(599)
    ref = _fallback.interval_max(steps, 60, 60, 10, 600)
    np.testing.assert_array_equal(_backend.interval_max(steps, 60, 60, 10, 600), ref)


# -- features ---------------------------------------------------------------

def test_features_constant():
    g = pm.build_grid(50, 5, 5, 10)
    f = pm.proposal_features(np.tile([1.0, -2.0], (5, 1)), g)
    np.testing.assert_allclose(f.features, np.tile([1.0, -2.0], (g.num_valid, 1)))


def test_features_two_steps():
    g = pm.build_grid(50, 5, 5, 10)
    u, v = np.array([1.0, 2.0]), np.array([3.0, 6.0])
    feats = np.vstack([u, v, np.zeros((3, 2))])
    assert np.allclose(pm.proposal_features(feats, g)[(2, 0)], (u + v) / 2)


def test_features_brute_force():
    rng = np.random.default_rng(2)
    g = pm.build_grid(120, 12, 12, 10)
    feats = rng.standard_normal((12, 4))
    pf = pm.proposal_features(feats, g)
    for k, (i, j) in enumerate(pf.cells):
        acc = np.zeros(4)
        for s in range(j, j + i):
            acc += feats[s]
        np.testing.assert_allclose(pf.features[k], acc / i, atol=1e-12)


def test_features_errors():
    g = pm.build_grid(50, 5, 5, 10)
    with pytest.raises(ShapeError):
        pm.proposal_features(np.zeros(5), g)
    with pytest.raises(ShapeError):
        pm.proposal_features(np.zeros((3, 2)), g)


def test_pool_frames():
    x = np.arange(25, dtype=float).reshape(25, 1)
    np.testing.assert_allclose(pm.pool_frames(x, 10).ravel(), [4.5, 14.5])


# -- balancing --------------------------------------------------------------

def test_balance_extremes():
    g = pm.build_grid(600)
    m = pm.ground_truth_overlap_map(g, [_event(100, 200)])
    keep_all = pm.balance_labels(m, 0.7, 0.0, seed=1)
    neg = g.num_valid - keep_all.positives
    assert keep_all.kept_negatives == neg
    drop_all = pm.balance_labels(m, 0.7, 1.0, seed=1)
    assert drop_all.kept_negatives == 0 and drop_all.ratio == math.inf
    pos = g.valid & (m.values >= 0.7)
    assert np.all(drop_all.labels[pos] == pm.POSITIVE)


def test_balance_expected_kept_negatives():
    g = pm.build_grid(600)
    values = np.where(g.valid, 0.0, pm.INVALID)
    cells = list(g.valid_cells())[:5]
    for i, j in cells:
        values[i - 1, j] = 1.0
    m = pm.OverlapMap(g, values)
    p_d = 1 - 5 / 1825
    kept = [pm.balance_labels(m, 0.5, p_d, seed=s).kept_negatives for s in range(200)]
    assert pm.balance_labels(m, 0.5, p_d, seed=0).positives == 5
    assert abs(np.mean(kept) - 5) <= 0.3 * 5


def test_balance_deterministic_and_warns():
    g = pm.build_grid(600)
    m = pm.ground_truth_overlap_map(g, [_event(100, 200)])
    a = pm.balance_labels(m, 0.5, 0.5, seed=3).labels
    b = pm.balance_labels(m, 0.5, 0.5, seed=3).labels
    assert np.array_equal(a, b)
    with pytest.warns(RuntimeWarning):
        pm.balance_labels(pm.ground_truth_overlap_map(g, []), 0.5, 1.0)
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        pm.balance_labels(m, 0.5, 1.0)
    with pytest.raises(ValidationError):
        pm.balance_labels(m, 0.0, 0.5)


# -- dumps ------------------------------------------------------------------

def test_map_csv_round_trip(tmp_path):
    g = pm.build_grid(600)
    m = pm.ground_truth_overlap_map(g, [_event(17, 333)])
    path = tmp_path / "map.csv"
    pm.save_map_csv(path, g, m.values)
    g2, values = pm.load_map_csv(path)
    assert g2 == g
    np.testing.assert_array_equal(values, m.values)
    assert path.read_text().startswith("# H=60,W=60,g=10")
