import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from benk.errors import NoAdmissiblePairs
from benk.survival import (
    StepSurvivalFunction,
    SurvivalDataset,
    SurvivalRecord,
    batch_beran,
    batch_integrate,
    beran_sf,
    cate_from_sfs,
    concordance_index,
    expected_lifetime,
    integrate_on_grid,
    kaplan_meier,
    sort_risk_order,
    uniform_weights,
)


def ds(times, events, x=None):
    n = len(times)
    x = np.zeros((n, 1)) if x is None else x
    return SurvivalDataset(x, times, events)


def literal_beran(times, events, weights):
    """Textbook loop: factor 1 - W_i / (1 - sum_{j<i} W_j) for events, in risk order."""
    order = sorted(range(len(times)), key=lambda i: (times[i], not events[i], i))
    s, cum, out = 1.0, 0.0, {}
    for i in order:
        denom = 1.0 - cum
        if events[i] and denom > 1e-12:
            s *= max(0.0, 1.0 - weights[i] / denom)
        cum += weights[i]
        out[times[i]] = s
    return np.array(sorted(out)), np.array([out[t] for t in sorted(out)])


@st.composite
def censored_data(draw, max_n=20):
    n = draw(st.integers(1, max_n))
    times = draw(st.lists(st.integers(1, 8), min_size=n, max_size=n))
    events = draw(st.lists(st.booleans(), min_size=n, max_size=n))
    raw = draw(st.lists(st.floats(0.01, 1.0), min_size=n, max_size=n))
    w = np.array(raw) / np.sum(raw)
    return np.array(times, dtype=float), np.array(events), w


# --- ordering -------------------------------------------------------------

def test_sort_risk_order_by_time():
    assert list(sort_risk_order(ds([3, 1, 2], [1, 1, 1]))) == [1, 2, 0]


def test_sort_risk_order_events_before_censored_at_ties():
    assert list(sort_risk_order(ds([2, 2], [0, 1]))) == [1, 0]


def test_sort_risk_order_stable():
    assert list(sort_risk_order(ds([5, 5], [1, 1]))) == [0, 1]


# --- Kaplan-Meier -----------------------------------------------------------

def test_kaplan_meier_three_events():
    sf = kaplan_meier(ds([1, 2, 3], [1, 1, 1]))
    np.testing.assert_allclose(sf.times, [1, 2, 3])
    np.testing.assert_allclose(sf.values, [2 / 3, 1 / 3, 0.0], atol=1e-15)


def test_kaplan_meier_all_censored_is_one():
    sf = kaplan_meier(ds([1, 4, 2], [0, 0, 0]))
    assert np.all(sf.values == 1.0)


def test_kaplan_meier_event_then_censored():
    sf = kaplan_meier(ds([1, 2], [1, 0]))
    assert sf(1.0) == 0.5 and sf(100.0) == 0.5 and sf(0.5) == 1.0


# --- Beran ------------------------------------------------------------------

def test_beran_hand_example():
    sf = beran_sf(ds([1, 2, 3], [1, 1, 1]), [0.5, 0.3, 0.2])
    np.testing.assert_allclose(sf.values, [0.5, 0.2, 0.0], atol=1e-15)


def test_beran_point_mass():
    refs = ds([4, 1, 9], [1, 1, 0])
    sf = beran_sf(refs, [1.0, 0.0, 0.0])
    assert sf(3.999) == 1.0
    assert sf(4.0) == 0.0 and sf(50.0) == 0.0


def test_beran_uniform_matches_km_simple():
    refs = ds([3, 1, 2, 2, 5], [1, 0, 1, 1, 0])
    a, b = beran_sf(refs, uniform_weights(5)), kaplan_meier(refs)
    np.testing.assert_array_equal(a.times, b.times)
    np.testing.assert_allclose(a.values, b.values, atol=1e-12)


def test_beran_rejects_mismatched_lengths():
    with pytest.raises(ValueError):
        beran_sf(ds([1, 2], [1, 1]), [1.0])


def test_beran_rejects_unnormalized():
    with pytest.raises(ValueError):
        beran_sf(ds([1, 2], [1, 1]), [0.5, 0.6])


@settings(max_examples=300, deadline=None)
@given(censored_data())
def test_beran_matches_literal_formula(data):
    times, events, w = data
    sf = beran_sf(ds(times, events), w)
    t_ref, v_ref = literal_beran(times, events, w)
    np.testing.assert_array_equal(sf.times, t_ref)
    np.testing.assert_allclose(sf.values, v_ref, atol=1e-9)


@settings(max_examples=300, deadline=None)
@given(censored_data())
def test_beran_valid_step_function(data):
    times, events, w = data
    sf = beran_sf(ds(times, events), w)
    assert np.all(np.diff(sf.values) <= 0)
    assert np.all((sf.values >= 0) & (sf.values <= 1))


@settings(max_examples=200, deadline=None)
@given(censored_data())
def test_beran_no_jump_at_censored_only_times(data):
    times, events, w = data
    sf = beran_sf(ds(times, events), w)
    padded = np.concatenate(([1.0], sf.values))
    for j, t in enumerate(sf.times):
        if not np.any(events[times == t]):
            assert padded[j + 1] == padded[j]


@settings(max_examples=200, deadline=None)
@given(censored_data())
def test_uniform_beran_equals_km(data):
    times, events, _ = data
    refs = ds(times, events)
    np.testing.assert_allclose(beran_sf(refs, uniform_weights(len(refs))).values, kaplan_meier(refs).values, atol=1e-12)


@settings(max_examples=100, deadline=None)
@given(censored_data(), st.integers(2, 5))
def test_batch_beran_matches_rowwise(data, rows):
    times, events, w = data
    refs = ds(times, events)
    rng = np.random.default_rng(len(times))
    weights = rng.random((rows, len(times))) + 1e-3
    weights /= weights.sum(axis=1, keepdims=True)
    weights[0] = w
    bt, bv = batch_beran(weights, refs)
    for r in range(rows):
        sf = beran_sf(refs, weights[r])
        np.testing.assert_array_equal(bt, sf.times)
        np.testing.assert_allclose(bv[r], sf.values, atol=1e-14)
        assert batch_integrate(bt, bv[r:r + 1])[0] == pytest.approx(expected_lifetime(sf), abs=1e-12)


# --- step function and integration ---------------------------------------------

def test_step_function_validation():
    with pytest.raises(ValueError):
        StepSurvivalFunction([1, 1], [0.5, 0.4])
    with pytest.raises(ValueError):
        StepSurvivalFunction([1, 2], [0.4, 0.5])
    with pytest.raises(ValueError):
        StepSurvivalFunction([1], [1.2])


def test_expected_lifetime_riemann_sum():
    assert expected_lifetime(StepSurvivalFunction([2, 5], [0.5, 0.0])) == pytest.approx(3.5)


def test_expected_lifetime_point_mass():
    assert expected_lifetime(StepSurvivalFunction([6.25], [0.0])) == pytest.approx(6.25)


def test_expected_lifetime_constant_sf():
    assert expected_lifetime(StepSurvivalFunction([7.0], [1.0])) == pytest.approx(7.0)


def test_integrate_on_own_grid_is_expected_lifetime():
    sf = StepSurvivalFunction([1, 2.5, 4], [0.8, 0.3, 0.1])
    assert integrate_on_grid(sf, sf.times) == pytest.approx(expected_lifetime(sf))
    # on a coarser grid the value on [g_{j-1}, g_j) is S(g_{j-1})
    assert integrate_on_grid(sf, [2.0, 4.0]) == pytest.approx(2.0 * 1.0 + 2.0 * 0.8)


@settings(max_examples=200, deadline=None)
@given(st.lists(st.tuples(st.floats(0.0, 1.0), st.floats(0.0, 1.0)), min_size=1, max_size=10),
       st.lists(st.floats(0.1, 5.0), min_size=10, max_size=10))
def test_expected_lifetime_monotone(pairs, gaps):
    hi = np.minimum.accumulate(np.array([max(a, b) for a, b in pairs]))
    lo = np.minimum(hi, np.minimum.accumulate(np.array([min(a, b) for a, b in pairs])))
    times = np.cumsum(gaps[:len(pairs)])
    assert expected_lifetime(StepSurvivalFunction(times, hi)) >= expected_lifetime(StepSurvivalFunction(times, lo))


# --- CATE ---------------------------------------------------------------------

def test_cate_identical_is_zero():
    sf = StepSurvivalFunction([1, 3], [0.4, 0.1])
    assert cate_from_sfs(sf, sf) == 0.0


def test_cate_point_masses_generator_values():
    control = StepSurvivalFunction([39.12], [0.0])
    treatment = StepSurvivalFunction([12.04], [0.0])
    assert cate_from_sfs(control, treatment) == pytest.approx(-27.08, abs=1e-12)


def test_cate_rectangles():
    assert cate_from_sfs(StepSurvivalFunction([2.0], [0.0]), StepSurvivalFunction([5.0], [0.0])) == pytest.approx(3.0)


@settings(max_examples=100, deadline=None)
@given(censored_data(), censored_data())
def test_cate_antisymmetric(a, b):
    sa, sb = beran_sf(ds(a[0], a[1]), a[2]), beran_sf(ds(b[0], b[1]), b[2])
    assert cate_from_sfs(sa, sb) == -cate_from_sfs(sb, sa)
    assert cate_from_sfs(sa, sa) == 0.0


# --- C-index -------------------------------------------------------------------

def brute_cindex(pred, times, events):
    num = den = 0.0
    for i in range(len(times)):
        for j in range(len(times)):
            if events[i] and times[i] < times[j]:
                den += 1
                num += 1.0 if pred[i] < pred[j] else 0.5 if pred[i] == pred[j] else 0.0
    return num / den


def test_cindex_perfect_and_reversed():
    times = np.arange(1.0, 21.0)
    data = ds(times, np.ones(20, bool))
    assert concordance_index(times, data) == 1.0
    assert concordance_index(-times, data) == 0.0


def test_cindex_risk_convention():
    times = np.arange(1.0, 6.0)
    assert concordance_index(-times, ds(times, np.ones(5, bool)), risk=True) == 1.0


def test_cindex_random_near_half():
    rng = np.random.default_rng(0)
    times = rng.exponential(size=500)
    values = [concordance_index(rng.permutation(500), ds(times, np.ones(500, bool))) for _ in range(5)]
    assert all(abs(v - 0.5) < 0.05 for v in values)


def test_cindex_no_admissible_pairs():
    with pytest.raises(NoAdmissiblePairs):
        concordance_index([1, 2], ds([1, 2], [0, 0]))


@settings(max_examples=200, deadline=None)
@given(censored_data(max_n=15), st.integers(0, 2**31))
def test_cindex_matches_brute_force(data, seed):
    times, events, _ = data
    if not any(events[i] and np.any(times[i] < times) for i in range(len(times))):
        return
    pred = np.random.default_rng(seed).integers(0, 5, size=len(times)).astype(float)
    assert concordance_index(pred, ds(times, events)) == pytest.approx(brute_cindex(pred, times, events))


@settings(max_examples=100, deadline=None)
@given(censored_data(max_n=15), st.integers(0, 2**31))
def test_cindex_negation(data, seed):
    times, events, _ = data
    if not any(events[i] and np.any(times[i] < times) for i in range(len(times))):
        return
    pred = np.random.default_rng(seed).permutation(len(times)).astype(float)
    data = ds(times, events)
    assert concordance_index(pred, data) == pytest.approx(1.0 - concordance_index(-pred, data))


# --- dataset type ----------------------------------------------------------------

def test_dataset_invariants():
    with pytest.raises(ValueError):
        SurvivalDataset(np.zeros((2, 1)), [1.0, 0.0], [1, 1])
    with pytest.raises(ValueError):
        SurvivalDataset(np.zeros((0, 1)), [], [])
    with pytest.raises(ValueError):
        SurvivalDataset(np.array([[np.nan]]), [1.0], [1])
    with pytest.raises(ValueError):
        SurvivalDataset.from_records([SurvivalRecord(np.zeros(2), 1.0, True), SurvivalRecord(np.zeros(3), 1.0, True)])


def test_dataset_records_roundtrip():
    data = SurvivalDataset(np.arange(6.0).reshape(3, 2), [1.0, 2.0, 3.0], [1, 0, 1], [0, 1, 0])
    again = SurvivalDataset.from_records(list(data))
    np.testing.assert_array_equal(again.x, data.x)
    np.testing.assert_array_equal(again.group, data.group)
    assert data.d == 2 and len(data) == 3
