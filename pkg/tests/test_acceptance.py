"""Acceptance criteria, one test each, at the stated tolerances.

Each test records a PASS/FAIL line that is printed at the end of the run.
The benchmark criteria (6, 7, 8) take several minutes on one core; deselect
them with ``-m "not slow"``.
"""
import subprocess
import sys
import time
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from benk import bench
from benk.baselines import fit_cox, gaussian_weights
from benk.datagen import GenConfig, apply_censoring, control_time, generate_event_times, generate_trial, treatment_time
from benk.kernel import KernelNetConfig, KernelNetParams, gradient_check, kernel_scores, softmax_weights
from benk.survival import (
    SurvivalDataset,
    beran_sf,
    cate_from_sfs,
    concordance_index,
    kaplan_meier,
    uniform_weights,
)
from benk.trainer import Scaler, TrainConfig, TrainedBenk, benk_loss, build_training_examples, predict_cate

BASELINES = ("T-NW", "S-NW", "X-NW", "T-Cox", "S-Cox", "X-Cox")


def test_criterion_1_uniform_beran_is_kaplan_meier(criterion):
    rng = np.random.default_rng(2024)
    worst = 0.0
    start = time.perf_counter()
    for k in range(1000):
        n = int(rng.integers(1, 21))
        frac = (0.0, 0.25, 0.5)[k % 3]
        times = rng.integers(1, 10, n).astype(float)  # integer times force ties
        data = SurvivalDataset(np.zeros((n, 1)), times, rng.random(n) >= frac)
        a, b = beran_sf(data, uniform_weights(n)), kaplan_meier(data)
        assert np.array_equal(a.times, b.times)
        worst = max(worst, float(np.max(np.abs(a.values - b.values))))
    elapsed = time.perf_counter() - start
    ok = criterion(1, worst <= 1e-12 and elapsed < 5.0, f"max |diff| {worst:.2e} (<= 1e-12), {elapsed:.2f} s (< 5 s)")
    assert ok


def test_criterion_2_gradient_check(criterion):
    start = time.perf_counter()
    reports = []
    for i, d in enumerate((2, 3, 5, 2, 3, 5, 2)):
        trials = 3 if i < 6 else 2  # 20 configurations in total
        config = KernelNetConfig.for_features(d, hidden_layers=(16, 16), activation="relu")
        reports.append(gradient_check(config, trials, seed=100 + i, ref_counts=(3, 5, 8), step=1e-5))
    elapsed = time.perf_counter() - start
    top = max(reports, key=lambda r: r.max_relative_error)
    worst = top.max_relative_error
    total = sum(r.trials for r in reports)
    ok = criterion(2, total == 20 and worst < 1e-4 and elapsed < 30.0,
                   f"{total} configurations, max relative error {worst:.2e} (< 1e-4), {elapsed:.1f} s (< 30 s); "
                   f"worst entry analytic {top.worst.get('analytic', 0):.6e} vs numeric {top.worst.get('numeric', 0):.6e}")
    assert ok


def test_criterion_3_cox_recovery(criterion):
    rng = np.random.default_rng(7)
    x = rng.normal(size=(2000, 2))
    t = rng.exponential(size=2000) / np.exp(x @ np.array([1.0, -1.0]))
    start = time.perf_counter()
    model = fit_cox(SurvivalDataset(x, t, np.ones(2000, bool)), ridge=0.1)
    elapsed = time.perf_counter() - start
    err = np.abs(model.beta - [1.0, -1.0])
    ok = criterion(3, bool(np.all(err < 0.15)) and elapsed < 10.0,
                   f"beta {np.round(model.beta, 4).tolist()}, max error {err.max():.3f} (< 0.15), {elapsed:.2f} s (< 10 s)")
    assert ok


def test_criterion_4_cindex_endpoints(criterion):
    rng = np.random.default_rng(4)
    times = rng.exponential(size=500) + 1e-3
    data = SurvivalDataset(np.zeros((500, 1)), times, np.ones(500, bool))
    perfect = concordance_index(times, data)
    reversed_ = concordance_index(-times, data)
    random = concordance_index(rng.permutation(500).astype(float), data)
    ok = criterion(4, perfect == 1.0 and reversed_ == 0.0 and abs(random - 0.5) <= 0.05,
                   f"perfect {perfect}, reversed {reversed_}, random {random:.4f} (0.5 +/- 0.05)")
    assert ok


def test_criterion_5_generator_fidelity(criterion):
    f0, h0 = generate_event_times(0.0)
    times_ok = abs(f0 - 39.120) < 1e-3 and abs(h0 - 12.040) < 1e-3
    frac = 1.0 - apply_censoring(0.3, np.random.default_rng(5), size=100_000).mean()
    cens_ok = abs(frac - 0.3) <= 0.01
    trial = generate_trial(GenConfig(epsilon=0.0, p=0.0, c=200, seed=5))
    exact = (np.array_equal(trial.controls.time, control_time(trial.control_latent))
             and np.array_equal(trial.treatments.time, treatment_time(trial.treatment_latent)))
    ok = criterion(5, times_ok and cens_ok and exact,
                   f"f(0)={f0:.4f} h(0)={h0:.4f}, censored fraction {frac:.4f} for p=0.3, noiseless exact: {exact}")
    assert ok


# --- benchmark criteria --------------------------------------------------------------------

@pytest.fixture(scope="module")
def table2_runs(tmp_path_factory):
    out = tmp_path_factory.mktemp("table2")
    paths = []
    for k in range(2):
        path = out / f"run{k}.csv"
        subprocess.run([sys.executable, "-m", "benk.cli", "benchmark", "--config", "table2", "--seed", "7",
                        "--out", str(path)], check=False)
        paths.append(path)
    return paths


@pytest.mark.slow
def test_criterion_6_table2_ordering(criterion, table2_runs):
    rows = [r for r in bench.parse_report_csv(table2_runs[0].read_text())]
    rmse = {(r["model"], r["repetition"]): r["rmse"] for r in rows}
    reps = sorted({r["repetition"] for r in rows})
    wins = {m: sum(rmse[("BENK", k)] < rmse[(m, k)] for k in reps) for m in BASELINES}
    means = {m: float(np.mean([rmse[(m, k)] for k in reps])) for m in ("BENK",) + BASELINES}
    ok = len(reps) == 5 and all(wins[m] >= 3 and means["BENK"] < means[m] for m in BASELINES)
    detail = ", ".join(f"{m} {means[m]:.3f}" for m in ("BENK",) + BASELINES)
    criterion(6, ok, f"mean rmse {detail}; BENK wins per baseline {wins}")
    assert ok


@pytest.mark.slow
def test_criterion_7_benk_improves_with_controls(criterion):
    config = bench.load_config("fig_size")
    config = replace(config, models=("BENK",), sweep_values=(100, 500), repetitions=3)
    report = bench.run_experiment(config)
    small, large = report.mean("BENK", 100), report.mean("BENK", 500)
    ok = criterion(7, not report.failed and large < small, f"BENK mean rmse c=100 {small:.4f}, c=500 {large:.4f}")
    assert ok


@pytest.mark.slow
def test_criterion_8_benchmark_bytes_identical(criterion, table2_runs):
    a, b = (p.read_bytes() for p in table2_runs)
    ok = criterion(8, len(a) > 0 and a == b, f"two table2 --seed 7 reports, {len(a)} bytes, identical: {a == b}")
    assert ok


# --- criterion 9: invariants as properties -------------------------------------------------

@st.composite
def weighted_refs(draw):
    n = draw(st.integers(1, 15))
    times = draw(st.lists(st.integers(1, 6), min_size=n, max_size=n))
    events = draw(st.lists(st.booleans(), min_size=n, max_size=n))
    raw = np.array(draw(st.lists(st.floats(0.001, 1.0), min_size=n, max_size=n)))
    return SurvivalDataset(np.arange(n, dtype=float)[:, None], np.array(times, float), events), raw / raw.sum()


@settings(max_examples=200, deadline=None)
@given(weighted_refs())
def property_sf_monotone_in_range(data):
    sf = beran_sf(*data)
    assert np.all(np.diff(sf.values) <= 0) and np.all((sf.values >= 0) & (sf.values <= 1))


@settings(max_examples=200, deadline=None)
@given(st.integers(1, 12), st.integers(1, 4), st.floats(1e-3, 1e3), st.integers(0, 2**31))
def property_weights_normalized(n, d, bandwidth, seed):
    rng = np.random.default_rng(seed)
    x, z = rng.normal(size=(n, d)) * 10, rng.normal(size=(1, d))
    config = KernelNetConfig.for_features(d, hidden_layers=(6,), init_seed=seed)
    for w in (softmax_weights(kernel_scores(KernelNetParams.initialize(config), z[0], x)), gaussian_weights(x, z, bandwidth)[0]):
        assert np.all(w >= 0) and abs(w.sum() - 1.0) < 1e-12


@settings(max_examples=200, deadline=None)
@given(weighted_refs(), weighted_refs())
def property_cate_antisymmetric(a, b):
    sa, sb = beran_sf(*a), beran_sf(*b)
    assert cate_from_sfs(sa, sb) == -cate_from_sfs(sb, sa)


@settings(max_examples=100, deadline=None)
@given(weighted_refs(), st.integers(0, 2**31))
def property_permutation_invariant(data, seed):
    refs, w = data
    perm = np.random.default_rng(seed).permutation(len(refs))
    a, b = beran_sf(refs, w), beran_sf(refs.subset(perm), w[perm])
    assert np.array_equal(a.times, b.times) and np.allclose(a.values, b.values, atol=1e-12)
    config = TrainConfig(epochs=0, hidden_layers=(6,), seed=seed % 1000)
    model = TrainedBenk(KernelNetParams.initialize(config.kernel_config(1)), config, Scaler.fit(refs.x, False), 1)
    z = np.array([0.5])
    assert predict_cate(model, refs.subset(perm), refs, z) == pytest.approx(predict_cate(model, refs, refs.subset(perm), z), abs=1e-9)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**31))
def property_loss_nonnegative(seed):
    rng = np.random.default_rng(seed)
    c = int(rng.integers(3, 12))
    controls = SurvivalDataset(rng.normal(size=(c, 2)), rng.uniform(0.1, 5, c), np.r_[True, rng.random(c - 1) < 0.7])
    examples = build_training_examples(controls, TrainConfig(N=2, n=int(rng.integers(1, c))), rng)
    params = KernelNetParams.initialize(TrainConfig(hidden_layers=(5,), seed=seed % 1000).kernel_config(2))
    assert benk_loss(params, examples, controls) >= 0.0


def property_report_arithmetic():
    config = bench.ExperimentConfig.from_dict({
        "generator": {"d": 2, "c": 15, "n_test": 20}, "sweep": {"p": [0.1, 0.3]},
        "models": ["T-NW", "T-Cox"], "repetitions": 2, "seed": 1,
    })
    report = bench.run_experiment(config)
    assert len(report.cells) == 2 * 2 * 2
    assert all(np.isfinite(c.rmse) and c.rmse >= 0 for c in report.cells)
    assert bench.report_csv(report) == bench.report_csv(bench.run_experiment(config))


PROPERTIES = {
    "SF monotone and in [0,1]": property_sf_monotone_in_range,
    "weights normalized": property_weights_normalized,
    "CATE antisymmetric": property_cate_antisymmetric,
    "permutation invariance": property_permutation_invariant,
    "loss nonnegative": property_loss_nonnegative,
    "report cell count, finite rmse, reproducible": property_report_arithmetic,
}


def test_criterion_9_property_suites(criterion):
    failures = []
    for name, prop in PROPERTIES.items():
        try:
            prop()
        except Exception as exc:  # collect every failing property, not just the first
            failures.append(f"{name}: {type(exc).__name__}")
    ok = criterion(9, not failures, f"{len(PROPERTIES) - len(failures)}/{len(PROPERTIES)} property suites pass"
                   + (f"; failing {failures}" if failures else ""))
    assert ok, failures

