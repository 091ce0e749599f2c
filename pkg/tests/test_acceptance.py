"""Acceptance gate: every criterion at its stated tolerance, one summary line each.

Criteria 6-9 share one synthetic corpus and run the full scaled experiment
(20 images, up to 3000 iterations each, aware mode twice plus blind mode once);
expect several CPU hours.
"""

import time

import numpy as np
import pytest

from acceptance_log import record
from dippas.assembly import AssemblyConfig, assemble, rank_block_candidates
from dippas.engine import SnapshotPool
from dippas.evaluation import Population, ScorePair, auc_from_scores, roc_auc
from dippas.experiment import (ExperimentConfig, baseline_report, loss_drops, ncc_reduction,
                               ncc_window_trend, run_mode)
from dippas.fingerprint import (Fingerprint, SensorNoiseParams, estimate_prnu_mle, ncc,
                                synthesize_sensor_image)
from dippas.pipeline import AWARE, BLIND, child_seed, make_corpus
from dippas.synth import random_prnu
from oracles import gradient_check, loop_pearson, pair_count_auc, relative_errors

EXPERIMENT = ExperimentConfig()


def test_c01_ncc_matches_scalar_loop():
    start = time.perf_counter()
    rng = np.random.default_rng(2024)
    worst = 0.0
    for _ in range(200):
        shape = tuple(rng.integers(2, 13, size=2)) + (int(rng.choice([1, 3])),)
        a = rng.normal(rng.normal(), rng.uniform(0.1, 3), size=shape)
        b = 0.5 * a + rng.normal(size=shape)
        worst = max(worst, abs(ncc(a, b) - loop_pearson(a, b)))
    elapsed = time.perf_counter() - start
    ok = worst < 1e-10 and elapsed < 10
    record("1", ok, f"max |delta| {worst:.2e} over 200 pairs (< 1e-10), {elapsed:.2f} s (< 10 s)")
    assert ok


def test_c02_gradient_check():
    start = time.perf_counter()
    results = gradient_check(seed=0, step=1e-4)
    worst_name, worst = max(((n, relative_errors(a, f).max()) for n, a, f in results),
                            key=lambda t: t[1])
    n_params = sum(a.size for _, a, _ in results)
    elapsed = time.perf_counter() - start
    ok = worst < 1e-4 and elapsed < 60 and results[-1][0] == "gamma"
    record("2", ok, f"max relative error {worst:.2e} ({worst_name}) over {n_params} parameters "
                    f"incl. gamma (< 1e-4), {elapsed:.1f} s (< 60 s)")
    assert ok


def test_c03_assembly_identities():
    start = time.perf_counter()
    rng = np.random.default_rng(3)
    p = Fingerprint(rng.normal(size=(16, 16, 3)), 0)

    single = SnapshotPool()
    img = rng.uniform(size=(16, 16, 3)).astype(np.float32)
    single.add(1, img, 40.0)
    a_ok = np.array_equal(assemble(single, p, AssemblyConfig(8, 4)), img.astype(np.float64))

    pool = SnapshotPool()
    imgs = [rng.uniform(size=(16, 16, 3)).astype(np.float32) for _ in range(4)]
    for i, x in enumerate(imgs):
        pool.add(i + 1, x, 40.0)
    mean = np.mean(np.array(imgs, np.float64), axis=0)
    b_err = max(np.abs(assemble(pool, p, AssemblyConfig(8, l)) - mean).max() for l in (4, 9))

    order = (rank_block_candidates([-0.1, 0.05, -0.02, 0.3]) + 1).tolist()
    elapsed = time.perf_counter() - start
    ok = a_ok and b_err < 1e-12 and order == [3, 1, 2, 4] and elapsed < 5
    record("3", ok, f"(a) M=1 bitwise {a_ok}; (b) L>=M max dev {b_err:.1e} (< 1e-12); "
                    f"(c) ranking {order} (want [3, 1, 2, 4]); {elapsed:.2f} s (< 5 s)")
    assert ok


def _flat_estimate(k, count, theta, seed):
    flat = np.full(k.shape, 0.5)
    params = SensorNoiseParams(0.05, theta)
    return estimate_prnu_mle(
        synthesize_sensor_image(flat, k, params, child_seed(seed, i)) for i in range(count))


def test_c04_prnu_estimator_quality():
    start = time.perf_counter()
    k = random_prnu(128, 128, 3, std=0.02, seed=child_seed(4, 0))
    few = ncc(_flat_estimate(k, 5, 0.02, 41).pattern, k.pattern)
    many = ncc(_flat_estimate(k, 50, 0.02, 42).pattern, k.pattern)
    clean = ncc(_flat_estimate(k, 50, 0.0, 43).pattern, k.pattern)
    elapsed = time.perf_counter() - start
    ok = many > few and clean > 0.9 and elapsed < 120
    record("4", ok, f"NCC(K_hat, K) 50 flats {many:.4f} > 5 flats {few:.4f}; noise-free "
                    f"{clean:.4f} (> 0.9); {elapsed:.1f} s (< 120 s)")
    assert ok


@pytest.fixture(scope="module")
def corpus():
    return make_corpus(EXPERIMENT.corpus)


@pytest.fixture(scope="module")
def baseline(corpus):
    return baseline_report(corpus)


@pytest.fixture(scope="module")
def aware(corpus):
    return run_mode(corpus, AWARE, EXPERIMENT)


@pytest.fixture(scope="module")
def blind(corpus):
    return run_mode(corpus, BLIND, EXPERIMENT)


def test_c05_detector_sanity(baseline):
    ok = baseline.auc > 0.9
    record("5", ok, f"un-anonymized pooled AUC {baseline.auc:.4f} (> 0.9) on 2 devices x 10 "
                    f"images, mean |NCC| {baseline.mean_abs_true_ncc():.3f}")
    assert ok


def _require_report(criterion, result):
    if result.report is None:
        record(criterion, False, f"{result.mode} runs with empty snapshot pools "
                                 f"(best PSNR per image): {result.run.failures}")
        pytest.fail(f"empty pools: {result.run.failures}")


def test_c06_aware_end_to_end(aware, baseline):
    _require_report("6", aware)
    rep = aware.report
    reduction = ncc_reduction(rep, baseline)
    auc_drop = baseline.auc - rep.auc
    loss_ok = all(loss_drops(t) for t in aware.run.traces.values())
    trend = ncc_window_trend(aware.run.traces)
    checks = {
        "a": rep.mean_psnr >= 30.0,
        "b": reduction >= 0.70,
        "c": auc_drop >= 0.15,
        "d": loss_ok and trend.nonincreasing,
        "runtime": aware.seconds < 4 * 3600,
    }
    window_txt = ", ".join(f"{m:+.4f}" for m in trend.window_means)
    detail = (f"(a) mean PSNR {rep.mean_psnr:.2f} dB (>= 30); (b) |NCC| reduction "
              f"{reduction:.1%} (>= 70%); (c) AUC {baseline.auc:.3f} -> {rep.auc:.3f}, drop "
              f"{auc_drop:.3f} (>= 0.15); (d) J(500) < J(1) in all runs: {loss_ok}, NCC "
              f"window means [{window_txt}] nonincreasing: {trend.nonincreasing}; runtime "
              f"{aware.seconds / 60:.1f} min (< 240)")
    ok = all(checks.values())
    record("6", ok, detail)
    assert ok, {k: v for k, v in checks.items() if not v}


def test_c07_blind_weaker_than_aware(aware, blind, baseline):
    _require_report("7", aware)
    _require_report("7", blind)
    r_aware = ncc_reduction(aware.report, baseline)
    r_blind = ncc_reduction(blind.report, baseline)
    ok = r_blind <= r_aware
    record("7", ok, f"|NCC| reduction blind {r_blind:.2%} <= aware {r_aware:.2%} "
                    f"(blind AUC {blind.report.auc:.3f}, aware AUC {aware.report.auc:.3f})")
    assert ok


def test_c08_edge_region_sign(aware):
    _require_report("8", aware)
    change = aware.report.edge_auc_relative_change
    ok = change is not None and change <= 0
    record("8", ok, f"edge AUC {aware.report.edge_auc} vs full {aware.report.auc:.4f}, "
                    f"relative change {change} (<= 0)", soft=True)
    if not ok:
        pytest.xfail(f"soft criterion: edge AUC relative change {change} > 0")


def test_c09_determinism(aware, corpus):
    again = run_mode(corpus, AWARE, EXPERIMENT)
    same_images = aware.run.anonymized.keys() == again.run.anonymized.keys() and all(
        np.array_equal(aware.run.anonymized[i], again.run.anonymized[i])
        for i in aware.run.anonymized)
    same_traces = aware.run.traces == again.run.traces
    same_reports = (aware.report is not None and again.report is not None
                    and aware.report.to_json() == again.report.to_json())
    ok = same_images and same_traces and same_reports
    record("9", ok, f"rerun with identical seeds: images bitwise equal {same_images}, traces "
                    f"equal {same_traces}, reports equal {same_reports}")
    assert ok


def test_c10_roc_auc_properties():
    start = time.perf_counter()
    rng = np.random.default_rng(10)
    perfect = auc_from_scores([0.9, 0.8, 0.7], [0.1, 0.2])
    same = rng.normal(size=20)
    identical = auc_from_scores(same, same)
    worst_pairs = worst_complement = 0.0
    for _ in range(200):
        n_pos, n_neg = rng.integers(1, 51, size=2)
        pos = rng.integers(-10, 10, size=n_pos).astype(float)
        neg = rng.integers(-10, 10, size=n_neg).astype(float)
        worst_pairs = max(worst_pairs, abs(auc_from_scores(pos, neg) - pair_count_auc(pos, neg)))
        u_pos, u_neg = rng.normal(size=n_pos), rng.normal(size=n_neg)
        worst_complement = max(worst_complement, abs(
            auc_from_scores(u_pos, u_neg) + auc_from_scores(u_neg, u_pos) - 1.0))
    pairs = ([ScorePair(str(i), "d", v, Population.POSITIVE) for i, v in enumerate(u_pos)]
             + [ScorePair(str(i), "d", v, Population.NEGATIVE) for i, v in enumerate(u_neg)])
    curve = roc_auc(pairs)
    area_err = abs(np.trapezoid(curve.tpr, curve.fpr) - curve.auc)
    elapsed = time.perf_counter() - start
    ok = (perfect == 1.0 and identical == 0.5 and worst_pairs < 1e-12
          and worst_complement < 1e-12 and area_err < 1e-12 and elapsed < 10)
    record("10", ok, f"perfect {perfect}, identical {identical}, max |AUC - pair count| "
                     f"{worst_pairs:.1e}, max complement error {worst_complement:.1e}, ROC area "
                     f"error {area_err:.1e}; {elapsed:.2f} s (< 10 s)")
    assert ok
