"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

Run with ``pytest tests/test_acceptance.py -v``.  The per-criterion lines are
written with output capture disabled so they appear in the normal log.
"""
from __future__ import annotations

import itertools
import math
import time
import warnings

import numpy as np
import pytest

from belltest import coincidence as co
from belltest import distance as di
from belltest import sources as so
from belltest import stats as sm
from belltest.cli import main
from belltest.distance import BellValue
from belltest.timetags import SETTINGS, Dataset, SettingsPair

from oracles import assignment_edit_distance, brute_edit_distance

US = 6400
CLASSICAL_TRIALS = 36          # 36 trials x 3000 groups = 108,000 pulse groups
SHORT = sm.Protocol(training_size=8, retrain_every=8, retrain_window=16, predict_window=16,
                    pbr_update_every=4, pbr_window=16)


def verdict(capsys, n, ok, detail):
    with capsys.disabled():
        print(f"\ncriterion {n}: {'PASS' if ok else 'FAIL'}  {detail}")
    assert ok, detail


@pytest.fixture(scope="module")
def classical_runs():
    cfg = so.ClassicalSourceConfig()
    runs = []
    for seed in range(10):
        t0 = time.perf_counter()
        ds = so.simulate_classical_dataset(cfg, CLASSICAL_TRIALS, seed=seed)
        b = co.bell_ch(co.detection_centered_counts(ds, 2 * US)).b_ch
        runs.append((ds, b, time.perf_counter() - t0))
    return runs


# 1 ------------------------------------------------------------------------------------

def test_criterion_1_loophole(classical_runs, capsys):
    vals = [b for _, b, _ in classical_runs]
    mean = float(np.mean(vals))
    slowest = max(t for _, _, t in classical_runs)
    ok = 0.45 <= mean <= 0.50 and slowest < 60
    verdict(capsys, 1, ok, f"mean B_CH={mean:.4f} over 10 runs (range {min(vals):.4f}.."
                           f"{max(vals):.4f}), slowest run {slowest:.2f} s")


# 2 ------------------------------------------------------------------------------------

def test_criterion_2_sweep(classical_runs, capsys):
    ds = classical_runs[0][0]
    radii = list(range(320, 32001, 320))
    pts = co.window_sweep(ds, "detection-centered", radii)
    r = np.array([p.radius for p in pts])
    b = np.array([p.b_ch for p in pts])
    low = b[r < 0.9 * US]
    mid = b[(r >= 1.1 * US) & (r <= 2.9 * US)]
    high = b[r > 3.5 * US]
    ok = low.max() <= -0.9 and mid.min() > 0 and np.abs(high).max() < 0.05
    verdict(capsys, 2, ok, f"r<0.9us max {low.max():.4f}; 1.1-2.9us min {mid.min():.4f}; "
                           f">3.5us max|B| {np.abs(high).max():.4f}")


# 3 ------------------------------------------------------------------------------------

def test_criterion_3_predefined(classical_runs, capsys):
    ds = classical_runs[0][0]
    widths = np.arange(64, 64001, 64)                 # 10 ns steps up to the sync period
    pts = co.window_sweep(ds, "predefined", [int(w // 2) for w in widths],
                          sync_period=10 * US, recenter_every=500, pulse_spacing=US)
    b = np.array([p.b_ch for p in pts])
    in_range = b.min() >= -1.05 and b.max() <= 0.02
    tol = 0.2 * US             # +-0.1 us softness on the half-width, as in criterion 2
    zero_lo = b[widths <= US - tol]
    minus = b[(widths >= US + tol) & (widths <= 3 * US - tol)]
    zero_hi = b[widths >= 3 * US + tol]
    plateaus = (np.abs(zero_lo).max() < 0.05 and minus.max() < -0.95
                and np.abs(zero_hi).max() < 0.05)
    verdict(capsys, 3, in_range and plateaus,
            f"B_CH in [{b.min():.4f}, {b.max():.4f}]; plateaus: <1us max|B| "
            f"{np.abs(zero_lo).max():.4f}, 1-3us max {minus.max():.4f}, >3us max|B| "
            f"{np.abs(zero_hi).max():.4f}")


# 4 ------------------------------------------------------------------------------------

def test_criterion_4_distance_soundness(capsys):
    cfg = so.ClassicalSourceConfig()
    failures, totals = [], []
    for seed in range(20):
        ds = so.simulate_classical_dataset(cfg, CLASSICAL_TRIALS, seed=100 + seed)
        rep = sm.run_pipeline(ds, SHORT)
        totals.append(rep.total)
        if not (rep.total <= 0 and rep.log2_p == 0.0):
            failures.append((seed, rep.total, rep.log2_p))
    verdict(capsys, 4, not failures,
            f"20 seeds, failures={failures}, totals in [{min(totals):.1f}, {max(totals):.1f}]")


# 5 ------------------------------------------------------------------------------------

def test_criterion_5_tunability(capsys):
    out, ok = [], True
    for k, th in enumerate((math.pi / 12, math.pi / 8, math.pi / 6, math.pi / 4)):
        cfg = so.tune_for_theta(th)
        ds = so.simulate_classical_dataset(cfg, 180, seed=50 + k)
        b = co.bell_ch(co.detection_centered_counts(ds, 2 * US)).b_ch
        q = so.quantum_ch_max(th)
        ok &= abs(b - q) <= 0.01
        out.append(f"theta={th:.4f}: B={b:.4f} vs {q:.4f}")
    qmax = so.quantum_ch_max(math.pi / 4)
    ok &= abs(qmax - 0.20711) <= 1e-4
    verdict(capsys, 5, ok, "; ".join(out) + f"; quantum_ch_max(pi/4)={qmax:.6f}")


# 6 ------------------------------------------------------------------------------------

def _contiguous_sweep(ds, radii):
    return co.window_sweep(ds, "predefined", radii, sync_period=None)


def test_criterion_6_genuine_violation(capsys):
    t0 = time.perf_counter()
    cfg = so.QuantumSourceConfig(theta=math.pi / 4, efficiency_a=0.75, efficiency_b=0.75,
                                 jitter_sigma=64)
    ds = so.simulate_quantum_dataset(cfg, 3000, seed=2024)
    rep = sm.run_pipeline(ds, sm.Protocol())
    radii = [int(r) for r in np.unique(np.geomspace(32, 300000, 60).astype(int))]
    best = max(p.b_ch for p in _contiguous_sweep(ds, radii))
    elapsed = time.perf_counter() - t0
    ok = rep.total > 0 and rep.snr > 5 and rep.log2_p > 20 and best <= 0 and elapsed < 600
    verdict(capsys, 6, ok,
            f"total={rep.total:.2f} SNR={rep.snr:.2f} log2p={rep.log2_p:.2f}; "
            f"max predefined B_CH={best:.4f}; {elapsed:.0f} s; quantum CH at this efficiency "
            f"is {so.quantum_ch_max(math.pi / 4, 0.75):.4f}")


def test_violation_in_attainable_regime(capsys):
    """The criterion-6 phenomenon where it is physically reachable."""
    cfg = so.QuantumSourceConfig(theta=0.6, efficiency_a=0.85, efficiency_b=0.85,
                                 pair_rate=20000, jitter_sigma=64, latency_b=2 * US,
                                 dark_rate=100)
    ds = so.simulate_quantum_dataset(cfg, 3000, seed=2024)
    rep = sm.run_pipeline(ds, sm.Protocol(offset_window=16000))
    radii = [int(r) for r in np.unique(np.geomspace(32, 300000, 60).astype(int))]
    best = max(p.b_ch for p in _contiguous_sweep(ds, radii))
    ok = rep.total > 0 and rep.snr > 5 and rep.log2_p > 20 and best <= 0
    with capsys.disabled():
        print(f"\nattainable regime: {'PASS' if ok else 'FAIL'}  total={rep.total:.2f} "
              f"SNR={rep.snr:.2f} log2p={rep.log2_p:.2f} max predefined B_CH={best:.4f}")
    assert ok


# 7 ------------------------------------------------------------------------------------

MEANS = np.array([0.4, -0.3, 0.1, 0.6])     # settings-conditional means of the i.i.d. source


def _iid_run(rng, n_train=20, n=200, window=50):
    s = rng.integers(0, 4, n_train + n)
    v = MEANS[s] + rng.choice([-1.0, 0.5, 0.5], size=s.size)   # mean-zero, skewed noise
    state = sm.EstimatorState.with_window(window)
    state.prediction_buffer.extend(zip(s[:n_train], v[:n_train]))
    incs = np.empty(n)
    for k in range(n):
        i = n_train + k
        pred = sm.predict(state.prediction_buffer)
        before = state.b_hat
        sm.estimator_update(state, pred, BellValue(float(v[i]), SettingsPair(*SETTINGS[s[i]])))
        incs[k] = state.b_hat - before
    return state.b_hat, state.u_hat, incs


def test_criterion_7_estimator(capsys):
    rng = np.random.default_rng(7)
    runs = [_iid_run(rng) for _ in range(500)]
    b = np.array([r[0] for r in runs])
    u = np.array([r[1] for r in runs])
    inc = np.array([r[2] for r in runs])
    n = inc.shape[1]
    truth = n * MEANS.mean()
    se = b.std(ddof=1) / math.sqrt(len(b))
    unbiased = abs(b.mean() - truth) <= 3 * se
    # E[u_hat] >= Var(b_hat); the sample variance itself has spread, so compare one-sided
    # against the standard error of (var - mean u_hat), estimated by bootstrap
    boot = np.random.default_rng(70).integers(0, len(b), (2000, len(b)))
    diff = b[boot].var(axis=1, ddof=1) - u[boot].mean(axis=1)
    biased_high = b.var(ddof=1) - u.mean() <= 3 * diff.std(ddof=1)
    pairs = [(i, j) for i, j in itertools.combinations(range(0, n, 20), 2)]
    corr = max(abs(np.corrcoef(inc[:, i], inc[:, j])[0, 1]) for i, j in pairs)
    uncorrelated = corr < 4.5 / math.sqrt(len(b))
    # strict causality on the full pipeline
    qcfg = so.QuantumSourceConfig(theta=0.6, efficiency_a=0.9, efficiency_b=0.9,
                                  pair_rate=20000, jitter_sigma=16)
    ds = so.simulate_quantum_dataset(qcfg, 90, seed=6)
    proto = sm.Protocol(training_size=30, retrain_every=20, retrain_window=30,
                        predict_window=30, pbr_update_every=5, pbr_window=30)
    base = sm.run_pipeline(ds, proto).rows
    causal = True
    for cut in (40, 55, 70):
        tail = ds.trials[cut + 1:]
        perm = [tail[j] for j in np.random.default_rng(cut).permutation(len(tail))]
        rows = sm.run_pipeline(Dataset(ds.trials[:cut + 1] + perm, ds.metadata), proto).rows
        k = cut + 1 - proto.training_size
        causal &= rows[:k] == base[:k]
    ok = unbiased and biased_high and uncorrelated and causal
    verdict(capsys, 7, ok,
            f"mean b_hat {b.mean():.3f} vs {truth:.3f} (3se {3 * se:.3f}); mean u_hat "
            f"{u.mean():.2f} vs var {b.var(ddof=1):.2f} (3se {3 * diff.std(ddof=1):.2f}); max|corr| {corr:.3f}; "
            f"no-lookahead {causal}")


# 8 ------------------------------------------------------------------------------------

NULL_MEANS = np.array([-0.5, -0.5, -0.5, 1.5])   # settings average exactly 0: boundary null


def _null_run(rng, n_train=20, n=100, L=2.0):
    state = sm.PbrState(update_every=5, window=20)
    s = rng.integers(0, 4, n_train + n)
    v = np.clip(NULL_MEANS[s] + rng.choice([-0.5, 0.5], size=s.size), -L, None)
    state.training_buffer.extend(zip(s[:n_train].tolist(), v[:n_train].tolist()))
    state.reoptimize(L)
    for i in range(n_train, n_train + n):
        sm.pbr_update(state, float(v[i]), L, int(s[i]))
    return state.bound, state.min_factor


def test_criterion_8_pbr_validity(capsys):
    rng = np.random.default_rng(8)
    res = [_null_run(rng) for _ in range(2000)]
    bounds = np.array([r[0] for r in res])
    min_factor = min(r[1] for r in res)
    freqs = {k: float(np.mean(bounds >= k)) for k in range(3, 9)}
    ok = all(f <= 2.0 ** -k for k, f in freqs.items()) and min_factor >= 0
    verdict(capsys, 8, ok, "P(bound>=k): " + ", ".join(f"{k}:{f:.4f}" for k, f in freqs.items())
            + f"; min test factor {min_factor:.4f}")


# 9 ------------------------------------------------------------------------------------

def test_criterion_9_distance_math(capsys):
    rng = np.random.default_rng(9)
    violations = 0
    for _ in range(100_000):
        d = rng.uniform(0.2, 3)
        p = di.DistanceParams.from_window(rng.uniform(0.5, 40), cap=2 * d * rng.uniform(0.05, 1),
                                          del_cost=d, gamma=rng.uniform(0, 1),
                                          delta=rng.uniform(0, 1))
        x, y, z, w = (rng.integers(0, 40, rng.integers(0, 6)) for _ in range(4))
        m = di.timetag_metric
        dxy = m(x, y, p)
        violations += dxy < 0
        violations += abs(dxy - m(y, x, p)) > 1e-9
        violations += (dxy == 0) != (sorted(x) == sorted(y))
        violations += dxy > m(x, z, p) + m(z, y, p) + 1e-9
        # twice-iterated triangle with (a0, a1, b0, b1) = (z, x, w, y)
        violations += di.distance(1, 1, x, y, p) > (di.distance(1, 0, x, w, p)
                                                     + di.distance(0, 0, z, w, p)
                                                     + di.distance(0, 1, z, y, p)) + 1e-9
    # DP versus exact matching: every pair of <= 6-tag subsets of a 10-point grid
    p = di.DistanceParams.from_window(3.0, cap=1.5)
    subsets = [c for k in range(7) for c in itertools.combinations(range(10), k)]
    mismatches = 0
    for i, x in enumerate(subsets):
        for y in subsets[i:]:
            want = assignment_edit_distance(x, y, p.del_cost, p.shift_rate, p.cap)
            mismatches += abs(di.timetag_metric(x, y, p) - want) > 1e-9
    sample = rng.choice(len(subsets), size=(300, 2))
    for i, j in sample:
        x, y = subsets[i], subsets[j]
        want = brute_edit_distance(x, y, p.del_cost, p.shift_rate, p.cap)
        mismatches += abs(di.timetag_metric(x, y, p) - want) > 1e-9
    # deterministic local-realist bound, exhaustive over <= 3 tags on a 4-point grid
    grid = (0, 2, 5, 11)
    seqs = [c for k in range(4) for c in itertools.combinations_with_replacement(grid, k)]
    worst = -math.inf
    for q in (di.DistanceParams.from_window(4.0), di.DistanceParams.from_window(9.0, cap=1.0),
              di.DistanceParams.from_window(2.0, cap=0.7, gamma=0.2, delta=0.1)):
        mm = np.array([[di.timetag_metric(x, y, q) for y in seqs] for x in seqs])
        l11, lo = mm - q.gamma, mm + q.delta
        for a1 in range(len(seqs)):
            t = l11[a1][None, None, :] - lo[a1][None, :, None] - lo[:, :, None] - lo[:, None, :]
            worst = max(worst, float(t.max()) / 4)
    ok = violations == 0 and mismatches == 0 and worst <= 1e-12
    verdict(capsys, 9, ok, f"axiom/triangle violations={violations} in 1e5 cases; "
                           f"DP mismatches={mismatches} over {len(subsets)}^2/2 pairs; "
                           f"max LR Bell value {worst:.3g}")


# 10 -----------------------------------------------------------------------------------

def test_criterion_10_conversion(capsys):
    g33, g269 = sm.gaussian_equivalent(33), sm.gaussian_equivalent(269)
    ok = abs(g33 - 6.3) <= 0.05 and abs(g269 - 19) <= 0.5
    verdict(capsys, 10, ok, f"gaussian_equivalent(33)={g33:.3f}, (269)={g269:.3f}")


# 11 -----------------------------------------------------------------------------------

def _pipeline(root):
    root.mkdir(exist_ok=True)
    cfg = root / "run.txt"
    cfg.write_text("training_size=8\nretrain_every=8\nretrain_window=16\npredict_window=16\n"
                   "pbr_update_every=4\npbr_window=16\n")
    data = root / "dataset.csv"
    assert main(["simulate", "--source", "classical", "--seed", "11", "--trials", "12",
                 "--out", str(root)]) == 0
    assert main(["analyze", "--data", str(data), "--method", "detection-centered",
                 "--out", str(root / "dc")]) == 0
    assert main(["analyze", "--data", str(data), "--method", "pbr", "--config", str(cfg),
                 "--out", str(root / "pbr")]) == 0
    assert main(["sweep", "--data", str(data), "--grid", "640:19200:640",
                 "--out", str(root / "sw")]) == 0
    qdir = root / "q"
    assert main(["simulate", "--source", "quantum", "--seed", "11", "--trials", "30",
                 "--out", str(qdir)]) == 0
    qcfg = root / "q.txt"
    qcfg.write_text("training_size=20\n")
    assert main(["analyze", "--data", str(qdir / "dataset.csv"), "--method", "distance",
                 "--config", str(qcfg), "--out", str(qdir / "dist")]) == 0
    return {p.relative_to(root): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


def test_criterion_11_reproducibility(tmp_path, capsys):
    a = _pipeline(tmp_path / "run")
    b = _pipeline(tmp_path / "run")        # same paths, outputs overwritten
    csvs = [k for k in a if k.suffix == ".csv"]
    same = a.keys() == b.keys() and all(a[k] == b[k] for k in a)
    verdict(capsys, 11, same and len(csvs) >= 6,
            f"{len(a)} output files ({len(csvs)} CSV) byte-identical: {same}")
