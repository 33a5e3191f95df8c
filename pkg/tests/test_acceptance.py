"""End-to-end acceptance checks at their stated tolerances.

Each test records one PASS/FAIL line (printed during the test and again in
the terminal summary).  Monte Carlo checks use fixed seeds.
"""

import math
import time

import numpy as np
import pytest

from cgmc.chaos import ChaosParams, TestFunction, critical_p, zeta
from cgmc.cli import main
from cgmc.fields import Grid, star_sampler
from cgmc.kernels import CutoffSchedule, doubling_constant, sigma2_with_error, triangle
from cgmc.lqg import (
    PlanarDomain,
    circle_average,
    conformal_invariance_first_moment,
    conformal_radius,
    conformal_radius_from_green,
    corrected_conformal_radius_from_green,
    disk_automorphism,
    disk_bump,
    gff_sample_basis,
    kpz_check,
    sc_constant,
    tachyon_condition,
)
from cgmc.matching import matched_product_bound_check, optimal_matching, sample_identity_matched
from cgmc.moments import (
    batch_means,
    gaussianity_ratio,
    martingale_increments,
    mc_absolute_moment,
    mc_mean,
    multifractal_fit,
    renormalized_conditional_moment,
    renormalized_second_moment,
    sample_chaos_values,
    stabilization,
    wick_mass,
)
from oracles import mutual_closest_rounds

TRI = triangle()
PHASE_I = ChaosParams(1, 0.5, 0.3)
PHASE_III = ChaosParams(1, 0.3, 1.2)
FRONTIER_I_III = ChaosParams(1, 0.3, math.sqrt(1 - 0.09))
MF_RADII = [2.0**-k for k in range(2, 7)]


@pytest.fixture(scope="module")
def phase_one_samples():
    """One pass of 10^4 replicas shared by the mean and the multifractal checks."""
    sampler = star_sampler(TRI, Grid(1, 1.0, 4096), CutoffSchedule.geometric(8))
    phis = [TestFunction((0.5,), 0.4)] + [TestFunction((0.5,), r, "indicator", "box") for r in MF_RADII]
    return sampler, sample_chaos_values(sampler, PHASE_I, phis, 10_000, 2024, chunk=250)


def test_01_zeta_critical_p(report):
    t0 = time.perf_counter()
    worst = 0.0
    for g in np.linspace(0.1, 1.3, 25):
        for b in np.linspace(0.0, 0.6, 13):
            pc = critical_p(ChaosParams(1, g, b))
            if pc.finite:
                worst = max(worst, abs(zeta(ChaosParams(1, g, b), pc.value) - 1.0))
    for g in np.linspace(0.1, 1.9, 19):
        p = ChaosParams(2, g, 0.5)
        pc = critical_p(p)
        if pc.finite:
            worst = max(worst, abs(zeta(p, pc.value) - 2.0))
    fx = ChaosParams(1, 1.0, math.sqrt(2) - 1)
    pc = critical_p(fx)
    fixture = abs(pc.value - math.sqrt(2)) < 1e-7 and abs(zeta(fx, math.sqrt(2)) - 1) < 1e-12
    dt = time.perf_counter() - t0
    ok = report("1", worst <= 1e-12 and fixture and dt < 1, f"max|zeta(p_c)-d|={worst:.1e}, p_c={pc.value:.12f}, {dt:.2f}s")
    assert ok


def test_02_sigma2_closed_forms(report):
    t0 = time.perf_counter()

    def closed(s):
        return 2 * ((1 - math.exp(-s)) / s + math.exp(-s) / (s - 1))

    v1, _ = sigma2_with_error(TRI, 1.0)
    v2, _ = sigma2_with_error(TRI, 2.0)
    e1, e2 = abs(v1 - 2 / math.e), abs(v2 - (1 + math.exp(-2)))
    e3 = abs(sigma2_with_error(TRI, 2.0)[0] - closed(2.0))
    dt = time.perf_counter() - t0
    ok = report("2", max(e1, e2, e3) < 1e-6 and dt < 1, f"|err| s=1: {e1:.1e}, s=2: {e2:.1e}, {dt:.2f}s")
    assert ok


def test_03_field_covariances(report):
    sched = CutoffSchedule.geometric(8)
    sampler = star_sampler(TRI, Grid(1, 1.0, 4096), sched)
    n, centre = 2000, 2048
    vals = np.concatenate([sampler.sample(31, range(c, c + 250)).values[:, :, centre] for c in range(0, n, 250)])
    J = len(sched)
    bad = []
    for i in range(J):
        for j in range(i, J):
            m, se = batch_means(vals[:, i] * vals[:, j])
            target = math.log(1 / sched.levels[i])  # K at the coarser cutoff
            if abs(m - target) > 3 * se:
                bad.append(f"cov({i},{j})")
            if j > i:
                inc = vals[:, j] - vals[:, i]
                m2, se2 = batch_means(inc * vals[:, i])
                if abs(m2) > 3 * se2:
                    bad.append(f"inc({i},{j})")
    ok = report("3", not bad, f"{J} variances, {J * (J - 1) // 2} cross and increment pairs, outside 3se: {bad or 'none'}")
    assert ok


def test_04_phase_one_mean_and_martingale(report, phase_one_samples):
    sampler, samples = phase_one_samples
    mass = samples.phis[0].mass(sampler.grid)
    means = mc_mean(samples, 0)
    dev = [abs(e.value - mass) / e.stderr for e in means]
    inc = [abs(e.value) / e.stderr for e in martingale_increments(samples, 0)]
    ok = report("4", max(dev) <= 3 and max(inc) <= 3, f"max |mean - mass|/se = {max(dev):.2f}, max |increment|/se = {max(inc):.2f}")
    assert ok


def test_05_multifractal_exponent(report, phase_one_samples):
    _, samples = phase_one_samples
    ests = [(r, mc_absolute_moment(samples, 2.0, i + 1)[-1]) for i, r in enumerate(MF_RADII)]
    fit = multifractal_fit(ests, 2.0)
    target = zeta(PHASE_I, 2.0)
    ok = report("5", abs(fit.slope - target) <= 0.15, f"slope {fit.slope:.4f} +- {fit.slope_stderr:.4f} vs zeta(2) = {target:.2f}")
    assert ok


def test_06_phase_three_second_moment(report):
    from cgmc.kernels import sigma2

    s2 = sigma2(TRI, PHASE_III.s)
    quad = [renormalized_second_moment(TRI, PHASE_III, 2.0**-j, (0.0, 1.0)).value for j in range(6, 11)]
    stab = stabilization(quad)
    sampler = star_sampler(TRI, Grid(1, 1.0, 4096), CutoffSchedule.geometric(8))
    phi = TestFunction.interval(0.0, 1.0)
    cm, wm = [], []
    for c in range(0, 1000, 125):
        f = sampler.sample(66, range(c, c + 125))
        cm.append(renormalized_conditional_moment(f, PHASE_III, 7, (0.0, 1.0)))
        wm.append(wick_mass(f, 2 * PHASE_III.gamma, 7, phi))
    ratio = float(np.mean(np.concatenate(cm)) / (s2 * np.mean(np.concatenate(wm))))
    ok = report(
        "6", stab < 0.10 and abs(ratio - 1) < 0.15,
        f"quadrature/sigma2 {[round(v / s2, 4) for v in quad[-3:]]}, last-3 change {stab:.3f}; MC ratio {ratio:.4f}",
    )
    assert ok


def test_07_frontier_one_three(report):
    vals = [renormalized_second_moment(TRI, FRONTIER_I_III, 2.0**-j, (0.0, 1.0)).value for j in range(6, 11)]
    stab = stabilization(vals)
    ok = report("7", stab < 0.10, f"values {[round(v, 4) for v in vals[-3:]]}, last-3 change {stab:.3f}")
    assert ok


def test_08_gaussianity_ratios(report):
    # a 1/16 window at spacing 2^-10 keeps the 4-fold quadrature at 64 nodes per slot
    sampler = star_sampler(TRI, Grid(1, 1 / 16, 64), CutoffSchedule.geometric(8))
    field_ = sampler.sample(7, 200)
    region = (0.0, 1 / 16)
    r11 = gaussianity_ratio(field_, PHASE_III, 7, 1, 1, region)
    r22 = float(np.median(gaussianity_ratio(field_, PHASE_III, 7, 2, 2, region).real))
    r21 = [float(np.median(np.abs(gaussianity_ratio(field_, PHASE_III, j, 2, 1, region)))) for j in (5, 6, 7)]
    ok = (
        bool(np.all(r11 == 1.0))
        and abs(r22 - 2) <= 0.2 * 2
        and r21[-1] < 0.3
        and r21[0] > r21[1] > r21[2]
    )
    report("8", ok, f"k=k'=1 exact: {bool(np.all(r11 == 1.0))}; k=k'=2 median {r22:.3f}; |k=2,k'=1| medians {[round(v, 3) for v in r21]}")
    assert ok


def test_09_matching(report):
    t0 = time.perf_counter()
    rng = np.random.default_rng(99)
    mismatch = 0
    for _ in range(1000):
        k = int(rng.integers(1, 5))
        kp = int(rng.integers(k, 6))
        xs, ys = rng.uniform(0, 1, k), rng.uniform(0, 1, kp)
        if dict(enumerate(optimal_matching(xs, ys).assignment)) != mutual_closest_rounds(list(xs), list(ys)):
            mismatch += 1
    eps, beta = 2**-8, 1.2
    c1 = doubling_constant(TRI, eps)
    fails = 0
    for _ in range(1000):
        xs, ys = sample_identity_matched(rng, int(rng.integers(1, 5)))
        fails += not matched_product_bound_check(TRI, eps, beta, xs, ys, c1=c1).ok
    dt = time.perf_counter() - t0
    ok = report("9", mismatch == 0 and fails == 0 and dt < 10, f"oracle mismatches {mismatch}/1000, bound failures {fails}/1000, C1={c1:.5f}, {dt:.1f}s")
    assert ok


def test_10_lqg_identities(report):
    t0 = time.perf_counter()
    kpz = max(abs(kpz_check(float(b)).residual) for b in np.linspace(0, 1, 100, endpoint=False))
    a, b, c = tachyon_condition(1.5, 0.5), tachyon_condition(2.0, 0.0), tachyon_condition(1.0, 1.0)
    classes = a.satisfied and a.admissible and b.satisfied and b.special and c.satisfied and not c.admissible
    _, dpsi, inv = disk_automorphism(0.4 + 0.2j)
    phi = disk_bump(0.1, 0.5)
    tach = conformal_invariance_first_moment(inv, dpsi, 1.5, 0.5, phi).residual
    ctrl = conformal_invariance_first_moment(inv, dpsi, 1.5, 0.3, phi).residual
    dt = time.perf_counter() - t0
    ok = kpz == 0 and classes and tach < 1e-8 and ctrl > 1e-3 and dt < 10
    report("10", ok, f"KPZ max residual {kpz}, tachyon residual {tach:.1e}, control residual {ctrl:.2e}, {dt:.2f}s")
    assert ok


def test_11a_disk_conformal_radius(report):
    rng = np.random.default_rng(1)
    disk = PlanarDomain("unit_disk")
    pts = rng.uniform(-0.7, 0.7, 200) + 1j * rng.uniform(-0.7, 0.7, 200)
    err = max(abs(conformal_radius(disk, x) - (1 - abs(x) ** 2)) for x in pts)
    ok = report("11a", err < 1e-10, f"max error {err:.1e}")
    assert ok


@pytest.mark.xfail(strict=True, reason="eps exp(g_eps) tends to exp((euler_gamma - log 2)/2) C, about 5.6% below C")
def test_11b_square_green_radius(report):
    sq = PlanarDomain("unit_square")
    ce = conformal_radius_from_green(sq, complex(0.5, 0.5), 2**-7)
    rel = abs(ce / sc_constant() - 1)
    ok = report("11b", rel <= 0.05, f"C_eps/C = {ce / sc_constant():.10f} at eps=2^-7 (relative gap {rel:.4f})")
    assert ok


def test_11b_corrected_square_green_radius(report):
    sq = PlanarDomain("unit_square")
    ce = corrected_conformal_radius_from_green(sq, complex(0.5, 0.5), 2**-7)
    rel = abs(ce / sc_constant() - 1)
    ok = report("11b*", rel <= 0.05, f"offset-corrected C_eps/C = {ce / sc_constant():.10f}")
    assert ok


def test_11c_circle_average_slope(report):
    J, n, chunk = 512, 2000, 50
    ax = np.linspace(0.2, 0.8, 4)
    centres = np.array([complex(a, b) for a in ax for b in ax])
    radii = [2.0**-k for k in range(3, 8)]
    acc = np.zeros(len(radii))
    for c in range(0, n, chunk):
        s = gff_sample_basis(J, 11, range(c, c + chunk))
        for i, r in enumerate(radii):
            v = circle_average(s, centres, r)
            acc[i] += np.sum(v * v)
    var = acc / (n * len(centres))
    slope = np.polyfit(np.log(1 / np.array(radii)), var, 1)[0]
    ok = report("11c", abs(slope - 1) <= 0.05, f"slope {slope:.4f} over radii 2^-3..2^-7")
    assert ok


def test_12_determinism(report, tmp_path):
    cfg = tmp_path / "run.ini"
    cfg.write_text(
        "[kernel]\nname = triangle\n[grid]\nn_points = 1024\n[schedule]\nn_levels = 6\n"
        "[params]\ngamma = 0.5\nbeta = 0.3\n[mc]\nn_replicas = 256\nchunk = 64\n"
        "[experiment]\nq = 2\nmethod = both\nregion = 0.25 0.75\n"
    )
    same = True
    for cmd in ("moments", "sample", "multifractal"):
        bodies = []
        for run in ("a", "b"):
            out = tmp_path / f"{cmd}_{run}"
            main([cmd, "--config", str(cfg), "--seed", "123", "--out", str(out), "--threads", "1"])
            bodies.append((out / "results.csv").read_bytes())
        same &= bodies[0] == bodies[1] and len(bodies[0]) > 0
    ok = report("12", same, "results.csv identical across reruns of moments, sample and multifractal")
    assert ok
