"""End-to-end acceptance gate.

Thirteen criteria, one test each, in order.  Every test appends a
[PASS]/[FAIL] verdict line (printed by conftest after the run) before
asserting, so the scoreboard is complete even when a criterion fails.
The large global run is shared between criteria 8 and 9 through a
module-scoped fixture.
"""

import time
import warnings

import numpy as np
import pytest
from scipy.linalg import expm
from scipy.special import erf  # noqa: F401  (kept for parity with flow tests)

from cnslab import dyadic, linearized
from cnslab.compressible import CnsIntegrator, CnsParams, CnsState, cns_run
from cnslab.flowmaps import (
    change_coords,
    flow_bound_ratios,
    flow_map,
    lagrangian_fixed_point_solve,
    piola_residual,
    pullback_divergence_residual,
)
from cnslab.fourier import SpectralField, lebesgue_norm, make_grid, random_field
from cnslab.harness import fit_decay_slope, run_experiment
from cnslab.paraproduct import bony_decompose, dealias_product

from conftest import ACCEPTANCE_LINES


def verdict(num, label, ok, detail):
    ACCEPTANCE_LINES.append(
        f"[{'PASS' if ok else 'FAIL'}] criterion {num:02d} {label}: {detail}")
    return ok


def test_criterion_01_partition_of_unity():
    t0 = time.perf_counter()
    worst = 0.0
    pair = dyadic.build_cutoffs()
    for M in (1.0, 8.0):
        grid = make_grid(2, 64, M)
        j_min, j_max = dyadic.resolvable_range(grid)
        rho = grid.xi_norm().ravel()
        worst = max(worst, pair.partition_defect(rho[rho > 0.0],
                                                 j_min - 2, j_max + 2))
    elapsed = time.perf_counter() - t0
    ok = worst <= 1e-10 and elapsed < 1.0
    assert verdict(1, "partition-of-unity", ok,
                   f"defect={worst:.2e} (<=1e-10), {elapsed:.2f}s (<1s)"), worst


def test_criterion_02_quasi_orthogonality():
    grid = make_grid(2, 64)
    j_min, j_max = dyadic.resolvable_range(grid)
    rng = np.random.default_rng(2)
    worst = 0.0
    for _ in range(20):
        u = random_field(grid, rng, amplitude=1.0)
        norm = u.l2()
        for j in range(j_min, j_max + 1):
            bj = dyadic.dyadic_block(u, j)
            for k in range(j + 2, j_max + 1):
                worst = max(worst, dyadic.dyadic_block(bj, k).l2() / norm)
    ok = worst <= 1e-12
    assert verdict(2, "quasi-orthogonality", ok,
                   f"max mixed-block ratio={worst:.2e} (<=1e-12), 20 fields"), worst


def test_criterion_03_bony_exactness():
    rng = np.random.default_rng(3)
    worst = 0.0
    for d, n in ((1, 64), (2, 48)):
        grid = make_grid(d, n)
        for _ in range(25):
            u = random_field(grid, rng, amplitude=float(rng.uniform(0.5, 2.0)))
            v = random_field(grid, rng, amplitude=float(rng.uniform(0.5, 2.0)))
            resid = (bony_decompose(u, v).total() - dealias_product(u, v)).l2()
            worst = max(worst, resid / (u.l2() * v.l2()))
    ok = worst <= 1e-10
    assert verdict(3, "bony-identity", ok,
                   f"max relative residual={worst:.2e} (<=1e-10), 50 pairs"), worst


def test_criterion_04_heat_block_decay():
    grid = make_grid(2, 64)
    j_min, j_max = dyadic.resolvable_range(grid)
    rng = np.random.default_rng(4)
    u = random_field(grid, rng, amplitude=1.0)
    worst_p2 = 0.0
    for j in range(j_min, j_max + 1):
        b = dyadic.dyadic_block(u, j)
        if b.l2() == 0.0:
            continue
        t = 0.05 / 4.0 ** j
        series, _ = linearized.heat_solve(b, None, np.array([0.0, t]))
        bound = np.exp(-(9.0 / 16.0) * 4.0 ** j * t) * b.l2()
        worst_p2 = max(worst_p2, series[-1].l2() / bound)
    consts = []
    for seed in (1, 2, 3, 4, 5):
        rng_s = np.random.default_rng(seed)
        f = random_field(grid, rng_s, amplitude=1.0)
        c_seed = 0.0
        for j in range(j_min, j_max + 1):
            b = dyadic.dyadic_block(f, j)
            n0 = lebesgue_norm(b, np.inf)
            if n0 == 0.0:
                continue
            for t in (0.01 / 4.0 ** j, 0.1 / 4.0 ** j):
                decayed = b.with_coeffs(b.coeffs * np.exp(-grid.xi_norm2() * t))
                c_seed = max(c_seed, lebesgue_norm(decayed, np.inf)
                             / (np.exp(-(9.0 / 16.0) * 4.0 ** j * t) * n0))
        consts.append(c_seed)
    consts = np.asarray(consts)
    spread = (consts.max() - consts.min()) / consts.mean()
    ok = worst_p2 <= 1.0 + 1e-12 and spread <= 0.2
    assert verdict(4, "heat-block-decay", ok,
                   f"p=2 ratio={worst_p2:.12f} (<=1), p=inf constant "
                   f"{consts.mean():.4f} spread={spread:.3f} (<=0.2)"), (worst_p2, spread)


def test_criterion_05_mode_eigenvalues():
    rho_grid = np.geomspace(1e-3, 50.0, 200)
    rho_grid = rho_grid[np.abs(rho_grid - 2.0) > 1e-3]
    worst_eig = 0.0
    for rho in rho_grid:
        spec = linearized.mode_spectrum(rho)
        lam_num = np.linalg.eigvals(linearized.mode_matrix(rho))
        cf = sorted([spec.lam_plus, spec.lam_minus], key=lambda z: (z.real, z.imag))
        nm = sorted(lam_num, key=lambda z: (z.real, z.imag))
        worst_eig = max(worst_eig, max(abs(a - b) for a, b in zip(cf, nm)))
    cont = 0.0
    for t in (0.1, 1.0, 5.0):
        for rho in (2.0 - 1e-4, 2.0, 2.0 + 1e-4):
            E = linearized.mode_semigroup_matrix(rho, t)
            cont = max(cont, float(np.max(np.abs(
                E - expm(linearized.mode_matrix(rho) * t)))))
    osc = rho_grid[rho_grid < 2.0]
    re_err = max(abs(linearized.mode_spectrum(r).lam_plus.real + r * r / 2.0)
                 for r in osc)
    ok = worst_eig <= 1e-11 and cont <= 1e-9 and re_err <= 1e-12
    assert verdict(5, "mode-eigenvalues", ok,
                   f"closed-form vs numeric={worst_eig:.2e} (<=1e-11), "
                   f"defective continuity={cont:.2e} (<=1e-9), "
                   f"Re=-rho^2/2 err={re_err:.2e}"), (worst_eig, cont, re_err)


def test_criterion_06_lyapunov_dissipation():
    rng = np.random.default_rng(42)
    rho = np.exp(rng.uniform(np.log(1e-2), np.log(1e2), 10000))
    A = rng.standard_normal(10000) + 1j * rng.standard_normal(10000)
    V = rng.standard_normal(10000) + 1j * rng.standard_normal(10000)
    res = linearized.lyapunov_dissipation_residual(A, V, rho)
    scale = 1.0 + rho ** 2 * (np.abs(A) ** 2 + np.abs(V) ** 2)
    worst = float(np.max(np.abs(res) / scale))
    worst_ratio = 0.0
    for r in np.geomspace(0.05, 20.0, 12):
        rep = linearized.lyapunov_decay_check(1.0 + 0.5j, -0.2j, r, T=4.0)
        worst_ratio = max(worst_ratio, rep["worst_bound_ratio"])
        assert rep["rate_c"] == linearized.LYAPUNOV_RATE_C > 0.0
    ok = worst <= 1e-9 and worst_ratio <= 1.0 + 1e-9
    assert verdict(6, "mode-lyapunov", ok,
                   f"identity residual={worst:.2e} (<=1e-9) on 1e4 modes, "
                   f"decay-bound ratio={worst_ratio:.10f} (<=1), "
                   f"frozen c={linearized.LYAPUNOV_RATE_C}"), (worst, worst_ratio)


def test_criterion_07_linear_decay_profiles():
    t0 = time.perf_counter()
    t_grid = np.geomspace(1.0, 1e3, 48)
    window = (10.0, 1e3)
    prof2 = linearized.linear_decay_profile(2, [0.0, 1.0], t_grid)
    s0, _ = fit_decay_slope(t_grid, prof2["curves"][0.0], window)
    s1, _ = fit_decay_slope(t_grid, prof2["curves"][1.0], window)
    prof3 = linearized.linear_decay_profile(3, [0.0], t_grid)
    s3, _ = fit_decay_slope(t_grid, prof3["curves"][0.0], window)
    elapsed = time.perf_counter() - t0
    ok = (abs(s0 + 0.50) <= 0.03 and abs(s1 + 1.00) <= 0.05
          and abs(s3 + 0.75) <= 0.04 and elapsed < 30.0)
    assert verdict(7, "energy-decay-rate", ok,
                   f"d=2 slopes {s0:.3f}/{s1:.3f} (want -0.50/-1.00), "
                   f"d=3 {s3:.3f} (want -0.75), {elapsed:.1f}s (<30s)"), (s0, s1, s3)


@pytest.fixture(scope="module")
def decay_report():
    t0 = time.perf_counter()
    report = run_experiment({"experiment": "decay", "seed": 1})
    return report, time.perf_counter() - t0


def test_criterion_08_global_small_data(decay_report):
    report, elapsed = decay_report
    checks = {c["name"]: c for c in report.checks}
    x_ratio = checks["x_ratio"]["value"]
    min_rho = checks["min_density"]["value"]
    mass = checks["mass_drift"]["value"]
    ok = (x_ratio <= 3.0 and min_rho >= 0.9 and mass <= 1e-10
          and elapsed < 600.0)
    assert verdict(8, "global-bound", ok,
                   f"X2 ratio={x_ratio:.3f} (<=3), min density={min_rho:.4f} "
                   f"(>=0.9), mass drift={mass:.2e} (<=1e-10), "
                   f"{elapsed:.0f}s (<600s)"), (x_ratio, min_rho, mass)


def test_criterion_09_nonlinear_decay(decay_report):
    report, _ = decay_report
    checks = {c["name"]: c for c in report.checks}
    slope = report.measured["slopes"]["l2"]["slope"]
    monotone = checks["tnablau_high_nonincreasing"]["passed"]
    ok = -0.75 <= slope <= -0.30 and monotone
    assert verdict(9, "nonlinear-decay", ok,
                   f"L2 slope={slope:.3f} (in [-0.75,-0.30]), "
                   f"t*grad(u) high-frequency monitor non-increasing after "
                   f"t=5: {monotone}"), (slope, monotone)


def test_criterion_10_iteration_contraction():
    report = run_experiment({"experiment": "local-scheme", "seed": 7,
                             "cross_check": True})
    checks = {c["name"]: c for c in report.checks}
    ratio = checks["asymptotic_ratio"]["value"]
    cross = checks["cross_solver_agreement"]["value"]
    ok = ratio <= 0.725 and cross <= 1e-4
    assert verdict(10, "iteration-contraction", ok,
                   f"asymptotic increment ratio={ratio:.3f} (<=0.725), "
                   f"cross-solver gap={cross:.2e} (<=1e-4)"), (ratio, cross)


def test_criterion_11_low_mach_sweep():
    report = run_experiment({"experiment": "low-mach", "seed": 4})
    checks = {c["name"]: c for c in report.checks}
    dec_q = checks["sup_Qu_strictly_decreasing"]["passed"]
    dec_e = checks["err_Pu_strictly_decreasing"]["passed"]
    exponent = report.measured["packet_norm_exponent"]
    ok = dec_q and dec_e and abs(exponent - 0.5) <= 0.2 * 0.5
    assert verdict(11, "lowmach-convergence", ok,
                   f"sup|Qu| and |Pu-v| strictly decreasing over "
                   f"eps={{0.2,0.1,0.05}}: {dec_q}/{dec_e}, data-norm "
                   f"exponent={exponent:.3f} (want 0.5 within 20%)"), (dec_q, dec_e)


def test_criterion_12_lagrangian_suite():
    grid = make_grid(2, 48)
    params = CnsParams()
    # deformation residuals and the coordinate round trip
    v = random_field(grid, np.random.default_rng(8), ncomp=2, amplitude=0.5,
                     band=4, mean_zero=True)
    t_grid = np.linspace(0.0, 0.2, 9)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        sl = flow_map([v] * 9, t_grid).final()
    piola = piola_residual(sl)
    H = random_field(grid, np.random.default_rng(9), ncomp=2, amplitude=1.0,
                     band=4, mean_zero=True)
    div_res = pullback_divergence_residual(H, sl)
    f = random_field(grid, np.random.default_rng(8), amplitude=1.0, band=4,
                     mean_zero=True)
    roundtrip = (change_coords(change_coords(f, sl, "to_lagrangian"), sl,
                               "to_eulerian") - f).l2() / f.l2()
    # time-resolved Lagrangian mass conservation against the Eulerian run
    x = grid.x_vectors()
    rho0 = SpectralField.from_samples(
        grid, 1.0 + 0.05 * np.sin(x[0]) * np.cos(x[1]))
    u0 = random_field(grid, np.random.default_rng(12), ncomp=2,
                      amplitude=0.05, band=3, mean_zero=True)
    T, n_t = 0.2, 9
    state, _ = lagrangian_fixed_point_solve(rho0, u0, params, T=T, n_t=n_t)
    a0 = SpectralField.from_samples(grid, rho0.samples() - 1.0)
    out = cns_run(CnsState(a0, u0), params, T=T, out_dt=T / (n_t - 1),
                  h=0.002, store=True)
    mass_worst = 0.0
    for i in range(n_t):
        sli = state.flow.slice(i)
        rho_eul = SpectralField.from_samples(
            grid, 1.0 + out["states"][i].a.samples())
        rho_bar = change_coords(rho_eul, sli, "to_lagrangian")
        mass_worst = max(mass_worst, float(np.max(np.abs(
            sli.J * rho_bar.samples() - rho0.samples()))))
    # deformation-bound constants across seeds (four draws averaged per seed)
    keys = ("adj_minus_id", "A_minus_id", "adjT_A_minus_id",
            "J_minus_1", "Jinv_minus_1")
    tg3 = np.linspace(0.0, 0.2, 3)
    per_seed = {}
    for seed in (3, 4, 5):
        rng_s = np.random.default_rng(seed)
        acc = dict.fromkeys(keys, 0.0)
        for _ in range(4):
            vv = random_field(grid, rng_s, ncomp=2, amplitude=0.05, band=6,
                              mean_zero=True)
            with warnings.catch_warnings():
                warnings.simplefilter("ignore")
                ratios = flow_bound_ratios(
                    flow_map([vv] * 3, tg3).final(), [vv] * 3, tg3)["ratios"]
            for k in keys:
                acc[k] += ratios[k] / 4.0
        per_seed[seed] = acc
    spread = 0.0
    bound_max = 0.0
    for k in keys:
        vals = np.array([per_seed[s][k] for s in (3, 4, 5)])
        spread = max(spread, (vals.max() - vals.min()) / vals.mean())
        bound_max = max(bound_max, vals.max())
    ok = (piola <= 1e-6 and div_res <= 1e-6 and mass_worst <= 1e-5
          and roundtrip <= 1e-4 and bound_max <= 2.0 and spread <= 0.30)
    assert verdict(12, "lagrangian-suite", ok,
                   f"piola={piola:.2e} (<=1e-6), div identity={div_res:.2e} "
                   f"(<=1e-6), d/dt(J rho)={mass_worst:.2e} (<=1e-5), "
                   f"roundtrip={roundtrip:.2e} (<=1e-4), flow-bound "
                   f"constants<= {bound_max:.3f} spread={spread:.3f} "
                   f"(<=0.30)"), (piola, div_res, mass_worst, roundtrip, spread)


def test_criterion_13_consistency_orders():
    grid = make_grid(2, 32)
    integ = CnsIntegrator(grid, CnsParams())
    rng = np.random.default_rng(6)
    a0 = random_field(grid, rng, amplitude=1.0, band=3, mean_zero=True)
    u0 = random_field(grid, rng, ncomp=2, amplitude=1.0, band=3, mean_zero=True)
    h = 0.05
    prop = integ.propagator(h)
    amps = np.array([1e-3, 2e-3, 4e-3])
    devs = []
    for amp in amps:
        ah, uh = integ.step(amp * a0.coeffs, amp * u0.coeffs, h)
        al, ul = prop.apply(amp * a0.coeffs, amp * u0.coeffs)
        devs.append(np.sqrt(np.sum(np.abs(ah - al) ** 2)
                            + np.sum(np.abs(uh - ul) ** 2)))
    slope = float(np.polyfit(np.log(amps), np.log(devs), 1)[0])
    amp = 0.01
    ref_a, ref_u = amp * a0.coeffs, amp * u0.coeffs
    for _ in range(256):
        ref_a, ref_u = integ.step(ref_a, ref_u, 0.5 / 256)
    errs = []
    for h_i in (0.125, 0.0625, 0.03125):
        aa, uu = amp * a0.coeffs, amp * u0.coeffs
        for _ in range(int(round(0.5 / h_i))):
            aa, uu = integ.step(aa, uu, h_i)
        errs.append(np.sqrt(np.sum(np.abs(aa - ref_a) ** 2)
                            + np.sum(np.abs(uu - ref_u) ** 2)))
    orders = [float(np.log2(errs[i] / errs[i + 1])) for i in range(2)]
    ok = abs(slope - 2.0) <= 0.2 and all(abs(o - 2.0) <= 0.2 for o in orders)
    assert verdict(13, "consistency-order", ok,
                   f"nonlinear-deviation slope={slope:.3f} (2±0.2), "
                   f"step Richardson orders={orders[0]:.3f}/{orders[1]:.3f} "
                   f"(2±0.2)"), (slope, orders)
