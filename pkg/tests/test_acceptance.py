"""Acceptance criteria, one test per criterion, each reporting a PASS/FAIL line.

The reconstruction criteria run the shipped case configurations end to end and
take several minutes.
"""

import math

import numpy as np
import pytest

from westervelt import experiments as ex
from westervelt.admissibility import check_admissibility, laplace_A
from westervelt.fem import assemble, generate_disk_mesh
from westervelt.forward import ExcitationSpec, ParameterSet, build_source, solve_forward
from westervelt.harmonics import project_product
from westervelt.inversion import contrast_centroid, stopping_index
from westervelt.sensitivity import FrozenLinearization
from westervelt.verification import random_interior_point, range_suite, taylor_suite

from test_fem import manufactured_error
from test_forward import bessel_error, second_harmonic_norm
from test_harmonics import dft_product, random_field
from test_sensitivity import states, test_dense_adjoint_on_tiny_mesh as dense_adjoint_check

RESULTS = []


def record(n, ok, detail):
    line = f"criterion {n:>2}: {'PASS' if ok else 'FAIL'}  {detail}"
    print(line)
    RESULTS.append(line)
    assert ok, line


@pytest.fixture(scope="module", autouse=True)
def summary(request):
    yield
    tr = request.config.pluginmanager.get_plugin("terminalreporter")
    if tr is not None and RESULTS:
        tr.write_sep("-", "acceptance criteria")
        for line in sorted(RESULTS, key=lambda s: int(s.split()[1].rstrip(":"))):
            tr.write_line(line)


# -- property criteria -----------------------------------------------------------------

def test_c01_fem_convergence():
    hs = (0.04, 0.02, 0.01, 0.005)
    errs = np.array([manufactured_error(h) for h in hs])
    rates = np.log2(errs[:-1] / errs[1:])
    record(1, bool(np.all(np.abs(rates - 2.0) <= 0.15)),
           f"L2 rates over three refinements {np.round(rates, 3).tolist()} (2.0 +- 0.15)")


def test_c02_harmonic_products():
    worst = 0.0
    for N in (2, 4, 8):
        rng = np.random.default_rng(100 + N)
        for _ in range(100):
            u, v = random_field(rng, N), random_field(rng, N)
            p, q = project_product(u, v).coeffs, dft_product(u, v).coeffs
            worst = max(worst, np.abs(p - q).max() / np.abs(q).max())
    record(2, worst <= 1e-12, f"max relative deviation from DFT oracle {worst:.2e} (<= 1e-12)")


def test_c03_linear_decoupling(coarse):
    from westervelt.fem import solve_robin_helmholtz
    from westervelt.forward import HelmholtzSystem
    mesh, ops = coarse
    rng = np.random.default_rng(0)
    params = ParameterSet(2000 * (1 + 0.05 * rng.random(mesh.n_nodes)),
                          20 * (1 + 0.05 * rng.random(mesh.n_nodes)), np.zeros(mesh.n_nodes))
    spec = ExcitationSpec(0.02, 1.0, 3.0)
    g = build_source(spec, mesh, 4)
    u = solve_forward(params, g, 4, spec.omega, ops).u
    k2 = HelmholtzSystem(ops, params, spec.omega, 4).k2
    dev = 0.0
    for m in range(5):
        ref = solve_robin_helmholtz(ops, k2[m] if m else 0.0, np.zeros(mesh.n_nodes), g[m])
        scale = max(np.abs(ref).max(), 1e-300)
        dev = max(dev, np.abs(u.coeffs[m] - ref).max() / scale if np.any(ref) else np.abs(u.coeffs[m]).max())
    errs = np.array([bessel_error(h) for h in (0.02, 0.01, 0.005)])
    rates = np.log2(errs[:-1] / errs[1:])
    ok = dev <= 1e-10 and bool(np.all(np.abs(rates - 2.0) <= 0.3))
    record(3, ok, f"coupled vs independent {dev:.2e} (<= 1e-10); Bessel rates "
                  f"{np.round(rates, 3).tolist()} (order 2)")


def test_c04_nonlinearity_generation(coarse):
    mesh, ops = coarse
    params = ParameterSet.constant(mesh.n_nodes, 2000.0, 20.0, 4.3e-4)
    n1, sol = second_harmonic_norm(ops, 100.0, params)
    n2, _ = second_harmonic_norm(ops, 50.0, params)
    ratio = n2 / n1
    h = np.array(sol.history)
    ok = abs(ratio - 0.25) <= 0.025 and bool(np.all(np.diff(h) < 0)) and h[-1] <= 1e-10
    record(4, ok, f"second-harmonic ratio {ratio:.4f} (0.25 +- 10%); fixed-point residuals "
                  f"strictly decreasing to {h[-1]:.1e} in {len(h)} steps")


def test_c05_adjoint(coarse, tiny, specs):
    mesh, ops = coarse
    x = random_interior_point(mesh, np.random.default_rng(0))
    lin = FrozenLinearization(ops, x, states(x, specs, ops))
    rng = np.random.default_rng(2)
    worst = max(lin.self_test(rng, tol=np.inf) for _ in range(50))
    dense_ok = True
    try:
        dense_adjoint_check(tiny, specs)
    except AssertionError:
        dense_ok = False
    record(5, worst <= 1e-10 and dense_ok,
           f"50 pairs max {worst:.2e} (<= 1e-10); dense transpose on {tiny[0].n_nodes}-node mesh "
           f"{'ok' if dense_ok else 'mismatch'}")


def test_c06_taylor(coarse, specs):
    mesh, ops = coarse
    x = random_interior_point(mesh, np.random.default_rng(5))
    rep = taylor_suite(ops, x, specs, 4, eps=(1e-2, 1e-3, 1e-4))
    record(6, rep["taylor_slope"] >= 1.9, f"remainder slope {rep['taylor_slope']:.4f} (>= 1.9)")


def test_c07_range_invariance(coarse):
    _, ops = coarse
    rep = range_suite(ops, n_pairs=20, seed=11)
    radius = rep["c_rho_radius"]
    inside = [v for k, v in rep.items() if k.startswith("c_rho[") and float(k[6:-1]) <= radius]
    ok = rep["range_max_rel_residual"] <= 1e-12 and radius > 0 and all(q < 1 for q in inside)
    record(7, ok, f"20 pairs max residual {rep['range_max_rel_residual']:.2e} (<= 1e-12); "
                  f"c_rho < 1 up to magnitude {radius:.1e} (max inside {max(inside):.2e})")


def test_c08_admissibility():
    e1 = ExcitationSpec(1.0, 1.0, 1.0)
    specs = (e1, ExcitationSpec(0.7, 1.0, 1.0), e1.doubled())
    rep = check_admissibility(*specs, b0=20, s0=2000, gamma=1, R=0.2, L=20)
    quad = max(abs(20 * e.pole**2 + e.lam * e.pole + 2000 * e.lam)
               / (20 * abs(e.pole) ** 2 + e.lam * abs(e.pole) + 2000 * e.lam) for e in rep.entries)
    re_ok = all(e.pole.real < 0 for e in rep.entries)
    nz = all(e.abs_det > 0 and e.abs_A1eta > 0 for e in rep.entries)
    a0 = laplace_A("s", e1, 0)
    same = check_admissibility(e1, ExcitationSpec(1.0, 1.0, 1.0), e1.doubled(), b0=20, s0=2000,
                               gamma=1, R=0.2, L=20)
    degenerate = all(e.margin47 == 0.0 for e in same.entries) and not same.passed
    ok = len(rep.entries) == 20 and re_ok and quad <= 1e-12 and nz and a0 == 2 and degenerate
    record(8, ok, f"20 poles Re<0 {re_ok}, quadratic residual {quad:.1e}; det and A1eta nonzero {nz}; "
                  f"A1s(0) = {a0}; T1 = T2 fails cross condition {degenerate}")


# -- reconstruction criteria -----------------------------------------------------------------

def _run(name, tmp_path_factory, **overrides):
    cfg = ex.builtin_config(name)
    for k, v in overrides.items():
        setattr(cfg, k, v)
    out = tmp_path_factory.mktemp(name)
    status, out = ex.run_case(cfg, out)
    mesh = generate_disk_mesh(cfg.radius, cfg.h, cfg.sigma_arc)
    ops = assemble(mesh, cfg.gamma)
    _, params = ex.read_parameters(out / "reconstruction_final.csv")
    J = ex.read_convergence(out / "convergence.csv")
    return {"cfg": cfg, "status": status, "out": out, "mesh": mesh, "ops": ops, "params": params,
            "J": J}


def _contrast(run):
    x0 = run["cfg"].reference_point(run["mesh"].n_nodes)
    p = run["params"]
    return {"s": p.s - x0.s, "b": p.b - x0.b, "eta": p.eta - x0.eta}


def _phantom_contrast_signs(cfg):
    """Sign of the true contrast of each field per phantom (0 when the field is unchanged)."""
    bg = cfg.background(1)
    x0 = cfg.reference_point(1)
    out = []
    for ph in cfg.phantoms:
        vals = ex.phantom_values(cfg, ph)
        ref = (x0.s[0], x0.b[0], x0.eta[0])
        base = (bg.s[0], bg.b[0], bg.eta[0])
        out.append({k: (float(np.sign(v - r)) if not math.isclose(v, b0, rel_tol=1e-12) else 0.0)
                    for k, v, r, b0 in zip(("s", "b", "eta"), vals, ref, base)})
    return out


@pytest.fixture(scope="module")
def case1(tmp_path_factory):
    return _run("case1", tmp_path_factory)


@pytest.mark.slow
def test_c09_case1_reconstruction(case1):
    run = case1
    ops, mesh = run["ops"], run["mesh"]
    c = _contrast(run)
    target = np.array([0.0, 0.1])
    inside = np.linalg.norm(mesh.nodes - target, axis=1) <= 0.03
    want = {"s": 1.0, "b": -1.0, "eta": 1.0}
    parts, ok = [], True
    for k in ("s", "b", "eta"):
        cen, _ = contrast_centroid(ops, c[k], want[k])
        d = float(np.linalg.norm(cen - target))
        sign = float(np.sign(ops.lumped_areas()[inside] @ c[k][inside]))
        ok &= d <= 0.02 and sign == want[k]
        parts.append(f"{k}: centroid dist {d:.4f}, sign {'+' if sign > 0 else '-'}")
    J = np.array(run["J"])
    mono = bool(np.all(np.diff(J) < 0))
    ok &= mono and len(J) == 20 and 2000 <= mesh.n_nodes <= 5000
    record(9, ok, f"{mesh.n_nodes} nodes, {len(J)} iterations; " + "; ".join(parts)
                  + f"; J decreasing {mono} ({J[0]:.2e} -> {J[-1]:.2e})")


@pytest.mark.slow
def test_c10_partial_boundary_nonlinear_vs_linear(tmp_path_factory):
    nl = _run("case1_partial", tmp_path_factory)
    lin = _run("case1_partial_linear", tmp_path_factory)
    files = ex.export_plots_data(nl["out"], lin["out"], tmp_path_factory.mktemp("fig3"), n=101)
    j_nl, j_lin = nl["J"][-1], lin["J"][-1]
    ok = len(nl["J"]) == 20 and len(lin["J"]) == 20 and j_nl < j_lin
    record(10, ok, f"final J nonlinear {j_nl:.4e} vs linear {j_lin:.4e} (nonlinear < linear); "
                   f"heatmaps for visual inspection in {files[0].parent}")


@pytest.mark.slow
def test_c11_noise_robustness(tmp_path_factory):
    run = _run("case1_noise", tmp_path_factory)
    cfg, ops = run["cfg"], run["ops"]
    n_stop = len(run["J"])
    expected = stopping_index(cfg.noise, (cfg.alpha0, cfg.q), cfg.tau, max_iters=cfg.max_iters)
    c = _contrast(run)
    want = {"s": 1.0, "b": -1.0, "eta": 1.0}
    target = np.array([0.0, 0.1])
    dists = {k: float(np.linalg.norm(contrast_centroid(ops, c[k], want[k])[0] - target))
             for k in want}
    ok = run["status"] == "stopped" and abs(n_stop - 12) <= 1 and n_stop == expected \
        and all(d <= 0.03 for d in dists.values())
    record(11, ok, f"stopped after {n_stop} iterations (rule gives {expected}, target ~12); "
                   + ", ".join(f"{k} centroid dist {d:.4f}" for k, d in dists.items()) + " (<= 0.03)")


@pytest.mark.slow
def test_c12_case2_case3_smoke(tmp_path_factory):
    c2 = _run("case2", tmp_path_factory)
    c3 = _run("case3", tmp_path_factory)
    ran = (c2["status"] == "converged" and len(c2["J"]) == 20
           and c3["status"] == "converged" and len(c3["J"]) == 14)
    cfg, ops, mesh = c3["cfg"], c3["ops"], c3["mesh"]
    signs = _phantom_contrast_signs(cfg)
    con = _contrast(c3)
    supports, owners, parts = {}, {}, []
    for k in ("s", "b", "eta"):
        idx = [i for i, sg in enumerate(signs) if sg[k] != 0]
        assert len(idx) == 1, f"case3 must alter {k} in exactly one phantom"
        i = idx[0]
        f = con[k] * signs[i][k]
        pos = np.where(f > 0, f, 0.0)
        supports[k] = pos >= 0.5 * pos.max()
        cen, _ = contrast_centroid(ops, con[k], signs[i][k])
        d = [np.linalg.norm(cen - np.asarray(ph.center)) for ph in cfg.phantoms]
        owners[k] = (int(np.argmin(d)), i)
        parts.append(f"{k} centroid ({cen[0]:+.3f}, {cen[1]:+.3f}) nearest phantom "
                     f"{owners[k][0] + 1} (true {i + 1})")
    keys = list(supports)
    disjoint = all(not np.any(supports[a] & supports[b])
                   for n, a in enumerate(keys) for b in keys[n + 1:])
    matched = all(a == b for a, b in owners.values())
    record(12, ran and disjoint and matched,
           f"case2 {c2['status']} {len(c2['J'])} it, case3 {c3['status']} {len(c3['J'])} it; "
           f"case3 supports disjoint {disjoint}, one per parameter {matched}; " + "; ".join(parts))
