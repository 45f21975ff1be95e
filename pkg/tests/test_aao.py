import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from westervelt.aao import (
    AaoExperiment, BoundViolation, admissible_reference, c_rho_curve, check_range_invariance,
    eval_aao, eval_aao_linearized, penalty_P, r_map,
)
from westervelt.forward import ExcitationSpec, ParameterSet, build_source, solve_forward
from westervelt.verification import range_suite, smooth_perturbation

W = 2 * np.pi / 0.02
NT = 17


@pytest.fixture(scope="module")
def ref(coarse):
    mesh, ops = coarse
    bg = ParameterSet.constant(mesh.n_nodes, 2000.0, 20.0, 0.0)
    rng = np.random.default_rng(0)
    return [admissible_reference(ops, bg, W, NT, rng), admissible_reference(ops, bg, 1.4 * W, NT, rng)]


def perturbed(ref, mesh, rng, scale=1.0, keys=("s", "b", "eta", "u")):
    out = []
    for e in ref:
        f = {k: smooth_perturbation(mesh, rng) * (k in keys) for k in ("s", "b", "eta", "u")}
        out.append(AaoExperiment(e.s * (1 + 0.05 * scale * f["s"]), e.b * (1 + 0.05 * scale * f["b"]),
                                 e.eta + 1e-4 * scale * (1 + f["eta"]) * ("eta" in keys),
                                 e.u * (1 + 0.1 * scale * f["u"]), e.robin, e.omega))
    return out


def test_zero_state_zero_residual(coarse):
    mesh, ops = coarse
    z = np.zeros((NT, mesh.n_nodes))
    e = AaoExperiment(2000.0, 20.0, 1e-4, z, z, W)
    res = eval_aao([e], ops)
    assert not np.any(res.model[0]) and not np.any(res.boundary[0]) and not np.any(res.observation[0])


def test_forward_solution_has_small_projected_residual(coarse):
    mesh, ops = coarse
    params = ParameterSet.constant(mesh.n_nodes, 2000.0, 20.0, 4e-4)
    spec = ExcitationSpec(0.02, 1.0, 2000.0)
    g = build_source(spec, mesh, 4)
    u = solve_forward(params, g, 4, spec.omega, ops, fp_tol=1e-13).u
    e = AaoExperiment.from_harmonic(params, u, g)
    res = eval_aao([e], ops)
    scale = np.abs(20.0 * np.gradient(e.u, axis=0)).max() * spec.omega**2
    # products generate harmonics above N; the model is posed on 0..N
    proj = res.harmonics(4)
    assert np.abs(proj.model[0]).max() <= 1e-9 * scale
    bn = mesh.boundary_nodes
    np.testing.assert_allclose(res.boundary[0], e.robin[:, bn], rtol=0)
    assert np.abs(proj.boundary[0] - g[:, bn]).max() <= 1e-10 * np.abs(g).max()


def test_linear_in_u_without_eta(coarse, ref):
    mesh, ops = coarse
    e = ref[0]
    lin = AaoExperiment(e.s, e.b, 0.0, e.u, e.robin, e.omega)
    dbl = AaoExperiment(e.s, e.b, 0.0, 2 * e.u, 2 * e.robin, e.omega)
    a, b = eval_aao([lin], ops).model[0], eval_aao([dbl], ops).model[0]
    np.testing.assert_allclose(b, 2 * a, atol=1e-12 * np.abs(a).max())


def test_linearization_examples(coarse, ref):
    mesh, ops = coarse
    zero = [e.combine(e, np.subtract) for e in ref]
    res = eval_aao_linearized(ref, zero, ops)
    assert all(not np.any(m) for m in res.model)
    rng = np.random.default_rng(1)
    dx = [AaoExperiment(smooth_perturbation(mesh, rng), smooth_perturbation(mesh, rng),
                        smooth_perturbation(mesh, rng), np.zeros_like(e.u), np.zeros_like(e.u), e.omega)
          for e in ref]
    from westervelt.aao import _laplacian_samples
    from westervelt.harmonics import spectral_time_derivative as dt
    for e, d, m in zip(ref, dx, eval_aao_linearized(ref, dx, ops).model):
        lap0 = _laplacian_samples(ops, e.u, e.robin)
        expect = dt(d.b * e.u - d.eta * e.u**2, e.omega, 2) - d.s * lap0
        np.testing.assert_allclose(m, expect, atol=1e-12 * np.abs(expect).max())


def test_linearization_finite_difference_slope(coarse, ref):
    mesh, ops = coarse
    rng = np.random.default_rng(2)
    x0 = [AaoExperiment(e.s, e.b, 2e-4, e.u, e.robin, e.omega) for e in ref]
    dx = [AaoExperiment(100 * smooth_perturbation(mesh, rng), smooth_perturbation(mesh, rng),
                        1e-4 * smooth_perturbation(mesh, rng), e.u * smooth_perturbation(mesh, rng),
                        np.zeros_like(e.u), e.omega) for e in x0]
    f0 = eval_aao(x0, ops)
    lin = eval_aao_linearized(x0, dx, ops)
    eps = np.array([1e-1, 1e-2, 1e-3])
    rem = []
    for h in eps:
        xe = [a.combine(b, lambda p, q, h=h: p + h * q) for a, b in zip(x0, dx)]
        fe = eval_aao(xe, ops)
        rem.append(sum(np.linalg.norm(a - b - h * c) for a, b, c in zip(fe.model, f0.model, lin.model)))
    slope = np.polyfit(np.log(eps), np.log(rem), 1)[0]
    assert slope >= 1.9


def test_r_map_examples(coarse, ref):
    mesh, ops = coarse
    r = r_map(ref, ref, ops)
    for e in r:
        for v in e.fields().values():
            assert not np.any(v)
    x = perturbed(ref, mesh, np.random.default_rng(3))
    for ri, e, e0 in zip(r_map(x, ref, ops), x, ref):
        assert np.array_equal(ri.b, e.b - e0.b)


def test_bound_violation_names_location(coarse, ref):
    mesh, ops = coarse
    bad = [AaoExperiment(e.s, e.b, e.eta, e.u.copy(), e.robin, e.omega) for e in ref]
    bad[0].u[3, 7] = 0.0
    with pytest.raises(BoundViolation, match="node 7, time index 3"):
        r_map(ref, bad, ops)


def test_range_invariance_trivial_cases(coarse, ref):
    mesh, ops = coarse
    assert check_range_invariance(ref, ref, ops) == 0.0
    x = perturbed(ref, mesh, np.random.default_rng(4), keys=("b",))
    # u is unchanged, so F(x) - F(x0) is a small difference of large terms
    assert check_range_invariance(x, ref, ops) <= 1e-11


def test_range_invariance_random_pairs(coarse):
    _, ops = coarse
    rep = range_suite(ops, n_pairs=20, seed=7)
    assert rep["range_max_rel_residual"] <= 1e-12
    ratios = [v for k, v in rep.items() if k.startswith("c_rho[")]
    mags = [float(k[6:-1]) for k in rep if k.startswith("c_rho[")]
    assert rep["c_rho_radius"] > 0
    assert all(q < 1 for m, q in zip(mags, ratios) if m <= rep["c_rho_radius"])


def test_c_rho_ratio_vanishes_with_magnitude(coarse, ref):
    mesh, ops = coarse
    rng = np.random.default_rng(8)
    d = [AaoExperiment(e.s * smooth_perturbation(mesh, rng), e.b * smooth_perturbation(mesh, rng),
                       1e-4 * smooth_perturbation(mesh, rng), e.u * smooth_perturbation(mesh, rng),
                       np.zeros_like(e.u), e.omega) for e in ref]
    mags, ratios, radius = c_rho_curve(ref, d, ops, [1e-6, 1e-5, 1e-4])
    assert ratios[0] < ratios[1] < ratios[2]
    assert radius == 1e-4 or ratios[-1] >= 1


def test_penalty_examples():
    rng = np.random.default_rng(0)
    const = np.tile(rng.standard_normal(5), (9, 1))
    assert np.abs(penalty_P(const, 1.0)).max() <= 1e-15
    f = rng.standard_normal((9, 5))
    np.testing.assert_allclose(penalty_P(f, 1.0), f - f.mean(0), atol=1e-15)
    with pytest.raises(ValueError):
        penalty_P(f, np.r_[np.ones(8), 0.0])


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(3, 15))
def test_penalty_projection_properties(seed, n_t):
    rng = np.random.default_rng(seed)
    f = rng.standard_normal((n_t, 4))
    w = rng.uniform(0.1, 2.0, n_t)
    p = penalty_P(f, w)
    np.testing.assert_allclose(w @ p, 0.0, atol=1e-12 * np.abs(f).max() * w.sum())
    again = penalty_P(p + rng.standard_normal(4)[None, :], w)
    np.testing.assert_allclose(again, p, atol=1e-12 * (1 + np.abs(p).max()))
    norm = lambda a: np.sqrt(w @ (a**2))
    assert np.all(norm(p) <= norm(f) * (1 + 1e-12))


def test_penalty_callable_weight():
    f = np.random.default_rng(1).standard_normal((8, 3))
    np.testing.assert_allclose(penalty_P(f, lambda t: 1.0 + 0 * t), penalty_P(f, 1.0), atol=1e-15)
