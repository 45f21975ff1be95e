import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from westervelt.admissibility import impedance_eigs_disk
from westervelt.fem import (
    AssembledOperators, MeshError, build_mesh, assemble, element_mass, element_stiffness,
    boundary_mass, generate_disk_mesh, read_field_csv, read_mesh, solve_robin_helmholtz,
    write_field_csv, write_mesh,
)

R = 0.2


def manufactured_error(h):
    mesh = generate_disk_mesh(R, h)
    ops = assemble(mesh, 1.0)
    exact = (mesh.nodes**2).sum(1)
    # -lap u = -4, gamma u + du/dn = R^2 + 2R on the circle
    u = solve_robin_helmholtz(ops, 0.0, -4.0 * np.ones(mesh.n_nodes), R**2 + 2 * R)
    e = u.real - exact
    return np.sqrt(e @ (ops.M @ e))


def test_full_circle_marks_every_edge():
    mesh = generate_disk_mesh(R, 0.05)
    assert mesh.sigma_mask.all()
    assert len(mesh.sigma_nodes) == len(mesh.boundary_nodes)


def test_half_circle_arc_fraction():
    mesh = generate_disk_mesh(R, 0.02, (0.0, np.pi))
    n = len(mesh.sigma_mask)
    assert abs(mesh.sigma_mask.sum() - 0.5 * n) <= 1


def test_refinement_doubles_boundary_and_area_converges():
    a = generate_disk_mesh(R, 0.04)
    b = generate_disk_mesh(R, 0.02)
    ratio = len(b.boundary_edges) / len(a.boundary_edges)
    assert 1.7 < ratio < 2.3
    err_a = abs(a.areas.sum() - np.pi * R**2)
    err_b = abs(b.areas.sum() - np.pi * R**2)
    assert 3.0 < err_a / err_b < 5.0


def test_mesh_invariants():
    mesh = generate_disk_mesh(R, 0.03, (0.5, 2.0))
    mesh.check()
    assert np.all(mesh.areas > 0)
    loop = mesh.boundary_edges
    assert np.array_equal(loop[1:, 0], loop[:-1, 1]) and loop[-1, 1] == loop[0, 0]


def test_clockwise_triangle_reoriented_and_degenerate_rejected():
    nodes = np.array([[0, 0], [1, 0], [0, 1]], float)
    assert build_mesh(nodes, np.array([[0, 2, 1]])).areas[0] == pytest.approx(0.5)
    flat = build_mesh(np.array([[0, 0], [1, 0], [2, 0]], float), np.array([[0, 1, 2]]))
    with pytest.raises(MeshError):
        flat.check()


def test_reference_triangle_matrices():
    mesh = build_mesh(np.array([[0, 0], [1, 0], [0, 1]], float), np.array([[0, 1, 2]]))
    area = 0.5
    np.testing.assert_allclose(element_mass(mesh)[0],
                               area / 12 * np.array([[2, 1, 1], [1, 2, 1], [1, 1, 2]]), atol=1e-15)
    np.testing.assert_allclose(element_stiffness(mesh)[0],
                               0.5 * np.array([[2, -1, -1], [-1, 1, 0], [-1, 0, 1]]), atol=1e-15)


def test_robin_edge_mass_block():
    mesh = build_mesh(np.array([[0, 0], [1, 0], [0, 1]], float), np.array([[0, 1, 2]]))
    gamma = 3.0
    B = boundary_mass(mesh, gamma).toarray()
    # edge (0,1) has length 1
    np.testing.assert_allclose(B[np.ix_([0, 1], [0, 1])][0, 1], gamma / 6, rtol=1e-14)
    L = np.sqrt(2.0)
    np.testing.assert_allclose(B[1, 2], gamma * L / 6, rtol=1e-14)
    np.testing.assert_allclose(B.sum(), gamma * (2 + L), rtol=1e-14)


def test_operator_structure(coarse):
    mesh, ops = coarse
    M, K, Bg = ops.M.toarray(), ops.K.toarray(), ops.B_gamma.toarray()
    for A in (M, K, Bg):
        np.testing.assert_allclose(A, A.T, atol=1e-14 * np.abs(A).max())
    assert np.linalg.eigvalsh(M).min() > 0
    ev = np.linalg.eigvalsh(K)
    assert ev.min() > -1e-10 * ev.max()
    assert np.sum(ev < 1e-10 * ev.max()) == 1
    np.testing.assert_allclose(K @ np.ones(mesh.n_nodes), 0, atol=1e-12)
    assert np.linalg.eigvalsh(Bg).min() > -1e-14
    np.testing.assert_allclose((ops.M_coeff(np.ones(mesh.n_nodes)) - ops.M).toarray(), 0, atol=0)


def test_mass_row_sums_are_lumped_areas(coarse):
    mesh, ops = coarse
    np.testing.assert_allclose(np.asarray(ops.M.sum(1)).ravel(), ops.lumped_areas(), rtol=1e-13)
    np.testing.assert_allclose(ops.M.sum(), mesh.areas.sum(), rtol=1e-13)


def test_homogeneous_problem_gives_zero(coarse):
    mesh, ops = coarse
    u = solve_robin_helmholtz(ops, 0.0, np.zeros(mesh.n_nodes), 0.0)
    assert np.all(u == 0)


@settings(max_examples=10, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_galerkin_orthogonality(seed):
    mesh = generate_disk_mesh(R, 0.05)
    ops = assemble(mesh, 1.0)
    rng = np.random.default_rng(seed)
    kappa = 50.0 + 10j
    rhs = rng.standard_normal(mesh.n_nodes) + 1j * rng.standard_normal(mesh.n_nodes)
    g = rng.standard_normal(mesh.n_nodes)
    u = solve_robin_helmholtz(ops, kappa, rhs, g)
    A = (ops.robin_laplace - kappa * ops.M)
    load = ops.M @ rhs + ops.B1 @ g
    v = rng.standard_normal(mesh.n_nodes)
    assert abs(v @ (A @ u - load)) <= 1e-10 * np.abs(v) @ np.abs(load)


def test_manufactured_quadratic_second_order():
    errs = [manufactured_error(h) for h in (0.04, 0.02, 0.01)]
    rates = np.log2(np.array(errs[:-1]) / np.array(errs[1:]))
    assert np.all(np.abs(rates - 2.0) < 0.3), rates


def test_fem_eigenvalues_match_bessel():
    mesh = generate_disk_mesh(R, 0.0125)
    ops = assemble(mesh, 1.0)
    from scipy.linalg import eigh
    fem = eigh(ops.robin_laplace.toarray(), ops.M.toarray(), eigvals_only=True,
               subset_by_index=[0, 4])
    exact = impedance_eigs_disk(1.0, R, 5).values[:5]
    np.testing.assert_allclose(fem, exact, rtol=1e-2)


def test_mesh_and_field_files_roundtrip(tmp_path, coarse_half):
    mesh, _ = coarse_half
    write_mesh(mesh, tmp_path / "m.txt")
    back = read_mesh(tmp_path / "m.txt")
    np.testing.assert_array_equal(back.nodes, mesh.nodes)
    np.testing.assert_array_equal(back.sigma_nodes, mesh.sigma_nodes)
    rng = np.random.default_rng(1)
    c = rng.standard_normal((3, mesh.n_nodes)) + 1j * rng.standard_normal((3, mesh.n_nodes))
    write_field_csv(tmp_path / "f.csv", mesh, c)
    xy, c2 = read_field_csv(tmp_path / "f.csv")
    np.testing.assert_array_equal(c2, c)
    np.testing.assert_array_equal(xy, mesh.nodes)
    assert isinstance(assemble(back), AssembledOperators)
