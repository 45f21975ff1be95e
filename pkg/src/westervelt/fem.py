"""P1 finite elements on a triangulated disk.

Meshing, closed-form element matrices, Robin-Helmholtz solves and the
plain-text mesh / field formats shared by the rest of the package.

Coefficient-weighted terms in the multiharmonic solvers use the nodal
convention ``M @ (c * u)``: products are formed at the nodes and then
tested with the consistent mass matrix. With it the discrete Laplacian
``lap(u) = M^{-1} (B1 g - (K + B_gamma) u)`` turns every pointwise identity of
the continuous problem into an exact identity between nodal vectors.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from functools import cached_property
from pathlib import Path

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla
from scipy.spatial import Delaunay


class MeshError(ValueError):
    """Raised for invalid mesh input or a mesh violating its invariants."""


class AssemblyError(ValueError):
    """Raised when element matrices cannot be formed (e.g. inverted triangle)."""


class ConditioningError(RuntimeError):
    """Raised when a Helmholtz system matrix is singular or nearly so."""


TWO_PI = 2.0 * math.pi


def _in_arc(theta, arc):
    lo, hi = arc
    if hi - lo >= TWO_PI - 1e-14:
        return np.ones_like(theta, dtype=bool)
    rel = np.mod(theta - lo, TWO_PI)
    return rel <= np.mod(hi - lo, TWO_PI) + 1e-14


@dataclass(frozen=True, eq=False)
class Mesh2D:
    """Triangulated domain with oriented boundary edges.

    ``boundary_edges`` are ordered so that they form one counter-clockwise
    loop; ``normals`` holds the outward unit normal of each edge and
    ``sigma_mask`` flags the edges of the observation arc.
    """

    nodes: np.ndarray
    triangles: np.ndarray
    boundary_edges: np.ndarray
    normals: np.ndarray
    sigma_mask: np.ndarray

    @property
    def n_nodes(self) -> int:
        return self.nodes.shape[0]

    @cached_property
    def areas(self) -> np.ndarray:
        p = self.nodes[self.triangles]
        d1 = p[:, 1] - p[:, 0]
        d2 = p[:, 2] - p[:, 0]
        return 0.5 * (d1[:, 0] * d2[:, 1] - d1[:, 1] * d2[:, 0])

    @cached_property
    def boundary_nodes(self) -> np.ndarray:
        return np.unique(self.boundary_edges)

    @cached_property
    def sigma_nodes(self) -> np.ndarray:
        """Sorted node ids touched by an observation edge."""
        return np.unique(self.boundary_edges[self.sigma_mask])

    @cached_property
    def edge_lengths(self) -> np.ndarray:
        p = self.nodes[self.boundary_edges]
        return np.linalg.norm(p[:, 1] - p[:, 0], axis=1)

    def check(self) -> None:
        """Verify the structural invariants, raising :class:`MeshError`."""
        bad = np.flatnonzero(self.areas <= 0.0)
        if bad.size:
            raise MeshError(f"triangle {bad[0]} is not positively oriented")
        edges = np.sort(
            np.concatenate([self.triangles[:, [0, 1]], self.triangles[:, [1, 2]],
                            self.triangles[:, [2, 0]]]), axis=1)
        uniq, counts = np.unique(edges, axis=0, return_counts=True)
        if np.any(counts > 2):
            raise MeshError("edge shared by more than two triangles")
        single = {tuple(e) for e in uniq[counts == 1]}
        given = {tuple(sorted(e)) for e in self.boundary_edges.tolist()}
        if single != given:
            raise MeshError("boundary edges do not match single-triangle edges")
        be = self.boundary_edges
        if not np.array_equal(be[1:, 0], be[:-1, 1]) or be[-1, 1] != be[0, 0]:
            raise MeshError("boundary edges do not form a single closed loop")
        if not self.sigma_mask.any():
            raise MeshError("observation arc is empty")
        # contiguous: at most two switches of the flag around the loop
        flips = np.count_nonzero(self.sigma_mask != np.roll(self.sigma_mask, 1))
        if flips > 2:
            raise MeshError("observation edges are not contiguous")


def _order_boundary_loop(edges: np.ndarray) -> np.ndarray:
    nxt = {int(a): int(b) for a, b in edges}
    if len(nxt) != len(edges):
        raise MeshError("boundary is not a simple loop")
    start = int(edges[0, 0])
    loop = [start]
    cur = nxt[start]
    while cur != start:
        loop.append(cur)
        cur = nxt[cur]
        if len(loop) > len(edges):
            raise MeshError("boundary is not a single loop")
    if len(loop) != len(edges):
        raise MeshError("boundary consists of several loops")
    loop = np.asarray(loop)
    return np.column_stack([loop, np.roll(loop, -1)])


def build_mesh(nodes, triangles, sigma_arc=(0.0, TWO_PI), sigma_mask=None) -> Mesh2D:
    """Create a :class:`Mesh2D` from raw arrays.

    Triangles are reoriented counter-clockwise, boundary edges are extracted
    and ordered. Unless ``sigma_mask`` is given, an edge belongs to the
    observation arc when the polar angle of its midpoint lies in ``sigma_arc``.
    """
    nodes = np.asarray(nodes, dtype=float)
    tris = np.array(triangles, dtype=np.int64)
    p = nodes[tris]
    d1 = p[:, 1] - p[:, 0]
    d2 = p[:, 2] - p[:, 0]
    det = d1[:, 0] * d2[:, 1] - d1[:, 1] * d2[:, 0]
    flip = det < 0
    tris[flip] = tris[flip][:, [0, 2, 1]]
    directed = np.concatenate([tris[:, [0, 1]], tris[:, [1, 2]], tris[:, [2, 0]]])
    key = np.sort(directed, axis=1)
    _, inv, counts = np.unique(key, axis=0, return_inverse=True, return_counts=True)
    bd = directed[counts[inv.ravel()] == 1]
    if bd.size == 0:
        raise MeshError("mesh has no boundary")
    bd = _order_boundary_loop(bd)
    pe = nodes[bd]
    t = pe[:, 1] - pe[:, 0]
    length = np.linalg.norm(t, axis=1)
    normals = np.column_stack([t[:, 1], -t[:, 0]]) / length[:, None]
    if sigma_mask is None:
        mid = pe.mean(axis=1)
        theta = np.mod(np.arctan2(mid[:, 1], mid[:, 0]), TWO_PI)
        sigma_mask = _in_arc(theta, sigma_arc)
    sigma_mask = np.asarray(sigma_mask, dtype=bool)
    if not sigma_mask.any():
        raise MeshError(f"observation arc {tuple(sigma_arc)} contains no boundary edge")
    mesh = Mesh2D(nodes, tris, bd, normals, sigma_mask)
    return mesh


def generate_disk_mesh(radius: float, target_h: float,
                       sigma_arc=(0.0, TWO_PI)) -> Mesh2D:
    """Triangulate the disk of given radius with rings of nodes.

    Ring ``i`` has radius ``i * radius / n_rings`` and roughly
    ``2 pi r_i / target_h`` equally spaced nodes; the outermost ring lies
    exactly on the circle. The point cloud is Delaunay-triangulated.
    """
    if radius <= 0:
        raise MeshError("radius must be positive")
    if not 0 < target_h < radius:
        raise MeshError("target_h must lie in (0, radius)")
    lo, hi = float(sigma_arc[0]), float(sigma_arc[1])
    if not (0.0 <= lo <= TWO_PI and 0.0 <= hi <= TWO_PI + 1e-12):
        raise MeshError("sigma_arc must lie in [0, 2 pi]")
    if hi <= lo:
        raise MeshError(f"degenerate observation arc ({lo}, {hi})")
    n_rings = max(2, int(math.ceil(radius / target_h)))
    pts = [np.zeros((1, 2))]
    for i in range(1, n_rings + 1):
        r = radius * i / n_rings
        n = max(6, int(math.ceil(TWO_PI * r / target_h)))
        phase = 0.5 * (i % 2) * TWO_PI / n
        th = phase + TWO_PI * np.arange(n) / n
        pts.append(np.column_stack([r * np.cos(th), r * np.sin(th)]))
    nodes = np.vstack(pts)
    tri = Delaunay(nodes).simplices
    p = nodes[tri]
    d1 = p[:, 1] - p[:, 0]
    d2 = p[:, 2] - p[:, 0]
    area = 0.5 * np.abs(d1[:, 0] * d2[:, 1] - d1[:, 1] * d2[:, 0])
    tri = tri[area > 1e-12 * target_h**2]
    mesh = build_mesh(nodes, tri, (lo, hi))
    mesh.check()
    return mesh


# -- element matrices -------------------------------------------------------

def _element_geometry(mesh: Mesh2D):
    p = mesh.nodes[mesh.triangles]
    area = mesh.areas
    bad = np.flatnonzero(area <= 0.0)
    if bad.size:
        raise AssemblyError(f"triangle {bad[0]} is inverted or degenerate (area={area[bad[0]]:.3e})")
    # gradients of barycentric coordinates
    x, y = p[..., 0], p[..., 1]
    b = np.stack([y[:, 1] - y[:, 2], y[:, 2] - y[:, 0], y[:, 0] - y[:, 1]], axis=1)
    c = np.stack([x[:, 2] - x[:, 1], x[:, 0] - x[:, 2], x[:, 1] - x[:, 0]], axis=1)
    grads = np.stack([b, c], axis=2) / (2.0 * area)[:, None, None]
    return area, grads


_MASS_REF = np.array([[2.0, 1.0, 1.0], [1.0, 2.0, 1.0], [1.0, 1.0, 2.0]]) / 12.0
_EDGE_REF = np.array([[2.0, 1.0], [1.0, 2.0]]) / 6.0


def _scatter(conn, local, n):
    k = conn.shape[1]
    rows = np.repeat(conn, k, axis=1).ravel()
    cols = np.tile(conn, (1, k)).ravel()
    return sp.csr_matrix((local.ravel(), (rows, cols)), shape=(n, n))


def element_mass(mesh: Mesh2D) -> np.ndarray:
    area, _ = _element_geometry(mesh)
    return area[:, None, None] * _MASS_REF


def element_stiffness(mesh: Mesh2D) -> np.ndarray:
    area, g = _element_geometry(mesh)
    return area[:, None, None] * np.einsum("eid,ejd->eij", g, g)


def weighted_mass(mesh: Mesh2D, coeff) -> sp.csr_matrix:
    """Mass matrix with exact quadrature of ``int c phi_i phi_j`` for P1 ``c``."""
    coeff = np.asarray(coeff)
    if coeff.shape != (mesh.n_nodes,):
        raise AssemblyError("coefficient must be a nodal field")
    if not np.all(np.isfinite(coeff)):
        raise AssemblyError("coefficient is not finite at every node")
    area, _ = _element_geometry(mesh)
    ce = coeff[mesh.triangles]
    s = ce.sum(axis=1)
    # int l_i l_j l_k = 2A a!b!c!/(a+b+c+2)!
    local = np.empty((len(area), 3, 3), dtype=np.result_type(coeff, float))
    for i in range(3):
        for j in range(3):
            if i == j:
                local[:, i, j] = (2.0 * ce[:, i] + s) / 30.0
            else:
                local[:, i, j] = (s + ce[:, i] + ce[:, j]) / 60.0
    local *= area[:, None, None]
    return _scatter(mesh.triangles, local, mesh.n_nodes)


def boundary_mass(mesh: Mesh2D, weight=1.0, edge_mask=None) -> sp.csr_matrix:
    """``int_{dOmega} w phi_i phi_j`` with ``w`` constant per edge."""
    w = np.broadcast_to(np.asarray(weight, dtype=float), mesh.edge_lengths.shape)
    if np.any(w < 0):
        raise AssemblyError("Robin coefficient must be non-negative")
    scale = w * mesh.edge_lengths
    if edge_mask is not None:
        scale = scale * np.asarray(edge_mask, dtype=float)
    local = scale[:, None, None] * _EDGE_REF
    return _scatter(mesh.boundary_edges, local, mesh.n_nodes)


class AssembledOperators:
    """Sparse P1 operators of a mesh; immutable once built.

    Attributes: ``M`` mass, ``K`` stiffness, ``B_gamma`` Robin boundary mass
    scaled by gamma, ``B1`` unweighted boundary mass and ``B_sigma`` the
    boundary mass restricted to the observation arc.
    """

    def __init__(self, mesh: Mesh2D, gamma=1.0):
        self.mesh = mesh
        self.gamma = gamma
        n = mesh.n_nodes
        self.M = _scatter(mesh.triangles, element_mass(mesh), n)
        self.K = _scatter(mesh.triangles, element_stiffness(mesh), n)
        self.B_gamma = boundary_mass(mesh, gamma)
        self.B1 = boundary_mass(mesh, 1.0)
        self.B_sigma = boundary_mass(mesh, 1.0, mesh.sigma_mask)

    def M_coeff(self, coeff) -> sp.csr_matrix:
        return weighted_mass(self.mesh, coeff)

    @cached_property
    def robin_laplace(self) -> sp.csr_matrix:
        """``K + B_gamma``: the negative impedance Laplacian in weak form."""
        return (self.K + self.B_gamma).tocsc()

    @cached_property
    def _mass_lu(self):
        return spla.splu(self.M.tocsc())

    def solve_mass(self, rhs: np.ndarray) -> np.ndarray:
        rhs = np.asarray(rhs)
        if np.iscomplexobj(rhs):
            return self._mass_lu.solve(rhs.real) + 1j * self._mass_lu.solve(rhs.imag)
        return self._mass_lu.solve(rhs)

    def laplacian(self, u: np.ndarray, g=None) -> np.ndarray:
        """Discrete Laplacian ``M^{-1}(B1 g - (K + B_gamma) u)``.

        ``g`` is the Robin datum ``gamma u + du/dn`` at the boundary nodes
        (zero when omitted).
        """
        load = -(self.robin_laplace @ u)
        if g is not None:
            load = load + self.B1 @ g
        return self.solve_mass(load)

    def lumped_areas(self) -> np.ndarray:
        return np.asarray(self.M.sum(axis=1)).ravel()


def assemble(mesh: Mesh2D, gamma=1.0, coeff=None):
    """Assemble the operators of ``mesh``; optionally also ``M_coeff(coeff)``."""
    ops = AssembledOperators(mesh, gamma)
    if coeff is None:
        return ops
    return ops, ops.M_coeff(coeff)


class HelmholtzFactor:
    """LU factorization of ``K + B_gamma - M diag(kappa_term)``.

    The matrix is complex symmetric; ``solve`` and ``solve_adjoint`` apply
    ``A^{-1}`` and ``A^{-H}``.
    """

    def __init__(self, ops: AssembledOperators, kappa_term, cond_limit=1e13,
                 check_condition=True):
        self.ops = ops
        kt = np.broadcast_to(np.asarray(kappa_term), (ops.mesh.n_nodes,))
        self.kappa_term = kt
        A = ops.robin_laplace - ops.M @ sp.diags(kt)
        if np.isrealobj(kt):
            A = A.real
        self.A = A.tocsc()
        try:
            self._lu = spla.splu(self.A)
        except RuntimeError as exc:
            raise ConditioningError(f"Helmholtz matrix is singular: {exc}") from exc
        if check_condition:
            inv = spla.LinearOperator(self.A.shape, matvec=self._lu.solve,
                                      rmatvec=lambda x: self._lu.solve(x, trans="H"),
                                      dtype=self.A.dtype)
            est = spla.norm(self.A, 1) * spla.onenormest(inv)
            self.condition = float(est)
            if not np.isfinite(est) or est > cond_limit:
                raise ConditioningError(
                    f"Helmholtz matrix nearly singular (cond_1 ~ {est:.2e}); "
                    "resonant wavenumber with gamma = 0?")

    def solve(self, load):
        load = np.asarray(load)
        if np.isrealobj(self.A.data) and np.iscomplexobj(load):
            return self._lu.solve(load.real) + 1j * self._lu.solve(load.imag)
        return self._lu.solve(load.astype(self.A.dtype, copy=False))

    def solve_adjoint(self, load):
        load = np.asarray(load)
        if np.isrealobj(self.A.data) and np.iscomplexobj(load):
            return self._lu.solve(load.real, trans="T") + 1j * self._lu.solve(load.imag, trans="T")
        return self._lu.solve(load.astype(self.A.dtype, copy=False), trans="H")


def solve_robin_helmholtz(ops: AssembledOperators, kappa_term, rhs, g_hat,
                          factor: HelmholtzFactor | None = None):
    """Solve ``-kappa_term u - lap u = rhs`` with ``gamma u + du/dn = g_hat``.

    ``rhs`` is a nodal source field and ``g_hat`` nodal boundary data (values
    at interior nodes are ignored). Raises :class:`ConditioningError` when the
    system is (nearly) singular or the residual check fails.
    """
    if factor is None:
        factor = HelmholtzFactor(ops, kappa_term)
    n = ops.mesh.n_nodes
    rhs = np.broadcast_to(np.asarray(rhs), (n,))
    g_hat = np.broadcast_to(np.asarray(g_hat), (n,))
    load = ops.M @ rhs + ops.B1 @ g_hat
    u = factor.solve(load)
    res = np.linalg.norm(factor.A @ u - load)
    scale = np.linalg.norm(ops.M @ rhs) + np.linalg.norm(ops.B1 @ g_hat)
    if not np.all(np.isfinite(u)) or res > 1e-10 * max(scale, np.finfo(float).tiny):
        raise ConditioningError(f"Helmholtz residual {res:.2e} exceeds tolerance")
    return u


# -- file formats -----------------------------------------------------------

def write_mesh(mesh: Mesh2D, path) -> None:
    path = Path(path)
    with path.open("w") as fh:
        fh.write("NODES\n")
        for i, (x, y) in enumerate(mesh.nodes):
            fh.write(f"{i} {float(x)!r} {float(y)!r}\n")
        fh.write("TRIANGLES\n")
        for i, t in enumerate(mesh.triangles):
            fh.write(f"{i} {t[0]} {t[1]} {t[2]}\n")
        fh.write("BOUNDARY\n")
        for (a, b), s in zip(mesh.boundary_edges, mesh.sigma_mask):
            fh.write(f"{a} {b} {int(s)}\n")


def read_mesh(path) -> Mesh2D:
    sections = {"NODES": [], "TRIANGLES": [], "BOUNDARY": []}
    current = None
    for line in Path(path).read_text().splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if line in sections:
            current = line
            continue
        if current is None:
            raise MeshError(f"data before section header: {line!r}")
        sections[current].append(line.split())
    nodes = np.array([[float(r[1]), float(r[2])] for r in sections["NODES"]])
    ids = [int(r[0]) for r in sections["NODES"]]
    if ids != list(range(len(ids))):
        raise MeshError("node ids must be 0..n-1 in order")
    tris = np.array([[int(v) for v in r[1:4]] for r in sections["TRIANGLES"]])
    flags = {}
    for r in sections["BOUNDARY"]:
        a, b = int(r[0]), int(r[1])
        flags[(min(a, b), max(a, b))] = bool(int(r[2]))
    # build once to obtain the ordered loop, then attach the stored flags
    tmp = build_mesh(nodes, tris)
    try:
        mask = np.array([flags[(min(a, b), max(a, b))] for a, b in tmp.boundary_edges])
    except KeyError as exc:
        raise MeshError(f"boundary edge {exc} missing from BOUNDARY section") from exc
    mesh = build_mesh(nodes, tris, sigma_mask=mask)
    mesh.check()
    return mesh


def write_field_csv(path, mesh: Mesh2D, coeffs) -> None:
    """Write harmonic coefficients ``coeffs[m, node]`` in the field CSV format."""
    coeffs = np.atleast_2d(np.asarray(coeffs, dtype=complex))
    n_h = coeffs.shape[0]
    header = ["node_id", "x", "y"]
    for m in range(n_h):
        header += [f"re_m{m}", f"im_m{m}"]
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for i, (x, y) in enumerate(mesh.nodes):
            row = [i, repr(float(x)), repr(float(y))]
            for m in range(n_h):
                row += [repr(float(coeffs[m, i].real)), repr(float(coeffs[m, i].imag))]
            w.writerow(row)


def read_field_csv(path):
    """Return ``(node_xy, coeffs)`` from a field CSV."""
    with Path(path).open() as fh:
        rows = list(csv.reader(fh))
    header, body = rows[0], np.array(rows[1:], dtype=float)
    n_h = (len(header) - 3) // 2
    xy = body[:, 1:3]
    coeffs = body[:, 3::2][:, :n_h] + 1j * body[:, 4::2][:, :n_h]
    return xy, coeffs.T.copy()
