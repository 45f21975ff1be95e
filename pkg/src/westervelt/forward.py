"""Periodic Westervelt forward solver in multiharmonic form.

For every harmonic ``m >= 1`` the coefficient ``u_m`` solves the Robin
Helmholtz problem

    -kappa_m^2 m^2 u_m - lap u_m = -eta m^2 w^2 / (s + i m w) [u^2]_m,
    gamma u_m + du_m/dn = g_m,

with ``kappa_m^2 = w^2 b / (s + i m w)`` and ``[u^2]_m`` the projected
square; ``u_0`` is harmonic with Robin data ``g_0``. The coupled system is
solved by fixed-point iteration started from the linear (``eta = 0``) state.
"""

from __future__ import annotations

import logging
import math
import warnings
from dataclasses import dataclass, field, replace
from typing import Callable

import numpy as np

from .fem import AssembledOperators, HelmholtzFactor, Mesh2D
from .harmonics import HarmonicField, cauchy_correlation, collocation_times, sample_time

log = logging.getLogger(__name__)


class DegenerateError(RuntimeError):
    """``b - 2 eta u`` reached zero: the Westervelt equation degenerates."""


class NonConvergenceError(RuntimeError):
    """Fixed-point iteration failed to contract; carries the residual history."""

    def __init__(self, message, history):
        super().__init__(message)
        self.history = list(history)


@dataclass(frozen=True, eq=False)
class ParameterSet:
    """Nodal PDE coefficients ``s = c^2/frak_b``, ``b = 1/frak_b`` and ``eta``."""

    s: np.ndarray
    b: np.ndarray
    eta: np.ndarray

    def __post_init__(self):
        for name in ("s", "b", "eta"):
            object.__setattr__(self, name, np.array(getattr(self, name), dtype=float))

    @classmethod
    def constant(cls, n_nodes, s, b, eta=0.0):
        return cls(np.full(n_nodes, float(s)), np.full(n_nodes, float(b)),
                   np.full(n_nodes, float(eta)))

    def validate(self) -> "ParameterSet":
        for name in ("s", "b", "eta"):
            v = getattr(self, name)
            if not np.all(np.isfinite(v)):
                raise ValueError(f"parameter {name} is not finite everywhere")
        if np.any(self.s <= 0) or np.any(self.b <= 0):
            raise ValueError("s and b must be strictly positive at every node")
        return self

    def stack(self) -> np.ndarray:
        return np.stack([self.s, self.b, self.eta])

    @classmethod
    def from_stack(cls, arr) -> "ParameterSet":
        return cls(arr[0], arr[1], arr[2])

    def __add__(self, other):
        return ParameterSet.from_stack(self.stack() + other.stack())

    def __sub__(self, other):
        return ParameterSet.from_stack(self.stack() - other.stack())


def transform_parameters(c, frak_b, BA, rho0):
    """Physical (sound speed, diffusivity, B/A, density) to ``(s, b, eta)``."""
    c, frak_b, BA = (np.asarray(v, dtype=float) for v in (c, frak_b, BA))
    if np.any(c <= 0) or np.any(frak_b <= 0) or np.any(np.asarray(rho0) <= 0):
        raise ValueError("c, frak_b and rho0 must be positive")
    beta_a = 1.0 + BA / 2.0
    s = c**2 / frak_b
    b = 1.0 / frak_b
    eta = beta_a / (2.0 * rho0 * c**2 * frak_b)
    return s, b, eta


# -- excitation ---------------------------------------------------------------

Profile = Callable[[np.ndarray], tuple]

# name -> callable(xy) returning (phi, grad_phi)
PROFILES: dict[str, Profile] = {
    "constant": lambda xy: (np.ones(len(xy)), np.zeros_like(xy)),
    "linear_x": lambda xy: (1.0 + 5.0 * xy[:, 0], np.tile([5.0, 0.0], (len(xy), 1))),
    "quadratic": lambda xy: (1.0 + 25.0 * (xy**2).sum(1), 50.0 * xy),
}


@dataclass(frozen=True)
class ExcitationSpec:
    """Boundary source ``g(t,x) = A f (cos(w t) + a) * RobinTrace(phi)``.

    ``f`` is 2 for ``psi_kind="doubled"`` (third experiment) and 1 otherwise.
    For the constant profile the Robin trace is normalized to 1.
    """

    T: float
    a_offset: float = 1.0
    amplitude: float = 1.0
    psi_kind: str = "cos"
    profile: str = "constant"

    def __post_init__(self):
        if self.T <= 0:
            raise ValueError("period T must be positive")
        if self.amplitude < 0:
            raise ValueError("amplitude must be non-negative")
        a = self.a_offset
        if not (a < -1.0 or a > -0.25):
            raise ValueError(f"offset {a} outside (-inf,-1) U (-1/4,inf)")
        if self.psi_kind not in ("cos", "doubled"):
            raise ValueError(f"unknown psi_kind {self.psi_kind!r}")

    @property
    def omega(self) -> float:
        return 2.0 * math.pi / self.T

    @property
    def factor(self) -> float:
        return 2.0 if self.psi_kind == "doubled" else 1.0

    def psi(self, t):
        return self.amplitude * self.factor * (np.cos(self.omega * np.asarray(t)) + self.a_offset)

    def doubled(self) -> "ExcitationSpec":
        return replace(self, psi_kind="doubled")

    def scaled(self, factor: float) -> "ExcitationSpec":
        return replace(self, amplitude=self.amplitude * factor)


def _nodal_normals(mesh: Mesh2D) -> np.ndarray:
    n = np.zeros_like(mesh.nodes)
    w = mesh.edge_lengths[:, None] * mesh.normals
    np.add.at(n, mesh.boundary_edges[:, 0], w)
    np.add.at(n, mesh.boundary_edges[:, 1], w)
    nrm = np.linalg.norm(n, axis=1)
    nz = nrm > 0
    n[nz] /= nrm[nz, None]
    return n


def build_source(spec: ExcitationSpec, mesh: Mesh2D, N: int, gamma: float = 1.0) -> np.ndarray:
    """Boundary harmonic data ``g[m, node]`` (zero at interior nodes)."""
    if N < 2:
        raise ValueError("N >= 2 is required to represent second-harmonic generation")
    g = np.zeros((N + 1, mesh.n_nodes), dtype=complex)
    bn = mesh.boundary_nodes
    if spec.profile == "constant":
        trace = np.ones(len(bn))
    else:
        try:
            phi, grad = PROFILES[spec.profile](mesh.nodes[bn])
        except KeyError:
            raise ValueError(f"unknown spatial profile {spec.profile!r}") from None
        normals = _nodal_normals(mesh)[bn]
        trace = gamma * phi + np.sum(grad * normals, axis=1)
    if not np.any(np.abs(trace) > 1e-14):
        warnings.warn("source profile has vanishing Robin trace; excitation is zero",
                      RuntimeWarning, stacklevel=2)
    amp = spec.amplitude * spec.factor
    g[0, bn] = amp * spec.a_offset * trace
    g[1, bn] = amp * trace
    return g


# -- solver ---------------------------------------------------------------------

def degeneracy_margin(params: ParameterSet, u: HarmonicField) -> float:
    """``min_{t,x} b - 2 eta u(t,x)`` over the ``4N+1`` collocation grid."""
    if not np.any(params.eta):
        return float(params.b.min())
    samples = sample_time(u, collocation_times(u.omega, 4 * u.N + 1))
    return float(np.min(params.b[None, :] - 2.0 * params.eta[None, :] * samples))


class HelmholtzSystem:
    """Per-harmonic Robin-Helmholtz factorizations at fixed coefficients.

    ``operator="local"`` factorizes with the nodal ``kappa_m(x)``;
    ``operator="background"`` factorizes with ``kappa_m`` built from the scalar
    ``background=(s_ref, b_ref)`` and moves the difference to the right-hand
    side of the fixed-point iteration (same fixed point, reusable factors).
    """

    def __init__(self, ops: AssembledOperators, params: ParameterSet, omega: float, N: int,
                 operator: str = "local", background=None):
        if operator not in ("local", "background"):
            raise ValueError(f"unknown operator mode {operator!r}")
        self.ops = ops
        self.params = params.validate()
        self.omega = float(omega)
        self.N = int(N)
        self.operator = operator
        if background is None:
            background = (float(np.median(params.s)), float(np.median(params.b)))
        self.background = background
        self._factors: dict[int, HelmholtzFactor] = {}
        m = np.arange(N + 1)[:, None]
        denom = params.s[None, :] + 1j * m * self.omega
        # m^2 kappa_m^2 and the nonlinear weight -eta m^2 w^2 / (s + i m w)
        self.k2 = (m * self.omega) ** 2 * params.b[None, :] / denom
        self.nl = -params.eta[None, :] * (m * self.omega) ** 2 / denom
        self.denom = denom
        if operator == "background":
            s0, b0 = self.background
            self.k2_op = (m * self.omega) ** 2 * b0 / (s0 + 1j * m * self.omega)
            self.k2_op = np.broadcast_to(self.k2_op, self.k2.shape)
        else:
            self.k2_op = self.k2

    def factor(self, m: int) -> HelmholtzFactor:
        if m not in self._factors:
            kt = self.k2_op[m] if m else 0.0
            self._factors[m] = HelmholtzFactor(self.ops, kt, check_condition=(m == 0))
        return self._factors[m]

    def solve(self, m: int, nodal_rhs, g=None):
        load = self.ops.M @ nodal_rhs
        if g is not None:
            load = load + self.ops.B1 @ g
        return self.factor(m).solve(load)


@dataclass
class ForwardSolution:
    u: HarmonicField
    history: list = field(default_factory=list)
    scale: float = 1.0
    margin: float = math.inf


def _sweep(system: HelmholtzSystem, g, coeffs, nonlinear: bool):
    N = system.N
    new = np.empty_like(coeffs)
    n = coeffs.shape[1]
    for m in range(N + 1):
        rhs = np.zeros(n, dtype=complex)
        if nonlinear and m > 0:
            rhs += system.nl[m] * cauchy_correlation(coeffs, coeffs, m)
        if system.operator == "background" and m > 0:
            rhs += (system.k2[m] - system.k2_op[m]) * coeffs[m]
        if m == 0:
            new[0] = system.solve(0, rhs.real, g[0].real)
        else:
            new[m] = system.solve(m, rhs, g[m])
    return new


def solve_forward(params: ParameterSet, source, N: int, omega: float, ops: AssembledOperators,
                  fp_tol: float = 1e-10, max_fp_iters: int = 50, operator: str = "local",
                  system: HelmholtzSystem | None = None) -> ForwardSolution:
    """Fixed-point solution of the coupled multiharmonic system.

    ``source`` is the boundary data ``g[m, node]`` (``m = 0..N``). The
    iteration stops once the relative update ``|u^{k+1} - u^k| / |u^{k+1}|``
    drops below ``fp_tol``.
    """
    g = np.asarray(source, dtype=complex)
    if g.shape[0] < N + 1:
        g = np.vstack([g, np.zeros((N + 1 - g.shape[0], g.shape[1]))])
    g = g[:N + 1]
    if system is None:
        system = HelmholtzSystem(ops, params, omega, N, operator)
    nonlinear = bool(np.any(params.eta))
    coeffs = np.zeros((N + 1, ops.mesh.n_nodes), dtype=complex)
    # linear start: eta = 0 (background mode still needs its own iteration)
    lin_iters = 1 if system.operator == "local" else max_fp_iters
    for _ in range(lin_iters):
        nxt = _sweep(system, g, coeffs, nonlinear=False)
        delta = np.linalg.norm(nxt - coeffs) / max(np.linalg.norm(nxt), 1e-300)
        coeffs = nxt
        if delta < fp_tol:
            break
    history = []
    needs_iteration = nonlinear or system.operator == "background"
    margin = degeneracy_margin(params, HarmonicField(coeffs, omega))
    if margin <= 0:
        raise DegenerateError(f"degenerate: margin b - 2 eta u = {margin:.3e}")
    if not needs_iteration:
        return ForwardSolution(HarmonicField(coeffs, omega), [0.0], 1.0, margin)
    for it in range(max_fp_iters):
        nxt = _sweep(system, g, coeffs, nonlinear)
        res = np.linalg.norm(nxt - coeffs) / max(np.linalg.norm(nxt), 1e-300)
        coeffs = nxt
        history.append(float(res))
        margin = degeneracy_margin(params, HarmonicField(coeffs, omega))
        if margin <= 0:
            raise DegenerateError(f"degenerate: margin b - 2 eta u = {margin:.3e} at iteration {it}")
        if res < fp_tol:
            return ForwardSolution(HarmonicField(coeffs, omega), history, 1.0, margin)
        if len(history) >= 3 and history[-1] >= history[-2] >= history[-3]:
            break
    raise NonConvergenceError(
        f"fixed-point iteration did not converge (last residual {history[-1]:.2e})", history)


def solve_forward_backoff(params, source, N, omega, ops, max_halvings: int = 6, **kw) -> ForwardSolution:
    """:func:`solve_forward`, halving the source until the iteration is admissible."""
    scale = 1.0
    for _ in range(max_halvings + 1):
        try:
            sol = solve_forward(params, np.asarray(source) * scale, N, omega, ops, **kw)
            sol.scale = scale
            if scale != 1.0:
                log.warning("source amplitude reduced by factor %g", scale)
            return sol
        except (DegenerateError, NonConvergenceError) as exc:
            log.info("forward solve failed at scale %g: %s", scale, exc)
            scale *= 0.5
    raise NonConvergenceError(f"no admissible amplitude after {max_halvings} halvings", [])
