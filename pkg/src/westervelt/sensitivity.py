"""Frozen linearized forward map ``K = F'(x0)`` and its discrete adjoint.

``K`` maps nodal increments ``(ds, db, deta)`` to the harmonic traces on the
observation arc of the linearized states ``du_j`` (one per experiment).
For ``m >= 1`` each ``du_m`` solves

    -kappa_m^2 m^2 du_m - lap du_m = c_m 2[u0 du]_m + alpha_m ds + beta_m db + zeta_m deta

with homogeneous Robin data, where ``c_m = -eta0 m^2 w^2/(s0 + i m w)``,
``alpha_m = lap u0_m/(s0 + i m w)``, ``beta_m = m^2 w^2 u0_m/(s0 + i m w)`` and
``zeta_m = -m^2 w^2 [u0^2]_m/(s0 + i m w)``. ``alpha_m`` is evaluated as
``-(m^2 kappa_m^2 u0_m + nl_m [u0^2]_m)/(s0 + i m w)``, which equals the
discrete Laplacian whenever ``u0`` solves the discrete state equation and is
the exact derivative of the discrete forward map in all cases.

``K*`` is the adjoint with respect to the parameter product
``sum_q d_q^T M e_q`` and the measurement product
``Re sum_m w_m y_m^H B_sigma z_m`` with ``w_0 = 1``, ``w_m = 1/2``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .fem import AssembledOperators, Mesh2D
from .forward import HelmholtzSystem, ParameterSet
from .harmonics import HarmonicField, cauchy_correlation


class ConfigurationError(RuntimeError):
    """Inner products of ``K`` and ``K*`` are inconsistent."""


def harmonic_weights(N: int) -> np.ndarray:
    w = np.full(N + 1, 0.5)
    w[0] = 1.0
    return w


@dataclass(eq=False)
class MeasurementSet:
    """Harmonic traces ``traces[j][m, k]`` at the observation nodes."""

    traces: list
    omegas: list
    nodes: np.ndarray
    gram: object  # B_sigma restricted to ``nodes``
    delta: float = 0.0

    @property
    def n_experiments(self) -> int:
        return len(self.traces)

    def copy(self, traces=None, delta=None) -> "MeasurementSet":
        tr = [t.copy() for t in (self.traces if traces is None else traces)]
        return MeasurementSet(tr, list(self.omegas), self.nodes, self.gram,
                              self.delta if delta is None else delta)

    def inner(self, other: "MeasurementSet") -> float:
        total = 0.0
        for a, b in zip(self.traces, other.traces):
            w = harmonic_weights(a.shape[0] - 1)
            gb = (self.gram @ b.T).T
            total += float(np.sum(w * np.sum(np.conj(a) * gb, axis=1).real))
        return total

    def norm(self) -> float:
        return float(np.sqrt(max(self.inner(self), 0.0)))

    def _combine(self, other, op):
        return self.copy([op(a, b) for a, b in zip(self.traces, other.traces)])

    def __add__(self, other):
        return self._combine(other, np.add)

    def __sub__(self, other):
        return self._combine(other, np.subtract)

    def __mul__(self, scalar):
        return self.copy([a * scalar for a in self.traces])

    __rmul__ = __mul__

    def flat(self) -> np.ndarray:
        return np.concatenate([t.ravel() for t in self.traces])


def sigma_gram(ops: AssembledOperators):
    nodes = ops.mesh.sigma_nodes
    return ops.B_sigma.tocsr()[nodes][:, nodes]


def observe(u, mesh: Mesh2D, ops: AssembledOperators | None = None, gram=None) -> MeasurementSet:
    """Dirichlet traces on the observation arc of one or several states."""
    fields = u if isinstance(u, (list, tuple)) else [u]
    nodes = mesh.sigma_nodes
    if nodes.size == 0:
        raise ValueError("observation arc is empty")
    if gram is None:
        if ops is None:
            from .fem import boundary_mass
            gram = boundary_mass(mesh, 1.0, mesh.sigma_mask).tocsr()[nodes][:, nodes]
        else:
            gram = sigma_gram(ops)
    return MeasurementSet([f.coeffs[:, nodes].copy() for f in fields],
                          [f.omega for f in fields], nodes, gram)


def _coupling_coeffs(u0: np.ndarray):
    """Nodal coefficients of ``P(v)_m = 2[u0 v]_m = sum_j a[m,j] v_j + b[m,j] conj(v_j)``."""
    N = u0.shape[0] - 1
    n = u0.shape[1]
    a = np.zeros((N + 1, N + 1, n), dtype=complex)
    b = np.zeros((N + 1, N + 1, n), dtype=complex)
    for m in range(1, N + 1):
        for j in range(m + 1):
            a[m, j] += u0[m - j]
        for i in range(N - m + 1):
            a[m, i + m] += np.conj(u0[i])
            b[m, i] += u0[i + m]
    return a, b


class _ExperimentBlock:
    def __init__(self, ops, params0: ParameterSet, u0: HarmonicField, fp_tol, max_iters):
        self.ops = ops
        self.N = u0.N
        self.omega = u0.omega
        self.system = HelmholtzSystem(ops, params0, u0.omega, u0.N, "local")
        sysm = self.system
        c0 = u0.coeffs
        N = self.N
        sq = np.array([cauchy_correlation(c0, c0, m) for m in range(N + 1)])
        self.alpha = -(sysm.k2 * c0 + sysm.nl * sq) / sysm.denom
        mw2 = (np.arange(N + 1)[:, None] * self.omega) ** 2
        self.beta = mw2 * c0 / sysm.denom
        self.zeta = -mw2 * sq / sysm.denom
        self.c = sysm.nl.copy()
        self.c[0] = 0.0
        self.coupled = bool(np.any(self.c))
        self.a, self.b = _coupling_coeffs(c0)
        self.fp_tol = fp_tol
        self.max_iters = max_iters
        for m in range(N + 1):
            sysm.factor(m)

    # building blocks ---------------------------------------------------------
    def H(self, f):
        out = np.empty_like(f)
        M = self.ops.M
        for m in range(self.N + 1):
            out[m] = self.system.factor(m).solve(M @ f[m])
        out[0] = out[0].real
        return out

    def H_adj(self, z):
        out = np.empty_like(z)
        M = self.ops.M
        for m in range(self.N + 1):
            out[m] = M @ self.system.factor(m).solve_adjoint(z[m])
        out[0] = out[0].real
        return out

    def P(self, v):
        out = np.zeros_like(v)
        for m in range(1, self.N + 1):
            out[m] = np.sum(self.a[m] * v + self.b[m] * np.conj(v), axis=0)
        return out

    def P_adj(self, z):
        out = np.zeros_like(z)
        for m in range(1, self.N + 1):
            out += np.conj(self.a[m]) * z[m] + self.b[m] * np.conj(z[m])
        return out

    def _fixed_point(self, first, step):
        x = first
        if not self.coupled:
            return x
        nrm0 = max(np.linalg.norm(first), 1e-300)
        for _ in range(self.max_iters):
            nxt = first + step(x)
            if np.linalg.norm(nxt - x) <= self.fp_tol * nrm0:
                return nxt
            x = nxt
        raise RuntimeError("linearized multiharmonic coupling did not converge")

    # linearized state and its adjoint ----------------------------------------
    def state(self, ds, db, deta):
        f = self.alpha * ds + self.beta * db + self.zeta * deta
        hf = self.H(f)
        return self._fixed_point(hf, lambda x: self.H(self.c * self.P(x)))

    def state_adjoint(self, z):
        """Euclidean adjoint of ``d -> du``; returns (gs, gb, geta) before M^{-1}."""
        q = self._fixed_point(z, lambda x: self.P_adj(np.conj(self.c) * self.H_adj(x)))
        r = self.H_adj(q)
        gs = np.sum(np.conj(self.alpha) * r, axis=0).real
        gb = np.sum(np.conj(self.beta) * r, axis=0).real
        ge = np.sum(np.conj(self.zeta) * r, axis=0).real
        return gs, gb, ge


class FrozenLinearization:
    """``K`` and ``K*`` at a frozen pair (parameters, states of each experiment).

    All factorizations are built once in the constructor and only read
    afterwards.
    """

    def __init__(self, ops: AssembledOperators, params0: ParameterSet, states,
                 fp_tol: float = 1e-14, max_iters: int = 200):
        self.ops = ops
        self.params0 = params0
        self.states = list(states)
        self.blocks = [_ExperimentBlock(ops, params0, u, fp_tol, max_iters) for u in self.states]
        self.nodes = ops.mesh.sigma_nodes
        self.gram = sigma_gram(ops)

    @property
    def n_nodes(self) -> int:
        return self.ops.mesh.n_nodes

    def linearized_states(self, d):
        ds, db, deta = (np.asarray(v, dtype=float) for v in d)
        return [HarmonicField(blk.state(ds, db, deta), blk.omega) for blk in self.blocks]

    def apply_K(self, d) -> MeasurementSet:
        dus = self.linearized_states(d)
        return MeasurementSet([u.coeffs[:, self.nodes] for u in dus],
                              [u.omega for u in dus], self.nodes, self.gram)

    def apply_Kstar(self, y: MeasurementSet) -> np.ndarray:
        """Gradient fields ``(gs, gb, geta)`` stacked as a ``(3, n)`` array."""
        if y.n_experiments != len(self.blocks):
            raise ConfigurationError("measurement set does not match the experiments")
        acc = np.zeros((3, self.n_nodes))
        for blk, tr in zip(self.blocks, y.traces):
            N = blk.N
            if tr.shape[0] != N + 1:
                raise ConfigurationError("harmonic count mismatch")
            z = np.zeros((N + 1, self.n_nodes), dtype=complex)
            w = harmonic_weights(N)
            z[:, self.nodes] = w[:, None] * (self.gram @ tr.T).T
            acc += np.array(blk.state_adjoint(z))
        return np.array([self.ops.solve_mass(g) for g in acc])

    # inner products ------------------------------------------------------------
    def param_inner(self, d, e) -> float:
        d = np.asarray(d)
        e = np.asarray(e)
        return float(sum(d[q] @ (self.ops.M @ e[q]) for q in range(3)))

    def adjoint_mismatch(self, d, y: MeasurementSet) -> float:
        Kd = self.apply_K(d)
        lhs = Kd.inner(y)
        rhs = self.param_inner(d, self.apply_Kstar(y))
        return abs(lhs - rhs) / max(Kd.norm() * y.norm(), 1e-300)

    def self_test(self, rng=None, tol: float = 1e-8) -> float:
        """Random adjoint identity check; raises :class:`ConfigurationError`."""
        rng = np.random.default_rng(rng)
        d = rng.standard_normal((3, self.n_nodes))
        y = self.apply_K(rng.standard_normal((3, self.n_nodes)))
        y = y.copy([t + (rng.standard_normal(t.shape) + 1j * rng.standard_normal(t.shape))
                    * np.abs(t).max() for t in y.traces])
        for t in y.traces:
            t[0] = t[0].real
        err = self.adjoint_mismatch(d, y)
        if err > tol:
            raise ConfigurationError(f"adjoint identity violated: relative error {err:.2e}")
        return err
