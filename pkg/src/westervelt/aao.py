"""All-at-once operator on a time-collocation grid.

Each experiment carries its (possibly time-dependent) parameters, the state
samples ``u(t_k, x)`` and the Robin datum ``gamma u + du/dn`` of the state,
all sampled on ``n_t`` equispaced instants of one period. The discrete
Laplacian of a state is ``M^{-1}(B1 robin - (K + B_gamma) u)``, so all
nonlinear terms are pointwise products of nodal vectors and the range
invariance identity ``F(x) - F(x0) = F'(x0) r(x)`` holds exactly up to
rounding. Time derivatives are spectral.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.sparse.linalg import splu

from .fem import AssembledOperators
from .forward import ParameterSet
from .harmonics import HarmonicField, collocation_times, from_samples, sample_time, \
    spectral_time_derivative


class BoundViolation(ValueError):
    """A reference state violates the lower bounds required by ``r``."""


@dataclass(frozen=True, eq=False)
class AaoExperiment:
    """Samples on the collocation grid; every array has shape ``(n_t, n_nodes)``."""

    s: np.ndarray
    b: np.ndarray
    eta: np.ndarray
    u: np.ndarray
    robin: np.ndarray
    omega: float

    def __post_init__(self):
        shape = np.shape(self.u)
        for name in ("s", "b", "eta", "robin"):
            arr = np.broadcast_to(np.asarray(getattr(self, name), dtype=float), shape)
            object.__setattr__(self, name, np.array(arr))
        object.__setattr__(self, "u", np.array(self.u, dtype=float))

    @property
    def n_times(self) -> int:
        return self.u.shape[0]

    @classmethod
    def from_harmonic(cls, params: ParameterSet, u: HarmonicField, g_hat,
                      n_times: int | None = None) -> "AaoExperiment":
        n_t = n_times or 4 * u.N + 1
        t = collocation_times(u.omega, n_t)
        g = np.zeros_like(u.coeffs)
        k = min(len(g_hat), u.N + 1)
        g[:k] = np.asarray(g_hat)[:k]
        robin = sample_time(HarmonicField(g, u.omega), t)
        us = sample_time(u, t)
        shape = us.shape
        return cls(np.broadcast_to(params.s, shape), np.broadcast_to(params.b, shape),
                   np.broadcast_to(params.eta, shape), us, robin, u.omega)

    def fields(self):
        return {"s": self.s, "b": self.b, "eta": self.eta, "u": self.u, "robin": self.robin}

    def combine(self, other: "AaoExperiment", op) -> "AaoExperiment":
        vals = {k: op(v, getattr(other, k)) for k, v in self.fields().items()}
        return AaoExperiment(**vals, omega=self.omega)


AaoPoint = list  # list of AaoExperiment, one per experiment


@dataclass(eq=False)
class AaoResidual:
    """Per-experiment model residual, Robin residual and observation samples."""

    model: list
    boundary: list
    observation: list
    omegas: list

    def harmonics(self, N: int) -> "AaoResidual":
        """Project each sampled component onto harmonics ``0..N``."""
        def proj(arrs):
            return [from_samples(a, N, w).coeffs for a, w in zip(arrs, self.omegas)]
        return AaoResidual(proj(self.model), proj(self.boundary), proj(self.observation),
                           list(self.omegas))

    def components(self):
        return {"model": self.model, "boundary": self.boundary, "observation": self.observation}


def _laplacian_samples(ops: AssembledOperators, u, robin):
    load = ops.B1 @ robin.T - ops.robin_laplace @ u.T
    return ops.solve_mass(load).T


def _dt(x, omega, order):
    return spectral_time_derivative(x, omega, order)


def eval_aao(x, ops: AssembledOperators) -> AaoResidual:
    """Model residual ``(b u - eta u^2)_tt - s lap u - (lap u)_t``, Robin datum and trace."""
    model, boundary, obs = [], [], []
    nodes = ops.mesh.sigma_nodes
    bn = ops.mesh.boundary_nodes
    for e in x:
        lap = _laplacian_samples(ops, e.u, e.robin)
        m = _dt(e.b * e.u - e.eta * e.u**2, e.omega, 2) - e.s * lap - _dt(lap, e.omega, 1)
        model.append(m)
        boundary.append(e.robin[:, bn])
        obs.append(e.u[:, nodes])
    return AaoResidual(model, boundary, obs, [e.omega for e in x])


def eval_aao_linearized(x0, dx, ops: AssembledOperators) -> AaoResidual:
    """Directional derivative of :func:`eval_aao` at ``x0`` along ``dx``."""
    model, boundary, obs = [], [], []
    nodes = ops.mesh.sigma_nodes
    bn = ops.mesh.boundary_nodes
    for e0, d in zip(x0, dx):
        lap0 = _laplacian_samples(ops, e0.u, e0.robin)
        dlap = _laplacian_samples(ops, d.u, d.robin)
        inner = e0.b * d.u - 2.0 * e0.eta * e0.u * d.u - d.eta * e0.u**2 + d.b * e0.u
        m = _dt(inner, e0.omega, 2) - e0.s * dlap - _dt(dlap, e0.omega, 1) - d.s * lap0
        model.append(m)
        boundary.append(d.robin[:, bn])
        obs.append(d.u[:, nodes])
    return AaoResidual(model, boundary, obs, [e.omega for e in x0])


def check_bounds(x0, ops: AssembledOperators, c_u: float | None = None,
                 rel: float = 1e-8):
    """Raise :class:`BoundViolation` unless ``|u0| >= c_u`` and ``|lap u0| >= c_u``.

    Without explicit ``c_u`` each bound is ``rel`` times the sup norm of the
    respective quantity.
    """
    laps = []
    for j, e in enumerate(x0):
        lap = _laplacian_samples(ops, e.u, e.robin)
        laps.append(lap)
        for name, arr in (("u0", e.u), ("lap u0", lap)):
            thr = c_u if c_u is not None else rel * np.abs(arr).max()
            k, i = np.unravel_index(np.argmin(np.abs(arr)), arr.shape)
            if not np.abs(arr[k, i]) >= thr or thr <= 0:
                raise BoundViolation(
                    f"experiment {j}: |{name}| = {abs(arr[k, i]):.3e} < {thr:.3e} "
                    f"at node {i}, time index {k}")
    return laps


def r_map(x, x0, ops: AssembledOperators, c_u: float | None = None):
    """Effective increments making the linearization at ``x0`` reproduce ``F(x) - F(x0)``."""
    laps0 = check_bounds(x0, ops, c_u)
    out = []
    for e, e0, lap0 in zip(x, x0, laps0):
        lap = _laplacian_samples(ops, e.u, e.robin)
        du = e.u - e0.u
        db = e.b - e0.b
        ds = (e.s - e0.s) * lap / lap0
        deta = (e0.eta * du**2 + (e.eta - e0.eta) * e.u**2 - db * du) / e0.u**2
        out.append(AaoExperiment(ds, db, deta, du, e.robin - e0.robin, e.omega))
    return out


def _residual_diff(a: AaoResidual, b: AaoResidual):
    return {k: [x - y for x, y in zip(va, getattr(b, k))] for k, va in a.components().items()}


def check_range_invariance(x, x0, ops: AssembledOperators, c_u: float | None = None) -> float:
    """Max relative discrepancy of ``F(x) - F(x0) - F'(x0) r(x)`` over all components."""
    lhs = _residual_diff(eval_aao(x, ops), eval_aao(x0, ops))
    rhs = eval_aao_linearized(x0, r_map(x, x0, ops, c_u), ops)
    worst = 0.0
    for k, parts in lhs.items():
        for a, b in zip(parts, getattr(rhs, k)):
            scale = np.linalg.norm(a)
            if scale == 0.0:
                worst = max(worst, float(np.linalg.norm(b) > 0))
                continue
            worst = max(worst, float(np.linalg.norm(a - b) / scale))
    return worst


def penalty_P(field, weights) -> np.ndarray:
    """Remove the weighted time mean of samples ``field[k, node]``.

    ``weights`` are the values of the weight function at the collocation
    instants (or a callable of the normalized time ``k / n_t``).
    """
    field = np.asarray(field, dtype=float)
    n_t = field.shape[0]
    if callable(weights):
        weights = weights(np.arange(n_t) / n_t)
    w = np.broadcast_to(np.asarray(weights, dtype=float), (n_t,))
    if not np.all(np.isfinite(w)) or np.any(w <= 0):
        raise ValueError("weight function must be positive and finite")
    mean = np.tensordot(w, field, axes=(0, 0)) / w.sum()
    return field - mean


def x_norm(x, ops: AssembledOperators, keys=("s", "b", "eta", "u")) -> float:
    """Space-time L2 norm with the mass matrix in space and the period mean in time."""
    total = 0.0
    for e in x:
        for k in keys:
            a = getattr(e, k)
            total += float(np.einsum("ti,ti->", a, (ops.M @ a.T).T)) / a.shape[0]
    return float(np.sqrt(total))


def c_rho_curve(x0, direction, ops: AssembledOperators, magnitudes, c_u: float | None = None):
    """``||r(x) - (x - x0)|| / ||x - x0||`` for ``x = x0 + eps * direction``.

    Returns ``(magnitudes, ratios, radius)`` where ``radius`` is the largest
    magnitude below which every measured ratio stays under 1.
    """
    mags = np.asarray(sorted(magnitudes), dtype=float)
    ratios = []
    for eps in mags:
        x = [e0.combine(d, lambda a, b: a + eps * b) for e0, d in zip(x0, direction)]
        r = r_map(x, x0, ops, c_u)
        diff = [ri.combine(replace_fields(e, e0), np.subtract) for ri, e, e0 in zip(r, x, x0)]
        inc = [replace_fields(e, e0) for e, e0 in zip(x, x0)]
        ratios.append(x_norm(diff, ops) / x_norm(inc, ops))
    ratios = np.asarray(ratios)
    radius = 0.0
    for eps, q in zip(mags, ratios):
        if q >= 1.0:
            break
        radius = eps
    return mags, ratios, radius


def replace_fields(e: AaoExperiment, e0: AaoExperiment) -> AaoExperiment:
    """Plain increment ``e - e0`` as an experiment record."""
    return e.combine(e0, np.subtract)


def admissible_reference(ops: AssembledOperators, params: ParameterSet, omega: float,
                         n_times: int, rng=None, level: float = 10.0) -> AaoExperiment:
    """A reference experiment whose state and its Laplacian stay away from zero.

    The Laplacian is prescribed as a positive space-time field and the state
    is recovered from it with a large constant Robin datum, so ``u0`` is
    dominated by ``level / gamma``.
    """
    rng = np.random.default_rng(rng)
    n = ops.mesh.n_nodes
    t = collocation_times(omega, n_times)
    xy = ops.mesh.nodes
    a, b_ = rng.uniform(0.2, 0.6, 2)
    lap = (1.5 + np.cos(omega * t)[:, None] * a) * (1.0 + b_ * np.sin(3 * xy[:, 0] + 2 * xy[:, 1]))
    robin = np.zeros((n_times, n))
    bn = ops.mesh.boundary_nodes
    robin[:, bn] = level * (1.0 + 0.1 * np.sin(omega * t))[:, None]
    load = ops.B1 @ robin.T - ops.M @ lap.T
    u = splu(ops.robin_laplace).solve(load).T
    shape = u.shape
    return AaoExperiment(np.broadcast_to(params.s, shape), np.broadcast_to(params.b, shape),
                         np.broadcast_to(params.eta, shape), u, robin, omega)


__all__ = [
    "AaoExperiment", "AaoPoint", "AaoResidual", "BoundViolation", "eval_aao",
    "eval_aao_linearized", "r_map", "check_range_invariance", "penalty_P", "c_rho_curve",
    "check_bounds", "x_norm", "admissible_reference",
]
