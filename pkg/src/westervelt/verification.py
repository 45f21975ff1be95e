"""Numerical verification suites: adjoint identity, Taylor remainder, range invariance."""

from __future__ import annotations

import numpy as np

from .aao import AaoExperiment, admissible_reference, c_rho_curve, check_range_invariance
from .fem import AssembledOperators
from .forward import ExcitationSpec, ParameterSet, build_source, solve_forward
from .sensitivity import FrozenLinearization, observe


def smooth_perturbation(mesh, rng, n_modes: int = 3) -> np.ndarray:
    """Random combination of low-order trigonometric modes, scaled to sup norm 1."""
    x, y = mesh.nodes.T
    r = np.max(np.hypot(x, y))
    f = np.zeros(mesh.n_nodes)
    for _ in range(n_modes):
        kx, ky = rng.uniform(-3, 3, 2) / r
        f += rng.standard_normal() * np.cos(kx * x + ky * y + rng.uniform(0, 2 * np.pi))
    return f / np.abs(f).max()


def random_interior_point(mesh, rng, s0=2000.0, b0=20.0, eta_max=4e-4) -> ParameterSet:
    s = s0 * (1 + 0.01 * smooth_perturbation(mesh, rng))
    b = b0 * (1 + 0.01 * smooth_perturbation(mesh, rng))
    eta = eta_max * (0.5 + 0.25 * smooth_perturbation(mesh, rng))
    return ParameterSet(s, b, eta)


def _states(params, specs, ops, N, fp_tol=1e-13):
    return [solve_forward(params, build_source(sp, ops.mesh, N, ops.gamma), N, sp.omega, ops,
                          fp_tol=fp_tol).u for sp in specs]


def default_specs(T1=0.02, T2=0.014, amplitude=2000.0):
    e1 = ExcitationSpec(T1, 1.0, amplitude)
    return [e1, ExcitationSpec(T2, 1.0, amplitude), e1.doubled()]


def adjoint_suite(ops: AssembledOperators, params: ParameterSet, specs, N: int = 4,
                  n_pairs: int = 50, seed: int = 0) -> dict:
    rng = np.random.default_rng(seed)
    lin = FrozenLinearization(ops, params, _states(params, specs, ops, N))
    errs = [lin.self_test(rng, tol=np.inf) for _ in range(n_pairs)]
    return {"adjoint_pairs": n_pairs, "adjoint_max_rel_err": float(max(errs))}


def taylor_suite(ops: AssembledOperators, params: ParameterSet, specs, N: int = 4,
                 eps=(1e-1, 5e-2, 2.5e-2, 1.25e-2), seed: int = 0) -> dict:
    """Remainder ``|F(x + e d) - F(x) - e K d|`` against ``e``; slope from a log-log fit."""
    rng = np.random.default_rng(seed)
    mesh = ops.mesh
    d = np.array([params.s.mean() * 0.05 * smooth_perturbation(mesh, rng),
                  params.b.mean() * 0.05 * smooth_perturbation(mesh, rng),
                  np.abs(params.eta).max() * 0.5 * smooth_perturbation(mesh, rng)])
    states = _states(params, specs, ops, N)
    lin = FrozenLinearization(ops, params, states)
    F0 = observe(states, mesh, ops)
    Kd = lin.apply_K(d)
    rem = []
    for e in eps:
        xe = ParameterSet.from_stack(params.stack() + e * d)
        Fe = observe(_states(xe, specs, ops, N), mesh, ops)
        rem.append((Fe - F0 - Kd * e).norm())
    slope = float(np.polyfit(np.log(eps), np.log(rem), 1)[0])
    out = {"taylor_slope": slope}
    for e, r in zip(eps, rem):
        out[f"taylor_remainder[{e:g}]"] = float(r)
    return out


def range_suite(ops: AssembledOperators, n_pairs: int = 20, seed: int = 0,
                omegas=(2 * np.pi / 0.02, 2 * np.pi / 0.014), n_times: int = 17,
                magnitudes=tuple(np.geomspace(1e-6, 1e-1, 11))) -> dict:
    """Range-invariance residual over random admissible pairs and the measured ``c_rho`` curve."""
    rng = np.random.default_rng(seed)
    mesh = ops.mesh
    worst = 0.0
    bg = ParameterSet.constant(mesh.n_nodes, 2000.0, 20.0, 0.0)
    for _ in range(n_pairs):
        x0 = [admissible_reference(ops, bg, w, n_times, rng) for w in omegas]
        x = []
        for e0 in x0:
            pert = {k: smooth_perturbation(mesh, rng)[None, :] * np.ones((n_times, 1))
                    for k in ("s", "b", "eta", "u")}
            x.append(AaoExperiment(e0.s * (1 + 0.05 * pert["s"]), e0.b * (1 + 0.05 * pert["b"]),
                                   1e-4 * (1 + 0.5 * pert["eta"]),
                                   e0.u * (1 + 0.1 * pert["u"]), e0.robin, e0.omega))
        worst = max(worst, check_range_invariance(x, x0, ops))
    x0 = [admissible_reference(ops, bg, w, n_times, rng) for w in omegas]
    direction = []
    for e0 in x0:
        f = {k: smooth_perturbation(mesh, rng)[None, :] * np.ones((n_times, 1))
             for k in ("s", "b", "eta", "u")}
        direction.append(AaoExperiment(e0.s * f["s"], e0.b * f["b"], 1e-4 * f["eta"],
                                       np.abs(e0.u).max() * f["u"], np.zeros_like(e0.robin),
                                       e0.omega))
    mags, ratios, radius = c_rho_curve(x0, direction, ops, magnitudes)
    out = {"range_pairs": n_pairs, "range_max_rel_residual": float(worst),
           "c_rho_radius": float(radius)}
    for m, q in zip(mags, ratios):
        out[f"c_rho[{m:g}]"] = float(q)
    return out


def format_report(report: dict) -> str:
    lines = []
    for k, v in report.items():
        lines.append(f"{k}: {v:.6e}" if isinstance(v, float) else f"{k}: {v}")
    return "\n".join(lines)


__all__ = ["adjoint_suite", "taylor_suite", "range_suite", "format_report", "smooth_perturbation",
           "random_interior_point", "default_specs"]
