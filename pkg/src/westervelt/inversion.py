"""Regularized frozen Newton reconstruction of ``(s, b, eta)``.

The iteration works with dimensionless unknowns: the relative contrasts
``z_q = (x_q - x0_q) / scale_q`` measured in the area-normalized mass norm
``||z||^2 = sum_q z_q^T M z_q / |Omega|`` and data divided by the norm of the
measured data. In these variables

    z_{n+1} = z_n + (K*K + alpha_n I)^{-1} (K*(h - F(x_n)) - alpha_n z_n)

with ``alpha_n = alpha0 q^n`` and ``K`` frozen at ``x0``.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .fem import AssembledOperators
from .forward import (DegenerateError, NonConvergenceError, ParameterSet,
                      build_source, solve_forward)
from .sensitivity import FrozenLinearization, MeasurementSet, observe

log = logging.getLogger(__name__)

COMPONENTS = ("s", "b", "eta")


class CGStagnation(RuntimeError):
    def __init__(self, message, history):
        super().__init__(message)
        self.history = list(history)


class DivergenceError(RuntimeError):
    pass


@dataclass
class NewtonConfig:
    alpha0: float = 1.0
    q: float = 0.6
    max_iters: int = 20
    cg_tol: float = 1e-8
    cg_max_iters: int = 200
    delta: float = 0.0            # relative noise level of the data
    stopping: str = "fixed"       # "fixed" | "rule"
    tau: float = 6e-4             # calibrated threshold of delta^2 / alpha_n
    x0: ParameterSet | None = None
    scales: tuple = (None, None, None)   # None: automatic, see ReconstructionProblem
    components: tuple = COMPONENTS
    N: int = 4
    fp_tol: float = 1e-10
    divergence_rtol: float = 1e-6
    keep_snapshots: bool = False

    def __post_init__(self):
        if self.alpha0 <= 0:
            raise ValueError("alpha0 must be positive")
        if not 0 < self.q < 1:
            raise ValueError("q must lie in (0, 1)")
        if self.stopping not in ("fixed", "rule"):
            raise ValueError(f"unknown stopping mode {self.stopping!r}")
        if any(c not in COMPONENTS for c in self.components):
            raise ValueError(f"components must be drawn from {COMPONENTS}")

    def alpha(self, n: int) -> float:
        return self.alpha0 * self.q**n


@dataclass
class NewtonHistory:
    J: list = field(default_factory=list)
    misfit: list = field(default_factory=list)
    alpha: list = field(default_factory=list)
    cg_iters: list = field(default_factory=list)
    snapshots: list = field(default_factory=list)
    status: str = "running"
    stop_index: int | None = None
    tau: float | None = None

    def __len__(self):
        return len(self.J)

    def to_csv(self, path) -> None:
        with open(path, "w") as fh:
            fh.write("iter,J,misfit,alpha,cg_iters\n")
            for i, row in enumerate(zip(self.J, self.misfit, self.alpha, self.cg_iters)):
                fh.write(f"{i},{row[0]!r},{row[1]!r},{row[2]!r},{row[3]}\n")


# -- noise ----------------------------------------------------------------------

def add_noise(meas: MeasurementSet, level: float, seed=None) -> MeasurementSet:
    """White Gaussian noise rescaled to relative norm ``level`` exactly."""
    if level < 0:
        raise ValueError("noise level must be non-negative")
    if level == 0:
        return meas.copy(delta=0.0)
    rng = np.random.default_rng(seed)
    noise = []
    for t in meas.traces:
        e = rng.standard_normal(t.shape) + 1j * rng.standard_normal(t.shape)
        e[0] = e[0].real
        noise.append(e)
    noise_set = meas.copy(noise)
    target = level * meas.norm()
    noise_set = noise_set * (target / noise_set.norm())
    out = meas + noise_set
    out.delta = target
    return out


# -- stopping ---------------------------------------------------------------------

def stopping_index(delta: float, alpha_schedule, tau: float = 6e-4, c_rho: float | None = None,
                   max_iters: int | None = None) -> int:
    """Largest ``n`` with ``delta^2 / alpha_n <= tau`` (``max_iters`` when ``delta = 0``).

    ``alpha_schedule`` is either ``(alpha0, q)`` or an explicit sequence.
    ``c_rho`` only enters the diagnostic :func:`stopping_sum`.
    """
    if delta < 0:
        raise ValueError("delta must be non-negative")
    if c_rho is not None and not 0 < c_rho < 1:
        raise ValueError("c_rho must lie in (0, 1)")
    if isinstance(alpha_schedule, tuple) and len(alpha_schedule) == 2:
        a0, q = alpha_schedule
        if max_iters is None:
            raise ValueError("max_iters is required for a geometric schedule")
        alphas = a0 * q ** np.arange(max_iters + 1)
    else:
        alphas = np.asarray(alpha_schedule, dtype=float)
        if max_iters is None:
            max_iters = len(alphas) - 1
    if delta == 0:
        return int(max_iters)
    ok = np.flatnonzero(delta**2 / alphas[:max_iters + 1] <= tau)
    return int(ok.max()) if ok.size else 0


def stopping_sum(delta, alpha0, q, c_rho, n_star) -> float:
    """``delta * sum_{k<n*} c_rho^k alpha_{n*-k-1}^{-1/2}`` (should vanish with delta)."""
    k = np.arange(n_star)
    return float(delta * np.sum(c_rho**k * (alpha0 * q ** (n_star - k - 1)) ** -0.5))


# -- scaled problem ------------------------------------------------------------------

class ReconstructionProblem:
    """Forward map, frozen linearization and scalings shared by all Newton steps."""

    def __init__(self, ops: AssembledOperators, sources, N: int, x0: ParameterSet,
                 data: MeasurementSet, scales=(None, None, None),
                 components=COMPONENTS, fp_tol: float = 1e-10):
        self.ops = ops
        self.N = N
        self.x0 = x0.validate()
        self.fp_tol = fp_tol
        self.specs = list(sources)
        self.sources = [build_source(sp_, ops.mesh, N, ops.gamma) for sp_ in self.specs]
        self.omegas = [sp_.omega for sp_ in self.specs]
        if len(data.traces) != len(self.specs):
            raise ValueError("data and sources describe a different number of experiments")
        self.data = data
        self.data_norm = data.norm()
        if self.data_norm == 0:
            raise ValueError("measured data vanish identically")
        self.mask = np.array([c in components for c in COMPONENTS], dtype=float)
        self.area = float(ops.M.sum())
        self._mass_blocks = sp.block_diag([ops.M] * 3, format="csr") / self.area
        self.lin = FrozenLinearization(ops, self.x0, self.forward_states(self.x0))
        self.scales = self._resolve_scales(scales)

    def _resolve_scales(self, scales):
        """Fill ``None`` entries: mean background for s and b; for eta the
        uniform change whose data norm equals that of a 100% change of b."""
        s_sc, b_sc, e_sc = scales
        s_sc = float(np.mean(self.x0.s)) if s_sc is None else float(s_sc)
        b_sc = float(np.mean(self.x0.b)) if b_sc is None else float(b_sc)
        if e_sc is None:
            one = np.ones(self.ops.mesh.n_nodes)
            zero = np.zeros_like(one)
            kb = self.lin.apply_K([zero, one, zero]).norm()
            ke = self.lin.apply_K([zero, zero, one]).norm()
            e_sc = b_sc * kb / ke if ke > 0 else 1.0
        out = np.array([s_sc, b_sc, float(e_sc)])
        if np.any(out <= 0) or not np.all(np.isfinite(out)):
            raise ValueError(f"parameter scales must be positive, got {out}")
        return out

    # conversions
    def params(self, z) -> ParameterSet:
        z = np.asarray(z).reshape(3, -1)
        return ParameterSet.from_stack(self.x0.stack() + self.scales[:, None] * z * self.mask[:, None])

    def contrast(self, params: ParameterSet) -> np.ndarray:
        return (params.stack() - self.x0.stack()) / self.scales[:, None]

    # forward
    def forward_states(self, params: ParameterSet):
        return [solve_forward(params, g, self.N, w, self.ops, fp_tol=self.fp_tol).u
                for g, w in zip(self.sources, self.omegas)]

    def forward(self, params: ParameterSet) -> MeasurementSet:
        return observe(self.forward_states(params), self.ops.mesh, gram=self.lin.gram)

    # scaled operators
    def K(self, z) -> MeasurementSet:
        z = np.asarray(z).reshape(3, -1)
        d = self.scales[:, None] * self.mask[:, None] * z
        return self.lin.apply_K(d) * (1.0 / self.data_norm)

    def Kstar(self, y: MeasurementSet) -> np.ndarray:
        g = self.lin.apply_Kstar(y)
        # adjoint w.r.t. the area-normalized product
        return self.area * self.scales[:, None] * self.mask[:, None] * g / self.data_norm

    def inner(self, a, b) -> float:
        a = np.asarray(a).ravel()
        b = np.asarray(b).ravel()
        return float(a @ (self._mass_blocks @ b))

    def residual(self, params: ParameterSet) -> MeasurementSet:
        """Normalized ``h - F(x)``."""
        return (self.data - self.forward(params)) * (1.0 / self.data_norm)


def normal_operator(problem: ReconstructionProblem, alpha: float):
    n3 = 3 * problem.ops.mesh.n_nodes

    def apply(z):
        z = np.asarray(z).ravel()
        return (problem.Kstar(problem.K(z)).ravel() + alpha * z)

    return spla.LinearOperator((n3, n3), matvec=apply, dtype=float)


def newton_step(problem: ReconstructionProblem, z_n, residual: MeasurementSet, alpha: float,
                cg_tol: float = 1e-8, cg_max_iters: int = 200):
    """One frozen Newton update; returns ``(z_{n+1}, cg_iterations)``.

    CG runs on ``M_blk A`` with preconditioner ``M_blk^{-1}``, which is CG for
    the self-adjoint operator ``A = K*K + alpha I`` in the mass inner product.
    """
    z_n = np.asarray(z_n, dtype=float).ravel()
    rhs = problem.Kstar(residual).ravel() - alpha * z_n
    if not np.any(rhs):
        return z_n.copy(), 0
    A = normal_operator(problem, alpha)
    Mb = problem._mass_blocks
    n3 = Mb.shape[0]
    lu = spla.splu((problem.ops.M / problem.area).tocsc())
    n = problem.ops.mesh.n_nodes

    def prec(v):
        v = np.asarray(v).reshape(3, n)
        return np.concatenate([lu.solve(vi) for vi in v])

    sysop = spla.LinearOperator((n3, n3), matvec=lambda v: Mb @ A.matvec(v), dtype=float)
    precop = spla.LinearOperator((n3, n3), matvec=prec, dtype=float)
    count = [0]

    def cb(_):
        count[0] += 1

    b = Mb @ rhs
    dz, info = spla.cg(sysop, b, rtol=cg_tol, maxiter=cg_max_iters, M=precop, callback=cb)
    if info != 0:
        res = np.linalg.norm(sysop.matvec(dz) - b) / np.linalg.norm(b)
        raise CGStagnation(f"CG did not reach tol {cg_tol:g} in {count[0]} iterations "
                           f"(relative residual {res:.2e})", [res])
    return z_n + dz, count[0]


def run_reconstruction(config: NewtonConfig, data: MeasurementSet, sources, ops: AssembledOperators,
                       callback=None, problem: ReconstructionProblem | None = None):
    """Frozen Newton iteration; returns ``(ParameterSet, NewtonHistory)``.

    ``history.status`` is ``"converged"`` when the iteration budget was used,
    ``"stopped"`` when the noise-dependent rule ended it early and
    ``"diverged"`` after three consecutive increases of ``J_n``.
    """
    if isinstance(data, (list, tuple)):
        traces = [t for m in data for t in m.traces]
        omegas = [w for m in data for w in m.omegas]
        data = MeasurementSet(traces, omegas, data[0].nodes, data[0].gram,
                              float(np.sqrt(sum(m.delta**2 for m in data))))
    if len(data.traces) != 3:
        log.warning("reconstruction with %d experiments (three expected)", len(data.traces))
    if problem is None:
        x0 = config.x0
        if x0 is None:
            raise ValueError("config.x0 is required")
        problem = ReconstructionProblem(ops, sources, config.N, x0, data, config.scales,
                                        config.components, config.fp_tol)
    hist = NewtonHistory(tau=config.tau)
    n_max = config.max_iters
    rel_delta = config.delta
    if config.stopping == "rule":
        n_max = min(n_max, stopping_index(rel_delta, (config.alpha0, config.q), config.tau,
                                          max_iters=config.max_iters))
        hist.stop_index = n_max
        log.info("stopping index %d from delta=%g, tau=%g", n_max, rel_delta, config.tau)
    z = np.zeros(3 * ops.mesh.n_nodes)
    params = problem.x0
    increases = 0
    for n in range(n_max):
        alpha = config.alpha(n)
        try:
            res = problem.residual(params)
        except (DegenerateError, NonConvergenceError) as exc:
            hist.status = "diverged"
            raise DivergenceError(f"forward solve failed at iteration {n}: {exc}") from exc
        z_new, iters = newton_step(problem, z, res, alpha, config.cg_tol, config.cg_max_iters)
        lin_res = problem.K(z_new - z) - res
        J = lin_res.norm() ** 2 + alpha * problem.inner(z_new, z_new)
        hist.J.append(float(J))
        hist.misfit.append(res.norm())
        hist.alpha.append(alpha)
        hist.cg_iters.append(iters)
        z = z_new
        params = problem.params(z)
        if config.keep_snapshots:
            hist.snapshots.append(params)
        log.info("iter %d: J=%.4e misfit=%.4e alpha=%.3e cg=%d", n, J, res.norm(), alpha, iters)
        if callback is not None:
            callback(n, params, hist)
        if len(hist.J) >= 2 and hist.J[-1] > hist.J[-2] * (1 + config.divergence_rtol):
            increases += 1
        else:
            increases = 0
        if increases >= 3:
            hist.status = "diverged"
            log.error("J_n increased for three consecutive iterations; halting at %d", n)
            return params, hist
    hist.status = "stopped" if n_max < config.max_iters else "converged"
    return params, hist


# -- reconstruction diagnostics ------------------------------------------------------

def contrast_centroid(ops: AssembledOperators, field, expected_sign: float = 0.0,
                      threshold: float = 0.5):
    """Area-weighted centroid of nodes whose contrast exceeds ``threshold * max``.

    With ``expected_sign != 0`` only contrast of that sign is considered.
    Returns ``(centroid, peak_sign)``.
    """
    f = np.asarray(field, dtype=float)
    if expected_sign:
        g = f * math.copysign(1.0, expected_sign)
        g = np.where(g > 0, g, 0.0)
    else:
        g = np.abs(f)
    peak = g.max()
    if peak <= 0:
        return np.array([np.nan, np.nan]), 0.0
    sel = g >= threshold * peak
    w = ops.lumped_areas() * sel * g
    c = (ops.mesh.nodes * w[:, None]).sum(0) / w.sum()
    i = np.argmax(np.abs(f))
    return c, float(np.sign(f[i]))


__all__ = [
    "NewtonConfig", "NewtonHistory", "ReconstructionProblem", "add_noise", "stopping_index",
    "stopping_sum", "newton_step", "run_reconstruction", "contrast_centroid", "CGStagnation",
    "DivergenceError",
]
