"""Source admissibility for linearized uniqueness on the disk.

The impedance Laplacian ``-lap`` with ``gamma u + du/dn = 0`` on the disk of
radius ``R`` has eigenvalues ``k^2`` where ``gamma J_n(kR) + k J_n'(kR) = 0``.
Each eigenvalue produces the pole ``p`` with ``b0 p^2 + lambda p + s0 lambda = 0``
(branch with negative real part). The sources pass when the 3x3 matrix of
Laplace transforms ``A[j, q] = (2/T_j) int_0^T_j D_q psi_j(t) exp(-p t) dt``
with ``D_s psi = psi``, ``D_b psi = psi''``, ``D_eta psi = (psi^2)''`` is
nonsingular at every pole, which for ``psi_3 = 2 psi_1`` splits into two
scalar conditions: the cross condition between experiments 1 and 2 and
``A[1, eta] != 0``.

``exp(-p T)`` overflows double precision for the higher poles, so the
transforms are evaluated in mpmath.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import mpmath as mp
import numpy as np
from scipy import optimize, special

from .forward import ExcitationSpec


class RootBracketError(RuntimeError):
    pass


class ResonanceError(ZeroDivisionError):
    pass


# -- spectrum -----------------------------------------------------------------

def _robin_bessel(n, gamma, R):
    def f(k):
        return gamma * special.jv(n, k * R) + k * special.jvp(n, k * R)
    return f


def _order_roots(n, gamma, R, k_max, step):
    f = _robin_bessel(n, gamma, R)
    # Robin roots of order n lie above the first zero of J_n' (> n / R)
    k_lo = max(n / R * 0.9, 1e-9)
    if k_lo >= k_max:
        return []
    grid = np.arange(k_lo, k_max + step, step)
    vals = f(grid)
    roots = []
    for i in np.flatnonzero(np.sign(vals[:-1]) * np.sign(vals[1:]) < 0):
        a, b = grid[i], grid[i + 1]
        try:
            roots.append(optimize.brentq(f, a, b, xtol=1e-15, rtol=4 * np.finfo(float).eps))
        except ValueError as exc:
            raise RootBracketError(f"no root in [{a}, {b}] for order {n}") from exc
    for i in np.flatnonzero(vals == 0.0):
        roots.append(float(grid[i]))
    return sorted(roots)


@dataclass(frozen=True)
class DiskEigen:
    values: np.ndarray      # with multiplicity, ascending
    orders: np.ndarray      # angular order of each entry
    radial: np.ndarray      # radial index (1-based) within its order

    def distinct(self) -> np.ndarray:
        v = self.values
        keep = np.ones(len(v), dtype=bool)
        keep[1:] = np.abs(np.diff(v)) > 1e-12 * np.maximum(v[1:], 1.0)
        return v[keep]


def impedance_eigs_disk(gamma: float, R: float, count: int) -> DiskEigen:
    """First ``count`` eigenvalues of the impedance Laplacian on the disk.

    Orders ``n >= 1`` are listed twice (cosine and sine modes).
    """
    if gamma <= 0 or R <= 0:
        raise ValueError("gamma and R must be positive")
    if count < 1:
        raise ValueError("count must be positive")
    step = math.pi / R / 40.0
    k_max = 4.0 * math.pi / R
    while True:
        entries = []
        n = 0
        while n / R < k_max:
            for i, k in enumerate(_order_roots(n, gamma, R, k_max, step)):
                mult = 1 if n == 0 else 2
                entries.extend([(k * k, n, i + 1)] * mult)
            n += 1
        entries.sort()
        if len(entries) >= count:
            arr = np.array(entries[:count])
            return DiskEigen(arr[:, 0].copy(), arr[:, 1].astype(int), arr[:, 2].astype(int))
        k_max *= 1.5


# -- poles and transforms -----------------------------------------------------

def poles(b0: float, s0: float, lam: float) -> complex:
    """Root of ``b0 z^2 + lam z + s0 lam = 0`` with negative real part."""
    if b0 <= 0 or s0 <= 0 or lam <= 0:
        raise ValueError("b0, s0 and lambda must be positive")
    disc = lam * lam - 4.0 * b0 * s0 * lam
    if disc >= 0:
        return complex((-lam - math.sqrt(disc)) / (2.0 * b0))
    # complex pair; both share the real part -lam/(2 b0) < 0
    return complex(-lam / (2.0 * b0), -math.sqrt(-disc) / (2.0 * b0))


def _psi_data(spec: ExcitationSpec):
    if spec.profile not in ("constant", "linear_x", "quadratic"):
        raise ValueError(f"unknown profile {spec.profile!r}")
    scale = spec.amplitude * spec.factor
    return scale, spec.a_offset, 2.0 * math.pi / spec.T


def laplace_A(which: str, spec: ExcitationSpec, z) -> mp.mpc:
    """Closed-form ``(2/T) int_0^T D psi(t) exp(-z t) dt`` for ``psi = A f (cos(w t) + a)``."""
    amp, a, w = _psi_data(spec)
    T = mp.mpf(spec.T)
    z = mp.mpc(z)
    w = mp.mpf(w)
    a = mp.mpf(a)
    amp = mp.mpf(amp)
    one_minus = -mp.expm1(-z * T)  # 1 - exp(-zT)
    if which == "s":
        if z == 0:
            return amp * 2 * a
        return amp * 2 * one_minus * (a * (z**2 + w**2) + z**2) / (z * T * (z**2 + w**2))
    if which == "b":
        # psi'(0) = 0, psi(0) = A f (1 + a)
        psi0 = amp * (1 + a)
        return (2 / T) * (-one_minus) * (z * psi0) + z**2 * laplace_A("s", spec, z)
    if which == "eta":
        # (psi^2)'' = -2 w^2 (A f)^2 (cos 2wt + a cos wt)
        return -amp**2 * 16 * mp.pi**2 / T**3 * z * one_minus * (
            1 / (z**2 + 4 * w**2) + a / (z**2 + w**2))
    raise ValueError(f"unknown parameter component {which!r}")


def laplace_A_quadrature(which: str, spec: ExcitationSpec, z) -> mp.mpc:
    """Adaptive quadrature of the defining integral (reference values)."""
    amp, a, w = _psi_data(spec)
    T = mp.mpf(spec.T)
    z = mp.mpc(z)
    w = mp.mpf(w)
    if which == "s":
        def f(t): return amp * (mp.cos(w * t) + a)
    elif which == "b":
        def f(t): return -amp * w**2 * mp.cos(w * t)
    elif which == "eta":
        def f(t): return -2 * amp**2 * w**2 * (mp.cos(2 * w * t) + a * mp.cos(w * t))
    else:
        raise ValueError(f"unknown parameter component {which!r}")
    nodes = [T * k / 8 for k in range(9)]
    return (2 / T) * mp.quad(lambda t: f(t) * mp.exp(-z * t), nodes)


def _cross_condition(spec1, spec2, z):
    """Both sides of the cross condition between experiments 1 and 2."""
    T1, T2 = mp.mpf(spec1.T), mp.mpf(spec2.T)
    p1 = spec1.amplitude * spec1.factor * (1 + spec1.a_offset)
    p2 = spec2.amplitude * spec2.factor * (1 + spec2.a_offset)
    num = T2 * mp.expm1(-z * T1) * (z * p1)
    den = T1 * mp.expm1(-z * T2) * (z * p2)
    lhs = laplace_A("s", spec1, z)
    rhs = num / den * laplace_A("s", spec2, z)
    return lhs, rhs


@dataclass
class PoleEntry:
    ell: int
    lam: float
    pole: complex
    det: mp.mpc
    det_factored: mp.mpc
    margin47: float
    abs_A1eta: mp.mpf
    eta_margin: float

    @property
    def abs_det(self):
        return abs(self.det)

    def log10_abs_det(self) -> float:
        d = abs(self.det)
        return float(mp.log10(d)) if d > 0 else -math.inf


@dataclass
class AdmissibilityReport:
    entries: list = field(default_factory=list)
    floor: float = 1e-8
    sigma_note: str = ""

    @property
    def passed(self) -> bool:
        return bool(self.entries) and all(
            e.margin47 > self.floor and e.eta_margin > self.floor and e.abs_det > 0
            for e in self.entries)

    def rows(self):
        for e in self.entries:
            yield {
                "ell": e.ell,
                "lambda": e.lam,
                "re_pole": e.pole.real,
                "im_pole": e.pole.imag,
                "abs_det": mp.nstr(e.abs_det, 17),
                "margin47": e.margin47,
                "abs_A1eta": mp.nstr(e.abs_A1eta, 17),
            }

    def to_csv(self, path) -> None:
        import csv
        cols = ["ell", "lambda", "re_pole", "im_pole", "abs_det", "margin47", "abs_A1eta"]
        with open(path, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=cols)
            w.writeheader()
            for row in self.rows():
                w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in row.items()})

    def to_text(self) -> str:
        lines = [f"{'ell':>4} {'lambda':>14} {'re_pole':>14} {'im_pole':>14} "
                 f"{'log10|det|':>12} {'margin47':>10} {'eta_margin':>10}"]
        for e in self.entries:
            lines.append(f"{e.ell:>4d} {e.lam:>14.6f} {e.pole.real:>14.6f} {e.pole.imag:>14.6f} "
                         f"{e.log10_abs_det():>12.3f} {e.margin47:>10.3e} {e.eta_margin:>10.3e}")
        lines.append(f"overall: {'PASS' if self.passed else 'FAIL'} (floor {self.floor:g})")
        if self.sigma_note:
            lines.append(self.sigma_note)
        return "\n".join(lines)


def _is_doubling(spec1: ExcitationSpec, spec3: ExcitationSpec) -> bool:
    return (math.isclose(spec1.T, spec3.T, rel_tol=1e-14)
            and math.isclose(spec1.a_offset, spec3.a_offset, rel_tol=1e-14, abs_tol=1e-300)
            and math.isclose(spec3.amplitude * spec3.factor,
                             2.0 * spec1.amplitude * spec1.factor, rel_tol=1e-14))


def check_admissibility(spec1: ExcitationSpec, spec2: ExcitationSpec, spec3: ExcitationSpec,
                        b0: float, s0: float, gamma: float, R: float, L: int,
                        floor: float = 1e-8, sigma_arc=None) -> AdmissibilityReport:
    """Evaluate the linearized-uniqueness conditions at the first ``L`` distinct eigenvalues.

    ``margin47`` is ``|lhs - rhs| / (|lhs| + |rhs|)`` of the cross condition
    (0 means violated); ``eta_margin`` is the analogous cancellation measure
    of the bracket in ``A[1, eta]``.
    """
    if not _is_doubling(spec1, spec3):
        raise ValueError("third excitation must be the doubling of the first (psi_3 = 2 psi_1)")
    eig = impedance_eigs_disk(gamma, R, 2 * L + 1)
    lams = eig.distinct()
    while len(lams) < L:
        eig = impedance_eigs_disk(gamma, R, 2 * len(eig.values))
        lams = eig.distinct()
    lams = lams[:L]
    report = AdmissibilityReport(floor=floor)
    if sigma_arc is not None:
        lo, hi = sigma_arc
        report.sigma_note = (f"observation arc ({lo:.6g}, {hi:.6g}) is a nonempty open arc; "
                             "unique continuation from it is assumed, not computed")
    specs = (spec1, spec2, spec3)
    with mp.workdps(30):
        for ell, lam in enumerate(lams, start=1):
            report.entries.append(_pole_entry(ell, float(lam), specs, b0, s0))
    return report


def _pole_entry(ell, lam, specs, b0, s0):
    spec1, spec2, _ = specs
    p = poles(b0, s0, lam)
    z = mp.mpc(p)
    A = mp.matrix(3, 3)
    for j, sp in enumerate(specs):
        for q, name in enumerate(("s", "b", "eta")):
            A[j, q] = laplace_A(name, sp, z)
    det = mp.det(A)
    factored = 2 * (A[0, 0] * A[1, 1] - A[1, 0] * A[0, 1]) * A[0, 2]
    lhs, rhs = _cross_condition(spec1, spec2, z)
    denom = abs(lhs) + abs(rhs)
    margin = float(abs(lhs - rhs) / denom) if denom > 0 else 0.0
    w = mp.mpf(spec1.omega)
    a = mp.mpf(spec1.a_offset)
    t1, t2 = 1 / (z**2 + 4 * w**2), a / (z**2 + w**2)
    eta_margin = float(abs(t1 + t2) / (abs(t1) + abs(t2)))
    return PoleEntry(ell, lam, p, det, factored, margin, abs(A[0, 2]), eta_margin)


# -- analytic Helmholtz oracle ---------------------------------------------------

def bessel_helmholtz_disk(k_sq, gamma: float, R: float, g_const):
    """Radial solution of ``lap u + k_sq u = 0`` with ``gamma u + u' = g_const`` at ``r = R``.

    Returns a callable ``u(r)``; the principal square root of ``k_sq`` is used.
    """
    if gamma <= 0:
        raise ValueError("gamma must be positive")
    k = np.sqrt(complex(k_sq))
    denom = gamma * special.jv(0, k * R) - k * special.jv(1, k * R)
    if abs(denom) < 1e-14 * max(1.0, abs(gamma)):
        raise ResonanceError(f"resonant wavenumber k^2 = {k_sq}")
    c = complex(g_const) / denom

    def u(r):
        return c * special.jv(0, k * np.asarray(r, dtype=float))

    return u
