"""Truncated multiharmonic fields ``u(t, x) = Re sum_m u_m(x) exp(i m w t)``.

Coefficient ``m = 0`` is real; no factor-1/2 storage variants are used.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class HarmonicMismatch(ValueError):
    """Two fields do not share truncation order or fundamental frequency."""


@dataclass(frozen=True, eq=False)
class HarmonicField:
    """Complex nodal coefficients ``coeffs[m, node]`` for ``m = 0..N``."""

    coeffs: np.ndarray
    omega: float

    def __post_init__(self):
        c = np.array(self.coeffs, dtype=complex, copy=True)
        if c.ndim == 1:
            c = c[:, None]
        c[0] = c[0].real
        object.__setattr__(self, "coeffs", c)

    @property
    def N(self) -> int:
        return self.coeffs.shape[0] - 1

    @property
    def n_nodes(self) -> int:
        return self.coeffs.shape[1]

    @property
    def period(self) -> float:
        return 2.0 * np.pi / self.omega

    @classmethod
    def zeros(cls, N: int, n_nodes: int, omega: float) -> "HarmonicField":
        return cls(np.zeros((N + 1, n_nodes), dtype=complex), omega)

    def __getitem__(self, m):
        return self.coeffs[m]

    def _check(self, other: "HarmonicField") -> None:
        if self.N != other.N or not np.isclose(self.omega, other.omega, rtol=1e-14, atol=0):
            raise HarmonicMismatch(
                f"fields differ: N={self.N}/{other.N}, omega={self.omega}/{other.omega}")

    def __add__(self, other):
        self._check(other)
        return HarmonicField(self.coeffs + other.coeffs, self.omega)

    def __sub__(self, other):
        self._check(other)
        return HarmonicField(self.coeffs - other.coeffs, self.omega)

    def __mul__(self, scalar):
        return HarmonicField(self.coeffs * scalar, self.omega)

    __rmul__ = __mul__

    def truncate(self, N: int) -> "HarmonicField":
        c = np.zeros((N + 1, self.n_nodes), dtype=complex)
        k = min(N, self.N) + 1
        c[:k] = self.coeffs[:k]
        return HarmonicField(c, self.omega)

    def norm(self) -> float:
        return float(np.linalg.norm(self.coeffs))


def cauchy_correlation(u: np.ndarray, v: np.ndarray, m: int) -> np.ndarray:
    """Coefficient ``m`` of the projected product of two coefficient stacks.

    For ``m >= 1`` this is half of the Cauchy sum ``sum_j u_j v_{m-j}`` plus
    half of the correlation sum over ``k = m, m+2, .., 2N-m`` of
    ``conj(u_{(k-m)/2}) v_{(k+m)/2} + u_{(k+m)/2} conj(v_{(k-m)/2})``; for
    ``m = 0`` it is the period mean of the product.
    """
    N = u.shape[0] - 1
    if m == 0:
        return (u[0].real * v[0].real
                + 0.5 * np.sum((np.conj(u[1:]) * v[1:]).real, axis=0))
    out = np.zeros(u.shape[1:], dtype=complex)
    for j in range(m + 1):
        out += u[j] * v[m - j]
    for i in range(N - m + 1):
        out += np.conj(u[i]) * v[i + m] + u[i + m] * np.conj(v[i])
    return 0.5 * out


def project_product(u: HarmonicField, v: HarmonicField) -> HarmonicField:
    """Projection of the pointwise product ``u v`` onto the same ``X_N``."""
    u._check(v)
    c = np.empty_like(u.coeffs)
    for m in range(u.N + 1):
        c[m] = cauchy_correlation(u.coeffs, v.coeffs, m)
    return HarmonicField(c, u.omega)


def derivative_factors(N: int, omega: float, order: int) -> np.ndarray:
    return (1j * omega * np.arange(N + 1)) ** order


def time_derivative(u: HarmonicField, order: int = 1) -> HarmonicField:
    f = derivative_factors(u.N, u.omega, order)
    return HarmonicField(u.coeffs * f[:, None], u.omega)


def second_time_derivative(u: HarmonicField) -> HarmonicField:
    """Multiply coefficient ``m`` by ``-m^2 w^2``."""
    m = np.arange(u.N + 1)
    return HarmonicField(u.coeffs * (-(m * u.omega) ** 2)[:, None], u.omega)


def collocation_times(omega: float, n_times: int) -> np.ndarray:
    """``n_times`` equispaced instants covering one period (end point excluded)."""
    return (2.0 * np.pi / omega) * np.arange(n_times) / n_times


def sample_time(u: HarmonicField, times) -> np.ndarray:
    """Real samples ``u(t_k, node)`` with shape ``(len(times), n_nodes)``."""
    times = np.atleast_1d(np.asarray(times, dtype=float))
    m = np.arange(u.N + 1)
    phase = np.exp(1j * u.omega * np.outer(times, m))
    return (phase @ u.coeffs).real


def from_samples(samples, N: int, omega: float) -> HarmonicField:
    """Inverse of :func:`sample_time` on an equispaced one-period grid."""
    samples = np.asarray(samples, dtype=float)
    if samples.ndim == 1:
        samples = samples[:, None]
    n_t = samples.shape[0]
    if n_t < 2 * N + 1:
        raise ValueError(f"need at least {2 * N + 1} samples for N={N}, got {n_t}")
    spec = np.fft.fft(samples, axis=0) / n_t
    c = np.empty((N + 1, samples.shape[1]), dtype=complex)
    c[0] = spec[0].real
    c[1:] = 2.0 * spec[1:N + 1]
    return HarmonicField(c, omega)


def spectral_time_derivative(samples, omega: float, order: int) -> np.ndarray:
    """Spectral derivative of samples on an equispaced one-period grid.

    The grid size should be odd so that no Nyquist mode is present.
    """
    samples = np.asarray(samples, dtype=float)
    n_t = samples.shape[0]
    k = np.fft.fftfreq(n_t, d=1.0 / n_t)
    if n_t % 2 == 0:
        k[n_t // 2] = 0.0
    fac = (1j * omega * k) ** order
    spec = np.fft.fft(samples, axis=0)
    return np.fft.ifft(spec * fac.reshape((-1,) + (1,) * (samples.ndim - 1)), axis=0).real
