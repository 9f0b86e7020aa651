"""Second-order smoothing kernels, their derivatives, and polynomial-kernel integrals.

All kernels integrate to one and have vanishing first moment. The scaled kernel
is ``K_h(u) = k(u/h) / h`` and its (sign-flipped) derivative is
``K1_h(u) = -k'(u/h) / h**2``, so that ``K1_h(u) = d/dtau K_h(a - tau)`` at
``u = a - tau``. That sign convention makes the gradient estimators literal
theta-derivatives of the value estimators.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

_SQRT_PI = math.sqrt(math.pi)

FAMILIES = ("gaussian", "biweight", "triweight")


@dataclass(frozen=True)
class KernelSpec:
    """A second-order kernel family.

    gaussian:  k(u) = exp(-u^2) / sqrt(pi)          (support R)
    biweight:  k(u) = (15/16) (1-u^2)^2             (support [-1, 1])
    triweight: k(u) = (35/32) (1-u^2)^3             (support [-1, 1])
    """

    family: str = "gaussian"

    def __post_init__(self) -> None:
        if self.family not in FAMILIES:
            raise ValueError(
                f"unknown kernel family {self.family!r}; expected one of {FAMILIES}"
            )

    @property
    def compact(self) -> bool:
        return self.family != "gaussian"


class KernelMoments(NamedTuple):
    m2: float        # int u^2 k(u) du
    omega2: float    # int k(u)^2 du
    omega2_d1: float # int k'(u)^2 du


_ANALYTIC_MOMENTS = {
    "gaussian": KernelMoments(0.5, 1.0 / math.sqrt(2.0 * math.pi), 1.0 / math.sqrt(2.0 * math.pi)),
    "biweight": KernelMoments(1.0 / 7.0, 5.0 / 7.0, 15.0 / 7.0),
    "triweight": KernelMoments(1.0 / 9.0, 350.0 / 429.0, 35.0 / 11.0),
}


def k(spec: KernelSpec, u):
    """Base kernel k(u), vectorized."""
    u = np.asarray(u, dtype=float)
    if spec.family == "gaussian":
        return np.exp(-u * u) / _SQRT_PI
    t = np.maximum(0.0, 1.0 - u * u)
    if spec.family == "biweight":
        return (15.0 / 16.0) * t * t
    return (35.0 / 32.0) * t * t * t


def k1(spec: KernelSpec, u):
    """First derivative k'(u), vectorized."""
    u = np.asarray(u, dtype=float)
    if spec.family == "gaussian":
        return -2.0 * u * np.exp(-u * u) / _SQRT_PI
    t = np.maximum(0.0, 1.0 - u * u)
    if spec.family == "biweight":
        return -(15.0 / 4.0) * u * t
    return -(105.0 / 16.0) * u * t * t


def _check_bandwidth(h: float) -> float:
    h = float(h)
    if not h > 0.0:
        raise ValueError(f"bandwidth must be positive, got {h}")
    return h


def kh(spec: KernelSpec, h: float, u):
    """Scaled kernel K_h(u) = k(u/h) / h."""
    h = _check_bandwidth(h)
    return k(spec, np.asarray(u, dtype=float) / h) / h


def kh1(spec: KernelSpec, h: float, u):
    """Sign-flipped derivative K1_h(u) = -k'(u/h) / h^2 = d/dtau K_h(a - tau)."""
    h = _check_bandwidth(h)
    return -k1(spec, np.asarray(u, dtype=float) / h) / (h * h)


def kernel_moments(spec: KernelSpec) -> KernelMoments:
    """Analytic (M2, Omega2, Omega2^(1)) for the family."""
    return _ANALYTIC_MOMENTS[spec.family]


def kernel_moments_quadrature(spec: KernelSpec) -> KernelMoments:
    """The same moments by adaptive quadrature; used to audit the constants."""
    from scipy.integrate import quad

    lo, hi = (-1.0, 1.0) if spec.compact else (-12.0, 12.0)
    m2 = quad(lambda u: u * u * k(spec, u), lo, hi, epsabs=1e-12, epsrel=1e-12)[0]
    o2 = quad(lambda u: k(spec, u) ** 2, lo, hi, epsabs=1e-12, epsrel=1e-12)[0]
    o2d1 = quad(lambda u: k1(spec, u) ** 2, lo, hi, epsabs=1e-12, epsrel=1e-12)[0]
    return KernelMoments(m2, o2, o2d1)


# ---------------------------------------------------------------------------
# Polynomial-kernel integrals
#
# For the Gaussian family K_h(. - tau) is the N(tau, h^2/2) density, so
# int p(a) K_h(a - tau) da = E[p(A)] with A ~ N(tau, h^2/2), computed exactly
# by the Gaussian moment recursion. The K1 integral is d/dtau of the K
# integral, which for a translation family equals E[p'(A)].
# ---------------------------------------------------------------------------


def _poly_derivative(coeffs: np.ndarray) -> np.ndarray:
    """Coefficients of p'(a) given coefficients of p(a), along the last axis."""
    coeffs = np.asarray(coeffs, dtype=float)
    deg = coeffs.shape[-1] - 1
    if deg <= 0:
        return np.zeros(coeffs.shape[:-1] + (1,))
    j = np.arange(1, deg + 1, dtype=float)
    return coeffs[..., 1:] * j


def gaussian_poly_conv(coeffs, tau, h: float, order: int = 0):
    """Exact int p(a) K_h(a - tau) da (order 0) or int p(a) K1_h(a - tau) da (order 1).

    Gaussian kernel only. ``coeffs`` has polynomial coefficients on the last
    axis (c0 + c1 a + ... ) and broadcasts against ``tau``; typically
    coeffs is (n, m+1) with one polynomial per row and tau is (n,).
    """
    h = _check_bandwidth(h)
    coeffs = np.atleast_1d(np.asarray(coeffs, dtype=float))
    if order == 1:
        coeffs = _poly_derivative(coeffs)
    tau = np.asarray(tau, dtype=float)
    sigma2 = 0.5 * h * h
    npow = coeffs.shape[-1]
    # m_k = E[A^k], A ~ N(tau, sigma2): m_k = tau m_{k-1} + (k-1) sigma2 m_{k-2}
    m_prev = np.zeros_like(tau)
    m_cur = np.ones_like(tau)
    out = coeffs[..., 0] * m_cur
    for j in range(1, npow):
        m_next = tau * m_cur + (j - 1) * sigma2 * m_prev
        m_prev, m_cur = m_cur, m_next
        out = out + coeffs[..., j] * m_cur
    return out


# Gauss-Legendre nodes are exact for polynomial integrands; 24 nodes cover
# p * k products up to combined degree 47, far beyond any sieve degree here.
_GL_NODES, _GL_WEIGHTS = np.polynomial.legendre.leggauss(24)


def compact_poly_conv(coeffs, tau, h: float, spec: KernelSpec, order: int = 0):
    """int p(a) K_h(a - tau) da for compact-support kernels, by exact Gauss-Legendre.

    Substituting a = tau + h v reduces the integral to [-1, 1]:
    order 0: int p(tau + h v) k(v) dv, order 1: -(1/h) int p(tau + h v) k'(v) dv.
    """
    h = _check_bandwidth(h)
    coeffs = np.atleast_1d(np.asarray(coeffs, dtype=float))
    tau = np.asarray(tau, dtype=float)
    if order == 0:
        wk = _GL_WEIGHTS * k(spec, _GL_NODES)
        scale = 1.0
    else:
        wk = _GL_WEIGHTS * k1(spec, _GL_NODES)
        scale = -1.0 / h
    out = np.zeros(np.broadcast_shapes(coeffs.shape[:-1], tau.shape))
    for node, weight in zip(_GL_NODES, wk):
        a = tau + h * node
        pa = np.zeros_like(a)
        for j in range(coeffs.shape[-1] - 1, -1, -1):
            pa = pa * a + coeffs[..., j]
        out = out + weight * pa
    return scale * out


class PolyIntegral(NamedTuple):
    value: float
    analytic: bool  # False when the quadrature fallback was taken


def poly_kernel_integral(
    coeffs, tau: float, h: float, spec: KernelSpec, order: str = "K"
) -> PolyIntegral:
    """int p(a) K_h(a - tau) da (order="K") or int p(a) K1_h(a - tau) da (order="K1").

    Exact closed form for the Gaussian family; other families fall back to an
    exact-for-polynomials Gauss-Legendre rule on the kernel support, flagged
    by ``analytic=False`` in the result.
    """
    if order not in ("K", "K1"):
        raise ValueError(f"order must be 'K' or 'K1', got {order!r}")
    iorder = 0 if order == "K" else 1
    if spec.family == "gaussian":
        value = gaussian_poly_conv(coeffs, np.asarray(tau, dtype=float), h, iorder)
        return PolyIntegral(float(value), True)
    value = compact_poly_conv(coeffs, np.asarray(tau, dtype=float), h, spec, iorder)
    return PolyIntegral(float(value), False)


# Gauss-Hermite rule, exact for polynomials against the Gaussian kernel; kept
# as an independent evaluation path for cross-checking the moment recursion.
_GH_NODES, _GH_WEIGHTS = np.polynomial.hermite.hermgauss(24)


def gaussian_poly_conv_quadrature(coeffs, tau, h: float, order: int = 0):
    """Gauss-Hermite evaluation of the Gaussian-kernel polynomial integrals.

    Integrates the literal integrand (substituting a = tau + h v):
    order 0: int p(tau + h v) e^{-v^2}/sqrt(pi) dv,
    order 1: (2/h) int v p(tau + h v) e^{-v^2}/sqrt(pi) dv,
    so it shares no algebra with the moment-recursion path it audits.
    """
    h = _check_bandwidth(h)
    coeffs = np.atleast_1d(np.asarray(coeffs, dtype=float))
    tau = np.asarray(tau, dtype=float)
    out = np.zeros(np.broadcast_shapes(coeffs.shape[:-1], tau.shape))
    for node, weight in zip(_GH_NODES, _GH_WEIGHTS / _SQRT_PI):
        a = tau + h * node
        pa = np.zeros_like(a)
        for j in range(coeffs.shape[-1] - 1, -1, -1):
            pa = pa * a + coeffs[..., j]
        if order == 1:
            pa = pa * (2.0 * node / h)
        out = out + weight * pa
    return out
