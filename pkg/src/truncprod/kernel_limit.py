"""Limit kernels: Gaussian, sine, Airy and the two critical kernels.

Each non-trivial kernel has a default evaluation path plus an independent
second representation, kept for cross-validation.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .errors import ConvergenceError, DomainError
from .specfun import airy_pair, jacobi_theta, log_gamma

_SQRT_2PI = math.sqrt(2 * math.pi)


@dataclass(frozen=True)
class LimitKernelParams:
    gamma: Optional[float] = None

    def __post_init__(self):
        if self.gamma is not None and not self.gamma > 0:
            raise DomainError("gamma must be positive")


def gaussian_limit(eta: float) -> float:
    return math.exp(-0.5 * eta * eta) / _SQRT_2PI


def sine_kernel(xi: float, eta: float) -> float:
    d = xi - eta
    if d == 0:
        return 1.0
    return math.sin(math.pi * d) / (math.pi * d)


# ---------------------------------------------------------------------------
# Airy


def _airy_closed(xi, eta):
    a1, d1 = airy_pair(xi)
    if xi == eta:
        return d1 * d1 - xi * a1 * a1
    a2, d2 = airy_pair(eta)
    return (a1 * d2 - d1 * a2) / (xi - eta)


def _ray_rule(R, nodes):
    x, w = np.polynomial.legendre.leggauss(nodes)
    r = 0.5 * R * (x + 1)
    return r, 0.5 * R * w


def _airy_contour(xi, eta, offset=1.0, nodes=120):
    # u on gamma_R: offset + r e^{+-i pi/3}; lam on gamma_L: mirror image
    big = max(abs(xi), abs(eta), 1.0)
    # |e^{u^3/3 - xi u}| <= exp(-r^3/3 + c r^2 + big r) decays below 1e-18 of its peak
    R = 2.0
    while -(R**3) / 3 + offset * R**2 + (big + offset**2) * R > -45:
        R *= 1.2
    r, w = _ray_rule(R, nodes)
    up = np.exp(1j * np.pi / 3)
    # gamma_R from e^{-i pi/3} inf to e^{i pi/3} inf
    u = np.concatenate([offset + r[::-1] * up.conjugate(), offset + r * up])
    du = np.concatenate([-(up.conjugate()) * w[::-1], up * w])
    lam = -u.conjugate()
    dlam = -du.conjugate()
    fu = np.exp(u**3 / 3 - xi * u) * du
    fl = np.exp(-(lam**3) / 3 + eta * lam) * dlam
    val = (fu[:, None] * fl[None, :] / (u[:, None] - lam[None, :])).sum()
    return (val / (2j * np.pi) ** 2).real, R


def airy_kernel(xi: float, eta: float, method: str = "closed_form") -> float:
    """K_Ai(xi, eta) from Airy functions or from the double contour integral."""
    if abs(xi) > 10 or abs(eta) > 10:
        raise DomainError("airy_kernel supports |xi|, |eta| <= 10")
    if method == "closed_form":
        return _airy_closed(float(xi), float(eta))
    if method == "contour":
        v1, _ = _airy_contour(xi, eta, nodes=120)
        v2, _ = _airy_contour(xi, eta, nodes=180)
        if abs(v1 - v2) > 1e-11 * max(1.0, abs(v2)):
            raise ConvergenceError("Airy contour quadrature not converged")
        return float(v2)
    raise DomainError(f"unknown Airy method {method!r}")


# ---------------------------------------------------------------------------
# critical bulk kernel


def _crit_bulk_integrand(w, xi, eta, gamma):
    z = (np.pi * w - 1j * xi) / (2 * np.pi)
    return np.exp((np.pi * w - 1j * eta) ** 2 / (2 * gamma)) * jacobi_theta(z, 1j * gamma / (2 * np.pi))


def crit_bulk_kernel(xi: float, eta: float, gamma: float, *, return_imag: bool = False,
                     rel_tol: float = 1e-10, max_nodes: int = 8192):
    """Theta-function kernel of the critical bulk regime (Gauss-Legendre in w)."""
    if not gamma > 0:
        raise DomainError("gamma must be positive")
    pref = 1.0 / math.sqrt(8 * math.pi * gamma)
    nodes = 32
    prev = None
    while nodes <= max_nodes:
        x, wt = np.polynomial.legendre.leggauss(nodes)
        val = pref * np.dot(wt, _crit_bulk_integrand(x, xi, eta, gamma))
        if prev is not None and abs(val - prev) <= rel_tol * max(abs(val), 1e-300):
            if abs(val.imag) > 1e-11 * max(1.0, abs(val.real)):
                raise ConvergenceError("critical bulk kernel has a non-negligible imaginary part")
            return (val.real, val.imag) if return_imag else float(val.real)
        prev = val
        nodes *= 2
    raise ConvergenceError("critical bulk quadrature did not converge")


def crit_bulk_series(xi: float, eta: float, gamma: float, points: int = 10_000) -> float:
    """Independent check: theta expanded termwise, each w-integral by a midpoint sum."""
    if not gamma > 0:
        raise DomainError("gamma must be positive")
    w = -1 + (np.arange(points) + 0.5) * (2.0 / points)
    h = 2.0 / points
    base = np.exp((np.pi * w - 1j * eta) ** 2 / (2 * gamma))
    total = 0j
    k = 0
    while True:
        ks = [0] if k == 0 else [k, -k]
        part = 0j
        for kk in ks:
            # theta term: exp(-gamma kk^2 / 2) exp(i kk (pi w - i xi))
            term = math.exp(-gamma * kk * kk / 2 + kk * xi) * np.exp(1j * kk * np.pi * w)
            part += h * np.sum(base * term)
        total += part
        if k > 0 and abs(part) < 1e-17 * abs(total):
            break
        k += 1
        if k > 100_000:
            raise ConvergenceError("theta series did not converge")
    return float((total / math.sqrt(8 * math.pi * gamma)).real)


# ---------------------------------------------------------------------------
# critical edge kernel


def _edge_s_integrals(eta, gamma, ks, h=0.05):
    # s = 1 + i y; integrand e^{gamma s^2/2 - eta s} / (Gamma(s) (s + k)), ds = i dy
    Y = 4.0
    while True:
        s = 1 + 1j * Y
        mag = (gamma * (1 - Y * Y) / 2 - eta - log_gamma(np.array([s]))[0]).real
        if mag < gamma / 2 - eta - 40:
            break
        Y *= 1.25
    y = np.arange(-Y, Y + h / 2, h)
    s = 1 + 1j * y
    base = np.exp(gamma * s * s / 2 - eta * s - log_gamma(s)) * h / (2 * np.pi)
    return np.array([np.sum(base / (s + k)) for k in ks]), np.sum(np.abs(base))


def crit_edge_kernel(xi: float, eta: float, gamma: float, *, return_terms: bool = False):
    """Residue series in t at the poles of Gamma(t), with each s-integral on Re s = 1."""
    if not gamma > 0:
        raise DomainError("gamma must be positive")
    total = 0.0
    terms = []
    bound_s = None
    k = 0
    while True:
        ks = np.arange(k, k + 16)
        S, bound_s = _edge_s_integrals(eta, gamma, ks)
        for kk, sk in zip(ks, S):
            logw = -gamma * kk * kk / 2 - xi * kk - math.lgamma(kk + 1)
            term = (-1) ** int(kk) * math.exp(logw) * sk.real
            total += term
            terms.append(term)
            # majorant of every remaining term: |S_k| <= bound_s / (k+1)
            past_peak = kk > 0 and kk > -xi / gamma
            if past_peak and math.exp(logw) * bound_s < 1e-16 * max(abs(total), 1e-300):
                return (total, terms) if return_terms else total
        k += 16
        if k > 4000:
            raise ConvergenceError("critical edge series did not converge")


def crit_edge_double_contour(xi: float, eta: float, gamma: float, poles: int = 40,
                             per_unit: int = 24, h: float = 0.05) -> float:
    """Independent check: direct 2-D quadrature with t on a rectangle around
    {0, -1, ..., -poles} (Gauss-Legendre per side) and s on Re s = 1."""
    if not gamma > 0:
        raise DomainError("gamma must be positive")
    left, right, half = -poles - 0.5, 0.5, 1.0
    corners = [right - 1j * half, right + 1j * half, left + 1j * half, left - 1j * half]
    gx, gw = np.polynomial.legendre.leggauss(per_unit)
    ts, dts = [], []
    for a, b in zip(corners, corners[1:] + corners[:1]):
        pieces = max(1, int(math.ceil(abs(b - a))))
        for p in range(pieces):
            pa = a + (b - a) * p / pieces
            pb = a + (b - a) * (p + 1) / pieces
            ts.append(0.5 * (pb - pa) * gx + 0.5 * (pa + pb))
            dts.append(0.5 * (pb - pa) * gw)
    t = np.concatenate(ts)
    dt = np.concatenate(dts)
    ft = np.exp(log_gamma(t) - gamma * t * t / 2 + xi * t) * dt / (2j * np.pi)
    Y = 4.0
    while (gamma * (1 - Y * Y) / 2 - eta - log_gamma(np.array([1 + 1j * Y]))[0]).real > -45:
        Y *= 1.25
    y = np.arange(-Y, Y + h / 2, h)
    s = 1 + 1j * y
    fs = np.exp(gamma * s * s / 2 - eta * s - log_gamma(s)) * h / (2 * np.pi)
    val = (fs[:, None] * ft[None, :] / (s[:, None] - t[None, :])).sum()
    return float(val.real)


LIMIT_KINDS = ("gaussian", "sine", "airy", "crit_bulk", "crit_edge")


def limit_value(kind: str, xi: float, eta: float, gamma: Optional[float] = None) -> float:
    """Dispatch used by the experiments and the CLI."""
    if kind == "gaussian":
        return gaussian_limit(eta)
    if kind == "sine":
        return sine_kernel(xi, eta)
    if kind == "airy":
        return airy_kernel(xi, eta)
    if kind in ("crit_bulk", "crit_edge"):
        if gamma is None:
            raise DomainError(f"{kind} needs gamma")
        fn = crit_bulk_kernel if kind == "crit_bulk" else crit_edge_kernel
        return fn(xi, eta, gamma)
    raise DomainError(f"unknown limit kernel {kind!r}")


__all__ = [
    "LimitKernelParams", "gaussian_limit", "sine_kernel", "airy_kernel",
    "crit_bulk_kernel", "crit_bulk_series", "crit_edge_kernel", "crit_edge_double_contour",
    "limit_value", "LIMIT_KINDS",
]
