"""Complex special functions used by the kernels and scaling maps.

Everything here is vectorised over numpy arrays.  Gamma-type functions use
upward recurrence into the region Re z >= 10 followed by the Stirling /
de Moivre asymptotic series; the left half-plane is handled by reflection.
"""

from __future__ import annotations

import cmath
import math

import numpy as np

from .errors import ConvergenceError, DomainError, PoleError

EULER_GAMMA = 0.57721566490153286061

# B_{2k} for k = 1..8
_BERNOULLI = np.array([
    1.0 / 6.0,
    -1.0 / 30.0,
    1.0 / 42.0,
    -1.0 / 30.0,
    5.0 / 66.0,
    -691.0 / 2730.0,
    7.0 / 6.0,
    -3617.0 / 510.0,
])
_K = np.arange(1, 9)
# log-gamma: B_{2k} / (2k (2k-1) z^{2k-1})
_LG_COEF = _BERNOULLI / (2 * _K * (2 * _K - 1))
# digamma: B_{2k} / (2k z^{2k})
_PSI_COEF = _BERNOULLI / (2 * _K)

_SWITCH = 10.0
_POLE_TOL = 1e-12
_LOG_SQRT_2PI = 0.5 * math.log(2 * math.pi)


def _as_complex(z):
    z = np.asarray(z, dtype=complex)
    if not np.all(np.isfinite(z)):
        raise DomainError("non-finite argument")
    return z


def _check_poles(z):
    near = (np.abs(z.imag) <= _POLE_TOL) & (z.real <= _POLE_TOL)
    near &= np.abs(z.real - np.round(z.real)) <= _POLE_TOL
    if np.any(near):
        raise PoleError("argument at a non-positive integer")


def _horner(coef, w):
    out = np.zeros_like(w)
    for c in coef[::-1]:
        out = out * w + c
    return out


def _shift_up(z):
    """Return (z + N, N) with N chosen so that Re(z + N) >= _SWITCH."""
    n = np.where(z.real < _SWITCH, np.ceil(_SWITCH - z.real), 0.0)
    return z + n, n.astype(int)


def _loggamma_right(z):
    # Re z >= 0.5 here
    zs, n = _shift_up(z)
    inv = 1.0 / zs
    series = inv * _horner(_LG_COEF, inv * inv)
    out = (zs - 0.5) * np.log(zs) - zs + _LOG_SQRT_2PI + series
    nmax = int(n.max()) if n.size else 0
    for k in range(nmax):
        mask = n > k
        out = out - np.where(mask, np.log(np.where(mask, z + k, 1.0)), 0.0)
    return out


def _frac(z):
    # z - round(Re z): exact, and leaves e^{2 pi i z} unchanged while keeping its argument small
    return z - np.round(z.real)


def _log_sinpi_upper(z):
    # analytic branch of log(sin(pi z)) on Im z >= 0
    return -1j * np.pi * z - math.log(2.0) + 0.5j * np.pi + np.log1p(-np.exp(2j * np.pi * _frac(z)))


def log_gamma(z):
    """Principal branch of log Gamma(z).

    Continuous on the plane cut along (-inf, 0]; on the cut itself the value
    from the upper half-plane is returned.
    """
    z = _as_complex(z)
    _check_poles(z)
    out = np.empty_like(z)
    right = z.real >= 0.5
    if np.any(right):
        out[right] = _loggamma_right(z[right])
    left = ~right
    if np.any(left):
        zl = z[left]
        lower = zl.imag < 0
        zu = np.where(lower, zl.conj(), zl)
        val = math.log(math.pi) - _log_sinpi_upper(zu) - _loggamma_right(1.0 - zu)
        out[left] = np.where(lower, val.conj(), val)
    return out


def _exp_2pi_i(z):
    # e^{2 pi i z} folded into the closed unit disc, plus the fold indicator
    up = z.imag >= 0
    q = np.exp(np.where(up, 2j, -2j) * np.pi * _frac(z))
    return q, up


def _cot_pi(z):
    q, up = _exp_2pi_i(z)
    return np.where(up, 1j * (q + 1) / (q - 1), 1j * (1 + q) / (1 - q))


def _csc2_pi(z):
    q, _ = _exp_2pi_i(z)
    return -4.0 * q / (q - 1) ** 2


def digamma(z):
    """psi(z) = d/dz log Gamma(z)."""
    z = _as_complex(z)
    _check_poles(z)
    refl = z.real < 0.5
    w = np.where(refl, 1.0 - z, z)
    ws, n = _shift_up(w)
    inv2 = 1.0 / (ws * ws)
    out = np.log(ws) - 0.5 / ws - inv2 * _horner(_PSI_COEF, inv2)
    for k in range(int(n.max()) if n.size else 0):
        mask = n > k
        out = out - np.where(mask, 1.0 / np.where(mask, w + k, 1.0), 0.0)
    if np.any(refl):
        out = np.where(refl, out - np.pi * _cot_pi(np.where(refl, z, 0.5)), out)
    return out


def trigamma(z):
    """psi'(z) = sum_{k>=0} 1/(z+k)^2."""
    z = _as_complex(z)
    _check_poles(z)
    refl = z.real < 0.5
    w = np.where(refl, 1.0 - z, z)
    ws, n = _shift_up(w)
    inv = 1.0 / ws
    inv2 = inv * inv
    # 1/z + 1/(2 z^2) + sum B_{2k} / z^{2k+1}
    out = inv + 0.5 * inv2 + inv * inv2 * _horner(_BERNOULLI, inv2)
    for k in range(int(n.max()) if n.size else 0):
        mask = n > k
        out = out + np.where(mask, 1.0 / np.where(mask, w + k, 1.0) ** 2, 0.0)
    if np.any(refl):
        out = np.where(refl, np.pi**2 * _csc2_pi(np.where(refl, z, 0.5)) - out, out)
    return out


def jacobi_theta(z, tau, max_terms: int = 1_000_000):
    """theta(z, tau) = sum_n exp(i pi n^2 tau + 2 i pi n z), Im tau > 0.

    Before summing, tau is moved into the fundamental domain with
        theta(z, tau + k) = theta(z + k/2, tau),
        theta(z, tau) = (-i tau)^(-1/2) exp(-i pi z^2 / tau) theta(z / tau, -1 / tau),
    and z into the strip |Im z| <= Im tau / 2 with
        theta(z + k tau) = exp(-i pi k^2 tau - 2 i pi k z) theta(z).
    The remaining series has no term much larger than its sum, so small
    Im tau or large Im z cost no accuracy.  Terms are added symmetrically
    (n and -n together) until the moduli of the last pair fall below 1e-16
    of the running sum; the moduli are tested because the pair can cancel.
    """
    z = _as_complex(z)
    tau = complex(tau)
    if tau.imag <= 0:
        raise DomainError("theta requires Im tau > 0")
    log_factor = np.zeros_like(z)
    for _ in range(64):
        k = round(tau.real)
        tau -= k
        z = z + 0.5 * k
        if abs(tau) >= 1.0 - 1e-12:
            break
        log_factor = log_factor - 0.5 * cmath.log(-1j * tau) - 1j * np.pi * z * z / tau
        z = z / tau
        tau = -1.0 / tau
    shift = np.round(z.imag / tau.imag)
    z = z - shift * tau
    log_factor = log_factor - 1j * np.pi * shift * shift * tau - 2j * np.pi * shift * z
    z = z - np.round(z.real)
    total = np.ones_like(z)
    for k in range(1, max_terms + 1):
        a = 1j * np.pi * k * k * tau
        up, down = np.exp(a + 2j * np.pi * k * z), np.exp(a - 2j * np.pi * k * z)
        total = total + up + down
        if np.all(np.abs(up) + np.abs(down) < 1e-16 * np.maximum(np.abs(total), 1e-300)):
            return np.exp(log_factor) * total
    raise ConvergenceError("theta series did not converge")


def airy_pair(x: float) -> tuple[float, float]:
    """(Ai(x), Ai'(x)) from the Maclaurin series, accumulated at 50 digits."""
    import mpmath

    x = float(x)
    if not abs(x) <= 12.0:
        raise DomainError("airy_pair supports |x| <= 12")
    with mpmath.workdps(50):
        X = mpmath.mpf(x)
        c1 = 1 / (mpmath.power(3, mpmath.mpf(2) / 3) * mpmath.gamma(mpmath.mpf(2) / 3))
        c2 = 1 / (mpmath.power(3, mpmath.mpf(1) / 3) * mpmath.gamma(mpmath.mpf(1) / 3))
        x3 = X**3
        # f = sum a_k x^{3k}, g = sum b_k x^{3k+1}
        a, b = mpmath.mpf(1), X
        f, g = a, b
        fp, gp = mpmath.mpf(0), mpmath.mpf(1)
        k = 0
        eps = mpmath.mpf(10) ** -45
        while True:
            k += 1
            a = a * x3 / ((3 * k - 1) * (3 * k))
            b = b * x3 / ((3 * k) * (3 * k + 1))
            f += a
            g += b
            # derivatives: d/dx x^{3k} = 3k x^{3k-1}
            if X != 0:
                fp += 3 * k * a / X
                gp += (3 * k + 1) * b / X
            if abs(a) + abs(b) < eps * (abs(f) + abs(g)) and k > 3:
                break
        ai = c1 * f - c2 * g
        aip = c1 * fp - c2 * gp
        return float(ai), float(aip)
