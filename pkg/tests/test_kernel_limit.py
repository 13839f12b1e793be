import math

import mpmath
import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import integrate, special

from truncprod.errors import DomainError
from truncprod.kernel_limit import (
    LimitKernelParams, airy_kernel, crit_bulk_kernel, crit_bulk_series, crit_edge_double_contour,
    crit_edge_kernel, gaussian_limit, limit_value, sine_kernel,
)


def test_gaussian_examples():
    assert gaussian_limit(0.0) == pytest.approx(0.3989422804, abs=1e-10)
    assert gaussian_limit(1.0) == pytest.approx(0.2419707245, abs=1e-10)
    tot, _ = integrate.quad(gaussian_limit, -8, 8, epsabs=1e-13)
    assert abs(tot - 1) < 1e-10
    assert gaussian_limit(0.7) == pytest.approx(float(mpmath.npdf(0.7)), abs=1e-14)


def test_sine_examples():
    assert sine_kernel(0.3, 0.3) == 1.0
    assert abs(sine_kernel(1.5, 0.5)) < 1e-15
    assert sine_kernel(0.75, 0.25) == pytest.approx(2 / math.pi, abs=1e-15)
    assert sine_kernel(0.9, 0.2) == pytest.approx(float(mpmath.sinc(mpmath.pi * 0.7)), abs=1e-14)


def test_airy_examples():
    assert airy_kernel(0, 0) == pytest.approx(0.0669875, abs=1e-6)
    assert airy_kernel(0, 0) == pytest.approx(special.airy(0)[1] ** 2, abs=1e-14)
    assert airy_kernel(1, 0.5) == pytest.approx(airy_kernel(0.5, 1), abs=1e-15)
    assert abs(airy_kernel(-1, 2, "contour") - airy_kernel(-1, 2)) < 1e-8
    with pytest.raises(DomainError):
        airy_kernel(11, 0)
    with pytest.raises(DomainError):
        airy_kernel(0, 0, method="series")


def test_airy_grid_dual_representation():
    g = [-2, -1, 0, 1, 2]
    worst = max(abs(airy_kernel(a, b, "contour") - airy_kernel(a, b)) for a in g for b in g)
    assert worst <= 1e-8


@settings(max_examples=25)
@given(st.floats(-4, 4), st.floats(-4, 4))
def test_airy_vs_scipy(x, y):
    ax, dx, _, _ = special.airy(x)
    ay, dy, _, _ = special.airy(y)
    ref = dx * dx - x * ax * ax if x == y else (ax * dy - dx * ay) / (x - y)
    assert airy_kernel(x, y) == pytest.approx(ref, abs=1e-9)


def test_crit_bulk_examples():
    _, im = crit_bulk_kernel(0.3, -0.7, 1.2, return_imag=True)
    assert abs(im) < 1e-11
    assert abs(crit_bulk_kernel(0, 0, 1) - crit_bulk_series(0, 0, 1)) < 1e-6
    assert crit_bulk_kernel(0.4, 0.1, 0.8) == pytest.approx(crit_bulk_kernel(-0.4, -0.1, 0.8), abs=1e-11)
    with pytest.raises(DomainError):
        crit_bulk_kernel(0, 0, 0)


@pytest.mark.parametrize("gamma", [0.5, 1.0, 2.0])
def test_crit_bulk_realness_grid(gamma):
    g = np.linspace(-2, 2, 5)
    for a in g:
        for b in g:
            _, im = crit_bulk_kernel(a, b, gamma, return_imag=True)
            assert abs(im) <= 1e-11


def test_crit_bulk_vs_mpmath_theta():
    # independent oracle: mpmath quadrature with mpmath's own theta function
    xi, eta, gamma = 0.3, -0.2, 1.0
    q = mpmath.exp(-gamma / 2)

    def f(w):
        z = (mpmath.pi * w - 1j * xi) / (2 * mpmath.pi)
        return mpmath.exp((mpmath.pi * w - 1j * eta) ** 2 / (2 * gamma)) * mpmath.jtheta(3, mpmath.pi * z, q)

    ref = mpmath.quad(f, [-1, 0, 1]) / mpmath.sqrt(8 * mpmath.pi * gamma)
    assert crit_bulk_kernel(xi, eta, gamma) == pytest.approx(float(mpmath.re(ref)), abs=1e-10)


def test_crit_edge_examples():
    gamma = 1.0
    assert abs(crit_edge_kernel(0, 0, gamma) - crit_edge_double_contour(0, 0, gamma)) < 1e-6
    total, terms = crit_edge_kernel(8, 0, gamma, return_terms=True)
    assert abs(total - terms[0]) < math.exp(-8 + gamma / 2) * 10
    _, terms = crit_edge_kernel(0, 0, 4.0, return_terms=True)
    partial = np.cumsum(np.abs(terms))
    assert np.all(np.diff(partial) >= 0)


@pytest.mark.parametrize("gamma", [0.2, 0.5, 1.0, 3.0])
def test_crit_edge_term_count(gamma):
    _, terms = crit_edge_kernel(0.0, 0.0, gamma, return_terms=True)
    assert len(terms) <= 60


def test_crit_edge_vs_mpmath():
    # independent oracle: k-residue series with each s-integral done by mpmath quadrature
    xi, eta, gamma = 0.5, -0.3, 1.0

    def s_int(k):
        f = lambda y: (mpmath.exp(gamma * (1 + 1j * y) ** 2 / 2 - eta * (1 + 1j * y))
                       * mpmath.rgamma(1 + 1j * y) / (1 + 1j * y + k))
        return mpmath.re(mpmath.quad(f, [-mpmath.inf, 0, mpmath.inf])) / (2 * mpmath.pi)

    ref = sum((-1) ** k / mpmath.factorial(k) * mpmath.exp(-gamma * k * k / 2 - xi * k) * s_int(k)
              for k in range(12))
    assert crit_edge_kernel(xi, eta, gamma) == pytest.approx(float(ref), abs=1e-9)


def test_limit_value_dispatch():
    assert limit_value("airy", 0, 0) == airy_kernel(0, 0)
    assert limit_value("gaussian", 5.0, 0.0) == gaussian_limit(0.0)
    with pytest.raises(DomainError):
        limit_value("crit_edge", 0, 0)
    with pytest.raises(DomainError):
        limit_value("bessel", 0, 0)
    with pytest.raises(DomainError):
        LimitKernelParams(gamma=-1.0)
    assert LimitKernelParams(gamma=1.0).gamma == 1.0
