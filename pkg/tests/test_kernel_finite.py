import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import integrate
from scipy.special import eval_jacobi, gammaln

from truncprod.errors import ConfigError, DomainError
from truncprod.experiments import det_rel
from truncprod.kernel_finite import (
    QuadratureSettings, kernel_grid, kernel_log, kernel_x, scaled_kernel,
)
from truncprod.model import ProductModel, RegimeSpec, lambda_m, scaling_location

P113 = ProductModel(1, (0,), (3,))
P216 = ProductModel(2, (0,), (6,))
P428 = ProductModel(4, (0, 0), (8, 8))
CORPUS = [P113, P216, P428, ProductModel(3, (1, 0), (6, 7)), ProductModel(2, (0, 0, 0), (4, 5, 6))]


def jacobi_kernel(n, m, v, x, y):
    """Christoffel-Darboux kernel (symmetric gauge) of the single-truncation
    Jacobi ensemble with weight x^v (1-x)^(m-2n-v)."""
    al, be = m - 2 * n - v, v
    s = 0.0
    for k in range(n):
        lognorm = (gammaln(k + al + 1) + gammaln(k + be + 1) - math.log(2 * k + al + be + 1)
                   - gammaln(k + al + be + 1) - gammaln(k + 1))
        s += eval_jacobi(k, al, be, 2 * x - 1) * eval_jacobi(k, al, be, 2 * y - 1) * math.exp(-lognorm)
    w = lambda t: (1 - t) ** al * t**be
    return s * math.sqrt(w(x) * w(y))


# -- examples -------------------------------------------------------------------


def test_n1_closed_form():
    assert kernel_x(P113, 0.5, 0.5).value == pytest.approx(1.0, abs=1e-12)
    assert kernel_x(P113, 0.2, 0.7).value == pytest.approx(0.6, abs=1e-12)
    xs = np.arange(0.05, 0.951, 0.05)
    assert max(abs(kernel_x(P113, x, x).value - 2 * (1 - x)) for x in xs) < 1e-8


def test_kernel_log_example():
    u = math.log(0.5)
    assert kernel_log(P113, u, u).value == pytest.approx(0.5, abs=1e-12)


def test_domain_errors():
    with pytest.raises(DomainError):
        kernel_x(P113, 0.5, 1.0)
    with pytest.raises(DomainError):
        kernel_x(P113, 1.5, 0.5)
    with pytest.raises(DomainError):
        kernel_log(P113, 0.1, -0.5)
    with pytest.raises(DomainError):
        kernel_x(ProductModel(3, (0,), (3,)), 0.5, 0.5)
    with pytest.raises(ConfigError):
        QuadratureSettings(parabola_vertex=-1.5)


@pytest.mark.parametrize("model,n", [(P113, 1), (P216, 2), (P428, 4)])
def test_trace_normalisation(model, n):
    f = lambda x: kernel_x(model, x, x).value
    tot, _ = integrate.quad(f, 0, 1, epsabs=1e-10, epsrel=1e-10, limit=200)
    assert abs(tot - n) < 1e-4


def test_log_trace_normalisation():
    f = lambda u: kernel_log(P216, u, u).value
    tot, _ = integrate.quad(f, -40, 0, epsabs=1e-10, epsrel=1e-10, limit=400)
    assert abs(tot - 2) < 1e-4


@pytest.mark.parametrize("n,m,v", [(2, 6, 0), (3, 9, 1), (12, 30, 2), (30, 70, 0)])
def test_single_truncation_matches_jacobi_ensemble(n, m, v):
    # independent oracle; n > 8 exercises the saddle-contour path
    P = ProductModel(n, (v,), (m,))
    pts = [0.05, 0.3, 0.6, 0.9]
    for x in pts:
        assert kernel_x(P, x, x).value == pytest.approx(jacobi_kernel(n, m, v, x, x), rel=1e-9)
    # off the diagonal only gauge-invariant products are comparable
    for x, y in [(0.2, 0.5), (0.4, 0.85), (0.6, 0.62)]:
        a, b = kernel_x(P, x, y), kernel_x(P, y, x)
        claimed = abs(a.value) * b.est_error + abs(b.value) * a.est_error
        ref = jacobi_kernel(n, m, v, x, y) ** 2
        assert abs(a.value * b.value - ref) <= 10 * claimed + 1e-9 * ref + 1e-12


@pytest.mark.parametrize("model", [ProductModel.uniform(6, 3, 14), ProductModel(8, (1, 0), (12, 20))])
def test_residue_and_contour_paths_agree(model):
    for u, w in [(-4.0, -4.0), (-3.0, -3.3), (-2.5, -2.0), (-1.0, -1.0), (-0.5, -0.6), (-6.0, -6.0)]:
        a = kernel_log(model, u, w, QuadratureSettings(method="residue")).value
        b = kernel_log(model, u, w, QuadratureSettings(method="contour")).value
        assert a == pytest.approx(b, rel=1e-8)


@pytest.mark.parametrize("model", CORPUS)
def test_diagonal_positive(model):
    for x in np.linspace(0.01, 0.99, 50):
        assert kernel_x(model, x, x).value >= -1e-10


@pytest.mark.parametrize("model", [P216, P428])
def test_quadrature_stability(model):
    q1 = QuadratureSettings()
    q2 = QuadratureSettings(base_nodes=2 * q1.base_nodes)
    for x, y in [(0.3, 0.3), (0.1, 0.8), (0.95, 0.5)]:
        a, b = kernel_x(model, x, y, q1).value, kernel_x(model, x, y, q2).value
        assert abs(a - b) <= 10 * q1.rel_tol * max(abs(a), 1e-12)


def test_est_error_reported():
    kv = kernel_x(P428, 0.3, 0.6)
    assert kv.est_error >= 0 and kv.nodes_used > 0
    assert kv.est_error < 1e-8


def test_scaled_kernel_examples():
    spec = RegimeSpec("crit_edge")
    g = scaling_location(P428, spec, -0.3)
    assert scaled_kernel(P428, spec, -0.3, -0.3).value == pytest.approx(kernel_log(P428, g, g).value, rel=1e-14)
    lam = math.log(lambda_m(P113))
    ref = 144 ** (-1 / 3) * kernel_log(P113, lam, lam).value
    assert scaled_kernel(P113, RegimeSpec("gue_edge"), 0.0, 0.0).value == pytest.approx(ref, rel=1e-13)
    spec = RegimeSpec("normality", k=1)
    from truncprod.model import rho_normality
    gx, gy = scaling_location(P216, spec, -0.5), scaling_location(P216, spec, 0.2)
    ref = rho_normality(P216, 1) * kernel_log(P216, gx, gy).value
    assert scaled_kernel(P216, spec, -0.5, 0.2).value == pytest.approx(ref, rel=1e-13)


def test_scaled_kernel_beyond_support_is_zero():
    # for this model the normality centre already lies above log 1 = 0
    P = ProductModel.uniform(30, 3, 60)
    kv = scaled_kernel(P, RegimeSpec("normality", k=1), 0.0, 0.0)
    assert kv.value == 0.0 and kv.method == "support"


def test_kernel_grid_examples():
    spec = RegimeSpec("crit_edge")
    one = kernel_grid(P428, spec, [0.2])
    assert one.values.shape == (1, 1)
    assert one.values[0, 0] == scaled_kernel(P428, spec, 0.2, 0.2).value
    km = kernel_grid(P428, spec, [-1.0, 0.0, 1.0])
    G = km.values
    assert np.isrealobj(G) and np.isfinite(np.linalg.det(G))
    g = np.array(km.grid)
    c = 0.7
    H = G * np.exp(c * g)[:, None] * np.exp(-c * g)[None, :]
    assert abs(np.linalg.det(H) - np.linalg.det(G)) <= 1e-12 * max(1.0, abs(np.linalg.det(G)))
    with pytest.raises(ConfigError):
        kernel_grid(P428, spec, [0.0, 0.0])


def test_kernel_grid_threads_identical():
    spec = RegimeSpec("crit_edge")
    a = kernel_grid(P428, spec, [-0.5, 0.0, 0.5]).values
    b = kernel_grid(P428, spec, [-0.5, 0.0, 0.5], threads=4).values
    assert np.array_equal(a, b)


# -- properties ---------------------------------------------------------------------


@settings(max_examples=20)
@given(st.sampled_from(CORPUS), st.floats(-6, -0.05))
def test_log_x_consistency(model, u):
    lhs = kernel_log(model, u, u).value
    rhs = math.exp(u) * kernel_x(model, math.exp(u), math.exp(u)).value
    assert lhs == pytest.approx(rhs, rel=1e-9, abs=1e-14)


@settings(max_examples=20)
@given(st.floats(0.05, 0.95), st.floats(0.05, 0.95))
def test_n1_closed_form_everywhere(x, y):
    assert kernel_x(P113, x, y).value == pytest.approx(2 * (1 - y), abs=1e-8)


@settings(max_examples=20)
@given(st.floats(-3, 3))
def test_gauge_invariance_of_grid_determinant(c):
    km = kernel_grid(P428, RegimeSpec("crit_edge"), [-1.5, -1.0, -0.5])
    G = km.values
    assert det_rel(G, G * np.exp(c * (np.array(km.grid)[:, None] - np.array(km.grid)[None, :]))) < 1e-12
