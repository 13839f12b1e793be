import math

import mpmath

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import stats

from truncprod.errors import DomainError
from truncprod.model import ProductModel, lambda_m, rho_edge
from truncprod.sampler import (
    DensityCurve, SampleBatch, batch_rows, edge_samples, empirical_density, haar_columns,
    haar_unitary, sample_batch, sample_squared_singvals, substream,
)

P113 = ProductModel(1, (0,), (3,))
P1233 = ProductModel(1, (0, 0), (3, 3))


@pytest.mark.parametrize("m", [1, 2, 8, 33])
def test_unitarity(m):
    rng = substream(1, m)
    for _ in range(5):
        U = haar_unitary(m, rng)
        assert np.max(np.abs(U.conj().T @ U - np.eye(m))) < 1e-12


def test_haar_columns_orthonormal():
    Q = haar_columns(12, 5, substream(2, 0))
    assert Q.shape == (12, 5)
    assert np.max(np.abs(Q.conj().T @ Q - np.eye(5))) < 1e-12
    with pytest.raises(DomainError):
        haar_columns(3, 4, substream(0, 0))


def test_first_entry_mean():
    rng = substream(3, 0)
    x = np.array([abs(haar_unitary(8, rng)[0, 0]) ** 2 for _ in range(10_000)])
    sigma = math.sqrt(stats.beta(1, 7).var() / x.size)
    assert abs(x.mean() - 1 / 8) < 4 * sigma


def test_haar_left_invariance():
    rng = substream(4, 0)
    V = haar_unitary(6, substream(99, 0))
    a = [abs(haar_unitary(6, rng)[0, 0]) for _ in range(2000)]
    b = [abs((V @ haar_unitary(6, rng))[0, 0]) for _ in range(2000)]
    assert stats.ks_2samp(a, b).pvalue > 0.01


def test_single_draw_shape():
    model = ProductModel(5, (1, 0, 2), (9, 8, 12))
    x = sample_squared_singvals(model, substream(5, 0))
    assert x.shape == (5,)
    assert np.all(np.diff(x) >= 0)
    assert 0 <= x[0] and x[-1] <= 1


def test_beta_mean():
    b = sample_batch(P113, seed=11, draws=100_000)
    sigma = math.sqrt(stats.beta(1, 2).var() / b.draws)
    assert abs(b.values.mean() - 1 / 3) < 4 * sigma


def test_product_of_betas_mean():
    b = sample_batch(P1233, seed=12, draws=50_000)
    # second moment of a product of independent Beta(1,2): (1/6)^2
    sigma = math.sqrt((1 / 36 - 1 / 81) / b.draws)
    assert abs(b.values.mean() - 1 / 9) < 4 * sigma


def test_empirical_density_normalization():
    b = sample_batch(ProductModel(3, (0,), (7,)), seed=13, draws=500)
    c = empirical_density(b, bins=17)
    assert abs(np.sum(c.values * np.diff(c.edges)) - 3) < 1e-12


def test_empirical_density_beta():
    b = sample_batch(P113, seed=14, draws=100_000)
    c = empirical_density(b, bins=20)
    exact = np.array([(1 - lo) ** 2 - (1 - hi) ** 2 for lo, hi in zip(c.edges[:-1], c.edges[1:])]) / np.diff(c.edges)
    assert np.all(np.abs(c.values - exact) < 4 * c.std_errors)


def test_standard_error_scaling():
    se1 = empirical_density(sample_batch(P113, seed=15, draws=5000), bins=20).std_errors.mean()
    se2 = empirical_density(sample_batch(P113, seed=16, draws=10_000), bins=20).std_errors.mean()
    assert 0.6 <= se2 / se1 <= 0.8


def test_empirical_density_errors():
    b = sample_batch(P113, seed=0, draws=100)
    with pytest.raises(DomainError):
        empirical_density(b, bins=10, range=(0.5, 0.5))
    with pytest.raises(DomainError):
        empirical_density(sample_batch(P113, seed=0, draws=50), bins=10)
    with pytest.raises(DomainError):
        DensityCurve(np.array([0.0, 0.0]), np.array([1.0, 1.0]))


def test_edge_samples():
    model = ProductModel.uniform(200, 2, 400)
    b = sample_batch(model, seed=17, draws=500, threads=4)
    e = edge_samples(model, b)
    assert e.shape == (500,)
    assert np.all(e <= rho_edge(model) * -math.log(lambda_m(model)) + 1e-9)
    assert -3 <= e.mean() <= 1


def test_determinism_and_threads():
    model = ProductModel(3, (0, 1), (6, 9))
    a = sample_batch(model, seed=2**63 + 5, draws=600, threads=1).values
    b = sample_batch(model, seed=2**63 + 5, draws=600, threads=3).values
    assert a.tobytes() == b.tobytes()
    c = sample_batch(model, seed=2**63 + 6, draws=600).values
    assert a.tobytes() != c.tobytes()


def test_prefix_stability():
    # draw d depends only on (seed, d), so a shorter batch is a prefix of a longer one
    a = sample_batch(P428 := ProductModel(4, (0, 0), (8, 8)), seed=3, draws=300).values
    b = sample_batch(P428, seed=3, draws=700).values
    assert a.tobytes() == b[:300].tobytes()


def _mp_oracle(model, seed, draw, dps=300):
    # replay the draw's Haar blocks and multiply them in high precision
    from truncprod.sampler import _phase_fixed_qr, _shape, complex_gaussian
    mpmath.mp.dps = dps
    rng = substream(seed, draw)
    widths, sizes = _shape(model)
    blocks = [complex_gaussian(rng, (sizes[j], widths[j - 1])) for j in range(1, model.M + 1)]
    Y = None
    for j, G in enumerate(blocks, start=1):
        Q, _ = _phase_fixed_qr(G)
        F = mpmath.matrix(Q[: widths[j], :].tolist())
        Y = F if Y is None else F * Y
    return np.sort([float(mpmath.re(e)) for e in mpmath.eig(Y.H * Y)[0]])


@pytest.mark.parametrize("model", [
    ProductModel.uniform(2, 120, 5),
    ProductModel.uniform(5, 60, 8),
    ProductModel(3, (1, 0), (9, 5)),
])
def test_small_values_keep_relative_accuracy(model):
    b = sample_batch(model, seed=21, draws=3)
    ref = _mp_oracle(model, 21, 2)
    assert np.max(np.abs(b.values[2] / ref - 1)) < 1e-12
    assert b.values.max() <= 1 + 1e-12


def test_batch_rows_and_checks():
    b = sample_batch(ProductModel(2, (0,), (4,)), seed=1, draws=3)
    rows = list(batch_rows(b))
    assert len(rows) == 6 and rows[1][:2] == (0, 1)
    with pytest.raises(DomainError):
        sample_batch(P113, seed=-1, draws=3)
    with pytest.raises(DomainError):
        sample_batch(P113, seed=0, draws=0)
    with pytest.raises(DomainError):
        SampleBatch(P113, 0, 2, np.zeros((3, 1)))


@settings(max_examples=20)
@given(st.integers(1, 4), st.integers(1, 3), st.integers(0, 3), st.integers(0, 2**64 - 1))
def test_contraction_property(n, M, extra, seed):
    model = ProductModel.uniform(n, M, n + 1 + extra)
    x = sample_batch(model, seed=seed, draws=4).values
    assert x.shape == (4, n)
    assert np.all(np.diff(x, axis=1) >= 0)
    assert x.min() >= 0 and x.max() <= 1 + 1e-12
