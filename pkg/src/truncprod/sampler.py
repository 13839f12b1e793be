"""Monte Carlo sampling of the truncated product ensemble."""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .errors import DomainError
from .model import ProductModel, lambda_m, rho_edge

_MASK64 = (1 << 64) - 1


def substream(seed: int, draw: int) -> np.random.Generator:
    """Counter-based Philox stream keyed by (seed, draw)."""
    ss = np.random.SeedSequence(entropy=int(seed) & _MASK64, spawn_key=(int(draw),))
    return np.random.Generator(np.random.Philox(ss))


def complex_gaussian(rng: np.random.Generator, shape) -> np.ndarray:
    """Standard complex Gaussians (E|z|^2 = 1) by Box-Muller.

    The radial uniform is drawn on (0, 1] so the logarithm is always finite.
    """
    u1 = 1.0 - rng.random(shape)
    u2 = rng.random(shape)
    return np.sqrt(-np.log(u1)) * np.exp(2j * np.pi * u2)


def _phase_fixed_qr(Z):
    # works on stacked matrices; None signals a numerically rank-deficient draw
    Q, R = np.linalg.qr(Z)
    d = np.diagonal(R, axis1=-2, axis2=-1)
    bad = np.abs(d) < 1e-300
    if np.any(bad):
        return None, bad.any(axis=-1)
    return Q * (d / np.abs(d))[..., None, :], None


def haar_columns(m: int, q: int, rng: np.random.Generator) -> np.ndarray:
    """First q columns of an m x m Haar unitary (Gaussian QR with phase fix)."""
    if m < 1 or not 1 <= q <= m:
        raise DomainError("need 1 <= q <= m")
    while True:
        Q, _ = _phase_fixed_qr(complex_gaussian(rng, (m, q)))
        if Q is not None:
            return Q


def haar_unitary(m: int, rng: np.random.Generator) -> np.ndarray:
    return haar_columns(m, m, rng)


def _shape(model):
    widths = (model.n,) + tuple(model.n + x for x in model.v)
    sizes = (0,) + tuple(model.m)
    return widths, sizes


def _graded_step(W, logd, T):
    """Refactor W diag(e^logd) T as Q diag(e^logd') T' with Q orthonormal.

    Columns are pre-pivoted by their scaled norms so that logd' comes out
    nearly decreasing, which keeps T' well conditioned.  All scales stay in
    log form, so a product spanning thousands of decades never over- or
    underflows.
    """
    with np.errstate(divide="ignore"):
        score = np.log(np.linalg.norm(W, axis=-2)) + logd
    perm = np.argsort(-score, axis=-1, kind="stable")
    W = np.take_along_axis(W, perm[..., None, :], axis=-1)
    logd = np.take_along_axis(logd, perm, axis=-1)
    T = np.take_along_axis(T, perm[..., :, None], axis=-2)
    Q, R = np.linalg.qr(W)
    r = np.abs(np.diagonal(R, axis1=-2, axis2=-1))
    r = np.where(r > 0, r, np.finfo(float).tiny)
    gap = logd[..., None, :] - logd[..., :, None]  # log(d_col / d_row)
    upper = np.triu(np.ones(gap.shape[-2:], dtype=bool))
    scale = np.exp(np.where(upper, np.minimum(gap, 700.0), -np.inf))
    mid = R / r[..., :, None] * scale
    return Q, np.log(r) + logd, mid @ T


def _coupled(logd, T, tol):
    # boundary i is resolved when the block above-right of it, rows <= i and
    # columns > i, is negligible next to the scale of row i
    mag = np.log(np.abs(T) + 1e-320) + logd[..., :, None]
    tail = np.maximum.accumulate(mag[..., :, ::-1], axis=-1)[..., :, ::-1][..., :, 1:]
    block = np.maximum.accumulate(tail, axis=-2)
    return np.diagonal(block, axis1=-2, axis2=-1) - logd[..., :-1] > tol


_SWEEPS = 8
_LOG_EPS = math.log(np.finfo(float).eps)


def _graded_svals(logd, T):
    """Log singular values of diag(e^logd) T, sorted descending.

    Transposed QR sweeps push the coupling between strongly separated
    scales below rounding; clusters that stay coupled are finished with an
    ordinary SVD, which is accurate there because their scales are close.
    """
    eye = np.broadcast_to(np.eye(T.shape[-1]), T.shape)
    for _ in range(_SWEEPS):
        coupled = _coupled(logd, T, _LOG_EPS)
        gaps = -np.diff(logd, axis=-1)
        if not np.any(coupled & (gaps > 8.0)):
            break
        _, logd, T = _graded_step(np.conj(np.swapaxes(T, -1, -2)), logd, eye)
    coupled = _coupled(logd, T, _LOG_EPS)
    out = np.empty_like(logd)
    for idx in np.ndindex(logd.shape[:-1]):
        ld, Ti, cp = logd[idx], T[idx], coupled[idx]
        cuts = [0] + [i + 1 for i in np.flatnonzero(~cp)] + [ld.size]
        for a, b in zip(cuts[:-1], cuts[1:]):
            top = ld[a:b].max()
            sv = np.linalg.svd(np.exp(ld[a:b] - top)[:, None] * Ti[a:b, a:b], compute_uv=False)
            with np.errstate(divide="ignore"):
                out[idx][a:b] = np.log(sv) + top
    return -np.sort(-out, axis=-1)


def _accumulate(model, factor):
    """Product of the blocks returned by factor(j), stacked over a leading axis.

    The running product is held as W diag(e^logd) T and refactored after
    every factor; returns squared singular values, sorted, clipped to [0, 1].
    """
    widths, _ = _shape(model)
    W = factor(1)[..., : widths[1], :]
    logd = np.zeros(W.shape[:-2] + W.shape[-1:])
    T = np.broadcast_to(np.eye(W.shape[-1], dtype=W.dtype), W.shape[:-2] + (W.shape[-1],) * 2)
    W, logd, T = _graded_step(W, logd, T)
    for j in range(2, model.M + 1):
        W, logd, T = _graded_step(factor(j)[..., : widths[j], :] @ W, logd, T)
    with np.errstate(under="ignore"):
        x = np.exp(2.0 * _graded_svals(logd, T))
    return np.sort(np.clip(x, 0.0, 1.0), axis=-1)


def sample_squared_singvals(model: ProductModel, rng: np.random.Generator) -> np.ndarray:
    """Sorted squared singular values of T_M ... T_1 for one draw.

    Only the first n + v_{j-1} columns of each Haar factor enter the block
    T_j, and those columns have the same joint law as the thin QR factor of
    a Gaussian m_j x (n + v_{j-1}) matrix, so the full m_j x m_j unitary is
    never formed.
    """
    widths, sizes = _shape(model)
    return _accumulate(model, lambda j: haar_columns(sizes[j], widths[j - 1], rng))


_CHUNK = 256


def _sample_chunk(model, seed, lo, hi):
    widths, sizes = _shape(model)
    rngs = [substream(seed, d) for d in range(lo, hi)]
    gauss = [[complex_gaussian(r, (sizes[j], widths[j - 1])) for r in rngs]
             for j in range(1, model.M + 1)]
    factors = {}
    failed = np.zeros(hi - lo, dtype=bool)
    for j in range(1, model.M + 1):
        Q, bad = _phase_fixed_qr(np.stack(gauss[j - 1]))
        if Q is None:
            # probability-zero event: rebuild with a placeholder, redo those draws serially
            failed |= bad
            Q, _ = _phase_fixed_qr(np.where(bad[:, None, None], 1.0, np.stack(gauss[j - 1])))
        factors[j] = Q
    out = _accumulate(model, factors.__getitem__)
    for i in np.flatnonzero(failed):
        out[i] = sample_squared_singvals(model, substream(seed, lo + i))
    return out


@dataclass(frozen=True)
class SampleBatch:
    model: ProductModel
    seed: int
    draws: int
    values: np.ndarray = field(repr=False)  # shape (draws, n), rows sorted

    def __post_init__(self):
        if self.values.shape != (self.draws, self.model.n):
            raise DomainError("values shape does not match (draws, n)")

    def metadata(self) -> dict:
        return {"model": self.model.describe(), "seed": self.seed, "draws": self.draws}


def sample_batch(model: ProductModel, seed: int, draws: int, threads: int = 1) -> SampleBatch:
    """Draw `draws` independent spectra; draw d always uses substream (seed, d)."""
    if draws < 1:
        raise DomainError("draws must be positive")
    if not 0 <= int(seed) <= _MASK64:
        raise DomainError("seed must be a 64-bit unsigned integer")

    # chunk boundaries depend only on draw indices, so thread count never changes the bits
    bounds = [(lo, min(lo + _CHUNK, draws)) for lo in range(0, draws, _CHUNK)]

    def one(b):
        return _sample_chunk(model, int(seed), *b)

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as ex:
            parts = list(ex.map(one, bounds))
    else:
        parts = [one(b) for b in bounds]
    return SampleBatch(model, int(seed), int(draws), np.vstack(parts))


@dataclass(frozen=True)
class DensityCurve:
    abscissae: np.ndarray
    values: np.ndarray
    std_errors: Optional[np.ndarray] = None
    edges: Optional[np.ndarray] = None

    def __post_init__(self):
        if np.any(np.diff(self.abscissae) <= 0):
            raise DomainError("abscissae must be strictly increasing")
        if np.any(self.values < 0):
            raise DomainError("density values must be non-negative")


def empirical_density(batch: SampleBatch, bins: int, range=(0.0, 1.0)) -> DensityCurve:
    """Histogram normalized to the one-point intensity (integrates to n).

    Standard errors treat the n * draws points as binomial counts, which is
    conservative for a repulsive point process.
    """
    lo, hi = float(range[0]), float(range[1])
    if not hi > lo:
        raise DomainError("empty histogram range")
    if batch.draws < 100 or bins < 5:
        raise DomainError("need draws >= 100 and bins >= 5")
    vals = batch.values.ravel()
    counts, edges = np.histogram(vals, bins=bins, range=(lo, hi))
    width = np.diff(edges)
    total = vals.size
    norm = batch.draws * width
    p = counts / total
    se = np.sqrt(total * p * (1 - p)) / norm
    mids = 0.5 * (edges[:-1] + edges[1:])
    return DensityCurve(mids, counts / norm, se, edges)


def edge_samples(model: ProductModel, batch: SampleBatch) -> np.ndarray:
    """rho * (log x_max - log lambda_M), one statistic per draw."""
    lam = lambda_m(model)
    rho = rho_edge(model)
    xmax = batch.values[:, -1]
    if np.any(xmax <= 0):
        raise DomainError("largest sample underflowed to zero")
    return rho * (np.log(xmax) - math.log(lam))


def batch_rows(batch: SampleBatch):
    for d, row in enumerate(batch.values):
        for i, v in enumerate(row):
            yield d, i, v


__all__ = [
    "substream", "complex_gaussian", "haar_columns", "haar_unitary", "sample_squared_singvals",
    "SampleBatch", "sample_batch", "DensityCurve", "empirical_density", "edge_samples", "batch_rows",
]
