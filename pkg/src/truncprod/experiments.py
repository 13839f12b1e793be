"""Convergence harness: scaled finite kernels against their limits, and
Monte Carlo spectra against the kernel diagonal and the limiting law."""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from scipy import integrate, stats

from .errors import ConfigError, DomainError
from .io import provenance, write_csv, write_json
from .kernel_finite import DEFAULT_SETTINGS, QuadratureSettings, kernel_grid, kernel_x
from .kernel_limit import limit_value
from .model import (
    M_log_prefactor, ProductModel, RegimeSpec, _dens_dx, _simplified, _theta_mass,
    as_product, dwr, gamma_prime, x_star,
)
from .sampler import SampleBatch, empirical_density, sample_batch

DEFAULT_GRID = (-1.0, 0.0, 1.0)

_LIMIT_OF = {
    "normality": "gaussian",
    "crit_bulk": "crit_bulk",
    "crit_edge": "crit_edge",
    "gue_edge": "airy",
    "gue_edge_x": "airy",
    "gue_bulk": "sine",
}


# ---------------------------------------------------------------------------
# kernel distances


def det_rel(F: np.ndarray, L: np.ndarray) -> float:
    """|det F - det L| / max(|det F|, |det L|); 0 when both vanish."""
    dF = float(np.linalg.det(F))
    dL = float(np.linalg.det(L))
    scale = max(abs(dF), abs(dL))
    return 0.0 if scale == 0 else abs(dF - dL) / scale


def conjugate(F: np.ndarray, grid: Sequence[float], c: float) -> np.ndarray:
    """e^{c (xi_i - xi_j)} F_ij: the same point process, a different gauge."""
    g = np.asarray(grid, dtype=float)
    return F * np.exp(c * (g[:, None] - g[None, :]))


def limit_gamma(model, spec: RegimeSpec) -> Optional[float]:
    # finite-size parameters remove the O(|dwr - gamma|) error from the comparison
    if spec.kind == "crit_bulk":
        return gamma_prime(model, spec.u)
    if spec.kind == "crit_edge":
        return dwr(model)
    return None


def limit_matrix(kind: str, grid: Sequence[float], gamma: Optional[float] = None) -> np.ndarray:
    g = [float(v) for v in grid]
    return np.array([[limit_value(kind, a, b, gamma) for b in g] for a in g])


@dataclass(frozen=True)
class ComparisonReport:
    model: dict
    spec: RegimeSpec
    grid: tuple
    finite_matrix: np.ndarray = field(repr=False)
    limit_matrix: np.ndarray = field(repr=False)
    sup_distance: float
    diag_rel_distance: float
    det_rel_distance: float
    runtime_seconds: float
    limit_kind: str = ""
    gamma: Optional[float] = None
    max_est_error: float = 0.0
    methods: tuple = ()

    def summary(self) -> dict:
        return {
            "model": self.model, "spec": self.spec.describe(), "grid": list(self.grid),
            "limit_kind": self.limit_kind, "gamma": self.gamma,
            "sup_distance": self.sup_distance, "diag_rel_distance": self.diag_rel_distance,
            "det_rel_distance": self.det_rel_distance, "max_est_error": self.max_est_error,
            "methods": sorted(set(self.methods)), "runtime_seconds": self.runtime_seconds,
        }

    def rows(self):
        g = self.grid
        for i, a in enumerate(g):
            for j, b in enumerate(g):
                yield a, b, self.finite_matrix[i, j], self.limit_matrix[i, j]


REPORT_HEADER = ("xi", "eta", "finite", "limit")


def compare_matrices(F: np.ndarray, L: np.ndarray, diagonal_only: bool = False):
    """(sup, diag_rel, det_rel) between two kernel matrices on a common grid.

    With ``diagonal_only`` the comparison is made on the diagonal alone and no
    determinant distance is reported (nan): used when the limit has rank one.
    """
    F = np.asarray(F, dtype=float)
    L = np.asarray(L, dtype=float)
    if F.shape != L.shape or F.ndim != 2 or F.shape[0] != F.shape[1]:
        raise DomainError("matrices must be square and of equal shape")
    dF, dL = np.diag(F), np.diag(L)
    diag = float(np.max(np.abs(dF - dL) / np.abs(dL)))
    if diagonal_only:
        return float(np.max(np.abs(dF - dL))), diag, math.nan
    return float(np.max(np.abs(F - L))), diag, det_rel(F, L)


def kernel_distance(model, spec: RegimeSpec, grid: Sequence[float] = DEFAULT_GRID,
                    q: QuadratureSettings = DEFAULT_SETTINGS, threads: Optional[int] = None) -> ComparisonReport:
    """Scaled finite kernel on ``grid`` against the matching limit kernel.

    The normality limit does not depend on xi, so that comparison is made
    on the diagonal (the eta-slice xi = eta) and its determinant distance is nan.
    """
    g = tuple(float(v) for v in grid)
    if any(abs(v) > 4 for v in g):
        raise DomainError("grid points must satisfy |xi| <= 4")
    t0 = time.perf_counter()
    km = kernel_grid(model, spec, g, q, threads=threads)
    kind = _LIMIT_OF[spec.kind]
    gamma = limit_gamma(model, spec)
    L = limit_matrix(kind, g, gamma)
    F = km.values
    sup, diag, det = compare_matrices(F, L, diagonal_only=spec.kind == "normality")
    return ComparisonReport(
        model=model.describe(), spec=spec, grid=g, finite_matrix=F, limit_matrix=L,
        sup_distance=sup, diag_rel_distance=diag, det_rel_distance=det,
        runtime_seconds=time.perf_counter() - t0, limit_kind=kind, gamma=gamma,
        max_est_error=float(km.errors.max()),
        methods=tuple(m for row in km.methods for m in row),
    )


def write_report(report: ComparisonReport, out_dir, stem: str = "compare", settings: Optional[dict] = None):
    out = Path(out_dir)
    csv = write_csv(out / f"{stem}.csv", REPORT_HEADER, report.rows())
    meta = provenance(report=report.summary(), settings=settings or {})
    js = write_json(out / f"{stem}.json", meta)
    return csv, js


# ---------------------------------------------------------------------------
# three-phase sweep


def default_family(n: int = 30, Ms: Sequence[int] = (3, 30, 300, 3000), m: Optional[int] = None):
    m = 2 * n if m is None else m
    return [ProductModel.uniform(n, M, m) for M in Ms]


SWEEP_HEADER = ("M", "dwr", "gaussian_distance", "critical_distance", "airy_distance")


@dataclass(frozen=True)
class SweepTable:
    rows: tuple  # one tuple per model, columns as in SWEEP_HEADER
    reports: tuple = field(repr=False, default=())
    runtime_seconds: float = 0.0

    def column(self, name: str) -> np.ndarray:
        i = SWEEP_HEADER.index(name)
        return np.array([r[i] for r in self.rows], dtype=float)


def transition_sweep(family: Sequence[ProductModel], spec_kind: str = "crit_edge",
                     grid: Sequence[float] = DEFAULT_GRID, q: QuadratureSettings = DEFAULT_SETTINGS,
                     threads: Optional[int] = None) -> SweepTable:
    """For each model: dwr and the distances to the Gaussian, critical and GUE limits.

    The Gaussian column is the diagonal sup-distance of the k = 1 normality
    scaling; the other two columns use the diagonal relative distance so
    that the entries do not depend on the choice of gauge.
    """
    if spec_kind not in ("crit_edge", "crit_bulk"):
        raise ConfigError("spec_kind must be crit_edge or crit_bulk")
    if len(family) == 0:
        raise ConfigError("empty family")
    t0 = time.perf_counter()
    rows, reports = [], []
    for model in family:
        p = as_product(model)
        crit = RegimeSpec(spec_kind, u=0.5) if spec_kind == "crit_bulk" else RegimeSpec(spec_kind)
        r_gauss = kernel_distance(p, RegimeSpec("normality", k=1), grid, q, threads)
        r_crit = kernel_distance(p, crit, grid, q, threads)
        r_airy = kernel_distance(p, RegimeSpec("gue_edge"), grid, q, threads)
        rows.append((p.M, dwr(p), r_gauss.sup_distance, r_crit.diag_rel_distance, r_airy.diag_rel_distance))
        reports.extend([r_gauss, r_crit, r_airy])
    return SweepTable(tuple(rows), tuple(reports), time.perf_counter() - t0)


def write_sweep(table: SweepTable, out_dir, stem: str = "sweep", settings: Optional[dict] = None):
    out = Path(out_dir)
    csv = write_csv(out / f"{stem}.csv", SWEEP_HEADER, table.rows)
    meta = provenance(reports=[r.summary() for r in table.reports], settings=settings or {},
                      runtime_seconds=table.runtime_seconds)
    return csv, write_json(out / f"{stem}.json", meta)


# ---------------------------------------------------------------------------
# density: Monte Carlo vs limiting law and vs finite-n kernel


def _x_of_theta(M, a, th):
    s1, sm, st = np.sin((M + 1) * th), np.sin(M * th), np.sin(th)
    return np.exp(M_log_prefactor(M, a) + (M + 1) * np.log(s1) - M * np.log(sm) - np.log(st))


def _theta_of_x(M, a, x):
    lo = np.zeros_like(x)
    hi = np.full_like(x, math.pi / (M + 1))
    for _ in range(60):
        mid = 0.5 * (lo + hi)
        right = _x_of_theta(M, a, mid) > x
        lo = np.where(right, mid, lo)
        hi = np.where(right, hi, mid)
    return 0.5 * (lo + hi)


def limit_cdf(M: int, a: float, x) -> np.ndarray:
    """Vectorised cumulative of the limiting density.

    Masses between consecutive sorted theta values come from 16-point
    Gauss-Legendre on each gap; only the last gap, which touches the hard
    edge, needs the graded panels.
    """
    x = np.asarray(x, dtype=float)
    flat = x.ravel()
    star = x_star(M, a)
    inside = (flat > 0) & (flat < star)
    out = np.where(flat >= star, 1.0, 0.0)
    if inside.any():
        th = _theta_of_x(M, a, flat[inside])
        order = np.argsort(th)
        ts = th[order]
        top = math.pi / (M + 1)
        gx, gw = np.polynomial.legendre.leggauss(16)
        p0, p1 = ts[:-1], ts[1:]
        nodes = 0.5 * (p1 - p0)[:, None] * gx + 0.5 * (p0 + p1)[:, None]
        gaps = 0.5 * (p1 - p0) * (_dens_dx(M, a, nodes) @ gw) if ts.size > 1 else np.zeros(0)
        g64x, g64w = np.polynomial.legendre.leggauss(64)
        tail = _theta_mass(M, a, ts[-1], top, g64x, g64w)
        # F at ts[i] is the mass of [ts[i], top]
        F = tail + np.concatenate([np.cumsum(gaps[::-1])[::-1], [0.0]])
        vals = np.empty_like(F)
        vals[order] = F
        out[inside] = vals
    return np.clip(out, 0.0, 1.0).reshape(x.shape)


def ks_statistic(values, cdf) -> float:
    """Two-sided Kolmogorov-Smirnov distance of a sample from a continuous cdf."""
    return float(stats.kstest(np.asarray(values, dtype=float).ravel(), cdf).statistic)


def kernel_bin_means(model, edges: np.ndarray, q: QuadratureSettings = DEFAULT_SETTINGS) -> np.ndarray:
    """Bin averages of the one-point intensity K~(x, x).

    Averages rather than midpoint values: the first bin carries the
    integrable hard-edge singularity.
    """
    p = as_product(model)
    f = lambda x: kernel_x(p, x, x, q).value
    out = []
    for lo, hi in zip(edges[:-1], edges[1:]):
        lo, hi = max(lo, 0.0), min(hi, 1.0)
        v, _ = integrate.quad(f, lo, hi, epsabs=1e-10, epsrel=1e-8, limit=200)
        out.append(v / (hi - lo))
    return np.array(out)


DENSITY_HEADER = ("bin_lo", "bin_hi", "empirical", "std_error", "kernel", "z")


@dataclass(frozen=True)
class DensityReport:
    model: dict
    seed: int
    draws: int
    bins: int
    edges: np.ndarray = field(repr=False)
    empirical: np.ndarray = field(repr=False)
    std_errors: np.ndarray = field(repr=False)
    kernel: Optional[np.ndarray] = field(repr=False, default=None)
    z: Optional[np.ndarray] = field(repr=False, default=None)
    ks: Optional[float] = None
    limit: Optional[dict] = None
    runtime_seconds: float = 0.0

    @property
    def max_abs_z(self) -> Optional[float]:
        return None if self.z is None else float(np.max(np.abs(self.z)))

    def summary(self) -> dict:
        return {"model": self.model, "seed": self.seed, "draws": self.draws, "bins": self.bins,
                "ks": self.ks, "limit": self.limit, "max_abs_z": self.max_abs_z,
                "runtime_seconds": self.runtime_seconds}

    def rows(self):
        nan = np.full(self.bins, math.nan)
        k = self.kernel if self.kernel is not None else nan
        z = self.z if self.z is not None else nan
        for i in range(self.bins):
            yield self.edges[i], self.edges[i + 1], self.empirical[i], self.std_errors[i], k[i], z[i]


def _limit_params(model):
    try:
        sm = _simplified(model, "density")
    except ConfigError:
        return None
    return sm.M, sm.a_realized


def density_comparison(model, draws: int, seed: int, bins: int = 40, *, threads: int = 1,
                       with_kernel: Optional[bool] = None, with_limit: Optional[bool] = None,
                       batch: Optional[SampleBatch] = None,
                       q: QuadratureSettings = DEFAULT_SETTINGS) -> DensityReport:
    """Sample the ensemble and compare with the finite-n kernel and the limiting law.

    The kernel comparison (on by default for n <= 50) reports per-bin
    z-scores; their standard errors come from the predicted bin probability,
    so that empty bins are still tested. The limiting comparison is the KS
    distance to the limiting cumulative and applies to models with v = 0 and
    equal m_j with 0 < a < M (a = M allowed).
    """
    t0 = time.perf_counter()
    p = as_product(model)
    if batch is None:
        batch = sample_batch(p, seed, draws, threads=threads)
    curve = empirical_density(batch, bins)
    edges = curve.edges
    if with_kernel is None:
        with_kernel = p.n <= 50
    kern = z = None
    if with_kernel:
        kern = kernel_bin_means(p, edges, q)
        width = np.diff(edges)
        total = batch.draws * p.n
        prob = np.clip(kern * width / p.n, 0.0, 1.0)
        se = np.sqrt(total * prob * (1 - prob)) / (batch.draws * width)
        z = (curve.values - kern) / np.where(se > 0, se, np.inf)
    ks = limit = None
    lp = _limit_params(model)
    if with_limit is None:
        with_limit = lp is not None
    if with_limit:
        if lp is None:
            raise ConfigError("limiting density needs v = 0 and equal m_j")
        M, a = lp
        ks = ks_statistic(batch.values, lambda x: limit_cdf(M, a, x))
        limit = {"M": M, "a": a, "x_star": x_star(M, a)}
    return DensityReport(
        model=model.describe(), seed=int(batch.seed), draws=int(batch.draws), bins=int(bins),
        edges=edges, empirical=curve.values, std_errors=curve.std_errors, kernel=kern, z=z,
        ks=ks, limit=limit, runtime_seconds=time.perf_counter() - t0,
    )


def write_density(report: DensityReport, out_dir, stem: str = "density", settings: Optional[dict] = None):
    out = Path(out_dir)
    csv = write_csv(out / f"{stem}.csv", DENSITY_HEADER, report.rows())
    return csv, write_json(out / f"{stem}.json", provenance(report=report.summary(), settings=settings or {}))


__all__ = [
    "ComparisonReport", "DensityReport", "SweepTable", "DEFAULT_GRID", "compare_matrices", "det_rel",
    "conjugate", "limit_matrix", "limit_gamma", "kernel_distance", "transition_sweep", "default_family",
    "density_comparison", "kernel_bin_means", "limit_cdf", "ks_statistic", "write_report", "write_sweep",
    "write_density",
]
