"""Ensemble definitions, derived parameters and the regime scaling maps.

Conventions: factor index j runs 0..M with v_0 = 0 and m_0 = 0, so the
j = 0 term of every sum below involves n and 0.  Kernels are expressed in the
log variable u = log x unless the regime is ``gue_edge_x``.
"""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass, field
from typing import NamedTuple, Optional, Union

import numpy as np

from .errors import ConfigError, DegenerateError, DomainError, NoRootError
from .specfun import EULER_GAMMA, digamma, trigamma


@dataclass(frozen=True)
class ProductModel:
    """Y_M = T_M ... T_1 with T_j the top-left (n+v_j) x (n+v_{j-1}) block of
    an m_j x m_j Haar unitary."""

    n: int
    v: tuple
    m: tuple

    def __post_init__(self):
        object.__setattr__(self, "v", tuple(int(x) for x in self.v))
        object.__setattr__(self, "m", tuple(int(x) for x in self.m))
        if int(self.n) != self.n or self.n < 1:
            raise ConfigError("n must be a positive integer")
        if len(self.m) == 0 or len(self.v) != len(self.m):
            raise ConfigError("v and m must be non-empty and of equal length M")
        if any(x < 0 for x in self.v):
            raise ConfigError("v_j must be non-negative")
        prev = 0
        for j, (vj, mj) in enumerate(zip(self.v, self.m), start=1):
            if mj < self.n + prev:
                raise ConfigError(f"m_{j} = {mj} < n + v_{j-1} = {self.n + prev}")
            prev = vj

    @classmethod
    def uniform(cls, n: int, M: int, m: int, v: int = 0) -> "ProductModel":
        return cls(n, (v,) * M, (m,) * M)

    @property
    def M(self) -> int:
        return len(self.m)

    @property
    def widths(self) -> np.ndarray:
        """n + v_j for j = 0..M."""
        return np.array((self.n,) + tuple(self.n + x for x in self.v), dtype=float)

    @property
    def sizes(self) -> np.ndarray:
        """m_j for j = 0..M (m_0 = 0)."""
        return np.array((0,) + self.m, dtype=float)

    def gamma_groups(self):
        """Distinct Gamma shifts with multiplicities.

        log A(z) = sum p_i log Gamma(z + alpha_i) - sum q_i log Gamma(z + beta_i),
        the j = 0 factor contributing Gamma(z + n) / Gamma(z).
        """
        up = Counter(self.widths.tolist())
        down = Counter(self.sizes.tolist())
        for key in set(up) & set(down):
            c = min(up[key], down[key])
            up[key] -= c
            down[key] -= c
        al = [(k, c) for k, c in sorted(up.items()) if c]
        be = [(k, c) for k, c in sorted(down.items()) if c]
        return al, be

    def describe(self) -> dict:
        return {"n": self.n, "M": self.M, "v": list(self.v), "m": list(self.m)}


@dataclass(frozen=True)
class SimplifiedModel:
    """v_j = 0 and m_j = round(n (1 + 1/a)) for all j; the realised ratio
    a' = n / (m - n) is what every formula uses."""

    n: int
    M: int
    a: float

    def __post_init__(self):
        if self.n < 1 or self.M < 1:
            raise ConfigError("n and M must be positive")
        if not 0 < self.a <= self.M:
            raise ConfigError("simplified model requires 0 < a <= M")
        if self.m_size <= self.n:
            raise ConfigError("a too large for this n: m rounds to n")

    @property
    def m_size(self) -> int:
        return int(round(self.n * (1.0 + 1.0 / self.a)))

    @property
    def a_realized(self) -> float:
        return self.n / (self.m_size - self.n)

    def product_model(self) -> ProductModel:
        return ProductModel.uniform(self.n, self.M, self.m_size)

    def describe(self) -> dict:
        return {"n": self.n, "M": self.M, "a": self.a, "a_realized": self.a_realized,
                "m": self.m_size}


AnyModel = Union[ProductModel, SimplifiedModel]

REGIMES = ("normality", "crit_bulk", "crit_edge", "gue_edge", "gue_bulk", "gue_edge_x")
BULK_AMPLITUDES = ("density", "theorem")


@dataclass(frozen=True)
class RegimeSpec:
    kind: str
    k: Optional[int] = None
    u: Optional[float] = None
    theta: Optional[float] = None
    # gue_bulk only: which normalisation of the local density to use
    bulk_amplitude: str = field(default="density")

    def __post_init__(self):
        if self.kind not in REGIMES:
            raise ConfigError(f"unknown regime {self.kind!r}")
        need = {"normality": "k", "crit_bulk": "u", "gue_bulk": "theta"}.get(self.kind)
        for name in ("k", "u", "theta"):
            present = getattr(self, name) is not None
            if present != (name == need):
                raise ConfigError(f"regime {self.kind} {'requires' if name == need else 'does not take'} {name}")
        if self.kind == "crit_bulk" and not 0 < self.u < 1:
            raise ConfigError("u must lie in (0, 1)")
        if self.kind == "normality" and self.k < 1:
            raise ConfigError("k must be >= 1")
        if self.bulk_amplitude not in BULK_AMPLITUDES:
            raise ConfigError(f"bulk_amplitude must be one of {BULK_AMPLITUDES}")

    def describe(self) -> dict:
        out = {"kind": self.kind}
        for name in ("k", "u", "theta"):
            if getattr(self, name) is not None:
                out[name] = getattr(self, name)
        if self.kind == "gue_bulk":
            out["bulk_amplitude"] = self.bulk_amplitude
        return out


def as_product(model: AnyModel) -> ProductModel:
    return model.product_model() if isinstance(model, SimplifiedModel) else model


# ---------------------------------------------------------------------------
# scalar parameters of the product model


def dwr(model: AnyModel) -> float:
    """Modified depth-to-width ratio sum_j 1/(n+v_j) - sum_j 1/m_j."""
    p = as_product(model)
    return float(np.sum(1.0 / p.widths) - np.sum(1.0 / np.array(p.m, dtype=float)))


def check_determinantal(model: AnyModel) -> bool:
    p = as_product(model)
    return p.n <= sum(mj - p.n - vj for vj, mj in zip(p.v, p.m))


def _edge_equation(p: ProductModel, z: float) -> float:
    return float(np.sum(1.0 / (p.widths + z)) - np.sum(1.0 / (p.sizes + z)))


def z0(model: AnyModel) -> float:
    """Positive root of sum_j [1/(n+v_j+z) - 1/(m_j+z)] = 0."""
    p = as_product(model)
    lo, hi = 1e-9, float(p.n)
    f_lo = _edge_equation(p, lo)
    f_hi = _edge_equation(p, hi)
    limit = 2.0**20 * p.n
    while f_lo * f_hi > 0:
        if hi >= limit:
            raise NoRootError("no positive root of the edge equation")
        hi *= 2.0
        f_hi = _edge_equation(p, hi)
    while hi - lo > 1e-13 * hi:
        mid = 0.5 * (lo + hi)
        f_mid = _edge_equation(p, mid)
        if f_mid == 0:
            return mid
        if (f_mid > 0) == (f_lo > 0):
            lo, f_lo = mid, f_mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


def log_lambda_m(model: AnyModel) -> float:
    p = as_product(model)
    z = z0(p)
    return float(np.sum(np.log(p.widths + z)) - np.sum(np.log(p.sizes + z)))


def lambda_m(model: AnyModel) -> float:
    """Soft-edge location prod_j (n+v_j+z0)/(m_j+z0)."""
    return math.exp(log_lambda_m(model))


def rho_edge(model: AnyModel) -> float:
    """Airy scale, using the positive radicand sum_j [1/(m_j+z0)^2 - 1/(n+v_j+z0)^2] / 2."""
    p = as_product(model)
    z = z0(p)
    radicand = 0.5 * float(np.sum(1.0 / (p.sizes + z) ** 2) - np.sum(1.0 / (p.widths + z) ** 2))
    if not radicand > 0:
        raise DegenerateError("non-positive radicand in the edge scale")
    return radicand ** (-1.0 / 3.0)


def _check_k(p: ProductModel, k: int):
    if not 1 <= k <= p.n:
        raise DomainError(f"k must lie in 1..{p.n}")


def rho_normality(model: AnyModel, k: int) -> float:
    p = as_product(model)
    _check_k(p, k)
    top = trigamma(p.widths + 1 - k).real.sum()
    bottom = trigamma(np.array(p.m, dtype=float) + 1 - k).real.sum()
    radicand = top - bottom
    if not radicand > 0:
        raise DegenerateError("non-positive radicand in rho(k)")
    return math.sqrt(radicand)


def normality_center(model: AnyModel, k: int) -> float:
    p = as_product(model)
    _check_k(p, k)
    return float(digamma(p.widths + 1 - k).real.sum() - digamma(np.array(p.m, dtype=float) + 1 - k).real.sum())


def gamma_prime(model: AnyModel, u: float) -> float:
    """Finite-size sum_j 1/(n+v_j-nu) - sum_j 1/(m_j-nu)."""
    p = as_product(model)
    nu = p.n * u
    w = p.widths - nu
    mm = np.array(p.m, dtype=float) - nu
    if np.any(w <= 0) or np.any(mm <= 0):
        raise DomainError("gamma_prime: non-positive denominator")
    return float(np.sum(1.0 / w) - np.sum(1.0 / mm))


# ---------------------------------------------------------------------------
# limiting density of the simplified model, parameterised by theta


@dataclass(frozen=True)
class BulkParam:
    x: float
    dens: float
    vm: float
    w_plus: complex


def _check_ma(M: int, a: float):
    # a = M is admitted: the density is still defined (M = a = 1 is the arcsine law)
    if M < 1 or not 0 < a <= M:
        raise DomainError("requires M >= 1 and 0 < a <= M")


def bulk_param(M: int, a: float, theta: float) -> BulkParam:
    _check_ma(M, a)
    if not 0 < theta < math.pi / (M + 1):
        raise DomainError("theta must lie in (0, pi/(M+1))")
    s1 = math.sin((M + 1) * theta)
    sm = math.sin(M * theta)
    st = math.sin(theta)
    cm = math.cos(M * theta)
    ct = math.cos(theta)
    vm = (M + 1) * math.log(s1) - M * math.log(sm) - math.log(st)
    x = math.exp(M * math.log(a) - (M + 1) * math.log(a + 1) + vm)
    denom = (a + 1) ** 2 * sm**2 * st**2 + (a * cm * st - sm * ct) ** 2
    log_dens = ((M + 2) * math.log(a + 1) + (M + 1) * math.log(sm) + 2 * math.log(st)
                - math.log(math.pi) - M * math.log(a) - M * math.log(s1) - math.log(denom))
    e = complex(math.cos(theta), math.sin(theta))
    w_plus = s1 * e / ((a + 1) * sm - a * s1 * e)
    return BulkParam(x=x, dens=math.exp(log_dens), vm=vm, w_plus=w_plus)


@dataclass(frozen=True)
class EdgeConstants:
    x_star: float
    c2: float


def x_star(M: int, a: float) -> float:
    """Right end of the limiting support."""
    _check_ma(M, a)
    return math.exp((M + 1) * math.log(M + 1) + M * math.log(a)
                    - (M + 1) * math.log(a + 1) - M * math.log(M))


def edge_constants(M: int, a: float) -> EdgeConstants:
    if M < 1 or a <= 0:
        raise DomainError("requires M >= 1 and a > 0")
    if a >= M:
        raise DegenerateError("edge constants degenerate for a >= M")
    x_star_ = x_star(M, a)
    c2 = math.exp(-math.log(2) / 3 + M * math.log(a) + (M + 2 / 3) * math.log(M + 1)
                  + (4 / 3) * math.log(M - a) - (M + 5 / 3) * math.log(a + 1)
                  - (M + 1 / 3) * math.log(M))
    return EdgeConstants(x_star=x_star_, c2=c2)


def _x_of_theta(M, a, theta):
    return bulk_param(M, a, theta).x


def theta_of_x(M: int, a: float, x: float) -> float:
    """Invert the strictly decreasing map theta -> x(theta) by bisection."""
    _check_ma(M, a)
    xs = x_star(M, a)
    if not 0 < x < xs:
        raise DomainError("x outside the open support (0, x_*)")
    lo, hi = 0.0, math.pi / (M + 1)
    while hi - lo > 1e-13 * hi:
        mid = 0.5 * (lo + hi)
        if _x_of_theta(M, a, mid) > x:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


def limiting_density(M: int, a: float, x: float) -> float:
    return bulk_param(M, a, theta_of_x(M, a, x)).dens


def limiting_cdf(M: int, a: float, x, nodes: int = 64) -> np.ndarray:
    """Mass of [0, x] under the limiting density (theta substitution, Gauss-Legendre)."""
    xs = np.atleast_1d(np.asarray(x, dtype=float))
    out = np.empty_like(xs)
    star = x_star(M, a)
    gx, gw = np.polynomial.legendre.leggauss(nodes)
    top = math.pi / (M + 1)
    for i, xv in enumerate(xs):
        if xv <= 0:
            out[i] = 0.0
            continue
        if xv >= star:
            out[i] = 1.0
            continue
        th = theta_of_x(M, a, xv)
        out[i] = _theta_mass(M, a, th, top, gx, gw)
    return out


def _theta_mass(M, a, lo, hi, gx, gw):
    # int_lo^hi dens(theta) |dx/dtheta| dtheta, with geometric panels toward
    # the hard edge theta -> pi/(M+1) where the integrand has an integrable blow-up
    edges = [lo]
    gap = hi - lo
    while gap > 1e-12 * hi:
        gap *= 0.5
        edges.append(hi - gap)
    e = np.array(edges)
    p0, p1 = e[:-1], e[1:]
    th = 0.5 * (p1 - p0)[:, None] * gx[None, :] + 0.5 * (p0 + p1)[:, None]
    vals = _dens_dx(M, a, th)
    return float(np.sum(0.5 * (p1 - p0) * (vals @ gw)))


def _dens_dx(M, a, th):
    # dens(theta) * |dx/dtheta|, vectorised
    s1, sm, st = np.sin((M + 1) * th), np.sin(M * th), np.sin(th)
    cm, ct = np.cos(M * th), np.cos(th)
    vm = (M + 1) * np.log(s1) - M * np.log(sm) - np.log(st)
    x = np.exp(M_log_prefactor(M, a) + vm)
    denom = (a + 1) ** 2 * sm**2 * st**2 + (a * cm * st - sm * ct) ** 2
    dens = np.exp((M + 2) * math.log(a + 1) + (M + 1) * np.log(sm) + 2 * np.log(st)
                  - math.log(math.pi) - M * math.log(a) - M * np.log(s1) - np.log(denom))
    dlog = (M + 1) ** 2 / np.tan((M + 1) * th) - M**2 / np.tan(M * th) - 1 / np.tan(th)
    return dens * x * np.abs(dlog)


def density_mass(M: int, a: float, nodes: int = 64) -> float:
    """Total mass of the limiting density (1 up to quadrature error)."""
    _check_ma(M, a)
    gx, gw = np.polynomial.legendre.leggauss(nodes)
    return _theta_mass(M, a, 0.0, math.pi / (M + 1), gx, gw)


# ---------------------------------------------------------------------------
# scaling maps: location g(xi), conjugation rate c and amplitude A with
#   scaled kernel = A * exp(c (xi - eta)) * K(g(xi), g(eta))


class _Simple(NamedTuple):
    n: int
    M: int
    a_realized: float


def _simplified(model: AnyModel, kind: str) -> _Simple:
    if isinstance(model, SimplifiedModel):
        return _Simple(model.n, model.M, model.a_realized)
    p = model
    if len(set(p.m)) == 1 and not any(p.v) and p.m[0] > p.n:
        a = p.n / (p.m[0] - p.n)
        if 0 < a <= p.M:
            return _Simple(p.n, p.M, a)
    raise ConfigError(f"regime {kind} needs v = 0, equal m_j and 0 < n/(m - n) <= M")


def _bulk_scale(model: AnyModel, spec: RegimeSpec):
    sm = _simplified(model, spec.kind)
    a = sm.a_realized
    M = sm.M
    bp = bulk_param(M, a, spec.theta)
    if spec.bulk_amplitude == "density":
        scale = sm.n * bp.x * bp.dens
    else:
        th = spec.theta
        s1, smt, st = math.sin((M + 1) * th), math.sin(M * th), math.sin(th)
        denom = (a + 1) ** 2 * smt**2 * st**2 + (a * math.cos(M * th) * st - smt * math.cos(th)) ** 2
        scale = sm.n * s1 * smt * st / (math.pi * denom)
    return sm, a, bp, scale


def gue_bulk_rate(M: int, a: float, theta: float) -> float:
    """-pi (cot theta - a sin((M+1)theta) / ((a+1) sin(M theta) sin theta))."""
    return -math.pi * (1 / math.tan(theta) - a * math.sin((M + 1) * theta)
                       / ((a + 1) * math.sin(M * theta) * math.sin(theta)))


def _crit_bulk_parts(p: ProductModel, u: float):
    nu = p.n * u
    fl = math.floor(nu)
    gp = gamma_prime(p, u)
    mm = np.array(p.m, dtype=float)
    w = np.array(p.v, dtype=float) + p.n
    base = float(np.sum(np.log((w - nu) / (mm - nu)))) + math.log((1 - u) / u)
    return base + gp * (nu - fl - 0.5), fl


def scaling_location(model: AnyModel, spec: RegimeSpec, xi: float) -> float:
    kind = spec.kind
    if kind == "gue_bulk":
        sm, a, bp, scale = _bulk_scale(model, spec)
        return M_log_prefactor(sm.M, a) + bp.vm + xi / scale
    if kind == "gue_edge_x":
        sm = _simplified(model, kind)
        ec = edge_constants(sm.M, sm.a_realized)
        return ec.x_star + ec.c2 * xi / sm.n ** (2.0 / 3.0)
    p = as_product(model)
    if kind == "normality":
        return normality_center(p, spec.k) + xi * rho_normality(p, spec.k)
    if kind == "crit_bulk":
        return _crit_bulk_parts(p, spec.u)[0] + xi
    if kind == "crit_edge":
        base = float(np.sum(np.log(p.widths)) - np.sum(np.log(np.array(p.m, dtype=float))))
        return base - 0.5 * dwr(p) + xi
    if kind == "gue_edge":
        return log_lambda_m(p) + xi / rho_edge(p)
    raise ConfigError(kind)


def M_log_prefactor(M: int, a: float) -> float:
    """log(a^M / (a+1)^(M+1))."""
    return M * math.log(a) - (M + 1) * math.log(a + 1)


def conjugation_rate(model: AnyModel, spec: RegimeSpec) -> float:
    kind = spec.kind
    if kind == "crit_edge":
        return 0.0
    if kind == "gue_bulk":
        sm, a, _, _ = _bulk_scale(model, spec)
        return gue_bulk_rate(sm.M, a, spec.theta)
    if kind == "gue_edge_x":
        sm = _simplified(model, kind)
        a = sm.a_realized
        ec = edge_constants(sm.M, a)
        return -sm.n ** (1.0 / 3.0) * (sm.M + 1) / (sm.M - a) * ec.c2 / ec.x_star
    p = as_product(model)
    if kind == "normality":
        return (spec.k - 1) * rho_normality(p, spec.k)
    if kind == "crit_bulk":
        return float(_crit_bulk_parts(p, spec.u)[1])
    if kind == "gue_edge":
        return -z0(p) / rho_edge(p)
    raise ConfigError(kind)


def amplitude(model: AnyModel, spec: RegimeSpec) -> float:
    kind = spec.kind
    if kind in ("crit_edge", "crit_bulk"):
        return 1.0
    if kind == "gue_bulk":
        return 1.0 / _bulk_scale(model, spec)[3]
    if kind == "gue_edge_x":
        sm = _simplified(model, kind)
        return edge_constants(sm.M, sm.a_realized).c2 / sm.n ** (2.0 / 3.0)
    p = as_product(model)
    if kind == "normality":
        return rho_normality(p, spec.k)
    if kind == "gue_edge":
        return 1.0 / rho_edge(p)
    raise ConfigError(kind)


def derived_parameters(model: AnyModel) -> dict:
    """Every scalar the model module can report, with failures recorded as strings."""
    p = as_product(model)
    out = {"model": model.describe(), "dwr": dwr(p), "determinantal": check_determinantal(p)}
    for name, fn in (("z0", z0), ("lambda_M", lambda_m), ("rho_edge", rho_edge)):
        try:
            out[name] = fn(p)
        except DomainError as exc:
            out[name] = None
            out.setdefault("errors", {})[name] = str(exc)
    out["rho_normality_k1"] = rho_normality(p, 1)
    if isinstance(model, SimplifiedModel) or (len(set(p.m)) == 1 and not any(p.v)):
        try:
            sm = _simplified(model, "gue_bulk")
            ec = edge_constants(sm.M, sm.a_realized)
            out["a_realized"] = sm.a_realized
            out["x_star"] = ec.x_star
            out["c2"] = ec.c2
        except (ConfigError, DomainError):
            pass
    return out


__all__ = [
    "ProductModel", "SimplifiedModel", "RegimeSpec", "BulkParam", "EdgeConstants",
    "dwr", "check_determinantal", "z0", "lambda_m", "log_lambda_m", "rho_edge",
    "rho_normality", "normality_center", "gamma_prime", "bulk_param", "theta_of_x",
    "edge_constants", "x_star", "density_mass", "limiting_density", "limiting_cdf", "scaling_location",
    "conjugation_rate", "amplitude", "derived_parameters", "as_product", "EULER_GAMMA",
]
