"""Finite-n correlation kernels of the squared singular values.

Log variable.  With
    A(z) = prod_{j=0}^M Gamma(z + n + v_j) / Gamma(z + m_j),   m_0 = 0,
the kernel of the log-transformed points is

    K_n(x, y) = (2 pi i)^{-2} int_L ds oint_S dt  A(s) e^{-ys} e^{xt} / (A(t) (s - t)),

where S encloses the zeros 0, -1, ..., -(n-1) of A (the poles of 1/A) and L
is a left-opening path to the right of the poles of A (all <= -n).

Two evaluation paths are provided.

``residue``  The t-integral is replaced by the n residues at t = -k, leaving
    one-dimensional s-integrals S_k(y) taken along parabolas whose vertex is
    chosen per term.  Exact and cheap for small n, but the alternating residue
    sum cancels catastrophically once n is a few dozen.

``contour``  S is the closed level curve Im G = 0 of G = (log A)', running
    from the real minimiser z0 of G on (0, inf) around the zero cluster to the
    real maximiser t_L of G just left of -(n-1).  The s-parabola crosses S at
    the point W where G(W) = (x+y)/2, which keeps every integrand of moderate
    size.  Used automatically when the residue sum is ill-conditioned.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from functools import lru_cache
from typing import Optional, Sequence

import numpy as np
from scipy.optimize import brentq, minimize_scalar
from scipy.special import gammaln

from .errors import ConfigError, ConvergenceError, DomainError
from .model import (
    AnyModel,
    ProductModel,
    RegimeSpec,
    amplitude,
    as_product,
    check_determinantal,
    conjugation_rate,
    scaling_location,
)
from .specfun import digamma, log_gamma, trigamma

_EPS = np.finfo(float).eps
_GLX, _GLW = np.polynomial.legendre.leggauss(16)
METHODS = ("auto", "residue", "contour")
_RESIDUE_MAX_N = 8


@dataclass(frozen=True)
class QuadratureSettings:
    """Node and tolerance policy.

    ``parabola_vertex`` and ``parabola_slope`` describe the fixed x-variable
    s-path  s = vertex - w^2 + i slope w  used when ``vertex_mode`` is
    ``"fixed"``; the default ``"adaptive"`` places one parabola per residue
    term at the point that minimises the integrand's L1 mass.
    """

    base_nodes: int = 96
    max_doublings: int = 6
    rel_tol: float = 1e-9
    parabola_vertex: float = -0.5
    parabola_slope: float = 1.0
    tail_cutoff: float = 1e-18
    method: str = "auto"
    vertex_mode: str = "adaptive"

    def __post_init__(self):
        if not -1.0 < self.parabola_vertex < 0.0:
            raise ConfigError("parabola_vertex must lie in (-1, 0)")
        if self.base_nodes < 8 or self.max_doublings < 1:
            raise ConfigError("base_nodes >= 8 and max_doublings >= 1 required")
        if not 0 < self.rel_tol < 1 or not 0 < self.tail_cutoff < 1:
            raise ConfigError("rel_tol and tail_cutoff must lie in (0, 1)")
        if self.parabola_slope <= 0:
            raise ConfigError("parabola_slope must be positive")
        if self.method not in METHODS:
            raise ConfigError(f"method must be one of {METHODS}")
        if self.vertex_mode not in ("adaptive", "fixed"):
            raise ConfigError("vertex_mode must be 'adaptive' or 'fixed'")


DEFAULT_SETTINGS = QuadratureSettings()


@dataclass(frozen=True)
class KernelValue:
    value: float
    est_error: float
    nodes_used: int
    method: str = "residue"
    # sum of |terms| / |value|: the roundoff amplification of either path
    condition: float = 1.0


# ---------------------------------------------------------------------------
# Gamma-ratio function A and its logarithmic derivatives


_RATIONAL_MAX_ROOTS = 128


class _GammaRatio:
    """A(z) and its logarithmic derivatives.

    All Gamma shifts are integers, so A is the rational function
    prod_i (z + i)^{ord_i}.  When it has few distinct roots and poles that
    product form is used directly: it is exact, whereas a grouped sum of
    log-Gamma values loses digits to cancellation when factors repeat
    thousands of times.  Otherwise the grouped Gamma form is used."""

    def __init__(self, model: ProductModel):
        al, be = model.gamma_groups()
        self.al = [(float(a), float(p)) for a, p in al]
        self.be = [(float(b), float(q)) for b, q in be]
        self.n = model.n
        last = int(round(max([a for a, _ in self.al] + [b for b, _ in self.be])))
        orders = np.array([self.order_at(i) for i in range(last + 1)], dtype=float)
        nz = np.flatnonzero(orders)
        self.rational = nz.size <= _RATIONAL_MAX_ROOTS
        self.roots = nz.astype(float)
        self.orders = orders[nz]

    def _terms(self, z, fn):
        z = np.asarray(z, dtype=complex)
        return fn(z[..., None] + self.roots) @ self.orders

    def log(self, z):
        if self.rational:
            return self._terms(z, np.log)
        z = np.asarray(z, dtype=complex)
        out = np.zeros_like(z)
        for a, p in self.al:
            out = out + p * log_gamma(z + a)
        for b, q in self.be:
            out = out - q * log_gamma(z + b)
        return out

    def _sum(self, fn, z):
        z = np.asarray(z, dtype=complex)
        out = np.zeros_like(z)
        for a, p in self.al:
            out = out + p * fn(z + a)
        for b, q in self.be:
            out = out - q * fn(z + b)
        return out

    def G(self, z):
        if self.rational:
            return self._terms(z, np.reciprocal)
        return self._sum(digamma, z)

    def G1(self, z):
        if self.rational:
            return -self._terms(z, lambda u: np.reciprocal(u * u))
        return self._sum(trigamma, z)

    def g(self, z: float) -> float:
        return float(self.G(np.array([z + 0j])).real[0])

    def g1(self, z: float) -> float:
        return float(self.G1(np.array([z + 0j])).real[0])

    def order_at(self, i: int) -> int:
        """Order of A at z = -i (positive for zeros, negative for poles)."""
        up = sum(p for a, p in self.al if i >= a)
        down = sum(q for b, q in self.be if i >= b)
        return int(round(down - up))


# ---------------------------------------------------------------------------
# residue path


class _ResidueSum:
    def __init__(self, model: ProductModel, ratio: _GammaRatio):
        n = model.n
        k = np.arange(n, dtype=float)
        lr = -gammaln(k + 1) - gammaln(n - k)
        m = np.array(model.m, dtype=float)
        w = np.array(model.v, dtype=float) + n
        # grouped sums over j = 1..M
        for val, cnt in zip(*np.unique(m, return_counts=True)):
            lr += cnt * gammaln(val - k)
        for val, cnt in zip(*np.unique(w, return_counts=True)):
            lr -= cnt * gammaln(val - k)
        self.log_weight = lr
        self.sign = np.where(np.arange(n) % 2 == 0, 1.0, -1.0)
        self.k = k
        self.ratio = ratio
        self.n = n

    def _phi(self, s, y):
        return self.ratio.log(s) - y * s

    def _scale(self, c: float) -> float:
        g1 = abs(self.ratio.g1(c))
        return float(np.clip(1.0 / math.sqrt(g1) if g1 > 0 else 1e4, 1e-3, 1e4))

    @staticmethod
    def _kappa(sc):
        return 1.0 / (2.0 * max(1.0, 3.0 * sc))

    def _candidates(self, y: float) -> np.ndarray:
        n = self.n
        left = np.linspace(-n + 0.5, 0.5, max(8, min(2 * n + 1, 80)))
        far = max(10.0, 4.0 * n)
        if y < 0:
            far = max(far, min(1e6, 20.0 * self.ratio_decay() / abs(y)))
        right = np.geomspace(0.75, far, 24)
        # deep in the hard-edge tail the saddle approaches the pole at -n
        edge = -n + np.geomspace(1e-4, 0.4, 12)
        c = np.concatenate([edge, left, right])
        # vertices never sit exactly on an integer
        frac = c - np.round(c)
        c = np.where(np.abs(frac) < 1e-6, c + 1e-3, c)
        return np.unique(c)

    def ratio_decay(self) -> float:
        # D with G(z) ~ -D / z at infinity
        return max(1.0, sum(q * b for b, q in self.ratio.be) - sum(p * a for a, p in self.ratio.al))

    def _log_l1(self, cands, y, ks):
        """log of the L1 mass of the k-th s-integrand on the parabola with vertex c,
        for every (k, c) pair."""
        u = np.linspace(-7.0, 7.0, 57)
        du = u[1] - u[0]
        g1 = np.abs(self.ratio.G1(cands + 0j).real)
        with np.errstate(divide="ignore"):
            sc = np.clip(1.0 / np.sqrt(g1), 1e-3, 1e4)
        kap = 1.0 / (2.0 * np.maximum(1.0, 3.0 * sc))
        tau = sc[:, None] * np.sinh(u)[None, :]
        s = cands[:, None] - kap[:, None] * tau**2 + 1j * tau
        jac = np.abs(1j - 2 * kap[:, None] * tau) * sc[:, None] * np.cosh(u)[None, :] * du
        lg = self._phi(s, y).real + np.log(jac)
        lk = lg[None, :, :] - np.log(np.abs(s[None, :, :] + ks[:, None, None]))
        top = lk.max(axis=2)
        return top + np.log(np.exp(lk - top[:, :, None]).sum(axis=2))

    def choose_vertices(self, y: float) -> np.ndarray:
        cands = self._candidates(y)
        l1 = self._log_l1(cands, y, self.k)
        best = np.argmin(l1, axis=1)
        out = cands[best]
        # the saddle can be much narrower than the candidate spacing; refine
        # each distinct choice inside the bracket of its neighbouring candidates
        for i in np.unique(best):
            lo = cands[max(i - 1, 0)]
            hi = cands[min(i + 1, cands.size - 1)]
            ks = np.flatnonzero(best == i)
            if hi <= lo:
                continue
            f = lambda c: float(np.max(self._log_l1(np.array([c]), y, self.k[ks])[:, 0]))
            with np.errstate(all="ignore"):
                res = minimize_scalar(f, bounds=(lo, hi), method="bounded",
                                      options={"xatol": 1e-6 * max(1.0, abs(lo), abs(hi))})
            c = float(res.x)
            if np.isfinite(res.fun) and res.fun < f(cands[i]):
                if abs(c - round(c)) < 1e-6:
                    c += 1e-3
                out[ks] = c
        return out

    def fixed_vertices(self, q: QuadratureSettings) -> np.ndarray:
        return np.full(self.n, q.parabola_vertex + 1.0 - self.n)

    def _truncation(self, c, kap, sc, y, cutoff_log):
        ref = self._phi(np.array([c + 0j]), y).real[0]
        T = 4.0 * sc
        for _ in range(200):
            tau = np.linspace(0.0, T, 65)[1:]
            s = c - kap * tau**2 + 1j * tau
            vals = self._phi(s, y).real + np.log(np.abs(1j - 2 * kap * tau))
            ref = max(ref, vals.max())
            if vals[-1] < ref - cutoff_log:
                return T
            T *= 1.5
        raise ConvergenceError("s-integrand does not decay along the parabola")

    def evaluate(self, x: float, y: float, q: QuadratureSettings, boost: int = 1):
        if q.vertex_mode == "adaptive":
            cs = self.choose_vertices(y)
        else:
            cs = self.fixed_vertices(q)
        cutoff_log = -math.log(q.tail_cutoff)
        groups = []
        for c in np.unique(cs):
            ks = np.nonzero(cs == c)[0]
            if q.vertex_mode == "adaptive":
                sc = self._scale(c)
                kap = self._kappa(sc)
            else:
                sc = self._scale(c)
                kap = 1.0 / q.parabola_slope**2
            T = self._truncation(c, kap, sc, y, cutoff_log)
            groups.append((c, kap, T, ks))
        # log of r_k e^{-kx}; combined with S_k before exponentiating
        lw = self.log_weight - self.k * x
        N = q.base_nodes * boost
        sums = [None] * len(groups)
        K_prev = None
        total_nodes = 0
        for level in range(q.max_doublings + 1):
            terms = np.zeros(self.n, dtype=complex)
            for gi, (c, kap, T, ks) in enumerate(groups):
                h = 2.0 * T / N
                if level == 0:
                    tau = -T + h * np.arange(N + 1)
                    wts = np.full(N + 1, h)
                    wts[[0, -1]] *= 0.5
                else:
                    tau = -T + h * (2 * np.arange(N // 2) + 1)
                    wts = np.full(N // 2, h)
                total_nodes += tau.size
                s = c - kap * tau**2 + 1j * tau
                ds = (1j - 2 * kap * tau) * wts / (2j * np.pi)
                base = self._phi(s, y) + np.log(ds)
                # rows: k; shift by lw_k so every term is formed in log space
                logs = base[None, :] - np.log(s[None, :] + self.k[ks, None]) + lw[ks, None]
                part = np.exp(logs).sum(axis=1)
                if level == 0:
                    sums[gi] = part
                else:
                    sums[gi] = 0.5 * sums[gi] + part
                terms[ks] = sums[gi] * self.sign[ks]
            K = terms.sum()
            mag = np.abs(terms).sum()
            if K_prev is not None:
                diff = abs(K - K_prev)
                if diff <= q.rel_tol * abs(K) or diff <= 64 * _EPS * mag:
                    cond = mag / abs(K) if K != 0 else np.inf
                    return K.real, diff, total_nodes, cond
            K_prev = K
            N *= 2
        raise ConvergenceError("residue quadrature did not reach rel_tol")


# ---------------------------------------------------------------------------
# contour path


def _newton(ratio: _GammaRatio, W, w, iters=60, tol=1e-14):
    W = np.array(W, dtype=complex, copy=True)
    w = np.broadcast_to(np.asarray(w, dtype=complex), W.shape)
    for _ in range(iters):
        step = (ratio.G(W) - w) / ratio.G1(W)
        W = W - step
        if np.all(np.abs(step) <= tol * np.maximum(1.0, np.abs(W))):
            break
    return W


class _Arc:
    """Upper-half-plane piece of the level curve Im G = 0 on which G falls
    monotonically from ``a`` at the real point ``top`` (a local minimum of G
    on the real line) to ``b`` at ``bot`` (a local maximum).  Parametrised by

        G(W(phi)) = b + (a - b) (1 + cos phi) / 2,   0 <= phi <= pi,

    which is analytic at both square-root ends."""

    def __init__(self, loop, top, a, bot, b, trace_W, trace_w):
        self.loop = loop
        self.top, self.a, self.bot, self.b = top, a, bot, b
        self.trace_W = np.append(trace_W, bot + 0j)
        self.trace_phi = self.phi_of(np.append(trace_w, b))
        self.d_top = loop._d2(top)
        self.d_bot = loop._d2(bot)

    def phi_of(self, w):
        r = np.clip((self.a - np.asarray(w, dtype=float)) / (self.a - self.b), 0.0, 1.0)
        return 2.0 * np.arcsin(np.sqrt(r))

    def w_of(self, phi):
        return self.b + 0.5 * (self.a - self.b) * (1.0 + np.cos(phi))

    def _guess(self, phi, w):
        tp, tW = self.trace_phi, self.trace_W
        g = np.interp(phi, tp, tW.real) + 1j * np.interp(phi, tp, tW.imag)
        near_top = phi < tp[1]
        near_bot = phi > tp[-2]
        g = np.where(near_top, self.top + 1j * np.sqrt(np.maximum(2 * (self.a - w) / self.d_top, 0)), g)
        g = np.where(near_bot, self.bot + 1j * np.sqrt(np.maximum(2 * (w - self.b) / -self.d_bot, 0)), g)
        return g

    def solve(self, phi):
        w = self.w_of(phi)
        W = _newton(self.loop.ratio, self._guess(phi, w), w)
        return np.where(W.imag < 0, W.conj(), W)

    def _at(self, phi):
        # endpoints are the real saddles themselves (Newton would divide by G' = 0)
        W = np.where(phi <= 0, self.top + 0j, self.bot + 0j)
        inner = (phi > 0) & (phi < math.pi)
        if np.any(inner):
            W[inner] = self.solve(phi[inner])
        return W

    def _panels(self, lo, hi):
        half = 0.5 * (hi - lo)
        phi = half[:, None] * _GLX + 0.5 * (lo + hi)[:, None]
        W = self.solve(phi.ravel()).reshape(phi.shape)
        dw = -0.5 * (self.a - self.b) * np.sin(phi)
        dW = dw / self.loop.ratio.G1(W) * (half[:, None] * _GLW)
        return W, dW

    def nodes(self):
        """Gauss-Legendre panels in phi.

        Initial panel lengths follow the distance to the nearest singularity of
        G and the local saddle width 1/sqrt|G'|; a panel is then bisected until
        its rule reproduces int dW = W(end) - W(start), which also catches
        complex critical points of G lying close to the arc."""
        loop = self.loop
        W = self.trace_W
        with np.errstate(divide="ignore"):
            width = 1.0 / np.sqrt(np.abs(loop.ratio.G1(W)))
        limit = np.maximum(np.minimum(0.5 * loop._pole_distance(W), 1.5 * width), 1e-3)
        edges = [0.0]
        start = 0
        last = len(W) - 1
        for i in range(1, len(W)):
            if abs(W[i] - W[start]) > limit[start] or i == last:
                pieces = max(1, int(math.ceil(abs(W[i] - W[start]) / limit[start])))
                a, b = edges[-1], (float(self.trace_phi[i]) if i < last else math.pi)
                edges.extend(a + (b - a) * np.arange(1, pieces + 1) / pieces)
                start = i
        e = np.unique(np.array(edges))
        lo, hi = e[:-1], e[1:]
        done = []
        for _ in range(40):
            Wp, dWp = self._panels(lo, hi)
            chord = self._at(hi) - self._at(lo)
            scale = np.maximum(1.0, np.abs(Wp).max(axis=1))
            # panels touching a saddle keep their size: there the chord itself
            # carries the sqrt(eps) conditioning of G(W) = w at G' = 0
            ends = (lo <= 0.0) | (hi >= math.pi)
            ok = ends | (np.abs(dWp.sum(axis=1) - chord) <= 1e-12 * scale)
            done.extend(zip(lo[ok], hi[ok], Wp[ok], dWp[ok]))
            if ok.all():
                break
            mid = 0.5 * (lo[~ok] + hi[~ok])
            lo, hi = np.concatenate([lo[~ok], mid]), np.concatenate([mid, hi[~ok]])
        else:
            raise ConvergenceError("saddle loop panels did not resolve the arc")
        done.sort(key=lambda r: r[0])
        Wn = np.concatenate([r[2] for r in done])
        dW = np.concatenate([r[3] for r in done])
        plen = np.concatenate([np.full(_GLX.size, r[1] - r[0]) for r in done])
        wphi = np.concatenate([0.5 * (r[1] - r[0]) * _GLW for r in done])
        return Wn, dW, np.abs(dW / wphi) * plen


class _SaddleLoop:
    """Closed level curve Im G = 0 around the zeros 0..-(n-1) of A.

    Starting at the real minimiser z0 of G the curve descends (in G) through
    the upper half-plane.  It either lands on t_L, the maximiser of G just
    left of -(n-1), or on a real saddle s of G between two zeros; in the
    latter case the real segment from s to the neighbouring local minimum of
    G is traversed twice in opposite directions by the closed curve, so it is
    dropped and tracing resumes from that minimum.  The lower half is the
    mirror image."""

    def __init__(self, model: ProductModel, ratio: _GammaRatio):
        self.ratio = ratio
        n = model.n
        self.pole = -(n - 1.0)
        self.z0 = self._real_min()
        self.w0 = ratio.g(self.z0)
        self.left_pole = self._left_pole(n)
        self.far_left = self._far_left(n)
        self.tL = brentq(ratio.g1, self.left_pole + 1e-9, self.pole - 1e-9, xtol=1e-15, rtol=1e-15)
        self.wL = ratio.g(self.tL)
        if not self.wL < self.w0:
            raise DomainError("degenerate saddle loop")
        self.arcs = []
        top, a = self.z0, self.w0
        for _ in range(4 * n + 4):
            Ws, ws, hit = self._trace(top, a)
            if hit is None:
                self.arcs.append(_Arc(self, top, a, self.tL, self.wL, Ws, ws))
                break
            smax, smin = hit
            self.arcs.append(_Arc(self, top, a, smax, ratio.g(smax), Ws, ws))
            top, a = smin, ratio.g(smin)
        else:
            raise ConvergenceError("saddle loop did not close")
        self._discretise()

    def _real_min(self) -> float:
        g1 = self.ratio.g1
        lo, hi = 1e-8, 1.0
        while g1(hi) <= 0:
            hi *= 2.0
            if hi > 1e12:
                raise DomainError("G has no real minimum on (0, inf)")
        return brentq(g1, lo, hi, xtol=1e-15, rtol=1e-15)

    def _left_pole(self, n: int) -> float:
        i = n
        while self.ratio.order_at(i) == 0:
            i += 1
            if i > 10**7:
                raise DomainError("no pole of A to the left of the zero cluster")
        return -float(i)

    def _far_left(self, n: int) -> float:
        # beyond every Gamma shift the pole orders cancel, so A is pole-free there
        last = max([a for a, _ in self.ratio.al] + [b for b, _ in self.ratio.be])
        poles = [i for i in range(n, int(math.ceil(last)) + 1) if self.ratio.order_at(i) < 0]
        return -float(max(poles)) if poles else -float(n)

    def _d2(self, z: float) -> float:
        h = 1e-5 * max(1.0, abs(z))
        return (self.ratio.g1(z + h) - self.ratio.g1(z - h)) / (2 * h)

    def _pole_distance(self, W):
        # distance to the nearest singularity of G (integers in [left_pole, 0])
        r = np.clip(np.round(W.real), self.left_pole, 0.0)
        return np.abs(W - r)

    def _real_saddles(self, x: float):
        """(local max, local min) of G on the unit interval between zeros holding x."""
        k = math.floor(x)
        if k < self.pole or k >= 0:
            return None
        z = k + np.linspace(1e-4, 1 - 1e-4, 4001)
        d = self.ratio.G1(z + 0j).real
        roots = [brentq(self.ratio.g1, z[i], z[i + 1], xtol=1e-15, rtol=1e-15)
                 for i in np.flatnonzero(np.sign(d[:-1]) != np.sign(d[1:]))]
        if len(roots) != 2:
            return None
        return max(roots), min(roots)

    def _trace(self, top, a):
        """March up from the real point ``top`` with sigma = sqrt(a - w).

        Returns the trace and either None (landed on t_L) or the pair of real
        saddles where the curve met the axis between two zeros."""
        ratio = self.ratio
        c0 = 1j * math.sqrt(2.0 / self._d2(top))
        W = top + 0j
        sg = 0.0
        ws = [a]
        Ws = [W]
        span = self.z0 - self.tL
        for _ in range(200000):
            d = c0 if sg == 0 else -2 * sg / ratio.G1(np.array([W]))[0]
            pd = float(self._pole_distance(np.array([W]))[0])
            hstep = min(0.08 * min(W.imag if sg > 0 else np.inf, pd), 0.05 * span)
            sg_new = sg + hstep / abs(d)
            target = a - sg_new**2
            if target <= self.wL:
                return np.array(Ws), np.array(ws), None
            Wn = _newton(ratio, [W + d * (sg_new - sg)], target)[0]
            if not np.isfinite(Wn) or Wn.imag < 1e-3 * max(pd, 1e-3) or abs(Wn - W) > 4 * hstep:
                break
            sg, W = sg_new, Wn
            ws.append(target)
            Ws.append(W)
        else:
            raise ConvergenceError("saddle loop trace did not terminate")
        if W.real < self.pole:
            return np.array(Ws), np.array(ws), None
        pair = self._real_saddles(W.real)
        if pair is None or abs(pair[0] - W.real) > 0.05 + 10 * W.imag:
            raise ConvergenceError("level curve met the real axis away from a saddle")
        # drop trace points that already run along the real segment
        keep = np.array(ws) > ratio.g(pair[0])
        return np.array(Ws)[keep], np.array(ws)[keep], pair

    def _discretise(self):
        parts = [arc.nodes() for arc in self.arcs]
        upper = np.concatenate([p[0] for p in parts])
        dW = np.concatenate([p[1] for p in parts])
        arc = np.concatenate([p[2] for p in parts])
        # counter-clockwise: upper arcs right to left, then the mirror image left to right
        self.t = np.concatenate([upper, upper.conj()[::-1]])
        self.dt = np.concatenate([dW, -dW.conj()[::-1]])
        self.log_inv_A = -self.ratio.log(self.t)
        gap = np.abs(np.diff(self.t, append=self.t[:1]))
        self.gap = np.maximum(gap, np.roll(gap, 1))
        self.spacing = float(self.gap.max())
        self.panel = np.concatenate([arc, arc[::-1]])

    def local_gap(self, z: complex) -> float:
        return float(self.gap[np.argmin(np.abs(self.t - z))])

    def point(self, w: float):
        """Crossing point for level w, w_L < w <= w0: on the arc covering w,
        or on the dropped real segment between two arcs."""
        for arc in self.arcs:
            if arc.b < w <= arc.a:
                return complex(arc.solve(arc.phi_of(np.array([w])))[0]), True
        for left, right in zip(self.arcs[1:], self.arcs[:-1]):
            if left.a < w <= right.b:
                x = brentq(lambda z: self.ratio.g(z) - w, left.top, right.bot, xtol=1e-14, rtol=1e-15)
                return complex(x), False
        raise DomainError("level outside the loop range")


def _real_root_right(ratio: _GammaRatio, z_start: float, level: float) -> float:
    """Root of G(z) = level on (z_start, inf); G increases to 0 there."""
    f = lambda z: ratio.g(z) - level
    hi = max(2.0 * z_start, 1.0)
    while f(hi) < 0:
        hi *= 2.0
        if hi > 1e15:
            raise DomainError("no real saddle to the right of the loop")
    return brentq(f, z_start, hi, xtol=1e-14, rtol=1e-15)


class _ContourKernel:
    def __init__(self, loop: _SaddleLoop):
        self.loop = loop
        self.ratio = loop.ratio

    def _kappa_crossing(self, W):
        t = self.loop.t
        num = np.abs(t.real - W.real)
        den = np.abs(t.imag**2 - W.imag**2)
        sep = 0.2 * abs(W.imag) + 2 * self.loop.local_gap(W)
        far = (np.abs(t - W) > sep) & (np.abs(t - W.conjugate()) > sep)
        bad = ((t.real < W.real) & (np.abs(t.imag) > W.imag)) | ((t.real > W.real) & (np.abs(t.imag) < W.imag))
        sel = far & bad & (den > 0)
        return 0.5 * float(np.min(num[sel] / den[sel])) if np.any(sel) else 1.0

    def _kappa_outside(self, c):
        # the parabola must pass right of every loop node lying left of its vertex
        t = self.loop.t
        ok = (np.abs(t.imag) > 1e-12) & (t.real < c)
        return 0.5 * float(np.min((c - t.real[ok]) / t.imag[ok] ** 2)) if np.any(ok) else 1.0

    def evaluate(self, x: float, y: float, q: QuadratureSettings, boost: int = 1):
        loop = self.loop
        ratio = self.ratio
        yb = 0.5 * (x + y)
        if yb <= loop.w0:
            # only the path depends on yb; keep W off the branch point z0
            W, crossing = loop.point(min(yb, loop.w0 - 1e-8 * (loop.w0 - loop.wL)))
            kap = self._kappa_crossing(W) if crossing else self._kappa_outside(W.real)
        else:
            W = complex(_real_root_right(ratio, loop.z0, yb))
            kap = self._kappa_outside(W.real)
            crossing = False
        sc = 1.0 / math.sqrt(abs(ratio.G1(np.array([W]))[0]))
        kap = min(kap, 1.0 / (2.0 * max(1.0, 3.0 * sc)))
        c, kap = self._place(W, kap, sc, yb, crossing)
        T = self._truncation(c, kap, W, sc, y, -math.log(q.tail_cutoff))
        self.history = []
        t = loop.t
        lb = loop.log_inv_A + x * t
        wt = loop.dt / (2j * np.pi)
        near_tol = 1.5 * loop.panel
        N = q.base_nodes * boost
        total = None
        prev = None
        nodes = 0
        mag = 0.0
        for level in range(q.max_doublings + 1):
            h = 2.0 * T / N
            if level == 0:
                tau = -T + h * np.arange(N + 1)
                wts = np.full(N + 1, h)
                wts[[0, -1]] *= 0.5
            else:
                tau = -T + h * (2 * np.arange(N // 2) + 1)
                wts = np.full(N // 2, h)
            nodes += tau.size * t.size
            part = 0j
            part_mag = 0.0
            for lo in range(0, tau.size, 256):
                tt = tau[lo:lo + 256]
                s = c - kap * tt**2 + 1j * tt
                ds = (1j - 2 * kap * tt) * wts[lo:lo + 256] / (2j * np.pi)
                la = ratio.log(s) - y * s
                D = s[:, None] - t[None, :]
                E = np.exp(la[:, None] + lb[None, :])
                F = np.exp((x - y) * s)
                ind = np.rint((-(wt[None, :] / D).sum(axis=1)).real)
                aD = np.abs(D)
                j = aD.argmin(axis=1)
                close = aD[np.arange(j.size), j] < near_tol[j]
                plain = (E / D * wt).sum(axis=1) + ind * F
                sub = ((E - F[:, None]) / D * wt).sum(axis=1)
                hval = np.where(close | (ind != 0), sub, plain)
                part += np.sum(ds * hval)
                size = (np.abs(E * wt / D)).sum(axis=1) + np.abs(ind * F)
                part_mag += float(np.sum(np.abs(ds) * size))
            total = part if level == 0 else 0.5 * total + part
            mag = part_mag if level == 0 else 0.5 * mag + part_mag
            self.history.append((N, total, T, c, kap))
            # far off the diagonal the terms can exceed the value by many
            # orders; their absolute sum then sets the attainable accuracy
            floor = 64 * _EPS * mag
            if prev is not None:
                diff = abs(total - prev)
                if diff <= q.rel_tol * abs(total) or diff <= floor:
                    return total.real, max(diff, floor), nodes, mag / max(abs(total), 1e-300)
            prev = total
            N *= 2
        raise ConvergenceError("contour quadrature did not reach rel_tol")

    def _profile(self, c, kap, yb, span):
        """tau >= 0 and Re(log A(s) - yb s) along the parabola, scanned until
        it has passed left of every pole of A and the integrand is falling.
        Heavy models carry a large hill above the pole cluster that a short
        scan around the vertex would miss."""
        ratio = self.ratio
        far_left = self.loop.far_left
        top = span
        for _ in range(40):
            tau = np.linspace(0.0, top, 2001)
            s = c - kap * tau**2 + 1j * tau
            v = (ratio.log(s) - yb * s).real
            if s[-1].real < far_left - 5.0 and v[-1] < v.max() - 60.0 and v[-1] < v[-2]:
                return tau, v
            top *= 1.5
        raise ConvergenceError("s-integrand does not decay along the parabola")

    def _place(self, W, kap, sc, yb, crossing):
        """Largest curvature (below the geometric bound) for which |A e^{-yb s}|
        on the parabola never exceeds its value at W by more than e and the
        parabola meets the loop only where intended."""
        ratio = self.ratio
        ref = (ratio.log(np.array([W])) - yb * W).real[0]
        span = 4.0 * max(abs(W.imag), sc, 1.0)
        best = None
        for _ in range(60):
            c = W.real + kap * W.imag**2
            _, v = self._profile(c, kap, yb, span)
            excess = float(v.max() - ref)
            if excess <= 1.0 and self._single_crossing(c, kap, W, crossing):
                return c, kap
            if best is None or excess < best[0]:
                best = (excess, c, kap)
            kap *= 0.5
        raise ConvergenceError(f"could not place the s-parabola (excess {best[0]:.3g})")

    def _single_crossing(self, c, kap, W, crossing):
        # the parabola must meet the loop exactly where intended; points too
        # close to the loop for the discrete winding number are skipped
        loop = self.loop
        top = 1.5 * float(np.abs(loop.t.imag).max()) + 1.0
        tau = np.linspace(-top, top, 601)
        s = c - kap * tau**2 + 1j * tau
        D = s[:, None] - loop.t[None, :]
        ind = np.rint((-(loop.dt[None, :] / (2j * np.pi) / D).sum(axis=1)).real)
        aD = np.abs(D)
        j = aD.argmin(axis=1)
        ok = aD[np.arange(j.size), j] > 1.5 * loop.panel[j]
        if crossing:
            inside = np.abs(tau) < abs(W.imag)
            return bool(np.all(ind[ok] == inside[ok]))
        return bool(np.all(ind[ok] == 0))

    def _truncation(self, c, kap, W, sc, y, cutoff_log):
        # last tau where the integrand is within the cutoff of its value at W
        ref = (self.ratio.log(np.array([W])) - y * W).real[0]
        tau, v = self._profile(c, kap, y, 4.0 * max(abs(W.imag), sc, 1.0))
        alive = np.flatnonzero(v > ref - cutoff_log)
        return 1.05 * float(tau[alive[-1] + 1]) if alive.size and alive[-1] + 1 < tau.size else float(tau[-1])


# ---------------------------------------------------------------------------
# per-model evaluator


class _Evaluator:
    def __init__(self, model: ProductModel):
        self.model = model
        self.ratio = _GammaRatio(model)
        self.residue = _ResidueSum(model, self.ratio)
        self._contour = None
        self._contour_error = None

    @property
    def contour(self) -> Optional[_ContourKernel]:
        if self._contour is None and self._contour_error is None:
            try:
                self._contour = _ContourKernel(_SaddleLoop(self.model, self.ratio))
            except (DomainError, ConvergenceError, ValueError, FloatingPointError) as exc:
                self._contour_error = exc
        return self._contour

    def kernel(self, u: float, w: float, q: QuadratureSettings, boost: int = 1) -> KernelValue:
        method = q.method
        if method == "contour":
            return self._via_contour(u, w, q, boost, strict=True)
        if method == "residue":
            return self._via_residue(u, w, q, boost)
        # auto: small n, or the hard-edge tail beyond the loop, go to residues
        if self.model.n > _RESIDUE_MAX_N:
            alt = self._via_contour(u, w, q, boost, strict=False)
            if alt is not None:
                return alt
        return self._via_residue(u, w, q, boost)

    def _via_residue(self, u, w, q, boost):
        val, err, nodes, cond = self.residue.evaluate(u, w, q, boost)
        # roundoff floor of the alternating sum
        err = max(err, cond * _EPS * abs(val))
        return KernelValue(val, err, nodes, "residue", cond)

    def _via_contour(self, u, w, q, boost, strict):
        ck = self.contour
        loop = ck.loop if ck is not None else None
        if ck is None or 0.5 * (u + w) <= loop.wL:
            if strict:
                raise ConvergenceError(f"contour path unavailable here ({self._contour_error or 'hard-edge tail'})")
            return None
        try:
            val, err, nodes, cond = ck.evaluate(u, w, q, boost)
        except ConvergenceError:
            if strict:
                raise
            return None
        return KernelValue(val, err, nodes, "contour", cond)


@lru_cache(maxsize=32)
def _evaluator(model: ProductModel) -> _Evaluator:
    return _Evaluator(model)


def _prepare(model: AnyModel) -> ProductModel:
    p = as_product(model)
    if not check_determinantal(p):
        raise DomainError("determinantal condition n <= sum(m_j - n - v_j) fails")
    return p


# ---------------------------------------------------------------------------
# public API


def kernel_log(model: AnyModel, u: float, w: float, q: QuadratureSettings = DEFAULT_SETTINGS) -> KernelValue:
    """K_n(u, w) for the log-transformed squared singular values."""
    p = _prepare(model)
    u = float(u)
    w = float(w)
    if not (math.isfinite(u) and math.isfinite(w)) or u > 0 or w >= 0:
        raise DomainError("kernel_log requires u <= 0 and w < 0")
    boost = 4 if w > math.log(0.98) else 1
    return _evaluator(p).kernel(u, w, q, boost)


def kernel_x(model: AnyModel, x: float, y: float, q: QuadratureSettings = DEFAULT_SETTINGS) -> KernelValue:
    """K~_n(x, y) for the squared singular values themselves.

    Related to the log-variable kernel by
        K_n(u, w) = e^{(u-w)(1-n)} e^{w} K~_n(e^u, e^w).
    """
    x = float(x)
    y = float(y)
    if not 0 < x <= 1:
        raise DomainError("kernel_x requires 0 < x <= 1")
    if not 0 < y < 1:
        raise DomainError("kernel_x requires 0 < y < 1")
    p = as_product(model)
    u, w = math.log(x), math.log(y)
    kv = kernel_log(p, u, w, q)
    factor = math.exp(-(u - w) * (1 - p.n) - w)
    return replace(kv, value=kv.value * factor, est_error=kv.est_error * factor)


def scaled_kernel(model: AnyModel, spec: RegimeSpec, xi: float, eta: float,
                  q: QuadratureSettings = DEFAULT_SETTINGS) -> KernelValue:
    """A * exp(c (xi - eta)) * K(g(xi), g(eta)) for the regime in ``spec``.

    A scaled point beyond the spectrum's support (x >= 1) gives exactly 0:
    no point ever lies there.
    """
    amp = amplitude(model, spec)
    rate = conjugation_rate(model, spec)
    gx = scaling_location(model, spec, xi)
    gy = scaling_location(model, spec, eta)
    edge = 1.0 if spec.kind == "gue_edge_x" else 0.0
    if gx > edge or gy >= edge:
        return KernelValue(0.0, 0.0, 0, "support")
    if spec.kind == "gue_edge_x":
        if not (gx > 0 and gy > 0):
            raise DomainError("scaled point falls below 0")
        kv = kernel_x(model, gx, gy, q)
    else:
        kv = kernel_log(model, gx, gy, q)
    factor = amp * math.exp(rate * (xi - eta))
    return replace(kv, value=kv.value * factor, est_error=kv.est_error * abs(factor))


@dataclass(frozen=True)
class KernelMatrix:
    grid: tuple
    entries: tuple  # tuple of row tuples of KernelValue

    @property
    def values(self) -> np.ndarray:
        return np.array([[e.value for e in row] for row in self.entries])

    @property
    def errors(self) -> np.ndarray:
        return np.array([[e.est_error for e in row] for row in self.entries])

    @property
    def methods(self) -> list:
        return [[e.method for e in row] for row in self.entries]


def kernel_grid(model: AnyModel, spec: RegimeSpec, grid: Sequence[float],
                q: QuadratureSettings = DEFAULT_SETTINGS, threads: Optional[int] = None) -> KernelMatrix:
    g = [float(v) for v in grid]
    if len(g) == 0 or any(b <= a for a, b in zip(g[:-1], g[1:])):
        raise ConfigError("grid must be non-empty and strictly increasing")
    pairs = [(a, b) for a in g for b in g]
    # build the per-model state once before fanning out
    p = _prepare(model)
    ev = _evaluator(p)
    if q.method != "residue":
        _ = ev.contour
    run = lambda ab: scaled_kernel(model, spec, ab[0], ab[1], q)
    if threads is not None and threads > 1 and len(pairs) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            flat = list(pool.map(run, pairs))
    else:
        flat = [run(ab) for ab in pairs]
    k = len(g)
    rows = tuple(tuple(flat[i * k:(i + 1) * k]) for i in range(k))
    return KernelMatrix(grid=tuple(g), entries=rows)


__all__ = [
    "QuadratureSettings", "KernelValue", "KernelMatrix", "DEFAULT_SETTINGS",
    "kernel_x", "kernel_log", "scaled_kernel", "kernel_grid",
]
