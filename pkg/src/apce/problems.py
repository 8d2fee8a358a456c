"""Benchmark targets: sparse monomial sums, the KL-expanded random field and
the 1D elliptic model ``-(D u')' = 1`` with ``D = exp(a)``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy.optimize import brentq

from .measure import AffineMap, GaussianMixtureSpec, SampleSet, pca_whiten, sample_gaussian_mixture
from .multi_index import graded_lex_set

COEFF_MODES = ("ones", "lognormal", "decay")


# ---------------------------------------------------------------------------
# monomial targets
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class MonomialTarget:
    """``f(x) = sum_a coeff_a x^a`` over the multi-indices in ``support``."""

    support: np.ndarray  # (s, d) exponents
    coeffs: np.ndarray
    d: int
    p: int
    positions: np.ndarray = field(default=None, compare=False)

    def __post_init__(self):
        sup = np.atleast_2d(np.asarray(self.support, dtype=np.int64))
        if sup.shape[1] != self.d:
            raise ValueError("support rows must have length d")
        if np.any(sup < 0) or np.any(sup.sum(axis=1) > self.p):
            raise ValueError(f"support leaves the degree-{self.p} envelope")
        object.__setattr__(self, "support", sup)
        object.__setattr__(self, "coeffs", np.asarray(self.coeffs, dtype=float))

    def __call__(self, points) -> np.ndarray:
        x = np.atleast_2d(np.asarray(points, dtype=float))
        out = np.zeros(x.shape[0])
        for a, c in zip(self.support, self.coeffs):
            nz = np.nonzero(a)[0]
            out += c * np.prod(x[:, nz] ** a[nz], axis=1)
        return out

    def coefficient_vector(self) -> np.ndarray:
        """Coefficients on the full graded-lex monomial list."""
        idx = graded_lex_set(self.d, self.p)
        c = np.zeros(idx.size)
        for a, v in zip(self.support, self.coeffs):
            c[idx.position(a)] += v
        return c


def sparse_monomial_target(d: int, p: int, s: int | None, coeff_mode: str = "ones",
                           seed: int = 0) -> MonomialTarget:
    """Random monomial sum.

    ``ones`` and ``lognormal`` (``log c ~ N(0, 2)``) draw ``s`` distinct
    indices uniformly.  ``decay`` uses every index ``i = 1..N`` with
    coefficient ``eta_i / i**1.5``, ``eta_i ~ U[0, 1]``.
    """
    if coeff_mode not in COEFF_MODES:
        raise ValueError(f"coeff_mode must be one of {COEFF_MODES}")
    idx = graded_lex_set(d, p)
    rng = np.random.default_rng(seed)
    if coeff_mode == "decay":
        if s is not None and s != idx.size:
            raise ValueError("decay mode uses the full index set")
        pos = np.arange(idx.size)
        coeffs = rng.uniform(0.0, 1.0, idx.size) / (pos + 1.0) ** 1.5
    else:
        if s is None or s < 1 or s > idx.size:
            raise ValueError(f"support size must lie in [1, {idx.size}], got {s}")
        pos = np.sort(rng.choice(idx.size, size=s, replace=False))
        if coeff_mode == "ones":
            coeffs = np.ones(s)
        else:
            coeffs = np.exp(rng.normal(0.0, math.sqrt(2.0), s))
    return MonomialTarget(idx.indices[pos], coeffs, d, p, pos)


# ---------------------------------------------------------------------------
# KL expansion of the exponential kernel on [0, 1]
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class KLExpansion:
    """Truncated KL expansion of ``a(x) = a0 + sigma sum sqrt(lam_i) phi_i(x) xi_i``.

    Eigenfunctions are ``cos(w (x - 1/2)) / n`` (even) or ``sin(w (x - 1/2)) / n``
    (odd) with the frequency ``w`` and normaliser ``n`` stored per mode.
    """

    l_c: float
    sigma: float
    d: int
    a0: float
    eigenvalues: np.ndarray
    omegas: np.ndarray
    even: np.ndarray
    norms: np.ndarray

    def eigenfunctions(self, x) -> np.ndarray:
        """Values ``phi_i(x)``, shape (len(x), d)."""
        t = np.asarray(x, dtype=float).reshape(-1, 1) - 0.5
        wt = t * self.omegas
        return np.where(self.even, np.cos(wt), np.sin(wt)) / self.norms

    def field(self, x, xi) -> np.ndarray:
        """Log-coefficient ``a(x; xi)``; ``xi`` may be (d,) or (n, d)."""
        xi = np.asarray(xi, dtype=float)
        amp = self.sigma * np.sqrt(self.eigenvalues)
        phi = self.eigenfunctions(x)
        return self.a0 + (xi * amp) @ phi.T

    @property
    def energy(self) -> float:
        # the kernel has unit trace on [0, 1]
        return float(self.eigenvalues.sum())


def _kl_roots(l_c: float, count: int):
    """First ``count`` frequencies, alternating even and odd branches."""
    even_fn = lambda th: l_c * 2 * th * math.sin(th) - math.cos(th)  # noqa: E731
    odd_fn = lambda th: math.sin(th) + l_c * 2 * th * math.cos(th)  # noqa: E731
    out = []
    k = 0
    while len(out) < count:
        lo, hi = k * math.pi, k * math.pi + math.pi / 2
        try:
            th = brentq(even_fn, lo, hi, xtol=1e-15, rtol=4 * np.finfo(float).eps)
        except ValueError as exc:
            raise RuntimeError(f"even-branch bracket [{lo}, {hi}] failed") from exc
        out.append((2 * th, True))
        if len(out) == count:
            break
        lo, hi = k * math.pi + math.pi / 2, (k + 1) * math.pi
        try:
            th = brentq(odd_fn, lo, hi, xtol=1e-15, rtol=4 * np.finfo(float).eps)
        except ValueError as exc:
            raise RuntimeError(f"odd-branch bracket [{lo}, {hi}] failed") from exc
        out.append((2 * th, False))
        k += 1
    return out


def kl_exponential(l_c: float, sigma: float, d: int, a0: float = 1.0) -> KLExpansion:
    """Eigenpairs of ``exp(-|x - y| / l_c)`` on [0, 1], largest first."""
    if not l_c > 0:
        raise ValueError("correlation length must be positive")
    if d < 1:
        raise ValueError("need at least one mode")
    roots = _kl_roots(l_c, d)
    w = np.array([r[0] for r in roots])
    even = np.array([r[1] for r in roots])
    lam = 2.0 * l_c / (l_c**2 * w**2 + 1.0)
    half = 0.5
    s = np.sin(2 * w * half) / (2 * w)
    norms = np.sqrt(np.where(even, half + s, half - s))
    order = np.argsort(-lam, kind="stable")
    return KLExpansion(l_c, sigma, d, a0, lam[order], w[order], even[order], norms[order])


def nystrom_eigenvalues(l_c: float, count: int, n: int = 2000) -> np.ndarray:
    """Midpoint-rule Nystrom approximation of the leading kernel eigenvalues."""
    x = (np.arange(n) + 0.5) / n
    K = np.exp(-np.abs(x[:, None] - x[None, :]) / l_c) / n
    ev = np.linalg.eigvalsh(K)[::-1]
    return ev[:count]


# ---------------------------------------------------------------------------
# 1D elliptic solve
# ---------------------------------------------------------------------------

_PANEL = 16


def _panels(a: float, b: float, n: int):
    """Composite Gauss-Legendre nodes and weights with about ``n`` points."""
    k = max(1, int(round(n / _PANEL)))
    x0, w0 = np.polynomial.legendre.leggauss(_PANEL)
    edges = np.linspace(a, b, k + 1)
    mid = 0.5 * (edges[:-1] + edges[1:])
    half = 0.5 * np.diff(edges)
    x = (mid[:, None] + half[:, None] * x0).ravel()
    w = (half[:, None] * w0).ravel()
    return x, w


def _solve_once(kl: KLExpansion, xi: np.ndarray, x_star: float, quad_n: int) -> tuple[float, float]:
    n_left = max(_PANEL, int(round(quad_n * x_star)))
    n_right = max(_PANEL, quad_n - n_left)
    xl, wl = _panels(0.0, x_star, n_left) if x_star > 0 else (np.zeros(0), np.zeros(0))
    xr, wr = _panels(x_star, 1.0, n_right) if x_star < 1 else (np.zeros(0), np.zeros(0))
    x = np.concatenate([xl, xr])
    w = np.concatenate([wl, wr])
    a = kl.field(x, xi)
    if not np.all(np.isfinite(a)) or np.any(a > 700):
        bad = x[int(np.argmax(np.where(np.isfinite(a), a, np.inf)))]
        raise FloatingPointError(f"exp(a) overflows near x = {bad:.6g}")
    inv = np.exp(-a)
    flux = float(w @ (x * inv)) / float(w @ inv)
    nl = xl.size
    u = float(wl @ ((flux - xl) * inv[:nl]))
    return u, flux


def elliptic_solve(kl: KLExpansion, xi, x_star: float = 0.35, quad_n: int = 256,
                   check: bool = False) -> float:
    """``u(x_star)`` for ``-(D u')' = 1``, ``u(0) = u(1) = 0``, ``D = exp(a(x; xi))``.

    ``D u' = C - x`` with ``C = int x/D / int 1/D`` fixed by ``u(1) = 0``, so
    ``u(x*) = int_0^x* (C - y)/D(y) dy``.  Both integrals use composite
    Gauss panels split at ``x_star``.  With ``check=True`` the result is
    recomputed at doubled resolution and a mismatch above 1e-8 raises.
    """
    if not 0.0 <= x_star <= 1.0:
        raise ValueError("x_star must lie in [0, 1]")
    if quad_n < 64:
        raise ValueError("quad_n must be >= 64")
    xi = np.asarray(xi, dtype=float).reshape(-1)
    if xi.size != kl.d:
        raise ValueError(f"xi has {xi.size} entries, expansion has {kl.d} modes")
    u, _ = _solve_once(kl, xi, x_star, quad_n)
    if check:
        u2, _ = _solve_once(kl, xi, x_star, 2 * quad_n)
        if abs(u2 - u) > 1e-8 * max(abs(u2), 1e-300):
            raise ArithmeticError(f"quadrature not converged: {u} vs {u2}")
    return u


def boundary_flux(kl: KLExpansion, xi, quad_n: int = 256) -> float:
    """``D(0) u'(0)``, the constant ``C`` above."""
    return _solve_once(kl, np.asarray(xi, dtype=float).reshape(-1), 0.5, quad_n)[1]


def elliptic_target(kl: KLExpansion, x_star: float = 0.35, quad_n: int = 256) -> Callable:
    def f(points):
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        return np.array([elliptic_solve(kl, p, x_star, quad_n) for p in pts])
    return f


# ---------------------------------------------------------------------------
# dependent inputs
# ---------------------------------------------------------------------------

def dependent_input_sampler(spec: GaussianMixtureSpec, n: int, seed: int) -> tuple[SampleSet, AffineMap]:
    """Gaussian-mixture draws whitened to zero mean and identity covariance."""
    raw = sample_gaussian_mixture(spec, n, seed)
    white, transform, _ = pca_whiten(raw)
    return white, transform


# ---------------------------------------------------------------------------
# registry
# ---------------------------------------------------------------------------

def _monomial_factory(d, p, s=None, coeff_mode="ones", seed=0, **_):
    return sparse_monomial_target(int(d), int(p), None if s is None else int(s), coeff_mode, int(seed))


def _elliptic_factory(d, l_c=0.12, sigma=1.0, a0=1.0, x_star=0.35, quad_n=256, **_):
    kl = kl_exponential(float(l_c), float(sigma), int(d), float(a0))
    return elliptic_target(kl, float(x_star), int(quad_n))


def _linear_factory(d, weights=None, **_):
    w = np.ones(int(d)) if weights is None else np.asarray(weights, dtype=float)
    return lambda pts: np.atleast_2d(pts) @ w


TARGETS: dict[str, tuple[Callable, str]] = {
    "monomial": (_monomial_factory, "random monomial sum (s, coeff_mode in ones|lognormal|decay, seed)"),
    "elliptic": (_elliptic_factory, "u(x_star) of the 1D elliptic model (l_c, sigma, a0, x_star, quad_n)"),
    "linear": (_linear_factory, "w . x, all-ones weights by default"),
}


def make_target(name: str, d: int, p: int, **params) -> Callable:
    try:
        factory = TARGETS[name][0]
    except KeyError:
        raise KeyError(f"unknown target {name!r}; known: {sorted(TARGETS)}") from None
    return factory(d=d, p=p, **params)
