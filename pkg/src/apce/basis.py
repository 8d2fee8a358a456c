"""Orthonormal and near-orthonormal polynomial bases in monomial form.

A basis is stored as an ``N x N`` coefficient matrix ``coeffs`` whose row
``k`` expresses ``psi_k`` in the monomials of the same multi-index set:

    psi_k(x) = sum_{j <= k} coeffs[k, j] * x**alpha_j

Rows have no entries beyond the diagonal, so every basis function only uses
monomials that do not come after its own multi-index.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from functools import cached_property
from typing import Sequence

import numpy as np
from scipy.linalg import cho_factor, cho_solve, solve_triangular
from scipy.optimize import lsq_linear, minimize

from .measure import FAMILIES, QuadratureRule, SampleSet, recurrence
from .multi_index import MultiIndexSet, graded_lex_set

PROVENANCES = ("exact_discrete", "exact_quadrature", "near_orthonormal", "classical")
MAX_GRAM_CONDITION = 1e14
_CHUNK = 8192


class BasisError(ValueError):
    pass


# ---------------------------------------------------------------------------
# monomials
# ---------------------------------------------------------------------------

def monomial_matrix(idx: MultiIndexSet, points) -> np.ndarray:
    """Monomials of every multi-index at every point, shape (n, N)."""
    x = np.asarray(points, dtype=float)
    if x.ndim == 1:
        x = x[None, :]
    if x.shape[1] != idx.d:
        raise BasisError(f"points have dimension {x.shape[1]}, basis expects {idx.d}")
    par, dim = idx.parent
    out = np.empty((x.shape[0], idx.size))
    out[:, 0] = 1.0
    with np.errstate(over="ignore", invalid="ignore"):
        for k in range(1, idx.size):
            out[:, k] = out[:, par[k]] * x[:, dim[k]]
    if not np.all(np.isfinite(out)):
        raise BasisError("monomial evaluation overflowed")
    return out


def evaluate_monomials(idx: MultiIndexSet, point) -> np.ndarray:
    m = monomial_matrix(idx, point)
    return m[0] if np.ndim(point) == 1 else m


def monomial_gram(idx: MultiIndexSet, m: SampleSet | QuadratureRule) -> np.ndarray:
    """``sum_k w_k m(x_k) m(x_k)^T`` accumulated in chunks."""
    gram = np.zeros((idx.size, idx.size))
    for s in range(0, m.points.shape[0], _CHUNK):
        v = monomial_matrix(idx, m.points[s:s + _CHUNK])
        gram += v.T @ (v * m.weights[s:s + _CHUNK, None])
    return 0.5 * (gram + gram.T)


def derivative_operators(idx: MultiIndexSet) -> list[np.ndarray]:
    """``D[j]`` with ``d/dx_j m(x) = D[j] @ m(x)`` for the monomial vector ``m``."""
    ops = []
    for j in range(idx.d):
        dj = np.zeros((idx.size, idx.size))
        rows, targets = idx.lowered(j)
        dj[rows, targets] = idx.indices[rows, j]
        ops.append(dj)
    return ops


# ---------------------------------------------------------------------------
# basis container
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class PolynomialBasis:
    index_set: MultiIndexSet
    coeffs: np.ndarray
    provenance: str
    families: tuple = ()
    meta: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        c = np.array(self.coeffs, dtype=float)
        n = self.index_set.size
        if c.shape != (n, n):
            raise BasisError(f"coefficient matrix must be {n}x{n}")
        if np.any(np.triu(c, 1) != 0):
            raise BasisError("basis rows may not use monomials beyond their own index")
        if np.any(np.diag(c) == 0):
            raise BasisError("every basis function needs a nonzero leading coefficient")
        if self.provenance not in PROVENANCES:
            raise BasisError(f"unknown provenance {self.provenance!r}")
        c.setflags(write=False)
        object.__setattr__(self, "coeffs", c)

    @property
    def d(self) -> int:
        return self.index_set.d

    @property
    def p(self) -> int:
        return self.index_set.p

    @property
    def size(self) -> int:
        return self.index_set.size

    def evaluate(self, points) -> np.ndarray:
        """Basis vector at one point (shape (N,)) or at many points (shape (n, N))."""
        pts = np.asarray(points, dtype=float)
        if pts.ndim == 1:
            return (monomial_matrix(self.index_set, pts) @ self.coeffs.T)[0]
        out = np.empty((pts.shape[0], self.size))
        for s in range(0, pts.shape[0], _CHUNK):
            out[s:s + _CHUNK] = monomial_matrix(self.index_set, pts[s:s + _CHUNK]) @ self.coeffs.T
        return out

    __call__ = evaluate

    def gram(self, m: SampleSet | QuadratureRule) -> np.ndarray:
        g = self.coeffs @ monomial_gram(self.index_set, m) @ self.coeffs.T
        return 0.5 * (g + g.T)

    @cached_property
    def gradient(self) -> "BasisGradient":
        return basis_gradient(self)


def evaluate_basis(basis: PolynomialBasis, point) -> np.ndarray:
    return basis.evaluate(point)


@dataclass(frozen=True)
class BasisGradient:
    """Per-dimension coefficient matrices: ``d psi / d x_j = (coeffs[j] @ m(x))``."""

    index_set: MultiIndexSet
    coeffs: tuple

    def evaluate(self, points) -> np.ndarray:
        """Gradients of all basis functions, shape (n, N, d)."""
        v = monomial_matrix(self.index_set, points)
        return np.stack([v @ cj.T for cj in self.coeffs], axis=2)

    def directional(self, points, c: np.ndarray) -> np.ndarray:
        """Gradient of ``sum_k c_k psi_k`` at each point, shape (n, d)."""
        w = np.stack([cj.T @ c for cj in self.coeffs], axis=1)
        pts = np.asarray(points, dtype=float)
        out = np.empty((pts.shape[0], self.index_set.d))
        for s in range(0, pts.shape[0], _CHUNK):
            out[s:s + _CHUNK] = monomial_matrix(self.index_set, pts[s:s + _CHUNK]) @ w
        return out


def basis_gradient(basis: PolynomialBasis) -> BasisGradient:
    if basis.p < 1:
        raise BasisError("gradients need a basis of degree >= 1")
    ops = derivative_operators(basis.index_set)
    return BasisGradient(basis.index_set, tuple(basis.coeffs @ dj for dj in ops))


# ---------------------------------------------------------------------------
# exact orthonormalisation
# ---------------------------------------------------------------------------

def _check_condition(gram: np.ndarray) -> float:
    scale = 1.0 / np.sqrt(np.diag(gram))
    ev = np.linalg.eigvalsh(gram * np.outer(scale, scale))
    cond = ev[-1] / ev[0] if ev[0] > 0 else math.inf
    if not cond < MAX_GRAM_CONDITION:
        raise BasisError(
            f"monomial Gram matrix is numerically singular (condition ~ {cond:.3g}); "
            "use more samples or a lower degree")
    return cond


def _cholesky_inverse_factor(gram: np.ndarray) -> np.ndarray:
    try:
        low = np.linalg.cholesky(gram)
    except np.linalg.LinAlgError:
        raise BasisError("monomial Gram matrix is not positive definite") from None
    return solve_triangular(low, np.eye(gram.shape[0]), lower=True)


def orthonormalize(gram: np.ndarray) -> np.ndarray:
    """Lower-triangular ``F`` with positive diagonal and ``F gram F^T = I``.

    Cholesky whitening followed by one re-orthogonalisation pass.
    """
    f = _cholesky_inverse_factor(gram)
    resid = f @ gram @ f.T
    f = _cholesky_inverse_factor(0.5 * (resid + resid.T)) @ f
    return np.tril(f)


def gram_schmidt_discrete(samples: SampleSet, d: int, p: int) -> PolynomialBasis:
    """Orthonormal basis with respect to the empirical measure of ``samples``."""
    if samples.d != d:
        raise BasisError(f"samples have dimension {samples.d}, expected {d}")
    idx = graded_lex_set(d, p)
    if samples.n < idx.size:
        raise BasisError(f"need at least {idx.size} samples for degree {p} in {d} dimensions")
    gram = monomial_gram(idx, samples)
    cond = _check_condition(gram)
    return PolynomialBasis(idx, orthonormalize(gram), "exact_discrete",
                           meta={"gram_condition": float(cond)})


def gram_schmidt_quadrature(rule: QuadratureRule, rotation=None, d: int | None = None,
                            p: int = 1) -> PolynomialBasis:
    """Orthonormal basis for the law of ``x = rotation @ z`` with ``z`` integrated by ``rule``.

    ``rotation`` may be any invertible matrix; polynomial degree is preserved
    under linear maps, so the rule stays exact on the transformed products.
    """
    d = rule.d if d is None else d
    if rule.d != d:
        raise BasisError(f"rule has dimension {rule.d}, expected {d}")
    if rule.exactness_degree < 2 * p:
        raise BasisError(f"rule is exact to degree {rule.exactness_degree}; need {2 * p}")
    q = np.eye(d) if rotation is None else np.asarray(rotation, dtype=float)
    if q.shape != (d, d) or np.linalg.cond(q) > 1e12:
        raise BasisError("rotation must be an invertible d x d matrix")
    idx = graded_lex_set(d, p)
    pushed = rule.transformed(q)
    gram = monomial_gram(idx, pushed)
    cond = _check_condition(gram)
    return PolynomialBasis(idx, orthonormalize(gram), "exact_quadrature", rule.families,
                           meta={"gram_condition": float(cond)})


# ---------------------------------------------------------------------------
# classical tensor bases
# ---------------------------------------------------------------------------

def univariate_orthonormal(kind: str, n: int) -> np.ndarray:
    """Monomial coefficients of the first ``n+1`` orthonormal polynomials.

    Row ``k`` holds polynomial ``k``; column ``j`` the coefficient of ``x**j``.
    Built from the closed-form recurrence of the family.
    """
    a, b = recurrence(kind, n + 1)
    c = np.zeros((n + 1, n + 1))
    c[0, 0] = 1.0
    if n >= 1:
        c[1, 1] = 1.0 / math.sqrt(b[1])
        c[1, 0] = -a[0] / math.sqrt(b[1])
    for k in range(1, n):
        nxt = np.zeros(n + 1)
        nxt[1:] += c[k, :-1]
        nxt -= a[k] * c[k]
        nxt -= math.sqrt(b[k]) * c[k - 1]
        c[k + 1] = nxt / math.sqrt(b[k + 1])
    return c


def classical_basis(kind: str | Sequence[str], d: int, p: int) -> PolynomialBasis:
    """Tensor product of normalised univariate families (Hermite, Legendre, Chebyshev, Laguerre)."""
    kinds = (kind,) * d if isinstance(kind, str) else tuple(kind)
    if len(kinds) != d:
        raise BasisError("one family per dimension is required")
    for k in kinds:
        if k not in FAMILIES:
            raise BasisError(f"unknown family {k!r}")
    idx = graded_lex_set(d, p)
    tables = {k: univariate_orthonormal(k, p) for k in set(kinds)}
    alphas = idx.indices
    coeffs = np.zeros((idx.size, idx.size))
    cols = np.arange(d)
    for row in range(idx.size):
        a = alphas[row]
        cand = np.nonzero(np.all(alphas[: row + 1] <= a, axis=1))[0]
        vals = np.ones(cand.size)
        for j in cols:
            vals *= tables[kinds[j]][a[j], alphas[cand, j]]
        coeffs[row, cand] = vals
    return PolynomialBasis(idx, coeffs, "classical", kinds)


# ---------------------------------------------------------------------------
# near-orthonormal construction
# ---------------------------------------------------------------------------

def cross_validation_zeta(s1: SampleSet, s2: SampleSet, d: int, p: int) -> np.ndarray:
    """Tolerance table for the relaxed orthonormality constraints.

    Entry ``[a, b]`` averages how far the basis built on one half is from
    orthonormal on the other half:  ``(|z1| + |z2|) / (2 sqrt 2)``.  On the
    diagonal the deviation is measured from 1.
    """
    b1 = gram_schmidt_discrete(s1, d, p)
    b2 = gram_schmidt_discrete(s2, d, p)
    eye = np.eye(b1.size)
    z1 = b1.gram(s2) - eye
    z2 = b2.gram(s1) - eye
    return (np.abs(z1) + np.abs(z2)) / (2.0 * math.sqrt(2.0))


def _box_qp(hess: np.ndarray, lin: np.ndarray, bound: np.ndarray, max_iter: int = 100):
    """Minimise ``0.5 g^T H g + lin^T g`` over ``|g_i| <= bound_i``.

    Primal-dual active-set iteration; falls back to bounded least squares on
    the Cholesky factor if it does not settle.  Returns ``(g, iterations)``.
    """
    n = lin.size
    if n == 0:
        return np.zeros(0), 0
    lo, hi = -bound, bound
    g = np.zeros(n)
    lam = -lin.copy()
    c = np.diag(hess).copy()
    prev = None
    for it in range(1, max_iter + 1):
        up = lam + c * (g - hi) > 0
        down = (lam + c * (g - lo) < 0) & ~up
        if prev is not None and np.array_equal(prev[0], up) and np.array_equal(prev[1], down):
            tol = 1e-9 * (1.0 + np.abs(lin).max())
            if (np.all(np.abs(g) <= bound * (1 + 1e-12)) and np.all(lam[up] >= -tol)
                    and np.all(lam[down] <= tol)):
                return g, it
            break
        prev = (up, down)
        free = ~(up | down)
        g = np.where(up, hi, np.where(down, lo, 0.0))
        if free.any():
            rhs = -lin[free] - hess[np.ix_(free, ~free)] @ g[~free]
            try:
                g[free] = cho_solve(cho_factor(hess[np.ix_(free, free)]), rhs)
            except np.linalg.LinAlgError:
                break
        lam = -(hess @ g + lin)
        lam[free] = 0.0
    # fallback: 0.5 g^T H g + lin^T g = 0.5 |R g + R^{-T} lin|^2 + const
    r = np.linalg.cholesky(hess).T
    target = -solve_triangular(r, lin, trans="T")
    res = lsq_linear(r, target, bounds=(lo, hi), method="bvls", tol=1e-14)
    return res.x, -int(res.nit)


def _group_qp(hess: np.ndarray, lin: np.ndarray, groups: list[np.ndarray], budgets: np.ndarray):
    """Minimise ``0.5 g^T H g + lin^T g`` subject to ``|g_G|^2 <= budget_G`` per group.

    Solved through the dual in the (few) group multipliers.
    """
    n = lin.size
    if n == 0:
        return np.zeros(0), 0
    owner = np.empty(n, dtype=int)
    for gi, members in enumerate(groups):
        owner[members] = gi

    def primal(nu):
        h = hess + np.diag(2.0 * nu[owner])
        return -cho_solve(cho_factor(h), lin)

    def neg_dual(nu):
        g = primal(nu)
        val = 0.5 * g @ hess @ g + lin @ g
        sq = np.array([g[m] @ g[m] for m in groups])
        val += nu @ (sq - budgets)
        return -val, -(sq - budgets)

    g0 = primal(np.zeros(len(groups)))
    if all(g0[m] @ g0[m] <= b for m, b in zip(groups, budgets)):
        return g0, 0
    start = np.full(len(groups), np.abs(lin).max() / max(np.sqrt(budgets.max()), 1e-300))
    res = minimize(neg_dual, start, jac=True, method="L-BFGS-B",
                   bounds=[(0, None)] * len(groups), options={"maxiter": 500, "ftol": 1e-15, "gtol": 1e-14})
    return primal(res.x), int(res.nit)


def near_orthonormal(samples: SampleSet, d: int, p: int, mode: str = "pairwise",
                     halves: tuple[SampleSet, SampleSet] | None = None,
                     zeta: np.ndarray | None = None,
                     norm_floor: float = 0.5) -> PolynomialBasis:
    """Near-orthonormal basis with minimal coefficient norms.

    Row by row, the monomial coefficient vector is made as short as possible
    while the empirical inner products with the earlier rows stay inside the
    cross-validated tolerances (``mode="pairwise"``), or their root-sum-square
    per degree stays inside the pooled tolerance (``mode="grouped"``).  The
    leading coefficient is held at its exactly-orthonormal value during the
    minimisation.  The row is then scaled down to the smallest empirical norm
    the diagonal tolerance admits, ``|psi|^2 = 1 - zeta[k, k]`` (never below
    ``norm_floor``).

    Parameters
    ----------
    samples
        Construction set.  Split in two halves (first/second) for the
        tolerances unless ``halves`` or ``zeta`` are given.
    """
    if mode not in ("pairwise", "grouped"):
        raise BasisError(f"unknown near-orthonormal mode {mode!r}")
    exact = gram_schmidt_discrete(samples, d, p)
    idx = exact.index_set
    if zeta is None:
        s1, s2 = samples.split() if halves is None else halves
        zeta = cross_validation_zeta(s1, s2, d, p)
    zeta = np.asarray(zeta, dtype=float)
    e = exact.coeffs
    kmat = e @ e.T  # quadratic form of |coefficients|^2 in exact-basis coordinates
    n = idx.size
    # trans[k] = coordinates of near row k in the exact basis (lower triangular)
    trans = np.zeros((n, n))
    trans[0, 0] = 1.0
    degrees = idx.degrees
    fallbacks, iters = [], []
    for k in range(1, n):
        band = zeta[k, :k]
        hess = kmat[:k, :k]
        lin = kmat[:k, k]
        try:
            if mode == "pairwise":
                g, it = _box_qp(hess, lin, band)
            else:
                groups = [np.nonzero(degrees[:k] == r)[0] for r in range(degrees[k] + 1)]
                groups = [m for m in groups if m.size]
                budgets = np.array([band[m] @ band[m] for m in groups])
                g, it = _group_qp(hess, lin, groups, budgets)
        except (np.linalg.LinAlgError, ValueError):
            fallbacks.append(k)
            trans[k, k] = 1.0
            continue
        iters.append(it)
        # constraints are on inner products with the near rows: r = T g
        r = trans[:k, :k] @ g
        if mode == "pairwise":
            ar = np.abs(r)
            ratio = np.divide(band, ar, out=np.full(ar.shape, np.inf), where=ar > 0)
            shrink = min(1.0, float(ratio.min(initial=np.inf)))
        else:
            shrink = 1.0
            for m in groups:
                nr = math.sqrt(r[m] @ r[m])
                if nr > 0:
                    shrink = min(shrink, math.sqrt(band[m] @ band[m]) / nr)
        g = shrink * g
        # |psi|^2 = 1 + |g|^2 in exact coordinates.  The shortest admissible
        # row sits on the lower edge of the normalisation band.
        target = 1.0 - min(max(float(zeta[k, k]), 0.0), 1.0 - norm_floor)
        scale = math.sqrt(target / (1.0 + g @ g))
        trans[k, :k] = scale * g
        trans[k, k] = scale
    coeffs = np.tril(trans @ e)
    # guard the norm-decrease property against rounding
    worse = np.linalg.norm(coeffs, axis=1) > np.linalg.norm(e, axis=1) + 1e-12
    for k in np.nonzero(worse)[0]:
        coeffs[k] = e[k]
        fallbacks.append(int(k))
    return PolynomialBasis(idx, coeffs, "near_orthonormal",
                           meta={"mode": mode, "fallback_rows": sorted(set(fallbacks)),
                                 "qp_iterations": iters})


# ---------------------------------------------------------------------------
# serialisation
# ---------------------------------------------------------------------------

BASIS_FORMAT = "apce-basis/1"


def basis_to_dict(basis: PolynomialBasis) -> dict:
    return {
        "format": BASIS_FORMAT,
        "d": basis.d,
        "p": basis.p,
        "provenance": basis.provenance,
        "families": list(basis.families),
        "ordering": basis.index_set.indices.tolist(),
        "rows": [[float(v) for v in basis.coeffs[k, : k + 1]] for k in range(basis.size)],
    }


def basis_from_dict(data: dict) -> PolynomialBasis:
    if data.get("format") != BASIS_FORMAT:
        raise BasisError(f"not a basis file (format={data.get('format')!r})")
    idx = graded_lex_set(int(data["d"]), int(data["p"]))
    if data["ordering"] != idx.indices.tolist():
        raise BasisError("stored ordering does not match the graded lexicographic set")
    coeffs = np.zeros((idx.size, idx.size))
    for k, row in enumerate(data["rows"]):
        coeffs[k, : len(row)] = row
    return PolynomialBasis(idx, coeffs, data["provenance"], tuple(data.get("families", ())))


def save_basis(path, basis: PolynomialBasis) -> None:
    with open(path, "w") as fh:
        json.dump(basis_to_dict(basis), fh, indent=1)
        fh.write("\n")


def load_basis(path) -> PolynomialBasis:
    with open(path) as fh:
        return basis_from_dict(json.load(fh))
