"""Probability measures: weighted sample sets, Gauss/Smolyak quadrature for
product densities, Gaussian mixtures and PCA whitening.
"""
from __future__ import annotations

import csv
import itertools
import math
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
from scipy.linalg import eigh_tridiagonal

FAMILIES = ("gaussian", "uniform", "arcsine", "exponential")
DEFAULT_NODE_CAP = 10**7


class MeasureError(ValueError):
    pass


# ---------------------------------------------------------------------------
# sample sets
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SampleSet:
    """Weighted point cloud standing in for a probability measure.

    ``points`` has shape (n, d).  ``weights`` default to 1/n each.
    """

    points: np.ndarray
    weights: np.ndarray = None

    def __post_init__(self):
        pts = np.array(self.points, dtype=float)
        if pts.ndim == 1:
            pts = pts[:, None]
        if pts.ndim != 2 or pts.shape[0] == 0:
            raise MeasureError("points must be a non-empty (n, d) array")
        if self.weights is None:
            w = np.full(pts.shape[0], 1.0 / pts.shape[0])
        else:
            w = np.array(self.weights, dtype=float).reshape(-1)
            if w.shape[0] != pts.shape[0]:
                raise MeasureError("one weight per point is required")
            if np.any(w < 0):
                raise MeasureError("sample weights must be non-negative")
            if abs(w.sum() - 1.0) > 1e-12:
                raise MeasureError(f"sample weights sum to {w.sum()!r}, not 1")
        pts.setflags(write=False)
        w.setflags(write=False)
        object.__setattr__(self, "points", pts)
        object.__setattr__(self, "weights", w)

    @property
    def d(self) -> int:
        return self.points.shape[1]

    @property
    def n(self) -> int:
        return self.points.shape[0]

    def __len__(self):
        return self.n

    @property
    def uniform(self) -> bool:
        return bool(np.all(self.weights == self.weights[0]))

    def subset(self, idx) -> "SampleSet":
        """Sub-sample with renormalised weights."""
        idx = np.asarray(idx)
        w = self.weights[idx]
        return SampleSet(self.points[idx], w / w.sum())

    def split(self) -> tuple["SampleSet", "SampleSet"]:
        """First and second half (in stored order)."""
        h = self.n // 2
        return self.subset(np.arange(h)), self.subset(np.arange(h, self.n))

    def transformed(self, matrix: np.ndarray) -> "SampleSet":
        """Apply ``x -> matrix @ x`` to every point."""
        return SampleSet(self.points @ np.asarray(matrix).T, self.weights)

    def mean(self) -> np.ndarray:
        return self.weights @ self.points

    def covariance(self) -> np.ndarray:
        c = self.points - self.mean()
        return (c * self.weights[:, None]).T @ c


def inner_product(f: Callable, g: Callable, m: "SampleSet | QuadratureRule") -> float:
    """Discrete inner product ``sum_k w_k f(x_k) g(x_k)``.

    ``f`` and ``g`` are vectorised: they receive the (n, d) node array.
    """
    fv = np.asarray(f(m.points), dtype=float).reshape(-1)
    gv = np.asarray(g(m.points), dtype=float).reshape(-1)
    bad = ~(np.isfinite(fv) & np.isfinite(gv))
    if bad.any():
        k = int(np.argmax(bad))
        raise MeasureError(f"non-finite function value at node {k}: {m.points[k]}")
    return float(np.sum(m.weights * fv * gv))


def write_samples_csv(path, samples: SampleSet, with_weights: bool | None = None) -> None:
    """Write one point per row; a trailing weight column is added for non-uniform sets."""
    if with_weights is None:
        with_weights = not samples.uniform
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow([f"dim={samples.d}"])
        for k in range(samples.n):
            row = [repr(float(v)) for v in samples.points[k]]
            if with_weights:
                row.append(repr(float(samples.weights[k])))
            w.writerow(row)


def read_samples_csv(path) -> SampleSet:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or not rows[0] or not rows[0][0].startswith("dim="):
        raise MeasureError(f"{path}: first row must be 'dim=<d>'")
    d = int(rows[0][0][4:])
    data = [r for r in rows[1:] if r]
    if not data:
        raise MeasureError(f"{path}: no sample rows")
    widths = {len(r) for r in data}
    if widths == {d}:
        return SampleSet(np.array(data, dtype=float))
    if widths == {d + 1}:
        arr = np.array(data, dtype=float)
        return SampleSet(arr[:, :d], arr[:, d])
    raise MeasureError(f"{path}: rows must have {d} or {d + 1} columns")


# ---------------------------------------------------------------------------
# univariate families and Gauss rules
# ---------------------------------------------------------------------------

def recurrence(kind: str, n: int) -> tuple[np.ndarray, np.ndarray]:
    """Monic three-term recurrence ``pi_{k+1} = (x - a_k) pi_k - b_k pi_{k-1}``.

    Returns ``a[0:n]`` and ``b[0:n]`` with ``b[0] = 1`` (total mass of a
    probability measure).  Closed forms, no moment computations.
    """
    k = np.arange(n, dtype=float)
    if kind == "gaussian":
        a, b = np.zeros(n), k.copy()
    elif kind == "uniform":
        a = np.zeros(n)
        b = k**2 / (4 * k**2 - 1)
    elif kind == "arcsine":
        a = np.zeros(n)
        b = np.full(n, 0.25)
        if n > 1:
            b[1] = 0.5
    elif kind == "exponential":
        a, b = 2 * k + 1, k**2
    else:
        raise MeasureError(f"unknown density family {kind!r}; expected one of {FAMILIES}")
    if n:
        b[0] = 1.0
    return a, b


def density(kind: str, x) -> np.ndarray:
    """Probability density of the family (normalised)."""
    x = np.asarray(x, dtype=float)
    if kind == "gaussian":
        return np.exp(-0.5 * x**2) / math.sqrt(2 * math.pi)
    if kind == "uniform":
        return np.where(np.abs(x) <= 1, 0.5, 0.0)
    if kind == "arcsine":
        with np.errstate(divide="ignore", invalid="ignore"):
            return np.where(np.abs(x) < 1, 1.0 / (math.pi * np.sqrt(1 - x**2)), 0.0)
    if kind == "exponential":
        return np.where(x >= 0, np.exp(-np.clip(x, 0, None)), 0.0)
    raise MeasureError(f"unknown density family {kind!r}")


def sample_family(kind: str, size, rng: np.random.Generator) -> np.ndarray:
    if kind == "gaussian":
        return rng.standard_normal(size)
    if kind == "uniform":
        return rng.uniform(-1.0, 1.0, size)
    if kind == "arcsine":
        return np.cos(math.pi * rng.uniform(0.0, 1.0, size))
    if kind == "exponential":
        return rng.exponential(1.0, size)
    raise MeasureError(f"unknown density family {kind!r}")


def _symmetric(kind: str) -> bool:
    return kind in ("gaussian", "uniform", "arcsine")


@lru_cache(maxsize=None)
def _gauss_nodes_weights(kind: str, n: int) -> tuple[np.ndarray, np.ndarray]:
    a, b = recurrence(kind, n)
    if n == 1:
        x, w = a[:1].copy(), np.ones(1)
    else:
        try:
            x, v = eigh_tridiagonal(a, np.sqrt(b[1:]))
        except np.linalg.LinAlgError as exc:
            raise MeasureError(f"Golub-Welsch eigensolver failed for {kind}, n={n}") from exc
        w = v[0] ** 2
        w = w / w.sum()
    if _symmetric(kind):
        # exact mirror symmetry so that nodes from different rules coincide bitwise
        x = 0.5 * (x - x[::-1])
        w = 0.5 * (w + w[::-1])
        if n % 2:
            x[n // 2] = 0.0
    x.setflags(write=False)
    w.setflags(write=False)
    return x, w


@dataclass(frozen=True)
class QuadratureRule:
    """Nodes/weights integrating polynomials of total degree <= ``exactness_degree``.

    Weights may be negative (sparse grids).  Exposes ``points`` so a rule can
    be used wherever a :class:`SampleSet` is accepted for integration.
    """

    nodes: np.ndarray
    weights: np.ndarray
    exactness_degree: int
    families: tuple = field(default=())

    def __post_init__(self):
        nodes = np.array(self.nodes, dtype=float)
        if nodes.ndim == 1:
            nodes = nodes[:, None]
        w = np.array(self.weights, dtype=float).reshape(-1)
        if w.shape[0] != nodes.shape[0]:
            raise MeasureError("one weight per node is required")
        nodes.setflags(write=False)
        w.setflags(write=False)
        object.__setattr__(self, "nodes", nodes)
        object.__setattr__(self, "weights", w)

    @property
    def points(self) -> np.ndarray:
        return self.nodes

    @property
    def d(self) -> int:
        return self.nodes.shape[1]

    @property
    def n(self) -> int:
        return self.nodes.shape[0]

    def integrate(self, f: Callable) -> float:
        return float(self.weights @ np.asarray(f(self.nodes), dtype=float))

    def transformed(self, matrix: np.ndarray) -> "QuadratureRule":
        """Rule for the pushforward measure of ``x -> matrix @ x``."""
        return QuadratureRule(self.nodes @ np.asarray(matrix).T, self.weights,
                              self.exactness_degree, self.families)


def gauss_rule_1d(kind: str, n: int) -> QuadratureRule:
    """``n``-point Gauss rule for one of the supported probability densities."""
    if n < 1:
        raise MeasureError("a Gauss rule needs at least one node")
    x, w = _gauss_nodes_weights(kind, n)
    return QuadratureRule(x[:, None], w, 2 * n - 1, (kind,))


def tensor_rule(rules: Sequence[QuadratureRule], cap: int = DEFAULT_NODE_CAP) -> QuadratureRule:
    """Cartesian product of one-dimensional rules."""
    if not rules:
        raise MeasureError("tensor_rule needs at least one rule")
    count = math.prod(r.n for r in rules)
    if count > cap:
        raise MeasureError(f"tensor rule would have {count} nodes (cap {cap})")
    if len(rules) == 1:
        return rules[0]
    grids = np.meshgrid(*[r.nodes[:, 0] for r in rules], indexing="ij")
    wgrids = np.meshgrid(*[r.weights for r in rules], indexing="ij")
    nodes = np.stack([g.reshape(-1) for g in grids], axis=1)
    weights = np.prod(np.stack([g.reshape(-1) for g in wgrids], axis=1), axis=1)
    fam = tuple(f for r in rules for f in r.families)
    # per-dimension exactness is preserved; for total degree the weakest factor limits
    return QuadratureRule(nodes, weights, min(r.exactness_degree for r in rules), fam)


def _excess_vectors(d: int, level: int):
    """Vectors of non-negative ints of length d with sum <= level."""
    for total in range(level + 1):
        for c in itertools.combinations(range(total + d - 1), d - 1):
            # stars and bars
            prev, out = -1, []
            for pos in c:
                out.append(pos - prev - 1)
                prev = pos
            out.append(total + d - 1 - prev - 1)
            yield total, out


def smolyak_rule(kind: str | Sequence[str], d: int, level: int,
                 cap: int = DEFAULT_NODE_CAP, merge_tol: float = 1e-12) -> QuadratureRule:
    """Smolyak sparse grid built from non-nested Gauss rules with ``i`` nodes at index ``i``.

    Exact for total degree ``2*level + 1``.  ``kind`` may be a single family
    or one family per dimension.
    """
    if d < 1 or level < 0:
        raise MeasureError("smolyak_rule needs d >= 1 and level >= 0")
    kinds = [kind] * d if isinstance(kind, str) else list(kind)
    if len(kinds) != d:
        raise MeasureError("one family per dimension is required")
    node_blocks, weight_blocks, total_nodes = [], [], 0
    for excess, e in _excess_vectors(d, level):
        # combination coefficient (-1)^(level-excess) C(d-1, level-excess)
        gap = level - excess
        if gap > d - 1:
            continue
        coef = (-1) ** gap * math.comb(d - 1, gap)
        active = [j for j in range(d) if e[j] > 0]
        size = math.prod(e[j] + 1 for j in active)
        total_nodes += size
        if total_nodes > cap:
            raise MeasureError(f"sparse grid exceeds node cap {cap}")
        block = np.empty((size, d))
        for j in range(d):
            if e[j] == 0:
                block[:, j] = _gauss_nodes_weights(kinds[j], 1)[0][0]
        w = np.full(size, float(coef))
        if active:
            xs = [_gauss_nodes_weights(kinds[j], e[j] + 1) for j in active]
            grid = np.meshgrid(*[x for x, _ in xs], indexing="ij")
            wgrid = np.meshgrid(*[ww for _, ww in xs], indexing="ij")
            for col, j in enumerate(active):
                block[:, j] = grid[col].reshape(-1)
                w = w * wgrid[col].reshape(-1)
        node_blocks.append(block)
        weight_blocks.append(w)
    nodes = np.concatenate(node_blocks)
    weights = np.concatenate(weight_blocks)
    keys = np.round(nodes / merge_tol).astype(np.int64)
    _, first, inverse = np.unique(keys, axis=0, return_index=True, return_inverse=True)
    merged_w = np.bincount(inverse.reshape(-1), weights=weights, minlength=first.size)
    keep = np.abs(merged_w) > 1e-15
    return QuadratureRule(nodes[first][keep], merged_w[keep], 2 * level + 1, tuple(kinds))


def product_rule(kinds: Sequence[str], degree: int, cap: int = DEFAULT_NODE_CAP) -> QuadratureRule:
    """Cheapest of tensor-Gauss / Smolyak rules exact for total ``degree``."""
    d = len(kinds)
    n1 = degree // 2 + 1
    level = max(0, math.ceil((degree - 1) / 2))
    if n1**d <= 20000:
        return tensor_rule([gauss_rule_1d(k, n1) for k in kinds], cap)
    return smolyak_rule(list(kinds), d, level, cap)


# ---------------------------------------------------------------------------
# Gaussian mixtures
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class GaussianMixtureSpec:
    weights: np.ndarray
    means: np.ndarray
    covariances: np.ndarray

    def __post_init__(self):
        a = np.asarray(self.weights, dtype=float).reshape(-1)
        mu = np.asarray(self.means, dtype=float)
        cov = np.asarray(self.covariances, dtype=float)
        if mu.ndim != 2 or cov.shape != (mu.shape[0], mu.shape[1], mu.shape[1]) or a.size != mu.shape[0]:
            raise MeasureError("mixture needs weights (m,), means (m, d), covariances (m, d, d)")
        if np.any(a <= 0) or abs(a.sum() - 1) > 1e-12:
            raise MeasureError("mixture weights must be positive and sum to 1")
        for i in range(a.size):
            if not np.allclose(cov[i], cov[i].T, atol=1e-12):
                raise MeasureError(f"covariance {i} is not symmetric")
        for arr in (a, mu, cov):
            arr.setflags(write=False)
        object.__setattr__(self, "weights", a)
        object.__setattr__(self, "means", mu)
        object.__setattr__(self, "covariances", cov)

    @property
    def d(self) -> int:
        return self.means.shape[1]

    @property
    def n_modes(self) -> int:
        return self.weights.size

    def mean(self) -> np.ndarray:
        return self.weights @ self.means

    def covariance(self) -> np.ndarray:
        m = self.mean()
        out = np.zeros((self.d, self.d))
        for a, mu, cov in zip(self.weights, self.means, self.covariances):
            out += a * (cov + np.outer(mu - m, mu - m))
        return out

    def cholesky_factors(self) -> list[np.ndarray]:
        out = []
        for i, cov in enumerate(self.covariances):
            try:
                out.append(np.linalg.cholesky(cov))
            except np.linalg.LinAlgError:
                raise MeasureError(f"covariance {i} is not positive definite") from None
        return out


def random_mixture(d: int, n_modes: int = 3, seed: int = 0) -> GaussianMixtureSpec:
    """Random centred mixture: means U[-1,1]^d, covariances (Y Y^T + I)/4 with Y ~ U[0,1]^{d x d}.

    Mode weights are drawn from a flat Dirichlet distribution.
    """
    rng = np.random.default_rng(seed)
    a = rng.dirichlet(np.ones(n_modes))
    mu = rng.uniform(-1.0, 1.0, (n_modes, d))
    mu = mu - a @ mu
    covs = []
    for _ in range(n_modes):
        y = rng.uniform(0.0, 1.0, (d, d))
        covs.append((y @ y.T + np.eye(d)) / 4.0)
    return GaussianMixtureSpec(a, mu, np.array(covs))


def sample_gaussian_mixture(spec: GaussianMixtureSpec, n: int, seed: int) -> SampleSet:
    if n < 1:
        raise MeasureError("need at least one sample")
    chol = spec.cholesky_factors()
    rng = np.random.default_rng(seed)
    modes = rng.choice(spec.n_modes, size=n, p=spec.weights)
    z = rng.standard_normal((n, spec.d))
    pts = np.empty((n, spec.d))
    for i in range(spec.n_modes):
        sel = modes == i
        pts[sel] = spec.means[i] + z[sel] @ chol[i].T
    return SampleSet(pts)


# ---------------------------------------------------------------------------
# PCA whitening
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class AffineMap:
    """``x -> matrix @ (x - shift)``."""

    shift: np.ndarray
    matrix: np.ndarray

    def __call__(self, x) -> np.ndarray:
        return (np.asarray(x, dtype=float) - self.shift) @ self.matrix.T


def pca_whiten(raw: SampleSet, energy: float | None = None, n_modes: int | None = None,
               rank_tol: float = 1e-12):
    """Decorrelate and normalise a sample set.

    Keeps the leading principal modes (all by default, or enough to reach the
    requested ``energy`` fraction, or exactly ``n_modes``).

    Returns
    -------
    whitened : SampleSet
    transform : AffineMap
    retained : ndarray
        Variance fraction carried by each kept mode.
    """
    if raw.n <= raw.d:
        raise MeasureError("PCA whitening needs more samples than dimensions")
    mean = raw.mean()
    cov = raw.covariance()
    gam, q = np.linalg.eigh(cov)
    order = np.argsort(gam)[::-1]
    gam, q = gam[order], q[:, order]
    # deterministic sign: largest-magnitude entry of each direction positive
    flip = np.sign(q[np.argmax(np.abs(q), axis=0), np.arange(q.shape[1])])
    q = q * flip
    frac = gam / gam.sum()
    if n_modes is None:
        if energy is None:
            n_modes = raw.d
        else:
            n_modes = int(np.searchsorted(np.cumsum(frac), energy - 1e-15) + 1)
            n_modes = min(n_modes, raw.d)
    rank = int(np.sum(gam > rank_tol * gam[0]))
    if n_modes > rank:
        raise MeasureError(f"covariance rank {rank} is below the requested {n_modes} modes")
    mat = (q[:, :n_modes] / np.sqrt(gam[:n_modes])).T
    transform = AffineMap(mean, mat)
    return SampleSet(transform(raw.points), raw.weights), transform, frac[:n_modes]
