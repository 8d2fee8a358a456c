"""Quality metrics for measurement matrices and bases.

* restricted isometry quantities ``delta_s`` / ``theta_s`` on a fixed support
* Gram deviation ``|Psi^T W Psi - I|_2``
* the tail-mean basis bound ``K~``
* sampled null-space vectors violating the l1 dominance test on a support
"""
from __future__ import annotations

import csv
import itertools
import json
import logging
import math
from dataclasses import asdict, dataclass

import numpy as np
from scipy.linalg import null_space

from .basis import PolynomialBasis
from .measure import SampleSet
from .sparse_solver import RecoverySetup, basis_pursuit

log = logging.getLogger(__name__)

DEFAULT_BUDGET = 10**6
GREEDY_RESTARTS = 64


@dataclass(frozen=True)
class SupportSpec:
    T: tuple
    n: int

    def __post_init__(self):
        t = tuple(sorted(int(i) for i in self.T))
        if len(set(t)) != len(t):
            raise ValueError("support indices must be distinct")
        if t and (t[0] < 0 or t[-1] >= self.n):
            raise ValueError(f"support indices must lie in [0, {self.n})")
        object.__setattr__(self, "T", t)

    @property
    def s(self) -> int:
        return len(self.T)

    @property
    def complement(self) -> np.ndarray:
        mask = np.ones(self.n, dtype=bool)
        mask[list(self.T)] = False
        return np.nonzero(mask)[0]


def _support(T, n) -> SupportSpec:
    return T if isinstance(T, SupportSpec) else SupportSpec(tuple(T), n)


@dataclass
class RicReport:
    delta_s: float
    theta_s: float
    indicator: float
    exact: bool
    tprime_count: int
    worst_tprime: tuple = ()

    def to_dict(self) -> dict:
        out = asdict(self)
        out["worst_tprime"] = list(self.worst_tprime)
        return out

    def to_json(self) -> str:
        return json.dumps(self.to_dict())


def gram_deviation(basis: PolynomialBasis, pts: SampleSet) -> float:
    """Spectral norm of ``sum_k w_k Psi(x_k) Psi(x_k)^T - I``."""
    if pts.d != basis.d:
        raise ValueError(f"points have dimension {pts.d}, basis has {basis.d}")
    v = basis.evaluate(pts.points)
    g = (v * pts.weights[:, None]).T @ v
    return float(np.linalg.norm(g - np.eye(basis.size), 2))


def _spectral_norms(blocks: np.ndarray) -> np.ndarray:
    # blocks: (K, s, s); largest singular value of each
    return np.sqrt(np.linalg.eigvalsh(np.einsum("kij,kil->kjl", blocks, blocks))[:, -1].clip(0))


def _theta_exhaustive(B: np.ndarray, s: int, chunk: int = 20000):
    rows = B.shape[0]
    best, arg, count = -1.0, (), 0
    combos = itertools.combinations(range(rows), s)
    while True:
        batch = list(itertools.islice(combos, chunk))
        if not batch:
            break
        sel = np.array(batch)
        vals = _spectral_norms(B[sel])
        count += len(batch)
        k = int(np.argmax(vals))
        if vals[k] > best:
            best, arg = float(vals[k]), tuple(batch[k])
    return best, arg, count


def _theta_greedy(B: np.ndarray, s: int, rng: np.random.Generator):
    rows = B.shape[0]
    norms = np.linalg.norm(B, axis=1)
    starts = [int(np.argmax(norms))]
    starts += list(rng.choice(rows, size=min(GREEDY_RESTARTS, rows), replace=False))
    best, arg, count = -1.0, (), 0
    for st in starts:
        chosen = [int(st)]
        while len(chosen) < s:
            rest = np.setdiff1d(np.arange(rows), chosen)
            sel = np.array([chosen + [r] for r in rest])
            vals = _spectral_norms(B[sel]) if s > 1 else np.abs(B[rest, 0])
            count += rest.size
            chosen.append(int(rest[int(np.argmax(vals))]))
        val = float(np.linalg.norm(B[chosen], 2))
        if val > best:
            best, arg = val, tuple(chosen)
    return best, arg, count


def ric_constants(A, T, budget: int = DEFAULT_BUDGET, seed: int = 0) -> RicReport:
    """``delta_s`` of ``A_T`` and ``theta_s = max |A_t'^T A_T|_2`` over ``t'`` disjoint from ``T``.

    The t' search is exhaustive when ``C(N - s, s) <= budget``; otherwise a
    greedy search with random restarts gives a lower bound (``exact=False``).
    """
    A = np.atleast_2d(np.asarray(A, dtype=float))
    m, n = A.shape
    sup = _support(T, n)
    s = sup.s
    if s < 1:
        raise ValueError("support must be nonempty")
    if s > m:
        raise ValueError(f"support size {s} exceeds the number of rows {m}")
    if not np.all(np.isfinite(A)):
        raise ValueError("non-finite entries in A")
    at = A[:, list(sup.T)]
    ev = np.linalg.eigvalsh(at.T @ at)
    delta = float(max(ev[-1] - 1.0, 1.0 - ev[0]))
    comp = sup.complement
    if comp.size == 0:
        theta, arg, count, exact = 0.0, (), 0, True
    else:
        B = A[:, comp].T @ at
        k = min(s, comp.size)
        if math.comb(comp.size, k) <= budget:
            theta, arg, count = _theta_exhaustive(B, k)
            exact = True
        else:
            theta, arg, count = _theta_greedy(B, k, np.random.default_rng(seed))
            exact = False
        arg = tuple(int(comp[i]) for i in arg)
    indicator = theta / (1.0 - delta) if delta < 1.0 else math.inf
    return RicReport(delta, float(theta), float(indicator), exact, int(count), arg)


def basis_bound(basis: PolynomialBasis, S: SampleSet | np.ndarray, M_sigma: float) -> float:
    """Tail mean of ``k(x) = max_i |psi_i(x)|``.

    Averages ``k`` over the points with ``|k - mean(k)| > M_sigma * std(k)``;
    when no point qualifies the maximum of ``k`` is returned.
    """
    pts = S.points if isinstance(S, SampleSet) else np.atleast_2d(S)
    if pts.shape[0] == 0:
        raise ValueError("empty point set")
    k = np.abs(basis.evaluate(pts)).max(axis=1)
    return _tail_mean(k, M_sigma)


def _tail_mean(k: np.ndarray, M_sigma: float) -> float:
    mask = np.abs(k - k.mean()) > M_sigma * k.std()
    return float(k[mask].mean()) if mask.any() else float(k.max())


def basis_bound_table(basis: PolynomialBasis, S, levels=(3, 4, 5, 6)) -> dict:
    """``K~`` for several ``M_sigma`` plus the maximum; logs non-monotone rows."""
    pts = S.points if isinstance(S, SampleSet) else np.atleast_2d(S)
    k = np.abs(basis.evaluate(pts)).max(axis=1)
    out = {float(m): _tail_mean(k, m) for m in levels}
    vals = list(out.values())
    if any(b < a for a, b in zip(vals, vals[1:])):
        log.warning("basis bound is not monotone in M_sigma: %s", vals)
    out["max"] = float(k.max())
    return out


# ---------------------------------------------------------------------------
# null-space probe
# ---------------------------------------------------------------------------

@dataclass
class NullSpaceProbe:
    vectors: np.ndarray
    profiles: np.ndarray
    requested: int
    attempts: int
    shortfall: bool
    proposal: str

    def to_dict(self) -> dict:
        return {"requested": self.requested, "found": int(self.vectors.shape[0]),
                "attempts": self.attempts, "shortfall": self.shortfall,
                "proposal": self.proposal, "profiles": self.profiles.tolist()}

    def write_profiles_csv(self, path) -> None:
        """Rows ``(vector, i', |v_i'|)`` with ``i'`` the descending-magnitude rank."""
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["vector", "rank", "magnitude"])
            for j, prof in enumerate(self.profiles):
                for i, v in enumerate(prof):
                    w.writerow([j, i, repr(float(v))])


def _dominant(v, on_t) -> bool:
    a = np.abs(v)
    return a[on_t].sum() > a[~on_t].sum()


def null_space_probe(A, T, count: int, seed: int = 0, proposal: str = "isotropic",
                     max_attempts: int | None = None) -> NullSpaceProbe:
    """Unit vectors ``v`` in ``ker A`` with ``|v_T|_1 > |v_{T^c}|_1``.

    proposal
        ``isotropic``: Gaussian coordinates over an orthonormal kernel basis.
        ``recovery``: ``v = x_hat - x`` where ``x`` is a random vector supported
        on ``T`` and ``x_hat`` its basis-pursuit reconstruction from ``A x``;
        any failed recovery yields a qualifying direction.
    """
    A = np.atleast_2d(np.asarray(A, dtype=float))
    m, n = A.shape
    sup = _support(T, n)
    if m >= n:
        raise ValueError("kernel is trivial (M >= N)")
    kern = null_space(A)
    if kern.shape[1] == 0:
        raise ValueError("kernel is trivial (A has full column rank)")
    on_t = np.zeros(n, dtype=bool)
    on_t[list(sup.T)] = True
    rng = np.random.default_rng(seed)
    cap = max_attempts if max_attempts is not None else 1000 * max(count, 1)
    found, tries = [], 0
    while len(found) < count and tries < cap:
        tries += 1
        if proposal == "isotropic":
            v = kern @ rng.standard_normal(kern.shape[1])
        elif proposal == "recovery":
            x = np.zeros(n)
            x[on_t] = rng.standard_normal(sup.s)
            res = basis_pursuit(RecoverySetup(A, A @ x))
            # project away solver round-off so Av = 0 holds to machine precision
            v = kern @ (kern.T @ (res.c - x))
        else:
            raise ValueError(f"unknown proposal {proposal!r}")
        nv = np.linalg.norm(v)
        if nv < 1e-9:
            continue
        v = v / nv
        if _dominant(v, on_t):
            found.append(v)
    vecs = np.array(found).reshape(-1, n)
    prof = -np.sort(-np.abs(vecs), axis=1)
    short = len(found) < count
    if short:
        log.warning("null-space probe found %d of %d vectors in %d attempts", len(found), count, tries)
    return NullSpaceProbe(vecs, prof, count, tries, short, proposal)
