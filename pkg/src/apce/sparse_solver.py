"""l1 recovery of expansion coefficients.

Both basis pursuit (``A c = b``) and the denoising variant
(``|A c - b| <= sigma``) are solved by following the LASSO homotopy path
``min 1/2 |A c - b|^2 + lam |c|_1`` from ``lam = |A^T b|_inf`` down to the
value where the residual norm hits ``sigma``.  Along the path the active
set and signs are tracked exactly, so the final point is obtained from a
small least-squares solve on the support and comes with a dual certificate
``y`` (``|A^T y|_inf <= 1``).
"""
from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field

import numpy as np
from scipy import linalg

from .basis import PolynomialBasis
from .measure import SampleSet


class RecoveryError(RuntimeError):
    pass


@dataclass
class RecoverySetup:
    """Measurement matrix ``A`` (M x N), data ``b`` and noise bound ``sigma``."""

    A: np.ndarray
    b: np.ndarray
    sigma: float = 0.0
    normalization: dict = field(default_factory=dict)

    def __post_init__(self):
        self.A = np.atleast_2d(np.asarray(self.A, dtype=float))
        self.b = np.asarray(self.b, dtype=float).reshape(-1)
        m, n = self.A.shape
        if m < 1 or n < 1:
            raise RecoveryError(f"empty measurement matrix {self.A.shape}")
        if self.b.size != m:
            raise RecoveryError(f"{m} rows but {self.b.size} observations")
        if not (np.all(np.isfinite(self.A)) and np.all(np.isfinite(self.b))):
            raise RecoveryError("non-finite entries in A or b")
        if not self.sigma >= 0:
            raise RecoveryError(f"sigma must be >= 0, got {self.sigma}")

    @property
    def shape(self):
        return self.A.shape


@dataclass
class RecoveryResult:
    c: np.ndarray
    residual_l2: float
    l1_norm: float
    iterations: int
    converged: bool
    dual: np.ndarray | None = field(default=None, repr=False)
    duality_gap: float = math.nan
    lam: float = 0.0

    def to_dict(self) -> dict:
        return {
            "c": [float(v) for v in self.c],
            "residual_l2": float(self.residual_l2),
            "l1_norm": float(self.l1_norm),
            "iterations": int(self.iterations),
            "converged": bool(self.converged),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict())


def assemble_measurement_matrix(basis: PolynomialBasis, training: SampleSet | np.ndarray) -> np.ndarray:
    """``A[i, j] = psi_j(z_i)``."""
    pts = training.points if isinstance(training, SampleSet) else np.atleast_2d(training)
    if pts.shape[1] != basis.d:
        raise RecoveryError(f"training points have dimension {pts.shape[1]}, basis has {basis.d}")
    A = basis.evaluate(pts)
    if not np.all(np.isfinite(A)):
        bad = np.argwhere(~np.isfinite(A))[0]
        raise RecoveryError(f"non-finite basis value at training point {bad[0]}, column {bad[1]}")
    return A


# ---------------------------------------------------------------------------
# homotopy
# ---------------------------------------------------------------------------

def _support_solution(A_s, b, z, sigma):
    """Exact point on the path for a fixed active set and sign pattern.

    ``c_s(lam) = G^{-1}(A_s^T b - lam z)`` so ``r(lam) = r0 + lam w`` with
    ``r0`` the least-squares residual and ``w = A_s G^{-1} z`` orthogonal to it.
    """
    q, rr = linalg.qr(A_s, mode="economic")
    ls = linalg.solve_triangular(rr, q.T @ b)
    r0 = b - A_s @ ls
    # G^{-1} z = R^{-1} R^{-T} z
    gz = linalg.solve_triangular(rr, linalg.solve_triangular(rr, z, trans="T"))
    w = A_s @ gz
    ww = float(w @ w)
    excess = sigma * sigma - float(r0 @ r0)
    lam = math.sqrt(excess / ww) if excess > 0 and ww > 0 else 0.0
    return ls - lam * gz, lam, r0, w


def _homotopy(A, b, sigma, max_iter, tol=1e-12):
    m, n = A.shape
    c = np.zeros(n)
    r = b.copy()
    corr = A.T @ r
    lam = float(np.max(np.abs(corr)))
    if math.sqrt(r @ r) <= sigma or lam == 0.0:
        return c, lam, [], 0, True
    active: list[int] = []
    signs: list[float] = []
    banned = np.zeros(n, dtype=bool)
    scale = lam
    j = int(np.argmax(np.abs(corr)))
    active.append(j)
    signs.append(math.copysign(1.0, corr[j]))
    it = 0
    while it < max_iter:
        it += 1
        A_s = A[:, active]
        z = np.array(signs)
        try:
            if len(active) > m:
                raise linalg.LinAlgError("more active columns than rows")
            fac = linalg.cho_factor(A_s.T @ A_s)
            diag = np.abs(np.diag(fac[0]))
            if diag.min() < 1e-7 * diag.max():
                raise linalg.LinAlgError("rank deficient active set")
            d = linalg.cho_solve(fac, z)
        except linalg.LinAlgError:
            # newest column is (numerically) in the span of the others
            banned[active.pop()] = True
            signs.pop()
            continue
        u = A_s @ d
        au = A.T @ u
        # step gamma: lam -> lam - gamma, c_s += gamma d, r -= gamma u
        best, event, who = lam, "end", -1
        inactive = np.ones(n, dtype=bool)
        inactive[active] = False
        inactive &= ~banned
        if inactive.any():
            idx = np.nonzero(inactive)[0]
            cj, aj = corr[idx], au[idx]
            with np.errstate(divide="ignore", invalid="ignore"):
                g1 = (lam - cj) / (1.0 - aj)
                g2 = (lam + cj) / (1.0 + aj)
            g = np.where((g1 > tol * scale) & np.isfinite(g1), g1, np.inf)
            g = np.minimum(g, np.where((g2 > tol * scale) & np.isfinite(g2), g2, np.inf))
            k = int(np.argmin(g))
            if g[k] < best:
                best, event, who = float(g[k]), "add", int(idx[k])
        cs = c[active]
        with np.errstate(divide="ignore", invalid="ignore"):
            gd = -cs / d
        gd = np.where(gd > tol * scale, gd, np.inf)
        if gd.size:
            k = int(np.argmin(gd))
            if gd[k] < best:
                best, event, who = float(gd[k]), "drop", k
        if sigma > 0:
            # |r - gamma u|^2 = sigma^2
            uu, ru, rr = u @ u, r @ u, r @ r
            disc = ru * ru - uu * (rr - sigma * sigma)
            if uu > 0 and disc >= 0:
                gs = (ru - math.sqrt(disc)) / uu
                if 0 <= gs <= best:
                    best, event = gs, "target"
        c[active] = cs + best * d
        r = r - best * u
        corr = corr - best * au
        lam = lam - best
        if event in ("end", "target"):
            return c, lam, active, it, True
        if event == "add":
            active.append(who)
            signs.append(math.copysign(1.0, corr[who]))
        else:
            c[active[who]] = 0.0
            active.pop(who)
            signs.pop(who)
            if not active:
                return c, lam, active, it, True
        if lam <= tol * scale:
            return c, 0.0, active, it, True
    return c, lam, active, it, False


def _solve(setup: RecoverySetup, max_iter: int) -> RecoveryResult:
    A, b, sigma = setup.A, setup.b, float(setup.sigma)
    n = A.shape[1]
    c, lam, active, it, ok = _homotopy(A, b, sigma, max_iter)
    y = None
    if ok and active:
        z = np.sign(c[active])
        keep = z != 0
        active = [a for a, k in zip(active, keep) if k]
        z = z[keep]
        cs, lam_s, r0, w = _support_solution(A[:, active], b, z, sigma)
        # accept the polished point only if it keeps the sign pattern
        if np.all(np.sign(cs) == z):
            c = np.zeros(n)
            c[active] = cs
            lam = lam_s
            y = w + (r0 / lam if lam > 0 else 0.0)
    r = b - A @ c
    res = float(np.linalg.norm(r))
    l1 = float(np.abs(c).sum())
    if y is None:
        y = r / lam if lam > 0 else np.zeros_like(b)
    # scale the certificate into the dual feasible set
    top = float(np.max(np.abs(A.T @ y))) if y.any() else 0.0
    if top > 1.0:
        y = y / top
    dual_obj = float(b @ y - sigma * np.linalg.norm(y))
    gap = l1 - dual_obj
    if ok and res > sigma + 1e-8 * max(1.0, float(np.linalg.norm(b))):
        raise RecoveryError(
            f"no coefficient vector reaches residual {sigma:g}; smallest found {res:.3e}")
    return RecoveryResult(c, res, l1, it, ok, y, gap, lam)


def basis_pursuit(setup: RecoverySetup, max_iter: int = 100_000) -> RecoveryResult:
    """min |c|_1 subject to A c = b.  ``setup.sigma`` is ignored."""
    exact = RecoverySetup(setup.A, setup.b, 0.0, setup.normalization)
    return _solve(exact, max_iter)


def bpdn(setup: RecoverySetup, max_iter: int = 100_000) -> RecoveryResult:
    """min |c|_1 subject to |A c - b|_2 <= sigma."""
    if np.linalg.norm(setup.b) <= setup.sigma:
        n = setup.A.shape[1]
        return RecoveryResult(np.zeros(n), float(np.linalg.norm(setup.b)), 0.0, 0, True,
                              np.zeros_like(setup.b), 0.0, 0.0)
    return _solve(setup, max_iter)


def solve(setup: RecoverySetup, max_iter: int = 100_000) -> RecoveryResult:
    return bpdn(setup, max_iter) if setup.sigma > 0 else basis_pursuit(setup, max_iter)


def relative_l2_error(approx, truth, weights=None) -> float:
    """Weighted relative l2 error ``(sum w (f - g)^2 / sum w f^2)^(1/2)``."""
    f = np.asarray(truth, dtype=float).reshape(-1)
    g = np.asarray(approx, dtype=float).reshape(-1)
    if f.shape != g.shape:
        raise ValueError(f"shape mismatch {g.shape} vs {f.shape}")
    w = np.full(f.size, 1.0 / f.size) if weights is None else np.asarray(weights, dtype=float)
    den = float(w @ (f * f))
    if den == 0.0:
        raise ZeroDivisionError("truth vanishes on the evaluation set")
    return math.sqrt(float(w @ ((f - g) ** 2)) / den)


def relative_l1_error(approx, truth) -> float:
    f = np.asarray(truth, dtype=float).reshape(-1)
    g = np.asarray(approx, dtype=float).reshape(-1)
    den = np.abs(f).sum()
    if den == 0.0:
        raise ZeroDivisionError("reference vector is zero")
    return float(np.abs(f - g).sum() / den)


def write_matrix_csv(path, mat) -> None:
    mat = np.atleast_2d(np.asarray(mat, dtype=float))
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        for row in mat:
            w.writerow([repr(float(v)) for v in row])


def read_matrix_csv(path) -> np.ndarray:
    with open(path, newline="") as fh:
        rows = [[float(v) for v in row] for row in csv.reader(fh) if row]
    return np.array(rows)
