"""Surrogates and the gradient-based input rotation.

A surrogate evaluates ``f(xi) = c . Psi(u)`` with ``u = (Q^T xi - shift) / scale``.
``Q`` is orthogonal (identity before any rotation).  ``shift``/``scale`` are
only used by the classical baselines (Legendre on [-1, 1], standardised
Hermite); data-driven bases take ``chi = Q^T xi`` directly.
"""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from .basis import (BasisError, PolynomialBasis, basis_from_dict, basis_to_dict, classical_basis,
                    gram_schmidt_discrete, gram_schmidt_quadrature, near_orthonormal)
from .measure import QuadratureRule, SampleSet, smolyak_rule
from .sparse_solver import RecoverySetup, assemble_measurement_matrix, relative_l2_error, solve

log = logging.getLogger(__name__)

BASIS_KINDS = ("exact", "near", "legendre", "hermite")
SURROGATE_FORMAT = "apce-surrogate/1"


@dataclass(frozen=True)
class Surrogate:
    basis: PolynomialBasis
    c: np.ndarray
    rotation: np.ndarray
    shift: np.ndarray | None = None
    scale: np.ndarray | None = None
    fit_meta: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        q = np.asarray(self.rotation, dtype=float)
        d = self.basis.d
        if q.shape != (d, d):
            raise ValueError(f"rotation must be {d}x{d}")
        if np.abs(q.T @ q - np.eye(d)).max() > 1e-10:
            raise ValueError("rotation is not orthogonal")
        c = np.asarray(self.c, dtype=float)
        if c.shape != (self.basis.size,):
            raise ValueError(f"need {self.basis.size} coefficients, got {c.shape}")
        object.__setattr__(self, "rotation", q)
        object.__setattr__(self, "c", c)

    @property
    def d(self) -> int:
        return self.basis.d

    def to_basis_input(self, points) -> np.ndarray:
        """Map original inputs ``xi`` to the basis variable ``u``."""
        x = np.atleast_2d(np.asarray(points, dtype=float)) @ self.rotation
        if self.shift is not None:
            x = x - self.shift
        if self.scale is not None:
            x = x / self.scale
        return x

    def predict(self, points) -> np.ndarray:
        return self.basis.evaluate(self.to_basis_input(points)) @ self.c

    __call__ = predict

    def gradient(self, points) -> np.ndarray:
        """Gradient with respect to the original inputs, shape (n, d)."""
        g = self.basis.gradient.directional(self.to_basis_input(points), self.c)
        if self.scale is not None:
            g = g / self.scale
        return g @ self.rotation.T

    def error(self, points, values, weights=None) -> float:
        return relative_l2_error(self.predict(points), values, weights)

    def to_dict(self) -> dict:
        return {
            "format": SURROGATE_FORMAT,
            "basis": basis_to_dict(self.basis),
            "rotation": self.rotation.tolist(),
            "shift": None if self.shift is None else np.asarray(self.shift).tolist(),
            "scale": None if self.scale is None else np.asarray(self.scale).tolist(),
            "c": self.c.tolist(),
            "fit_meta": self.fit_meta,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "Surrogate":
        if data.get("format") != SURROGATE_FORMAT:
            raise ValueError(f"not a surrogate file (format={data.get('format')!r})")
        arr = lambda v: None if v is None else np.array(v, dtype=float)  # noqa: E731
        return cls(basis_from_dict(data["basis"]), np.array(data["c"]), np.array(data["rotation"]),
                   arr(data.get("shift")), arr(data.get("scale")), data.get("fit_meta", {}))


def save_surrogate(path, s: Surrogate) -> None:
    with open(path, "w") as fh:
        json.dump(s.to_dict(), fh, indent=1)
        fh.write("\n")


def load_surrogate(path) -> Surrogate:
    with open(path) as fh:
        return Surrogate.from_dict(json.load(fh))


# ---------------------------------------------------------------------------
# gradient matrix and rotation
# ---------------------------------------------------------------------------

def gradient_matrix(s: Surrogate, m: SampleSet | QuadratureRule) -> np.ndarray:
    """``G = E[grad f grad f^T]`` under ``m``, from the exact surrogate gradient."""
    if s.basis.p < 1:
        raise ValueError("surrogate must have degree >= 1")
    g = s.gradient(m.points)
    G = (g * m.weights[:, None]).T @ g
    return 0.5 * (G + G.T)


def rotation_from_gradient(G) -> tuple[np.ndarray, np.ndarray]:
    """Eigenvectors of ``G`` by descending eigenvalue.

    Each column is signed so its largest-magnitude entry is positive; ties in
    the spectrum keep the eigensolver's column order.

    Returns
    -------
    Q : (d, d) orthogonal matrix
    k : eigenvalues, descending
    """
    G = np.asarray(G, dtype=float)
    if G.ndim != 2 or G.shape[0] != G.shape[1]:
        raise ValueError("G must be square")
    if np.abs(G - G.T).max() > 1e-8 * max(1.0, np.abs(G).max()):
        raise ValueError("G must be symmetric")
    k, q = np.linalg.eigh(0.5 * (G + G.T))
    order = np.argsort(-k, kind="stable")
    k, q = k[order], q[:, order]
    pivot = np.argmax(np.abs(q), axis=0)
    q = q * np.sign(q[pivot, np.arange(q.shape[1])])
    return q, k


# ---------------------------------------------------------------------------
# pipeline on a sample set
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class FitOptions:
    """Choices for :func:`fit_discrete` and :func:`fit_density`.

    basis : ``exact``, ``near``, ``legendre`` or ``hermite`` (sample-set fits).
    rotate : apply the rotation at all.
    iterations : number of rotate-and-refit rounds.
    rebuild : rebuild the basis for the rotated inputs.  With ``False`` the
        pre-rotation basis is applied to the rotated variable as is.
    """

    basis: str = "near"
    sigma: float = 0.0
    rotate: bool = True
    iterations: int = 1
    rebuild: bool = True
    near_mode: str = "pairwise"
    quadrature_level: int | None = None
    max_iter: int = 100_000

    def __post_init__(self):
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")


@dataclass
class FitResult:
    surrogate: Surrogate
    initial: Surrogate
    history: list = field(default_factory=list)


def _affine_for(kind: str, chi: np.ndarray):
    if kind == "legendre":
        lo, hi = chi.min(axis=0), chi.max(axis=0)
        return 0.5 * (lo + hi), 0.5 * (hi - lo)
    if kind == "hermite":
        return chi.mean(axis=0), chi.std(axis=0)
    return None, None


def _build(kind: str, S: SampleSet, d: int, p: int, near_mode: str):
    if kind == "exact":
        return gram_schmidt_discrete(S, d, p), None, None
    if kind == "near":
        return near_orthonormal(S, d, p, mode=near_mode), None, None
    if kind in ("legendre", "hermite"):
        fam = "uniform" if kind == "legendre" else "gaussian"
        shift, scale = _affine_for(kind, S.points)
        return classical_basis(fam, d, p), shift, scale
    raise BasisError(f"unknown basis kind {kind!r}; choose from {BASIS_KINDS}")


def _fit(basis, rotation, shift, scale, points, values, sigma, meta, max_iter=100_000) -> Surrogate:
    proto = Surrogate(basis, np.zeros(basis.size), rotation, shift, scale)
    A = assemble_measurement_matrix(basis, proto.to_basis_input(points))
    res = solve(RecoverySetup(A, values, sigma), max_iter)
    meta = dict(meta, M=int(A.shape[0]), sigma=float(sigma), iterations=res.iterations,
                converged=res.converged, residual_l2=res.residual_l2)
    return replace(proto, c=res.c, fit_meta=meta)


def fit_discrete(S: SampleSet, points, values, d: int, p: int,
                 options: FitOptions | None = None) -> FitResult:
    """Data-driven surrogate with optional sparsity-enhancing rotation.

    1. basis on the empirical measure of ``S``
    2. l1 fit on the training pairs ``(points, values)``
    3. gradient matrix of the fit over ``S``
    4. rotate ``S`` and the training inputs
    5. rebuild the basis on the rotated ``S`` and refit

    Steps 3-5 are repeated ``options.iterations`` times.
    """
    opt = options or FitOptions()
    points = np.atleast_2d(np.asarray(points, dtype=float))
    values = np.asarray(values, dtype=float).reshape(-1)
    if S.d != d or points.shape[1] != d:
        raise ValueError("sample set, training points and d disagree")
    if points.shape[0] != values.size:
        raise ValueError("one value per training point is required")
    basis, shift, scale = _build(opt.basis, S, d, p, opt.near_mode)
    q = np.eye(d)
    current = _fit(basis, q, shift, scale, points, values, opt.sigma,
                   {"basis": opt.basis, "round": 0}, opt.max_iter)
    initial = current
    history = []
    if not opt.rotate:
        return FitResult(current, initial, history)
    for it in range(1, opt.iterations + 1):
        G = gradient_matrix(current, S)
        q_step, k = rotation_from_gradient(G)
        q = q @ q_step
        history.append({"round": it, "eigenvalues": k.tolist()})
        rotated = S.transformed(q.T)
        if opt.rebuild or opt.basis in ("legendre", "hermite"):
            if opt.rebuild:
                basis, shift, scale = _build(opt.basis, rotated, d, p, opt.near_mode)
            else:
                # same classical family, range refreshed for the rotated variable
                shift, scale = _affine_for(opt.basis, rotated.points)
        current = _fit(basis, q, shift, scale, points, values, opt.sigma,
                       {"basis": opt.basis, "round": it, "rebuild": opt.rebuild}, opt.max_iter)
    return FitResult(current, initial, history)


# ---------------------------------------------------------------------------
# pipeline for a product density
# ---------------------------------------------------------------------------

_DENSITY_BASIS = {"gaussian", "uniform", "arcsine", "exponential"}


def fit_density(points, values, density: str | Sequence[str], d: int, p: int,
                options: FitOptions | None = None,
                rule: QuadratureRule | None = None) -> FitResult:
    """Surrogate for inputs with a known product density.

    The first fit uses the classical orthonormal family of the density.  The
    gradient matrix is integrated with a sparse-grid rule, and the basis for
    the rotated variable is orthonormalised against the pushed-forward rule.
    With ``options.rebuild=False`` the classical family is reused for the
    rotated variable (the cautionary baseline).
    """
    opt = options or FitOptions(basis="classical")
    kinds = (density,) * d if isinstance(density, str) else tuple(density)
    if len(kinds) != d or not set(kinds) <= _DENSITY_BASIS:
        raise ValueError(f"need one of {sorted(_DENSITY_BASIS)} per dimension")
    points = np.atleast_2d(np.asarray(points, dtype=float))
    values = np.asarray(values, dtype=float).reshape(-1)
    if rule is None:
        level = opt.quadrature_level if opt.quadrature_level is not None else p
        rule = smolyak_rule(list(kinds), d, level)
    if rule.exactness_degree < 2 * p:
        raise ValueError(f"quadrature exact to degree {rule.exactness_degree}, need {2 * p}")
    basis = classical_basis(kinds, d, p)
    q = np.eye(d)
    current = _fit(basis, q, None, None, points, values, opt.sigma,
                   {"basis": "classical", "round": 0}, opt.max_iter)
    initial = current
    history = []
    if not opt.rotate:
        return FitResult(current, initial, history)
    for it in range(1, opt.iterations + 1):
        G = gradient_matrix(current, rule)
        q_step, k = rotation_from_gradient(G)
        q = q @ q_step
        history.append({"round": it, "eigenvalues": k.tolist()})
        if opt.rebuild:
            basis = gram_schmidt_quadrature(rule, rotation=q.T, d=d, p=p)
        current = _fit(basis, q, None, None, points, values, opt.sigma,
                       {"basis": "classical", "round": it, "rebuild": opt.rebuild}, opt.max_iter)
    return FitResult(current, initial, history)
