import json
import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from numpy.polynomial import chebyshev, hermite_e, legendre

from apce.basis import (BasisError, PolynomialBasis, basis_gradient, classical_basis,
                        cross_validation_zeta, evaluate_basis, evaluate_monomials,
                        gram_schmidt_discrete, gram_schmidt_quadrature, load_basis,
                        near_orthonormal, save_basis, univariate_orthonormal)
from apce.measure import SampleSet, gauss_rule_1d, random_mixture, sample_gaussian_mixture, tensor_rule
from apce.multi_index import graded_lex_set


def gram_residual(basis, m):
    return np.abs(basis.gram(m) - np.eye(basis.size)).max()


# -- monomials and evaluation ---------------------------------------------------

def test_monomials_at_origin():
    v = evaluate_monomials(graded_lex_set(3, 2), np.zeros(3))
    assert v[0] == 1 and not v[1:].any()


def test_monomials_2_3():
    v = evaluate_monomials(graded_lex_set(2, 2), np.array([2.0, 3.0]))
    assert v.tolist() == [1, 2, 3, 4, 6, 9]


def test_monomial_unit_coordinate():
    idx = graded_lex_set(3, 2)
    v = evaluate_monomials(idx, np.array([0.3, 1.0, -2.0]))
    assert v[idx.position((0, 1, 0))] == 1.0


def test_monomial_overflow_surfaces():
    with pytest.raises(BasisError):
        evaluate_monomials(graded_lex_set(1, 3), np.array([1e120]))


def test_hermite_values_at_zero():
    b = classical_basis("gaussian", 1, 4)
    v = evaluate_basis(b, np.zeros(1))
    ref = [hermite_e.hermeval(0.0, np.eye(5)[k]) / math.sqrt(math.factorial(k)) for k in range(5)]
    assert np.allclose(v, ref, atol=1e-15)
    assert v[2] == pytest.approx(-1 / math.sqrt(2))


def test_first_entry_is_one(gm3):
    b = gram_schmidt_discrete(gm3, 3, 3)
    assert np.allclose(b.evaluate(gm3.points[:50])[:, 0], 1.0, atol=1e-12)


def test_basis_type_invariants():
    idx = graded_lex_set(1, 1)
    with pytest.raises(BasisError):
        PolynomialBasis(idx, np.array([[1.0, 1.0], [0.0, 1.0]]), "exact_discrete")
    with pytest.raises(BasisError):
        PolynomialBasis(idx, np.array([[1.0, 0.0], [1.0, 0.0]]), "exact_discrete")
    with pytest.raises(BasisError):
        PolynomialBasis(idx, np.eye(2), "made_up")


# -- classical families -----------------------------------------------------------

@pytest.mark.parametrize("kind,to_poly,norms", [
    ("gaussian", lambda c: hermite_e.herme2poly(c), lambda k: math.sqrt(math.factorial(k))),
    ("uniform", lambda c: legendre.leg2poly(c), lambda k: 1 / math.sqrt(2 * k + 1)),
    ("arcsine", lambda c: chebyshev.cheb2poly(c), lambda k: 1.0 if k == 0 else 1 / math.sqrt(2)),
])
def test_univariate_tables_match_numpy(kind, to_poly, norms):
    table = univariate_orthonormal(kind, 6)
    for k in range(7):
        ref = to_poly(np.eye(7)[k]) / norms(k)
        assert np.allclose(table[k, : k + 1], ref, atol=1e-10)


def test_laguerre_table():
    table = univariate_orthonormal("exponential", 5)
    from scipy.special import genlaguerre
    for k in range(6):
        # orthonormal Laguerre is (-1)^k L_k under the positive-leading-coefficient convention
        ref = (-1) ** k * np.asarray(genlaguerre(k, 0).coeffs[::-1])
        assert np.allclose(table[k, : k + 1], ref, atol=1e-10)


# -- exact bases on samples -------------------------------------------------------

def test_hermite_limit_on_large_gaussian_sample():
    rng = np.random.default_rng(11)
    s = SampleSet(rng.standard_normal((10**6, 1)))
    b = gram_schmidt_discrete(s, 1, 3)
    ref = classical_basis("gaussian", 1, 3).coeffs
    dev = np.abs(b.coeffs - ref).max()
    assert dev < 20 / math.sqrt(s.n)
    assert gram_residual(b, s) < 1e-10


def test_two_point_set():
    s = SampleSet(np.array([[-1.0], [1.0]]))
    b = gram_schmidt_discrete(s, 1, 1)
    assert np.allclose(b.coeffs, np.eye(2), atol=1e-15)


def test_constant_row_and_positive_diagonal(gm3):
    b = gram_schmidt_discrete(gm3, 3, 3)
    assert b.coeffs[0, 0] == pytest.approx(1.0, abs=1e-14)
    assert np.all(np.diag(b.coeffs) > 0)
    assert gram_residual(b, gm3) < 1e-8
    assert not np.triu(b.coeffs, 1).any()


def test_too_few_or_degenerate_samples():
    with pytest.raises(BasisError):
        gram_schmidt_discrete(SampleSet(np.zeros((3, 2))), 2, 2)
    rng = np.random.default_rng(1)
    line = rng.standard_normal(100)
    with pytest.raises(BasisError, match="more samples|singular|definite"):
        gram_schmidt_discrete(SampleSet(np.column_stack([line, 2 * line])), 2, 2)


# -- quadrature bases --------------------------------------------------------------

def test_quadrature_legendre_and_chebyshev():
    for kind in ("uniform", "arcsine"):
        rule = tensor_rule([gauss_rule_1d(kind, 4)] * 2)
        b = gram_schmidt_quadrature(rule, d=2, p=3)
        assert np.allclose(b.coeffs, classical_basis(kind, 2, 3).coeffs, atol=1e-10)


def test_quadrature_rotation_45_degrees_unitary():
    rule = tensor_rule([gauss_rule_1d("gaussian", 4)] * 2)
    c = math.cos(math.pi / 4)
    q = np.array([[c, -c], [c, c]])
    rot = gram_schmidt_quadrature(rule, rotation=q, d=2, p=2)
    pushed = rule.transformed(q)
    assert gram_residual(rot, pushed) < 1e-10
    # U = <Phi(chi) Psi(xi)^T> with chi the pushed variable and xi the original
    herm = classical_basis("gaussian", 2, 2)
    phi = rot.evaluate(pushed.nodes)
    psi = herm.evaluate(rule.nodes)
    U = (phi * rule.weights[:, None]).T @ psi
    assert np.linalg.norm(U @ U.T - np.eye(6), 2) < 1e-8


def test_quadrature_exactness_checked():
    rule = tensor_rule([gauss_rule_1d("uniform", 2)] * 2)
    with pytest.raises(BasisError):
        gram_schmidt_quadrature(rule, d=2, p=2)
    with pytest.raises(BasisError):
        gram_schmidt_quadrature(tensor_rule([gauss_rule_1d("uniform", 3)] * 2), rotation=np.zeros((2, 2)), d=2, p=2)


# -- cross-validated tolerances and near-orthonormal bases ---------------------------

def test_zeta_identical_halves(gm3):
    half = gm3.subset(np.arange(1000))
    z = cross_validation_zeta(half, half, 3, 2)
    assert np.abs(z).max() < 1e-10


def test_zeta_shrinks_with_samples():
    spec = random_mixture(2, 3, seed=3)
    means = []
    for n in (10**3, 10**4, 10**5):
        vals = []
        for seed in range(3):
            s = sample_gaussian_mixture(spec, 2 * n, seed=seed)
            s1, s2 = s.split()
            vals.append(cross_validation_zeta(s1, s2, 2, 2).mean())
        means.append(np.mean(vals))
    assert means[0] > means[1] > means[2]


def test_near_zero_zeta_is_exact(gm3):
    ex = gram_schmidt_discrete(gm3, 3, 2)
    nb = near_orthonormal(gm3, 3, 2, zeta=np.zeros((10, 10)))
    assert np.abs(nb.coeffs - ex.coeffs).max() < 1e-10


def test_near_identical_halves_is_exact(gm3):
    ex = gram_schmidt_discrete(gm3, 3, 2)
    nb = near_orthonormal(gm3, 3, 2, halves=(gm3, gm3))
    assert np.abs(nb.coeffs - ex.coeffs).max() < 1e-8


@pytest.mark.parametrize("mode", ["pairwise", "grouped"])
def test_near_constraints_and_norms(gm3, mode):
    d, p = 3, 3
    ex = gram_schmidt_discrete(gm3, d, p)
    s1, s2 = gm3.split()
    zeta = cross_validation_zeta(s1, s2, d, p)
    nb = near_orthonormal(gm3, d, p, mode=mode, zeta=zeta)
    assert nb.provenance == "near_orthonormal"
    assert np.all(np.linalg.norm(nb.coeffs, axis=1) <= np.linalg.norm(ex.coeffs, axis=1) + 1e-12)
    g = nb.gram(gm3)
    diag_dev = np.abs(np.diag(g) - 1.0)
    assert np.all(diag_dev <= np.diag(zeta) + 1e-10)
    lower = np.tril(np.abs(g), -1)
    if mode == "pairwise":
        assert np.all(lower <= np.tril(zeta, -1) + 1e-10)
    # the relaxed basis is not the exact one
    assert np.abs(nb.coeffs - ex.coeffs).max() > 1e-6


def test_near_rejects_unknown_mode(gm3):
    with pytest.raises(BasisError):
        near_orthonormal(gm3, 3, 2, mode="other")


# -- gradients ---------------------------------------------------------------------

def test_gradient_of_constant_is_zero(gm3):
    b = gram_schmidt_discrete(gm3, 3, 2)
    g = b.gradient.evaluate(gm3.points[:20])
    assert not g[:, 0, :].any()


def test_gradient_matches_finite_differences(gm3):
    b = near_orthonormal(gm3, 3, 3)
    rng = np.random.default_rng(0)
    x = rng.standard_normal((10, 3))
    g = b.gradient.evaluate(x)
    h = 1e-5
    for j in range(3):
        e = np.zeros(3)
        e[j] = h
        fd = (b.evaluate(x + e) - b.evaluate(x - e)) / (2 * h)
        scale = np.maximum(np.abs(g[:, :, j]), 1.0)
        assert np.max(np.abs(fd - g[:, :, j]) / scale) < 1e-6


def test_hermite2_derivative():
    b = classical_basis("gaussian", 1, 2)
    g = b.gradient.evaluate(np.array([[0.7]]))[0, 2, 0]
    fd = (b.evaluate(np.array([0.7 + 1e-5]))[2] - b.evaluate(np.array([0.7 - 1e-5]))[2]) / 2e-5
    assert g == pytest.approx(math.sqrt(2) * 0.7, rel=1e-12)
    assert g == pytest.approx(fd, rel=1e-8)


def test_product_monomial_derivative():
    idx = graded_lex_set(2, 2)
    coeffs = np.eye(idx.size)
    b = PolynomialBasis(idx, coeffs, "classical")
    k = idx.position((1, 1))
    x = np.array([[0.3, -1.7]])
    assert b.gradient.evaluate(x)[0, k, 0] == pytest.approx(-1.7)
    assert b.gradient.directional(x, np.eye(idx.size)[k])[0].tolist() == pytest.approx([-1.7, 0.3])


def test_gradient_needs_degree_one():
    with pytest.raises(BasisError):
        basis_gradient(classical_basis("uniform", 2, 0))


# -- serialisation ------------------------------------------------------------------

def test_round_trip_is_bit_identical(tmp_path, gm3):
    b = near_orthonormal(gm3, 3, 2)
    save_basis(tmp_path / "b.json", b)
    back = load_basis(tmp_path / "b.json")
    assert np.array_equal(back.coeffs, b.coeffs)
    assert back.provenance == b.provenance
    save_basis(tmp_path / "c.json", back)
    assert (tmp_path / "b.json").read_text() == (tmp_path / "c.json").read_text()


def test_load_rejects_foreign_files(tmp_path):
    (tmp_path / "x.json").write_text(json.dumps({"format": "other"}))
    with pytest.raises(BasisError):
        load_basis(tmp_path / "x.json")


# -- properties -----------------------------------------------------------------------

@given(st.integers(1, 3), st.integers(1, 3), st.integers(0, 10**6))
def test_exact_basis_properties(d, p, seed):
    rng = np.random.default_rng(seed)
    q, _ = np.linalg.qr(rng.standard_normal((d, d)))
    s = SampleSet(rng.standard_normal((400, d)) * rng.uniform(0.5, 2.0, d) @ q)
    b = gram_schmidt_discrete(s, d, p)
    assert gram_residual(b, s) < 1e-8
    assert not np.triu(b.coeffs, 1).any()
    s1, s2 = s.split()
    assert np.all(cross_validation_zeta(s1, s2, d, p) >= 0)
