import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from apce.basis import PolynomialBasis, classical_basis, gram_schmidt_discrete
from apce.measure import SampleSet, gauss_rule_1d, sample_family, smolyak_rule, tensor_rule
from apce.multi_index import graded_lex_set
from apce.problems import kl_exponential, elliptic_target, sparse_monomial_target
from apce.rotation import (FitOptions, Surrogate, fit_density, fit_discrete, gradient_matrix,
                           load_surrogate, rotation_from_gradient, save_surrogate)
from apce.sparse_solver import relative_l2_error


def monomial_surrogate(d, p, coeffs_by_index):
    idx = graded_lex_set(d, p)
    c = np.zeros(idx.size)
    for alpha, v in coeffs_by_index.items():
        c[idx.position(alpha)] = v
    return Surrogate(PolynomialBasis(idx, np.eye(idx.size), "classical"), c, np.eye(d))


@pytest.fixture(scope="module")
def gauss2():
    rng = np.random.default_rng(21)
    return SampleSet(rng.standard_normal((4000, 2)))


@pytest.fixture(scope="module")
def antithetic2():
    # i.i.d. Gaussian draws together with their negatives: empirical mean exactly zero
    z = np.random.default_rng(22).standard_normal((2000, 2))
    return SampleSet(np.vstack([z, -z]))


# -- surrogate object -------------------------------------------------------------

def test_surrogate_validates_rotation():
    b = classical_basis("gaussian", 2, 1)
    with pytest.raises(ValueError):
        Surrogate(b, np.zeros(3), np.array([[1.0, 1.0], [0.0, 1.0]]))
    with pytest.raises(ValueError):
        Surrogate(b, np.zeros(4), np.eye(2))


def test_surrogate_evaluates_rotated_input():
    b = classical_basis("gaussian", 2, 1)
    c = math.cos(0.3)
    s = math.sin(0.3)
    q = np.array([[c, -s], [s, c]])
    sur = Surrogate(b, np.array([0.0, 1.0, 0.0]), q)
    x = np.array([[0.4, -1.1]])
    assert sur(x)[0] == pytest.approx((x @ q)[0, 0])


def test_surrogate_round_trip(tmp_path, gauss2):
    rng = np.random.default_rng(0)
    pts = gauss2.points[:30]
    res = fit_discrete(gauss2, pts, pts[:, 0] ** 2 + pts[:, 1], 2, 2, FitOptions(basis="exact"))
    save_surrogate(tmp_path / "s.json", res.surrogate)
    back = load_surrogate(tmp_path / "s.json")
    x = rng.standard_normal((5, 2))
    assert np.array_equal(back.predict(x), res.surrogate.predict(x))
    with pytest.raises(ValueError):
        Surrogate.from_dict({"format": "nope"})


# -- gradient matrix ------------------------------------------------------------------

def test_gradient_matrix_linear(gauss2):
    sur = monomial_surrogate(2, 1, {(1, 0): 1.0, (0, 1): 1.0})
    assert np.allclose(gradient_matrix(sur, gauss2), [[1, 1], [1, 1]], atol=1e-14)


def test_gradient_matrix_constant(gauss2):
    sur = monomial_surrogate(2, 1, {(0, 0): 3.0})
    assert not gradient_matrix(sur, gauss2).any()


def test_gradient_matrix_square_under_gauss_rule():
    sur = monomial_surrogate(1, 2, {(2,): 1.0})
    G = gradient_matrix(sur, gauss_rule_1d("gaussian", 3))
    assert G[0, 0] == pytest.approx(4.0, abs=1e-13)


def test_gradient_matrix_matches_finite_differences(gauss2):
    rng = np.random.default_rng(3)
    b = gram_schmidt_discrete(gauss2, 2, 3)
    sur = Surrogate(b, rng.standard_normal(b.size), np.eye(2))
    x = rng.standard_normal((10**4, 2))
    G = gradient_matrix(sur, SampleSet(x))
    h = 1e-5
    g = np.column_stack([(sur(x + h * e) - sur(x - h * e)) / (2 * h) for e in np.eye(2)])
    G_mc = g.T @ g / len(x)
    assert np.linalg.norm(G - G_mc) / np.linalg.norm(G) < 0.05
    assert np.allclose(G, G.T, atol=1e-12)
    assert np.linalg.eigvalsh(G).min() > -1e-10


# -- rotation from gradient -----------------------------------------------------------

def test_rotation_rank_one():
    q, k = rotation_from_gradient(np.array([[1.0, 1.0], [1.0, 1.0]]))
    assert np.allclose(k, [2.0, 0.0], atol=1e-14)
    assert np.allclose(q[:, 0], [1 / math.sqrt(2), 1 / math.sqrt(2)])


def test_rotation_identity_is_identity():
    q, k = rotation_from_gradient(np.eye(3))
    assert np.allclose(q, np.eye(3)) and np.allclose(k, 1.0)


def test_rotation_rejects_non_symmetric():
    with pytest.raises(ValueError):
        rotation_from_gradient(np.array([[1.0, 2.0], [0.0, 1.0]]))


@given(st.integers(2, 6), st.integers(0, 10**6), st.floats(0.1, 100.0))
def test_rotation_reconstruction_and_scaling(d, seed, lam):
    rng = np.random.default_rng(seed)
    y = rng.standard_normal((d, d))
    G = y @ y.T + 1e-3 * np.eye(d)
    q, k = rotation_from_gradient(G)
    assert np.linalg.norm(q @ np.diag(k) @ q.T - G) < 1e-10 * max(1.0, np.linalg.norm(G))
    assert np.all(np.diff(k) <= 0)
    assert np.all(q[np.argmax(np.abs(q), axis=0), np.arange(d)] > 0)
    # f -> lam f scales G by lam^2
    q2, k2 = rotation_from_gradient(lam**2 * G)
    assert np.allclose(k2, lam**2 * k, rtol=1e-9)
    gaps = np.diff(k) / k[0]
    if np.all(np.abs(gaps) > 1e-6):
        assert np.allclose(q2, q, atol=1e-6)


# -- sample-set pipeline --------------------------------------------------------------------

def test_linear_target_becomes_one_sparse(antithetic2):
    pts = antithetic2.points[:20]
    res = fit_discrete(antithetic2, pts, pts.sum(axis=1), 2, 2, FitOptions(basis="exact"))
    c = res.surrogate.c
    small = np.abs(c) < 1e-6 * np.linalg.norm(c)
    assert small.sum() == c.size - 1
    # f = sqrt(2) chi_1 and psi_1 = chi_1 / std(chi_1) on the sample
    chi1 = antithetic2.points @ res.surrogate.rotation[:, 0]
    assert abs(c[~small][0]) == pytest.approx(math.sqrt(2) * chi1.std(), rel=1e-10)


def test_single_basis_function_recovered(gauss2):
    b = gram_schmidt_discrete(gauss2, 2, 3)
    k = 7
    M = 2 * 3 * b.size // 10 + 1
    pts = gauss2.points[:M]
    vals = b.evaluate(pts)[:, k]
    res = fit_discrete(gauss2, pts, vals, 2, 3, FitOptions(basis="exact"))
    assert np.allclose(res.initial.c, np.eye(b.size)[k], atol=1e-8)
    test = gauss2.points[2000:]
    truth = b.evaluate(test)[:, k]
    assert res.surrogate.error(test, truth) <= res.initial.error(test, truth) + 1e-8


def test_fully_determined_rotation_keeps_coefficient_energy(gauss2):
    rng = np.random.default_rng(8)
    pts = gauss2.points[:10]
    vals = np.sin(pts[:, 0] + 0.5 * pts[:, 1]) + 0.3 * pts[:, 1] ** 2
    # N = 10 for d=2, p=3: the fit interpolates on both sides of the rotation
    res = fit_discrete(gauss2, pts, vals, 2, 3, FitOptions(basis="exact"))
    a, b = res.initial.c @ res.initial.c, res.surrogate.c @ res.surrogate.c
    assert abs(a - b) < 1e-6 * a
    assert not np.allclose(res.surrogate.rotation, np.eye(2))
    del rng


def test_pipeline_is_deterministic(gauss2):
    pts = gauss2.points[:15]
    vals = pts[:, 0] * pts[:, 1] + pts[:, 0]
    opt = FitOptions(basis="near", iterations=2)
    a = fit_discrete(gauss2, pts, vals, 2, 2, opt).surrogate.to_dict()
    b = fit_discrete(gauss2, pts, vals, 2, 2, opt).surrogate.to_dict()
    assert a == b
    assert len(fit_discrete(gauss2, pts, vals, 2, 2, opt).history) == 2


def test_fit_options_checked(gauss2):
    with pytest.raises(ValueError):
        FitOptions(iterations=0)
    with pytest.raises(ValueError):
        fit_discrete(gauss2, np.zeros((3, 3)), np.zeros(3), 2, 2)


def test_classical_baseline_without_rebuild_uses_same_family(gauss2):
    pts = gauss2.points[:25]
    vals = pts.sum(axis=1) ** 2
    res = fit_discrete(gauss2, pts, vals, 2, 2, FitOptions(basis="legendre", rebuild=False))
    assert res.surrogate.basis.provenance == "classical"
    assert res.surrogate.scale is not None


# -- density pipeline -------------------------------------------------------------------------

def test_density_identity_rotation_short_circuit():
    rng = np.random.default_rng(4)
    x = rng.standard_normal((30, 2))
    # G = diag(4, 1/4): the rotation is the identity
    vals = x[:, 0] ** 2 + 0.5 * x[:, 1]
    res = fit_density(x, vals, "gaussian", 2, 2, FitOptions(basis="classical"))
    assert np.allclose(res.surrogate.rotation, np.eye(2), atol=1e-12)
    assert np.allclose(res.surrogate.c, res.initial.c, atol=1e-8)


def test_density_rejects_weak_rule():
    x = np.zeros((5, 2))
    rule = tensor_rule([gauss_rule_1d("uniform", 2)] * 2)
    with pytest.raises(ValueError):
        fit_density(x, np.zeros(5), "uniform", 2, 2, rule=rule)
    with pytest.raises(ValueError):
        fit_density(x, np.zeros(5), "beta", 2, 2)


@pytest.mark.slow
def test_arcsine_reused_basis_is_worse_than_rebuilt():
    d, p, M = 16, 3, 200
    f = elliptic_target(kl_exponential(0.14, 0.8, d), 0.45)
    X = sample_family("arcsine", (3000, d), np.random.default_rng(0))
    y = f(X)
    rule = smolyak_rule("arcsine", d, p)
    rebuilt, reused = [], []
    for t in range(10):
        idx = np.random.default_rng([1, t, M]).choice(len(X), M, replace=False)
        mask = np.ones(len(X), dtype=bool)
        mask[idx] = False
        r1 = fit_density(X[idx], y[idx], "arcsine", d, p, FitOptions(basis="classical"), rule)
        r2 = fit_density(X[idx], y[idx], "arcsine", d, p, FitOptions(basis="classical", rebuild=False), rule)
        rebuilt.append(relative_l2_error(r1.surrogate(X[mask]), y[mask]))
        reused.append(relative_l2_error(r2.surrogate(X[mask]), y[mask]))
    assert np.median(reused) > np.median(rebuilt)


def test_laguerre_rotation_helps():
    d, p = 8, 3
    f = sparse_monomial_target(d, p, None, "decay", seed=21)
    X = sample_family("exponential", (3000, d), np.random.default_rng(0))
    y = f(X)
    rule = smolyak_rule("exponential", d, p)
    for M in (40, 80):
        before, after = [], []
        for t in range(10):
            idx = np.random.default_rng([1, t, M]).choice(len(X), M, replace=False)
            mask = np.ones(len(X), dtype=bool)
            mask[idx] = False
            r = fit_density(X[idx], y[idx], "exponential", d, p, FitOptions(basis="classical"), rule)
            before.append(relative_l2_error(r.initial(X[mask]), y[mask]))
            after.append(relative_l2_error(r.surrogate(X[mask]), y[mask]))
        assert np.median(after) <= np.median(before)
