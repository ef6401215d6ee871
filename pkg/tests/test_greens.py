"""Green-function evaluator vs independent oracles and lattice identities."""

import numpy as np
import pytest

from gffperc.greens import GreenOracle, green0_series, c_g

# classical lattice constants (closed-form / high-precision literature values):
# Watson's integral for the origin Green function on Z^3, and the return
# probability of simple random walk on Z^4.
G3_ORIGIN = 1.5163860591519780
P4_RETURN = 0.193201673224984


@pytest.fixture(scope="module")
def g3():
    return GreenOracle(3)


@pytest.fixture(scope="module")
def g4():
    return GreenOracle(4)


def test_origin_value_d3_against_counting_oracle(g3):
    # the counting oracle shares no code with the quadrature route
    v, err = green0_series()
    assert err < 1e-9
    assert abs(v - G3_ORIGIN) < 5e-11
    assert abs(g3.at([0, 0, 0]) - G3_ORIGIN) < 5e-12
    assert abs(g3.at([0, 0, 0]) - v) < 5e-11


def test_origin_value_d4(g4):
    g0 = g4.at([0, 0, 0, 0])
    # g(0) = 1 / (1 - p_return)
    assert abs(1.0 - 1.0 / g0 - P4_RETURN) < 1e-9


def test_counting_oracle_rejects_other_dimensions():
    with pytest.raises(ValueError):
        green0_series(d=4)


def test_recurrent_dimensions_rejected():
    with pytest.raises(ValueError):
        GreenOracle(2)


def test_symmetry_exact_under_signs_and_permutations(g3):
    rng = np.random.default_rng(7)
    for _ in range(20):
        x = rng.integers(-6, 7, size=3)
        base = g3.at(x)
        perm = rng.permutation(3)
        signs = rng.choice([-1, 1], size=3)
        assert g3.at(x[perm] * signs) == base  # canonicalization makes it exact


def test_batch_matches_scalar(g3, g4):
    rng = np.random.default_rng(11)
    for G in (g3, g4):
        X = rng.integers(-9, 10, size=(40, G.d))
        bv = G.values(X)
        sv = np.array([G.at(x) for x in X])
        assert np.max(np.abs(bv - sv)) < 1e-8


def test_discrete_harmonicity(g3, g4):
    """(I - P) g = delta_0: neighbor mean equals g - 1 at 0, g elsewhere."""
    for G in (g3, g4):
        d = G.d
        eye = np.eye(d, dtype=np.int64)
        pts = [np.zeros(d, dtype=np.int64), eye[0], eye[0] - eye[1], 3 * eye[0] + 2 * eye[1]]
        for x in pts:
            nbrs = np.vstack([x + eye, x - eye])
            mean = G.values(nbrs, allow_fit=False).mean()
            target = G.at(x) - (1.0 if not x.any() else 0.0)
            assert abs(mean - target) < 1e-9


def test_asymptotic_constant_at_distance_100(g3, g4):
    for G in (g3, g4):
        d = G.d
        pts = [np.zeros(d, dtype=np.int64) for _ in range(3)]
        pts[0][0] = 100
        pts[1][:] = int(round(100 / np.sqrt(d)))
        pts[2][0], pts[2][1] = 80, 60
        for x in pts:
            r = np.linalg.norm(x)
            val = G.values(x[None, :], allow_fit=False)[0]
            assert abs(val * r ** (d - 2) / c_g(d) - 1.0) < 0.02


def test_far_fit_matches_exact(g3):
    X = np.array([[150, 0, 0], [90, 90, 90], [120, -50, 30], [70, 70, 0]])
    fitted = g3.values(X)  # beyond exact_cutoff -> fitted law
    exact = g3.values(X, allow_fit=False)
    assert g3.far_fit_rel_error is not None and g3.far_fit_rel_error < 1e-4
    assert np.max(np.abs(fitted / exact - 1.0)) < 1e-5


def test_axis_table(g3):
    tab = g3.axis_table(128)
    assert abs(tab[0] - g3.at([0, 0, 0])) < 1e-8
    assert np.all(tab > 0)
    assert np.all(np.diff(tab) < 0)  # strictly decreasing along an axis


def test_matrix_gram(g3):
    rng = np.random.default_rng(3)
    A = rng.integers(-4, 5, size=(6, 3))
    B = rng.integers(-4, 5, size=(5, 3))
    M = g3.matrix(A, B)
    assert M.shape == (6, 5)
    for i in (0, 3):
        for j in (1, 4):
            assert abs(M[i, j] - g3.at(A[i] - B[j])) < 1e-8
    S = g3.matrix(A)
    assert np.allclose(S, S.T, atol=0)


def test_values_input_validation(g3):
    with pytest.raises(ValueError):
        g3.values(np.zeros((4, 2), dtype=int))
    with pytest.raises(ValueError):
        g3.at([1, 2])
