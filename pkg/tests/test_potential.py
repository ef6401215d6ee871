"""Equilibrium measure / capacity identities, killed vs free, MC cross-checks."""

import numpy as np
import pytest

from gffperc.greens import GreenOracle
from gffperc.lattice import Box, PointSet, box_around
from gffperc.potential import (
    CapacityReport,
    capacity,
    equilibrium_measure,
    escape_probability_mc,
    harmonic_escape,
    hitting_matrix,
    hitting_probability,
    inner_boundary_points,
    killed_green_matrix,
    variational_lower_bound,
)
from gffperc.rng import stream


@pytest.fixture(scope="module")
def g3():
    return GreenOracle(3)


def _point(*x):
    return PointSet(np.asarray([x], dtype=np.int64))


def test_single_point_capacity_is_reciprocal_green(g3):
    rep = capacity(_point(0, 0, 0), oracle=g3)
    assert abs(rep.value - 1.0 / g3.at([0, 0, 0])) < 1e-12
    assert rep.lower <= rep.value <= rep.upper


def test_killed_green_single_point():
    pts, src, G, info = killed_green_matrix(_point(5, -2, 7))
    assert G.shape == (1, 1) and abs(G[0, 0] - 1.0) < 1e-14


def test_killed_green_monotone_to_free(g3):
    prev = 0.0
    for r in (3, 6, 9):
        B = box_around(0, r, 3)
        pts, src, G, info = killed_green_matrix(B, sources=np.zeros((1, 3), dtype=int))
        j = np.flatnonzero((pts == 0).all(axis=1))[0]
        val = G[0, j]
        assert prev < val < g3.at([0, 0, 0])
        prev = val


def test_killed_green_matrix_symmetric():
    B = box_around(0, 3, 3)
    pts, src, G, info = killed_green_matrix(B)
    assert np.allclose(G, G.T, atol=1e-11)
    assert np.all(np.diag(G) >= 1.0 - 1e-12)  # at least one visit: the start


def test_free_equilibrium_cube(g3):
    K = box_around(0, 2, 3)
    eq = equilibrium_measure(K, oracle=g3)
    assert eq.potential_residual < 1e-8
    assert np.all(eq.weights >= 0)
    # support is exactly the inner boundary of the cube
    assert len(eq.points) == 5**3 - 3**3
    # corners escape easiest: corner weight strictly above face-centre weight
    w = {tuple(p): wt for p, wt in zip(eq.points, eq.weights)}
    assert w[(2, 2, 2)] > w[(2, 0, 0)] > 0


def test_inner_boundary_of_box():
    K = PointSet.from_box(box_around(0, 2, 3))
    bnd = inner_boundary_points(K)
    assert len(bnd) == 5**3 - 3**3
    assert np.all(np.abs(bnd).max(axis=1) == 2)


@pytest.mark.parametrize("d,rad_U", [(3, 7), (4, 3)])
def test_escape_route_matches_dense_killed_gram(d, rad_U):
    rng = stream(42, "escape-vs-dense", d)
    U = box_around(0, rad_U, d)
    # random small K inside U
    pts = rng.integers(-1, 2, size=(6, d))
    K = PointSet(pts)
    eq = equilibrium_measure(K, U=U)
    ptsU, srcK, GU, _ = killed_green_matrix(U, sources=K.coords)
    cols = {tuple(p): i for i, p in enumerate(ptsU)}
    M = GU[:, [cols[tuple(p)] for p in K.coords]]
    w = np.linalg.solve(M, np.ones(len(K)))
    assert np.max(np.abs(eq.weights - w)) < 1e-10
    assert abs(eq.capacity - w.sum()) < 1e-10
    # killed potential of the equilibrium measure is 1 on K
    pot = M @ eq.weights
    assert np.max(np.abs(pot - 1.0)) < 1e-10


def test_sweeping_identity():
    U = box_around(0, 9, 3)
    K = box_around(0, 2, 3)
    Kbig = box_around(0, 4, 3)
    eqK = equilibrium_measure(K, U=U)
    eqB = equilibrium_measure(Kbig, U=U)
    targets, H = hitting_matrix(K, U, starts=eqB.points)
    swept = eqB.weights @ H
    pos = {tuple(p): i for i, p in enumerate(eqK.points)}
    full = np.zeros(len(eqK.points))
    for j, t in enumerate(targets):
        full[pos[tuple(t)]] = swept[j]
    assert np.max(np.abs(full - eqK.weights)) < 1e-12


def test_hitting_matrix_rows_are_subprobabilities():
    U = box_around(0, 6, 3)
    K = box_around(0, 1, 3)
    starts = np.array([[3, 0, 0], [5, 5, 5], [1, 0, 0], [9, 9, 9]])
    targets, H = hitting_matrix(K, U, starts)
    sums = H.sum(axis=1)
    assert np.all((H >= -1e-14) & (H <= 1 + 1e-14))
    assert 0.3 < sums[0] <= 1.0  # near the target: substantial hit chance
    assert sums[1] < sums[0]  # corner of U: mostly exits
    # start on K itself: delta row at that target
    assert sums[2] == 1.0 and H[2, list(map(tuple, targets)).index((1, 0, 0))] == 1.0
    assert sums[3] == 0.0  # start outside U


def test_capacity_monotonicity(g3):
    K = box_around(0, 2, 3)
    K2 = box_around(0, 3, 3)
    U = box_around(0, 8, 3)
    U2 = box_around(0, 12, 3)
    c_free = capacity(K, oracle=g3).value
    c_free2 = capacity(K2, oracle=g3).value
    assert c_free < c_free2  # monotone in K
    cU = capacity(K, U=U).value
    cU2 = capacity(K, U=U2).value
    assert cU > cU2 > c_free  # killing helps escape; relaxes toward free


def test_capacity_sandwich_brackets(g3):
    rng = stream(3, "sandwich")
    pts = rng.integers(-3, 4, size=(25, 3))
    K = PointSet(pts)
    rep = capacity(K, oracle=g3)
    assert rep.lower <= rep.value <= rep.upper
    assert rep.lower > 0
    assert rep.upper / rep.lower < 3.0  # box-scale sets: bounds stay informative


def test_hitting_probability_far_field(g3):
    K = box_around(0, 2, 3)
    eq = equilibrium_measure(K, oracle=g3)
    for x in ([40, 0, 0], [30, 30, 0], [25, 25, 25]):
        hp = hitting_probability(eq, np.asarray([x]), g3)[0]
        direct = sum(
            g3.at(np.asarray(x) - p) * w for p, w in zip(eq.points, eq.weights)
        )
        assert abs(hp - direct) < 1e-8  # scalar vs batched quadrature routes
        assert 0 < hp < 1


def test_variational_bound(g3):
    K = box_around(0, 2, 3)
    eq = equilibrium_measure(K, oracle=g3)
    uni = variational_lower_bound(eq.points, np.ones(len(eq.points)), g3)
    at_eq = variational_lower_bound(eq.points, eq.weights, g3)
    assert uni <= eq.capacity + 1e-9
    assert abs(at_eq - eq.capacity) < 1e-8 * eq.capacity


def test_escape_field_conventions():
    U = box_around(0, 4, 3)
    K = _point(0, 0, 0)
    esc = harmonic_escape(U, K)
    assert esc.at(np.array([[0, 0, 0]]))[0] == 0.0
    assert esc.at(np.array([[99, 0, 0]]))[0] == 1.0  # outside bbox -> outside U
    inside = esc.at(np.array([[1, 0, 0], [4, 4, 4]]))
    assert 0 < inside[0] < inside[1] < 1.0


def test_mc_escape_contains_exact_prediction(g3):
    K = box_around(0, 2, 3)
    eq = equilibrium_measure(K, oracle=g3)
    start = np.array([8, 0, 0])
    pred = hitting_probability(eq, start[None, :], g3)[0]
    res = escape_probability_mc(
        K, start, n_walks=6000, seed=17, oracle=g3, escape_radius=64.0
    )
    assert res.p_lower <= pred <= res.p_upper
    assert res.bias_bound < 0.06
    assert res.p_upper - res.p_lower < 0.12  # interval is actually informative


def test_mc_escape_trivial_start_inside():
    res = escape_probability_mc(box_around(0, 1, 3), [0, 0, 0], n_walks=10, seed=0)
    assert res.p_lower == res.p_upper == 1.0


def test_input_validation(g3):
    with pytest.raises(ValueError):
        equilibrium_measure(box_around(0, 3, 3), U=box_around(0, 2, 3))  # K not in U
    with pytest.raises(ValueError):
        equilibrium_measure(PointSet(np.zeros((0, 3), dtype=np.int64), d=3), oracle=g3)
    with pytest.raises(ValueError):
        killed_green_matrix(box_around(0, 2, 3), sources=np.asarray([[9, 9, 9]]))


def test_capacity_report_validates_bounds():
    with pytest.raises(ValueError):
        CapacityReport(value=1.0, lower=2.0, upper=3.0, method="x")
