"""Killed Green functions, equilibrium measures, and capacities.

Conventions
-----------
* ``g_U(x, y)`` — expected number of visits to ``y`` started at ``x`` before
  leaving the finite set ``U``; equals ``(I - P_U)^{-1}`` restricted to U, so
  ``g_{{0}}(0, 0) = 1`` for the single-point set.
* The equilibrium measure ``e_{K,U}`` of ``K ⊂ U`` puts mass
  ``P_x[exit U before returning to K] / (2d)``-averaged-over-neighbours on
  each ``x ∈ K``; its total mass is the capacity and its killed potential is
  identically 1 on K.  ``U = None`` means the whole (transient) lattice.

Routes
------
Small systems are factored exactly (dense Gram / sparse LU); the harmonic
escape route reduces a killed equilibrium measure to a single sparse solve.
Free-lattice capacity reports carry *certified sandwich bounds* from the
identity ``|K| = sum_y e(y) * colsum_y`` (valid because e >= 0), so a
capacity is never reported without an interval around it.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import solve as dense_solve
from scipy.sparse import csr_matrix
from scipy.sparse.linalg import cg as sparse_cg
from scipy.sparse.linalg import splu

from .greens import GreenOracle, c_g
from .lattice import Box, PointSet
from .rng import stream
from .stats import wilson_interval

__all__ = [
    "EquilibriumResult",
    "CapacityReport",
    "EscapeField",
    "MCEscapeResult",
    "inner_boundary_points",
    "killed_green_matrix",
    "harmonic_escape",
    "equilibrium_measure",
    "capacity",
    "hitting_probability",
    "hitting_matrix",
    "variational_energy",
    "variational_lower_bound",
    "escape_probability_mc",
]

_DENSE_GRAM_LIMIT = 6000  # boundary points in a dense Gram solve
_PAIR_LIMIT = int(4e7)  # entries of any dense rectangular Green block
_SPLU_LIMIT = 80_000  # unknowns handed to the direct sparse factorization


def _as_pointset(S) -> PointSet:
    if isinstance(S, PointSet):
        return S
    if isinstance(S, Box):
        return PointSet.from_box(S)
    return PointSet(np.asarray(S, dtype=np.int64))


# ---------------------------------------------------------------------------
# sparse killed Laplacian on a boolean grid


def _grid_system(solve_mask: np.ndarray):
    """(I - P) restricted to True cells (Dirichlet outside); csr + index grid."""
    d = solve_mask.ndim
    n = int(solve_mask.sum())
    idx = -np.ones(solve_mask.shape, dtype=np.int64)
    idx[solve_mask] = np.arange(n)
    rows, cols = [], []
    for ax in range(d):
        sl_a = [slice(None)] * d
        sl_b = [slice(None)] * d
        sl_a[ax] = slice(None, -1)
        sl_b[ax] = slice(1, None)
        a, b = idx[tuple(sl_a)], idx[tuple(sl_b)]
        ok = (a >= 0) & (b >= 0)
        rows.extend([a[ok], b[ok]])
        cols.extend([b[ok], a[ok]])
    if rows:
        r = np.concatenate(rows)
        c = np.concatenate(cols)
    else:  # no interior bonds at all
        r = c = np.zeros(0, dtype=np.int64)
    off = csr_matrix((np.full(len(r), -1.0 / (2 * d)), (r, c)), shape=(n, n))
    eye = csr_matrix((np.ones(n), (np.arange(n), np.arange(n))), shape=(n, n))
    return eye + off, idx


def _neighbor_out_count(mask: np.ndarray) -> np.ndarray:
    """Per cell: number of lattice neighbours outside `mask` (grid edge counts)."""
    d = mask.ndim
    out = np.zeros(mask.shape, dtype=np.int64)
    padded = np.pad(mask, 1, constant_values=False)
    core = tuple(slice(1, -1) for _ in range(d))
    for ax in range(d):
        for s in (1, -1):
            shifted = np.roll(padded, s, axis=ax)[core]
            out += ~shifted
    return out


def _solve_spd(A, B, rtol: float = 1e-12):
    """Solve SPD sparse system for one or many right-hand sides.

    Returns (X, info) where info records method and worst residual.
    """
    n = A.shape[0]
    B = np.atleast_2d(B.T).T  # ensure (n, k)
    if n == 0:
        return np.zeros_like(B), {"solver": "empty", "residual": 0.0}
    if n <= _SPLU_LIMIT:
        lu = splu(A.tocsc())
        X = lu.solve(B)
        method = "splu"
    else:
        X = np.empty_like(B)
        for j in range(B.shape[1]):
            x, flag = sparse_cg(A, B[:, j], rtol=rtol, atol=0.0, maxiter=20 * n)
            if flag != 0:
                raise RuntimeError(f"CG failed to converge (flag {flag})")
            X[:, j] = x
        method = "cg"
    res = float(np.max(np.abs(A @ X - B))) if n else 0.0
    return X, {"solver": method, "residual": res}


# ---------------------------------------------------------------------------
# killed Green matrix (exact, small systems)


def killed_green_matrix(U, sources=None):
    """Dense killed Green block ``g_U(x, y)`` for x in `sources`, y in U.

    Returns ``(points, sources, G)`` with ``G[i, j] = g_U(sources[i], points[j])``;
    `points` lists U in grid (lexicographic) order.  Exact sparse-LU route,
    intended for moderate systems (guarded by size limits).
    """
    Ups = _as_pointset(U)
    box = Ups.bbox()
    mask = Ups.mask_in(box)
    A, idx = _grid_system(mask)
    pts = np.argwhere(mask) + np.asarray(box.lo)
    n = len(pts)
    if sources is None:
        src = pts
    else:
        src = np.atleast_2d(np.asarray(sources, dtype=np.int64))
        if not bool(np.all(Ups.contains(src))):
            raise ValueError("sources must lie inside U")
    if n * len(src) > _PAIR_LIMIT:
        raise ValueError("killed Green block too large; use harmonic_escape routes")
    # g_U(x, .) solves row systems; by symmetry solve with unit vectors at x
    rel = src - np.asarray(box.lo)
    src_idx = idx[tuple(rel.T)]
    E = np.zeros((n, len(src)))
    E[src_idx, np.arange(len(src))] = 1.0
    X, info = _solve_spd(A, E)
    return pts, src, X.T, info


# ---------------------------------------------------------------------------
# harmonic escape potential u(y) = P_y[exit U before hitting K]


@dataclass
class EscapeField:
    """Escape potential on U: 0 on K, solved on U \\ K, 1 outside U."""

    box: Box
    u: np.ndarray  # float over box, filled with boundary conventions
    inside: np.ndarray  # bool over box: solved region U \\ K
    info: dict

    def at(self, pts) -> np.ndarray:
        pts = np.atleast_2d(np.asarray(pts, dtype=np.int64))
        vals = np.ones(len(pts))
        inb = self.box.contains(pts)
        rel = pts[inb] - np.asarray(self.box.lo)
        vals[inb] = self.u[tuple(rel.T)]
        return vals


def harmonic_escape(U, K, rtol: float = 1e-12) -> EscapeField:
    """Solve the Dirichlet problem for escaping U before hitting K."""
    Ups, Kps = _as_pointset(U), _as_pointset(K)
    if not bool(np.all(Ups.contains(Kps.coords))):
        raise ValueError("K must be contained in U")
    box = Ups.bbox()
    Umask = Ups.mask_in(box)
    Kmask = Kps.mask_in(box)
    solve_mask = Umask & ~Kmask
    A, idx = _grid_system(solve_mask)
    d = box.d
    # RHS: each neighbour outside U contributes (value 1) / (2d); neighbours
    # in K contribute 0; the grid boundary is outside U by bbox construction.
    n_out = _neighbor_out_count(Umask)[solve_mask]
    b = n_out / (2.0 * d)
    x, info = _solve_spd(A, b, rtol=rtol)
    u = np.where(Umask, 0.0, 1.0)
    u[solve_mask] = x[:, 0]
    return EscapeField(box=box, u=u, inside=solve_mask, info=info)


# ---------------------------------------------------------------------------
# equilibrium measures


@dataclass
class EquilibriumResult:
    points: np.ndarray  # (m, d) support candidates (weights may be 0)
    weights: np.ndarray  # (m,)
    capacity: float
    method: str
    potential_residual: float | None = None  # max |G e - 1| over K (free route)
    meta: dict = field(default_factory=dict)


def inner_boundary_points(K: PointSet) -> np.ndarray:
    """Points of K with at least one lattice neighbour outside K."""
    d = K.d
    cnt = np.zeros(len(K), dtype=np.int64)
    for ax in range(d):
        for s in (1, -1):
            nb = K.coords.copy()
            nb[:, ax] += s
            cnt += K.contains(nb)
    return K.coords[cnt < 2 * d]


def _free_equilibrium(K: PointSet, oracle: GreenOracle, check: bool) -> EquilibriumResult:
    bnd = inner_boundary_points(K)
    m = len(bnd)
    if m > _DENSE_GRAM_LIMIT:
        raise ValueError(
            f"boundary has {m} points; dense Gram route is limited to "
            f"{_DENSE_GRAM_LIMIT} (use the capfast solvers)"
        )
    M = oracle.matrix(bnd)
    w = dense_solve(M, np.ones(m), assume_a="pos")
    wmin = float(w.min())
    if wmin < -1e-8 * max(1.0, float(w.max())):
        raise RuntimeError(f"equilibrium weights went negative ({wmin}); system ill-posed")
    w = np.maximum(w, 0.0)
    residual = None
    colsums = None
    if check:
        nK = len(K)
        if nK * m <= _PAIR_LIMIT:
            GKb = oracle.matrix(K.coords, bnd)
            pot = GKb @ w
            residual = float(np.max(np.abs(pot - 1.0)))
            colsums = GKb.sum(axis=0)
        else:
            ridx = stream(0, "equilibrium-check").choice(nK, size=4000, replace=False)
            pot = oracle.matrix(K.coords[ridx], bnd) @ w
            residual = float(np.max(np.abs(pot - 1.0)))
    return EquilibriumResult(
        points=bnd,
        weights=w,
        capacity=float(w.sum()),
        method="dense-gram",
        potential_residual=residual,
        meta={} if colsums is None else {"colsums": colsums, "n_K": len(K)},
    )


def _killed_equilibrium(K: PointSet, U, rtol: float) -> EquilibriumResult:
    esc = harmonic_escape(U, K, rtol=rtol)
    d = K.d
    acc = np.zeros(len(K))
    for ax in range(d):
        for s in (1, -1):
            nb = K.coords.copy()
            nb[:, ax] += s
            acc += esc.at(nb)
    w = acc / (2.0 * d)
    return EquilibriumResult(
        points=K.coords.copy(),
        weights=w,
        capacity=float(w.sum()),
        method="killed-escape",
        meta=dict(esc.info),
    )


def equilibrium_measure(K, U=None, oracle: GreenOracle | None = None,
                        check: bool = True, rtol: float = 1e-12) -> EquilibriumResult:
    """Equilibrium measure of K relative to U (None = whole lattice)."""
    Kps = _as_pointset(K)
    if len(Kps) == 0:
        raise ValueError("K is empty")
    if U is None:
        if oracle is None:
            oracle = GreenOracle(Kps.d)
        return _free_equilibrium(Kps, oracle, check)
    return _killed_equilibrium(Kps, U, rtol)


# ---------------------------------------------------------------------------
# capacity reports with sandwich bounds


@dataclass
class CapacityReport:
    value: float
    lower: float
    upper: float
    method: str
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        slack = 1e-9 * max(1.0, abs(self.value))
        if not (self.lower - slack <= self.value <= self.upper + slack):
            raise ValueError(
                f"inconsistent capacity bounds: {self.lower} <= {self.value} "
                f"<= {self.upper} fails"
            )


def capacity(K, U=None, oracle: GreenOracle | None = None) -> CapacityReport:
    """Capacity of K relative to U, with certified bounds where available.

    Free-lattice route: sandwich ``|K|/max_col <= cap <= |K|/min_col`` from
    column sums of the Green block over K x support.  Killed route: interval
    reflects the linear-solver residual only (see `meta`).
    """
    Kps = _as_pointset(K)
    eq = equilibrium_measure(Kps, U=U, oracle=oracle)
    if U is None:
        if "colsums" in eq.meta:
            cs = eq.meta["colsums"]
            nK = eq.meta["n_K"]
        else:
            if oracle is None:
                oracle = GreenOracle(Kps.d)
            cs = oracle.matrix(Kps.coords, eq.points).sum(axis=0)
            nK = len(Kps)
        # pad by a few ulps so the floating-point interval genuinely contains
        lower = nK / float(cs.max()) * (1.0 - 1e-11)
        upper = nK / float(cs.min()) * (1.0 + 1e-11)
        meta = {"potential_residual": eq.potential_residual}
        return CapacityReport(eq.capacity, lower, upper, eq.method, meta)
    res = eq.meta.get("residual", 0.0)
    pad = 10.0 * max(res, 1e-14) * len(eq.points)
    return CapacityReport(
        eq.capacity,
        max(eq.capacity - pad, 0.0),
        eq.capacity + pad,
        eq.method,
        {"solver_residual": res, "bound_type": "solver-residual"},
    )


# ---------------------------------------------------------------------------
# potentials, hitting kernels, energies


def hitting_probability(eq: EquilibriumResult, X, oracle: GreenOracle) -> np.ndarray:
    """P_x[hit K (before leaving U)] = killed/free potential of e at x.

    Only valid with a free-lattice equilibrium result (the Green oracle is
    the free one); for killed problems use `hitting_matrix`.
    """
    X = np.atleast_2d(np.asarray(X, dtype=np.int64))
    return oracle.matrix(X, eq.points) @ eq.weights


def hitting_matrix(K, U, starts):
    """Rows: P_x[hit K before leaving U, entry point = y] over targets y.

    Returns ``(targets, H)`` where targets are the points of K adjacent to
    U \\ K and ``H[i, j] = P_{starts[i]}[X_{H_K} = targets[j], H_K < T_U]``.
    Starts inside K get a delta row; starts outside U get zeros.
    """
    Ups, Kps = _as_pointset(U), _as_pointset(K)
    box = Ups.bbox()
    Umask, Kmask = Ups.mask_in(box), Kps.mask_in(box)
    solve_mask = Umask & ~Kmask
    A, idx = _grid_system(solve_mask)
    n = int(solve_mask.sum())
    d = box.d

    # targets: K points with a neighbour in the solve region
    tcnt = np.zeros(len(Kps), dtype=np.int64)
    nb_all = []
    for ax in range(d):
        for s in (1, -1):
            nb = Kps.coords.copy()
            nb[:, ax] += s
            nb_all.append(nb)
    solve_ps = PointSet.from_mask(box, solve_mask) if n else None
    for nb in nb_all:
        if solve_ps is not None:
            tcnt += solve_ps.contains(nb)
    targets = Kps.coords[tcnt > 0] if n else Kps.coords[:0]
    m = len(targets)
    if n * m > _PAIR_LIMIT:
        raise ValueError("hitting matrix too large")

    # RHS column per target: (1/2d) * adjacency from solve cells
    R = np.zeros((n, m))
    lo = np.asarray(box.lo)
    for j, y in enumerate(targets):
        for ax in range(d):
            for s in (1, -1):
                p = y.copy()
                p[ax] += s
                rel = p - lo
                if np.all(rel >= 0) and np.all(rel < box.shape):
                    k = idx[tuple(rel)]
                    if k >= 0:
                        R[k, j] += 1.0 / (2 * d)
    H_solve, info = _solve_spd(A, R) if n else (np.zeros((0, m)), {})

    starts = np.atleast_2d(np.asarray(starts, dtype=np.int64))
    H = np.zeros((len(starts), m))
    in_K = Kps.contains(starts)
    tview = {tuple(t): j for j, t in enumerate(targets)}
    for i, x in enumerate(starts):
        if in_K[i]:
            j = tview.get(tuple(x))
            if j is not None:
                H[i, j] = 1.0
            # starts in the interior of K never appear as entry points, but
            # H_K = 0 there; report the point itself when it is a target
        elif bool(Ups.contains(x[None, :])[0]):
            rel = x - lo
            H[i] = H_solve[idx[tuple(rel)]]
    return targets, H


def variational_energy(points, weights, oracle: GreenOracle) -> float:
    """Energy E(nu) = sum_{x,y} g(x - y) nu(x) nu(y)."""
    pts = np.atleast_2d(np.asarray(points, dtype=np.int64))
    w = np.asarray(weights, dtype=float)
    return float(w @ oracle.matrix(pts) @ w)


def variational_lower_bound(points, weights, oracle: GreenOracle) -> float:
    """cap(K) >= (nu(K))^2 / E(nu) for any measure nu supported on K."""
    E = variational_energy(points, weights, oracle)
    s = float(np.sum(weights))
    return s * s / E


# ---------------------------------------------------------------------------
# Monte-Carlo hitting probability with a certified escape radius


@dataclass
class MCEscapeResult:
    p_lower: float
    p_upper: float
    n_walks: int
    hits: int
    unresolved: int
    bias_bound: float
    escape_radius: float
    meta: dict = field(default_factory=dict)


def escape_probability_mc(
    K,
    start,
    n_walks: int = 20000,
    seed: int = 0,
    oracle: GreenOracle | None = None,
    escape_radius: float | None = None,
    max_steps: int | None = None,
    chunk: int = 4096,
) -> MCEscapeResult:
    """Estimate P_start[hit K] by simulation, certified against truncation.

    Walks stopping at Euclidean distance ``escape_radius`` from the centre of
    K are counted as escaped; the chance any of them would still return is
    bounded by ``cap(K) * c_g * dist^{2-d} * 1.05`` and folded into the
    reported interval, as are walks exceeding ``max_steps`` (unresolved).
    The interval combines a 99% Wilson score with these worst-case biases.
    """
    Kps = _as_pointset(K)
    d = Kps.d
    start = np.asarray(start, dtype=np.int64)
    if bool(Kps.contains(start[None, :])[0]):
        return MCEscapeResult(1.0, 1.0, 0, 0, 0, 0.0, 0.0, {"trivial": "start in K"})
    if oracle is None:
        oracle = GreenOracle(d)
    cap_rep = capacity(Kps, oracle=oracle)
    center = Kps.coords.mean(axis=0)
    rad_K = float(np.max(np.linalg.norm(Kps.coords - center, axis=1)))
    r0 = float(np.linalg.norm(start - center))
    if escape_radius is None:
        escape_radius = max(4.0 * (rad_K + 1.0), 2.0 * r0, 32.0)
    dist = max(escape_radius - rad_K, 1.0)
    bias = min(1.0, cap_rep.upper * c_g(d) * dist ** (2 - d) * 1.05)
    if max_steps is None:
        max_steps = int(40 * d * escape_radius**2)

    hits = 0
    unresolved = 0
    done = 0
    widx = 0
    while done < n_walks:
        b = min(chunk, n_walks - done)
        rng = stream(seed, "escape-mc", widx)
        widx += 1
        pos = np.tile(start, (b, 1))
        alive = np.ones(b, dtype=bool)
        for _ in range(max_steps):
            na = int(alive.sum())
            if na == 0:
                break
            ax = rng.integers(0, d, size=na)
            sg = rng.integers(0, 2, size=na) * 2 - 1
            sub = pos[alive]
            sub[np.arange(na), ax] += sg
            pos[alive] = sub
            hit_now = Kps.contains(sub)
            far_now = np.linalg.norm(sub - center, axis=1) >= escape_radius
            hits += int(hit_now.sum())
            stopped = hit_now | far_now
            idx_alive = np.flatnonzero(alive)
            alive[idx_alive[stopped]] = False
        unresolved += int(alive.sum())
        done += b

    lo_w, _ = wilson_interval(hits, n_walks)
    _, hi_w = wilson_interval(hits + unresolved, n_walks)
    return MCEscapeResult(
        p_lower=lo_w,
        p_upper=min(1.0, hi_w + bias),
        n_walks=n_walks,
        hits=hits,
        unresolved=unresolved,
        bias_bound=bias,
        escape_radius=float(escape_radius),
        meta={"capacity_upper": cap_rep.upper, "max_steps": max_steps},
    )
