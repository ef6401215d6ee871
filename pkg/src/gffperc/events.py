"""Excursion-set clusters and connection events.

All detectors threshold a `FieldSample` at a level h and reason about
connected components of {phi >= h} under nearest-neighbour (or *-)
adjacency.  Events centred at the origin use ambient boxes B_N = [-N, N]^d;
"not connected to infinity" is realized as "cluster stays strictly inside
B_{N_out}" with N_out recorded (default 2N).

Conventions for the annulus events: components are taken in {phi >= h}
intersected with the FULL box B_2N, and a component "crosses" when it meets
both B_N and the boundary face of B_2N.  With this single counting rule,
"exactly one crossing cluster" and "at least two" are mutually exclusive by
construction.

True reports carry a witness path that `reverify` checks independently
(values above level, steps adjacent, endpoints in the advertised regions).
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .field import FieldSample
from .lattice import Box, box_around, nn_structure, star_structure, tube
from .stats import wilson_interval

__all__ = [
    "ClusterLabeling",
    "EventReport",
    "label_clusters",
    "one_arm",
    "truncated_one_arm",
    "loc_uniq",
    "two_arms",
    "exist_unique_diagnostics",
    "tube_crossing",
    "truncated_two_point",
    "reverify",
    "write_event_rows",
    "EVENT_CSV_COLUMNS",
]


# ---------------------------------------------------------------------------
# labeling


@dataclass
class ClusterLabeling:
    box: Box
    h: float
    mode: str  # "nn" | "star"
    labels: np.ndarray  # int32 over box.shape; 0 = below level
    sizes: np.ndarray  # sizes[k] = cells with label k+1
    diameters: np.ndarray  # sup-norm diameter per label (same indexing)

    @property
    def n_clusters(self) -> int:
        return len(self.sizes)

    def label_at(self, pts) -> np.ndarray:
        pts = np.atleast_2d(np.asarray(pts, dtype=np.int64))
        if not bool(np.all(self.box.contains(pts))):
            raise ValueError("point outside labeled box")
        rel = pts - np.asarray(self.box.lo)
        return self.labels[tuple(rel.T)]


def _label_mask(mask: np.ndarray, mode: str):
    d = mask.ndim
    struct = nn_structure(d) if mode == "nn" else star_structure(d)
    labels, n = ndimage.label(mask, structure=struct)
    return labels.astype(np.int32), n


def label_clusters(f: FieldSample, h: float, mode: str = "nn",
                   within: Box | None = None) -> ClusterLabeling:
    """Connected components of {phi >= h} in `within` (default: whole box)."""
    if mode == "*":
        mode = "star"
    if mode not in ("nn", "star"):
        raise ValueError("mode must be 'nn' or 'star'/'*'")
    box = f.box if within is None else within
    vals = f.values if within is None else f.restrict(within)
    mask = vals >= h
    labels, n = _label_mask(mask, mode)
    if n == 0:
        return ClusterLabeling(box, h, mode, labels, np.zeros(0, dtype=np.int64),
                               np.zeros(0, dtype=np.int64))
    sizes = np.bincount(labels.ravel(), minlength=n + 1)[1:]
    idx = np.arange(1, n + 1)
    diam = np.zeros(n, dtype=np.int64)
    for ax in range(mask.ndim):
        coord = np.broadcast_to(
            np.arange(mask.shape[ax]).reshape(
                [-1 if a == ax else 1 for a in range(mask.ndim)]
            ),
            mask.shape,
        )
        mn = ndimage.minimum(coord, labels, index=idx)
        mx = ndimage.maximum(coord, labels, index=idx)
        diam = np.maximum(diam, (mx - mn).astype(np.int64))
    return ClusterLabeling(box, h, mode, labels, sizes, diam)


# ---------------------------------------------------------------------------
# witness machinery: vectorized multi-source BFS + backtrack


def _nn_shifts(d: int):
    out = []
    for ax in range(d):
        for s in (1, -1):
            v = np.zeros(d, dtype=np.int64)
            v[ax] = s
            out.append(v)
    return out


def _grid_path(mask: np.ndarray, src: np.ndarray, dst: np.ndarray):
    """Shortest nn-path inside `mask` from src cells to dst cells, or None."""
    if not (mask & src).any():
        return None
    if (mask & src & dst).any():
        p = np.argwhere(mask & src & dst)[0]
        return p[None, :]
    d = mask.ndim
    dist = np.full(mask.shape, -1, dtype=np.int32)
    dist[mask & src] = 0
    frontier = mask & src
    step = 0
    while frontier.any():
        step += 1
        grown = np.zeros_like(frontier)
        for ax in range(d):
            for s in (1, -1):
                shifted = np.roll(frontier, s, axis=ax)
                edge = [slice(None)] * d
                edge[ax] = 0 if s == 1 else -1
                shifted[tuple(edge)] = False
                grown |= shifted
        grown &= mask & (dist < 0)
        if not grown.any():
            return None
        dist[grown] = step
        if (grown & dst).any():
            # backtrack from one reached destination
            cur = np.argwhere(grown & dst)[0]
            path = [cur]
            for back in range(step, 0, -1):
                for v in _nn_shifts(d):
                    nxt = cur + v
                    if np.any(nxt < 0) or np.any(nxt >= np.asarray(mask.shape)):
                        continue
                    if dist[tuple(nxt)] == back - 1:
                        cur = nxt
                        path.append(cur)
                        break
            return np.asarray(path[::-1], dtype=np.int64)
        frontier = grown
    return None


# ---------------------------------------------------------------------------
# event reports


@dataclass
class EventReport:
    name: str
    params: dict
    outcome: bool
    witness: np.ndarray | None = None  # absolute-coordinate nn-path
    meta: dict = field(default_factory=dict)


def _boundary_mask(shape: tuple[int, ...]) -> np.ndarray:
    m = np.zeros(shape, dtype=bool)
    for ax in range(len(shape)):
        sl = [slice(None)] * len(shape)
        sl[ax] = 0
        m[tuple(sl)] = True
        sl[ax] = -1
        m[tuple(sl)] = True
    return m


def _require_box(f: FieldSample, box: Box, what: str):
    if not f.box.contains_box(box):
        raise ValueError(f"{what} escapes the sample box")


def one_arm(f: FieldSample, h: float, N: int, witness: bool = True) -> EventReport:
    """0 connected to the boundary of B_N inside {phi >= h}."""
    d = f.box.d
    B = box_around(0, N, d)
    _require_box(f, B, "B_N")
    vals = f.restrict(B)
    mask = vals >= h
    center = tuple(np.zeros(d, dtype=int) - np.asarray(B.lo))
    params = {"h": h, "N": N, "ambient": B}
    if not mask[center]:
        return EventReport("one_arm", params, False)
    labels, _ = _label_mask(mask, "nn")
    lab = labels[center]
    bnd = _boundary_mask(mask.shape)
    hit = bool((labels[bnd] == lab).any())
    rep = EventReport("one_arm", params, hit)
    if hit and witness:
        src = np.zeros_like(mask)
        src[center] = True
        path = _grid_path(labels == lab, src, bnd)
        rep.witness = path + np.asarray(B.lo)
    return rep


def truncated_one_arm(f: FieldSample, h: float, N: int, N_out: int | None = None,
                      witness: bool = True) -> EventReport:
    """0 reaches the boundary of B_N but its cluster stays inside B_{N_out}."""
    d = f.box.d
    if N_out is None:
        N_out = 2 * N
    if N_out <= N:
        raise ValueError("need N_out > N")
    Bout = box_around(0, N_out, d)
    _require_box(f, Bout, "B_{N_out}")
    inner = one_arm(f, h, N, witness=witness)
    params = {"h": h, "N": N, "N_out": N_out, "ambient": Bout}
    if not inner.outcome:
        return EventReport("truncated_one_arm", params, False)
    vals = f.restrict(Bout)
    mask = vals >= h
    labels, _ = _label_mask(mask, "nn")
    center = tuple(-np.asarray(Bout.lo))
    lab = labels[center]
    confined = not bool((labels[_boundary_mask(mask.shape)] == lab).any())
    rep = EventReport("truncated_one_arm", params, confined,
                      witness=inner.witness if confined else None)
    rep.meta["cluster_size"] = int((labels == lab).sum())
    return rep


def _crossing_labels(f: FieldSample, h: float, N: int):
    """Labels of components of {phi>=h} ∩ B_2N meeting both B_N and ∂B_2N."""
    d = f.box.d
    B2 = box_around(0, 2 * N, d)
    _require_box(f, B2, "B_2N")
    mask = f.restrict(B2) >= h
    labels, n = _label_mask(mask, "nn")
    if n == 0:
        return labels, np.zeros(0, dtype=np.int64), B2
    inner_sl = tuple(slice(N, 3 * N + 1) for _ in range(d))
    in_inner = np.unique(labels[inner_sl])
    on_bnd = np.unique(labels[_boundary_mask(mask.shape)])
    crossing = np.intersect1d(in_inner, on_bnd)
    return labels, crossing[crossing > 0], B2


def _annulus_witness(labels: np.ndarray, lab: int, N: int, B2: Box):
    d = labels.ndim
    inner = np.zeros(labels.shape, dtype=bool)
    inner[tuple(slice(N, 3 * N + 1) for _ in range(d))] = True
    path = _grid_path(labels == lab, inner, _boundary_mask(labels.shape))
    return None if path is None else path + np.asarray(B2.lo)


def loc_uniq(f: FieldSample, h: float, N: int, witness: bool = True) -> EventReport:
    """Exactly one component of {phi>=h} ∩ B_2N crosses from B_N to ∂B_2N."""
    labels, crossing, B2 = _crossing_labels(f, h, N)
    outcome = len(crossing) == 1
    rep = EventReport("loc_uniq", {"h": h, "N": N, "ambient": B2}, outcome)
    rep.meta["n_crossing"] = len(crossing)
    if outcome and witness:
        rep.witness = _annulus_witness(labels, crossing[0], N, B2)
    return rep


def two_arms(f: FieldSample, h: float, N: int, witness: bool = True) -> EventReport:
    """At least two disjoint crossing components (same counting as loc_uniq)."""
    labels, crossing, B2 = _crossing_labels(f, h, N)
    outcome = len(crossing) >= 2
    rep = EventReport("two_arms", {"h": h, "N": N, "ambient": B2}, outcome)
    rep.meta["n_crossing"] = len(crossing)
    if outcome and witness:
        w1 = _annulus_witness(labels, crossing[0], N, B2)
        w2 = _annulus_witness(labels, crossing[1], N, B2)
        if w1 is not None and w2 is not None:
            rep.witness = np.vstack([w1, w2])
            rep.meta["witness_split"] = len(w1)
    return rep


def exist_unique_diagnostics(f: FieldSample, h: float, N: int):
    """(i) some cluster in B_N has sup-diameter >= N/5; (ii) all clusters in
    B_N of diameter >= N/10 connect to each other inside {phi>=h} ∩ B_2N."""
    d = f.box.d
    B1 = box_around(0, N, d)
    B2 = box_around(0, 2 * N, d)
    _require_box(f, B2, "B_2N")
    lab1 = label_clusters(f, h, within=B1)
    exist = bool((lab1.diameters >= N / 5).any())
    rep_exist = EventReport("exist_cluster", {"h": h, "N": N}, exist,
                            meta={"max_diameter": int(lab1.diameters.max(initial=0))})

    big = np.flatnonzero(lab1.diameters >= N / 10) + 1
    if len(big) <= 1:
        rep_unique = EventReport("unique_cluster", {"h": h, "N": N}, True,
                                 meta={"n_big": len(big), "vacuous": True})
        return rep_exist, rep_unique
    lab2 = label_clusters(f, h, within=B2)
    reps = []
    off = np.asarray(B1.lo) - np.asarray(B2.lo)
    for k in big:
        cell = np.argwhere(lab1.labels == k)[0]
        reps.append(lab2.labels[tuple(cell + off)])
    outcome = len(set(int(r) for r in reps)) == 1
    rep_unique = EventReport("unique_cluster", {"h": h, "N": N}, outcome,
                             meta={"n_big": len(big)})
    return rep_exist, rep_unique


def tube_crossing(f: FieldSample, h: float, N: int, L: int,
                  witness: bool = True) -> EventReport:
    """Left face connected to right face inside {phi >= h} ∩ tube."""
    d = f.box.d
    T = tube(N, L, d)
    _require_box(f, T, "tube")
    mask = f.restrict(T) >= h
    src = np.zeros_like(mask)
    dst = np.zeros_like(mask)
    src[0] = True
    dst[-1] = True
    labels, _ = _label_mask(mask, "nn")
    touch_src = np.unique(labels[src & mask])
    touch_dst = np.unique(labels[dst & mask])
    common = np.intersect1d(touch_src, touch_dst)
    common = common[common > 0]
    outcome = len(common) > 0
    rep = EventReport("tube_crossing", {"h": h, "N": N, "L": L, "ambient": T},
                      outcome)
    if outcome and witness:
        path = _grid_path(labels == common[0], src, dst)
        rep.witness = path + np.asarray(T.lo)
    return rep


def truncated_two_point(samples, h: float, x, y, N_out: int) -> dict:
    """MC estimate of P[x<->y at level h, x's cluster confined to B_{N_out}(x)].

    Returns {"estimate", "ci", "hits", "n"} with a 99% Wilson interval.
    """
    x = np.asarray(x, dtype=np.int64)
    y = np.asarray(y, dtype=np.int64)
    hits = 0
    n = 0
    for f in samples:
        d = f.box.d
        B = box_around(x, N_out, d)
        _require_box(f, B, "B_{N_out}(x)")
        mask = f.restrict(B) >= h
        labels, _ = _label_mask(mask, "nn")
        rx = tuple(x - np.asarray(B.lo))
        lab = labels[rx]
        ok = lab > 0
        if ok and bool(B.contains(y[None, :])[0]):
            ry = tuple(y - np.asarray(B.lo))
            ok = labels[ry] == lab
        else:
            ok = False
        if ok:
            ok = not bool((labels[_boundary_mask(mask.shape)] == lab).any())
        hits += bool(ok)
        n += 1
    if n == 0:
        raise ValueError("no samples supplied")
    lo, hi = wilson_interval(hits, n)
    return {"estimate": hits / n, "ci": (lo, hi), "hits": hits, "n": n}


# ---------------------------------------------------------------------------
# witness re-verification and CSV


def reverify(rep: EventReport, f: FieldSample) -> bool:
    """Check a true report's witness against the field it came from."""
    if not rep.outcome or rep.witness is None:
        return rep.outcome
    h = rep.params["h"]
    paths = [rep.witness]
    if "witness_split" in rep.meta:
        k = rep.meta["witness_split"]
        paths = [rep.witness[:k], rep.witness[k:]]
    for path in paths:
        if np.any(f.at(path) < h):
            return False
        steps = np.abs(np.diff(path, axis=0)).sum(axis=1)
        if len(path) > 1 and not np.all(steps == 1):
            return False
    name = rep.name
    if name == "one_arm" or name == "truncated_one_arm":
        N = rep.params["N"]
        p = rep.witness
        return bool(np.all(p[0] == 0) and np.abs(p[-1]).max() == N)
    if name == "loc_uniq":
        N = rep.params["N"]
        p = rep.witness
        return bool(np.abs(p[0]).max() <= N and np.abs(p[-1]).max() == 2 * N)
    if name == "two_arms":
        N = rep.params["N"]
        k = rep.meta["witness_split"]
        for p in (rep.witness[:k], rep.witness[k:]):
            if not (np.abs(p[0]).max() <= N and np.abs(p[-1]).max() == 2 * N):
                return False
        return True
    if name == "tube_crossing":
        N, L = rep.params["N"], rep.params["L"]
        p = rep.witness
        return bool(p[0][0] == -L and p[-1][0] == N + L)
    return True


EVENT_CSV_COLUMNS = ["event", "h", "N", "N_out", "outcome", "replica", "seed"]


def write_event_rows(path, rows):
    """rows: iterables matching EVENT_CSV_COLUMNS."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(EVENT_CSV_COLUMNS)
        for r in rows:
            w.writerow(list(r))
