"""Lattice geometry: boxes, point sets, paths, boundaries, renormalized grids.

Design notes
------------
* Everything lives on Z^d with d >= 3 (d=3 and d=4 are the tested dimensions).
* Boxes are axis-aligned with *inclusive* integer corners ``lo``/``hi``; the
  centered cube of radius N therefore has (2N+1)^d points.
* Point sets carry lexicographically sorted coordinate rows and, when the set
  fills more than 5% of its bounding box, a dense boolean mask as well.  The
  two representations are redundant on purpose; ``check_consistent`` verifies
  they agree and the test-suite exercises that.
* Two adjacencies are used throughout: nearest-neighbor (``|x-y|_1 = 1``) and
  *-adjacency (``|x-y|_inf = 1``, 3^d - 1 neighbors).
* Connectivity "to infinity" is always certified inside an explicit ambient
  box: the infinite component of a complement is identified by flood-filling
  from the ambient boundary, which is valid as soon as the ambient box strictly
  contains the set's bounding box (the complement ring is connected for d>=2).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np
from scipy import ndimage

__all__ = [
    "Box",
    "PointSet",
    "LatticePath",
    "RenormLattice",
    "box_around",
    "tube",
    "boundaries",
    "exterior_boundary",
    "crosses",
    "surrounded_by",
    "blocking_layers",
    "BlockingResult",
    "nn_structure",
    "star_structure",
    "write_points",
    "read_points",
]

MASK_DENSITY = 0.05  # density above which a PointSet also carries a dense mask


def nn_structure(d: int) -> np.ndarray:
    """Nearest-neighbor connectivity footprint (2d neighbors)."""
    return ndimage.generate_binary_structure(d, 1)


def star_structure(d: int) -> np.ndarray:
    """*-connectivity footprint (3^d - 1 neighbors)."""
    return np.ones((3,) * d, dtype=bool)


# ---------------------------------------------------------------------------
# boxes


@dataclass(frozen=True)
class Box:
    """Axis-aligned box [lo_1, hi_1] x ... x [lo_d, hi_d], corners inclusive."""

    lo: tuple[int, ...]
    hi: tuple[int, ...]

    def __post_init__(self):
        lo, hi = np.asarray(self.lo), np.asarray(self.hi)
        if lo.shape != hi.shape or lo.ndim != 1:
            raise ValueError("lo and hi must be equal-length coordinate tuples")
        if (hi < lo).any():
            raise ValueError(f"empty box: lo={self.lo} hi={self.hi}")
        object.__setattr__(self, "lo", tuple(int(v) for v in lo))
        object.__setattr__(self, "hi", tuple(int(v) for v in hi))

    @property
    def d(self) -> int:
        return len(self.lo)

    @property
    def shape(self) -> tuple[int, ...]:
        return tuple(h - l + 1 for l, h in zip(self.lo, self.hi))

    @property
    def size(self) -> int:
        return int(np.prod(self.shape, dtype=np.int64))

    def contains(self, pts: np.ndarray) -> np.ndarray:
        pts = np.atleast_2d(np.asarray(pts, dtype=np.int64))
        lo = np.asarray(self.lo)
        hi = np.asarray(self.hi)
        return ((pts >= lo) & (pts <= hi)).all(axis=1)

    def contains_box(self, other: "Box") -> bool:
        return all(a <= b for a, b in zip(self.lo, other.lo)) and all(
            a >= b for a, b in zip(self.hi, other.hi)
        )

    def expand(self, m: int) -> "Box":
        return Box(tuple(l - m for l in self.lo), tuple(h + m for h in self.hi))

    def translate(self, z: Sequence[int]) -> "Box":
        z = np.asarray(z, dtype=np.int64)
        return Box(tuple(np.asarray(self.lo) + z), tuple(np.asarray(self.hi) + z))

    def intersect(self, other: "Box") -> "Box | None":
        lo = np.maximum(self.lo, other.lo)
        hi = np.minimum(self.hi, other.hi)
        if (hi < lo).any():
            return None
        return Box(tuple(lo), tuple(hi))

    def points(self) -> np.ndarray:
        """All points, lexicographic order, shape (size, d)."""
        axes = [np.arange(l, h + 1) for l, h in zip(self.lo, self.hi)]
        grid = np.meshgrid(*axes, indexing="ij")
        return np.stack(grid, axis=-1).reshape(-1, self.d).astype(np.int64)

    def boundary_points(self) -> np.ndarray:
        """Inner boundary: points with some coordinate at lo or hi."""
        pts = self.points()
        lo = np.asarray(self.lo)
        hi = np.asarray(self.hi)
        on_face = ((pts == lo) | (pts == hi)).any(axis=1)
        return pts[on_face]

    def index_of(self, pts: np.ndarray) -> np.ndarray:
        """Row-major flat index of points inside the box."""
        pts = np.atleast_2d(np.asarray(pts, dtype=np.int64))
        rel = pts - np.asarray(self.lo)
        return np.ravel_multi_index(tuple(rel.T), self.shape)


def box_around(center: Sequence[int] | int, radius: int, d: int | None = None) -> Box:
    """Centered cube: center + [-radius, radius]^d."""
    if isinstance(center, (int, np.integer)):
        if d is None:
            raise ValueError("scalar center requires d")
        center = (int(center),) * d
    c = np.asarray(center, dtype=np.int64)
    return Box(tuple(c - radius), tuple(c + radius))


def tube(N: int, L: int, d: int) -> Box:
    """Axis tube [-L, N+L] x [-L, L]^(d-1); L=0 gives the line segment [0,N]."""
    if N < 0 or L < 0:
        raise ValueError("tube requires N >= 0 and L >= 0")
    return Box((-L,) + (-L,) * (d - 1), (N + L,) + (L,) * (d - 1))


# ---------------------------------------------------------------------------
# point sets


def _lexsort_rows(pts: np.ndarray) -> np.ndarray:
    if len(pts) == 0:
        return pts
    order = np.lexsort(pts.T[::-1])
    return pts[order]


class PointSet:
    """Finite subset of Z^d: sorted coordinate rows + optional dense mask."""

    def __init__(self, coords: np.ndarray, d: int | None = None):
        coords = np.asarray(coords, dtype=np.int64)
        if coords.size == 0:
            if d is None:
                raise ValueError("empty PointSet requires explicit d")
            coords = coords.reshape(0, d)
        if coords.ndim != 2:
            raise ValueError("coords must be (n, d)")
        coords = np.unique(coords, axis=0)
        self.coords = _lexsort_rows(coords)
        self._mask = None
        self._mask_box = None
        if len(self.coords) > 0:
            bb = self.bbox()
            if bb.size > 0 and len(self.coords) / bb.size > MASK_DENSITY:
                self._build_mask(bb)

    # -- construction -------------------------------------------------------

    @classmethod
    def from_box(cls, box: Box) -> "PointSet":
        return cls(box.points())

    @classmethod
    def from_mask(cls, box: Box, mask: np.ndarray) -> "PointSet":
        mask = np.asarray(mask, dtype=bool)
        if mask.shape != box.shape:
            raise ValueError("mask shape does not match box shape")
        idx = np.argwhere(mask) + np.asarray(box.lo)
        ps = cls(idx, d=box.d)
        return ps

    # -- core ---------------------------------------------------------------

    @property
    def d(self) -> int:
        return self.coords.shape[1]

    def __len__(self) -> int:
        return len(self.coords)

    def bbox(self) -> Box:
        if len(self.coords) == 0:
            raise ValueError("empty set has no bounding box")
        return Box(tuple(self.coords.min(axis=0)), tuple(self.coords.max(axis=0)))

    def _build_mask(self, box: Box):
        m = np.zeros(box.shape, dtype=bool)
        rel = self.coords - np.asarray(box.lo)
        m[tuple(rel.T)] = True
        self._mask = m
        self._mask_box = box

    def mask_in(self, box: Box) -> np.ndarray:
        """Dense boolean occupancy over `box` (points outside box dropped)."""
        m = np.zeros(box.shape, dtype=bool)
        inside = box.contains(self.coords)
        rel = self.coords[inside] - np.asarray(box.lo)
        if len(rel):
            m[tuple(rel.T)] = True
        return m

    def contains(self, pts: np.ndarray) -> np.ndarray:
        pts = np.atleast_2d(np.asarray(pts, dtype=np.int64))
        if self._mask is not None:
            bb = self._mask_box
            out = bb.contains(pts)
            rel = pts[out] - np.asarray(bb.lo)
            out[out.copy()] = self._mask[tuple(rel.T)]
            return out
        if len(self.coords) == 0:
            return np.zeros(len(pts), dtype=bool)
        a = _void_view(self.coords)
        b = _void_view(np.ascontiguousarray(pts))
        idx = np.searchsorted(a, b)
        idx = np.clip(idx, 0, len(a) - 1)
        return a[idx] == b

    def check_consistent(self) -> bool:
        """Verify the mask and the coordinate list agree on membership."""
        if self._mask is None:
            return True
        from_mask = np.argwhere(self._mask) + np.asarray(self._mask_box.lo)
        return np.array_equal(_lexsort_rows(from_mask), self.coords)

    # -- set algebra ---------------------------------------------------------

    def union(self, other: "PointSet") -> "PointSet":
        return PointSet(np.concatenate([self.coords, other.coords]), d=self.d)

    def difference(self, other: "PointSet") -> "PointSet":
        keep = ~other.contains(self.coords)
        return PointSet(self.coords[keep], d=self.d)

    def intersect(self, other: "PointSet") -> "PointSet":
        keep = other.contains(self.coords)
        return PointSet(self.coords[keep], d=self.d)

    def restrict(self, box: Box) -> "PointSet":
        return PointSet(self.coords[box.contains(self.coords)], d=self.d)

    # -- topology -------------------------------------------------------------

    def components(self, star: bool = False) -> list["PointSet"]:
        """Connected components (nn or *-adjacency)."""
        if len(self.coords) == 0:
            return []
        bb = self.bbox()
        mask = self.mask_in(bb)
        struct = star_structure(self.d) if star else nn_structure(self.d)
        lab, n = ndimage.label(mask, structure=struct)
        out = []
        offs = np.asarray(bb.lo)
        for i in range(1, n + 1):
            out.append(PointSet(np.argwhere(lab == i) + offs, d=self.d))
        return out

    def is_connected(self, star: bool = False) -> bool:
        return len(self.components(star=star)) <= 1


def _void_view(arr: np.ndarray) -> np.ndarray:
    arr = np.ascontiguousarray(arr, dtype=np.int64)
    return arr.view([("", np.int64)] * arr.shape[1]).ravel()


# ---------------------------------------------------------------------------
# serialization: first line "d=<dim>", then one point per line


def write_points(path, ps: PointSet | np.ndarray, d: int | None = None):
    coords = ps.coords if isinstance(ps, PointSet) else np.asarray(ps, dtype=np.int64)
    dim = coords.shape[1] if coords.size else d
    with open(path, "w") as fh:
        fh.write(f"d={dim}\n")
        for row in coords:
            fh.write(" ".join(str(int(v)) for v in row) + "\n")


def read_points(path) -> PointSet:
    with open(path) as fh:
        header = fh.readline().strip()
        if not header.startswith("d="):
            raise ValueError(f"bad header {header!r}: expected 'd=<dim>'")
        d = int(header[2:])
        rows = []
        for line in fh:
            line = line.strip()
            if not line:
                continue
            vals = line.split()
            if len(vals) != d:
                raise ValueError(f"point {line!r} has {len(vals)} coords, expected {d}")
            rows.append([int(v) for v in vals])
    return PointSet(np.asarray(rows, dtype=np.int64).reshape(-1, d), d=d)


# ---------------------------------------------------------------------------
# boundaries


def _boundary_masks(mask: np.ndarray):
    """(inner boundary, outer boundary) of a mask under nn adjacency.

    The mask is treated as padded with False; both results live on the mask grid.
    """
    eroded = ndimage.binary_erosion(mask, structure=nn_structure(mask.ndim))
    inner = mask & ~eroded
    dilated = ndimage.binary_dilation(mask, structure=nn_structure(mask.ndim))
    outer = dilated & ~mask
    return inner, outer


def boundaries(S: PointSet, ambient: Box | None = None):
    """Inner, outer and exterior boundary of a finite set.

    * inner:    points of S with a nearest neighbor outside S
    * outer:    points outside S with a nearest neighbor in S
    * exterior: inner boundary of the infinite component of the complement

    The exterior boundary is certified by flood-filling the complement from the
    boundary of an ambient box; `ambient` must strictly contain S's bounding
    box (default: bounding box expanded by 2).
    """
    if len(S) == 0:
        raise ValueError("boundaries of empty set")
    bb = S.bbox()
    if ambient is None:
        ambient = bb.expand(2)
    if not ambient.contains_box(bb.expand(1)):
        raise ValueError(
            "ambient box too small to certify the infinite complement component: "
            f"need it to contain {bb.expand(1)}"
        )
    mask = S.mask_in(ambient)
    inner_m, outer_m = _boundary_masks(mask)
    offs = np.asarray(ambient.lo)
    inner = PointSet(np.argwhere(inner_m) + offs, d=S.d)
    outer = PointSet(np.argwhere(outer_m) + offs, d=S.d)
    ext = exterior_boundary(S, ambient=ambient)
    return inner, outer, ext


def _infinite_complement(mask: np.ndarray) -> np.ndarray:
    """Cells of ~mask nn-connected to the grid border (the infinite component)."""
    comp = ~mask
    lab, _ = ndimage.label(comp, structure=nn_structure(mask.ndim))
    border_labels = set()
    for ax in range(mask.ndim):
        for sel in (0, -1):
            sl = [slice(None)] * mask.ndim
            sl[ax] = sel
            border_labels.update(np.unique(lab[tuple(sl)]))
    border_labels.discard(0)
    if not border_labels:
        return np.zeros_like(mask)
    return np.isin(lab, sorted(border_labels))


def exterior_boundary(S: PointSet, ambient: Box | None = None) -> PointSet:
    """Inner nn-boundary of the infinite component of Z^d \\ S."""
    bb = S.bbox()
    if ambient is None:
        ambient = bb.expand(2)
    if not ambient.contains_box(bb.expand(1)):
        raise ValueError("ambient box too small to certify the infinite component")
    mask = S.mask_in(ambient)
    inf_comp = _infinite_complement(mask)
    # cells of the infinite component with an nn neighbor outside it *within
    # the grid* (zero padding keeps grid-border cells from being flagged)
    not_inf = ~inf_comp
    keep = np.zeros_like(inf_comp)
    for ax in range(mask.ndim):
        for sgn in (1, -1):
            shifted = np.zeros_like(not_inf)
            src = [slice(None)] * mask.ndim
            dst = [slice(None)] * mask.ndim
            if sgn == 1:
                src[ax], dst[ax] = slice(1, None), slice(None, -1)
            else:
                src[ax], dst[ax] = slice(None, -1), slice(1, None)
            shifted[tuple(dst)] = not_inf[tuple(src)]
            keep |= inf_comp & shifted
    offs = np.asarray(ambient.lo)
    return PointSet(np.argwhere(keep) + offs, d=S.d)


# ---------------------------------------------------------------------------
# paths


class LatticePath:
    """A finite lattice path; mode 'nn' (|step|_1 = 1) or 'star' (|step|_inf = 1)."""

    def __init__(self, pts: np.ndarray, mode: str = "nn"):
        pts = np.asarray(pts, dtype=np.int64)
        if pts.ndim != 2 or len(pts) == 0:
            raise ValueError("path must be a nonempty (n, d) array")
        if mode not in ("nn", "star"):
            raise ValueError("mode must be 'nn' or 'star'")
        steps = np.diff(pts, axis=0)
        if mode == "nn":
            ok = (np.abs(steps).sum(axis=1) == 1).all()
        else:
            sup = np.abs(steps).max(axis=1) if len(steps) else np.array([])
            ok = len(steps) == 0 or ((sup == 1).all())
        if not ok:
            bad = int(np.argmax(np.abs(steps).sum(axis=1) != 1)) if mode == "nn" else -1
            raise ValueError(f"invalid {mode} step in path (first bad step index {bad})")
        self.pts = pts
        self.mode = mode

    @property
    def d(self) -> int:
        return self.pts.shape[1]

    def __len__(self) -> int:
        return len(self.pts)


def crosses(path: LatticePath, U, V: Box) -> bool:
    """True iff the path meets both U and the inner boundary of the box V."""
    pts = path.pts
    if isinstance(U, Box):
        in_U = U.contains(pts).any()
    else:
        in_U = U.contains(pts).any()
    on_dV = _on_box_boundary(pts, V).any()
    return bool(in_U and on_dV)


def _on_box_boundary(pts: np.ndarray, V: Box) -> np.ndarray:
    inside = V.contains(pts)
    lo = np.asarray(V.lo)
    hi = np.asarray(V.hi)
    on_face = ((pts == lo) | (pts == hi)).any(axis=1)
    return inside & on_face


# ---------------------------------------------------------------------------
# surround partial order and blocking layers


def surrounded_by(inner: PointSet, outer: PointSet, ambient: Box | None = None) -> bool:
    """True iff `inner` lies in a finite component of Z^d \\ `outer`.

    This is the surround relation: inner ⊑ outer.  Certified within an ambient
    box strictly containing both bounding boxes.
    """
    if len(inner) == 0 or len(outer) == 0:
        return False
    bb = inner.bbox()
    bo = outer.bbox()
    hull = Box(
        tuple(min(a, b) for a, b in zip(bb.lo, bo.lo)),
        tuple(max(a, b) for a, b in zip(bb.hi, bo.hi)),
    )
    if ambient is None:
        ambient = hull.expand(2)
    if not ambient.contains_box(hull.expand(1)):
        raise ValueError("ambient box too small to certify the surround relation")
    mask_o = outer.mask_in(ambient)
    inf_comp = _infinite_complement(mask_o)
    pts = inner.coords - np.asarray(ambient.lo)
    in_outer = mask_o[tuple(pts.T)]
    if in_outer.any():
        return False
    return not inf_comp[tuple(pts.T)].any()


@dataclass
class BlockingResult:
    layers: list  # list[PointSet], innermost first
    complete: bool  # len(layers) == k requested
    message: str = ""


def blocking_layers(U, V: Box, sigma: PointSet, k: int) -> BlockingResult:
    """Extract k nested *-connected blocking layers inside sigma.

    Hypothesis: every *-path from U to the inner boundary of V meets sigma in
    at least k points.  Construction: take the *-component of U in V \\ sigma,
    use the exterior boundary of that component as the innermost layer, absorb
    it, and repeat.  If the hypothesis fails mid-way the partial list is
    returned with ``complete=False`` and a diagnostic message.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    U_ps = PointSet.from_box(U) if isinstance(U, Box) else U
    d = V.d
    grid = V.expand(1)  # margin so exterior flood fill is certified
    u_mask = U_ps.mask_in(grid)
    s_mask = sigma.mask_in(grid)
    v_mask = PointSet.from_box(V).mask_in(grid)
    if (u_mask & s_mask).any():
        raise ValueError("U and sigma must be disjoint")
    dV = _on_box_boundary(V.points(), V)
    dV_mask = np.zeros(grid.shape, dtype=bool)
    dV_mask[tuple((V.points()[dV] - np.asarray(grid.lo)).T)] = True

    layers: list[PointSet] = []
    offs = np.asarray(grid.lo)
    star = star_structure(d)
    for step in range(k):
        region = v_mask & ~s_mask
        # *-component(s) of U within V \ sigma
        lab_region, _ = ndimage.label(region | u_mask, structure=star)
        u_labels = np.unique(lab_region[u_mask])
        u_labels = u_labels[u_labels > 0]
        comp = np.isin(lab_region, u_labels)
        if (comp & dV_mask).any():
            return BlockingResult(
                layers,
                False,
                f"component of U reaches the boundary of V after {step} layers; "
                f"hypothesis supports only {step} blocking layers",
            )
        inf_comp = _infinite_complement(comp)
        # innermost layer: cells of the infinite complement component that are
        # nn-adjacent to comp (all such cells lie in sigma, see module tests)
        adj = ndimage.binary_dilation(comp, structure=nn_structure(d)) & ~comp
        O_mask = adj & inf_comp
        if not O_mask.any():
            return BlockingResult(layers, False, f"no layer found at step {step}")
        if not (O_mask <= s_mask).all():
            stray = np.argwhere(O_mask & ~s_mask) + offs
            return BlockingResult(
                layers,
                False,
                f"layer {step} leaves sigma at {stray[:3].tolist()} (U not interior to V?)",
            )
        layers.append(PointSet(np.argwhere(O_mask) + offs, d=d))
        u_mask = comp | O_mask
        s_mask = s_mask & ~O_mask
    return BlockingResult(layers, True)


# ---------------------------------------------------------------------------
# renormalized lattice


@dataclass(frozen=True)
class RenormLattice:
    """The grid L·Z^d with its nested box families.

    For an anchor z in L·Z^d (all boxes half-open in the combinatorial sense,
    stored with inclusive corners):

    ==========  ==================================  ======
    name        extent                              side
    ==========  ==================================  ======
    cell        z + [0, L)^d                        L
    block       z + [-L, 2L)^d                      3L
    frame       z + [-2L, 3L)^d                     5L
    guard       z + [-3L, 4L)^d                     7L
    halo        z + [-KL+1, L+KL-1)^d               L+2KL-2
    ==========  ==================================  ======

    The cells tile Z^d; collections of anchors used for decompositions must be
    2KL+L-separated in sup norm (see `min_separation`).
    """

    L: int
    K: int
    d: int

    def __post_init__(self):
        if self.L < 1 or self.K < 1 or self.d < 1:
            raise ValueError("RenormLattice requires L >= 1, K >= 1, d >= 1")

    @property
    def min_separation(self) -> int:
        return 2 * self.K * self.L + self.L

    def anchor_of(self, x: np.ndarray) -> np.ndarray:
        """Anchor of the unique cell containing x (elementwise floor to L·Z)."""
        x = np.asarray(x, dtype=np.int64)
        return (np.floor_divide(x, self.L)) * self.L

    def _box(self, z, lo_off: int, hi_off: int) -> Box:
        z = np.asarray(z, dtype=np.int64)
        return Box(tuple(z + lo_off), tuple(z + hi_off))

    def cell(self, z) -> Box:
        return self._box(z, 0, self.L - 1)

    def block(self, z) -> Box:
        return self._box(z, -self.L, 2 * self.L - 1)

    def frame(self, z) -> Box:
        return self._box(z, -2 * self.L, 3 * self.L - 1)

    def guard(self, z) -> Box:
        return self._box(z, -3 * self.L, 4 * self.L - 1)

    def halo(self, z) -> Box:
        return self._box(z, -self.K * self.L + 1, self.L + self.K * self.L - 2)

    def separated(self, anchors: np.ndarray) -> bool:
        """Check pairwise sup-distance >= 2KL+L for a set of anchors."""
        anchors = np.atleast_2d(np.asarray(anchors, dtype=np.int64))
        n = len(anchors)
        for i in range(n):
            diff = np.abs(anchors[i + 1 :] - anchors[i]).max(axis=1)
            if (diff < self.min_separation).any():
                return False
        return True
