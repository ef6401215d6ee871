"""Coarse-graining of lattice crossings into sparse, separated box collections.

A path that crosses a large domain is reduced to a short list of anchors on
the sub-lattice L*Z^d such that the path provably crosses the local annulus
around every anchor, the anchor boxes are pairwise far apart, and the whole
reduction has small combinatorial entropy.  Two constructions are provided:

* ``coarse_grain_d3`` — first-exit times through a nested family of shells
  (spacing 3KL) for d = 3, with four crossing domains: a centred ball, a
  dyadic annulus, the moat between a box and its 5x enlargement, and a
  punctured ball.
* ``coarse_grain_d4`` — a binary refinement tree over a doubling ladder of
  scales for d >= 4; each level splits a connected crossing shape into an
  inner piece (around the entry face) and an outer piece (around the last
  exit from a slightly shrunk core), which forces geometric separation.

On top of the collections sit: ``porous_projection`` (compares the capacity
of the retained boxes against a solid axis segment via a 1-Lipschitz axis
map), ``kappa_check`` (capacity super-additivity of separated leaf-box
clouds down a synthetic refinement tree), ``classify_badness`` (splits the
crossing of each anchor's annulus into a local-field crossing flag and a
harmonic-average flag — exactly one of the two must fire on every anchor of
a crossing at level h), and ``harmonic_collection_tail`` (joint upper-tail
of the harmonic averages over a collection, compared with a capacity-driven
bound).

Collections are immutable once verified; coarse-graining distinct paths is
embarrassingly parallel.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field as dfield

import numpy as np
from scipy import ndimage
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components
from scipy.spatial import cKDTree

from .capfast import box_union_capacity, masked_grid_capacity, segment_capacity
from .field import FieldSample, harmonic_decompose, harmonic_sup
from .greens import GreenOracle
from .lattice import LatticePath, RenormLattice
from .stats import wilson_interval

__all__ = [
    "DOMAINS",
    "BTIS_SLACK_COEFF",
    "MAX_SPLIT_DEPTH",
    "CGParams",
    "CollectionError",
    "AdmissibleCollection",
    "ShapeNode",
    "PorousReport",
    "KappaReport",
    "BadnessReport",
    "TailReport",
    "EntropyReport",
    "coarse_grain_d3",
    "coarse_grain_d4",
    "porous_projection",
    "kappa_check",
    "classify_badness",
    "BADNESS_CSV_COLUMNS",
    "write_badness_csv",
    "harmonic_sup_matrix",
    "harmonic_collection_tail",
    "random_crossing_path",
    "length_scales",
    "entropy_accounting",
    "read_collection_json",
]

DOMAINS = ("ball", "annulus", "frame", "eps")

#: coefficient in the sample-size slack (coeff / K) * sqrt(n / cap) that is
#: subtracted from the tail level before squaring in the capacity bound.
BTIS_SLACK_COEFF = 1.0

#: refinement trees deeper than this are refused (point sets blow up).
MAX_SPLIT_DEPTH = 6


def _sparsity_gauge(x: float, d: int) -> float:
    """Per-anchor volume cost u(x): x in d=3, x*log(x)^2 in d>=4."""
    if d == 3:
        return float(x)
    return float(x) * math.log(max(x, 2.0)) ** 2


# ---------------------------------------------------------------------------
# parameters and domain geometry


@dataclass(frozen=True)
class CGParams:
    """Geometry knobs for a coarse-graining run.

    ``K`` is the separation multiplier (anchors are >= (2K+1)L apart), ``L``
    the anchor-box side, ``N`` the domain size, ``domain`` one of
    ``DOMAINS``, ``rho`` the retention fraction used by the porous
    projection and the badness counting, ``eps`` the inner-radius fraction
    (only for ``domain="eps"``).  ``strict=False`` drops the ``N >= 10*K*L``
    size floor; collections built that way are labelled and meant for
    hand-placed anchors, not for the shell/tree schemes.
    """

    K: int
    L: int
    N: int
    d: int = 3
    domain: str = "ball"
    rho: float = 0.25
    eps: float = 0.0
    strict: bool = True

    def __post_init__(self):
        if self.d not in (3, 4):
            raise ValueError("d must be 3 or 4")
        if self.K < 4:
            raise ValueError("K must be at least 4 (values below 100 are 'relaxed')")
        if self.L < 1:
            raise ValueError("L must be a positive integer")
        if self.domain not in DOMAINS:
            raise ValueError(f"domain must be one of {DOMAINS}")
        if not 0.0 < self.rho < 1.0:
            raise ValueError("rho must lie in (0, 1)")
        if self.domain == "eps":
            if not 0.0 < self.eps < 1.0:
                raise ValueError("eps domain needs eps in (0, 1)")
            if self.inner_radius < 1:
                raise ValueError("eps * N must be at least 1")
        elif self.eps:
            raise ValueError("eps is only meaningful for domain='eps'")
        if self.N < 1:
            raise ValueError("N must be positive")
        if self.strict and self.N < 10 * self.K * self.L:
            raise ValueError(
                f"N={self.N} is below the size floor 10*K*L={10 * self.K * self.L}; "
                "pass strict=False only for hand-placed collections"
            )

    # -- derived geometry ---------------------------------------------------

    @property
    def relaxed(self) -> bool:
        """True when K is below the fully-separated regime (K < 100)."""
        return self.K < 100

    @property
    def inner_radius(self) -> int:
        """Radius of the removed inner ball (eps domain only)."""
        return int(math.floor(self.eps * self.N + 1e-9))

    @property
    def _base(self) -> int:
        if self.domain == "annulus":
            return self.N
        if self.domain == "eps":
            return int(math.ceil(self.eps * self.N - 1e-9))
        return 0

    @property
    def span(self) -> int:
        """Gauge value of the outer boundary (inner rim sits at gauge <= 0)."""
        if self.domain in ("ball", "annulus", "frame"):
            return self.N
        return self.N - self._base

    @property
    def root_level(self) -> int:
        """Max gauge value of the inner target set of the crossing."""
        if self.domain == "eps":
            return self.inner_radius - self._base  # 0 or -1
        return 0

    def gauge(self, pts: np.ndarray) -> np.ndarray:
        """1-Lipschitz (sup-norm) radial coordinate; shells live at 3KLi.

        ball / eps / annulus: sup-norm minus a base radius.  frame: signed
        sup-distance to the box [-N, 2N)^d (negative inside).
        """
        pts = np.asarray(pts)
        if pts.ndim == 1:
            pts = pts[None, :]
        if self.domain == "frame":
            N = self.N
            g = np.maximum((-N) - pts, pts - (2 * N - 1)).max(axis=1)
        else:
            g = np.abs(pts).max(axis=1) - self._base
        return g

    def gauge_range_of_box(self, lo, hi) -> tuple[int, int]:
        """Exact (min, max) of the gauge over an inclusive-corner box."""
        lo = np.asarray(lo, dtype=np.int64)
        hi = np.asarray(hi, dtype=np.int64)
        if self.domain == "frame":
            N = self.N
            f_lo = np.maximum((-N) - lo, lo - (2 * N - 1))
            f_hi = np.maximum((-N) - hi, hi - (2 * N - 1))
            per_max = np.maximum(f_lo, f_hi)
            # the 1-d piece is V-shaped, so its min over [lo, hi] is attained
            # at the clip of the valley into the interval
            valley = np.clip((N - 1) // 2, lo, hi)
            per_min = np.maximum((-N) - valley, valley - (2 * N - 1))
            return int(per_min.max()), int(per_max.max())
        minabs = np.where((lo <= 0) & (hi >= 0), 0, np.minimum(np.abs(lo), np.abs(hi)))
        maxabs = np.maximum(np.abs(lo), np.abs(hi))
        return int(minabs.max() - self._base), int(maxabs.max() - self._base)

    def box_in_domain(self, box: Box) -> bool:
        """Whether an anchor's surrounding box sits inside the crossing domain."""
        gmin, gmax = self.gauge_range_of_box(box.lo, box.hi)
        if gmax > self.span:
            return False
        if self.domain == "ball":
            return True
        return gmin > self.root_level

    def root_mask(self, sig: np.ndarray) -> np.ndarray:
        """Which path points lie in the inner target set of the crossing."""
        return sig <= self.root_level

    def crosses(self, pts: np.ndarray) -> bool:
        """Whether the point sequence joins the inner set to the outer rim."""
        sig = self.gauge(pts)
        return bool(self.root_mask(sig).any() and sig.max() >= self.span)

    def shell_count(self) -> int:
        """Number of first-exit shells the domain supports."""
        step = 3 * self.K * self.L
        if self.domain == "eps":
            return int(math.floor((1.0 - self.eps) * self.N / step + 1e-9)) - 1
        return self.N // step - 1

    def entropy_scale(self) -> float:
        """Size of the log-count budget for collections (unit constant)."""
        r = self.N / self.L
        if self.d == 3:
            return r * math.log(max(r, 2.0)) / self.K
        return r


def _as_points(path) -> np.ndarray:
    pts = path.pts if isinstance(path, LatticePath) else np.asarray(path, dtype=np.int64)
    pts = np.asarray(pts, dtype=np.int64)
    if pts.ndim != 2 or len(pts) == 0:
        raise ValueError("path must be a nonempty (T, d) integer array")
    if len(pts) > 1 and np.abs(np.diff(pts, axis=0)).max() > 1:
        raise ValueError("path steps must have sup-norm at most 1")
    return pts


def _orient_for_scheme(pts: np.ndarray, p: CGParams) -> tuple[np.ndarray, bool]:
    """Return the path oriented so the inner set is visited before the rim."""
    sig = p.gauge(pts)
    root = np.flatnonzero(p.root_mask(sig))
    if root.size == 0 or sig.max() < p.span:
        raise ValueError(f"path does not cross the {p.domain} domain (N={p.N})")
    t0 = root[0]
    if sig[t0:].max() >= p.span:
        return pts, False
    return pts[::-1], True


# ---------------------------------------------------------------------------
# collections


class CollectionError(ValueError):
    """A constructed collection violates one of its invariants."""


def _touch_masks(pts: np.ndarray, lo: np.ndarray, hi: np.ndarray):
    inside = ((pts >= lo) & (pts <= hi)).all(axis=1)
    on_face = ((pts == lo) | (pts == hi)).any(axis=1)
    return inside, inside & on_face


@dataclass
class AdmissibleCollection:
    """A verified list of anchor cells extracted from one crossing path.

    ``points`` are anchors on L*Z^d (one cell ``z + [0, L)^d`` each).  The
    four recorded invariants: pairwise sup-separation >= (2K+1)L; the 5L
    surrounding box of every anchor inside the crossing domain; the anchor
    count within the sparsity window for N; and the source path crossing
    every anchor's surrounding annulus.  Instances are frozen after
    construction — re-run :meth:`verify` against a path to re-check.
    """

    points: np.ndarray
    params: CGParams
    scheme: str
    source_path_id: str = ""
    shell_levels: np.ndarray | None = None
    verification: dict = dfield(default_factory=dict)
    meta: dict = dfield(default_factory=dict)
    tree: "ShapeNode | None" = dfield(default=None, repr=False)

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.int64)
        if pts.ndim != 2 or len(pts) == 0:
            raise CollectionError("collection needs at least one anchor")
        if pts.shape[1] != self.params.d:
            raise CollectionError("anchor dimension does not match params.d")
        if (pts % self.params.L).any():
            raise CollectionError("anchors must lie on the sub-lattice L*Z^d")
        self.points = pts

    # -- basic accessors ----------------------------------------------------

    @property
    def n(self) -> int:
        return len(self.points)

    @property
    def d(self) -> int:
        return self.params.d

    @property
    def lattice(self) -> RenormLattice:
        return RenormLattice(self.params.L, self.params.K, self.params.d)

    @property
    def digest(self) -> str:
        payload = {
            "points": self.points.tolist(),
            "K": self.params.K,
            "L": self.params.L,
            "N": self.params.N,
            "d": self.params.d,
            "domain": self.params.domain,
            "rho": self.params.rho,
            "eps": self.params.eps,
            "scheme": self.scheme,
        }
        blob = json.dumps(payload, sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()

    @property
    def collection_id(self) -> str:
        return self.digest[:12]

    # -- geometry -----------------------------------------------------------

    def tau(self) -> np.ndarray:
        """Axis positions of the anchors under the radial gauge.

        The map z -> (gauge(z), 0, ..., 0) contracts distances (the gauge is
        1-Lipschitz for the sup-norm, which is dominated by the Euclidean
        norm), which is what makes segment capacities a lower-bound proxy
        for the collection.  Checked on every call.
        """
        u = self.params.gauge(self.points).astype(np.int64)
        du = np.abs(u[:, None] - u[None, :])
        dz = np.abs(self.points[:, None, :] - self.points[None, :, :]).max(axis=2)
        if (du > dz).any():
            raise CollectionError("axis projection failed the 1-Lipschitz check")
        return u

    def verify(self, path=None) -> dict:
        """Re-run the collection invariants; returns a report dict."""
        p = self.params
        rlat = self.lattice
        sep_req = rlat.min_separation
        if self.n > 1:
            diff = np.abs(self.points[:, None, :] - self.points[None, :, :]).max(axis=2)
            np.fill_diagonal(diff, np.iinfo(np.int64).max)
            min_sep = int(diff.min())
        else:
            min_sep = sep_req
        inclusion = all(p.box_in_domain(rlat.frame(z)) for z in self.points)
        upper = p.N / _sparsity_gauge(p.K * p.L, p.d)
        lower_ratio = self.n / upper
        try:
            tau_ok = True
            self.tau()
        except CollectionError:
            tau_ok = False
        report = {
            "separation_ok": bool(min_sep >= sep_req),
            "min_separation": min_sep,
            "required_separation": int(sep_req),
            "inclusion_ok": bool(inclusion),
            "cardinality_ok": bool(self.n <= upper + 1e-9),
            "n": self.n,
            "cardinality_upper": float(upper),
            "cardinality_lower_ratio": float(lower_ratio),
            "tau_lipschitz_ok": tau_ok,
            "relaxed": p.relaxed,
            "strict": p.strict,
        }
        if path is not None:
            pts = _as_points(path)
            per = []
            for z in self.points:
                cell = rlat.cell(z)
                frame = rlat.frame(z)
                in_cell, _ = _touch_masks(pts, np.asarray(cell.lo), np.asarray(cell.hi))
                _, on_rim = _touch_masks(pts, np.asarray(frame.lo), np.asarray(frame.hi))
                per.append(bool(in_cell.any() and on_rim.any()))
            report["crossing_per_anchor"] = per
            report["crossing_ok"] = bool(all(per))
        checks = [report["separation_ok"], report["inclusion_ok"],
                  report["cardinality_ok"], report["tau_lipschitz_ok"]]
        if path is not None:
            checks.append(report["crossing_ok"])
        report["passed"] = bool(all(checks))
        return report

    # -- construction -------------------------------------------------------

    @classmethod
    def _build(cls, points, params, scheme, path, source_path_id,
               shell_levels=None, meta=None, tree=None) -> "AdmissibleCollection":
        coll = cls(points=np.asarray(points, dtype=np.int64), params=params,
                   scheme=scheme, source_path_id=source_path_id,
                   shell_levels=None if shell_levels is None
                   else np.asarray(shell_levels, dtype=np.int64),
                   meta=dict(meta or {}), tree=tree)
        report = coll.verify(path)
        if not report["passed"]:
            raise CollectionError(f"collection failed verification: {report}")
        coll.verification = report
        return coll

    @classmethod
    def from_anchors(cls, anchors, params: CGParams, path=None,
                     source_path_id="manual") -> "AdmissibleCollection":
        """Hand-placed anchors; all invariants are still enforced.

        This is the door for geometries below the ``N >= 10*K*L`` floor
        (build the params with ``strict=False``); the scheme label says so.
        """
        return cls._build(anchors, params, "manual", path, source_path_id)

    # -- serialization ------------------------------------------------------

    def to_json(self) -> str:
        payload = {
            "points": self.points.tolist(),
            "params": {
                "K": self.params.K, "L": self.params.L, "N": self.params.N,
                "d": self.params.d, "domain": self.params.domain,
                "rho": self.params.rho, "eps": self.params.eps,
                "strict": self.params.strict,
            },
            "scheme": self.scheme,
            "source_path_id": self.source_path_id,
            "shell_levels": None if self.shell_levels is None
            else self.shell_levels.tolist(),
            "verification": self.verification,
            "digest": self.digest,
        }
        return json.dumps(payload, sort_keys=True, indent=1)

    def write_json(self, path) -> None:
        with open(path, "w") as fh:
            fh.write(self.to_json())


def read_collection_json(path_or_str) -> AdmissibleCollection:
    """Inverse of ``AdmissibleCollection.write_json`` (tree is not stored)."""
    try:
        payload = json.loads(path_or_str)
    except (json.JSONDecodeError, TypeError):
        with open(path_or_str) as fh:
            payload = json.load(fh)
    params = CGParams(**payload["params"])
    coll = AdmissibleCollection(
        points=np.asarray(payload["points"], dtype=np.int64), params=params,
        scheme=payload["scheme"], source_path_id=payload.get("source_path_id", ""),
        shell_levels=None if payload.get("shell_levels") is None
        else np.asarray(payload["shell_levels"], dtype=np.int64),
        verification=payload.get("verification", {}),
    )
    if payload.get("digest") and payload["digest"] != coll.digest:
        raise CollectionError("stored digest does not match the reloaded collection")
    return coll


# ---------------------------------------------------------------------------
# d = 3: first-exit shells


def coarse_grain_d3(path, p: CGParams) -> AdmissibleCollection:
    """Anchor the path's first exits through shells at gauge 3KL, 6KL, ...

    The path must cross the domain selected by ``p`` (raises ``ValueError``
    otherwise).  Anchors are the L-grid corners of the first-exit points;
    consecutive shells are 3KL apart, which forces the sup-separation
    (2K+1)L for K >= 3 and keeps every anchor's 5L box inside the domain.
    """
    if p.d != 3:
        raise ValueError("coarse_grain_d3 needs params with d=3")
    if not p.strict:
        raise ValueError("the shell scheme requires strict size parameters")
    pts, flipped = _orient_for_scheme(_as_points(path), p)
    n = p.shell_count()
    if n < 1:
        raise ValueError("domain too small to hold even one shell (need N >= 6KL)")
    step = 3 * p.K * p.L
    levels = step * np.arange(1, n + 1, dtype=np.int64)

    sig = p.gauge(pts)
    t0 = int(np.flatnonzero(p.root_mask(sig))[0])
    run_max = np.maximum.accumulate(sig[t0:])
    ti = t0 + np.searchsorted(run_max, levels, side="left")
    if not (sig[ti] == levels).all():
        raise RuntimeError("first-exit extraction missed a shell level")
    anchors = (np.floor_divide(pts[ti], p.L)) * p.L

    meta = {"exit_times": ti.tolist(), "oriented_flip": flipped,
            "shell_step": int(step)}
    return AdmissibleCollection._build(
        anchors, p, "shells-d3", pts, _path_id(pts),
        shell_levels=levels, meta=meta)


def _path_id(pts: np.ndarray) -> str:
    h = hashlib.sha256()
    h.update(np.ascontiguousarray(pts[:: max(1, len(pts) // 64)]).tobytes())
    h.update(str(len(pts)).encode())
    return h.hexdigest()[:12]


# ---------------------------------------------------------------------------
# porous axis projection


@dataclass
class PorousReport:
    """Capacity comparison of retained anchors against solid segments."""

    kept: int
    n: int
    rho: float
    tau_positions: np.ndarray
    cap_cells: float
    cap_segments: float
    cap_reference: float
    ratio_cells: float
    ratio_segments: float
    lambda_hat: float
    slack_segments: float
    meta: dict = dfield(default_factory=dict)


def porous_projection(coll: AdmissibleCollection, rho: float | None = None,
                      oracle: GreenOracle | None = None) -> PorousReport:
    """Project the first ceil((1-rho) n) anchors to the axis and compare caps.

    Three capacities: the union of the retained anchor cells, the union of
    axis segments of length L placed at the anchors' gauge positions (the
    1-Lipschitz image, so its capacity is a lower bound for the cells'), and
    a solid reference segment spanning the whole domain.  The reported
    ``lambda_hat`` is cap(cells) / (kept/n * cap(reference)).
    """
    p = coll.params
    if rho is None:
        rho = p.rho
    if not 0.0 < rho < 1.0:
        raise ValueError("rho must lie in (0, 1)")
    if oracle is None:
        oracle = GreenOracle(p.d)
    keep = int(math.ceil((1.0 - rho) * coll.n))
    kept_anchors = coll.points[:keep]
    tau = coll.tau()[:keep]

    L, d = p.L, p.d
    seg_pts = np.zeros((keep * L, d), dtype=np.int64)
    seg_pts[:, 0] = (tau[:, None] + np.arange(L)[None, :]).ravel()
    cap_segments = masked_grid_capacity(np.unique(seg_pts, axis=0), oracle=oracle).value

    cap_cells = box_union_capacity(kept_anchors, side=L, d=d, oracle=oracle).value

    if p.domain == "eps":
        ref_len = int(math.floor((1.0 - p.eps) * p.N + 1e-9))
    else:
        ref_len = p.N
    cap_ref = segment_capacity(ref_len, d=d, oracle=oracle).value

    ratio_cells = cap_cells / cap_ref
    ratio_segments = cap_segments / cap_ref
    lam = cap_cells / ((keep / coll.n) * cap_ref)
    slack = (1.0 - rho) - ratio_segments
    return PorousReport(
        kept=keep, n=coll.n, rho=float(rho), tau_positions=tau,
        cap_cells=cap_cells, cap_segments=cap_segments, cap_reference=cap_ref,
        ratio_cells=ratio_cells, ratio_segments=ratio_segments,
        lambda_hat=lam, slack_segments=slack,
        meta={"reference_length": ref_len, "collection": coll.collection_id,
              "domain": p.domain},
    )


# ---------------------------------------------------------------------------
# crossing-path generator (outward-drifted nearest-neighbour walk)


def random_crossing_path(p: CGParams, seed, *ids, drift: float = 0.4,
                         max_rounds: int = 12) -> np.ndarray:
    """A nearest-neighbour path crossing the domain, with outward drift.

    The walk starts on the inner target set (the origin, or a uniform point
    of the inner rim) and biases each step away from the domain centre, so
    its length is O(N d / drift) instead of the diffusive N^2.  Returns the
    path truncated at its first touch of the outer boundary.
    """
    from .rng import stream

    if not 0.0 < drift < 1.0:
        raise ValueError("drift must lie in (0, 1)")
    rng = stream(seed, "crossing-path", p.domain, p.N, *ids)
    d, N = p.d, p.N

    if p.domain == "ball":
        start = np.zeros(d, dtype=np.int64)
    elif p.domain == "frame":
        start = rng.integers(-N, 2 * N, size=d).astype(np.int64)
        j = int(rng.integers(d))
        start[j] = -N if rng.random() < 0.5 else 2 * N - 1
    else:
        R = N if p.domain == "annulus" else p.inner_radius
        start = rng.integers(-R, R + 1, size=d).astype(np.int64)
        j = int(rng.integers(d))
        start[j] = R if rng.random() < 0.5 else -R

    centre = np.full(d, (N - 1) // 2, dtype=np.int64) if p.domain == "frame" \
        else np.zeros(d, dtype=np.int64)
    v = (start - centre).astype(float)
    if not v.any():
        v = rng.standard_normal(d)
    p_plus = 0.5 + 0.5 * drift * np.sign(v)

    block = int(2.2 * p.span * d / drift) + 64
    pts = start[None, :]
    for _ in range(max_rounds):
        axes = rng.integers(0, d, size=block)
        sgn = np.where(rng.random(block) < p_plus[axes], 1, -1).astype(np.int64)
        steps = np.zeros((block, d), dtype=np.int64)
        steps[np.arange(block), axes] = sgn
        new = pts[-1] + np.cumsum(steps, axis=0)
        pts = np.concatenate([pts, new], axis=0)
        sig = p.gauge(pts)
        hit = np.flatnonzero(sig >= p.span)
        if hit.size:
            pts = pts[: int(hit[0]) + 1]
            if not p.crosses(pts):  # pragma: no cover - start is on the root set
                raise RuntimeError("generated path failed its own crossing check")
            return pts
    raise RuntimeError(f"no crossing after {max_rounds} blocks of {block} steps")


# ---------------------------------------------------------------------------
# d >= 4: binary refinement over a doubling ladder of scales


def length_scales(max_level: int) -> np.ndarray:
    """The scale ladder 1, 4, 10, 23, ... with ratio 2(1 + (m+1)^-2)."""
    L = np.empty(max_level + 1, dtype=np.int64)
    L[0] = 1
    for m in range(max_level):
        eps_m = 1.0 / (m + 1) ** 2
        L[m + 1] = int(math.ceil(2.0 * (1.0 + eps_m) * L[m]))
    return L


def _eps_seq(m: int) -> float:
    return 1.0 / (m + 1) ** 2


@dataclass
class ShapeNode:
    """One node of the refinement tree: an explicit connected point set.

    ``points`` is a *-connected subset of the annulus between the side-L_k
    box at ``anchor`` and its 3x enlargement, touching both the inner box's
    face shell and the enlargement's face shell; ``crossing`` is the
    sub-path that witnesses this.  Roles: "root", "inner" (child around the
    parent entry face), "outer" (child around the last exit from the shrunk
    parent core), "descent" (pruned single-child chain below the branch
    levels).
    """

    level: int
    anchor: np.ndarray
    points: np.ndarray
    crossing: np.ndarray
    role: str
    children: list = dfield(default_factory=list)
    meta: dict = dfield(default_factory=dict)

    def boxes(self, scales: np.ndarray):
        z = self.anchor
        Lk = int(scales[self.level])
        core = (z, z + Lk - 1)
        hull = (z - Lk, z + 2 * Lk - 1)
        return core, hull

    def check(self, scales: np.ndarray) -> None:
        """Assert the shape axioms; raises CollectionError on violation."""
        (clo, chi), (hlo, hhi) = self.boxes(scales)
        pts = self.points
        in_hull, on_hull = _touch_masks(pts, hlo, hhi)
        if not in_hull.all():
            raise CollectionError("shape leaves its hull box")
        core_in, core_face = _touch_masks(pts, clo, chi)
        if (core_in & ~core_face).any():
            raise CollectionError("shape enters the open core box")
        if not core_face.any() or not on_hull.any():
            raise CollectionError("shape must touch the core face and the hull face")
        lab = _star_labels(pts)
        if lab.max(initial=0) != 0:
            raise CollectionError("shape is not *-connected")
        if not _rows_contained(self.crossing, pts):
            raise CollectionError("witness sub-path escapes the shape")

    def walk(self):
        yield self
        for ch in self.children:
            yield from ch.walk()


def _star_labels(pts: np.ndarray) -> np.ndarray:
    """Connected-component labels under sup-distance-1 adjacency (sparse)."""
    m = len(pts)
    if m <= 1:
        return np.zeros(m, dtype=np.int64)
    tree = cKDTree(pts.astype(np.float64))
    pairs = tree.query_pairs(r=1.0001, p=np.inf, output_type="ndarray")
    if len(pairs) == 0:
        return np.arange(m, dtype=np.int64)
    g = coo_matrix((np.ones(len(pairs), dtype=np.int8),
                    (pairs[:, 0], pairs[:, 1])), shape=(m, m))
    return connected_components(g, directed=False)[1].astype(np.int64)


def _row_view(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a, dtype=np.int64)
    return a.view([("", np.int64)] * a.shape[1]).ravel()


def _rows_contained(sub: np.ndarray, table: np.ndarray) -> bool:
    tv = np.sort(_row_view(table))
    sv = _row_view(np.unique(sub, axis=0))
    idx = np.searchsorted(tv, sv)
    idx = np.minimum(idx, len(tv) - 1)
    return bool((tv[idx] == sv).all())


def _component_with(carrier: np.ndarray, seed: np.ndarray) -> np.ndarray:
    """The *-component of ``carrier`` containing every row of ``seed``."""
    lab = _star_labels(carrier)
    cv = _row_view(carrier)
    order = np.argsort(cv)
    sv = _row_view(np.unique(seed, axis=0))
    pos = np.searchsorted(cv[order], sv)
    if (pos >= len(order)).any() or (cv[order[pos]] != sv).any():
        raise CollectionError("seed path is not inside the carrier set")
    seed_labs = np.unique(lab[order[pos]])
    if len(seed_labs) != 1:
        raise CollectionError("seed path is split across components")
    return carrier[lab == seed_labs[0]]


def _min_supdist(A: np.ndarray, B: np.ndarray) -> float:
    tree = cKDTree(A.astype(np.float64))
    dist, _ = tree.query(B.astype(np.float64), k=1, p=np.inf)
    return float(np.min(dist))


def _aligned_cover_anchor(pt, box_lo, box_hi, side, ax, islow):
    """Anchor of the side-``side`` box inside [lo, hi] that contains ``pt``
    and whose face along ``ax`` lies in the chosen face of the big box."""
    lo = np.asarray(box_lo, dtype=np.int64)
    hi = np.asarray(box_hi, dtype=np.int64)
    extent = hi - lo + 1
    off = np.minimum((pt - lo) // side * side, extent - side)
    w = lo + off
    w[ax] = lo[ax] if islow else hi[ax] - side + 1
    return w


def _entry_face_axis(pt, lo, hi):
    on_lo = np.flatnonzero(pt == np.asarray(lo))
    on_hi = np.flatnonzero(pt == np.asarray(hi))
    if on_lo.size:
        return int(on_lo[0]), True
    if on_hi.size:
        return int(on_hi[0]), False
    raise CollectionError("expected the point to sit on a face of the box")


def _clip_to_hull_crossing(gamma: np.ndarray, clo, chi, hlo, hhi) -> np.ndarray:
    """Sub-path from the last visit of the core before the first touch of
    the hull's face shell; it stays inside the hull and off the open core."""
    clo = np.asarray(clo); chi = np.asarray(chi)
    _, on_hull_face = _touch_masks(gamma, np.asarray(hlo), np.asarray(hhi))
    hits = np.flatnonzero(on_hull_face)
    if hits.size == 0:
        raise CollectionError("sub-path never reaches the hull face shell")
    u = int(hits[0])
    in_core = ((gamma[: u + 1] >= clo) & (gamma[: u + 1] <= chi)).all(axis=1)
    starts = np.flatnonzero(in_core)
    if starts.size == 0:
        raise CollectionError("sub-path never visits the core box")
    t = int(starts[-1])
    return gamma[t : u + 1]


def _inner_child(node: ShapeNode, scales: np.ndarray) -> ShapeNode:
    """Child shape around the face through which the witness enters."""
    m = node.level
    Lm, Lm1 = int(scales[m]), int(scales[m - 1])
    z = node.anchor
    gamma = node.crossing
    clo, chi = z, z + Lm - 1
    ax, islow = _entry_face_axis(gamma[0], clo, chi)
    w = _aligned_cover_anchor(gamma[0], clo, chi, Lm1, ax, islow)
    g1 = _clip_to_hull_crossing(gamma, w, w + Lm1 - 1, w - Lm1, w + 2 * Lm1 - 1)
    carrier_mask = _in_box(node.points, w - Lm1, w + 2 * Lm1 - 1) \
        & ~_in_box(node.points, w + 1, w + Lm1 - 2)
    S1 = _component_with(node.points[carrier_mask], g1)
    return ShapeNode(level=m - 1, anchor=w, points=S1, crossing=g1, role="inner")


def _outer_child(node: ShapeNode, scales: np.ndarray) -> ShapeNode:
    """Child shape around the witness's last exit from the shrunk core.

    Points of the parent shape inside the open shrunk core are excluded
    from the carrier, which guarantees the inner/outer separation at the
    next scale regardless of how the parent shape folds back.
    """
    m = node.level
    Lm, Lm1 = int(scales[m]), int(scales[m - 1])
    z = node.anchor
    gamma = node.crossing
    slo, shi = z - Lm + Lm1, z + 2 * Lm - Lm1 - 1  # shrunk core
    inside = _in_box(gamma, slo, shi)
    t2 = int(np.flatnonzero(inside)[-1])
    q = gamma[t2]
    ax, islow = _entry_face_axis(q, slo, shi)
    w = _aligned_cover_anchor(q, slo, shi, Lm1, ax, islow)
    g2 = _clip_to_hull_crossing(gamma[t2:], w, w + Lm1 - 1, w - Lm1, w + 2 * Lm1 - 1)
    carrier_mask = _in_box(node.points, w - Lm1, w + 2 * Lm1 - 1) \
        & ~_in_box(node.points, w + 1, w + Lm1 - 2) \
        & ~_in_box(node.points, slo + 1, shi - 1)
    S2 = _component_with(node.points[carrier_mask], g2)
    return ShapeNode(level=m - 1, anchor=w, points=S2, crossing=g2, role="outer")


def _in_box(pts, lo, hi):
    return ((pts >= np.asarray(lo)) & (pts <= np.asarray(hi))).all(axis=1)


def coarse_grain_d4(path, p: CGParams) -> AdmissibleCollection:
    """Binary refinement of a d >= 4 crossing down the scale ladder.

    The path's own trace (restricted to the top annulus) is the initial
    shape; every split produces an inner child at the entry face and an
    outer child at the last exit of the shrunk core, separated by at least
    2 eps_m L_m.  Branching stops at the level where that separation first
    dominates the anchor separation (2K+3)L; below it only the inner child
    is followed, down to the first scale above 5L, where each leaf donates
    one anchor.  The resulting collection carries the full tree.
    """
    if p.d < 4:
        raise ValueError("coarse_grain_d4 needs params with d >= 4")
    if not p.strict:
        raise ValueError("the refinement scheme requires strict size parameters")
    pts, _ = _orient_for_scheme(_as_points(path), p)

    scales = length_scales(24)
    span = p.span
    n0 = int(np.searchsorted(scales, span // 10, side="right")) - 1
    if n0 < 1:
        raise ValueError("domain too small for the scale ladder (need span >= 40)")
    k0 = int(np.searchsorted(scales, 5 * p.L, side="left"))
    sep_target = (2 * p.K + 3) * p.L
    k = None
    for cand in range(max(k0, 2), n0 + 1):
        lo = 2.0 * _eps_seq(cand - 2) * scales[cand - 2]
        hi = 2.0 * _eps_seq(cand - 1) * scales[cand - 1]
        if lo <= sep_target <= hi:
            k = cand
            break
    if k is None:
        raise ValueError(
            f"no branching level matches the separation target {sep_target} "
            f"within levels [{max(k0, 2)}, {n0}]; adjust K or L")
    depth = n0 - k
    if depth > MAX_SPLIT_DEPTH:
        raise ValueError(
            f"refinement depth {depth} exceeds the cap {MAX_SPLIT_DEPTH} "
            f"(top level {n0}, branch level {k}); increase L or lower N")

    # --- initial shape: trace inside the annulus of the mid-gauge box -----
    sig = p.gauge(pts)
    t0 = int(np.flatnonzero(p.root_mask(sig))[0])
    mid = span // 2
    run = np.maximum.accumulate(sig[t0:])
    t_mid = t0 + int(np.searchsorted(run, mid, side="left"))
    Ln0 = int(scales[n0])
    z_init = np.floor_divide(pts[t_mid], Ln0) * Ln0
    clo, chi = z_init, z_init + Ln0 - 1
    hlo, hhi = z_init - Ln0, z_init + 2 * Ln0 - 1
    gamma0 = _clip_to_hull_crossing(pts[t_mid:], clo, chi, hlo, hhi)
    trace = np.unique(pts, axis=0)
    carrier = trace[_in_box(trace, hlo, hhi) & ~_in_box(trace, clo + 1, chi - 1)]
    S0 = _component_with(carrier, gamma0)
    root = ShapeNode(level=n0, anchor=z_init, points=S0, crossing=gamma0,
                     role="root")

    # --- branch to level k, then prune to a single inner chain ------------
    leaves: list[ShapeNode] = []
    min_child_sep = math.inf

    def grow(node: ShapeNode):
        nonlocal min_child_sep
        if node.level > k:
            c1 = _inner_child(node, scales)
            c2 = _outer_child(node, scales)
            sep = _min_supdist(c1.points, c2.points)
            need = 2.0 * _eps_seq(node.level - 1) * scales[node.level - 1]
            if sep < need:
                raise CollectionError(
                    f"children at level {node.level - 1} are {sep} apart, "
                    f"need {need}")
            node.meta["child_separation"] = sep
            min_child_sep = min(min_child_sep, sep)
            node.children = [c1, c2]
            grow(c1)
            grow(c2)
        else:
            cur = node
            while cur.level > k0:
                ch = _inner_child(cur, scales)
                ch.role = "descent"
                cur.children = [ch]
                cur = ch
            leaves.append(cur)

    grow(root)

    anchors = np.array([np.floor_divide(leaf.crossing[0], p.L) * p.L
                        for leaf in leaves], dtype=np.int64)
    meta = {
        "top_level": n0, "branch_level": k, "base_level": k0,
        "depth": depth, "leaf_count": len(leaves),
        "scales": scales[: n0 + 1].tolist(),
        "min_child_separation": None if math.isinf(min_child_sep)
        else float(min_child_sep),
        "separation_target": int(sep_target),
        "root_shape_size": int(len(S0)),
    }
    coll = AdmissibleCollection._build(
        anchors, p, "shape-tree-d4", pts, _path_id(pts), meta=meta, tree=root)
    for leaf in leaves:
        leaf.meta["anchor_cell"] = (np.floor_divide(leaf.crossing[0], p.L) * p.L).tolist()
    return coll


# ---------------------------------------------------------------------------
# kappa: capacity super-additivity down a synthetic refinement tree


@dataclass
class KappaReport:
    """Per-level capacity growth of separated leaf-box clouds.

    ``kappa_hat[i]`` is the minimum over box-side instances and retained
    subsets of cap(union)/rho at level ``levels[i]``; ``recursive_c`` is the
    fitted constant in kappa_hat[m] >= c * 2^(m-k) * kappa_hat[k].
    """

    k: int
    n: int
    d: int
    instances: list
    levels: np.ndarray
    counts: np.ndarray
    kappa_hat: np.ndarray
    per_instance: dict
    singleton: float
    display_C: float
    display_nodes: list
    recursive_c: float
    monotone: bool
    meta: dict = dfield(default_factory=dict)


def _kappa_cloud(m: int, k: int, r: int, scales: np.ndarray, d: int,
                 axis: int = 0) -> np.ndarray:
    """Leaf-box anchors of a two-child nesting with the ladder separations.

    At each level the two child clouds are translated copies placed exactly
    2 eps_{m-1} L_{m-1} apart (sup-norm, box to box) along a cycling axis —
    the tightest geometry the separation invariant allows.
    """
    if m == k:
        return np.zeros((1, d), dtype=np.int64)
    A = _kappa_cloud(m - 1, k, r, scales, d, axis=(axis + 1) % d)
    sep = max(1, int(math.ceil(2.0 * _eps_seq(m - 1) * scales[m - 1])))
    hi = int(A[:, axis].max()) + r - 1
    B = A.copy()
    B[:, axis] += hi + sep + 1 - int(A[:, axis].min())
    return np.concatenate([A, B], axis=0)


def kappa_check(n: int, k: int, instances=None, d: int = 4, seed: int = 0,
                subset_fractions=(1.0, 0.75, 0.5), trials: int = 2,
                oracle: GreenOracle | None = None) -> KappaReport:
    """Check capacity growth of leaf-box unions over synthetic trees.

    ``instances`` is a list of box sides r (each needs 2r <= eps_k L_k;
    defaults to the feasible members of (1, 2)).  For each instance and
    level m in [k, n] a cloud of 2^(m-k) boxes with the ladder separations
    is built; ``kappa_hat`` is the minimum over instances and sampled
    retained subsets (fraction rho) of cap(union)/rho.  Also fits the
    constant in the two-cloud super-additivity display
    cap(A u B) >= (cap A + cap B) / (1 + C max(cap)/dist^(d-2)) and the
    constant c in kappa_hat[m] >= c 2^(m-k) kappa_hat[k].
    """
    if n < k:
        raise ValueError("need n >= k")
    if n - k > MAX_SPLIT_DEPTH:
        raise ValueError(f"depth {n - k} exceeds the cap {MAX_SPLIT_DEPTH}")
    scales = length_scales(max(n, 1))
    r_cap = _eps_seq(k) * scales[k] / 2.0
    if instances is None:
        instances = [r for r in (1, 2) if r <= r_cap] or [1]
    instances = [int(r) for r in instances]
    for r in instances:
        if r < 1:
            raise ValueError("box side r must be >= 1")
        if r > r_cap:
            raise ValueError(
                f"box side {r} too large for level {k}: need 2r <= eps_k L_k "
                f"= {2 * r_cap:.3f}")
    if oracle is None:
        oracle = GreenOracle(d)
    from .rng import stream

    rng = stream(seed, "kappa-check", n, k, *instances)
    levels = np.arange(k, n + 1)
    counts = 2 ** (levels - k)
    kappa_hat = np.full(len(levels), np.inf)
    per_instance = {}
    display_nodes = []
    display_C = 0.0
    singleton = math.inf

    for r in instances:
        clouds = [_kappa_cloud(m, k, r, scales, d) for m in levels]

        def union_cap(anchors):
            return box_union_capacity(anchors, side=r, d=d, oracle=oracle).value

        cap_full = np.empty(len(levels))
        inst_hat = np.empty(len(levels))
        for i, cloud in enumerate(clouds):
            cap_full[i] = union_cap(cloud)
            best = cap_full[i]
            cnt = len(cloud)
            for rho in subset_fractions:
                take = int(math.ceil(rho * cnt))
                if take == cnt:
                    best = min(best, cap_full[i] / rho)
                    continue
                for _ in range(trials):
                    sel = rng.choice(cnt, size=take, replace=False)
                    best = min(best, union_cap(cloud[sel]) / rho)
            inst_hat[i] = best
        per_instance[r] = {"kappa_hat": inst_hat, "cap_full": cap_full}
        kappa_hat = np.minimum(kappa_hat, inst_hat)
        singleton = min(singleton, cap_full[0])

        for i in range(1, len(levels)):
            half = len(clouds[i]) // 2
            A, B = clouds[i][:half], clouds[i][half:]
            capA = cap_full[i - 1]
            capB = union_cap(B)
            cap_u = cap_full[i]
            # minimal Euclidean distance between the two box-point clouds
            ptsA = _material_boxes(A, r)
            ptsB = _material_boxes(B, r)
            s2 = float(cKDTree(ptsA.astype(float))
                       .query(ptsB.astype(float), k=1)[0].min())
            c_node = (max(0.0, (capA + capB) / cap_u - 1.0)
                      * s2 ** (d - 2) / max(capA, capB))
            display_nodes.append({"r": r, "level": int(levels[i]), "capA": capA,
                                  "capB": capB, "cap_union": cap_u,
                                  "dist2": s2, "C": c_node})
            display_C = max(display_C, c_node)

    growth = kappa_hat / (counts * kappa_hat[0])
    recursive_c = float(growth.min())
    monotone = bool((np.diff(kappa_hat) >= -1e-9 * np.abs(kappa_hat[:-1])).all())
    return KappaReport(
        k=k, n=n, d=d, instances=instances, levels=levels, counts=counts,
        kappa_hat=kappa_hat, per_instance=per_instance,
        singleton=float(singleton), display_C=display_C,
        display_nodes=display_nodes, recursive_c=recursive_c,
        monotone=monotone,
        meta={"scales": scales[: n + 1].tolist(),
              "subset_fractions": list(subset_fractions), "trials": trials},
    )


def _material_boxes(anchors: np.ndarray, r: int) -> np.ndarray:
    d = anchors.shape[1]
    offs = np.stack(np.meshgrid(*([np.arange(r)] * d), indexing="ij"),
                    axis=-1).reshape(-1, d)
    return (anchors[:, None, :] + offs[None, :, :]).reshape(-1, d)


# ---------------------------------------------------------------------------
# badness classification of anchors against a sampled field


@dataclass
class BadnessReport:
    """Per-anchor local/harmonic flags for one field and one collection.

    ``psi_bad[i]``: the local part of the field (conditioned to vanish
    outside the anchor's halo) crosses the 3L box around anchor i from its
    cell at level h' + eps/4.  ``xi_bad[i]``: the harmonic average exceeds
    h - h' - eps/4 somewhere on the 7L box.  For an anchor whose annulus is
    crossed inside the excursion set at level h, at least one flag fires —
    the sub-path either survives at the reduced level or the harmonic part
    carried the excess.
    """

    collection: str
    anchors: np.ndarray
    psi_bad: np.ndarray
    xi_bad: np.ndarray
    h: float
    h_prime: float
    eps: float
    rho: float
    field_seed: object = None

    @property
    def n(self) -> int:
        return len(self.anchors)

    @property
    def psi_count(self) -> int:
        return int(self.psi_bad.sum())

    @property
    def xi_count(self) -> int:
        return int(self.xi_bad.sum())

    @property
    def many_psi_bad(self) -> bool:
        """At least ceil(rho n) anchors have the local flag."""
        return self.psi_count >= math.ceil(self.rho * self.n)

    @property
    def many_xi_bad(self) -> bool:
        """At least n - ceil(rho n) anchors have the harmonic flag."""
        return self.xi_count >= self.n - math.ceil(self.rho * self.n)

    @property
    def disjunction_holds(self) -> bool:
        return self.many_psi_bad or self.many_xi_bad

    @property
    def per_anchor_dichotomy(self) -> np.ndarray:
        return self.psi_bad | self.xi_bad

    def rows(self):
        for z, pb, xb in zip(self.anchors, self.psi_bad, self.xi_bad):
            yield {
                "collection": self.collection,
                "z": "|".join(str(int(c)) for c in z),
                "psi_bad": int(pb), "xi_bad": int(xb),
                "h": self.h, "h_prime": self.h_prime, "eps": self.eps,
            }


def classify_badness(f: FieldSample, coll: AdmissibleCollection, h: float,
                     h_prime: float, eps: float) -> BadnessReport:
    """Split each anchor's crossing potential into local and harmonic flags.

    Requires h > h', 0 < eps <= 4(h - h') (the harmonic threshold
    h - h' - eps/4 must stay nonnegative; the two thresholds always sum to
    h, which is what forces the per-anchor dichotomy), and every anchor's
    halo (plus a one-vertex collar) inside the field's box; raises
    ``ValueError`` otherwise.  Deterministic given (field, collection,
    levels).
    """
    if not h > h_prime:
        raise ValueError("need h > h_prime")
    if not 0.0 < eps <= 4.0 * (h - h_prime):
        raise ValueError("need 0 < eps <= 4*(h - h_prime)")
    p = coll.params
    rlat = coll.lattice
    for z in coll.points:
        if not f.box.contains_box(rlat.halo(z).expand(1)):
            raise ValueError(
                f"halo of anchor {z.tolist()} (plus collar) leaves the field box")

    t_psi = h_prime + eps / 4.0
    t_xi = h - h_prime - eps / 4.0
    L = p.L
    psi_bad = np.zeros(coll.n, dtype=bool)
    xi_bad = np.zeros(coll.n, dtype=bool)
    for i, z in enumerate(coll.points):
        rec = harmonic_decompose(f, z, rlat)
        xi_bad[i] = harmonic_sup(rec, rlat.guard(z)) >= t_xi

        block = rlat.block(z)
        rel = np.asarray(block.lo) - np.asarray(rec.halo.lo)
        sl = tuple(slice(a, a + s) for a, s in zip(rel, block.shape))
        labels, _ = ndimage.label(rec.psi[sl] >= t_psi)
        cell_sl = tuple(slice(L, 2 * L) for _ in range(p.d))
        cell_labels = np.unique(labels[cell_sl])
        cell_labels = cell_labels[cell_labels > 0]
        if cell_labels.size:
            face_labels = _face_labels(labels)
            psi_bad[i] = bool(np.intersect1d(cell_labels, face_labels).size)
    return BadnessReport(
        collection=coll.collection_id, anchors=coll.points.copy(),
        psi_bad=psi_bad, xi_bad=xi_bad, h=h, h_prime=h_prime, eps=eps,
        rho=p.rho, field_seed=getattr(f, "seed", None))


def _face_labels(labels: np.ndarray) -> np.ndarray:
    found = []
    for ax in range(labels.ndim):
        for sl in (0, -1):
            idx = [slice(None)] * labels.ndim
            idx[ax] = sl
            found.append(np.unique(labels[tuple(idx)]))
    out = np.unique(np.concatenate(found))
    return out[out > 0]


BADNESS_CSV_COLUMNS = ("collection", "z", "psi_bad", "xi_bad", "h", "h_prime", "eps")


def write_badness_csv(reports, path) -> None:
    """Write one row per (collection, anchor) with both flags and levels."""
    import csv

    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=BADNESS_CSV_COLUMNS)
        writer.writeheader()
        for rep in reports:
            for row in rep.rows():
                writer.writerow(row)


# ---------------------------------------------------------------------------
# joint upper tail of the harmonic averages over a collection


@dataclass
class TailReport:
    """Empirical joint tail of per-anchor harmonic sups vs capacity bound."""

    a: float
    slack: float
    cap_sigma: float
    n: int
    n_samples: int
    hits: int
    p_hat: float
    ci: tuple
    alpha_hat: float
    alpha_hat_upper: float
    one_sided: bool
    marginal_p: np.ndarray
    meta: dict = dfield(default_factory=dict)

    def log_bound(self, alpha: float) -> float:
        a_eff = max(self.a - self.slack, 0.0)
        return -(a_eff ** 2) * self.cap_sigma / (2.0 * alpha)


def harmonic_sup_matrix(samples, coll: AdmissibleCollection) -> np.ndarray:
    """(n_samples, n_anchors) sups of the harmonic part over each 7L box."""
    rlat = coll.lattice
    out = np.empty((len(samples), coll.n))
    for si, f in enumerate(samples):
        for zi, z in enumerate(coll.points):
            rec = harmonic_decompose(f, z, rlat)
            out[si, zi] = harmonic_sup(rec, rlat.guard(z))
    return out


def harmonic_collection_tail(samples, coll: AdmissibleCollection, a: float,
                             sups: np.ndarray | None = None,
                             slack_coeff: float = BTIS_SLACK_COEFF,
                             cap_sigma: float | None = None,
                             oracle: GreenOracle | None = None) -> TailReport:
    """P[every anchor's harmonic sup >= a] against exp(-(a-slack)^2 cap / 2a).

    ``slack = (slack_coeff / K) sqrt(n / cap_sigma)`` with cap_sigma the
    capacity of the union of anchor cells.  ``alpha_hat`` solves the bound
    with equality at the point estimate (0 when there are no hits or the
    effective level is 0); ``alpha_hat_upper`` uses the Wilson upper limit,
    which is the honest side when hits are scarce.
    """
    if sups is None:
        sups = harmonic_sup_matrix(samples, coll)
    sups = np.asarray(sups, dtype=float)
    if sups.ndim != 2 or sups.shape[1] != coll.n:
        raise ValueError("sups must be (n_samples, n_anchors)")
    S = len(sups)
    if S == 0:
        raise ValueError("need at least one sample")
    p = coll.params
    if cap_sigma is None:
        cap_sigma = box_union_capacity(coll.points, side=p.L, d=p.d,
                                       oracle=oracle).value
    joint = (sups >= a).all(axis=1)
    hits = int(joint.sum())
    p_hat = hits / S
    lo, hi = wilson_interval(hits, S)
    slack = (slack_coeff / p.K) * math.sqrt(coll.n / cap_sigma)
    a_eff = max(a - slack, 0.0)

    def alpha_of(prob):
        if a_eff == 0.0:
            return 0.0
        if prob <= 0.0:
            return 0.0
        if prob >= 1.0:
            return math.inf
        return a_eff ** 2 * cap_sigma / (2.0 * (-math.log(prob)))

    return TailReport(
        a=a, slack=slack, cap_sigma=float(cap_sigma), n=coll.n, n_samples=S,
        hits=hits, p_hat=p_hat, ci=(lo, hi), alpha_hat=alpha_of(p_hat),
        alpha_hat_upper=alpha_of(hi), one_sided=hits < 5,
        marginal_p=(sups >= a).mean(axis=0),
        meta={"slack_coeff": slack_coeff, "collection": coll.collection_id},
    )


# ---------------------------------------------------------------------------
# entropy accounting over a corpus of collections


@dataclass
class EntropyReport:
    """Distinct-collection count against the log-budget scale."""

    n_paths: int
    n_distinct: int
    log_distinct: float
    scale: float
    c_fit: float
    meta: dict = dfield(default_factory=dict)


def entropy_accounting(collections) -> EntropyReport:
    """Count distinct anchor tuples and fit the constant in the log budget.

    The budget scale is (N/L) log(N/L) / K in d=3 and N/L in d>=4 (unit
    constant); ``c_fit = log(#distinct) / scale`` is the fitted multiplier.
    """
    collections = list(collections)
    if not collections:
        raise ValueError("need at least one collection")
    p = collections[0].params
    seen = {c.digest for c in collections}
    log_distinct = math.log(len(seen))
    scale = p.entropy_scale()
    return EntropyReport(
        n_paths=len(collections), n_distinct=len(seen),
        log_distinct=log_distinct, scale=scale, c_fit=log_distinct / scale,
        meta={"K": p.K, "L": p.L, "N": p.N, "d": p.d, "domain": p.domain},
    )
