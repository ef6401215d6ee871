"""Mean-shift (Cameron-Martin) tilting and importance sampling.

To make a rare "connection above level" event typical, the zero-boundary
field on a box U is shifted by the harmonic function

    f(x) = delta * P_x[walk hits K before leaving U],

which equals delta on K, vanishes outside U, and interpolates harmonically
in between.  The shifted law has Radon-Nikodym density

    exp( delta * <e, phi> - delta^2 * cap_U(K) / 2 )

with e the equilibrium measure of K relative to U, so unbiased estimates of
plain-law probabilities are importance-weighted averages over shifted
samples.  The relative entropy of the shifted law is delta^2 cap_U(K)/2,
which feeds a Jensen-type lower bound on the plain probability.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np
from scipy import stats as sps

from .field import FieldSample, dirichlet_batch, sample_dirichlet
from .lattice import Box, PointSet
from .potential import equilibrium_measure, harmonic_escape
from .rng import stream

__all__ = [
    "TiltSpec",
    "ImportanceEstimate",
    "EntropyBoundRecord",
    "make_tilt",
    "sample_tilted",
    "importance_estimate",
    "entropic_lower_bound",
    "TILT_CSV_COLUMNS",
    "write_estimate_rows",
]

_HARMONIC_TOL = 1e-10
_KURTOSIS_CUTOFF = 5.0  # excess kurtosis of log-weights above which we bootstrap
_BOOTSTRAP_RESAMPLES = 2000


@dataclass
class TiltSpec:
    K: PointSet
    U: Box
    delta: float
    shift: np.ndarray  # f over U.shape
    eq_points: np.ndarray  # (m, d)
    eq_weights: np.ndarray  # (m,)
    capacity: float
    meta: dict = field(default_factory=dict)

    @property
    def log_normalizer(self) -> float:
        """delta^2 * cap_U(K) / 2 = relative entropy of the tilted law."""
        return 0.5 * self.delta**2 * self.capacity

    def shift_at(self, pts) -> np.ndarray:
        pts = np.atleast_2d(np.asarray(pts, dtype=np.int64))
        out = np.zeros(len(pts))
        inb = self.U.contains(pts)
        rel = pts[inb] - np.asarray(self.U.lo)
        out[inb] = self.shift[tuple(rel.T)]
        return out

    def log_density(self, f: FieldSample) -> float:
        """log dP_tilted/dP at the configuration carried by `f`."""
        phi_K = f.at(self.eq_points)
        return self.delta * float(self.eq_weights @ phi_K) - self.log_normalizer


def _laplacian_residual(shift: np.ndarray, solve_mask: np.ndarray) -> float:
    """max |f - avg(neighbours)| over solve_mask, zero outside the grid."""
    d = shift.ndim
    acc = np.zeros_like(shift)
    for ax in range(d):
        for s in (1, -1):
            rolled = np.roll(shift, s, axis=ax)
            edge = [slice(None)] * d
            edge[ax] = 0 if s == 1 else -1
            rolled[tuple(edge)] = 0.0
            acc += rolled
    res = shift - acc / (2 * d)
    return float(np.abs(res[solve_mask]).max(initial=0.0))


def make_tilt(K, U: Box, delta: float, rtol: float = 1e-12) -> TiltSpec:
    """Build the harmonic shift of height delta on K inside the box U."""
    if not isinstance(U, Box):
        raise ValueError("U must be a Box")
    esc = harmonic_escape(U, K, rtol=rtol)
    hit = 1.0 - esc.u  # P_x[H_K < T_U] on the grid
    np.clip(hit, 0.0, 1.0, out=hit)
    eq = equilibrium_measure(K, U, rtol=rtol)
    Kps = K if isinstance(K, PointSet) else PointSet(np.atleast_2d(
        np.asarray(K, dtype=np.int64)), d=U.d)
    kmask = Kps.mask_in(U)
    if not np.all(hit[kmask] == 1.0):
        raise ValueError("hitting probability must be exactly 1 on K")
    resid = _laplacian_residual(delta * hit, esc.inside)
    if resid > _HARMONIC_TOL * max(1.0, abs(delta)):
        raise ValueError(f"shift is not harmonic off K: residual {resid}")
    return TiltSpec(
        K=Kps,
        U=U,
        delta=float(delta),
        shift=delta * hit,
        eq_points=eq.points,
        eq_weights=eq.weights,
        capacity=eq.capacity,
        meta={"solver": esc.info, "harmonic_residual": resid,
              "equilibrium_method": eq.method},
    )


def sample_tilted(spec: TiltSpec, seed: int, *stream_ids) -> FieldSample:
    """One shifted sample; delta = 0 reproduces sample_dirichlet bitwise."""
    base = sample_dirichlet(spec.U, seed, *stream_ids)
    vals = base.values if spec.delta == 0.0 else base.values + spec.shift
    return FieldSample(spec.U, vals, "tilted", seed, tuple(stream_ids))


@dataclass
class ImportanceEstimate:
    event: str
    params: dict
    p_hat: float
    ci: tuple[float, float]  # 95%
    ess: float
    n: int
    method: str  # "normal" | "bootstrap"
    reliable: bool  # ESS >= 10
    warn_low_ess: bool  # ESS < 100
    meta: dict = field(default_factory=dict)


def _weight_ci(w: np.ndarray, rng) -> tuple[float, tuple[float, float], str]:
    p = float(w.mean())
    hits = w[w > 0]
    heavy = False
    if len(hits) >= 8:
        lk = float(sps.kurtosis(np.log(hits)))
        heavy = lk > _KURTOSIS_CUTOFF
    if heavy:
        n = len(w)
        idx = rng.integers(0, n, size=(_BOOTSTRAP_RESAMPLES, n))
        means = w[idx].mean(axis=1)
        lo, hi = np.percentile(means, [2.5, 97.5])
        return p, (float(lo), float(hi)), "bootstrap"
    se = float(w.std(ddof=1) / math.sqrt(len(w))) if len(w) > 1 else 0.0
    return p, (p - 1.96 * se, p + 1.96 * se), "normal"


def importance_estimate(event, spec: TiltSpec, n: int, seed: int,
                        base_stream: tuple = (), name: str = "event",
                        params: dict | None = None) -> ImportanceEstimate:
    """Estimate the plain-law probability of `event` from n tilted samples.

    `event` maps a FieldSample to a bool or to an object with `.outcome`.
    Replica i uses the same stream as sample_tilted(spec, seed, *base, i).
    """
    if n < 2:
        raise ValueError("need at least 2 replicas")
    batch = dirichlet_batch(spec.U, seed, n, base_stream)
    lo = np.asarray(spec.U.lo)
    kidx = tuple((spec.eq_points - lo).T)
    w = np.zeros(n)
    for i in range(n):
        vals = batch[i] if spec.delta == 0.0 else batch[i] + spec.shift
        f = FieldSample(spec.U, vals, "tilted", seed, (*base_stream, i))
        res = event(f)
        hit = res.outcome if hasattr(res, "outcome") else bool(res)
        if hit:
            phi_K = vals[kidx]
            w[i] = math.exp(-spec.delta * float(spec.eq_weights @ phi_K)
                            + spec.log_normalizer)
    s1, s2 = w.sum(), (w**2).sum()
    ess = float(s1 * s1 / s2) if s2 > 0 else 0.0
    p, ci, method = _weight_ci(w, stream(seed, "tilt-ci", *base_stream))
    return ImportanceEstimate(
        event=name,
        params=dict(params or {}),
        p_hat=p,
        ci=(max(ci[0], 0.0), ci[1]),
        ess=ess,
        n=n,
        method=method,
        reliable=ess >= 10.0,
        warn_low_ess=ess < 100.0,
        meta={"hits": int((w > 0).sum()), "delta": spec.delta,
              "capacity": spec.capacity},
    )


@dataclass
class EntropyBoundRecord:
    p_tilted: float
    entropy: float
    bound: float
    degenerate: bool = False

    def __post_init__(self):
        if self.bound > 1.0 + 1e-12:
            raise ValueError("lower bound on a probability exceeds 1")


def entropic_lower_bound(p_tilted: float, H: float) -> EntropyBoundRecord:
    """Jensen-type certificate: P[A] >= p * exp(-(H + 1/e)/p)."""
    if not (0.0 <= p_tilted <= 1.0):
        raise ValueError("p_tilted must lie in [0, 1]")
    if H < 0:
        raise ValueError("relative entropy must be nonnegative")
    if p_tilted == 0.0:
        return EntropyBoundRecord(0.0, H, 0.0, degenerate=True)
    bound = p_tilted * math.exp(-(H + 1.0 / math.e) / p_tilted)
    return EntropyBoundRecord(p_tilted, H, bound)


TILT_CSV_COLUMNS = ["event", "h", "delta", "N", "L", "n",
                    "p_hat", "ci_lo", "ci_hi", "ess", "seed"]


def write_estimate_rows(path, rows, append: bool = False):
    """rows: iterables matching TILT_CSV_COLUMNS."""
    mode = "a" if append else "w"
    with open(path, mode, newline="") as fh:
        w = csv.writer(fh)
        if not append:
            w.writerow(TILT_CSV_COLUMNS)
        for r in rows:
            w.writerow(list(r))
