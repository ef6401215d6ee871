"""Seeded experiment suites with reproducible run manifests.

``RunConfig`` is a flat, typed key-value configuration (unknown keys are
errors, and each suite validates its preconditions before any compute).
``run`` executes one named suite, writes its CSV outputs plus a versioned
JSON manifest into a fresh results subdirectory (never overwritten), and
updates a ``latest`` pointer file.  Every stochastic task draws from a
counter-based stream keyed by the master seed and the task's labels, so a
given (config, seed) pair reproduces byte-identical CSVs regardless of
worker count; ``rerun`` re-executes a manifest and compares digests.
"""

from __future__ import annotations

import concurrent.futures as cf
import csv
import dataclasses
import hashlib
import json
import math
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path

import numpy as np
from scipy import ndimage

from .capfast import segment_capacity
from .coarse import (
    BADNESS_CSV_COLUMNS,
    DOMAINS,
    AdmissibleCollection,
    CGParams,
    classify_badness,
    coarse_grain_d3,
    porous_projection,
    random_crossing_path,
)
from .events import one_arm, tube_crossing
from .field import sample_dirichlet
from .lattice import box_around, tube
from .rng import stream_key
from .stats import wilson_interval
from .tilt import entropic_lower_bound, importance_estimate, make_tilt, write_estimate_rows

__all__ = [
    "SUITES",
    "RunConfig",
    "RunManifest",
    "HStarEstimate",
    "run",
    "rerun",
    "hstar_estimate",
    "one_arm_scan",
    "validate_config",
    "suite_defaults",
    "load_config_file",
    "parse_config_text",
]

SUITES = (
    "capacity-sweep",
    "field-sample",
    "one-arm-scan",
    "tilt-estimate",
    "coarse-grain-demo",
    "hstar-estimate",
    "ef-inclusion",
)

MANIFEST_SCHEMA_VERSION = 1


# ---------------------------------------------------------------------------
# configuration


def _need_int(name, v):
    if isinstance(v, bool) or not isinstance(v, (int, np.integer)):
        raise ValueError(f"{name}: expected an integer, got {v!r}")
    return int(v)


def _need_float(name, v):
    if isinstance(v, bool) or not isinstance(v, (int, float, np.floating)):
        raise ValueError(f"{name}: expected a number, got {v!r}")
    return float(v)


def _need_opt_float(name, v):
    return None if v is None else _need_float(name, v)


def _need_str(name, v):
    if not isinstance(v, str):
        raise ValueError(f"{name}: expected a string, got {v!r}")
    return v


def _need_bool(name, v):
    if not isinstance(v, bool):
        raise ValueError(f"{name}: expected true/false, got {v!r}")
    return v


def _need_ints(name, v):
    if isinstance(v, (int, np.integer)) and not isinstance(v, bool):
        v = [v]
    if not isinstance(v, (list, tuple)):
        raise ValueError(f"{name}: expected a list of integers, got {v!r}")
    return tuple(_need_int(f"{name}[{i}]", x) for i, x in enumerate(v))


def _need_floats(name, v):
    if isinstance(v, (int, float, np.floating)) and not isinstance(v, bool):
        v = [v]
    if not isinstance(v, (list, tuple)):
        raise ValueError(f"{name}: expected a list of numbers, got {v!r}")
    return tuple(_need_float(f"{name}[{i}]", x) for i, x in enumerate(v))


_FIELD_CASTERS = {
    "suite": _need_str,
    "d": _need_int,
    "N": _need_int,
    "L": _need_int,
    "K": _need_int,
    "R": _need_int,
    "N_out": _need_int,
    "sizes": _need_ints,
    "h_levels": _need_floats,
    "delta": _need_float,
    "h_prime": _need_float,
    "eps_bad": _need_float,
    "eps_domain": _need_float,
    "rho": _need_float,
    "domain": _need_str,
    "h_star_ref": _need_opt_float,
    "replicas": _need_int,
    "seed": _need_int,
    "out": _need_str,
    "workers": _need_int,
    "relaxed_k": _need_bool,
}


@dataclass(frozen=True)
class RunConfig:
    """Flat, typed experiment configuration; unknown keys are rejected."""

    suite: str
    d: int = 3
    N: int = 0
    L: int = 0
    K: int = 4
    R: int = 2
    N_out: int = 0
    sizes: tuple = ()
    h_levels: tuple = ()
    delta: float = 0.0
    h_prime: float = 0.0
    eps_bad: float = 0.0
    eps_domain: float = 0.2
    rho: float = 0.25
    domain: str = "ball"
    h_star_ref: float | None = None
    replicas: int = 0
    seed: int = 0
    out: str = "runs"
    workers: int = 1
    relaxed_k: bool = False

    @classmethod
    def from_mapping(cls, m) -> "RunConfig":
        m = dict(m)
        unknown = sorted(set(m) - set(_FIELD_CASTERS))
        if unknown:
            raise ValueError(f"unknown config keys: {', '.join(unknown)}")
        if "suite" not in m:
            raise ValueError("config must name a suite")
        kw = {k: _FIELD_CASTERS[k](k, v) for k, v in m.items()}
        return cls(**kw)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["sizes"] = list(self.sizes)
        d["h_levels"] = list(self.h_levels)
        return d

    def resolved_n_out(self, N=None) -> int:
        base = self.N if N is None else N
        return self.N_out if self.N_out > 0 else self.R * base


def parse_config_text(text: str) -> dict:
    """Parse a config file: a JSON object, or flat ``key = value`` lines.

    In the line form, values are JSON fragments (numbers, lists, booleans,
    quoted strings); an unparseable value is taken as a bare string.
    """
    stripped = text.strip()
    if stripped.startswith(("{", "[")):
        obj = json.loads(stripped)
        if not isinstance(obj, dict):
            raise ValueError("JSON config must be an object")
        return obj
    out = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"line {lineno}: expected 'key = value', got {raw!r}")
        key, _, val = line.partition("=")
        key, val = key.strip(), val.strip()
        if not key:
            raise ValueError(f"line {lineno}: empty key")
        if key in out:
            raise ValueError(f"line {lineno}: duplicate key {key!r}")
        try:
            out[key] = json.loads(val)
        except json.JSONDecodeError:
            out[key] = val
    return out


def load_config_file(path) -> dict:
    return parse_config_text(Path(path).read_text())


_DEFAULTS = {
    "capacity-sweep": {"d": 3, "sizes": [256, 512, 1024, 2048, 4096]},
    "field-sample": {"d": 3, "N": 16, "replicas": 50},
    "one-arm-scan": {
        "d": 3, "sizes": [8, 12, 16], "h_levels": [0.9, 1.4],
        "R": 2, "replicas": 400, "h_star_ref": 1.15,
    },
    "tilt-estimate": {
        "d": 3, "N": 12, "L": 2, "h_levels": [0.5], "delta": 0.5,
        "replicas": 800,
    },
    "coarse-grain-demo": {
        "d": 3, "N": 1200, "L": 10, "K": 4, "domain": "ball", "rho": 0.25,
        "replicas": 8,
    },
    "hstar-estimate": {
        "d": 3, "sizes": [12, 16, 24],
        "h_levels": [round(0.4 + 0.1 * i, 10) for i in range(10)],
        "replicas": 300,
    },
    "ef-inclusion": {
        "d": 3, "N": 64, "L": 8, "K": 4, "h_levels": [0.25],
        "h_prime": 0.05, "eps_bad": 0.4, "replicas": 40,
    },
}


def suite_defaults(suite: str) -> dict:
    if suite not in SUITES:
        raise ValueError(f"unknown suite {suite!r}; choose from {', '.join(SUITES)}")
    d = dict(_DEFAULTS[suite])
    d["suite"] = suite
    return d


def validate_config(cfg: RunConfig) -> list[str]:
    """Itemized precondition failures for cfg's suite (empty = valid)."""
    errs = []
    if cfg.suite not in SUITES:
        return [f"unknown suite {cfg.suite!r}; choose from {', '.join(SUITES)}"]
    if cfg.workers < 1:
        errs.append("workers must be >= 1")
    if not cfg.out:
        errs.append("output directory must be nonempty")
    s = cfg.suite

    def needs_replicas(minimum=1):
        if cfg.replicas < minimum:
            errs.append(f"replicas must be >= {minimum} for {s}")

    if s == "capacity-sweep":
        if cfg.d not in (3, 4):
            errs.append("capacity-sweep supports d = 3 or 4")
        if not cfg.sizes or any(n < 2 for n in cfg.sizes):
            errs.append("sizes must be a nonempty list of integers >= 2")
    elif s == "field-sample":
        if cfg.d not in (3, 4):
            errs.append("field-sample supports d = 3 or 4")
        if cfg.N < 2:
            errs.append("N must be >= 2")
        needs_replicas()
    elif s == "one-arm-scan":
        if cfg.d != 3:
            errs.append("one-arm-scan is defined for d = 3")
        if len(cfg.sizes) < 2 or any(n < 4 for n in cfg.sizes):
            errs.append("need at least 2 sizes, all >= 4, to fit a slope")
        if not cfg.h_levels or any(h <= 0 for h in cfg.h_levels):
            errs.append("h_levels must be nonempty positive levels")
        if cfg.h_star_ref is None:
            if len(cfg.sizes) < 3:
                errs.append("locating the crossing bracket needs >= 3 sizes "
                            "(or set h_star_ref)")
            if cfg.h_levels and max(cfg.h_levels) <= min(cfg.h_levels):
                errs.append("need a spread of h_levels to bracket the "
                            "transition (or set h_star_ref)")
        elif cfg.h_star_ref <= 0:
            errs.append("h_star_ref must be positive")
        if cfg.N_out == 0 and cfg.R < 2:
            errs.append("confinement radius needs R >= 2 (or explicit N_out)")
        if cfg.N_out and cfg.sizes and cfg.N_out <= max(cfg.sizes):
            errs.append("explicit N_out must exceed every size")
        needs_replicas()
    elif s == "tilt-estimate":
        if cfg.d not in (3, 4):
            errs.append("tilt-estimate supports d = 3 or 4")
        if cfg.N < 4:
            errs.append("N must be >= 4")
        if cfg.L < 1:
            errs.append("tube half-width L must be >= 1")
        if cfg.delta <= 0:
            errs.append("delta must be positive")
        if not cfg.h_levels:
            errs.append("h_levels must be nonempty")
        needs_replicas(2)
    elif s == "coarse-grain-demo":
        if cfg.d != 3:
            errs.append("coarse-grain-demo is defined for d = 3")
        if cfg.K < 4:
            errs.append("K must be >= 4")
        elif cfg.K < 100 and not cfg.relaxed_k:
            errs.append(f"K = {cfg.K} is in the relaxed range; pass "
                        "--relaxed-k (or set relaxed_k) to accept it")
        if cfg.L < 1:
            errs.append("L must be >= 1")
        if cfg.K >= 4 and cfg.L >= 1 and cfg.N < 10 * cfg.K * cfg.L:
            errs.append("N must be >= 10 K L for the shell scheme")
        if cfg.domain not in DOMAINS:
            errs.append(f"domain must be one of {', '.join(DOMAINS)}")
        if not (0 < cfg.rho < 1):
            errs.append("rho must lie in (0, 1)")
        if cfg.domain == "eps" and not (0 < cfg.eps_domain < 1):
            errs.append("eps domain needs eps_domain in (0, 1)")
        needs_replicas()
    elif s == "hstar-estimate":
        if cfg.d not in (3, 4):
            errs.append("hstar-estimate supports d = 3 or 4")
        if len(cfg.sizes) < 3 or any(n < 4 for n in cfg.sizes):
            errs.append("need at least 3 sizes, all >= 4")
        hs = sorted(set(cfg.h_levels))
        if len(hs) < 2 or any(h <= 0 for h in hs):
            errs.append("h_levels must contain >= 2 distinct positive levels")
        needs_replicas()
    elif s == "ef-inclusion":
        if cfg.d != 3:
            errs.append("ef-inclusion is defined for d = 3")
        if cfg.K < 4:
            errs.append("K must be >= 4")
        elif cfg.K < 100 and not cfg.relaxed_k:
            errs.append(f"K = {cfg.K} is in the relaxed range; pass "
                        "--relaxed-k (or set relaxed_k) to accept it")
        if cfg.L < 1:
            errs.append("L must be >= 1")
        if cfg.K >= 4 and cfg.L >= 1 and cfg.N < (cfg.K + 2) * cfg.L:
            errs.append("N too small to place an interior anchor box")
        if not cfg.h_levels:
            errs.append("h_levels must contain the crossing level h")
        else:
            h = cfg.h_levels[0]
            if not (h > cfg.h_prime):
                errs.append("need h > h_prime")
            elif not (0 < cfg.eps_bad <= 4.0 * (h - cfg.h_prime)):
                errs.append("need 0 < eps_bad <= 4 (h - h_prime)")
        needs_replicas()
    return errs


# ---------------------------------------------------------------------------
# manifest


@dataclass
class RunManifest:
    schema_version: int
    suite: str
    config: dict
    code_version: str
    seed: int
    task_seeds: dict
    started: str
    finished: str
    outputs: dict  # filename -> sha256 hex digest
    checks: list  # [{"name", "ok", "detail"}]
    incomplete_tasks: list
    run_dir: str
    meta: dict = field(default_factory=dict)

    @property
    def complete(self) -> bool:
        return not self.incomplete_tasks

    @property
    def ok(self) -> bool:
        return self.complete and all(c["ok"] for c in self.checks)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def save(self, path) -> None:
        Path(path).write_text(
            json.dumps(self.to_dict(), sort_keys=True, indent=2) + "\n")

    @classmethod
    def load(cls, path) -> "RunManifest":
        payload = json.loads(Path(path).read_text())
        ver = payload.get("schema_version")
        if ver != MANIFEST_SCHEMA_VERSION:
            raise ValueError(f"unsupported manifest schema version {ver!r}")
        names = {f.name for f in dataclasses.fields(cls)}
        return cls(**{k: v for k, v in payload.items() if k in names})


def _code_version() -> str:
    try:
        from importlib.metadata import version

        return version("gffperc")
    except Exception:
        return "unknown"


def _utcnow() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


def _sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _fmt(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return str(v)


def _write_csv(path, header, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for r in rows:
            w.writerow([_fmt(v) for v in r])


def _star(pair):
    fn, args = pair
    return fn(*args)


def _pmap(fn, argtuples, workers: int):
    argtuples = list(argtuples)
    if workers <= 1 or len(argtuples) <= 1:
        return [fn(*a) for a in argtuples]
    with cf.ProcessPoolExecutor(max_workers=workers) as ex:
        return list(ex.map(_star, [(fn, a) for a in argtuples]))


def _hkey(h: float) -> str:
    return f"{h:.6g}"


# ---------------------------------------------------------------------------
# per-cell Monte Carlo tasks (module level: picklable for the worker pool)


def _origin_cluster_radius(vals: np.ndarray, h: float) -> int:
    """Sup-norm reach of the origin's component of {vals >= h}; -1 if closed."""
    mask = vals >= h
    centre = tuple(s // 2 for s in mask.shape)
    if not mask[centre]:
        return -1
    structure = ndimage.generate_binary_structure(mask.ndim, 1)
    labels, _ = ndimage.label(mask, structure=structure)
    idx = np.nonzero(labels == labels[centre])
    return max(int(np.abs(ii - c).max()) for ii, c in zip(idx, centre))


def _one_arm_cell(seed, tag, d, N, N_out, h, variant, replicas):
    """Hit count for the (truncated) one-arm event over `replicas` fields."""
    B = box_around(0, N_out, d)
    hk = _hkey(h)
    hits = 0
    for i in range(replicas):
        f = sample_dirichlet(B, seed, tag, hk, int(N), variant, i)
        rad = _origin_cluster_radius(f.values, h)
        if rad >= N and (variant == "plain" or rad < N_out):
            hits += 1
    return hits


def _cap_task(N, d):
    rep = segment_capacity(N, d)
    norm = rep.value * math.log(N) / N if d == 3 else rep.value / N
    return (N, d, rep.value, rep.lower, rep.upper, norm)


def _field_stat_task(seed, i, N, d):
    B = box_around(0, N, d)
    f = sample_dirichlet(B, seed, "field-sample", i)
    v = f.values
    centre = tuple(s // 2 for s in v.shape)
    key = "/".join(str(x) for x in stream_key(seed, "field-sample", i))
    return (i, key, float(v.mean()), float(v.std()), float(v.min()),
            float(v.max()), float(v[centre]))


def _cg_demo_task(seed, i, N, L, K, domain, eps_domain, rho):
    p = CGParams(K=K, L=L, N=N, domain=domain,
                 eps=eps_domain if domain == "eps" else 0.0)
    path = random_crossing_path(p, seed, "cg-demo", domain, i)
    c = coarse_grain_d3(path, p)
    v = c.verification
    por = porous_projection(c, rho)
    row = (i, domain, c.n, v["min_separation"], v["required_separation"],
           int(v["passed"]), por.kept, por.cap_cells, por.cap_segments,
           por.cap_reference, por.ratio_cells, por.ratio_segments,
           por.lambda_hat)
    blob = c.to_json() if i == 0 else None
    return row, blob, bool(v["passed"])


def _ef_attempt(seed, attempt, N, L, K, h, h_prime, eps):
    """One field sample; classify every one-arm positive at a bulk anchor."""
    B = box_around(0, N, 3)
    f = sample_dirichlet(B, seed, "ef", attempt)
    rep = one_arm(f, h, N)
    if not rep.outcome:
        return {"attempt": attempt, "one_arm": 0}
    pts = rep.witness
    sig = np.abs(pts).max(axis=1)
    if sig[0] > sig[-1]:
        pts, sig = pts[::-1], sig[::-1]
    r = L * ((N - (K + 1) * L + 1) // L)  # deepest anchor box that fits
    t = int(np.flatnonzero(np.maximum.accumulate(sig) >= r)[0])
    z = np.floor_divide(pts[t], L) * L
    params = CGParams(K=K, L=L, N=N, strict=False)
    coll = AdmissibleCollection.from_anchors([z], params, path=pts)
    br = classify_badness(f, coll, h, h_prime, eps)
    return {
        "attempt": attempt,
        "one_arm": 1,
        "z": "|".join(str(int(x)) for x in z),
        "psi_bad": int(br.psi_bad[0]),
        "xi_bad": int(br.xi_bad[0]),
        "dichotomy": int(br.per_anchor_dichotomy.all()),
        "disjunction": int(br.disjunction_holds),
        "collection": coll.collection_id,
    }


# ---------------------------------------------------------------------------
# named operations: crossing-bracket estimation and the one-arm scan


@dataclass
class HStarEstimate:
    estimate: float
    bracket: tuple
    method: str
    sizes: tuple
    h_grid: tuple
    curves: dict  # N -> list of (h, hits, n, p_hat, ci_lo, ci_hi)
    warnings: list
    meta: dict = field(default_factory=dict)


def hstar_estimate(sizes, h_grid, replicas, d=3, seed=0, workers=1) -> HStarEstimate:
    """Bracket the connectivity transition from crossing-probability curves.

    For each size N, estimates P[0 <-> boundary of B_N at level h] over the
    grid.  The bracket is located where the survival ratio between adjacent
    sizes p_big(h)/p_small(h) falls through 1/2 — below the transition the
    curves stay comparable, above it the larger size collapses first.  The
    heuristic and its settings are recorded; this is a finite-size reading,
    not a limit statement.
    """
    sizes = tuple(sorted(set(int(n) for n in sizes)))
    h_grid = tuple(sorted(set(float(h) for h in h_grid)))
    if len(sizes) < 3:
        raise ValueError("need at least 3 sizes")
    if len(h_grid) < 2:
        raise ValueError("need at least 2 grid levels")
    if replicas < 1:
        raise ValueError("need at least 1 replica")
    tasks = [(seed, "hstar", d, N, N, h, "plain", replicas)
             for N in sizes for h in h_grid]
    hits = _pmap(_one_arm_cell, tasks, workers)
    curves = {}
    it = iter(hits)
    for N in sizes:
        rows = []
        for h in h_grid:
            k = next(it)
            lo, hi = wilson_interval(k, replicas)
            rows.append((h, k, replicas, k / replicas, lo, hi))
        curves[N] = rows
    warnings = []
    # non-monotone wobble beyond the interval half-widths
    wobble = False
    for N, rows in curves.items():
        for a, b in zip(rows, rows[1:]):
            half = (a[5] - a[4]) / 2 + (b[5] - b[4]) / 2
            if b[3] - a[3] > half:
                wobble = True
                warnings.append(
                    f"N={N}: crossing probability rises from h={a[0]:g} "
                    f"to h={b[0]:g} beyond CI width")
    step = max(b - a for a, b in zip(h_grid, h_grid[1:]))
    crossings = []
    for Na, Nb in zip(sizes, sizes[1:]):
        pa = [r[3] for r in curves[Na]]
        pb = [r[3] for r in curves[Nb]]
        ratio = [q / p if p > 0 else 0.0 for p, q in zip(pa, pb)]
        cut = None
        for j in range(len(h_grid) - 1):
            if ratio[j] >= 0.5 > ratio[j + 1]:
                f0, f1 = ratio[j] - 0.5, ratio[j + 1] - 0.5
                cut = h_grid[j] + (h_grid[j + 1] - h_grid[j]) * f0 / (f0 - f1)
                break
        if cut is None:
            warnings.append(f"sizes ({Na},{Nb}): no ratio crossing on the grid")
        else:
            crossings.append(cut)
    if crossings:
        blo, bhi = min(crossings) - step, max(crossings) + step
    else:
        blo, bhi = h_grid[0], h_grid[-1]
        warnings.append("no crossings found: bracket widened to the full grid")
    if wobble:
        blo, bhi = blo - step, bhi + step
    blo = max(blo, h_grid[0] / 2, 1e-6)  # the bracket stays inside (0, inf)
    est = HStarEstimate(
        estimate=(blo + bhi) / 2,
        bracket=(blo, bhi),
        method="adjacent-size-survival-ratio-1/2-crossing",
        sizes=sizes,
        h_grid=h_grid,
        curves=curves,
        warnings=warnings,
        meta={"replicas": replicas, "d": d, "seed": seed,
              "crossings": crossings, "grid_step": step},
    )
    return est


def one_arm_scan(cfg: RunConfig) -> dict:
    """Cell-wise decay estimates of the (truncated) one-arm event.

    Levels above the transition bracket use the plain event {0 <-> bdry B_N};
    levels below it use the truncated variant whose cluster must die before
    reaching the confinement radius.  Post-processing fits -log(p_hat)
    against N/log N per level and reports the slope +- SE beside the
    quadratic reference (pi/6)(h - h_ref)^2; the fit is reported, never
    asserted.
    """
    errs = validate_config(cfg)
    if cfg.suite != "one-arm-scan":
        errs.insert(0, "config suite must be one-arm-scan")
    if errs:
        raise ValueError("invalid config:\n" + "\n".join("- " + e for e in errs))
    sizes = tuple(sorted(set(cfg.sizes)))
    if cfg.h_star_ref is not None:
        bracket = (cfg.h_star_ref, cfg.h_star_ref)
        method = "config-h_star_ref"
        warnings = []
    else:
        grid = tuple(round(float(x), 10) for x in
                     np.linspace(min(cfg.h_levels), max(cfg.h_levels), 9))
        est = hstar_estimate(sizes[:3], grid, cfg.replicas, d=cfg.d,
                             seed=cfg.seed, workers=cfg.workers)
        bracket, method, warnings = est.bracket, est.method, list(est.warnings)
    lo, hi = bracket
    inside = [h for h in cfg.h_levels if lo < h < hi]
    if inside:
        raise ValueError(
            f"h levels {inside} lie inside the transition bracket "
            f"({lo:.4g}, {hi:.4g}); pick levels clear of it")
    h_ref = (lo + hi) / 2
    tasks = []
    cells_meta = []
    for h in cfg.h_levels:
        variant = "plain" if h >= hi else "truncated"
        for N in sizes:
            n_out = N if variant == "plain" else cfg.resolved_n_out(N)
            tasks.append((cfg.seed, "one-arm", cfg.d, N, n_out, h, variant,
                          cfg.replicas))
            cells_meta.append((h, N, variant, n_out))
    hits = _pmap(_one_arm_cell, tasks, cfg.workers)
    cells = []
    for (h, N, variant, n_out), k in zip(cells_meta, hits):
        ci = wilson_interval(k, cfg.replicas)
        cells.append({"h": h, "N": N, "variant": variant, "N_out": n_out,
                      "hits": k, "n": cfg.replicas, "p_hat": k / cfg.replicas,
                      "ci_lo": ci[0], "ci_hi": ci[1],
                      "flagged": k == 0 or k == cfg.replicas})
    fits = []
    for h in cfg.h_levels:
        mine = [c for c in cells if c["h"] == h and not c["flagged"]]
        variant = "plain" if h >= hi else "truncated"
        if len(mine) < 2:
            fits.append({"h": h, "variant": variant, "slope": math.nan,
                         "slope_se": math.nan,
                         "reference": math.pi / 6 * (h - h_ref) ** 2,
                         "cells_used": len(mine), "h_ref": h_ref})
            continue
        x = np.array([c["N"] / math.log(c["N"]) for c in mine])
        y = np.array([-math.log(c["p_hat"]) for c in mine])
        slope, se = _ols_slope(x, y)
        fits.append({"h": h, "variant": variant, "slope": slope,
                     "slope_se": se,
                     "reference": math.pi / 6 * (h - h_ref) ** 2,
                     "cells_used": len(mine), "h_ref": h_ref})
    return {"cells": cells, "fits": fits, "bracket": bracket,
            "bracket_method": method, "h_ref": h_ref, "warnings": warnings}


def _ols_slope(x: np.ndarray, y: np.ndarray) -> tuple[float, float]:
    n = len(x)
    X = np.stack([np.ones(n), x], axis=1)
    beta, *_ = np.linalg.lstsq(X, y, rcond=None)
    resid = y - X @ beta
    dof = max(n - 2, 1)
    s2 = float(resid @ resid) / dof
    cov = s2 * np.linalg.inv(X.T @ X)
    return float(beta[1]), float(math.sqrt(max(cov[1, 1], 0.0)))


# ---------------------------------------------------------------------------
# suites


def _suite_capacity_sweep(cfg: RunConfig, rundir: Path) -> dict:
    sizes = tuple(sorted(set(cfg.sizes)))
    rows = _pmap(_cap_task, [(N, cfg.d) for N in sizes], cfg.workers)
    path = rundir / "capacity.csv"
    _write_csv(path, ["N", "d", "cap", "cap_lo", "cap_hi", "normalized"], rows)
    finite = all(np.isfinite(r[2]) and np.isfinite(r[5]) for r in rows)
    positive = all(r[2] > 0 for r in rows)
    return {
        "files": [path],
        "checks": [
            {"name": "capacities_finite", "ok": finite, "detail": ""},
            {"name": "capacities_positive", "ok": positive, "detail": ""},
        ],
        "task_seeds": {},
        "meta": {"normalized": {str(r[0]): r[5] for r in rows},
                 "normalization": "cap*log(N)/N" if cfg.d == 3 else "cap/N"},
        "incomplete": [],
    }


def _suite_field_sample(cfg: RunConfig, rundir: Path) -> dict:
    tasks = [(cfg.seed, i, cfg.N, cfg.d) for i in range(cfg.replicas)]
    rows = _pmap(_field_stat_task, tasks, cfg.workers)
    path = rundir / "fields.csv"
    _write_csv(path, ["replica", "stream_key", "mean", "std", "min", "max",
                      "centre"], rows)
    finite = all(np.isfinite(np.array(r[2:], dtype=float)).all() for r in rows)
    return {
        "files": [path],
        "checks": [{"name": "fields_finite", "ok": bool(finite), "detail": ""}],
        "task_seeds": {"field-sample": list(stream_key(cfg.seed, "field-sample"))},
        "meta": {"N": cfg.N, "d": cfg.d, "replicas": cfg.replicas},
        "incomplete": [],
    }


def _suite_one_arm_scan(cfg: RunConfig, rundir: Path) -> dict:
    res = one_arm_scan(cfg)
    cells_path = rundir / "cells.csv"
    _write_csv(
        cells_path,
        ["h", "N", "variant", "N_out", "hits", "n", "p_hat", "ci_lo",
         "ci_hi", "flagged", "seed"],
        [(c["h"], c["N"], c["variant"], c["N_out"], c["hits"], c["n"],
          c["p_hat"], c["ci_lo"], c["ci_hi"], int(c["flagged"]), cfg.seed)
         for c in res["cells"]],
    )
    fits_path = rundir / "fits.csv"
    _write_csv(
        fits_path,
        ["h", "variant", "slope", "slope_se", "reference", "h_ref",
         "cells_used"],
        [(f["h"], f["variant"], f["slope"], f["slope_se"], f["reference"],
          f["h_ref"], f["cells_used"]) for f in res["fits"]],
    )
    any_hits = any(c["hits"] > 0 for c in res["cells"])
    flagged = [f'h={c["h"]:g},N={c["N"]}' for c in res["cells"] if c["flagged"]]
    return {
        "files": [cells_path, fits_path],
        "checks": [{"name": "cells_have_hits", "ok": any_hits,
                    "detail": "every cell came back empty" if not any_hits else ""}],
        "task_seeds": {"one-arm": list(stream_key(cfg.seed, "one-arm")),
                       "hstar": list(stream_key(cfg.seed, "hstar"))},
        "meta": {"bracket": list(res["bracket"]),
                 "bracket_method": res["bracket_method"],
                 "h_ref": res["h_ref"], "warnings": res["warnings"],
                 "flagged_cells": flagged,
                 "fits": [{k: (None if isinstance(v, float) and math.isnan(v)
                               else v) for k, v in f.items()}
                          for f in res["fits"]]},
        "incomplete": [],
    }


def _suite_tilt_estimate(cfg: RunConfig, rundir: Path) -> dict:
    U = tube(cfg.N, cfg.L, cfg.d)
    K_pts = np.zeros((cfg.N + 1, cfg.d), dtype=np.int64)
    K_pts[:, 0] = np.arange(cfg.N + 1)
    spec = make_tilt(K_pts, U, cfg.delta)
    rows = []
    bound_meta = []
    unreliable = []
    for h in cfg.h_levels:
        def detector(f, _h=h):
            return tube_crossing(f, _h, cfg.N, cfg.L, witness=False)

        est = importance_estimate(detector, spec, cfg.replicas, cfg.seed,
                                  base_stream=("tilt", _hkey(h)),
                                  name="tube_crossing",
                                  params={"h": h, "N": cfg.N, "L": cfg.L})
        rows.append([est.event, _fmt(h), _fmt(cfg.delta), cfg.N, cfg.L,
                     est.n, _fmt(est.p_hat), _fmt(est.ci[0]), _fmt(est.ci[1]),
                     _fmt(est.ess), cfg.seed])
        p_tilted = est.meta["hits"] / est.n
        rec = entropic_lower_bound(p_tilted, spec.log_normalizer)
        bound_meta.append({"h": h, "p_tilted": p_tilted,
                           "entropy": spec.log_normalizer,
                           "lower_bound": rec.bound,
                           "degenerate": rec.degenerate,
                           "ess": est.ess, "method": est.method,
                           "reliable": est.reliable})
        if not est.reliable:
            unreliable.append(h)
    path = rundir / "estimates.csv"
    write_estimate_rows(path, rows)
    finite = all(np.isfinite(float(r[6])) for r in rows)
    return {
        "files": [path],
        "checks": [{"name": "estimates_finite", "ok": finite, "detail": ""}],
        "task_seeds": {"tilt": list(stream_key(cfg.seed, "tilt"))},
        "meta": {"capacity": spec.capacity,
                 "log_normalizer": spec.log_normalizer,
                 "entropic_bounds": bound_meta,
                 "unreliable_levels": unreliable},
        "incomplete": [],
    }


def _suite_coarse_grain_demo(cfg: RunConfig, rundir: Path) -> dict:
    tasks = [(cfg.seed, i, cfg.N, cfg.L, cfg.K, cfg.domain, cfg.eps_domain,
              cfg.rho) for i in range(cfg.replicas)]
    results = _pmap(_cg_demo_task, tasks, cfg.workers)
    rows = [r[0] for r in results]
    path = rundir / "collections.csv"
    _write_csv(
        path,
        ["replica", "domain", "n", "min_separation", "required_separation",
         "passed", "kept", "cap_cells", "cap_segments", "cap_reference",
         "ratio_cells", "ratio_segments", "lambda_hat"],
        rows,
    )
    files = [path]
    blob = results[0][1]
    if blob is not None:
        jpath = rundir / "collection-000.json"
        jpath.write_text(blob)
        files.append(jpath)
    all_pass = all(r[2] for r in results)
    ratios = [r[0][10] for r in results]
    return {
        "files": files,
        "checks": [
            {"name": "collections_pass", "ok": all_pass,
             "detail": "" if all_pass else "a collection failed verification"},
            {"name": "retention_positive", "ok": all(x > 0 for x in ratios),
             "detail": ""},
        ],
        "task_seeds": {"cg-demo": list(stream_key(cfg.seed, "cg-demo"))},
        "meta": {"mean_ratio_cells": float(np.mean(ratios)),
                 "domain": cfg.domain},
        "incomplete": [],
    }


def _suite_hstar_estimate(cfg: RunConfig, rundir: Path) -> dict:
    est = hstar_estimate(cfg.sizes, cfg.h_levels, cfg.replicas, d=cfg.d,
                         seed=cfg.seed, workers=cfg.workers)
    rows = [(N, h, k, n, p, lo, hi, cfg.seed)
            for N in est.sizes for (h, k, n, p, lo, hi) in est.curves[N]]
    path = rundir / "curves.csv"
    _write_csv(path, ["N", "h", "hits", "n", "p_hat", "ci_lo", "ci_hi",
                      "seed"], rows)
    ok = 0 < est.bracket[0] <= est.bracket[1] < math.inf
    return {
        "files": [path],
        "checks": [{"name": "bracket_in_(0,inf)", "ok": ok,
                    "detail": f"bracket {est.bracket}"}],
        "task_seeds": {"hstar": list(stream_key(cfg.seed, "hstar"))},
        "meta": {"estimate": est.estimate, "bracket": list(est.bracket),
                 "method": est.method, "warnings": est.warnings},
        "incomplete": [],
    }


def _suite_ef_inclusion(cfg: RunConfig, rundir: Path) -> dict:
    h = cfg.h_levels[0]
    need = cfg.replicas
    max_attempts = max(40 * need, 200)
    block = max(min(4 * need, 256), 16)
    rows = []
    positives = []
    attempt = 0
    while len(positives) < need and attempt < max_attempts:
        todo = min(block, max_attempts - attempt)
        tasks = [(cfg.seed, attempt + j, cfg.N, cfg.L, cfg.K, h, cfg.h_prime,
                  cfg.eps_bad) for j in range(todo)]
        out = _pmap(_ef_attempt, tasks, cfg.workers)
        attempt += todo
        for r in out:
            rows.append(r)
            if r["one_arm"]:
                positives.append(r)
    rows.sort(key=lambda r: r["attempt"])
    positives = [r for r in rows if r["one_arm"]][:need]
    kept_ids = {r["attempt"] for r in positives}
    samples_path = rundir / "samples.csv"
    _write_csv(
        samples_path,
        ["attempt", "one_arm", "counted", "z", "psi_bad", "xi_bad",
         "dichotomy", "disjunction", "seed"],
        [(r["attempt"], r["one_arm"], int(r["attempt"] in kept_ids),
          r.get("z", ""), r.get("psi_bad", ""), r.get("xi_bad", ""),
          r.get("dichotomy", ""), r.get("disjunction", ""), cfg.seed)
         for r in rows],
    )
    badness_path = rundir / "badness.csv"
    with open(badness_path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(BADNESS_CSV_COLUMNS))
        w.writeheader()
        for r in positives:
            w.writerow({"collection": r["collection"], "z": r["z"],
                        "psi_bad": r["psi_bad"], "xi_bad": r["xi_bad"],
                        "h": _fmt(h), "h_prime": _fmt(cfg.h_prime),
                        "eps": _fmt(cfg.eps_bad)})
    n_pos = len(positives)
    total_pos = sum(r["one_arm"] for r in rows)
    dich = all(r["dichotomy"] for r in positives) if positives else False
    disj = all(r["disjunction"] for r in positives) if positives else False
    incomplete = [] if n_pos >= need else [
        f"only {n_pos}/{need} one-arm positives within {attempt} attempts"]
    return {
        "files": [samples_path, badness_path],
        "checks": [
            {"name": "dichotomy_100pct", "ok": dich,
             "detail": f"{sum(r['dichotomy'] for r in positives)}/{n_pos}"},
            {"name": "disjunction_100pct", "ok": disj,
             "detail": f"{sum(r['disjunction'] for r in positives)}/{n_pos}"},
        ],
        "task_seeds": {"ef": list(stream_key(cfg.seed, "ef"))},
        "meta": {"positives": n_pos, "attempts": attempt,
                 "positive_rate": total_pos / attempt if attempt else 0.0,
                 "anchor_radius": cfg.L * ((cfg.N - (cfg.K + 1) * cfg.L + 1)
                                           // cfg.L)},
        "incomplete": incomplete,
    }


_SUITE_FNS = {
    "capacity-sweep": _suite_capacity_sweep,
    "field-sample": _suite_field_sample,
    "one-arm-scan": _suite_one_arm_scan,
    "tilt-estimate": _suite_tilt_estimate,
    "coarse-grain-demo": _suite_coarse_grain_demo,
    "hstar-estimate": _suite_hstar_estimate,
    "ef-inclusion": _suite_ef_inclusion,
}


# ---------------------------------------------------------------------------
# run / rerun


def run(cfg: RunConfig) -> RunManifest:
    """Execute cfg's suite into a fresh results subdirectory."""
    errs = validate_config(cfg)
    if errs:
        raise ValueError("invalid config:\n" + "\n".join("- " + e for e in errs))
    outroot = Path(cfg.out)
    outroot.mkdir(parents=True, exist_ok=True)
    digest = hashlib.sha256(
        json.dumps(cfg.to_dict(), sort_keys=True).encode()).hexdigest()[:8]
    prefix = f"{cfg.suite}-{digest}-"
    idx = 1 + sum(1 for p in outroot.iterdir() if p.name.startswith(prefix))
    rundir = outroot / f"{prefix}{idx:03d}"
    while rundir.exists():
        idx += 1
        rundir = outroot / f"{prefix}{idx:03d}"
    rundir.mkdir()  # a run directory is never reused or overwritten
    started = _utcnow()
    result = _SUITE_FNS[cfg.suite](cfg, rundir)
    finished = _utcnow()
    outputs = {Path(p).name: _sha256_file(p) for p in result["files"]}
    manifest = RunManifest(
        schema_version=MANIFEST_SCHEMA_VERSION,
        suite=cfg.suite,
        config=cfg.to_dict(),
        code_version=_code_version(),
        seed=cfg.seed,
        task_seeds=result["task_seeds"],
        started=started,
        finished=finished,
        outputs=outputs,
        checks=result["checks"],
        incomplete_tasks=result["incomplete"],
        run_dir=str(rundir),
        meta=result["meta"],
    )
    manifest.save(rundir / "manifest.json")
    (outroot / "latest").write_text(rundir.name + "\n")
    return manifest


def rerun(manifest_path) -> tuple[RunManifest, bool]:
    """Re-execute a saved manifest; report whether the CSV digests match."""
    old = RunManifest.load(manifest_path)
    cfg = RunConfig.from_mapping(old.config)
    new = run(cfg)
    return new, new.outputs == old.outputs
