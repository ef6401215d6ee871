"""Eleven end-to-end acceptance checks, one printed verdict line each.

Run with output enabled so the scorecard is visible:

    python3 -m pytest tests/test_acceptance.py -v -s

Every test prints ``[PASS|FAIL] criterion NN (...): detail`` before its
assert, so even a broken run leaves one readable line per criterion.  The
Monte Carlo checks (8-11) take minutes each on a single core; the whole
file runs in roughly half an hour.  Sample sizes, tolerances, and runtime
budgets are frozen here on purpose - a regression should be fixed in the
library, not by loosening this file.
"""

import math
import time

import numpy as np
from scipy import stats as sps

from gffperc.capfast import segment_capacity
from gffperc.coarse import (
    DOMAINS,
    AdmissibleCollection,
    CGParams,
    coarse_grain_d3,
    harmonic_collection_tail,
    porous_projection,
    random_crossing_path,
)
from gffperc.field import (
    FieldSample,
    dirichlet_batch,
    extend_midpoints,
    harmonic_decompose,
    harmonic_sup,
    sample_dirichlet,
)
from gffperc.greens import GreenOracle, green0_series
from gffperc.lattice import RenormLattice, box_around
from gffperc.potential import (
    capacity,
    equilibrium_measure,
    harmonic_escape,
    hitting_matrix,
    killed_green_matrix,
    variational_lower_bound,
)
from gffperc.runner import RunConfig, hstar_estimate, run
from gffperc.tilt import (
    entropic_lower_bound,
    importance_estimate,
    make_tilt,
    sample_tilted,
)

SEED = 20260816


def verdict(num: int, name: str, ok: bool, detail: str) -> bool:
    state = "PASS" if ok else "FAIL"
    print(f"[{state}] criterion {num:02d} ({name}): {detail}", flush=True)
    return ok


# ---------------------------------------------------------------------------
# 1-2: line capacities at scale


def test_criterion_01_d3_segment_capacity_growth():
    t0 = time.perf_counter()
    sizes = (2**10, 2**12, 2**14)
    target = math.pi / 3.0
    normed = [segment_capacity(N, 3).value * math.log(N) / N for N in sizes]
    elapsed = time.perf_counter() - t0
    in_band = all(0.80 * target <= v <= 1.30 * target for v in normed)
    gaps = [abs(v - target) for v in normed]
    approaching = gaps[0] > gaps[1] > gaps[2]
    ok = in_band and approaching and elapsed < 300.0
    assert verdict(
        1, "d=3 line capacity ~ (pi/3) N/log N", ok,
        f"cap*log(N)/N at N=2^10,2^12,2^14 = "
        + ", ".join(f"{v:.4f}" for v in normed)
        + f"; band [{0.80 * target:.4f}, {1.30 * target:.4f}] around "
        f"pi/3 = {target:.4f}; gap shrinking: {approaching}; {elapsed:.1f}s",
    )


def test_criterion_02_d4_segment_capacity_linear():
    t0 = time.perf_counter()
    sizes = [2**k for k in range(8, 13)]
    normed = [segment_capacity(N, 4).value / N for N in sizes]
    elapsed = time.perf_counter() - t0
    center = sum(normed) / len(normed)
    spread = max(abs(v - center) for v in normed) / center
    ok = spread <= 0.15 and elapsed < 300.0
    assert verdict(
        2, "d=4 line capacity grows linearly", ok,
        "cap/N at N=2^8..2^12 = " + ", ".join(f"{v:.4f}" for v in normed)
        + f"; max spread {100 * spread:.2f}% of mean (<= 15%); {elapsed:.1f}s",
    )


# ---------------------------------------------------------------------------
# 3-4: exact identities and the point capacity


def test_criterion_03_potential_identities_random_instances():
    t0 = time.perf_counter()
    rng = np.random.default_rng(SEED)
    g3 = GreenOracle(3)
    worst = {"last-exit": 0.0, "sweeping": 0.0,
             "variational": 0.0, "sandwich": 0.0}
    for _ in range(50):
        rU = int(rng.integers(5, 8))
        U = box_around(0, rU, 3)
        k_pts = np.unique(
            rng.integers(-2, 3, size=(int(rng.integers(2, 6)), 3)), axis=0)
        big = np.unique(np.vstack(
            [k_pts, rng.integers(-3, 4, size=(int(rng.integers(2, 5)), 3))]
        ), axis=0)
        eqK = equilibrium_measure(k_pts, U=U)
        eqB = equilibrium_measure(big, U=U)

        # last-exit: P_x[hit K before leaving U] = sum_y g_U(x,y) e(y)
        starts = np.unique(
            rng.integers(-(rU - 1), rU, size=(4, 3)), axis=0)
        pts, src, G, _ = killed_green_matrix(U, sources=starts)
        cols = [int(np.flatnonzero((pts == q).all(axis=1))[0])
                for q in eqK.points]
        predicted = G[:, cols] @ eqK.weights
        hit = 1.0 - harmonic_escape(U, k_pts).at(src)
        worst["last-exit"] = max(
            worst["last-exit"], float(np.max(np.abs(hit - predicted))))

        # sweeping: the superset's measure pushed onto K is K's measure
        targets, H = hitting_matrix(k_pts, U, starts=eqB.points)
        swept = eqB.weights @ H
        lookup = {tuple(p): i for i, p in enumerate(targets)}
        aligned = np.array([swept[lookup[tuple(q)]] for q in eqK.points])
        worst["sweeping"] = max(
            worst["sweeping"], float(np.max(np.abs(aligned - eqK.weights))))

        # variational characterization: the quadratic-form lower bound is
        # tight exactly at the equilibrium weights and never above capacity
        eqF = equilibrium_measure(k_pts, oracle=g3)
        at_eq = variational_lower_bound(eqF.points, eqF.weights, g3)
        gap = abs(at_eq - eqF.capacity) / eqF.capacity
        w = rng.random(len(eqF.points))
        excess = variational_lower_bound(eqF.points, w, g3) - eqF.capacity
        worst["variational"] = max(worst["variational"], gap, excess)

        # certified interval brackets the reported value
        rep = capacity(k_pts, oracle=g3)
        viol = max(rep.lower - rep.value, rep.value - rep.upper, 0.0)
        worst["sandwich"] = max(worst["sandwich"], viol)
    elapsed = time.perf_counter() - t0
    ok = all(v < 1e-8 for v in worst.values()) and elapsed < 60.0
    assert verdict(
        3, "potential-theory identities on 50 random (K, U)", ok,
        "max residuals "
        + ", ".join(f"{k}={v:.1e}" for k, v in worst.items())
        + f" (all < 1e-8); {elapsed:.1f}s",
    )


def test_criterion_04_point_capacity_reciprocal_green():
    series_val, series_err = green0_series()
    rep = capacity([(0, 0, 0)], oracle=GreenOracle(3))
    rel = abs(rep.value * series_val - 1.0)
    ok = series_err < 1e-9 and rel < 1e-5
    assert verdict(
        4, "cap(origin) * g(0,0) = 1 against the counting series", ok,
        f"series g(0,0) = {series_val:.12f} (err {series_err:.1e} < 1e-9); "
        f"cap = {rep.value:.12f}; |cap*g - 1| = {rel:.1e} < 1e-5",
    )


# ---------------------------------------------------------------------------
# 5-6: sampler law, exact splitting, midpoint refinement


def test_criterion_05_sampler_covariance_and_decomposition():
    t0 = time.perf_counter()
    n = 10_000
    zmax = {}
    for tag, radius in (("B2", 2), ("B3", 3)):
        U = box_around(0, radius, 3)
        X = dirichlet_batch(U, SEED, n, base_stream=("accept5", tag))
        X = X.reshape(n, -1)
        _, _, G, _ = killed_green_matrix(U)
        emp = X.T @ X / n
        se = np.sqrt((G**2 + np.outer(np.diag(G), np.diag(G))) / n)
        zmax[tag] = float(np.max(np.abs(emp - G) / se))
    cov_ok = all(z < 5.0 for z in zmax.values())

    # the splitting phi = xi + psi holds to the last bit on the halo
    rl = RenormLattice(2, 3, 3)
    f = sample_dirichlet(box_around(0, 12, 3), SEED, "accept5-split")
    rec = harmonic_decompose(f, (0, 0, 0), rl)
    resid = float(np.max(np.abs(f.restrict(rec.halo) - rec.xi - rec.psi)))
    split_ok = resid <= 1e-12

    # the local part has exactly the halo's zero-boundary law
    halo = rl.halo((0, 0, 0))
    parent = halo.expand(1)
    probes = np.array(
        [[0, 0, 0], [3, 1, -2], [-4, -4, -4], [6, 6, 6], [1, 5, 0]],
        dtype=np.int64)
    m = 6000
    rel = probes - np.asarray(halo.lo)
    acc = np.zeros((len(probes), len(probes)))
    for i in range(m):
        g = FieldSample(
            parent, dirichlet_batch(parent, SEED, 1, ("accept5-psi", i))[0],
            "dirichlet", SEED, (i,))
        r = harmonic_decompose(g, (0, 0, 0), rl)
        v = r.psi[tuple(rel.T)]
        acc += np.outer(v, v)
    emp = acc / m
    ptsH, _, GH, _ = killed_green_matrix(halo, sources=probes)
    lookup = {tuple(p): j for j, p in enumerate(ptsH)}
    ref = np.array([[GH[a, lookup[tuple(probes[b])]]
                     for b in range(len(probes))]
                    for a in range(len(probes))])
    se = np.sqrt((ref**2 + np.outer(np.diag(ref), np.diag(ref))) / m)
    z_psi = float(np.max(np.abs(emp - ref) / se))
    psi_ok = z_psi < 5.0
    elapsed = time.perf_counter() - t0
    ok = cov_ok and split_ok and psi_ok
    assert verdict(
        5, "zero-boundary sampler covariance and exact splitting", ok,
        f"covariance z-max B2={zmax['B2']:.2f}, B3={zmax['B3']:.2f} (< 5); "
        f"max|phi-(xi+psi)| = {resid:.1e} <= 1e-12; "
        f"local-law z-max {z_psi:.2f} < 5; {elapsed:.0f}s",
    )


def test_criterion_06_midpoint_residual_statistics():
    B = box_around(0, 25, 3)  # interior 49^3 = 117649 vertices
    f = sample_dirichlet(B, SEED, "accept6")
    me = extend_midpoints(f, SEED)
    _, ph = me.psi_hat(f)
    v = ph.ravel()
    n = v.size
    se_var = 0.5 * math.sqrt(2.0 / n)
    var = float(v.var())
    var_ok = abs(var - 0.5) < 3 * se_var
    rhos = []
    corr_ok = True
    for ax in range(3):
        a = np.moveaxis(ph, ax, 0)[:-1].ravel()
        b = np.moveaxis(ph, ax, 0)[1:].ravel()
        rho = float(np.corrcoef(a, b)[0, 1])
        rhos.append(rho)
        corr_ok = corr_ok and abs(rho) < 3 / math.sqrt(a.size)
    ok = n >= 1e5 and var_ok and corr_ok and me.sigma2 == 1.5
    assert verdict(
        6, "midpoint vertex residual is iid N(0, 1/2)", ok,
        f"{n} vertices (>= 1e5); var = {var:.5f} vs 0.5 +- {3 * se_var:.5f}; "
        f"max |nn corr| = {max(abs(r) for r in rhos):.4f}; "
        f"sigma2 = {me.sigma2} (= d/2)",
    )


# ---------------------------------------------------------------------------
# 7: mean-shift sampling against closed-form Gaussian ground truth


def _site_cov(U, sites) -> np.ndarray:
    sites = np.atleast_2d(np.asarray(sites, dtype=np.int64))
    pts, _, G, _ = killed_green_matrix(U, sources=sites)
    cols = [int(np.flatnonzero((pts == s).all(axis=1))[0]) for s in sites]
    return G[:, cols]


def _random_configs(n_cfg: int, seed: int):
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(n_cfg):
        radius = int(rng.integers(4, 7))
        U = box_around(0, radius, 3)
        k_pts = rng.integers(-2, 3, size=(int(rng.integers(1, 3)), 3))
        k_pts = np.unique(k_pts, axis=0)
        delta = float(rng.uniform(0.4, 1.5))
        n_sites = int(rng.integers(1, 4))
        sites = np.unique(
            np.vstack([k_pts, rng.integers(-3, 4, size=(n_sites, 3))]),
            axis=0)[:3]
        levels = rng.uniform(-0.5, 1.2, size=len(sites))
        out.append((U, k_pts, delta, sites, levels))
    return out


def _exact_orthant(U, sites, levels) -> float:
    cov = _site_cov(U, sites)
    if len(sites) == 1:
        return float(sps.norm.sf(levels[0] / math.sqrt(cov[0, 0])))
    mvn = sps.multivariate_normal(mean=np.zeros(len(sites)), cov=cov)
    return float(mvn.cdf(-np.asarray(levels)))


def test_criterion_07_tilted_sampling_and_certificates():
    t0 = time.perf_counter()

    # (a) the tilt raises the mean on K to exactly delta
    U = box_around(0, 8, 3)
    k_pts = np.array([[0, 0, 0], [3, 1, -2]])
    delta = 0.8
    spec = make_tilt(k_pts, U, delta)
    n = 4000
    vals = np.array(
        [sample_tilted(spec, SEED, "accept7a", i).at(k_pts) for i in range(n)])
    z_mean = float(np.max(
        np.abs(vals.mean(axis=0) - delta)
        / (vals.std(axis=0, ddof=1) / math.sqrt(n))))
    mean_ok = z_mean < 3.0

    # (b) mean log-density under the tilt equals the normalizer
    # delta^2 cap / 2, with SE = delta sqrt(cap/n)
    spec2 = make_tilt([(0, 0, 0), (2, -1, 1)], box_around(0, 6, 3), 1.1)
    m = 3000
    ld = np.array([spec2.log_density(sample_tilted(spec2, SEED, "accept7b", i))
                   for i in range(m)])
    ent_gap = abs(float(ld.mean()) - spec2.log_normalizer)
    ent_tol = 3 * 1.1 * math.sqrt(spec2.capacity / m)
    ent_ok = ent_gap < ent_tol

    # (c) unbiased on 20 random configurations with closed-form answers
    z_worst = 0.0
    unbiased_fails = 0
    for idx, (Uc, kc, dc, sites, levels) in enumerate(
            _random_configs(20, SEED)):
        specc = make_tilt(kc, Uc, dc)
        exact = _exact_orthant(Uc, sites, levels)

        def event(f, sites=sites, levels=levels):
            return bool(np.all(f.at(sites) >= levels))

        est = importance_estimate(event, specc, 4000, seed=SEED + idx,
                                  name="orthant")
        se = (est.ci[1] - est.ci[0]) / (2 * 1.96)
        z = abs(est.p_hat - exact) / max(se, 2e-5)
        z_worst = max(z_worst, z)
        unbiased_fails += z > 3.0

    # (d) the entropy certificate never exceeds the exact probability
    cert_viol = 0
    for Uc, kc, dc, sites, levels in _random_configs(20, SEED + 1):
        specc = make_tilt(kc, Uc, dc)
        exact = _exact_orthant(Uc, sites, levels)
        cov = _site_cov(Uc, sites)
        shifted = np.asarray(levels) - specc.shift_at(sites)
        if len(sites) == 1:
            p_t = float(sps.norm.sf(shifted[0] / math.sqrt(cov[0, 0])))
        else:
            p_t = float(sps.multivariate_normal(
                np.zeros(len(sites)), cov).cdf(-shifted))
        rec = entropic_lower_bound(min(p_t, 1.0), specc.log_normalizer)
        cert_viol += rec.bound > exact * (1 + 1e-9) + 1e-12

    elapsed = time.perf_counter() - t0
    ok = mean_ok and ent_ok and unbiased_fails == 0 and cert_viol == 0
    assert verdict(
        7, "mean-shift sampler: moments, cost, unbiasedness, certificate", ok,
        f"mean-on-K z = {z_mean:.2f} (< 3); "
        f"|mean log-density - H| = {ent_gap:.4f} < {ent_tol:.4f}; "
        f"20 closed-form configs worst z = {z_worst:.2f} "
        f"({unbiased_fails} beyond 3 SE); certificate violations: "
        f"{cert_viol}/20; {elapsed:.0f}s",
    )


# ---------------------------------------------------------------------------
# 8: coarse-graining verification corpus and porous retention


def test_criterion_08_coarse_graining_and_retention():
    t0 = time.perf_counter()
    N, K, L = 4096, 4, 16
    counts = {}
    for domain in DOMAINS:
        p = CGParams(K=K, L=L, N=N, d=3, domain=domain,
                     eps=0.2 if domain == "eps" else 0.0)
        good = 0
        for i in range(1000):
            path = random_crossing_path(p, SEED, "accept8", domain, i)
            coll = coarse_grain_d3(path, p)
            good += bool(coll.verify(path)["passed"])
        counts[domain] = good
    verify_ok = all(c == 1000 for c in counts.values())

    p_ball = CGParams(K=K, L=L, N=N, d=3, domain="ball")
    path = np.zeros((N + 1, 3), dtype=np.int64)
    path[:, 0] = np.arange(N + 1)
    por = porous_projection(coarse_grain_d3(path, p_ball), rho=0.25)
    ref = segment_capacity(N, 3).value
    floor = 0.5 * (1.0 - 0.25) * ref
    retention_ok = por.cap_cells >= floor
    elapsed = time.perf_counter() - t0
    ok = verify_ok and retention_ok and elapsed < 900.0
    assert verdict(
        8, "1000 coarse-grainings per domain verify; porous retention", ok,
        "verified " + ", ".join(f"{d}={c}/1000" for d, c in counts.items())
        + f"; retained-cell cap {por.cap_cells:.1f} >= "
        f"0.5*(1-rho)*cap(line) = {floor:.1f} "
        f"(ratio {por.cap_cells / ref:.3f}, kept {por.kept}/{por.n}); "
        f"{elapsed:.0f}s",
    )


# ---------------------------------------------------------------------------
# 9: local/harmonic badness dichotomy on one-arm positives


def test_criterion_09_badness_dichotomy_bulk(tmp_path):
    t0 = time.perf_counter()
    cfg = RunConfig.from_mapping({
        "suite": "ef-inclusion", "d": 3, "N": 64, "L": 8, "K": 4,
        "h_levels": [0.25], "h_prime": 0.05, "eps_bad": 0.4,
        "replicas": 500, "seed": SEED, "out": str(tmp_path),
        "workers": 1, "relaxed_k": True,
    })
    man = run(cfg)
    checks = {c["name"]: c for c in man.checks}
    positives = int(man.meta["positives"])
    elapsed = time.perf_counter() - t0
    ok = (man.ok and positives >= 500
          and checks["dichotomy_100pct"]["ok"]
          and checks["disjunction_100pct"]["ok"])
    assert verdict(
        9, "every one-arm positive is locally or harmonically bad", ok,
        f"{positives} positives in {man.meta['attempts']} fields "
        f"(rate {man.meta['positive_rate']:.3f}); "
        f"dichotomy {checks['dichotomy_100pct']['detail']}, "
        f"disjunction {checks['disjunction_100pct']['detail']}; "
        f"{elapsed:.0f}s",
    )


# ---------------------------------------------------------------------------
# 10: joint harmonic-sup tail against the capacity bound


def test_criterion_10_joint_harmonic_tail_bound():
    t0 = time.perf_counter()
    params = CGParams(K=4, L=2, N=32, d=3, strict=False)
    anchors = [(12, 12, 0), (12, -12, 0), (-12, 12, 0), (-12, -12, 0)]
    coll = AdmissibleCollection.from_anchors(anchors, params)
    rlat = coll.lattice
    B = box_around(0, 32, 3)
    n_samp = 20_000
    sups = np.empty((n_samp, coll.n))
    for i in range(n_samp):
        f = sample_dirichlet(B, SEED, "accept10", i)
        for zi, z in enumerate(coll.points):
            rec = harmonic_decompose(f, z, rlat)
            sups[i, zi] = harmonic_sup(rec, rlat.guard(z))
    parts = []
    ok = True
    for a in (1.0, 1.5):
        rep = harmonic_collection_tail(None, coll, a, sups=sups)
        alpha = rep.alpha_hat_upper
        log_p = math.log(rep.p_hat) if rep.p_hat > 0 else -math.inf
        holds = log_p <= rep.log_bound(alpha) + 1e-9
        ok = ok and holds and alpha <= 2.0
        parts.append(
            f"a={a:g}: {rep.hits}/{rep.n_samples} hits, "
            f"log p = {log_p:.3f}, bound(alpha_up) = "
            f"{rep.log_bound(alpha):.3f}, alpha_up = {alpha:.3f}")
    elapsed = time.perf_counter() - t0
    detail = (f"4 anchors, cap(cells) = {rep.cap_sigma:.3f}, "
              f"slack = {rep.slack:.3f}; " + "; ".join(parts)
              + f"; alpha_up <= 2 both levels; {elapsed:.0f}s")
    assert verdict(10, "joint harmonic-excursion tail obeys capacity decay",
                   ok, detail)


# ---------------------------------------------------------------------------
# 11: one-arm decay rate on both sides of the measured transition


def test_criterion_11_one_arm_decay_slopes(tmp_path):
    t0 = time.perf_counter()
    grid = tuple(np.round(np.arange(0.4, 1.501, 0.1), 2))
    est = hstar_estimate((12, 16, 24), grid, 600, d=3, seed=SEED, workers=1)
    blo, bhi = est.bracket
    bracket_ok = 0.0 < blo <= bhi < math.inf
    h_below = round(max(0.05, math.floor((blo - 0.2) / 0.05) * 0.05), 2)
    h_above = round(math.ceil((bhi + 0.02) / 0.05) * 0.05, 2)
    levels_ok = h_below <= blo and h_above >= bhi

    cfg = RunConfig.from_mapping({
        "suite": "one-arm-scan", "d": 3, "sizes": [8, 12, 16, 24],
        "h_levels": [h_below, h_above], "replicas": 8000, "R": 2,
        "h_star_ref": round((blo + bhi) / 2.0, 4),
        "seed": SEED, "out": str(tmp_path), "workers": 1,
    })
    man = run(cfg)
    fits = man.meta["fits"]
    fit_ok = len(fits) == 2
    parts = []
    for f in fits:
        slope, se = f["slope"], f["slope_se"]
        good = (slope is not None and se is not None
                and slope > 0 and se < 0.5 * slope)
        fit_ok = fit_ok and good
        if slope is None:
            parts.append(f"h={f['h']:g} ({f['variant']}): no fit")
        else:
            parts.append(
                f"h={f['h']:g} ({f['variant']}): slope {slope:.3f} "
                f"+- {se:.3f} | (pi/6)(h-h*)^2 = {f['reference']:.3f}")
    elapsed = time.perf_counter() - t0
    ok = bracket_ok and levels_ok and fit_ok and elapsed < 21_600.0
    assert verdict(
        11, "-log p(one-arm) grows with N/log N on both sides", ok,
        f"transition bracket ({blo:.3f}, {bhi:.3f}), levels {h_below:g} "
        f"(below) and {h_above:g} (above); " + "; ".join(parts)
        + f"; slope > 0 with SE < 50% required; {elapsed:.0f}s",
    )
