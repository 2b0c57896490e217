"""Acceptance criteria, each checked at its stated tolerance.

Every test records one PASS/FAIL line; the lines are printed together at the
end of the pytest run (and directly when this file is run as a script).
"""
import subprocess
import sys
import time

import numpy as np
import pytest

from mgdp.experiment import ExperimentConfig, prepare, run_experiment, sensitivity
from mgdp.lr import relaxation_gap, solve_lr
from mgdp.netmodel import load_case, to_per_unit, validate_radial
from mgdp.privacy import estimate_sensitivity, exact_sensitivity, laplace_noise, stream
from mgdp.restore import FrLimits, enumerate_fr_oracle, solve_fr
from mgdp.toy import CASE33_ESS_BUSES, tiny_context

try:
    from conftest import ACCEPTANCE
except ImportError:  # run as a script
    ACCEPTANCE = []


def record(crit, ok, detail):
    ACCEPTANCE.append((crit, bool(ok), detail))
    print(f"[{'PASS' if ok else 'FAIL'}] {crit}: {detail}")
    assert ok, detail


@pytest.fixture(scope="module")
def case33():
    cfg = ExperimentConfig.load("case33_config")
    setup = prepare(cfg)
    return cfg, setup


def test_1_parsing_topology():
    t0 = time.perf_counter()
    case = load_case("case33bw")
    topo = validate_radial(case, 1)
    net = to_per_unit(case, CASE33_ESS_BUSES, root=1)
    dt = time.perf_counter() - t0
    got = (net.n_buses, net.n_branches, topo.is_tree, net.n_ess, net.n_loads, net.ess_buses)
    ok = got == (33, 32, True, 7, 26, CASE33_ESS_BUSES) and dt < 1.0
    record("1 parsing/topology", ok,
           f"N={got[0]} E={got[1]} tree={got[2]} N_E={got[3]} N_L={got[4]} ess={list(got[5])} in {dt:.3f}s")


def test_2_nonprivate_lr(case33):
    cfg, setup = case33
    t0 = time.perf_counter()
    sol = solve_lr(setup.ctx, setup.d)
    dt = time.perf_counter() - t0
    frac = float((sol.pickup >= 0.99).mean())
    audit = sol.audit(setup.ctx)
    worst = max(audit.values())
    ok = sol.status.value == "Optimal" and frac >= 0.8 and worst <= 1e-6 and dt < 60
    record("2 non-private LR", ok,
           f"status={sol.status.value} full-pickup share={frac:.3f} worst audit={worst:.2e} in {dt:.2f}s")


def test_3_relaxation_audit(case33):
    cfg, setup = case33
    sol = solve_lr(setup.ctx, setup.d)
    cone = sol.conic.residuals.max_cone_violation
    gap = relaxation_gap(sol, setup.ctx)
    record("3 relaxation audit", cone <= 1e-6,
           f"max cone violation={cone:.2e}; relaxation gap max={gap.max_gap:.2e} min={gap.min_gap:.2e}")


def test_4_laplace_sampler():
    t0 = time.perf_counter()
    x = laplace_noise(1.0, (1_000_000,), stream(0, "acceptance/laplace"))
    dt = time.perf_counter() - t0
    cdf_err = 0.0
    for q in (-3.0, -1.0, -0.25, 0.0, 0.25, 1.0, 3.0):
        ref = 0.5 * np.exp(q) if q < 0 else 1 - 0.5 * np.exp(-q)
        cdf_err = max(cdf_err, abs(float((x <= q).mean()) - ref))
    ok = abs(x.mean()) < 0.01 and abs(x.var() - 2) < 0.04 and cdf_err < 3e-3 and dt < 5
    record("4 Laplace sampler", ok,
           f"mean={x.mean():+.4f} var={x.var():.4f} max CDF error={cdf_err:.1e} in {dt:.2f}s")


def test_5a_sensitivity_tiny():
    ctx = tiny_context()
    exact, pair = exact_sensitivity(ctx)
    worst, witnessed = 0.0, True
    for bits in ([0, 0, 0, 0], [0, 1, 0, 0], [1, 0, 1, 0], [0, 0, 1, 1], [1, 1, 1, 1]):
        d = np.array(bits).reshape(2, 2).T
        tr = estimate_sensitivity(ctx, d, rng=stream(0, "projection"))
        worst = max(worst, tr.delta_estimate)
        if tr.delta_estimate > 0:
            a, b = (np.array(w).reshape(2, 2).T for w in tr.witness)
            h = np.abs(solve_lr(ctx, a).pickup - solve_lr(ctx, b).pickup).sum()
            witnessed &= int((a != b).sum()) == 1 and abs(h - tr.delta_estimate) <= 1e-6
    ok = worst <= exact + 1e-9 and witnessed
    record("5a sensitivity (tiny)", ok,
           f"max estimate={worst:.4f} <= exact={exact:.4f}; witness pairs adjacent and reproduce the estimate")


def test_5b_sensitivity_case33bw(case33):
    cfg, setup = case33
    t0 = time.perf_counter()
    delta, trace = sensitivity(cfg, setup)
    dt = time.perf_counter() - t0
    ok = (0 < delta <= 13 and trace.termination in ("CycleDetected", "ToleranceMet")
          and len(trace.iterations) <= 100 and trace.unique_iterates >= 12)
    record("5b sensitivity (case33bw)", ok,
           f"estimate={delta:.4f} (scoring={cfg.sensitivity.get('scoring')}) termination={trace.termination} "
           f"unique iterates={trace.unique_iterates} iterations={len(trace.iterations)} in {dt:.1f}s")


def test_5c_flip_scoring_lower_bound(case33):
    # informational: the finite-difference scoring certifies a much larger l1 change
    cfg, setup = case33
    tr = estimate_sensitivity(setup.ctx, setup.d, rng=stream(cfg.seed, "projection"), scoring="flip")
    a, b = (np.array(w).reshape(6, 7).T for w in tr.witness)
    h = np.abs(solve_lr(setup.ctx, a).pickup - solve_lr(setup.ctx, b).pickup).sum()
    ok = abs(h - tr.delta_estimate) <= 1e-6 and int((a != b).sum()) == 1
    record("5c witness check (flip scoring, informational)", ok,
           f"flip-scoring estimate={tr.delta_estimate:.3f} with a verified adjacent witness pair; "
           f"exceeds 13, so the true sensitivity of this instance is at least this large")


def test_6_fr_correctness():
    t0 = time.perf_counter()
    ctx = tiny_context()
    rng = np.random.default_rng(20240601)
    worst = 0.0
    for _ in range(25):
        rt = rng.uniform(-0.5, 1.5, ctx.shape)
        a = solve_fr(ctx, rt, FrLimits(gap=1e-8))
        o = enumerate_fr_oracle(ctx, rt)
        worst = max(worst, abs(a.objective - o.objective) / max(1.0, o.objective))
    fix = 0.0
    n_fix = 0
    from mgdp.lr import is_lr_feasible
    while n_fix < 8:
        d = (rng.random((2, 2)) < 0.5).astype(int)
        res = is_lr_feasible(ctx, d)
        if not res.feasible:
            continue
        fix = max(fix, solve_fr(ctx, res.solution.pickup).objective)
        n_fix += 1
    dt = time.perf_counter() - t0
    ok = worst <= 1e-6 and fix <= 1e-6 and dt < 120
    record("6 FR correctness", ok,
           f"25 draws: max rel. objective diff vs oracle={worst:.1e}; FR(LR(d)) max ||rho||={fix:.1e} "
           f"over {n_fix} modes; {dt:.1f}s")


def test_7_end_to_end_sweep():
    t0 = time.perf_counter()
    base = ExperimentConfig.load("case33_config")
    seeds = range(20)
    w = {0.2: [], 0.8: []}
    mism = {0.2: [], 0.8: []}
    box = mono = 0.0
    vlo, vhi = np.inf, -np.inf
    statuses = set()
    for seed in seeds:
        cfg = ExperimentConfig.load("case33_config")
        cfg.seed = seed
        cfg.sensitivity = {"mode": "fixed", "value": 1.2863}
        cfg.fr = dict(base.fr, node_limit=10_000)
        rep, art = run_experiment(cfg, write=False)
        for v, summ in zip(art["variants"], rep.variants):
            r = v.fr.r_hat
            box = max(box, float(np.maximum(-r, 0).max()), float(np.maximum(r - 1, 0).max()))
            mono = max(mono, float(np.maximum(r[:, :-1] - r[:, 1:], 0).max()))
            vm = np.sqrt(v.fr.solution.v)
            vlo, vhi = min(vlo, vm.min()), max(vhi, vm.max())
            w[v.epsilon].append(summ["noise_l1"])
            mism[v.epsilon].append(summ["mismatch"])
            statuses.add(v.fr.status)
    dt = time.perf_counter() - t0
    ratio = np.mean(w[0.2]) / np.mean(w[0.8])
    m02, m08 = np.mean(mism[0.2]), np.mean(mism[0.8])
    ok = (box <= 1e-8 and mono <= 1e-8 and vlo >= 0.9 - 1e-8 and vhi <= 1.1 + 1e-8
          and 3.0 <= ratio <= 5.0 and m02 >= m08 and dt <= 1800)
    record("7 end-to-end DP sweep", ok,
           f"20 seeds: box viol={box:.0e} monotone viol={mono:.0e} |V| in [{vlo:.4f}, {vhi:.4f}] "
           f"noise ratio={ratio:.3f} mismatch mean {m02:.2f} (eps 0.2) vs {m08:.2f} (eps 0.8) "
           f"FR statuses={sorted(statuses)} in {dt:.0f}s")


def test_8_determinism(tmp_path):
    outs = []
    for name in ("a", "b"):
        out = tmp_path / name
        subprocess.run([sys.executable, "-m", "mgdp.cli", "--out", str(out), "run", "--config",
                        "case33_config"], check=True, capture_output=True)
        outs.append(out)
    same = all((outs[0] / f).read_bytes() == (outs[1] / f).read_bytes()
               for f in ("pickups.csv", "voltages.csv", "modes.csv"))
    rows = len((outs[0] / "pickups.csv").read_text().splitlines()) - 1
    record("8 determinism", same and rows == 2 * 156,
           f"two 'mgdp run' invocations byte-identical={same}; pickups.csv rows={rows} (2 x 156)")


if __name__ == "__main__":
    sys.exit(pytest.main([__file__, "-q", "-p", "no:cacheprovider"]))
