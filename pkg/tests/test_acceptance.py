"""Acceptance criteria, one test per criterion (part), each at its stated tolerance.

Seeds are fixed up front.  A summary line per criterion is printed at the end
of the pytest run.
"""

import json
import time

import numpy as np

from fedgen import analysis as an
from fedgen import theory as th
from fedgen.cli import main
from fedgen.config import ExperimentConfig, aux_rng
from fedgen.simulator import run_monte_carlo

SEED = 20240601

FIG2 = dict(m=3, p=200, s=5, T=10, regime="k1", n=50, alpha=0.05, sigma=0.7,
            het_kind="stationary", het_norm=0.5, base_seed=SEED)
FIG3 = dict(m=3, p=200, s=5, T=5, regime="kfinite", K=1, n=144, sigma=0.7,
            het_kind="stationary", het_norm=0.5, delta0_norm=1.0, base_seed=SEED)
FIG4 = dict(m=3, s=5, T=40, regime="kinf", n=25, alpha=0.05, sigma=0.7,
            het_kind="stationary", het_norm=0.5, delta0_norm=1.0, base_seed=SEED)


def _z(spec, plan, trials):
    curve = th.theory_curve(spec, plan)
    sim = run_monte_carlo(spec, plan, trials)
    with np.errstate(divide="ignore", invalid="ignore"):
        z = np.where(sim.stderr > 0, (sim.mean - curve.expected) / sim.stderr,
                     np.where(sim.mean == curve.expected, 0.0, np.inf))
    return curve, sim, z


def test_criterion_1__k1_theory_matches_simulation():
    t0 = time.perf_counter()
    worst = 0.0
    for d0 in (0.0, 0.5, 1.0):
        spec, plan = ExperimentConfig(**FIG2, delta0_norm=d0).materialize()
        _, _, z = _z(spec, plan, 500)
        worst = max(worst, float(np.max(np.abs(z))))
    elapsed = time.perf_counter() - t0
    print(f"max |z| = {worst:.3f}, wall {elapsed:.1f}s")
    assert worst <= 3 and elapsed < 120


def test_criterion_1__k1_qualitative_ordering_at_20_trials():
    curves = {}
    for d0 in (0.0, 0.5, 1.0):
        spec, plan = ExperimentConfig(**FIG2, delta0_norm=d0).materialize()
        curves[d0] = run_monte_carlo(spec, plan, 20).mean
    assert curves[0.0][1] < curves[0.5][1] < curves[1.0][1]
    gap = curves[1.0] - curves[0.0]
    print("gap between delta0=1 and delta0=0:", np.round(gap, 4))
    assert gap[10] < gap[1]


def test_criterion_2__finite_k_theory_matches_simulation():
    t0 = time.perf_counter()
    worst = 0.0
    for K in (1, 2, 3, 4, 6):
        cfg = ExperimentConfig(m=3, p=20, s=5, T=5, regime="kfinite", K=K, n=12, alpha=0.05, sigma=0.3,
                               delta0_norm=1.0, base_seed=SEED)
        _, _, z = _z(*cfg.materialize(), 2000)
        worst = max(worst, float(np.max(np.abs(z))))
    elapsed = time.perf_counter() - t0
    print(f"max |z| = {worst:.3f}, wall {elapsed:.1f}s")
    assert worst <= 3 and elapsed < 120


def test_criterion_3__kinf_theory_matches_simulation():
    worst, flat = 0.0, True
    for p in (5, 10, 15, 50, 100, 200, 400):
        spec, plan = ExperimentConfig(**FIG4, p=p).materialize()
        curve, _, z = _z(spec, plan, 500)
        worst = max(worst, float(np.max(np.abs(z[[1, 4, 40]]))))
        if p < 25:
            flat &= bool(np.allclose(curve.expected[1:], curve.expected[1], rtol=1e-12, atol=0))
    print(f"max |z| = {worst:.3f}, under-parameterized curves flat: {flat}")
    assert worst <= 3 and flat


def test_criterion_4__single_client_reduction():
    rng = aux_rng(SEED, 4)
    worst = 0.0
    for _ in range(20):
        n = int(rng.integers(2, 60))
        p = n + int(rng.integers(2, 300))
        sigma, d0 = float(rng.uniform(0, 2)), float(rng.uniform(0, 3))
        spec, plan = ExperimentConfig(m=1, p=p, s=1, T=1, regime="kinf", n=n, alpha=0.1, sigma=sigma,
                                      delta0_norm=d0, base_seed=int(rng.integers(1 << 30))).materialize()
        d0sq = float(np.sum(spec.delta0**2))
        target = (1 - n / p) * d0sq + n * sigma**2 / (p - n - 1)
        got = th.theory_kinf(spec, plan).expected[1]
        worst = max(worst, abs(got - target) / abs(target) if target else abs(got))
    print(f"max relative error = {worst:.2e}")
    assert worst <= 1e-12


def test_criterion_5__specialization_identities():
    checks = an.specialization_checks(n_configs=10, seed=SEED, tol=1e-10)
    for c in checks:
        print(f"{c['name']}: {c['max_rel_err']:.2e}")
    needed = {"k1_general_vs_simple", "kfinite_general_vs_simple", "kinf_op_general_vs_simple",
              "kinf_up_general_vs_simple"}
    assert needed <= {c["name"] for c in checks}
    assert all(c["max_rel_err"] <= 1e-10 for c in checks)


def test_criterion_6a__fixed_batch_noiseless_decreasing():
    rep = an.kopt_search(200, 3, 0.05, 0.0, 1.0, "fixed_batch", 10, 200, t=10)
    assert np.all(np.diff(rep.values) < 0) and not rep.finite_opt


def test_criterion_6b__fixed_batch_noisy_limit_finite_optimum():
    ok = True
    for nt in (10, 25, 50):
        alpha = 0.9 * 2 / (1 + 200 / nt)
        rep = an.kopt_search(200, 3, alpha, 0.7, 1.0, "fixed_batch", nt, 512, t=None)
        print(f"batch {nt}: alpha={alpha:.4f} K_opt={rep.k_opt} finite={rep.finite_opt}")
        ok &= rep.finite_opt and rep.values[-1] > rep.values[rep.k_opt - 1]
    assert ok


def test_criterion_6c__fixed_total_argmin_inside_bracket():
    ok = True
    for m in (3, 10, 25):
        rep = an.kopt_search(200, m, 0.05, 0.0, 1.0, "fixed_total", 144, 144, t=5)
        print(f"m={m}: argmin f = {rep.f_argmin}, bracket = [{rep.bracket[0]:.2f}, {rep.bracket[1]:.1f}]")
        ok &= rep.bracket_contains
    assert ok


def test_criterion_7__calibrated_kopt_versus_clients():
    base = ExperimentConfig(**FIG3, alpha=0.05)
    cal = an.calibrate_alpha(base, 15)
    rows = an.kopt_vs_m_study([3, 10, 25], base.replace(alpha=cal.alpha))
    ks = [r["k_opt"] for r in rows]
    monotone = all(a <= b for a, b in zip(ks, ks[1:]))
    print(f"calibration hit={cal.hit} alpha={cal.alpha:.6g} left={cal.left} right={cal.right}; "
          f"K_opt for m=3,10,25: {ks}")
    if cal.hit:
        assert abs(ks[1] - 19) <= 2 and abs(ks[2] - 27) <= 2 and monotone
    else:
        assert monotone


def test_criterion_8__benign_overfitting():
    D = [th.kinf_simple_coefficients(p, 3, 25, 0.7, 0.25)[1] for p in range(27, 5001)]
    spec, plan = ExperimentConfig(**FIG4, p=400).materialize()
    e = th.theory_kinf(spec, plan).expected
    decay = [an.null_risk_factor(p, 25, 3) for p in (100, 1000, 10_000)]
    print(f"t=40 vs t=1 at p=400: {e[40]:.5f} vs {e[1]:.5f}; null-risk factors {decay}")
    assert np.all(np.diff(D) < 0)
    assert e[40] <= e[1]
    assert decay[2] < 1e-3 and decay[0] > decay[1] > decay[2]


def test_criterion_9__lemma_oracles():
    t0 = time.perf_counter()
    res = an.lemma_suite(trials=5000, seed=SEED)
    elapsed = time.perf_counter() - t0
    ok = len(res) == 9
    for r in res:
        scale = float(np.linalg.norm(r.target)) if r.target.ndim else abs(float(r.target))
        se_ok = float(np.max(r.stderr)) <= scale / 30
        print(f"{r.lemma_id}: passed={r.passed} trials={r.trials} se_ok={se_ok}")
        ok &= r.passed and se_ok
    assert ok and elapsed < 180


def test_criterion_10__determinism_and_fault_injection(tmp_path, capsys):
    args = ["simulate", "--preset", "fig2", "--trials", "12", "--seed", str(SEED)]
    assert main([*args, "--out", str(tmp_path / "a")]) == 0
    assert main([*args, "--out", str(tmp_path / "b")]) == 0
    assert main([*args, "--workers", "12", "--out", str(tmp_path / "c")]) == 0
    assert main(["simulate", "--config", str(tmp_path / "a" / "simulate_manifest.json"),
                 "--out", str(tmp_path / "d")]) == 0
    ref = (tmp_path / "a" / "simulate.csv").read_bytes()
    for d in "bcd":
        assert (tmp_path / d / "simulate.csv").read_bytes() == ref
    assert main(["verify", "identities"]) == 0
    assert main(["verify", "all", "--inject-fault", "g_sign"]) == 1
    report = json.loads(capsys.readouterr().out.strip().splitlines()[-1])
    assert not report["passed"]
