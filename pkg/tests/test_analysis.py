import math

import numpy as np
import pytest

from fedgen import analysis as an
from fedgen import theory as th
from fedgen.config import ExperimentConfig
from fedgen.errors import DimensionViolation

FIG3 = ExperimentConfig(m=3, p=200, s=5, T=5, regime="kfinite", K=1, n=144, alpha=0.027, sigma=0.7,
                        het_kind="stationary", het_norm=0.5, delta0_norm=1.0)


def _f_naive(K, a, p, n, m):
    return ((1 - a) ** 2 + K * a * a * (p + 1) / n) ** K + (m - 1) * (1 - a) ** (2 * K)


def test_fK_small_cases():
    a, p, n = 0.05, 200, 144
    assert math.isclose(an.eval_fK(1, a, p, n, 3), (1 - a) ** 2 + a * a * (p + 1) / n + 2 * (1 - a) ** 2)
    assert math.isclose(an.eval_fK(7, a, p, n, 1), ((1 - a) ** 2 + 7 * a * a * (p + 1) / n) ** 7)
    K = np.arange(1, 120)
    assert np.allclose(an.eval_fK(K, a, p, n, 3), [_f_naive(k, a, p, n, 3) for k in K], rtol=1e-12)


def test_fK_large_K_does_not_raise():
    v = an.eval_fK(np.array([5000]), 0.3, 200, 10, 3)
    assert np.isinf(v[0]) or v[0] > 1e100


def test_fK_single_interior_minimum():
    K = np.arange(1, 301)
    f = an.eval_fK(K, 0.05, 200, 144, 3)
    k = int(np.argmin(f))
    assert 0 < k < 299
    assert np.all(np.diff(f[: k + 1]) < 0) and np.all(np.diff(f[k:]) > 0)


def test_fixed_batch_noiseless_prefers_many_steps():
    rep = an.kopt_search(200, 3, 0.05, 0.0, 1.0, "fixed_batch", 10, 200, t=5)
    assert np.all(np.diff(rep.values) < 0)
    assert rep.k_opt == 200 and not rep.finite_opt


def test_fixed_batch_noisy_limit_has_finite_optimum():
    thr = 2 / (1 + 200 / 10)
    rep = an.kopt_search(200, 3, 0.9 * thr, 0.7, 1.0, "fixed_batch", 10, 400, t=None)
    assert rep.finite_opt and rep.k_opt < 400
    assert rep.values[-1] > rep.values.min()


def test_ties_go_to_smallest_K():
    assert an.argmin_smallest(np.array([3.0, 1.0, 1.0, np.nan])) == 1
    a = an.kopt_search(50, 3, 0.1, 0.2, 1.0, "fixed_total", 24, 24, t=3)
    b = an.kopt_search(50, 3, 0.1, 0.2, 1.0, "fixed_total", 24, 24, t=3)
    assert a.k_opt == b.k_opt and np.array_equal(a.values, b.values)


def test_fixed_total_reports_bracket_quantities():
    rep = an.kopt_search(200, 25, 0.05, 0.0, 1.0, "fixed_total", 144, 500, t=5)
    assert rep.grid[-1] == 144
    lo, hi = rep.bracket
    assert math.isclose(lo, 144 * 39 / 201) and math.isclose(hi, 144 * 23 / (0.05**3 * 201))
    assert rep.f_argmin == 1 + int(np.argmin(rep.f_values))


def test_kopt_search_guards():
    with pytest.raises(ValueError):
        an.kopt_search(200, 3, 0.05, 0.0, 1.0, "fixed_batch", 10, 1, t=5)
    with pytest.raises(ValueError):
        an.kopt_search(200, 3, 0.05, 0.0, 1.0, "other", 10, 20, t=5)


def test_noiseless_homogeneous_batch_study_is_monotone():
    # fixed batch without noise or heterogeneity: more local steps always help
    rep = an.kopt_search(200, 3, 0.05, 0.0, 1.0, "fixed_batch", 8, 60, t=5)
    assert rep.k_opt == 60


def test_kopt_grows_with_clients():
    rows = an.kopt_vs_m_study(list(range(2, 31, 4)), FIG3)
    ks = [r["k_opt"] for r in rows]
    assert all(a <= b for a, b in zip(ks, ks[1:]))
    assert rows[0]["non_decreasing"]
    with pytest.raises(ValueError):
        an.kopt_vs_m_study([1], FIG3)


def test_kfinite_error_by_K_marks_empty_batches():
    v = an.kfinite_error_by_K(FIG3.replace(n=10), [1, 10, 11])
    assert np.isfinite(v[:2]).all() and np.isinf(v[2])


def test_calibration_reports_hit_or_jump():
    cal = an.calibrate_alpha(FIG3, 16, lo=0.02, hi=0.03, grid=8)
    assert cal.hit and cal.k_opt == 16
    assert an.kopt_general(FIG3.replace(alpha=cal.alpha))[0] == 16
    miss = an.calibrate_alpha(FIG3, 15, lo=0.02, hi=0.035, grid=8)
    if not miss.hit:
        assert miss.left[1] != 15 and miss.right[1] != 15
        assert (miss.left[1] - 15) * (miss.right[1] - 15) < 0


def test_double_descent_rows():
    cfg = ExperimentConfig(m=3, p=100, s=5, T=40, n=25, alpha=0.05, sigma=0.7, het_kind="stationary",
                           het_norm=0.5, delta0_norm=1.0)
    rows = an.double_descent_sweep([5, 10, 20, 24, 25, 26, 50, 100, 200, 400], cfg, [1, 40])
    gap = [r for r in rows if r["skipped_reason"]]
    assert {r["p"] for r in gap} == {24, 25, 26}
    up = {(r["p"], r["t"]): r["expected_model_error"] for r in rows if r.get("side") == "UP"}
    for p in (5, 10, 20):
        assert math.isclose(up[(p, 1)], up[(p, 40)], rel_tol=1e-12)
    op40 = [r["expected_model_error"] for r in rows if r.get("side") == "OP" and r["t"] == 40]
    assert np.all(np.diff(op40[:3]) < 0)
    assert any(r.get("descending") for r in rows)
    at400 = {r["t"]: r["expected_model_error"] for r in rows if r["p"] == 400}
    assert at400[40] <= at400[1]


def test_null_risk_factor():
    v = [an.null_risk_factor(p, 25, 3) for p in (100, 1000, 10_000)]
    assert v[0] > v[1] > v[2] and v[2] < 1e-3


# ---------------------------------------------------------------------------
# lemma oracles


def test_key_step_vector_mean():
    r = an.lemma_oracle("key_step", {"p": 50, "n": 10}, trials=5000, seed=0)
    assert r.estimate.shape == (50,) and r.passed
    assert np.allclose(np.linalg.norm(r.target), 0.2)


def test_fourth_moment_target():
    r = an.lemma_oracle("fourth_moment", {"a": 6, "b": 4}, trials=5000, seed=1)
    assert float(r.target) == 44.0 and r.passed


@pytest.mark.parametrize("lemma,dims", [("bias", {"p": 10, "n": 10}), ("key_step", {"p": 8, "n": 7}),
                                        ("inv_gram", {"a": 8, "b": 5}), ("cross_term", {"p": 20, "n_i": 19, "n_j": 3})])
def test_dimension_guards(lemma, dims):
    with pytest.raises(DimensionViolation):
        an.lemma_oracle(lemma, dims)


def test_lemma_oracle_guards_and_determinism():
    with pytest.raises(ValueError):
        an.lemma_oracle("nonexistent")
    with pytest.raises(ValueError):
        an.lemma_oracle("gram", trials=1)
    a = an.lemma_oracle("iw_norm", trials=3000, seed=5)
    b = an.lemma_oracle("iw_norm", trials=3000, seed=5)
    assert np.array_equal(a.estimate, b.estimate)


def test_lemma_oracle_detects_wrong_target():
    # the estimate must discriminate: a 5% shift of the target is far outside 3 SE
    r = an.lemma_oracle("proj_norm", trials=20000, seed=2)
    assert abs(r.estimate - 1.05 * r.target) > 3 * r.stderr


def test_specialization_checks_pass():
    checks = an.specialization_checks(n_configs=4, seed=1)
    assert {c["name"] for c in checks} >= {"k1_general_vs_simple", "kfinite_general_vs_simple",
                                           "kinf_op_general_vs_simple", "kinf_up_general_vs_simple"}
    assert all(c["passed"] for c in checks)


def test_specialization_checks_catch_fault():
    with th.injected_fault("g_sign"):
        checks = an.specialization_checks(n_configs=3, seed=1)
    assert not all(c["passed"] for c in checks)
