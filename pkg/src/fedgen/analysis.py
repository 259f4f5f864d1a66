"""Studies built on the closed forms: optimal K, step-size calibration,
double-descent sweeps, and Monte-Carlo oracles for the random-matrix identities
the closed forms rest on.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .config import ExperimentConfig, Regime, aux_rng
from .errors import BatchTooSmall, DimensionViolation, RegimeGap
from . import theory as th

# ---------------------------------------------------------------------------
# optimal number of local steps


@dataclass
class KOptReport:
    grid: np.ndarray
    values: np.ndarray
    k_opt: int
    finite_opt: bool
    bracket: tuple[float, float] | None = None
    f_values: np.ndarray | None = None
    f_argmin: int | None = None
    bracket_contains: bool | None = None


def eval_fK(K, alpha, p, n, m):
    """``((1-a)^2 + K a^2 (p+1)/n)^K + (m-1)(1-a)^(2K)``; the first power goes through logs."""
    K = np.asarray(K, dtype=float)
    base = (1 - alpha) ** 2 + K * alpha**2 * (p + 1) / n
    with np.errstate(over="ignore"):
        first = np.exp(K * np.log(base))
    return first + (m - 1) * (1 - alpha) ** (2 * K)


def kopt_bracket(alpha, p, n, m) -> tuple[float, float]:
    """Lower/upper bounds on the minimizer of ``f(K)`` (valid for alpha <= 0.1, m >= 3)."""
    return n / (p + 1) * (2 / alpha - 1), n / (p + 1) * (m - 2) / alpha**3


def argmin_smallest(values: np.ndarray) -> int:
    v = np.where(np.isnan(values), np.inf, values)
    return int(np.flatnonzero(v == v.min())[0])


def kopt_search(p, m, alpha, sigma, delta0_sq, mode: str, size: int, K_max: int,
                t: int | None) -> KOptReport:
    """Scan K = 1..K_max of the balanced, heterogeneity-free finite-K error.

    ``mode="fixed_batch"`` holds the batch size at ``size`` (so n = K * size);
    ``mode="fixed_total"`` holds n at ``size`` (batch = n // K, K <= n).
    ``t=None`` evaluates the t -> inf limit, which needs J < 1.
    Ties go to the smallest K.  ``finite_opt`` is False when the minimum sits
    at ``K_max``, i.e. the curve is still falling at the right edge.
    """
    if K_max < 2:
        raise ValueError("K_max must be at least 2")
    if mode == "fixed_total":
        K_max = min(K_max, size)
    elif mode != "fixed_batch":
        raise ValueError(f"unknown mode {mode!r}")
    grid = np.arange(1, K_max + 1)
    vals = np.empty(K_max)
    with np.errstate(over="ignore", invalid="ignore"):
        for j, K in enumerate(grid):
            n = K * size if mode == "fixed_batch" else size
            A, J, nt = th.kfinite_simple_coefficients(p, m, n, int(K), alpha)
            noise = alpha**2 * p * sigma**2 / (m * nt) * th._geometric(A, int(K))
            if t is None:
                vals[j] = noise / (1 - J) if J < 1 else np.inf
            else:
                vals[j] = th.theory_kfinite_simple(p, m, n, int(K), alpha, sigma, delta0_sq, t)
    k = argmin_smallest(vals)
    rep = KOptReport(grid, vals, int(grid[k]), bool(grid[k] < K_max))
    if mode == "fixed_total" and sigma == 0:
        rep.f_values = eval_fK(grid, alpha, p, size, m)
        rep.f_argmin = int(grid[argmin_smallest(rep.f_values)])
        rep.bracket = kopt_bracket(alpha, p, size, m)
        rep.bracket_contains = bool(rep.bracket[0] <= rep.f_argmin <= rep.bracket[1])
    return rep


def kfinite_error_by_K(cfg: ExperimentConfig, K_values) -> np.ndarray:
    """General finite-K expected error at round ``cfg.T`` for each K (inf if K leaves empty batches)."""
    spec, plan = cfg.replace(regime="k1", K=None).materialize()
    out = np.empty(len(K_values))
    with np.errstate(over="ignore", invalid="ignore"):
        for j, K in enumerate(K_values):
            try:
                curve = th.theory_kfinite(spec.with_regime(Regime.kfinite(int(K))), plan)
                out[j] = curve.expected[-1]
            except BatchTooSmall:
                out[j] = np.inf
    return np.where(np.isnan(out), np.inf, out)


def kopt_general(cfg: ExperimentConfig, K_max: int | None = None) -> tuple[int, float, np.ndarray]:
    nmin = int(np.min(cfg.n))
    K_max = min(nmin, 512) if K_max is None else min(K_max, nmin)
    grid = np.arange(1, K_max + 1)
    vals = kfinite_error_by_K(cfg, grid)
    k = argmin_smallest(vals)
    return int(grid[k]), float(vals[k]), vals


def kopt_vs_m_study(m_list, cfg: ExperimentConfig, K_max: int | None = None) -> list[dict]:
    rows = []
    for m in m_list:
        if m < 2:
            raise ValueError("each m must be at least 2")
        k, v, _ = kopt_general(cfg.replace(m=int(m)), K_max)
        rows.append({"m": int(m), "k_opt": k, "min_expected_model_error": v})
    ks = [r["k_opt"] for r in rows]
    for r in rows:
        r["non_decreasing"] = all(a <= b for a, b in zip(ks, ks[1:]))
    return rows


@dataclass
class Calibration:
    target: int
    alpha: float
    hit: bool
    k_opt: int
    left: tuple[float, int]
    right: tuple[float, int]
    scan: list[tuple[float, int]] = field(default_factory=list)


def calibrate_alpha(cfg: ExperimentConfig, target: int, lo: float = 1e-3, hi: float | None = None,
                    grid: int = 60, iters: int = 50) -> Calibration:
    """Find a step size whose finite-K optimum (general form, round ``cfg.T``) equals ``target``.

    A log-spaced scan locates where the optimum crosses ``target``; bisection
    then narrows each crossing.  K_opt only takes the values the integer batch
    sizes allow, so the target may be skipped; ``hit`` reports whether it was
    reached.  On a miss, ``alpha`` is the bracket end whose optimum lies
    closest to ``target``, and ``left``/``right`` record both ends.
    """
    m, p, n = cfg.m, cfg.p, int(np.min(cfg.n))
    if hi is None:
        hi = min(0.999, th.stability_threshold_k1(p, m, n))

    def kopt(a):
        return kopt_general(cfg.replace(alpha=float(a)))[0]

    alphas = np.geomspace(lo, hi, grid)
    scan = [(float(a), kopt(a)) for a in alphas]
    for a, k in scan:
        if k == target:
            return Calibration(target, a, True, k, (a, k), (a, k), scan)
    best = None
    for (a0, k0), (a1, k1) in zip(scan, scan[1:]):
        if (k0 - target) * (k1 - target) >= 0:
            continue
        for _ in range(iters):
            mid = 0.5 * (a0 + a1)
            km = kopt(mid)
            if km == target:
                return Calibration(target, mid, True, km, (a0, k0), (a1, k1), scan)
            if (km - target) * (k0 - target) > 0:
                a0, k0 = mid, km
            else:
                a1, k1 = mid, km
        if best is None:
            best = ((a0, k0), (a1, k1))
    if best is None:
        raise ValueError(f"K_opt never crosses {target} for alpha in [{lo}, {hi}]")
    (a0, k0), (a1, k1) = best
    a, k = (a0, k0) if abs(k0 - target) <= abs(k1 - target) else (a1, k1)
    return Calibration(target, a, False, k, (a0, k0), (a1, k1), scan)


# ---------------------------------------------------------------------------
# double descent


def double_descent_sweep(p_list, cfg: ExperimentConfig, t_list) -> list[dict]:
    """K=inf expected error per (p, t); rows in the gap around n carry ``skipped_reason``."""
    T = max(t_list)
    rows = []
    for p in p_list:
        try:
            spec, plan = cfg.replace(p=int(p), T=T, regime="kinf", K=None).materialize()
            curve = th.theory_kinf(spec, plan)
        except RegimeGap:
            rows.extend({"p": int(p), "t": int(t), "expected_model_error": None,
                         "skipped_reason": "RegimeGap"} for t in t_list)
            continue
        side = "OP" if p > np.max(plan.n) else "UP"
        rows.extend({"p": int(p), "t": int(t), "side": side,
                     "expected_model_error": float(curve.expected[t]), "skipped_reason": ""}
                    for t in t_list)
    for t in t_list:
        prev = None
        for r in rows:
            if r["t"] != t or r["skipped_reason"]:
                continue
            r["descending"] = bool(r["side"] == "OP" and prev is not None and prev["side"] == "OP"
                                   and r["expected_model_error"] < prev["expected_model_error"])
            prev = r
    return rows


def null_risk_factor(p, n, m) -> float:
    """``C^ceil(p ln p)`` for balanced over-parameterized K=inf training."""
    C, _ = th.kinf_simple_coefficients(p, m, n, 0.0, 0.0)
    return C ** math.ceil(p * math.log(p))


# ---------------------------------------------------------------------------
# lemma oracles


@dataclass
class LemmaCheckResult:
    lemma_id: str
    estimate: np.ndarray
    target: np.ndarray
    stderr: np.ndarray
    trials: int
    passed: bool

    def to_dict(self) -> dict:
        return {"lemma_id": self.lemma_id, "estimate": np.asarray(self.estimate).tolist(),
                "target": np.asarray(self.target).tolist(), "stderr": np.asarray(self.stderr).tolist(),
                "trials": self.trials, "passed": self.passed}


LEMMA_DEFAULTS = {
    "key_step": {"p": 50, "n": 10},
    "proj_norm": {"p": 50, "n": 10},
    "bias": {"p": 50, "n": 10},
    "inv_gram": {"a": 30, "b": 5},
    "iw_norm": {"a": 30, "b": 5, "sigma_beta": 0.7},
    "gram": {"a": 6, "b": 4},
    "fourth_moment": {"a": 6, "b": 4},
    "cross_term": {"p": 50, "n_i": 10, "n_j": 15},
    "model_error": {"p": 20, "sigma": 0.7},
}

_CHUNK = 2000


def _projector(X: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Batched ``P v`` for designs ``X`` of shape (R, p, n)."""
    Xt = np.swapaxes(X, 1, 2)
    coef = np.linalg.solve(Xt @ X, (Xt @ v)[..., None])[..., 0]
    return np.einsum("rpn,rn->rp", X, coef)


def _unit(rng, p):
    v = rng.standard_normal(p)
    return v / np.linalg.norm(v)


def _check_dims(lemma_id: str, d: dict) -> None:
    if lemma_id in ("key_step", "proj_norm", "bias") and d["p"] <= d["n"] + 1:
        raise DimensionViolation(f"{lemma_id} needs p > n + 1 (got p={d['p']}, n={d['n']})")
    if lemma_id in ("inv_gram", "iw_norm") and d["a"] <= d["b"] + 3:
        # finite MC variance needs the second inverse-Wishart moment
        raise DimensionViolation(f"{lemma_id} oracle needs a > b + 3 (got a={d['a']}, b={d['b']})")
    if lemma_id in ("gram", "fourth_moment") and (d["a"] < 1 or d["b"] < 1):
        raise DimensionViolation("a and b must be positive")
    if lemma_id == "cross_term" and d["p"] <= max(d["n_i"], d["n_j"]) + 1:
        raise DimensionViolation("cross_term needs p > max(n_i, n_j) + 1")


def _fixed(lemma_id: str, d: dict, rng: np.random.Generator) -> dict:
    """Deterministic vectors shared by all trials, plus the analytic target."""
    if lemma_id in ("key_step", "proj_norm", "bias"):
        p, n = d["p"], d["n"]
        v = _unit(rng, p)
        target = {"key_step": (n / p) * v, "proj_norm": n / p, "bias": 1 - n / p}[lemma_id]
        return {"v": v, "target": target}
    if lemma_id == "inv_gram":
        return {"target": 1 / (d["a"] - d["b"] - 1)}
    if lemma_id == "iw_norm":
        return {"target": d["b"] * d["sigma_beta"] ** 2 / (d["a"] - d["b"] - 1)}
    if lemma_id == "gram":
        return {"target": float(d["a"])}
    if lemma_id == "fourth_moment":
        return {"target": float(d["b"] * (d["b"] + d["a"] + 1))}
    if lemma_id == "cross_term":
        return {"v": _unit(rng, d["p"]), "target": d["n_i"] * d["n_j"] / d["p"] ** 2}
    if lemma_id == "model_error":
        w_star = rng.standard_normal(d["p"])
        w_hat = w_star + 0.5 * _unit(rng, d["p"])
        return {"w_star": w_star, "w_hat": w_hat,
                "target": float(np.sum((w_hat - w_star) ** 2) + d["sigma"] ** 2)}
    raise ValueError(f"unknown lemma {lemma_id!r}")


def _samples(lemma_id: str, d: dict, fx: dict, R: int, rng: np.random.Generator) -> np.ndarray:
    """``R`` per-trial draws whose mean estimates the target (shape (R,) or (R, p))."""
    if lemma_id in ("key_step", "proj_norm", "bias"):
        v = fx["v"]
        Pv = _projector(rng.standard_normal((R, d["p"], d["n"])), v)
        if lemma_id == "key_step":
            return Pv
        if lemma_id == "proj_norm":
            return np.sum(Pv**2, axis=1)
        return np.sum((v - Pv) ** 2, axis=1)
    if lemma_id in ("inv_gram", "iw_norm"):
        a, b = d["a"], d["b"]
        Km = rng.standard_normal((R, a, b))
        Gm = np.swapaxes(Km, 1, 2) @ Km
        if lemma_id == "inv_gram":
            return np.trace(np.linalg.inv(Gm), axis1=1, axis2=2) / b
        beta = d["sigma_beta"] * rng.standard_normal((R, b))
        u = np.einsum("rab,rb->ra", Km, np.linalg.solve(Gm, beta[..., None])[..., 0])
        return np.sum(u**2, axis=1)
    if lemma_id in ("gram", "fourth_moment"):
        a, b = d["a"], d["b"]
        Km = rng.standard_normal((R, a, b))
        if lemma_id == "gram":
            return np.sum(Km**2, axis=(1, 2)) / b
        S = Km @ np.swapaxes(Km, 1, 2)
        return np.sum(S * S, axis=(1, 2)) / a
    if lemma_id == "cross_term":
        p, v = d["p"], fx["v"]
        Pi = _projector(rng.standard_normal((R, p, d["n_i"])), v)
        Pj = _projector(rng.standard_normal((R, p, d["n_j"])), v)
        return np.sum(Pi * Pj, axis=1)
    x = rng.standard_normal((R, d["p"]))
    y = x @ fx["w_star"] + d["sigma"] * rng.standard_normal(R)
    return (x @ fx["w_hat"] - y) ** 2


def lemma_oracle(lemma_id: str, dims: dict | None = None, trials: int = 5000, seed: int = 0) -> LemmaCheckResult:
    """Monte-Carlo estimate of one identity; passes when every component is within 3 SE."""
    if lemma_id not in LEMMA_DEFAULTS:
        raise ValueError(f"unknown lemma {lemma_id!r}")
    if trials < 2:
        raise ValueError("need at least 2 trials")
    d = {**LEMMA_DEFAULTS[lemma_id], **(dims or {})}
    _check_dims(lemma_id, d)
    tag = LEMMA_IDS.index(lemma_id)
    fx = _fixed(lemma_id, d, aux_rng(seed, 0x1E44A, tag))
    chunks, done = [], 0
    while done < trials:
        r = min(_CHUNK, trials - done)
        chunks.append(_samples(lemma_id, d, fx, r, aux_rng(seed, 0x1E44B, tag, done)))
        done += r
    x = np.concatenate(chunks, axis=0)
    est = x.mean(axis=0)
    se = x.std(axis=0, ddof=1) / math.sqrt(x.shape[0])
    target = np.broadcast_to(np.asarray(fx["target"], dtype=float), est.shape).copy()
    passed = bool(np.all(np.abs(est - target) <= 3 * se))
    return LemmaCheckResult(lemma_id, est, target, se, int(x.shape[0]), passed)


LEMMA_IDS = tuple(LEMMA_DEFAULTS)


def lemma_suite(trials: int = 5000, seed: int = 0, rel_se: float = 1 / 30) -> list[LemmaCheckResult]:
    """Run every oracle, growing the trial count until ``SE <= rel_se * |target|``."""
    out = []
    for lid in LEMMA_IDS:
        R = trials
        for _ in range(6):
            res = lemma_oracle(lid, trials=R, seed=seed)
            scale = np.linalg.norm(res.target) if res.target.ndim else abs(float(res.target))
            se = float(np.max(res.stderr))
            if se <= rel_se * scale:
                break
            R = int(math.ceil(R * 1.2 * (se / (rel_se * scale)) ** 2))
        out.append(res)
    return out


# ---------------------------------------------------------------------------
# exact reductions between the closed forms


def _rel(a, b) -> float:
    a, b = np.asarray(a, float), np.asarray(b, float)
    return float(np.max(np.abs(a - b) / np.maximum(np.abs(b), 1e-300)))


def specialization_checks(n_configs: int = 10, seed: int = 0, tol: float = 1e-10) -> list[dict]:
    """Compare general closed forms with their special cases on random configurations."""
    rng = aux_rng(seed, 0x5BEC)
    worst: dict[str, float] = {}

    def record(name, err):
        worst[name] = max(worst.get(name, 0.0), err)

    for _ in range(n_configs):
        m = int(rng.integers(2, 6))
        n = int(rng.integers(8, 30))
        sigma = float(rng.uniform(0, 1))
        het = float(rng.uniform(0, 1))
        d0 = float(rng.uniform(0.2, 2))
        T = int(rng.integers(1, 9))
        ts = np.arange(T + 1)

        p = int(rng.integers(5, 60))
        alpha = float(rng.uniform(0.01, 0.9) * th.stability_threshold_k1(p, m, n))
        base = ExperimentConfig(m=m, p=p, s=min(3, p), T=T, n=n, alpha=alpha, sigma=sigma,
                                het_kind="stationary", het_norm=het, delta0_norm=d0,
                                base_seed=int(rng.integers(1 << 30)))
        spec, plan = base.materialize()
        gen = th.theory_k1(spec, plan).expected
        record("k1_general_vs_simple", _rel(gen, th.theory_k1_simple(p, m, n, alpha, sigma, het**2, d0**2, ts)))

        K = int(rng.integers(2, 5))
        cfg = base.replace(regime="kfinite", K=K, het_kind="zero", het_norm=0.0,
                           alpha=float(rng.uniform(0.01, 0.3)))
        spec, plan = cfg.materialize()
        gen = th.theory_kfinite(spec, plan).expected
        record("kfinite_general_vs_simple",
               _rel(gen, th.theory_kfinite_simple(p, m, n, K, cfg.alpha, sigma, d0**2, ts)))

        cfg = base.replace(regime="kfinite", K=1, het_kind="nonstationary",
                           alpha=[float(a) for a in rng.uniform(0.01, 0.3, m)],
                           n=[int(k) for k in rng.integers(5, 30, m)])
        spec, plan = cfg.materialize()
        record("kfinite_K1_vs_k1", _rel(th.theory_kfinite(spec, plan).expected,
                                        th.theory_k1(spec.with_regime(Regime.k1()), plan).expected))

        p_op = n + int(rng.integers(2, 80))
        spec, plan = base.replace(p=p_op, regime="kinf").materialize()
        record("kinf_op_general_vs_simple", _rel(th.theory_kinf(spec, plan).expected,
                                                 th.theory_kinf_simple(p_op, m, n, sigma, het**2, d0**2, ts)))

        p_up = int(rng.integers(1, n - 2))
        spec, plan = base.replace(p=p_up, s=1, regime="kinf", het_kind="zero", het_norm=0.0).materialize()
        record("kinf_up_general_vs_simple", _rel(th.theory_kinf(spec, plan).expected,
                                                 th.theory_kinf_simple(p_up, m, n, sigma, 0.0, d0**2, ts)))

        # one client, one round: ordinary least-squares / min-norm risk
        cfg1 = ExperimentConfig(m=1, p=p_up, s=1, T=1, n=n, alpha=0.1, sigma=sigma, regime="kinf",
                                delta0_norm=d0, base_seed=int(rng.integers(1 << 30)))
        spec, plan = cfg1.materialize()
        record("single_client_least_squares", _rel(th.theory_kinf(spec, plan).expected[1],
                                                   p_up * sigma**2 / (n - p_up - 1)))
        cfg1 = cfg1.replace(p=p_op, s=3)
        spec, plan = cfg1.materialize()
        record("single_client_min_norm", _rel(th.theory_kinf(spec, plan).expected[1],
                                              (1 - n / p_op) * d0**2 + n * sigma**2 / (p_op - n - 1)))
    return [{"name": k, "max_rel_err": v, "passed": bool(v <= tol)} for k, v in worst.items()]
