"""Monte-Carlo FedAvg on the heterogeneous Gaussian linear model.

Every round each client draws a fresh design ``X`` (``p x n``) and noise
``e`` from its own seed ``trial_seed(base_seed, trial, t, i)``, forms
``y = X^T (w* - gamma) + e``, runs its local update from the current average
and the server takes the sample-count weighted mean.
"""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .config import Regime, RoundPlan, SystemSpec, problem_fingerprint, trial_seed
from .errors import BatchTooSmall, BoundaryDimension
from .linalg import least_squares_solve, min_norm_update

log = logging.getLogger(__name__)


@dataclass
class FleetState:
    w_avg: np.ndarray
    round: int
    locals: np.ndarray | None = None


@dataclass(frozen=True, eq=False)
class SimCurve:
    mean: np.ndarray
    variance: np.ndarray
    stderr: np.ndarray
    trials: int
    fingerprint: str


# ---------------------------------------------------------------------------
# local updates


def local_step_k1(w_in: np.ndarray, X: np.ndarray, y: np.ndarray, alpha: float) -> np.ndarray:
    """One full-batch gradient step on ``||y - X^T w||^2 / (2n)``."""
    n = X.shape[1]
    return w_in - (alpha / n) * (X @ (X.T @ w_in - y))


def local_multibatch(w_in: np.ndarray, X: np.ndarray, y: np.ndarray, K: int, alpha: float) -> np.ndarray:
    """``K`` sequential gradient steps over disjoint contiguous batches of ``n // K`` columns.

    Columns beyond ``K * (n // K)`` are not used.
    """
    n = X.shape[1]
    nb = n // K
    if nb == 0:
        raise BatchTooSmall(f"K={K} exceeds the {n} available samples")
    w = w_in
    for k in range(K):
        sl = slice(k * nb, (k + 1) * nb)
        w = local_step_k1(w, X[:, sl], y[sl], alpha)
    return w


def local_converge(w_in: np.ndarray, X: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Limit point of local GD: min-norm interpolation (p > n) or least squares (p < n)."""
    p, n = X.shape
    if p == n:
        raise BoundaryDimension("p = n has no defined local limit")
    if p > n:
        return min_norm_update(X, y, w_in)
    return least_squares_solve(X, y)


def local_update(regime: Regime, w_in, X, y, alpha):
    if regime.kind == "k1":
        return local_step_k1(w_in, X, y, alpha)
    if regime.kind == "kfinite":
        return local_multibatch(w_in, X, y, regime.K, alpha)
    return local_converge(w_in, X, y)


def client_data(spec: SystemSpec, plan: RoundPlan, trial: int, t: int, i: int):
    """Fresh ``(X, y)`` for client ``i`` in round ``t`` (1-based) of ``trial``."""
    rng = np.random.default_rng(trial_seed(spec.base_seed, trial, t, i))
    n = int(plan.n[i, t - 1])
    X = rng.standard_normal((spec.p, n))
    e = plan.sigma[i, t - 1] * rng.standard_normal(n)
    w_tilde = spec.w_star - plan.gamma[i, t - 1]
    return X, X.T @ w_tilde + e


def weighted_average(locals_: np.ndarray, n: np.ndarray) -> np.ndarray:
    return (n / n.sum()) @ locals_


# ---------------------------------------------------------------------------
# rounds and trials


def run_round(state: FleetState, spec: SystemSpec, plan: RoundPlan, trial: int = 0) -> FleetState:
    t = state.round + 1
    locals_ = np.empty((spec.m, spec.p))
    for i in range(spec.m):
        X, y = client_data(spec, plan, trial, t, i)
        locals_[i] = local_update(spec.regime, state.w_avg, X, y, plan.alpha[i, t - 1])
    n = plan.n[:, t - 1].astype(float)
    return FleetState(weighted_average(locals_, n), t, locals_)


def run_trial(spec: SystemSpec, plan: RoundPlan, trial_index: int) -> np.ndarray:
    """``||w* - w_t||^2`` for ``t = 0..T`` in one trial."""
    out = np.empty(spec.T + 1)
    state = FleetState(np.array(spec.w0, dtype=float), 0)
    out[0] = np.sum((spec.w_star - state.w_avg) ** 2)
    for t in range(1, spec.T + 1):
        state = run_round(state, spec, plan, trial_index)
        out[t] = np.sum((spec.w_star - state.w_avg) ** 2)
    return out


def run_monte_carlo(spec: SystemSpec, plan: RoundPlan, trials: int, workers: int = 1,
                    trial_indices: Sequence[int] | None = None) -> SimCurve:
    """Aggregate ``trials`` independent trials.

    Trials may run on a thread pool; each result lands in its own row and the
    reduction runs in ascending trial order, so the output does not depend on
    ``workers``.  ``trial_indices`` overrides the default ``0..trials-1``.
    """
    idx = list(range(trials)) if trial_indices is None else list(trial_indices)
    if len(idx) < 2:
        raise ValueError("Monte-Carlo aggregation needs at least 2 trials")
    if spec.regime.kind == "kfinite" and np.any(plan.n % spec.regime.K):
        log.warning("K=%d does not divide every n; trailing samples are dropped", spec.regime.K)
    rows = np.empty((len(idx), spec.T + 1))
    if workers <= 1:
        for r, k in enumerate(idx):
            rows[r] = run_trial(spec, plan, k)
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            for r, row in enumerate(pool.map(lambda k: run_trial(spec, plan, k), idx)):
                rows[r] = row
    return summarize(rows, problem_fingerprint(spec, plan))


def summarize(rows: np.ndarray, fingerprint: str = "") -> SimCurve:
    R = rows.shape[0]
    mean = np.zeros(rows.shape[1])
    for r in range(R):
        mean += rows[r]
    mean /= R
    var = np.zeros(rows.shape[1])
    for r in range(R):
        var += (rows[r] - mean) ** 2
    var /= R - 1
    const = np.all(rows == rows[0], axis=0)
    mean[const] = rows[0, const]
    var[const] = 0.0
    return SimCurve(mean, var, np.sqrt(var / R), R, fingerprint)
