"""Closed-form expected model error ``E||w* - w_t||^2`` for the three regimes.

Each general evaluator walks the rounds once, carrying

* the scalar recurrence ``E||delta_t||^2 = a_t E||delta_{t-1}||^2 + b_t`` and
* the mean deviation ``g_t = E[delta_t]``, which the offsets ``b_t`` need for
  their ``gamma^T g_{t-1}`` cross terms.

The per-round pair ``(a_t, b_t)`` is ``(H_t, G_t)`` for K=1, ``(J_t, Q_t)`` for
finite K and ``(C_t, D_t)`` for K=inf.  The simple-case functions take
scalars and return the value at round ``t``.
"""

from __future__ import annotations

import contextlib
from dataclasses import dataclass

import numpy as np

from .config import RoundPlan, SystemSpec
from .errors import BatchTooSmall, RegimeGap

# Test-only switch used by the verification negative control.
_FAULT: str | None = None


@contextlib.contextmanager
def injected_fault(name: str = "g_sign"):
    """Flip the sign of the heterogeneity-variance term of ``G_t`` while active."""
    global _FAULT
    prev, _FAULT = _FAULT, name
    try:
        yield
    finally:
        _FAULT = prev


def set_fault(name: str | None) -> None:
    global _FAULT
    _FAULT = name


@dataclass(frozen=True, eq=False)
class TheoryCurve:
    regime: str
    expected: np.ndarray
    g: np.ndarray
    scale: np.ndarray
    offset: np.ndarray
    coef_names: tuple[str, str]


def eval_recurrence(a, b, beta0):
    """General term of ``beta_i = a_i beta_{i-1} + b_i`` after ``len(a)`` steps.

    ``b`` may hold scalars or vectors (shape ``(l, p)``).
    """
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.shape[0] != b.shape[0]:
        raise ValueError("a and b must have equal length")
    l = a.shape[0]
    tail = np.ones(l)
    for i in range(l - 2, -1, -1):
        tail[i] = tail[i + 1] * a[i + 1]
    head = np.prod(a) * np.asarray(beta0, dtype=float)
    return head + np.tensordot(tail, b, axes=1) if l else head + 0.0


def iterate_recurrence(a, b, beta0) -> np.ndarray:
    """All iterates ``beta_0..beta_l`` of the scalar recurrence."""
    out = np.empty(len(a) + 1)
    out[0] = beta0
    for i, (ai, bi) in enumerate(zip(a, b)):
        out[i + 1] = ai * out[i] + bi
    return out


def _curve(regime, spec, g, scale, offset, names) -> TheoryCurve:
    d0 = float(np.sum(spec.delta0**2))
    return TheoryCurve(regime, iterate_recurrence(scale, offset, d0), g, scale, offset, names)


def _round(plan: RoundPlan, t: int):
    return (plan.n[:, t - 1].astype(float), plan.alpha[:, t - 1], plan.sigma[:, t - 1] ** 2,
            plan.gamma[:, t - 1, :])


def _offdiag(n: np.ndarray) -> np.ndarray:
    W = np.outer(n, n)
    np.fill_diagonal(W, 0.0)
    return W


# ---------------------------------------------------------------------------
# K = 1


def theory_k1(spec: SystemSpec, plan: RoundPlan) -> TheoryCurve:
    p, T = spec.p, spec.T
    g = np.empty((T + 1, p))
    g[0] = spec.delta0
    H = np.empty(T)
    G = np.empty(T)
    het_sign = -1.0 if _FAULT == "g_sign" else 1.0
    for t in range(1, T + 1):
        n, a, s2, gam = _round(plan, t)
        N = n.sum()
        keep = np.sum(n * (1 - a))
        drift = (a * n) @ gam
        gg = gam @ g[t - 1]
        curv = a**2 * n * (p + 1)
        H[t - 1] = (keep**2 + curv.sum()) / N**2
        G[t - 1] = (np.sum(a**2 * p * n * s2)
                    + drift @ drift
                    + het_sign * np.sum(curv * np.sum(gam**2, axis=1))
                    + 2 * keep * np.sum(n * a * gg)
                    - 2 * np.sum(curv * gg)) / N**2
        g[t] = (keep * g[t - 1] + drift) / N
    return _curve("k1", spec, g, H, G, ("H", "G"))


def k1_simple_coefficients(p, m, n, alpha, sigma, gamma_bar_sq):
    H = (1 - alpha) ** 2 + alpha**2 * (p + 1) / (m * n)
    G = p * alpha**2 * sigma**2 / (m * n) + alpha**2 * (p + 1) / (m * n) * gamma_bar_sq
    return H, G


def _geometric(r, t):
    """``1 + r + ... + r^(t-1)``, exact count when ``r == 1``."""
    t = np.asarray(t)
    if r == 1:
        return t.astype(float)
    return (1 - r**t) / (1 - r)


def theory_k1_simple(p, m, n, alpha, sigma, gamma_bar_sq, delta0_sq, t):
    H, G = k1_simple_coefficients(p, m, n, alpha, sigma, gamma_bar_sq)
    H = np.float64(H)
    return H**t * delta0_sq + _geometric(H, t) * G


def stability_threshold_k1(p, m, n) -> float:
    """Step size at which the K=1 contraction factor ``H`` crosses 1."""
    return 2.0 / (1.0 + (p + 1) / (m * n))


# ---------------------------------------------------------------------------
# finite K


def theory_kfinite(spec: SystemSpec, plan: RoundPlan) -> TheoryCurve:
    K = spec.regime.K
    p, T = spec.p, spec.T
    if np.any(plan.n // K == 0):
        raise BatchTooSmall(f"K={K} leaves an empty batch for some client")
    g = np.empty((T + 1, p))
    g[0] = spec.delta0
    J = np.empty(T)
    Q = np.empty(T)
    kk = np.arange(1, K + 1)
    for t in range(1, T + 1):
        n, a, s2, gam = _round(plan, t)
        nt = (plan.n[:, t - 1] // K).astype(float)
        N = n.sum()
        A = (1 - a) ** 2 + a**2 * (p + 1) / nt
        c = (1 - a) ** K
        W = _offdiag(n)
        J[t - 1] = (np.sum(n**2 * A**K) + c @ W @ c) / N**2

        q = a**2 * (nt + p + 1) / nt
        gnorm = np.sum(gam**2, axis=1)
        gg = gam @ g[t - 1]
        decay = (1 - a)[:, None] ** (kk - 1)
        B = ((a**2 * p * s2 / nt)[:, None]
             + (q[:, None] + 2 * (a - q)[:, None] * (1 - decay)) * gnorm[:, None]
             + 2 * ((a - q) * gg)[:, None] * decay)
        own = np.sum(B * A[:, None] ** (K - kk), axis=1)
        cross = 2 * np.sum(W * np.outer(c, (1 - c) * gg)) + np.sum(W * np.outer(1 - c, 1 - c) * (gam @ gam.T))
        Q[t - 1] = (np.sum(n**2 * own) + cross) / N**2
        g[t] = ((n * c).sum() * g[t - 1] + (n * (1 - c)) @ gam) / N
    return _curve(str(spec.regime), spec, g, J, Q, ("J", "Q"))


def kfinite_simple_coefficients(p, m, n, K, alpha):
    nt = n // K
    if nt == 0:
        raise BatchTooSmall(f"K={K} exceeds n={n}")
    A = (1 - alpha) ** 2 + alpha**2 * (p + 1) / nt
    J = (A**K + (m - 1) * (1 - alpha) ** (2 * K)) / m
    return A, J, nt


def theory_kfinite_simple(p, m, n, K, alpha, sigma, delta0_sq, t):
    """Finite-K expected error for balanced data without heterogeneity."""
    A, J, nt = kfinite_simple_coefficients(p, m, n, K, alpha)
    A, J = np.float64(A), np.float64(J)
    noise = alpha**2 * p * sigma**2 / (m * nt) * _geometric(A, K)
    return J**t * delta0_sq + _geometric(J, t) * noise


# ---------------------------------------------------------------------------
# K = inf


def kinf_side(p: int, n: np.ndarray) -> str:
    if p > n.max() + 1:
        return "OP"
    if p < n.min() - 1:
        return "UP"
    raise RegimeGap(f"p={p} lies in the uncharacterized band around n in [{n.min()}, {n.max()}]")


def theory_kinf(spec: SystemSpec, plan: RoundPlan) -> TheoryCurve:
    p, T = spec.p, spec.T
    side = kinf_side(p, plan.n) if plan.n.size else "OP"
    g = np.empty((T + 1, p))
    g[0] = spec.delta0
    C = np.empty(T)
    D = np.empty(T)
    for t in range(1, T + 1):
        n, _, s2, gam = _round(plan, t)
        N = n.sum()
        mean_het = (n @ gam) / N
        if side == "UP":
            C[t - 1] = 0.0
            D[t - 1] = mean_het @ mean_het + np.sum(n**2 * p * s2 / (n - p - 1)) / N**2
            g[t] = mean_het
            continue
        keep = n * (1 - n / p)
        W = _offdiag(n)
        gg = gam @ g[t - 1]
        C[t - 1] = (np.sum(n * keep) + (1 - n / p) @ W @ (1 - n / p)) / N**2
        D[t - 1] = (np.sum(n**3 * s2 / (p - n - 1) + n**3 / p * np.sum(gam**2, axis=1))
                    + np.sum(_offdiag(n**2) * (gam @ gam.T)) / p**2
                    + 2 * np.sum(W * np.outer(1 - n / p, n * gg)) / p) / N**2
        g[t] = (keep.sum() * g[t - 1] + (n**2 / p) @ gam) / N
    return _curve(f"kinf-{side}", spec, g, C, D, ("C", "D"))


def kinf_simple_coefficients(p, m, n, sigma, gamma_bar_sq):
    """``(C, D)`` for balanced data in the over-parameterized regime.

    The heterogeneity part of ``D`` is ``(n / (m p)) (1 - n / p) * gamma_bar_sq``,
    which is what the general per-round ``D_t`` reduces to under zero-sum,
    equal-norm heterogeneity.
    """
    x = n / p
    C = (1 - x) / m + (m - 1) / m * (1 - x) ** 2
    D = n * sigma**2 / (m * (p - n - 1)) + x * (1 - x) / m * gamma_bar_sq
    return C, D


def theory_kinf_simple(p, m, n, sigma, gamma_bar_sq, delta0_sq, t):
    if p > n + 1:
        C, D = kinf_simple_coefficients(p, m, n, sigma, gamma_bar_sq)
        return C**t * delta0_sq + _geometric(C, t) * D
    if p < n - 1:
        up = p * sigma**2 / (m * (n - p - 1))
        return np.where(np.asarray(t) == 0, delta0_sq, up) if np.ndim(t) else (delta0_sq if t == 0 else up)
    raise RegimeGap(f"p={p} too close to n={n}")


def theory_curve(spec: SystemSpec, plan: RoundPlan) -> TheoryCurve:
    kind = spec.regime.kind
    if kind == "k1":
        return theory_k1(spec, plan)
    if kind == "kfinite":
        return theory_kfinite(spec, plan)
    return theory_kinf(spec, plan)
