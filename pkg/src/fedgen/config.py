"""Problem specifications, heterogeneity schedules and seed derivation.

A run is described by two immutable objects: a :class:`SystemSpec` holding the
global quantities (dimensions, regime, target and initial model) and a
:class:`RoundPlan` holding the per-(client, round) quantities.  Arrays in a
``RoundPlan`` are indexed ``[i, t - 1]`` for client ``i`` and round ``t``.

:class:`ExperimentConfig` is the JSON-facing form; :meth:`ExperimentConfig.materialize`
turns it into a ``(SystemSpec, RoundPlan)`` pair deterministically from
``base_seed``.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from typing import Any

import numpy as np

from .errors import ImpossibleSchedule, InvalidConfig

MASK64 = (1 << 64) - 1
INDEX_LIMIT = 1 << 16
ZERO_SUM_TOL = 1e-12
NORM_TOL = 1e-12
MAX_PROJECTION_ITERS = 50
MAX_RESTARTS = 20

# Stream tags for config-level randomness; trial data never uses these.
_TAG_W_STAR = 1
_TAG_W0 = 2
_TAG_GAMMA = 3


# ---------------------------------------------------------------------------
# seeds


def _splitmix64(x: int) -> int:
    x = (x + 0x9E3779B97F4A7C15) & MASK64
    x = ((x ^ (x >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
    x = ((x ^ (x >> 27)) * 0x94D049BB133111EB) & MASK64
    return x ^ (x >> 31)


def trial_seed(base_seed: int, trial_index: int, round_index: int, client_index: int) -> int:
    """Derive the 64-bit seed for one client's data in one round of one trial.

    The index tuple is packed into 48 bits and pushed through a bijective
    64-bit mixer keyed by ``base_seed``, so distinct tuples (each index below
    2**16) always receive distinct seeds.
    """
    for name, value in (("trial_index", trial_index), ("round_index", round_index),
                        ("client_index", client_index)):
        if not 0 <= value < INDEX_LIMIT:
            raise ValueError(f"{name}={value} outside [0, {INDEX_LIMIT})")
    packed = (trial_index << 32) | (round_index << 16) | client_index
    key = _splitmix64(base_seed & MASK64)
    return _splitmix64((key + packed) & MASK64)


def aux_rng(base_seed: int, tag: int, *extra: int) -> np.random.Generator:
    """Generator for config-level quantities (target, init, heterogeneity)."""
    return np.random.default_rng(np.random.SeedSequence([base_seed & MASK64, 0xF00D, tag, *extra]))


# ---------------------------------------------------------------------------
# regimes and core types


@dataclass(frozen=True)
class Regime:
    """Local-update regime: ``k1``, ``kfinite`` (with ``K``) or ``kinf``."""

    kind: str
    K: int | None = None

    def __post_init__(self):
        if self.kind not in ("k1", "kfinite", "kinf"):
            raise InvalidConfig(f"unknown regime {self.kind!r}")
        if self.kind == "kfinite" and self.K is None:
            raise InvalidConfig("regime kfinite needs K")

    @classmethod
    def k1(cls) -> Regime:
        return cls("k1")

    @classmethod
    def kfinite(cls, K: int) -> Regime:
        return cls("kfinite", int(K))

    @classmethod
    def kinf(cls) -> Regime:
        return cls("kinf")

    def __str__(self) -> str:
        return f"kfinite(K={self.K})" if self.kind == "kfinite" else self.kind


def _frozen(a: np.ndarray, dtype=float) -> np.ndarray:
    a = np.array(a, dtype=dtype, copy=True)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class SystemSpec:
    m: int
    p: int
    s: int
    T: int
    regime: Regime
    w_star: np.ndarray
    w0: np.ndarray
    base_seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "w_star", _frozen(self.w_star))
        object.__setattr__(self, "w0", _frozen(self.w0))

    @property
    def delta0(self) -> np.ndarray:
        return self.w_star - self.w0

    def with_regime(self, regime: Regime) -> SystemSpec:
        return dataclasses.replace(self, regime=regime)


@dataclass(frozen=True, eq=False)
class RoundPlan:
    """Per-(client, round) sample counts, step sizes, noise levels and heterogeneity.

    ``n``, ``alpha`` and ``sigma`` have shape ``(m, T)``; ``gamma`` has shape
    ``(m, T, p)``.
    """

    n: np.ndarray
    alpha: np.ndarray
    sigma: np.ndarray
    gamma: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "n", _frozen(self.n, dtype=np.int64))
        object.__setattr__(self, "alpha", _frozen(self.alpha))
        object.__setattr__(self, "sigma", _frozen(self.sigma))
        object.__setattr__(self, "gamma", _frozen(self.gamma))

    @property
    def m(self) -> int:
        return self.n.shape[0]

    @property
    def T(self) -> int:
        return self.n.shape[1]

    @property
    def simple_case(self) -> bool:
        """Balanced, constant-rate, zero-sum heterogeneity with constant mean-square norm."""
        if self.n.size == 0:
            return True
        const = all(np.all(a == a.flat[0]) for a in (self.n, self.alpha, self.sigma))
        if not const:
            return False
        if not np.all(np.linalg.norm(self.gamma.sum(axis=0), axis=-1) <= ZERO_SUM_TOL * max(1, self.m)):
            return False
        msq = np.mean(np.sum(self.gamma**2, axis=-1), axis=0)
        return bool(np.allclose(msq, msq[0], rtol=1e-12, atol=1e-14))

    @property
    def gamma_bar_sq(self) -> float:
        """Mean-square heterogeneity norm (round 1); meaningful in the simple case."""
        return float(np.mean(np.sum(self.gamma[:, 0, :] ** 2, axis=-1)))


# ---------------------------------------------------------------------------
# heterogeneity


@dataclass(frozen=True)
class HeterogeneitySchedule:
    """``zero``, ``stationary`` (fixed per client) or ``nonstationary`` (redrawn each round)."""

    kind: str = "zero"
    norm: float = 0.0

    def __post_init__(self):
        if self.kind not in ("zero", "stationary", "nonstationary"):
            raise InvalidConfig(f"unknown heterogeneity kind {self.kind!r}")
        if self.norm < 0:
            raise InvalidConfig("heterogeneity norm must be nonnegative")


def symmetric_directions(m: int, p: int, norm: float, rng: np.random.Generator) -> np.ndarray:
    """``m`` vectors in R^p with common norm ``norm`` summing to zero.

    Gaussian draws are alternately centred and rescaled.  A draw that has not
    met both tolerances after ``MAX_PROJECTION_ITERS`` sweeps is discarded and
    redrawn from the same generator, up to ``MAX_RESTARTS`` times.
    """
    if norm == 0:
        return np.zeros((m, p))
    if m == 1:
        raise ImpossibleSchedule("a single client cannot have nonzero zero-sum heterogeneity")
    for _ in range(MAX_RESTARTS):
        g = rng.standard_normal((m, p))
        for _ in range(MAX_PROJECTION_ITERS):
            g = g - g.mean(axis=0)
            lengths = np.linalg.norm(g, axis=1, keepdims=True)
            if np.any(lengths == 0):
                break
            g = g * (norm / lengths)
            if (np.linalg.norm(g.sum(axis=0)) <= ZERO_SUM_TOL
                    and np.all(np.abs(np.linalg.norm(g, axis=1) - norm) <= NORM_TOL)):
                return g
    raise ImpossibleSchedule(
        f"could not build {m} zero-sum vectors of norm {norm} in R^{p} "
        f"({MAX_RESTARTS} draws x {MAX_PROJECTION_ITERS} projection sweeps)")


def make_heterogeneity(m: int, p: int, T: int, schedule: HeterogeneitySchedule, seed: int) -> np.ndarray:
    """Heterogeneity field of shape ``(m, T, p)``."""
    if schedule.kind == "zero" or schedule.norm == 0:
        return np.zeros((m, T, p))
    if m == 1:
        raise ImpossibleSchedule("a single client cannot have nonzero zero-sum heterogeneity")
    if schedule.kind == "stationary":
        g = symmetric_directions(m, p, schedule.norm, aux_rng(seed, _TAG_GAMMA))
        return np.repeat(g[:, None, :], T, axis=1)
    out = np.empty((m, T, p))
    for t in range(T):
        out[:, t, :] = symmetric_directions(m, p, schedule.norm, aux_rng(seed, _TAG_GAMMA, t + 1))
    return out


# ---------------------------------------------------------------------------
# validation


def validate_spec(spec: SystemSpec, plan: RoundPlan, for_theory: bool = False) -> list[str]:
    """List of violated invariants; an empty list means the pair is usable.

    With ``for_theory`` the K=inf regime additionally requires every round to
    sit strictly inside the over-parameterized (p > max n + 1) or
    under-parameterized (p < min n - 1) band.
    """
    v: list[str] = []
    if spec.m < 1:
        v.append("m ≥ 1")
    if spec.p < 1:
        v.append("p ≥ 1")
    if spec.s < 1:
        v.append("s ≥ 1")
    if spec.s > spec.p:
        v.append("s ≤ p")
    if spec.T < 0:
        v.append("T ≥ 0")
    if spec.w_star.shape != (spec.p,) or spec.w0.shape != (spec.p,):
        v.append("w_star and w0 have length p")
    elif spec.s <= spec.p and np.any(spec.w_star[spec.s:] != 0):
        v.append("w_star entries beyond s are zero")
    if plan.n.shape != (spec.m, spec.T):
        v.append("n has shape (m, T)")
    if plan.alpha.shape != (spec.m, spec.T) or plan.sigma.shape != (spec.m, spec.T):
        v.append("alpha and sigma have shape (m, T)")
    if plan.gamma.shape != (spec.m, spec.T, spec.p):
        v.append("gamma has shape (m, T, p)")
    if v:
        return v
    if plan.n.size:
        if np.any(plan.n < 1):
            v.append("n ≥ 1")
        if np.any(plan.alpha <= 0):
            v.append("alpha > 0")
        if np.any(plan.sigma < 0):
            v.append("sigma ≥ 0")
    reg = spec.regime
    if reg.kind == "kfinite":
        if reg.K is None or reg.K < 1:
            v.append("K ≥ 1")
        elif plan.n.size and reg.K > plan.n.min():
            v.append("K ≤ min n")
    if reg.kind == "kinf" and plan.n.size:
        if np.any(plan.n == spec.p):
            v.append("p ≠ n (boundary p = n rejected)")
        elif np.any(plan.n > spec.p) and np.any(plan.n < spec.p):
            v.append("all clients on the same side of p (mixed OP/UP)")
        if for_theory and not (spec.p > plan.n.max() + 1 or spec.p < plan.n.min() - 1):
            v.append("RegimeGap: OP requires p > max n + 1, UP requires p < min n - 1")
    return v


# ---------------------------------------------------------------------------
# JSON-facing configuration

CONFIG_KEYS = ("m", "p", "s", "T", "regime", "K", "n", "alpha", "sigma", "het_kind",
               "het_norm", "delta0_norm", "w_star_norm", "base_seed", "trials")


@dataclass
class ExperimentConfig:
    """Flat experiment description matching the JSON config schema.

    ``n``, ``alpha`` and ``sigma`` accept a scalar, a per-client list of
    length ``m`` or an ``m x T`` nested list.  ``alpha`` has no default: the
    step size must always be chosen explicitly.
    """

    m: int = 3
    p: int = 200
    s: int = 5
    T: int = 10
    regime: str = "k1"
    K: int | None = None
    n: Any = 50
    alpha: Any = None
    sigma: Any = 0.0
    het_kind: str = "zero"
    het_norm: float = 0.0
    delta0_norm: float = 0.0
    w_star_norm: float = 1.0
    base_seed: int = 0
    trials: int = 20
    extra: dict = field(default_factory=dict, repr=False)

    @classmethod
    def from_dict(cls, data: dict) -> ExperimentConfig:
        unknown = set(data) - set(CONFIG_KEYS)
        if unknown:
            raise InvalidConfig(f"unknown config keys: {sorted(unknown)}")
        return cls(**{k: data[k] for k in CONFIG_KEYS if k in data})

    def to_dict(self) -> dict:
        d = {k: getattr(self, k) for k in CONFIG_KEYS}
        for k in ("n", "alpha", "sigma"):
            if isinstance(d[k], np.ndarray):
                d[k] = d[k].tolist()
        return d

    def fingerprint(self) -> str:
        return config_fingerprint(self.to_dict())

    def replace(self, **changes) -> ExperimentConfig:
        return dataclasses.replace(self, **changes)

    def regime_obj(self) -> Regime:
        if self.regime == "kfinite":
            if self.K is None:
                raise InvalidConfig("regime kfinite needs K")
            return Regime.kfinite(self.K)
        return Regime(self.regime)

    def _field(self, name: str, value, dtype) -> np.ndarray:
        if value is None:
            raise InvalidConfig(f"config field {name!r} is required")
        a = np.asarray(value, dtype=dtype)
        if a.ndim == 1 and a.shape[0] == self.m:
            a = a[:, None]
        try:
            return np.broadcast_to(a, (self.m, self.T)).copy()
        except ValueError as exc:
            raise InvalidConfig(f"{name} cannot broadcast to (m, T) = ({self.m}, {self.T})") from exc

    def materialize(self) -> tuple[SystemSpec, RoundPlan]:
        """Build the spec/plan pair.  Randomness is drawn from ``base_seed`` streams only."""
        for name in ("m", "p", "s", "T"):
            if not isinstance(getattr(self, name), (int, np.integer)) or isinstance(getattr(self, name), bool):
                raise InvalidConfig(f"{name} must be an integer")
        if self.m < 1 or self.p < 1 or self.s < 1 or self.T < 0:
            raise InvalidConfig("m, p, s must be positive and T nonnegative")
        if self.s > self.p:
            raise InvalidConfig("violation: s ≤ p")
        if self.delta0_norm < 0 or self.w_star_norm < 0:
            raise InvalidConfig("norms must be nonnegative")
        n = self._field("n", self.n, float)
        if np.any(n != np.round(n)):
            raise InvalidConfig("n must be integer-valued")
        alpha = self._field("alpha", self.alpha, float)
        sigma = self._field("sigma", self.sigma, float)
        w_star = np.zeros(self.p)
        head = aux_rng(self.base_seed, _TAG_W_STAR).standard_normal(self.s)
        w_star[: self.s] = self.w_star_norm * head / np.linalg.norm(head)
        u = aux_rng(self.base_seed, _TAG_W0).standard_normal(self.p)
        w0 = w_star + self.delta0_norm * u / np.linalg.norm(u)
        gamma = make_heterogeneity(self.m, self.p, self.T,
                                   HeterogeneitySchedule(self.het_kind, float(self.het_norm)),
                                   self.base_seed)
        spec = SystemSpec(self.m, self.p, self.s, self.T, self.regime_obj(), w_star, w0,
                          int(self.base_seed))
        plan = RoundPlan(n.astype(np.int64), alpha, sigma, gamma)
        return spec, plan


def config_fingerprint(d: dict) -> str:
    """sha256 over canonical JSON (sorted keys), independent of key order."""
    blob = json.dumps(d, sort_keys=True, separators=(",", ":"), default=_json_default)
    return hashlib.sha256(blob.encode()).hexdigest()


def _json_default(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, np.generic):
        return o.item()
    raise TypeError(f"not JSON serializable: {type(o).__name__}")


def problem_fingerprint(spec: SystemSpec, plan: RoundPlan) -> str:
    h = hashlib.sha256()
    h.update(repr((spec.m, spec.p, spec.s, spec.T, str(spec.regime), spec.base_seed)).encode())
    for a in (spec.w_star, spec.w0, plan.n, plan.alpha, plan.sigma, plan.gamma):
        h.update(np.ascontiguousarray(a).tobytes())
    return h.hexdigest()
