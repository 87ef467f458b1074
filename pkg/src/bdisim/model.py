"""Model specification for branching diffusions with immigration.

A model bundles the single-particle dynamics (drift, volatility), the
position-dependent killing and offspring mechanism, the offspring scatter
kernel, and the immigration stream.  All coefficient functions are
vectorized over a leading particle axis: positions are arrays of shape
``(..., d)``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np


class ModelValidationError(ValueError):
    """Raised when a model specification is structurally malformed."""


@dataclass(frozen=True)
class ModelSpec:
    """Full model of a branching diffusion with immigration.

    ``drift`` maps ``(..., d) -> (..., d)``, ``volatility`` maps
    ``(..., d) -> (..., d, d)``, ``kill_rate`` maps ``(..., d) -> (...)``.
    ``offspring(y)`` returns the probability vector ``(p_0, ..., p_K)`` for a
    single point ``y`` of shape ``(d,)``; the support bound ``K`` is declared
    via ``offspring_max``.  ``scatter(y, k, rng)`` returns the ``(k, d)``
    offspring offsets relative to the death position.  Declared sup-norm
    bounds are trusted and only spot-checked by :func:`validate_spec`.
    """

    dim: int
    drift: Callable[[np.ndarray], np.ndarray]
    volatility: Callable[[np.ndarray], np.ndarray]
    kill_rate: Callable[[np.ndarray], np.ndarray]
    kill_rate_bound: float
    offspring: Callable[[np.ndarray], np.ndarray]
    offspring_max: int
    rho_bound: float
    scatter: Callable[[np.ndarray, int, np.random.Generator], np.ndarray]
    immigration_rate: float
    immigration_law: Callable[[np.random.Generator], np.ndarray]
    fallback_law: Callable[[np.random.Generator], np.ndarray]
    lipschitz_hint: float = 1.0
    name: str = "custom"
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.dim < 1:
            raise ModelValidationError("dim must be a positive integer")
        if self.kill_rate_bound <= 0:
            raise ModelValidationError("kill_rate_bound must be positive")
        if self.rho_bound < 0:
            raise ModelValidationError("rho_bound must be nonnegative")
        if self.immigration_rate < 0:
            raise ModelValidationError("immigration_rate must be nonnegative")
        if self.offspring_max < 0:
            raise ModelValidationError("offspring_max must be nonnegative")

    def sigma_squared(self, y) -> np.ndarray:
        """Diffusion coefficient a = sigma sigma^T at y (matrix-valued)."""
        s = self.volatility(np.asarray(y, dtype=float))
        return np.einsum("...ij,...kj->...ik", s, s)


def rho(spec: ModelSpec, y) -> float:
    """Mean offspring number at y, exact over the declared finite support."""
    p = np.asarray(spec.offspring(np.asarray(y, dtype=float)), dtype=float)
    return float(np.dot(np.arange(p.size), p))


def moment_mq(spec: ModelSpec, y, q: int) -> float:
    """q-th offspring moment sum_k k^q p_k(y)."""
    if q < 1:
        raise ValueError("q must be >= 1")
    p = np.asarray(spec.offspring(np.asarray(y, dtype=float)), dtype=float)
    return float(np.dot(np.arange(p.size, dtype=float) ** q, p))


@dataclass
class ValidationReport:
    """Outcome of spot-checking a model at sampled points."""

    samples: int
    violations: list
    min_subcriticality: float

    @property
    def ok(self) -> bool:
        return not self.violations


def validate_spec(spec: ModelSpec, sample_budget: int, rng) -> ValidationReport:
    """Spot-check declared bounds and probability normalization.

    Points are drawn from the immigration law (plus small perturbations so
    point-mass laws still probe a neighbourhood).  Structural defects
    (probabilities outside [0, 1]) raise; bound violations are reported.
    The report also carries the sampled minimum of kappa*(1-rho), a cheap
    subcriticality heuristic.
    """
    if sample_budget < 1:
        raise ValueError("sample_budget must be >= 1")
    violations = []
    min_sub = np.inf
    for i in range(sample_budget):
        y = np.asarray(spec.immigration_law(rng), dtype=float)
        if i % 2 == 1:
            y = y + rng.normal(scale=0.5, size=y.shape)
        p = np.asarray(spec.offspring(y), dtype=float)
        if p.min() < -1e-12 or p.max() > 1 + 1e-12:
            raise ModelValidationError(
                f"offspring probabilities outside [0,1] at y={y!r}: {p!r}"
            )
        if abs(p.sum() - 1.0) > 1e-12:
            violations.append(("offspring_normalization", y.copy(), float(p.sum())))
        k = float(np.atleast_1d(spec.kill_rate(y))[0])
        if not (0.0 < k <= spec.kill_rate_bound * (1 + 1e-12)):
            violations.append(("kill_rate_bound", y.copy(), k))
        r = float(np.dot(np.arange(p.size), p))
        if r > spec.rho_bound * (1 + 1e-12):
            violations.append(("rho_bound", y.copy(), r))
        min_sub = min(min_sub, k * (1.0 - r))
    return ValidationReport(
        samples=sample_budget, violations=violations, min_subcriticality=float(min_sub)
    )


# ---------------------------------------------------------------------------
# built-in coefficient and kernel factories


def _const_drift(d, value=0.0):
    v = np.full(d, float(value))

    def drift(x):
        x = np.asarray(x, dtype=float)
        return np.broadcast_to(v, x.shape).copy() if value else np.zeros_like(x)

    return drift


def _tanh_drift(d, scale=1.0):
    def drift(x):
        return -scale * np.tanh(np.asarray(x, dtype=float))

    return drift


def _const_vol(d, value=1.0):
    eye = float(value) * np.eye(d)

    def volatility(x):
        x = np.asarray(x, dtype=float)
        return np.broadcast_to(eye, x.shape[:-1] + (d, d)).copy()

    return volatility


def _sin_vol_1d(base=1.0, amp=0.25):
    # sigma^2(x) = base + amp*sin(x), d=1 only
    def volatility(x):
        x = np.asarray(x, dtype=float)
        s = np.sqrt(base + amp * np.sin(x[..., 0]))
        return s[..., None, None]

    return volatility


def _const_kill(value=1.0):
    def kill_rate(x):
        x = np.asarray(x, dtype=float)
        return np.full(x.shape[:-1], float(value))

    return kill_rate


def _const_offspring(probs):
    p = np.asarray(probs, dtype=float)

    def offspring(y):
        return p

    return offspring


def local_scatter(y, k, rng):
    """All offspring born exactly at the parent position."""
    return np.zeros((k, np.size(y)))


def gaussian_scatter(scale):
    """Offspring offsets i.i.d. centered normal with the given scale."""

    def scatter(y, k, rng):
        return rng.normal(scale=scale, size=(k, np.size(y)))

    return scatter


def point_law(point):
    v = np.atleast_1d(np.asarray(point, dtype=float))

    def law(rng):
        return v.copy()

    return law


def normal_law(mean, sd, d=1):
    m = np.full(d, float(mean))

    def law(rng):
        return m + rng.normal(scale=sd, size=d)

    return law


# ---------------------------------------------------------------------------
# presets


def _preset_pure_death_static(c=2.0, kappa=1.0, **_):
    return dict(
        dim=1,
        drift=_const_drift(1),
        volatility=_const_vol(1, 0.0),
        kill_rate=_const_kill(kappa),
        kill_rate_bound=kappa,
        offspring=_const_offspring([1.0]),
        offspring_max=0,
        rho_bound=0.0,
        scatter=local_scatter,
        immigration_rate=c,
        immigration_law=point_law(0.0),
        fallback_law=point_law(0.0),
        lipschitz_hint=0.0,
    )


def _preset_pure_death_bm(c=1.0, kappa=1.0, sigma=1.0, **_):
    return dict(
        dim=1,
        drift=_const_drift(1),
        volatility=_const_vol(1, sigma),
        kill_rate=_const_kill(kappa),
        kill_rate_bound=kappa,
        offspring=_const_offspring([1.0]),
        offspring_max=0,
        rho_bound=0.0,
        scatter=local_scatter,
        immigration_rate=c,
        immigration_law=point_law(0.0),
        fallback_law=point_law(0.0),
        lipschitz_hint=0.0,
    )


def _preset_binary_local(c=1.0, kappa=1.0, p0=0.75, p2=0.25, sigma=0.0, **_):
    probs = [p0, 0.0, p2]
    r = 2 * p2
    return dict(
        dim=1,
        drift=_const_drift(1),
        volatility=_const_vol(1, sigma),
        kill_rate=_const_kill(kappa),
        kill_rate_bound=kappa,
        offspring=_const_offspring(probs),
        offspring_max=2,
        rho_bound=r,
        scatter=local_scatter,
        immigration_rate=c,
        immigration_law=point_law(0.0),
        fallback_law=point_law(0.0),
        lipschitz_hint=0.0,
    )


def _preset_binary_spread(
    c=2.0,
    kappa=1.0,
    p0=0.75,
    p2=0.25,
    sigma=1.0,
    scatter_scale=1.0,
    immigration_sd=2.0,
    **_,
):
    probs = [p0, 0.0, p2]
    return dict(
        dim=1,
        drift=_const_drift(1),
        volatility=_const_vol(1, sigma),
        kill_rate=_const_kill(kappa),
        kill_rate_bound=kappa,
        offspring=_const_offspring(probs),
        offspring_max=2,
        rho_bound=2 * p2,
        scatter=gaussian_scatter(scatter_scale),
        immigration_rate=c,
        immigration_law=normal_law(0.0, immigration_sd),
        fallback_law=normal_law(0.0, immigration_sd),
        lipschitz_hint=0.0,
    )


def _preset_relocate(
    c=0.3,
    kappa=1.0,
    p0=0.8,
    p1=0.2,
    sigma=0.3,
    scatter_scale=0.2,
    immigration_sd=2.0,
    **_,
):
    probs = [p0, p1]
    return dict(
        dim=1,
        drift=_const_drift(1),
        volatility=_const_vol(1, sigma),
        kill_rate=_const_kill(kappa),
        kill_rate_bound=kappa,
        offspring=_const_offspring(probs),
        offspring_max=1,
        rho_bound=p1,
        scatter=gaussian_scatter(scatter_scale),
        immigration_rate=c,
        immigration_law=normal_law(0.0, immigration_sd),
        fallback_law=normal_law(0.0, immigration_sd),
        lipschitz_hint=0.0,
    )


def _preset_sin_vol(
    c=1.0,
    kappa=1.0,
    p0=0.9,
    p2=0.1,
    drift_scale=1.0,
    vol_base=1.0,
    vol_amp=0.25,
    scatter_scale=1.0,
    immigration_sd=1.0,
    **_,
):
    probs = [p0, 0.0, p2]
    return dict(
        dim=1,
        drift=_tanh_drift(1, drift_scale),
        volatility=_sin_vol_1d(vol_base, vol_amp),
        kill_rate=_const_kill(kappa),
        kill_rate_bound=kappa,
        offspring=_const_offspring(probs),
        offspring_max=2,
        rho_bound=2 * p2,
        scatter=gaussian_scatter(scatter_scale),
        immigration_rate=c,
        immigration_law=normal_law(0.0, immigration_sd),
        fallback_law=normal_law(0.0, immigration_sd),
        lipschitz_hint=max(drift_scale, 1.0),
    )


PRESETS = {
    "pure-death-static": _preset_pure_death_static,
    "pure-death-bm": _preset_pure_death_bm,
    "binary-local": _preset_binary_local,
    "binary-spread": _preset_binary_spread,
    "relocate": _preset_relocate,
    "sin-vol": _preset_sin_vol,
}


def make_preset(name: str, **overrides) -> ModelSpec:
    """Build one of the named model presets, with numeric overrides."""
    try:
        builder = PRESETS[name]
    except KeyError:
        raise KeyError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
    kwargs = builder(**overrides)
    return ModelSpec(name=name, params=dict(overrides), **kwargs)


def spec_from_config(cfg: dict) -> ModelSpec:
    """Build a model from a config tree: {'preset': name, <numeric overrides>}."""
    cfg = dict(cfg)
    name = cfg.pop("preset")
    return make_preset(name, **cfg)
