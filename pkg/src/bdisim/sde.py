"""Single-particle numerics.

Euler-Maruyama integration of the driving diffusion, killed motion via
Poisson thinning against the declared rate bound, the auxiliary jump
diffusion whose jumps follow the size-biased offspring relocation law,
and Feynman-Kac weighting used by the many-to-one cross-checks.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from bdisim.model import ModelSpec, rho


class NumericalFailure(RuntimeError):
    """Non-finite state encountered during integration."""

    def __init__(self, step_index: int, message: str = ""):
        self.step_index = step_index
        super().__init__(message or f"non-finite position at step {step_index}")


@dataclass
class PathSample:
    """Discretized single-particle path.

    ``jumps`` is populated only by the auxiliary jump diffusion sampler and
    records (time, displacement) per relocation.
    """

    times: np.ndarray
    positions: np.ndarray
    step: float
    jumps: list = field(default_factory=list)


@dataclass
class KilledOutcome:
    status: str  # "survived" | "killed"
    terminal_time: float
    terminal_position: np.ndarray


def _check_finite(x: np.ndarray, step_index: int):
    if not np.all(np.isfinite(x)):
        raise NumericalFailure(step_index)


def em_step(spec: ModelSpec, x: np.ndarray, h: float, rng) -> np.ndarray:
    """One Euler-Maruyama step of length h for positions of shape (..., d)."""
    if h <= 0.0:
        return x
    dw = rng.normal(scale=np.sqrt(h), size=x.shape)
    s = spec.volatility(x)
    return x + spec.drift(x) * h + np.einsum("...ij,...j->...i", s, dw)


def _grid(horizon: float, dt: float) -> np.ndarray:
    n_full = int(np.floor(horizon / dt + 1e-12))
    t = dt * np.arange(n_full + 1)
    if t[-1] < horizon - 1e-12 * max(1.0, horizon):
        t = np.append(t, horizon)
    else:
        t[-1] = horizon
    return t


def integrate_diffusion(spec: ModelSpec, y0, horizon: float, dt: float, rng) -> PathSample:
    """Euler-Maruyama path on the dt-grid over [0, horizon].

    The last step may be shorter than dt so the path always ends exactly at
    the horizon.  Deterministic given the rng state.
    """
    if dt <= 0 or dt > horizon:
        raise ValueError("require 0 < dt <= horizon")
    times = _grid(horizon, dt)
    x = np.atleast_1d(np.asarray(y0, dtype=float)).copy()
    out = np.empty((times.size, x.size))
    out[0] = x
    for i in range(1, times.size):
        x = em_step(spec, x, times[i] - times[i - 1], rng)
        _check_finite(x, i)
        out[i] = x
    return PathSample(times=times, positions=out, step=dt)


class _ThinnedWalk:
    """Shared driver: diffuse on the dt-grid, propose exponential arrivals
    from a dominating constant rate, and hand accepted/rejected proposals to
    the caller.  Proposals are redrawn after every decision, which is exact
    for thinning because of memorylessness."""

    def __init__(self, spec, y0, horizon, dt, rng, bound):
        if dt <= 0:
            raise ValueError("dt must be positive")
        self.spec = spec
        self.rng = rng
        self.horizon = float(horizon)
        self.dt = float(dt)
        self.bound = float(bound)
        self.t = 0.0
        self.x = np.atleast_1d(np.asarray(y0, dtype=float)).copy()
        self.times = [0.0]
        self.positions = [self.x.copy()]
        self.kgrid = 1
        self.step_index = 0
        self._draw_proposal()

    def _draw_proposal(self):
        if self.bound > 0.0:
            self.t_prop = self.t + self.rng.exponential(1.0 / self.bound)
        else:
            self.t_prop = np.inf

    def _advance_to(self, t_next, record):
        h = t_next - self.t
        if h > 0:
            self.x = em_step(self.spec, self.x, h, self.rng)
            self.step_index += 1
            _check_finite(self.x, self.step_index)
        self.t = t_next
        if record:
            self.times.append(self.t)
            self.positions.append(self.x.copy())

    def run(self, on_proposal):
        """on_proposal(x, t) returns True to stop the walk at the proposal."""
        while True:
            t_grid = self.kgrid * self.dt
            t_next = min(t_grid, self.t_prop, self.horizon)
            if t_next == self.t_prop and self.t_prop <= self.horizon:
                self._advance_to(t_next, record=False)
                if on_proposal(self.x, self.t):
                    return True
                self._draw_proposal()
            elif t_next >= self.horizon:
                self._advance_to(self.horizon, record=self.times[-1] < self.horizon)
                return False
            else:
                self._advance_to(t_grid, record=True)
                self.kgrid += 1

    def path(self):
        return PathSample(
            times=np.asarray(self.times),
            positions=np.asarray(self.positions),
            step=self.dt,
        )


def sample_killed_motion(spec: ModelSpec, y0, horizon: float, dt: float, rng):
    """Diffusion killed at rate kappa, exact via thinning.

    Proposals arrive at rate kill_rate_bound; a proposal at position x is
    accepted (kills) with probability kappa(x)/kill_rate_bound.
    """
    walk = _ThinnedWalk(spec, y0, horizon, dt, rng, spec.kill_rate_bound)

    def on_proposal(x, t):
        k = float(np.atleast_1d(spec.kill_rate(x))[0])
        return walk.rng.random() < k / spec.kill_rate_bound

    killed = walk.run(on_proposal)
    if killed:
        walk.times.append(walk.t)
        walk.positions.append(walk.x.copy())
        outcome = KilledOutcome("killed", walk.t, walk.x.copy())
    else:
        outcome = KilledOutcome("survived", walk.horizon, walk.x.copy())
    path = walk.path()
    # the appended kill point may duplicate a grid time; keep times increasing
    keep = np.concatenate([[True], np.diff(path.times) > 0])
    path.times = path.times[keep]
    path.positions = path.positions[keep]
    return path, outcome


def _aux_jump(spec: ModelSpec, x, rng):
    """Size-biased relocation jump of the auxiliary diffusion from x.

    Draws k proportional to k*p_k(x), scatters k offspring, picks a uniform
    child, and returns the displacement.  Returns None when rho(x) = 0.
    """
    p = np.asarray(spec.offspring(x), dtype=float)
    weights = np.arange(p.size) * p
    total = weights.sum()
    if total <= 0.0:
        return None
    k = int(rng.choice(p.size, p=weights / total))
    offsets = np.atleast_2d(np.asarray(spec.scatter(x, k, rng), dtype=float))
    j = int(rng.integers(k))
    return offsets[j]


def sample_aux_jump_diffusion(spec: ModelSpec, y0, horizon: float, dt: float, rng) -> PathSample:
    """Auxiliary jump diffusion: diffuses as the base motion and relocates
    at rate kappa(y)rho(y), thinned against kill_rate_bound*rho_bound."""
    bound = spec.kill_rate_bound * spec.rho_bound
    walk = _ThinnedWalk(spec, y0, horizon, dt, rng, bound)
    jumps = []

    def on_proposal(x, t):
        k = float(np.atleast_1d(spec.kill_rate(x))[0])
        r = rho(spec, x)
        if walk.rng.random() < k * r / bound:
            v = _aux_jump(spec, x, walk.rng)
            if v is not None:
                walk.x = x + v
                jumps.append((t, v.copy()))
                walk.times.append(t)
                walk.positions.append(walk.x.copy())
        return False

    walk.run(on_proposal)
    path = walk.path()
    # relocations share their time with the pre-jump point only implicitly
    # (we record the post-jump value); enforce strictly increasing times
    keep = np.concatenate([[True], np.diff(path.times) > 0])
    if not keep.all():
        # keep the later (post-jump) record at a duplicated time
        idx = np.where(~keep)[0]
        drop = idx - 1
        mask = np.ones(path.times.size, dtype=bool)
        mask[drop] = False
        path.times = path.times[mask]
        path.positions = path.positions[mask]
    path.jumps = jumps
    return path


def feynman_kac_survival(spec: ModelSpec, y0, t: float, dt: float, n_paths: int, rng):
    """Monte Carlo estimate of the many-to-one weight M_t(y0, 1).

    Simulates the auxiliary jump diffusion and accumulates the exponential
    weight exp(-integral of kappa(1-rho)) with trapezoidal quadrature along
    each recorded path.
    """
    if n_paths < 2:
        raise ValueError("n_paths must be >= 2")

    def potential(xs):
        k = np.atleast_1d(spec.kill_rate(xs))
        r = np.array([rho(spec, x) for x in np.atleast_2d(xs)])
        return k * (1.0 - r)

    vals = np.empty(n_paths)
    for i in range(n_paths):
        path = sample_aux_jump_diffusion(spec, y0, t, dt, rng)
        v = potential(path.positions)
        integral = np.trapezoid(v, path.times)
        vals[i] = np.exp(-integral)
    est = float(vals.mean())
    se = float(vals.std(ddof=1) / np.sqrt(n_paths))
    return est, se
