"""Branching diffusion with immigration: full particle-system simulation.

Between jumps every particle follows an independent Euler-Maruyama
diffusion.  Jump times are sampled exactly by thinning against the
dominating rate c + kill_rate_bound * (particle count); an accepted
proposal is immigration with probability c/(c+kbar), otherwise a particle
is killed proportionally to its kill rate and replaced by its offspring.
Lineage ids are tracked internally and stripped at observation time.

Stationary quantities are estimated regeneratively: the process restarts
from the void configuration, excursions between visits to the void are
i.i.d., and time averages are ratio estimators over complete cycles.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from bdisim.model import ModelSpec
from bdisim.sde import em_step, NumericalFailure


class ExplosionGuardError(RuntimeError):
    """Population event count exceeded the hard cap (likely supercritical)."""


@dataclass(frozen=True)
class Configuration:
    """Ordered particle positions, optionally with hidden lineage ids."""

    positions: np.ndarray  # (l, d)
    lineage_ids: Optional[tuple] = None

    def __post_init__(self):
        pos = np.atleast_2d(np.asarray(self.positions, dtype=float))
        if pos.size == 0:
            pos = pos.reshape(0, pos.shape[-1] if pos.ndim > 1 else 1)
        object.__setattr__(self, "positions", pos)
        if self.lineage_ids is not None:
            ids = tuple(self.lineage_ids)
            if len(ids) != len(pos):
                raise ValueError("lineage_ids length must match positions")
            if len(set(ids)) != len(ids):
                raise ValueError("lineage_ids must be unique")
            object.__setattr__(self, "lineage_ids", ids)

    @property
    def size(self) -> int:
        return self.positions.shape[0]

    @property
    def is_void(self) -> bool:
        return self.size == 0

    def canonical(self) -> "Configuration":
        """Sort particles lexicographically by coordinates (id order follows)."""
        if self.size <= 1:
            return self
        order = np.lexsort(self.positions.T[::-1])
        ids = None
        if self.lineage_ids is not None:
            ids = tuple(self.lineage_ids[i] for i in order)
        return Configuration(self.positions[order], ids)

    def strip(self) -> "Configuration":
        """Observer view: canonical order, no lineage information."""
        return Configuration(self.canonical().positions, None)


def void_configuration(dim: int) -> Configuration:
    return Configuration(np.empty((0, dim)), ())


def wellspread_positions(pos: np.ndarray, eps: float) -> bool:
    """True iff every particle pair differs by at least eps in every coordinate.

    Configurations with at most one particle are wellspread by convention.
    """
    n = pos.shape[0]
    if n <= 1:
        return True
    diff = np.abs(pos[:, None, :] - pos[None, :, :])
    iu = np.triu_indices(n, k=1)
    return bool(np.all(diff[iu].min(axis=-1) >= eps))


@dataclass
class EventLogEntry:
    time: float
    kind: str  # "death" | "branch" | "immigration"
    k: int = 0
    parent_id: Optional[int] = None
    immigrant_id: Optional[int] = None
    child_ids: tuple = ()
    child_offsets: Optional[np.ndarray] = None


@dataclass
class SegmentRecord:
    """Ground truth for one observation interval (iD, (i+1)D]."""

    interval_index: int
    had_event: bool
    start_config: Configuration  # canonical, with ids
    end_config: Configuration
    per_particle_increments: Optional[dict]  # id -> vector, only if no event

    def ci_flag(self, delta: float, lam: float) -> bool:
        """Nonvoid start, event-free, start 4*delta^lam-wellspread, and all
        true increments below delta^lam in every coordinate."""
        if self.had_event or self.start_config.size < 1:
            return False
        thr = delta ** lam
        if not wellspread_positions(self.start_config.positions, 4.0 * thr):
            return False
        for inc in self.per_particle_increments.values():
            if np.any(np.abs(inc) >= thr):
                return False
        return True


# ---------------------------------------------------------------------------
# core engine


class _Engine:
    """Thinning-based jump-diffusion driver shared by all entry points."""

    def __init__(self, spec: ModelSpec, positions, ids, rng, next_id=0,
                 event_cap=1_000_000):
        self.spec = spec
        self.rng = rng
        self.positions = np.atleast_2d(np.asarray(positions, dtype=float))
        if self.positions.size == 0:
            self.positions = self.positions.reshape(0, spec.dim)
        self.ids = list(ids)
        self.next_id = next_id
        self.event_cap = event_cap
        self.n_events = 0

    def _fresh_id(self):
        i = self.next_id
        self.next_id += 1
        return i

    def _apply_immigration(self, t):
        y = np.atleast_1d(np.asarray(self.spec.immigration_law(self.rng), dtype=float))
        new_id = self._fresh_id()
        self.positions = np.concatenate([self.positions, y[None, :]])
        self.ids.append(new_id)
        return EventLogEntry(time=t, kind="immigration", immigrant_id=new_id)

    def _apply_kill(self, t, j):
        x = self.positions[j].copy()
        parent = self.ids[j]
        p = np.asarray(self.spec.offspring(x), dtype=float)
        k = int(self.rng.choice(p.size, p=p / p.sum()))
        rest = np.delete(self.positions, j, axis=0)
        del self.ids[j]
        if k == 0:
            self.positions = rest
            return EventLogEntry(time=t, kind="death", parent_id=parent)
        offsets = np.atleast_2d(np.asarray(self.spec.scatter(x, k, self.rng), dtype=float))
        children = x[None, :] + offsets
        child_ids = tuple(self._fresh_id() for _ in range(k))
        self.positions = np.concatenate([rest, children])
        self.ids.extend(child_ids)
        return EventLogEntry(time=t, kind="branch", k=k, parent_id=parent,
                             child_ids=child_ids, child_offsets=offsets)

    def run(self, horizon, dt, seg_cb=None, grid_cb=None, event_cb=None,
            stop_at_void=False):
        """Advance for up to `horizon` time units.

        seg_cb(positions, duration) fires once per diffusion piece with the
        configuration at a uniformly drawn time inside the piece and the
        exact piece duration (an unbiased occupation sampler; particle-count
        functionals are exact at any dt);
        grid_cb(t, positions, ids) at every dt-gridpoint and at the horizon;
        event_cb(entry, positions, ids) after every applied jump.  Returns
        the elapsed time (< horizon only when stop_at_void triggers).
        """
        spec, rng = self.spec, self.rng
        c = spec.immigration_rate
        t = 0.0
        kgrid = 1

        def draw_bound():
            return c + spec.kill_rate_bound * len(self.ids)

        bound = draw_bound()
        t_prop = t + rng.exponential(1.0 / bound) if bound > 0 else np.inf

        while True:
            t_grid = kgrid * dt
            target = min(t_grid, horizon)
            is_prop = t_prop <= target
            t_next = t_prop if is_prop else target
            h = t_next - t
            if h > 0:
                if len(self.ids):
                    if seg_cb is not None:
                        # evaluate piece functionals at a uniform time inside
                        # the piece: unbiased for occupation integrals, and
                        # counts are constant within a piece anyway
                        u = rng.uniform(0.0, h)
                        self.positions = em_step(spec, self.positions, u, rng)
                        seg_cb(self.positions, h)
                        self.positions = em_step(spec, self.positions, h - u, rng)
                    else:
                        self.positions = em_step(spec, self.positions, h, rng)
                    if not np.all(np.isfinite(self.positions)):
                        raise NumericalFailure(self.n_events)
                elif seg_cb is not None:
                    seg_cb(self.positions, h)
            t = t_next
            if is_prop:
                kappas = (np.atleast_1d(spec.kill_rate(self.positions))
                          if len(self.ids) else np.empty(0))
                kbar = float(kappas.sum())
                if rng.random() < (c + kbar) / bound:
                    if c > 0 and rng.random() < c / (c + kbar):
                        entry = self._apply_immigration(t)
                    else:
                        j = int(rng.choice(kappas.size, p=kappas / kbar))
                        entry = self._apply_kill(t, j)
                    self.n_events += 1
                    if self.n_events > self.event_cap:
                        raise ExplosionGuardError(
                            f"event cap {self.event_cap} exceeded at t={t:.6g}")
                    if event_cb is not None:
                        event_cb(entry, self.positions, self.ids)
                    if stop_at_void and not self.ids:
                        return t
                bound = draw_bound()
                t_prop = t + rng.exponential(1.0 / bound) if bound > 0 else np.inf
            elif t_grid >= horizon:
                if grid_cb is not None:
                    grid_cb(horizon, self.positions, self.ids)
                return horizon
            else:
                if grid_cb is not None:
                    grid_cb(t, self.positions, self.ids)
                kgrid += 1


def _snapshot(positions, ids) -> Configuration:
    return Configuration(positions, tuple(ids))


def simulate(spec: ModelSpec, init: Configuration, horizon: float, dt: float,
             rng, event_cap: int = 1_000_000):
    """Simulate the BDI process from `init` over [0, horizon].

    Returns (trajectory, events): trajectory records (time, Configuration)
    at t=0, every dt-gridpoint, and every jump (post-jump state); events is
    the full log.  Deterministic given the rng state.
    """
    if horizon <= 0:
        raise ValueError("horizon must be positive")
    ids = init.lineage_ids if init.lineage_ids is not None else tuple(range(init.size))
    eng = _Engine(spec, init.positions, ids, rng,
                  next_id=(max(ids) + 1 if ids else 0), event_cap=event_cap)
    trajectory = [(0.0, _snapshot(eng.positions, eng.ids))]
    events = []

    def grid_cb(t, pos, pids):
        trajectory.append((t, _snapshot(pos, pids)))

    def event_cb(entry, pos, pids):
        events.append(entry)
        trajectory.append((entry.time, _snapshot(pos, pids)))

    eng.run(horizon, dt, grid_cb=grid_cb, event_cb=event_cb)
    return trajectory, events


def simulate_branching_only(spec: ModelSpec, ancestors: Configuration,
                            horizon: float, dt: float, rng,
                            event_cap: int = 1_000_000):
    """Branching diffusion without immigration (c forced to 0)."""
    spec0 = dataclasses.replace(spec, immigration_rate=0.0)
    trajectory, _ = simulate(spec0, ancestors, horizon, dt, rng, event_cap)
    return trajectory


# ---------------------------------------------------------------------------
# observation


def observe(trajectory, delta: float, events=None):
    """Extract discrete-time observations at step delta, plus ground truth.

    Observations are configurations at times i*delta with lineage ids
    removed and particle order canonicalized (lexicographic sort).  Truth
    records, one per interval, carry event flags and the true per-id
    increments on event-free intervals.  Pass the simulation's event log
    for exact flags; without it, events are detected through lineage id
    sets, which misses the (rare) case of a particle both created and
    destroyed inside a single interval.  delta must be an integer multiple
    of the recording grid: positions are never interpolated.
    """
    if delta <= 0:
        raise ValueError("delta must be positive")
    t_end = trajectory[-1][0]
    n_obs = int(np.floor(t_end / delta + 1e-9)) + 1
    tol = 1e-9 * max(1.0, t_end)
    snaps = []
    j = 0
    for i in range(n_obs):
        ti = i * delta
        # advance to the last record at time ti (post-jump state wins)
        while j + 1 < len(trajectory) and trajectory[j + 1][0] <= ti + tol:
            j += 1
        if abs(trajectory[j][0] - ti) > tol:
            raise ValueError(
                f"no trajectory record at t={ti}; delta must be an integer "
                "multiple of the recording step dt")
        snaps.append(trajectory[j][1].canonical())
    observations = [s.strip() for s in snaps]
    truth = [_segment_from_snaps(i, snaps[i], snaps[i + 1])
             for i in range(n_obs - 1)]
    if events is not None:
        ev_times = np.asarray([e.time for e in events])
        for seg in truth:
            lo, hi = seg.interval_index * delta, (seg.interval_index + 1) * delta
            n_ev = int(np.searchsorted(ev_times, hi + tol)
                       - np.searchsorted(ev_times, lo + tol))
            if n_ev > 0 and not seg.had_event:
                seg.had_event = True
                seg.per_particle_increments = None
    return observations, truth


def _segment_from_snaps(index, start, end) -> SegmentRecord:
    same = (start.lineage_ids is not None
            and set(start.lineage_ids) == set(end.lineage_ids))
    incs = None
    if same:
        pos_by_id = dict(zip(end.lineage_ids, end.positions))
        incs = {pid: pos_by_id[pid] - x
                for pid, x in zip(start.lineage_ids, start.positions)}
    return SegmentRecord(interval_index=index, had_event=not same,
                         start_config=start, end_config=end,
                         per_particle_increments=incs)


def observe_stream(spec: ModelSpec, init: Configuration, n_pairs: int,
                   delta: float, dt: float, rng, next_id: Optional[int] = None,
                   event_cap: int = 10_000_000):
    """Memory-bounded observation stream: simulate and observe in one pass.

    Produces n_pairs consecutive (observation, truth) pairs at step delta
    without retaining the full trajectory.  delta must be an integer
    multiple of dt.  Returns (observations, truth, final_config, next_id)
    so streams can be continued.
    """
    m = int(round(delta / dt))
    if abs(m * dt - delta) > 1e-9 * delta or m < 1:
        raise ValueError("delta must be an integer multiple of dt")
    if init.lineage_ids is not None:
        ids = init.lineage_ids
    else:
        ids = tuple(range(init.size))
    if next_id is None:
        next_id = max(ids) + 1 if ids else 0
    eng = _Engine(spec, init.positions, ids, rng, next_id=next_id,
                  event_cap=event_cap)
    snaps = [_snapshot(eng.positions, eng.ids).canonical()]
    state = {"grid_count": 0, "events_in_interval": 0}
    truth = []

    def grid_cb(t, pos, pids):
        state["grid_count"] += 1
        if state["grid_count"] % m == 0:
            snap = _snapshot(pos, pids).canonical()
            prev = snaps[-1]
            if state["events_in_interval"] == 0:
                seg = _segment_from_snaps(len(truth), prev, snap)
            else:
                seg = SegmentRecord(interval_index=len(truth), had_event=True,
                                    start_config=prev, end_config=snap,
                                    per_particle_increments=None)
            truth.append(seg)
            snaps.append(snap)
            state["events_in_interval"] = 0

    def event_cb(entry, pos, pids):
        state["events_in_interval"] += 1

    eng.run(n_pairs * delta, dt, grid_cb=grid_cb, event_cb=event_cb)
    observations = [s.strip() for s in snaps]
    final = _snapshot(eng.positions, eng.ids)
    return observations, truth, final, eng.next_id


# ---------------------------------------------------------------------------
# regenerative (excursion) sampling


class OccupationCollector:
    """Time-weighted position histogram over fixed bin edges (per axis)."""

    def __init__(self, edges: np.ndarray):
        self.edges = np.asarray(edges, dtype=float)
        if self.edges.ndim != 1 or self.edges.size < 2:
            raise ValueError("edges must be a 1d array with >= 2 entries")
        self.weights = np.zeros(self.edges.size - 1)

    def add(self, positions: np.ndarray, duration: float):
        if positions.shape[0] == 0:
            return
        idx = np.searchsorted(self.edges, positions[:, 0], side="right") - 1
        ok = (idx >= 0) & (idx < self.weights.size)
        np.add.at(self.weights, idx[ok], duration)

    def density(self, total_time: float) -> np.ndarray:
        vol = np.diff(self.edges)
        return self.weights / (total_time * vol)


@dataclass
class ExcursionStats:
    """Accumulated excursion integrals and per-cycle breakdowns."""

    cycle_count: int
    total_time: float
    time_at_void: float
    integrals: dict
    per_cycle: dict          # name -> (cycle_count,) array
    per_cycle_time: np.ndarray
    per_cycle_void: np.ndarray
    abandoned: int = 0
    collectors: list = field(default_factory=list)

    def ratio(self, name: str) -> float:
        return self.integrals[name] / self.total_time

    def void_fraction(self) -> float:
        return self.time_at_void / self.total_time

    def bootstrap_se(self, name: str, n_boot: int = 400, seed: int = 0) -> float:
        """Cycle-bootstrap standard error of the ratio estimator."""
        vals = self.per_cycle["__void__"] if name == "__void__" else self.per_cycle[name]
        rng = np.random.default_rng(seed)
        n = self.cycle_count
        idx = rng.integers(n, size=(n_boot, n))
        num = vals[idx].sum(axis=1)
        den = self.per_cycle_time[idx].sum(axis=1)
        return float(np.std(num / den, ddof=1))


def run_regenerative(spec: ModelSpec, n_cycles: int, dt: float, functionals,
                     rng, cycle_time_cap: float = 1e4,
                     min_total_time: float = 0.0, collectors=(),
                     event_cap: int = 1_000_000) -> ExcursionStats:
    """Estimate stationary averages over i.i.d. excursions from the void.

    Each cycle starts at the void configuration and ends at the first
    return to it; accumulated integrals over total time are consistent
    ratio estimators of the invariant averages.  `functionals` maps names
    to callables (positions -> float), evaluated with exact inter-jump
    durations (exact for particle-count functionals at any dt).  Cycles
    exceeding cycle_time_cap are abandoned and counted, not accumulated.
    If min_total_time > 0, extra cycles run until that much time is
    accumulated.
    """
    if n_cycles < 1:
        raise ValueError("n_cycles must be >= 1")
    names = list(functionals)
    per_cycle = {name: [] for name in names}
    per_cycle["__void__"] = []
    cycle_times = []
    void_times = []
    abandoned = 0
    total_time = 0.0
    cycles_done = 0
    while cycles_done < n_cycles or total_time < min_total_time:
        buffer = []
        eng = _Engine(spec, np.empty((0, spec.dim)), (), rng, event_cap=event_cap)
        elapsed = eng.run(cycle_time_cap, dt,
                          seg_cb=lambda pos, h: buffer.append((pos, h)),
                          stop_at_void=True)
        if elapsed >= cycle_time_cap and eng.ids:
            abandoned += 1
            continue
        acc = dict.fromkeys(names, 0.0)
        void = 0.0
        for pos, h in buffer:
            if pos.shape[0] == 0:
                void += h
            for name in names:
                acc[name] += functionals[name](pos) * h
            for coll in collectors:
                coll.add(pos, h)
        for name in names:
            per_cycle[name].append(acc[name])
        per_cycle["__void__"].append(void)
        cycle_times.append(elapsed)
        void_times.append(void)
        total_time += elapsed
        cycles_done += 1
    per_cycle = {k: np.asarray(v) for k, v in per_cycle.items()}
    return ExcursionStats(
        cycle_count=cycles_done,
        total_time=total_time,
        time_at_void=float(np.sum(void_times)),
        integrals={name: float(per_cycle[name].sum()) for name in names},
        per_cycle=per_cycle,
        per_cycle_time=np.asarray(cycle_times),
        per_cycle_void=np.asarray(void_times),
        abandoned=abandoned,
        collectors=list(collectors),
    )


def count_power_functionals(q: int):
    """Functionals l^1 .. l^q of the particle count, for moment estimation."""
    return {f"l^{p}": (lambda pos, p=p: float(pos.shape[0] ** p))
            for p in range(1, q + 1)}


def particle_count_moments(stats: ExcursionStats, q: int):
    """Ratio estimates of the invariant count moments with bootstrap SEs.

    Returns a list of (estimate, se) for powers p = 1..q; requires the
    excursion run to have accumulated the l^p functionals.
    """
    out = []
    for p in range(1, q + 1):
        name = f"l^{p}"
        if name not in stats.integrals:
            raise KeyError(f"stats did not accumulate functional {name}")
        out.append((stats.ratio(name), stats.bootstrap_se(name)))
    return out


def occupation_histogram(source, edges: np.ndarray):
    """Occupation density estimate per bin: time-integrated particle count
    divided by (total time * bin volume).

    `source` is either an ExcursionStats whose run carried an
    OccupationCollector on these edges, or a trajectory from simulate.
    """
    edges = np.asarray(edges, dtype=float)
    if isinstance(source, ExcursionStats):
        for coll in source.collectors:
            if (isinstance(coll, OccupationCollector)
                    and coll.edges.shape == edges.shape
                    and np.allclose(coll.edges, edges)):
                return coll.density(source.total_time)
        raise ValueError("no matching OccupationCollector in stats")
    coll = OccupationCollector(edges)
    total = 0.0
    for (t0, c0), (t1, _) in zip(source, source[1:]):
        h = t1 - t0
        if h <= 0:
            continue
        coll.add(c0.positions, h)
        total += h
    if total == 0.0:
        return np.zeros(edges.size - 1)
    return coll.density(total)
