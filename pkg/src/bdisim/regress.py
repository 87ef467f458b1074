"""Regression design over a spatial cell partition and kernel estimation
of the one-particle diffusion coefficient (d=1).

Each cell of a cube A is filled with the first observed identifiable pair
placing a particle in it; the normalized increment of that particle is the
regression response.  A compactly supported kernel with vanishing moments
then smooths the squared responses into a pointwise estimate of sigma^2.
Risk sweeps replicate the whole pipeline across observation steps to check
the rescaled-risk trend.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
from numpy.polynomial import legendre

from bdisim.bdi import Configuration, observe_stream, void_configuration
from bdisim.model import ModelSpec
from bdisim.reconstruct import match_pair


class UnfilledCellError(RuntimeError):
    """Kernel support window contains a cell with no regression entry."""


@dataclass(frozen=True)
class CellPartition:
    """Uniform partition of a cube A into n cells per axis."""

    lo: np.ndarray
    hi: np.ndarray
    n: int
    dim: int

    @property
    def edge_length(self) -> float:
        return float(self.hi[0] - self.lo[0])

    @property
    def cell_length(self) -> float:
        return self.edge_length / self.n

    def cell_of(self, x: np.ndarray):
        """Multi-index of the cell containing x (clipped to the cube) or
        None when x lies outside A."""
        x = np.atleast_1d(np.asarray(x, dtype=float))
        if np.any(x < self.lo) or np.any(x > self.hi):
            return None
        idx = np.minimum(((x - self.lo) / self.cell_length).astype(int), self.n - 1)
        return tuple(int(i) for i in idx)

    def all_cells(self):
        return [tuple(i) for i in np.ndindex(*([self.n] * self.dim))]

    def cell_center(self, alpha) -> np.ndarray:
        return self.lo + (np.asarray(alpha, dtype=float) + 0.5) * self.cell_length


def partition(A, delta: float, d: int) -> CellPartition:
    """n(delta) = floor(L(A) * delta^(-1/(2d))) cells per axis."""
    lo = np.atleast_1d(np.asarray(A[0], dtype=float))
    hi = np.atleast_1d(np.asarray(A[1], dtype=float))
    if lo.size == 1 and d > 1:
        lo = np.full(d, lo[0])
        hi = np.full(d, hi[0])
    edges = hi - lo
    if not np.all(edges > 0) or not np.allclose(edges, edges[0]):
        raise ValueError("A must be a nonempty cube")
    n = int(np.floor(edges[0] * delta ** (-1.0 / (2 * d))))
    if n < 1:
        raise ValueError(f"delta={delta} too large for cube edge {edges[0]}: n=0")
    return CellPartition(lo=lo, hi=hi, n=n, dim=d)


@dataclass
class SchemeEntry:
    tau: int
    X: np.ndarray
    Z: np.ndarray
    good_flag: Optional[bool]


@dataclass
class RegressionScheme:
    partition: CellPartition
    delta: float
    lam: float
    entries: dict = field(default_factory=dict)  # alpha -> SchemeEntry

    @property
    def unfilled(self):
        return [a for a in self.partition.all_cells() if a not in self.entries]

    @property
    def tau_star(self) -> Optional[int]:
        if not self.entries:
            return None
        return max(e.tau for e in self.entries.values())


class SchemeFiller:
    """Incremental scheme construction over an observation stream.

    Feed consecutive observation pairs in order; each unfilled cell is
    claimed by the first identifiable pair placing a particle inside it
    (tie-break: smallest canonical particle index).  The normalized
    response Z = (y[pi(m)] - x[m]) / sqrt(delta) automatically lies in
    (-delta^(lam-1/2), delta^(lam-1/2)) per coordinate.
    """

    def __init__(self, part: CellPartition, delta: float, lam: float):
        self.scheme = RegressionScheme(partition=part, delta=delta, lam=lam)
        self._remaining = set(part.all_cells())
        self.pair_index = 0

    @property
    def complete(self) -> bool:
        return not self._remaining

    def covers(self, cells) -> bool:
        return all(a not in self._remaining for a in cells)

    def feed(self, x: Configuration, y: Configuration,
             good_flag: Optional[bool] = None):
        """Process one observation pair; returns the match result."""
        i = self.pair_index
        self.pair_index += 1
        if not self._remaining:
            return None
        res = match_pair(x, y, self.scheme.delta, self.scheme.lam)
        if not res.identified:
            return res
        sqd = math.sqrt(self.scheme.delta)
        for m in range(x.size):
            alpha = self.scheme.partition.cell_of(x.positions[m])
            if alpha is None or alpha not in self._remaining:
                continue
            z = (y.positions[res.permutation[m]] - x.positions[m]) / sqd
            self.scheme.entries[alpha] = SchemeEntry(
                tau=i, X=x.positions[m].copy(), Z=z, good_flag=good_flag)
            self._remaining.discard(alpha)
        return res


def fill_scheme(observations, truth, part: CellPartition, delta: float,
                lam: float) -> RegressionScheme:
    """Build the regression scheme from a finite observation stream.

    Cells never reached stay unfilled (the caller may extend the stream).
    good_flag per entry is the CI status of the underlying truth segment
    when truth is supplied.
    """
    filler = SchemeFiller(part, delta, lam)
    for i, (x, y) in enumerate(zip(observations, observations[1:])):
        gf = None
        if truth is not None:
            gf = truth[i].ci_flag(delta, lam)
        filler.feed(x, y, good_flag=gf)
        if filler.complete:
            break
    return filler.scheme


# ---------------------------------------------------------------------------
# kernels


@dataclass(frozen=True)
class Kernel:
    """Compactly supported kernel on [-1,1] with vanishing moments 1..order."""

    order: int
    coeffs: np.ndarray  # Legendre coefficients

    def evaluate(self, v) -> np.ndarray:
        v = np.asarray(v, dtype=float)
        out = legendre.legval(v, self.coeffs)
        return np.where(np.abs(v) <= 1.0, out, 0.0)

    def __call__(self, v):
        return self.evaluate(v)

    @property
    def lipschitz_constant(self) -> float:
        grid = np.linspace(-1.0, 1.0, 4001)
        dcoef = legendre.legder(self.coeffs)
        return float(np.max(np.abs(legendre.legval(grid, dcoef))))

    @property
    def sup_norm(self) -> float:
        grid = np.linspace(-1.0, 1.0, 4001)
        return float(np.max(np.abs(self.evaluate(grid))))


def make_kernel(order: int) -> Kernel:
    """Kernel with integral 1 and vanishing moments up to `order`.

    Expands in the Legendre basis truncated at degree `order` and solves
    the square moment system; by orthogonality the solution is the unique
    polynomial of that degree meeting the conditions.
    """
    if order < 1:
        raise ValueError("order must be >= 1")
    m = order + 1
    mat = np.empty((m, m))
    for r in range(m):
        for j in range(m):
            # integral of v^r P_j(v) over [-1,1]
            pow_coeffs = np.zeros(r + 1)
            pow_coeffs[r] = 1.0
            prod = legendre.legmul(legendre.poly2leg(pow_coeffs),
                                   _unit_leg(j, m))
            mat[r, j] = _leg_integral(prod)
    rhs = np.zeros(m)
    rhs[0] = 1.0
    coeffs = np.linalg.solve(mat, rhs)
    return Kernel(order=order, coeffs=coeffs)


def _unit_leg(j, m):
    c = np.zeros(m)
    c[j] = 1.0
    return c


def _leg_integral(coeffs):
    # integral over [-1,1] picks out 2 * (coefficient of P_0)
    return 2.0 * coeffs[0]


def critical_lambda(beta: float) -> float:
    """Smallest admissible lambda for smoothness beta: 1/2 - 1/(8(2 beta + 1))."""
    if beta < 2:
        raise ValueError("beta must be >= 2")
    return (8.0 * beta + 3.0) / (16.0 * beta + 8.0)


def largest_integer_below(beta: float) -> int:
    """Largest integer strictly less than beta (kernel order for class beta)."""
    b = math.ceil(beta) - 1 if float(beta).is_integer() else math.floor(beta)
    return int(b)


def bandwidth(n: int, beta: float) -> float:
    return float(n) ** (-1.0 / (2.0 * beta + 1.0))


# ---------------------------------------------------------------------------
# estimation


def estimate_sigma2(scheme: RegressionScheme, kernel: Kernel, beta: float,
                    a: float) -> float:
    """Kernel estimate of sigma^2 at an interior point a (d=1).

    sum over cells of cell_length * Z_alpha^2 * K_h(X_alpha - a) with
    h = n^(-1/(2 beta + 1)).  Every cell meeting [a-h, a+h] must be filled
    and the window must lie inside A.
    """
    part = scheme.partition
    if part.dim != 1:
        raise ValueError("kernel estimation implemented for d=1 only")
    if kernel.order != largest_integer_below(beta):
        raise ValueError(
            f"kernel order {kernel.order} does not match class beta={beta} "
            f"(need {largest_integer_below(beta)})")
    a = float(a)
    lo, hi = float(part.lo[0]), float(part.hi[0])
    if not (lo < a < hi):
        raise ValueError(f"a={a} not in the interior of A=[{lo},{hi}]")
    h = bandwidth(part.n, beta)
    if a - h < lo or a + h > hi:
        raise ValueError(
            f"support window [a-h, a+h] = [{a - h:.4g},{a + h:.4g}] exceeds A")
    length = part.cell_length
    total = 0.0
    for alpha in part.all_cells():
        center = part.cell_center(alpha)[0]
        if center + 0.5 * length < a - h or center - 0.5 * length > a + h:
            continue
        entry = scheme.entries.get(alpha)
        if entry is None:
            raise UnfilledCellError(f"cell {alpha} in support window unfilled")
        total += length * float(entry.Z[0] ** 2) * kernel((entry.X[0] - a) / h) / h
    return total


def support_cells(part: CellPartition, a: float, beta: float):
    """Cells of a d=1 partition meeting the kernel window around a."""
    h = bandwidth(part.n, beta)
    length = part.cell_length
    out = []
    for alpha in part.all_cells():
        center = part.cell_center(alpha)[0]
        if center + 0.5 * length >= a - h and center - 0.5 * length <= a + h:
            out.append(alpha)
    return out


@dataclass
class EstimateReport:
    a: float
    estimate: float
    true_value: Optional[float]
    delta: float
    n: int
    h: float
    beta: float
    lam: float
    had_bad_entry: bool = False

    @property
    def squared_error(self) -> Optional[float]:
        if self.true_value is None:
            return None
        return (self.estimate - self.true_value) ** 2

    @property
    def rescaled_error(self) -> Optional[float]:
        se = self.squared_error
        if se is None:
            return None
        return self.n ** (2.0 * self.beta / (2.0 * self.beta + 1.0)) * se


@dataclass
class SweepRow:
    delta: float
    n: int
    h: float
    lam: float
    beta: float
    mse: float
    rescaled_mse: float
    f_event_frequency: float
    replicates: int
    dropped: int


def risk_sweep(spec: ModelSpec, A, a: float, beta: float, lam: float,
               delta_list, replicates: int, dt_ratio: float, rng,
               warmup_time: float = 20.0, warmup_dt: float = 0.01,
               max_pairs: int = 2_000_000, true_sigma2=None):
    """Monte Carlo risk of the kernel estimator across observation steps.

    Per replicate: warm the process in from the void, stream observations
    at step delta (simulation step delta*dt_ratio) until the kernel support
    window around a is fully filled, then estimate.  Returns
    (rows, reports): one SweepRow per delta plus all per-replicate reports.
    Replicates whose scheme does not complete within max_pairs are dropped
    and counted.
    """
    lam0 = critical_lambda(beta)
    if not (lam0 <= lam < 0.5):
        raise ValueError(f"lam={lam} outside [{lam0}, 0.5)")
    if true_sigma2 is None:
        def true_sigma2(x):
            return float(spec.sigma_squared(np.atleast_1d(x))[0, 0])
    kernel = make_kernel(largest_integer_below(beta))
    rows = []
    reports = []
    streams = rng.spawn(len(delta_list) * replicates)
    for di, delta in enumerate(delta_list):
        part = partition(A, delta, 1)
        needed = support_cells(part, a, beta)
        h = bandwidth(part.n, beta)
        errs = []
        bad = 0
        dropped = 0
        for r in range(replicates):
            sub = streams[di * replicates + r]
            report = _one_replicate(spec, part, needed, kernel, beta, lam, a,
                                    delta, dt_ratio, sub, warmup_time,
                                    warmup_dt, max_pairs, true_sigma2)
            if report is None:
                dropped += 1
                continue
            reports.append(report)
            errs.append(report.squared_error)
            bad += int(report.had_bad_entry)
        done = len(errs)
        mse = float(np.mean(errs)) if errs else float("nan")
        rows.append(SweepRow(
            delta=delta, n=part.n, h=h, lam=lam, beta=beta, mse=mse,
            rescaled_mse=part.n ** (2 * beta / (2 * beta + 1)) * mse,
            f_event_frequency=bad / done if done else float("nan"),
            replicates=done, dropped=dropped))
    return rows, reports


def _one_replicate(spec, part, needed, kernel, beta, lam, a, delta, dt_ratio,
                   rng, warmup_time, warmup_dt, max_pairs, true_sigma2):
    from bdisim.bdi import simulate

    traj, _ = simulate(spec, void_configuration(spec.dim), warmup_time,
                       warmup_dt, rng)
    config = traj[-1][1]
    dt = delta * dt_ratio
    filler = SchemeFiller(part, delta, lam)
    next_id = None
    chunk = 2000
    while not filler.covers(needed) and filler.pair_index < max_pairs:
        obs, truth, config, next_id = observe_stream(
            spec, config, chunk, delta, dt, rng, next_id=next_id)
        for i in range(len(truth)):
            filler.feed(obs[i], obs[i + 1],
                        good_flag=truth[i].ci_flag(delta, lam))
            if filler.covers(needed):
                break
    if not filler.covers(needed):
        return None
    est = estimate_sigma2(filler.scheme, kernel, beta, a)
    bad = any(filler.scheme.entries[al].good_flag is False for al in needed)
    return EstimateReport(a=a, estimate=est, true_value=true_sigma2(a),
                          delta=delta, n=part.n, h=bandwidth(part.n, beta),
                          beta=beta, lam=lam, had_bad_entry=bad)


def summarize_sweep(rows):
    """Sweep rows as plain dicts (CSV-ready)."""
    return [vars(r).copy() for r in rows]
