"""Identity reconstruction across observation gaps.

An observed pair of consecutive configurations is identifiable when both
are sufficiently wellspread (margins 4*delta^lam for the start, 2*delta^lam
for the end) and the particles match one-to-one within delta^lam per
coordinate; the matching permutation is then unique.  Wellspread tests use
non-strict >=, matching uses strict <, so boundary ties resolve to
"wellspread" and "not matched" respectively.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from bdisim.bdi import Configuration, ExcursionStats, SegmentRecord, wellspread_positions


def is_wellspread(x: Configuration, eps: float) -> bool:
    """True iff all particle pairs differ by >= eps in every coordinate.

    Void and one-particle configurations are wellspread by convention.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    return wellspread_positions(x.positions, eps)


def in_N_epsilon(x: Configuration, eps: float) -> bool:
    """True iff some particle pair is eps-close in every coordinate
    (requires at least two particles)."""
    if x.size <= 1:
        return False
    return not is_wellspread(x, eps)


@dataclass(frozen=True)
class MatchResult:
    status: str  # "identified" | "not_identifiable"
    permutation: Optional[tuple] = None  # pi: start index -> end index
    reason: Optional[str] = None
    # reason in {void, length_mismatch, x_not_wellspread, y_not_wellspread,
    #            no_valid_permutation}

    @property
    def identified(self) -> bool:
        return self.status == "identified"


def _identified(perm):
    return MatchResult("identified", permutation=tuple(perm))


def _failed(reason):
    return MatchResult("not_identifiable", reason=reason)


def match_pair(x: Configuration, y: Configuration, delta: float, lam: float) -> MatchResult:
    """Test (delta, lam)-identifiability and return the matching permutation.

    Each start particle has at most one candidate end particle within
    delta^lam per coordinate (forced by the 4*delta^lam spread of x), so the
    candidate map is total and bijective exactly when the pair is
    identifiable.
    """
    if delta <= 0:
        raise ValueError("delta must be positive")
    if not (0.0 < lam < 0.5):
        raise ValueError("lam must lie in (0, 1/2)")
    lx, ly = x.size, y.size
    if lx == 0 and ly == 0:
        return _failed("void")
    if lx != ly:
        return _failed("length_mismatch")
    thr = delta ** lam
    if not is_wellspread(x, 4.0 * thr):
        return _failed("x_not_wellspread")
    if not is_wellspread(y, 2.0 * thr):
        return _failed("y_not_wellspread")
    # candidate map: close in every coordinate, strict inequality
    close = np.all(np.abs(y.positions[None, :, :] - x.positions[:, None, :]) < thr,
                   axis=-1)
    if not np.all(close.sum(axis=1) == 1) or not np.all(close.sum(axis=0) == 1):
        return _failed("no_valid_permutation")
    perm = tuple(int(j) for j in np.argmax(close, axis=1))
    return _identified(perm)


def reconstruct_increments(observations, delta: float, lam: float):
    """Run the reconstruction over consecutive observation pairs.

    Returns one (MatchResult, increments) tuple per pair; increments is the
    (l, d) array of matched displacements y[pi(k)] - x[k] for identified
    pairs and None otherwise.
    """
    out = []
    for x, y in zip(observations, observations[1:]):
        res = match_pair(x, y, delta, lam)
        if res.identified:
            inc = y.positions[list(res.permutation)] - x.positions
            out.append((res, inc))
        else:
            out.append((res, None))
    return out


@dataclass
class ReconStats:
    n_pairs: int = 0
    n_nonvoid: int = 0
    n_identifiable: int = 0
    n_identifiable_correct: int = 0
    n_identifiable_wrong: int = 0
    n_nonvoid_not_ci: int = 0
    n_ci: int = 0
    n_ci_not_identified: int = 0
    n_ci_wrong: int = 0

    @property
    def prop_identifiable(self) -> float:
        return self.n_identifiable / max(self.n_pairs, 1)

    @property
    def prop_wrong(self) -> float:
        return self.n_identifiable_wrong / max(self.n_pairs, 1)

    @property
    def prop_nonvoid_not_ci(self) -> float:
        return self.n_nonvoid_not_ci / max(self.n_pairs, 1)

    @property
    def prop_ci(self) -> float:
        return self.n_ci / max(self.n_pairs, 1)


def classify_against_truth(pairs, truth, delta: float, lam: float) -> ReconStats:
    """Score reconstruction outcomes against simulation ground truth.

    `pairs` is the output of reconstruct_increments; `truth` the aligned
    SegmentRecord list.  A pair is correct when the matching permutation
    maps every start particle to the end observation generated by the same
    lineage id; a segment is CI per SegmentRecord.ci_flag.
    """
    if len(pairs) != len(truth):
        raise ValueError("pairs and truth must be aligned")
    stats = ReconStats(n_pairs=len(pairs))
    for (res, _), seg in zip(pairs, truth):
        nonvoid = seg.start_config.size >= 1
        ci = seg.ci_flag(delta, lam)
        if nonvoid:
            stats.n_nonvoid += 1
            if not ci:
                stats.n_nonvoid_not_ci += 1
        if ci:
            stats.n_ci += 1
        if res.identified:
            stats.n_identifiable += 1
            correct = _permutation_correct(res.permutation, seg)
            if correct:
                stats.n_identifiable_correct += 1
            else:
                stats.n_identifiable_wrong += 1
                if ci:
                    stats.n_ci_wrong += 1
        elif ci:
            stats.n_ci_not_identified += 1
    return stats


def _permutation_correct(perm, seg: SegmentRecord) -> bool:
    sx, sy = seg.start_config.lineage_ids, seg.end_config.lineage_ids
    if sx is None or sy is None:
        raise ValueError("truth configurations must carry lineage ids")
    if seg.had_event or len(sx) != len(perm) or len(sy) != len(perm):
        return False
    return all(sx[k] == sy[perm[k]] for k in range(len(perm)))


def neps_functionals(eps_list, dim: int = 1):
    """Indicator functionals of the close-pair event, for excursion runs."""

    def make(eps):
        def indicator(pos):
            n = pos.shape[0]
            if n <= 1:
                return 0.0
            return 0.0 if wellspread_positions(pos, eps) else 1.0
        return indicator

    return {f"neps:{eps:g}": make(eps) for eps in eps_list}


def wellspread_measure_estimate(stats: ExcursionStats, eps_list):
    """Invariant measure of the close-pair sets N(eps), per eps.

    Requires the excursion run to have accumulated the neps indicator
    functionals.  Returns {eps: (estimate, bootstrap_se)}.
    """
    out = {}
    for eps in eps_list:
        name = f"neps:{eps:g}"
        if name not in stats.integrals:
            raise KeyError(f"stats did not accumulate functional {name}")
        out[eps] = (stats.ratio(name), stats.bootstrap_se(name))
    return out
