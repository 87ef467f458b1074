"""Wellspread tests, identifiability, reconstruction, truth classification."""

import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from bdisim.bdi import Configuration, observe_stream, void_configuration
from bdisim.model import make_preset
from bdisim.reconstruct import (
    classify_against_truth,
    in_N_epsilon,
    is_wellspread,
    match_pair,
    neps_functionals,
    reconstruct_increments,
)


def conf(*points):
    return Configuration(np.atleast_2d(np.asarray(points, dtype=float)))


class TestWellspread:
    def test_void_and_singleton(self):
        assert is_wellspread(void_configuration(1), 0.1)
        assert is_wellspread(conf([5.0]), 0.1)

    def test_gap_equal_eps(self):
        assert is_wellspread(conf([0.0], [0.5]), 0.5)

    def test_one_close_coordinate_fails(self):
        x = conf([0.0, 0.0], [0.3, 5.0])
        assert not is_wellspread(x, 0.4)

    def test_nonpositive_eps(self):
        with pytest.raises(ValueError):
            is_wellspread(conf([0.0]), 0.0)


class TestNEpsilon:
    def test_singleton_false(self):
        assert not in_N_epsilon(conf([0.0]), 0.2)
        assert not in_N_epsilon(void_configuration(1), 0.2)

    def test_close_pair_true(self):
        assert in_N_epsilon(conf([0.0], [0.1]), 0.2)

    def test_spread_in_all_coordinates_false(self):
        x = conf([0.0, 0.0, 0.0], [1.0, 1.0, 1.0])
        assert not in_N_epsilon(x, 0.5)

    def test_eps_zero_indicator_vanishes(self):
        fns = neps_functionals([0.0])
        assert fns["neps:0"](np.array([[0.0], [0.0]])) == 0.0


class TestMatchPair:
    def test_single_particle_identified(self):
        res = match_pair(conf([0.0]), conf([0.05]), 0.01, 0.4)
        assert res.identified and res.permutation == (0,)

    def test_length_mismatch(self):
        res = match_pair(conf([0.0]), conf([0.0], [1.0]), 0.01, 0.4)
        assert res.reason == "length_mismatch"

    def test_void_pair(self):
        res = match_pair(void_configuration(1), void_configuration(1), 0.01, 0.4)
        assert res.reason == "void"

    def test_crossing_match(self):
        res = match_pair(conf([0.0], [1.0]), conf([1.05], [0.02]), 0.01, 0.4)
        assert res.identified
        assert res.permutation == (1, 0)

    def test_start_not_wellspread(self):
        thr = 0.01 ** 0.4
        x = conf([0.0], [3.9 * thr])
        res = match_pair(x, x, 0.01, 0.4)
        assert res.reason == "x_not_wellspread"

    def test_no_valid_permutation(self):
        x = conf([0.0], [10.0])
        y = conf([5.0], [15.0])
        res = match_pair(x, y, 0.01, 0.4)
        assert res.reason == "no_valid_permutation"

    def test_lambda_range_enforced(self):
        with pytest.raises(ValueError):
            match_pair(conf([0.0]), conf([0.0]), 0.01, 0.6)


class TestReconstructIncrements:
    def test_frozen_particles(self):
        x = conf([0.0], [1.0])
        out = reconstruct_increments([x, x], 0.01, 0.4)
        res, inc = out[0]
        assert res.identified and res.permutation == (0, 1)
        assert np.allclose(inc, 0.0)

    def test_crossing_increments(self):
        x = conf([0.0], [1.0])
        y = conf([1.05], [0.02])
        (res, inc), = reconstruct_increments([x, y], 0.01, 0.4)
        assert np.allclose(inc[:, 0], [0.02, 0.05])

    def test_void_pair_skipped(self):
        out = reconstruct_increments([void_configuration(1),
                                      void_configuration(1)], 0.01, 0.4)
        res, inc = out[0]
        assert not res.identified and inc is None


# ---------------------------------------------------------------------------
# brute-force oracle


def brute_force_match(x: Configuration, y: Configuration, delta, lam):
    """Exhaustive permutation search over the identifiability definition."""
    lx, ly = x.size, y.size
    if lx != ly or lx < 1:
        return None
    thr = delta ** lam
    if not is_wellspread(x, 4 * thr) or not is_wellspread(y, 2 * thr):
        return None
    hits = []
    for perm in itertools.permutations(range(lx)):
        if all(np.all(np.abs(y.positions[perm[i]] - x.positions[i]) < thr)
               for i in range(lx)):
            hits.append(perm)
    return hits


def random_pair(rng, delta, lam):
    thr = delta ** lam
    d = int(rng.integers(1, 4))
    l = int(rng.integers(0, 7))
    scale = rng.choice([0.5 * thr, 2 * thr, 5 * thr, 20 * thr])
    x = rng.uniform(-10 * thr, 10 * thr, size=(l, d))
    if rng.random() < 0.5 and l >= 1:
        y = x + rng.uniform(-scale, scale, size=(l, d))
        if rng.random() < 0.3:
            y = y[rng.permutation(l)]
    else:
        ly = l if rng.random() < 0.8 else int(rng.integers(0, 7))
        y = rng.uniform(-10 * thr, 10 * thr, size=(ly, d))
    return Configuration(x), Configuration(y)


def check_against_brute_force(x, y, delta, lam):
    res = match_pair(x, y, delta, lam)
    hits = brute_force_match(x, y, delta, lam)
    if res.identified:
        assert hits is not None and len(hits) == 1, \
            f"oracle disagrees: {res} vs {hits}"
        assert res.permutation == hits[0]
    else:
        assert hits is None or len(hits) == 0, \
            f"oracle found {hits} but match_pair said {res.reason}"


def test_brute_force_equivalence_random_pairs():
    rng = np.random.default_rng(1234)
    for _ in range(500):
        delta = float(rng.choice([0.05, 0.01, 0.001]))
        lam = float(rng.uniform(0.2, 0.49))
        x, y = random_pair(rng, delta, lam)
        check_against_brute_force(x, y, delta, lam)


@given(st.integers(min_value=0, max_value=2 ** 32 - 1))
@settings(max_examples=80, deadline=None)
def test_brute_force_equivalence_hypothesis(seed):
    rng = np.random.default_rng(seed)
    delta = float(rng.choice([0.05, 0.01]))
    lam = float(rng.uniform(0.2, 0.49))
    x, y = random_pair(rng, delta, lam)
    check_against_brute_force(x, y, delta, lam)


# ---------------------------------------------------------------------------
# classification against simulated truth


@pytest.fixture(scope="module")
def simulated():
    spec = make_preset("relocate")
    rng = np.random.default_rng(77)
    delta, lam = 0.01, 0.475
    obs, truth, _, _ = observe_stream(spec, void_configuration(1), 6000,
                                      delta, delta, rng)
    pairs = reconstruct_increments(obs, delta, lam)
    return pairs, truth, delta, lam


class TestClassification:
    def test_ci_subset_of_identifiable(self, simulated):
        pairs, truth, delta, lam = simulated
        stats = classify_against_truth(pairs, truth, delta, lam)
        assert stats.n_ci_not_identified == 0

    def test_ci_always_correct(self, simulated):
        pairs, truth, delta, lam = simulated
        stats = classify_against_truth(pairs, truth, delta, lam)
        assert stats.n_ci_wrong == 0
        assert stats.n_ci > 100

    def test_counts_consistent(self, simulated):
        pairs, truth, delta, lam = simulated
        stats = classify_against_truth(pairs, truth, delta, lam)
        assert (stats.n_identifiable
                == stats.n_identifiable_correct + stats.n_identifiable_wrong)
        assert stats.n_nonvoid <= stats.n_pairs
        assert stats.n_ci <= stats.n_nonvoid

    def test_event_segment_not_ci(self, simulated):
        pairs, truth, delta, lam = simulated
        assert any(s.had_event for s in truth)
        for s in truth:
            if s.had_event:
                assert not s.ci_flag(delta, lam)

    def test_empty_inputs(self):
        stats = classify_against_truth([], [], 0.01, 0.4)
        assert stats.n_pairs == 0

    def test_misaligned_lengths(self, simulated):
        pairs, truth, delta, lam = simulated
        with pytest.raises(ValueError):
            classify_against_truth(pairs[:-1], truth, delta, lam)
