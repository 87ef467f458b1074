"""Single-particle numerics: integration, killing, auxiliary jumps,
Feynman-Kac weights."""

import numpy as np
import pytest
from scipy import stats as sstats

from bdisim.model import (
    ModelSpec,
    _const_drift,
    _const_kill,
    _const_offspring,
    _const_vol,
    gaussian_scatter,
    local_scatter,
    make_preset,
    point_law,
)
from bdisim.sde import (
    feynman_kac_survival,
    integrate_diffusion,
    sample_aux_jump_diffusion,
    sample_killed_motion,
)


def drifting_spec(b=0.0, sigma=0.0):
    v = float(b)

    def drift(x):
        return np.full_like(np.asarray(x, dtype=float), v)

    return ModelSpec(
        dim=1, drift=drift, volatility=_const_vol(1, sigma),
        kill_rate=_const_kill(1.0), kill_rate_bound=1.0,
        offspring=_const_offspring([1.0]), offspring_max=0, rho_bound=0.0,
        scatter=local_scatter, immigration_rate=1.0,
        immigration_law=point_law(0.0), fallback_law=point_law(0.0))


def branching_spec(p0, p2, sigma=1.0, scatter=None, kappa=1.0):
    probs = [p0, 0.0, p2]
    return ModelSpec(
        dim=1, drift=_const_drift(1), volatility=_const_vol(1, sigma),
        kill_rate=_const_kill(kappa), kill_rate_bound=kappa,
        offspring=_const_offspring(probs), offspring_max=2,
        rho_bound=2 * p2, scatter=scatter or local_scatter,
        immigration_rate=1.0, immigration_law=point_law(0.0),
        fallback_law=point_law(0.0))


class TestIntegrateDiffusion:
    def test_frozen_path(self):
        path = integrate_diffusion(drifting_spec(), [1.5], 1.0, 0.1,
                                   np.random.default_rng(0))
        assert np.all(path.positions == 1.5)
        assert path.times[0] == 0.0 and path.times[-1] == 1.0

    def test_constant_drift_exact(self):
        path = integrate_diffusion(drifting_spec(b=1.0), [0.0], 1.0, 0.1,
                                   np.random.default_rng(0))
        assert path.positions[-1, 0] == pytest.approx(1.0, abs=1e-12)

    def test_brownian_endpoint_variance(self):
        spec = drifting_spec(sigma=1.0)
        rng = np.random.default_rng(1)
        n = 20000
        ends = np.empty(n)
        for i in range(n):
            ends[i] = integrate_diffusion(spec, [0.0], 1.0, 0.25, rng).positions[-1, 0]
        var = ends.var(ddof=1)
        se = np.sqrt(2.0 / n)  # SE of the sample variance of N(0,1)
        assert abs(var - 1.0) <= 3 * se

    def test_determinism(self):
        spec = drifting_spec(sigma=1.0)
        p1 = integrate_diffusion(spec, [0.0], 2.0, 0.01, np.random.default_rng(5))
        p2 = integrate_diffusion(spec, [0.0], 2.0, 0.01, np.random.default_rng(5))
        assert np.array_equal(p1.positions, p2.positions)

    def test_partial_final_step(self):
        path = integrate_diffusion(drifting_spec(b=1.0), [0.0], 0.95, 0.1,
                                   np.random.default_rng(0))
        assert path.times[-1] == pytest.approx(0.95)
        assert path.positions[-1, 0] == pytest.approx(0.95, abs=1e-12)

    def test_bad_dt(self):
        with pytest.raises(ValueError):
            integrate_diffusion(drifting_spec(), [0.0], 1.0, 2.0,
                                np.random.default_rng(0))


class TestKilledMotion:
    def test_kill_time_exponential_ks(self):
        # kappa equals the bound: every proposal accepted, kill times
        # exactly exponential(1)
        spec = drifting_spec(sigma=1.0)
        rng = np.random.default_rng(2)
        times = []
        for _ in range(5000):
            _, oc = sample_killed_motion(spec, [0.0], 200.0, 1.0, rng)
            assert oc.status == "killed"
            times.append(oc.terminal_time)
        res = sstats.kstest(times, "expon")
        assert res.pvalue > 0.01

    def test_mean_kill_time(self):
        spec = drifting_spec()
        rng = np.random.default_rng(3)
        times = [sample_killed_motion(spec, [0.0], 100.0, 1.0, rng)[1].terminal_time
                 for _ in range(5000)]
        assert abs(np.mean(times) - 1.0) <= 3.0 / np.sqrt(5000)

    def test_survival_fraction(self):
        spec = drifting_spec()
        rng = np.random.default_rng(4)
        n = 5000
        surv = sum(sample_killed_motion(spec, [0.0], 2.0, 0.5, rng)[1].status
                   == "survived" for _ in range(n)) / n
        p = np.exp(-2.0)
        assert abs(surv - p) <= 3 * np.sqrt(p * (1 - p) / n)


class TestAuxJumpDiffusion:
    def test_no_jump_matches_diffusion(self):
        # rho_bound = 0: the jump clock never fires and the rng stream is
        # consumed identically, so paths agree bitwise
        spec = drifting_spec(sigma=1.0)
        p1 = sample_aux_jump_diffusion(spec, [0.0], 1.0, 0.05,
                                       np.random.default_rng(6))
        p2 = integrate_diffusion(spec, [0.0], 1.0, 0.05,
                                 np.random.default_rng(6))
        assert np.array_equal(p1.positions[-1], p2.positions[-1])
        assert not p1.jumps

    def test_local_scatter_endpoint_law(self):
        # zero-size jumps: endpoint law equals the plain diffusion's N(0, t)
        spec = branching_spec(0.75, 0.25, sigma=1.0)
        rng = np.random.default_rng(7)
        ends = [sample_aux_jump_diffusion(spec, [0.0], 1.0, 0.1, rng).positions[-1, 0]
                for _ in range(2000)]
        res = sstats.kstest(ends, "norm")
        assert res.pvalue > 0.01

    def test_gaussian_scatter_jump_displacements(self):
        # binary branching: a size-biased jump is a single scattered child,
        # so displacements are N(0, s^2)
        s = 0.5
        spec = branching_spec(0.75, 0.25, sigma=0.0, scatter=gaussian_scatter(s))
        rng = np.random.default_rng(8)
        disp = []
        while len(disp) < 1500:
            path = sample_aux_jump_diffusion(spec, [0.0], 20.0, 0.5, rng)
            disp.extend(v[0] for _, v in path.jumps)
        res = sstats.kstest(np.asarray(disp) / s, "norm")
        assert res.pvalue > 0.01


class TestFeynmanKac:
    def test_rho_one_weight_is_one(self):
        # single-child branching: the potential vanishes, weight is 1
        spec = ModelSpec(
            dim=1, drift=_const_drift(1), volatility=_const_vol(1, 1.0),
            kill_rate=_const_kill(1.0), kill_rate_bound=1.0,
            offspring=_const_offspring([0.0, 1.0]), offspring_max=1,
            rho_bound=1.0, scatter=local_scatter, immigration_rate=1.0,
            immigration_law=point_law(0.0), fallback_law=point_law(0.0))
        est, se = feynman_kac_survival(spec, [0.0], 1.0, 0.25, 100,
                                       np.random.default_rng(9))
        assert est == pytest.approx(1.0, abs=1e-12)
        assert se == pytest.approx(0.0, abs=1e-12)

    def test_constant_potential_half(self):
        spec = make_preset("binary-local")
        est, _ = feynman_kac_survival(spec, [0.0], 1.0, 0.25, 200,
                                      np.random.default_rng(10))
        assert est == pytest.approx(np.exp(-0.5), abs=1e-10)

    def test_pure_death(self):
        spec = drifting_spec()
        est, _ = feynman_kac_survival(spec, [0.0], 2.0, 0.5, 100,
                                      np.random.default_rng(11))
        assert est == pytest.approx(np.exp(-2.0), abs=1e-10)

    def test_dt_halving_stable(self):
        spec = branching_spec(0.75, 0.25, sigma=1.0,
                              scatter=gaussian_scatter(0.5))
        e1, s1 = feynman_kac_survival(spec, [0.0], 1.0, 0.2, 400,
                                      np.random.default_rng(12))
        e2, s2 = feynman_kac_survival(spec, [0.0], 1.0, 0.1, 400,
                                      np.random.default_rng(13))
        assert abs(e1 - e2) <= 2 * np.sqrt(s1 ** 2 + s2 ** 2) + 1e-9

    def test_needs_two_paths(self):
        with pytest.raises(ValueError):
            feynman_kac_survival(drifting_spec(), [0.0], 1.0, 0.5, 1,
                                 np.random.default_rng(0))
