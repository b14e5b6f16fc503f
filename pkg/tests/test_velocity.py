import math

import numpy as np
import pytest

from dfm import (
    Alphabet,
    BetaSchedule,
    Flux,
    LinearScheduler,
    Pmf,
    WeightSpec,
    absolute_metric,
    closed_form_potential,
    conditional_velocity_matrix,
    corrector_flux,
    divergence,
    flux_indicator,
    flux_power,
    flux_power_inf,
    flux_stable,
    integrated_kinetic_energy,
    kinetic_energy,
    ko_path,
    laplacian_solve,
    make_pmf,
    marginal_velocity,
    marginal_velocity_mixture,
    mask_mixture_path,
    metric_path,
    mixture_path,
    scheduler_kinetic_optimal,
    velocity_from_flux,
    velocity_metric_conditional,
    velocity_mixture_conditional,
)
from dfm.errors import (
    AlphaOutOfRangeError,
    AsymmetricWeightError,
    DivideByZeroTauError,
    InconsistentRHSError,
    SingularSystemError,
    UnsafeFluxError,
)
from dfm.posterior import ExactPosterior
from dfm.datasets import ToySpec, make_toy
from dfm.velocity import conditional_velocity_column


def random_p_dp(rng, k, floor=0.02):
    p = make_pmf(rng.random(k) + floor)
    dp = rng.standard_normal(k)
    dp -= dp.mean()
    return p, dp


class TestDivergence:
    def test_symmetric_flux_divergence_free(self):
        rng = np.random.default_rng(0)
        m = rng.random((4, 4))
        m = m + m.T
        np.fill_diagonal(m, 0.0)
        assert np.all(divergence(Flux(m)) == 0.0)

    def test_hand_value(self):
        m = np.zeros((2, 2))
        m[1, 0] = 1.0
        assert divergence(Flux(m)).tolist() == [1.0, -1.0]

    def test_zero_flux(self):
        assert np.all(divergence(Flux(np.zeros((3, 3)))) == 0.0)

    def test_total_is_zero(self):
        # every term appears twice with opposite sign; float residual only
        rng = np.random.default_rng(1)
        for _ in range(20):
            m = rng.random((5, 5))
            np.fill_diagonal(m, 0.0)
            assert abs(divergence(Flux(m)).sum()) <= 1e-13


class TestVelocityFromFlux:
    def test_zero_flux(self):
        u = velocity_from_flux(Flux(np.zeros((3, 3))), Pmf.uniform(3))
        assert np.all(u.mat == 0.0)

    def test_hand_value(self):
        m = np.zeros((2, 2))
        m[1, 0] = 1.0
        u = velocity_from_flux(Flux(m), make_pmf([0.7, 0.3]))
        assert u.mat[1, 0] == pytest.approx(1 / 0.7)
        assert u.mat[0, 0] == pytest.approx(-1 / 0.7)
        assert np.all(u.mat[:, 1] == 0.0)

    def test_column_sums_zero(self):
        rng = np.random.default_rng(2)
        for _ in range(50):
            p, dp = random_p_dp(rng, 6)
            u = velocity_from_flux(flux_stable(p, dp), p)
            assert np.abs(u.mat.sum(axis=0)).max() <= 1e-10

    def test_unsafe_raises(self):
        m = np.zeros((2, 2))
        m[1, 0] = 0.5
        with pytest.raises(UnsafeFluxError):
            velocity_from_flux(Flux(m), Pmf.delta(1, 2))

    def test_unsafe_zero_mode(self):
        m = np.zeros((2, 2))
        m[1, 0] = 0.5
        u = velocity_from_flux(Flux(m), Pmf.delta(1, 2), unsafe="zero")
        assert np.all(u.mat == 0.0)


class TestPotentials:
    def test_homogeneous(self):
        p = make_pmf([0.4, 0.6])
        assert np.all(laplacian_solve(p, np.zeros(2), WeightSpec.stable()) == 0.0)
        assert np.all(closed_form_potential(p, np.zeros(2), p.weights) == 0.0)

    def test_stable_weight_closed_form(self):
        rng = np.random.default_rng(3)
        for _ in range(20):
            p, dp = random_p_dp(rng, 8)
            f = laplacian_solve(p, dp, WeightSpec.stable())
            want = dp / p.weights
            want = want - want.mean()
            assert np.abs(f - want).max() <= 1e-8

    def test_indicator_weight_closed_form(self):
        rng = np.random.default_rng(4)
        p, dp = random_p_dp(rng, 5)
        f = laplacian_solve(p, dp, WeightSpec.indicator())
        assert np.abs(f - dp / 5.0).max() <= 1e-10

    def test_hand_value(self):
        p = Pmf(np.array([0.7, 0.3]))
        f = closed_form_potential(p, np.array([-1.0, 1.0]), p.weights)
        assert np.allclose(f, [-1 / 0.7, 1 / 0.3])

    def test_agreement_up_to_gauge(self):
        rng = np.random.default_rng(5)
        for alpha in (1.0, 2.0):
            p, dp = random_p_dp(rng, 12, floor=0.1)
            f1 = laplacian_solve(p, dp, WeightSpec.power(alpha))
            f2 = closed_form_potential(p, dp, p.weights**alpha)
            assert np.abs(f1 - (f2 - f2.mean())).max() <= 1e-8

    def test_custom_tau_weight(self):
        rng = np.random.default_rng(19)
        p, dp = random_p_dp(rng, 7, floor=0.1)
        w = WeightSpec.custom(np.sqrt)
        f1 = laplacian_solve(p, dp, w)
        f2 = closed_form_potential(p, dp, np.sqrt(p.weights))
        assert np.abs(f1 - (f2 - f2.mean())).max() <= 1e-8
        j = corrector_flux(p, f1, w)
        assert np.all(divergence(j) == 0.0)

    def test_unsafe_custom_tau_rejected(self):
        w = WeightSpec.custom(lambda p: np.ones_like(p))
        with pytest.raises(UnsafeFluxError):
            w.tau(np.array([0.5, 0.5, 0.0]))

    def test_errors(self):
        p = make_pmf([1.0, 1.0])
        with pytest.raises(InconsistentRHSError):
            laplacian_solve(p, np.array([1.0, 1.0]), WeightSpec.stable())
        with pytest.raises(SingularSystemError):
            laplacian_solve(Pmf.delta(0, 2), np.array([0.5, -0.5]),
                            WeightSpec.indicator())
        with pytest.raises(DivideByZeroTauError):
            closed_form_potential(p, np.array([0.5, -0.5]),
                                  np.array([1.0, 0.0]))


class TestFluxFamilies:
    def test_stable_hand_value(self):
        j = flux_stable(make_pmf([0.7, 0.3]), np.array([-1.0, 1.0]))
        assert j.mat[1, 0] == pytest.approx(1.0)
        assert j.mat[0, 1] == 0.0

    def test_stable_safe_on_mask_path(self):
        path = mask_mixture_path(Alphabet(4, mask_token=3))
        for t in (0.2, 0.5, 0.8):
            p = path.pmf(t, 1)
            j = flux_stable(p, path.dpmf(t, 1))
            assert j.is_safe(p)
            assert np.all(j.mat[:, p.weights == 0] == 0.0)

    def test_stable_zero_for_constant_path(self):
        p = make_pmf([0.25, 0.5, 0.25])
        assert np.all(flux_stable(p, np.zeros(3)).mat == 0.0)

    def test_stable_unidirectional(self):
        rng = np.random.default_rng(6)
        for _ in range(30):
            p, dp = random_p_dp(rng, 5)
            j = flux_stable(p, dp)
            assert np.all(j.mat * j.mat.T == 0.0)

    def test_indicator_hand_value(self):
        j = flux_indicator(Pmf.uniform(2), np.array([-1.0, 1.0]))
        assert j.mat[1, 0] == pytest.approx(1.0)
        assert j.mat[0, 1] == 0.0

    def test_indicator_unsafe_on_zero_state(self):
        # a zero-probability state with nonzero dp elsewhere emits flux
        p = Pmf(np.array([0.5, 0.5, 0.0]))
        dp = np.array([-1.0, 1.0, 0.0])
        j = flux_indicator(p, dp)
        assert not j.is_safe(p)
        with pytest.raises(UnsafeFluxError):
            velocity_from_flux(j, p)

    def test_continuity_for_positive_paths(self):
        rng = np.random.default_rng(7)
        for _ in range(30):
            p, dp = random_p_dp(rng, 6)
            for fn in (flux_stable, flux_indicator,
                       lambda pp, dd: flux_power(pp, dd, 3.0)):
                assert np.abs(divergence(fn(p, dp)) + dp).max() <= 1e-9

    def test_power_alpha_one_is_stable(self):
        rng = np.random.default_rng(8)
        p, dp = random_p_dp(rng, 5)
        assert np.abs(flux_power(p, dp, 1.0).mat
                      - flux_stable(p, dp).mat).max() <= 1e-12

    def test_power_approaches_inf_limit(self):
        rng = np.random.default_rng(9)
        p, dp = random_p_dp(rng, 4, floor=0.1)
        j50 = flux_power(p, dp, 50.0)
        jinf = flux_power_inf(p, dp)
        assert np.abs(j50.mat - jinf.mat).max() <= 1e-2
        j200 = flux_power(p, dp, 200.0)
        assert np.abs(j200.mat - jinf.mat).max() \
            <= np.abs(j50.mat - jinf.mat).max()

    def test_power_inf_structure(self):
        p = make_pmf([0.5, 0.3, 0.2])
        dp = np.array([-1.0, 0.4, 0.6])
        j = flux_power_inf(p, dp).mat
        mask = np.ones((3, 3), dtype=bool)
        mask[0, :] = False
        mask[:, 0] = False
        assert np.all(j[mask] == 0.0)
        assert j[1, 0] == pytest.approx(0.4)
        assert j[2, 0] == pytest.approx(0.6)

    def test_power_inf_ties_lowest_index(self):
        p = Pmf(np.array([0.4, 0.4, 0.2]))
        dp = np.array([0.3, -0.5, 0.2])
        j = flux_power_inf(p, dp).mat
        # modal state resolved to index 0
        assert j[0, 1] == pytest.approx(0.5)

    def test_alpha_out_of_range(self):
        with pytest.raises(AlphaOutOfRangeError):
            flux_power(Pmf.uniform(3), np.zeros(3), 0.5)

    def test_zero_dp_gives_zero_flux(self):
        p = make_pmf([0.5, 0.3, 0.2])
        for fn in (flux_stable, flux_indicator, flux_power_inf,
                   lambda pp, dd: flux_power(pp, dd, 2.0)):
            assert np.all(fn(p, np.zeros(3)).mat == 0.0)


class TestConditionalVelocities:
    def test_mixture_hand_value(self):
        u = velocity_mixture_conditional(LinearScheduler(), 0.5, 0, Alphabet(3))
        assert u.mat[0, 1] == pytest.approx(2.0)
        assert u.mat[0, 2] == pytest.approx(2.0)
        assert np.all(u.mat[:, 0] == 0.0)

    def test_mixture_matches_stable_flux(self):
        src = make_pmf([0.5, 0.3, 0.2])
        path = mixture_path(src, LinearScheduler())
        rng = np.random.default_rng(10)
        for _ in range(25):
            t = float(rng.uniform(0.05, 0.95))
            x1 = int(rng.integers(3))
            u1 = velocity_mixture_conditional(path.scheduler, t, x1,
                                              path.alphabet)
            u2 = velocity_from_flux(flux_stable(path.pmf(t, x1),
                                                path.dpmf(t, x1)),
                                    path.pmf(t, x1))
            pos = path.pmf(t, x1).weights > 0
            assert np.abs(u1.mat[:, pos] - u2.mat[:, pos]).max() <= 1e-10

    def test_ko_mask_rate(self):
        sched = scheduler_kinetic_optimal(make_pmf([1, 0]))
        u = velocity_mixture_conditional(sched, 0.5, 1, Alphabet(2))
        assert u.mat[1, 0] == pytest.approx(math.pi, abs=1e-12)

    def test_metric_moves_closer_only(self):
        path = metric_path(absolute_metric(), BetaSchedule(c=2, a=2), Alphabet(5))
        u = velocity_metric_conditional(path, 0.4, 2).mat
        for x in range(5):
            for z in range(5):
                if x == z:
                    continue
                if abs(x - 2) >= abs(z - 2):
                    assert u[x, z] == 0.0

    def test_metric_hand_value(self):
        path = metric_path(absolute_metric(), BetaSchedule(c=1, a=1), Alphabet(3))
        t = 0.4
        u = velocity_metric_conditional(path, t, 2).mat
        w = path.pmf(t, 2).weights
        assert u[1, 0] == pytest.approx(w[1] * path.beta.beta_dot(t) * 1.0)

    def test_metric_matches_stable_flux(self):
        path = metric_path(absolute_metric(), BetaSchedule(c=2, a=2), Alphabet(4))
        rng = np.random.default_rng(11)
        for _ in range(25):
            t = float(rng.uniform(0.05, 0.9))
            x1 = int(rng.integers(4))
            u1 = velocity_metric_conditional(path, t, x1)
            u2 = velocity_from_flux(flux_stable(path.pmf(t, x1),
                                                path.dpmf(t, x1)),
                                    path.pmf(t, x1))
            assert np.abs(u1.mat - u2.mat).max() <= 1e-10


class TestCoincidence:
    def test_uniform_mixture_velocities_agree(self):
        path = mixture_path(Pmf.uniform(4), LinearScheduler())
        rng = np.random.default_rng(12)
        for _ in range(25):
            t = float(rng.uniform(0.05, 0.95))
            x1 = int(rng.integers(4))
            p, dp = path.pmf(t, x1), path.dpmf(t, x1)
            u_ind = velocity_from_flux(flux_indicator(p, dp), p)
            u_st = velocity_from_flux(flux_stable(p, dp), p)
            assert np.abs(u_ind.mat - u_st.mat).max() <= 1e-10

    def test_nonuniform_mixture_velocities_differ(self):
        path = mixture_path(make_pmf([0.7, 0.2, 0.1]), LinearScheduler())
        t, x1 = 0.5, 0
        p, dp = path.pmf(t, x1), path.dpmf(t, x1)
        u_ind = velocity_from_flux(flux_indicator(p, dp), p)
        u_st = velocity_from_flux(flux_stable(p, dp), p)
        assert np.abs(u_ind.mat - u_st.mat).max() > 1e-3

    def test_mask_k2_velocities_agree(self):
        # binary alphabet: the literal uniform-weight formula coincides
        path = mask_mixture_path(Alphabet(2, mask_token=1))
        for t in (0.2, 0.5, 0.8):
            p, dp = path.pmf(t, 0), path.dpmf(t, 0)
            u_ind = velocity_from_flux(flux_indicator(p, dp), p, unsafe="zero")
            u_st = velocity_from_flux(flux_stable(p, dp), p)
            assert np.abs(u_ind.mat - u_st.mat).max() <= 1e-10

    def test_mask_k3_indicator_leaks(self):
        # beyond two tokens the literal formula sends mass to unsupported
        # tokens, so the velocities differ even on the reachable columns
        path = mask_mixture_path(Alphabet(3, mask_token=2))
        t, x1 = 0.5, 0
        p, dp = path.pmf(t, x1), path.dpmf(t, x1)
        u_ind = velocity_from_flux(flux_indicator(p, dp), p, unsafe="zero")
        u_st = velocity_from_flux(flux_stable(p, dp), p)
        assert u_ind.mat[1, 2] > 1e-3  # mask column feeds the unreachable token
        assert np.abs(u_ind.mat - u_st.mat).max() > 1e-3


class TestCorrector:
    def test_constant_potential_gives_zero(self):
        p = make_pmf([0.5, 0.3, 0.2])
        j = corrector_flux(p, np.ones(3), WeightSpec.stable())
        assert np.all(j.mat == 0.0)

    def test_hand_value(self):
        p = Pmf(np.array([0.7, 0.3]))
        f = np.array([-1.0, 1.0]) / p.weights
        j = corrector_flux(p, f, WeightSpec.stable())
        assert j.mat[1, 0] == pytest.approx(1.0)
        assert j.mat[0, 1] == pytest.approx(1.0)

    def test_divergence_exactly_zero(self):
        rng = np.random.default_rng(13)
        for _ in range(30):
            p, dp = random_p_dp(rng, 6)
            j = corrector_flux(p, dp / p.weights, WeightSpec.stable())
            assert np.all(divergence(j) == 0.0)
            assert np.array_equal(j.mat, j.mat.T)

    def test_generator_stationarity(self):
        rng = np.random.default_rng(14)
        for _ in range(30):
            p, dp = random_p_dp(rng, 5)
            j = corrector_flux(p, dp / p.weights, WeightSpec.stable())
            u = velocity_from_flux(j, p)
            assert np.abs(u.mat @ p.weights).max() <= 1e-10

    def test_asymmetric_weight_rejected(self):
        p = make_pmf([0.5, 0.5])
        w = np.array([[1.0, 2.0], [1.0, 1.0]])
        with pytest.raises(AsymmetricWeightError):
            corrector_flux(p, np.array([0.0, 1.0]), w)

    def test_bidirectional_vs_unidirectional(self):
        rng = np.random.default_rng(15)
        p, dp = random_p_dp(rng, 5)
        j_adv = flux_stable(p, dp)
        j_cor = corrector_flux(p, dp / p.weights, WeightSpec.stable())
        assert np.all(j_adv.mat * j_adv.mat.T == 0.0)
        active = j_cor.mat > 0
        assert np.array_equal(active, active.T)


class TestMarginalVelocity:
    def setup_method(self):
        self.q = make_toy(ToySpec("random_sparse", k=3, dims=2, seed=1,
                                  sparsity=0.7))
        self.path = mixture_path(Pmf.uniform(3), LinearScheduler())
        self.post = ExactPosterior(self.q, self.path)

    def test_delta_posterior_reduces_to_conditional(self):
        path = self.path

        class DeltaPost:
            dims = 2

            def prob(self, t, z, i):
                return Pmf.delta(1, 3)

        col = marginal_velocity(
            DeltaPost(), lambda t, z, x1: conditional_velocity_column(path, t, z, x1),
            np.array([0, 2]), 0, 0.4)
        want = conditional_velocity_column(path, 0.4, 0, 1)
        assert np.abs(col - want).max() <= 1e-12

    def test_closed_form_matches_generic(self):
        rng = np.random.default_rng(16)
        for _ in range(25):
            t = float(rng.uniform(0.05, 0.95))
            z = rng.integers(3, size=2)
            i = int(rng.integers(2))
            generic = marginal_velocity(
                self.post,
                lambda tt, zz, x1: conditional_velocity_column(
                    self.path, tt, zz, x1),
                z, i, t)
            closed = marginal_velocity_mixture(self.post, self.path.scheduler,
                                               z, i, t)
            assert np.abs(generic - closed).max() <= 1e-10

    def test_rate_conditions(self):
        rng = np.random.default_rng(17)
        for _ in range(25):
            t = float(rng.uniform(0.05, 0.95))
            z = rng.integers(3, size=2)
            col = marginal_velocity_mixture(self.post, self.path.scheduler,
                                            z, 0, t)
            assert abs(col.sum()) <= 1e-10
            off = np.delete(col, int(z[0]))
            assert off.min() >= -1e-12


class TestKineticEnergy:
    def test_geodesic_energy_value(self):
        br = ko_path(Pmf.uniform(2), Pmf.delta(0, 2))
        energy = integrated_kinetic_energy(br.pmf, br.dpmf)
        assert energy == pytest.approx(2 * (math.pi / 4) ** 2, abs=1e-3)

    def test_geodesic_beats_linear(self):
        br = ko_path(Pmf.uniform(2), Pmf.delta(0, 2))
        lin = mixture_path(Pmf.uniform(2), LinearScheduler())
        e_ko = integrated_kinetic_energy(br.pmf, br.dpmf)
        e_lin = integrated_kinetic_energy(lambda t: lin.pmf(t, 0),
                                          lambda t: lin.dpmf(t, 0))
        assert e_ko <= e_lin

    def test_infinite_weight_convention(self):
        # zero flux against an infinite weight contributes nothing
        p = Pmf(np.array([1.0, 0.0]))
        assert kinetic_energy(Flux(np.zeros((2, 2))), p, WeightSpec.stable()) == 0.0
        m = np.zeros((2, 2))
        m[0, 1] = 0.3
        assert kinetic_energy(Flux(m), p, WeightSpec.stable()) == math.inf


class TestRateConditionsRandomized:
    def test_thousand_random_cases(self):
        rng = np.random.default_rng(18)
        paths = [
            mixture_path(Pmf.uniform(4), LinearScheduler()),
            mixture_path(make_pmf([0.4, 0.3, 0.2, 0.1]),
                         scheduler_kinetic_optimal(
                             make_pmf([0.4, 0.3, 0.2, 0.1]))),
            metric_path(absolute_metric(), BetaSchedule(c=2, a=2), Alphabet(4)),
            mask_mixture_path(Alphabet(4, mask_token=3)),
        ]
        count = 0
        while count < 1000:
            path = paths[count % len(paths)]
            t = float(rng.uniform(0.02, 0.98))
            x1 = int(rng.integers(4))
            u = conditional_velocity_matrix(path, t, x1).mat
            off = u[~np.eye(4, dtype=bool)]
            assert off.min() >= -1e-12
            assert np.abs(u.sum(axis=0)).max() <= 1e-10
            count += 1
