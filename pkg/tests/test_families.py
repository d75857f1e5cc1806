import math

import numpy as np
import pytest
from scipy import integrate, special

from diffcoarse import families as F
from diffcoarse import kinetics as K
from diffcoarse.exceptions import CapacityError, DomainError


def phi(n, x):
    return x**n * np.exp(-x) / math.factorial(n)


class TestPolyExp:
    def test_rhs_examples(self):
        assert F.poly_exp_rhs(F.PolyExpCoeffs(1.0, [0.0, 1.0]))[1] == pytest.approx(-0.5, abs=1e-15)
        assert np.all(F.poly_exp_rhs(F.PolyExpCoeffs(1.0, [1.0, 0.0])) == 0.0)
        d = F.poly_exp_rhs(F.PolyExpCoeffs(1.0, [0.0, 0.0, 1.0]))
        assert d[1] == pytest.approx(0.375, abs=1e-15)
        assert d[2] == pytest.approx(-0.75, abs=1e-15)

    def test_rhs_is_scale_free(self):
        a = F.poly_exp_rhs(F.PolyExpCoeffs(1.0, [0.2, 0.3, 0.5]))
        b = F.poly_exp_rhs(F.PolyExpCoeffs(7.5, [0.2, 0.3, 0.5]))
        assert np.array_equal(a, b)

    @pytest.mark.parametrize("a,b", [(0, 0), (1, 2), (3, 1), (2, 4)])
    def test_tensor_against_quadrature(self, a, b):
        T = F.poly_exp_tensor(4)
        for x in (0.0, 0.7, 3.0):
            direct = 2 * integrate.quad(lambda y: phi(a, y) * phi(b, x + y), 0, np.inf, epsabs=1e-13)[0]
            closed = sum(T[k, a, b] * phi(k, x) for k in range(5))
            assert closed == pytest.approx(direct, abs=1e-11)

    def test_capacity(self):
        with pytest.raises(CapacityError):
            F.PolyExpCoeffs(1.0, np.full(34, 1 / 34))
        with pytest.raises(CapacityError):
            F.poly_exp_tensor(33)

    def test_normalization_required(self):
        with pytest.raises(DomainError):
            F.PolyExpCoeffs(1.0, [0.5, 0.6])

    def test_exact_n1_solution(self):
        taus, P = F.poly_exp_evolve(F.PolyExpCoeffs(1.0, [0.0, 1.0]), 198.0)
        assert P[-1, 1] == pytest.approx(0.01, abs=1e-6)
        assert taus[-1] * P[-1, 1] == pytest.approx(2.0 * 198 / 200, rel=1e-9)

    @pytest.mark.parametrize("N", [2, 3])
    def test_asymptote(self, N):
        taus, P = F.poly_exp_evolve(F.PolyExpCoeffs(1.0, np.full(N + 1, 1 / (N + 1))), 2000.0, d_tau=0.1)
        for n in range(1, N + 1):
            ratio = P[-1, n] / F.poly_exp_asymptote(N, n, taus[-1])
            assert ratio == pytest.approx(1.0, abs=0.05)

    def test_normalization_conserved(self):
        taus, P = F.poly_exp_evolve(F.PolyExpCoeffs(1.0, [0.1, 0.2, 0.3, 0.4]), 50.0)
        assert np.max(np.abs(P.sum(axis=1) - 1.0)) < 1e-8 * 50

    def test_mean(self):
        s = F.PolyExpCoeffs(2.0, [0.5, 0.5])
        assert s.mean() == pytest.approx(0.75)
        g = F.family_render(s, F.GridSpec(20.0, 4001))
        assert g.mean() == pytest.approx(0.75, abs=1e-5)

    def test_render_exponential(self):
        g = F.family_render(F.PolyExpCoeffs(1.0, [1.0]), F.GridSpec(10.0, 101))
        assert np.allclose(g.values, np.exp(-g.x), rtol=1e-14)


class TestLaguerre:
    def test_delta_is_fixed(self):
        s = F.LaguerreCoeffs.from_coefficients([1.0, 0.0, 0.0, 0.0])
        assert np.array_equal(F.laguerre_step(s).A, s.A)

    def test_hand_example(self):
        out = F.laguerre_step(F.LaguerreCoeffs.from_coefficients([0.9, 0.1]))
        assert out.A == pytest.approx([0.91, 0.09], abs=1e-15)
        assert out.A.sum() == pytest.approx(1.0, abs=1e-15)

    def test_mass_identity(self):
        A = np.exp(-0.7 * np.arange(65))
        s = F.LaguerreCoeffs.from_coefficients(A / A.sum())
        assert abs(1 - F.laguerre_step(s).A.sum()) < 1e-12

    def test_sum_squares(self):
        # sum A' = (sum A)^2 for unnormalized coefficients
        A = np.array([0.3, 0.2, 0.1, 0.05])
        out = F.laguerre_step(F.LaguerreCoeffs.from_coefficients(A))
        assert out.A.sum() == pytest.approx(A.sum() ** 2, rel=1e-14)
        assert out.mass_drift == pytest.approx(1 - A.sum() ** 2, rel=1e-12)

    def test_gain_identity_on_grid(self):
        # the map is exactly the gain term in the Laguerre basis
        A = np.array([0.6, 0.25, 0.15])
        s = F.LaguerreCoeffs.from_coefficients(A)
        g = F.laguerre_render(s, F.GridSpec(40.0, 4001))
        gain = 2 * K.collision_integrals(g)
        target = F.laguerre_render(F.laguerre_step(s), F.GridSpec(40.0, 4001)).values
        assert np.max(np.abs(gain - target)) < 1e-4

    def test_render_examples(self):
        spec = F.GridSpec(10.0, 101)
        x = np.linspace(0, 10, 101)
        assert np.allclose(F.laguerre_render(F.LaguerreCoeffs([1.0]), spec).values, np.exp(-x))
        assert np.allclose(F.laguerre_render(F.LaguerreCoeffs([0.0, 1.0]), spec).values, (2 * x - 1) * np.exp(-x))

    def test_render_matches_scipy(self):
        A = np.array([0.4, 0.3, 0.2, 0.1, 0.05, -0.05])
        x = np.linspace(0, 30, 301)
        ref = sum((-1) ** n * a * special.eval_laguerre(n, 2 * x) for n, a in enumerate(A)) * np.exp(-x)
        got = F.laguerre_render(F.LaguerreCoeffs(A), F.GridSpec(30.0, 301)).values
        assert np.allclose(got, ref, rtol=1e-10, atol=1e-14)

    def test_negative_tail_flag(self):
        # leading coefficient of x^M has sign (-1)^M (-1)^M = +; make it negative
        bad = F.laguerre_render(F.LaguerreCoeffs([1.2, 0.0, -0.2]), F.GridSpec(40.0, 401))
        assert not F.tail_is_exponential(bad)
        good = F.laguerre_render(F.LaguerreCoeffs([0.7, 0.2, 0.1]), F.GridSpec(40.0, 401))
        assert F.tail_is_exponential(good)

    def test_overflow(self):
        with pytest.raises(CapacityError):
            F.laguerre_render(F.LaguerreCoeffs(np.full(400, 1 / 400)), F.GridSpec(5000.0, 101))

    def test_mean(self):
        s = F.LaguerreCoeffs([0.7, 0.2, 0.1])
        g = F.laguerre_render(s, F.GridSpec(60.0, 6001))
        assert g.mean() * g.mass() == pytest.approx(s.mean(), abs=1e-5)

    def test_asymptote(self):
        N = 2
        taus, traj = F.laguerre_evolve(F.LaguerreCoeffs.from_coefficients([0.4, 0.3, 0.3]), 200.0, record_every=100)
        for k in (1, 2):
            assert traj[-1, k] / F.laguerre_asymptote(N, k, taus[-1]) == pytest.approx(1.0, abs=0.1)


class TestExpMixture:
    def test_single_rate_is_fixed(self):
        assert np.all(F.expmix_rhs(F.ExpMixture([1.0, 2.0, 3.0], [1.0, 0.0, 0.0])) == 0.0)

    def test_hand_example(self):
        d = F.expmix_rhs(F.ExpMixture([1.0, 2.0], [0.5, 0.5]))
        assert d == pytest.approx([1 / 12, -1 / 12], abs=1e-15)

    def test_conservation_exact(self):
        taus, W = F.expmix_evolve(F.ExpMixture([0.5, 1.0, 3.0], [0.2, 0.5, 0.3]), 20.0)
        assert np.max(np.abs(W.sum(axis=1) - 1.0)) < 1e-12

    @pytest.mark.parametrize("weights", [[0.5, 0.3, 0.2], [0.05, 0.05, 0.9], [0.8, 0.1, 0.1]])
    def test_stability_ordering(self, weights):
        rates = np.array([1.0, 2.0, 4.0])
        taus, W = F.expmix_evolve(F.ExpMixture(rates, weights), 50.0, record_every=10)
        sel = (taus >= 20) & (taus <= 50)
        assert W[-1, 0] > 0.99
        for k in (1, 2):
            slope = np.polyfit(taus[sel], np.log(W[sel, k]), 1)[0]
            target = -(rates[k] - rates[0]) / (rates[k] + rates[0])
            assert slope == pytest.approx(target, rel=0.05)

    def test_render(self):
        g = F.family_render(F.ExpMixture([1.0, 2.0], [0.5, 0.5]), F.GridSpec(10.0, 101))
        assert np.allclose(g.values, 0.5 * np.exp(-g.x) + np.exp(-2 * g.x), rtol=1e-14)

    def test_validation(self):
        with pytest.raises(DomainError):
            F.ExpMixture([2.0, 1.0], [0.5, 0.5])
        with pytest.raises(DomainError):
            F.ExpMixture([1.0, 2.0], [0.5, 0.4])


class TestExpIntegral:
    def test_spike_is_fixed(self):
        lg = F.ExpIntegral.geometric_grid(1.0)
        w = F._trap_weights(lg)
        f = np.zeros_like(lg)
        f[0] = 1.0 / w[0]
        assert np.all(F.expintegral_rhs(F.ExpIntegral(lg, f)) == 0.0)

    def test_two_spikes_signs(self):
        lg = np.array([0.5, 1.0, 1.5, 2.0, 2.5])
        f = np.array([0.0, 1.0, 0.0, 1.0, 0.0])
        f = f / np.dot(F._trap_weights(lg), f)
        d = F.expintegral_rhs(F.ExpIntegral(lg, f))
        assert d[1] > 0 and d[3] < 0
        assert d[0] == d[2] == d[4] == 0

    def test_integral_conserved(self):
        s = F.ExpIntegral.from_function(lambda l: np.exp(-(l - 1.0)))
        taus, traj = F.expintegral_evolve(s, 10.0, record_every=100)
        totals = traj @ s.quadrature_weights
        assert np.max(np.abs(totals - 1.0)) < 1e-8 * 10

    def test_decay_rate(self):
        s = F.ExpIntegral.from_function(lambda l: np.exp(-(l - 1.0)))
        taus, traj = F.expintegral_evolve(s, 60.0, d_tau=0.02, record_every=50)
        lg = s.lambda_grid
        i = int(np.searchsorted(lg, 3.0))
        sel = taus >= 30
        slope = np.polyfit(taus[sel], np.log(traj[sel, i]), 1)[0]
        assert slope == pytest.approx(-(lg[i] - lg[0]) / (lg[i] + lg[0]), rel=0.05)

    def test_render_matches_mixture(self):
        s = F.ExpIntegral.from_function(lambda l: 1.0 / l)
        g = F.family_render(s, F.GridSpec(20.0, 20001))
        assert g.mass() == pytest.approx(1.0, abs=1e-3)
        assert s.mean() == pytest.approx(g.mean(), rel=1e-3)

    def test_validation(self):
        with pytest.raises(DomainError):
            F.ExpIntegral([1.0, 3.0], [1.0, 1.0])
        with pytest.raises(DomainError):
            F.ExpIntegral([1.0, 2.0], [2.002, -1e-3])


class TestSerialization:
    @pytest.mark.parametrize(
        "state",
        [
            F.PolyExpCoeffs(2.0, [0.25, 0.75]),
            F.LaguerreCoeffs([0.7, 0.2, 0.1], 0.0),
            F.ExpMixture([1.0, 3.0], [0.4, 0.6]),
            F.ExpIntegral.from_function(lambda l: np.exp(-l), 1.0, n=16),
        ],
    )
    def test_roundtrip(self, state):
        obj = F.state_to_json(state)
        back = F.state_from_json(obj)
        assert F.state_to_json(back) == obj
        assert obj["family"] in ("polyexp", "laguerre", "expsum", "expint")

    def test_unknown_tag(self):
        with pytest.raises(DomainError):
            F.state_from_json({"family": "other"})

    def test_trajectory_csv(self, tmp_path):
        taus, P = F.poly_exp_evolve(F.PolyExpCoeffs(1.0, [0.5, 0.5]), 0.1)
        F.write_trajectory_csv(tmp_path / "t.csv", taus, P, "p")
        lines = (tmp_path / "t.csv").read_text().splitlines()
        assert lines[0] == "tau,p0,p1"
        assert len(lines) == len(taus) + 1


class TestCrossRepresentation:
    """Family dynamics then render equals render then grid evolution."""

    @pytest.mark.parametrize(
        "state,evolve,rebuild",
        [
            (F.PolyExpCoeffs(1.0, [0.2, 0.3, 0.5]), F.poly_exp_evolve, lambda p: F.PolyExpCoeffs(1.0, p / p.sum())),
            (F.LaguerreCoeffs.from_coefficients([0.7, 0.2, 0.1]), F.laguerre_evolve, F.LaguerreCoeffs.from_coefficients),
            (F.ExpMixture([1.0, 2.0], [0.5, 0.5]), F.expmix_evolve, lambda a: F.ExpMixture([1.0, 2.0], a / a.sum())),
        ],
    )
    def test_commutes(self, state, evolve, rebuild):
        spec = F.GridSpec(40.0, 1001)
        g0 = F.family_render(state, spec)
        g0 = g0.with_values(g0.values / g0.mass(), refit_tail=False)
        _, gT = K.evolve(g0, 2.0, observer_stride=100, d_tau=0.02)
        _, traj = evolve(state, 2.0, d_tau=0.02)
        rendered = F.family_render(rebuild(traj[-1]), spec)
        tol = K.fixed_point_residual(K.exponential_grid(1.0, 40.0, 1001))
        assert np.max(np.abs(rendered.values - gT.values)) <= 5 * tol
