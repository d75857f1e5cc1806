import numpy as np
import pytest
from scipy import integrate

from diffcoarse import families as F
from diffcoarse import kinetics as K
from diffcoarse import spectral as S
from diffcoarse.exceptions import DomainError, SingularityError

EPS = 1e-3


def resolved(cf, eps=EPS, **kw):
    """Transform keyword set whose node spacing resolves eps."""
    lam = S.singularity_report(cf).mgf_radius
    k_max = 50 * lam
    return dict(epsilon=eps, k_max=k_max, n_quad=int(8 * k_max / eps) + 1, **kw)


def tolerance(cf, eps=EPS):
    return 2 * eps / S.singularity_report(cf).mgf_radius


def fourier(p, z):
    re = integrate.quad(p, 0, np.inf, weight="cos", wvar=z)[0] if z else integrate.quad(p, 0, np.inf)[0]
    im = integrate.quad(p, 0, np.inf, weight="sin", wvar=z)[0] if z else 0.0
    return re + 1j * im


class TestEvaluate:
    def test_examples(self):
        assert S.evaluate(S.exponential(1.0), 0) == 1
        assert S.evaluate(S.exponential(1.0), 1) == pytest.approx(0.5 + 0.5j, abs=1e-15)
        assert S.evaluate(S.GammaType(1.0, 1.0), 1) == pytest.approx(0.5j, abs=1e-15)

    @pytest.mark.parametrize(
        "cf",
        [
            S.exponential(2.0),
            S.from_poly_exp(F.PolyExpCoeffs(1.5, [0.2, 0.3, 0.5])),
            S.from_mixture([1.0, 3.0], [0.25, 0.75]),
            S.GammaType(0.5, 2.0),
        ],
    )
    def test_normalized_and_hermitian(self, cf):
        assert S.evaluate(cf, 0) == pytest.approx(1.0, abs=1e-14)
        for z in (0.3, 1.0, 7.0):
            assert S.evaluate(cf, -z) == pytest.approx(np.conj(S.evaluate(cf, z)), abs=1e-14)

    def test_branch_cut_normalized(self):
        st = F.ExpIntegral.from_function(lambda l: np.exp(-l), 1.0)
        cf = S.BranchCut(st.lambda_grid, st.f)
        assert abs(S.evaluate(cf, 0) - 1.0) < 1e-12

    @pytest.mark.parametrize(
        "state",
        [F.PolyExpCoeffs(1.0, [0.2, 0.3, 0.5]), F.PolyExpCoeffs(2.0, [0.5, 0.5])],
    )
    def test_matches_x_space(self, state):
        cf = S.from_poly_exp(state)
        dens = lambda x: F._poly_density(state.lam, state.p, np.atleast_1d(x))[0]
        for z in (0.0, 0.5, -2.0, 10.0):
            assert S.evaluate(cf, z) == pytest.approx(fourier(dens, z), abs=1e-6)

    def test_mixture_matches_x_space(self):
        cf = S.from_mixture([1.0, 2.0], [0.5, 0.5])
        dens = lambda x: 0.5 * np.exp(-x) + np.exp(-2 * x)
        for z in (0.0, 1.0, -5.0):
            assert S.evaluate(cf, z) == pytest.approx(fourier(dens, z), abs=1e-6)

    def test_singular_points(self):
        with pytest.raises(SingularityError) as info:
            S.evaluate(S.exponential(2.0), -2j)
        assert info.value.location == -2j and info.value.kind == "pole"
        with pytest.raises(SingularityError) as info:
            S.evaluate(S.GammaType(0.5, 1.0), -3j)
        assert info.value.kind == "branch"
        lg = np.geomspace(1.0, 10.0, 8)
        with pytest.raises(SingularityError):
            S.evaluate(S.BranchCut(lg, np.ones(8)), -4j)

    def test_continuation_off_axis(self):
        assert S.evaluate(S.exponential(1.0), -0.5j) == pytest.approx(2.0)


class TestSingularity:
    def test_exponential(self):
        r = S.singularity_report(S.exponential(3.0))
        assert (r.location, r.kind, r.order, r.mgf_radius) == (-3j, "pole", 1, 3.0)

    @pytest.mark.parametrize("N", [1, 2, 5])
    def test_poly_exp_order(self, N):
        p = np.zeros(N + 1)
        p[0], p[-1] = 0.5, 0.5
        r = S.singularity_report(S.from_poly_exp(F.PolyExpCoeffs(1.0, p)))
        assert r.order == N + 1 and r.kind == "pole"

    def test_branch(self):
        lg = np.geomspace(0.7, 35.0, 16)
        r = S.singularity_report(S.BranchCut(lg, np.ones(16)))
        assert r.kind == "branch" and r.location == -0.7j

    def test_gamma(self):
        assert S.singularity_report(S.GammaType(2.0, 1.0)).order == 3
        assert S.singularity_report(S.GammaType(1.5, 1.0)).kind == "branch"

    @pytest.mark.parametrize(
        "state",
        [F.PolyExpCoeffs(1.0, [0.5, 0.5]), F.ExpMixture([0.5, 2.0], [0.3, 0.7])],
    )
    def test_radius_matches_tail_slope(self, state):
        cf = S.from_poly_exp(state) if isinstance(state, F.PolyExpCoeffs) else S.from_mixture(state.rates, state.weights)
        lam = S.singularity_report(cf).mgf_radius
        g = F.family_render(state, F.GridSpec(80.0 / lam, 4001))
        assert g.tail_rate == pytest.approx(lam, rel=0.02)


class TestTransform:
    def test_contour_sign_calibration(self):
        assert S.contour_sign() == -1

    def test_exponential_examples(self):
        cf = S.exponential(1.0)
        kw = resolved(cf)
        assert S.collision_transform(cf, 0.0, **kw) == pytest.approx(1.0, abs=tolerance(cf))
        assert S.collision_transform(cf, 2.0, **kw) == pytest.approx(1 / (1 - 2j), abs=tolerance(cf))

    @pytest.mark.parametrize("lam", [0.5, 1.0, 2.0])
    def test_exponential_defect(self, lam):
        cf = S.exponential(lam)
        assert S.steady_state_defect(cf, **resolved(cf)) < tolerance(cf)

    @pytest.mark.parametrize(
        "cf", [S.GammaType(1.0, 1.0), S.from_mixture([1.0, 2.0], [0.5, 0.5])], ids=["gamma", "mixture"]
    )
    def test_non_fixed_points(self, cf):
        assert S.steady_state_defect(cf, **resolved(cf)) > 10 * tolerance(cf)

    def test_gamma_against_x_space_oracle(self):
        # Gamma(2,1): 2 int y e^-y (x+y) e^-(x+y) dy = (1 + x) e^-x / 2
        cf = S.GammaType(1.0, 1.0)
        kw = resolved(cf)
        for z in (0.0, 1.0, -1.0, 5.0):
            w = 1.0 / (1.0 - 1j * z)
            oracle = 0.5 * (w + w * w)
            assert S.collision_transform(cf, z, **kw) == pytest.approx(oracle, abs=tolerance(cf))
        # gain conserves mass, so z = 0 is not a detector
        assert abs(S.collision_transform(cf, 0.0, **kw) - 1.0) < tolerance(cf)
        assert abs(S.collision_transform(cf, 1.0, **kw) - S.evaluate(cf, 1.0)) > 0.2

    def test_mixture_against_grid_gain(self):
        cf = S.from_mixture([1.0, 2.0], [0.5, 0.5])
        g = F.family_render(F.ExpMixture([1.0, 2.0], [0.5, 0.5]), F.GridSpec(40.0, 8001))
        gain = 2 * K.collision_integrals(g)
        w = g.trapezoid_weights()
        kw = resolved(cf)
        for z in (0.0, 1.0, 5.0):
            ft = np.sum(w * gain * np.exp(1j * z * g.x))
            assert S.collision_transform(cf, z, **kw) == pytest.approx(ft, abs=tolerance(cf))

    def test_defect_shrinks_with_epsilon(self):
        cf = S.exponential(1.0)
        d = [S.steady_state_defect(cf, **resolved(cf, eps)) for eps in (1e-2, 1e-3)]
        assert d[1] < d[0] / 5

    def test_parameter_errors(self):
        cf = S.exponential(1.0)
        with pytest.raises(DomainError):
            S.collision_transform(cf, 0.0, epsilon=0.0)
        with pytest.raises(DomainError):
            S.collision_transform(cf, 0.0, epsilon=0.5)
        with pytest.raises(DomainError, match="k_max"):
            S.collision_transform(cf, 0.0, k_max=2.0)
        with pytest.raises(DomainError):
            S.collision_transform(cf, 3.0, k_max=2.0)
        with pytest.raises(DomainError):
            S.collision_transform(cf, 1j)


class TestIO:
    @pytest.mark.parametrize(
        "cf",
        [
            S.from_mixture([1.0, 2.0], [0.5, 0.5]),
            S.GammaType(1.5, 2.0),
            S.BranchCut(np.geomspace(1.0, 50.0, 8), np.linspace(1.0, 0.1, 8)),
        ],
    )
    def test_json_roundtrip(self, cf):
        back = S.charfn_from_json(S.charfn_to_json(cf))
        for z in (0.0, 1.3):
            assert S.evaluate(back, z) == S.evaluate(cf, z)

    def test_defect_csv(self, tmp_path):
        cf = S.exponential(1.0)
        rows = S.defect_scan(cf, [0.0, 1.0])
        S.write_defect_csv(tmp_path / "d.csv", rows)
        lines = (tmp_path / "d.csv").read_text().splitlines()
        assert lines[0] == "z,abs_phi,abs_transform,defect"
        assert len(lines) == 3
