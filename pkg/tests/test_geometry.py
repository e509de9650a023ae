import math

import numpy as np
import pytest

from nctorus.compression import (
    SpectralDecomposition,
    functional_calculus,
)
from nctorus.core import FourierElement, ThetaMatrix, TorusAlgebra, TruncationBox, delta
from nctorus.geometry import (
    CurvedGeometry,
    MetricValidationError,
    SandwichOperator,
    build_x_of_s,
    compute_nu,
    conjugation_identity_residual,
    sphere_quadrature,
    validate_and_invert_metric,
)


def identity_entries(d):
    return [
        [delta((0,) * d) if i == j else FourierElement(d, {}) for j in range(d)]
        for i in range(d)
    ]


def conformal_entries(h):
    d = h.dim
    zero = FourierElement(d, {})
    return [[h if i == j else zero for j in range(d)] for i in range(d)]


H = delta((0, 0)) + 0.3 * (delta((1, 0)) + delta((-1, 0)))


@pytest.fixture(scope="module")
def alg():
    return TorusAlgebra(ThetaMatrix.d2(0.5))


@pytest.fixture(scope="module")
def flat(alg):
    return CurvedGeometry.build(alg, identity_entries(2), TruncationBox(2, 6), validate_nu=True)


@pytest.fixture(scope="module")
def conformal(alg):
    # Generous element box: the axis-supported metric keeps all dense
    # kernels on 1d components, so this is cheap at radius 32.
    return CurvedGeometry.build(
        alg, conformal_entries(H), TruncationBox(2, 32, margin=4), validate_nu=True
    )


class TestMetricValidation:
    def test_identity_metric(self, alg, flat):
        m = flat.metric
        assert m.positivity_margin == pytest.approx(1.0, abs=1e-12)
        assert m.product_residual < 1e-14
        assert (m.inverse_entry(0, 0) - delta((0, 0))).norm_max() < 1e-13
        assert m.inverse_entry(0, 1).norm_max() < 1e-13

    def test_conformal_inverse_against_calculus(self, alg, conformal):
        box = conformal.metric.box
        oracle = functional_calculus(alg, H, lambda w: 1.0 / w, box, spectrum_floor=0.0)
        diff = conformal.metric.inverse_entry(0, 0) - oracle.restricted(box.inner_radius)
        assert diff.norm_l2() < 1e-9
        assert conformal.metric.product_residual < 1e-9
        assert conformal.metric.inverse_entry(0, 1).norm_max() < 1e-12

    def test_rejects_non_self_adjoint(self, alg):
        entries = identity_entries(2)
        entries[0][1] = 1j * delta((1, 0))
        entries[1][0] = 1j * delta((1, 0))
        with pytest.raises(MetricValidationError, match="self-adjoint"):
            validate_and_invert_metric(alg, entries, TruncationBox(2, 4))

    def test_rejects_non_positive(self, alg):
        entries = identity_entries(2)
        entries[0][0] = -1.0 * delta((0, 0))
        with pytest.raises(MetricValidationError, match="positive"):
            validate_and_invert_metric(alg, entries, TruncationBox(2, 4))


class TestSphereQuadrature:
    @pytest.mark.parametrize("d", [2, 3, 4])
    def test_total_weight_is_sphere_volume(self, d):
        _, w = sphere_quadrature(d, polar_nodes=24, azimuth_nodes=32)
        vol = 2 * math.pi ** (d / 2) / math.gamma(d / 2)
        assert w.sum() == pytest.approx(vol, rel=1e-12)

    def test_polynomial_exactness_d3(self):
        dirs, w = sphere_quadrature(3, polar_nodes=16, azimuth_nodes=16)
        # int_{S^2} u_1^2 = 4 pi / 3
        val = (w * dirs[:, 0] ** 2).sum()
        assert val == pytest.approx(4 * math.pi / 3, rel=1e-12)


class TestComputeNu:
    def test_flat_nu_is_one(self, flat):
        assert (flat.nu.nu - delta((0, 0))).norm_l2() < 1e-10
        assert flat.nu.quadrature_residual < 1e-10
        assert flat.nu.sqrt_residual < 1e-12
        assert flat.nu.unit_residual < 1e-12

    def test_conformal_nu_equals_h(self, conformal):
        assert (conformal.nu.nu - H).norm_l2() < 1e-8
        assert conformal.nu.sqrt_residual < 1e-11
        assert conformal.nu.unit_residual < 1e-12

    def test_constant_metric(self, alg):
        c = 2.5
        entries = [[c * delta((0, 0)), FourierElement(2, {})], [FourierElement(2, {}), c * delta((0, 0))]]
        geom = CurvedGeometry.build(alg, entries, TruncationBox(2, 4), validate_nu=True)
        assert (geom.nu.nu - c * delta((0, 0))).norm_l2() < 1e-10

    def test_flat_d3(self):
        alg3 = TorusAlgebra(ThetaMatrix.zero(3))
        metric = validate_and_invert_metric(alg3, identity_entries(3), TruncationBox(3, 2))
        nu = compute_nu(alg3, metric, TruncationBox(3, 2), polar_nodes=16, azimuth_nodes=16, hermite_nodes=16)
        assert (nu.nu - delta((0, 0, 0))).norm_l2() < 1e-10


class TestXofS:
    def test_flat_values(self, flat):
        assert (flat.x_of_s((1, 0)) - delta((0, 0))).norm_max() < 1e-14
        s = (1.5, -2.0)
        assert (flat.x_of_s(s) - (1.5 ** 2 + 2.0 ** 2) * delta((0, 0))).norm_max() < 1e-13

    def test_conformal_value(self, alg, conformal):
        hinv = conformal.metric.inverse_entry(0, 0)
        s = (0.7, -1.1)
        expect = (0.7 ** 2 + 1.1 ** 2) * hinv
        assert (conformal.x_of_s(s) - expect).norm_l2() < 1e-12

    def test_homogeneity_exact(self, conformal):
        s = (0.3, 0.9)
        lhs = conformal.x_of_s(tuple(2 * v for v in s))
        rhs = 4.0 * conformal.x_of_s(s)
        assert (lhs - rhs).norm_max() < 1e-15

    def test_positive_compression(self, conformal):
        box = TruncationBox(2, 8)
        dec = SpectralDecomposition.from_element(
            conformal.alg, conformal.x_of_s((1.0, 0.5)), box
        )
        assert dec.eigenvalues[0] > 0


class TestVOperator:
    def test_flat_reduces_to_derivations(self, alg, flat):
        # A_i = 2 D_i at the flat metric: V(s) e_n = 2 <s, n> e_n.
        s = (0.8, -0.4)
        for n in [(1, 0), (2, 3), (-1, 4)]:
            out = flat.V_op(s).apply(alg, delta(n))
            expect = 2 * (s[0] * n[0] + s[1] * n[1]) * delta(n)
            assert (out - expect).norm_l2() < 1e-12

    def test_zero_vector_gives_zero_operator(self, alg, flat):
        out = flat.V_op((0.0, 0.0)).apply(alg, delta((2, 1)))
        assert out.norm_max() == 0.0

    def test_annihilates_constants_flat(self, alg, flat):
        assert flat.V_op((1.0, 2.0)).apply(alg, delta((0, 0))).norm_l2() < 1e-12

    def test_self_adjoint_compression(self, alg, conformal):
        box = TruncationBox(2, 6)
        mat = conformal.V_op((1.0, -0.5)).compress(alg, box)
        defect = abs(mat - mat.getH()).max()
        assert defect < 1e-10


class TestAg:
    def test_flat_is_laplacian(self, alg, flat):
        for n in [(0, 0), (1, 0), (2, -3)]:
            out = flat.Ag.apply(alg, delta(n))
            expect = float(n[0] ** 2 + n[1] ** 2) * delta(n)
            assert (out - expect).norm_l2() < 1e-11

    def test_kernel_vector(self, alg, conformal):
        # A_g(nu^{1/2}) = 0: the inner multiplier turns nu^{1/2} into 1.
        out = conformal.Ag.apply(alg, conformal.nu.nu_sqrt)
        assert out.norm_l2() < 1e-9

    def test_conformal_factorisation(self, alg, conformal):
        # A_g = lambda(h^{-1/2}) Delta lambda(h^{-1/2}) for g = h * id.
        box = TruncationBox(2, 20, margin=12)
        hm = functional_calculus(
            alg, H, lambda w: 1.0 / np.sqrt(w), conformal.metric.box, spectrum_floor=0.0
        )
        terms = tuple(
            (1.0 + 0.0j, (("mul", hm), ("deriv", k), ("deriv", k), ("mul", hm)))
            for k in range(2)
        )
        rhs_op = SandwichOperator(2, terms)
        lhs = conformal.Ag.compress(alg, box).toarray()
        rhs = rhs_op.compress(alg, box).toarray()
        inner = box.inner_mask()
        diff = np.abs(lhs - rhs)[np.ix_(inner, inner)]
        assert diff.max() < 1e-9

    def test_compression_hermitian_psd(self, alg, conformal):
        box = TruncationBox(2, 8)
        mat = conformal.Ag.compress(alg, box)
        dec = SpectralDecomposition.from_matrix(mat, box, hermiticity_tol=1e-10)
        assert dec.eigenvalues[0] >= -1e-10


class TestConjugationIdentity:
    def test_flat_basis_probes(self, alg, flat):
        probes = [delta((0, 0)), delta((1, 2)), delta((-2, 1))]
        assert conjugation_identity_residual(flat, (1, 0), probes) < 1e-12

    def test_zero_mode_trivial(self, alg, conformal):
        probes = [delta((1, 1))]
        assert conjugation_identity_residual(conformal, (0, 0), probes) < 1e-12

    def test_conformal_random_probes(self, alg, conformal):
        rng = np.random.default_rng(21)
        probes = []
        for _ in range(6):
            coeffs = {
                tuple(rng.integers(-2, 3, size=2)): complex(rng.normal(), rng.normal())
                for _ in range(4)
            }
            probes.append(FourierElement(2, coeffs))
        res = conjugation_identity_residual(conformal, (1, 1), probes)
        assert res < 1e-11
