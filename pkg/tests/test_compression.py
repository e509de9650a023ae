import numpy as np
import pytest
import scipy.special

from nctorus.compression import (
    ResolventPoleError,
    ResourceCapError,
    SingularCompressionError,
    SpectralDecomposition,
    SpectrumDomainError,
    component_of,
    compress_left_mult,
    element_inverse,
    element_to_vector,
    functional_calculus,
    resolvent_apply,
    vector_to_element,
)
from nctorus.core import FourierElement, ThetaMatrix, TorusAlgebra, TruncationBox, delta


@pytest.fixture
def alg():
    return TorusAlgebra(ThetaMatrix.d2(0.5))


@pytest.fixture
def alg0():
    return TorusAlgebra(ThetaMatrix.zero(2))


def fft_coefficients(symbol, orders, samples=4096):
    """Fourier coefficients of a smooth 2pi-periodic scalar symbol."""
    t = 2 * np.pi * np.arange(samples) / samples
    spec = np.fft.fft(symbol(t)) / samples
    return {k: spec[k % samples] for k in orders}


class TestCompressLeftMult:
    def test_identity(self, alg):
        box = TruncationBox(2, 2)
        op = compress_left_mult(alg, delta((0, 0)), box)
        assert np.array_equal(op.dense(), np.eye(box.size))

    def test_shift_structure_and_phases(self, alg):
        # Left multiplication by e_{(0,1)} shifts the second coordinate and
        # multiplies column q by exp(-i theta q_1); columns at q_2 = N drop out.
        box = TruncationBox(2, 1)
        op = compress_left_mult(alg, delta((0, 1)), box).dense()
        pts = box.points()
        for qi, q in enumerate(pts):
            target = q + np.array([0, 1])
            col = op[:, qi]
            if abs(target[1]) > 1:
                assert np.all(col == 0)
            else:
                pi = box.index_of(target[None, :])[0]
                assert col[pi] == pytest.approx(np.exp(-0.5j * q[0]), abs=1e-15)
                assert np.count_nonzero(col) == 1

    def test_hermitian_for_self_adjoint(self, alg):
        h = delta((0, 0)) + 0.3 * (delta((1, 0)) + delta((-1, 0)))
        assert alg.is_self_adjoint(h)
        op = compress_left_mult(alg, h, TruncationBox(2, 4))
        assert op.hermiticity_defect() <= 1e-13

    def test_product_locality(self, alg):
        # compress(a) compress(b) agrees with compress(ab) on the inner box
        # when the margin covers the support radii.
        rng = np.random.default_rng(10)
        box = TruncationBox(2, 6, margin=2)
        a = FourierElement(2, {(1, 0): 0.4 + 0.1j, (0, -1): -0.2j, (0, 0): 1.0})
        b = FourierElement(2, {(-1, 0): 0.5, (1, 1): 0.3 - 0.2j})
        prod = compress_left_mult(alg, a, box).matrix @ compress_left_mult(alg, b, box).matrix
        direct = compress_left_mult(alg, alg.mul(a, b), box).matrix
        inner = box.inner_mask()
        diff = np.asarray((prod - direct).todense())[np.ix_(inner, inner)]
        # exact up to the rounding of exp(a) exp(b) vs exp(a + b)
        assert np.abs(diff).max() < 1e-14

    def test_locality_of_application(self, alg):
        # For v supported in the inner box, the compressed action equals the
        # exact product on the whole box.
        box = TruncationBox(2, 5, margin=2)
        a = FourierElement(2, {(1, 1): 0.7, (-2, 0): 0.1j})
        v = FourierElement(2, {(1, 0): 1.5, (-3, -3): 2.0})
        out = compress_left_mult(alg, a, box).matrix @ element_to_vector(v, box)
        exact = alg.mul(a, v)
        assert (vector_to_element(out, box) - exact).norm_max() < 1e-15


class TestSpectralDecomposition:
    def test_reconstruction_and_order(self, alg):
        h = delta((0, 0)) + 0.3 * (delta((1, 0)) + delta((-1, 0))) + 0.1 * (
            delta((0, 1)) + delta((0, -1))
        )
        box = TruncationBox(2, 3)
        mat = compress_left_mult(alg, h, box).matrix
        dec = SpectralDecomposition.from_matrix(mat, box)
        rec = dec.matrix()
        scale = np.abs(mat.toarray()).max()
        assert np.abs(rec - mat.toarray()).max() <= 1e-10 * scale
        assert np.all(np.diff(dec.eigenvalues) >= 0)
        q = dec.unitary()
        assert np.abs(q @ q.conj().T - np.eye(box.size)).max() < 1e-12

    def test_asymmetry_rejected(self, alg):
        box = TruncationBox(2, 2)
        mat = compress_left_mult(alg, delta((1, 0)), box).matrix
        with pytest.raises(ValueError, match="asymmetry"):
            SpectralDecomposition.from_matrix(mat, box)

    def test_resource_cap(self, alg):
        box = TruncationBox(2, 4)
        mat = compress_left_mult(alg, delta((0, 0)), box).matrix
        with pytest.raises(ResourceCapError):
            SpectralDecomposition.from_matrix(mat, box, max_rows=10)

    def test_component_restriction(self, alg):
        # An axis-supported element decouples into lines: the unit's
        # component is a single line of 2N+1 points.
        h = delta((0, 0)) + 0.25 * (delta((1, 0)) + delta((-1, 0)))
        box = TruncationBox(2, 8)
        mat = compress_left_mult(alg, h, box).matrix
        comp = component_of([mat], box.center_index())
        assert len(comp) == 17


class TestFunctionalCalculus:
    def test_identity_function(self, alg):
        a = delta((0, 0)) + 0.2 * (delta((1, 0)) + delta((-1, 0)))
        out = functional_calculus(alg, a, lambda w: w, TruncationBox(2, 6))
        assert (out - a).norm_max() < 1e-13

    def test_scalar_sqrt(self, alg):
        out = functional_calculus(alg, 2.0 * delta((0, 0)), np.sqrt, TruncationBox(2, 3))
        assert (out - np.sqrt(2) * delta((0, 0))).norm_max() < 1e-14

    def test_inverse_against_fft_oracle(self, alg0):
        # theta = 0: 1/(2 + cos t_1) is classical; compare Fourier data.
        a = 2.0 * delta((0, 0)) + 0.5 * (delta((1, 0)) + delta((-1, 0)))
        box = TruncationBox(2, 16, margin=4)
        out = functional_calculus(alg0, a, lambda w: 1.0 / w, box, spectrum_floor=0.0)
        oracle = fft_coefficients(lambda t: 1.0 / (2 + np.cos(t)), range(-12, 13))
        for k, ck in oracle.items():
            assert out[(k, 0)] == pytest.approx(ck, abs=1e-8)

    def test_inverse_oracle_with_twist(self, alg):
        # Axis-supported elements see no twist phase, so the classical
        # oracle remains valid at theta != 0.
        a = 2.0 * delta((0, 0)) + 0.5 * (delta((1, 0)) + delta((-1, 0)))
        box = TruncationBox(2, 16, margin=4)
        out = functional_calculus(alg, a, lambda w: 1.0 / w, box, spectrum_floor=0.0)
        oracle = fft_coefficients(lambda t: 1.0 / (2 + np.cos(t)), range(-12, 13))
        for k, ck in oracle.items():
            assert out[(k, 0)] == pytest.approx(ck, abs=1e-8)

    def test_exp_against_bessel_oracle(self, alg0):
        # exp(x cos t) has Fourier coefficients I_k(x).
        a = 0.3 * (delta((1, 0)) + delta((-1, 0)))
        box = TruncationBox(2, 16, margin=4)
        out = functional_calculus(alg0, a, np.exp, box)
        for k in range(-8, 9):
            assert out[(k, 0)] == pytest.approx(
                scipy.special.iv(abs(k), 0.6), abs=1e-8
            )

    def test_domain_error_reports_spectrum(self, alg):
        a = -1.0 * delta((0, 0))
        with pytest.raises(SpectrumDomainError) as err:
            functional_calculus(alg, a, np.sqrt, TruncationBox(2, 2), spectrum_floor=0.0)
        assert err.value.min_eigenvalue == pytest.approx(-1.0)

    def test_requires_self_adjoint(self, alg):
        with pytest.raises(ValueError, match="self-adjoint"):
            functional_calculus(alg, 1j * delta((1, 0)), np.exp, TruncationBox(2, 2))


class TestElementInverse:
    def test_scalar(self, alg):
        inv, res = element_inverse(alg, 4.0 * delta((0, 0)), TruncationBox(2, 2))
        assert (inv - 0.25 * delta((0, 0))).norm_max() < 1e-15
        assert res < 1e-15

    def test_neumann_series(self, alg):
        n = 8
        a = delta((0, 0)) + 0.3 * delta((1, 0))
        inv, res = element_inverse(alg, a, TruncationBox(2, n))
        for k in range(n + 1):
            assert inv[(k, 0)] == pytest.approx((-0.3) ** k, abs=1e-14)
        assert res <= 0.3 ** (n + 1) + 1e-14

    def test_singular_raises(self, alg):
        with pytest.raises(SingularCompressionError):
            element_inverse(alg, delta((1, 0)), TruncationBox(2, 3))


class TestResolventApply:
    def test_scalar_resolvent(self, alg):
        rng = np.random.default_rng(11)
        box = TruncationBox(2, 3)
        v = FourierElement(2, {(1, 0): 1.0, (0, 2): 2.0j, (-1, -1): 0.5})
        out = resolvent_apply(alg, delta((0, 0)), 1.0, v, box)
        assert (out - 0.5 * v).norm_max() < 1e-14
        out = resolvent_apply(alg, delta((0, 0)), 1j, v, box)
        assert (out - (1.0 / (1 + 1j)) * v).norm_max() < 1e-14

    def test_resolvent_identity(self, alg):
        # R(z1) v - R(z2) v = (z2 - z1) R(z1) R(z2) v
        rng = np.random.default_rng(12)
        box = TruncationBox(2, 5)
        a = delta((0, 0)) + 0.3 * (delta((1, 0)) + delta((-1, 0)))
        dec = SpectralDecomposition.from_element(alg, a, box)
        v = vector_to_element(rng.normal(size=box.size) + 1j * rng.normal(size=box.size), box)
        z1, z2 = 0.7 + 0.2j, 2.0 - 1.0j
        r1 = resolvent_apply(alg, a, z1, v, box, dec)
        r2 = resolvent_apply(alg, a, z2, v, box, dec)
        rr = resolvent_apply(alg, a, z1, r2, box, dec)
        lhs = r1 - r2
        rhs = (z2 - z1) * rr
        assert (lhs - rhs).norm_l2() < 1e-11 * max(1.0, lhs.norm_l2())

    def test_pole_detection(self, alg):
        box = TruncationBox(2, 2)
        with pytest.raises(ResolventPoleError):
            resolvent_apply(alg, delta((0, 0)), -1.0, delta((1, 0)), box)
