"""Metric tensors, the Gaussian weight and the second-order operators.

The weight nu substitutes for sqrt(det g): it is the Gaussian integral
pi^{-d/2} int exp(-sum t_i t_j ginv_ij) dt, evaluated by default through
the sphere reduction

    nu = pi^{-d/2} * (Gamma(d/2)/2) * int_{S^{d-1}} x(u)^{-d/2} dsigma(u),

with x(u) = sum u_i u_j ginv_ij, and cross-validated against tensor
Gauss-Hermite quadrature of the raw integrand.

Operators are kept symbolic as sums of multiply-derive-multiply sandwiches
and applied exactly; compression to a box happens only where a consumer
needs matrices.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
import scipy.sparse.csgraph as csgraph
import scipy.sparse.linalg as spla

from .compression import (
    SpectralDecomposition,
    component_of,
    compress_left_mult,
    compress_on_indices,
    element_to_vector,
    functional_calculus,
    vector_to_element,
)
from .core import FourierElement, TorusAlgebra, TruncationBox, delta

__all__ = [
    "MetricValidationError",
    "QuadratureConvergenceError",
    "SandwichOperator",
    "MetricTensor",
    "WeightNu",
    "CurvedGeometry",
    "validate_and_invert_metric",
    "compute_nu",
    "build_x_of_s",
    "build_A_ops",
    "build_Ag",
    "conjugation_identity_residual",
    "sphere_quadrature",
]


class MetricValidationError(ValueError):
    """Metric entries violate a structural invariant."""


class QuadratureConvergenceError(RuntimeError):
    """The two evaluation paths for nu disagree beyond tolerance."""


# ---------------------------------------------------------------------------
# symbolic operators


@dataclass(frozen=True)
class SandwichOperator:
    """Sum of c * lambda_l(a_0) D_{j_1} lambda_l(a_1) ... terms.

    ``factors`` are listed left to right as operator composition; a factor
    is ("mul", element) or ("deriv", axis).  Application is exact on the
    sparse algebra, so support grows by the summed support radii.
    """

    dim: int
    terms: tuple

    def apply(self, alg: TorusAlgebra, y: FourierElement) -> FourierElement:
        out = FourierElement(self.dim, {})
        for scalar, factors in self.terms:
            v = y
            for kind, arg in reversed(factors):
                v = alg.mul(arg, v) if kind == "mul" else alg.deriv(arg, v)
            out = out + scalar * v
        return out

    def compress(self, alg: TorusAlgebra, box: TruncationBox) -> sp.csr_matrix:
        pts = box.points()
        total = sp.csr_matrix((box.size, box.size), dtype=complex)
        for scalar, factors in self.terms:
            mat = None
            for kind, arg in factors:
                f = (
                    compress_left_mult(alg, arg, box).matrix
                    if kind == "mul"
                    else sp.diags(pts[:, arg].astype(complex)).tocsr()
                )
                mat = f if mat is None else mat @ f
            if mat is None:
                mat = sp.identity(box.size, dtype=complex, format="csr")
            total = total + scalar * mat
        return total.tocsr()

    def support_radius(self) -> int:
        """Chebyshev support growth of one application."""
        best = 0
        for _, factors in self.terms:
            r = sum(arg.support_radius() for kind, arg in factors if kind == "mul")
            best = max(best, r)
        return best

    def __add__(self, other: "SandwichOperator") -> "SandwichOperator":
        return SandwichOperator(self.dim, self.terms + other.terms)

    def __mul__(self, scalar) -> "SandwichOperator":
        s = complex(scalar)
        return SandwichOperator(self.dim, tuple((s * c, f) for c, f in self.terms))

    __rmul__ = __mul__

    @staticmethod
    def multiplier(a: FourierElement) -> "SandwichOperator":
        return SandwichOperator(a.dim, ((1.0 + 0.0j, (("mul", a),)),))

    @staticmethod
    def zero(dim: int) -> "SandwichOperator":
        return SandwichOperator(dim, ())


# ---------------------------------------------------------------------------
# metric tensor


@dataclass(frozen=True)
class MetricTensor:
    """Validated metric with cached inverse entries.

    ``positivity_margin`` is the smallest eigenvalue of the block
    compression of g; ``product_residual`` is the largest exact-algebra
    norm of sum_j g_ij ginv_jk - delta_ik.
    """

    dim: int
    entries: tuple
    inverse_entries: tuple
    positivity_margin: float
    product_residual: float
    box: TruncationBox

    def entry(self, i: int, j: int) -> FourierElement:
        return self.entries[i][j]

    def inverse_entry(self, i: int, j: int) -> FourierElement:
        return self.inverse_entries[i][j]


def _block_compress(alg, entries, box) -> sp.csr_matrix:
    d = len(entries)
    blocks = [
        [compress_left_mult(alg, entries[i][j], box).matrix for j in range(d)]
        for i in range(d)
    ]
    return sp.bmat(blocks, format="csr")


def _min_eigenvalue(mat: sp.csr_matrix, dense_cap: int = 1500) -> float:
    """Smallest eigenvalue of a Hermitian sparse matrix, per component."""
    pattern = (abs(mat) + abs(mat).T).tocsr()
    ncomp, labels = csgraph.connected_components(pattern, directed=False)
    best = np.inf
    order = np.argsort(labels, kind="stable")
    bounds = np.searchsorted(labels[order], np.arange(ncomp + 1))
    for i in range(ncomp):
        idx = order[bounds[i]:bounds[i + 1]]
        if len(idx) == 1:
            best = min(best, float(np.real(mat[idx[0], idx[0]])))
            continue
        sub = mat[idx, :][:, idx]
        if len(idx) <= dense_cap:
            w = np.linalg.eigvalsh(0.5 * (sub.toarray() + sub.toarray().conj().T))
            best = min(best, float(w[0]))
        else:
            w = spla.eigsh(sub, k=1, which="SA", return_eigenvectors=False)
            best = min(best, float(w[0]))
    return best


def validate_and_invert_metric(
    alg: TorusAlgebra,
    entries,
    box: TruncationBox,
    product_tol: float = 1e-8,
    self_adjoint_tol: float = 1e-10,
) -> MetricTensor:
    """Check metric invariants and compute ginv on the inner box.

    The inverse is recomputed from g through the block compressed solve;
    user-supplied inverses are accepted only as cross-check inputs
    elsewhere, never trusted here.
    """
    d = alg.dim
    if len(entries) != d or any(len(row) != d for row in entries):
        raise MetricValidationError(f"metric must be a {d}x{d} array of elements")
    for i in range(d):
        for j in range(d):
            if not alg.is_self_adjoint(entries[i][j], tol=self_adjoint_tol):
                raise MetricValidationError(f"metric entry g[{i + 1},{j + 1}] is not self-adjoint")

    big = _block_compress(alg, entries, box)
    margin_ev = _min_eigenvalue(big)
    if margin_ev <= 0:
        raise MetricValidationError(
            f"block compression of g is not positive (min eigenvalue {margin_ev:.3e})"
        )

    # Solve B w = u_k, u_k the unit at lattice 0 in block k; block j of the
    # solution holds the coefficients of ginv_jk.  Solves are restricted to
    # the connected component of the right-hand side, which is exact.
    n = box.size
    center = box.center_index()
    inv_entries = [[None] * d for _ in range(d)]
    inner_r = box.inner_radius
    for k in range(d):
        seed = k * n + center
        comp = component_of([big], seed)
        sub = big[comp, :][:, comp].tocsc()
        rhs = np.zeros(len(comp), dtype=complex)
        rhs[np.nonzero(comp == seed)[0][0]] = 1.0
        sol = spla.splu(sub).solve(rhs)
        full = np.zeros(d * n, dtype=complex)
        full[comp] = sol
        for j in range(d):
            elem = vector_to_element(full[j * n:(j + 1) * n], box)
            inv_entries[j][k] = elem.restricted(inner_r)

    for i in range(d):
        for j in range(d):
            if not alg.is_self_adjoint(inv_entries[i][j], tol=1e-6):
                raise MetricValidationError(
                    f"computed inverse entry ginv[{i + 1},{j + 1}] is not self-adjoint; "
                    "the metric violates the standing assumption"
                )

    one = delta((0,) * d)
    residual = 0.0
    for i in range(d):
        for k in range(d):
            acc = FourierElement(d, {})
            for j in range(d):
                acc = acc + alg.mul(entries[i][j], inv_entries[j][k])
            if i == k:
                acc = acc - one
            residual = max(residual, acc.norm_l2())
    if residual > product_tol:
        raise MetricValidationError(
            f"inversion residual {residual:.3e} exceeds tolerance {product_tol:.1e}; "
            "increase the box radius or margin"
        )
    return MetricTensor(
        dim=d,
        entries=tuple(tuple(row) for row in entries),
        inverse_entries=tuple(tuple(row) for row in inv_entries),
        positivity_margin=margin_ev,
        product_residual=residual,
        box=box,
    )


# ---------------------------------------------------------------------------
# the weight nu


@dataclass(frozen=True)
class WeightNu:
    nu: FourierElement
    nu_sqrt: FourierElement
    nu_inv_sqrt: FourierElement
    nu_inv: FourierElement
    quadrature_residual: float
    sqrt_residual: float
    unit_residual: float


def sphere_quadrature(d: int, polar_nodes: int = 32, azimuth_nodes: int = 64):
    """Product Gauss-Legendre quadrature on S^{d-1}.

    Returns (directions, weights) with sum(weights) = Vol(S^{d-1}).
    """
    if d < 2:
        raise ValueError("sphere quadrature needs d >= 2")
    if d == 2:
        x, w = np.polynomial.legendre.leggauss(azimuth_nodes)
        phi = np.pi * (x + 1.0)
        dirs = np.stack([np.cos(phi), np.sin(phi)], axis=1)
        return dirs, np.pi * w
    # recursive spherical coordinates: theta_1..theta_{d-2} in [0, pi], phi
    x, w = np.polynomial.legendre.leggauss(polar_nodes)
    theta = 0.5 * np.pi * (x + 1.0)
    wt = 0.5 * np.pi * w
    sub_dirs, sub_w = sphere_quadrature(d - 1, polar_nodes, azimuth_nodes)
    dirs, weights = [], []
    for t, wthet in zip(theta, wt):
        block = np.concatenate(
            [np.cos(t) * np.ones((len(sub_dirs), 1)), np.sin(t) * sub_dirs], axis=1
        )
        dirs.append(block)
        weights.append(wthet * np.sin(t) ** (d - 2) * sub_w)
    return np.concatenate(dirs), np.concatenate(weights)


def build_x_of_s(metric: MetricTensor, s) -> FourierElement:
    """x(s) = sum_ij ginv_ij s_i s_j; homogeneous of degree 2 in s."""
    s = np.asarray(s, dtype=float)
    out = FourierElement(metric.dim, {})
    for i in range(metric.dim):
        for j in range(metric.dim):
            if s[i] and s[j]:
                out = out + (s[i] * s[j]) * metric.inverse_entries[i][j]
    return out


def compute_nu(
    alg: TorusAlgebra,
    metric: MetricTensor,
    box: TruncationBox,
    azimuth_nodes: int = 64,
    polar_nodes: int = 32,
    hermite_nodes: int = 32,
    validate: bool = True,
    residual_tol: float = 1e-6,
) -> WeightNu:
    """Evaluate nu and its powers on ``box``.

    Path B (sphere reduction, the default result) removes the unbounded
    radial integral exactly; path A (tensor Gauss-Hermite on the raw
    Gaussian integrand) cross-validates it when ``validate`` is set.
    The returned ``quadrature_residual`` is ||path A - path B||_2
    (NaN when validation is skipped).
    """
    d = alg.dim
    dirs, wq = sphere_quadrature(d, polar_nodes, azimuth_nodes)

    # Shared sparsity pattern of x(u): one component computation for all u.
    probe = FourierElement(d, {})
    for i in range(d):
        for j in range(d):
            probe = probe + metric.inverse_entries[i][j]
    probe = probe + delta((0,) * d)
    pattern = compress_left_mult(alg, probe, box).matrix
    comp = component_of([pattern], box.center_index())
    local_center = int(np.nonzero(comp == box.center_index())[0][0])

    acc = np.zeros(len(comp), dtype=complex)
    prefac = math.pi ** (-d / 2) * math.gamma(d / 2) / 2.0
    for u, w in zip(dirs, wq):
        xu = build_x_of_s(metric, u)
        mat = compress_on_indices(alg, xu, box, comp)
        rhs = np.zeros(len(comp), dtype=complex)
        rhs[local_center] = 1.0
        if d % 2 == 0:
            lu = spla.splu(mat.tocsc())
            y = rhs
            for _ in range(d // 2):
                y = lu.solve(y)
        else:
            dec = SpectralDecomposition.from_matrix(mat.tocsr(), box)
            lam_min = float(dec.eigenvalues[0])
            if lam_min <= 0:
                raise QuadratureConvergenceError(
                    f"compressed x(u) not positive at direction {u} (min ev {lam_min:.3e})"
                )
            y = dec.apply_function(lambda lam: lam ** (-d / 2.0), rhs)
        acc += w * y
    nu_vec = np.zeros(box.size, dtype=complex)
    nu_vec[comp] = prefac * acc
    nu = vector_to_element(nu_vec, box)

    residual = float("nan")
    if validate:
        nu_a = _nu_gauss_hermite(alg, metric, box, comp, local_center, hermite_nodes)
        residual = (nu_a - nu).norm_l2()
        if residual > residual_tol:
            raise QuadratureConvergenceError(
                f"nu paths disagree: ||A - B||_2 = {residual:.3e} > {residual_tol:.1e} "
                f"(sphere nodes {len(wq)}, Hermite nodes {hermite_nodes}^{d})"
            )

    # Powers of nu run on nu's own component, which can exceed the metric
    # pattern's component near the box corners.
    mat_nu = compress_left_mult(alg, nu, box).matrix
    comp_nu = component_of([mat_nu], box.center_index())
    dec = SpectralDecomposition.from_matrix(mat_nu[comp_nu, :][:, comp_nu].tocsr(), box)
    lam_min = float(dec.eigenvalues[0])
    if lam_min <= 0:
        raise QuadratureConvergenceError(
            f"computed nu is not positive on the box (min eigenvalue {lam_min:.3e})"
        )
    rhs = np.zeros(len(comp_nu), dtype=complex)
    rhs[np.nonzero(comp_nu == box.center_index())[0][0]] = 1.0

    def read(f) -> FourierElement:
        full = np.zeros(box.size, dtype=complex)
        full[comp_nu] = dec.apply_function(f, rhs)
        return vector_to_element(full, box)

    nu_sqrt = read(np.sqrt)
    nu_inv_sqrt = read(lambda w: 1.0 / np.sqrt(w))
    nu_inv = read(lambda w: 1.0 / w)
    one = delta((0,) * d)
    sqrt_residual = (alg.mul(nu_sqrt, nu_sqrt) - nu).norm_l2()
    unit_residual = (alg.mul(nu_sqrt, nu_inv_sqrt) - one).norm_l2()
    return WeightNu(nu, nu_sqrt, nu_inv_sqrt, nu_inv, residual, sqrt_residual, unit_residual)


def _nu_gauss_hermite(alg, metric, box, comp, local_center, nodes) -> FourierElement:
    d = alg.dim
    x, w = np.polynomial.hermite.hermgauss(nodes)
    wc = w * np.exp(x * x)  # weight-corrected: integrates f dt, not f e^{-t^2} dt
    grids = np.meshgrid(*([x] * d), indexing="ij")
    wgrids = np.meshgrid(*([wc] * d), indexing="ij")
    ts = np.stack([g.ravel() for g in grids], axis=1)
    ws = np.prod(np.stack([g.ravel() for g in wgrids], axis=1), axis=1)
    # The integrand is even under t -> -t (the quadratic form is symmetric).
    keep = np.zeros(len(ts), dtype=bool)
    seen = set()
    for i, t in enumerate(ts):
        key = tuple(np.round(t, 12))
        neg = tuple(np.round(-t, 12))
        if neg in seen:
            continue
        seen.add(key)
        keep[i] = True
    doubled = np.array([2.0 if tuple(np.round(-t, 12)) != tuple(np.round(t, 12)) else 1.0 for t in ts])
    rhs = np.zeros(len(comp), dtype=complex)
    rhs[local_center] = 1.0
    acc = np.zeros(len(comp), dtype=complex)
    for t, wt, dbl, k in zip(ts, ws, doubled, keep):
        if not k:
            continue
        q = build_x_of_s(metric, t)
        mat = compress_on_indices(alg, q, box, comp)
        acc += wt * dbl * spla.expm_multiply(mat.tocsc() * (-1.0), rhs)
    full = np.zeros(box.size, dtype=complex)
    full[comp] = math.pi ** (-d / 2) * acc
    return vector_to_element(full, box)


# ---------------------------------------------------------------------------
# operators of the curved torus


def build_A_ops(metric: MetricTensor, nu: WeightNu, alg: TorusAlgebra) -> list[SandwichOperator]:
    """First-order operators A_i with V(s) = sum_i s_i A_i.

    A_i = sum_j lambda_l(ginv_ij nu^{1/2}) D_j lambda_l(nu^{-1/2})
        + sum_j lambda_l(nu^{-1/2}) D_j lambda_l(nu^{1/2} ginv_ji).
    """
    d = metric.dim
    ops = []
    for i in range(d):
        terms = []
        for j in range(d):
            left = alg.mul(metric.inverse_entries[i][j], nu.nu_sqrt)
            terms.append((1.0 + 0.0j, (("mul", left), ("deriv", j), ("mul", nu.nu_inv_sqrt))))
            right = alg.mul(nu.nu_sqrt, metric.inverse_entries[j][i])
            terms.append((1.0 + 0.0j, (("mul", nu.nu_inv_sqrt), ("deriv", j), ("mul", right))))
        ops.append(SandwichOperator(d, tuple(terms)))
    return ops


def build_Ag(metric: MetricTensor, nu: WeightNu, alg: TorusAlgebra) -> SandwichOperator:
    """A_g = lambda_l(nu^{-1/2}) sum_ij D_i lambda_l(nu^{1/2} ginv_ij nu^{1/2}) D_j lambda_l(nu^{-1/2})."""
    d = metric.dim
    terms = []
    for i in range(d):
        for j in range(d):
            w = alg.mul(alg.mul(nu.nu_sqrt, metric.inverse_entries[i][j]), nu.nu_sqrt)
            terms.append(
                (
                    1.0 + 0.0j,
                    (
                        ("mul", nu.nu_inv_sqrt),
                        ("deriv", i),
                        ("mul", w),
                        ("deriv", j),
                        ("mul", nu.nu_inv_sqrt),
                    ),
                )
            )
    return SandwichOperator(d, tuple(terms))


@dataclass
class CurvedGeometry:
    """Bundle of a validated metric, its weight and the derived operators."""

    alg: TorusAlgebra
    metric: MetricTensor
    nu: WeightNu
    A_ops: list
    Ag: SandwichOperator

    @staticmethod
    def build(
        alg: TorusAlgebra,
        entries,
        element_box: TruncationBox,
        validate_nu: bool = False,
        **nu_kwargs,
    ) -> "CurvedGeometry":
        metric = validate_and_invert_metric(alg, entries, element_box)
        nu = compute_nu(alg, metric, element_box, validate=validate_nu, **nu_kwargs)
        return CurvedGeometry(
            alg=alg,
            metric=metric,
            nu=nu,
            A_ops=build_A_ops(metric, nu, alg),
            Ag=build_Ag(metric, nu, alg),
        )

    @property
    def dim(self) -> int:
        return self.alg.dim

    def x_of_s(self, s) -> FourierElement:
        return build_x_of_s(self.metric, s)

    def V_op(self, s) -> SandwichOperator:
        s = np.asarray(s, dtype=float)
        op = SandwichOperator.zero(self.dim)
        for i in range(self.dim):
            if s[i]:
                op = op + s[i] * self.A_ops[i]
        return op

    def conjugated_op(self, n) -> SandwichOperator:
        """lambda_l(x(n)) + A_g + V(n): the conjugation of A_g by lambda_r(e_n)."""
        return SandwichOperator.multiplier(self.x_of_s(n)) + self.Ag + self.V_op(n)

    def step_radius(self) -> int:
        """Support consumed by one application of V or A_g (margin audit)."""
        return max(op.support_radius() for op in [self.Ag, *self.A_ops])


def conjugation_identity_residual(
    geom: CurvedGeometry,
    n,
    probes,
) -> float:
    """Max residual of lambda_r(e_n)* A_g lambda_r(e_n) = lambda_l(x(n)) + A_g + V(n).

    Both sides are applied exactly in the sparse algebra, so the residual
    is double rounding plus the deviation of nu^{1/2} nu^{-1/2} from 1.
    """
    alg = geom.alg
    en = delta(tuple(int(v) for v in n))
    en_star = alg.adjoint(en)
    rhs_op = geom.conjugated_op(n)
    worst = 0.0
    for y in probes:
        lhs = alg.mul(geom.Ag.apply(alg, alg.mul(y, en)), en_star)
        rhs = rhs_op.apply(alg, y)
        worst = max(worst, (lhs - rhs).norm_l2())
    return worst
