"""The resolvent recursion: split symbols, their z-jets and the remainder.

The recursion alternates resolvents of x(s) with the first-order operator
V(s) or the second-order A_g.  Jets of z-derivatives propagate through a
resolvent R by u^(j) = R(y^(j) - j u^(j-1)), one extra resolvent
application per order, and through V/A_g linearly.

Everything here runs in Galerkin semantics on a working box: resolvents
act through the compressed spectral decomposition, operator applications
are exact and then clipped back to the box.  The margin audit charges
each recursion step the support radius of the metric entries; the
adequacy of that policy is established empirically by the identity tests,
not by a theorem.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .compression import (
    SpectralDecomposition,
    component_of,
    compress_on_indices,
    element_to_vector,
    vector_to_element,
)
from .core import FourierElement, TruncationBox, delta
from .geometry import CurvedGeometry

__all__ = [
    "MarginExhaustedError",
    "SymbolJet",
    "initial_jet",
    "recursion_step",
    "full_recursion",
    "compute_split_jets",
    "assemble_good",
    "assemble_corr",
    "assemble_bad",
    "splitting_identity_residual",
    "partition_residual",
    "ChainEvaluator",
]


class MarginExhaustedError(RuntimeError):
    """The recursion depth does not fit in the working box margin."""


@dataclass(frozen=True)
class SymbolJet:
    """Value of a split symbol together with its first z-derivatives."""

    s: tuple
    z: complex
    depth: int
    values: tuple  # FourierElements, orders 0..jet_order

    @property
    def value(self) -> FourierElement:
        return self.values[0]

    @property
    def dz(self) -> tuple:
        return self.values[1:]

    @property
    def jet_order(self) -> int:
        return len(self.values) - 1


def initial_jet(dim: int, s, z: complex, jet_order: int = 0) -> SymbolJet:
    """x_0 = 1 with vanishing higher jet components."""
    zero = FourierElement(dim, {})
    vals = (delta((0,) * dim),) + (zero,) * jet_order
    return SymbolJet(tuple(float(v) for v in s), complex(z), 0, vals)


def _resolvent_jets(
    geom: CurvedGeometry,
    spectral: SpectralDecomposition,
    box: TruncationBox,
    jet: SymbolJet,
) -> list[FourierElement]:
    """Jets of (x(s)+z)^{-1} applied to ``jet``: u_j = R (y_j - j u_{j-1})."""
    out: list[FourierElement] = []
    for j, y in enumerate(jet.values):
        rhs = y if j == 0 else y - float(j) * out[j - 1]
        vec = element_to_vector(rhs, box, clip=True)
        out.append(vector_to_element(spectral.apply_resolvent(jet.z, vec), box))
    return out


def _check_margin(geom: CurvedGeometry, box: TruncationBox, depth: int):
    step = max(
        (e.support_radius() for row in geom.metric.entries for e in row),
        default=0,
    )
    if depth * step > box.margin and step > 0:
        raise MarginExhaustedError(
            f"depth {depth} consumes {depth * step} lattice units but the box "
            f"margin is {box.margin}; enlarge the working box"
        )


def recursion_step(
    geom: CurvedGeometry,
    prev: SymbolJet,
    depth: int,
    in_A: bool,
    box: TruncationBox,
    spectral: SpectralDecomposition,
) -> SymbolJet:
    """One split-recursion step: V(s) (depth in A) or A_g after the resolvent."""
    if depth != prev.depth + 1:
        raise ValueError(f"expected depth {prev.depth + 1}, got {depth}")
    _check_margin(geom, box, depth)
    u = _resolvent_jets(geom, spectral, box, prev)
    op = geom.V_op(prev.s) if in_A else geom.Ag
    vals = tuple(op.apply(geom.alg, uj).restricted(box.radius) for uj in u)
    return SymbolJet(prev.s, prev.z, depth, vals)


def full_recursion(
    geom: CurvedGeometry,
    s,
    z: complex,
    depth: int,
    box: TruncationBox,
    spectral: SpectralDecomposition,
    jet_order: int = 0,
) -> SymbolJet:
    """x_depth(s, z) without the subset split: (V(s) + A_g) at every step."""
    jet = initial_jet(geom.dim, s, z, jet_order)
    vop = geom.V_op(s)
    for m in range(1, depth + 1):
        _check_margin(geom, box, m)
        u = _resolvent_jets(geom, spectral, box, jet)
        vals = tuple(
            (vop.apply(geom.alg, uj) + geom.Ag.apply(geom.alg, uj)).restricted(box.radius)
            for uj in u
        )
        jet = SymbolJet(jet.s, jet.z, m, vals)
    return jet


def compute_split_jets(
    geom: CurvedGeometry,
    s,
    z: complex,
    box: TruncationBox,
    max_depth: int,
    spectral: SpectralDecomposition,
    jet_order: int = 0,
) -> dict:
    """All x_m^A jets for m <= max_depth, keyed by (m, frozenset A).

    Subsets use the paper's 1-based step labels: m is in A exactly when the
    m-th step takes the first-order branch.
    """
    jets = {(0, frozenset()): initial_jet(geom.dim, s, z, jet_order)}
    for m in range(1, max_depth + 1):
        for mask in itertools.product([False, True], repeat=m):
            A = frozenset(i + 1 for i, v in enumerate(mask) if v)
            prev = jets[(m - 1, frozenset(a for a in A if a < m))]
            jets[(m, A)] = recursion_step(geom, prev, m, m in A, box, spectral)
    return jets


def _signed_sum(dim: int, jets: dict, k: int, m_max: int, s, z) -> SymbolJet:
    orders = {jet.jet_order for jet in jets.values()}
    jet_order = min(orders) if orders else 0
    zero = FourierElement(dim, {})
    vals = [zero] * (jet_order + 1)
    m_lo = math.ceil(k / 2)
    for m in range(m_lo, m_max + 1):
        size = 2 * m - k
        if size < 0 or size > m:
            continue
        for A in map(frozenset, itertools.combinations(range(1, m + 1), size)):
            jet = jets.get((m, A))
            if jet is None:
                raise KeyError(f"missing jet for m={m}, A={sorted(A)}")
            sign = (-1.0) ** m
            for j in range(jet_order + 1):
                vals[j] = vals[j] + sign * jet.values[j]
    return SymbolJet(tuple(float(v) for v in s), complex(z), 0, tuple(vals))


def assemble_good(
    geom: CurvedGeometry,
    k: int,
    s,
    z: complex,
    jets: dict,
    box: TruncationBox,
    spectral: SpectralDecomposition,
) -> SymbolJet:
    """good_k(s,z): the leading resolvent applied to the signed subset sum."""
    m_max = min(k, geom.dim)
    inner = _signed_sum(geom.dim, jets, k, m_max, s, z)
    vals = tuple(_resolvent_jets(geom, spectral, box, inner))
    return SymbolJet(inner.s, inner.z, 0, vals)


def assemble_corr(
    geom: CurvedGeometry,
    k: int,
    s,
    z: complex,
    jets: dict,
    box: TruncationBox,
    spectral: SpectralDecomposition,
) -> SymbolJet:
    """corr_k(s,z): as good_k but summing depths up to k (equal for k <= d)."""
    inner = _signed_sum(geom.dim, jets, k, k, s, z)
    vals = tuple(_resolvent_jets(geom, spectral, box, inner))
    return SymbolJet(inner.s, inner.z, 0, vals)


def partition_residual(
    geom: CurvedGeometry,
    s,
    z: complex,
    depth: int,
    box: TruncationBox,
    spectral: SpectralDecomposition,
) -> float:
    """|| sum_A x_m^A - x_m ||_2 at m = depth (the subset partition identity)."""
    jets = compute_split_jets(geom, s, z, box, depth, spectral)
    total = FourierElement(geom.dim, {})
    for (m, _), jet in jets.items():
        if m == depth:
            total = total + jet.value
    direct = full_recursion(geom, s, z, depth, box, spectral)
    return (total - direct.value).norm_l2()


def _conjugated_matrix(geom: CurvedGeometry, n, box: TruncationBox) -> sp.csr_matrix:
    return geom.conjugated_op(n).compress(geom.alg, box)


def assemble_bad(
    geom: CurvedGeometry,
    n,
    z: complex,
    box: TruncationBox,
    spectral: SpectralDecomposition,
    conj_matrix: sp.csr_matrix | None = None,
) -> FourierElement:
    """bad_n(z) = (lambda_r(e_n)* (A_g+z)^{-1} lambda_r(e_n)) x_{d+1}(n,z).

    Computed through the conjugation identity as a compressed solve of
    lambda_l(x(n)) + A_g + V(n) + z applied to the full recursion value.
    """
    d = geom.dim
    x_tail = full_recursion(geom, n, z, d + 1, box, spectral)
    if conj_matrix is None:
        conj_matrix = _conjugated_matrix(geom, n, box)
    mat = (conj_matrix + z * sp.identity(box.size, dtype=complex, format="csr")).tocsc()
    rhs = element_to_vector(x_tail.value, box, clip=True)
    sol = spla.splu(mat).solve(rhs)
    return vector_to_element(sol, box)


def splitting_identity_residual(
    geom: CurvedGeometry,
    n,
    z: complex,
    box: TruncationBox,
    spectral: SpectralDecomposition | None = None,
) -> float:
    """Residual of the 2d-term resolvent splitting at lattice mode n.

    Left side: one compressed solve of the conjugated resolvent on the
    unit.  Right side: sum of good_k over k = 0..2d plus the signed
    remainder bad_n.
    """
    d = geom.dim
    if spectral is None:
        spectral = SpectralDecomposition.from_element(geom.alg, geom.x_of_s(n), box)
    conj = _conjugated_matrix(geom, n, box)
    mat = (conj + z * sp.identity(box.size, dtype=complex, format="csr")).tocsc()
    rhs = np.zeros(box.size, dtype=complex)
    rhs[box.center_index()] = 1.0
    lhs = vector_to_element(spla.splu(mat).solve(rhs), box)

    jets = compute_split_jets(geom, n, z, box, min(2 * d, d), spectral)
    rhs_elem = FourierElement(d, {})
    for k in range(0, 2 * d + 1):
        rhs_elem = rhs_elem + assemble_good(geom, k, n, z, jets, box, spectral).value
    rhs_elem = rhs_elem + (-1.0) ** (d + 1) * assemble_bad(
        geom, n, z, box, spectral, conj_matrix=conj
    )
    return (lhs - rhs_elem).norm_l2()


# ---------------------------------------------------------------------------
# batched evaluation for contour quadrature


class ChainEvaluator:
    """Vectorised good_k/corr_k jets over many z nodes for one direction.

    The spectral decomposition of x(u) is computed once per direction and
    shared across radii (x(ru) = r^2 x(u) exactly) and across all z nodes;
    the chain tree runs in the eigenbasis, where resolvents are diagonal.
    When the joint sparsity pattern of x(u) and the operators decouples,
    everything is restricted, exactly, to the component of the unit.
    """

    def __init__(
        self,
        geom: CurvedGeometry,
        box: TruncationBox,
        k_max: int = 4,
        restrict: bool = True,
    ):
        self.geom = geom
        self.box = box
        self.k_max = k_max
        alg = geom.alg
        self.Ag_mat = geom.Ag.compress(alg, box)
        self.Ai_mats = [op.compress(alg, box) for op in geom.A_ops]
        probe = delta((0,) * geom.dim)
        for row in geom.metric.inverse_entries:
            for e in row:
                probe = probe + e
        x_pattern = compress_on_indices(alg, probe, box, np.arange(box.size))
        if restrict:
            self.comp = component_of(
                [self.Ag_mat, *self.Ai_mats, x_pattern], box.center_index()
            )
        else:
            self.comp = np.arange(box.size)
        self.local_center = int(np.nonzero(self.comp == box.center_index())[0][0])
        self._Ag_loc = self.Ag_mat[self.comp, :][:, self.comp].toarray()
        self._Ai_loc = [m[self.comp, :][:, self.comp].toarray() for m in self.Ai_mats]
        # chain patterns: tuple of booleans, True = first-order branch
        self.patterns = [
            p
            for m in range(1, k_max + 1)
            for p in itertools.product([False, True], repeat=m)
            if 2 * m - sum(p) <= k_max
        ]

    def direction(self, u) -> dict:
        """Per-direction cache: eigenbasis of x(u) and transformed operators."""
        u = np.asarray(u, dtype=float)
        xu = self.geom.x_of_s(u)
        mat = compress_on_indices(self.geom.alg, xu, self.box, self.comp)
        dec = SpectralDecomposition.from_matrix(mat, self.box)
        # materialise a single dense eigenbasis on the component
        n = len(self.comp)
        Q = np.zeros((n, n), dtype=complex)
        w = np.zeros(n)
        col = 0
        for idx, wv, q in dec.blocks:
            m = len(idx)
            if q is None:
                Q[idx, col:col + m] = np.eye(m)
            else:
                Q[idx, col:col + m] = q
            w[col:col + m] = wv
            col += m
        if w.min() <= 0:
            raise ValueError(
                f"compressed x(u) is not positive at direction {u} "
                f"(min eigenvalue {w.min():.3e})"
            )
        Qh = Q.conj().T
        return {
            "u": u,
            "w": w,
            "Q": Q,
            "Ag": Qh @ self._Ag_loc @ Q,
            "Ai": [Qh @ a @ Q for a in self._Ai_loc],
        }

    def _resolvent_cols(self, w, r2, z_nodes, state):
        """u_j = R (y_j - j u_{j-1}) columnwise; state shape (n, nz, nj)."""
        denom = 1.0 / (r2 * w[:, None] + z_nodes[None, :])  # (n, nz)
        out = np.empty_like(state)
        for j in range(state.shape[2]):
            rhs = state[:, :, j] if j == 0 else state[:, :, j] - j * out[:, :, j - 1]
            out[:, :, j] = denom * rhs
        return out

    def evaluate(self, cache: dict, radius: float, z_nodes: np.ndarray, jet_order: int):
        """good/corr jets at s = radius * u for every z in ``z_nodes``.

        Returns {"good": {k: arr}, "corr": {k: arr}} with arrays of shape
        (len(comp), len(z_nodes), jet_order + 1) in the coefficient basis.
        """
        w, Q = cache["w"], cache["Q"]
        u = cache["u"]
        n = len(self.comp)
        nz = len(z_nodes)
        r2 = radius * radius
        Vmat = sum(radius * float(ui) * Ai for ui, Ai in zip(u, cache["Ai"]))
        Amat = cache["Ag"]
        root = np.zeros((n, nz, jet_order + 1), dtype=complex)
        root[:, :, 0] = (Q.conj().T)[:, self.local_center][:, None]
        sums_good = {k: np.zeros_like(root) for k in range(self.k_max + 1)}
        sums_corr = {k: np.zeros_like(root) for k in range(self.k_max + 1)}
        sums_good[0] += root
        sums_corr[0] += root
        states = {(): root}
        for m in range(1, self.k_max + 1):
            new_states = {}
            for pat in self.patterns:
                if len(pat) != m or pat[:-1] not in states:
                    continue
                prev = states[pat[:-1]]
                res = self._resolvent_cols(w, r2, z_nodes, prev)
                op = Vmat if pat[-1] else Amat
                val = (op @ res.reshape(n, -1)).reshape(res.shape)
                new_states[pat] = val
                k = 2 * m - sum(pat)
                if k <= self.k_max:
                    sign = (-1.0) ** m
                    sums_corr[k] += sign * val
                    if m <= min(k, self.geom.dim):
                        sums_good[k] += sign * val
            states = new_states
        out = {"good": {}, "corr": {}}
        for k in range(self.k_max + 1):
            for kind, sums in (("good", sums_good), ("corr", sums_corr)):
                lead = self._resolvent_cols(w, r2, z_nodes, sums[k])
                out[kind][k] = (Q @ lead.reshape(n, -1)).reshape(lead.shape)
        return out

    def element(self, arr_slice: np.ndarray) -> FourierElement:
        """Lift a component-basis coefficient vector back to an element."""
        full = np.zeros(self.box.size, dtype=complex)
        full[self.comp] = arr_slice
        return vector_to_element(full, self.box)
