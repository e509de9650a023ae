"""Galerkin compression of left multiplication and dense functional calculus.

Operators are compressed onto a truncation box as sparse matrices acting on
the lexicographically ordered basis of lattice points.  Resolvents and
functions of self-adjoint elements are computed as f(P M P), never P f(M) P;
consumers must therefore read results only on the inner trusted box.

The single dense kernel is the Hermitian eigendecomposition.  It is always
run per connected component of the sparsity pattern: this is exact (the
matrix is block diagonal over components) and makes structured metrics,
whose compressions decouple into many small blocks, cheap at large radii.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
import scipy.sparse.csgraph as csgraph
import scipy.sparse.linalg as spla

from .core import FourierElement, TorusAlgebra, TruncationBox

__all__ = [
    "CompressedOperator",
    "SpectralDecomposition",
    "ResourceCapError",
    "SpectrumDomainError",
    "SingularCompressionError",
    "ResolventPoleError",
    "compress_left_mult",
    "element_to_vector",
    "vector_to_element",
    "functional_calculus",
    "element_inverse",
    "resolvent_apply",
]

MAX_MATRIX_ROWS = 20_000
HERMITICITY_TOL = 1e-12


class ResourceCapError(RuntimeError):
    """Matrix size exceeds the configured dense-kernel cap."""


class SpectrumDomainError(ValueError):
    """Compressed spectrum leaves the domain of the requested function."""

    def __init__(self, msg: str, min_eigenvalue: float):
        super().__init__(f"{msg} (min eigenvalue {min_eigenvalue:.3e})")
        self.min_eigenvalue = min_eigenvalue


class SingularCompressionError(RuntimeError):
    """Compressed matrix is numerically singular."""


class ResolventPoleError(ValueError):
    """Resolvent parameter collides with the shifted spectrum."""


def element_to_vector(a: FourierElement, box: TruncationBox, clip: bool = False) -> np.ndarray:
    """Coefficients of ``a`` on the box, lexicographic order.

    With ``clip=False`` any support outside the box raises; ``clip=True``
    drops it (callers own the margin accounting in that case).
    """
    if a.dim != box.dim:
        raise ValueError("element and box dimension mismatch")
    v = np.zeros(box.size, dtype=complex)
    for n, c in a.items():
        if max(abs(x) for x in n) > box.radius:
            if clip:
                continue
            raise ValueError(f"support index {n} outside box of radius {box.radius}")
        v[box.index_of(np.asarray(n)[None, :])[0]] = c
    return v


def vector_to_element(v: np.ndarray, box: TruncationBox) -> FourierElement:
    pts = box.points()
    nz = np.nonzero(v)[0]
    return FourierElement(box.dim, {tuple(int(x) for x in pts[i]): complex(v[i]) for i in nz})


@dataclass(frozen=True)
class CompressedOperator:
    """P lambda_l(a) P on a truncation box; ``matrix`` is CSR, box-indexed."""

    box: TruncationBox
    matrix: sp.csr_matrix

    @property
    def shape(self):
        return self.matrix.shape

    def hermiticity_defect(self) -> float:
        diff = self.matrix - self.matrix.getH()
        scale = max(abs(self.matrix).max(), 1e-300)
        return abs(diff).max() / scale if diff.nnz else 0.0

    def dense(self) -> np.ndarray:
        return self.matrix.toarray()


def compress_left_mult(alg: TorusAlgebra, a: FourierElement, box: TruncationBox) -> CompressedOperator:
    """Matrix of y -> a y on the box: entry (p, q) is the e_p coefficient of a e_q."""
    if a.dim != box.dim or alg.dim != box.dim:
        raise ValueError("dimension mismatch between element, algebra and box")
    pts = box.points()
    cols_all = np.arange(box.size)
    rows, cols, vals = [], [], []
    for m, am in a.items():
        mvec = np.asarray(m, dtype=int)
        mask = box.contains(pts + mvec)
        q = pts[mask]
        rows.append(box.index_of(q + mvec))
        cols.append(cols_all[mask])
        vals.append(am * alg.product_phases(mvec, q))
    if rows:
        mat = sp.coo_matrix(
            (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
            shape=(box.size, box.size),
        ).tocsr()
    else:
        mat = sp.csr_matrix((box.size, box.size), dtype=complex)
    return CompressedOperator(box, mat)


def compress_on_indices(
    alg: TorusAlgebra,
    a: FourierElement,
    box: TruncationBox,
    comp: np.ndarray,
) -> sp.csr_matrix:
    """Compression of lambda_l(a) restricted to the index set ``comp``.

    Exact when ``comp`` is closed under the sparsity pattern of ``a``
    (e.g. a connected component of a pattern containing a's support);
    entries that would leave the set are dropped.
    """
    pts = box.points()[comp]
    g2l = np.full(box.size, -1, dtype=int)
    g2l[comp] = np.arange(len(comp))
    rows, cols, vals = [], [], []
    for m, am in a.items():
        mvec = np.asarray(m, dtype=int)
        tgt = pts + mvec
        ok = box.contains(tgt)
        loc = np.full(len(pts), -1, dtype=int)
        loc[ok] = g2l[box.index_of(tgt[ok])]
        ok &= loc >= 0
        if not ok.any():
            continue
        rows.append(loc[ok])
        cols.append(np.arange(len(pts))[ok])
        vals.append(am * alg.product_phases(mvec, pts[ok]))
    if rows:
        return sp.coo_matrix(
            (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
            shape=(len(comp), len(comp)),
        ).tocsr()
    return sp.csr_matrix((len(comp), len(comp)), dtype=complex)


def _components(mat: sp.csr_matrix) -> list[np.ndarray]:
    pattern = (abs(mat) + abs(mat).T).tocsr()
    ncomp, labels = csgraph.connected_components(pattern, directed=False)
    if ncomp == 1:
        return [np.arange(mat.shape[0])]
    order = np.argsort(labels, kind="stable")
    bounds = np.searchsorted(labels[order], np.arange(ncomp + 1))
    return [order[bounds[i]:bounds[i + 1]] for i in range(ncomp)]


def component_of(mats: list[sp.csr_matrix], seed: int) -> np.ndarray:
    """Indices reachable from ``seed`` under the joint sparsity pattern."""
    pattern = sum((abs(m) + abs(m).T for m in mats), sp.csr_matrix(mats[0].shape))
    _, labels = csgraph.connected_components(pattern.tocsr(), directed=False)
    return np.nonzero(labels == labels[seed])[0]


@dataclass
class SpectralDecomposition:
    """Blockwise Hermitian eigendecomposition of a compressed operator.

    Blocks follow the connected components of the sparsity pattern, so the
    decomposition is exact for the full matrix.  ``eigenvalues`` is the
    ascending concatenation across blocks.
    """

    box: TruncationBox
    blocks: list  # (indices, eigenvalues_ascending, Q) per component
    eigenvalues: np.ndarray

    @staticmethod
    def from_matrix(
        mat: sp.csr_matrix,
        box: TruncationBox,
        hermiticity_tol: float = HERMITICITY_TOL,
        max_rows: int = MAX_MATRIX_ROWS,
    ) -> "SpectralDecomposition":
        n = mat.shape[0]
        if n > max_rows:
            raise ResourceCapError(
                f"refusing dense eigendecomposition of {n} rows (cap {max_rows}); "
                f"projected workspace {16 * n * n / 1e9:.1f} GB"
            )
        scale = max(abs(mat).max(), 1e-300) if mat.nnz else 1.0
        defect = abs(mat - mat.getH()).max() / scale if mat.nnz else 0.0
        if defect > hermiticity_tol:
            raise ValueError(
                f"matrix asymmetry {defect:.3e} exceeds {hermiticity_tol:.1e}; "
                "upstream operator is not self-adjoint"
            )
        blocks = []
        singletons = []
        for idx in _components(mat):
            if len(idx) == 1:
                singletons.append(idx[0])
                continue
            sub = mat[idx, :][:, idx].toarray()
            sub = 0.5 * (sub + sub.conj().T)
            w, q = np.linalg.eigh(sub)
            blocks.append((idx, w, q))
        if singletons:
            idx = np.asarray(singletons)
            diag = np.real(np.asarray(mat[idx, idx]).ravel())
            blocks.append((idx, diag, None))
        eigenvalues = np.sort(np.concatenate([b[1] for b in blocks]))
        return SpectralDecomposition(box, blocks, eigenvalues)

    @staticmethod
    def from_element(
        alg: TorusAlgebra,
        a: FourierElement,
        box: TruncationBox,
        **kw,
    ) -> "SpectralDecomposition":
        return SpectralDecomposition.from_matrix(compress_left_mult(alg, a, box).matrix, box, **kw)

    @property
    def size(self) -> int:
        return len(self.eigenvalues)

    def apply_function(self, f, v: np.ndarray) -> np.ndarray:
        """Q f(Lambda) Q* v, blockwise; v may have trailing column axes."""
        out = np.zeros_like(v, dtype=complex)
        for idx, w, q in self.blocks:
            sub = v[idx]
            fw = np.asarray(f(w)).reshape(-1, *([1] * (sub.ndim - 1)))
            # q is None for the bundle of 1x1 components (diagonal action)
            out[idx] = fw * sub if q is None else q @ (fw * (q.conj().T @ sub))
        return out

    def apply_resolvent(self, z: complex, v: np.ndarray, pole_tol: float = 1e-12) -> np.ndarray:
        gap = np.min(np.abs(self.eigenvalues + z))
        scale = max(np.max(np.abs(self.eigenvalues)), 1.0)
        if gap <= pole_tol * scale:
            raise ResolventPoleError(
                f"z={z} lies within {gap:.3e} of the negated spectrum"
            )
        return self.apply_function(lambda w: 1.0 / (w + z), v)

    def matrix(self) -> np.ndarray:
        """Materialised Q Lambda Q* (small cases / reconstruction tests)."""
        n = sum(len(b[0]) for b in self.blocks)
        out = np.zeros((n, n), dtype=complex)
        for idx, w, q in self.blocks:
            if q is None:
                out[idx, idx] = w
            else:
                out[np.ix_(idx, idx)] = (q * w) @ q.conj().T
        return out

    def unitary(self) -> np.ndarray:
        """Materialised eigenvector matrix, columns ascending by eigenvalue."""
        n = sum(len(b[0]) for b in self.blocks)
        out = np.zeros((n, n), dtype=complex)
        pairs = []
        for idx, w, q in self.blocks:
            for j, lam in enumerate(w):
                vec = None if q is None else q[:, j]
                pairs.append((float(lam), idx if q is not None else idx[j:j + 1], vec))
        pairs.sort(key=lambda t: t[0])
        for col, (lam, idx, vec) in enumerate(pairs):
            out[idx, col] = 1.0 if vec is None else vec
        return out


def functional_calculus(
    alg: TorusAlgebra,
    a: FourierElement,
    f,
    box: TruncationBox,
    spectrum_floor: float | None = None,
    max_rows: int = MAX_MATRIX_ROWS,
) -> FourierElement:
    """f(a) applied to the unit, read back as coefficients on the box.

    ``a`` must be self-adjoint; the calculus runs on the connected component
    of the unit's basis vector, which is exact for f(P M P).  If
    ``spectrum_floor`` is given, eigenvalues at or below it raise
    SpectrumDomainError (e.g. floor 0.0 for fractional powers).
    """
    if not alg.is_self_adjoint(a, tol=1e-10):
        raise ValueError("functional calculus requires a self-adjoint element")
    mat = compress_left_mult(alg, a, box).matrix
    center = box.center_index()
    comp = component_of([mat], center)
    sub = mat[comp, :][:, comp]
    if sub.shape[0] > max_rows:
        raise ResourceCapError(
            f"component size {sub.shape[0]} exceeds dense cap {max_rows}"
        )
    dec = SpectralDecomposition.from_matrix(sub, box, max_rows=max_rows)
    lam_min = float(dec.eigenvalues[0])
    if spectrum_floor is not None and lam_min <= spectrum_floor:
        raise SpectrumDomainError("compressed spectrum leaves the function domain", lam_min)
    e0 = np.zeros(len(comp), dtype=complex)
    e0[np.nonzero(comp == center)[0][0]] = 1.0
    local = dec.apply_function(f, e0)
    full = np.zeros(box.size, dtype=complex)
    full[comp] = local
    return vector_to_element(full, box)


def element_inverse(
    alg: TorusAlgebra,
    a: FourierElement,
    box: TruncationBox,
) -> tuple[FourierElement, float]:
    """Inverse of ``a`` through the compressed solve M b = e_0.

    Returns the candidate inverse and the exact-algebra residual
    ||a b - 1||_2; the caller decides acceptability.
    """
    mat = compress_left_mult(alg, a, box).matrix
    center = box.center_index()
    comp = component_of([mat], center)
    sub = mat[comp, :][:, comp].tocsc()
    rhs = np.zeros(len(comp), dtype=complex)
    rhs[np.nonzero(comp == center)[0][0]] = 1.0
    try:
        lu = spla.splu(sub)
        local = lu.solve(rhs)
    except RuntimeError as exc:
        cond = _condition_estimate(sub)
        raise SingularCompressionError(
            f"compressed matrix is singular ({exc}); condition estimate {cond:.3e}"
        ) from exc
    if not np.all(np.isfinite(local)):
        cond = _condition_estimate(sub)
        raise SingularCompressionError(
            f"compressed solve produced non-finite values; condition estimate {cond:.3e}"
        )
    full = np.zeros(box.size, dtype=complex)
    full[comp] = local
    inv = vector_to_element(full, box)
    one = FourierElement(alg.dim, {(0,) * alg.dim: 1.0})
    residual = (alg.mul(a, inv) - one).norm_l2()
    return inv, residual


def _condition_estimate(mat: sp.spmatrix) -> float:
    if mat.shape[0] <= 2000:
        s = np.linalg.svd(mat.toarray(), compute_uv=False)
        return float(s[0] / max(s[-1], 1e-300))
    return float("inf")


def resolvent_apply(
    alg: TorusAlgebra,
    a: FourierElement,
    z: complex,
    v: FourierElement,
    box: TruncationBox,
    spectral: SpectralDecomposition | None = None,
) -> FourierElement:
    """(a + z)^{-1} v through the compressed spectral decomposition.

    Pass a prebuilt ``spectral`` cache when evaluating many z for a fixed
    element: the contour quadrature depends on that reuse.
    """
    if spectral is None:
        spectral = SpectralDecomposition.from_element(alg, a, box)
    vec = element_to_vector(v, box)
    return vector_to_element(spectral.apply_resolvent(z, vec), box)
