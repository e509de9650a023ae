"""Finitely supported twisted Fourier series on a noncommutative torus.

Elements are stored as sparse maps from lattice indices in Z^d to complex
coefficients.  The twisted product, involution, trace, derivations and
Sobolev norms all act on this representation exactly (double rounding
aside); every other module routes its algebra through the operations here
so that the phase convention is fixed in a single place.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "DimensionMismatchError",
    "FourierElement",
    "ThetaMatrix",
    "TorusAlgebra",
    "TruncationBox",
    "delta",
]

# Coefficients below this magnitude are dropped when normalising: this is
# exact-zero removal only, never a numerical cutoff.
ZERO_PRUNE = 1e-300


class DimensionMismatchError(ValueError):
    """Operands live on tori of different dimension."""


@dataclass(frozen=True)
class ThetaMatrix:
    """Antisymmetric deformation matrix of the torus.

    ``entries[k, l]`` is the phase (radians) in U_k U_l = e^{i theta_kl} U_l U_k.
    """

    entries: np.ndarray

    def __post_init__(self):
        m = np.asarray(self.entries, dtype=float)
        if m.ndim != 2 or m.shape[0] != m.shape[1]:
            raise ValueError("theta must be a square matrix")
        if m.shape[0] < 1:
            raise ValueError("theta must have positive dimension")
        if not np.allclose(m, -m.T, atol=0.0):
            raise ValueError("theta must be exactly antisymmetric")
        object.__setattr__(self, "entries", m)
        # Strict upper triangle; the product phase of e_m e_n is
        # exp(-i n.U.m) with this matrix.
        object.__setattr__(self, "_upper", np.triu(m, k=1))

    @property
    def dim(self) -> int:
        return self.entries.shape[0]

    @staticmethod
    def zero(dim: int) -> "ThetaMatrix":
        return ThetaMatrix(np.zeros((dim, dim)))

    @staticmethod
    def d2(theta12: float) -> "ThetaMatrix":
        return ThetaMatrix(np.array([[0.0, theta12], [-theta12, 0.0]]))


def _as_index(n, dim: int) -> tuple[int, ...]:
    t = tuple(int(c) for c in n)
    if len(t) != dim:
        raise DimensionMismatchError(f"index {t} has length {len(t)}, expected {dim}")
    return t


@dataclass(frozen=True)
class FourierElement:
    """Finitely supported element sum_n c(n) e_n of the torus algebra."""

    dim: int
    coeffs: dict = field(default_factory=dict)

    # Keep numpy scalars from consuming us elementwise in `scalar * element`.
    __array_ufunc__ = None

    def __post_init__(self):
        clean = {}
        for n, c in self.coeffs.items():
            c = complex(c)
            if abs(c) >= ZERO_PRUNE:
                clean[_as_index(n, self.dim)] = c
        object.__setattr__(self, "coeffs", clean)

    # -- container conveniences ------------------------------------------

    def __len__(self) -> int:
        return len(self.coeffs)

    def __getitem__(self, n) -> complex:
        return self.coeffs.get(_as_index(n, self.dim), 0.0 + 0.0j)

    def items(self):
        return self.coeffs.items()

    def support(self):
        return self.coeffs.keys()

    def support_radius(self) -> int:
        """Chebyshev radius of the support (0 for the zero element)."""
        if not self.coeffs:
            return 0
        return max(max(abs(c) for c in n) for n in self.coeffs)

    # -- linear structure --------------------------------------------------

    def __add__(self, other: "FourierElement") -> "FourierElement":
        if self.dim != other.dim:
            raise DimensionMismatchError("dimension mismatch in addition")
        out = dict(self.coeffs)
        for n, c in other.coeffs.items():
            out[n] = out.get(n, 0.0) + c
        return FourierElement(self.dim, out)

    def __sub__(self, other: "FourierElement") -> "FourierElement":
        return self + (-1.0) * other

    def __mul__(self, scalar) -> "FourierElement":
        s = complex(scalar)
        return FourierElement(self.dim, {n: s * c for n, c in self.coeffs.items()})

    __rmul__ = __mul__

    def __neg__(self) -> "FourierElement":
        return (-1.0) * self

    # -- norms -------------------------------------------------------------

    def norm_l2(self) -> float:
        return math.sqrt(sum(abs(c) ** 2 for c in self.coeffs.values()))

    def norm_max(self) -> float:
        return max((abs(c) for c in self.coeffs.values()), default=0.0)

    def restricted(self, radius: int) -> "FourierElement":
        """Restriction to the cube of Chebyshev radius ``radius``."""
        return FourierElement(
            self.dim,
            {n: c for n, c in self.coeffs.items() if max(abs(v) for v in n) <= radius or n == (0,) * self.dim},
        )

    def pruned(self, floor: float) -> "FourierElement":
        """Copy with coefficients of magnitude below ``floor`` removed.

        Explicit, caller-requested truncation; the algebra itself never
        drops small coefficients silently.
        """
        return FourierElement(self.dim, {n: c for n, c in self.coeffs.items() if abs(c) >= floor})

    def __repr__(self) -> str:
        terms = sorted(self.coeffs.items())[:4]
        body = ", ".join(f"{n}: {c:.3g}" for n, c in terms)
        more = "" if len(self.coeffs) <= 4 else f", ... ({len(self.coeffs)} terms)"
        return f"FourierElement(d={self.dim}, {{{body}{more}}})"


def delta(n) -> FourierElement:
    """Basis element e_n as a FourierElement."""
    n = tuple(int(c) for c in n)
    return FourierElement(len(n), {n: 1.0 + 0.0j})


@dataclass(frozen=True)
class TruncationBox:
    """Cube {n : |n_i| <= radius} with an inner trusted sub-box.

    ``margin`` is the width of the boundary shell that downstream
    consumers treat as polluted: results are read back on the inner box
    of radius ``radius - margin``.
    """

    dim: int
    radius: int
    margin: int = 0

    def __post_init__(self):
        if self.radius < 1:
            raise ValueError("radius must be positive")
        if not 0 <= self.margin < self.radius:
            raise ValueError("margin must satisfy 0 <= margin < radius")

    @property
    def side(self) -> int:
        return 2 * self.radius + 1

    @property
    def size(self) -> int:
        return self.side ** self.dim

    @property
    def inner_radius(self) -> int:
        return self.radius - self.margin

    def points(self) -> np.ndarray:
        """All lattice points, lexicographically ordered, shape (size, dim)."""
        rng = np.arange(-self.radius, self.radius + 1)
        grids = np.meshgrid(*([rng] * self.dim), indexing="ij")
        return np.stack([g.ravel() for g in grids], axis=1)

    def index_of(self, pts: np.ndarray) -> np.ndarray:
        """Linear indices of lattice points (mixed-radix, lexicographic)."""
        pts = np.asarray(pts)
        shifted = pts + self.radius
        weights = self.side ** np.arange(self.dim - 1, -1, -1)
        return shifted @ weights

    def contains(self, pts: np.ndarray) -> np.ndarray:
        pts = np.asarray(pts)
        return (np.abs(pts) <= self.radius).all(axis=-1)

    def center_index(self) -> int:
        return self.index_of(np.zeros((1, self.dim), dtype=int))[0]

    def inner_mask(self) -> np.ndarray:
        """Boolean mask of points inside the inner trusted box."""
        pts = self.points()
        return (np.abs(pts) <= self.inner_radius).all(axis=1)

    def shell_mask(self) -> np.ndarray:
        """Boolean mask of points in the outer margin shell."""
        return ~self.inner_mask()


class TorusAlgebra:
    """Operation bundle for a fixed deformation matrix theta.

    All operations are pure; elements are immutable after construction,
    so instances may be shared freely across threads.
    """

    def __init__(self, theta: ThetaMatrix):
        self.theta = theta
        self._U = theta._upper

    @property
    def dim(self) -> int:
        return self.theta.dim

    # -- phases ------------------------------------------------------------

    def product_phases(self, m, right_indices: np.ndarray) -> np.ndarray:
        """Phases of e_m e_n for a fixed left index m and an array of n."""
        m = np.asarray(m, dtype=float)
        return np.exp(-1j * (np.asarray(right_indices, dtype=float) @ (self._U @ m)))

    def involution_phases(self, indices: np.ndarray) -> np.ndarray:
        """Phases of e_n^* = phase(n) e_{-n} for an array of n."""
        idx = np.asarray(indices, dtype=float)
        return np.exp(-1j * np.einsum("ij,jk,ik->i", idx, self._U, idx))

    # -- core operations ----------------------------------------------------

    def _check(self, a: FourierElement):
        if a.dim != self.dim:
            raise DimensionMismatchError(
                f"element dimension {a.dim} does not match theta dimension {self.dim}"
            )

    def mul(self, a: FourierElement, b: FourierElement) -> FourierElement:
        """Twisted product ab; support lies in support(a) + support(b)."""
        self._check(a)
        self._check(b)
        if not a.coeffs or not b.coeffs:
            return FourierElement(self.dim, {})
        b_idx = np.array(sorted(b.coeffs), dtype=int)
        b_val = np.array([b.coeffs[tuple(n)] for n in b_idx])
        out: dict[tuple, complex] = {}
        for m, am in a.coeffs.items():
            vals = am * b_val * self.product_phases(m, b_idx)
            tgt = b_idx + np.asarray(m, dtype=int)
            for p, v in zip(map(tuple, tgt), vals):
                out[p] = out.get(p, 0.0) + v
        return FourierElement(self.dim, out)

    def adjoint(self, a: FourierElement) -> FourierElement:
        """Involution, matching e_n^* = e^{-i sum_{j<k} theta_jk n_j n_k} e_{-n}."""
        self._check(a)
        if not a.coeffs:
            return a
        idx = np.array(sorted(a.coeffs), dtype=int)
        val = np.array([a.coeffs[tuple(n)] for n in idx])
        phases = self.involution_phases(-idx)
        out = {tuple(-n): p * np.conj(v) for n, v, p in zip(idx, val, phases)}
        return FourierElement(self.dim, out)

    def trace(self, a: FourierElement) -> complex:
        """tau(a): the coefficient at lattice index 0."""
        self._check(a)
        return a[(0,) * self.dim]

    def inner(self, a: FourierElement, b: FourierElement) -> complex:
        """<a, b> = tau(a* b) = sum_n conj(a(n)) b(n)."""
        self._check(a)
        self._check(b)
        small, big = (a, b) if len(a) <= len(b) else (b, a)
        acc = 0.0 + 0.0j
        for n, c in small.items():
            d = big[n]
            if d:
                acc += (np.conj(c) * d) if small is a else (np.conj(d) * c)
        return acc

    def deriv(self, axis: int, a: FourierElement) -> FourierElement:
        """Derivation D_axis: multiplies the coefficient at n by n_axis."""
        self._check(a)
        if not 0 <= axis < self.dim:
            raise ValueError(f"axis {axis} out of range for dimension {self.dim}")
        return FourierElement(self.dim, {n: n[axis] * c for n, c in a.coeffs.items()})

    def sobolev_norm(self, a: FourierElement, k: int) -> float:
        """W^{k,2} norm: sum over |alpha|_1 <= k of the l2 norm of D^alpha a."""
        self._check(a)
        if k < 0:
            raise ValueError("Sobolev order must be non-negative")
        idx = np.array(sorted(a.coeffs), dtype=float) if a.coeffs else np.zeros((0, self.dim))
        val = np.array([a.coeffs[tuple(int(c) for c in n)] for n in idx]) if len(idx) else np.zeros(0)
        total = 0.0
        for alpha in multi_indices(self.dim, k):
            mono = np.prod(idx ** np.asarray(alpha, dtype=float), axis=1) if len(idx) else np.zeros(0)
            total += float(np.sqrt(np.sum(np.abs(mono * val) ** 2)))
        return total

    def is_self_adjoint(self, a: FourierElement, tol: float = 1e-12) -> bool:
        return (a - self.adjoint(a)).norm_max() <= tol * max(a.norm_max(), 1.0)

    def right_mul_basis(self, a: FourierElement, n) -> FourierElement:
        """Right regular action of a basis element: a e_n."""
        return self.mul(a, delta(n))


def multi_indices(dim: int, order: int):
    """All alpha in Z_+^dim with |alpha|_1 <= order, lexicographically."""
    return [
        alpha
        for alpha in itertools.product(range(order + 1), repeat=dim)
        if sum(alpha) <= order
    ]
