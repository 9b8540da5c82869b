"""Structured invertible-matrix groups and their local (tangent) spaces.

Every non-Kronecker structure is stored as three diagonal segments: a dense
head block (size ``k1``), a diagonal middle (size ``d0``) and a dense tail
block (size ``k2``), plus the couplings the orientation allows.  Upper
variants keep couplings above the diagonal (head->mid, head->tail, mid->tail),
lower variants keep the mirror image below.  The classic cases are
degenerate corners of this layout::

    Full(p)              head = p,  d0 = 0, k2 = 0
    Diagonal(p)          head = 0,  d0 = p, k2 = 0
    BlockTriUpper(p, k)  head = k,  d0 = p - k, k2 = 0, upper
    BlockTriLower(p, k)  head = k,  d0 = p - k, k2 = 0, lower
    HeisenbergUpper/Lower(p, k1, k2)  all three segments

All kernels work on the blocks directly, so products, inverses, solves and
the quadratic map ``h(M) = I + M + M^2/2`` cost O(k^2 p) with
``k = k1 + k2``.  Dense materialization is reserved for tests and oracles.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import scipy.linalg

from .errors import ContractViolationError, SingularityError

MIN_DIAG = 1e-12
MAX_COND = 1e12
KAPPA_SYM_TOL = 1e-8


# ---------------------------------------------------------------------------
# structure descriptors
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class StructureSpec:
    """Which matrix group a GroupElement / LocalDirection lives in."""

    kind: str            # full | diagonal | tri_up | tri_low | hs_up | hs_low | kron
    p: int = 0
    k1: int = 0
    k2: int = 0
    left: Optional["StructureSpec"] = None
    right: Optional["StructureSpec"] = None

    # -- constructors -------------------------------------------------------
    @staticmethod
    def full(p: int) -> "StructureSpec":
        return StructureSpec("full", p, k1=p, k2=0)

    @staticmethod
    def diagonal(p: int) -> "StructureSpec":
        return StructureSpec("diagonal", p, k1=0, k2=0)

    @staticmethod
    def block_tri_upper(p: int, k: int) -> "StructureSpec":
        return StructureSpec("tri_up", p, k1=k, k2=0)

    @staticmethod
    def block_tri_lower(p: int, k: int) -> "StructureSpec":
        return StructureSpec("tri_low", p, k1=k, k2=0)

    @staticmethod
    def heisenberg_upper(p: int, k1: int, k2: int) -> "StructureSpec":
        return StructureSpec("hs_up", p, k1=k1, k2=k2)

    @staticmethod
    def heisenberg_lower(p: int, k1: int, k2: int) -> "StructureSpec":
        return StructureSpec("hs_low", p, k1=k1, k2=k2)

    @staticmethod
    def kronecker(left: "StructureSpec", right: "StructureSpec") -> "StructureSpec":
        if left.kind == "kron" or right.kind == "kron":
            raise ContractViolationError("Kronecker structures nest only one level")
        return StructureSpec("kron", left.p * right.p, left=left, right=right)

    def __post_init__(self):
        if self.kind == "kron":
            return
        if self.p < 0 or self.k1 < 0 or self.k2 < 0 or self.k1 + self.k2 > self.p:
            raise ContractViolationError(
                f"invalid segment sizes p={self.p} k1={self.k1} k2={self.k2}")

    # -- derived ------------------------------------------------------------
    @property
    def d0(self) -> int:
        return self.p - self.k1 - self.k2

    @property
    def lower(self) -> bool:
        return self.kind in ("tri_low", "hs_low")

    @property
    def is_kron(self) -> bool:
        return self.kind == "kron"


def _as2d(x):
    return x if x.ndim == 2 else x[:, None]


def _check_same_structure(a, b):
    if a.structure != b.structure:
        raise ContractViolationError(
            f"structure mismatch: {a.structure} vs {b.structure}")


# ---------------------------------------------------------------------------
# D-part helpers: the (d0 + k2) x (d0 + k2) trailing block
#   upper: [[diag(d), D2], [0, D4]]      lower: [[diag(d), 0], [D3, D4]]
# ---------------------------------------------------------------------------

def _d_mul(lower, d, Dc, D4, e, Ec, E4):
    if lower:
        return d * e, Dc * e[None, :] + D4 @ Ec, D4 @ E4
    return d * e, d[:, None] * Ec + Dc @ E4, D4 @ E4


def _d_inv(lower, d, Dc, D4):
    if np.any(np.abs(d) <= MIN_DIAG):
        raise SingularityError("diagonal block has (near-)zero entries")
    D4i = np.linalg.inv(D4) if D4.size else D4
    di = 1.0 / d
    if lower:
        return di, -(D4i @ Dc) * di[None, :], D4i
    return di, -di[:, None] * (Dc @ D4i), D4i


def _d_apply(lower, d, Dc, D4, xm, xt):
    dm = d[:, None] if xm.ndim == 2 else d
    if lower:
        return dm * xm, Dc @ xm + D4 @ xt
    return dm * xm + Dc @ xt, D4 @ xt


def _d_apply_t(lower, d, Dc, D4, xm, xt):
    dm = d[:, None] if xm.ndim == 2 else d
    if lower:
        return dm * xm + Dc.T @ xt, D4.T @ xt
    return dm * xm, Dc.T @ xm + D4.T @ xt


def _d_solve(lower, d, Dc, D4, xm, xt):
    dm = d[:, None] if xm.ndim == 2 else d
    if lower:
        ym = xm / dm
        yt = np.linalg.solve(D4, xt - Dc @ ym) if D4.size else xt
        return ym, yt
    yt = np.linalg.solve(D4, xt) if D4.size else xt
    return (xm - Dc @ yt) / dm, yt


def _d_solve_t(lower, d, Dc, D4, xm, xt):
    dm = d[:, None] if xm.ndim == 2 else d
    if lower:
        yt = np.linalg.solve(D4.T, xt) if D4.size else xt
        return (xm - Dc.T @ yt) / dm, yt
    ym = xm / dm
    yt = np.linalg.solve(D4.T, xt - Dc.T @ ym) if D4.size else xt
    return ym, yt


def _coupling_times_d(lower, X, d, Dc, D4, d0):
    """X @ D for upper coupling X (k1 x m); D @ X for lower coupling (m x k1)."""
    if lower:
        top = d[:, None] * X[:d0]
        bot = Dc @ X[:d0] + D4 @ X[d0:]
        return np.vstack([top, bot])
    left = X[:, :d0] * d[None, :]
    right = X[:, :d0] @ Dc + X[:, d0:] @ D4
    return np.hstack([left, right])


# ---------------------------------------------------------------------------
# group elements
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class GroupElement:
    """Auxiliary parameter B (or A) stored in structured blocks.

    ``head`` is k1 x k1 dense, ``coupling`` holds the head<->rest block
    (k1 x m upper, m x k1 lower; m = d0 + k2), ``mid`` is the diagonal
    vector, ``mid_coupling`` the mid<->tail block and ``tail`` k2 x k2 dense.
    Kronecker elements store the two factors instead.
    """

    structure: StructureSpec
    head: Optional[np.ndarray] = None
    coupling: Optional[np.ndarray] = None
    mid: Optional[np.ndarray] = None
    mid_coupling: Optional[np.ndarray] = None
    tail: Optional[np.ndarray] = None
    left: Optional["GroupElement"] = None
    right: Optional["GroupElement"] = None

    def __post_init__(self):
        if not self.structure.is_kron:
            self.validate()

    # -- checks -------------------------------------------------------------
    def validate(self):
        """Cheap singularity detection before inverse-based kernels."""
        if self.structure.is_kron:
            self.left.validate()
            self.right.validate()
            return
        if self.mid.size and np.any(np.abs(self.mid) <= MIN_DIAG):
            raise SingularityError("diagonal entries below threshold")
        for name, blk in (("head", self.head), ("tail", self.tail)):
            if blk.size and np.linalg.cond(blk) >= MAX_COND:
                raise SingularityError(f"{name} block is numerically singular")

    # -- dense materialization (tests / oracles only) ------------------------
    def dense(self) -> np.ndarray:
        if self.structure.is_kron:
            return np.kron(self.left.dense(), self.right.dense())
        s = self.structure
        out = np.zeros((s.p, s.p))
        k1, d0 = s.k1, s.d0
        out[:k1, :k1] = self.head
        out[k1:k1 + d0, k1:k1 + d0] = np.diag(self.mid)
        out[k1 + d0:, k1 + d0:] = self.tail
        if s.lower:
            out[k1:, :k1] = self.coupling
            out[k1 + d0:, k1:k1 + d0] = self.mid_coupling
        else:
            out[:k1, k1:] = self.coupling
            out[k1:k1 + d0, k1 + d0:] = self.mid_coupling
        return out

    # -- matrix-vector kernels, all O(k^2 p) ---------------------------------
    def _split(self, v):
        s = self.structure
        if s.is_kron:
            raise ContractViolationError("vector kernels operate on the factor elements")
        return v[:s.k1], v[s.k1:s.k1 + s.d0], v[s.k1 + s.d0:]

    def apply(self, v: np.ndarray) -> np.ndarray:
        """B @ v for vectors or column-stacked matrices."""
        s = self.structure
        vh, vm, vt = self._split(v)
        if s.lower:
            h = self.head @ vh
            ym, yt = _d_apply(True, self.mid, self.mid_coupling, self.tail, vm, vt)
            rest = np.concatenate([ym, yt]) + self.coupling @ vh
            return np.concatenate([h, rest])
        h = self.head @ vh + self.coupling @ np.concatenate([vm, vt])
        ym, yt = _d_apply(False, self.mid, self.mid_coupling, self.tail, vm, vt)
        return np.concatenate([h, ym, yt])

    def apply_transpose(self, v: np.ndarray) -> np.ndarray:
        s = self.structure
        vh, vm, vt = self._split(v)
        if s.lower:
            h = self.head.T @ vh + self.coupling.T @ np.concatenate([vm, vt])
            ym, yt = _d_apply_t(True, self.mid, self.mid_coupling, self.tail, vm, vt)
            return np.concatenate([h, ym, yt])
        h = self.head.T @ vh
        ym, yt = _d_apply_t(False, self.mid, self.mid_coupling, self.tail, vm, vt)
        rest = np.concatenate([ym, yt]) + self.coupling.T @ vh
        return np.concatenate([h, rest])

    def solve(self, v: np.ndarray) -> np.ndarray:
        """Solve B y = v."""
        s = self.structure
        vh, vm, vt = self._split(v)
        if s.lower:
            yh = np.linalg.solve(self.head, vh) if s.k1 else vh
            rest = np.concatenate([vm, vt]) - (self.coupling @ yh)
            ym, yt = _d_solve(True, self.mid, self.mid_coupling, self.tail,
                              rest[:s.d0], rest[s.d0:])
            return np.concatenate([yh, ym, yt])
        ym, yt = _d_solve(False, self.mid, self.mid_coupling, self.tail, vm, vt)
        rhs = vh - self.coupling @ np.concatenate([ym, yt])
        yh = np.linalg.solve(self.head, rhs) if s.k1 else rhs
        return np.concatenate([yh, ym, yt])

    def solve_transpose(self, v: np.ndarray) -> np.ndarray:
        """Solve B^T y = v, i.e. y = B^{-T} v."""
        s = self.structure
        vh, vm, vt = self._split(v)
        if s.lower:
            ym, yt = _d_solve_t(True, self.mid, self.mid_coupling, self.tail, vm, vt)
            rhs = vh - self.coupling.T @ np.concatenate([ym, yt])
            yh = np.linalg.solve(self.head.T, rhs) if s.k1 else rhs
            return np.concatenate([yh, ym, yt])
        yh = np.linalg.solve(self.head.T, vh) if s.k1 else vh
        rest = np.concatenate([vm, vt]) - self.coupling.T @ yh
        ym, yt = _d_solve_t(False, self.mid, self.mid_coupling, self.tail,
                            rest[:s.d0], rest[s.d0:])
        return np.concatenate([yh, ym, yt])

    def logabsdet(self) -> float:
        if self.structure.is_kron:
            return (self.right.structure.p * self.left.logabsdet()
                    + self.left.structure.p * self.right.logabsdet())
        out = float(np.sum(np.log(np.abs(self.mid)))) if self.mid.size else 0.0
        for blk in (self.head, self.tail):
            if blk.size:
                out += np.linalg.slogdet(blk)[1]
        return out


@dataclass(frozen=True)
class LocalDirection:
    """Tangent-space parameter M in the group's local space.

    Same block layout as GroupElement; head and tail blocks are symmetric by
    construction (stored full, produced symmetric).  Closed under addition
    and real scaling.
    """

    structure: StructureSpec
    head: Optional[np.ndarray] = None
    coupling: Optional[np.ndarray] = None
    mid: Optional[np.ndarray] = None
    mid_coupling: Optional[np.ndarray] = None
    tail: Optional[np.ndarray] = None
    left: Optional["LocalDirection"] = None
    right: Optional["LocalDirection"] = None

    def _zip(self, other, op):
        _check_same_structure(self, other)
        if self.structure.is_kron:
            return LocalDirection(self.structure, left=op(self.left, other.left),
                                  right=op(self.right, other.right))
        return LocalDirection(
            self.structure,
            head=op(self.head, other.head),
            coupling=op(self.coupling, other.coupling),
            mid=op(self.mid, other.mid),
            mid_coupling=op(self.mid_coupling, other.mid_coupling),
            tail=op(self.tail, other.tail),
        )

    def __add__(self, other: "LocalDirection") -> "LocalDirection":
        return self._zip(other, lambda a, b: a + b)

    def __mul__(self, other):
        if isinstance(other, LocalDirection):
            # elementwise product, used for the C-mask scaling
            return self._zip(other, lambda a, b: a * b)
        c = float(other)
        if self.structure.is_kron:
            return LocalDirection(self.structure, left=self.left * c, right=self.right * c)
        return LocalDirection(self.structure, head=c * self.head,
                              coupling=c * self.coupling, mid=c * self.mid,
                              mid_coupling=c * self.mid_coupling, tail=c * self.tail)

    __rmul__ = __mul__

    def dense(self) -> np.ndarray:
        if self.structure.is_kron:
            raise ContractViolationError("Kronecker directions have per-factor dense forms")
        s = self.structure
        out = np.zeros((s.p, s.p))
        k1, d0 = s.k1, s.d0
        out[:k1, :k1] = self.head
        out[k1:k1 + d0, k1:k1 + d0] = np.diag(self.mid)
        out[k1 + d0:, k1 + d0:] = self.tail
        if s.lower:
            out[k1:, :k1] = self.coupling
            out[k1 + d0:, k1:k1 + d0] = self.mid_coupling
        else:
            out[:k1, k1:] = self.coupling
            out[k1:k1 + d0, k1 + d0:] = self.mid_coupling
        return out

    def max_abs(self) -> float:
        if self.structure.is_kron:
            return max(self.left.max_abs(), self.right.max_abs())
        vals = [np.max(np.abs(b)) for b in
                (self.head, self.coupling, self.mid, self.mid_coupling, self.tail)
                if b.size]
        return max(vals) if vals else 0.0


# ---------------------------------------------------------------------------
# constructors
# ---------------------------------------------------------------------------

def _zeros_blocks(structure: StructureSpec):
    s = structure
    m = s.d0 + s.k2
    if s.lower:
        coup = np.zeros((m, s.k1))
        midc = np.zeros((s.k2, s.d0))
    else:
        coup = np.zeros((s.k1, m))
        midc = np.zeros((s.d0, s.k2))
    return dict(head=np.zeros((s.k1, s.k1)), coupling=coup,
                mid=np.zeros(s.d0), mid_coupling=midc,
                tail=np.zeros((s.k2, s.k2)))


def identity_element(structure: StructureSpec) -> GroupElement:
    if structure.is_kron:
        return GroupElement(structure, left=identity_element(structure.left),
                            right=identity_element(structure.right))
    blocks = _zeros_blocks(structure)
    blocks["head"] = np.eye(structure.k1)
    blocks["mid"] = np.ones(structure.d0)
    blocks["tail"] = np.eye(structure.k2)
    return GroupElement(structure, **blocks)


def zero_direction(structure: StructureSpec) -> LocalDirection:
    if structure.is_kron:
        return LocalDirection(structure, left=zero_direction(structure.left),
                              right=zero_direction(structure.right))
    return LocalDirection(structure, **_zeros_blocks(structure))


def identity_direction(structure: StructureSpec) -> LocalDirection:
    """kappa(I): ones on the three diagonal segments, zero couplings."""
    if structure.is_kron:
        return LocalDirection(structure, left=identity_direction(structure.left),
                              right=identity_direction(structure.right))
    blocks = _zeros_blocks(structure)
    blocks["head"] = np.eye(structure.k1)
    blocks["mid"] = np.ones(structure.d0)
    blocks["tail"] = np.eye(structure.k2)
    return LocalDirection(structure, **blocks)


def full_element(matrix: np.ndarray) -> GroupElement:
    """Wrap a dense invertible matrix as a Full-structure element."""
    p = matrix.shape[0]
    blocks = _zeros_blocks(StructureSpec.full(p))
    blocks["head"] = np.asarray(matrix, dtype=float)
    return GroupElement(StructureSpec.full(p), **blocks)


def diagonal_element(diag: np.ndarray) -> GroupElement:
    blocks = _zeros_blocks(StructureSpec.diagonal(len(diag)))
    blocks["mid"] = np.asarray(diag, dtype=float)
    return GroupElement(StructureSpec.diagonal(len(diag)), **blocks)


def random_element(structure: StructureSpec, rng: np.random.Generator,
                   scale: float = 0.3) -> GroupElement:
    """Well-conditioned random group member, for tests and verification."""
    if structure.is_kron:
        return GroupElement(structure, left=random_element(structure.left, rng, scale),
                            right=random_element(structure.right, rng, scale))
    s = structure
    m = s.d0 + s.k2
    head = np.eye(s.k1) + scale * rng.standard_normal((s.k1, s.k1))
    tail = np.eye(s.k2) + scale * rng.standard_normal((s.k2, s.k2))
    mid = np.exp(scale * rng.standard_normal(s.d0))
    if s.lower:
        coup = scale * rng.standard_normal((m, s.k1))
        midc = scale * rng.standard_normal((s.k2, s.d0))
    else:
        coup = scale * rng.standard_normal((s.k1, m))
        midc = scale * rng.standard_normal((s.d0, s.k2))
    return GroupElement(s, head=head, coupling=coup, mid=mid,
                        mid_coupling=midc, tail=tail)


def random_direction(structure: StructureSpec, rng: np.random.Generator,
                     scale: float = 1.0) -> LocalDirection:
    if structure.is_kron:
        return LocalDirection(structure, left=random_direction(structure.left, rng, scale),
                              right=random_direction(structure.right, rng, scale))
    s = structure
    m = s.d0 + s.k2
    a = scale * rng.standard_normal((s.k1, s.k1))
    d4 = scale * rng.standard_normal((s.k2, s.k2))
    if s.lower:
        coup = scale * rng.standard_normal((m, s.k1))
        midc = scale * rng.standard_normal((s.k2, s.d0))
    else:
        coup = scale * rng.standard_normal((s.k1, m))
        midc = scale * rng.standard_normal((s.d0, s.k2))
    return LocalDirection(s, head=(a + a.T) / 2, coupling=coup,
                          mid=scale * rng.standard_normal(s.d0),
                          mid_coupling=midc, tail=(d4 + d4.T) / 2)


# ---------------------------------------------------------------------------
# group operations
# ---------------------------------------------------------------------------

def group_mul(a: GroupElement, b: GroupElement) -> GroupElement:
    """Blockwise product a @ b; stays in the group."""
    _check_same_structure(a, b)
    s = a.structure
    if s.is_kron:
        return GroupElement(s, left=group_mul(a.left, b.left),
                            right=group_mul(a.right, b.right))
    head = a.head @ b.head
    mid, midc, tail = _d_mul(s.lower, a.mid, a.mid_coupling, a.tail,
                             b.mid, b.mid_coupling, b.tail)
    if s.lower:
        coup = a.coupling @ b.head + _coupling_times_d(
            True, b.coupling, a.mid, a.mid_coupling, a.tail, s.d0)
    else:
        coup = a.head @ b.coupling + _coupling_times_d(
            False, a.coupling, b.mid, b.mid_coupling, b.tail, s.d0)
    return GroupElement(s, head=head, coupling=coup, mid=mid,
                        mid_coupling=midc, tail=tail)


def group_inv(a: GroupElement) -> GroupElement:
    """Blockwise inverse via the triangular block formula."""
    s = a.structure
    if s.is_kron:
        return GroupElement(s, left=group_inv(a.left), right=group_inv(a.right))
    a.validate()
    head_i = np.linalg.inv(a.head) if a.head.size else a.head
    mid_i, midc_i, tail_i = _d_inv(s.lower, a.mid, a.mid_coupling, a.tail)
    if s.lower:
        coup_i = -_coupling_times_d(True, a.coupling @ head_i,
                                    mid_i, midc_i, tail_i, s.d0)
    else:
        coup_i = -head_i @ _coupling_times_d(False, a.coupling,
                                             mid_i, midc_i, tail_i, s.d0)
    return GroupElement(s, head=head_i, coupling=coup_i, mid=mid_i,
                        mid_coupling=midc_i, tail=tail_i)


def h_map(m: LocalDirection) -> GroupElement:
    """The quadratic surrogate h(M) = I + M + M^2/2, closed in the group."""
    s = m.structure
    if s.is_kron:
        return GroupElement(s, left=h_map(m.left), right=h_map(m.right))
    head = np.eye(s.k1) + m.head + 0.5 * (m.head @ m.head)
    mid = 1.0 + m.mid + 0.5 * m.mid ** 2
    tail = np.eye(s.k2) + m.tail + 0.5 * (m.tail @ m.tail)
    if s.lower:
        midc = m.mid_coupling + 0.5 * (m.mid_coupling * m.mid[None, :]
                                       + m.tail @ m.mid_coupling)
        coup = m.coupling + 0.5 * (
            _coupling_times_d(True, m.coupling, m.mid, m.mid_coupling, m.tail, s.d0)
            + m.coupling @ m.head)
    else:
        midc = m.mid_coupling + 0.5 * (m.mid[:, None] * m.mid_coupling
                                       + m.mid_coupling @ m.tail)
        coup = m.coupling + 0.5 * (
            m.head @ m.coupling
            + _coupling_times_d(False, m.coupling, m.mid, m.mid_coupling, m.tail, s.d0))
    return GroupElement(s, head=head, coupling=coup, mid=mid,
                        mid_coupling=midc, tail=tail)


def exp_map(m: LocalDirection) -> GroupElement:
    """Exact matrix exponential; only Full and Diagonal structures admit it."""
    s = m.structure
    if s.kind == "full":
        blocks = _zeros_blocks(s)
        blocks["head"] = scipy.linalg.expm(m.head)
        return GroupElement(s, **blocks)
    if s.kind == "diagonal":
        blocks = _zeros_blocks(s)
        blocks["mid"] = np.exp(m.mid)
        return GroupElement(s, **blocks)
    raise ContractViolationError(
        f"exp_map is defined on full/diagonal structures only, got {s.kind}")


def kappa_project(x: np.ndarray, structure: StructureSpec) -> LocalDirection:
    """Extract the local-space entries of a (symmetric) dense matrix."""
    if structure.is_kron:
        raise ContractViolationError("kappa_project takes non-Kronecker structures")
    scale = max(1.0, float(np.max(np.abs(x))) if x.size else 1.0)
    asym = float(np.max(np.abs(x - x.T))) if x.size else 0.0
    if asym > KAPPA_SYM_TOL * scale:
        raise ContractViolationError(
            f"kappa_project input asymmetric: max|x - x^T| = {asym:.3e}")
    s = structure
    k1, d0 = s.k1, s.d0
    ha = x[:k1, :k1]
    head = (ha + ha.T) / 2
    ta = x[k1 + d0:, k1 + d0:]
    tail = (ta + ta.T) / 2
    mid = np.diag(x[k1:k1 + d0, k1:k1 + d0]).copy()
    if s.lower:
        coup = x[k1:, :k1].copy()
        midc = x[k1 + d0:, k1:k1 + d0].copy()
    else:
        coup = x[:k1, k1:].copy()
        midc = x[k1:k1 + d0, k1 + d0:].copy()
    return LocalDirection(s, head=head, coupling=coup, mid=mid,
                          mid_coupling=midc, tail=tail)


def c_mask(structure: StructureSpec) -> LocalDirection:
    """Constant scaling mask: 1/2 on symmetric/diagonal blocks, 1 on couplings."""
    if structure.is_kron:
        return LocalDirection(structure, left=c_mask(structure.left),
                              right=c_mask(structure.right))
    s = structure
    m = s.d0 + s.k2
    shape_c = (m, s.k1) if s.lower else (s.k1, m)
    shape_mc = (s.k2, s.d0) if s.lower else (s.d0, s.k2)
    return LocalDirection(
        s,
        head=0.5 * np.ones((s.k1, s.k1)),
        coupling=np.ones(shape_c),
        mid=0.5 * np.ones(s.d0),
        mid_coupling=np.ones(shape_mc),
        tail=0.5 * np.ones((s.k2, s.k2)),
    )


def apply_inv_transpose(b: GroupElement, v: np.ndarray) -> np.ndarray:
    """B^{-T} v without densifying beyond blocks."""
    return b.solve_transpose(v)


def precision_dense(b: GroupElement) -> np.ndarray:
    """B B^T as a dense symmetric matrix (tests and oracles)."""
    d = b.dense()
    s = d @ d.T
    return (s + s.T) / 2


def precision_diag(b: GroupElement) -> np.ndarray:
    """diag(B B^T) from blocks: squared row norms, O(k p)."""
    s = b.structure
    if s.is_kron:
        return np.kron(precision_diag(b.left), precision_diag(b.right))
    head = np.sum(b.head ** 2, axis=1)
    if s.lower:
        head_part = head
        rest = np.sum(b.coupling ** 2, axis=1)
        mid_part = rest[:s.d0] + b.mid ** 2
        tail_part = rest[s.d0:] + np.sum(b.mid_coupling ** 2, axis=1) \
            + np.sum(b.tail ** 2, axis=1)
    else:
        head_part = head + np.sum(b.coupling ** 2, axis=1)
        mid_part = b.mid ** 2 + np.sum(b.mid_coupling ** 2, axis=1)
        tail_part = np.sum(b.tail ** 2, axis=1)
    return np.concatenate([head_part, mid_part, tail_part])


def covariance_lowrank(b: GroupElement):
    """Low-rank-plus-diagonal form of (B B^T)^{-1} for upper structures.

    Returns (U, d) with U of shape (p, k) and d the trailing diagonal so that
    U U^T + blockdiag(0, diag(d)) reconstructs the covariance.
    """
    s = b.structure
    if s.is_kron or s.lower or s.k2:
        raise ContractViolationError(
            "covariance_lowrank requires a block upper-triangular structure")
    head_it = np.linalg.inv(b.head).T if b.head.size else b.head
    top = -head_it
    bottom = (b.coupling.T @ head_it) / b.mid[:, None] if s.d0 else \
        np.zeros((0, s.k1))
    u = np.vstack([top, bottom])
    d = 1.0 / b.mid ** 2
    return u, d
