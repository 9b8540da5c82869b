"""Independent brute-force references for the structured steppers.

Fisher matrices are obtained two ways: second-order central differences of a
closed-form KL divergence in the local parameter, and Monte Carlo averages of
score outer products.  A dense natural-gradient solve over the flattened
local parameter provides the reference trajectory the structured kernels are
checked against, and the rank-one-Gaussian demo reproduces the singular FIM
case exactly.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np
import scipy.linalg
import scipy.special

from . import matgroup
from .distributions import (
    GaussianSqrtCov,
    GaussianSqrtPrec,
    MatrixGaussianKron,
    WishartSqrtPrec,
    sample_gauss,
    sample_matgauss,
    sample_wishart,
    softplus,
)
from .errors import CapabilityError, ContractViolationError, SingularityError
from .estimators import ObjectiveHandle
from .matgroup import StructureSpec

KL_STEP = 1e-3          # refined at half step by Richardson extrapolation
SCORE_STEP = 1e-4


# ---------------------------------------------------------------------------
# flattened local coordinates
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Coordinate:
    label: tuple                     # ("delta", i), ("m_diag", i, i), ...
    delta_index: Optional[int]       # set for mean-block coordinates
    direction: Optional[np.ndarray]  # dM/d_eta for matrix-block coordinates


@dataclass
class FimMatrix:
    """Dense FIM over the flattened local parameter plus its index map."""

    matrix: np.ndarray
    labels: list

    def block(self, tag: str) -> np.ndarray:
        idx = [i for i, lab in enumerate(self.labels) if lab[0] == tag]
        return self.matrix[np.ix_(idx, idx)]

    def cross_block(self, tag_a: str, tag_b: str) -> np.ndarray:
        ia = [i for i, lab in enumerate(self.labels) if lab[0] == tag_a]
        ib = [i for i, lab in enumerate(self.labels) if lab[0] == tag_b]
        return self.matrix[np.ix_(ia, ib)]


def _basis(p, i, j, sym=False):
    v = np.zeros((p, p))
    v[i, j] = 1.0
    if sym and i != j:
        v[j, i] = 1.0
    return v


def gauss_prec_coordinates(structure: StructureSpec, p: int) -> list:
    """Stored-entry flattening: delta, head triu row-major, coupling
    row-major, mid diagonal, mid_coupling row-major, tail triu row-major.

    Symmetric-pair coordinates move both matrix entries with coefficient one.
    """
    s = structure
    coords = [Coordinate(("delta", i), i, None) for i in range(p)]
    k1, d0, k2 = s.k1, s.d0, s.k2

    def add(label, v):
        coords.append(Coordinate(label, None, v))

    for i in range(k1):
        for j in range(i, k1):
            tag = "m_diag" if i == j else "m_pair"
            add((tag, i, j), _basis(p, i, j, sym=True))
    if s.lower:
        for i in range(k1, p):
            for j in range(k1):
                add(("m_asym", i, j), _basis(p, i, j))
    else:
        for i in range(k1):
            for j in range(k1, p):
                add(("m_asym", i, j), _basis(p, i, j))
    for i in range(k1, k1 + d0):
        add(("m_diag", i, i), _basis(p, i, i))
    if s.lower:
        for i in range(k1 + d0, p):
            for j in range(k1, k1 + d0):
                add(("m_asym", i, j), _basis(p, i, j))
    else:
        for i in range(k1, k1 + d0):
            for j in range(k1 + d0, p):
                add(("m_asym", i, j), _basis(p, i, j))
    for i in range(k1 + d0, p):
        for j in range(i, p):
            tag = "m_diag" if i == j else "m_pair"
            add((tag, i, j), _basis(p, i, j, sym=True))
    return coords


def sym_orthonormal_coordinates(p: int, tag: str = "m") -> list:
    """Orthonormal basis of the symmetric matrices: E_ii, (E_ij + E_ji)/sqrt2."""
    coords = []
    for i in range(p):
        coords.append(Coordinate((tag, i, i), None, _basis(p, i, i)))
    inv_sqrt2 = 1.0 / np.sqrt(2.0)
    for i in range(p):
        for j in range(i + 1, p):
            coords.append(Coordinate((tag, i, j), None,
                                     inv_sqrt2 * _basis(p, i, j, sym=True)))
    return coords


def _dense_h(m):
    return np.eye(m.shape[0]) + m + 0.5 * (m @ m)


# ---------------------------------------------------------------------------
# closed-form KL helpers (dense, oracle-grade)
# ---------------------------------------------------------------------------

def _kl_gauss_prec_dense(mu1, s1, mu2, s2):
    p = len(mu1)
    sigma1 = np.linalg.inv(s1)
    dmu = mu2 - mu1
    return 0.5 * (np.sum(s2 * sigma1) - p + dmu @ s2 @ dmu
                  + np.linalg.slogdet(s1)[1] - np.linalg.slogdet(s2)[1])


def _kl_wishart(v1, n1, v2, n2):
    p = v1.shape[0]
    ratio = np.linalg.solve(v2, v1)
    return float((n1 - n2) / 2.0 * sum(
        scipy.special.digamma((n1 - i) / 2.0) for i in range(p))
        + n1 / 2.0 * (np.trace(ratio) - p)
        - n2 / 2.0 * np.linalg.slogdet(ratio)[1]
        + scipy.special.multigammaln(n2 / 2.0, p)
        - scipy.special.multigammaln(n1 / 2.0, p))


# ---------------------------------------------------------------------------
# family adapters: eta -> perturbed global parameters
# ---------------------------------------------------------------------------

def _family_adapter(family: str, state):
    """Returns (coords, kl_fn, logpdf_fn, sampler).

    kl_fn(eta) = KL(q_{eta0} || q_eta); logpdf_fn(eta, samples) is vectorized
    over samples and used by the score oracle.
    """
    if family == "gauss_prec":
        if not isinstance(state, GaussianSqrtPrec):
            raise ContractViolationError("state must be GaussianSqrtPrec")
        p = state.p
        coords = gauss_prec_coordinates(state.b.structure, p)
        b0 = state.b.dense()
        s0 = b0 @ b0.T
        mu0 = state.mu

        def params(eta):
            delta = np.array([eta[i] for i, c in enumerate(coords)
                              if c.delta_index is not None])
            m = np.zeros((p, p))
            for i, c in enumerate(coords):
                if c.direction is not None and eta[i] != 0.0:
                    m = m + eta[i] * c.direction
            mu = mu0 + np.linalg.solve(b0.T, delta)
            bnew = b0 @ _dense_h(m)
            return mu, bnew @ bnew.T

        def kl_fn(eta):
            mu, s = params(eta)
            return _kl_gauss_prec_dense(mu0, s0, mu, s)

        def logpdf_fn(eta, w):
            mu, s = params(eta)
            diff = w - mu[None, :]
            quad = np.einsum("ni,ij,nj->n", diff, s, diff)
            return 0.5 * (np.linalg.slogdet(s)[1] - p * np.log(2 * np.pi)) \
                - 0.5 * quad

        sampler = lambda seed, n: sample_gauss(state, seed, n)
        return coords, kl_fn, logpdf_fn, sampler

    if family == "gauss_cov":
        if not isinstance(state, GaussianSqrtCov):
            raise ContractViolationError("state must be GaussianSqrtCov")
        p = state.p
        coords = ([Coordinate(("delta", i), i, None) for i in range(p)]
                  + sym_orthonormal_coordinates(p))
        a0 = state.a.dense()
        sigma0 = a0 @ a0.T
        mu0 = state.mu

        def params(eta):
            delta = np.asarray(eta[:p])
            m = np.zeros((p, p))
            for i, c in enumerate(coords[p:], start=p):
                if eta[i] != 0.0:
                    m = m + eta[i] * c.direction
            mu = mu0 + a0 @ delta
            half = scipy.linalg.expm(0.5 * m)
            anew = a0 @ half
            return mu, anew @ anew.T

        def kl_fn(eta):
            mu, sigma = params(eta)
            return _kl_gauss_prec_dense(mu0, np.linalg.inv(sigma0), mu,
                                        np.linalg.inv(sigma))

        def logpdf_fn(eta, w):
            mu, sigma = params(eta)
            s = np.linalg.inv(sigma)
            diff = w - mu[None, :]
            quad = np.einsum("ni,ij,nj->n", diff, s, diff)
            return 0.5 * (np.linalg.slogdet(s)[1] - p * np.log(2 * np.pi)) \
                - 0.5 * quad

        sampler = lambda seed, n: sample_gauss(state, seed, n)
        return coords, kl_fn, logpdf_fn, sampler

    if family == "wishart":
        if not isinstance(state, WishartSqrtPrec):
            raise ContractViolationError("state must be WishartSqrtPrec")
        p = state.p
        coords = ([Coordinate(("delta", 0), 0, None)]
                  + sym_orthonormal_coordinates(p))
        b0 = state.B.dense()
        n0 = state.n_dof
        v0 = state.scale_dense()

        def params(eta):
            n_dof = 2.0 * softplus(state.b_scalar + eta[0]) + p - 1.0
            m = np.zeros((p, p))
            for i, c in enumerate(coords[1:], start=1):
                if eta[i] != 0.0:
                    m = m + eta[i] * c.direction
            bnew = b0 @ scipy.linalg.expm(m)
            v = np.linalg.inv(n_dof * bnew @ bnew.T)
            return n_dof, v

        def kl_fn(eta):
            n_dof, v = params(eta)
            return _kl_wishart(v0, n0, v, n_dof)

        def logpdf_fn(eta, w):
            n_dof, v = params(eta)
            s = np.linalg.inv(v)
            logdet_w = np.linalg.slogdet(w)[1]
            tr = np.einsum("ij,nji->n", s, w)
            return (0.5 * (n_dof - p - 1) * logdet_w - 0.5 * tr
                    + 0.5 * n_dof * np.linalg.slogdet(s)[1]
                    - scipy.special.multigammaln(0.5 * n_dof, p)
                    - 0.5 * n_dof * p * np.log(2.0))

        sampler = lambda seed, n: sample_wishart(state, seed, n)
        return coords, kl_fn, logpdf_fn, sampler

    if family == "matgauss":
        if not isinstance(state, MatrixGaussianKron):
            raise ContractViolationError("state must be MatrixGaussianKron")
        d, p = state.d, state.p
        coords = ([Coordinate(("delta", i), i, None) for i in range(d * p)]
                  + sym_orthonormal_coordinates(p, tag="m")
                  + sym_orthonormal_coordinates(d, tag="n"))
        a0 = state.a.dense()
        b0 = state.bm.dense()
        e0 = state.E
        sv0 = a0 @ a0.T
        su0 = b0 @ b0.T
        s_joint0 = np.kron(sv0, su0)
        vec = lambda x: x.reshape(-1, order="F")

        def params(eta):
            delta = np.asarray(eta[:d * p]).reshape(d, p, order="F")
            m = np.zeros((p, p))
            nn = np.zeros((d, d))
            for i, c in enumerate(coords[d * p:], start=d * p):
                if eta[i] == 0.0:
                    continue
                if c.label[0] == "m":
                    m = m + eta[i] * c.direction
                else:
                    nn = nn + eta[i] * c.direction
            e = e0 + np.linalg.solve(b0.T, delta) @ np.linalg.inv(a0)
            anew = a0 @ _dense_h(m)
            bnew = b0 @ _dense_h(nn)
            return e, np.kron(anew @ anew.T, bnew @ bnew.T)

        def kl_fn(eta):
            e, s = params(eta)
            return _kl_gauss_prec_dense(vec(e0), s_joint0, vec(e), s)

        def logpdf_fn(eta, w):
            e, s = params(eta)
            diff = np.stack([vec(wi - e) for wi in w])
            quad = np.einsum("ni,ij,nj->n", diff, s, diff)
            return 0.5 * (np.linalg.slogdet(s)[1] - d * p * np.log(2 * np.pi)) \
                - 0.5 * quad

        sampler = lambda seed, n: sample_matgauss(state, seed, n)
        return coords, kl_fn, logpdf_fn, sampler

    raise CapabilityError(f"no closed-form oracle for family {family!r}")


# ---------------------------------------------------------------------------
# FIM oracles
# ---------------------------------------------------------------------------

def _fim_second_differences(kl_fn, dim, h):
    f = np.zeros((dim, dim))
    e = np.eye(dim)
    for i in range(dim):
        f[i, i] = (kl_fn(h * e[i]) + kl_fn(-h * e[i])) / h ** 2
        for j in range(i + 1, dim):
            val = (kl_fn(h * (e[i] + e[j])) - kl_fn(h * (e[i] - e[j]))
                   - kl_fn(h * (e[j] - e[i])) + kl_fn(-h * (e[i] + e[j])))
            f[i, j] = f[j, i] = val / (4.0 * h ** 2)
    return f


def fim_via_kl(family: str, state, step: float = KL_STEP) -> FimMatrix:
    """FIM as second-order central differences of the KL, Richardson-refined."""
    coords, kl_fn, _, _ = _family_adapter(family, state)
    dim = len(coords)
    f_h = _fim_second_differences(kl_fn, dim, step)
    f_h2 = _fim_second_differences(kl_fn, dim, step / 2.0)
    f = (4.0 * f_h2 - f_h) / 3.0
    return FimMatrix(matrix=(f + f.T) / 2, labels=[c.label for c in coords])


def fim_via_score_mc(family: str, state, seed: int, n: int) -> FimMatrix:
    """MC average of score outer products; scores by central differences."""
    coords, _, logpdf_fn, sampler = _family_adapter(family, state)
    dim = len(coords)
    w = sampler(seed, n)
    scores = np.empty((dim, n))
    h = SCORE_STEP
    e = np.eye(dim)
    for i in range(dim):
        scores[i] = (logpdf_fn(h * e[i], w) - logpdf_fn(-h * e[i], w)) / (2 * h)
    f = scores @ scores.T / n
    return FimMatrix(matrix=(f + f.T) / 2, labels=[c.label for c in coords])


def singular_fim_demo():
    """FIM of the rank-one Gaussian Sigma = v v^T + diag(d^2) at v = e1, d = 1.

    Fixed zero mean; parameters tau = (d, v).  Returns (FimMatrix, det).
    """
    d = np.array([1.0, 1.0, 1.0])
    v = np.array([1.0, 0.0, 0.0])
    sigma = np.outer(v, v) + np.diag(d ** 2)
    sigma_inv = np.linalg.inv(sigma)
    parts = []
    for i in range(3):
        e = np.zeros((3, 3))
        e[i, i] = 2.0 * d[i]
        parts.append(e)
    for i in range(3):
        ei = np.zeros(3)
        ei[i] = 1.0
        parts.append(np.outer(ei, v) + np.outer(v, ei))
    f = np.zeros((6, 6))
    for a in range(6):
        for b in range(6):
            f[a, b] = 0.5 * np.sum(
                (sigma_inv @ parts[a]) * (sigma_inv @ parts[b]).T)
    labels = [("d", i) for i in range(3)] + [("v", i) for i in range(3)]
    return FimMatrix(matrix=f, labels=labels), float(np.linalg.det(f))


# ---------------------------------------------------------------------------
# dense natural-gradient reference
# ---------------------------------------------------------------------------

FIM_VALUE = {"delta": 1.0, "m_diag": 2.0, "m_pair": 4.0, "m_asym": 1.0}


def dense_natgrad(state: GaussianSqrtPrec, g_mu: np.ndarray,
                  g_sigma: np.ndarray, unconstrained_m: bool = False):
    """Flat natural gradient for the precision-form Gaussian.

    Builds the analytic local FIM over the flattened coordinates and solves
    F x = g_eta with g_eta obtained by dense directional derivatives through
    the composite map.  With unconstrained_m the matrix block uses the full
    (asymmetric) vectorization, whose FIM is singular.
    """
    p = state.p
    b0 = state.b.dense()
    sigma = np.linalg.inv(b0 @ b0.T)
    g_s = -sigma @ g_sigma @ sigma          # gradient wrt the precision
    if unconstrained_m:
        coords = [Coordinate(("delta", i), i, None) for i in range(p)]
        for i in range(p):
            for j in range(p):
                coords.append(Coordinate(("m_vec", i, j), None, _basis(p, i, j)))
        dim = len(coords)
        fim = np.zeros((dim, dim))
        fim[:p, :p] = np.eye(p)
        # F over vec(M): row for (i,j) is vec(E_ij + E_ji)
        for a, ca in enumerate(coords[p:], start=p):
            va = ca.direction
            for b, cb in enumerate(coords[p:], start=p):
                vb = cb.direction
                fim[a, b] = np.sum((va + va.T) * vb)
    else:
        coords = gauss_prec_coordinates(state.b.structure, p)
        fim = np.diag([FIM_VALUE[c.label[0]] for c in coords])
    g_eta = np.empty(len(coords))
    b_inv_gmu = np.linalg.solve(b0, g_mu)
    for i, c in enumerate(coords):
        if c.delta_index is not None:
            g_eta[i] = b_inv_gmu[c.delta_index]
        else:
            ds = b0 @ (c.direction + c.direction.T) @ b0.T
            g_eta[i] = np.sum(g_s * ds)
    if np.linalg.matrix_rank(fim) < fim.shape[0]:
        raise SingularityError("local FIM is singular")
    try:
        x = np.linalg.solve(fim, g_eta)
    except np.linalg.LinAlgError as exc:
        raise SingularityError("local FIM is singular") from exc
    return x, coords


def dense_step(state: GaussianSqrtPrec, natgrad: np.ndarray, coords,
               beta: float):
    """Apply the local step -beta * natgrad through the dense map.

    Returns (mu_new, B_new_dense) for comparison against structured steppers.
    """
    p = state.p
    b0 = state.b.dense()
    delta = np.zeros(p)
    m = np.zeros((p, p))
    for i, c in enumerate(coords):
        if c.delta_index is not None:
            delta[c.delta_index] = -beta * natgrad[i]
        else:
            m = m + (-beta * natgrad[i]) * c.direction
    mu_new = state.mu + np.linalg.solve(b0.T, delta)
    b_new = b0 @ _dense_h(m)
    return mu_new, b_new


# ---------------------------------------------------------------------------
# finite-difference checks
# ---------------------------------------------------------------------------

@dataclass
class FdReport:
    grad_rel_err: float
    hvp_rel_err: float
    ok: bool


def finite_diff_check(obj: ObjectiveHandle, w: np.ndarray, v: np.ndarray,
                      h: float = 1e-6, tol: float = 1e-5) -> FdReport:
    """Directional checks of grad against loss and hvp against grad."""
    w = np.asarray(w, dtype=float)
    v = np.asarray(v, dtype=float)
    fd_dir = (obj.loss(w + h * v) - obj.loss(w - h * v)) / (2 * h)
    grad_err = np.nan
    hvp_err = np.nan
    if obj.has_grad:
        g_dir = float(obj.grad(w) @ v)
        grad_err = abs(fd_dir - g_dir) / max(1.0, abs(g_dir))
    if obj.has_grad and obj.has_hvp:
        fd_hvp = (obj.grad(w + h * v) - obj.grad(w - h * v)) / (2 * h)
        hv = obj.hvp(w, v)
        hvp_err = float(np.linalg.norm(fd_hvp - hv)
                        / max(1.0, np.linalg.norm(hv)))
    ok = bool(np.nanmax([grad_err, hvp_err, 0.0]) < tol)
    return FdReport(grad_rel_err=float(grad_err), hvp_rel_err=float(hvp_err),
                    ok=ok)
