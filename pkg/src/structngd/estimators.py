"""Euclidean-gradient bundles for the natural-gradient steppers.

Four estimation modes are supported for Gaussians: the score-function
(REINFORCE) estimator from loss values only, Stein's identity from gradients
and Hessian information (Monte Carlo or a single evaluation at the mean), and
the pathwise reparameterization estimator from gradients.  Wishart gradients
come from the Bartlett pathwise derivative (with an implicit-reparameterization
derivative for the degree of freedom) or from a mean evaluation.  For
structured precisions the key kernel computes kappa(2 B^{-1} g_Sigma B^{-T})
from k Hessian-vector products plus Hessian diagonals, never a dense Hessian.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Callable, Optional, Sequence

import numpy as np
import scipy.special

from . import matgroup
from .distributions import (
    GaussianSqrtCov,
    GaussianSqrtPrec,
    MatrixGaussianKron,
    MixtureGaussSqrtPrec,
    WishartSqrtPrec,
    bartlett_factors,
    mixture_component_logpdfs,
    sample_gauss,
    sample_mixture,
)
from .errors import CapabilityError, ContractViolationError
from .matgroup import GroupElement, LocalDirection, identity_direction, kappa_project

DENSE_SIGMA_MAX = 64


@dataclass(frozen=True)
class ObjectiveHandle:
    """Callbacks for one objective; absent capabilities are None."""

    loss: Callable[[np.ndarray], float]
    grad: Optional[Callable[[np.ndarray], np.ndarray]] = None
    hvp: Optional[Callable[[np.ndarray, np.ndarray], np.ndarray]] = None
    hess_diag: Optional[Callable[[np.ndarray], np.ndarray]] = None

    @property
    def has_grad(self):
        return self.grad is not None

    @property
    def has_hvp(self):
        return self.hvp is not None

    @property
    def has_hess_diag(self):
        return self.hess_diag is not None

    def require(self, *names):
        for name in names:
            if getattr(self, name) is None:
                raise CapabilityError(f"objective lacks the {name} callback")


@dataclass(frozen=True)
class GradBundle:
    """Euclidean gradients in one of the family conventions.

    Gaussians carry g_mu plus exactly one covariance-gradient representation:
    a dense symmetric g_sigma, or the structured local direction kappa_m
    already equal to kappa(2 B^{-1} g_Sigma B^{-T}).  Wishart bundles carry
    (G_V, g_n); matrix-Gaussian bundles the three Kronecker-factor terms.
    """

    g_mu: Optional[np.ndarray] = None
    g_sigma: Optional[np.ndarray] = None
    kappa_m: Optional[LocalDirection] = None
    wishart_gv: Optional[np.ndarray] = None
    wishart_gn: Optional[float] = None
    matgauss_e: Optional[np.ndarray] = None
    matgauss_a: Optional[np.ndarray] = None
    matgauss_b: Optional[np.ndarray] = None
    mean_loss: Optional[float] = None

    def __post_init__(self):
        if self.g_sigma is not None and self.kappa_m is not None:
            raise ContractViolationError("exactly one sigma representation allowed")


def _sym(x):
    return (x + x.T) / 2


def dense_hessian(obj: ObjectiveHandle, w: np.ndarray) -> np.ndarray:
    """Assemble the dense Hessian from p Hessian-vector products."""
    obj.require("hvp")
    p = w.shape[0]
    cols = [obj.hvp(w, e) for e in np.eye(p)]
    return _sym(np.stack(cols, axis=1))


# ---------------------------------------------------------------------------
# Gaussian estimators
# ---------------------------------------------------------------------------

def reinforce_gauss_cov(dist: GaussianSqrtCov, obj: ObjectiveHandle,
                        seed: int, n: int) -> GradBundle:
    """Score-function estimator; needs only loss evaluations."""
    if not isinstance(dist, GaussianSqrtCov):
        raise ContractViolationError("REINFORCE takes the covariance form")
    if n < 1:
        raise ContractViolationError("need n >= 1 samples")
    rng = np.random.default_rng(seed)
    p = dist.p
    z = rng.standard_normal((n, p))
    w = (dist.a.apply(z.T) + dist.mu[:, None]).T
    losses = np.array([obj.loss(wi) for wi in w])
    u = dist.a.solve_transpose(z.T)            # A^{-T} z per sample, (p, n)
    g_mu = (u * losses[None, :]).mean(axis=1)
    weighted = (u * losses[None, :]) @ u.T / n
    eye_term = dist.a.solve_transpose(dist.a.solve(np.eye(p)))  # (A A^T)^{-1}
    g_sigma = 0.5 * (_sym(weighted) - _sym(eye_term) * losses.mean())
    return GradBundle(g_mu=g_mu, g_sigma=g_sigma, mean_loss=float(losses.mean()))


def stein_gauss(dist, obj: ObjectiveHandle, seed: int, n: int,
                at_mean: bool = False) -> GradBundle:
    """g_mu = E[grad l], g_Sigma = E[hess l]/2 via Stein's identity."""
    obj.require("grad")
    p = dist.p
    if at_mean:
        points = dist.mu[None, :]
    else:
        points = sample_gauss(dist, seed, n)
    g_mu = np.mean([obj.grad(w) for w in points], axis=0)
    mean_loss = float(np.mean([obj.loss(w) for w in points]))
    if p <= DENSE_SIGMA_MAX:
        h = np.mean([dense_hessian(obj, w) for w in points], axis=0)
        return GradBundle(g_mu=g_mu, g_sigma=0.5 * h, mean_loss=mean_loss)
    if not isinstance(dist, GaussianSqrtPrec):
        raise CapabilityError(
            "above the dense threshold only precision-form states are supported")
    kappa = kappa_via_hvp(dist.b, obj, dist, seed, n, gamma=0.0, at_mean=at_mean)
    return GradBundle(g_mu=g_mu, kappa_m=kappa, mean_loss=mean_loss)


def reparam_gauss_cov(dist: GaussianSqrtCov, obj: ObjectiveHandle,
                      seed: int, n: int) -> GradBundle:
    """Pathwise estimator: g_Sigma = E[K + K^T]/4 with K = S(w-mu) grad^T."""
    if not isinstance(dist, GaussianSqrtCov):
        raise ContractViolationError("the pathwise estimator takes the covariance form")
    obj.require("grad")
    if n < 1:
        raise ContractViolationError("need n >= 1 samples")
    rng = np.random.default_rng(seed)
    p = dist.p
    z = rng.standard_normal((n, p))
    w = (dist.a.apply(z.T) + dist.mu[:, None]).T
    grads = np.stack([obj.grad(wi) for wi in w])
    u = dist.a.solve_transpose(z.T)            # S (w - mu) = A^{-T} z, (p, n)
    k = u @ grads / n                          # mean of S(w-mu) grad^T
    g_sigma = 0.25 * (k + k.T)
    losses = np.array([obj.loss(wi) for wi in w])
    return GradBundle(g_mu=grads.mean(axis=0), g_sigma=g_sigma,
                      mean_loss=float(losses.mean()))


def entropy_correct(gb: GradBundle, dist, gamma: float) -> GradBundle:
    """Fold the entropy term into the covariance gradient: g_Sigma -= gamma S / 2.

    On the structured representation the same correction is -gamma on the
    diagonal inside kappa.
    """
    if gamma < 0:
        raise ContractViolationError("gamma must be nonnegative")
    if gamma == 0:
        return gb
    if gb.g_sigma is not None:
        if isinstance(dist, GaussianSqrtPrec):
            s = matgroup.precision_dense(dist.b)
        elif isinstance(dist, GaussianSqrtCov):
            s = np.linalg.inv(matgroup.precision_dense(dist.a))
        else:
            raise ContractViolationError("entropy_correct needs a Gaussian state")
        return replace(gb, g_sigma=gb.g_sigma - 0.5 * gamma * s)
    if gb.kappa_m is not None:
        corrected = gb.kappa_m + (-gamma) * identity_direction(gb.kappa_m.structure)
        return replace(gb, kappa_m=corrected)
    return gb


# ---------------------------------------------------------------------------
# structured kappa from Hessian-vector products
# ---------------------------------------------------------------------------

def _hvp_columns(b: GroupElement):
    """Columns of B^{-T} needed by the structured kernel: head, then tail."""
    s = b.structure
    sel = np.zeros((s.p, s.k1 + s.k2))
    sel[np.arange(s.k1), np.arange(s.k1)] = 1.0
    sel[s.p - s.k2 + np.arange(s.k2), s.k1 + np.arange(s.k2)] = 1.0
    return b.solve_transpose(sel)


def _kappa_from_hvp_averages(b: GroupElement, y: np.ndarray, hd: np.ndarray,
                             r: np.ndarray, gamma: float) -> LocalDirection:
    """Assemble kappa(B^{-1} H B^{-T}) - gamma*I from y = H r and hd = diag(H)."""
    s = b.structure
    k1, d0, k2, p = s.k1, s.d0, s.k2, s.p
    x = b.solve(y)                              # B^{-1} H B^{-T} on the columns
    xh, xt = x[:, :k1], x[:, k1:]
    head = _sym(xh[:k1, :k1]) - gamma * np.eye(k1)
    tail = _sym(xt[p - k2:, :]) - gamma * np.eye(k2)
    mid_rows = slice(k1, k1 + d0)
    if s.lower:
        coup = x[k1:, :k1]
        midc = xt[mid_rows, :].T                # (k2, d0) from symmetry
        c = -b.coupling[:d0, :]                 # correction coefficients per row
        y1, r1 = y[:, :k1], r[:, :k1]
        cross = np.einsum("ij,ij->i", y1[mid_rows, :], c) if k1 else np.zeros(d0)
        gram = r1.T @ y1
        quad = np.einsum("ij,jk,ik->i", c, gram, c) if k1 else np.zeros(d0)
        mid = (hd[mid_rows] + 2.0 * cross + quad) / b.mid ** 2 - gamma
    else:
        coup = xh[k1:, :].T                     # (k1, p - k1) from symmetry
        midc = xt[mid_rows, :]
        c = -b.mid_coupling / b.mid[:, None] if k2 else np.zeros((d0, 0))
        y4, r4 = y[:, k1:], r[:, k1:]
        cross = np.einsum("ij,ij->i", y4[mid_rows, :], c) if k2 else np.zeros(d0)
        gram = r4.T @ y4
        quad = np.einsum("ij,jk,ik->i", c, gram, c) if k2 else np.zeros(d0)
        mid = hd[mid_rows] / b.mid ** 2 + (2.0 / b.mid) * cross + quad - gamma
    return LocalDirection(s, head=head, coupling=coup, mid=mid,
                          mid_coupling=midc, tail=tail)


def kappa_via_hvp(b: GroupElement, obj: ObjectiveHandle, dist,
                  seed: int, n: int, gamma: float,
                  at_mean: bool = False) -> LocalDirection:
    """kappa(2 B^{-1} g_Sigma B^{-T}) with k1 + k2 HVPs per evaluation point.

    g_Sigma is the Stein covariance gradient (E[hess l] - gamma S)/2; the
    entropy term enters as -gamma on the diagonal inside kappa.
    """
    if b.structure.is_kron:
        raise ContractViolationError("structured kernel takes non-Kronecker factors")
    obj.require("hvp", "hess_diag")
    r = _hvp_columns(b)
    points = dist.mu[None, :] if at_mean else sample_gauss(dist, seed, n)
    p = b.structure.p
    ncols = r.shape[1]
    y = np.zeros((p, ncols))
    hd = np.zeros(p)
    for w in points:
        for j in range(ncols):
            y[:, j] += obj.hvp(w, r[:, j])
        hd += obj.hess_diag(w)
    y /= len(points)
    hd /= len(points)
    return _kappa_from_hvp_averages(b, y, hd, r, gamma)


# ---------------------------------------------------------------------------
# Wishart estimators
# ---------------------------------------------------------------------------

def _chol_backward(l_mat: np.ndarray, l_bar: np.ndarray) -> np.ndarray:
    """Gradient wrt V = L L^T given the gradient wrt the Cholesky factor L."""
    phi = np.tril(l_mat.T @ l_bar)
    phi -= 0.5 * np.diag(np.diag(phi))
    li = np.linalg.inv(l_mat)
    return 0.5 * li.T @ (phi + phi.T) @ li


def _gamma_shape_derivative(x: np.ndarray, shape: np.ndarray) -> np.ndarray:
    """Implicit-reparameterization dx/dshape at fixed uniform, rate 1/2.

    Differentiates the regularized lower incomplete gamma in the shape
    argument by central differences and divides by the density.
    """
    h = 1e-5 * np.maximum(1.0, shape)
    df_dshape = (scipy.special.gammainc(shape + h, x / 2.0)
                 - scipy.special.gammainc(shape - h, x / 2.0)) / (2.0 * h)
    log_pdf = ((shape - 1.0) * np.log(x) - x / 2.0
               - scipy.special.gammaln(shape) - shape * np.log(2.0))
    return -df_dshape / np.exp(log_pdf)


def wishart_grads_reparam(dist: WishartSqrtPrec, obj: ObjectiveHandle,
                          seed: int, n: int) -> GradBundle:
    """Pathwise (G_V, g_n) through the Bartlett decomposition."""
    obj.require("grad")
    rng = np.random.default_rng(seed)
    p = dist.p
    l_mat, omega, gamma_draws = bartlett_factors(dist, rng, n)
    shapes = (dist.n_dof - np.arange(1, p + 1) + 1.0) / 2.0
    g_v = np.zeros((p, p))
    g_n = 0.0
    losses = np.empty(n)
    idx = np.arange(p)
    for i in range(n):
        pi = omega[i] @ omega[i].T
        w = l_mat @ pi @ l_mat.T
        losses[i] = obj.loss(w)
        gw = _sym(obj.grad(w))
        g_v += _chol_backward(l_mat, 2.0 * gw @ l_mat @ pi)
        # degree-of-freedom path: only the Gamma diagonal depends on n
        dx = _gamma_shape_derivative(gamma_draws[i], shapes) * 0.5
        dc = dx / (2.0 * np.sqrt(gamma_draws[i]))
        d_omega = np.zeros((p, p))
        d_omega[idx, idx] = dc
        d_pi = d_omega @ omega[i].T + omega[i] @ d_omega.T
        g_n += float(np.sum(gw * (l_mat @ d_pi @ l_mat.T)))
    return GradBundle(wishart_gv=_sym(g_v) / n, wishart_gn=g_n / n,
                      mean_loss=float(losses.mean()))


def wishart_grads_at_mean(dist: WishartSqrtPrec, obj: ObjectiveHandle) -> GradBundle:
    """Single evaluation at Z = E[W]: G_V = n grad l(Z), g_n = Tr[grad l(Z) V]."""
    obj.require("grad")
    z = dist.mean_dense()
    gz = _sym(obj.grad(z))
    v = dist.scale_dense()
    return GradBundle(wishart_gv=dist.n_dof * gz,
                      wishart_gn=float(np.sum(gz * v)),
                      mean_loss=float(obj.loss(z)))


# ---------------------------------------------------------------------------
# matrix Gaussian (Gauss-Newton) estimator
# ---------------------------------------------------------------------------

def matgauss_gauss_newton(dist: MatrixGaussianKron, obj: ObjectiveHandle,
                          seed: int, n: int, alpha: float,
                          gamma: float) -> GradBundle:
    """The three Kronecker-factor terms of the Gauss-Newton update."""
    obj.require("grad")
    if alpha < 0:
        raise ContractViolationError("alpha must be nonnegative")
    from .distributions import sample_matgauss

    d, p = dist.d, dist.p
    samples = sample_matgauss(dist, seed, n)
    su_inv = np.linalg.inv(matgroup.precision_dense(dist.bm))
    sv_inv = np.linalg.inv(matgroup.precision_dense(dist.a))
    a_gram = dist.a.solve(dist.a.solve_transpose(np.eye(p)))    # A^{-1} A^{-T}
    b_gram = dist.bm.solve(dist.bm.solve_transpose(np.eye(d)))  # B^{-1} B^{-T}
    mean_g = np.zeros((d, p))
    a_quad = np.zeros((p, p))
    b_quad = np.zeros((d, d))
    losses = np.empty(n)
    for i, w in enumerate(samples):
        losses[i] = obj.loss(w)
        g = obj.grad(w)
        mean_g += g
        ga = dist.a.solve(g.T).T                 # G A^{-T}
        a_quad += ga.T @ su_inv @ ga             # A^{-1} G^T S_U^{-1} G A^{-T}
        gb = dist.bm.solve(g)                    # B^{-1} G
        b_quad += gb @ sv_inv @ gb.T
    mean_g /= n
    e_term = alpha * dist.E + mean_g
    a_term = (-d * gamma * np.eye(p) + alpha * np.trace(su_inv) * _sym(a_gram)
              + _sym(a_quad) / n)
    b_term = (-p * gamma * np.eye(d) + alpha * np.trace(sv_inv) * _sym(b_gram)
              + _sym(b_quad) / n)
    return GradBundle(matgauss_e=e_term, matgauss_a=a_term, matgauss_b=b_term,
                      mean_loss=float(losses.mean()))


# ---------------------------------------------------------------------------
# mixture estimator (responsibility-weighted second-order gradients)
# ---------------------------------------------------------------------------

def _mixture_scores(dist: MixtureGaussSqrtPrec, w: np.ndarray):
    """Responsibilities r (K, n) and component scores s_k (K, n, p)."""
    comp_ll = mixture_component_logpdfs(dist, w)
    log_r = comp_ll - scipy.special.logsumexp(comp_ll, axis=0, keepdims=True)
    r = np.exp(log_r)
    scores = np.empty((dist.K, w.shape[0], dist.p))
    for k, c in enumerate(dist.components):
        diff = w - c.mu[None, :]
        scores[k] = -(c.b.apply(c.b.apply_transpose(diff.T))).T
    return r, scores


def mixture_grads(dist: MixtureGaussSqrtPrec, obj: ObjectiveHandle,
                  seed: int, n: int, gamma: float) -> list[GradBundle]:
    """Per-component (g_mu, g_Sigma) with b(w) = l(w) + gamma log q(w).

    Uses dense Hessians below the threshold, otherwise the structured
    HVP kernel per component.
    """
    obj.require("grad")
    p = dist.p
    w = sample_mixture(dist, seed, n)
    r, scores = _mixture_scores(dist, w)
    if not np.all(np.isfinite(r)):
        raise ArithmeticError("mixture responsibilities are not finite")
    mix_score = np.einsum("kn,knp->np", r, scores)
    grads = np.stack([obj.grad(wi) for wi in w])
    grads_b = grads + gamma * mix_score
    losses = np.array([obj.loss(wi) for wi in w])
    log_q = np.asarray(scipy.special.logsumexp(
        mixture_component_logpdfs(dist, w), axis=0) - np.log(dist.K))
    mean_nelbo = float(np.mean(losses + gamma * log_q))

    bundles = []
    if p <= DENSE_SIGMA_MAX:
        obj.require("hvp")
        prec = [matgroup.precision_dense(c.b) for c in dist.components]
        h_b = []
        for i, wi in enumerate(w):
            h = dense_hessian(obj, wi)
            if gamma != 0.0:
                h_logq = -np.einsum("k,kij->ij", r[:, i], np.stack(prec))
                h_logq += np.einsum("k,ki,kj->ij", r[:, i], scores[:, i], scores[:, i])
                h_logq -= np.outer(mix_score[i], mix_score[i])
                h = h + gamma * h_logq
            h_b.append(h)
        h_b = np.stack(h_b)
        for k in range(dist.K):
            g_mu = np.einsum("n,np->p", r[k], grads_b) / n
            g_sigma = 0.5 * np.einsum("n,nij->ij", r[k], h_b) / n
            bundles.append(GradBundle(g_mu=g_mu, g_sigma=_sym(g_sigma),
                                      mean_loss=mean_nelbo))
        return bundles

    # structured route: responsibility-weighted HVPs of b(w)
    obj.require("hvp", "hess_diag")
    prec_diag = [matgroup.precision_diag(c.b) for c in dist.components]

    def hvp_b(i, v):
        out = obj.hvp(w[i], v)
        if gamma != 0.0:
            for k, c in enumerate(dist.components):
                sv = c.b.apply(c.b.apply_transpose(v))
                out += gamma * r[k, i] * (-sv + scores[k, i] * (scores[k, i] @ v))
            out -= gamma * mix_score[i] * (mix_score[i] @ v)
        return out

    def hd_b(i):
        out = obj.hess_diag(w[i]).astype(float).copy()
        if gamma != 0.0:
            for k in range(dist.K):
                out += gamma * r[k, i] * (-prec_diag[k] + scores[k, i] ** 2)
            out -= gamma * mix_score[i] ** 2
        return out

    for k, c in enumerate(dist.components):
        cols = _hvp_columns(c.b)
        y = np.zeros((p, cols.shape[1]))
        hd = np.zeros(p)
        for i in range(n):
            for j in range(cols.shape[1]):
                y[:, j] += r[k, i] * hvp_b(i, cols[:, j])
            hd += r[k, i] * hd_b(i)
        y /= n
        hd /= n
        kappa = _kappa_from_hvp_averages(c.b, y, hd, cols, gamma=0.0)
        g_mu = np.einsum("n,np->p", r[k], grads_b) / n
        bundles.append(GradBundle(g_mu=g_mu, kappa_m=kappa, mean_loss=mean_nelbo))
    return bundles
