"""Distribution families with structured parameters.

Gaussians carry a structured square-root factor of the precision (S = B B^T)
or the covariance (Sigma = A A^T), the Wishart a square-root precision with a
soft-plus-linked degree-of-freedom scalar, the matrix Gaussian a Kronecker
pair of factors, and mixtures a list of uniform-weight Gaussian components.
Sampling is deterministic given a seed and never densifies the factors.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np
import scipy.special

from . import matgroup
from .errors import ContractViolationError, DomainError
from .matgroup import GroupElement, StructureSpec

LOG_2PI = float(np.log(2.0 * np.pi))


def softplus(b):
    """log(1 + exp(b)) computed without overflow."""
    b = np.asarray(b, dtype=float)
    out = np.log1p(np.exp(-np.abs(b))) + np.maximum(b, 0.0)
    return float(out) if out.ndim == 0 else out


def sigmoid(b):
    b = np.asarray(b, dtype=float)
    out = np.where(b >= 0, 1.0 / (1.0 + np.exp(-b)),
                   np.exp(b) / (1.0 + np.exp(b)))
    return float(out) if out.ndim == 0 else out


# ---------------------------------------------------------------------------
# families
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class GaussianSqrtPrec:
    """N(w | mu, S^{-1}) with S = B B^T held as a structured factor."""

    mu: np.ndarray
    b: GroupElement

    def __post_init__(self):
        if self.mu.shape != (self.b.structure.p,):
            raise ContractViolationError("mean dimension does not match factor")

    @property
    def p(self) -> int:
        return self.b.structure.p


@dataclass(frozen=True)
class GaussianSqrtCov:
    """N(w | mu, A A^T)."""

    mu: np.ndarray
    a: GroupElement

    def __post_init__(self):
        if self.mu.shape != (self.a.structure.p,):
            raise ContractViolationError("mean dimension does not match factor")

    @property
    def p(self) -> int:
        return self.a.structure.p


@dataclass(frozen=True)
class WishartSqrtPrec:
    """W_p(W | S, n) with S = n_dof * B B^T and n_dof = 2*softplus(b) + p - 1."""

    b_scalar: float
    B: GroupElement

    @property
    def p(self) -> int:
        return self.B.structure.p

    @property
    def n_dof(self) -> float:
        return 2.0 * softplus(self.b_scalar) + self.p - 1.0

    def precision_dense(self) -> np.ndarray:
        return self.n_dof * matgroup.precision_dense(self.B)

    def scale_dense(self) -> np.ndarray:
        """V = S^{-1}, the Wishart scale matrix."""
        return np.linalg.inv(self.precision_dense())

    def mean_dense(self) -> np.ndarray:
        """E[W] = n V = (B B^T)^{-1}."""
        return np.linalg.inv(matgroup.precision_dense(self.B))


@dataclass(frozen=True)
class MatrixGaussianKron:
    """MN(W | E, S_U^{-1}, S_V^{-1}) with S_V = A A^T (p x p), S_U = Bm Bm^T (d x d).

    Equivalent to N(vec(W) | vec(E), (S_V kron S_U)^{-1}) under column-major vec.
    """

    E: np.ndarray
    a: GroupElement
    bm: GroupElement

    @property
    def d(self) -> int:
        return self.bm.structure.p

    @property
    def p(self) -> int:
        return self.a.structure.p

    def __post_init__(self):
        if self.E.shape != (self.d, self.p):
            raise ContractViolationError("mean shape does not match factors")


@dataclass(frozen=True)
class MixtureGaussSqrtPrec:
    """Uniform-weight mixture (1/K) sum_k N(w | mu_k, S_k^{-1})."""

    components: Sequence[GaussianSqrtPrec]

    def __post_init__(self):
        if len(self.components) < 1:
            raise ContractViolationError("mixture needs at least one component")
        dims = {c.p for c in self.components}
        if len(dims) != 1:
            raise ContractViolationError("components must share the dimension")

    @property
    def K(self) -> int:
        return len(self.components)

    @property
    def p(self) -> int:
        return self.components[0].p


@dataclass(frozen=True)
class EFFamily:
    """Descriptor of a univariate minimal exponential family.

    Supplies T(w), log B(w) and the log partition A(tau) with its first two
    derivatives; tau is the natural parameter vector of length num_params.
    """

    name: str
    num_params: int
    log_partition: Callable[[np.ndarray], float]
    grad_log_partition: Callable[[np.ndarray], np.ndarray]
    hess_log_partition: Callable[[np.ndarray], np.ndarray]
    sufficient_stat: Callable[[float], np.ndarray]
    log_base_measure: Callable[[float], float]
    tau_min: np.ndarray
    support: Optional[tuple] = None   # (lo, hi) for continuous, None = {0, 1}

    def in_domain(self, tau: np.ndarray) -> bool:
        return bool(np.all(np.isfinite(tau)) and np.all(tau > self.tau_min))


def exponential_family() -> EFFamily:
    return EFFamily(
        name="exponential",
        num_params=1,
        log_partition=lambda t: float(-np.log(t[0])),
        grad_log_partition=lambda t: np.array([-1.0 / t[0]]),
        hess_log_partition=lambda t: np.array([[1.0 / t[0] ** 2]]),
        sufficient_stat=lambda w: np.array([-w]),
        log_base_measure=lambda w: 0.0,
        tau_min=np.array([0.0]),
        support=(0.0, np.inf),
    )


def gamma_family() -> EFFamily:
    # tau = (alpha, beta) with T(w) = (log w, -w) and base measure 1/w
    return EFFamily(
        name="gamma",
        num_params=2,
        log_partition=lambda t: float(scipy.special.gammaln(t[0]) - t[0] * np.log(t[1])),
        grad_log_partition=lambda t: np.array(
            [scipy.special.digamma(t[0]) - np.log(t[1]), -t[0] / t[1]]),
        hess_log_partition=lambda t: np.array(
            [[scipy.special.polygamma(1, t[0]), -1.0 / t[1]],
             [-1.0 / t[1], t[0] / t[1] ** 2]]),
        sufficient_stat=lambda w: np.array([np.log(w), -w]),
        log_base_measure=lambda w: float(-np.log(w)),
        tau_min=np.array([0.0, 0.0]),
        support=(0.0, np.inf),
    )


def bernoulli_family() -> EFFamily:
    # natural parameter is the logit; T(w) = w on {0, 1}
    return EFFamily(
        name="bernoulli",
        num_params=1,
        log_partition=lambda t: softplus(t[0]),
        grad_log_partition=lambda t: np.array([sigmoid(t[0])]),
        hess_log_partition=lambda t: np.array(
            [[sigmoid(t[0]) * (1.0 - sigmoid(t[0]))]]),
        sufficient_stat=lambda w: np.array([float(w)]),
        log_base_measure=lambda w: 0.0,
        tau_min=np.array([-np.inf]),
        support=None,
    )


@dataclass(frozen=True)
class UnivariateEF:
    """Exponential-family state with unconstrained auxiliary lambda.

    tau_i = softplus(lambda_i) by default; the identity link recovers plain
    NGD in the natural parameter.
    """

    lam: np.ndarray
    family: EFFamily
    link: str = "softplus"

    def __post_init__(self):
        if self.link not in ("softplus", "identity"):
            raise ContractViolationError(f"unknown link {self.link!r}")
        if self.lam.shape != (self.family.num_params,):
            raise ContractViolationError("lambda length does not match family")

    @property
    def tau(self) -> np.ndarray:
        return softplus(self.lam) if self.link == "softplus" else self.lam.copy()


# ---------------------------------------------------------------------------
# sampling
# ---------------------------------------------------------------------------

def sample_gauss(dist, rng_seed: int, n: int) -> np.ndarray:
    """Draw n samples; w = mu + B^{-T} eps (precision form) or mu + A eps."""
    if n < 1:
        raise ContractViolationError("need n >= 1 samples")
    rng = np.random.default_rng(rng_seed)
    eps = rng.standard_normal((n, dist.p))
    if isinstance(dist, GaussianSqrtPrec):
        return (dist.b.solve_transpose(eps.T) + dist.mu[:, None]).T
    if isinstance(dist, GaussianSqrtCov):
        return (dist.a.apply(eps.T) + dist.mu[:, None]).T
    raise ContractViolationError(f"not a Gaussian state: {type(dist).__name__}")


def bartlett_factors(dist: WishartSqrtPrec, rng: np.random.Generator, n: int):
    """Lower Cholesky L of the scale and Bartlett matrices Omega (n, p, p).

    Diagonal entries are sqrt of Gamma((n_dof - i + 1)/2, rate 1/2) draws,
    strictly-lower entries standard normal.  Returns (L, omega, gamma_draws).
    """
    p = dist.p
    shapes = (dist.n_dof - np.arange(1, p + 1) + 1.0) / 2.0
    gamma_draws = rng.gamma(shape=np.broadcast_to(shapes, (n, p)), scale=2.0)
    normals = rng.standard_normal((n, p, p))
    omega = np.tril(normals, k=-1)
    idx = np.arange(p)
    omega[:, idx, idx] = np.sqrt(gamma_draws)
    L = np.linalg.cholesky(dist.scale_dense())
    return L, omega, gamma_draws


def sample_wishart(dist: WishartSqrtPrec, rng_seed: int, n: int) -> np.ndarray:
    """Bartlett sampling: W = L Omega Omega^T L^T with L = chol(S^{-1})."""
    rng = np.random.default_rng(rng_seed)
    L, omega, _ = bartlett_factors(dist, rng, n)
    t = np.einsum("ij,njk->nik", L, omega)
    return np.einsum("nik,njk->nij", t, t)


def sample_matgauss(dist: MatrixGaussianKron, rng_seed: int, n: int) -> np.ndarray:
    """W = E + Bm^{-T} Z A^{-1} with Z iid standard normal (n, d, p)."""
    rng = np.random.default_rng(rng_seed)
    z = rng.standard_normal((n, dist.d, dist.p))
    out = np.empty_like(z)
    for i in range(n):
        x = dist.bm.solve_transpose(z[i])
        out[i] = dist.E + dist.a.solve_transpose(x.T).T
    return out


def sample_mixture(dist: MixtureGaussSqrtPrec, rng_seed: int, n: int) -> np.ndarray:
    rng = np.random.default_rng(rng_seed)
    comps = rng.integers(0, dist.K, size=n)
    eps = rng.standard_normal((n, dist.p))
    out = np.empty((n, dist.p))
    for k, c in enumerate(dist.components):
        mask = comps == k
        if not np.any(mask):
            continue
        out[mask] = (c.b.solve_transpose(eps[mask].T) + c.mu[:, None]).T
    return out


# ---------------------------------------------------------------------------
# densities
# ---------------------------------------------------------------------------

def _gauss_prec_logpdf(dist: GaussianSqrtPrec, points: np.ndarray) -> np.ndarray:
    z = dist.b.apply_transpose(points.T - dist.mu[:, None])
    quad = np.sum(z * z, axis=0)
    return -0.5 * quad + dist.b.logabsdet() - 0.5 * dist.p * LOG_2PI


def _gauss_cov_logpdf(dist: GaussianSqrtCov, points: np.ndarray) -> np.ndarray:
    z = dist.a.solve(points.T - dist.mu[:, None])
    quad = np.sum(z * z, axis=0)
    return -0.5 * quad - dist.a.logabsdet() - 0.5 * dist.p * LOG_2PI


def _wishart_logpdf(dist: WishartSqrtPrec, points: np.ndarray) -> np.ndarray:
    n_dof, p = dist.n_dof, dist.p
    S = dist.precision_dense()
    out = np.empty(points.shape[0])
    for i, w in enumerate(points):
        sign, logdet_w = np.linalg.slogdet(w)
        if sign <= 0:
            raise DomainError("Wishart point is not positive definite")
        try:
            np.linalg.cholesky(w)
        except np.linalg.LinAlgError as exc:
            raise DomainError("Wishart point is not positive definite") from exc
        out[i] = (0.5 * (n_dof - p - 1) * logdet_w
                  - 0.5 * np.sum(S * w)
                  + 0.5 * n_dof * np.linalg.slogdet(S)[1]
                  - scipy.special.multigammaln(0.5 * n_dof, p)
                  - 0.5 * n_dof * p * np.log(2.0))
    return out


def _matgauss_logpdf(dist: MatrixGaussianKron, points: np.ndarray) -> np.ndarray:
    d, p = dist.d, dist.p
    out = np.empty(points.shape[0])
    for i, w in enumerate(points):
        z = dist.a.apply_transpose((dist.bm.apply_transpose(w - dist.E)).T).T
        out[i] = (-0.5 * np.sum(z * z)
                  + d * dist.a.logabsdet() + p * dist.bm.logabsdet()
                  - 0.5 * d * p * LOG_2PI)
    return out


def mixture_component_logpdfs(dist: MixtureGaussSqrtPrec,
                              points: np.ndarray) -> np.ndarray:
    """Per-component Gaussian log densities, shape (K, n)."""
    return np.stack([_gauss_prec_logpdf(c, points) for c in dist.components])


def log_density(dist, point) -> np.ndarray | float:
    """Log density at one point or a batch of points (leading axis)."""
    point = np.asarray(point, dtype=float)
    if isinstance(dist, GaussianSqrtPrec):
        single = point.ndim == 1
        pts = point[None, :] if single else point
        out = _gauss_prec_logpdf(dist, pts)
    elif isinstance(dist, GaussianSqrtCov):
        single = point.ndim == 1
        pts = point[None, :] if single else point
        out = _gauss_cov_logpdf(dist, pts)
    elif isinstance(dist, WishartSqrtPrec):
        single = point.ndim == 2
        pts = point[None] if single else point
        out = _wishart_logpdf(dist, pts)
    elif isinstance(dist, MatrixGaussianKron):
        single = point.ndim == 2
        pts = point[None] if single else point
        out = _matgauss_logpdf(dist, pts)
    elif isinstance(dist, MixtureGaussSqrtPrec):
        single = point.ndim == 1
        pts = point[None, :] if single else point
        comp = mixture_component_logpdfs(dist, pts)
        out = scipy.special.logsumexp(comp, axis=0) - np.log(dist.K)
    elif isinstance(dist, UnivariateEF):
        tau = dist.tau
        if not dist.family.in_domain(tau):
            raise DomainError(f"tau outside the {dist.family.name} domain")
        single = point.ndim == 0
        pts = np.atleast_1d(point)
        a = dist.family.log_partition(tau)
        out = np.array([dist.family.log_base_measure(w)
                        + float(dist.family.sufficient_stat(w) @ tau) - a
                        for w in pts])
    else:
        raise ContractViolationError(f"unknown distribution {type(dist).__name__}")
    return float(out[0]) if single else out


# ---------------------------------------------------------------------------
# closed-form quantities
# ---------------------------------------------------------------------------

def entropy_gauss(dist: GaussianSqrtPrec) -> float:
    """0.5 log |2 pi e S^{-1}| from block log-determinants."""
    p = dist.p
    return 0.5 * p * (1.0 + LOG_2PI) - dist.b.logabsdet()


def kl_gauss(q1: GaussianSqrtPrec, q2: GaussianSqrtPrec) -> float:
    """Closed-form KL(q1 || q2) between precision-form Gaussians."""
    if q1.p != q2.p:
        raise ContractViolationError("dimension mismatch")
    p = q1.p
    s1 = matgroup.precision_dense(q1.b)
    s2 = matgroup.precision_dense(q2.b)
    sigma1 = np.linalg.inv(s1)
    dmu = q2.mu - q1.mu
    return 0.5 * (np.sum(s2 * sigma1) - p + dmu @ s2 @ dmu
                  + 2.0 * q1.b.logabsdet() - 2.0 * q2.b.logabsdet())


def ef_expectation_param(dist: UnivariateEF) -> np.ndarray:
    """m = E[T(w)] = grad A(tau)."""
    tau = dist.tau
    if not dist.family.in_domain(tau):
        raise DomainError(f"tau outside the {dist.family.name} domain")
    return dist.family.grad_log_partition(tau)


def ef_fisher(dist: UnivariateEF) -> np.ndarray:
    """FIM in the natural parameter: hess A(tau)."""
    tau = dist.tau
    if not dist.family.in_domain(tau):
        raise DomainError(f"tau outside the {dist.family.name} domain")
    return dist.family.hess_log_partition(tau)


def multivariate_digamma(x: float, p: int) -> float:
    if x <= (p - 1) / 2.0:
        raise DomainError(f"multivariate digamma needs x > (p-1)/2, got {x}")
    i = np.arange(1, p + 1)
    return float(np.sum(scipy.special.digamma(x + (1.0 - i) / 2.0)))


def multivariate_trigamma(x: float, p: int) -> float:
    if x <= (p - 1) / 2.0:
        raise DomainError(f"multivariate trigamma needs x > (p-1)/2, got {x}")
    i = np.arange(1, p + 1)
    return float(np.sum(scipy.special.polygamma(1, x + (1.0 - i) / 2.0)))
