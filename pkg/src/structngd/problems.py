"""Desk-scale objective functions with analytic derivatives.

Each problem ships loss/grad/hvp/hess_diag callbacks (tridiagonal Hessians
for the valley-shaped test functions, so the diagonal is exact), plus the
metadata the run loop needs: dimension, recommended entropy weight, a known
optimum where one exists, and deterministic dataset generators.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .distributions import sigmoid
from .errors import ContractViolationError
from .estimators import ObjectiveHandle


@dataclass
class ProblemSpec:
    name: str
    p: int
    obj: ObjectiveHandle
    family: str = "gauss"              # gauss | wishart | mixture_target
    recommended_gamma: float = 1.0
    init_mu: Optional[np.ndarray] = None
    known_optimum: Optional[np.ndarray] = None
    d: Optional[int] = None
    data: dict = field(default_factory=dict)
    batch_objective: Optional[Callable] = None   # indices -> ObjectiveHandle
    epoch_batches: Optional[Callable] = None     # batch_size -> list[indices]
    test_loss: Optional[Callable] = None


# ---------------------------------------------------------------------------
# valley-shaped test functions
# ---------------------------------------------------------------------------

def rosenbrock(p: int, variant: str = "classical") -> ProblemSpec:
    """1/p-scaled Rosenbrock.

    The classical coupling is 100 (w_{i+1} - w_i^2)^2; the 'paper' variant
    replaces it by 100 (w_{i+1} - w_i)^2.
    """
    if p < 2:
        raise ContractViolationError("rosenbrock needs p >= 2")
    if variant not in ("classical", "paper"):
        raise ContractViolationError(f"unknown rosenbrock variant {variant!r}")
    inv_p = 1.0 / p

    if variant == "paper":
        def loss(w):
            return inv_p * float(np.sum(100.0 * (w[1:] - w[:-1]) ** 2
                                        + (w[:-1] - 1.0) ** 2))

        def grad(w):
            g = np.zeros_like(w)
            diff = w[1:] - w[:-1]
            g[:-1] += -200.0 * diff + 2.0 * (w[:-1] - 1.0)
            g[1:] += 200.0 * diff
            return inv_p * g

        def hess_bands(w):
            diag = np.zeros_like(w)
            diag[:-1] += 202.0
            diag[1:] += 200.0
            off = -200.0 * np.ones(p - 1)
            return inv_p * diag, inv_p * off
    else:
        def loss(w):
            return inv_p * float(np.sum(100.0 * (w[1:] - w[:-1] ** 2) ** 2
                                        + (w[:-1] - 1.0) ** 2))

        def grad(w):
            g = np.zeros_like(w)
            diff = w[1:] - w[:-1] ** 2
            g[:-1] += -400.0 * w[:-1] * diff + 2.0 * (w[:-1] - 1.0)
            g[1:] += 200.0 * diff
            return inv_p * g

        def hess_bands(w):
            diag = np.zeros_like(w)
            diag[:-1] += 1200.0 * w[:-1] ** 2 - 400.0 * w[1:] + 2.0
            diag[1:] += 200.0
            off = -400.0 * w[:-1]
            return inv_p * diag, inv_p * off

    obj = _tridiagonal_objective(loss, grad, hess_bands)
    return ProblemSpec(name=f"rosenbrock-{variant}", p=p, obj=obj,
                       init_mu=np.zeros(p), known_optimum=np.ones(p))


def dixon_price(p: int) -> ProblemSpec:
    """1/p-scaled Dixon-Price: (w_1 - 1)^2 + sum_i i (2 w_i^2 - w_{i-1})^2."""
    if p < 2:
        raise ContractViolationError("dixon_price needs p >= 2")
    inv_p = 1.0 / p
    coef = np.arange(2, p + 1, dtype=float)   # i for terms 2..p

    def loss(w):
        terms = coef * (2.0 * w[1:] ** 2 - w[:-1]) ** 2
        return inv_p * float((w[0] - 1.0) ** 2 + np.sum(terms))

    def grad(w):
        g = np.zeros_like(w)
        resid = 2.0 * w[1:] ** 2 - w[:-1]
        g[0] += 2.0 * (w[0] - 1.0)
        g[:-1] += -2.0 * coef * resid
        g[1:] += 8.0 * coef * w[1:] * resid
        return inv_p * g

    def hess_bands(w):
        resid = 2.0 * w[1:] ** 2 - w[:-1]
        diag = np.zeros_like(w)
        diag[0] += 2.0
        diag[:-1] += 2.0 * coef
        diag[1:] += 48.0 * coef * w[1:] ** 2 - 8.0 * coef * w[:-1]
        off = -8.0 * coef * w[1:]
        return inv_p * diag, inv_p * off

    obj = _tridiagonal_objective(loss, grad, hess_bands)
    opt = 2.0 ** (-(2.0 ** np.arange(1, p + 1) - 2.0) / 2.0 ** np.arange(1, p + 1))
    return ProblemSpec(name="dixon-price", p=p, obj=obj, init_mu=np.zeros(p),
                       known_optimum=opt)


def _tridiagonal_objective(loss, grad, hess_bands) -> ObjectiveHandle:
    def hvp(w, v):
        diag, off = hess_bands(w)
        out = diag * v
        out[:-1] += off * v[1:]
        out[1:] += off * v[:-1]
        return out

    def hess_diag(w):
        return hess_bands(w)[0]

    return ObjectiveHandle(loss=loss, grad=grad, hvp=hvp, hess_diag=hess_diag)


# ---------------------------------------------------------------------------
# metric nearness over SPD matrices
# ---------------------------------------------------------------------------

def metric_nearness(p: int, n_train: int, n_test: int, seed: int,
                    d: Optional[int] = None) -> ProblemSpec:
    """l(W) = (1/2N) sum_i ||W Q x_i - x_i||^2 with SPD Q; the optimum is Q^{-1}."""
    if min(n_train, n_test) < 1:
        raise ContractViolationError("need at least one train and test point")
    if d is not None and d != p:
        raise ContractViolationError("data dimension must equal p")
    rng = np.random.default_rng(seed)
    q_eigvec, _ = np.linalg.qr(rng.standard_normal((p, p)))
    q = q_eigvec @ np.diag(rng.uniform(0.5, 2.0, size=p)) @ q_eigvec.T
    q = (q + q.T) / 2
    x_train = rng.standard_normal((n_train, p))
    x_test = rng.standard_normal((n_test, p))
    z_train = x_train @ q    # rows are Q x_i
    z_test = x_test @ q

    def make_obj(x, z):
        n = x.shape[0]

        def loss(w):
            r = z @ w.T - x
            return float(np.sum(r * r)) / (2.0 * n)

        def grad(w):
            r = z @ w.T - x
            g = r.T @ z / n
            return (g + g.T) / 2     # gradient on the symmetric domain

        return ObjectiveHandle(loss=loss, grad=grad)

    full = make_obj(x_train, z_train)
    test_obj = make_obj(x_test, z_test)

    def batch_objective(indices):
        return make_obj(x_train[indices], z_train[indices])

    def epoch_batches(batch_size):
        perm = np.random.default_rng(seed + 1).permutation(n_train)
        return [perm[i:i + batch_size] for i in range(0, n_train, batch_size)]

    return ProblemSpec(name="metric-nearness", p=p, obj=full, family="wishart",
                       recommended_gamma=0.0,
                       known_optimum=np.linalg.inv(q),
                       data={"q": q, "x_train": x_train, "x_test": x_test},
                       batch_objective=batch_objective,
                       epoch_batches=epoch_batches,
                       test_loss=test_obj.loss)


# ---------------------------------------------------------------------------
# Student's t mixture target
# ---------------------------------------------------------------------------

def student_t_mixture_target(p: int, C: int, s: float, alpha: float,
                             seed: int) -> ProblemSpec:
    """l(w) = -log[(1/C) sum_c T(w | u_c, V_c, alpha)] with analytic derivatives."""
    if C < 1 or alpha <= 0:
        raise ContractViolationError("need C >= 1 and alpha > 0")
    rng = np.random.default_rng(seed)
    centers = rng.uniform(-s, s, size=(C, p))
    # SPD scale matrices with controlled eigenvalue spread: diagonal plus a
    # scaled rank-one part
    scales, scale_invs, logdets, diag_invs = [], [], [], []
    for _ in range(C):
        dvec = rng.uniform(0.6, 1.6, size=p)
        v = rng.standard_normal(p)
        v /= np.linalg.norm(v)
        vc = np.diag(dvec) + 0.5 * np.outer(v, v)
        scales.append(vc)
        scale_invs.append(np.linalg.inv(vc))
        logdets.append(np.linalg.slogdet(vc)[1])
        diag_invs.append(np.diag(scale_invs[-1]).copy())
    from scipy.special import gammaln, logsumexp

    const = (gammaln((alpha + p) / 2.0) - gammaln(alpha / 2.0)
             - 0.5 * p * np.log(alpha * np.pi))
    ap = alpha + p

    def _component_state(w):
        diffs = w[None, :] - centers            # (C, p)
        vd = np.stack([scale_invs[c] @ diffs[c] for c in range(C)])
        quad = np.einsum("cp,cp->c", diffs, vd)
        log_t = const - 0.5 * np.asarray(logdets) \
            - 0.5 * ap * np.log1p(quad / alpha)
        log_mix = logsumexp(log_t)
        r = np.exp(log_t - log_mix)
        return diffs, vd, quad, r, log_mix

    def loss(w):
        _, _, _, _, log_mix = _component_state(w)
        return float(np.log(C) - log_mix)

    def grad(w):
        _, vd, quad, r, _ = _component_state(w)
        comp_scores = -(ap / (alpha + quad))[:, None] * vd
        return -np.einsum("c,cp->p", r, comp_scores)

    def _score_pieces(w):
        _, vd, quad, r, _ = _component_state(w)
        scale = ap / (alpha + quad)             # (C,)
        comp_scores = -scale[:, None] * vd
        mix_score = np.einsum("c,cp->p", r, comp_scores)
        return vd, quad, r, scale, comp_scores, mix_score

    def hvp(w, v):
        vd, quad, r, scale, comp_scores, mix_score = _score_pieces(w)
        out = np.zeros(p)
        for c in range(C):
            # hess log T_c = -scale*Vinv + 2*scale^2/ap * Vinv d d^T Vinv
            hc_v = (-scale[c] * (scale_invs[c] @ v)
                    + (2.0 * scale[c] ** 2 / ap) * vd[c] * (vd[c] @ v))
            out += r[c] * (hc_v + comp_scores[c] * (comp_scores[c] @ v))
        out -= mix_score * (mix_score @ v)
        return -out

    def hess_diag(w):
        vd, quad, r, scale, comp_scores, mix_score = _score_pieces(w)
        out = np.zeros(p)
        for c in range(C):
            hc_d = (-scale[c] * diag_invs[c]
                    + (2.0 * scale[c] ** 2 / ap) * vd[c] ** 2)
            out += r[c] * (hc_d + comp_scores[c] ** 2)
        out -= mix_score ** 2
        return -out

    obj = ObjectiveHandle(loss=loss, grad=grad, hvp=hvp, hess_diag=hess_diag)
    return ProblemSpec(name="student-t-mixture", p=p, obj=obj,
                       family="mixture_target", recommended_gamma=1.0,
                       init_mu=np.zeros(p),
                       data={"centers": centers, "scales": scales})


# ---------------------------------------------------------------------------
# 1-D Bayesian logistic regression
# ---------------------------------------------------------------------------

def logistic_1d(seed: int, n_data: int = 50) -> ProblemSpec:
    """Synthetic 1-D logistic likelihood plus a standard-normal prior."""
    rng = np.random.default_rng(seed)
    x = rng.uniform(-3.0, 3.0, size=n_data)
    true_w = 2.0
    y = np.where(rng.uniform(size=n_data) < sigmoid(true_w * x), 1.0, -1.0)
    yx = y * x

    def loss(w):
        wv = float(np.asarray(w).reshape(-1)[0]) if np.ndim(w) else float(w)
        margins = yx * wv
        nll = float(np.sum(np.logaddexp(0.0, -margins)))
        return nll + 0.5 * wv ** 2 + 0.5 * np.log(2.0 * np.pi)

    def grad(w):
        wv = float(np.asarray(w).reshape(-1)[0]) if np.ndim(w) else float(w)
        return np.array([float(np.sum(-yx * sigmoid(-yx * wv))) + wv])

    def hess_scalar(wv):
        sig = sigmoid(yx * wv)
        return float(np.sum(yx ** 2 * sig * (1.0 - sig))) + 1.0

    def hvp(w, v):
        wv = float(np.asarray(w).reshape(-1)[0]) if np.ndim(w) else float(w)
        return hess_scalar(wv) * np.asarray(v, dtype=float)

    def hess_diag(w):
        wv = float(np.asarray(w).reshape(-1)[0]) if np.ndim(w) else float(w)
        return np.array([hess_scalar(wv)])

    obj = ObjectiveHandle(loss=loss, grad=grad, hvp=hvp, hess_diag=hess_diag)
    return ProblemSpec(name="logistic-1d", p=1, obj=obj,
                       recommended_gamma=1.0, init_mu=np.zeros(1),
                       data={"x": x, "y": y})
