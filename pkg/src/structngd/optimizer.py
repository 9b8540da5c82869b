"""Natural-gradient steppers for every family, baselines, and the run loop.

Each stepper maps (state, gradient bundle, config) to a new state through the
local parameterization: a plain step in the local coordinates followed by the
group-respecting map back to the auxiliary parameters.  Constraint
preservation is structural: factors stay inside their matrix group, so
precisions/covariances remain positive definite after every step.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np

from . import matgroup
from .distributions import (
    GaussianSqrtCov,
    GaussianSqrtPrec,
    MatrixGaussianKron,
    MixtureGaussSqrtPrec,
    UnivariateEF,
    WishartSqrtPrec,
    multivariate_trigamma,
    sigmoid,
)
from .errors import CapabilityError, ContractViolationError, SingularityError
from .estimators import (
    GradBundle,
    ObjectiveHandle,
    entropy_correct,
    mixture_grads,
    reinforce_gauss_cov,
    reparam_gauss_cov,
    stein_gauss,
    wishart_grads_at_mean,
    wishart_grads_reparam,
)
from .matgroup import (
    GroupElement,
    LocalDirection,
    StructureSpec,
    c_mask,
    group_mul,
    h_map,
    exp_map,
    identity_element,
    kappa_project,
)

ESTIMATORS = ("mean", "stein", "reinforce", "reparam")
# inverse softplus of 1: the default Wishart dof scalar gives n = p + 1
B_SCALAR_INIT = float(np.log(np.expm1(1.0)))


@dataclass(frozen=True)
class NgdConfig:
    beta: float
    gamma: float = 0.0
    iters: int = 100
    estimator: str = "mean"
    mc_samples: int = 1
    seed: int = 0
    momentum: Optional[tuple] = None         # (c1, c2)
    structure: Optional[StructureSpec] = None
    map: str = "h"                           # h | exp

    def __post_init__(self):
        if self.beta <= 0:
            raise ContractViolationError("beta must be positive")
        if self.gamma < 0:
            raise ContractViolationError("gamma must be nonnegative")
        if self.estimator not in ESTIMATORS:
            raise ContractViolationError(f"unknown estimator {self.estimator!r}")
        if self.map not in ("h", "exp"):
            raise ContractViolationError(f"unknown map {self.map!r}")
        if self.momentum is not None:
            c1, c2 = self.momentum
            if not (0 <= c1 < 1 and 0 <= c2 < 1):
                raise ContractViolationError("momentum constants must be in [0, 1)")


@dataclass(frozen=True)
class DistState:
    dist: object
    iteration: int = 0
    momentum_z: Optional[np.ndarray] = None


def _step_seed(cfg: NgdConfig, iteration: int):
    return (cfg.seed, iteration)


# ---------------------------------------------------------------------------
# Gaussian steppers
# ---------------------------------------------------------------------------

def _prec_factor_step(b: GroupElement, g_mu, g_sigma, kappa_m, mu, beta):
    """Shared core: mu and factor update for a precision-form Gaussian."""
    mu_new = mu - beta * b.solve_transpose(b.solve(g_mu))
    if kappa_m is None:
        bd = b.dense()
        x = 2.0 * np.linalg.solve(bd, np.linalg.solve(bd, g_sigma).T).T
        kappa_m = kappa_project((x + x.T) / 2, b.structure)
    step_dir = beta * (c_mask(b.structure) * kappa_m)
    b_new = group_mul(b, h_map(step_dir))
    return mu_new, b_new


def step_gauss_prec(state: DistState, gb: GradBundle, cfg: NgdConfig) -> DistState:
    """mu <- mu - beta S^{-1} g_mu; B <- B h(beta C * kappa(2 B^{-1} g_Sigma B^{-T}))."""
    dist = state.dist
    if not isinstance(dist, GaussianSqrtPrec):
        raise ContractViolationError("state is not a precision-form Gaussian")
    mu_new, b_new = _prec_factor_step(dist.b, gb.g_mu, gb.g_sigma, gb.kappa_m,
                                      dist.mu, cfg.beta)
    return DistState(dist=GaussianSqrtPrec(mu=mu_new, b=b_new),
                     iteration=state.iteration + 1,
                     momentum_z=state.momentum_z)


def step_gauss_cov(state: DistState, gb: GradBundle, cfg: NgdConfig,
                   map_kind: Optional[str] = None) -> DistState:
    """mu <- mu - beta Sigma g_mu; A <- A Map(-beta A^T g_Sigma A)."""
    dist = state.dist
    if not isinstance(dist, GaussianSqrtCov):
        raise ContractViolationError("state is not a covariance-form Gaussian")
    if dist.a.structure.kind not in ("full", "diagonal"):
        raise CapabilityError("covariance-form steps support full/diagonal factors")
    map_kind = map_kind or cfg.map
    a = dist.a
    mu_new = dist.mu - cfg.beta * a.apply(a.apply_transpose(gb.g_mu))
    x = a.apply_transpose(a.apply_transpose(gb.g_sigma).T)   # A^T g_Sigma A
    m = kappa_project(-cfg.beta * (x + x.T) / 2, a.structure)
    mapper = exp_map if map_kind == "exp" else h_map
    a_new = group_mul(a, mapper(m))
    return DistState(dist=GaussianSqrtCov(mu=mu_new, a=a_new),
                     iteration=state.iteration + 1)


# ---------------------------------------------------------------------------
# Wishart stepper
# ---------------------------------------------------------------------------

def step_wishart(state: DistState, gb: GradBundle, cfg: NgdConfig) -> DistState:
    """B <- B Exp((beta/n^2) B^{-1} G_V B^{-T}); b <- b - beta c_t [...]."""
    dist = state.dist
    if not isinstance(dist, WishartSqrtPrec):
        raise ContractViolationError("state is not a Wishart")
    n = dist.n_dof
    p = dist.p
    big_b = dist.B
    y = big_b.solve(gb.wishart_gv)
    x = big_b.solve(y.T).T                  # B^{-1} G_V B^{-T}
    m = kappa_project((cfg.beta / n ** 2) * (x + x.T) / 2, big_b.structure)
    mapper = exp_map if cfg.map == "exp" else h_map
    b_new = group_mul(big_b, mapper(m))
    c_t = (2.0 / sigmoid(dist.b_scalar)) / (
        -2.0 * p / n + multivariate_trigamma(n / 2.0, p))
    s_inv = dist.scale_dense()
    b_scalar_new = dist.b_scalar - cfg.beta * c_t * (
        gb.wishart_gn - float(np.sum(gb.wishart_gv * s_inv)) / n)
    return DistState(dist=WishartSqrtPrec(b_scalar=b_scalar_new, B=b_new),
                     iteration=state.iteration + 1)


# ---------------------------------------------------------------------------
# matrix-Gaussian stepper
# ---------------------------------------------------------------------------

def step_matgauss(state: DistState, gb: GradBundle, cfg: NgdConfig) -> DistState:
    dist = state.dist
    if not isinstance(dist, MatrixGaussianKron):
        raise ContractViolationError("state is not a matrix Gaussian")
    if dist.a.structure.kind != "full" or dist.bm.structure.kind != "full":
        raise CapabilityError("matrix-Gaussian steps currently take full factors")
    d, p = dist.d, dist.p
    t = state.iteration + 1
    z = state.momentum_z
    if cfg.momentum is not None:
        c1, c2 = cfg.momentum
        z = (1.0 - c1) * gb.matgauss_e + (c1 * z if z is not None else 0.0)
        beta_t = (1.0 - c2 ** t) / (1.0 - c1 ** t)
        mean_dir = z
    else:
        beta_t = cfg.beta
        mean_dir = gb.matgauss_e
    x = dist.bm.solve_transpose(dist.bm.solve(mean_dir))       # S_U^{-1} dir
    w = dist.a.solve_transpose(dist.a.solve(x.T)).T            # ... S_V^{-1}
    e_new = dist.E - beta_t * w
    m_a = kappa_project((beta_t / (2.0 * d)) * gb.matgauss_a, dist.a.structure)
    m_b = kappa_project((beta_t / (2.0 * p)) * gb.matgauss_b, dist.bm.structure)
    a_new = group_mul(dist.a, h_map(m_a))
    b_new = group_mul(dist.bm, h_map(m_b))
    return DistState(dist=MatrixGaussianKron(E=e_new, a=a_new, bm=b_new),
                     iteration=t, momentum_z=z)


# ---------------------------------------------------------------------------
# mixture stepper
# ---------------------------------------------------------------------------

def step_mixture(state: DistState, gbs: Sequence[GradBundle],
                 cfg: NgdConfig) -> DistState:
    dist = state.dist
    if not isinstance(dist, MixtureGaussSqrtPrec):
        raise ContractViolationError("state is not a Gaussian mixture")
    if len(gbs) != dist.K:
        raise ContractViolationError("need one gradient bundle per component")
    beta_k = cfg.beta * dist.K               # beta / pi_k with pi_k = 1/K
    comps = []
    for comp, gb in zip(dist.components, gbs):
        mu_new, b_new = _prec_factor_step(comp.b, gb.g_mu, gb.g_sigma,
                                          gb.kappa_m, comp.mu, beta_k)
        comps.append(GaussianSqrtPrec(mu=mu_new, b=b_new))
    return DistState(dist=MixtureGaussSqrtPrec(components=comps),
                     iteration=state.iteration + 1)


# ---------------------------------------------------------------------------
# univariate exponential-family stepper
# ---------------------------------------------------------------------------

def step_univariate_ef(state: DistState, grad_m: np.ndarray,
                       cfg: NgdConfig) -> DistState:
    """lambda <- lambda - beta [d tau / d lambda]^{-1} ghat_tau."""
    dist = state.dist
    if not isinstance(dist, UnivariateEF):
        raise ContractViolationError("state is not a univariate EF")
    if dist.link == "softplus":
        jac = sigmoid(dist.lam)
        if np.any(jac < 1e-300):
            raise SingularityError("softplus link Jacobian underflowed")
        lam_new = dist.lam - cfg.beta * np.asarray(grad_m) / jac
    else:
        lam_new = dist.lam - cfg.beta * np.asarray(grad_m)
    return DistState(dist=replace(dist, lam=lam_new),
                     iteration=state.iteration + 1)


# ---------------------------------------------------------------------------
# baselines
# ---------------------------------------------------------------------------

@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0


def adam_step(params, grad, state: Optional[AdamState], lr,
              beta1=0.9, beta2=0.999, eps=1e-8):
    if state is None:
        state = AdamState(m=np.zeros_like(params), v=np.zeros_like(params))
    t = state.t + 1
    m = beta1 * state.m + (1 - beta1) * grad
    v = beta2 * state.v + (1 - beta2) * grad ** 2
    m_hat = m / (1 - beta1 ** t)
    v_hat = v / (1 - beta2 ** t)
    new_params = params - lr * m_hat / (np.sqrt(v_hat) + eps)
    return new_params, AdamState(m=m, v=v, t=t)


def gd_step(params, grad, lr):
    return params - lr * grad


# ---------------------------------------------------------------------------
# 1-D Gaussian steppers for the parameterization-invariance comparison
# ---------------------------------------------------------------------------

def ngd_1d_gauss(obj: ObjectiveHandle, beta: float, gamma: float, iters: int,
                 parameterization: str) -> np.ndarray:
    """At-mean NGD on a 1-D Gaussian under two auxiliary parameterizations.

    'sqrt_prec' updates b with sigma^2 = 1/b^2, 'sqrt_cov' updates a with
    sigma^2 = a^2; both use the exact scalar exponential map.  Returns the
    (mu, sigma^2) trajectory including the initial point.
    """
    if parameterization not in ("sqrt_prec", "sqrt_cov"):
        raise ContractViolationError(f"unknown parameterization {parameterization!r}")
    mu, aux = 0.0, 1.0            # b or a; sigma^2 = 1 either way
    traj = [(mu, 1.0)]
    for _ in range(iters):
        var = 1.0 / aux ** 2 if parameterization == "sqrt_prec" else aux ** 2
        g_mu = float(obj.grad(np.array([mu]))[0])
        g_var = 0.5 * (float(obj.hess_diag(np.array([mu]))[0]) - gamma / var)
        mu = mu - beta * var * g_mu
        if parameterization == "sqrt_prec":
            aux = aux * np.exp(beta * var * g_var)
            var = 1.0 / aux ** 2
        else:
            aux = aux * np.exp(-beta * var * g_var)
            var = aux ** 2
        traj.append((mu, var))
    return np.asarray(traj)


def gd_1d_gauss(obj: ObjectiveHandle, beta: float, gamma: float, iters: int,
                parameterization: str) -> np.ndarray:
    """Euclidean GD on (mu, log sigma) or (mu, log sigma^2); not invariant."""
    if parameterization not in ("log_std", "log_var"):
        raise ContractViolationError(f"unknown parameterization {parameterization!r}")
    mu, log_var = 0.0, 0.0
    traj = [(mu, 1.0)]
    for _ in range(iters):
        var = float(np.exp(log_var))
        g_mu = float(obj.grad(np.array([mu]))[0])
        g_var = 0.5 * (float(obj.hess_diag(np.array([mu]))[0]) - gamma / var)
        mu = mu - beta * g_mu
        if parameterization == "log_var":
            log_var = log_var - beta * var * g_var
        else:
            # gradient wrt log sigma is twice the one wrt log sigma^2
            log_var = log_var - 4.0 * beta * var * g_var
        traj.append((mu, var))
    return np.asarray(traj)


# ---------------------------------------------------------------------------
# run loop
# ---------------------------------------------------------------------------

def _gauss_bundle(dist, obj, cfg: NgdConfig, iteration: int) -> GradBundle:
    seed = _step_seed(cfg, iteration)
    if cfg.estimator == "mean":
        gb = stein_gauss(dist, obj, seed, 1, at_mean=True)
    elif cfg.estimator == "stein":
        gb = stein_gauss(dist, obj, seed, cfg.mc_samples)
    elif cfg.estimator == "reparam":
        gb = reparam_gauss_cov(dist, obj, seed, cfg.mc_samples)
    else:
        raise ContractViolationError(
            f"estimator {cfg.estimator!r} not valid for this family")
    return entropy_correct(gb, dist, cfg.gamma)


def _wrap_entropy_loss(obj: ObjectiveHandle, dist, gamma: float) -> ObjectiveHandle:
    """Redefine the loss to include gamma log q at the frozen parameters."""
    from .distributions import log_density

    if gamma == 0.0:
        return obj
    return ObjectiveHandle(
        loss=lambda w: obj.loss(w) + gamma * log_density(dist, w),
        grad=obj.grad, hvp=obj.hvp, hess_diag=obj.hess_diag)


def init_state(problem, cfg: NgdConfig, mixture_k: int = 1) -> DistState:
    """Identity-factor initialization; means from the problem spec."""
    structure = cfg.structure or StructureSpec.full(problem.p)
    if problem.family == "wishart":
        return DistState(dist=WishartSqrtPrec(
            b_scalar=B_SCALAR_INIT, B=identity_element(structure)))
    if problem.family == "mixture_target":
        rng = np.random.default_rng(cfg.seed)
        spread = float(np.max(np.abs(problem.data.get("centers", [[1.0]]))))
        comps = [GaussianSqrtPrec(
            mu=rng.uniform(-spread, spread, size=problem.p),
            b=identity_element(structure)) for _ in range(mixture_k)]
        return DistState(dist=MixtureGaussSqrtPrec(components=comps))
    mu0 = problem.init_mu if problem.init_mu is not None else np.zeros(problem.p)
    if cfg.estimator in ("reinforce", "reparam"):
        return DistState(dist=GaussianSqrtCov(mu=mu0.copy(),
                                              a=identity_element(structure)))
    return DistState(dist=GaussianSqrtPrec(mu=mu0.copy(),
                                           b=identity_element(structure)))


def _trace_row(iteration, loss, grad_norm, wall_ms):
    return {"iter": iteration, "loss": float(loss),
            "grad_norm": float(grad_norm), "wall_ms": float(wall_ms)}


def run_loop(problem, cfg: NgdConfig, mixture_k: int = 1,
             batch_size: Optional[int] = None) -> list:
    """Execute cfg.iters natural-gradient steps; returns the trace.

    Row t holds the expected-loss estimate of the state after t steps (row 0
    is the initial state); for Monte Carlo estimators the estimate reuses the
    samples of the step leaving that state.
    """
    state = init_state(problem, cfg, mixture_k=mixture_k)
    family = problem.family
    obj = problem.obj
    batches = None
    if batch_size is not None:
        if problem.epoch_batches is None:
            raise ContractViolationError("problem does not support batching")
        batches = problem.epoch_batches(batch_size)
    trace = []
    for t in range(1, cfg.iters + 1):
        t0 = time.perf_counter()
        step_obj = obj
        if batches is not None:
            step_obj = problem.batch_objective(batches[(t - 1) % len(batches)])
        try:
            state, loss_pre, grad_norm = _one_step(problem, state, step_obj, cfg, t)
        except (SingularityError, ArithmeticError) as exc:
            raise type(exc)(f"step {t} failed: {exc}") from exc
        wall_ms = (time.perf_counter() - t0) * 1e3
        trace.append(_trace_row(t - 1, loss_pre, grad_norm, wall_ms))
    final_loss, final_grad = _final_estimate(problem, state, obj, cfg)
    trace.append(_trace_row(cfg.iters, final_loss, final_grad, 0.0))
    return trace


def _one_step(problem, state: DistState, obj, cfg: NgdConfig, t: int):
    family = problem.family
    if family == "gauss":
        dist = state.dist
        if cfg.estimator == "reinforce":
            wrapped = _wrap_entropy_loss(obj, dist, cfg.gamma)
            gb = reinforce_gauss_cov(dist, wrapped, _step_seed(cfg, t),
                                     cfg.mc_samples)
            new = step_gauss_cov(state, gb, cfg)
        else:
            gb = _gauss_bundle(dist, obj, cfg, t)
            if isinstance(dist, GaussianSqrtCov):
                new = step_gauss_cov(state, gb, cfg)
            else:
                new = step_gauss_prec(state, gb, cfg)
        grad_norm = (np.linalg.norm(obj.grad(dist.mu))
                     if obj.has_grad else np.nan)
        return new, gb.mean_loss, grad_norm
    if family == "wishart":
        dist = state.dist
        if cfg.estimator == "mean":
            gb = wishart_grads_at_mean(dist, obj)
        elif cfg.estimator == "reparam":
            gb = wishart_grads_reparam(dist, obj, _step_seed(cfg, t),
                                       cfg.mc_samples)
        else:
            raise ContractViolationError(
                f"estimator {cfg.estimator!r} not valid for Wishart runs")
        new = step_wishart(state, gb, cfg)
        grad_norm = (np.linalg.norm(obj.grad(dist.mean_dense()))
                     if obj.has_grad else np.nan)
        return new, gb.mean_loss, grad_norm
    if family == "mixture_target":
        dist = state.dist
        gbs = mixture_grads(dist, obj, _step_seed(cfg, t), cfg.mc_samples,
                            cfg.gamma)
        new = step_mixture(state, gbs, cfg)
        grad_norm = max(np.linalg.norm(gb.g_mu) for gb in gbs)
        return new, gbs[0].mean_loss, grad_norm
    raise ContractViolationError(f"unknown problem family {family!r}")


def _final_estimate(problem, state: DistState, obj, cfg: NgdConfig):
    family = problem.family
    if family == "gauss":
        mu = state.dist.mu
        if cfg.estimator == "mean":
            loss = obj.loss(mu)
        else:
            from .distributions import sample_gauss
            w = sample_gauss(state.dist, _step_seed(cfg, cfg.iters + 1),
                             cfg.mc_samples)
            loss = float(np.mean([obj.loss(wi) for wi in w]))
        grad_norm = np.linalg.norm(obj.grad(mu)) if obj.has_grad else np.nan
        return loss, grad_norm
    if family == "wishart":
        z = state.dist.mean_dense()
        if cfg.estimator == "mean":
            loss = obj.loss(z)
        else:
            from .distributions import sample_wishart
            w = sample_wishart(state.dist, _step_seed(cfg, cfg.iters + 1),
                               cfg.mc_samples)
            loss = float(np.mean([obj.loss(wi) for wi in w]))
        grad_norm = np.linalg.norm(obj.grad(z)) if obj.has_grad else np.nan
        return loss, grad_norm
    if family == "mixture_target":
        from .distributions import log_density, sample_mixture
        w = sample_mixture(state.dist, _step_seed(cfg, cfg.iters + 1),
                           max(cfg.mc_samples, 2))
        losses = np.array([problem.obj.loss(wi) for wi in w])
        loss = float(np.mean(losses + cfg.gamma * log_density(state.dist, w)))
        return loss, np.nan
    raise ContractViolationError(f"unknown problem family {family!r}")


def run_baseline(problem, optimizer: str, lr: float, iters: int) -> list:
    """Adam or plain GD on the objective, same trace schema."""
    obj = problem.obj
    obj.require("grad")
    w = (problem.init_mu.copy() if problem.init_mu is not None
         else np.zeros(problem.p))
    state = None
    trace = [_trace_row(0, obj.loss(w), np.linalg.norm(obj.grad(w)), 0.0)]
    for t in range(1, iters + 1):
        t0 = time.perf_counter()
        g = obj.grad(w)
        if optimizer == "adam":
            w, state = adam_step(w, g, state, lr)
        elif optimizer == "gd":
            w = gd_step(w, g, lr)
        else:
            raise ContractViolationError(f"unknown baseline {optimizer!r}")
        wall_ms = (time.perf_counter() - t0) * 1e3
        trace.append(_trace_row(t, obj.loss(w), np.linalg.norm(obj.grad(w)),
                                wall_ms))
    return trace
