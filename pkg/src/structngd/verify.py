"""Self-contained oracle/property suite behind the `verify` subcommand.

Each check returns (name, passed, detail); the CLI prints one row per check.
A test hook can corrupt the C mask to demonstrate that the dense-equivalence
row actually guards the structured kernels.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import matgroup, optimizer
from .distributions import (
    GaussianSqrtCov,
    GaussianSqrtPrec,
    MatrixGaussianKron,
    WishartSqrtPrec,
    multivariate_trigamma,
    sigmoid,
)
from .estimators import (
    GradBundle,
    ObjectiveHandle,
    entropy_correct,
    kappa_via_hvp,
    stein_gauss,
    wishart_grads_at_mean,
)
from .matgroup import StructureSpec, identity_element, precision_dense, random_element
from .optimizer import DistState, NgdConfig, step_gauss_cov, step_gauss_prec, step_wishart
from .oracles import dense_natgrad, dense_step, fim_via_kl, singular_fim_demo


@dataclass
class CheckResult:
    name: str
    passed: bool
    detail: str


def _quadratic(h):
    return ObjectiveHandle(loss=lambda w: 0.5 * w @ h @ w,
                           grad=lambda w: h @ w,
                           hvp=lambda w, v: h @ v,
                           hess_diag=lambda w: np.diag(h).copy())


def _rand_spd(p, rng):
    q = rng.standard_normal((p, p))
    return q @ q.T / p + np.eye(p)


def _max_block_err(fim, tag, target):
    block = fim.block(tag)
    return float(np.max(np.abs(block - target * np.eye(block.shape[0]))))


def check_fim_values():
    rng = np.random.default_rng(0)
    errs = []
    state = GaussianSqrtPrec(mu=rng.standard_normal(3),
                             b=random_element(StructureSpec.block_tri_upper(3, 1), rng))
    fim = fim_via_kl("gauss_prec", state)
    errs += [_max_block_err(fim, "delta", 1.0), _max_block_err(fim, "m_diag", 2.0),
             _max_block_err(fim, "m_pair", 4.0), _max_block_err(fim, "m_asym", 1.0)]

    cov = GaussianSqrtCov(mu=rng.standard_normal(2),
                          a=random_element(StructureSpec.full(2), rng))
    fim = fim_via_kl("gauss_cov", cov)
    errs += [_max_block_err(fim, "delta", 1.0), _max_block_err(fim, "m", 0.5)]

    wis = WishartSqrtPrec(b_scalar=0.6,
                          B=random_element(StructureSpec.full(2), rng))
    fim = fim_via_kl("wishart", wis)
    n = wis.n_dof
    delta_expect = sigmoid(wis.b_scalar) ** 2 * (
        -2.0 * wis.p / n + multivariate_trigamma(n / 2.0, wis.p))
    errs += [_max_block_err(fim, "m", 2.0 * n) / (2.0 * n),
             abs(fim.block("delta")[0, 0] - delta_expect)]

    mg = MatrixGaussianKron(E=rng.standard_normal((2, 2)),
                            a=random_element(StructureSpec.full(2), rng),
                            bm=random_element(StructureSpec.full(2), rng))
    fim = fim_via_kl("matgauss", mg)
    errs += [_max_block_err(fim, "delta", 1.0), _max_block_err(fim, "m", 4.0),
             _max_block_err(fim, "n", 4.0)]
    worst = max(errs)
    return CheckResult("fim-analytic-values", worst < 1e-4,
                       f"max deviation {worst:.2e}")


def check_singular_fim():
    fim, det = singular_fim_demo()
    expected = np.zeros((6, 6))
    expected[0, 0] = expected[0, 3] = expected[3, 0] = expected[3, 3] = 0.5
    expected[1, 1] = expected[2, 2] = 2.0
    expected[4, 4] = expected[5, 5] = 0.5
    err = float(np.max(np.abs(fim.matrix - expected)))
    ok = err < 1e-12 and abs(det) < 1e-10
    return CheckResult("singular-fim-regression", ok,
                       f"entry err {err:.1e}, |det| {abs(det):.1e}")


def structured_vs_dense_err(structure: StructureSpec, seed: int = 0,
                            beta: float = 0.1, gamma: float = 0.7) -> float:
    """One structured step vs the dense natural-gradient solve."""
    rng = np.random.default_rng(seed)
    p = structure.p
    h = _rand_spd(p, rng)
    obj = _quadratic(h)
    state = GaussianSqrtPrec(mu=rng.standard_normal(p),
                             b=random_element(structure, rng))
    g_mu = obj.grad(state.mu)
    kappa = kappa_via_hvp(state.b, obj, state, seed=0, n=1, gamma=gamma,
                          at_mean=True)
    cfg = NgdConfig(beta=beta, gamma=gamma)
    new = step_gauss_prec(DistState(dist=state),
                          GradBundle(g_mu=g_mu, kappa_m=kappa), cfg)
    g_sigma = 0.5 * (h - gamma * precision_dense(state.b))
    nat, coords = dense_natgrad(state, g_mu, g_sigma)
    mu_ref, b_ref = dense_step(state, nat, coords, beta)
    return float(max(np.max(np.abs(new.dist.mu - mu_ref)),
                     np.max(np.abs(new.dist.b.dense() - b_ref))))


def check_structured_vs_dense():
    structures = [
        StructureSpec.full(8),
        StructureSpec.diagonal(8),
        StructureSpec.block_tri_upper(8, 3),
        StructureSpec.block_tri_lower(8, 3),
        StructureSpec.heisenberg_upper(8, 2, 2),
        StructureSpec.heisenberg_lower(8, 2, 2),
    ]
    worst = max(structured_vs_dense_err(s, seed=i)
                for i, s in enumerate(structures))
    return CheckResult("dense-natgrad-equivalence", worst < 1e-10,
                       f"max step deviation {worst:.2e}")


def check_reductions():
    rng = np.random.default_rng(3)
    p, k = 6, 2
    h = _rand_spd(p, rng)
    obj = _quadratic(h)
    mu0 = rng.standard_normal(p)
    cfg = NgdConfig(beta=0.1, gamma=1.0)
    outs = {}
    for s in (StructureSpec.full(p), StructureSpec.block_tri_upper(p, p),
              StructureSpec.block_tri_upper(p, k),
              StructureSpec.heisenberg_upper(p, k, 0)):
        state = DistState(dist=GaussianSqrtPrec(mu=mu0.copy(),
                                                b=identity_element(s)))
        for _ in range(3):
            gb = entropy_correct(stein_gauss(state.dist, obj, 0, 1, at_mean=True),
                                 state.dist, cfg.gamma)
            state = step_gauss_prec(state, gb, cfg)
        outs[(s.kind, s.k1, s.k2)] = (state.dist.mu, state.dist.b.dense())
    err_full = max(np.max(np.abs(outs[("full", p, 0)][i]
                                 - outs[("tri_up", p, 0)][i])) for i in (0, 1))
    err_hs = max(np.max(np.abs(outs[("tri_up", k, 0)][i]
                               - outs[("hs_up", k, 0)][i])) for i in (0, 1))
    worst = max(err_full, err_hs)
    return CheckResult("kp-and-heisenberg-reductions", worst < 1e-12,
                       f"max deviation {worst:.2e}")


def check_order_of_accuracy():
    rng = np.random.default_rng(5)
    p = 5
    b = random_element(StructureSpec.full(p), rng)
    s_mat = precision_dense(b)
    g = _rand_spd(p, rng) - 0.5 * s_mat
    betas = (1e-1, 5e-2, 2.5e-2)
    errs_h, errs_exp = [], []
    state_prec = DistState(dist=GaussianSqrtPrec(mu=np.zeros(p), b=b))
    a = random_element(StructureSpec.full(p), rng)
    sigma_a = precision_dense(a)
    s_a = np.linalg.inv(sigma_a)
    state_cov = DistState(dist=GaussianSqrtCov(mu=np.zeros(p), a=a))
    g_cov = _rand_spd(p, rng) - 0.4 * s_a
    for beta in betas:
        new = step_gauss_prec(state_prec, GradBundle(g_mu=np.zeros(p),
                                                     g_sigma=0.5 * g),
                              NgdConfig(beta=beta))
        ref = s_mat + beta * g + 0.5 * beta ** 2 * g @ np.linalg.solve(s_mat, g)
        errs_h.append(np.linalg.norm(precision_dense(new.dist.b) - ref))
        new_c = step_gauss_cov(state_cov, GradBundle(g_mu=np.zeros(p),
                                                     g_sigma=0.5 * g_cov),
                               NgdConfig(beta=beta, map="exp"))
        s_new = np.linalg.inv(precision_dense(new_c.dist.a))
        ref_c = s_a + beta * g_cov \
            + 0.5 * beta ** 2 * g_cov @ np.linalg.solve(s_a, g_cov)
        errs_exp.append(np.linalg.norm(s_new - ref_c))
    slope_h = float(np.polyfit(np.log(betas), np.log(errs_h), 1)[0])
    slope_exp = float(np.polyfit(np.log(betas), np.log(errs_exp), 1)[0])
    ok = slope_h >= 2.9 and slope_exp >= 2.9
    return CheckResult("order-of-accuracy", ok,
                       f"slopes h {slope_h:.2f}, exp {slope_exp:.2f}")


def check_hvp_kernel():
    rng = np.random.default_rng(7)
    p, k = 16, 3
    h = _rand_spd(p, rng)
    calls = {"n": 0}

    def hvp(w, v):
        calls["n"] += 1
        return h @ v

    obj = ObjectiveHandle(loss=lambda w: 0.5 * w @ h @ w, grad=lambda w: h @ w,
                          hvp=hvp, hess_diag=lambda w: np.diag(h).copy())
    s = StructureSpec.block_tri_upper(p, k)
    b = random_element(s, rng)
    state = GaussianSqrtPrec(mu=rng.standard_normal(p), b=b)
    got = kappa_via_hvp(b, obj, state, seed=0, n=1, gamma=0.3, at_mean=True)
    bd = b.dense()
    gs = 0.5 * (h - 0.3 * precision_dense(b))
    x = 2.0 * np.linalg.solve(bd, np.linalg.solve(bd, gs).T).T
    want = matgroup.kappa_project((x + x.T) / 2, s)
    err = float(np.max(np.abs(got.dense() - want.dense())))
    ok = err < 1e-9 and calls["n"] == k
    return CheckResult("hvp-kernel", ok, f"err {err:.2e}, calls {calls['n']}")


def check_wishart_b_constant():
    rng = np.random.default_rng(9)
    q = _rand_spd(4, rng)
    obj = ObjectiveHandle(
        loss=lambda w: 0.5 * np.linalg.norm(w @ q - np.eye(4)) ** 2,
        grad=lambda w: (w @ q - np.eye(4)) @ q)
    state = DistState(dist=WishartSqrtPrec(
        b_scalar=0.4, B=random_element(StructureSpec.full(4), rng)))
    worst = 0.0
    for _ in range(5):
        gb = wishart_grads_at_mean(state.dist, obj)
        new = step_wishart(state, gb, NgdConfig(beta=0.05, map="exp"))
        worst = max(worst, abs(new.dist.b_scalar - state.dist.b_scalar))
        state = new
    return CheckResult("wishart-b-constant", worst < 1e-12,
                       f"max |b drift| {worst:.1e}")


def run_checks(fault: str | None = None) -> list[CheckResult]:
    """Run the suite; `fault='c-mask'` corrupts the mask as a self-test."""
    results = [
        check_fim_values(),
        check_singular_fim(),
    ]
    if fault == "c-mask":
        original = optimizer.c_mask

        def corrupted(structure):
            mask = original(structure)
            return 1.3 * mask

        optimizer.c_mask = corrupted
        try:
            results.append(check_structured_vs_dense())
        finally:
            optimizer.c_mask = original
    else:
        results.append(check_structured_vs_dense())
    results += [
        check_reductions(),
        check_order_of_accuracy(),
        check_hvp_kernel(),
        check_wishart_b_constant(),
    ]
    return results
