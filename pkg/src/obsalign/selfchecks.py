"""Quick invariant checks behind the selftest subcommand.

These are trimmed-down versions of the test suite's property checks,
meant to validate an installation in well under a minute.
"""
from __future__ import annotations

import numpy as np

from .critics import Critic, gradient_penalty, penalty_term
from .densities import DiscreteDist, GaussianMixture, preset_mixtures
from .diffcore import DenseNet, backward, grad_input, grad_params
from .flowgen import FlowGenerator, kl_to_base
from .metrics import kabsch_rmsd, w1_empirical
from .observables import rg_observable
from .oracle import grid_align, tilt_weights, w1_assignment_bruteforce, w1_discrete_1d


def _fd_loss_grads(param_value, loss_at, h=1e-5):
    grads = np.zeros_like(param_value)
    it = np.nditer(param_value, flags=["multi_index"])
    for _ in it:
        idx = it.multi_index
        orig = param_value[idx]
        param_value[idx] = orig + h
        hi = loss_at()
        param_value[idx] = orig - h
        lo = loss_at()
        param_value[idx] = orig
        grads[idx] = (hi - lo) / (2 * h)
    return grads


def _assert_close(a, b, rtol, what):
    denom = max(np.max(np.abs(b)), 1e-8)
    err = np.max(np.abs(np.asarray(a) - np.asarray(b))) / denom
    if err > rtol:
        raise AssertionError(f"{what}: relative error {err:.3g} > {rtol}")


def check_grad_params():
    rng = np.random.default_rng(11)
    net = DenseNet([3, 5, 1], rng)
    x = rng.standard_normal((4, 3))
    analytic = grad_params(net, x, lambda out: out.square().mean())

    def loss():
        return float((net.forward(x).value ** 2).mean())

    for p, g in zip(net.params(), analytic):
        _assert_close(g, _fd_loss_grads(p.value, loss), 1e-4, "parameter gradient")


def check_grad_input():
    rng = np.random.default_rng(12)
    net = DenseNet([4, 6, 1], rng)
    x = rng.standard_normal((3, 4))
    g = grad_input(net, x)
    for r in range(3):
        for c in range(4):
            h = 1e-5
            xp, xm = x.copy(), x.copy()
            xp[r, c] += h
            xm[r, c] -= h
            fd = (net.forward(xp).value[r, 0] - net.forward(xm).value[r, 0]) / (2 * h)
            _assert_close(g[r, c], fd, 1e-4, "input gradient")


def check_penalty_gradient():
    rng = np.random.default_rng(13)
    critic = Critic(2, rng.standard_normal((64, 2)), rng, hidden=(6,), lam_gp=10.0)
    a = rng.standard_normal((5, 2))
    b = rng.standard_normal((5, 2))
    loss = penalty_term(critic, a, b, np.random.default_rng(5))
    backward(loss)
    # the final bias shifts scores uniformly and never enters the penalty
    analytic = [np.zeros_like(p.value) if p.grad is None else p.grad.copy()
                for p in critic.net.params()]

    def value():
        return gradient_penalty(critic, a, b, np.random.default_rng(5))

    for p, g in zip(critic.net.params(), analytic):
        _assert_close(g, _fd_loss_grads(p.value, value), 1e-3, "penalty gradient")


def check_flow_roundtrip():
    rng = np.random.default_rng(14)
    base = GaussianMixture([[0.0, 0.0]], [1.0], [1.0])
    gen = FlowGenerator.init_identity(base, 4, (8,), rng)
    for p in gen.params():
        p.value += 0.05 * rng.standard_normal(p.value.shape)
    z = rng.standard_normal((50, 2))
    x, _ = gen.forward(z)
    if np.max(np.abs(gen.inverse(x) - z)) > 1e-8:
        raise AssertionError("flow inverse does not recover inputs")
    ident = FlowGenerator.init_identity(base, 4, (8,), np.random.default_rng(3))
    mean, se = kl_to_base(ident, 100, np.random.default_rng(4))
    if mean != 0.0 or se != 0.0:
        raise AssertionError("identity generator must have exactly zero divergence")


def check_w1_oracles():
    rng = np.random.default_rng(15)
    for _ in range(10):
        a = rng.standard_normal(6)
        b = rng.standard_normal(6)
        brute = w1_assignment_bruteforce(a, b)
        _assert_close(w1_empirical(a, b), brute, 1e-10, "empirical vs assignment W1")
        pa = DiscreteDist(a, np.full(6, 1 / 6))
        pb = DiscreteDist(b, np.full(6, 1 / 6))
        _assert_close(w1_discrete_1d(pa, pb), brute, 1e-10, "discrete vs assignment W1")


def check_kabsch():
    rng = np.random.default_rng(16)
    p = rng.standard_normal((7, 3))
    angle = 0.7
    rot = np.array([[np.cos(angle), -np.sin(angle), 0.0],
                    [np.sin(angle), np.cos(angle), 0.0],
                    [0.0, 0.0, 1.0]])
    if kabsch_rmsd(p, p @ rot.T + 1.5) > 1e-8:
        raise AssertionError("rigid copy should superpose exactly")
    chiral = np.array([[0.0, 0, 0], [1.0, 0, 0], [0, 1.0, 0], [0.3, 0.4, 1.2]])
    mirror = chiral * np.array([1.0, 1.0, -1.0])
    if kabsch_rmsd(chiral, mirror) <= 0.1:
        raise AssertionError("reflection must not superpose")


def check_densities():
    base, target = preset_mixtures("synthetic-cube-v1")
    x = np.array([3.0, 3.0, 3.0])
    direct = np.log(np.sum(
        target.weights
        * (2 * np.pi * target.variances) ** -1.5
        * np.exp(-0.5 * ((x - target.means) ** 2).sum(axis=1) / target.variances)
    ))
    _assert_close(target.logpdf(x), direct, 1e-12, "mixture log-density")
    post = target.posterior(np.array([[3.0, 3.0, 3.0], [0.0, 0.0, 0.0]]))
    if np.max(np.abs(post.sum(axis=1) - 1.0)) > 1e-12:
        raise AssertionError("responsibilities must sum to one")


def check_oracle_tilt():
    w = tilt_weights(np.array([0.5, 0.3, 0.2]), np.array([0.2, 0.3, 0.5]))
    if np.max(np.abs(w - np.array([0.4, 1.0, 2.5]))) > 1e-12:
        raise AssertionError("tilt ratios disagree with direct arithmetic")
    base = DiscreteDist(np.linspace(-2, 2, 16), np.full(16, 1 / 16))
    res = grid_align(base, [np.asarray(base.points)], [base], beta=0.0)
    if np.max(np.abs(res.dist.masses - base.masses)) != 0.0:
        raise AssertionError("beta=0 must return the base exactly")


def check_observable_jacobian():
    rng = np.random.default_rng(17)
    obs = rg_observable(np.array([1.0, 2.0, 1.5]))
    x = rng.standard_normal((2, 9))
    cot = rng.standard_normal((2, 1))
    vjp = obs.vjp(x, cot)
    h = 1e-6
    for c in range(9):
        xp, xm = x.copy(), x.copy()
        xp[:, c] += h
        xm[:, c] -= h
        fd = ((obs(xp) - obs(xm)) / (2 * h) * cot).sum(axis=1)
        _assert_close(vjp[:, c], fd, 1e-4, "observable jacobian action")


def all_checks():
    return [
        ("gradients: parameters vs finite differences", check_grad_params),
        ("gradients: inputs vs finite differences", check_grad_input),
        ("gradients: penalty pathway vs finite differences", check_penalty_gradient),
        ("flow: inverse roundtrip and identity init", check_flow_roundtrip),
        ("transport: empirical and discrete vs assignment", check_w1_oracles),
        ("kabsch: rigid motions and chirality", check_kabsch),
        ("densities: log-density and responsibilities", check_densities),
        ("oracle: tilt ratios and beta=0 solver", check_oracle_tilt),
        ("observables: jacobian action", check_observable_jacobian),
    ]
