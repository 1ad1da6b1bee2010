"""Adversarial observable alignment of a flow generator, plus the
moment-matching (expectation alignment) baseline.

The generator starts as an exact copy of the base density and ascends
    -KL(model || base) - beta * sum_i gap_i
where each gap is a per-observable critic's estimate of the transport
distance between model and reference pushforwards. Critics descend the
negated gap plus the gradient penalty, so their trained gap approaches
the Wasserstein-1 distance from below. The whole loop is deterministic
given the seed.
"""
from __future__ import annotations

import time
from dataclasses import asdict, dataclass, field

import numpy as np

from .critics import Critic, critic_update, gap_term, penalty_term
from .densities import GaussianMixture
from .diffcore import NumericalError, OptState, Tensor, apply_adam, backward
from .flowgen import FlowGenerator, gmm_logpdf_op
from .observables import Observable

REPORT_VERSION = 1


@dataclass
class AlignConfig:
    """All scalars of the alignment loop; defaults follow the synthetic preset."""

    beta: float = 128.0
    total_steps: int = 10000
    critic_steps: int = 1
    batch_size: int = 1024
    lr_gen: float = 1e-5
    lr_critic: float = 1e-3
    lam_gp: float = 1000.0
    kl_samples: int | None = None  # None: share the sample batch (common random numbers)
    seed: int = 0
    flow_blocks: int = 4
    flow_hidden: tuple = (64, 64)
    critic_hidden: tuple = (512, 512)
    one_sided_penalty: bool = False
    moment_order: int = 1  # expectation-alignment baseline only

    def __post_init__(self):
        if self.beta < 0.0:
            raise ValueError("beta must be nonnegative")
        for name in ("total_steps", "critic_steps", "batch_size"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be at least 1")
        if self.moment_order < 1:
            raise ValueError("moment_order must be at least 1")
        if self.kl_samples is not None and self.kl_samples < 2:
            raise ValueError("kl_samples must be at least 2 when given")


@dataclass
class AlignReport:
    """Self-describing record of one alignment run."""

    method: str
    config: dict
    seed: int
    observable_names: list
    kl_trace: np.ndarray
    gap_traces: dict
    lagrangian_trace: np.ndarray
    metrics: dict = field(default_factory=dict)
    wall_clock: float = 0.0
    format_version: int = REPORT_VERSION

    def __post_init__(self):
        steps = len(self.kl_trace)
        if len(self.lagrangian_trace) != steps or any(
            len(t) != steps for t in self.gap_traces.values()
        ):
            raise ValueError("trace lengths must equal the step count")


def _draw_reference(refset, n: int, rng: np.random.Generator) -> np.ndarray:
    """A reference minibatch from either a fixed array or a sampler callable."""
    if callable(refset):
        return np.atleast_2d(np.asarray(refset(n, rng), dtype=np.float64))
    refset = np.atleast_2d(np.asarray(refset, dtype=np.float64))
    idx = rng.integers(0, refset.shape[0], size=n)
    return refset[idx]


def lagrangian(gen: FlowGenerator, critics: dict, observables: dict, ref_batches: dict,
               z: np.ndarray, beta: float):
    """Generator-ascent objective: -KL estimate - beta * sum of critic gaps.

    Returns (objective tensor, diagnostics dict). Model observables reuse
    the one forward pass of the batch z.
    """
    missing = [name for name in observables if name not in critics]
    if missing:
        raise ValueError(f"no critic for observables {missing}")
    x, logdet = gen.forward_tensor(z)
    kl_vec = Tensor(gen.base.logpdf(z)) - logdet - gmm_logpdf_op(gen.base, x)
    kl = kl_vec.mean()
    gaps = {}
    model_obs = {}
    total = -kl
    for name, obs in observables.items():
        u = obs.apply(x)
        model_obs[name] = u
        g = gap_term(critics[name], u, ref_batches[name])
        gaps[name] = g
        total = total - beta * g
    diag = {
        "kl": kl.item(),
        "gaps": {name: g.item() for name, g in gaps.items()},
        "model_obs": model_obs,
        "lagrangian": total.item(),
    }
    return total, diag


def ada_step(gen: FlowGenerator, gen_opt: OptState, critics: dict, observables: dict,
             refsets: dict, cfg: AlignConfig, rng: np.random.Generator) -> dict:
    """One alignment step: generator ascent, then critic descent per observable."""
    z = gen.base.sample(cfg.batch_size, rng)
    ref_batches = {name: _draw_reference(refsets[name], cfg.batch_size, rng)
                   for name in observables}
    total, diag = lagrangian(gen, critics, observables, ref_batches, z, cfg.beta)
    if not np.isfinite(diag["lagrangian"]):
        raise NumericalError(f"non-finite objective: {diag['lagrangian']!r}")
    backward(total)
    params = gen.params()
    grads = [np.zeros_like(p.value) if p.grad is None else p.grad for p in params]
    apply_adam(params, grads, gen_opt, "ascend")
    for name in observables:
        u_val = diag["model_obs"][name].value
        for _ in range(cfg.critic_steps):
            critic_update(critics[name], u_val, ref_batches[name], rng)
    del diag["model_obs"]
    return diag


def _build_critics(observables: dict, refsets: dict, cfg: AlignConfig,
                   rng: np.random.Generator) -> dict:
    critics = {}
    for name, obs in observables.items():
        ref = refsets[name]
        stats = ref(4096, rng) if callable(ref) else ref
        critics[name] = Critic(obs.out_dim, stats, rng, hidden=cfg.critic_hidden,
                               lam_gp=cfg.lam_gp, lr=cfg.lr_critic,
                               one_sided=cfg.one_sided_penalty)
    return critics


def _snapshot(params) -> list[np.ndarray]:
    return [p.value.copy() for p in params]


def _restore(params, saved) -> None:
    for p, s in zip(params, saved):
        p.value[...] = s


def run_ada(base: GaussianMixture, observables: dict, refsets: dict, cfg: AlignConfig):
    """Full adversarial alignment from the identity-initialized generator.

    Returns (generator, critics, report). Convergence is step-budgeted; on a
    non-finite objective the generator is restored to the last good state
    before the error propagates.
    """
    if set(observables) - set(refsets):
        raise ValueError("every observable needs a reference set")
    rng = np.random.default_rng(cfg.seed)
    gen = FlowGenerator.init_identity(base, cfg.flow_blocks, cfg.flow_hidden, rng)
    gen_opt = OptState.for_params(gen.params(), lr=cfg.lr_gen)
    critics = _build_critics(observables, refsets, cfg, rng)
    kl_trace = np.zeros(cfg.total_steps)
    gap_traces = {name: np.zeros(cfg.total_steps) for name in observables}
    lag_trace = np.zeros(cfg.total_steps)
    t0 = time.perf_counter()
    last_good = _snapshot(gen.params())
    for step in range(cfg.total_steps):
        try:
            diag = ada_step(gen, gen_opt, critics, observables, refsets, cfg, rng)
        except NumericalError:
            _restore(gen.params(), last_good)
            raise
        last_good = _snapshot(gen.params())
        kl_trace[step] = diag["kl"]
        lag_trace[step] = diag["lagrangian"]
        for name in observables:
            gap_traces[name][step] = diag["gaps"][name]
    report = AlignReport(
        method="ada", config=asdict(cfg), seed=cfg.seed,
        observable_names=list(observables), kl_trace=kl_trace,
        gap_traces=gap_traces, lagrangian_trace=lag_trace,
        wall_clock=time.perf_counter() - t0,
    )
    return gen, critics, report


def _monomial_exponents(dim: int, order: int) -> list[tuple]:
    """All exponent vectors with total degree between 1 and order."""
    out = []

    def rec(prefix, remaining):
        if len(prefix) == dim:
            if sum(prefix) >= 1:
                out.append(tuple(prefix))
            return
        for e in range(remaining + 1):
            rec(prefix + [e], remaining - e)

    rec([], order)
    return sorted(out, key=lambda t: (sum(t), t))


def _moments(u, exponents) -> list:
    """Monomial means of a normalized observable batch (graph nodes)."""
    cols = {}
    k = u.value.shape[1] if isinstance(u, Tensor) else u.shape[1]
    for j in range(k):
        sel = np.zeros(k)
        sel[j] = 1.0
        cols[j] = (u * sel).sum(axis=1) if isinstance(u, Tensor) else u[:, j]
    vals = []
    for exp in exponents:
        term = None
        for j, e in enumerate(exp):
            if e == 0:
                continue
            factor = cols[j].power(e) if isinstance(u, Tensor) else cols[j] ** e
            term = factor if term is None else term * factor
        vals.append(term.mean() if isinstance(u, Tensor) else float(term.mean()))
    return vals


def run_ea(base: GaussianMixture, observables: dict, refsets: dict, cfg: AlignConfig):
    """Moment-matching baseline: align monomial expectations instead of distributions.

    Optimizes -KL - beta * sum over observables and monomials (degree 1..p)
    of the squared residual to the reference moments, computed on
    normalized observables. No critics are involved.
    """
    if set(observables) - set(refsets):
        raise ValueError("every observable needs a reference set")
    rng = np.random.default_rng(cfg.seed)
    gen = FlowGenerator.init_identity(base, cfg.flow_blocks, cfg.flow_hidden, rng)
    gen_opt = OptState.for_params(gen.params(), lr=cfg.lr_gen)

    norm = {}
    ref_moments = {}
    exponents = {}
    for name, obs in observables.items():
        ref = refsets[name]
        stats = np.atleast_2d(np.asarray(ref(8192, rng) if callable(ref) else ref, dtype=np.float64))
        shift = stats.mean(axis=0)
        inv_scale = 1.0 / np.maximum(stats.std(axis=0), 1e-8)
        norm[name] = (shift, inv_scale)
        exponents[name] = _monomial_exponents(obs.out_dim, cfg.moment_order)
        ref_moments[name] = _moments((stats - shift) * inv_scale, exponents[name])

    kl_trace = np.zeros(cfg.total_steps)
    res_traces = {name: np.zeros(cfg.total_steps) for name in observables}
    obj_trace = np.zeros(cfg.total_steps)
    t0 = time.perf_counter()
    for step in range(cfg.total_steps):
        z = base.sample(cfg.batch_size, rng)
        x, logdet = gen.forward_tensor(z)
        kl = (Tensor(base.logpdf(z)) - logdet - gmm_logpdf_op(base, x)).mean()
        total = -kl
        for name, obs in observables.items():
            shift, inv_scale = norm[name]
            u = (obs.apply(x) - shift) * inv_scale
            residual = None
            for m, m_ref in zip(_moments(u, exponents[name]), ref_moments[name]):
                sq = (m - m_ref).square()
                residual = sq if residual is None else residual + sq
            res_traces[name][step] = residual.item()
            total = total - cfg.beta * residual
        if not np.isfinite(total.value):
            raise NumericalError(f"non-finite objective: {total.value!r}")
        backward(total)
        params = gen.params()
        grads = [np.zeros_like(p.value) if p.grad is None else p.grad for p in params]
        apply_adam(params, grads, gen_opt, "ascend")
        kl_trace[step] = kl.item()
        obj_trace[step] = total.item()
    report = AlignReport(
        method="ea", config=asdict(cfg), seed=cfg.seed,
        observable_names=list(observables), kl_trace=kl_trace,
        gap_traces=res_traces, lagrangian_trace=obj_trace,
        wall_clock=time.perf_counter() - t0,
    )
    return gen, report
