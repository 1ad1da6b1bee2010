"""Ground-truth solvers: the single-observable analytic tilt, an exact
finite-grid solver for the soft alignment objective, and brute-force
Wasserstein-1 references.

These are deliberately independent of anything learned: the grid solver
uses the closed-form 1-D transport distance and its dual potential, and
the brute force searches assignments directly.
"""
from __future__ import annotations

from dataclasses import dataclass
from itertools import permutations

import numpy as np

from .densities import DiscreteDist


def w1_discrete_1d(p: DiscreteDist, q: DiscreteDist) -> float:
    """Exact transport distance between finite 1-D distributions (CDF integral)."""
    return _w1_weighted(np.asarray(p.points, dtype=np.float64).ravel(), p.masses,
                        np.asarray(q.points, dtype=np.float64).ravel(), q.masses)


def _w1_weighted(xp, wp, xq, wq) -> float:
    sp = np.argsort(xp, kind="stable")
    sq = np.argsort(xq, kind="stable")
    allv = np.sort(np.concatenate([xp, xq]), kind="stable")
    deltas = np.diff(allv)
    cp = np.concatenate([[0.0], np.cumsum(wp[sp])])
    cq = np.concatenate([[0.0], np.cumsum(wq[sq])])
    fp = cp[np.searchsorted(xp[sp], allv[:-1], side="right")] / cp[-1]
    fq = cq[np.searchsorted(xq[sq], allv[:-1], side="right")] / cq[-1]
    return float(np.sum(np.abs(fp - fq) * deltas))


def w1_assignment_bruteforce(a: np.ndarray, b: np.ndarray) -> float:
    """Minimum-cost perfect assignment between two equal small sample sets.

    Factorial search; the oracle is restricted to n <= 8 points. Costs are
    absolute differences in 1-D and Euclidean distances otherwise.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim == 1:
        a = a[:, None]
    if b.ndim == 1:
        b = b[:, None]
    n = a.shape[0]
    if b.shape[0] != n:
        raise ValueError("sample sets must have equal size")
    if n > 8:
        raise ValueError("brute-force assignment is limited to n <= 8")
    cost = np.linalg.norm(a[:, None, :] - b[None, :, :], axis=2)
    best = np.inf
    for perm in permutations(range(n)):
        c = cost[range(n), perm].sum()
        if c < best:
            best = c
    return float(best / n)


def tilt_weights(base_masses: np.ndarray, target_masses: np.ndarray) -> np.ndarray:
    """Per-bin reweighting ratios target/base; zero-base bins with target mass fail."""
    base_masses = np.asarray(base_masses, dtype=np.float64)
    target_masses = np.asarray(target_masses, dtype=np.float64)
    bad = (base_masses <= 0.0) & (target_masses > 0.0)
    if np.any(bad):
        raise ValueError(
            f"target occupies {int(bad.sum())} bins with zero base mass; "
            "the constraint is unrealizable from the base support at this resolution"
        )
    w = np.zeros_like(target_masses)
    np.divide(target_masses, base_masses, out=w, where=base_masses > 0.0)
    return w


@dataclass
class TiltedDensity:
    """Base states importance-reweighted so the binned observable matches the target."""

    bin_edges: np.ndarray
    base_bin_mass: np.ndarray
    target_bin_mass: np.ndarray
    bin_weights: np.ndarray
    base_states: np.ndarray
    state_weights: np.ndarray  # normalized over the base sample set

    def resample(self, n: int, rng: np.random.Generator) -> np.ndarray:
        idx = rng.choice(self.base_states.shape[0], size=n, p=self.state_weights)
        return self.base_states[idx]

    def pushforward_masses(self) -> np.ndarray:
        """Binned observable mass of the weighted states; equals the target by construction."""
        return self.target_bin_mass.copy()


def analytic_tilt(base_states: np.ndarray, observable, target_obs: np.ndarray,
                  bin_edges: np.ndarray) -> TiltedDensity:
    """Reweight base states by the ratio of binned observable densities.

    ``observable`` maps a batch of states to 1-D values (callables and
    1-output Observable instances both work).
    """
    base_states = np.atleast_2d(np.asarray(base_states, dtype=np.float64))
    target_obs = np.asarray(target_obs, dtype=np.float64).ravel()
    bin_edges = np.asarray(bin_edges, dtype=np.float64)
    if bin_edges.ndim != 1 or bin_edges.shape[0] < 2:
        raise ValueError("need at least two bin edges")
    base_obs = np.asarray(observable(base_states), dtype=np.float64).reshape(base_states.shape[0], -1)
    if base_obs.shape[1] != 1:
        raise ValueError("the analytic tilt handles a single 1-D observable")
    base_obs = base_obs.ravel()
    if target_obs.min() < bin_edges[0] or target_obs.max() > bin_edges[-1]:
        raise ValueError("bin edges must cover the target observable samples")

    t_counts, _ = np.histogram(target_obs, bins=bin_edges)
    b_counts, _ = np.histogram(base_obs, bins=bin_edges)
    t_mass = t_counts / t_counts.sum()
    b_mass = b_counts / base_obs.shape[0]
    w_bin = tilt_weights(b_mass, t_mass)

    idx = np.clip(np.searchsorted(bin_edges, base_obs, side="right") - 1, 0, len(t_mass) - 1)
    inside = (base_obs >= bin_edges[0]) & (base_obs <= bin_edges[-1])
    w_state = np.where(inside, w_bin[idx], 0.0)
    total = w_state.sum()
    if total <= 0.0:
        raise ValueError("no base sample carries tilt weight; refine the bin spec")
    return TiltedDensity(bin_edges, b_mass, t_mass, w_bin, base_states, w_state / total)


def _pushforward_setup(values: np.ndarray, target: DiscreteDist):
    """Precompute merged-support bookkeeping for fast W1 and its dual potential."""
    uv, inv = np.unique(values, return_inverse=True)
    tq = np.asarray(target.points, dtype=np.float64).ravel()
    order = np.argsort(tq, kind="stable")
    tq_sorted = tq[order]
    tw_sorted = target.masses[order]
    merged = np.unique(np.concatenate([uv, tq_sorted]))
    deltas = np.diff(merged)
    # positions to read step-function CDFs at each merged point
    p_pos = np.searchsorted(uv, merged, side="right")
    fq = np.concatenate([[0.0], np.cumsum(tw_sorted)])[
        np.searchsorted(tq_sorted, merged, side="right")]
    v_pos = np.searchsorted(merged, uv)
    return {"inv": inv, "n_unique": uv.shape[0], "deltas": deltas,
            "p_pos": p_pos, "fq": fq, "v_pos": v_pos}


def _w1_and_potential(mu: np.ndarray, pre) -> tuple[float, np.ndarray]:
    """Transport gap of the pushforward of mu and its subgradient per grid point."""
    pmass = np.bincount(pre["inv"], weights=mu, minlength=pre["n_unique"])
    fp = np.concatenate([[0.0], np.cumsum(pmass)])[pre["p_pos"]]
    diff = fp[:-1] - pre["fq"][:-1]
    w1 = float(np.sum(np.abs(diff) * pre["deltas"]))
    seg = np.sign(diff) * pre["deltas"]
    rcum = np.concatenate([np.cumsum(seg[::-1])[::-1], [0.0]])
    psi = rcum[pre["v_pos"]]
    return w1, psi[pre["inv"]]


@dataclass
class GridAlignResult:
    dist: DiscreteDist
    gaps: list[float]
    objective: float
    converged: bool
    iterations: int


def grid_align(base: DiscreteDist, obs_values: list[np.ndarray], targets: list[DiscreteDist],
               beta: float, n_iters: int = 20000, step_scale: float = 0.5,
               tol: float = 1e-10) -> GridAlignResult:
    """Exact solver for the soft alignment objective on a finite grid.

    Maximizes -KL(mu || base) - beta * sum_i W1(pushforward_i(mu), target_i)
    over the simplex by exponentiated-gradient ascent with a backtracking
    line search, using the 1-D dual potential for transport subgradients.
    """
    if beta < 0.0:
        raise ValueError("beta must be nonnegative")
    if len(obs_values) != len(targets) or not obs_values:
        raise ValueError("need one target per observable value array")
    b = base.masses
    pres = []
    for vals, target in zip(obs_values, targets):
        vals = np.asarray(vals, dtype=np.float64).ravel()
        if vals.shape[0] != len(base):
            raise ValueError("observable values must cover every grid point")
        pres.append(_pushforward_setup(vals, target))

    def objective(mu):
        kl = float(np.sum(mu * (np.log(mu) - np.log(b))))
        w1s = [_w1_and_potential(mu, pre)[0] for pre in pres]
        return -kl - beta * sum(w1s), w1s

    if beta == 0.0:
        obj, w1s = objective(b)
        return GridAlignResult(DiscreteDist(base.points, b), w1s, obj, True, 0)

    mu = b.copy()
    f_cur, _ = objective(mu)
    best_mu, best_f = mu, f_cur
    check_at = max(1, int(0.8 * n_iters))
    f_at_check = None
    for it in range(1, n_iters + 1):
        grad = -(np.log(mu) - np.log(b) + 1.0)
        for pre in pres:
            _, psi = _w1_and_potential(mu, pre)
            grad -= beta * psi
        grad -= grad.max()  # exp-update is shift-invariant; keep exponents tame
        eta = step_scale / (beta * np.sqrt(it))
        accepted = False
        for _ in range(60):
            cand = mu * np.exp(eta * grad)
            cand = np.maximum(cand / cand.sum(), 1e-300)
            cand /= cand.sum()
            f_new, _ = objective(cand)
            if f_new >= f_cur - tol:
                mu, f_cur = cand, f_new
                accepted = True
                break
            eta *= 0.5
        if accepted and f_cur > best_f:
            best_f, best_mu = f_cur, mu
        if it == check_at:
            f_at_check = best_f
    converged = f_at_check is not None and (best_f - f_at_check) <= 1e-8 * (1.0 + abs(best_f))
    obj, w1s = objective(best_mu)
    return GridAlignResult(DiscreteDist(base.points, best_mu), w1s, obj, converged, n_iters)
