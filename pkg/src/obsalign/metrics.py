"""Evaluation metrics: empirical transport distances, 2-D histogram
Jensen-Shannon divergence, cluster-assignment divergence, energy-histogram
distances, and Kabsch-aligned RMSD."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .densities import GaussianMixture


def w1_empirical(a: np.ndarray, b: np.ndarray) -> float:
    """Transport distance between 1-D sample sets.

    Equal sizes use the sorted coupling; unequal sizes fall back to the
    CDF integral over the merged support.
    """
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    if a.size < 2 or b.size < 2:
        raise ValueError("need at least two samples on each side")
    if a.size == b.size:
        return float(np.abs(np.sort(a) - np.sort(b)).mean())
    allv = np.sort(np.concatenate([a, b]))
    deltas = np.diff(allv)
    fa = np.searchsorted(np.sort(a), allv[:-1], side="right") / a.size
    fb = np.searchsorted(np.sort(b), allv[:-1], side="right") / b.size
    return float(np.sum(np.abs(fa - fb) * deltas))


def w2_empirical(a: np.ndarray, b: np.ndarray) -> float:
    """Quadratic transport distance (sorted squared-difference form)."""
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    if a.size < 2 or b.size < 2:
        raise ValueError("need at least two samples on each side")
    if a.size != b.size:
        # evaluate both quantile functions on the merged CDF levels
        levels = np.union1d(np.arange(1, a.size) / a.size, np.arange(1, b.size) / b.size)
        levels = np.concatenate([[0.0], levels, [1.0]])
        widths = np.diff(levels)
        mids = 0.5 * (levels[:-1] + levels[1:])
        qa = np.sort(a)[np.minimum((mids * a.size).astype(int), a.size - 1)]
        qb = np.sort(b)[np.minimum((mids * b.size).astype(int), b.size - 1)]
        return float(np.sqrt(np.sum((qa - qb) ** 2 * widths)))
    return float(np.sqrt(((np.sort(a) - np.sort(b)) ** 2).mean()))


def jsd_2d(a: np.ndarray, b: np.ndarray, bins: int = 50, ranges=None,
           pseudo: float = 1e-10) -> float:
    """Jensen-Shannon divergence (natural log) of binned 2-D sample sets.

    Both sets share the same bin edges; by default the edges span the union
    range of the two sets. A small pseudo-count keeps empty bins finite.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim != 2 or a.shape[1] != 2 or b.ndim != 2 or b.shape[1] != 2:
        raise ValueError("inputs must be (n, 2) sample arrays")
    if bins < 1:
        raise ValueError("need at least one bin per axis")
    if ranges is None:
        lo = np.minimum(a.min(axis=0), b.min(axis=0))
        hi = np.maximum(a.max(axis=0), b.max(axis=0))
        pad = np.maximum(1e-9, 1e-9 * (hi - lo))
        ranges = [(lo[0] - pad[0], hi[0] + pad[0]), (lo[1] - pad[1], hi[1] + pad[1])]
    if ranges[0][1] <= ranges[0][0] or ranges[1][1] <= ranges[1][0]:
        raise ValueError("degenerate bin ranges")
    ha, _, _ = np.histogram2d(a[:, 0], a[:, 1], bins=bins, range=ranges)
    hb, _, _ = np.histogram2d(b[:, 0], b[:, 1], bins=bins, range=ranges)
    p = (ha + pseudo).ravel()
    q = (hb + pseudo).ravel()
    p /= p.sum()
    q /= q.sum()
    m = 0.5 * (p + q)
    return float(0.5 * np.sum(p * np.log(p / m)) + 0.5 * np.sum(q * np.log(q / m)))


def cluster_kl(target: GaussianMixture, samples: np.ndarray) -> float:
    """Divergence of induced mixture weights of the samples from the target weights."""
    samples = np.atleast_2d(np.asarray(samples, dtype=np.float64))
    if samples.shape[1] != target.d:
        raise ValueError(f"sample dimension {samples.shape[1]} != mixture dimension {target.d}")
    induced = target.posterior(samples).mean(axis=0)
    nz = induced > 0.0
    return float(np.sum(induced[nz] * np.log(induced[nz] / target.weights[nz])))


def energy_metric(target: GaussianMixture, samples_a: np.ndarray, samples_b: np.ndarray,
                  order: str = "w1") -> float:
    """Transport distance between the energy histograms of two sample sets."""
    ea = target.energy(np.atleast_2d(samples_a))
    eb = target.energy(np.atleast_2d(samples_b))
    if order == "w1":
        return w1_empirical(ea, eb)
    if order == "w2":
        return w2_empirical(ea, eb)
    raise ValueError(f"order must be 'w1' or 'w2', got {order!r}")


def kabsch_rmsd(p: np.ndarray, q: np.ndarray) -> float:
    """Root-mean-square deviation after optimal proper superposition of p onto q.

    Reflections are excluded by correcting the sign of the smallest singular
    direction, so mirror images of chiral frames keep a positive deviation.
    """
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    if p.shape != q.shape or p.ndim != 2 or p.shape[1] != 3:
        raise ValueError(f"point sets must share shape (n, 3); got {p.shape} vs {q.shape}")
    pc = p - p.mean(axis=0)
    qc = q - q.mean(axis=0)
    h = pc.T @ qc
    u, _, vt = np.linalg.svd(h)
    sign = np.sign(np.linalg.det(u @ vt))
    d = np.ones(3)
    d[-1] = sign
    rot = u * d @ vt
    return float(np.sqrt(((pc @ rot - qc) ** 2).sum(axis=1).mean()))


def max_rmsd_to_set(generated: np.ndarray, references: np.ndarray) -> float:
    """Max over generated frames of the deviation to the closest reference frame."""
    generated = np.asarray(generated, dtype=np.float64)
    references = np.asarray(references, dtype=np.float64)
    if generated.ndim != 3 or references.ndim != 3:
        raise ValueError("expected stacks of (n_atoms, 3) frames")
    if generated.shape[0] == 0 or references.shape[0] == 0:
        raise ValueError("both frame sets must be nonempty")
    if generated.shape[1:] != references.shape[1:]:
        raise ValueError("atom counts must match between sets")
    worst = 0.0
    for g in generated:
        best = min(kabsch_rmsd(g, r) for r in references)
        worst = max(worst, best)
    return worst


@dataclass
class MetricBlock:
    """Evaluation results attached to an alignment report."""

    per_observable_w1: dict = field(default_factory=dict)
    energy_w1: float | None = None
    energy_w2: float | None = None
    cluster_kl: float | None = None
    fes_jsd: dict = field(default_factory=dict)
    max_rmsd: float | None = None
    eval_samples: int = 0
    fes_bins: int = 50

    def to_dict(self) -> dict:
        out = {"eval_samples": self.eval_samples, "fes_bins": self.fes_bins}
        for key in ("energy_w1", "energy_w2", "cluster_kl", "max_rmsd"):
            val = getattr(self, key)
            if val is not None:
                out[key] = float(val)
        for name, val in self.per_observable_w1.items():
            out[f"w1.{name}"] = float(val)
        for name, val in self.fes_jsd.items():
            out[f"fes_jsd.{name}"] = float(val)
        return out
