"""Analytic isotropic Gaussian-mixture densities and finite-grid discretizations."""
from __future__ import annotations

import numpy as np

_WEIGHT_TOL = 1e-12


class GaussianMixture:
    """Mixture of isotropic Gaussians with full support everywhere.

    Immutable after construction; sampling takes an external generator so
    there is no hidden state.
    """

    def __init__(self, means, variances, weights):
        means = np.atleast_2d(np.asarray(means, dtype=np.float64))
        variances = np.asarray(variances, dtype=np.float64).ravel()
        weights = np.asarray(weights, dtype=np.float64).ravel()
        k = means.shape[0]
        if variances.shape != (k,) or weights.shape != (k,):
            raise ValueError("means, variances and weights must agree in component count")
        if np.any(variances <= 0.0):
            raise ValueError("all component variances must be positive")
        if np.any(weights <= 0.0):
            raise ValueError("all component weights must be positive")
        if abs(weights.sum() - 1.0) > _WEIGHT_TOL:
            raise ValueError(f"weights sum to {weights.sum()!r}, expected 1 within {_WEIGHT_TOL}")
        for a in (means, variances, weights):
            a.setflags(write=False)
        self.means = means
        self.variances = variances
        self.weights = weights

    @property
    def d(self) -> int:
        return self.means.shape[1]

    @property
    def n_components(self) -> int:
        return self.means.shape[0]

    def sample(self, n: int, rng: np.random.Generator) -> np.ndarray:
        if n < 1:
            raise ValueError("need n >= 1 samples")
        comps = rng.choice(self.n_components, size=n, p=self.weights)
        noise = rng.standard_normal((n, self.d))
        return self.means[comps] + noise * np.sqrt(self.variances[comps])[:, None]

    def _component_logpdfs(self, x: np.ndarray) -> np.ndarray:
        """log w_k + log N(x; m_k, sigma2_k I), shape (..., K)."""
        diff = x[..., None, :] - self.means  # (..., K, d)
        sq = np.einsum("...kd,...kd->...k", diff, diff)
        return (
            np.log(self.weights)
            - 0.5 * self.d * np.log(2.0 * np.pi * self.variances)
            - 0.5 * sq / self.variances
        )

    def logpdf(self, x) -> np.ndarray:
        """Mixture log-density via max-shifted log-sum-exp; accepts (..., d)."""
        x = np.asarray(x, dtype=np.float64)
        if x.shape[-1] != self.d:
            raise ValueError(f"point dimension {x.shape[-1]} != mixture dimension {self.d}")
        lp = self._component_logpdfs(x)
        m = lp.max(axis=-1)
        return m + np.log(np.exp(lp - m[..., None]).sum(axis=-1))

    def energy(self, x) -> np.ndarray:
        return -self.logpdf(x)

    def posterior(self, x) -> np.ndarray:
        """Component responsibilities, shape (..., K); rows sum to 1."""
        x = np.asarray(x, dtype=np.float64)
        lp = self._component_logpdfs(x)
        m = lp.max(axis=-1, keepdims=True)
        r = np.exp(lp - m)
        return r / r.sum(axis=-1, keepdims=True)

    def score(self, x) -> np.ndarray:
        """Gradient of logpdf w.r.t. the point, shape (..., d)."""
        x = np.asarray(x, dtype=np.float64)
        r = self.posterior(x)
        pull = (self.means - x[..., None, :]) / self.variances[:, None]
        return np.einsum("...k,...kd->...d", r, pull)

    def mean(self) -> np.ndarray:
        return self.weights @ self.means


class DiscreteDist:
    """Finite distribution over explicit grid points."""

    def __init__(self, points, masses):
        points = np.asarray(points, dtype=np.float64)
        masses = np.asarray(masses, dtype=np.float64).ravel()
        if points.shape[0] != masses.shape[0]:
            raise ValueError("points and masses must have equal length")
        if points.shape[0] == 0:
            raise ValueError("empty support")
        if np.any(masses < 0.0):
            raise ValueError("masses must be nonnegative")
        if abs(masses.sum() - 1.0) > _WEIGHT_TOL:
            raise ValueError(f"masses sum to {masses.sum()!r}, expected 1 within {_WEIGHT_TOL}")
        points.setflags(write=False)
        masses.setflags(write=False)
        self.points = points
        self.masses = masses

    def __len__(self) -> int:
        return self.points.shape[0]


def grid_discretize(g: GaussianMixture, lows, highs, bins) -> DiscreteDist:
    """Discretize onto a regular grid: density at cell centers times volume, renormalized."""
    lows = np.atleast_1d(np.asarray(lows, dtype=np.float64))
    highs = np.atleast_1d(np.asarray(highs, dtype=np.float64))
    bins = np.atleast_1d(np.asarray(bins, dtype=np.int64))
    if not (lows.shape == highs.shape == bins.shape) or lows.shape[0] != g.d:
        raise ValueError("grid spec must give one (low, high, bins) triple per dimension")
    if np.any(bins < 1) or np.any(highs <= lows):
        raise ValueError("grid axes need positive extent and at least one bin")
    axes = []
    widths = []
    for lo, hi, nb in zip(lows, highs, bins):
        edges = np.linspace(lo, hi, nb + 1)
        axes.append(0.5 * (edges[:-1] + edges[1:]))
        widths.append((hi - lo) / nb)
    mesh = np.meshgrid(*axes, indexing="ij")
    points = np.stack([m.ravel() for m in mesh], axis=-1)
    mass = np.exp(g.logpdf(points)) * np.prod(widths)
    if g.d == 1:
        points = points.ravel()
    return DiscreteDist(points, mass / mass.sum())


# Benchmark mixtures: eight components at the vertices of a 6.0-side cube.
# Base is uniform with variance 0.5; the target perturbs variances per
# vertex and reweights antipodal vertex pairs.
_CUBE_VERTICES = np.array(
    [
        [+3.0, +3.0, +3.0],
        [+3.0, +3.0, -3.0],
        [+3.0, -3.0, +3.0],
        [+3.0, -3.0, -3.0],
        [-3.0, +3.0, +3.0],
        [-3.0, +3.0, -3.0],
        [-3.0, -3.0, +3.0],
        [-3.0, -3.0, -3.0],
    ]
)
_TARGET_VARIANCES = np.array([0.3, 0.5, 1.0, 0.4, 0.6, 1.2, 0.5, 0.3])
# Antipodal pairs (v1,v8), (v2,v7), (v3,v6), (v4,v5) carry pair weights
# 0.40, 0.30, 0.10, 0.20, split equally between the pair's two vertices.
_TARGET_WEIGHTS = np.array([0.20, 0.15, 0.05, 0.10, 0.10, 0.05, 0.15, 0.20])

PRESETS = ("synthetic-cube-v1",)


def preset_mixtures(name: str) -> tuple[GaussianMixture, GaussianMixture]:
    """Return (base, target) mixtures for a named benchmark preset."""
    if name != "synthetic-cube-v1":
        raise ValueError(f"unknown preset {name!r}; available: {PRESETS}")
    base = GaussianMixture(_CUBE_VERTICES, np.full(8, 0.5), np.full(8, 0.125))
    target = GaussianMixture(_CUBE_VERTICES, _TARGET_VARIANCES, _TARGET_WEIGHTS)
    return base, target
