"""Differentiable observable maps for points and N-particle configurations.

Each observable exposes a batched map plus its Jacobian action (vector-
Jacobian product), so generator gradients can flow through it. Scalar
structural observables are invariant under rigid motions; gradients at
coincident-atom singularities are defined as zero.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .diffcore import Tensor, custom_op


@dataclass
class Configuration:
    """An N-particle state: masses, positions, optional bonds and named groups."""

    masses: np.ndarray
    positions: np.ndarray
    bonds: list[tuple[int, int]] = field(default_factory=list)
    groups: dict[str, list[int]] = field(default_factory=dict)

    def __post_init__(self):
        self.masses = np.asarray(self.masses, dtype=np.float64).ravel()
        self.positions = np.asarray(self.positions, dtype=np.float64)
        n = self.masses.shape[0]
        if n < 1:
            raise ValueError("need at least one atom")
        if np.any(self.masses <= 0.0):
            raise ValueError("masses must be positive")
        if self.positions.shape != (n, 3):
            raise ValueError(f"positions must be ({n}, 3), got {self.positions.shape}")
        for name, idx in self.groups.items():
            if len(idx) == 0 or min(idx) < 0 or max(idx) >= n:
                raise ValueError(f"group {name!r} has out-of-range or empty indices")

    @property
    def n_atoms(self) -> int:
        return self.masses.shape[0]

    @classmethod
    def from_xyz(cls, text: str) -> "Configuration":
        """Parse the plain-text format: first line N, then N lines 'mass x y z'."""
        lines = [ln for ln in text.splitlines() if ln.strip()]
        if not lines:
            raise ValueError("empty configuration text")
        n = int(lines[0])
        if len(lines) < n + 1:
            raise ValueError(f"expected {n} atom lines, found {len(lines) - 1}")
        rows = [[float(v) for v in lines[1 + i].split()] for i in range(n)]
        arr = np.asarray(rows, dtype=np.float64)
        if arr.shape != (n, 4):
            raise ValueError("atom lines must contain exactly: mass x y z")
        return cls(masses=arr[:, 0], positions=arr[:, 1:])


# -- single-configuration quantities ---------------------------------


def radius_of_gyration(c: Configuration) -> float:
    """Mass-weighted spatial extent about the center of mass."""
    com = c.masses @ c.positions / c.masses.sum()
    sq = ((c.positions - com) ** 2).sum(axis=1)
    return float(np.sqrt(c.masses @ sq / c.masses.sum()))


def mean_interatomic_distance(c: Configuration) -> float:
    if c.n_atoms < 2:
        raise ValueError("mean interatomic distance needs at least two atoms")
    i, j = np.triu_indices(c.n_atoms, k=1)
    d = np.linalg.norm(c.positions[i] - c.positions[j], axis=1)
    return float(d.mean())


def pair_distance(c: Configuration, i: int, j: int) -> float:
    n = c.n_atoms
    if i == j or not (0 <= i < n and 0 <= j < n):
        raise ValueError(f"need two distinct atom indices in [0, {n}), got ({i}, {j})")
    return float(np.linalg.norm(c.positions[i] - c.positions[j]))


def group_com_distance(c: Configuration, group_a, group_b) -> float:
    a = np.asarray(group_a, dtype=np.int64)
    b = np.asarray(group_b, dtype=np.int64)
    if a.size == 0 or b.size == 0:
        raise ValueError("groups must be nonempty")
    if np.intersect1d(a, b).size:
        raise ValueError("groups must be disjoint")
    ma, mb = c.masses[a], c.masses[b]
    ca = ma @ c.positions[a] / ma.sum()
    cb = mb @ c.positions[b] / mb.sum()
    return float(np.linalg.norm(ca - cb))


@dataclass(frozen=True)
class ImageSpec:
    """Toy orthographic splat-image settings; noise scales with clean-image variance."""

    side: int = 16
    kernel_sigma_px: float = 2.5
    pixel_size: float = 1.0
    snr: float | None = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.side < 4:
            raise ValueError("image side must be at least 4 pixels")
        if self.snr is not None and not self.snr > 0.0:
            raise ValueError("snr must be positive (or None for noiseless)")
        if self.kernel_sigma_px <= 0.0 or self.pixel_size <= 0.0:
            raise ValueError("kernel sigma and pixel size must be positive")


def splat_image(c: Configuration, spec: ImageSpec, rng: np.random.Generator | None = None) -> np.ndarray:
    """Project one configuration to a flattened noisy image (row-major, side*side)."""
    clean = _splat_clean(c.positions[None, :, :].reshape(1, -1), c.n_atoms, spec)[0]
    if spec.snr is None:
        return clean
    if rng is None:
        raise ValueError("a generator is required when snr is finite")
    sd = np.sqrt(clean.var() / spec.snr)
    return clean + sd * rng.standard_normal(clean.shape)


def _pixel_centers(spec: ImageSpec) -> np.ndarray:
    return np.arange(spec.side) - 0.5 * (spec.side - 1)


def _splat_clean(flat: np.ndarray, n_atoms: int, spec: ImageSpec) -> np.ndarray:
    """Clean images for a batch of flattened configurations, shape (N, side*side)."""
    pos = flat.reshape(flat.shape[0], n_atoms, 3)
    px = pos[:, :, 0] / spec.pixel_size  # image columns track x
    py = pos[:, :, 1] / spec.pixel_size  # image rows track y
    centers = _pixel_centers(spec)
    inv2s2 = 1.0 / (2.0 * spec.kernel_sigma_px**2)
    gx = np.exp(-((centers[None, None, :] - px[:, :, None]) ** 2) * inv2s2)  # (N, A, P)
    gy = np.exp(-((centers[None, None, :] - py[:, :, None]) ** 2) * inv2s2)
    img = np.einsum("nar,nac->nrc", gy, gx)
    return img.reshape(flat.shape[0], spec.side * spec.side)


def _splat_vjp(flat: np.ndarray, n_atoms: int, spec: ImageSpec, cot: np.ndarray) -> np.ndarray:
    """Jacobian action of the clean image onto flattened positions."""
    n = flat.shape[0]
    pos = flat.reshape(n, n_atoms, 3)
    px = pos[:, :, 0] / spec.pixel_size
    py = pos[:, :, 1] / spec.pixel_size
    centers = _pixel_centers(spec)
    inv2s2 = 1.0 / (2.0 * spec.kernel_sigma_px**2)
    dxc = centers[None, None, :] - px[:, :, None]
    dyr = centers[None, None, :] - py[:, :, None]
    gx = np.exp(-(dxc**2) * inv2s2)
    gy = np.exp(-(dyr**2) * inv2s2)
    cimg = cot.reshape(n, spec.side, spec.side)
    # d image[r, c] / d px = gy[r] * gx[c] * (c - px) / sigma^2
    wx = np.einsum("nrc,nar->nac", cimg, gy) * gx * dxc / spec.kernel_sigma_px**2
    wy = np.einsum("nrc,nac->nar", cimg, gx) * gy * dyr / spec.kernel_sigma_px**2
    grad = np.zeros_like(pos)
    grad[:, :, 0] = wx.sum(axis=2) / spec.pixel_size
    grad[:, :, 1] = wy.sum(axis=2) / spec.pixel_size
    return grad.reshape(n, -1)


class Observable:
    """A named differentiable map from flat states to observable vectors."""

    def __init__(self, name: str, in_dim: int, out_dim: int, fn, vjp):
        self.name = name
        self.in_dim = in_dim
        self.out_dim = out_dim
        self._fn = fn
        self._vjp = vjp

    def __call__(self, x: np.ndarray) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        if x.shape[1] != self.in_dim:
            raise ValueError(f"{self.name}: state width {x.shape[1]} != {self.in_dim}")
        return self._fn(x)

    def vjp(self, x: np.ndarray, cot: np.ndarray) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        return self._vjp(x, np.asarray(cot, dtype=np.float64))

    def apply(self, x: Tensor) -> Tensor:
        """Insert the map into a computation graph."""
        val = self(x.value)
        return custom_op(val, (x,), lambda up: (self.vjp(x.value, up),))


def project_pair_observable(i: int, j: int) -> Observable:
    """Pairwise coordinate projection of 3-D points onto axes (i, j)."""
    if i == j or not (0 <= i < 3 and 0 <= j < 3):
        raise ValueError(f"axes must be distinct in {{0,1,2}}, got ({i}, {j})")

    def fn(x):
        return x[:, [i, j]].copy()

    def vjp(x, cot):
        g = np.zeros_like(x)
        g[:, i] = cot[:, 0]
        g[:, j] = cot[:, 1]
        return g

    return Observable(f"proj_{'xyz'[i]}{'xyz'[j]}", 3, 2, fn, vjp)


def coordinate_observable(idx: int, in_dim: int) -> Observable:
    """Single-coordinate projection, a 1-D observable of the state."""
    if not 0 <= idx < in_dim:
        raise ValueError(f"coordinate {idx} out of range for dimension {in_dim}")

    def fn(x):
        return x[:, [idx]].copy()

    def vjp(x, cot):
        g = np.zeros_like(x)
        g[:, idx] = cot[:, 0]
        return g

    return Observable(f"coord_{idx}", in_dim, 1, fn, vjp)


def rg_observable(masses) -> Observable:
    """Radius of gyration over flattened (n_atoms*3)-dimensional states."""
    m = np.asarray(masses, dtype=np.float64).ravel()
    n_atoms = m.shape[0]
    total = m.sum()

    def fn(x):
        pos = x.reshape(-1, n_atoms, 3)
        com = np.einsum("a,nad->nd", m, pos) / total
        sq = ((pos - com[:, None, :]) ** 2).sum(axis=2)
        return np.sqrt(sq @ m / total)[:, None]

    def vjp(x, cot):
        pos = x.reshape(-1, n_atoms, 3)
        com = np.einsum("a,nad->nd", m, pos) / total
        cent = pos - com[:, None, :]
        rg = np.sqrt(((cent**2).sum(axis=2) @ m) / total)
        safe = np.maximum(rg, 1e-300)
        grad = m[None, :, None] * cent / (total * safe[:, None, None])
        grad[rg == 0.0] = 0.0
        return (cot[:, 0, None, None] * grad).reshape(x.shape)

    return Observable("rg", n_atoms * 3, 1, fn, vjp)


def mean_distance_observable(n_atoms: int) -> Observable:
    """Mean pairwise distance over flattened states."""
    if n_atoms < 2:
        raise ValueError("need at least two atoms")
    iu, ju = np.triu_indices(n_atoms, k=1)
    n_pairs = iu.shape[0]

    def fn(x):
        pos = x.reshape(-1, n_atoms, 3)
        d = np.linalg.norm(pos[:, iu] - pos[:, ju], axis=2)
        return d.mean(axis=1)[:, None]

    def vjp(x, cot):
        pos = x.reshape(-1, n_atoms, 3)
        diff = pos[:, iu] - pos[:, ju]
        d = np.linalg.norm(diff, axis=2)
        unit = diff / np.maximum(d, 1e-300)[:, :, None]
        unit[d == 0.0] = 0.0
        grad = np.zeros_like(pos)
        np.add.at(grad, (slice(None), iu), unit)
        np.add.at(grad, (slice(None), ju), -unit)
        return (cot[:, 0, None, None] * grad / n_pairs).reshape(x.shape)

    return Observable("mean_dist", n_atoms * 3, 1, fn, vjp)


def pair_distance_observable(n_atoms: int, i: int, j: int, name: str | None = None) -> Observable:
    """Distance between two named atoms (bond length, hydrogen-bond distance)."""
    if i == j or not (0 <= i < n_atoms and 0 <= j < n_atoms):
        raise ValueError(f"need distinct atom indices in [0, {n_atoms})")

    def fn(x):
        pos = x.reshape(-1, n_atoms, 3)
        return np.linalg.norm(pos[:, i] - pos[:, j], axis=1)[:, None]

    def vjp(x, cot):
        pos = x.reshape(-1, n_atoms, 3)
        diff = pos[:, i] - pos[:, j]
        d = np.linalg.norm(diff, axis=1)
        unit = diff / np.maximum(d, 1e-300)[:, None]
        unit[d == 0.0] = 0.0
        grad = np.zeros_like(pos)
        grad[:, i] = unit
        grad[:, j] = -unit
        return (cot[:, 0, None, None] * grad).reshape(x.shape)

    return Observable(name or f"dist_{i}_{j}", n_atoms * 3, 1, fn, vjp)


def group_com_observable(masses, group_a, group_b, name: str = "group_com") -> Observable:
    """Distance between the mass-weighted centers of two disjoint atom groups."""
    m = np.asarray(masses, dtype=np.float64).ravel()
    n_atoms = m.shape[0]
    a = np.asarray(group_a, dtype=np.int64)
    b = np.asarray(group_b, dtype=np.int64)
    if a.size == 0 or b.size == 0 or np.intersect1d(a, b).size:
        raise ValueError("groups must be nonempty and disjoint")
    wa = m[a] / m[a].sum()
    wb = m[b] / m[b].sum()

    def coms(pos):
        ca = np.einsum("a,nad->nd", wa, pos[:, a])
        cb = np.einsum("a,nad->nd", wb, pos[:, b])
        return ca, cb

    def fn(x):
        ca, cb = coms(x.reshape(-1, n_atoms, 3))
        return np.linalg.norm(ca - cb, axis=1)[:, None]

    def vjp(x, cot):
        pos = x.reshape(-1, n_atoms, 3)
        ca, cb = coms(pos)
        diff = ca - cb
        d = np.linalg.norm(diff, axis=1)
        unit = diff / np.maximum(d, 1e-300)[:, None]
        unit[d == 0.0] = 0.0
        grad = np.zeros_like(pos)
        grad[:, a] = wa[None, :, None] * unit[:, None, :]
        grad[:, b] = -wb[None, :, None] * unit[:, None, :]
        return (cot[:, 0, None, None] * grad).reshape(x.shape)

    return Observable(name, n_atoms * 3, 1, fn, vjp)


def image_observable(n_atoms: int, spec: ImageSpec) -> Observable:
    """Noisy splat image of a particle configuration; a fresh noise draw per call.

    The noise is additive and independent of the positions, so the Jacobian
    action is that of the clean image. Reseeding reproduces the draw
    sequence bitwise.
    """
    rng = np.random.default_rng(spec.seed)

    def fn(x):
        clean = _splat_clean(x, n_atoms, spec)
        if spec.snr is None:
            return clean
        sd = np.sqrt(clean.var(axis=1) / spec.snr)
        return clean + sd[:, None] * rng.standard_normal(clean.shape)

    def vjp(x, cot):
        return _splat_vjp(x, n_atoms, spec, cot)

    return Observable("image", n_atoms * 3, spec.side * spec.side, fn, vjp)
