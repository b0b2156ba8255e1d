"""Equiangular S2 / SO(3) grids, point-cloud voxelization and signal rotation.

Array conventions used throughout the package (``n = 2B``):

* spherical signal: ``(K, n, n)`` indexed ``(channel, alpha, beta)``
* SO(3) feature map: ``(C, n, n, n)`` indexed ``(channel, alpha, beta, gamma)``

Grid angles are ``alpha_i = 2*pi*i/n``, ``beta_j = pi*(2j+1)/(2n)`` and
``gamma_k = 2*pi*k/n``. In fractional index units a direction or rotation is
``u = alpha/(2*pi/n)``, ``v = beta/(pi/n) - 0.5``, ``w = gamma/(2*pi/n)``.
"""
from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path

import numpy as np

from .rotations import TWO_PI, euler_to_matrix, matrix_to_euler

SNAP_TOL = 1e-9


class EmptySupport(ValueError):
    """No point of the cloud lies inside the support radius."""


@dataclass(frozen=True)
class GridSpec:
    bandwidth: int
    channels: int = 1

    def __post_init__(self):
        if self.bandwidth < 2:
            raise ValueError(f"bandwidth must be >= 2, got {self.bandwidth}")
        if self.channels < 1:
            raise ValueError(f"channels must be >= 1, got {self.channels}")

    @property
    def n(self) -> int:
        return 2 * self.bandwidth


@dataclass
class PointCloud:
    points: np.ndarray
    keypoint: np.ndarray | None = None

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64).reshape(-1, 3)
        if self.keypoint is not None:
            self.keypoint = np.asarray(self.keypoint, dtype=np.float64).reshape(3)
        if not np.all(np.isfinite(self.points)):
            raise ValueError("point coordinates must be finite")

    def __len__(self) -> int:
        return len(self.points)

    @property
    def center(self) -> np.ndarray:
        if self.keypoint is not None:
            return self.keypoint
        return self.points.mean(axis=0)


# --------------------------------------------------------------------------- grids


def grid_angles(g: GridSpec):
    """Return ``(alphas, betas, gammas, quad_weights)``.

    ``quad_weights[j]`` is the S2 weight of every cell in ring ``j``; summed over
    the full ``n x n`` grid the weights give ``4*pi``.
    """
    return _grid_angles(g.n)


@lru_cache(maxsize=None)
def _grid_angles(n: int):
    idx = np.arange(n)
    alphas = TWO_PI * idx / n
    betas = np.pi * (2 * idx + 1) / (2 * n)
    gammas = TWO_PI * idx / n
    sb = np.sin(betas)
    w = 4.0 * np.pi * sb / (n * sb.sum())
    for a in (alphas, betas, gammas, w):
        a.setflags(write=False)
    return alphas, betas, gammas, w


def s2_weights(n: int) -> np.ndarray:
    return _grid_angles(n)[3]


def so3_weights(n: int) -> np.ndarray:
    """Per-ring SO(3) quadrature weights; the ``n**3`` grid sums to ``8*pi**2``."""
    sb = np.sin(_grid_angles(n)[1])
    return 8.0 * np.pi**2 * sb / (n * n * sb.sum())


def s2_integral(f: np.ndarray) -> np.ndarray:
    """Quadrature of a ``(..., n, n)`` signal over the sphere."""
    n = f.shape[-1]
    return np.einsum("...ab,b->...", f, s2_weights(n))


@lru_cache(maxsize=None)
def s2_grid_directions(n: int) -> np.ndarray:
    """Unit vectors of the S2 grid cells, shape ``(n, n, 3)``."""
    alphas, betas, _, _ = _grid_angles(n)
    a, b = np.meshgrid(alphas, betas, indexing="ij")
    out = np.stack([np.cos(a) * np.sin(b), np.sin(a) * np.sin(b), np.cos(b)], axis=-1)
    out.setflags(write=False)
    return out


@lru_cache(maxsize=None)
def so3_grid_rotations(n: int) -> np.ndarray:
    """Rotation matrices of the SO(3) grid, shape ``(n, n, n, 3, 3)``."""
    alphas, betas, gammas, _ = _grid_angles(n)
    a, b, c = np.meshgrid(alphas, betas, gammas, indexing="ij")
    out = euler_to_matrix(a, b, c)
    out.setflags(write=False)
    return out


# -------------------------------------------------------------- index helpers


def _snap(x: np.ndarray) -> np.ndarray:
    r = np.round(x)
    return np.where(np.abs(x - r) < SNAP_TOL, r, x)


def direction_angles(v: np.ndarray):
    """Azimuth and inclination of vectors; azimuth is 0 on the z-axis."""
    v = np.asarray(v, dtype=np.float64)
    rxy = np.hypot(v[..., 0], v[..., 1])
    beta = np.arctan2(rxy, v[..., 2])
    alpha = np.where(rxy > 1e-12 * np.maximum(np.abs(v[..., 2]), 1e-300),
                     np.arctan2(v[..., 1], v[..., 0]), 0.0)
    alpha = np.mod(alpha, TWO_PI)
    return alpha, beta


def angles_to_index(alpha, beta, gamma, n: int):
    """Euler angles to fractional grid coordinates ``(u, v, w)``."""
    u = _snap(np.mod(np.asarray(alpha) / (TWO_PI / n), n))
    v = _snap(np.asarray(beta) / (np.pi / n) - 0.5)
    w = _snap(np.mod(np.asarray(gamma) / (TWO_PI / n), n))
    # mod can return n for inputs just below a multiple of 2*pi
    return np.where(u >= n, 0.0, u), v, np.where(w >= n, 0.0, w)


def _linear_axis(x, n: int, periodic: bool, mode: str):
    if not periodic:
        x = np.clip(x, 0.0, n - 1)
    if mode == "nearest":
        i = np.floor(x + 0.5).astype(np.int64)
        i = i % n if periodic else np.minimum(i, n - 1)
        return [(i, np.ones_like(x))]
    i0 = np.floor(x).astype(np.int64)
    if periodic:
        t = x - i0
        i0 = i0 % n
        return [(i0, 1.0 - t), ((i0 + 1) % n, t)]
    i0 = np.minimum(i0, n - 1)
    t = x - i0
    return [(i0, 1.0 - t), (np.minimum(i0 + 1, n - 1), t)]


def s2_taps(u, v, n: int, mode: str = "bilinear"):
    """Interpolation taps at fractional S2 coordinates.

    Returns ``(ia, ib, w)`` with a trailing tap axis (4 for bilinear, 1 for
    nearest). Alpha wraps, beta is clamped to the outer ring centres.
    """
    au = _linear_axis(u, n, True, mode)
    bv = _linear_axis(v, n, False, mode)
    ia, ib, w = [], [], []
    for jb, wb in bv:
        for ja, wa in au:
            ia.append(ja)
            ib.append(jb)
            w.append(wa * wb)
    return np.stack(ia, -1), np.stack(ib, -1), np.stack(w, -1)


def so3_taps(u, v, w, n: int, mode: str = "trilinear"):
    """Interpolation taps at fractional SO(3) coordinates (8 or 1 per point)."""
    mode = "nearest" if mode == "nearest" else "linear"
    au = _linear_axis(u, n, True, mode)
    bv = _linear_axis(v, n, False, mode)
    gw = _linear_axis(w, n, True, mode)
    ia, ib, ig, wt = [], [], [], []
    for jb, wb in bv:
        for jg, wg in gw:
            for ja, wa in au:
                ia.append(ja)
                ib.append(jb)
                ig.append(jg)
                wt.append(wa * wb * wg)
    return np.stack(ia, -1), np.stack(ib, -1), np.stack(ig, -1), np.stack(wt, -1)


# ---------------------------------------------------------- signal rotation


def rotate_s2_signal(r, f: np.ndarray, mode: str = "bilinear") -> np.ndarray:
    """``[L_r f](x) = f(r^-1 x)`` sampled on the grid of ``f``."""
    f = np.asarray(f, dtype=np.float64)
    n = f.shape[-1]
    dirs = s2_grid_directions(n)
    y = dirs @ np.asarray(r, dtype=np.float64)  # rows of r^T x
    alpha, beta = direction_angles(y)
    u, v, _ = angles_to_index(alpha, beta, 0.0, n)
    ia, ib, w = s2_taps(u, v, n, mode="nearest" if mode == "nearest" else "bilinear")
    return np.sum(f[..., ia, ib] * w, axis=-1)


def rotate_so3_map(r, h: np.ndarray, mode: str = "trilinear") -> np.ndarray:
    """``[L_r h](Q) = h(r^-1 Q)`` with trilinear interpolation in Euler coordinates."""
    h = np.asarray(h, dtype=np.float64)
    n = h.shape[-1]
    q = np.asarray(r, dtype=np.float64).T @ so3_grid_rotations(n)
    alpha, beta, gamma = matrix_to_euler(q)
    u, v, w = angles_to_index(alpha, beta, gamma, n)
    ia, ib, ig, wt = so3_taps(u, v, w, n, mode)
    return np.sum(h[..., ia, ib, ig] * wt, axis=-1)


# ------------------------------------------------------------- voxelization


def normalize_cloud(c: PointCloud, radius: float) -> PointCloud:
    """Centre on the keypoint (or centroid), keep the ball of ``radius``, scale to unit."""
    if radius <= 0:
        raise ValueError("radius must be positive")
    centered = c.points - c.center
    keep = np.linalg.norm(centered, axis=1) <= radius
    if not np.any(keep):
        raise EmptySupport(f"no points within radius {radius}")
    return PointCloud(centered[keep] / radius, keypoint=np.zeros(3))


def voxel_bins(points: np.ndarray, g: GridSpec):
    """Bin indices ``(channel, alpha, beta)`` of normalized points."""
    n, k = g.n, g.channels
    rho = np.linalg.norm(points, axis=1)
    alpha, beta = direction_angles(points)
    ch = np.minimum(np.floor(rho * k).astype(np.int64), k - 1)
    ia = np.floor(alpha / TWO_PI * n).astype(np.int64) % n
    ib = np.minimum(np.floor(beta / np.pi * n).astype(np.int64), n - 1)
    return ch, ia, ib


def voxelize(c: PointCloud, g: GridSpec) -> np.ndarray:
    """Radially binned point density, shape ``(K, n, n)``, summing to 1."""
    if len(c) == 0:
        raise EmptySupport("cannot voxelize an empty cloud")
    ch, ia, ib = voxel_bins(c.points, g)
    out = np.zeros((g.channels, g.n, g.n))
    np.add.at(out, (ch, ia, ib), 1.0)
    return out / len(c)


# ----------------------------------------------------------------------- io


def read_cloud(path) -> PointCloud:
    """Read the plain-text ``x y z`` format; ``#keypoint x y z`` sets the keypoint."""
    keypoint = None
    rows = []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        s = line.strip()
        if not s:
            continue
        if s.startswith("#"):
            parts = s[1:].split()
            if parts and parts[0] == "keypoint":
                if len(parts) != 4:
                    raise ValueError(f"{path}:{lineno}: malformed keypoint header")
                keypoint = [float(x) for x in parts[1:]]
            continue
        parts = s.split()
        if len(parts) != 3:
            raise ValueError(f"{path}:{lineno}: expected 3 floats, got {len(parts)}")
        rows.append([float(x) for x in parts])
    return PointCloud(np.array(rows, dtype=np.float64).reshape(-1, 3), keypoint)


def write_cloud(path, c: PointCloud) -> None:
    lines = []
    if c.keypoint is not None:
        lines.append("#keypoint " + " ".join(f"{x:.17g}" for x in c.keypoint))
    lines.extend(f"{x:.17g} {y:.17g} {z:.17g}" for x, y, z in c.points)
    Path(path).write_text("\n".join(lines) + "\n")
