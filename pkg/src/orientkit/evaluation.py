"""LRF repeatability, correspondences, synthetic benchmarks and a covariance baseline.

A local reference frame (LRF) is stored as a rotation matrix whose columns are
the x, y and z axes. A pair of frames related by the ground-truth rotation
``R_ts`` (target to source) is repeatable when both ``x_s . R_ts x_t`` and
``z_s . R_ts z_t`` reach the cosine threshold ``rho``.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from .rotations import angular_distance, random_rotation, rotate_points
from .signals import PointCloud
from .training import OcclusionConfig, occlusion_mask

RHO_PAPER = 0.97
RHO_DESK = float(np.cos(np.pi / 4))  # two grid steps at B = 8


class EmptyCorrespondences(ValueError):
    """Repeatability needs at least one correspondence."""


class DegenerateGeometry(ValueError):
    """Covariance eigenvalues too close to define a frame."""


@dataclass(frozen=True)
class RigidTransform:
    """``x -> rotation @ x + translation``."""

    rotation: np.ndarray
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        object.__setattr__(self, "rotation", np.asarray(self.rotation, dtype=np.float64))
        object.__setattr__(self, "translation", np.asarray(self.translation, dtype=np.float64))
        if self.rotation.shape != (3, 3) or self.translation.shape != (3,):
            raise ValueError("rigid transform needs a 3x3 rotation and a 3-vector")

    @classmethod
    def identity(cls) -> "RigidTransform":
        return cls(np.eye(3))

    def apply(self, pts) -> np.ndarray:
        return rotate_points(self.rotation, pts) + self.translation

    def inverse(self) -> "RigidTransform":
        rt = self.rotation.T
        return RigidTransform(rt, -rt @ self.translation)

    def compose(self, other: "RigidTransform") -> "RigidTransform":
        """``self`` after ``other``."""
        return RigidTransform(self.rotation @ other.rotation,
                              self.rotation @ other.translation + self.translation)

    def to_row(self) -> np.ndarray:
        return np.concatenate([self.rotation.ravel(), self.translation])

    @classmethod
    def from_row(cls, row) -> "RigidTransform":
        row = np.asarray(row, dtype=np.float64)
        if row.shape != (12,):
            raise ValueError(f"expected 12 values, got {row.shape}")
        return cls(row[:9].reshape(3, 3), row[9:])


def lrf_from_rotation(r) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """The x, y and z axes (matrix columns) of a frame."""
    r = np.asarray(r, dtype=np.float64)
    return r[:, 0].copy(), r[:, 1].copy(), r[:, 2].copy()


# -------------------------------------------------------------- repeatability


def repeatable(lrfs_src, lrfs_trg, rotation_ts, rho: float = RHO_PAPER) -> np.ndarray:
    """Per-pair indicator; ``lrfs_*`` are ``(m, 3, 3)`` frames (columns = axes)."""
    src = np.asarray(lrfs_src, dtype=np.float64).reshape(-1, 3, 3)
    trg = np.asarray(lrfs_trg, dtype=np.float64).reshape(-1, 3, 3)
    if src.shape != trg.shape:
        raise ValueError(f"frame lists differ in length: {src.shape} vs {trg.shape}")
    mapped = np.asarray(rotation_ts, dtype=np.float64) @ trg
    dx = np.einsum("mi,mi->m", src[:, :, 0], mapped[:, :, 0])
    dz = np.einsum("mi,mi->m", src[:, :, 2], mapped[:, :, 2])
    return (dx >= rho) & (dz >= rho)


def repeatability(lrfs_src, lrfs_trg, g_ts, rho: float = RHO_PAPER, corr=None) -> float:
    """Fraction of corresponding frames that agree after mapping target axes by ``g_ts``.

    ``g_ts`` is a :class:`RigidTransform` (only its rotation matters) or a 3x3
    matrix. With ``corr`` given, ``lrfs_src[a]`` is paired with ``lrfs_trg[b]``
    for each ``(a, b)``; otherwise the lists are already aligned.
    """
    rot = g_ts.rotation if isinstance(g_ts, RigidTransform) else g_ts
    src = np.asarray(lrfs_src, dtype=np.float64).reshape(-1, 3, 3)
    trg = np.asarray(lrfs_trg, dtype=np.float64).reshape(-1, 3, 3)
    if corr is not None:
        corr = np.asarray(corr, dtype=np.int64).reshape(-1, 2)
        src, trg = src[corr[:, 0]], trg[corr[:, 1]]
    if len(src) == 0:
        raise EmptyCorrespondences("no correspondences to score")
    return float(np.mean(repeatable(src, trg, rot, rho)))


def random_baseline(rho: float, samples: int = 10**6, seed: int = 0) -> float:
    """Monte Carlo repeatability of frames related by Haar-random rotations."""
    r = random_rotation(np.random.default_rng(seed), size=samples)
    return float(np.mean((r[:, 0, 0] >= rho) & (r[:, 2, 2] >= rho)))


# ------------------------------------------------------------ correspondences


def subsample(points, spacing: float) -> np.ndarray:
    """Greedy Poisson-disk style subsampling in input order; returns kept indices."""
    pts = np.asarray(points, dtype=np.float64)
    tree = cKDTree(pts)
    taken = np.zeros(len(pts), dtype=bool)
    keep = []
    for i in range(len(pts)):
        if taken[i]:
            continue
        keep.append(i)
        taken[tree.query_ball_point(pts[i], spacing)] = True
    return np.asarray(keep, dtype=np.int64)


def build_correspondences(src: PointCloud, trg: PointCloud, g_ts: RigidTransform,
                          spacing: float, overlap_tol: float | None = None) -> np.ndarray:
    """Index pairs ``(src_idx, trg_idx)`` sampled over the overlap.

    ``g_ts`` maps target coordinates into the source frame; source samples
    are mapped with its inverse and paired with their nearest target point
    when it lies within ``overlap_tol`` (default ``spacing / 2``).
    """
    tol = spacing / 2.0 if overlap_tol is None else overlap_tol
    if len(src) == 0 or len(trg) == 0:
        return np.zeros((0, 2), dtype=np.int64)
    picks = subsample(src.points, spacing)
    mapped = g_ts.inverse().apply(src.points[picks])
    dist, nn = cKDTree(trg.points).query(mapped)
    ok = dist <= tol
    return np.stack([picks[ok], nn[ok]], axis=1).astype(np.int64)


# ----------------------------------------------------------- synthetic data


@dataclass
class View:
    cloud: PointCloud
    transform: RigidTransform  # model -> view, before jitter
    kept: np.ndarray  # model indices surviving occlusion, in view order


@dataclass
class SyntheticModel:
    points: np.ndarray
    views: list[View]

    @property
    def extent(self) -> float:
        return float(np.ptp(self.points, axis=0).max())


def _unit_sphere(rng, n):
    v = rng.standard_normal((n, 3))
    return v / np.linalg.norm(v, axis=1, keepdims=True)


def _ellipsoid(rng, n):
    return _unit_sphere(rng, n) * rng.uniform(0.08, 0.3, 3)


def _box(rng, n):
    half = rng.uniform(0.05, 0.25, 3)
    pts = rng.uniform(-1.0, 1.0, (n, 3))
    face = rng.integers(3, size=n)
    pts[np.arange(n), face] = np.sign(pts[np.arange(n), face])
    return pts * half


def _corner(rng, n):
    size = rng.uniform(0.1, 0.3)
    pts = rng.uniform(0.0, size, (n, 3))
    pts[np.arange(n), rng.integers(3, size=n)] = 0.0
    return pts


_PRIMITIVES = (_ellipsoid, _box, _corner)


def _eigen_gap_ok(pts, min_gap: float) -> bool:
    lam = np.linalg.eigvalsh(np.cov(pts.T))
    pairs = [(lam[0], lam[1]), (lam[1], lam[2]), (lam[0], lam[2])]
    return all(abs(a - b) >= min_gap * max(a, b) for a, b in pairs)


def make_model(rng: np.random.Generator, n_points: int = 2000, min_gap: float = 0.05,
               max_tries: int = 100) -> np.ndarray:
    """Asymmetric cloud: 3 to 6 random primitives thinned by a linear density ramp."""
    for _ in range(max_tries):
        parts = []
        for _ in range(int(rng.integers(3, 7))):
            prim = _PRIMITIVES[int(rng.integers(len(_PRIMITIVES)))]
            raw = prim(rng, 2 * n_points)
            rot = random_rotation(rng)
            parts.append(rotate_points(rot, raw) + rng.uniform(-0.25, 0.25, 3))
        pts = np.concatenate(parts)
        # keep points with probability rising along a random direction
        axis = _unit_sphere(rng, 1)[0]
        s = pts @ axis
        s = (s - s.min()) / max(np.ptp(s), 1e-12)
        pts = pts[rng.random(len(pts)) < 0.15 + 0.85 * s]
        if len(pts) < n_points:
            continue
        pts = pts[rng.choice(len(pts), n_points, replace=False)]
        pts -= pts.mean(axis=0)
        if _eigen_gap_ok(pts, min_gap):
            return pts
    raise RuntimeError("could not draw an asymmetric model")


def make_view(model: np.ndarray, rng: np.random.Generator, occlusion: OcclusionConfig,
              jitter: float = 0.005, translation_scale: float = 0.5) -> View:
    """Occlude the model, apply a random rigid transform and add Gaussian jitter."""
    extent = float(np.ptp(model, axis=0).max())
    center = model.mean(axis=0)
    scale = np.linalg.norm(model - center, axis=1).max()
    kept = np.flatnonzero(occlusion_mask((model - center) / scale, occlusion, rng))
    g = RigidTransform(random_rotation(rng), rng.standard_normal(3) * translation_scale * extent)
    pts = g.apply(model[kept]) + rng.standard_normal((len(kept), 3)) * jitter * extent
    return View(PointCloud(pts), g, kept)


def make_synthetic_benchmark(n_models: int, n_views: int, rng: np.random.Generator,
                             occlusion: OcclusionConfig | None = None,
                             n_points: int = 2000) -> list[SyntheticModel]:
    if n_models < 1 or n_views < 1:
        raise ValueError("need at least one model and one view")
    occlusion = OcclusionConfig() if occlusion is None else occlusion
    models = []
    for _ in range(n_models):
        pts = make_model(rng, n_points)
        models.append(SyntheticModel(pts, [make_view(pts, rng, occlusion) for _ in range(n_views)]))
    return models


# ----------------------------------------------------------------- baseline


def baseline_covariance_orienter(c: PointCloud | np.ndarray, min_gap: float = 1e-6) -> np.ndarray:
    """Frame from covariance eigenvectors, x and z pointing toward the bulk of the points."""
    pts = c.points if isinstance(c, PointCloud) else np.asarray(c, dtype=np.float64)
    if len(pts) < 3:
        raise DegenerateGeometry("need at least three points")
    centred = pts - pts.mean(axis=0)
    lam, vec = np.linalg.eigh(centred.T @ centred / len(pts))
    lam, vec = lam[::-1], vec[:, ::-1]
    top = max(lam[0], 1e-300)
    if (lam[0] - lam[1]) / top < min_gap or (lam[1] - lam[2]) / top < min_gap or lam[1] / top < min_gap:
        raise DegenerateGeometry(f"eigenvalues {lam} do not define a unique frame")
    x, z = vec[:, 0], vec[:, 2]
    # sign by the majority of points; the sum of projections is identically zero
    if np.sum(np.sign(centred @ x)) < 0:
        x = -x
    if np.sum(np.sign(centred @ z)) < 0:
        z = -z
    y = np.cross(z, x)
    return np.stack([x, y, z], axis=1)


def frame_error(r_est_src, r_est_trg, rotation_ts) -> float:
    """Angle between the source frame and the ground-truth-mapped target frame."""
    return angular_distance(np.asarray(r_est_src), np.asarray(rotation_ts) @ np.asarray(r_est_trg))


# ---------------------------------------------------------- benchmark scoring


def pair_transform(g_s: RigidTransform, g_t: RigidTransform) -> RigidTransform:
    """Map from view ``t`` coordinates to view ``s`` given model-to-view transforms."""
    return g_s.compose(g_t.inverse())


def _frames(orienter, cloud: PointCloud, idx, radius, cache: dict) -> np.ndarray:
    out = []
    for i in idx:
        if i not in cache:
            if i < 0:
                cache[i] = orienter(cloud)
            else:
                pts = cloud.points
                near = pts[np.linalg.norm(pts - pts[i], axis=1) <= radius]
                cache[i] = orienter(PointCloud(near, pts[i]))
        out.append(cache[i])
    return np.asarray(out).reshape(-1, 3, 3)


def score_model(clouds, transforms, orienter, rhos, spacing: float = 0.0,
                radius: float = 1.0) -> np.ndarray:
    """Mean repeatability over ordered view pairs ``(s, t)``, ``s != t``, per ``rho``.

    ``orienter(PointCloud) -> 3x3`` returns a frame (it may raise, which
    counts the frame as not repeatable). With ``spacing > 0`` keypoints are
    sampled over the overlap and frames are computed on the patch of
    ``radius`` around each one; with ``spacing == 0`` each view contributes a
    single frame about its centroid. Pairs without correspondences are
    skipped; if none remain the result is NaN.
    """
    rhos = np.atleast_1d(np.asarray(rhos, dtype=np.float64))
    caches = [dict() for _ in clouds]

    def safe(c):
        try:
            return orienter(c)
        except ValueError:
            return np.full((3, 3), np.nan)

    scores = []
    for s in range(len(clouds)):
        for t in range(len(clouds)):
            if s == t:
                continue
            g_ts = pair_transform(transforms[s], transforms[t])
            if spacing > 0:
                corr = build_correspondences(clouds[s], clouds[t], g_ts, spacing)
            else:
                corr = np.array([[-1, -1]])
            if len(corr) == 0:
                continue
            fs = _frames(safe, clouds[s], corr[:, 0], radius, caches[s])
            ft = _frames(safe, clouds[t], corr[:, 1], radius, caches[t])
            scores.append([repeatability(fs, ft, g_ts, rho) for rho in rhos])
    if not scores:
        return np.full(len(rhos), np.nan)
    return np.mean(scores, axis=0)


def rotated_duplicates(c: PointCloud, n_copies: int, rng: np.random.Generator):
    """Copies of ``c`` rotated about its centre by random rotations (the first is ``c``).

    Returns the clouds and the model-to-copy transforms.
    """
    centre = c.center
    clouds, transforms = [], []
    for i in range(n_copies):
        r = np.eye(3) if i == 0 else random_rotation(rng)
        g = RigidTransform(r, centre - r @ centre)
        clouds.append(PointCloud(g.apply(c.points), c.keypoint if c.keypoint is None
                                 else g.apply(c.keypoint[None])[0]))
        transforms.append(g)
    return clouds, transforms
