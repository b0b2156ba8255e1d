"""Rotation algebra on SO(3) with ZYZ Euler angles.

Rotations are plain ``(3, 3)`` float64 arrays (or stacks ``(..., 3, 3)``).
Euler triples follow ``R(alpha, beta, gamma) = Rz(alpha) @ Ry(beta) @ Rz(gamma)``.
"""
from __future__ import annotations

from typing import NamedTuple

import numpy as np

TWO_PI = 2.0 * np.pi
GIMBAL_TOL = 1e-8


class EulerZYZ(NamedTuple):
    alpha: float | np.ndarray
    beta: float | np.ndarray
    gamma: float | np.ndarray


def wrap_angle(a):
    """Wrap angles into ``[0, 2*pi)``."""
    a = np.mod(a, TWO_PI)
    return np.where(a >= TWO_PI, 0.0, a)


def rot_z(a) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    c, s = np.cos(a), np.sin(a)
    out = np.zeros(a.shape + (3, 3))
    out[..., 0, 0] = c
    out[..., 0, 1] = -s
    out[..., 1, 0] = s
    out[..., 1, 1] = c
    out[..., 2, 2] = 1.0
    return out


def rot_y(b) -> np.ndarray:
    b = np.asarray(b, dtype=np.float64)
    c, s = np.cos(b), np.sin(b)
    out = np.zeros(b.shape + (3, 3))
    out[..., 0, 0] = c
    out[..., 0, 2] = s
    out[..., 1, 1] = 1.0
    out[..., 2, 0] = -s
    out[..., 2, 2] = c
    return out


def euler_to_matrix(alpha, beta, gamma) -> np.ndarray:
    """``Rz(alpha) Ry(beta) Rz(gamma)``; broadcasts over array inputs."""
    alpha, beta, gamma = np.broadcast_arrays(
        np.asarray(alpha, dtype=np.float64),
        np.asarray(beta, dtype=np.float64),
        np.asarray(gamma, dtype=np.float64),
    )
    return rot_z(alpha) @ rot_y(beta) @ rot_z(gamma)


def matrix_to_euler(m) -> EulerZYZ:
    """Inverse of :func:`euler_to_matrix`.

    At gimbal lock (``sin(beta) < 1e-8``) gamma is set to 0 and alpha carries
    the whole z-rotation.
    """
    m = np.asarray(m, dtype=np.float64)
    sb = np.hypot(m[..., 0, 2], m[..., 1, 2])
    beta = np.arctan2(sb, m[..., 2, 2])
    alpha = np.arctan2(m[..., 1, 2], m[..., 0, 2])
    gamma = np.arctan2(m[..., 2, 1], -m[..., 2, 0])

    lock = sb < GIMBAL_TOL
    if np.any(lock):
        north = m[..., 2, 2] > 0
        a_north = np.arctan2(m[..., 1, 0], m[..., 1, 1])
        a_south = np.arctan2(-m[..., 1, 0], m[..., 1, 1])
        alpha = np.where(lock, np.where(north, a_north, a_south), alpha)
        beta = np.where(lock, np.where(north, 0.0, np.pi), beta)
        gamma = np.where(lock, 0.0, gamma)

    alpha, gamma = wrap_angle(alpha), wrap_angle(gamma)
    if np.ndim(alpha) == 0:
        return EulerZYZ(float(alpha), float(beta), float(gamma))
    return EulerZYZ(alpha, beta, gamma)


def angular_distance(r, s) -> float | np.ndarray:
    """Geodesic distance ``acos((tr(r^T s) - 1) / 2)`` in ``[0, pi]``."""
    r = np.asarray(r, dtype=np.float64)
    s = np.asarray(s, dtype=np.float64)
    tr = np.einsum("...ij,...ij->...", r, s)
    d = np.arccos(np.clip(0.5 * (tr - 1.0), -1.0, 1.0))
    return float(d) if np.ndim(d) == 0 else d


def quaternion_to_matrix(q) -> np.ndarray:
    """Unit quaternion(s) ``(w, x, y, z)`` to rotation matrices."""
    q = np.asarray(q, dtype=np.float64)
    w, x, y, z = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    out = np.empty(q.shape[:-1] + (3, 3))
    out[..., 0, 0] = 1 - 2 * (y * y + z * z)
    out[..., 0, 1] = 2 * (x * y - w * z)
    out[..., 0, 2] = 2 * (x * z + w * y)
    out[..., 1, 0] = 2 * (x * y + w * z)
    out[..., 1, 1] = 1 - 2 * (x * x + z * z)
    out[..., 1, 2] = 2 * (y * z - w * x)
    out[..., 2, 0] = 2 * (x * z - w * y)
    out[..., 2, 1] = 2 * (y * z + w * x)
    out[..., 2, 2] = 1 - 2 * (x * x + y * y)
    return out


def random_rotation(rng: np.random.Generator, size: int | None = None) -> np.ndarray:
    """Haar-uniform rotation(s): normalized 4D Gaussian mapped to a matrix."""
    shape = (4,) if size is None else (size, 4)
    q = rng.standard_normal(shape)
    q /= np.linalg.norm(q, axis=-1, keepdims=True)
    return quaternion_to_matrix(q)


def rotate_points(r, points) -> np.ndarray:
    """Apply ``r`` to each row of an ``(N, 3)`` array."""
    return np.asarray(points, dtype=np.float64) @ np.asarray(r, dtype=np.float64).T


def is_rotation(m, tol: float = 1e-12) -> bool:
    m = np.asarray(m, dtype=np.float64)
    return bool(
        np.allclose(m.T @ m, np.eye(3), rtol=0.0, atol=tol)
        and abs(np.linalg.det(m) - 1.0) <= tol
    )
