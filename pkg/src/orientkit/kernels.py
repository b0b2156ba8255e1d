"""Tap tables for the quadrature correlations and the gather/scatter backends.

Both correlations reduce to a contraction ``V`` (dense, BLAS) followed by a
sparse gather that applies the rotated-filter interpolation taps. The tap
table only depends on the alpha-index *difference* between output rotation
and input sample, so shifting the input along alpha shifts the output by the
same number of bins with the identical floating-point reduction.

The compiled backend (``orientkit._kernels``) is used when importable. Set
``ORIENTKIT_BACKEND=python`` to force the scipy.sparse fallback.
"""
from __future__ import annotations

import os
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np
import scipy.sparse as sp

from .rotations import euler_to_matrix, matrix_to_euler, rot_y
from .signals import (
    _grid_angles,
    angles_to_index,
    direction_angles,
    s2_grid_directions,
    s2_taps,
    s2_weights,
    so3_taps,
    so3_weights,
)

try:
    from . import _kernels as _ext
except ImportError:  # pragma: no cover - depends on the build
    _ext = None

BACKENDS = ("cython", "python") if _ext is not None else ("python",)
_backend = os.environ.get("ORIENTKIT_BACKEND", BACKENDS[0])
if _backend not in BACKENDS:
    _backend = BACKENDS[0]


def get_backend() -> str:
    return _backend


def set_backend(name: str) -> None:
    global _backend
    if name not in BACKENDS:
        raise ValueError(f"backend {name!r} unavailable; choose from {BACKENDS}")
    _backend = name


def num_threads() -> int:
    try:
        return max(1, int(os.environ.get("ORIENTKIT_THREADS", "1")))
    except ValueError:
        return 1


@dataclass
class TapTable:
    """Interpolation taps indexed ``(j, d, b, t)``.

    ``A`` is the filter alpha index before the output-gamma shift, ``base``
    the remaining flat offset into one channel of ``V`` and ``W`` the tap
    weight with the quadrature weight of ring ``b`` folded in.
    """

    kind: str
    n: int
    A: np.ndarray
    base: np.ndarray
    W: np.ndarray
    stride_a: int
    size: int
    _fwd: sp.csr_matrix | None = field(default=None, repr=False)
    _adj: sp.csr_matrix | None = field(default=None, repr=False)

    def sparse(self):
        """Explicit ``(n**3, size)`` operator and its transpose (fallback path)."""
        if self._fwd is None:
            n = self.n
            t = self.W.shape[-1]
            # axes (i, j, k, d, b, t)
            i = np.arange(n).reshape(n, 1, 1, 1, 1, 1)
            j = np.arange(n).reshape(1, n, 1, 1, 1, 1)
            k = np.arange(n).reshape(1, 1, n, 1, 1, 1)
            d = np.arange(n).reshape(1, 1, 1, n, 1, 1)
            A = self.A.reshape(1, n, 1, n, n, t).astype(np.int64)
            base = self.base.reshape(1, n, 1, n, n, t)
            cols = ((A - k) % n) * self.stride_a + base + (i + d) % n
            rows = np.broadcast_to((i * n + j) * n + k, cols.shape)
            W = np.broadcast_to(self.W.reshape(1, n, 1, n, n, t), cols.shape)
            keep = W != 0.0
            m = sp.coo_matrix(
                (W[keep], (rows[keep], cols[keep])), shape=(n**3, self.size)
            ).tocsr()
            m.sum_duplicates()
            self._fwd = m
            self._adj = m.T.tocsr()
        return self._fwd, self._adj


def _finish(kind, n, ia, ib, ig, w, ring_weights, n_gamma):
    b_idx = np.arange(n).reshape(1, 1, n, 1)
    W = w * ring_weights.reshape(1, 1, n, 1)
    # V channel layout: (alpha', beta', gamma', b, a) with a innermost
    base = (ib.astype(np.int64) * n_gamma + ig) * n * n + b_idx * n
    stride_a = n * n_gamma * n * n
    return TapTable(
        kind=kind,
        n=n,
        A=np.ascontiguousarray(ia, dtype=np.int32),
        base=np.ascontiguousarray(base, dtype=np.int64),
        W=np.ascontiguousarray(W, dtype=np.float64),
        stride_a=stride_a,
        size=n * stride_a,
    )


@lru_cache(maxsize=None)
def s2_table(n: int) -> TapTable:
    """Taps of ``psi(R^-1 x)`` for ``R = R(alpha_i, beta_j, gamma_k)``, ``x = x(alpha_a, beta_b)``.

    ``R^-1 x = Rz(-gamma_k) Ry(-beta_j) x(alpha_a - alpha_i, beta_b)``; the
    table is computed for ``gamma = 0`` and the kernel shifts alpha by ``-k``.
    """
    _, betas, _, _ = _grid_angles(n)
    dirs = s2_grid_directions(n)  # (d, b, 3)
    ry = rot_y(-betas)  # (j, 3, 3)
    y = np.einsum("jpq,dbq->jdbp", ry, dirs)
    alpha, beta = direction_angles(y)
    u, v, _ = angles_to_index(alpha, beta, 0.0, n)
    ia, ib, w = s2_taps(u, v, n)
    return _finish("s2", n, ia, ib, np.zeros_like(ia), w, s2_weights(n), 1)


@lru_cache(maxsize=None)
def so3_table(n: int) -> TapTable:
    """Taps of ``psi(R^-1 Q)``; the Euler angles of ``R^-1 Q`` are those of
    ``Ry(-beta_j) Rz(alpha_a - alpha_i) Ry(beta_b)`` shifted by ``-gamma_k`` in
    alpha and ``+gamma_g`` in gamma, both exact grid shifts.
    """
    alphas, betas, _, _ = _grid_angles(n)
    x = (
        rot_y(-betas)[:, None, None]
        @ euler_to_matrix(alphas[None, :, None], betas[None, None, :], 0.0)
    )
    alpha, beta, gamma = matrix_to_euler(x)
    u, v, w = angles_to_index(alpha, beta, gamma, n)
    ia, ib, ig, wt = so3_taps(u, v, w, n)
    return _finish("so3", n, ia, ib, ig, wt, so3_weights(n), n)


def gather(V: np.ndarray, table: TapTable) -> np.ndarray:
    """Apply the tap table to ``V`` of shape ``(C, table.size)``; returns ``(C, n, n, n)``."""
    V = np.ascontiguousarray(V, dtype=np.float64)
    n = table.n
    if _backend == "cython":
        return _ext.gather(V, table.A, table.base, table.W, table.stride_a, num_threads())
    fwd, _ = table.sparse()
    return np.ascontiguousarray((fwd @ V.T).T).reshape(V.shape[0], n, n, n)


def scatter(dout: np.ndarray, table: TapTable) -> np.ndarray:
    """Adjoint of :func:`gather`; returns ``(C, table.size)``."""
    dout = np.ascontiguousarray(dout, dtype=np.float64)
    if _backend == "cython":
        return _ext.scatter(
            dout, table.A, table.base, table.W, table.stride_a, table.size, num_threads()
        )
    _, adj = table.sparse()
    c = dout.shape[0]
    return np.ascontiguousarray((adj @ dout.reshape(c, -1).T).T)
