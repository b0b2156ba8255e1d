"""S2 and SO(3) correlations by direct quadrature, and the orientation network.

``s2_correlation(f, psi)[c, i, j, k] = sum_x w(x) sum_ch psi[c, ch](R_ijk^-1 x) f[ch](x)``
with the filter rotated by bilinear interpolation; ``so3_correlation`` is the
same on the rotation group with trilinear interpolation in Euler coordinates.
Each correlation has a matching vector-Jacobian product used by training.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.ndimage import gaussian_filter

from . import kernels
from .signals import GridSpec, s2_weights


class GridMismatch(ValueError):
    """Signal and filter grids (or channel counts) disagree."""


def _check_s2(f, psi):
    if f.ndim != 3 or psi.ndim != 4:
        raise GridMismatch(f"expected f (K,n,n) and psi (C,K,n,n), got {f.shape}, {psi.shape}")
    if psi.shape[1:] != f.shape or f.shape[1] != f.shape[2]:
        raise GridMismatch(f"filter grid {psi.shape[1:]} does not match signal {f.shape}")


def _check_so3(h, psi):
    if h.ndim != 4 or psi.ndim != 5:
        raise GridMismatch(f"expected h (C,n,n,n) and psi (C',C,n,n,n), got {h.shape}, {psi.shape}")
    if psi.shape[1:] != h.shape or len(set(h.shape[1:])) != 1:
        raise GridMismatch(f"filter grid {psi.shape[1:]} does not match map {h.shape}")


# --------------------------------------------------------------------- S2 layer


def s2_correlation(f: np.ndarray, psi: np.ndarray, _ctx: dict | None = None) -> np.ndarray:
    """Correlate a ``(K, n, n)`` signal with ``(C, K, n, n)`` filters -> ``(C, n, n, n)``."""
    f = np.asarray(f, dtype=np.float64)
    psi = np.asarray(psi, dtype=np.float64)
    _check_s2(f, psi)
    c, k, n, _ = psi.shape
    pm = psi.transpose(0, 2, 3, 1).reshape(c * n * n, k)
    fm = f.transpose(0, 2, 1).reshape(k, n * n)
    V = (pm @ fm).reshape(c, -1)
    if _ctx is not None:
        _ctx.update(pm=pm, fm=fm, shape=psi.shape)
    return kernels.gather(V, kernels.s2_table(n))


def s2_correlation_vjp(ctx: dict, gout: np.ndarray):
    """Gradients ``(d_f, d_psi)`` of an S2 correlation given the output gradient."""
    c, k, n, _ = ctx["shape"]
    dV = kernels.scatter(gout, kernels.s2_table(n)).reshape(c * n * n, n * n)
    dpsi = (dV @ ctx["fm"].T).reshape(c, n, n, k).transpose(0, 3, 1, 2)
    df = (ctx["pm"].T @ dV).reshape(k, n, n).transpose(0, 2, 1)
    return np.ascontiguousarray(df), np.ascontiguousarray(dpsi)


# ------------------------------------------------------------------- SO(3) layer


def _roll_index(n: int) -> np.ndarray:
    g = np.arange(n)
    return (g[:, None] + g[None, :]) % n


def so3_correlation(h: np.ndarray, psi: np.ndarray, _ctx: dict | None = None) -> np.ndarray:
    """Correlate a ``(Cin, n, n, n)`` map with ``(C, Cin, n, n, n)`` filters -> ``(C, n, n, n)``."""
    h = np.asarray(h, dtype=np.float64)
    psi = np.asarray(psi, dtype=np.float64)
    _check_so3(h, psi)
    c, cin, n = psi.shape[:3]
    # rolled[c, a', b', g', ch, g] = psi[c, ch, a', b', g' + g]
    rolled = psi[..., _roll_index(n)].transpose(0, 2, 3, 4, 1, 5).reshape(c * n**3, cin * n)
    hm = h.transpose(0, 3, 2, 1).reshape(cin * n, n * n)
    V = (rolled @ hm).reshape(c, -1)
    if _ctx is not None:
        _ctx.update(rolled=rolled, hm=hm, shape=psi.shape)
    return kernels.gather(V, kernels.so3_table(n))


def so3_correlation_vjp(ctx: dict, gout: np.ndarray):
    """Gradients ``(d_h, d_psi)`` of an SO(3) correlation."""
    c, cin, n = ctx["shape"][:3]
    dV = kernels.scatter(gout, kernels.so3_table(n)).reshape(c * n**3, n * n)
    drolled = (dV @ ctx["hm"].T).reshape(c, n, n, n, cin, n).transpose(0, 4, 1, 2, 3, 5)
    dpsi = np.zeros((c, cin, n, n, n))
    for g in range(n):
        dpsi += np.roll(drolled[..., g], g, axis=-1)
    dh = (ctx["rolled"].T @ dV).reshape(cin, n, n, n).transpose(0, 3, 2, 1)
    return np.ascontiguousarray(dh), dpsi


# ---------------------------------------------------------------------- network


@dataclass
class NetworkParams:
    """Filters and biases of one S2 layer followed by SO(3) layers.

    ``filters[0]`` has shape ``(C1, K, n, n)``; ``filters[l]`` for ``l >= 1`` has
    shape ``(C_{l+1}, C_l, n, n, n)``. The flat view concatenates
    ``filters[0], biases[0], filters[1], biases[1], ...`` in C order.
    """

    grid: GridSpec
    channels: tuple[int, ...]
    filters: list[np.ndarray] = field(default_factory=list)
    biases: list[np.ndarray] = field(default_factory=list)

    def __post_init__(self):
        self.channels = tuple(int(c) for c in self.channels)
        if not self.filters:
            self.filters = [np.zeros(s) for s in self.filter_shapes()]
            self.biases = [np.zeros(c) for c in self.channels]

    def filter_shapes(self) -> list[tuple[int, ...]]:
        n, k = self.grid.n, self.grid.channels
        shapes = [(self.channels[0], k, n, n)]
        for cin, cout in zip(self.channels[:-1], self.channels[1:]):
            shapes.append((cout, cin, n, n, n))
        return shapes

    @property
    def size(self) -> int:
        return sum(int(np.prod(s)) for s in self.filter_shapes()) + sum(self.channels)

    def flat(self) -> np.ndarray:
        parts = []
        for w, b in zip(self.filters, self.biases):
            parts.append(w.ravel())
            parts.append(b.ravel())
        return np.concatenate(parts)

    @classmethod
    def from_flat(cls, grid: GridSpec, channels, vec) -> "NetworkParams":
        p = cls(grid, tuple(channels))
        vec = np.asarray(vec, dtype=np.float64)
        if vec.shape != (p.size,):
            raise ValueError(f"expected {p.size} parameters, got {vec.shape}")
        pos = 0
        filters, biases = [], []
        for shape, c in zip(p.filter_shapes(), p.channels):
            m = int(np.prod(shape))
            filters.append(vec[pos : pos + m].reshape(shape).copy())
            pos += m
            biases.append(vec[pos : pos + c].copy())
            pos += c
        p.filters, p.biases = filters, biases
        return p


def init_params(g: GridSpec, channels, rng: np.random.Generator,
                smoothing: float = 0.0) -> NetworkParams:
    """Zero-mean Gaussian filters and zero biases.

    The std is ``1 / (mean_weight * sqrt(fan_in * cells))`` where ``mean_weight``
    is the average quadrature weight of the layer's domain, so that each layer
    sums roughly ``fan_in * cells`` unit-variance terms with unit weight.
    With ``smoothing > 0`` the white noise is first blurred by a periodic
    Gaussian of that many grid bins (then rescaled to the same std), which
    gives filters without bin-to-bin noise.
    """
    p = NetworkParams(g, tuple(channels))
    n = g.n
    filters = []
    for shape in p.filter_shapes():
        fan_in, cells = shape[1], int(np.prod(shape[2:]))
        measure = 4.0 * np.pi if len(shape) == 4 else 8.0 * np.pi**2
        mean_w = measure / (n ** (len(shape) - 2))
        w = rng.standard_normal(shape)
        if smoothing > 0:
            w = gaussian_filter(w, sigma=[0, 0] + [smoothing] * (len(shape) - 2), mode="wrap")
            w /= w.std()
        filters.append(w / (mean_w * np.sqrt(fan_in * cells)))
    p.filters = filters
    return p


def calibrate_params(p: NetworkParams, signals) -> NetworkParams:
    """Rescale each layer's filters so its pre-activation has unit RMS on ``signals``.

    ``signals`` are voxel signals as passed to :func:`network_forward`. ReLU is
    positively homogeneous, so the rescaling only changes activation scales.
    Biases must be zero.
    """
    if not signals:
        raise ValueError("calibration needs at least one signal")
    if any(np.any(b) for b in p.biases):
        raise ValueError("calibration expects zero biases")
    out = NetworkParams.from_flat(p.grid, p.channels, p.flat())
    scale = input_scale(p.grid)
    xs = [np.asarray(f, dtype=np.float64) * scale for f in signals]
    for layer, psi in enumerate(out.filters):
        if layer == 0:
            xs = [s2_correlation(x, psi) for x in xs]
        else:
            xs = [so3_correlation(np.maximum(x, 0.0), psi) for x in xs]
        rms = float(np.sqrt(np.mean([np.mean(x * x) for x in xs])))
        if rms > 0:
            psi /= rms
            xs = [x / rms for x in xs]
    return out


def layer_scales(p: NetworkParams) -> tuple[float, ...]:
    """RMS of each layer's filter entries (one where a layer is all zero)."""
    return tuple(float(np.sqrt(np.mean(w * w))) or 1.0 for w in p.filters)


def scale_vector(p: NetworkParams, scales) -> np.ndarray:
    """Per-layer filter scales spread over :meth:`NetworkParams.flat` order; biases get one."""
    scales = tuple(float(x) for x in scales)
    if len(scales) != len(p.filters):
        raise ValueError(f"expected {len(p.filters)} layer scales, got {len(scales)}")
    parts = []
    for s, shape, c in zip(scales, p.filter_shapes(), p.channels):
        parts.append(np.full(int(np.prod(shape)), s))
        parts.append(np.ones(c))
    return np.concatenate(parts)


def input_scale(g: GridSpec) -> np.ndarray:
    """Per-ring factor turning a voxel signal (cell masses summing to one) into a
    density whose quadrature integral is ``K * 4 * pi``, i.e. one on average.

    Dividing by the cell weight undoes the area already contained in the
    counts; without it the quadrature would weight masses by ``sin(beta)``
    twice and tilt the signal towards the equator.
    """
    return g.channels * 4.0 * np.pi / s2_weights(g.n)


def network_forward(p: NetworkParams, f: np.ndarray, return_layers: bool = False):
    """Final single-channel map ``(n, n, n)``; ReLU after every layer except the last."""
    f = np.asarray(f, dtype=np.float64)
    if f.shape != (p.grid.channels, p.grid.n, p.grid.n):
        raise GridMismatch(f"signal shape {f.shape} does not match {p.grid}")
    layers = []
    x = s2_correlation(f * input_scale(p.grid), p.filters[0]) + p.biases[0][:, None, None, None]
    for psi, b in zip(p.filters[1:], p.biases[1:]):
        x = np.maximum(x, 0.0)
        layers.append(x)
        x = so3_correlation(x, psi) + b[:, None, None, None]
    layers.append(x)
    out = x[0]
    return (out, layers) if return_layers else out


# ------------------------------------------------------------ tape-aware forward


def network_forward_tape(tape, pvars, f: np.ndarray, grid: GridSpec):
    """:func:`network_forward` recorded on ``tape``.

    ``pvars`` is a list of ``(filter_var, bias_var)`` pairs. Returns the Var of
    the final ``(n, n, n)`` map.
    """
    from .autodiff import add_bias, relu, take_channel

    f = np.asarray(f, dtype=np.float64) * input_scale(grid)
    (psi0, b0), rest = pvars[0], pvars[1:]
    ctx: dict = {}
    val = s2_correlation(f, psi0.value, ctx)
    x = tape.apply(val, (psi0,), lambda g, ctx=ctx: (s2_correlation_vjp(ctx, g)[1],))
    x = add_bias(tape, x, b0)
    for psi, b in rest:
        x = relu(tape, x)
        ctx = {}
        val = so3_correlation(x.value, psi.value, ctx)
        x = tape.apply(val, (x, psi), lambda g, ctx=ctx: so3_correlation_vjp(ctx, g))
        x = add_bias(tape, x, b)
    return take_channel(tape, x, 0)
