"""Self-supervised Siamese training of the orientation network.

One step: rotate a normalized cloud by a random rotation ``R`` (optionally
occluding the copy), locate the feature-map maximum of both clouds and
penalize the geodesic distance between the copy's rotation and ``R`` times
the original's. Only the rotated branch carries gradients.
"""
from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field
from typing import NamedTuple

import numpy as np

from .autodiff import Tape
from .correlation import (
    NetworkParams,
    calibrate_params,
    init_params,
    layer_scales,
    scale_vector,
    network_forward,
    network_forward_tape,
)
from .rotations import TWO_PI, euler_to_matrix, random_rotation, rot_y, rot_z, rotate_points
from .signals import GridSpec, PointCloud, normalize_cloud, voxelize

log = logging.getLogger(__name__)

ACOS_CLAMP = 1e-7


class DegenerateMap(ValueError):
    """Every bin of the feature map has the same value."""


class ConfigError(ValueError):
    pass


# ------------------------------------------------------------------ configs


@dataclass(frozen=True)
class SoftArgmaxConfig:
    temperature: float = 30.0
    parzen_radius: float = 3.0
    tiebreak: str = "lowest-index"

    def __post_init__(self):
        if not self.temperature > 0:
            raise ConfigError("temperature must be positive")
        if not self.parzen_radius >= 1:
            raise ConfigError("parzen_radius must be >= 1")
        if self.tiebreak != "lowest-index":
            raise ConfigError(f"unknown tiebreak rule {self.tiebreak!r}")


@dataclass(frozen=True)
class OcclusionConfig:
    apply_probability: float = 0.5
    num_shells: int = 4
    removal_fraction_range: tuple[float, float] = (0.1, 0.3)
    min_keep: int = 8

    def __post_init__(self):
        lo, hi = self.removal_fraction_range
        if not 0.0 <= self.apply_probability <= 1.0:
            raise ConfigError("apply_probability must lie in [0, 1]")
        if self.num_shells < 1:
            raise ConfigError("num_shells must be positive")
        if not 0.0 < lo < hi < 1.0:
            raise ConfigError("removal_fraction_range must satisfy 0 < lo < hi < 1")


@dataclass
class TrainConfig:
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    epochs: int = 10
    batch_size: int = 1
    seed: int = 0
    bandwidth: int = 8
    channels: int = 4
    layer_channels: tuple[int, ...] = (8, 4, 2, 1)
    val_split: float = 0.2
    radius: float = 1.0
    temperature: float = 30.0
    parzen_radius: float = 3.0
    occlusion_probability: float = 0.5
    occlusion_shells: int = 0  # 0 means one shell per radial channel
    removal_min: float = 0.1
    removal_max: float = 0.3
    init_smoothing: float = 2.0  # grid bins; 0 gives white-noise filters
    calibration_samples: int = 8  # 0 keeps the analytic init scale

    def validate(self) -> "TrainConfig":
        self.layer_channels = tuple(int(c) for c in self.layer_channels)
        if not self.learning_rate > 0:
            raise ConfigError("learning_rate must be positive")
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("epochs and batch_size must be >= 1")
        if not 0.0 < self.val_split < 1.0:
            raise ConfigError("val_split must lie in (0, 1)")
        if not self.radius > 0:
            raise ConfigError("radius must be positive")
        if self.init_smoothing < 0 or self.calibration_samples < 0:
            raise ConfigError("init_smoothing and calibration_samples must be >= 0")
        if not self.layer_channels or self.layer_channels[-1] != 1:
            raise ConfigError("layer_channels must end with a single output channel")
        try:
            self.grid, self.soft_argmax_config, self.occlusion_config
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
        return self

    @property
    def grid(self) -> GridSpec:
        return GridSpec(self.bandwidth, self.channels)

    @property
    def soft_argmax_config(self) -> SoftArgmaxConfig:
        return SoftArgmaxConfig(self.temperature, self.parzen_radius)

    @property
    def occlusion_config(self) -> OcclusionConfig:
        return OcclusionConfig(
            self.occlusion_probability,
            self.occlusion_shells or self.channels,
            (self.removal_min, self.removal_max),
        )

    def to_dict(self) -> dict:
        d = asdict(self)
        d["layer_channels"] = list(self.layer_channels)
        return d


# ------------------------------------------------------------- soft-argmax


class SoftArgmax(NamedTuple):
    coord: np.ndarray  # (i, j, k) in fractional grid units
    argmax: tuple[int, int, int]
    probs: np.ndarray  # Parzen-localized softmax weights, same shape as the map
    degenerate: bool


def hard_argmax(m: np.ndarray) -> tuple[int, int, int]:
    """Index of the maximum; ties go to the lowest linear (i, j, k) index."""
    return tuple(int(x) for x in np.unravel_index(int(np.argmax(m)), m.shape))


def _wrap_dist(idx: np.ndarray, c: int, n: int) -> np.ndarray:
    d = np.abs(idx - c)
    return np.minimum(d, n - d)


def parzen_window(shape, center, radius: float) -> np.ndarray:
    """Biweight kernel ``(1 - (d/h)^2)^2`` of the wrap-aware index distance."""
    n = shape[0]
    ii, jj, kk = np.ogrid[: shape[0], : shape[1], : shape[2]]
    d2 = (
        _wrap_dist(ii, center[0], n) ** 2
        + (jj - center[1]) ** 2
        + _wrap_dist(kk, center[2], n) ** 2
    )
    r2 = d2 / radius**2
    return np.where(r2 < 1.0, (1.0 - r2) ** 2, 0.0)


def soft_argmax(m: np.ndarray, cfg: SoftArgmaxConfig = SoftArgmaxConfig(),
                strict: bool = False) -> SoftArgmax:
    """Parzen-localized soft-argmax with circular averaging along alpha and gamma."""
    m = np.asarray(m, dtype=np.float64)
    n = m.shape[0]
    top = hard_argmax(m)
    if np.all(m == m.flat[0]):
        if strict:
            raise DegenerateMap("feature map is constant")
        probs = np.zeros_like(m)
        probs[top] = 1.0
        return SoftArgmax(np.zeros(3), top, probs, True)
    e = np.exp(cfg.temperature * (m - m[top])) * parzen_window(m.shape, top, cfg.parzen_radius)
    p = e / e.sum()
    return SoftArgmax(_expected_coord(p), top, p, False)


def _expected_coord(p: np.ndarray) -> np.ndarray:
    n = p.shape[0]
    theta = TWO_PI * np.arange(n) / n
    pi_, pj, pk = p.sum(axis=(1, 2)), p.sum(axis=(0, 2)), p.sum(axis=(0, 1))
    ci = np.arctan2(pi_ @ np.sin(theta), pi_ @ np.cos(theta)) * n / TWO_PI
    ck = np.arctan2(pk @ np.sin(theta), pk @ np.cos(theta)) * n / TWO_PI
    cj = pj @ np.arange(p.shape[1])
    return np.array([ci % n, cj, ck % n])


def soft_argmax_vjp(res: SoftArgmax, gcoord, temperature: float) -> np.ndarray:
    """Gradient of ``gcoord . coord`` with respect to the map values."""
    p = res.probs
    if res.degenerate:
        return np.zeros_like(p)
    n = p.shape[0]
    theta = TWO_PI * np.arange(n) / n
    sin, cos = np.sin(theta), np.cos(theta)
    pi_, pk = p.sum(axis=(1, 2)), p.sum(axis=(0, 1))

    def circ(marg):
        s, c = marg @ sin, marg @ cos
        return n / TWO_PI * (c * sin - s * cos) / (s * s + c * c)

    vi = circ(pi_)[:, None, None]
    vk = circ(pk)[None, None, :]
    jidx = np.arange(p.shape[1])[None, :, None]
    vj = jidx - res.coord[1]
    g = gcoord[0] * vi + gcoord[1] * vj + gcoord[2] * vk
    return temperature * p * g


# ------------------------------------------------------- coordinates -> SO(3)


def coord_to_euler(coord, n: int) -> np.ndarray:
    i, j, k = coord
    return np.array([TWO_PI * i / n, np.pi * (2 * j + 1) / (2 * n), TWO_PI * k / n])


def coord_to_rotation(coord, g: GridSpec | int) -> np.ndarray:
    """Grid coordinates (possibly fractional) to the rotation they index."""
    n = g if isinstance(g, int) else g.n
    return euler_to_matrix(*coord_to_euler(coord, n))


def _drot(a):
    c, s = np.cos(a), np.sin(a)
    dz = np.array([[-s, -c, 0.0], [c, -s, 0.0], [0.0, 0.0, 0.0]])
    dy = np.array([[-s, 0.0, c], [0.0, 0.0, 0.0], [-c, 0.0, -s]])
    return dz, dy


def coord_to_rotation_vjp(coord, n: int, grot: np.ndarray) -> np.ndarray:
    a, b, c = coord_to_euler(coord, n)
    za, zc, yb = rot_z(a), rot_z(c), rot_y(b)
    dza, _ = _drot(a)
    dzc, _ = _drot(c)
    _, dyb = _drot(b)
    ga = np.sum(grot * (dza @ yb @ zc))
    gb = np.sum(grot * (za @ dyb @ zc))
    gc = np.sum(grot * (za @ yb @ dzc))
    return np.array([ga * TWO_PI / n, gb * np.pi / n, gc * TWO_PI / n])


# ---------------------------------------------------------------- the loss


def _loss_cos(pred, target):
    c = 0.5 * (np.sum(np.asarray(pred) * np.asarray(target)) - 1.0)
    return c, float(np.clip(c, -1.0 + ACOS_CLAMP, 1.0 - ACOS_CLAMP))


def geodesic_loss(pred, target) -> float:
    """Angle of ``pred^T target`` with the acos argument kept off +-1."""
    return float(np.arccos(_loss_cos(pred, target)[1]))


def geodesic_loss_vjp(pred, target, gloss: float = 1.0) -> np.ndarray:
    c, cc = _loss_cos(pred, target)
    if c != cc:
        return np.zeros((3, 3))
    return -gloss * 0.5 * np.asarray(target) / np.sqrt(1.0 - cc * cc)


# -------------------------------------------------------------- augmentation


def occlusion_mask(points: np.ndarray, cfg: OcclusionConfig, rng: np.random.Generator) -> np.ndarray:
    """Boolean keep-mask of one occlusion draw on normalized points."""
    pts = np.asarray(points, dtype=np.float64)
    total = len(pts)
    if total == 0:
        raise ValueError("cannot occlude an empty cloud")
    keep = np.ones(total, dtype=bool)
    if rng.random() >= cfg.apply_probability:
        return keep
    s = cfg.num_shells
    shell = np.minimum(np.floor(np.linalg.norm(pts, axis=1) * s).astype(np.int64), s - 1)
    w = np.arange(1, s + 1, dtype=np.float64)
    pick = int(rng.choice(s, p=w / w.sum()))
    for cand in list(range(pick, s)) + list(range(pick - 1, -1, -1)):
        members = np.flatnonzero(shell == cand)
        if len(members):
            break
    seed = pts[members[int(rng.integers(len(members)))]]
    frac = rng.uniform(*cfg.removal_fraction_range)
    n_remove = max(0, min(int(round(frac * total)), total - cfg.min_keep))
    order = np.argsort(np.linalg.norm(pts - seed, axis=1), kind="stable")
    keep[order[:n_remove]] = False
    return keep


def occlusion_augment(c: PointCloud, cfg: OcclusionConfig, rng: np.random.Generator) -> PointCloud:
    """With probability ``cfg.apply_probability`` delete a neighbourhood of a seed point.

    The seed's shell is drawn with probability proportional to its (1-based)
    index counted from the centre, so outer shells are hit more often.
    """
    keep = occlusion_mask(c.points, cfg, rng)
    return c if keep.all() else PointCloud(c.points[keep], c.keypoint)


# ----------------------------------------------------------------- optimizer


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    step: int = 0

    @classmethod
    def zeros(cls, size: int) -> "AdamState":
        return cls(np.zeros(size), np.zeros(size), 0)

    def copy(self) -> "AdamState":
        return AdamState(self.m.copy(), self.v.copy(), self.step)


def adam_update(params: np.ndarray, grads: np.ndarray, state: AdamState, lr=1e-3,
                beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
    """One bias-corrected Adam step; returns new ``(params, state)``.

    ``lr`` is a scalar or a per-parameter array.
    """
    step = state.step + 1
    m = beta1 * state.m + (1.0 - beta1) * grads
    v = beta2 * state.v + (1.0 - beta2) * grads * grads
    m_hat = m / (1.0 - beta1**step)
    v_hat = v / (1.0 - beta2**step)
    return params - lr * m_hat / (np.sqrt(v_hat) + eps), AdamState(m, v, step)


# -------------------------------------------------------------- Siamese step


class StepResult(NamedTuple):
    loss: float
    grads: np.ndarray | None
    rotation: np.ndarray


def predict_rotation(p: NetworkParams, f: np.ndarray, cfg: SoftArgmaxConfig) -> np.ndarray:
    m = network_forward(p, f)
    return coord_to_rotation(soft_argmax(m, cfg).coord, p.grid)


def siamese_step(p: NetworkParams, v: PointCloud, cfg: TrainConfig, rng: np.random.Generator,
                 rotation=None, augment: bool = True, need_grad: bool = True) -> StepResult:
    """Loss (and flat gradients) of one self-supervised pair built from ``v``.

    ``v`` must already be normalized. ``rotation`` overrides the random draw.
    """
    g, sa_cfg = p.grid, cfg.soft_argmax_config
    r = random_rotation(rng) if rotation is None else np.asarray(rotation, dtype=np.float64)
    t = PointCloud(rotate_points(r, v.points), v.keypoint)
    if augment:
        t = occlusion_augment(t, cfg.occlusion_config, rng)
    f_v, f_t = voxelize(v, g), voxelize(t, g)

    target = r @ predict_rotation(p, f_v, sa_cfg)
    if not need_grad:
        return StepResult(geodesic_loss(predict_rotation(p, f_t, sa_cfg), target), None, r)
    loss, grads = branch_loss_and_grad(p, f_t, target, sa_cfg)
    return StepResult(loss, grads, r)


def branch_loss_and_grad(p: NetworkParams, f: np.ndarray, target: np.ndarray,
                         cfg: SoftArgmaxConfig):
    """Geodesic loss of the soft-argmax rotation of ``f`` against a fixed target,
    with its gradient as a flat vector in :meth:`NetworkParams.flat` order."""
    g = p.grid
    tape = Tape()
    pvars = [(tape.param(w), tape.param(b)) for w, b in zip(p.filters, p.biases)]
    m = network_forward_tape(tape, pvars, f, g)
    sa = soft_argmax(m.value, cfg)
    coord = tape.apply(sa.coord, (m,), lambda gc: (soft_argmax_vjp(sa, gc, cfg.temperature),))
    pred_val = coord_to_rotation(sa.coord, g)
    pred = tape.apply(pred_val, (coord,),
                      lambda gr: (coord_to_rotation_vjp(sa.coord, g.n, gr),))
    loss = tape.apply(geodesic_loss(pred_val, target), (pred,),
                      lambda gl: (geodesic_loss_vjp(pred_val, target, gl),))
    tape.backward(loss)
    parts = []
    for wv, bv in pvars:
        parts.append(np.zeros(wv.value.size) if wv.grad is None else wv.grad.ravel())
        parts.append(np.zeros(bv.value.size) if bv.grad is None else bv.grad.ravel())
    return float(loss.value), np.concatenate(parts)


# ---------------------------------------------------------------- training


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_loss: float


@dataclass
class TrainResult:
    params: NetworkParams
    adam: AdamState
    history: list[EpochRecord]
    initial_val_loss: float
    best_epoch: int
    epoch: int  # total epochs trained, including resumed ones
    config: TrainConfig = field(repr=False, default=None)
    lr_scale: tuple[float, ...] = field(repr=False, default=None)


def _rng(cfg: TrainConfig, *key) -> np.random.Generator:
    return np.random.default_rng([cfg.seed, *key])


def split_dataset(n_items: int, cfg: TrainConfig):
    """Deterministic ``(train_idx, val_idx)``; a single item validates on itself."""
    if n_items == 1:
        return np.array([0]), np.array([0])
    perm = _rng(cfg, 0).permutation(n_items)
    n_val = min(max(1, int(round(cfg.val_split * n_items))), n_items - 1)
    return np.sort(perm[n_val:]), np.sort(perm[:n_val])


def validation_loss(p: NetworkParams, clouds, idx, cfg: TrainConfig) -> float:
    losses = [siamese_step(p, clouds[i], cfg, _rng(cfg, 1, int(i)), need_grad=False).loss
              for i in idx]
    return float(np.mean(losses))


def initial_params(clouds, train_idx, cfg: TrainConfig) -> NetworkParams:
    """Fresh parameters: (smoothed) Gaussian init, then per-layer unit-RMS
    calibration on the first ``cfg.calibration_samples`` training clouds."""
    p = init_params(cfg.grid, cfg.layer_channels, _rng(cfg, 4), cfg.init_smoothing)
    if cfg.calibration_samples:
        sample = train_idx[: cfg.calibration_samples]
        p = calibrate_params(p, [voxelize(clouds[i], cfg.grid) for i in sample])
    return p


def train(dataset, cfg: TrainConfig, params: NetworkParams | None = None,
          adam: AdamState | None = None, start_epoch: int = 0,
          lr_scale=None) -> TrainResult:
    """Train (or resume training) on a list of raw point clouds.

    Clouds are normalized with ``cfg.radius`` around their keypoint or
    centroid. Each filter entry's Adam step is ``learning_rate`` times its
    layer's filter RMS at the start of training (``lr_scale``, kept with the
    checkpoint so resumed runs use the same steps). The returned params are
    those with the lowest validation loss, the initial ones included.
    """
    cfg.validate()
    if len(dataset) == 0:
        raise ConfigError("dataset is empty")
    clouds = [normalize_cloud(c, cfg.radius) for c in dataset]
    train_idx, val_idx = split_dataset(len(clouds), cfg)
    if params is None:
        params = initial_params(clouds, train_idx, cfg)
    elif params.grid != cfg.grid or params.channels != cfg.layer_channels:
        raise ConfigError("checkpoint grid/channels do not match the configuration")
    adam = AdamState.zeros(params.size) if adam is None else adam.copy()
    lr_scale = layer_scales(params) if lr_scale is None else tuple(float(x) for x in lr_scale)
    try:
        lr = cfg.learning_rate * scale_vector(params, lr_scale)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc

    flat = params.flat()
    initial = validation_loss(params, clouds, val_idx, cfg)
    best = (initial, params, adam.copy(), start_epoch)
    log.info("epoch %d val %.5f", start_epoch, initial)
    history = []
    for e in range(start_epoch, start_epoch + cfg.epochs):
        order = _rng(cfg, 2, e).permutation(train_idx)
        losses = []
        acc, n_acc = np.zeros_like(flat), 0
        for pos, i in enumerate(order):
            cur = NetworkParams.from_flat(cfg.grid, cfg.layer_channels, flat)
            res = siamese_step(cur, clouds[i], cfg, _rng(cfg, 3, e, pos))
            losses.append(res.loss)
            acc += res.grads
            n_acc += 1
            if n_acc == cfg.batch_size or pos == len(order) - 1:
                flat, adam = adam_update(flat, acc / n_acc, adam, lr,
                                         cfg.beta1, cfg.beta2, cfg.epsilon)
                acc[:] = 0.0
                n_acc = 0
        cur = NetworkParams.from_flat(cfg.grid, cfg.layer_channels, flat)
        val = validation_loss(cur, clouds, val_idx, cfg)
        history.append(EpochRecord(e + 1, float(np.mean(losses)), val))
        log.info("epoch %d train %.5f val %.5f", e + 1, history[-1].train_loss, val)
        if val < best[0]:
            best = (val, cur, adam.copy(), e + 1)
    return TrainResult(best[1], best[2], history, initial, best[3], start_epoch + cfg.epochs, cfg,
                       lr_scale)


def format_history(result: TrainResult) -> str:
    lines = [f"# initial_val_loss {result.initial_val_loss:.17g}",
             f"# best_epoch {result.best_epoch}",
             "epoch train_loss val_loss"]
    lines += [f"{r.epoch} {r.train_loss:.17g} {r.val_loss:.17g}" for r in result.history]
    return "\n".join(lines) + "\n"


# ------------------------------------------------------------------ inference


def orient(p: NetworkParams, c: PointCloud, radius: float):
    """Canonicalizing rotation ``g(c)`` and the cloud rotated by ``g^-1`` about its centre."""
    f = voxelize(normalize_cloud(c, radius), p.grid)
    g = coord_to_rotation(hard_argmax(network_forward(p, f)), p.grid)
    center = c.center
    canonical = PointCloud(rotate_points(g.T, c.points - center) + center, c.keypoint)
    return g, canonical
