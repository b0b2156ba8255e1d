"""Acceptance criteria, one test per criterion.

Each test prints (and records for the terminal summary) a single
``CRITERION n: PASS|FAIL ...`` line before asserting. Criteria 5 and 7 train
the desk-scale network and take tens of minutes; they are marked ``slow``.
"""
import time

import numpy as np
import pytest

from conftest import ACCEPTANCE_LINES
from orientkit.cli import format_table
from orientkit.correlation import NetworkParams, init_params, network_forward
from orientkit.evaluation import (
    RHO_DESK,
    RHO_PAPER,
    baseline_covariance_orienter,
    make_synthetic_benchmark,
    random_baseline,
    repeatability,
    rotated_duplicates,
    score_model,
)
from orientkit.persist import Checkpoint
from orientkit.rotations import (
    angular_distance,
    euler_to_matrix,
    matrix_to_euler,
    random_rotation,
    rot_y,
    rot_z,
)
from orientkit.signals import GridSpec, PointCloud, normalize_cloud, rotate_s2_signal, voxelize
from orientkit.training import (
    TrainConfig,
    branch_loss_and_grad,
    coord_to_rotation,
    geodesic_loss,
    orient,
    siamese_step,
    soft_argmax,
    split_dataset,
    train,
)
from test_rotations import quat_from_matrix

# frozen Monte Carlo baseline at rho = cos 45 deg (10^6 Haar samples, seed 0)
BASELINE_COS45 = 0.032233


def report(number, ok: bool, detail: str) -> None:
    line = f"CRITERION {number}: {'PASS' if ok else 'FAIL'} {detail}"
    print(line)
    ACCEPTANCE_LINES.append(line)
    assert ok, line


# ------------------------------------------------------------------ 1


def test_criterion_1_exact_subgroup_equivariance():
    start = time.perf_counter()
    g = GridSpec(8, 4)
    rng = np.random.default_rng(1)
    p = init_params(g, (8, 4, 2, 1), rng)
    for b in p.biases:
        b[:] = rng.standard_normal(b.shape) * 0.1
    f = rng.random((4, g.n, g.n))
    _, layers = network_forward(p, f, return_layers=True)
    worst = 0.0
    for m in (1, 5, 11):
        _, moved = network_forward(p, rotate_s2_signal(rot_z(2 * np.pi * m / g.n), f),
                                   return_layers=True)
        for a, b in zip(layers, moved):
            worst = max(worst, float(np.abs(b - np.roll(a, m, axis=1)).max()))
    elapsed = time.perf_counter() - start
    report(1, worst <= 1e-9 and elapsed <= 60,
           f"max abs diff {worst:.3e} over all layers (<= 1e-9), {elapsed:.1f}s (<= 60s)")


# ------------------------------------------------------------------ 2


def test_criterion_2_gradient_oracle():
    start = time.perf_counter()
    cfg = TrainConfig(bandwidth=4, layer_channels=(2, 2, 1, 1), radius=1.0, temperature=3.0).validate()
    rng = np.random.default_rng(2)
    p = init_params(cfg.grid, cfg.layer_channels, rng)
    for b in p.biases:
        b[:] = rng.standard_normal(b.shape) * 0.05
    pts = rng.standard_normal((1500, 3)) * [0.5, 0.3, 0.15]
    f = voxelize(normalize_cloud(PointCloud(pts), 1.0), cfg.grid)
    target = random_rotation(rng)
    sa = cfg.soft_argmax_config
    loss, grads = branch_loss_and_grad(p, f, target, sa)
    flat = p.flat()

    def objective(x):
        q = NetworkParams.from_flat(cfg.grid, cfg.layer_channels, x)
        m = network_forward(q, f)
        return geodesic_loss(coord_to_rotation(soft_argmax(m, sa).coord, cfg.grid), target)

    idx = rng.choice(flat.size, 50, replace=False)
    worst = 0.0
    for q in idx:
        e = np.zeros_like(flat)
        e[q] = 1e-5
        fd = (objective(flat + e) - objective(flat - e)) / 2e-5
        worst = max(worst, abs(fd - grads[q]) / max(abs(fd), abs(grads[q]), 1e-6))
    elapsed = time.perf_counter() - start
    report(2, worst <= 1e-4 and elapsed <= 300,
           f"max relative error {worst:.3e} on 50 parameters (<= 1e-4), {elapsed:.1f}s")


# ------------------------------------------------------------------ 3


def test_criterion_3_loss_identities():
    cfg = TrainConfig(bandwidth=4, layer_channels=(4, 4, 2, 1), radius=1.0, temperature=3.0).validate()
    p = init_params(cfg.grid, cfg.layer_channels, np.random.default_rng(3))
    pts = np.random.default_rng(4).standard_normal((1000, 3)) * [0.5, 0.3, 0.15]
    v = normalize_cloud(PointCloud(pts), 1.0)
    same = siamese_step(p, v, cfg, None, rotation=np.eye(3), augment=False, need_grad=False).loss
    target = random_rotation(np.random.default_rng(5))
    forced = geodesic_loss(target @ rot_z(0.3), target)
    ok = same <= 1e-3 and abs(forced - 0.3) <= 1e-6
    report(3, ok, f"identity pair loss {same:.2e} (<= 1e-3); forced Rz(0.3) loss {forced:.9f} (0.3 +- 1e-6)")


# ------------------------------------------------------------------ 4


def test_criterion_4_rotation_oracles():
    rng = np.random.default_rng(11)
    a = rng.uniform(0, 2 * np.pi, 1000)
    b = rng.uniform(0.1, np.pi - 0.1, 1000)
    c = rng.uniform(0, 2 * np.pi, 1000)
    m = euler_to_matrix(a, b, c)
    round_trip = float(np.abs(euler_to_matrix(*matrix_to_euler(m)) - m).max())
    r, s = random_rotation(rng, size=1000), random_rotation(rng, size=1000)
    want = [2 * np.arccos(min(1.0, abs(quat_from_matrix(x) @ quat_from_matrix(y)))) for x, y in zip(r, s)]
    dist = float(np.abs(angular_distance(r, s) - np.asarray(want)).max())
    haar = random_rotation(np.random.default_rng(2024), size=10**6)
    mean = float(angular_distance(np.eye(3), haar).mean())
    gap = abs(mean - (np.pi / 2 + 2 / np.pi))
    ok = round_trip < 1e-10 and dist <= 1e-9 and gap < 0.01
    report(4, ok, f"Euler round trip {round_trip:.1e} (< 1e-10); quaternion oracle {dist:.1e} (<= 1e-9); "
                  f"Haar mean angle {mean:.4f} (|gap| {gap:.4f} < 0.01)")


# -------------------------------------------------------------- 5 and 7


def desk_config(seed: int = 0) -> TrainConfig:
    return TrainConfig(bandwidth=8, channels=4, layer_channels=(8, 4, 2, 1), epochs=30, seed=seed,
                       radius=0.8, temperature=3.0).validate()


def desk_run(seed: int = 0, n_copies: int = 4):
    """Train on the synthetic benchmark and score held-out rotated duplicates."""
    cfg = desk_config(seed)
    models = make_synthetic_benchmark(20, 4, np.random.default_rng(seed))
    clouds = [v.cloud for m in models for v in m.views]
    start = time.perf_counter()
    result = train(clouds, cfg)
    _, val_idx = split_dataset(len(clouds), cfg)
    rhos = [RHO_PAPER, RHO_DESK]

    def net(c):
        return orient(result.params, c, cfg.radius)[0]

    rows, base = [], []
    for i in val_idx:
        dups, transforms = rotated_duplicates(clouds[i], n_copies, np.random.default_rng([seed, 7, int(i)]))
        rows.append((f"view_{i}", score_model(dups, transforms, net, rhos)))
        base.append(score_model(dups, transforms, baseline_covariance_orienter, rhos))
    rows.append(("mean", np.mean([r[1] for r in rows], axis=0)))
    rows.append(("baseline", np.mean(base, axis=0)))
    ckpt = Checkpoint(result.params, result.adam, result.epoch, cfg, result.lr_scale).to_bytes()
    return dict(result=result, rows=rows, table=format_table(rows, rhos), checkpoint=ckpt,
                elapsed=time.perf_counter() - start)


@pytest.fixture(scope="module")
def run_a():
    return desk_run()


@pytest.mark.slow
def test_criterion_5_desk_training(run_a):
    res = run_a["result"]
    best = min(h.val_loss for h in res.history)
    ratio = best / res.initial_val_loss
    mean = dict(run_a["rows"])["mean"]
    base = dict(run_a["rows"])["baseline"]
    print(run_a["table"])
    print("history:", [round(h.val_loss, 4) for h in res.history])
    ok_a = ratio <= 0.5
    ok_b = mean[1] >= 10 * BASELINE_COS45
    ok_t = run_a["elapsed"] <= 45 * 60
    detail = (f"(a) best val {best:.4f} / epoch-0 val {res.initial_val_loss:.4f} = {ratio:.3f} (<= 0.5) "
              f"{'ok' if ok_a else 'MISSED'}; (b) repeatability at cos45 {mean[1]:.4f} "
              f"(>= {10 * BASELINE_COS45:.4f}) {'ok' if ok_b else 'MISSED'}; (c) at rho=0.97 {mean[0]:.4f} "
              f"(reported; covariance baseline {base[0]:.4f}/{base[1]:.4f}); {run_a['elapsed'] / 60:.1f} min")
    report(5, ok_a and ok_b and ok_t, detail)


# ------------------------------------------------------------------ 6


def test_criterion_6_non_reproducibility_statement():
    # Published real-data benchmark numbers need the real scans, bandwidth 24
    # and a downstream point classifier, none of which ship here. What does
    # ship: the full-scale network is constructible and the desk default is
    # the documented reduction.
    full = NetworkParams(GridSpec(24, 4), (40, 20, 10, 1))
    desk = desk_config()
    ok = full.size > 0 and desk.bandwidth == 8 and desk.layer_channels == (8, 4, 2, 1)
    report(6, ok, "real-data benchmark tables are not reproducible at desk scale (datasets, B = 24 and the "
                  "downstream classifier are out of scope); criteria 1-5 are the property-based substitute")


# ------------------------------------------------------------------ 7


@pytest.mark.slow
def test_criterion_7_determinism(run_a):
    run_b = desk_run()
    same_ckpt = run_b["checkpoint"] == run_a["checkpoint"]
    same_table = run_b["table"] == run_a["table"]
    report(7, same_ckpt and same_table,
           f"checkpoints identical: {same_ckpt} ({len(run_a['checkpoint'])} bytes); "
           f"metric tables identical: {same_table}")


# ------------------------------------------------------------------ 8


def test_criterion_8_metric_suite():
    rng = np.random.default_rng(8)
    frames = random_rotation(rng, size=100)
    identical = repeatability(frames, frames, np.eye(3), RHO_PAPER)
    perturbed = repeatability(frames, frames @ rot_y(np.deg2rad(20.0)), np.eye(3), RHO_PAPER)
    trg = random_rotation(rng, size=100)
    r_ts = random_rotation(rng)
    q = random_rotation(rng)
    worst = 0.0
    for rho in (RHO_PAPER, RHO_DESK, 0.0):
        a = repeatability(frames, trg, r_ts, rho)
        b = repeatability(q @ frames, q @ trg, q @ r_ts @ q.T, rho)
        worst = max(worst, abs(a - b))
    ok = identical == 1.0 and perturbed == 0.0 and worst <= 1e-12 and random_baseline(RHO_PAPER) < 1e-2
    report(8, ok, f"identical frames {identical}; 20 deg perturbation {perturbed}; "
                  f"global rotation change {worst:.1e} (<= 1e-12)")
