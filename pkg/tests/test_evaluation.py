import numpy as np
import pytest

from orientkit.evaluation import (
    RHO_DESK,
    RHO_PAPER,
    DegenerateGeometry,
    EmptyCorrespondences,
    RigidTransform,
    baseline_covariance_orienter,
    build_correspondences,
    frame_error,
    lrf_from_rotation,
    make_synthetic_benchmark,
    pair_transform,
    random_baseline,
    repeatability,
    rotated_duplicates,
    score_model,
    subsample,
)
from orientkit.rotations import euler_to_matrix, random_rotation, rot_y, rot_z
from orientkit.signals import PointCloud
from orientkit.training import OcclusionConfig

# 10^6 Haar samples, seed 0 (see haar_quadrature below for the independent check)
BASELINE_097 = 0.001018
BASELINE_COS45 = 0.032233


def haar_quadrature(rho, n=240):
    """Fraction of Haar rotations with R00 >= rho and R22 >= rho, by Euler-angle midpoint quadrature."""
    a = (np.arange(n) + 0.5) * 2 * np.pi / n
    b = (np.arange(n) + 0.5) * np.pi / n
    g = a
    cb = np.cos(b)[None, :, None]
    r00 = np.cos(a)[:, None, None] * cb * np.cos(g)[None, None, :] \
        - np.sin(a)[:, None, None] * np.sin(g)[None, None, :]
    ok = (r00 >= rho) & (cb >= rho)
    w = np.sin(b)[None, :, None] * np.ones((n, 1, n))
    return float((ok * w).sum() / w.sum())


def test_lrf_from_rotation():
    r = random_rotation(np.random.default_rng(0))
    x, y, z = lrf_from_rotation(r)
    assert np.array_equal(np.stack([x, y, z], axis=1), r)
    assert np.allclose(np.cross(z, x), y)


def test_repeatability_examples():
    rng = np.random.default_rng(1)
    frames = random_rotation(rng, size=30)
    assert repeatability(frames, frames, np.eye(3), RHO_PAPER) == 1.0
    off = frames @ rot_y(np.deg2rad(20.0))  # rotate each frame about its own y-axis
    assert repeatability(frames, off, np.eye(3), RHO_PAPER) == 0.0
    assert repeatability(frames, random_rotation(rng, size=30), np.eye(3), -1.0) == 1.0


def test_repeatability_uses_transform():
    rng = np.random.default_rng(2)
    src = random_rotation(rng, size=10)
    r_ts = random_rotation(rng)
    trg = r_ts.T @ src  # target frames expressed in target coordinates
    g = RigidTransform(r_ts, rng.standard_normal(3))
    assert repeatability(src, trg, g) == 1.0
    assert repeatability(src, trg, np.eye(3)) < 1.0


def test_repeatability_with_correspondences():
    rng = np.random.default_rng(3)
    src = random_rotation(rng, size=5)
    trg = src[::-1].copy()
    corr = np.array([[0, 4], [1, 3], [2, 0]])
    assert repeatability(src, trg, np.eye(3), corr=corr) == pytest.approx(2 / 3)
    with pytest.raises(EmptyCorrespondences):
        repeatability(src, trg, np.eye(3), corr=np.zeros((0, 2)))


def test_repeatability_symmetric_under_swap():
    rng = np.random.default_rng(4)
    src = random_rotation(rng, size=200)
    r_ts = random_rotation(rng)
    noisy = r_ts.T @ src @ np.stack([rot_z(t) for t in rng.uniform(-0.4, 0.4, 200)])
    for rho in (RHO_PAPER, RHO_DESK):
        assert repeatability(src, noisy, r_ts, rho) == repeatability(noisy, src, r_ts.T, rho)


def test_repeatability_global_rotation_invariance():
    rng = np.random.default_rng(6)
    src = random_rotation(rng, size=300)
    trg = random_rotation(rng, size=300)
    r_ts = random_rotation(rng)
    q = random_rotation(rng)
    for rho in (-0.5, 0.0, 0.5):
        base = repeatability(src, trg, r_ts, rho)
        moved = repeatability(q @ src, q @ trg, q @ r_ts @ q.T, rho)
        assert abs(moved - base) <= 1e-12


def test_random_baseline_frozen_values():
    assert random_baseline(RHO_PAPER) == pytest.approx(BASELINE_097, abs=5e-7)
    assert random_baseline(RHO_DESK) == pytest.approx(BASELINE_COS45, abs=5e-7)
    assert BASELINE_097 < 1e-2


def test_random_baseline_matches_quadrature():
    # binomial sd of a 10^6-sample mean
    for rho, mc in ((RHO_PAPER, BASELINE_097), (RHO_DESK, BASELINE_COS45)):
        q = haar_quadrature(rho)
        assert abs(mc - q) <= 4 * np.sqrt(q * (1 - q) / 1e6) + 1e-5


# ------------------------------------------------------------ correspondences


def test_rigid_transform_algebra():
    rng = np.random.default_rng(7)
    a = RigidTransform(random_rotation(rng), rng.standard_normal(3))
    b = RigidTransform(random_rotation(rng), rng.standard_normal(3))
    pts = rng.standard_normal((10, 3))
    np.testing.assert_allclose(a.inverse().apply(a.apply(pts)), pts, atol=1e-12)
    np.testing.assert_allclose(a.compose(b).apply(pts), a.apply(b.apply(pts)), atol=1e-12)
    back = RigidTransform.from_row(a.to_row())
    assert np.array_equal(back.rotation, a.rotation) and np.array_equal(back.translation, a.translation)
    with pytest.raises(ValueError):
        RigidTransform(np.eye(2), np.zeros(3))


def test_correspondences_exact_partners():
    rng = np.random.default_rng(8)
    pts = rng.uniform(-1, 1, (500, 3))
    g = RigidTransform(random_rotation(rng), rng.standard_normal(3))
    src = PointCloud(pts)
    trg = PointCloud(g.inverse().apply(pts))  # g maps target coordinates into the source frame
    corr = build_correspondences(src, trg, g, 0.2, overlap_tol=0.02)
    assert len(corr) == len(subsample(pts, 0.2))
    np.testing.assert_allclose(g.apply(trg.points[corr[:, 1]]), pts[corr[:, 0]], atol=1e-12)


def test_correspondences_disjoint():
    rng = np.random.default_rng(9)
    src = PointCloud(rng.uniform(0, 1, (200, 3)))
    trg = PointCloud(rng.uniform(10, 11, (200, 3)))
    assert build_correspondences(src, trg, RigidTransform.identity(), 0.1).shape == (0, 2)


def test_correspondences_monotone_in_spacing():
    rng = np.random.default_rng(10)
    pts = rng.uniform(-1, 1, (2000, 3))
    src, trg = PointCloud(pts), PointCloud(pts + rng.normal(0, 0.005, pts.shape))
    counts = [len(build_correspondences(src, trg, RigidTransform.identity(), s, 0.05))
              for s in (0.4, 0.2, 0.1)]
    assert counts[0] <= counts[1] <= counts[2]


def test_subsample_spacing():
    pts = np.random.default_rng(11).uniform(-1, 1, (1000, 3))
    keep = subsample(pts, 0.3)
    d = np.linalg.norm(pts[keep][:, None] - pts[keep][None], axis=-1)
    assert d[np.triu_indices(len(keep), 1)].min() > 0.3


# ------------------------------------------------------------ synthetic data


def test_synthetic_benchmark_deterministic():
    a = make_synthetic_benchmark(2, 2, np.random.default_rng(0))
    b = make_synthetic_benchmark(2, 2, np.random.default_rng(0))
    for ma, mb in zip(a, b):
        assert np.array_equal(ma.points, mb.points)
        for va, vb in zip(ma.views, mb.views):
            assert np.array_equal(va.cloud.points, vb.cloud.points)
            assert np.array_equal(va.transform.to_row(), vb.transform.to_row())


def test_synthetic_views_realign_within_jitter():
    models = make_synthetic_benchmark(3, 3, np.random.default_rng(1))
    for m in models:
        sigma = 0.005 * m.extent
        for v in m.views:
            back = v.transform.inverse().apply(v.cloud.points)
            rms = np.sqrt(np.mean(np.sum((back - m.points[v.kept]) ** 2, axis=1)))
            assert rms <= 3 * sigma
            assert 1000 <= len(v.cloud) <= 2000


def test_synthetic_models_are_asymmetric():
    for m in make_synthetic_benchmark(5, 1, np.random.default_rng(2)):
        assert 1900 <= len(m.points) <= 2100
        lam = np.linalg.eigvalsh(np.cov(m.points.T))
        for a, b in ((0, 1), (1, 2), (0, 2)):
            assert abs(lam[a] - lam[b]) >= 0.05 * max(lam[a], lam[b])


def test_occlusion_free_views_keep_everything():
    m = make_synthetic_benchmark(1, 1, np.random.default_rng(3), OcclusionConfig(apply_probability=0.0))[0]
    assert len(m.views[0].cloud) == len(m.points)


# ------------------------------------------------------------------ baseline


def test_covariance_baseline_line_is_degenerate():
    t = np.linspace(-1, 1, 50)
    with pytest.raises(DegenerateGeometry):
        baseline_covariance_orienter(np.stack([t, 2 * t, -t], axis=1))
    with pytest.raises(DegenerateGeometry):
        baseline_covariance_orienter(np.zeros((2, 3)))


def test_covariance_baseline_axis_aligned():
    pts = np.random.default_rng(12).standard_normal((10**4, 3)) * [3.0, 2.0, 1.0]
    r = baseline_covariance_orienter(pts)
    assert np.degrees(np.arccos(abs(r[0, 0]))) <= 5.0
    assert np.linalg.det(r) == pytest.approx(1.0)


def test_covariance_baseline_equivariant_up_to_sign():
    rng = np.random.default_rng(13)
    pts = rng.standard_normal((10**4, 3)) * [3.0, 2.0, 1.0]
    q = random_rotation(rng)
    a = baseline_covariance_orienter(pts)
    b = baseline_covariance_orienter(pts @ q.T)
    for k in range(3):
        cos = abs(np.dot(q @ a[:, k], b[:, k]))
        assert np.degrees(np.arccos(min(cos, 1.0))) <= 5.0


def test_covariance_baseline_signed_exactly_on_skewed_cloud():
    # with a skewed density the majority sign is stable, so the frame rotates with the cloud
    rng = np.random.default_rng(14)
    pts = rng.exponential(1.0, (10**4, 3)) * [3.0, 2.0, 1.0]
    q = random_rotation(rng)
    a = baseline_covariance_orienter(pts)
    b = baseline_covariance_orienter(pts @ q.T)
    assert frame_error(q @ a, b, np.eye(3)) < 1e-8


# ------------------------------------------------------------------- scoring


def test_score_model_perfect_orienter():
    rng = np.random.default_rng(15)
    m = make_synthetic_benchmark(1, 3, rng)[0]
    clouds = [v.cloud for v in m.views]
    transforms = [v.transform for v in m.views]
    lookup = {id(v.cloud): v.transform.rotation for v in m.views}
    # the ground-truth model-to-view rotation is an ideal equivariant frame
    score = score_model(clouds, transforms, lambda c: lookup[id(c)], [RHO_PAPER, RHO_DESK])
    np.testing.assert_allclose(score, [1.0, 1.0])


def test_score_model_failing_orienter_counts_as_miss():
    clouds, transforms = rotated_duplicates(PointCloud(np.random.default_rng(16).standard_normal((50, 3))),
                                            3, np.random.default_rng(0))

    def broken(c):
        raise DegenerateGeometry("nope")

    assert np.array_equal(score_model(clouds, transforms, broken, [0.5]), [0.0])


def test_score_model_patches():
    rng = np.random.default_rng(17)
    base = PointCloud(rng.uniform(-1, 1, (800, 3)))
    clouds, transforms = rotated_duplicates(base, 2, rng)
    score = score_model(clouds, transforms, baseline_covariance_orienter, [RHO_DESK],
                        spacing=0.5, radius=0.6)
    assert 0.0 <= score[0] <= 1.0 and score[0] > 0.5


def test_rotated_duplicates_and_pair_transform():
    rng = np.random.default_rng(18)
    c = PointCloud(rng.standard_normal((40, 3)) + 5.0)
    clouds, transforms = rotated_duplicates(c, 3, rng)
    assert np.array_equal(clouds[0].points, c.points)
    for cl in clouds:
        np.testing.assert_allclose(cl.center, c.center, atol=1e-12)
    g = pair_transform(transforms[1], transforms[2])
    np.testing.assert_allclose(g.apply(clouds[2].points), clouds[1].points, atol=1e-12)


def test_haar_quadrature_oracle_sanity():
    assert haar_quadrature(-1.0) == pytest.approx(1.0)
    r = euler_to_matrix(0.3, 0.0, 0.2)
    assert r[2, 2] == pytest.approx(1.0)
    assert haar_quadrature(0.999999) < 1e-6
