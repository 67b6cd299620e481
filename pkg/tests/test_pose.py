import math

import numpy as np
import pytest

from segloc.errors import DegenerateGeometryError
from segloc.matching import MatchCandidate
from segloc.pose import (
    SE3,
    PoseEstimate,
    ProsacParams,
    geometric_consistency_filter,
    kabsch,
    prosac,
)


def random_se3(rng, max_angle=math.pi, max_shift=10.0):
    axis = rng.normal(size=3)
    axis /= np.linalg.norm(axis)
    angle = rng.uniform(-max_angle, max_angle)
    k = np.array(
        [[0, -axis[2], axis[1]], [axis[2], 0, -axis[0]], [-axis[1], axis[0], 0]]
    )
    rot = np.eye(3) + math.sin(angle) * k + (1 - math.cos(angle)) * (k @ k)
    return SE3(rot, rng.uniform(-max_shift, max_shift, size=3))


def matches_from_transform(rng, n, transform, noise=0.0, spread=20.0):
    q = rng.uniform(-spread, spread, size=(n, 3))
    m = transform.apply(q) + rng.normal(scale=noise, size=(n, 3))
    return [
        MatchCandidate(
            query_id=i, map_id=i, distance=0.1, joint_prob=0.9,
            query_centroid=q[i], map_centroid=m[i],
        )
        for i in range(n)
    ]


# ----------------------------------------------------------------------- SE3

def test_se3_validates_rotation():
    with pytest.raises(ValueError):
        SE3(np.eye(3) * 2.0, np.zeros(3))
    reflect = np.diag([1.0, 1.0, -1.0])
    with pytest.raises(ValueError):
        SE3(reflect, np.zeros(3))


def test_se3_compose_inverse():
    rng = np.random.default_rng(0)
    a, b = random_se3(rng), random_se3(rng)
    pts = rng.normal(size=(10, 3))
    np.testing.assert_allclose(
        a.compose(b).apply(pts), a.apply(b.apply(pts)), atol=1e-12
    )
    np.testing.assert_allclose(a.inverse().apply(a.apply(pts)), pts, atol=1e-12)


def test_se3_rotation_angle():
    t = SE3.from_yaw(math.radians(30))
    assert t.rotation_angle_deg() == pytest.approx(30.0, abs=1e-9)


# -------------------------------------------------------------------- kabsch

def test_kabsch_identity():
    rng = np.random.default_rng(1)
    pts = rng.normal(size=(8, 3))
    t = kabsch(pts, pts)
    np.testing.assert_allclose(t.rotation, np.eye(3), atol=1e-12)
    np.testing.assert_allclose(t.translation, 0, atol=1e-12)


def test_kabsch_recovers_planted_transform():
    rng = np.random.default_rng(2)
    yaw90 = SE3.from_yaw(math.pi / 2, (1.0, 2.0, 3.0))
    src = rng.normal(size=(3, 3)) * 5
    t = kabsch(src, yaw90.apply(src))
    np.testing.assert_allclose(t.rotation, yaw90.rotation, atol=1e-9)
    np.testing.assert_allclose(t.translation, yaw90.translation, atol=1e-9)


def test_kabsch_recovers_random_transforms():
    rng = np.random.default_rng(3)
    for _ in range(20):
        planted = random_se3(rng)
        src = rng.normal(size=(6, 3)) * 3
        t = kabsch(src, planted.apply(src))
        np.testing.assert_allclose(t.rotation, planted.rotation, atol=1e-9)
        np.testing.assert_allclose(t.translation, planted.translation, atol=1e-9)


def test_kabsch_collinear_degenerate():
    src = np.array([[0.0, 0, 0], [1.0, 0, 0], [2.0, 0, 0]])
    with pytest.raises(DegenerateGeometryError):
        kabsch(src, src + 1.0)


def test_kabsch_handles_reflection_noise():
    # near-planar noisy correspondences must still produce det +1
    rng = np.random.default_rng(4)
    src = rng.normal(size=(10, 3)) * [5.0, 5.0, 0.01]
    planted = random_se3(rng)
    dst = planted.apply(src) + rng.normal(scale=0.3, size=src.shape)
    t = kabsch(src, dst)
    assert np.linalg.det(t.rotation) == pytest.approx(1.0, abs=1e-9)


def test_kabsch_residual_optimality():
    rng = np.random.default_rng(5)
    src = rng.normal(size=(12, 3)) * 4
    dst = random_se3(rng).apply(src) + rng.normal(scale=0.2, size=src.shape)
    t = kabsch(src, dst)
    best = np.sum((t.apply(src) - dst) ** 2)
    for _ in range(50):
        delta = random_se3(rng, max_angle=0.02, max_shift=0.02)
        perturbed = delta.compose(t)
        assert np.sum((perturbed.apply(src) - dst) ** 2) >= best - 1e-9


# --------------------------------------------------- geometric consistency

def test_consistency_all_rigid_retained():
    rng = np.random.default_rng(6)
    matches = matches_from_transform(rng, 10, random_se3(rng))
    kept = geometric_consistency_filter(matches, epsilon=0.4)
    assert kept == matches


def test_consistency_removes_planted_outlier():
    rng = np.random.default_rng(7)
    matches = matches_from_transform(rng, 10, random_se3(rng))
    bad = matches[4]
    bad.map_centroid = bad.map_centroid + np.array([5.0, 0.0, 0.0])
    kept = geometric_consistency_filter(matches, epsilon=0.4)
    assert bad not in kept
    assert len(kept) == 9
    # pairwise-distance oracle: survivors preserve all mutual distances
    for a in kept:
        for b in kept:
            dq = np.linalg.norm(a.query_centroid - b.query_centroid)
            dm = np.linalg.norm(a.map_centroid - b.map_centroid)
            assert abs(dq - dm) <= 0.4


def test_consistency_empty_input():
    assert geometric_consistency_filter([]) == []


def test_consistency_preserves_rank_order():
    rng = np.random.default_rng(8)
    matches = matches_from_transform(rng, 8, random_se3(rng))
    kept = geometric_consistency_filter(matches, epsilon=0.4)
    positions = [matches.index(c) for c in kept]
    assert positions == sorted(positions)


# -------------------------------------------------------------------- prosac

def test_prosac_noiseless_consensus():
    rng = np.random.default_rng(9)
    planted = random_se3(rng)
    matches = matches_from_transform(rng, 20, planted)
    est = prosac(matches, ProsacParams(), seed=0)
    assert est is not None
    assert len(est.inlier_matches) == 20
    np.testing.assert_allclose(est.transform.rotation, planted.rotation, atol=1e-9)
    np.testing.assert_allclose(est.transform.translation, planted.translation, atol=1e-9)
    assert est.mean_residual < 1e-9


def test_prosac_estimate_satisfies_own_invariants():
    rng = np.random.default_rng(10)
    planted = random_se3(rng)
    matches = matches_from_transform(rng, 30, planted, noise=0.05)
    params = ProsacParams()
    est = prosac(matches, params, seed=1)
    assert est is not None
    # revalidate independently
    r = est.transform.rotation
    np.testing.assert_allclose(r @ r.T, np.eye(3), atol=1e-9)
    assert np.linalg.det(r) == pytest.approx(1.0, abs=1e-9)
    assert len(est.inlier_matches) >= params.min_inliers
    for c in est.inlier_matches:
        res = np.linalg.norm(est.transform.apply(c.query_centroid[None])[0] - c.map_centroid)
        assert res <= params.inlier_threshold


def test_prosac_random_matches_return_none():
    rng = np.random.default_rng(11)
    n = 12
    matches = [
        MatchCandidate(
            query_id=i, map_id=i, distance=0.5, joint_prob=0.5,
            query_centroid=rng.uniform(-50, 50, 3), map_centroid=rng.uniform(-50, 50, 3),
        )
        for i in range(n)
    ]
    params = ProsacParams(inlier_threshold=0.3)
    est = prosac(matches, params, seed=2)
    # exhaustive oracle: no 3-subset yields >= min_inliers at the threshold
    from itertools import combinations

    q = np.stack([c.query_centroid for c in matches])
    p = np.stack([c.map_centroid for c in matches])
    best = 0
    for tri in combinations(range(n), 3):
        try:
            t = kabsch(q[list(tri)], p[list(tri)])
        except DegenerateGeometryError:
            continue
        res = np.linalg.norm(t.apply(q) - p, axis=1)
        best = max(best, int(np.sum(res <= params.inlier_threshold)))
    assert best < params.min_inliers
    assert est is None


def test_prosac_with_outliers_and_ranking():
    rng = np.random.default_rng(12)
    planted = random_se3(rng)
    good = matches_from_transform(rng, 12, planted, noise=0.02)
    bad = [
        MatchCandidate(
            query_id=100 + i, map_id=100 + i, distance=0.5, joint_prob=0.2,
            query_centroid=rng.uniform(-20, 20, 3), map_centroid=rng.uniform(-20, 20, 3),
        )
        for i in range(12)
    ]
    est = prosac(good + bad, ProsacParams(), seed=3)
    assert est is not None
    assert est.transform.rotation_angle_deg(planted) < 1.0
    assert est.transform.translation_distance(planted) < 0.1


def test_prosac_rank_sensitivity_beats_uniform():
    wins = 0
    trials = 40
    for seed in range(trials):
        rng = np.random.default_rng(1000 + seed)
        planted = random_se3(rng)
        good = matches_from_transform(rng, 10, planted, noise=0.02)
        bad = [
            MatchCandidate(
                query_id=50 + i, map_id=50 + i, distance=0.5, joint_prob=0.2,
                query_centroid=rng.uniform(-20, 20, 3),
                map_centroid=rng.uniform(-20, 20, 3),
            )
            for i in range(10)
        ]
        matches = good + bad  # rank correlates perfectly with inlierness
        a = prosac(matches, ProsacParams(), seed=seed)
        b = prosac(matches, ProsacParams(progressive=False), seed=seed)
        ia = a.first_success_index if a else np.inf
        ib = b.first_success_index if b else np.inf
        wins += ia <= ib
    assert wins > trials / 2


def test_prosac_uniform_mode_finds_easy_instances():
    rng = np.random.default_rng(13)
    planted = random_se3(rng)
    matches = matches_from_transform(rng, 15, planted)
    est = prosac(matches, ProsacParams(progressive=False), seed=4)
    assert est is not None
    assert est.transform.rotation_angle_deg(planted) < 1e-5


def test_prosac_too_few_matches_returns_none():
    rng = np.random.default_rng(14)
    matches = matches_from_transform(rng, 3, random_se3(rng))
    assert prosac(matches, ProsacParams(), seed=0) is None


def test_params_validated():
    with pytest.raises(ValueError):
        ProsacParams(min_inliers=3)
    with pytest.raises(ValueError):
        ProsacParams(confidence=1.0)
    with pytest.raises(ValueError):
        ProsacParams(sample_size=4)


def test_pose_estimate_json_schema():
    est = PoseEstimate(
        transform=SE3.identity(),
        inlier_matches=[MatchCandidate(1, 2, 0.1, 0.9)],
        mean_residual=0.05,
        hypotheses_evaluated=7,
    )
    d = est.to_json_dict()
    assert d["localized"] is True
    assert d["num_inliers"] == 1
    assert d["inliers"] == [[1, 2]]
    assert len(d["rotation"]) == 3 and len(d["rotation"][0]) == 3
