import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from trailnav.geom import (FRAME_LIDAR, FRAME_MAP, FrameMismatchError,
                           PointCloud, RigidTransform, build_index,
                           concat_clouds, knn, knn_brute_force,
                           transform_cloud)


def test_pointcloud_shape_validation():
    with pytest.raises(ValueError):
        PointCloud(np.zeros((4, 2)))
    with pytest.raises(ValueError):
        PointCloud(np.zeros((4, 3)), frame="X")
    with pytest.raises(ValueError):
        PointCloud(np.zeros((4, 3)), normals=np.zeros((3, 3)))


def test_pointcloud_normals_must_be_unit():
    with pytest.raises(ValueError):
        PointCloud(np.zeros((2, 3)), normals=np.full((2, 3), 0.5))
    n = np.tile([0.0, 0.0, 1.0], (2, 1))
    cloud = PointCloud(np.zeros((2, 3)), normals=n)
    assert cloud.normals.shape == (2, 3)


def test_pointcloud_dyn_prob_bounds():
    with pytest.raises(ValueError):
        PointCloud(np.zeros((2, 3)), dyn_prob=np.array([0.5, 1.5]))


def test_select_carries_optional_fields():
    cloud = PointCloud(np.arange(12.0).reshape(4, 3),
                       timestamps=np.arange(4.0),
                       labels=np.array([1, 2, 3, 4]))
    sub = cloud.select(np.array([True, False, True, False]))
    assert len(sub) == 2
    assert np.array_equal(sub.timestamps, [0.0, 2.0])
    assert np.array_equal(sub.labels, [1, 3])
    assert sub.normals is None


def test_concat_clouds_frame_check():
    a = PointCloud(np.zeros((2, 3)), frame=FRAME_LIDAR)
    b = PointCloud(np.ones((2, 3)), frame=FRAME_MAP)
    with pytest.raises(FrameMismatchError):
        concat_clouds([a, b])
    c = concat_clouds([a, a.copy()])
    assert len(c) == 4


def test_rigid_transform_rejects_non_rotation():
    with pytest.raises(ValueError):
        RigidTransform(np.eye(3) * 2.0, np.zeros(3))
    with pytest.raises(ValueError):
        RigidTransform(np.diag([1.0, 1.0, -1.0]), np.zeros(3))


def test_from_yaw_and_yaw_property():
    t = RigidTransform.from_yaw(0.3, [1.0, 2.0, 3.0])
    assert t.yaw == pytest.approx(0.3, abs=1e-12)
    assert np.allclose(t.translation, [1.0, 2.0, 3.0])


def test_inverse_roundtrip():
    t = RigidTransform.from_yaw(1.1, [4.0, -2.0, 0.5], "L", "G")
    identity = t.inverse() @ t
    assert np.allclose(identity.rotation, np.eye(3), atol=1e-12)
    assert np.allclose(identity.translation, 0.0, atol=1e-12)
    assert identity.from_frame == "L" and identity.to_frame == "L"


def test_compose_frame_mismatch():
    a = RigidTransform.identity("L", "G")
    b = RigidTransform.identity("R", "R")
    with pytest.raises(FrameMismatchError):
        a @ b


def test_compose_applies_right_operand_first():
    shift = RigidTransform.from_yaw(0.0, [1.0, 0.0, 0.0], "L", "L")
    rot = RigidTransform.from_yaw(np.pi / 2, [0.0, 0.0, 0.0], "L", "G")
    p = np.array([[0.0, 0.0, 0.0]])
    # rot ∘ shift: shift to (1,0,0) then rotate to (0,1,0).
    assert np.allclose((rot @ shift).apply(p), [[0.0, 1.0, 0.0]], atol=1e-12)


def test_transform_cloud_frames_and_normals():
    cloud = PointCloud(np.array([[1.0, 0.0, 0.0]]), frame="L",
                       normals=np.array([[1.0, 0.0, 0.0]]))
    t = RigidTransform.from_yaw(np.pi / 2, [0.0, 0.0, 0.0], "L", "G")
    out = transform_cloud(cloud, t)
    assert out.frame == "G"
    assert np.allclose(out.points, [[0.0, 1.0, 0.0]], atol=1e-12)
    assert np.allclose(out.normals, [[0.0, 1.0, 0.0]], atol=1e-12)
    with pytest.raises(FrameMismatchError):
        transform_cloud(out, t)


@settings(deadline=None, max_examples=50)
@given(st.integers(0, 2 ** 31 - 1))
def test_compose_matches_matrix_product(seed):
    rng = np.random.default_rng(seed)
    a = RigidTransform.from_yaw(rng.uniform(-np.pi, np.pi),
                                rng.normal(size=3), "R", "G")
    b = RigidTransform.from_yaw(rng.uniform(-np.pi, np.pi),
                                rng.normal(size=3), "L", "R")
    p = rng.normal(size=(5, 3))
    assert np.allclose((a @ b).apply(p), a.apply(b.apply(p)), atol=1e-9)


def test_build_index_rejects_empty():
    with pytest.raises(ValueError):
        build_index(PointCloud(np.zeros((0, 3))))


def test_knn_exact_matches_brute_force():
    rng = np.random.default_rng(7)
    pts = rng.uniform(-5, 5, (400, 3))
    index = build_index(PointCloud(pts))
    for q in rng.uniform(-5, 5, (30, 3)):
        a = knn(index, q, n_m=7, d_max=2.0, eps=0.0)
        b = knn_brute_force(pts, q, n_m=7, d_max=2.0)
        assert np.array_equal(a.neighbor_indices, b.neighbor_indices)
        assert np.allclose(a.distances, b.distances, atol=1e-12)


def test_knn_tie_break_prefers_lower_index():
    # Four points at identical distance 1 from the origin.
    pts = np.array([[1.0, 0, 0], [0, 1.0, 0], [-1.0, 0, 0], [0, -1.0, 0],
                    [5.0, 5.0, 5.0]])
    index = build_index(PointCloud(pts))
    got = knn(index, [0.0, 0.0, 0.0], n_m=2, d_max=2.0)
    assert np.array_equal(got.neighbor_indices, [0, 1])


def test_knn_respects_d_max():
    pts = np.array([[0.5, 0, 0], [3.0, 0, 0]])
    index = build_index(PointCloud(pts))
    got = knn(index, [0.0, 0.0, 0.0], n_m=5, d_max=1.0)
    assert np.array_equal(got.neighbor_indices, [0])


@settings(deadline=None, max_examples=30)
@given(st.integers(0, 2 ** 31 - 1), st.floats(0.0, 2.0))
def test_knn_approximate_within_factor(seed, eps):
    """(1+eps)-approximate: k-th reported distance <= (1+eps) * true k-th."""
    rng = np.random.default_rng(seed)
    pts = rng.uniform(-3, 3, (200, 3))
    index = build_index(PointCloud(pts))
    q = rng.uniform(-3, 3, 3)
    approx = knn(index, q, n_m=5, d_max=4.0, eps=eps)
    exact = knn_brute_force(pts, q, n_m=5, d_max=4.0)
    for i in range(min(len(approx.distances), len(exact.distances))):
        assert approx.distances[i] <= (1.0 + eps) * exact.distances[i] + 1e-12
