import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from hgmanip.correspondence import DemoAnnotation, locate_manipulation_point, match_point, plan_grasp
from hgmanip.errors import HGMError
from hgmanip.features import ObjectCategory, SyntheticDeformableProvider, SyntheticRigidProvider
from hgmanip.geometry import PointCloud, Rotation3, apply_transform, cosine_similarity
from hgmanip.simenv import make_mug, make_sheet


def featurize(cloud, provider):
    return cloud.with_payload("features", provider.compute(cloud))


def mug_annotation(noise=0.0, orient=None):
    obj = make_mug(0.04, 0.09, 0.03, (0, 0, 0), 0.0)
    cloud = featurize(obj.cloud, SyntheticRigidProvider(noise_sigma=noise))
    return obj, DemoAnnotation(cloud, obj.manip_index, obj.reference_indices, ObjectCategory.RIGID,
                               orient or Rotation3.identity())


# ------------------------------------------------------------ match_point

def test_match_point_exact_row():
    F = np.zeros((10, 10))
    F[np.arange(10), np.arange(10)] = 1.0
    r = match_point(F[7], F)
    assert (r.target_index, r.score) == (7, pytest.approx(1.0))
    assert r.runner_up_score == pytest.approx(0.0)


def test_match_point_ties_and_single_row():
    F = np.tile([1.0, 2.0, 3.0], (5, 1))
    assert match_point(F[0], F).target_index == 0
    one = match_point([1.0, 0.0], np.array([[0.5, 0.5]]))
    assert one.score == one.runner_up_score


def test_match_point_brute_force():
    rng = np.random.default_rng(0)
    for _ in range(20):
        T = rng.normal(size=(20, 16))
        q = rng.normal(size=16)
        sims = [cosine_similarity(q, row) for row in T]
        r = match_point(q, T)
        assert r.target_index == int(np.argmax(sims))
        assert r.score >= r.runner_up_score
        assert r.runner_up_score == pytest.approx(sorted(sims)[-2])


def test_match_point_dim_mismatch():
    with pytest.raises(HGMError):
        match_point(np.ones(3), np.ones((4, 5)))


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**31 - 1), st.lists(st.floats(1e-3, 1e3), min_size=15, max_size=15))
def test_argmax_invariant_to_positive_row_scaling(seed, scales):
    rng = np.random.default_rng(seed)
    T = rng.normal(size=(15, 8))
    q = rng.normal(size=8)
    assert match_point(q, T).target_index == match_point(q, T * np.array(scales)[:, None]).target_index


# ------------------------------------------------------------------ locate

def test_locate_self_match():
    obj, ann = mug_annotation()
    p, r = locate_manipulation_point(ann, ann.demo_cloud)
    assert r.target_index == obj.manip_index
    assert np.array_equal(p, obj.cloud.points[obj.manip_index])


def test_locate_rigid_transform_oracle():
    obj, ann = mug_annotation(noise=0.01)
    prov = SyntheticRigidProvider(noise_sigma=0.01)
    rng = np.random.default_rng(1)
    for _ in range(20):
        R, t = Rotation3.from_array(rng.normal(size=4)), rng.normal(size=3)
        target = featurize(apply_transform(obj.cloud, R, t), prov)
        p, _ = locate_manipulation_point(ann, target)
        truth = R.apply(obj.cloud.points[obj.manip_index]) + t
        assert np.linalg.norm(p - truth) < 0.01


def test_locate_deformed_sheet_intrinsic_oracle():
    prov = SyntheticDeformableProvider(noise_sigma=0.01)
    demo = make_sheet(0.17, 0.15, (0, 0, 0), 0.0)
    ann = DemoAnnotation(featurize(demo.cloud, prov), demo.manip_index, (), ObjectCategory.DEFORMABLE)
    target = make_sheet(0.2, 0.18, (0.1, 0.1, 0), 0.4)
    rng = np.random.default_rng(2)
    bent = target.cloud.with_points(target.cloud.points + rng.normal(scale=0.03, size=target.cloud.points.shape))
    _, r = locate_manipulation_point(ann, featurize(bent, prov))
    uv = target.cloud.payloads["uv"]
    assert np.allclose(uv[r.target_index], demo.cloud.payloads["uv"][demo.manip_index], atol=0.1)


def test_locate_requires_features():
    _, ann = mug_annotation()
    with pytest.raises(HGMError) as e:
        locate_manipulation_point(ann, PointCloud(np.zeros((3, 3))))
    assert e.value.code == "no-features"


# -------------------------------------------------------------- plan_grasp

def test_plan_grasp_identity_target():
    orient = Rotation3.from_axis_angle([1, 1, 0], 0.4)
    _, ann = mug_annotation(orient=orient)
    pose = plan_grasp(ann, ann.demo_cloud)
    assert pose.orientation.angle_to(orient) < 1e-9
    assert pose.gripper == 0.0


def test_plan_grasp_quarter_turn_about_z():
    orient = Rotation3.from_axis_angle([0, 1, 0], 0.3)
    obj, ann = mug_annotation(orient=orient)
    Rz = Rotation3.from_axis_angle([0, 0, 1], math.pi / 2)
    target = featurize(apply_transform(obj.cloud, Rz, [0.1, -0.2, 0.0]), SyntheticRigidProvider(noise_sigma=0.0))
    pose = plan_grasp(ann, target)
    assert math.degrees(pose.orientation.angle_to(Rz * orient)) < 2.0


def test_plan_grasp_deformable_fixed_orientation():
    prov = SyntheticDeformableProvider(noise_sigma=0.0)
    demo = make_sheet(0.17, 0.15, (0, 0, 0), 0.0)
    ann = DemoAnnotation(featurize(demo.cloud, prov), demo.manip_index, (), ObjectCategory.DEFORMABLE,
                         fixed_orientation=Rotation3.identity())
    bent = demo.cloud.with_points(demo.cloud.points + np.random.default_rng(3).normal(scale=0.02, size=(len(demo.cloud), 3)))
    pose = plan_grasp(ann, featurize(bent, prov))
    assert np.allclose(pose.orientation.as_array(), [1, 0, 0, 0])


def test_plan_grasp_equivariance():
    obj, ann = mug_annotation()
    prov = SyntheticRigidProvider(noise_sigma=0.0)
    base = plan_grasp(ann, featurize(obj.cloud, prov))
    rng = np.random.default_rng(4)
    for _ in range(20):
        R, t = Rotation3.from_array(rng.normal(size=4)), rng.normal(size=3)
        pose = plan_grasp(ann, featurize(apply_transform(obj.cloud, R, t), prov))
        assert np.allclose(pose.position, R.apply(base.position) + t, atol=1e-6)
        assert np.linalg.norm(pose.orientation.as_array()) == pytest.approx(1.0, abs=1e-9)


def test_plan_grasp_degenerate_reference():
    feats = np.eye(4)
    feats[2] = feats[0]  # the reference matches the manipulation point's location
    pts = np.array([[0.0, 0, 0], [1, 0, 0], [0, 1, 0], [0, 0, 1]])
    demo = PointCloud(pts, {"features": np.eye(4)})
    ann = DemoAnnotation(demo, 0, (1,))
    target = PointCloud(np.array([[0.0, 0, 0], [0.0, 0, 0], [1, 1, 1], [2, 2, 2]]), {"features": np.eye(4)})
    with pytest.raises(HGMError) as e:
        plan_grasp(ann, target)
    assert e.value.code == "degenerate-reference"


def test_annotation_validation():
    cloud = PointCloud(np.zeros((3, 3)))
    with pytest.raises(HGMError):
        DemoAnnotation(cloud, 5, (0,))
    with pytest.raises(HGMError):
        DemoAnnotation(cloud, 0, ())
    DemoAnnotation(cloud, 0, (), ObjectCategory.DEFORMABLE)
