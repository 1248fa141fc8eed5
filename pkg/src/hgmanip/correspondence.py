"""Grasp stage: find the demo's manipulation point on a new object and orient the grasp."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import HGMError
from .features import ObjectCategory
from .geometry import GraspPose, PointCloud, Rotation3, cosine_similarity_matrix, rotation_between

DEGENERATE_REFERENCE = 1e-6


@dataclass(frozen=True)
class DemoAnnotation:
    demo_cloud: PointCloud
    manipulation_index: int
    reference_indices: Sequence[int] = ()
    category: ObjectCategory = ObjectCategory.RIGID
    grasp_orientation: Rotation3 = field(default_factory=Rotation3.identity)
    fixed_orientation: Rotation3 | None = None

    def __post_init__(self):
        n = len(self.demo_cloud)
        object.__setattr__(self, "category", ObjectCategory(self.category))
        object.__setattr__(self, "reference_indices", tuple(int(i) for i in self.reference_indices))
        idx = (self.manipulation_index, *self.reference_indices)
        if any(i < 0 or i >= n for i in idx):
            raise HGMError("bad-annotation", f"index out of range for {n} points")
        if self.category is not ObjectCategory.DEFORMABLE and not self.reference_indices:
            raise HGMError("bad-annotation", "rigid annotations need at least one reference index")


@dataclass(frozen=True)
class CorrespondenceResult:
    target_index: int
    score: float
    runner_up_score: float


def match_point(query_feature: np.ndarray, target_features: np.ndarray) -> CorrespondenceResult:
    """Row of ``target_features`` most cosine-similar to ``query_feature``."""
    q = np.asarray(query_feature, dtype=np.float64).reshape(1, -1)
    T = np.asarray(target_features, dtype=np.float64)
    if T.ndim != 2 or T.shape[0] < 1 or T.shape[1] != q.shape[1]:
        raise HGMError("dim-mismatch", f"query {q.shape[1]} vs targets {T.shape}")
    sims = cosine_similarity_matrix(T, q)[:, 0]
    best = int(np.argmax(sims))
    if len(sims) == 1:
        runner = float(sims[0])
    else:
        runner = float(np.max(np.delete(sims, best)))
    return CorrespondenceResult(best, float(sims[best]), runner)


def _features(cloud: PointCloud) -> np.ndarray:
    if "features" not in cloud.payloads:
        raise HGMError("no-features", "cloud carries no 'features' payload")
    return np.asarray(cloud.payloads["features"], dtype=np.float64)


def locate_manipulation_point(demo: DemoAnnotation, target_cloud: PointCloud):
    demo_feats = _features(demo.demo_cloud)
    result = match_point(demo_feats[demo.manipulation_index], _features(target_cloud))
    return target_cloud.points[result.target_index].copy(), result


def plan_grasp(demo: DemoAnnotation, target_cloud: PointCloud) -> GraspPose:
    position, _ = locate_manipulation_point(demo, target_cloud)
    if demo.category is ObjectCategory.DEFORMABLE:
        orient = demo.fixed_orientation or Rotation3.identity()
        return GraspPose(position, orient, 0.0)

    demo_feats = _features(demo.demo_cloud)
    target_feats = _features(target_cloud)
    demo_pts = demo.demo_cloud.points
    manip = demo_pts[demo.manipulation_index]
    u = np.mean([demo_pts[i] for i in demo.reference_indices], axis=0) - manip
    matched = [match_point(demo_feats[i], target_feats).target_index for i in demo.reference_indices]
    v = np.mean(target_cloud.points[matched], axis=0) - position
    if np.linalg.norm(v) < DEGENERATE_REFERENCE:
        raise HGMError("degenerate-reference", "matched reference coincides with the manipulation point")
    if np.linalg.norm(u) < DEGENERATE_REFERENCE:
        raise HGMError("degenerate-reference", "demo reference coincides with the manipulation point")
    delta = rotation_between(u, v)
    return GraspPose(position, delta * demo.grasp_orientation, 0.0)
