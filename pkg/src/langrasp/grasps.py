"""Grasp proposal stand-in and box-grasp association machinery."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import nn
from .autodiff import Tensor
from .world import Scene, render_id_map

GRIPPER_MAX_OPEN = 0.14
FULL_QUALITY_WIDTH = 0.10    # narrow extents up to this grasp at full quality
MAP_THRESHOLD = 0.05         # m, box-center to grasp-position assignment
PRIOR_FLOOR = 1e-6


@dataclass(frozen=True)
class GraspPose:
    position: tuple[float, float, float]
    yaw: float
    width: float
    quality: float


@dataclass(frozen=True)
class MappingMatrix:
    matrix: np.ndarray          # N x K, entries in {0, 1}
    threshold: float

    @property
    def shape(self):
        return self.matrix.shape


def grasp_quality_for_extent(narrow: float) -> float:
    """Footprint-width vs gripper-width heuristic."""
    if narrow <= FULL_QUALITY_WIDTH:
        return 1.0
    slope = 0.7 / (GRIPPER_MAX_OPEN - FULL_QUALITY_WIDTH)
    return max(0.1, 1.0 - slope * (narrow - FULL_QUALITY_WIDTH))


def propose_grasps(scene: Scene, rng: np.random.Generator, k_max: int = 24,
                   per_object: int = 3, position_jitter: float = 0.01,
                   quality_jitter: float = 0.05) -> list:
    """Up to `per_object` candidates near each visible object's center,
    truncated to the `k_max` best by quality."""
    if k_max < 1:
        raise ValueError("k_max must be >= 1")
    if not scene.objects:
        return []
    idmap = render_id_map(scene)
    visible = set(np.unique(idmap))
    proposals = []
    for obj in scene.objects:
        if obj.oid not in visible:
            continue
        narrow = obj.spec.narrow_extent()
        base_q = grasp_quality_for_extent(narrow)
        if obj.spec.shape == "circle":
            base_yaw = rng.uniform(0.0, math.pi)
        else:
            base_yaw = (obj.angle + math.pi / 2.0) % math.pi
        for _ in range(per_object):
            dx, dy = rng.normal(scale=position_jitter, size=2) if position_jitter > 0 \
                else (0.0, 0.0)
            yaw = (base_yaw + rng.normal(scale=0.05)) % math.pi
            q = base_q + (rng.uniform(-quality_jitter, quality_jitter)
                          if quality_jitter > 0 else 0.0)
            proposals.append(GraspPose(
                position=(obj.x + dx, obj.y + dy, obj.spec.height),
                yaw=yaw,
                width=min(narrow + 0.01, GRIPPER_MAX_OPEN),
                quality=min(max(q, 0.05), 1.0)))
    order = np.argsort([-g.quality for g in proposals], kind="stable")
    return [proposals[i] for i in order[:k_max]]


def grasp_feature_inputs(grasps, bands: int = 6) -> np.ndarray:
    """Serialize poses to (posenc(position), yaw, width, quality) rows."""
    pos = np.array([g.position for g in grasps], dtype=np.float64)
    enc = nn.positional_encoding(pos, bands)
    tail = np.array([[g.yaw, g.width, g.quality] for g in grasps], dtype=np.float64)
    return np.concatenate([enc, tail], axis=1)


def grasp_feature_encode(grasps, mlp_layers, bands: int = 6) -> Tensor:
    if not grasps:
        raise ValueError("cannot encode an empty grasp set")
    return nn.mlp_forward(mlp_layers, Tensor(grasp_feature_inputs(grasps, bands)))


def box_grasp_mapping(boxes, grasps, threshold: float = MAP_THRESHOLD) -> MappingMatrix:
    """Binary N x K matrix: entry 1 iff the grasp lies within `threshold` of
    the box center in 3D."""
    if threshold <= 0:
        raise ValueError("threshold must be positive")
    n, k = len(boxes), len(grasps)
    m = np.zeros((n, k))
    if n and k:
        centers = np.array([b.center_3d for b in boxes])
        points = np.array([g.position for g in grasps])
        d = np.linalg.norm(centers[:, None, :] - points[None, :, :], axis=2)
        m = (d < threshold).astype(np.float64)
    return MappingMatrix(matrix=m, threshold=threshold)


def grounding_prior(box_probs: np.ndarray, mapping: MappingMatrix,
                    floor: float = PRIOR_FLOOR) -> np.ndarray:
    """Box probabilities pushed through the mapping, floored and renormalized."""
    box_probs = np.asarray(box_probs, dtype=np.float64)
    if mapping.matrix.shape[1] == 0:
        raise ValueError("no grasps to assign probability to")
    if box_probs.shape[0] != mapping.matrix.shape[0]:
        raise ValueError("box probability / mapping size mismatch")
    raw = box_probs @ mapping.matrix + floor
    return raw / raw.sum()
