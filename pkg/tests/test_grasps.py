"""Grasp proposals, feature serialization, mapping matrix, grounding prior."""

import numpy as np
import pytest

from langrasp import nn
from langrasp.grasps import (GraspPose, box_grasp_mapping, grasp_feature_encode,
                             grasp_feature_inputs, grounding_prior,
                             propose_grasps)
from langrasp.world import (ObjectBox, Scene, Workspace, detect_boxes,
                            sample_instruction, sample_scene)


def box_at(x, y, z=0.05):
    return ObjectBox(rect=(0, 0, 20, 20), center_3d=(x, y, z),
                     descriptor={"banana": 1.0}, owner_id=0, dominant_id=0)


def grasp_pose(x, y, z=0.05, quality=0.9, yaw=0.3, width=0.08):
    return GraspPose(position=(x, y, z), yaw=yaw, width=width, quality=quality)


# propose_grasps -----------------------------------------------------------------

def test_empty_scene_yields_no_grasps():
    scene = Scene(workspace=Workspace(), objects=[], target_ids=[])
    assert propose_grasps(scene, np.random.default_rng(0)) == []


def test_isolated_object_high_quality(setup64):
    from langrasp.world import Instruction
    rng = np.random.default_rng(1)
    ins = Instruction(template_text="Give me the {keyword}", keyword="apple",
                      keyword_type="label", template_id=0)
    scene = sample_scene(rng, 1, setup64.train_specs, setup64.workspace, ins)
    grasps = propose_grasps(scene, rng)
    assert len(grasps) >= 1
    assert max(g.quality for g in grasps) >= 0.8


def test_proposals_are_seeded(setup64):
    rng = np.random.default_rng(2)
    ins = sample_instruction(rng, setup64.table)
    scene = sample_scene(rng, 5, setup64.train_specs, setup64.workspace, ins)
    a = propose_grasps(scene, np.random.default_rng(7))
    b = propose_grasps(scene, np.random.default_rng(7))
    assert a == b


def test_proposals_truncate_to_k_max_by_quality(setup64):
    rng = np.random.default_rng(3)
    ins = sample_instruction(rng, setup64.table)
    scene = sample_scene(rng, 8, setup64.train_specs, setup64.workspace, ins,
                         max_overlap=0.3)
    all_g = propose_grasps(scene, np.random.default_rng(5), k_max=100)
    few = propose_grasps(scene, np.random.default_rng(5), k_max=6)
    assert len(few) == 6
    kept = sorted([g.quality for g in few], reverse=True)
    best = sorted([g.quality for g in all_g], reverse=True)[:6]
    assert np.allclose(kept, best)


def test_fully_hidden_object_gets_no_proposals():
    from tests.test_world import make_spec
    from langrasp.world import PlacedObject
    small = make_spec("small", size=(0.06,))
    big = make_spec("big", size=(0.14,))
    scene = Scene(workspace=Workspace(),
                  objects=[PlacedObject(0, small, 0.4, 0.4, 0.0),
                           PlacedObject(1, big, 0.4, 0.4, 0.0)],
                  target_ids=[0])
    grasps = propose_grasps(scene, np.random.default_rng(0),
                            position_jitter=0.0)
    assert all(abs(g.position[2] - big.height) < 1e-9 for g in grasps)


# grasp_feature_encode ----------------------------------------------------------------

def test_zero_mlp_gives_zero_features():
    rng = np.random.default_rng(4)
    mlp = nn.MLP([39, 8, 8], rng)
    for layer in mlp.layers:
        layer.weight.data[:] = 0.0
        layer.bias.data[:] = 0.0
    out = grasp_feature_encode([grasp_pose(0.2, 0.3)], mlp.layers)
    assert np.allclose(out.data, 0.0)


def test_identical_grasps_identical_features():
    rng = np.random.default_rng(5)
    mlp = nn.MLP([39, 16, 16], rng)
    g = grasp_pose(0.25, 0.55)
    out = grasp_feature_encode([g, g], mlp.layers).data
    assert np.array_equal(out[0], out[1])


def test_grasp_encoding_matches_composed_oracle():
    rng = np.random.default_rng(6)
    mlp = nn.MLP([39, 16, 16], rng)
    grasps = [grasp_pose(0.2, 0.3, 0.05, 0.7, 1.1, 0.06),
              grasp_pose(0.6, 0.1, 0.02, 0.95, 0.4, 0.09)]
    out = grasp_feature_encode(grasps, mlp.layers).data
    inputs = grasp_feature_inputs(grasps)
    assert inputs.shape == (2, 39)
    for i, g in enumerate(grasps):
        expected_tail = [g.yaw, g.width, g.quality]
        assert np.allclose(inputs[i, 36:], expected_tail)
        assert np.allclose(inputs[i, :36],
                           nn.positional_encoding(np.array(g.position), 6))
    hidden = np.maximum(inputs @ mlp.layers[0].weight.data.T
                        + mlp.layers[0].bias.data, 0.0)
    expected = hidden @ mlp.layers[1].weight.data.T + mlp.layers[1].bias.data
    assert np.allclose(out, expected, atol=1e-12)


def test_empty_grasp_set_rejected():
    rng = np.random.default_rng(7)
    mlp = nn.MLP([39, 8, 8], rng)
    with pytest.raises(ValueError):
        grasp_feature_encode([], mlp.layers)


# box_grasp_mapping ---------------------------------------------------------------------

def test_mapping_grasp_at_center():
    boxes = [box_at(0.4, 0.4)]
    grasps = [grasp_pose(0.4, 0.4)]
    m = box_grasp_mapping(boxes, grasps)
    assert m.matrix.shape == (1, 1) and m.matrix[0, 0] == 1.0


def test_mapping_far_grasp_all_zero_column():
    boxes = [box_at(0.2, 0.2), box_at(0.6, 0.6)]
    grasps = [grasp_pose(0.4, 0.4), grasp_pose(0.21, 0.2)]
    m = box_grasp_mapping(boxes, grasps)
    assert np.allclose(m.matrix[:, 0], 0.0)
    assert m.matrix[0, 1] == 1.0 and m.matrix[1, 1] == 0.0


def brute_force_mapping(boxes, grasps, d):
    m = np.zeros((len(boxes), len(grasps)))
    for i, b in enumerate(boxes):
        for k, g in enumerate(grasps):
            dist = np.sqrt(sum((b.center_3d[j] - g.position[j]) ** 2
                               for j in range(3)))
            m[i, k] = 1.0 if dist < d else 0.0
    return m


def test_mapping_matches_brute_force_on_random_instances():
    rng = np.random.default_rng(8)
    for _ in range(100):
        n, k = rng.integers(1, 9), rng.integers(1, 14)
        boxes = [box_at(*rng.uniform(0, 0.8, size=2), rng.uniform(0, 0.2))
                 for _ in range(n)]
        grasps = [grasp_pose(*rng.uniform(0, 0.8, size=2), rng.uniform(0, 0.2))
                  for _ in range(k)]
        d = rng.uniform(0.02, 0.3)
        m = box_grasp_mapping(boxes, grasps, d)
        assert np.array_equal(m.matrix, brute_force_mapping(boxes, grasps, d))


def test_mapping_permutation_symmetry():
    rng = np.random.default_rng(9)
    boxes = [box_at(*rng.uniform(0, 0.8, size=2)) for _ in range(5)]
    grasps = [grasp_pose(*rng.uniform(0, 0.8, size=2)) for _ in range(7)]
    m = box_grasp_mapping(boxes, grasps).matrix
    pb = rng.permutation(5)
    pg = rng.permutation(7)
    m_pb = box_grasp_mapping([boxes[i] for i in pb], grasps).matrix
    m_pg = box_grasp_mapping(boxes, [grasps[i] for i in pg]).matrix
    assert np.array_equal(m_pb, m[pb])
    assert np.array_equal(m_pg, m[:, pg])


def test_mapping_requires_positive_threshold():
    with pytest.raises(ValueError):
        box_grasp_mapping([box_at(0.4, 0.4)], [grasp_pose(0.4, 0.4)], 0.0)


# grounding_prior ------------------------------------------------------------------------

def test_prior_uniform_when_single_box_maps_everywhere():
    boxes = [box_at(0.4, 0.4)]
    grasps = [grasp_pose(0.4, 0.4), grasp_pose(0.41, 0.4), grasp_pose(0.4, 0.41)]
    m = box_grasp_mapping(boxes, grasps)
    prior = grounding_prior(np.array([1.0]), m)
    assert np.allclose(prior, 1 / 3)


def test_prior_floor_for_unmapped_grasp():
    boxes = [box_at(0.2, 0.2)]
    grasps = [grasp_pose(0.2, 0.2), grasp_pose(0.7, 0.7)]
    m = box_grasp_mapping(boxes, grasps)
    prior = grounding_prior(np.array([1.0]), m, floor=1e-6)
    assert prior[1] == pytest.approx(1e-6 / (1.0 + 2e-6))
    assert prior.sum() == pytest.approx(1.0)


def test_prior_matches_matrix_product_oracle():
    rng = np.random.default_rng(10)
    for _ in range(50):
        n, k = rng.integers(1, 7), rng.integers(1, 11)
        probs = rng.dirichlet(np.ones(n))
        matrix = (rng.random((n, k)) < 0.4).astype(float)
        m = box_grasp_mapping([box_at(0.1, 0.1)], [grasp_pose(0.1, 0.1)])
        m = type(m)(matrix=matrix, threshold=0.05)
        prior = grounding_prior(probs, m)
        raw = probs @ matrix + 1e-6
        assert np.allclose(prior, raw / raw.sum(), atol=1e-15)
        assert np.all(prior > 0) and prior.sum() == pytest.approx(1.0)


def test_prior_valid_even_with_all_zero_matrix():
    from langrasp.grasps import MappingMatrix
    m = MappingMatrix(matrix=np.zeros((2, 4)), threshold=0.05)
    prior = grounding_prior(np.array([0.3, 0.7]), m)
    assert np.allclose(prior, 0.25)


def test_prior_rejects_zero_actions():
    from langrasp.grasps import MappingMatrix
    m = MappingMatrix(matrix=np.zeros((2, 0)), threshold=0.05)
    with pytest.raises(ValueError):
        grounding_prior(np.array([0.5, 0.5]), m)
