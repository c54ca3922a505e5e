"""Evaluation protocol: rollouts, aggregation, baselines, suite generation."""

import json
import math

import numpy as np
import pytest

from langrasp.encoder import AlignedEncoder
from langrasp.evaluate import (TestCase, baseline_fn, baseline_grounding,
                               baseline_random, build_case_scene, evaluate,
                               make_all_suites, make_suite, recompute_aggregate,
                               report_csv, run_case, save_suite, load_suite)
from langrasp.grasps import box_grasp_mapping
from langrasp.policy import NoGraspsError
from langrasp.world import Instruction, Observation, detect_boxes


def label_case(keyword="apple", n_objects=1, seed=101, overlap=0.0,
               case_id="t-00", split="seen"):
    ins = Instruction(template_text="Give me the {keyword}", keyword=keyword,
                      keyword_type="label", template_id=0)
    return TestCase(case_id=case_id, split=split, instruction=ins,
                    scene_seed=seed, n_objects=n_objects, max_overlap=overlap)


def target_seeking_policy(case, setup):
    """Scripted: always picks the proposal nearest the (known) target."""
    scene = build_case_scene(case, setup)
    tgt = scene.object_by_id(scene.target_ids[0])

    def fn(obs, rng):
        d = [math.hypot(g.position[0] - tgt.x, g.position[1] - tgt.y)
             for g in obs.grasps]
        return int(np.argmin(d)), {}
    return fn


def failing_policy(obs, rng):
    raise NoGraspsError("scripted failure")


# run_case -------------------------------------------------------------------------

def test_run_case_scripted_success(setup64_clean):
    case = label_case()
    policy = target_seeking_policy(case, setup64_clean)
    success, motions, trace = run_case(policy, case, setup64_clean,
                                       np.random.default_rng(0))
    assert success and motions == 1 and len(trace) == 1
    assert trace[0]["success"] and trace[0]["removed"] is not None


def test_run_case_always_failing_policy(setup64_clean):
    case = label_case()
    success, motions, trace = run_case(failing_policy, case, setup64_clean,
                                       np.random.default_rng(0))
    assert not success and motions is None and len(trace) == 8


def test_run_case_seeded_determinism(setup64):
    case = label_case(n_objects=6, overlap=0.5)
    policy = baseline_fn("random", setup64)
    a = run_case(policy, case, setup64, np.random.default_rng(5))
    b = run_case(policy, case, setup64, np.random.default_rng(5))
    assert a == b


# evaluate --------------------------------------------------------------------------

def suite_of(cases):
    return {"version": 1, "seed": 0, "cases": [c.to_dict() for c in cases]}


def test_evaluate_all_successes(setup64_clean):
    case = label_case()
    policy = target_seeking_policy(case, setup64_clean)
    report = evaluate(policy, suite_of([case]), setup64_clean,
                      runs_per_case=15, seed=1)
    agg = report["aggregate"]
    assert agg["success_rate"] == 100.0
    assert agg["motion_number"] == pytest.approx(1.0)
    assert recompute_aggregate(report) == agg


def test_evaluate_zero_successes_reports_absent_motion(setup64_clean):
    case = label_case()
    report = evaluate(failing_policy, suite_of([case]), setup64_clean,
                      runs_per_case=3, seed=1)
    assert report["aggregate"]["success_rate"] == 0.0
    assert report["aggregate"]["motion_number"] is None
    assert recompute_aggregate(report) == report["aggregate"]


def test_aggregate_recomputation_hand_case():
    motions = [1, 2, 2, 3, 3, 4, 4, 5, 6]
    traces = [{"success": True, "motions": m} for m in motions]
    traces += [{"success": False, "motions": None} for _ in range(6)]
    agg = recompute_aggregate({"traces": traces})
    assert agg["success_rate"] == pytest.approx(60.0)
    assert agg["motion_number"] == pytest.approx(30 / 9)


def test_evaluate_aggregates_match_traces_on_real_run(setup64):
    cases = [label_case(keyword=k, n_objects=5, seed=s, overlap=0.4,
                        case_id=f"c-{i}")
             for i, (k, s) in enumerate([("apple", 7), ("cup", 8), ("ball", 9)])]
    policy = baseline_fn("random", setup64)
    report = evaluate(policy, suite_of(cases), setup64, runs_per_case=5, seed=3)
    assert recompute_aggregate(report) == report["aggregate"]
    assert report["aggregate"]["runs"] == 15


def test_evaluate_is_reproducible(setup64):
    case = label_case(n_objects=5, overlap=0.4)
    policy = baseline_fn("grounding", setup64)
    a = evaluate(policy, suite_of([case]), setup64, runs_per_case=4, seed=9)
    b = evaluate(policy, suite_of([case]), setup64, runs_per_case=4, seed=9)
    assert a == b


def test_report_csv_shape(setup64_clean):
    case = label_case()
    policy = target_seeking_policy(case, setup64_clean)
    report = evaluate(policy, suite_of([case]), setup64_clean, runs_per_case=2,
                      seed=0)
    csv = report_csv(report)
    lines = csv.strip().split("\n")
    assert lines[0] == "case_id,split,success_rate,motion_number"
    assert lines[-1].startswith("TOTAL")


# baselines -----------------------------------------------------------------------

def test_baseline_random_trivia(setup64):
    obs = Observation(boxes=[], grasps=[object()], instruction=None, noise_seed=0)
    assert baseline_random(obs, np.random.default_rng(0)) == 0
    multi = Observation(boxes=[], grasps=[object()] * 5, instruction=None,
                        noise_seed=0)
    rng = np.random.default_rng(1)
    draws = np.bincount([baseline_random(multi, rng) for _ in range(10000)],
                        minlength=5) / 10000
    assert np.allclose(draws, 0.2, atol=0.02)
    a = baseline_random(multi, np.random.default_rng(2))
    b = baseline_random(multi, np.random.default_rng(2))
    assert a == b
    with pytest.raises(NoGraspsError):
        baseline_random(Observation([], [], None, 0), np.random.default_rng(0))


def clean_obs(setup, case):
    scene = build_case_scene(case, setup)
    boxes = detect_boxes(scene)
    grasps = setup.proposer(scene, np.random.default_rng(4))
    obs = Observation(boxes=boxes, grasps=grasps,
                      instruction=case.instruction, noise_seed=11)
    return scene, obs


def test_baseline_grounding_single_mapped_grasp(setup64_clean):
    case = label_case()
    scene, obs = clean_obs(setup64_clean, case)
    obs.grasps = obs.grasps[:1]
    mapping = box_grasp_mapping(obs.boxes, obs.grasps,
                                setup64_clean.map_threshold)
    enc = setup64_clean.encoder
    assert baseline_grounding(obs, enc, mapping, np.random.default_rng(0)) == 0


def test_baseline_grounding_uniform_fallback(setup64_clean):
    case = label_case()
    scene, obs = clean_obs(setup64_clean, case)
    k = obs.n_grasps
    mapping = box_grasp_mapping(obs.boxes, obs.grasps, setup64_clean.map_threshold)
    mapping.matrix[:] = 0.0  # no grasp assigned to the grounded box
    rng = np.random.default_rng(5)
    draws = np.bincount([baseline_grounding(obs, setup64_clean.encoder, mapping,
                                            rng) for _ in range(10000)],
                        minlength=k) / 10000
    assert np.allclose(draws, 1.0 / k, atol=0.02)


def test_baseline_grounding_targets_true_box_without_noise(setup64_clean):
    rng = np.random.default_rng(6)
    for seed in (21, 22, 23, 24, 25):
        case = label_case(keyword="banana", n_objects=5, seed=seed, overlap=0.0)
        scene, obs = clean_obs(setup64_clean, case)
        mapping = box_grasp_mapping(obs.boxes, obs.grasps,
                                    setup64_clean.map_threshold)
        action = baseline_grounding(obs, setup64_clean.encoder, mapping, rng)
        target = scene.object_by_id(scene.target_ids[0])
        g = obs.grasps[action]
        assert math.hypot(g.position[0] - target.x,
                          g.position[1] - target.y) < 0.06


# suites --------------------------------------------------------------------------

def test_make_suite_counts_and_split_rules(setup64):
    suites = make_all_suites(setup64, seed=13)
    assert len(suites["seen"]["cases"]) == 10
    assert len(suites["unseen_objects"]["cases"]) == 5
    assert len(suites["unseen_templates"]["cases"]) == 5
    table = setup64.table
    for doc in suites["unseen_objects"]["cases"]:
        case = TestCase.from_dict(doc)
        scene = build_case_scene(case, setup64)
        assert all(o.spec.split == "unseen" for o in scene.objects)
    for doc in suites["unseen_templates"]["cases"]:
        case = TestCase.from_dict(doc)
        assert case.instruction.template_text not in table.templates
        assert case.instruction.template_text in table.novel_templates
    for doc in suites["seen"]["cases"]:
        case = TestCase.from_dict(doc)
        scene = build_case_scene(case, setup64)
        assert all(o.spec.split == "train" for o in scene.objects)
        assert case.instruction.template_text in table.templates


def test_make_suite_deterministic(setup64, tmp_path):
    a = make_suite(setup64, "seen", 4, seed=77, n_objects=6, max_overlap=0.5)
    b = make_suite(setup64, "seen", 4, seed=77, n_objects=6, max_overlap=0.5)
    assert a == b
    path = tmp_path / "suite.json"
    save_suite(a, str(path))
    assert load_suite(str(path)) == a
