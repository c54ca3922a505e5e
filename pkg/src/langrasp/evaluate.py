"""Evaluation protocol: greedy rollouts, suites, baselines, reports.

Task success rate is the percentage of runs that grasp a target within
the attempt limit; motion number is the mean attempts over successful
runs only (failures have no completion).
"""
from __future__ import annotations

import io
import json
import os
from dataclasses import dataclass

import numpy as np

from .config import config_hash
from .grasps import box_grasp_mapping
from .policy import FusionPolicy, NoBoxesError, NoGraspsError
from .runtime import Setup
from .world import (Episode, Instruction, PlacementError, STAGE_II,
                    instruction_from_dict, instruction_to_dict,
                    sample_instruction, sample_scene, targets_for_instruction)

SPLITS = ("seen", "unseen_objects", "unseen_templates")


@dataclass(frozen=True)
class TestCase:
    __test__ = False  # not a pytest class, despite the name

    case_id: str
    split: str
    instruction: Instruction
    scene_seed: int
    n_objects: int
    max_overlap: float
    cluster: float = 0.0
    bury_targets: bool = False

    def to_dict(self) -> dict:
        return {"case_id": self.case_id, "split": self.split,
                "instruction": instruction_to_dict(self.instruction),
                "scene_seed": self.scene_seed, "n_objects": self.n_objects,
                "max_overlap": self.max_overlap, "cluster": self.cluster,
                "bury_targets": self.bury_targets}

    @staticmethod
    def from_dict(doc: dict) -> "TestCase":
        return TestCase(case_id=doc["case_id"], split=doc["split"],
                        instruction=instruction_from_dict(doc["instruction"]),
                        scene_seed=doc["scene_seed"], n_objects=doc["n_objects"],
                        max_overlap=doc["max_overlap"],
                        cluster=doc.get("cluster", 0.0),
                        bury_targets=doc.get("bury_targets", False))


def build_case_scene(case: TestCase, setup: Setup):
    specs = setup.specs_for_split(case.split)
    rng = np.random.default_rng(case.scene_seed)
    return sample_scene(rng, case.n_objects, specs, setup.workspace,
                        case.instruction, max_overlap=case.max_overlap,
                        cluster=case.cluster, bury_targets=case.bury_targets,
                        seed=case.scene_seed)


def run_case(policy_fn, case: TestCase, setup: Setup, rng: np.random.Generator,
             max_attempts: int = 8, encoder=None):
    """One greedy rollout; returns (success, motions, trace)."""
    scene = build_case_scene(case, setup)
    ep = Episode(scene, case.instruction, STAGE_II, setup.proposer, rng,
                 attempt_limit=max_attempts, copy_scene=False)
    trace = []
    obs = ep.observe()
    while not ep.done:
        step = {"attempt": ep.attempts + 1, "n_boxes": obs.n_boxes,
                "n_grasps": obs.n_grasps}
        if obs.n_grasps == 0:
            ep.forfeit_attempt()
            step.update(action=None, success=False, removed=None, reward=None)
            trace.append(step)
            obs = ep.observe()
            continue
        try:
            action, info = policy_fn(obs, rng)
        except (NoBoxesError, NoGraspsError):
            ep.forfeit_attempt()
            step.update(action=None, success=False, removed=None, reward=None)
            trace.append(step)
            obs = ep.observe()
            continue
        grasp = obs.grasps[action]
        reward, next_obs, done, success = ep.step(grasp)
        outcome = ep.last_outcome
        step.update(
            action=int(action),
            grasp_position=[float(v) for v in grasp.position],
            grasp_yaw=float(grasp.yaw),
            success=bool(outcome.success),
            removed=outcome.object_id,
            reward=float(reward),
            boxes=[list(b.rect) for b in obs.boxes],
            box_attention=[float(w) for w in info.get("box_attention", [])],
        )
        trace.append(step)
        obs = next_obs
    motions = ep.attempts if ep.success else None
    return ep.success, motions, trace


def evaluate(policy_fn, suite: dict, setup: Setup, runs_per_case: int = 15,
             seed: int = 0, max_attempts: int = 8) -> dict:
    """Aggregate report over every case and run; reproducible from the seed."""
    cases = [TestCase.from_dict(c) for c in suite["cases"]]
    if not cases:
        raise ValueError("empty evaluation suite")
    per_case = []
    traces = []
    successes = 0
    motions_all = []
    for ci, case in enumerate(cases):
        case_succ = 0
        case_motions = []
        for run in range(runs_per_case):
            rng = np.random.default_rng(
                np.random.SeedSequence([seed, ci, run, 7]))
            success, motions, trace = run_case(policy_fn, case, setup, rng,
                                               max_attempts=max_attempts)
            traces.append({"case_id": case.case_id, "run": run,
                           "success": bool(success), "motions": motions,
                           "steps": trace})
            if success:
                case_succ += 1
                case_motions.append(motions)
        successes += case_succ
        motions_all.extend(case_motions)
        per_case.append({
            "case_id": case.case_id,
            "split": case.split,
            "instruction": case.instruction.text,
            "success_rate": 100.0 * case_succ / runs_per_case,
            "motion_number": (float(np.mean(case_motions))
                              if case_motions else None),
            "runs": runs_per_case,
        })
    total_runs = len(cases) * runs_per_case
    return {
        "version": 1,
        "seed": seed,
        "suite_seed": suite.get("seed"),
        "runs_per_case": runs_per_case,
        "max_attempts": max_attempts,
        "aggregate": {
            "success_rate": 100.0 * successes / total_runs,
            "motion_number": (float(np.mean(motions_all)) if motions_all else None),
            "successes": successes,
            "runs": total_runs,
        },
        "cases": per_case,
        "traces": traces,
    }


def recompute_aggregate(report: dict) -> dict:
    """Aggregates derived from the stored traces alone (consistency check)."""
    runs = len(report["traces"])
    succ = [t for t in report["traces"] if t["success"]]
    motions = [t["motions"] for t in succ]
    return {
        "success_rate": 100.0 * len(succ) / runs,
        "motion_number": (float(np.mean(motions)) if motions else None),
        "successes": len(succ),
        "runs": runs,
    }


# policies and baselines ----------------------------------------------------------

def policy_fn_from_model(model: FusionPolicy, encoder, greedy: bool = True):
    def fn(obs, rng):
        return model.act(obs, encoder, rng, greedy=greedy)
    return fn


def baseline_grounding(obs, encoder, mapping, rng: np.random.Generator) -> int:
    """Best-grounded box, then a uniformly random grasp mapped to it; a box
    with no mapped grasp falls back to a uniform grasp over the scene."""
    feats = encoder.encode_observation(obs)
    lang = encoder.encode_text(obs.instruction, fallback=True)
    probs = encoder.ground(feats, lang)
    box = int(np.argmax(probs))
    mapped = np.nonzero(mapping.matrix[box])[0]
    if mapped.size == 0:
        return int(rng.integers(obs.n_grasps))
    return int(mapped[rng.integers(mapped.size)])


def baseline_random(obs, rng: np.random.Generator) -> int:
    if obs.n_grasps < 1:
        raise NoGraspsError("no grasps to sample from")
    return int(rng.integers(obs.n_grasps))


def baseline_fn(name: str, setup: Setup, encoder=None):
    encoder = encoder or setup.encoder
    if name == "grounding":
        def fn(obs, rng):
            if obs.n_boxes == 0:
                raise NoBoxesError("grounding baseline needs boxes")
            mapping = box_grasp_mapping(obs.boxes, obs.grasps, setup.map_threshold)
            return baseline_grounding(obs, encoder, mapping, rng), {}
        return fn
    if name == "random":
        return lambda obs, rng: (baseline_random(obs, rng), {})
    raise ValueError(f"unknown baseline {name!r}")


# suites ---------------------------------------------------------------------------

def _sample_case_instruction(rng, setup: Setup, split: str) -> Instruction:
    """Instruction whose targets the split's library can actually provide."""
    table = setup.table
    while True:
        ins = sample_instruction(rng, table)
        if split == "unseen_templates":
            tid = int(rng.integers(len(table.novel_templates)))
            ins = Instruction(template_text=table.novel_templates[tid],
                              keyword=ins.keyword, keyword_type=ins.keyword_type,
                              template_id=None)
        specs = setup.specs_for_split(split)
        if any(s.matches(ins.keyword, ins.keyword_type) for s in specs):
            return ins


def make_suite(setup: Setup, split: str, n_cases: int, seed: int,
               n_objects: int, max_overlap: float, cluster: float = 0.0,
               bury_targets: bool = False) -> dict:
    rng = np.random.default_rng(np.random.SeedSequence([seed, SPLITS.index(split)]))
    cases = []
    attempt = 0
    while len(cases) < n_cases:
        attempt += 1
        ins = _sample_case_instruction(rng, setup, split)
        scene_seed = int(rng.integers(2 ** 31 - 1))
        if targets_for_instruction(ins) > n_objects:
            continue
        case = TestCase(case_id=f"{split}-{len(cases):02d}", split=split,
                        instruction=ins, scene_seed=scene_seed,
                        n_objects=n_objects, max_overlap=max_overlap,
                        cluster=cluster, bury_targets=bury_targets)
        try:
            build_case_scene(case, setup)  # must be constructible
        except PlacementError:
            if attempt > 50 * n_cases:
                raise
            continue
        cases.append(case)
    return {"version": 1, "split": split, "seed": seed,
            "cases": [c.to_dict() for c in cases]}


def make_all_suites(setup: Setup, seed: int) -> dict:
    s = setup.config["eval"]["suite"]
    kw = dict(n_objects=s["objects"], max_overlap=s["max_overlap"],
              cluster=s.get("cluster", 0.0),
              bury_targets=s.get("bury_targets", False))
    return {
        "seen": make_suite(setup, "seen", s["seen_cases"], seed, **kw),
        "unseen_objects": make_suite(setup, "unseen_objects",
                                     s["unseen_object_cases"], seed, **kw),
        "unseen_templates": make_suite(setup, "unseen_templates",
                                       s["unseen_template_cases"], seed, **kw),
    }


def save_suite(suite: dict, path: str):
    with open(path, "w") as f:
        json.dump(suite, f, indent=1, sort_keys=True)


def load_suite(path: str) -> dict:
    with open(path) as f:
        suite = json.load(f)
    if suite.get("version") != 1:
        raise ValueError(f"unsupported suite version {suite.get('version')}")
    return suite


def save_report(report: dict, out_dir: str, config: dict, name: str = "report"):
    os.makedirs(out_dir, exist_ok=True)
    report = dict(report)
    report["config_hash"] = config_hash(config)
    json_path = os.path.join(out_dir, f"{name}.json")
    with open(json_path, "w") as f:
        json.dump(report, f, indent=1, sort_keys=True)
    csv_path = os.path.join(out_dir, f"{name}.csv")
    with open(csv_path, "w") as f:
        f.write(report_csv(report))
    return json_path, csv_path


def report_csv(report: dict) -> str:
    buf = io.StringIO()
    buf.write("case_id,split,success_rate,motion_number\n")
    for c in report["cases"]:
        mn = "" if c["motion_number"] is None else f"{c['motion_number']:.4f}"
        buf.write(f"{c['case_id']},{c['split']},{c['success_rate']:.2f},{mn}\n")
    agg = report["aggregate"]
    mn = "" if agg["motion_number"] is None else f"{agg['motion_number']:.4f}"
    buf.write(f"TOTAL,,{agg['success_rate']:.2f},{mn}\n")
    return buf.getvalue()
