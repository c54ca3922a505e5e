"""Deterministic top-down tabletop simulator.

Objects are 2.5-D footprints with a strict stacking order (later drop =
higher); visibility follows painter's order on a square pixel grid.
Grasp execution is a stochastic stand-in for physics: success probability
is grasp quality times a clutter penalty.
"""
from __future__ import annotations

import copy
import json
import math
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .library import ObjectSpec, KeywordTable

STAGE_I = "I"
STAGE_II = "II"

MIN_BOX_AREA = 225          # boxes under 15x15 px equivalent are dropped
CLUTTER_LAMBDA = 0.8        # weight of occlusion in grasp failure
GRASP_ASSOC_RADIUS = 0.05   # m; grasp farther than this from every center fails


class PlacementError(RuntimeError):
    """Rejection sampling could not place an object."""


class EpisodeFinished(RuntimeError):
    """step() or forfeit_attempt() called on a finished episode."""


@dataclass(frozen=True)
class Workspace:
    side: float = 0.8
    render_px: int = 224

    @property
    def dist_max(self) -> float:
        return self.side * math.sqrt(2.0)


@dataclass
class PlacedObject:
    oid: int
    spec: ObjectSpec
    x: float
    y: float
    angle: float

    def center3(self) -> np.ndarray:
        return np.array([self.x, self.y, self.spec.height / 2.0])


@dataclass
class Scene:
    workspace: Workspace
    objects: list                  # stacking order: later entries occlude earlier
    target_ids: list
    seed: int | None = None

    def object_by_id(self, oid: int) -> PlacedObject:
        for o in self.objects:
            if o.oid == oid:
                return o
        raise KeyError(f"no object {oid} in scene")

    def remove_object(self, oid: int):
        self.objects = [o for o in self.objects if o.oid != oid]


@dataclass(frozen=True)
class Instruction:
    template_text: str
    keyword: str
    keyword_type: str
    template_id: int | None = None

    @property
    def text(self) -> str:
        return self.template_text.format(keyword=self.keyword)


@dataclass(frozen=True)
class ObjectBox:
    rect: tuple[int, int, int, int]      # (row0, col0, row1, col1), exclusive ends
    center_3d: tuple[float, float, float]
    descriptor: dict                     # concept -> weight, sums to 1
    owner_id: int                        # object whose visible region made the box
    dominant_id: int                     # most-visible object inside the rect

    @property
    def area(self) -> int:
        r0, c0, r1, c1 = self.rect
        return (r1 - r0) * (c1 - c0)


@dataclass(frozen=True)
class GraspOutcome:
    success: bool
    object_id: int | None                # set only on success
    distance: float                      # grasped-object distance to nearest target
    attempted_id: int | None = None


@dataclass
class Observation:
    boxes: list
    grasps: list
    instruction: Instruction
    noise_seed: int

    @property
    def n_boxes(self) -> int:
        return len(self.boxes)

    @property
    def n_grasps(self) -> int:
        return len(self.grasps)


# rendering ------------------------------------------------------------------

def _object_window_mask(obj: PlacedObject, ws: Workspace):
    """Pixel window and boolean footprint mask of one object."""
    px = ws.render_px
    scale = px / ws.side
    hw, hl = obj.spec.half_extents()
    reach = math.hypot(hw, hl)
    c0 = max(0, int((obj.x - reach) * scale) - 1)
    c1 = min(px, int((obj.x + reach) * scale) + 2)
    r0 = max(0, int((obj.y - reach) * scale) - 1)
    r1 = min(px, int((obj.y + reach) * scale) + 2)
    if c0 >= c1 or r0 >= r1:
        return r0, c0, np.zeros((0, 0), dtype=bool)
    cols = (np.arange(c0, c1) + 0.5) / scale
    rows = (np.arange(r0, r1) + 0.5) / scale
    xg, yg = np.meshgrid(cols, rows)
    dx, dy = xg - obj.x, yg - obj.y
    if obj.spec.shape == "circle":
        mask = dx * dx + dy * dy <= obj.spec.size[0] ** 2
    else:
        ca, sa = math.cos(obj.angle), math.sin(obj.angle)
        u = dx * ca + dy * sa
        v = -dx * sa + dy * ca
        mask = (np.abs(u) <= hw) & (np.abs(v) <= hl)
    return r0, c0, mask


def render_id_map(scene: Scene) -> np.ndarray:
    """Top-down id image; -1 is empty table, else the topmost object id."""
    px = scene.workspace.render_px
    idmap = np.full((px, px), -1, dtype=np.int32)
    for obj in scene.objects:  # painter's order
        r0, c0, mask = _object_window_mask(obj, scene.workspace)
        if mask.size:
            sub = idmap[r0:r0 + mask.shape[0], c0:c0 + mask.shape[1]]
            sub[mask] = obj.oid
    return idmap


def visible_object_ids(scene: Scene) -> list:
    idmap = render_id_map(scene)
    visible = set(np.unique(idmap))
    return [o.oid for o in scene.objects if o.oid in visible]


def full_footprint_mask(scene: Scene, oid: int) -> np.ndarray:
    px = scene.workspace.render_px
    out = np.zeros((px, px), dtype=bool)
    obj = scene.object_by_id(oid)
    r0, c0, mask = _object_window_mask(obj, scene.workspace)
    if mask.size:
        out[r0:r0 + mask.shape[0], c0:c0 + mask.shape[1]] |= mask
    return out


def overlap_fraction(scene: Scene, oid: int) -> float:
    """Fraction of an object's footprint covered by higher-stacked objects."""
    own = full_footprint_mask(scene, oid)
    total = int(own.sum())
    if total == 0:
        return 1.0
    idx = next(i for i, o in enumerate(scene.objects) if o.oid == oid)
    above = np.zeros_like(own)
    for o in scene.objects[idx + 1:]:
        above |= full_footprint_mask(scene, o.oid)
    return float((own & above).sum()) / total


# box detection ----------------------------------------------------------------

def detect_boxes(scene: Scene, min_box_area: int = MIN_BOX_AREA) -> list:
    idmap = render_id_map(scene)
    specs = {o.oid: o.spec for o in scene.objects}
    ws = scene.workspace
    scale = ws.side / ws.render_px
    boxes = []
    for obj in scene.objects:
        mask = idmap == obj.oid
        if not mask.any():
            continue
        labels, n = ndimage.label(mask)
        for comp in range(1, n + 1):
            rows, cols = np.nonzero(labels == comp)
            r0, r1 = int(rows.min()), int(rows.max()) + 1
            c0, c1 = int(cols.min()), int(cols.max()) + 1
            if (r1 - r0) * (c1 - c0) < min_box_area:
                continue
            sub = idmap[r0:r1, c0:c1]
            ids, counts = np.unique(sub[sub >= 0], return_counts=True)
            total = counts.sum()
            descriptor: dict = {}
            for oid, cnt in zip(ids, counts):
                w = cnt / total
                for concept, cw in specs[int(oid)].attribute_weights().items():
                    descriptor[concept] = descriptor.get(concept, 0.0) + w * cw
            dominant = int(ids[np.argmax(counts)])
            cx = (c0 + c1) / 2.0 * scale
            cy = (r0 + r1) / 2.0 * scale
            cz = specs[dominant].height
            boxes.append(ObjectBox(rect=(r0, c0, r1, c1), center_3d=(cx, cy, cz),
                                   descriptor=descriptor, owner_id=obj.oid,
                                   dominant_id=dominant))
    return boxes


# instructions -------------------------------------------------------------------

KEYWORD_TYPE_PROBS = (("label", 0.4), ("general", 0.2),
                      ("shape_color", 0.2), ("function", 0.2))


def sample_instruction(rng: np.random.Generator, table: KeywordTable) -> Instruction:
    types, probs = zip(*KEYWORD_TYPE_PROBS)
    ktype = types[rng.choice(len(types), p=probs)]
    words = table.keywords_of(ktype)
    keyword = words[rng.integers(len(words))]
    tid = int(rng.integers(len(table.templates)))
    return Instruction(template_text=table.templates[tid], keyword=keyword,
                       keyword_type=ktype, template_id=tid)


def targets_for_instruction(instruction: Instruction) -> int:
    """General-label and function instructions place two target objects."""
    return 2 if instruction.keyword_type in ("general", "function") else 1


# scene sampling -------------------------------------------------------------------

def sample_scene(rng: np.random.Generator, n_objects: int, specs,
                 workspace: Workspace = Workspace(),
                 instruction: Instruction | None = None,
                 max_overlap: float = 0.6, max_tries: int = 400,
                 cluster: float = 0.0, pile_sigma: float = 0.06,
                 bury_targets: bool = False,
                 seed: int | None = None) -> Scene:
    """Drop objects with rejection sampling; overlap up to ``max_overlap``
    of the pairwise footprint-circle gap is allowed (0 = no contact).

    ``cluster`` is the fraction of distractors piled around a target
    (tight packing); ``bury_targets`` drops the targets first, so the pile
    stacks on top of them.
    """
    if n_objects == 0 and instruction is None:
        return Scene(workspace=workspace, objects=[], target_ids=[], seed=seed)

    chosen: list[ObjectSpec] = []
    target_flags: list[bool] = []
    if instruction is not None:
        matching = [s for s in specs if s.matches(instruction.keyword,
                                                  instruction.keyword_type)]
        if not matching:
            raise PlacementError(
                f"no library object matches {instruction.keyword!r}")
        n_targets = targets_for_instruction(instruction)
        if n_targets > n_objects:
            raise ValueError(f"{n_targets} targets do not fit in {n_objects} objects")
        if n_targets <= len(matching):
            idx = rng.choice(len(matching), size=n_targets, replace=False)
        else:
            idx = rng.choice(len(matching), size=n_targets, replace=True)
        for i in idx:
            chosen.append(matching[int(i)])
            target_flags.append(True)
        pool = [s for s in specs if not s.matches(instruction.keyword,
                                                  instruction.keyword_type)]
        if not pool and n_objects > n_targets:
            raise PlacementError("library has only target-matching objects")
        for _ in range(n_objects - n_targets):
            chosen.append(pool[int(rng.integers(len(pool)))])
            target_flags.append(False)
    else:
        for _ in range(n_objects):
            chosen.append(specs[int(rng.integers(len(specs)))])
            target_flags.append(False)

    if bury_targets:
        targets_first = [i for i, t in enumerate(target_flags) if t]
        rest = rng.permutation([i for i, t in enumerate(target_flags) if not t])
        order = np.array(targets_first + [int(i) for i in rest])
    else:
        order = rng.permutation(len(chosen))
    placed: list[PlacedObject] = []
    target_ids: list[int] = []
    target_positions: list[tuple[float, float]] = []
    radii: list[float] = []
    for oid, src in enumerate(order):
        spec = chosen[int(src)]
        is_target = bool(target_flags[int(src)])
        hw, hl = spec.half_extents()
        radius = (hw + hl) / 2.0
        pad = max(hw, hl)
        lo, hi = pad, workspace.side - pad
        piled = (not is_target and target_positions
                 and rng.random() < cluster)
        gap = 0.15 if piled else (1.0 - max_overlap)
        placed_ok = False
        for _ in range(max_tries):
            if piled:
                tx, ty = target_positions[int(rng.integers(len(target_positions)))]
                x = min(max(tx + rng.normal(scale=pile_sigma), lo), hi)
                y = min(max(ty + rng.normal(scale=pile_sigma), lo), hi)
            else:
                x = rng.uniform(lo, hi)
                y = rng.uniform(lo, hi)
            ok = True
            for other, r2 in zip(placed, radii):
                if math.hypot(x - other.x, y - other.y) < gap * (radius + r2):
                    ok = False
                    break
            if ok:
                angle = rng.uniform(0.0, math.pi)
                placed.append(PlacedObject(oid=oid, spec=spec, x=x, y=y, angle=angle))
                radii.append(radius)
                placed_ok = True
                break
        if not placed_ok:
            raise PlacementError(f"could not place object {oid} after {max_tries} tries")
        if is_target:
            target_ids.append(oid)
            target_positions.append((placed[-1].x, placed[-1].y))
    return Scene(workspace=workspace, objects=placed, target_ids=sorted(target_ids),
                 seed=seed)


# grasp execution ---------------------------------------------------------------

def execute_grasp(scene: Scene, grasp, rng: np.random.Generator,
                  assoc_radius: float = GRASP_ASSOC_RADIUS,
                  clutter_lambda: float = CLUTTER_LAMBDA) -> GraspOutcome:
    dist_max = scene.workspace.dist_max
    gx, gy = float(grasp.position[0]), float(grasp.position[1])
    best = None
    for o in scene.objects:
        d = math.hypot(gx - o.x, gy - o.y)
        if d <= assoc_radius and (best is None or d < best[0]):
            best = (d, o)
    if best is None:
        return GraspOutcome(success=False, object_id=None, distance=dist_max)
    obj = best[1]
    cover = overlap_fraction(scene, obj.oid)
    quality = min(max(float(grasp.quality), 0.0), 1.0)
    p = quality * max(0.0, 1.0 - clutter_lambda * cover)
    success = bool(rng.random() < p)
    if scene.target_ids:
        pos = obj.center3()
        distance = min(float(np.linalg.norm(pos - scene.object_by_id(t).center3()))
                       for t in scene.target_ids)
    else:
        distance = dist_max
    distance = min(max(distance, 0.0), dist_max)
    if success:
        scene.remove_object(obj.oid)
        return GraspOutcome(success=True, object_id=obj.oid, distance=distance,
                            attempted_id=obj.oid)
    return GraspOutcome(success=False, object_id=None, distance=distance,
                        attempted_id=obj.oid)


def compute_reward(outcome: GraspOutcome, stage: str, target_ids,
                   dist_max: float) -> float:
    if outcome.success and outcome.object_id in target_ids:
        return 2.0
    if outcome.success:
        if stage == STAGE_I:
            return -1.0
        return -min(max(outcome.distance / dist_max, 0.0), 1.0)
    return -1.0


# episodes -----------------------------------------------------------------------

ATTEMPT_LIMITS = {STAGE_I: 5, STAGE_II: 8}


class Episode:
    """One grasping task: a scene, an instruction, and an attempt budget."""

    def __init__(self, scene: Scene, instruction: Instruction, stage: str,
                 propose, rng: np.random.Generator,
                 attempt_limit: int | None = None, copy_scene: bool = True):
        self.scene = copy.deepcopy(scene) if copy_scene else scene
        self.instruction = instruction
        self.stage = stage
        self.attempt_limit = attempt_limit or ATTEMPT_LIMITS[stage]
        self.target_ids = list(self.scene.target_ids)
        self.attempts = 0
        self.done = False
        self.success = False
        self._propose = propose
        self._rng = rng
        self.noise_seed = int(rng.integers(2 ** 31 - 1))

    def observe(self) -> Observation:
        return Observation(boxes=detect_boxes(self.scene),
                           grasps=self._propose(self.scene, self._rng),
                           instruction=self.instruction,
                           noise_seed=self.noise_seed)

    def step(self, grasp):
        if self.done:
            raise EpisodeFinished("episode is already finished")
        outcome = execute_grasp(self.scene, grasp, self._rng)
        reward = compute_reward(outcome, self.stage, self.target_ids,
                                self.scene.workspace.dist_max)
        self.attempts += 1
        if outcome.success and outcome.object_id in self.target_ids:
            self.success = True
            self.done = True
        elif self.attempts >= self.attempt_limit:
            self.done = True
        self.last_outcome = outcome
        return reward, self.observe(), self.done, self.success

    def forfeit_attempt(self):
        """Consume one attempt without acting (no grasp available)."""
        if self.done:
            raise EpisodeFinished("episode is already finished")
        self.attempts += 1
        self.last_outcome = GraspOutcome(success=False, object_id=None,
                                         distance=self.scene.workspace.dist_max)
        if self.attempts >= self.attempt_limit:
            self.done = True


# serialization -------------------------------------------------------------------

def scene_to_dict(scene: Scene) -> dict:
    return {
        "version": 1,
        "side": scene.workspace.side,
        "render_px": scene.workspace.render_px,
        "seed": scene.seed,
        "targets": list(scene.target_ids),
        "objects": [{"oid": o.oid, "spec_id": o.spec.spec_id,
                     "x": o.x, "y": o.y, "angle": o.angle}
                    for o in scene.objects],
    }


def scene_from_dict(doc: dict, specs) -> Scene:
    if doc.get("version") != 1:
        raise ValueError(f"unsupported scene document version {doc.get('version')}")
    by_id = {s.spec_id: s for s in specs}
    ws = Workspace(side=doc["side"], render_px=doc["render_px"])
    objects = [PlacedObject(oid=o["oid"], spec=by_id[o["spec_id"]],
                            x=o["x"], y=o["y"], angle=o["angle"])
               for o in doc["objects"]]
    return Scene(workspace=ws, objects=objects, target_ids=list(doc["targets"]),
                 seed=doc.get("seed"))


def instruction_to_dict(ins: Instruction) -> dict:
    return {"template_text": ins.template_text, "keyword": ins.keyword,
            "keyword_type": ins.keyword_type, "template_id": ins.template_id}


def instruction_from_dict(doc: dict) -> Instruction:
    return Instruction(template_text=doc["template_text"], keyword=doc["keyword"],
                       keyword_type=doc["keyword_type"],
                       template_id=doc.get("template_id"))


def episode_to_dict(ep: Episode) -> dict:
    return {
        "version": 1,
        "scene": scene_to_dict(ep.scene),
        "instruction": instruction_to_dict(ep.instruction),
        "stage": ep.stage,
        "attempt_limit": ep.attempt_limit,
        "attempts": ep.attempts,
        "done": ep.done,
        "success": ep.success,
        "noise_seed": ep.noise_seed,
    }


def save_json(doc: dict, path: str):
    with open(path, "w") as f:
        json.dump(doc, f, indent=1, sort_keys=True)
