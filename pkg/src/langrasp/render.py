"""Top-down PNG rendering of scenes and evaluation traces."""
from __future__ import annotations

import math
import os

import numpy as np
from PIL import Image, ImageDraw

from .world import Scene, detect_boxes, render_id_map

TABLE_RGB = (46, 46, 52)
COLOR_RGB = {
    "red": (205, 72, 72),
    "yellow": (226, 200, 66),
    "green": (100, 176, 92),
    "blue": (82, 118, 202),
    "white": (224, 224, 224),
}
BOX_RGB = (255, 255, 255)
STAR_RGB = (250, 220, 40)
GRASP_RGB = (255, 80, 200)


def _star(cx, cy, r_out, r_in):
    pts = []
    for i in range(10):
        r = r_out if i % 2 == 0 else r_in
        a = -math.pi / 2 + i * math.pi / 5
        pts.append((cx + r * math.cos(a), cy + r * math.sin(a)))
    return pts


def scene_image(scene: Scene, boxes=None, grasp=None, attention=None,
                upscale: int = 3) -> Image.Image:
    """Scene render with detected boxes and target stars overlaid."""
    idmap = render_id_map(scene)
    px = scene.workspace.render_px
    rgb = np.zeros((px, px, 3), dtype=np.uint8)
    rgb[:] = TABLE_RGB
    for obj in scene.objects:
        color = np.array(COLOR_RGB.get(obj.spec.color, (160, 160, 160)))
        shade = 0.75 + 0.25 * ((obj.oid * 37) % 7) / 6.0
        rgb[idmap == obj.oid] = np.clip(color * shade, 0, 255).astype(np.uint8)
    img = Image.fromarray(rgb).resize((px * upscale, px * upscale), Image.NEAREST)
    draw = ImageDraw.Draw(img)
    u = upscale
    if boxes is None:
        boxes = detect_boxes(scene)
    for i, box in enumerate(boxes):
        r0, c0, r1, c1 = box.rect if hasattr(box, "rect") else box
        weight = None if attention is None or i >= len(attention) else attention[i]
        width = 1 if weight is None else 1 + int(round(3 * float(weight)))
        draw.rectangle([c0 * u, r0 * u, c1 * u - 1, r1 * u - 1],
                       outline=BOX_RGB, width=width)
    scale = px * u / scene.workspace.side
    for tid in scene.target_ids:
        try:
            obj = scene.object_by_id(tid)
        except KeyError:
            continue
        cx, cy = obj.x * scale, obj.y * scale
        draw.polygon(_star(cx, cy, 6 * u, 2.5 * u), fill=STAR_RGB)
    if grasp is not None:
        gx, gy = grasp[0] * scale, grasp[1] * scale
        yaw = grasp[2] if len(grasp) > 2 else 0.0
        dx, dy = 8 * u * math.cos(yaw), 8 * u * math.sin(yaw)
        draw.line([gx - dx, gy - dy, gx + dx, gy + dy], fill=GRASP_RGB, width=2)
        draw.ellipse([gx - 2 * u, gy - 2 * u, gx + 2 * u, gy + 2 * u],
                     fill=GRASP_RGB)
    return img


def render_scene_png(scene: Scene, path: str, **kwargs) -> str:
    scene_image(scene, **kwargs).save(path)
    return path


def render_trace_pngs(trace: dict, scene: Scene, out_dir: str) -> list:
    """Replay one run's trace against its initial scene, one PNG per step.

    Removals recorded in the trace are applied directly, so the replay does
    not re-roll grasp outcomes.
    """
    os.makedirs(out_dir, exist_ok=True)
    paths = []
    for i, step in enumerate(trace["steps"]):
        grasp = None
        if step.get("grasp_position") is not None:
            g = step["grasp_position"]
            grasp = (g[0], g[1], step.get("grasp_yaw", 0.0))
        path = os.path.join(out_dir, f"step_{i:02d}.png")
        scene_image(scene, attention=step.get("box_attention"),
                    grasp=grasp).save(path)
        paths.append(path)
        if step.get("removed") is not None:
            scene.remove_object(step["removed"])
    return paths
