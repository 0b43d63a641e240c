"""
Procedural articulated-figure renderer

A figure is nine joints connected by eight capsule limbs, composited over a
shaded background. RGB, depth and surface normals all come from the same
capsule geometry, so the three maps agree by construction:

- normal: capsule cross-section normal (dx/r, -dy/r, sqrt(1 - (d/r)^2)),
  background sentinel (0, 0, 1)
- depth: normalized inverse depth of the nearest limb, affine-mapped from
  [0, 1] to [-1, 1] (background -1)
- rgb: albedo * Lambert(normal, LIGHT_DIR) over a per-id vertical gradient

Geometry is defined at the reference resolution REFERENCE_RES and scaled by
R / REFERENCE_RES, so one scene renders identically at R and 2R.
"""

import logging
import math
from dataclasses import dataclass, field
from typing import Dict, List, NamedTuple, Optional, Tuple

import numpy as np
from PIL import Image, ImageColor, ImageDraw

from structdiff.utils.errors import InvalidRangeError, RenderError

logger = logging.getLogger(__name__)

REFERENCE_RES = 48

JOINTS = ("head", "neck", "pelvis", "l_elbow", "l_hand", "r_elbow", "r_hand", "l_knee", "r_knee")
JOINT_INDEX = {name: i for i, name in enumerate(JOINTS)}

# limb name -> (start joint, end joint)
LIMBS = {
    "head": ("neck", "head"),
    "torso": ("neck", "pelvis"),
    "l_upper_arm": ("neck", "l_elbow"),
    "l_forearm": ("l_elbow", "l_hand"),
    "r_upper_arm": ("neck", "r_elbow"),
    "r_forearm": ("r_elbow", "r_hand"),
    "l_leg": ("pelvis", "l_knee"),
    "r_leg": ("pelvis", "r_knee"),
}
LIMB_NAMES = tuple(LIMBS)

BASE_LENGTHS = {
    "head": 5.0, "torso": 12.0,
    "l_upper_arm": 7.0, "l_forearm": 6.0, "r_upper_arm": 7.0, "r_forearm": 6.0,
    "l_leg": 11.0, "r_leg": 11.0,
}
BASE_RADII = {
    "head": 3.5, "torso": 3.5,
    "l_upper_arm": 1.8, "l_forearm": 1.6, "r_upper_arm": 1.8, "r_forearm": 1.6,
    "l_leg": 2.2, "r_leg": 2.2,
}

# angle 0 points up the image, positive angles turn towards +x
POSE_CLASSES = ("arms_down", "arms_up", "arms_out", "one_arm_raised")
_ARM_PROTOTYPES = {
    0: (-math.pi + 0.35, -math.pi + 0.2, math.pi - 0.35, math.pi - 0.2),
    1: (-0.5, -0.3, 0.5, 0.3),
    2: (-math.pi / 2, -math.pi / 2, math.pi / 2, math.pi / 2),
    3: (-0.4, -0.2, math.pi - 0.35, math.pi - 0.2),
}
ANGLE_JITTER = 0.2
LENGTH_JITTER = 0.1

# depth offsets: distinct levels LEVEL_GAP apart, jitter strictly below the gap
LEVEL_GAP = 0.1
LEVEL_JITTER = 0.02
BULGE = 0.04

ATTRIBUTE_VOCAB = (8, len(POSE_CLASSES), 4)  # color id, pose class, background id
FIGURE_COLORS = (
    (0.85, 0.25, 0.20), (0.20, 0.55, 0.85), (0.25, 0.75, 0.30), (0.90, 0.75, 0.20),
    (0.65, 0.30, 0.75), (0.95, 0.55, 0.15), (0.20, 0.75, 0.75), (0.85, 0.85, 0.85),
)
BACKGROUNDS = (
    ((0.10, 0.10, 0.15), (0.30, 0.30, 0.40)),
    ((0.40, 0.30, 0.20), (0.15, 0.10, 0.05)),
    ((0.15, 0.30, 0.15), (0.40, 0.50, 0.35)),
    ((0.50, 0.50, 0.55), (0.20, 0.20, 0.22)),
)
_light = np.array([-0.4, 0.5, 0.77], dtype=np.float64)
LIGHT_DIR = _light / np.linalg.norm(_light)
AMBIENT = 0.25
SENTINEL_NORMAL = (0.0, 0.0, 1.0)


class Keypoint(NamedTuple):
    x: float
    y: float
    visible: bool


@dataclass
class SceneParams:
    """
    Everything needed to render one figure. Angles are absolute limb
    directions in radians; lengths, radii and root are reference pixels.
    """

    angles: Dict[str, float]
    lengths: Dict[str, float]
    radii: Dict[str, float]
    depth_offsets: Dict[str, float]
    color_id: int = 0
    pose_class: int = 0
    background_id: int = 0
    root: Tuple[float, float] = (REFERENCE_RES / 2, REFERENCE_RES / 2)

    @property
    def attributes(self) -> Tuple[int, int, int]:
        return (self.color_id, self.pose_class, self.background_id)


@dataclass
class ModalityBundle:
    rgb: np.ndarray        # [3, R, R] in [-1, 1]
    depth: np.ndarray      # [1, R, R] in [-1, 1]
    normal: np.ndarray     # [3, R, R], unit vectors
    keypoints: List[Keypoint]
    attributes: Tuple[int, int, int]
    limb_ids: np.ndarray   # [R, R] int, -1 on background
    sizecrop: Tuple[int, int, int, int] = (REFERENCE_RES, REFERENCE_RES, 0, 0)
    params: Optional[SceneParams] = field(default=None, repr=False)

    @property
    def resolution(self) -> int:
        return int(self.rgb.shape[-1])

    def keypoint_array(self) -> np.ndarray:
        return np.array([[k.x, k.y, float(k.visible)] for k in self.keypoints], dtype=np.float32)


def _direction(angle: float) -> np.ndarray:
    return np.array([math.sin(angle), -math.cos(angle)])


def _wrap(angle: float) -> float:
    return (angle + math.pi) % (2 * math.pi) - math.pi


def joint_positions(p: SceneParams) -> Dict[str, np.ndarray]:
    """Joint coordinates in reference pixels (x right, y down)."""
    pos = {"pelvis": np.asarray(p.root, dtype=np.float64)}
    # torso angle points neck -> pelvis, so walk it backwards
    pos["neck"] = pos["pelvis"] - p.lengths["torso"] * _direction(p.angles["torso"])
    pos["head"] = pos["neck"] + p.lengths["head"] * _direction(p.angles["head"])
    for side in ("l", "r"):
        pos[f"{side}_elbow"] = pos["neck"] + p.lengths[f"{side}_upper_arm"] * _direction(p.angles[f"{side}_upper_arm"])
        pos[f"{side}_hand"] = pos[f"{side}_elbow"] + p.lengths[f"{side}_forearm"] * _direction(p.angles[f"{side}_forearm"])
        pos[f"{side}_knee"] = pos["pelvis"] + p.lengths[f"{side}_leg"] * _direction(p.angles[f"{side}_leg"])
    return pos


def figure_extent(p: SceneParams) -> Tuple[float, float, float, float]:
    """(x0, y0, x1, y1) of all drawn capsules in reference pixels."""
    pos = joint_positions(p)
    boxes = []
    for name, (j1, j2) in LIMBS.items():
        if p.lengths[name] <= 0:
            continue
        r = p.radii[name]
        a, b = pos[j1], pos[j2]
        boxes.append((min(a[0], b[0]) - r, min(a[1], b[1]) - r, max(a[0], b[0]) + r, max(a[1], b[1]) + r))
    if not boxes:
        x, y = p.root
        return (x, y, x, y)
    arr = np.array(boxes)
    return (float(arr[:, 0].min()), float(arr[:, 1].min()), float(arr[:, 2].max()), float(arr[:, 3].max()))


def sample_scene_params(rng_seed: int) -> SceneParams:
    """Draw a self-consistent figure. Deterministic for a fixed seed."""
    rng = np.random.default_rng(int(rng_seed))
    color_id = int(rng.integers(ATTRIBUTE_VOCAB[0]))
    pose_class = int(rng.integers(ATTRIBUTE_VOCAB[1]))
    background_id = int(rng.integers(ATTRIBUTE_VOCAB[2]))

    l_up, l_fore, r_up, r_fore = _ARM_PROTOTYPES[pose_class]
    prototypes = {
        "head": 0.0, "torso": math.pi,
        "l_upper_arm": l_up, "l_forearm": l_fore, "r_upper_arm": r_up, "r_forearm": r_fore,
        "l_leg": -math.pi + 0.25, "r_leg": math.pi - 0.25,
    }
    angles = {}
    for name in LIMB_NAMES:
        jitter = ANGLE_JITTER * (0.75 if name in ("head", "torso") else 1.0)
        angles[name] = _wrap(prototypes[name] + rng.uniform(-jitter, jitter))
    lengths = {n: BASE_LENGTHS[n] * rng.uniform(1 - LENGTH_JITTER, 1 + LENGTH_JITTER) for n in LIMB_NAMES}
    radii = dict(BASE_RADII)

    levels = rng.permutation(len(LIMB_NAMES))
    depth_offsets = {
        n: float(levels[i] * LEVEL_GAP + rng.uniform(0.0, LEVEL_JITTER)) for i, n in enumerate(LIMB_NAMES)
    }

    params = SceneParams(
        angles=angles, lengths=lengths, radii=radii, depth_offsets=depth_offsets,
        color_id=color_id, pose_class=pose_class, background_id=background_id,
        root=(0.0, 0.0),
    )
    # center the figure, then jitter within the free space
    x0, y0, x1, y1 = figure_extent(params)
    slack_x = max(0.0, (REFERENCE_RES - 2.0) - (x1 - x0))
    slack_y = max(0.0, (REFERENCE_RES - 2.0) - (y1 - y0))
    cx = 1.0 + rng.uniform(0.0, slack_x) - x0
    cy = 1.0 + rng.uniform(0.0, slack_y) - y0
    params.root = (float(cx), float(cy))
    return params


def _background(background_id: int, ys: np.ndarray, size: float) -> np.ndarray:
    top, bottom = (np.asarray(c, dtype=np.float64) for c in BACKGROUNDS[background_id])
    w = np.clip(ys / max(size, 1.0), 0.0, 1.0)[None]
    return top[:, None, None] * (1 - w) + bottom[:, None, None] * w


def shade(normal: np.ndarray, albedo) -> np.ndarray:
    """Lambertian shading with ambient term; normal [3, H, W] -> rgb01 [3, H, W]"""
    lambert = np.clip(np.tensordot(LIGHT_DIR, normal, axes=(0, 0)), 0.0, None)
    intensity = AMBIENT + (1.0 - AMBIENT) * lambert
    return np.asarray(albedo, dtype=np.float64)[:, None, None] * intensity[None]


def render_scene(p: SceneParams, R: int = REFERENCE_RES, margin: int = 0, crop_top: int = 0, crop_left: int = 0) -> ModalityBundle:
    """
    Render a scene at resolution R.

    With margin > 0 the scene is laid out on an (R + margin) canvas with the
    R-canvas centered in it, and the R x R window at (crop_top, crop_left)
    is returned. The size/crop tuple records (R + margin, R + margin,
    crop_top, crop_left).
    """
    if R < 16:
        raise InvalidRangeError("resolution must be >= 16", {"R": R})
    if margin < 0 or not (0 <= crop_top <= margin and 0 <= crop_left <= margin):
        raise InvalidRangeError(
            "crop offsets must lie within the margin",
            {"margin": margin, "crop_top": crop_top, "crop_left": crop_left},
        )
    scale = R / REFERENCE_RES
    x0, y0, x1, y1 = figure_extent(p)
    if x0 * scale < 0 or y0 * scale < 0 or x1 * scale > R or y1 * scale > R:
        raise RenderError(
            "figure exceeds the canvas",
            {"extent": [x0, y0, x1, y1], "reference_res": REFERENCE_RES},
        )

    shift = margin // 2
    ys = np.arange(R, dtype=np.float64)[:, None] + crop_top - shift + 0.5
    xs = np.arange(R, dtype=np.float64)[None, :] + crop_left - shift + 0.5
    ys = np.broadcast_to(ys, (R, R))
    xs = np.broadcast_to(xs, (R, R))

    pos = {k: v * scale for k, v in joint_positions(p).items()}
    normal = np.zeros((3, R, R), dtype=np.float64)
    normal[2] = 1.0
    inv_depth = np.zeros((R, R), dtype=np.float64)
    limb_ids = np.full((R, R), -1, dtype=np.int64)

    # painter's order: farthest first, nearer limbs overwrite
    order = sorted(range(len(LIMB_NAMES)), key=lambda i: -p.depth_offsets[LIMB_NAMES[i]])
    for i in order:
        name = LIMB_NAMES[i]
        if p.lengths[name] <= 0:
            continue
        j1, j2 = LIMBS[name]
        a, b = pos[j1], pos[j2]
        r = p.radii[name] * scale
        ab = b - a
        denom = float(ab @ ab)
        u = ((xs - a[0]) * ab[0] + (ys - a[1]) * ab[1]) / denom
        u = np.clip(u, 0.0, 1.0)
        dx = xs - (a[0] + u * ab[0])
        dy = ys - (a[1] + u * ab[1])
        dist2 = dx * dx + dy * dy
        inside = dist2 < r * r
        if not inside.any():
            continue
        nz = np.sqrt(np.clip(1.0 - dist2 / (r * r), 0.0, 1.0))
        z = 1.0 + p.depth_offsets[name] - BULGE * nz
        normal[0] = np.where(inside, dx / r, normal[0])
        normal[1] = np.where(inside, -dy / r, normal[1])
        normal[2] = np.where(inside, nz, normal[2])
        inv_depth = np.where(inside, (1.0 - BULGE) / z, inv_depth)
        limb_ids = np.where(inside, i, limb_ids)

    fg = limb_ids >= 0
    normal = normal / np.linalg.norm(normal, axis=0, keepdims=True)
    normal[:, ~fg] = np.array(SENTINEL_NORMAL)[:, None]

    rgb01 = _background(p.background_id, ys + shift, R + margin)
    lit = shade(normal, FIGURE_COLORS[p.color_id])
    rgb01 = np.where(fg[None], lit, rgb01)
    q = np.round(np.clip(rgb01, 0.0, 1.0) * 255.0)
    rgb = (q / 127.5 - 1.0).astype(np.float32)

    depth = (2.0 * inv_depth - 1.0)[None].astype(np.float32)

    keypoints = []
    for name in JOINTS:
        x = float(pos[name][0]) + shift - crop_left
        y = float(pos[name][1]) + shift - crop_top
        visible = 0.0 <= x < R and 0.0 <= y < R
        keypoints.append(Keypoint(x, y, bool(visible)))

    return ModalityBundle(
        rgb=rgb,
        depth=depth,
        normal=normal.astype(np.float32),
        keypoints=keypoints,
        attributes=p.attributes,
        limb_ids=limb_ids,
        sizecrop=(R + margin, R + margin, crop_top, crop_left),
        params=p,
    )


def limb_color(index: int) -> Tuple[int, int, int]:
    hue = int(round(360 * index / len(LIMB_NAMES)))
    return ImageColor.getrgb(f"hsl({hue}, 100%, 50%)")


LIMB_COLORS = {name: limb_color(i) for i, name in enumerate(LIMB_NAMES)}


def rasterize_skeleton(keypoints: List[Keypoint], R: int, limbs: Optional[List[str]] = None) -> np.ndarray:
    """
    Draw the skeleton as colored line segments, one fixed hue per limb.

    Limbs with an invisible endpoint are skipped. Output is float32
    [3, R, R] in [0, 1] with zero background.
    """
    img = Image.new("RGB", (R, R), (0, 0, 0))
    draw = ImageDraw.Draw(img)
    width = max(1, int(round(R / 24)))
    for name in limbs if limbs is not None else LIMB_NAMES:
        j1, j2 = LIMBS[name]
        k1, k2 = keypoints[JOINT_INDEX[j1]], keypoints[JOINT_INDEX[j2]]
        if not (k1.visible and k2.visible):
            continue
        # PIL pixel centers sit on integer coordinates
        draw.line([(k1.x - 0.5, k1.y - 0.5), (k2.x - 0.5, k2.y - 0.5)], fill=LIMB_COLORS[name], width=width)
    return (np.asarray(img, dtype=np.float32) / 255.0).transpose(2, 0, 1).copy()


def scale_keypoints(keypoints: List[Keypoint], factor: float, R: int) -> List[Keypoint]:
    out = []
    for k in keypoints:
        x, y = k.x * factor, k.y * factor
        out.append(Keypoint(x, y, bool(k.visible and 0.0 <= x < R and 0.0 <= y < R)))
    return out


def foreground_bbox(limb_ids: np.ndarray) -> Optional[Tuple[int, int, int, int]]:
    ys, xs = np.nonzero(limb_ids >= 0)
    if ys.size == 0:
        return None
    return (int(xs.min()), int(ys.min()), int(xs.max() - xs.min() + 1), int(ys.max() - ys.min() + 1))
