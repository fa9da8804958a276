"""Synthetic scene and dataset generation with complete tool trajectories.

Scenes are sampled as non-overlapping gravity-aligned boxes hovering above
the floor inside the first camera's frustum, plus orbit views looking at the
cluster.  Templates instantiate questions over those scenes together with the
canonical tool plan for their family; every stored tool result is produced by
the runtime itself, so replaying a sample is byte-identical and rescoring it
against its own ground truth yields a composite reward of exactly 1.

Generation is a pure function of (params, template mix, master seed): sample
seeds derive from the master seed by hashing, so records are independent of
generation order and parallelism.
"""

from __future__ import annotations

import hashlib
import json
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import geometry
from .geometry import CameraIntrinsics, OrientedBox3, Pose, obb_distance, project
from .runtime import ExecutionContext, TrajectoryRunError, cast_ray, execute_tool, run_trajectory
from .scene import ObjectNode, Scene
from .scenegraph import Relation, region_contains, spatial_relation
from .trajectory import (
    Answer,
    Choice,
    Matrix,
    Point2,
    Point3,
    Scalar,
    Text,
    Thought,
    ToolCall,
    ToolResult,
    Trajectory,
    Value,
    ValueList,
    format_number,
    parse_trajectory,
    parse_value,
    render_trajectory,
    render_value,
    validate_format,
)


class PlacementFailure(RuntimeError):
    pass


class InsufficientScene(RuntimeError):
    pass


class GenerationError(RuntimeError):
    pass


DEFAULT_LABELS = (
    "box",
    "chair",
    "table",
    "lamp",
    "monitor",
    "bottle",
    "book",
    "mug",
    "plant",
    "sofa",
    "cabinet",
    "toy",
    "bag",
    "printer",
    "basket",
    "stool",
)

FAMILIES = (
    "object_size",
    "inter_object_distance",
    "spatial_layout_mcq",
    "object_depth",
    "relative_camera_pose",
    "point_3d_target",
    "pixel_2d_target",
    "metric_offset_placement",
)

FAMILY_FORMATS = {
    "object_size": ("scalar",),
    "inter_object_distance": ("scalar",),
    "spatial_layout_mcq": ("choice",),
    "object_depth": ("scalar",),
    "relative_camera_pose": ("choice", "pose"),
    "point_3d_target": ("point3",),
    "pixel_2d_target": ("point2",),
    "metric_offset_placement": ("point3",),
}

FAMILY_CONFIGS = {
    "inter_object_distance": ("single_view", "multi_view"),
    "relative_camera_pose": ("multi_view",),
}


@dataclass(frozen=True)
class SceneParams:
    """Knobs for synthetic scene sampling."""

    object_count: tuple = (2, 5)
    view_count: tuple = (2, 4)
    labels: tuple = DEFAULT_LABELS
    room_extent: tuple = (2.4, 2.4, 1.2)
    orbit_radius: tuple = (1.6, 2.6)
    orbit_height: tuple = (0.3, 1.2)
    min_half_extent: float = 0.05
    max_half_extent: float = 0.24
    hover_range: tuple = (0.55, 1.1)
    placement_margin: float = 0.04
    max_attempts: int = 300
    intrinsics: tuple = (525.0, 525.0, 319.5, 239.5, 640, 480)

    def __post_init__(self):
        if not (1 <= self.object_count[0] <= self.object_count[1]):
            raise ValueError("object_count range is invalid")
        if not (1 <= self.view_count[0] <= self.view_count[1]):
            raise ValueError("view_count range is invalid")
        if self.object_count[1] > len(self.labels):
            raise ValueError("not enough labels for the object count")
        if any(x <= 0 for x in self.room_extent):
            raise ValueError("room extents must be positive")

    def to_dict(self) -> dict:
        return {
            "object_count": list(self.object_count),
            "view_count": list(self.view_count),
            "labels": list(self.labels),
            "room_extent": list(self.room_extent),
            "orbit_radius": list(self.orbit_radius),
            "orbit_height": list(self.orbit_height),
            "min_half_extent": self.min_half_extent,
            "max_half_extent": self.max_half_extent,
            "hover_range": list(self.hover_range),
            "placement_margin": self.placement_margin,
            "max_attempts": self.max_attempts,
            "intrinsics": list(self.intrinsics),
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "SceneParams":
        kwargs = {}
        for key, value in doc.items():
            if key not in cls.__dataclass_fields__:
                raise ValueError(f"unknown scene parameter {key!r}")
            kwargs[key] = tuple(value) if isinstance(value, list) else value
        return cls(**kwargs)


@dataclass(frozen=True)
class Template:
    family: str
    image_config: str = ""
    output_format: str = ""

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ValueError(f"unknown template family {self.family!r}")
        allowed = FAMILY_CONFIGS.get(self.family, ("single_view",))
        config = self.image_config or allowed[0]
        if config not in allowed:
            raise ValueError(
                f"{self.family} supports image configs {allowed}, not {config!r}"
            )
        fmt = self.output_format or FAMILY_FORMATS[self.family][0]
        if fmt not in FAMILY_FORMATS[self.family]:
            raise ValueError(
                f"{self.family} supports formats {FAMILY_FORMATS[self.family]}, not {fmt!r}"
            )
        object.__setattr__(self, "image_config", config)
        object.__setattr__(self, "output_format", fmt)


@dataclass
class Sample:
    """One dataset record: scene, question, ground-truth trajectory, answer."""

    id: int
    scene: Scene
    views: tuple
    question: str
    trajectory_text: str
    answer: Value
    format: str
    family: str
    seed: int

    def to_record(self) -> dict:
        return {
            "id": self.id,
            "scene": self.scene.to_dict(),
            "views": list(self.views),
            "question": self.question,
            "trajectory": self.trajectory_text,
            "answer": render_value(self.answer),
            "format": self.format,
            "family": self.family,
            "seed": self.seed,
        }

    @classmethod
    def from_record(cls, record: dict) -> "Sample":
        return cls(
            id=int(record["id"]),
            scene=Scene.from_dict(record["scene"]),
            views=tuple(record["views"]),
            question=record["question"],
            trajectory_text=record["trajectory"],
            answer=parse_value(record["answer"]),
            format=record["format"],
            family=record["family"],
            seed=int(record["seed"]),
        )


def derive_seed(master_seed: int, *path) -> int:
    """Splittable per-sample seed: hash of the master seed and an index path."""
    key = ":".join([str(master_seed)] + [str(p) for p in path])
    digest = hashlib.sha256(key.encode("ascii")).digest()
    return int.from_bytes(digest[:8], "big") >> 1


# ---------------------------------------------------------------------------
# Scene synthesis
# ---------------------------------------------------------------------------


def _look_at(center, target) -> Pose:
    """Camera-from-world pose at `center` looking toward `target` (+Y down)."""
    center = np.asarray(center, dtype=float)
    forward = np.asarray(target, dtype=float) - center
    norm = np.linalg.norm(forward)
    if norm < 1e-9:
        raise ValueError("camera center coincides with the look-at target")
    z = forward / norm
    lateral = np.cross(z, np.asarray(geometry.WORLD_UP))
    if np.linalg.norm(lateral) < 1e-9:
        lateral = np.array([1.0, 0.0, 0.0])
    x = lateral / np.linalg.norm(lateral)
    y = np.cross(z, x)
    rotation = np.stack([x, y, z])
    return Pose(rotation, -rotation @ center)


def _fov_lateral_cap(intr: CameraIntrinsics, z: float) -> float:
    # keep centers comfortably inside the view-0 frustum
    half_u = z * (intr.width / 2) / intr.fx
    half_v = z * (intr.height / 2) / intr.fy
    return 0.8 * min(half_u, half_v)


def _separated(a: OrientedBox3, b: OrientedBox3, margin: float) -> bool:
    # circumsphere bound first; exact distance only when inconclusive
    gap_bound = float(
        np.linalg.norm(np.asarray(a.center) - np.asarray(b.center))
    ) - (
        float(np.linalg.norm(a.half_extents)) + float(np.linalg.norm(b.half_extents))
    )
    if gap_bound > margin:
        return True
    return obb_distance(a, b) > margin


def generate_scene(params: SceneParams, seed: int) -> Scene:
    """Sample a non-overlapping, fully visible scene; deterministic per seed."""
    rng = np.random.default_rng(seed)
    fx, fy, cx, cy, width, height = params.intrinsics
    intr = CameraIntrinsics(fx, fy, cx, cy, int(width), int(height))

    n_objects = int(rng.integers(params.object_count[0], params.object_count[1] + 1))
    n_views = int(rng.integers(params.view_count[0], params.view_count[1] + 1))
    labels = [str(x) for x in rng.choice(params.labels, size=n_objects, replace=False)]

    for _ in range(params.max_attempts):
        boxes = []
        ok = True
        for _ in range(n_objects):
            placed = False
            for _ in range(params.max_attempts):
                half = rng.uniform(
                    params.min_half_extent, params.max_half_extent, size=3
                )
                zmin = rng.uniform(params.hover_range[0], params.hover_range[1])
                cz = zmin + half[2]
                cap = min(
                    _fov_lateral_cap(intr, max(cz, 1e-6)) - max(half[0], half[1]),
                    params.room_extent[0] / 2,
                    params.room_extent[1] / 2,
                )
                if cap <= 0:
                    continue
                cx_w = rng.uniform(-cap, cap)
                cy_w = rng.uniform(-cap, cap)
                if cz + half[2] > params.hover_range[1] + params.room_extent[2]:
                    continue
                box = OrientedBox3(
                    (cx_w, cy_w, cz),
                    tuple(half),
                    float(rng.uniform(-math.pi, math.pi)),
                )
                if all(
                    _separated(box, other, params.placement_margin) for other in boxes
                ):
                    boxes.append(box)
                    placed = True
                    break
            if not placed:
                ok = False
                break
        if not ok:
            continue

        objects = tuple(
            ObjectNode(id=i, label=labels[i], box3=boxes[i]) for i in range(n_objects)
        )
        pivot = np.mean([b.center for b in boxes], axis=0)
        views = [Pose.identity()]
        for _ in range(n_views - 1):
            azimuth = rng.uniform(0.0, 2.0 * math.pi)
            radius = rng.uniform(*params.orbit_radius)
            cam_z = pivot[2] + rng.uniform(*params.orbit_height)
            center = np.array(
                [
                    pivot[0] + radius * math.cos(azimuth),
                    pivot[1] + radius * math.sin(azimuth),
                    cam_z,
                ]
            )
            views.append(_look_at(center, pivot))

        scene = Scene(intr, views, objects, floor_z=0.0)
        if all(
            any(scene.project_box(obj, v) is not None for v in range(n_views))
            for obj in objects
        ):
            return scene
    raise PlacementFailure(f"could not place {n_objects} objects after retries")


# ---------------------------------------------------------------------------
# Question and thought phrase banks
# ---------------------------------------------------------------------------

QUESTION_BANK = {
    "object_size": (
        "What is the {dim} of the {label} in view {view}, in meters?",
        "Measure the {dim} of the {label} shown in view {view}.",
        "In view {view}, how large is the {label}? Report its {dim} in meters.",
    ),
    "inter_object_distance": (
        "What is the minimum distance between the {a} and the {b}?",
        "How far apart are the {a} and the {b} at their closest points, in meters?",
        "Compute the minimum separation between the {a} and the {b}.",
    ),
    "spatial_layout_mcq": (
        "In view {view}, is the {a} to the left or to the right of the {b}? (A) left (B) right",
        "Looking at view {view}: does the {a} sit left or right of the {b}? (A) left (B) right",
        "From the camera of view {view}, is the {a} on the left side or the right side of the {b}? (A) left (B) right",
    ),
    "object_depth": (
        "How far from the camera is the visible surface of the {label} at its image center in view {view}, in meters?",
        "In view {view}, what is the sensor depth at the center pixel of the {label}?",
        "Query the depth of the {label} at its projected center in view {view}, in meters.",
    ),
    "relative_camera_pose_choice": (
        "A static scene was captured from view {i} first and view {j} second. Did the camera move left or right around the objects? (A) left (B) right",
        "Between view {i} and view {j}, does the camera travel left or right about the scene? (A) left (B) right",
        "The camera moved from the pose of view {i} to the pose of view {j}. Choose its orbit direction: (A) left (B) right",
    ),
    "relative_camera_pose_pose": (
        "Give the 4x4 rigid transform mapping points from the camera frame of view {i} to the camera frame of view {j}.",
        "What is the relative pose of view {j} with respect to view {i}, as a 4x4 matrix?",
    ),
    "point_3d_target": (
        "Pick a point in the empty space {region} the {label} in view {view}. Answer with world-frame 3D coordinates in meters.",
        "Choose a free-space 3D point {region} the {label} (view {view}); give (x, y, z) in the world frame.",
        "Select a collision-free point {region} the {label} in view {view} and report it as world coordinates.",
    ),
    "pixel_2d_target": (
        "Pinpoint a point in the vacant space below the {label} in view {view}. Answer as a list of normalized image coordinates [(x, y)] with x and y between 0 and 1.",
        "Mark one point under the {label} in view {view}; reply with normalized pixel coordinates in [(x, y)] form.",
    ),
    "metric_offset_placement": (
        "Where should an object be placed so that it ends up {offset} m {dir} the {label} in view {view}? Give the world-frame 3D target point.",
        "Give the 3D world coordinates of the spot {offset} m {dir} the {label}, judged in view {view}.",
    ),
}

THOUGHT_BANK = {
    "object_size": (
        "I need the 3D box of the {label} before I can measure it.",
        "First retrieve the oriented box of the {label}, then read off the requested extent.",
    ),
    "inter_object_distance": (
        "I need both 3D boxes before I can measure the gap.",
        "Fetch the oriented boxes of the {a} and the {b}, then compute their minimum separation.",
    ),
    "spatial_layout_mcq": (
        "Get both 3D boxes and the camera pose, then compare horizontal camera-frame coordinates.",
        "With the two boxes and the extrinsics of view {view} I can compare their positions along the camera x axis.",
    ),
    "object_depth": (
        "Locate the {label} in view {view} and query the depth sensor at its center pixel.",
        "The depth sensor can answer this directly at the projected center of the {label}.",
    ),
    "relative_camera_pose": (
        "Retrieve the extrinsics of both views, then test the sideways displacement of the second camera in the first camera's frame.",
        "Compare the two camera poses: the sign of the lateral motion decides left versus right.",
    ),
    "point_3d_target": (
        "Get the 3D box of the {label}; then I can offset from it into free space.",
        "With the oriented box of the {label} I can construct a point {region} it.",
    ),
    "pixel_2d_target": (
        "Find the 3D box of the {label} and the camera pose, pick a point under the box, then project it back to the image.",
        "First the box and extrinsics; afterwards pick a point below the {label} and convert it to normalized pixels.",
    ),
    "metric_offset_placement": (
        "Get the box of the {label} and the extrinsics of view {view}; the target is a fixed metric offset along a camera axis.",
        "With the {label}'s box and the view pose I can place the target exactly {offset} m away.",
    ),
}

_SIZE_DIMS = (
    ("height", "2 * vec_get(obb_half(r1), 2)"),
    ("longest horizontal extent", "2 * max(vec_get(obb_half(r1), 0), vec_get(obb_half(r1), 1))"),
    ("shortest horizontal extent", "2 * min(vec_get(obb_half(r1), 0), vec_get(obb_half(r1), 1))"),
    (
        "longest dimension",
        "2 * max(max(vec_get(obb_half(r1), 0), vec_get(obb_half(r1), 1)), vec_get(obb_half(r1), 2))",
    ),
)

_REGION_PHRASES = {
    Relation.BELOW: "directly below",
    Relation.ABOVE: "directly above",
    Relation.LEFT_OF: "to the left of",
    Relation.RIGHT_OF: "to the right of",
}

_OFFSET_DIRS = {
    "right": "to the right of",
    "left": "to the left of",
    "behind": "behind",
    "front": "in front of",
    "above": "above",
}


def _pick(rng, items):
    return items[int(rng.integers(len(items)))]


# ---------------------------------------------------------------------------
# Template instantiation
# ---------------------------------------------------------------------------


def _int_scalar(x: int) -> Scalar:
    return Scalar(float(x))


def _call(name, **kwargs) -> ToolCall:
    return ToolCall(name, tuple(kwargs.items()))


def _uses(*names) -> ValueList:
    return ValueList(tuple(Text(n) for n in names))


def _visible_objects(scene: Scene, view: int):
    return [o for o in scene.objects if scene.project_box(o, view) is not None]


def _run_plan(scene: Scene, calls):
    ctx = ExecutionContext(scene, "oracle")
    results = []
    for k, call in enumerate(calls):
        value = execute_tool(ctx, call)
        ctx.bindings[f"r{k + 1}"] = value
        results.append(value)
    return results


def _assemble(thoughts, calls, results, answer_value, fmt) -> Trajectory:
    steps = [Thought(t) for t in thoughts[:1]]
    for call, result in zip(calls, results):
        steps.append(call)
        steps.append(ToolResult(result))
    for t in thoughts[1:]:
        steps.append(Thought(t))
    steps.append(Answer(answer_value, fmt))
    return Trajectory(tuple(steps))


def _shuffled(rng, items):
    items = list(items)
    order = rng.permutation(len(items))
    return [items[int(i)] for i in order]


def _box_call_checked(scene: Scene, view: int, obj: ObjectNode) -> ToolCall:
    """Label-addressed box lookup, verified to resolve to the intended object."""
    call = _call("box_2d_to_box_3d", view=_int_scalar(view), label=Text(obj.label))
    value = execute_tool(ExecutionContext(scene, "oracle"), call)
    if value.box != obj.box3:
        raise InsufficientScene(f"{obj.label} is occluded in view {view}")
    return call


def _build_object_size(scene, rng, template):
    for view in _shuffled(rng, range(len(scene.views))):
        visible = _visible_objects(scene, view)
        if not visible:
            continue
        obj = _pick(rng, visible)
        try:
            box_call = _box_call_checked(scene, view, obj)
        except InsufficientScene:
            continue
        dim, program = _SIZE_DIMS[int(rng.integers(len(_SIZE_DIMS)))]
        calls = [
            box_call,
            _call("code_executor", program=Text(program), uses=_uses("r1")),
        ]
        results = _run_plan(scene, calls)
        answer = Scalar(results[-1].value, "m")
        question = _pick(rng, QUESTION_BANK["object_size"]).format(
            dim=dim, label=obj.label, view=view
        )
        thought = _pick(rng, THOUGHT_BANK["object_size"]).format(label=obj.label)
        return question, [thought], calls, results, answer, (view,)
    raise InsufficientScene("no visible object for a size question")


def _build_inter_object_distance(scene, rng, template):
    if len(scene.objects) < 2:
        raise InsufficientScene("need two objects for a distance question")
    multi = template.image_config == "multi_view" and len(scene.views) >= 2
    for view_a in _shuffled(rng, range(len(scene.views))):
        view_b = view_a
        if multi:
            others = [v for v in range(len(scene.views)) if v != view_a]
            if not others:
                continue
            view_b = _pick(rng, others)
        pairs = [
            (a, b)
            for a in _visible_objects(scene, view_a)
            for b in _visible_objects(scene, view_b)
            if a.id != b.id
        ]
        if not pairs:
            continue
        a, b = _pick(rng, pairs)
        try:
            call_a = _box_call_checked(scene, view_a, a)
            call_b = _box_call_checked(scene, view_b, b)
        except InsufficientScene:
            continue
        calls = [
            call_a,
            call_b,
            _call(
                "code_executor",
                program=Text("obb_dist(r1, r2)"),
                uses=_uses("r1", "r2"),
            ),
        ]
        results = _run_plan(scene, calls)
        answer = Scalar(results[-1].value, "m")
        question = _pick(rng, QUESTION_BANK["inter_object_distance"]).format(
            a=a.label, b=b.label
        )
        thought = _pick(rng, THOUGHT_BANK["inter_object_distance"]).format(
            a=a.label, b=b.label
        )
        views = (view_a,) if view_a == view_b else tuple(sorted({view_a, view_b}))
        return question, [thought], calls, results, answer, views
    raise InsufficientScene("no visible object pair for a distance question")


_LAYOUT_PROGRAM = (
    "let pa = obb_center(r1); let pb = obb_center(r2); "
    "let qa = matmul(r3, vec(vec_get(pa, 0), vec_get(pa, 1), vec_get(pa, 2), 1)); "
    "let qb = matmul(r3, vec(vec_get(pb, 0), vec_get(pb, 1), vec_get(pb, 2), 1)); "
    "sign(vec_get(qb, 0) - vec_get(qa, 0))"
)


def _build_spatial_layout_mcq(scene, rng, template):
    if len(scene.objects) < 2:
        raise InsufficientScene("need two objects for a layout question")
    for view in _shuffled(rng, range(len(scene.views))):
        pose = scene.views[view]
        visible = _visible_objects(scene, view)
        pairs = [
            (a, b)
            for a in visible
            for b in visible
            if a.id != b.id
            and (
                spatial_relation(a.box3, b.box3, pose, Relation.LEFT_OF)
                or spatial_relation(a.box3, b.box3, pose, Relation.RIGHT_OF)
            )
        ]
        if not pairs:
            continue
        a, b = _pick(rng, pairs)
        try:
            call_a = _box_call_checked(scene, view, a)
            call_b = _box_call_checked(scene, view, b)
        except InsufficientScene:
            continue
        calls = [
            call_a,
            call_b,
            _call("camera_extrinsics", view=_int_scalar(view)),
            _call(
                "code_executor",
                program=Text(_LAYOUT_PROGRAM),
                uses=_uses("r1", "r2", "r3"),
            ),
        ]
        results = _run_plan(scene, calls)
        sign = results[-1].value
        if sign == 0.0:
            continue
        answer = Choice("A" if sign > 0 else "B")
        left_holds = spatial_relation(a.box3, b.box3, pose, Relation.LEFT_OF)
        if (sign > 0) != left_holds:
            raise AssertionError("layout sign disagrees with the relation predicate")
        question = _pick(rng, QUESTION_BANK["spatial_layout_mcq"]).format(
            a=a.label, b=b.label, view=view
        )
        thought = _pick(rng, THOUGHT_BANK["spatial_layout_mcq"]).format(view=view)
        return question, [thought], calls, results, answer, (view,)
    raise InsufficientScene("no laterally separated pair in any view")


def _build_object_depth(scene, rng, template):
    for view in _shuffled(rng, range(len(scene.views))):
        for obj in _shuffled(rng, _visible_objects(scene, view)):
            try:
                ip = project(obj.box3.center, scene.intrinsics, scene.views[view])
            except geometry.BehindCamera:
                continue
            if not ip.inside():
                continue
            hit = cast_ray(scene, view, ip.u, ip.v)
            if hit is None or hit.owner != obj.id:
                continue  # center pixel occluded by another surface
            point = Point2(ip.u_norm, ip.v_norm, pixel=False)
            calls = [
                _call("depth_sensor", view=_int_scalar(view), point=point)
            ]
            results = _run_plan(scene, calls)
            answer = Scalar(results[-1].value, "m")
            question = _pick(rng, QUESTION_BANK["object_depth"]).format(
                label=obj.label, view=view
            )
            thought = _pick(rng, THOUGHT_BANK["object_depth"]).format(
                label=obj.label, view=view
            )
            return question, [thought], calls, results, answer, (view,)
    raise InsufficientScene("no object with an unoccluded center pixel")


_CAMERA_CENTER_PROGRAM = (
    "let w1 = inv_pose(r1); let w2 = inv_pose(r2); "
    "let c1 = vec(mat_get(w1, 0, 3), mat_get(w1, 1, 3), mat_get(w1, 2, 3)); "
    "let c2 = vec(mat_get(w2, 0, 3), mat_get(w2, 1, 3), mat_get(w2, 2, 3)); "
    "let xaxis = vec(mat_get(r1, 0, 0), mat_get(r1, 0, 1), mat_get(r1, 0, 2)); "
    "sign(dot(xaxis, c2 - c1))"
)

_RELATIVE_POSE_PROGRAM = "matmul(r2, inv_pose(r1))"


def _build_relative_camera_pose(scene, rng, template):
    if len(scene.views) < 2:
        raise InsufficientScene("need two views for a camera-motion question")
    pivot = np.mean([o.box3.center for o in scene.objects], axis=0)
    pairs = [
        (i, j)
        for i in range(len(scene.views))
        for j in range(len(scene.views))
        if i != j
    ]
    for i, j in _shuffled(rng, pairs):
        try:
            direction, angle = geometry.relative_camera_motion(
                scene.views[i], scene.views[j], pivot
            )
        except geometry.DegeneratePivot:
            continue
        if not (0.05 <= abs(angle) <= math.pi - 0.05):
            continue
        calls = [
            _call("camera_extrinsics", view=_int_scalar(i)),
            _call("camera_extrinsics", view=_int_scalar(j)),
        ]
        if template.output_format == "choice":
            calls.append(
                _call(
                    "code_executor",
                    program=Text(_CAMERA_CENTER_PROGRAM),
                    uses=_uses("r1", "r2"),
                )
            )
            results = _run_plan(scene, calls)
            sign = results[-1].value
            if sign == 0.0:
                continue
            moved_right = sign > 0
            if moved_right != (direction is geometry.OrbitDirection.RIGHT):
                # 0-to-orbit pairs can put the pivot off the first camera's
                # axis; only emit pairs where the trace's lateral test and the
                # orbit ground truth agree.
                continue
            answer = Choice("B" if moved_right else "A")
            question = _pick(rng, QUESTION_BANK["relative_camera_pose_choice"]).format(
                i=i, j=j
            )
        else:
            calls.append(
                _call(
                    "code_executor",
                    program=Text(_RELATIVE_POSE_PROGRAM),
                    uses=_uses("r1", "r2"),
                )
            )
            results = _run_plan(scene, calls)
            answer = results[-1]
            question = _pick(rng, QUESTION_BANK["relative_camera_pose_pose"]).format(
                i=i, j=j
            )
        thought = _pick(rng, THOUGHT_BANK["relative_camera_pose"])
        return question, [thought], calls, results, answer, (i, j)
    raise InsufficientScene("no view pair with a clean orbit angle")


def _axis_row_expr(binding: str, row: int) -> str:
    return (
        f"vec(mat_get({binding}, {row}, 0), "
        f"mat_get({binding}, {row}, 1), mat_get({binding}, {row}, 2))"
    )


def _sample_world_offset(rng, scene, obj, region, clearance):
    """Literal world-frame offset from the box center into the region, or None."""
    box = obj.box3
    hx, hy, hz = box.half_extents
    if region is Relation.BELOW:
        slack = box.zmin - scene.floor_z - clearance - 0.02
        if slack <= 0:
            return None
        dz = hz + clearance + rng.uniform(0.0, min(slack, 0.3))
        return (
            float(rng.uniform(-0.4, 0.4) * hx),
            float(rng.uniform(-0.4, 0.4) * hy),
            float(-dz),
        )
    if region is Relation.ABOVE:
        dz = hz + clearance + rng.uniform(0.0, 0.3)
        return (
            float(rng.uniform(-0.4, 0.4) * hx),
            float(rng.uniform(-0.4, 0.4) * hy),
            float(dz),
        )
    return None


def _offset_program(offset) -> str:
    ox, oy, oz = (format_number(x) for x in offset)
    return f"obb_center(r1) + vec({ox}, {oy}, {oz})"


def _axis_offset_program(sign: float, magnitude: float, e_binding: str, row: int) -> str:
    lead = format_number(sign * magnitude)
    return f"obb_center(r1) + {lead} * {_axis_row_expr(e_binding, row)}"


def _region_ok(scene, view, obj, region, point, clearance) -> bool:
    return region_contains(
        np.asarray(point), obj.box3, region, scene.views[view], clearance, scene.floor_z
    )


def _build_point_3d_target(scene, rng, template):
    clearance = 0.05
    regions = (Relation.BELOW, Relation.ABOVE, Relation.LEFT_OF, Relation.RIGHT_OF)
    for view in _shuffled(rng, range(len(scene.views))):
        for obj in _shuffled(rng, _visible_objects(scene, view)):
            try:
                box_call = _box_call_checked(scene, view, obj)
            except InsufficientScene:
                continue
            for region in _shuffled(rng, regions):
                for _ in range(8):
                    if region in (Relation.BELOW, Relation.ABOVE):
                        offset = _sample_world_offset(rng, scene, obj, region, clearance)
                        if offset is None:
                            break
                        program = _offset_program(offset)
                        calls = [
                            box_call,
                            _call(
                                "code_executor",
                                program=Text(program),
                                uses=_uses("r1"),
                            ),
                        ]
                    else:
                        axis_world = scene.views[view].rotation.T[:, 0]
                        half_proj = geometry.project_half_extent(obj.box3, axis_world)
                        magnitude = half_proj + clearance + 0.02 + rng.uniform(0.02, 0.25)
                        sign = -1.0 if region is Relation.LEFT_OF else 1.0
                        program = _axis_offset_program(sign, magnitude, "r2", 0)
                        calls = [
                            box_call,
                            _call("camera_extrinsics", view=_int_scalar(view)),
                            _call(
                                "code_executor",
                                program=Text(program),
                                uses=_uses("r1", "r2"),
                            ),
                        ]
                    results = _run_plan(scene, calls)
                    point = results[-1]
                    if not isinstance(point, Point3):
                        raise AssertionError("point program must yield a 3D point")
                    if not _region_ok(
                        scene, view, obj, region, (point.x, point.y, point.z), clearance
                    ):
                        continue
                    question = _pick(rng, QUESTION_BANK["point_3d_target"]).format(
                        region=_REGION_PHRASES[region], label=obj.label, view=view
                    )
                    thought = _pick(rng, THOUGHT_BANK["point_3d_target"]).format(
                        label=obj.label, region=_REGION_PHRASES[region]
                    )
                    return question, [thought], calls, results, point, (view,)
    raise InsufficientScene("no feasible free-space region")


def _build_pixel_2d_target(scene, rng, template):
    clearance = 0.05
    for view in _shuffled(rng, range(len(scene.views))):
        for obj in _shuffled(rng, _visible_objects(scene, view)):
            try:
                box_call = _box_call_checked(scene, view, obj)
            except InsufficientScene:
                continue
            for _ in range(12):
                offset = _sample_world_offset(rng, scene, obj, Relation.BELOW, clearance)
                if offset is None:
                    break
                program = _offset_program(offset)
                head = [
                    box_call,
                    _call("camera_extrinsics", view=_int_scalar(view)),
                    _call("code_executor", program=Text(program), uses=_uses("r1")),
                ]
                head_results = _run_plan(scene, head)
                point = head_results[-1]
                if not _region_ok(
                    scene, view, obj, Relation.BELOW, (point.x, point.y, point.z), clearance
                ):
                    continue
                try:
                    ip = project(
                        (point.x, point.y, point.z), scene.intrinsics, scene.views[view]
                    )
                except geometry.BehindCamera:
                    continue
                if not ip.inside():
                    continue
                calls = head + [
                    _call("point_3d_to_point_2d", view=_int_scalar(view), point=point)
                ]
                results = _run_plan(scene, calls)
                answer = ValueList((results[-1],))
                question = _pick(rng, QUESTION_BANK["pixel_2d_target"]).format(
                    label=obj.label, view=view
                )
                thought = _pick(rng, THOUGHT_BANK["pixel_2d_target"]).format(
                    label=obj.label
                )
                return question, [thought], calls, results, answer, (view,)
    raise InsufficientScene("no below-region point projects into the image")


def _build_metric_offset_placement(scene, rng, template):
    offsets = (0.1, 0.15, 0.2)
    for view in _shuffled(rng, range(len(scene.views))):
        for obj in _shuffled(rng, _visible_objects(scene, view)):
            try:
                box_call = _box_call_checked(scene, view, obj)
            except InsufficientScene:
                continue
            direction = _pick(rng, tuple(_OFFSET_DIRS))
            offset = float(_pick(rng, offsets))
            if direction == "above":
                program = _offset_program((0.0, 0.0, offset))
            else:
                row = 0 if direction in ("right", "left") else 2
                sign = -1.0 if direction in ("left", "front") else 1.0
                program = _axis_offset_program(sign, offset, "r2", row)
            calls = [
                box_call,
                _call("camera_extrinsics", view=_int_scalar(view)),
                _call("code_executor", program=Text(program), uses=_uses("r1", "r2")),
            ]
            results = _run_plan(scene, calls)
            point = results[-1]
            if point.z <= scene.floor_z:
                continue
            question = _pick(rng, QUESTION_BANK["metric_offset_placement"]).format(
                offset=format_number(offset),
                dir=_OFFSET_DIRS[direction],
                label=obj.label,
                view=view,
            )
            thought = _pick(rng, THOUGHT_BANK["metric_offset_placement"]).format(
                label=obj.label, view=view, offset=format_number(offset)
            )
            return question, [thought], calls, results, point, (view,)
    raise InsufficientScene("no visible object for a placement question")


_BUILDERS = {
    "object_size": _build_object_size,
    "inter_object_distance": _build_inter_object_distance,
    "spatial_layout_mcq": _build_spatial_layout_mcq,
    "object_depth": _build_object_depth,
    "relative_camera_pose": _build_relative_camera_pose,
    "point_3d_target": _build_point_3d_target,
    "pixel_2d_target": _build_pixel_2d_target,
    "metric_offset_placement": _build_metric_offset_placement,
}


def instantiate(template: Template, scene: Scene, seed: int, sample_id: int = 0) -> Sample:
    """Build one sample with a fully filled ground-truth trajectory."""
    rng = np.random.default_rng(seed)
    question, thoughts, calls, results, answer, views = _BUILDERS[template.family](
        scene, rng, template
    )
    trajectory = _assemble(thoughts, calls, results, answer, template.output_format)
    text = render_trajectory(trajectory)
    sample = Sample(
        id=sample_id,
        scene=scene,
        views=tuple(views),
        question=question,
        trajectory_text=text,
        answer=answer,
        format=template.output_format,
        family=template.family,
        seed=seed,
    )
    if not self_check(sample):
        raise GenerationError(f"generated sample failed self-check (seed {seed})")
    return sample


def self_check(sample: Sample) -> bool:
    """Replay-and-consistency audit: format, byte-identical replay, answer match."""
    try:
        trajectory = parse_trajectory(sample.trajectory_text)
    except ValueError:
        return False
    if not validate_format(trajectory):
        return False
    try:
        replayed = run_trajectory(ExecutionContext(sample.scene, "oracle"), trajectory)
    except TrajectoryRunError:
        return False
    if render_trajectory(replayed) != sample.trajectory_text:
        return False
    answer = trajectory.answer
    if answer is None or answer.format != sample.format:
        return False
    return answer.value == sample.answer


# ---------------------------------------------------------------------------
# Dataset assembly
# ---------------------------------------------------------------------------


def allocate_counts(mix: dict, count: int) -> dict:
    """Largest-remainder allocation of sample counts to families."""
    for family in mix:
        if family not in FAMILIES:
            raise ValueError(f"unknown family {family!r} in mix")
    if any(r < 0 for r in mix.values()):
        raise ValueError("mix ratios must be non-negative")
    if abs(math.fsum(mix.values()) - 1.0) > 1e-9:
        raise ValueError("mix ratios must sum to 1")
    families = [f for f in FAMILIES if mix.get(f, 0) > 0]
    exact = {f: mix[f] * count for f in families}
    counts = {f: int(math.floor(exact[f])) for f in families}
    leftover = count - sum(counts.values())
    by_remainder = sorted(
        families, key=lambda f: (-(exact[f] - counts[f]), FAMILIES.index(f))
    )
    for f in by_remainder[:leftover]:
        counts[f] += 1
    return counts


DEFAULT_MIX = {f: 1.0 / len(FAMILIES) for f in FAMILIES}

_FAMILY_MIN_VIEWS = {"relative_camera_pose": 2}
_FAMILY_MIN_OBJECTS = {"inter_object_distance": 2, "spatial_layout_mcq": 2}


def check_mix_feasible(params: SceneParams, mix: dict) -> None:
    """Reject mixes whose families can never be satisfied by the params."""
    for family, ratio in mix.items():
        if ratio <= 0:
            continue
        need_views = _FAMILY_MIN_VIEWS.get(family, 1)
        if params.view_count[1] < need_views:
            raise ValueError(
                f"{family} needs at least {need_views} views; params allow "
                f"at most {params.view_count[1]}"
            )
        need_objects = _FAMILY_MIN_OBJECTS.get(family, 1)
        if params.object_count[1] < need_objects:
            raise ValueError(
                f"{family} needs at least {need_objects} objects; params allow "
                f"at most {params.object_count[1]}"
            )


_RETRY_BUDGET = 40


def _template_for(family: str, rng) -> Template:
    image_config = "single_view"
    if family == "relative_camera_pose":
        image_config = "multi_view"
    elif family == "inter_object_distance" and rng.random() < 0.3:
        image_config = "multi_view"
    output_format = FAMILY_FORMATS[family][0]
    if family == "relative_camera_pose" and rng.random() < 0.25:
        output_format = "pose"
    return Template(family, image_config, output_format)


def build_record(params: SceneParams, family: str, index: int, master_seed: int) -> str:
    """Generate the JSON line for one sample index; retries with fresh seeds."""
    last_error = None
    for attempt in range(_RETRY_BUDGET):
        seed = derive_seed(master_seed, index, attempt)
        try:
            scene = generate_scene(params, seed)
            template = _template_for(family, np.random.default_rng(seed))
            sample = instantiate(template, scene, seed, sample_id=index)
        except (PlacementFailure, InsufficientScene) as exc:
            last_error = exc
            continue
        return json.dumps(sample.to_record())
    raise GenerationError(
        f"sample {index} ({family}) failed after {_RETRY_BUDGET} attempts: {last_error}"
    )


def _build_record_star(args) -> str:
    return build_record(*args)


def generate_records(
    params: SceneParams,
    mix: dict,
    count: int,
    master_seed: int,
    jobs: int = 1,
):
    """All dataset lines in index order; independent of the parallelism degree."""
    if count < 1:
        raise ValueError("count must be at least 1")
    check_mix_feasible(params, mix)
    counts = allocate_counts(mix, count)
    assignments = []
    for family in FAMILIES:
        assignments.extend([family] * counts.get(family, 0))
    tasks = [
        (params, family, index, master_seed)
        for index, family in enumerate(assignments)
    ]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            return list(pool.map(_build_record_star, tasks, chunksize=8)), counts
    return [_build_record_star(t) for t in tasks], counts


def generate_dataset(
    params: SceneParams,
    mix: dict,
    count: int,
    master_seed: int,
    out_path,
    jobs: int = 1,
) -> dict:
    """Write the dataset file plus its manifest; returns the manifest."""
    lines, counts = generate_records(params, mix, count, master_seed, jobs=jobs)
    payload = "".join(line + "\n" for line in lines)
    data = payload.encode("utf-8")
    with open(out_path, "wb") as f:
        f.write(data)
    manifest = {
        "params": params.to_dict(),
        "mix": {k: mix[k] for k in sorted(mix)},
        "count": count,
        "master_seed": master_seed,
        "family_counts": {k: counts[k] for k in sorted(counts)},
        "digest": "sha256:" + hashlib.sha256(data).hexdigest(),
    }
    manifest_path = str(out_path) + ".manifest.json"
    with open(manifest_path, "w", encoding="utf-8") as f:
        json.dump(manifest, f, indent=2)
        f.write("\n")
    return manifest


def regenerate_from_manifest(manifest: dict, jobs: int = 1) -> bytes:
    """Rebuild the exact dataset bytes a manifest describes."""
    params = SceneParams.from_dict(manifest["params"])
    lines, _ = generate_records(
        params, manifest["mix"], manifest["count"], manifest["master_seed"], jobs=jobs
    )
    return "".join(line + "\n" for line in lines).encode("utf-8")
