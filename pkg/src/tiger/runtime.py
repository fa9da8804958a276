"""Registry and ground-truth-backed executor for the geometric tool suite.

Tools run against a Scene in simulated-sensor mode: depth comes from analytic
nearest-hit ray casting over all oriented boxes plus the floor plane, masks
from per-pixel hit ownership, and 3D boxes either straight from ground truth
(oracle mode) or fitted to unprojected masked depth points (fitted mode).
Execution is deterministic given (scene, mode, trajectory).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import geometry, minidsl
from .geometry import OrientedBox3, fit_obb, invert, project, transform
from .scene import Scene, UnknownView
from .trajectory import (
    Box2Value,
    Matrix,
    ObbValue,
    Point2,
    Point3,
    Scalar,
    Text,
    ToolCall,
    ToolResult,
    Trajectory,
    Value,
    ValueList,
)


class ToolError(ValueError):
    pass


class UnknownTool(ToolError):
    pass


class SchemaError(ToolError):
    pass


class EmptyRegion(ToolError):
    pass


class TrajectoryRunError(ToolError):
    """A tool failure during replay, reported with its step index."""

    def __init__(self, step_index: int, cause: Exception):
        super().__init__(f"step {step_index}: {cause}")
        self.step_index = step_index
        self.cause = cause


@dataclass(frozen=True)
class ToolParam:
    name: str
    kind: str  # int | number | point2 | point3 | box2 | string | program | string_list
    required: bool = True
    discrete: bool = False


@dataclass(frozen=True)
class ToolSpec:
    name: str
    params: tuple
    # groups of parameter names of which exactly one must be present
    one_of: tuple = ()

    def param(self, name: str):
        for p in self.params:
            if p.name == name:
                return p
        return None


REGISTRY = {
    spec.name: spec
    for spec in (
        ToolSpec(
            "camera_intrinsics",
            (ToolParam("view", "int", discrete=True),),
        ),
        ToolSpec(
            "camera_extrinsics",
            (ToolParam("view", "int", discrete=True),),
        ),
        ToolSpec(
            "depth_sensor",
            (
                ToolParam("view", "int", discrete=True),
                ToolParam("point", "point2", required=False),
                ToolParam("box", "box2", required=False),
            ),
            one_of=(("point", "box"),),
        ),
        ToolSpec(
            "object_segmentation",
            (
                ToolParam("view", "int", discrete=True),
                ToolParam("box", "box2", required=False),
                ToolParam("label", "string", required=False, discrete=True),
            ),
            one_of=(("box", "label"),),
        ),
        ToolSpec(
            "box_2d_to_box_3d",
            (
                ToolParam("view", "int", discrete=True),
                ToolParam("box", "box2", required=False),
                ToolParam("label", "string", required=False, discrete=True),
            ),
            one_of=(("box", "label"),),
        ),
        ToolSpec(
            "point_3d_to_point_2d",
            (
                ToolParam("view", "int", discrete=True),
                ToolParam("point", "point3"),
            ),
        ),
        ToolSpec(
            "code_executor",
            (
                ToolParam("program", "program", discrete=True),
                ToolParam("uses", "string_list", required=False, discrete=True),
            ),
        ),
    )
}

TOOL_NAMES = tuple(sorted(REGISTRY))


@dataclass(frozen=True)
class RayHit:
    """Nearest-hit result of one camera ray: z-depth plus the hit owner."""

    depth: float
    owner: object  # object id (int) or "floor"

    def __post_init__(self):
        if not self.depth > 0:
            raise ValueError("hit depth must be positive")


@dataclass
class ExecutionContext:
    """One run's state: the immutable scene plus accumulated result bindings."""

    scene: Scene
    mode: str = "oracle"
    bindings: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.mode not in ("oracle", "fitted"):
            raise ValueError("mode must be 'oracle' or 'fitted'")


# ---------------------------------------------------------------------------
# Schema validation
# ---------------------------------------------------------------------------


def _kind_ok(kind: str, value: Value) -> bool:
    if kind == "int":
        return isinstance(value, Scalar) and not value.unit and value.value == int(value.value)
    if kind == "number":
        return isinstance(value, Scalar)
    if kind == "point2":
        return isinstance(value, Point2) and not value.pixel
    if kind == "point3":
        return isinstance(value, Point3)
    if kind == "box2":
        return isinstance(value, Box2Value)
    if kind in ("string", "program"):
        return isinstance(value, Text)
    if kind == "string_list":
        return isinstance(value, ValueList) and all(
            isinstance(x, Text) for x in value.items
        )
    raise AssertionError(kind)


def check_call(call: ToolCall):
    """Validate tool name and argument structure; scene-independent.

    Returns None when the call is schema-valid, else a message.
    """
    spec = REGISTRY.get(call.name)
    if spec is None:
        return f"unknown tool {call.name!r}"
    seen = set()
    for key, value in call.args:
        if key in seen:
            return f"duplicate argument {key!r}"
        seen.add(key)
        param = spec.param(key)
        if param is None:
            return f"unexpected argument {key!r}"
        if not _kind_ok(param.kind, value):
            return f"argument {key!r} has the wrong type"
    for param in spec.params:
        if param.required and param.name not in seen:
            return f"missing required argument {param.name!r}"
    for group in spec.one_of:
        present = [name for name in group if name in seen]
        if len(present) != 1:
            return f"exactly one of {group} must be given"
    return None


# ---------------------------------------------------------------------------
# Analytic depth: nearest-hit ray casting
# ---------------------------------------------------------------------------

_EPS = 1e-9
FLOOR = "floor"


def _ray_box_params(origin, dirs, box: OrientedBox3):
    """Slab-method entry parameter for rays against one oriented box.

    Rays are origin + t * dirs with t equal to camera z-depth; returns inf
    where the ray misses.
    """
    rot = box.rotation()
    o_local = (origin - np.asarray(box.center)) @ rot
    d_local = dirs @ rot
    h = np.asarray(box.half_extents)
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / d_local
        t1 = (-h - o_local) * inv
        t2 = (h - o_local) * inv
    # 0 * inf produces NaN exactly when the origin sits on a slab boundary
    # of an axis-parallel ray; treat that as inside the slab.
    t1 = np.where(np.isnan(t1), -np.inf, t1)
    t2 = np.where(np.isnan(t2), np.inf, t2)
    low = np.minimum(t1, t2).max(axis=-1)
    high = np.maximum(t1, t2).min(axis=-1)
    t = np.where(low > _EPS, low, high)
    hit = (high >= low) & (high > _EPS) & (t > _EPS)
    return np.where(hit, t, np.inf)


def cast_rays(scene: Scene, view: int, u, v):
    """Cast pixel rays; returns (depths, owners) arrays.

    depths hold camera z-depth of the nearest hit (inf where nothing is hit);
    owners hold the object index into scene.objects, -2 for the floor, and
    -1 for no hit.
    """
    pose = scene.pose(view)
    k = scene.intrinsics
    u = np.atleast_1d(np.asarray(u, dtype=float))
    v = np.atleast_1d(np.asarray(v, dtype=float))
    d_cam = np.stack(
        [(u - k.cx) / k.fx, (v - k.cy) / k.fy, np.ones_like(u)], axis=-1
    )
    origin = pose.center()
    dirs = d_cam @ pose.rotation  # rows transformed by R^T
    best = np.full(u.shape, np.inf)
    owner = np.full(u.shape, -1, dtype=int)
    for idx, obj in enumerate(scene.objects):
        t = _ray_box_params(origin, dirs, obj.box3)
        closer = t < best
        best = np.where(closer, t, best)
        owner = np.where(closer, idx, owner)
    dz = dirs[..., 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        t_floor = (scene.floor_z - origin[2]) / dz
    t_floor = np.where(
        (np.abs(dz) > _EPS) & (t_floor > _EPS), t_floor, np.inf
    )
    closer = t_floor < best
    best = np.where(closer, t_floor, best)
    owner = np.where(closer, -2, owner)
    return best, owner


def cast_ray(scene: Scene, view: int, u: float, v: float):
    """Nearest hit of a single pixel ray, or None when nothing is hit."""
    depths, owners = cast_rays(scene, view, [u], [v])
    if not math.isfinite(depths[0]):
        return None
    owner = FLOOR if owners[0] == -2 else scene.objects[owners[0]].id
    return RayHit(float(depths[0]), owner)


def render_depth_map(scene: Scene, view: int) -> geometry.DepthMap:
    """Full-image analytic depth for one view; misses encode as zero."""
    k = scene.intrinsics
    ii, jj = np.meshgrid(np.arange(k.width), np.arange(k.height))
    depths, _ = cast_rays(scene, view, ii + 0.5, jj + 0.5)
    return geometry.DepthMap(
        k.width, k.height, np.where(np.isfinite(depths), depths, 0.0)
    )


def _pixel_grid(box: geometry.Box2, width: int, height: int, max_per_axis=None):
    """Integer pixel centers covered by a 2D box, clipped to the image.

    With max_per_axis set, rows and columns are subsampled by a deterministic
    integer stride so neither axis exceeds that many samples.
    """
    i0 = max(int(math.ceil(box.umin - 0.5)), 0)
    i1 = min(int(math.floor(box.umax - 0.5)), width - 1)
    j0 = max(int(math.ceil(box.vmin - 0.5)), 0)
    j1 = min(int(math.floor(box.vmax - 0.5)), height - 1)
    if i0 > i1 or j0 > j1:
        return None
    step_i = step_j = 1
    if max_per_axis is not None:
        step_i = max(1, -(-(i1 - i0 + 1) // max_per_axis))
        step_j = max(1, -(-(j1 - j0 + 1) // max_per_axis))
    ii, jj = np.meshgrid(
        np.arange(i0, i1 + 1, step_i), np.arange(j0, j1 + 1, step_j)
    )
    return i0, j0, ii, jj


# ---------------------------------------------------------------------------
# Tool implementations
# ---------------------------------------------------------------------------


def _require_view(ctx: ExecutionContext, call: ToolCall) -> int:
    view = int(call.arg("view").value)
    ctx.scene.pose(view)  # raises UnknownView
    return view


def _resolve_box2(ctx: ExecutionContext, call: ToolCall, view: int) -> geometry.Box2:
    box_arg = call.arg("box")
    if box_arg is not None:
        return box_arg.box
    label = call.arg("label").text
    matches = ctx.scene.objects_by_label(label)
    if len(matches) != 1:
        raise SchemaError(f"label {label!r} matches {len(matches)} objects")
    box2 = ctx.scene.project_box(matches[0], view)
    if box2 is None:
        raise EmptyRegion(f"object {label!r} is not visible in view {view}")
    return box2


def _grid_hits(ctx, view, box2, max_per_axis=None):
    grid = _pixel_grid(
        box2,
        ctx.scene.intrinsics.width,
        ctx.scene.intrinsics.height,
        max_per_axis=max_per_axis,
    )
    if grid is None:
        raise EmptyRegion("2D box covers no pixels")
    i0, j0, ii, jj = grid
    depths, owners = cast_rays(ctx.scene, view, ii + 0.5, jj + 0.5)
    return i0, j0, ii, jj, depths, owners


def _majority_object(ctx, owners) -> int:
    """Index of the object owning the most hit pixels; ties to smaller id."""
    obj_hits = owners[owners >= 0]
    if obj_hits.size == 0:
        raise EmptyRegion("no object pixels inside the 2D box")
    counts = np.bincount(obj_hits, minlength=len(ctx.scene.objects))
    order = sorted(
        (i for i in range(len(ctx.scene.objects)) if counts[i] > 0),
        key=lambda i: (-counts[i], ctx.scene.objects[i].id),
    )
    return order[0]


def _tool_camera_intrinsics(ctx, call):
    _require_view(ctx, call)
    k = ctx.scene.intrinsics
    return ValueList(
        tuple(
            Scalar(float(x))
            for x in (k.fx, k.fy, k.cx, k.cy, k.width, k.height)
        )
    )


def _tool_camera_extrinsics(ctx, call):
    view = _require_view(ctx, call)
    m = ctx.scene.pose(view).matrix4()
    return Matrix(tuple(tuple(row) for row in m.tolist()))


def _tool_depth_sensor(ctx, call):
    view = _require_view(ctx, call)
    point = call.arg("point")
    if point is not None:
        k = ctx.scene.intrinsics
        depths, _ = cast_rays(
            ctx.scene, view, [point.x * k.width], [point.y * k.height]
        )
        if not math.isfinite(depths[0]):
            raise EmptyRegion("no surface along this ray")
        return Scalar(float(depths[0]))
    *_, depths, _owners = _grid_hits(ctx, view, call.arg("box").box)
    valid = depths[np.isfinite(depths)]
    if valid.size == 0:
        raise EmptyRegion("no valid depth inside the 2D box")
    return ValueList(
        (
            Scalar(float(np.median(valid))),
            Scalar(float(valid.mean())),
            Scalar(float(valid.size) / float(depths.size)),
        )
    )


def _rle_encode(mask_flat: np.ndarray):
    """Run lengths alternating zero-runs and one-runs, starting with zeros."""
    runs = []
    current = False
    count = 0
    for bit in mask_flat:
        bit = bool(bit)
        if bit == current:
            count += 1
        else:
            runs.append(count)
            current = bit
            count = 1
    runs.append(count)
    return runs


def _tool_object_segmentation(ctx, call):
    view = _require_view(ctx, call)
    box2 = _resolve_box2(ctx, call, view)
    i0, j0, ii, _jj, _depths, owners = _grid_hits(ctx, view, box2)
    major = _majority_object(ctx, owners)
    mask = owners == major
    h, w = mask.shape
    header = [i0, j0, w, h]
    return ValueList(
        tuple(Scalar(float(x)) for x in header + _rle_encode(mask.reshape(-1)))
    )


def _tool_box_2d_to_box_3d(ctx, call):
    view = _require_view(ctx, call)
    box2 = _resolve_box2(ctx, call, view)
    # subsampled vote/point grid; full resolution adds nothing at box scale
    _i0, _j0, ii, jj, depths, owners = _grid_hits(ctx, view, box2, max_per_axis=64)
    major = _majority_object(ctx, owners)
    if ctx.mode == "oracle":
        return ObbValue(ctx.scene.objects[major].box3)
    mask = owners == major
    pose = ctx.scene.pose(view)
    cam_pts = geometry.unproject(
        ii[mask] + 0.5, jj[mask] + 0.5, depths[mask], ctx.scene.intrinsics
    )
    world_pts = transform(invert(pose), cam_pts)
    return ObbValue(fit_obb(world_pts, min_extent=0.01))


def _tool_point_3d_to_point_2d(ctx, call):
    view = _require_view(ctx, call)
    p = call.arg("point")
    ip = project(
        (p.x, p.y, p.z), ctx.scene.intrinsics, ctx.scene.pose(view)
    )
    return Point2(ip.u_norm, ip.v_norm, pixel=False)


def _to_dsl(value: Value):
    if isinstance(value, Scalar):
        return value.value
    if isinstance(value, Point2):
        return np.array([value.x, value.y])
    if isinstance(value, Point3):
        return np.array([value.x, value.y, value.z])
    if isinstance(value, Matrix):
        return np.array(value.rows, dtype=float)
    if isinstance(value, ObbValue):
        return value.box
    if isinstance(value, Box2Value):
        b = value.box
        return np.array([b.umin, b.vmin, b.umax, b.vmax])
    if isinstance(value, ValueList):
        if value.items and all(isinstance(x, Scalar) for x in value.items):
            return np.array([x.value for x in value.items])
        return tuple(_to_dsl(x) for x in value.items)
    raise SchemaError(f"cannot bind a {type(value).__name__} into a program")


def _from_dsl(result) -> Value:
    try:
        if isinstance(result, bool):
            return Scalar(1.0 if result else 0.0)
        if isinstance(result, float):
            return Scalar(result)
        if isinstance(result, OrientedBox3):
            return ObbValue(result)
        if isinstance(result, np.ndarray):
            if result.ndim == 1:
                if result.shape[0] == 2:
                    return Point2(float(result[0]), float(result[1]), pixel=False)
                if result.shape[0] == 3:
                    return Point3(float(result[0]), float(result[1]), float(result[2]))
                return ValueList(tuple(Scalar(float(x)) for x in result))
            if result.ndim == 2:
                return Matrix(tuple(tuple(float(x) for x in row) for row in result))
        if isinstance(result, tuple):
            return ValueList(tuple(_from_dsl(x) for x in result))
    except ValueError as exc:  # non-finite payloads from overflowing programs
        raise ToolError(f"program result is not representable: {exc}") from exc
    raise ToolError(f"cannot represent program result {type(result).__name__}")


def _tool_code_executor(ctx, call):
    source = call.arg("program").text
    uses = call.arg("uses")
    if uses is None:
        names = list(ctx.bindings)
    else:
        names = [t.text for t in uses.items]
        for name in names:
            if name not in ctx.bindings:
                raise SchemaError(f"unknown result binding {name!r}")
    bindings = {name: _to_dsl(ctx.bindings[name]) for name in names}
    result = minidsl.run(source, bindings)
    return _from_dsl(result)


_TOOL_IMPLS = {
    "camera_intrinsics": _tool_camera_intrinsics,
    "camera_extrinsics": _tool_camera_extrinsics,
    "depth_sensor": _tool_depth_sensor,
    "object_segmentation": _tool_object_segmentation,
    "box_2d_to_box_3d": _tool_box_2d_to_box_3d,
    "point_3d_to_point_2d": _tool_point_3d_to_point_2d,
    "code_executor": _tool_code_executor,
}


def execute_tool(ctx: ExecutionContext, call: ToolCall) -> Value:
    """Execute one tool call against the context's ground-truth scene."""
    problem = check_call(call)
    if problem is not None:
        if call.name not in REGISTRY:
            raise UnknownTool(problem)
        raise SchemaError(problem)
    return _TOOL_IMPLS[call.name](ctx, call)


def run_trajectory(ctx: ExecutionContext, t: Trajectory) -> Trajectory:
    """Replay a trajectory, recomputing every tool result.

    Each tool call executes in order; its result replaces the stored one (or
    is inserted when the trace carried none).  Results are bound as r1, r2,
    ... for later code_executor steps.  The first tool failure aborts with a
    TrajectoryRunError carrying the step index.
    """
    out = []
    call_no = 0
    skip_next_result = False
    for index, step in enumerate(t.steps):
        if isinstance(step, ToolResult):
            if skip_next_result:
                skip_next_result = False
                continue
            out.append(step)
            continue
        skip_next_result = False
        if isinstance(step, ToolCall):
            try:
                value = execute_tool(ctx, step)
            except (ToolError, UnknownView, geometry.GeometryError, minidsl.DslError) as exc:
                raise TrajectoryRunError(index, exc) from exc
            call_no += 1
            ctx.bindings[f"r{call_no}"] = value
            out.append(step)
            out.append(ToolResult(value))
            skip_next_result = True
        else:
            out.append(step)
    return Trajectory(tuple(out))
