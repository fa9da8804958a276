"""Hierarchical trajectory rewards, batch-relative advantages, and metrics.

The composite score is a weighted sum of five sub-rewards in [0, 1]:
format (structural validity), tool (registered name + schema-valid args),
parameter (exp(-alpha * L2) for continuous parameters, exact match for
discrete ones), code (execution and output-correctness indicators split by
lambda weights), and answer (exp(-gamma * L2) continuous, exact discrete).
Predicted calls align to ground-truth calls k-th to k-th within each tool
name.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from . import geometry, minidsl, runtime
from .runtime import ExecutionContext, check_call, execute_tool
from .scene import UnknownView
from .trajectory import (
    Box2Value,
    Choice,
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
    validate_format,
)

REWARD_KEYS = ("format", "tool", "param", "code", "answer")
DEFAULT_WEIGHTS = {"format": 0.1, "tool": 0.2, "param": 0.2, "code": 0.2, "answer": 0.3}

_DISCRETE_FORMATS = ("choice", "text")


class NonPositiveGroundTruth(ValueError):
    pass


@dataclass
class RewardConfig:
    """Weights and scales for the composite reward; loadable from JSON."""

    weights: dict = field(default_factory=lambda: dict(DEFAULT_WEIGHTS))
    alpha: float = 5.0
    gamma: float = 5.0
    lambda_exec: float = 0.3
    lambda_out: float = 0.7
    code_output_tol: float = 1e-6
    tool_mode: str = "average"  # or "product": one bad call zeroes the reward

    def __post_init__(self):
        if set(self.weights) != set(REWARD_KEYS):
            raise ValueError(f"weights must have exactly the keys {REWARD_KEYS}")
        if any(w < 0 for w in self.weights.values()):
            raise ValueError("weights must be non-negative")
        if abs(math.fsum(self.weights.values()) - 1.0) > 1e-9:
            raise ValueError("weights must sum to 1")
        if not (self.alpha > 0 and self.gamma > 0):
            raise ValueError("alpha and gamma must be positive")
        if self.lambda_exec < 0 or self.lambda_out < 0:
            raise ValueError("lambda weights must be non-negative")
        if abs((self.lambda_exec + self.lambda_out) - 1.0) > 1e-9:
            raise ValueError("lambda_exec + lambda_out must equal 1")
        if self.tool_mode not in ("average", "product"):
            raise ValueError("tool_mode must be 'average' or 'product'")

    @classmethod
    def from_dict(cls, doc: dict) -> "RewardConfig":
        kwargs = dict(doc)
        if "weights" in kwargs:
            kwargs["weights"] = dict(kwargs["weights"])
        return cls(**kwargs)

    @classmethod
    def from_file(cls, path) -> "RewardConfig":
        with open(path, "r", encoding="utf-8") as f:
            return cls.from_dict(json.load(f))

    def to_dict(self) -> dict:
        return {
            "weights": dict(self.weights),
            "alpha": self.alpha,
            "gamma": self.gamma,
            "lambda_exec": self.lambda_exec,
            "lambda_out": self.lambda_out,
            "code_output_tol": self.code_output_tol,
            "tool_mode": self.tool_mode,
        }


@dataclass
class RewardBreakdown:
    r_format: float
    r_tool: float
    r_param: float
    r_code: float
    r_answer: float
    composite: float
    diagnostics: tuple = ()

    def to_dict(self) -> dict:
        return {
            "r_format": self.r_format,
            "r_tool": self.r_tool,
            "r_param": self.r_param,
            "r_code": self.r_code,
            "r_answer": self.r_answer,
            "composite": self.composite,
            "diagnostics": [dict(d) for d in self.diagnostics],
        }


# ---------------------------------------------------------------------------
# Value comparison helpers
# ---------------------------------------------------------------------------


def _signature(v: Value):
    """Structural type signature; payloads compare only within equal signatures."""
    if isinstance(v, Scalar):
        return ("scalar", v.unit)
    if isinstance(v, Point2):
        return ("point2", v.pixel)
    if isinstance(v, Point3):
        return ("point3",)
    if isinstance(v, Matrix):
        return ("matrix", v.shape)
    if isinstance(v, Box2Value):
        return ("box2",)
    if isinstance(v, ObbValue):
        return ("obb",)
    if isinstance(v, ValueList):
        return ("list",) + tuple(_signature(x) for x in v.items)
    if isinstance(v, Choice):
        return ("choice",)
    if isinstance(v, Text):
        return ("text",)
    raise TypeError(type(v).__name__)


def _flatten(v: Value):
    """Flatten numeric payload to a float array, or None for non-numeric values."""
    if isinstance(v, Scalar):
        return np.array([v.value])
    if isinstance(v, Point2):
        return np.array([v.x, v.y])
    if isinstance(v, Point3):
        return np.array([v.x, v.y, v.z])
    if isinstance(v, Matrix):
        return np.asarray(v.rows, dtype=float).reshape(-1)
    if isinstance(v, Box2Value):
        b = v.box
        return np.array([b.umin, b.vmin, b.umax, b.vmax])
    if isinstance(v, ObbValue):
        b = v.box
        return np.array(b.center + b.half_extents + (b.yaw,))
    if isinstance(v, ValueList):
        parts = [_flatten(x) for x in v.items]
        if any(p is None for p in parts):
            return None
        if not parts:
            return np.zeros(0)
        return np.concatenate(parts)
    return None


def _continuous_score(pred: Value, gt: Value, scale: float) -> float:
    if _signature(pred) != _signature(gt):
        return 0.0
    a = _flatten(pred)
    b = _flatten(gt)
    if a is None or b is None:  # non-numeric payloads fall back to exact match
        return 1.0 if pred == gt else 0.0
    return math.exp(-scale * float(np.linalg.norm(a - b)))


def _values_close(pred: Value, gt: Value, tol: float) -> bool:
    if _signature(pred) != _signature(gt):
        return False
    a = _flatten(pred)
    b = _flatten(gt)
    if a is None or b is None:
        return pred == gt
    return bool(np.all(np.abs(a - b) <= tol * np.maximum(1.0, np.abs(b))))


# ---------------------------------------------------------------------------
# Sub-rewards
# ---------------------------------------------------------------------------


def score_format(t: Trajectory) -> float:
    return 1.0 if validate_format(t) else 0.0


def score_tool(t: Trajectory, gt: Trajectory | None = None, cfg: RewardConfig | None = None) -> float:
    """Per-call product of name-registered and schema-valid indicators.

    Averaged over calls by default; 'product' mode zeroes the reward on any
    bad call.  A call-free trajectory scores 1 only when the ground truth is
    also call-free.
    """
    cfg = cfg or RewardConfig()
    calls = t.calls
    if not calls:
        if gt is None or not gt.calls:
            return 1.0
        return 0.0
    per_call = [1.0 if check_call(c) is None else 0.0 for c in calls]
    if cfg.tool_mode == "product":
        return math.prod(per_call)
    return math.fsum(per_call) / len(per_call)


def _calls_by_name(t: Trajectory):
    groups = {}
    for call in t.calls:
        groups.setdefault(call.name, []).append(call)
    return groups


def _is_discrete_param(tool: str, name: str) -> bool:
    spec = runtime.REGISTRY.get(tool)
    if spec is None:
        return True
    param = spec.param(name)
    return True if param is None else param.discrete


def score_param(t: Trajectory, gt: Trajectory, cfg: RewardConfig | None = None) -> float:
    """Mean per-parameter accuracy against order-aligned ground-truth calls."""
    cfg = cfg or RewardConfig()
    pred_groups = _calls_by_name(t)
    total = 0.0
    count = 0
    for name, gt_calls in _calls_by_name(gt).items():
        pred_calls = pred_groups.get(name, [])
        for k, gcall in enumerate(gt_calls):
            pcall = pred_calls[k] if k < len(pred_calls) else None
            for key, gval in gcall.args:
                count += 1
                if pcall is None:
                    continue
                pval = pcall.arg(key)
                if pval is None:
                    continue
                if _is_discrete_param(name, key):
                    total += 1.0 if pval == gval else 0.0
                else:
                    total += _continuous_score(pval, gval, cfg.alpha)
    if count == 0:
        return 1.0
    return total / count


def _stored_results(t: Trajectory):
    """The ToolResult value following each call, aligned by call order."""
    results = []
    steps = t.steps
    for i, step in enumerate(steps):
        if isinstance(step, ToolCall):
            nxt = steps[i + 1] if i + 1 < len(steps) else None
            results.append(nxt.value if isinstance(nxt, ToolResult) else None)
    return results


def _execute_calls(t: Trajectory, scene, mode: str):
    """Run every call in order; returns per-call (value | None, error | None).

    A failed call leaves no binding, so dependent code calls fail too.
    """
    ctx = ExecutionContext(scene, mode)
    values = []
    errors = []
    for k, call in enumerate(t.calls):
        value = None
        error = None
        try:
            value = execute_tool(ctx, call)
            ctx.bindings[f"r{k + 1}"] = value
        except (
            runtime.ToolError,
            UnknownView,
            geometry.GeometryError,
            minidsl.DslError,
        ) as exc:
            error = exc
        values.append(value)
        errors.append(error)
    return values, errors


def _code_score(t: Trajectory, gt: Trajectory, values, cfg: RewardConfig) -> float:
    gt_results = _stored_results(gt)
    gt_code = [
        gt_results[i]
        for i, call in enumerate(gt.calls)
        if call.name == "code_executor"
    ]
    pred_code = [
        values[i] for i, call in enumerate(t.calls) if call.name == "code_executor"
    ]
    if not gt_code and not pred_code:
        return 1.0
    n = max(len(gt_code), len(pred_code))
    total = 0.0
    for k in range(min(len(gt_code), len(pred_code))):
        value = pred_code[k]
        executed = value is not None
        correct = (
            executed
            and gt_code[k] is not None
            and _values_close(value, gt_code[k], cfg.code_output_tol)
        )
        total += cfg.lambda_exec * (1.0 if executed else 0.0)
        total += cfg.lambda_out * (1.0 if correct else 0.0)
    return total / n


def score_code(
    t: Trajectory,
    ctx: ExecutionContext,
    gt: Trajectory,
    cfg: RewardConfig | None = None,
) -> float:
    """Execution and output-correctness score for code_executor calls.

    The predicted trajectory's tools run in order (failures cascade through
    the bindings they would have produced); each code call is compared to the
    order-aligned ground-truth code result within the configured tolerance.
    """
    cfg = cfg or RewardConfig()
    values, _ = _execute_calls(t, ctx.scene, ctx.mode)
    return _code_score(t, gt, values, cfg)


def score_answer(t: Trajectory, gt: Trajectory, cfg: RewardConfig | None = None) -> float:
    cfg = cfg or RewardConfig()
    pa = t.answer
    ga = gt.answer
    if pa is None or ga is None or pa.format != ga.format:
        return 0.0
    if pa.format in _DISCRETE_FORMATS:
        return 1.0 if pa.value == ga.value else 0.0
    return _continuous_score(pa.value, ga.value, cfg.gamma)


def composite_reward(parts: dict, cfg: RewardConfig | None = None) -> float:
    """Weighted sum of the five sub-rewards (exact 1.0 at all-ones defaults)."""
    cfg = cfg or RewardConfig()
    for key in REWARD_KEYS:
        if key not in parts:
            raise ValueError(f"missing sub-reward {key!r}")
    return math.fsum(cfg.weights[k] * parts[k] for k in REWARD_KEYS)


def score_trajectory(
    pred: Trajectory,
    gt: Trajectory,
    scene,
    mode: str = "oracle",
    cfg: RewardConfig | None = None,
) -> RewardBreakdown:
    """All five sub-rewards plus per-call diagnostics for one trajectory."""
    cfg = cfg or RewardConfig()
    values, errors = _execute_calls(pred, scene, mode)
    parts = {
        "format": score_format(pred),
        "tool": score_tool(pred, gt, cfg),
        "param": score_param(pred, gt, cfg),
        "code": _code_score(pred, gt, values, cfg),
        "answer": score_answer(pred, gt, cfg),
    }
    call_steps = [
        i for i, step in enumerate(pred.steps) if isinstance(step, ToolCall)
    ]
    diagnostics = []
    gt_groups = _calls_by_name(gt)
    seen = {}
    for idx, call in enumerate(pred.calls):
        k = seen.get(call.name, 0)
        seen[call.name] = k + 1
        gt_calls = gt_groups.get(call.name, [])
        matched = k < len(gt_calls)
        distance = None
        if matched:
            gcall = gt_calls[k]
            deltas = []
            for key, gval in gcall.args:
                pval = call.arg(key)
                if pval is None or _is_discrete_param(call.name, key):
                    continue
                a, b = _flatten(pval), _flatten(gval)
                if a is not None and b is not None and a.shape == b.shape:
                    deltas.append(float(np.linalg.norm(a - b)))
            if deltas:
                distance = math.fsum(deltas)
        diagnostics.append(
            {
                "tool": call.name,
                "step_index": call_steps[idx],
                "schema_ok": check_call(call) is None,
                "matched_gt_call": (call.name, k) if matched else None,
                "param_distance": distance,
                "error": str(errors[idx]) if errors[idx] is not None else None,
            }
        )
    return RewardBreakdown(
        r_format=parts["format"],
        r_tool=parts["tool"],
        r_param=parts["param"],
        r_code=parts["code"],
        r_answer=parts["answer"],
        composite=composite_reward(parts, cfg),
        diagnostics=tuple(diagnostics),
    )


# ---------------------------------------------------------------------------
# Policy-optimization math
# ---------------------------------------------------------------------------


@dataclass
class GrpoBatch:
    """Inputs for one batch of the clipped surrogate objective."""

    rewards: tuple
    ratios: tuple
    kls: tuple
    clip_eps: float = 0.2
    kl_coef: float = 0.0

    def __post_init__(self):
        self.rewards = tuple(float(r) for r in self.rewards)
        self.ratios = tuple(float(r) for r in self.ratios)
        self.kls = tuple(float(k) for k in self.kls)
        n = len(self.rewards)
        if n < 1:
            raise ValueError("batch must contain at least one sample")
        if len(self.ratios) != n or len(self.kls) != n:
            raise ValueError("rewards, ratios, and kls must have equal length")
        if any(r <= 0 for r in self.ratios):
            raise ValueError("importance ratios must be positive")
        if not (0 < self.clip_eps < 1):
            raise ValueError("clip range must be in (0, 1)")


def grpo_advantages(rewards) -> np.ndarray:
    """Batch-normalized advantages (r - mean) / population std; zeros when flat."""
    r = np.asarray(rewards, dtype=float)
    if r.ndim != 1 or r.size < 1:
        raise ValueError("rewards must be a non-empty 1-D sequence")
    # all-equal batches are the sigma_r = 0 case regardless of rounding
    if np.all(r == r[0]):
        return np.zeros_like(r)
    return (r - r.mean()) / r.std()


def grpo_objective(batch: GrpoBatch, advantages) -> float:
    """Clipped surrogate loss plus KL penalty.

    -(1/N) sum_i min(rho_i * A_i, clip(rho_i, 1-eps, 1+eps) * A_i)
    + beta * mean(KL_i)
    """
    adv = np.asarray(advantages, dtype=float)
    rho = np.asarray(batch.ratios, dtype=float)
    if adv.shape != rho.shape:
        raise ValueError("advantages must match the batch size")
    clipped = np.clip(rho, 1.0 - batch.clip_eps, 1.0 + batch.clip_eps)
    surrogate = np.minimum(rho * adv, clipped * adv)
    return float(-surrogate.mean() + batch.kl_coef * np.mean(batch.kls))


def sft_loss(token_logprobs) -> float:
    """Negative sum of next-token log probabilities."""
    logs = [float(x) for x in token_logprobs]
    if any(x > 0 for x in logs):
        raise ValueError("log probabilities cannot be positive")
    return -math.fsum(logs)


# ---------------------------------------------------------------------------
# Metrics
# ---------------------------------------------------------------------------


def evaluate_delta2(pred: float, gt: float) -> bool:
    """Scalar answer correctness within the closed interval [0.5x, 2x] of gt."""
    if not gt > 0:
        raise NonPositiveGroundTruth("ground truth must be positive")
    return 0.5 * gt <= pred <= 2.0 * gt


def check_interval(actual: float, lo: float, hi: float) -> bool:
    """Inclusive interval test used for metric-offset placement success."""
    if lo > hi:
        raise ValueError("interval bounds are inverted")
    return lo <= actual <= hi
