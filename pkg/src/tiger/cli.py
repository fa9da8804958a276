"""Command-line entry point: generate, score, run, eval, dsl.

Every command is deterministic given its inputs and flags and never mutates
its inputs.  Exit codes: 0 success, 1 config/parse error, 2 generation
failure, 3 tool error during replay.
"""

from __future__ import annotations

import argparse
import json
import math
import sys
import time
from dataclasses import dataclass, field

from . import generator, minidsl, rewards
from .generator import GenerationError, PlacementFailure, SceneParams, generate_dataset
from .rewards import RewardConfig, evaluate_delta2, check_interval, score_trajectory
from .runtime import ExecutionContext, TrajectoryRunError, run_trajectory
from .scene import Scene, SceneError
from .trajectory import (
    TrajectoryError,
    parse_trajectory,
    parse_value,
    render_trajectory,
    render_value,
)


@dataclass
class RunReport:
    """Per-sample reward rows plus aggregate means and failures."""

    rows: list = field(default_factory=list)
    failures: list = field(default_factory=list)
    seconds: float = 0.0

    @property
    def aggregates(self) -> dict:
        keys = ("r_format", "r_tool", "r_param", "r_code", "r_answer", "composite")
        if not self.rows:
            return {k: 0.0 for k in keys}
        return {k: math.fsum(r[k] for r in self.rows) / len(self.rows) for k in keys}


def _fail(message: str, code: int = 1) -> int:
    print(f"error: {message}", file=sys.stderr)
    return code


def _read_jsonl(path):
    records = []
    with open(path, "r", encoding="utf-8") as f:
        for number, line in enumerate(f, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                records.append((number, json.loads(line)))
            except json.JSONDecodeError as exc:
                raise ValueError(f"{path}:{number}: {exc}") from exc
    return records


# ---------------------------------------------------------------------------
# generate
# ---------------------------------------------------------------------------


def cmd_generate(args) -> int:
    try:
        with open(args.config, "r", encoding="utf-8") as f:
            config = json.load(f)
    except (OSError, json.JSONDecodeError) as exc:
        return _fail(f"cannot read config: {exc}")
    try:
        params = SceneParams.from_dict(config.get("scene", {}))
        mix = config.get("mix", generator.DEFAULT_MIX)
        count = int(config.get("count", 10))
        seed = int(config.get("seed", 0))
        if args.seed is not None:
            seed = args.seed
        generator.allocate_counts(mix, count)
        generator.check_mix_feasible(params, mix)
    except (ValueError, TypeError) as exc:
        return _fail(f"bad config: {exc}")
    try:
        manifest = generate_dataset(params, mix, count, seed, args.out, jobs=args.jobs)
    except (GenerationError, PlacementFailure) as exc:
        return _fail(str(exc), code=2)
    print(f"wrote {count} samples to {args.out}")
    print(f"manifest: {args.out}.manifest.json ({manifest['digest']})")
    return 0


# ---------------------------------------------------------------------------
# score
# ---------------------------------------------------------------------------


def cmd_score(args) -> int:
    started = time.monotonic()
    try:
        dataset = _read_jsonl(args.dataset)
        candidates = _read_jsonl(args.candidates)
    except (OSError, ValueError) as exc:
        return _fail(str(exc))
    cfg = RewardConfig()
    if args.reward_config:
        try:
            cfg = RewardConfig.from_file(args.reward_config)
        except (OSError, ValueError, TypeError) as exc:
            return _fail(f"bad reward config: {exc}")
    by_id = {}
    for _, record in dataset:
        by_id[record["id"]] = record
    report = RunReport()
    unmatched = []
    for number, cand in candidates:
        sample_id = cand.get("id")
        record = by_id.get(sample_id)
        if record is None:
            unmatched.append(sample_id)
            continue
        try:
            pred = parse_trajectory(cand["trajectory"])
            gt = parse_trajectory(record["trajectory"])
            scene = Scene.from_dict(record["scene"])
        except (TrajectoryError, SceneError, KeyError) as exc:
            return _fail(f"{args.candidates}:{number}: {exc}")
        breakdown = score_trajectory(pred, gt, scene, mode=args.mode, cfg=cfg)
        row = {"id": sample_id, **breakdown.to_dict()}
        report.rows.append(row)
        for diag in breakdown.diagnostics:
            if diag["error"] is not None:
                report.failures.append(
                    {
                        "id": sample_id,
                        "step_index": diag["step_index"],
                        "error": diag["error"],
                    }
                )
    report.seconds = time.monotonic() - started
    out = open(args.out, "w", encoding="utf-8") if args.out else None
    try:
        for row in report.rows:
            line = json.dumps(row)
            if out:
                out.write(line + "\n")
            else:
                print(line)
    finally:
        if out:
            out.close()
    agg = report.aggregates
    print(f"scored {len(report.rows)} candidates in {report.seconds:.2f}s", file=sys.stderr)
    for key, value in agg.items():
        print(f"  mean {key}: {value:.6f}", file=sys.stderr)
    for failure in report.failures:
        print(
            f"  id {failure['id']} failed at step {failure['step_index']}: {failure['error']}",
            file=sys.stderr,
        )
    if unmatched:
        print(f"  unmatched candidate ids: {unmatched}", file=sys.stderr)
    return 0


# ---------------------------------------------------------------------------
# run
# ---------------------------------------------------------------------------


def cmd_run(args) -> int:
    try:
        scene = Scene.load(args.scene)
        with open(args.trajectory, "r", encoding="utf-8") as f:
            text = f.read()
        trajectory = parse_trajectory(text)
    except (OSError, SceneError, ValueError) as exc:
        return _fail(str(exc))
    ctx = ExecutionContext(scene, args.mode)
    try:
        filled = run_trajectory(ctx, trajectory)
    except TrajectoryRunError as exc:
        return _fail(str(exc), code=3)
    rendered = render_trajectory(filled)
    if args.out:
        with open(args.out, "w", encoding="utf-8") as f:
            f.write(rendered + "\n")
    else:
        print(rendered)
    return 0


# ---------------------------------------------------------------------------
# eval
# ---------------------------------------------------------------------------


def _eval_record(metric: str, pred: dict, ref: dict) -> bool:
    if metric == "delta2":
        return evaluate_delta2(float(pred["value"]), float(ref["value"]))
    if metric == "exact":
        return pred["value"] == ref["value"]
    if metric == "interval":
        return check_interval(float(pred["value"]), float(ref["lo"]), float(ref["hi"]))
    raise ValueError(metric)


def cmd_eval(args) -> int:
    try:
        predictions = _read_jsonl(args.predictions)
        references = _read_jsonl(args.references)
    except (OSError, ValueError) as exc:
        return _fail(str(exc))
    refs = {r["id"]: r for _, r in references}
    verdicts = []
    for number, pred in predictions:
        ref = refs.get(pred.get("id"))
        if ref is None:
            return _fail(f"{args.predictions}:{number}: no reference with id {pred.get('id')!r}")
        try:
            ok = _eval_record(args.metric, pred, ref)
        except (ValueError, KeyError, rewards.NonPositiveGroundTruth) as exc:
            return _fail(f"{args.predictions}:{number}: {exc}")
        verdicts.append({"id": pred["id"], "correct": ok})
    for verdict in verdicts:
        print(json.dumps(verdict))
    correct = sum(1 for v in verdicts if v["correct"])
    total = len(verdicts)
    accuracy = correct / total if total else 0.0
    print(f"accuracy: {correct}/{total} = {accuracy:.4f}", file=sys.stderr)
    return 0


# ---------------------------------------------------------------------------
# dsl
# ---------------------------------------------------------------------------


def cmd_dsl(args) -> int:
    if args.file:
        try:
            with open(args.file, "r", encoding="utf-8") as f:
                source = f.read()
        except OSError as exc:
            return _fail(str(exc))
    else:
        source = args.program
    bindings = {}
    if args.bindings:
        try:
            with open(args.bindings, "r", encoding="utf-8") as f:
                doc = json.load(f)
            from .runtime import _to_dsl

            bindings = {name: _to_dsl(parse_value(text)) for name, text in doc.items()}
        except (OSError, ValueError) as exc:
            return _fail(f"bad bindings: {exc}")
    try:
        result = minidsl.run(source, bindings)
    except minidsl.DslError as exc:
        return _fail(str(exc))
    from .runtime import _from_dsl

    print(render_value(_from_dsl(result)))
    return 0


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="tiger",
        description="Geometric tool runtime, dataset generation, and trajectory scoring.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", help="generate a dataset from a config file")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=None, help="override the config seed")
    p.add_argument("--jobs", type=int, default=1)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("score", help="score candidate trajectories against a dataset")
    p.add_argument("--dataset", required=True)
    p.add_argument("--candidates", required=True)
    p.add_argument("--reward-config", default=None)
    p.add_argument("--mode", choices=("oracle", "fitted"), default="oracle")
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_score)

    p = sub.add_parser("run", help="replay a trajectory against a scene")
    p.add_argument("--scene", required=True)
    p.add_argument("--trajectory", required=True)
    p.add_argument("--mode", choices=("oracle", "fitted"), default="oracle")
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("eval", help="grade scalar predictions against references")
    p.add_argument("--predictions", required=True)
    p.add_argument("--references", required=True)
    p.add_argument("--metric", choices=("delta2", "exact", "interval"), default="delta2")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("dsl", help="evaluate a program for debugging")
    group = p.add_mutually_exclusive_group(required=True)
    group.add_argument("--program")
    group.add_argument("--file")
    p.add_argument("--bindings", default=None, help="JSON map of name -> value literal")
    p.set_defaults(func=cmd_dsl)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
