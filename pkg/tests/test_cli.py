import json

import pytest

from tiger.cli import main
from tiger.generator import SceneParams, generate_scene

CONFIG = {
    "count": 6,
    "seed": 13,
    "mix": {"object_size": 0.5, "inter_object_distance": 0.5},
    "scene": {"object_count": [2, 4], "view_count": [1, 3]},
}


@pytest.fixture
def dataset(tmp_path):
    config_path = tmp_path / "config.json"
    config_path.write_text(json.dumps(CONFIG))
    out = tmp_path / "data.jsonl"
    assert main(["generate", "--config", str(config_path), "--out", str(out)]) == 0
    return out


class TestGenerate:
    def test_writes_dataset_and_manifest(self, dataset):
        lines = dataset.read_text().splitlines()
        assert len(lines) == 6
        manifest = json.loads((dataset.parent / "data.jsonl.manifest.json").read_text())
        assert manifest["count"] == 6
        assert manifest["digest"].startswith("sha256:")

    def test_deterministic_digest(self, tmp_path, dataset):
        config_path = tmp_path / "config.json"
        out2 = tmp_path / "data2.jsonl"
        assert main(["generate", "--config", str(config_path), "--out", str(out2)]) == 0
        assert out2.read_bytes() == dataset.read_bytes()

    def test_invalid_mix_exits_one(self, tmp_path, capsys):
        config = dict(CONFIG, mix={"object_size": 0.5, "object_depth": 0.2})
        path = tmp_path / "bad.json"
        path.write_text(json.dumps(config))
        code = main(["generate", "--config", str(path), "--out", str(tmp_path / "x.jsonl")])
        assert code == 1
        assert "sum to 1" in capsys.readouterr().err

    def test_missing_config_exits_one(self, tmp_path):
        code = main(
            ["generate", "--config", str(tmp_path / "none.json"), "--out", str(tmp_path / "x")]
        )
        assert code == 1

    def test_infeasible_mix_exits_one(self, tmp_path, capsys):
        config = {
            "count": 2,
            "mix": {"relative_camera_pose": 1.0},
            "scene": {"view_count": [1, 1]},
        }
        path = tmp_path / "one_view.json"
        path.write_text(json.dumps(config))
        code = main(["generate", "--config", str(path), "--out", str(tmp_path / "x.jsonl")])
        assert code == 1
        assert "views" in capsys.readouterr().err


class TestScore:
    def test_self_scoring_is_perfect(self, tmp_path, dataset):
        candidates = tmp_path / "cands.jsonl"
        with open(candidates, "w") as f:
            for line in dataset.read_text().splitlines():
                record = json.loads(line)
                f.write(
                    json.dumps({"id": record["id"], "trajectory": record["trajectory"]}) + "\n"
                )
        report = tmp_path / "report.jsonl"
        code = main(
            [
                "score",
                "--dataset",
                str(dataset),
                "--candidates",
                str(candidates),
                "--out",
                str(report),
            ]
        )
        assert code == 0
        rows = [json.loads(line) for line in report.read_text().splitlines()]
        assert len(rows) == 6
        assert all(row["composite"] == 1.0 for row in rows)

    def test_empty_candidates(self, tmp_path, dataset):
        empty = tmp_path / "empty.jsonl"
        empty.write_text("")
        code = main(["score", "--dataset", str(dataset), "--candidates", str(empty)])
        assert code == 0

    def test_malformed_trajectory_names_line(self, tmp_path, dataset, capsys):
        record = json.loads(dataset.read_text().splitlines()[0])
        bad = tmp_path / "bad.jsonl"
        bad.write_text(json.dumps({"id": record["id"], "trajectory": "<think>no"}) + "\n")
        code = main(["score", "--dataset", str(dataset), "--candidates", str(bad)])
        assert code == 1
        assert ":1:" in capsys.readouterr().err

    def test_unmatched_ids_reported(self, tmp_path, dataset, capsys):
        record = json.loads(dataset.read_text().splitlines()[0])
        cands = tmp_path / "cands.jsonl"
        cands.write_text(json.dumps({"id": 999, "trajectory": record["trajectory"]}) + "\n")
        code = main(["score", "--dataset", str(dataset), "--candidates", str(cands)])
        assert code == 0
        assert "unmatched" in capsys.readouterr().err


class TestRun:
    def test_replay_is_byte_identical(self, tmp_path, dataset):
        record = json.loads(dataset.read_text().splitlines()[0])
        scene_path = tmp_path / "scene.json"
        scene_path.write_text(json.dumps(record["scene"]))
        traj_path = tmp_path / "traj.txt"
        traj_path.write_text(record["trajectory"])
        out = tmp_path / "filled.txt"
        code = main(
            [
                "run",
                "--scene",
                str(scene_path),
                "--trajectory",
                str(traj_path),
                "--out",
                str(out),
            ]
        )
        assert code == 0
        assert out.read_text() == record["trajectory"] + "\n"

    def test_identity_extrinsics(self, tmp_path, capsys):
        scene = generate_scene(SceneParams(object_count=(1, 1), view_count=(1, 1)), 3)
        scene_path = tmp_path / "scene.json"
        scene_path.write_text(scene.to_json())
        traj_path = tmp_path / "traj.txt"
        traj_path.write_text(
            "<think>pose</think>"
            "<tool_call>camera_extrinsics(view=0)</tool_call>"
            "<answer format=scalar>0</answer>"
        )
        code = main(["run", "--scene", str(scene_path), "--trajectory", str(traj_path)])
        assert code == 0
        assert "[[1, 0, 0, 0], [0, 1, 0, 0], [0, 0, 1, 0], [0, 0, 0, 1]]" in capsys.readouterr().out

    def test_unknown_tool_exits_three(self, tmp_path, capsys):
        scene = generate_scene(SceneParams(object_count=(1, 1), view_count=(1, 1)), 3)
        scene_path = tmp_path / "scene.json"
        scene_path.write_text(scene.to_json())
        traj_path = tmp_path / "traj.txt"
        traj_path.write_text(
            "<think>x</think>"
            "<tool_call>warp_drive(view=0)</tool_call>"
            "<answer format=scalar>0</answer>"
        )
        code = main(["run", "--scene", str(scene_path), "--trajectory", str(traj_path)])
        assert code == 3
        assert "step 1" in capsys.readouterr().err


class TestEval:
    def _write(self, path, rows):
        with open(path, "w") as f:
            for row in rows:
                f.write(json.dumps(row) + "\n")

    def test_delta2_perfect(self, tmp_path, capsys):
        preds = tmp_path / "p.jsonl"
        refs = tmp_path / "r.jsonl"
        rows = [{"id": i, "value": 1.0 + i} for i in range(5)]
        self._write(preds, rows)
        self._write(refs, rows)
        code = main(
            ["eval", "--predictions", str(preds), "--references", str(refs), "--metric", "delta2"]
        )
        assert code == 0
        assert "accuracy: 5/5" in capsys.readouterr().err

    def test_delta2_all_outside(self, tmp_path, capsys):
        preds = tmp_path / "p.jsonl"
        refs = tmp_path / "r.jsonl"
        self._write(preds, [{"id": i, "value": 0.49 * (1.0 + i)} for i in range(4)])
        self._write(refs, [{"id": i, "value": 1.0 + i} for i in range(4)])
        code = main(
            ["eval", "--predictions", str(preds), "--references", str(refs), "--metric", "delta2"]
        )
        assert code == 0
        assert "accuracy: 0/4" in capsys.readouterr().err

    def test_delta2_spotcheck_against_function(self, tmp_path, capsys):
        from tiger.rewards import evaluate_delta2

        import numpy as np

        rng = np.random.default_rng(17)
        refs = [{"id": i, "value": float(rng.uniform(0.5, 4.0))} for i in range(20)]
        preds = [
            {"id": i, "value": float(r["value"] * rng.uniform(0.3, 2.5))}
            for i, r in enumerate(refs)
        ]
        p, r = tmp_path / "p.jsonl", tmp_path / "r.jsonl"
        self._write(p, preds)
        self._write(r, refs)
        code = main(["eval", "--predictions", str(p), "--references", str(r)])
        assert code == 0
        out = capsys.readouterr().out.splitlines()
        for line in out:
            row = json.loads(line)
            expected = evaluate_delta2(preds[row["id"]]["value"], refs[row["id"]]["value"])
            assert row["correct"] == expected

    def test_interval_metric(self, tmp_path, capsys):
        preds = tmp_path / "p.jsonl"
        refs = tmp_path / "r.jsonl"
        self._write(preds, [{"id": 0, "value": 0.1}, {"id": 1, "value": 0.3}])
        self._write(refs, [{"id": 0, "lo": 0.05, "hi": 0.15}, {"id": 1, "lo": 0.05, "hi": 0.15}])
        code = main(
            ["eval", "--predictions", str(preds), "--references", str(refs), "--metric", "interval"]
        )
        assert code == 0
        assert "accuracy: 1/2" in capsys.readouterr().err

    def test_misaligned_ids_exit_one(self, tmp_path):
        preds = tmp_path / "p.jsonl"
        refs = tmp_path / "r.jsonl"
        self._write(preds, [{"id": 7, "value": 1.0}])
        self._write(refs, [{"id": 0, "value": 1.0}])
        code = main(["eval", "--predictions", str(preds), "--references", str(refs)])
        assert code == 1


class TestDsl:
    def test_program_argument(self, capsys):
        assert main(["dsl", "--program", "norm(vec(3, 4, 0))"]) == 0
        assert capsys.readouterr().out.strip() == "5"

    def test_bindings_file(self, tmp_path, capsys):
        bindings = tmp_path / "b.json"
        bindings.write_text(
            json.dumps(
                {
                    "a": "obb(center=(0, 0, 0), half=(0.5, 0.5, 0.5), yaw=0)",
                    "b": "obb(center=(3, 0, 0), half=(0.5, 0.5, 0.5), yaw=0)",
                }
            )
        )
        code = main(["dsl", "--program", "obb_dist(a, b)", "--bindings", str(bindings)])
        assert code == 0
        assert capsys.readouterr().out.strip() == "2"

    def test_error_exits_one(self, capsys):
        assert main(["dsl", "--program", "1/0"]) == 1
